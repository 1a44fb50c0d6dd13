//! Flat parameter storage, small linear-algebra kernels and the Adam optimizer.

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

/// A row-major matrix (or vector, with `cols == 1`) stored inside a flat
/// parameter buffer.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Slot {
    pub off: usize,
    pub rows: usize,
    pub cols: usize,
}

impl Slot {
    #[inline]
    pub fn len(&self) -> usize {
        self.rows * self.cols
    }

    #[inline]
    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    #[inline]
    pub fn range(&self) -> std::ops::Range<usize> {
        self.off..self.off + self.len()
    }

    #[inline]
    pub fn at(&self, r: usize, c: usize) -> usize {
        self.off + r * self.cols + c
    }
}

/// Hands out consecutive slots.
#[derive(Debug, Default)]
pub struct LayoutBuilder {
    next: usize,
    /// Initialization scale per slot (0 for biases).
    pub init: Vec<(Slot, f64)>,
}

impl LayoutBuilder {
    pub fn matrix(&mut self, rows: usize, cols: usize) -> Slot {
        let slot = Slot {
            off: self.next,
            rows,
            cols,
        };
        self.next += rows * cols;
        self.init.push((slot, 1.0 / (cols.max(1) as f64).sqrt()));
        slot
    }

    pub fn bias(&mut self, rows: usize, cols: usize) -> Slot {
        let slot = Slot {
            off: self.next,
            rows,
            cols,
        };
        self.next += rows * cols;
        self.init.push((slot, 0.0));
        slot
    }

    pub fn len(&self) -> usize {
        self.next
    }

    pub fn is_empty(&self) -> bool {
        self.next == 0
    }

    pub fn initialize<R: Rng>(&self, rng: &mut R) -> Vec<f64> {
        let mut w = vec![0.0; self.next];
        for (slot, scale) in &self.init {
            if *scale > 0.0 {
                for x in &mut w[slot.range()] {
                    let n: f64 = StandardNormal.sample(rng);
                    *x = n * scale;
                }
            }
        }
        w
    }
}

/// Dot product with four independent accumulators so the loop vectorizes.
#[inline]
pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    let n = a.len().min(b.len());
    let (a, b) = (&a[..n], &b[..n]);
    let mut acc = [0.0; 4];
    let mut ca = a.chunks_exact(4);
    let mut cb = b.chunks_exact(4);
    for (x, y) in (&mut ca).zip(&mut cb) {
        acc[0] += x[0] * y[0];
        acc[1] += x[1] * y[1];
        acc[2] += x[2] * y[2];
        acc[3] += x[3] * y[3];
    }
    let tail: f64 = ca.remainder().iter().zip(cb.remainder()).map(|(x, y)| x * y).sum();
    (acc[0] + acc[1]) + (acc[2] + acc[3]) + tail
}

/// `out += W x` for `W` stored at `slot`.
#[inline]
pub fn matvec_add(out: &mut [f64], params: &[f64], slot: Slot, x: &[f64]) {
    debug_assert_eq!(out.len(), slot.rows);
    debug_assert_eq!(x.len(), slot.cols);
    let w = &params[slot.range()];
    for (r, o) in out.iter_mut().enumerate() {
        *o += dot(&w[r * slot.cols..(r + 1) * slot.cols], x);
    }
}

/// `out += W^T dy`.
#[inline]
pub fn matvec_t_add(out: &mut [f64], params: &[f64], slot: Slot, dy: &[f64]) {
    debug_assert_eq!(out.len(), slot.cols);
    debug_assert_eq!(dy.len(), slot.rows);
    let w = &params[slot.range()];
    for (r, &g) in dy.iter().enumerate() {
        if g == 0.0 {
            continue;
        }
        let row = &w[r * slot.cols..(r + 1) * slot.cols];
        for (o, a) in out.iter_mut().zip(row) {
            *o += a * g;
        }
    }
}

/// `dW += dy x^T`.
#[inline]
pub fn outer_add(grad: &mut [f64], slot: Slot, dy: &[f64], x: &[f64]) {
    let g = &mut grad[slot.range()];
    for (r, &d) in dy.iter().enumerate() {
        if d == 0.0 {
            continue;
        }
        let row = &mut g[r * slot.cols..(r + 1) * slot.cols];
        for (o, b) in row.iter_mut().zip(x) {
            *o += d * b;
        }
    }
}

#[inline]
pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

#[inline]
pub fn softplus(x: f64) -> f64 {
    if x > 30.0 {
        x
    } else {
        x.exp().ln_1p()
    }
}

/// Numerically stable softmax, in place.
pub fn softmax(v: &mut [f64]) {
    let m = v.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut s = 0.0;
    for x in v.iter_mut() {
        *x = (*x - m).exp();
        s += *x;
    }
    for x in v.iter_mut() {
        *x /= s;
    }
}

/// Adam with global-norm gradient clipping.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub clip_norm: f64,
    step: u64,
    m: Vec<f64>,
    v: Vec<f64>,
}

impl Adam {
    pub fn new(n: usize, lr: f64, clip_norm: f64) -> Self {
        Self {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            clip_norm,
            step: 0,
            m: vec![0.0; n],
            v: vec![0.0; n],
        }
    }

    pub fn update(&mut self, params: &mut [f64], grad: &mut [f64]) {
        let norm = grad.iter().map(|g| g * g).sum::<f64>().sqrt();
        if norm > self.clip_norm {
            let k = self.clip_norm / norm;
            grad.iter_mut().for_each(|g| *g *= k);
        }
        self.step += 1;
        let b1t = 1.0 - self.beta1.powi(self.step as i32);
        let b2t = 1.0 - self.beta2.powi(self.step as i32);
        for i in 0..params.len() {
            let g = grad[i];
            self.m[i] = self.beta1 * self.m[i] + (1.0 - self.beta1) * g;
            self.v[i] = self.beta2 * self.v[i] + (1.0 - self.beta2) * g * g;
            let mh = self.m[i] / b1t;
            let vh = self.v[i] / b2t;
            params[i] -= self.lr * mh / (vh.sqrt() + self.eps);
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn kernels() {
        let mut lb = LayoutBuilder::default();
        let w = lb.matrix(2, 3);
        let p = vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0];
        let mut out = vec![0.0; 2];
        matvec_add(&mut out, &p, w, &[1.0, 0.0, -1.0]);
        assert_eq!(out, vec![-2.0, -2.0]);
        let mut back = vec![0.0; 3];
        matvec_t_add(&mut back, &p, w, &[1.0, 1.0]);
        assert_eq!(back, vec![5.0, 7.0, 9.0]);
        let mut g = vec![0.0; 6];
        outer_add(&mut g, w, &[1.0, 2.0], &[1.0, 0.0, 3.0]);
        assert_eq!(g, vec![1.0, 0.0, 3.0, 2.0, 0.0, 6.0]);
    }

    #[test]
    fn adam_minimizes_quadratic() {
        let mut x = vec![3.0, -2.0];
        let mut opt = Adam::new(2, 0.05, 10.0);
        for _ in 0..2000 {
            let mut g: Vec<f64> = x.iter().map(|v| 2.0 * v).collect();
            opt.update(&mut x, &mut g);
        }
        assert!(x.iter().all(|v| v.abs() < 1e-3));
    }

    #[test]
    fn softmax_sums_to_one() {
        let mut v = vec![1000.0, 1001.0, -5.0];
        softmax(&mut v);
        assert!((v.iter().sum::<f64>() - 1.0).abs() < 1e-12);
    }
}
