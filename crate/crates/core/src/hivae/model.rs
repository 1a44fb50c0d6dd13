//! Network layout, forward pass and hand-written backward pass.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::likelihood::{CellDist, Head};
use super::normalize::NormalizationStats;
use super::params::{matvec_add, matvec_t_add, outer_add, sigmoid, softmax, LayoutBuilder, Slot};
use super::{EncoderStrategy, HivaeConfig, LatentCode};
use crate::schema::Likelihood;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum EncoderSlots {
    /// One tanh layer over the (concatenated) visit inputs.
    Dense { w: Slot, b: Slot },
    /// LSTM over visits; gates ordered input, forget, cell, output.
    Lstm { w: Slot, u: Slot, b: Slot },
}

/// Dimensions and parameter slots of one autoencoder.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Architecture {
    pub strategy: EncoderStrategy,
    pub n_visits: usize,
    pub likelihoods: Vec<Likelihood>,
    /// Offset of each variable's input features inside one visit block.
    pub input_offsets: Vec<usize>,
    /// Offset of the mask channels inside one visit block.
    pub mask_offset: usize,
    /// Features per visit (values plus mask channels).
    pub in_width: usize,
    pub hidden: usize,
    pub s_dim: usize,
    pub z_dim: usize,
    pub y_dim: usize,
    pub encoder: EncoderSlots,
    pub s_w: Slot,
    pub s_b: Slot,
    pub mu_w: Slot,
    pub mu_b: Slot,
    pub lv_w: Slot,
    pub lv_b: Slot,
    pub prior_mu: Slot,
    pub g_w: Slot,
    pub g_b: Slot,
    /// Indexed `visit * n_vars + var`.
    pub heads: Vec<Head>,
    pub n_params: usize,
}

fn input_width(lik: Likelihood) -> usize {
    match lik {
        Likelihood::Real | Likelihood::Positive | Likelihood::Count => 1,
        Likelihood::Categorical { levels } => levels,
        Likelihood::Ordinal { levels } => levels - 1,
    }
}

impl Architecture {
    pub fn build(likelihoods: &[Likelihood], n_visits: usize, config: &HivaeConfig) -> (Self, LayoutBuilder) {
        let d = likelihoods.len();
        let mut input_offsets = Vec::with_capacity(d);
        let mut off = 0;
        for &lik in likelihoods {
            input_offsets.push(off);
            off += input_width(lik);
        }
        let mask_offset = off;
        let in_width = off + d;
        let (h, s, z, yd) = (config.lstm_dim, config.s_dim, config.z_dim, config.y_dim);

        let mut lb = LayoutBuilder::default();
        let encoder = match config.encoder_strategy {
            EncoderStrategy::Recurrent => EncoderSlots::Lstm {
                w: lb.matrix(4 * h, in_width),
                u: lb.matrix(4 * h, h),
                b: lb.bias(4 * h, 1),
            },
            _ => EncoderSlots::Dense {
                w: lb.matrix(h, n_visits * in_width),
                b: lb.bias(h, 1),
            },
        };
        let s_w = lb.matrix(s, h);
        let s_b = lb.bias(s, 1);
        let mu_w = lb.matrix(z, h);
        let mu_b = lb.bias(z, s);
        let lv_w = lb.matrix(z, h);
        let lv_b = lb.bias(z, s);
        let prior_mu = lb.bias(z, s);
        let g_w = lb.matrix(n_visits * yd, z);
        let g_b = lb.bias(n_visits * yd, 1);
        let mut heads = Vec::with_capacity(n_visits * d);
        for _ in 0..n_visits {
            for &lik in likelihoods {
                heads.push(Head::build(&mut lb, lik, yd, s));
            }
        }
        let arch = Self {
            strategy: config.encoder_strategy,
            n_visits,
            likelihoods: likelihoods.to_vec(),
            input_offsets,
            mask_offset,
            in_width,
            hidden: h,
            s_dim: s,
            z_dim: z,
            y_dim: yd,
            encoder,
            s_w,
            s_b,
            mu_w,
            mu_b,
            lv_w,
            lv_b,
            prior_mu,
            g_w,
            g_b,
            heads,
            n_params: lb.len(),
        };
        (arch, lb)
    }

    pub fn n_vars(&self) -> usize {
        self.likelihoods.len()
    }

    /// Initial parameters: scaled Gaussian weights, zero biases, and spread
    /// prior means so mixture components start apart.
    pub fn initial_params(&self, lb: &LayoutBuilder, seed: u64) -> Vec<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut p = lb.initialize(&mut rng);
        if let EncoderSlots::Lstm { b, .. } = self.encoder {
            for k in self.hidden..2 * self.hidden {
                p[b.off + k] = 1.0;
            }
        }
        if self.s_dim > 1 {
            for s in 0..self.s_dim {
                let centre = s as f64 - (self.s_dim - 1) as f64 / 2.0;
                for k in 0..self.z_dim {
                    p[self.prior_mu.at(k, s)] = 2.0 * centre;
                }
            }
        }
        p
    }

    /// Encoder input: per visit, value features then one mask channel per
    /// variable. Masked cells contribute zeros regardless of their value.
    pub fn encode_input(&self, x: &[f64], m: &[bool], input: &mut [f64]) {
        let d = self.n_vars();
        input.fill(0.0);
        for t in 0..self.n_visits {
            let base = t * self.in_width;
            for j in 0..d {
                let k = t * d + j;
                if !m[k] {
                    continue;
                }
                let off = base + self.input_offsets[j];
                match self.likelihoods[j] {
                    Likelihood::Real | Likelihood::Positive => input[off] = x[k],
                    Likelihood::Count => input[off] = x[k].max(0.0).ln_1p(),
                    Likelihood::Categorical { .. } => input[off + x[k] as usize] = 1.0,
                    Likelihood::Ordinal { levels } => {
                        let level = x[k] as usize;
                        for l in 0..levels - 1 {
                            input[off + l] = if level > l { 1.0 } else { 0.0 };
                        }
                    }
                }
                input[base + self.mask_offset + j] = 1.0;
            }
        }
    }
}

/// Scratch buffers for one participant's forward/backward pass.
#[derive(Debug, Clone)]
pub(crate) struct Workspace {
    input: Vec<f64>,
    gates: Vec<f64>,
    cs: Vec<f64>,
    hs: Vec<f64>,
    h: Vec<f64>,
    dh: Vec<f64>,
    probs: Vec<f64>,
    mu: Vec<f64>,
    lv: Vec<f64>,
    z: Vec<f64>,
    y: Vec<f64>,
    dy: Vec<f64>,
    dz: Vec<f64>,
    dmu: Vec<f64>,
    dlv: Vec<f64>,
    loss_s: Vec<f64>,
    da: Vec<f64>,
    dh_next: Vec<f64>,
}

impl Workspace {
    pub(crate) fn new(a: &Architecture) -> Self {
        let (v, h, s, z) = (a.n_visits, a.hidden, a.s_dim, a.z_dim);
        Self {
            input: vec![0.0; v * a.in_width],
            gates: vec![0.0; v * 4 * h],
            cs: vec![0.0; (v + 1) * h],
            hs: vec![0.0; (v + 1) * h],
            h: vec![0.0; h],
            dh: vec![0.0; h],
            probs: vec![0.0; s],
            mu: vec![0.0; s * z],
            lv: vec![0.0; s * z],
            z: vec![0.0; z],
            y: vec![0.0; v * a.y_dim],
            dy: vec![0.0; v * a.y_dim],
            dz: vec![0.0; z],
            dmu: vec![0.0; z],
            dlv: vec![0.0; z],
            loss_s: vec![0.0; s],
            da: vec![0.0; 4 * h],
            dh_next: vec![0.0; h],
        }
    }
}

/// Negative ELBO of one participant and its parts (weighted by `q(s|x)`).
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct LossParts {
    pub total: f64,
    pub recon: f64,
    pub kl_z: f64,
    pub kl_s: f64,
}

/// Recognition-model output for one participant.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Posterior {
    /// `q(s|x)`.
    pub probs: Vec<f64>,
    /// Posterior means of `z`, row per component.
    pub mean: Vec<Vec<f64>>,
    pub log_var: Vec<Vec<f64>>,
}

impl Posterior {
    pub fn argmax_s(&self) -> usize {
        let mut best = 0;
        for (k, &p) in self.probs.iter().enumerate() {
            if p > self.probs[best] {
                best = k;
            }
        }
        best
    }

    /// `s` at the mode of `q(s|x)` and the posterior mean of `z` given that `s`.
    pub fn code(&self) -> LatentCode {
        let s = self.argmax_s();
        LatentCode {
            s,
            z: self.mean[s].clone(),
        }
    }
}

/// One trained (or freshly initialized) autoencoder.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HivaeModel {
    pub config: HivaeConfig,
    pub arch: Architecture,
    pub params: Vec<f64>,
    pub stats: NormalizationStats,
    pub names: Vec<String>,
    /// Visit covered by a per-visit model.
    pub visit: Option<usize>,
}

impl HivaeModel {
    pub fn new(
        config: &HivaeConfig,
        names: Vec<String>,
        likelihoods: &[Likelihood],
        stats: NormalizationStats,
        visit: Option<usize>,
    ) -> Self {
        let (arch, lb) = Architecture::build(likelihoods, stats.n_visits, config);
        let params = arch.initial_params(&lb, config.seed);
        Self {
            config: config.clone(),
            arch,
            params,
            stats,
            names,
            visit,
        }
    }

    fn encoder_forward(&self, p: &[f64], ws: &mut Workspace) {
        let a = &self.arch;
        let hd = a.hidden;
        match a.encoder {
            EncoderSlots::Dense { w, b } => {
                ws.h.copy_from_slice(&p[b.range()]);
                matvec_add(&mut ws.h, p, w, &ws.input);
                ws.h.iter_mut().for_each(|x| *x = x.tanh());
            }
            EncoderSlots::Lstm { w, u, b } => {
                ws.cs[..hd].fill(0.0);
                ws.hs[..hd].fill(0.0);
                for t in 0..a.n_visits {
                    let g = &mut ws.gates[t * 4 * hd..(t + 1) * 4 * hd];
                    g.copy_from_slice(&p[b.range()]);
                    matvec_add(g, p, w, &ws.input[t * a.in_width..(t + 1) * a.in_width]);
                    matvec_add(g, p, u, &ws.hs[t * hd..(t + 1) * hd]);
                    for k in 0..hd {
                        g[k] = sigmoid(g[k]);
                        g[hd + k] = sigmoid(g[hd + k]);
                        g[2 * hd + k] = g[2 * hd + k].tanh();
                        g[3 * hd + k] = sigmoid(g[3 * hd + k]);
                    }
                    for k in 0..hd {
                        let c = g[hd + k] * ws.cs[t * hd + k] + g[k] * g[2 * hd + k];
                        ws.cs[(t + 1) * hd + k] = c;
                        ws.hs[(t + 1) * hd + k] = g[3 * hd + k] * c.tanh();
                    }
                }
                ws.h.copy_from_slice(&ws.hs[a.n_visits * hd..]);
            }
        }
    }

    /// Backpropagates `ws.dh` through the encoder into `grad`.
    fn encoder_backward(&self, p: &[f64], ws: &mut Workspace, grad: &mut [f64]) {
        let a = &self.arch;
        let hd = a.hidden;
        match a.encoder {
            EncoderSlots::Dense { w, b } => {
                for k in 0..hd {
                    ws.dh[k] *= 1.0 - ws.h[k] * ws.h[k];
                }
                outer_add(grad, w, &ws.dh, &ws.input);
                for k in 0..hd {
                    grad[b.off + k] += ws.dh[k];
                }
            }
            EncoderSlots::Lstm { w, u, b } => {
                let mut dc = vec![0.0; hd];
                for t in (0..a.n_visits).rev() {
                    let g = &ws.gates[t * 4 * hd..(t + 1) * 4 * hd];
                    for k in 0..hd {
                        let (i, f, gg, o) = (g[k], g[hd + k], g[2 * hd + k], g[3 * hd + k]);
                        let c = ws.cs[(t + 1) * hd + k];
                        let c_prev = ws.cs[t * hd + k];
                        let tc = c.tanh();
                        let dhk = ws.dh[k];
                        let d_o = dhk * tc;
                        let dck = dc[k] + dhk * o * (1.0 - tc * tc);
                        let di = dck * gg;
                        let dg = dck * i;
                        let df = dck * c_prev;
                        dc[k] = dck * f;
                        ws.da[k] = di * i * (1.0 - i);
                        ws.da[hd + k] = df * f * (1.0 - f);
                        ws.da[2 * hd + k] = dg * (1.0 - gg * gg);
                        ws.da[3 * hd + k] = d_o * o * (1.0 - o);
                    }
                    outer_add(grad, w, &ws.da, &ws.input[t * a.in_width..(t + 1) * a.in_width]);
                    outer_add(grad, u, &ws.da, &ws.hs[t * hd..(t + 1) * hd]);
                    for k in 0..4 * hd {
                        grad[b.off + k] += ws.da[k];
                    }
                    ws.dh_next.fill(0.0);
                    matvec_t_add(&mut ws.dh_next, p, u, &ws.da);
                    std::mem::swap(&mut ws.dh, &mut ws.dh_next);
                }
            }
        }
    }

    fn recognition(&self, p: &[f64], ws: &mut Workspace) {
        let a = &self.arch;
        let z = a.z_dim;
        ws.probs.copy_from_slice(&p[a.s_b.range()]);
        matvec_add(&mut ws.probs, p, a.s_w, &ws.h);
        softmax(&mut ws.probs);
        for s in 0..a.s_dim {
            let mu = &mut ws.mu[s * z..(s + 1) * z];
            for k in 0..z {
                mu[k] = p[a.mu_b.at(k, s)];
            }
            matvec_add(mu, p, a.mu_w, &ws.h);
            let lv = &mut ws.lv[s * z..(s + 1) * z];
            for k in 0..z {
                lv[k] = p[a.lv_b.at(k, s)];
            }
            matvec_add(lv, p, a.lv_w, &ws.h);
        }
    }

    /// Negative ELBO of one participant (normalized cells `x`, mask `m`,
    /// visit-major) with noise `eps` shared across components. When `grad`
    /// is given, the gradient with respect to the parameters is added to it.
    pub(crate) fn loss(
        &self,
        p: &[f64],
        x: &[f64],
        m: &[bool],
        eps: &[f64],
        grad: Option<&mut [f64]>,
        ws: &mut Workspace,
    ) -> LossParts {
        let a = &self.arch;
        let (d, z, yd, sd) = (a.n_vars(), a.z_dim, a.y_dim, a.s_dim);
        a.encode_input(x, m, &mut ws.input);
        self.encoder_forward(p, ws);
        self.recognition(p, ws);

        let mut no_grad: [f64; 0] = [];
        let want = grad.is_some();
        let g: &mut [f64] = match grad {
            Some(g) => g,
            None => &mut no_grad,
        };
        ws.dh.fill(0.0);
        let mut parts = LossParts::default();
        for s in 0..sd {
            let pi = ws.probs[s];
            for k in 0..z {
                ws.z[k] = ws.mu[s * z + k] + (0.5 * ws.lv[s * z + k]).exp() * eps[k];
            }
            ws.y.copy_from_slice(&p[a.g_b.range()]);
            matvec_add(&mut ws.y, p, a.g_w, &ws.z);
            ws.dy.fill(0.0);
            let scale = if want { -pi } else { 0.0 };
            let mut recon = 0.0;
            for t in 0..a.n_visits {
                let ys = &ws.y[t * yd..(t + 1) * yd];
                let dys = &mut ws.dy[t * yd..(t + 1) * yd];
                for j in 0..d {
                    let c = t * d + j;
                    if m[c] {
                        recon += a.heads[c].log_prob_backward(p, ys, s, x[c], scale, g, dys);
                    }
                }
            }
            let mut kl_z = 0.0;
            for k in 0..z {
                let lv = ws.lv[s * z + k];
                let diff = ws.mu[s * z + k] - p[a.prior_mu.at(k, s)];
                kl_z += 0.5 * (lv.exp() + diff * diff - 1.0 - lv);
            }
            ws.loss_s[s] = kl_z - recon;
            parts.recon += pi * recon;
            parts.kl_z += pi * kl_z;

            if want {
                outer_add(g, a.g_w, &ws.dy, &ws.z);
                for (k, dyk) in ws.dy.iter().enumerate() {
                    g[a.g_b.off + k] += dyk;
                }
                ws.dz.fill(0.0);
                matvec_t_add(&mut ws.dz, p, a.g_w, &ws.dy);
                for k in 0..z {
                    let lv = ws.lv[s * z + k];
                    let sig = (0.5 * lv).exp();
                    let diff = ws.mu[s * z + k] - p[a.prior_mu.at(k, s)];
                    ws.dmu[k] = ws.dz[k] + pi * diff;
                    ws.dlv[k] = ws.dz[k] * eps[k] * 0.5 * sig + pi * 0.5 * (lv.exp() - 1.0);
                    g[a.prior_mu.at(k, s)] -= pi * diff;
                    g[a.mu_b.at(k, s)] += ws.dmu[k];
                    g[a.lv_b.at(k, s)] += ws.dlv[k];
                }
                outer_add(g, a.mu_w, &ws.dmu, &ws.h);
                outer_add(g, a.lv_w, &ws.dlv, &ws.h);
                matvec_t_add(&mut ws.dh, p, a.mu_w, &ws.dmu);
                matvec_t_add(&mut ws.dh, p, a.lv_w, &ws.dlv);
            }
        }

        // KL(q(s|x) || uniform).
        let ln_s = (sd as f64).ln();
        for &pi in &ws.probs {
            if pi > 0.0 {
                parts.kl_s += pi * (pi.ln() + ln_s);
            }
        }
        parts.total = parts.kl_z - parts.recon + parts.kl_s;

        if want && sd > 1 {
            // d total / d pi_s, then through the softmax.
            let mut gs = vec![0.0; sd];
            for s in 0..sd {
                gs[s] = ws.loss_s[s] + ws.probs[s].max(1e-300).ln() + ln_s + 1.0;
            }
            let mean: f64 = (0..sd).map(|s| ws.probs[s] * gs[s]).sum();
            let dlogit: Vec<f64> = (0..sd).map(|s| ws.probs[s] * (gs[s] - mean)).collect();
            outer_add(g, a.s_w, &dlogit, &ws.h);
            for s in 0..sd {
                g[a.s_b.off + s] += dlogit[s];
            }
            matvec_t_add(&mut ws.dh, p, a.s_w, &dlogit);
        }
        if want {
            self.encoder_backward(p, ws, g);
        }
        parts
    }

    /// Negative ELBO of one normalized participant row at parameters `p`
    /// with fixed reparameterization noise `eps`. When `grad` is given the
    /// gradient is added into it.
    pub fn row_loss(&self, p: &[f64], x: &[f64], m: &[bool], eps: &[f64], grad: Option<&mut [f64]>) -> LossParts {
        let mut ws = Workspace::new(&self.arch);
        self.loss(p, x, m, eps, grad, &mut ws)
    }

    /// Recognition output for normalized cells.
    pub fn posterior(&self, x: &[f64], m: &[bool]) -> Posterior {
        let mut ws = Workspace::new(&self.arch);
        self.posterior_with(x, m, &mut ws)
    }

    pub(crate) fn posterior_with(&self, x: &[f64], m: &[bool], ws: &mut Workspace) -> Posterior {
        let a = &self.arch;
        let z = a.z_dim;
        a.encode_input(x, m, &mut ws.input);
        self.encoder_forward(&self.params, ws);
        self.recognition(&self.params, ws);
        Posterior {
            probs: ws.probs.clone(),
            mean: (0..a.s_dim).map(|s| ws.mu[s * z..(s + 1) * z].to_vec()).collect(),
            log_var: (0..a.s_dim).map(|s| ws.lv[s * z..(s + 1) * z].to_vec()).collect(),
        }
    }

    /// Cell distributions on the normalized scale for every (visit, var).
    pub fn cell_distributions(&self, code: &LatentCode) -> Vec<CellDist> {
        let a = &self.arch;
        let mut y = self.params[a.g_b.range()].to_vec();
        matvec_add(&mut y, &self.params, a.g_w, &code.z);
        let d = a.n_vars();
        (0..a.n_visits * d)
            .map(|c| {
                let t = c / d;
                a.heads[c].distribution(&self.params, &y[t * a.y_dim..(t + 1) * a.y_dim], code.s)
            })
            .collect()
    }

    /// Prior mean of `z` for component `s`.
    pub fn prior_mean(&self, s: usize) -> Vec<f64> {
        (0..self.arch.z_dim)
            .map(|k| self.params[self.arch.prior_mu.at(k, s)])
            .collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::hivae::{normalize, GroupTensor};
    use rand::Rng;
    use rand_distr::{Distribution, StandardNormal};

    /// Four participants, three visits, one variable of every likelihood.
    fn toy_group() -> GroupTensor {
        let likelihoods = vec![
            Likelihood::Real,
            Likelihood::Positive,
            Likelihood::Count,
            Likelihood::Categorical { levels: 3 },
            Likelihood::Ordinal { levels: 4 },
        ];
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let (n, v, d) = (4, 3, likelihoods.len());
        let mut values = Vec::new();
        let mut mask = Vec::new();
        for _ in 0..n * v {
            let real: f64 = StandardNormal.sample(&mut rng);
            values.extend([
                real * 2.0 + 1.0,
                (0.5 * real).exp() * 3.0,
                rng.gen_range(0..5) as f64,
                rng.gen_range(0..3) as f64,
                rng.gen_range(0..4) as f64,
            ]);
            for _ in 0..d {
                mask.push(rng.gen::<f64>() > 0.25);
            }
        }
        GroupTensor {
            n,
            n_visits: v,
            names: (0..d).map(|j| format!("x{j}")).collect(),
            likelihoods,
            values,
            mask,
        }
    }

    fn model_for(g: &GroupTensor, strategy: EncoderStrategy, s_dim: usize) -> (HivaeModel, GroupTensor) {
        let (norm, stats) = normalize(g);
        let config = HivaeConfig {
            s_dim,
            z_dim: 2,
            y_dim: 2,
            lstm_dim: 3,
            encoder_strategy: strategy,
            seed: 5,
            ..Default::default()
        };
        let mut model = HivaeModel::new(&config, g.names.clone(), &g.likelihoods, stats, None);
        // Move every bias away from its initial zero so all paths carry gradient.
        let mut rng = ChaCha8Rng::seed_from_u64(99);
        for x in model.params.iter_mut() {
            *x += 0.3 * rng.gen::<f64>() - 0.15;
        }
        (model, norm)
    }

    fn batch_loss(model: &HivaeModel, p: &[f64], g: &GroupTensor, eps: &[Vec<f64>], grad: Option<&mut [f64]>) -> f64 {
        let mut ws = Workspace::new(&model.arch);
        let mut total = 0.0;
        match grad {
            Some(gr) => {
                for i in 0..g.n {
                    let (x, m) = g.row(i);
                    total += model.loss(p, x, m, &eps[i], Some(&mut *gr), &mut ws).total;
                }
            }
            None => {
                for i in 0..g.n {
                    let (x, m) = g.row(i);
                    total += model.loss(p, x, m, &eps[i], None, &mut ws).total;
                }
            }
        }
        total
    }

    fn check_gradient(strategy: EncoderStrategy, s_dim: usize) {
        let g = toy_group();
        let (model, norm) = model_for(&g, strategy, s_dim);
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let eps: Vec<Vec<f64>> = (0..g.n)
            .map(|_| (0..model.arch.z_dim).map(|_| StandardNormal.sample(&mut rng)).collect())
            .collect();
        let mut grad = vec![0.0; model.params.len()];
        batch_loss(&model, &model.params, &norm, &eps, Some(&mut grad));
        let h = 1e-5;
        let mut p = model.params.clone();
        let mut worst: f64 = 0.0;
        for k in 0..p.len() {
            let orig = p[k];
            p[k] = orig + h;
            let up = batch_loss(&model, &p, &norm, &eps, None);
            p[k] = orig - h;
            let down = batch_loss(&model, &p, &norm, &eps, None);
            p[k] = orig;
            let fd = (up - down) / (2.0 * h);
            let rel = (fd - grad[k]).abs() / fd.abs().max(grad[k].abs()).max(1e-3);
            worst = worst.max(rel);
            assert!(
                rel < 1e-4,
                "{strategy:?} S={s_dim}: parameter {k} analytic {} vs numeric {fd} (rel {rel})",
                grad[k]
            );
        }
        assert!(worst.is_finite());
    }

    #[test]
    fn gradient_matches_finite_differences_recurrent() {
        check_gradient(EncoderStrategy::Recurrent, 2);
        check_gradient(EncoderStrategy::Recurrent, 1);
    }

    #[test]
    fn gradient_matches_finite_differences_flattened() {
        check_gradient(EncoderStrategy::Flattened, 2);
    }

    #[test]
    fn gradient_matches_finite_differences_per_visit() {
        let g = toy_group().visit_slice(1);
        let (model, norm) = model_for(&g, EncoderStrategy::PerVisit, 2);
        let eps = vec![vec![0.3, -0.7]; g.n];
        let mut grad = vec![0.0; model.params.len()];
        batch_loss(&model, &model.params, &norm, &eps, Some(&mut grad));
        let mut p = model.params.clone();
        for k in 0..p.len() {
            let orig = p[k];
            p[k] = orig + 1e-5;
            let up = batch_loss(&model, &p, &norm, &eps, None);
            p[k] = orig - 1e-5;
            let down = batch_loss(&model, &p, &norm, &eps, None);
            p[k] = orig;
            let fd = (up - down) / 2e-5;
            let rel = (fd - grad[k]).abs() / fd.abs().max(grad[k].abs()).max(1e-3);
            assert!(rel < 1e-4, "parameter {k}: {} vs {fd}", grad[k]);
        }
    }

    #[test]
    fn masked_cells_do_not_influence_loss() {
        let g = toy_group();
        for strategy in [EncoderStrategy::Recurrent, EncoderStrategy::Flattened] {
            let (model, norm) = model_for(&g, strategy, 2);
            let mut other = norm.clone();
            for (x, &m) in other.values.iter_mut().zip(&other.mask) {
                if !m {
                    *x = 1234.5;
                }
            }
            let eps = vec![vec![0.1, 0.2]; g.n];
            let mut ga = vec![0.0; model.params.len()];
            let mut gb = vec![0.0; model.params.len()];
            let a = batch_loss(&model, &model.params, &norm, &eps, Some(&mut ga));
            let b = batch_loss(&model, &model.params, &other, &eps, Some(&mut gb));
            assert_eq!(a.to_bits(), b.to_bits());
            assert_eq!(ga, gb);
        }
    }

    #[test]
    fn component_probabilities_sum_to_one() {
        let g = toy_group();
        let (model, norm) = model_for(&g, EncoderStrategy::Recurrent, 2);
        for i in 0..g.n {
            let (x, m) = norm.row(i);
            let post = model.posterior(x, m);
            assert!((post.probs.iter().sum::<f64>() - 1.0).abs() < 1e-12);
            assert!(post.probs.iter().all(|&p| (0.0..=1.0).contains(&p)));
        }
    }

    #[test]
    fn single_component_has_zero_category_kl() {
        let g = toy_group();
        let (model, norm) = model_for(&g, EncoderStrategy::Flattened, 1);
        let mut ws = Workspace::new(&model.arch);
        for i in 0..g.n {
            let (x, m) = norm.row(i);
            let parts = model.loss(&model.params, x, m, &[0.0, 0.0], None, &mut ws);
            assert_eq!(parts.kl_s, 0.0);
            assert_eq!(model.posterior(x, m).probs, vec![1.0]);
        }
    }

    #[test]
    fn input_encoding() {
        let g = toy_group();
        let (model, _) = model_for(&g, EncoderStrategy::Flattened, 1);
        let a = &model.arch;
        // 1 + 1 + 1 + 3 (one-hot) + 3 (thermometer) value features, 5 mask channels.
        assert_eq!(a.in_width, 14);
        let x = [0.5, -0.2, 3.0, 2.0, 2.0];
        let m = [true, false, true, true, true];
        let mut input = vec![0.0; a.n_visits * a.in_width];
        let mut xs = vec![0.0; a.n_visits * 5];
        let mut ms = vec![false; a.n_visits * 5];
        xs[..5].copy_from_slice(&x);
        ms[..5].copy_from_slice(&m);
        a.encode_input(&xs, &ms, &mut input);
        assert_eq!(
            &input[..14],
            &[0.5, 0.0, 4f64.ln(), 0.0, 0.0, 1.0, 1.0, 1.0, 0.0, 1.0, 0.0, 1.0, 1.0, 1.0]
        );
        assert!(input[14..].iter().all(|&v| v == 0.0));
    }
}
