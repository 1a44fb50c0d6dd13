//! BIC scoring and greedy hill-climbing structure search.

use std::collections::BTreeSet;

use nalgebra::{DMatrix, DVector};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{BnTable, ConstraintLists};
use crate::error::{Error, Result};
use crate::par::Exec;
use crate::seed;

const MIN_GAIN: f64 = 1e-8;
const MAX_ITERATIONS: usize = 100_000;
const VAR_FLOOR: f64 = 1e-12;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BnLearnConfig {
    /// Number of independent searches; the first starts from the empty graph.
    pub restarts: usize,
    /// Upper bound on parents per node; `None` leaves it unbounded.
    pub max_parents: Option<usize>,
    pub seed: u64,
}

impl Default for BnLearnConfig {
    fn default() -> Self {
        Self {
            restarts: 5,
            max_parents: Some(5),
            seed: 0,
        }
    }
}

/// Directed acyclic graph over table nodes (by index).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Dag {
    pub n_nodes: usize,
    /// Sorted `(from, to)` pairs.
    pub edges: Vec<(usize, usize)>,
    /// Total BIC over scored nodes.
    pub score: f64,
}

impl Dag {
    pub fn new(n_nodes: usize, mut edges: Vec<(usize, usize)>) -> Self {
        edges.sort_unstable();
        edges.dedup();
        Self {
            n_nodes,
            edges,
            score: f64::NAN,
        }
    }

    pub fn parents(&self, v: usize) -> Vec<usize> {
        self.edges.iter().filter(|e| e.1 == v).map(|e| e.0).collect()
    }

    /// Kahn order with smallest index first; `None` if the graph has a cycle.
    pub fn topological_order(&self) -> Option<Vec<usize>> {
        let mut indeg = vec![0usize; self.n_nodes];
        let mut children = vec![Vec::new(); self.n_nodes];
        for &(u, v) in &self.edges {
            indeg[v] += 1;
            children[u].push(v);
        }
        let mut ready: BTreeSet<usize> = (0..self.n_nodes).filter(|&v| indeg[v] == 0).collect();
        let mut order = Vec::with_capacity(self.n_nodes);
        while let Some(&v) = ready.iter().next() {
            ready.remove(&v);
            order.push(v);
            for &c in &children[v] {
                indeg[c] -= 1;
                if indeg[c] == 0 {
                    ready.insert(c);
                }
            }
        }
        (order.len() == self.n_nodes).then_some(order)
    }

    pub fn is_acyclic(&self) -> bool {
        self.topological_order().is_some()
    }
}

/// Mixed-radix index of the discrete-parent configuration of row `i`.
pub(crate) fn config_index(table: &BnTable, parents: &[usize], i: usize) -> usize {
    parents
        .iter()
        .fold(0, |acc, &p| acc * table.nodes[p].levels + table.columns[p][i] as usize)
}

pub(crate) fn n_configs(table: &BnTable, parents: &[usize]) -> usize {
    parents.iter().map(|&p| table.nodes[p].levels.max(1)).product()
}

/// Least-squares regression of `child` on `[1, continuous]` over `rows`.
/// Returns coefficients (intercept first) and the ML residual variance.
pub(crate) fn ols(table: &BnTable, child: usize, continuous: &[usize], rows: &[usize]) -> (Vec<f64>, f64) {
    let p = continuous.len() + 1;
    let n = rows.len();
    if n == 0 {
        return (vec![0.0; p], 1.0);
    }
    let y = &table.columns[child];
    if p == 1 {
        let mean = rows.iter().map(|&i| y[i]).sum::<f64>() / n as f64;
        let var = rows.iter().map(|&i| (y[i] - mean).powi(2)).sum::<f64>() / n as f64;
        return (vec![mean], var.max(VAR_FLOOR));
    }
    let mut xtx = DMatrix::<f64>::zeros(p, p);
    let mut xty = DVector::<f64>::zeros(p);
    let mut x = vec![0.0; p];
    for &i in rows {
        x[0] = 1.0;
        for (k, &c) in continuous.iter().enumerate() {
            x[k + 1] = table.columns[c][i];
        }
        for a in 0..p {
            xty[a] += x[a] * y[i];
            for b in 0..p {
                xtx[(a, b)] += x[a] * x[b];
            }
        }
    }
    let beta = match xtx.clone().cholesky() {
        Some(ch) => ch.solve(&xty),
        None => xtx
            .svd(true, true)
            .solve(&xty, 1e-12)
            .unwrap_or_else(|_| DVector::zeros(p)),
    };
    let mut rss = 0.0;
    for &i in rows {
        let mut fit = beta[0];
        for (k, &c) in continuous.iter().enumerate() {
            fit += beta[k + 1] * table.columns[c][i];
        }
        rss += (y[i] - fit).powi(2);
    }
    (beta.iter().copied().collect(), (rss / n as f64).max(VAR_FLOOR))
}

fn gaussian_loglik(n: usize, var: f64) -> f64 {
    -0.5 * n as f64 * ((2.0 * std::f64::consts::PI * var).ln() + 1.0)
}

/// BIC contribution of `child` with `parents`, on a table whose unobserved
/// cells are already filled, over `rows`.
pub(crate) fn score_family(table: &BnTable, rows: &[usize], child: usize, parents: &[usize]) -> f64 {
    let n = rows.len();
    if n == 0 {
        return 0.0;
    }
    let ln_n = (n as f64).ln();
    let discrete: Vec<usize> = parents.iter().copied().filter(|&p| table.nodes[p].is_discrete()).collect();
    let continuous: Vec<usize> = parents.iter().copied().filter(|&p| !table.nodes[p].is_discrete()).collect();
    let q = n_configs(table, &discrete);
    let node = &table.nodes[child];
    if node.is_discrete() {
        let k = node.levels.max(1);
        let mut counts = vec![0usize; q * k];
        for &i in rows {
            counts[config_index(table, &discrete, i) * k + table.columns[child][i] as usize] += 1;
        }
        let mut ll = 0.0;
        for c in 0..q {
            let row = &counts[c * k..(c + 1) * k];
            let total: usize = row.iter().sum();
            for &nc in row {
                if nc > 0 {
                    ll += nc as f64 * (nc as f64 / total as f64).ln();
                }
            }
        }
        ll - 0.5 * ln_n * ((k - 1) * q) as f64
    } else {
        let p = continuous.len() + 1;
        let mut by_config = vec![Vec::new(); q];
        for &i in rows {
            by_config[config_index(table, &discrete, i)].push(i);
        }
        let mut ll = 0.0;
        let mut sparse = Vec::new();
        for cfg_rows in &by_config {
            if cfg_rows.is_empty() {
                continue;
            }
            if cfg_rows.len() <= p {
                sparse.extend_from_slice(cfg_rows);
                continue;
            }
            let (_, var) = ols(table, child, &continuous, cfg_rows);
            ll += gaussian_loglik(cfg_rows.len(), var);
        }
        if !sparse.is_empty() {
            // Configurations too small for their own regression use the pooled fit.
            let (beta, var) = ols(table, child, &continuous, rows);
            for &i in &sparse {
                let mut fit = beta[0];
                for (k, &c) in continuous.iter().enumerate() {
                    fit += beta[k + 1] * table.columns[c][i];
                }
                let r = table.columns[child][i] - fit;
                ll += -0.5 * ((2.0 * std::f64::consts::PI * var).ln() + r * r / var);
            }
        }
        ll - 0.5 * ln_n * (q * (p + 1)) as f64
    }
}

/// BIC contribution of one family on `table` (unobserved cells filled and
/// per-visit rows restricted as during structure learning).
pub fn family_score(table: &BnTable, child: usize, parents: &[usize]) -> f64 {
    let filled = table.filled();
    let rows = filled.estimation_rows(child);
    let mut ps = parents.to_vec();
    ps.sort_unstable();
    score_family(&filled, &rows, child, &ps)
}

/// Indices of required and forbidden edges.
struct Rules {
    allowed: Vec<Vec<bool>>,
    required: Vec<(usize, usize)>,
}

fn resolve_rules(table: &BnTable, constraints: &ConstraintLists) -> Result<Rules> {
    constraints.validate()?;
    let n = table.nodes.len();
    let mut allowed = vec![vec![false; n]; n];
    for u in 0..n {
        for v in 0..n {
            let (a, b) = (&table.nodes[u], &table.nodes[v]);
            allowed[u][v] = u != v
                && a.scored
                && b.scored
                && !(b.is_discrete() && !a.is_discrete())
                && constraints.allows(&a.name, &b.name);
        }
    }
    let mut required = Vec::new();
    for (from, to) in &constraints.whitelist {
        let u = table
            .index(from)
            .ok_or_else(|| Error::Constraint(format!("required edge names unknown node `{from}`")))?;
        let v = table
            .index(to)
            .ok_or_else(|| Error::Constraint(format!("required edge names unknown node `{to}`")))?;
        if table.nodes[v].is_discrete() && !table.nodes[u].is_discrete() {
            return Err(Error::Constraint(format!(
                "required edge {from} -> {to} gives a discrete node a continuous parent"
            )));
        }
        required.push((u, v));
    }
    if !Dag::new(n, required.clone()).is_acyclic() {
        return Err(Error::Constraint("required edges form a cycle".into()));
    }
    Ok(Rules { allowed, required })
}

struct Search<'a> {
    table: &'a BnTable,
    rows: &'a [Vec<usize>],
    rules: &'a Rules,
    max_parents: usize,
    scored: Vec<bool>,
    parents: Vec<Vec<usize>>,
    children: Vec<Vec<usize>>,
    family: Vec<f64>,
    /// `add[v][u]`: score of `v` with `u` added to its current parents.
    add: Vec<Vec<Option<f64>>>,
    /// `remove[v][u]`: score of `v` with `u` removed from its current parents.
    remove: Vec<Vec<Option<f64>>>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
enum Move {
    Add,
    Remove,
    Reverse,
}

impl<'a> Search<'a> {
    fn new(table: &'a BnTable, rows: &'a [Vec<usize>], rules: &'a Rules, max_parents: usize) -> Self {
        let n = table.nodes.len();
        let scored: Vec<bool> = table.nodes.iter().map(|nd| nd.scored).collect();
        let mut s = Self {
            table,
            rows,
            rules,
            max_parents,
            scored,
            parents: vec![Vec::new(); n],
            children: vec![Vec::new(); n],
            family: vec![0.0; n],
            add: vec![vec![None; n]; n],
            remove: vec![vec![None; n]; n],
        };
        for v in 0..n {
            s.family[v] = s.score(v, &[]);
        }
        s
    }

    fn score(&self, v: usize, parents: &[usize]) -> f64 {
        score_family(self.table, &self.rows[v], v, parents)
    }

    fn has_edge(&self, u: usize, v: usize) -> bool {
        self.parents[v].binary_search(&u).is_ok()
    }

    fn set_parents(&mut self, v: usize, parents: Vec<usize>) {
        for &p in &self.parents[v] {
            self.children[p].retain(|&c| c != v);
        }
        for &p in &parents {
            self.children[p].push(v);
        }
        self.parents[v] = parents;
        self.family[v] = self.score(v, &self.parents[v]);
        self.add[v].iter_mut().for_each(|x| *x = None);
        self.remove[v].iter_mut().for_each(|x| *x = None);
    }

    fn insert_edge(&mut self, u: usize, v: usize) {
        let mut ps = self.parents[v].clone();
        if let Err(pos) = ps.binary_search(&u) {
            ps.insert(pos, u);
        }
        self.set_parents(v, ps);
    }

    fn delete_edge(&mut self, u: usize, v: usize) {
        let ps: Vec<usize> = self.parents[v].iter().copied().filter(|&p| p != u).collect();
        self.set_parents(v, ps);
    }

    /// Whether `to` is reachable from `from`, optionally ignoring one edge.
    fn reachable(&self, from: usize, to: usize, skip: Option<(usize, usize)>) -> bool {
        let mut seen = vec![false; self.parents.len()];
        let mut stack = vec![from];
        while let Some(x) = stack.pop() {
            if x == to {
                return true;
            }
            for &c in &self.children[x] {
                if Some((x, c)) == skip || seen[c] {
                    continue;
                }
                seen[c] = true;
                stack.push(c);
            }
        }
        false
    }

    fn add_score(&mut self, u: usize, v: usize) -> f64 {
        if let Some(s) = self.add[v][u] {
            return s;
        }
        let mut ps = self.parents[v].clone();
        let pos = ps.binary_search(&u).unwrap_err();
        ps.insert(pos, u);
        let s = self.score(v, &ps);
        self.add[v][u] = Some(s);
        s
    }

    fn remove_score(&mut self, u: usize, v: usize) -> f64 {
        if let Some(s) = self.remove[v][u] {
            return s;
        }
        let ps: Vec<usize> = self.parents[v].iter().copied().filter(|&p| p != u).collect();
        let s = self.score(v, &ps);
        self.remove[v][u] = Some(s);
        s
    }

    fn is_required(&self, u: usize, v: usize) -> bool {
        self.rules.required.contains(&(u, v))
    }

    fn candidates(&mut self) -> Vec<(f64, Move, usize, usize)> {
        let n = self.parents.len();
        let mut out = Vec::new();
        for v in 0..n {
            if !self.scored[v] {
                continue;
            }
            for u in 0..n {
                if u == v || !self.scored[u] {
                    continue;
                }
                if self.has_edge(u, v) {
                    if self.is_required(u, v) {
                        continue;
                    }
                    let d_remove = self.remove_score(u, v) - self.family[v];
                    out.push((d_remove, Move::Remove, u, v));
                    if self.rules.allowed[v][u] && self.parents[u].len() < self.max_parents {
                        let d = d_remove + self.add_score(v, u) - self.family[u];
                        out.push((d, Move::Reverse, u, v));
                    }
                } else if !self.has_edge(v, u)
                    && self.rules.allowed[u][v]
                    && self.parents[v].len() < self.max_parents
                {
                    out.push((self.add_score(u, v) - self.family[v], Move::Add, u, v));
                }
            }
        }
        out.retain(|c| c.0 > MIN_GAIN);
        out.sort_by(|a, b| b.0.total_cmp(&a.0).then((a.1, a.2, a.3).cmp(&(b.1, b.2, b.3))));
        out
    }

    fn climb(&mut self) {
        for _ in 0..MAX_ITERATIONS {
            let mut applied = false;
            for (_, mv, u, v) in self.candidates() {
                let ok = match mv {
                    Move::Add => !self.reachable(v, u, None),
                    Move::Remove => true,
                    Move::Reverse => !self.reachable(u, v, Some((u, v))),
                };
                if !ok {
                    continue;
                }
                match mv {
                    Move::Add => self.insert_edge(u, v),
                    Move::Remove => self.delete_edge(u, v),
                    Move::Reverse => {
                        self.delete_edge(u, v);
                        self.insert_edge(v, u);
                    }
                }
                applied = true;
                break;
            }
            if !applied {
                return;
            }
        }
        log::warn!("structure search stopped after {MAX_ITERATIONS} moves");
    }

    fn total(&self) -> f64 {
        (0..self.parents.len())
            .filter(|&v| self.scored[v])
            .map(|v| self.family[v])
            .sum()
    }

    fn edges(&self) -> Vec<(usize, usize)> {
        let mut e: Vec<(usize, usize)> = self
            .parents
            .iter()
            .enumerate()
            .flat_map(|(v, ps)| ps.iter().map(move |&u| (u, v)))
            .collect();
        e.sort_unstable();
        e
    }
}

/// Greedy hill climbing over add/remove/reverse moves scored by BIC,
/// restarted `config.restarts` times; returns the best-scoring graph.
pub fn learn_structure(
    table: &BnTable,
    constraints: &ConstraintLists,
    config: &BnLearnConfig,
    exec: Exec,
) -> Result<Dag> {
    let rules = resolve_rules(table, constraints)?;
    let filled = table.filled();
    let rows: Vec<Vec<usize>> = (0..filled.nodes.len()).map(|v| filled.estimation_rows(v)).collect();
    let max_parents = config.max_parents.unwrap_or(usize::MAX);
    let n = filled.nodes.len();
    let restarts = config.restarts.max(1);

    let results: Vec<(f64, Vec<(usize, usize)>)> = exec.map(restarts, |r| {
        let mut search = Search::new(&filled, &rows, &rules, max_parents);
        for &(u, v) in &rules.required {
            search.insert_edge(u, v);
        }
        if r > 0 {
            let mut rng = ChaCha8Rng::seed_from_u64(seed::derive(config.seed, "bn-restart", r as u64));
            let mut pool: Vec<(usize, usize)> = (0..n)
                .flat_map(|u| (0..n).map(move |v| (u, v)))
                .filter(|&(u, v)| rules.allowed[u][v])
                .collect();
            pool.shuffle(&mut rng);
            let target = search.scored.iter().filter(|&&s| s).count();
            let mut added = 0;
            for (u, v) in pool {
                if added >= target {
                    break;
                }
                if search.has_edge(u, v)
                    || search.has_edge(v, u)
                    || search.parents[v].len() >= max_parents
                    || search.reachable(v, u, None)
                {
                    continue;
                }
                search.insert_edge(u, v);
                added += 1;
            }
        }
        search.climb();
        (search.total(), search.edges())
    });

    let (score, edges) = results
        .into_iter()
        .reduce(|best, cand| {
            if cand.0 > best.0 || (cand.0 == best.0 && cand.1 < best.1) {
                cand
            } else {
                best
            }
        })
        .expect("at least one restart");
    Ok(Dag {
        n_nodes: n,
        edges,
        score,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::bn::{make_constraints, BnNode, NodeKind};
    use rand_distr::{Distribution, StandardNormal};

    fn continuous_table(columns: Vec<Vec<f64>>) -> BnTable {
        let n = columns[0].len();
        let nodes = (0..columns.len())
            .map(|k| BnNode {
                name: format!("z{k}"),
                kind: NodeKind::ContinuousZ,
                group: None,
                visit: None,
                levels: 0,
                scored: true,
            })
            .collect();
        let observed = vec![vec![true; n]; columns.len()];
        BnTable {
            nodes,
            n,
            columns,
            observed,
        }
    }

    fn normals(rng: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
        (0..n).map(|_| StandardNormal.sample(rng)).collect()
    }

    #[test]
    fn independent_noise_gives_empty_graph() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let cols = (0..5).map(|_| normals(&mut rng, 5000)).collect();
        let t = continuous_table(cols);
        let dag = learn_structure(&t, &make_constraints(&t.nodes), &BnLearnConfig::default(), Exec::Parallel).unwrap();
        assert!(dag.edges.is_empty(), "{:?}", dag.edges);
    }

    #[test]
    fn planted_chain_skeleton_recovered() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let z1 = normals(&mut rng, 5000);
        let z2: Vec<f64> = z1.iter().zip(normals(&mut rng, 5000)).map(|(a, e)| 1.5 * a + e).collect();
        let z3: Vec<f64> = z2.iter().zip(normals(&mut rng, 5000)).map(|(a, e)| -1.2 * a + e).collect();
        let t = continuous_table(vec![z1, z2, z3]);
        let dag = learn_structure(&t, &make_constraints(&t.nodes), &BnLearnConfig::default(), Exec::Sequential).unwrap();
        let mut skeleton: Vec<(usize, usize)> = dag.edges.iter().map(|&(a, b)| (a.min(b), a.max(b))).collect();
        skeleton.sort_unstable();
        assert_eq!(skeleton, vec![(0, 1), (1, 2)]);
    }

    #[test]
    fn restarts_are_deterministic_across_execution_modes() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let z1 = normals(&mut rng, 400);
        let z2: Vec<f64> = z1.iter().zip(normals(&mut rng, 400)).map(|(a, e)| 0.8 * a + e).collect();
        let z3 = normals(&mut rng, 400);
        let z4: Vec<f64> = z2.iter().zip(&z3).map(|(a, b)| a - b + 0.1).collect();
        let t = continuous_table(vec![z1, z2, z3, z4]);
        let c = make_constraints(&t.nodes);
        let cfg = BnLearnConfig { seed: 9, ..Default::default() };
        let a = learn_structure(&t, &c, &cfg, Exec::Sequential).unwrap();
        let b = learn_structure(&t, &c, &cfg, Exec::Parallel).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn blacklist_and_whitelist_are_respected() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let z1 = normals(&mut rng, 2000);
        let z2: Vec<f64> = z1.iter().zip(normals(&mut rng, 2000)).map(|(a, e)| 2.0 * a + e).collect();
        let z3 = normals(&mut rng, 2000);
        let t = continuous_table(vec![z1, z2, z3]);
        let mut c = make_constraints(&t.nodes);
        c.blacklist.insert(("z0".into(), "z1".into()));
        c.blacklist.insert(("z1".into(), "z0".into()));
        c.whitelist.insert(("z2".into(), "z0".into()));
        let dag = learn_structure(&t, &c, &BnLearnConfig::default(), Exec::Sequential).unwrap();
        assert!(!dag.edges.contains(&(0, 1)) && !dag.edges.contains(&(1, 0)));
        assert!(dag.edges.contains(&(2, 0)));

        c.whitelist.insert(("z0".into(), "z2".into()));
        c.blacklist.clear();
        assert!(matches!(
            learn_structure(&t, &c, &BnLearnConfig::default(), Exec::Sequential),
            Err(Error::Constraint(_))
        ));
    }

    #[test]
    fn discrete_family_score_matches_hand_computation() {
        // Binary child with counts 7/3 and no parents.
        let nodes = vec![BnNode {
            name: "a".into(),
            kind: NodeKind::AuxMissingness,
            group: None,
            visit: None,
            levels: 2,
            scored: true,
        }];
        let col: Vec<f64> = (0..10).map(|i| if i < 7 { 0.0 } else { 1.0 }).collect();
        let t = BnTable {
            nodes,
            n: 10,
            columns: vec![col],
            observed: vec![vec![true; 10]],
        };
        let expected = 7.0 * 0.7f64.ln() + 3.0 * 0.3f64.ln() - 0.5 * 10f64.ln();
        assert!((family_score(&t, 0, &[]) - expected).abs() < 1e-12);
    }

    #[test]
    fn gaussian_family_score_matches_hand_computation() {
        let y = vec![1.0, 2.0, 4.0, 5.0];
        let t = continuous_table(vec![y]);
        // Mean 3, ML variance 2.5.
        let expected = -2.0 * ((2.0 * std::f64::consts::PI * 2.5f64).ln() + 1.0) - 0.5 * 4f64.ln() * 2.0;
        assert!((family_score(&t, 0, &[]) - expected).abs() < 1e-12);
    }
}
