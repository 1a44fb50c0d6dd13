//! Parameter fitting, ancestral sampling and serialization.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use super::learn::{config_index, n_configs, ols, Dag};
use super::{BnNode, BnTable, ConstraintLists};
use crate::error::{Error, Result};
use crate::par::Exec;
use crate::seed;

const FORMAT: u32 = 1;

/// Linear-Gaussian regression for one discrete-parent configuration.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LinearGaussian {
    pub intercept: f64,
    /// One coefficient per continuous parent, in parent order.
    pub coefs: Vec<f64>,
    pub var: f64,
    /// Rows the estimate is based on.
    pub n: usize,
    /// Configuration had too few rows and uses the pooled fit.
    pub fallback: bool,
}

impl LinearGaussian {
    fn mean(&self, values: impl Iterator<Item = f64>) -> f64 {
        self.intercept + self.coefs.iter().zip(values).map(|(b, x)| b * x).sum::<f64>()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Cpd {
    /// Conditional probability table, one row per parent configuration
    /// (mixed radix, first parent most significant).
    Discrete { parents: Vec<usize>, table: Vec<Vec<f64>> },
    Gaussian {
        discrete_parents: Vec<usize>,
        continuous_parents: Vec<usize>,
        configs: Vec<LinearGaussian>,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConditionalGaussianBN {
    pub format: u32,
    pub schema_hash: String,
    pub nodes: Vec<BnNode>,
    /// Edges by node name.
    pub edges: Vec<(String, String)>,
    pub cpds: Vec<Cpd>,
    pub constraints: ConstraintLists,
    /// Nodes (and configurations) fitted by the marginal fallback.
    pub flagged: Vec<String>,
    /// Structure score, when the graph came from a search.
    pub score: Option<f64>,
}

/// Maximum-likelihood fit: add-one smoothed CPTs and least-squares
/// regressions per discrete-parent configuration. Unobserved per-visit
/// embedding cells follow the same convention as structure learning.
pub fn fit_parameters(
    dag: &Dag,
    table: &BnTable,
    constraints: &ConstraintLists,
    schema_hash: &str,
) -> Result<ConditionalGaussianBN> {
    if dag.n_nodes != table.nodes.len() {
        return Err(Error::Fit(format!(
            "graph has {} nodes, table has {}",
            dag.n_nodes,
            table.nodes.len()
        )));
    }
    if !dag.is_acyclic() {
        return Err(Error::Fit("graph has a cycle".into()));
    }
    let filled = table.filled();
    let mut cpds = Vec::with_capacity(table.nodes.len());
    let mut flagged = Vec::new();
    for (v, node) in filled.nodes.iter().enumerate() {
        let parents = dag.parents(v);
        let rows = filled.estimation_rows(v);
        let discrete: Vec<usize> = parents.iter().copied().filter(|&p| filled.nodes[p].is_discrete()).collect();
        let continuous: Vec<usize> = parents.iter().copied().filter(|&p| !filled.nodes[p].is_discrete()).collect();
        let q = n_configs(&filled, &discrete);
        if node.is_discrete() {
            if !continuous.is_empty() {
                return Err(Error::Fit(format!("discrete node `{}` has a continuous parent", node.name)));
            }
            let k = node.levels.max(1);
            let mut counts = vec![vec![0usize; k]; q];
            for &i in &rows {
                counts[config_index(&filled, &discrete, i)][filled.columns[v][i] as usize] += 1;
            }
            let table = counts
                .into_iter()
                .map(|row| {
                    let total: usize = row.iter().sum();
                    row.iter().map(|&c| (c as f64 + 1.0) / (total + k) as f64).collect()
                })
                .collect();
            cpds.push(Cpd::Discrete { parents: discrete, table });
        } else {
            let p = continuous.len() + 1;
            let mut by_config = vec![Vec::new(); q];
            for &i in &rows {
                by_config[config_index(&filled, &discrete, i)].push(i);
            }
            let mut pooled: Option<LinearGaussian> = None;
            let mut configs = Vec::with_capacity(q);
            for (c, cfg_rows) in by_config.iter().enumerate() {
                if cfg_rows.len() > p {
                    let (beta, var) = ols(&filled, v, &continuous, cfg_rows);
                    configs.push(LinearGaussian {
                        intercept: beta[0],
                        coefs: beta[1..].to_vec(),
                        var,
                        n: cfg_rows.len(),
                        fallback: false,
                    });
                } else {
                    let pooled = pooled.get_or_insert_with(|| {
                        let (beta, var) = ols(&filled, v, &continuous, &rows);
                        LinearGaussian {
                            intercept: beta[0],
                            coefs: beta[1..].to_vec(),
                            var,
                            n: rows.len(),
                            fallback: true,
                        }
                    });
                    flagged.push(format!("{}[{c}]", node.name));
                    configs.push(pooled.clone());
                }
            }
            cpds.push(Cpd::Gaussian {
                discrete_parents: discrete,
                continuous_parents: continuous,
                configs,
            });
        }
    }
    if !flagged.is_empty() {
        log::warn!("{} configurations fitted by the pooled fallback", flagged.len());
    }
    let model = ConditionalGaussianBN {
        format: FORMAT,
        schema_hash: schema_hash.to_string(),
        edges: dag
            .edges
            .iter()
            .map(|&(u, v)| (table.nodes[u].name.clone(), table.nodes[v].name.clone()))
            .collect(),
        nodes: table.nodes.clone(),
        cpds,
        constraints: constraints.clone(),
        flagged,
        score: dag.score.is_finite().then_some(dag.score),
    };
    model.validate()?;
    Ok(model)
}

impl ConditionalGaussianBN {
    pub fn dag(&self) -> Result<Dag> {
        let index = |name: &str| {
            self.nodes
                .iter()
                .position(|n| n.name == name)
                .ok_or_else(|| Error::Config(format!("edge names unknown node `{name}`")))
        };
        let mut edges = Vec::with_capacity(self.edges.len());
        for (a, b) in &self.edges {
            edges.push((index(a)?, index(b)?));
        }
        Ok(Dag::new(self.nodes.len(), edges))
    }

    /// Acyclicity, constraint compliance and well-formed parameters.
    pub fn validate(&self) -> Result<()> {
        let dag = self.dag()?;
        if !dag.is_acyclic() {
            return Err(Error::Constraint("network has a cycle".into()));
        }
        for (a, b) in &self.edges {
            if !self.constraints.allows(a, b) {
                return Err(Error::Constraint(format!("edge {a} -> {b} is forbidden")));
            }
        }
        for (a, b) in &self.constraints.whitelist {
            if !self.edges.contains(&(a.clone(), b.clone())) {
                return Err(Error::Constraint(format!("required edge {a} -> {b} is missing")));
            }
        }
        if self.cpds.len() != self.nodes.len() {
            return Err(Error::Shape("one distribution per node required".into()));
        }
        for (v, cpd) in self.cpds.iter().enumerate() {
            let node = &self.nodes[v];
            let mut parents = dag.parents(v);
            let ok = match cpd {
                Cpd::Discrete { parents: ps, table } => {
                    let mut ps = ps.clone();
                    ps.sort_unstable();
                    node.is_discrete()
                        && ps == parents
                        && table.len() == self.n_configs(&ps)
                        && table.iter().all(|row| {
                            row.len() == node.levels.max(1)
                                && row.iter().all(|&p| (0.0..=1.0).contains(&p))
                                && (row.iter().sum::<f64>() - 1.0).abs() < 1e-9
                        })
                }
                Cpd::Gaussian {
                    discrete_parents,
                    continuous_parents,
                    configs,
                } => {
                    let mut ps: Vec<usize> = discrete_parents.iter().chain(continuous_parents).copied().collect();
                    ps.sort_unstable();
                    parents.sort_unstable();
                    !node.is_discrete()
                        && ps == parents
                        && discrete_parents.iter().all(|&p| self.nodes[p].is_discrete())
                        && continuous_parents.iter().all(|&p| !self.nodes[p].is_discrete())
                        && configs.len() == self.n_configs(discrete_parents)
                        && configs.iter().all(|c| {
                            c.var > 0.0
                                && c.var.is_finite()
                                && c.coefs.len() == continuous_parents.len()
                                && c.intercept.is_finite()
                                && c.coefs.iter().all(|b| b.is_finite())
                        })
                }
            };
            if !ok {
                return Err(Error::Fit(format!("malformed distribution for node `{}`", node.name)));
            }
        }
        Ok(())
    }

    fn n_configs(&self, parents: &[usize]) -> usize {
        parents.iter().map(|&p| self.nodes[p].levels.max(1)).product()
    }

    fn config_of(&self, parents: &[usize], row: &[f64]) -> usize {
        parents
            .iter()
            .fold(0, |acc, &p| acc * self.nodes[p].levels + row[p] as usize)
    }

    /// Log-likelihood of the table under the model, using the estimation
    /// convention of fitting (filled cells, per-visit row restriction).
    pub fn log_likelihood(&self, table: &BnTable) -> f64 {
        let filled = table.filled();
        let mut ll = 0.0;
        for (v, cpd) in self.cpds.iter().enumerate() {
            for i in filled.estimation_rows(v) {
                let row: Vec<f64> = filled.columns.iter().map(|c| c[i]).collect();
                ll += match cpd {
                    Cpd::Discrete { parents, table } => table[self.config_of(parents, &row)][row[v] as usize].ln(),
                    Cpd::Gaussian {
                        discrete_parents,
                        continuous_parents,
                        configs,
                    } => {
                        let lg = &configs[self.config_of(discrete_parents, &row)];
                        let r = row[v] - lg.mean(continuous_parents.iter().map(|&p| row[p]));
                        -0.5 * ((2.0 * std::f64::consts::PI * lg.var).ln() + r * r / lg.var)
                    }
                };
            }
        }
        ll
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    /// Parses and validates a network document fitted under `schema_hash`.
    pub fn from_json(text: &str, schema_hash: &str) -> Result<Self> {
        let model: ConditionalGaussianBN = serde_json::from_str(text)?;
        if model.format != FORMAT {
            return Err(Error::Config(format!("network document format {} is not supported", model.format)));
        }
        if model.schema_hash != schema_hash {
            return Err(Error::SchemaMismatch {
                expected: schema_hash.to_string(),
                found: model.schema_hash,
            });
        }
        model.validate()?;
        Ok(model)
    }
}

/// Ancestral sampling of `n` rows. Row `i` uses its own stream derived from
/// `seed`, so results do not depend on the execution mode.
pub fn sample_bn(model: &ConditionalGaussianBN, n: usize, seed: u64, exec: Exec) -> Result<BnTable> {
    let order = model
        .dag()?
        .topological_order()
        .ok_or_else(|| Error::Constraint("network has a cycle".into()))?;
    let base = seed::derive(seed, "bn-sample", 0);
    let rows: Vec<Vec<f64>> = exec.map(n, |i| {
        let mut rng = ChaCha8Rng::seed_from_u64(seed::mix(base, i as u64));
        let mut row = vec![0.0; model.nodes.len()];
        for &v in &order {
            row[v] = match &model.cpds[v] {
                Cpd::Discrete { parents, table } => {
                    let probs = &table[model.config_of(parents, &row)];
                    let u: f64 = rng.gen();
                    let mut acc = 0.0;
                    let mut level = probs.len() - 1;
                    for (k, p) in probs.iter().enumerate() {
                        acc += p;
                        if u < acc {
                            level = k;
                            break;
                        }
                    }
                    level as f64
                }
                Cpd::Gaussian {
                    discrete_parents,
                    continuous_parents,
                    configs,
                } => {
                    let lg = &configs[model.config_of(discrete_parents, &row)];
                    let e: f64 = StandardNormal.sample(&mut rng);
                    lg.mean(continuous_parents.iter().map(|&p| row[p])) + lg.var.sqrt() * e
                }
            };
        }
        row
    });
    let columns = (0..model.nodes.len())
        .map(|v| rows.iter().map(|r| r[v]).collect())
        .collect();
    Ok(BnTable {
        nodes: model.nodes.clone(),
        n,
        columns,
        observed: vec![vec![true; n]; model.nodes.len()],
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::bn::{make_constraints, NodeKind};

    fn node(name: &str, kind: NodeKind, levels: usize) -> BnNode {
        BnNode {
            name: name.into(),
            kind,
            group: None,
            visit: None,
            levels,
            scored: true,
        }
    }

    /// d (binary, p=0.3) -> z1 ; z1 -> z2 with slope 2; z2 intercept depends on d.
    fn planted(n: usize, seed: u64) -> BnTable {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut d = Vec::with_capacity(n);
        let mut z1 = Vec::with_capacity(n);
        let mut z2 = Vec::with_capacity(n);
        for _ in 0..n {
            let di = if rng.gen::<f64>() < 0.3 { 1.0 } else { 0.0 };
            let e1: f64 = StandardNormal.sample(&mut rng);
            let e2: f64 = StandardNormal.sample(&mut rng);
            let a = 1.0 + 2.0 * di + e1;
            d.push(di);
            z1.push(a);
            z2.push(-0.5 + 2.0 * a + 0.5 * e2);
        }
        BnTable {
            nodes: vec![
                node("d", NodeKind::AuxMissingness, 2),
                node("z1", NodeKind::ContinuousZ, 0),
                node("z2", NodeKind::ContinuousZ, 0),
            ],
            n,
            columns: vec![d, z1, z2],
            observed: vec![vec![true; n]; 3],
        }
    }

    fn fit(t: &BnTable, edges: Vec<(usize, usize)>) -> ConditionalGaussianBN {
        let dag = Dag::new(3, edges);
        fit_parameters(&dag, t, &make_constraints(&t.nodes), "h").unwrap()
    }

    fn gaussian(m: &ConditionalGaussianBN, v: usize) -> &Vec<LinearGaussian> {
        match &m.cpds[v] {
            Cpd::Gaussian { configs, .. } => configs,
            _ => panic!("not gaussian"),
        }
    }

    #[test]
    fn root_fits_are_sample_moments() {
        let t = planted(1000, 1);
        let m = fit(&t, vec![]);
        let z = &t.columns[1];
        let mean = z.iter().sum::<f64>() / 1000.0;
        let var = z.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / 1000.0;
        let lg = &gaussian(&m, 1)[0];
        assert!((lg.intercept - mean).abs() < 1e-10);
        assert!((lg.var - var).abs() < 1e-10);
        let ones = t.columns[0].iter().filter(|&&x| x == 1.0).count();
        match &m.cpds[0] {
            Cpd::Discrete { table, .. } => {
                assert!((table[0][1] - (ones as f64 + 1.0) / 1002.0).abs() < 1e-12);
            }
            _ => panic!(),
        }
    }

    #[test]
    fn slope_recovered_within_three_standard_errors() {
        let t = planted(5000, 2);
        let m = fit(&t, vec![(0, 1), (1, 2)]);
        let lg = &gaussian(&m, 2)[0];
        // OLS standard error of the slope.
        let z1 = &t.columns[1];
        let mean = z1.iter().sum::<f64>() / z1.len() as f64;
        let sxx: f64 = z1.iter().map(|x| (x - mean).powi(2)).sum();
        let se = (lg.var * 5000.0 / 4998.0 / sxx).sqrt();
        assert!((lg.coefs[0] - 2.0).abs() < 3.0 * se);
        let by_d = gaussian(&m, 1);
        assert_eq!(by_d.len(), 2);
        assert!((by_d[1].intercept - by_d[0].intercept - 2.0).abs() < 0.2);
    }

    #[test]
    fn fit_is_a_local_likelihood_maximum() {
        let t = planted(2000, 3);
        let m = fit(&t, vec![(0, 1), (1, 2)]);
        let base = m.log_likelihood(&t);
        for v in [1, 2] {
            for c in 0..gaussian(&m, v).len() {
                for k in 0..=gaussian(&m, v)[c].coefs.len() {
                    for delta in [1e-3, -1e-3] {
                        let mut p = m.clone();
                        if let Cpd::Gaussian { configs, .. } = &mut p.cpds[v] {
                            if k == 0 {
                                configs[c].intercept += delta;
                            } else {
                                configs[c].coefs[k - 1] += delta;
                            }
                        }
                        assert!(p.log_likelihood(&t) <= base);
                    }
                }
            }
        }
    }

    #[test]
    fn sampling_recovers_parameters() {
        let t = planted(5000, 4);
        let m = fit(&t, vec![(0, 1), (1, 2)]);
        let s = sample_bn(&m, 50_000, 7, Exec::Parallel).unwrap();
        assert_eq!(s, sample_bn(&m, 50_000, 7, Exec::Sequential).unwrap());
        assert!(s.columns[0].iter().all(|&x| x == 0.0 || x == 1.0));
        let refit = fit(&s, vec![(0, 1), (1, 2)]);
        // z1 | d: intercept-only per configuration, SE = sqrt(var / n_c).
        for (a, b) in gaussian(&m, 1).iter().zip(gaussian(&refit, 1)) {
            assert!((a.intercept - b.intercept).abs() < 3.0 * (b.var / b.n as f64).sqrt());
        }
        // z2 | z1: simple regression standard errors from the sampled design.
        let (a, b) = (&gaussian(&m, 2)[0], &gaussian(&refit, 2)[0]);
        let x = &s.columns[1];
        let nn = x.len() as f64;
        let mean = x.iter().sum::<f64>() / nn;
        let sxx: f64 = x.iter().map(|v| (v - mean).powi(2)).sum();
        let se_slope = (b.var / sxx).sqrt();
        let se_int = (b.var * (1.0 / nn + mean * mean / sxx)).sqrt();
        assert!((a.coefs[0] - b.coefs[0]).abs() < 3.0 * se_slope, "{a:?} vs {b:?}");
        assert!((a.intercept - b.intercept).abs() < 3.0 * se_int, "{a:?} vs {b:?}");
        // Root mean within 3 SD / sqrt(n).
        let root = fit(&t, vec![]);
        let r = sample_bn(&root, 50_000, 8, Exec::Sequential).unwrap();
        let lg = &gaussian(&root, 1)[0];
        let mean = r.columns[1].iter().sum::<f64>() / 50_000.0;
        assert!((mean - lg.intercept).abs() < 3.0 * (lg.var / 50_000.0).sqrt());
        assert_eq!(sample_bn(&root, 0, 1, Exec::Sequential).unwrap().n, 0);
    }

    #[test]
    fn empty_configuration_falls_back_and_is_flagged() {
        let mut t = planted(200, 5);
        t.columns[0].iter_mut().for_each(|x| *x = 0.0);
        let m = fit(&t, vec![(0, 1)]);
        assert_eq!(m.flagged, vec!["z1[1]".to_string()]);
        assert!(gaussian(&m, 1)[1].fallback);
    }

    #[test]
    fn document_round_trip_and_validation() {
        let t = planted(300, 6);
        let m = fit(&t, vec![(0, 1), (1, 2)]);
        let text = m.to_json().unwrap();
        assert_eq!(ConditionalGaussianBN::from_json(&text, "h").unwrap(), m);
        assert!(matches!(
            ConditionalGaussianBN::from_json(&text, "other"),
            Err(Error::SchemaMismatch { .. })
        ));
        let mut cyclic = m.clone();
        cyclic.edges.push(("z2".into(), "z1".into()));
        assert!(ConditionalGaussianBN::from_json(&cyclic.to_json().unwrap(), "h").is_err());
        let mut forbidden = m.clone();
        forbidden.edges = vec![("z1".into(), "d".into())];
        assert!(ConditionalGaussianBN::from_json(&forbidden.to_json().unwrap(), "h").is_err());
    }

    #[test]
    fn continuous_parent_of_discrete_node_is_rejected() {
        let t = planted(50, 7);
        let dag = Dag::new(3, vec![(1, 0)]);
        assert!(fit_parameters(&dag, &t, &ConstraintLists::default(), "h").is_err());
    }
}
