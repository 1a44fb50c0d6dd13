//! Conditional-Gaussian Bayesian network over group embeddings, visit
//! attendance indicators and covariates.
//!
//! Discrete nodes (mixture components, attendance indicators, covariates)
//! only have discrete parents; continuous embedding nodes are linear-Gaussian
//! in their continuous parents with one coefficient set per configuration of
//! their discrete parents.

mod learn;
mod model;

use std::collections::BTreeSet;

use serde::{Deserialize, Serialize};

pub use learn::{family_score, learn_structure, BnLearnConfig, Dag};
pub use model::{fit_parameters, sample_bn, ConditionalGaussianBN, Cpd, LinearGaussian};

use crate::data::MissingnessPattern;
use crate::error::{Error, Result};
use crate::hivae::Embeddings;
use crate::schema::Group;

/// Name of the family-size covariate that stands in for `fam_ID`.
pub const FAMILY_NODE: &str = "fam_size";
pub const SEX_NODE: &str = "sex";
/// Family-size categories: 1, 2, 3 or more cohort members.
pub const FAMILY_LEVELS: usize = 3;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NodeKind {
    DiscreteS,
    ContinuousZ,
    AuxMissingness,
    Covariate,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct BnNode {
    pub name: String,
    pub kind: NodeKind,
    pub group: Option<Group>,
    /// Present for per-visit embedding nodes and attendance indicators.
    pub visit: Option<usize>,
    /// Number of levels for discrete nodes, 0 for continuous ones.
    pub levels: usize,
    /// Whether the node takes part in structure scoring. Constant
    /// single-level nodes and the family covariate do not.
    pub scored: bool,
}

impl BnNode {
    pub fn is_discrete(&self) -> bool {
        self.kind != NodeKind::ContinuousZ
    }
}

/// How embeddings map onto nodes.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BnMode {
    /// One `(s, z)` per group.
    Grouped,
    /// One `(s, z)` per group and visit.
    PerVisit,
}

/// The embedding structure of one group.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct GroupLayout {
    pub group: Group,
    pub s_dim: usize,
    pub z_dim: usize,
}

/// Node-name prefix of a group's embedding, with a visit tag in per-visit mode.
pub fn embedding_prefix(group: Group, visit: Option<usize>) -> String {
    match visit {
        Some(t) => format!("{}_v{t}", group.name()),
        None => group.name().to_string(),
    }
}

/// Node list: per group (and visit) an `s` node and `z_dim` continuous
/// nodes, then one attendance indicator per visit, then `fam_size`, `sex`.
pub fn bn_nodes(mode: BnMode, groups: &[GroupLayout], n_visits: usize) -> Vec<BnNode> {
    let mut nodes = Vec::new();
    let visits: Vec<Option<usize>> = match mode {
        BnMode::Grouped => vec![None],
        BnMode::PerVisit => (0..n_visits).map(Some).collect(),
    };
    for g in groups {
        for &visit in &visits {
            let prefix = embedding_prefix(g.group, visit);
            nodes.push(BnNode {
                name: format!("{prefix}_s"),
                kind: NodeKind::DiscreteS,
                group: Some(g.group),
                visit,
                levels: g.s_dim,
                scored: g.s_dim > 1,
            });
            for k in 0..g.z_dim {
                nodes.push(BnNode {
                    name: format!("{prefix}_z{}", k + 1),
                    kind: NodeKind::ContinuousZ,
                    group: Some(g.group),
                    visit,
                    levels: 0,
                    scored: true,
                });
            }
        }
    }
    for t in 0..n_visits {
        nodes.push(BnNode {
            name: format!("aux_v{t}"),
            kind: NodeKind::AuxMissingness,
            group: None,
            // Attendance indicators are only time-ordered when embeddings are.
            visit: (mode == BnMode::PerVisit).then_some(t),
            levels: 2,
            scored: true,
        });
    }
    nodes.push(BnNode {
        name: FAMILY_NODE.into(),
        kind: NodeKind::Covariate,
        group: None,
        visit: None,
        levels: FAMILY_LEVELS,
        scored: false,
    });
    nodes.push(BnNode {
        name: SEX_NODE.into(),
        kind: NodeKind::Covariate,
        group: None,
        visit: None,
        levels: 2,
        scored: true,
    });
    nodes
}

/// Observation table: one row per participant, one column per node.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BnTable {
    pub nodes: Vec<BnNode>,
    pub n: usize,
    /// Column-major values; discrete values are level indices.
    pub columns: Vec<Vec<f64>>,
    /// Column-major observedness (per-visit embeddings of missed visits are unobserved).
    pub observed: Vec<Vec<bool>>,
}

impl BnTable {
    pub fn index(&self, name: &str) -> Option<usize> {
        self.nodes.iter().position(|n| n.name == name)
    }

    pub fn column(&self, name: &str) -> Option<&[f64]> {
        self.index(name).map(|k| self.columns[k].as_slice())
    }

    /// Attendance-indicator column for visit `t`, if present.
    pub fn aux_index(&self, t: usize) -> Option<usize> {
        self.index(&format!("aux_v{t}"))
    }

    /// Rows whose value of `node` enters estimation: all rows, except for
    /// per-visit embedding nodes, where only rows attending that visit count.
    pub fn estimation_rows(&self, node: usize) -> Vec<usize> {
        let nd = &self.nodes[node];
        let gate = match (nd.kind, nd.visit) {
            (NodeKind::DiscreteS | NodeKind::ContinuousZ, Some(t)) => self.aux_index(t),
            _ => None,
        };
        match gate {
            Some(a) => (0..self.n).filter(|&i| self.columns[a][i] == 1.0).collect(),
            None => (0..self.n).collect(),
        }
    }

    /// Copy with unobserved cells filled by the observed column mean
    /// (continuous) or most frequent level (discrete).
    pub fn filled(&self) -> BnTable {
        let mut out = self.clone();
        for (k, node) in self.nodes.iter().enumerate() {
            let obs: Vec<f64> = (0..self.n)
                .filter(|&i| self.observed[k][i])
                .map(|i| self.columns[k][i])
                .collect();
            if obs.len() == self.n {
                continue;
            }
            let fill = if obs.is_empty() {
                0.0
            } else if node.is_discrete() {
                let mut counts = vec![0usize; node.levels.max(1)];
                for &x in &obs {
                    counts[x as usize] += 1;
                }
                counts
                    .iter()
                    .enumerate()
                    .fold((0, 0), |b, (l, &c)| if c > b.1 { (l, c) } else { b })
                    .0 as f64
            } else {
                obs.iter().sum::<f64>() / obs.len() as f64
            };
            for i in 0..self.n {
                if !self.observed[k][i] {
                    out.columns[k][i] = fill;
                }
            }
        }
        out
    }
}

/// Family-size category of every participant from `fam_ID` values.
pub fn family_size_categories(fam_ids: &[u64]) -> Vec<usize> {
    let mut counts = std::collections::BTreeMap::new();
    for f in fam_ids {
        *counts.entry(*f).or_insert(0usize) += 1;
    }
    fam_ids
        .iter()
        .map(|f| (counts[f] - 1).min(FAMILY_LEVELS - 1))
        .collect()
}

/// Group embeddings plus the layout they were produced under.
#[derive(Debug, Clone)]
pub struct GroupEmbedding<'a> {
    pub layout: GroupLayout,
    pub embeddings: &'a Embeddings,
}

/// Builds the observation table. In per-visit mode embedding nodes of
/// unattended visits are unobserved.
pub fn assemble_bn_table(
    mode: BnMode,
    groups: &[GroupEmbedding<'_>],
    patterns: &[MissingnessPattern],
    sex: &[u8],
    family: &[usize],
    pers_ids: &[u64],
    n_visits: usize,
) -> Result<BnTable> {
    let n = patterns.len();
    if sex.len() != n || family.len() != n || pers_ids.len() != n {
        return Err(Error::Shape("covariate columns and patterns differ in length".into()));
    }
    let layouts: Vec<GroupLayout> = groups.iter().map(|g| g.layout).collect();
    let nodes = bn_nodes(mode, &layouts, n_visits);
    let mut columns = Vec::with_capacity(nodes.len());
    let mut observed = Vec::with_capacity(nodes.len());
    let n_models = match mode {
        BnMode::Grouped => 1,
        BnMode::PerVisit => n_visits,
    };
    for g in groups {
        let codes = &g.embeddings.codes;
        let label = g.layout.group.name();
        if codes.len() != n_models {
            return Err(Error::Assembly {
                participant: pers_ids.first().copied().unwrap_or(0),
                node: format!("{label}: expected {n_models} embedding sets, found {}", codes.len()),
            });
        }
        for (m, per_model) in codes.iter().enumerate() {
            if per_model.len() != n {
                let i = per_model.len().min(n.saturating_sub(1));
                return Err(Error::Assembly {
                    participant: pers_ids.get(i).copied().unwrap_or(0),
                    node: format!("{label} embedding {m}"),
                });
            }
            let mask: Vec<bool> = match mode {
                BnMode::Grouped => vec![true; n],
                BnMode::PerVisit => patterns.iter().map(|p| p.attends(m)).collect(),
            };
            columns.push(per_model.iter().map(|c| c.s as f64).collect());
            observed.push(mask.clone());
            for k in 0..g.layout.z_dim {
                let mut col = Vec::with_capacity(n);
                for (i, c) in per_model.iter().enumerate() {
                    let z = c.z.get(k).copied().filter(|z| z.is_finite()).ok_or_else(|| Error::Assembly {
                        participant: pers_ids[i],
                        node: format!("{label} embedding {m}, z{}", k + 1),
                    })?;
                    col.push(z);
                }
                columns.push(col);
                observed.push(mask.clone());
            }
        }
    }
    for t in 0..n_visits {
        columns.push(patterns.iter().map(|p| if p.attends(t) { 1.0 } else { 0.0 }).collect());
        observed.push(vec![true; n]);
    }
    columns.push(family.iter().map(|&f| f as f64).collect());
    observed.push(vec![true; n]);
    columns.push(sex.iter().map(|&s| s as f64).collect());
    observed.push(vec![true; n]);
    debug_assert_eq!(columns.len(), nodes.len());
    Ok(BnTable {
        nodes,
        n,
        columns,
        observed,
    })
}

/// Forbidden and required directed edges, by node name.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConstraintLists {
    pub blacklist: BTreeSet<(String, String)>,
    pub whitelist: BTreeSet<(String, String)>,
}

impl ConstraintLists {
    pub fn allows(&self, from: &str, to: &str) -> bool {
        !self.blacklist.contains(&(from.to_string(), to.to_string()))
    }

    pub fn validate(&self) -> Result<()> {
        if let Some(e) = self.whitelist.intersection(&self.blacklist).next() {
            return Err(Error::Constraint(format!("edge {} -> {} is both required and forbidden", e.0, e.1)));
        }
        Ok(())
    }
}

/// Blacklist: edges going back in time, edges into covariates, and edges
/// from continuous into discrete nodes.
pub fn make_constraints(nodes: &[BnNode]) -> ConstraintLists {
    let mut blacklist = BTreeSet::new();
    for from in nodes {
        for to in nodes {
            if from.name == to.name {
                continue;
            }
            let back_in_time = matches!((from.visit, to.visit), (Some(a), Some(b)) if b < a);
            let into_covariate = to.kind == NodeKind::Covariate;
            let continuous_into_discrete = !from.is_discrete() && to.is_discrete();
            if back_in_time || into_covariate || continuous_into_discrete {
                blacklist.insert((from.name.clone(), to.name.clone()));
            }
        }
    }
    ConstraintLists {
        blacklist,
        whitelist: BTreeSet::new(),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::hivae::LatentCode;

    fn layouts() -> Vec<GroupLayout> {
        Group::MODULES
            .iter()
            .map(|&group| GroupLayout {
                group,
                s_dim: crate::hivae::HivaeConfig::default_s_dim(group),
                z_dim: 1,
            })
            .collect()
    }

    #[test]
    fn node_counts() {
        let z = 1;
        assert_eq!(bn_nodes(BnMode::Grouped, &layouts(), 16).len(), 4 * (1 + z) + 16 + 2);
        assert_eq!(bn_nodes(BnMode::PerVisit, &layouts(), 16).len(), 4 * 16 * (1 + z) + 16 + 2);
    }

    #[test]
    fn blacklist_rules() {
        let nodes = bn_nodes(BnMode::PerVisit, &layouts(), 16);
        let c = make_constraints(&nodes);
        assert!(!c.allows("nutrition_v5_z1", "nutrition_v3_z1"));
        assert!(c.allows("nutrition_v3_z1", "nutrition_v5_z1"));
        assert!(!c.allows("aux_v9", "anthropometric_v2_z1"));
        for n in &nodes {
            if n.name != SEX_NODE {
                assert!(!c.allows(&n.name, SEX_NODE));
            }
        }
        assert!(!c.allows("nutrition_v1_z1", "aux_v4"));
        assert!(c.allows("aux_v1", "nutrition_v4_z1"));

        let grouped = bn_nodes(BnMode::Grouped, &layouts(), 16);
        let c = make_constraints(&grouped);
        // Without visit tags only covariate and family-type rules remain.
        assert!(c.allows("aux_v9", "aux_v2"));
        assert!(c.allows("nutrition_z1", "times_z1"));
        assert!(!c.allows("nutrition_z1", "anthropometric_s"));
        assert!(!c.allows("aux_v0", FAMILY_NODE));
    }

    fn codes(n: usize, s: usize) -> Vec<LatentCode> {
        (0..n).map(|i| LatentCode { s, z: vec![i as f64] }).collect()
    }

    #[test]
    fn assembly_sets_aux_and_masks_missed_visits() {
        let n_visits = 3;
        let emb = Embeddings {
            codes: (0..n_visits).map(|_| codes(2, 0)).collect(),
            observed: vec![vec![true; 2]; n_visits],
        };
        let g = [GroupEmbedding {
            layout: GroupLayout {
                group: Group::Times,
                s_dim: 1,
                z_dim: 1,
            },
            embeddings: &emb,
        }];
        let patterns = vec![
            MissingnessPattern::new(vec![0, 1, 2]).unwrap(),
            MissingnessPattern::new(vec![1]).unwrap(),
        ];
        let t = assemble_bn_table(BnMode::PerVisit, &g, &patterns, &[0, 1], &[0, 0], &[10, 11], n_visits).unwrap();
        assert_eq!(t.column("aux_v0").unwrap(), &[1.0, 0.0]);
        assert_eq!(t.column("aux_v1").unwrap(), &[1.0, 1.0]);
        let z0 = t.index("times_v0_z1").unwrap();
        assert_eq!(t.observed[z0], vec![true, false]);
        assert_eq!(t.estimation_rows(z0), vec![0]);
        assert_eq!(t.filled().columns[z0], vec![0.0, 0.0]);

        let short = Embeddings {
            codes: vec![codes(1, 0); n_visits],
            observed: vec![vec![true; 1]; n_visits],
        };
        let g = [GroupEmbedding {
            layout: g[0].layout,
            embeddings: &short,
        }];
        assert!(matches!(
            assemble_bn_table(BnMode::PerVisit, &g, &patterns, &[0, 1], &[0, 0], &[10, 11], n_visits),
            Err(Error::Assembly { participant: 11, .. })
        ));
    }

    #[test]
    fn family_categories() {
        assert_eq!(family_size_categories(&[1, 2, 2, 3, 3, 3, 3]), vec![0, 1, 1, 2, 2, 2, 2]);
    }
}
