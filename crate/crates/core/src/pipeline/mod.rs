//! End-to-end synthesis: run configuration, data preparation, group
//! autoencoders, the Bayesian network over their embeddings, and sampling.
//! [`run`] wraps these steps as file-producing stages.

pub mod run;

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::bn::{
    assemble_bn_table, embedding_prefix, family_size_categories, fit_parameters, learn_structure, make_constraints,
    sample_bn, BnLearnConfig, BnMode, ConditionalGaussianBN, GroupEmbedding, GroupLayout, FAMILY_NODE, SEX_NODE,
};
use crate::data::{
    impute_total_median, long_to_wide, match_cohort, ConflictPolicy, ImputationCounts, LongRecord, LongTable,
    MissingnessPattern, ReferenceCohort, WideMatrix,
};
use crate::error::{Error, Result};
use crate::hivae::{decode_sample, encode_dataset, train, DecodeMode, EncoderStrategy, Embeddings, GroupTensor, HivaeConfig, LatentCode, TrainedModel};
use crate::par::Exec;
use crate::schema::{CohortSchema, Group, ModuleGrouping, ModuleSetting};
use crate::seed;
use crate::surrogate::SurrogateConfig;

/// Variables whose item-level gaps are filled before training.
pub const IMPUTED_VARIABLES: [&str; 2] = ["m_ovw", "m_schulab"];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Method {
    Vambn,
    Ft,
    Mt,
}

impl Method {
    pub const ALL: [Method; 3] = [Method::Vambn, Method::Ft, Method::Mt];

    pub fn parse(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "vambn" => Ok(Method::Vambn),
            "ft" | "vambn-ft" => Ok(Method::Ft),
            "mt" | "vambn-mt" => Ok(Method::Mt),
            other => Err(Error::Config(format!("unknown method `{other}`"))),
        }
    }

    pub fn label(&self) -> &'static str {
        match self {
            Method::Vambn => "VAMBN",
            Method::Ft => "VAMBN-FT",
            Method::Mt => "VAMBN-MT",
        }
    }

    pub fn strategy(&self) -> EncoderStrategy {
        match self {
            Method::Vambn => EncoderStrategy::PerVisit,
            Method::Ft => EncoderStrategy::Flattened,
            Method::Mt => EncoderStrategy::Recurrent,
        }
    }

    pub fn bn_mode(&self) -> BnMode {
        match self {
            Method::Vambn => BnMode::PerVisit,
            _ => BnMode::Grouped,
        }
    }
}

/// Autoencoder hyperparameters shared by all groups unless overridden.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct HivaeSettings {
    pub learning_rate: f64,
    pub batch_size: usize,
    pub y_dim: usize,
    pub lstm_dim: usize,
    pub z_dim: usize,
    pub epochs: usize,
    pub clip_norm: f64,
    /// Mixture components; the group default when absent.
    pub s_dim: Option<usize>,
}

impl Default for HivaeSettings {
    fn default() -> Self {
        let d = HivaeConfig::default();
        Self {
            learning_rate: d.learning_rate,
            batch_size: d.batch_size,
            y_dim: d.y_dim,
            lstm_dim: d.lstm_dim,
            z_dim: d.z_dim,
            epochs: d.epochs,
            clip_norm: d.clip_norm,
            s_dim: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct BnSettings {
    pub restarts: usize,
    pub max_parents: Option<usize>,
}

impl Default for BnSettings {
    fn default() -> Self {
        let d = BnLearnConfig::default();
        Self {
            restarts: d.restarts,
            max_parents: d.max_parents,
        }
    }
}

/// Everything a run needs; loaded from TOML, unknown keys rejected.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    /// Schema file; the built-in schema when absent.
    pub schema: Option<PathBuf>,
    /// Real cohort in long CSV form; `<out>/cohort.csv` when absent.
    pub data: Option<PathBuf>,
    pub setting: ModuleSetting,
    pub method: Method,
    pub seed: u64,
    pub out: PathBuf,
    pub sample_size: usize,
    pub postprocess: bool,
    pub resamples: usize,
    pub surrogate: SurrogateConfig,
    pub hivae: HivaeSettings,
    /// Per-group replacements of `hivae`.
    pub hivae_groups: BTreeMap<Group, HivaeSettings>,
    pub bn: BnSettings,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            schema: None,
            data: None,
            setting: ModuleSetting::I,
            method: Method::Mt,
            seed: 1,
            out: PathBuf::from("run"),
            sample_size: 1312,
            postprocess: false,
            resamples: 20,
            surrogate: SurrogateConfig::default(),
            hivae: HivaeSettings::default(),
            hivae_groups: BTreeMap::new(),
            bn: BnSettings::default(),
        }
    }
}

impl RunConfig {
    pub fn from_toml_str(s: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(s)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        Self::from_toml_str(&text)
    }

    pub fn to_toml_string(&self) -> Result<String> {
        Ok(toml::to_string_pretty(self)?)
    }

    /// SHA-256 of the canonical TOML serialization.
    pub fn hash(&self) -> Result<String> {
        Ok(hex::encode(Sha256::digest(self.to_toml_string()?.as_bytes())))
    }

    pub fn validate(&self) -> Result<()> {
        if self.sample_size == 0 {
            return Err(Error::Config("sample_size must be positive".into()));
        }
        if self.resamples == 0 {
            return Err(Error::Config("resamples must be positive".into()));
        }
        if self.hivae_groups.contains_key(&Group::Standalone) {
            return Err(Error::Config("standalone variables have no autoencoder".into()));
        }
        for g in Group::MODULES {
            self.hivae_config(g, 0).validate()?;
        }
        Ok(())
    }

    pub fn load_schema(&self) -> Result<CohortSchema> {
        match &self.schema {
            Some(p) => CohortSchema::load(p),
            None => Ok(CohortSchema::default()),
        }
    }

    pub fn data_path(&self) -> PathBuf {
        self.data.clone().unwrap_or_else(|| self.out.join(run::COHORT_FILE))
    }

    /// Autoencoder configuration of one group for the configured method.
    pub fn hivae_config(&self, group: Group, seed: u64) -> HivaeConfig {
        let s = self.hivae_groups.get(&group).unwrap_or(&self.hivae);
        HivaeConfig {
            learning_rate: s.learning_rate,
            batch_size: s.batch_size,
            y_dim: s.y_dim,
            s_dim: s.s_dim.unwrap_or_else(|| HivaeConfig::default_s_dim(group)),
            lstm_dim: s.lstm_dim,
            z_dim: s.z_dim,
            epochs: s.epochs,
            encoder_strategy: self.method.strategy(),
            seed,
            clip_norm: s.clip_norm,
        }
    }

    pub fn bn_config(&self) -> BnLearnConfig {
        BnLearnConfig {
            restarts: self.bn.restarts,
            max_parents: self.bn.max_parents,
            seed: stage_seed(self.seed, "bn-learn"),
        }
    }
}

/// Seed of a pipeline stage, derived from the master seed.
pub fn stage_seed(master: u64, stage: &str) -> u64 {
    seed::derive(master, stage, 0)
}

/// Real cohort in the form the models consume.
#[derive(Debug, Clone)]
pub struct Prepared {
    /// Wide matrix as observed.
    pub raw: WideMatrix,
    /// Wide matrix after item-level imputation; models train on this.
    pub wide: WideMatrix,
    pub patterns: Vec<MissingnessPattern>,
    pub reference: ReferenceCohort,
    pub sex: Vec<u8>,
    /// Family-size category per participant.
    pub family: Vec<usize>,
    pub pers_ids: Vec<u64>,
    pub imputed: ImputationCounts,
    pub discarded: usize,
}

impl Prepared {
    pub fn from_long(long: &LongTable, schema: &CohortSchema) -> Result<Self> {
        if long.is_empty() {
            return Err(Error::Empty("cohort has no records".into()));
        }
        let conv = long_to_wide(long, schema, ConflictPolicy::KeepClosest)?;
        if !conv.discarded.is_empty() {
            log::warn!("{} conflicting visit records discarded", conv.discarded.len());
        }
        let mut p = Self::from_wide(conv.wide, schema)?;
        p.discarded = conv.discarded.len();
        Ok(p)
    }

    pub fn from_wide(raw: WideMatrix, schema: &CohortSchema) -> Result<Self> {
        if raw.n_rows == 0 {
            return Err(Error::Empty("cohort has no participants".into()));
        }
        let (wide, imputed) = impute_total_median(&raw, schema, &IMPUTED_VARIABLES)?;
        let n = raw.n_rows;
        let fam_ids: Vec<u64> = (0..n).map(|r| raw.fam_id(r)).collect();
        Ok(Self {
            patterns: raw.patterns(schema),
            reference: ReferenceCohort::from_wide(&raw, schema),
            sex: (0..n).map(|r| raw.sex(r)).collect(),
            family: family_size_categories(&fam_ids),
            pers_ids: (0..n).map(|r| raw.pers_id(r)).collect(),
            raw,
            wide,
            imputed,
            discarded: 0,
        })
    }
}

/// Groups with at least one member under `grouping`, in module order.
pub fn active_groups(schema: &CohortSchema, grouping: &ModuleGrouping) -> Vec<(Group, Vec<usize>)> {
    Group::MODULES
        .iter()
        .map(|&g| (g, grouping.members(schema, g)))
        .filter(|(_, m)| !m.is_empty())
        .collect()
}

fn group_index(group: Group) -> u64 {
    Group::MODULES.iter().position(|&g| g == group).unwrap_or(0) as u64
}

pub fn group_by_name(name: &str) -> Result<Group> {
    Group::MODULES
        .iter()
        .copied()
        .find(|g| g.name() == name)
        .ok_or_else(|| Error::Config(format!("unknown group `{name}`")))
}

fn members_of(model: &TrainedModel, schema: &CohortSchema) -> Result<Vec<usize>> {
    model
        .names()
        .iter()
        .map(|n| {
            schema
                .long_index(n)
                .ok_or_else(|| Error::SchemaMismatch {
                    expected: schema.hash(),
                    found: format!("model variable `{n}`"),
                })
        })
        .collect()
}

/// Trains one autoencoder set per active group (groups run through `exec`).
pub fn train_groups(prep: &Prepared, schema: &CohortSchema, config: &RunConfig, exec: Exec) -> Result<Vec<TrainedModel>> {
    let grouping = ModuleGrouping::preset(config.setting, schema);
    grouping.validate(schema)?;
    let groups = active_groups(schema, &grouping);
    let hash = schema.hash();
    let train_seed = stage_seed(config.seed, "train");
    exec.map_slice(&groups, |(g, members)| {
        let tensor = GroupTensor::from_wide(&prep.wide, schema, members);
        let cfg = config.hivae_config(*g, seed::derive(train_seed, "group", group_index(*g)));
        log::info!("training group {} ({} variables, {:?})", g.name(), members.len(), cfg.encoder_strategy);
        train(&tensor, &cfg, g.name(), &hash, exec).map_err(|e| e.context(format!("group `{}`", g.name())))
    })
    .into_iter()
    .collect()
}

/// Deterministic embeddings of the prepared cohort under each group model.
pub fn encode_groups(models: &[TrainedModel], prep: &Prepared, schema: &CohortSchema, exec: Exec) -> Result<Vec<Embeddings>> {
    models
        .iter()
        .map(|m| {
            let tensor = GroupTensor::from_wide(&prep.wide, schema, &members_of(m, schema)?);
            encode_dataset(m, &tensor, exec).map_err(|e| e.context(format!("group `{}`", m.group)))
        })
        .collect()
}

fn layout_of(model: &TrainedModel) -> Result<GroupLayout> {
    let cfg = &model
        .models
        .first()
        .ok_or_else(|| Error::Empty(format!("group `{}` has no models", model.group)))?
        .config;
    Ok(GroupLayout {
        group: group_by_name(&model.group)?,
        s_dim: cfg.s_dim,
        z_dim: cfg.z_dim,
    })
}

fn bn_mode_of(models: &[TrainedModel]) -> BnMode {
    match models.first().map(|m| m.strategy) {
        Some(EncoderStrategy::PerVisit) => BnMode::PerVisit,
        _ => BnMode::Grouped,
    }
}

/// Learns structure and parameters of the network over embeddings,
/// attendance indicators and covariates.
pub fn learn_network(
    models: &[TrainedModel],
    embeddings: &[Embeddings],
    prep: &Prepared,
    schema: &CohortSchema,
    bn: &BnLearnConfig,
    exec: Exec,
) -> Result<ConditionalGaussianBN> {
    if models.len() != embeddings.len() {
        return Err(Error::Shape("one embedding set per group model is required".into()));
    }
    let groups: Vec<GroupEmbedding<'_>> = models
        .iter()
        .zip(embeddings)
        .map(|(m, e)| Ok(GroupEmbedding { layout: layout_of(m)?, embeddings: e }))
        .collect::<Result<_>>()?;
    let table = assemble_bn_table(
        bn_mode_of(models),
        &groups,
        &prep.patterns,
        &prep.sex,
        &prep.family,
        &prep.pers_ids,
        schema.n_visits,
    )?;
    let constraints = make_constraints(&table.nodes);
    let dag = learn_structure(&table, &constraints, bn, exec)?;
    log::info!("network has {} edges (score {:.3})", dag.edges.len(), dag.score);
    fit_parameters(&dag, &table, &constraints, &schema.hash())
}

/// Family identifiers for sampled family-size categories: participants of
/// category `c` are grouped, in order, into families of `c + 1` members.
pub fn assign_families(categories: &[usize]) -> Vec<u64> {
    let mut ids = vec![0u64; categories.len()];
    let mut next = 1u64;
    let max = categories.iter().copied().max().unwrap_or(0);
    for c in 0..=max {
        let members: Vec<usize> = (0..categories.len()).filter(|&i| categories[i] == c).collect();
        for chunk in members.chunks(c + 1) {
            for &i in chunk {
                ids[i] = next;
            }
            next += 1;
        }
    }
    ids
}

/// Fitted generator: group autoencoders plus the network over their codes.
#[derive(Debug, Clone)]
pub struct Synthesizer {
    pub schema: CohortSchema,
    pub models: Vec<TrainedModel>,
    pub network: ConditionalGaussianBN,
}

impl Synthesizer {
    /// Trains, encodes and learns the network in one go.
    pub fn fit(prep: &Prepared, schema: &CohortSchema, config: &RunConfig, exec: Exec) -> Result<Self> {
        let models = train_groups(prep, schema, config, exec).map_err(|e| e.context("train"))?;
        let embeddings = encode_groups(&models, prep, schema, exec).map_err(|e| e.context("encode"))?;
        let network = learn_network(&models, &embeddings, prep, schema, &config.bn_config(), exec)
            .map_err(|e| e.context("bn-learn"))?;
        Self::new(schema.clone(), models, network)
    }

    pub fn new(schema: CohortSchema, models: Vec<TrainedModel>, network: ConditionalGaussianBN) -> Result<Self> {
        let hash = schema.hash();
        for m in &models {
            if m.schema_hash != hash {
                return Err(Error::SchemaMismatch {
                    expected: hash,
                    found: m.schema_hash.clone(),
                });
            }
        }
        if network.schema_hash != hash {
            return Err(Error::SchemaMismatch {
                expected: hash,
                found: network.schema_hash.clone(),
            });
        }
        Ok(Self { schema, models, network })
    }

    /// Draws `n` complete synthetic participants (every visit present).
    pub fn sample(&self, n: usize, seed: u64, exec: Exec) -> Result<LongTable> {
        if n == 0 {
            return Err(Error::Config("sample size must be positive".into()));
        }
        let table = sample_bn(&self.network, n, seed::derive(seed, "bn-sample", 0), exec)?;
        let col = |name: &str| -> Result<&[f64]> {
            table
                .column(name)
                .ok_or_else(|| Error::Assembly { participant: 0, node: name.to_string() })
        };
        struct Slot<'a> {
            model: usize,
            sub: usize,
            members: Vec<usize>,
            s: &'a [f64],
            z: Vec<&'a [f64]>,
        }
        let mut slots = Vec::new();
        for (k, m) in self.models.iter().enumerate() {
            let layout = layout_of(m)?;
            let members = members_of(m, &self.schema)?;
            for (sub, model) in m.models.iter().enumerate() {
                let prefix = embedding_prefix(layout.group, model.visit);
                slots.push(Slot {
                    model: k,
                    sub,
                    members: members.clone(),
                    s: col(&format!("{prefix}_s"))?,
                    z: (1..=layout.z_dim).map(|j| col(&format!("{prefix}_z{j}"))).collect::<Result<_>>()?,
                });
            }
        }
        let sex = col(SEX_NODE)?;
        let fam: Vec<usize> = col(FAMILY_NODE)?.iter().map(|&f| f as usize).collect();
        let fam_ids = assign_families(&fam);
        let n_visits = self.schema.n_visits;
        let d = self.schema.n_longitudinal();
        let decode_seed = seed::derive(seed, "decode", 0);
        let rows: Vec<Vec<LongRecord>> = exec.map(n, |i| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed::mix(decode_seed, i as u64));
            let mut cells = vec![vec![None; d]; n_visits];
            for slot in &slots {
                let model = &self.models[slot.model].models[slot.sub];
                let code = LatentCode {
                    s: slot.s[i] as usize,
                    z: slot.z.iter().map(|c| c[i]).collect(),
                };
                let values = decode_sample(model, &code, DecodeMode::Sample, &mut rng);
                let visits: Vec<usize> = match model.visit {
                    Some(t) => vec![t],
                    None => (0..n_visits).collect(),
                };
                let w = slot.members.len();
                for (vi, &t) in visits.iter().enumerate() {
                    for (k, &j) in slot.members.iter().enumerate() {
                        cells[t][j] = Some(values[vi * w + k]);
                    }
                }
            }
            cells
                .into_iter()
                .enumerate()
                .map(|(visit, values)| LongRecord {
                    pers_id: i as u64 + 1,
                    fam_id: fam_ids[i],
                    sex: sex[i] as u8,
                    visit,
                    values,
                })
                .collect()
        });
        Ok(LongTable::new(rows.into_iter().flatten().collect()))
    }

    /// Samples a pool and matches it to the reference cohort's size, sex
    /// split and attendance patterns.
    pub fn sample_postprocessed(
        &self,
        reference: &ReferenceCohort,
        requested: usize,
        seed: u64,
        exec: Exec,
    ) -> Result<LongTable> {
        let pool = postprocess_pool_size(reference, requested);
        let raw = self.sample(pool, seed, exec)?;
        match_cohort(&raw, reference, seed::derive(seed, "postprocess", 0))
    }
}

/// Pool drawn before matching: the requested size, raised to 1.5 times the
/// reference size so both sex strata can be filled.
pub fn postprocess_pool_size(reference: &ReferenceCohort, requested: usize) -> usize {
    requested.max(reference.n() * 3 / 2 + 1)
}
