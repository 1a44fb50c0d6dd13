//! File-producing pipeline stages with a run manifest.
//!
//! Each stage reads its inputs from the output directory, writes its
//! artifacts, and records their SHA-256 digests and the stage seed in
//! `manifest.json`. Wall-clock timings go to a separate `timings.json` so the
//! manifest itself is reproducible byte for byte.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::{
    encode_groups, learn_network, stage_seed, train_groups, Method, Prepared, RunConfig, Synthesizer,
};
use crate::bn::ConditionalGaussianBN;
use crate::data::{apply_patterns, long_to_wide, slots_to_wide, wide_to_long, ConflictPolicy, LongTable, ReferenceCohort, WideMatrix};
use crate::error::{Error, Result};
use crate::eval::plots;
use crate::eval::{
    bin_edges, closure_errors, evaluate, fit_lmm_cubic, lockstep_errors, observed_cells, pearson_matrix,
    predict_trend, repeated_sampling_experiment, EvaluationReport, ExperimentConfig, MethodComparison,
    TrendEnvelope, TrendModel,
};
use crate::hivae::{Embeddings, TrainedModel};
use crate::par::Exec;
use crate::schema::{CohortSchema, ModuleSetting};
use crate::surrogate::{generate_cohort, ground_truth};

pub const COHORT_FILE: &str = "cohort.csv";
pub const GROUND_TRUTH_FILE: &str = "ground_truth.toml";
pub const PREPARED_FILE: &str = "prepared.csv";
pub const MODELS_DIR: &str = "models";
pub const EMBEDDINGS_DIR: &str = "embeddings";
pub const NETWORK_FILE: &str = "network.json";
pub const RAW_FILE: &str = "synthetic_raw.csv";
pub const RAW_WIDE_FILE: &str = "synthetic_raw_wide.csv";
pub const POST_FILE: &str = "synthetic_post.csv";
pub const POST_WIDE_FILE: &str = "synthetic_post_wide.csv";
pub const REPORT_FILE: &str = "report.json";
pub const TREND_FILE: &str = "trend.json";
pub const REPRODUCTION_FILE: &str = "reproduction.json";
pub const FIGURES_DIR: &str = "figures";
pub const MANIFEST_FILE: &str = "manifest.json";
pub const TIMINGS_FILE: &str = "timings.json";
pub const LOCK_FILE: &str = ".lock";

const MANIFEST_FORMAT: u32 = 1;
/// Synthetic cohort size of the large-sample analyses.
pub const LARGE_SAMPLE: usize = 10_000;
/// Outcome of the trend analyses.
pub const TREND_OUTCOME: &str = "ZUZU_p";
/// Variable and visit of the density figure.
const DENSITY_VARIABLE: (&str, usize) = ("ZUCK_p", 2);

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ArtifactEntry {
    /// Relative to the output directory, `/`-separated.
    pub path: String,
    pub sha256: String,
}

/// Provenance of every artifact in an output directory.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub format: u32,
    pub tool_version: String,
    pub config_hash: String,
    pub schema_hash: String,
    pub input_hash: Option<String>,
    pub seeds: BTreeMap<String, u64>,
    pub artifacts: BTreeMap<String, ArtifactEntry>,
}

impl RunManifest {
    fn new(config_hash: String, schema_hash: String) -> Self {
        Self {
            format: MANIFEST_FORMAT,
            tool_version: env!("CARGO_PKG_VERSION").to_string(),
            config_hash,
            schema_hash,
            input_hash: None,
            seeds: BTreeMap::new(),
            artifacts: BTreeMap::new(),
        }
    }

    pub fn load(path: &Path) -> Result<Self> {
        Ok(serde_json::from_str(&fs::read_to_string(path)?)?)
    }
}

pub fn sha256_file(path: &Path) -> Result<String> {
    Ok(hex::encode(Sha256::digest(fs::read(path)?)))
}

/// Exclusive ownership of an output directory, released on drop.
#[derive(Debug)]
struct DirLock {
    path: PathBuf,
}

impl DirLock {
    fn acquire(dir: &Path) -> Result<Self> {
        let path = dir.join(LOCK_FILE);
        match fs::OpenOptions::new().write(true).create_new(true).open(&path) {
            Ok(_) => Ok(Self { path }),
            Err(e) if e.kind() == std::io::ErrorKind::AlreadyExists => Err(Error::Config(format!(
                "output directory {} is locked by another run (remove {} if stale)",
                dir.display(),
                path.display()
            ))),
            Err(e) => Err(e.into()),
        }
    }
}

impl Drop for DirLock {
    fn drop(&mut self) {
        let _ = fs::remove_file(&self.path);
    }
}

/// One invocation against an output directory.
#[derive(Debug)]
pub struct Run {
    pub config: RunConfig,
    pub schema: CohortSchema,
    pub exec: Exec,
    pub overwrite: bool,
    manifest: RunManifest,
    _lock: DirLock,
}

impl Run {
    pub fn open(config: RunConfig, overwrite: bool, exec: Exec) -> Result<Self> {
        config.validate()?;
        let schema = config.load_schema()?;
        schema.validate()?;
        fs::create_dir_all(&config.out)?;
        let lock = DirLock::acquire(&config.out)?;
        let config_hash = config.hash()?;
        let manifest_path = config.out.join(MANIFEST_FILE);
        let mut manifest = if manifest_path.exists() {
            RunManifest::load(&manifest_path)?
        } else {
            RunManifest::new(config_hash.clone(), schema.hash())
        };
        if manifest.schema_hash != schema.hash() {
            return Err(Error::SchemaMismatch {
                expected: schema.hash(),
                found: manifest.schema_hash,
            });
        }
        manifest.config_hash = config_hash;
        Ok(Self {
            config,
            schema,
            exec,
            overwrite,
            manifest,
            _lock: lock,
        })
    }

    pub fn out(&self) -> &Path {
        &self.config.out
    }

    pub fn manifest(&self) -> &RunManifest {
        &self.manifest
    }

    fn path(&self, rel: &str) -> PathBuf {
        self.config.out.join(rel)
    }

    fn guard(&self, rel: &str) -> Result<PathBuf> {
        let p = self.path(rel);
        if p.exists() && !self.overwrite {
            return Err(Error::Config(format!(
                "{} already exists; pass --overwrite to replace it",
                p.display()
            )));
        }
        if let Some(parent) = p.parent() {
            fs::create_dir_all(parent)?;
        }
        Ok(p)
    }

    fn record(&mut self, key: &str, rel: &str) -> Result<()> {
        let sha256 = sha256_file(&self.path(rel))?;
        self.manifest.artifacts.insert(
            key.to_string(),
            ArtifactEntry {
                path: rel.to_string(),
                sha256,
            },
        );
        Ok(())
    }

    fn write_bytes(&mut self, key: &str, rel: &str, bytes: &[u8]) -> Result<()> {
        let p = self.guard(rel)?;
        fs::write(p, bytes)?;
        self.record(key, rel)
    }

    fn write_json<T: Serialize>(&mut self, key: &str, rel: &str, value: &T) -> Result<()> {
        let text = serde_json::to_string_pretty(value)?;
        self.write_bytes(key, rel, text.as_bytes())
    }

    fn write_long(&mut self, key: &str, rel: &str, long: &LongTable) -> Result<()> {
        let mut buf = Vec::new();
        long.write_csv(&self.schema, &mut buf)?;
        self.write_bytes(key, rel, &buf)
    }

    fn write_wide(&mut self, key: &str, rel: &str, wide: &WideMatrix) -> Result<()> {
        let mut buf = Vec::new();
        wide.write_csv(&self.schema, &mut buf)?;
        self.write_bytes(key, rel, &buf)
    }

    fn figure(&mut self, name: &str, draw: impl FnOnce(&Path) -> Result<()>) -> Result<()> {
        let rel = format!("{FIGURES_DIR}/{name}.svg");
        let p = self.guard(&rel)?;
        draw(&p)?;
        self.record(&format!("figure:{name}"), &rel)
    }

    fn seed(&mut self, stage: &str) -> u64 {
        let s = stage_seed(self.config.seed, stage);
        self.manifest.seeds.insert(stage.to_string(), s);
        s
    }

    /// Writes the manifest and adds the stage's wall time to the sidecar.
    fn finish(&mut self, stage: &str, started: Instant) -> Result<()> {
        let text = serde_json::to_string_pretty(&self.manifest)?;
        fs::write(self.path(MANIFEST_FILE), text)?;
        let tpath = self.path(TIMINGS_FILE);
        let mut timings: BTreeMap<String, f64> = match fs::read_to_string(&tpath) {
            Ok(t) => serde_json::from_str(&t).unwrap_or_default(),
            Err(_) => BTreeMap::new(),
        };
        timings.insert(stage.to_string(), started.elapsed().as_secs_f64());
        fs::write(tpath, serde_json::to_string_pretty(&timings)?)?;
        log::info!("stage {stage} finished in {:.1}s", started.elapsed().as_secs_f64());
        Ok(())
    }

    fn stage<T>(&mut self, name: &str, f: impl FnOnce(&mut Self) -> Result<T>) -> Result<T> {
        let started = Instant::now();
        let out = f(self).map_err(|e| e.context(format!("stage {name}")))?;
        self.finish(name, started)?;
        Ok(out)
    }

    // ---- loading ----

    fn real_long(&mut self) -> Result<LongTable> {
        let p = self.config.data_path();
        if !p.exists() {
            return Err(Error::InvalidInput(format!(
                "no cohort at {}; run `simulate` or set `data`",
                p.display()
            )));
        }
        self.manifest.input_hash = Some(sha256_file(&p)?);
        LongTable::load(&self.schema, &p)
    }

    fn prepared(&mut self) -> Result<Prepared> {
        let p = self.path(PREPARED_FILE);
        if !p.exists() {
            return Err(Error::InvalidInput("no prepared data; run `prepare` first".into()));
        }
        let real = self.real_long()?;
        let prep = Prepared::from_long(&real, &self.schema)?;
        let stored = WideMatrix::load(&self.schema, &p)?;
        if stored != prep.wide {
            return Err(Error::InvalidInput(format!(
                "{} does not match the current cohort; rerun `prepare`",
                p.display()
            )));
        }
        Ok(prep)
    }

    fn models(&self) -> Result<Vec<TrainedModel>> {
        let dir = self.path(MODELS_DIR);
        let mut files: Vec<PathBuf> = match fs::read_dir(&dir) {
            Ok(rd) => rd.filter_map(|e| e.ok().map(|e| e.path())).collect(),
            Err(_) => Vec::new(),
        };
        files.retain(|p| p.extension().is_some_and(|e| e == "json"));
        files.sort();
        if files.is_empty() {
            return Err(Error::InvalidInput("no checkpoints; run `train` first".into()));
        }
        let hash = self.schema.hash();
        let mut merged: BTreeMap<usize, TrainedModel> = BTreeMap::new();
        for f in files {
            let m = TrainedModel::load(&f, &hash)?;
            let g = super::group_by_name(&m.group)?;
            let key = crate::schema::Group::MODULES.iter().position(|&x| x == g).unwrap_or(usize::MAX);
            match merged.get_mut(&key) {
                Some(acc) => {
                    acc.models.extend(m.models);
                    acc.loss_traces.extend(m.loss_traces);
                }
                None => {
                    merged.insert(key, m);
                }
            }
        }
        let mut out: Vec<TrainedModel> = merged.into_values().collect();
        for m in &mut out {
            let mut pairs: Vec<_> = m.models.drain(..).zip(m.loss_traces.drain(..)).collect();
            pairs.sort_by_key(|(model, _)| model.visit);
            for (model, trace) in pairs {
                m.models.push(model);
                m.loss_traces.push(trace);
            }
        }
        Ok(out)
    }

    fn network(&self) -> Result<ConditionalGaussianBN> {
        let p = self.path(NETWORK_FILE);
        let text = fs::read_to_string(&p)
            .map_err(|_| Error::InvalidInput("no network; run `bn-learn` first".into()))?;
        ConditionalGaussianBN::from_json(&text, &self.schema.hash())
    }

    fn synthesizer(&self) -> Result<Synthesizer> {
        Synthesizer::new(self.schema.clone(), self.models()?, self.network()?)
    }

    fn synthetic_wide(&self) -> Result<(WideMatrix, bool)> {
        let post = self.path(POST_WIDE_FILE);
        if self.config.postprocess && post.exists() {
            return Ok((WideMatrix::load(&self.schema, &post)?, true));
        }
        let raw = self.path(RAW_WIDE_FILE);
        if !raw.exists() {
            return Err(Error::InvalidInput("no synthetic data; run `sample` first".into()));
        }
        Ok((WideMatrix::load(&self.schema, &raw)?, false))
    }

    // ---- stages ----

    pub fn simulate(&mut self) -> Result<()> {
        self.stage("simulate", |run| {
            let mut cfg = run.config.surrogate.clone();
            cfg.seed = crate::seed::derive(run.seed("simulate"), "surrogate", cfg.seed);
            let long = generate_cohort(&cfg, &run.schema, run.exec)?;
            run.write_long("cohort", COHORT_FILE, &long)?;
            let truth = ground_truth(&cfg).to_toml_string()?;
            run.write_bytes("ground_truth", GROUND_TRUTH_FILE, truth.as_bytes())
        })
    }

    pub fn prepare(&mut self) -> Result<Prepared> {
        self.stage("prepare", |run| {
            let real = run.real_long()?;
            let prep = Prepared::from_long(&real, &run.schema)?;
            for (var, n) in &prep.imputed {
                log::info!("imputed {n} cells of {var}");
            }
            run.write_wide("prepared", PREPARED_FILE, &prep.wide)?;
            Ok(prep)
        })
    }

    pub fn train(&mut self) -> Result<Vec<TrainedModel>> {
        self.stage("train", |run| {
            let prep = run.prepared()?;
            run.seed("train");
            let models = train_groups(&prep, &run.schema, &run.config, run.exec)?;
            for m in &models {
                for (model, trace) in m.models.iter().zip(&m.loss_traces) {
                    let name = match model.visit {
                        Some(t) => format!("{}_v{t:02}", m.group),
                        None => m.group.clone(),
                    };
                    let single = TrainedModel {
                        models: vec![model.clone()],
                        loss_traces: vec![trace.clone()],
                        ..m.clone()
                    };
                    let text = serde_json::to_string(&single)?;
                    run.write_bytes(&format!("model:{name}"), &format!("{MODELS_DIR}/{name}.json"), text.as_bytes())?;
                }
            }
            Ok(models)
        })
    }

    pub fn encode(&mut self) -> Result<Vec<Embeddings>> {
        self.stage("encode", |run| {
            let prep = run.prepared()?;
            let models = run.models()?;
            let emb = encode_groups(&models, &prep, &run.schema, run.exec)?;
            for (m, e) in models.iter().zip(&emb) {
                run.write_json(
                    &format!("embedding:{}", m.group),
                    &format!("{EMBEDDINGS_DIR}/{}.json", m.group),
                    e,
                )?;
            }
            Ok(emb)
        })
    }

    fn embeddings(&self, models: &[TrainedModel]) -> Result<Vec<Embeddings>> {
        models
            .iter()
            .map(|m| {
                let p = self.path(&format!("{EMBEDDINGS_DIR}/{}.json", m.group));
                let text = fs::read_to_string(&p)
                    .map_err(|_| Error::InvalidInput(format!("no embeddings for `{}`; run `encode` first", m.group)))?;
                Ok(serde_json::from_str(&text)?)
            })
            .collect()
    }

    pub fn bn_learn(&mut self) -> Result<ConditionalGaussianBN> {
        self.stage("bn-learn", |run| {
            let prep = run.prepared()?;
            let models = run.models()?;
            let emb = run.embeddings(&models)?;
            run.seed("bn-learn");
            let net = learn_network(&models, &emb, &prep, &run.schema, &run.config.bn_config(), run.exec)?;
            let text = net.to_json()?;
            run.write_bytes("network", NETWORK_FILE, text.as_bytes())?;
            Ok(net)
        })
    }

    fn reference(&mut self) -> Result<ReferenceCohort> {
        Ok(self.prepared()?.reference)
    }

    pub fn sample(&mut self) -> Result<LongTable> {
        self.stage("sample", |run| {
            let synth = run.synthesizer()?;
            let seed = run.seed("sample");
            let n = run.config.sample_size;
            let raw = if run.config.postprocess {
                let reference = run.reference()?;
                synth.sample(super::postprocess_pool_size(&reference, n), seed, run.exec)?
            } else {
                synth.sample(n, seed, run.exec)?
            };
            run.write_long("synthetic_raw", RAW_FILE, &raw)?;
            let wide = slots_to_wide(&raw, &run.schema)?;
            run.write_wide("synthetic_raw_wide", RAW_WIDE_FILE, &wide)?;
            if run.config.postprocess {
                run.postprocess_inner(&raw)?;
            }
            Ok(raw)
        })
    }

    fn postprocess_inner(&mut self, raw: &LongTable) -> Result<LongTable> {
        let reference = self.reference()?;
        let post_seed = crate::seed::derive(self.seed("postprocess"), "postprocess", 0);
        let post = crate::data::match_cohort(raw, &reference, post_seed)?;
        self.write_long("synthetic_post", POST_FILE, &post)?;
        let wide = slots_to_wide(&post, &self.schema)?;
        self.write_wide("synthetic_post_wide", POST_WIDE_FILE, &wide)?;
        Ok(post)
    }

    pub fn postprocess(&mut self) -> Result<LongTable> {
        self.stage("postprocess", |run| {
            let p = run.path(RAW_WIDE_FILE);
            if !p.exists() {
                return Err(Error::InvalidInput("no synthetic data; run `sample` first".into()));
            }
            let raw = wide_to_long(&WideMatrix::load(&run.schema, &p)?, &run.schema);
            run.postprocess_inner(&raw)
        })
    }

    pub fn evaluate(&mut self) -> Result<EvaluationReport> {
        self.stage("evaluate", |run| {
            let real = run.real_long()?;
            let real_wide = long_to_wide(&real, &run.schema, ConflictPolicy::KeepClosest)?.wide;
            let (synth, _) = run.synthetic_wide()?;
            let seed = run.seed("evaluate");
            let report = evaluate_pair(&real_wide, &synth, &run.schema, seed, run.exec)?;
            run.write_json("report", REPORT_FILE, &report)?;
            run.evaluation_figures(&real_wide, &synth, seed)?;
            Ok(report)
        })
    }

    fn evaluation_figures(&mut self, real: &WideMatrix, synth: &WideMatrix, seed: u64) -> Result<()> {
        let schema = self.schema.clone();
        let (var, visit) = DENSITY_VARIABLE;
        if let Some(j) = schema.long_index(var) {
            let r = observed_cells(real, &schema, visit, j);
            let s = observed_cells(synth, &schema, visit, j);
            if r.len() >= 2 && !s.is_empty() {
                let rule = bin_edges(&r, &s)?;
                let title = format!("{var}, visit {visit}");
                self.figure(&format!("density_{var}_v{visit}"), |p| plots::density_overlay(p, &title, &r, &s, &rule))?;
            }
        }
        let masked = masked_for_correlation(real, synth, &schema, seed);
        let nv = schema.n_longitudinal();
        let cr = pearson_matrix(real, &schema, self.exec).visit_block_mean(nv);
        let cs = pearson_matrix(&masked, &schema, self.exec).visit_block_mean(nv);
        self.figure("correlation_real", |p| plots::corr_heatmap(p, "real", &cr))?;
        self.figure("correlation_synthetic", |p| plots::corr_heatmap(p, "synthetic", &cs))?;
        let head = |w: &WideMatrix| rows_head(w, 200);
        let (rh, sh) = (head(real), head(synth));
        self.figure("m_schulab_real", |p| plots::trajectory_raster(p, "m_schulab, real", &rh, &schema, "m_schulab"))?;
        self.figure("m_schulab_synthetic", |p| {
            plots::trajectory_raster(p, "m_schulab, synthetic", &sh, &schema, "m_schulab")
        })?;
        let lock = lockstep_errors(synth, &schema)?;
        self.figure("lockstep_errors", |p| plots::error_histogram(p, "time step minus age step", &lock))?;
        let clo = closure_errors(synth, &schema)?;
        self.figure("closure_errors", |p| plots::error_histogram(p, "macronutrient sum minus 100", &clo))
    }

    /// Fits the age and time trends of real and synthetic data; with more
    /// than one resample also the synthetic envelope.
    pub fn trend(&mut self) -> Result<TrendReport> {
        self.stage("trend", |run| {
            let real = run.real_long()?;
            let (synth_wide, _) = run.synthetic_wide()?;
            let synth = wide_to_long(&synth_wide, &run.schema);
            let seed = run.seed("trend");
            let max_time = max_value(&real, &run.schema, "time")?;
            let k = run.config.resamples;
            let synthesizer = if k > 1 { Some(run.synthesizer()?) } else { None };
            let reference = if k > 1 && run.config.postprocess { Some(run.reference()?) } else { None };
            let mut rows = Vec::new();
            for predictor in ["age", "time"] {
                let grid = trend_grid(predictor, &run.schema, max_time);
                let real_fit = fit_lmm_cubic(&real, &run.schema, TREND_OUTCOME, predictor)?;
                let synth_fit = fit_lmm_cubic(&synth, &run.schema, TREND_OUTCOME, predictor).ok();
                let envelope = match &synthesizer {
                    Some(s) => Some(resample(
                        s,
                        &run.schema,
                        reference.as_ref(),
                        run.config.sample_size,
                        predictor,
                        &grid,
                        k,
                        max_time,
                        seed,
                        run.exec,
                    )?),
                    None => None,
                };
                rows.push(TrendRow {
                    setting: run.config.setting,
                    size: run.config.sample_size,
                    postprocessed: run.config.postprocess,
                    predictor: predictor.to_string(),
                    grid,
                    real: real_fit,
                    synthetic: synth_fit,
                    envelope,
                });
            }
            let report = TrendReport { rows };
            run.write_json("trend", TREND_FILE, &report)?;
            for row in &report.rows {
                run.trend_figure(row, "trend")?;
            }
            Ok(report)
        })
    }

    fn trend_figure(&mut self, row: &TrendRow, prefix: &str) -> Result<()> {
        let env = match &row.envelope {
            Some(e) => e.clone(),
            None => match &row.synthetic {
                Some(m) => single_envelope(m, &row.grid),
                None => return Ok(()),
            },
        };
        let real_curve = predict_trend(&row.real, &env.grid);
        let name = format!(
            "{prefix}_{}_setting_{}_n{}{}",
            row.predictor,
            row.setting.label(),
            row.size,
            if row.postprocessed { "_post" } else { "" }
        );
        let title = format!("{TREND_OUTCOME} by {}", row.predictor);
        self.figure(&name, |p| plots::trend_plot(p, &title, &real_curve, &env, None))
    }

    /// Runs the whole experimental grid: the three-method comparison at the
    /// real cohort size, then the trend analyses of the recurrent variant under
    /// each module setting at the real size (post-processed) and at
    /// [`LARGE_SAMPLE`] (raw).
    pub fn reproduce(&mut self) -> Result<Reproduction> {
        if !self.config.data_path().exists() {
            self.simulate()?;
        }
        let prep = self.prepare()?;
        self.stage("reproduce-paper", |run| {
            let real = run.real_long()?;
            let max_time = max_value(&real, &run.schema, "time")?;
            let eval_seed = run.seed("evaluate");
            let sample_seed = run.seed("sample");
            let trend_seed = run.seed("trend");
            let n_real = prep.reference.n();
            let mut comparison = Vec::new();
            let mut reports = BTreeMap::new();
            let mut recurrent_i = None;
            for method in Method::ALL {
                let mut cfg = run.config.clone();
                cfg.method = method;
                cfg.setting = ModuleSetting::I;
                let synth = Synthesizer::fit(&prep, &run.schema, &cfg, run.exec)
                    .map_err(|e| e.context(format!("method {}", method.label())))?;
                let sample = synth.sample(n_real, sample_seed, run.exec)?;
                let wide = slots_to_wide(&sample, &run.schema)?;
                let report = evaluate_pair(&prep.raw, &wide, &run.schema, eval_seed, run.exec)?;
                comparison.push(MethodComparison::from_report(method.label(), "i", &report));
                reports.insert(method.label().to_string(), report);
                if method == Method::Mt {
                    recurrent_i = Some(synth);
                }
            }
            let mut trends = Vec::new();
            for setting in [ModuleSetting::I, ModuleSetting::Ii, ModuleSetting::Iii] {
                let synth = match (setting, recurrent_i.take()) {
                    (ModuleSetting::I, Some(s)) => s,
                    _ => {
                        let mut cfg = run.config.clone();
                        cfg.method = Method::Mt;
                        cfg.setting = setting;
                        Synthesizer::fit(&prep, &run.schema, &cfg, run.exec)
                            .map_err(|e| e.context(format!("setting {}", setting.label())))?
                    }
                };
                for (size, post) in [(n_real, true), (LARGE_SAMPLE, false)] {
                    for predictor in ["age", "time"] {
                        let grid = trend_grid(predictor, &run.schema, max_time);
                        let reference = post.then_some(&prep.reference);
                        let envelope = resample(
                            &synth,
                            &run.schema,
                            reference,
                            size,
                            predictor,
                            &grid,
                            run.config.resamples,
                            max_time,
                            trend_seed,
                            run.exec,
                        )
                        .map_err(|e| e.context(format!("trend {predictor}, setting {}", setting.label())))?;
                        trends.push(TrendRow {
                            setting,
                            size,
                            postprocessed: post,
                            predictor: predictor.to_string(),
                            grid,
                            real: fit_lmm_cubic(&real, &run.schema, TREND_OUTCOME, predictor)?,
                            synthetic: None,
                            envelope: Some(envelope),
                        });
                    }
                }
            }
            let doc = Reproduction {
                comparison,
                reports,
                trends,
            };
            run.write_json("reproduction", REPRODUCTION_FILE, &doc)?;
            for row in &doc.trends {
                run.trend_figure(row, "reproduce")?;
            }
            Ok(doc)
        })
    }
}

/// Synthetic matrix with the real cohort's missingness, for correlations.
/// Complete synthetic cohorts get real attendance patterns; cohorts that
/// already have missed visits are used as they are.
pub fn masked_for_correlation(real: &WideMatrix, synth: &WideMatrix, schema: &CohortSchema, seed: u64) -> WideMatrix {
    let complete = (0..synth.n_rows).all(|i| (0..schema.n_visits).all(|t| synth.visit_attended(schema, i, t)));
    if complete {
        apply_patterns(synth, schema, &real.patterns(schema), seed)
    } else {
        synth.clone()
    }
}

/// Full evaluation of a synthetic cohort against a real one.
pub fn evaluate_pair(real: &WideMatrix, synth: &WideMatrix, schema: &CohortSchema, seed: u64, exec: Exec) -> Result<EvaluationReport> {
    let masked = masked_for_correlation(real, synth, schema, seed);
    evaluate(real, synth, &masked, schema, exec)
}

fn rows_head(w: &WideMatrix, n: usize) -> WideMatrix {
    let n = n.min(w.n_rows);
    WideMatrix {
        n_rows: n,
        n_cols: w.n_cols,
        values: w.values[..n * w.n_cols].to_vec(),
        mask: w.mask[..n * w.n_cols].to_vec(),
    }
}

pub fn max_value(long: &LongTable, schema: &CohortSchema, var: &str) -> Result<f64> {
    let j = schema
        .long_index(var)
        .ok_or_else(|| Error::Config(format!("schema lacks `{var}`")))?;
    long.records
        .iter()
        .filter_map(|r| r.values[j])
        .fold(None, |m: Option<f64>, v| Some(m.map_or(v, |m| m.max(v))))
        .ok_or_else(|| Error::Empty(format!("no observed `{var}` values")))
}

/// Evaluation grid of a trend predictor: ages over the visit range, times
/// from 0 to the real maximum, both in steps of 0.25 years.
pub fn trend_grid(predictor: &str, schema: &CohortSchema, max_time: f64) -> Vec<f64> {
    let (lo, hi) = match predictor {
        "age" => (schema.base_age, schema.base_age + (schema.n_visits - 1) as f64),
        _ => (0.0, max_time.max(1.0)),
    };
    let steps = ((hi - lo) / 0.25).round() as usize;
    (0..=steps).map(|k| lo + (hi - lo) * k as f64 / steps as f64).collect()
}

/// Repeated sampling of `size` participants, optionally matched to `reference`.
#[allow(clippy::too_many_arguments)]
pub fn resample(
    synth: &Synthesizer,
    schema: &CohortSchema,
    reference: Option<&ReferenceCohort>,
    size: usize,
    predictor: &str,
    grid: &[f64],
    k: usize,
    max_time: f64,
    seed: u64,
    exec: Exec,
) -> Result<TrendEnvelope> {
    // Datasets are drawn sequentially inside each sampler call; the
    // experiment parallelizes across datasets.
    let sampler = |s: u64| match reference {
        Some(r) => synth.sample_postprocessed(r, size, s, Exec::Sequential),
        None => synth.sample(size, s, Exec::Sequential),
    };
    let cfg = ExperimentConfig {
        k,
        outcome: TREND_OUTCOME.to_string(),
        predictor: predictor.to_string(),
        grid: grid.to_vec(),
        seed,
        max_time: (predictor == "time").then_some(max_time),
        alpha: 0.05,
    };
    repeated_sampling_experiment(&sampler, schema, &cfg, exec)
}

fn single_envelope(m: &TrendModel, grid: &[f64]) -> TrendEnvelope {
    let curve = predict_trend(m, grid);
    TrendEnvelope {
        grid: grid.to_vec(),
        mean: curve.clone(),
        lower: curve.clone(),
        upper: curve,
        significant_fraction: if m.all_terms_significant(0.05) { 1.0 } else { 0.0 },
        n_fitted: 1,
        failures: 0,
        coefficients: vec![m.coefficients],
    }
}

/// One trend analysis.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrendRow {
    pub setting: ModuleSetting,
    pub size: usize,
    pub postprocessed: bool,
    pub predictor: String,
    pub grid: Vec<f64>,
    pub real: TrendModel,
    pub synthetic: Option<TrendModel>,
    pub envelope: Option<TrendEnvelope>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrendReport {
    pub rows: Vec<TrendRow>,
}

/// Consolidated output of the full experimental grid.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Reproduction {
    pub comparison: Vec<MethodComparison>,
    pub reports: BTreeMap<String, EvaluationReport>,
    pub trends: Vec<TrendRow>,
}
