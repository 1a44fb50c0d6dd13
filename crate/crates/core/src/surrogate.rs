//! Surrogate cohort with planted, recoverable structure.
//!
//! The generator mimics the shape of a nutritional birth cohort: annual
//! visits from age 3 to 18 with staggered entry and dropout, 33 longitudinal
//! variables of mixed type, and a handful of exact relationships
//! (macronutrient closure, monotone maternal education, age/time lockstep).
//! Added sugar follows a cubic age trend plus a cubic calendar-time trend
//! plus a participant intercept, so trend analyses have a known answer.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Gamma, Normal, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::data::{LongRecord, LongTable};
use crate::error::{Error, Result};
use crate::par::Exec;
use crate::schema::CohortSchema;
use crate::seed;

/// Values are quantized to this grid so sums and differences are exact in
/// binary floating point.
const GRID: f64 = 128.0;

fn quantize(x: f64) -> f64 {
    (x * GRID).round() / GRID
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SurrogateConfig {
    pub n_participants: usize,
    pub seed: u64,
    /// Raw-age polynomial (intercept, linear, quadratic, cubic) of added sugar.
    pub age_trend: [f64; 4],
    /// Calendar-time polynomial of added sugar.
    pub time_trend: [f64; 4],
    pub random_intercept_sd: f64,
    pub residual_sd: f64,
    /// Probability of entering the study at each visit.
    pub entry_distribution: Vec<f64>,
    /// Probability of leaving the study just before each visit.
    pub dropout_hazard: Vec<f64>,
    /// Probability of skipping a visit while still enrolled.
    pub skip_probability: f64,
    /// Per-visit probability that maternal education changes from 0 to 1.
    pub schulab_upgrade_probability: f64,
    /// Fraction of participants with `sex = 1`.
    pub sex_fraction: f64,
    /// Entry offsets on the calendar-time axis are uniform on `[0, max]`.
    pub time_offset_max: f64,
    pub m_ovw_item_missing: f64,
    pub m_schulab_item_missing: f64,
}

impl Default for SurrogateConfig {
    fn default() -> Self {
        let mut entry = vec![0.0; 16];
        entry[0] = 0.46;
        for (v, w) in entry.iter_mut().enumerate().skip(1) {
            *w = 0.09 * 0.8f64.powi(v as i32 - 1);
        }
        let total: f64 = entry.iter().sum();
        entry.iter_mut().for_each(|w| *w /= total);
        Self {
            n_participants: 1312,
            seed: 20230,
            age_trend: [8.0, 1.2, -0.08, 0.001],
            time_trend: [0.0, -0.12, 0.004, -0.0001],
            random_intercept_sd: 3.0,
            residual_sd: 3.0,
            entry_distribution: entry,
            dropout_hazard: vec![0.05; 16],
            skip_probability: 0.1,
            schulab_upgrade_probability: 0.02,
            sex_fraction: 0.5,
            time_offset_max: 16.0,
            m_ovw_item_missing: 0.0125,
            m_schulab_item_missing: 0.0017,
        }
    }
}

impl SurrogateConfig {
    /// Same cohort shape with no calendar-time effect on added sugar.
    pub fn null_time_trend(mut self) -> Self {
        self.time_trend = [0.0; 4];
        self
    }

    /// No effect of either calendar time or age beyond the intercept. Time and
    /// age move together, so an unadjusted time trend is only null when the
    /// age curve is flat as well.
    pub fn null_trends(mut self) -> Self {
        self.time_trend = [0.0; 4];
        self.age_trend = [self.age_trend[0], 0.0, 0.0, 0.0];
        self
    }

    pub fn validate(&self, schema: &CohortSchema) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(m.to_string()));
        if self.n_participants == 0 {
            return bad("n_participants must be positive");
        }
        if !(self.random_intercept_sd > 0.0 && self.residual_sd > 0.0) {
            return bad("standard deviations must be positive");
        }
        let nv = schema.n_visits;
        if self.entry_distribution.len() != nv || self.dropout_hazard.len() != nv {
            return bad("entry distribution and dropout hazard need one entry per visit");
        }
        let probs = self
            .entry_distribution
            .iter()
            .chain(&self.dropout_hazard)
            .chain([
                &self.skip_probability,
                &self.schulab_upgrade_probability,
                &self.sex_fraction,
                &self.m_ovw_item_missing,
                &self.m_schulab_item_missing,
            ]);
        for p in probs {
            if !(0.0..=1.0).contains(p) {
                return bad("probabilities must lie in [0, 1]");
            }
        }
        if (self.entry_distribution.iter().sum::<f64>() - 1.0).abs() > 1e-9 {
            return bad("entry distribution must sum to 1");
        }
        if !(self.time_offset_max >= 0.0) {
            return bad("time_offset_max must be non-negative");
        }
        Ok(())
    }

    /// Probability that a participant attends each visit under the configured
    /// entry and dropout law.
    pub fn attendance_probabilities(&self) -> Vec<f64> {
        let nv = self.entry_distribution.len();
        (0..nv)
            .map(|v| {
                (0..=v)
                    .map(|e| {
                        if e == v {
                            self.entry_distribution[e]
                        } else {
                            let stay: f64 = (e + 1..=v).map(|w| 1.0 - self.dropout_hazard[w]).product();
                            self.entry_distribution[e] * stay * (1.0 - self.skip_probability)
                        }
                    })
                    .sum()
            })
            .collect()
    }
}

/// Oracle of the planted structure.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroundTruth {
    pub outcome: String,
    pub age_trend: [f64; 4],
    pub time_trend: [f64; 4],
    pub random_intercept_sd: f64,
    pub residual_sd: f64,
    pub base_age: f64,
    pub time_offset_max: f64,
    pub macronutrient_closure: bool,
    pub schulab_monotone: bool,
    pub age_time_lockstep: bool,
}

pub fn ground_truth(config: &SurrogateConfig) -> GroundTruth {
    GroundTruth {
        outcome: "ZUZU_p".into(),
        age_trend: config.age_trend,
        time_trend: config.time_trend,
        random_intercept_sd: config.random_intercept_sd,
        residual_sd: config.residual_sd,
        base_age: 3.0,
        time_offset_max: config.time_offset_max,
        macronutrient_closure: true,
        schulab_monotone: true,
        age_time_lockstep: true,
    }
}

pub(crate) fn poly(c: &[f64; 4], x: f64) -> f64 {
    c[0] + x * (c[1] + x * (c[2] + x * c[3]))
}

impl GroundTruth {
    /// Planted conditional mean of the outcome at a given age and time.
    pub fn mean(&self, age: f64, time: f64) -> f64 {
        poly(&self.age_trend, age) + poly(&self.time_trend, time)
    }

    /// Population age curve of an unadjusted model: the planted age cubic plus
    /// the time cubic averaged over the uniform entry offset. Returned as raw
    /// polynomial coefficients in age.
    pub fn marginal_age_coefficients(&self) -> [f64; 4] {
        // time = age + k, k = offset - base_age, offset ~ U[0, max].
        let m = self.time_offset_max;
        let lo = -self.base_age;
        let moment = |p: i32| -> f64 {
            if m == 0.0 {
                lo.powi(p)
            } else {
                ((lo + m).powi(p + 1) - lo.powi(p + 1)) / ((p + 1) as f64 * m)
            }
        };
        let (k1, k2, k3) = (moment(1), moment(2), moment(3));
        let t = &self.time_trend;
        // Expand t0 + t1 (a+k) + t2 (a+k)^2 + t3 (a+k)^3 and take expectations in k.
        let c0 = t[0] + t[1] * k1 + t[2] * k2 + t[3] * k3;
        let c1 = t[1] + 2.0 * t[2] * k1 + 3.0 * t[3] * k2;
        let c2 = t[2] + 3.0 * t[3] * k1;
        let c3 = t[3];
        let a = &self.age_trend;
        [a[0] + c0, a[1] + c1, a[2] + c2, a[3] + c3]
    }

    pub fn marginal_age_curve(&self, age: f64) -> f64 {
        poly(&self.marginal_age_coefficients(), age)
    }

    pub fn to_toml_string(&self) -> Result<String> {
        Ok(toml::to_string_pretty(self)?)
    }

    pub fn from_toml_str(s: &str) -> Result<Self> {
        Ok(toml::from_str(s)?)
    }
}

fn normal(rng: &mut ChaCha8Rng) -> f64 {
    StandardNormal.sample(rng)
}

fn bernoulli(rng: &mut ChaCha8Rng, p: f64) -> bool {
    rng.gen::<f64>() < p
}

fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

fn sample_index(rng: &mut ChaCha8Rng, weights: &[f64]) -> usize {
    let u: f64 = rng.gen();
    let mut acc = 0.0;
    for (i, w) in weights.iter().enumerate() {
        acc += w;
        if u < acc {
            return i;
        }
    }
    weights.len() - 1
}

struct Participant {
    pers_id: u64,
    fam_id: u64,
    sex: u8,
}

/// Generates the surrogate cohort in long format, sorted by participant and visit.
pub fn generate_cohort(config: &SurrogateConfig, schema: &CohortSchema, exec: Exec) -> Result<LongTable> {
    config.validate(schema)?;
    schema.validate()?;
    let mut fam_rng = ChaCha8Rng::seed_from_u64(seed::derive(config.seed, "family", 0));
    let mut participants = Vec::with_capacity(config.n_participants);
    let mut fam = 0u64;
    for i in 0..config.n_participants {
        if i == 0 || !bernoulli(&mut fam_rng, 0.25) {
            fam += 1;
        }
        let sex = bernoulli(&mut fam_rng, config.sex_fraction) as u8;
        participants.push(Participant {
            pers_id: i as u64 + 1,
            fam_id: fam,
            sex,
        });
    }
    let base = seed::derive(config.seed, "participant", 0);
    let rows = exec.map_slice(&participants, |p| {
        let mut rng = ChaCha8Rng::seed_from_u64(seed::mix(base, p.pers_id));
        participant_records(config, schema, p, &mut rng)
    });
    Ok(LongTable::new(rows.into_iter().flatten().collect()))
}

fn participant_records(
    cfg: &SurrogateConfig,
    schema: &CohortSchema,
    p: &Participant,
    rng: &mut ChaCha8Rng,
) -> Vec<LongRecord> {
    let nv = schema.n_visits;
    let idx = |name: &str| schema.long_index(name).expect("default schema variable");

    // Attendance.
    let entry = sample_index(rng, &cfg.entry_distribution);
    let mut attended = vec![false; nv];
    attended[entry] = true;
    let mut enrolled = true;
    for (w, slot) in attended.iter_mut().enumerate().skip(entry + 1) {
        if enrolled && bernoulli(rng, cfg.dropout_hazard[w]) {
            enrolled = false;
        }
        let skip = bernoulli(rng, cfg.skip_probability);
        *slot = enrolled && !skip;
    }

    // Persistent traits.
    let su = cfg.random_intercept_sd;
    let u = su * normal(rng);
    let carb = 0.5 * u / su + 0.75f64.sqrt() * normal(rng);
    let energy = normal(rng);
    let body = 0.4 * energy + 0.84f64.sqrt() * normal(rng);
    let juice = normal(rng);
    let offset = quantize(rng.gen::<f64>() * cfg.time_offset_max);
    let m_bmi_log = 24.5f64.ln() + 0.15 * normal(rng);
    let male = (p.sex == 0) as u8 as f64;
    let mut schulab = bernoulli(rng, 0.35);
    let mut employ = bernoulli(rng, 0.6);

    let gamma = |rng: &mut ChaCha8Rng, shape: f64| Gamma::new(shape, 1.0).expect("shape > 0").sample(rng);
    let lognormal = |rng: &mut ChaCha8Rng, sd: f64| (sd * normal(rng)).exp();
    let noise = Normal::new(0.0, cfg.residual_sd).expect("sd > 0");

    let d = schema.n_longitudinal();
    let mut out = Vec::new();
    for visit in 0..nv {
        // Latent state evolves on every scheduled visit, attended or not.
        if visit > 0 {
            if !schulab && bernoulli(rng, cfg.schulab_upgrade_probability) {
                schulab = true;
            }
            if bernoulli(rng, 0.1) {
                employ = !employ;
            }
        }
        let jitter = quantize(rng.gen_range(-0.3..0.3));
        let age = schema.base_age + visit as f64 + jitter;
        let time = age - schema.base_age + offset;

        let zuzu = poly(&cfg.age_trend, age) + poly(&cfg.time_trend, time) + u + noise.sample(rng);
        let zuzu_pos = zuzu.max(0.5);
        let zuck = zuzu + 14.0 + 1.2 * carb - 0.1 * (age - 3.0) + 1.5 * normal(rng);
        let zuck_pos = zuck.max(1.0);

        let fs_saft = 1.5 * (0.3 * u / su + 0.5 * juice).exp() * lognormal(rng, 0.3);
        let free_s = zuzu + fs_saft;
        let fs_sp = 0.35 * zuzu_pos * lognormal(rng, 0.25);
        let fs_bc = 0.2 * zuzu_pos * lognormal(rng, 0.3);
        let fs_oth = 0.1 * zuzu_pos * lognormal(rng, 0.4);
        let fs_dai = 0.15 * zuzu_pos * lognormal(rng, 0.3);
        let fs_ssb = 0.2 * zuzu_pos * (0.06 * (age - 10.0)).exp() * lognormal(rng, 0.5);
        let fs_obge = 0.3 * lognormal(rng, 0.5);

        let sacch = 0.5 * zuck_pos * lognormal(rng, 0.15);
        let gluc = 0.12 * zuck_pos * lognormal(rng, 0.2);
        let fruc = 0.14 * zuck_pos * lognormal(rng, 0.2);
        let galac = 0.01 * zuck_pos * lognormal(rng, 0.4);
        let malt = 0.02 * zuck_pos * lognormal(rng, 0.3);
        let lact = 0.15 * zuck_pos * (-0.05 * (age - 3.0)).exp() * lognormal(rng, 0.3);

        // Macronutrient shares: gamma draws normalized to 100 %E.
        let kappa = 300.0;
        let shift = 0.08 * carb + 0.01 * (zuck - 27.0);
        let shares = [0.13, 0.34 * (-shift).exp(), 0.53 * shift.exp()];
        let total_share: f64 = shares.iter().sum();
        let g: Vec<f64> = shares.iter().map(|s| gamma(rng, kappa * s / total_share)).collect();
        let gsum: f64 = g.iter().sum();
        let ew = quantize(100.0 * g[0] / gsum);
        let fett = quantize(100.0 * g[1] / gsum);
        let kh = 100.0 - ew - fett;

        let e_cal = (1000.0 + 90.0 * (age - 3.0) + 120.0 * male) * (0.12 * energy).exp() * lognormal(rng, 0.12);
        let wo_tage = sample_index(rng, &[0.05, 0.15, 0.35, 0.45]) as f64;
        let bmr = 800.0 + 55.0 * (age - 3.0) + 60.0 * male + 40.0 * body + 25.0 * normal(rng);
        let bmi_ref = 15.5 + 0.25 * (age - 6.0).max(0.0);
        let bmi_dev = 0.08 * body + 0.03 * normal(rng);
        let bmi = bmi_ref * bmi_dev.exp();
        let ovw_score = bmi_dev / 0.08 + 0.3 * normal(rng);
        let ovw = if ovw_score < 1.0 {
            0.0
        } else if ovw_score < 2.0 {
            1.0
        } else {
            2.0
        };
        let underrep = bernoulli(rng, sigmoid(-8.0 * (e_cal / bmr - 1.3))) as u8 as f64;
        let m_bmi = (m_bmi_log + 0.01 * (age - 3.0) + 0.02 * normal(rng)).exp();
        let m_ovw = (m_bmi > 25.0) as u8 as f64;
        let m_ovw_missing = bernoulli(rng, cfg.m_ovw_item_missing);
        let m_schulab_missing = bernoulli(rng, cfg.m_schulab_item_missing);

        if !attended[visit] {
            continue;
        }
        let mut values = vec![None; d];
        let mut put = |name: &str, v: f64| values[idx(name)] = Some(v);
        put("age", age);
        put("time", time);
        put("e_cal", e_cal);
        put("EW_p", ew);
        put("Fett_p", fett);
        put("KH_p", kh);
        put("Gluc_p", gluc);
        put("Fruc_p", fruc);
        put("Galac_p", galac);
        put("MSacch_p", gluc + fruc + galac);
        put("Sacch_p", sacch);
        put("MALT_p", malt);
        put("LACT_p", lact);
        put("DISACCH_p", sacch + malt + lact);
        put("ZUCK_p", zuck);
        put("ZUZU_p", zuzu);
        put("free_s_p", free_s);
        put("fs_saft_p", fs_saft);
        put("fs_obge_p", fs_obge);
        put("fs_sp_p", fs_sp);
        put("fs_bc_p", fs_bc);
        put("fs_oth_p", fs_oth);
        put("fs_dai_p", fs_dai);
        put("fs_ssb_p", fs_ssb);
        put("wo_tage", wo_tage);
        put("bmr", bmr);
        put("underrep", underrep);
        put("ovw", ovw);
        put("bmi", bmi);
        put("m_bmi", m_bmi);
        put("m_employ", employ as u8 as f64);
        if !m_ovw_missing {
            put("m_ovw", m_ovw);
        }
        if !m_schulab_missing {
            put("m_schulab", schulab as u8 as f64);
        }
        out.push(LongRecord {
            pers_id: p.pers_id,
            fam_id: p.fam_id,
            sex: p.sex,
            visit,
            values,
        });
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::schema::Likelihood;

    fn small(n: usize) -> (SurrogateConfig, CohortSchema, LongTable) {
        let cfg = SurrogateConfig {
            n_participants: n,
            ..Default::default()
        };
        let schema = CohortSchema::default();
        let long = generate_cohort(&cfg, &schema, Exec::Sequential).unwrap();
        (cfg, schema, long)
    }

    #[test]
    fn planted_identities_hold_exactly() {
        let (_, s, long) = small(300);
        let ix = |n: &str| s.long_index(n).unwrap();
        for r in &long.records {
            let v = |n: &str| r.values[ix(n)].unwrap();
            assert_eq!(v("EW_p") + v("Fett_p") + v("KH_p") - 100.0, 0.0);
        }
        for rows in long.by_participant().values() {
            for w in rows.windows(2) {
                let (a, b) = (w[0], w[1]);
                let da = b.values[ix("age")].unwrap() - a.values[ix("age")].unwrap();
                let dt = b.values[ix("time")].unwrap() - a.values[ix("time")].unwrap();
                assert_eq!(dt - da, 0.0);
                if let (Some(x), Some(y)) = (a.values[ix("m_schulab")], b.values[ix("m_schulab")]) {
                    assert!(!(x == 1.0 && y == 0.0));
                }
            }
        }
    }

    #[test]
    fn ids_types_and_ranges() {
        let (_, s, long) = small(1312);
        assert_eq!(long.participants().len(), 1312);
        for r in &long.records {
            for (j, v) in r.values.iter().enumerate() {
                let Some(x) = v else { continue };
                assert!(x.is_finite());
                match s.long_var(j).likelihood {
                    Likelihood::Positive => assert!(*x > 0.0, "{}", s.long_var(j).name),
                    Likelihood::Categorical { levels } | Likelihood::Ordinal { levels } => {
                        assert!(x.fract() == 0.0 && *x >= 0.0 && (*x as usize) < levels)
                    }
                    _ => {}
                }
            }
            let age = r.values[s.long_index("age").unwrap()].unwrap();
            assert!(age >= 2.5 && age < 18.5);
            assert_eq!(crate::data::infer_visit_index(age, &s).unwrap(), r.visit);
        }
    }

    #[test]
    fn same_seed_same_cohort() {
        let (cfg, s, a) = small(50);
        let b = generate_cohort(&cfg, &s, Exec::Parallel).unwrap();
        let mut x = Vec::new();
        let mut y = Vec::new();
        a.write_csv(&s, &mut x).unwrap();
        b.write_csv(&s, &mut y).unwrap();
        assert_eq!(x, y);
    }

    #[test]
    fn rejects_empty_cohort() {
        let cfg = SurrogateConfig {
            n_participants: 0,
            ..Default::default()
        };
        assert!(matches!(
            generate_cohort(&cfg, &CohortSchema::default(), Exec::Sequential),
            Err(Error::Config(_))
        ));
    }

    #[test]
    fn ground_truth_echoes_config() {
        let cfg = SurrogateConfig {
            age_trend: [15.0, 1.2, -0.08, 0.001],
            ..Default::default()
        };
        let gt = ground_truth(&cfg);
        assert_eq!(gt.age_trend, [15.0, 1.2, -0.08, 0.001]);
        let null = ground_truth(&cfg.clone().null_time_trend());
        assert_eq!(&null.time_trend[1..], &[0.0, 0.0, 0.0]);
        let flat = ground_truth(&cfg.null_trends());
        assert_eq!(&flat.marginal_age_coefficients()[1..], &[0.0, 0.0, 0.0]);
        let back = GroundTruth::from_toml_str(&gt.to_toml_string().unwrap()).unwrap();
        assert_eq!(back, gt);
    }

    #[test]
    fn marginal_age_curve_matches_numeric_average() {
        let gt = ground_truth(&SurrogateConfig::default());
        for age in [3.0, 7.5, 12.0, 18.0] {
            // Midpoint-rule average over the offset.
            let n = 20_000;
            let avg: f64 = (0..n)
                .map(|i| {
                    let c = (i as f64 + 0.5) / n as f64 * gt.time_offset_max;
                    gt.mean(age, age - gt.base_age + c)
                })
                .sum::<f64>()
                / n as f64;
            assert!((avg - gt.marginal_age_curve(age)).abs() < 1e-6);
        }
    }
}
