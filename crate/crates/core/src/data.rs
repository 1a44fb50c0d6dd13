//! Long and wide cohort representations and the transforms between them.
//!
//! The long table holds one record per participant and visit. The wide
//! matrix holds one row per participant: the three static cells followed by
//! one block of longitudinal cells per visit, with an observedness mask.

use std::collections::BTreeMap;
use std::io::{Read, Write};
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::schema::{CohortSchema, FAM_ID, PERS_ID, SEX};

/// Maps an age onto its visit slot: `round_half_up(age) - base_age`, clamped
/// to the schema's visit range.
pub fn infer_visit_index(age: f64, schema: &CohortSchema) -> Result<usize> {
    if !age.is_finite() || age < 0.0 {
        return Err(Error::InvalidInput(format!("age {age} is not a valid age")));
    }
    let rounded = (age + 0.5).floor() - schema.base_age.round();
    let max = (schema.n_visits - 1) as f64;
    Ok(rounded.clamp(0.0, max) as usize)
}

/// One participant-visit record.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LongRecord {
    pub pers_id: u64,
    pub fam_id: u64,
    pub sex: u8,
    pub visit: usize,
    /// Longitudinal cells in schema order; `None` marks an item-level gap.
    pub values: Vec<Option<f64>>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct LongTable {
    pub records: Vec<LongRecord>,
}

impl LongTable {
    pub fn new(records: Vec<LongRecord>) -> Self {
        Self { records }
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    /// Distinct participants, sorted by identifier.
    pub fn participants(&self) -> Vec<u64> {
        let mut ids: Vec<u64> = self.records.iter().map(|r| r.pers_id).collect();
        ids.sort_unstable();
        ids.dedup();
        ids
    }

    /// Records grouped per participant (sorted by id, then visit).
    pub fn by_participant(&self) -> BTreeMap<u64, Vec<&LongRecord>> {
        let mut map: BTreeMap<u64, Vec<&LongRecord>> = BTreeMap::new();
        for r in &self.records {
            map.entry(r.pers_id).or_default().push(r);
        }
        for rows in map.values_mut() {
            rows.sort_by_key(|r| r.visit);
        }
        map
    }

    /// All observed values of one longitudinal variable.
    pub fn column(&self, var: usize) -> Vec<f64> {
        self.records.iter().filter_map(|r| r.values[var]).collect()
    }

    /// Sorted canonical form: records ordered by participant and visit.
    pub fn canonical(mut self) -> Self {
        self.records.sort_by_key(|r| (r.pers_id, r.visit));
        self
    }

    /// Recomputes every record's visit slot from its age.
    pub fn assign_visits(&mut self, schema: &CohortSchema) -> Result<()> {
        let age = schema
            .long_index("age")
            .ok_or_else(|| Error::Config("schema lacks `age`".into()))?;
        for r in &mut self.records {
            let a = r.values[age].ok_or_else(|| {
                Error::InvalidInput(format!("participant {} has a record without age", r.pers_id))
            })?;
            r.visit = infer_visit_index(a, schema)?;
        }
        Ok(())
    }

    pub fn write_csv<W: Write>(&self, schema: &CohortSchema, writer: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(writer);
        let mut header = vec![PERS_ID.to_string(), FAM_ID.to_string(), SEX.to_string()];
        header.extend(schema.long_names());
        w.write_record(&header)?;
        let mut row: Vec<String> = Vec::with_capacity(header.len());
        for r in &self.records {
            row.clear();
            row.push(r.pers_id.to_string());
            row.push(r.fam_id.to_string());
            row.push(r.sex.to_string());
            for v in &r.values {
                row.push(v.map(format_cell).unwrap_or_default());
            }
            w.write_record(&row)?;
        }
        w.flush()?;
        Ok(())
    }

    /// Reads the delimited long format. Visit slots are inferred from age.
    pub fn read_csv<R: Read>(schema: &CohortSchema, reader: R) -> Result<Self> {
        let mut rdr = csv::Reader::from_reader(reader);
        let header: Vec<String> = rdr.headers()?.iter().map(str::to_string).collect();
        let col = |name: &str| -> Result<usize> {
            header
                .iter()
                .position(|h| h == name)
                .ok_or_else(|| Error::InvalidInput(format!("missing column `{name}`")))
        };
        let pid = col(PERS_ID)?;
        let fid = col(FAM_ID)?;
        let sex = col(SEX)?;
        let long_cols: Vec<usize> = schema
            .long_names()
            .iter()
            .map(|n| col(n))
            .collect::<Result<_>>()?;
        let mut records = Vec::new();
        for (line, rec) in rdr.records().enumerate() {
            let rec = rec?;
            let parse_id = |i: usize| -> Result<u64> {
                rec[i].trim().parse::<f64>().map(|x| x as u64).map_err(|_| {
                    Error::InvalidInput(format!("row {}: bad identifier `{}`", line + 2, &rec[i]))
                })
            };
            let values = long_cols
                .iter()
                .map(|&i| parse_cell(&rec[i], line + 2))
                .collect::<Result<Vec<_>>>()?;
            records.push(LongRecord {
                pers_id: parse_id(pid)?,
                fam_id: parse_id(fid)?,
                sex: parse_id(sex)? as u8,
                visit: 0,
                values,
            });
        }
        let mut table = LongTable { records };
        table.assign_visits(schema)?;
        Ok(table)
    }

    pub fn save(&self, schema: &CohortSchema, path: &Path) -> Result<()> {
        let f = std::fs::File::create(path)?;
        self.write_csv(schema, std::io::BufWriter::new(f))
    }

    pub fn load(schema: &CohortSchema, path: &Path) -> Result<Self> {
        let f = std::fs::File::open(path)?;
        Self::read_csv(schema, std::io::BufReader::new(f))
    }
}

fn format_cell(v: f64) -> String {
    // Shortest representation that round-trips exactly.
    format!("{v}")
}

fn parse_cell(s: &str, line: usize) -> Result<Option<f64>> {
    let s = s.trim();
    if s.is_empty() || s.eq_ignore_ascii_case("na") {
        return Ok(None);
    }
    s.parse::<f64>()
        .map(Some)
        .map_err(|_| Error::InvalidInput(format!("row {line}: bad number `{s}`")))
}

/// Visit attendance of one participant.
#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct MissingnessPattern {
    pub entry_visit: usize,
    /// Attended visit indices, ascending.
    pub attended: Vec<usize>,
}

impl MissingnessPattern {
    pub fn new(mut attended: Vec<usize>) -> Result<Self> {
        attended.sort_unstable();
        attended.dedup();
        let entry_visit = *attended
            .first()
            .ok_or_else(|| Error::InvalidInput("pattern must contain a visit".into()))?;
        Ok(Self {
            entry_visit,
            attended,
        })
    }

    pub fn complete(n_visits: usize) -> Self {
        Self {
            entry_visit: 0,
            attended: (0..n_visits).collect(),
        }
    }

    pub fn attends(&self, visit: usize) -> bool {
        self.attended.binary_search(&visit).is_ok()
    }
}

/// One row per participant: static cells then per-visit longitudinal blocks.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct WideMatrix {
    pub n_rows: usize,
    pub n_cols: usize,
    /// Row-major cell values; masked cells hold `NaN`.
    pub values: Vec<f64>,
    pub mask: Vec<bool>,
}

/// Equality over shape, mask and observed values; masked cells are ignored.
impl PartialEq for WideMatrix {
    fn eq(&self, other: &Self) -> bool {
        self.n_rows == other.n_rows
            && self.n_cols == other.n_cols
            && self.mask == other.mask
            && self
                .values
                .iter()
                .zip(&other.values)
                .zip(&self.mask)
                .all(|((a, b), &m)| !m || a == b)
    }
}

impl WideMatrix {
    pub fn empty(n_rows: usize, schema: &CohortSchema) -> Self {
        let n_cols = schema.wide_width();
        Self {
            n_rows,
            n_cols,
            values: vec![f64::NAN; n_rows * n_cols],
            mask: vec![false; n_rows * n_cols],
        }
    }

    #[inline]
    pub fn get(&self, row: usize, col: usize) -> Option<f64> {
        let i = row * self.n_cols + col;
        self.mask[i].then(|| self.values[i])
    }

    #[inline]
    pub fn set(&mut self, row: usize, col: usize, value: Option<f64>) {
        let i = row * self.n_cols + col;
        match value {
            Some(v) => {
                self.values[i] = v;
                self.mask[i] = true;
            }
            None => {
                self.values[i] = f64::NAN;
                self.mask[i] = false;
            }
        }
    }

    pub fn pers_id(&self, row: usize) -> u64 {
        self.values[row * self.n_cols] as u64
    }

    pub fn fam_id(&self, row: usize) -> u64 {
        self.values[row * self.n_cols + 1] as u64
    }

    pub fn sex(&self, row: usize) -> u8 {
        self.values[row * self.n_cols + 2] as u8
    }

    /// A visit counts as attended when any of its cells is observed.
    pub fn visit_attended(&self, schema: &CohortSchema, row: usize, visit: usize) -> bool {
        let d = schema.n_longitudinal();
        (0..d).any(|j| self.mask[row * self.n_cols + schema.wide_col(visit, j)])
    }

    pub fn pattern(&self, schema: &CohortSchema, row: usize) -> Option<MissingnessPattern> {
        let attended: Vec<usize> = (0..schema.n_visits)
            .filter(|&v| self.visit_attended(schema, row, v))
            .collect();
        MissingnessPattern::new(attended).ok()
    }

    pub fn patterns(&self, schema: &CohortSchema) -> Vec<MissingnessPattern> {
        (0..self.n_rows)
            .map(|r| {
                self.pattern(schema, r).unwrap_or(MissingnessPattern {
                    entry_visit: 0,
                    attended: Vec::new(),
                })
            })
            .collect()
    }

    /// Observed values of one wide column.
    pub fn column(&self, col: usize) -> Vec<f64> {
        (0..self.n_rows).filter_map(|r| self.get(r, col)).collect()
    }

    pub fn write_csv<W: Write>(&self, schema: &CohortSchema, writer: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(writer);
        w.write_record(schema.wide_column_names())?;
        let mut row = Vec::with_capacity(self.n_cols);
        for r in 0..self.n_rows {
            row.clear();
            for c in 0..self.n_cols {
                row.push(self.get(r, c).map(format_cell).unwrap_or_default());
            }
            w.write_record(&row)?;
        }
        w.flush()?;
        Ok(())
    }

    pub fn read_csv<R: Read>(schema: &CohortSchema, reader: R) -> Result<Self> {
        let mut rdr = csv::Reader::from_reader(reader);
        let header: Vec<String> = rdr.headers()?.iter().map(str::to_string).collect();
        let expected = schema.wide_column_names();
        if header != expected {
            return Err(Error::Shape(format!(
                "wide header has {} columns, schema expects {}",
                header.len(),
                expected.len()
            )));
        }
        let mut rows = Vec::new();
        for (line, rec) in rdr.records().enumerate() {
            let rec = rec?;
            let cells = rec
                .iter()
                .map(|s| parse_cell(s, line + 2))
                .collect::<Result<Vec<_>>>()?;
            rows.push(cells);
        }
        let mut wide = WideMatrix::empty(rows.len(), schema);
        for (r, cells) in rows.into_iter().enumerate() {
            for (c, v) in cells.into_iter().enumerate() {
                wide.set(r, c, v);
            }
        }
        Ok(wide)
    }

    pub fn save(&self, schema: &CohortSchema, path: &Path) -> Result<()> {
        let f = std::fs::File::create(path)?;
        self.write_csv(schema, std::io::BufWriter::new(f))
    }

    pub fn load(schema: &CohortSchema, path: &Path) -> Result<Self> {
        let f = std::fs::File::open(path)?;
        Self::read_csv(schema, std::io::BufReader::new(f))
    }
}

/// How to resolve two records of one participant that map to the same visit.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum ConflictPolicy {
    /// Keep the record whose age is closest to `base_age + visit`.
    #[default]
    KeepClosest,
    Error,
}

/// A record dropped while resolving a visit conflict.
#[derive(Debug, Clone, PartialEq)]
pub struct DiscardedRecord {
    pub pers_id: u64,
    pub visit: usize,
    pub age: f64,
}

#[derive(Debug, Clone)]
pub struct WideConversion {
    pub wide: WideMatrix,
    pub patterns: Vec<MissingnessPattern>,
    pub discarded: Vec<DiscardedRecord>,
}

/// Pivots the long table to one row per participant (sorted by `pers_ID`).
pub fn long_to_wide(
    long: &LongTable,
    schema: &CohortSchema,
    policy: ConflictPolicy,
) -> Result<WideConversion> {
    let age_idx = schema
        .long_index("age")
        .ok_or_else(|| Error::Config("schema lacks `age`".into()))?;
    let d = schema.n_longitudinal();
    let groups = long.by_participant();
    let mut wide = WideMatrix::empty(groups.len(), schema);
    let mut patterns = Vec::with_capacity(groups.len());
    let mut discarded = Vec::new();

    for (row, (pid, records)) in groups.iter().enumerate() {
        let mut slots: BTreeMap<usize, &LongRecord> = BTreeMap::new();
        for rec in records {
            if rec.values.len() != d {
                return Err(Error::Shape(format!(
                    "participant {pid}: record has {} values, schema has {d}",
                    rec.values.len()
                )));
            }
            let age = rec.values[age_idx].ok_or_else(|| {
                Error::InvalidInput(format!("participant {pid} has a record without age"))
            })?;
            let visit = infer_visit_index(age, schema)?;
            match slots.get(&visit) {
                None => {
                    slots.insert(visit, rec);
                }
                Some(existing) => {
                    if policy == ConflictPolicy::Error {
                        return Err(Error::VisitConflict {
                            pers_id: *pid,
                            visit,
                        });
                    }
                    let target = schema.base_age + visit as f64;
                    let old_age = existing.values[age_idx].unwrap_or(f64::NAN);
                    // Ties go to the smaller age so the result is order independent.
                    let keep_new = (age - target).abs() < (old_age - target).abs()
                        || ((age - target).abs() == (old_age - target).abs() && age < old_age);
                    let (kept, dropped) = if keep_new { (*rec, *existing) } else { (*existing, *rec) };
                    log::warn!(
                        "participant {pid}: two records map to visit {visit}; discarding age {}",
                        dropped.values[age_idx].unwrap_or(f64::NAN)
                    );
                    discarded.push(DiscardedRecord {
                        pers_id: *pid,
                        visit,
                        age: dropped.values[age_idx].unwrap_or(f64::NAN),
                    });
                    slots.insert(visit, kept);
                }
            }
        }
        let first = records[0];
        wide.set(row, 0, Some(*pid as f64));
        wide.set(row, 1, Some(first.fam_id as f64));
        wide.set(row, 2, Some(first.sex as f64));
        for (&visit, rec) in &slots {
            for (j, v) in rec.values.iter().enumerate() {
                wide.set(row, schema.wide_col(visit, j), *v);
            }
        }
        patterns.push(MissingnessPattern::new(slots.keys().copied().collect())?);
    }
    Ok(WideConversion {
        wide,
        patterns,
        discarded,
    })
}

/// Pivots records by their stored visit slot instead of re-deriving it from
/// age. Used for synthetic cohorts, whose decoded ages need not round to the
/// slot they were generated for.
pub fn slots_to_wide(long: &LongTable, schema: &CohortSchema) -> Result<WideMatrix> {
    let d = schema.n_longitudinal();
    let groups = long.by_participant();
    let mut wide = WideMatrix::empty(groups.len(), schema);
    for (row, (pid, records)) in groups.iter().enumerate() {
        let mut seen = vec![false; schema.n_visits];
        let first = records[0];
        wide.set(row, 0, Some(*pid as f64));
        wide.set(row, 1, Some(first.fam_id as f64));
        wide.set(row, 2, Some(first.sex as f64));
        for rec in records {
            if rec.values.len() != d {
                return Err(Error::Shape(format!(
                    "participant {pid}: record has {} values, schema has {d}",
                    rec.values.len()
                )));
            }
            if rec.visit >= schema.n_visits {
                return Err(Error::InvalidInput(format!("participant {pid}: visit {} out of range", rec.visit)));
            }
            if std::mem::replace(&mut seen[rec.visit], true) {
                return Err(Error::VisitConflict {
                    pers_id: *pid,
                    visit: rec.visit,
                });
            }
            for (j, v) in rec.values.iter().enumerate() {
                wide.set(row, schema.wide_col(rec.visit, j), *v);
            }
        }
    }
    Ok(wide)
}

/// Unpivots a wide matrix; unattended visits produce no record.
pub fn wide_to_long(wide: &WideMatrix, schema: &CohortSchema) -> LongTable {
    let d = schema.n_longitudinal();
    let mut records = Vec::new();
    for row in 0..wide.n_rows {
        for visit in 0..schema.n_visits {
            if !wide.visit_attended(schema, row, visit) {
                continue;
            }
            let values = (0..d).map(|j| wide.get(row, schema.wide_col(visit, j))).collect();
            records.push(LongRecord {
                pers_id: wide.pers_id(row),
                fam_id: wide.fam_id(row),
                sex: wide.sex(row),
                visit,
                values,
            });
        }
    }
    LongTable { records }
}

/// Number of cells filled per variable by [`impute_total_median`].
pub type ImputationCounts = BTreeMap<String, usize>;

/// Fills item-level gaps of the named variables with the median over every
/// observed cell of that variable (all participants and visits). Only cells
/// inside attended visits are item-level gaps. For an even number of
/// observations the lower median is used so the result stays a valid level.
pub fn impute_total_median(
    wide: &WideMatrix,
    schema: &CohortSchema,
    vars: &[&str],
) -> Result<(WideMatrix, ImputationCounts)> {
    let mut out = wide.clone();
    let mut counts = ImputationCounts::new();
    for &name in vars {
        let j = schema
            .long_index(name)
            .ok_or_else(|| Error::InvalidInput(format!("unknown variable `{name}`")))?;
        let mut observed: Vec<f64> = (0..wide.n_rows)
            .flat_map(|r| (0..schema.n_visits).map(move |v| (r, v)))
            .filter_map(|(r, v)| wide.get(r, schema.wide_col(v, j)))
            .collect();
        if observed.is_empty() {
            return Err(Error::CannotImpute(name.to_string()));
        }
        observed.sort_by(f64::total_cmp);
        let median = observed[(observed.len() - 1) / 2];
        let mut filled = 0;
        for r in 0..wide.n_rows {
            for v in 0..schema.n_visits {
                let c = schema.wide_col(v, j);
                if !wide.mask[r * wide.n_cols + c] && wide.visit_attended(schema, r, v) {
                    out.set(r, c, Some(median));
                    filled += 1;
                }
            }
        }
        counts.insert(name.to_string(), filled);
    }
    Ok((out, counts))
}

/// Shape of a real cohort that synthetic output is matched to.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReferenceCohort {
    /// `(sex, pattern)` per real participant.
    pub participants: Vec<(u8, MissingnessPattern)>,
}

impl ReferenceCohort {
    pub fn from_wide(wide: &WideMatrix, schema: &CohortSchema) -> Self {
        let participants = wide
            .patterns(schema)
            .into_iter()
            .enumerate()
            .map(|(r, p)| (wide.sex(r), p))
            .collect();
        Self { participants }
    }

    pub fn n(&self) -> usize {
        self.participants.len()
    }

    pub fn sex_fraction(&self, sex: u8) -> f64 {
        if self.participants.is_empty() {
            return 0.0;
        }
        self.participants.iter().filter(|(s, _)| *s == sex).count() as f64 / self.n() as f64
    }

    pub fn patterns(&self) -> Vec<MissingnessPattern> {
        self.participants.iter().map(|(_, p)| p.clone()).collect()
    }
}

/// Per-visit attendance counts of a set of patterns.
pub fn attendance_histogram(patterns: &[MissingnessPattern], n_visits: usize) -> Vec<usize> {
    let mut hist = vec![0; n_visits];
    for p in patterns {
        for &v in &p.attended {
            if v < n_visits {
                hist[v] += 1;
            }
        }
    }
    hist
}

/// Post-processes a complete synthetic cohort to the reference shape: same
/// participant count and per-sex counts, and each participant carries an
/// attendance pattern drawn without replacement from the reference stratum
/// of the same sex. Unattended visits are deleted.
pub fn match_cohort(synth: &LongTable, reference: &ReferenceCohort, seed: u64) -> Result<LongTable> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let by_pid = synth.by_participant();
    let mut strata: BTreeMap<u8, Vec<MissingnessPattern>> = BTreeMap::new();
    for (sex, p) in &reference.participants {
        strata.entry(*sex).or_default().push(p.clone());
    }
    let mut out = Vec::new();
    for (sex, mut patterns) in strata {
        let mut candidates: Vec<u64> = by_pid
            .iter()
            .filter(|(_, rows)| rows[0].sex == sex)
            .map(|(pid, _)| *pid)
            .collect();
        if candidates.len() < patterns.len() {
            return Err(Error::Shortfall {
                sex,
                needed: patterns.len(),
                available: candidates.len(),
            });
        }
        candidates.shuffle(&mut rng);
        candidates.truncate(patterns.len());
        candidates.sort_unstable();
        patterns.shuffle(&mut rng);
        for (pid, pattern) in candidates.iter().zip(&patterns) {
            for rec in &by_pid[pid] {
                if pattern.attends(rec.visit) {
                    out.push((*rec).clone());
                }
            }
        }
    }
    Ok(LongTable { records: out }.canonical())
}

/// Masks a complete synthetic wide matrix with reference attendance patterns
/// (a random permutation of `patterns` over the first rows), so pairwise
/// statistics see the same missingness as the real data.
pub fn apply_patterns(
    synth: &WideMatrix,
    schema: &CohortSchema,
    patterns: &[MissingnessPattern],
    seed: u64,
) -> WideMatrix {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut shuffled = patterns.to_vec();
    shuffled.shuffle(&mut rng);
    let d = schema.n_longitudinal();
    let mut out = synth.clone();
    for (row, pattern) in shuffled.iter().enumerate().take(synth.n_rows) {
        for visit in 0..schema.n_visits {
            if !pattern.attends(visit) {
                for j in 0..d {
                    out.set(row, schema.wide_col(visit, j), None);
                }
            }
        }
    }
    out
}

/// Descriptive statistics of one variable.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct VariableSummary {
    pub n: usize,
    pub mean: f64,
    /// Sample standard deviation (n - 1 denominator; 0 for a single value).
    pub sd: f64,
    pub median: f64,
    pub q25: f64,
    pub q75: f64,
}

/// Quantile by linear interpolation between order statistics of sorted data.
pub fn quantile_sorted(sorted: &[f64], q: f64) -> f64 {
    let n = sorted.len();
    if n == 1 {
        return sorted[0];
    }
    let h = q.clamp(0.0, 1.0) * (n - 1) as f64;
    let lo = h.floor() as usize;
    let hi = (lo + 1).min(n - 1);
    sorted[lo] + (h - lo as f64) * (sorted[hi] - sorted[lo])
}

pub fn summarize_variable(values: &[f64]) -> Result<VariableSummary> {
    let mut v: Vec<f64> = values.iter().copied().filter(|x| x.is_finite()).collect();
    if v.is_empty() {
        return Err(Error::Empty("no observed values to summarize".into()));
    }
    v.sort_by(f64::total_cmp);
    let n = v.len();
    let mean = v.iter().sum::<f64>() / n as f64;
    let sd = if n > 1 {
        (v.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1) as f64).sqrt()
    } else {
        0.0
    };
    Ok(VariableSummary {
        n,
        mean,
        sd,
        median: quantile_sorted(&v, 0.5),
        q25: quantile_sorted(&v, 0.25),
        q75: quantile_sorted(&v, 0.75),
    })
}
