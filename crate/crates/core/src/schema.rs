//! Cohort schema: variables, likelihood types, visit structure and the
//! expert-defined module groupings.

use std::collections::BTreeMap;
use std::fmt;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

/// Current version of the structured-text schema file.
pub const SCHEMA_FILE_VERSION: u32 = 1;

pub const PERS_ID: &str = "pers_ID";
pub const FAM_ID: &str = "fam_ID";
pub const SEX: &str = "sex";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Role {
    Static,
    Longitudinal,
}

/// Observation model of a single variable.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Likelihood {
    Real,
    Positive,
    Count,
    Categorical { levels: usize },
    Ordinal { levels: usize },
}

impl Likelihood {
    /// Number of levels for discrete likelihoods.
    pub fn levels(&self) -> Option<usize> {
        match *self {
            Likelihood::Categorical { levels } | Likelihood::Ordinal { levels } => Some(levels),
            _ => None,
        }
    }

    pub fn is_discrete_levels(&self) -> bool {
        self.levels().is_some()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Unit {
    #[serde(rename = "%E/d")]
    PercentEnergy,
    #[serde(rename = "kcal/d")]
    KcalPerDay,
    #[serde(rename = "years")]
    Years,
    #[serde(rename = "kg/m2")]
    KgPerM2,
    #[serde(rename = "none")]
    None,
}

/// Variable groups encoded by one autoencoder each.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Group {
    Times,
    Nutrition,
    Anthropometric,
    Socioeconomic,
    Standalone,
}

impl Group {
    pub const MODULES: [Group; 4] = [
        Group::Times,
        Group::Nutrition,
        Group::Anthropometric,
        Group::Socioeconomic,
    ];

    pub fn name(&self) -> &'static str {
        match self {
            Group::Times => "times",
            Group::Nutrition => "nutrition",
            Group::Anthropometric => "anthropometric",
            Group::Socioeconomic => "socioeconomic",
            Group::Standalone => "standalone",
        }
    }

    pub fn short(&self) -> &'static str {
        match self {
            Group::Times => "T",
            Group::Nutrition => "N",
            Group::Anthropometric => "A",
            Group::Socioeconomic => "S",
            Group::Standalone => "X",
        }
    }
}

impl fmt::Display for Group {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct VariableSpec {
    pub name: String,
    pub role: Role,
    pub likelihood: Likelihood,
    pub unit: Unit,
    /// Default group; the active [`ModuleGrouping`] may override it.
    pub group: Group,
}

impl VariableSpec {
    fn new(name: &str, role: Role, likelihood: Likelihood, unit: Unit, group: Group) -> Self {
        Self {
            name: name.to_string(),
            role,
            likelihood,
            unit,
            group,
        }
    }
}

/// Declarative description of the cohort.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CohortSchema {
    #[serde(default = "default_version")]
    pub version: u32,
    pub n_visits: usize,
    pub base_age: f64,
    pub variables: Vec<VariableSpec>,
}

fn default_version() -> u32 {
    SCHEMA_FILE_VERSION
}

impl Default for CohortSchema {
    fn default() -> Self {
        use Group::*;
        use Likelihood::*;
        use Role::*;
        let pe = Unit::PercentEnergy;
        let mut v = vec![
            VariableSpec::new(PERS_ID, Static, Real, Unit::None, Standalone),
            VariableSpec::new(FAM_ID, Static, Real, Unit::None, Standalone),
            VariableSpec::new(SEX, Static, Categorical { levels: 2 }, Unit::None, Standalone),
            VariableSpec::new("age", Longitudinal, Real, Unit::Years, Times),
            VariableSpec::new("time", Longitudinal, Real, Unit::Years, Times),
            VariableSpec::new("e_cal", Longitudinal, Positive, Unit::KcalPerDay, Nutrition),
        ];
        let nutrients: [(&str, Likelihood); 21] = [
            ("EW_p", Real),
            ("Fett_p", Real),
            ("KH_p", Real),
            ("Gluc_p", Positive),
            ("Fruc_p", Positive),
            ("Galac_p", Positive),
            ("MSacch_p", Positive),
            ("Sacch_p", Positive),
            ("MALT_p", Positive),
            ("LACT_p", Positive),
            ("DISACCH_p", Positive),
            ("ZUCK_p", Real),
            ("ZUZU_p", Real),
            ("free_s_p", Real),
            ("fs_saft_p", Positive),
            ("fs_obge_p", Positive),
            ("fs_sp_p", Positive),
            ("fs_bc_p", Positive),
            ("fs_oth_p", Positive),
            ("fs_dai_p", Positive),
            ("fs_ssb_p", Positive),
        ];
        for (name, lik) in nutrients {
            v.push(VariableSpec::new(name, Longitudinal, lik, pe, Nutrition));
        }
        v.push(VariableSpec::new("wo_tage", Longitudinal, Categorical { levels: 4 }, Unit::None, Nutrition));
        v.push(VariableSpec::new("bmr", Longitudinal, Real, Unit::KcalPerDay, Anthropometric));
        v.push(VariableSpec::new("underrep", Longitudinal, Categorical { levels: 2 }, Unit::None, Anthropometric));
        v.push(VariableSpec::new("ovw", Longitudinal, Ordinal { levels: 3 }, Unit::None, Anthropometric));
        v.push(VariableSpec::new("bmi", Longitudinal, Positive, Unit::KgPerM2, Anthropometric));
        v.push(VariableSpec::new("m_bmi", Longitudinal, Positive, Unit::KgPerM2, Socioeconomic));
        v.push(VariableSpec::new("m_ovw", Longitudinal, Categorical { levels: 2 }, Unit::None, Socioeconomic));
        v.push(VariableSpec::new("m_employ", Longitudinal, Categorical { levels: 2 }, Unit::None, Socioeconomic));
        v.push(VariableSpec::new("m_schulab", Longitudinal, Categorical { levels: 2 }, Unit::None, Socioeconomic));
        Self {
            version: SCHEMA_FILE_VERSION,
            n_visits: 16,
            base_age: 3.0,
            variables: v,
        }
    }
}

impl CohortSchema {
    pub fn statics(&self) -> impl Iterator<Item = &VariableSpec> {
        self.variables.iter().filter(|v| v.role == Role::Static)
    }

    pub fn longitudinal(&self) -> impl Iterator<Item = &VariableSpec> {
        self.variables.iter().filter(|v| v.role == Role::Longitudinal)
    }

    pub fn n_static(&self) -> usize {
        self.statics().count()
    }

    /// Number of longitudinal variables per visit.
    pub fn n_longitudinal(&self) -> usize {
        self.longitudinal().count()
    }

    /// Number of wide columns: statics plus one block of longitudinal cells per visit.
    pub fn wide_width(&self) -> usize {
        self.n_static() + self.n_visits * self.n_longitudinal()
    }

    /// Index of a longitudinal variable within a visit block.
    pub fn long_index(&self, name: &str) -> Option<usize> {
        self.longitudinal().position(|v| v.name == name)
    }

    pub fn long_var(&self, idx: usize) -> &VariableSpec {
        self.longitudinal().nth(idx).expect("longitudinal index in range")
    }

    pub fn long_names(&self) -> Vec<String> {
        self.longitudinal().map(|v| v.name.clone()).collect()
    }

    /// Wide column holding `var` (longitudinal index) at `visit`.
    pub fn wide_col(&self, visit: usize, var: usize) -> usize {
        self.n_static() + visit * self.n_longitudinal() + var
    }

    pub fn wide_column_names(&self) -> Vec<String> {
        let mut names: Vec<String> = self.statics().map(|v| v.name.clone()).collect();
        let long = self.long_names();
        for visit in 0..self.n_visits {
            for n in &long {
                names.push(format!("{n}_v{visit}"));
            }
        }
        names
    }

    pub fn validate(&self) -> Result<()> {
        if self.version != SCHEMA_FILE_VERSION {
            return Err(Error::Config(format!(
                "unsupported schema version {} (expected {SCHEMA_FILE_VERSION})",
                self.version
            )));
        }
        if self.n_visits == 0 {
            return Err(Error::Config("n_visits must be at least 1".into()));
        }
        if !self.base_age.is_finite() || self.base_age < 0.0 {
            return Err(Error::Config("base_age must be finite and non-negative".into()));
        }
        let statics: Vec<&str> = self.statics().map(|v| v.name.as_str()).collect();
        if statics != [PERS_ID, FAM_ID, SEX] {
            return Err(Error::Config(format!(
                "static variables must be exactly [{PERS_ID}, {FAM_ID}, {SEX}], found {statics:?}"
            )));
        }
        let mut seen = std::collections::HashSet::new();
        for v in &self.variables {
            if !seen.insert(v.name.as_str()) {
                return Err(Error::Config(format!("duplicate variable `{}`", v.name)));
            }
            if let Some(k) = v.likelihood.levels() {
                if k < 2 {
                    return Err(Error::Config(format!(
                        "variable `{}` needs at least 2 levels",
                        v.name
                    )));
                }
            }
            if v.role == Role::Longitudinal && v.group == Group::Standalone {
                return Err(Error::Config(format!(
                    "longitudinal variable `{}` cannot be standalone",
                    v.name
                )));
            }
        }
        for required in ["age", "time"] {
            if self.long_index(required).is_none() {
                return Err(Error::Config(format!("schema lacks `{required}`")));
            }
        }
        Ok(())
    }

    /// Stable digest of the schema, stored in checkpoints and model files.
    pub fn hash(&self) -> String {
        let bytes = serde_json::to_vec(self).expect("schema serializes");
        hex::encode(Sha256::digest(bytes))[..16].to_string()
    }

    pub fn from_toml_str(s: &str) -> Result<Self> {
        let schema: CohortSchema = toml::from_str(s)?;
        schema.validate()?;
        Ok(schema)
    }

    pub fn to_toml_string(&self) -> Result<String> {
        Ok(toml::to_string_pretty(self)?)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_toml_str(&std::fs::read_to_string(path)?)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ModuleSetting {
    #[serde(rename = "i")]
    I,
    #[serde(rename = "ii")]
    Ii,
    #[serde(rename = "iii")]
    Iii,
}

impl ModuleSetting {
    pub fn parse(s: &str) -> Result<Self> {
        match s.trim_start_matches("setting_") {
            "i" => Ok(ModuleSetting::I),
            "ii" => Ok(ModuleSetting::Ii),
            "iii" => Ok(ModuleSetting::Iii),
            other => Err(Error::Config(format!("unknown module setting `{other}`"))),
        }
    }

    pub fn label(&self) -> &'static str {
        match self {
            ModuleSetting::I => "i",
            ModuleSetting::Ii => "ii",
            ModuleSetting::Iii => "iii",
        }
    }
}

/// Assignment of longitudinal variables to autoencoder modules.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModuleGrouping {
    pub setting_id: ModuleSetting,
    pub group_map: BTreeMap<String, Group>,
    pub standalone: Vec<String>,
}

impl ModuleGrouping {
    /// Built-in presets: setting (ii) moves `ZUZU_p` and setting (iii) moves
    /// `ZUCK_p` into the times group.
    pub fn preset(setting: ModuleSetting, schema: &CohortSchema) -> Self {
        let mut group_map: BTreeMap<String, Group> = schema
            .longitudinal()
            .map(|v| (v.name.clone(), v.group))
            .collect();
        let moved = match setting {
            ModuleSetting::I => None,
            ModuleSetting::Ii => Some("ZUZU_p"),
            ModuleSetting::Iii => Some("ZUCK_p"),
        };
        if let Some(name) = moved {
            if let Some(g) = group_map.get_mut(name) {
                *g = Group::Times;
            }
        }
        Self {
            setting_id: setting,
            group_map,
            standalone: vec![FAM_ID.to_string(), SEX.to_string()],
        }
    }

    pub fn named(name: &str, schema: &CohortSchema) -> Result<Self> {
        Ok(Self::preset(ModuleSetting::parse(name)?, schema))
    }

    pub fn group_of(&self, var: &str) -> Option<Group> {
        self.group_map.get(var).copied()
    }

    /// Longitudinal variable indices (schema order) belonging to `group`.
    pub fn members(&self, schema: &CohortSchema, group: Group) -> Vec<usize> {
        schema
            .longitudinal()
            .enumerate()
            .filter(|(_, v)| self.group_of(&v.name) == Some(group))
            .map(|(i, _)| i)
            .collect()
    }

    pub fn validate(&self, schema: &CohortSchema) -> Result<()> {
        for v in schema.longitudinal() {
            match self.group_map.get(&v.name) {
                None => {
                    return Err(Error::Config(format!(
                        "variable `{}` is not assigned to a group",
                        v.name
                    )))
                }
                Some(Group::Standalone) => {
                    return Err(Error::Config(format!(
                        "longitudinal variable `{}` cannot be standalone",
                        v.name
                    )))
                }
                Some(_) => {}
            }
        }
        for k in self.group_map.keys() {
            if schema.long_index(k).is_none() {
                return Err(Error::Config(format!("grouping names unknown variable `{k}`")));
            }
        }
        Ok(())
    }
}
