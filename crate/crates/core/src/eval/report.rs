//! Aggregated evaluation of one synthetic cohort against the real one.

use serde::{Deserialize, Serialize};

use super::{
    closure_errors, corr_relative_error, js_summary, lockstep_errors, monotone_violation_rate, pearson_matrix,
    JsSummary, MonotoneReport,
};
use crate::data::WideMatrix;
use crate::error::Result;
use crate::par::Exec;
use crate::schema::CohortSchema;

/// Summary of signed dependency errors.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ErrorSummary {
    pub n: usize,
    pub mean: f64,
    pub mean_abs: f64,
    pub max_abs: f64,
}

impl ErrorSummary {
    pub fn of(errors: &[f64]) -> Self {
        let n = errors.len();
        let denom = n.max(1) as f64;
        Self {
            n,
            mean: errors.iter().sum::<f64>() / denom,
            mean_abs: errors.iter().map(|e| e.abs()).sum::<f64>() / denom,
            max_abs: errors.iter().map(|e| e.abs()).fold(0.0, f64::max),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvaluationReport {
    pub js: JsSummary,
    /// Relative Frobenius error of the synthetic correlation matrix.
    pub corr_error: f64,
    pub corr_flagged_real: usize,
    pub corr_flagged_synth: usize,
    pub monotone: MonotoneReport,
    pub lockstep: ErrorSummary,
    pub closure: ErrorSummary,
}

/// Marginal, correlation and dependency metrics. `synth_for_corr` is the
/// synthetic matrix carrying the real cohort's missingness.
pub fn evaluate(
    real: &WideMatrix,
    synth: &WideMatrix,
    synth_for_corr: &WideMatrix,
    schema: &CohortSchema,
    exec: Exec,
) -> Result<EvaluationReport> {
    let js = js_summary(real, synth, schema)?;
    let cr = pearson_matrix(real, schema, exec);
    let cs = pearson_matrix(synth_for_corr, schema, exec);
    Ok(EvaluationReport {
        js,
        corr_error: corr_relative_error(&cr, &cs)?,
        corr_flagged_real: cr.flagged.len(),
        corr_flagged_synth: cs.flagged.len(),
        monotone: monotone_violation_rate(synth, schema, "m_schulab")?,
        lockstep: ErrorSummary::of(&lockstep_errors(synth, schema)?),
        closure: ErrorSummary::of(&closure_errors(synth, schema)?),
    })
}

/// One row of a method comparison table.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MethodComparison {
    pub method: String,
    pub setting: String,
    pub js_mean: f64,
    pub js_sd: f64,
    pub corr_error: f64,
}

impl MethodComparison {
    pub fn from_report(method: &str, setting: &str, report: &EvaluationReport) -> Self {
        Self {
            method: method.to_string(),
            setting: setting.to_string(),
            js_mean: report.js.mean,
            js_sd: report.js.sd,
            corr_error: report.corr_error,
        }
    }
}
