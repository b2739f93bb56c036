//! Uncertainty-driven decisions: risk-controlled query gating and
//! reliability-weighted multi-query fusion.

use crate::error::{Error, Result};
use crate::inference::GaussianEmbedding;
use crate::textio::fmt_f64;

pub const DEFAULT_TAU_MIN: f64 = 0.5;
pub const DEFAULT_TAU_MAX: f64 = 1.0;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct GateThresholds {
    pub gamma_d: f64,
    pub gamma_m: f64,
    pub alpha: f64,
}

/// Per-query gating record.
#[derive(Clone, Debug, PartialEq)]
pub struct GateDecision {
    pub sample_id: usize,
    /// `1 / sigma2_d`.
    pub c_d: f64,
    /// `1 / sigma2_m`; infinite when the model uncertainty is exactly zero.
    pub c_m: f64,
    pub kept: bool,
}

#[derive(Clone, Debug, PartialEq)]
pub struct GateOutcome {
    pub thresholds: GateThresholds,
    pub decisions: Vec<GateDecision>,
}

impl GateOutcome {
    pub fn kept_ids(&self) -> Vec<usize> {
        self.decisions
            .iter()
            .filter(|d| d.kept)
            .map(|d| d.sample_id)
            .collect()
    }
}

fn reciprocal(v: f64) -> f64 {
    if v == 0.0 {
        f64::INFINITY
    } else {
        1.0 / v
    }
}

/// `alpha * max + (1 - alpha) * min`, with the endpoints returned exactly so
/// infinite criteria do not produce `0 * inf`.
fn interpolate(min: f64, max: f64, alpha: f64) -> f64 {
    if alpha == 0.0 || min == max {
        min
    } else if alpha == 1.0 {
        max
    } else {
        alpha * max + (1.0 - alpha) * min
    }
}

fn criteria(queries: &[GaussianEmbedding]) -> Vec<(f64, f64)> {
    queries
        .iter()
        .map(|q| (reciprocal(q.data_uncertainty), reciprocal(q.model_uncertainty)))
        .collect()
}

/// Keeps a query iff `1/sigma2_d >= gamma_d` and `1/sigma2_m >= gamma_m`, with
/// each threshold interpolated between that criterion's extremes over `queries`.
pub fn gate(queries: &[GaussianEmbedding], alpha: f64) -> Result<GateOutcome> {
    if queries.is_empty() {
        return Err(Error::invalid("gate needs at least one query"));
    }
    if !(0.0..=1.0).contains(&alpha) {
        return Err(Error::invalid(format!("alpha must lie in [0, 1], got {alpha}")));
    }
    let crit = criteria(queries);
    let bounds = |f: fn(&(f64, f64)) -> f64| {
        crit.iter()
            .map(f)
            .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), v| (lo.min(v), hi.max(v)))
    };
    let (dmin, dmax) = bounds(|c| c.0);
    let (mmin, mmax) = bounds(|c| c.1);
    let thresholds = GateThresholds {
        gamma_d: interpolate(dmin, dmax, alpha),
        gamma_m: interpolate(mmin, mmax, alpha),
        alpha,
    };
    Ok(apply_gate(queries, &crit, thresholds))
}

/// Gate against fixed thresholds, for deployment-style use.
pub fn gate_with_thresholds(queries: &[GaussianEmbedding], gamma_d: f64, gamma_m: f64) -> GateOutcome {
    let thresholds = GateThresholds {
        gamma_d,
        gamma_m,
        alpha: f64::NAN,
    };
    apply_gate(queries, &criteria(queries), thresholds)
}

fn apply_gate(queries: &[GaussianEmbedding], crit: &[(f64, f64)], thresholds: GateThresholds) -> GateOutcome {
    let decisions = queries
        .iter()
        .zip(crit)
        .map(|(q, &(c_d, c_m))| GateDecision {
            sample_id: q.sample_id,
            c_d,
            c_m,
            kept: c_d >= thresholds.gamma_d && c_m >= thresholds.gamma_m,
        })
        .collect();
    GateOutcome {
        thresholds,
        decisions,
    }
}

pub fn format_gate_report(outcome: &GateOutcome) -> String {
    let t = &outcome.thresholds;
    let mut out = format!(
        "# gamma_d={} gamma_m={} alpha={}\nsample_id,c_d,c_m,kept\n",
        fmt_f64(t.gamma_d),
        fmt_f64(t.gamma_m),
        fmt_f64(t.alpha)
    );
    for d in &outcome.decisions {
        out.push_str(&format!(
            "{},{},{},{}\n",
            d.sample_id,
            fmt_f64(d.c_d),
            fmt_f64(d.c_m),
            u8::from(d.kept)
        ));
    }
    out
}

#[derive(Clone, Debug, PartialEq)]
pub struct ReliabilityWeights {
    /// Data uncertainties projected into `[tau_min, tau_max]`.
    pub d: Vec<f64>,
    /// Model uncertainties projected into `[tau_min, tau_max]`.
    pub m: Vec<f64>,
    pub w: Vec<f64>,
}

/// Min-max projection: the smallest value maps to `tau_max`, the largest to
/// `tau_min`. A constant list maps entirely to `tau_max`.
pub fn project(values: &[f64], tau_min: f64, tau_max: f64) -> Vec<f64> {
    let lo = values.iter().cloned().fold(f64::INFINITY, f64::min);
    let hi = values.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    if hi == lo {
        return vec![tau_max; values.len()];
    }
    values
        .iter()
        .map(|v| {
            let beta = (v - lo) / (hi - lo);
            beta * tau_min + (1.0 - beta) * tau_max
        })
        .collect()
}

pub fn multi_query_weights(
    data_unc: &[f64],
    model_unc: &[f64],
    tau_min: f64,
    tau_max: f64,
) -> Result<ReliabilityWeights> {
    if !(tau_min > 0.0 && tau_min <= tau_max && tau_max.is_finite()) {
        return Err(Error::invalid(format!(
            "need 0 < tau_min <= tau_max, got [{tau_min}, {tau_max}]"
        )));
    }
    if data_unc.is_empty() {
        return Err(Error::invalid("reliability weights need at least one query"));
    }
    if data_unc.len() != model_unc.len() {
        return Err(Error::shape("multi_query_weights", &[data_unc.len()], &[model_unc.len()]));
    }
    let d = project(data_unc, tau_min, tau_max);
    let m = project(model_unc, tau_min, tau_max);
    let total: f64 = d.iter().zip(&m).map(|(a, b)| a * b).sum();
    let w = d.iter().zip(&m).map(|(a, b)| a * b / total).collect();
    Ok(ReliabilityWeights { d, m, w })
}

/// Weighted sum of per-query similarity rows: `s_g = sum_i w_i * sims[i][g]`.
pub fn fuse_similarities(weights: &[f64], sims: &[Vec<f64>]) -> Result<Vec<f64>> {
    if weights.len() != sims.len() || sims.is_empty() {
        return Err(Error::shape("fuse_similarities", &[weights.len()], &[sims.len()]));
    }
    let g = sims[0].len();
    if let Some(row) = sims.iter().find(|r| r.len() != g) {
        return Err(Error::shape("fuse_similarities", &[g], &[row.len()]));
    }
    let mut out = vec![0.0; g];
    for (w, row) in weights.iter().zip(sims) {
        for (o, s) in out.iter_mut().zip(row) {
            *o += w * s;
        }
    }
    Ok(out)
}

/// One fusion-report line per query group.
#[derive(Clone, Debug, PartialEq)]
pub struct FusionRecord {
    pub identity: usize,
    pub camera: usize,
    pub weights: Vec<f64>,
}

pub fn format_fusion_report(records: &[FusionRecord]) -> String {
    let mut out = String::from("identity,camera,n,weights\n");
    for r in records {
        out.push_str(&format!("{},{},{}", r.identity, r.camera, r.weights.len()));
        for w in &r.weights {
            out.push(',');
            out.push_str(&fmt_f64(*w));
        }
        out.push('\n');
    }
    out
}
