//! Negative log probability scoring and its per-feature decomposition.
//!
//! The anomaly for a user-day is the negative log of a factored joint: a
//! multivariate normal over the count vector (identity or diagonal
//! covariance) times one discrete distribution per categorical attribute.
//! The score decomposes additively, which is what lets a flagged user-day be
//! explained in terms of individual activity features.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::features::FeatureSchema;

pub const LN_2PI: f64 = 1.8378770664093453;
/// Categorical probabilities are clamped here before taking the log.
pub const PROB_FLOOR: f64 = 1e-12;

#[derive(Debug, Error)]
pub enum DensityError {
    #[error("dimension mismatch: x has {x}, mu has {mu}")]
    DimMismatch { x: usize, mu: usize },
    #[error("non-finite input at dimension {0}")]
    NonFinite(usize),
    #[error("categorical id {id} out of range {len}")]
    IdOutOfRange { id: usize, len: usize },
}

/// The distribution parameters emitted by the model heads for one user-day.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DistributionParams {
    pub mu: Vec<f64>,
    /// Present iff the covariance head is diagonal; absent means identity.
    pub log_var: Option<Vec<f64>>,
    /// One probability vector per categorical attribute, present iff the
    /// model includes categoricals.
    pub categorical_probs: Option<Vec<Vec<f64>>>,
}

impl DistributionParams {
    pub fn sigma(&self, i: usize) -> f64 {
        match &self.log_var {
            Some(lv) => (0.5 * lv[i]).exp(),
            None => 1.0,
        }
    }
}

/// -log N(x; mu, Sigma) with Sigma identity or diag(exp(log_var)), plus the
/// per-dimension additive terms 0.5[(x_i-mu_i)^2/var_i + log var_i + log 2pi].
pub fn gaussian_nll(x: &[f64], dp: &DistributionParams) -> Result<(f64, Vec<f64>), DensityError> {
    if x.len() != dp.mu.len() {
        return Err(DensityError::DimMismatch { x: x.len(), mu: dp.mu.len() });
    }
    if let Some(lv) = &dp.log_var {
        if lv.len() != dp.mu.len() {
            return Err(DensityError::DimMismatch { x: lv.len(), mu: dp.mu.len() });
        }
    }
    let mut terms = Vec::with_capacity(x.len());
    let mut total = 0.0;
    for i in 0..x.len() {
        if !x[i].is_finite() || !dp.mu[i].is_finite() {
            return Err(DensityError::NonFinite(i));
        }
        let log_var = dp.log_var.as_ref().map(|lv| lv[i]).unwrap_or(0.0);
        let var = log_var.exp();
        let d = x[i] - dp.mu[i];
        let term = 0.5 * (d * d / var + log_var + LN_2PI);
        terms.push(term);
        total += term;
    }
    Ok((total, terms))
}

/// -log probs[id], floored by the probability clamp.
pub fn categorical_nll(id: usize, probs: &[f64]) -> Result<f64, DensityError> {
    let p = probs.get(id).ok_or(DensityError::IdOutOfRange { id, len: probs.len() })?;
    Ok(-p.max(PROB_FLOOR).ln())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Contributor {
    pub index: usize,
    /// Signed standardized residual (x_i - mu_i) / sigma_i.
    pub residual: f64,
    pub label: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AnomalyComponents {
    pub count_nll: f64,
    pub categorical_nlls: Vec<f64>,
}

/// One scored user-day as written to the JSONL output.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AnomalyRecord {
    pub user_id: String,
    pub day_index: i64,
    pub raw_score: f64,
    pub standardized_score: f64,
    pub components: AnomalyComponents,
    pub top_contributors: Vec<Contributor>,
}

/// Marker emitted for user-days a detector could not score yet (e.g. a
/// baseline before its first refit).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct UnscoredMarker {
    pub user_id: String,
    pub day_index: i64,
    pub unscored: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum ScoreLine {
    Record(AnomalyRecord),
    Unscored(UnscoredMarker),
}

pub const DEFAULT_TOP_CONTRIBUTORS: usize = 10;

/// Combine count and categorical negative log likelihoods into an
/// [`AnomalyRecord`] (standardized score left at 0; the trainer fills it in).
/// Contributors are ranked by |(x_i - mu_i)/sigma_i| and labeled through the
/// schema's index bijection.
pub fn anomaly(
    user_id: &str,
    day_index: i64,
    x: &[f64],
    categorical_ids: &[usize],
    dp: &DistributionParams,
    schema: Option<&FeatureSchema>,
    top_n: usize,
) -> Result<AnomalyRecord, DensityError> {
    let (count_nll, terms) = gaussian_nll(x, dp)?;
    let mut categorical_nlls = Vec::new();
    if let Some(probs) = &dp.categorical_probs {
        for (c, p) in probs.iter().enumerate() {
            let id = *categorical_ids.get(c).ok_or(DensityError::IdOutOfRange { id: c, len: categorical_ids.len() })?;
            categorical_nlls.push(categorical_nll(id, p)?);
        }
    }
    let raw_score = count_nll + categorical_nlls.iter().sum::<f64>();

    let mut residuals: Vec<(usize, f64)> = (0..x.len())
        .map(|i| (i, (x[i] - dp.mu[i]) / dp.sigma(i)))
        .collect();
    residuals.sort_by(|a, b| b.1.abs().partial_cmp(&a.1.abs()).unwrap().then(a.0.cmp(&b.0)));
    residuals.truncate(top_n);
    let top_contributors = residuals
        .into_iter()
        .map(|(index, residual)| Contributor {
            index,
            residual,
            label: schema
                .and_then(|s| s.label_of(index))
                .unwrap_or_else(|| format!("f{index}")),
        })
        .collect();
    let _ = terms; // per-dim terms recombine into count_nll; kept for clarity

    Ok(AnomalyRecord {
        user_id: user_id.to_string(),
        day_index,
        raw_score,
        standardized_score: 0.0,
        components: AnomalyComponents { count_nll, categorical_nlls },
        top_contributors,
    })
}

pub fn write_jsonl_line<W: std::io::Write>(w: &mut W, line: &ScoreLine) -> std::io::Result<()> {
    serde_json::to_writer(&mut *w, line)?;
    writeln!(w)
}

pub fn read_jsonl<R: std::io::BufRead>(reader: R) -> Result<Vec<ScoreLine>, Box<dyn std::error::Error>> {
    let mut out = Vec::new();
    for line in reader.lines() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        out.push(serde_json::from_str(&line)?);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn identity_dp(mu: Vec<f64>) -> DistributionParams {
        DistributionParams { mu, log_var: None, categorical_probs: None }
    }

    #[test]
    fn nll_at_mean_identity_d2() {
        let dp = identity_dp(vec![1.0, -2.0]);
        let (nll, _) = gaussian_nll(&[1.0, -2.0], &dp).unwrap();
        assert!((nll - LN_2PI).abs() < 1e-9, "{nll}");
    }

    #[test]
    fn nll_unit_residual_d1() {
        let dp = identity_dp(vec![0.0]);
        let (nll, _) = gaussian_nll(&[1.0], &dp).unwrap();
        assert!((nll - 0.5 * (1.0 + LN_2PI)).abs() < 1e-9);
        assert!((nll - 1.41894).abs() < 1e-5);
    }

    #[test]
    fn nll_diagonal_hand_value() {
        // d=1, mu=0, x=2, var=4: 0.5(1 + log 4 + log 2pi)
        let dp = DistributionParams {
            mu: vec![0.0],
            log_var: Some(vec![4.0f64.ln()]),
            categorical_probs: None,
        };
        let (nll, _) = gaussian_nll(&[2.0], &dp).unwrap();
        let expected = 0.5 * (1.0 + 4.0f64.ln() + LN_2PI);
        assert!((nll - expected).abs() < 1e-12);
        assert!((nll - 2.11209).abs() < 1e-5);
    }

    #[test]
    fn categorical_uniform() {
        let nll = categorical_nll(2, &[0.25; 4]).unwrap();
        assert!((nll - 4.0f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn categorical_certain_is_zero() {
        let nll = categorical_nll(0, &[1.0, 0.0]).unwrap();
        assert_eq!(nll, 0.0);
    }

    #[test]
    fn categorical_clamped() {
        let nll = categorical_nll(0, &[1e-20, 1.0]).unwrap();
        assert!((nll - (-PROB_FLOOR.ln())).abs() < 1e-9);
    }

    #[test]
    fn categorical_out_of_range() {
        assert!(categorical_nll(5, &[0.5, 0.5]).is_err());
    }

    #[test]
    fn anomaly_without_categoricals_equals_gaussian() {
        let dp = identity_dp(vec![0.0, 0.0, 0.0]);
        let x = [1.0, 2.0, -0.5];
        let record = anomaly("U1", 0, &x, &[], &dp, None, 10).unwrap();
        let (nll, _) = gaussian_nll(&x, &dp).unwrap();
        assert_eq!(record.raw_score, nll);
        assert!(record.components.categorical_nlls.is_empty());
    }

    #[test]
    fn components_recombine() {
        let dp = DistributionParams {
            mu: vec![0.0, 1.0],
            log_var: Some(vec![0.3, -0.2]),
            categorical_probs: Some(vec![vec![0.7, 0.3], vec![0.1, 0.2, 0.7]]),
        };
        let record = anomaly("U1", 3, &[0.5, 2.0], &[1, 0], &dp, None, 10).unwrap();
        let parts = record.components.count_nll + record.components.categorical_nlls.iter().sum::<f64>();
        assert!((record.raw_score - parts).abs() < 1e-9);
    }

    #[test]
    fn spiked_feature_is_top_contributor() {
        let d = 8;
        let mu = vec![0.0; d];
        let dp = identity_dp(mu);
        let mut x = vec![0.0; d];
        x[5] = 10.0;
        let record = anomaly("U1", 0, &x, &[], &dp, None, 3).unwrap();
        assert_eq!(record.top_contributors[0].index, 5);
        assert!((record.top_contributors[0].residual - 10.0).abs() < 1e-12);
    }

    #[test]
    fn contributor_labels_decode_via_schema() {
        let schema = FeatureSchema::enterprise_default();
        let d = schema.count_dim();
        let dp = identity_dp(vec![0.0; d]);
        let mut x = vec![0.0; d];
        x[0] = 3.0;
        let record = anomaly("U1", 0, &x, &[], &dp, Some(&schema), 1).unwrap();
        assert_eq!(record.top_contributors[0].label, schema.label_of(0).unwrap());
        assert_eq!(schema.index_of_label(&record.top_contributors[0].label), Some(0));
    }

    #[test]
    fn jsonl_roundtrip_including_unscored() {
        let record = AnomalyRecord {
            user_id: "U1".into(),
            day_index: 4,
            raw_score: 2.5,
            standardized_score: 1.1,
            components: AnomalyComponents { count_nll: 2.5, categorical_nlls: vec![] },
            top_contributors: vec![],
        };
        let marker = UnscoredMarker { user_id: "U2".into(), day_index: 4, unscored: true };
        let mut buf = Vec::new();
        write_jsonl_line(&mut buf, &ScoreLine::Record(record.clone())).unwrap();
        write_jsonl_line(&mut buf, &ScoreLine::Unscored(marker.clone())).unwrap();
        let lines = read_jsonl(&buf[..]).unwrap();
        assert_eq!(lines.len(), 2);
        assert_eq!(lines[0], ScoreLine::Record(record));
        assert_eq!(lines[1], ScoreLine::Unscored(marker));
    }
}
