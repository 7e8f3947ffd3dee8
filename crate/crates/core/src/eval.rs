//! Ranking-based evaluation of score streams against a set of labeled
//! user-days. Each day is ranked independently (most anomalous first); an
//! analyst with a daily budget of `b` inspects the top `b` rows of every
//! day, and recall is the fraction of labeled user-days inspected.

use std::collections::{BTreeMap, HashSet};
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::density::{AnomalyRecord, ScoreLine};

#[derive(Debug, Error)]
pub enum EvalError {
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
    #[error("csv error: {0}")]
    Csv(#[from] csv::Error),
    #[error("duplicate score for user {user} day {day}")]
    DuplicateUserDay { user: String, day: i64 },
    #[error("label set is empty")]
    EmptyLabels,
    #[error("budget step must divide k ({0})")]
    BadBudget(usize),
}

/// Labeled anomalous (user, day) pairs.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct LabelSet {
    pub pairs: HashSet<(String, i64)>,
}

impl LabelSet {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, user: &str, day: i64) {
        self.pairs.insert((user.to_string(), day));
    }

    pub fn contains(&self, user: &str, day: i64) -> bool {
        self.pairs.contains(&(user.to_string(), day))
    }

    pub fn len(&self) -> usize {
        self.pairs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pairs.is_empty()
    }

    /// CSV with a `user,day` header.
    pub fn load(path: &Path) -> Result<LabelSet, EvalError> {
        let mut reader = csv::Reader::from_path(path)?;
        let mut out = LabelSet::new();
        for row in reader.records() {
            let row = row?;
            let user = row.get(0).unwrap_or("").to_string();
            let day: i64 = row.get(1).unwrap_or("").trim().parse().map_err(|_| {
                EvalError::Io(std::io::Error::new(
                    std::io::ErrorKind::InvalidData,
                    format!("bad day value in label row {:?}", row),
                ))
            })?;
            out.pairs.insert((user, day));
        }
        Ok(out)
    }

    pub fn save(&self, path: &Path) -> Result<(), EvalError> {
        let mut w = csv::Writer::from_path(path)?;
        w.write_record(["user", "day"])?;
        let mut sorted: Vec<_> = self.pairs.iter().collect();
        sorted.sort_by(|a, b| a.1.cmp(&b.1).then(a.0.cmp(&b.0)));
        for (user, day) in sorted {
            w.write_record([user.as_str(), &day.to_string()])?;
        }
        w.flush()?;
        Ok(())
    }
}

/// One scored user-day with its within-day rank (1 = most anomalous).
#[derive(Debug, Clone, Serialize)]
pub struct RankedEntry {
    pub user_id: String,
    pub day_index: i64,
    pub standardized_score: f64,
    pub raw_score: f64,
    pub rank: usize,
}

/// Rank every day's users by standardized score descending, breaking ties by
/// raw score descending and then user id ascending. Unscored markers are
/// dropped. A duplicate (user, day) is an error.
pub fn rank_days(lines: &[ScoreLine]) -> Result<BTreeMap<i64, Vec<RankedEntry>>, EvalError> {
    let mut by_day: BTreeMap<i64, Vec<&AnomalyRecord>> = BTreeMap::new();
    let mut seen: HashSet<(String, i64)> = HashSet::new();
    for line in lines {
        if let ScoreLine::Record(r) = line {
            if !seen.insert((r.user_id.clone(), r.day_index)) {
                return Err(EvalError::DuplicateUserDay { user: r.user_id.clone(), day: r.day_index });
            }
            by_day.entry(r.day_index).or_default().push(r);
        }
    }
    let mut out = BTreeMap::new();
    for (day, mut records) in by_day {
        records.sort_by(|a, b| {
            b.standardized_score
                .partial_cmp(&a.standardized_score)
                .unwrap_or(std::cmp::Ordering::Equal)
                .then(b.raw_score.partial_cmp(&a.raw_score).unwrap_or(std::cmp::Ordering::Equal))
                .then(a.user_id.cmp(&b.user_id))
        });
        let ranked = records
            .into_iter()
            .enumerate()
            .map(|(i, r)| RankedEntry {
                user_id: r.user_id.clone(),
                day_index: r.day_index,
                standardized_score: r.standardized_score,
                raw_score: r.raw_score,
                rank: i + 1,
            })
            .collect();
        out.insert(day, ranked);
    }
    Ok(out)
}

/// Fraction of labeled user-days whose within-day rank is <= budget.
pub fn recall_at_budget(
    ranked: &BTreeMap<i64, Vec<RankedEntry>>,
    labels: &LabelSet,
    budget: usize,
) -> Result<f64, EvalError> {
    if labels.is_empty() {
        return Err(EvalError::EmptyLabels);
    }
    let mut hit = 0usize;
    for day in ranked.values() {
        for e in day {
            if e.rank <= budget && labels.contains(&e.user_id, e.day_index) {
                hit += 1;
            }
        }
    }
    Ok(hit as f64 / labels.len() as f64)
}

pub const BUDGET_STEP: usize = 25;

/// Recall at each budget 25, 50, ..., k plus their running cumulative sums.
#[derive(Debug, Clone, Serialize)]
pub struct RecallCurve {
    pub budgets: Vec<usize>,
    pub recalls: Vec<f64>,
    /// cumulative recall at k: sum of recalls over budgets 25..=k
    pub cr: f64,
}

pub fn cr_k(
    ranked: &BTreeMap<i64, Vec<RankedEntry>>,
    labels: &LabelSet,
    k: usize,
) -> Result<RecallCurve, EvalError> {
    if k == 0 || k % BUDGET_STEP != 0 {
        return Err(EvalError::BadBudget(k));
    }
    let mut budgets = Vec::new();
    let mut recalls = Vec::new();
    let mut cr = 0.0;
    let mut b = BUDGET_STEP;
    while b <= k {
        let r = recall_at_budget(ranked, labels, b)?;
        cr += r;
        budgets.push(b);
        recalls.push(r);
        b += BUDGET_STEP;
    }
    Ok(RecallCurve { budgets, recalls, cr })
}

/// Labels never seen in the ranked stream (useful to catch day-index or
/// user-id mismatches between labels and scores).
pub fn unmatched_labels(ranked: &BTreeMap<i64, Vec<RankedEntry>>, labels: &LabelSet) -> Vec<(String, i64)> {
    let mut scored: HashSet<(&str, i64)> = HashSet::new();
    for day in ranked.values() {
        for e in day {
            scored.insert((e.user_id.as_str(), e.day_index));
        }
    }
    let mut out: Vec<(String, i64)> = labels
        .pairs
        .iter()
        .filter(|(u, d)| !scored.contains(&(u.as_str(), *d)))
        .cloned()
        .collect();
    out.sort_by(|a, b| a.1.cmp(&b.1).then(a.0.cmp(&b.0)));
    out
}

/// Distribution summary of a score sample.
#[derive(Debug, Clone, Serialize)]
pub struct PercentileBands {
    pub min: f64,
    pub p5: f64,
    pub p25: f64,
    pub p50: f64,
    pub p75: f64,
    pub p95: f64,
    pub max: f64,
    pub count: usize,
}

/// Percentile via linear interpolation between closest ranks.
fn percentile(sorted: &[f64], p: f64) -> f64 {
    if sorted.is_empty() {
        return f64::NAN;
    }
    if sorted.len() == 1 {
        return sorted[0];
    }
    let pos = p / 100.0 * (sorted.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    let frac = pos - lo as f64;
    sorted[lo] + (sorted[hi] - sorted[lo]) * frac
}

pub fn percentile_bands(scores: &[f64]) -> Option<PercentileBands> {
    if scores.is_empty() {
        return None;
    }
    let mut sorted: Vec<f64> = scores.iter().cloned().filter(|v| v.is_finite()).collect();
    if sorted.is_empty() {
        return None;
    }
    sorted.sort_by(|a, b| a.partial_cmp(b).unwrap());
    Some(PercentileBands {
        min: sorted[0],
        p5: percentile(&sorted, 5.0),
        p25: percentile(&sorted, 25.0),
        p50: percentile(&sorted, 50.0),
        p75: percentile(&sorted, 75.0),
        p95: percentile(&sorted, 95.0),
        max: *sorted.last().unwrap(),
        count: sorted.len(),
    })
}

/// Per-day score distribution bands over the stream, CSV formatted.
pub fn write_daily_bands<W: Write>(
    w: &mut W,
    ranked: &BTreeMap<i64, Vec<RankedEntry>>,
) -> Result<(), EvalError> {
    writeln!(w, "day,count,min,p5,p25,p50,p75,p95,max")?;
    for (day, entries) in ranked {
        let scores: Vec<f64> = entries.iter().map(|e| e.standardized_score).collect();
        if let Some(b) = percentile_bands(&scores) {
            writeln!(
                w,
                "{},{},{},{},{},{},{},{},{}",
                day, b.count, b.min, b.p5, b.p25, b.p50, b.p75, b.p95, b.max
            )?;
        }
    }
    Ok(())
}

/// Full evaluation report for one score stream.
#[derive(Debug, Clone, Serialize)]
pub struct EvalReport {
    pub n_scored: usize,
    pub n_days: usize,
    pub n_labels: usize,
    pub unmatched_labels: Vec<(String, i64)>,
    pub curve: RecallCurve,
    pub score_bands: PercentileBands,
}

pub fn evaluate_stream(lines: &[ScoreLine], labels: &LabelSet, k: usize) -> Result<EvalReport, EvalError> {
    let ranked = rank_days(lines)?;
    let curve = cr_k(&ranked, labels, k)?;
    let unmatched = unmatched_labels(&ranked, labels);
    let scores: Vec<f64> = ranked
        .values()
        .flat_map(|d| d.iter().map(|e| e.standardized_score))
        .collect();
    let n_scored = scores.len();
    Ok(EvalReport {
        n_scored,
        n_days: ranked.len(),
        n_labels: labels.len(),
        unmatched_labels: unmatched,
        curve,
        score_bands: percentile_bands(&scores).expect("non-empty ranked stream"),
    })
}
