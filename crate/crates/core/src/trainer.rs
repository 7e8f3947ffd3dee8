//! The online loop: score-then-train over the day-ordered stream of user-day
//! vectors. Each sample is scored with weights that have not yet trained on
//! it, then contributes to exactly one mini-batch update. Anomaly scores are
//! standardized against an exponentially weighted moving average of their
//! mean and variance as they arrive.

use std::collections::{HashMap, VecDeque};
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::density::{anomaly, AnomalyRecord, ScoreLine, UnscoredMarker, DEFAULT_TOP_CONTRIBUTORS};
use crate::features::{FeatureSchema, UserDayVector};
use crate::model::{DayInput, Encoder, EncoderInput, LayerStates, Model, ModelError, TargetMode};
use crate::numerics::{adam_step, AdamState, NumericsError, ParamSet};

pub const VARIANCE_FLOOR: f64 = 1e-8;
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum TrainerError {
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Numerics(#[from] NumericsError),
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
    #[error("checkpoint parse error: {0}")]
    Parse(#[from] serde_json::Error),
    #[error("checkpoint version {found} not supported (expected {expected})")]
    VersionMismatch { found: u32, expected: u32 },
    #[error("checkpoint schema digest {found} does not match current schema {expected}")]
    SchemaMismatch { found: String, expected: String },
}

/// Streaming mean/variance with exponential decay.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EwmaStats {
    pub mean: f64,
    pub variance: f64,
    pub alpha: f64,
    pub count: u64,
}

impl EwmaStats {
    pub fn new(alpha: f64) -> Self {
        assert!(alpha > 0.0 && alpha < 1.0);
        EwmaStats { mean: 0.0, variance: VARIANCE_FLOOR, alpha, count: 0 }
    }

    /// Standardize `value` against the statistics BEFORE incorporating it,
    /// then update. The first observation seeds the mean and returns 0.
    pub fn update(&mut self, value: f64) -> f64 {
        if self.count == 0 {
            self.mean = value;
            self.variance = VARIANCE_FLOOR;
            self.count = 1;
            return 0.0;
        }
        let z = (value - self.mean) / self.variance.sqrt();
        let mean_old = self.mean;
        self.mean = (1.0 - self.alpha) * self.mean + self.alpha * value;
        let d = value - mean_old;
        self.variance = ((1.0 - self.alpha) * self.variance + self.alpha * d * d).max(VARIANCE_FLOOR);
        self.count += 1;
        z
    }
}

/// Per-user window of recent inputs plus the hidden/cell states at the
/// truncation boundary (LSTM) or the previous input (DNN next-time-step).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct UserState {
    pub window: VecDeque<DayInput>,
    pub boundary: LayerStates,
    pub prev_input: Option<DayInput>,
    pub last_active_day: i64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct UserStateStore {
    pub states: HashMap<String, UserState>,
    /// Users inactive longer than this many days are evicted at day
    /// boundaries and re-enter with zero states.
    pub max_inactive_days: i64,
}

impl UserStateStore {
    pub fn new(max_inactive_days: i64) -> Self {
        UserStateStore { states: HashMap::new(), max_inactive_days }
    }

    pub fn len(&self) -> usize {
        self.states.len()
    }

    pub fn is_empty(&self) -> bool {
        self.states.is_empty()
    }

    fn get_or_create(&mut self, user: &str, model: &Model, day: i64) -> &mut UserState {
        self.states.entry(user.to_string()).or_insert_with(|| UserState {
            window: VecDeque::new(),
            boundary: model.zero_states(),
            prev_input: None,
            last_active_day: day,
        })
    }

    fn evict_inactive(&mut self, day: i64) {
        let horizon = self.max_inactive_days;
        self.states.retain(|_, s| day - s.last_active_day <= horizon);
    }
}

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
pub struct TrainerStats {
    pub samples: u64,
    /// Scoring passes through the model; equals `samples` (single pass).
    pub forward_passes: u64,
    pub updates: u64,
    pub skipped_samples: u64,
    pub peak_store_size: usize,
}

/// Inputs that fed one scoring pass, as owned values (kept for the
/// prequential trace).
#[derive(Debug, Clone)]
pub enum OwnedInput {
    Dnn { day: DayInput },
    Lstm { window: Vec<DayInput>, boundary: LayerStates },
}

impl OwnedInput {
    pub fn as_ref(&self) -> EncoderInput<'_> {
        match self {
            OwnedInput::Dnn { day } => EncoderInput::Dnn { day },
            OwnedInput::Lstm { window, boundary } => EncoderInput::Lstm { window, boundary },
        }
    }
}

/// Test hook: everything needed to re-run one sample's scoring pass against
/// the exact weights it was scored with.
pub struct TraceEntry {
    pub record: AnomalyRecord,
    pub params: ParamSet,
    pub input: OwnedInput,
    pub target: DayInput,
}

pub struct Trainer {
    pub model: Model,
    pub adam: AdamState,
    pub store: UserStateStore,
    pub ewma: EwmaStats,
    pub schema: Option<FeatureSchema>,
    pub score_only: bool,
    pub stats: TrainerStats,
    /// When Some, every scored sample is appended (tests only; heavy).
    pub trace: Option<Vec<TraceEntry>>,
    grads: Vec<f64>,
    batch_count: usize,
}

pub const DEFAULT_EWMA_ALPHA: f64 = 0.02;
pub const DEFAULT_MAX_INACTIVE_DAYS: i64 = 60;

impl Trainer {
    pub fn new(model: Model, schema: Option<FeatureSchema>) -> Trainer {
        let n = model.params.len();
        let lr = model.config.learning_rate;
        Trainer {
            adam: AdamState::new(n, lr),
            store: UserStateStore::new(DEFAULT_MAX_INACTIVE_DAYS),
            ewma: EwmaStats::new(DEFAULT_EWMA_ALPHA),
            schema,
            score_only: false,
            stats: TrainerStats::default(),
            trace: None,
            grads: vec![0.0; n],
            batch_count: 0,
            model,
        }
    }

    /// Score and train on one day of user vectors (all sharing `day`).
    /// Samples are processed in user-id order; weight updates are applied per
    /// mini-batch of `batch_size` samples, with a flush at the day boundary.
    pub fn process_day(&mut self, day: i64, vectors: &[UserDayVector]) -> Result<Vec<ScoreLine>, TrainerError> {
        let mut ordered: Vec<&UserDayVector> = vectors.iter().collect();
        ordered.sort_by(|a, b| a.user_id.cmp(&b.user_id));
        let mut out = Vec::with_capacity(ordered.len());
        for v in ordered {
            debug_assert_eq!(v.day_index, day);
            out.push(self.process_sample(day, v)?);
        }
        self.flush_batch()?;
        self.store.evict_inactive(day);
        self.stats.peak_store_size = self.stats.peak_store_size.max(self.store.len());
        Ok(out)
    }

    fn process_sample(&mut self, day: i64, v: &UserDayVector) -> Result<ScoreLine, TrainerError> {
        let target = DayInput {
            counts: v.counts.iter().map(|&c| c as f64).collect(),
            cat_ids: v.categoricals.to_vec(),
        };
        let state = self.store.get_or_create(&v.user_id, &self.model, day);
        state.last_active_day = day;

        let input = match (self.model.config.encoder, self.model.config.target_mode) {
            (Encoder::Dnn, TargetMode::SameTimeStep) => OwnedInput::Dnn { day: target.clone() },
            (Encoder::Dnn, TargetMode::NextTimeStep) => {
                // first appearance: predict from an all-zero input
                let prev = state.prev_input.clone().unwrap_or(DayInput {
                    counts: vec![0.0; target.counts.len()],
                    cat_ids: target.cat_ids.clone(),
                });
                OwnedInput::Dnn { day: prev }
            }
            (Encoder::Lstm, mode) => {
                // keep the BPTT window at its bound before scoring
                if state.window.len() >= self.model.config.bptt_window {
                    let oldest = state.window.pop_front().unwrap();
                    state.boundary = self.model.advance_state(&oldest, &state.boundary)?;
                }
                let mut window: Vec<DayInput> = state.window.iter().cloned().collect();
                if mode == TargetMode::SameTimeStep {
                    window.push(target.clone());
                }
                OwnedInput::Lstm { window, boundary: state.boundary.clone() }
            }
        };

        self.stats.samples += 1;
        self.stats.forward_passes += 1;

        let scored = match &input {
            OwnedInput::Lstm { window, .. } if window.is_empty() => {
                // next-time-step before any history: the encoder output is the
                // zero initial state; score through the heads only.
                let state = self.store.states.get(&v.user_id).unwrap();
                let h = state.boundary.h.last().unwrap().clone();
                let (_, dp) = self.model.heads(&h);
                let (loss, record) = match anomaly(
                    &v.user_id,
                    day,
                    &target.counts,
                    &target.cat_ids.iter().map(|&i| i as usize).collect::<Vec<_>>(),
                    &dp,
                    self.schema.as_ref(),
                    DEFAULT_TOP_CONTRIBUTORS,
                ) {
                    Ok(r) => (r.raw_score, Some(r)),
                    Err(_) => (f64::NAN, None),
                };
                // no encoder window to backprop through; skip the update for
                // this sample rather than special-casing a heads-only backward
                let _ = loss;
                record
            }
            _ => {
                let eval = self.model.evaluate(&input.as_ref(), &target)?;
                if !eval.loss.is_finite() {
                    None
                } else {
                    let record = anomaly(
                        &v.user_id,
                        day,
                        &target.counts,
                        &target.cat_ids.iter().map(|&i| i as usize).collect::<Vec<_>>(),
                        &eval.dp,
                        self.schema.as_ref(),
                        DEFAULT_TOP_CONTRIBUTORS,
                    )
                    .ok();
                    if record.is_some() && !self.score_only {
                        self.model.backward(&eval, &mut self.grads);
                        self.batch_count += 1;
                    }
                    record
                }
            }
        };

        let line = match scored {
            Some(mut record) => {
                record.standardized_score = self.ewma.update(record.raw_score);
                if let Some(trace) = &mut self.trace {
                    trace.push(TraceEntry {
                        record: record.clone(),
                        params: self.model.params.clone(),
                        input: input.clone_owned(),
                        target: target.clone(),
                    });
                }
                ScoreLine::Record(record)
            }
            None => {
                self.stats.skipped_samples += 1;
                log::warn!("non-finite loss for user {} day {}; sample skipped", v.user_id, day);
                ScoreLine::Unscored(UnscoredMarker {
                    user_id: v.user_id.clone(),
                    day_index: day,
                    unscored: true,
                })
            }
        };

        if self.batch_count >= self.model.config.batch_size {
            self.flush_batch()?;
        }

        // advance per-user state
        let state = self.store.states.get_mut(&v.user_id).unwrap();
        match self.model.config.encoder {
            Encoder::Dnn => state.prev_input = Some(target),
            Encoder::Lstm => state.window.push_back(target),
        }
        Ok(line)
    }

    fn flush_batch(&mut self) -> Result<(), TrainerError> {
        if self.batch_count == 0 || self.score_only {
            self.batch_count = 0;
            for g in &mut self.grads {
                *g = 0.0;
            }
            return Ok(());
        }
        let scale = 1.0 / self.batch_count as f64;
        for g in &mut self.grads {
            *g *= scale;
        }
        let finite = self.grads.iter().all(|g| g.is_finite());
        if finite {
            adam_step(&mut self.model.params, &self.grads, &mut self.adam)?;
            self.stats.updates += 1;
        } else {
            log::warn!("non-finite batch gradient; batch of {} samples dropped", self.batch_count);
        }
        self.batch_count = 0;
        for g in &mut self.grads {
            *g = 0.0;
        }
        Ok(())
    }
}

impl OwnedInput {
    fn clone_owned(&self) -> OwnedInput {
        match self {
            OwnedInput::Dnn { day } => OwnedInput::Dnn { day: day.clone() },
            OwnedInput::Lstm { window, boundary } => {
                OwnedInput::Lstm { window: window.clone(), boundary: boundary.clone() }
            }
        }
    }
}

/// Full run state for stop/resume: model, optimizer, user states and EWMA.
#[derive(Serialize, Deserialize)]
pub struct Checkpoint {
    pub version: u32,
    pub schema_digest: String,
    pub model: Model,
    pub adam: AdamState,
    pub store: UserStateStore,
    pub ewma: EwmaStats,
    pub stats: TrainerStats,
}

impl Trainer {
    pub fn checkpoint(&self, schema_digest: &str, path: &Path) -> Result<(), TrainerError> {
        let cp = Checkpoint {
            version: CHECKPOINT_VERSION,
            schema_digest: schema_digest.to_string(),
            model: self.model.clone(),
            adam: self.adam.clone(),
            store: self.store.clone(),
            ewma: self.ewma.clone(),
            stats: self.stats.clone(),
        };
        let tmp = path.with_extension("tmp");
        std::fs::write(&tmp, serde_json::to_vec(&cp)?)?;
        std::fs::rename(&tmp, path)?;
        Ok(())
    }

    pub fn restore(path: &Path, schema_digest: &str, schema: Option<FeatureSchema>) -> Result<Trainer, TrainerError> {
        let text = std::fs::read_to_string(path)?;
        let cp: Checkpoint = serde_json::from_str(&text)?;
        if cp.version != CHECKPOINT_VERSION {
            return Err(TrainerError::VersionMismatch { found: cp.version, expected: CHECKPOINT_VERSION });
        }
        if cp.schema_digest != schema_digest {
            return Err(TrainerError::SchemaMismatch {
                found: cp.schema_digest,
                expected: schema_digest.to_string(),
            });
        }
        let n = cp.model.params.len();
        Ok(Trainer {
            adam: cp.adam,
            store: cp.store,
            ewma: cp.ewma,
            schema,
            score_only: false,
            stats: cp.stats,
            trace: None,
            grads: vec![0.0; n],
            batch_count: 0,
            model: cp.model,
        })
    }
}
