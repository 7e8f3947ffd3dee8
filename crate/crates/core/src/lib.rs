//! Online unsupervised anomaly detection over per-user daily activity
//! aggregated from multi-source system logs.
//!
//! Pipeline: `ingest` parses and merges CERT-style log files into a
//! time-ordered event stream; `features` aggregates it into per-user per-day
//! count/categorical vectors; `model` + `density` turn each vector into a
//! negative-log-probability anomaly with a per-feature decomposition;
//! `trainer` runs the online score-then-train loop; `baselines` provides PCA
//! and isolation-forest detectors over the same stream; `eval` measures
//! budget-ranked recall; `synth` generates reproducible synthetic streams
//! with injected anomalies.

pub mod baselines;
pub mod density;
pub mod eval;
pub mod features;
pub mod ingest;
pub mod manifest;
pub mod model;
pub mod numerics;
pub mod synth;
pub mod trainer;
