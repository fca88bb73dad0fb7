//! Loss-driven curriculum for joint training.
//!
//! Before each iteration the previous iteration's retriever loss decides
//! whether the golden passage is injected into every question's candidate set:
//!
//! ```text
//! v = 1                    if prev > λ_upper
//! v = 0                    if prev < λ_lower
//! v ~ Bernoulli(p_b)       otherwise, p_b = (prev - λ_lower) / (λ_upper - λ_lower)
//! ```
//!
//! A high loss means the retriever still misses golden passages, so training
//! starts easy and hands the modules the golden passage; as the loss falls the
//! modules increasingly train on what the retriever actually returns.

mod joint;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::retriever::RetrievalResult;

pub use self::joint::{
    joint_loss, train_scheduler, JointGrad, JointLossBreakdown, JointLossOutput, JointModels,
    JointSettings, JointTrainer, QuestionRef, TrainLogEntry,
};

pub const DEFAULT_LAMBDA_LOWER: f64 = 1.0;
pub const DEFAULT_LAMBDA_UPPER: f64 = 4.0;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CurriculumConfig {
    pub lambda_lower: f64,
    pub lambda_upper: f64,
    pub seed: u64,
}

impl Default for CurriculumConfig {
    fn default() -> Self {
        Self {
            lambda_lower: DEFAULT_LAMBDA_LOWER,
            lambda_upper: DEFAULT_LAMBDA_UPPER,
            seed: 0,
        }
    }
}

impl CurriculumConfig {
    pub fn validate(&self) -> Result<()> {
        if self.lambda_lower < self.lambda_upper {
            Ok(())
        } else {
            Err(Error::config("lambda_lower", "must be below lambda_upper"))
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CurriculumState {
    /// Retriever loss of the previous iteration; `+∞` before the first one.
    #[serde(with = "loss_repr")]
    pub prev_retriever_loss: f64,
    pub rng: ChaCha8Rng,
    pub iteration: u64,
}

impl CurriculumState {
    pub fn new(cfg: &CurriculumConfig) -> Self {
        Self {
            prev_retriever_loss: f64::INFINITY,
            rng: ChaCha8Rng::seed_from_u64(cfg.seed),
            iteration: 0,
        }
    }

    /// Records the retriever loss of the iteration that just finished.
    pub fn record(&mut self, retriever_loss: f64) {
        self.prev_retriever_loss = retriever_loss;
        self.iteration += 1;
    }
}

/// JSON has no infinity, so the loss travels as `null` until the first
/// iteration has finished.
mod loss_repr {
    use serde::{Deserialize, Deserializer, Serializer};

    pub fn serialize<S: Serializer>(v: &f64, s: S) -> Result<S::Ok, S::Error> {
        if v.is_finite() {
            s.serialize_some(v)
        } else {
            s.serialize_none()
        }
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<f64, D::Error> {
        Ok(Option::<f64>::deserialize(d)?.unwrap_or(f64::INFINITY))
    }
}

/// `(v, p_b)` for the coming iteration. Only the Bernoulli branch advances
/// the random stream. Outside the band `p_b` is reported clamped to `[0, 1]`.
pub fn difficulty_coefficient(state: &mut CurriculumState, cfg: &CurriculumConfig) -> (u8, f64) {
    let prev = state.prev_retriever_loss;
    if prev > cfg.lambda_upper {
        return (1, 1.0);
    }
    if prev < cfg.lambda_lower {
        return (0, 0.0);
    }
    let p_b = ((prev - cfg.lambda_lower) / (cfg.lambda_upper - cfg.lambda_lower)).clamp(0.0, 1.0);
    (state.rng.gen_bool(p_b) as u8, p_b)
}

/// Retrieved pids with the golden pid appended when it is missing.
pub fn inject_golden(retrieved: &RetrievalResult, golden_pid: &str) -> Vec<String> {
    let mut pids: Vec<String> = retrieved.pids().map(str::to_owned).collect();
    if !retrieved.contains(golden_pid) {
        pids.push(golden_pid.to_owned());
    }
    pids
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::retriever::ScoredPassage;

    fn result(pids: &[&str]) -> RetrievalResult {
        RetrievalResult {
            ranked: pids
                .iter()
                .enumerate()
                .map(|(i, p)| ScoredPassage {
                    pid: (*p).into(),
                    score: -(i as f64),
                })
                .collect(),
        }
    }

    #[test]
    fn first_iteration_starts_easy() {
        let cfg = CurriculumConfig::default();
        let mut state = CurriculumState::new(&cfg);
        assert_eq!(difficulty_coefficient(&mut state, &cfg), (1, 1.0));
    }

    #[test]
    fn forced_branches_leave_rng_untouched() {
        let cfg = CurriculumConfig::default();
        let mut state = CurriculumState::new(&cfg);
        let before = state.rng.clone();
        state.prev_retriever_loss = 5.0;
        assert_eq!(difficulty_coefficient(&mut state, &cfg).0, 1);
        state.prev_retriever_loss = 0.0;
        assert_eq!(difficulty_coefficient(&mut state, &cfg).0, 0);
        assert_eq!(state.rng, before);
        state.prev_retriever_loss = 2.5;
        let (_, p) = difficulty_coefficient(&mut state, &cfg);
        assert_eq!(p, 0.5);
        assert_ne!(state.rng, before);
    }

    #[test]
    fn golden_injection() {
        let r = result(&["a", "b", "c"]);
        assert_eq!(inject_golden(&r, "c"), ["a", "b", "c"]);
        assert_eq!(inject_golden(&r, "z"), ["a", "b", "c", "z"]);
        let again = inject_golden(&result(&["a", "b", "c", "z"]), "z");
        assert_eq!(again, ["a", "b", "c", "z"]);
    }

    #[test]
    fn state_round_trips_through_json() {
        let cfg = CurriculumConfig { seed: 9, ..Default::default() };
        let mut state = CurriculumState::new(&cfg);
        let json = serde_json::to_string(&state).unwrap();
        assert_eq!(serde_json::from_str::<CurriculumState>(&json).unwrap(), state);
        state.record(2.0);
        state.prev_retriever_loss = 2.5;
        difficulty_coefficient(&mut state, &cfg);
        let json = serde_json::to_string(&state).unwrap();
        let mut back: CurriculumState = serde_json::from_str(&json).unwrap();
        assert_eq!(back, state);
        assert_eq!(
            difficulty_coefficient(&mut back, &cfg),
            difficulty_coefficient(&mut state, &cfg)
        );
    }

    #[test]
    fn invalid_thresholds_are_rejected() {
        let cfg = CurriculumConfig { lambda_lower: 2.0, lambda_upper: 2.0, seed: 0 };
        assert!(cfg.validate().is_err());
    }
}
