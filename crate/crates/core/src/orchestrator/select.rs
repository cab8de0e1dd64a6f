use thiserror::Error;

use super::{Candidate, CandidatePool, RunConfig};

/// Ids of the `k` highest-scoring candidates, best first; equal scores go to
/// the lower id. Summed score over size-`k` subsets is maximised by exactly
/// this choice.
pub fn select_top_k(pool: &[Candidate], k: usize) -> Vec<u32> {
    let mut order: Vec<&Candidate> = pool.iter().collect();
    order.sort_by(|a, b| {
        b.score
            .value()
            .total_cmp(&a.score.value())
            .then(a.id.cmp(&b.id))
    });
    order.into_iter().take(k).map(|c| c.id).collect()
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum SelectionError {
    #[error("{trials} trials for {selected} selected candidates")]
    LengthMismatch { selected: usize, trials: usize },
    #[error("trial {trial} does not descend from selected candidate {expected}")]
    LineageMismatch { trial: u32, expected: u32 },
}

/// Per lineage, keeps whichever of original and trial scores higher; the
/// trial wins ties.
pub fn update_selection(selected: &[Candidate], trials: &[Candidate]) -> Result<Vec<Candidate>, SelectionError> {
    if selected.len() != trials.len() {
        return Err(SelectionError::LengthMismatch {
            selected: selected.len(),
            trials: trials.len(),
        });
    }
    selected
        .iter()
        .zip(trials)
        .map(|(orig, trial)| {
            if trial.lineage != Some(orig.id) {
                return Err(SelectionError::LineageMismatch {
                    trial: trial.id,
                    expected: orig.id,
                });
            }
            Ok(if trial.score.value() >= orig.score.value() {
                trial.clone()
            } else {
                orig.clone()
            })
        })
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StopReason {
    Solved,
    Budget,
}

pub fn should_terminate(pool: &CandidatePool, config: &RunConfig) -> Option<StopReason> {
    if pool.selected_candidates().any(|c| c.score.is_perfect()) {
        Some(StopReason::Solved)
    } else if pool.round >= config.max_debug_rounds {
        Some(StopReason::Budget)
    } else {
        None
    }
}
