//! Rerandomization state machines and treatment-effect estimation.

mod estimation;
mod qin;
mod sequential;

use rand::Rng;
use serde::{Deserialize, Serialize};

pub use estimation::{
    r_squared, simulate_outcomes, tau_hat, variance_reduction, OutcomeModel,
};
pub use qin::run_pairwise_qin;
pub use sequential::{
    complete_plan, mahalanobis_sequence, run_complete, run_sequential, GroupStep,
    PreparedDataset, SequentialState,
};

use crate::error::Result;
use crate::linalg::{treated_count, AssignmentVector};

/// Result of one trial: the fixed assignment and per-group acceptance history.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrialOutcome {
    pub assignments: AssignmentVector,
    pub m_sequence: Vec<f64>,
    pub attempts: Vec<u64>,
    pub fallback: Vec<bool>,
    pub thresholds: Vec<f64>,
    pub final_m: f64,
}

impl TrialOutcome {
    pub fn any_fallback(&self) -> bool {
        self.fallback.iter().any(|&f| f)
    }

    pub fn total_attempts(&self) -> u64 {
        self.attempts.iter().sum()
    }
}

/// Uniform draw over assignments of `units` with exactly `ω · units` treated.
pub fn random_balanced_assignment<R: Rng + ?Sized>(
    units: usize,
    omega: f64,
    rng: &mut R,
) -> Result<AssignmentVector> {
    let treated = treated_count(units, omega)?;
    let mut order: Vec<usize> = (0..units).collect();
    for i in 0..treated {
        let j = rng.random_range(i..units);
        order.swap(i, j);
    }
    Ok(AssignmentVector::from_treated(units, &order[..treated]))
}
