use rand::Rng;

use super::TrialOutcome;
use crate::error::{Error, Result};
use crate::linalg::{AssignmentVector, CovariateDataset, SpdMatrix};

/// Pairwise biased-coin baseline: for each consecutive pair, compare both 1:1
/// assignments by the running Mahalanobis distance under a known covariance and
/// take the better one with probability `q`.
///
/// Ties count the first-unit-treated option as the better one. `q = 1/2` is a
/// fair coin and `q = 1` is deterministic given the unit order.
pub fn run_pairwise_qin<R: Rng + ?Sized>(
    dataset: &CovariateDataset,
    q: f64,
    cov_known: &SpdMatrix,
    rng: &mut R,
) -> Result<TrialOutcome> {
    if !(0.5..=1.0).contains(&q) {
        return Err(Error::domain(format!("q must lie in [0.5, 1], got {q}")));
    }
    if dataset.group_units().iter().any(|&g| g != 2) {
        return Err(Error::domain("pairwise procedure needs every group to hold exactly 2 units"));
    }
    if (dataset.omega() - 0.5).abs() > 1e-12 {
        return Err(Error::domain("pairwise procedure needs equal allocation"));
    }
    let p = dataset.p();
    if cov_known.dim() != p {
        return Err(Error::shape("known covariance dimension differs from p"));
    }
    let data = dataset.data();
    let pairs = dataset.groups();
    // whitened differences y_u − y_v, so the running distance is a plain squared norm
    let mut delta = vec![0.0; p];
    let mut diff = vec![0.0; p];
    let mut bits = Vec::with_capacity(2 * pairs);
    let mut m_sequence = Vec::with_capacity(pairs);
    for k in 0..pairs {
        let (u, v) = (2 * k, 2 * k + 1);
        for (i, d) in diff.iter_mut().enumerate() {
            *d = data.get(i, u) - data.get(i, v);
        }
        cov_known.solve_lower_in_place(&mut diff);
        let (mut plus, mut minus) = (0.0, 0.0);
        for i in 0..p {
            plus += (delta[i] + diff[i]).powi(2);
            minus += (delta[i] - diff[i]).powi(2);
        }
        let first_better = plus <= minus;
        let take_better = rng.random::<f64>() < q;
        let first_treated = first_better == take_better;
        let sign = if first_treated { 1.0 } else { -1.0 };
        for i in 0..p {
            delta[i] += sign * diff[i];
        }
        bits.push(first_treated);
        bits.push(!first_treated);
        // 2(k+1) units, D = δ/(k+1): M = (k+1)/2 · ‖D‖²
        let n = (k + 1) as f64;
        m_sequence.push(if first_treated { plus } else { minus } / (2.0 * n));
    }
    let final_m = m_sequence.last().copied().unwrap_or(0.0);
    Ok(TrialOutcome {
        assignments: AssignmentVector::new(bits),
        attempts: vec![1; pairs],
        fallback: vec![false; pairs],
        thresholds: vec![f64::INFINITY; pairs],
        m_sequence,
        final_m,
    })
}
