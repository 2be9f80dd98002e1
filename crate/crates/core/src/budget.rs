//! Rerandomization budgets per group and the acceptance thresholds they imply.

use serde::{Deserialize, Serialize};

use crate::distributions::NoncentralChi2;
use crate::error::{Error, Result};
use crate::special::ln_gamma;

pub const DEFAULT_CAP_MULTIPLIER: u64 = 10;

/// Expected rerandomization counts `s_1..s_K` and the attempt-cap policy.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct BudgetPlan {
    pub total: u64,
    pub per_group: Vec<u64>,
    pub floor: u64,
    pub cap_multiplier: u64,
}

impl BudgetPlan {
    /// A user-supplied s-vector; the floor is recorded as its minimum.
    pub fn explicit(per_group: Vec<u64>, cap_multiplier: u64) -> Result<Self> {
        if per_group.is_empty() || per_group.contains(&0) {
            return Err(Error::Config(
                "every group needs a budget of at least 1".into(),
            ));
        }
        if cap_multiplier == 0 {
            return Err(Error::Config("cap multiplier must be positive".into()));
        }
        Ok(Self {
            total: per_group.iter().sum(),
            floor: *per_group.iter().min().expect("non-empty"),
            per_group,
            cap_multiplier,
        })
    }

    pub fn with_cap_multiplier(mut self, cap_multiplier: u64) -> Self {
        self.cap_multiplier = cap_multiplier;
        self
    }

    pub fn groups(&self) -> usize {
        self.per_group.len()
    }

    /// Maximum attempts allowed for group `k` (0-based).
    pub fn attempt_cap(&self, k: usize) -> u64 {
        self.cap_multiplier.saturating_mul(self.per_group[k])
    }
}

/// `C_p = 2p Γ(p/2 + 1)^{2/p} / (p + 2)`.
pub fn cp_constant(p: u32) -> f64 {
    let p = p as f64;
    2.0 * p * ((2.0 / p) * ln_gamma(0.5 * p + 1.0)).exp() / (p + 2.0)
}

/// Default floor on each `s_k`: 10 once `S ≥ 2000`, otherwise `max(1, ⌊S/(2K)⌋)` capped at 10.
pub fn default_floor(total: u64, groups: usize) -> u64 {
    if total >= 2000 {
        10
    } else {
        (total / (2 * groups.max(1) as u64)).clamp(1, 10)
    }
}

/// Allocate `S` across groups of sizes `n_1..n_K` to approximately minimize `E(M_K)`.
///
/// Each earlier budget follows `s_{k−1} = round((C_p n_{k−1} s_k / (p n_k))^{p/(p+2)})`,
/// clamped below at `floor`. The last budget is searched so the vector sums to
/// at most `S`, and any remainder goes to `s_K`.
pub fn allocate(total: u64, p: u32, group_sizes: &[f64], floor: u64) -> Result<BudgetPlan> {
    let k = group_sizes.len();
    if k == 0 || group_sizes.iter().any(|&n| !(n > 0.0)) {
        return Err(Error::Config("group sizes must be positive and non-empty".into()));
    }
    if p == 0 {
        return Err(Error::domain("p must be positive"));
    }
    let floor = floor.max(1);
    if total < k as u64 * floor {
        return Err(Error::InfeasibleBudget {
            total,
            groups: k,
            floor,
        });
    }
    let chain = |last: u64| -> Vec<u64> {
        let mut s = vec![0u64; k];
        s[k - 1] = last;
        for j in (1..k).rev() {
            let target = recursion_target(p, group_sizes[j - 1], group_sizes[j], s[j] as f64);
            s[j - 1] = round_half_up(target).max(floor);
        }
        s
    };
    let sum = |s: &[u64]| s.iter().sum::<u64>();

    // largest s_K whose chain fits in the budget; the chain sum is nondecreasing in s_K
    let (mut lo, mut hi) = (floor, total);
    while lo < hi {
        let mid = lo + (hi - lo).div_ceil(2);
        if sum(&chain(mid)) <= total {
            lo = mid;
        } else {
            hi = mid - 1;
        }
    }
    let mut per_group = chain(lo);
    let residual = total - sum(&per_group);
    per_group[k - 1] += residual;
    Ok(BudgetPlan {
        total,
        per_group,
        floor,
        cap_multiplier: DEFAULT_CAP_MULTIPLIER,
    })
}

/// `(C_p n_{k−1} s_k / (p n_k))^{p/(p+2)}`.
pub fn recursion_target(p: u32, n_prev: f64, n_k: f64, s_k: f64) -> f64 {
    let pf = p as f64;
    (cp_constant(p) * n_prev * s_k / (pf * n_k)).powf(pf / (pf + 2.0))
}

fn round_half_up(x: f64) -> u64 {
    (x + 0.5).floor().max(0.0) as u64
}

/// Acceptance threshold `a_k` for group `k` (0-based) given the previous accepted distance.
///
/// `a_k = (n_k / n_{1:k}) · F⁻¹(1/s_k; p, λ)` with `λ = (n_{1:k} − n_k) M_{k−1} / n_k`.
/// A budget of one means the first draw is accepted, so the threshold is infinite.
pub fn threshold(p: u32, group_sizes: &[f64], k: usize, m_prev: f64, s_k: u64) -> Result<f64> {
    if k >= group_sizes.len() {
        return Err(Error::domain(format!(
            "group index {k} out of range for {} groups",
            group_sizes.len()
        )));
    }
    if s_k == 0 {
        return Err(Error::domain("budget must be at least 1"));
    }
    if s_k == 1 {
        return Ok(f64::INFINITY);
    }
    let (scale, lambda) = conditional_law(group_sizes, k, m_prev);
    let q = NoncentralChi2::new(p, lambda)?.quantile(1.0 / s_k as f64)?;
    Ok(scale * q)
}

/// `(n_k / n_{1:k}, λ)` for the conditional law of `M_k` given `M_{k−1}`.
pub fn conditional_law(group_sizes: &[f64], k: usize, m_prev: f64) -> (f64, f64) {
    let cum: f64 = group_sizes[..=k].iter().sum();
    let n_k = group_sizes[k];
    let lambda = if k == 0 { 0.0 } else { (cum - n_k) / n_k * m_prev };
    (n_k / cum, lambda)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::distributions::{chi2_quantile, NoncentralChi2};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;
    use std::f64::consts::PI;

    #[test]
    fn cp_reference_values() {
        assert!((cp_constant(2) - 1.0).abs() < 1e-14);
        assert!((cp_constant(1) - PI / 6.0).abs() < 1e-14);
        for p in 1..=50 {
            let c = cp_constant(p);
            assert!(c > 0.0 && c < p as f64, "p = {p}");
        }
    }

    #[test]
    fn single_group_takes_everything() {
        let plan = allocate(777, 4, &[10.0], 10).unwrap();
        assert_eq!(plan.per_group, vec![777]);
    }

    #[test]
    fn infeasible_budget() {
        assert!(matches!(
            allocate(29, 2, &[1.0, 1.0, 1.0], 10),
            Err(Error::InfeasibleBudget { total: 29, groups: 3, floor: 10 })
        ));
    }

    #[test]
    fn floor_defaults() {
        assert_eq!(default_floor(2000, 5), 10);
        assert_eq!(default_floor(10, 5), 1);
        assert_eq!(default_floor(50, 3), 8);
        assert_eq!(default_floor(1000, 3), 10);
    }

    #[test]
    fn recursion_holds_above_floor() {
        for &(s, p, k) in &[(2000u64, 5u32, 3usize), (10_000, 2, 5), (5000, 10, 10), (2000, 12, 4)] {
            let sizes = vec![50.0; k];
            let plan = allocate(s, p, &sizes, 10).unwrap();
            assert_eq!(plan.per_group.iter().sum::<u64>(), s);
            assert!(plan.per_group.windows(2).all(|w| w[0] <= w[1]));
            for j in 1..k {
                let target = recursion_target(p, 50.0, 50.0, plan.per_group[j] as f64);
                let prev = plan.per_group[j - 1] as f64;
                if prev > 10.0 {
                    assert!((prev - target.round()).abs() <= 1.0, "{:?}", plan.per_group);
                } else {
                    assert!(target < 11.0);
                }
            }
        }
    }

    #[test]
    fn last_group_dominates_large_budgets() {
        for p in 1..=5 {
            for k in [2usize, 3, 5, 10] {
                let plan = allocate(10_000, p, &vec![1.0; k], 10).unwrap();
                assert!(*plan.per_group.last().unwrap() as f64 / 10_000.0 >= 0.85);
            }
        }
    }

    #[test]
    fn first_threshold_is_complete_rerandomization() {
        let a = threshold(5, &[3.0, 9.0], 0, 0.0, 2000).unwrap();
        assert!((a - chi2_quantile(1.0 / 2000.0, 5).unwrap()).abs() < 1e-12);
        assert_eq!(threshold(5, &[3.0], 0, 0.0, 1).unwrap(), f64::INFINITY);
        let a1 = threshold(3, &[1.0, 1.0], 1, 0.01, 50).unwrap();
        let a2 = threshold(3, &[1.0, 1.0], 1, 0.5, 50).unwrap();
        assert!(a2 > a1);
    }

    #[test]
    fn threshold_matches_monte_carlo_quantile() {
        // M_2 = ½ χ²_1(λ = 0.01): empirical 1/100 quantile
        let a = threshold(1, &[1.0, 1.0], 1, 0.01, 100).unwrap();
        let base = NoncentralChi2::new(1, 0.01).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        let n = 1_000_000usize;
        let mut xs: Vec<f64> = (0..n).map(|_| 0.5 * base.sample(&mut rng)).collect();
        xs.sort_by(f64::total_cmp);
        let u = 0.01;
        let empirical = xs[(u * n as f64) as usize];
        // SE of an empirical quantile: sqrt(u(1−u)/n) / density
        let density = 2.0 * base.pdf(2.0 * a);
        let se = (u * (1.0 - u) / n as f64).sqrt() / density;
        assert!((empirical - a).abs() < 3.0 * se, "{empirical} vs {a} (se {se})");
    }

    #[test]
    fn explicit_plans() {
        let plan = BudgetPlan::explicit(vec![10, 12, 22, 120, 1836], 10).unwrap();
        assert_eq!(plan.total, 2000);
        assert_eq!(plan.attempt_cap(4), 18_360);
        assert!(BudgetPlan::explicit(vec![3, 0], 10).is_err());
    }

    mod props {
        use super::*;
        use proptest::prelude::*;

        proptest! {
            #[test]
            fn allocation_spends_exactly_the_budget(
                total in 20u64..50_000,
                p in 1u32..15,
                sizes in proptest::collection::vec(1.0f64..200.0, 1..8),
            ) {
                let floor = default_floor(total, sizes.len());
                match allocate(total, p, &sizes, floor) {
                    Ok(plan) => {
                        prop_assert_eq!(plan.per_group.iter().sum::<u64>(), total);
                        prop_assert!(plan.per_group.iter().all(|&s| s >= floor));
                        if sizes.len() == 1 {
                            prop_assert_eq!(plan.per_group.clone(), vec![total]);
                        }
                    }
                    Err(Error::InfeasibleBudget { .. }) => prop_assert!(total < sizes.len() as u64 * floor),
                    Err(e) => prop_assert!(false, "{e}"),
                }
            }

            #[test]
            fn equal_groups_get_nondecreasing_budgets(total in 2000u64..100_000, p in 1u32..12, k in 1usize..10) {
                let plan = allocate(total, p, &vec![1.0; k], 10).unwrap();
                prop_assert!(plan.per_group.windows(2).all(|w| w[0] <= w[1]), "{:?}", plan.per_group);
            }
        }
    }
}
