use rand::Rng;

use super::TrialOutcome;
use crate::budget::{conditional_law, threshold, BudgetPlan, DEFAULT_CAP_MULTIPLIER};
use crate::error::{Error, Result};
use crate::linalg::{
    add_assign, mahalanobis_heterogeneous, mahalanobis_homogeneous, sample_covariance,
    standardized_diff, treated_count, AssignmentVector, CovarianceMode, CovariateDataset,
    GroupWhitener, SpdMatrix,
};

/// Pooled covariance of the first `k` groups and the covariate total over them.
#[derive(Debug, Clone)]
struct PrefixFactor {
    cov: SpdMatrix,
    total: Vec<f64>,
    units: usize,
    treated: usize,
}

/// A dataset with every factorization the sequential procedure needs, computed once.
///
/// Covariates are centered at the overall mean; mean differences are unaffected.
#[derive(Debug, Clone)]
pub struct PreparedDataset<'a> {
    dataset: &'a CovariateDataset,
    centered: Vec<f64>,
    sizes: Vec<f64>,
    treated: Vec<usize>,
    group_sums: Vec<Vec<f64>>,
    prefix: Vec<PrefixFactor>,
    whiteners: Vec<GroupWhitener>,
}

impl<'a> PreparedDataset<'a> {
    pub fn new(dataset: &'a CovariateDataset) -> Result<Self> {
        let p = dataset.p();
        let data = dataset.data();
        let units = dataset.units();
        let mean: Vec<f64> = data.column_sum().iter().map(|s| s / units as f64).collect();
        let mut centered = Vec::with_capacity(units * p);
        for u in 0..units {
            centered.extend(data.unit(u).iter().zip(&mean).map(|(x, m)| x - m));
        }
        let k_total = dataset.groups();
        let omega = dataset.omega();
        let mut treated = Vec::with_capacity(k_total);
        let mut group_sums = Vec::with_capacity(k_total);
        for k in 0..k_total {
            let range = dataset.group_range(k);
            treated.push(treated_count(range.len(), omega)?);
            let mut sum = vec![0.0; p];
            for u in range {
                add_assign(&mut sum, &centered[u * p..(u + 1) * p]);
            }
            group_sums.push(sum);
        }

        let mut prefix = Vec::new();
        let mut whiteners = Vec::new();
        match dataset.mode() {
            CovarianceMode::Homogeneous => {
                let mut gram = vec![0.0; p * p];
                let mut total = vec![0.0; p];
                let mut seen = 0usize;
                let mut seen_treated = 0usize;
                for k in 0..k_total {
                    for u in dataset.group_range(k) {
                        let c = &centered[u * p..(u + 1) * p];
                        for i in 0..p {
                            for j in 0..=i {
                                gram[i * p + j] += c[i] * c[j];
                            }
                        }
                    }
                    add_assign(&mut total, &group_sums[k]);
                    seen += dataset.group_range(k).len();
                    seen_treated += treated[k];
                    if seen < 2 {
                        return Err(Error::shape("first group needs at least 2 units"));
                    }
                    let m = seen as f64;
                    let mut cov = vec![0.0; p * p];
                    for i in 0..p {
                        for j in 0..=i {
                            let v = (gram[i * p + j] - total[i] * total[j] / m) / (m - 1.0);
                            cov[i * p + j] = v;
                            cov[j * p + i] = v;
                        }
                    }
                    prefix.push(PrefixFactor {
                        cov: SpdMatrix::new(p, cov)?,
                        total: total.clone(),
                        units: seen,
                        treated: seen_treated,
                    });
                }
            }
            CovarianceMode::Heterogeneous => {
                for k in 0..k_total {
                    whiteners.push(GroupWhitener::new(&dataset.group(k), omega)?);
                }
            }
        }
        Ok(Self {
            dataset,
            centered,
            sizes: dataset.group_sizes(),
            treated,
            group_sums,
            prefix,
            whiteners,
        })
    }

    pub fn dataset(&self) -> &CovariateDataset {
        self.dataset
    }

    pub fn start(&self) -> SequentialState {
        let p = self.dataset.p();
        SequentialState {
            next_group: 0,
            m_prev: 0.0,
            treated_sum: vec![0.0; p],
            z_acc: vec![0.0; p],
            bits: Vec::with_capacity(self.dataset.units()),
            m_sequence: Vec::new(),
            attempts: Vec::new(),
            fallback: Vec::new(),
            thresholds: Vec::new(),
        }
    }

    /// Rerandomize the next group until acceptance or the attempt cap, then fix it.
    pub fn step<R: Rng + ?Sized>(
        &self,
        state: &mut SequentialState,
        plan: &BudgetPlan,
        rng: &mut R,
    ) -> Result<GroupStep> {
        let k = state.next_group;
        if plan.groups() != self.dataset.groups() {
            return Err(Error::Config(format!(
                "plan has {} groups but the dataset has {}",
                plan.groups(),
                self.dataset.groups()
            )));
        }
        if k >= self.dataset.groups() {
            return Err(Error::Config("every group is already assigned".into()));
        }
        let p = self.dataset.p();
        let omega = self.dataset.omega();
        let s_k = plan.per_group[k];
        let a_k = threshold(p as u32, &self.sizes, k, state.m_prev, s_k)?;
        let cap = plan.attempt_cap(k).max(1);

        let range = self.dataset.group_range(k);
        let m = range.len();
        let t = self.treated[k];
        let pick_treated = t <= m - t;
        let pick = if pick_treated { t } else { m - t };
        let group_data = &self.centered[range.start * p..range.end * p];
        let group_sum = &self.group_sums[k];

        let mut order: Vec<usize> = (0..m).collect();
        let mut sel = vec![0.0; p];
        let mut gt = vec![0.0; p];
        let mut d = vec![0.0; p];
        let mut z = vec![0.0; p];
        let mut scratch = vec![0.0; p];
        let mut best: Option<(f64, Vec<usize>)> = None;
        let mut accepted: Option<f64> = None;
        let mut attempts = 0u64;

        let evaluate = |order: &[usize],
                        sel: &mut [f64],
                        gt: &mut [f64],
                        d: &mut [f64],
                        z: &mut [f64],
                        scratch: &mut [f64],
                        state: &SequentialState|
         -> f64 {
            sel.fill(0.0);
            for &i in &order[..pick] {
                add_assign(sel, &group_data[i * p..(i + 1) * p]);
            }
            for i in 0..p {
                gt[i] = if pick_treated { sel[i] } else { group_sum[i] - sel[i] };
            }
            match self.dataset.mode() {
                CovarianceMode::Homogeneous => {
                    let pf = &self.prefix[k];
                    let tn = pf.treated as f64;
                    let cn = (pf.units - pf.treated) as f64;
                    for i in 0..p {
                        let ts = state.treated_sum[i] + gt[i];
                        d[i] = ts / tn - (pf.total[i] - ts) / cn;
                    }
                    pf.units as f64 * omega * (1.0 - omega) * pf.cov.inv_quad_form_with(d, scratch)
                }
                CovarianceMode::Heterogeneous => {
                    let tn = t as f64;
                    let cn = (m - t) as f64;
                    for i in 0..p {
                        d[i] = gt[i] / tn - (group_sum[i] - gt[i]) / cn;
                    }
                    self.whiteners[k].apply_into(d, z);
                    let w = self.sizes[k].sqrt();
                    let cum: f64 = self.sizes[..=k].iter().sum();
                    let mut norm = 0.0;
                    for i in 0..p {
                        let v = state.z_acc[i] + w * z[i];
                        scratch[i] = v;
                        norm += v * v;
                    }
                    norm / cum
                }
            }
        };

        while attempts < cap {
            attempts += 1;
            for i in 0..pick {
                let j = rng.random_range(i..m);
                order.swap(i, j);
            }
            let value = evaluate(&order, &mut sel, &mut gt, &mut d, &mut z, &mut scratch, state);
            if value < a_k {
                accepted = Some(value);
                break;
            }
            if best.as_ref().is_none_or(|(b, _)| value < *b) {
                best = Some((value, order[..pick].to_vec()));
            }
        }

        let fallback = accepted.is_none();
        let m_k = match accepted {
            Some(v) => v,
            None => {
                let (_, chosen) = best.expect("at least one attempt");
                order[..pick].copy_from_slice(&chosen);
                evaluate(&order, &mut sel, &mut gt, &mut d, &mut z, &mut scratch, state)
            }
        };

        // fix the group
        match self.dataset.mode() {
            CovarianceMode::Homogeneous => add_assign(&mut state.treated_sum, &gt),
            CovarianceMode::Heterogeneous => state.z_acc.copy_from_slice(&scratch),
        }
        let mut group_bits = vec![!pick_treated; m];
        for &i in &order[..pick] {
            group_bits[i] = pick_treated;
        }
        state.bits.extend_from_slice(&group_bits);
        state.m_prev = m_k;
        state.m_sequence.push(m_k);
        state.attempts.push(attempts);
        state.fallback.push(fallback);
        state.thresholds.push(a_k);
        state.next_group += 1;
        Ok(GroupStep {
            group: k,
            assignment: AssignmentVector::new(group_bits),
            m: m_k,
            attempts,
            fallback,
            threshold: a_k,
        })
    }

    pub fn run<R: Rng + ?Sized>(&self, plan: &BudgetPlan, rng: &mut R) -> Result<TrialOutcome> {
        let mut state = self.start();
        while !state.is_done(self.dataset.groups()) {
            self.step(&mut state, plan, rng)?;
        }
        Ok(state.finish())
    }

    /// The law of the next group's scaled distance: `(n_k / n_{1:k}, λ)`.
    pub fn conditional_law(&self, state: &SequentialState) -> (f64, f64) {
        conditional_law(&self.sizes, state.next_group, state.m_prev)
    }
}

/// Progress through the groups of one trial.
#[derive(Debug, Clone)]
pub struct SequentialState {
    next_group: usize,
    m_prev: f64,
    treated_sum: Vec<f64>,
    z_acc: Vec<f64>,
    bits: Vec<bool>,
    m_sequence: Vec<f64>,
    attempts: Vec<u64>,
    fallback: Vec<bool>,
    thresholds: Vec<f64>,
}

impl SequentialState {
    /// Index of the group that will be assigned next.
    pub fn next_group(&self) -> usize {
        self.next_group
    }

    /// Accepted distance of the last fixed group (`M_0 = 0`).
    pub fn m_prev(&self) -> f64 {
        self.m_prev
    }

    /// `Σ_{j<k} √n_j Z_j` in heterogeneous mode.
    pub fn z_accumulator(&self) -> &[f64] {
        &self.z_acc
    }

    pub fn is_done(&self, groups: usize) -> bool {
        self.next_group >= groups
    }

    pub fn finish(self) -> TrialOutcome {
        let final_m = self.m_sequence.last().copied().unwrap_or(0.0);
        TrialOutcome {
            assignments: AssignmentVector::new(self.bits),
            m_sequence: self.m_sequence,
            attempts: self.attempts,
            fallback: self.fallback,
            thresholds: self.thresholds,
            final_m,
        }
    }
}

/// What happened when one group was fixed.
#[derive(Debug, Clone, PartialEq)]
pub struct GroupStep {
    pub group: usize,
    pub assignment: AssignmentVector,
    pub m: f64,
    pub attempts: u64,
    pub fallback: bool,
    pub threshold: f64,
}

pub fn run_sequential<R: Rng + ?Sized>(
    dataset: &CovariateDataset,
    plan: &BudgetPlan,
    rng: &mut R,
) -> Result<TrialOutcome> {
    PreparedDataset::new(dataset)?.run(plan, rng)
}

/// Budget `S` on a single group with the default attempt cap.
pub fn complete_plan(total: u64) -> Result<BudgetPlan> {
    BudgetPlan::explicit(vec![total], DEFAULT_CAP_MULTIPLIER)
}

/// Rerandomize all units at once against `a = F⁻¹_{χ²_p}(1/S)`.
pub fn run_complete<R: Rng + ?Sized>(
    dataset: &CovariateDataset,
    total: u64,
    rng: &mut R,
) -> Result<TrialOutcome> {
    let single = CovariateDataset::new(
        dataset.data().clone(),
        vec![dataset.units()],
        dataset.omega(),
        CovarianceMode::Homogeneous,
    )?;
    run_sequential(&single, &complete_plan(total)?, rng)
}

/// `M_1..M_K` recomputed from scratch for a full assignment.
pub fn mahalanobis_sequence(dataset: &CovariateDataset, w: &AssignmentVector) -> Result<Vec<f64>> {
    if w.len() != dataset.units() {
        return Err(Error::shape("assignment length differs from unit count"));
    }
    let omega = dataset.omega();
    let mut out = Vec::with_capacity(dataset.groups());
    match dataset.mode() {
        CovarianceMode::Homogeneous => {
            for k in 0..dataset.groups() {
                let x = dataset.prefix(k);
                let cov = sample_covariance(&x)?;
                let wk = w.slice(0, x.units());
                out.push(mahalanobis_homogeneous(&x, &wk, omega, &cov)?);
            }
        }
        CovarianceMode::Heterogeneous => {
            let sizes = dataset.group_sizes();
            let mut zs = Vec::new();
            for k in 0..dataset.groups() {
                let r = dataset.group_range(k);
                let z = standardized_diff(&dataset.group(k), &w.slice(r.start, r.end), omega)?;
                out.push(mahalanobis_heterogeneous(&zs, &z, &sizes[..=k])?);
                zs.push(z);
            }
        }
    }
    Ok(out)
}
