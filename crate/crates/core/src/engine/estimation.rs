use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::{dot, AssignmentVector, CovariateMatrix, SpdMatrix};

/// Additive-effect outcome model `y_i(w) = β₀ + βᵀx_i + τw + e_i`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OutcomeModel {
    pub beta0: f64,
    pub beta: Vec<f64>,
    pub tau: f64,
    pub noise: Vec<f64>,
}

impl OutcomeModel {
    /// Residuals are projected off `(1, X)` so they are exactly orthogonal to the covariates.
    pub fn new(x: &CovariateMatrix, beta0: f64, beta: Vec<f64>, tau: f64, noise: Vec<f64>) -> Result<Self> {
        if beta.len() != x.p() || noise.len() != x.units() {
            return Err(Error::shape("outcome model dimensions do not match the covariates"));
        }
        let noise = residualize(x, &noise)?;
        Ok(Self {
            beta0,
            beta,
            tau,
            noise,
        })
    }

    /// Gaussian residuals rescaled so that regressing `y(0)` on `X` gives exactly `r2`.
    pub fn with_r2<R: Rng + ?Sized>(
        x: &CovariateMatrix,
        beta0: f64,
        beta: Vec<f64>,
        tau: f64,
        r2: f64,
        rng: &mut R,
    ) -> Result<Self> {
        if !(r2 > 0.0 && r2 < 1.0) {
            return Err(Error::domain(format!("target R² must lie in (0, 1), got {r2}")));
        }
        if beta.len() != x.p() {
            return Err(Error::shape("coefficient vector length differs from p"));
        }
        let raw: Vec<f64> = (0..x.units()).map(|_| rng.sample(StandardNormal)).collect();
        let noise = residualize(x, &raw)?;
        let signal: Vec<f64> = (0..x.units()).map(|u| dot(&beta, x.unit(u))).collect();
        let ss_signal = centered_ss(&signal);
        let ss_noise: f64 = noise.iter().map(|e| e * e).sum();
        let scale = (ss_signal * (1.0 - r2) / r2 / ss_noise).sqrt();
        Ok(Self {
            beta0,
            beta,
            tau,
            noise: noise.into_iter().map(|e| e * scale).collect(),
        })
    }

    /// Control potential outcomes `y_i(0)`.
    pub fn control_outcomes(&self, x: &CovariateMatrix) -> Result<Vec<f64>> {
        if x.p() != self.beta.len() || x.units() != self.noise.len() {
            return Err(Error::shape("outcome model dimensions do not match the covariates"));
        }
        Ok((0..x.units())
            .map(|u| self.beta0 + dot(&self.beta, x.unit(u)) + self.noise[u])
            .collect())
    }
}

/// Observed outcomes under assignment `w`.
pub fn simulate_outcomes(model: &OutcomeModel, x: &CovariateMatrix, w: &AssignmentVector) -> Result<Vec<f64>> {
    if w.len() != x.units() {
        return Err(Error::shape("assignment length differs from unit count"));
    }
    let y0 = model.control_outcomes(x)?;
    Ok(y0
        .into_iter()
        .zip(w.bits())
        .map(|(y, &b)| if b { y + model.tau } else { y })
        .collect())
}

/// Difference in means between treatment and control.
pub fn tau_hat(y: &[f64], w: &AssignmentVector) -> Result<f64> {
    if y.len() != w.len() {
        return Err(Error::shape(format!(
            "{} outcomes but assignment of length {}",
            y.len(),
            w.len()
        )));
    }
    let t = w.treated();
    let c = w.len() - t;
    if t == 0 || c == 0 {
        return Err(Error::domain("both arms need at least one unit"));
    }
    let (mut st, mut sc) = (0.0, 0.0);
    for (v, &b) in y.iter().zip(w.bits()) {
        if b {
            st += v;
        } else {
            sc += v;
        }
    }
    Ok(st / t as f64 - sc / c as f64)
}

/// Predicted relative variance reduction `(1 − ν) R²`.
pub fn variance_reduction(nu: f64, r2: f64) -> f64 {
    (1.0 - nu) * r2
}

/// Squared multiple correlation of `y` on the rows of `x` (with intercept).
pub fn r_squared(y: &[f64], x: &CovariateMatrix) -> Result<f64> {
    if y.len() != x.units() {
        return Err(Error::shape("outcome length differs from unit count"));
    }
    let resid = residualize(x, y)?;
    let ss_res: f64 = resid.iter().map(|e| e * e).sum();
    Ok(1.0 - ss_res / centered_ss(y))
}

fn centered_ss(v: &[f64]) -> f64 {
    let mean = v.iter().sum::<f64>() / v.len() as f64;
    v.iter().map(|x| (x - mean).powi(2)).sum()
}

/// Least-squares residual of `v` on `(1, X)`, with one refinement pass.
fn residualize(x: &CovariateMatrix, v: &[f64]) -> Result<Vec<f64>> {
    let q = x.p() + 1;
    let design = |u: usize| -> Vec<f64> {
        std::iter::once(1.0).chain(x.unit(u).iter().copied()).collect()
    };
    let mut gram = vec![0.0; q * q];
    for u in 0..x.units() {
        let r = design(u);
        for i in 0..q {
            for j in 0..q {
                gram[i * q + j] += r[i] * r[j];
            }
        }
    }
    let gram = SpdMatrix::new(q, gram)?;
    let mut out = v.to_vec();
    for _ in 0..2 {
        let mut rhs = vec![0.0; q];
        for (u, &e) in out.iter().enumerate() {
            for (acc, r) in rhs.iter_mut().zip(design(u)) {
                *acc += r * e;
            }
        }
        let coef = gram.solve(&rhs);
        for (u, e) in out.iter_mut().enumerate() {
            *e -= dot(&design(u), &coef);
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn normal_x(seed: u64, p: usize, units: usize) -> CovariateMatrix {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        CovariateMatrix::from_fn(p, units, |_, _| rng.sample::<f64, _>(StandardNormal))
    }

    #[test]
    fn tau_hat_cases() {
        let w = AssignmentVector::new(vec![true, false, true, false]);
        assert_eq!(tau_hat(&[3.0; 4], &w).unwrap(), 0.0);
        let y: Vec<f64> = w.bits().iter().map(|&b| if b { 1.0 } else { 0.0 }).collect();
        assert_eq!(tau_hat(&y, &w).unwrap(), 1.0);

        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let y: Vec<f64> = (0..4).map(|_| rng.sample(StandardNormal)).collect();
        let (mut t, mut c) = (Vec::new(), Vec::new());
        for (v, &b) in y.iter().zip(w.bits()) {
            if b { t.push(*v) } else { c.push(*v) }
        }
        let oracle = t.iter().sum::<f64>() / t.len() as f64 - c.iter().sum::<f64>() / c.len() as f64;
        let signed: f64 = y.iter().zip(w.bits()).map(|(v, &b)| if b { *v } else { -*v }).sum::<f64>() / 2.0;
        assert!((tau_hat(&y, &w).unwrap() - oracle).abs() < 1e-12);
        assert!((signed - oracle).abs() < 1e-12);
        assert!(tau_hat(&y[..3], &w).is_err());
    }

    #[test]
    fn outcome_model_basics() {
        let x = normal_x(1, 3, 50);
        let model = OutcomeModel::new(&x, 2.5, vec![0.0; 3], 0.0, vec![0.0; 50]).unwrap();
        let w = AssignmentVector::from_treated(50, &(0..25).collect::<Vec<_>>());
        assert!(simulate_outcomes(&model, &x, &w).unwrap().iter().all(|&v| (v - 2.5).abs() < 1e-12));

        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let model = OutcomeModel::with_r2(&x, 1.0, vec![1.0, -0.5, 0.3], 1.7, 0.6, &mut rng).unwrap();
        let y1 = simulate_outcomes(&model, &x, &AssignmentVector::new(vec![true; 50])).unwrap();
        let y0 = simulate_outcomes(&model, &x, &AssignmentVector::new(vec![false; 50])).unwrap();
        assert!(y1.iter().zip(&y0).all(|(a, b)| (a - b - 1.7).abs() < 1e-12));
        // residuals orthogonal to the intercept and each covariate
        assert!(model.noise.iter().sum::<f64>().abs() < 1e-8);
        for i in 0..3 {
            let s: f64 = (0..50).map(|u| x.get(i, u) * model.noise[u]).sum();
            assert!(s.abs() < 1e-8);
        }
    }

    #[test]
    fn r_squared_hits_target() {
        let x = normal_x(7, 4, 1000);
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let model = OutcomeModel::with_r2(&x, 0.0, vec![0.4, 1.0, -1.0, 0.2], 0.0, 0.7, &mut rng).unwrap();
        let y = model.control_outcomes(&x).unwrap();
        assert!((r_squared(&y, &x).unwrap() - 0.7).abs() < 0.02);
    }

    #[test]
    fn variance_reduction_arithmetic() {
        assert_eq!(variance_reduction(1.0, 0.9), 0.0);
        assert!((variance_reduction(0.5, 0.8) - 0.4).abs() < 1e-15);
    }
}
