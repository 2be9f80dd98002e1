//! Central and non-central chi-squared laws, truncation, small-threshold
//! asymptotes and samplers.
//!
//! The non-central CDF is a Poisson mixture of central CDFs. The mixture is
//! summed outward from its modal index, and the central terms are produced by
//! a downward recurrence so that each evaluation costs one incomplete-gamma
//! call plus one exponential per term.

use std::collections::VecDeque;

use rand::Rng;
use rand_distr::{ChiSquared, Distribution, Open01, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::special::{gamma_p, gamma_p_step, ln_gamma, std_normal_cdf, std_normal_pdf};

/// Poisson mass left out of the mixture.
pub const SERIES_TAIL: f64 = 1e-14;

/// Smallest acceptance mass that is still sampled or conditioned on.
pub const UNDERFLOW_MASS: f64 = 1e-300;

const QUANTILE_MAX_ITER: usize = 400;

/// Non-central chi-squared law with `dof` degrees of freedom and non-centrality `lambda`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct NoncentralChi2 {
    dof: u32,
    lambda: f64,
}

impl NoncentralChi2 {
    pub fn new(dof: u32, lambda: f64) -> Result<Self> {
        if dof == 0 {
            return Err(Error::domain("degrees of freedom must be positive"));
        }
        if !(lambda >= 0.0 && lambda.is_finite()) {
            return Err(Error::domain(format!(
                "non-centrality must be finite and nonnegative, got {lambda}"
            )));
        }
        Ok(Self { dof, lambda })
    }

    pub fn central(dof: u32) -> Result<Self> {
        Self::new(dof, 0.0)
    }

    pub fn dof(&self) -> u32 {
        self.dof
    }

    pub fn lambda(&self) -> f64 {
        self.lambda
    }

    pub fn mean(&self) -> f64 {
        self.dof as f64 + self.lambda
    }

    fn half_dof(&self) -> f64 {
        0.5 * self.dof as f64
    }

    pub fn cdf(&self, x: f64) -> f64 {
        if x <= 0.0 {
            return 0.0;
        }
        if x.is_infinite() {
            return 1.0;
        }
        let mix = PoissonMixture::new(0.5 * self.lambda);
        let chain = central_chain(self.half_dof(), 0.5 * x, mix.lo, mix.hi());
        mix.weights.iter().zip(&chain).map(|(w, f)| w * f).sum()
    }

    pub fn pdf(&self, x: f64) -> f64 {
        self.cdf_pdf(x).1
    }

    /// CDF and density from one pass over the mixture.
    fn cdf_pdf(&self, x: f64) -> (f64, f64) {
        if x <= 0.0 {
            let density = match self.dof {
                1 => f64::INFINITY,
                2 => 0.5 * (-0.5 * self.lambda).exp(),
                _ => 0.0,
            };
            return (0.0, density);
        }
        let y = 0.5 * x;
        let h = self.half_dof();
        let mix = PoissonMixture::new(0.5 * self.lambda);
        let chain = central_chain(h, y, mix.lo, mix.hi());
        let mut cdf = 0.0;
        let mut pdf = 0.0;
        for (i, (w, f)) in mix.weights.iter().zip(&chain).enumerate() {
            let a = h + (mix.lo + i) as f64;
            cdf += w * f;
            // central density of χ²_{2a} at x is ½ y^{a−1} e^{−y} / Γ(a)
            pdf += w * 0.5 * gamma_p_step(a - 1.0, y);
        }
        (cdf, pdf)
    }

    /// Inverse CDF by safeguarded Newton iteration on `ln F`.
    pub fn quantile(&self, u: f64) -> Result<f64> {
        if !(u > 0.0 && u < 1.0) {
            return Err(Error::domain(format!("quantile level must lie in (0, 1), got {u}")));
        }
        let p = self.dof as f64;
        let ln_u = u.ln();
        // small-threshold inversion is exact in the lower tail and a fine start elsewhere
        let guess = (ln_u + 0.5 * p * std::f64::consts::LN_2 + ln_gamma(0.5 * p + 1.0)
            + 0.5 * self.lambda)
            * (2.0 / p);
        let mut x = guess.exp().min(self.mean()).max(f64::MIN_POSITIVE);
        let mut lo = 0.0f64;
        let mut hi = f64::INFINITY;
        for _ in 0..QUANTILE_MAX_ITER {
            let (f, density) = self.cdf_pdf(x);
            if f < u {
                lo = x;
            } else {
                hi = x;
            }
            let gap = f.ln() - ln_u;
            if gap.abs() <= 1e-13 {
                return Ok(x);
            }
            let mut next = if f > 0.0 && density > 0.0 && density.is_finite() {
                x * (-gap * f / (x * density)).exp()
            } else {
                f64::NAN
            };
            if !(next > lo && next < hi) || !next.is_finite() {
                next = if hi.is_infinite() {
                    4.0 * x.max(1.0)
                } else if lo > 0.0 && hi > 4.0 * lo {
                    (lo * hi).sqrt()
                } else if lo == 0.0 {
                    0.25 * hi
                } else {
                    0.5 * (lo + hi)
                };
            }
            if (next - x).abs() <= 4.0 * f64::EPSILON * x
                || (hi.is_finite() && hi - lo <= 4.0 * f64::EPSILON * hi)
            {
                return Ok(next);
            }
            x = next;
        }
        Ok(x)
    }

    /// `E(M | M < a)`.
    pub fn truncated_mean(&self, a: f64) -> Result<f64> {
        if !(a > 0.0) {
            return Err(Error::domain(format!("truncation point must be positive, got {a}")));
        }
        if a.is_infinite() {
            return Ok(self.mean());
        }
        let (mass, partial) = self.partial_moment(a);
        if mass < UNDERFLOW_MASS {
            return Err(Error::Underflow { upper: a, mass });
        }
        Ok(partial / mass)
    }

    /// `(F(a), ∫₀^a y dF(y))` from one mixture pass.
    fn partial_moment(&self, a: f64) -> (f64, f64) {
        let h = self.half_dof();
        let mix = PoissonMixture::new(0.5 * self.lambda);
        let chain = central_chain(h, 0.5 * a, mix.lo, mix.hi() + 1);
        let mut mass = 0.0;
        let mut partial = 0.0;
        for (i, w) in mix.weights.iter().enumerate() {
            let dof = 2.0 * (h + (mix.lo + i) as f64);
            mass += w * chain[i];
            partial += w * dof * chain[i + 1];
        }
        (mass, partial)
    }

    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> f64 {
        let z: f64 = rng.sample(StandardNormal);
        let shifted = z + self.lambda.sqrt();
        let rest = if self.dof > 1 {
            ChiSquared::new((self.dof - 1) as f64)
                .expect("positive degrees of freedom")
                .sample(rng)
        } else {
            0.0
        };
        shifted * shifted + rest
    }
}

/// A non-central chi-squared law restricted to `(0, upper)`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TruncatedNoncentralChi2 {
    base: NoncentralChi2,
    upper: f64,
    mass: f64,
}

impl TruncatedNoncentralChi2 {
    pub fn new(base: NoncentralChi2, upper: f64) -> Result<Self> {
        if !(upper > 0.0) {
            return Err(Error::domain(format!("truncation point must be positive, got {upper}")));
        }
        let mass = base.cdf(upper);
        if mass < UNDERFLOW_MASS {
            return Err(Error::Underflow { upper, mass });
        }
        Ok(Self { base, upper, mass })
    }

    /// Build when the mass below `upper` is already known.
    pub(crate) fn with_mass(base: NoncentralChi2, upper: f64, mass: f64) -> Result<Self> {
        if mass < UNDERFLOW_MASS {
            return Err(Error::Underflow { upper, mass });
        }
        Ok(Self { base, upper, mass })
    }

    pub fn base(&self) -> NoncentralChi2 {
        self.base
    }

    pub fn upper(&self) -> f64 {
        self.upper
    }

    /// `F(upper)` of the base law.
    pub fn mass(&self) -> f64 {
        self.mass
    }

    pub fn mean(&self) -> Result<f64> {
        self.base.truncated_mean(self.upper)
    }

    /// Inverse-CDF draw; always strictly below `upper`.
    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> Result<f64> {
        if self.upper.is_infinite() {
            return Ok(self.base.sample(rng));
        }
        let u: f64 = rng.sample(Open01);
        let x = self.base.quantile((u * self.mass).min(1.0 - f64::EPSILON))?;
        Ok(if x < self.upper { x } else { self.upper.next_down() })
    }
}

/// Modal-outward Poisson weights covering all but [`SERIES_TAIL`] of the mass.
struct PoissonMixture {
    lo: usize,
    weights: Vec<f64>,
}

impl PoissonMixture {
    fn new(mu: f64) -> Self {
        if mu == 0.0 {
            return Self {
                lo: 0,
                weights: vec![1.0],
            };
        }
        let mode = mu.floor() as usize;
        let w_mode = (-mu + mode as f64 * mu.ln() - ln_gamma(mode as f64 + 1.0)).exp();
        let mut weights = VecDeque::from([w_mode]);
        let (mut lo, mut hi) = (mode, mode);
        let mut sum = w_mode;
        while sum < 1.0 - SERIES_TAIL {
            let left = if lo > 0 {
                weights[0] * lo as f64 / mu
            } else {
                0.0
            };
            let right = weights[weights.len() - 1] * mu / (hi + 1) as f64;
            if left.max(right) <= 1e-18 * sum {
                break;
            }
            if left > right {
                weights.push_front(left);
                lo -= 1;
                sum += left;
            } else {
                weights.push_back(right);
                hi += 1;
                sum += right;
            }
        }
        Self {
            lo,
            weights: weights.into_iter().map(|w| w / sum).collect(),
        }
    }

    fn hi(&self) -> usize {
        self.lo + self.weights.len() - 1
    }
}

/// `P(h + j, y)` for `j = lo..=hi`, built downward from a single direct evaluation.
fn central_chain(h: f64, y: f64, lo: usize, hi: usize) -> Vec<f64> {
    let mut out = vec![0.0; hi - lo + 1];
    let mut value = gamma_p(h + hi as f64, y);
    out[hi - lo] = value;
    for j in (lo..hi).rev() {
        value += gamma_p_step(h + j as f64, y);
        out[j - lo] = value.min(1.0);
    }
    out
}

pub fn chi2_cdf(x: f64, p: u32) -> f64 {
    if x <= 0.0 {
        return 0.0;
    }
    gamma_p(0.5 * p as f64, 0.5 * x)
}

pub fn chi2_quantile(u: f64, p: u32) -> Result<f64> {
    NoncentralChi2::central(p)?.quantile(u)
}

pub fn nc_chi2_cdf(x: f64, p: u32, lambda: f64) -> Result<f64> {
    Ok(NoncentralChi2::new(p, lambda)?.cdf(x))
}

pub fn nc_chi2_quantile(u: f64, p: u32, lambda: f64) -> Result<f64> {
    NoncentralChi2::new(p, lambda)?.quantile(u)
}

pub fn nc_chi2_truncated_mean(p: u32, lambda: f64, a: f64) -> Result<f64> {
    NoncentralChi2::new(p, lambda)?.truncated_mean(a)
}

/// Leading-order CDF as the threshold shrinks: `a^{p/2} e^{−λ/2} / (2^{p/2} Γ(p/2+1))`.
pub fn small_a_cdf_asymptote(p: u32, lambda: f64, a: f64) -> f64 {
    let h = 0.5 * p as f64;
    (h * a.ln() - 0.5 * lambda - h * std::f64::consts::LN_2 - ln_gamma(h + 1.0)).exp()
}

/// Leading-order truncated mean as the threshold shrinks: `p a / (p + 2)`.
pub fn small_a_mean_asymptote(p: u32, a: f64) -> f64 {
    let p = p as f64;
    p * a / (p + 2.0)
}

pub fn sample_nc_chi2<R: Rng + ?Sized>(p: u32, lambda: f64, rng: &mut R) -> Result<f64> {
    Ok(NoncentralChi2::new(p, lambda)?.sample(rng))
}

pub fn sample_truncated<R: Rng + ?Sized>(
    dist: &TruncatedNoncentralChi2,
    rng: &mut R,
) -> Result<f64> {
    dist.sample(rng)
}

/// `E(Y₁² | (α₁Y₁ + α₂Y₂)² < c)` for independent standard normals.
pub fn projected_truncation_second_moment(alpha1: f64, alpha2: f64, c: f64) -> Result<f64> {
    if !(alpha1 > 0.0 && alpha2 > 0.0 && c > 0.0) {
        return Err(Error::domain("alpha1, alpha2 and c must be positive"));
    }
    let s = alpha1 * alpha1 + alpha2 * alpha2;
    let beta = alpha1 * alpha1 / s;
    let gamma = (c / s).sqrt();
    let mass = if gamma < 1.0 {
        crate::special::erf(gamma / std::f64::consts::SQRT_2)
    } else {
        std_normal_cdf(gamma) - std_normal_cdf(-gamma)
    };
    Ok(1.0 - 2.0 * beta * gamma * std_normal_pdf(gamma) / mass)
}

/// Kolmogorov–Smirnov distance between a sample and a continuous CDF.
pub fn ks_distance(sample: &mut [f64], cdf: impl Fn(f64) -> f64) -> f64 {
    sample.sort_by(f64::total_cmp);
    let n = sample.len() as f64;
    let mut d = 0.0f64;
    for (i, &x) in sample.iter().enumerate() {
        let f = cdf(x);
        d = d.max((f - i as f64 / n).abs()).max(((i + 1) as f64 / n - f).abs());
    }
    d
}
