//! Sequential rerandomization for covariate balance in group-sequential experiments.
//!
//! ```
//! use rand::SeedableRng;
//! use rand_chacha::ChaCha8Rng;
//! use seqrerand::budget::allocate;
//! use seqrerand::datagen::{gen_covariates, CovariateDistribution};
//! use seqrerand::engine::run_sequential;
//! use seqrerand::linalg::{CovarianceMode, CovariateDataset};
//!
//! let mut rng = ChaCha8Rng::seed_from_u64(1);
//! let x = gen_covariates(300, 4, CovariateDistribution::StdNormal, &mut rng)?;
//! let data = CovariateDataset::new(x, vec![100, 100, 100], 0.5, CovarianceMode::Homogeneous)?;
//! let plan = allocate(1000, 4, &data.group_sizes(), 10)?;
//! let trial = run_sequential(&data, &plan, &mut rng)?;
//! assert_eq!(trial.m_sequence.len(), 3);
//! # Ok::<(), seqrerand::Error>(())
//! ```

pub mod error;
pub mod linalg;
pub mod budget;
pub mod datagen;
pub mod distributions;
pub mod engine;
pub mod harness;
mod special;

pub use error::{Error, Result};
