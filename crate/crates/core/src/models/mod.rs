//! Concrete problems: the DTI reconstruction and small baselines with known solutions.

pub mod baselines;
pub mod dti;
pub mod export;
