pub mod ablation;
pub mod churn;
pub mod cli;
pub mod flsim;
pub mod model;
pub mod numerics;
pub mod rng;
pub mod train;
