//! Density steering for discrete-time linear systems whose state distribution is a Gaussian mixture.
//!
//! The building blocks are closed-form mean and covariance steering between Gaussian components,
//! an exact transport LP over component weights, and block coordinate descent over conic programs
//! for the soft-constrained variants. Numerical types are generic over `f32`/`f64` where the
//! algorithms are closed form; conic-program based solvers run in `f64`.

pub mod bcd;
pub mod bounds;
pub mod covsteer;
pub mod error;
pub mod gaussian;
pub mod hard;
pub mod linalg;
pub mod policy;
pub mod scalar;
pub mod system;
pub mod transport;

#[cfg(test)]
mod testutil;

pub use bcd::{
    check_feasibility, recover_feedback, solve_soft, solve_step, solve_step_multi, solve_total, step_normalized, BcdConfig, BcdReport,
    BcdState, BcdStatus, StepBudget,
    Budget, FeasibilityReport, InitMode,
};
pub use bounds::{
    absolute_bound, absolute_bound_weighted, default_grid, grid_around, propagate_error, relative_bound_check, terminal_ratios, ErrorField,
};
pub use covsteer::{
    build_thetas, cov_steer, cov_steer_sdp_value, mean_steer, CovSteerSolution, MeanSteerSolution, SteeringContext, ThetaSet,
};
pub use error::{Result, SteerError};
pub use gaussian::{fit_em, fit_em_trace, sqrtm_psd, w2_gaussian, EmFit, Gaussian, Gmm};
pub use hard::{build_cost_matrix, solve_hard, solve_hard_with, HardSolution, PairCosts};
pub use policy::{path_cost, step_cost, terminal_cost, GmmPolicy, PolicyBlock, Trajectories};
pub use scalar::Real;
pub use transport::{gmm_wasserstein, solve_transport, TransportPlan, TransportScalar};
pub use system::{build_operators, check_controllable, CostWeights, LinearSystem, SteeringOperators};

pub type Gaussian64 = Gaussian<f64>;
pub type Gmm64 = Gmm<f64>;
pub type LinearSystem64 = LinearSystem<f64>;
pub type Gmm32 = Gmm<f32>;
