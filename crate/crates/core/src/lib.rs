//! Numerical laboratory for small-noise stochastic differential equations.
//!
//! The crate simulates scalar SDEs with noise amplitude eps, computes their
//! Malliavin derivative functionals pathwise, estimates information-style
//! distances between rescaled fluctuations and their Gaussian limits, and
//! fits convergence rates in eps. The pipeline is organized as:
//!
//! * [`problem`]: coefficient bundles (drift, diffusion, observable) with
//!   analytic partials, built-in benchmarks, and assumption screens.
//! * [`quad`]: fixed-grid trapezoid/Simpson rules and cumulative variants.
//! * [`expr`]: the small expression grammar behind config-defined problems.
//! * [`skeleton`]: the noise-free flow and the limit variances.
//! * [`noise`]: counter-based Gaussian increments, reproducible by key.
//! * [`paths`]: Euler chains, first/second derivative fields, limit pair.
//! * [`functionals`]: conditional projections, Theta, gradients, moments.
//! * [`stats`]: means, quantiles, kernel regression, line fits.
//! * [`distance`]: score models, Fisher/Kolmogorov distances, the
//!   Pinsker-style cross check.
//! * [`experiment`]: eps-grid sweeps, rate fits, bound decomposition,
//!   the lower-bound estimate, and run persistence.

pub mod distance;
pub mod experiment;
pub mod expr;
pub mod functionals;
pub mod noise;
pub mod paths;
pub mod problem;
pub mod quad;
pub mod skeleton;
pub mod stats;

pub use distance::{DistanceReport, FisherEstimate, ScoreMethod, ScoreModel};
pub use experiment::{
    BoundComponents, ExperimentError, FunctionalKind, LowerBoundResult, RateFit, RatePoint,
    SweepOutcome, SweepPlan, SweepRow, DEFAULT_EPS_GRID,
};
pub use functionals::{ConditionalProjection, MalliavinSample, ProjSpec, ProjectionSet};
pub use noise::NoiseStream;
pub use paths::{DerivMethod, DerivativeField, LimitCoeffs, LimitPair, PathState, SecondDerivativeField};
pub use problem::{builtin, load_problem, validate, Problem, ProblemConfig, ProblemError};
pub use skeleton::{solve_skeleton, Skeleton, SkeletonError};
