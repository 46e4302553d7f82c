//! Dense float64 matrices, reverse-mode differentiation, optimizers,
//! learning-rate schedules, seeded randomness and checkpoint I/O.

pub mod checkpoint;
pub mod gradcheck;
mod graph;
mod matrix;
mod optim;
mod params;
mod rng;
mod schedule;
mod tape;

pub use graph::{Eager, Graph};
pub use matrix::{argmax, log_sum_exp, Matrix};
pub use optim::{OptimConfig, OptimCounters, Optimizer, OptimizerKind, StepStats};
pub use params::{ParamId, ParamStore, INIT_RANGE};
pub use rng::SeededRng;
pub use schedule::{noam_lr, LrSchedule};
pub use tape::{Gradients, Tape, Var};
