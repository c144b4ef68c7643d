//! FT-GCR: a fault-tolerant restarted Generalized Conjugate Residual solver
//! for elliptic problems on terrain-following grids, with a soft-fault
//! injection harness for measuring detection rates and recovery overhead.

pub mod faults;
pub mod ftgcr;
pub mod gcr;
pub mod grid;
pub mod harness;
pub mod operators;

pub use faults::{flip_bit, BitPolicy, FaultConfig, FaultEvent, FaultInjector};
pub use ftgcr::{ftgcr_solve, FtPolicy, FtReport};
pub use gcr::{gcr_solve, SolveConfig, SolveError, SolveReport, TolMode};
pub use grid::{build_grid, make_partition, DomainSpec, Grid, Partition};
pub use operators::{
    build_preconditioner, build_rhs, BcMode, EllipticOperator, Field, LinOp, Precond,
    PreconditionerSpec,
};
