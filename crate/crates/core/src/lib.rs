//! Cusum goodness-of-fit tests for the fixed-effects functional form of
//! linear mixed-effects models.

pub mod cusum;
pub mod data;
pub mod error;
pub mod estimation;
pub mod harness;
pub mod null;
pub mod numerics;
pub mod optim;
pub mod rng;
pub mod transform;

pub use cusum::{statistics, CusumGrid, CusumProcess, ProcessKind, TestStatistics};
pub use data::{load_dataset, read_dataset, Cluster, ClusteredDataset, ColumnSubset, ModelConfig};
pub use error::{Error, Result};
pub use estimation::{blup, fit_lmm, gls_beta, profile_loglik, FitOptions, FittedLmm, Method, VarianceComponents};
pub use estimation::{estimate, VcEstimate};
pub use harness::{
    margin_of_error, run_study, simulate_dataset, NoiseLaw, RejectionRow, RejectionTable, SimulationScenario,
    Statistic, StudyOutcome, StudyProcess, Term,
};
pub use nalgebra;
pub use null::{
    p_value, run_gof, run_gof_multi, workflow_hint, GofOptions, GofResult, NullEngine, NullScheme, ProcessSpec,
    SchemeKind, WeightLaw,
};
pub use transform::{ResidualFlavor, TransformKit, TransformOptions, Variant, WeightKind};
