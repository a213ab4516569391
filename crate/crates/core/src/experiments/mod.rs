//! Toy-scale training runs, scans and sweeps.

pub mod data;
pub mod output;
pub mod run;
pub mod scan;
pub mod sweep;

pub use data::{gen_pairs, DataConfig, DataMode, SamplePair};
pub use run::{
    pretrain_reference, train, DiagnoseConfig, Draw, EvalRecord, Lab, NetConfig, Optimizer,
    RunConfig, RunLog, RunSummary, StepRecord, TrainOutcome,
};
pub use scan::{geometry_fixed_scan, margin_scan, spearman, ScanRow};
pub use sweep::{param_distance, sweep, SweepAxis, SweepPoint};
