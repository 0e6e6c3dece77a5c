//! Diagnostic-probe toolkit: train probes on labeled embeddings, randomize
//! them with control tasks and control functions, compare the resulting
//! probe-selection criteria, and check their error terms against synthetic
//! data whose mutual information is known exactly.

pub mod controls;
pub mod criteria;
pub mod datamodel;
pub mod infotheory;
pub mod probe;
pub mod sweep;
pub mod synth;

pub use controls::{Arm, ControlAssignments, ControlOptions, Granularity, TargetSource};
pub use criteria::{compute_criteria, theory_errors, CriteriaRecord, TheoryErrorReport};
pub use datamodel::{load_dataset, save_dataset, validate_dataset, LabeledEmbeddingDataset, Split};
pub use probe::{evaluate, train, ConditionalModel, ProbeConfig, TrainedProbe};
pub use sweep::{correlate_criteria, emit_results, run_sweep, spearman, SweepGrid, SweepResults};
pub use synth::{generate, SyntheticGroundTruth, SyntheticSpec};
