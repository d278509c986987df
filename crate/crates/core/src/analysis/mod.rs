//! Activation capture, structural probes, induction measurements and
//! scaling-law fits.

pub mod induction;
pub mod probe;
pub mod scaling;
pub mod stats;
pub mod trace;

pub use induction::{copy_match_model, induction_score, InductionScore};
pub use probe::{
    path_graph_fixture, probe_eval, probe_examples, shuffle_trees, train_structural_probe, ProbeConfig,
    ProbeExample, ProbeScore, StructuralProbe,
};
pub use scaling::{fit_power_law, fit_scaling, log_grid, scaling_law, synthetic_points, ScalingFit, ScalingPoint};
pub use trace::{capture_activations, layer_labels, ActivationTrace, AttentionMap};
