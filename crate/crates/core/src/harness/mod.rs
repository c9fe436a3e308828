//! Experiment drivers: construction sweeps, order sensitivity, the ICL
//! versus GD comparison grid, pretraining evolution and demonstration scaling.

pub mod checks;
pub mod config;
pub mod experiments;
pub mod plot;
pub mod suite;

pub use checks::CheckOutcome;
pub use config::{ConstructionSpec, ExperimentConfig, ExperimentKind, PretrainSpec, ScalingSpec};
pub use experiments::{
    checkpoint_accuracies, direct_distributions, evolution_rows, icl_distributions, run_comparison_grid,
    run_demo_scaling, run_evolution, run_order_experiment, run_pretrain, sen_over_queries,
};
pub use plot::{plot_rows, write_plot_csv, PlotRow};
pub use suite::{run_construction_suite, run_sparsity_sweep, write_sparsity_csv, ConstructionSuite, SparsityRow};
