//! Experiment grids: config files, split × algorithm runs, rank summaries.

mod config;
mod ranks;
mod run;

pub use config::{AlgorithmSpec, DatasetSource, ExperimentConfig, Preprocess, SourceFormat};
pub use ranks::{average_ranks, summarize_ranks, RankRow, RankSummary, RANK_CUTOFF};
pub use run::{
    build_splits, cell_dir, cell_seed, load_base_split, read_manifests, read_metrics, run_experiment,
    run_experiment_on, tune_algorithm, CellOutcome, CellRecord, CellStatus, RunSummary, BASE_SPLIT_NAME,
};
