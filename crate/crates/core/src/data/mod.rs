//! Windowed datasets, normalization, scenario construction and the synthetic
//! generator.

mod dataset;
mod io;
mod scenario;
mod synth;

pub use dataset::{class_weights, normalize, Dataset, NormStats, Split, STD_FLOOR};
pub use io::{
    import_csv, load_dataset, read_dataset, save_dataset, write_dataset, DATASET_MAGIC,
    DATASET_VERSION,
};
pub use scenario::{make_scenario, Scenario, TaskSplit};
pub use synth::{synth_generate, SynthSpec};
