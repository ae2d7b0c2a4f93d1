//! Tensor contract, synthetic events, datasets and climatology.

mod climatology;
mod io;
mod synth;
mod types;

pub use climatology::{compute_climatology, ClimatologyMap};
pub use io::{dataset_path, list_dataset_files, load_dataset, save_dataset, DatasetHandle, DATASET_EXT};
pub use synth::{
    derive_seed, generate_event_with, generate_synthetic_event, synth_dataset, SplitSynth, SynthOptions,
    DEFAULT_RATE_THRESHOLD,
};
pub use types::{concat, merge_train_val, ContextTensor, Dataset, ProbCube, RainCube, Sample, SampleMeta, Split};
