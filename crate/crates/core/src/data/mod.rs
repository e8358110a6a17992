//! Storage format, recordings and synthetic data.

pub mod dataset;
pub mod synth;
pub mod tensor_file;

pub use dataset::{
    inference_segments, load_split, random_crop, read_recording, split_dataset, split_dir, write_recording, write_split,
    Recording, Split,
};
pub use synth::{synth_generate, synth_to_dir, SyntheticSpec, SPLIT_RATIOS};
pub use tensor_file::{decode, encode, read_tensor, write_tensor, write_tensor_as, Dtype};
