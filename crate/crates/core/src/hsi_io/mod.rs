//! Cube and label file formats, synthetic scenes and classification-map images.

mod cube;
mod ppm;
mod synth;

pub(crate) use cube::Reader;
pub use cube::{read_pair, HsiCube, LabelMap, CUBE_MAGIC, FORMAT_VERSION, LABEL_MAGIC};
pub use ppm::{emit_class_map, encode_class_map, Palette};
pub use synth::{synth_scene, SynthScene, SynthSpec, MIN_MEAN_SEPARATION};
