//! The small source networks stitching draws on: a procedural image dataset,
//! label remapping for subtasks, SGD training with hand-written backprop, and
//! a last-layer fine-tuning baseline.

mod arch;
mod data;
mod train;

pub use arch::{ArchSpec, LayerSpec};
pub use data::{
    apply_label_map, decode_dataset, encode_dataset, load_dataset, make_synthetic_dataset,
    save_dataset, train_test_split, Dataset, LabelMap, Split,
};
pub use train::{
    finetune_last_layer, loss_and_gradients, train_network, CurvePoint, LayerGrad, TrainConfig,
    Trained,
};
