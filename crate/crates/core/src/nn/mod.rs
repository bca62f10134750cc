//! Sequential networks, their layers, and fragments cut from them.

mod format;
mod fragment;
mod layer;
mod network;

pub use format::{decode_network, encode_network, load_network, save_network, PoolManifest, MAGIC};
pub(crate) use format::{parse_f64, parse_shape, parse_usize, read_labels, read_layer, write_layer, ContainerWriter, Cursor, format_shape};
pub use fragment::{fragmentize, fragmentize_all_spans, Fragment, FragmentKind, FragmentPool, Granularity};
#[cfg(test)]
pub(crate) use layer::linear_forward;
pub use layer::{run_layers, Layer, LayerKind};
pub use network::{forward, Model, Network};
