#![allow(dead_code)]

use stitchkit::nn::{FragmentPool, Granularity, Network};
use stitchkit::zoo::{make_synthetic_dataset, ArchSpec, Dataset, LayerSpec};

pub fn data(classes: usize, per_class: usize, size: usize, seed: u64) -> Dataset {
    make_synthetic_dataset(classes, per_class, size, seed).unwrap()
}

pub fn init(arch: &ArchSpec, id: &str, d: &Dataset, seed: u64) -> Network {
    arch.init(id, d.sample_shape(), d.class_names().to_vec(), seed).unwrap()
}

/// Flatten plus three linear layers: cuts into exactly three fragments.
pub fn three_layer(classes: usize) -> ArchSpec {
    use LayerSpec::*;
    ArchSpec {
        name: "tri".into(),
        layers: vec![
            Flatten,
            Linear { out: 12 },
            ReLU,
            Linear { out: 10 },
            ReLU,
            Linear { out: classes },
            Softmax,
        ],
    }
}

/// The three desk architectures, untrained.
pub fn desk_pool(d: &Dataset) -> FragmentPool {
    let nets = ArchSpec::desk_zoo(d.num_classes())
        .iter()
        .enumerate()
        .map(|(i, a)| init(a, &a.name, d, 10 + i as u64))
        .collect();
    FragmentPool::new(nets, Granularity::SingleCut).unwrap()
}
