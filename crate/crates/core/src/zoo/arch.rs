use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};
use crate::nn::{Layer, LayerKind, Network};
use crate::tensor::Tensor;

/// One layer of an architecture before weights exist.
#[derive(Clone, Debug, PartialEq)]
pub enum LayerSpec {
    Conv { out: usize, kernel: usize, padding: usize },
    Linear { out: usize },
    ReLU,
    MaxPool { kernel: usize },
    AvgPool,
    Flatten,
    Softmax,
}

/// A named layer recipe that can be instantiated against an input shape.
#[derive(Clone, Debug, PartialEq)]
pub struct ArchSpec {
    pub name: String,
    pub layers: Vec<LayerSpec>,
}

fn conv(out: usize, kernel: usize) -> LayerSpec {
    LayerSpec::Conv {
        out,
        kernel,
        padding: kernel / 2,
    }
}

impl ArchSpec {
    /// Two conv blocks, global pooling, two linear layers.
    pub fn cnn_a(classes: usize) -> Self {
        use LayerSpec::*;
        Self {
            name: "cnn_a".into(),
            layers: vec![
                conv(8, 5), ReLU, MaxPool { kernel: 2 },
                conv(16, 3), ReLU, MaxPool { kernel: 2 },
                AvgPool, Flatten,
                Linear { out: 16 }, ReLU,
                Linear { out: classes }, Softmax,
            ],
        }
    }

    /// Four narrow convs in two stages, then two linear layers.
    pub fn cnn_b(classes: usize) -> Self {
        use LayerSpec::*;
        Self {
            name: "cnn_b".into(),
            layers: vec![
                conv(6, 3), ReLU,
                conv(8, 3), ReLU, MaxPool { kernel: 2 },
                conv(12, 3), ReLU,
                conv(16, 3), ReLU, MaxPool { kernel: 2 },
                AvgPool, Flatten,
                Linear { out: 12 }, ReLU,
                Linear { out: classes }, Softmax,
            ],
        }
    }

    /// Fully connected on raw pixels.
    pub fn mlp_c(classes: usize) -> Self {
        use LayerSpec::*;
        Self {
            name: "mlp_c".into(),
            layers: vec![
                Flatten,
                Linear { out: 24 }, ReLU,
                Linear { out: 20 }, ReLU,
                Linear { out: 16 }, ReLU,
                Linear { out: 12 }, ReLU,
                Linear { out: classes }, Softmax,
            ],
        }
    }

    /// The three architectures of the default zoo.
    pub fn desk_zoo(classes: usize) -> Vec<Self> {
        vec![Self::cnn_a(classes), Self::cnn_b(classes), Self::mlp_c(classes)]
    }

    pub fn by_name(name: &str, classes: usize) -> Result<Self> {
        match name {
            "cnn_a" => Ok(Self::cnn_a(classes)),
            "cnn_b" => Ok(Self::cnn_b(classes)),
            "mlp_c" => Ok(Self::mlp_c(classes)),
            other => Err(Error::Config(format!(
                "unknown architecture '{other}' (expected cnn_a, cnn_b or mlp_c)"
            ))),
        }
    }

    /// Builds a network with He-normal weights and zero biases.
    pub fn init(
        &self,
        id: &str,
        input_shape: &[usize],
        class_labels: Vec<String>,
        seed: u64,
    ) -> Result<Network> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut shape = input_shape.to_vec();
        let mut layers = Vec::with_capacity(self.layers.len());
        let (mut n_conv, mut n_fc, mut n_other) = (0, 0, 0);
        for spec in &self.layers {
            let layer = match *spec {
                LayerSpec::Conv {
                    out,
                    kernel,
                    padding,
                } => {
                    let &[c, ..] = shape.as_slice() else {
                        return Err(Error::dim(format!("{}: conv needs C×H×W input", self.name)));
                    };
                    n_conv += 1;
                    let w = he_normal(&mut rng, &[out, c, kernel, kernel], c * kernel * kernel);
                    Layer::conv2d(format!("conv{n_conv}"), w, Tensor::zeros(&[out]), 1, padding)?
                }
                LayerSpec::Linear { out } => {
                    let fan_in: usize = shape.iter().product();
                    n_fc += 1;
                    let w = he_normal(&mut rng, &[out, fan_in], fan_in);
                    Layer::linear(format!("fc{n_fc}"), w, Tensor::zeros(&[out]))?
                }
                ref other => {
                    n_other += 1;
                    let kind = match other {
                        LayerSpec::ReLU => LayerKind::ReLU,
                        LayerSpec::MaxPool { kernel } => LayerKind::MaxPool2d {
                            kernel: *kernel,
                            stride: *kernel,
                        },
                        LayerSpec::AvgPool => LayerKind::AdaptiveAvgPool1x1,
                        LayerSpec::Flatten => LayerKind::Flatten,
                        LayerSpec::Softmax => LayerKind::Softmax,
                        LayerSpec::Conv { .. } | LayerSpec::Linear { .. } => unreachable!(),
                    };
                    Layer::new(format!("{}{n_other}", short_name(&kind)), kind)?
                }
            };
            shape = layer.output_shape(&shape)?;
            layers.push(layer);
        }
        Network::new(id, input_shape.to_vec(), layers, class_labels)
    }
}

fn short_name(kind: &LayerKind) -> &'static str {
    match kind {
        LayerKind::ReLU => "relu",
        LayerKind::MaxPool2d { .. } => "pool",
        LayerKind::AdaptiveAvgPool1x1 => "gap",
        LayerKind::Flatten => "flat",
        LayerKind::Softmax => "softmax",
        _ => "layer",
    }
}

pub(crate) fn he_normal(rng: &mut ChaCha8Rng, shape: &[usize], fan_in: usize) -> Tensor {
    let dist = Normal::new(0.0, (2.0 / fan_in as f64).sqrt()).expect("positive fan-in");
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| dist.sample(rng)).collect())
        .expect("normal samples are finite")
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::fragmentize;

    #[test]
    fn desk_zoo_has_fifteen_fragments() {
        let labels: Vec<String> = (0..8).map(|i| i.to_string()).collect();
        let counts: Vec<usize> = ArchSpec::desk_zoo(8)
            .iter()
            .map(|a| {
                let net = a.init(&a.name, &[1, 16, 16], labels.clone(), 1).unwrap();
                fragmentize(&net).unwrap().len()
            })
            .collect();
        assert_eq!(counts, vec![4, 6, 5]);
    }

    #[test]
    fn init_is_seeded() {
        let labels: Vec<String> = (0..3).map(|i| i.to_string()).collect();
        let a = ArchSpec::cnn_a(3);
        let n1 = a.init("x", &[1, 8, 8], labels.clone(), 5).unwrap();
        let n2 = a.init("x", &[1, 8, 8], labels.clone(), 5).unwrap();
        let n3 = a.init("x", &[1, 8, 8], labels, 6).unwrap();
        assert_eq!(n1, n2);
        assert_ne!(n1, n3);
        assert!(ArchSpec::by_name("resnet", 3).is_err());
    }
}
