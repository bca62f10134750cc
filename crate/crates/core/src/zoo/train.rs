use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::arch::{he_normal, ArchSpec};
use super::data::Dataset;
use crate::error::{Error, Result};
use crate::nn::{run_layers, Layer, LayerKind, Model, Network};
use crate::tensor::{self, Tensor};

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct TrainConfig {
    pub epochs: usize,
    pub lr: f64,
    pub momentum: f64,
    pub batch_size: usize,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 10,
            lr: 0.001,
            momentum: 0.9,
            batch_size: 32,
            seed: 0,
        }
    }
}

impl TrainConfig {
    fn check(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(Error::Config("batch size must be positive".into()));
        }
        if !(self.lr.is_finite() && self.lr >= 0.0) || !(0.0..1.0).contains(&self.momentum) {
            return Err(Error::Config(format!(
                "need lr ≥ 0 and momentum in [0, 1), got lr={} momentum={}",
                self.lr, self.momentum
            )));
        }
        Ok(())
    }
}

/// A trained network and its mean training loss per epoch.
#[derive(Clone, Debug)]
pub struct Trained {
    pub network: Network,
    pub loss_trace: Vec<f64>,
}

/// Gradients of one trainable layer, shaped like its parameters.
#[derive(Clone, Debug, PartialEq)]
pub struct LayerGrad {
    pub layer_index: usize,
    pub weight: Tensor,
    pub bias: Tensor,
}

fn check_classifier(layers: &[Layer]) -> Result<()> {
    match layers.last() {
        Some(Layer {
            kind: LayerKind::Softmax,
            ..
        }) if layers.len() >= 2 => Ok(()),
        _ => Err(Error::Config(
            "training needs a classifier ending in a softmax layer".into(),
        )),
    }
}

/// Flattened (weight, bias) gradients, `None` for layers outside the mask.
type MaskedGrads = Vec<Option<(Vec<f64>, Vec<f64>)>>;

/// Mean cross-entropy of the softmax outputs and its gradient with respect
/// to every trainable layer in `mask`.
fn forward_backward(
    layers: &[Layer],
    mask: &[bool],
    x: &Tensor,
    labels: &[usize],
) -> Result<(f64, MaskedGrads)> {
    let last = layers.len() - 1;
    let mut inputs = Vec::with_capacity(last);
    let mut cur = x.clone();
    for layer in &layers[..last] {
        let next = layer.forward(&cur)?;
        inputs.push(cur);
        cur = next;
    }
    let (n, k) = cur.as_matrix_dims()?;
    if labels.len() != n {
        return Err(Error::dim(format!("{n} samples but {} labels", labels.len())));
    }
    // Softmax and cross-entropy fused: dL/dz = (p − onehot) / n.
    let mut loss = 0.0;
    let mut dz = vec![0.0; n * k];
    for (i, row) in cur.data().chunks(k).enumerate() {
        let label = labels[i];
        if label >= k {
            return Err(Error::Config(format!("label {label} outside {k} outputs")));
        }
        let m = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let z: f64 = row.iter().map(|v| (v - m).exp()).sum();
        loss += z.ln() + m - row[label];
        for (j, v) in row.iter().enumerate() {
            let p = (v - m).exp() / z;
            dz[i * k + j] = (p - f64::from(u8::from(j == label))) / n as f64;
        }
    }
    loss /= n as f64;

    let lowest = mask.iter().position(|&m| m).unwrap_or(last);
    let mut grads = vec![None; layers.len()];
    let mut dy = dz;
    for i in (lowest..last).rev() {
        let (dx, g) = layer_backward(&layers[i], &inputs[i], &dy, i > lowest)?;
        if mask[i] {
            grads[i] = g;
        }
        if let Some(dx) = dx {
            dy = dx;
        }
    }
    Ok((loss, grads))
}

/// Backward pass of a single layer given its input and the gradient of its
/// output. Returns the input gradient (when asked) and parameter gradients.
#[allow(clippy::type_complexity)]
fn layer_backward(
    layer: &Layer,
    input: &Tensor,
    dy: &[f64],
    need_dx: bool,
) -> Result<(Option<Vec<f64>>, Option<(Vec<f64>, Vec<f64>)>)> {
    let xd = input.data();
    match &layer.kind {
        LayerKind::Linear { weight, .. } => {
            let (n, inp) = input.as_matrix_dims()?;
            let out = weight.shape()[0];
            let wd = weight.data();
            let mut dw = vec![0.0; out * inp];
            let mut db = vec![0.0; out];
            for s in 0..n {
                let xrow = &xd[s * inp..(s + 1) * inp];
                for o in 0..out {
                    let g = dy[s * out + o];
                    db[o] += g;
                    for (d, xv) in dw[o * inp..(o + 1) * inp].iter_mut().zip(xrow) {
                        *d += g * xv;
                    }
                }
            }
            let dx = need_dx.then(|| {
                let mut dx = vec![0.0; n * inp];
                for s in 0..n {
                    for o in 0..out {
                        let g = dy[s * out + o];
                        for (d, wv) in dx[s * inp..(s + 1) * inp].iter_mut().zip(&wd[o * inp..]) {
                            *d += g * wv;
                        }
                    }
                }
                dx
            });
            Ok((dx, Some((dw, db))))
        }
        LayerKind::Conv2d {
            weight,
            stride,
            padding,
            ..
        } => {
            let &[n, c, h, w] = input.shape() else {
                return Err(Error::dim("conv backward needs N×C×H×W"));
            };
            let &[o, _, kh, kw] = weight.shape() else {
                unreachable!("conv weights are 4-D")
            };
            let (oh, ow) = tensor::conv2d_output_size(h, w, kh, kw, *stride, *padding)?;
            let wd = weight.data();
            let mut dw = vec![0.0; wd.len()];
            let mut db = vec![0.0; o];
            let mut dx = if need_dx { vec![0.0; xd.len()] } else { Vec::new() };
            let pad = *padding as isize;
            for ni in 0..n {
                for oc in 0..o {
                    for y in 0..oh {
                        for xo in 0..ow {
                            let g = dy[((ni * o + oc) * oh + y) * ow + xo];
                            if g == 0.0 {
                                continue;
                            }
                            db[oc] += g;
                            let iy0 = (y * stride) as isize - pad;
                            let ix0 = (xo * stride) as isize - pad;
                            for ci in 0..c {
                                let xbase = (ni * c + ci) * h * w;
                                let wbase = (oc * c + ci) * kh * kw;
                                for ky in 0..kh {
                                    let iy = iy0 + ky as isize;
                                    if iy < 0 || iy >= h as isize {
                                        continue;
                                    }
                                    for kx in 0..kw {
                                        let ix = ix0 + kx as isize;
                                        if ix < 0 || ix >= w as isize {
                                            continue;
                                        }
                                        let xi = xbase + iy as usize * w + ix as usize;
                                        let wi = wbase + ky * kw + kx;
                                        dw[wi] += g * xd[xi];
                                        if need_dx {
                                            dx[xi] += g * wd[wi];
                                        }
                                    }
                                }
                            }
                        }
                    }
                }
            }
            Ok((need_dx.then_some(dx), Some((dw, db))))
        }
        LayerKind::ReLU => Ok((
            need_dx.then(|| {
                xd.iter()
                    .zip(dy)
                    .map(|(&x, &g)| if x > 0.0 { g } else { 0.0 })
                    .collect()
            }),
            None,
        )),
        LayerKind::MaxPool2d { kernel, stride } => {
            if !need_dx {
                return Ok((None, None));
            }
            let (_, idx) = tensor::max_pool2d_with_indices(input, *kernel, *stride)?;
            let mut dx = vec![0.0; xd.len()];
            for (&i, &g) in idx.iter().zip(dy) {
                dx[i] += g;
            }
            Ok((Some(dx), None))
        }
        LayerKind::AdaptiveAvgPool1x1 => {
            let plane = input.shape()[2] * input.shape()[3];
            Ok((
                need_dx.then(|| {
                    dy.iter()
                        .flat_map(|&g| std::iter::repeat_n(g / plane as f64, plane))
                        .collect()
                }),
                None,
            ))
        }
        LayerKind::Flatten => Ok((need_dx.then(|| dy.to_vec()), None)),
        LayerKind::Softmax | LayerKind::Resize { .. } => Err(Error::Config(format!(
            "layer '{}' ({}) cannot be trained through",
            layer.name,
            layer.kind_name()
        ))),
    }
}

/// Mean cross-entropy and the gradient of every trainable layer.
pub fn loss_and_gradients(
    net: &Network,
    batch: &Tensor,
    labels: &[usize],
) -> Result<(f64, Vec<LayerGrad>)> {
    let layers = net.layer_list();
    check_classifier(layers)?;
    let mask: Vec<bool> = layers.iter().map(Layer::is_trainable).collect();
    let (loss, grads) = forward_backward(layers, &mask, batch, labels)?;
    let out = grads
        .into_iter()
        .enumerate()
        .filter_map(|(i, g)| {
            let (dw, db) = g?;
            let p = layers[i].params();
            Some(LayerGrad {
                layer_index: i,
                weight: Tensor::new(p[0].shape().to_vec(), dw).ok()?,
                bias: Tensor::new(p[1].shape().to_vec(), db).ok()?,
            })
        })
        .collect();
    Ok((loss, out))
}

/// SGD with momentum: `v ← μv + g`, `θ ← θ − lr·v`.
struct Sgd {
    velocity: Vec<Option<(Vec<f64>, Vec<f64>)>>,
    lr: f64,
    momentum: f64,
}

impl Sgd {
    fn new(layers: &[Layer], cfg: &TrainConfig) -> Self {
        Self {
            velocity: layers
                .iter()
                .map(|l| {
                    let p = l.params();
                    (!p.is_empty()).then(|| (vec![0.0; p[0].len()], vec![0.0; p[1].len()]))
                })
                .collect(),
            lr: cfg.lr,
            momentum: cfg.momentum,
        }
    }

    fn step(&mut self, layers: &mut [Layer], grads: &[Option<(Vec<f64>, Vec<f64>)>]) -> Result<()> {
        for (i, g) in grads.iter().enumerate() {
            let (Some((gw, gb)), Some((vw, vb))) = (g, self.velocity[i].as_mut()) else {
                continue;
            };
            let (weight, bias) = match &mut layers[i].kind {
                LayerKind::Linear { weight, bias } | LayerKind::Conv2d { weight, bias, .. } => {
                    (weight, bias)
                }
                _ => continue,
            };
            for (param, vel, grad) in [(weight, vw, gw), (bias, vb, gb)] {
                for ((p, v), g) in param.data_mut().iter_mut().zip(vel.iter_mut()).zip(grad) {
                    *v = self.momentum * *v + g;
                    *p -= self.lr * *v;
                }
                if param.data().iter().any(|v| !v.is_finite()) {
                    return Err(Error::Numeric(format!(
                        "layer '{}' weights became non-finite",
                        layers[i].name
                    )));
                }
            }
        }
        Ok(())
    }
}

fn batch_of(images: &Tensor, labels: &[usize], idx: &[usize]) -> Result<(Tensor, Vec<usize>)> {
    Ok((images.select_samples(idx)?, idx.iter().map(|&i| labels[i]).collect()))
}

/// Trains all layers of `layers` for `cfg.epochs` epochs; returns the mean
/// loss of each epoch.
fn train_layers(
    layers: &mut [Layer],
    mask: &[bool],
    images: &Tensor,
    labels: &[usize],
    cfg: &TrainConfig,
) -> Result<Vec<f64>> {
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut sgd = Sgd::new(layers, cfg);
    let mut order: Vec<usize> = (0..labels.len()).collect();
    let mut trace = Vec::with_capacity(cfg.epochs);
    for epoch in 0..cfg.epochs {
        order.shuffle(&mut rng);
        let mut total = 0.0;
        for chunk in order.chunks(cfg.batch_size) {
            let (xb, yb) = batch_of(images, labels, chunk)?;
            let diverged = |message: String| Error::Diverged { epoch, message };
            let (loss, grads) =
                forward_backward(layers, mask, &xb, &yb).map_err(|e| diverged(e.to_string()))?;
            if !loss.is_finite() {
                return Err(diverged(format!("loss became {loss}")));
            }
            total += loss * chunk.len() as f64;
            sgd.step(layers, &grads).map_err(|e| diverged(e.to_string()))?;
        }
        trace.push(total / labels.len() as f64);
        log::debug!("epoch {epoch}: loss {:.5}", trace[epoch]);
    }
    Ok(trace)
}

/// Initializes `arch` from `cfg.seed` and trains every layer by SGD with
/// momentum on softmax cross-entropy. Zero epochs returns the initial
/// network.
pub fn train_network(arch: &ArchSpec, id: &str, data: &Dataset, cfg: &TrainConfig) -> Result<Trained> {
    cfg.check()?;
    let net = arch.init(id, data.sample_shape(), data.class_names().to_vec(), cfg.seed)?;
    let out_width = net.shape_at(net.layer_list().len())?;
    if out_width != [data.num_classes()] {
        return Err(Error::Config(format!(
            "architecture '{}' outputs {out_width:?} but the dataset has {} classes",
            arch.name,
            data.num_classes()
        )));
    }
    let (id, input_shape, mut layers, labels) = net.into_parts();
    check_classifier(&layers)?;
    let mask: Vec<bool> = layers.iter().map(Layer::is_trainable).collect();
    let trace = train_layers(&mut layers, &mask, data.images(), data.labels(), cfg)?;
    Ok(Trained {
        network: Network::new(id, input_shape, layers, labels)?,
        loss_trace: trace,
    })
}

/// Test accuracy after a given number of training samples.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct CurvePoint {
    pub samples: usize,
    pub accuracy: f64,
}

/// Replaces the final linear layer with a freshly initialized head sized for
/// `train`'s classes, then trains only that head on `budget` samples. Test
/// accuracy is recorded before training and every `cfg.batch_size` samples.
pub fn finetune_last_layer(
    network: &Network,
    train: &Dataset,
    test: &Dataset,
    budget: usize,
    cfg: &TrainConfig,
) -> Result<(Network, Vec<CurvePoint>)> {
    cfg.check()?;
    let layers = network.layer_list();
    check_classifier(layers)?;
    let head = layers.len() - 2;
    let LayerKind::Linear { weight, .. } = &layers[head].kind else {
        return Err(Error::Config(format!(
            "'{}' does not end in linear + softmax",
            network.id()
        )));
    };
    if test.class_names() != train.class_names() {
        return Err(Error::Config("train and test sets use different classes".into()));
    }
    let (k, fan_in) = (train.num_classes(), weight.shape()[1]);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut head_layers = vec![
        Layer::linear(
            layers[head].name.clone(),
            he_normal(&mut rng, &[k, fan_in], fan_in),
            Tensor::zeros(&[k]),
        )?,
        layers[head + 1].clone(),
    ];
    // The body is frozen, so its features are computed once.
    let body = &layers[..head];
    let train_x = run_layers(body, train.images())?;
    let test_x = run_layers(body, test.images())?;
    let accuracy = |hl: &[Layer]| -> Result<f64> {
        let probs = run_layers(hl, &test_x)?;
        Ok(crate::eval::accuracy_of(&probs, test.labels()))
    };

    let mask = [true, false];
    let mut sgd = Sgd::new(&head_layers, cfg);
    let mut curve = vec![CurvePoint {
        samples: 0,
        accuracy: accuracy(&head_layers)?,
    }];
    let mut order: Vec<usize> = (0..train.len()).collect();
    let mut seen = 0;
    let mut epoch = 0;
    while seen < budget {
        order.shuffle(&mut rng);
        for chunk in order.chunks(cfg.batch_size) {
            let take = chunk.len().min(budget - seen);
            let (xb, yb) = batch_of(&train_x, train.labels(), &chunk[..take])?;
            let diverged = |message: String| Error::Diverged { epoch, message };
            let (loss, grads) = forward_backward(&head_layers, &mask, &xb, &yb)
                .map_err(|e| diverged(e.to_string()))?;
            if !loss.is_finite() {
                return Err(diverged(format!("loss became {loss}")));
            }
            sgd.step(&mut head_layers, &grads).map_err(|e| diverged(e.to_string()))?;
            seen += take;
            curve.push(CurvePoint {
                samples: seen,
                accuracy: accuracy(&head_layers)?,
            });
            if seen >= budget {
                break;
            }
        }
        epoch += 1;
    }
    let mut all = body.to_vec();
    all.extend(head_layers);
    let tuned = Network::new(
        network.id(),
        network.input_shape().to_vec(),
        all,
        train.class_names().to_vec(),
    )?;
    Ok((tuned, curve))
}
