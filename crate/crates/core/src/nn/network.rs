use super::layer::{run_layers, Layer, LayerKind};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Anything that maps a samples-first batch to class probabilities.
pub trait Model: Sync {
    fn model_id(&self) -> &str;

    /// Per-sample input shape, without the batch axis.
    fn input_shape(&self) -> &[usize];

    fn class_labels(&self) -> &[String];

    fn layers(&self) -> Box<dyn Iterator<Item = &Layer> + '_>;

    /// Product of per-joint CKA scores; 1 for an unstitched network.
    fn overall_cka(&self) -> f64 {
        1.0
    }

    fn num_params(&self) -> usize {
        self.layers().map(Layer::num_params).sum()
    }

    /// Fragments a stitched model was assembled from; `None` for a plain
    /// network.
    fn fragment_count(&self) -> Option<usize> {
        None
    }

    /// Width of the flat per-sample output.
    fn output_width(&self) -> Result<usize> {
        let mut shape = self.input_shape().to_vec();
        for l in self.layers() {
            shape = l.output_shape(&shape)?;
        }
        match shape.as_slice() {
            &[k] => Ok(k),
            other => Err(Error::dim(format!(
                "'{}' produces per-sample shape {other:?}, not class scores",
                self.model_id()
            ))),
        }
    }

    fn forward(&self, batch: &Tensor) -> Result<Tensor> {
        check_batch(self.model_id(), self.input_shape(), batch)?;
        run_layers(self.layers(), batch)
    }
}

pub(crate) fn check_batch(id: &str, input_shape: &[usize], batch: &Tensor) -> Result<()> {
    if batch.shape().get(1..) != Some(input_shape) {
        return Err(Error::dim(format!(
            "'{id}' expects per-sample input {input_shape:?}, got batch {:?}",
            batch.shape()
        )));
    }
    Ok(())
}

/// A sequential network: the unit trained by the zoo and cut into fragments.
#[derive(Clone, Debug, PartialEq)]
pub struct Network {
    id: String,
    input_shape: Vec<usize>,
    layers: Vec<Layer>,
    class_labels: Vec<String>,
}

impl Network {
    /// Validates the layer chain with a static shape pass.
    pub fn new(
        id: impl Into<String>,
        input_shape: Vec<usize>,
        layers: Vec<Layer>,
        class_labels: Vec<String>,
    ) -> Result<Self> {
        let net = Self {
            id: id.into(),
            input_shape,
            layers,
            class_labels,
        };
        net.validate()?;
        Ok(net)
    }

    fn validate(&self) -> Result<()> {
        if self.id.is_empty() || self.id.chars().any(char::is_whitespace) {
            return Err(Error::Config(format!(
                "network id '{}' must be non-empty without whitespace",
                self.id
            )));
        }
        if self.layers.is_empty() {
            return Err(Error::Config(format!("network '{}' has no layers", self.id)));
        }
        let last = self.layers.len() - 1;
        if let Some(i) = self
            .layers
            .iter()
            .position(|l| matches!(l.kind, LayerKind::Softmax))
        {
            if i != last {
                return Err(Error::Config(format!(
                    "network '{}': softmax may only be the final layer",
                    self.id
                )));
            }
        }
        let out = self.shape_at(self.layers.len())?;
        if !self.class_labels.is_empty() && out != [self.class_labels.len()] {
            return Err(Error::Config(format!(
                "network '{}' outputs {out:?} but has {} class labels",
                self.id,
                self.class_labels.len()
            )));
        }
        Ok(())
    }

    pub fn id(&self) -> &str {
        &self.id
    }

    pub fn layer_list(&self) -> &[Layer] {
        &self.layers
    }

    pub fn into_parts(self) -> (String, Vec<usize>, Vec<Layer>, Vec<String>) {
        (self.id, self.input_shape, self.layers, self.class_labels)
    }

    /// Per-sample activation shape entering layer `index` (`index == len`
    /// gives the output shape).
    pub fn shape_at(&self, index: usize) -> Result<Vec<usize>> {
        if index > self.layers.len() {
            return Err(Error::OutOfRange(format!(
                "layer index {index} of {} in '{}'",
                self.layers.len(),
                self.id
            )));
        }
        let mut shape = self.input_shape.clone();
        for layer in &self.layers[..index] {
            shape = layer.output_shape(&shape)?;
        }
        Ok(shape)
    }

    /// Indices of the linear and convolution layers.
    pub fn trainable_indices(&self) -> Vec<usize> {
        self.layers
            .iter()
            .enumerate()
            .filter(|(_, l)| l.is_trainable())
            .map(|(i, _)| i)
            .collect()
    }

    /// Activation after executing layers `[0, layer_index)`.
    pub fn forward_upto(&self, layer_index: usize, batch: &Tensor) -> Result<Tensor> {
        if layer_index > self.layers.len() {
            return Err(Error::OutOfRange(format!(
                "layer index {layer_index} of {} in '{}'",
                self.layers.len(),
                self.id
            )));
        }
        check_batch(&self.id, &self.input_shape, batch)?;
        run_layers(&self.layers[..layer_index], batch)
    }

    /// Same network with a different id.
    pub fn with_id(mut self, id: impl Into<String>) -> Result<Self> {
        self.id = id.into();
        self.validate()?;
        Ok(self)
    }
}

impl Model for Network {
    fn model_id(&self) -> &str {
        &self.id
    }

    fn input_shape(&self) -> &[usize] {
        &self.input_shape
    }

    fn class_labels(&self) -> &[String] {
        &self.class_labels
    }

    fn layers(&self) -> Box<dyn Iterator<Item = &Layer> + '_> {
        Box::new(self.layers.iter())
    }
}

/// Free-function form of [`Model::forward`].
pub fn forward(model: &dyn Model, batch: &Tensor) -> Result<Tensor> {
    model.forward(batch)
}
