use crate::error::{Error, Result};
use crate::tensor::{self, Tensor};

#[derive(Clone, Debug, PartialEq)]
pub enum LayerKind {
    /// `weight` is out×in, `bias` has length out.
    Linear { weight: Tensor, bias: Tensor },
    /// `weight` is O×C×kh×kw.
    Conv2d {
        weight: Tensor,
        bias: Tensor,
        stride: usize,
        padding: usize,
    },
    ReLU,
    MaxPool2d { kernel: usize, stride: usize },
    AdaptiveAvgPool1x1,
    Flatten,
    Softmax,
    /// Spatial resampling inserted in front of a stitched convolution.
    Resize { height: usize, width: usize },
}

#[derive(Clone, Debug, PartialEq)]
pub struct Layer {
    pub name: String,
    pub kind: LayerKind,
}

impl Layer {
    pub fn new(name: impl Into<String>, kind: LayerKind) -> Result<Self> {
        let layer = Self {
            name: name.into(),
            kind,
        };
        layer.check_params()?;
        Ok(layer)
    }

    pub fn linear(name: impl Into<String>, weight: Tensor, bias: Tensor) -> Result<Self> {
        Self::new(name, LayerKind::Linear { weight, bias })
    }

    pub fn conv2d(
        name: impl Into<String>,
        weight: Tensor,
        bias: Tensor,
        stride: usize,
        padding: usize,
    ) -> Result<Self> {
        Self::new(
            name,
            LayerKind::Conv2d {
                weight,
                bias,
                stride,
                padding,
            },
        )
    }

    pub fn simple(name: impl Into<String>, kind: LayerKind) -> Self {
        Self {
            name: name.into(),
            kind,
        }
    }

    /// Linear and convolution layers: the layers fragments are cut in front of.
    pub fn is_trainable(&self) -> bool {
        matches!(self.kind, LayerKind::Linear { .. } | LayerKind::Conv2d { .. })
    }

    pub fn kind_name(&self) -> &'static str {
        match self.kind {
            LayerKind::Linear { .. } => "linear",
            LayerKind::Conv2d { .. } => "conv2d",
            LayerKind::ReLU => "relu",
            LayerKind::MaxPool2d { .. } => "maxpool2d",
            LayerKind::AdaptiveAvgPool1x1 => "adaptive_avg_pool_1x1",
            LayerKind::Flatten => "flatten",
            LayerKind::Softmax => "softmax",
            LayerKind::Resize { .. } => "resize",
        }
    }

    pub fn num_params(&self) -> usize {
        match &self.kind {
            LayerKind::Linear { weight, bias } | LayerKind::Conv2d { weight, bias, .. } => {
                weight.len() + bias.len()
            }
            _ => 0,
        }
    }

    /// Parameter tensors in declaration order (weight, then bias).
    pub fn params(&self) -> Vec<&Tensor> {
        match &self.kind {
            LayerKind::Linear { weight, bias } | LayerKind::Conv2d { weight, bias, .. } => {
                vec![weight, bias]
            }
            _ => Vec::new(),
        }
    }

    fn check_params(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::dim(format!("layer '{}': {msg}", self.name)));
        match &self.kind {
            LayerKind::Linear { weight, bias } => {
                let (out, _) = weight.as_matrix_dims()?;
                if bias.shape() != [out] {
                    return bad(format!("bias {:?} does not match {out} outputs", bias.shape()));
                }
            }
            LayerKind::Conv2d {
                weight,
                bias,
                stride,
                ..
            } => {
                if weight.rank() != 4 {
                    return bad(format!("conv weight must be O×C×kh×kw, got {:?}", weight.shape()));
                }
                if bias.shape() != [weight.shape()[0]] {
                    return bad(format!("bias {:?} does not match weight", bias.shape()));
                }
                if *stride == 0 {
                    return bad("stride must be positive".into());
                }
            }
            LayerKind::MaxPool2d { kernel, stride } if *kernel == 0 || *stride == 0 => {
                return bad("pool kernel and stride must be positive".into());
            }
            LayerKind::Resize { height, width } if *height == 0 || *width == 0 => {
                return bad("resize target must be positive".into());
            }
            _ => {}
        }
        Ok(())
    }

    /// Per-sample output shape for a per-sample input shape.
    pub fn output_shape(&self, input: &[usize]) -> Result<Vec<usize>> {
        let mismatch = |want: &str| {
            Err(Error::dim(format!(
                "layer '{}' ({}) expects {want}, got per-sample shape {input:?}",
                self.name,
                self.kind_name()
            )))
        };
        match &self.kind {
            LayerKind::Linear { weight, .. } => {
                let (out, inp) = (weight.shape()[0], weight.shape()[1]);
                if input != [inp] {
                    return mismatch(&format!("[{inp}]"));
                }
                Ok(vec![out])
            }
            LayerKind::Conv2d {
                weight,
                stride,
                padding,
                ..
            } => {
                let ws = weight.shape();
                let &[c, h, w] = input else {
                    return mismatch("C×H×W");
                };
                if c != ws[1] {
                    return mismatch(&format!("{} channels", ws[1]));
                }
                let (oh, ow) = tensor::conv2d_output_size(h, w, ws[2], ws[3], *stride, *padding)
                    .map_err(|e| Error::dim(format!("layer '{}': {e}", self.name)))?;
                Ok(vec![ws[0], oh, ow])
            }
            LayerKind::ReLU => Ok(input.to_vec()),
            LayerKind::MaxPool2d { kernel, stride } => {
                let &[c, h, w] = input else {
                    return mismatch("C×H×W");
                };
                let (oh, ow) = tensor::conv2d_output_size(h, w, *kernel, *kernel, *stride, 0)
                    .map_err(|e| Error::dim(format!("layer '{}': {e}", self.name)))?;
                Ok(vec![c, oh, ow])
            }
            LayerKind::AdaptiveAvgPool1x1 => match input {
                &[c, _, _] => Ok(vec![c, 1, 1]),
                _ => mismatch("C×H×W"),
            },
            LayerKind::Flatten => Ok(vec![input.iter().product()]),
            LayerKind::Softmax => match input {
                &[k] => Ok(vec![k]),
                _ => mismatch("a flat vector"),
            },
            LayerKind::Resize { height, width } => match input {
                &[c, _, _] => Ok(vec![c, *height, *width]),
                _ => mismatch("C×H×W"),
            },
        }
    }

    /// Applies the layer to a samples-first batch.
    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        self.output_shape(&x.shape()[1..])?;
        let named = |e: Error| match e {
            Error::Numeric(m) => Error::Numeric(format!("layer '{}': {m}", self.name)),
            Error::Dimension(m) => Error::Dimension(format!("layer '{}': {m}", self.name)),
            other => other,
        };
        match &self.kind {
            LayerKind::Linear { weight, bias } => linear_forward(x, weight, bias).map_err(named),
            LayerKind::Conv2d {
                weight,
                bias,
                stride,
                padding,
            } => tensor::conv2d(x, weight, bias, *stride, *padding).map_err(named),
            LayerKind::ReLU => Ok(tensor::relu(x)),
            LayerKind::MaxPool2d { kernel, stride } => {
                tensor::max_pool2d(x, *kernel, *stride).map_err(named)
            }
            LayerKind::AdaptiveAvgPool1x1 => tensor::adaptive_avg_pool_1x1(x).map_err(named),
            LayerKind::Flatten => Ok(x.flatten_samples()),
            LayerKind::Softmax => tensor::softmax_rows(x).map_err(named),
            LayerKind::Resize { height, width } => {
                tensor::resize_spatial(x, *height, *width).map_err(named)
            }
        }
    }
}

/// `y = x Wᵀ + b` for an N×in batch.
pub(crate) fn linear_forward(x: &Tensor, weight: &Tensor, bias: &Tensor) -> Result<Tensor> {
    let (n, inp) = x.as_matrix_dims()?;
    let (out, win) = weight.as_matrix_dims()?;
    if inp != win {
        return Err(Error::dim(format!(
            "linear expects {win} inputs, got {inp}"
        )));
    }
    let (xd, wd, bd) = (x.data(), weight.data(), bias.data());
    let mut y = Vec::with_capacity(n * out);
    for row in xd.chunks(inp) {
        for (o, wrow) in wd.chunks(inp).enumerate() {
            let mut acc = 0.0;
            for (a, b) in row.iter().zip(wrow) {
                acc += a * b;
            }
            y.push(acc + bd[o]);
        }
    }
    Tensor::from_parts(vec![n, out], y)
}

/// Runs a layer chain over a batch.
pub fn run_layers<'a>(layers: impl IntoIterator<Item = &'a Layer>, batch: &Tensor) -> Result<Tensor> {
    let mut cur = batch.clone();
    for layer in layers {
        cur = layer.forward(&cur)?;
    }
    Ok(cur)
}
