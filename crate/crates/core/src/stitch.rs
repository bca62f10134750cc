//! Joining fragments: a least-squares projection from the incoming
//! fragment's output space to the outgoing fragment's native input space,
//! folded into the outgoing fragment's first layer so the joint adds no
//! runtime parameters.

use std::fmt::Write as _;
use std::path::Path;

use crate::cka::ActivationMatrix;
use crate::error::{Error, Result};
use crate::nn::{
    format_shape, parse_f64, parse_shape, parse_usize, read_labels, read_layer, write_layer,
    ContainerWriter, Cursor, Fragment, FragmentKind, Layer, LayerKind, Model, Network,
};
use crate::tensor::{self, matmul, solve_projection, Tensor};

/// How two fragments meet, decided by the incoming activation's rank and the
/// outgoing fragment's first layer.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum JointKind {
    LinearToLinear,
    /// Spatial axes are resampled to the outgoing layer's native size and
    /// the projection mixes channels only.
    ConvToConv,
    /// The incoming maps are averaged to 1×1 and flattened first.
    ConvToLinear,
}

impl JointKind {
    pub fn classify(incoming: &Tensor, outgoing_first: &Layer) -> Result<Self> {
        match (incoming.rank(), &outgoing_first.kind) {
            (2, LayerKind::Linear { .. }) => Ok(Self::LinearToLinear),
            (4, LayerKind::Conv2d { .. }) => Ok(Self::ConvToConv),
            (4, LayerKind::Linear { .. }) => Ok(Self::ConvToLinear),
            (r, _) => Err(Error::UnsupportedJoint(format!(
                "rank-{r} activation into {} layer '{}'",
                outgoing_first.kind_name(),
                outgoing_first.name
            ))),
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Self::LinearToLinear => "linear-linear",
            Self::ConvToConv => "conv-conv",
            Self::ConvToLinear => "conv-linear",
        }
    }

    fn parse(s: &str) -> Option<Self> {
        match s {
            "linear-linear" => Some(Self::LinearToLinear),
            "conv-conv" => Some(Self::ConvToConv),
            "conv-linear" => Some(Self::ConvToLinear),
            _ => None,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct StitchOptions {
    /// Ridge relative to the mean diagonal of the incoming Gram matrix.
    pub ridge_scale: f64,
    /// Fit an intercept as well and fold it into the outgoing bias.
    pub affine: bool,
}

impl Default for StitchOptions {
    fn default() -> Self {
        Self {
            ridge_scale: tensor::DEFAULT_RIDGE_SCALE,
            affine: false,
        }
    }
}

/// `N×C×H×W` → `C×(N·H·W)`: channels become features, every spatial
/// position of every sample becomes a sample.
fn channels_by_positions(t: &Tensor) -> Result<Tensor> {
    let &[n, c, h, w] = t.shape() else {
        return Err(Error::dim(format!("expected N×C×H×W, got {:?}", t.shape())));
    };
    let plane = h * w;
    let mut out = vec![0.0; c * n * plane];
    let d = t.data();
    for ni in 0..n {
        for ci in 0..c {
            let src = &d[(ni * c + ci) * plane..(ni * c + ci + 1) * plane];
            let dst = ci * n * plane + ni * plane;
            out[dst..dst + plane].copy_from_slice(src);
        }
    }
    Tensor::new(vec![c, n * plane], out)
}

/// Turns raw samples-first activations into the two matrices the projection
/// is fitted on.
pub fn prepare_joint(
    x_raw: &Tensor,
    y_raw: &Tensor,
    kind: JointKind,
) -> Result<(ActivationMatrix, ActivationMatrix)> {
    if x_raw.shape()[0] != y_raw.shape()[0] {
        return Err(Error::dim(format!(
            "joint activations disagree on sample count: {} vs {}",
            x_raw.shape()[0],
            y_raw.shape()[0]
        )));
    }
    match kind {
        JointKind::LinearToLinear => {
            if x_raw.rank() != 2 || y_raw.rank() != 2 {
                return Err(Error::UnsupportedJoint(
                    "linear joint needs N×F activations on both sides".into(),
                ));
            }
            Ok((
                ActivationMatrix::new(x_raw.transpose()?, "incoming")?,
                ActivationMatrix::new(y_raw.transpose()?, "outgoing")?,
            ))
        }
        JointKind::ConvToConv => {
            let (&[_, _, h, w], 4) = (y_raw.shape(), x_raw.rank()) else {
                return Err(Error::UnsupportedJoint(
                    "conv joint needs N×C×H×W activations on both sides".into(),
                ));
            };
            let x = tensor::resize_spatial(x_raw, h, w)?;
            Ok((
                ActivationMatrix::new(channels_by_positions(&x)?, "incoming")?,
                ActivationMatrix::new(channels_by_positions(y_raw)?, "outgoing")?,
            ))
        }
        JointKind::ConvToLinear => {
            if x_raw.rank() != 4 || y_raw.rank() != 2 {
                return Err(Error::UnsupportedJoint(
                    "conv→linear joint needs N×C×H×W in and N×F out".into(),
                ));
            }
            let pooled = tensor::adaptive_avg_pool_1x1(x_raw)?.flatten_samples();
            Ok((
                ActivationMatrix::new(pooled.transpose()?, "incoming")?,
                ActivationMatrix::new(y_raw.transpose()?, "outgoing")?,
            ))
        }
    }
}

/// `W' = W·Aᵀ`. `w` is l×j; `a` is k×j (new input dim × original input dim).
pub fn fuse_linear(w: &Tensor, a: &Tensor) -> Result<Tensor> {
    let (_, j) = w.as_matrix_dims()?;
    let (_, aj) = a.as_matrix_dims()?;
    if aj != j {
        return Err(Error::dim(format!(
            "projection maps into {aj} inputs but the layer takes {j}"
        )));
    }
    matmul(w, &a.transpose()?)
}

/// `W'[o,k,m,n] = Σ_j W[o,j,m,n]·A[k,j]`: each spatial tap's input-channel
/// slice is remixed by the projection.
pub fn fuse_conv(w: &Tensor, a: &Tensor) -> Result<Tensor> {
    let &[o, j, kh, kw] = w.shape() else {
        return Err(Error::dim(format!("conv weight must be 4-D, got {:?}", w.shape())));
    };
    let (k, aj) = a.as_matrix_dims()?;
    if aj != j {
        return Err(Error::dim(format!(
            "projection maps into {aj} channels but the conv takes {j}"
        )));
    }
    let taps = kh * kw;
    let (wd, ad) = (w.data(), a.data());
    let mut out = vec![0.0; o * k * taps];
    for oc in 0..o {
        for kc in 0..k {
            let dst = &mut out[(oc * k + kc) * taps..(oc * k + kc + 1) * taps];
            for jc in 0..j {
                let coef = ad[kc * j + jc];
                let src = &wd[(oc * j + jc) * taps..(oc * j + jc + 1) * taps];
                for (d, s) in dst.iter_mut().zip(src) {
                    *d += s * coef;
                }
            }
        }
    }
    Tensor::new(vec![o, k, kh, kw], out)
}

/// Fitted joint: the projection (outgoing dim × incoming dim) and, for
/// affine fits, the intercept.
#[derive(Clone, Debug)]
pub struct JointFit {
    pub kind: JointKind,
    pub projection: Tensor,
    pub intercept: Option<Vec<f64>>,
}

/// Classifies the joint, prepares both activation matrices and solves for
/// the projection.
pub fn fit_joint(
    x_raw: &Tensor,
    y_raw: &Tensor,
    outgoing_first: &Layer,
    opts: &StitchOptions,
) -> Result<JointFit> {
    let kind = JointKind::classify(x_raw, outgoing_first)?;
    let (xm, ym) = prepare_joint(x_raw, y_raw, kind)?;
    let x = xm.values();
    let ridge = tensor::ridge_for_scale(x, opts.ridge_scale);
    if !opts.affine {
        return Ok(JointFit {
            kind,
            projection: solve_projection(x, ym.values(), ridge)?,
            intercept: None,
        });
    }
    let (p, n) = x.as_matrix_dims()?;
    let mut aug = x.data().to_vec();
    aug.extend(std::iter::repeat_n(1.0, n));
    let full = solve_projection(&Tensor::new(vec![p + 1, n], aug)?, ym.values(), ridge)?;
    let q = full.rows();
    let mut proj = Vec::with_capacity(q * p);
    let mut icpt = Vec::with_capacity(q);
    for row in full.data().chunks(p + 1) {
        proj.extend_from_slice(&row[..p]);
        icpt.push(row[p]);
    }
    Ok(JointFit {
        kind,
        projection: Tensor::new(vec![q, p], proj)?,
        intercept: Some(icpt),
    })
}

/// Folds a fitted joint into the outgoing fragment's first layer.
pub fn fuse_layer(layer: &Layer, fit: &JointFit) -> Result<Layer> {
    let a = fit.projection.transpose()?;
    let kind = match &layer.kind {
        LayerKind::Linear { weight, bias } => {
            let fused = fuse_linear(weight, &a)?;
            let bias = match &fit.intercept {
                None => bias.clone(),
                Some(c) => {
                    let c = Tensor::new(vec![c.len(), 1], c.clone())?;
                    let shift = matmul(weight, &c)?;
                    Tensor::new(
                        bias.shape().to_vec(),
                        bias.data().iter().zip(shift.data()).map(|(b, s)| b + s).collect(),
                    )?
                }
            };
            LayerKind::Linear {
                weight: fused,
                bias,
            }
        }
        LayerKind::Conv2d {
            weight,
            bias,
            stride,
            padding,
        } => {
            let fused = fuse_conv(weight, &a)?;
            let bias = match &fit.intercept {
                None => bias.clone(),
                // Exact away from zero-padded borders.
                Some(c) => {
                    let s = weight.shape();
                    let taps = s[2] * s[3];
                    let shifted = (0..s[0])
                        .map(|o| {
                            let mut acc = bias.data()[o];
                            for (j, cj) in c.iter().enumerate() {
                                let base = (o * s[1] + j) * taps;
                                acc += cj * weight.data()[base..base + taps].iter().sum::<f64>();
                            }
                            acc
                        })
                        .collect();
                    Tensor::new(vec![s[0]], shifted)?
                }
            };
            LayerKind::Conv2d {
                weight: fused,
                bias,
                stride: *stride,
                padding: *padding,
            }
        }
        _ => {
            return Err(Error::UnsupportedJoint(format!(
                "cannot fuse into {} layer '{}'",
                layer.kind_name(),
                layer.name
            )))
        }
    };
    Layer::new(layer.name.clone(), kind)
}

/// One fragment inside a stitched network, with its fused first layer.
#[derive(Clone, Debug, PartialEq)]
pub struct Segment {
    pub source_network_id: String,
    pub start_layer: usize,
    pub end_layer: usize,
    pub kind: FragmentKind,
    /// `None` for the first segment.
    pub joint: Option<JointKind>,
    /// CKA of the joint into this segment; 1 for the first segment.
    pub joint_cka: f64,
    /// Parameter-free resampling inserted in front of the fused layer.
    pub adapter: Vec<Layer>,
    pub layers: Vec<Layer>,
}

impl Segment {
    pub fn span_id(&self) -> String {
        format!("{}[{}:{}]", self.source_network_id, self.start_layer, self.end_layer)
    }

    pub fn overlaps(&self, f: &Fragment) -> bool {
        self.source_network_id == f.source_network_id
            && self.start_layer < f.end_layer
            && f.start_layer < self.end_layer
    }

    fn all_layers(&self) -> impl Iterator<Item = &Layer> {
        self.adapter.iter().chain(&self.layers)
    }
}

/// A network assembled from fragments of other networks.
#[derive(Clone, Debug, PartialEq)]
pub struct StitchNet {
    id: String,
    input_shape: Vec<usize>,
    class_labels: Vec<String>,
    segments: Vec<Segment>,
    cumulative_score: f64,
}

impl StitchNet {
    /// A one-fragment stitch net rooted at a starting fragment, score 1.
    pub fn from_starting(f: &Fragment) -> Result<Self> {
        if !f.kind.is_starting() {
            return Err(Error::Config(format!("fragment {} is not a starting fragment", f.id())));
        }
        Ok(Self {
            id: f.id(),
            input_shape: f.input_shape.clone(),
            class_labels: Vec::new(),
            segments: vec![Segment {
                source_network_id: f.source_network_id.clone(),
                start_layer: f.start_layer,
                end_layer: f.end_layer,
                kind: f.kind,
                joint: None,
                joint_cka: 1.0,
                adapter: Vec::new(),
                layers: f.layers.clone(),
            }],
            cumulative_score: 1.0,
        })
    }

    pub fn segments(&self) -> &[Segment] {
        &self.segments
    }

    pub fn num_fragments(&self) -> usize {
        self.segments.len()
    }

    pub fn cumulative_score(&self) -> f64 {
        self.cumulative_score
    }

    pub fn is_complete(&self) -> bool {
        self.segments.last().is_some_and(|s| s.kind.is_terminating())
    }

    pub fn set_id(&mut self, id: impl Into<String>) {
        self.id = id.into();
    }

    /// Output shape per sample.
    pub fn output_shape(&self) -> Result<Vec<usize>> {
        let mut shape = self.input_shape.clone();
        for l in self.layers() {
            shape = l.output_shape(&shape)?;
        }
        Ok(shape)
    }

    /// `src[a:b]>src[c:d]@cka>…`: fragment spans with the CKA of each joint.
    pub fn provenance(&self) -> String {
        let mut s = String::new();
        for (i, seg) in self.segments.iter().enumerate() {
            if i > 0 {
                s.push('>');
            }
            s.push_str(&seg.span_id());
            if i > 0 {
                let _ = write!(s, "@{:.6}", seg.joint_cka);
            }
        }
        s
    }

    /// Product of per-joint CKA scores recomputed from the segments.
    pub fn joint_score_product(&self) -> f64 {
        self.segments.iter().skip(1).fold(1.0, |acc, s| acc * s.joint_cka)
    }

    /// The layers of the segment currently being extended.
    pub fn last_segment(&self) -> &Segment {
        self.segments.last().expect("stitch nets always hold a starting segment")
    }
}

impl Model for StitchNet {
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
        Box::new(self.segments.iter().flat_map(Segment::all_layers))
    }

    fn overall_cka(&self) -> f64 {
        self.cumulative_score
    }

    fn fragment_count(&self) -> Option<usize> {
        Some(self.segments.len())
    }
}

/// Appends fragment `f` to `q`.
///
/// `x_raw` is `q`'s output on the stitching samples and `y_raw` is the
/// activation `f` receives on the same samples inside its own network. The
/// source fragment is never modified; the fused layer is a new copy.
pub fn stitch(
    q: &StitchNet,
    f: &Fragment,
    source: &Network,
    x_raw: &Tensor,
    y_raw: &Tensor,
    joint_cka: f64,
    opts: &StitchOptions,
) -> Result<StitchNet> {
    if q.is_complete() {
        return Err(Error::Config(format!("{} already ends in a terminating fragment", q.id)));
    }
    if f.kind.is_starting() {
        return Err(Error::Config(format!("cannot append starting fragment {}", f.id())));
    }
    if source.id() != f.source_network_id {
        return Err(Error::Config(format!(
            "fragment {} does not come from network '{}'",
            f.id(),
            source.id()
        )));
    }
    let fit = fit_joint(x_raw, y_raw, f.first_layer(), opts)?;
    let idx = q.segments.len();
    let adapter = match fit.kind {
        JointKind::LinearToLinear => Vec::new(),
        JointKind::ConvToConv => {
            let (h, w) = (f.input_shape[1], f.input_shape[2]);
            if x_raw.shape()[2..] == [h, w] {
                Vec::new()
            } else {
                vec![Layer::simple(
                    format!("stitch{idx}_resize"),
                    LayerKind::Resize { height: h, width: w },
                )]
            }
        }
        JointKind::ConvToLinear => vec![
            Layer::simple(format!("stitch{idx}_pool"), LayerKind::AdaptiveAvgPool1x1),
            Layer::simple(format!("stitch{idx}_flatten"), LayerKind::Flatten),
        ],
    };
    let mut layers = f.layers.clone();
    layers[0] = fuse_layer(&layers[0], &fit)?;

    let mut out = q.clone();
    out.segments.push(Segment {
        source_network_id: f.source_network_id.clone(),
        start_layer: f.start_layer,
        end_layer: f.end_layer,
        kind: f.kind,
        joint: Some(fit.kind),
        joint_cka,
        adapter,
        layers,
    });
    out.cumulative_score = q.cumulative_score * joint_cka;
    out.id = out.provenance();
    if f.kind.is_terminating() {
        out.class_labels = source.class_labels().to_vec();
    }
    // Static check that the fused chain composes.
    out.output_shape()?;
    Ok(out)
}

pub fn encode_stitchnet(net: &StitchNet) -> Result<Vec<u8>> {
    let mut w = ContainerWriter::new("stitchnet");
    if net.id.chars().any(char::is_whitespace) || net.id.is_empty() {
        return Err(Error::Config(format!("stitch net id '{}' is not a single token", net.id)));
    }
    w.line(format!("id {}", net.id));
    w.line(format!("input {}", format_shape(&net.input_shape)));
    w.line(format!("score {}", net.cumulative_score));
    for label in &net.class_labels {
        w.line(format!("label {label}"));
    }
    for seg in &net.segments {
        w.line(format!(
            "segment {} {} {} {} {} {}",
            seg.source_network_id,
            seg.start_layer,
            seg.end_layer,
            seg.kind,
            seg.joint.map_or("none", JointKind::as_str),
            seg.joint_cka
        ));
        for l in &seg.adapter {
            write_layer(&mut w, l, " role=adapter")?;
        }
        for l in &seg.layers {
            write_layer(&mut w, l, "")?;
        }
    }
    Ok(w.finish())
}

pub fn decode_stitchnet(bytes: &[u8]) -> Result<StitchNet> {
    let mut c = Cursor::decode(bytes)?;
    c.expect_kind("stitchnet")?;
    let (off, id, _) = c.expect_line("id")?;
    let id = id.first().cloned().ok_or_else(|| Error::parse(off, "missing id"))?;
    let (off, input, _) = c.expect_line("input")?;
    let input_shape = parse_shape(
        input.first().ok_or_else(|| Error::parse(off, "missing input shape"))?,
        off,
    )?;
    let (off, score, _) = c.expect_line("score")?;
    let cumulative_score = parse_f64(
        score.first().ok_or_else(|| Error::parse(off, "missing score"))?,
        off,
        "score",
    )?;
    let class_labels = read_labels(&mut c);
    let mut segments = Vec::new();
    while !c.is_done() {
        let (off, t, _) = c.expect_line("segment")?;
        if t.len() != 6 {
            return Err(Error::parse(off, "segment line needs 6 fields"));
        }
        let kind = FragmentKind::parse(&t[3])
            .ok_or_else(|| Error::parse(off, format!("unknown fragment kind '{}'", t[3])))?;
        let joint = match t[4].as_str() {
            "none" => None,
            s => Some(
                JointKind::parse(s)
                    .ok_or_else(|| Error::parse(off, format!("unknown joint kind '{s}'")))?,
            ),
        };
        let mut seg = Segment {
            source_network_id: t[0].clone(),
            start_layer: parse_usize(&t[1], off, "segment start")?,
            end_layer: parse_usize(&t[2], off, "segment end")?,
            kind,
            joint,
            joint_cka: parse_f64(&t[5], off, "joint cka")?,
            adapter: Vec::new(),
            layers: Vec::new(),
        };
        while c.peek_keyword() == Some("layer") {
            let (layer, attrs) = read_layer(&mut c)?;
            if attrs.iter().any(|a| a == "role=adapter") {
                seg.adapter.push(layer);
            } else {
                seg.layers.push(layer);
            }
        }
        segments.push(seg);
    }
    if segments.is_empty() {
        return Err(Error::parse(c.offset(), "stitch net has no segments"));
    }
    let net = StitchNet {
        id,
        input_shape,
        class_labels,
        segments,
        cumulative_score,
    };
    net.output_shape()
        .map_err(|e| Error::parse(0, format!("layers do not compose: {e}")))?;
    Ok(net)
}

pub fn save_stitchnet(net: &StitchNet, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    std::fs::write(path, encode_stitchnet(net)?).map_err(|e| Error::io(path, e))
}

pub fn load_stitchnet(path: impl AsRef<Path>) -> Result<StitchNet> {
    let path = path.as_ref();
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_stitchnet(&bytes)
}

/// Either kind of model a `.snet` file can hold.
#[derive(Clone, Debug)]
pub enum SavedModel {
    Network(Network),
    StitchNet(StitchNet),
}

impl SavedModel {
    pub fn as_model(&self) -> &dyn Model {
        match self {
            Self::Network(n) => n,
            Self::StitchNet(s) => s,
        }
    }
}

pub fn load_model(path: impl AsRef<Path>) -> Result<SavedModel> {
    let path = path.as_ref();
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    let c = Cursor::decode(&bytes)?;
    match c.kind.as_str() {
        "network" => crate::nn::decode_network(&bytes).map(SavedModel::Network),
        "stitchnet" => decode_stitchnet(&bytes).map(SavedModel::StitchNet),
        other => Err(Error::parse(0, format!("'{other}' container is not a model"))),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::conv2d;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn rand_t(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
        let n = shape.iter().product();
        Tensor::new(shape.to_vec(), (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap()
    }

    #[test]
    fn fuse_linear_identity_and_swap() {
        let mut rng = ChaCha8Rng::seed_from_u64(31);
        let w = rand_t(&mut rng, &[3, 4]);
        assert!(fuse_linear(&w, &Tensor::eye(4)).unwrap().bit_eq(&w));

        let swap = Tensor::from_rows(&[vec![0.0, 1.0], vec![1.0, 0.0]]).unwrap();
        let fused = fuse_linear(&Tensor::eye(2), &swap).unwrap();
        let v = Tensor::from_rows(&[vec![3.0], vec![5.0]]).unwrap();
        assert_eq!(matmul(&fused, &v).unwrap().data(), &[5.0, 3.0]);
        assert!(fuse_linear(&w, &Tensor::eye(3)).is_err());
    }

    #[test]
    fn fuse_linear_is_project_then_apply() {
        let mut rng = ChaCha8Rng::seed_from_u64(32);
        let w = rand_t(&mut rng, &[3, 5]);
        let a = rand_t(&mut rng, &[4, 5]);
        let v = rand_t(&mut rng, &[4, 1]);
        let fused = matmul(&fuse_linear(&w, &a).unwrap(), &v).unwrap();
        let two_step = matmul(&w, &matmul(&a.transpose().unwrap(), &v).unwrap()).unwrap();
        assert!(fused.max_abs_diff(&two_step) <= 1e-12);
    }

    #[test]
    fn fuse_conv_identity_and_1x1_reduction() {
        let mut rng = ChaCha8Rng::seed_from_u64(33);
        let w = rand_t(&mut rng, &[4, 3, 3, 3]);
        assert!(fuse_conv(&w, &Tensor::eye(3)).unwrap().bit_eq(&w));

        let w1 = rand_t(&mut rng, &[4, 3, 1, 1]);
        let a = rand_t(&mut rng, &[5, 3]);
        let conv = fuse_conv(&w1, &a).unwrap();
        let lin = fuse_linear(&w1.reshape(&[4, 3]).unwrap(), &a).unwrap();
        assert!(conv.reshape(&[4, 5]).unwrap().max_abs_diff(&lin) <= 1e-15);
    }

    #[test]
    fn fuse_conv_is_per_position_projection() {
        let mut rng = ChaCha8Rng::seed_from_u64(34);
        let x = rand_t(&mut rng, &[2, 5, 6, 6]);
        let w = rand_t(&mut rng, &[4, 3, 3, 3]);
        let b = rand_t(&mut rng, &[4]);
        let a = rand_t(&mut rng, &[5, 3]);
        // Project channels at each position: x'[n,j,h,w] = Σ_k A[k,j] x[n,k,h,w].
        let mut xp = vec![0.0; 2 * 3 * 36];
        for n in 0..2 {
            for j in 0..3 {
                for p in 0..36 {
                    let mut acc = 0.0;
                    for k in 0..5 {
                        acc += a.at2(k, j) * x.data()[(n * 5 + k) * 36 + p];
                    }
                    xp[(n * 3 + j) * 36 + p] = acc;
                }
            }
        }
        let xp = Tensor::new(vec![2, 3, 6, 6], xp).unwrap();
        let want = conv2d(&xp, &w, &b, 1, 1).unwrap();
        let got = conv2d(&x, &fuse_conv(&w, &a).unwrap(), &b, 1, 1).unwrap();
        assert!(got.max_abs_diff(&want) <= 1e-10);
    }

    #[test]
    fn prepare_joint_shapes() {
        let mut rng = ChaCha8Rng::seed_from_u64(35);
        let (x, y) = prepare_joint(
            &rand_t(&mut rng, &[6, 4]),
            &rand_t(&mut rng, &[6, 7]),
            JointKind::LinearToLinear,
        )
        .unwrap();
        assert_eq!((x.features(), x.samples(), y.features()), (4, 6, 7));

        let (x, y) = prepare_joint(
            &rand_t(&mut rng, &[2, 3, 8, 8]),
            &rand_t(&mut rng, &[2, 5, 4, 4]),
            JointKind::ConvToConv,
        )
        .unwrap();
        assert_eq!(x.values().shape(), &[3, 32]);
        assert_eq!(y.values().shape(), &[5, 32]);

        let (x, _) = prepare_joint(
            &rand_t(&mut rng, &[2, 3, 8, 8]),
            &rand_t(&mut rng, &[2, 9]),
            JointKind::ConvToLinear,
        )
        .unwrap();
        assert_eq!(x.values().shape(), &[3, 2]);
    }

    #[test]
    fn classify_rejects_linear_into_conv() {
        let conv = Layer::conv2d("c", Tensor::zeros(&[2, 2, 1, 1]), Tensor::zeros(&[2]), 1, 0).unwrap();
        assert!(matches!(
            JointKind::classify(&Tensor::zeros(&[3, 2]), &conv),
            Err(Error::UnsupportedJoint(_))
        ));
    }

    fn lin(rng: &mut ChaCha8Rng, name: &str, out: usize, inp: usize) -> Layer {
        Layer::linear(name, rand_t(rng, &[out, inp]), rand_t(rng, &[out])).unwrap()
    }

    fn conv(rng: &mut ChaCha8Rng, name: &str, out: usize, inp: usize, k: usize) -> Layer {
        Layer::conv2d(name, rand_t(rng, &[out, inp, k, k]), rand_t(rng, &[out]), 1, k / 2).unwrap()
    }

    fn relu(name: &str) -> Layer {
        Layer::simple(name, LayerKind::ReLU)
    }

    fn labels(k: usize) -> Vec<String> {
        (0..k).map(|i| format!("c{i}")).collect()
    }

    fn mlp(rng: &mut ChaCha8Rng, id: &str, widths: &[usize]) -> Network {
        let mut layers = Vec::new();
        for (i, w) in widths.windows(2).enumerate() {
            layers.push(lin(rng, &format!("fc{i}"), w[1], w[0]));
            layers.push(relu(&format!("r{i}")));
        }
        layers.pop();
        let k = *widths.last().unwrap();
        Network::new(id, vec![widths[0]], layers, labels(k)).unwrap()
    }

    fn cnn(rng: &mut ChaCha8Rng, id: &str, chans: &[usize], classes: usize) -> Network {
        let mut layers = Vec::new();
        for (i, c) in chans.windows(2).enumerate() {
            layers.push(conv(rng, &format!("conv{i}"), c[1], c[0], 3));
            layers.push(relu(&format!("r{i}")));
            layers.push(Layer::simple(format!("pool{i}"), LayerKind::MaxPool2d { kernel: 2, stride: 2 }));
        }
        layers.push(Layer::simple("gap", LayerKind::AdaptiveAvgPool1x1));
        layers.push(Layer::simple("flat", LayerKind::Flatten));
        layers.push(lin(rng, "head", classes, *chans.last().unwrap()));
        Network::new(id, vec![chans[0], 8, 8], layers, labels(classes)).unwrap()
    }

    fn with_joint(q: &StitchNet, f: &Fragment, src: &Network, d: &Tensor) -> (StitchNet, Tensor, Tensor) {
        let x = q.forward(d).unwrap();
        let y = src.forward_upto(f.start_layer, d).unwrap();
        let out = stitch(q, f, src, &x, &y, 0.9, &StitchOptions::default()).unwrap();
        (out, x, y)
    }

    #[test]
    fn linear_joint_is_project_then_apply() {
        let mut rng = ChaCha8Rng::seed_from_u64(36);
        let a = mlp(&mut rng, "a", &[5, 4, 3]);
        let b = mlp(&mut rng, "b", &[5, 6, 7, 3]);
        let q = StitchNet::from_starting(&Fragment::from_span(&a, 0, 2).unwrap()).unwrap();
        let f = Fragment::from_span(&b, 2, 5).unwrap();
        let d = rand_t(&mut rng, &[12, 5]);
        let (net, x, y) = with_joint(&q, &f, &b, &d);

        let (xt, yt) = (x.transpose().unwrap(), y.transpose().unwrap());
        let ridge = tensor::ridge_for_scale(&xt, tensor::DEFAULT_RIDGE_SCALE);
        let p = solve_projection(&xt, &yt, ridge).unwrap();
        let held = rand_t(&mut rng, &[9, 5]);
        let projected = matmul(&p, &q.forward(&held).unwrap().transpose().unwrap()).unwrap();
        let want = f.forward(&projected.transpose().unwrap()).unwrap();
        assert!(net.forward(&held).unwrap().max_abs_diff(&want) <= 1e-9);
        assert_eq!(net.segments()[1].joint, Some(JointKind::LinearToLinear));
        assert_eq!(net.class_labels(), b.class_labels());
        assert!(net.is_complete());
    }

    #[test]
    fn conv_to_linear_matches_manual_pipeline() {
        let mut rng = ChaCha8Rng::seed_from_u64(37);
        let a = cnn(&mut rng, "a", &[2, 3, 4], 3);
        let b = mlp(&mut rng, "b", &[6, 5, 3]);
        let q = StitchNet::from_starting(&Fragment::from_span(&a, 0, 3).unwrap()).unwrap();
        let f = Fragment::from_span(&b, 2, 3).unwrap();
        let d = rand_t(&mut rng, &[10, 2, 8, 8]);
        let bd = rand_t(&mut rng, &[10, 6]);
        let x = q.forward(&d).unwrap();
        let y = b.forward_upto(2, &bd).unwrap();
        let net = stitch(&q, &f, &b, &x, &y, 0.5, &StitchOptions::default()).unwrap();

        let pooled = tensor::adaptive_avg_pool_1x1(&x).unwrap().flatten_samples();
        let xt = pooled.transpose().unwrap();
        let ridge = tensor::ridge_for_scale(&xt, tensor::DEFAULT_RIDGE_SCALE);
        let p = solve_projection(&xt, &y.transpose().unwrap(), ridge).unwrap();
        let LayerKind::Linear { weight, bias } = &f.first_layer().kind else { unreachable!() };
        let fused = fuse_linear(weight, &p.transpose().unwrap()).unwrap();
        let held = rand_t(&mut rng, &[4, 2, 8, 8]);
        let h = tensor::adaptive_avg_pool_1x1(&q.forward(&held).unwrap()).unwrap().flatten_samples();
        let want = crate::nn::linear_forward(&h, &fused, bias).unwrap();
        assert!(net.forward(&held).unwrap().max_abs_diff(&want) <= 1e-9);
        let names: Vec<_> = net.layers().map(|l| l.name.as_str()).collect();
        assert!(names.contains(&"stitch1_pool") && names.contains(&"stitch1_flatten"));
    }

    #[test]
    fn conv_joint_resizes_then_mixes_channels() {
        let mut rng = ChaCha8Rng::seed_from_u64(38);
        let a = cnn(&mut rng, "a", &[2, 3, 4], 3);
        let b = cnn(&mut rng, "b", &[2, 5, 4], 3);
        // a[0:3] ends at 3×4×4; b's second conv takes 5×4×4.
        let q = StitchNet::from_starting(&Fragment::from_span(&a, 0, 6).unwrap()).unwrap();
        let f = Fragment::from_span(&b, 3, b.layer_list().len()).unwrap();
        let d = rand_t(&mut rng, &[6, 2, 8, 8]);
        let (net, x, y) = with_joint(&q, &f, &b, &d);
        assert_eq!(x.shape()[2..], [2, 2]);
        assert_eq!(y.shape()[2..], [4, 4]);
        assert_eq!(net.segments()[1].adapter.len(), 1);

        let (xm, ym) = prepare_joint(&x, &y, JointKind::ConvToConv).unwrap();
        let ridge = tensor::ridge_for_scale(xm.values(), tensor::DEFAULT_RIDGE_SCALE);
        let p = solve_projection(xm.values(), ym.values(), ridge).unwrap();
        let held = rand_t(&mut rng, &[3, 2, 8, 8]);
        let hx = tensor::resize_spatial(&q.forward(&held).unwrap(), 4, 4).unwrap();
        let (c, plane) = (hx.shape()[1], 16);
        let mut proj = vec![0.0; 3 * 5 * plane];
        for n in 0..3 {
            for k in 0..5 {
                for pos in 0..plane {
                    proj[(n * 5 + k) * plane + pos] =
                        (0..c).map(|j| p.at2(k, j) * hx.data()[(n * c + j) * plane + pos]).sum();
                }
            }
        }
        let want = f.forward(&Tensor::new(vec![3, 5, 4, 4], proj).unwrap()).unwrap();
        assert!(net.forward(&held).unwrap().max_abs_diff(&want) <= 1e-9);
    }

    #[test]
    fn self_stitch_recovers_identity() {
        let mut rng = ChaCha8Rng::seed_from_u64(39);
        let a = mlp(&mut rng, "a", &[6, 5, 4, 3]);
        let before = a.clone();
        let q = StitchNet::from_starting(&Fragment::from_span(&a, 0, 2).unwrap()).unwrap();
        let d = rand_t(&mut rng, &[32, 6]);
        let x = q.forward(&d).unwrap();
        let fit = fit_joint(&x, &x, &a.layer_list()[2], &StitchOptions::default())
            .unwrap();
        let diff = fit.projection.sub(&Tensor::eye(5)).unwrap().frobenius_norm();
        assert!(diff / 5f64.sqrt() <= 1e-6, "‖A−I‖ = {diff}");

        let (mid, _, _) = with_joint(&q, &Fragment::from_span(&a, 2, 4).unwrap(), &a, &d);
        let (full, _, _) = with_joint(&mid, &Fragment::from_span(&a, 4, 5).unwrap(), &a, &d);
        let held = rand_t(&mut rng, &[20, 6]);
        assert!(full.forward(&held).unwrap().max_abs_diff(&a.forward(&held).unwrap()) <= 1e-6);
        assert_eq!(a, before);
        assert!((full.cumulative_score() - 0.81).abs() <= 1e-12);
        assert!((full.joint_score_product() - full.cumulative_score()).abs() <= 1e-12);
        assert_eq!(full.provenance(), "a[0:2]>a[2:4]@0.900000>a[4:5]@0.900000");
    }

    #[test]
    fn stitch_rejects_bad_appends() {
        let mut rng = ChaCha8Rng::seed_from_u64(40);
        let a = mlp(&mut rng, "a", &[4, 4, 2]);
        let start = Fragment::from_span(&a, 0, 2).unwrap();
        let q = StitchNet::from_starting(&start).unwrap();
        let d = rand_t(&mut rng, &[8, 4]);
        let x = q.forward(&d).unwrap();
        let opts = StitchOptions::default();
        assert!(stitch(&q, &start, &a, &x, &x, 1.0, &opts).is_err());
        let b = mlp(&mut rng, "b", &[4, 4, 2]);
        let tail = Fragment::from_span(&a, 2, 3).unwrap();
        assert!(stitch(&q, &tail, &b, &x, &x, 1.0, &opts).is_err());
        let done = stitch(&q, &tail, &a, &x, &x, 1.0, &opts).unwrap();
        assert!(stitch(&done, &tail, &a, &x, &x, 1.0, &opts).is_err());
    }

    #[test]
    fn affine_fit_absorbs_offsets() {
        let mut rng = ChaCha8Rng::seed_from_u64(41);
        let x = rand_t(&mut rng, &[20, 3]);
        let b = rand_t(&mut rng, &[4, 3]);
        let y = matmul(&x, &b.transpose().unwrap()).unwrap();
        let shifted = Tensor::new(
            vec![20, 4],
            y.data().iter().enumerate().map(|(i, v)| v + (i % 4) as f64).collect(),
        )
        .unwrap();
        let layer = lin(&mut rng, "l", 2, 4);
        let opts = StitchOptions { affine: true, ..StitchOptions::default() };
        let fit = fit_joint(&x, &shifted, &layer, &opts).unwrap();
        assert!(fit.projection.max_abs_diff(&b) <= 1e-6);
        let icpt = fit.intercept.clone().unwrap();
        for (i, c) in icpt.iter().enumerate() {
            assert!((c - i as f64).abs() <= 1e-6);
        }
        let fused = fuse_layer(&layer, &fit).unwrap();
        assert!(fused.forward(&x).unwrap().max_abs_diff(&layer.forward(&shifted).unwrap()) <= 1e-6);
    }

    #[test]
    fn stitchnet_round_trip_is_bit_exact() {
        let mut rng = ChaCha8Rng::seed_from_u64(42);
        let a = cnn(&mut rng, "a", &[2, 3, 4], 3);
        let b = cnn(&mut rng, "b", &[2, 5, 4], 3);
        let q = StitchNet::from_starting(&Fragment::from_span(&a, 0, 6).unwrap()).unwrap();
        let f = Fragment::from_span(&b, 3, b.layer_list().len()).unwrap();
        let (net, _, _) = with_joint(&q, &f, &b, &rand_t(&mut rng, &[6, 2, 8, 8]));
        let bytes = encode_stitchnet(&net).unwrap();
        let back = decode_stitchnet(&bytes).unwrap();
        assert_eq!(back, net);
        assert_eq!(encode_stitchnet(&back).unwrap(), bytes);

        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("s.snet");
        save_stitchnet(&net, &path).unwrap();
        assert!(matches!(load_model(&path).unwrap(), SavedModel::StitchNet(s) if s == net));
        assert!(decode_stitchnet(&bytes[..bytes.len() - 3]).is_err());
    }
}
