//! The `.snet` container: a line-oriented text header followed by one
//! little-endian `f64` blob holding every declared tensor in order.
//!
//! ```text
//! SNET 1
//! kind network
//! id cnn_a
//! input 1x16x16
//! label class_0
//! layer conv1 conv2d stride=1 padding=1
//! tensor conv1.weight 8x1x3x3
//! tensor conv1.bias 8
//! layer relu1 relu
//! end
//! <blob>
//! ```
//!
//! Networks, stitched networks and datasets share this container; the
//! `kind` line tells them apart.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use super::fragment::Granularity;
use super::layer::{Layer, LayerKind};
use super::network::Network;
use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const MAGIC: &str = "SNET 1";
const END: &str = "end";

/// Accumulates header lines and the tensors they declare.
pub(crate) struct ContainerWriter {
    header: String,
    blob: Vec<u8>,
}

impl ContainerWriter {
    pub fn new(kind: &str) -> Self {
        let mut header = String::new();
        let _ = writeln!(header, "{MAGIC}");
        let _ = writeln!(header, "kind {kind}");
        Self {
            header,
            blob: Vec::new(),
        }
    }

    pub fn line(&mut self, line: impl AsRef<str>) {
        self.header.push_str(line.as_ref());
        self.header.push('\n');
    }

    pub fn tensor(&mut self, name: &str, t: &Tensor) {
        self.line(format!("tensor {name} {}", format_shape(t.shape())));
        for v in t.data() {
            self.blob.extend_from_slice(&v.to_le_bytes());
        }
    }

    pub fn finish(mut self) -> Vec<u8> {
        self.line(END);
        let mut out = self.header.into_bytes();
        out.extend_from_slice(&self.blob);
        out
    }
}

pub(crate) fn format_shape(shape: &[usize]) -> String {
    shape
        .iter()
        .map(usize::to_string)
        .collect::<Vec<_>>()
        .join("x")
}

pub(crate) fn parse_shape(s: &str, offset: usize) -> Result<Vec<usize>> {
    let dims: Vec<usize> = s
        .split('x')
        .map(|d| d.parse::<usize>())
        .collect::<std::result::Result<_, _>>()
        .map_err(|_| Error::parse(offset, format!("malformed shape '{s}'")))?;
    if dims.is_empty() || dims.len() > crate::tensor::MAX_RANK || dims.contains(&0) {
        return Err(Error::parse(offset, format!("invalid shape '{s}'")));
    }
    Ok(dims)
}

#[derive(Debug)]
pub(crate) enum Entry {
    Line {
        offset: usize,
        tokens: Vec<String>,
        text: String,
    },
    Tensor {
        offset: usize,
        name: String,
        tensor: Tensor,
    },
}

/// Sequential reader over a decoded container.
#[derive(Debug)]
pub(crate) struct Cursor {
    pub kind: String,
    entries: Vec<Entry>,
    pos: usize,
    end_offset: usize,
}

impl Cursor {
    pub fn decode(bytes: &[u8]) -> Result<Self> {
        let mut offset = 0;
        let mut lines: Vec<(usize, String)> = Vec::new();
        let blob_start = loop {
            let Some(nl) = bytes[offset..].iter().position(|&b| b == b'\n') else {
                return Err(Error::parse(offset, "header ended without an 'end' line"));
            };
            let raw = &bytes[offset..offset + nl];
            let text = std::str::from_utf8(raw)
                .map_err(|_| Error::parse(offset, "header line is not UTF-8"))?;
            if text == END {
                break offset + nl + 1;
            }
            lines.push((offset, text.to_string()));
            offset += nl + 1;
        };

        let mut iter = lines.into_iter();
        match iter.next() {
            Some((_, ref m)) if m == MAGIC => {}
            Some((o, m)) => return Err(Error::parse(o, format!("bad magic '{m}', expected '{MAGIC}'"))),
            None => return Err(Error::parse(0, "empty header")),
        }
        let kind = match iter.next() {
            Some((o, line)) => match line.strip_prefix("kind ") {
                Some(k) => k.trim().to_string(),
                None => return Err(Error::parse(o, "expected 'kind' line")),
            },
            None => return Err(Error::parse(0, "missing 'kind' line")),
        };

        let mut entries = Vec::new();
        let mut blob_pos = blob_start;
        for (off, text) in iter {
            let tokens: Vec<String> = text.split_whitespace().map(str::to_string).collect();
            if tokens.first().map(String::as_str) == Some("tensor") {
                if tokens.len() != 3 {
                    return Err(Error::parse(off, "tensor line needs a name and a shape"));
                }
                let shape = parse_shape(&tokens[2], off)?;
                let count: usize = shape.iter().product();
                let need = count * 8;
                let have = bytes.len().saturating_sub(blob_pos);
                if have < need {
                    return Err(Error::parse(
                        blob_pos,
                        format!(
                            "tensor '{}' declares {count} floats but only {} remain in the blob",
                            tokens[1],
                            have / 8
                        ),
                    ));
                }
                let data: Vec<f64> = bytes[blob_pos..blob_pos + need]
                    .chunks_exact(8)
                    .map(|c| f64::from_le_bytes(c.try_into().expect("8-byte chunk")))
                    .collect();
                let tensor = Tensor::new(shape, data).map_err(|e| {
                    Error::parse(blob_pos, format!("tensor '{}': {e}", tokens[1]))
                })?;
                entries.push(Entry::Tensor {
                    offset: blob_pos,
                    name: tokens[1].clone(),
                    tensor,
                });
                blob_pos += need;
            } else if !tokens.is_empty() {
                entries.push(Entry::Line {
                    offset: off,
                    tokens,
                    text,
                });
            }
        }
        if blob_pos != bytes.len() {
            return Err(Error::parse(
                blob_pos,
                format!("{} trailing bytes after the last tensor", bytes.len() - blob_pos),
            ));
        }
        Ok(Self {
            kind,
            entries,
            pos: 0,
            end_offset: blob_pos,
        })
    }

    pub fn expect_kind(&self, kind: &str) -> Result<()> {
        if self.kind != kind {
            return Err(Error::parse(
                0,
                format!("expected a '{kind}' container, found '{}'", self.kind),
            ));
        }
        Ok(())
    }

    pub fn peek_keyword(&self) -> Option<&str> {
        match self.entries.get(self.pos)? {
            Entry::Line { tokens, .. } => Some(tokens[0].as_str()),
            Entry::Tensor { .. } => Some("tensor"),
        }
    }

    pub fn offset(&self) -> usize {
        match self.entries.get(self.pos) {
            Some(Entry::Line { offset, .. } | Entry::Tensor { offset, .. }) => *offset,
            None => self.end_offset,
        }
    }

    /// Next header line as (offset, tokens, raw text).
    pub fn next_line(&mut self) -> Result<(usize, Vec<String>, String)> {
        match self.entries.get(self.pos) {
            Some(Entry::Line { offset, tokens, text }) => {
                let out = (*offset, tokens.clone(), text.clone());
                self.pos += 1;
                Ok(out)
            }
            Some(Entry::Tensor { offset, name, .. }) => Err(Error::parse(
                *offset,
                format!("unexpected tensor '{name}'"),
            )),
            None => Err(Error::parse(self.end_offset, "unexpected end of header")),
        }
    }

    /// Line starting with `keyword`; returns its offset and remaining tokens.
    pub fn expect_line(&mut self, keyword: &str) -> Result<(usize, Vec<String>, String)> {
        let off = self.offset();
        let (o, tokens, text) = self.next_line()?;
        if tokens[0] != keyword {
            return Err(Error::parse(
                off,
                format!("expected '{keyword}' line, found '{}'", tokens[0]),
            ));
        }
        Ok((o, tokens[1..].to_vec(), text))
    }

    pub fn expect_tensor(&mut self, name: &str) -> Result<Tensor> {
        match self.entries.get(self.pos) {
            Some(Entry::Tensor {
                name: got, tensor, offset,
            }) => {
                if got != name {
                    return Err(Error::parse(
                        *offset,
                        format!("expected tensor '{name}', found '{got}'"),
                    ));
                }
                let t = tensor.clone();
                self.pos += 1;
                Ok(t)
            }
            _ => Err(Error::parse(self.offset(), format!("missing tensor '{name}'"))),
        }
    }

    pub fn is_done(&self) -> bool {
        self.pos >= self.entries.len()
    }

    pub fn expect_done(&self) -> Result<()> {
        if !self.is_done() {
            return Err(Error::parse(self.offset(), "unexpected trailing header entries"));
        }
        Ok(())
    }
}

pub(crate) fn parse_usize(tok: &str, offset: usize, what: &str) -> Result<usize> {
    tok.parse()
        .map_err(|_| Error::parse(offset, format!("{what}: expected an integer, got '{tok}'")))
}

pub(crate) fn parse_f64(tok: &str, offset: usize, what: &str) -> Result<f64> {
    let v: f64 = tok
        .parse()
        .map_err(|_| Error::parse(offset, format!("{what}: expected a number, got '{tok}'")))?;
    if !v.is_finite() {
        return Err(Error::parse(offset, format!("{what}: non-finite value")));
    }
    Ok(v)
}

/// Value of a `key=value` attribute among `tokens`.
fn attr(tokens: &[String], key: &str, offset: usize) -> Result<usize> {
    let prefix = format!("{key}=");
    let tok = tokens
        .iter()
        .find_map(|t| t.strip_prefix(&prefix))
        .ok_or_else(|| Error::parse(offset, format!("missing attribute '{key}'")))?;
    parse_usize(tok, offset, key)
}

fn check_token(s: &str, what: &str) -> Result<()> {
    if s.is_empty() || s.chars().any(char::is_whitespace) {
        return Err(Error::Config(format!(
            "{what} '{s}' must be non-empty without whitespace"
        )));
    }
    Ok(())
}

/// Writes one `layer` line (plus its tensors). `extra` attributes are
/// appended verbatim, e.g. `role=adapter`.
pub(crate) fn write_layer(w: &mut ContainerWriter, layer: &Layer, extra: &str) -> Result<()> {
    check_token(&layer.name, "layer name")?;
    let attrs = match &layer.kind {
        LayerKind::Conv2d { stride, padding, .. } => format!(" stride={stride} padding={padding}"),
        LayerKind::MaxPool2d { kernel, stride } => format!(" kernel={kernel} stride={stride}"),
        LayerKind::Resize { height, width } => format!(" height={height} width={width}"),
        _ => String::new(),
    };
    w.line(format!("layer {} {}{attrs}{extra}", layer.name, layer.kind_name()));
    match &layer.kind {
        LayerKind::Linear { weight, bias } | LayerKind::Conv2d { weight, bias, .. } => {
            w.tensor(&format!("{}.weight", layer.name), weight);
            w.tensor(&format!("{}.bias", layer.name), bias);
        }
        _ => {}
    }
    Ok(())
}

/// Reads one `layer` line and its tensors. Returns the layer and any
/// attribute tokens after the kind.
pub(crate) fn read_layer(c: &mut Cursor) -> Result<(Layer, Vec<String>)> {
    let (off, tokens, _) = c.expect_line("layer")?;
    if tokens.len() < 2 {
        return Err(Error::parse(off, "layer line needs a name and a kind"));
    }
    let name = tokens[0].clone();
    let attrs = tokens[2..].to_vec();
    let kind = match tokens[1].as_str() {
        "linear" => LayerKind::Linear {
            weight: c.expect_tensor(&format!("{name}.weight"))?,
            bias: c.expect_tensor(&format!("{name}.bias"))?,
        },
        "conv2d" => LayerKind::Conv2d {
            stride: attr(&attrs, "stride", off)?,
            padding: attr(&attrs, "padding", off)?,
            weight: c.expect_tensor(&format!("{name}.weight"))?,
            bias: c.expect_tensor(&format!("{name}.bias"))?,
        },
        "relu" => LayerKind::ReLU,
        "maxpool2d" => LayerKind::MaxPool2d {
            kernel: attr(&attrs, "kernel", off)?,
            stride: attr(&attrs, "stride", off)?,
        },
        "adaptive_avg_pool_1x1" => LayerKind::AdaptiveAvgPool1x1,
        "flatten" => LayerKind::Flatten,
        "softmax" => LayerKind::Softmax,
        "resize" => LayerKind::Resize {
            height: attr(&attrs, "height", off)?,
            width: attr(&attrs, "width", off)?,
        },
        other => return Err(Error::parse(off, format!("unknown layer kind '{other}'"))),
    };
    let layer = Layer::new(name, kind).map_err(|e| Error::parse(off, e.to_string()))?;
    Ok((layer, attrs))
}

pub(crate) fn read_labels(c: &mut Cursor) -> Vec<String> {
    let mut labels = Vec::new();
    while c.peek_keyword() == Some("label") {
        let (_, _, text) = c.next_line().expect("peeked");
        labels.push(text["label".len()..].trim().to_string());
    }
    labels
}

pub fn encode_network(net: &Network) -> Result<Vec<u8>> {
    use super::network::Model;
    let mut w = ContainerWriter::new("network");
    w.line(format!("id {}", net.id()));
    w.line(format!("input {}", format_shape(net.input_shape())));
    for label in net.class_labels() {
        if label.contains('\n') {
            return Err(Error::Config("class labels cannot contain newlines".into()));
        }
        w.line(format!("label {label}"));
    }
    for layer in net.layer_list() {
        write_layer(&mut w, layer, "")?;
    }
    Ok(w.finish())
}

pub fn decode_network(bytes: &[u8]) -> Result<Network> {
    let mut c = Cursor::decode(bytes)?;
    c.expect_kind("network")?;
    let (off, id, _) = c.expect_line("id")?;
    let id = id
        .first()
        .cloned()
        .ok_or_else(|| Error::parse(off, "missing network id"))?;
    let (off, input, _) = c.expect_line("input")?;
    let input_shape = parse_shape(
        input.first().ok_or_else(|| Error::parse(off, "missing input shape"))?,
        off,
    )?;
    let labels = read_labels(&mut c);
    let mut layers = Vec::new();
    while !c.is_done() {
        layers.push(read_layer(&mut c)?.0);
    }
    Network::new(id, input_shape, layers, labels).map_err(|e| Error::parse(0, e.to_string()))
}

pub fn save_network(net: &Network, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    std::fs::write(path, encode_network(net)?).map_err(|e| Error::io(path, e))
}

pub fn load_network(path: impl AsRef<Path>) -> Result<Network> {
    let path = path.as_ref();
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_network(&bytes)
}

/// Pool manifest: network files plus how finely to cut them.
#[derive(Clone, Debug, PartialEq)]
pub struct PoolManifest {
    pub granularity: Granularity,
    pub networks: Vec<PathBuf>,
}

impl PoolManifest {
    pub fn to_text(&self) -> String {
        let mut s = String::from("# stitchkit pool manifest\n");
        let _ = writeln!(s, "granularity {}", self.granularity.as_str());
        for p in &self.networks {
            let _ = writeln!(s, "network {}", p.display());
        }
        s
    }

    /// Relative network paths are resolved against `base`.
    pub fn parse(text: &str, base: &Path) -> Result<Self> {
        let mut granularity = Granularity::default();
        let mut networks = Vec::new();
        let mut offset = 0;
        for line in text.split_inclusive('\n') {
            let trimmed = line.trim();
            if !(trimmed.is_empty() || trimmed.starts_with('#')) {
                let (key, value) = trimmed.split_once(' ').unwrap_or((trimmed, ""));
                match key {
                    "granularity" => {
                        granularity = Granularity::parse(value.trim()).ok_or_else(|| {
                            Error::parse(offset, format!("unknown granularity '{value}'"))
                        })?;
                    }
                    "network" if !value.trim().is_empty() => {
                        let p = PathBuf::from(value.trim());
                        networks.push(if p.is_absolute() { p } else { base.join(p) });
                    }
                    _ => return Err(Error::parse(offset, format!("bad manifest line '{trimmed}'"))),
                }
            }
            offset += line.len();
        }
        if networks.is_empty() {
            return Err(Error::Config("pool manifest lists no networks".into()));
        }
        Ok(Self {
            granularity,
            networks,
        })
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text, path.parent().unwrap_or(Path::new(".")))
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        std::fs::write(path, self.to_text()).map_err(|e| Error::io(path, e))
    }

    pub fn load_pool(&self) -> Result<super::fragment::FragmentPool> {
        let nets = self
            .networks
            .iter()
            .map(load_network)
            .collect::<Result<Vec<_>>>()?;
        super::fragment::FragmentPool::new(nets, self.granularity)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Tensor;

    fn net() -> Network {
        let w = Tensor::new(vec![2, 1, 3, 3], (0..18).map(|i| i as f64 * 0.1 - 0.7).collect()).unwrap();
        let layers = vec![
            Layer::conv2d("c1", w, Tensor::new(vec![2], vec![0.1, -0.2]).unwrap(), 1, 1).unwrap(),
            Layer::simple("r1", LayerKind::ReLU),
            Layer::simple("p1", LayerKind::MaxPool2d { kernel: 2, stride: 2 }),
            Layer::simple("g", LayerKind::AdaptiveAvgPool1x1),
            Layer::simple("f", LayerKind::Flatten),
            Layer::linear(
                "fc",
                Tensor::new(vec![2, 2], vec![1.0 / 3.0, -2.5e-300, 7.0, f64::MIN_POSITIVE]).unwrap(),
                Tensor::zeros(&[2]),
            )
            .unwrap(),
            Layer::simple("s", LayerKind::Softmax),
        ];
        Network::new("tiny", vec![1, 4, 4], layers, vec!["cat one".into(), "dog".into()]).unwrap()
    }

    #[test]
    fn round_trip_is_bit_exact() {
        let n = net();
        let bytes = encode_network(&n).unwrap();
        let back = decode_network(&bytes).unwrap();
        assert_eq!(back, n);
        for (a, b) in back.layer_list().iter().zip(n.layer_list()) {
            for (ta, tb) in a.params().iter().zip(b.params()) {
                assert!(ta.bit_eq(tb));
            }
        }
        assert_eq!(encode_network(&back).unwrap(), bytes);
    }

    #[test]
    fn truncated_file_is_a_parse_error() {
        let bytes = encode_network(&net()).unwrap();
        for cut in [0, 5, 40, bytes.len() - 3] {
            assert!(matches!(
                decode_network(&bytes[..cut]),
                Err(Error::Parse { .. })
            ));
        }
    }

    #[test]
    fn short_blob_names_the_tensor() {
        let t = Tensor::new(vec![10], vec![1.0; 10]).unwrap();
        let mut w = ContainerWriter::new("network");
        w.tensor("probe.weight", &t);
        let mut bytes = w.finish();
        bytes.truncate(bytes.len() - 8);
        let err = Cursor::decode(&bytes).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("probe.weight") && msg.contains("10 floats"), "{msg}");
    }

    #[test]
    fn unknown_kind_reports_offset() {
        let text = format!("{MAGIC}\nkind network\nid x\ninput 2\nlayer a gelu\nend\n");
        match decode_network(text.as_bytes()) {
            Err(Error::Parse { offset, message }) => {
                assert_eq!(offset, text.find("layer a").unwrap());
                assert!(message.contains("gelu"));
            }
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn manifest_round_trip() {
        let m = PoolManifest {
            granularity: Granularity::AllSpans,
            networks: vec![PathBuf::from("/z/a.snet"), PathBuf::from("/z/b.snet")],
        };
        assert_eq!(PoolManifest::parse(&m.to_text(), Path::new("/")).unwrap(), m);
        let rel = PoolManifest::parse("network a.snet\n", Path::new("/base")).unwrap();
        assert_eq!(rel.networks, vec![PathBuf::from("/base/a.snet")]);
        assert!(PoolManifest::parse("# nothing\n", Path::new("/")).is_err());
        assert!(PoolManifest::parse("granularity coarse\nnetwork a\n", Path::new("/")).is_err());
    }
}
