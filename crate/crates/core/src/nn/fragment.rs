use std::collections::HashSet;
use std::fmt;

use super::layer::{run_layers, Layer};
use super::network::Network;
use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum FragmentKind {
    Starting,
    Middle,
    Terminating,
    /// A whole network that could not be cut (fewer than two trainable
    /// layers). Counts as both starting and terminating.
    Whole,
}

impl FragmentKind {
    pub fn is_starting(self) -> bool {
        matches!(self, Self::Starting | Self::Whole)
    }

    pub fn is_terminating(self) -> bool {
        matches!(self, Self::Terminating | Self::Whole)
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Self::Starting => "starting",
            Self::Middle => "middle",
            Self::Terminating => "terminating",
            Self::Whole => "whole",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        Some(match s {
            "starting" => Self::Starting,
            "middle" => Self::Middle,
            "terminating" => Self::Terminating,
            "whole" => Self::Whole,
            _ => return None,
        })
    }
}

impl fmt::Display for FragmentKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

/// A contiguous span `[start_layer, end_layer)` of a source network.
#[derive(Clone, Debug, PartialEq)]
pub struct Fragment {
    pub source_network_id: String,
    pub start_layer: usize,
    pub end_layer: usize,
    pub kind: FragmentKind,
    pub layers: Vec<Layer>,
    /// Per-sample shape of the activation this fragment receives in its
    /// source network.
    pub input_shape: Vec<usize>,
    pub output_shape: Vec<usize>,
}

impl Fragment {
    pub fn from_span(network: &Network, start: usize, end: usize) -> Result<Self> {
        let len = network.layer_list().len();
        if start >= end || end > len {
            return Err(Error::OutOfRange(format!(
                "span [{start}, {end}) of '{}' with {len} layers",
                network.id()
            )));
        }
        let kind = match (start == 0, end == len) {
            (true, true) => FragmentKind::Whole,
            (true, false) => FragmentKind::Starting,
            (false, true) => FragmentKind::Terminating,
            (false, false) => FragmentKind::Middle,
        };
        if start > 0 && !network.layer_list()[start].is_trainable() {
            return Err(Error::Config(format!(
                "fragment of '{}' must begin at a linear or conv layer, layer {start} is '{}'",
                network.id(),
                network.layer_list()[start].name
            )));
        }
        Ok(Self {
            source_network_id: network.id().to_string(),
            start_layer: start,
            end_layer: end,
            kind,
            layers: network.layer_list()[start..end].to_vec(),
            input_shape: network.shape_at(start)?,
            output_shape: network.shape_at(end)?,
        })
    }

    /// `net[start:end]`, used as the deterministic tie-break key.
    pub fn id(&self) -> String {
        format!("{}[{}:{}]", self.source_network_id, self.start_layer, self.end_layer)
    }

    pub fn num_params(&self) -> usize {
        self.layers.iter().map(Layer::num_params).sum()
    }

    pub fn first_layer(&self) -> &Layer {
        &self.layers[0]
    }

    pub fn forward(&self, batch: &Tensor) -> Result<Tensor> {
        run_layers(&self.layers, batch)
    }

    /// True when both fragments come from the same network and their layer
    /// spans intersect.
    pub fn overlaps(&self, other: &Fragment) -> bool {
        self.source_network_id == other.source_network_id
            && self.start_layer < other.end_layer
            && other.start_layer < self.end_layer
    }
}

/// Which spans of each network the pool materializes.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum Granularity {
    /// One cut in front of every trainable layer but the first.
    #[default]
    SingleCut,
    /// Every span between two cut points.
    AllSpans,
}

impl Granularity {
    pub fn as_str(self) -> &'static str {
        match self {
            Self::SingleCut => "single-cut",
            Self::AllSpans => "all-spans",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "single-cut" => Some(Self::SingleCut),
            "all-spans" => Some(Self::AllSpans),
            _ => None,
        }
    }
}

fn cut_points(network: &Network) -> Vec<usize> {
    let mut cuts = vec![0];
    cuts.extend(network.trainable_indices().into_iter().skip(1));
    cuts.push(network.layer_list().len());
    cuts
}

/// Cuts a network in front of every linear/conv layer except the first.
///
/// A network with fewer than two trainable layers yields one
/// [`FragmentKind::Whole`] fragment.
pub fn fragmentize(network: &Network) -> Result<Vec<Fragment>> {
    let cuts = cut_points(network);
    if cuts.len() == 2 {
        log::warn!(
            "network '{}' has fewer than two trainable layers; kept whole",
            network.id()
        );
    }
    cuts.windows(2)
        .map(|w| Fragment::from_span(network, w[0], w[1]))
        .collect()
}

/// Every span between two cut points, whole network excluded unless it is
/// the only option.
pub fn fragmentize_all_spans(network: &Network) -> Result<Vec<Fragment>> {
    let cuts = cut_points(network);
    if cuts.len() == 2 {
        return fragmentize(network);
    }
    let last = cuts.len() - 1;
    let mut out = Vec::new();
    for i in 0..last {
        for j in i + 1..=last {
            if i == 0 && j == last {
                continue;
            }
            out.push(Fragment::from_span(network, cuts[i], cuts[j])?);
        }
    }
    Ok(out)
}

/// Fragments plus the networks they were cut from.
#[derive(Clone, Debug)]
pub struct FragmentPool {
    networks: Vec<Network>,
    fragments: Vec<Fragment>,
    granularity: Granularity,
}

impl FragmentPool {
    pub fn new(networks: Vec<Network>, granularity: Granularity) -> Result<Self> {
        let mut seen = HashSet::new();
        for n in &networks {
            if !seen.insert(n.id()) {
                return Err(Error::Config(format!("duplicate network id '{}' in pool", n.id())));
            }
        }
        let mut fragments = Vec::new();
        for n in &networks {
            fragments.extend(match granularity {
                Granularity::SingleCut => fragmentize(n)?,
                Granularity::AllSpans => fragmentize_all_spans(n)?,
            });
        }
        Ok(Self {
            networks,
            fragments,
            granularity,
        })
    }

    pub fn networks(&self) -> &[Network] {
        &self.networks
    }

    pub fn fragments(&self) -> &[Fragment] {
        &self.fragments
    }

    pub fn granularity(&self) -> Granularity {
        self.granularity
    }

    pub fn network(&self, id: &str) -> Option<&Network> {
        self.networks.iter().find(|n| n.id() == id)
    }

    pub fn starting(&self) -> impl Iterator<Item = &Fragment> {
        self.fragments.iter().filter(|f| f.kind.is_starting())
    }

    pub fn fragment(&self, id: &str) -> Option<&Fragment> {
        self.fragments.iter().find(|f| f.id() == id)
    }
}
