//! The recursive, threshold-pruned search that composes fragments into
//! complete networks.
//!
//! From every selected starting fragment (score 1) the search picks `K`
//! candidate continuations, scores each joint by the CKA between the current
//! net's output and the candidate's native input on the stitching samples,
//! multiplies that into the running score and keeps the branch only while the
//! product stays strictly above `T`. Branches stop at a terminating fragment
//! or once they hold `L` fragments.

use std::collections::HashMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::time::{Duration, Instant};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::cka::{cka_linear, ActivationMatrix};
use crate::error::{Error, Result};
use crate::nn::{run_layers, Fragment, FragmentPool, Model};
use crate::stitch::{self, JointKind, StitchNet, StitchOptions};
use crate::tensor::Tensor;
use crate::zoo::{Dataset, Split};

#[derive(Clone, Debug, PartialEq, Eq)]
pub enum StartingSelection {
    All,
    /// Fragment ids (`net[0:3]`) or network ids.
    ByIds(Vec<String>),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum CandidateStrategy {
    /// The `K` compatible fragments with the highest joint CKA.
    TopCka,
    /// The `K` compatible fragments with the fewest parameters.
    FewestParams,
}

impl CandidateStrategy {
    pub fn as_str(self) -> &'static str {
        match self {
            Self::TopCka => "top-cka",
            Self::FewestParams => "fewest-params",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "top-cka" => Some(Self::TopCka),
            "fewest-params" => Some(Self::FewestParams),
            _ => None,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct GenerationConfig {
    /// `K`: candidates tried per node.
    pub span: usize,
    /// `T`: a branch survives while its score is strictly greater.
    pub threshold: f64,
    /// `L`: most fragments in one stitched net.
    pub max_fragments: usize,
    /// `M`: stitching samples drawn from the dataset.
    pub samples: usize,
    pub starting: StartingSelection,
    pub strategy: CandidateStrategy,
    /// Picks the `M` stitching samples.
    pub seed: u64,
    pub stitch: StitchOptions,
}

impl Default for GenerationConfig {
    fn default() -> Self {
        Self {
            span: 2,
            threshold: 0.5,
            max_fragments: 16,
            samples: 32,
            starting: StartingSelection::All,
            strategy: CandidateStrategy::TopCka,
            seed: 0,
            stitch: StitchOptions::default(),
        }
    }
}

impl GenerationConfig {
    pub fn validate(&self) -> Result<()> {
        if self.span == 0 || self.max_fragments == 0 {
            return Err(Error::Config("K and L must be at least 1".into()));
        }
        if !(0.0..=1.0).contains(&self.threshold) {
            return Err(Error::Config(format!("T = {} is outside [0, 1]", self.threshold)));
        }
        if self.samples < 2 {
            return Err(Error::Config("M must be at least 2".into()));
        }
        if !(self.stitch.ridge_scale >= 0.0 && self.stitch.ridge_scale.is_finite()) {
            return Err(Error::Config("ridge scale must be finite and non-negative".into()));
        }
        Ok(())
    }
}

/// Counters of one run. All are deterministic.
#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct GenerationStats {
    pub starting_fragments: usize,
    /// Nets whose continuations were searched.
    pub nodes_expanded: usize,
    /// Joints scored against the threshold: at most `K` per expanded node.
    pub candidates_evaluated: usize,
    /// Every CKA computed, including ranking all compatible fragments.
    pub cka_evaluations: usize,
    pub joints_rejected: usize,
    /// Joints whose activations had no variance; scored 0.
    pub degenerate_joints: usize,
    pub stitches: usize,
    pub emitted: usize,
    pub max_depth: usize,
}

impl GenerationStats {
    fn merge(&mut self, o: &Self) {
        self.starting_fragments += o.starting_fragments;
        self.nodes_expanded += o.nodes_expanded;
        self.candidates_evaluated += o.candidates_evaluated;
        self.cka_evaluations += o.cka_evaluations;
        self.joints_rejected += o.joints_rejected;
        self.degenerate_joints += o.degenerate_joints;
        self.stitches += o.stitches;
        self.emitted += o.emitted;
        self.max_depth = self.max_depth.max(o.max_depth);
    }
}

/// Upper bound on joint evaluations: `S·(K^L − 1)/(K − 1)` for `S` starting
/// fragments, saturating.
pub fn joint_evaluation_bound(starting: usize, span: usize, max_fragments: usize) -> u128 {
    let (s, k) = (starting as u128, span as u128);
    let per_start = if k == 1 {
        max_fragments as u128
    } else {
        let mut pow: u128 = 1;
        for _ in 0..max_fragments {
            pow = pow.saturating_mul(k);
        }
        pow.saturating_sub(1) / (k - 1)
    };
    s.saturating_mul(per_start)
}

#[derive(Clone, Debug, PartialEq)]
pub struct GeneratedNet {
    pub net: StitchNet,
    pub score: f64,
    /// Softmax outputs on every sample of the dataset, in dataset order,
    /// captured when the net was completed.
    pub task_outputs: Option<Tensor>,
}

#[derive(Clone, Debug)]
pub struct GenerationResult {
    /// Sorted by score, highest first; ties by provenance.
    pub entries: Vec<GeneratedNet>,
    pub stats: GenerationStats,
    /// The stitching samples the run used.
    pub samples: Tensor,
    pub wall_time: Duration,
}

/// A fragment the search may append next, with its joint CKA.
#[derive(Clone, Debug)]
pub struct Candidate<'p> {
    pub fragment: &'p Fragment,
    pub cka: f64,
}

/// Everything fixed during a run: the pool, the samples, and each
/// fragment's native input on them.
struct Context<'p> {
    pool: &'p FragmentPool,
    native: HashMap<String, Tensor>,
}

impl<'p> Context<'p> {
    fn new(pool: &'p FragmentPool, samples: &Tensor) -> Result<Self> {
        let mut native = HashMap::new();
        for f in pool.fragments().iter().filter(|f| !f.kind.is_starting()) {
            let net = pool.network(&f.source_network_id).ok_or_else(|| {
                Error::Config(format!("fragment {} has no source network", f.id()))
            })?;
            native.insert(f.id(), net.forward_upto(f.start_layer, samples)?);
        }
        Ok(Self { pool, native })
    }

    fn native(&self, f: &Fragment) -> &Tensor {
        &self.native[&f.id()]
    }

    fn joint_cka(&self, x: &Tensor, f: &Fragment, stats: &mut GenerationStats) -> Result<f64> {
        stats.cka_evaluations += 1;
        let xm = ActivationMatrix::from_batch(x, "current")?;
        let ym = ActivationMatrix::from_batch(self.native(f), f.id())?;
        match cka_linear(&xm, &ym) {
            Ok(v) => Ok(v),
            Err(Error::Degenerate(msg)) => {
                log::warn!("joint into {} is degenerate ({msg}); scoring 0", f.id());
                stats.degenerate_joints += 1;
                Ok(0.0)
            }
            Err(e) => Err(e),
        }
    }

    /// Middle and terminating fragments that can follow `q`: the joint kind
    /// is supported and no segment of `q` overlaps the fragment's span.
    fn compatible(&self, q: &StitchNet, x: &Tensor) -> Vec<&'p Fragment> {
        self.pool
            .fragments()
            .iter()
            .filter(|f| !f.kind.is_starting())
            .filter(|f| JointKind::classify(x, f.first_layer()).is_ok())
            .filter(|f| !q.segments().iter().any(|s| s.overlaps(f)))
            .collect()
    }

    fn select(
        &self,
        q: &StitchNet,
        x: &Tensor,
        k: usize,
        strategy: CandidateStrategy,
        stats: &mut GenerationStats,
    ) -> Result<Vec<Candidate<'p>>> {
        let mut pool = self.compatible(q, x);
        pool.sort_by_key(|f| f.id());
        match strategy {
            CandidateStrategy::TopCka => {
                let mut scored = pool
                    .into_iter()
                    .map(|f| Ok(Candidate { fragment: f, cka: self.joint_cka(x, f, stats)? }))
                    .collect::<Result<Vec<_>>>()?;
                // Stable sort keeps the id order among equal scores.
                scored.sort_by(|a, b| b.cka.total_cmp(&a.cka));
                scored.truncate(k);
                Ok(scored)
            }
            CandidateStrategy::FewestParams => {
                pool.sort_by_key(|f| f.num_params());
                pool.truncate(k);
                pool.into_iter()
                    .map(|f| Ok(Candidate { fragment: f, cka: self.joint_cka(x, f, stats)? }))
                    .collect()
            }
        }
    }
}

/// The `k` fragments the search would try after `q`, computed against the
/// given stitching samples.
pub fn select_candidates<'p>(
    pool: &'p FragmentPool,
    samples: &Tensor,
    q: &StitchNet,
    k: usize,
    strategy: CandidateStrategy,
) -> Result<Vec<Candidate<'p>>> {
    let ctx = Context::new(pool, samples)?;
    let x = q.forward(samples)?;
    ctx.select(q, &x, k, strategy, &mut GenerationStats::default())
}

struct Branch<'c, 'p> {
    ctx: &'c Context<'p>,
    cfg: &'c GenerationConfig,
    out: Vec<GeneratedNet>,
    stats: GenerationStats,
}

impl Branch<'_, '_> {
    /// `x` is `q`'s output on the stitching samples, `xd` its output on the
    /// whole dataset when outputs are being kept.
    fn expand(&mut self, q: &StitchNet, x: &Tensor, xd: Option<&Tensor>, score: f64) -> Result<()> {
        let depth = q.num_fragments();
        self.stats.max_depth = self.stats.max_depth.max(depth);
        if depth >= self.cfg.max_fragments {
            return Ok(());
        }
        self.stats.nodes_expanded += 1;
        let candidates = self
            .ctx
            .select(q, x, self.cfg.span, self.cfg.strategy, &mut self.stats)?;
        for c in candidates {
            self.stats.candidates_evaluated += 1;
            let s_n = score * c.cka;
            if s_n <= self.cfg.threshold {
                self.stats.joints_rejected += 1;
                continue;
            }
            let f = c.fragment;
            let source = self
                .ctx
                .pool
                .network(&f.source_network_id)
                .expect("checked when the context was built");
            let next = stitch::stitch(q, f, source, x, self.ctx.native(f), c.cka, &self.cfg.stitch)?;
            self.stats.stitches += 1;
            let seg = next.last_segment();
            let seg_layers = || seg.adapter.iter().chain(&seg.layers);
            let x_next = run_layers(seg_layers(), x)?;
            let xd_next = xd.map(|t| run_layers(seg_layers(), t)).transpose()?;
            if f.kind.is_terminating() {
                self.stats.emitted += 1;
                self.stats.max_depth = self.stats.max_depth.max(next.num_fragments());
                self.out.push(GeneratedNet {
                    net: next,
                    score: s_n,
                    task_outputs: xd_next,
                });
            } else {
                self.expand(&next, &x_next, xd_next.as_ref(), s_n)?;
            }
        }
        Ok(())
    }
}

fn starting_fragments<'p>(pool: &'p FragmentPool, sel: &StartingSelection) -> Result<Vec<&'p Fragment>> {
    let all: Vec<&Fragment> = pool.starting().collect();
    let chosen: Vec<&Fragment> = match sel {
        StartingSelection::All => all,
        StartingSelection::ByIds(ids) => {
            for id in ids {
                if !all.iter().any(|f| &f.id() == id || &f.source_network_id == id) {
                    return Err(Error::Config(format!("no starting fragment matches '{id}'")));
                }
            }
            all.into_iter()
                .filter(|f| ids.iter().any(|id| &f.id() == id || &f.source_network_id == id))
                .collect()
        }
    };
    if chosen.is_empty() {
        return Err(Error::Config("no starting fragments selected".into()));
    }
    Ok(chosen)
}

fn run(pool: &FragmentPool, d: &Dataset, cfg: &GenerationConfig, keep_outputs: bool) -> Result<GenerationResult> {
    let started = Instant::now();
    cfg.validate()?;
    if d.split() == Split::Test {
        return Err(Error::Config(
            "stitching samples must not come from the test split".into(),
        ));
    }
    if !pool.fragments().iter().any(|f| f.kind.is_terminating()) {
        return Err(Error::Config("pool has no terminating fragment".into()));
    }
    let starts = starting_fragments(pool, &cfg.starting)?;
    let samples = d.sample(cfg.samples, cfg.seed)?.images().clone();
    let ctx = Context::new(pool, &samples)?;

    let branches = starts
        .par_iter()
        .map(|f| {
            let mut b = Branch {
                ctx: &ctx,
                cfg,
                out: Vec::new(),
                stats: GenerationStats {
                    starting_fragments: 1,
                    ..GenerationStats::default()
                },
            };
            let q = StitchNet::from_starting(f)?;
            let x = q.forward(&samples)?;
            let xd = keep_outputs.then(|| q.forward(d.images())).transpose()?;
            if f.kind.is_terminating() {
                // A network too small to cut is already complete.
                b.stats.emitted += 1;
                b.stats.max_depth = 1;
                b.out.push(GeneratedNet {
                    net: q,
                    score: 1.0,
                    task_outputs: xd,
                });
            } else {
                b.expand(&q, &x, xd.as_ref(), 1.0)?;
            }
            Ok((b.out, b.stats))
        })
        .collect::<Result<Vec<_>>>()?;

    let mut entries = Vec::new();
    let mut stats = GenerationStats::default();
    for (out, s) in branches {
        entries.extend(out);
        stats.merge(&s);
    }
    entries.sort_by(|a, b| {
        b.score
            .total_cmp(&a.score)
            .then_with(|| a.net.provenance().cmp(&b.net.provenance()))
    });
    for (i, e) in entries.iter_mut().enumerate() {
        e.net.set_id(format!("sn{:03}", i + 1));
    }
    Ok(GenerationResult {
        entries,
        stats,
        samples,
        wall_time: started.elapsed(),
    })
}

/// Runs the search. The result is independent of thread scheduling.
pub fn generate(pool: &FragmentPool, d: &Dataset, cfg: &GenerationConfig) -> Result<GenerationResult> {
    run(pool, d, cfg, false)
}

/// As [`generate`], also returning each net's outputs on every sample of
/// `d`, computed alongside the search rather than by a second pass.
pub fn generate_with_inference(
    pool: &FragmentPool,
    d: &Dataset,
    cfg: &GenerationConfig,
) -> Result<GenerationResult> {
    run(pool, d, cfg, true)
}

/// One row of `results.csv`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ResultRow {
    pub stitchnet_id: String,
    pub score: f64,
    pub n_fragments: usize,
    pub n_params: usize,
    pub provenance: String,
}

impl ResultRow {
    pub fn of(e: &GeneratedNet) -> Self {
        Self {
            stitchnet_id: e.net.model_id().to_string(),
            score: e.score,
            n_fragments: e.net.num_fragments(),
            n_params: e.net.num_params(),
            provenance: e.net.provenance(),
        }
    }
}

pub(crate) fn write_csv<T: Serialize>(path: &Path, rows: &[T], header: &[&str]) -> Result<()> {
    let io = |e: csv::Error| Error::Io {
        path: path.to_path_buf(),
        source: e.into(),
    };
    let mut w = csv::WriterBuilder::new()
        .has_headers(false)
        .terminator(csv::Terminator::Any(b'\n'))
        .from_path(path)
        .map_err(io)?;
    w.write_record(header).map_err(io)?;
    for r in rows {
        w.serialize(r).map_err(io)?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

pub(crate) fn read_csv<T: serde::de::DeserializeOwned>(path: &Path) -> Result<Vec<T>> {
    let mut r = csv::Reader::from_path(path).map_err(|e| Error::Io {
        path: path.to_path_buf(),
        source: e.into(),
    })?;
    r.deserialize()
        .enumerate()
        .map(|(i, row)| row.map_err(|e| Error::parse(i + 1, format!("{}: {e}", path.display()))))
        .collect()
}

pub const RESULTS_HEADER: [&str; 5] = ["stitchnet_id", "score", "n_fragments", "n_params", "provenance"];

/// Writes `<id>.snet` per net, `results.csv` and `stats.json` into `dir`.
pub fn write_results(result: &GenerationResult, dir: &Path) -> Result<Vec<PathBuf>> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut paths = Vec::with_capacity(result.entries.len());
    for e in &result.entries {
        let p = dir.join(format!("{}.snet", e.net.model_id()));
        stitch::save_stitchnet(&e.net, &p)?;
        paths.push(p);
    }
    let rows: Vec<ResultRow> = result.entries.iter().map(ResultRow::of).collect();
    write_csv(&dir.join("results.csv"), &rows, &RESULTS_HEADER)?;
    let stats = dir.join("stats.json");
    let mut json = serde_json::to_string_pretty(&result.stats).expect("stats serialize");
    json.push('\n');
    fs::write(&stats, json).map_err(|e| Error::io(&stats, e))?;
    Ok(paths)
}

/// Loads the nets listed in `dir/results.csv`, in file order, with their
/// scores.
pub fn read_results(dir: &Path) -> Result<Vec<(StitchNet, f64)>> {
    let rows: Vec<ResultRow> = read_csv(&dir.join("results.csv"))?;
    rows.into_iter()
        .map(|r| {
            let net = stitch::load_stitchnet(dir.join(format!("{}.snet", r.stitchnet_id)))?;
            Ok((net, r.score))
        })
        .collect()
}

pub fn read_stats(dir: &Path) -> Result<GenerationStats> {
    let p = dir.join("stats.json");
    let text = fs::read_to_string(&p).map_err(|e| Error::io(&p, e))?;
    serde_json::from_str(&text).map_err(|e| Error::parse(0, format!("{}: {e}", p.display())))
}
