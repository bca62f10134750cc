use std::fs;
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use stitchkit::eval::{
    accuracy_of, emit_report, ensemble_predict, ensemble_sweep, evaluate, evaluate_all, select_ensemble_pool, CurveRow,
    EvalReport, SweepRow,
};
use stitchkit::generate::{self, GeneratedNet, GenerationConfig, StartingSelection};
use stitchkit::nn::{save_network, FragmentPool, Model, Network, PoolManifest};
use stitchkit::stitch::{load_model, StitchOptions};
use stitchkit::zoo::{
    finetune_last_layer, load_dataset, make_synthetic_dataset, save_dataset, train_network, train_test_split,
    ArchSpec, Dataset, LabelMap, TrainConfig,
};
use stitchkit::Error;

use crate::{
    BuildPoolArgs, DataShape, EnsembleArgs, EnsembleOpts, EvaluateArgs, Failure, GenerateArgs, MakeDataArgs,
    ReportArgs, SearchOpts, TrainOpts, TrainZooArgs,
};

pub type CmdResult<T = ()> = Result<T, Failure>;

fn create_dir(dir: &Path) -> CmdResult {
    fs::create_dir_all(dir).map_err(|e| Error::Io { path: dir.to_path_buf(), source: e }.into())
}

/// `identity`, `group:N`, or explicit `src:dst` pairs.
pub fn parse_map(spec: &str, classes: &[String]) -> CmdResult<LabelMap> {
    let spec = spec.trim();
    let map = if spec == "identity" {
        LabelMap::identity(classes)
    } else if let Some(n) = spec.strip_prefix("group:") {
        let n: usize = n
            .parse()
            .map_err(|_| Failure::Usage(format!("bad group size in --map '{spec}'")))?;
        LabelMap::grouped(classes.len(), n)
    } else {
        LabelMap::parse_spec(spec)
    };
    map.map_err(|e| Failure::Usage(format!("--map '{spec}': {e}")))
}

pub fn search_config(o: &SearchOpts, seed: u64) -> GenerationConfig {
    GenerationConfig {
        span: o.span,
        threshold: o.threshold,
        max_fragments: o.max_fragments,
        samples: o.samples,
        starting: if o.start.is_empty() {
            StartingSelection::All
        } else {
            StartingSelection::ByIds(o.start.clone())
        },
        strategy: o.strategy,
        seed,
        stitch: StitchOptions {
            ridge_scale: o.ridge_scale,
            affine: o.affine,
        },
    }
}

pub fn write_data(shape: &DataShape, out: &Path, seed: u64) -> CmdResult<(Dataset, Dataset)> {
    let full = make_synthetic_dataset(shape.classes, shape.per_class, shape.image_size, seed)?;
    let (train, test) = train_test_split(&full, seed)?;
    create_dir(out)?;
    save_dataset(&train, out.join("train.ds"))?;
    save_dataset(&test, out.join("test.ds"))?;
    Ok((train, test))
}

pub fn make_data(a: &MakeDataArgs, seed: u64) -> CmdResult {
    let (train, test) = write_data(&a.shape, &a.out, seed)?;
    println!(
        "wrote {} training and {} test samples ({} classes, {}x{}) to {}",
        train.len(),
        test.len(),
        train.num_classes(),
        a.shape.image_size,
        a.shape.image_size,
        a.out.display()
    );
    Ok(())
}

/// Trains each architecture with seed `seed + index`; returns the saved paths.
pub fn train_all(train: &Dataset, o: &TrainOpts, out: &Path, seed: u64) -> CmdResult<Vec<PathBuf>> {
    let archs = o
        .archs
        .iter()
        .map(|name| ArchSpec::by_name(name, train.num_classes()))
        .collect::<Result<Vec<_>, _>>()
        .map_err(|e| Failure::Usage(e.to_string()))?;
    create_dir(out)?;
    let trained = archs
        .par_iter()
        .enumerate()
        .map(|(i, arch)| {
            let cfg = TrainConfig {
                epochs: o.epochs,
                lr: o.lr,
                momentum: o.momentum,
                batch_size: o.batch_size,
                seed: seed.wrapping_add(i as u64),
            };
            train_network(arch, &arch.name, train, &cfg)
        })
        .collect::<Result<Vec<_>, _>>()?;
    let mut paths = Vec::new();
    for t in &trained {
        let p = out.join(format!("{}.snet", t.network.id()));
        save_network(&t.network, &p)?;
        let last = t.loss_trace.last().map_or("n/a".into(), |l| format!("{l:.4}"));
        println!("{}: {} params, final loss {last} -> {}", t.network.id(), t.network.num_params(), p.display());
        paths.push(p);
    }
    Ok(paths)
}

pub fn train_zoo(a: &TrainZooArgs, seed: u64) -> CmdResult {
    let train = load_dataset(&a.data)?;
    train_all(&train, &a.train, &a.out, seed).map(|_| ())
}

fn snet_files(dir: &Path) -> CmdResult<Vec<PathBuf>> {
    let entries = fs::read_dir(dir).map_err(|e| Error::Io { path: dir.to_path_buf(), source: e })?;
    let mut files: Vec<PathBuf> = entries
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|x| x == "snet"))
        .collect();
    files.sort();
    Ok(files)
}

pub fn build_pool(a: &BuildPoolArgs) -> CmdResult {
    let networks = if a.networks.is_empty() { snet_files(&a.zoo)? } else { a.networks.clone() };
    if networks.is_empty() {
        return Err(Error::Config(format!("no .snet files in {}", a.zoo.display())).into());
    }
    // Paths are stored relative to the manifest when possible.
    let base = a.out.parent().filter(|p| !p.as_os_str().is_empty()).unwrap_or(Path::new("."));
    let base_abs = fs::canonicalize(base).ok();
    let listed = networks
        .iter()
        .map(|p| {
            let abs = fs::canonicalize(p).map_err(|e| Error::Io { path: p.clone(), source: e })?;
            Ok(base_abs
                .as_ref()
                .and_then(|b| abs.strip_prefix(b).ok().map(Path::to_path_buf))
                .unwrap_or(abs))
        })
        .collect::<CmdResult<Vec<_>>>()?;
    let manifest = PoolManifest {
        granularity: a.granularity,
        networks: listed,
    };
    let pool = PoolManifest::parse(&manifest.to_text(), base)?.load_pool()?;
    manifest.save(&a.out)?;
    println!(
        "pool of {} networks, {} fragments ({} starting) -> {}",
        pool.networks().len(),
        pool.fragments().len(),
        pool.starting().count(),
        a.out.display()
    );
    Ok(())
}

pub fn load_pool(path: &Path) -> CmdResult<FragmentPool> {
    Ok(PoolManifest::load(path)?.load_pool()?)
}

pub fn generate(a: &GenerateArgs, seed: u64) -> CmdResult {
    let pool = load_pool(&a.pool)?;
    let data = load_dataset(&a.data)?;
    let cfg = search_config(&a.search, seed);
    let res = generate::generate(&pool, &data, &cfg)?;
    generate::write_results(&res, &a.out)?;
    let s = &res.stats;
    println!(
        "{} stitched networks from {} starting fragments ({} joints evaluated, {} pruned) in {:.2}s -> {}",
        res.entries.len(),
        s.starting_fragments,
        s.candidates_evaluated,
        s.joints_rejected,
        res.wall_time.as_secs_f64(),
        a.out.display()
    );
    for e in res.entries.iter().take(5) {
        println!("  {} {:.4} {}", e.net.model_id(), e.score, e.net.provenance());
    }
    Ok(())
}

fn print_reports(reports: &[EvalReport]) {
    println!("model_id\tkind\taccuracy\tcorrect/total\tn_params\tn_fragments\toverall_cka");
    for r in reports {
        let kind = match r.kind {
            stitchkit::eval::ModelKind::Network => "network",
            stitchkit::eval::ModelKind::StitchNet => "stitchnet",
        };
        println!(
            "{}\t{kind}\t{:.4}\t{}/{}\t{}\t{}\t{:.6}",
            r.model_id, r.accuracy, r.correct, r.total, r.n_params, r.n_fragments, r.overall_cka
        );
    }
}

pub fn evaluate_cmd(a: &EvaluateArgs) -> CmdResult {
    let data = load_dataset(&a.data)?;
    let map = parse_map(&a.map.map, data.class_names())?;
    let models = a.models.iter().map(load_model).collect::<Result<Vec<_>, _>>()?;
    let refs: Vec<&dyn Model> = models.iter().map(|m| m.as_model()).collect();
    let reports = evaluate_all(&refs, &data, &map)?;
    print_reports(&reports);
    if let Some(out) = &a.out {
        emit_report(out, &reports, &[], &[])?;
    }
    Ok(())
}

/// Stitched networks of a results directory. A directory without
/// `results.csv` counts as an empty run.
pub fn load_results(dir: &Path) -> CmdResult<Vec<GeneratedNet>> {
    if !dir.is_dir() {
        return Err(Error::Io {
            path: dir.to_path_buf(),
            source: std::io::Error::new(std::io::ErrorKind::NotFound, "results directory not found"),
        }
        .into());
    }
    if !dir.join("results.csv").exists() {
        log::warn!("{} has no results.csv; treating it as empty", dir.display());
        return Ok(Vec::new());
    }
    Ok(generate::read_results(dir)?
        .into_iter()
        .map(|(net, score)| GeneratedNet { net, score, task_outputs: None })
        .collect())
}

pub fn ensemble(a: &EnsembleArgs) -> CmdResult {
    let data = load_dataset(&a.data)?;
    let map = parse_map(&a.map.map, data.class_names())?;
    let entries = load_results(&a.results)?;
    let sweep = sweep_for(&entries, &data, &map, &a.ensemble)?;
    let chosen = select_ensemble_pool(&entries, a.ensemble.cka_min, a.ensemble.size);
    if chosen.is_empty() {
        println!("no stitched network scores above {}", a.ensemble.cka_min);
    } else {
        let models: Vec<&dyn Model> = chosen.iter().map(|e| &e.net as &dyn Model).collect();
        let mapped = data.relabel(&map)?;
        let (probs, _) = ensemble_predict(&models, mapped.images(), &map)?;
        println!(
            "ensemble of {} networks: accuracy {:.4} on {} samples",
            models.len(),
            accuracy_of(&probs, mapped.labels()),
            mapped.len()
        );
        println!("size\taccuracy\ttotal_params\tmin_score");
        for r in &sweep {
            println!("{}\t{:.4}\t{}\t{:.6}", r.ensemble_size, r.accuracy, r.total_params, r.min_score);
        }
    }
    if let Some(out) = &a.out {
        emit_report(out, &[], &[], &sweep)?;
    }
    Ok(())
}

pub fn sweep_for(entries: &[GeneratedNet], test: &Dataset, map: &LabelMap, o: &EnsembleOpts) -> CmdResult<Vec<SweepRow>> {
    let ranked: Vec<_> = select_ensemble_pool(entries, o.cka_min, o.size)
        .into_iter()
        .map(|e| &e.net)
        .collect();
    if ranked.is_empty() {
        return Ok(Vec::new());
    }
    Ok(ensemble_sweep(&ranked, test, map)?)
}

/// Last-layer fine-tuning curves of every pool network on the mapped task.
pub fn finetune_curves(
    nets: &[Network],
    train: &Dataset,
    test: &Dataset,
    map: &LabelMap,
    budget: usize,
    seeds: std::ops::Range<u64>,
) -> CmdResult<Vec<CurveRow>> {
    let (train, test) = (train.relabel(map)?, test.relabel(map)?);
    let jobs: Vec<(&Network, u64)> = nets.iter().flat_map(|n| seeds.clone().map(move |s| (n, s))).collect();
    let curves = jobs
        .par_iter()
        .map(|&(net, seed)| {
            let cfg = TrainConfig { seed, ..TrainConfig::default() };
            let (_, curve) = finetune_last_layer(net, &train, &test, budget, &cfg)?;
            Ok(curve
                .into_iter()
                .map(|p| CurveRow {
                    method: "finetune".into(),
                    model_id: net.id().to_string(),
                    seed,
                    samples: p.samples,
                    accuracy: p.accuracy,
                })
                .collect::<Vec<_>>())
        })
        .collect::<Result<Vec<_>, Error>>()?;
    Ok(curves.into_iter().flatten().collect())
}

pub fn report(a: &ReportArgs, seed: u64) -> CmdResult {
    let test = load_dataset(&a.data)?;
    let map = parse_map(&a.map.map, test.class_names())?;
    let entries = load_results(&a.results)?;
    let pool = a.pool.as_deref().map(load_pool).transpose()?;
    let mut models: Vec<&dyn Model> = Vec::new();
    if let Some(p) = &pool {
        models.extend(p.networks().iter().map(|n| n as &dyn Model));
    }
    models.extend(entries.iter().map(|e| &e.net as &dyn Model));
    let evals = evaluate_all(&models, &test, &map)?;
    let curves = match (&a.train, &pool) {
        (Some(t), Some(p)) => {
            let train = load_dataset(t)?;
            finetune_curves(p.networks(), &train, &test, &map, a.finetune_budget, seed..seed + 1)?
        }
        _ => Vec::new(),
    };
    let sweep = sweep_for(&entries, &test, &map, &a.ensemble)?;
    emit_report(&a.out, &evals, &curves, &sweep)?;
    println!(
        "report for {} models ({} stitched), {} curve points, {} sweep rows -> {}",
        evals.len(),
        entries.len(),
        curves.len(),
        sweep.len(),
        a.out.display()
    );
    Ok(())
}

/// Best evaluated accuracy among `entries`, if any.
pub fn best_accuracy(entries: &[GeneratedNet], test: &Dataset, map: &LabelMap) -> CmdResult<Option<EvalReport>> {
    let reports = entries
        .par_iter()
        .map(|e| evaluate(&e.net, test, map))
        .collect::<Result<Vec<_>, _>>()?;
    // First of the highest, so ties keep the better-scored net.
    Ok(reports.into_iter().fold(None, |best: Option<EvalReport>, r| match best {
        Some(b) if b.accuracy >= r.accuracy => Some(b),
        _ => Some(r),
    }))
}
