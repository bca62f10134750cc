use std::collections::BTreeMap;
use std::time::Instant;

use stitchkit::eval::{emit_report, evaluate_all, CurveRow};
use stitchkit::generate::{self, GenerationConfig};
use stitchkit::nn::{Model, PoolManifest};

use crate::commands::{self, best_accuracy, finetune_curves, load_pool, parse_map, search_config, sweep_for, CmdResult};
use crate::DemoArgs;

/// data → zoo → pool → generation → evaluation, ensembles and reports, all
/// under `a.out`.
pub fn run(a: &DemoArgs, seed: u64) -> CmdResult {
    let started = Instant::now();
    let step = |what: &str| println!("[{:>6.1}s] {what}", started.elapsed().as_secs_f64());

    step("making data");
    let (train, test) = commands::write_data(&a.shape, &a.out.join("data"), seed)?;

    step("training the zoo");
    let paths = commands::train_all(&train, &a.train, &a.out.join("zoo"), seed)?;

    step("building the pool");
    let manifest_path = a.out.join("pool.txt");
    let manifest = PoolManifest {
        granularity: Default::default(),
        networks: paths
            .iter()
            .map(|p| p.strip_prefix(&a.out).map(|r| r.to_path_buf()).unwrap_or_else(|_| p.clone()))
            .collect(),
    };
    manifest.save(&manifest_path)?;
    let pool = load_pool(&manifest_path)?;
    println!("  {} fragments from {} networks", pool.fragments().len(), pool.networks().len());

    step("generating stitched networks");
    let cfg = search_config(&a.search, seed);
    let res = generate::generate(&pool, &train, &cfg)?;
    generate::write_results(&res, &a.out.join("results"))?;
    println!(
        "  {} stitched networks, {} joints evaluated, {} pruned",
        res.entries.len(),
        res.stats.candidates_evaluated,
        res.stats.joints_rejected
    );

    step("evaluating on the superclass subtask");
    let map = parse_map(&format!("group:{}", a.group), train.class_names())?;
    let mut models: Vec<&dyn Model> = pool.networks().iter().map(|n| n as &dyn Model).collect();
    models.extend(res.entries.iter().map(|e| &e.net as &dyn Model));
    let evals = evaluate_all(&models, &test, &map)?;
    for r in evals.iter().take(pool.networks().len()) {
        println!("  {}: accuracy {:.4}, {} params", r.model_id, r.accuracy, r.n_params);
    }
    if let Some(best) = best_accuracy(&res.entries, &test, &map)? {
        println!(
            "  best stitched: {} accuracy {:.4}, {} params, score {:.4}",
            best.model_id, best.accuracy, best.n_params, best.overall_cka
        );
    }

    step("ensembling");
    let sweep = sweep_for(&res.entries, &test, &map, &a.ensemble)?;
    if let Some(last) = sweep.last() {
        println!("  ensemble of {}: accuracy {:.4}", last.ensemble_size, last.accuracy);
    }

    step("learning curves");
    let seeds = seed..seed + a.curve_seeds;
    let mut curves = finetune_curves(pool.networks(), &train, &test, &map, a.finetune_budget, seeds.clone())?;
    for &m in &a.curve_samples {
        for s in seeds.clone() {
            let c = GenerationConfig { samples: m, seed: s, ..cfg.clone() };
            let run = generate::generate(&pool, &train, &c)?;
            if let Some(best) = best_accuracy(&run.entries, &test, &map)? {
                curves.push(CurveRow {
                    method: "stitchnet".into(),
                    model_id: best.model_id,
                    seed: s,
                    samples: m,
                    accuracy: best.accuracy,
                });
            }
        }
    }

    print_curve_summary(&curves);

    step("writing reports");
    emit_report(&a.out.join("report"), &evals, &curves, &sweep)?;
    step(&format!("done -> {}", a.out.display()));
    Ok(())
}

/// Mean ± sample std of accuracy across seeds, per method and sample count.
fn print_curve_summary(curves: &[CurveRow]) {
    let mut groups: BTreeMap<(String, usize), Vec<f64>> = BTreeMap::new();
    for r in curves {
        // Stitched rows name a different best net per seed; pool them.
        let who = if r.method == "stitchnet" { r.method.clone() } else { format!("{} {}", r.method, r.model_id) };
        groups.entry((who, r.samples)).or_default().push(r.accuracy);
    }
    for ((who, samples), accs) in &groups {
        let n = accs.len() as f64;
        let mean = accs.iter().sum::<f64>() / n;
        let var = if accs.len() > 1 { accs.iter().map(|a| (a - mean).powi(2)).sum::<f64>() / (n - 1.0) } else { 0.0 };
        println!("  {who:<16} {samples:>6} samples: {mean:.4} ± {:.4} (n={})", var.sqrt(), accs.len());
    }
}
