mod common;

use common::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use stitchkit::eval::*;
use stitchkit::generate::{generate, GenerationConfig};
use stitchkit::nn::{Layer, LayerKind, Model, Network};
use stitchkit::zoo::{apply_label_map, ArchSpec, Dataset, LabelMap, Split};
use stitchkit::{Error, Tensor};

fn names(k: usize) -> Vec<String> {
    (0..k).map(|c| format!("c{c}")).collect()
}

/// Linear layer with the given weight, then softmax, on flat k-wide input.
fn linear_net(id: &str, w: Tensor) -> Network {
    let (out, inp) = (w.shape()[0], w.shape()[1]);
    let layers = vec![
        Layer::linear("fc", w, Tensor::zeros(&[out])).unwrap(),
        Layer::simple("sm", LayerKind::Softmax),
    ];
    Network::new(id, vec![inp], layers, names(out)).unwrap()
}

fn eye(k: usize) -> Tensor {
    Tensor::new(vec![k, k], (0..k * k).map(|i| f64::from(i % (k + 1) == 0)).collect()).unwrap()
}

/// Each sample is `scale` times the one-hot of its label.
fn one_hot_data(labels: &[usize], k: usize, scale: f64) -> Dataset {
    let mut x = vec![0.0; labels.len() * k];
    for (i, &l) in labels.iter().enumerate() {
        x[i * k + l] = scale;
    }
    let images = Tensor::new(vec![labels.len(), k], x).unwrap();
    Dataset::new(images, labels.to_vec(), names(k), 0, Split::Test).unwrap()
}

fn random_tensor(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap()
}

#[test]
fn perfect_model_scores_one() {
    let labels = [0, 1, 2, 2, 1, 0, 0];
    let d = one_hot_data(&labels, 3, 40.0);
    let r = evaluate(&linear_net("id", eye(3)), &d, &LabelMap::identity(&names(3)).unwrap()).unwrap();
    assert_eq!(r.accuracy, 1.0);
    assert_eq!((r.correct, r.total), (7, 7));
    assert_eq!(r.per_class.iter().map(|c| c.total).collect::<Vec<_>>(), [3, 2, 2]);
    assert_eq!(r.kind, ModelKind::Network);
    assert_eq!((r.n_params, r.n_fragments, r.overall_cka), (12, 1, 1.0));
}

#[test]
fn uniform_model_scores_the_first_class_frequency() {
    let labels = [1, 0, 1, 1, 0, 1, 0, 1, 1, 1];
    let d = one_hot_data(&labels, 2, 1.0);
    let zero = Tensor::zeros(&[2, 2]);
    let r = evaluate(&linear_net("flat", zero), &d, &LabelMap::identity(&names(2)).unwrap()).unwrap();
    assert_eq!(r.accuracy, 3.0 / 10.0);
    assert_eq!(r.correct, 3);
}

#[test]
fn matches_a_per_sample_loop() {
    let d = data(8, 4, 16, 11).with_split(Split::Full);
    let net = init(&ArchSpec::cnn_a(8), "a", &d, 3);
    let map = LabelMap::grouped(8, 4).unwrap();
    let r = evaluate(&net, &d, &map).unwrap();
    let mut correct = 0;
    for i in 0..d.len() {
        let one = d.images().select_samples(&[i]).unwrap();
        let probs = net.forward(&one).unwrap();
        let mut mass = vec![0.0; map.num_targets()];
        for (c, p) in probs.data().iter().enumerate() {
            if let Some(t) = map.target(c) {
                mass[t] += p;
            }
        }
        let mut best = 0;
        for t in 1..mass.len() {
            if mass[t] > mass[best] {
                best = t;
            }
        }
        correct += usize::from(Some(best) == map.target(d.labels()[i]));
    }
    assert_eq!(r.correct, correct);
    assert_eq!(r.accuracy, correct as f64 / d.len() as f64);
}

#[test]
fn sample_order_does_not_matter() {
    let d = data(4, 5, 8, 12).with_split(Split::Test);
    let net = init(&three_layer(4), "t", &d, 1);
    let map = LabelMap::identity(d.class_names()).unwrap();
    let rev: Vec<usize> = (0..d.len()).rev().collect();
    let a = evaluate(&net, &d, &map).unwrap();
    let b = evaluate(&net, &d.subset(&rev).unwrap(), &map).unwrap();
    assert_eq!(a, b);
}

#[test]
fn evaluation_refuses_training_data_and_wide_maps() {
    let d = one_hot_data(&[0, 1], 2, 1.0);
    let net = linear_net("n", eye(2));
    let train = d.clone().with_split(Split::Train);
    assert!(matches!(
        evaluate(&net, &train, &LabelMap::identity(&names(2)).unwrap()),
        Err(Error::Config(_))
    ));
    let wide = LabelMap::new(&[(0, 0), (1, 0), (2, 1)], names(2)).unwrap();
    assert!(matches!(evaluate(&net, &d, &wide), Err(Error::Config(_))));
}

#[test]
fn single_model_ensemble_is_the_model() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let net = linear_net("r", random_tensor(&mut rng, &[4, 6]));
    let batch = random_tensor(&mut rng, &[9, 6]);
    let map = LabelMap::identity(&names(4)).unwrap();
    let (probs, labels) = ensemble_predict(&[&net], &batch, &map).unwrap();
    let own = apply_label_map(&net.forward(&batch).unwrap(), &map).unwrap();
    assert_eq!(probs, own);
    assert_eq!(labels, own.argmax_rows());
    let (p3, l3) = ensemble_predict(&[&net, &net, &net], &batch, &map).unwrap();
    assert_eq!(l3, labels);
    for (a, b) in p3.data().iter().zip(own.data()) {
        assert!((a - b).abs() <= 1e-15);
    }
}

#[test]
fn opposite_certain_models_tie_toward_class_zero() {
    let a = linear_net("a", Tensor::new(vec![2, 1], vec![1000.0, -1000.0]).unwrap());
    let b = linear_net("b", Tensor::new(vec![2, 1], vec![-1000.0, 1000.0]).unwrap());
    let batch = Tensor::new(vec![1, 1], vec![1.0]).unwrap();
    let (probs, labels) = ensemble_predict(&[&a, &b], &batch, &LabelMap::identity(&names(2)).unwrap()).unwrap();
    assert_eq!(probs.data(), [0.5, 0.5]);
    assert_eq!(labels, [0]);
}

#[test]
fn ensemble_mean_matches_explicit_average() {
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let nets: Vec<Network> = (0..5)
        .map(|i| linear_net(&format!("m{i}"), random_tensor(&mut rng, &[8, 5])))
        .collect();
    let models: Vec<&dyn Model> = nets.iter().map(|n| n as &dyn Model).collect();
    let batch = random_tensor(&mut rng, &[20, 5]);
    let map = LabelMap::grouped(8, 2).unwrap();
    let (probs, labels) = ensemble_predict(&models, &batch, &map).unwrap();
    let mut oracle = vec![0.0; 20 * 4];
    for n in &nets {
        let mapped = apply_label_map(&n.forward(&batch).unwrap(), &map).unwrap();
        for (o, v) in oracle.iter_mut().zip(mapped.data()) {
            *o += v;
        }
    }
    for (p, o) in probs.data().iter().zip(&oracle) {
        assert!((p - o / 5.0).abs() <= 1e-12);
    }
    for row in probs.data().chunks(4) {
        assert!((row.iter().sum::<f64>() - 1.0).abs() <= 1e-9);
    }
    assert_eq!(labels, probs.argmax_rows());
}

#[test]
fn ensemble_rejects_mismatched_or_empty_inputs() {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let a = linear_net("a", random_tensor(&mut rng, &[3, 2]));
    let b = linear_net("b", random_tensor(&mut rng, &[2, 2]));
    let batch = random_tensor(&mut rng, &[4, 2]);
    let map = LabelMap::grouped(2, 1).unwrap();
    assert!(ensemble_predict(&[&a, &b], &batch, &LabelMap::identity(&names(3)).unwrap()).is_err());
    assert!(ensemble_predict(&[], &batch, &map).is_err());
}

#[test]
fn pool_selection_filters_and_ranks() {
    let d = data(8, 5, 16, 4);
    let pool = desk_pool(&d);
    let cfg = GenerationConfig {
        threshold: 0.2,
        samples: 16,
        ..GenerationConfig::default()
    };
    let res = generate(&pool, &d, &cfg).unwrap();
    assert!(res.entries.len() > 2);
    let picked = select_ensemble_pool(&res.entries, 0.5, 100);
    assert!(picked.iter().all(|e| e.score > 0.5));
    assert_eq!(picked.len(), res.entries.iter().filter(|e| e.score > 0.5).count());
    assert!(picked.windows(2).all(|w| w[0].score >= w[1].score));
    assert!(select_ensemble_pool(&res.entries, 1.0, 10).iter().all(|e| e.score > 1.0));
    let top = select_ensemble_pool(&res.entries, 0.0, 1);
    assert_eq!(top[0].net, res.entries[0].net);
}

fn desk_reports() -> (Vec<EvalReport>, Vec<SweepRow>) {
    let d = data(8, 5, 16, 4);
    let pool = desk_pool(&d);
    let cfg = GenerationConfig {
        threshold: 0.2,
        samples: 16,
        ..GenerationConfig::default()
    };
    let res = generate(&pool, &d, &cfg).unwrap();
    let test = data(8, 3, 16, 40).with_split(Split::Test);
    let map = LabelMap::grouped(8, 4).unwrap();
    let mut models: Vec<&dyn Model> = pool.networks().iter().map(|n| n as &dyn Model).collect();
    models.extend(res.entries.iter().map(|e| &e.net as &dyn Model));
    let evals = evaluate_all(&models, &test, &map).unwrap();
    let ranked: Vec<_> = select_ensemble_pool(&res.entries, 0.2, 5).into_iter().map(|e| &e.net).collect();
    let sweep = ensemble_sweep(&ranked, &test, &map).unwrap();
    let first = evaluate(ranked[0], &test, &map).unwrap();
    assert_eq!(sweep[0].accuracy, first.accuracy);
    (evals, sweep)
}

#[test]
fn report_files_round_trip_and_repeat_byte_for_byte() {
    let (evals, sweep) = desk_reports();
    let curves = vec![
        CurveRow { method: "finetune".into(), model_id: "cnn_a".into(), seed: 0, samples: 0, accuracy: 0.5 },
        CurveRow { method: "finetune".into(), model_id: "cnn_a".into(), seed: 0, samples: 32, accuracy: 0.625 },
    ];
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    emit_report(a.path(), &evals, &curves, &sweep).unwrap();
    emit_report(b.path(), &evals, &curves, &sweep).unwrap();
    for f in ["results.csv", "histograms.csv", "learning_curve.csv", "ensemble_sweep.csv"] {
        assert_eq!(std::fs::read(a.path().join(f)).unwrap(), std::fs::read(b.path().join(f)).unwrap());
    }
    assert_eq!(read_reports(&a.path().join("results.csv")).unwrap(), evals);
    assert_eq!(read_curves(&a.path().join("learning_curve.csv")).unwrap(), curves);
    assert_eq!(read_sweep(&a.path().join("ensemble_sweep.csv")).unwrap(), sweep);
    let hist = read_histograms(&a.path().join("histograms.csv")).unwrap();
    assert_eq!(hist, histograms(&evals));
}

#[test]
fn histogram_counts_cover_every_stitched_net() {
    let (evals, _) = desk_reports();
    let nets = evals.iter().filter(|e| e.kind == ModelKind::StitchNet).count();
    let hist = histograms(&evals);
    for metric in ["accuracy", "n_fragments", "score", "n_params"] {
        let total: usize = hist.iter().filter(|h| h.metric == metric).map(|h| h.count).sum();
        assert_eq!(total, nets, "{metric}");
    }
}

#[test]
fn empty_inputs_give_header_only_files() {
    let dir = tempfile::tempdir().unwrap();
    emit_report(dir.path(), &[], &[], &[]).unwrap();
    let read = |f: &str| std::fs::read_to_string(dir.path().join(f)).unwrap();
    assert_eq!(read("results.csv"), format!("{}\n", REPORT_HEADER.join(",")));
    assert_eq!(read("histograms.csv"), format!("{}\n", HISTOGRAM_HEADER.join(",")));
    assert_eq!(read("learning_curve.csv"), format!("{}\n", CURVE_HEADER.join(",")));
    assert_eq!(read("ensemble_sweep.csv"), format!("{}\n", SWEEP_HEADER.join(",")));
    assert!(read_reports(&dir.path().join("results.csv")).unwrap().is_empty());
}
