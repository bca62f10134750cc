mod common;

use common::*;
use stitchkit::generate::*;
use stitchkit::nn::{FragmentPool, Granularity, Model};
use stitchkit::zoo::Split;
use stitchkit::{Error, StitchNet};

fn cfg(span: usize, threshold: f64) -> GenerationConfig {
    GenerationConfig {
        span,
        threshold,
        samples: 16,
        ..GenerationConfig::default()
    }
}

#[test]
fn single_network_pool_recomposes_itself() {
    let d = data(4, 6, 8, 1);
    let net = init(&three_layer(4), "tri", &d, 2);
    let pool = FragmentPool::new(vec![net.clone()], Granularity::SingleCut).unwrap();
    assert_eq!(pool.fragments().len(), 3);
    let res = generate(&pool, &d, &cfg(pool.fragments().len(), 0.0)).unwrap();
    let own = res
        .entries
        .iter()
        .find(|e| {
            let segs = e.net.segments();
            segs.len() == 3 && segs.windows(2).all(|w| w[0].end_layer == w[1].start_layer)
        })
        .expect("in-order recomposition is emitted");
    assert!(own.score >= 0.99, "score {}", own.score);
    let a = own.net.forward(d.images()).unwrap();
    let b = net.forward(d.images()).unwrap();
    assert_eq!(a.argmax_rows(), b.argmax_rows());
}

#[test]
fn threshold_one_emits_nothing() {
    let d = data(8, 5, 16, 3);
    let pool = desk_pool(&d);
    let res = generate(&pool, &d, &cfg(2, 1.0)).unwrap();
    // Whole networks that cannot be cut would still appear; the desk nets all cut.
    assert!(res.entries.is_empty());
    assert_eq!(res.stats.emitted, 0);
}

#[test]
fn emitted_nets_respect_search_invariants() {
    let d = data(8, 5, 16, 4);
    let pool = desk_pool(&d);
    let c = GenerationConfig {
        threshold: 0.3,
        ..GenerationConfig::default()
    };
    let res = generate(&pool, &d, &c).unwrap();
    assert!(!res.entries.is_empty());
    let starts = pool.starting().count();
    let bound = joint_evaluation_bound(starts, c.span, c.max_fragments);
    assert!(res.stats.candidates_evaluated as u128 <= bound);
    assert!(res.stats.max_depth <= c.max_fragments);
    for w in res.entries.windows(2) {
        assert!(w[0].score >= w[1].score);
    }
    for (i, e) in res.entries.iter().enumerate() {
        assert_eq!(e.net.model_id(), format!("sn{:03}", i + 1));
        assert!(e.net.is_complete());
        let mut prefix = 1.0;
        for s in &e.net.segments()[1..] {
            let next = prefix * s.joint_cka;
            assert!(next <= prefix + 1e-12);
            prefix = next;
            assert!(prefix > c.threshold);
        }
        assert!((prefix - e.score).abs() < 1e-12);
    }
}

#[test]
fn repeated_runs_are_identical() {
    let d = data(8, 5, 16, 5);
    let pool = desk_pool(&d);
    let c = cfg(2, 0.3);
    let a = generate(&pool, &d, &c).unwrap();
    let b = generate(&pool, &d, &c).unwrap();
    assert_eq!(a.entries, b.entries);
    assert_eq!(a.stats, b.stats);
    assert_eq!(a.samples, b.samples);
}

#[test]
fn inference_outputs_match_a_second_pass() {
    let d = data(8, 5, 16, 6);
    let pool = desk_pool(&d);
    let res = generate_with_inference(&pool, &d, &cfg(2, 0.3)).unwrap();
    assert!(!res.entries.is_empty());
    for e in &res.entries {
        let kept = e.task_outputs.as_ref().unwrap();
        let again = e.net.forward(d.images()).unwrap();
        assert_eq!(kept.shape(), again.shape());
        for (x, y) in kept.data().iter().zip(again.data()) {
            assert!((x - y).abs() <= 1e-12);
        }
        for row in kept.data().chunks(kept.shape()[1]) {
            assert!((row.iter().sum::<f64>() - 1.0).abs() <= 1e-9);
        }
    }
    let plain = generate(&pool, &d, &cfg(2, 0.3)).unwrap();
    assert!(plain.entries.iter().all(|e| e.task_outputs.is_none()));
}

#[test]
fn top_cka_beats_fewest_params_on_mean_cka() {
    let d = data(8, 5, 16, 7);
    let pool = desk_pool(&d);
    let samples = d.sample(16, 0).unwrap().images().clone();
    for f in pool.starting() {
        let q = StitchNet::from_starting(f).unwrap();
        let mean = |s| {
            let c = select_candidates(&pool, &samples, &q, 2, s).unwrap();
            c.iter().map(|c| c.cka).sum::<f64>() / c.len() as f64
        };
        assert!(mean(CandidateStrategy::TopCka) >= mean(CandidateStrategy::FewestParams));
    }
}

#[test]
fn equal_scores_fall_back_to_id_order() {
    let d = data(4, 6, 8, 8);
    let arch = three_layer(4);
    let twin = |id| init(&arch, id, &d, 9);
    let pool = FragmentPool::new(vec![twin("zeta"), twin("alpha")], Granularity::SingleCut).unwrap();
    let samples = d.sample(16, 0).unwrap().images().clone();
    let start = pool.fragment("zeta[0:3]").unwrap();
    let q = StitchNet::from_starting(start).unwrap();
    let all = select_candidates(&pool, &samples, &q, 10, CandidateStrategy::TopCka).unwrap();
    assert_eq!(all.len(), 4);
    let ids: Vec<String> = all.iter().map(|c| c.fragment.id()).collect();
    // alpha[3:5] and zeta[3:5] tie exactly.
    assert_eq!(all[0].cka, all[1].cka);
    assert_eq!(&ids[..2], ["alpha[3:5]", "zeta[3:5]"]);
    let one = select_candidates(&pool, &samples, &q, 1, CandidateStrategy::TopCka).unwrap();
    assert_eq!(one[0].fragment.id(), "alpha[3:5]");
}

#[test]
fn bound_formula() {
    assert_eq!(joint_evaluation_bound(3, 2, 16), 3 * 65535);
    assert_eq!(joint_evaluation_bound(2, 1, 5), 10);
    assert_eq!(joint_evaluation_bound(1, 3, 3), 13);
}

#[test]
fn bad_inputs_are_rejected() {
    let d = data(4, 6, 8, 1);
    let pool = desk_pool(&data(4, 6, 16, 1));
    let tiny = FragmentPool::new(vec![init(&three_layer(4), "tri", &d, 2)], Granularity::SingleCut).unwrap();
    let test = d.clone().with_split(Split::Test);
    assert!(matches!(generate(&tiny, &test, &cfg(2, 0.5)), Err(Error::Config(_))));
    let by_ids = GenerationConfig {
        starting: StartingSelection::ByIds(vec!["nope".into()]),
        ..cfg(2, 0.5)
    };
    assert!(matches!(generate(&pool, &d, &by_ids), Err(Error::Config(_))));
    for bad in [cfg(0, 0.5), cfg(2, 1.5), GenerationConfig { samples: 1, ..cfg(2, 0.5) }] {
        assert!(generate(&tiny, &d, &bad).is_err());
    }
    let too_many = GenerationConfig { samples: 500, ..cfg(2, 0.5) };
    assert!(generate(&tiny, &d, &too_many).is_err());
}

#[test]
fn starting_selection_by_network_id() {
    let d = data(8, 5, 16, 3);
    let pool = desk_pool(&d);
    let c = GenerationConfig {
        starting: StartingSelection::ByIds(vec!["mlp_c".into()]),
        ..cfg(2, 0.2)
    };
    let res = generate(&pool, &d, &c).unwrap();
    assert_eq!(res.stats.starting_fragments, 1);
    assert!(res.entries.iter().all(|e| e.net.segments()[0].source_network_id == "mlp_c"));
}

#[test]
fn results_directory_round_trips() {
    let d = data(8, 5, 16, 4);
    let pool = desk_pool(&d);
    let res = generate(&pool, &d, &cfg(2, 0.3)).unwrap();
    let dir = tempfile::tempdir().unwrap();
    write_results(&res, dir.path()).unwrap();
    let back = read_results(dir.path()).unwrap();
    assert_eq!(back.len(), res.entries.len());
    for ((net, score), e) in back.iter().zip(&res.entries) {
        assert_eq!(net, &e.net);
        assert_eq!(*score, e.score);
    }
    assert_eq!(read_stats(dir.path()).unwrap(), res.stats);
    let first = std::fs::read(dir.path().join("results.csv")).unwrap();
    let again = tempfile::tempdir().unwrap();
    write_results(&res, again.path()).unwrap();
    assert_eq!(first, std::fs::read(again.path().join("results.csv")).unwrap());
}
