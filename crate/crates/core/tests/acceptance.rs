//! End-to-end acceptance checks. Runs as a plain binary (`harness = false`)
//! and prints one PASS/FAIL line per criterion; exits nonzero on any FAIL.
//!
//! `cargo test -p drag --test acceptance` trains twelve models and takes
//! several minutes on a single core.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;
use std::time::Instant;

use drag::config::RunConfig;
use drag::correlation::{
    attention_correlation, attention_weights, classify, gcn_layer, prepare_adjacency, AblationMode, AttentionParams,
    ClassifierParams,
};
use drag::data::{generate, generate_dataset, DatasetConfig};
use drag::kmeans::{kmeans, DEFAULT_RESTARTS};
use drag::model::{cls_loss, grad_check_config, pipeline_grad_check, DragParams, ModelConfig};
use drag::region::{
    cgl_pretrain_loss, dis_loss, div_loss, kmeans_cluster, region_features, ClusterAssignment, SignatureBuilder,
};
use drag::train::checkpoint::{load_checkpoint, save_checkpoint};
use drag::train::metrics::Confusion;
use drag::train::schedule::{
    cgl_agreement, cgl_fit_loss, compute_features, evaluate, run_ablation, run_schedule, StageKind, StageSchedule,
    Trainer,
};
use drag::train::TrainOutcome;
use drag::{Graph, Tensor, Var};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

mod common;
use common::*;

/// The locked benchmark seed (dataset and training).
const SEED: u64 = 7;
/// Training seeds for the ablation ordering: the locked seed and the next two.
const ABLATION_SEEDS: [u64; 3] = [7, 8, 9];
/// Test accuracies of the locked run, recorded from this implementation.
const ANCHOR_FULL: f64 = 0.926;
const ANCHOR_NO_GCN: f64 = 0.890;
const ANCHOR_TOLERANCE: f64 = 0.005;
/// Orderings violated by no more than this many accuracy points are ties.
const TIE_POINTS: f64 = 0.5;
const ORACLE_INSTANCES: u64 = 100;

struct Outcome {
    pass: bool,
    detail: String,
}

fn outcome(pass: bool, detail: String) -> Outcome {
    Outcome { pass, detail }
}

fn eval(f: impl FnOnce(&mut Graph) -> Var) -> Tensor {
    let mut g = Graph::new();
    let v = f(&mut g);
    g.tensor(v)
}

fn scalar(f: impl FnOnce(&mut Graph) -> Var) -> f64 {
    let mut g = Graph::new();
    let v = f(&mut g);
    g.scalar(v).unwrap()
}

fn grad_check_criterion() -> Outcome {
    let config = grad_check_config();
    let start = Instant::now();
    let report = pipeline_grad_check(&config, 0, 2, 1e-4).unwrap();
    let secs = start.elapsed().as_secs_f64();
    let dims = (config.regions, config.channels(), config.side());
    outcome(
        report.max_rel_error < 1e-4 && secs < 60.0 && dims == (4, 8, 4),
        format!(
            "B=2 N={} C={} H=W={}: max relative error {:.2e} over {} entries in {secs:.1} s (limits 1e-4, 60 s)",
            dims.0, dims.1, dims.2, report.max_rel_error, report.entries_checked
        ),
    )
}

fn oracle_criterion() -> Outcome {
    let mut worst: BTreeMap<&str, f64> = BTreeMap::new();
    let mut note = |name, err: f64| {
        let e = worst.entry(name).or_insert(0.0);
        *e = e.max(err);
    };
    let rel = |a: f64, b: f64| (a - b).abs() / a.abs().max(b.abs()).max(1.0);
    for seed in 0..ORACLE_INSTANCES {
        let mut rng = ChaCha8Rng::seed_from_u64(1000 + seed);
        let (b, c, n, h, w) =
            (rng.gen_range(1..3), rng.gen_range(2..9), rng.gen_range(1..5), rng.gen_range(1..5), rng.gen_range(1..5));
        let n = n.min(c);

        let fb = random(&mut rng, &[b, c, h, w], -2.0, 2.0);
        let cr = random(&mut rng, &[b, n, c], 0.0, 1.0);
        let fw = eval(|g| {
            let (f, r) = (g.leaf(&fb), g.leaf(&cr));
            region_features(g, f, r).unwrap()
        });
        note("region_features", fw.max_abs_diff(&features_oracle(&fb, &cr)));

        let dis = scalar(|g| {
            let v = g.leaf(&fw);
            dis_loss(g, v).unwrap()
        });
        let div = scalar(|g| {
            let v = g.leaf(&fw);
            div_loss(g, v).unwrap()
        });
        note("dis_loss", rel(dis, dis_oracle(&fw)));
        note("div_loss", rel(div, div_oracle(&fw)));

        let dk = rng.gen_range(1..5);
        let mut p = AttentionParams::init(h * w, dk, n, &mut rng);
        p.bq = random(&mut rng, &[dk], -0.5, 0.5);
        p.bv = random(&mut rng, &[n], -0.5, 0.5);
        let a = eval(|g| {
            let x = g.leaf(&fw);
            let vars = p.bind(g);
            attention_correlation(g, x, &vars).unwrap()
        });
        for (bi, (_, oa)) in attention_oracle(&fw, &p).into_iter().enumerate() {
            note("attention", max_diff(&oa, &a, &[bi]));
        }

        let d = h * w;
        let x = random(&mut rng, &[b, n, d], -1.0, 1.0);
        let adj = random(&mut rng, &[b, n, n], 0.0, 1.0);
        let theta = random(&mut rng, &[d, d], -1.0, 1.0);
        let out = eval(|g| {
            let (xv, av, tv) = (g.leaf(&x), g.leaf(&adj), g.leaf(&theta));
            gcn_layer(g, xv, av, tv).unwrap()
        });
        for bi in 0..b {
            let want = relu_rows(matmul(&matmul(&rows(&adj, &[bi]), &rows(&x, &[bi])), &rows(&theta, &[])));
            note("gcn_layer", max_diff(&want, &out, &[bi]));
        }

        let hard = ClusterAssignment::from_labels(&random_labels(&mut rng, c, n), n).unwrap();
        let cr_prime = random(&mut rng, &[b, n, c], 1e-3, 1.0 - 1e-3);
        let bce = scalar(|g| {
            let v = g.leaf(&cr_prime);
            cgl_pretrain_loss(g, v, &hard).unwrap()
        });
        note("cgl_pretrain_loss", rel(bce, bce_oracle(&cr_prime, hard.matrix())));

        let fc = random(&mut rng, &[b, 1, d, 1], -1.0, 1.0);
        let fp = random(&mut rng, &[b, n, d, 1], -1.0, 1.0);
        let cls = ClassifierParams {
            weight: random(&mut rng, &[(n + 1) * d, 2], -2.0, 2.0),
            bias: random(&mut rng, &[2], -1.0, 1.0),
        };
        let labels: Vec<u8> = (0..b).map(|_| rng.gen_range(0..2)).collect();
        let mut g = Graph::new();
        let (cv, fv) = (g.leaf(&fc), g.leaf(&fp));
        let vars = cls.bind(&mut g);
        let probs = classify(&mut g, cv, fv, &vars).unwrap();
        let loss = cls_loss(&mut g, probs, &labels).unwrap();
        let (want_probs, want_loss) = classify_oracle(&fc, &fp, &cls.weight, &cls.bias, &labels);
        note("cls_loss", rel(g.scalar(loss).unwrap(), want_loss));
        note("classify", max_diff(&want_probs, &g.tensor(probs), &[]));
    }
    let pass = worst.values().all(|&e| e <= 1e-10);
    let parts: Vec<String> = worst.iter().map(|(k, v)| format!("{k} {v:.1e}")).collect();
    outcome(pass, format!("{ORACLE_INSTANCES} instances each, worst error: {} (limit 1e-10)", parts.join(", ")))
}

fn normalization_criterion() -> Outcome {
    let mut adj_err = 0.0f64;
    for n in 1..=12 {
        let want = Tensor::eye(n).reshape(&[1, n, n]).unwrap();
        for a in [Tensor::eye(n), Tensor::zeros(&[n, n])] {
            let out = eval(|g| {
                let v = g.leaf(&a.clone().reshape(&[1, n, n]).unwrap());
                prepare_adjacency(g, v).unwrap()
            });
            adj_err = adj_err.max(out.max_abs_diff(&want));
        }
    }
    let mut row_err = 0.0f64;
    for seed in 0..200u64 {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (b, n, m) = (rng.gen_range(1..4), rng.gen_range(1..9), rng.gen_range(1..9));
        let scale = [1.0, 30.0, 300.0][seed as usize % 3];
        let logits = random(&mut rng, &[b, n, m], -scale, scale);
        let s = eval(|g| {
            let v = g.leaf(&logits);
            g.softmax(v, 2).unwrap()
        });
        let fw = random(&mut rng, &[b, n, 2, 3], -scale, scale);
        let p = AttentionParams::init(6, 3, n, &mut rng);
        let att = eval(|g| {
            let x = g.leaf(&fw);
            let vars = p.bind(g);
            attention_weights(g, x, &vars).unwrap()
        });
        for t in [&s, &att] {
            let width = t.shape()[2];
            for r in t.data().chunks(width) {
                row_err = row_err.max((r.iter().sum::<f64>() - 1.0).abs());
            }
        }
    }
    outcome(
        adj_err <= 1e-12 && row_err <= 1e-12,
        format!("adjacency of I and 0 for N=1..12 within {adj_err:.1e}; 400 softmax batches, worst row sum error {row_err:.1e} (limit 1e-12)"),
    )
}

fn kmeans_criterion() -> Outcome {
    let mut misses = 0;
    let mut increases = 0;
    for seed in 0..50u64 {
        let mut rng = ChaCha8Rng::seed_from_u64(500 + seed);
        let c = rng.gen_range(2..9);
        let dim = rng.gen_range(1..5);
        let points: Vec<Vec<f64>> =
            (0..c).map(|_| (0..2 * dim).map(|_| rng.gen_range(0..8) as f64).collect()).collect();
        let result = kmeans(&points, 2, seed, DEFAULT_RESTARTS).unwrap();
        if (result.wcss - exhaustive_two_partition(&points)).abs() > 1e-9 {
            misses += 1;
        }
        for h in &result.all_histories {
            increases += h.windows(2).filter(|p| p[1] > p[0] + 1e-12 * p[0].max(1.0)).count();
        }
    }
    outcome(
        misses == 0 && increases == 0,
        format!("50 instances with C<=8: {misses} above the exhaustive optimum, {increases} WCSS increases"),
    )
}

fn cgl_criterion(data: &drag::data::Dataset) -> Outcome {
    let config = ModelConfig::default();
    let schedule = StageSchedule::default();
    let mut trainer = Trainer::new(&config, &schedule, AblationMode::Full, SEED).unwrap();
    let stage = |k| schedule.stages.iter().find(|s| s.kind == k).unwrap().clone();
    trainer.run_stage(&stage(StageKind::PretrainBackbone), data).unwrap();

    // the same clustering the trainer performs on entering CGL pretraining
    let fb = compute_features(&trainer.params, &config, &data.train).unwrap();
    let mut sig = SignatureBuilder::new();
    sig.push(&fb).unwrap();
    let (assignment, _) = kmeans_cluster(&sig.finish().unwrap(), config.regions, SEED).unwrap();
    let before = cgl_fit_loss(&trainer.params, &config, &assignment, &fb).unwrap();
    trainer.assignment = Some(assignment.clone());
    trainer.run_stage(&stage(StageKind::PretrainCgl), data).unwrap();
    let fb = compute_features(&trainer.params, &config, &data.train).unwrap();
    let after = cgl_fit_loss(&trainer.params, &config, &assignment, &fb).unwrap();
    let agreement = cgl_agreement(&trainer.params, &config, &assignment, &fb).unwrap();
    let drop = 1.0 - after / before;
    outcome(
        drop >= 0.5 && agreement >= 0.95,
        format!(
            "fit loss {before:.4} -> {after:.4} ({:.1}% drop, need 50%), agreement {:.2}% (need 95%)",
            100.0 * drop,
            100.0 * agreement
        ),
    )
}

fn accuracy_of(runs: &[(AblationMode, TrainOutcome)], mode: AblationMode, data: &drag::data::Dataset) -> f64 {
    let (_, out) = runs.iter().find(|(m, _)| *m == mode).unwrap();
    evaluate(&out.params, &ModelConfig::default(), mode, &data.test).unwrap().accuracy
}

fn benchmark_criterion(data: &drag::data::Dataset, runs: &[(AblationMode, TrainOutcome)], secs: f64) -> Outcome {
    let full = accuracy_of(runs, AblationMode::Full, data);
    let no_gcn = accuracy_of(runs, AblationMode::NoGcn, data);
    let majority = 1.0 - data.test.private_count() as f64 / data.test.len() as f64;
    let anchored = ANCHOR_FULL.is_nan() || (full - ANCHOR_FULL).abs() <= ANCHOR_TOLERANCE;
    let anchored = anchored && (ANCHOR_NO_GCN.is_nan() || (no_gcn - ANCHOR_NO_GCN).abs() <= ANCHOR_TOLERANCE);
    outcome(
        full >= majority + 0.15 && full > no_gcn && secs < 1800.0 && anchored,
        format!(
            "full {:.2}% vs majority {:.2}% (+{:.2} points, need 15), no_gcn {:.2}%, anchors {}, {secs:.0} s for all four modes (limit 1800 s)",
            100.0 * full,
            100.0 * majority,
            100.0 * (full - majority),
            100.0 * no_gcn,
            if ANCHOR_FULL.is_nan() { "unrecorded".to_string() } else if anchored { "match".to_string() } else { "DIFFER".to_string() },
        ),
    )
}

fn ordering_criterion(data: &drag::data::Dataset, per_seed: &[Vec<(AblationMode, TrainOutcome)>]) -> Outcome {
    let mean = |mode| {
        100.0 * per_seed.iter().map(|runs| accuracy_of(runs, mode, data)).sum::<f64>() / per_seed.len() as f64
    };
    let (full, fixed, no_gcn, frozen) = (
        mean(AblationMode::Full),
        mean(AblationMode::FixedCorrelation),
        mean(AblationMode::NoGcn),
        mean(AblationMode::FrozenCgl),
    );
    let mut pass = true;
    let mut parts = Vec::new();
    for (name, hi, lo) in [
        ("full>=fixed", full, fixed),
        ("fixed>=no_gcn", fixed, no_gcn),
        ("full>=frozen", full, frozen),
    ] {
        let verdict = if hi >= lo {
            "ok"
        } else if lo - hi <= TIE_POINTS {
            "tie"
        } else {
            pass = false;
            "violated"
        };
        parts.push(format!("{name} {verdict} ({:+.2})", hi - lo));
    }
    outcome(
        pass,
        format!(
            "seeds {ABLATION_SEEDS:?} means: full {full:.2}, fixed_correlation {fixed:.2}, no_gcn {no_gcn:.2}, frozen_cgl {frozen:.2}; {}",
            parts.join(", ")
        ),
    )
}

fn read_dir(dir: &Path) -> BTreeMap<String, Vec<u8>> {
    fs::read_dir(dir)
        .unwrap()
        .map(|e| {
            let e = e.unwrap();
            (e.file_name().to_string_lossy().into_owned(), fs::read(e.path()).unwrap())
        })
        .collect()
}

fn determinism_criterion(data: &drag::data::Dataset, locked: &TrainOutcome) -> Outcome {
    let config = ModelConfig::default();
    let mut schedule = StageSchedule::default();
    for st in &mut schedule.stages {
        st.epochs = st.epochs.min(1);
    }
    let a = run_schedule(&schedule, &config, AblationMode::Full, data, SEED).unwrap();
    let b = run_schedule(&schedule, &config, AblationMode::Full, data, SEED).unwrap();
    let ra = evaluate(&a.params, &config, AblationMode::Full, &data.test).unwrap();
    let rb = evaluate(&b.params, &config, AblationMode::Full, &data.test).unwrap();
    let runs_equal = ra == rb && a.log == b.log;

    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("locked.bin");
    let mut run = RunConfig::default();
    run.model = config.clone();
    save_checkpoint(&locked.params, &run.metadata(locked.stage_reached), &path).unwrap();
    let (loaded, _) = load_checkpoint(&path, &DragParams::init(&config, 0).unwrap()).unwrap();
    let bits = |p: &DragParams| -> Vec<u64> {
        p.tensors().iter().flat_map(|r| r.tensor.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>()).collect()
    };
    let restored = bits(&loaded) == bits(&locked.params)
        && evaluate(&loaded, &config, AblationMode::Full, &data.test).unwrap()
            == evaluate(&locked.params, &config, AblationMode::Full, &data.test).unwrap();

    let (d1, d2) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
    let dconfig = DatasetConfig::default();
    generate_dataset(&dconfig, d1.path()).unwrap();
    generate_dataset(&dconfig, d2.path()).unwrap();
    let (f1, f2) = (read_dir(d1.path()), read_dir(d2.path()));
    let bytes = f1 == f2;
    outcome(
        runs_equal && restored && bytes,
        format!(
            "repeated run metrics and logs equal: {runs_equal}; checkpoint bit-exact with equal metrics: {restored}; {} dataset files byte-identical: {bytes}",
            f1.len()
        ),
    )
}

fn metrics_criterion(data: &drag::data::Dataset) -> Outcome {
    let config = ModelConfig::default();
    let mut params = DragParams::init(&config, 1).unwrap();
    params.classifier.weight.data_mut().fill(0.0);
    params.classifier.bias = Tensor::new(&[2], vec![5.0, -5.0]).unwrap();
    let private = data.test.private_count();
    let r = evaluate(&params, &config, AblationMode::Full, &data.test).unwrap();
    let degenerate = 3 * private == data.test.len() - private
        && r.accuracy == 0.75
        && r.private.recall == 0.0
        && r.private.f1 == 0.0
        && r.public.recall == 1.0
        && r.public.precision == 0.75;

    let mut bad = 0;
    for seed in 0..200u64 {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let len = rng.gen_range(1..300);
        let predicted: Vec<u8> = (0..len).map(|_| rng.gen_range(0..2)).collect();
        let labels: Vec<u8> = (0..len).map(|_| rng.gen_range(0..2)).collect();
        let (mut tp, mut fp, mut tn, mut fn_) = (0usize, 0usize, 0usize, 0usize);
        for (&p, &y) in predicted.iter().zip(&labels) {
            match (p, y) {
                (1, 1) => tp += 1,
                (1, 0) => fp += 1,
                (0, 0) => tn += 1,
                _ => fn_ += 1,
            }
        }
        let div = |a: usize, b: usize| if b == 0 { 0.0 } else { a as f64 / b as f64 };
        let f1 = |p: f64, r: f64| if p + r == 0.0 { 0.0 } else { 2.0 * p * r / (p + r) };
        let r = Confusion::from_predictions(&predicted, &labels).report();
        let (pp, pr) = (div(tp, tp + fp), div(tp, tp + fn_));
        let (qp, qr) = (div(tn, tn + fn_), div(tn, tn + fp));
        let ok = r.accuracy == div(tp + tn, len)
            && (r.private.precision, r.private.recall) == (pp, pr)
            && (r.public.precision, r.public.recall) == (qp, qr)
            && (r.private.f1 - f1(pp, pr)).abs() <= 1e-12
            && (r.public.f1 - f1(qp, qr)).abs() <= 1e-12;
        bad += usize::from(!ok);
    }
    outcome(
        degenerate && bad == 0,
        format!(
            "all-public predictor on {} test images ({private} private): accuracy {:.4}, private recall {}, exact: {degenerate}; {bad}/200 random confusion mismatches",
            data.test.len(),
            r.accuracy,
            r.private.recall
        ),
    )
}

fn report(n: usize, name: &str, o: &Outcome, failed: &mut Vec<usize>) {
    println!("criterion {n} {:<22} {}: {}", name, if o.pass { "PASS" } else { "FAIL" }, o.detail);
    if !o.pass {
        failed.push(n);
    }
}

fn main() {
    let mut failed = Vec::new();
    report(1, "gradient check", &grad_check_criterion(), &mut failed);
    report(2, "loop oracles", &oracle_criterion(), &mut failed);
    report(3, "normalization", &normalization_criterion(), &mut failed);
    report(4, "k-means optimum", &kmeans_criterion(), &mut failed);

    let data = generate(&DatasetConfig { seed: SEED, ..DatasetConfig::default() }).unwrap();
    report(5, "CGL pretraining", &cgl_criterion(&data), &mut failed);

    let schedule = StageSchedule::default();
    let config = ModelConfig::default();
    let mut per_seed = Vec::new();
    let mut locked_secs = 0.0;
    for &seed in &ABLATION_SEEDS {
        let start = Instant::now();
        per_seed.push(run_ablation(&schedule, &config, &AblationMode::ALL, &data, seed).unwrap());
        if seed == SEED {
            locked_secs = start.elapsed().as_secs_f64();
        }
    }
    let locked = &per_seed[ABLATION_SEEDS.iter().position(|&s| s == SEED).unwrap()];
    for (i, runs) in per_seed.iter().enumerate() {
        let accs: Vec<String> = runs
            .iter()
            .map(|(m, _)| format!("{m} {:.2}", 100.0 * accuracy_of(runs, *m, &data)))
            .collect();
        println!("  seed {}: {}", ABLATION_SEEDS[i], accs.join(", "));
    }
    report(6, "benchmark accuracy", &benchmark_criterion(&data, locked, locked_secs), &mut failed);
    report(7, "ablation ordering", &ordering_criterion(&data, &per_seed), &mut failed);

    let (_, full) = locked.iter().find(|(m, _)| *m == AblationMode::Full).unwrap();
    report(8, "determinism", &determinism_criterion(&data, full), &mut failed);
    report(9, "metric arithmetic", &metrics_criterion(&data), &mut failed);

    if failed.is_empty() {
        println!("acceptance: all 9 criteria passed");
    } else {
        println!("acceptance: failed criteria {failed:?}");
        std::process::exit(1);
    }
}
