use std::fs;

use drag::config::RunConfig;
use drag::correlation::AblationMode;
use drag::data::{generate, Dataset, DatasetConfig};
use drag::model::{DragParams, ModelConfig, ParamGroup};
use drag::train::checkpoint::{decode, encode, Metadata, MAGIC};
use drag::train::schedule::{write_log, StageEpochs, StageKind, StageSchedule, LOG_HEADER};
use drag::train::{
    adam_step, evaluate, load_checkpoint, run_ablation, run_schedule, save_checkpoint, Confusion, OptimizerState,
    Trainer,
};
use drag::{Error, Tensor};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn tiny_data() -> Dataset {
    generate(&DatasetConfig {
        n_train: 64,
        n_val: 24,
        n_test: 40,
        ..DatasetConfig::default()
    })
    .unwrap()
}

fn short_schedule() -> StageSchedule {
    let mut s = StageSchedule::new(&Default::default(), &StageEpochs([2, 2, 1, 1, 1, 1, 1]), true);
    s.batch_size = 16;
    s
}

fn tensors(p: &DragParams) -> Vec<Tensor> {
    p.tensors().into_iter().map(|t| t.tensor.clone()).collect()
}

#[test]
fn first_adam_step_moves_by_learning_rate() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let start = Tensor::from_fn(&[3, 4], |_| rng.gen_range(-1.0..1.0));
    let grad: Vec<f64> = (0..12).map(|_| rng.gen_range(-5.0..5.0)).collect();
    let lr = 1e-3;
    let mut p = start.clone();
    let mut state = OptimizerState::new(lr, 0.0);
    adam_step(&mut [&mut p], &[&grad], &[true], &mut state).unwrap();
    assert_eq!(state.step_count(), 1);
    for ((after, before), g) in p.data().iter().zip(start.data()).zip(&grad) {
        let want = -lr * g.signum();
        assert!(((after - before) - want).abs() <= 1e-6 * lr, "{} vs {want}", after - before);
    }
}

#[test]
fn zero_gradient_is_a_fixed_point() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let start = Tensor::from_fn(&[5], |_| rng.gen_range(-1.0..1.0));
    let mut p = start.clone();
    let mut state = OptimizerState::new(1e-2, 0.0);
    for _ in 0..3 {
        adam_step(&mut [&mut p], &[&[0.0; 5]], &[true], &mut state).unwrap();
    }
    assert_eq!(p.data(), start.data());

    // decoupled decay shrinks decayed parameters only
    let mut q = start.clone();
    let mut bias = start.clone();
    let mut state = OptimizerState::new(0.1, 0.5);
    adam_step(&mut [&mut q, &mut bias], &[&[0.0; 5], &[0.0; 5]], &[true, false], &mut state).unwrap();
    for (a, b) in q.data().iter().zip(start.data()) {
        assert!((a - b * (1.0 - 0.05)).abs() < 1e-15);
    }
    assert_eq!(bias.data(), start.data());
}

#[test]
fn default_learning_rates_follow_the_groups() {
    let s = StageSchedule::default();
    let kinds: Vec<StageKind> = s.stages.iter().map(|st| st.kind).collect();
    assert_eq!(
        kinds,
        [
            StageKind::PretrainBackbone,
            StageKind::PretrainCgl,
            StageKind::Cgl,
            StageKind::Gcn,
            StageKind::GcnBackbone,
            StageKind::FineTune
        ]
    );
    for st in s.stages.iter().filter(|st| !st.kind.is_pretraining()) {
        for &(g, lr) in &st.groups {
            let want = match g {
                ParamGroup::Backbone => 1e-5,
                ParamGroup::Cgl | ParamGroup::Gcn => 1e-3,
                ParamGroup::Head => unreachable!("head trains only during pretraining"),
            };
            assert_eq!(lr, want, "{} in {}", g.name(), st.kind);
        }
    }
    assert_eq!(s.weight_decay, 1e-7);
    assert_eq!(s.batch_size, 32);
}

#[test]
fn one_step_moves_each_group_by_at_most_its_rate() {
    let data = tiny_data();
    let schedule = short_schedule();
    let mut trainer = Trainer::new(&ModelConfig::default(), &schedule, AblationMode::Full, 3).unwrap();
    trainer.batch_size = data.train.len();
    let mut stage = schedule.stages.iter().find(|s| s.kind == StageKind::GcnBackbone).unwrap().clone();
    stage.epochs = 1;
    let before = trainer.params.clone();
    trainer.run_stage(&stage, &data).unwrap();
    let mut largest = std::collections::BTreeMap::new();
    for (a, b) in before.tensors().iter().zip(trainer.params.tensors()) {
        let d = a.tensor.max_abs_diff(b.tensor);
        let e = largest.entry(a.group).or_insert(0.0f64);
        *e = e.max(d);
    }
    let backbone = largest[&ParamGroup::Backbone];
    let gcn = largest[&ParamGroup::Gcn];
    assert!(backbone <= 1e-5 * 1.001 && backbone > 5e-6, "backbone moved {backbone}");
    assert!(gcn <= 1e-3 * 1.001 && gcn > 5e-4, "gcn moved {gcn}");
    assert_eq!(largest[&ParamGroup::Cgl], 0.0);
    assert_eq!(largest[&ParamGroup::Head], 0.0);
}

#[test]
fn zero_epoch_schedule_is_a_no_op() {
    let data = tiny_data();
    let schedule = StageSchedule::new(&Default::default(), &StageEpochs([0; 7]), true);
    let out = run_schedule(&schedule, &ModelConfig::default(), AblationMode::Full, &data, 4).unwrap();
    assert!(out.log.is_empty());
    assert!(out.selected.is_none());
    assert_eq!(out.params, DragParams::init(&ModelConfig::default(), 4).unwrap());
}

#[test]
fn frozen_cgl_never_changes_after_pretraining() {
    let data = tiny_data();
    let schedule = short_schedule();
    let config = ModelConfig::default();
    let frozen = schedule.for_mode(AblationMode::FrozenCgl);
    assert!(frozen.stages.iter().all(|s| !matches!(s.kind, StageKind::Cgl | StageKind::CglAgain)));
    let mut t = Trainer::new(&config, &frozen, AblationMode::FrozenCgl, 5).unwrap();
    let mut checksum = None;
    for st in &frozen.stages {
        t.run_stage(st, &data).unwrap();
        let now = t.params.checksum(ParamGroup::Cgl);
        if st.kind.is_pretraining() {
            checksum = Some(now);
        } else {
            assert_eq!(Some(now), checksum, "CGL moved in {}", st.kind);
        }
    }
}

#[test]
fn runs_are_reproducible_and_branches_match_fresh_runs() {
    let data = tiny_data();
    let schedule = short_schedule();
    let config = ModelConfig::default();
    let a = run_schedule(&schedule, &config, AblationMode::Full, &data, 9).unwrap();
    let b = run_schedule(&schedule, &config, AblationMode::Full, &data, 9).unwrap();
    assert_eq!(a.log, b.log);
    assert_eq!(a.params, b.params);
    let ra = evaluate(&a.params, &config, AblationMode::Full, &data.test).unwrap();
    let rb = evaluate(&b.params, &config, AblationMode::Full, &data.test).unwrap();
    assert_eq!(ra, rb);

    let branches = run_ablation(&schedule, &config, &[AblationMode::Full, AblationMode::NoGcn], &data, 9).unwrap();
    assert_eq!(branches[0].1.params, a.params);
    assert_eq!(branches[0].1.log, a.log);
    let fresh = run_schedule(&schedule, &config, AblationMode::NoGcn, &data, 9).unwrap();
    assert_eq!(branches[1].1.params, fresh.params);

    let mut csv = Vec::new();
    write_log(&a.log, &mut csv).unwrap();
    let csv = String::from_utf8(csv).unwrap();
    assert_eq!(csv.lines().next(), Some(LOG_HEADER));
    assert_eq!(csv.lines().count(), a.log.len() + 1);
    let pretrain = csv.lines().nth(1).unwrap();
    assert!(pretrain.starts_with("pretrain_backbone,0,"), "{pretrain}");
    // pretraining logs no region or CGL terms
    assert_eq!(pretrain.split(',').filter(|f| f.is_empty()).count(), 3, "{pretrain}");
}

#[test]
fn diverging_training_names_the_stage() {
    let data = tiny_data();
    let mut lr = drag::train::schedule::LearningRates::default();
    lr.backbone_pretrain = 1e200;
    let schedule = StageSchedule::new(&lr, &StageEpochs([3, 0, 0, 0, 0, 0, 0]), false);
    let err = run_schedule(&schedule, &ModelConfig::default(), AblationMode::Full, &data, 1).unwrap_err();
    match err {
        Error::Divergence { stage, .. } => assert_eq!(stage, "pretrain_backbone"),
        other => panic!("expected divergence, got {other:?}"),
    }
}

#[test]
fn degenerate_predictor_metrics() {
    let data = tiny_data();
    assert_eq!(data.test.private_count() * 4, data.test.len());
    let config = ModelConfig::default();
    let mut params = DragParams::init(&config, 1).unwrap();
    params.classifier.weight.data_mut().fill(0.0);
    params.classifier.bias = Tensor::new(&[2], vec![5.0, -5.0]).unwrap();
    let r = evaluate(&params, &config, AblationMode::Full, &data.test).unwrap();
    assert_eq!(r.accuracy, 0.75);
    assert_eq!((r.private.precision, r.private.recall, r.private.f1), (0.0, 0.0, 0.0));
    assert_eq!((r.public.precision, r.public.recall), (0.75, 1.0));

    let labels = &data.test.labels;
    let perfect = Confusion::from_predictions(labels, labels).report();
    assert_eq!(perfect.accuracy, 1.0);
    assert_eq!((perfect.private.f1, perfect.public.f1), (1.0, 1.0));
}

#[test]
fn checkpoints_round_trip_bit_exactly() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("c.bin");
    let mut run = RunConfig::default();
    run.model.regions = 4;
    let params = DragParams::init(&run.model, 11).unwrap();
    let meta = run.metadata(Some(StageKind::Gcn));
    save_checkpoint(&params, &meta, &path).unwrap();
    let template = DragParams::init(&run.model, 0).unwrap();
    let (loaded, back) = load_checkpoint(&path, &template).unwrap();
    for (a, b) in tensors(&params).iter().zip(tensors(&loaded)) {
        let bits = |t: &Tensor| t.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>();
        assert_eq!(bits(a), bits(&b));
    }
    assert_eq!(back, meta);
    assert_eq!(back["N"], "4");
    assert_eq!(back["stage"], "gcn");
    assert_eq!(RunConfig::from_metadata(&back).unwrap(), run);

    // the same file cannot feed an N=8 model
    let eight = DragParams::init(&ModelConfig::default(), 0).unwrap();
    let err = load_checkpoint(&path, &eight).unwrap_err().to_string();
    assert!(err.contains("shape mismatch for tensor cgl.fc2.weight"), "{err}");

    let mut bytes = fs::read(&path).unwrap();
    bytes[0] = b'X';
    fs::write(&path, &bytes).unwrap();
    let err = load_checkpoint(&path, &template).unwrap_err();
    assert!(matches!(err, Error::Format { .. }) && err.to_string().contains("magic"), "{err}");
}

#[test]
fn damaged_checkpoints_are_format_errors() {
    let t = Tensor::from_fn(&[2, 3], |i| (i[0] * 3 + i[1]) as f64 / 7.0);
    let meta: Metadata = [("seed".to_string(), "7".to_string())].into_iter().collect();
    let good = encode(&[("w".into(), &t)], &meta);
    assert_eq!(&good[..4], MAGIC);
    let (back, m) = decode(&good, "mem").unwrap();
    assert_eq!(back[0].1.data(), t.data());
    assert_eq!(m, meta);

    for cut in [3, 10, good.len() - 1] {
        let err = decode(&good[..cut], "mem").unwrap_err().to_string();
        assert!(err.contains("truncated"), "{err}");
    }
    let mut versioned = good.clone();
    versioned[4] = 9;
    assert!(decode(&versioned, "mem").unwrap_err().to_string().contains("version"));
    let mut trailing = good.clone();
    trailing.push(0);
    assert!(decode(&trailing, "mem").unwrap_err().to_string().contains("trailing"));
}

proptest! {
    #[test]
    fn confusion_matches_hand_oracle(tp in 0usize..50, fp in 0usize..50, tn in 0usize..50, fn_ in 0usize..50) {
        prop_assume!(tp + fp + tn + fn_ > 0);
        let mut predicted = Vec::new();
        let mut labels = Vec::new();
        for (n, p, y) in [(tp, 1, 1), (fp, 1, 0), (tn, 0, 0), (fn_, 0, 1)] {
            predicted.extend(std::iter::repeat(p).take(n));
            labels.extend(std::iter::repeat(y).take(n));
        }
        let c = Confusion::from_predictions(&predicted, &labels);
        prop_assert_eq!(c, Confusion { tp, fp, tn, fn_ });
        let r = c.report();
        let div = |a: usize, b: usize| if b == 0 { 0.0 } else { a as f64 / b as f64 };
        prop_assert_eq!(r.accuracy, div(tp + tn, tp + fp + tn + fn_));
        prop_assert_eq!(r.private.precision, div(tp, tp + fp));
        prop_assert_eq!(r.private.recall, div(tp, tp + fn_));
        prop_assert_eq!(r.public.precision, div(tn, tn + fn_));
        prop_assert_eq!(r.public.recall, div(tn, tn + fp));
        for m in [r.private, r.public] {
            if m.precision + m.recall > 0.0 {
                let h = 2.0 * m.precision * m.recall / (m.precision + m.recall);
                prop_assert!((m.f1 - h).abs() <= 1e-12);
            } else {
                prop_assert_eq!(m.f1, 0.0);
            }
            for v in [m.precision, m.recall, m.f1] {
                prop_assert!((0.0..=1.0).contains(&v));
            }
        }
        // merging shards is associative with the whole
        let half = predicted.len() / 2;
        let merged = Confusion::from_predictions(&predicted[..half], &labels[..half])
            .merge(Confusion::from_predictions(&predicted[half..], &labels[half..]));
        prop_assert_eq!(merged, c);
    }
}
