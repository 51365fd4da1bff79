use drag::backbone::{
    backbone_classifier_head, backbone_forward, BackboneConfig, BackboneParams, BackboneVars, HeadParams, HeadVars,
};
use drag::data::{generate, DatasetConfig};
use drag::model::ModelConfig;
use drag::train::schedule::{Objective, Stage, StageKind, StageSchedule, Trainer};
use drag::{grad_check, Graph, Tensor};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn features(config: &BackboneConfig, params: &BackboneParams, images: &Tensor) -> Tensor {
    let mut g = Graph::new();
    let x = g.leaf(images);
    let vars = params.bind(&mut g);
    let fb = backbone_forward(&mut g, x, &vars, config).unwrap();
    g.tensor(fb)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(40))]

    #[test]
    fn output_shape_is_a_function_of_config(
        side in 4usize..20,
        channels in prop::collection::vec(1usize..6, 1..4),
        kernel in prop::sample::select(vec![1usize, 3, 5]),
        flags in prop::collection::vec(any::<bool>(), 3),
        batch in 1usize..3,
        seed in any::<u64>(),
    ) {
        let config = BackboneConfig {
            input_channels: 2,
            input_size: side,
            stage_channels: channels.clone(),
            kernel_size: kernel,
            downsample: flags[..channels.len()].to_vec(),
        };
        prop_assume!(config.validate().is_ok());
        // "same" padding keeps the side; stride 2 halves it, rounding up
        let want = config.downsample.iter().fold(side, |s, &d| if d { s.div_ceil(2) } else { s });
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let params = BackboneParams::init(&config, &mut rng);
        let images = Tensor::from_fn(&[batch, 2, side, side], |_| rng.gen::<f64>());
        let out = features(&config, &params, &images);
        prop_assert_eq!(out.shape(), &[batch, *channels.last().unwrap(), want, want][..]);
        prop_assert_eq!(config.out_side(), want);
    }
}

#[test]
fn impulse_translation_moves_the_peak_by_one_stride_unit() {
    let config = BackboneConfig::default();
    let mut rng = ChaCha8Rng::seed_from_u64(12);
    let params = BackboneParams::init(&config, &mut rng);
    let impulse = |r: usize, c: usize| {
        let mut t = Tensor::zeros(&[1, 3, 32, 32]);
        for ch in 0..3 {
            t.set(&[0, ch, r, c], 1.0);
        }
        t
    };
    // total stride 4: an input shift of 4 pixels is one F_b cell
    let a = features(&config, &params, &impulse(12, 8));
    let b = features(&config, &params, &impulse(16, 12));
    let mut active = 0;
    for c in 0..32 {
        let map_a = a.slice_outer(0).unwrap().slice_outer(c).unwrap();
        let map_b = b.slice_outer(0).unwrap().slice_outer(c).unwrap();
        for x in 0..7 {
            for y in 0..7 {
                assert_eq!(map_a.get(&[x, y]), map_b.get(&[x + 1, y + 1]));
            }
        }
        let peak = |m: &Tensor| {
            let i = m.data().iter().enumerate().fold(0, |best, (i, &v)| if v > m.data()[best] { i } else { best });
            (i / 8, i % 8, m.data()[i])
        };
        let (pa, pb) = (peak(&map_a), peak(&map_b));
        if pa.2 > 0.0 {
            active += 1;
            assert_eq!((pb.0, pb.1), (pa.0 + 1, pa.1 + 1), "channel {c}");
        }
    }
    assert!(active > 0);
}

#[test]
fn backbone_and_head_pass_grad_check() {
    let config = BackboneConfig {
        input_channels: 3,
        input_size: 8,
        stage_channels: vec![3, 4],
        kernel_size: 3,
        downsample: vec![true, false],
    };
    let mut rng = ChaCha8Rng::seed_from_u64(13);
    let params = BackboneParams::init(&config, &mut rng);
    let head = HeadParams::init(4, &mut rng);
    let mut flat: Vec<Tensor> = params.tensors().into_iter().map(|(_, t)| t.clone()).collect();
    // nonzero biases keep pre-activations off the relu kink
    for t in flat.iter_mut().filter(|t| t.rank() == 1) {
        *t = Tensor::from_fn(t.shape(), |_| rng.gen_range(0.05..0.2));
    }
    flat.push(head.weight.clone());
    flat.push(head.bias.clone());
    let images = Tensor::from_fn(&[2, 3, 8, 8], |_| rng.gen::<f64>());
    let report = grad_check(
        |g, v| {
            let vars = BackboneVars { kernels: vec![v[0], v[2]], biases: vec![v[1], v[3]] };
            let x = g.constant(images.clone());
            let fb = backbone_forward(g, x, &vars, &config)?;
            let probs = backbone_classifier_head(g, fb, &HeadVars { weight: v[4], bias: v[5] })?;
            drag::model::cls_loss(g, probs, &[1, 0])
        },
        &flat,
        1e-4,
    )
    .unwrap();
    assert!(report.max_rel_error < 1e-4, "{report:?}");
}

#[test]
fn pretrained_head_beats_the_majority_baseline() {
    let data_config = DatasetConfig {
        n_train: 600,
        n_val: 200,
        n_test: 400,
        ..DatasetConfig::default()
    };
    let data = generate(&data_config).unwrap();
    let schedule = StageSchedule::default();
    let stage: Stage = schedule.stages[0].clone();
    assert_eq!((stage.kind, stage.objective), (StageKind::PretrainBackbone, Objective::Head));
    let config = ModelConfig::default();
    let mut trainer = Trainer::new(&config, &schedule, drag::correlation::AblationMode::Full, 7).unwrap();
    trainer.run_stage(&stage, &data).unwrap();

    let mut g = Graph::new();
    let vars = trainer.params.bind(&mut g, &[]);
    let x = g.constant(data.test.images.clone());
    let probs = drag::model::pretrain_forward(&mut g, x, &vars, &config).unwrap();
    let probs = g.tensor(probs);
    let correct = data
        .test
        .labels
        .iter()
        .enumerate()
        .filter(|&(i, &y)| u8::from(probs.get(&[i, 1]) >= 0.5) == y)
        .count();
    let accuracy = correct as f64 / data.test.len() as f64;
    let majority = 1.0 - data.test.private_count() as f64 / data.test.len() as f64;
    assert!(accuracy > majority, "head accuracy {accuracy} vs majority {majority}");
}
