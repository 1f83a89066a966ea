//! End to end through the public API: synthetic shapes, 2D guidance,
//! a short pre-training run, then a linear probe on frozen features.

use i2p_core::cloud::{generate_shape, ShapeClass, ShapeSpec};
use i2p_core::guidance::SaliencyAgg;
use i2p_core::model::{group_tokens, I2pMae, ModelConfig};
use i2p_core::probe::{
    evaluate, extract_global, train_linear_svm, DescriptorMode, FeatureBank, SvmConfig,
};
use i2p_core::train::{
    prepare_sample, pretrain, BatchExecutor, PrepConfig, PreparedSample, SampleGrad, Sequential,
    TrainConfig,
};
use i2p_core::vision::StubExtractor;
use i2p_core::Result;

const POINTS: usize = 64;
const TOKENS: usize = 16;
const K: usize = 4;
const FEAT: usize = 4;

fn model_config() -> ModelConfig {
    ModelConfig {
        n_points: POINTS,
        tokens: TOKENS,
        k: K,
        channels: 16,
        heads: 2,
        encoder_stages: vec![1],
        decoder_stages: vec![1],
        hierarchical: true,
        mlp_ratio: 2,
        target_width: 3 * FEAT,
    }
}

fn train_config() -> TrainConfig {
    TrainConfig {
        epochs: 3,
        batch_size: 4,
        warmup_epochs: 1,
        lr: 1e-3,
        ..TrainConfig::default()
    }
}

fn samples(n: usize) -> Vec<PreparedSample> {
    let ex = StubExtractor::new(FEAT, (4, 4), (16, 16), 0).unwrap();
    let prep = PrepConfig {
        tokens: TOKENS,
        k: K,
        views: 3,
        image: (16, 16),
        sal_agg: SaliencyAgg::Ave,
        tgt_agg: Default::default(),
        token_seed: 0,
    };
    (0..n)
        .map(|i| {
            let cloud = generate_shape(&ShapeSpec {
                class: ShapeClass::ALL[i % 4],
                n_points: POINTS,
                seed: i as u64,
                jitter: 0.01,
                random_pose: false,
            })
            .unwrap();
            prepare_sample(&cloud, &ex, &prep).unwrap()
        })
        .collect()
}

/// Runs jobs back to front; results must still come back in index order.
struct Reversed;

impl BatchExecutor for Reversed {
    fn map(
        &self,
        n: usize,
        job: &(dyn Fn(usize) -> Result<SampleGrad> + Sync),
    ) -> Vec<Result<SampleGrad>> {
        let mut out: Vec<_> = (0..n).rev().map(job).collect();
        out.reverse();
        out
    }
}

#[test]
fn pretrain_then_probe() {
    let data = samples(12);
    let mut model = I2pMae::new(model_config(), 0).unwrap();
    let mut seen = 0;
    let history = pretrain(
        &mut model,
        &data,
        &train_config(),
        &Sequential,
        &mut |m, _| {
            seen += 1;
            assert_eq!(m.epoch, seen);
            Ok(())
        },
    )
    .unwrap();
    assert_eq!(history.len(), 3);
    assert!(history
        .iter()
        .all(|m| m.loss_total.is_finite() && m.loss_3d > 0.0 && m.loss_2d > 0.0));

    let mode = DescriptorMode::Concat;
    let mut train = FeatureBank::new(mode.width(16), mode);
    let mut test = FeatureBank::new(mode.width(16), mode);
    for i in 0..24 {
        let cloud = generate_shape(&ShapeSpec {
            class: ShapeClass::ALL[i % 4],
            n_points: POINTS,
            seed: 100 + i as u64,
            jitter: 0.01,
            random_pose: false,
        })
        .unwrap();
        let d = extract_global(&model, &group_tokens(&cloud, TOKENS, K, 0).unwrap(), mode).unwrap();
        assert_eq!(d.len(), 32);
        let bank = if i < 16 { &mut train } else { &mut test };
        bank.push(&d, cloud.label.unwrap()).unwrap();
    }
    let svm = train_linear_svm(&train, &SvmConfig::default()).unwrap();
    let r = evaluate(&svm, &test, "tiny", 0);
    assert!((0.0..=1.0).contains(&r.accuracy));
    assert_eq!(r.per_class_accuracy.len(), 4);
    // the training split itself should be mostly separable
    assert!(evaluate(&svm, &train, "tiny", 0).accuracy >= 0.5);
}

#[test]
fn job_order_does_not_change_training() {
    let data = samples(8);
    let run = |ex: &dyn BatchExecutor| {
        let mut model = I2pMae::new(model_config(), 3).unwrap();
        let h = pretrain(&mut model, &data, &train_config(), ex, &mut |_, _| Ok(())).unwrap();
        (h, model)
    };
    let (h1, m1) = run(&Sequential);
    let (h2, m2) = run(&Reversed);
    assert_eq!(h1, h2);
    assert_eq!(m1.params(), m2.params());
}
