use evmae_core::event::SegmentConfig;
use evmae_core::intensity::IntensityConfig;
use evmae_core::simulator::canonical_disc_scene;
use evmae_core::toy::{
    prepare_sequence, train_toy, SequenceSpec, ToyModel, ToyModelConfig, TrainOptions, TrainingSequence,
};
use evmae_core::Error;

fn sequence() -> TrainingSequence {
    let spec = SequenceSpec {
        segment: SegmentConfig::default(),
        intensity: IntensityConfig::default(),
        clip_max: Some(10),
        patch: 8,
    };
    prepare_sequence(&canonical_disc_scene(), None, &spec).unwrap()
}

fn model(seq: &TrainingSequence, recurrent: bool) -> ToyModel {
    let cfg = ToyModelConfig {
        recurrent,
        ..Default::default()
    };
    ToyModel::new(cfg, seq.data_channels() + 1, seq.grid).unwrap()
}

#[test]
fn sequence_shapes() {
    let seq = sequence();
    assert_eq!(seq.stages(), 17);
    assert_eq!(seq.data_channels(), 20);
    assert_eq!(seq.targets.len(), 17);
    assert!(seq.inputs.iter().all(|x| x.iter().all(|&v| (0.0..=10.0).contains(&v))));
}

#[test]
fn zero_learning_rate_gives_flat_curve() {
    let seq = sequence();
    let mut m = model(&seq, true);
    let before = m.params().to_vec();
    let opts = TrainOptions {
        steps: 15,
        lr: 0.0,
        ..Default::default()
    };
    let curve = train_toy(&mut m, &seq, &opts).unwrap();
    assert!(curve.eval.iter().all(|&e| e == curve.eval[0]));
    assert_eq!(m.params(), &before[..]);
    assert_eq!(curve.to_lines().lines().count(), 15);
}

#[test]
fn training_is_deterministic() {
    let seq = sequence();
    let opts = TrainOptions {
        steps: 25,
        ..Default::default()
    };
    let run = |rec| {
        let mut m = model(&seq, rec);
        let c = train_toy(&mut m, &seq, &opts).unwrap();
        (c, m.to_bytes())
    };
    for rec in [true, false] {
        let (a, pa) = run(rec);
        let (b, pb) = run(rec);
        let bits = |v: &[f64]| v.iter().map(|x| x.to_bits()).collect::<Vec<_>>();
        assert_eq!(bits(&a.train), bits(&b.train));
        assert_eq!(bits(&a.eval), bits(&b.eval));
        assert_eq!(pa, pb);
    }
}

#[test]
fn short_training_lowers_the_loss() {
    let seq = sequence();
    let mut m = model(&seq, true);
    let opts = TrainOptions {
        steps: 400,
        ..Default::default()
    };
    let c = train_toy(&mut m, &seq, &opts).unwrap();
    assert!(c.eval.last().unwrap() < &c.eval[0]);
}

#[test]
fn divergence_reports_the_step() {
    let seq = sequence();
    let mut m = model(&seq, true);
    let opts = TrainOptions {
        steps: 200,
        lr: 1e150,
        clip_norm: None,
        ..Default::default()
    };
    match train_toy(&mut m, &seq, &opts) {
        Err(Error::Diverged { step }) => assert!(step > 0 && step < 200),
        other => panic!("expected divergence, got {other:?}"),
    }
}

#[test]
fn zero_steps_is_an_error() {
    let seq = sequence();
    let mut m = model(&seq, false);
    let opts = TrainOptions {
        steps: 0,
        ..Default::default()
    };
    assert!(train_toy(&mut m, &seq, &opts).is_err());
}
