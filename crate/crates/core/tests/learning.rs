use maelre::cost::{model_cost, CountingConvention};
use maelre::encoder::{AttentionPolicy, EncoderConfig, Model, StemSpec};
use maelre::par::Execution;
use maelre::train::{self, TaskSpec, TrainConfig};

fn tiny(length: usize, classes: usize) -> EncoderConfig {
    let stem = StemSpec::Seq1D { length, in_channels: 1, kernel: 15, stride: 15 };
    let mut cfg = EncoderConfig::custom(vec![1, 1, 1], 16, vec![1, 2, 4], stem, classes);
    cfg.mlp_ratio = 2;
    cfg
}

fn budget(epochs: usize, n_train: usize, n_test: usize) -> TrainConfig {
    TrainConfig {
        lr_peak: 1e-3,
        warmup_epochs: 1,
        total_epochs: epochs,
        batch_size: 16,
        n_train,
        n_test,
        ..TrainConfig::default()
    }
}

#[test]
fn noiseless_training_loss_decreases_every_epoch() {
    let spec = TaskSpec::freq1d(6, 750, f64::INFINITY);
    let mut monotone = 0;
    let mut traces = Vec::new();
    for seed in 0..10 {
        let cfg = TrainConfig { seed, lr_peak: 2e-3, batch_size: 4, ..budget(5, 320, 0) };
        let (data, _) = train::split(&spec, seed, cfg.n_train, 0, Execution::default()).unwrap();
        let mut model = Model::<f32>::build(&tiny(750, 6), seed).unwrap();
        let h = train::train(&mut model, &data, None, &cfg, None).unwrap();
        let losses: Vec<f64> = h.epochs.iter().map(|e| e.loss).collect();
        if losses.windows(2).all(|w| w[1] < w[0]) {
            monotone += 1;
        }
        traces.push(losses);
    }
    eprintln!("{monotone}/10 seeds strictly decreasing");
    assert!(monotone >= 9, "{monotone}/10 monotone: {traces:?}");
}

#[test]
fn mixed_schedule_matches_all_approx_at_lower_cost_than_all_dot() {
    let spec = TaskSpec::freq1d(6, 1500, 2.0);
    let cfg = TrainConfig { lr_peak: 2e-3, batch_size: 4, ..budget(6, 400, 200) };
    let (tr, te) = train::split(&spec, 11, cfg.n_train, cfg.n_test, Execution::default()).unwrap();
    let score = |policy: AttentionPolicy| {
        let mut enc = tiny(1500, 6);
        enc.policy = policy;
        let mut model = Model::<f32>::build(&enc, 5).unwrap();
        let h = train::train(&mut model, &tr, Some(&te), &cfg, None).unwrap();
        let flops = model_cost(&enc, CountingConvention::default()).unwrap().flops_total();
        (h.last().unwrap().test.unwrap().top1, flops)
    };
    let (mixed, mixed_flops) = score(AttentionPolicy::Mixed);
    let (approx, _) = score(AttentionPolicy::AllApprox);
    let (dot, dot_flops) = score(AttentionPolicy::AllDot);
    eprintln!("top-1 mixed {mixed:.3}, allapprox {approx:.3}, alldot {dot:.3}; mixed - allapprox = {:+.3}", mixed - approx);
    assert!(mixed.max(approx) > 0.5, "budget too small to compare schedules");
    assert!(mixed >= approx - 0.02, "mixed {mixed} vs allapprox {approx}");
    assert!(mixed_flops <= dot_flops, "{mixed_flops} > {dot_flops}");
}
