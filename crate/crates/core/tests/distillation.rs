use std::collections::HashMap;

use ldprune_core::data::{DatasetConfig, LatentDataset};
use ldprune_core::diffusion::{noise_batch, SchedulerConfig};
use ldprune_core::distill::{finetune, kd_loss, train_teacher, KDConfig, TrainOptions, TrainState};
use ldprune_core::graph::{build_unet, ForwardOptions, OperatorGraph, UNetSpec};
use ldprune_core::modify::ADAPTER_WEIGHT;
use ldprune_tensor::{Tape, Tensor, Var};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn dataset(spec: &UNetSpec) -> LatentDataset {
    LatentDataset::generate(
        spec,
        &DatasetConfig {
            samples: 64,
            ..Default::default()
        },
    )
    .unwrap()
}

fn mse(a: &Tensor, b: &Tensor) -> f64 {
    a.data()
        .iter()
        .zip(b.data())
        .map(|(x, y)| ((x - y) as f64).powi(2))
        .sum::<f64>()
        / a.numel() as f64
}

fn run(g: &OperatorGraph, x: &Tensor, t: &[f32], c: &[usize]) -> (Tensor, HashMap<String, Tensor>) {
    let out = g
        .forward(
            &Tape::inference(),
            &Var::constant(x.clone()),
            t,
            c,
            ForwardOptions {
                taps: true,
                ..Default::default()
            },
        )
        .unwrap();
    let taps = out.taps.into_iter().map(|(n, v)| (n, v.into_value())).collect();
    (out.eps.into_value(), taps)
}

#[test]
fn kd_loss_matches_independent_sum_of_terms() {
    let spec = UNetSpec::tiny();
    let teacher = build_unet(&spec, 0).unwrap();
    let student = build_unet(&spec, 1).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let (clean, cond) = dataset(&spec).sample(&mut rng, 3).unwrap();
    let batch = noise_batch(&clean, &SchedulerConfig::default(), &mut rng).unwrap();
    let t = batch.t_f32();
    let (se, staps) = run(&student, &batch.x_t, &t, &cond);
    let (te, ttaps) = run(&teacher, &batch.x_t, &t, &cond);
    let task = mse(&se, &batch.noise);
    let out = mse(&se, &te);
    let feat: f64 = ttaps.iter().map(|(n, v)| mse(&staps[n], v)).sum();

    let cfg = KDConfig {
        task_coef: 1.0,
        out_coef: 2.0,
        feat_coef: 0.5,
        ..Default::default()
    };
    let terms = kd_loss(Some(&teacher), &student, &Tape::new(), &batch, &cond, &cfg).unwrap();
    let total = terms.total.value().data()[0] as f64;
    let expected = task + 2.0 * out + 0.5 * feat;
    assert!((terms.task - task).abs() < 1e-5 * task.max(1.0));
    assert!((terms.out - out).abs() < 1e-5 * out.max(1.0));
    assert!((terms.feat - feat).abs() < 1e-5 * feat.max(1.0));
    assert!(
        (total - expected).abs() < 1e-4 * expected.max(1.0),
        "{total} vs {expected}"
    );
}

#[test]
fn unknown_taps_are_an_error() {
    let spec = UNetSpec::tiny();
    let g = build_unet(&spec, 0).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let (clean, cond) = dataset(&spec).sample(&mut rng, 1).unwrap();
    let batch = noise_batch(&clean, &SchedulerConfig::default(), &mut rng).unwrap();
    let cfg = KDConfig {
        taps: vec!["nowhere".into()],
        ..Default::default()
    };
    assert!(kd_loss(Some(&g), &g, &Tape::new(), &batch, &cond, &cfg).is_err());
}

#[test]
fn negative_coefficients_are_rejected() {
    assert!(KDConfig {
        feat_coef: -1.0,
        ..Default::default()
    }
    .validate()
    .is_err());
    assert!(KDConfig {
        grad_accum: 0,
        ..Default::default()
    }
    .validate()
    .is_err());
}

#[test]
fn every_student_parameter_gets_a_gradient() {
    let spec = UNetSpec::tiny();
    let teacher = build_unet(&spec, 0).unwrap();
    let mut student = teacher.clone();
    // A channel-mixing adapter feeding a per-token norm would make that
    // norm's input constant across channels, and its gain gradient zero.
    student.modify("up.0.res.0").unwrap();
    student.modify("down.0.downsample").unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let (clean, cond) = dataset(&spec).sample(&mut rng, 4).unwrap();
    let batch = noise_batch(&clean, &SchedulerConfig::default(), &mut rng).unwrap();
    let tape = Tape::new();
    let terms = kd_loss(Some(&teacher), &student, &tape, &batch, &cond, &KDConfig::default()).unwrap();
    let grads = tape.backward(&terms.total).unwrap();
    let mut adapters = 0;
    for (name, _) in student.params() {
        let g = grads.get(&name).unwrap_or_else(|| panic!("no gradient for {name}"));
        assert!(g.data().iter().any(|v| *v != 0.0), "zero gradient for {name}");
        adapters += name.ends_with(ADAPTER_WEIGHT) as usize;
    }
    // The downsample adapter is a bare pool; only the ResBlock one has weights.
    assert_eq!(adapters, 1);
}

#[test]
fn finetuning_leaves_the_teacher_untouched_and_logs_every_step() {
    let spec = UNetSpec::tiny();
    let data = dataset(&spec);
    let teacher = build_unet(&spec, 0).unwrap();
    let snapshot: Vec<Tensor> = teacher.params().map(|(_, p)| p.clone()).collect();
    let mut pruned = teacher.clone();
    pruned.modify("mid.attn.0").unwrap();
    let dir = tempfile::tempdir().unwrap();
    let opts = TrainOptions {
        log_path: Some(dir.path().join("loss.jsonl")),
        checkpoint_dir: Some(dir.path().join("ckpt")),
        checkpoint_every: 2,
        ..Default::default()
    };
    let cfg = KDConfig {
        iterations: 4,
        batch_size: 2,
        grad_accum: 2,
        ..Default::default()
    };
    let (student, state) = finetune(&teacher, &pruned, &data, &SchedulerConfig::default(), &cfg, &opts).unwrap();
    assert!(teacher.params().zip(&snapshot).all(|((_, a), b)| a.bit_eq(b)));
    assert!(student
        .params()
        .zip(pruned.params())
        .any(|((_, a), (_, b))| !a.bit_eq(b)));
    let log = std::fs::read_to_string(dir.path().join("loss.jsonl")).unwrap();
    let lines: Vec<serde_json::Value> = log.lines().map(|l| serde_json::from_str(l).unwrap()).collect();
    assert_eq!(lines.len(), 4);
    for (i, l) in lines.iter().enumerate() {
        assert_eq!(l["step"], i);
        for key in ["task", "out", "feat", "total"] {
            assert!(l[key].is_number(), "{key}");
        }
    }
    assert_eq!(state.loss_history.len(), 4);
    assert!(dir.path().join("ckpt/step-2.ldpr").exists());
    let resumed = TrainState::load(&dir.path().join("ckpt/step-4.state.json")).unwrap();
    assert_eq!(resumed, state);
}

#[test]
fn teacher_loss_decreases() {
    let spec = UNetSpec::tiny();
    let data = dataset(&spec);
    let mut g = build_unet(&spec, 0).unwrap();
    let cfg = KDConfig {
        iterations: 150,
        batch_size: 8,
        lr: 1e-3,
        ..Default::default()
    };
    let state = train_teacher(
        &mut g,
        &data,
        &SchedulerConfig::default(),
        &cfg,
        &TrainOptions::default(),
    )
    .unwrap();
    let mean = |r: &[ldprune_core::distill::LossRecord]| r.iter().map(|x| x.total).sum::<f64>() / r.len() as f64;
    let h = &state.loss_history;
    assert!(mean(&h[h.len() - 30..]) < 0.5 * mean(&h[..30]));
}
