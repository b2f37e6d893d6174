use ldprune_core::checkpoint::{to_bytes, Lineage};
use ldprune_core::diffusion::{generate_latents, SchedulerConfig};
use ldprune_core::eval::{count_params, latent_frechet, measure_latency, pool, EvalSummary, LatencyConfig};
use ldprune_core::graph::{build_unet, UNetSpec};
use ldprune_core::score::LatentSet;
use proptest::prelude::*;

fn set() -> impl Strategy<Value = LatentSet> {
    (2usize..10).prop_flat_map(|n| {
        prop::collection::vec(-3.0f32..3.0, n * 3).prop_map(|d| LatentSet::from_rows(0, 3, d).unwrap())
    })
}

proptest! {
    #[test]
    fn frechet_is_symmetric_and_non_negative(a in set(), b in set(), diag in any::<bool>()) {
        let ab = latent_frechet(&a, &b, diag).unwrap().distance;
        let ba = latent_frechet(&b, &a, diag).unwrap().distance;
        prop_assert!(ab >= 0.0);
        prop_assert!((ab - ba).abs() < 1e-6 * ab.max(1.0));
        prop_assert!(latent_frechet(&a, &a, diag).unwrap().distance < 1e-6);
    }
}

#[test]
fn count_matches_checkpoint_payload() {
    let mut g = build_unet(&UNetSpec::tiny(), 0).unwrap();
    let before = count_params(&g);
    g.modify("down.1.attn.0").unwrap();
    assert!(count_params(&g) < before);
    let bytes = to_bytes(&g, &Lineage::default()).unwrap();
    let json_len = u64::from_le_bytes(bytes[8..16].try_into().unwrap()) as usize;
    assert_eq!((bytes.len() - 16 - json_len) / 4, count_params(&g));
}

#[test]
fn latency_protocol_and_self_comparison() {
    let spec = UNetSpec::tiny();
    let g = build_unet(&spec, 0).unwrap();
    let sched = SchedulerConfig {
        num_inference_steps: 4,
        ..Default::default()
    };
    let cfg = LatencyConfig {
        warmup: 2,
        measured: 10,
        ..Default::default()
    };
    let a = measure_latency(&g, &sched, &cfg).unwrap();
    assert!(a.mean_ms > 0.0);
    assert_eq!((a.n_warmup, a.n_measured, a.inference_steps), (2, 10, 4));
    assert_eq!(a.speedup_vs(&a), 0.0);
    assert_eq!(g.counter().get(), 0);
    assert!(measure_latency(&g, &sched, &LatencyConfig { measured: 0, ..cfg }).is_err());
}

#[test]
fn model_against_itself_has_zero_distance() {
    let g = build_unet(&UNetSpec::tiny(), 0).unwrap();
    let sched = SchedulerConfig {
        num_inference_steps: 3,
        ..Default::default()
    };
    let sets: Vec<LatentSet> = (0..2).map(|c| generate_latents(&g, c, 3, &sched, 1).unwrap()).collect();
    let a = pool(&sets).unwrap();
    assert_eq!(a.len(), 6);
    let r = latent_frechet(&a, &a, true).unwrap();
    assert!(r.distance < 1e-6);
    let summary = EvalSummary {
        frechet: Some(r),
        params: count_params(&g),
        latency: None,
        speedup_vs_baseline: None,
    };
    let json = serde_json::to_value(&summary).unwrap();
    for key in ["frechet", "params", "latency", "speedup_vs_baseline"] {
        assert!(json.get(key).is_some(), "{key}");
    }
}
