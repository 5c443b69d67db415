use std::time::Duration;

use faudit_core::blackbox::{spawn_adapter, BlackboxConfig, ModelHandle};
use faudit_core::explainers::{random_baseline, rise, rise_mask, rise_raw, rise_with_masks, Heatmap, RiseConfig};
use faudit_core::faithfulness::{deletion_curve, insertion_curve, FillKind, FillOperator};
use faudit_core::models::{Arch, CnnConfig};
use faudit_core::stats::spearman;
use faudit_core::{Error, Exec, Model, Predictor, Tensor};

const ADAPTER: &str = env!("CARGO_BIN_EXE_faud-test-adapter");

fn spawn(args: &[&str]) -> faudit_core::Result<ModelHandle> {
    spawn_with(args, BlackboxConfig::default())
}

fn spawn_with(args: &[&str], cfg: BlackboxConfig) -> faudit_core::Result<ModelHandle> {
    let mut cmd = vec![ADAPTER.to_string()];
    cmd.extend(args.iter().map(|s| s.to_string()));
    spawn_adapter(&cmd, cfg)
}

/// Smooth weight field on a `side × side` grid; RISE cannot resolve
/// weights that vary faster than its mask cells.
fn linear_weights(side: usize) -> Vec<f64> {
    let f = std::f64::consts::PI / side as f64;
    (0..side * side)
        .map(|i| {
            let (r, c) = ((i / side) as f64 + 0.5, (i % side) as f64 + 0.5);
            0.1 * (2.0 * f * r).sin() * (f * c).cos()
        })
        .collect()
}

fn linear_adapter(dir: &tempfile::TempDir, side: usize, jitter: bool) -> ModelHandle {
    let path = dir.path().join("w.json");
    std::fs::write(&path, serde_json::to_string(&linear_weights(side)).unwrap()).unwrap();
    let p = path.to_str().unwrap();
    if jitter {
        spawn(&["--jitter", "linear", p]).unwrap()
    } else {
        spawn(&["linear", p]).unwrap()
    }
}

fn local_linear(w: Vec<f64>) -> impl Fn(&Tensor) -> faudit_core::Result<Vec<f64>> + Sync {
    move |x: &Tensor| {
        let s: f64 = x.data().iter().zip(&w).map(|(a, b)| a * b).sum();
        let p = 1.0 / (1.0 + (-s).exp());
        Ok(vec![p, 1.0 - p])
    }
}

#[test]
fn constant_adapter_handshake_and_predict() {
    let h = spawn(&["constant", "3"]).unwrap();
    assert_eq!(h.n_classes(), 3);
    let two = spawn(&["constant", "2"]).unwrap();
    assert_eq!(two.predict(&Tensor::ones([1, 4, 4])).unwrap(), vec![0.5, 0.5]);
}

#[test]
fn handshake_failures() {
    match spawn(&["malformed"]) {
        Err(Error::Protocol(msg)) => assert!(msg.contains("hello, engine"), "{msg}"),
        other => panic!("{:?}", other.err()),
    }
    match spawn(&["version", "2"]) {
        Err(Error::Protocol(msg)) => assert!(msg.contains("version"), "{msg}"),
        other => panic!("{:?}", other.err()),
    }
    let quick = BlackboxConfig {
        handshake_timeout: Duration::from_millis(300),
        ..BlackboxConfig::default()
    };
    assert!(matches!(spawn_with(&["silent"], quick), Err(Error::Timeout(_))));
    assert!(matches!(spawn(&["no-such-mode"]), Err(Error::Protocol(_))));
}

#[test]
fn pipelined_requests_match_by_id() {
    let dir = tempfile::tempdir().unwrap();
    let h = linear_adapter(&dir, 4, true);
    let local = local_linear(linear_weights(4));
    let images: Vec<Tensor> = (0..100)
        .map(|k| Tensor::from_fn([1, 4, 4], |i| ((i * 13 + k * 7) % 17) as f64 / 17.0))
        .collect();
    let remote = h.predict_batch(&images);
    assert_eq!(remote.len(), 100);
    for (r, x) in remote.into_iter().zip(&images) {
        assert_eq!(r.unwrap(), local(x).unwrap());
    }
    // Concurrent single calls share the handle.
    let par = Exec::Parallel.map(images.len(), |i| h.predict(&images[i]).unwrap());
    for (p, x) in par.iter().zip(&images) {
        assert_eq!(*p, local(x).unwrap());
    }
}

#[test]
fn adapter_errors_are_reported_per_request() {
    let h = spawn(&["error"]).unwrap();
    for _ in 0..2 {
        match h.predict(&Tensor::ones([1, 2, 2])) {
            Err(Error::Protocol(msg)) => assert!(msg.contains("model refused"), "{msg}"),
            other => panic!("{other:?}"),
        }
    }
    let bad = spawn(&["bad-sum"]).unwrap();
    assert!(matches!(bad.predict(&Tensor::ones([1, 2, 2])), Err(Error::Protocol(_))));
}

#[test]
fn broken_pipe_fails_pending_and_later_calls() {
    let h = spawn(&["exit-after", "3"]).unwrap();
    let x = Tensor::ones([1, 2, 2]);
    for _ in 0..3 {
        assert!(h.predict(&x).is_ok());
    }
    assert!(h.predict(&x).is_err());
    assert!(h.predict(&x).is_err());
}

#[test]
fn slow_response_times_out() {
    let cfg = BlackboxConfig {
        response_timeout: Duration::from_millis(2),
        ..BlackboxConfig::default()
    };
    let h = spawn_with(&["--jitter", "constant", "2"], cfg).unwrap();
    // Request 0 is answered after 20 ms.
    assert!(matches!(h.predict(&Tensor::ones([1, 2, 2])), Err(Error::Timeout(_))));
}

#[test]
fn rise_over_constant_adapter() {
    let h = spawn(&["constant", "2"]).unwrap();
    let image = Tensor::ones([1, 8, 8]);
    // One all-ones mask: the map is the constant probability.
    let raw = rise_with_masks(&h, &image, 0, &[Tensor::ones([8, 8])]).unwrap();
    assert!(raw.data().iter().all(|&v| v == 0.5));
    assert!(Heatmap::from_raw(&raw, "rise", 0).unwrap().degenerate);
    // Random masks: the map is the constant times the mean mask.
    let cfg = RiseConfig {
        n_masks: 64,
        grid: 4,
        ..RiseConfig::default()
    };
    let map = rise_raw(&h, &image, 0, &cfg, Exec::Sequential).unwrap();
    let mut mean = vec![0.0; 64];
    for i in 0..64 {
        for (m, v) in mean.iter_mut().zip(rise_mask(&cfg, i, 8, 8).data()) {
            *m += 0.5 * v;
        }
    }
    for (a, b) in map.data().iter().zip(&mean) {
        assert!((a - b / 64.0).abs() < 1e-15);
    }
}

#[test]
fn rise_recovers_linear_weights_through_the_wire() {
    let dir = tempfile::tempdir().unwrap();
    let h = linear_adapter(&dir, 16, false);
    let cfg = RiseConfig {
        n_masks: 4000,
        grid: 8,
        keep_prob: 0.5,
        seed: 1,
        ..RiseConfig::default()
    };
    let map = rise(&h, &Tensor::ones([1, 16, 16]), 0, &cfg, Exec::Parallel).unwrap();
    let rho = spearman(map.values.data(), &linear_weights(16)).unwrap();
    assert!(rho >= 0.9, "{rho}");
}

#[test]
fn checkpoint_adapter_matches_in_process_model() {
    let dir = tempfile::tempdir().unwrap();
    let model = Model::new(&Arch::Cnn(CnnConfig::with_size(8)), 3).unwrap();
    let path = dir.path().join("m.faud");
    model.save(&path).unwrap();
    let h = spawn(&["checkpoint", path.to_str().unwrap()]).unwrap();
    assert_eq!(h.n_classes(), 5);
    let image = Tensor::from_fn([1, 8, 8], |i| if i % 3 == 0 { 1.0 } else { 0.5 });
    assert_eq!(h.predict(&image).unwrap(), model.predict_proba(&image).unwrap());

    let heat: Heatmap = random_baseline(8, 8, 0, 9).unwrap();
    for kind in [FillKind::Zero, FillKind::DEFAULT_BLUR] {
        let fill = FillOperator::new(kind, &image).unwrap();
        let a = deletion_curve(&h, &image, &heat, &fill, 20).unwrap();
        let b = deletion_curve(&model, &image, &heat, &fill, 20).unwrap();
        assert_eq!(a, b);
        let a = insertion_curve(&h, &image, &heat, &fill, 20).unwrap();
        let b = insertion_curve(&model, &image, &heat, &fill, 20).unwrap();
        assert_eq!(a, b);
    }
    let cfg = RiseConfig {
        n_masks: 100,
        grid: 4,
        ..RiseConfig::default()
    };
    let a = rise(&h, &image, 1, &cfg, Exec::Parallel).unwrap();
    let b = rise(&model, &image, 1, &cfg, Exec::Sequential).unwrap();
    assert_eq!(a, b);
}
