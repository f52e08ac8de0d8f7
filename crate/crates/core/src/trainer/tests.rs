use std::cell::Cell;

use super::*;

fn tiny(iterations: usize, warmup: usize) -> TrainConfig {
    TrainConfig {
        iterations,
        warmup,
        steps: 4,
        batch: 8,
        hidden: vec![6, 6],
        frequencies: 2,
        buffer_capacity: 64,
        seed: 11,
        ..TrainConfig::default()
    }
}

fn slit() -> Scenario {
    Scenario::preset("slit", 2).unwrap()
}

#[test]
fn cosine_lr_endpoints() {
    let cfg = TrainConfig {
        iterations: 100,
        ..TrainConfig::default()
    };
    assert_eq!(cfg.lr(0), 5e-4);
    assert!((cfg.lr(100) - 5e-6).abs() < 1e-18);
    assert!((cfg.lr(50) - (5e-6 + 5e-4) / 2.0).abs() < 1e-18);
    assert!(cfg.lr(30) > cfg.lr(31));
}

#[test]
fn alpha_follows_its_recurrence() {
    // ‖g_pot‖ = 5, ‖g_hjb‖ = 2 → r = 2.5
    let gp = [3.0, 4.0];
    let gh = [0.0, 2.0];
    let (r, tau, a0) = (2.5f64, 0.9f64, 1.0f64);
    let mut a = a0;
    for k in 1..=6 {
        a = balance_gradients(&gp, &gh, a, tau, 1.0).unwrap().1;
        let expect = (1.0 - tau).powi(k) * (a0 - r).abs();
        assert!(((a - r).abs() - expect).abs() < 1e-12, "k={k}: {a}");
    }
}

#[test]
fn balance_combines_with_weight() {
    let (g, a) = balance_gradients(&[3.0, 4.0], &[0.0, 2.0], 1.0, 0.9, 2.0).unwrap();
    // α = 0.9·2.5 + 0.1 = 2.35; g = g_pot + 2·2.35·g_hjb
    assert!((a - 2.35f64).abs() < 1e-15);
    assert_eq!(g[0], 3.0);
    assert!((g[1] - (4.0 + 9.4)).abs() < 1e-12);
}

#[test]
fn balance_with_zero_hjb_gradient_keeps_alpha() {
    let (g, a) = balance_gradients(&[1.0, -2.0], &[0.0, 0.0], 0.7, 0.9, 1.0).unwrap();
    assert_eq!(a, 0.7);
    assert_eq!(g, vec![1.0, -2.0]);
}

#[test]
fn balance_rejects_non_finite_and_mismatch() {
    assert!(balance_gradients(&[f64::NAN], &[1.0], 1.0, 0.9, 1.0).is_err());
    assert!(balance_gradients(&[1.0], &[f64::INFINITY], 1.0, 0.9, 1.0).is_err());
    assert!(balance_gradients(&[1.0], &[1.0, 2.0], 1.0, 0.9, 1.0).is_err());
}

#[test]
fn ema_example() {
    let mut t = vec![1.0, 0.0];
    ema_update_target(&mut t, &[0.0, 10.0], 0.9).unwrap();
    assert!((t[0] - 0.9f64).abs() < 1e-15 && (t[1] - 1.0f64).abs() < 1e-14);
}

#[test]
fn adam_first_step_is_signed_lr() {
    let mut adam = Adam::<f64>::new(3);
    let mut p = vec![0.0; 3];
    adam.step(&mut p, &[2.0, -0.5, 0.0], 0.1, 0.9, 0.99, 1e-8);
    assert!((p[0] + 0.1).abs() < 1e-8);
    assert!((p[1] - 0.1).abs() < 1e-8);
    assert_eq!(p[2], 0.0);
    assert_eq!(adam.t, 1);
}

#[test]
fn config_validation() {
    assert!(tiny(1, 1).validate().is_ok());
    assert!(tiny(0, 1).validate().is_err());
    assert!(tiny(5, 0).validate().is_err());
    let mut c = tiny(5, 1);
    c.tau = 1.0;
    assert!(c.validate().is_err());
    c = tiny(5, 1);
    c.lr0 = -1.0;
    assert!(c.validate().is_err());
    c = tiny(5, 0);
    c.use_buffer = false;
    assert!(c.validate().is_ok());
}

#[test]
fn single_iteration_smoke() {
    let (state, log) = train::<f64, _>(&slit(), &tiny(1, 2000), |_| {}).unwrap();
    assert_eq!(log.len(), 1);
    assert_eq!(state.step, 1);
    assert!(log[0].pot_loss.is_finite() && log[0].hjb_loss >= 0.0);
    assert_eq!(log[0].buffer_len, 5);
}

#[test]
fn identical_seeds_give_identical_runs() {
    let cfg = tiny(6, 3);
    let (a, la) = train::<f64, _>(&slit(), &cfg, |_| {}).unwrap();
    let (b, lb) = train::<f64, _>(&slit(), &cfg, |_| {}).unwrap();
    assert_eq!(la, lb);
    assert_eq!(a.online.params, b.online.params);
    assert_eq!(a.target.params, b.target.params);
    let other = TrainConfig { seed: 12, ..cfg };
    let (_, lc) = train::<f64, _>(&slit(), &other, |_| {}).unwrap();
    assert_ne!(la, lc);
}

#[test]
fn buffer_is_sampled_only_after_warmup() {
    let mut streamed = Vec::new();
    let (_, log) = train::<f64, _>(&slit(), &tiny(5, 3), |r| streamed.push(r.clone())).unwrap();
    assert_eq!(streamed, log);
    let src: Vec<&str> = log.iter().map(|r| r.source.as_str()).collect();
    assert_eq!(src, ["interp", "interp", "interp", "buffer", "buffer"]);
    let lens: Vec<usize> = log.iter().map(|r| r.buffer_len).collect();
    assert_eq!(lens, [5, 10, 15, 20, 25]);
}

#[test]
fn ablation_flags() {
    let mut cfg = tiny(4, 1);
    cfg.use_buffer = false;
    cfg.grad_balance = false;
    let (_, log) = train::<f64, _>(&slit(), &cfg, |_| {}).unwrap();
    assert!(log.iter().all(|r| r.source == "interp" && r.buffer_len == 0 && r.alpha == 1.0));
    let (_, log) = train::<f64, _>(&slit(), &tiny(4, 1), |_| {}).unwrap();
    assert!(log.iter().any(|r| r.alpha != 1.0));
}

/// Slit whose potential turns to NaN on the third call.
struct Poisoned {
    inner: Scenario,
    calls: Cell<usize>,
}

impl TransportProblem<f64> for Poisoned {
    fn name(&self) -> &str {
        "poisoned"
    }
    fn dim(&self) -> usize {
        2
    }
    fn sigma(&self) -> f64 {
        self.inner.sigma
    }
    fn lambda_hjb(&self) -> f64 {
        self.inner.lambda_hjb
    }
    fn lambda_a(&self) -> f64 {
        self.inner.lambda_a
    }
    fn sample_alpha(&self, n: usize, seed: u64) -> Result<Vec<f64>> {
        self.inner.sample_alpha(n, seed)
    }
    fn sample_beta(&self, n: usize, seed: u64) -> Result<Vec<f64>> {
        self.inner.sample_beta(n, seed)
    }
    fn potential(&self, points: &[f64]) -> Result<Vec<f64>> {
        let c = self.calls.get();
        self.calls.set(c + 1);
        let mut u = self.inner.eval_potential_batch(points)?;
        if c >= 2 {
            u[0] = f64::NAN;
        }
        Ok(u)
    }
    fn rollout(&self, net: &ValueNet<f64>, x0: &[f64], steps: usize, seed: u64) -> Result<TrajectoryBatch<f64>> {
        TransportProblem::<f64>::rollout(&self.inner, net, x0, steps, seed)
    }
}

#[test]
fn divergence_reports_step_and_last_metrics() {
    let p = Poisoned {
        inner: slit(),
        calls: Cell::new(0),
    };
    match train::<f64, _>(&p, &tiny(5, 2), |_| {}) {
        Err(HotaError::Diverged {
            step,
            last_metrics: Some(m),
            ..
        }) => {
            assert_eq!(step, 2);
            let row: MetricsRow = serde_json::from_str(&m).unwrap();
            assert_eq!(row.step, 1);
        }
        other => panic!("expected divergence, got {other:?}"),
    }
}

#[test]
fn huge_loss_counts_as_divergence() {
    let mut s = slit();
    s.weight = 1e12;
    match train::<f64, _>(&s, &tiny(3, 2), |_| {}) {
        Err(HotaError::Diverged { reason, .. }) => assert!(reason.contains("loss"), "{reason}"),
        other => panic!("expected divergence, got {other:?}"),
    }
}

#[test]
fn checkpoint_round_trip_is_bit_exact() {
    let (state, _) = train::<f64, _>(&slit(), &tiny(3, 2), |_| {}).unwrap();
    let ck = Checkpoint::from_state(&state);
    let bytes = ck.to_bytes();
    assert_eq!(&bytes[..8], b"HOTACKPT");
    let back = Checkpoint::<f64>::from_bytes(&bytes).unwrap();
    assert_eq!(back, ck);
    assert_eq!(back.to_bytes(), bytes);

    let (s32, _) = train::<f32, _>(&slit(), &tiny(2, 2), |_| {}).unwrap();
    let c32 = Checkpoint::from_state(&s32);
    assert_eq!(Checkpoint::<f32>::from_bytes(&c32.to_bytes()).unwrap(), c32);
    // a single-precision checkpoint widens exactly
    let wide = Checkpoint::<f64>::from_bytes(&c32.to_bytes()).unwrap();
    assert_eq!(wide.online.0[3], c32.online.0[3] as f64);
}

#[test]
fn corrupt_checkpoints_are_rejected() {
    let (state, _) = train::<f64, _>(&slit(), &tiny(1, 1), |_| {}).unwrap();
    let bytes = Checkpoint::from_state(&state).to_bytes();
    let mut flipped = bytes.clone();
    flipped[40] ^= 1;
    assert!(Checkpoint::<f64>::from_bytes(&flipped).is_err());
    assert!(Checkpoint::<f64>::from_bytes(&bytes[..bytes.len() - 9]).is_err());
    assert!(Checkpoint::<f64>::from_bytes(b"garbage").is_err());
}

#[test]
fn arch_mismatch_names_both_descriptors() {
    let (state, _) = train::<f64, _>(&slit(), &tiny(1, 1), |_| {}).unwrap();
    let ck = Checkpoint::from_state(&state);
    let want = NetArch::new(2, 2, vec![8]).unwrap();
    let msg = ck.online_net(Some(&want)).unwrap_err().to_string();
    assert!(msg.contains(&want.describe()) && msg.contains(&ck.arch.describe()), "{msg}");
    assert!(ck.online_net(Some(&ck.arch)).is_ok());
}

#[test]
fn resume_matches_uninterrupted_run() {
    // all iterations are warmup, so the (unsaved) buffer does not matter
    let cfg = tiny(4, 10);
    let (straight, log) = train::<f64, _>(&slit(), &cfg, |_| {}).unwrap();
    let mut half = TrainState::<f64>::new(cfg.arch(2).unwrap(), &cfg);
    train_steps(&slit(), &cfg, &mut half, 2, |_| {}).unwrap();
    assert_eq!(half.step, 2);
    let bytes = Checkpoint::from_state(&half).to_bytes();
    let mut resumed = Checkpoint::<f64>::from_bytes(&bytes).unwrap().into_state(&cfg).unwrap();
    let tail = train_from(&slit(), &cfg, &mut resumed, |_| {}).unwrap();
    let strip = |r: &MetricsRow| MetricsRow { buffer_len: 0, ..r.clone() };
    assert_eq!(tail.iter().map(strip).collect::<Vec<_>>(), log[2..].iter().map(strip).collect::<Vec<_>>());
    assert_eq!(resumed.online.params, straight.online.params);
    assert_eq!(resumed.target.params, straight.target.params);
}
