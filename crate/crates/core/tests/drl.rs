use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use sec_core::cartpole::CartPoleParams;
use sec_core::drl::*;
use sec_core::geometry::cartpole_safety_spec;
use sec_core::harness::{run_episode, EpisodeSetup, Termination};
use sec_core::student::published_cartpole_design;
use sec_core::Error;

fn toy_cfg(hidden: Vec<usize>, batch: usize) -> LearnerConfig {
    LearnerConfig { hidden, batch, drl_magnitude: 2.0, ..Default::default() }
}

fn random_batch(rng: &mut ChaCha8Rng, n: usize, m: usize, count: usize) -> Vec<Transition> {
    (0..count)
        .map(|_| Transition {
            s: DVector::from_fn(n, |_, _| rng.gen_range(-1.0..1.0)),
            a: DVector::from_fn(m, |_, _| rng.gen_range(-2.0..2.0)),
            reward: rng.gen_range(-1.0..1.0),
            s_next: DVector::from_fn(n, |_, _| rng.gen_range(-1.0..1.0)),
            done: rng.gen_bool(0.2),
            corrected: false,
        })
        .collect()
}

fn randomize(net: &mut Mlp<f64>, rng: &mut ChaCha8Rng) {
    let normal = Normal::new(0.0, 0.6).unwrap();
    let p: Vec<f64> = (0..net.param_count()).map(|_| normal.sample(rng)).collect();
    net.set_params(&p).unwrap();
}

/// Largest `|g − fd| / max(|g| + |fd|, 1e-6)` over all parameters.
fn fd_error(analytic: &[f64], params: &[f64], mut loss: impl FnMut(&[f64]) -> f64) -> f64 {
    let h = 1e-6;
    let mut worst: f64 = 0.0;
    let mut x = params.to_vec();
    for i in 0..x.len() {
        let x0 = x[i];
        x[i] = x0 + h;
        let up = loss(&x);
        x[i] = x0 - h;
        let down = loss(&x);
        x[i] = x0;
        let fd = (up - down) / (2.0 * h);
        worst = worst.max((analytic[i] - fd).abs() / (analytic[i].abs() + fd.abs()).max(1e-6));
    }
    worst
}

#[test]
fn critic_and_actor_gradients_match_finite_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(21);
    let mut learner = Learner::<f64>::new(2, 1, toy_cfg(vec![5], 8), 3).unwrap();
    let mut worst_c: f64 = 0.0;
    let mut worst_a: f64 = 0.0;
    for _ in 0..50 {
        randomize(&mut learner.actor, &mut rng);
        randomize(&mut learner.critic, &mut rng);
        randomize(&mut learner.actor_target, &mut rng);
        randomize(&mut learner.critic_target, &mut rng);
        let batch = Batch::<f64>::from_transitions(&random_batch(&mut rng, 2, 1, 8));
        let targets = learner.critic_targets(&batch);

        let (_, g) = learner.critic_loss_grads(&batch, &targets);
        let params = learner.critic.params();
        let mut probe = learner.clone();
        worst_c = worst_c.max(fd_error(&g.flatten(), &params, |x| {
            probe.critic.set_params(x).unwrap();
            probe.critic_loss_grads(&batch, &targets).0
        }));

        let (_, g) = learner.actor_loss_grads(&batch);
        let params = learner.actor.params();
        let mut probe = learner.clone();
        worst_a = worst_a.max(fd_error(&g.flatten(), &params, |x| {
            probe.actor.set_params(x).unwrap();
            probe.actor_loss_grads(&batch).0
        }));
    }
    assert!(worst_c < 1e-4, "critic gradient error {worst_c:e}");
    assert!(worst_a < 1e-4, "actor gradient error {worst_a:e}");
}

fn zero_transition() -> Transition {
    Transition {
        s: DVector::zeros(4),
        a: DVector::zeros(1),
        reward: 0.0,
        s_next: DVector::zeros(4),
        done: true,
        corrected: false,
    }
}

#[test]
fn zero_transitions_are_a_fixed_point() {
    let mut learner = Learner::<f64>::new(4, 1, toy_cfg(vec![16, 16], 32), 9).unwrap();
    let ts = vec![zero_transition(); 32];
    let batch = Batch::<f64>::from_transitions(&ts);
    assert!(learner.critic_targets(&batch).iter().all(|&t| t == 0.0));
    // Adam's momentum overshoots the fixed point and rings down, so the
    // sequence is bounded by its start rather than strictly monotone.
    let mut losses = Vec::new();
    for _ in 0..100 {
        let (actor_loss, critic_loss) = learner.update_on(&batch).unwrap();
        assert!(actor_loss.is_finite() && critic_loss.is_finite());
        losses.push(critic_loss);
    }
    let first = losses[0];
    assert!(losses.iter().all(|&l| l <= first), "{losses:?}");
    let tail = losses[80..].iter().cloned().fold(0.0, f64::max);
    assert!(tail < 0.1 * first, "tail {tail:e} vs first {first:e}");
    assert!(learner.actor.is_finite() && learner.critic.is_finite());
}

#[test]
fn terminal_reward_regression_converges() {
    let cfg = LearnerConfig { critic_lr: 1e-3, ..toy_cfg(vec![16, 16], 16) };
    let mut learner = Learner::<f64>::new(4, 1, cfg, 4).unwrap();
    let t = Transition {
        s: DVector::from_column_slice(&[0.1, -0.2, 0.05, 0.3]),
        a: DVector::from_element(1, 0.7),
        reward: 1.0,
        s_next: DVector::from_column_slice(&[0.5, 0.5, 0.5, 0.5]),
        done: true,
        corrected: false,
    };
    let batch = Batch::<f64>::from_transitions(&vec![t.clone(); 16]);
    for _ in 0..3000 {
        learner.update_on(&batch).unwrap();
    }
    let q = learner.q_value(&t.s, &t.a);
    assert!((q - 1.0).abs() < 1e-2, "Q = {q}");
}

#[test]
fn non_finite_batch_aborts_without_touching_networks() {
    let mut learner = Learner::<f64>::new(4, 1, toy_cfg(vec![8], 4), 1).unwrap();
    let mut ts = vec![zero_transition(); 4];
    ts[2].reward = f64::NAN;
    let before = (learner.actor.params(), learner.critic.params());
    let err = learner.update_on(&Batch::from_transitions(&ts)).unwrap_err();
    assert!(matches!(err, Error::Divergence { .. }));
    assert_eq!(before, (learner.actor.params(), learner.critic.params()));
    assert_eq!(learner.updates, 0);
}

#[test]
fn actor_output_is_bounded() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let mut learner = Learner::<f32>::new(4, 1, toy_cfg(vec![8, 8], 4), 1).unwrap();
    let p: Vec<f64> = (0..learner.actor.param_count()).map(|_| rng.gen_range(-50.0..50.0)).collect();
    learner.actor.set_params(&p).unwrap();
    for _ in 0..200 {
        let s = DVector::from_fn(4, |_, _| rng.gen_range(-10.0..10.0));
        assert!(learner.policy(&s)[0].abs() <= 2.0);
        assert!(learner.explore(&s)[0].abs() <= 2.0);
    }
}

fn zero_actor(learner: &mut Learner<f32>) {
    let zeros = vec![0.0; learner.actor.param_count()];
    learner.actor.set_params(&zeros).unwrap();
}

#[test]
fn residual_action_decomposition() {
    let design = published_cartpole_design();
    let mut learner = Learner::<f32>::new(4, 1, LearnerConfig::default(), 7).unwrap();
    let m = learner.cfg.drl_magnitude;

    let s = DVector::from_column_slice(&[0.1, 0.0, 0.1, 0.0]);
    let (a_hp, _, a_phy) = residual_action(&learner.actor, &design.f, &s, m);
    assert!((a_phy[0] - 9.14667).abs() < 1e-12);

    // Zero biases: the origin maps to zero DRL action too.
    let (a_hp0, a_drl0, a_phy0) = residual_action(&learner.actor, &design.f, &DVector::zeros(4), m);
    assert_eq!(a_phy0[0], 0.0);
    assert_eq!(a_hp0, a_drl0);
    assert_eq!(a_drl0, learner.actor.forward_one(&DVector::zeros(4)) * m);

    let mut rng = ChaCha8Rng::seed_from_u64(1);
    for _ in 0..100 {
        let s = DVector::from_fn(4, |_, _| rng.gen_range(-1.0..1.0));
        let (a_hp, a_drl, a_phy) = residual_action(&learner.actor, &design.f, &s, m);
        assert!((&a_hp - &a_drl - &design.f * &s).amax() < 1e-12);
        assert!(a_drl[0].abs() <= m && a_phy == &design.f * &s);
    }

    zero_actor(&mut learner);
    let (a_hp_zero, _, _) = residual_action(&learner.actor, &design.f, &s, m);
    assert_eq!(a_hp_zero, &design.f * &s);
    assert_ne!(a_hp, a_hp_zero);
}

#[test]
fn safety_reward_identities() {
    let d = published_cartpole_design();
    let z = DVector::zeros(4);
    let a0 = DVector::zeros(1);
    assert_eq!(safety_reward(&z, &z, &a0, &d.p, &d.h), 0.0);
    let closed = &d.a + &d.b * &d.f;
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    for _ in 0..100 {
        let s = DVector::from_fn(4, |_, _| rng.gen_range(-1.0..1.0));
        assert!(safety_reward(&s, &z, &a0, &d.p, &d.h) >= 0.0);
        assert!(safety_reward(&s, &(&closed * &s), &a0, &d.p, &d.h).abs() < 1e-9);
        let a = DVector::from_element(1, 1.5);
        let r = safety_reward(&s, &(&closed * &s), &a, &d.p, &d.h);
        assert!((r + 2.25).abs() < 1e-9);
    }
}

fn filler(k: usize) -> Transition {
    Transition { s: DVector::from_element(1, k as f64), ..zero_transition() }
}

#[test]
fn replay_sampling_is_uniform() {
    let mut buf = ReplayBuffer::new(100);
    for k in 0..100 {
        buf.push(filler(k));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(99);
    let mut counts = [0usize; 100];
    for i in buf.sample_indices(100_000, &mut rng) {
        counts[i] += 1;
    }
    let expected = 1000.0;
    let chi2: f64 = counts.iter().map(|&c| (c as f64 - expected).powi(2) / expected).sum();
    // 99.9 % quantile of χ² with 99 degrees of freedom.
    assert!(chi2 < 148.230, "chi-square {chi2}");
}

#[test]
fn replay_evicts_fifo() {
    let mut buf = ReplayBuffer::new(5);
    assert!(buf.sample::<f64, _>(1, &mut ChaCha8Rng::seed_from_u64(0)).is_err());
    for k in 0..12 {
        buf.push(filler(k));
        assert_eq!(buf.len(), (k + 1).min(5));
    }
    let order: Vec<f64> = buf.iter().map(|t| t.s[0]).collect();
    assert_eq!(order, vec![7.0, 8.0, 9.0, 10.0, 11.0]);
}

#[test]
fn checkpoint_roundtrip_is_exact() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let mut learner = Learner::<f32>::new(4, 1, toy_cfg(vec![32, 16], 16), 12).unwrap();
    let mut buf = ReplayBuffer::new(1000);
    for t in random_batch(&mut rng, 4, 1, 64) {
        buf.push(t);
    }
    for _ in 0..20 {
        learner.update(&buf).unwrap().unwrap();
    }
    learner.episodes = 3;
    let _ = learner.explore(&DVector::zeros(4));
    let json = learner.to_checkpoint_json().unwrap();
    let mut back = Learner::<f32>::from_checkpoint_json(&json).unwrap();
    assert_eq!(back.to_checkpoint_json().unwrap(), json);
    for _ in 0..100 {
        let s = DVector::from_fn(4, |_, _| rng.gen_range(-1.0..1.0));
        assert_eq!(back.policy(&s), learner.policy(&s));
        assert_eq!(back.q_value(&s, &DVector::from_element(1, 0.3)), learner.q_value(&s, &DVector::from_element(1, 0.3)));
    }
    // The restored RNG and optimizer continue the same stream.
    let s = DVector::from_element(4, 0.1);
    assert_eq!(back.explore(&s), learner.explore(&s));
    assert_eq!(back.update(&buf).unwrap(), learner.update(&buf).unwrap());
    assert_eq!(back.actor.params(), learner.actor.params());
}

#[test]
fn checkpoint_rejects_mismatches() {
    let learner = Learner::<f32>::new(4, 1, toy_cfg(vec![4], 4), 1).unwrap();
    let json = learner.to_checkpoint_json().unwrap();
    assert!(matches!(Learner::<f64>::from_checkpoint_json(&json), Err(Error::Format(_))));
    assert!(Learner::<f32>::from_checkpoint_json(&json.replace(CHECKPOINT_FORMAT, "other")).is_err());
    assert!(Learner::<f32>::from_checkpoint_json(&json[..json.len() / 2]).is_err());
    let mut v: serde_json::Value = serde_json::from_str(&json).unwrap();
    v["actor"]["params"].as_array_mut().unwrap().pop();
    assert!(Learner::<f32>::from_checkpoint_json(&v.to_string()).is_err());
}

#[test]
fn learner_config_validation() {
    for bad in [
        LearnerConfig { gamma: 1.0, ..Default::default() },
        LearnerConfig { actor_lr: 0.0, ..Default::default() },
        LearnerConfig { batch: 0, ..Default::default() },
        LearnerConfig { hidden: vec![], ..Default::default() },
        LearnerConfig { drl_magnitude: -1.0, ..Default::default() },
    ] {
        assert!(matches!(Learner::<f32>::new(4, 1, bad, 0), Err(Error::Config(_))));
    }
}

fn setup(initial: DVector<f64>) -> EpisodeSetup {
    EpisodeSetup {
        plant: CartPoleParams::frictionless(),
        initial,
        max_steps: 500,
        disturbance: 0.0,
        learn: false,
        explore: false,
        episode: 0,
    }
}

#[test]
fn model_based_episode_stays_safe() {
    let design = published_cartpole_design();
    let safety = cartpole_safety_spec();
    let mut learner = Learner::<f32>::new(4, 1, toy_cfg(vec![8], 4), 0).unwrap();
    zero_actor(&mut learner);
    let mut buf = ReplayBuffer::new(1000);
    let s0 = DVector::from_column_slice(&[0.1, 0.0, 0.05, 0.0]);
    let tr = run_episode(&mut learner, &mut buf, &design, &safety, &setup(s0), None, &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
    let ep = &tr.episodes[0];
    assert_eq!(ep.termination, Termination::StepCap);
    assert_eq!(ep.steps, 500);
    assert_eq!(ep.box_exits, 0);
    assert_eq!(buf.len(), 500);
    assert!(tr.rows.last().unwrap().envelope < 1e-3);
}

#[test]
fn start_outside_safety_set_is_zero_length() {
    let design = published_cartpole_design();
    let safety = cartpole_safety_spec();
    let mut learner = Learner::<f32>::new(4, 1, toy_cfg(vec![8], 4), 0).unwrap();
    let mut buf = ReplayBuffer::new(10);
    let s0 = DVector::from_column_slice(&[1.2, 0.0, 0.0, 0.0]);
    let tr = run_episode(&mut learner, &mut buf, &design, &safety, &setup(s0), None, &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
    assert_eq!(tr.episodes[0].steps, 0);
    assert_eq!(tr.episodes[0].termination, Termination::SafetyExit);
    assert!(buf.is_empty());
    assert_eq!(learner.episodes, 1);
}

#[test]
fn batch_layout() {
    let ts = random_batch(&mut ChaCha8Rng::seed_from_u64(0), 3, 2, 5);
    let b = Batch::<f64>::from_transitions(&ts);
    assert_eq!((b.s.nrows(), b.s.ncols(), b.a.nrows(), b.len()), (3, 5, 2, 5));
    assert_eq!(b.s.column(4), DMatrix::from_column_slice(3, 1, ts[4].s.as_slice()).column(0));
    assert_eq!(b.done, ts.iter().map(|t| t.done).collect::<Vec<_>>());
}
