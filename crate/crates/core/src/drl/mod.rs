//! HP-Student: residual policy `a_HP = a_drl + F·s`, the safety-embedded
//! reward, replay with correction support, and a DDPG learner.

mod checkpoint;
mod mlp;

pub use checkpoint::{CHECKPOINT_FORMAT, CHECKPOINT_VERSION};
pub use mlp::{to_f64, to_t, Adam, Cache, Dense, Float, Grads, Mlp, OutputActivation};

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::quad_form;

/// Returns `(a_HP, a_drl, a_phy)` with `a_drl = m·actor(s)`, `a_phy = F·s`.
pub fn residual_action<T: Float>(
    actor: &Mlp<T>,
    f: &DMatrix<f64>,
    s: &DVector<f64>,
    m_scale: f64,
) -> (DVector<f64>, DVector<f64>, DVector<f64>) {
    let a_drl = actor.forward_one(s) * m_scale;
    let a_phy = f * s;
    (&a_drl + &a_phy, a_drl, a_phy)
}

/// `sᵀHs − s'ᵀPs' − ‖a‖²`
pub fn safety_reward(s: &DVector<f64>, s_next: &DVector<f64>, a_drl: &DVector<f64>, p: &DMatrix<f64>, h: &DMatrix<f64>) -> f64 {
    quad_form(h, s) - quad_form(p, s_next) - a_drl.norm_squared()
}

#[derive(Clone, Debug, PartialEq)]
pub struct Transition {
    pub s: DVector<f64>,
    /// `a_drl`, or the corrected `â_HA` when recorded under teacher control.
    pub a: DVector<f64>,
    pub reward: f64,
    pub s_next: DVector<f64>,
    pub done: bool,
    pub corrected: bool,
}

/// FIFO ring buffer with uniform sampling.
#[derive(Clone, Debug)]
pub struct ReplayBuffer {
    capacity: usize,
    items: Vec<Transition>,
    head: usize,
}

impl ReplayBuffer {
    pub fn new(capacity: usize) -> Self {
        ReplayBuffer { capacity: capacity.max(1), items: Vec::new(), head: 0 }
    }

    pub fn len(&self) -> usize {
        self.items.len()
    }

    pub fn is_empty(&self) -> bool {
        self.items.is_empty()
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    pub fn push(&mut self, t: Transition) {
        if self.items.len() < self.capacity {
            self.items.push(t);
        } else {
            self.items[self.head] = t;
            self.head = (self.head + 1) % self.capacity;
        }
    }

    /// Oldest-first view.
    pub fn iter(&self) -> impl Iterator<Item = &Transition> {
        self.items[self.head..].iter().chain(self.items[..self.head].iter())
    }

    pub fn sample_indices<R: Rng>(&self, count: usize, rng: &mut R) -> Vec<usize> {
        (0..count).map(|_| rng.gen_range(0..self.items.len())).collect()
    }

    pub fn sample<T: Float, R: Rng>(&self, count: usize, rng: &mut R) -> Result<Batch<T>> {
        if self.items.is_empty() {
            return Err(Error::Structural("sampling from an empty replay buffer".into()));
        }
        let idx = self.sample_indices(count, rng);
        Ok(Batch::from_transitions(idx.iter().map(|&i| &self.items[i])))
    }
}

/// Column-stacked minibatch.
#[derive(Clone, Debug, PartialEq)]
pub struct Batch<T: Float> {
    pub s: DMatrix<T>,
    pub a: DMatrix<T>,
    pub r: DVector<T>,
    pub s_next: DMatrix<T>,
    pub done: Vec<bool>,
}

impl<T: Float> Batch<T> {
    pub fn from_transitions<'a>(ts: impl IntoIterator<Item = &'a Transition>) -> Self {
        let ts: Vec<&Transition> = ts.into_iter().collect();
        let n = ts.first().map_or(0, |t| t.s.len());
        let m = ts.first().map_or(0, |t| t.a.len());
        Batch {
            s: DMatrix::from_fn(n, ts.len(), |i, j| to_t(ts[j].s[i])),
            a: DMatrix::from_fn(m, ts.len(), |i, j| to_t(ts[j].a[i])),
            r: DVector::from_iterator(ts.len(), ts.iter().map(|t| to_t(t.reward))),
            s_next: DMatrix::from_fn(n, ts.len(), |i, j| to_t(ts[j].s_next[i])),
            done: ts.iter().map(|t| t.done).collect(),
        }
    }

    pub fn len(&self) -> usize {
        self.r.len()
    }

    pub fn is_empty(&self) -> bool {
        self.r.is_empty()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LearnerConfig {
    pub gamma: f64,
    pub actor_lr: f64,
    pub critic_lr: f64,
    pub batch: usize,
    /// Magnitude `m` of the DRL action, `|a_drl| ≤ m`.
    pub drl_magnitude: f64,
    /// Exploration std as a fraction of `m`.
    pub noise_scale: f64,
    /// Per-episode multiplicative decay of the exploration std.
    pub noise_decay: f64,
    pub target_smoothing: f64,
    pub hidden: Vec<usize>,
    pub buffer_capacity: usize,
    /// Keep taking gradient steps while the teacher is in control.
    pub update_during_teacher: bool,
}

impl Default for LearnerConfig {
    fn default() -> Self {
        LearnerConfig {
            gamma: 0.9,
            actor_lr: 3e-4,
            critic_lr: 3e-4,
            batch: 200,
            drl_magnitude: 5.0,
            noise_scale: 0.1,
            noise_decay: 0.9,
            target_smoothing: 0.005,
            hidden: vec![256, 128, 64],
            buffer_capacity: 1_000_000,
            update_during_teacher: true,
        }
    }
}

impl LearnerConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if !(self.gamma > 0.0 && self.gamma < 1.0) {
            return bad(format!("learner.gamma must lie in (0, 1), got {}", self.gamma));
        }
        if !(self.actor_lr > 0.0 && self.critic_lr > 0.0) {
            return bad("learner learning rates must be positive".into());
        }
        if self.batch == 0 || self.buffer_capacity == 0 {
            return bad("learner.batch and learner.buffer_capacity must be positive".into());
        }
        if !(self.drl_magnitude > 0.0 && self.drl_magnitude.is_finite()) {
            return bad(format!("learner.drl_magnitude must be positive, got {}", self.drl_magnitude));
        }
        if !(self.noise_scale >= 0.0 && self.noise_decay > 0.0 && self.noise_decay <= 1.0) {
            return bad("learner noise settings out of range".into());
        }
        if !(self.target_smoothing > 0.0 && self.target_smoothing <= 1.0) {
            return bad(format!("learner.target_smoothing must lie in (0, 1], got {}", self.target_smoothing));
        }
        if self.hidden.is_empty() || self.hidden.contains(&0) {
            return bad(format!("learner.hidden must list positive widths, got {:?}", self.hidden));
        }
        Ok(())
    }
}

/// Actor, critic, their targets and optimizers, plus the learner's RNG.
#[derive(Clone, Debug)]
pub struct Learner<T: Float = f32> {
    pub cfg: LearnerConfig,
    pub actor: Mlp<T>,
    pub critic: Mlp<T>,
    pub actor_target: Mlp<T>,
    pub critic_target: Mlp<T>,
    pub actor_opt: Adam<T>,
    pub critic_opt: Adam<T>,
    pub(crate) rng: ChaCha8Rng,
    pub(crate) seed: u64,
    pub updates: u64,
    pub episodes: u64,
}

impl<T: Float> Learner<T> {
    pub fn new(state_dim: usize, action_dim: usize, cfg: LearnerConfig, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut aw = vec![state_dim];
        aw.extend(&cfg.hidden);
        aw.push(action_dim);
        let mut cw = vec![state_dim + action_dim];
        cw.extend(&cfg.hidden);
        cw.push(1);
        let actor = Mlp::new(&aw, OutputActivation::Tanh, &mut rng)?;
        let critic = Mlp::new(&cw, OutputActivation::Linear, &mut rng)?;
        Ok(Learner {
            actor_opt: Adam::new(&actor, cfg.actor_lr),
            critic_opt: Adam::new(&critic, cfg.critic_lr),
            actor_target: actor.clone(),
            critic_target: critic.clone(),
            actor,
            critic,
            cfg,
            rng,
            seed,
            updates: 0,
            episodes: 0,
        })
    }

    pub fn state_dim(&self) -> usize {
        self.actor.input_dim()
    }

    pub fn action_dim(&self) -> usize {
        self.actor.output_dim()
    }

    pub fn rng(&mut self) -> &mut ChaCha8Rng {
        &mut self.rng
    }

    /// Deterministic DRL action `m·actor(s)`.
    pub fn policy(&self, s: &DVector<f64>) -> DVector<f64> {
        self.actor.forward_one(s) * self.cfg.drl_magnitude
    }

    /// Policy action plus decayed Gaussian exploration, clipped to `±m`.
    pub fn explore(&mut self, s: &DVector<f64>) -> DVector<f64> {
        let m = self.cfg.drl_magnitude;
        let std = self.cfg.noise_scale * m * self.cfg.noise_decay.powi(self.episodes as i32);
        let mut a = self.policy(s);
        if std > 0.0 {
            let normal = Normal::new(0.0, std).expect("positive std");
            for v in a.iter_mut() {
                *v = (*v + normal.sample(&mut self.rng)).clamp(-m, m);
            }
        }
        a
    }

    fn critic_input(&self, s: &DMatrix<T>, a_scaled: &DMatrix<T>) -> DMatrix<T> {
        let (n, m, b) = (s.nrows(), a_scaled.nrows(), s.ncols());
        let mut x = DMatrix::zeros(n + m, b);
        x.rows_mut(0, n).copy_from(s);
        x.rows_mut(n, m).copy_from(a_scaled);
        x
    }

    /// Critic output `Q(s, a)` for a single pair.
    pub fn q_value(&self, s: &DVector<f64>, a: &DVector<f64>) -> f64 {
        let m = self.cfg.drl_magnitude;
        let x = self.critic_input(
            &DMatrix::from_fn(s.len(), 1, |i, _| to_t(s[i])),
            &DMatrix::from_fn(a.len(), 1, |i, _| to_t(a[i] / m)),
        );
        to_f64(self.critic.forward(&x)[(0, 0)])
    }

    /// Bootstrapped regression targets from the target networks.
    pub fn critic_targets(&self, batch: &Batch<T>) -> DVector<T> {
        let mu_next = self.actor_target.forward(&batch.s_next);
        let q_next = self.critic_target.forward(&self.critic_input(&batch.s_next, &mu_next));
        let gamma: T = to_t(self.cfg.gamma);
        DVector::from_fn(batch.len(), |j, _| {
            let boot = if batch.done[j] { T::zero() } else { q_next[(0, j)] };
            batch.r[j] + gamma * boot
        })
    }

    /// Mean-squared TD loss against fixed targets, and its parameter gradient.
    pub fn critic_loss_grads(&self, batch: &Batch<T>, targets: &DVector<T>) -> (f64, Grads<T>) {
        let m: T = to_t(self.cfg.drl_magnitude);
        let x = self.critic_input(&batch.s, &(&batch.a / m));
        let cache = self.critic.forward_cached(&x);
        let q = cache.output();
        let bsz = batch.len() as f64;
        let diff = DMatrix::from_fn(1, batch.len(), |_, j| q[(0, j)] - targets[j]);
        let loss = diff.iter().map(|d| to_f64(*d).powi(2)).sum::<f64>() / bsz;
        let (g, _) = self.critic.backward(&cache, &(diff * to_t::<T>(2.0 / bsz)));
        (loss, g)
    }

    /// `−mean Q(s, m·actor(s))`, and its gradient in the actor parameters.
    pub fn actor_loss_grads(&self, batch: &Batch<T>) -> (f64, Grads<T>) {
        let a_cache = self.actor.forward_cached(&batch.s);
        let mu = a_cache.output();
        let x = self.critic_input(&batch.s, mu);
        let c_cache = self.critic.forward_cached(&x);
        let bsz = batch.len() as f64;
        let loss = -c_cache.output().iter().map(|q| to_f64(*q)).sum::<f64>() / bsz;
        let d_q = DMatrix::from_element(1, batch.len(), to_t::<T>(-1.0 / bsz));
        let d_x = self.critic.input_gradient(&c_cache, &d_q);
        let d_mu = d_x.rows(batch.s.nrows(), mu.nrows()).into_owned();
        let (g, _) = self.actor.backward(&a_cache, &d_mu);
        (loss, g)
    }

    /// One DDPG step. Non-finite losses or parameters abort the update
    /// without touching the networks.
    pub fn update_on(&mut self, batch: &Batch<T>) -> Result<(f64, f64)> {
        let step = self.updates as usize;
        let targets = self.critic_targets(batch);
        let (critic_loss, cg) = self.critic_loss_grads(batch, &targets);
        if !critic_loss.is_finite() || !cg.all_finite() {
            return Err(Error::Divergence { step, reason: "non-finite critic loss or gradient".into() });
        }
        let saved = (self.critic.clone(), self.critic_opt.clone());
        self.critic_opt.step(&mut self.critic, &cg);
        let (actor_loss, ag) = self.actor_loss_grads(batch);
        if !actor_loss.is_finite() || !ag.all_finite() {
            (self.critic, self.critic_opt) = saved;
            return Err(Error::Divergence { step, reason: "non-finite actor loss or gradient".into() });
        }
        let saved_actor = (self.actor.clone(), self.actor_opt.clone());
        self.actor_opt.step(&mut self.actor, &ag);
        if !self.actor.is_finite() || !self.critic.is_finite() {
            (self.critic, self.critic_opt) = saved;
            (self.actor, self.actor_opt) = saved_actor;
            return Err(Error::Divergence { step, reason: "non-finite parameters after update".into() });
        }
        let tau = self.cfg.target_smoothing;
        self.actor_target.soft_update(&self.actor, tau);
        self.critic_target.soft_update(&self.critic, tau);
        self.updates += 1;
        Ok((actor_loss, critic_loss))
    }

    /// Sample a minibatch and update, once the buffer holds a full batch.
    pub fn update(&mut self, buffer: &ReplayBuffer) -> Result<Option<(f64, f64)>> {
        if buffer.len() < self.cfg.batch {
            return Ok(None);
        }
        let batch = buffer.sample(self.cfg.batch, &mut self.rng)?;
        self.update_on(&batch).map(Some)
    }
}
