//! Versioned JSON checkpoints: weights, Adam moments and the exact RNG
//! position, so a reload continues bit-for-bit.

use std::collections::BTreeMap;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{Adam, Float, Grads, Learner, LearnerConfig, Mlp, OutputActivation};
use crate::error::{Error, Result};

pub const CHECKPOINT_FORMAT: &str = "sec-learner-checkpoint";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct NetFile {
    widths: Vec<usize>,
    output: OutputActivation,
    params: Vec<f64>,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct AdamFile {
    lr: f64,
    beta1: f64,
    beta2: f64,
    eps: f64,
    t: u64,
    m: Vec<f64>,
    v: Vec<f64>,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct RngFile {
    seed: String,
    stream: u64,
    /// u128 does not survive every JSON reader; kept as a decimal string.
    word_pos: String,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct CheckpointFile {
    format: String,
    version: u32,
    scalar: String,
    config: LearnerConfig,
    seed: u64,
    updates: u64,
    episodes: u64,
    actor: NetFile,
    critic: NetFile,
    actor_target: NetFile,
    critic_target: NetFile,
    actor_opt: AdamFile,
    critic_opt: AdamFile,
    rng: RngFile,
    #[serde(default, skip_serializing_if = "BTreeMap::is_empty")]
    meta: BTreeMap<String, String>,
}

fn net_file<T: Float>(net: &Mlp<T>) -> NetFile {
    NetFile { widths: net.widths().to_vec(), output: net.output_activation(), params: net.params() }
}

fn net_from<T: Float>(f: NetFile, what: &str) -> Result<Mlp<T>> {
    if f.params.iter().any(|v| !v.is_finite()) {
        return Err(Error::Format(format!("{what}: non-finite parameter")));
    }
    Mlp::from_params(&f.widths, f.output, &f.params).map_err(|e| Error::Format(format!("{what}: {e}")))
}

fn adam_file<T: Float>(a: &Adam<T>) -> AdamFile {
    AdamFile { lr: a.lr, beta1: a.beta1, beta2: a.beta2, eps: a.eps, t: a.t, m: a.m.flatten(), v: a.v.flatten() }
}

fn grads_from<T: Float>(net: &Mlp<T>, flat: &[f64], what: &str) -> Result<Grads<T>> {
    let shaped = Mlp::<T>::from_params(net.widths(), net.output_activation(), flat)
        .map_err(|e| Error::Format(format!("{what}: {e}")))?;
    Ok(Grads { layers: shaped.layers })
}

fn adam_from<T: Float>(f: AdamFile, net: &Mlp<T>, what: &str) -> Result<Adam<T>> {
    let finite = [f.lr, f.beta1, f.beta2, f.eps].iter().chain(&f.m).chain(&f.v).all(|v| v.is_finite());
    if !finite || f.v.iter().any(|v| *v < 0.0) {
        return Err(Error::Format(format!("{what}: invalid optimizer state")));
    }
    Ok(Adam {
        lr: f.lr,
        beta1: f.beta1,
        beta2: f.beta2,
        eps: f.eps,
        t: f.t,
        m: grads_from(net, &f.m, what)?,
        v: grads_from(net, &f.v, what)?,
    })
}

impl<T: Float> Learner<T> {
    pub fn to_checkpoint_json(&self) -> Result<String> {
        self.to_checkpoint_json_with_meta(&BTreeMap::new())
    }

    pub fn to_checkpoint_json_with_meta(&self, meta: &BTreeMap<String, String>) -> Result<String> {
        let file = CheckpointFile {
            format: CHECKPOINT_FORMAT.into(),
            version: CHECKPOINT_VERSION,
            scalar: T::NAME.into(),
            config: self.cfg.clone(),
            seed: self.seed,
            updates: self.updates,
            episodes: self.episodes,
            actor: net_file(&self.actor),
            critic: net_file(&self.critic),
            actor_target: net_file(&self.actor_target),
            critic_target: net_file(&self.critic_target),
            actor_opt: adam_file(&self.actor_opt),
            critic_opt: adam_file(&self.critic_opt),
            rng: RngFile {
                seed: hex::encode(self.rng.get_seed()),
                stream: self.rng.get_stream(),
                word_pos: self.rng.get_word_pos().to_string(),
            },
            meta: meta.clone(),
        };
        Ok(serde_json::to_string_pretty(&file)?)
    }

    pub fn from_checkpoint_json(text: &str) -> Result<Self> {
        let f: CheckpointFile = serde_json::from_str(text)?;
        if f.format != CHECKPOINT_FORMAT {
            return Err(Error::Format(format!("not a learner checkpoint (format {:?})", f.format)));
        }
        if f.version != CHECKPOINT_VERSION {
            return Err(Error::Format(format!("unsupported checkpoint version {}", f.version)));
        }
        if f.scalar != T::NAME {
            return Err(Error::Format(format!("checkpoint holds {} networks, expected {}", f.scalar, T::NAME)));
        }
        f.config.validate().map_err(|e| Error::Format(format!("checkpoint config: {e}")))?;
        let actor = net_from(f.actor, "actor")?;
        let critic = net_from(f.critic, "critic")?;
        let actor_target = net_from(f.actor_target, "actor_target")?;
        let critic_target = net_from(f.critic_target, "critic_target")?;
        let (n, m) = (actor.input_dim(), actor.output_dim());
        let hidden_ok = |net: &Mlp<T>| net.widths()[1..net.widths().len() - 1] == f.config.hidden[..];
        let shapes_ok = actor.output_activation() == OutputActivation::Tanh
            && critic.output_activation() == OutputActivation::Linear
            && critic.input_dim() == n + m
            && critic.output_dim() == 1
            && hidden_ok(&actor)
            && hidden_ok(&critic)
            && actor_target.widths() == actor.widths()
            && critic_target.widths() == critic.widths()
            && actor_target.output_activation() == actor.output_activation()
            && critic_target.output_activation() == critic.output_activation();
        if !shapes_ok {
            return Err(Error::Format("checkpoint network shapes are inconsistent".into()));
        }
        let actor_opt = adam_from(f.actor_opt, &actor, "actor_opt")?;
        let critic_opt = adam_from(f.critic_opt, &critic, "critic_opt")?;
        let seed_bytes: [u8; 32] = hex::decode(&f.rng.seed)
            .map_err(|e| Error::Format(format!("rng seed: {e}")))?
            .try_into()
            .map_err(|_| Error::Format("rng seed must be 32 bytes".into()))?;
        let word_pos: u128 = f.rng.word_pos.parse().map_err(|e| Error::Format(format!("rng word_pos: {e}")))?;
        let mut rng = ChaCha8Rng::from_seed(seed_bytes);
        rng.set_stream(f.rng.stream);
        rng.set_word_pos(word_pos);
        Ok(Learner {
            cfg: f.config,
            actor,
            critic,
            actor_target,
            critic_target,
            actor_opt,
            critic_opt,
            rng,
            seed: f.seed,
            updates: f.updates,
            episodes: f.episodes,
        })
    }
}
