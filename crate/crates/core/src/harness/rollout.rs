use std::sync::Arc;

use nalgebra::DVector;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::cartpole::{nonlinear_step, teacher_linearization, CartPoleParams, PlantState};
use crate::coordinator::{coordinate_step, Event, Mode, ModeState, StudentActions};
use crate::drl::{safety_reward, Float, Learner, ReplayBuffer, Transition};
use crate::error::{Error, Result};
use crate::geometry::SafetySpec;
use crate::linalg::quad_form;
use crate::student::StudentDesign;
use crate::teacher::{ModelFn, ServiceMode, TeacherConfig, TeacherService};

use super::trace::{EpisodeSummary, RunRow, RunTrace, StepActions, Termination};

pub struct EpisodeSetup {
    pub plant: CartPoleParams,
    pub initial: DVector<f64>,
    pub max_steps: usize,
    /// Per-step disturbance drawn from U[−d, d].
    pub disturbance: f64,
    pub learn: bool,
    pub explore: bool,
    pub episode: usize,
}

/// Teacher plus its settings, present only in supervised (SeC) runs.
pub struct Supervisor<'a> {
    pub service: &'a mut TeacherService,
    pub cfg: &'a TeacherConfig,
}

/// The teacher's model knowledge: the nominal state-dependent linearization.
pub fn cartpole_model(nominal: &CartPoleParams) -> ModelFn {
    let p = nominal.clone();
    Arc::new(move |s: &DVector<f64>| {
        let st = PlantState::from_vector(s).unwrap_or_else(|_| PlantState::zero());
        teacher_linearization(&st, &p)
    })
}

pub fn teacher_service(design: &StudentDesign, nominal: &CartPoleParams, cfg: &TeacherConfig) -> Result<TeacherService> {
    TeacherService::new(cartpole_model(nominal), design.p.clone(), cfg.clone(), ServiceMode::Synchronous)
}

fn row_state(s: &DVector<f64>) -> [f64; 4] {
    [s[0], s[1], s[2], s[3]]
}

/// Run one episode on the plant. Transitions go to `buffer`; the learner
/// takes one gradient step per environment step when `learn` is set.
pub fn run_episode<T: Float>(
    learner: &mut Learner<T>,
    buffer: &mut ReplayBuffer,
    design: &StudentDesign,
    safety: &SafetySpec,
    setup: &EpisodeSetup,
    mut supervisor: Option<Supervisor<'_>>,
    env_rng: &mut ChaCha8Rng,
) -> Result<RunTrace> {
    let p = &design.p;
    let limit = setup.plant.force_limit;
    let mut s = setup.initial.clone();
    let mut rows = Vec::new();
    let mut mode_state = ModeState::default();
    let mut summary = EpisodeSummary {
        episode: setup.episode,
        steps: 0,
        total_return: 0.0,
        violations: 0,
        box_exits: 0,
        teacher_activations: 0,
        teacher_steps: 0,
        termination: Termination::StepCap,
    };
    let note_state = |s: &DVector<f64>, summary: &mut EpisodeSummary| -> bool {
        let inside = safety.contains(s, 0.0);
        if quad_form(p, s) > 1.0 || !inside {
            summary.violations += 1;
        }
        if !inside {
            summary.box_exits += 1;
        }
        inside
    };

    if !note_state(&s, &mut summary) {
        summary.termination = Termination::SafetyExit;
        rows.push(RunRow { episode: setup.episode, step: 0, state: row_state(&s), envelope: quad_form(p, &s), actions: None });
        learner.episodes += 1;
        return Ok(RunTrace { rows, episodes: vec![summary] });
    }

    for step in 0..setup.max_steps {
        let a_drl = if setup.explore { learner.explore(&s) } else { learner.policy(&s) };
        let a_phy = &design.f * &s;
        let a_hp = &a_drl + &a_phy;
        let envelope = quad_form(p, &s);

        let (mode, applied, stored, events) = match supervisor.as_mut() {
            Some(sup) => {
                let actions = StudentActions { a_hp, a_drl: a_drl.clone(), a_phy: a_phy.clone() };
                let (next, d) = coordinate_step(&mode_state, step, &s, &actions, p, sup.cfg, sup.service, limit)?;
                mode_state = next;
                let stored = d.correction.clone().unwrap_or_else(|| a_drl.clone());
                (d.source, d.applied_action, stored, d.events)
            }
            None => (Mode::Student, a_hp.map(|v| v.clamp(-limit, limit)), a_drl.clone(), Vec::new()),
        };
        if events.contains(&Event::Triggered) {
            summary.teacher_activations += 1;
        }
        if mode == Mode::Teacher {
            summary.teacher_steps += 1;
        }

        let d = if setup.disturbance > 0.0 { env_rng.gen_range(-setup.disturbance..=setup.disturbance) } else { 0.0 };
        let plant_state = PlantState::from_vector(&s)?;
        let next = match nonlinear_step(&plant_state, applied[0], &setup.plant, d) {
            Ok(n) => n.to_vector(),
            Err(Error::Divergence { .. }) => {
                summary.termination = Termination::Divergence;
                summary.steps = step;
                rows.push(RunRow { episode: setup.episode, step, state: row_state(&s), envelope, actions: None });
                learner.episodes += 1;
                return Ok(RunTrace { rows, episodes: vec![summary] });
            }
            Err(e) => return Err(e),
        };
        let reward = safety_reward(&s, &next, &stored, p, &design.h);
        let inside = note_state(&next, &mut summary);
        buffer.push(Transition {
            s: s.clone(),
            a: stored,
            reward,
            s_next: next.clone(),
            done: !inside,
            corrected: mode == Mode::Teacher,
        });
        summary.total_return += reward;
        rows.push(RunRow {
            episode: setup.episode,
            step,
            state: row_state(&s),
            envelope,
            actions: Some(StepActions { mode, a_drl: a_drl[0], a_phy: a_phy[0], applied: applied[0], reward, events }),
        });
        if setup.learn && (mode == Mode::Student || learner.cfg.update_during_teacher) {
            learner.update(buffer).map_err(|e| match e {
                Error::Divergence { reason, .. } => Error::Divergence { step, reason },
                other => other,
            })?;
        }
        s = next;
        summary.steps = step + 1;
        if !inside {
            summary.termination = Termination::SafetyExit;
            break;
        }
    }
    rows.push(RunRow { episode: setup.episode, step: summary.steps, state: row_state(&s), envelope: quad_form(p, &s), actions: None });
    learner.episodes += 1;
    Ok(RunTrace { rows, episodes: vec![summary] })
}

/// Random start with sᵀPs uniform in `[0.05, level]`.
pub fn random_initial_state(p: &nalgebra::DMatrix<f64>, level: f64, rng: &mut ChaCha8Rng) -> DVector<f64> {
    let d = DVector::from_fn(p.nrows(), |_, _| rng.gen_range(-1.0..1.0));
    let target = rng.gen_range(0.05..level);
    &d * (target / quad_form(p, &d)).sqrt()
}

/// Environment RNG for one run, independent of the learner's stream.
pub fn env_rng(seed: u64, run: u64) -> ChaCha8Rng {
    let mut r = ChaCha8Rng::seed_from_u64(seed ^ 0x5ec0_e17e);
    r.set_stream(run);
    r
}
