//! Experiment orchestration: design resolution, pretraining with domain
//! randomization, continual learning on the gapped plant, the three-model
//! comparison, trace checking and plots.

mod checker;
mod config;
mod plot;
mod rollout;
mod trace;

pub use checker::{check_trace, CheckReport, CheckerInputs};
pub use config::{
    default_initial_conditions, CompareConfig, DesignConfig, DesignSource, EpisodeConfig, ModelKind, RandomizationConfig,
    RealPlantConfig, RunConfig, SEED_ENV,
};
pub use plot::{envelope_polyline, phase_svg, Series};
pub use rollout::{cartpole_model, env_rng, random_initial_state, run_episode, teacher_service, EpisodeSetup, Supervisor};
pub use trace::{
    read_run_csv, read_summary_csv, write_run_csv, write_summary_csv, EpisodeSummary, RunRow, RunTrace, StepActions,
    Termination, RUN_HEADER, SUMMARY_HEADER,
};

use std::collections::BTreeMap;
use std::fs;
use std::io::BufWriter;
use std::path::{Path, PathBuf};

use nalgebra::DVector;
use rand::Rng;

use crate::cartpole::{student_linearization, CartPoleParams};
use crate::drl::{Learner, ReplayBuffer};
use crate::error::{Error, Result};
use crate::geometry::{cartpole_action_spec, cartpole_safety_spec, SafetySpec};
use crate::student::{
    published_cartpole_design, synthesize_student, verify_student_design, StudentDesign, VerificationReport,
};

fn write_file(path: &Path, contents: &[u8]) -> Result<()> {
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir)?;
    }
    fs::write(path, contents)?;
    Ok(())
}

fn create(path: &Path) -> Result<BufWriter<fs::File>> {
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir)?;
    }
    Ok(BufWriter::new(fs::File::create(path)?))
}

/// Synthesize and verify a student design from the config's options.
pub fn synthesize_design(cfg: &RunConfig) -> Result<(StudentDesign, VerificationReport)> {
    let (a, b) = student_linearization(&cfg.plant);
    let opts = cfg.design.options();
    let design = synthesize_student(&a, &b, &cartpole_safety_spec(), &cartpole_action_spec(), &opts)?;
    let report = verify_student_design(&design, &cartpole_safety_spec(), &cartpole_action_spec(), 0.0)?;
    Ok((design, report))
}

/// The design a run uses; loaded designs must pass verification.
pub fn resolve_design(cfg: &RunConfig) -> Result<StudentDesign> {
    match cfg.design.source {
        DesignSource::Published => Ok(published_cartpole_design()),
        DesignSource::Synthesize => {
            let (d, report) = synthesize_design(cfg)?;
            if !report.all_passed() {
                return Err(Error::SynthesisInfeasible {
                    reason: "synthesized design failed verification".into(),
                    failing: report.failures().iter().map(|c| c.name.clone()).collect(),
                });
            }
            Ok(d)
        }
        DesignSource::File => {
            let path = cfg.design.path.as_ref().expect("validated: file source has a path");
            let text = fs::read_to_string(path)
                .map_err(|e| Error::Config(format!("cannot read design {}: {e}", path.display())))?;
            let d = StudentDesign::from_json(&text)?;
            let report = verify_student_design(&d, &cartpole_safety_spec(), &cartpole_action_spec(), 0.0)?;
            if !report.all_passed() {
                return Err(Error::Config(format!("design {} fails verification:\n{report}", path.display())));
            }
            Ok(d)
        }
    }
}

pub struct PretrainResult {
    /// Learner after 0, 1, …, N episodes.
    pub snapshots: Vec<Learner>,
    pub trace: RunTrace,
}

/// Pretraining over randomized plants. Returns every per-episode snapshot.
pub fn pretrain(cfg: &RunConfig, design: &StudentDesign) -> Result<PretrainResult> {
    let safety = cartpole_safety_spec();
    let mut learner = Learner::<f32>::new(4, 1, cfg.learner.clone(), cfg.seed)?;
    let mut buffer = ReplayBuffer::new(cfg.learner.buffer_capacity);
    let mut rng = env_rng(cfg.seed, 0);
    let mut snapshots = vec![learner.clone()];
    let mut trace = RunTrace::default();
    let r = &cfg.randomization;
    for episode in 0..cfg.episodes.pretrain {
        let factor = if r.mu_cart_high > r.mu_cart_low { rng.gen_range(r.mu_cart_low..r.mu_cart_high) } else { r.mu_cart_low };
        let plant = CartPoleParams { mu_cart: cfg.plant.mu_cart * factor, ..cfg.plant.clone() };
        let setup = EpisodeSetup {
            plant,
            initial: random_initial_state(&design.p, cfg.episodes.init_level, &mut rng),
            max_steps: cfg.episodes.pretrain_steps,
            disturbance: r.disturbance,
            learn: true,
            explore: true,
            episode,
        };
        let t = run_episode(&mut learner, &mut buffer, design, &safety, &setup, None, &mut rng)?;
        trace.extend(t);
        snapshots.push(learner.clone());
    }
    Ok(PretrainResult { snapshots, trace })
}

/// Continual learning on the real (gapped) plant from `learner`, one
/// episode per entry of `initials`.
pub fn continual(
    cfg: &RunConfig,
    learner: &mut Learner,
    design: &StudentDesign,
    model: ModelKind,
    initials: &[DVector<f64>],
    run: u64,
) -> Result<RunTrace> {
    let safety = cartpole_safety_spec();
    let plant = cfg.real_plant_params();
    let mut buffer = ReplayBuffer::new(cfg.learner.buffer_capacity);
    let mut rng = env_rng(cfg.seed, run);
    let mut service = if model.supervised() { Some(teacher_service(design, &cfg.plant, &cfg.teacher)?) } else { None };
    let mut trace = RunTrace::default();
    for (episode, s0) in initials.iter().enumerate() {
        let setup = EpisodeSetup {
            plant: plant.clone(),
            initial: s0.clone(),
            max_steps: cfg.episodes.continual_steps,
            disturbance: cfg.real_plant.disturbance,
            learn: model.learns(),
            explore: model.learns(),
            episode,
        };
        let sup = service.as_mut().map(|service| Supervisor { service, cfg: &cfg.teacher });
        trace.extend(run_episode(learner, &mut buffer, design, &safety, &setup, sup, &mut rng)?);
    }
    Ok(trace)
}

pub fn checker_inputs<'a>(cfg: &RunConfig, design: &'a StudentDesign, safety: &'a SafetySpec, supervised: bool) -> CheckerInputs<'a> {
    CheckerInputs {
        p: &design.p,
        f: &design.f,
        h: &design.h,
        alpha: design.alpha,
        safety,
        epsilon: cfg.teacher.epsilon,
        force_limit: cfg.plant.force_limit,
        supervised,
    }
}

/// `synth`: write `design.json` and its verification report; never writes an
/// unverified design.
pub fn cmd_synth(cfg: &RunConfig) -> Result<PathBuf> {
    let (design, report) = synthesize_design(cfg)?;
    if !report.all_passed() {
        return Err(Error::SynthesisInfeasible {
            reason: "synthesized design failed verification".into(),
            failing: report.failures().iter().map(|c| c.name.clone()).collect(),
        });
    }
    let meta = cfg.provenance()?;
    let path = cfg.output_dir.join("design.json");
    write_file(&path, design.to_json_with_meta(&meta)?.as_bytes())?;
    let mut text = String::new();
    for (k, v) in &meta {
        text.push_str(&format!("# {k}={v}\n"));
    }
    text.push_str(&report.to_string());
    write_file(&cfg.output_dir.join("verification.txt"), text.as_bytes())?;
    Ok(path)
}

/// `pretrain`: checkpoints after every episode plus the reward curve.
pub fn cmd_pretrain(cfg: &RunConfig) -> Result<PathBuf> {
    let design = resolve_design(cfg)?;
    let meta = cfg.provenance()?;
    let result = pretrain(cfg, &design);
    let out = &cfg.output_dir;
    let result = match result {
        Ok(r) => r,
        Err(e) => {
            // Keep the initialization as the last good checkpoint.
            let init = Learner::<f32>::new(4, 1, cfg.learner.clone(), cfg.seed)?;
            write_file(&out.join("checkpoint.json"), init.to_checkpoint_json_with_meta(&meta)?.as_bytes())?;
            return Err(e);
        }
    };
    for (k, l) in result.snapshots.iter().enumerate() {
        write_file(&out.join(format!("checkpoint_ep{k}.json")), l.to_checkpoint_json_with_meta(&meta)?.as_bytes())?;
    }
    let last = result.snapshots.last().expect("initial snapshot");
    let path = out.join("checkpoint.json");
    write_file(&path, last.to_checkpoint_json_with_meta(&meta)?.as_bytes())?;
    write_reward_curve(&out.join("pretrain_rewards.csv"), &meta, &result.trace)?;
    write_summary_csv(create(&out.join("pretrain_summary.csv"))?, &meta, &result.trace.episodes)?;
    Ok(path)
}

fn write_reward_curve(path: &Path, meta: &BTreeMap<String, String>, trace: &RunTrace) -> Result<()> {
    let mut out = create(path)?;
    for (k, v) in meta {
        std::io::Write::write_all(&mut out, format!("# {k}={v}\n").as_bytes())?;
    }
    let mut w = csv::Writer::from_writer(out);
    w.write_record(["episode", "step", "reward"])?;
    for r in &trace.rows {
        if let Some(a) = &r.actions {
            w.write_record([r.episode.to_string(), r.step.to_string(), format!("{:?}", a.reward)])?;
        }
    }
    w.flush()?;
    Ok(())
}

fn load_checkpoint(cfg: &RunConfig) -> Result<Learner> {
    let path = cfg.checkpoint.as_ref().ok_or_else(|| Error::Config("no checkpoint configured".into()))?;
    let text = fs::read_to_string(path)
        .map_err(|e| Error::Config(format!("missing artifact: checkpoint {} ({e})", path.display())))?;
    Learner::from_checkpoint_json(&text)
}

/// `continual`: every initial condition, `episodes.continual` episodes each,
/// from fresh copies of the checkpoint.
pub fn cmd_continual(cfg: &RunConfig) -> Result<RunTrace> {
    let design = resolve_design(cfg)?;
    let base = load_checkpoint(cfg)?;
    let meta = cfg.provenance()?;
    let mut trace = RunTrace::default();
    for (i, s0) in cfg.initial_states().iter().enumerate() {
        let mut learner = base.clone();
        let starts = vec![s0.clone(); cfg.episodes.continual];
        let mut t = continual(cfg, &mut learner, &design, cfg.model, &starts, 1000 + i as u64)?;
        let offset = trace.episodes.len();
        for r in &mut t.rows {
            r.episode += offset;
        }
        for e in &mut t.episodes {
            e.episode += offset;
        }
        trace.extend(t);
    }
    let out = &cfg.output_dir;
    write_run_csv(create(&out.join(format!("trace_{}.csv", cfg.model.as_str())))?, &meta, &trace.rows)?;
    write_summary_csv(create(&out.join(format!("summary_{}.csv", cfg.model.as_str())))?, &meta, &trace.episodes)?;
    Ok(trace)
}

/// `compare`: phase data and plots for every model and initial condition,
/// the envelope slice, and per-seed reward curves.
pub fn cmd_compare(cfg: &RunConfig) -> Result<PathBuf> {
    let design = resolve_design(cfg)?;
    let base = load_checkpoint(cfg)?;
    let meta = cfg.provenance()?;
    let dir = cfg.output_dir.join("compare");
    let envelope = envelope_polyline(&design.p, 256)?;
    {
        let mut w = csv::Writer::from_writer(create(&dir.join("envelope.csv"))?);
        w.write_record(["x", "theta"])?;
        for (x, t) in &envelope {
            w.write_record([format!("{x:?}"), format!("{t:?}")])?;
        }
        w.flush()?;
    }
    let box_bounds = (0.9, 0.8);
    let initials = cfg.initial_states();
    for model in ModelKind::ALL {
        let mut series = Vec::new();
        for (i, s0) in initials.iter().enumerate() {
            let mut learner = base.clone();
            let t = continual(cfg, &mut learner, &design, model, std::slice::from_ref(s0), 2000 + i as u64)?;
            let path = dir.join(format!("phase_{}_ic{i}.csv", model.as_str()));
            let mut out = create(&path)?;
            for (k, v) in &meta {
                std::io::Write::write_all(&mut out, format!("# {k}={v}\n").as_bytes())?;
            }
            let mut w = csv::Writer::from_writer(out);
            w.write_record(["step", "x", "theta"])?;
            let mut pts = Vec::new();
            for r in &t.rows {
                w.write_record([r.step.to_string(), format!("{:?}", r.state[0]), format!("{:?}", r.state[2])])?;
                pts.push((r.state[0], r.state[2]));
            }
            w.flush()?;
            series.push(Series { label: format!("IC {} ({} violations)", i + 1, t.total_violations()), points: pts });
        }
        let svg = phase_svg(&format!("{} phase plot", model.as_str()), &series, &envelope, box_bounds, &meta);
        write_file(&dir.join(format!("phase_{}.svg", model.as_str())), svg.as_bytes())?;
    }
    for model in ModelKind::ALL {
        let mut curves: Vec<Vec<f64>> = Vec::new();
        for seed in 0..cfg.compare.seeds {
            let mut learner = base.clone();
            let starts: Vec<DVector<f64>> =
                (0..cfg.compare.episodes).map(|k| initials[k % initials.len()].clone()).collect();
            let seeded = RunConfig { seed: cfg.seed.wrapping_add(seed as u64), ..cfg.clone() };
            let t = continual(&seeded, &mut learner, &design, model, &starts, 3000)?;
            curves.push(t.returns());
        }
        write_reward_curves(&dir.join(format!("rewards_{}.csv", model.as_str())), &meta, &curves)?;
    }
    Ok(dir)
}

/// Columns: episode, one per seed, then mean/min/max across seeds.
pub fn write_reward_curves(path: &Path, meta: &BTreeMap<String, String>, curves: &[Vec<f64>]) -> Result<()> {
    let mut out = create(path)?;
    for (k, v) in meta {
        std::io::Write::write_all(&mut out, format!("# {k}={v}\n").as_bytes())?;
    }
    let mut w = csv::Writer::from_writer(out);
    let mut header = vec!["episode".to_string()];
    header.extend((0..curves.len()).map(|s| format!("seed_{s}")));
    header.extend(["mean".to_string(), "min".to_string(), "max".to_string()]);
    w.write_record(&header)?;
    let n = curves.iter().map(Vec::len).max().unwrap_or(0);
    for k in 0..n {
        let vals: Vec<f64> = curves.iter().map(|c| c.get(k).copied().unwrap_or(f64::NAN)).collect();
        let finite: Vec<f64> = vals.iter().copied().filter(|v| v.is_finite()).collect();
        let mean = finite.iter().sum::<f64>() / finite.len().max(1) as f64;
        let min = finite.iter().copied().fold(f64::INFINITY, f64::min);
        let max = finite.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let mut rec = vec![k.to_string()];
        rec.extend(vals.iter().map(|v| if v.is_finite() { format!("{v:?}") } else { String::new() }));
        rec.extend([format!("{mean:?}"), format!("{min:?}"), format!("{max:?}")]);
        w.write_record(&rec)?;
    }
    w.flush()?;
    Ok(())
}

/// `verify` on a design file.
pub fn cmd_verify_design(path: &Path) -> Result<VerificationReport> {
    let text = fs::read_to_string(path).map_err(|e| Error::Config(format!("cannot read {}: {e}", path.display())))?;
    let d = StudentDesign::from_json(&text)?;
    verify_student_design(&d, &cartpole_safety_spec(), &cartpole_action_spec(), 0.0)
}

/// `verify` on a run trace: independent re-scan plus a comparison with the
/// summary file written next to it, when present.
pub fn cmd_check_trace(cfg: &RunConfig, trace_path: &Path, supervised: bool) -> Result<CheckReport> {
    let design = resolve_design(cfg)?;
    let safety = cartpole_safety_spec();
    let text = fs::read_to_string(trace_path).map_err(|e| Error::Config(format!("cannot read {}: {e}", trace_path.display())))?;
    let mut report = check_trace(&text, &checker_inputs(cfg, &design, &safety, supervised))?;
    let name = trace_path.file_name().and_then(|n| n.to_str()).unwrap_or("");
    if let Some(rest) = name.strip_prefix("trace_") {
        let summary = trace_path.with_file_name(format!("summary_{rest}"));
        if let Ok(f) = fs::File::open(&summary) {
            let eps = read_summary_csv(f)?;
            let claimed: usize = eps.iter().map(|e| e.violations).sum();
            if claimed != report.violations {
                report.issues.push(format!("summary claims {claimed} violations, re-scan finds {}", report.violations));
            }
            let acts: usize = eps.iter().map(|e| e.teacher_activations).sum();
            if acts != report.teacher_activations {
                report.issues.push(format!("summary claims {acts} activations, re-scan finds {}", report.teacher_activations));
            }
        }
    }
    Ok(report)
}

/// `plot`: SVG phase plot of every episode in a run trace.
pub fn cmd_plot(cfg: &RunConfig, trace_path: &Path, svg_path: &Path) -> Result<()> {
    let design = resolve_design(cfg)?;
    let (meta, rows) = read_run_csv(fs::File::open(trace_path)?)?;
    let mut series: Vec<Series> = Vec::new();
    for r in &rows {
        if series.last().is_none_or(|s| s.label != format!("episode {}", r.episode)) {
            series.push(Series { label: format!("episode {}", r.episode), points: Vec::new() });
        }
        series.last_mut().expect("pushed").points.push((r.state[0], r.state[2]));
    }
    let envelope = envelope_polyline(&design.p, 256)?;
    let title = trace_path.file_name().and_then(|n| n.to_str()).unwrap_or("trace");
    write_file(svg_path, phase_svg(title, &series, &envelope, (0.9, 0.8), &meta).as_bytes())
}
