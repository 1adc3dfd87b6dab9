//! Simplex switching: monitors sᵀPs, hands control to the teacher on a
//! threshold crossing, holds it for the dwell, and produces the replay
//! corrections `â = a_HA − a_phy`.

use std::fmt;
use std::io::{Read, Write};
use std::str::FromStr;

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};
use crate::linalg::quad_form;
use crate::teacher::{dwell_lower_bound, teacher_action, GainProvider, GainSource, TeacherConfig, TeacherGains};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    Student,
    Teacher,
}

impl Mode {
    pub fn as_str(self) -> &'static str {
        match self {
            Mode::Student => "student",
            Mode::Teacher => "teacher",
        }
    }
}

impl fmt::Display for Mode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Mode {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "student" => Ok(Mode::Student),
            "teacher" => Ok(Mode::Teacher),
            other => Err(Error::Format(format!("unknown mode {other:?}"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub enum Event {
    Triggered,
    DwellExpired,
    ReturnedToStudent,
    /// Fresh synthesis failed at the trigger; fallback gains were used.
    GainFallback(GainSource),
}

impl Event {
    pub fn tag(&self) -> &'static str {
        match self {
            Event::Triggered => "triggered",
            Event::DwellExpired => "dwell-expired",
            Event::ReturnedToStudent => "returned-to-student",
            Event::GainFallback(GainSource::LastValid) => "fallback-last-valid",
            Event::GainFallback(GainSource::Origin) => "fallback-origin",
            Event::GainFallback(GainSource::Fresh) => "fallback-fresh",
        }
    }

    pub fn parse(tag: &str) -> Result<Self> {
        Ok(match tag {
            "triggered" => Event::Triggered,
            "dwell-expired" => Event::DwellExpired,
            "returned-to-student" => Event::ReturnedToStudent,
            "fallback-last-valid" => Event::GainFallback(GainSource::LastValid),
            "fallback-origin" => Event::GainFallback(GainSource::Origin),
            "fallback-fresh" => Event::GainFallback(GainSource::Fresh),
            other => return Err(Error::Format(format!("unknown event {other:?}"))),
        })
    }
}

pub fn format_events(events: &[Event]) -> String {
    events.iter().map(Event::tag).collect::<Vec<_>>().join("|")
}

pub fn parse_events(text: &str) -> Result<Vec<Event>> {
    if text.is_empty() {
        return Ok(Vec::new());
    }
    text.split('|').map(Event::parse).collect()
}

#[derive(Clone, Debug, PartialEq)]
pub struct ModeState {
    pub mode: Mode,
    pub trigger_step: Option<usize>,
    pub dwell_remaining: usize,
    pub active_gains: Option<TeacherGains>,
    /// Return-to-student level δ of the active patch.
    pub return_level: f64,
}

impl Default for ModeState {
    fn default() -> Self {
        ModeState { mode: Mode::Student, trigger_step: None, dwell_remaining: 0, active_gains: None, return_level: 0.0 }
    }
}

impl ModeState {
    pub fn check_invariants(&self) -> Result<()> {
        let ok = match self.mode {
            Mode::Teacher => self.active_gains.is_some() && self.trigger_step.is_some(),
            Mode::Student => self.dwell_remaining == 0,
        };
        if ok {
            Ok(())
        } else {
            Err(Error::Structural(format!("inconsistent mode state: {self:?}")))
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct StepDecision {
    /// Terminal action after actuator saturation.
    pub applied_action: DVector<f64>,
    pub source: Mode,
    /// Replay correction `â_HA = a_HA − a_phy` (teacher steps only).
    pub correction: Option<DVector<f64>>,
    pub events: Vec<Event>,
    pub envelope_value: f64,
}

/// Student-side action components for one step.
#[derive(Clone, Debug, PartialEq)]
pub struct StudentActions {
    pub a_hp: DVector<f64>,
    pub a_drl: DVector<f64>,
    pub a_phy: DVector<f64>,
}

/// `â_HA = a_HA − a_phy`
pub fn correct_action(a_ha: &DVector<f64>, a_phy: &DVector<f64>) -> Result<DVector<f64>> {
    if a_ha.len() != a_phy.len() {
        return Err(Error::Structural(format!("action dims {} vs {}", a_ha.len(), a_phy.len())));
    }
    Ok(a_ha - a_phy)
}

fn saturate(a: &DVector<f64>, limit: f64) -> DVector<f64> {
    a.map(|v| v.clamp(-limit, limit))
}

/// Advance the switching logic by one step.
#[allow(clippy::too_many_arguments)]
pub fn coordinate_step(
    state: &ModeState,
    step: usize,
    s: &DVector<f64>,
    actions: &StudentActions,
    p: &DMatrix<f64>,
    cfg: &TeacherConfig,
    teacher: &mut dyn GainProvider,
    force_limit: f64,
) -> Result<(ModeState, StepDecision)> {
    let StudentActions { a_hp, a_drl, a_phy } = actions;
    if a_hp.len() != a_drl.len() || a_hp.len() != a_phy.len() {
        return Err(Error::Structural("student action components differ in dimension".into()));
    }
    if (a_hp - (a_drl + a_phy)).amax() > 1e-9 {
        return Err(Error::Structural("a_HP is not a_drl + a_phy".into()));
    }
    let envelope_value = quad_form(p, s);
    let mut next = state.clone();
    let mut events = Vec::new();

    if next.mode == Mode::Teacher && next.dwell_remaining == 0 {
        let gains = next.active_gains.as_ref().expect("teacher mode holds gains");
        let elapsed = step - next.trigger_step.expect("teacher mode has a trigger step");
        if gains.tracking_value(s) <= next.return_level || elapsed >= cfg.dwell_cap {
            events.push(Event::DwellExpired);
            events.push(Event::ReturnedToStudent);
            next = ModeState::default();
        }
    }

    if next.mode == Mode::Student {
        if envelope_value < cfg.epsilon {
            let decision = StepDecision {
                applied_action: saturate(a_hp, force_limit),
                source: Mode::Student,
                correction: None,
                events,
                envelope_value,
            };
            return Ok((next, decision));
        }
        let (pg, src, _reason) = teacher.request_gains(s);
        if src != GainSource::Fresh {
            events.push(Event::GainFallback(src));
        }
        let provisional = TeacherGains::new(pg, s, cfg.chi, step, 0);
        let v0 = provisional.initial_patch_value();
        let delta = cfg.delta_fraction * v0;
        let e_star = s - &provisional.patch_center;
        let bound = dwell_lower_bound(&e_star, &provisional.p_hat, delta, cfg.beta_c);
        let dwell = bound.max(cfg.tau).min(cfg.dwell_cap);
        let gains = TeacherGains { dwell_deadline: step + dwell, ..provisional };
        events.push(Event::Triggered);
        next = ModeState {
            mode: Mode::Teacher,
            trigger_step: Some(step),
            dwell_remaining: dwell,
            active_gains: Some(gains),
            return_level: delta,
        };
    }

    // Teacher in control; re-crossings during the dwell are ignored.
    let gains = next.active_gains.as_ref().expect("teacher mode holds gains");
    let applied = saturate(&teacher_action(gains, s), force_limit);
    let correction = correct_action(&applied, a_phy)?;
    next.dwell_remaining = next.dwell_remaining.saturating_sub(1);
    let decision =
        StepDecision { applied_action: applied, source: Mode::Teacher, correction: Some(correction), events, envelope_value };
    Ok((next, decision))
}

/// One row of the coordinator's event trace.
#[derive(Clone, Debug, PartialEq)]
pub struct TraceRow {
    pub step: usize,
    pub mode: Mode,
    pub envelope_value: f64,
    pub applied: Vec<f64>,
    pub events: Vec<Event>,
}

pub const TRACE_HEADER: [&str; 5] = ["step", "mode", "envelope", "applied", "events"];

fn join_f64(v: &[f64]) -> String {
    v.iter().map(|x| format!("{x:?}")).collect::<Vec<_>>().join(";")
}

pub(crate) fn split_f64(text: &str) -> Result<Vec<f64>> {
    text.split(';')
        .map(|t| t.trim().parse::<f64>().map_err(|e| Error::Format(format!("bad number {t:?}: {e}"))))
        .collect()
}

/// CSV with `#`-prefixed metadata lines ahead of the header.
pub fn write_trace<W: Write>(out: W, meta: &[(String, String)], rows: &[TraceRow]) -> Result<()> {
    let mut out = out;
    for (k, v) in meta {
        writeln!(out, "# {k}={v}")?;
    }
    let mut w = csv::Writer::from_writer(out);
    w.write_record(TRACE_HEADER)?;
    for r in rows {
        w.write_record([
            r.step.to_string(),
            r.mode.to_string(),
            format!("{:?}", r.envelope_value),
            join_f64(&r.applied),
            format_events(&r.events),
        ])?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_trace<R: Read>(input: R) -> Result<(Vec<(String, String)>, Vec<TraceRow>)> {
    let mut text = String::new();
    let mut input = input;
    input.read_to_string(&mut text)?;
    let (meta, body) = split_metadata(&text)?;
    let mut rdr = csv::ReaderBuilder::new().from_reader(body.as_bytes());
    let header = rdr.headers()?.clone();
    if header.iter().ne(TRACE_HEADER.iter().copied()) {
        return Err(Error::Format(format!("unexpected trace header {header:?}")));
    }
    let mut rows = Vec::new();
    for rec in rdr.records() {
        let rec = rec?;
        let step = rec[0].parse().map_err(|e| Error::Format(format!("bad step: {e}")))?;
        let envelope_value = rec[2].parse().map_err(|e| Error::Format(format!("bad envelope value: {e}")))?;
        rows.push(TraceRow {
            step,
            mode: rec[1].parse()?,
            envelope_value,
            applied: split_f64(&rec[3])?,
            events: parse_events(&rec[4])?,
        });
    }
    Ok((meta, rows))
}

pub(crate) fn split_metadata(text: &str) -> Result<(Vec<(String, String)>, &str)> {
    let mut meta = Vec::new();
    let mut rest = text;
    while let Some(line) = rest.strip_prefix('#') {
        let (line, tail) = line.split_once('\n').unwrap_or((line, ""));
        let (k, v) = line
            .trim()
            .split_once('=')
            .ok_or_else(|| Error::Format(format!("metadata line without '=': {line:?}")))?;
        meta.push((k.trim().to_string(), v.trim().to_string()));
        rest = tail;
    }
    Ok((meta, rest))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn events_roundtrip() {
        let ev = vec![Event::DwellExpired, Event::ReturnedToStudent, Event::GainFallback(GainSource::Origin), Event::Triggered];
        assert_eq!(parse_events(&format_events(&ev)).unwrap(), ev);
        assert!(parse_events("").unwrap().is_empty());
        assert!(parse_events("bogus").is_err());
    }

    #[test]
    fn metadata_split() {
        let (m, rest) = split_metadata("# seed=3\n# hash=ab\nstep\n").unwrap();
        assert_eq!(m.len(), 2);
        assert_eq!(rest, "step\n");
    }
}
