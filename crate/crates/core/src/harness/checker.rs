//! Independent re-scan of a run-trace CSV. Shares nothing with the writer
//! beyond the file format: envelope values, violations and the switching
//! contract are recomputed from the raw state columns.

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};
use crate::geometry::SafetySpec;

pub struct CheckerInputs<'a> {
    pub p: &'a DMatrix<f64>,
    pub f: &'a DMatrix<f64>,
    pub h: &'a DMatrix<f64>,
    pub alpha: f64,
    pub safety: &'a SafetySpec,
    pub epsilon: f64,
    pub force_limit: f64,
    /// Coordinator in the loop: every student step must sit below ε.
    pub supervised: bool,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct CheckReport {
    pub rows: usize,
    pub episodes: usize,
    pub envelope_violations: usize,
    pub box_exits: usize,
    /// States with sᵀPs > 1 or outside the box (the trace's violation count).
    pub violations: usize,
    pub teacher_activations: usize,
    pub teacher_steps: usize,
    pub issues: Vec<String>,
}

impl CheckReport {
    pub fn ok(&self) -> bool {
        self.issues.is_empty()
    }
}

struct Row {
    episode: usize,
    step: usize,
    s: DVector<f64>,
    logged_envelope: f64,
    mode: String,
    a_drl: f64,
    a_phy: f64,
    applied: f64,
    events: String,
}

fn parse_rows(text: &str) -> Result<Vec<Row>> {
    let body: String = text.lines().filter(|l| !l.starts_with('#')).map(|l| format!("{l}\n")).collect();
    let mut rdr = csv::Reader::from_reader(body.as_bytes());
    let cols: Vec<String> = rdr.headers()?.iter().map(str::to_string).collect();
    let idx = |name: &str| cols.iter().position(|c| c == name).ok_or_else(|| Error::Format(format!("no column {name}")));
    let (ie, is, ix, iv, it, iw, ienv, im, id, ip, ia, iev) = (
        idx("episode")?,
        idx("step")?,
        idx("x")?,
        idx("v")?,
        idx("theta")?,
        idx("omega")?,
        idx("envelope")?,
        idx("mode")?,
        idx("a_drl")?,
        idx("a_phy")?,
        idx("applied")?,
        idx("events")?,
    );
    let mut rows = Vec::new();
    for rec in rdr.records() {
        let rec = rec?;
        let get = |i: usize| rec.get(i).unwrap_or("");
        let f = |i: usize| -> Result<f64> {
            let t = get(i);
            if t.is_empty() {
                return Ok(f64::NAN);
            }
            t.parse().map_err(|e| Error::Format(format!("{t:?}: {e}")))
        };
        let u = |i: usize| -> Result<usize> { get(i).parse().map_err(|e| Error::Format(format!("{:?}: {e}", get(i)))) };
        rows.push(Row {
            episode: u(ie)?,
            step: u(is)?,
            s: DVector::from_vec(vec![f(ix)?, f(iv)?, f(it)?, f(iw)?]),
            logged_envelope: f(ienv)?,
            mode: get(im).to_string(),
            a_drl: f(id)?,
            a_phy: f(ip)?,
            applied: f(ia)?,
            events: get(iev).to_string(),
        });
    }
    Ok(rows)
}

fn quad(p: &DMatrix<f64>, s: &DVector<f64>) -> f64 {
    (s.transpose() * p * s)[(0, 0)]
}

fn in_box(spec: &SafetySpec, s: &DVector<f64>) -> bool {
    let y = &spec.map * s + &spec.offset;
    (0..y.len()).all(|i| y[i] <= spec.hi[i] && y[i] >= spec.lo[i])
}

/// Scan a trace file text.
pub fn check_trace(text: &str, inp: &CheckerInputs<'_>) -> Result<CheckReport> {
    let rows = parse_rows(text)?;
    let mut rep = CheckReport { rows: rows.len(), ..Default::default() };
    let mut prev: Option<&Row> = None;
    let mut in_teacher = false;
    // Theorem-2 premise: all sub-rewards ≥ α − 1 along an episode.
    let mut premise_holds = true;
    let mut episode_left_envelope = false;
    let close_episode = |rep: &mut CheckReport, premise: bool, left: bool, ep: usize| {
        if premise && left {
            rep.issues.push(format!("episode {ep}: sub-rewards stayed above alpha-1 yet the state left the envelope"));
        }
    };
    for r in &rows {
        let new_episode = prev.is_none_or(|p| p.episode != r.episode);
        if new_episode {
            if let Some(p) = prev {
                if p.mode != "end" {
                    rep.issues.push(format!("episode {} does not end with a terminal row", p.episode));
                }
                close_episode(&mut rep, premise_holds, episode_left_envelope, p.episode);
            }
            rep.episodes += 1;
            if r.step != 0 {
                rep.issues.push(format!("episode {} starts at step {}", r.episode, r.step));
            }
            in_teacher = false;
            premise_holds = true;
            episode_left_envelope = false;
        } else if let Some(p) = prev {
            if r.step != p.step + 1 {
                rep.issues.push(format!("episode {}: step {} follows {}", r.episode, r.step, p.step));
            }
            if p.mode == "end" {
                rep.issues.push(format!("episode {}: rows after the terminal row", r.episode));
            }
            let sub = quad(inp.h, &p.s) - quad(inp.p, &r.s);
            if sub < inp.alpha - 1.0 {
                premise_holds = false;
            }
        }
        let v = quad(inp.p, &r.s);
        if (v - r.logged_envelope).abs() > 1e-9 * (1.0 + v.abs()) {
            rep.issues.push(format!("episode {} step {}: logged envelope {} vs {}", r.episode, r.step, r.logged_envelope, v));
        }
        let inside = in_box(inp.safety, &r.s);
        if v > 1.0 {
            rep.envelope_violations += 1;
            episode_left_envelope = true;
        }
        if !inside {
            rep.box_exits += 1;
        }
        if v > 1.0 || !inside {
            rep.violations += 1;
        }
        if r.mode != "end" {
            let phy = (inp.f * &r.s)[(0, 0)];
            if (phy - r.a_phy).abs() > 1e-9 * (1.0 + phy.abs()) {
                rep.issues.push(format!("episode {} step {}: a_phy {} vs F*s {}", r.episode, r.step, r.a_phy, phy));
            }
            let events: Vec<&str> = if r.events.is_empty() { Vec::new() } else { r.events.split('|').collect() };
            if events.contains(&"returned-to-student") {
                in_teacher = false;
            }
            if events.contains(&"triggered") {
                rep.teacher_activations += 1;
                if v < inp.epsilon {
                    rep.issues.push(format!("episode {} step {}: trigger below epsilon ({v})", r.episode, r.step));
                }
                in_teacher = true;
            }
            match r.mode.as_str() {
                "teacher" => {
                    rep.teacher_steps += 1;
                    if !in_teacher {
                        rep.issues.push(format!("episode {} step {}: teacher step outside an activation", r.episode, r.step));
                    }
                }
                "student" => {
                    if in_teacher {
                        rep.issues.push(format!("episode {} step {}: student step inside an activation", r.episode, r.step));
                    }
                    let expect = (r.a_drl + r.a_phy).clamp(-inp.force_limit, inp.force_limit);
                    if (expect - r.applied).abs() > 1e-9 * (1.0 + expect.abs()) {
                        rep.issues.push(format!("episode {} step {}: applied {} vs a_drl + F*s {}", r.episode, r.step, r.applied, expect));
                    }
                    if inp.supervised && v >= inp.epsilon {
                        rep.issues.push(format!("episode {} step {}: student kept control at {v}", r.episode, r.step));
                    }
                }
                other => {
                    rep.issues.push(format!("episode {} step {}: unknown mode {other:?}", r.episode, r.step));
                }
            }
        }
        prev = Some(r);
    }
    if let Some(p) = prev {
        if p.mode != "end" {
            rep.issues.push(format!("episode {} does not end with a terminal row", p.episode));
        }
        close_episode(&mut rep, premise_holds, episode_left_envelope, p.episode);
    }
    Ok(rep)
}
