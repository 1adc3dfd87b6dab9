//! Run traces: one CSV row per visited state, `#key=value` provenance lines
//! first. The last row of every episode is the terminal state (mode `end`,
//! action columns empty).

use std::collections::BTreeMap;
use std::io::{Read, Write};

use crate::coordinator::{format_events, parse_events, split_metadata, Event, Mode};
use crate::error::{Error, Result};

pub const RUN_HEADER: [&str; 13] =
    ["episode", "step", "x", "v", "theta", "omega", "envelope", "mode", "a_drl", "a_phy", "applied", "reward", "events"];

pub const SUMMARY_HEADER: [&str; 8] =
    ["episode", "steps", "return", "violations", "box_exits", "teacher_activations", "teacher_steps", "termination"];

#[derive(Clone, Debug, PartialEq)]
pub struct StepActions {
    pub mode: Mode,
    pub a_drl: f64,
    pub a_phy: f64,
    pub applied: f64,
    pub reward: f64,
    pub events: Vec<Event>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct RunRow {
    pub episode: usize,
    pub step: usize,
    pub state: [f64; 4],
    pub envelope: f64,
    /// `None` on the terminal row.
    pub actions: Option<StepActions>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Termination {
    StepCap,
    SafetyExit,
    Divergence,
}

impl Termination {
    pub fn as_str(self) -> &'static str {
        match self {
            Termination::StepCap => "step-cap",
            Termination::SafetyExit => "safety-exit",
            Termination::Divergence => "divergence",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "step-cap" => Ok(Termination::StepCap),
            "safety-exit" => Ok(Termination::SafetyExit),
            "divergence" => Ok(Termination::Divergence),
            other => Err(Error::Format(format!("unknown termination {other:?}"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct EpisodeSummary {
    pub episode: usize,
    pub steps: usize,
    pub total_return: f64,
    /// Visited states with sᵀPs > 1 or outside the safety box.
    pub violations: usize,
    pub box_exits: usize,
    pub teacher_activations: usize,
    pub teacher_steps: usize,
    pub termination: Termination,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct RunTrace {
    pub rows: Vec<RunRow>,
    pub episodes: Vec<EpisodeSummary>,
}

impl RunTrace {
    pub fn total_violations(&self) -> usize {
        self.episodes.iter().map(|e| e.violations).sum()
    }

    pub fn max_envelope(&self) -> f64 {
        self.rows.iter().map(|r| r.envelope).fold(f64::NEG_INFINITY, f64::max)
    }

    pub fn returns(&self) -> Vec<f64> {
        self.episodes.iter().map(|e| e.total_return).collect()
    }

    pub fn extend(&mut self, other: RunTrace) {
        self.rows.extend(other.rows);
        self.episodes.extend(other.episodes);
    }
}

fn num(x: f64) -> String {
    format!("{x:?}")
}

fn write_meta<W: Write>(out: &mut W, meta: &BTreeMap<String, String>) -> Result<()> {
    for (k, v) in meta {
        writeln!(out, "# {k}={v}")?;
    }
    Ok(())
}

pub fn write_run_csv<W: Write>(mut out: W, meta: &BTreeMap<String, String>, rows: &[RunRow]) -> Result<()> {
    write_meta(&mut out, meta)?;
    let mut w = csv::Writer::from_writer(out);
    w.write_record(RUN_HEADER)?;
    for r in rows {
        let mut rec = vec![r.episode.to_string(), r.step.to_string()];
        rec.extend(r.state.iter().map(|v| num(*v)));
        rec.push(num(r.envelope));
        match &r.actions {
            Some(a) => rec.extend([
                a.mode.to_string(),
                num(a.a_drl),
                num(a.a_phy),
                num(a.applied),
                num(a.reward),
                format_events(&a.events),
            ]),
            None => rec.extend(["end".to_string(), String::new(), String::new(), String::new(), String::new(), String::new()]),
        }
        w.write_record(&rec)?;
    }
    w.flush()?;
    Ok(())
}

fn field<T: std::str::FromStr>(rec: &csv::StringRecord, i: usize) -> Result<T>
where
    T::Err: std::fmt::Display,
{
    let raw = rec.get(i).ok_or_else(|| Error::Format(format!("missing column {}", RUN_HEADER[i])))?;
    raw.parse().map_err(|e| Error::Format(format!("column {}: {raw:?}: {e}", RUN_HEADER[i])))
}

pub fn read_run_csv<R: Read>(mut input: R) -> Result<(BTreeMap<String, String>, Vec<RunRow>)> {
    let mut text = String::new();
    input.read_to_string(&mut text)?;
    let (meta, body) = split_metadata(&text)?;
    let mut rdr = csv::ReaderBuilder::new().from_reader(body.as_bytes());
    if rdr.headers()?.iter().ne(RUN_HEADER.iter().copied()) {
        return Err(Error::Format("unexpected run-trace header".into()));
    }
    let mut rows = Vec::new();
    for rec in rdr.records() {
        let rec = rec?;
        let state = [field(&rec, 2)?, field(&rec, 3)?, field(&rec, 4)?, field(&rec, 5)?];
        let actions = match rec.get(7) {
            Some("end") => None,
            Some(mode) => Some(StepActions {
                mode: mode.parse()?,
                a_drl: field(&rec, 8)?,
                a_phy: field(&rec, 9)?,
                applied: field(&rec, 10)?,
                reward: field(&rec, 11)?,
                events: parse_events(rec.get(12).unwrap_or(""))?,
            }),
            None => return Err(Error::Format("missing mode column".into())),
        };
        rows.push(RunRow { episode: field(&rec, 0)?, step: field(&rec, 1)?, state, envelope: field(&rec, 6)?, actions });
    }
    Ok((meta.into_iter().collect(), rows))
}

pub fn write_summary_csv<W: Write>(mut out: W, meta: &BTreeMap<String, String>, eps: &[EpisodeSummary]) -> Result<()> {
    write_meta(&mut out, meta)?;
    let mut w = csv::Writer::from_writer(out);
    w.write_record(SUMMARY_HEADER)?;
    for e in eps {
        w.write_record([
            e.episode.to_string(),
            e.steps.to_string(),
            num(e.total_return),
            e.violations.to_string(),
            e.box_exits.to_string(),
            e.teacher_activations.to_string(),
            e.teacher_steps.to_string(),
            e.termination.as_str().to_string(),
        ])?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_summary_csv<R: Read>(mut input: R) -> Result<Vec<EpisodeSummary>> {
    let mut text = String::new();
    input.read_to_string(&mut text)?;
    let (_, body) = split_metadata(&text)?;
    let mut rdr = csv::ReaderBuilder::new().from_reader(body.as_bytes());
    if rdr.headers()?.iter().ne(SUMMARY_HEADER.iter().copied()) {
        return Err(Error::Format("unexpected summary header".into()));
    }
    let p = |rec: &csv::StringRecord, i: usize| -> Result<String> {
        rec.get(i).map(str::to_string).ok_or_else(|| Error::Format(format!("missing column {}", SUMMARY_HEADER[i])))
    };
    let int = |s: String| s.parse::<usize>().map_err(|e| Error::Format(format!("{s:?}: {e}")));
    let mut out = Vec::new();
    for rec in rdr.records() {
        let rec = rec?;
        out.push(EpisodeSummary {
            episode: int(p(&rec, 0)?)?,
            steps: int(p(&rec, 1)?)?,
            total_return: p(&rec, 2)?.parse().map_err(|e| Error::Format(format!("return: {e}")))?,
            violations: int(p(&rec, 3)?)?,
            box_exits: int(p(&rec, 4)?)?,
            teacher_activations: int(p(&rec, 5)?)?,
            teacher_steps: int(p(&rec, 6)?)?,
            termination: Termination::parse(&p(&rec, 7)?)?,
        });
    }
    Ok(out)
}
