//! Task-performance metrics from multi-attribute task event logs.
//!
//! Canonical log schema, one event per row:
//!
//! ```text
//! t,subtask,kind,payload
//! 12.5,tracking,sample,in_target=1
//! 30.0,sysmon,signal,
//! 32.1,sysmon,response,correct=1
//! ```
//!
//! `payload` is a `;`-separated list of `key=value` pairs. Flags are `0`/`1`.

use std::collections::BTreeMap;
use std::fmt;
use std::io::{Read, Write};
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::features::WindowSpec;

/// Responses later than this after a system-monitoring signal are misses.
pub const SYSMON_DEADLINE_S: f64 = 10.0;
/// Responses later than this after a radio prompt are not counted.
pub const COMMS_DEADLINE_S: f64 = 15.0;

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Subtask {
    Tracking,
    Resman,
    Sysmon,
    Comms,
}

impl Subtask {
    pub const ALL: [Subtask; 4] = [
        Subtask::Tracking,
        Subtask::Sysmon,
        Subtask::Comms,
        Subtask::Resman,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Subtask::Tracking => "tracking",
            Subtask::Resman => "resman",
            Subtask::Sysmon => "sysmon",
            Subtask::Comms => "comms",
        }
    }

    fn accepts(self, kind: EventKind) -> bool {
        use EventKind::*;
        matches!(
            (self, kind),
            (Subtask::Tracking, Sample)
                | (Subtask::Resman, Sample)
                | (Subtask::Sysmon, Signal | Response)
                | (Subtask::Comms, Prompt | Response)
        )
    }
}

impl fmt::Display for Subtask {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Subtask {
    type Err = ();

    fn from_str(s: &str) -> std::result::Result<Self, ()> {
        match s {
            "tracking" => Ok(Subtask::Tracking),
            "resman" => Ok(Subtask::Resman),
            "sysmon" => Ok(Subtask::Sysmon),
            "comms" => Ok(Subtask::Comms),
            _ => Err(()),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum EventKind {
    Sample,
    Signal,
    Response,
    Prompt,
}

impl EventKind {
    pub fn name(self) -> &'static str {
        match self {
            EventKind::Sample => "sample",
            EventKind::Signal => "signal",
            EventKind::Response => "response",
            EventKind::Prompt => "prompt",
        }
    }
}

impl FromStr for EventKind {
    type Err = ();

    fn from_str(s: &str) -> std::result::Result<Self, ()> {
        match s {
            "sample" => Ok(EventKind::Sample),
            "signal" => Ok(EventKind::Signal),
            "response" => Ok(EventKind::Response),
            "prompt" => Ok(EventKind::Prompt),
            _ => Err(()),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Event {
    pub t: f64,
    pub subtask: Subtask,
    pub kind: EventKind,
    pub payload: BTreeMap<String, String>,
}

impl Event {
    pub fn new(t: f64, subtask: Subtask, kind: EventKind, payload: &[(&str, &str)]) -> Self {
        Self {
            t,
            subtask,
            kind,
            payload: payload
                .iter()
                .map(|(k, v)| (k.to_string(), v.to_string()))
                .collect(),
        }
    }

    /// A `0`/`1` payload flag.
    pub fn flag(&self, key: &str) -> Option<bool> {
        match self.payload.get(key).map(String::as_str) {
            Some("1" | "true") => Some(true),
            Some("0" | "false") => Some(false),
            _ => None,
        }
    }

    fn payload_text(&self) -> String {
        self.payload
            .iter()
            .map(|(k, v)| format!("{k}={v}"))
            .collect::<Vec<_>>()
            .join(";")
    }
}

fn parse_payload(text: &str, row: usize) -> Result<BTreeMap<String, String>> {
    text.split(';')
        .map(str::trim)
        .filter(|p| !p.is_empty())
        .map(|p| {
            p.split_once('=')
                .map(|(k, v)| (k.trim().to_string(), v.trim().to_string()))
                .ok_or_else(|| Error::MalformedRow {
                    row,
                    msg: format!("payload entry '{p}' is not key=value"),
                })
        })
        .collect()
}

/// Parse a canonical event log; events are returned sorted by time.
pub fn parse_event_log(reader: impl Read) -> Result<Vec<Event>> {
    let mut r = csv::ReaderBuilder::new().flexible(true).from_reader(reader);
    let header = r.headers()?.clone();
    if header.iter().take(3).ne(["t", "subtask", "kind"]) {
        return Err(Error::MalformedRow {
            row: 0,
            msg: "header must be t,subtask,kind,payload".into(),
        });
    }
    let mut events = Vec::new();
    for (k, rec) in r.records().enumerate() {
        let rec = rec?;
        let row = k + 1;
        let bad = |msg: String| Error::MalformedRow { row, msg };
        if rec.len() < 3 {
            return Err(bad(format!(
                "expected at least 3 fields, found {}",
                rec.len()
            )));
        }
        let t: f64 = rec[0]
            .trim()
            .parse()
            .map_err(|_| bad(format!("bad time '{}'", &rec[0])))?;
        if !(t >= 0.0 && t.is_finite()) {
            return Err(bad(format!("time {t} must be finite and non-negative")));
        }
        let subtask: Subtask = rec[1].trim().parse().map_err(|_| Error::UnknownSubtask {
            row,
            name: rec[1].to_string(),
        })?;
        let kind: EventKind = rec[2]
            .trim()
            .parse()
            .map_err(|_| bad(format!("unknown kind '{}'", &rec[2])))?;
        if !subtask.accepts(kind) {
            return Err(bad(format!(
                "kind '{}' is not valid for {subtask}",
                kind.name()
            )));
        }
        let payload = parse_payload(rec.get(3).unwrap_or(""), row)?;
        events.push(Event {
            t,
            subtask,
            kind,
            payload,
        });
    }
    events.sort_by(|a, b| a.t.total_cmp(&b.t));
    Ok(events)
}

pub fn read_event_log(path: &Path) -> Result<Vec<Event>> {
    parse_event_log(std::fs::File::open(path)?)
}

pub fn write_event_log(writer: impl Write, events: &[Event]) -> Result<()> {
    let mut w = csv::Writer::from_writer(writer);
    w.write_record(["t", "subtask", "kind", "payload"])?;
    for e in events {
        w.write_record([
            e.t.to_string(),
            e.subtask.to_string(),
            e.kind.name().to_string(),
            e.payload_text(),
        ])?;
    }
    w.flush()?;
    Ok(())
}

/// Half-open analysis interval `[start, end)` in seconds.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct TimeWindow {
    pub start: f64,
    pub end: f64,
}

impl TimeWindow {
    pub fn contains(&self, t: f64) -> bool {
        t >= self.start && t < self.end
    }

    pub fn all() -> Self {
        Self {
            start: 0.0,
            end: f64::INFINITY,
        }
    }
}

fn sample_fraction(
    events: &[Event],
    w: TimeWindow,
    subtask: Subtask,
    ok: impl Fn(&Event) -> bool,
) -> Option<f64> {
    let (mut hit, mut total) = (0usize, 0usize);
    for e in events
        .iter()
        .filter(|e| e.subtask == subtask && e.kind == EventKind::Sample && w.contains(e.t))
    {
        total += 1;
        hit += usize::from(ok(e));
    }
    (total > 0).then(|| hit as f64 / total as f64)
}

/// Fraction of tracking samples with the cursor inside the target.
pub fn tracking_accuracy(events: &[Event], w: TimeWindow) -> Option<f64> {
    sample_fraction(events, w, Subtask::Tracking, |e| {
        e.flag("in_target") == Some(true)
    })
}

/// Fraction of resource-management samples with both dials in tolerance.
pub fn resman_accuracy(events: &[Event], w: TimeWindow) -> Option<f64> {
    sample_fraction(events, w, Subtask::Resman, |e| {
        e.flag("a_in") == Some(true) && e.flag("b_in") == Some(true)
    })
}

/// One onset (signal or prompt) and the response it consumed, if any.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Trial {
    pub onset: f64,
    /// Radio prompts addressed to the participant; always true for signals.
    pub own: bool,
    pub response: Option<f64>,
}

impl Trial {
    pub fn latency(&self) -> Option<f64> {
        self.response.map(|r| r - self.onset)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Matching {
    pub trials: Vec<Trial>,
    /// Times of responses that matched no onset.
    pub unmatched: Vec<f64>,
}

/// Pair each onset, in time order, with the first unconsumed valid response
/// in `[onset, onset + deadline]`.
pub fn match_responses(events: &[Event], subtask: Subtask) -> Matching {
    let (onset_kind, deadline) = match subtask {
        Subtask::Comms => (EventKind::Prompt, COMMS_DEADLINE_S),
        _ => (EventKind::Signal, SYSMON_DEADLINE_S),
    };
    let mut onsets: Vec<&Event> = events
        .iter()
        .filter(|e| e.subtask == subtask && e.kind == onset_kind)
        .collect();
    onsets.sort_by(|a, b| a.t.total_cmp(&b.t));
    let mut responses: Vec<&Event> = events
        .iter()
        .filter(|e| e.subtask == subtask && e.kind == EventKind::Response)
        .collect();
    responses.sort_by(|a, b| a.t.total_cmp(&b.t));
    let mut used = vec![false; responses.len()];
    let trials = onsets
        .iter()
        .map(|o| {
            let own = subtask != Subtask::Comms || o.flag("own").unwrap_or(true);
            let hit = responses.iter().enumerate().find(|(k, r)| {
                !used[*k] && r.t >= o.t && r.t <= o.t + deadline && r.flag("correct") != Some(false)
            });
            let response = hit.map(|(k, r)| {
                used[k] = true;
                r.t
            });
            Trial {
                onset: o.t,
                own,
                response,
            }
        })
        .collect();
    let unmatched = responses
        .iter()
        .zip(&used)
        .filter(|(_, &u)| !u)
        .map(|(r, _)| r.t)
        .collect();
    Matching { trials, unmatched }
}

/// Signal-detection counts for system monitoring within a window.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct SysmonCounts {
    pub signals: usize,
    pub hits: usize,
    pub false_alarms: usize,
}

pub fn sysmon_counts(m: &Matching, w: TimeWindow) -> SysmonCounts {
    let in_w: Vec<&Trial> = m.trials.iter().filter(|t| w.contains(t.onset)).collect();
    SysmonCounts {
        signals: in_w.len(),
        hits: in_w.iter().filter(|t| t.response.is_some()).count(),
        false_alarms: m.unmatched.iter().filter(|&&t| w.contains(t)).count(),
    }
}

impl SysmonCounts {
    /// `(hits - false alarms) / signals`, clamped to [-1, 1].
    pub fn score(&self) -> Option<f64> {
        (self.signals > 0).then(|| {
            ((self.hits as f64 - self.false_alarms as f64) / self.signals as f64).clamp(-1.0, 1.0)
        })
    }
}

pub fn sysmon_accuracy(events: &[Event], w: TimeWindow) -> Option<f64> {
    sysmon_counts(&match_responses(events, Subtask::Sysmon), w).score()
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct CommsCounts {
    pub own: usize,
    pub own_answered: usize,
    pub other: usize,
    pub other_answered: usize,
}

pub fn comms_counts(m: &Matching, w: TimeWindow) -> CommsCounts {
    let mut c = CommsCounts::default();
    for t in m.trials.iter().filter(|t| w.contains(t.onset)) {
        let answered = usize::from(t.response.is_some());
        if t.own {
            c.own += 1;
            c.own_answered += answered;
        } else {
            c.other += 1;
            c.other_answered += answered;
        }
    }
    c
}

impl CommsCounts {
    /// Own prompts answered in time over own prompts, minus responses to
    /// other prompts over other prompts.
    pub fn score(&self) -> Option<f64> {
        if self.own == 0 {
            return None;
        }
        let fa = if self.other > 0 {
            self.other_answered as f64 / self.other as f64
        } else {
            0.0
        };
        Some(self.own_answered as f64 / self.own as f64 - fa)
    }
}

pub fn comms_accuracy(events: &[Event], w: TimeWindow) -> Option<f64> {
    comms_counts(&match_responses(events, Subtask::Comms), w).score()
}

fn mean_latency(m: &Matching, w: TimeWindow) -> Option<f64> {
    let lat: Vec<f64> = m
        .trials
        .iter()
        .filter(|t| t.own && w.contains(t.onset))
        .filter_map(Trial::latency)
        .collect();
    (!lat.is_empty()).then(|| lat.iter().sum::<f64>() / lat.len() as f64)
}

/// Mean onset-to-response latency of matched system-monitoring signals and
/// own radio prompts.
pub fn reaction_times(events: &[Event], w: TimeWindow) -> (Option<f64>, Option<f64>) {
    (
        mean_latency(&match_responses(events, Subtask::Sysmon), w),
        mean_latency(&match_responses(events, Subtask::Comms), w),
    )
}

#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct PerfWindow {
    pub window_index: usize,
    pub tracking_acc: Option<f64>,
    pub resman_acc: Option<f64>,
    pub sysmon_acc: Option<f64>,
    pub comms_acc: Option<f64>,
    pub sysmon_rt: Option<f64>,
    pub comms_rt: Option<f64>,
}

pub const PERF_COLUMNS: [&str; 6] = [
    "perf__tracking__acc",
    "perf__resman__acc",
    "perf__sysmon__acc",
    "perf__comms__acc",
    "perf__sysmon__rt",
    "perf__comms__rt",
];

impl PerfWindow {
    /// Values in [`PERF_COLUMNS`] order.
    pub fn values(&self) -> [Option<f64>; 6] {
        [
            self.tracking_acc,
            self.resman_acc,
            self.sysmon_acc,
            self.comms_acc,
            self.sysmon_rt,
            self.comms_rt,
        ]
    }
}

/// Windowed performance for `n_windows` windows starting at 0 with the
/// spec's length and hop.
pub fn windowed_perf(
    events: &[Event],
    spec: &WindowSpec,
    n_windows: usize,
) -> Result<Vec<PerfWindow>> {
    spec.validate()?;
    let sysmon = match_responses(events, Subtask::Sysmon);
    let comms = match_responses(events, Subtask::Comms);
    Ok((0..n_windows)
        .map(|k| {
            let start = k as f64 * spec.hop_s();
            let w = TimeWindow {
                start,
                end: start + spec.length_s,
            };
            PerfWindow {
                window_index: k,
                tracking_acc: tracking_accuracy(events, w),
                resman_acc: resman_accuracy(events, w),
                sysmon_acc: sysmon_counts(&sysmon, w).score(),
                comms_acc: comms_counts(&comms, w).score(),
                sysmon_rt: mean_latency(&sysmon, w),
                comms_rt: mean_latency(&comms, w),
            }
        })
        .collect())
}

/// Number of full windows covering a log of `duration_s` seconds.
pub fn window_count(duration_s: f64, spec: &WindowSpec) -> usize {
    if duration_s < spec.length_s {
        return 0;
    }
    ((duration_s - spec.length_s) / spec.hop_s()).floor() as usize + 1
}
