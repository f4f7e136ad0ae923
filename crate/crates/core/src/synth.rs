//! Seeded synthetic signals, datasets, faces and event logs, plus a
//! brute-force recurrence oracle that shares no code with [`crate::dynamics`].

use std::f64::consts::PI;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::dynamics::{ComplexityBase, RqaConfig, RqaMetrics, Trajectory};
use crate::error::{Error, Result};
use crate::features::{derivatives, summarize, Deriv, STAT_NAMES};
use crate::ingest::{write_keypoint_jsonl, FrameKeypoints, Keypoint, LandmarkMap, FACE_POINTS};
use crate::ml::{Condition, FeatureMatrix, RowMeta, Session};
use crate::scalar::Real;
use crate::taskperf::{write_event_log, Event, EventKind, Subtask};

/// Largest trajectory the oracle will enumerate.
pub const ORACLE_MAX_POINTS: usize = 2000;

fn rng_for(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

fn normal(sd: f64) -> Normal<f64> {
    Normal::new(0.0, sd).expect("finite non-negative sd")
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum RegimeKind {
    Sine {
        amplitude: f64,
        freq_hz: f64,
        phase: f64,
    },
    SumOfSines {
        /// (amplitude, frequency Hz, phase) per component.
        components: Vec<(f64, f64, f64)>,
    },
    Ar1 {
        coef: f64,
        noise_sd: f64,
    },
    WhiteNoise {
        sd: f64,
    },
    /// Segments of `(samples, regime)` played in order and repeated.
    Switching {
        schedule: Vec<(usize, RegimeKind)>,
    },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RegimeSpec {
    #[serde(flatten)]
    pub kind: RegimeKind,
    /// Additive Gaussian noise on top of the regime.
    #[serde(default)]
    pub noise_sd: f64,
    #[serde(default)]
    pub seed: u64,
}

impl RegimeSpec {
    pub fn new(kind: RegimeKind, seed: u64) -> Self {
        Self {
            kind,
            noise_sd: 0.0,
            seed,
        }
    }
}

fn validate_kind(kind: &RegimeKind, fps: f64) -> Result<()> {
    let bad = |m: String| Err(Error::InvalidParams(m));
    let nyquist = fps / 2.0;
    match kind {
        RegimeKind::Sine { freq_hz, .. } if !(freq_hz.abs() < nyquist) => {
            bad(format!("frequency {freq_hz} Hz at or above Nyquist"))
        }
        RegimeKind::SumOfSines { components } => {
            if let Some((_, f, _)) = components.iter().find(|(_, f, _)| !(f.abs() < nyquist)) {
                return bad(format!("frequency {f} Hz at or above Nyquist"));
            }
            Ok(())
        }
        RegimeKind::Ar1 { coef, noise_sd } if !(coef.abs() < 1.0 && *noise_sd >= 0.0) => bad(
            format!("AR(1) needs |coef| < 1 and sd >= 0, got {coef}, {noise_sd}"),
        ),
        RegimeKind::WhiteNoise { sd } if !(*sd >= 0.0) => bad(format!("noise sd {sd}")),
        RegimeKind::Switching { schedule } => {
            if schedule.is_empty() || schedule.iter().any(|(n, _)| *n == 0) {
                return bad("switching schedule needs non-empty segments".into());
            }
            schedule.iter().try_for_each(|(_, k)| validate_kind(k, fps))
        }
        _ => Ok(()),
    }
}

fn sample_kind(
    kind: &RegimeKind,
    t: usize,
    fps: f64,
    state: &mut f64,
    rng: &mut ChaCha8Rng,
) -> f64 {
    let time = t as f64 / fps;
    match kind {
        RegimeKind::Sine {
            amplitude,
            freq_hz,
            phase,
        } => amplitude * (2.0 * PI * freq_hz * time + phase).sin(),
        RegimeKind::SumOfSines { components } => components
            .iter()
            .map(|(a, f, p)| a * (2.0 * PI * f * time + p).sin())
            .sum(),
        RegimeKind::Ar1 { coef, noise_sd } => {
            *state = coef * *state + normal(*noise_sd).sample(rng);
            *state
        }
        RegimeKind::WhiteNoise { sd } => normal(*sd).sample(rng),
        RegimeKind::Switching { schedule } => {
            let cycle: usize = schedule.iter().map(|(n, _)| n).sum();
            let mut pos = t % cycle;
            for (n, k) in schedule {
                if pos < *n {
                    return sample_kind(k, t, fps, state, rng);
                }
                pos -= n;
            }
            unreachable!("position lies inside the cycle")
        }
    }
}

/// `n` samples of the regime at `fps`, deterministic in the seed.
pub fn gen_signal<T: Real>(spec: &RegimeSpec, n: usize, fps: f64) -> Result<Vec<T>> {
    if n == 0 || !(fps > 0.0) || !(spec.noise_sd >= 0.0) {
        return Err(Error::InvalidParams(
            "n >= 1, fps > 0 and noise_sd >= 0 required".into(),
        ));
    }
    validate_kind(&spec.kind, fps)?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let noise = normal(spec.noise_sd);
    let mut state = 0.0;
    Ok((0..n)
        .map(|t| {
            let v = sample_kind(&spec.kind, t, fps, &mut state, &mut rng);
            let v = if spec.noise_sd > 0.0 {
                v + noise.sample(&mut rng)
            } else {
                v
            };
            T::lit(v)
        })
        .collect())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DatasetSpec {
    pub participants: usize,
    pub windows_per_condition: usize,
    pub baseline_windows_per_condition: usize,
    /// 0 gives a shared label-to-dynamics mapping; 1 a participant-specific one.
    pub idiosyncrasy: f64,
    /// Scale of the latent level spacing; smaller values overlap the classes.
    pub separation: f64,
    pub samples_per_window: usize,
    pub fps: f64,
    pub seed: u64,
}

impl Default for DatasetSpec {
    fn default() -> Self {
        Self {
            participants: 12,
            windows_per_condition: 16,
            baseline_windows_per_condition: 3,
            idiosyncrasy: 0.0,
            separation: 1.0,
            samples_per_window: 240,
            fps: 60.0,
            seed: 1,
        }
    }
}

pub const SYNTH_CHANNELS: usize = 4;

/// Column names `syn<k>__<deriv>__<stat>` of the synthetic dataset.
pub fn synth_columns() -> Vec<String> {
    let mut cols = Vec::new();
    for k in 0..SYNTH_CHANNELS {
        for d in Deriv::ALL {
            for s in STAT_NAMES {
                cols.push(format!("syn{k}__{}__{s}", d.name()));
            }
        }
    }
    cols
}

#[derive(Clone, Debug, PartialEq)]
pub struct SynthDataset {
    pub matrix: FeatureMatrix,
    /// Latent load level (0..=2 times the separation) that generated each row.
    pub levels: Vec<f64>,
}

struct Participant {
    perm: [usize; 3],
    gain: [f64; SYNTH_CHANNELS],
    offset: [f64; SYNTH_CHANNELS],
}

fn participant(spec: &DatasetSpec, p: usize) -> Participant {
    let mut rng = rng_for(spec.seed, p as u64);
    let mut perm = [0, 1, 2];
    perm.shuffle(&mut rng);
    let s = spec.idiosyncrasy;
    let z = normal(1.0);
    Participant {
        perm,
        gain: std::array::from_fn(|_| (0.3 * s * z.sample(&mut rng)).exp()),
        offset: std::array::from_fn(|_| 3.0 * s * z.sample(&mut rng)),
    }
}

/// Raw channels of one window at latent level `level`.
fn window_channels(
    level: f64,
    n: usize,
    fps: f64,
    rng: &mut ChaCha8Rng,
) -> [Vec<f64>; SYNTH_CHANNELS] {
    let phase = rng.random::<f64>() * 2.0 * PI;
    let freq = 0.5 + 0.75 * level;
    let noise = normal(0.3);
    let ch0 = (0..n)
        .map(|t| (2.0 * PI * freq * t as f64 / fps + phase).sin() + noise.sample(rng))
        .collect();
    let coef = 0.2 + 0.3 * level;
    let innov = normal(1.0);
    let mut x = 0.0;
    let ch1 = (0..n)
        .map(|_| {
            x = coef * x + innov.sample(rng);
            x
        })
        .collect();
    let amp = 0.5 + 0.5 * level;
    let ch2 = (0..n)
        .map(|t| amp * (2.0 * PI * 0.25 * t as f64 / fps).sin() + noise.sample(rng))
        .collect();
    let ch3 = (0..n).map(|_| innov.sample(rng)).collect();
    [ch0, ch1, ch2, ch3]
}

/// Labelled feature rows for `participants` people. Latent level for
/// condition `c` is `(1 - s) c + s perm_p(c)` with a per-participant
/// permutation; gains and offsets also scale with `s`.
pub fn gen_participant_dataset(spec: &DatasetSpec) -> Result<SynthDataset> {
    if spec.participants == 0 || spec.windows_per_condition == 0 || spec.samples_per_window < 3 {
        return Err(Error::InvalidParams(
            "participants, windows and samples must be positive".into(),
        ));
    }
    if !(0.0..=1.0).contains(&spec.idiosyncrasy) || !(spec.separation > 0.0) {
        return Err(Error::InvalidParams(
            "idiosyncrasy must lie in [0, 1] and separation be positive".into(),
        ));
    }
    let mut matrix = FeatureMatrix::new(synth_columns());
    let mut levels = Vec::new();
    for p in 0..spec.participants {
        let who = participant(spec, p);
        let id = format!("P{:02}", p + 1);
        for (session, count) in [
            (Session::Baseline, spec.baseline_windows_per_condition),
            (Session::Experimental, spec.windows_per_condition),
        ] {
            for c in Condition::ALL {
                let level = spec.separation
                    * ((1.0 - spec.idiosyncrasy) * c.index() as f64
                        + spec.idiosyncrasy * who.perm[c.index()] as f64);
                for w in 0..count {
                    let stream = (((p * 2 + session as usize) * 3 + c.index()) * 10_000 + w) as u64;
                    let mut rng = rng_for(spec.seed ^ 0x5eed, stream);
                    let chans = window_channels(level, spec.samples_per_window, spec.fps, &mut rng);
                    let mut row = Vec::with_capacity(SYNTH_CHANNELS * 27);
                    for (k, ch) in chans.iter().enumerate() {
                        let y: Vec<Option<f64>> = ch
                            .iter()
                            .map(|v| Some(who.gain[k] * v + who.offset[k]))
                            .collect();
                        let kin = derivatives(&y, spec.fps);
                        for d in Deriv::ALL {
                            let vals: Vec<f64> = kin
                                .get(d)
                                .iter()
                                .map(|v| v.expect("complete window"))
                                .collect();
                            row.extend(summarize(&vals)?.to_array());
                        }
                    }
                    matrix.push_row(
                        RowMeta {
                            participant: id.clone(),
                            session,
                            condition: c,
                            window_index: w,
                        },
                        &row,
                    )?;
                    levels.push(level);
                }
            }
        }
    }
    Ok(SynthDataset { matrix, levels })
}

/// Shuffle the condition labels of a matrix.
pub fn permute_labels(m: &FeatureMatrix, seed: u64) -> Result<FeatureMatrix> {
    let mut labels = m.labels();
    labels.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    m.with_labels(&labels)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct FaceSpec {
    pub frames: usize,
    pub fps: f64,
    /// Face width in pixels.
    pub face_px: f64,
    /// Load level 0..=2; raises blink rate and gaze frequency.
    pub level: f64,
    /// Probability per frame that a short low-confidence burst starts.
    pub dropout_rate: f64,
    pub seed: u64,
}

impl Default for FaceSpec {
    fn default() -> Self {
        Self {
            frames: 3600,
            fps: 60.0,
            face_px: 300.0,
            level: 1.0,
            dropout_rate: 0.002,
            seed: 1,
        }
    }
}

/// Neutral face in face units (origin between the eyes, y down).
pub fn neutral_face(map: &LandmarkMap) -> Vec<[f64; 2]> {
    let mut pts: Vec<[f64; 2]> = (0..FACE_POINTS)
        .map(|i| {
            let a = PI * (0.1 + 0.8 * i as f64 / FACE_POINTS as f64);
            [0.55 * a.cos(), 0.2 + 0.6 * a.sin()]
        })
        .collect();
    let eye = |pts: &mut Vec<[f64; 2]>, ids: &[usize], cx: f64| {
        let shape = [
            [-0.12, 0.0],
            [-0.04, -0.04],
            [0.04, -0.04],
            [0.12, 0.0],
            [0.04, 0.04],
            [-0.04, 0.04],
        ];
        for (k, &id) in ids.iter().enumerate().take(6) {
            pts[id] = [cx + shape[k][0], -0.1 + shape[k][1]];
        }
    };
    eye(&mut pts, &map.left_eye_contour, -0.3);
    eye(&mut pts, &map.right_eye_contour, 0.3);
    pts[map.template[0]] = [0.0, 0.12];
    pts[map.template[1]] = [-0.06, 0.18];
    pts[map.upper_lip] = [0.0, 0.36];
    pts[map.lower_lip] = [0.0, 0.40];
    pts[map.left_pupil] = [-0.3, -0.1];
    pts[map.right_pupil] = [0.3, -0.1];
    pts
}

/// Frames of a moving synthetic face in screen pixels: rigid head motion,
/// blinks, gaze shifts and mouth movement, with occasional dropouts.
pub fn gen_face_frames(spec: &FaceSpec) -> Result<Vec<FrameKeypoints>> {
    if spec.frames == 0 || !(spec.fps > 0.0) || !(0.0..=1.0).contains(&spec.dropout_rate) {
        return Err(Error::InvalidParams(
            "frames >= 1, fps > 0, dropout_rate in [0, 1]".into(),
        ));
    }
    let map = LandmarkMap::default();
    let base = neutral_face(&map);
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let jitter = normal(0.4);
    let phases: [f64; 6] = std::array::from_fn(|_| rng.random::<f64>() * 2.0 * PI);
    let blink_every = spec.fps * (4.0 - spec.level).max(0.5);
    let mut next_blink = rng.random::<f64>() * blink_every;
    let mut dropout_left = 0usize;
    let mut frames = Vec::with_capacity(spec.frames);
    for t in 0..spec.frames {
        let time = t as f64 / spec.fps;
        let w = |f: f64, k: usize| (2.0 * PI * f * time + phases[k]).sin();
        let openness = {
            let since = t as f64 - next_blink;
            if since >= 0.0 && since < 0.2 * spec.fps {
                0.15
            } else {
                if since >= 0.2 * spec.fps {
                    next_blink += blink_every * (0.5 + rng.random::<f64>());
                }
                1.0
            }
        };
        let gaze = [0.03 * w(0.2 + 0.2 * spec.level, 0), 0.015 * w(0.15, 1)];
        let mouth = 0.04 + 0.02 * w(0.3, 2).max(0.0);
        let (tx, ty) = (25.0 * w(0.05, 3), 15.0 * w(0.07, 4));
        let theta = 0.06 * w(0.04, 5);
        let (sx, sy) = (1.0 + 0.03 * w(0.03, 0), 1.0 + 0.02 * w(0.025, 1));
        if dropout_left == 0 && rng.random::<f64>() < spec.dropout_rate {
            dropout_left = rng.random_range(3..20);
        }
        let conf = if dropout_left > 0 {
            dropout_left -= 1;
            0.1
        } else {
            0.9
        };
        let (s, c) = theta.sin_cos();
        let points = (0..FACE_POINTS)
            .map(|i| {
                let mut p = base[i];
                for (&id, sign) in map
                    .left_upper_lid
                    .iter()
                    .chain(&map.right_upper_lid)
                    .map(|id| (id, 1.0))
                    .chain(
                        map.left_lower_lid
                            .iter()
                            .chain(&map.right_lower_lid)
                            .map(|id| (id, -1.0)),
                    )
                {
                    if id == i {
                        p[1] = -0.1 - sign * 0.04 * openness;
                    }
                }
                if i == map.left_pupil || i == map.right_pupil {
                    p = [p[0] + gaze[0], p[1] + gaze[1]];
                }
                if i == map.upper_lip {
                    p[1] = 0.38 - mouth / 2.0;
                } else if i == map.lower_lip {
                    p[1] = 0.38 + mouth / 2.0;
                }
                let (u, v) = (sx * spec.face_px * p[0], sy * spec.face_px * p[1]);
                let x = 1280.0 + tx + c * u - s * v + jitter.sample(&mut rng);
                let y = 720.0 + ty + s * u + c * v + jitter.sample(&mut rng);
                Keypoint::new(x, y, conf)
            })
            .collect();
        frames.push(FrameKeypoints::new(t, points)?);
    }
    Ok(frames)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EventSpec {
    pub duration_s: f64,
    /// Load level 0..=2; raises event rates and lowers accuracy.
    pub level: f64,
    pub seed: u64,
}

impl Default for EventSpec {
    fn default() -> Self {
        Self {
            duration_s: 60.0,
            level: 1.0,
            seed: 1,
        }
    }
}

/// A canonical event log over `duration_s` seconds.
pub fn gen_event_log(spec: &EventSpec) -> Result<Vec<Event>> {
    if !(spec.duration_s > 0.0) {
        return Err(Error::InvalidParams("duration must be positive".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let flag = |b: bool| if b { "1" } else { "0" };
    let quality = (0.9 - 0.15 * spec.level).clamp(0.05, 0.99);
    let mut events = Vec::new();
    let steps = (spec.duration_s * 10.0).floor() as usize;
    for k in 0..steps {
        let t = k as f64 / 10.0;
        events.push(Event::new(
            t,
            Subtask::Tracking,
            EventKind::Sample,
            &[("in_target", flag(rng.random_bool(quality)))],
        ));
        if k % 10 == 0 {
            events.push(Event::new(
                t,
                Subtask::Resman,
                EventKind::Sample,
                &[
                    ("a_in", flag(rng.random_bool(quality))),
                    ("b_in", flag(rng.random_bool(quality))),
                ],
            ));
        }
    }
    let mut t = rng.random::<f64>() * 10.0;
    let gap = 20.0 - 5.0 * spec.level;
    while t < spec.duration_s {
        events.push(Event::new(t, Subtask::Sysmon, EventKind::Signal, &[]));
        if rng.random_bool(quality) {
            let rt = 1.0 + rng.random::<f64>() * 4.0 * (1.0 + spec.level / 2.0);
            events.push(Event::new(
                t + rt,
                Subtask::Sysmon,
                EventKind::Response,
                &[("correct", "1")],
            ));
        }
        if rng.random_bool(0.1 * (1.0 + spec.level)) {
            events.push(Event::new(
                t + gap / 2.0,
                Subtask::Sysmon,
                EventKind::Response,
                &[("correct", "1")],
            ));
        }
        let own = rng.random_bool(0.5);
        events.push(Event::new(
            t + 3.0,
            Subtask::Comms,
            EventKind::Prompt,
            &[("own", flag(own))],
        ));
        if rng.random_bool(if own { quality } else { 1.0 - quality }) {
            let rt = 2.0 + rng.random::<f64>() * 6.0;
            events.push(Event::new(
                t + 3.0 + rt,
                Subtask::Comms,
                EventKind::Response,
                &[],
            ));
        }
        t += gap * (0.75 + 0.5 * rng.random::<f64>());
    }
    events.retain(|e| e.t < spec.duration_s);
    events.sort_by(|a, b| a.t.total_cmp(&b.t));
    Ok(events)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct FixtureSpec {
    pub participants: usize,
    /// Frames per experimental recording.
    pub frames: usize,
    /// Frames per baseline recording; 0 skips the baseline session.
    pub baseline_frames: usize,
    pub fps: f64,
    pub seed: u64,
    pub events: bool,
}

impl Default for FixtureSpec {
    fn default() -> Self {
        Self {
            participants: 2,
            frames: 3600,
            baseline_frames: 0,
            fps: 60.0,
            seed: 1,
            events: true,
        }
    }
}

/// Paths written by [`write_fixture`].
#[derive(Clone, Debug, PartialEq)]
pub struct FixtureLayout {
    pub keypoints_dir: PathBuf,
    pub events_dir: Option<PathBuf>,
    pub labels: PathBuf,
    pub recordings: usize,
}

/// Write keypoint files, event logs and a ground-truth label table under
/// `dir` in the pipeline's `<participant>/<session>_<condition>` layout.
pub fn write_fixture(dir: &Path, spec: &FixtureSpec) -> Result<FixtureLayout> {
    if spec.participants == 0 || spec.frames == 0 {
        return Err(Error::InvalidParams(
            "participants and frames must be positive".into(),
        ));
    }
    let kp_dir = dir.join("keypoints");
    let ev_dir = spec.events.then(|| dir.join("events"));
    let mut labels = csv::Writer::from_writer(Vec::new());
    labels.write_record([
        "participant",
        "session",
        "condition",
        "level",
        "keypoints",
        "events",
    ])?;
    let mut recordings = 0;
    for p in 0..spec.participants {
        let participant = format!("P{:02}", p + 1);
        for session in [Session::Baseline, Session::Experimental] {
            let frames = match session {
                Session::Baseline => spec.baseline_frames,
                Session::Experimental => spec.frames,
            };
            if frames == 0 {
                continue;
            }
            for c in Condition::ALL {
                let seed = spec
                    .seed
                    .wrapping_mul(1_000_003)
                    .wrapping_add((p as u64) * 16 + (session as u64) * 4 + c.index() as u64);
                let stem = format!(
                    "{}_{}",
                    session.name().to_ascii_lowercase(),
                    c.name().to_ascii_lowercase()
                );
                let level = c.index() as f64;
                let face = gen_face_frames(&FaceSpec {
                    frames,
                    fps: spec.fps,
                    level,
                    seed,
                    ..Default::default()
                })?;
                let kp_path = kp_dir.join(&participant).join(format!("{stem}.jsonl"));
                std::fs::create_dir_all(kp_path.parent().expect("has parent"))?;
                write_keypoint_jsonl(
                    std::io::BufWriter::new(std::fs::File::create(&kp_path)?),
                    &face,
                )?;
                let mut ev_field = String::new();
                if let Some(ev) = &ev_dir {
                    let events = gen_event_log(&EventSpec {
                        duration_s: frames as f64 / spec.fps,
                        level,
                        seed,
                    })?;
                    let ev_path = ev.join(&participant).join(format!("{stem}.csv"));
                    std::fs::create_dir_all(ev_path.parent().expect("has parent"))?;
                    write_event_log(std::fs::File::create(&ev_path)?, &events)?;
                    ev_field = ev_path.display().to_string();
                }
                labels.write_record([
                    participant.clone(),
                    session.to_string(),
                    c.to_string(),
                    level.to_string(),
                    kp_path.display().to_string(),
                    ev_field,
                ])?;
                recordings += 1;
            }
        }
    }
    let labels_path = dir.join("labels.csv");
    std::fs::write(
        &labels_path,
        labels.into_inner().map_err(|e| Error::Io(e.into_error()))?,
    )?;
    Ok(FixtureLayout {
        keypoints_dir: kp_dir,
        events_dir: ev_dir,
        labels: labels_path,
        recordings,
    })
}

/// Recurrence measures by direct enumeration: every cell's distance is
/// computed, then every diagonal and column is walked cell by cell and each
/// maximal run recorded.
pub fn brute_force_rqa<T: Real>(
    a: &Trajectory<T>,
    b: Option<&Trajectory<T>>,
    cfg: &RqaConfig,
) -> Result<RqaMetrics> {
    let cross = b.is_some();
    let b = b.unwrap_or(a);
    let (rows, cols) = (a.len(), b.len());
    if rows > ORACLE_MAX_POINTS || cols > ORACLE_MAX_POINTS {
        return Err(Error::TooLarge(rows.max(cols)));
    }
    if rows == 0 || cols == 0 {
        return Err(Error::EmptyTrajectory);
    }
    let w = if !cross || cfg.cross_theiler {
        cfg.theiler
    } else {
        0
    };
    let skip = |i: usize, j: usize| (i as i64 - j as i64).unsigned_abs() < w as u64;
    let dist = |i: usize, j: usize| -> f64 {
        let mut acc = 0.0;
        for k in 0..a.dim() {
            let d = a.point(i)[k].as_f64() - b.point(j)[k].as_f64();
            acc += d * d;
        }
        acc.sqrt()
    };

    let mut row_totals = Vec::with_capacity(rows);
    let mut pairs = 0usize;
    for i in 0..rows {
        let mut s = 0.0;
        for j in 0..cols {
            if !skip(i, j) {
                s += dist(i, j);
                pairs += 1;
            }
        }
        row_totals.push(s);
    }
    let mut total = 0.0;
    for s in row_totals {
        total += s;
    }
    let eps = cfg.radius_frac * if pairs > 0 { total / pairs as f64 } else { 0.0 };
    let r: Vec<Vec<bool>> = (0..rows)
        .map(|i| {
            (0..cols)
                .map(|j| !skip(i, j) && dist(i, j) <= eps)
                .collect()
        })
        .collect();

    let recurrent: usize = r.iter().map(|row| row.iter().filter(|&&c| c).count()).sum();

    // Diagonal runs, one diagonal at a time.
    let mut diag_lines = Vec::new();
    let mut diag_density: Vec<(i64, usize, usize)> = Vec::new();
    for d in -(rows as i64 - 1)..=(cols as i64 - 1) {
        let mut i = if d < 0 { (-d) as usize } else { 0 };
        let mut j = if d < 0 { 0 } else { d as usize };
        let (mut run, mut hits, mut cells) = (0usize, 0usize, 0usize);
        while i < rows && j < cols {
            cells += 1;
            if r[i][j] {
                run += 1;
                hits += 1;
            } else if run > 0 {
                diag_lines.push(run);
                run = 0;
            }
            i += 1;
            j += 1;
        }
        if run > 0 {
            diag_lines.push(run);
        }
        diag_density.push((d, hits, cells));
    }
    let mut vert_lines = Vec::new();
    for j in 0..cols {
        let mut run = 0usize;
        for row in &r {
            if row[j] {
                run += 1;
            } else if run > 0 {
                vert_lines.push(run);
                run = 0;
            }
        }
        if run > 0 {
            vert_lines.push(run);
        }
    }

    let lmax = diag_lines.iter().copied().max().unwrap_or(0);
    let vmax = vert_lines.iter().copied().max().unwrap_or(0);
    let mut long: Vec<usize> = diag_lines
        .iter()
        .copied()
        .filter(|&l| l >= cfg.l_min)
        .collect();
    long.sort_unstable();
    let vlong: Vec<usize> = vert_lines
        .iter()
        .copied()
        .filter(|&l| l >= cfg.v_min)
        .collect();
    let ratio = |a: usize, b: usize| if b > 0 { a as f64 / b as f64 } else { 0.0 };
    let det = ratio(long.iter().sum(), recurrent);
    let lam = ratio(vlong.iter().sum(), recurrent);
    let l_mean = ratio(long.iter().sum(), long.len());
    let tt = ratio(vlong.iter().sum(), vlong.len());
    let l_sd = if long.is_empty() {
        0.0
    } else {
        (long
            .iter()
            .map(|&l| (l as f64 - l_mean).powi(2))
            .sum::<f64>()
            / long.len() as f64)
            .sqrt()
    };
    // Entropy over groups of equal length, in ascending length order.
    let mut entropy = 0.0;
    let mut distinct = 0usize;
    let mut k = 0;
    while k < long.len() {
        let mut e = k;
        while e < long.len() && long[e] == long[k] {
            e += 1;
        }
        let p = (e - k) as f64 / long.len() as f64;
        entropy -= p * p.log2();
        distinct += 1;
        k = e;
    }
    let complexity = if long.is_empty() {
        0.0
    } else {
        let n = match cfg.complexity {
            ComplexityBase::RealizableLengths => (lmax - cfg.l_min + 1) as f64,
            ComplexityBase::ObservedLengths => distinct as f64,
        };
        n.log2() - entropy
    };

    let last = rows.min(cols).saturating_sub(2 * cfg.l_min);
    let mut xs = Vec::new();
    let mut ys = Vec::new();
    for o in w..=last {
        let (mut hits, mut cells) = (0usize, 0usize);
        for &(d, h, c) in &diag_density {
            if d.unsigned_abs() as usize == o {
                hits += h;
                cells += c;
            }
        }
        if cells > 0 {
            xs.push(o as f64);
            ys.push(hits as f64 / cells as f64);
        }
    }
    let trend = if xs.len() < 2 {
        0.0
    } else {
        let n = xs.len() as f64;
        let mx = xs.iter().sum::<f64>() / n;
        let my = ys.iter().sum::<f64>() / n;
        let mut num = 0.0;
        let mut den = 0.0;
        for (x, y) in xs.iter().zip(&ys) {
            num += (x - mx) * (y - my);
        }
        for x in &xs {
            den += (x - mx).powi(2);
        }
        if den > 0.0 {
            num / den
        } else {
            0.0
        }
    };

    let eligible = (0..rows)
        .map(|i| (0..cols).filter(|&j| !skip(i, j)).count())
        .sum::<usize>();
    Ok(RqaMetrics {
        rr: ratio(recurrent, eligible),
        det,
        l_mean,
        l_sd,
        entropy,
        complexity,
        divergence: if lmax > 0 { 1.0 / lmax as f64 } else { 0.0 },
        trend,
        lam,
        tt,
        vmax,
        lmax,
        recurrent,
        divergence_defined: lmax > 0,
    })
}
