//! Per-frame face keypoint records and fixed-rate landmark series.
//!
//! Two on-disk layouts are understood:
//!
//! * JSON lines, one frame per line. A line is either the canonical
//!   `{"frame":N,"keypoints":[x0,y0,c0,...]}` object, a bare array of 210
//!   numbers, or a pose-estimator frame object carrying
//!   `people[0].face_keypoints_2d`.
//! * Long CSV with header `frame,id,x,y,c`.
//!
//! Undetected points use `null` coordinates (or missing CSV rows) and end up
//! as `None` samples once a series is assembled.

use std::io::{BufRead, Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::error::{Error, Result};
use crate::scalar::Real;

/// Number of landmarks in the face model.
pub const FACE_POINTS: usize = 70;
/// Numbers per frame record (x, y, confidence per landmark).
pub const RECORD_LEN: usize = FACE_POINTS * 3;

#[derive(Clone, Copy, Debug, PartialEq, Default, Serialize, Deserialize)]
pub struct Keypoint<T = f64> {
    pub x: T,
    pub y: T,
    pub confidence: T,
}

impl<T: Real> Keypoint<T> {
    pub fn new(x: T, y: T, confidence: T) -> Self {
        Self { x, y, confidence }
    }

    pub fn is_finite(&self) -> bool {
        self.x.is_finite() && self.y.is_finite()
    }
}

/// The 70 landmarks of one video frame, in model order.
#[derive(Clone, Debug, PartialEq)]
pub struct FrameKeypoints<T = f64> {
    pub frame_index: usize,
    pub points: Vec<Keypoint<T>>,
}

impl<T: Real> FrameKeypoints<T> {
    pub fn new(frame_index: usize, points: Vec<Keypoint<T>>) -> Result<Self> {
        if points.len() != FACE_POINTS {
            return Err(Error::MalformedRecord(format!(
                "expected {FACE_POINTS} points, got {}",
                points.len()
            )));
        }
        Ok(Self {
            frame_index,
            points,
        })
    }
}

/// One landmark trace; `None` marks a missing or masked sample.
pub type Track<T = f64> = Vec<Option<Keypoint<T>>>;

/// Aligned, fixed-rate traces for every landmark.
#[derive(Clone, Debug, PartialEq)]
pub struct KeypointSeries<T = f64> {
    fps: f64,
    landmarks: Vec<Track<T>>,
}

impl<T: Real> KeypointSeries<T> {
    pub fn from_tracks(fps: f64, landmarks: Vec<Track<T>>) -> Result<Self> {
        if !(fps > 0.0 && fps.is_finite()) {
            return Err(Error::InvalidConfig(format!(
                "fps must be positive, got {fps}"
            )));
        }
        if landmarks.len() != FACE_POINTS {
            return Err(Error::InvalidConfig(format!(
                "expected {FACE_POINTS} landmark tracks, got {}",
                landmarks.len()
            )));
        }
        let len = landmarks[0].len();
        if landmarks.iter().any(|t| t.len() != len) {
            return Err(Error::InvalidConfig(
                "landmark tracks differ in length".into(),
            ));
        }
        Ok(Self { fps, landmarks })
    }

    pub fn fps(&self) -> f64 {
        self.fps
    }

    /// Number of frames.
    pub fn len(&self) -> usize {
        self.landmarks[0].len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn landmark(&self, id: usize) -> &Track<T> {
        &self.landmarks[id]
    }

    pub fn landmarks(&self) -> &[Track<T>] {
        &self.landmarks
    }

    /// Apply `f` to every track, keeping the fps.
    pub fn map_tracks(&self, mut f: impl FnMut(usize, &Track<T>) -> Track<T>) -> Self {
        let landmarks = self
            .landmarks
            .iter()
            .enumerate()
            .map(|(id, t)| f(id, t))
            .collect();
        Self {
            fps: self.fps,
            landmarks,
        }
    }

    /// Landmarks of frame `t`, `None` where missing.
    pub fn frame(&self, t: usize) -> Vec<Option<Keypoint<T>>> {
        self.landmarks.iter().map(|tr| tr[t]).collect()
    }

    pub fn missing_count(&self) -> usize {
        self.landmarks
            .iter()
            .map(|t| t.iter().filter(|s| s.is_none()).count())
            .sum()
    }
}

/// Landmark ids used by the downstream feature code.
///
/// Defaults follow the face-model numbering used for the reference-point
/// template and the eye, lid and lip groups. The pupils are configured
/// separately because the numbering convention for them is off by one
/// relative to the 0..=69 model ids; they default to 68 (left) and 69
/// (right).
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LandmarkMap {
    pub template: [usize; 4],
    pub left_upper_lid: [usize; 2],
    pub left_lower_lid: [usize; 2],
    pub right_upper_lid: [usize; 2],
    pub right_lower_lid: [usize; 2],
    pub left_eye_contour: Vec<usize>,
    pub right_eye_contour: Vec<usize>,
    pub upper_lip: usize,
    pub lower_lip: usize,
    pub left_pupil: usize,
    pub right_pupil: usize,
}

impl Default for LandmarkMap {
    fn default() -> Self {
        Self {
            template: [30, 31, 37, 46],
            left_upper_lid: [38, 39],
            left_lower_lid: [41, 42],
            right_upper_lid: [44, 45],
            right_lower_lid: [47, 48],
            left_eye_contour: (37..=42).collect(),
            right_eye_contour: (43..=48).collect(),
            upper_lip: 63,
            lower_lip: 67,
            left_pupil: 68,
            right_pupil: 69,
        }
    }
}

impl LandmarkMap {
    pub fn validate(&self) -> Result<()> {
        let mut ids: Vec<usize> = self.template.to_vec();
        ids.extend(self.left_upper_lid);
        ids.extend(self.left_lower_lid);
        ids.extend(self.right_upper_lid);
        ids.extend(self.right_lower_lid);
        ids.extend(&self.left_eye_contour);
        ids.extend(&self.right_eye_contour);
        ids.extend([
            self.upper_lip,
            self.lower_lip,
            self.left_pupil,
            self.right_pupil,
        ]);
        if let Some(&bad) = ids.iter().find(|&&id| id >= FACE_POINTS) {
            return Err(Error::InvalidLandmark(bad));
        }
        let mut t = self.template;
        t.sort_unstable();
        if t.windows(2).any(|w| w[0] == w[1]) {
            return Err(Error::InvalidConfig("template ids must be distinct".into()));
        }
        if self.left_eye_contour.is_empty() || self.right_eye_contour.is_empty() {
            return Err(Error::InvalidConfig(
                "eye contours must be non-empty".into(),
            ));
        }
        Ok(())
    }
}

fn numbers_from_array(values: &[Value]) -> Result<Vec<f64>> {
    if values.len() != RECORD_LEN {
        return Err(Error::MalformedRecord(format!(
            "expected {RECORD_LEN} numbers, got {}",
            values.len()
        )));
    }
    values
        .iter()
        .enumerate()
        .map(|(i, v)| match v {
            Value::Number(n) => n
                .as_f64()
                .ok_or_else(|| Error::MalformedRecord(format!("value {i} is not a finite number"))),
            Value::Null => Ok(f64::NAN),
            other => Err(Error::MalformedRecord(format!(
                "value {i} is not numeric: {other}"
            ))),
        })
        .collect()
}

/// Build a frame from a flat `x, y, c` list of 210 numbers.
pub fn frame_from_flat(frame_index: usize, flat: &[f64]) -> Result<FrameKeypoints> {
    if flat.len() != RECORD_LEN {
        return Err(Error::MalformedRecord(format!(
            "expected {RECORD_LEN} numbers, got {}",
            flat.len()
        )));
    }
    let mut points = Vec::with_capacity(FACE_POINTS);
    for (id, c) in flat.chunks_exact(3).enumerate() {
        let conf = c[2];
        if conf.is_finite() && !(0.0..=1.0).contains(&conf) {
            return Err(Error::MalformedRecord(format!(
                "landmark {id}: confidence {conf} outside [0, 1]"
            )));
        }
        points.push(Keypoint::new(
            c[0],
            c[1],
            if conf.is_finite() { conf } else { 0.0 },
        ));
    }
    FrameKeypoints::new(frame_index, points)
}

/// Parse one frame record (one JSON line).
///
/// A bare array or a pose-estimator object without a `frame` key gets frame
/// index 0; [`read_keypoint_jsonl`] substitutes the line number.
pub fn parse_frame(record: &str) -> Result<FrameKeypoints> {
    parse_frame_with_default(record, 0)
}

fn parse_frame_with_default(record: &str, default_index: usize) -> Result<FrameKeypoints> {
    let value: Value = serde_json::from_str(record.trim())
        .map_err(|e| Error::MalformedRecord(format!("not valid JSON: {e}")))?;
    let frame_index = |obj: &serde_json::Map<String, Value>| -> Result<usize> {
        match obj.get("frame") {
            None => Ok(default_index),
            Some(v) => v.as_u64().map(|f| f as usize).ok_or_else(|| {
                Error::MalformedRecord(format!("frame index not a non-negative integer: {v}"))
            }),
        }
    };
    match &value {
        Value::Array(values) => frame_from_flat(default_index, &numbers_from_array(values)?),
        Value::Object(obj) => {
            let index = frame_index(obj)?;
            if let Some(Value::Array(values)) = obj.get("keypoints") {
                return frame_from_flat(index, &numbers_from_array(values)?);
            }
            match obj.get("people") {
                Some(Value::Array(people)) => match people.first() {
                    // Nobody detected: every landmark reported with zero confidence.
                    None => frame_from_flat(index, &[0.0; RECORD_LEN]),
                    Some(person) => match person.get("face_keypoints_2d") {
                        Some(Value::Array(values)) => {
                            frame_from_flat(index, &numbers_from_array(values)?)
                        }
                        _ => Err(Error::MalformedRecord(
                            "person without face_keypoints_2d".into(),
                        )),
                    },
                },
                _ => Err(Error::MalformedRecord(
                    "object has neither keypoints nor people".into(),
                )),
            }
        }
        _ => Err(Error::MalformedRecord(
            "record is neither an array nor an object".into(),
        )),
    }
}

fn push_number(out: &mut String, x: f64) {
    if x.is_finite() {
        // Display prints the shortest representation that parses back exactly.
        out.push_str(&x.to_string());
    } else {
        out.push_str("null");
    }
}

/// Canonical one-line record for a frame; inverse of [`parse_frame`].
pub fn serialize_frame(frame: &FrameKeypoints) -> String {
    let mut out = String::with_capacity(RECORD_LEN * 8);
    out.push_str("{\"frame\":");
    out.push_str(&frame.frame_index.to_string());
    out.push_str(",\"keypoints\":[");
    for (i, p) in frame.points.iter().enumerate() {
        if i > 0 {
            out.push(',');
        }
        push_number(&mut out, p.x);
        out.push(',');
        push_number(&mut out, p.y);
        out.push(',');
        push_number(&mut out, p.confidence);
    }
    out.push_str("]}");
    out
}

/// Read a JSON-lines keypoint file.
pub fn read_keypoint_jsonl(reader: impl BufRead) -> Result<Vec<FrameKeypoints>> {
    let mut frames = Vec::new();
    let mut line_no = 0usize;
    for line in reader.lines() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let frame = parse_frame_with_default(&line, line_no)
            .map_err(|e| Error::MalformedRecord(format!("record {line_no}: {e}")))?;
        frames.push(frame);
        line_no += 1;
    }
    Ok(frames)
}

pub fn write_keypoint_jsonl(mut writer: impl Write, frames: &[FrameKeypoints]) -> Result<()> {
    for f in frames {
        writeln!(writer, "{}", serialize_frame(f))?;
    }
    Ok(())
}

#[derive(Debug, Deserialize)]
struct CsvPoint {
    frame: usize,
    id: usize,
    x: Option<f64>,
    y: Option<f64>,
    c: Option<f64>,
}

/// Read the long CSV layout (`frame,id,x,y,c`). Landmarks absent for a frame
/// are reported as undetected.
pub fn read_keypoint_csv(reader: impl Read) -> Result<Vec<FrameKeypoints>> {
    let mut rdr = csv::ReaderBuilder::new()
        .trim(csv::Trim::All)
        .from_reader(reader);
    let mut frames: Vec<FrameKeypoints> = Vec::new();
    for (row, rec) in rdr.deserialize::<CsvPoint>().enumerate() {
        let p = rec.map_err(|e| Error::MalformedRecord(format!("csv row {}: {e}", row + 1)))?;
        if p.id >= FACE_POINTS {
            return Err(Error::InvalidLandmark(p.id));
        }
        let conf = p.c.unwrap_or(0.0);
        if !(0.0..=1.0).contains(&conf) {
            return Err(Error::MalformedRecord(format!(
                "csv row {}: confidence {conf} outside [0, 1]",
                row + 1
            )));
        }
        if frames.last().map(|f| f.frame_index) != Some(p.frame) {
            frames.push(FrameKeypoints {
                frame_index: p.frame,
                points: vec![Keypoint::new(f64::NAN, f64::NAN, 0.0); FACE_POINTS],
            });
        }
        let frame = frames.last_mut().expect("pushed above");
        frame.points[p.id] = Keypoint::new(p.x.unwrap_or(f64::NAN), p.y.unwrap_or(f64::NAN), conf);
    }
    Ok(frames)
}

/// Read a keypoint file, choosing the layout from the extension.
pub fn read_keypoint_file(path: &Path) -> Result<Vec<FrameKeypoints>> {
    let file = std::fs::File::open(path)?;
    let reader = std::io::BufReader::new(file);
    match path.extension().and_then(|e| e.to_str()) {
        Some("csv") => read_keypoint_csv(reader),
        _ => read_keypoint_jsonl(reader),
    }
}

/// Assemble sorted frames into a fixed-rate series. Gaps in the frame index
/// become missing samples, as do points with non-finite coordinates.
pub fn assemble_series(frames: &[FrameKeypoints], fps: f64) -> Result<KeypointSeries> {
    let mut prev: Option<usize> = None;
    for f in frames {
        if let Some(p) = prev {
            if f.frame_index == p {
                return Err(Error::DuplicateFrame(p));
            }
            if f.frame_index < p {
                return Err(Error::NonMonotonicIndex {
                    previous: p,
                    found: f.frame_index,
                });
            }
        }
        prev = Some(f.frame_index);
    }
    let len = frames.last().map(|f| f.frame_index + 1).unwrap_or(0);
    let mut tracks: Vec<Track> = vec![vec![None; len]; FACE_POINTS];
    for f in frames {
        for (id, p) in f.points.iter().enumerate() {
            if p.is_finite() {
                tracks[id][f.frame_index] = Some(*p);
            }
        }
    }
    KeypointSeries::from_tracks(fps, tracks)
}

/// Write a series in the long CSV layout; missing samples have empty fields.
pub fn write_series_csv<T: Real>(writer: impl Write, series: &KeypointSeries<T>) -> Result<()> {
    let mut w = csv::Writer::from_writer(writer);
    w.write_record(["frame", "id", "x", "y", "c"])?;
    for t in 0..series.len() {
        for id in 0..FACE_POINTS {
            let (x, y, c) = match series.landmark(id)[t] {
                Some(p) => (p.x.to_string(), p.y.to_string(), p.confidence.to_string()),
                None => (String::new(), String::new(), String::new()),
            };
            w.write_record([t.to_string(), id.to_string(), x, y, c])?;
        }
    }
    w.flush()?;
    Ok(())
}
