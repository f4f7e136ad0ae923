//! Reference templates and per-frame Procrustes head-pose fitting.
//!
//! The fitted transform maps frame coordinates onto the template:
//!
//! ```text
//! T(p) = S * R(theta) * (p - c_frame) + c_frame + t
//! ```
//!
//! i.e. centre on the frame centroid, rotate, scale per screen axis, then
//! translate. `t = c_template - c_frame` is the translation correction, so a
//! frame displaced by `d` from the template reports `t = -d`.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::ingest::{Keypoint, KeypointSeries, Track};
use crate::scalar::Real;

pub type Point<T> = [T; 2];

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum TemplateScope {
    Global,
    PerParticipant,
}

/// Head stabilisation strategy.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum StabilizationMode {
    Global,
    PerParticipant,
    None,
}

impl StabilizationMode {
    pub const ALL: [StabilizationMode; 3] = [Self::Global, Self::PerParticipant, Self::None];

    pub fn name(self) -> &'static str {
        match self {
            Self::Global => "global",
            Self::PerParticipant => "per-participant",
            Self::None => "none",
        }
    }
}

impl std::str::FromStr for StabilizationMode {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "global" => Ok(Self::Global),
            "per-participant" => Ok(Self::PerParticipant),
            "none" => Ok(Self::None),
            other => Err(Error::InvalidConfig(format!(
                "unknown stabilization mode '{other}'"
            ))),
        }
    }
}

/// Mean configuration of the four reference landmarks.
#[derive(Clone, Debug, PartialEq)]
pub struct Template<T = f64> {
    pub ids: [usize; 4],
    pub coords: [Point<T>; 4],
    pub scope: TemplateScope,
}

impl<T: Real> Template<T> {
    pub fn centroid(&self) -> Point<T> {
        centroid(&self.coords)
    }

    /// `scope` line followed by one `id x y` line per landmark.
    pub fn to_text(&self) -> String {
        let scope = match self.scope {
            TemplateScope::Global => "global",
            TemplateScope::PerParticipant => "per-participant",
        };
        let mut out = format!("scope {scope}\n");
        for (id, c) in self.ids.iter().zip(&self.coords) {
            out.push_str(&format!("{id} {} {}\n", c[0], c[1]));
        }
        out
    }

    pub fn from_text(text: &str) -> Result<Self> {
        let mut lines = text.lines().filter(|l| !l.trim().is_empty());
        let scope = match lines
            .next()
            .map(str::split_whitespace)
            .and_then(|mut w| (w.next() == Some("scope")).then(|| w.next()).flatten())
        {
            Some("global") => TemplateScope::Global,
            Some("per-participant") => TemplateScope::PerParticipant,
            _ => {
                return Err(Error::MalformedRecord(
                    "template must start with 'scope <kind>'".into(),
                ))
            }
        };
        let mut ids = [0usize; 4];
        let mut coords = [[T::zero(); 2]; 4];
        for k in 0..4 {
            let line = lines.next().ok_or_else(|| {
                Error::MalformedRecord(format!("template line {} missing", k + 2))
            })?;
            let parts: Vec<&str> = line.split_whitespace().collect();
            let bad = || Error::MalformedRecord(format!("bad template line '{line}'"));
            if parts.len() != 3 {
                return Err(bad());
            }
            ids[k] = parts[0].parse().map_err(|_| bad())?;
            let x: f64 = parts[1].parse().map_err(|_| bad())?;
            let y: f64 = parts[2].parse().map_err(|_| bad())?;
            coords[k] = [T::lit(x), T::lit(y)];
        }
        Ok(Self { ids, coords, scope })
    }
}

fn centroid<T: Real>(pts: &[Point<T>; 4]) -> Point<T> {
    let four = T::lit(4.0);
    let sx = pts.iter().map(|p| p[0]).sum::<T>();
    let sy = pts.iter().map(|p| p[1]).sum::<T>();
    [sx / four, sy / four]
}

/// Per-id mean over every present sample of every series. For a
/// per-participant template the caller passes only that participant's
/// recordings.
pub fn build_template<T: Real>(
    series: &[&KeypointSeries<T>],
    ids: [usize; 4],
    scope: TemplateScope,
) -> Result<Template<T>> {
    if series.is_empty() {
        return Err(Error::EmptyInput);
    }
    let mut coords = [[T::zero(); 2]; 4];
    for (k, &id) in ids.iter().enumerate() {
        let (mut sx, mut sy, mut n) = (T::zero(), T::zero(), 0usize);
        for s in series {
            for p in s.landmark(id).iter().flatten() {
                sx = sx + p.x;
                sy = sy + p.y;
                n += 1;
            }
        }
        if n == 0 {
            return Err(Error::NoValidSamples(id));
        }
        coords[k] = [sx / T::from_len(n), sy / T::from_len(n)];
    }
    Ok(Template { ids, coords, scope })
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct HeadPose<T = f64> {
    pub tx: T,
    pub ty: T,
    pub theta: T,
    pub sx: T,
    pub sy: T,
}

impl<T: Real> HeadPose<T> {
    pub fn identity() -> Self {
        Self {
            tx: T::zero(),
            ty: T::zero(),
            theta: T::zero(),
            sx: T::one(),
            sy: T::one(),
        }
    }
}

/// A fitted pose together with the pivot it rotates and scales about.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct PoseTransform<T = f64> {
    pub pose: HeadPose<T>,
    pub pivot: Point<T>,
}

impl<T: Real> PoseTransform<T> {
    pub fn apply(&self, p: Point<T>) -> Point<T> {
        let HeadPose {
            tx,
            ty,
            theta,
            sx,
            sy,
        } = self.pose;
        let (s, c) = theta.sin_cos();
        let (qx, qy) = (p[0] - self.pivot[0], p[1] - self.pivot[1]);
        let ux = c * qx - s * qy;
        let uy = s * qx + c * qy;
        [sx * ux + self.pivot[0] + tx, sy * uy + self.pivot[1] + ty]
    }

    /// Inverse map, template space back to frame space.
    pub fn invert(&self, p: Point<T>) -> Point<T> {
        let HeadPose {
            tx,
            ty,
            theta,
            sx,
            sy,
        } = self.pose;
        let (s, c) = theta.sin_cos();
        let ux = (p[0] - self.pivot[0] - tx) / sx;
        let uy = (p[1] - self.pivot[1] - ty) / sy;
        [
            c * ux + s * uy + self.pivot[0],
            -s * ux + c * uy + self.pivot[1],
        ]
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ProcrustesFit<T = f64> {
    pub transform: PoseTransform<T>,
    /// Sum of squared distances between mapped frame points and the template.
    pub residual: T,
}

/// Second moments of centred frame points against centred template points.
struct Moments {
    qxx: f64,
    qxy: f64,
    qyy: f64,
    a: f64, // sum qx rx
    b: f64, // sum qy rx
    c: f64, // sum qx ry
    d: f64, // sum qy ry
    rr: f64,
}

impl Moments {
    /// Optimal per-axis scale numerators and denominators at `theta`.
    fn terms(&self, theta: f64) -> (f64, f64, f64, f64) {
        let (s, c) = theta.sin_cos();
        let px = c * self.a - s * self.b;
        let qx = c * c * self.qxx - 2.0 * s * c * self.qxy + s * s * self.qyy;
        let py = s * self.c + c * self.d;
        let qy = s * s * self.qxx + 2.0 * s * c * self.qxy + c * c * self.qyy;
        (px, qx, py, qy)
    }

    /// Residual with scales profiled out (constrained non-negative).
    fn profiled(&self, theta: f64) -> f64 {
        let (px, qx, py, qy) = self.terms(theta);
        let tx = if px > 0.0 && qx > 0.0 {
            px * px / qx
        } else {
            0.0
        };
        let ty = if py > 0.0 && qy > 0.0 {
            py * py / qy
        } else {
            0.0
        };
        self.rr - tx - ty
    }

    fn profiled_slope(&self, theta: f64) -> f64 {
        let (s, c) = theta.sin_cos();
        let (px, qx, py, qy) = self.terms(theta);
        let (s2, c2) = (2.0 * theta).sin_cos();
        let dpx = -s * self.a - c * self.b;
        let dqx = s2 * (self.qyy - self.qxx) - 2.0 * c2 * self.qxy;
        let dpy = c * self.c - s * self.d;
        let dqy = s2 * (self.qxx - self.qyy) + 2.0 * c2 * self.qxy;
        let gx = if px > 0.0 && qx > 0.0 {
            (2.0 * px * dpx * qx - px * px * dqx) / (qx * qx)
        } else {
            0.0
        };
        let gy = if py > 0.0 && qy > 0.0 {
            (2.0 * py * dpy * qy - py * py * dqy) / (qy * qy)
        } else {
            0.0
        };
        -(gx + gy)
    }
}

const GRID: usize = 360;

fn minimize_angle(m: &Moments) -> f64 {
    use std::f64::consts::PI;
    let step = 2.0 * PI / GRID as f64;
    let angle = |k: usize| -PI + step * (k as f64 + 1.0);
    let mut best = (0, f64::INFINITY);
    for k in 0..GRID {
        let v = m.profiled(angle(k));
        if v < best.1 {
            best = (k, v);
        }
    }
    let centre = angle(best.0);
    let (mut lo, mut hi) = (centre - step, centre + step);
    let (glo, ghi) = (m.profiled_slope(lo), m.profiled_slope(hi));
    if glo < 0.0 && ghi > 0.0 {
        // Bisection on the slope down to adjacent floats.
        for _ in 0..200 {
            let mid = 0.5 * (lo + hi);
            if mid <= lo || mid >= hi {
                break;
            }
            if m.profiled_slope(mid) > 0.0 {
                hi = mid;
            } else {
                lo = mid;
            }
        }
        0.5 * (lo + hi)
    } else {
        // Flat or clamped region: golden-section on the residual itself.
        let phi = 0.5 * (5f64.sqrt() - 1.0);
        for _ in 0..200 {
            let x1 = hi - phi * (hi - lo);
            let x2 = lo + phi * (hi - lo);
            if m.profiled(x1) <= m.profiled(x2) {
                hi = x2;
            } else {
                lo = x1;
            }
            if hi - lo < 1e-15 {
                break;
            }
        }
        0.5 * (lo + hi)
    }
}

fn wrap_angle<T: Real>(theta: T) -> T {
    let pi = T::lit(std::f64::consts::PI);
    let two_pi = pi + pi;
    let mut t = theta;
    while t > pi {
        t = t - two_pi;
    }
    while t <= -pi {
        t = t + two_pi;
    }
    t
}

/// Fit the rotation plus per-axis-scale transform that maps the four frame
/// reference points onto the template with least squared error.
///
/// Translation is fixed by centroid matching. The remaining objective is
/// profiled over the angle, since for a fixed angle the optimal scales are
/// closed-form; the angle is located on a coarse grid and refined by
/// bisection on the analytic slope.
pub fn procrustes_fit<T: Real>(
    frame_pts: &[Point<T>; 4],
    template: &Template<T>,
) -> Result<ProcrustesFit<T>> {
    let cf = centroid(frame_pts);
    let ct = template.centroid();
    let cf64 = [cf[0].as_f64(), cf[1].as_f64()];
    let ct64 = [ct[0].as_f64(), ct[1].as_f64()];
    let mut m = Moments {
        qxx: 0.0,
        qxy: 0.0,
        qyy: 0.0,
        a: 0.0,
        b: 0.0,
        c: 0.0,
        d: 0.0,
        rr: 0.0,
    };
    for (p, r) in frame_pts.iter().zip(&template.coords) {
        if !(p[0].is_finite() && p[1].is_finite()) {
            return Err(Error::DegenerateConfiguration(
                "non-finite reference point".into(),
            ));
        }
        let (qx, qy) = (p[0].as_f64() - cf64[0], p[1].as_f64() - cf64[1]);
        let (rx, ry) = (r[0].as_f64() - ct64[0], r[1].as_f64() - ct64[1]);
        m.qxx += qx * qx;
        m.qxy += qx * qy;
        m.qyy += qy * qy;
        m.a += qx * rx;
        m.b += qy * rx;
        m.c += qx * ry;
        m.d += qy * ry;
        m.rr += rx * rx + ry * ry;
    }
    let trace = m.qxx + m.qyy;
    let det = m.qxx * m.qyy - m.qxy * m.qxy;
    if trace <= 0.0 || det <= 1e-12 * trace * trace {
        return Err(Error::DegenerateConfiguration(
            "reference points are coincident or collinear".into(),
        ));
    }

    let theta = minimize_angle(&m);
    let (px, qx, py, qy) = m.terms(theta);
    let (sx, sy) = (px / qx, py / qy);
    if !(sx > 0.0 && sy > 0.0) {
        return Err(Error::DegenerateConfiguration(
            "no reflection-free fit with positive scales".into(),
        ));
    }
    let pose = HeadPose {
        tx: T::lit(ct64[0] - cf64[0]),
        ty: T::lit(ct64[1] - cf64[1]),
        theta: wrap_angle(T::lit(theta)),
        sx: T::lit(sx),
        sy: T::lit(sy),
    };
    let transform = PoseTransform { pose, pivot: cf };
    let residual = frame_pts
        .iter()
        .zip(&template.coords)
        .map(|(p, r)| {
            let q = transform.apply(*p);
            let (dx, dy) = (q[0] - r[0], q[1] - r[1]);
            dx * dx + dy * dy
        })
        .sum();
    Ok(ProcrustesFit {
        transform,
        residual,
    })
}

/// Result of aligning a whole series to a template.
#[derive(Clone, Debug)]
pub struct AlignedSeries<T = f64> {
    pub aligned: KeypointSeries<T>,
    pub poses: Vec<Option<HeadPose<T>>>,
    /// Frames without a pose (missing or degenerate reference points).
    pub skipped: usize,
}

fn reference_points<T: Real>(
    series: &KeypointSeries<T>,
    ids: &[usize; 4],
    t: usize,
) -> Option<[Point<T>; 4]> {
    let mut pts = [[T::zero(); 2]; 4];
    for (k, &id) in ids.iter().enumerate() {
        let p = series.landmark(id)[t]?;
        pts[k] = [p.x, p.y];
    }
    Some(pts)
}

/// Fit every frame, mapping all landmarks through the frame's transform.
/// When `map_landmarks` is false the landmarks are passed through untouched
/// and only poses are estimated.
pub fn align_series<T: Real>(
    series: &KeypointSeries<T>,
    template: &Template<T>,
    map_landmarks: bool,
) -> AlignedSeries<T> {
    let fits: Vec<Option<PoseTransform<T>>> = (0..series.len())
        .into_par_iter()
        .map(|t| {
            let pts = reference_points(series, &template.ids, t)?;
            procrustes_fit(&pts, template).ok().map(|f| f.transform)
        })
        .collect();
    let skipped = fits.iter().filter(|f| f.is_none()).count();
    let aligned = if map_landmarks {
        series.map_tracks(|_, track| -> Track<T> {
            track
                .iter()
                .zip(&fits)
                .map(|(s, fit)| {
                    let (p, fit) = (s.as_ref()?, fit.as_ref()?);
                    let q = fit.apply([p.x, p.y]);
                    Some(Keypoint::new(q[0], q[1], p.confidence))
                })
                .collect()
        })
    } else {
        series.clone()
    };
    AlignedSeries {
        aligned,
        poses: fits.iter().map(|f| f.map(|f| f.pose)).collect(),
        skipped,
    }
}

/// Per-frame head-movement channels.
#[derive(Clone, Debug, PartialEq)]
pub struct HeadChannels<T = f64> {
    pub translation_x: Vec<Option<T>>,
    pub translation_y: Vec<Option<T>>,
    pub translation_mag: Vec<Option<T>>,
    pub rotation: Vec<Option<T>>,
    pub scale_x: Vec<Option<T>>,
    pub scale_y: Vec<Option<T>>,
    /// `sqrt(tx^2 + ty^2 + (sx - 1)^2 + (sy - 1)^2)`.
    pub head_motion_mag: Vec<Option<T>>,
}

pub fn head_channels<T: Real>(poses: &[Option<HeadPose<T>>]) -> HeadChannels<T> {
    let pick = |f: &dyn Fn(&HeadPose<T>) -> T| -> Vec<Option<T>> {
        poses.iter().map(|p| p.as_ref().map(f)).collect()
    };
    let one = T::one();
    HeadChannels {
        translation_x: pick(&|p| p.tx),
        translation_y: pick(&|p| p.ty),
        translation_mag: pick(&|p| p.tx.hypot(p.ty)),
        rotation: pick(&|p| p.theta),
        scale_x: pick(&|p| p.sx),
        scale_y: pick(&|p| p.sy),
        head_motion_mag: pick(&|p| {
            let (a, b) = (p.sx - one, p.sy - one);
            (p.tx * p.tx + p.ty * p.ty + a * a + b * b).sqrt()
        }),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ingest::FACE_POINTS;

    fn template() -> Template<f64> {
        Template {
            ids: [30, 31, 37, 46],
            coords: [[0.50, 0.52], [0.48, 0.53], [0.45, 0.45], [0.56, 0.46]],
            scope: TemplateScope::Global,
        }
    }

    fn frame_from(pose: HeadPose<f64>, tmpl: &Template<f64>) -> [Point<f64>; 4] {
        // Invert T about the template centroid: for an exact fit the frame
        // centroid maps onto the template centroid.
        let ct = tmpl.centroid();
        let pivot = [ct[0] - pose.tx, ct[1] - pose.ty];
        let tr = PoseTransform { pose, pivot };
        tmpl.coords.map(|p| tr.invert(p))
    }

    #[test]
    fn identity_fit() {
        let t = template();
        let fit = procrustes_fit(&t.coords, &t).unwrap();
        let p = fit.transform.pose;
        assert!(p.tx.abs() < 1e-15 && p.ty.abs() < 1e-15);
        assert!(p.theta.abs() < 1e-9);
        assert!((p.sx - 1.0).abs() < 1e-9 && (p.sy - 1.0).abs() < 1e-9);
        assert!(fit.residual < 1e-20);
    }

    #[test]
    fn pure_translation_reports_correction() {
        let t = template();
        let shifted = t.coords.map(|p| [p[0] + 0.1, p[1] - 0.05]);
        let fit = procrustes_fit(&shifted, &t).unwrap();
        let p = fit.transform.pose;
        assert!((p.tx + 0.1).abs() < 1e-12);
        assert!((p.ty - 0.05).abs() < 1e-12);
        for (s, r) in shifted.iter().zip(&t.coords) {
            let q = fit.transform.apply(*s);
            assert!((q[0] - r[0]).abs() < 1e-9 && (q[1] - r[1]).abs() < 1e-9);
        }
    }

    #[test]
    fn recovers_rotation_and_anisotropic_scale() {
        let t = template();
        let truth = HeadPose {
            tx: 0.02,
            ty: -0.01,
            theta: 0.3,
            sx: 1.2,
            sy: 0.8,
        };
        let frame = frame_from(truth, &t);
        let fit = procrustes_fit(&frame, &t).unwrap();
        let p = fit.transform.pose;
        assert!((p.theta - 0.3).abs() < 1e-6);
        assert!((p.sx - 1.2).abs() < 1e-6);
        assert!((p.sy - 0.8).abs() < 1e-6);
        assert!((p.tx - 0.02).abs() < 1e-12 && (p.ty + 0.01).abs() < 1e-12);
        assert!(fit.residual < 1e-12);
    }

    #[test]
    fn collinear_points_are_degenerate() {
        let t = template();
        let line = [[0.1, 0.1], [0.2, 0.2], [0.3, 0.3], [0.4, 0.4]];
        assert!(matches!(
            procrustes_fit(&line, &t),
            Err(Error::DegenerateConfiguration(_))
        ));
        let same = [[0.1, 0.1]; 4];
        assert!(matches!(
            procrustes_fit(&same, &t),
            Err(Error::DegenerateConfiguration(_))
        ));
    }

    fn series_of(frames: &[[Point<f64>; 4]]) -> KeypointSeries<f64> {
        let ids = [30, 31, 37, 46];
        let mut tracks = vec![vec![None; frames.len()]; FACE_POINTS];
        for (t, f) in frames.iter().enumerate() {
            for (k, &id) in ids.iter().enumerate() {
                tracks[id][t] = Some(Keypoint::new(f[k][0], f[k][1], 1.0));
            }
        }
        KeypointSeries::from_tracks(60.0, tracks).unwrap()
    }

    #[test]
    fn template_single_frame_and_mean() {
        let f0 = [[0.1, 0.2], [0.3, 0.4], [0.5, 0.6], [0.7, 0.9]];
        let s = series_of(&[f0]);
        let t = build_template(&[&s], [30, 31, 37, 46], TemplateScope::PerParticipant).unwrap();
        assert_eq!(t.coords, f0);

        let d = 0.01;
        let f1 = f0.map(|p| [p[0] + 2.0 * d, p[1] + 2.0 * d]);
        let s = series_of(&[f0, f1]);
        let t = build_template(&[&s], [30, 31, 37, 46], TemplateScope::PerParticipant).unwrap();
        for (a, b) in t.coords.iter().zip(&f0) {
            assert!((a[0] - b[0] - d).abs() < 1e-15 && (a[1] - b[1] - d).abs() < 1e-15);
        }
    }

    #[test]
    fn global_template_averages_participants() {
        let f0 = [[0.1, 0.2], [0.3, 0.4], [0.5, 0.6], [0.7, 0.9]];
        let g0 = f0.map(|p| [p[0] + 0.02, p[1] - 0.04]);
        let a = series_of(&[f0, f0]);
        let b = series_of(&[g0, g0]);
        let ma = build_template(&[&a], [30, 31, 37, 46], TemplateScope::PerParticipant).unwrap();
        let mb = build_template(&[&b], [30, 31, 37, 46], TemplateScope::PerParticipant).unwrap();
        let g = build_template(&[&a, &b], [30, 31, 37, 46], TemplateScope::Global).unwrap();
        for k in 0..4 {
            for d in 0..2 {
                let expect = 0.5 * (ma.coords[k][d] + mb.coords[k][d]);
                assert!((g.coords[k][d] - expect).abs() < 1e-15);
            }
        }
    }

    #[test]
    fn template_needs_samples() {
        let tracks = vec![vec![None; 3]; FACE_POINTS];
        let s = KeypointSeries::<f64>::from_tracks(60.0, tracks).unwrap();
        assert!(matches!(
            build_template(&[&s], [30, 31, 37, 46], TemplateScope::Global),
            Err(Error::NoValidSamples(30))
        ));
    }

    #[test]
    fn template_text_round_trip() {
        let t = template();
        let back = Template::<f64>::from_text(&t.to_text()).unwrap();
        assert_eq!(back, t);
        assert!(Template::<f64>::from_text("scope global\n1 2\n").is_err());
    }

    #[test]
    fn head_channel_arithmetic() {
        let poses: Vec<Option<HeadPose<f64>>> = vec![
            Some(HeadPose {
                tx: 3e-3,
                ty: 4e-3,
                theta: 0.1,
                sx: 1.0,
                sy: 1.0,
            }),
            Some(HeadPose::identity()),
            None,
        ];
        let ch = head_channels(&poses);
        assert!((ch.translation_mag[0].unwrap() - 5e-3).abs() < 1e-15);
        assert!((ch.head_motion_mag[0].unwrap() - 5e-3).abs() < 1e-15);
        assert_eq!(ch.translation_mag[1], Some(0.0));
        assert_eq!(ch.rotation[1], Some(0.0));
        assert_eq!(ch.scale_x[1], Some(1.0));
        assert_eq!(ch.scale_y[2], None);
    }

    #[test]
    fn align_series_maps_reference_points_onto_template() {
        let t = template();
        let frames: Vec<[Point<f64>; 4]> = (0..20)
            .map(|i| {
                let x = i as f64 / 20.0;
                frame_from(
                    HeadPose {
                        tx: 0.01 * x,
                        ty: -0.02 * x,
                        theta: 0.2 * x - 0.1,
                        sx: 1.0 + 0.1 * x,
                        sy: 1.0 - 0.05 * x,
                    },
                    &t,
                )
            })
            .collect();
        let s = series_of(&frames);
        let out = align_series(&s, &t, true);
        assert_eq!(out.skipped, 0);
        for f in 0..20 {
            for (k, &id) in t.ids.iter().enumerate() {
                let p = out.aligned.landmark(id)[f].unwrap();
                assert!((p.x - t.coords[k][0]).abs() < 1e-7 && (p.y - t.coords[k][1]).abs() < 1e-7);
            }
        }
        // Non-reference landmarks have no samples, so they stay missing.
        assert!(out.aligned.landmark(0)[0].is_none());
    }

    #[test]
    fn fit_in_single_precision() {
        let t64 = template();
        let t32 = Template {
            ids: t64.ids,
            coords: t64.coords.map(|p| p.map(|v| v as f32)),
            scope: t64.scope,
        };
        let frame = frame_from(
            HeadPose {
                tx: 0.0,
                ty: 0.0,
                theta: -0.2,
                sx: 1.1,
                sy: 0.9,
            },
            &t64,
        )
        .map(|p| p.map(|v| v as f32));
        let fit = procrustes_fit(&frame, &t32).unwrap();
        assert!((fit.transform.pose.theta + 0.2).abs() < 1e-4);
    }
}
