//! Facial feature channels, kinematic derivatives, windowing and the nine
//! window summary statistics.

use serde::{Deserialize, Serialize};

use crate::align::HeadChannels;
use crate::error::{Error, Result};
use crate::ingest::{Keypoint, KeypointSeries, LandmarkMap};
use crate::scalar::Real;

/// A per-frame series with missing samples.
pub type Series<T = f64> = Vec<Option<T>>;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Channel {
    Blink,
    Mouth,
    PupilX,
    PupilY,
    PupilMag,
    HeadTx,
    HeadTy,
    HeadTMag,
    HeadRot,
    HeadSx,
    HeadSy,
    HeadMotion,
}

impl Channel {
    pub const ALL: [Channel; 12] = [
        Channel::Blink,
        Channel::Mouth,
        Channel::PupilX,
        Channel::PupilY,
        Channel::PupilMag,
        Channel::HeadTx,
        Channel::HeadTy,
        Channel::HeadTMag,
        Channel::HeadRot,
        Channel::HeadSx,
        Channel::HeadSy,
        Channel::HeadMotion,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Channel::Blink => "blink",
            Channel::Mouth => "mouth",
            Channel::PupilX => "pupil_x",
            Channel::PupilY => "pupil_y",
            Channel::PupilMag => "pupil_mag",
            Channel::HeadTx => "head_tx",
            Channel::HeadTy => "head_ty",
            Channel::HeadTMag => "head_tmag",
            Channel::HeadRot => "head_rot",
            Channel::HeadSx => "head_sx",
            Channel::HeadSy => "head_sy",
            Channel::HeadMotion => "head_motion",
        }
    }

    pub fn from_name(name: &str) -> Option<Channel> {
        Channel::ALL.into_iter().find(|c| c.name() == name)
    }
}

impl std::fmt::Display for Channel {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Deriv {
    Value,
    Velocity,
    Acceleration,
}

impl Deriv {
    pub const ALL: [Deriv; 3] = [Deriv::Value, Deriv::Velocity, Deriv::Acceleration];

    pub fn name(self) -> &'static str {
        match self {
            Deriv::Value => "value",
            Deriv::Velocity => "velocity",
            Deriv::Acceleration => "acceleration",
        }
    }
}

pub const STAT_NAMES: [&str; 9] = [
    "rms", "mean", "sd", "median", "min", "max", "p25", "p75", "ac1",
];

/// Canonical kinematic column names, `<channel>__<deriv>__<stat>`, in
/// channel, derivative, statistic order.
pub fn kinematic_columns() -> Vec<String> {
    let mut cols = Vec::with_capacity(Channel::ALL.len() * 27);
    for ch in Channel::ALL {
        for d in Deriv::ALL {
            for s in STAT_NAMES {
                cols.push(format!("{}__{}__{}", ch.name(), d.name(), s));
            }
        }
    }
    cols
}

/// Every base channel as a per-frame series.
#[derive(Clone, Debug, PartialEq)]
pub struct ChannelSet<T = f64> {
    series: Vec<Series<T>>,
}

impl<T: Real> ChannelSet<T> {
    pub fn get(&self, ch: Channel) -> &Series<T> {
        &self.series[ch as usize]
    }

    pub fn len(&self) -> usize {
        self.series[0].len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

fn mean_point<T: Real>(pts: &[Option<Keypoint<T>>]) -> Option<[T; 2]> {
    let mut acc = [T::zero(); 2];
    for p in pts {
        let p = (*p)?;
        acc[0] = acc[0] + p.x;
        acc[1] = acc[1] + p.y;
    }
    let n = T::from_len(pts.len());
    Some([acc[0] / n, acc[1] / n])
}

fn dist<T: Real>(a: [T; 2], b: [T; 2]) -> T {
    (a[0] - b[0]).hypot(a[1] - b[1])
}

fn gather<T: Real>(
    series: &KeypointSeries<T>,
    ids: &[usize],
    t: usize,
) -> Vec<Option<Keypoint<T>>> {
    ids.iter().map(|&id| series.landmark(id)[t]).collect()
}

/// Mean of the two eyes' lid openings; each opening is the distance between
/// the mean upper-lid point and the mean lower-lid point.
pub fn blink_aperture<T: Real>(aligned: &KeypointSeries<T>, map: &LandmarkMap) -> Series<T> {
    (0..aligned.len())
        .map(|t| {
            let left = dist(
                mean_point(&gather(aligned, &map.left_upper_lid, t))?,
                mean_point(&gather(aligned, &map.left_lower_lid, t))?,
            );
            let right = dist(
                mean_point(&gather(aligned, &map.right_upper_lid, t))?,
                mean_point(&gather(aligned, &map.right_lower_lid, t))?,
            );
            Some((left + right) / T::lit(2.0))
        })
        .collect()
}

pub fn mouth_aperture<T: Real>(aligned: &KeypointSeries<T>, map: &LandmarkMap) -> Series<T> {
    let (up, lo) = (
        aligned.landmark(map.upper_lip),
        aligned.landmark(map.lower_lip),
    );
    up.iter()
        .zip(lo)
        .map(|(a, b)| {
            Some(dist(
                [a.as_ref()?.x, a.as_ref()?.y],
                [b.as_ref()?.x, b.as_ref()?.y],
            ))
        })
        .collect()
}

#[derive(Clone, Debug, PartialEq)]
pub struct PupilSeries<T = f64> {
    pub x: Series<T>,
    pub y: Series<T>,
    /// Mean of the per-eye offset norms (not the norm of the mean offset).
    pub mag: Series<T>,
}

/// Pupil offsets from the eye-contour centroids, averaged over both eyes.
pub fn pupil_displacement<T: Real>(
    aligned: &KeypointSeries<T>,
    map: &LandmarkMap,
) -> PupilSeries<T> {
    let n = aligned.len();
    let mut out = PupilSeries {
        x: Vec::with_capacity(n),
        y: Vec::with_capacity(n),
        mag: Vec::with_capacity(n),
    };
    let two = T::lit(2.0);
    for t in 0..n {
        let offset = |contour: &[usize], pupil: usize| -> Option<[T; 2]> {
            let c = mean_point(&gather(aligned, contour, t))?;
            let p = aligned.landmark(pupil)[t]?;
            Some([p.x - c[0], p.y - c[1]])
        };
        match (
            offset(&map.left_eye_contour, map.left_pupil),
            offset(&map.right_eye_contour, map.right_pupil),
        ) {
            (Some(l), Some(r)) => {
                out.x.push(Some((l[0] + r[0]) / two));
                out.y.push(Some((l[1] + r[1]) / two));
                out.mag
                    .push(Some((l[0].hypot(l[1]) + r[0].hypot(r[1])) / two));
            }
            _ => {
                out.x.push(None);
                out.y.push(None);
                out.mag.push(None);
            }
        }
    }
    out
}

/// Assemble all twelve base channels from landmarks and head channels.
pub fn channel_set<T: Real>(
    landmarks: &KeypointSeries<T>,
    head: &HeadChannels<T>,
    map: &LandmarkMap,
) -> ChannelSet<T> {
    let pupil = pupil_displacement(landmarks, map);
    let series = vec![
        blink_aperture(landmarks, map),
        mouth_aperture(landmarks, map),
        pupil.x,
        pupil.y,
        pupil.mag,
        head.translation_x.clone(),
        head.translation_y.clone(),
        head.translation_mag.clone(),
        head.rotation.clone(),
        head.scale_x.clone(),
        head.scale_y.clone(),
        head.head_motion_mag.clone(),
    ];
    debug_assert_eq!(series.len(), Channel::ALL.len());
    ChannelSet { series }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Kinematics<T = f64> {
    pub value: Series<T>,
    pub velocity: Series<T>,
    pub acceleration: Series<T>,
}

impl<T: Real> Kinematics<T> {
    pub fn get(&self, d: Deriv) -> &Series<T> {
        match d {
            Deriv::Value => &self.value,
            Deriv::Velocity => &self.velocity,
            Deriv::Acceleration => &self.acceleration,
        }
    }
}

/// Forward differences scaled by the sample rate; the trailing samples that
/// have no forward neighbour repeat the last computed difference so all three
/// levels keep the input length.
pub fn derivatives<T: Real>(series: &[Option<T>], fps: f64) -> Kinematics<T> {
    let n = series.len();
    let rate = T::lit(fps);
    let diff = |a: Option<T>, b: Option<T>| Some((b? - a?) * rate);

    let mut velocity: Series<T> = vec![None; n];
    for t in 0..n.saturating_sub(1) {
        velocity[t] = diff(series[t], series[t + 1]);
    }
    if n >= 2 {
        velocity[n - 1] = velocity[n - 2];
    }

    let mut acceleration: Series<T> = vec![None; n];
    for t in 0..n.saturating_sub(2) {
        acceleration[t] = diff(velocity[t], velocity[t + 1]);
    }
    if n >= 3 {
        acceleration[n - 2] = acceleration[n - 3];
        acceleration[n - 1] = acceleration[n - 3];
    }
    Kinematics {
        value: series.to_vec(),
        velocity,
        acceleration,
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct WindowSpec {
    pub length_s: f64,
    pub overlap: f64,
    pub fps: f64,
}

impl Default for WindowSpec {
    fn default() -> Self {
        Self {
            length_s: 60.0,
            overlap: 0.5,
            fps: 60.0,
        }
    }
}

impl WindowSpec {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..1.0).contains(&self.overlap) {
            return Err(Error::InvalidConfig(format!(
                "overlap {} outside [0, 1)",
                self.overlap
            )));
        }
        if !(self.fps > 0.0 && self.length_s > 0.0) {
            return Err(Error::InvalidConfig(
                "window length and fps must be positive".into(),
            ));
        }
        let samples = self.length_s * self.fps;
        if (samples - samples.round()).abs() > 1e-9 || samples.round() < 1.0 {
            return Err(Error::InvalidConfig(format!(
                "window of {samples} samples is not integral"
            )));
        }
        if self.hop() == 0 {
            return Err(Error::InvalidConfig("window hop rounds to zero".into()));
        }
        Ok(())
    }

    /// Window length in samples.
    pub fn len(&self) -> usize {
        (self.length_s * self.fps).round() as usize
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Step between window starts in samples.
    pub fn hop(&self) -> usize {
        (self.len() as f64 * (1.0 - self.overlap)).round() as usize
    }

    pub fn hop_s(&self) -> f64 {
        self.hop() as f64 / self.fps
    }

    /// Start offsets of every full window over `n` samples.
    pub fn starts(&self, n: usize) -> Result<Vec<usize>> {
        self.validate()?;
        let len = self.len();
        if n < len {
            return Err(Error::SeriesTooShort {
                len: n,
                needed: len,
            });
        }
        Ok((0..=(n - len) / self.hop())
            .map(|k| k * self.hop())
            .collect())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Window<T = f64> {
    pub index: usize,
    pub start: usize,
    pub values: Vec<T>,
}

/// Cut complete windows; windows containing any missing sample are dropped
/// but the remaining windows keep their positional index.
pub fn window<T: Real>(series: &[Option<T>], spec: &WindowSpec) -> Result<Vec<Window<T>>> {
    let len = spec.len();
    Ok(spec
        .starts(series.len())?
        .into_iter()
        .enumerate()
        .filter_map(|(index, start)| {
            let values: Option<Vec<T>> = series[start..start + len].iter().copied().collect();
            values.map(|values| Window {
                index,
                start,
                values,
            })
        })
        .collect())
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SummaryStats<T = f64> {
    pub rms: T,
    pub mean: T,
    pub sd: T,
    pub median: T,
    pub min: T,
    pub max: T,
    pub p25: T,
    pub p75: T,
    pub ac1: T,
    /// False when lag-1 autocorrelation was undefined and reported as 0.
    pub ac1_defined: bool,
}

impl<T: Real> SummaryStats<T> {
    /// Values in [`STAT_NAMES`] order.
    pub fn to_array(&self) -> [T; 9] {
        [
            self.rms,
            self.mean,
            self.sd,
            self.median,
            self.min,
            self.max,
            self.p25,
            self.p75,
            self.ac1,
        ]
    }
}

/// Quantile of sorted data by linear interpolation between order statistics.
pub fn quantile_sorted<T: Real>(sorted: &[T], p: f64) -> T {
    let h = (sorted.len() - 1) as f64 * p;
    let lo = h.floor() as usize;
    let hi = h.ceil() as usize;
    let frac = T::lit(h - lo as f64);
    sorted[lo] + (sorted[hi] - sorted[lo]) * frac
}

/// Pearson correlation of `x[..n-1]` with `x[1..]`; `None` if undefined.
fn lag1_autocorrelation<T: Real>(x: &[T]) -> Option<T> {
    if x.len() < 3 {
        return None;
    }
    let (a, b) = (&x[..x.len() - 1], &x[1..]);
    let m = T::from_len(a.len());
    let ma = a.iter().copied().sum::<T>() / m;
    let mb = b.iter().copied().sum::<T>() / m;
    let (mut sab, mut saa, mut sbb) = (T::zero(), T::zero(), T::zero());
    for (&u, &v) in a.iter().zip(b) {
        let (du, dv) = (u - ma, v - mb);
        sab = sab + du * dv;
        saa = saa + du * du;
        sbb = sbb + dv * dv;
    }
    let denom = (saa * sbb).sqrt();
    if !(denom > T::zero()) {
        return None;
    }
    let r = sab / denom;
    Some(r.max(-T::one()).min(T::one()))
}

/// Nine summary statistics of a complete window. The standard deviation uses
/// the population denominator.
pub fn summarize<T: Real>(window: &[T]) -> Result<SummaryStats<T>> {
    if window.is_empty() {
        return Err(Error::EmptyInput);
    }
    let n = T::from_len(window.len());
    let mean = window.iter().copied().sum::<T>() / n;
    let ms = window.iter().map(|&v| v * v).sum::<T>() / n;
    let var = window.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() / n;
    let mut sorted = window.to_vec();
    sorted.sort_by(|a, b| a.partial_cmp(b).expect("finite window values"));
    let ac1 = lag1_autocorrelation(window);
    Ok(SummaryStats {
        rms: ms.sqrt(),
        mean,
        sd: var.sqrt(),
        median: quantile_sorted(&sorted, 0.5),
        min: sorted[0],
        max: sorted[sorted.len() - 1],
        p25: quantile_sorted(&sorted, 0.25),
        p75: quantile_sorted(&sorted, 0.75),
        ac1: ac1.unwrap_or_else(T::zero),
        ac1_defined: ac1.is_some(),
    })
}

/// One feature row per window position where every channel and derivative
/// level is complete. Values follow [`kinematic_columns`] order.
pub fn window_features<T: Real>(
    set: &ChannelSet<T>,
    spec: &WindowSpec,
) -> Result<Vec<(usize, Vec<T>)>> {
    let starts = spec.starts(set.len())?;
    let len = spec.len();
    let kin: Vec<Kinematics<T>> = Channel::ALL
        .iter()
        .map(|&c| derivatives(set.get(c), spec.fps))
        .collect();
    let mut rows = Vec::new();
    'windows: for (index, start) in starts.into_iter().enumerate() {
        let mut row = Vec::with_capacity(kin.len() * 27);
        for k in &kin {
            for d in Deriv::ALL {
                let Some(values) = k.get(d)[start..start + len]
                    .iter()
                    .copied()
                    .collect::<Option<Vec<T>>>()
                else {
                    continue 'windows;
                };
                row.extend(summarize(&values)?.to_array());
            }
        }
        rows.push((index, row));
    }
    Ok(rows)
}
