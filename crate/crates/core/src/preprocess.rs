//! Landmark cleaning: confidence masking, short-gap interpolation,
//! zero-phase low-pass filtering and screen normalisation.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::ingest::{Keypoint, KeypointSeries, Track};
use crate::scalar::Real;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PreprocessConfig {
    pub conf_threshold: f64,
    /// Longest run of missing frames that is interpolated.
    pub max_gap: usize,
    pub filter_order: usize,
    pub cutoff_hz: f64,
    pub screen_w: f64,
    pub screen_h: f64,
    /// Edge padding per segment; `None` means `3 * (filter_order + 1)`.
    pub pad_len: Option<usize>,
}

impl Default for PreprocessConfig {
    fn default() -> Self {
        Self {
            conf_threshold: 0.30,
            max_gap: 60,
            filter_order: 4,
            cutoff_hz: 10.0,
            screen_w: 2560.0,
            screen_h: 1440.0,
            pad_len: None,
        }
    }
}

impl PreprocessConfig {
    pub fn pad_len(&self) -> usize {
        self.pad_len.unwrap_or(3 * (self.filter_order + 1))
    }

    pub fn validate(&self, fps: f64) -> Result<()> {
        if !(0.0..=1.0).contains(&self.conf_threshold) {
            return Err(Error::InvalidConfig(format!(
                "conf_threshold {} outside [0, 1]",
                self.conf_threshold
            )));
        }
        if self.filter_order == 0 {
            return Err(Error::InvalidConfig(
                "filter_order must be at least 1".into(),
            ));
        }
        if !(self.cutoff_hz > 0.0 && self.cutoff_hz < fps / 2.0) {
            return Err(Error::InvalidConfig(format!(
                "cutoff {} Hz must lie in (0, {}) for {fps} fps",
                self.cutoff_hz,
                fps / 2.0
            )));
        }
        if !(self.screen_w > 0.0 && self.screen_h > 0.0) {
            return Err(Error::InvalidConfig(
                "screen dimensions must be positive".into(),
            ));
        }
        Ok(())
    }
}

/// Counters collected while preprocessing one series.
#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize)]
pub struct PreprocessReport {
    pub masked: usize,
    pub interpolated: usize,
    /// Segments passed through unfiltered because they were too short.
    pub short_segments: usize,
    /// Normalised samples falling outside [0, 1].
    pub off_screen: usize,
}

/// Mask samples whose confidence is strictly below the threshold.
pub fn mask_low_confidence<T: Real>(
    series: &KeypointSeries<T>,
    cfg: &PreprocessConfig,
) -> KeypointSeries<T> {
    let thr = T::lit(cfg.conf_threshold);
    series.map_tracks(|_, track| {
        track
            .iter()
            .map(|s| s.filter(|p| p.confidence >= thr))
            .collect()
    })
}

/// Linearly fill interior gaps of at most `max_gap` frames. Samples that are
/// already present are never modified.
pub fn interpolate_track<T: Real>(track: &Track<T>, max_gap: usize) -> Track<T> {
    let mut out = track.clone();
    let n = track.len();
    let mut t = 0;
    while t < n {
        if track[t].is_some() {
            t += 1;
            continue;
        }
        let start = t;
        while t < n && track[t].is_none() {
            t += 1;
        }
        let gap = t - start;
        if start == 0 || t == n || gap > max_gap {
            continue;
        }
        let (a, b) = (track[start - 1].unwrap(), track[t].unwrap());
        let span = T::from_len(gap + 1);
        for (k, slot) in out[start..t].iter_mut().enumerate() {
            let w = T::from_len(k + 1) / span;
            *slot = Some(Keypoint::new(
                a.x + (b.x - a.x) * w,
                a.y + (b.y - a.y) * w,
                a.confidence + (b.confidence - a.confidence) * w,
            ));
        }
    }
    out
}

pub fn interpolate_gaps<T: Real>(
    series: &KeypointSeries<T>,
    cfg: &PreprocessConfig,
) -> KeypointSeries<T> {
    series.map_tracks(|_, t| interpolate_track(t, cfg.max_gap))
}

/// One second-order section in direct form II transposed, `a0 == 1`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Biquad<T> {
    pub b: [T; 3],
    pub a: [T; 3],
}

impl<T: Real> Biquad<T> {
    fn dc_gain(&self) -> T {
        (self.b[0] + self.b[1] + self.b[2]) / (self.a[0] + self.a[1] + self.a[2])
    }

    /// State that holds the output steady for a unit step input.
    fn steady_state(&self) -> [T; 2] {
        let g = self.dc_gain();
        let z2 = self.b[2] - self.a[2] * g;
        let z1 = self.b[1] - self.a[1] * g + z2;
        [z1, z2]
    }

    fn run(&self, x: &mut [T], mut z: [T; 2]) {
        let [b0, b1, b2] = self.b;
        let [_, a1, a2] = self.a;
        for v in x.iter_mut() {
            let input = *v;
            let y = b0 * input + z[0];
            z[0] = b1 * input - a1 * y + z[1];
            z[1] = b2 * input - a2 * y;
            *v = y;
        }
    }
}

/// Digital Butterworth low-pass as a cascade of second-order sections.
///
/// Designed from the analog prototype with the cutoff pre-warped and mapped
/// through the bilinear transform, so the digital magnitude is exactly
/// `1 / sqrt(1 + (tan(pi f / fs) / tan(pi fc / fs))^(2N))`.
#[derive(Clone, Debug, PartialEq)]
pub struct Butterworth<T> {
    sections: Vec<Biquad<T>>,
    order: usize,
}

impl<T: Real> Butterworth<T> {
    pub fn lowpass(order: usize, cutoff_hz: f64, fs: f64) -> Result<Self> {
        if order == 0 || !(cutoff_hz > 0.0 && cutoff_hz < fs / 2.0) {
            return Err(Error::InvalidConfig(format!(
                "cannot design order-{order} low-pass at {cutoff_hz} Hz for fs {fs}"
            )));
        }
        let k = 2.0 * fs;
        let wc = k * (std::f64::consts::PI * cutoff_hz / fs).tan();
        let mut sections = Vec::with_capacity(order.div_ceil(2));
        for i in 0..order / 2 {
            // Conjugate pole pair at angle pi (2i + 1) / (2N) from the imaginary axis.
            let theta = std::f64::consts::PI * (2 * i + 1) as f64 / (2 * order) as f64;
            let a1 = 2.0 * theta.sin() * wc;
            let w2 = wc * wc;
            let d0 = k * k + a1 * k + w2;
            let d1 = 2.0 * (w2 - k * k);
            let d2 = k * k - a1 * k + w2;
            sections.push(Biquad {
                b: [w2 / d0, 2.0 * w2 / d0, w2 / d0].map(T::lit),
                a: [1.0, d1 / d0, d2 / d0].map(T::lit),
            });
        }
        if order % 2 == 1 {
            let d0 = k + wc;
            sections.push(Biquad {
                b: [wc / d0, wc / d0, 0.0].map(T::lit),
                a: [1.0, (wc - k) / d0, 0.0].map(T::lit),
            });
        }
        Ok(Self { sections, order })
    }

    pub fn order(&self) -> usize {
        self.order
    }

    pub fn sections(&self) -> &[Biquad<T>] {
        &self.sections
    }

    /// Magnitude of the single-pass frequency response at `f` Hz, evaluated
    /// from the section coefficients.
    pub fn magnitude(&self, f: f64, fs: f64) -> f64 {
        let w = 2.0 * std::f64::consts::PI * f / fs;
        let (c1, s1, c2, s2) = (w.cos(), w.sin(), (2.0 * w).cos(), (2.0 * w).sin());
        self.sections.iter().fold(1.0, |acc, s| {
            let b = s.b.map(|v| v.as_f64());
            let a = s.a.map(|v| v.as_f64());
            let nr = b[0] + b[1] * c1 + b[2] * c2;
            let ni = -(b[1] * s1 + b[2] * s2);
            let dr = a[0] + a[1] * c1 + a[2] * c2;
            let di = -(a[1] * s1 + a[2] * s2);
            acc * ((nr * nr + ni * ni) / (dr * dr + di * di)).sqrt()
        })
    }

    /// Causal single pass starting from rest.
    pub fn filter(&self, x: &[T]) -> Vec<T> {
        let mut y = x.to_vec();
        for s in &self.sections {
            s.run(&mut y, [T::zero(); 2]);
        }
        y
    }

    /// Causal pass with each section started in steady state for a constant
    /// input equal to `x[0]`.
    fn filter_steady(&self, x: &mut [T]) {
        let mut level = x[0];
        for s in &self.sections {
            let zi = s.steady_state().map(|z| z * level);
            s.run(x, zi);
            level = level * s.dc_gain();
        }
    }

    /// Forward-backward filtering with odd reflective padding of `pad`
    /// samples at each end. Output has the input's length and no phase lag.
    pub fn filtfilt(&self, x: &[T], pad: usize) -> Result<Vec<T>> {
        let n = x.len();
        if n <= pad || n < 2 {
            return Err(Error::SegmentTooShort {
                len: n,
                min: pad.max(1),
            });
        }
        let two = T::lit(2.0);
        let mut ext = Vec::with_capacity(n + 2 * pad);
        ext.extend((1..=pad).rev().map(|i| two * x[0] - x[i]));
        ext.extend_from_slice(x);
        ext.extend((1..=pad).map(|i| two * x[n - 1] - x[n - 1 - i]));
        self.filter_steady(&mut ext);
        ext.reverse();
        self.filter_steady(&mut ext);
        ext.reverse();
        Ok(ext[pad..pad + n].to_vec())
    }
}

/// Zero-phase low-pass of one contiguous segment.
pub fn lowpass_zero_phase<T: Real>(
    signal: &[T],
    fps: f64,
    cfg: &PreprocessConfig,
) -> Result<Vec<T>> {
    cfg.validate(fps)?;
    let filt = Butterworth::<T>::lowpass(cfg.filter_order, cfg.cutoff_hz, fps)?;
    filt.filtfilt(signal, cfg.pad_len())
}

/// Filter every contiguous run of present samples of a track. Returns the
/// filtered track and the number of runs left unfiltered.
pub fn filter_track<T: Real>(
    track: &Track<T>,
    filt: &Butterworth<T>,
    pad: usize,
) -> (Track<T>, usize) {
    let mut out = track.clone();
    let mut short = 0;
    let mut t = 0;
    let n = track.len();
    while t < n {
        if track[t].is_none() {
            t += 1;
            continue;
        }
        let start = t;
        while t < n && track[t].is_some() {
            t += 1;
        }
        let seg = &track[start..t];
        let xs: Vec<T> = seg.iter().map(|p| p.unwrap().x).collect();
        let ys: Vec<T> = seg.iter().map(|p| p.unwrap().y).collect();
        match (filt.filtfilt(&xs, pad), filt.filtfilt(&ys, pad)) {
            (Ok(fx), Ok(fy)) => {
                for (k, slot) in out[start..t].iter_mut().enumerate() {
                    let p = slot.as_mut().unwrap();
                    p.x = fx[k];
                    p.y = fy[k];
                }
            }
            _ => short += 1,
        }
    }
    (out, short)
}

/// Divide x by screen width and y by screen height.
pub fn normalize_screen<T: Real>(
    series: &KeypointSeries<T>,
    cfg: &PreprocessConfig,
) -> KeypointSeries<T> {
    let (w, h) = (T::lit(cfg.screen_w), T::lit(cfg.screen_h));
    series.map_tracks(|_, track| {
        track
            .iter()
            .map(|s| s.map(|p| Keypoint::new(p.x / w, p.y / h, p.confidence)))
            .collect()
    })
}

fn count_off_screen<T: Real>(series: &KeypointSeries<T>) -> usize {
    let unit = |v: T| v >= T::zero() && v <= T::one();
    series
        .landmarks()
        .iter()
        .flat_map(|t| t.iter().flatten())
        .filter(|p| !(unit(p.x) && unit(p.y)))
        .count()
}

/// Run mask, interpolate, filter and normalise in that order.
pub fn preprocess<T: Real>(
    series: &KeypointSeries<T>,
    cfg: &PreprocessConfig,
) -> Result<(KeypointSeries<T>, PreprocessReport)> {
    cfg.validate(series.fps())?;
    let before = series.missing_count();
    let masked = mask_low_confidence(series, cfg);
    let after_mask = masked.missing_count();
    let filled = interpolate_gaps(&masked, cfg);
    let after_fill = filled.missing_count();

    let filt = Butterworth::<T>::lowpass(cfg.filter_order, cfg.cutoff_hz, series.fps())?;
    let pad = cfg.pad_len();
    let mut short_segments = 0;
    let smoothed = filled.map_tracks(|_, t| {
        let (out, short) = filter_track(t, &filt, pad);
        short_segments += short;
        out
    });
    let normalized = normalize_screen(&smoothed, cfg);
    let report = PreprocessReport {
        masked: after_mask - before,
        interpolated: after_mask - after_fill,
        short_segments,
        off_screen: count_off_screen(&normalized),
    };
    Ok((normalized, report))
}
