//! State-space reconstruction and recurrence quantification.
//!
//! A scalar series is rescaled to [0, 1], delay-embedded, and compared
//! point-by-point against itself (auto) or a second series (cross). The
//! recurrence plot marks pairs closer than `radius_frac` times the mean
//! pairwise distance; line statistics along its diagonals and columns give
//! the [`RqaMetrics`].

use std::fmt::Write as _;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::scalar::Real;

/// Windows shorter than this give unstable recurrence distributions.
pub const STABLE_WINDOW: usize = 1000;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EmbeddingParams {
    pub tau: usize,
    pub m: usize,
}

impl Default for EmbeddingParams {
    fn default() -> Self {
        Self { tau: 20, m: 4 }
    }
}

impl EmbeddingParams {
    pub fn validate(&self) -> Result<()> {
        if self.tau == 0 || self.m == 0 {
            return Err(Error::InvalidConfig("tau and m must be at least 1".into()));
        }
        Ok(())
    }

    /// Samples consumed by one embedded point beyond the first.
    pub fn span(&self) -> usize {
        (self.m - 1) * self.tau
    }
}

/// Reference entropy used by the complexity measure.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ComplexityBase {
    /// `log2` of the number of line lengths in `l_min..=lmax`.
    RealizableLengths,
    /// `log2` of the number of distinct line lengths actually observed.
    ObservedLengths,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RqaConfig {
    /// Threshold as a fraction of the mean pairwise distance.
    pub radius_frac: f64,
    /// Cells with `|i - j| < theiler` are excluded in auto mode.
    pub theiler: usize,
    pub l_min: usize,
    pub v_min: usize,
    /// Apply the Theiler band to cross plots as well.
    pub cross_theiler: bool,
    pub complexity: ComplexityBase,
}

impl Default for RqaConfig {
    fn default() -> Self {
        Self::auto()
    }
}

impl RqaConfig {
    pub fn auto() -> Self {
        Self {
            radius_frac: 0.20,
            theiler: 2,
            l_min: 4,
            v_min: 4,
            cross_theiler: false,
            complexity: ComplexityBase::RealizableLengths,
        }
    }

    pub fn cross() -> Self {
        Self {
            radius_frac: 0.30,
            ..Self::auto()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.radius_frac > 0.0) {
            return Err(Error::InvalidConfig("radius_frac must be positive".into()));
        }
        if self.l_min < 2 || self.v_min < 2 {
            return Err(Error::InvalidConfig(
                "l_min and v_min must be at least 2".into(),
            ));
        }
        Ok(())
    }
}

/// Min-max rescale to [0, 1]. A constant series maps to zeros and the flag
/// is set.
pub fn rescale_unit<T: Real>(x: &[T]) -> (Vec<T>, bool) {
    let (lo, hi) = x
        .iter()
        .fold((T::infinity(), T::neg_infinity()), |(lo, hi), &v| {
            (lo.min(v), hi.max(v))
        });
    let range = hi - lo;
    if x.is_empty() || !(range > T::zero()) {
        return (vec![T::zero(); x.len()], true);
    }
    (x.iter().map(|&v| (v - lo) / range).collect(), false)
}

fn entropy_bits(counts: &[usize], total: usize) -> f64 {
    counts
        .iter()
        .filter(|&&c| c > 0)
        .map(|&c| {
            let p = c as f64 / total as f64;
            -p * p.log2()
        })
        .sum()
}

fn bin_of(v: f64, bins: usize) -> usize {
    ((v * bins as f64) as usize).min(bins - 1)
}

/// Histogram mutual information (bits) between two equally long series on
/// [0, 1], using `bins` equal-width bins per axis.
pub fn mutual_information<T: Real>(a: &[T], b: &[T], bins: usize) -> f64 {
    let n = a.len().min(b.len());
    if n == 0 || bins == 0 {
        return 0.0;
    }
    let mut joint = vec![0usize; bins * bins];
    let mut pa = vec![0usize; bins];
    let mut pb = vec![0usize; bins];
    for (&u, &v) in a.iter().zip(b).take(n) {
        let (i, j) = (bin_of(u.as_f64(), bins), bin_of(v.as_f64(), bins));
        joint[i * bins + j] += 1;
        pa[i] += 1;
        pb[j] += 1;
    }
    entropy_bits(&pa, n) + entropy_bits(&pb, n) - entropy_bits(&joint, n)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AmiConfig {
    pub bins: usize,
    /// Width of the centred moving average applied before plateau search.
    pub smooth: usize,
    pub plateau_tol: f64,
    pub plateau_len: usize,
}

impl Default for AmiConfig {
    fn default() -> Self {
        Self {
            bins: 16,
            smooth: 5,
            plateau_tol: 0.02,
            plateau_len: 5,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct AmiResult {
    /// `curve[k - 1]` is the mutual information at lag `k`.
    pub curve: Vec<f64>,
    pub tau: usize,
}

fn moving_average(x: &[f64], width: usize) -> Vec<f64> {
    let half = width / 2;
    (0..x.len())
        .map(|i| {
            let lo = i.saturating_sub(half);
            let hi = (i + half + 1).min(x.len());
            x[lo..hi].iter().sum::<f64>() / (hi - lo) as f64
        })
        .collect()
}

/// Lag of the first plateau: the first lag from which the smoothed curve's
/// relative change stays below `plateau_tol` for `plateau_len` consecutive
/// steps. Falls back to the first local minimum, then to the last lag.
pub fn first_plateau(curve: &[f64], cfg: &AmiConfig) -> usize {
    let s = moving_average(curve, cfg.smooth.max(1));
    let rel: Vec<f64> = s
        .windows(2)
        .map(|w| (w[1] - w[0]).abs() / w[0].abs().max(1e-12))
        .collect();
    let len = cfg.plateau_len.max(1);
    if let Some(k) = (0..rel.len().saturating_sub(len - 1))
        .find(|&k| rel[k..k + len].iter().all(|&r| r < cfg.plateau_tol))
    {
        return k + 1;
    }
    if let Some(k) = (1..curve.len().saturating_sub(1))
        .find(|&k| curve[k] < curve[k - 1] && curve[k] <= curve[k + 1])
    {
        return k + 1;
    }
    curve.len()
}

/// Average mutual information for lags `1..=max_lag` and the first-plateau lag.
pub fn ami<T: Real>(series: &[T], max_lag: usize, cfg: &AmiConfig) -> Result<AmiResult> {
    let needed = 4 * max_lag.max(1);
    if max_lag == 0 || series.len() < needed {
        return Err(Error::SeriesTooShort {
            len: series.len(),
            needed,
        });
    }
    let (x, _) = rescale_unit(series);
    let curve: Vec<f64> = (1..=max_lag)
        .into_par_iter()
        .map(|k| mutual_information(&x[..x.len() - k], &x[k..], cfg.bins))
        .collect();
    let tau = first_plateau(&curve, cfg);
    Ok(AmiResult { curve, tau })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FnnConfig {
    /// Distance-ratio threshold for the added coordinate.
    pub rtol: f64,
    /// Attractor-size threshold relative to the series standard deviation.
    pub atol: f64,
    /// Selected dimension is the first with a false fraction below this.
    pub threshold: f64,
}

impl Default for FnnConfig {
    fn default() -> Self {
        Self {
            rtol: 15.0,
            atol: 2.0,
            threshold: 0.01,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct FnnResult {
    /// `fractions[m - 1]` is the false-neighbour fraction in dimension `m`.
    pub fractions: Vec<f64>,
    pub m: Option<usize>,
}

/// False-nearest-neighbour fractions for `m = 1..=max_m` (Kennel criteria).
pub fn fnn<T: Real>(series: &[T], tau: usize, max_m: usize, cfg: &FnnConfig) -> Result<FnnResult> {
    let needed = max_m * tau + 2;
    if tau == 0 || max_m == 0 || series.len() < needed {
        return Err(Error::SeriesTooShort {
            len: series.len(),
            needed,
        });
    }
    let x: Vec<f64> = series.iter().map(|v| v.as_f64()).collect();
    let n = x.len() as f64;
    let mean = x.iter().sum::<f64>() / n;
    let ra = (x.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n).sqrt();

    let mut fractions = Vec::with_capacity(max_m);
    for m in 1..=max_m {
        // Points that also exist in dimension m + 1.
        let count = x.len() - m * tau;
        let coord = |i: usize, d: usize| x[i + d * tau];
        let flags: Vec<bool> = (0..count)
            .into_par_iter()
            .map(|i| {
                let mut best = (usize::MAX, f64::INFINITY);
                for j in 0..count {
                    if j == i {
                        continue;
                    }
                    let d2: f64 = (0..m).map(|d| (coord(i, d) - coord(j, d)).powi(2)).sum();
                    if d2 < best.1 {
                        best = (j, d2);
                    }
                }
                let (j, r2) = best;
                let extra = (coord(i, m) - coord(j, m)).abs();
                let r = r2.sqrt();
                let first = if r > 0.0 {
                    extra / r > cfg.rtol
                } else {
                    extra > 0.0
                };
                let second = ra > 0.0 && (r2 + extra * extra).sqrt() / ra > cfg.atol;
                first || second
            })
            .collect();
        fractions.push(flags.iter().filter(|&&f| f).count() as f64 / count as f64);
    }
    let m = fractions
        .iter()
        .position(|&f| f < cfg.threshold)
        .map(|i| i + 1);
    Ok(FnnResult { fractions, m })
}

/// Delay-embedded points stored row-major.
#[derive(Clone, Debug, PartialEq)]
pub struct Trajectory<T = f64> {
    dim: usize,
    data: Vec<T>,
}

impl<T: Real> Trajectory<T> {
    pub fn from_points(dim: usize, data: Vec<T>) -> Result<Self> {
        if dim == 0 || data.len() % dim != 0 {
            return Err(Error::InvalidParams(format!(
                "{} values cannot form points of dimension {dim}",
                data.len()
            )));
        }
        Ok(Self { dim, data })
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn len(&self) -> usize {
        self.data.len() / self.dim
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn point(&self, i: usize) -> &[T] {
        &self.data[i * self.dim..(i + 1) * self.dim]
    }

    pub fn points(&self) -> impl Iterator<Item = &[T]> {
        self.data.chunks_exact(self.dim)
    }
}

/// `point_i = (x_i, x_{i+tau}, ..., x_{i+(m-1)tau})`.
pub fn embed<T: Real>(series: &[T], params: &EmbeddingParams) -> Result<Trajectory<T>> {
    params.validate()?;
    let span = params.span();
    if series.len() <= span {
        return Err(Error::SeriesTooShort {
            len: series.len(),
            needed: span + 1,
        });
    }
    let count = series.len() - span;
    let mut data = Vec::with_capacity(count * params.m);
    for i in 0..count {
        data.extend((0..params.m).map(|d| series[i + d * params.tau]));
    }
    Ok(Trajectory {
        dim: params.m,
        data,
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum RecurrenceMode {
    Auto,
    Cross,
}

/// Boolean recurrence matrix with the threshold that produced it.
#[derive(Clone, Debug, PartialEq)]
pub struct RecurrencePlot {
    rows: usize,
    cols: usize,
    cells: Vec<bool>,
    pub mode: RecurrenceMode,
    /// Cells with `|i - j| < band` are excluded (0 means none).
    pub band: usize,
    pub mean_distance: f64,
    pub epsilon: f64,
}

impl RecurrencePlot {
    /// Build from explicit cells, e.g. for constructed test plots.
    pub fn from_cells(
        rows: usize,
        cols: usize,
        cells: Vec<bool>,
        mode: RecurrenceMode,
        band: usize,
    ) -> Result<Self> {
        if cells.len() != rows * cols || rows == 0 || cols == 0 {
            return Err(Error::InvalidParams(
                "cell count does not match dimensions".into(),
            ));
        }
        let mut plot = Self {
            rows,
            cols,
            cells,
            mode,
            band,
            mean_distance: f64::NAN,
            epsilon: f64::NAN,
        };
        for i in 0..rows {
            for j in 0..cols {
                if plot.excluded(i, j) {
                    plot.cells[i * cols + j] = false;
                }
            }
        }
        Ok(plot)
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    #[inline]
    pub fn get(&self, i: usize, j: usize) -> bool {
        self.cells[i * self.cols + j]
    }

    #[inline]
    pub fn excluded(&self, i: usize, j: usize) -> bool {
        i.abs_diff(j) < self.band
    }

    /// Cells outside the excluded band.
    pub fn eligible(&self) -> usize {
        if self.band == 0 {
            return self.rows * self.cols;
        }
        (0..self.rows)
            .map(|i| {
                let lo = i.saturating_sub(self.band - 1);
                let hi = (i + self.band).min(self.cols);
                self.cols - hi.saturating_sub(lo).min(self.cols)
            })
            .sum()
    }

    pub fn recurrent_count(&self) -> usize {
        self.cells.iter().filter(|&&c| c).count()
    }

    pub fn transpose(&self) -> Self {
        let mut cells = vec![false; self.cells.len()];
        for i in 0..self.rows {
            for j in 0..self.cols {
                cells[j * self.rows + i] = self.get(i, j);
            }
        }
        Self {
            rows: self.cols,
            cols: self.rows,
            cells,
            ..*self
        }
    }

    /// Run-length text: a header line `rows cols mode band epsilon`, then one
    /// line per row of alternating run lengths starting with a (possibly
    /// empty) run of non-recurrent cells.
    pub fn to_rle(&self) -> String {
        let mode = match self.mode {
            RecurrenceMode::Auto => "auto",
            RecurrenceMode::Cross => "cross",
        };
        let mut out = format!(
            "{} {} {mode} {} {}\n",
            self.rows, self.cols, self.band, self.epsilon
        );
        for i in 0..self.rows {
            let row = &self.cells[i * self.cols..(i + 1) * self.cols];
            let mut state = false;
            let mut run = 0usize;
            let mut first = true;
            for &c in row {
                if c == state {
                    run += 1;
                } else {
                    let _ = write!(out, "{}{run}", if first { "" } else { " " });
                    first = false;
                    state = c;
                    run = 1;
                }
            }
            let _ = writeln!(out, "{}{run}", if first { "" } else { " " });
        }
        out
    }

    pub fn from_rle(text: &str) -> Result<Self> {
        let bad = |m: &str| Error::MalformedRecord(format!("recurrence plot: {m}"));
        let mut lines = text.lines();
        let header: Vec<&str> = lines
            .next()
            .ok_or_else(|| bad("empty"))?
            .split_whitespace()
            .collect();
        if header.len() != 5 {
            return Err(bad("header must be 'rows cols mode band epsilon'"));
        }
        let rows: usize = header[0].parse().map_err(|_| bad("rows"))?;
        let cols: usize = header[1].parse().map_err(|_| bad("cols"))?;
        let mode = match header[2] {
            "auto" => RecurrenceMode::Auto,
            "cross" => RecurrenceMode::Cross,
            _ => return Err(bad("mode")),
        };
        let band: usize = header[3].parse().map_err(|_| bad("band"))?;
        let epsilon: f64 = header[4].parse().map_err(|_| bad("epsilon"))?;
        let mut cells = Vec::with_capacity(rows * cols);
        for _ in 0..rows {
            let line = lines.next().ok_or_else(|| bad("missing row"))?;
            let mut state = false;
            let start = cells.len();
            for tok in line.split_whitespace() {
                let run: usize = tok.parse().map_err(|_| bad("run length"))?;
                cells.extend(std::iter::repeat_n(state, run));
                state = !state;
            }
            if cells.len() - start != cols {
                return Err(bad("row length mismatch"));
            }
        }
        let mut plot = Self::from_cells(rows, cols, cells, mode, band)?;
        plot.epsilon = epsilon;
        Ok(plot)
    }
}

#[inline]
fn euclidean<T: Real>(a: &[T], b: &[T]) -> f64 {
    a.iter()
        .zip(b)
        .map(|(&u, &v)| {
            let d = (u - v).as_f64();
            d * d
        })
        .sum::<f64>()
        .sqrt()
}

/// Threshold the pairwise distances between two trajectories (auto mode
/// when `b` is `None`). The mean distance is taken over the eligible cells.
pub fn recurrence_matrix<T: Real>(
    a: &Trajectory<T>,
    b: Option<&Trajectory<T>>,
    cfg: &RqaConfig,
) -> Result<RecurrencePlot> {
    cfg.validate()?;
    let (mode, b) = match b {
        None => (RecurrenceMode::Auto, a),
        Some(b) => (RecurrenceMode::Cross, b),
    };
    if a.is_empty() || b.is_empty() {
        return Err(Error::EmptyTrajectory);
    }
    if a.dim() != b.dim() {
        return Err(Error::InvalidParams(
            "trajectories differ in dimension".into(),
        ));
    }
    let band = match mode {
        RecurrenceMode::Auto => cfg.theiler,
        RecurrenceMode::Cross if cfg.cross_theiler => cfg.theiler,
        RecurrenceMode::Cross => 0,
    };
    let (rows, cols) = (a.len(), b.len());
    let excluded = |i: usize, j: usize| i.abs_diff(j) < band;

    // Row sums are combined in row order, so the mean is independent of how
    // rows are scheduled across threads.
    let row_sums: Vec<(f64, usize)> = (0..rows)
        .into_par_iter()
        .map(|i| {
            let pi = a.point(i);
            let mut s = 0.0;
            let mut n = 0usize;
            for j in 0..cols {
                if !excluded(i, j) {
                    s += euclidean(pi, b.point(j));
                    n += 1;
                }
            }
            (s, n)
        })
        .collect();
    let (total, count) = row_sums
        .iter()
        .fold((0.0, 0usize), |(s, n), &(rs, rn)| (s + rs, n + rn));
    let mean_distance = if count > 0 { total / count as f64 } else { 0.0 };
    let epsilon = cfg.radius_frac * mean_distance;

    let mut cells = vec![false; rows * cols];
    cells.par_chunks_mut(cols).enumerate().for_each(|(i, row)| {
        let pi = a.point(i);
        for (j, c) in row.iter_mut().enumerate() {
            *c = !excluded(i, j) && euclidean(pi, b.point(j)) <= epsilon;
        }
    });
    Ok(RecurrencePlot {
        rows,
        cols,
        cells,
        mode,
        band,
        mean_distance,
        epsilon,
    })
}

pub const RQA_METRIC_NAMES: [&str; 11] = [
    "rr",
    "det",
    "l_mean",
    "l_sd",
    "entropy",
    "complexity",
    "divergence",
    "trend",
    "lam",
    "tt",
    "vmax",
];

#[derive(Clone, Copy, Debug, PartialEq, Default, Serialize, Deserialize)]
pub struct RqaMetrics {
    pub rr: f64,
    pub det: f64,
    pub l_mean: f64,
    pub l_sd: f64,
    pub entropy: f64,
    pub complexity: f64,
    pub divergence: f64,
    pub trend: f64,
    pub lam: f64,
    pub tt: f64,
    pub vmax: usize,
    pub lmax: usize,
    pub recurrent: usize,
    /// False when there was no diagonal line, so `1 / lmax` is undefined.
    pub divergence_defined: bool,
}

impl RqaMetrics {
    /// The eleven exported measures in [`RQA_METRIC_NAMES`] order.
    pub fn to_array(&self) -> [f64; 11] {
        [
            self.rr,
            self.det,
            self.l_mean,
            self.l_sd,
            self.entropy,
            self.complexity,
            self.divergence,
            self.trend,
            self.lam,
            self.tt,
            self.vmax as f64,
        ]
    }
}

/// Lines of length `>= min` in a histogram indexed by length.
struct LineStats {
    points: usize,
    lines: usize,
    mean: f64,
    sd: f64,
    entropy: f64,
    distinct: usize,
    longest: usize,
}

fn line_stats(hist: &[usize], min: usize) -> LineStats {
    let longest = hist.iter().rposition(|&c| c > 0).unwrap_or(0);
    let mut points = 0usize;
    let mut lines = 0usize;
    let mut distinct = 0usize;
    for (l, &c) in hist.iter().enumerate().skip(min) {
        points += l * c;
        lines += c;
        distinct += usize::from(c > 0);
    }
    if lines == 0 {
        return LineStats {
            points,
            lines,
            mean: 0.0,
            sd: 0.0,
            entropy: 0.0,
            distinct,
            longest,
        };
    }
    let mean = points as f64 / lines as f64;
    let mut ss = 0.0;
    let mut entropy = 0.0;
    for (l, &c) in hist.iter().enumerate().skip(min) {
        if c == 0 {
            continue;
        }
        ss += c as f64 * (l as f64 - mean).powi(2);
        let p = c as f64 / lines as f64;
        entropy -= p * p.log2();
    }
    LineStats {
        points,
        lines,
        mean,
        sd: (ss / lines as f64).sqrt(),
        entropy,
        distinct,
        longest,
    }
}

/// Least-squares slope of `ys` against `xs`; 0 with fewer than two points.
pub(crate) fn ls_slope(xs: &[f64], ys: &[f64]) -> f64 {
    if xs.len() < 2 {
        return 0.0;
    }
    let n = xs.len() as f64;
    let mx = xs.iter().sum::<f64>() / n;
    let my = ys.iter().sum::<f64>() / n;
    let sxy: f64 = xs.iter().zip(ys).map(|(x, y)| (x - mx) * (y - my)).sum();
    let sxx: f64 = xs.iter().map(|x| (x - mx).powi(2)).sum();
    if sxx > 0.0 {
        sxy / sxx
    } else {
        0.0
    }
}

/// Offsets `o = |j - i|` entering the trend fit, and the density of each.
pub(crate) fn trend_range(
    rows: usize,
    cols: usize,
    band: usize,
    l_min: usize,
) -> std::ops::RangeInclusive<usize> {
    let hi = rows.min(cols).saturating_sub(2 * l_min);
    band..=hi
}

/// Number of cells on diagonal `d = j - i` of a `rows x cols` matrix.
pub(crate) fn diagonal_len(rows: usize, cols: usize, d: isize) -> usize {
    let lo = (-d).max(0);
    let hi = (rows as isize).min(cols as isize - d);
    (hi - lo).max(0) as usize
}

/// All measures of a recurrence plot from one row-major sweep that tracks
/// the running diagonal and vertical line length at every position.
pub fn rqa_metrics(plot: &RecurrencePlot, cfg: &RqaConfig) -> RqaMetrics {
    let (rows, cols) = (plot.rows, plot.cols);
    let ndiag = rows + cols - 1;
    let mut diag_run = vec![0usize; ndiag];
    let mut diag_count = vec![0usize; ndiag];
    let mut vert_run = vec![0usize; cols];
    let mut diag_hist = vec![0usize; rows.min(cols) + 1];
    let mut vert_hist = vec![0usize; rows + 1];
    let mut recurrent = 0usize;

    for i in 0..rows {
        let row = &plot.cells[i * cols..(i + 1) * cols];
        for (j, &c) in row.iter().enumerate() {
            let k = j + rows - 1 - i;
            if c {
                recurrent += 1;
                diag_run[k] += 1;
                diag_count[k] += 1;
                vert_run[j] += 1;
            } else {
                if diag_run[k] > 0 {
                    diag_hist[diag_run[k]] += 1;
                    diag_run[k] = 0;
                }
                if vert_run[j] > 0 {
                    vert_hist[vert_run[j]] += 1;
                    vert_run[j] = 0;
                }
            }
        }
    }
    for run in diag_run.into_iter().filter(|&r| r > 0) {
        diag_hist[run] += 1;
    }
    for run in vert_run.into_iter().filter(|&r| r > 0) {
        vert_hist[run] += 1;
    }

    let rr = recurrent as f64 / plot.eligible().max(1) as f64;
    let diag = line_stats(&diag_hist, cfg.l_min);
    let vert = line_stats(&vert_hist, cfg.v_min);
    let frac = |p: usize| {
        if recurrent > 0 {
            p as f64 / recurrent as f64
        } else {
            0.0
        }
    };

    let complexity = if diag.lines == 0 {
        0.0
    } else {
        let base = match cfg.complexity {
            ComplexityBase::RealizableLengths => (diag.longest - cfg.l_min + 1) as f64,
            ComplexityBase::ObservedLengths => diag.distinct as f64,
        };
        base.log2() - diag.entropy
    };

    let (mut xs, mut ys) = (Vec::new(), Vec::new());
    for o in trend_range(rows, cols, plot.band, cfg.l_min) {
        let (mut hits, mut cells) = (0usize, 0usize);
        let offsets: &[isize] = if o == 0 {
            &[0]
        } else {
            &[o as isize, -(o as isize)]
        };
        for &d in offsets {
            let len = diagonal_len(rows, cols, d);
            if len == 0 {
                continue;
            }
            cells += len;
            hits += diag_count[(d + rows as isize - 1) as usize];
        }
        if cells > 0 {
            xs.push(o as f64);
            ys.push(hits as f64 / cells as f64);
        }
    }

    RqaMetrics {
        rr,
        det: frac(diag.points),
        l_mean: diag.mean,
        l_sd: diag.sd,
        entropy: diag.entropy,
        complexity,
        divergence: if diag.longest > 0 {
            1.0 / diag.longest as f64
        } else {
            0.0
        },
        trend: ls_slope(&xs, &ys),
        lam: frac(vert.points),
        tt: vert.mean,
        vmax: vert.longest,
        lmax: diag.longest,
        recurrent,
        divergence_defined: diag.longest > 0,
    }
}

fn warn_short(len: usize) {
    static WARNED: std::sync::Once = std::sync::Once::new();
    if len < STABLE_WINDOW {
        WARNED.call_once(|| {
            log::warn!("recurrence window of {len} samples is below the {STABLE_WINDOW}-sample stability guideline");
        });
        log::debug!("recurrence window of {len} samples");
    }
}

/// Rescale, embed and quantify the auto-recurrence of one series.
pub fn auto_rqa<T: Real>(
    series: &[T],
    params: &EmbeddingParams,
    cfg: &RqaConfig,
) -> Result<RqaMetrics> {
    warn_short(series.len());
    let (x, _) = rescale_unit(series);
    let traj = embed(&x, params)?;
    let plot = recurrence_matrix(&traj, None, cfg)?;
    Ok(rqa_metrics(&plot, cfg))
}

/// Cross-recurrence of two series, each rescaled independently.
pub fn crqa<T: Real>(
    a: &[T],
    b: &[T],
    params: &EmbeddingParams,
    cfg: &RqaConfig,
) -> Result<RqaMetrics> {
    Ok(rqa_metrics(&cross_plot(a, b, params, cfg)?, cfg))
}

pub fn cross_plot<T: Real>(
    a: &[T],
    b: &[T],
    params: &EmbeddingParams,
    cfg: &RqaConfig,
) -> Result<RecurrencePlot> {
    warn_short(a.len().min(b.len()));
    let (xa, _) = rescale_unit(a);
    let (xb, _) = rescale_unit(b);
    let ta = embed(&xa, params)?;
    let tb = embed(&xb, params)?;
    recurrence_matrix(&ta, Some(&tb), cfg)
}
