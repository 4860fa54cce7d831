//! Detrended fluctuation analysis and the power-law fit used as a stopping
//! signal.

use serde::{Deserialize, Serialize};

use crate::error::{Result, UnlearnError};

/// Smallest window in the ladder.
pub const MIN_WINDOW: usize = 4;
/// Shortest series that yields at least two windows.
pub const MIN_DFA_LEN: usize = 8 * MIN_WINDOW;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DfaResult {
    pub alpha: f64,
    /// Set when some window has zero fluctuation, e.g. a constant series.
    pub degenerate: bool,
    /// `(w, F(w))` pairs.
    pub windows: Vec<(usize, f64)>,
}

/// Slope and intercept of the least-squares line through `(x, y)`.
fn line_fit(x: &[f64], y: &[f64]) -> (f64, f64) {
    let n = x.len() as f64;
    let mx = x.iter().sum::<f64>() / n;
    let my = y.iter().sum::<f64>() / n;
    let sxx: f64 = x.iter().map(|v| (v - mx) * (v - mx)).sum();
    let sxy: f64 = x.iter().zip(y).map(|(a, b)| (a - mx) * (b - my)).sum();
    let slope = if sxx > 0.0 { sxy / sxx } else { 0.0 };
    (slope, my - slope * mx)
}

/// First-order DFA over windows `4, 8, 16, …` up to a quarter of the length.
pub fn dfa_exponent(series: &[f64]) -> Result<DfaResult> {
    if series.len() < MIN_DFA_LEN {
        return Err(UnlearnError::InsufficientSeries { len: series.len(), min: MIN_DFA_LEN });
    }
    if series.iter().any(|v| !v.is_finite()) {
        return Err(UnlearnError::InvalidMeasurement("series contains non-finite values".into()));
    }
    let mean = series.iter().sum::<f64>() / series.len() as f64;
    let mut profile = Vec::with_capacity(series.len());
    let mut acc = 0.0;
    for v in series {
        acc += v - mean;
        profile.push(acc);
    }
    let mut windows = Vec::new();
    let mut w = MIN_WINDOW;
    while w <= series.len() / 4 {
        let xs: Vec<f64> = (0..w).map(|i| i as f64).collect();
        // segments counted from both ends so no tail is ignored
        let per_side = series.len() / w;
        let tail = series.len() - per_side * w;
        let starts = (0..per_side).map(|s| s * w).chain((0..per_side).map(|s| tail + s * w));
        let segments = 2 * per_side;
        let mut sq = 0.0;
        for start in starts {
            let seg = &profile[start..start + w];
            let (slope, icpt) = line_fit(&xs, seg);
            sq += seg.iter().zip(&xs).map(|(y, x)| (y - slope * x - icpt).powi(2)).sum::<f64>();
        }
        windows.push((w, (sq / (segments * w) as f64).sqrt()));
        w *= 2;
    }
    // relative to the profile scale, so a constant series reads as zero
    let scale = profile.iter().fold(0.0_f64, |m, v| m.max(v.abs())).max(f64::MIN_POSITIVE);
    if windows.iter().any(|&(_, f)| f <= 1e-12 * scale) {
        return Ok(DfaResult { alpha: 0.0, degenerate: true, windows });
    }
    let lx: Vec<f64> = windows.iter().map(|&(w, _)| (w as f64).ln()).collect();
    let ly: Vec<f64> = windows.iter().map(|&(_, f)| f.ln()).collect();
    Ok(DfaResult { alpha: line_fit(&lx, &ly).0, degenerate: false, windows })
}

/// Where the exponent of a [`PowerLawFit`] came from.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum AlphaSource {
    Dfa,
    LeastSquares,
}

/// `Y(x) = a·x^{−α} + b`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct PowerLawFit {
    pub a: f64,
    pub alpha: f64,
    pub b: f64,
    pub source: AlphaSource,
}

impl PowerLawFit {
    pub fn value(&self, x: f64) -> f64 {
        self.a * x.powf(-self.alpha) + self.b
    }

    pub fn derivative(&self, x: f64) -> f64 {
        -self.a * self.alpha * x.powf(-self.alpha - 1.0)
    }
}

const RIDGE: f64 = 1e-8;
const ALPHA_MAX: f64 = 8.0;
const GRID_STEPS: usize = 160;

/// Best `(a, b)` for a fixed `α`, with the residual sum of squares.
pub fn fit_amplitude(x: &[f64], y: &[f64], alpha: f64) -> (f64, f64, f64) {
    let u: Vec<f64> = x.iter().map(|v| v.powf(-alpha)).collect();
    let n = x.len() as f64;
    let (su, suu) = (u.iter().sum::<f64>(), u.iter().map(|v| v * v).sum::<f64>());
    let (sy, suy) = (y.iter().sum::<f64>(), u.iter().zip(y).map(|(a, b)| a * b).sum::<f64>());
    // normal equations [[suu, su], [su, n]]·(a, b) = (suy, sy) with a ridge
    let (m11, m12, m22) = (suu + RIDGE, su, n + RIDGE);
    let det = m11 * m22 - m12 * m12;
    let a = (m22 * suy - m12 * sy) / det;
    let b = (m11 * sy - m12 * suy) / det;
    let rss = u.iter().zip(y).map(|(ui, yi)| (a * ui + b - yi).powi(2)).sum();
    (a, b, rss)
}

/// Least-squares fit of all three parameters with `α ∈ [0, 8]`: a grid over
/// `α` followed by golden-section refinement around the best grid point.
pub fn fit_power_law(x: &[f64], y: &[f64]) -> PowerLawFit {
    let rss = |alpha: f64| fit_amplitude(x, y, alpha).2;
    let step = ALPHA_MAX / GRID_STEPS as f64;
    let (mut best, mut best_rss) = (0.0, rss(0.0));
    for i in 1..=GRID_STEPS {
        let alpha = i as f64 * ALPHA_MAX / GRID_STEPS as f64;
        let r = rss(alpha);
        if r < best_rss {
            (best, best_rss) = (alpha, r);
        }
    }
    let (mut lo, mut hi) = ((best - step).max(0.0), (best + step).min(ALPHA_MAX));
    let phi = (5f64.sqrt() - 1.0) / 2.0;
    for _ in 0..60 {
        let (m1, m2) = (hi - phi * (hi - lo), lo + phi * (hi - lo));
        if rss(m1) <= rss(m2) {
            hi = m2;
        } else {
            lo = m1;
        }
    }
    let refined = (lo + hi) / 2.0;
    if rss(refined) < best_rss {
        best = refined;
    }
    let (a, b, _) = fit_amplitude(x, y, best);
    PowerLawFit { a, alpha: best, b, source: AlphaSource::LeastSquares }
}
