//! Closed-form electromagnetic stand-in.
//!
//! The oracle reduces a design to five scalar features and maps them onto
//! three single-resonance spectra over 2–3 GHz:
//!
//! ```text
//! f_r   = clamp(2.45 + 0.2 (m_x + m_y - 1) + 0.005 fine, 2.1, 2.9)   GHz
//! Q     = 20 + 30 spread,          depth = 15 + 10 (1 - asym)         dB
//! RL(f) = -depth / (1 + ((f - f_r) / (f_r / 2Q))^2)
//! G(f)  = 3.4 + 6 (1 - 0.3 asym) / (1 + ((f - f_r) / 0.15)^2)        dBi
//! f_ar  = f_r + 0.05 (m_x - m_y),  ar_min = 0.3 + 7 asym
//! AR(f) = ar_min + 25 ((f - f_ar) / 0.2)^2                            dB
//! ```
//!
//! A diagonally balanced design therefore has near-circular polarisation and
//! the full 9.4 dBi peak, while a one-sided design behaves like the smooth
//! loop: high gain, AR above 5 dB.

use serde::{Deserialize, Serialize};

use crate::design::{CellGeometry, UnitCellDesign};
use crate::error::{Error, Result};

/// Identifies the closed forms above. Stored in every dataset and model file.
pub const ORACLE_VERSION: &str = "fpc-synthetic-oracle/1";

pub const SPECTRUM_POINTS: usize = 101;
pub const RESPONSE_DIM: usize = 3 * SPECTRUM_POINTS;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FrequencyGrid {
    pub f_start_ghz: f64,
    pub f_stop_ghz: f64,
    pub points: usize,
}

impl Default for FrequencyGrid {
    fn default() -> Self {
        FrequencyGrid {
            f_start_ghz: 2.0,
            f_stop_ghz: 3.0,
            points: SPECTRUM_POINTS,
        }
    }
}

impl FrequencyGrid {
    pub fn new(f_start_ghz: f64, f_stop_ghz: f64, points: usize) -> Result<Self> {
        if points < 2 || !(f_stop_ghz > f_start_ghz) {
            return Err(Error::InvalidArgument(format!(
                "frequency grid [{f_start_ghz}, {f_stop_ghz}] with {points} points"
            )));
        }
        Ok(FrequencyGrid {
            f_start_ghz,
            f_stop_ghz,
            points,
        })
    }

    pub fn step_ghz(&self) -> f64 {
        (self.f_stop_ghz - self.f_start_ghz) / (self.points - 1) as f64
    }

    /// Exact at both ends.
    pub fn freq(&self, i: usize) -> f64 {
        if i + 1 == self.points {
            self.f_stop_ghz
        } else {
            self.f_start_ghz + i as f64 * self.step_ghz()
        }
    }

    pub fn frequencies(&self) -> Vec<f64> {
        (0..self.points).map(|i| self.freq(i)).collect()
    }
}

/// Three spectra sampled on a [`FrequencyGrid`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AntennaResponse {
    pub axial_ratio_db: Vec<f64>,
    pub return_loss_db: Vec<f64>,
    pub gain_dbi: Vec<f64>,
}

impl AntennaResponse {
    pub fn check(&self) -> Result<()> {
        let n = self.axial_ratio_db.len();
        if self.return_loss_db.len() != n || self.gain_dbi.len() != n {
            return Err(Error::Shape("spectra of unequal length".into()));
        }
        let all = self
            .axial_ratio_db
            .iter()
            .chain(&self.return_loss_db)
            .chain(&self.gain_dbi);
        if !all.clone().all(|v| v.is_finite()) {
            return Err(Error::InvalidArgument("non-finite spectrum value".into()));
        }
        Ok(())
    }

    /// Concatenation (AR, RL, gain).
    pub fn to_vector(&self) -> ResponseVector {
        let mut v = Vec::with_capacity(3 * self.axial_ratio_db.len());
        v.extend_from_slice(&self.axial_ratio_db);
        v.extend_from_slice(&self.return_loss_db);
        v.extend_from_slice(&self.gain_dbi);
        ResponseVector(v)
    }

    pub fn from_vector(v: &ResponseVector) -> Self {
        let n = v.0.len() / 3;
        AntennaResponse {
            axial_ratio_db: v.0[..n].to_vec(),
            return_loss_db: v.0[n..2 * n].to_vec(),
            gain_dbi: v.0[2 * n..].to_vec(),
        }
    }
}

/// The three segments of a flattened response.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Segment {
    AxialRatio,
    ReturnLoss,
    Gain,
}

impl Segment {
    pub const ALL: [Segment; 3] = [Segment::AxialRatio, Segment::ReturnLoss, Segment::Gain];

    pub fn range(self) -> std::ops::Range<usize> {
        let n = SPECTRUM_POINTS;
        match self {
            Segment::AxialRatio => 0..n,
            Segment::ReturnLoss => n..2 * n,
            Segment::Gain => 2 * n..3 * n,
        }
    }

    pub fn key(self) -> &'static str {
        match self {
            Segment::AxialRatio => "axial_ratio",
            Segment::ReturnLoss => "return_loss",
            Segment::Gain => "gain",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ResponseVector(pub Vec<f64>);

impl ResponseVector {
    pub fn values(&self) -> &[f64] {
        &self.0
    }

    pub fn segment(&self, s: Segment) -> &[f64] {
        &self.0[s.range()]
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct OracleFeatures {
    pub m_x: f64,
    pub m_y: f64,
    pub asym: f64,
    pub spread: f64,
    pub fine: f64,
}

pub fn oracle_features(design: &UnitCellDesign, geometry: &CellGeometry) -> OracleFeatures {
    use std::f64::consts::PI;

    let bricks = design.bricks();
    let n = bricks.len() as f64;
    let side = geometry.cell_side_mm;
    let m_x = bricks.iter().map(|b| b.x_mm).sum::<f64>() / n / side;
    let m_y = bricks.iter().map(|b| b.y_mm).sum::<f64>() / n / side;

    let above = bricks.iter().filter(|b| b.y_mm > b.x_mm).count() as f64;
    let below = bricks.iter().filter(|b| b.y_mm < b.x_mm).count() as f64;
    let asym = (above - below).abs() / n;

    let mean_off = bricks.iter().map(|b| b.offset_index as f64).sum::<f64>() / n;
    let var_off = bricks
        .iter()
        .map(|b| (b.offset_index as f64 - mean_off).powi(2))
        .sum::<f64>()
        / n;
    let spread = (var_off.sqrt() / geometry.slots_per_edge() as f64).clamp(0.0, 1.0);

    let fine = bricks
        .iter()
        .map(|b| (4.0 * PI * b.x_mm / side).sin() * (4.0 * PI * b.y_mm / side).sin())
        .sum::<f64>()
        / n;

    OracleFeatures {
        m_x,
        m_y,
        asym,
        spread,
        fine,
    }
}

/// Scalar resonance parameters implied by a feature set.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ResonanceParams {
    pub f_r_ghz: f64,
    pub q: f64,
    pub depth_db: f64,
    pub peak_gain_dbi: f64,
    pub f_ar_ghz: f64,
    pub ar_min_db: f64,
}

impl ResonanceParams {
    pub fn from_features(f: &OracleFeatures) -> Self {
        let f_r = (2.45 + 0.2 * (f.m_x + f.m_y - 1.0) + 0.005 * f.fine).clamp(2.1, 2.9);
        ResonanceParams {
            f_r_ghz: f_r,
            q: 20.0 + 30.0 * f.spread,
            depth_db: 15.0 + 10.0 * (1.0 - f.asym),
            peak_gain_dbi: 3.4 + 6.0 * (1.0 - 0.3 * f.asym),
            f_ar_ghz: f_r + 0.05 * (f.m_x - f.m_y),
            ar_min_db: 0.3 + 7.0 * f.asym,
        }
    }
}

/// Spectra for a feature set. Split out from [`oracle_evaluate`] so the
/// closed forms can be exercised directly.
pub fn evaluate_features(f: &OracleFeatures, grid: &FrequencyGrid) -> AntennaResponse {
    let p = ResonanceParams::from_features(f);
    let half_width = p.f_r_ghz / (2.0 * p.q);
    let peak = p.peak_gain_dbi - 3.4;

    let mut out = AntennaResponse {
        axial_ratio_db: Vec::with_capacity(grid.points),
        return_loss_db: Vec::with_capacity(grid.points),
        gain_dbi: Vec::with_capacity(grid.points),
    };
    for freq in grid.frequencies() {
        let u = (freq - p.f_r_ghz) / half_width;
        out.return_loss_db.push(-p.depth_db / (1.0 + u * u));
        let g = (freq - p.f_r_ghz) / 0.15;
        out.gain_dbi.push(3.4 + peak / (1.0 + g * g));
        let a = (freq - p.f_ar_ghz) / 0.2;
        out.axial_ratio_db.push(p.ar_min_db + 25.0 * a * a);
    }
    out
}

pub fn oracle_evaluate(
    design: &UnitCellDesign,
    geometry: &CellGeometry,
    grid: &FrequencyGrid,
) -> AntennaResponse {
    evaluate_features(&oracle_features(design, geometry), grid)
}

/// Band-edge thresholds for metric extraction.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MetricThresholds {
    /// Return loss at or below this level counts as matched.
    pub zbw_db: f64,
    /// Axial ratio at or below this level counts as circularly polarised.
    pub ar_db: f64,
}

impl Default for MetricThresholds {
    fn default() -> Self {
        MetricThresholds {
            zbw_db: -10.0,
            ar_db: 5.0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DerivedMetrics {
    pub f_res_ghz: f64,
    pub gain_at_res_dbi: f64,
    pub zbw_mhz: f64,
    pub ar5bw_mhz: f64,
    pub ar_min_db: f64,
}

fn argmin(v: &[f64]) -> usize {
    v.iter()
        .enumerate()
        .fold(0, |best, (i, &x)| if x < v[best] { i } else { best })
}

/// Width of the contiguous run around `centre` where `v <= threshold`, with
/// linearly interpolated edges, clipped to the grid. Returns GHz.
fn span_below(v: &[f64], grid: &FrequencyGrid, centre: usize, threshold: f64) -> f64 {
    if !(v[centre] <= threshold) {
        return 0.0;
    }
    let crossing = |inside: usize, outside: usize| {
        let (fi, fo) = (grid.freq(inside), grid.freq(outside));
        let t = (threshold - v[inside]) / (v[outside] - v[inside]);
        fi + t * (fo - fi)
    };
    let mut lo = centre;
    while lo > 0 && v[lo - 1] <= threshold {
        lo -= 1;
    }
    let f_lo = if lo == 0 { grid.freq(0) } else { crossing(lo, lo - 1) };
    let mut hi = centre;
    while hi + 1 < v.len() && v[hi + 1] <= threshold {
        hi += 1;
    }
    let f_hi = if hi + 1 == v.len() {
        grid.freq(hi)
    } else {
        crossing(hi, hi + 1)
    };
    f_hi - f_lo
}

pub fn extract_metrics_with(
    response: &AntennaResponse,
    grid: &FrequencyGrid,
    thresholds: &MetricThresholds,
) -> DerivedMetrics {
    let rl = &response.return_loss_db;
    let ar = &response.axial_ratio_db;
    let res = argmin(rl);
    let ar_at = argmin(ar);
    DerivedMetrics {
        f_res_ghz: grid.freq(res),
        gain_at_res_dbi: response.gain_dbi[res],
        zbw_mhz: 1000.0 * span_below(rl, grid, res, thresholds.zbw_db),
        ar5bw_mhz: 1000.0 * span_below(ar, grid, ar_at, thresholds.ar_db),
        ar_min_db: ar[ar_at],
    }
}

pub fn extract_metrics(response: &AntennaResponse, grid: &FrequencyGrid) -> DerivedMetrics {
    extract_metrics_with(response, grid, &MetricThresholds::default())
}
