//! Candidate screening: sample a pool, predict through a surrogate, score,
//! rank, and check the winners against the oracle.

use std::collections::BTreeMap;
use std::io::Write;
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::design::{decode_design, encode_design, sample_design, validate_design, CellGeometry, DesignVector};
use crate::error::{Error, Result};
use crate::oracle::{
    extract_metrics, oracle_evaluate, AntennaResponse, DerivedMetrics, FrequencyGrid, ResponseVector, ORACLE_VERSION,
};
use crate::seed;
use crate::surrogate::Surrogate;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ScoreWeights {
    /// Per MHz of impedance bandwidth.
    pub w_zbw: f64,
    /// Per MHz of 5 dB axial-ratio bandwidth.
    pub w_ar5bw: f64,
    /// Penalty per dB of minimum axial ratio.
    pub w_ar: f64,
    /// Per dBi of gain at resonance.
    pub w_gain: f64,
}

impl Default for ScoreWeights {
    fn default() -> Self {
        ScoreWeights {
            w_zbw: 1.0,
            w_ar5bw: 1.0,
            w_ar: 50.0,
            w_gain: 10.0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ScreeningCriteria {
    pub min_zbw_mhz: f64,
    pub max_ar_min_db: f64,
    pub weights: ScoreWeights,
}

impl Default for ScreeningCriteria {
    fn default() -> Self {
        ScreeningCriteria {
            min_zbw_mhz: 100.0,
            max_ar_min_db: 3.0,
            weights: ScoreWeights::default(),
        }
    }
}

impl ScreeningCriteria {
    pub fn check(&self) -> Result<()> {
        let w = &self.weights;
        let all = [self.min_zbw_mhz, self.max_ar_min_db, w.w_zbw, w.w_ar5bw, w.w_ar, w.w_gain];
        if all.iter().any(|v| !(*v >= 0.0) || !v.is_finite()) {
            return Err(Error::Config("screening thresholds and weights must be finite and >= 0".into()));
        }
        Ok(())
    }
}

/// Weighted score and feasibility of one candidate. The score is returned
/// even for infeasible candidates; ranking ignores them.
pub fn score_design(m: &DerivedMetrics, c: &ScreeningCriteria) -> (f64, bool) {
    let w = &c.weights;
    let score = w.w_zbw * m.zbw_mhz + w.w_ar5bw * m.ar5bw_mhz - w.w_ar * m.ar_min_db + w.w_gain * m.gain_at_res_dbi;
    let feasible = m.zbw_mhz >= c.min_zbw_mhz && m.ar_min_db <= c.max_ar_min_db;
    (score, feasible)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Candidate {
    pub index: usize,
    pub design: DesignVector,
    pub predicted: DerivedMetrics,
    pub score: f64,
    pub feasible: bool,
}

impl Candidate {
    /// Score used for ranking: −∞ when infeasible.
    pub fn rank_score(&self) -> f64 {
        if self.feasible {
            self.score
        } else {
            f64::NEG_INFINITY
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HistogramBin {
    pub bin_low: f64,
    pub bin_high: f64,
    pub count: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Histogram {
    pub bins: Vec<HistogramBin>,
}

impl Histogram {
    /// Equal-width bins spanning the data; the last bin is closed.
    pub fn build(values: &[f64], bins: usize) -> Self {
        let lo = values.iter().copied().fold(f64::INFINITY, f64::min);
        let hi = values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        if values.is_empty() || bins == 0 {
            return Histogram { bins: Vec::new() };
        }
        let (lo, hi) = if hi > lo { (lo, hi) } else { (lo - 0.5, lo + 0.5) };
        let width = (hi - lo) / bins as f64;
        let mut out: Vec<HistogramBin> = (0..bins)
            .map(|b| HistogramBin {
                bin_low: lo + b as f64 * width,
                bin_high: if b + 1 == bins { hi } else { lo + (b + 1) as f64 * width },
                count: 0,
            })
            .collect();
        for &v in values {
            let b = (((v - lo) / width).floor() as usize).min(bins - 1);
            out[b].count += 1;
        }
        Histogram { bins: out }
    }

    pub fn total(&self) -> usize {
        self.bins.iter().map(|b| b.count).sum()
    }

    pub fn write_csv<W: Write>(&self, mut w: W) -> Result<()> {
        writeln!(w, "bin_low,bin_high,count")?;
        for b in &self.bins {
            writeln!(w, "{},{},{}", b.bin_low, b.bin_high, b.count)?;
        }
        Ok(())
    }
}

pub const HISTOGRAM_BINS: usize = 20;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScreeningReport {
    pub tool_version: String,
    pub oracle_version: String,
    pub pool_seed: u64,
    pub pool_size: usize,
    pub criteria: ScreeningCriteria,
    pub candidates: Vec<Candidate>,
    /// Pool indices of feasible candidates, best first.
    pub ranking: Vec<usize>,
    /// Wall-clock of sampling, prediction and scoring; the only field that
    /// varies between reruns.
    pub timing_ms: f64,
    pub histograms: BTreeMap<String, Histogram>,
    /// FNV-1a of the checkpoint the surrogate came from, when known.
    #[serde(default)]
    pub model_fingerprint: Option<String>,
}

fn metric_columns(cands: &[Candidate]) -> [(&'static str, Vec<f64>); 5] {
    let col = |f: fn(&DerivedMetrics) -> f64| cands.iter().map(|c| f(&c.predicted)).collect::<Vec<_>>();
    [
        ("f_res_ghz", col(|m| m.f_res_ghz)),
        ("gain_at_res_dbi", col(|m| m.gain_at_res_dbi)),
        ("zbw_mhz", col(|m| m.zbw_mhz)),
        ("ar5bw_mhz", col(|m| m.ar5bw_mhz)),
        ("ar_min_db", col(|m| m.ar_min_db)),
    ]
}

/// Descending score, then lower `ar_min`, then lower pool index.
pub fn rank(cands: &[Candidate]) -> Vec<usize> {
    let mut idx: Vec<usize> = cands.iter().filter(|c| c.feasible).map(|c| c.index).collect();
    idx.sort_by(|&a, &b| {
        let (a, b) = (&cands[a], &cands[b]);
        b.score
            .total_cmp(&a.score)
            .then(a.predicted.ar_min_db.total_cmp(&b.predicted.ar_min_db))
            .then(a.index.cmp(&b.index))
    });
    idx
}

/// Pool member `i` is drawn from child seed `i` of the pool stream.
pub fn candidate_pool(geometry: &CellGeometry, n: usize, seed: u64) -> Result<Vec<DesignVector>> {
    let master = seed::tagged_seed(seed, "pool");
    (0..n)
        .map(|i| Ok(encode_design(&sample_design(geometry, seed::child_seed(master, i as u64))?)))
        .collect()
}

pub fn screen_candidates(
    surrogate: &dyn Surrogate,
    geometry: &CellGeometry,
    n: usize,
    seed: u64,
    criteria: &ScreeningCriteria,
) -> Result<ScreeningReport> {
    if surrogate.oracle_version() != ORACLE_VERSION {
        return Err(Error::VersionMismatch {
            expected: ORACLE_VERSION.to_string(),
            found: surrogate.oracle_version().to_string(),
        });
    }
    criteria.check()?;
    if n == 0 {
        return Err(Error::InvalidArgument("candidate pool must be non-empty".into()));
    }
    let grid = FrequencyGrid::default();
    let start = Instant::now();
    let pool = candidate_pool(geometry, n, seed)?;
    let predicted = surrogate.predict(&pool)?;
    let candidates: Vec<Candidate> = pool
        .into_iter()
        .zip(&predicted)
        .enumerate()
        .map(|(index, (design, response))| {
            let metrics = extract_metrics(&AntennaResponse::from_vector(response), &grid);
            let (score, feasible) = score_design(&metrics, criteria);
            Candidate {
                index,
                design,
                predicted: metrics,
                score,
                feasible,
            }
        })
        .collect();
    let ranking = rank(&candidates);
    let timing_ms = start.elapsed().as_secs_f64() * 1e3;
    let histograms = metric_columns(&candidates)
        .into_iter()
        .map(|(name, values)| (name.to_string(), Histogram::build(&values, HISTOGRAM_BINS)))
        .collect();
    Ok(ScreeningReport {
        tool_version: crate::TOOL_VERSION.to_string(),
        oracle_version: surrogate.oracle_version().to_string(),
        pool_seed: seed,
        pool_size: n,
        criteria: *criteria,
        candidates,
        ranking,
        timing_ms,
        histograms,
        model_fingerprint: None,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Selection {
    pub picks: Vec<Candidate>,
    /// Set when fewer than `k` candidates were feasible.
    pub shortfall: Option<String>,
}

pub fn select_optimal(report: &ScreeningReport, k: usize) -> Selection {
    let picks: Vec<Candidate> = report
        .ranking
        .iter()
        .take(k)
        .map(|&i| report.candidates[i].clone())
        .collect();
    let shortfall = (picks.len() < k).then(|| {
        format!(
            "requested {k} designs but only {} of {} candidates are feasible",
            picks.len(),
            report.pool_size
        )
    });
    Selection { picks, shortfall }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MetricDeltas {
    pub f_res_ghz: f64,
    pub gain_at_res_dbi: f64,
    pub zbw_mhz: f64,
    pub ar5bw_mhz: f64,
    pub ar_min_db: f64,
}

impl MetricDeltas {
    pub fn between(a: &DerivedMetrics, b: &DerivedMetrics) -> Self {
        MetricDeltas {
            f_res_ghz: (a.f_res_ghz - b.f_res_ghz).abs(),
            gain_at_res_dbi: (a.gain_at_res_dbi - b.gain_at_res_dbi).abs(),
            zbw_mhz: (a.zbw_mhz - b.zbw_mhz).abs(),
            ar5bw_mhz: (a.ar5bw_mhz - b.ar5bw_mhz).abs(),
            ar_min_db: (a.ar_min_db - b.ar_min_db).abs(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VerificationRow {
    pub index: usize,
    pub predicted: DerivedMetrics,
    pub oracle: DerivedMetrics,
    pub abs_delta: MetricDeltas,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VerificationReport {
    pub tool_version: String,
    pub oracle_version: String,
    pub pool_seed: u64,
    #[serde(default)]
    pub model_fingerprint: Option<String>,
    pub rows: Vec<VerificationRow>,
}

impl VerificationReport {
    pub fn max_delta(&self, f: fn(&MetricDeltas) -> f64) -> f64 {
        self.rows.iter().map(|r| f(&r.abs_delta)).fold(0.0, f64::max)
    }
}

/// Re-evaluates picked designs with the oracle and compares metrics.
pub fn verify_selection(
    report: &ScreeningReport,
    selection: &Selection,
    geometry: &CellGeometry,
    grid: &FrequencyGrid,
) -> Result<VerificationReport> {
    let rows = selection
        .picks
        .iter()
        .map(|c| {
            let design = decode_design(&c.design, geometry)?;
            let violations = validate_design(&design, geometry);
            if let Some(v) = violations.first() {
                return Err(Error::Design(format!("candidate {}: {v}", c.index)));
            }
            let truth: ResponseVector = oracle_evaluate(&design, geometry, grid).to_vector();
            let oracle = extract_metrics(&AntennaResponse::from_vector(&truth), grid);
            Ok(VerificationRow {
                index: c.index,
                predicted: c.predicted,
                oracle,
                abs_delta: MetricDeltas::between(&c.predicted, &oracle),
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(VerificationReport {
        tool_version: crate::TOOL_VERSION.to_string(),
        oracle_version: ORACLE_VERSION.to_string(),
        pool_seed: report.pool_seed,
        model_fingerprint: report.model_fingerprint.clone(),
        rows,
    })
}
