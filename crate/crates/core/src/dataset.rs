//! Labelled (design, response) datasets and the FPCD v1 file format.
//!
//! Binary layout, all integers and floats little-endian:
//!
//! ```text
//! "FPCD" | u32 version=1 | u32 n | u32 design_dim=72 | u32 resp_dim=303
//! n × (72 + 303) f64 records
//! footer: u32 len | oracle version (utf-8) | u64 master seed
//!         | f64 cell_side_mm | f64 brick_size_mm | f64 loop_inset_mm
//! ```
//!
//! The CSV form carries the same footer as trailing `#` comment lines.

use std::io::{BufRead, BufReader, Read, Write};
use std::path::Path;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::checksum::Fnv1a;
use crate::design::{encode_design, normalize_design, sample_design, CellGeometry, DesignVector, DESIGN_DIM};
use crate::nn::Matrix;
use crate::error::{Error, Result};
use crate::oracle::{oracle_evaluate, FrequencyGrid, ResponseVector, ORACLE_VERSION, RESPONSE_DIM, SPECTRUM_POINTS};
use crate::seed;

pub const FPCD_MAGIC: &[u8; 4] = b"FPCD";
pub const FPCD_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq)]
pub struct Entry {
    pub design: DesignVector,
    pub response: ResponseVector,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub entries: Vec<Entry>,
    pub geometry: CellGeometry,
    pub seed: u64,
    pub oracle_version: String,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// FNV-1a over the record payload.
    pub fn fingerprint(&self) -> u64 {
        self.entries
            .iter()
            .fold(Fnv1a::default(), |h, e| {
                h.update_f64s(e.design.values()).update_f64s(e.response.values())
            })
            .finish()
    }

    pub fn require_oracle(&self, version: &str) -> Result<()> {
        if self.oracle_version != version {
            return Err(Error::VersionMismatch {
                expected: version.to_string(),
                found: self.oracle_version.clone(),
            });
        }
        Ok(())
    }

    pub fn subset(&self, indices: &[usize]) -> Dataset {
        Dataset {
            entries: indices.iter().map(|&i| self.entries[i].clone()).collect(),
            geometry: self.geometry,
            seed: self.seed,
            oracle_version: self.oracle_version.clone(),
        }
    }
}

/// `n` oracle-labelled designs. Entry `i` uses child seed `(seed, i)`, so
/// entries do not depend on generation order.
pub fn generate_dataset(n: usize, geometry: &CellGeometry, seed: u64) -> Result<Dataset> {
    geometry.check()?;
    let grid = FrequencyGrid::default();
    let entries = (0..n)
        .map(|i| {
            let design = sample_design(geometry, seed::child_seed(seed, i as u64))?;
            Ok(Entry {
                design: encode_design(&design),
                response: oracle_evaluate(&design, geometry, &grid).to_vector(),
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(Dataset {
        entries,
        geometry: *geometry,
        seed,
        oracle_version: ORACLE_VERSION.to_string(),
    })
}

/// Train/validation partition by index.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Split {
    pub train: Vec<usize>,
    pub validation: Vec<usize>,
}

impl Split {
    /// Seeded shuffle, then the first `ceil(train_fraction * n)` go to training.
    pub fn holdout(n: usize, train_fraction: f64, seed: u64) -> Result<Split> {
        if !(0.0..1.0).contains(&train_fraction) || train_fraction == 0.0 {
            return Err(Error::InvalidArgument(format!(
                "train fraction {train_fraction} outside (0, 1)"
            )));
        }
        let mut idx: Vec<usize> = (0..n).collect();
        idx.shuffle(&mut seed::rng(seed::tagged_seed(seed, "holdout")));
        let n_train = ((train_fraction * n as f64).round() as usize).clamp(1, n.saturating_sub(1));
        let validation = idx.split_off(n_train);
        Ok(Split {
            train: idx,
            validation,
        })
    }

    /// `k` folds of a seeded permutation; fold sizes differ by at most one.
    pub fn k_fold(n: usize, k: usize, seed: u64) -> Result<Vec<Split>> {
        if k < 2 || k > n {
            return Err(Error::InvalidArgument(format!("{k} folds over {n} entries")));
        }
        let mut idx: Vec<usize> = (0..n).collect();
        idx.shuffle(&mut seed::rng(seed::tagged_seed(seed, "kfold")));
        let bounds: Vec<usize> = (0..=k).map(|f| f * n / k).collect();
        Ok((0..k)
            .map(|f| {
                let validation = idx[bounds[f]..bounds[f + 1]].to_vec();
                let train = idx[..bounds[f]]
                    .iter()
                    .chain(&idx[bounds[f + 1]..])
                    .copied()
                    .collect();
                Split { train, validation }
            })
            .collect())
    }

    pub fn fingerprint(&self) -> u64 {
        let h = self
            .train
            .iter()
            .fold(Fnv1a::default().update(b"train"), |h, &i| h.update(&(i as u64).to_le_bytes()));
        self.validation
            .iter()
            .fold(h.update(b"validation"), |h, &i| h.update(&(i as u64).to_le_bytes()))
            .finish()
    }
}

/// Per-dimension min/max of responses, mapping them to [-1, 1].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ResponseScaler {
    pub min: Vec<f64>,
    pub max: Vec<f64>,
}

impl ResponseScaler {
    pub fn fit<'a>(responses: impl IntoIterator<Item = &'a ResponseVector>) -> Result<Self> {
        let mut min = vec![f64::INFINITY; RESPONSE_DIM];
        let mut max = vec![f64::NEG_INFINITY; RESPONSE_DIM];
        let mut count = 0usize;
        for r in responses {
            for (j, &v) in r.values().iter().enumerate() {
                min[j] = min[j].min(v);
                max[j] = max[j].max(v);
            }
            count += 1;
        }
        if count == 0 {
            return Err(Error::InvalidArgument("cannot fit scaler on no responses".into()));
        }
        Ok(ResponseScaler { min, max })
    }

    fn half_range(&self, j: usize) -> f64 {
        let h = 0.5 * (self.max[j] - self.min[j]);
        if h > 1e-12 {
            h
        } else {
            1.0
        }
    }

    fn centre(&self, j: usize) -> f64 {
        0.5 * (self.max[j] + self.min[j])
    }

    pub fn normalize(&self, r: &[f64]) -> Vec<f64> {
        r.iter()
            .enumerate()
            .map(|(j, v)| (v - self.centre(j)) / self.half_range(j))
            .collect()
    }

    pub fn denormalize(&self, r: &[f64]) -> Vec<f64> {
        r.iter()
            .enumerate()
            .map(|(j, v)| v * self.half_range(j) + self.centre(j))
            .collect()
    }

    pub fn fingerprint(&self) -> u64 {
        Fnv1a::default()
            .update_f64s(&self.min)
            .update_f64s(&self.max)
            .finish()
    }

    /// Flat `[min..., max...]` for storage.
    pub fn to_flat(&self) -> Vec<f64> {
        self.min.iter().chain(&self.max).copied().collect()
    }

    pub fn from_flat(v: &[f64]) -> Result<Self> {
        if v.len() != 2 * RESPONSE_DIM {
            return Err(Error::Shape(format!(
                "scaler needs {} values, got {}",
                2 * RESPONSE_DIM,
                v.len()
            )));
        }
        Ok(ResponseScaler {
            min: v[..RESPONSE_DIM].to_vec(),
            max: v[RESPONSE_DIM..].to_vec(),
        })
    }
}

/// A split plus everything derived from it that every model consumes:
/// scaler fitted on the training part, normalised matrices, and the
/// physical-unit validation targets.
#[derive(Debug, Clone)]
pub struct TrainingData {
    pub split: Split,
    pub scaler: ResponseScaler,
    pub geometry: CellGeometry,
    /// Training designs divided by the cell side.
    pub x_train: Matrix,
    /// Training responses mapped to [-1, 1].
    pub y_train: Matrix,
    pub x_validation: Matrix,
    pub validation_designs: Vec<DesignVector>,
    pub validation_responses: Vec<ResponseVector>,
}

impl TrainingData {
    pub fn prepare(ds: &Dataset, split: Split) -> Result<Self> {
        if split.train.is_empty() || split.validation.is_empty() {
            return Err(Error::InvalidArgument("split has an empty side".into()));
        }
        if let Some(&i) = split.train.iter().chain(&split.validation).find(|&&i| i >= ds.len()) {
            return Err(Error::InvalidArgument(format!(
                "split index {i} beyond dataset of {}",
                ds.len()
            )));
        }
        let scaler = ResponseScaler::fit(split.train.iter().map(|&i| &ds.entries[i].response))?;
        let designs = |idx: &[usize]| -> Result<Matrix> {
            let rows: Vec<Vec<f64>> = idx
                .iter()
                .map(|&i| normalize_design(&ds.entries[i].design, &ds.geometry))
                .collect();
            Matrix::from_rows(&rows)
        };
        let y_rows: Vec<Vec<f64>> = split
            .train
            .iter()
            .map(|&i| scaler.normalize(ds.entries[i].response.values()))
            .collect();
        Ok(TrainingData {
            x_train: designs(&split.train)?,
            y_train: Matrix::from_rows(&y_rows)?,
            x_validation: designs(&split.validation)?,
            validation_designs: split.validation.iter().map(|&i| ds.entries[i].design.clone()).collect(),
            validation_responses: split
                .validation
                .iter()
                .map(|&i| ds.entries[i].response.clone())
                .collect(),
            geometry: ds.geometry,
            scaler,
            split,
        })
    }

    /// Identifies the split and scaler; equal across models fed the same data.
    pub fn fingerprint(&self) -> u64 {
        Fnv1a::default()
            .update(&self.split.fingerprint().to_le_bytes())
            .update(&self.scaler.fingerprint().to_le_bytes())
            .finish()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DatasetFormat {
    Csv,
    Binary,
}

impl DatasetFormat {
    /// `.csv` means CSV, anything else binary.
    pub fn from_path(path: &Path) -> Self {
        match path.extension().and_then(|e| e.to_str()) {
            Some(ext) if ext.eq_ignore_ascii_case("csv") => DatasetFormat::Csv,
            _ => DatasetFormat::Binary,
        }
    }
}

pub fn csv_header() -> Vec<String> {
    let mut h: Vec<String> = (0..DESIGN_DIM).map(|i| format!("x{i}")).collect();
    for prefix in ["ar", "rl", "g"] {
        h.extend((0..SPECTRUM_POINTS).map(|i| format!("{prefix}{i}")));
    }
    h
}

pub fn write_binary<W: Write>(ds: &Dataset, mut w: W) -> Result<()> {
    w.write_all(FPCD_MAGIC)?;
    for v in [FPCD_VERSION, ds.len() as u32, DESIGN_DIM as u32, RESPONSE_DIM as u32] {
        w.write_all(&v.to_le_bytes())?;
    }
    for e in &ds.entries {
        for v in e.design.values().iter().chain(e.response.values()) {
            w.write_all(&v.to_le_bytes())?;
        }
    }
    let version = ds.oracle_version.as_bytes();
    w.write_all(&(version.len() as u32).to_le_bytes())?;
    w.write_all(version)?;
    w.write_all(&ds.seed.to_le_bytes())?;
    for v in [
        ds.geometry.cell_side_mm,
        ds.geometry.brick_size_mm,
        ds.geometry.loop_inset_mm,
    ] {
        w.write_all(&v.to_le_bytes())?;
    }
    w.flush()?;
    Ok(())
}

struct LeReader<R> {
    inner: R,
}

impl<R: Read> LeReader<R> {
    fn bytes<const N: usize>(&mut self) -> Result<[u8; N]> {
        let mut buf = [0u8; N];
        self.inner
            .read_exact(&mut buf)
            .map_err(|e| Error::format("FPCD", format!("truncated file: {e}")))?;
        Ok(buf)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.bytes()?))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.bytes()?))
    }

    fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_le_bytes(self.bytes()?))
    }
}

pub fn read_binary<R: Read>(r: R) -> Result<Dataset> {
    let mut r = LeReader { inner: r };
    if &r.bytes::<4>()? != FPCD_MAGIC {
        return Err(Error::format("FPCD", "bad magic"));
    }
    let version = r.u32()?;
    if version != FPCD_VERSION {
        return Err(Error::format("FPCD", format!("unsupported version {version}")));
    }
    let n = r.u32()? as usize;
    let (dd, rd) = (r.u32()? as usize, r.u32()? as usize);
    if dd != DESIGN_DIM || rd != RESPONSE_DIM {
        return Err(Error::format("FPCD", format!("record shape {dd}+{rd}")));
    }
    let mut entries = Vec::with_capacity(n);
    for _ in 0..n {
        let design = (0..DESIGN_DIM).map(|_| r.f64()).collect::<Result<Vec<_>>>()?;
        let response = (0..RESPONSE_DIM).map(|_| r.f64()).collect::<Result<Vec<_>>>()?;
        entries.push(Entry {
            design: DesignVector::new(design)?,
            response: ResponseVector(response),
        });
    }
    let len = r.u32()? as usize;
    let mut version = vec![0u8; len];
    r.inner
        .read_exact(&mut version)
        .map_err(|e| Error::format("FPCD", format!("truncated footer: {e}")))?;
    let oracle_version =
        String::from_utf8(version).map_err(|_| Error::format("FPCD", "oracle version is not utf-8"))?;
    let seed = r.u64()?;
    let geometry = CellGeometry {
        cell_side_mm: r.f64()?,
        brick_size_mm: r.f64()?,
        loop_inset_mm: r.f64()?,
    };
    let mut rest = Vec::new();
    r.inner.read_to_end(&mut rest)?;
    if !rest.is_empty() {
        return Err(Error::format("FPCD", "trailing bytes after footer"));
    }
    Ok(Dataset {
        entries,
        geometry,
        seed,
        oracle_version,
    })
}

pub fn write_csv<W: Write>(ds: &Dataset, mut w: W) -> Result<()> {
    {
        let mut cw = csv::Writer::from_writer(&mut w);
        cw.write_record(csv_header())?;
        for e in &ds.entries {
            cw.write_record(
                e.design
                    .values()
                    .iter()
                    .chain(e.response.values())
                    .map(|v| v.to_string()),
            )?;
        }
        cw.flush()?;
    }
    writeln!(w, "# fpcd_version={FPCD_VERSION}")?;
    writeln!(w, "# oracle_version={}", ds.oracle_version)?;
    writeln!(w, "# seed={}", ds.seed)?;
    writeln!(
        w,
        "# geometry={},{},{}",
        ds.geometry.cell_side_mm, ds.geometry.brick_size_mm, ds.geometry.loop_inset_mm
    )?;
    w.flush()?;
    Ok(())
}

pub fn read_csv<R: Read>(r: R) -> Result<Dataset> {
    let mut text = String::new();
    BufReader::new(r).read_to_string(&mut text)?;
    let mut meta = std::collections::BTreeMap::new();
    for line in text.lines() {
        if let Some(kv) = line.strip_prefix("# ") {
            if let Some((k, v)) = kv.split_once('=') {
                meta.insert(k.trim().to_string(), v.trim().to_string());
            }
        }
    }
    let field = |k: &str| {
        meta.get(k)
            .cloned()
            .ok_or_else(|| Error::format("FPCD csv", format!("missing footer field {k}")))
    };
    if field("fpcd_version")? != FPCD_VERSION.to_string() {
        return Err(Error::format("FPCD csv", "unsupported version"));
    }
    let oracle_version = field("oracle_version")?;
    let seed = field("seed")?
        .parse()
        .map_err(|_| Error::format("FPCD csv", "bad seed"))?;
    let geo: Vec<f64> = field("geometry")?
        .split(',')
        .map(|t| t.parse::<f64>())
        .collect::<std::result::Result<_, _>>()
        .map_err(|_| Error::format("FPCD csv", "bad geometry"))?;
    if geo.len() != 3 {
        return Err(Error::format("FPCD csv", "geometry needs 3 values"));
    }

    let mut rdr = csv::ReaderBuilder::new()
        .comment(Some(b'#'))
        .from_reader(text.as_bytes());
    if rdr.headers()?.iter().ne(csv_header().iter().map(String::as_str)) {
        return Err(Error::format("FPCD csv", "unexpected header"));
    }
    let mut entries = Vec::new();
    for rec in rdr.records() {
        let rec = rec?;
        let vals = rec
            .iter()
            .map(|t| t.parse::<f64>())
            .collect::<std::result::Result<Vec<_>, _>>()
            .map_err(|e| Error::format("FPCD csv", e.to_string()))?;
        if vals.len() != DESIGN_DIM + RESPONSE_DIM {
            return Err(Error::format("FPCD csv", format!("row of {} values", vals.len())));
        }
        entries.push(Entry {
            design: DesignVector::new(vals[..DESIGN_DIM].to_vec())?,
            response: ResponseVector(vals[DESIGN_DIM..].to_vec()),
        });
    }
    Ok(Dataset {
        entries,
        geometry: CellGeometry {
            cell_side_mm: geo[0],
            brick_size_mm: geo[1],
            loop_inset_mm: geo[2],
        },
        seed,
        oracle_version,
    })
}

pub fn save(ds: &Dataset, path: &Path, format: DatasetFormat) -> Result<()> {
    let w = std::io::BufWriter::new(std::fs::File::create(path)?);
    match format {
        DatasetFormat::Csv => write_csv(ds, w),
        DatasetFormat::Binary => write_binary(ds, w),
    }
}

/// Loads either form, sniffing the magic bytes.
pub fn load(path: &Path) -> Result<Dataset> {
    let mut r = BufReader::new(std::fs::File::open(path)?);
    let is_binary = r.fill_buf()?.starts_with(FPCD_MAGIC);
    if is_binary {
        read_binary(r)
    } else {
        read_csv(r)
    }
}
