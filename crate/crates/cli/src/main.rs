//! `fpcgan`: dataset generation, training, benchmarking, screening and
//! diagnostics for the fractal-loop antenna surrogate workflow.

use std::fs;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};
use serde_json::json;

use fpcgan_core::archcheck::{check_architecture, ArchKind};
use fpcgan_core::baselines::{
    benchmark_models, hex, train_cnn, train_mlp, CnnSurrogate, MlpSurrogate, SegmentNmse,
};
use fpcgan_core::checksum::fnv1a64;
use fpcgan_core::config::RunConfig;
use fpcgan_core::dataset::{self, Dataset, DatasetFormat, Split, TrainingData};
use fpcgan_core::design::{decode_design, CellGeometry, DesignVector};
use fpcgan_core::gan::{critic_model_file, train_gan_on, GanSurrogate, NoisePolicy};
use fpcgan_core::nn::{Fault, ModelFile, ModelRole};
use fpcgan_core::oracle::{oracle_evaluate, AntennaResponse, FrequencyGrid, ResponseVector, ORACLE_VERSION};
use fpcgan_core::screening::{screen_candidates, select_optimal, verify_selection, ScreeningCriteria};
use fpcgan_core::surrogate::Surrogate;
use fpcgan_core::{Error, Result, TOOL_VERSION};

#[derive(Debug, Parser)]
#[command(name = "fpcgan", version, about = "Conditional-GAN surrogate toolkit for fractal-loop antennas")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum FileFormat {
    Csv,
    Bin,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum ModelKind {
    Gan,
    Mlp,
    Cnn,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum Corruption {
    None,
    BnMean,
    LeakySlope,
}

/// Flags that override the config file.
#[derive(Debug, clap::Args)]
struct Overrides {
    /// Run configuration (TOML); defaults reproduce the published protocol.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Master seed.
    #[arg(long)]
    seed: Option<u64>,
    /// GAN training iterations.
    #[arg(long)]
    iterations: Option<usize>,
    /// MLP and CNN training epochs.
    #[arg(long)]
    epochs: Option<usize>,
}

impl Overrides {
    fn resolve(&self) -> Result<RunConfig> {
        let mut c = match &self.config {
            Some(p) => RunConfig::load(p)?,
            None => RunConfig::default(),
        };
        if let Some(s) = self.seed {
            c = c.with_seed(s);
        }
        if let Some(n) = self.iterations {
            c.gan.iterations = n;
        }
        if let Some(n) = self.epochs {
            c.mlp.epochs = n;
            c.cnn.epochs = n;
        }
        c.check()?;
        Ok(c)
    }
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Sample designs and label them with the oracle.
    GenDataset {
        /// Number of designs; defaults to the configured dataset size.
        #[arg(long, value_parser = clap::value_parser!(u64).range(1..))]
        n: Option<u64>,
        #[arg(long)]
        seed: Option<u64>,
        /// `SIDE_MM` or `SIDE_MM,INSET_MM`; defaults to the configured geometry.
        #[arg(long, value_parser = parse_geometry)]
        geometry: Option<CellGeometry>,
        /// Defaults to the configured dataset path.
        #[arg(long)]
        out: Option<PathBuf>,
        /// Defaults to the output extension (`.csv` or binary).
        #[arg(long, value_enum)]
        format: Option<FileFormat>,
        #[arg(long)]
        config: Option<PathBuf>,
    },
    /// Train one model and write its checkpoint, history and report.
    Train {
        #[arg(long, value_enum)]
        model: ModelKind,
        /// Defaults to the configured dataset path.
        #[arg(long)]
        dataset: Option<PathBuf>,
        /// Defaults to the configured model path.
        #[arg(long)]
        out: Option<PathBuf>,
        #[command(flatten)]
        overrides: Overrides,
    },
    /// Train GAN, MLP and CNN on one split and report per-segment NMSE.
    Benchmark {
        /// Defaults to the configured dataset path.
        #[arg(long)]
        dataset: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        #[command(flatten)]
        overrides: Overrides,
    },
    /// Rank a random candidate pool with a trained surrogate and verify the
    /// top picks against the oracle.
    Screen {
        #[arg(long)]
        checkpoint: PathBuf,
        /// Pool size; defaults to the configured value.
        #[arg(long)]
        n: Option<usize>,
        #[arg(long)]
        seed: Option<u64>,
        /// TOML file with screening criteria.
        #[arg(long)]
        criteria: Option<PathBuf>,
        #[arg(long)]
        config: Option<PathBuf>,
        /// Number of designs to select and verify.
        #[arg(long)]
        top_k: Option<usize>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Write spectra for the designs in a file, from a checkpoint, the oracle, or both.
    ExportSpectra {
        #[arg(long, required_unless_present = "oracle")]
        checkpoint: Option<PathBuf>,
        #[arg(long)]
        oracle: bool,
        /// One design per line: 72 whitespace-separated coordinates in mm.
        #[arg(long)]
        design_file: PathBuf,
        /// Geometry for oracle-only export; a checkpoint brings its own.
        #[arg(long, value_parser = parse_geometry)]
        geometry: Option<CellGeometry>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Finite-difference gradient check of a full-size architecture.
    Gradcheck {
        #[arg(long, value_parser = parse_arch)]
        arch: ArchKind,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Deliberately wrong backward pass, to confirm the check catches it.
        #[arg(long, value_enum, default_value_t = Corruption::None)]
        corrupt: Corruption,
    },
}

fn parse_geometry(s: &str) -> std::result::Result<CellGeometry, String> {
    let parts: Vec<&str> = s.split(',').map(str::trim).collect();
    let num = |t: &str| t.parse::<f64>().map_err(|e| format!("{t:?}: {e}"));
    let g = match parts.as_slice() {
        [side] => CellGeometry {
            cell_side_mm: num(side)?,
            ..CellGeometry::default()
        },
        [side, inset] => CellGeometry::new(num(side)?, num(inset)?).map_err(|e| e.to_string())?,
        _ => return Err("expected SIDE or SIDE,INSET".into()),
    };
    g.check().map_err(|e| e.to_string())?;
    Ok(g)
}

fn parse_arch(s: &str) -> std::result::Result<ArchKind, String> {
    s.parse().map_err(|e: Error| e.to_string())
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 1 } else { 0 });
        }
    };
    match run(cli.command) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}

fn run(cmd: Command) -> Result<ExitCode> {
    match cmd {
        Command::GenDataset {
            n,
            seed,
            geometry,
            out,
            format,
            config,
        } => {
            let cfg = Overrides {
                config,
                seed,
                iterations: None,
                epochs: None,
            }
            .resolve()?;
            let n = n.map_or(cfg.dataset.size, |n| n as usize);
            let out = out.unwrap_or(cfg.dataset.path);
            gen_dataset(n, cfg.seed, geometry.unwrap_or(cfg.geometry), &out, format)
        }
        Command::Train {
            model,
            dataset,
            out,
            overrides,
        } => {
            let cfg = overrides.resolve()?;
            let dataset = dataset.unwrap_or_else(|| cfg.dataset.path.clone());
            let out = out.unwrap_or_else(|| match model {
                ModelKind::Gan => cfg.models.gan.clone(),
                ModelKind::Mlp => cfg.models.mlp.clone(),
                ModelKind::Cnn => cfg.models.cnn.clone(),
            });
            train(model, &dataset, &out, &cfg)
        }
        Command::Benchmark {
            dataset,
            out,
            overrides,
        } => {
            let cfg = overrides.resolve()?;
            let dataset = dataset.unwrap_or_else(|| cfg.dataset.path.clone());
            benchmark(&dataset, &out, &cfg)
        }
        Command::Screen {
            checkpoint,
            n,
            seed,
            criteria,
            config,
            top_k,
            out,
        } => {
            let cfg = Overrides {
                config,
                seed,
                iterations: None,
                epochs: None,
            }
            .resolve()?;
            let criteria = match criteria {
                Some(p) => load_criteria(&p)?,
                None => cfg.screening.criteria,
            };
            let n = n.unwrap_or(cfg.screening.pool_size);
            let k = top_k.unwrap_or(cfg.screening.top_k);
            screen(&checkpoint, n, cfg.seed, &criteria, k, &cfg, &out)
        }
        Command::ExportSpectra {
            checkpoint,
            oracle,
            design_file,
            geometry,
            out,
        } => export_spectra(checkpoint.as_deref(), oracle, &design_file, geometry, &out),
        Command::Gradcheck { arch, seed, corrupt } => gradcheck(arch, seed, corrupt),
    }
}

fn create_parent(path: &Path) -> Result<()> {
    match path.parent() {
        Some(dir) if !dir.as_os_str().is_empty() => Ok(fs::create_dir_all(dir)?),
        _ => Ok(()),
    }
}

fn write_json(path: &Path, value: &impl serde::Serialize) -> Result<()> {
    let mut w = BufWriter::new(fs::File::create(path)?);
    serde_json::to_writer_pretty(&mut w, value)?;
    writeln!(w)?;
    w.flush()?;
    Ok(())
}

/// `dir/stem.fpcm` plus `suffix` gives `dir/stem.suffix`.
fn sibling(path: &Path, suffix: &str) -> PathBuf {
    let stem = path.file_stem().and_then(|s| s.to_str()).unwrap_or("out");
    path.with_file_name(format!("{stem}.{suffix}"))
}

fn load_dataset(path: &Path) -> Result<Dataset> {
    let ds = dataset::load(path).map_err(|e| match e {
        Error::Io(io) => Error::Io(std::io::Error::new(io.kind(), format!("{}: {io}", path.display()))),
        other => other,
    })?;
    ds.require_oracle(ORACLE_VERSION)?;
    Ok(ds)
}

fn load_criteria(path: &Path) -> Result<ScreeningCriteria> {
    let text = fs::read_to_string(path)?;
    let c: ScreeningCriteria = toml::from_str(&text).map_err(|e| Error::Config(e.to_string()))?;
    c.check()?;
    Ok(c)
}

fn gen_dataset(n: usize, seed: u64, geometry: CellGeometry, out: &Path, format: Option<FileFormat>) -> Result<ExitCode> {
    let ds = dataset::generate_dataset(n, &geometry, seed)?;
    let format = match format {
        Some(FileFormat::Csv) => DatasetFormat::Csv,
        Some(FileFormat::Bin) => DatasetFormat::Binary,
        None => DatasetFormat::from_path(out),
    };
    create_parent(out)?;
    dataset::save(&ds, out, format)?;
    println!("{}", hex(ds.fingerprint()));
    Ok(ExitCode::SUCCESS)
}

fn train(model: ModelKind, dataset_path: &Path, out: &Path, cfg: &RunConfig) -> Result<ExitCode> {
    let ds = load_dataset(dataset_path)?;
    let split = Split::holdout(ds.len(), cfg.dataset.train_fraction, cfg.seed)?;
    let data = TrainingData::prepare(&ds, split)?;
    create_parent(out)?;
    let history_path = sibling(out, "history.csv");
    let (name, nmse, extra) = match model {
        ModelKind::Gan => {
            let trained = train_gan_on(&ds, &data, &cfg.gan)?;
            trained.surrogate.save(out)?;
            let critic_path = sibling(out, "critic.fpcm");
            critic_model_file(&trained.critic, &ds.geometry).save(&critic_path)?;
            trained.history.write_csv(BufWriter::new(fs::File::create(&history_path)?))?;
            let nmse = trained.validation_nmse(&data)?;
            let extra = json!({
                "iterations": cfg.gan.iterations,
                "critic_checkpoint": critic_path,
            });
            ("gan", nmse, extra)
        }
        ModelKind::Mlp => {
            let (m, history) = train_mlp(&ds, &data, &cfg.mlp)?;
            m.to_model_file().save(out)?;
            history.write_csv(BufWriter::new(fs::File::create(&history_path)?))?;
            let nmse = SegmentNmse::evaluate(&data.validation_responses, &m.predict(&data.validation_designs)?)?;
            ("mlp", nmse, json!({ "epochs": cfg.mlp.epochs }))
        }
        ModelKind::Cnn => {
            let (m, history) = train_cnn(&ds, &data, &cfg.cnn)?;
            m.to_model_file().save(out)?;
            history.write_csv(BufWriter::new(fs::File::create(&history_path)?))?;
            let nmse = SegmentNmse::evaluate(&data.validation_responses, &m.predict(&data.validation_designs)?)?;
            ("cnn", nmse, json!({ "epochs": cfg.cnn.epochs }))
        }
    };
    let report = json!({
        "tool_version": TOOL_VERSION,
        "oracle_version": ds.oracle_version,
        "model": name,
        "seed": cfg.seed,
        "dataset_fingerprint": hex(ds.fingerprint()),
        "pipeline_fingerprint": hex(data.fingerprint()),
        "protocol_fingerprint": hex(cfg.protocol_fingerprint()),
        "checkpoint_fingerprint": hex(fnv1a64(&fs::read(out)?)),
        "checkpoint": out,
        "history": history_path,
        "validation_nmse": nmse,
        "details": extra,
    });
    write_json(&sibling(out, "train.json"), &report)?;
    println!(
        "{name}: validation nmse gain={:.6} ar={:.6} rl={:.6}",
        nmse.gain, nmse.axial_ratio, nmse.return_loss
    );
    Ok(ExitCode::SUCCESS)
}

fn benchmark(dataset_path: &Path, out: &Path, cfg: &RunConfig) -> Result<ExitCode> {
    let ds = load_dataset(dataset_path)?;
    let report = benchmark_models(&ds, cfg.seed, &cfg.gan, &cfg.mlp, &cfg.cnn)?;
    write_json(out, &report)?;
    for (name, n) in &report.models {
        println!("{name}: gain={:.6} ar={:.6} rl={:.6}", n.gain, n.axial_ratio, n.return_loss);
    }
    Ok(ExitCode::SUCCESS)
}

/// A checkpoint of any predicting role, with the geometry it was trained on.
fn load_surrogate(path: &Path, policy: NoisePolicy) -> Result<(Box<dyn Surrogate>, CellGeometry)> {
    let file = ModelFile::load(path)?;
    Ok(match file.role {
        ModelRole::Generator => {
            let s = GanSurrogate::from_model_file(file, policy)?;
            let g = s.geometry;
            (Box::new(s), g)
        }
        ModelRole::Mlp => {
            let s = MlpSurrogate::from_model_file(file)?;
            let g = s.geometry;
            (Box::new(s), g)
        }
        ModelRole::Cnn => {
            let s = CnnSurrogate::from_model_file(file)?;
            let g = s.geometry;
            (Box::new(s), g)
        }
        other => {
            return Err(Error::Architecture(format!(
                "{} checkpoint cannot predict spectra",
                other.name()
            )))
        }
    })
}

fn screen(
    checkpoint: &Path,
    n: usize,
    seed: u64,
    criteria: &ScreeningCriteria,
    k: usize,
    cfg: &RunConfig,
    out: &Path,
) -> Result<ExitCode> {
    if n == 0 || k == 0 {
        return Err(Error::InvalidArgument("pool size and top-k must be positive".into()));
    }
    let (surrogate, geometry) = load_surrogate(checkpoint, cfg.gan.noise_policy())?;
    let mut report = screen_candidates(surrogate.as_ref(), &geometry, n, seed, criteria)?;
    report.model_fingerprint = Some(hex(fnv1a64(&fs::read(checkpoint)?)));
    let selection = select_optimal(&report, k);
    let verification = verify_selection(&report, &selection, &geometry, &FrequencyGrid::default())?;
    write_json(out, &report)?;
    write_json(&sibling(out, "verification.json"), &verification)?;
    for (metric, h) in &report.histograms {
        h.write_csv(BufWriter::new(fs::File::create(sibling(out, &format!("hist.{metric}.csv")))?))?;
    }
    if let Some(msg) = &selection.shortfall {
        eprintln!("warning: {msg}");
    }
    println!("screened {n} candidates in {:.1} ms", report.timing_ms);
    match verification.rows.first() {
        Some(w) => println!(
            "winner #{}: predicted ar_min={:.3} dB zbw={:.1} MHz gain={:.2} dBi; oracle ar_min={:.3} dB zbw={:.1} MHz gain={:.2} dBi",
            w.index,
            w.predicted.ar_min_db,
            w.predicted.zbw_mhz,
            w.predicted.gain_at_res_dbi,
            w.oracle.ar_min_db,
            w.oracle.zbw_mhz,
            w.oracle.gain_at_res_dbi,
        ),
        None => println!("no feasible candidate"),
    }
    Ok(ExitCode::SUCCESS)
}

fn read_designs(path: &Path) -> Result<Vec<DesignVector>> {
    fs::read_to_string(path)?
        .lines()
        .map(str::trim)
        .filter(|l| !l.is_empty() && !l.starts_with('#'))
        .map(str::parse)
        .collect()
}

fn export_spectra(
    checkpoint: Option<&Path>,
    oracle: bool,
    design_file: &Path,
    geometry: Option<CellGeometry>,
    out: &Path,
) -> Result<ExitCode> {
    let designs = read_designs(design_file)?;
    if designs.is_empty() {
        return Err(Error::InvalidArgument(format!("{} holds no designs", design_file.display())));
    }
    let grid = FrequencyGrid::default();
    let mut sources: Vec<(&str, Vec<ResponseVector>)> = Vec::new();
    let mut geometry = geometry.unwrap_or_default();
    if let Some(path) = checkpoint {
        let (s, g) = load_surrogate(path, RunConfig::default().gan.noise_policy())?;
        geometry = g;
        sources.push(("surrogate", s.predict(&designs)?));
    }
    if oracle {
        let truth = designs
            .iter()
            .map(|d| Ok(oracle_evaluate(&decode_design(d, &geometry)?, &geometry, &grid).to_vector()))
            .collect::<Result<Vec<_>>>()?;
        sources.push(("oracle", truth));
    }
    let mut w = csv::Writer::from_writer(BufWriter::new(fs::File::create(out)?));
    w.write_record(["freq_ghz", "ar_db", "rl_db", "gain_dbi", "source", "design"])?;
    for (name, responses) in &sources {
        for (d, r) in responses.iter().enumerate() {
            let a = AntennaResponse::from_vector(r);
            for i in 0..grid.points {
                w.write_record([
                    format!("{:.2}", grid.freq(i)),
                    a.axial_ratio_db[i].to_string(),
                    a.return_loss_db[i].to_string(),
                    a.gain_dbi[i].to_string(),
                    name.to_string(),
                    d.to_string(),
                ])?;
            }
        }
    }
    w.flush()?;
    Ok(ExitCode::SUCCESS)
}

fn gradcheck(arch: ArchKind, seed: u64, corrupt: Corruption) -> Result<ExitCode> {
    let fault = match corrupt {
        Corruption::None => Fault::None,
        Corruption::BnMean => Fault::BatchNormMeanTerms,
        Corruption::LeakySlope => Fault::LeakySlope,
    };
    let r = check_architecture(arch, seed, fault)?;
    println!(
        "arch={arch} probes={} skipped_kinks={} max_rel_error={:.3e} result={}",
        r.probes,
        r.skipped_kinks,
        r.max_rel_error,
        if r.pass { "pass" } else { "fail" }
    );
    Ok(if r.pass { ExitCode::SUCCESS } else { ExitCode::from(3) })
}
