//! Property suites for the module invariants. Shared by the core
//! integration tests and the acceptance target; each check returns the
//! first counterexample as an error string.

use proptest::prelude::*;
use proptest::test_runner::{Config, RngAlgorithm, TestCaseError, TestRng, TestRunner};

use fpcgan_core::baselines::{build_mlp, nmse_slices, train_cnn, train_mlp, BaselineConfig};
use fpcgan_core::config::RunConfig;
use fpcgan_core::dataset::{generate_dataset, Split, TrainingData};
use fpcgan_core::design::{
    decode_design, encode_design, enumerate_slots, sample_design, validate_design, CellGeometry, Edge,
    UnitCellDesign,
};
use fpcgan_core::gan::{critic_loss, generator_loss, train_gan_on, GanSurrogate, GanTrainingConfig, NoisePolicy};
use fpcgan_core::nn::{
    Activation, AdamConfig, AdamState, Architecture, Matrix, Mode, ModelFile, Network, ParamTensor,
};
use fpcgan_core::oracle::{
    extract_metrics, oracle_evaluate, oracle_features, AntennaResponse, FrequencyGrid, ResonanceParams,
    RESPONSE_DIM, SPECTRUM_POINTS,
};
use fpcgan_core::screening::{rank, screen_candidates, ScreeningCriteria};
use fpcgan_core::surrogate::OracleSurrogate;
use fpcgan_core::Error;

pub type Check = (&'static str, fn() -> Result<(), String>);

pub const CHECKS: &[Check] = &[
    ("design: encode/decode round trip over 1000 seeds", encode_decode_round_trip),
    ("design: encoding ignores brick order", encoding_ignores_brick_order),
    ("design: slot coordinates lie on the half-mm grid", slot_grid_closure),
    ("design: sampling is valid and deterministic", sampling_valid_and_deterministic),
    ("oracle: deterministic with physical bounds", oracle_deterministic_and_physical),
    ("oracle: one brick across the diagonal moves ar_min by 14/36 dB", ar_min_sensitivity),
    ("oracle: zbw converges under grid doubling", zbw_grid_convergence),
    ("oracle: response segment order is AR, RL, gain", segment_order),
    ("nn: batch-norm train-mode statistics", batch_norm_statistics),
    ("nn: infer mode has no cross-sample coupling", infer_mode_independence),
    ("nn: Adam is invariant to parameter ordering", adam_order_invariance),
    ("gan: architecture enforced at checkpoint load", architecture_enforced),
    ("gan: value-function algebra", value_function_algebra),
    ("gan: validation rows never enter a training batch", no_training_on_validation),
    ("baselines: NMSE joint-scaling invariance", nmse_scaling_invariance),
    ("baselines: models share one data pipeline", shared_pipeline),
    ("baselines: MLP and CNN training is deterministic", baseline_determinism),
    ("screening: ranking invariant under increasing score transforms", ranking_invariance),
    ("screening: relaxing thresholds never shrinks the feasible set", feasibility_monotonicity),
    ("screening: histogram totals equal the pool size", histogram_totals),
    ("config: unknown keys are rejected", config_closed_world),
];

fn runner(cases: u32) -> TestRunner {
    let config = Config {
        cases,
        failure_persistence: None,
        ..Config::default()
    };
    TestRunner::new_with_rng(config, TestRng::deterministic_rng(RngAlgorithm::ChaCha))
}

fn run<S: Strategy>(
    cases: u32,
    strategy: S,
    test: impl Fn(S::Value) -> Result<(), TestCaseError>,
) -> Result<(), String> {
    runner(cases).run(&strategy, test).map_err(|e| e.to_string())
}

fn ensure(ok: bool, msg: impl FnOnce() -> String) -> Result<(), String> {
    if ok {
        Ok(())
    } else {
        Err(msg())
    }
}

fn fail(e: Error) -> TestCaseError {
    TestCaseError::fail(e.to_string())
}

fn encode_decode_round_trip() -> Result<(), String> {
    for side in [30.0, 20.0] {
        let g = CellGeometry::new(side, 2.0).map_err(|e| e.to_string())?;
        for seed in 0..1000 {
            let d = sample_design(&g, seed).map_err(|e| e.to_string())?;
            let back = decode_design(&encode_design(&d), &g).map_err(|e| e.to_string())?;
            ensure(back == d, || format!("side {side} seed {seed} does not round-trip"))?;
        }
    }
    Ok(())
}

fn encoding_ignores_brick_order() -> Result<(), String> {
    let g = CellGeometry::default();
    let shuffled = any::<u64>().prop_flat_map(move |seed| {
        let d = sample_design(&g, seed).unwrap();
        (Just(d.clone()), Just(d.bricks().to_vec()).prop_shuffle())
    });
    run(64, shuffled, |(d, bricks)| {
        prop_assert_eq!(encode_design(&UnitCellDesign::from_bricks(bricks)), encode_design(&d));
        Ok(())
    })
}

fn slot_grid_closure() -> Result<(), String> {
    run(64, (40u32..=120, 2u32..=8), |(side2, inset2)| {
        let Ok(g) = CellGeometry::new(side2 as f64 / 2.0, inset2 as f64 / 2.0) else {
            return Ok(());
        };
        for s in enumerate_slots(&g) {
            for v in [s.x_mm, s.y_mm] {
                prop_assert!((2.0 * v).fract() == 0.0, "{v} is off the half-mm grid");
                prop_assert!((0.0..=g.cell_side_mm).contains(&v));
            }
        }
        Ok(())
    })
}

fn sampling_valid_and_deterministic() -> Result<(), String> {
    run(128, any::<u64>(), |seed| {
        let g = CellGeometry::default();
        let a = sample_design(&g, seed).map_err(fail)?;
        prop_assert!(validate_design(&a, &g).is_empty());
        prop_assert_eq!(sample_design(&g, seed).map_err(fail)?, a);
        Ok(())
    })
}

fn oracle_deterministic_and_physical() -> Result<(), String> {
    run(128, any::<u64>(), |seed| {
        let g = CellGeometry::default();
        let grid = FrequencyGrid::default();
        let d = sample_design(&g, seed).map_err(fail)?;
        let a = oracle_evaluate(&d, &g, &grid);
        let b = oracle_evaluate(&d, &g, &grid);
        let bits = |r: &AntennaResponse| r.to_vector().0.iter().map(|v| v.to_bits()).collect::<Vec<_>>();
        prop_assert_eq!(bits(&a), bits(&b));
        prop_assert!(a.return_loss_db.iter().all(|&v| v <= 0.0));
        prop_assert!(a.axial_ratio_db.iter().all(|&v| v >= 0.0));
        prop_assert!(a.gain_dbi.iter().all(|&v| (3.0..=10.0).contains(&v)));
        Ok(())
    })
}

fn ar_min_sensitivity() -> Result<(), String> {
    let g = CellGeometry::default();
    let slots = enumerate_slots(&g);
    let on = |edge: Edge, offset: usize| slots.iter().find(|s| s.edge == edge && s.offset_index == offset).copied();
    // 18 bricks below the diagonal on the bottom edge, 18 above on the left.
    let base: Vec<_> = (1..=18)
        .filter_map(|i| on(Edge::Bottom, i))
        .chain((1..=18).filter_map(|i| on(Edge::Left, i)))
        .collect();
    let before = oracle_features(&UnitCellDesign::from_bricks(base.clone()), &g);
    ensure(base.len() == 36 && before.asym == 0.0, || "reference design is not balanced".into())?;
    let p0 = ResonanceParams::from_features(&before);
    run(64, (0usize..18, 19usize..=45), |(moved, target)| {
        let mut bricks = base.clone();
        bricks[moved] = on(Edge::Left, target).expect("left-edge slot exists");
        let after = oracle_features(&UnitCellDesign::from_bricks(bricks), &g);
        prop_assert!((after.asym - 2.0 / 36.0).abs() < 1e-12);
        let p1 = ResonanceParams::from_features(&after);
        prop_assert!((p1.ar_min_db - p0.ar_min_db - 14.0 / 36.0).abs() < 1e-9);
        Ok(())
    })
}

fn lorentzian(grid: &FrequencyGrid, centre: f64, width: f64, depth: f64) -> AntennaResponse {
    AntennaResponse {
        axial_ratio_db: vec![10.0; grid.points],
        return_loss_db: grid
            .frequencies()
            .iter()
            .map(|f| -depth / (1.0 + ((f - centre) / width).powi(2)))
            .collect(),
        gain_dbi: vec![5.0; grid.points],
    }
}

fn zbw_grid_convergence() -> Result<(), String> {
    run(128, (2.3f64..2.7, 0.03f64..0.08, 15.0f64..30.0), |(centre, width, depth)| {
        let coarse = FrequencyGrid::default();
        let fine = FrequencyGrid::new(2.0, 3.0, 201).map_err(fail)?;
        let a = extract_metrics(&lorentzian(&coarse, centre, width, depth), &coarse).zbw_mhz;
        let b = extract_metrics(&lorentzian(&fine, centre, width, depth), &fine).zbw_mhz;
        prop_assert!((a - b).abs() < 1.0, "{a} vs {b}");
        Ok(())
    })
}

fn segment_order() -> Result<(), String> {
    run(128, (0usize..RESPONSE_DIM, any::<u64>()), |(i, seed)| {
        let g = CellGeometry::default();
        let grid = FrequencyGrid::default();
        let base = oracle_evaluate(&sample_design(&g, seed).map_err(fail)?, &g, &grid);
        let mut v = base.to_vector();
        v.0[i] += 1.0;
        let moved = AntennaResponse::from_vector(&v);
        let k = i % SPECTRUM_POINTS;
        let (ar, rl, gain) = (
            moved.axial_ratio_db[k] - base.axial_ratio_db[k],
            moved.return_loss_db[k] - base.return_loss_db[k],
            moved.gain_dbi[k] - base.gain_dbi[k],
        );
        let expected = match i / SPECTRUM_POINTS {
            0 => (1.0, 0.0, 0.0),
            1 => (0.0, 1.0, 0.0),
            _ => (0.0, 0.0, 1.0),
        };
        let near = |a: f64, b: f64| (a - b).abs() < 1e-9;
        prop_assert!(near(ar, expected.0) && near(rl, expected.1) && near(gain, expected.2));
        Ok(())
    })
}

fn matrix_strategy(rows: std::ops::Range<usize>, cols: usize) -> impl Strategy<Value = Matrix> {
    rows.prop_flat_map(move |r| {
        (proptest::collection::vec(-50.0f64..50.0, r * cols), 0.01f64..20.0)
            .prop_map(move |(v, scale)| Matrix::from_vec(r, cols, v.iter().map(|x| x * scale).collect()).unwrap())
    })
}

/// One batch-norm block with identity weights, so its input is `x` itself.
fn identity_bn(dim: usize) -> Network {
    let arch = Architecture {
        dims: vec![dim, dim],
        activations: vec![Activation::Identity],
        batch_norm: vec![true],
    };
    let mut net = Network::init(&arch, 0).unwrap();
    let w = &mut net.blocks[0].dense.weights;
    for i in 0..dim {
        for j in 0..dim {
            w.set(i, j, if i == j { 1.0 } else { 0.0 });
        }
    }
    net
}

fn column_stats(m: &Matrix, j: usize) -> (f64, f64) {
    let n = m.rows() as f64;
    let mean = (0..m.rows()).map(|i| m.get(i, j)).sum::<f64>() / n;
    let var = (0..m.rows()).map(|i| (m.get(i, j) - mean).powi(2)).sum::<f64>() / n;
    (mean, var)
}

fn batch_norm_statistics() -> Result<(), String> {
    const DIM: usize = 6;
    let net = identity_bn(DIM);
    let eps = net.blocks[0].norm.as_ref().unwrap().epsilon;
    run(128, matrix_strategy(2..40, DIM), |x| {
        let (y, _) = net.forward(&x, Mode::Train).map_err(fail)?;
        for j in 0..DIM {
            let (_, var_in) = column_stats(&x, j);
            let (mean, var) = column_stats(&y, j);
            prop_assert!(mean.abs() < 1e-9, "mean {mean}");
            // Unit variance up to the stabilising epsilon.
            prop_assert!((var - var_in / (var_in + eps)).abs() < 1e-6, "var {var}");
            if var_in > 10.0 {
                prop_assert!((var - 1.0).abs() < 1e-6, "var {var}");
            }
        }
        Ok(())
    })
}

fn infer_mode_independence() -> Result<(), String> {
    let arch = Architecture {
        dims: vec![5, 9, 4],
        activations: vec![Activation::leaky(), Activation::Identity],
        batch_norm: vec![true, false],
    };
    let mut net = Network::init(&arch, 3).unwrap();
    let (_, cache) = net.forward_train(&Matrix::from_vec(4, 5, (0..20).map(|v| v as f64 * 0.3 - 2.0).collect()).unwrap()).unwrap();
    net.update_running_stats(&cache);
    run(64, (matrix_strategy(1..12, 5), any::<u64>()), |(x, seed)| {
        let full = net.predict(&x).map_err(fail)?;
        let mut order: Vec<usize> = (0..x.rows()).collect();
        order.rotate_left((seed % x.rows() as u64) as usize);
        let permuted = net.predict(&x.select_rows(&order)).map_err(fail)?;
        for (k, &i) in order.iter().enumerate() {
            prop_assert_eq!(permuted.row(k), full.row(i));
        }
        Ok(())
    })
}

fn adam_order_invariance() -> Result<(), String> {
    let grads = proptest::collection::vec((proptest::collection::vec(-2.0f64..2.0, 5), proptest::collection::vec(-2.0f64..2.0, 3)), 1..8);
    let init = (proptest::collection::vec(-1.0f64..1.0, 5), proptest::collection::vec(-1.0f64..1.0, 3));
    run(64, (init, grads), |((a0, b0), steps)| {
        let cfg = AdamConfig::default();
        let (mut a1, mut b1) = (a0.clone(), b0.clone());
        let (mut a2, mut b2) = (a0, b0);
        let mut s1 = AdamState::new(cfg, &[5, 3]);
        let mut s2 = AdamState::new(cfg, &[3, 5]);
        for (ga, gb) in &steps {
            let p1 = vec![ParamTensor { values: &mut a1, decay: true }, ParamTensor { values: &mut b1, decay: false }];
            s1.step(p1, &[ga, gb]).map_err(fail)?;
            let p2 = vec![ParamTensor { values: &mut b2, decay: false }, ParamTensor { values: &mut a2, decay: true }];
            s2.step(p2, &[gb, ga]).map_err(fail)?;
        }
        prop_assert_eq!(a1, a2);
        prop_assert_eq!(b1, b2);
        Ok(())
    })
}

fn tiny_gan_config(seed: u64) -> GanTrainingConfig {
    GanTrainingConfig {
        iterations: 20,
        validation_interval: 10,
        seed,
        ..GanTrainingConfig::default()
    }
}

fn architecture_enforced() -> Result<(), String> {
    let ds = generate_dataset(40, &CellGeometry::default(), 5).map_err(|e| e.to_string())?;
    let data = TrainingData::prepare(&ds, Split::holdout(ds.len(), 0.9, 5).unwrap()).map_err(|e| e.to_string())?;
    let trained = train_gan_on(&ds, &data, &tiny_gan_config(5)).map_err(|e| e.to_string())?;
    let good = trained.surrogate.to_model_file();
    let policy = NoisePolicy::FixedZero;
    let back = GanSurrogate::from_model_file(ModelFile::from_bytes(&good.to_bytes()).unwrap(), policy)
        .map_err(|e| e.to_string())?;
    ensure(back.generator == trained.surrogate.generator, || "generator did not round-trip".into())?;
    run(16, (0usize..3, 1usize..64), |(layer, delta)| {
        let mut arch = trained.surrogate.generator.architecture();
        arch.dims[layer + 1] += delta;
        let mut bad = good.clone();
        bad.network = Network::init(&arch, 0).map_err(fail)?;
        match GanSurrogate::from_model_file(bad, policy) {
            Err(e) => prop_assert_eq!(e.exit_code(), 4),
            Ok(_) => prop_assert!(false, "wrong generator {:?} accepted", arch.dims),
        }
        Ok(())
    })
}

fn value_function_algebra() -> Result<(), String> {
    run(256, (1e-6f64..1.0 - 1e-6, 1e-6f64..1.0 - 1e-6), |(sr, sf)| {
        prop_assert!((critic_loss(sr, sf) - (-sr.ln() - (1.0 - sf).ln())).abs() < 1e-12);
        prop_assert!((generator_loss(sf) + sf.ln()).abs() < 1e-12);
        Ok(())
    })
}

fn no_training_on_validation() -> Result<(), String> {
    let ds = generate_dataset(40, &CellGeometry::default(), 8).map_err(|e| e.to_string())?;
    run(4, any::<u64>(), |seed| {
        let data = TrainingData::prepare(&ds, Split::holdout(ds.len(), 0.9, seed).map_err(fail)?).map_err(fail)?;
        let cfg = tiny_gan_config(seed);
        let h = train_gan_on(&ds, &data, &cfg).map_err(fail)?.history;
        for &v in &data.split.validation {
            prop_assert_eq!(h.sample_counts[v], 0);
        }
        let drawn: u64 = h.sample_counts.iter().map(|&c| c as u64).sum();
        prop_assert_eq!(drawn, (cfg.iterations * cfg.batch_size) as u64);
        Ok(())
    })
}

fn nmse_scaling_invariance() -> Result<(), String> {
    let rows = proptest::collection::vec((proptest::collection::vec(-30.0f64..30.0, 7), proptest::collection::vec(-30.0f64..30.0, 7)), 1..6);
    let scale = prop_oneof![-1e3f64..-1e-3, 1e-3f64..1e3];
    run(256, (rows, scale), |(pairs, c)| {
        let (y, p): (Vec<Vec<f64>>, Vec<Vec<f64>>) = pairs.into_iter().unzip();
        if y.iter().flatten().all(|&v| v.abs() < 1e-6) {
            return Ok(());
        }
        let scaled = |m: &[Vec<f64>]| m.iter().map(|r| r.iter().map(|v| c * v).collect::<Vec<_>>()).collect::<Vec<_>>();
        let a = nmse_slices(&y, &p).map_err(fail)?;
        let b = nmse_slices(&scaled(&y), &scaled(&p)).map_err(fail)?;
        prop_assert!((a - b).abs() <= 1e-12 * a.max(1.0), "{a} vs {b}");
        Ok(())
    })
}

fn short_baseline(seed: u64, epochs: usize) -> BaselineConfig {
    BaselineConfig {
        epochs,
        seed,
        ..BaselineConfig::default()
    }
}

fn shared_pipeline() -> Result<(), String> {
    let ds = generate_dataset(40, &CellGeometry::default(), 9).map_err(|e| e.to_string())?;
    let split = Split::holdout(ds.len(), 0.9, 9).map_err(|e| e.to_string())?;
    let data = TrainingData::prepare(&ds, split.clone()).map_err(|e| e.to_string())?;
    let again = TrainingData::prepare(&ds, split).map_err(|e| e.to_string())?;
    ensure(data.fingerprint() == again.fingerprint(), || "pipeline fingerprint is not stable".into())?;
    let gan = train_gan_on(&ds, &data, &tiny_gan_config(9)).map_err(|e| e.to_string())?;
    let (mlp, _) = train_mlp(&ds, &data, &short_baseline(9, 1)).map_err(|e| e.to_string())?;
    let (cnn, _) = train_cnn(&ds, &data, &short_baseline(9, 1)).map_err(|e| e.to_string())?;
    let fp = data.scaler.fingerprint();
    ensure(
        [&gan.surrogate.scaler, &mlp.scaler, &cnn.scaler].iter().all(|s| s.fingerprint() == fp),
        || "models carry different normalisation statistics".into(),
    )?;
    ensure(gan.split == data.split, || "GAN trained on a different split".into())
}

fn baseline_determinism() -> Result<(), String> {
    let ds = generate_dataset(20, &CellGeometry::default(), 4).map_err(|e| e.to_string())?;
    let data = TrainingData::prepare(&ds, Split::holdout(ds.len(), 0.9, 4).unwrap()).map_err(|e| e.to_string())?;
    let cfg = short_baseline(4, 2);
    let (a, ha) = train_mlp(&ds, &data, &cfg).map_err(|e| e.to_string())?;
    let (b, hb) = train_mlp(&ds, &data, &cfg).map_err(|e| e.to_string())?;
    ensure(a == b && ha == hb, || "MLP training is not deterministic".into())?;
    ensure(a.network != build_mlp(4).unwrap(), || "MLP did not train".into())?;
    let cfg = short_baseline(4, 1);
    let (a, ha) = train_cnn(&ds, &data, &cfg).map_err(|e| e.to_string())?;
    let (b, hb) = train_cnn(&ds, &data, &cfg).map_err(|e| e.to_string())?;
    ensure(a == b && ha == hb, || "CNN training is not deterministic".into())
}

fn oracle_screen(n: usize, seed: u64, criteria: &ScreeningCriteria) -> Result<fpcgan_core::screening::ScreeningReport, TestCaseError> {
    let g = CellGeometry::default();
    screen_candidates(&OracleSurrogate::new(g), &g, n, seed, criteria).map_err(fail)
}

fn ranking_invariance() -> Result<(), String> {
    run(32, (any::<u64>(), 0usize..3), |(seed, kind)| {
        let report = oracle_screen(60, seed, &ScreeningCriteria::default())?;
        let transform = |s: f64| match kind {
            0 => 3.0 * s.cbrt() + 7.0,
            1 => s.signum() * s.abs().powf(1.5),
            _ => 0.5 * s - 11.0,
        };
        let mut moved = report.candidates.clone();
        for c in &mut moved {
            c.score = transform(c.score);
        }
        prop_assert_eq!(rank(&moved), report.ranking);
        Ok(())
    })
}

fn feasibility_monotonicity() -> Result<(), String> {
    run(32, (any::<u64>(), 0.0f64..200.0, 0.5f64..6.0, 0.0f64..50.0, 0.0f64..3.0), |(seed, zbw, ar, dz, da)| {
        let strict = ScreeningCriteria {
            min_zbw_mhz: zbw,
            max_ar_min_db: ar,
            ..ScreeningCriteria::default()
        };
        let relaxed = ScreeningCriteria {
            min_zbw_mhz: (zbw - dz).max(0.0),
            max_ar_min_db: ar + da,
            ..strict
        };
        let a = oracle_screen(50, seed, &strict)?;
        let b = oracle_screen(50, seed, &relaxed)?;
        for (x, y) in a.candidates.iter().zip(&b.candidates) {
            prop_assert!(!x.feasible || y.feasible, "candidate {} lost feasibility", x.index);
        }
        Ok(())
    })
}

fn histogram_totals() -> Result<(), String> {
    run(16, (1usize..300, any::<u64>()), |(n, seed)| {
        let report = oracle_screen(n, seed, &ScreeningCriteria::default())?;
        prop_assert_eq!(report.histograms.len(), 5);
        for h in report.histograms.values() {
            prop_assert_eq!(h.total(), n);
        }
        Ok(())
    })
}

fn config_closed_world() -> Result<(), String> {
    const SECTIONS: [&str; 9] = ["", "geometry", "dataset", "models", "gan", "mlp", "cnn", "screening", "screening.criteria.weights"];
    let known = toml::from_str::<toml::Table>(&RunConfig::default().to_toml()).unwrap();
    run(128, (0usize..SECTIONS.len(), "[a-z][a-z_]{0,14}"), |(section, key)| {
        let table = SECTIONS[section]
            .split('.')
            .filter(|s| !s.is_empty())
            .try_fold(&known, |t, name| t.get(name).and_then(|v| v.as_table()));
        if table.is_some_and(|t| t.contains_key(&key)) {
            return Ok(());
        }
        let header = if SECTIONS[section].is_empty() { String::new() } else { format!("[{}]\n", SECTIONS[section]) };
        let text = format!("{header}{key} = 1\n");
        prop_assert!(matches!(RunConfig::from_toml(&text), Err(Error::Config(_))), "accepted {text:?}");
        Ok(())
    })
}
