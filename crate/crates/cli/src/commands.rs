//! Subcommand implementations.

use std::path::{Path, PathBuf};

use num_complex::Complex64;
use serde_json::json;

use qholo::adjoint::{grad_check, GradCheckInstance};
use qholo::correlations::{compute_p, fidelity, MomentSet};
use qholo::grid::{ComplexField, VacuumBatch};
use qholo::medium::{binarize_slices, clip, extract_first_harmonic, ideal_first_harmonic, HologramParams, PumpParams};
use qholo::model::Model;
use qholo::modes::{gram_deviation, gram_matrix};
use qholo::optimizer::{streams, train, TrainState};
use qholo::propagator::SCHEME;

use crate::config::LoadedConfig;
use crate::error::{runtime, CliError};
use crate::output::{
    coeff_csv, decode_complex_volume, encode_complex_volume, hologram_sidecar, loss_csv, matrix_csv, matrix_png,
    sha256_hex, GrayImage, RunDir, RunManifest, VolumeSidecar, ORDER,
};

/// Largest tolerated deviation of the detection-basis Gram matrix from identity.
pub const GRAM_TOLERANCE: f64 = 1e-3;

/// Shared inputs of every subcommand.
#[derive(Debug, Clone)]
pub struct Context {
    pub loaded: LoadedConfig,
    pub out: PathBuf,
    pub threads: usize,
    pub resume: Option<PathBuf>,
}

impl Context {
    fn manifest(&self, subcommand: &str) -> RunManifest {
        let c = &self.loaded.config;
        RunManifest {
            tool: "qholo".into(),
            version: env!("CARGO_PKG_VERSION").into(),
            propagation_scheme: SCHEME.into(),
            subcommand: subcommand.into(),
            seed: c.seed,
            threads: self.threads,
            config_hash: self.loaded.hash_hex(),
            trajectory_hash: hex::encode(c.trajectory_hash()),
            config: serde_json::to_value(c).expect("config serialises"),
            artifacts: Vec::new(),
            timings: Vec::new(),
        }
    }

    fn load_state(&self, path: &Path) -> Result<TrainState, CliError> {
        let bytes = std::fs::read(path).map_err(|e| CliError::Io(format!("{}: {e}", path.display())))?;
        TrainState::from_bytes(&bytes, &self.loaded.config.trajectory_hash()).map_err(runtime)
    }

    /// Pump and hologram from the config, or from `--resume` when given.
    fn params(&self) -> Result<(PumpParams, HologramParams), CliError> {
        let mut pump = self.loaded.pump()?;
        let mut holo = self.loaded.hologram()?;
        if let Some(path) = &self.resume {
            let s = self.load_state(path)?;
            if s.pump.len() != pump.coeffs.len() || s.holo.shape() != holo.raw_coeffs.shape() {
                return Err(CliError::MetadataMismatch("checkpoint parameter shapes differ from the config".into()));
            }
            pump.coeffs = s.pump;
            holo.raw_coeffs = s.holo;
        }
        Ok((pump, holo))
    }
}

/// Containment, basis orthonormality and energy conservation (checked at parse time).
pub fn preflight(loaded: &LoadedConfig) -> Result<Model, CliError> {
    let model = loaded.model()?;
    let length = model.grid.length();
    for (name, basis) in [("signal", &model.basis_s), ("idler", &model.basis_i)] {
        let dev = gram_deviation(&gram_matrix(basis, model.grid, length));
        if dev > GRAM_TOLERANCE {
            return Err(CliError::Preflight(format!(
                "{name} basis Gram matrix deviates from identity by {dev:.3e} at the crystal exit (limit {GRAM_TOLERANCE:e})"
            )));
        }
    }
    Ok(model)
}

fn moments_json(m: &MomentSet, floored_mass: f64) -> String {
    let (ms, mi) = m.phi.shape();
    let phi_sq: Vec<Vec<f64>> = (0..ms).map(|a| (0..mi).map(|b| m.phi[(a, b)].norm_sqr()).collect()).collect();
    let v = json!({
        "batch_size": m.batch_size,
        "sigma0_sq": m.sigma0_sq,
        "labels_signal": m.labels_s,
        "labels_idler": m.labels_i,
        "n_signal": m.n_s,
        "n_idler": m.n_i,
        "phi_abs_sq": phi_sq,
        "exchange_ratio": m.exchange_ratio(),
        "floored_mass": floored_mass,
    });
    serde_json::to_string_pretty(&v).expect("json")
}

fn simulate_batch(model: &Model, pump: &PumpParams, holo: &HologramParams, vacuum: &VacuumBatch) -> Result<MomentSet, CliError> {
    let medium = model.medium(pump, holo).map_err(runtime)?;
    let coeffs = model.simulate(&medium, vacuum).map_err(runtime)?;
    coeffs
        .moments(model.sigma0_sq, model.basis_s.labels(), model.basis_i.labels())
        .map_err(runtime)
}

pub fn run_simulate(ctx: &Context) -> Result<PathBuf, CliError> {
    let model = preflight(&ctx.loaded)?;
    let (pump, holo) = ctx.params()?;
    let c = &ctx.loaded.config;
    let vacuum = VacuumBatch::new(
        c.seed,
        streams::SIMULATE,
        c.simulate.batch_size,
        model.grid,
        model.sigma0_sq,
        c.simulate.antithetic,
    )
    .and_then(|v| if c.simulate.reflection { v.with_reflection() } else { Ok(v) })
    .map_err(runtime)?;
    let mut rd = RunDir::create(&ctx.out)?;
    rd.phase("setup");
    let moments = simulate_batch(&model, &pump, &holo, &vacuum)?;
    let p = compute_p(&moments).map_err(runtime)?;
    rd.phase("simulate");
    rd.write("P.csv", matrix_csv(&p).as_bytes())?;
    rd.write("moments.json", moments_json(&moments, p.floored_mass).as_bytes())?;
    if c.output.png {
        rd.write_png("P.png", &matrix_png(&p.p), "P (rows: signal modes, columns: idler modes)")?;
    }
    if c.target.is_some() {
        let target = qholo::optimizer::make_target(&c.target_spec()?, &model.basis_s, &model.basis_i).map_err(runtime)?;
        let f = fidelity(&p, &target).map_err(runtime)?;
        rd.write("fidelity.json", json!({ "fidelity": f }).to_string().as_bytes())?;
    }
    rd.phase("write");
    rd.finish(ctx.manifest("simulate"))
}

/// Clipped hologram per slice.
fn hologram_slices(model: &Model, holo: &HologramParams) -> Result<Vec<ComplexField>, CliError> {
    let grid = model.grid;
    let functions = holo.transverse_functions(grid);
    let segs: Vec<ComplexField> = (0..holo.n_seg)
        .map(|s| {
            let mut u = holo.synthesize_segment(s, &functions, grid);
            for v in &mut u.values {
                *v = clip(*v);
            }
            u
        })
        .collect();
    (0..grid.nz)
        .map(|j| holo.segment_of(j, grid.nz).map(|s| segs[s].clone()).map_err(runtime))
        .collect()
}

/// Learned parameter artifacts: hologram volume, cross-sections, pump.
fn write_parameters(
    rd: &mut RunDir,
    ctx: &Context,
    model: &Model,
    pump: &PumpParams,
    holo: &HologramParams,
) -> Result<(), CliError> {
    let grid = model.grid;
    let slices = hologram_slices(model, holo)?;
    let raw: Vec<Vec<Complex64>> = slices.iter().map(|s| s.values.clone()).collect();
    let bytes = encode_complex_volume(&raw);
    let sidecar = hologram_sidecar(grid, &bytes, model.params.poling_period);
    rd.write("hologram.c64", &bytes)?;
    rd.write("hologram.json", serde_json::to_string_pretty(&sidecar).expect("json").as_bytes())?;
    rd.write("pump_coeffs.csv", coeff_csv(&pump.basis.labels(), &pump.coeffs).as_bytes())?;
    if !ctx.loaded.config.output.png {
        return Ok(());
    }
    let half = (0.5 * holo.basis.waist() / grid.dy).round() as usize;
    let planes = [grid.ny / 2, (grid.ny / 2 + half).min(grid.ny - 1)];
    for (k, iy) in planes.iter().enumerate() {
        // Rows are z (entrance at the top), columns are x.
        let vals: Vec<f64> = (0..grid.nz)
            .flat_map(|j| {
                let s = &slices[j];
                (0..grid.nx).map(move |ix| s.at(ix, *iy).re)
            })
            .collect();
        let img = GrayImage::from_values(grid.nx, grid.nz, &vals, -1.0, 1.0, 4);
        let quantity = format!("Re A in the x-z plane at y = {:.3e} m", grid.y(*iy));
        rd.write_png(&format!("crystal_xz_{k}.png"), &img, &quantity)?;
    }
    let mag: Vec<f64> = slices[0].values.iter().map(|v| v.norm()).collect();
    rd.write_png(
        "crystal_xy_entrance.png",
        &GrayImage::from_values(grid.nx, grid.ny, &mag, 0.0, 1.0, 4),
        "|A| in the x-y plane at the crystal entrance",
    )?;
    let e0 = pump.synthesize(0.0, grid);
    let norm = pump.normalization(grid).map_err(runtime)?;
    let pm: Vec<f64> = e0.values.iter().map(|v| v.norm() * norm).collect();
    let hi = pm.iter().cloned().fold(0.0, f64::max);
    rd.write_png(
        "pump_magnitude.png",
        &GrayImage::from_values(grid.nx, grid.ny, &pm, 0.0, hi, 4),
        "|E_p| at the crystal entrance (sqrt(W)/m)",
    )?;
    Ok(())
}

pub fn run_optimize(ctx: &Context) -> Result<PathBuf, CliError> {
    preflight(&ctx.loaded)?;
    let problem = ctx.loaded.problem()?;
    let cfg = ctx.loaded.config.opt_config();
    let thash = ctx.loaded.config.trajectory_hash();
    let state = match &ctx.resume {
        Some(p) => ctx.load_state(p)?,
        None => problem
            .initial_state(cfg.seed, ctx.loaded.config.crystal.init_std)
            .map_err(runtime)?,
    };
    if state.pump.len() != problem.pump.coeffs.len() || state.holo.shape() != problem.holo.raw_coeffs.shape() {
        return Err(CliError::MetadataMismatch("checkpoint parameter shapes differ from the config".into()));
    }
    let mut rd = RunDir::create(&ctx.out)?;
    rd.phase("setup");
    let every = cfg.checkpoint_every;
    let mut io_error = None;
    let result = train(&problem, &cfg, state, |s, info| {
        if info.step % 10 == 0 {
            eprintln!("step {:>5}  loss {:.5}  batch fidelity {:.4}", info.step, info.loss, info.fidelity);
        }
        if every > 0 && s.step % every == 0 {
            if let Err(e) = rd.write(&format!("checkpoints/step_{:06}.ckpt", s.step), &s.to_bytes(&thash)) {
                io_error = Some(e);
                return Err(qholo::SimError::Checkpoint("checkpoint write failed".into()));
            }
        }
        Ok(())
    });
    let result = match (result, io_error) {
        (_, Some(e)) => {
            rd.abort();
            return Err(e);
        }
        (Err(e), None) => {
            rd.abort();
            return Err(runtime(e));
        }
        (Ok(r), None) => r,
    };
    rd.phase("train");
    let (pump, holo) = problem.params(&result.state);
    rd.write("final.ckpt", &result.state.to_bytes(&thash))?;
    rd.write("loss.csv", loss_csv(&result.state.loss_history).as_bytes())?;
    rd.write("P.csv", matrix_csv(&result.final_p).as_bytes())?;
    rd.write(
        "moments.json",
        moments_json(&result.final_moments, result.final_p.floored_mass).as_bytes(),
    )?;
    rd.write(
        "result.json",
        serde_json::to_string_pretty(&json!({
            "steps": result.state.step,
            "final_loss": result.final_loss,
            "final_fidelity": result.final_fidelity,
            "eval_batch_size": cfg.eval_batch_size,
        }))
        .expect("json")
        .as_bytes(),
    )?;
    if ctx.loaded.config.output.png {
        rd.write_png("P.png", &matrix_png(&result.final_p.p), "P (rows: signal modes, columns: idler modes)")?;
    }
    write_parameters(&mut rd, ctx, &problem.model, &pump, &holo)?;
    rd.phase("write");
    eprintln!(
        "final fidelity {:.4} (evaluation batch {})",
        result.final_fidelity, cfg.eval_batch_size
    );
    rd.finish(ctx.manifest("optimize"))
}

pub fn run_export(ctx: &Context) -> Result<PathBuf, CliError> {
    if ctx.resume.is_none() {
        return Err(CliError::Schema {
            key: "--resume".into(),
            message: "export needs a checkpoint".into(),
        });
    }
    let model = preflight(&ctx.loaded)?;
    let (pump, holo) = ctx.params()?;
    let mut rd = RunDir::create(&ctx.out)?;
    write_parameters(&mut rd, ctx, &model, &pump, &holo)?;
    rd.phase("export");
    rd.finish(ctx.manifest("export"))
}

fn sidecar_path(volume: &Path) -> PathBuf {
    volume.with_extension("json")
}

pub fn run_binarize(ctx: &Context, hologram: &Path) -> Result<PathBuf, CliError> {
    let grid = ctx.loaded.resolved.grid;
    let params = ctx.loaded.resolved.params;
    let read = |p: &Path| std::fs::read(p).map_err(|e| CliError::Io(format!("{}: {e}", p.display())));
    let bytes = read(hologram)?;
    let meta: VolumeSidecar = serde_json::from_slice(&read(&sidecar_path(hologram))?)
        .map_err(|e| CliError::MetadataMismatch(format!("sidecar: {e}")))?;
    if meta.dtype != "complex64" || meta.endianness != "little" || meta.order != ORDER {
        return Err(CliError::MetadataMismatch("unsupported volume layout".into()));
    }
    if meta.sha256 != sha256_hex(&bytes) {
        return Err(CliError::MetadataMismatch("hologram checksum does not match its sidecar".into()));
    }
    let expect_dims = [grid.nx, grid.ny, grid.nz];
    let expect_pitch = [grid.dx, grid.dy, grid.dz];
    let pitch_ok = meta
        .pitch
        .iter()
        .zip(expect_pitch)
        .all(|(a, b)| (a - b).abs() <= 1e-9 * b.abs());
    if meta.dims != expect_dims || !pitch_ok {
        return Err(CliError::MetadataMismatch(format!(
            "hologram dims {:?} pitch {:?} differ from the config grid {:?} {:?}",
            meta.dims, meta.pitch, expect_dims, expect_pitch
        )));
    }
    let slices: Vec<ComplexField> = decode_complex_volume(&bytes, meta.dims)?
        .into_iter()
        .map(|v| ComplexField::from_values(grid, v).map_err(runtime))
        .collect::<Result<_, _>>()?;
    let s = ctx.loaded.config.binarize.subsamples_per_period;
    let refs: Vec<&ComplexField> = slices.iter().collect();
    let vol = binarize_slices(&refs, params.poling_period, grid, s).map_err(runtime)?;
    // Harmonic check against the slice each whole period sits in.
    let plane = grid.nx * grid.ny;
    let mut worst: f64 = 0.0;
    for q in 0..vol.whole_periods() {
        let h = extract_first_harmonic(&vol, q..q + 1);
        let j = (((q as f64 + 0.5) * params.poling_period / grid.dz).floor() as usize).min(grid.nz - 1);
        for p in 0..plane {
            worst = worst.max((h[p] - ideal_first_harmonic(slices[j].values[p])).norm());
        }
    }
    let mut rd = RunDir::create(&ctx.out)?;
    let raw: Vec<u8> = vol.values.iter().map(|v| *v as u8).collect();
    let side = VolumeSidecar {
        dtype: "int8".into(),
        endianness: "little".into(),
        order: ORDER.into(),
        dims: [vol.nx, vol.ny, vol.nz],
        pitch: [vol.dx, vol.dy, vol.dz],
        units: "m".into(),
        quantity: "poling sign (+1 / -1)".into(),
        sha256: sha256_hex(&raw),
        poling_period: Some(vol.poling_period),
        subsamples_per_period: Some(vol.subsamples_per_period),
    };
    rd.write("poling.i8", &raw)?;
    rd.write("poling.json", serde_json::to_string_pretty(&side).expect("json").as_bytes())?;
    rd.write(
        "poling_check.json",
        serde_json::to_string_pretty(&json!({
            "whole_periods": vol.whole_periods(),
            "max_single_period_harmonic_error": worst,
        }))
        .expect("json")
        .as_bytes(),
    )?;
    rd.phase("binarize");
    rd.finish(ctx.manifest("binarize"))
}

/// Finite-difference check on the built-in small instance.
pub fn run_gradcheck(out: &Path, seed: u64, threads: usize) -> Result<(PathBuf, bool), CliError> {
    let instance = GradCheckInstance::small(seed).map_err(runtime)?;
    let mut rd = RunDir::create(out)?;
    let report = grad_check(&instance, 1e-6, 1e-5).map_err(runtime)?;
    rd.phase("gradcheck");
    rd.write("gradcheck.txt", report.to_text().as_bytes())?;
    rd.write("gradcheck.csv", report.to_csv().as_bytes())?;
    let manifest = RunManifest {
        tool: "qholo".into(),
        version: env!("CARGO_PKG_VERSION").into(),
        propagation_scheme: SCHEME.into(),
        subcommand: "gradcheck".into(),
        seed,
        threads,
        config_hash: String::new(),
        trajectory_hash: String::new(),
        config: serde_json::Value::Null,
        artifacts: Vec::new(),
        timings: Vec::new(),
    };
    Ok((rd.finish(manifest)?, report.pass))
}
