//! Run configuration: JSON with mandatory units, strict keys and a content hash.

use std::path::Path;

use num_complex::Complex64;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use qholo::grid::{GridSpec, SIGMA0_SQ};
use qholo::matrix::{CMatrix, RMatrix};
use qholo::medium::{HologramParams, InteractionParams, PumpParams};
use qholo::model::Model;
use qholo::modes::{ModeBasis, ModeIndex};
use qholo::optimizer::{make_target, LossWeights, OptConfig, TargetSpec, TrainProblem};
use qholo::SimError;

use crate::error::CliError;
use crate::units::{parse_quantity, Dimension};

pub const SCHEMA_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub schema_version: u32,
    #[serde(default)]
    pub seed: u64,
    pub grid: GridBlock,
    pub interaction: InteractionBlock,
    pub pump: PumpBlock,
    pub crystal: CrystalBlock,
    pub detection: DetectionBlock,
    #[serde(default)]
    pub target: Option<TargetBlock>,
    #[serde(default)]
    pub optimizer: OptimizerBlock,
    #[serde(default)]
    pub simulate: SimulateBlock,
    #[serde(default)]
    pub binarize: BinarizeBlock,
    #[serde(default)]
    pub output: OutputBlock,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GridBlock {
    pub nx: usize,
    pub ny: usize,
    pub dx: String,
    pub dy: String,
    pub nz: usize,
    pub dz: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct InteractionBlock {
    pub lambda_p: String,
    pub lambda_s: String,
    pub lambda_i: String,
    pub n_p: f64,
    pub n_s: f64,
    pub n_i: f64,
    pub kappa: String,
    /// Exactly one of `poling_period` and `delta_k`.
    #[serde(default)]
    pub poling_period: Option<String>,
    #[serde(default)]
    pub delta_k: Option<String>,
    pub pump_power: String,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Family {
    LG,
    HG,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CoeffEntry {
    pub mode: String,
    pub re: f64,
    pub im: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PumpBlock {
    pub family: Family,
    pub waist: String,
    /// All modes with `2p + |l|` (LG) or `n + m` (HG) up to this order.
    pub max_order: u32,
    /// Initial coefficients by mode label; omitted modes start at zero.
    /// Default: the fundamental mode only.
    #[serde(default)]
    pub coefficients: Option<Vec<CoeffEntry>>,
    #[serde(default)]
    pub trainable: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CrystalBlock {
    pub family: Family,
    pub waist: String,
    pub max_order: u32,
    pub n_seg: usize,
    /// Fixed complex offset `[re, im]` added to the synthesised hologram before clipping.
    pub background: [f64; 2],
    /// Standard deviation of the seeded initial coefficients per quadrature.
    #[serde(default)]
    pub init_std: f64,
    #[serde(default)]
    pub trainable: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DetectionBlock {
    pub family: Family,
    pub waist: String,
    /// LG: radial index range `0..=p_max` and `|l| <= l_max`.
    /// HG: `n` in `0..=n_max`, `m` in `0..=m_max`.
    pub index_max: [u32; 2],
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum TargetBlock {
    LgQudit { d: u32 },
    LgHighOrderQubit { l: u32 },
    HgQuquad,
    Custom { matrix: Vec<Vec<f64>> },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct OptimizerBlock {
    pub learning_rate: f64,
    /// End point of a cosine decay; constant step size when absent.
    pub learning_rate_final: Option<f64>,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    pub iterations: u64,
    pub batch_size: usize,
    pub eval_batch_size: usize,
    pub loss_weights: LossWeightsBlock,
    pub antithetic: bool,
    pub reflection: bool,
    pub fixed_noise: bool,
    pub checkpoint_every: u64,
}

impl Default for OptimizerBlock {
    fn default() -> Self {
        let d = OptConfig::default();
        Self {
            learning_rate: d.learning_rate,
            learning_rate_final: d.learning_rate_final,
            beta1: d.beta1,
            beta2: d.beta2,
            epsilon: d.epsilon,
            iterations: d.iterations,
            batch_size: d.batch_size,
            eval_batch_size: d.eval_batch_size,
            loss_weights: LossWeightsBlock::default(),
            antithetic: d.antithetic,
            reflection: d.reflection,
            fixed_noise: d.fixed_noise,
            checkpoint_every: 50,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LossWeightsBlock {
    pub l1: f64,
    pub fidelity: f64,
}

impl Default for LossWeightsBlock {
    fn default() -> Self {
        let d = LossWeights::default();
        Self {
            l1: d.l1,
            fidelity: d.fidelity,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SimulateBlock {
    pub batch_size: usize,
    pub antithetic: bool,
    pub reflection: bool,
}

impl Default for SimulateBlock {
    fn default() -> Self {
        Self {
            batch_size: 2048,
            antithetic: true,
            reflection: true,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct BinarizeBlock {
    pub subsamples_per_period: usize,
}

impl Default for BinarizeBlock {
    fn default() -> Self {
        Self {
            subsamples_per_period: 64,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct OutputBlock {
    pub directory: String,
    pub png: bool,
}

impl Default for OutputBlock {
    fn default() -> Self {
        Self {
            directory: "qholo-run".into(),
            png: true,
        }
    }
}

/// Parsed configuration together with its SI values and hashes.
#[derive(Debug, Clone)]
pub struct LoadedConfig {
    pub config: RunConfig,
    pub resolved: Resolved,
    /// SHA-256 of the canonical JSON of `config`.
    pub hash: [u8; 32],
}

/// SI values derived from a [`RunConfig`].
#[derive(Debug, Clone)]
pub struct Resolved {
    pub grid: GridSpec,
    pub params: InteractionParams,
    pub pump_power: f64,
    pub pump_basis: ModeBasis,
    pub holo_basis: ModeBasis,
    pub basis_s: ModeBasis,
    pub basis_i: ModeBasis,
}

fn q(field: &str, value: &str, dim: Dimension) -> Result<f64, CliError> {
    parse_quantity(value, dim).map_err(|e| CliError::Unit {
        key: field.to_string(),
        message: e.to_string(),
    })
}

fn family_basis(family: Family, max_order: u32, waist: f64, lambda: f64, n: f64) -> qholo::Result<ModeBasis> {
    match family {
        Family::LG => ModeBasis::lg_orders(max_order, waist, lambda, n),
        Family::HG => ModeBasis::hg_orders(max_order, waist, lambda, n),
    }
}

fn schema_err(key: &str, message: impl Into<String>) -> CliError {
    CliError::Schema {
        key: key.to_string(),
        message: message.into(),
    }
}

fn core_schema(key: &str) -> impl Fn(SimError) -> CliError + '_ {
    move |e| schema_err(key, e.to_string())
}

impl RunConfig {
    /// Parses JSON text; unknown and duplicate keys are errors.
    pub fn from_json(text: &str) -> Result<Self, CliError> {
        let cfg: RunConfig = serde_json::from_str(text).map_err(|e| {
            let msg = e.to_string();
            if msg.starts_with("unknown field") || msg.starts_with("unknown variant") {
                CliError::UnknownKey(msg)
            } else {
                CliError::Schema {
                    key: format!("line {} column {}", e.line(), e.column()),
                    message: msg,
                }
            }
        })?;
        if cfg.schema_version != SCHEMA_VERSION {
            return Err(schema_err(
                "schema_version",
                format!("unsupported version {}, expected {SCHEMA_VERSION}", cfg.schema_version),
            ));
        }
        Ok(cfg)
    }

    pub fn canonical_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serialises")
    }

    pub fn hash(&self) -> [u8; 32] {
        Sha256::digest(self.canonical_json().as_bytes()).into()
    }

    /// Hash of everything that determines the optimisation trajectory; the
    /// iteration count, checkpoint cadence, evaluation and output settings are
    /// excluded so a checkpoint can be continued for more steps.
    pub fn trajectory_hash(&self) -> [u8; 32] {
        let mut c = self.clone();
        c.optimizer.iterations = 0;
        c.optimizer.checkpoint_every = 0;
        c.optimizer.eval_batch_size = 0;
        c.simulate = SimulateBlock::default();
        c.binarize = BinarizeBlock::default();
        c.output = OutputBlock::default();
        c.hash()
    }

    pub fn resolve(&self) -> Result<Resolved, CliError> {
        let g = &self.grid;
        let grid = GridSpec::new(
            g.nx,
            g.ny,
            q("grid.dx", &g.dx, Dimension::Length)?,
            q("grid.dy", &g.dy, Dimension::Length)?,
            g.nz,
            q("grid.dz", &g.dz, Dimension::Length)?,
        )
        .map_err(core_schema("grid"))?;
        let it = &self.interaction;
        let lp = q("interaction.lambda_p", &it.lambda_p, Dimension::Length)?;
        let ls = q("interaction.lambda_s", &it.lambda_s, Dimension::Length)?;
        let li = q("interaction.lambda_i", &it.lambda_i, Dimension::Length)?;
        let kappa = q("interaction.kappa", &it.kappa, Dimension::InverseSqrtPower)?;
        let pump_power = q("interaction.pump_power", &it.pump_power, Dimension::Power)?;
        let energy = |e: SimError| match e {
            SimError::EnergyConservation(r) => CliError::Unit {
                key: "interaction.lambda_*".into(),
                message: format!("wavelengths violate energy conservation (1/λp − 1/λs − 1/λi = {r:.3e} 1/m)"),
            },
            other => schema_err("interaction", other.to_string()),
        };
        let params = match (&it.poling_period, &it.delta_k) {
            (Some(p), None) => {
                let lam = q("interaction.poling_period", p, Dimension::Length)?;
                InteractionParams::with_poling_period(lp, ls, li, it.n_p, it.n_s, it.n_i, kappa, lam).map_err(energy)?
            }
            (None, Some(d)) => {
                let dk = q("interaction.delta_k", d, Dimension::InverseLength)?;
                InteractionParams::with_phase_mismatch(lp, ls, li, it.n_p, it.n_s, it.n_i, kappa, dk).map_err(energy)?
            }
            _ => {
                return Err(schema_err(
                    "interaction",
                    "exactly one of `poling_period` and `delta_k` must be given",
                ))
            }
        };
        if !(pump_power > 0.0) {
            return Err(schema_err("interaction.pump_power", "must be positive"));
        }
        let pw = q("pump.waist", &self.pump.waist, Dimension::Length)?;
        let pump_basis =
            family_basis(self.pump.family, self.pump.max_order, pw, lp, params.n_p).map_err(core_schema("pump"))?;
        let cw = q("crystal.waist", &self.crystal.waist, Dimension::Length)?;
        let holo_basis = family_basis(self.crystal.family, self.crystal.max_order, cw, ls, params.n_s)
            .map_err(core_schema("crystal"))?;
        let dw = q("detection.waist", &self.detection.waist, Dimension::Length)?;
        let [a, b] = self.detection.index_max;
        let basis_s = match self.detection.family {
            Family::LG => ModeBasis::lg(a, b, dw, ls, params.n_s),
            Family::HG => ModeBasis::hg(a, b, dw, ls, params.n_s),
        }
        .map_err(core_schema("detection"))?;
        let basis_i = basis_s.retuned(li, params.n_i).map_err(core_schema("detection"))?;
        if self.crystal.n_seg == 0 || grid.nz % self.crystal.n_seg != 0 {
            return Err(schema_err(
                "crystal.n_seg",
                format!("{} does not divide grid.nz = {}", self.crystal.n_seg, grid.nz),
            ));
        }
        if !(self.crystal.init_std >= 0.0) {
            return Err(schema_err("crystal.init_std", "must be non-negative"));
        }
        self.opt_config().validate().map_err(core_schema("optimizer"))?;
        let sim = &self.simulate;
        let sim_ok = sim.batch_size >= 2
            && (!sim.antithetic || sim.batch_size % 2 == 0)
            && (!sim.reflection || (sim.antithetic && sim.batch_size % 4 == 0));
        if !sim_ok {
            return Err(schema_err(
                "simulate",
                format!(
                    "batch_size {} does not fit the sampling scheme (antithetic: even, reflection: antithetic and divisible by 4)",
                    sim.batch_size
                ),
            ));
        }
        if self.simulate.batch_size < 2 {
            return Err(schema_err("simulate.batch_size", "must be at least 2"));
        }
        if self.simulate.antithetic && self.simulate.batch_size % 2 != 0 {
            return Err(schema_err("simulate.batch_size", "antithetic sampling needs an even batch"));
        }
        Ok(Resolved {
            grid,
            params,
            pump_power,
            pump_basis,
            holo_basis,
            basis_s,
            basis_i,
        })
    }

    pub fn opt_config(&self) -> OptConfig {
        let o = &self.optimizer;
        OptConfig {
            learning_rate: o.learning_rate,
            learning_rate_final: o.learning_rate_final,
            beta1: o.beta1,
            beta2: o.beta2,
            epsilon: o.epsilon,
            iterations: o.iterations,
            batch_size: o.batch_size,
            eval_batch_size: o.eval_batch_size,
            seed: self.seed,
            weights: LossWeights {
                l1: o.loss_weights.l1,
                fidelity: o.loss_weights.fidelity,
            },
            antithetic: o.antithetic,
            reflection: o.reflection,
            fixed_noise: o.fixed_noise,
            checkpoint_every: o.checkpoint_every,
        }
    }

    pub fn target_spec(&self) -> Result<TargetSpec, CliError> {
        let t = self
            .target
            .as_ref()
            .ok_or_else(|| schema_err("target", "required for this subcommand"))?;
        Ok(match t {
            TargetBlock::LgQudit { d } => TargetSpec::LgQudit { d: *d },
            TargetBlock::LgHighOrderQubit { l } => TargetSpec::LgHighOrderQubit { l: *l },
            TargetBlock::HgQuquad => TargetSpec::HgQuquad,
            TargetBlock::Custom { matrix } => {
                let rows = matrix.len();
                let cols = matrix.first().map_or(0, Vec::len);
                if matrix.iter().any(|r| r.len() != cols) {
                    return Err(schema_err("target.matrix", "rows have different lengths"));
                }
                TargetSpec::Custom(
                    RMatrix::from_vec(rows, cols, matrix.concat())
                        .ok_or_else(|| schema_err("target.matrix", "bad shape"))?,
                )
            }
        })
    }
}

impl LoadedConfig {
    pub fn from_json(text: &str, seed_override: Option<u64>) -> Result<Self, CliError> {
        let mut config = RunConfig::from_json(text)?;
        if let Some(s) = seed_override {
            config.seed = s;
        }
        let resolved = config.resolve()?;
        let hash = config.hash();
        Ok(Self { config, resolved, hash })
    }

    pub fn load(path: &Path, seed_override: Option<u64>) -> Result<Self, CliError> {
        let bytes = std::fs::read(path).map_err(|e| CliError::Io(format!("{}: {e}", path.display())))?;
        let text = String::from_utf8(bytes)
            .map_err(|_| schema_err(&path.display().to_string(), "config is not valid UTF-8"))?;
        Self::from_json(&text, seed_override)
    }

    pub fn hash_hex(&self) -> String {
        hex::encode(self.hash)
    }

    /// Pump with the configured initial coefficients.
    pub fn pump(&self) -> Result<PumpParams, CliError> {
        let r = &self.resolved;
        let basis = r.pump_basis.clone();
        let trainable = self.config.pump.trainable;
        match &self.config.pump.coefficients {
            None => PumpParams::fundamental(basis, r.pump_power, trainable).map_err(core_schema("pump")),
            Some(entries) => {
                let mut coeffs = vec![Complex64::new(0.0, 0.0); basis.len()];
                for e in entries {
                    let idx = ModeIndex::parse_label(&e.mode)
                        .ok_or_else(|| schema_err("pump.coefficients", format!("bad mode label `{}`", e.mode)))?;
                    let k = basis.position(idx).ok_or_else(|| {
                        schema_err("pump.coefficients", format!("{} is not in the pump basis", e.mode))
                    })?;
                    coeffs[k] = Complex64::new(e.re, e.im);
                }
                PumpParams::new(basis, coeffs, r.pump_power, trainable).map_err(core_schema("pump.coefficients"))
            }
        }
    }

    /// Hologram with zero coefficients (noise is added by the train state).
    pub fn hologram(&self) -> Result<HologramParams, CliError> {
        let c = &self.config.crystal;
        let basis = self.resolved.holo_basis.clone();
        let k = basis.len();
        HologramParams::new(
            basis,
            c.n_seg,
            CMatrix::zeros(c.n_seg, k),
            Complex64::new(c.background[0], c.background[1]),
            c.trainable,
        )
        .map_err(core_schema("crystal"))
    }

    /// Builds the model; containment failures are preflight errors.
    pub fn model(&self) -> Result<Model, CliError> {
        let r = &self.resolved;
        Model::new(
            r.grid,
            r.params,
            r.pump_basis.clone(),
            r.holo_basis.clone(),
            self.config.crystal.n_seg,
            r.basis_s.clone(),
            r.basis_i.clone(),
            SIGMA0_SQ,
        )
        .map_err(|e| CliError::Preflight(e.to_string()))
    }

    pub fn problem(&self) -> Result<TrainProblem, CliError> {
        let model = self.model()?;
        let target = make_target(&self.config.target_spec()?, &model.basis_s, &model.basis_i)
            .map_err(core_schema("target"))?;
        Ok(TrainProblem {
            model,
            pump: self.pump()?,
            holo: self.hologram()?,
            target,
        })
    }
}
