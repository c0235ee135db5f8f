//! Targets, loss, Adam and the training loop.

use num_complex::Complex64;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::adjoint::{ParamGradient, SpdcObjective};
use crate::correlations::{fidelity_matrix, CorrelationMatrix, MomentSet};
use crate::error::{Result, SimError};
use crate::grid::VacuumBatch;
use crate::matrix::{CMatrix, RMatrix};
use crate::medium::{HologramParams, PumpParams};
use crate::model::Model;
use crate::modes::{ModeBasis, ModeIndex};

/// Weights of the elementwise L1 term and the `1 − fidelity` term.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossWeights {
    pub l1: f64,
    pub fidelity: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self { l1: 1.0, fidelity: 1.0 }
    }
}

/// `w1·Σ|P − T| + w2·(1 − Σ√(P·T))`.
pub fn loss(p: &CorrelationMatrix, target: &CorrelationMatrix, weights: LossWeights) -> Result<f64> {
    loss_matrix(&p.p, &target.p, weights)
}

pub(crate) fn loss_matrix(p: &RMatrix, target: &RMatrix, weights: LossWeights) -> Result<f64> {
    let f = fidelity_matrix(p, target)?;
    let l1: f64 = p.iter().zip(target.iter()).map(|(a, b)| (a - b).abs()).sum();
    Ok(weights.l1 * l1 + weights.fidelity * (1.0 - f))
}

/// `∂L/∂P` for `P` on the simplex; components along the all-ones direction are
/// irrelevant because the normalisation adjoint removes them.
pub(crate) fn loss_p_adjoint(p: &RMatrix, target: &RMatrix, weights: LossWeights) -> RMatrix {
    RMatrix::from_fn(p.rows(), p.cols(), |m, n| {
        let (a, t) = (p[(m, n)], target[(m, n)]);
        let sign = if a > t {
            1.0
        } else if a < t {
            -1.0
        } else {
            0.0
        };
        let fid = if a > 0.0 { -0.5 * (t / a).sqrt() } else { 0.0 };
        weights.l1 * sign + weights.fidelity * fid
    })
}

/// Desired two-photon correlation.
#[derive(Debug, Clone, PartialEq)]
pub enum TargetSpec {
    /// `1/d` on `(l, l)` for `l = 1..=d`.
    LgQudit { d: u32 },
    /// `1/2` on `(l, −l)` and `(−l, l)`.
    LgHighOrderQubit { l: u32 },
    /// `1/4` on `(HG_n0, HG_n0)` for `n = 0..=3`.
    HgQuquad,
    /// Explicit matrix over the configured bases.
    Custom(RMatrix),
}

fn position(basis: &ModeBasis, idx: ModeIndex) -> Result<usize> {
    basis.position(idx).ok_or_else(|| SimError::ModeNotInBasis(idx.label()))
}

/// Target distribution over `(signal mode, idler mode)`.
pub fn make_target(spec: &TargetSpec, basis_s: &ModeBasis, basis_i: &ModeBasis) -> Result<CorrelationMatrix> {
    let mut p = RMatrix::zeros(basis_s.len(), basis_i.len());
    let mut put = |a: ModeIndex, b: ModeIndex, v: f64| -> Result<()> {
        let (m, n) = (position(basis_s, a)?, position(basis_i, b)?);
        p[(m, n)] = v;
        Ok(())
    };
    match spec {
        TargetSpec::LgQudit { d } => {
            if *d == 0 {
                return Err(SimError::InvalidParameter("qudit dimension must be >= 1".into()));
            }
            for l in 1..=*d as i32 {
                let idx = ModeIndex::Lg { p: 0, l };
                put(idx, idx, 1.0 / *d as f64)?;
            }
        }
        TargetSpec::LgHighOrderQubit { l } => {
            if *l == 0 {
                return Err(SimError::InvalidParameter("qubit order must be >= 1".into()));
            }
            let l = *l as i32;
            put(ModeIndex::Lg { p: 0, l }, ModeIndex::Lg { p: 0, l: -l }, 0.5)?;
            put(ModeIndex::Lg { p: 0, l: -l }, ModeIndex::Lg { p: 0, l }, 0.5)?;
        }
        TargetSpec::HgQuquad => {
            for n in 0..4 {
                let idx = ModeIndex::Hg { n, m: 0 };
                put(idx, idx, 0.25)?;
            }
        }
        TargetSpec::Custom(m) => {
            if m.shape() != (basis_s.len(), basis_i.len()) {
                return Err(SimError::ShapeMismatch(format!(
                    "custom target {:?} for bases {} x {}",
                    m.shape(),
                    basis_s.len(),
                    basis_i.len()
                )));
            }
            return CorrelationMatrix::from_matrix(m.clone(), basis_s.labels(), basis_i.labels());
        }
    }
    CorrelationMatrix::from_matrix(p, basis_s.labels(), basis_i.labels())
}

/// Optimiser and sampling settings.
#[derive(Debug, Clone, PartialEq)]
pub struct OptConfig {
    pub learning_rate: f64,
    /// When set, the step size follows a cosine from `learning_rate` at the
    /// first update to this value at the last one.
    pub learning_rate_final: Option<f64>,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    pub iterations: u64,
    pub batch_size: usize,
    /// Batch size of the final evaluation at the learned parameters.
    pub eval_batch_size: usize,
    pub seed: u64,
    pub weights: LossWeights,
    /// Pairs samples as `(s, i)` and `(s, −i)`, cancelling the vacuum cross term.
    pub antithetic: bool,
    /// Groups antithetic pairs in fours with seeds reflected through the
    /// detected-mode subspace (see `Model::seed`).
    pub reflection: bool,
    /// Reuses one vacuum batch for every step.
    pub fixed_noise: bool,
    pub checkpoint_every: u64,
}

impl Default for OptConfig {
    fn default() -> Self {
        Self {
            learning_rate: 0.05,
            learning_rate_final: None,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
            iterations: 500,
            batch_size: 128,
            eval_batch_size: 2048,
            seed: 0,
            weights: LossWeights::default(),
            antithetic: true,
            reflection: true,
            fixed_noise: false,
            checkpoint_every: 0,
        }
    }
}

impl OptConfig {
    /// Step size of update `t` (1-based).
    pub fn learning_rate_at(&self, t: u64) -> f64 {
        match self.learning_rate_final {
            None => self.learning_rate,
            Some(end) => {
                let span = self.iterations.saturating_sub(1).max(1) as f64;
                let x = (t.saturating_sub(1) as f64 / span).min(1.0);
                end + (self.learning_rate - end) * 0.5 * (1.0 + (std::f64::consts::PI * x).cos())
            }
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate > 0.0) {
            return Err(SimError::InvalidParameter("learning rate must be positive".into()));
        }
        if let Some(end) = self.learning_rate_final {
            if !(end > 0.0 && end <= self.learning_rate) {
                return Err(SimError::InvalidParameter(format!(
                    "final learning rate {end} must lie in (0, learning_rate]"
                )));
            }
        }
        for (name, b) in [("beta1", self.beta1), ("beta2", self.beta2)] {
            if !(0.0..1.0).contains(&b) {
                return Err(SimError::InvalidParameter(format!("{name} = {b} must lie in [0, 1)")));
            }
        }
        if !(self.epsilon > 0.0) {
            return Err(SimError::InvalidParameter("epsilon must be positive".into()));
        }
        for b in [self.batch_size, self.eval_batch_size] {
            if b < 2 {
                return Err(SimError::BatchTooSmall { min: 2, got: b });
            }
            if self.antithetic && b % 2 != 0 {
                return Err(SimError::InvalidParameter(format!(
                    "antithetic sampling needs even batch sizes, got {b}"
                )));
            }
            if self.reflection && (!self.antithetic || b % 4 != 0) {
                return Err(SimError::InvalidParameter(format!(
                    "reflected sampling needs antithetic pairs and batch sizes divisible by 4, got {b}"
                )));
            }
        }
        if self.weights.l1 < 0.0 || self.weights.fidelity < 0.0 {
            return Err(SimError::InvalidParameter("loss weights must be non-negative".into()));
        }
        Ok(())
    }
}

/// Stream keys separating the independent vacuum draws of one run.
pub mod streams {
    /// Training step `t` uses stream `TRAIN + t`.
    pub const TRAIN: u64 = 0;
    pub const EVAL: u64 = u64::MAX - 1;
    pub const SIMULATE: u64 = u64::MAX - 2;
}

/// Vacuum batch drawn at training step `step`; depends only on `(seed, step)`.
pub fn training_vacuum(config: &OptConfig, model: &Model, step: u64) -> Result<VacuumBatch> {
    let stream = if config.fixed_noise { streams::TRAIN } else { streams::TRAIN + step };
    vacuum_batch(config, model, stream, config.batch_size)
}

/// Batch on `stream` with the sampling scheme of `config`.
pub fn vacuum_batch(config: &OptConfig, model: &Model, stream: u64, size: usize) -> Result<VacuumBatch> {
    let v = VacuumBatch::new(config.seed, stream, size, model.grid, model.sigma0_sq, config.antithetic)?;
    if config.reflection {
        v.with_reflection()
    } else {
        Ok(v)
    }
}

/// Adam moments for one complex parameter block, Re and Im kept separately.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamMoments {
    pub m: Vec<Complex64>,
    pub v: Vec<Complex64>,
}

impl AdamMoments {
    pub fn zeros(n: usize) -> Self {
        Self {
            m: vec![Complex64::new(0.0, 0.0); n],
            v: vec![Complex64::new(0.0, 0.0); n],
        }
    }
}

/// Everything needed to continue a run bit-exactly.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainState {
    pub pump: Vec<Complex64>,
    pub holo: CMatrix,
    pub adam_pump: AdamMoments,
    pub adam_holo: AdamMoments,
    /// Completed optimisation steps; the next vacuum draw uses this index.
    pub step: u64,
    pub loss_history: Vec<f64>,
}

const CKPT_MAGIC: &[u8; 8] = b"QHOLOCKP";
const CKPT_VERSION: u32 = 1;

fn put_u64(out: &mut Vec<u8>, v: u64) {
    out.extend_from_slice(&v.to_le_bytes());
}

fn put_complex(out: &mut Vec<u8>, vs: &[Complex64]) {
    put_u64(out, vs.len() as u64);
    for v in vs {
        out.extend_from_slice(&v.re.to_le_bytes());
        out.extend_from_slice(&v.im.to_le_bytes());
    }
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.pos + n > self.buf.len() {
            return Err(SimError::Checkpoint("truncated checkpoint".into()));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }

    fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }

    fn len(&mut self, limit: usize) -> Result<usize> {
        let n = self.u64()? as usize;
        if n > limit {
            return Err(SimError::Checkpoint(format!("implausible length {n}")));
        }
        Ok(n)
    }

    fn complex(&mut self) -> Result<Vec<Complex64>> {
        let n = self.len(self.buf.len() / 16)?;
        (0..n).map(|_| Ok(Complex64::new(self.f64()?, self.f64()?))).collect()
    }
}

impl TrainState {
    pub fn new(pump: Vec<Complex64>, holo: CMatrix) -> Self {
        let (np, nh) = (pump.len(), holo.as_slice().len());
        Self {
            pump,
            holo,
            adam_pump: AdamMoments::zeros(np),
            adam_holo: AdamMoments::zeros(nh),
            step: 0,
            loss_history: Vec::new(),
        }
    }

    /// Versioned little-endian encoding tagged with a configuration hash.
    pub fn to_bytes(&self, config_hash: &[u8]) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(CKPT_MAGIC);
        out.extend_from_slice(&CKPT_VERSION.to_le_bytes());
        put_u64(&mut out, config_hash.len() as u64);
        out.extend_from_slice(config_hash);
        put_u64(&mut out, self.step);
        put_u64(&mut out, self.holo.rows() as u64);
        put_u64(&mut out, self.holo.cols() as u64);
        put_complex(&mut out, &self.pump);
        put_complex(&mut out, self.holo.as_slice());
        put_complex(&mut out, &self.adam_pump.m);
        put_complex(&mut out, &self.adam_pump.v);
        put_complex(&mut out, &self.adam_holo.m);
        put_complex(&mut out, &self.adam_holo.v);
        put_u64(&mut out, self.loss_history.len() as u64);
        for l in &self.loss_history {
            out.extend_from_slice(&l.to_le_bytes());
        }
        out
    }

    /// Decodes a checkpoint, rejecting a different configuration hash.
    pub fn from_bytes(bytes: &[u8], config_hash: &[u8]) -> Result<Self> {
        let mut r = Reader { buf: bytes, pos: 0 };
        if r.take(8)? != CKPT_MAGIC {
            return Err(SimError::Checkpoint("not a checkpoint file".into()));
        }
        let version = u32::from_le_bytes(r.take(4)?.try_into().expect("4 bytes"));
        if version != CKPT_VERSION {
            return Err(SimError::Checkpoint(format!("unsupported version {version}")));
        }
        let hl = r.len(1024)?;
        if r.take(hl)? != config_hash {
            return Err(SimError::Checkpoint("checkpoint belongs to a different configuration".into()));
        }
        let step = r.u64()?;
        let rows = r.len(1 << 20)?;
        let cols = r.len(1 << 20)?;
        let pump = r.complex()?;
        let holo = CMatrix::from_vec(rows, cols, r.complex()?)
            .ok_or_else(|| SimError::Checkpoint("hologram shape mismatch".into()))?;
        let adam_pump = AdamMoments {
            m: r.complex()?,
            v: r.complex()?,
        };
        let adam_holo = AdamMoments {
            m: r.complex()?,
            v: r.complex()?,
        };
        let nh = r.len(bytes.len() / 8)?;
        let loss_history = (0..nh).map(|_| r.f64()).collect::<Result<Vec<_>>>()?;
        if r.pos != bytes.len() {
            return Err(SimError::Checkpoint("trailing bytes".into()));
        }
        if adam_pump.m.len() != pump.len()
            || adam_pump.v.len() != pump.len()
            || adam_holo.m.len() != rows * cols
            || adam_holo.v.len() != rows * cols
        {
            return Err(SimError::Checkpoint("inconsistent block sizes".into()));
        }
        Ok(Self {
            pump,
            holo,
            adam_pump,
            adam_holo,
            step,
            loss_history,
        })
    }
}

fn adam_block(params: &mut [Complex64], grads: &[Complex64], mom: &mut AdamMoments, t: u64, cfg: &OptConfig) {
    let c1 = 1.0 - cfg.beta1.powi(t as i32);
    let c2 = 1.0 - cfg.beta2.powi(t as i32);
    let lr = cfg.learning_rate_at(t);
    let upd = |p: &mut f64, g: f64, m: &mut f64, v: &mut f64| {
        *m = cfg.beta1 * *m + (1.0 - cfg.beta1) * g;
        *v = cfg.beta2 * *v + (1.0 - cfg.beta2) * g * g;
        let mh = *m / c1;
        let vh = *v / c2;
        *p -= lr * mh / (vh.sqrt() + cfg.epsilon);
    };
    for k in 0..params.len() {
        let (g, m, v) = (grads[k], &mut mom.m[k], &mut mom.v[k]);
        upd(&mut params[k].re, g.re, &mut m.re, &mut v.re);
        upd(&mut params[k].im, g.im, &mut m.im, &mut v.im);
    }
}

/// One Adam update with bias correction; frozen groups are left untouched.
pub fn adam_step(
    state: &TrainState,
    grad: &ParamGradient,
    config: &OptConfig,
    pump_trainable: bool,
    holo_trainable: bool,
) -> Result<TrainState> {
    if grad.d_pump.len() != state.pump.len() || grad.d_holo.shape() != state.holo.shape() {
        return Err(SimError::ShapeMismatch("gradient does not match the train state".into()));
    }
    let mut next = state.clone();
    next.step += 1;
    let t = next.step;
    if pump_trainable {
        adam_block(&mut next.pump, &grad.d_pump, &mut next.adam_pump, t, config);
    }
    if holo_trainable {
        adam_block(next.holo.as_mut_slice(), grad.d_holo.as_slice(), &mut next.adam_holo, t, config);
    }
    Ok(next)
}

/// Static description of an inverse-design run.
#[derive(Debug, Clone)]
pub struct TrainProblem {
    pub model: Model,
    /// Basis, power and trainable flag; coefficients come from the train state.
    pub pump: PumpParams,
    /// Basis, segments, background and trainable flag.
    pub holo: HologramParams,
    pub target: CorrelationMatrix,
}

impl TrainProblem {
    pub fn params(&self, state: &TrainState) -> (PumpParams, HologramParams) {
        let mut p = self.pump.clone();
        p.coeffs = state.pump.clone();
        let mut h = self.holo.clone();
        h.raw_coeffs = state.holo.clone();
        (p, h)
    }

    /// Initial state: configured pump coefficients, hologram noise of standard
    /// deviation `init_std` per quadrature drawn from the run seed.
    pub fn initial_state(&self, seed: u64, init_std: f64) -> Result<TrainState> {
        let mut holo = self.holo.raw_coeffs.clone();
        if init_std > 0.0 {
            let mut key = [0u8; 32];
            key[..8].copy_from_slice(&seed.to_le_bytes());
            key[16..24].copy_from_slice(b"holoinit");
            let mut rng = ChaCha8Rng::from_seed(key);
            let normal = Normal::new(0.0, init_std)
                .map_err(|e| SimError::InvalidParameter(format!("init_std: {e}")))?;
            for v in holo.as_mut_slice() {
                *v += Complex64::new(normal.sample(&mut rng), normal.sample(&mut rng));
            }
        }
        Ok(TrainState::new(self.pump.coeffs.clone(), holo))
    }
}

/// Per-step report passed to the training callback.
#[derive(Debug, Clone, PartialEq)]
pub struct StepInfo {
    pub step: u64,
    pub loss: f64,
    pub fidelity: f64,
}

#[derive(Debug, Clone)]
pub struct TrainResult {
    pub state: TrainState,
    pub final_p: CorrelationMatrix,
    pub final_moments: MomentSet,
    pub final_loss: f64,
    pub final_fidelity: f64,
}

/// Runs Adam from `state` until `config.iterations` steps are complete, then
/// evaluates `P` on an independent batch of `eval_batch_size` samples.
/// `on_step` sees the state after every update (for checkpoints and logging).
pub fn train(
    problem: &TrainProblem,
    config: &OptConfig,
    mut state: TrainState,
    mut on_step: impl FnMut(&TrainState, &StepInfo) -> Result<()>,
) -> Result<TrainResult> {
    config.validate()?;
    while state.step < config.iterations {
        let step = state.step;
        let with_step = |e: SimError| match e {
            SimError::NonFiniteField { .. } => SimError::NonFiniteField { step: Some(step as usize) },
            other => other,
        };
        let vacuum = training_vacuum(config, &problem.model, step)?;
        let (pump, holo) = problem.params(&state);
        let obj = SpdcObjective {
            model: &problem.model,
            vacuum: &vacuum,
            target: &problem.target.p,
            weights: config.weights,
        };
        let eval = obj.evaluate(&pump, &holo, true).map_err(with_step)?;
        let loss = eval.loss;
        let g = eval.grad.expect("gradient requested");
        if !g.is_finite() || !loss.is_finite() {
            return Err(SimError::NonFiniteField { step: Some(step as usize) });
        }
        let fid = fidelity_matrix(&eval.p.p, &problem.target.p)?;
        state = adam_step(&state, &g, config, pump.trainable, holo.trainable)?;
        state.loss_history.push(loss);
        if state.pump.iter().chain(state.holo.iter()).any(|v| !v.re.is_finite() || !v.im.is_finite()) {
            return Err(SimError::NonFiniteField { step: Some(step as usize) });
        }
        on_step(&state, &StepInfo { step, loss, fidelity: fid })?;
    }
    let (final_p, final_moments, final_loss, final_fidelity) = evaluate_final(problem, config, &state)?;
    Ok(TrainResult {
        state,
        final_p,
        final_moments,
        final_loss,
        final_fidelity,
    })
}

/// `P`, moments, loss and fidelity at the state's parameters on the evaluation stream.
pub fn evaluate_final(
    problem: &TrainProblem,
    config: &OptConfig,
    state: &TrainState,
) -> Result<(CorrelationMatrix, MomentSet, f64, f64)> {
    let vacuum = vacuum_batch(config, &problem.model, streams::EVAL, config.eval_batch_size)?;
    let (pump, holo) = problem.params(state);
    let obj = SpdcObjective {
        model: &problem.model,
        vacuum: &vacuum,
        target: &problem.target.p,
        weights: config.weights,
    };
    let e = obj.evaluate(&pump, &holo, false)?;
    let f = fidelity_matrix(&e.p.p, &problem.target.p)?;
    Ok((e.p, e.moments, e.loss, f))
}
