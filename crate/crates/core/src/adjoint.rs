//! Reverse-mode gradients of real losses with respect to the pump and
//! hologram coefficients, with the vacuum batch held fixed.
//!
//! Complex adjoints follow the convention `x̄ = ∂L/∂Re x + i·∂L/∂Im x`, so for
//! `y = a·x` the pull-back is `x̄ += conj(a)·ȳ` and for `y = a·conj(x)` it is
//! `x̄ += a·conj(ȳ)`.

use std::fmt::Write as _;

use num_complex::Complex64;
use rayon::prelude::*;

use crate::correlations::{compute_p, CorrelationMatrix, MomentSet};
use crate::error::{Result, SimError};
use crate::grid::{GridSpec, VacuumBatch, SIGMA0_SQ};
use crate::matrix::{CMatrix, RMatrix};
use crate::medium::{HologramParams, InteractionParams, PumpParams};
use crate::model::{collect_outputs, BatchCoefficients, MediumState, Model, SampleOutput, CHUNK};
use crate::modes::ModeBasis;
use crate::optimizer::{loss_matrix, loss_p_adjoint, LossWeights};
use crate::propagator::{CouplingSlice, Propagator};

const ZERO: Complex64 = Complex64::new(0.0, 0.0);
const I: Complex64 = Complex64::new(0.0, 1.0);

/// Operations the forward pipeline may be built from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Primitive {
    Fft2,
    PhaseMultiply,
    Coupling,
    Clip,
    Projection,
    Reduction,
    /// Poling export; post-processing only.
    Binarize,
    /// Direct fourth-moment `G²` estimator; diagnostic only.
    FourthMoment,
}

impl Primitive {
    pub fn has_adjoint(self) -> bool {
        !matches!(self, Primitive::Binarize | Primitive::FourthMoment)
    }
}

/// Gradient blocks aligned with the pump and hologram coefficients. There is
/// deliberately no vacuum block: the vacuum batch is a constant input.
#[derive(Debug, Clone, PartialEq)]
pub struct ParamGradient {
    pub d_pump: Vec<Complex64>,
    pub d_holo: CMatrix,
}

impl ParamGradient {
    pub fn zeros(n_pump: usize, n_seg: usize, n_holo: usize) -> Self {
        Self {
            d_pump: vec![ZERO; n_pump],
            d_holo: CMatrix::zeros(n_seg, n_holo),
        }
    }

    pub fn is_finite(&self) -> bool {
        self.d_pump
            .iter()
            .chain(self.d_holo.iter())
            .all(|v| v.re.is_finite() && v.im.is_finite())
    }

    pub fn max_abs(&self) -> f64 {
        self.d_pump
            .iter()
            .chain(self.d_holo.iter())
            .map(|v| v.re.abs().max(v.im.abs()))
            .fold(0.0, f64::max)
    }
}

/// One step of a per-sample tape.
#[derive(Debug, Clone, PartialEq)]
pub enum TapeOp {
    /// Spectral diffraction of both envelopes over `dz/2` or `dz`.
    Diffract { half: bool },
    /// Local squeezing of slice `slice`, with its input fields.
    Couple {
        slice: usize,
        input: (Vec<Complex64>, Vec<Complex64>),
    },
    /// Projection of the output envelopes onto the detection modes.
    Project,
}

impl TapeOp {
    pub fn primitives(&self) -> &'static [Primitive] {
        match self {
            TapeOp::Diffract { .. } => &[Primitive::Fft2, Primitive::PhaseMultiply, Primitive::Fft2],
            TapeOp::Couple { .. } => &[Primitive::Coupling],
            TapeOp::Project => &[Primitive::Projection],
        }
    }
}

/// Recorded forward pass of one vacuum sample. Coupling ops carry their input
/// fields (per-slice checkpoints), so the reverse sweep needs no recomputation.
#[derive(Debug, Clone, PartialEq)]
pub struct Tape {
    pub ops: Vec<TapeOp>,
}

impl Tape {
    /// Tape of the merged-half-step scheme from the coupling-step inputs.
    pub fn from_checkpoints(checkpoints: Vec<(Vec<Complex64>, Vec<Complex64>)>) -> Self {
        let nz = checkpoints.len();
        let mut ops = Vec::with_capacity(2 * nz + 2);
        ops.push(TapeOp::Diffract { half: true });
        for (slice, input) in checkpoints.into_iter().enumerate() {
            ops.push(TapeOp::Couple { slice, input });
            ops.push(TapeOp::Diffract { half: slice + 1 == nz });
        }
        ops.push(TapeOp::Project);
        Self { ops }
    }

    /// Reverse sweep from output-coefficient adjoints, accumulating the
    /// per-slice coupling sums into `acc_r`, `acc_w`.
    #[allow(clippy::too_many_arguments)]
    fn backward(
        &self,
        model: &Model,
        slices: &[CouplingSlice],
        c_adj_s: &[Complex64],
        c_adj_i: &[Complex64],
        acc_r: &mut [Vec<f64>],
        acc_w: &mut [Vec<Complex64>],
        work: &mut crate::grid::FftWork,
    ) {
        let prop: &Propagator = &model.propagator;
        let mut s_adj = Vec::new();
        let mut i_adj = Vec::new();
        for op in self.ops.iter().rev() {
            match op {
                TapeOp::Project => {
                    s_adj = model.unproject(c_adj_s, true);
                    i_adj = model.unproject(c_adj_i, false);
                }
                TapeOp::Diffract { half } => prop.step_adjoint(&mut s_adj, &mut i_adj, *half, work),
                TapeOp::Couple { slice, input } => Propagator::couple_adjoint(
                    &slices[*slice],
                    &input.0,
                    &input.1,
                    &mut s_adj,
                    &mut i_adj,
                    &mut acc_r[*slice],
                    &mut acc_w[*slice],
                ),
            }
        }
    }
}

/// A differentiable scalar objective of `(ϑ, φ)`.
pub trait Objective: Sync {
    /// Every primitive the forward pass uses.
    fn primitives(&self) -> Vec<Primitive>;
    fn forward_backward(&self, pump: &PumpParams, holo: &HologramParams) -> Result<(f64, ParamGradient)>;
    fn loss_only(&self, pump: &PumpParams, holo: &HologramParams) -> Result<f64>;
}

/// Loss and conjugate-Wirtinger gradient; rejects objectives with unsupported primitives.
pub fn grad(obj: &dyn Objective, pump: &PumpParams, holo: &HologramParams) -> Result<(f64, ParamGradient)> {
    if let Some(p) = obj.primitives().into_iter().find(|p| !p.has_adjoint()) {
        return Err(SimError::UnsupportedPrimitive(p));
    }
    let (loss, mut g) = obj.forward_backward(pump, holo)?;
    if !pump.trainable {
        g.d_pump.iter_mut().for_each(|v| *v = ZERO);
    }
    if !holo.trainable {
        g.d_holo.as_mut_slice().iter_mut().for_each(|v| *v = ZERO);
    }
    if !g.is_finite() || !loss.is_finite() {
        return Err(SimError::NonFiniteField { step: None });
    }
    Ok((loss, g))
}

/// `L = Σ|ϑ_k|²`, bypassing the physics.
#[derive(Debug, Clone, Copy, Default)]
pub struct ParamNormObjective;

impl Objective for ParamNormObjective {
    fn primitives(&self) -> Vec<Primitive> {
        vec![Primitive::Reduction]
    }

    fn forward_backward(&self, pump: &PumpParams, holo: &HologramParams) -> Result<(f64, ParamGradient)> {
        let loss = self.loss_only(pump, holo)?;
        let (r, c) = holo.raw_coeffs.shape();
        let mut g = ParamGradient::zeros(pump.coeffs.len(), r, c);
        for (d, v) in g.d_pump.iter_mut().zip(&pump.coeffs) {
            *d = 2.0 * v;
        }
        Ok((loss, g))
    }

    fn loss_only(&self, pump: &PumpParams, _holo: &HologramParams) -> Result<f64> {
        Ok(pump.coeffs.iter().map(|v| v.norm_sqr()).sum())
    }
}

/// Everything computed by one loss evaluation.
#[derive(Debug, Clone)]
pub struct Evaluation {
    pub loss: f64,
    pub p: CorrelationMatrix,
    pub moments: MomentSet,
    pub grad: Option<ParamGradient>,
}

/// SPDC pipeline objective: propagate the batch, estimate `P`, compare with the target.
#[derive(Debug, Clone)]
pub struct SpdcObjective<'a> {
    pub model: &'a Model,
    pub vacuum: &'a VacuumBatch,
    pub target: &'a RMatrix,
    pub weights: LossWeights,
}

/// Byte budget for keeping every sample's checkpoints between the forward and
/// reverse sweeps; beyond it samples are re-propagated during the reverse sweep.
const RECORD_BUDGET: usize = 768 << 20;

/// Work items processed in parallel before their partial sums are folded in.
const WAVE: usize = 16;

impl<'a> SpdcObjective<'a> {
    fn record_bytes(&self) -> usize {
        2 * self.model.grid.nz * self.model.grid.len() * std::mem::size_of::<Complex64>()
    }

    fn moments(&self, coeffs: &BatchCoefficients) -> Result<MomentSet> {
        coeffs.moments(self.model.sigma0_sq, self.model.basis_s.labels(), self.model.basis_i.labels())
    }

    pub fn evaluate(&self, pump: &PumpParams, holo: &HologramParams, with_grad: bool) -> Result<Evaluation> {
        let model = self.model;
        let medium = model.medium(pump, holo)?;
        let b = self.vacuum.batch_size;
        let keep = with_grad && b * self.record_bytes() <= RECORD_BUDGET;
        let outs: Vec<SampleOutput> = (0..b)
            .into_par_iter()
            .with_min_len(CHUNK)
            .map(|k| model.forward_sample(&medium, model.seed(self.vacuum, k), keep))
            .collect();
        let (coeffs, records) = collect_outputs(outs);
        if !coeffs.is_finite() {
            return Err(SimError::NonFiniteField { step: None });
        }
        let moments = self.moments(&coeffs)?;
        let raw = crate::correlations::raw_pair_matrix(&moments);
        if !(raw.sum() > 0.0) {
            return Err(SimError::DegenerateP(raw.sum()));
        }
        let p = compute_p(&moments)?;
        let loss = loss_matrix(&p.p, self.target, self.weights)?;
        let grad = if with_grad {
            let (ca_s, ca_i) = coefficient_adjoints(&moments, &raw, &p.p, self.target, self.weights, &coeffs);
            let (acc_r, acc_w) = self.reverse_sweep(&medium, &ca_s, &ca_i, records);
            Some(param_gradient(model, pump, holo, &medium, &acc_r, &acc_w))
        } else {
            None
        };
        Ok(Evaluation {
            loss,
            p,
            moments,
            grad,
        })
    }

    fn reverse_sweep(
        &self,
        medium: &MediumState,
        ca_s: &[Vec<Complex64>],
        ca_i: &[Vec<Complex64>],
        mut records: Vec<Option<Vec<(Vec<Complex64>, Vec<Complex64>)>>>,
    ) -> (Vec<Vec<f64>>, Vec<Vec<Complex64>>) {
        let model = self.model;
        let (nz, n) = (model.grid.nz, model.grid.len());
        let b = self.vacuum.batch_size;
        let mut total_r = vec![vec![0.0; n]; nz];
        let mut total_w = vec![vec![ZERO; n]; nz];
        let chunks: Vec<(usize, usize)> = (0..b.div_ceil(CHUNK))
            .map(|c| (c * CHUNK, ((c + 1) * CHUNK).min(b)))
            .collect();
        for wave in chunks.chunks(WAVE) {
            let items: Vec<(usize, usize, Vec<Option<Vec<(Vec<Complex64>, Vec<Complex64>)>>>)> = wave
                .iter()
                .map(|&(lo, hi)| (lo, hi, records[lo..hi].iter_mut().map(Option::take).collect()))
                .collect();
            let partials: Vec<(Vec<Vec<f64>>, Vec<Vec<Complex64>>)> = items
                .into_par_iter()
                .map(|(lo, hi, recs)| {
                    let mut r = vec![vec![0.0; n]; nz];
                    let mut w = vec![vec![ZERO; n]; nz];
                    let mut work = model.propagator.work();
                    for (k, rec) in (lo..hi).zip(recs) {
                        let checkpoints = match rec {
                            Some(c) => c,
                            None => model
                                .forward_sample(medium, model.seed(self.vacuum, k), true)
                                .record
                                .expect("record requested"),
                        };
                        let tape = Tape::from_checkpoints(checkpoints);
                        tape.backward(model, &medium.slices, &ca_s[k], &ca_i[k], &mut r, &mut w, &mut work);
                    }
                    (r, w)
                })
                .collect();
            for (r, w) in partials {
                for (t, p) in total_r.iter_mut().zip(&r) {
                    for (a, v) in t.iter_mut().zip(p) {
                        *a += v;
                    }
                }
                for (t, p) in total_w.iter_mut().zip(&w) {
                    for (a, v) in t.iter_mut().zip(p) {
                        *a += v;
                    }
                }
            }
        }
        (total_r, total_w)
    }
}

impl Objective for SpdcObjective<'_> {
    fn primitives(&self) -> Vec<Primitive> {
        vec![
            Primitive::Projection,
            Primitive::Clip,
            Primitive::PhaseMultiply,
            Primitive::Fft2,
            Primitive::Coupling,
            Primitive::Reduction,
        ]
    }

    fn forward_backward(&self, pump: &PumpParams, holo: &HologramParams) -> Result<(f64, ParamGradient)> {
        let e = self.evaluate(pump, holo, true)?;
        Ok((e.loss, e.grad.expect("gradient requested")))
    }

    fn loss_only(&self, pump: &PumpParams, holo: &HologramParams) -> Result<f64> {
        Ok(self.evaluate(pump, holo, false)?.loss)
    }
}

/// Pull-back from the loss to the per-sample output mode coefficients.
fn coefficient_adjoints(
    moments: &MomentSet,
    raw: &RMatrix,
    p: &RMatrix,
    target: &RMatrix,
    weights: LossWeights,
    coeffs: &BatchCoefficients,
) -> (Vec<Vec<Complex64>>, Vec<Vec<Complex64>>) {
    let (ms, mi) = p.shape();
    let p_adj = loss_p_adjoint(p, target, weights);
    // Normalisation P = P⁺/S with P⁺ = max(raw, 0).
    let s: f64 = raw.iter().filter(|v| **v > 0.0).sum();
    let dot: f64 = p_adj.iter().zip(p.iter()).map(|(a, b)| a * b).sum();
    let raw_adj = RMatrix::from_fn(ms, mi, |m, n| {
        if raw[(m, n)] > 0.0 {
            (p_adj[(m, n)] - dot) / s
        } else {
            0.0
        }
    });
    let phi_adj = CMatrix::from_fn(ms, mi, |m, n| 2.0 * moments.phi[(m, n)] * raw_adj[(m, n)]);
    let ns_adj: Vec<f64> = (0..ms)
        .map(|m| (0..mi).map(|n| raw_adj[(m, n)] * moments.n_i[n]).sum())
        .collect();
    let ni_adj: Vec<f64> = (0..mi)
        .map(|n| (0..ms).map(|m| raw_adj[(m, n)] * moments.n_s[m]).sum())
        .collect();
    let inv_b = 1.0 / coeffs.signal.len() as f64;
    let mut out_s = Vec::with_capacity(coeffs.signal.len());
    let mut out_i = Vec::with_capacity(coeffs.signal.len());
    for (cs, ci) in coeffs.signal.iter().zip(&coeffs.idler) {
        let a_s: Vec<Complex64> = (0..ms)
            .map(|m| {
                let mut acc = 2.0 * cs[m] * ns_adj[m];
                for n in 0..mi {
                    acc += phi_adj[(m, n)] * ci[n].conj();
                }
                acc * inv_b
            })
            .collect();
        let a_i: Vec<Complex64> = (0..mi)
            .map(|n| {
                let mut acc = 2.0 * ci[n] * ni_adj[n];
                for m in 0..ms {
                    acc += phi_adj[(m, n)] * cs[m].conj();
                }
                acc * inv_b
            })
            .collect();
        out_s.push(a_s);
        out_i.push(a_i);
    }
    (out_s, out_i)
}

/// Adjoint of `A = u/max(1,|u|)`; the saturated branch is used on `|u| = 1`.
pub fn clip_adjoint(u: Complex64, a_adj: Complex64) -> Complex64 {
    let r = u.norm();
    if r < 1.0 {
        a_adj
    } else {
        a_adj / r - u * ((a_adj.conj() * u).re / (r * r * r))
    }
}

/// Gain adjoint of one coupling slice from the accumulated sums.
pub(crate) fn gain_adjoint(slice: &CouplingSlice, r: &[f64], w: &[Complex64]) -> Vec<Complex64> {
    let h = slice.h;
    (0..slice.gain.len())
        .map(|p| {
            let g = slice.gain[p];
            let (sig, beta) = (slice.sigma[p], slice.beta[p]);
            g * (r[p] * h * sig) - I * sig * w[p] + g * ((w[p].conj() * I * g).re * beta)
        })
        .collect()
}

/// Chains the per-slice coupling sums back to `ϑ` and `φ`.
fn param_gradient(
    model: &Model,
    pump: &PumpParams,
    holo: &HologramParams,
    medium: &MediumState,
    acc_r: &[Vec<f64>],
    acc_w: &[Vec<Complex64>],
) -> ParamGradient {
    let grid = model.grid;
    let n = grid.len();
    let kappa = model.params.kappa;
    let seg_len = model.segment_len();
    let mut a_adj = vec![vec![ZERO; n]; model.n_seg];
    let mut d_pump = vec![ZERO; pump.coeffs.len()];
    let mut n_adj = 0.0;
    for j in 0..grid.nz {
        let slice = &medium.slices[j];
        if slice.h == 0.0 || kappa == 0.0 {
            continue;
        }
        let g_adj = gain_adjoint(slice, &acc_r[j], &acc_w[j]);
        let carrier = if model.params.delta_k != 0.0 {
            Complex64::from_polar(1.0, model.params.delta_k * grid.slice_mid(j))
        } else {
            Complex64::new(1.0, 0.0)
        };
        let seg = &mut a_adj[j / seg_len];
        let (e, a) = (&medium.e_p[j].values, &medium.a_eff[j].values);
        let mut e_adj = vec![ZERO; n];
        for p in 0..n {
            seg[p] += kappa * e[p].conj() * g_adj[p] * carrier;
            e_adj[p] = kappa * a[p].conj() * g_adj[p];
        }
        if pump.trainable {
            let raw = &medium.e_raw[j].values;
            n_adj += e_adj.iter().zip(raw).map(|(ea, r)| (ea.conj() * r).re).sum::<f64>();
            for (k, m) in model.pump_modes[j].iter().enumerate() {
                let acc: Complex64 = m.values.iter().zip(&e_adj).map(|(mv, ea)| mv.conj() * ea).sum();
                d_pump[k] += acc * medium.norm;
            }
        }
    }
    if pump.trainable {
        let q_adj = -medium.norm * n_adj / (2.0 * medium.q);
        let scale = 2.0 * grid.cell_area() * q_adj;
        for (k, m) in model.pump_modes_z0.iter().enumerate() {
            let acc: Complex64 = m.values.iter().zip(&medium.e0.values).map(|(mv, e)| mv.conj() * e).sum();
            d_pump[k] += acc * scale;
        }
    }
    let mut d_holo = CMatrix::zeros(model.n_seg, model.holo_basis.len());
    if holo.trainable {
        for (s, adj) in a_adj.iter().enumerate() {
            let u_adj: Vec<Complex64> = medium.u[s].values.iter().zip(adj).map(|(u, a)| clip_adjoint(*u, *a)).collect();
            for (k, f) in model.holo_functions.iter().enumerate() {
                d_holo[(s, k)] = f.values.iter().zip(&u_adj).map(|(fv, ua)| fv.conj() * ua).sum();
            }
        }
    }
    ParamGradient { d_pump, d_holo }
}

/// A complete small problem for finite-difference validation.
#[derive(Debug, Clone)]
pub struct GradCheckInstance {
    pub model: Model,
    pub pump: PumpParams,
    pub holo: HologramParams,
    pub vacuum: VacuumBatch,
    pub target: RMatrix,
    pub weights: LossWeights,
}

impl GradCheckInstance {
    /// 16×16 grid, `nz = 4`, two pump modes, 2×2 hologram coefficients,
    /// two-mode detection bases, `B = 2` fixed vacuum samples.
    pub fn small(seed: u64) -> Result<Self> {
        use rand::{Rng, SeedableRng};
        let lp = 532e-9;
        let ls = 1064e-9;
        let params = InteractionParams::with_phase_mismatch(lp, ls, ls, 2.23357, 2.23211, 2.15554, 4.0, 800.0)?;
        let grid = GridSpec::new(16, 16, 8e-6, 8e-6, 4, 250e-6)?;
        let pump_basis = ModeBasis::lg(0, 1, 14e-6, lp, params.n_p)?;
        let pump_basis = ModeBasis::new(pump_basis.indices()[1..].to_vec(), 14e-6, lp, params.n_p)?;
        let holo_basis = ModeBasis::lg(0, 1, 18e-6, ls, params.n_s)?;
        let holo_basis = ModeBasis::new(holo_basis.indices()[..2].to_vec(), 18e-6, ls, params.n_s)?;
        let basis_s = ModeBasis::new(holo_basis.indices(), 18e-6, ls, params.n_s)?;
        let basis_i = basis_s.retuned(ls, params.n_i)?;
        let model = Model::new(
            grid,
            params,
            pump_basis.clone(),
            holo_basis.clone(),
            2,
            basis_s,
            basis_i,
            SIGMA0_SQ,
        )?;
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        let mut c = || Complex64::new(rng.random::<f64>() - 0.5, rng.random::<f64>() - 0.5);
        let pump = PumpParams::new(pump_basis, vec![c() + 1.0, c()], 1e-3, true)?;
        // One coefficient large enough to saturate the clip somewhere.
        let raw = CMatrix::from_vec(2, 2, vec![c() * 2.0, c(), c(), c() * 3.0]).expect("2x2");
        let holo = HologramParams::new(holo_basis, 2, raw, Complex64::new(0.3, 0.1), true)?;
        let vacuum = VacuumBatch::new(seed ^ 0x5eed, 0, 2, grid, SIGMA0_SQ, false)?;
        let target = RMatrix::from_vec(2, 2, vec![0.4, 0.1, 0.2, 0.3]).expect("2x2");
        Ok(Self {
            model,
            pump,
            holo,
            vacuum,
            target,
            weights: LossWeights::default(),
        })
    }

    pub fn objective(&self) -> SpdcObjective<'_> {
        SpdcObjective {
            model: &self.model,
            vacuum: &self.vacuum,
            target: &self.target,
            weights: self.weights,
        }
    }
}

/// One real parameter component in a gradient check.
#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckEntry {
    pub parameter: String,
    pub analytic: f64,
    pub numeric: f64,
    pub rel_error: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckReport {
    pub fd_step: f64,
    pub tolerance: f64,
    pub entries: Vec<GradCheckEntry>,
    pub max_rel_error: f64,
    /// Max error with the step doubled, for the finite-difference error regime.
    pub max_rel_error_double_step: f64,
    pub pass: bool,
}

/// Relative error with a floor proportional to the largest analytic component,
/// so structurally tiny components are judged on an absolute scale.
pub const REL_FLOOR: f64 = 1e-4;

fn rel_error(a: f64, n: f64, scale: f64) -> f64 {
    (a - n).abs() / a.abs().max(n.abs()).max(REL_FLOOR * scale)
}

fn perturbed(pump: &PumpParams, holo: &HologramParams, which: usize, delta: Complex64) -> (PumpParams, HologramParams) {
    let mut p = pump.clone();
    let mut h = holo.clone();
    if which < p.coeffs.len() {
        p.coeffs[which] += delta;
    } else {
        h.raw_coeffs.as_mut_slice()[which - p.coeffs.len()] += delta;
    }
    (p, h)
}

fn fd_component(
    obj: &dyn Objective,
    pump: &PumpParams,
    holo: &HologramParams,
    which: usize,
    dir: Complex64,
    step: f64,
) -> Result<f64> {
    let (p1, h1) = perturbed(pump, holo, which, dir * step);
    let (p0, h0) = perturbed(pump, holo, which, -dir * step);
    Ok((obj.loss_only(&p1, &h1)? - obj.loss_only(&p0, &h0)?) / (2.0 * step))
}

/// Compares every trainable gradient component against central differences.
pub fn grad_check_objective(
    obj: &dyn Objective,
    pump: &PumpParams,
    holo: &HologramParams,
    fd_step: f64,
    tolerance: f64,
) -> Result<GradCheckReport> {
    let (_, g) = grad(obj, pump, holo)?;
    let scale = g.max_abs();
    let mut entries = Vec::new();
    let mut max_err: f64 = 0.0;
    let mut max_err2: f64 = 0.0;
    let n_pump = pump.coeffs.len();
    let holo_cols = holo.raw_coeffs.cols();
    let total = n_pump + holo.raw_coeffs.as_slice().len();
    for which in 0..total {
        let (label, an) = if which < n_pump {
            if !pump.trainable {
                continue;
            }
            (format!("pump[{}]", pump.basis.modes()[which].index), g.d_pump[which])
        } else {
            if !holo.trainable {
                continue;
            }
            let k = which - n_pump;
            let (s, c) = (k / holo_cols, k % holo_cols);
            (format!("holo[{s},{}]", holo.basis.modes()[c].index), g.d_holo.as_slice()[k])
        };
        for (part, dir, a) in [("re", Complex64::new(1.0, 0.0), an.re), ("im", I, an.im)] {
            let num = fd_component(obj, pump, holo, which, dir, fd_step)?;
            let num2 = fd_component(obj, pump, holo, which, dir, 2.0 * fd_step)?;
            let e = rel_error(a, num, scale);
            max_err = max_err.max(e);
            max_err2 = max_err2.max(rel_error(a, num2, scale));
            entries.push(GradCheckEntry {
                parameter: format!("{label}.{part}"),
                analytic: a,
                numeric: num,
                rel_error: e,
            });
        }
    }
    Ok(GradCheckReport {
        fd_step,
        tolerance,
        entries,
        max_rel_error: max_err,
        max_rel_error_double_step: max_err2,
        pass: max_err < tolerance,
    })
}

/// Gradient check of the full SPDC pipeline on `instance`.
pub fn grad_check(instance: &GradCheckInstance, fd_step: f64, tolerance: f64) -> Result<GradCheckReport> {
    grad_check_objective(&instance.objective(), &instance.pump, &instance.holo, fd_step, tolerance)
}

impl GradCheckReport {
    /// Truncation error grows with the step (∝ h²); round-off shrinks with it (∝ 1/h).
    pub fn regime(&self) -> &'static str {
        if self.max_rel_error_double_step > self.max_rel_error {
            "truncation-dominated: error grows with the step"
        } else {
            "round-off-dominated: error shrinks as the step grows"
        }
    }

    pub fn to_text(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "gradient check: {}", if self.pass { "pass" } else { "fail" });
        let _ = writeln!(s, "fd_step: {:e}", self.fd_step);
        let _ = writeln!(s, "tolerance: {:e}", self.tolerance);
        let _ = writeln!(s, "components: {}", self.entries.len());
        let _ = writeln!(s, "max relative error: {:.3e}", self.max_rel_error);
        let _ = writeln!(
            s,
            "max relative error at 2*fd_step: {:.3e} ({})",
            self.max_rel_error_double_step,
            self.regime()
        );
        let _ = writeln!(s);
        let _ = writeln!(s, "{:<28} {:>16} {:>16} {:>10}", "parameter", "analytic", "numeric", "rel_err");
        for e in &self.entries {
            let _ = writeln!(
                s,
                "{:<28} {:>16.9e} {:>16.9e} {:>10.3e}",
                e.parameter, e.analytic, e.numeric, e.rel_error
            );
        }
        s
    }

    pub fn to_csv(&self) -> String {
        let mut s = String::from("parameter,analytic,numeric,rel_error\n");
        for e in &self.entries {
            let _ = writeln!(s, "{},{:e},{:e},{:e}", e.parameter, e.analytic, e.numeric, e.rel_error);
        }
        s
    }
}
