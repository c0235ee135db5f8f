//! The assembled forward model: cached mode stacks, per-parameter medium
//! state, and batched propagation of vacuum samples to mode coefficients.

use num_complex::Complex64;
use rayon::prelude::*;

use crate::error::{Result, SimError};
use crate::grid::{ComplexField, GridSpec, VacuumBatch};
use crate::matrix::CMatrix;
use crate::medium::{clip, combine, HologramParams, InteractionParams, PumpParams};
use crate::correlations::{estimate_moments_with_reference, MomentSet, VacuumReference};
use crate::modes::{project, ModeBasis};
use crate::propagator::{diffract, CouplingSlice, FieldPair, PropagationRecord, Propagator};

/// Number of samples handled by one work item. Fixed, so the reduction tree
/// does not depend on the thread count.
pub const CHUNK: usize = 4;

/// Static part of the forward model.
#[derive(Debug, Clone)]
pub struct Model {
    pub grid: GridSpec,
    pub params: InteractionParams,
    pub basis_s: ModeBasis,
    pub basis_i: ModeBasis,
    pub sigma0_sq: f64,
    pub pump_basis: ModeBasis,
    pub holo_basis: ModeBasis,
    pub n_seg: usize,
    pub propagator: Propagator,
    pub(crate) pump_modes_z0: Vec<ComplexField>,
    /// `[slice][mode]` pump modes at slice mid-planes.
    pub(crate) pump_modes: Vec<Vec<ComplexField>>,
    pub(crate) holo_functions: Vec<ComplexField>,
    /// Signal and idler modes at `z = L`.
    pub(crate) out_s: Vec<ComplexField>,
    pub(crate) out_i: Vec<ComplexField>,
    /// Output modes diffracted back to `z = 0`; projecting a seed on them gives
    /// its coefficients at `z = L` without interaction.
    pub(crate) ref_s: Vec<ComplexField>,
    pub(crate) ref_i: Vec<ComplexField>,
    /// Orthonormalised `ref_s` / `ref_i`, spanning the seed subspace that the
    /// detectors see without interaction.
    pub(crate) span_s: Vec<ComplexField>,
    pub(crate) span_i: Vec<ComplexField>,
}

/// Modified Gram-Schmidt under the grid inner product.
fn orthonormalize(fields: &[ComplexField]) -> Vec<ComplexField> {
    let mut out: Vec<ComplexField> = Vec::with_capacity(fields.len());
    for f in fields {
        let mut v = f.clone();
        for e in &out {
            let c = e.inner(&v);
            for (x, y) in v.values.iter_mut().zip(&e.values) {
                *x -= c * y;
            }
        }
        let n = v.power().sqrt();
        if n > 0.0 {
            v.scale(Complex64::new(1.0 / n, 0.0));
            out.push(v);
        }
    }
    out
}

/// `2Π·f − f` with `Π` the orthogonal projector onto `span`. Unitary, so a
/// vacuum seed keeps its distribution.
fn reflect(f: &ComplexField, span: &[ComplexField]) -> ComplexField {
    let mut out = f.clone();
    for v in &mut out.values {
        *v = -*v;
    }
    for e in span {
        let c = e.inner(f) * 2.0;
        for (x, y) in out.values.iter_mut().zip(&e.values) {
            *x += c * y;
        }
    }
    out
}

/// Parameter-dependent fields for one `(ϑ, φ)`.
#[derive(Debug, Clone)]
pub struct MediumState {
    /// Pump normalisation `√(P/Q)`.
    pub norm: f64,
    pub q: f64,
    pub e0: ComplexField,
    /// Unnormalised pump per slice.
    pub e_raw: Vec<ComplexField>,
    /// Normalised pump per slice.
    pub e_p: Vec<ComplexField>,
    /// Unclipped and clipped hologram per segment.
    pub u: Vec<ComplexField>,
    pub a: Vec<ComplexField>,
    pub a_eff: Vec<ComplexField>,
    pub slices: Vec<CouplingSlice>,
}

/// Output mode coefficients of one batch, in sample order, with the
/// interaction-free coefficients of the same seeds.
#[derive(Debug, Clone, PartialEq)]
pub struct BatchCoefficients {
    pub signal: Vec<Vec<Complex64>>,
    pub idler: Vec<Vec<Complex64>>,
    pub reference_signal: Vec<Vec<Complex64>>,
    pub reference_idler: Vec<Vec<Complex64>>,
}

impl BatchCoefficients {
    pub fn with_capacity(b: usize) -> Self {
        Self {
            signal: Vec::with_capacity(b),
            idler: Vec::with_capacity(b),
            reference_signal: Vec::with_capacity(b),
            reference_idler: Vec::with_capacity(b),
        }
    }

    pub fn len(&self) -> usize {
        self.signal.len()
    }

    pub fn is_empty(&self) -> bool {
        self.signal.is_empty()
    }

    pub fn is_finite(&self) -> bool {
        self.signal
            .iter()
            .chain(&self.idler)
            .chain(&self.reference_signal)
            .chain(&self.reference_idler)
            .flatten()
            .all(|v| v.re.is_finite() && v.im.is_finite())
    }

    /// Moments with the per-sample vacuum reference subtracted.
    pub fn moments(&self, sigma0_sq: f64, labels_s: Vec<String>, labels_i: Vec<String>) -> Result<MomentSet> {
        estimate_moments_with_reference(
            &self.signal,
            &self.idler,
            VacuumReference {
                signal: &self.reference_signal,
                idler: &self.reference_idler,
            },
            sigma0_sq,
            labels_s,
            labels_i,
        )
    }

    fn push(&mut self, out: SampleOutput) -> Option<Checkpoints> {
        self.signal.push(out.signal);
        self.idler.push(out.idler);
        self.reference_signal.push(out.reference_signal);
        self.reference_idler.push(out.reference_idler);
        out.record
    }
}

pub(crate) type Checkpoints = Vec<(Vec<Complex64>, Vec<Complex64>)>;

/// Result of propagating one vacuum seed.
pub(crate) struct SampleOutput {
    pub signal: Vec<Complex64>,
    pub idler: Vec<Complex64>,
    pub reference_signal: Vec<Complex64>,
    pub reference_idler: Vec<Complex64>,
    pub record: Option<Checkpoints>,
}

/// Collects per-sample outputs in order; returns the batch and the records.
pub(crate) fn collect_outputs(outs: Vec<SampleOutput>) -> (BatchCoefficients, Vec<Option<Checkpoints>>) {
    let mut coeffs = BatchCoefficients::with_capacity(outs.len());
    let records = outs.into_iter().map(|o| coeffs.push(o)).collect();
    (coeffs, records)
}

impl Model {
    pub fn new(
        grid: GridSpec,
        params: InteractionParams,
        pump_basis: ModeBasis,
        holo_basis: ModeBasis,
        n_seg: usize,
        basis_s: ModeBasis,
        basis_i: ModeBasis,
        sigma0_sq: f64,
    ) -> Result<Self> {
        if n_seg == 0 || grid.nz % n_seg != 0 {
            return Err(SimError::InvalidParameter(format!(
                "n_seg = {n_seg} does not divide nz = {}",
                grid.nz
            )));
        }
        let length = grid.length();
        let out_s = basis_s.eval_all(length, grid)?;
        let out_i = basis_i.eval_all(length, grid)?;
        // Containment at the entrance too, for the whole mode dictionary.
        basis_s.eval_all(0.0, grid)?;
        basis_i.eval_all(0.0, grid)?;
        let pump_modes_z0 = pump_basis.sample_all(0.0, grid);
        let pump_modes = (0..grid.nz)
            .map(|j| pump_basis.sample_all(grid.slice_mid(j), grid))
            .collect();
        let w0 = Complex64::new(holo_basis.waist(), 0.0);
        let holo_functions = holo_basis
            .sample_all(0.0, grid)
            .into_iter()
            .map(|mut f| {
                f.scale(w0);
                f
            })
            .collect();
        let back = |modes: &[ComplexField], k: f64| -> Vec<ComplexField> {
            modes.iter().map(|m| diffract(m, k, -length)).collect()
        };
        let ref_s = back(&out_s, params.k_s());
        let ref_i = back(&out_i, params.k_i());
        let span_s = orthonormalize(&ref_s);
        let span_i = orthonormalize(&ref_i);
        let propagator = Propagator::new(grid, params.k_s(), params.k_i());
        Ok(Self {
            grid,
            params,
            basis_s,
            basis_i,
            sigma0_sq,
            pump_basis,
            holo_basis,
            n_seg,
            propagator,
            pump_modes_z0,
            pump_modes,
            holo_functions,
            out_s,
            out_i,
            ref_s,
            ref_i,
            span_s,
            span_i,
        })
    }

    /// Seeds of sample `index`, reflected through the detected-mode subspace
    /// when the batch asks for it. Within a reflected group of four the seed
    /// components the detectors see repeat while everything else flips sign,
    /// which cancels their first-order contribution to `Φ` exactly.
    pub fn seed(&self, vacuum: &VacuumBatch, index: usize) -> (ComplexField, ComplexField) {
        let (s, i) = vacuum.sample(index);
        if vacuum.is_reflected(index) {
            (reflect(&s, &self.span_s), reflect(&i, &self.span_i))
        } else {
            (s, i)
        }
    }

    pub fn segment_len(&self) -> usize {
        self.grid.nz / self.n_seg
    }

    fn check_params(&self, pump: &PumpParams, holo: &HologramParams) -> Result<()> {
        if pump.coeffs.len() != self.pump_basis.len() {
            return Err(SimError::ShapeMismatch("pump coefficients do not match the model".into()));
        }
        if holo.raw_coeffs.shape() != (self.n_seg, self.holo_basis.len()) {
            return Err(SimError::ShapeMismatch("hologram coefficients do not match the model".into()));
        }
        Ok(())
    }

    /// Builds pump, hologram and coupling slices for one parameter set.
    pub fn medium(&self, pump: &PumpParams, holo: &HologramParams) -> Result<MediumState> {
        self.check_params(pump, holo)?;
        pump.check_nonzero()?;
        let g = self.grid;
        let e0 = combine(&pump.coeffs, &self.pump_modes_z0, g);
        let q = e0.power();
        if !(q > 0.0) {
            return Err(SimError::AllZeroPump);
        }
        let norm = (pump.power / q).sqrt();
        let e_raw: Vec<ComplexField> = self.pump_modes.iter().map(|m| combine(&pump.coeffs, m, g)).collect();
        let e_p: Vec<ComplexField> = e_raw
            .iter()
            .map(|e| {
                let mut f = e.clone();
                f.scale(Complex64::new(norm, 0.0));
                f
            })
            .collect();
        let u: Vec<ComplexField> = (0..self.n_seg)
            .map(|s| holo.synthesize_segment(s, &self.holo_functions, g))
            .collect();
        let a: Vec<ComplexField> = u
            .iter()
            .map(|f| ComplexField {
                grid: g,
                values: f.values.iter().map(|v| clip(*v)).collect(),
            })
            .collect();
        let seg_len = self.segment_len();
        let a_eff: Vec<ComplexField> = (0..g.nz)
            .map(|j| crate::medium::effective_coupling(&a[j / seg_len], j, &self.params))
            .collect();
        let slices = crate::propagator::coupling_slices(&e_p, &a_eff, self.params.kappa, g.dz);
        Ok(MediumState {
            norm,
            q,
            e0,
            e_raw,
            e_p,
            u,
            a,
            a_eff,
            slices,
        })
    }

    /// Propagates one seed pair; returns output coefficients and, optionally, checkpoints.
    pub(crate) fn forward_sample(
        &self,
        medium: &MediumState,
        seed: (ComplexField, ComplexField),
        keep_record: bool,
    ) -> SampleOutput {
        let (s0, i0) = seed;
        let reference_signal = project(&s0, &self.ref_s).0;
        let reference_idler = project(&i0, &self.ref_i).0;
        let mut s = s0.values;
        let mut i = i0.values;
        let mut work = self.propagator.work();
        let mut rec = keep_record.then(|| Vec::with_capacity(self.grid.nz));
        self.propagator.run(&mut s, &mut i, &medium.slices, rec.as_mut(), &mut work);
        let sf = ComplexField { grid: self.grid, values: s };
        let idf = ComplexField { grid: self.grid, values: i };
        SampleOutput {
            signal: project(&sf, &self.out_s).0,
            idler: project(&idf, &self.out_i).0,
            reference_signal,
            reference_idler,
            record: rec,
        }
    }

    /// Full propagation of one seed pair with its record.
    pub fn propagate(&self, medium: &MediumState, seed: &FieldPair) -> Result<(FieldPair, PropagationRecord)> {
        self.propagator.propagate(seed, &medium.slices)
    }

    /// Output coefficients for every sample of `vacuum`.
    pub fn simulate(&self, medium: &MediumState, vacuum: &VacuumBatch) -> Result<BatchCoefficients> {
        if vacuum.grid != self.grid {
            return Err(SimError::ShapeMismatch("vacuum grid differs from the model grid".into()));
        }
        let outs: Vec<SampleOutput> = (0..vacuum.batch_size)
            .into_par_iter()
            .with_min_len(CHUNK)
            .map(|b| self.forward_sample(medium, self.seed(vacuum, b), false))
            .collect();
        let (coeffs, _) = collect_outputs(outs);
        if !coeffs.is_finite() {
            return Err(SimError::NonFiniteField { step: None });
        }
        Ok(coeffs)
    }

    /// Adjoint of the output projection: `Σ_m M_m(L)·c_adj(m)·dA`.
    pub(crate) fn unproject(&self, c_adj: &[Complex64], signal: bool) -> Vec<Complex64> {
        let modes = if signal { &self.out_s } else { &self.out_i };
        let da = self.grid.cell_area();
        let mut out = vec![Complex64::new(0.0, 0.0); self.grid.len()];
        for (m, c) in modes.iter().zip(c_adj) {
            let w = c * da;
            for (o, v) in out.iter_mut().zip(&m.values) {
                *o += v * w;
            }
        }
        out
    }

    /// Zero-valued hologram coefficient matrix of the right shape.
    pub fn zero_holo(&self) -> CMatrix {
        CMatrix::zeros(self.n_seg, self.holo_basis.len())
    }
}
