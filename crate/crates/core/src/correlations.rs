//! Monte Carlo moment estimators, the two-photon probability `P`, and the
//! first-order perturbative oracle.
//!
//! Samples are c-number fields in the symmetric-ordering (Wigner)
//! representation: each vacuum mode carries complex variance `σ0²`, which is
//! subtracted to obtain normally ordered moments.

use num_complex::Complex64;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Result, SimError};
use crate::grid::{ComplexField, GridSpec};
use crate::matrix::{CMatrix, RMatrix};
use crate::medium::{build_hologram, build_pump, effective_coupling, HologramParams, InteractionParams, PumpParams};
use crate::modes::{project, ModeBasis};
use crate::propagator::FieldPair;

const ZERO: Complex64 = Complex64::new(0.0, 0.0);

/// Normally ordered first and second moments over signal/idler mode bases.
#[derive(Debug, Clone, PartialEq)]
pub struct MomentSet {
    pub n_s: Vec<f64>,
    pub n_i: Vec<f64>,
    /// `⟨a_s(m)·a_i(n)⟩`.
    pub phi: CMatrix,
    /// `⟨a_s†(m)·a_s(n)⟩`.
    pub g1_s: CMatrix,
    pub g1_i: CMatrix,
    /// `⟨a_s†(m)·a_i(n)⟩`; zero for distinguishable signal and idler.
    pub exchange: CMatrix,
    pub batch_size: usize,
    pub sigma0_sq: f64,
    pub labels_s: Vec<String>,
    pub labels_i: Vec<String>,
}

impl MomentSet {
    /// `max |⟨a_s† a_i⟩|²` relative to `max |Φ|²`.
    pub fn exchange_ratio(&self) -> f64 {
        let ex = self.exchange.iter().map(|v| v.norm_sqr()).fold(0.0, f64::max);
        let ph = self.phi.iter().map(|v| v.norm_sqr()).fold(0.0, f64::max);
        if ph > 0.0 {
            ex / ph
        } else {
            ex
        }
    }

    /// All moments multiplied by `c`.
    pub fn scaled(&self, c: f64) -> Self {
        let mut out = self.clone();
        out.n_s.iter_mut().for_each(|v| *v *= c);
        out.n_i.iter_mut().for_each(|v| *v *= c);
        for m in [&mut out.phi, &mut out.g1_s, &mut out.g1_i, &mut out.exchange] {
            m.as_mut_slice().iter_mut().for_each(|v| *v *= c);
        }
        out
    }
}

/// Normalised two-photon probability over (signal mode, idler mode).
#[derive(Debug, Clone, PartialEq)]
pub struct CorrelationMatrix {
    pub p: RMatrix,
    pub labels_s: Vec<String>,
    pub labels_i: Vec<String>,
    /// Mass removed by flooring negative raw entries, relative to the positive mass.
    pub floored_mass: f64,
}

impl CorrelationMatrix {
    /// Validates and wraps an explicit distribution.
    pub fn from_matrix(p: RMatrix, labels_s: Vec<String>, labels_i: Vec<String>) -> Result<Self> {
        if p.rows() != labels_s.len() || p.cols() != labels_i.len() {
            return Err(SimError::ShapeMismatch(format!(
                "matrix {:?} with {} x {} labels",
                p.shape(),
                labels_s.len(),
                labels_i.len()
            )));
        }
        if p.iter().any(|v| !(*v >= 0.0) || !v.is_finite()) {
            return Err(SimError::InvalidParameter("probabilities must be finite and >= 0".into()));
        }
        let s = p.sum();
        if !(s > 0.0) {
            return Err(SimError::DegenerateP(s));
        }
        Ok(Self {
            p: p.map(|v| v / s),
            labels_s,
            labels_i,
            floored_mass: 0.0,
        })
    }

    pub fn shape(&self) -> (usize, usize) {
        self.p.shape()
    }
}

fn check_batch(b: usize) -> Result<()> {
    if b < 2 {
        return Err(SimError::BatchTooSmall { min: 2, got: b });
    }
    Ok(())
}

/// Moments from per-sample mode coefficients (`coeffs_s[b][m]`, `coeffs_i[b][n]`).
/// Accumulation runs in sample order, so the result is independent of how the
/// coefficients were produced.
pub fn estimate_moments_from_coeffs(
    coeffs_s: &[Vec<Complex64>],
    coeffs_i: &[Vec<Complex64>],
    sigma0_sq: f64,
    labels_s: Vec<String>,
    labels_i: Vec<String>,
) -> Result<MomentSet> {
    estimate_moments_impl(coeffs_s, coeffs_i, None, sigma0_sq, labels_s, labels_i)
}

/// Per-sample coefficients of the same vacuum seeds carried to the detection
/// plane without interaction.
#[derive(Debug, Clone, Copy)]
pub struct VacuumReference<'a> {
    pub signal: &'a [Vec<Complex64>],
    pub idler: &'a [Vec<Complex64>],
}

/// As [`estimate_moments_from_coeffs`], but `G1` subtracts each sample's own
/// vacuum term `conj(r_m)·r_n` instead of `σ0²·δ_mn`. Both have the same
/// expectation; the per-sample control variate cancels the zero-point noise.
pub fn estimate_moments_with_reference(
    coeffs_s: &[Vec<Complex64>],
    coeffs_i: &[Vec<Complex64>],
    reference: VacuumReference<'_>,
    sigma0_sq: f64,
    labels_s: Vec<String>,
    labels_i: Vec<String>,
) -> Result<MomentSet> {
    estimate_moments_impl(coeffs_s, coeffs_i, Some(reference), sigma0_sq, labels_s, labels_i)
}

fn estimate_moments_impl(
    coeffs_s: &[Vec<Complex64>],
    coeffs_i: &[Vec<Complex64>],
    reference: Option<VacuumReference<'_>>,
    sigma0_sq: f64,
    labels_s: Vec<String>,
    labels_i: Vec<String>,
) -> Result<MomentSet> {
    let b = coeffs_s.len();
    check_batch(b)?;
    if coeffs_i.len() != b {
        return Err(SimError::ShapeMismatch("signal and idler batches differ".into()));
    }
    let (ms, mi) = (labels_s.len(), labels_i.len());
    if coeffs_s.iter().any(|c| c.len() != ms) || coeffs_i.iter().any(|c| c.len() != mi) {
        return Err(SimError::ShapeMismatch("coefficient vectors do not match bases".into()));
    }
    if let Some(r) = reference {
        if r.signal.len() != b
            || r.idler.len() != b
            || r.signal.iter().any(|c| c.len() != ms)
            || r.idler.iter().any(|c| c.len() != mi)
        {
            return Err(SimError::ShapeMismatch("vacuum reference does not match the batch".into()));
        }
    }
    let mut phi = CMatrix::zeros(ms, mi);
    let mut exchange = CMatrix::zeros(ms, mi);
    let mut g1_s = CMatrix::zeros(ms, ms);
    let mut g1_i = CMatrix::zeros(mi, mi);
    for (cs, ci) in coeffs_s.iter().zip(coeffs_i) {
        for m in 0..ms {
            for n in 0..mi {
                phi[(m, n)] += cs[m] * ci[n];
                exchange[(m, n)] += cs[m].conj() * ci[n];
            }
            for n in m..ms {
                g1_s[(m, n)] += cs[m].conj() * cs[n];
            }
        }
        for m in 0..mi {
            for n in m..mi {
                g1_i[(m, n)] += ci[m].conj() * ci[n];
            }
        }
    }
    if let Some(r) = reference {
        for (rs, ri) in r.signal.iter().zip(r.idler) {
            for m in 0..ms {
                for n in m..ms {
                    g1_s[(m, n)] -= rs[m].conj() * rs[n];
                }
            }
            for m in 0..mi {
                for n in m..mi {
                    g1_i[(m, n)] -= ri[m].conj() * ri[n];
                }
            }
        }
    }
    let zero_point = if reference.is_some() { 0.0 } else { sigma0_sq };
    let inv = 1.0 / b as f64;
    for v in phi.as_mut_slice().iter_mut().chain(exchange.as_mut_slice()) {
        *v *= inv;
    }
    let finish = |g: &mut CMatrix| {
        let n = g.rows();
        for m in 0..n {
            let d = g[(m, m)].re * inv - zero_point;
            g[(m, m)] = Complex64::new(d, 0.0);
            for k in (m + 1)..n {
                let v = g[(m, k)] * inv;
                g[(m, k)] = v;
                g[(k, m)] = v.conj();
            }
        }
    };
    finish(&mut g1_s);
    finish(&mut g1_i);
    let n_s = (0..ms).map(|m| g1_s[(m, m)].re).collect();
    let n_i = (0..mi).map(|m| g1_i[(m, m)].re).collect();
    Ok(MomentSet {
        n_s,
        n_i,
        phi,
        g1_s,
        g1_i,
        exchange,
        batch_size: b,
        sigma0_sq,
        labels_s,
        labels_i,
    })
}

/// Projects each output pair onto the bases (modes at the pair's `z`) and
/// estimates moments.
pub fn estimate_moments(
    outputs: &[FieldPair],
    basis_s: &ModeBasis,
    basis_i: &ModeBasis,
    sigma0_sq: f64,
) -> Result<MomentSet> {
    check_batch(outputs.len())?;
    let grid = outputs[0].signal.grid;
    let z = outputs[0].z;
    let ms = basis_s.eval_all(z, grid)?;
    let mi = basis_i.eval_all(z, grid)?;
    let cs: Vec<Vec<Complex64>> = outputs.iter().map(|o| project(&o.signal, &ms).0).collect();
    let ci: Vec<Vec<Complex64>> = outputs.iter().map(|o| project(&o.idler, &mi).0).collect();
    estimate_moments_from_coeffs(&cs, &ci, sigma0_sq, basis_s.labels(), basis_i.labels())
}

/// Raw (unnormalised) `|Φ|² + N_s·N_i`.
pub fn raw_pair_matrix(moments: &MomentSet) -> RMatrix {
    let (ms, mi) = moments.phi.shape();
    RMatrix::from_fn(ms, mi, |m, n| {
        moments.phi[(m, n)].norm_sqr() + moments.n_s[m] * moments.n_i[n]
    })
}

/// Floors negative entries at zero and normalises to unit sum.
pub fn normalize_raw(raw: &RMatrix, labels_s: Vec<String>, labels_i: Vec<String>) -> Result<CorrelationMatrix> {
    if raw.iter().any(|v| !v.is_finite()) {
        return Err(SimError::NonFiniteField { step: None });
    }
    let positive: f64 = raw.iter().filter(|v| **v > 0.0).sum();
    let negative: f64 = -raw.iter().filter(|v| **v < 0.0).sum::<f64>();
    if !(positive > 0.0) {
        return Err(SimError::DegenerateP(raw.sum()));
    }
    Ok(CorrelationMatrix {
        p: raw.map(|v| if v > 0.0 { v / positive } else { 0.0 }),
        labels_s,
        labels_i,
        floored_mass: negative / positive,
    })
}

/// Relative size of a moment that is indistinguishable from rounding.
pub const ROUNDING_MOMENT: f64 = 1e3 * f64::EPSILON;

/// `P(m,n) ∝ max(0, |Φ(m,n)|² + N_s(m)·N_i(n))`, normalised to unit sum.

pub fn compute_p(moments: &MomentSet) -> Result<CorrelationMatrix> {
    let raw = raw_pair_matrix(moments);
    // Below this the moments are rounding residue of the vacuum subtraction.
    let floor = raw.rows() as f64 * raw.cols() as f64 * (ROUNDING_MOMENT * moments.sigma0_sq).powi(2);
    if !(raw.sum() > floor) {
        return Err(SimError::DegenerateP(raw.sum()));
    }
    normalize_raw(&raw, moments.labels_s.clone(), moments.labels_i.clone())
}

/// Direct fourth-moment estimate of `G²(m,n) = ⟨a_s†a_i†a_i a_s⟩`, normally ordered.
/// Higher variance than the Gaussian factorisation used by [`compute_p`]; kept
/// for cross-validation.
pub fn fourth_moment_g2(
    coeffs_s: &[Vec<Complex64>],
    coeffs_i: &[Vec<Complex64>],
    sigma0_sq: f64,
) -> Result<RMatrix> {
    let b = coeffs_s.len();
    check_batch(b)?;
    let ms = coeffs_s[0].len();
    let mi = coeffs_i[0].len();
    let mut e4 = RMatrix::zeros(ms, mi);
    let mut es = vec![0.0; ms];
    let mut ei = vec![0.0; mi];
    for (cs, ci) in coeffs_s.iter().zip(coeffs_i) {
        for m in 0..ms {
            let a = cs[m].norm_sqr();
            es[m] += a;
            for n in 0..mi {
                e4[(m, n)] += a * ci[n].norm_sqr();
            }
        }
        for n in 0..mi {
            ei[n] += ci[n].norm_sqr();
        }
    }
    let inv = 1.0 / b as f64;
    let ns: Vec<f64> = es.iter().map(|v| v * inv - sigma0_sq).collect();
    let ni: Vec<f64> = ei.iter().map(|v| v * inv - sigma0_sq).collect();
    Ok(RMatrix::from_fn(ms, mi, |m, n| {
        e4[(m, n)] * inv - sigma0_sq * (ns[m] + ni[n]) - sigma0_sq * sigma0_sq
    }))
}

/// Bootstrap standard deviation of the normalised `|Φ|²` entries.
pub fn bootstrap_phi_sq_std(
    coeffs_s: &[Vec<Complex64>],
    coeffs_i: &[Vec<Complex64>],
    resamples: usize,
    seed: u64,
) -> Result<RMatrix> {
    let b = coeffs_s.len();
    check_batch(b)?;
    let ms = coeffs_s[0].len();
    let mi = coeffs_i[0].len();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut sum = RMatrix::zeros(ms, mi);
    let mut sum_sq = RMatrix::zeros(ms, mi);
    let mut phi = CMatrix::zeros(ms, mi);
    for _ in 0..resamples {
        phi.as_mut_slice().iter_mut().for_each(|v| *v = ZERO);
        for _ in 0..b {
            let k = rng.random_range(0..b);
            for m in 0..ms {
                for n in 0..mi {
                    phi[(m, n)] += coeffs_s[k][m] * coeffs_i[k][n];
                }
            }
        }
        let total: f64 = phi.iter().map(|v| v.norm_sqr()).sum();
        for m in 0..ms {
            for n in 0..mi {
                let v = phi[(m, n)].norm_sqr() / total;
                sum[(m, n)] += v;
                sum_sq[(m, n)] += v * v;
            }
        }
    }
    let r = resamples as f64;
    Ok(RMatrix::from_fn(ms, mi, |m, n| {
        let mean = sum[(m, n)] / r;
        (sum_sq[(m, n)] / r - mean * mean).max(0.0).sqrt()
    }))
}

/// `|Φ|²` normalised to unit sum.
pub fn normalized_phi_sq(phi: &CMatrix) -> RMatrix {
    let total: f64 = phi.iter().map(|v| v.norm_sqr()).sum();
    phi.map(|v| v.norm_sqr() / total)
}

/// First-order pair amplitude from explicit per-slice pump and effective
/// hologram fields: `Φ(m,n) = i·κ·Σ_j dz ∬ A_eff·E_p·conj(M_m^s(z_j))·conj(M_n^i(z_j))`.
pub fn perturbative_jsa_fields(
    e_p: &[ComplexField],
    a_eff: &[ComplexField],
    kappa: f64,
    basis_s: &ModeBasis,
    basis_i: &ModeBasis,
    grid: GridSpec,
) -> Result<CMatrix> {
    if e_p.len() != grid.nz || a_eff.len() != grid.nz {
        return Err(SimError::ShapeMismatch("one pump and hologram field per slice required".into()));
    }
    let (ns, ni) = (basis_s.len(), basis_i.len());
    let mut phi = CMatrix::zeros(ns, ni);
    let da = grid.cell_area();
    let mut source = vec![ZERO; grid.len()];
    for j in 0..grid.nz {
        let z = grid.slice_mid(j);
        let ms = basis_s.sample_all(z, grid);
        let mi = basis_i.sample_all(z, grid);
        for (o, (e, a)) in source.iter_mut().zip(e_p[j].values.iter().zip(&a_eff[j].values)) {
            *o = e * a;
        }
        for (m, fm) in ms.iter().enumerate() {
            let weighted: Vec<Complex64> = source.iter().zip(&fm.values).map(|(s, v)| s * v.conj()).collect();
            for (n, fn_) in mi.iter().enumerate() {
                let acc: Complex64 = weighted.iter().zip(&fn_.values).map(|(w, v)| w * v.conj()).sum();
                phi[(m, n)] += acc * grid.dz * da;
            }
        }
    }
    let factor = Complex64::new(0.0, kappa);
    phi.as_mut_slice().iter_mut().for_each(|v| *v *= factor);
    Ok(phi)
}

/// First-order (Born) pair amplitude `⟨a_s a_i⟩` for pump `ϑ` and hologram `φ`.
pub fn perturbative_jsa(
    pump: &PumpParams,
    holo: &HologramParams,
    params: &InteractionParams,
    basis_s: &ModeBasis,
    basis_i: &ModeBasis,
    grid: GridSpec,
) -> Result<CMatrix> {
    let mut e_p = Vec::with_capacity(grid.nz);
    let mut a_eff = Vec::with_capacity(grid.nz);
    for j in 0..grid.nz {
        e_p.push(build_pump(pump, grid.slice_mid(j), grid)?);
        a_eff.push(effective_coupling(&build_hologram(holo, j, grid)?, j, params));
    }
    perturbative_jsa_fields(&e_p, &a_eff, params.kappa, basis_s, basis_i, grid)
}

/// Bhattacharyya coefficient `Σ√(P·Q)`, computed on the sum-normalised inputs.
pub fn fidelity(p: &CorrelationMatrix, target: &CorrelationMatrix) -> Result<f64> {
    fidelity_matrix(&p.p, &target.p)
}

pub(crate) fn fidelity_matrix(p: &RMatrix, q: &RMatrix) -> Result<f64> {
    if p.shape() != q.shape() {
        return Err(SimError::ShapeMismatch(format!("{:?} vs {:?}", p.shape(), q.shape())));
    }
    let bc: f64 = p.iter().zip(q.iter()).map(|(a, b)| (a * b).sqrt()).sum();
    let norm = (p.sum() * q.sum()).sqrt();
    Ok((bc / norm).clamp(0.0, 1.0))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::grid::VacuumBatch;
    use crate::propagator::CouplingSlice;

    fn labels(n: usize) -> Vec<String> {
        (0..n).map(|k| format!("m{k}")).collect()
    }

    fn cm(rows: usize, cols: usize, v: &[f64]) -> CorrelationMatrix {
        CorrelationMatrix::from_matrix(RMatrix::from_vec(rows, cols, v.to_vec()).unwrap(), labels(rows), labels(cols))
            .unwrap()
    }

    #[test]
    fn fidelity_closed_forms() {
        let u = cm(2, 2, &[0.25; 4]);
        let d = cm(2, 2, &[1.0, 0.0, 0.0, 0.0]);
        let e = cm(2, 2, &[0.0, 0.0, 0.0, 1.0]);
        assert_eq!(fidelity(&u, &u).unwrap(), 1.0);
        let p = cm(3, 3, &[0.1, 0.2, 0.05, 0.15, 0.0, 0.1, 0.3, 0.05, 0.05]);
        assert_eq!(fidelity(&p, &p).unwrap(), 1.0);
        assert_eq!(fidelity(&d, &e).unwrap(), 0.0);
        assert!((fidelity(&u, &d).unwrap() - 0.5).abs() < 1e-15);
        assert!(fidelity(&u, &cm(1, 4, &[0.25; 4])).is_err());
    }

    fn pixel_batch(b: usize, seed: u64, gl: f64) -> (Vec<Vec<Complex64>>, Vec<Vec<Complex64>>) {
        // Every pixel is an independent two-mode squeezer; pixel values scaled by
        // √dA are the coefficients of orthonormal single-pixel modes.
        let g = GridSpec::new(8, 8, 1e-6, 1e-6, 1, 1e-3).unwrap();
        let vac = VacuumBatch::new(seed, 0, b, g, 0.5, false).unwrap();
        let gain = vec![Complex64::new(gl / g.dz, 0.0); g.len()];
        let slice = CouplingSlice::new(gain, g.dz);
        let sq = g.cell_area().sqrt();
        let mut cs = Vec::with_capacity(b);
        let mut ci = Vec::with_capacity(b);
        for k in 0..b {
            let (mut s, mut i) = vac.sample(k);
            slice.apply(&mut s.values, &mut i.values);
            cs.push(vec![s.values[0] * sq]);
            ci.push(vec![i.values[0] * sq]);
        }
        (cs, ci)
    }

    #[test]
    fn two_mode_squeezed_vacuum_moments() {
        let b = 100_000;
        let gl: f64 = 0.5;
        let (cs, ci) = pixel_batch(b, 21, gl);
        let m = estimate_moments_from_coeffs(&cs, &ci, 0.5, labels(1), labels(1)).unwrap();
        let n = gl.sinh().powi(2);
        // σ_stat from per-sample spreads.
        let var_n: f64 = cs.iter().map(|c| (c[0].norm_sqr() - 0.5 - n).powi(2)).sum::<f64>() / b as f64;
        let sig_n = (var_n / b as f64).sqrt();
        assert!((m.n_s[0] - n).abs() < 3.0 * sig_n, "{} vs {n}", m.n_s[0]);
        assert!((m.n_i[0] - n).abs() < 3.0 * sig_n);
        let phi = m.phi[(0, 0)];
        let var_phi: f64 =
            cs.iter().zip(&ci).map(|(s, i)| (s[0] * i[0] - phi).norm_sqr()).sum::<f64>() / b as f64;
        let sig_phi2 = 2.0 * phi.norm() * (var_phi / b as f64).sqrt();
        assert!((phi.norm_sqr() - n * (n + 1.0)).abs() < 3.0 * sig_phi2);
    }

    #[test]
    fn vacuum_has_no_photons() {
        let b = 100_000;
        let (cs, ci) = pixel_batch(b, 5, 0.0);
        let m = estimate_moments_from_coeffs(&cs, &ci, 0.5, labels(1), labels(1)).unwrap();
        let bound = 3.0 * 0.5 / (b as f64).sqrt();
        assert!(m.n_s[0].abs() < bound && m.n_i[0].abs() < bound);
        assert!(m.phi[(0, 0)].norm() < bound);
    }

    #[test]
    fn g1_is_exactly_hermitian() {
        let g = GridSpec::new(8, 8, 1e-6, 1e-6, 1, 1e-3).unwrap();
        let vac = VacuumBatch::new(1, 0, 50, g, 0.5, false).unwrap();
        let sq = g.cell_area().sqrt();
        let (cs, ci): (Vec<_>, Vec<_>) = (0..50)
            .map(|k| {
                let (s, i) = vac.sample(k);
                (
                    s.values[..5].iter().map(|v| v * sq).collect::<Vec<_>>(),
                    i.values[..4].iter().map(|v| v * sq).collect::<Vec<_>>(),
                )
            })
            .unzip();
        let m = estimate_moments_from_coeffs(&cs, &ci, 0.5, labels(5), labels(4)).unwrap();
        for g1 in [&m.g1_s, &m.g1_i] {
            let n = g1.rows();
            for a in 0..n {
                assert_eq!(g1[(a, a)].re, if std::ptr::eq(g1, &m.g1_s) { m.n_s[a] } else { m.n_i[a] });
                for b in 0..n {
                    assert_eq!(g1[(a, b)], g1[(b, a)].conj());
                }
            }
        }
        assert!(matches!(
            estimate_moments_from_coeffs(&cs[..1], &ci[..1], 0.5, labels(5), labels(4)),
            Err(SimError::BatchTooSmall { .. })
        ));
    }

    #[test]
    fn tmsv_p_concentrates_on_pair() {
        let (cs, ci) = pixel_batch(100_000, 8, 0.2);
        // Two modes per side: pixel 0 squeezed partner, plus an unrelated vacuum pixel.
        let g = GridSpec::new(8, 8, 1e-6, 1e-6, 1, 1e-3).unwrap();
        let vac = VacuumBatch::new(99, 0, cs.len(), g, 0.5, false).unwrap();
        let sq = g.cell_area().sqrt();
        let mut cs2 = Vec::new();
        let mut ci2 = Vec::new();
        for (k, (s, i)) in cs.iter().zip(&ci).enumerate() {
            let (vs, vi) = vac.sample(k);
            cs2.push(vec![s[0], vs.values[0] * sq]);
            ci2.push(vec![i[0], vi.values[0] * sq]);
        }
        let m = estimate_moments_from_coeffs(&cs2, &ci2, 0.5, labels(2), labels(2)).unwrap();
        let p = compute_p(&m).unwrap();
        assert!((p.p.sum() - 1.0).abs() < 1e-12);
        for (k, v) in p.p.iter().enumerate() {
            if k != 0 {
                assert!(*v < 0.01, "entry {k} = {v}");
            }
        }
    }

    #[test]
    fn compute_p_scale_invariance_and_degenerate() {
        let g = GridSpec::new(8, 8, 1e-6, 1e-6, 1, 1e-3).unwrap();
        let (cs, ci) = pixel_batch(200, 3, 0.4);
        let _ = g;
        let m = estimate_moments_from_coeffs(&cs, &ci, 0.5, labels(1), labels(1)).unwrap();
        let mut m3 = m.clone();
        m3.n_s.push(0.01);
        m3.n_i.push(0.02);
        m3.phi = CMatrix::from_fn(2, 2, |a, b| Complex64::new(0.1 * (a + 1) as f64, -0.05 * b as f64));
        m3.labels_s = labels(2);
        m3.labels_i = labels(2);
        let p = compute_p(&m3).unwrap();
        let q = compute_p(&m3.scaled(7.5)).unwrap();
        for (a, b) in p.p.iter().zip(q.p.iter()) {
            assert!((a - b).abs() < 1e-12);
        }
        let mut zero = m3.clone();
        zero.phi = CMatrix::zeros(2, 2);
        zero.n_s = vec![0.0; 2];
        zero.n_i = vec![0.0; 2];
        assert!(matches!(compute_p(&zero), Err(SimError::DegenerateP(_))));
    }

    #[test]
    fn negative_entries_are_floored() {
        let raw = RMatrix::from_vec(1, 3, vec![0.5, -0.1, 0.5]).unwrap();
        let p = normalize_raw(&raw, labels(1), labels(3)).unwrap();
        assert_eq!(p.p.as_slice(), &[0.5, 0.0, 0.5]);
        assert!((p.floored_mass - 0.1).abs() < 1e-15);
    }

    #[test]
    fn fourth_moment_matches_factorisation_for_tmsv() {
        let (cs, ci) = pixel_batch(200_000, 17, 0.6);
        let g2 = fourth_moment_g2(&cs, &ci, 0.5).unwrap();
        let n = 0.6f64.sinh().powi(2);
        // TMSV: ⟨a†b†ba⟩ = |Φ|² + N² = 2N² + N.
        let expect = 2.0 * n * n + n;
        assert!((g2[(0, 0)] - expect).abs() < 0.05 * expect, "{} vs {expect}", g2[(0, 0)]);
    }
}
