//! Split-step Fourier integration of the coupled signal/idler envelopes.
//!
//! Per slice of thickness `h`: diffraction over `h/2`, exact local two-mode
//! squeezing with `G = κ·A_eff·E_p` at the slice mid-plane, diffraction over
//! `h/2`. Adjacent half-steps are merged into one full step, which is the same
//! operator in exact arithmetic and saves one FFT pair per slice.

use std::sync::Arc;

use num_complex::Complex64;

use crate::error::{Result, SimError};
use crate::grid::{ComplexField, Fft2, FftWork, GridSpec};

const ZERO: Complex64 = Complex64::new(0.0, 0.0);

/// Signal and idler envelopes at position `z`.
#[derive(Debug, Clone, PartialEq)]
pub struct FieldPair {
    pub signal: ComplexField,
    pub idler: ComplexField,
    pub z: f64,
}

impl FieldPair {
    pub fn new(signal: ComplexField, idler: ComplexField, z: f64) -> Result<Self> {
        if signal.grid != idler.grid {
            return Err(SimError::ShapeMismatch("signal and idler grids differ".into()));
        }
        Ok(Self { signal, idler, z })
    }

    /// `∬(|A_s|² − |A_i|²) dx dy`.
    pub fn flux_difference(&self) -> f64 {
        self.signal.power() - self.idler.power()
    }

    pub fn total_flux(&self) -> f64 {
        self.signal.power() + self.idler.power()
    }

    pub fn is_finite(&self) -> bool {
        self.signal.is_finite() && self.idler.is_finite()
    }
}

/// Spectral phase `exp(−i·K²·distance/(2k))/N` in the transposed spectrum layout.
fn phase_table(grid: GridSpec, k: f64, distance: f64) -> Vec<Complex64> {
    let n = grid.len() as f64;
    let mut t = Vec::with_capacity(grid.len());
    for ix in 0..grid.nx {
        let kx = grid.kx(ix);
        for iy in 0..grid.ny {
            let ky = grid.ky(iy);
            let phi = -(kx * kx + ky * ky) * distance / (2.0 * k);
            t.push(Complex64::from_polar(1.0 / n, phi));
        }
    }
    t
}

fn apply_table(fft: &Fft2, data: &mut [Complex64], table: &[Complex64], work: &mut FftWork) {
    fft.forward_into_transposed(data, work);
    for (b, t) in work.buf.iter_mut().zip(table) {
        *b *= t;
    }
    fft.inverse_from_transposed(data, work);
}

/// Free-space paraxial propagation of `field` over `distance` in a medium of wavenumber `k`.
pub fn diffract(field: &ComplexField, k: f64, distance: f64) -> ComplexField {
    let mut out = field.clone();
    if distance == 0.0 {
        return out;
    }
    let fft = Fft2::shared(field.grid.nx, field.grid.ny);
    let table = phase_table(field.grid, k, distance);
    let mut work = fft.work();
    apply_table(&fft, &mut out.values, &table, &mut work);
    out
}

/// Diffraction of both envelopes over `half_dz` (normally `dz/2`).
pub fn diffraction_half_step(pair: &FieldPair, half_dz: f64, k_s: f64, k_i: f64) -> FieldPair {
    FieldPair {
        signal: diffract(&pair.signal, k_s, half_dz),
        idler: diffract(&pair.idler, k_i, half_dz),
        z: pair.z + half_dz,
    }
}

/// Per-pixel coefficients of the exact local squeezing update over one slice:
/// `s' = C·s + S·conj(i)`, `i' = C·i + S·conj(s)` with `C = cosh(h|G|)`,
/// `S = i·G·sinh(h|G|)/|G|`.
#[derive(Debug, Clone, PartialEq)]
pub struct CouplingSlice {
    pub gain: Vec<Complex64>,
    pub c: Vec<f64>,
    pub s: Vec<Complex64>,
    /// `sinh(h|G|)/|G|`.
    pub sigma: Vec<f64>,
    /// `(h|G|·cosh(h|G|) − sinh(h|G|))/|G|³`, needed by the adjoint.
    pub beta: Vec<f64>,
    pub h: f64,
}

/// `sinh(x)/x` and `(x cosh x − sinh x)/x³`, with series near zero.
pub(crate) fn sinhc_terms(x: f64) -> (f64, f64) {
    if x < 0.1 {
        let x2 = x * x;
        let sinhc = 1.0 + x2 / 6.0 * (1.0 + x2 / 20.0 * (1.0 + x2 / 42.0 * (1.0 + x2 / 72.0)));
        let b = 1.0 / 3.0 + x2 * (1.0 / 30.0 + x2 * (1.0 / 840.0 + x2 * (1.0 / 45360.0 + x2 * 10.0 / 39916800.0)));
        (sinhc, b)
    } else {
        let (sh, ch) = (x.sinh(), x.cosh());
        (sh / x, (x * ch - sh) / (x * x * x))
    }
}

impl CouplingSlice {
    pub fn new(gain: Vec<Complex64>, h: f64) -> Self {
        let n = gain.len();
        let mut c = Vec::with_capacity(n);
        let mut s = Vec::with_capacity(n);
        let mut sigma = Vec::with_capacity(n);
        let mut beta = Vec::with_capacity(n);
        for g in &gain {
            let gm = g.norm();
            let x = h * gm;
            let (sinhc, b) = sinhc_terms(x);
            let sg = h * sinhc;
            c.push(x.cosh());
            s.push(Complex64::new(0.0, sg) * g);
            sigma.push(sg);
            beta.push(h * h * h * b);
        }
        Self {
            gain,
            c,
            s,
            sigma,
            beta,
            h,
        }
    }

    pub fn is_identity(&self) -> bool {
        self.h == 0.0 || self.gain.iter().all(|g| *g == ZERO)
    }

    pub(crate) fn apply(&self, s: &mut [Complex64], i: &mut [Complex64]) {
        for (((sv, iv), c), k) in s.iter_mut().zip(i.iter_mut()).zip(&self.c).zip(&self.s) {
            let (s0, i0) = (*sv, *iv);
            *sv = s0 * c + k * i0.conj();
            *iv = i0 * c + k * s0.conj();
        }
    }
}

/// Exact local two-mode squeezing step over `dz`.
pub fn coupling_step(
    pair: &FieldPair,
    e_p: &ComplexField,
    a_eff: &ComplexField,
    kappa: f64,
    dz: f64,
) -> Result<FieldPair> {
    if e_p.grid != pair.signal.grid || a_eff.grid != pair.signal.grid {
        return Err(SimError::ShapeMismatch("coupling fields on different grids".into()));
    }
    let mut out = pair.clone();
    out.z += dz;
    if kappa == 0.0 || dz == 0.0 {
        return Ok(out);
    }
    let gain = e_p
        .values
        .iter()
        .zip(&a_eff.values)
        .map(|(e, a)| kappa * a * e)
        .collect();
    let slice = CouplingSlice::new(gain, dz);
    slice.apply(&mut out.signal.values, &mut out.idler.values);
    Ok(out)
}

/// Forward trajectory checkpoints: the field pair entering each coupling step.
#[derive(Debug, Clone, PartialEq)]
pub struct PropagationRecord {
    pub scheme: &'static str,
    pub seed: (Vec<Complex64>, Vec<Complex64>),
    pub checkpoints: Vec<(Vec<Complex64>, Vec<Complex64>)>,
}

/// Precomputed spectral tables for one grid and pair of wavenumbers.
#[derive(Debug, Clone)]
pub struct Propagator {
    pub grid: GridSpec,
    pub k_s: f64,
    pub k_i: f64,
    fft: Arc<Fft2>,
    half_s: Vec<Complex64>,
    full_s: Vec<Complex64>,
    half_i: Vec<Complex64>,
    full_i: Vec<Complex64>,
    /// Conjugated tables, `[half_s, full_s, half_i, full_i]`, for the adjoint sweep.
    conj: [Vec<Complex64>; 4],
}

/// Scheme label stored in records and output metadata.
pub const SCHEME: &str = "strang-split-step-fourier/merged-half-steps/exact-local-squeezing";

impl Propagator {
    pub fn new(grid: GridSpec, k_s: f64, k_i: f64) -> Self {
        let half_s = phase_table(grid, k_s, 0.5 * grid.dz);
        let full_s = phase_table(grid, k_s, grid.dz);
        let half_i = phase_table(grid, k_i, 0.5 * grid.dz);
        let full_i = phase_table(grid, k_i, grid.dz);
        let cj = |t: &[Complex64]| t.iter().map(|v| v.conj()).collect::<Vec<_>>();
        let conj = [cj(&half_s), cj(&full_s), cj(&half_i), cj(&full_i)];
        Self {
            grid,
            k_s,
            k_i,
            fft: Fft2::shared(grid.nx, grid.ny),
            half_s,
            full_s,
            half_i,
            full_i,
            conj,
        }
    }

    pub fn work(&self) -> FftWork {
        self.fft.work()
    }

    fn step(&self, s: &mut [Complex64], i: &mut [Complex64], half: bool, adjoint: bool, work: &mut FftWork) {
        let (ts, ti) = match (half, adjoint) {
            (true, false) => (&self.half_s, &self.half_i),
            (false, false) => (&self.full_s, &self.full_i),
            (true, true) => (&self.conj[0], &self.conj[2]),
            (false, true) => (&self.conj[1], &self.conj[3]),
        };
        apply_table(&self.fft, s, ts, work);
        apply_table(&self.fft, i, ti, work);
    }

    /// Propagates raw signal/idler arrays through `slices` in place.
    pub(crate) fn run(
        &self,
        s: &mut [Complex64],
        i: &mut [Complex64],
        slices: &[CouplingSlice],
        mut record: Option<&mut Vec<(Vec<Complex64>, Vec<Complex64>)>>,
        work: &mut FftWork,
    ) {
        let nz = slices.len();
        self.step(s, i, true, false, work);
        for (j, slice) in slices.iter().enumerate() {
            if let Some(rec) = record.as_deref_mut() {
                rec.push((s.to_vec(), i.to_vec()));
            }
            if !slice.is_identity() {
                slice.apply(s, i);
            }
            self.step(s, i, j + 1 == nz, false, work);
        }
    }

    /// Adjoint of one diffraction step (full or half) applied to both envelopes.
    pub(crate) fn step_adjoint(&self, s_adj: &mut [Complex64], i_adj: &mut [Complex64], half: bool, work: &mut FftWork) {
        self.step(s_adj, i_adj, half, true, work);
    }

    /// Adjoint of the coupling step of `slice` at the checkpointed input `(s, i)`.
    /// Adds the per-pixel sums `r = Re(conj(s'_adj)·s + conj(i'_adj)·i)` into
    /// `acc_r` and `w = s'_adj·i + i'_adj·s` into `acc_w`, from which the gain
    /// adjoint follows linearly.
    #[allow(clippy::too_many_arguments)]
    pub(crate) fn couple_adjoint(
        slice: &CouplingSlice,
        s: &[Complex64],
        i: &[Complex64],
        s_adj: &mut [Complex64],
        i_adj: &mut [Complex64],
        acc_r: &mut [f64],
        acc_w: &mut [Complex64],
    ) {
        for p in 0..s.len() {
            let (sa, ia) = (s_adj[p], i_adj[p]);
            acc_r[p] += (sa.conj() * s[p] + ia.conj() * i[p]).re;
            acc_w[p] += sa * i[p] + ia * s[p];
            let (c, k) = (slice.c[p], slice.s[p]);
            s_adj[p] = sa * c + k * ia.conj();
            i_adj[p] = ia * c + k * sa.conj();
        }
    }

    /// Linear adjoint of the whole propagation with respect to the seed only
    /// (no accumulation); used by the adjoint-identity tests.
    #[cfg(test)]
    pub(crate) fn run_seed_adjoint(
        &self,
        s_adj: &mut [Complex64],
        i_adj: &mut [Complex64],
        slices: &[CouplingSlice],
        work: &mut FftWork,
    ) {
        let nz = slices.len();
        for j in (0..nz).rev() {
            self.step(s_adj, i_adj, j + 1 == nz, true, work);
            let slice = &slices[j];
            for p in 0..s_adj.len() {
                let (sa, ia) = (s_adj[p], i_adj[p]);
                s_adj[p] = sa * slice.c[p] + slice.s[p] * ia.conj();
                i_adj[p] = ia * slice.c[p] + slice.s[p] * sa.conj();
            }
        }
        self.step(s_adj, i_adj, true, true, work);
    }

    /// Full propagation of a seed pair from `z = 0` to `z = L`.
    pub fn propagate(
        &self,
        seed: &FieldPair,
        slices: &[CouplingSlice],
    ) -> Result<(FieldPair, PropagationRecord)> {
        if slices.len() != self.grid.nz {
            return Err(SimError::ShapeMismatch(format!(
                "{} coupling slices for nz = {}",
                slices.len(),
                self.grid.nz
            )));
        }
        if !seed.is_finite() {
            return Err(SimError::NonFiniteField { step: None });
        }
        let mut s = seed.signal.values.clone();
        let mut i = seed.idler.values.clone();
        let mut checkpoints = Vec::with_capacity(slices.len());
        let mut work = self.work();
        self.run(&mut s, &mut i, slices, Some(&mut checkpoints), &mut work);
        let out = FieldPair {
            signal: ComplexField { grid: self.grid, values: s },
            idler: ComplexField { grid: self.grid, values: i },
            z: seed.z + self.grid.length(),
        };
        if !out.is_finite() {
            return Err(SimError::NonFiniteField { step: None });
        }
        let record = PropagationRecord {
            scheme: SCHEME,
            seed: (seed.signal.values.clone(), seed.idler.values.clone()),
            checkpoints,
        };
        Ok((out, record))
    }

    /// Re-runs the forward pass from the record's seed.
    pub fn replay(&self, record: &PropagationRecord, slices: &[CouplingSlice]) -> FieldPair {
        let mut s = record.seed.0.clone();
        let mut i = record.seed.1.clone();
        let mut work = self.work();
        self.run(&mut s, &mut i, slices, None, &mut work);
        FieldPair {
            signal: ComplexField { grid: self.grid, values: s },
            idler: ComplexField { grid: self.grid, values: i },
            z: self.grid.length(),
        }
    }
}

/// Coupling slices for gains `G_j = κ·A_eff,j·E_p,j`.
pub fn coupling_slices(
    e_p: &[ComplexField],
    a_eff: &[ComplexField],
    kappa: f64,
    dz: f64,
) -> Vec<CouplingSlice> {
    e_p.iter()
        .zip(a_eff)
        .map(|(e, a)| {
            let gain = if kappa == 0.0 {
                vec![ZERO; e.values.len()]
            } else {
                e.values.iter().zip(&a.values).map(|(e, a)| kappa * a * e).collect()
            };
            CouplingSlice::new(gain, dz)
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::grid::{fft2_unitary, FftDirection};
    use crate::modes::{eval_mode, ModeIndex, ModeSpec};
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;
    use std::f64::consts::PI;

    const LS: f64 = 1064e-9;
    const NS: f64 = 2.16;

    fn ks() -> f64 {
        2.0 * PI * NS / LS
    }

    fn random_values(n: usize, rng: &mut ChaCha8Rng) -> Vec<Complex64> {
        (0..n)
            .map(|_| Complex64::new(rng.random::<f64>() - 0.5, rng.random::<f64>() - 0.5))
            .collect()
    }

    fn random_field(g: GridSpec, seed: u64) -> ComplexField {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        ComplexField::from_values(g, random_values(g.len(), &mut rng)).unwrap()
    }

    fn rel_l2(a: &ComplexField, b: &ComplexField) -> f64 {
        let num: f64 = a.values.iter().zip(&b.values).map(|(x, y)| (x - y).norm_sqr()).sum();
        (num / b.norm_sq()).sqrt()
    }

    #[test]
    fn half_step_is_unitary_and_dz_zero_is_identity() {
        let g = GridSpec::new(64, 64, 4e-6, 4e-6, 4, 50e-6).unwrap();
        let pair = FieldPair::new(random_field(g, 1), random_field(g, 2), 0.0).unwrap();
        let out = diffraction_half_step(&pair, 25e-6, ks(), ks() * 0.97);
        assert!((out.signal.norm() / pair.signal.norm() - 1.0).abs() < 1e-12);
        assert!((out.idler.norm() / pair.idler.norm() - 1.0).abs() < 1e-12);
        let same = diffraction_half_step(&pair, 0.0, ks(), ks());
        assert_eq!(same.signal, pair.signal);
        assert_eq!(same.idler, pair.idler);
    }

    #[test]
    fn gaussian_width_after_rayleigh_range() {
        let w0 = 20e-6;
        let g = GridSpec::new(128, 128, 8.0 * w0 / 128.0, 8.0 * w0 / 128.0, 1, 1e-6).unwrap();
        let m = ModeSpec::new(ModeIndex::Lg { p: 0, l: 0 }, w0, LS, NS).unwrap();
        let zr = m.rayleigh_range();
        let mut f = eval_mode(&m, 0.0, g).unwrap();
        let steps = 50;
        for _ in 0..steps {
            f = diffract(&f, m.wavenumber(), zr / steps as f64);
        }
        let w = f.second_moment_width_x();
        assert!((w / (w0 * 2f64.sqrt()) - 1.0).abs() < 5e-3, "{w}");
    }

    #[test]
    fn free_space_matches_analytic_modes() {
        let w0 = 20e-6;
        let g = GridSpec::new(256, 256, 1.25e-6, 1.25e-6, 1, 1e-6).unwrap();
        for idx in [ModeIndex::Lg { p: 0, l: 2 }, ModeIndex::Lg { p: 1, l: -1 }, ModeIndex::Hg { n: 2, m: 1 }] {
            let m = ModeSpec::new(idx, w0, LS, NS).unwrap();
            let zr = m.rayleigh_range();
            let f0 = eval_mode(&m, 0.0, g).unwrap();
            for z in [0.3 * zr, zr] {
                let num = diffract(&f0, m.wavenumber(), z);
                let ana = m.sample(z, g);
                assert!(rel_l2(&num, &ana) < 1e-3, "{idx} at {z}: {}", rel_l2(&num, &ana));
            }
        }
    }

    #[test]
    fn coupling_kappa_zero_is_identity() {
        let g = GridSpec::new(8, 8, 1e-6, 1e-6, 1, 1e-6).unwrap();
        let pair = FieldPair::new(random_field(g, 3), random_field(g, 4), 0.0).unwrap();
        let e = random_field(g, 5);
        let out = coupling_step(&pair, &e, &e, 0.0, 1e-6).unwrap();
        assert_eq!(out.signal, pair.signal);
        assert_eq!(out.idler, pair.idler);
    }

    #[test]
    fn coupling_matches_two_mode_squeezer() {
        let g = GridSpec::new(8, 8, 1e-6, 1e-6, 1, 1e-6).unwrap();
        let amp = Complex64::new(0.3, -0.4);
        let s = ComplexField::from_fn(g, |_, _| amp);
        let pair = FieldPair::new(s, ComplexField::zeros(g), 0.0).unwrap();
        let e = ComplexField::from_fn(g, |_, _| Complex64::new(0.0, 700.0));
        let a = ComplexField::from_fn(g, |_, _| Complex64::new(0.6, 0.8));
        let (kappa, dz) = (2.5, 1e-3);
        let gl = kappa * 700.0 * dz;
        let out = coupling_step(&pair, &e, &a, kappa, dz).unwrap();
        for p in 0..g.len() {
            assert!((out.signal.values[p].norm() - amp.norm() * gl.cosh()).abs() < 1e-12);
            assert!((out.idler.values[p].norm() - amp.norm() * gl.sinh()).abs() < 1e-12);
        }
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(32))]
        #[test]
        fn coupling_preserves_pixel_flux_difference(seed in 0u64..10_000, gain in 0.0f64..3.0) {
            let g = GridSpec::new(8, 8, 1e-6, 1e-6, 1, 1e-3).unwrap();
            let pair = FieldPair::new(random_field(g, seed), random_field(g, seed + 1), 0.0).unwrap();
            let e = random_field(g, seed + 2);
            let a = random_field(g, seed + 3);
            let out = coupling_step(&pair, &e, &a, gain * 1e3, 1e-3).unwrap();
            let scale = out.signal.max_abs().max(out.idler.max_abs()).powi(2).max(1.0);
            for p in 0..g.len() {
                let before = pair.signal.values[p].norm_sqr() - pair.idler.values[p].norm_sqr();
                let after = out.signal.values[p].norm_sqr() - out.idler.values[p].norm_sqr();
                prop_assert!((before - after).abs() < 1e-12 * scale);
            }
        }
    }

    fn random_slices(g: GridSpec, seed: u64, strength: f64) -> Vec<CouplingSlice> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (0..g.nz)
            .map(|_| {
                let gain = random_values(g.len(), &mut rng).into_iter().map(|v| v * strength).collect();
                CouplingSlice::new(gain, g.dz)
            })
            .collect()
    }

    #[test]
    fn flux_difference_conserved_over_crystal() {
        let g = GridSpec::new(64, 64, 8e-6, 8e-6, 20, 50e-6).unwrap();
        let prop = Propagator::new(g, ks(), ks() * 0.965);
        let slices = random_slices(g, 11, 4000.0);
        let seed = FieldPair::new(random_field(g, 12), random_field(g, 13), 0.0).unwrap();
        let (out, _) = prop.propagate(&seed, &slices).unwrap();
        let drift = (out.flux_difference() - seed.flux_difference()).abs();
        assert!(drift <= 1e-10 * out.total_flux(), "{drift}");
    }

    #[test]
    fn unitary_without_coupling() {
        let g = GridSpec::new(64, 64, 8e-6, 8e-6, 20, 50e-6).unwrap();
        let prop = Propagator::new(g, ks(), ks());
        let slices = random_slices(g, 1, 0.0);
        let seed = FieldPair::new(random_field(g, 2), random_field(g, 3), 0.0).unwrap();
        let (out, _) = prop.propagate(&seed, &slices).unwrap();
        assert!((out.signal.norm() / seed.signal.norm() - 1.0).abs() < 1e-12);
        assert!((out.idler.norm() / seed.idler.norm() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn replay_is_bit_exact() {
        let g = GridSpec::new(32, 32, 8e-6, 8e-6, 6, 50e-6).unwrap();
        let prop = Propagator::new(g, ks(), ks());
        let slices = random_slices(g, 4, 3000.0);
        let seed = FieldPair::new(random_field(g, 5), random_field(g, 6), 0.0).unwrap();
        let (out, rec) = prop.propagate(&seed, &slices).unwrap();
        assert_eq!(rec.checkpoints.len(), g.nz);
        assert_eq!(prop.replay(&rec, &slices), out);
    }

    fn inner(a: &[Complex64], b: &[Complex64]) -> Complex64 {
        a.iter().zip(b).map(|(x, y)| x.conj() * y).sum()
    }

    #[test]
    fn propagation_adjoint_identity() {
        // The map seed -> output is real-linear; check Re⟨u, P(v)⟩ = Re⟨P†(u), v⟩.
        let g = GridSpec::new(16, 16, 8e-6, 8e-6, 5, 50e-6).unwrap();
        let prop = Propagator::new(g, ks(), ks() * 0.97);
        let slices = random_slices(g, 7, 3000.0);
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let (vs, vi) = (random_values(g.len(), &mut rng), random_values(g.len(), &mut rng));
        let (us, ui) = (random_values(g.len(), &mut rng), random_values(g.len(), &mut rng));
        let mut work = prop.work();
        let (mut ps, mut pi) = (vs.clone(), vi.clone());
        prop.run(&mut ps, &mut pi, &slices, None, &mut work);
        let lhs = (inner(&us, &ps) + inner(&ui, &pi)).re;
        let (mut as_, mut ai) = (us.clone(), ui.clone());
        prop.run_seed_adjoint(&mut as_, &mut ai, &slices, &mut work);
        let rhs = (inner(&as_, &vs) + inner(&ai, &vi)).re;
        assert!((lhs - rhs).abs() < 1e-12 * lhs.abs().max(1.0), "{lhs} vs {rhs}");
    }

    #[test]
    fn fft_step_adjoint_identity() {
        let g = GridSpec::new(16, 16, 1e-6, 1e-6, 1, 1e-6).unwrap();
        let u = random_field(g, 1);
        let v = random_field(g, 2);
        let fv = fft2_unitary(&v, FftDirection::Forward);
        let fhu = fft2_unitary(&u, FftDirection::Inverse);
        let lhs = u.inner(&fv);
        let rhs = fhu.inner(&v);
        assert!((lhs - rhs).norm() < 1e-12 * lhs.norm().max(1.0));
    }

    fn strang_error_sequence(nzs: &[usize]) -> Vec<ComplexField> {
        let w = 60e-6;
        let length = 1e-3;
        let base = GridSpec::new(64, 64, 8e-6, 8e-6, 1, length).unwrap();
        let k = ks();
        // Smooth, z-dependent gain: a focused beam crossing a tilted grating.
        let gain_at = |x: f64, y: f64, z: f64| {
            let r2 = x * x + y * y;
            Complex64::from_polar(
                3000.0 * (-r2 / (w * w)).exp() * (1.0 + 0.5 * (z / length)),
                2.0e4 * x * (z / length) + 0.8 * y / w,
            )
        };
        let seed_s = ComplexField::from_fn(base, |x, y| {
            Complex64::new((-(x * x + y * y) / (w * w)).exp(), 0.2 * x / w)
        });
        let seed_i = ComplexField::from_fn(base, |x, y| {
            Complex64::new(0.3 * (-((x - 1e-5).powi(2) + y * y) / (w * w)).exp(), 0.0)
        });
        nzs.iter()
            .map(|&nz| {
                let g = base.with_slices(nz, length / nz as f64).unwrap();
                let prop = Propagator::new(g, k, 0.95 * k);
                let slices: Vec<CouplingSlice> = (0..nz)
                    .map(|j| {
                        let z = g.slice_mid(j);
                        let f = ComplexField::from_fn(g, |x, y| gain_at(x, y, z));
                        CouplingSlice::new(f.values, g.dz)
                    })
                    .collect();
                let mut s = seed_s.clone();
                s.grid = g;
                let mut i = seed_i.clone();
                i.grid = g;
                let seed = FieldPair::new(s, i, 0.0).unwrap();
                prop.propagate(&seed, &slices).unwrap().0.signal
            })
            .collect()
    }

    #[test]
    fn strang_splitting_is_second_order() {
        let nzs = [10, 20, 40, 80, 160];
        let out = strang_error_sequence(&nzs);
        let reference = &out[4];
        let diff = |a: &ComplexField, b: &ComplexField| {
            a.values.iter().zip(&b.values).map(|(x, y)| (x - y).norm_sqr()).sum::<f64>().sqrt()
        };
        // Self-convergence ratio of successive halvings.
        let d1 = diff(&out[0], &out[1]);
        let d2 = diff(&out[1], &out[2]);
        let ratio = d1 / d2;
        assert!((3.0..=5.0).contains(&ratio), "ratio {ratio}");
        // Slope of the error against the finest solution over nz = 10..80.
        let errs: Vec<f64> = (0..4).map(|j| diff(&out[j], reference)).collect();
        let xs: Vec<f64> = nzs[..4].iter().map(|n| (*n as f64).ln()).collect();
        let ys: Vec<f64> = errs.iter().map(|e| e.ln()).collect();
        let mx = xs.iter().sum::<f64>() / 4.0;
        let my = ys.iter().sum::<f64>() / 4.0;
        let slope = xs.iter().zip(&ys).map(|(x, y)| (x - mx) * (y - my)).sum::<f64>()
            / xs.iter().map(|x| (x - mx).powi(2)).sum::<f64>();
        assert!((-slope - 2.0).abs() <= 0.3, "slope {slope}");
    }
}
