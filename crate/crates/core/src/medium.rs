//! Pump synthesis, the clipped crystal hologram, quasi-phase-matching
//! bookkeeping and binarisation into a poling pattern.

use std::f64::consts::PI;

use num_complex::Complex64;

use crate::error::{Result, SimError};
use crate::grid::{ComplexField, GridSpec};
use crate::matrix::CMatrix;
use crate::modes::ModeBasis;

const ZERO: Complex64 = Complex64::new(0.0, 0.0);

/// Wavelengths, indices, coupling and phase mismatch of the three-wave interaction.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct InteractionParams {
    pub lambda_p: f64,
    pub lambda_s: f64,
    pub lambda_i: f64,
    pub n_p: f64,
    pub n_s: f64,
    pub n_i: f64,
    /// Coupling constant in `W^-1/2`; local gain is `κ·|A_eff·E_p|` in `1/m`.
    pub kappa: f64,
    pub poling_period: f64,
    pub delta_k: f64,
}

impl InteractionParams {
    /// Derives `δk` from the poling period.
    #[allow(clippy::too_many_arguments)]
    pub fn with_poling_period(
        lambda_p: f64,
        lambda_s: f64,
        lambda_i: f64,
        n_p: f64,
        n_s: f64,
        n_i: f64,
        kappa: f64,
        poling_period: f64,
    ) -> Result<Self> {
        let mut p = Self {
            lambda_p,
            lambda_s,
            lambda_i,
            n_p,
            n_s,
            n_i,
            kappa,
            poling_period,
            delta_k: 0.0,
        };
        p.validate_base()?;
        if !(poling_period > 0.0 && poling_period.is_finite()) {
            return Err(SimError::InvalidParameter(format!(
                "poling period {poling_period} must be positive"
            )));
        }
        p.delta_k = p.bare_mismatch() - 2.0 * PI / poling_period;
        Ok(p)
    }

    /// Derives the poling period from a prescribed residual mismatch `δk`.
    #[allow(clippy::too_many_arguments)]
    pub fn with_phase_mismatch(
        lambda_p: f64,
        lambda_s: f64,
        lambda_i: f64,
        n_p: f64,
        n_s: f64,
        n_i: f64,
        kappa: f64,
        delta_k: f64,
    ) -> Result<Self> {
        let mut p = Self {
            lambda_p,
            lambda_s,
            lambda_i,
            n_p,
            n_s,
            n_i,
            kappa,
            poling_period: 0.0,
            delta_k,
        };
        p.validate_base()?;
        let grating = p.bare_mismatch() - delta_k;
        if !(grating > 0.0) || !delta_k.is_finite() {
            return Err(SimError::InvalidParameter(format!(
                "phase mismatch {delta_k} 1/m leaves no positive grating vector"
            )));
        }
        p.poling_period = 2.0 * PI / grating;
        Ok(p)
    }

    fn validate_base(&self) -> Result<()> {
        let named = [
            ("lambda_p", self.lambda_p),
            ("lambda_s", self.lambda_s),
            ("lambda_i", self.lambda_i),
            ("n_p", self.n_p),
            ("n_s", self.n_s),
            ("n_i", self.n_i),
        ];
        for (name, v) in named {
            if !(v > 0.0 && v.is_finite()) {
                return Err(SimError::InvalidParameter(format!("{name} = {v} must be positive")));
            }
        }
        if !(self.kappa >= 0.0 && self.kappa.is_finite()) {
            return Err(SimError::InvalidParameter(format!(
                "kappa = {} must be non-negative",
                self.kappa
            )));
        }
        let residual = 1.0 / self.lambda_p - 1.0 / self.lambda_s - 1.0 / self.lambda_i;
        if residual.abs() >= 1e-6 / self.lambda_p {
            return Err(SimError::EnergyConservation(residual));
        }
        Ok(())
    }

    pub fn k_p(&self) -> f64 {
        2.0 * PI * self.n_p / self.lambda_p
    }

    pub fn k_s(&self) -> f64 {
        2.0 * PI * self.n_s / self.lambda_s
    }

    pub fn k_i(&self) -> f64 {
        2.0 * PI * self.n_i / self.lambda_i
    }

    /// `k_p − k_s − k_i` before quasi-phase-matching.
    pub fn bare_mismatch(&self) -> f64 {
        self.k_p() - self.k_s() - self.k_i()
    }
}

/// Pump coefficients `ϑ` over a mode basis at the pump wavelength.
#[derive(Debug, Clone, PartialEq)]
pub struct PumpParams {
    pub basis: ModeBasis,
    pub coeffs: Vec<Complex64>,
    /// Total pump power in watts.
    pub power: f64,
    pub trainable: bool,
}

impl PumpParams {
    pub fn new(basis: ModeBasis, coeffs: Vec<Complex64>, power: f64, trainable: bool) -> Result<Self> {
        if coeffs.len() != basis.len() {
            return Err(SimError::ShapeMismatch(format!(
                "{} pump coefficients for a basis of {} modes",
                coeffs.len(),
                basis.len()
            )));
        }
        if !(power > 0.0 && power.is_finite()) {
            return Err(SimError::InvalidParameter(format!("pump power {power} must be positive")));
        }
        Ok(Self {
            basis,
            coeffs,
            power,
            trainable,
        })
    }

    /// Pure fundamental mode.
    pub fn fundamental(basis: ModeBasis, power: f64, trainable: bool) -> Result<Self> {
        let mut coeffs = vec![ZERO; basis.len()];
        let k = basis
            .modes()
            .iter()
            .position(|m| m.index.order() == 0)
            .ok_or_else(|| SimError::ModeNotInBasis("fundamental pump mode".into()))?;
        coeffs[k] = Complex64::new(1.0, 0.0);
        Self::new(basis, coeffs, power, trainable)
    }

    pub fn check_nonzero(&self) -> Result<()> {
        if self.coeffs.iter().all(|c| c.norm_sqr() == 0.0) {
            return Err(SimError::AllZeroPump);
        }
        Ok(())
    }

    /// `Σ_k ϑ_k M_k(z)` without power normalisation.
    pub fn synthesize(&self, z: f64, grid: GridSpec) -> ComplexField {
        let modes = self.basis.sample_all(z, grid);
        combine(&self.coeffs, &modes, grid)
    }

    /// Amplitude factor that brings the synthesised field to `power` at `z = 0`.
    pub fn normalization(&self, grid: GridSpec) -> Result<f64> {
        self.check_nonzero()?;
        let q = self.synthesize(0.0, grid).power();
        if !(q > 0.0) {
            return Err(SimError::AllZeroPump);
        }
        Ok((self.power / q).sqrt())
    }
}

pub(crate) fn combine(coeffs: &[Complex64], modes: &[ComplexField], grid: GridSpec) -> ComplexField {
    let mut out = ComplexField::zeros(grid);
    for (c, m) in coeffs.iter().zip(modes) {
        if *c == ZERO {
            continue;
        }
        for (o, v) in out.values.iter_mut().zip(&m.values) {
            *o += c * v;
        }
    }
    out
}

/// `E_p(·,·,z)`, normalised so the power at `z = 0` equals `ϑ.power`.
pub fn build_pump(pump: &PumpParams, z: f64, grid: GridSpec) -> Result<ComplexField> {
    let n = pump.normalization(grid)?;
    let mut f = pump.synthesize(z, grid);
    f.scale(Complex64::new(n, 0.0));
    Ok(f)
}

/// Crystal hologram coefficients `φ`: one row of transverse mode weights per z-segment.
///
/// The transverse functions are the basis modes at their waist, made
/// dimensionless by multiplying with the waist, so `|u| ~ |φ|` near the axis.
/// `background` is a constant added to every segment before clipping; a
/// uniform crystal is `background = 1` with zero coefficients.
#[derive(Debug, Clone, PartialEq)]
pub struct HologramParams {
    pub basis: ModeBasis,
    pub n_seg: usize,
    pub raw_coeffs: CMatrix,
    pub background: Complex64,
    pub trainable: bool,
}

impl HologramParams {
    pub fn new(
        basis: ModeBasis,
        n_seg: usize,
        raw_coeffs: CMatrix,
        background: Complex64,
        trainable: bool,
    ) -> Result<Self> {
        if n_seg == 0 {
            return Err(SimError::InvalidParameter("n_seg must be at least 1".into()));
        }
        if raw_coeffs.shape() != (n_seg, basis.len()) {
            return Err(SimError::ShapeMismatch(format!(
                "hologram coefficients {:?}, expected ({n_seg}, {})",
                raw_coeffs.shape(),
                basis.len()
            )));
        }
        Ok(Self {
            basis,
            n_seg,
            raw_coeffs,
            background,
            trainable,
        })
    }

    /// Uniform crystal `A ≡ 1`.
    pub fn uniform(basis: ModeBasis, n_seg: usize) -> Result<Self> {
        let k = basis.len();
        Self::new(basis, n_seg, CMatrix::zeros(n_seg, k), Complex64::new(1.0, 0.0), false)
    }

    /// Segment containing `slice` for a crystal of `nz` slices.
    pub fn segment_of(&self, slice: usize, nz: usize) -> Result<usize> {
        if nz % self.n_seg != 0 {
            return Err(SimError::InvalidParameter(format!(
                "n_seg = {} does not divide nz = {nz}",
                self.n_seg
            )));
        }
        if slice >= nz {
            return Err(SimError::InvalidParameter(format!("slice {slice} >= nz = {nz}")));
        }
        Ok(slice / (nz / self.n_seg))
    }

    /// Dimensionless transverse synthesis functions.
    pub fn transverse_functions(&self, grid: GridSpec) -> Vec<ComplexField> {
        let w0 = Complex64::new(self.basis.waist(), 0.0);
        self.basis
            .sample_all(0.0, grid)
            .into_iter()
            .map(|mut f| {
                f.scale(w0);
                f
            })
            .collect()
    }

    /// Unclipped `u` for one segment.
    pub fn synthesize_segment(&self, seg: usize, functions: &[ComplexField], grid: GridSpec) -> ComplexField {
        let row: Vec<Complex64> = (0..self.basis.len()).map(|k| self.raw_coeffs[(seg, k)]).collect();
        let mut u = combine(&row, functions, grid);
        if self.background != ZERO {
            for v in &mut u.values {
                *v += self.background;
            }
        }
        u
    }
}

/// Projective clip `u / max(1, |u|)`.
pub fn clip(u: Complex64) -> Complex64 {
    let r = u.norm();
    if r > 1.0 {
        u / r
    } else {
        u
    }
}

/// Clipped hologram `A` at `slice`.
pub fn build_hologram(holo: &HologramParams, slice: usize, grid: GridSpec) -> Result<ComplexField> {
    let seg = holo.segment_of(slice, grid.nz)?;
    let functions = holo.transverse_functions(grid);
    let mut u = holo.synthesize_segment(seg, &functions, grid);
    for v in &mut u.values {
        *v = clip(*v);
    }
    Ok(u)
}

/// `A·exp(−i·δk·z_slice)` with `z_slice` the slice mid-plane.
pub fn effective_coupling(
    a: &ComplexField,
    slice: usize,
    params: &InteractionParams,
) -> ComplexField {
    let mut out = a.clone();
    if params.delta_k != 0.0 {
        let z = a.grid.slice_mid(slice);
        out.scale(Complex64::from_polar(1.0, -params.delta_k * z));
    }
    out
}

/// Binarised `±1` poling volume; `x` fastest, then `y`, then `z`.
#[derive(Debug, Clone, PartialEq)]
pub struct PolingVolume {
    pub nx: usize,
    pub ny: usize,
    pub nz: usize,
    pub dx: f64,
    pub dy: f64,
    pub dz: f64,
    pub poling_period: f64,
    pub subsamples_per_period: usize,
    pub values: Vec<i8>,
}

impl PolingVolume {
    pub fn at(&self, ix: usize, iy: usize, iz: usize) -> i8 {
        self.values[ix + self.nx * (iy + self.ny * iz)]
    }

    /// Number of complete poling periods contained in the volume.
    pub fn whole_periods(&self) -> usize {
        self.nz / self.subsamples_per_period
    }
}

/// Duty cycle encoding `|A|`: `sin(π·d) = |A|`.
pub fn duty_cycle(a: Complex64) -> f64 {
    a.norm().min(1.0).asin() / PI
}

/// First harmonic `(2/π)·sin(π·d)·e^{i·arg A}` realised by an ideal pattern.
pub fn ideal_first_harmonic(a: Complex64) -> Complex64 {
    let m = (2.0 / PI) * (PI * duty_cycle(a)).sin();
    if a == ZERO {
        ZERO
    } else {
        Complex64::from_polar(m, a.arg())
    }
}

/// Binarises the clipped hologram into a `±1` pattern with `subsamples_per_period`
/// cells per poling period.
///
/// Each period holds one `+1` domain of width `d·Λ` centred at `−arg A/(2π)·Λ`,
/// giving the first harmonic `(1/Λ)∫ s·e^{−2πiz/Λ} = (2/π)·sin(πd)·e^{i arg A}`.
/// Domain edges are quantised to cell boundaries with per-pixel error
/// diffusion along `z`, restarted wherever `A` changes, so quantisation
/// error averages out over each run of periods with the same target.
pub fn binarize_poling(
    holo: &HologramParams,
    params: &InteractionParams,
    grid: GridSpec,
    subsamples_per_period: usize,
) -> Result<PolingVolume> {
    let nz = grid.nz;
    let functions = holo.transverse_functions(grid);
    let mut segments = Vec::with_capacity(holo.n_seg);
    for seg in 0..holo.n_seg {
        let mut u = holo.synthesize_segment(seg, &functions, grid);
        for v in &mut u.values {
            *v = clip(*v);
        }
        segments.push(u);
    }
    let slice_a: Vec<&ComplexField> = (0..nz)
        .map(|j| holo.segment_of(j, nz).map(|s| &segments[s]))
        .collect::<Result<_>>()?;
    binarize_slices(&slice_a, params.poling_period, grid, subsamples_per_period)
}

/// Binarises an explicit stack of per-slice holograms (one field per slice).
pub fn binarize_slices(
    slices: &[&ComplexField],
    poling_period: f64,
    grid: GridSpec,
    subsamples_per_period: usize,
) -> Result<PolingVolume> {
    let s = subsamples_per_period;
    let dz_sub = poling_period / s as f64;
    if poling_period < 4.0 * dz_sub {
        return Err(SimError::Poling(format!(
            "poling period {poling_period:.4e} m is shorter than 4 sub-samples"
        )));
    }
    if s < 16 {
        return Err(SimError::Poling(format!(
            "{s} sub-samples per period; at least 16 are required"
        )));
    }
    if slices.len() != grid.nz {
        return Err(SimError::ShapeMismatch(format!(
            "{} hologram slices for nz = {}",
            slices.len(),
            grid.nz
        )));
    }
    let length = grid.length();
    let n_sub = (length / dz_sub).floor() as usize;
    if n_sub < s {
        return Err(SimError::Poling(format!(
            "crystal length {length:.4e} m is shorter than one poling period"
        )));
    }
    let n_periods = n_sub.div_ceil(s);
    let (nx, ny) = (grid.nx, grid.ny);
    let plane = nx * ny;
    let mut values = vec![-1i8; plane * n_sub];
    for p in 0..plane {
        let mut err_a = 0.0;
        let mut err_b = 0.0;
        let mut last_a = None;
        for q in 0..n_periods {
            let z_centre = ((q as f64) + 0.5) * poling_period;
            let j = ((z_centre / grid.dz).floor() as usize).min(grid.nz - 1);
            let a = slices[j].values[p];
            if last_a != Some(a) {
                // Keep the residual of one target value inside its own periods.
                err_a = 0.0;
                err_b = 0.0;
                last_a = Some(a);
            }
            let d = duty_cycle(a);
            if d == 0.0 {
                continue;
            }
            let centre = if a == ZERO { 0.0 } else { -a.arg() / (2.0 * PI) };
            // Edge positions in cell units relative to the period start.
            let lo = (centre - 0.5 * d) * s as f64;
            let hi = (centre + 0.5 * d) * s as f64;
            let lo_q = (lo + err_a).round();
            // Crossed edges give an empty domain; the residual carries forward.
            let hi_q = (hi + err_b).round().max(lo_q);
            err_a += lo - lo_q;
            err_b += hi - hi_q;
            let (lo_q, hi_q) = (lo_q as i64, hi_q as i64);
            for c in lo_q..hi_q {
                let cell = c.rem_euclid(s as i64) as usize;
                let iz = q * s + cell;
                if iz < n_sub {
                    values[p + plane * iz] = 1;
                }
            }
        }
    }
    Ok(PolingVolume {
        nx,
        ny,
        nz: n_sub,
        dx: grid.dx,
        dy: grid.dy,
        dz: dz_sub,
        poling_period,
        subsamples_per_period: s,
        values,
    })
}

/// First Fourier harmonic `(1/Λ)∫ s·e^{−2πiz/Λ}` of each `(x, y)` column over the
/// periods `periods`, treating every cell as constant over its extent.
pub fn extract_first_harmonic(vol: &PolingVolume, periods: std::ops::Range<usize>) -> Vec<Complex64> {
    let s = vol.subsamples_per_period;
    let plane = vol.nx * vol.ny;
    let cell_weight = (PI / s as f64).sin() / PI;
    let kernel: Vec<Complex64> = (0..s)
        .map(|k| Complex64::from_polar(cell_weight, -2.0 * PI * (k as f64 + 0.5) / s as f64))
        .collect();
    let count = periods.len().max(1) as f64;
    let mut out = vec![ZERO; plane];
    for q in periods {
        for (k, w) in kernel.iter().enumerate() {
            let iz = q * s + k;
            let row = &vol.values[plane * iz..plane * (iz + 1)];
            for (o, v) in out.iter_mut().zip(row) {
                *o += w * (*v as f64);
            }
        }
    }
    for o in &mut out {
        *o /= count;
    }
    out
}

/// Slice stack for a hologram that does not vary along `z`.
pub fn constant_slices(a: &ComplexField) -> Vec<&ComplexField> {
    vec![a; a.grid.nz]
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::modes::ModeIndex;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    const LP: f64 = 532e-9;
    const LS: f64 = 1064e-9;

    fn params() -> InteractionParams {
        InteractionParams::with_phase_mismatch(LP, LS, LS, 2.23357, 2.23211, 2.15554, 0.4, 0.0).unwrap()
    }

    fn grid() -> GridSpec {
        GridSpec::new(128, 128, 4e-6, 4e-6, 20, 50e-6).unwrap()
    }

    fn pump_basis() -> ModeBasis {
        ModeBasis::lg_orders(2, 40e-6, LP, 2.23357).unwrap()
    }

    fn holo_basis() -> ModeBasis {
        ModeBasis::lg(0, 2, 40e-6 * 2f64.sqrt(), LS, 2.23211).unwrap()
    }

    #[test]
    fn energy_conservation_is_enforced() {
        let r = InteractionParams::with_phase_mismatch(LP, 1000e-9, 1000e-9, 2.2, 2.1, 2.1, 0.4, 0.0);
        assert!(matches!(r, Err(SimError::EnergyConservation(_))));
    }

    #[test]
    fn poling_period_and_mismatch_agree() {
        let a = params();
        let b = InteractionParams::with_poling_period(
            LP, LS, LS, a.n_p, a.n_s, a.n_i, a.kappa, a.poling_period,
        )
        .unwrap();
        assert!(b.delta_k.abs() < 1e-6 * a.k_p());
        assert!((a.poling_period - 13.3848e-6).abs() < 1e-9);
    }

    #[test]
    fn pump_power_is_normalised() {
        let g = grid();
        let b = pump_basis();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let coeffs = (0..b.len())
            .map(|_| Complex64::new(rng.random::<f64>() - 0.5, rng.random::<f64>() - 0.5))
            .collect();
        let pump = PumpParams::new(b, coeffs, 1e-3, true).unwrap();
        let e = build_pump(&pump, 0.0, g).unwrap();
        assert!((e.power() - 1e-3).abs() < 1e-9 * 1e-3);
        // Free-space propagation keeps the power.
        for z in [0.25e-3, 0.5e-3, 1e-3] {
            let e = build_pump(&pump, z, g).unwrap();
            assert!((e.power() / 1e-3 - 1.0).abs() < 1e-6);
        }
    }

    #[test]
    fn pump_width_at_rayleigh_range() {
        let g = grid();
        let pump = PumpParams::fundamental(pump_basis(), 1e-3, false).unwrap();
        let zr = pump.basis.modes()[0].rayleigh_range();
        let e = build_pump(&pump, zr, g).unwrap();
        let w = e.second_moment_width_x();
        assert!((w / (40e-6 * 2f64.sqrt()) - 1.0).abs() < 5e-3, "width {w}");
    }

    #[test]
    fn pump_is_projective() {
        let g = grid();
        let b = pump_basis();
        let coeffs: Vec<Complex64> = (0..b.len()).map(|k| Complex64::new(k as f64, 1.0)).collect();
        let p1 = PumpParams::new(b.clone(), coeffs.clone(), 1e-3, true).unwrap();
        let p2 = PumpParams::new(b, coeffs.iter().map(|c| c * 2.0).collect(), 1e-3, true).unwrap();
        let e1 = build_pump(&p1, 0.3e-3, g).unwrap();
        let e2 = build_pump(&p2, 0.3e-3, g).unwrap();
        let scale = e1.max_abs();
        for (a, b) in e1.values.iter().zip(&e2.values) {
            assert!((a - b).norm() <= 1e-14 * scale);
        }
    }

    #[test]
    fn zero_pump_is_rejected() {
        let b = pump_basis();
        let n = b.len();
        let pump = PumpParams::new(b, vec![ZERO; n], 1e-3, true).unwrap();
        assert_eq!(build_pump(&pump, 0.0, grid()).unwrap_err(), SimError::AllZeroPump);
    }

    #[test]
    fn hologram_zero_small_and_saturated() {
        let g = grid();
        let b = holo_basis();
        let k = b.len();
        let zero = HologramParams::new(b.clone(), 10, CMatrix::zeros(10, k), ZERO, true).unwrap();
        assert!(build_hologram(&zero, 3, g).unwrap().values.iter().all(|v| *v == ZERO));

        let l0 = b.position(ModeIndex::Lg { p: 0, l: 0 }).unwrap();
        let functions = zero.transverse_functions(g);
        let peak = functions[l0].max_abs();
        let mut small = zero.clone();
        small.raw_coeffs[(0, l0)] = Complex64::new(0.1 / peak, 0.0);
        let u = small.synthesize_segment(0, &functions, g);
        let a = build_hologram(&small, 0, g).unwrap();
        assert_eq!(a, u);

        let mut big = zero;
        big.raw_coeffs[(0, l0)] = Complex64::new(3.0 / peak, 0.0);
        let a = build_hologram(&big, 0, g).unwrap();
        assert!((a.max_abs() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn segment_must_divide_slices() {
        let h = HologramParams::uniform(holo_basis(), 3).unwrap();
        assert!(build_hologram(&h, 0, grid()).is_err());
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(16))]
        #[test]
        fn hologram_is_bounded(seed in 0u64..1000, scale in 0.0f64..1e6) {
            let g = GridSpec::new(32, 32, 16e-6, 16e-6, 4, 50e-6).unwrap();
            let b = holo_basis();
            let k = b.len();
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let raw = CMatrix::from_fn(2, k, |_, _| {
                Complex64::new(rng.random::<f64>() - 0.5, rng.random::<f64>() - 0.5) * scale
            });
            let h = HologramParams::new(b, 2, raw, Complex64::new(scale, 0.0), true).unwrap();
            for j in 0..4 {
                prop_assert!(build_hologram(&h, j, g).unwrap().max_abs() <= 1.0 + 1e-12);
            }
        }
    }

    #[test]
    fn effective_coupling_carrier() {
        let g = GridSpec::new(8, 8, 1e-6, 1e-6, 16, 50e-6).unwrap();
        let a = ComplexField::from_fn(g, |_, _| Complex64::new(1.0, 0.0));
        let p = params();
        assert_eq!(effective_coupling(&a, 5, &p), a);
        let mut q = p;
        q.delta_k = 2.0 * PI / g.length();
        let mut winding = 0.0;
        let mut prev = effective_coupling(&a, 0, &q).values[0].arg();
        for j in 1..g.nz {
            let cur = effective_coupling(&a, j, &q).values[0].arg();
            let mut d = cur - prev;
            if d > PI {
                d -= 2.0 * PI;
            }
            if d < -PI {
                d += 2.0 * PI;
            }
            winding += d;
            prev = cur;
        }
        // nz − 1 steps of −2π/nz each.
        assert!((winding + 2.0 * PI * (g.nz - 1) as f64 / g.nz as f64).abs() < 1e-12);
    }

    fn small_binarize_grid() -> GridSpec {
        GridSpec::new(8, 8, 1e-6, 1e-6, 20, 50e-6).unwrap()
    }

    fn harmonic_of_constant(a: Complex64, s: usize) -> Complex64 {
        let g = small_binarize_grid();
        let f = ComplexField::from_fn(g, |_, _| a);
        let vol = binarize_slices(&constant_slices(&f), params().poling_period, g, s).unwrap();
        extract_first_harmonic(&vol, 0..vol.whole_periods())[0]
    }

    #[test]
    fn uniform_hologram_gives_half_duty_square_wave() {
        let g = small_binarize_grid();
        let f = ComplexField::from_fn(g, |_, _| Complex64::new(1.0, 0.0));
        let vol = binarize_slices(&constant_slices(&f), params().poling_period, g, 32).unwrap();
        let period: Vec<i8> = (0..32).map(|k| vol.at(0, 0, k)).collect();
        assert_eq!(period.iter().filter(|v| **v == 1).count(), 16);
        assert!(vol.values.iter().all(|v| *v == 1 || *v == -1));
        let c = harmonic_of_constant(Complex64::new(1.0, 0.0), 32);
        assert!((c.norm() - 2.0 / PI).abs() < 1e-3);
    }

    #[test]
    fn quarter_period_shift_for_imaginary_hologram() {
        let g = small_binarize_grid();
        let s = 32;
        let lam = params().poling_period;
        let f0 = ComplexField::from_fn(g, |_, _| Complex64::new(1.0, 0.0));
        let f1 = ComplexField::from_fn(g, |_, _| Complex64::new(0.0, 1.0));
        let v0 = binarize_slices(&constant_slices(&f0), lam, g, s).unwrap();
        let v1 = binarize_slices(&constant_slices(&f1), lam, g, s).unwrap();
        // arg A = π/2 moves the domain centre by −Λ/4 (cyclically within each period).
        for k in 0..s {
            assert_eq!(v1.at(0, 0, k), v0.at(0, 0, (k + s / 4) % s));
        }
    }

    #[test]
    fn half_amplitude_harmonic() {
        let c = harmonic_of_constant(Complex64::new(0.5, 0.0), 64);
        assert!((c.norm() - (2.0 / PI) * 0.5).abs() < 1e-3, "{c}");
    }

    #[test]
    fn binarize_rejects_coarse_sampling() {
        let g = small_binarize_grid();
        let f = ComplexField::zeros(g);
        assert!(binarize_slices(&constant_slices(&f), 13e-6, g, 8).is_err());
    }

    #[test]
    fn random_smooth_hologram_first_order_equivalence() {
        let g = GridSpec::new(16, 16, 1e-6, 1e-6, 20, 50e-6).unwrap();
        let f = ComplexField::from_fn(g, |x, y| {
            let r = 0.95 * (-(x * x + y * y) / (8e-6f64).powi(2)).exp();
            Complex64::from_polar(r, 3.0 * x / 8e-6 - y / 5e-6)
        });
        let vol = binarize_slices(&constant_slices(&f), params().poling_period, g, 64).unwrap();
        let c = extract_first_harmonic(&vol, 0..vol.whole_periods());
        for (got, a) in c.iter().zip(&f.values) {
            let want = ideal_first_harmonic(*a);
            assert!((got - want).norm() < 0.01 * (2.0 / PI), "{got} vs {want}");
        }
    }

    #[test]
    fn segmented_hologram_harmonic_per_segment() {
        use rand::{Rng, SeedableRng};
        // Segments a non-integer number of periods long, amplitudes down to zero.
        let g = GridSpec::new(16, 16, 1e-6, 1e-6, 8, 125e-6).unwrap();
        let lam = params().poling_period;
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(3);
        let fields: Vec<ComplexField> = (0..g.nz)
            .map(|_| ComplexField::from_fn(g, |_, _| Complex64::from_polar(rng.random::<f64>(), rng.random::<f64>() * 2.0 * PI)))
            .collect();
        let slices: Vec<&ComplexField> = fields.iter().collect();
        let vol = binarize_slices(&slices, lam, g, 64).unwrap();
        let mut worst: f64 = 0.0;
        for (j, f) in fields.iter().enumerate() {
            let periods: Vec<usize> = (0..vol.whole_periods())
                .filter(|q| (((*q as f64 + 0.5) * lam / g.dz) as usize).min(g.nz - 1) == j)
                .collect();
            let c = extract_first_harmonic(&vol, periods[0]..periods[periods.len() - 1] + 1);
            for (got, a) in c.iter().zip(&f.values) {
                worst = worst.max((got - ideal_first_harmonic(*a)).norm());
            }
        }
        assert!(worst < 0.01 * (2.0 / PI), "worst {worst}");
    }
}
