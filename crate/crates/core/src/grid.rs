//! Transverse grids, complex fields, the unitary 2D FFT and vacuum-noise sampling.
//!
//! Pixel `(ix, iy)` sits at `x = (ix - nx/2)·dx`, `y = (iy - ny/2)·dy`, so the
//! optical axis passes through pixel `(nx/2, ny/2)`. Field values are stored
//! row-major with `x` fastest.

use std::collections::HashMap;
use std::f64::consts::PI;
use std::sync::{Arc, Mutex, OnceLock};

use num_complex::Complex64;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use rustfft::{Fft, FftPlanner};

use crate::error::{Result, SimError};

/// Discretisation of the transverse plane and of the crystal along `z`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GridSpec {
    pub nx: usize,
    pub ny: usize,
    pub dx: f64,
    pub dy: f64,
    pub nz: usize,
    pub dz: f64,
}

impl GridSpec {
    pub fn new(nx: usize, ny: usize, dx: f64, dy: f64, nz: usize, dz: f64) -> Result<Self> {
        for (name, n) in [("nx", nx), ("ny", ny)] {
            if n < 8 || !n.is_power_of_two() {
                return Err(SimError::InvalidGrid(format!(
                    "{name} = {n} must be a power of two >= 8"
                )));
            }
        }
        for (name, d) in [("dx", dx), ("dy", dy), ("dz", dz)] {
            if !(d > 0.0 && d.is_finite()) {
                return Err(SimError::InvalidGrid(format!("{name} = {d} must be positive")));
            }
        }
        if nz == 0 {
            return Err(SimError::InvalidGrid("nz must be at least 1".into()));
        }
        Ok(Self {
            nx,
            ny,
            dx,
            dy,
            nz,
            dz,
        })
    }

    pub fn len(&self) -> usize {
        self.nx * self.ny
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn x(&self, ix: usize) -> f64 {
        (ix as f64 - (self.nx / 2) as f64) * self.dx
    }

    pub fn y(&self, iy: usize) -> f64 {
        (iy as f64 - (self.ny / 2) as f64) * self.dy
    }

    pub fn cell_area(&self) -> f64 {
        self.dx * self.dy
    }

    /// Smaller of the two transverse window extents.
    pub fn window(&self) -> f64 {
        (self.nx as f64 * self.dx).min(self.ny as f64 * self.dy)
    }

    /// Crystal length `nz·dz`.
    pub fn length(&self) -> f64 {
        self.nz as f64 * self.dz
    }

    /// Mid-plane of slice `j`.
    pub fn slice_mid(&self, j: usize) -> f64 {
        (j as f64 + 0.5) * self.dz
    }

    /// Angular spatial frequency of FFT bin `i` out of `n` at pitch `d`.
    pub fn angular_frequency(i: usize, n: usize, d: f64) -> f64 {
        let k = if i < n / 2 { i as f64 } else { i as f64 - n as f64 };
        2.0 * PI * k / (n as f64 * d)
    }

    pub fn kx(&self, ix: usize) -> f64 {
        Self::angular_frequency(ix, self.nx, self.dx)
    }

    pub fn ky(&self, iy: usize) -> f64 {
        Self::angular_frequency(iy, self.ny, self.dy)
    }

    /// Same transverse plane with a different slicing along `z`.
    pub fn with_slices(&self, nz: usize, dz: f64) -> Result<Self> {
        Self::new(self.nx, self.ny, self.dx, self.dy, nz, dz)
    }
}

/// Complex amplitudes on a [`GridSpec`].
#[derive(Debug, Clone, PartialEq)]
pub struct ComplexField {
    pub grid: GridSpec,
    pub values: Vec<Complex64>,
}

impl ComplexField {
    pub fn zeros(grid: GridSpec) -> Self {
        Self {
            grid,
            values: vec![Complex64::new(0.0, 0.0); grid.len()],
        }
    }

    pub fn from_fn(grid: GridSpec, mut f: impl FnMut(f64, f64) -> Complex64) -> Self {
        let mut values = Vec::with_capacity(grid.len());
        for iy in 0..grid.ny {
            let y = grid.y(iy);
            for ix in 0..grid.nx {
                values.push(f(grid.x(ix), y));
            }
        }
        Self { grid, values }
    }

    pub fn from_values(grid: GridSpec, values: Vec<Complex64>) -> Result<Self> {
        if values.len() != grid.len() {
            return Err(SimError::ShapeMismatch(format!(
                "{} values for a {}x{} grid",
                values.len(),
                grid.nx,
                grid.ny
            )));
        }
        Ok(Self { grid, values })
    }

    pub fn at(&self, ix: usize, iy: usize) -> Complex64 {
        self.values[iy * self.grid.nx + ix]
    }

    /// Plain discrete sum of `|v|²` (no cell-area weight).
    pub fn norm_sq(&self) -> f64 {
        self.values.iter().map(|v| v.norm_sqr()).sum()
    }

    pub fn norm(&self) -> f64 {
        self.norm_sq().sqrt()
    }

    /// `∬|v|² dx dy` as a Riemann sum.
    pub fn power(&self) -> f64 {
        self.norm_sq() * self.grid.cell_area()
    }

    /// `⟨self, other⟩ = Σ conj(self)·other·dx·dy`.
    pub fn inner(&self, other: &ComplexField) -> Complex64 {
        let s: Complex64 = self
            .values
            .iter()
            .zip(&other.values)
            .map(|(a, b)| a.conj() * b)
            .sum();
        s * self.grid.cell_area()
    }

    pub fn is_finite(&self) -> bool {
        self.values.iter().all(|v| v.re.is_finite() && v.im.is_finite())
    }

    pub fn scale(&mut self, s: Complex64) {
        for v in &mut self.values {
            *v *= s;
        }
    }

    pub fn max_abs(&self) -> f64 {
        self.values.iter().map(|v| v.norm()).fold(0.0, f64::max)
    }

    /// Second-moment (D4σ-style) beam radius along `x`: `2·sqrt(⟨(x-x̄)²⟩)`.
    pub fn second_moment_width_x(&self) -> f64 {
        let g = &self.grid;
        let (mut w, mut mx, mut mxx) = (0.0, 0.0, 0.0);
        for iy in 0..g.ny {
            for ix in 0..g.nx {
                let p = self.at(ix, iy).norm_sqr();
                let x = g.x(ix);
                w += p;
                mx += p * x;
                mxx += p * x * x;
            }
        }
        let mean = mx / w;
        2.0 * (mxx / w - mean * mean).sqrt()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum FftDirection {
    Forward,
    Inverse,
}

/// Planned 2D FFT for one `nx × ny` shape. Both directions carry `1/√N`.
pub struct Fft2 {
    nx: usize,
    ny: usize,
    row_fwd: Arc<dyn Fft<f64>>,
    row_inv: Arc<dyn Fft<f64>>,
    col_fwd: Arc<dyn Fft<f64>>,
    col_inv: Arc<dyn Fft<f64>>,
    scratch_len: usize,
}

impl std::fmt::Debug for Fft2 {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Fft2")
            .field("nx", &self.nx)
            .field("ny", &self.ny)
            .finish()
    }
}

/// Per-worker buffers for [`Fft2`].
#[derive(Debug, Default)]
pub struct FftWork {
    pub(crate) buf: Vec<Complex64>,
    scratch: Vec<Complex64>,
}

fn transpose(src: &[Complex64], dst: &mut [Complex64], rows: usize, cols: usize) {
    // src is rows × cols (cols fastest); dst becomes cols × rows.
    for r in 0..rows {
        let row = &src[r * cols..(r + 1) * cols];
        for (c, v) in row.iter().enumerate() {
            dst[c * rows + r] = *v;
        }
    }
}

impl Fft2 {
    pub fn new(nx: usize, ny: usize) -> Self {
        let mut planner = FftPlanner::new();
        let row_fwd = planner.plan_fft_forward(nx);
        let row_inv = planner.plan_fft_inverse(nx);
        let col_fwd = planner.plan_fft_forward(ny);
        let col_inv = planner.plan_fft_inverse(ny);
        let scratch_len = [&row_fwd, &row_inv, &col_fwd, &col_inv]
            .iter()
            .map(|p| p.get_inplace_scratch_len())
            .max()
            .unwrap_or(0);
        Self {
            nx,
            ny,
            row_fwd,
            row_inv,
            col_fwd,
            col_inv,
            scratch_len,
        }
    }

    /// Process-wide cached plan for a shape.
    pub fn shared(nx: usize, ny: usize) -> Arc<Fft2> {
        static CACHE: OnceLock<Mutex<HashMap<(usize, usize), Arc<Fft2>>>> = OnceLock::new();
        let cache = CACHE.get_or_init(|| Mutex::new(HashMap::new()));
        let mut guard = cache.lock().expect("fft plan cache poisoned");
        guard
            .entry((nx, ny))
            .or_insert_with(|| Arc::new(Fft2::new(nx, ny)))
            .clone()
    }

    pub fn work(&self) -> FftWork {
        FftWork {
            buf: vec![Complex64::new(0.0, 0.0); self.nx * self.ny],
            scratch: vec![Complex64::new(0.0, 0.0); self.scratch_len],
        }
    }

    fn ensure(&self, work: &mut FftWork) {
        if work.buf.len() != self.nx * self.ny {
            work.buf.resize(self.nx * self.ny, Complex64::new(0.0, 0.0));
        }
        if work.scratch.len() < self.scratch_len {
            work.scratch.resize(self.scratch_len, Complex64::new(0.0, 0.0));
        }
    }

    /// Unnormalised forward transform; spectrum left transposed in `work.buf`
    /// (index `ix·ny + iy`).
    pub(crate) fn forward_into_transposed(&self, data: &mut [Complex64], work: &mut FftWork) {
        self.ensure(work);
        self.row_fwd.process_with_scratch(data, &mut work.scratch);
        transpose(data, &mut work.buf, self.ny, self.nx);
        self.col_fwd.process_with_scratch(&mut work.buf, &mut work.scratch);
    }

    /// Unnormalised inverse of a transposed spectrum in `work.buf` back into `data`.
    pub(crate) fn inverse_from_transposed(&self, data: &mut [Complex64], work: &mut FftWork) {
        self.ensure(work);
        self.col_inv.process_with_scratch(&mut work.buf, &mut work.scratch);
        transpose(&work.buf, data, self.nx, self.ny);
        self.row_inv.process_with_scratch(data, &mut work.scratch);
    }

    /// Unitary transform in place, standard layout.
    pub fn process(&self, data: &mut [Complex64], direction: FftDirection, work: &mut FftWork) {
        assert_eq!(data.len(), self.nx * self.ny, "field shape does not match FFT plan");
        self.ensure(work);
        let (row, col) = match direction {
            FftDirection::Forward => (&self.row_fwd, &self.col_fwd),
            FftDirection::Inverse => (&self.row_inv, &self.col_inv),
        };
        row.process_with_scratch(data, &mut work.scratch);
        transpose(data, &mut work.buf, self.ny, self.nx);
        col.process_with_scratch(&mut work.buf, &mut work.scratch);
        transpose(&work.buf, data, self.nx, self.ny);
        let s = 1.0 / ((self.nx * self.ny) as f64).sqrt();
        for v in data.iter_mut() {
            *v *= s;
        }
    }
}

/// Unitary 2D DFT (`1/√N` in both directions). Bin `(0, 0)` is zero frequency.
pub fn fft2_unitary(field: &ComplexField, direction: FftDirection) -> ComplexField {
    let plan = Fft2::shared(field.grid.nx, field.grid.ny);
    let mut out = field.clone();
    let mut work = plan.work();
    plan.process(&mut out.values, direction, &mut work);
    out
}

/// Default per-mode vacuum variance (symmetric ordering).
pub const SIGMA0_SQ: f64 = 0.5;

/// The reparameterised random node: `B` (signal, idler) vacuum seed fields.
///
/// Samples are generated on demand from counter-based streams keyed by
/// `(seed, stream, sample index)`, so a batch never has to be held in memory
/// and any subset can be regenerated bit-exactly on any thread.
#[derive(Debug, Clone, PartialEq)]
pub struct VacuumBatch {
    pub batch_size: usize,
    pub rng_seed: u64,
    /// Secondary key separating independent draws under one seed (e.g. the step index).
    pub stream: u64,
    pub grid: GridSpec,
    pub sigma0_sq: f64,
    /// Sample `2k+1` repeats sample `2k` with the idler seed negated.
    pub antithetic: bool,
    /// Groups of four: samples `4k+2` and `4k+3` repeat `4k` and `4k+1`, and the
    /// model reflects both seeds through its detected-mode subspace
    /// (see `Model::seed`). Requires `antithetic`.
    pub reflected: bool,
}

impl VacuumBatch {
    pub fn new(
        rng_seed: u64,
        stream: u64,
        batch_size: usize,
        grid: GridSpec,
        sigma0_sq: f64,
        antithetic: bool,
    ) -> Result<Self> {
        if batch_size == 0 {
            return Err(SimError::BatchTooSmall {
                min: 1,
                got: batch_size,
            });
        }
        if antithetic && batch_size % 2 != 0 {
            return Err(SimError::InvalidParameter(format!(
                "antithetic batches need an even size, got {batch_size}"
            )));
        }
        if !(sigma0_sq > 0.0) {
            return Err(SimError::InvalidParameter(format!(
                "sigma0_sq = {sigma0_sq} must be positive"
            )));
        }
        Ok(Self {
            batch_size,
            rng_seed,
            stream,
            grid,
            sigma0_sq,
            antithetic,
            reflected: false,
        })
    }

    /// Switches on reflected groups of four.
    pub fn with_reflection(mut self) -> Result<Self> {
        if !self.antithetic || self.batch_size % 4 != 0 {
            return Err(SimError::InvalidParameter(format!(
                "reflected sampling needs antithetic pairs and a batch size divisible by 4, got {}",
                self.batch_size
            )));
        }
        self.reflected = true;
        Ok(self)
    }

    /// Whether the model should reflect sample `index`.
    pub fn is_reflected(&self, index: usize) -> bool {
        self.reflected && index % 4 >= 2
    }

    /// Per-pixel standard deviation of each quadrature.
    pub fn pixel_std(&self) -> f64 {
        (self.sigma0_sq / (2.0 * self.grid.cell_area())).sqrt()
    }

    fn rng_for(&self, draw: u64) -> ChaCha8Rng {
        let mut key = [0u8; 32];
        key[..8].copy_from_slice(&self.rng_seed.to_le_bytes());
        key[8..16].copy_from_slice(&self.stream.to_le_bytes());
        key[16..24].copy_from_slice(b"vacuum\0\0");
        let mut rng = ChaCha8Rng::from_seed(key);
        rng.set_stream(draw);
        rng
    }

    /// Signal and idler seeds of sample `index`.
    pub fn sample(&self, index: usize) -> (ComplexField, ComplexField) {
        assert!(index < self.batch_size, "sample index out of range");
        let (draw, negate_idler) = if self.reflected {
            (index / 4, index % 2 == 1)
        } else if self.antithetic {
            (index / 2, index % 2 == 1)
        } else {
            (index, false)
        };
        let mut rng = self.rng_for(draw as u64);
        let std = self.pixel_std();
        let gen = |rng: &mut ChaCha8Rng| {
            let values = (0..self.grid.len())
                .map(|_| {
                    let re: f64 = rng.sample(StandardNormal);
                    let im: f64 = rng.sample(StandardNormal);
                    Complex64::new(std * re, std * im)
                })
                .collect();
            ComplexField {
                grid: self.grid,
                values,
            }
        };
        let signal = gen(&mut rng);
        let mut idler = gen(&mut rng);
        if negate_idler {
            for v in &mut idler.values {
                *v = -*v;
            }
        }
        (signal, idler)
    }

    /// All samples, generated in parallel.
    pub fn materialize(&self) -> Vec<(ComplexField, ComplexField)> {
        (0..self.batch_size)
            .into_par_iter()
            .map(|b| self.sample(b))
            .collect()
    }
}

/// Independent vacuum batch (stream 0).
pub fn sample_vacuum(seed: u64, batch_size: usize, grid: GridSpec, sigma0_sq: f64) -> Result<VacuumBatch> {
    VacuumBatch::new(seed, 0, batch_size, grid, sigma0_sq, false)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::Rng;

    fn grid(n: usize, d: f64) -> GridSpec {
        GridSpec::new(n, n, d, d, 1, 1e-6).unwrap()
    }

    fn random_field(g: GridSpec, seed: u64) -> ComplexField {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let values = (0..g.len())
            .map(|_| Complex64::new(rng.random::<f64>() - 0.5, rng.random::<f64>() - 0.5))
            .collect();
        ComplexField { grid: g, values }
    }

    #[test]
    fn rejects_bad_grids() {
        assert!(GridSpec::new(12, 16, 1.0, 1.0, 1, 1.0).is_err());
        assert!(GridSpec::new(4, 4, 1.0, 1.0, 1, 1.0).is_err());
        assert!(GridSpec::new(8, 8, 0.0, 1.0, 1, 1.0).is_err());
        assert!(GridSpec::new(8, 8, 1.0, 1.0, 0, 1.0).is_err());
    }

    #[test]
    fn delta_transforms_to_flat_spectrum() {
        let g = grid(32, 1e-6);
        let mut f = ComplexField::zeros(g);
        f.values[(g.ny / 2) * g.nx + g.nx / 2] = Complex64::new(1.0, 0.0);
        let spec = fft2_unitary(&f, FftDirection::Forward);
        let expect = 1.0 / (g.len() as f64).sqrt();
        for v in &spec.values {
            assert!((v.norm() - expect).abs() < 1e-15);
        }
    }

    #[test]
    fn parseval_holds() {
        let g = grid(64, 1e-6);
        let f = random_field(g, 3);
        let spec = fft2_unitary(&f, FftDirection::Forward);
        assert!((spec.norm() - f.norm()).abs() < 1e-12 * f.norm());
    }

    #[test]
    fn gaussian_spectrum_matches_closed_form() {
        // FT of exp(-x²/w²) is √π·w·exp(-k²w²/4); the centred grid adds (-1)^(kx+ky).
        let dx = 1e-6;
        let g = grid(128, dx);
        let w = 8.0 * dx;
        let f = ComplexField::from_fn(g, |x, y| Complex64::new((-(x * x + y * y) / (w * w)).exp(), 0.0));
        let spec = fft2_unitary(&f, FftDirection::Forward);
        let norm = 1.0 / ((g.len() as f64).sqrt() * dx * dx);
        let (mut err, mut tot) = (0.0, 0.0);
        let mut peak = (0, 0, 0.0);
        for iy in 0..g.ny {
            for ix in 0..g.nx {
                let kx = g.kx(ix);
                let ky = g.ky(iy);
                let sign = if (ix + iy) % 2 == 0 { 1.0 } else { -1.0 };
                let analytic = sign * norm * PI * w * w * (-(kx * kx + ky * ky) * w * w / 4.0).exp();
                let v = spec.at(ix, iy);
                err += (v - analytic).norm_sqr();
                tot += analytic * analytic;
                if v.norm() > peak.2 {
                    peak = (ix, iy, v.norm());
                }
            }
        }
        assert_eq!((peak.0, peak.1), (0, 0));
        assert!((err / tot).sqrt() < 1e-6, "rel err {}", (err / tot).sqrt());
    }

    #[test]
    fn vacuum_is_deterministic() {
        let g = grid(16, 2e-6);
        let a = sample_vacuum(7, 16, g, SIGMA0_SQ).unwrap().materialize();
        let b = sample_vacuum(7, 16, g, SIGMA0_SQ).unwrap().materialize();
        assert_eq!(a, b);
        let c = sample_vacuum(8, 16, g, SIGMA0_SQ).unwrap().materialize();
        assert_ne!(a, c);
    }

    #[test]
    fn vacuum_rejects_empty_batch() {
        let g = grid(16, 2e-6);
        assert!(matches!(
            sample_vacuum(1, 0, g, SIGMA0_SQ),
            Err(SimError::BatchTooSmall { .. })
        ));
    }

    #[test]
    fn serial_and_parallel_sampling_agree() {
        let g = grid(16, 2e-6);
        let batch = sample_vacuum(11, 24, g, SIGMA0_SQ).unwrap();
        let serial: Vec<_> = (0..24).map(|b| batch.sample(b)).collect();
        let pool = rayon::ThreadPoolBuilder::new().num_threads(4).build().unwrap();
        let parallel = pool.install(|| batch.materialize());
        assert_eq!(serial, parallel);
    }

    #[test]
    fn antithetic_pairs_negate_idler() {
        let g = grid(8, 2e-6);
        let batch = VacuumBatch::new(5, 3, 4, g, SIGMA0_SQ, true).unwrap();
        let (s0, i0) = batch.sample(0);
        let (s1, i1) = batch.sample(1);
        assert_eq!(s0, s1);
        for (a, b) in i0.values.iter().zip(&i1.values) {
            assert_eq!(*a, -*b);
        }
        assert!(VacuumBatch::new(5, 3, 3, g, SIGMA0_SQ, true).is_err());
    }

    #[test]
    fn vacuum_pixel_mean_is_zero() {
        let g = grid(8, 2e-6);
        let b = 100_000;
        let batch = sample_vacuum(21, b, g, SIGMA0_SQ).unwrap();
        let pix = 27;
        let mean: Complex64 = (0..b).map(|k| batch.sample(k).0.values[pix]).sum::<Complex64>() / b as f64;
        let bound = 3.0 * batch.pixel_std() / (b as f64).sqrt();
        assert!(mean.re.abs() < bound && mean.im.abs() < bound);
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(24))]
        #[test]
        fn fft_round_trip(log_n in 3u32..=8, seed in any::<u64>()) {
            let n = 1usize << log_n;
            let g = grid(n, 1e-6);
            let f = random_field(g, seed);
            let back = fft2_unitary(&fft2_unitary(&f, FftDirection::Forward), FftDirection::Inverse);
            let max = f.max_abs();
            for (a, b) in f.values.iter().zip(&back.values) {
                prop_assert!((a - b).norm() < 1e-12 * max);
            }
        }
    }
}
