//! Laguerre-Gauss and Hermite-Gauss mode dictionaries.
//!
//! Modes solve the paraxial equation `∂A/∂z = (i/2k)∇⊥²A` with `k = 2π·n/λ`,
//! waist at `z = 0`. The complex-envelope convention matches the spectral
//! diffraction step of the propagator, so an analytically evaluated mode at
//! `z` equals the numerically diffracted mode from `z = 0`.
//!
//! Normalisation is on the continuum; the discrete Riemann sum deviates only
//! by truncation and sampling error, which [`gram_matrix`] reports.

use std::f64::consts::{PI, SQRT_2};
use std::fmt;

use num_complex::Complex64;

use crate::error::{Result, SimError};
use crate::grid::{ComplexField, GridSpec};
use crate::matrix::CMatrix;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum ModeFamily {
    LaguerreGauss,
    HermiteGauss,
}

impl ModeFamily {
    pub fn short_name(self) -> &'static str {
        match self {
            ModeFamily::LaguerreGauss => "LG",
            ModeFamily::HermiteGauss => "HG",
        }
    }
}

/// Mode numbers: `(p, l)` for LG, `(n, m)` for HG.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum ModeIndex {
    Lg { p: u32, l: i32 },
    Hg { n: u32, m: u32 },
}

impl ModeIndex {
    pub fn family(self) -> ModeFamily {
        match self {
            ModeIndex::Lg { .. } => ModeFamily::LaguerreGauss,
            ModeIndex::Hg { .. } => ModeFamily::HermiteGauss,
        }
    }

    /// Combined order `N` (`2p+|l|` or `n+m`); the Gouy phase is `(N+1)·ψ(z)`.
    pub fn order(self) -> u32 {
        match self {
            ModeIndex::Lg { p, l } => 2 * p + l.unsigned_abs(),
            ModeIndex::Hg { n, m } => n + m,
        }
    }

    /// Sort key implementing the basis ordering: LG by `(l, p)`, HG by `(n, m)`.
    fn sort_key(self) -> (i64, i64) {
        match self {
            ModeIndex::Lg { p, l } => (l as i64, p as i64),
            ModeIndex::Hg { n, m } => (n as i64, m as i64),
        }
    }

    /// Label used in CSV headers and config files, e.g. `LG_p0_l-2`, `HG_n1_m0`.
    pub fn label(self) -> String {
        self.to_string()
    }

    pub fn parse_label(s: &str) -> Option<Self> {
        let s = s.trim();
        if let Some(rest) = s.strip_prefix("LG_p") {
            let (p, l) = rest.split_once("_l")?;
            return Some(ModeIndex::Lg {
                p: p.parse().ok()?,
                l: l.parse().ok()?,
            });
        }
        if let Some(rest) = s.strip_prefix("HG_n") {
            let (n, m) = rest.split_once("_m")?;
            return Some(ModeIndex::Hg {
                n: n.parse().ok()?,
                m: m.parse().ok()?,
            });
        }
        None
    }
}

impl fmt::Display for ModeIndex {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            ModeIndex::Lg { p, l } => write!(f, "LG_p{p}_l{l}"),
            ModeIndex::Hg { n, m } => write!(f, "HG_n{n}_m{m}"),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ModeSpec {
    pub index: ModeIndex,
    pub waist: f64,
    pub wavelength: f64,
    pub n_medium: f64,
}

fn factorial(n: u32) -> f64 {
    (1..=n).fold(1.0, |acc, k| acc * k as f64)
}

/// Generalised Laguerre polynomial `L_p^a(x)`.
pub fn laguerre(p: u32, a: f64, x: f64) -> f64 {
    let mut prev = 1.0;
    if p == 0 {
        return prev;
    }
    let mut cur = 1.0 + a - x;
    for k in 1..p {
        let k = k as f64;
        let next = ((2.0 * k + 1.0 + a - x) * cur - (k + a) * prev) / (k + 1.0);
        prev = cur;
        cur = next;
    }
    cur
}

/// Physicists' Hermite polynomial `H_n(u)`.
pub fn hermite(n: u32, u: f64) -> f64 {
    let mut prev = 1.0;
    if n == 0 {
        return prev;
    }
    let mut cur = 2.0 * u;
    for k in 1..n {
        let next = 2.0 * u * cur - 2.0 * k as f64 * prev;
        prev = cur;
        cur = next;
    }
    cur
}

impl ModeSpec {
    pub fn new(index: ModeIndex, waist: f64, wavelength: f64, n_medium: f64) -> Result<Self> {
        for (name, v) in [("waist", waist), ("wavelength", wavelength), ("n_medium", n_medium)] {
            if !(v > 0.0 && v.is_finite()) {
                return Err(SimError::InvalidParameter(format!(
                    "mode {index}: {name} = {v} must be positive"
                )));
            }
        }
        Ok(Self {
            index,
            waist,
            wavelength,
            n_medium,
        })
    }

    pub fn family(&self) -> ModeFamily {
        self.index.family()
    }

    pub fn wavenumber(&self) -> f64 {
        2.0 * PI * self.n_medium / self.wavelength
    }

    pub fn rayleigh_range(&self) -> f64 {
        0.5 * self.wavenumber() * self.waist * self.waist
    }

    /// Gaussian beam radius `w(z)`.
    pub fn beam_radius(&self, z: f64) -> f64 {
        let zr = self.rayleigh_range();
        self.waist * (1.0 + (z / zr).powi(2)).sqrt()
    }

    /// Analytic mode value at `(x, y, z)`.
    pub fn value_at(&self, x: f64, y: f64, z: f64) -> Complex64 {
        let k = self.wavenumber();
        let zr = self.rayleigh_range();
        let w = self.beam_radius(z);
        let r2 = x * x + y * y;
        let gauss = (-r2 / (w * w)).exp();
        let gouy = (self.index.order() as f64 + 1.0) * (z / zr).atan();
        let curvature = k * r2 * z / (2.0 * (z * z + zr * zr));
        let phase = Complex64::from_polar(1.0, curvature - gouy);
        match self.index {
            ModeIndex::Lg { p, l } => {
                let al = l.unsigned_abs();
                let c = (2.0 * factorial(p) / (PI * factorial(p + al))).sqrt() / w;
                let s = SQRT_2 / w;
                let xy = if l >= 0 {
                    Complex64::new(s * x, s * y)
                } else {
                    Complex64::new(s * x, -(s * y))
                };
                let vortex = xy.powu(al);
                let lag = laguerre(p, al as f64, 2.0 * r2 / (w * w));
                vortex * (c * lag * gauss) * phase
            }
            ModeIndex::Hg { n, m } => {
                let c = (2.0 / PI).sqrt() / w / (2f64.powi((n + m) as i32) * factorial(n) * factorial(m)).sqrt();
                let s = SQRT_2 / w;
                let amp = c * hermite(n, s * x) * hermite(m, s * y) * gauss;
                phase * amp
            }
        }
    }

    /// Mode sampled on `grid` at `z`, without the containment check.
    pub fn sample(&self, z: f64, grid: GridSpec) -> ComplexField {
        ComplexField::from_fn(grid, |x, y| self.value_at(x, y, z))
    }

    fn check_window(&self, z: f64, grid: GridSpec) -> Result<()> {
        let radius = self.beam_radius(z);
        if grid.window() < 6.0 * radius {
            return Err(SimError::WindowTooSmall {
                mode: self.index.label(),
                window: grid.window(),
                radius,
            });
        }
        Ok(())
    }
}

/// Mode `spec` at `z`, sampled on `grid`.
pub fn eval_mode(spec: &ModeSpec, z: f64, grid: GridSpec) -> Result<ComplexField> {
    spec.check_window(z, grid)?;
    Ok(spec.sample(z, grid))
}

/// Ordered set of modes sharing family, waist, wavelength and medium index.
#[derive(Debug, Clone, PartialEq)]
pub struct ModeBasis {
    modes: Vec<ModeSpec>,
}

impl ModeBasis {
    pub fn new(
        mut indices: Vec<ModeIndex>,
        waist: f64,
        wavelength: f64,
        n_medium: f64,
    ) -> Result<Self> {
        if indices.is_empty() {
            return Err(SimError::InvalidParameter("empty mode basis".into()));
        }
        let family = indices[0].family();
        if indices.iter().any(|i| i.family() != family) {
            return Err(SimError::InvalidParameter("mixed mode families in one basis".into()));
        }
        indices.sort_by_key(|i| i.sort_key());
        if indices.windows(2).any(|w| w[0] == w[1]) {
            return Err(SimError::InvalidParameter("duplicate modes in basis".into()));
        }
        let modes = indices
            .into_iter()
            .map(|i| ModeSpec::new(i, waist, wavelength, n_medium))
            .collect::<Result<Vec<_>>>()?;
        Ok(Self { modes })
    }

    /// LG modes with `p ≤ p_max`, `|l| ≤ l_max`.
    pub fn lg(p_max: u32, l_max: u32, waist: f64, wavelength: f64, n_medium: f64) -> Result<Self> {
        let l_max = l_max as i32;
        let idx = (-l_max..=l_max)
            .flat_map(|l| (0..=p_max).map(move |p| ModeIndex::Lg { p, l }))
            .collect();
        Self::new(idx, waist, wavelength, n_medium)
    }

    /// LG modes with `2p + |l| ≤ max_order`.
    pub fn lg_orders(max_order: u32, waist: f64, wavelength: f64, n_medium: f64) -> Result<Self> {
        let mo = max_order as i32;
        let idx = (-mo..=mo)
            .flat_map(|l| {
                (0..=max_order)
                    .filter(move |p| 2 * p + l.unsigned_abs() <= max_order)
                    .map(move |p| ModeIndex::Lg { p, l })
            })
            .collect();
        Self::new(idx, waist, wavelength, n_medium)
    }

    /// HG modes with `n ≤ n_max`, `m ≤ m_max`.
    pub fn hg(n_max: u32, m_max: u32, waist: f64, wavelength: f64, n_medium: f64) -> Result<Self> {
        let idx = (0..=n_max)
            .flat_map(|n| (0..=m_max).map(move |m| ModeIndex::Hg { n, m }))
            .collect();
        Self::new(idx, waist, wavelength, n_medium)
    }

    /// HG modes with `n + m ≤ max_order`.
    pub fn hg_orders(max_order: u32, waist: f64, wavelength: f64, n_medium: f64) -> Result<Self> {
        let idx = (0..=max_order)
            .flat_map(|n| (0..=max_order - n).map(move |m| ModeIndex::Hg { n, m }))
            .collect();
        Self::new(idx, waist, wavelength, n_medium)
    }

    /// Same mode numbers and waist at another wavelength / medium index.
    pub fn retuned(&self, wavelength: f64, n_medium: f64) -> Result<Self> {
        Self::new(self.indices(), self.waist(), wavelength, n_medium)
    }

    pub fn len(&self) -> usize {
        self.modes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.modes.is_empty()
    }

    pub fn modes(&self) -> &[ModeSpec] {
        &self.modes
    }

    pub fn indices(&self) -> Vec<ModeIndex> {
        self.modes.iter().map(|m| m.index).collect()
    }

    pub fn family(&self) -> ModeFamily {
        self.modes[0].family()
    }

    pub fn waist(&self) -> f64 {
        self.modes[0].waist
    }

    pub fn wavelength(&self) -> f64 {
        self.modes[0].wavelength
    }

    pub fn n_medium(&self) -> f64 {
        self.modes[0].n_medium
    }

    pub fn position(&self, index: ModeIndex) -> Option<usize> {
        self.modes.iter().position(|m| m.index == index)
    }

    pub fn labels(&self) -> Vec<String> {
        self.modes.iter().map(|m| m.index.label()).collect()
    }

    /// All modes at `z`, without the containment check.
    pub fn sample_all(&self, z: f64, grid: GridSpec) -> Vec<ComplexField> {
        self.modes.iter().map(|m| m.sample(z, grid)).collect()
    }

    pub fn eval_all(&self, z: f64, grid: GridSpec) -> Result<Vec<ComplexField>> {
        self.modes.iter().map(|m| eval_mode(m, z, grid)).collect()
    }
}

/// Complex coefficients aligned with a [`ModeBasis`].
#[derive(Debug, Clone, PartialEq)]
pub struct CoeffVector(pub Vec<Complex64>);

impl std::ops::Deref for CoeffVector {
    type Target = [Complex64];
    fn deref(&self) -> &[Complex64] {
        &self.0
    }
}

/// Projections `c_k = ⟨M_k(z), field⟩`.
pub fn decompose(field: &ComplexField, basis: &ModeBasis, z: f64) -> Result<CoeffVector> {
    let modes = basis.eval_all(z, field.grid)?;
    Ok(project(field, &modes))
}

/// Projections onto pre-sampled modes.
pub fn project(field: &ComplexField, modes: &[ComplexField]) -> CoeffVector {
    CoeffVector(modes.iter().map(|m| m.inner(field)).collect())
}

/// `G_jk = ⟨M_j, M_k⟩` on the grid; Hermitian by construction.
pub fn gram_matrix(basis: &ModeBasis, grid: GridSpec, z: f64) -> CMatrix {
    let modes = basis.sample_all(z, grid);
    let n = modes.len();
    let mut g = CMatrix::zeros(n, n);
    for j in 0..n {
        g[(j, j)] = Complex64::new(modes[j].power(), 0.0);
        for k in (j + 1)..n {
            let v = modes[j].inner(&modes[k]);
            g[(j, k)] = v;
            g[(k, j)] = v.conj();
        }
    }
    g
}

/// `max |G − I|` over all entries.
pub fn gram_deviation(gram: &CMatrix) -> f64 {
    let n = gram.rows();
    let mut worst: f64 = 0.0;
    for j in 0..n {
        for k in 0..n {
            let id = if j == k { 1.0 } else { 0.0 };
            worst = worst.max((gram[(j, k)] - id).norm());
        }
    }
    worst
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    const LAMBDA: f64 = 1.064e-6;
    const N_MED: f64 = 2.16;

    fn grid(n: usize, d: f64) -> GridSpec {
        GridSpec::new(n, n, d, d, 20, 50e-6).unwrap()
    }

    fn lg(p: u32, l: i32, w0: f64) -> ModeSpec {
        ModeSpec::new(ModeIndex::Lg { p, l }, w0, LAMBDA, N_MED).unwrap()
    }

    #[test]
    fn polynomials_match_low_orders() {
        let x = 0.7;
        assert!((laguerre(2, 1.0, x) - (x * x / 2.0 - 3.0 * x + 3.0)).abs() < 1e-14);
        assert!((hermite(3, x) - (8.0 * x.powi(3) - 12.0 * x)).abs() < 1e-14);
    }

    #[test]
    fn labels_round_trip() {
        for idx in [ModeIndex::Lg { p: 2, l: -3 }, ModeIndex::Hg { n: 4, m: 0 }] {
            assert_eq!(ModeIndex::parse_label(&idx.label()), Some(idx));
        }
        assert_eq!(ModeIndex::parse_label("LG_p0"), None);
    }

    #[test]
    fn fundamental_mode_is_real_positive_gaussian() {
        let w0 = 20e-6;
        let g = grid(128, 1.5e-6);
        let f = eval_mode(&lg(0, 0, w0), 0.0, g).unwrap();
        let centre = f.at(g.nx / 2, g.ny / 2);
        for v in &f.values {
            assert!(v.im == 0.0 && v.re >= 0.0);
            assert!(v.re <= centre.re);
        }
        assert!((f.power() - 1.0).abs() < 1e-6);
    }

    #[test]
    fn oam_winding_on_circle() {
        let w0 = 20e-6;
        for l in -5..=5i32 {
            let m = lg(0, l, w0);
            let steps = 4000;
            let mut total = 0.0;
            let mut prev = m.value_at(w0, 0.0, 0.0).arg();
            for s in 1..=steps {
                let t = 2.0 * PI * s as f64 / steps as f64;
                let cur = m.value_at(w0 * t.cos(), w0 * t.sin(), 0.0).arg();
                let mut d = cur - prev;
                while d > PI {
                    d -= 2.0 * PI;
                }
                while d < -PI {
                    d += 2.0 * PI;
                }
                total += d;
                prev = cur;
            }
            assert!((total - 2.0 * PI * l as f64).abs() < 1e-3, "l = {l}: {total}");
        }
    }

    #[test]
    fn hg10_is_odd_in_x() {
        let w0 = 20e-6;
        let g = grid(64, 2e-6);
        let m = ModeSpec::new(ModeIndex::Hg { n: 1, m: 0 }, w0, LAMBDA, N_MED).unwrap();
        let f = eval_mode(&m, 0.0, g).unwrap();
        for iy in 0..g.ny {
            for ix in 1..g.nx {
                assert_eq!(f.at(g.nx - ix, iy), -f.at(ix, iy));
            }
        }
        let row = g.ny / 2;
        let changes = (1..g.nx)
            .filter(|&ix| {
                let a = f.at(ix - 1, row).re;
                let b = f.at(ix, row).re;
                a * b < 0.0 || (a != 0.0 && b == 0.0 && ix + 1 < g.nx && f.at(ix + 1, row).re * a < 0.0)
            })
            .count();
        assert_eq!(changes, 1);
    }

    #[test]
    fn window_too_small_is_rejected() {
        let g = grid(16, 1e-6);
        assert!(matches!(
            eval_mode(&lg(0, 0, 20e-6), 0.0, g),
            Err(SimError::WindowTooSmall { .. })
        ));
    }

    #[test]
    fn self_projection_gives_unit_vector() {
        let w0 = 20e-6;
        let g = grid(128, 1.25e-6);
        let basis = ModeBasis::lg(1, 3, w0, LAMBDA, N_MED).unwrap();
        for k in 0..basis.len() {
            let f = eval_mode(&basis.modes()[k], 0.0, g).unwrap();
            let c = decompose(&f, &basis, 0.0).unwrap();
            for (j, v) in c.iter().enumerate() {
                let expect = if j == k { 1.0 } else { 0.0 };
                assert!((v - expect).norm() < 1e-6, "mode {k} coeff {j}: {v}");
            }
        }
    }

    #[test]
    fn decompose_is_linear() {
        let w0 = 20e-6;
        let g = grid(64, 2.5e-6);
        let basis = ModeBasis::lg(1, 2, w0, LAMBDA, N_MED).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let mut rand_field = || {
            ComplexField::from_values(
                g,
                (0..g.len())
                    .map(|_| Complex64::new(rng.random::<f64>() - 0.5, rng.random::<f64>() - 0.5))
                    .collect(),
            )
            .unwrap()
        };
        let f = rand_field();
        let h = rand_field();
        let (a, b) = (Complex64::new(0.3, -1.2), Complex64::new(-2.0, 0.5));
        let mix = ComplexField::from_values(
            g,
            f.values.iter().zip(&h.values).map(|(x, y)| a * x + b * y).collect(),
        )
        .unwrap();
        let cf = decompose(&f, &basis, 0.0).unwrap();
        let ch = decompose(&h, &basis, 0.0).unwrap();
        let cm = decompose(&mix, &basis, 0.0).unwrap();
        let scale = cm.iter().map(|v| v.norm()).fold(0.0, f64::max);
        for k in 0..basis.len() {
            assert!((cm[k] - (a * cf[k] + b * ch[k])).norm() < 1e-12 * scale.max(1.0));
        }
    }

    #[test]
    fn bessel_inequality_on_random_field() {
        let w0 = 30e-6;
        let g = grid(256, 1e-6);
        let basis = ModeBasis::lg(2, 4, w0, LAMBDA, N_MED).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let f = ComplexField::from_values(
            g,
            (0..g.len())
                .map(|_| Complex64::new(rng.random::<f64>() - 0.5, rng.random::<f64>() - 0.5))
                .collect(),
        )
        .unwrap();
        let c = decompose(&f, &basis, 0.0).unwrap();
        let captured: f64 = c.iter().map(|v| v.norm_sqr()).sum();
        assert!(captured <= f.power() + 1e-10);
    }

    #[test]
    fn gram_matrix_adequate_grid() {
        let w0 = 32e-6;
        // 256² window of 8 waists.
        let g = grid(256, 8.0 * w0 / 256.0);
        let basis = ModeBasis::lg(0, 5, w0, LAMBDA, N_MED).unwrap();
        for z in [0.0, g.length() / 2.0] {
            let gram = gram_matrix(&basis, g, z);
            assert!(gram_deviation(&gram) < 1e-4);
        }
        let single = ModeBasis::lg(0, 0, w0, LAMBDA, N_MED).unwrap();
        let gram = gram_matrix(&single, g, 0.0);
        assert!((gram[(0, 0)].re - 1.0).abs() < 1e-6);
    }

    #[test]
    fn gram_matrix_flags_truncated_window() {
        let w0 = 32e-6;
        let g = grid(64, 1.5 * w0 / 64.0);
        let basis = ModeBasis::lg(0, 4, w0, LAMBDA, N_MED).unwrap();
        assert!(gram_deviation(&gram_matrix(&basis, g, 0.0)) > 0.01);
    }

    #[test]
    fn basis_ordering_and_counts() {
        let b = ModeBasis::lg_orders(2, 1e-5, LAMBDA, N_MED).unwrap();
        let idx = b.indices();
        assert_eq!(idx.len(), 6);
        assert_eq!(idx[0], ModeIndex::Lg { p: 0, l: -2 });
        assert_eq!(idx[2], ModeIndex::Lg { p: 0, l: 0 });
        assert_eq!(idx[3], ModeIndex::Lg { p: 1, l: 0 });
        let h = ModeBasis::hg(1, 1, 1e-5, LAMBDA, N_MED).unwrap();
        assert_eq!(
            h.indices(),
            vec![
                ModeIndex::Hg { n: 0, m: 0 },
                ModeIndex::Hg { n: 0, m: 1 },
                ModeIndex::Hg { n: 1, m: 0 },
                ModeIndex::Hg { n: 1, m: 1 }
            ]
        );
        assert!(ModeBasis::new(
            vec![ModeIndex::Lg { p: 0, l: 0 }, ModeIndex::Lg { p: 0, l: 0 }],
            1e-5,
            LAMBDA,
            N_MED
        )
        .is_err());
    }
}
