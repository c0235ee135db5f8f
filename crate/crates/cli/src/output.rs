//! Run directories (staged, locked, manifest last) and artifact encoders.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::time::{Instant, SystemTime, UNIX_EPOCH};

use num_complex::Complex64;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use qholo::correlations::CorrelationMatrix;
use qholo::grid::GridSpec;
use qholo::matrix::RMatrix;

use crate::error::CliError;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ArtifactEntry {
    pub path: String,
    pub sha256: String,
    pub bytes: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub tool: String,
    pub version: String,
    pub propagation_scheme: String,
    pub subcommand: String,
    pub seed: u64,
    pub threads: usize,
    pub config_hash: String,
    pub trajectory_hash: String,
    pub config: serde_json::Value,
    pub artifacts: Vec<ArtifactEntry>,
    /// Wall-clock seconds per phase.
    pub timings: Vec<(String, f64)>,
}

/// An output directory under construction. Files go to a hidden staging
/// directory next to the target; [`RunDir::finish`] writes the manifest and
/// renames it into place. Dropping an unfinished run moves the staging
/// directory to `failed/`.
#[derive(Debug)]
pub struct RunDir {
    target: PathBuf,
    staging: PathBuf,
    lock: PathBuf,
    artifacts: Vec<ArtifactEntry>,
    images: Vec<serde_json::Value>,
    timings: Vec<(String, f64)>,
    phase_start: Instant,
    done: bool,
}

fn sibling(target: &Path, prefix: &str, suffix: &str) -> PathBuf {
    let name = target.file_name().map(|n| n.to_string_lossy().into_owned()).unwrap_or_else(|| "run".into());
    let parent = target.parent().filter(|p| !p.as_os_str().is_empty()).unwrap_or(Path::new("."));
    parent.join(format!("{prefix}{name}{suffix}"))
}

fn pid_alive(pid: u32) -> bool {
    let proc = Path::new("/proc");
    !proc.exists() || proc.join(pid.to_string()).exists()
}

fn quarantine(staging: &Path, target: &Path) -> Option<PathBuf> {
    let parent = target.parent().filter(|p| !p.as_os_str().is_empty()).unwrap_or(Path::new("."));
    let failed = parent.join("failed");
    fs::create_dir_all(&failed).ok()?;
    let stamp = SystemTime::now().duration_since(UNIX_EPOCH).map(|d| d.as_secs()).unwrap_or(0);
    let name = target.file_name()?.to_string_lossy().into_owned();
    let mut dest = failed.join(format!("{name}-{stamp}"));
    let mut k = 1;
    while dest.exists() {
        dest = failed.join(format!("{name}-{stamp}-{k}"));
        k += 1;
    }
    fs::rename(staging, &dest).ok()?;
    Some(dest)
}

impl RunDir {
    pub fn create(target: &Path) -> Result<Self, CliError> {
        if target.exists() {
            return Err(CliError::Io(format!("output directory {} already exists", target.display())));
        }
        let lock = sibling(target, ".", ".lock");
        let staging = sibling(target, ".", ".partial");
        if let Some(parent) = lock.parent() {
            fs::create_dir_all(parent)?;
        }
        if let Ok(text) = fs::read_to_string(&lock) {
            let holder = text.trim().parse::<u32>().ok();
            if holder.is_some_and(pid_alive) {
                return Err(CliError::Io(format!(
                    "{} is locked by process {}",
                    target.display(),
                    text.trim()
                )));
            }
            fs::remove_file(&lock)?;
        }
        let mut f = fs::OpenOptions::new()
            .write(true)
            .create_new(true)
            .open(&lock)
            .map_err(|e| CliError::Io(format!("cannot lock {}: {e}", lock.display())))?;
        write!(f, "{}", std::process::id())?;
        if staging.exists() {
            // Leftover of a killed run.
            if quarantine(&staging, target).is_none() {
                let _ = fs::remove_file(&lock);
                return Err(CliError::Io(format!("cannot quarantine stale {}", staging.display())));
            }
        }
        if let Err(e) = fs::create_dir_all(&staging) {
            let _ = fs::remove_file(&lock);
            return Err(e.into());
        }
        Ok(Self {
            target: target.to_path_buf(),
            staging,
            lock,
            artifacts: Vec::new(),
            images: Vec::new(),
            timings: Vec::new(),
            phase_start: Instant::now(),
            done: false,
        })
    }

    pub fn staging_path(&self) -> &Path {
        &self.staging
    }

    /// Writes (or replaces) `rel` and records its checksum.
    pub fn write(&mut self, rel: &str, bytes: &[u8]) -> Result<(), CliError> {
        let path = self.staging.join(rel);
        if let Some(p) = path.parent() {
            fs::create_dir_all(p)?;
        }
        let tmp = path.with_extension("tmp-write");
        fs::write(&tmp, bytes)?;
        fs::rename(&tmp, &path)?;
        let entry = ArtifactEntry {
            path: rel.to_string(),
            sha256: hex::encode(Sha256::digest(bytes)),
            bytes: bytes.len() as u64,
        };
        match self.artifacts.iter_mut().find(|a| a.path == rel) {
            Some(a) => *a = entry,
            None => self.artifacts.push(entry),
        }
        Ok(())
    }

    pub fn write_png(&mut self, rel: &str, image: &GrayImage, quantity: &str) -> Result<(), CliError> {
        let bytes = image.encode_png()?;
        self.write(rel, &bytes)?;
        self.images.push(serde_json::json!({
            "file": rel,
            "quantity": quantity,
            "width": image.width,
            "height": image.height,
            "value_at_0": image.lo,
            "value_at_255": image.hi,
        }));
        Ok(())
    }

    /// Closes the current timing phase.
    pub fn phase(&mut self, name: &str) {
        self.timings.push((name.to_string(), self.phase_start.elapsed().as_secs_f64()));
        self.phase_start = Instant::now();
    }

    pub fn finish(mut self, mut manifest: RunManifest) -> Result<PathBuf, CliError> {
        if !self.images.is_empty() {
            let text = serde_json::to_string_pretty(&self.images).expect("json");
            self.write("images.json", text.as_bytes())?;
        }
        manifest.artifacts = self.artifacts.clone();
        manifest.timings = self.timings.clone();
        let text = serde_json::to_string_pretty(&manifest).expect("json");
        fs::write(self.staging.join("manifest.json"), text)?;
        fs::rename(&self.staging, &self.target)?;
        let _ = fs::remove_file(&self.lock);
        self.done = true;
        Ok(self.target.clone())
    }

    /// Moves the staged files to `failed/` and releases the lock.
    pub fn abort(mut self) -> Option<PathBuf> {
        self.done = true;
        let dest = quarantine(&self.staging, &self.target);
        let _ = fs::remove_file(&self.lock);
        dest
    }
}

impl Drop for RunDir {
    fn drop(&mut self) {
        if !self.done {
            quarantine(&self.staging, &self.target);
            let _ = fs::remove_file(&self.lock);
        }
    }
}

fn fmt_f64(v: f64) -> String {
    // Shortest representation that round-trips.
    format!("{v:e}")
}

/// `P` as CSV: header of idler labels, one row per signal mode.
pub fn matrix_csv(p: &CorrelationMatrix) -> String {
    let mut out = String::from("signal\\idler");
    for l in &p.labels_i {
        out.push(',');
        out.push_str(l);
    }
    out.push('\n');
    for (m, ls) in p.labels_s.iter().enumerate() {
        out.push_str(ls);
        for n in 0..p.labels_i.len() {
            out.push(',');
            out.push_str(&fmt_f64(p.p[(m, n)]));
        }
        out.push('\n');
    }
    out
}

pub fn parse_matrix_csv(text: &str) -> Option<RMatrix> {
    let mut lines = text.lines();
    let cols = lines.next()?.split(',').count() - 1;
    let mut data = Vec::new();
    let mut rows = 0;
    for line in lines {
        let vals: Vec<f64> = line.split(',').skip(1).map(|v| v.parse().ok()).collect::<Option<_>>()?;
        if vals.len() != cols {
            return None;
        }
        data.extend(vals);
        rows += 1;
    }
    RMatrix::from_vec(rows, cols, data)
}

pub fn coeff_csv(labels: &[String], coeffs: &[Complex64]) -> String {
    let mut out = String::from("mode,re,im\n");
    for (l, c) in labels.iter().zip(coeffs) {
        out.push_str(&format!("{l},{},{}\n", fmt_f64(c.re), fmt_f64(c.im)));
    }
    out
}

pub fn loss_csv(history: &[f64]) -> String {
    let mut out = String::from("step,loss\n");
    for (k, l) in history.iter().enumerate() {
        out.push_str(&format!("{k},{}\n", fmt_f64(*l)));
    }
    out
}

/// 8-bit grayscale raster.
#[derive(Debug, Clone)]
pub struct GrayImage {
    pub width: u32,
    pub height: u32,
    pub pixels: Vec<u8>,
    /// Values mapped to 0 and 255.
    pub lo: f64,
    pub hi: f64,
}

impl GrayImage {
    /// Row-major values, linearly mapped from `[lo, hi]`, each cell drawn as a
    /// `scale × scale` block.
    pub fn from_values(width: usize, height: usize, values: &[f64], lo: f64, hi: f64, scale: usize) -> Self {
        let span = if hi > lo { hi - lo } else { 1.0 };
        let (w, h) = (width * scale, height * scale);
        let mut pixels = vec![0u8; w * h];
        for y in 0..h {
            for x in 0..w {
                let v = values[(y / scale) * width + x / scale];
                let t = ((v - lo) / span).clamp(0.0, 1.0);
                pixels[y * w + x] = (t * 255.0).round() as u8;
            }
        }
        Self {
            width: w as u32,
            height: h as u32,
            pixels,
            lo,
            hi,
        }
    }

    pub fn encode_png(&self) -> Result<Vec<u8>, CliError> {
        let mut buf = Vec::new();
        {
            let mut enc = png::Encoder::new(&mut buf, self.width, self.height);
            enc.set_color(png::ColorType::Grayscale);
            enc.set_depth(png::BitDepth::Eight);
            let mut w = enc.write_header().map_err(|e| CliError::Io(e.to_string()))?;
            w.write_image_data(&self.pixels).map_err(|e| CliError::Io(e.to_string()))?;
        }
        Ok(buf)
    }
}

/// Heatmap of `P` with signal modes down the rows.
pub fn matrix_png(p: &RMatrix) -> GrayImage {
    let hi = p.max().max(f64::MIN_POSITIVE);
    GrayImage::from_values(p.cols(), p.rows(), p.as_slice(), 0.0, hi, 24)
}

/// Sidecar describing a raw little-endian volume.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct VolumeSidecar {
    pub dtype: String,
    pub endianness: String,
    pub order: String,
    pub dims: [usize; 3],
    pub pitch: [f64; 3],
    pub units: String,
    pub quantity: String,
    pub sha256: String,
    #[serde(default)]
    pub poling_period: Option<f64>,
    #[serde(default)]
    pub subsamples_per_period: Option<usize>,
}

pub const ORDER: &str = "x fastest, then y, then z";

/// Per-slice hologram stack as complex64 (two f32 per value).
pub fn encode_complex_volume(slices: &[Vec<Complex64>]) -> Vec<u8> {
    let mut out = Vec::with_capacity(slices.iter().map(Vec::len).sum::<usize>() * 8);
    for s in slices {
        for v in s {
            out.extend_from_slice(&(v.re as f32).to_le_bytes());
            out.extend_from_slice(&(v.im as f32).to_le_bytes());
        }
    }
    out
}

pub fn decode_complex_volume(bytes: &[u8], dims: [usize; 3]) -> Result<Vec<Vec<Complex64>>, CliError> {
    let plane = dims[0] * dims[1];
    if bytes.len() != plane * dims[2] * 8 {
        return Err(CliError::MetadataMismatch(format!(
            "volume has {} bytes, sidecar dims {:?} need {}",
            bytes.len(),
            dims,
            plane * dims[2] * 8
        )));
    }
    let vals: Vec<Complex64> = bytes
        .chunks_exact(8)
        .map(|c| {
            let re = f32::from_le_bytes(c[..4].try_into().expect("4 bytes"));
            let im = f32::from_le_bytes(c[4..].try_into().expect("4 bytes"));
            Complex64::new(re as f64, im as f64)
        })
        .collect();
    Ok(vals.chunks(plane).map(<[Complex64]>::to_vec).collect())
}

pub fn hologram_sidecar(grid: GridSpec, bytes: &[u8], poling_period: f64) -> VolumeSidecar {
    VolumeSidecar {
        dtype: "complex64".into(),
        endianness: "little".into(),
        order: ORDER.into(),
        dims: [grid.nx, grid.ny, grid.nz],
        pitch: [grid.dx, grid.dy, grid.dz],
        units: "m".into(),
        quantity: "clipped hologram A per slice (dimensionless, |A| <= 1)".into(),
        sha256: hex::encode(Sha256::digest(bytes)),
        poling_period: Some(poling_period),
        subsamples_per_period: None,
    }
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn complex_volume_round_trip() {
        let slices = vec![
            vec![Complex64::new(0.5, -0.25), Complex64::new(1.0, 0.0)],
            vec![Complex64::new(-0.125, 0.75), Complex64::new(0.0, -1.0)],
        ];
        let bytes = encode_complex_volume(&slices);
        assert_eq!(bytes.len(), 32);
        assert_eq!(decode_complex_volume(&bytes, [2, 1, 2]).unwrap(), slices);
        assert!(decode_complex_volume(&bytes, [2, 2, 2]).is_err());
    }

    #[test]
    fn matrix_csv_round_trip() {
        let p = CorrelationMatrix::from_matrix(
            RMatrix::from_vec(2, 2, vec![0.1, 0.2, 0.3, 0.4]).unwrap(),
            vec!["a".into(), "b".into()],
            vec!["c".into(), "d".into()],
        )
        .unwrap();
        let text = matrix_csv(&p);
        assert!(text.starts_with("signal\\idler,c,d\n"));
        assert_eq!(parse_matrix_csv(&text).unwrap(), p.p);
    }

    #[test]
    fn run_dir_is_atomic_and_quarantines() {
        let tmp = tempfile::tempdir().unwrap();
        let target = tmp.path().join("run");
        let mut rd = RunDir::create(&target).unwrap();
        rd.write("a.txt", b"hello").unwrap();
        assert!(!target.exists());
        assert!(RunDir::create(&target).is_err(), "second writer must be locked out");
        drop(rd);
        assert!(!target.exists());
        let failed: Vec<_> = fs::read_dir(tmp.path().join("failed")).unwrap().collect();
        assert_eq!(failed.len(), 1);

        let mut rd = RunDir::create(&target).unwrap();
        rd.write("b.txt", b"x").unwrap();
        let manifest = RunManifest {
            tool: "t".into(),
            version: "0".into(),
            propagation_scheme: "s".into(),
            subcommand: "test".into(),
            seed: 0,
            threads: 1,
            config_hash: String::new(),
            trajectory_hash: String::new(),
            config: serde_json::Value::Null,
            artifacts: vec![],
            timings: vec![],
        };
        rd.finish(manifest).unwrap();
        let m: RunManifest = serde_json::from_str(&fs::read_to_string(target.join("manifest.json")).unwrap()).unwrap();
        assert_eq!(m.artifacts.len(), 1);
        assert_eq!(m.artifacts[0].sha256, sha256_hex(b"x"));
        assert!(!sibling(&target, ".", ".lock").exists());
    }
}
