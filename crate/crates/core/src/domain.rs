//! Grids, fields, normalization, the VELB container and profile spectra.
//!
//! VELB layout (little endian, 32-byte header, f32 row-major payload):
//!
//! ```text
//! 0   magic  "VELB"
//! 4   version u16 (1)
//! 6   rank    u16 (1..=4)
//! 8   dims    u32 × 4, unused trailing dims = 1
//! 24  dtype   u16 (1 = f32)
//! 26  kind    u16 (0 velocity, 1 extended image, 2 shot gather)
//! 28  reserved, zero
//! ```
//!
//! Grid spacing and lag spacing are not part of the header; they come from
//! the run configuration or the dataset manifest.

use std::fs;
use std::io::Write;
use std::path::Path;

use rustfft::num_complex::Complex;
use rustfft::FftPlanner;

use crate::error::{invalid, Error, Result};

pub const VELB_MAGIC: &[u8; 4] = b"VELB";
pub const VELB_VERSION: u16 = 1;
pub const VELB_HEADER_LEN: usize = 32;
const DTYPE_F32: u16 = 1;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Grid2D {
    pub nz: usize,
    pub nx: usize,
    pub dz: f64,
    pub dx: f64,
}

impl Grid2D {
    pub fn new(nz: usize, nx: usize, dz: f64, dx: f64) -> Result<Self> {
        let g = Self { nz, nx, dz, dx };
        g.validate()?;
        Ok(g)
    }

    pub fn validate(&self) -> Result<()> {
        if self.nz < 8 || self.nx < 8 {
            return Err(invalid("grid", format!("{}x{} is smaller than 8x8", self.nz, self.nx)));
        }
        if !(self.dz > 0.0 && self.dx > 0.0) {
            return Err(invalid("grid", format!("spacing ({}, {}) must be positive", self.dz, self.dx)));
        }
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.nz * self.nx
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn same_shape(&self, other: &Grid2D) -> bool {
        self.nz == other.nz && self.nx == other.nx
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct VelocityField {
    pub grid: Grid2D,
    /// m/s, row-major `[nz, nx]`.
    pub values: Vec<f32>,
}

impl VelocityField {
    pub fn new(grid: Grid2D, values: Vec<f32>) -> Result<Self> {
        grid.validate()?;
        if values.len() != grid.len() {
            return Err(invalid(
                "velocity field",
                format!("{} values for a {}x{} grid", values.len(), grid.nz, grid.nx),
            ));
        }
        if let Some(i) = values.iter().position(|v| !v.is_finite() || *v <= 0.0) {
            return Err(invalid("velocity field", format!("value {} at index {i}", values[i])));
        }
        Ok(Self { grid, values })
    }

    pub fn constant(grid: Grid2D, v: f32) -> Self {
        Self {
            grid,
            values: vec![v; grid.len()],
        }
    }

    pub fn at(&self, iz: usize, ix: usize) -> f32 {
        self.values[iz * self.grid.nx + ix]
    }

    pub fn min(&self) -> f32 {
        self.values.iter().copied().fold(f32::INFINITY, f32::min)
    }

    pub fn max(&self) -> f32 {
        self.values.iter().copied().fold(f32::NEG_INFINITY, f32::max)
    }

    pub fn column(&self, ix: usize) -> Vec<f32> {
        (0..self.grid.nz).map(|iz| self.at(iz, ix)).collect()
    }
}

/// Time-lag image volume `R(r, τ)`, lag-major `[n_lag, nz, nx]`.
#[derive(Clone, Debug, PartialEq)]
pub struct ExtendedImageVolume {
    pub grid: Grid2D,
    pub n_lag: usize,
    /// Lag spacing in seconds.
    pub d_tau: f64,
    pub values: Vec<f32>,
}

impl ExtendedImageVolume {
    pub fn new(grid: Grid2D, n_lag: usize, d_tau: f64, values: Vec<f32>) -> Result<Self> {
        grid.validate()?;
        if n_lag % 2 == 0 {
            return Err(invalid("image volume", format!("n_lag = {n_lag} must be odd")));
        }
        if values.len() != n_lag * grid.len() {
            return Err(invalid(
                "image volume",
                format!("{} values for {n_lag}x{}x{}", values.len(), grid.nz, grid.nx),
            ));
        }
        if values.iter().any(|v| !v.is_finite()) {
            return Err(invalid("image volume", "non-finite value"));
        }
        Ok(Self {
            grid,
            n_lag,
            d_tau,
            values,
        })
    }

    pub fn zeros(grid: Grid2D, n_lag: usize, d_tau: f64) -> Self {
        Self {
            grid,
            n_lag,
            d_tau,
            values: vec![0.0; n_lag * grid.len()],
        }
    }

    /// Index of τ = 0.
    pub fn zero_lag_index(&self) -> usize {
        (self.n_lag - 1) / 2
    }

    pub fn lag(&self, i: usize) -> &[f32] {
        let n = self.grid.len();
        &self.values[i * n..(i + 1) * n]
    }

    pub fn zero_lag(&self) -> &[f32] {
        self.lag(self.zero_lag_index())
    }

    /// Lag values in seconds, ascending.
    pub fn taus(&self) -> Vec<f64> {
        let h = self.zero_lag_index() as f64;
        (0..self.n_lag).map(|i| (i as f64 - h) * self.d_tau).collect()
    }
}

/// Receiver traces `[n_rec, nt]`.
#[derive(Clone, Debug, PartialEq)]
pub struct ShotGather {
    pub nt: usize,
    pub dt: f64,
    pub n_rec: usize,
    pub traces: Vec<f32>,
}

impl ShotGather {
    pub fn zeros(n_rec: usize, nt: usize, dt: f64) -> Self {
        Self {
            nt,
            dt,
            n_rec,
            traces: vec![0.0; n_rec * nt],
        }
    }

    pub fn trace(&self, r: usize) -> &[f32] {
        &self.traces[r * self.nt..(r + 1) * self.nt]
    }
}

/// Source and receiver grid positions `(iz, ix)` in the unpadded grid.
#[derive(Clone, Debug, PartialEq)]
pub struct AcquisitionGeometry {
    pub sources: Vec<(usize, usize)>,
    pub receivers: Vec<(usize, usize)>,
}

impl AcquisitionGeometry {
    /// `n_src` sources and `n_rec` receivers spread evenly along row `depth`.
    pub fn surface(grid: &Grid2D, n_src: usize, n_rec: usize, depth: usize) -> Result<Self> {
        let spread = |n: usize| -> Vec<(usize, usize)> {
            (0..n)
                .map(|i| {
                    let x = (i as f64 + 0.5) * grid.nx as f64 / n as f64;
                    (depth, (x.floor() as usize).min(grid.nx - 1))
                })
                .collect()
        };
        let g = Self {
            sources: spread(n_src),
            receivers: spread(n_rec),
        };
        g.validate(grid)?;
        Ok(g)
    }

    pub fn validate(&self, grid: &Grid2D) -> Result<()> {
        if self.sources.is_empty() || self.receivers.len() < 2 {
            return Err(invalid(
                "geometry",
                format!("{} sources / {} receivers (need ≥ 1 / ≥ 2)", self.sources.len(), self.receivers.len()),
            ));
        }
        for &(z, x) in self.sources.iter().chain(&self.receivers) {
            if z >= grid.nz || x >= grid.nx {
                return Err(invalid("geometry", format!("position ({z}, {x}) outside {}x{}", grid.nz, grid.nx)));
            }
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct NormalizationSpec {
    pub v_min: f64,
    pub v_max: f64,
    pub image_scale: f64,
}

impl Default for NormalizationSpec {
    fn default() -> Self {
        Self {
            v_min: 1450.0,
            v_max: 4800.0,
            image_scale: 1.0,
        }
    }
}

impl NormalizationSpec {
    pub fn validate(&self) -> Result<()> {
        if !(self.v_max > self.v_min) || !(self.image_scale > 0.0) {
            return Err(invalid("normalization", format!("{self:?}")));
        }
        Ok(())
    }

    pub fn normalize(&self, v: f32) -> f32 {
        (((v as f64 - self.v_min) / (self.v_max - self.v_min)).clamp(0.0, 1.0)) as f32
    }

    pub fn denormalize(&self, u: f32) -> f32 {
        (self.v_min + u as f64 * (self.v_max - self.v_min)) as f32
    }

    pub fn normalize_velocity(&self, v: &VelocityField) -> Vec<f32> {
        v.values.iter().map(|&x| self.normalize(x)).collect()
    }

    pub fn denormalize_velocity(&self, grid: Grid2D, u: &[f32]) -> VelocityField {
        VelocityField {
            grid,
            values: u.iter().map(|&x| self.denormalize(x)).collect(),
        }
    }

    pub fn normalize_image(&self, values: &[f32]) -> Vec<f32> {
        let s = 1.0 / self.image_scale;
        values.iter().map(|&x| (x as f64 * s) as f32).collect()
    }

    pub fn denormalize_image(&self, values: &[f32]) -> Vec<f32> {
        values.iter().map(|&x| (x as f64 * self.image_scale) as f32).collect()
    }
}

/// 99th percentile of |x| over all values, the image scale convention.
pub fn percentile_abs(values: impl IntoIterator<Item = f32>, q: f64) -> f64 {
    let mut a: Vec<f32> = values.into_iter().map(f32::abs).collect();
    if a.is_empty() {
        return 0.0;
    }
    let k = ((a.len() - 1) as f64 * q).round() as usize;
    let (_, kth, _) = a.select_nth_unstable_by(k, f32::total_cmp);
    *kth as f64
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum GridKind {
    Velocity = 0,
    Image = 1,
    Gather = 2,
}

impl GridKind {
    fn from_u16(k: u16) -> Option<Self> {
        match k {
            0 => Some(Self::Velocity),
            1 => Some(Self::Image),
            2 => Some(Self::Gather),
            _ => None,
        }
    }
}

/// Payload and dims of a VELB file, before spacing is attached.
#[derive(Clone, Debug, PartialEq)]
pub struct RawGrid {
    pub kind: GridKind,
    pub dims: Vec<usize>,
    pub values: Vec<f32>,
}

impl RawGrid {
    pub fn into_velocity(self, dz: f64, dx: f64) -> Result<VelocityField> {
        match (self.kind, self.dims.as_slice()) {
            (GridKind::Velocity, &[nz, nx]) => VelocityField::new(Grid2D::new(nz, nx, dz, dx)?, self.values),
            _ => Err(invalid("VELB", format!("expected a velocity grid, found {:?} {:?}", self.kind, self.dims))),
        }
    }

    pub fn into_image(self, dz: f64, dx: f64, d_tau: f64) -> Result<ExtendedImageVolume> {
        match (self.kind, self.dims.as_slice()) {
            (GridKind::Image, &[n_lag, nz, nx]) => {
                ExtendedImageVolume::new(Grid2D::new(nz, nx, dz, dx)?, n_lag, d_tau, self.values)
            }
            _ => Err(invalid("VELB", format!("expected an image volume, found {:?} {:?}", self.kind, self.dims))),
        }
    }

    pub fn into_gather(self, dt: f64) -> Result<ShotGather> {
        match (self.kind, self.dims.as_slice()) {
            (GridKind::Gather, &[n_rec, nt]) => Ok(ShotGather {
                nt,
                dt,
                n_rec,
                traces: self.values,
            }),
            _ => Err(invalid("VELB", format!("expected a shot gather, found {:?} {:?}", self.kind, self.dims))),
        }
    }
}

/// Anything storable as a VELB grid.
pub trait VelbData {
    fn kind(&self) -> GridKind;
    fn dims(&self) -> Vec<usize>;
    fn payload(&self) -> &[f32];
}

impl VelbData for VelocityField {
    fn kind(&self) -> GridKind {
        GridKind::Velocity
    }
    fn dims(&self) -> Vec<usize> {
        vec![self.grid.nz, self.grid.nx]
    }
    fn payload(&self) -> &[f32] {
        &self.values
    }
}

impl VelbData for ExtendedImageVolume {
    fn kind(&self) -> GridKind {
        GridKind::Image
    }
    fn dims(&self) -> Vec<usize> {
        vec![self.n_lag, self.grid.nz, self.grid.nx]
    }
    fn payload(&self) -> &[f32] {
        &self.values
    }
}

impl VelbData for ShotGather {
    fn kind(&self) -> GridKind {
        GridKind::Gather
    }
    fn dims(&self) -> Vec<usize> {
        vec![self.n_rec, self.nt]
    }
    fn payload(&self) -> &[f32] {
        &self.traces
    }
}

pub fn encode_velb(data: &dyn VelbData) -> Result<Vec<u8>> {
    let dims = data.dims();
    let payload = data.payload();
    if dims.is_empty() || dims.len() > 4 || dims.iter().product::<usize>() != payload.len() {
        return Err(invalid("VELB", format!("dims {dims:?} do not describe {} values", payload.len())));
    }
    if let Some(i) = payload.iter().position(|v| !v.is_finite()) {
        return Err(invalid("VELB", format!("non-finite value at index {i}")));
    }
    let mut out = Vec::with_capacity(VELB_HEADER_LEN + 4 * payload.len());
    out.extend_from_slice(VELB_MAGIC);
    out.extend_from_slice(&VELB_VERSION.to_le_bytes());
    out.extend_from_slice(&(dims.len() as u16).to_le_bytes());
    for i in 0..4 {
        let d = dims.get(i).copied().unwrap_or(1);
        let d = u32::try_from(d).map_err(|_| invalid("VELB", format!("dimension {d} too large")))?;
        out.extend_from_slice(&d.to_le_bytes());
    }
    out.extend_from_slice(&DTYPE_F32.to_le_bytes());
    out.extend_from_slice(&(data.kind() as u16).to_le_bytes());
    out.extend_from_slice(&[0u8; 4]);
    for v in payload {
        out.extend_from_slice(&v.to_le_bytes());
    }
    Ok(out)
}

pub fn decode_velb(bytes: &[u8], path: &Path) -> Result<RawGrid> {
    if bytes.len() < 4 || &bytes[..4] != VELB_MAGIC {
        return Err(Error::BadMagic { path: path.into() });
    }
    if bytes.len() < VELB_HEADER_LEN {
        return Err(Error::Truncated {
            path: path.into(),
            expected: VELB_HEADER_LEN,
            actual: bytes.len(),
        });
    }
    let u16_at = |o: usize| u16::from_le_bytes([bytes[o], bytes[o + 1]]);
    let u32_at = |o: usize| u32::from_le_bytes([bytes[o], bytes[o + 1], bytes[o + 2], bytes[o + 3]]);
    let header = |msg: String| Error::Header { path: path.into(), msg };
    let version = u16_at(4);
    if version != VELB_VERSION {
        return Err(header(format!("version {version}")));
    }
    let rank = u16_at(6) as usize;
    if !(1..=4).contains(&rank) {
        return Err(header(format!("rank {rank}")));
    }
    let dtype = u16_at(24);
    if dtype != DTYPE_F32 {
        return Err(header(format!("dtype tag {dtype}")));
    }
    let kind = GridKind::from_u16(u16_at(26)).ok_or_else(|| header(format!("kind tag {}", u16_at(26))))?;
    let dims: Vec<usize> = (0..rank).map(|i| u32_at(8 + 4 * i) as usize).collect();
    let n = dims
        .iter()
        .try_fold(1usize, |a, &d| a.checked_mul(d))
        .ok_or_else(|| header(format!("dims {dims:?} overflow")))?;
    let expected = n
        .checked_mul(4)
        .and_then(|b| b.checked_add(VELB_HEADER_LEN))
        .ok_or_else(|| header(format!("dims {dims:?} overflow")))?;
    if bytes.len() < expected {
        return Err(Error::Truncated {
            path: path.into(),
            expected,
            actual: bytes.len(),
        });
    }
    let mut values = Vec::with_capacity(n);
    for (i, c) in bytes[VELB_HEADER_LEN..expected].chunks_exact(4).enumerate() {
        let v = f32::from_le_bytes([c[0], c[1], c[2], c[3]]);
        if !v.is_finite() {
            return Err(Error::NonFinitePayload { path: path.into(), index: i });
        }
        values.push(v);
    }
    Ok(RawGrid { kind, dims, values })
}

pub fn write_grid(path: &Path, data: &dyn VelbData) -> Result<()> {
    let bytes = encode_velb(data)?;
    let mut f = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    f.write_all(&bytes).map_err(|e| Error::io(path, e))
}

pub fn read_grid(path: &Path) -> Result<RawGrid> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_velb(&bytes, path)
}

/// One-sided amplitude spectrum of a depth profile.
#[derive(Clone, Debug, PartialEq)]
pub struct Spectrum {
    /// Cycles per metre, `k/(nz·dz)` for `k = 0..=nz/2`.
    pub wavenumber: Vec<f64>,
    /// `|DFT|` (unnormalized) at each wavenumber.
    pub amplitude: Vec<f64>,
    /// Profile length the spectrum was taken from.
    pub n: usize,
}

impl Spectrum {
    /// `(1/n)·Σ|X_k|²` over the full two-sided spectrum, i.e. the profile
    /// energy by Parseval.
    pub fn energy(&self) -> f64 {
        let n = self.n;
        self.amplitude
            .iter()
            .enumerate()
            .map(|(k, a)| {
                let w = if k == 0 || (n % 2 == 0 && k == n / 2) { 1.0 } else { 2.0 };
                w * a * a
            })
            .sum::<f64>()
            / n as f64
    }
}

pub fn profile_spectrum(profile: &[f64], dz: f64) -> Spectrum {
    let n = profile.len();
    let mut buf: Vec<Complex<f64>> = profile.iter().map(|&v| Complex::new(v, 0.0)).collect();
    FftPlanner::new().plan_fft_forward(n).process(&mut buf);
    let half = n / 2 + 1;
    Spectrum {
        wavenumber: (0..half).map(|k| k as f64 / (n as f64 * dz)).collect(),
        amplitude: buf[..half].iter().map(|c| c.norm()).collect(),
        n,
    }
}

pub fn vertical_profile_spectrum(field: &VelocityField, x_index: usize) -> Result<Spectrum> {
    if x_index >= field.grid.nx {
        return Err(invalid(
            "profile column",
            format!("x_index {x_index} outside 0..{}", field.grid.nx),
        ));
    }
    let profile: Vec<f64> = field.column(x_index).iter().map(|&v| v as f64).collect();
    Ok(profile_spectrum(&profile, field.grid.dz))
}

/// Writes aligned spectra as CSV: `wavenumber,<name>...`.
pub fn write_spectra_csv(path: &Path, columns: &[(&str, &Spectrum)]) -> Result<()> {
    let Some((_, first)) = columns.first() else {
        return Err(invalid("spectrum CSV", "no columns"));
    };
    if columns.iter().any(|(_, s)| s.wavenumber != first.wavenumber) {
        return Err(invalid("spectrum CSV", "spectra are not on the same wavenumber axis"));
    }
    let mut out = String::from("wavenumber");
    for (name, _) in columns {
        out.push(',');
        out.push_str(name);
    }
    out.push('\n');
    for (k, w) in first.wavenumber.iter().enumerate() {
        out.push_str(&format!("{w}"));
        for (_, s) in columns {
            out.push_str(&format!(",{}", s.amplitude[k]));
        }
        out.push('\n');
    }
    fs::write(path, out).map_err(|e| Error::io(path, e))
}

pub fn write_spectrum_csv(path: &Path, spectrum: &Spectrum) -> Result<()> {
    write_spectra_csv(path, &[("amplitude", spectrum)])
}

#[cfg(test)]
mod tests {
    use super::*;

    fn grid(nz: usize, nx: usize) -> Grid2D {
        Grid2D::new(nz, nx, 10.0, 10.0).unwrap()
    }

    #[test]
    fn velocity_round_trip_is_bit_exact() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("v.velb");
        let v = VelocityField::constant(grid(16, 32), 2000.0);
        write_grid(&p, &v).unwrap();
        assert_eq!(read_grid(&p).unwrap().into_velocity(10.0, 10.0).unwrap(), v);
    }

    #[test]
    fn image_file_size_follows_the_header_definition() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("img.velb");
        let (nz, nx) = (12, 20);
        let img = ExtendedImageVolume::new(
            grid(nz, nx),
            3,
            0.008,
            (0..3 * nz * nx).map(|i| (i as f32).sin()).collect(),
        )
        .unwrap();
        write_grid(&p, &img).unwrap();
        assert_eq!(fs::metadata(&p).unwrap().len() as usize, 32 + 3 * nz * nx * 4);
        let back = read_grid(&p).unwrap().into_image(10.0, 10.0, 0.008).unwrap();
        assert_eq!(back, img);
    }

    #[test]
    fn missing_directory_names_the_path() {
        let p = Path::new("/nonexistent-dir-for-velb/x.velb");
        let err = write_grid(p, &VelocityField::constant(grid(8, 8), 1500.0)).unwrap_err();
        assert!(err.to_string().contains("/nonexistent-dir-for-velb/x.velb"), "{err}");
    }

    #[test]
    fn corrupt_files_give_distinct_errors() {
        let v = VelocityField::constant(grid(8, 8), 1500.0);
        let bytes = encode_velb(&v).unwrap();
        let p = Path::new("mem");

        let mut bad = bytes.clone();
        bad[1] = b'Z';
        assert!(matches!(decode_velb(&bad, p), Err(Error::BadMagic { .. })));
        assert!(decode_velb(&bad, p).unwrap_err().to_string().contains("bad magic"));

        let short = &bytes[..bytes.len() - 4];
        let err = decode_velb(short, p).unwrap_err();
        assert!(matches!(err, Error::Truncated { expected, actual, .. } if expected == 32 + 256 && actual == 32 + 252));
        assert!(err.to_string().contains("truncated"));

        let mut nan = bytes.clone();
        nan[32 + 4 * 5..32 + 4 * 6].copy_from_slice(&f32::NAN.to_le_bytes());
        assert!(matches!(decode_velb(&nan, p), Err(Error::NonFinitePayload { index: 5, .. })));

        let mut rank = bytes;
        rank[6] = 9;
        assert!(matches!(decode_velb(&rank, p), Err(Error::Header { .. })));
    }

    #[test]
    fn normalization_boundaries_and_clamp() {
        let spec = NormalizationSpec::default();
        let g = grid(8, 8);
        let at = |v: f32| spec.normalize_velocity(&VelocityField::constant(g, v));
        assert!(at(1450.0).iter().all(|&x| x == 0.0));
        assert!(at(3125.0).iter().all(|&x| x == 0.5));
        assert!(at(4900.0).iter().all(|&x| x == 1.0));
        assert!(at(1000.0).iter().all(|&x| x == 0.0));
    }

    #[test]
    fn constant_profile_is_pure_dc() {
        let v = VelocityField::constant(grid(32, 8), 2500.0);
        let s = vertical_profile_spectrum(&v, 3).unwrap();
        assert_eq!(s.amplitude.len(), 17);
        assert!((s.amplitude[0] - 32.0 * 2500.0).abs() < 1e-9);
        assert!(s.amplitude[1..].iter().all(|&a| a < 1e-9));
        assert!(vertical_profile_spectrum(&v, 8).is_err());
    }

    #[test]
    fn pure_tone_peaks_at_its_bin_and_parseval_holds() {
        let n = 64;
        let p: Vec<f64> = (0..n).map(|i| (2.0 * std::f64::consts::PI * 4.0 * i as f64 / n as f64).cos()).collect();
        let s = profile_spectrum(&p, 10.0);
        let peak = (0..s.amplitude.len()).max_by(|&a, &b| s.amplitude[a].total_cmp(&s.amplitude[b])).unwrap();
        assert_eq!(peak, 4);
        assert!((s.wavenumber[4] - 4.0 / 640.0).abs() < 1e-15);
        let e: f64 = p.iter().map(|x| x * x).sum();
        assert!((s.energy() - e).abs() / e < 1e-6);
    }

    #[test]
    fn spectra_csv_has_the_documented_header() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("s.csv");
        let s = profile_spectrum(&[1.0, 2.0, 3.0, 4.0, 5.0, 6.0, 7.0, 8.0], 5.0);
        write_spectrum_csv(&p, &s).unwrap();
        let text = fs::read_to_string(&p).unwrap();
        let mut lines = text.lines();
        assert_eq!(lines.next(), Some("wavenumber,amplitude"));
        assert_eq!(lines.count(), 5);
    }

    #[test]
    fn percentile_of_a_ramp() {
        let v: Vec<f32> = (0..=100).map(|i| -(i as f32)).collect();
        assert_eq!(percentile_abs(v, 0.99), 99.0);
    }
}
