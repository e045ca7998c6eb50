//! SULD descriptors.
//!
//! Haar responses in x and y (plus their absolute values) are smoothed with a
//! cascade of Gaussians and sampled at the point itself and on three rings of
//! `N` samples. Each sample is a unit 4-vector `(Gx, Gy, |Gx|, |Gy|)`; the
//! centre and the first ring read the first smoothing level, rings two and
//! three the second and third.

use std::collections::BTreeMap;
use std::io::{Cursor, Read};
use std::path::Path;

use crate::detector::{SignificantPoint, BASE_SIGMA};
use crate::integral::IntegralImage;
use crate::io_util::write_atomic;
use crate::range_image::PixelCoord;
use crate::{Error, Grid, Result};

#[derive(Clone, Debug, PartialEq)]
pub struct DescriptorConfig {
    /// Haar filter side, even.
    pub haar_size: usize,
    /// Samples per ring.
    pub directions: usize,
    pub radii: [f64; 3],
    pub sigmas: [f64; 3],
    /// Sample vectors with a smaller norm are stored as zeros.
    pub epsilon_norm: f64,
    /// Scale `haar_size`, radii and sigmas by `scale / 1.2` of each point.
    pub scale_adaptive: bool,
}

impl Default for DescriptorConfig {
    fn default() -> Self {
        Self {
            haar_size: 4,
            directions: 8,
            radii: [5.0, 10.0, 15.0],
            sigmas: [2.5, 5.0, 7.5],
            epsilon_norm: 1e-12,
            scale_adaptive: false,
        }
    }
}

impl DescriptorConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::InvalidArgument(m.to_string()));
        if self.haar_size < 2 || self.haar_size % 2 != 0 {
            return bad("haar_size must be even and >= 2");
        }
        if self.directions < 4 {
            return bad("directions must be >= 4");
        }
        let increasing = |v: &[f64; 3]| v[0] > 0.0 && v[0] < v[1] && v[1] < v[2] && v[2].is_finite();
        if !increasing(&self.radii) {
            return bad("radii must be positive and strictly increasing");
        }
        if !increasing(&self.sigmas) {
            return bad("sigmas must be positive and strictly increasing");
        }
        if !(self.epsilon_norm >= 0.0) {
            return bad("epsilon_norm must be >= 0");
        }
        Ok(())
    }

    pub fn len(&self) -> usize {
        descriptor_len(self.directions)
    }
}

/// `4 * (1 + 3N)`.
pub fn descriptor_len(directions: usize) -> usize {
    4 * (1 + 3 * directions)
}

/// Haar responses and their pointwise absolute values.
#[derive(Clone, Debug, PartialEq)]
pub struct ResponseMaps {
    pub gx: Grid,
    pub gy: Grid,
    pub gx_abs: Grid,
    pub gy_abs: Grid,
}

impl ResponseMaps {
    fn channels(&self) -> [&Grid; 4] {
        [&self.gx, &self.gy, &self.gx_abs, &self.gy_abs]
    }

    fn map(&self, f: impl Fn(&Grid) -> Grid) -> Self {
        Self {
            gx: f(&self.gx),
            gy: f(&self.gy),
            gx_abs: f(&self.gx_abs),
            gy_abs: f(&self.gy_abs),
        }
    }
}

/// Haar responses with an `h x h` mask centred on each pixel: in x the left
/// `h/2` columns weigh -1 and the right `h/2` columns +1, in y likewise for rows.
/// Pixels without full support are 0.
pub fn haar_response_maps(img: &Grid, h: usize) -> Result<ResponseMaps> {
    let (w, ht) = (img.width(), img.height());
    if h < 2 || h % 2 != 0 || h > w.min(ht) / 2 {
        return Err(Error::InvalidArgument(format!(
            "haar size {h} must be even and at most half of {w}x{ht}"
        )));
    }
    let ii = IntegralImage::new(img);
    let half = h / 2;
    let hi = h as i64;
    let hh = half as i64;
    let mut gx = Grid::new(w, ht);
    let mut gy = Grid::new(w, ht);
    for y in half..=ht - half {
        for x in half..=w - half {
            let (xi, yi) = (x as i64, y as i64);
            gx.set(x, y, ii.box_sum(xi, yi - hh, hh, hi) - ii.box_sum(xi - hh, yi - hh, hh, hi));
            gy.set(x, y, ii.box_sum(xi - hh, yi, hi, hh) - ii.box_sum(xi - hh, yi - hh, hi, hh));
        }
    }
    Ok(ResponseMaps {
        gx_abs: gx.map(f64::abs),
        gy_abs: gy.map(f64::abs),
        gx,
        gy,
    })
}

/// Kernel half-width in standard deviations. At 3 the truncated kernels drift
/// far enough from a Gaussian that cascading no longer matches one direct blur.
const KERNEL_SIGMAS: f64 = 4.0;

/// Normalized 1D Gaussian truncated at `ceil(4 sigma)`.
pub fn gaussian_kernel(sigma: f64) -> Vec<f64> {
    let radius = (KERNEL_SIGMAS * sigma).ceil() as i64;
    let mut k: Vec<f64> = (-radius..=radius)
        .map(|i| (-(i * i) as f64 / (2.0 * sigma * sigma)).exp())
        .collect();
    let sum: f64 = k.iter().sum();
    k.iter_mut().for_each(|v| *v /= sum);
    k
}

/// Half-sample symmetric reflection of index `i` into `0..n`.
#[inline]
fn reflect(i: i64, n: usize) -> usize {
    let n = n as i64;
    let m = i.rem_euclid(2 * n);
    (if m < n { m } else { 2 * n - 1 - m }) as usize
}

/// Separable Gaussian blur with reflected borders.
pub fn gaussian_blur(img: &Grid, sigma: f64) -> Grid {
    let k = gaussian_kernel(sigma);
    let r = (k.len() / 2) as i64;
    let (w, h) = (img.width(), img.height());
    let mut tmp = Grid::new(w, h);
    for y in 0..h {
        for x in 0..w {
            let mut acc = 0.0;
            for (j, kv) in k.iter().enumerate() {
                acc += kv * img.get(reflect(x as i64 + j as i64 - r, w), y);
            }
            tmp.set(x, y, acc);
        }
    }
    let mut out = Grid::new(w, h);
    for y in 0..h {
        for x in 0..w {
            let mut acc = 0.0;
            for (j, kv) in k.iter().enumerate() {
                acc += kv * tmp.get(x, reflect(y as i64 + j as i64 - r, h));
            }
            out.set(x, y, acc);
        }
    }
    out
}

/// Response maps smoothed at each sigma, finest first.
#[derive(Clone, Debug, PartialEq)]
pub struct ConvolvedStack {
    pub sigmas: Vec<f64>,
    pub levels: Vec<ResponseMaps>,
}

impl ConvolvedStack {
    pub fn width(&self) -> usize {
        self.levels[0].gx.width()
    }

    pub fn height(&self) -> usize {
        self.levels[0].gx.height()
    }
}

/// Smooths at `sigmas[0]`, then reaches each further sigma incrementally with
/// `sqrt(s_next^2 - s_prev^2)`.
pub fn gaussian_cascade(maps: &ResponseMaps, sigmas: &[f64]) -> Result<ConvolvedStack> {
    if sigmas.is_empty() || sigmas[0] <= 0.0 || sigmas.windows(2).any(|p| p[1] <= p[0]) {
        return Err(Error::InvalidArgument("sigmas must be positive and strictly increasing".into()));
    }
    let mut levels = Vec::with_capacity(sigmas.len());
    levels.push(maps.map(|g| gaussian_blur(g, sigmas[0])));
    for pair in sigmas.windows(2) {
        let step = (pair[1] * pair[1] - pair[0] * pair[0]).sqrt();
        let next = levels.last().unwrap().map(|g| gaussian_blur(g, step));
        levels.push(next);
    }
    Ok(ConvolvedStack {
        sigmas: sigmas.to_vec(),
        levels,
    })
}

fn normalize4(v: [f64; 4], eps: f64) -> [f64; 4] {
    let n = v.iter().map(|c| c * c).sum::<f64>().sqrt();
    if n < eps || n == 0.0 {
        [0.0; 4]
    } else {
        v.map(|c| c / n)
    }
}

/// Bilinear `(Gx, Gy, |Gx|, |Gy|)` at `at` from one smoothing level, before normalization.
pub fn sample_raw(stack: &ConvolvedStack, level: usize, at: PixelCoord) -> Result<[f64; 4]> {
    let maps = stack
        .levels
        .get(level)
        .ok_or_else(|| Error::InvalidArgument(format!("no smoothing level {level}")))?;
    let mut out = [0.0; 4];
    for (slot, g) in out.iter_mut().zip(maps.channels()) {
        *slot = g.bilinear(at.u, at.v).ok_or(Error::OutOfBounds {
            u: at.u,
            v: at.v,
            width: g.width(),
            height: g.height(),
        })?;
    }
    Ok(out)
}

/// Unit-length sample vector; all zeros when its norm is below `epsilon_norm`.
pub fn sample_vector(stack: &ConvolvedStack, level: usize, at: PixelCoord, epsilon_norm: f64) -> Result<[f64; 4]> {
    Ok(normalize4(sample_raw(stack, level, at)?, epsilon_norm))
}

#[derive(Clone, Debug, PartialEq)]
pub struct SuldDescriptor {
    pub values: Vec<f64>,
    pub anchor: PixelCoord,
    pub scale: f64,
}

impl AsRef<[f64]> for SuldDescriptor {
    fn as_ref(&self) -> &[f64] {
        &self.values
    }
}

/// The `1 + 3N` sample positions and the smoothing level each one reads.
pub fn sample_locations(at: PixelCoord, radii: &[f64; 3], directions: usize) -> Vec<(usize, PixelCoord)> {
    let mut out = Vec::with_capacity(1 + 3 * directions);
    out.push((0, at));
    for (level, &r) in radii.iter().enumerate() {
        for j in 0..directions {
            let theta = 2.0 * std::f64::consts::PI * j as f64 / directions as f64;
            out.push((level, PixelCoord::new(at.u + r * theta.cos(), at.v + r * theta.sin())));
        }
    }
    out
}

/// Descriptor at `point` with the stack's sigmas and `cfg.radii`.
/// Fails with [`Error::OutOfBounds`] if any sample leaves the image.
pub fn build_descriptor(stack: &ConvolvedStack, point: &SignificantPoint, cfg: &DescriptorConfig) -> Result<SuldDescriptor> {
    build_with_radii(stack, point, &cfg.radii, cfg)
}

fn build_with_radii(
    stack: &ConvolvedStack,
    point: &SignificantPoint,
    radii: &[f64; 3],
    cfg: &DescriptorConfig,
) -> Result<SuldDescriptor> {
    if stack.levels.len() != 3 {
        return Err(Error::InvalidArgument("descriptor needs three smoothing levels".into()));
    }
    let mut values = Vec::with_capacity(cfg.len());
    for (level, at) in sample_locations(point.location, radii, cfg.directions) {
        values.extend_from_slice(&sample_vector(stack, level, at, cfg.epsilon_norm)?);
    }
    Ok(SuldDescriptor {
        values,
        anchor: point.location,
        scale: point.scale,
    })
}

/// Descriptors for all points that fit, in input order.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct DescribeOutput {
    pub descriptors: Vec<SuldDescriptor>,
    /// Points dropped because a sample fell outside the image.
    pub skipped: usize,
}

/// Computes the Haar maps and cascade once, then one descriptor per point.
pub fn describe_all(img: &Grid, points: &[SignificantPoint], cfg: &DescriptorConfig) -> Result<DescribeOutput> {
    cfg.validate()?;
    let mut out = DescribeOutput::default();
    if points.is_empty() {
        return Ok(out);
    }
    if !cfg.scale_adaptive {
        let stack = gaussian_cascade(&haar_response_maps(img, cfg.haar_size)?, &cfg.sigmas)?;
        for p in points {
            match build_descriptor(&stack, p, cfg) {
                Ok(d) => out.descriptors.push(d),
                Err(Error::OutOfBounds { .. }) => out.skipped += 1,
                Err(e) => return Err(e),
            }
        }
        return Ok(out);
    }

    // Scale-adaptive: the Haar size is rounded to an even integer and the
    // radii and sigmas follow the same factor, one stack per Haar size.
    let mut stacks: BTreeMap<usize, ConvolvedStack> = BTreeMap::new();
    for p in points {
        let factor = p.scale / BASE_SIGMA;
        let h = (2.0 * (cfg.haar_size as f64 * factor / 2.0).round()).max(2.0) as usize;
        let f = h as f64 / cfg.haar_size as f64;
        if h > img.width().min(img.height()) / 2 {
            out.skipped += 1;
            continue;
        }
        if !stacks.contains_key(&h) {
            let sigmas = cfg.sigmas.map(|s| s * f);
            stacks.insert(h, gaussian_cascade(&haar_response_maps(img, h)?, &sigmas)?);
        }
        let radii = cfg.radii.map(|r| r * f);
        match build_with_radii(&stacks[&h], p, &radii, cfg) {
            Ok(d) => out.descriptors.push(d),
            Err(Error::OutOfBounds { .. }) => out.skipped += 1,
            Err(e) => return Err(e),
        }
    }
    Ok(out)
}

const MAGIC: &[u8; 4] = b"SULD";
const VERSION: u32 = 1;

/// Contents of a binary descriptor file.
#[derive(Clone, Debug, PartialEq)]
pub struct DescriptorFile {
    pub directions: usize,
    pub radii: [f64; 3],
    pub sigmas: [f64; 3],
    pub haar_size: usize,
    pub descriptors: Vec<SuldDescriptor>,
}

impl DescriptorFile {
    pub fn new(cfg: &DescriptorConfig, descriptors: Vec<SuldDescriptor>) -> Self {
        Self {
            directions: cfg.directions,
            radii: cfg.radii,
            sigmas: cfg.sigmas,
            haar_size: cfg.haar_size,
            descriptors,
        }
    }

    /// Little-endian layout:
    /// `"SULD" | version u32 | N u32 | radii 3xf64 | sigmas 3xf64 | h u32 | count u64`,
    /// then per record `u v scale` as f64 and `4(1+3N)` values as f32.
    pub fn to_bytes(&self) -> Vec<u8> {
        let len = descriptor_len(self.directions);
        let mut b = Vec::with_capacity(64 + self.descriptors.len() * (24 + 4 * len));
        b.extend_from_slice(MAGIC);
        b.extend_from_slice(&VERSION.to_le_bytes());
        b.extend_from_slice(&(self.directions as u32).to_le_bytes());
        for r in self.radii {
            b.extend_from_slice(&r.to_le_bytes());
        }
        for s in self.sigmas {
            b.extend_from_slice(&s.to_le_bytes());
        }
        b.extend_from_slice(&(self.haar_size as u32).to_le_bytes());
        b.extend_from_slice(&(self.descriptors.len() as u64).to_le_bytes());
        for d in &self.descriptors {
            debug_assert_eq!(d.values.len(), len);
            b.extend_from_slice(&d.anchor.u.to_le_bytes());
            b.extend_from_slice(&d.anchor.v.to_le_bytes());
            b.extend_from_slice(&d.scale.to_le_bytes());
            for &v in &d.values {
                b.extend_from_slice(&(v as f32).to_le_bytes());
            }
        }
        b
    }

    pub fn from_bytes(bytes: &[u8], path: &Path) -> Result<Self> {
        let short = |_| Error::format(path, "truncated descriptor file");
        let mut c = Cursor::new(bytes);
        let mut magic = [0u8; 4];
        c.read_exact(&mut magic).map_err(short)?;
        if &magic != MAGIC {
            return Err(Error::format(path, "not a SULD descriptor file"));
        }
        let version = read_u32(&mut c).map_err(short)?;
        if version != VERSION {
            return Err(Error::format(path, format!("unsupported version {version}")));
        }
        let directions = read_u32(&mut c).map_err(short)? as usize;
        let mut radii = [0.0; 3];
        for r in &mut radii {
            *r = read_f64(&mut c).map_err(short)?;
        }
        let mut sigmas = [0.0; 3];
        for s in &mut sigmas {
            *s = read_f64(&mut c).map_err(short)?;
        }
        let haar_size = read_u32(&mut c).map_err(short)? as usize;
        let count = read_u64(&mut c).map_err(short)? as usize;
        let len = descriptor_len(directions);
        let remaining = bytes.len() - c.position() as usize;
        if remaining != count * (24 + 4 * len) {
            return Err(Error::format(path, "record section size does not match header"));
        }
        let mut descriptors = Vec::with_capacity(count);
        for _ in 0..count {
            let u = read_f64(&mut c).map_err(short)?;
            let v = read_f64(&mut c).map_err(short)?;
            let scale = read_f64(&mut c).map_err(short)?;
            let mut values = Vec::with_capacity(len);
            for _ in 0..len {
                let mut b4 = [0u8; 4];
                c.read_exact(&mut b4).map_err(short)?;
                values.push(f32::from_le_bytes(b4) as f64);
            }
            descriptors.push(SuldDescriptor {
                values,
                anchor: PixelCoord::new(u, v),
                scale,
            });
        }
        Ok(Self {
            directions,
            radii,
            sigmas,
            haar_size,
            descriptors,
        })
    }
}

fn read_u32(c: &mut Cursor<&[u8]>) -> std::io::Result<u32> {
    let mut b = [0u8; 4];
    c.read_exact(&mut b)?;
    Ok(u32::from_le_bytes(b))
}

fn read_u64(c: &mut Cursor<&[u8]>) -> std::io::Result<u64> {
    let mut b = [0u8; 8];
    c.read_exact(&mut b)?;
    Ok(u64::from_le_bytes(b))
}

fn read_f64(c: &mut Cursor<&[u8]>) -> std::io::Result<f64> {
    let mut b = [0u8; 8];
    c.read_exact(&mut b)?;
    Ok(f64::from_le_bytes(b))
}

pub fn write_descriptors(file: &DescriptorFile, path: &Path) -> Result<()> {
    write_atomic(path, &file.to_bytes())
}

pub fn read_descriptors(path: &Path) -> Result<DescriptorFile> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    DescriptorFile::from_bytes(&bytes, path)
}
