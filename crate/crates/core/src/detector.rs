//! Significant-point detection: scale-space maxima of the box-filter
//! approximation of the Hessian determinant.
//!
//! Filters grow instead of the image shrinking, so every response map has the
//! full image resolution. Octave `o` starts at the second filter of octave
//! `o - 1` and steps by `6 * 2^o` (9, 15, 21, 27 | 15, 27, 39, 51 | 27, 51, 75, 99).

use std::collections::HashMap;
use std::fmt::Write as _;
use std::path::Path;

use nalgebra::{Matrix3, Vector3};

use crate::integral::IntegralImage;
use crate::io_util::{read_to_string, write_atomic};
use crate::range_image::PixelCoord;
use crate::{Error, Grid, Result};

/// Gaussian scale approximated by the smallest (9x9) filter.
pub const BASE_SIGMA: f64 = 1.2;

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Threshold {
    /// Keep candidates with response at least this value.
    Absolute(f64),
    /// Keep the `target` strongest candidates, ignoring any weaker than
    /// `min_response`. The floor is in depth units per pixel squared on the
    /// 0..255 depth scale and drops ripple maxima around strong blobs.
    Auto { target: usize, min_response: f64 },
}

impl Default for Threshold {
    fn default() -> Self {
        Threshold::Auto {
            target: 24,
            min_response: 1.5,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct DetectorConfig {
    /// Weight balancing `Dxy` against `Dxx * Dyy`.
    pub w: f64,
    pub octaves: usize,
    pub levels_per_octave: usize,
    pub base_filter_size: usize,
    pub threshold: Threshold,
}

impl Default for DetectorConfig {
    fn default() -> Self {
        Self {
            w: 0.9,
            octaves: 3,
            levels_per_octave: 4,
            base_filter_size: 9,
            threshold: Threshold::default(),
        }
    }
}

impl DetectorConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::InvalidArgument(m.to_string()));
        if self.base_filter_size < 9 || self.base_filter_size % 6 != 3 {
            return bad("base_filter_size must be >= 9 and equal 9 modulo 6");
        }
        if self.octaves == 0 {
            return bad("octaves must be positive");
        }
        if self.levels_per_octave < 3 {
            return bad("levels_per_octave must be >= 3 for scale-space maxima");
        }
        if !(self.w.is_finite() && self.w > 0.0) {
            return bad("hessian weight w must be positive");
        }
        match self.threshold {
            Threshold::Absolute(t) if !(t >= 0.0) => bad("response threshold must be >= 0"),
            Threshold::Auto { target, min_response }
                if target == 0 || !(min_response >= 0.0 && min_response.is_finite()) =>
            {
                bad("auto threshold needs target > 0 and a finite min_response >= 0")
            }
            _ => Ok(()),
        }
    }

    /// Filter sizes per octave, duplicates across octaves included.
    pub fn filter_sizes(&self) -> Vec<Vec<usize>> {
        let mut out = Vec::with_capacity(self.octaves);
        let mut start = self.base_filter_size;
        for o in 0..self.octaves {
            let step = 6usize << o;
            out.push((0..self.levels_per_octave).map(|k| start + k * step).collect());
            start += step;
        }
        out
    }
}

/// `Dxx * Dyy - (w * Dxy)^2` at every pixel for one filter size.
#[derive(Clone, Debug, PartialEq)]
pub struct ResponseMap {
    pub values: Grid,
    pub filter_size: usize,
    /// Approximated Gaussian scale, `1.2 * filter_size / 9`.
    pub scale: f64,
}

impl ResponseMap {
    /// Pixels closer than this to any edge lack full filter support.
    pub fn border(&self) -> usize {
        (self.filter_size - 1) / 2
    }
}

/// Area-normalized box-filter second derivatives `(Dxx, Dyy, Dxy)` at `(x, y)`.
///
/// The caller guarantees full support: `border <= x < width - border`, same for `y`.
#[inline]
pub fn box_derivatives(ii: &IntegralImage, x: i64, y: i64, filter_size: usize) -> (f64, f64, f64) {
    let size = filter_size as i64;
    let lobe = size / 3;
    let b = (size - 1) / 2;
    let area = (size * size) as f64;
    // Dxx: three lobes side by side (+1, -2, +1), each lobe x (2*lobe - 1)
    let dxx = ii.box_sum(x - b, y - lobe + 1, size, 2 * lobe - 1)
        - 3.0 * ii.box_sum(x - lobe / 2, y - lobe + 1, lobe, 2 * lobe - 1);
    let dyy = ii.box_sum(x - lobe + 1, y - b, 2 * lobe - 1, size)
        - 3.0 * ii.box_sum(x - lobe + 1, y - lobe / 2, 2 * lobe - 1, lobe);
    // Dxy: four lobe x lobe squares around a one-pixel cross
    let dxy = ii.box_sum(x + 1, y - lobe, lobe, lobe) + ii.box_sum(x - lobe, y + 1, lobe, lobe)
        - ii.box_sum(x - lobe, y - lobe, lobe, lobe)
        - ii.box_sum(x + 1, y + 1, lobe, lobe);
    (dxx / area, dyy / area, dxy / area)
}

fn check_filter_size(filter_size: usize) -> Result<()> {
    if filter_size < 9 || filter_size % 6 != 3 {
        return Err(Error::InvalidArgument(format!(
            "filter size {filter_size} must be >= 9 and equal 9 modulo 6"
        )));
    }
    Ok(())
}

pub fn hessian_response_map(ii: &IntegralImage, filter_size: usize, w: f64) -> Result<ResponseMap> {
    check_filter_size(filter_size)?;
    let (width, height) = (ii.width(), ii.height());
    if filter_size > width || filter_size > height {
        return Err(Error::FilterTooLarge {
            size: filter_size,
            width,
            height,
        });
    }
    let b = (filter_size - 1) / 2;
    let mut values = Grid::new(width, height);
    for y in b..height - b {
        for x in b..width - b {
            let (dxx, dyy, dxy) = box_derivatives(ii, x as i64, y as i64, filter_size);
            values.set(x, y, dxx * dyy - (w * dxy) * (w * dxy));
        }
    }
    Ok(ResponseMap {
        values,
        filter_size,
        scale: BASE_SIGMA * filter_size as f64 / 9.0,
    })
}

/// Response maps grouped by octave.
#[derive(Clone, Debug)]
pub struct ScaleSpace {
    pub octaves: Vec<Vec<ResponseMap>>,
}

impl ScaleSpace {
    /// All maps in octave order, duplicates included.
    pub fn maps(&self) -> impl Iterator<Item = &ResponseMap> {
        self.octaves.iter().flatten()
    }
}

pub fn build_scale_space(ii: &IntegralImage, cfg: &DetectorConfig) -> Result<ScaleSpace> {
    cfg.validate()?;
    let sizes = cfg.filter_sizes();
    for &s in sizes.iter().flatten() {
        if s > ii.width() || s > ii.height() {
            return Err(Error::FilterTooLarge {
                size: s,
                width: ii.width(),
                height: ii.height(),
            });
        }
    }
    let mut cache: HashMap<usize, ResponseMap> = HashMap::new();
    let mut octaves = Vec::with_capacity(sizes.len());
    for octave in &sizes {
        let mut maps = Vec::with_capacity(octave.len());
        for &s in octave {
            if !cache.contains_key(&s) {
                cache.insert(s, hessian_response_map(ii, s, cfg.w)?);
            }
            maps.push(cache[&s].clone());
        }
        octaves.push(maps);
    }
    Ok(ScaleSpace { octaves })
}

/// A refined scale-space maximum.
#[derive(Clone, Debug, PartialEq)]
pub struct SignificantPoint {
    pub location: PixelCoord,
    /// Gaussian scale `sigma`.
    pub scale: f64,
    /// Response at the raw grid maximum.
    pub response: f64,
    pub octave: usize,
    /// Level of the raw maximum within its octave.
    pub level: usize,
    /// Pixel of the raw maximum.
    pub peak: (usize, usize),
}

struct Candidate {
    octave: usize,
    level: usize,
    x: usize,
    y: usize,
    value: f64,
}

fn is_strict_max(maps: &[ResponseMap], level: usize, x: usize, y: usize) -> bool {
    let v = maps[level].values.get(x, y);
    for m in &maps[level - 1..=level + 1] {
        for ny in y - 1..=y + 1 {
            for nx in x - 1..=x + 1 {
                if std::ptr::eq(m, &maps[level]) && nx == x && ny == y {
                    continue;
                }
                if m.values.get(nx, ny) >= v {
                    return false;
                }
            }
        }
    }
    true
}

/// Pixel margin that keeps the 3x3 neighbourhood inside the support of `level + 1`.
fn margin(maps: &[ResponseMap], level: usize) -> usize {
    maps[level + 1].border() + 1
}

/// Quadratic fit around `(x, y, level)`; returns the offset `(dx, dy, ds)`.
fn quadratic_offset(maps: &[ResponseMap], level: usize, x: usize, y: usize) -> Option<Vector3<f64>> {
    let (lo, mid, hi) = (&maps[level - 1].values, &maps[level].values, &maps[level + 1].values);
    let v = mid.get(x, y);
    let g = Vector3::new(
        (mid.get(x + 1, y) - mid.get(x - 1, y)) / 2.0,
        (mid.get(x, y + 1) - mid.get(x, y - 1)) / 2.0,
        (hi.get(x, y) - lo.get(x, y)) / 2.0,
    );
    let dxx = mid.get(x + 1, y) + mid.get(x - 1, y) - 2.0 * v;
    let dyy = mid.get(x, y + 1) + mid.get(x, y - 1) - 2.0 * v;
    let dss = hi.get(x, y) + lo.get(x, y) - 2.0 * v;
    let dxy = (mid.get(x + 1, y + 1) - mid.get(x - 1, y + 1) - mid.get(x + 1, y - 1)
        + mid.get(x - 1, y - 1))
        / 4.0;
    let dxs = (hi.get(x + 1, y) - hi.get(x - 1, y) - lo.get(x + 1, y) + lo.get(x - 1, y)) / 4.0;
    let dys = (hi.get(x, y + 1) - hi.get(x, y - 1) - lo.get(x, y + 1) + lo.get(x, y - 1)) / 4.0;
    let h = Matrix3::new(dxx, dxy, dxs, dxy, dyy, dys, dxs, dys, dss);
    let offset = -(h.lu().solve(&g)?);
    offset.iter().all(|c| c.is_finite()).then_some(offset)
}

fn refine(maps: &[ResponseMap], octave: usize, step: f64, c: &Candidate) -> Option<SignificantPoint> {
    let (w, h) = (maps[0].values.width(), maps[0].values.height());
    let (mut x, mut y, mut level) = (c.x, c.y, c.level);
    for attempt in 0..2 {
        let off = quadratic_offset(maps, level, x, y)?;
        if off.iter().all(|o| o.abs() <= 0.5) {
            return Some(SignificantPoint {
                location: PixelCoord::new(x as f64 + off.x, y as f64 + off.y),
                scale: BASE_SIGMA / 9.0 * (maps[level].filter_size as f64 + off.z * step),
                response: c.value,
                octave,
                level: c.level,
                peak: (c.x, c.y),
            });
        }
        if attempt == 1 {
            break;
        }
        // move one sample toward the offset and refit once
        let shift = |o: f64| if o > 0.5 { 1i64 } else if o < -0.5 { -1 } else { 0 };
        let nl = level as i64 + shift(off.z);
        if nl < 1 || nl as usize + 1 >= maps.len() {
            return None;
        }
        let nl = nl as usize;
        let m = margin(maps, nl) as i64;
        let nx = x as i64 + shift(off.x);
        let ny = y as i64 + shift(off.y);
        if nx < m || ny < m || nx >= w as i64 - m || ny >= h as i64 - m {
            return None;
        }
        x = nx as usize;
        y = ny as usize;
        level = nl;
    }
    None
}

/// Scale-space maxima, refined to subpixel position and scale, strongest first.
pub fn detect_significant_points(ii: &IntegralImage, cfg: &DetectorConfig) -> Result<Vec<SignificantPoint>> {
    let space = build_scale_space(ii, cfg)?;
    let floor = match cfg.threshold {
        Threshold::Absolute(t) => t,
        Threshold::Auto { min_response, .. } => min_response,
    };
    let mut points = Vec::new();
    for (o, maps) in space.octaves.iter().enumerate() {
        let step = (6usize << o) as f64;
        let (w, h) = (maps[0].values.width(), maps[0].values.height());
        for level in 1..maps.len() - 1 {
            let m = margin(maps, level);
            if 2 * m >= w || 2 * m >= h {
                continue;
            }
            for y in m..h - m {
                for x in m..w - m {
                    let value = maps[level].values.get(x, y);
                    if value < floor || value <= 0.0 || !is_strict_max(maps, level, x, y) {
                        continue;
                    }
                    let c = Candidate {
                        octave: o,
                        level,
                        x,
                        y,
                        value,
                    };
                    if let Some(p) = refine(maps, c.octave, step, &c) {
                        points.push(p);
                    }
                }
            }
        }
    }
    // stable: equal responses keep scan order (octave, level, row, column)
    points.sort_by(|a, b| b.response.total_cmp(&a.response));
    if let Threshold::Auto { target, .. } = cfg.threshold {
        points.truncate(target);
    }
    Ok(points)
}

/// One `u v scale response` line per point.
pub fn format_points(points: &[SignificantPoint]) -> String {
    let mut s = String::new();
    for p in points {
        let _ = writeln!(s, "{} {} {} {}", p.location.u, p.location.v, p.scale, p.response);
    }
    s
}

pub fn write_points(points: &[SignificantPoint], path: &Path) -> Result<()> {
    write_atomic(path, format_points(points).as_bytes())
}

/// Reads `u v scale response` lines. Octave, level and peak are not stored and
/// come back as zero / the rounded location.
pub fn read_points(path: &Path) -> Result<Vec<SignificantPoint>> {
    let text = read_to_string(path)?;
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let nums: std::result::Result<Vec<f64>, _> = line.split_whitespace().map(str::parse).collect();
        match nums {
            Ok(n) if n.len() == 4 => out.push(SignificantPoint {
                location: PixelCoord::new(n[0], n[1]),
                scale: n[2],
                response: n[3],
                octave: 0,
                level: 0,
                peak: (n[0].round().max(0.0) as usize, n[1].round().max(0.0) as usize),
            }),
            _ => {
                return Err(Error::Parse {
                    path: path.to_path_buf(),
                    line: i + 1,
                    message: "expected `u v scale response`".into(),
                })
            }
        }
    }
    Ok(out)
}
