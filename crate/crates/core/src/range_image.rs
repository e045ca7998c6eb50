//! Range images: rasterization of registered clouds, nose-tip location,
//! elliptical cropping and PGM storage.

use std::collections::HashMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use nalgebra::Point3;
use spade::{DelaunayTriangulation, FloatTriangulation, HasPosition, Point2, Triangulation};

use crate::cloud_io::PointCloud;
use crate::io_util::{read_to_string, write_atomic};
use crate::registration::{apply_transform, icp_align, IcpParams, IcpResult};
use crate::{Error, Grid, Result};

/// Upper end of the normalized depth scale.
pub const DEPTH_MAX: f64 = 255.0;
/// Pixels within this much of the maximum depth form the nose-tip region.
pub const NOSE_FLATNESS: f64 = 1.0;

/// How raw `z` maps to stored depth.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum DepthScale {
    /// Resolve from the valid pixels: lowest depth to 0, highest to 255.
    Normalize,
    /// `depth = (z - z_lo) / (z_hi - z_lo) * 255`.
    Fixed { z_lo: f64, z_hi: f64 },
}

impl DepthScale {
    fn apply(&self, z: f64) -> f64 {
        match *self {
            DepthScale::Fixed { z_lo, z_hi } => (z - z_lo) / (z_hi - z_lo) * DEPTH_MAX,
            DepthScale::Normalize => z,
        }
    }

    /// Raw `z` for a stored depth; identity for an unresolved scale.
    pub fn invert(&self, depth: f64) -> f64 {
        match *self {
            DepthScale::Fixed { z_lo, z_hi } => z_lo + depth / DEPTH_MAX * (z_hi - z_lo),
            DepthScale::Normalize => depth,
        }
    }
}

/// Sampling lattice of a range image. Column `u` sits at
/// `x_range.0 + u * dx`, row `v` at `y_range.1 - v * dy` (row 0 is the top).
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct GridSpec {
    pub width: usize,
    pub height: usize,
    pub x_range: (f64, f64),
    pub y_range: (f64, f64),
    pub depth: DepthScale,
}

impl GridSpec {
    pub fn validate(&self) -> Result<()> {
        if self.width < 16 || self.height < 16 {
            return Err(Error::InvalidArgument(format!(
                "grid must be at least 16x16, got {}x{}",
                self.width, self.height
            )));
        }
        let ok = |(lo, hi): (f64, f64)| lo.is_finite() && hi.is_finite() && lo < hi;
        if !ok(self.x_range) || !ok(self.y_range) {
            return Err(Error::InvalidArgument("grid intervals must be finite and non-degenerate".into()));
        }
        if let DepthScale::Fixed { z_lo, z_hi } = self.depth {
            if !ok((z_lo, z_hi)) {
                return Err(Error::InvalidArgument("depth interval must be non-degenerate".into()));
            }
        }
        Ok(())
    }

    /// Square-pixel grid over the cloud's `(x, y)` bounding box, widened by
    /// `margin` (a fraction of the extent) on every side and centred.
    pub fn fit(cloud: &PointCloud, width: usize, height: usize, margin: f64) -> Result<Self> {
        let (lo, hi) = cloud.bounds();
        let ex = (hi.x - lo.x).max(f64::MIN_POSITIVE);
        let ey = (hi.y - lo.y).max(f64::MIN_POSITIVE);
        let step_x = ex * (1.0 + 2.0 * margin) / (width.max(2) - 1) as f64;
        let step_y = ey * (1.0 + 2.0 * margin) / (height.max(2) - 1) as f64;
        let step = step_x.max(step_y);
        let cx = 0.5 * (lo.x + hi.x);
        let cy = 0.5 * (lo.y + hi.y);
        let half_w = 0.5 * step * (width.max(2) - 1) as f64;
        let half_h = 0.5 * step * (height.max(2) - 1) as f64;
        let spec = Self {
            width,
            height,
            x_range: (cx - half_w, cx + half_w),
            y_range: (cy - half_h, cy + half_h),
            depth: DepthScale::Normalize,
        };
        spec.validate()?;
        Ok(spec)
    }

    pub fn dx(&self) -> f64 {
        (self.x_range.1 - self.x_range.0) / (self.width - 1) as f64
    }

    pub fn dy(&self) -> f64 {
        (self.y_range.1 - self.y_range.0) / (self.height - 1) as f64
    }

    pub fn node(&self, u: usize, v: usize) -> (f64, f64) {
        (
            self.x_range.0 + u as f64 * self.dx(),
            self.y_range.1 - v as f64 * self.dy(),
        )
    }

    /// Fractional `(u, v)` of a world position.
    pub fn to_pixel(&self, x: f64, y: f64) -> (f64, f64) {
        ((x - self.x_range.0) / self.dx(), (self.y_range.1 - y) / self.dy())
    }
}

/// Subpixel image position: `u` is the column, `v` the row.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct PixelCoord {
    pub u: f64,
    pub v: f64,
}

impl PixelCoord {
    pub fn new(u: f64, v: f64) -> Self {
        Self { u, v }
    }
}

/// Depth grid plus validity mask. Invalid pixels hold 0; nearer surfaces are brighter.
#[derive(Clone, Debug, PartialEq)]
pub struct RangeImage {
    pub depth: Grid,
    pub valid: Vec<bool>,
    pub grid: GridSpec,
}

impl RangeImage {
    pub fn width(&self) -> usize {
        self.depth.width()
    }

    pub fn height(&self) -> usize {
        self.depth.height()
    }

    #[inline]
    pub fn is_valid(&self, u: usize, v: usize) -> bool {
        self.valid[v * self.width() + u]
    }

    pub fn valid_count(&self) -> usize {
        self.valid.iter().filter(|&&b| b).count()
    }

    fn valid_max(&self) -> Option<f64> {
        self.depth
            .data()
            .iter()
            .zip(&self.valid)
            .filter(|(_, &ok)| ok)
            .map(|(&d, _)| d)
            .reduce(f64::max)
    }
}

struct Sample {
    pos: Point2<f64>,
    z: f64,
}

impl HasPosition for Sample {
    type Scalar = f64;
    fn position(&self) -> Point2<f64> {
        self.pos
    }
}

/// Keeps, for every grid cell, only the point nearest the scanner (largest z).
/// Cells are centred on the grid nodes. Survivors keep their input order.
pub fn zbuffer_points(cloud: &PointCloud, spec: &GridSpec) -> Vec<Point3<f64>> {
    let mut best: HashMap<(i64, i64), usize> = HashMap::new();
    let pts = cloud.points();
    for (i, p) in pts.iter().enumerate() {
        let (u, v) = spec.to_pixel(p.x, p.y);
        let key = (u.round() as i64, v.round() as i64);
        best.entry(key)
            .and_modify(|j| {
                if p.z > pts[*j].z {
                    *j = i;
                }
            })
            .or_insert(i);
    }
    let mut keep: Vec<usize> = best.into_values().collect();
    keep.sort_unstable();
    keep.into_iter().map(|i| pts[i]).collect()
}

/// Interpolates the cloud onto `spec` by linear interpolation over a Delaunay
/// triangulation of the z-buffered points. Nodes outside the convex hull are invalid.
pub fn rasterize(cloud: &PointCloud, spec: &GridSpec) -> Result<RangeImage> {
    spec.validate()?;
    let (lo, hi) = cloud.bounds();
    if hi.x < spec.x_range.0 || lo.x > spec.x_range.1 || hi.y < spec.y_range.0 || lo.y > spec.y_range.1 {
        return Err(Error::OutsideGrid);
    }
    let pts = zbuffer_points(cloud, spec);
    if pts.len() < 3 {
        return Err(Error::Triangulation(format!("need at least 3 points, have {}", pts.len())));
    }
    let samples: Vec<Sample> = pts
        .iter()
        .map(|p| Sample {
            pos: Point2::new(p.x, p.y),
            z: p.z,
        })
        .collect();
    let tri: DelaunayTriangulation<Sample> = DelaunayTriangulation::bulk_load_stable(samples)
        .map_err(|e| Error::Triangulation(format!("{e:?}")))?;
    if tri.num_inner_faces() == 0 {
        return Err(Error::Triangulation("projected points are collinear".into()));
    }

    let (w, h) = (spec.width, spec.height);
    let mut raw = Grid::new(w, h);
    let mut valid = vec![false; w * h];
    let interp = tri.barycentric();
    for v in 0..h {
        for u in 0..w {
            let (x, y) = spec.node(u, v);
            if let Some(z) = interp.interpolate(|s| s.data().z, Point2::new(x, y)) {
                raw.set(u, v, z);
                valid[v * w + u] = true;
            }
        }
    }

    let mut flat = false;
    let depth_scale = match spec.depth {
        DepthScale::Fixed { .. } => spec.depth,
        DepthScale::Normalize => {
            let (mut z_lo, mut z_hi) = (f64::INFINITY, f64::NEG_INFINITY);
            for (z, _) in raw.data().iter().zip(&valid).filter(|(_, &ok)| ok) {
                z_lo = z_lo.min(*z);
                z_hi = z_hi.max(*z);
            }
            if !z_lo.is_finite() {
                return Err(Error::OutsideGrid);
            }
            // barycentric weights can leave round-off on a plane
            if z_hi - z_lo <= 1e-9 * z_hi.abs().max(1.0) {
                // flat input: map the single level to the top of the scale
                flat = true;
                z_lo = z_hi - 1.0;
            }
            DepthScale::Fixed { z_lo, z_hi }
        }
    };
    let mut depth = Grid::new(w, h);
    for (i, d) in depth.data_mut().iter_mut().enumerate() {
        if valid[i] {
            *d = if flat {
                DEPTH_MAX
            } else {
                depth_scale.apply(raw.data()[i]).clamp(0.0, DEPTH_MAX)
            };
        }
    }
    Ok(RangeImage {
        depth,
        valid,
        grid: GridSpec {
            depth: depth_scale,
            ..*spec
        },
    })
}

/// Centroid of the largest 8-connected region of valid pixels within
/// [`NOSE_FLATNESS`] of the maximum depth. Equal-size regions resolve to the
/// one containing the first pixel in row-major order.
pub fn find_nose_tip(img: &RangeImage) -> Result<PixelCoord> {
    let max = img.valid_max().ok_or(Error::NoValidPixels)?;
    let (w, h) = (img.width(), img.height());
    let in_region = |u: usize, v: usize| img.is_valid(u, v) && img.depth.get(u, v) >= max - NOSE_FLATNESS;
    let mut label = vec![usize::MAX; w * h];
    let mut best: Option<(usize, f64, f64)> = None;
    let mut stack = Vec::new();
    let mut next_label = 0;
    for v0 in 0..h {
        for u0 in 0..w {
            if label[v0 * w + u0] != usize::MAX || !in_region(u0, v0) {
                continue;
            }
            let (mut n, mut su, mut sv) = (0usize, 0.0, 0.0);
            label[v0 * w + u0] = next_label;
            stack.push((u0, v0));
            while let Some((u, v)) = stack.pop() {
                n += 1;
                su += u as f64;
                sv += v as f64;
                for dv in -1i64..=1 {
                    for du in -1i64..=1 {
                        let (nu, nv) = (u as i64 + du, v as i64 + dv);
                        if nu < 0 || nv < 0 || nu >= w as i64 || nv >= h as i64 {
                            continue;
                        }
                        let (nu, nv) = (nu as usize, nv as usize);
                        if label[nv * w + nu] == usize::MAX && in_region(nu, nv) {
                            label[nv * w + nu] = next_label;
                            stack.push((nu, nv));
                        }
                    }
                }
            }
            next_label += 1;
            if best.is_none_or(|(bn, _, _)| n > bn) {
                best = Some((n, su / n as f64, sv / n as f64));
            }
        }
    }
    let (_, u, v) = best.expect("the maximum pixel belongs to a region");
    Ok(PixelCoord::new(u, v))
}

/// Semi-axes of the elliptical crop, in pixels.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct CropAxes {
    pub a: f64,
    pub b: f64,
}

impl CropAxes {
    /// `(0.35 * width, 0.45 * height)`.
    pub fn default_for(width: usize, height: usize) -> Self {
        Self {
            a: 0.35 * width as f64,
            b: 0.45 * height as f64,
        }
    }
}

/// Keeps pixels with `((u-cu)/a)^2 + ((v-cv)/b)^2 <= 1`; everything else becomes background.
pub fn crop_ellipse(img: &RangeImage, center: PixelCoord, axes: CropAxes) -> Result<RangeImage> {
    if !(axes.a > 0.0 && axes.b > 0.0) {
        return Err(Error::InvalidArgument(format!(
            "crop semi-axes must be positive, got ({}, {})",
            axes.a, axes.b
        )));
    }
    let mut out = img.clone();
    let w = img.width();
    for v in 0..img.height() {
        for u in 0..w {
            let du = (u as f64 - center.u) / axes.a;
            let dv = (v as f64 - center.v) / axes.b;
            if du * du + dv * dv > 1.0 {
                out.valid[v * w + u] = false;
                out.depth.set(u, v, 0.0);
            }
        }
    }
    Ok(out)
}

#[derive(Clone, Debug)]
pub struct Preprocessed {
    pub image: RangeImage,
    pub nose_tip: PixelCoord,
    /// `None` when no reference was given.
    pub registration: Option<IcpResult>,
}

/// Register to `reference` (if any), rasterize, find the nose tip and crop around it.
pub fn preprocess(
    cloud: &PointCloud,
    reference: Option<&PointCloud>,
    spec: &GridSpec,
    crop: CropAxes,
    icp: &IcpParams,
) -> Result<Preprocessed> {
    let (registered, registration) = match reference {
        Some(target) => {
            let r = icp_align(cloud, target, icp)?;
            (apply_transform(cloud, &r.transform), Some(r))
        }
        None => (cloud.clone(), None),
    };
    let raster = rasterize(&registered, spec)?;
    let nose_tip = find_nose_tip(&raster)?;
    let image = crop_ellipse(&raster, nose_tip, crop)?;
    Ok(Preprocessed {
        image,
        nose_tip,
        registration,
    })
}

/// Sidecar path for a range-image PGM: `face.pgm` -> `face.range`.
pub fn sidecar_path(pgm: &Path) -> PathBuf {
    pgm.with_extension("range")
}

/// Writes a 16-bit big-endian PGM (depth quantized to 0..=65535) and its sidecar,
/// which records the grid and the run-length encoded validity mask.
pub fn write_range_image(img: &RangeImage, pgm: &Path) -> Result<()> {
    let (w, h) = (img.width(), img.height());
    let mut bytes = format!("P5\n{w} {h}\n65535\n").into_bytes();
    bytes.reserve(2 * w * h);
    for (d, &ok) in img.depth.data().iter().zip(&img.valid) {
        let q = if ok {
            (d / DEPTH_MAX * 65535.0).round().clamp(0.0, 65535.0) as u16
        } else {
            0
        };
        bytes.extend_from_slice(&q.to_be_bytes());
    }
    write_atomic(pgm, &bytes)?;
    write_atomic(&sidecar_path(pgm), format_sidecar(img).as_bytes())
}

fn format_sidecar(img: &RangeImage) -> String {
    let g = &img.grid;
    let mut s = String::from("# range image sidecar\n");
    let _ = writeln!(s, "width = {}", g.width);
    let _ = writeln!(s, "height = {}", g.height);
    let _ = writeln!(s, "x_range = {} {}", g.x_range.0, g.x_range.1);
    let _ = writeln!(s, "y_range = {} {}", g.y_range.0, g.y_range.1);
    match g.depth {
        DepthScale::Fixed { z_lo, z_hi } => {
            let _ = writeln!(s, "depth_z = {z_lo} {z_hi}");
        }
        DepthScale::Normalize => {
            let _ = writeln!(s, "depth_z = normalize");
        }
    }
    let first = img.valid.first().copied().unwrap_or(false);
    let mut runs = Vec::new();
    let mut cur = first;
    let mut len = 0usize;
    for &b in &img.valid {
        if b == cur {
            len += 1;
        } else {
            runs.push(len);
            cur = b;
            len = 1;
        }
    }
    runs.push(len);
    let _ = writeln!(s, "mask_first = {}", u8::from(first));
    let runs: Vec<String> = runs.iter().map(|r| r.to_string()).collect();
    let _ = writeln!(s, "mask_runs = {}", runs.join(" "));
    s
}

pub fn read_range_image(pgm: &Path) -> Result<RangeImage> {
    let bytes = std::fs::read(pgm).map_err(|e| Error::io(pgm, e))?;
    let (w, h, maxval, offset) = parse_pgm_header(&bytes).ok_or_else(|| Error::format(pgm, "bad PGM header"))?;
    if maxval != 65535 {
        return Err(Error::format(pgm, format!("expected maxval 65535, found {maxval}")));
    }
    if bytes.len() < offset + 2 * w * h {
        return Err(Error::format(pgm, "truncated pixel data"));
    }
    let side_path = sidecar_path(pgm);
    let side = read_to_string(&side_path)?;
    let (grid, valid) = parse_sidecar(&side, &side_path)?;
    if grid.width != w || grid.height != h || valid.len() != w * h {
        return Err(Error::format(&side_path, "sidecar does not match PGM dimensions"));
    }
    let mut depth = Grid::new(w, h);
    for (i, d) in depth.data_mut().iter_mut().enumerate() {
        let q = u16::from_be_bytes([bytes[offset + 2 * i], bytes[offset + 2 * i + 1]]);
        if valid[i] {
            *d = q as f64 / 65535.0 * DEPTH_MAX;
        }
    }
    Ok(RangeImage { depth, valid, grid })
}

fn parse_pgm_header(bytes: &[u8]) -> Option<(usize, usize, usize, usize)> {
    if bytes.get(..2)? != b"P5" {
        return None;
    }
    let mut pos = 2;
    let mut fields = [0usize; 3];
    for f in &mut fields {
        loop {
            match *bytes.get(pos)? {
                b'#' => {
                    while *bytes.get(pos)? != b'\n' {
                        pos += 1;
                    }
                }
                c if c.is_ascii_whitespace() => pos += 1,
                _ => break,
            }
        }
        let start = pos;
        while bytes.get(pos)?.is_ascii_digit() {
            pos += 1;
        }
        *f = std::str::from_utf8(&bytes[start..pos]).ok()?.parse().ok()?;
    }
    // exactly one whitespace byte precedes the raster
    if !bytes.get(pos)?.is_ascii_whitespace() {
        return None;
    }
    Some((fields[0], fields[1], fields[2], pos + 1))
}

fn parse_sidecar(text: &str, path: &Path) -> Result<(GridSpec, Vec<bool>)> {
    let mut kv = HashMap::new();
    for line in text.lines() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let (k, v) = line
            .split_once('=')
            .ok_or_else(|| Error::format(path, format!("expected key = value, got {line:?}")))?;
        kv.insert(k.trim().to_string(), v.trim().to_string());
    }
    let get = |k: &str| kv.get(k).ok_or_else(|| Error::format(path, format!("missing key {k}")));
    let num = |s: &str| s.parse::<f64>().map_err(|e| Error::format(path, format!("bad number {s:?}: {e}")));
    let pair = |k: &str| -> Result<(f64, f64)> {
        let v = get(k)?;
        let parts: Vec<&str> = v.split_whitespace().collect();
        if parts.len() != 2 {
            return Err(Error::format(path, format!("{k} needs two numbers")));
        }
        Ok((num(parts[0])?, num(parts[1])?))
    };
    let int = |k: &str| -> Result<usize> {
        get(k)?
            .parse::<usize>()
            .map_err(|e| Error::format(path, format!("bad {k}: {e}")))
    };
    let depth = if get("depth_z")? == "normalize" {
        DepthScale::Normalize
    } else {
        let (z_lo, z_hi) = pair("depth_z")?;
        DepthScale::Fixed { z_lo, z_hi }
    };
    let grid = GridSpec {
        width: int("width")?,
        height: int("height")?,
        x_range: pair("x_range")?,
        y_range: pair("y_range")?,
        depth,
    };
    grid.validate()
        .map_err(|e| Error::format(path, e.to_string()))?;
    let mut cur = int("mask_first")? == 1;
    let mut valid = Vec::with_capacity(grid.width * grid.height);
    for r in get("mask_runs")?.split_whitespace() {
        let n: usize = r.parse().map_err(|e| Error::format(path, format!("bad run {r:?}: {e}")))?;
        valid.extend(std::iter::repeat_n(cur, n));
        cur = !cur;
    }
    Ok((grid, valid))
}
