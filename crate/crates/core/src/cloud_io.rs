//! Point clouds, XYZ files, dataset manifests and the synthetic face generator.

use std::collections::HashSet;
use std::fmt::{self, Write as _};
use std::path::{Path, PathBuf};
use std::str::FromStr;

use nalgebra::{Point3, Rotation3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::io_util::{read_to_string, write_atomic};
use crate::{Error, Result};

/// Unordered set of scanner samples. Never empty, every coordinate finite.
#[derive(Clone, Debug, PartialEq)]
pub struct PointCloud {
    points: Vec<Point3<f64>>,
}

impl PointCloud {
    pub fn new(points: Vec<Point3<f64>>) -> Result<Self> {
        if points.is_empty() {
            return Err(Error::EmptyCloud);
        }
        if let Some(i) = points.iter().position(|p| !p.coords.iter().all(|c| c.is_finite())) {
            return Err(Error::InvalidArgument(format!("point {i} has a non-finite coordinate")));
        }
        Ok(Self { points })
    }

    pub fn points(&self) -> &[Point3<f64>] {
        &self.points
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    pub fn into_points(self) -> Vec<Point3<f64>> {
        self.points
    }

    /// Axis-aligned bounds as `(min, max)`.
    pub fn bounds(&self) -> (Point3<f64>, Point3<f64>) {
        let mut lo = self.points[0];
        let mut hi = self.points[0];
        for p in &self.points[1..] {
            for k in 0..3 {
                lo[k] = lo[k].min(p[k]);
                hi[k] = hi[k].max(p[k]);
            }
        }
        (lo, hi)
    }

    pub fn bbox_diagonal(&self) -> f64 {
        let (lo, hi) = self.bounds();
        (hi - lo).norm()
    }
}

/// Reads an ASCII XYZ file: one `x y z` triple per line, `#` lines are comments.
pub fn load_xyz(path: &Path) -> Result<PointCloud> {
    let text = read_to_string(path)?;
    parse_xyz(&text, path)
}

fn parse_xyz(text: &str, path: &Path) -> Result<PointCloud> {
    let mut points = Vec::new();
    for (i, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let parse_err = |message: String| Error::Parse {
            path: path.to_path_buf(),
            line: i + 1,
            message,
        };
        let fields: Vec<&str> = line.split_whitespace().collect();
        if fields.len() != 3 {
            return Err(parse_err(format!("expected 3 fields, found {}", fields.len())));
        }
        let mut xyz = [0.0; 3];
        for (slot, field) in xyz.iter_mut().zip(&fields) {
            *slot = field
                .parse::<f64>()
                .map_err(|e| parse_err(format!("bad number {field:?}: {e}")))?;
            if !slot.is_finite() {
                return Err(parse_err(format!("non-finite value {field:?}")));
            }
        }
        points.push(Point3::new(xyz[0], xyz[1], xyz[2]));
    }
    PointCloud::new(points)
}

/// Writes a cloud as ASCII XYZ using shortest round-trip float formatting.
pub fn save_xyz(cloud: &PointCloud, path: &Path) -> Result<()> {
    write_atomic(path, format_xyz(cloud).as_bytes())
}

pub fn format_xyz(cloud: &PointCloud) -> String {
    let mut out = String::with_capacity(cloud.len() * 32);
    for p in cloud.points() {
        let _ = writeln!(out, "{} {} {}", p.x, p.y, p.z);
    }
    out
}

/// Capture type of a scan under the 16-scan acquisition numbering.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum PoseTag {
    Frontal,
    RightTurnY25,
    LeftTurnY5,
    SevereRightTurnZ,
    SmallRightTurnZ,
    Smile,
    OpenMouth,
    LookUp,
    LookDown,
    FrontalUncontrolledLight,
}

impl PoseTag {
    pub const ALL: [PoseTag; 10] = [
        PoseTag::Frontal,
        PoseTag::RightTurnY25,
        PoseTag::LeftTurnY5,
        PoseTag::SevereRightTurnZ,
        PoseTag::SmallRightTurnZ,
        PoseTag::Smile,
        PoseTag::OpenMouth,
        PoseTag::LookUp,
        PoseTag::LookDown,
        PoseTag::FrontalUncontrolledLight,
    ];

    /// Tag of scan `scan_id` (1..=16) in the standard capture order.
    pub fn for_scan(scan_id: u8) -> Option<PoseTag> {
        Some(match scan_id {
            1..=4 => PoseTag::Frontal,
            5 | 6 => PoseTag::RightTurnY25,
            7 | 8 => PoseTag::LeftTurnY5,
            9 => PoseTag::SevereRightTurnZ,
            10 => PoseTag::SmallRightTurnZ,
            11 => PoseTag::Smile,
            12 => PoseTag::OpenMouth,
            13 => PoseTag::LookUp,
            14 => PoseTag::LookDown,
            15 | 16 => PoseTag::FrontalUncontrolledLight,
            _ => return None,
        })
    }

    pub fn as_str(self) -> &'static str {
        match self {
            PoseTag::Frontal => "frontal",
            PoseTag::RightTurnY25 => "right_y25",
            PoseTag::LeftTurnY5 => "left_y5",
            PoseTag::SevereRightTurnZ => "severe_right_z",
            PoseTag::SmallRightTurnZ => "small_right_z",
            PoseTag::Smile => "smile",
            PoseTag::OpenMouth => "open_mouth",
            PoseTag::LookUp => "look_up",
            PoseTag::LookDown => "look_down",
            PoseTag::FrontalUncontrolledLight => "frontal_light",
        }
    }
}

impl fmt::Display for PoseTag {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for PoseTag {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, Self::Err> {
        PoseTag::ALL
            .into_iter()
            .find(|t| t.as_str() == s)
            .ok_or_else(|| format!("unknown pose tag {s:?}"))
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ManifestEntry {
    pub subject_id: String,
    pub scan_id: u8,
    pub pose_tag: PoseTag,
    pub path: PathBuf,
}

/// Validated list of scans. `(subject_id, scan_id)` pairs are unique.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct DatasetManifest {
    entries: Vec<ManifestEntry>,
}

impl DatasetManifest {
    /// Validates uniqueness and scan ranges. File existence is checked by [`load_manifest`].
    pub fn new(entries: Vec<ManifestEntry>) -> Result<Self> {
        let mut seen = HashSet::new();
        for e in &entries {
            if !(1..=16).contains(&e.scan_id) {
                return Err(Error::ScanIdRange(e.scan_id as i64));
            }
            if !seen.insert((e.subject_id.as_str(), e.scan_id)) {
                return Err(Error::DuplicateEntry {
                    subject: e.subject_id.clone(),
                    scan: e.scan_id,
                });
            }
        }
        Ok(Self { entries })
    }

    pub fn entries(&self) -> &[ManifestEntry] {
        &self.entries
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Subject ids in order of first appearance.
    pub fn subjects(&self) -> Vec<&str> {
        let mut seen = HashSet::new();
        self.entries
            .iter()
            .filter(|e| seen.insert(e.subject_id.as_str()))
            .map(|e| e.subject_id.as_str())
            .collect()
    }

    pub fn get(&self, subject: &str, scan: u8) -> Option<&ManifestEntry> {
        self.entries
            .iter()
            .find(|e| e.subject_id == subject && e.scan_id == scan)
    }

    /// Entries of one subject sorted by scan id.
    pub fn scans_of(&self, subject: &str) -> Vec<&ManifestEntry> {
        let mut v: Vec<_> = self.entries.iter().filter(|e| e.subject_id == subject).collect();
        v.sort_by_key(|e| e.scan_id);
        v
    }

    pub fn to_text(&self) -> String {
        let mut out = String::new();
        for e in &self.entries {
            let _ = writeln!(
                out,
                "{}\t{}\t{}\t{}",
                e.subject_id,
                e.scan_id,
                e.pose_tag,
                e.path.display()
            );
        }
        out
    }
}

/// Reads a tab-separated manifest (`subject<TAB>scan<TAB>pose_tag<TAB>path`).
///
/// Relative paths resolve against the manifest's directory; every path must exist.
pub fn load_manifest(path: &Path) -> Result<DatasetManifest> {
    let text = read_to_string(path)?;
    let base = path.parent().unwrap_or_else(|| Path::new(""));
    let mut entries = Vec::new();
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() || line.trim_start().starts_with('#') {
            continue;
        }
        let parse_err = |message: String| Error::Parse {
            path: path.to_path_buf(),
            line: i + 1,
            message,
        };
        let fields: Vec<&str> = line.split('\t').collect();
        if fields.len() != 4 {
            return Err(parse_err(format!("expected 4 tab-separated fields, found {}", fields.len())));
        }
        let subject_id = fields[0].trim();
        if subject_id.is_empty() {
            return Err(parse_err("empty subject id".into()));
        }
        let scan: i64 = fields[1]
            .trim()
            .parse()
            .map_err(|e| parse_err(format!("bad scan id {:?}: {e}", fields[1])))?;
        if !(1..=16).contains(&scan) {
            return Err(Error::ScanIdRange(scan));
        }
        let pose_tag = fields[2].trim().parse::<PoseTag>().map_err(parse_err)?;
        let rel = PathBuf::from(fields[3].trim());
        let resolved = if rel.is_absolute() { rel } else { base.join(rel) };
        if !resolved.is_file() {
            return Err(Error::MissingFile(resolved));
        }
        entries.push(ManifestEntry {
            subject_id: subject_id.to_string(),
            scan_id: scan as u8,
            pose_tag,
            path: resolved,
        });
    }
    DatasetManifest::new(entries)
}

pub fn save_manifest(manifest: &DatasetManifest, path: &Path) -> Result<()> {
    write_atomic(path, manifest.to_text().as_bytes())
}

#[derive(Clone, Copy, Debug, PartialEq)]
struct Bump {
    cx: f64,
    cy: f64,
    sx: f64,
    sy: f64,
    amp: f64,
}

impl Bump {
    fn eval(&self, x: f64, y: f64) -> f64 {
        let dx = (x - self.cx) / self.sx;
        let dy = (y - self.cy) / self.sy;
        self.amp * (-0.5 * (dx * dx + dy * dy)).exp()
    }
}

/// Sample spacing of synthetic scans, in scanner units (mm).
pub const SYNTH_SPACING: f64 = 1.5;
/// Fraction of the head ellipse that is sampled; keeps the rim slope bounded.
const SYNTH_EXTENT: f64 = 0.9;

/// Seeded face-like height field: a half-ellipsoid with a nose bump on top and
/// a handful of identity-specific bumps and dents (eyes, brow, cheeks, mouth, chin).
///
/// Coordinates are centred on the head, `+z` points toward the scanner.
#[derive(Clone, Debug, PartialEq)]
pub struct FaceModel {
    half_width: f64,
    half_height: f64,
    depth: f64,
    nose: Bump,
    features: Vec<Bump>,
}

impl FaceModel {
    pub fn from_seed(seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut jit = |c: f64, r: f64| c + rng.random_range(-r..=r);

        let half_width = jit(72.0, 6.0);
        let half_height = jit(95.0, 6.0);
        let depth = jit(45.0, 5.0);
        let nose = Bump {
            cx: 0.0,
            cy: jit(-2.0, 4.0),
            sx: jit(7.0, 1.0),
            sy: jit(14.0, 3.0),
            amp: jit(34.0, 4.0),
        };

        let mut features = Vec::new();
        let eye_y = jit(28.0, 4.0);
        for side in [-1.0, 1.0] {
            features.push(Bump {
                cx: side * jit(30.0, 4.0),
                cy: eye_y + jit(0.0, 2.0),
                sx: jit(11.0, 2.0),
                sy: jit(8.0, 2.0),
                amp: -jit(16.0, 3.0),
            });
        }
        features.push(Bump {
            cx: jit(0.0, 3.0),
            cy: eye_y + jit(16.0, 3.0),
            sx: jit(35.0, 5.0),
            sy: jit(6.0, 1.0),
            amp: jit(5.0, 2.0),
        });
        for side in [-1.0, 1.0] {
            features.push(Bump {
                cx: side * jit(38.0, 4.0),
                cy: jit(-12.0, 4.0),
                sx: jit(14.0, 2.0),
                sy: jit(14.0, 2.0),
                amp: jit(6.5, 2.5),
            });
        }
        features.push(Bump {
            cx: jit(0.0, 2.0),
            cy: jit(-40.0, 4.0),
            sx: jit(18.0, 3.0),
            sy: jit(5.0, 1.0),
            amp: -jit(4.0, 1.5),
        });
        features.push(Bump {
            cx: jit(0.0, 2.0),
            cy: jit(-68.0, 4.0),
            sx: jit(16.0, 3.0),
            sy: jit(10.0, 2.0),
            amp: jit(8.0, 2.0),
        });
        // Free-form marks, kept away from the nose so the apex stays the maximum.
        let mut marks = 0;
        while marks < 16 {
            let cx = rng.random_range(-50.0..=50.0);
            let cy = rng.random_range(-70.0..=60.0);
            let sign = if rng.random_bool(0.5) { 1.0 } else { -1.0 };
            let amp = sign * rng.random_range(5.0..=10.0);
            let sx = rng.random_range(4.0..=9.0);
            let sy = rng.random_range(4.0..=9.0);
            if (cx * cx + (cy - nose.cy) * (cy - nose.cy)) < 30.0 * 30.0 {
                continue;
            }
            features.push(Bump { cx, cy, sx, sy, amp });
            marks += 1;
        }

        Self {
            half_width,
            half_height,
            depth,
            nose,
            features,
        }
    }

    /// Height of the frontal surface at `(x, y)`.
    pub fn height(&self, x: f64, y: f64) -> f64 {
        let r2 = (x / self.half_width).powi(2) + (y / self.half_height).powi(2);
        let base = self.depth * (1.0 - r2).max(0.0).sqrt();
        base + self.nose.eval(x, y) + self.features.iter().map(|b| b.eval(x, y)).sum::<f64>()
    }

    /// Frontal sample positions: a grid anchored on the nose centre with each
    /// node except the anchor jittered by up to 40% of the spacing. The jitter
    /// keeps two scans from sharing a lattice, which real scanners never do.
    fn sample_xy(&self, jitter_seed: u64) -> Vec<(f64, f64)> {
        let mut rng = ChaCha8Rng::seed_from_u64(jitter_seed);
        let j_max = 0.4 * SYNTH_SPACING;
        let nx = (self.half_width / SYNTH_SPACING).ceil() as i64;
        let ny = (2.0 * self.half_height / SYNTH_SPACING).ceil() as i64;
        let mut out = Vec::new();
        for j in -ny..=ny {
            for i in -nx..=nx {
                let (jx, jy): (f64, f64) = (rng.random_range(-j_max..=j_max), rng.random_range(-j_max..=j_max));
                let (jx, jy) = if i == 0 && j == 0 { (0.0, 0.0) } else { (jx, jy) };
                let x = self.nose.cx + i as f64 * SYNTH_SPACING + jx;
                let y = self.nose.cy + j as f64 * SYNTH_SPACING + jy;
                let r2 = (x / self.half_width).powi(2) + (y / self.half_height).powi(2);
                if r2 <= SYNTH_EXTENT {
                    out.push((x, y));
                }
            }
        }
        out
    }

    /// Nose apex after rotating the frontal face by `pose` (degrees).
    pub fn apex(&self, pose: [f64; 3]) -> Point3<f64> {
        let p = Point3::new(self.nose.cx, self.nose.cy, self.height(self.nose.cx, self.nose.cy));
        pose_rotation(pose) * p
    }

    /// Samples the face, rotates it by `pose` about the head centre and adds
    /// isotropic Gaussian noise drawn from `noise_seed`.
    pub fn scan(&self, pose: [f64; 3], noise_sigma: f64, noise_seed: u64) -> Result<PointCloud> {
        check_pose(pose)?;
        if !(noise_sigma >= 0.0 && noise_sigma.is_finite()) {
            return Err(Error::InvalidArgument(format!(
                "noise sigma must be finite and >= 0, got {noise_sigma}"
            )));
        }
        let rot = pose_rotation(pose);
        let mut points: Vec<Point3<f64>> = self
            .sample_xy(noise_seed ^ 0x5A17_C0DE)
            .into_iter()
            .map(|(x, y)| rot * Point3::new(x, y, self.height(x, y)))
            .collect();
        if noise_sigma > 0.0 {
            let normal = Normal::new(0.0, noise_sigma).expect("sigma validated above");
            let mut rng = ChaCha8Rng::seed_from_u64(noise_seed);
            for p in &mut points {
                p.x += normal.sample(&mut rng);
                p.y += normal.sample(&mut rng);
                p.z += normal.sample(&mut rng);
            }
        }
        PointCloud::new(points)
    }
}

fn check_pose(pose: [f64; 3]) -> Result<()> {
    if pose.iter().any(|a| !(a.abs() <= 45.0)) {
        return Err(Error::InvalidArgument(format!(
            "pose angles must lie within +-45 degrees, got {pose:?}"
        )));
    }
    Ok(())
}

/// Rotation for Euler angles `(rx, ry, rz)` in degrees, applied x first: `Rz * Ry * Rx`.
pub fn pose_rotation(pose: [f64; 3]) -> Rotation3<f64> {
    Rotation3::from_euler_angles(
        pose[0].to_radians(),
        pose[1].to_radians(),
        pose[2].to_radians(),
    )
}

/// Synthetic face for `seed` seen at `pose`, with noise drawn from the same seed.
pub fn synth_face(seed: u64, pose: [f64; 3], noise_sigma: f64) -> Result<PointCloud> {
    FaceModel::from_seed(seed).scan(pose, noise_sigma, seed)
}

/// Parameters for a whole synthetic corpus.
#[derive(Clone, Debug, PartialEq)]
pub struct SynthCorpusSpec {
    pub subjects: usize,
    pub scans_per_subject: usize,
    pub seed: u64,
    pub noise_sigma: f64,
    /// Scans after the first get uniform random angles in `[-jitter, jitter]` per axis.
    pub pose_jitter_deg: f64,
}

impl Default for SynthCorpusSpec {
    fn default() -> Self {
        Self {
            subjects: 10,
            scans_per_subject: 4,
            seed: 0,
            noise_sigma: 0.5,
            pose_jitter_deg: 10.0,
        }
    }
}

#[derive(Clone, Debug)]
pub struct SynthScan {
    pub subject_id: String,
    pub scan_id: u8,
    pub pose_tag: PoseTag,
    pub pose: [f64; 3],
    pub cloud: PointCloud,
}

pub fn subject_name(index: usize) -> String {
    format!("s{:03}", index + 1)
}

fn mix_seed(parts: &[u64]) -> u64 {
    // splitmix64 over the parts
    let mut z = 0x9E37_79B9_7F4A_7C15u64;
    for &p in parts {
        z = z.wrapping_add(p).wrapping_add(0x9E37_79B9_7F4A_7C15);
        let mut x = z;
        x = (x ^ (x >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
        x = (x ^ (x >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
        z = x ^ (x >> 31);
    }
    z
}

/// Generates `subjects x scans_per_subject` scans. Scan 1 of every subject is frontal.
pub fn synth_corpus(spec: &SynthCorpusSpec) -> Result<Vec<SynthScan>> {
    if spec.subjects == 0 || spec.scans_per_subject == 0 {
        return Err(Error::InvalidArgument("subjects and scans must be >= 1".into()));
    }
    if spec.scans_per_subject > 16 {
        return Err(Error::InvalidArgument("at most 16 scans per subject".into()));
    }
    if !(spec.pose_jitter_deg >= 0.0 && spec.pose_jitter_deg <= 45.0) {
        return Err(Error::InvalidArgument("pose jitter must lie in [0, 45]".into()));
    }
    let mut out = Vec::with_capacity(spec.subjects * spec.scans_per_subject);
    for s in 0..spec.subjects {
        let model = FaceModel::from_seed(mix_seed(&[spec.seed, s as u64]));
        for k in 0..spec.scans_per_subject {
            let scan_id = (k + 1) as u8;
            let pose = if k == 0 || spec.pose_jitter_deg == 0.0 {
                [0.0; 3]
            } else {
                let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(&[spec.seed, s as u64, k as u64, 1]));
                let j = spec.pose_jitter_deg;
                [
                    rng.random_range(-j..=j),
                    rng.random_range(-j..=j),
                    rng.random_range(-j..=j),
                ]
            };
            let cloud = model.scan(pose, spec.noise_sigma, mix_seed(&[spec.seed, s as u64, k as u64, 2]))?;
            out.push(SynthScan {
                subject_id: subject_name(s),
                scan_id,
                pose_tag: PoseTag::for_scan(scan_id).expect("scan id within 1..=16"),
                pose,
                cloud,
            });
        }
    }
    Ok(out)
}
