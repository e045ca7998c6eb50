//! Rigid point-to-point ICP.

use nalgebra::{Matrix3, Point3, Rotation3, SymmetricEigen, Vector3};

use crate::cloud_io::PointCloud;
use crate::kdtree::KdTree;
use crate::{Error, Result};

/// `p -> rotation * p + translation`. The rotation is proper orthonormal.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct RigidTransform {
    pub rotation: Matrix3<f64>,
    pub translation: Vector3<f64>,
}

impl RigidTransform {
    pub fn identity() -> Self {
        Self {
            rotation: Matrix3::identity(),
            translation: Vector3::zeros(),
        }
    }

    /// Fails unless `rotation` is orthonormal with determinant +1 (within 1e-9).
    pub fn new(rotation: Matrix3<f64>, translation: Vector3<f64>) -> Result<Self> {
        let t = Self {
            rotation,
            translation,
        };
        if !t.is_valid() {
            return Err(Error::InvalidArgument("rotation is not a proper rotation".into()));
        }
        Ok(t)
    }

    pub fn from_rotation(rotation: Rotation3<f64>, translation: Vector3<f64>) -> Self {
        Self {
            rotation: *rotation.matrix(),
            translation,
        }
    }

    pub fn is_valid(&self) -> bool {
        let orth = (self.rotation.transpose() * self.rotation - Matrix3::identity()).amax();
        orth <= 1e-9 && (self.rotation.determinant() - 1.0).abs() <= 1e-9
    }

    #[inline]
    pub fn apply(&self, p: &Point3<f64>) -> Point3<f64> {
        Point3::from(self.rotation * p.coords + self.translation)
    }

    pub fn inverse(&self) -> Self {
        let rt = self.rotation.transpose();
        Self {
            rotation: rt,
            translation: -(rt * self.translation),
        }
    }

    /// `self ∘ first`: applies `first`, then `self`.
    pub fn after(&self, first: &RigidTransform) -> Self {
        Self {
            rotation: self.rotation * first.rotation,
            translation: self.rotation * first.translation + self.translation,
        }
    }

    /// Rotation angle in degrees.
    pub fn angle_deg(&self) -> f64 {
        let c = ((self.rotation.trace() - 1.0) / 2.0).clamp(-1.0, 1.0);
        c.acos().to_degrees()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct IcpParams {
    pub max_iterations: usize,
    /// Stop when the RMS improves by less than this. `None` means
    /// `1e-6 x` the target's bounding-box diagonal.
    pub convergence_eps: Option<f64>,
    /// Correspondences farther apart than this are ignored. `None` keeps all.
    pub max_correspondence_dist: Option<f64>,
}

impl Default for IcpParams {
    fn default() -> Self {
        Self {
            max_iterations: 50,
            convergence_eps: None,
            max_correspondence_dist: None,
        }
    }
}

impl IcpParams {
    pub fn validate(&self) -> Result<()> {
        if self.max_iterations == 0 {
            return Err(Error::InvalidArgument("icp max_iterations must be positive".into()));
        }
        if let Some(eps) = self.convergence_eps {
            if !(eps >= 0.0) {
                return Err(Error::InvalidArgument("icp convergence_eps must be >= 0".into()));
            }
        }
        if let Some(d) = self.max_correspondence_dist {
            if !(d > 0.0) {
                return Err(Error::InvalidArgument(
                    "icp max_correspondence_dist must be positive".into(),
                ));
            }
        }
        Ok(())
    }
}

#[derive(Clone, Debug)]
pub struct IcpResult {
    /// Maps the source onto the target.
    pub transform: RigidTransform,
    pub final_rms: f64,
    /// Number of accepted update steps.
    pub iterations: usize,
    /// RMS before the first step and after every accepted step; non-increasing.
    pub rms_history: Vec<f64>,
}

pub fn apply_transform(cloud: &PointCloud, t: &RigidTransform) -> PointCloud {
    let pts = cloud.points().iter().map(|p| t.apply(p)).collect();
    PointCloud::new(pts).expect("a rigid map keeps the cloud non-empty and finite")
}

struct Correspondences {
    pairs: Vec<(usize, usize)>,
    rms: f64,
}

fn correspond(
    tree: &KdTree,
    current: &[Point3<f64>],
    max_dist: Option<f64>,
) -> Result<Correspondences> {
    let max_sq = max_dist.map_or(f64::INFINITY, |d| d * d);
    let mut pairs = Vec::with_capacity(current.len());
    let mut sum = 0.0;
    for (i, p) in current.iter().enumerate() {
        let (j, d2) = tree.nearest(p);
        if d2 <= max_sq {
            pairs.push((i, j));
            sum += d2;
        }
    }
    if pairs.is_empty() {
        return Err(Error::Degenerate(
            "no correspondences within max_correspondence_dist".into(),
        ));
    }
    Ok(Correspondences {
        rms: (sum / pairs.len() as f64).sqrt(),
        pairs,
    })
}

/// Least-squares rigid fit of `src[i] -> dst[j]` over the given pairs (SVD / Kabsch).
pub(crate) fn fit_rigid(
    src: &[Point3<f64>],
    dst: &[Point3<f64>],
    pairs: &[(usize, usize)],
) -> RigidTransform {
    let n = pairs.len() as f64;
    let mut cs = Vector3::zeros();
    let mut cd = Vector3::zeros();
    for &(i, j) in pairs {
        cs += src[i].coords;
        cd += dst[j].coords;
    }
    cs /= n;
    cd /= n;
    let mut h = Matrix3::zeros();
    for &(i, j) in pairs {
        h += (src[i].coords - cs) * (dst[j].coords - cd).transpose();
    }
    let svd = h.svd(true, true);
    let u = svd.u.expect("requested U");
    let v = svd.v_t.expect("requested V^T").transpose();
    let mut d = Matrix3::identity();
    if (v * u.transpose()).determinant() < 0.0 {
        let smallest = svd.singular_values.imin();
        d[(smallest, smallest)] = -1.0;
    }
    let rotation = v * d * u.transpose();
    RigidTransform {
        rotation,
        translation: cd - rotation * cs,
    }
}

fn check_not_degenerate(cloud: &PointCloud) -> Result<()> {
    let pts = cloud.points();
    let n = pts.len() as f64;
    let c = pts.iter().fold(Vector3::zeros(), |a, p| a + p.coords) / n;
    let cov = pts.iter().fold(Matrix3::zeros(), |a, p| {
        let d = p.coords - c;
        a + d * d.transpose()
    }) / n;
    let mut ev: Vec<f64> = SymmetricEigen::new(cov).eigenvalues.iter().copied().collect();
    ev.sort_by(|a, b| b.total_cmp(a));
    if ev[0] <= 0.0 || ev[1] <= 1e-12 * ev[0] {
        return Err(Error::Degenerate(
            "source points are coincident or collinear; rotation is not determined".into(),
        ));
    }
    Ok(())
}

/// Aligns `source` to `target`, starting from the identity.
///
/// Each step pairs every transformed source point with its nearest target
/// point and applies the closed-form rigid fit. A step that would raise the
/// RMS is rejected, so `rms_history` never increases.
pub fn icp_align(source: &PointCloud, target: &PointCloud, params: &IcpParams) -> Result<IcpResult> {
    params.validate()?;
    check_not_degenerate(source)?;
    let eps = params
        .convergence_eps
        .unwrap_or_else(|| 1e-6 * target.bbox_diagonal());
    let tree = KdTree::new(target.points());
    let dst = target.points();

    let mut transform = RigidTransform::identity();
    let mut current: Vec<Point3<f64>> = source.points().to_vec();
    let mut corr = correspond(&tree, &current, params.max_correspondence_dist)?;
    let mut history = vec![corr.rms];
    let mut iterations = 0;

    while iterations < params.max_iterations && corr.rms > 0.0 {
        let step = fit_rigid(&current, dst, &corr.pairs);
        let moved: Vec<Point3<f64>> = current.iter().map(|p| step.apply(p)).collect();
        let next = correspond(&tree, &moved, params.max_correspondence_dist)?;
        if next.rms > corr.rms {
            break;
        }
        let improvement = corr.rms - next.rms;
        transform = step.after(&transform);
        current = moved;
        corr = next;
        history.push(corr.rms);
        iterations += 1;
        if improvement < eps {
            break;
        }
    }

    Ok(IcpResult {
        transform,
        final_rms: corr.rms,
        iterations,
        rms_history: history,
    })
}
