//! End-to-end glue: point clouds to range images to per-scan features.

use std::collections::BTreeMap;

use crate::cloud_io::{load_xyz, DatasetManifest, PointCloud};
use crate::detector::{detect_significant_points, DetectorConfig, SignificantPoint};
use crate::integral::IntegralImage;
use crate::matching::{FeatureSet, MatcherConfig, ScanFeatures};
use crate::range_image::{preprocess, CropAxes, GridSpec, Preprocessed, RangeImage};
use crate::registration::IcpParams;
use crate::suld::{describe_all, DescriptorConfig, SuldDescriptor};
use crate::{Error, Result};

#[derive(Clone, Debug, PartialEq)]
pub struct PipelineConfig {
    pub grid_width: usize,
    pub grid_height: usize,
    /// Fraction of the reference extent added on each side of the grid.
    pub grid_margin: f64,
    /// Crop semi-axes as fractions of the image width and height.
    pub crop_a_frac: f64,
    pub crop_b_frac: f64,
    pub icp: IcpParams,
    pub detector: DetectorConfig,
    pub descriptor: DescriptorConfig,
    pub matcher: MatcherConfig,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        Self {
            grid_width: 128,
            grid_height: 128,
            grid_margin: 0.05,
            crop_a_frac: 0.35,
            crop_b_frac: 0.45,
            icp: IcpParams::default(),
            detector: DetectorConfig::default(),
            descriptor: DescriptorConfig::default(),
            matcher: MatcherConfig::default(),
        }
    }
}

impl PipelineConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.grid_margin >= 0.0 && self.grid_margin < 1.0) {
            return Err(Error::InvalidArgument("grid margin must lie in [0, 1)".into()));
        }
        for f in [self.crop_a_frac, self.crop_b_frac] {
            if !(f > 0.0 && f.is_finite()) {
                return Err(Error::InvalidArgument("crop fractions must be positive".into()));
            }
        }
        self.icp.validate()?;
        self.detector.validate()?;
        self.descriptor.validate()?;
        self.matcher.validate()
    }

    pub fn crop_axes(&self) -> CropAxes {
        CropAxes {
            a: self.crop_a_frac * self.grid_width as f64,
            b: self.crop_b_frac * self.grid_height as f64,
        }
    }

    pub fn fit_grid(&self, reference: &PointCloud) -> Result<GridSpec> {
        GridSpec::fit(reference, self.grid_width, self.grid_height, self.grid_margin)
    }
}

/// Detected points and their descriptors for one range image.
#[derive(Clone, Debug)]
pub struct Extracted {
    pub points: Vec<SignificantPoint>,
    pub descriptors: Vec<SuldDescriptor>,
    pub skipped: usize,
}

impl Extracted {
    pub fn features(&self) -> ScanFeatures {
        ScanFeatures {
            descriptors: self.descriptors.iter().map(|d| d.values.clone()).collect(),
            detected: self.points.len(),
            skipped: self.skipped,
        }
    }
}

pub fn extract_features(image: &RangeImage, cfg: &PipelineConfig) -> Result<Extracted> {
    let ii = IntegralImage::new(&image.depth);
    let points = detect_significant_points(&ii, &cfg.detector)?;
    let described = describe_all(&image.depth, &points, &cfg.descriptor)?;
    Ok(Extracted {
        points,
        descriptors: described.descriptors,
        skipped: described.skipped,
    })
}

/// Preprocesses the scans of one subject. The lowest scan id is the
/// reference: the grid is fitted to it and the others are registered onto it.
pub fn preprocess_subject(scans: &[(u8, &PointCloud)], cfg: &PipelineConfig) -> Result<Vec<(u8, Preprocessed)>> {
    let Some(&(_, reference)) = scans.iter().min_by_key(|(id, _)| *id) else {
        return Ok(Vec::new());
    };
    let ref_id = scans.iter().map(|(id, _)| *id).min().unwrap_or_default();
    let spec = cfg.fit_grid(reference)?;
    let crop = cfg.crop_axes();
    scans
        .iter()
        .map(|&(id, cloud)| {
            let target = (id != ref_id).then_some(reference);
            preprocess(cloud, target, &spec, crop, &cfg.icp).map(|p| (id, p))
        })
        .collect()
}

/// Runs the whole chain on in-memory scans given as `(subject, scan, cloud)`.
pub fn build_features(scans: &[(String, u8, PointCloud)], cfg: &PipelineConfig) -> Result<FeatureSet> {
    cfg.validate()?;
    let mut by_subject: Vec<(&str, Vec<(u8, &PointCloud)>)> = Vec::new();
    for (subject, scan, cloud) in scans {
        match by_subject.iter_mut().find(|(s, _)| s == subject) {
            Some((_, v)) => v.push((*scan, cloud)),
            None => by_subject.push((subject, vec![(*scan, cloud)])),
        }
    }
    let mut out = FeatureSet::new();
    for (subject, list) in by_subject {
        for (scan, pre) in preprocess_subject(&list, cfg)? {
            out.insert(subject, scan, extract_features(&pre.image, cfg)?.features());
        }
    }
    Ok(out)
}

/// Loads every cloud listed in `manifest` and runs [`build_features`].
pub fn build_features_from_manifest(manifest: &DatasetManifest, cfg: &PipelineConfig) -> Result<FeatureSet> {
    let mut scans = Vec::with_capacity(manifest.len());
    for e in manifest.entries() {
        scans.push((e.subject_id.clone(), e.scan_id, load_xyz(&e.path)?));
    }
    build_features(&scans, cfg)
}

/// Summary counts per subject, useful for logging.
pub fn points_per_subject(features: &FeatureSet) -> BTreeMap<String, usize> {
    let mut out = BTreeMap::new();
    for (s, _, f) in features.iter() {
        *out.entry(s.to_string()).or_default() += f.detected;
    }
    out
}
