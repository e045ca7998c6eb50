//! Run settings: defaults, then a `key = value` file, then command-line flags.

use std::path::Path;

use anyhow::{anyhow, bail, Context, Result};
use rangeface::detector::Threshold;
use rangeface::pipeline::PipelineConfig;

/// Every recognised setting with a one-line help text. Each key also exists as
/// a flag, with the dot replaced by a dash (`detector.w` -> `--detector-w`).
pub const KEYS: &[(&str, &str)] = &[
    ("grid.width", "range image width in pixels"),
    ("grid.height", "range image height in pixels"),
    ("grid.margin", "grid margin as a fraction of the reference extent"),
    ("crop.a_frac", "horizontal crop semi-axis as a fraction of the width"),
    ("crop.b_frac", "vertical crop semi-axis as a fraction of the height"),
    ("icp.max_iterations", "ICP iteration cap"),
    ("icp.convergence_eps", "ICP RMS improvement threshold, or `auto`"),
    ("icp.max_correspondence_dist", "ICP pair distance cutoff, or `none`"),
    ("detector.w", "weight of Dxy in the Hessian determinant"),
    ("detector.octaves", "number of octaves"),
    ("detector.levels", "filter sizes per octave"),
    ("detector.base_filter_size", "smallest box filter side"),
    ("detector.threshold", "response threshold, or `auto`"),
    ("detector.target_points", "point budget in auto mode"),
    ("detector.min_response", "response floor in auto mode"),
    ("descriptor.h", "Haar filter side"),
    ("descriptor.n", "samples per ring"),
    ("descriptor.radii", "three ring radii, comma separated"),
    ("descriptor.sigmas", "three smoothing sigmas, comma separated"),
    ("descriptor.scale_adaptive", "scale the sampling pattern per point"),
    ("matcher.ratio", "nearest-neighbour ratio threshold"),
    ("matcher.cross_check", "keep only mutual nearest neighbours"),
    ("synth.noise", "depth noise sigma of synthetic scans"),
    ("synth.jitter", "pose jitter of synthetic scans in degrees"),
];

pub fn flag_name(key: &str) -> String {
    key.replace(['.', '_'], "-")
}

#[derive(Clone, Debug, PartialEq)]
pub struct RunConfig {
    pub pipeline: PipelineConfig,
    pub synth_noise: f64,
    pub synth_jitter_deg: f64,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            pipeline: PipelineConfig::default(),
            synth_noise: 0.5,
            synth_jitter_deg: 10.0,
        }
    }
}

fn num<T: std::str::FromStr>(key: &str, value: &str) -> Result<T>
where
    T::Err: std::fmt::Display,
{
    value
        .parse()
        .map_err(|e| anyhow!("{key}: cannot parse {value:?}: {e}"))
}

fn triple(key: &str, value: &str) -> Result<[f64; 3]> {
    let parts: Vec<f64> = value
        .split(',')
        .map(|p| num(key, p.trim()))
        .collect::<Result<_>>()?;
    parts
        .try_into()
        .map_err(|_| anyhow!("{key}: expected three comma-separated values"))
}

fn boolean(key: &str, value: &str) -> Result<bool> {
    match value.to_ascii_lowercase().as_str() {
        "true" | "yes" | "1" | "on" => Ok(true),
        "false" | "no" | "0" | "off" => Ok(false),
        _ => bail!("{key}: expected a boolean, got {value:?}"),
    }
}

impl RunConfig {
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let p = &mut self.pipeline;
        let value = value.trim();
        match key {
            "grid.width" => p.grid_width = num(key, value)?,
            "grid.height" => p.grid_height = num(key, value)?,
            "grid.margin" => p.grid_margin = num(key, value)?,
            "crop.a_frac" => p.crop_a_frac = num(key, value)?,
            "crop.b_frac" => p.crop_b_frac = num(key, value)?,
            "icp.max_iterations" => p.icp.max_iterations = num(key, value)?,
            "icp.convergence_eps" => {
                p.icp.convergence_eps = match value {
                    "auto" => None,
                    v => Some(num(key, v)?),
                }
            }
            "icp.max_correspondence_dist" => {
                p.icp.max_correspondence_dist = match value {
                    "none" => None,
                    v => Some(num(key, v)?),
                }
            }
            "detector.w" => p.detector.w = num(key, value)?,
            "detector.octaves" => p.detector.octaves = num(key, value)?,
            "detector.levels" => p.detector.levels_per_octave = num(key, value)?,
            "detector.base_filter_size" => p.detector.base_filter_size = num(key, value)?,
            "detector.threshold" => {
                p.detector.threshold = match (value, p.detector.threshold) {
                    ("auto", Threshold::Auto { .. }) => p.detector.threshold,
                    ("auto", _) => Threshold::default(),
                    (v, _) => Threshold::Absolute(num(key, v)?),
                }
            }
            "detector.target_points" | "detector.min_response" => {
                let base = match p.detector.threshold {
                    t @ Threshold::Auto { .. } => t,
                    Threshold::Absolute(_) => Threshold::default(),
                };
                if let Threshold::Auto {
                    mut target,
                    mut min_response,
                } = base
                {
                    if key == "detector.target_points" {
                        target = num(key, value)?;
                    } else {
                        min_response = num(key, value)?;
                    }
                    p.detector.threshold = Threshold::Auto { target, min_response };
                }
            }
            "descriptor.h" => p.descriptor.haar_size = num(key, value)?,
            "descriptor.n" => p.descriptor.directions = num(key, value)?,
            "descriptor.radii" => p.descriptor.radii = triple(key, value)?,
            "descriptor.sigmas" => p.descriptor.sigmas = triple(key, value)?,
            "descriptor.scale_adaptive" => p.descriptor.scale_adaptive = boolean(key, value)?,
            "matcher.ratio" => p.matcher.ratio_threshold = num(key, value)?,
            "matcher.cross_check" => p.matcher.cross_check = boolean(key, value)?,
            "synth.noise" => self.synth_noise = num(key, value)?,
            "synth.jitter" => self.synth_jitter_deg = num(key, value)?,
            _ => bail!("unknown setting {key:?}"),
        }
        Ok(())
    }

    /// Applies every `key = value` line of `text`. Blank lines and `#` comments are skipped.
    pub fn apply_text(&mut self, text: &str, origin: &str) -> Result<()> {
        for (i, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line
                .split_once('=')
                .ok_or_else(|| anyhow!("{origin}:{}: expected `key = value`", i + 1))?;
            self.set(key.trim(), value).with_context(|| format!("{origin}:{}", i + 1))?;
        }
        Ok(())
    }

    pub fn apply_file(&mut self, path: &Path) -> Result<()> {
        let text =
            std::fs::read_to_string(path).with_context(|| format!("reading config {}", path.display()))?;
        self.apply_text(&text, &path.display().to_string())
    }

    pub fn validate(&self) -> Result<()> {
        self.pipeline.validate()?;
        if !(self.synth_noise >= 0.0 && self.synth_noise.is_finite()) {
            bail!("synth.noise must be a finite value >= 0");
        }
        if !(self.synth_jitter_deg >= 0.0 && self.synth_jitter_deg.is_finite()) {
            bail!("synth.jitter must be a finite value >= 0");
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn every_key_is_settable() {
        let samples = [
            ("grid.width", "96"),
            ("grid.height", "96"),
            ("grid.margin", "0.1"),
            ("crop.a_frac", "0.3"),
            ("crop.b_frac", "0.4"),
            ("icp.max_iterations", "20"),
            ("icp.convergence_eps", "1e-4"),
            ("icp.max_correspondence_dist", "5"),
            ("detector.w", "0.8"),
            ("detector.octaves", "2"),
            ("detector.levels", "4"),
            ("detector.base_filter_size", "9"),
            ("detector.threshold", "auto"),
            ("detector.target_points", "30"),
            ("detector.min_response", "2"),
            ("descriptor.h", "6"),
            ("descriptor.n", "12"),
            ("descriptor.radii", "4,8,12"),
            ("descriptor.sigmas", "2, 4, 6"),
            ("descriptor.scale_adaptive", "true"),
            ("matcher.ratio", "0.7"),
            ("matcher.cross_check", "yes"),
            ("synth.noise", "0.2"),
            ("synth.jitter", "5"),
        ];
        assert_eq!(samples.len(), KEYS.len());
        let mut cfg = RunConfig::default();
        for (k, v) in samples {
            cfg.set(k, v).unwrap_or_else(|e| panic!("{k}: {e}"));
        }
        cfg.validate().unwrap();
        let p = &cfg.pipeline;
        assert_eq!(p.grid_width, 96);
        assert_eq!(p.icp.convergence_eps, Some(1e-4));
        assert_eq!(p.descriptor.sigmas, [2.0, 4.0, 6.0]);
        assert_eq!(
            p.detector.threshold,
            Threshold::Auto {
                target: 30,
                min_response: 2.0
            }
        );
        assert!(p.matcher.cross_check);
        assert_eq!(cfg.synth_jitter_deg, 5.0);
    }

    #[test]
    fn file_then_override() {
        let mut cfg = RunConfig::default();
        cfg.apply_text("# comment\n\ndetector.w = 0.7  # inline\nmatcher.ratio=0.6\n", "t")
            .unwrap();
        cfg.set("detector.w", "0.95").unwrap();
        assert_eq!(cfg.pipeline.detector.w, 0.95);
        assert_eq!(cfg.pipeline.matcher.ratio_threshold, 0.6);
    }

    #[test]
    fn errors_name_the_line() {
        let mut cfg = RunConfig::default();
        let e = cfg.apply_text("grid.width = 64\nbogus.key = 1\n", "c.conf").unwrap_err();
        assert!(format!("{e:#}").contains("c.conf:2"), "{e:#}");
        assert!(cfg.apply_text("no equals sign", "c").is_err());
        assert!(cfg.set("descriptor.radii", "1,2").is_err());
    }

    #[test]
    fn validation_after_merge() {
        let mut cfg = RunConfig::default();
        cfg.set("matcher.ratio", "1.5").unwrap();
        assert!(cfg.validate().is_err());
    }

    #[test]
    fn absolute_threshold_then_auto() {
        let mut cfg = RunConfig::default();
        cfg.set("detector.threshold", "12.5").unwrap();
        assert_eq!(cfg.pipeline.detector.threshold, Threshold::Absolute(12.5));
        cfg.set("detector.threshold", "auto").unwrap();
        assert_eq!(cfg.pipeline.detector.threshold, Threshold::default());
    }

    #[test]
    fn flag_names() {
        assert_eq!(flag_name("crop.a_frac"), "crop-a-frac");
        assert_eq!(flag_name("detector.w"), "detector-w");
    }
}
