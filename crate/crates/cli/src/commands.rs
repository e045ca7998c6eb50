use std::collections::BTreeSet;
use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use log::{debug, info, warn};
use rangeface::cloud_io::{
    load_manifest, load_xyz, save_manifest, save_xyz, synth_corpus, DatasetManifest, ManifestEntry, PointCloud,
    SynthCorpusSpec,
};
use rangeface::detector::{read_points, write_points};
use rangeface::matching::{evaluate as run_protocol, format_report, FeatureSet, Protocol, ProtocolReport, ScanFeatures};
use rangeface::pipeline::extract_features;
use rangeface::range_image::{preprocess as preprocess_scan, read_range_image, write_range_image, Preprocessed};
use rangeface::suld::{read_descriptors, write_descriptors, DescriptorFile};
use rayon::prelude::*;
use serde_json::json;

use crate::config::RunConfig;

/// Base file name shared by every per-scan artifact.
pub fn scan_stem(subject: &str, scan: u8) -> String {
    format!("{subject}_{scan:02}")
}

fn create_dir(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))
}

pub fn synth(cfg: &RunConfig, subjects: usize, scans: usize, seed: u64, out: &Path) -> Result<()> {
    create_dir(out)?;
    let spec = SynthCorpusSpec {
        subjects,
        scans_per_subject: scans,
        seed,
        noise_sigma: cfg.synth_noise,
        pose_jitter_deg: cfg.synth_jitter_deg,
    };
    let corpus = synth_corpus(&spec)?;
    corpus.par_iter().try_for_each(|s| {
        let path = out.join(format!("{}.xyz", scan_stem(&s.subject_id, s.scan_id)));
        save_xyz(&s.cloud, &path).with_context(|| format!("writing {}", path.display()))
    })?;
    let entries = corpus
        .iter()
        .map(|s| ManifestEntry {
            subject_id: s.subject_id.clone(),
            scan_id: s.scan_id,
            pose_tag: s.pose_tag,
            path: PathBuf::from(format!("{}.xyz", scan_stem(&s.subject_id, s.scan_id))),
        })
        .collect();
    let manifest_path = out.join("manifest.tsv");
    save_manifest(&DatasetManifest::new(entries)?, &manifest_path)?;
    println!("wrote {} scans and {}", corpus.len(), manifest_path.display());
    Ok(())
}

/// Registers every scan onto its subject's lowest-numbered scan and writes the
/// cropped range images as `<subject>_<scan>.pgm` plus sidecar.
pub fn preprocess(cfg: &RunConfig, manifest_path: &Path, out: &Path) -> Result<()> {
    let manifest = load_manifest(manifest_path)?;
    create_dir(out)?;
    let entries = manifest.entries();

    let clouds: Vec<PointCloud> = entries
        .par_iter()
        .map(|e| load_xyz(&e.path).with_context(|| scan_label(e)))
        .collect::<Result<_>>()?;

    // reference index and grid per subject
    let p = &cfg.pipeline;
    let mut refs = Vec::with_capacity(entries.len());
    for subject in manifest.subjects() {
        let r = (0..entries.len())
            .filter(|&i| entries[i].subject_id == subject)
            .min_by_key(|&i| entries[i].scan_id)
            .expect("subject has at least one scan");
        let grid = p
            .fit_grid(&clouds[r])
            .with_context(|| format!("fitting grid to {}", scan_label(&entries[r])))?;
        refs.push((subject.to_string(), r, grid));
    }

    let results: Vec<Result<Preprocessed>> = (0..entries.len())
        .into_par_iter()
        .map(|i| {
            let e = &entries[i];
            let (_, r, grid) = refs.iter().find(|(s, _, _)| *s == e.subject_id).expect("subject indexed");
            let reference = (*r != i).then(|| &clouds[*r]);
            let pre = preprocess_scan(&clouds[i], reference, grid, p.crop_axes(), &p.icp)
                .with_context(|| scan_label(e))?;
            let pgm = out.join(format!("{}.pgm", scan_stem(&e.subject_id, e.scan_id)));
            write_range_image(&pre.image, &pgm).with_context(|| format!("writing {}", pgm.display()))?;
            debug!("{} -> {}", e.path.display(), pgm.display());
            Ok(pre)
        })
        .collect();

    println!("subject\tscan\ticp_iterations\trms\tnose_u\tnose_v");
    for (e, r) in entries.iter().zip(results) {
        let pre = r?;
        let (iters, rms) = match &pre.registration {
            Some(reg) => (reg.iterations.to_string(), format!("{:.4}", reg.final_rms)),
            None => ("-".to_string(), "-".to_string()),
        };
        println!(
            "{}\t{}\t{}\t{}\t{:.2}\t{:.2}",
            e.subject_id, e.scan_id, iters, rms, pre.nose_tip.u, pre.nose_tip.v
        );
    }
    Ok(())
}

fn scan_label(e: &ManifestEntry) -> String {
    format!("subject {} scan {} ({})", e.subject_id, e.scan_id, e.path.display())
}

fn pgm_files(dir: &Path) -> Result<Vec<PathBuf>> {
    let mut files = Vec::new();
    for entry in fs::read_dir(dir).with_context(|| format!("reading {}", dir.display()))? {
        let path = entry?.path();
        if path.is_file() && path.extension().is_some_and(|x| x == "pgm") {
            files.push(path);
        }
    }
    files.sort();
    Ok(files)
}

struct Described {
    stem: String,
    points: usize,
    descriptors: usize,
    skipped: usize,
}

/// Writes `<stem>.suld` and `<stem>.points` for every `<stem>.pgm` in `input`.
pub fn describe(cfg: &RunConfig, input: &Path, out: &Path) -> Result<()> {
    let files = pgm_files(input)?;
    if files.is_empty() {
        warn!("no .pgm range images in {}", input.display());
        return Ok(());
    }
    create_dir(out)?;
    let p = &cfg.pipeline;
    let done: Vec<Result<Described>> = files
        .par_iter()
        .map(|pgm| {
            let stem = pgm.file_stem().expect("has extension").to_string_lossy().into_owned();
            let img = read_range_image(pgm)?;
            let ex = extract_features(&img, p).with_context(|| format!("describing {}", pgm.display()))?;
            let file = DescriptorFile::new(&p.descriptor, ex.descriptors);
            write_descriptors(&file, &out.join(format!("{stem}.suld")))?;
            write_points(&ex.points, &out.join(format!("{stem}.points")))?;
            Ok(Described {
                stem,
                points: ex.points.len(),
                descriptors: file.descriptors.len(),
                skipped: ex.skipped,
            })
        })
        .collect();

    println!("image\tpoints\tdescriptors\tskipped");
    for d in done {
        let d = d?;
        if d.skipped > 0 {
            info!("{}: {} points too close to the border", d.stem, d.skipped);
        }
        println!("{}\t{}\t{}\t{}", d.stem, d.points, d.descriptors, d.skipped);
    }
    Ok(())
}

pub fn match_pair(cfg: &RunConfig, a: &Path, b: &Path) -> Result<()> {
    let fa = read_descriptors(a)?;
    let fb = read_descriptors(b)?;
    if fa.directions != fb.directions {
        bail!(
            "descriptor layouts differ: {} has {} directions, {} has {}",
            a.display(),
            fa.directions,
            b.display(),
            fb.directions
        );
    }
    let n = rangeface::matching::similarity(&fa.descriptors, &fb.descriptors, &cfg.pipeline.matcher);
    println!("{n}");
    Ok(())
}

fn needed_scans(protocols: &[Protocol]) -> Option<BTreeSet<u8>> {
    let mut out = BTreeSet::new();
    for p in protocols {
        match p {
            Protocol::Split { train, test, .. } => out.extend(train.iter().chain(test)),
            Protocol::LeaveOneOut | Protocol::Sanity => return None,
        }
    }
    Some(out)
}

pub fn evaluate(
    cfg: &RunConfig,
    manifest_path: &Path,
    dir: &Path,
    protocols: &[Protocol],
    as_json: bool,
) -> Result<()> {
    let manifest = load_manifest(manifest_path)?;
    let needed = needed_scans(protocols);
    let wanted: Vec<&ManifestEntry> = manifest
        .entries()
        .iter()
        .filter(|e| needed.as_ref().is_none_or(|s| s.contains(&e.scan_id)))
        .collect();

    let loaded: Vec<ScanFeatures> = wanted
        .par_iter()
        .map(|e| {
            let path = dir.join(format!("{}.suld", scan_stem(&e.subject_id, e.scan_id)));
            if !path.is_file() {
                bail!("missing descriptors for {}: {}", scan_label(e), path.display());
            }
            let file = read_descriptors(&path)?;
            let descriptors: Vec<Vec<f64>> = file.descriptors.into_iter().map(|d| d.values).collect();
            // point counts come from the sibling .points file when describe left one
            let points = path.with_extension("points");
            let detected = if points.is_file() {
                read_points(&points)?.len()
            } else {
                descriptors.len()
            };
            Ok(ScanFeatures {
                skipped: detected.saturating_sub(descriptors.len()),
                detected,
                descriptors,
            })
        })
        .collect::<Result<_>>()?;
    let mut features = FeatureSet::new();
    for (e, f) in wanted.iter().zip(loaded) {
        features.insert(&e.subject_id, e.scan_id, f);
    }

    let reports: Vec<ProtocolReport> = protocols
        .iter()
        .map(|p| run_protocol(&features, p, &cfg.pipeline.matcher).with_context(|| format!("protocol {p}")))
        .collect::<Result<_>>()?;

    if as_json {
        println!("{}", serde_json::to_string_pretty(&report_json(&reports))?);
    } else {
        print!("{}", format_report(&reports));
    }
    Ok(())
}

fn round2(x: f64) -> f64 {
    (x * 100.0).round() / 100.0
}

fn report_json(reports: &[ProtocolReport]) -> serde_json::Value {
    reports
        .iter()
        .map(|r| {
            json!({
                "protocol": r.name,
                "subjects": r.subjects,
                "probes": r.probes,
                "correct": r.correct,
                "accuracy": round2(r.accuracy),
                "mean_points": round2(r.mean_points),
                "zero_confidence": r.zero_confidence,
            })
        })
        .collect()
}
