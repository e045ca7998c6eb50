//! Acceptance suite. Prints one PASS/FAIL line per criterion and exits
//! nonzero if any criterion fails.

use std::panic::{catch_unwind, AssertUnwindSafe};
use std::process::ExitCode;
use std::time::{Duration, Instant};

use nalgebra::{Rotation3, Unit, Vector3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use rangeface::cloud_io::{synth_corpus, synth_face, SynthCorpusSpec};
use rangeface::detector::{
    box_derivatives, detect_significant_points, hessian_response_map, DetectorConfig, BASE_SIGMA,
};
use rangeface::integral::{IntegralImage, Rect};
use rangeface::matching::{evaluate, format_report, match_descriptors, FeatureSet, Match, MatcherConfig, Protocol};
use rangeface::pipeline::{extract_features, preprocess_subject, PipelineConfig};
use rangeface::registration::{apply_transform, icp_align, IcpParams, RigidTransform};
use rangeface::suld::{describe_all, gaussian_cascade, DescriptorConfig, DescriptorFile, ResponseMaps};
use rangeface::Grid;

type Outcome = Result<String, String>;

macro_rules! ensure {
    ($cond:expr, $($msg:tt)+) => {
        if !$cond {
            return Err(format!($($msg)+));
        }
    };
}

fn random_int_image(rng: &mut ChaCha8Rng, w: usize, h: usize) -> Grid {
    Grid::from_fn(w, h, |_, _| rng.random_range(0..=255) as f64)
}

fn within(limit: Duration, took: Duration) -> Result<(), String> {
    if took > limit {
        Err(format!("took {took:?}, limit {limit:?}"))
    } else {
        Ok(())
    }
}

fn ac1_integral_oracle() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(101);
    let images: Vec<Grid> = (0..100).map(|_| random_int_image(&mut rng, 64, 64)).collect();
    let rects: Vec<Vec<Rect>> = images
        .iter()
        .map(|_| {
            (0..1000)
                .map(|_| {
                    let (a, b) = (rng.random_range(-8..72), rng.random_range(-8..72));
                    let (c, d) = (rng.random_range(-8..72), rng.random_range(-8..72));
                    Rect::new(a.min(c), b.min(d), a.max(c), b.max(d))
                })
                .collect()
        })
        .collect();

    let start = Instant::now();
    let tables: Vec<IntegralImage> = images.iter().map(IntegralImage::new).collect();
    let sums: Vec<Vec<f64>> = tables
        .iter()
        .zip(&rects)
        .map(|(ii, rs)| rs.iter().map(|&r| ii.rect_sum(r)).collect())
        .collect();
    let took = start.elapsed();

    for (k, (img, ii)) in images.iter().zip(&tables).enumerate() {
        for y in 0..=64 {
            for x in 0..=64 {
                let mut s = 0.0;
                for j in 0..y {
                    for i in 0..x {
                        s += img.get(i, j);
                    }
                }
                ensure!(ii.at(x, y) == s, "image {k}: table ({x},{y}) {} != {s}", ii.at(x, y));
            }
        }
        for (r, &got) in rects[k].iter().zip(&sums[k]) {
            let mut s = 0.0;
            for j in r.top.max(0)..=r.bottom.min(63) {
                for i in r.left.max(0)..=r.right.min(63) {
                    s += img.get(i as usize, j as usize);
                }
            }
            ensure!(got == s, "image {k}: rect {r:?} {got} != {s}");
        }
    }
    within(Duration::from_secs(2), took)?;
    Ok(format!("100 images, 100000 rects, {took:.2?}"))
}

/// 9x9 second-derivative masks written out cell by cell.
fn masks_9x9() -> ([[i32; 9]; 9], [[i32; 9]; 9], [[i32; 9]; 9]) {
    let mut dyy = [[0; 9]; 9];
    for (r, row) in dyy.iter_mut().enumerate() {
        let wt = match r {
            0..=2 => 1,
            3..=5 => -2,
            _ => 1,
        };
        for cell in &mut row[2..=6] {
            *cell = wt;
        }
    }
    let mut dxx = [[0; 9]; 9];
    for r in 0..9 {
        for c in 0..9 {
            dxx[r][c] = dyy[c][r];
        }
    }
    // top-left and bottom-right quadrants negative, the other two positive
    let mut dxy = [[0; 9]; 9];
    for r in 1..=3 {
        for c in 1..=3 {
            dxy[r][c] = -1;
            dxy[r + 4][c + 4] = -1;
            dxy[r][c + 4] = 1;
            dxy[r + 4][c] = 1;
        }
    }
    (dxx, dyy, dxy)
}

fn convolve_mask(img: &Grid, mask: &[[i32; 9]; 9], x: usize, y: usize) -> f64 {
    let mut s = 0.0;
    for (r, row) in mask.iter().enumerate() {
        for (c, &m) in row.iter().enumerate() {
            s += m as f64 * img.get(x + c - 4, y + r - 4);
        }
    }
    s / 81.0
}

fn ac2_box_hessian_oracle() -> Outcome {
    let (mx, my, mxy) = masks_9x9();
    let mut rng = ChaCha8Rng::seed_from_u64(202);
    let images: Vec<Grid> = (0..20).map(|_| random_int_image(&mut rng, 64, 64)).collect();
    let mut took = Duration::ZERO;
    for (k, img) in images.iter().enumerate() {
        let start = Instant::now();
        let ii = IntegralImage::new(img);
        let map = hessian_response_map(&ii, 9, 0.9).map_err(|e| e.to_string())?;
        let derivs: Vec<(f64, f64, f64)> = (4..60)
            .flat_map(|y| (4..60).map(move |x| (x, y)))
            .map(|(x, y)| box_derivatives(&ii, x, y, 9))
            .collect();
        took += start.elapsed();
        for (idx, (y, x)) in (4..60usize).flat_map(|y| (4..60usize).map(move |x| (y, x))).enumerate() {
            let (dxx, dyy, dxy) = derivs[idx];
            let (ox, oy, oxy) = (
                convolve_mask(img, &mx, x, y),
                convolve_mask(img, &my, x, y),
                convolve_mask(img, &mxy, x, y),
            );
            ensure!(dxx == ox && dyy == oy && dxy == oxy, "image {k} at ({x},{y}): box filters differ");
            let det = ox * oy - (0.9 * oxy) * (0.9 * oxy);
            let got = map.values.get(x, y);
            ensure!(
                (got - det).abs() <= 1e-9 * det.abs().max(1.0),
                "image {k} at ({x},{y}): det {got} vs {det}"
            );
        }
    }
    within(Duration::from_secs(5), took)?;
    Ok(format!("20 images, {took:.2?}"))
}

/// Single 2D convolution, kernel cut at four standard deviations like the library's.
fn direct_blur(img: &Grid, sigma: f64) -> Grid {
    let r = (4.0 * sigma).ceil() as i64;
    let weights: Vec<f64> = (-r..=r).map(|i| (-((i * i) as f64) / (2.0 * sigma * sigma)).exp()).collect();
    let total: f64 = weights.iter().sum();
    let (w, h) = (img.width() as i64, img.height() as i64);
    // half-sample symmetric extension
    let fold = |i: i64, n: i64| {
        let m = i.rem_euclid(2 * n);
        if m < n {
            m
        } else {
            2 * n - 1 - m
        }
    };
    Grid::from_fn(img.width(), img.height(), |x, y| {
        let mut s = 0.0;
        for (a, wa) in weights.iter().enumerate() {
            for (b, wb) in weights.iter().enumerate() {
                let xx = fold(x as i64 + a as i64 - r, w);
                let yy = fold(y as i64 + b as i64 - r, h);
                s += wa * wb * img.get(xx as usize, yy as usize);
            }
        }
        s / (total * total)
    })
}

fn ac3_gaussian_semigroup() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(303);
    let mut worst: f64 = 0.0;
    for k in 0..10 {
        let g = Grid::from_fn(64, 64, |_, _| rng.random_range(-100.0..100.0));
        let maps = ResponseMaps {
            gx: g.clone(),
            gy: g.clone(),
            gx_abs: g.map(f64::abs),
            gy_abs: g.map(f64::abs),
        };
        let stack = gaussian_cascade(&maps, &[2.5, 5.0]).map_err(|e| e.to_string())?;
        for (cascaded, raw) in [(&stack.levels[1].gx, &g), (&stack.levels[1].gx_abs, &g.map(f64::abs))] {
            let direct = direct_blur(raw, 5.0);
            let peak = direct.max_abs();
            let err = cascaded
                .data()
                .iter()
                .zip(direct.data())
                .map(|(a, b)| (a - b).abs())
                .fold(0.0, f64::max);
            worst = worst.max(err / peak);
            ensure!(err < 1e-3 * peak, "map {k}: error {err} vs max {peak}");
        }
    }
    Ok(format!("worst relative error {worst:.2e}"))
}

fn blob(size: usize, cx: f64, cy: f64, sigma: f64, amp: f64) -> Grid {
    Grid::from_fn(size, size, |x, y| {
        let d2 = (x as f64 - cx).powi(2) + (y as f64 - cy).powi(2);
        amp * (-d2 / (2.0 * sigma * sigma)).exp()
    })
}

fn ac4_blob_localization() -> Outcome {
    // the 99-pixel filter of a third octave does not fit a 64-pixel image
    let cfg = DetectorConfig {
        octaves: 2,
        ..Default::default()
    };
    let img = blob(64, 32.0, 32.0, 2.4, 100.0);
    let pts = detect_significant_points(&IntegralImage::new(&img), &cfg).map_err(|e| e.to_string())?;
    ensure!(pts.len() == 1, "expected one point, got {}: {pts:?}", pts.len());
    let p = &pts[0];
    let d = ((p.location.u - 32.0).powi(2) + (p.location.v - 32.0).powi(2)).sqrt();
    ensure!(d <= 1.0, "point {:?} is {d:.3} px from the centre", p.location);
    // scale-space levels within an octave are 6 px of filter apart
    let level_spacing = BASE_SIGMA * 6.0 / 9.0;
    ensure!(
        (p.scale - 2.4).abs() <= level_spacing,
        "scale {} vs blob sigma 2.4 (one level = {level_spacing})",
        p.scale
    );
    Ok(format!("offset {d:.3} px, scale {:.3}", p.scale))
}

fn ac5_descriptor_contract() -> Outcome {
    let cfg = PipelineConfig::default();
    let cloud = synth_face(11, [0.0; 3], 0.5).map_err(|e| e.to_string())?;
    let pre = preprocess_subject(&[(1, &cloud)], &cfg).map_err(|e| e.to_string())?;
    let img = &pre[0].1.image.depth;
    let pts = detect_significant_points(&IntegralImage::new(img), &cfg.detector).map_err(|e| e.to_string())?;
    let base = describe_all(img, &pts, &DescriptorConfig::default()).map_err(|e| e.to_string())?;
    ensure!(!base.descriptors.is_empty(), "no descriptors");
    for d in &base.descriptors {
        ensure!(d.values.len() == 100, "length {}", d.values.len());
        for sub in d.values.chunks(4) {
            let n = sub.iter().map(|v| v * v).sum::<f64>().sqrt();
            ensure!(n == 0.0 || (n - 1.0).abs() <= 1e-9, "subvector norm {n}");
        }
    }
    let mut worst: f64 = 0.0;
    for (what, changed) in [("offset", img.map(|v| v + 50.0)), ("gain", img.map(|v| v * 2.0))] {
        let other = describe_all(&changed, &pts, &DescriptorConfig::default()).map_err(|e| e.to_string())?;
        ensure!(other.descriptors.len() == base.descriptors.len(), "{what}: count changed");
        for (a, b) in base.descriptors.iter().zip(&other.descriptors) {
            for (x, y) in a.values.iter().zip(&b.values) {
                worst = worst.max((x - y).abs());
            }
        }
        ensure!(worst <= 1e-6, "{what}: max deviation {worst}");
    }
    Ok(format!("{} descriptors, max deviation {worst:.1e}", base.descriptors.len()))
}

fn oracle_matches(probe: &[Vec<f64>], gallery: &[Vec<f64>], ratio: f64) -> Vec<Match> {
    let mut out = Vec::new();
    if gallery.len() < 2 {
        return out;
    }
    for (i, p) in probe.iter().enumerate() {
        let mut dist: Vec<(usize, f64)> = gallery
            .iter()
            .enumerate()
            .map(|(j, g)| (j, p.iter().zip(g).map(|(a, b)| (a - b) * (a - b)).sum::<f64>().sqrt()))
            .collect();
        dist.sort_by(|a, b| a.1.total_cmp(&b.1));
        let (j, best) = dist[0];
        let second = dist[1].1;
        if second > 0.0 && best / second < ratio {
            out.push(Match {
                probe_index: i,
                gallery_index: j,
                best_dist: best,
                second_dist: second,
            });
        }
    }
    out
}

fn ac6_matcher_oracle() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(606);
    let mut total = 0;
    for trial in 0..40 {
        let n = rng.random_range(0..=200);
        let m = rng.random_range(0..=200);
        let dim = if trial % 2 == 0 { 100 } else { 8 };
        let mut gallery: Vec<Vec<f64>> = (0..m)
            .map(|_| (0..dim).map(|_| rng.random_range(-1.0..1.0)).collect())
            .collect();
        // some duplicated rows to exercise distance ties
        if m > 4 && trial % 3 == 0 {
            gallery[1] = gallery[0].clone();
            gallery[3] = gallery[2].clone();
        }
        let probe: Vec<Vec<f64>> = (0..n)
            .map(|k| {
                if k % 5 == 0 && !gallery.is_empty() {
                    let g = &gallery[k % gallery.len()];
                    g.iter().map(|v| v + rng.random_range(-0.05..0.05)).collect()
                } else {
                    (0..dim).map(|_| rng.random_range(-1.0..1.0)).collect()
                }
            })
            .collect();
        let mut previous: Option<Vec<Match>> = None;
        for ratio in [0.6, 0.7, 0.8, 0.9] {
            let cfg = MatcherConfig {
                ratio_threshold: ratio,
                cross_check: false,
            };
            let got = match_descriptors(&probe, &gallery, &cfg);
            let want = oracle_matches(&probe, &gallery, ratio);
            ensure!(got == want, "trial {trial}, ratio {ratio}: {} vs {} matches", got.len(), want.len());
            if let Some(prev) = &previous {
                ensure!(
                    prev.iter().all(|p| got.contains(p)),
                    "trial {trial}: raising the ratio to {ratio} lost a match"
                );
            }
            total += got.len();
            previous = Some(got);
        }
    }
    Ok(format!("40 random sets, {total} matches compared"))
}

fn ac7_icp_recovery() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(707);
    let (mut worst_angle, mut worst_t): (f64, f64) = (0.0, 0.0);
    for run in 0..20u64 {
        let target = synth_face(run, [0.0; 3], 0.0).map_err(|e| e.to_string())?;
        let diag = target.bbox_diagonal();
        let axis = Unit::new_normalize(Vector3::new(
            rng.random_range(-1.0..1.0),
            rng.random_range(-1.0..1.0),
            rng.random_range(-1.0..1.0),
        ));
        let angle = rng.random_range(0.0..=15.0f64).to_radians();
        let dir = Vector3::new(
            rng.random_range(-1.0..1.0),
            rng.random_range(-1.0..1.0),
            rng.random_range(-1.0..1.0),
        )
        .normalize();
        let shift = dir * rng.random_range(0.0..=0.1) * diag;
        let truth = RigidTransform::from_rotation(Rotation3::from_axis_angle(&axis, angle), shift);
        let source = apply_transform(&target, &truth);
        let r = icp_align(&source, &target, &IcpParams::default()).map_err(|e| e.to_string())?;
        ensure!(
            r.rms_history.windows(2).all(|w| w[1] <= w[0]),
            "run {run}: RMS increased: {:?}",
            r.rms_history
        );
        let residual = r.transform.after(&truth);
        worst_angle = worst_angle.max(residual.angle_deg());
        worst_t = worst_t.max(residual.translation.norm() / diag);
        ensure!(residual.angle_deg() < 1.0, "run {run}: rotation error {:.3} deg", residual.angle_deg());
        ensure!(
            residual.translation.norm() < 0.01 * diag,
            "run {run}: translation error {:.3}",
            residual.translation.norm()
        );
    }
    Ok(format!("worst rotation {worst_angle:.2e} deg, worst translation {worst_t:.2e} of bbox"))
}

/// One full run over the default synthetic corpus.
struct CorpusRun {
    features: FeatureSet,
    descriptor_files: Vec<Vec<u8>>,
    report: String,
    loo: f64,
    sanity: f64,
    points: Vec<usize>,
    took: Duration,
}

fn run_corpus() -> Result<CorpusRun, String> {
    let start = Instant::now();
    let cfg = PipelineConfig::default();
    let corpus = synth_corpus(&SynthCorpusSpec::default()).map_err(|e| e.to_string())?;
    let mut features = FeatureSet::new();
    let mut descriptor_files = Vec::new();
    let mut points = Vec::new();
    let mut subjects: Vec<&str> = corpus.iter().map(|s| s.subject_id.as_str()).collect();
    subjects.dedup();
    for subject in subjects {
        let scans: Vec<_> = corpus
            .iter()
            .filter(|s| s.subject_id == subject)
            .map(|s| (s.scan_id, &s.cloud))
            .collect();
        for (scan, pre) in preprocess_subject(&scans, &cfg).map_err(|e| e.to_string())? {
            let ex = extract_features(&pre.image, &cfg).map_err(|e| e.to_string())?;
            points.push(ex.points.len());
            features.insert(subject, scan, ex.features());
            descriptor_files.push(DescriptorFile::new(&cfg.descriptor, ex.descriptors).to_bytes());
        }
    }
    let loo = evaluate(&features, &Protocol::LeaveOneOut, &cfg.matcher).map_err(|e| e.to_string())?;
    let sanity = evaluate(&features, &Protocol::Sanity, &cfg.matcher).map_err(|e| e.to_string())?;
    Ok(CorpusRun {
        features,
        descriptor_files,
        report: format_report(&[loo.clone(), sanity.clone()]),
        loo: loo.accuracy,
        sanity: sanity.accuracy,
        points,
        took: start.elapsed(),
    })
}

fn ac8_end_to_end(run: &CorpusRun) -> Outcome {
    ensure!(run.features.len() == 40, "expected 40 scans, have {}", run.features.len());
    ensure!(run.loo >= 90.0, "LOO accuracy {:.2}%", run.loo);
    ensure!(run.sanity == 100.0, "SANITY accuracy {:.2}%", run.sanity);
    within(Duration::from_secs(120), run.took)?;
    Ok(format!("LOO {:.2}%, SANITY {:.2}%, {:.1?}", run.loo, run.sanity, run.took))
}

fn ac9_calibration(run: &CorpusRun) -> Outcome {
    let (lo, hi) = (
        *run.points.iter().min().unwrap_or(&0),
        *run.points.iter().max().unwrap_or(&0),
    );
    ensure!(lo >= 10 && hi <= 60, "points per face range over [{lo}, {hi}]");
    let mean = run.points.iter().sum::<usize>() as f64 / run.points.len() as f64;
    Ok(format!("points per face in [{lo}, {hi}], mean {mean:.1}"))
}

fn ac10_determinism(first: &CorpusRun) -> Outcome {
    let second = run_corpus()?;
    ensure!(
        first.descriptor_files == second.descriptor_files,
        "descriptor files differ between runs"
    );
    ensure!(first.report == second.report, "reports differ between runs");
    let bytes: usize = first.descriptor_files.iter().map(Vec::len).sum();
    Ok(format!("{} descriptor files ({bytes} bytes) and report identical", first.descriptor_files.len()))
}

fn run(id: &str, name: &str, f: impl FnOnce() -> Outcome) -> bool {
    let outcome = catch_unwind(AssertUnwindSafe(f)).unwrap_or_else(|p| {
        let msg = p
            .downcast_ref::<String>()
            .cloned()
            .or_else(|| p.downcast_ref::<&str>().map(|s| s.to_string()))
            .unwrap_or_else(|| "panic".into());
        Err(format!("panicked: {msg}"))
    });
    match outcome {
        Ok(detail) => {
            println!("[PASS] {id} {name}: {detail}");
            true
        }
        Err(detail) => {
            println!("[FAIL] {id} {name}: {detail}");
            false
        }
    }
}

fn main() -> ExitCode {
    let mut ok = true;
    ok &= run("AC1", "integral-image oracle", ac1_integral_oracle);
    ok &= run("AC2", "box-Hessian oracle", ac2_box_hessian_oracle);
    ok &= run("AC3", "Gaussian semigroup", ac3_gaussian_semigroup);
    ok &= run("AC4", "blob localization", ac4_blob_localization);
    ok &= run("AC5", "descriptor contract", ac5_descriptor_contract);
    ok &= run("AC6", "matcher oracle", ac6_matcher_oracle);
    ok &= run("AC7", "ICP recovery", ac7_icp_recovery);

    match catch_unwind(run_corpus) {
        Ok(Ok(corpus)) => {
            ok &= run("AC8", "end-to-end synthetic corpus", || ac8_end_to_end(&corpus));
            ok &= run("AC9", "points per face", || ac9_calibration(&corpus));
            ok &= run("AC10", "determinism", || ac10_determinism(&corpus));
        }
        other => {
            let why = match other {
                Ok(Err(e)) => e,
                _ => "pipeline panicked".to_string(),
            };
            for (id, name) in [
                ("AC8", "end-to-end synthetic corpus"),
                ("AC9", "points per face"),
                ("AC10", "determinism"),
            ] {
                println!("[FAIL] {id} {name}: {why}");
            }
            ok = false;
        }
    }

    if ok {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}
