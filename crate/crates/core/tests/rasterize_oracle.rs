//! Rasterization against a brute-force Delaunay triangulation.

use nalgebra::Point3;
use proptest::prelude::*;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use rangeface::cloud_io::PointCloud;
use rangeface::range_image::{rasterize, DepthScale, GridSpec};

fn spec() -> GridSpec {
    GridSpec {
        width: 16,
        height: 16,
        x_range: (0.0, 15.0),
        y_range: (0.0, 15.0),
        depth: DepthScale::Fixed { z_lo: 0.0, z_hi: 255.0 },
    }
}

/// One point per grid cell, jittered inside it, so the z-buffer keeps them all.
fn scattered(seed: u64, n: usize) -> Vec<Point3<f64>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut cells: Vec<(usize, usize)> = (0..16).flat_map(|u| (0..16).map(move |v| (u, v))).collect();
    cells.shuffle(&mut rng);
    cells[..n]
        .iter()
        .map(|&(u, v)| {
            Point3::new(
                u as f64 + rng.random_range(-0.3..0.3),
                v as f64 + rng.random_range(-0.3..0.3),
                rng.random_range(0.0..255.0),
            )
        })
        .collect()
}

fn circumcircle(a: &Point3<f64>, b: &Point3<f64>, c: &Point3<f64>) -> Option<(f64, f64, f64)> {
    let d = 2.0 * (a.x * (b.y - c.y) + b.x * (c.y - a.y) + c.x * (a.y - b.y));
    if d.abs() < 1e-12 {
        return None;
    }
    let (a2, b2, c2) = (a.x * a.x + a.y * a.y, b.x * b.x + b.y * b.y, c.x * c.x + c.y * c.y);
    let ux = (a2 * (b.y - c.y) + b2 * (c.y - a.y) + c2 * (a.y - b.y)) / d;
    let uy = (a2 * (c.x - b.x) + b2 * (a.x - c.x) + c2 * (b.x - a.x)) / d;
    Some((ux, uy, (a.x - ux).powi(2) + (a.y - uy).powi(2)))
}

/// Every triangle whose circumcircle holds no other point.
fn brute_delaunay(p: &[Point3<f64>]) -> Vec<[usize; 3]> {
    let mut out = Vec::new();
    for i in 0..p.len() {
        for j in i + 1..p.len() {
            for k in j + 1..p.len() {
                let Some((cx, cy, r2)) = circumcircle(&p[i], &p[j], &p[k]) else { continue };
                let empty = (0..p.len())
                    .filter(|&m| m != i && m != j && m != k)
                    .all(|m| (p[m].x - cx).powi(2) + (p[m].y - cy).powi(2) > r2 * (1.0 + 1e-12));
                if empty {
                    out.push([i, j, k]);
                }
            }
        }
    }
    out
}

fn interpolate(p: &[Point3<f64>], tris: &[[usize; 3]], x: f64, y: f64) -> Option<f64> {
    for t in tris {
        let (a, b, c) = (p[t[0]], p[t[1]], p[t[2]]);
        let det = (b.y - c.y) * (a.x - c.x) + (c.x - b.x) * (a.y - c.y);
        let l1 = ((b.y - c.y) * (x - c.x) + (c.x - b.x) * (y - c.y)) / det;
        let l2 = ((c.y - a.y) * (x - c.x) + (a.x - c.x) * (y - c.y)) / det;
        let l3 = 1.0 - l1 - l2;
        if l1 >= -1e-12 && l2 >= -1e-12 && l3 >= -1e-12 {
            return Some(l1 * a.z + l2 * b.z + l3 * c.z);
        }
    }
    None
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn matches_brute_force_delaunay(seed in 0u64..1_000_000, n in 4usize..28) {
        let pts = scattered(seed, n);
        let spec = spec();
        let img = rasterize(&PointCloud::new(pts.clone()).unwrap(), &spec).unwrap();
        let tris = brute_delaunay(&pts);
        for v in 0..16 {
            for u in 0..16 {
                let (x, y) = spec.node(u, v);
                match interpolate(&pts, &tris, x, y) {
                    Some(z) => {
                        prop_assert!(img.is_valid(u, v), "node ({u},{v}) should be inside the hull");
                        prop_assert!((img.depth.get(u, v) - z).abs() < 1e-9, "node ({u},{v}): {} vs {z}", img.depth.get(u, v));
                    }
                    None => prop_assert!(!img.is_valid(u, v), "node ({u},{v}) should be outside the hull"),
                }
            }
        }
    }
}
