//! Acceptance suite: one PASS/FAIL line per criterion, with the measured
//! value, its pinned tolerance and the runtime against its budget.

use std::collections::BTreeMap;
use std::time::{Duration, Instant};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use sim3d::calibration::{assess_calibration, estimate_sensor_to_camera};
use sim3d::dataset::{self, build_report, EvaluateOptions, ScoredInstance, SetupKind, SetupTag};
use sim3d::fusion::{fuse_views, project_view, ViewProjection};
use sim3d::geometry::{CameraIntrinsics, RigidTransform, Vec3};
use sim3d::io::{self, PlyFormat, ScanSetup, SimvVolume};
use sim3d::meshops::{ransac_plane, render_depth, BruteForce, Bvh, Ray, RayCaster, Sphere, TriangleMesh, RansacParams};
use sim3d::metrics::{self, Condition, FprDomain, InstanceScore};
use sim3d::raster::{AnomalyMap2D, Raster};
use sim3d::synthbench::{self, make_mesh, simulate_scan, SynthPreset};
use sim3d::voxelgrid::{max_pool_occupancy, voxelize_labeled_mesh, AnomalyVolume, GridSpec, GroundTruthVolume, VoxelMask};

// Pinned tolerances and thresholds.
const TOL_V_AUPRO: f64 = 1e-6;
const TOL_I_AUROC: f64 = 1e-12;
const HOLDOUT_RMS_MM: f64 = 1.0;
const HOLDOUT_MIN_PASSES: usize = 95;
const CLEAN_S2C_RMS_MM: f64 = 1e-6;
const TOL_DEPTH_MM: f64 = 1e-6;
const RANSAC_MAX_ANGLE_DEG: f64 = 0.5;
const RANSAC_TAU_MM: f64 = 2.0;
const MIN_E2E_V_AUPRO: f64 = 0.9;
const TOL_INVARIANCE: f64 = 1e-9;

type Criterion = (&'static str, fn() -> Outcome, u64);

struct Outcome {
    pass: bool,
    detail: String,
}

fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

// ---------------------------------------------------------------- shared generators

/// Random object occupancy with 1–4 labeled blobs and a random prediction.
fn random_case(r: &mut ChaCha8Rng) -> (AnomalyVolume, GroundTruthVolume) {
    let dims = [r.random_range(4..=20u32), r.random_range(4..=20u32), r.random_range(4..=20u32)];
    let spec = GridSpec::new([r.random_range(-50.0..50.0), 0.0, 3.0], r.random_range(0.5..3.0), dims).unwrap();
    let n = spec.voxel_count();
    let fill = r.random_range(0.3..0.9);
    let occ: Vec<bool> = (0..n).map(|_| r.random_bool(fill)).collect();
    let mut labels = vec![0u16; n];
    let blobs = r.random_range(1..=4u16);
    let occupied: Vec<usize> = (0..n).filter(|&i| occ[i]).collect();
    for id in 1..=blobs {
        let centre = spec.unlinear(occupied[r.random_range(0..occupied.len())]);
        let radius = r.random_range(0.0..3.0f64);
        for &i in &occupied {
            let v = spec.unlinear(i);
            let d2: f64 = (0..3).map(|a| (v[a] as f64 - centre[a] as f64).powi(2)).sum();
            if labels[i] == 0 && d2 <= radius * radius {
                labels[i] = id;
            }
        }
        let c = spec.linear(centre);
        labels[c] = id;
    }
    let levels = r.random_range(3..60);
    let mut scores = vec![0f32; n];
    let mut touched = VoxelMask::new(n);
    for i in 0..n {
        if r.random_bool(0.85) {
            touched.set(i, true);
            let boost = if labels[i] != 0 { r.random_range(0..levels / 2 + 1) } else { 0 };
            scores[i] = ((r.random_range(0..levels) + boost) as f32) / levels as f32;
        }
    }
    let gt = GroundTruthVolume::new(spec, VoxelMask::from_fn(n, |i| occ[i]), labels).unwrap();
    (AnomalyVolume::new(spec, scores, touched).unwrap(), gt)
}

// ---------------------------------------------------------------- 1

/// Brute force: PRO and FPR at every distinct touched score, sorted, then
/// trapezoids up to `bound` with a linear cut and flat extension.
fn oracle_v_aupro(vol: &AnomalyVolume, gt: &GroundTruthVolume, bound: f64) -> f64 {
    let n = vol.scores().len();
    let mut thresholds: Vec<f32> = (0..n).filter(|&i| vol.is_touched(i)).map(|i| vol.scores()[i]).collect();
    thresholds.sort_by(|a, b| b.total_cmp(a));
    thresholds.dedup();
    let mut blob_size: BTreeMap<u16, usize> = BTreeMap::new();
    for &l in gt.labels().iter().filter(|&&l| l != 0) {
        *blob_size.entry(l).or_default() += 1;
    }
    let nominal = (0..n).filter(|&i| gt.is_occupied(i) && gt.labels()[i] == 0).count() as f64;
    let mut pts = vec![(0.0, 0.0)];
    for t in thresholds {
        let mut hit: BTreeMap<u16, usize> = BTreeMap::new();
        let mut fp = 0usize;
        for i in 0..n {
            if vol.is_touched(i) && vol.scores()[i] >= t {
                let l = gt.labels()[i];
                if l != 0 {
                    *hit.entry(l).or_default() += 1;
                } else if gt.is_occupied(i) {
                    fp += 1;
                }
            }
        }
        let pro = blob_size.iter().map(|(l, &s)| *hit.get(l).unwrap_or(&0) as f64 / s as f64).sum::<f64>() / blob_size.len() as f64;
        pts.push((fp as f64 / nominal, pro));
    }
    let mut area = 0.0;
    let mut last = pts[0];
    for &(f, p) in &pts[1..] {
        if f >= bound {
            let p_cut = if f > last.0 { last.1 + (p - last.1) * (bound - last.0) / (f - last.0) } else { p };
            return (area + (bound - last.0) * (last.1 + p_cut) / 2.0) / bound;
        }
        area += (f - last.0) * (last.1 + p) / 2.0;
        last = (f, p);
    }
    (area + (bound - last.0) * last.1) / bound
}

fn criterion_1() -> Outcome {
    let mut worst = 0f64;
    let mut comparisons = 0;
    for seed in 0..100 {
        let (vol, gt) = random_case(&mut rng(seed));
        let curve = metrics::pro_curve_exhaustive(&vol, &gt, FprDomain::GroundTruthOccupied).unwrap();
        for bound in [0.01, 0.05, 0.3] {
            let got = metrics::v_aupro(&curve, bound).unwrap();
            worst = worst.max((got - oracle_v_aupro(&vol, &gt, bound)).abs());
            comparisons += 1;
        }
    }
    Outcome { pass: worst <= TOL_V_AUPRO, detail: format!("{comparisons} comparisons, max |Δ| = {worst:.2e} (tol {TOL_V_AUPRO:e})") }
}

// ---------------------------------------------------------------- 2

fn criterion_2() -> Outcome {
    let mut worst = 0f64;
    for seed in 0..100 {
        let mut r = rng(1000 + seed);
        let n = r.random_range(2..=500);
        let levels = r.random_range(2..40);
        let mut scores: Vec<InstanceScore> = (0..n)
            .map(|i| {
                let cond = if r.random_bool(0.4) { Condition::Anomalous } else { Condition::Nominal };
                InstanceScore::new(i.to_string(), r.random_range(0..levels) as f64 / 7.0, cond)
            })
            .collect();
        scores[0].condition = Condition::Anomalous;
        scores[1].condition = Condition::Nominal;
        let (pos, neg): (Vec<_>, Vec<_>) = scores.iter().partition(|s| s.condition == Condition::Anomalous);
        let mut wins = 0.0;
        for a in &pos {
            for b in &neg {
                wins += if a.score > b.score { 1.0 } else if a.score == b.score { 0.5 } else { 0.0 };
            }
        }
        let oracle = wins / (pos.len() * neg.len()) as f64;
        worst = worst.max((metrics::i_auroc(&scores).unwrap() - oracle).abs());
    }
    Outcome { pass: worst <= TOL_I_AUROC, detail: format!("100 score sets, max |Δ| = {worst:.2e} (tol {TOL_I_AUROC:e})") }
}

// ---------------------------------------------------------------- 3

fn append_then_max(projections: &[ViewProjection], n: usize) -> (Vec<u32>, Vec<bool>) {
    let all: Vec<(usize, f32)> = projections.iter().flat_map(|p| p.entries.iter().copied()).collect();
    let mut best: Vec<Option<f32>> = vec![None; n];
    for (i, s) in all {
        best[i] = Some(best[i].map_or(s, |b| b.max(s)));
    }
    (best.iter().map(|b| (b.unwrap_or(0.0) + 0.0).to_bits()).collect(), best.iter().map(Option::is_some).collect())
}

fn same_bits(vol: &AnomalyVolume, oracle: &(Vec<u32>, Vec<bool>)) -> bool {
    vol.scores().iter().map(|s| s.to_bits()).eq(oracle.0.iter().copied()) && (0..oracle.1.len()).all(|i| vol.is_touched(i) == oracle.1[i])
}

fn criterion_3() -> Outcome {
    let pools: Vec<rayon::ThreadPool> = [1, 2, 8].iter().map(|&k| rayon::ThreadPoolBuilder::new().num_threads(k).build().unwrap()).collect();
    let spec = GridSpec::new([0.0; 3], 1.0, [20, 20, 20]).unwrap();
    let mut cases: Vec<(GridSpec, Vec<ViewProjection>)> = Vec::new();
    // synthetic projections with many shared voxels and tied scores
    for seed in 0..20 {
        let mut r = rng(2000 + seed);
        let projections = (0..12)
            .map(|_| {
                let entries = (0..r.random_range(0..3000)).map(|_| (r.random_range(0..spec.voxel_count()), r.random_range(-20..100) as f32 / 16.0)).collect();
                ViewProjection { spec, entries, dropped: 0 }
            })
            .collect();
        cases.push((spec, projections));
    }
    // projections of random maps through rendered sphere scans
    let mut preset = SynthPreset::easy();
    preset.scan.intrinsics = CameraIntrinsics::pinhole(220.0, 220.0, 47.5, 47.5, 96, 96).unwrap();
    preset.tessellation = 4;
    let object = make_mesh(&preset.nominal_scene()).unwrap();
    let sim = simulate_scan(&object, &preset.scan).unwrap();
    let b = sim.mesh.bounds().unwrap();
    let vs = b.extent().max() / 19.0;
    let grid = GridSpec::new((b.centre() - Vec3::repeat(10.0 * vs)).into(), vs, [20, 20, 20]).unwrap();
    for seed in 0..3 {
        let mut r = rng(2100 + seed);
        let projections = sim
            .views
            .iter()
            .enumerate()
            .map(|(k, v)| {
                let map = AnomalyMap2D::new(96, 96, (0..96 * 96).map(|_| r.random_range(0..50) as f32 / 50.0).collect()).unwrap();
                project_view(&map, &v.depth, &preset.scan.intrinsics, &sim.chain, k, &grid).unwrap()
            })
            .collect();
        cases.push((grid, projections));
    }
    let mut failures = 0;
    let mut checks = 0;
    for (seed, (spec, mut projections)) in cases.into_iter().enumerate() {
        let oracle = append_then_max(&projections, spec.voxel_count());
        for pool in &pools {
            checks += 1;
            failures += !same_bits(&pool.install(|| fuse_views(&projections, &spec)).unwrap(), &oracle) as usize;
        }
        projections.shuffle(&mut rng(2200 + seed as u64));
        for pool in &pools {
            checks += 1;
            failures += !same_bits(&pool.install(|| fuse_views(&projections, &spec)).unwrap(), &oracle) as usize;
        }
    }
    Outcome { pass: failures == 0, detail: format!("{checks} fusions (original/permuted × 1/2/8 threads), {failures} bit mismatches (tol: exact)") }
}

// ---------------------------------------------------------------- 4

fn calibration_camera() -> CameraIntrinsics {
    CameraIntrinsics::new(3500.0, 3500.0, 2048.0, 1500.0, 4096, 3000, [-0.08, 0.02, 0.0, 0.0005, -0.0003]).unwrap()
}

fn random_s2c(r: &mut ChaCha8Rng) -> RigidTransform {
    let axis = Vec3::new(r.random_range(-0.1..0.1), r.random_range(-0.1..0.1), r.random_range(-0.1..0.1));
    RigidTransform::from_axis_angle(axis, Vec3::new(r.random_range(-120.0..120.0), r.random_range(-30.0..30.0), r.random_range(-30.0..30.0)))
}

fn criterion_4() -> Outcome {
    let intr = calibration_camera();
    let mut within = 0;
    let mut worst_noisy = 0f64;
    for seed in 0..100 {
        let mut r = rng(4000 + seed);
        let truth = random_s2c(&mut r);
        let views = synthbench::synthetic_calibration_views(&mut r, &truth, &intr, 20, 0.2, 0.05);
        let rms = estimate_sensor_to_camera(&views[..15], &intr).and_then(|est| assess_calibration(&est, &views[15..], &intr)).map_or(f64::INFINITY, |rep| rep.rms);
        within += (rms < HOLDOUT_RMS_MM) as usize;
        worst_noisy = worst_noisy.max(rms);
    }
    let mut worst_clean = 0f64;
    for seed in 0..100 {
        let mut r = rng(4500 + seed);
        let truth = random_s2c(&mut r);
        let views = synthbench::synthetic_calibration_views(&mut r, &truth, &intr, 20, 0.0, 0.0);
        let rms = match estimate_sensor_to_camera(&views, &intr) {
            Ok(est) => {
                let pts: Vec<&Vec3> = views.iter().flat_map(|v| &v.sensor_points).collect();
                (pts.iter().map(|p| (est.apply(p) - truth.apply(p)).norm_squared()).sum::<f64>() / pts.len() as f64).sqrt()
            }
            Err(_) => f64::INFINITY,
        };
        worst_clean = worst_clean.max(rms);
    }
    Outcome {
        pass: within >= HOLDOUT_MIN_PASSES && worst_clean < CLEAN_S2C_RMS_MM,
        detail: format!("noisy holdout RMS < {HOLDOUT_RMS_MM} mm in {within}/100 (need ≥ {HOLDOUT_MIN_PASSES}; worst {worst_noisy:.3} mm); noise-free worst RMS {worst_clean:.2e} mm (tol {CLEAN_S2C_RMS_MM:e})"),
    }
}

// ---------------------------------------------------------------- 5

fn criterion_5() -> Outcome {
    let intr = CameraIntrinsics::pinhole(600.0, 600.0, 255.5, 255.5, 512, 512).unwrap();
    let sphere = Sphere { centre: Vec3::new(3.0, -4.0, 10.0), radius: 80.0 };
    let pose = RigidTransform::from_axis_angle(Vec3::new(0.2, -0.1, 0.05), Vec3::new(5.0, -2.0, 400.0));
    let depth = render_depth(&sphere, &intr, &pose);
    let c = pose.apply(&sphere.centre);
    let (mut worst, mut hits, mut set_mismatch) = (0f64, 0usize, 0usize);
    for row in 0..512u32 {
        for col in 0..512u32 {
            let d = Vec3::new((col as f64 - intr.cx) / intr.fx, (row as f64 - intr.cy) / intr.fy, 1.0);
            // |s d − c|² = r²
            let (a, b, cc) = (d.norm_squared(), -2.0 * d.dot(&c), c.norm_squared() - sphere.radius * sphere.radius);
            let disc = b * b - 4.0 * a * cc;
            let got = depth.get(col, row);
            if disc < 0.0 {
                set_mismatch += (got != 0.0 && disc < -1e-6 * b * b) as usize;
                continue;
            }
            let s = (-b - disc.sqrt()) / (2.0 * a);
            if got == 0.0 {
                set_mismatch += (disc > 1e-6 * b * b) as usize;
                continue;
            }
            hits += 1;
            worst = worst.max((got - s).abs());
        }
    }
    // BVH vs. brute force on a random soup
    let mut r = rng(5000);
    let corners: Vec<Vec3> = (0..30_000).map(|_| Vec3::new(r.random_range(-100.0..100.0), r.random_range(-100.0..100.0), r.random_range(-100.0..100.0))).collect();
    // shrink each triangle around its first corner so the soup is not a solid wall
    let vertices: Vec<Vec3> = corners.chunks(3).flat_map(|v| [v[0], v[0] + (v[1] - v[0]) * 0.1, v[0] + (v[2] - v[0]) * 0.1]).collect();
    let triangles: Vec<[u32; 3]> = (0..10_000u32).map(|t| [3 * t, 3 * t + 1, 3 * t + 2]).collect();
    let soup = TriangleMesh::new(vertices, triangles, None).unwrap();
    let bvh = Bvh::build(&soup).unwrap();
    let brute = BruteForce(&soup);
    let mut parity_fail = 0;
    let mut soup_hits = 0;
    for _ in 0..1000 {
        let origin = Vec3::new(r.random_range(-150.0..150.0), r.random_range(-150.0..150.0), r.random_range(-150.0..150.0));
        let target = Vec3::new(r.random_range(-50.0..50.0), r.random_range(-50.0..50.0), r.random_range(-50.0..50.0));
        let ray = Ray { origin, dir: (target - origin).normalize() };
        let (a, b) = (bvh.intersect(&soup, &ray), brute.cast(&ray));
        soup_hits += a.is_some() as usize;
        parity_fail += (a != b) as usize;
    }
    Outcome {
        pass: worst <= TOL_DEPTH_MM && set_mismatch == 0 && parity_fail == 0 && hits > 10_000,
        detail: format!(
            "sphere: {hits} hit pixels, max |Δdepth| = {worst:.2e} mm (tol {TOL_DEPTH_MM:e}), {set_mismatch} hit-set mismatches; BVH/brute: {parity_fail}/1000 differ ({soup_hits} hits)"
        ),
    }
}

// ---------------------------------------------------------------- 6

/// Thirteen-axis separating-axis test; touching is overlap.
fn sat_overlap(tri: &[Vec3; 3], centre: &Vec3, half: f64) -> bool {
    let v: Vec<Vec3> = tri.iter().map(|p| p - centre).collect();
    let e = [v[1] - v[0], v[2] - v[1], v[0] - v[2]];
    let mut axes: Vec<Vec3> = vec![Vec3::x(), Vec3::y(), Vec3::z(), e[0].cross(&e[1])];
    for ei in &e {
        for u in [Vec3::x(), Vec3::y(), Vec3::z()] {
            axes.push(u.cross(ei));
        }
    }
    axes.iter().all(|a| {
        let p: Vec<f64> = v.iter().map(|q| q.dot(a)).collect();
        let r = half * (a.x.abs() + a.y.abs() + a.z.abs());
        let (lo, hi) = (p.iter().cloned().fold(f64::INFINITY, f64::min), p.iter().cloned().fold(f64::NEG_INFINITY, f64::max));
        !(lo > r || hi < -r)
    })
}

fn random_labeled_mesh(r: &mut ChaCha8Rng, spec: &GridSpec, triangles: usize) -> TriangleMesh {
    let b = spec.bounds();
    let margin = 0.01 * spec.voxel_size;
    let mut vertices = Vec::new();
    for _ in 0..triangles {
        let c = Vec3::new(r.random_range(b.min.x + 3.0..b.max.x - 3.0), r.random_range(b.min.y + 3.0..b.max.y - 3.0), r.random_range(b.min.z + 3.0..b.max.z - 3.0));
        let size = r.random_range(0.2..3.0) * spec.voxel_size;
        for _ in 0..3 {
            let p = c + Vec3::new(r.random_range(-size..size), r.random_range(-size..size), r.random_range(-size..size));
            vertices.push(p.zip_zip_map(&b.min, &b.max, |x, lo, hi| x.clamp(lo + margin, hi - margin)));
        }
    }
    let labels = (0..vertices.len()).map(|_| if r.random_bool(0.3) { r.random_range(1..4) } else { 0 }).collect();
    TriangleMesh::new(vertices, (0..triangles as u32).map(|t| [3 * t, 3 * t + 1, 3 * t + 2]).collect(), Some(labels)).unwrap()
}

fn criterion_6() -> Outcome {
    let mut mismatched = 0;
    let mut occupied = 0;
    for seed in 0..20 {
        let mut r = rng(6000 + seed);
        let dims = [r.random_range(8..=20u32), r.random_range(8..=20u32), r.random_range(8..=20u32)];
        let spec = GridSpec::new([r.random_range(-20.0..20.0), r.random_range(-20.0..20.0), 1.0], 2.0, dims).unwrap();
        let count = r.random_range(1..40);
        let mesh = random_labeled_mesh(&mut r, &spec, count);
        let gt = voxelize_labeled_mesh(&mesh, &spec).unwrap();
        for i in 0..spec.voxel_count() {
            let centre = spec.voxel_centre(spec.unlinear(i));
            let mut occ = false;
            let mut label = 0u16;
            for t in 0..mesh.triangles().len() {
                if sat_overlap(&mesh.triangle(t), &centre, spec.voxel_size / 2.0) {
                    occ = true;
                    let tl = mesh.triangles()[t].iter().map(|&v| mesh.label(v as usize)).filter(|&l| l != 0).min().unwrap_or(0);
                    if tl != 0 && (label == 0 || tl < label) {
                        label = tl;
                    }
                }
            }
            occupied += occ as usize;
            mismatched += (gt.is_occupied(i) != occ || gt.labels()[i] != label) as usize;
        }
    }
    let mut refinement_fail = 0;
    for seed in 0..20 {
        let mut r = rng(6500 + seed);
        let spec = GridSpec::new([0.0; 3], 2.0, [16, 16, 16]).unwrap();
        let mesh = random_labeled_mesh(&mut r, &spec, 30);
        let coarse = voxelize_labeled_mesh(&mesh, &spec).unwrap();
        let fine = voxelize_labeled_mesh(&mesh, &spec.refined(2)).unwrap();
        refinement_fail += !max_pool_occupancy(&fine, &spec, 2).is_superset_of(coarse.occupancy()) as usize;
    }
    Outcome {
        pass: mismatched == 0 && refinement_fail == 0 && occupied > 0,
        detail: format!("SAT oracle: {mismatched} voxel mismatches over 20 grids ({occupied} occupied; tol: exact); refinement: {refinement_fail}/20 violations"),
    }
}

// ---------------------------------------------------------------- 7

fn criterion_7() -> Outcome {
    let tau = RANSAC_TAU_MM;
    let mut ok = 0;
    let (mut worst_angle, mut worst_d) = (0f64, 0f64);
    for seed in 0..100 {
        let mut r = rng(7000 + seed);
        let normal = Vec3::new(r.random_range(-0.3..0.3), r.random_range(-0.3..0.3), 1.0).normalize();
        let d = r.random_range(-50.0..50.0);
        let u = normal.cross(&Vec3::x()).normalize();
        let v = normal.cross(&u);
        let noise = rand_distr::Normal::new(0.0, tau / 6.0).unwrap();
        let mut points: Vec<Vec3> = (0..1600)
            .map(|_| u * r.random_range(-200.0..200.0) + v * r.random_range(-200.0..200.0) + normal * (r.sample(noise) - d))
            .collect();
        // object-like outliers above the plane
        points.extend((0..400).map(|_| u * r.random_range(-60.0..60.0) + v * r.random_range(-60.0..60.0) + normal * (r.random_range(5.0..150.0) - d)));
        points.shuffle(&mut r);
        let params = RansacParams { tau, iterations: 1000, sample_size: 10, seed };
        let Ok(plane) = ransac_plane(&points, &params) else { continue };
        let (n, pd) = if plane.normal.dot(&normal) < 0.0 { (-plane.normal, -plane.d) } else { (plane.normal, plane.d) };
        let angle = n.dot(&normal).clamp(-1.0, 1.0).acos().to_degrees();
        let dd = (pd - d).abs();
        worst_angle = worst_angle.max(angle);
        worst_d = worst_d.max(dd);
        ok += (angle < RANSAC_MAX_ANGLE_DEG && dd < tau / 10.0) as usize;
    }
    Outcome { pass: ok == 100, detail: format!("{ok}/100 recovered (worst normal error {worst_angle:.4}° < {RANSAC_MAX_ANGLE_DEG}°, worst |Δd| {worst_d:.4} mm < τ/10 = {})", tau / 10.0) }
}

// ---------------------------------------------------------------- 8

fn criterion_8() -> Outcome {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("data");
    let maps = dir.path().join("maps");
    dataset::write_synthetic_dataset(&SynthPreset::easy(), &data).unwrap();
    let ds = dataset::load_manifest(&data.join("manifest.json")).unwrap();
    dataset::run_reference_detector(&ds, SetupKind::Synth, &maps).unwrap();
    let opts = EvaluateOptions { setup: Some(SetupTag::SynthToReal), ..Default::default() };
    let run = dataset::evaluate(&ds, &maps, &opts).unwrap();
    let control: Vec<ScoredInstance> = ds
        .manifest
        .tests()
        .map(|inst| {
            let gt = inst.ground_truth.as_ref().map(|p| io::read_ground_truth(&ds.path(p)).unwrap());
            let volume = gt.as_ref().map_or_else(|| AnomalyVolume::empty(inst.grid), AnomalyVolume::from_ground_truth);
            ScoredInstance { id: inst.id.clone(), condition: inst.condition(), volume, ground_truth: gt, dropped_pixels: Vec::new() }
        })
        .collect();
    let control = build_report(&control, &opts).unwrap();
    let r = &run.report;
    Outcome {
        pass: r.i_auroc == 1.0 && r.v_aupro >= MIN_E2E_V_AUPRO && control.v_aupro == 1.0,
        detail: format!(
            "{} test instances: I-AUROC {} (need 1.0), V-AUPRO@1% {:.4} (need ≥ {MIN_E2E_V_AUPRO}); GT control V-AUPRO {} (need 1.0 exactly)",
            run.scores.len(),
            r.i_auroc,
            r.v_aupro,
            control.v_aupro
        ),
    }
}

// ---------------------------------------------------------------- 9

fn criterion_9() -> Outcome {
    let transforms: [fn(f64) -> f64; 3] = [|x| 3.0 * x + 0.5, f64::exp, |x| x * x * x + x];
    let mut worst = 0f64;
    for seed in 0..50 {
        let mut r = rng(9000 + seed);
        let (vol, gt) = random_case(&mut r);
        let base_curve = metrics::pro_curve_exhaustive(&vol, &gt, FprDomain::GroundTruthOccupied).unwrap();
        let base = metrics::v_aupro(&base_curve, 0.05).unwrap();
        let scores: Vec<InstanceScore> = (0..60)
            .map(|i| InstanceScore::new(i.to_string(), r.random_range(0..25) as f64 / 25.0, if i % 3 == 0 { Condition::Anomalous } else { Condition::Nominal }))
            .collect();
        let base_auroc = metrics::i_auroc(&scores).unwrap();
        for f in transforms {
            let mapped = vol.map_scores(|s| f(s as f64) as f32);
            let curve = metrics::pro_curve_exhaustive(&mapped, &gt, FprDomain::GroundTruthOccupied).unwrap();
            worst = worst.max((metrics::v_aupro(&curve, 0.05).unwrap() - base).abs());
            let moved: Vec<InstanceScore> = scores.iter().map(|s| InstanceScore::new(s.id.clone(), f(s.score), s.condition)).collect();
            worst = worst.max((metrics::i_auroc(&moved).unwrap() - base_auroc).abs());
        }
    }
    Outcome { pass: worst <= TOL_INVARIANCE, detail: format!("50 cases × 3 transforms, max |Δ| = {worst:.2e} (tol {TOL_INVARIANCE:e})") }
}

// ---------------------------------------------------------------- 10

fn criterion_10() -> Outcome {
    let dir = tempfile::tempdir().unwrap();
    let p = |name: &str| dir.path().join(name);
    let mut failures: BTreeMap<&str, usize> = ["simv", "pfm", "ply", "json"].iter().map(|&k| (k, 0)).collect();
    for seed in 0..20 {
        let mut r = rng(10_000 + seed);
        let (vol, gt) = random_case(&mut r);
        for (i, v) in [SimvVolume::Scores(vol), SimvVolume::Labels(gt)].iter().enumerate() {
            let (a, b) = (p(&format!("a{i}.simv")), p(&format!("b{i}.simv")));
            io::write_simv(&a, v).unwrap();
            io::write_simv(&b, &io::read_simv(&a).unwrap()).unwrap();
            *failures.get_mut("simv").unwrap() += (std::fs::read(&a).unwrap() != std::fs::read(&b).unwrap()) as usize;
        }

        let (w, h) = (r.random_range(1..50u32), r.random_range(1..50u32));
        let map = Raster::new(w, h, (0..w * h).map(|_| r.random_range(-1e3f32..1e3)).collect()).unwrap();
        io::write_pfm(&p("a.pfm"), &map).unwrap();
        io::write_pfm(&p("b.pfm"), &io::read_pfm(&p("a.pfm")).unwrap()).unwrap();
        *failures.get_mut("pfm").unwrap() += (std::fs::read(p("a.pfm")).unwrap() != std::fs::read(p("b.pfm")).unwrap()) as usize;

        let spec = GridSpec::new([0.0; 3], 2.0, [12, 12, 12]).unwrap();
        let count = r.random_range(1..50);
        let mut mesh = random_labeled_mesh(&mut r, &spec, count);
        if seed % 2 == 1 {
            mesh = TriangleMesh::new(mesh.vertices().to_vec(), mesh.triangles().to_vec(), None).unwrap();
        }
        for format in [PlyFormat::Ascii, PlyFormat::BinaryLittleEndian] {
            io::write_ply(&p("a.ply"), &mesh, format).unwrap();
            io::write_ply(&p("b.ply"), &io::read_ply(&p("a.ply")).unwrap(), format).unwrap();
            *failures.get_mut("ply").unwrap() += (std::fs::read(p("a.ply")).unwrap() != std::fs::read(p("b.ply")).unwrap()) as usize;
        }

        let views = 1 + r.random_range(0..12);
        let setup = ScanSetup {
            intrinsics: CameraIntrinsics::new(r.random_range(100.0..4000.0), r.random_range(100.0..4000.0), 511.3, 383.9, 1024, 768, [r.random_range(-0.1..0.1), 0.01, 0.0, 1e-4, -2e-4]).unwrap(),
            sensor_to_camera: random_s2c(&mut r),
            views: (0..views).map(|k| if k == 0 { RigidTransform::identity() } else { random_s2c(&mut r) }).collect(),
        };
        io::write_json(&p("a.json"), &setup).unwrap();
        io::write_json(&p("b.json"), &io::read_json::<ScanSetup>(&p("a.json")).unwrap()).unwrap();
        *failures.get_mut("json").unwrap() += (std::fs::read(p("a.json")).unwrap() != std::fs::read(p("b.json")).unwrap()) as usize;
    }
    let total: usize = failures.values().sum();
    Outcome { pass: total == 0, detail: format!("20 payloads per format, byte mismatches {failures:?} (tol: exact)") }
}

#[test]
fn acceptance() {
    let criteria: [Criterion; 10] = [
        ("V-AUPRO oracle equivalence", criterion_1, 60),
        ("I-AUROC exactness", criterion_2, 10),
        ("fusion correctness", criterion_3, 30),
        ("calibration precision", criterion_4, 60),
        ("ray-traced depth accuracy", criterion_5, 30),
        ("voxelization", criterion_6, 60),
        ("RANSAC plane", criterion_7, 10),
        ("end-to-end synthetic benchmark", criterion_8, 300),
        ("metric invariances", criterion_9, 60),
        ("format round-trips", criterion_10, 60),
    ];
    let mut failed = Vec::new();
    for (k, (name, run, budget)) in criteria.iter().enumerate() {
        let start = Instant::now();
        let outcome = run();
        let elapsed = start.elapsed();
        let in_time = elapsed <= Duration::from_secs(*budget);
        let pass = outcome.pass && in_time;
        println!(
            "criterion {:>2} {} {}: {}; {:.2} s (budget {} s)",
            k + 1,
            if pass { "PASS" } else { "FAIL" },
            name,
            outcome.detail,
            elapsed.as_secs_f64(),
            budget
        );
        if !pass {
            failed.push(k + 1);
        }
    }
    assert!(failed.is_empty(), "failed criteria: {failed:?}");
}
