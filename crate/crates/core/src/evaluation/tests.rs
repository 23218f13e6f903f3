use super::*;
use nalgebra::{Matrix4, Quaternion, UnitQuaternion};
use proptest::prelude::*;
use rand_distr::{Distribution, Normal};

fn random_pose(rng: &mut ChaCha8Rng) -> Pose {
    let phi = Vec3::from_fn(|_, _| rng.random_range(-2.0..2.0));
    let t = Vec3::from_fn(|_, _| rng.random_range(-10.0..10.0));
    Pose::from_parts(&phi, t)
}

fn wiggly_path(n: usize, dt: f64) -> Vec<(f64, Pose)> {
    (0..n)
        .map(|k| {
            let t = k as f64 * dt;
            Pose::from_parts(&Vec3::new(0.1 * (t * 0.7).sin(), 0.05 * t.cos(), 0.3 * t), Vec3::new(2.0 * t, (t * 0.5).sin() * 3.0, 0.2 * t.sin()))
        })
        .enumerate()
        .map(|(k, p)| (k as f64 * dt, p))
        .collect()
}

/// Exhaustive nearest-stamp pairing with the same claiming rule.
fn associate_oracle(gt: &Trajectory, est: &Trajectory, max_dt: f64) -> Vec<(usize, usize)> {
    let mut used = vec![false; est.len()];
    let mut out = Vec::new();
    for (i, (t, _)) in gt.iter().enumerate() {
        let mut best: Option<usize> = None;
        for (j, (s, _)) in est.iter().enumerate() {
            if best.is_none_or(|b| (s - t).abs() < (est[b].0 - t).abs()) {
                best = Some(j);
            }
        }
        if let Some(j) = best {
            if (est[j].0 - t).abs() <= max_dt && !used[j] {
                used[j] = true;
                out.push((i, j));
            }
        }
    }
    out
}

/// Horn's quaternion solution for the rigid transform taking `src` to `dst`.
fn horn(src: &[Vec3], dst: &[Vec3]) -> Pose {
    let n = src.len() as f64;
    let (ms, md) = (src.iter().sum::<Vec3>() / n, dst.iter().sum::<Vec3>() / n);
    let mut s = Mat3::zeros();
    for (p, q) in src.iter().zip(dst) {
        s += (p - ms) * (q - md).transpose();
    }
    let (sxx, sxy, sxz, syx, syy, syz, szx, szy, szz) = (s[(0, 0)], s[(0, 1)], s[(0, 2)], s[(1, 0)], s[(1, 1)], s[(1, 2)], s[(2, 0)], s[(2, 1)], s[(2, 2)]);
    let nm = Matrix4::new(
        sxx + syy + szz, syz - szy, szx - sxz, sxy - syx,
        syz - szy, sxx - syy - szz, sxy + syx, szx + sxz,
        szx - sxz, sxy + syx, -sxx + syy - szz, syz + szy,
        sxy - syx, szx + sxz, syz + szy, -sxx - syy + szz,
    );
    let eig = nm.symmetric_eigen();
    let k = eig.eigenvalues.imax();
    let v = eig.eigenvectors.column(k);
    let q = UnitQuaternion::from_quaternion(Quaternion::new(v[0], v[1], v[2], v[3]));
    let r = q.to_rotation_matrix().into_inner();
    Pose::new(r, md - r * ms)
}

#[test]
fn stats_of_known_values() {
    let s = ErrorStats::from_values(&[1.0, 2.0, 3.0, 4.0]).unwrap();
    assert!((s.mean - 2.5).abs() < 1e-15);
    assert!((s.rmse - 7.5f64.sqrt()).abs() < 1e-15);
    assert!((s.std - 1.25f64.sqrt()).abs() < 1e-15);
    assert_eq!((s.max, s.count), (4.0, 4));
    assert!(ErrorStats::from_values(&[]).is_none());
}

#[test]
fn identical_stamps_pair_fully() {
    let g = wiggly_path(50, 0.1);
    let p = associate(&g, &g, 0.01).unwrap();
    assert_eq!(p, (0..50).map(|k| (k, k)).collect::<Vec<_>>());
}

#[test]
fn offset_beyond_tolerance_is_empty() {
    let g = wiggly_path(10, 0.1);
    let e: Vec<(f64, Pose)> = g.iter().map(|(t, p)| (t + 1000.0, *p)).collect();
    assert_eq!(associate(&g, &e, 0.05), Err(EvalError::EmptyAssociation));
}

#[test]
fn non_monotone_trajectory_is_rejected() {
    let mut g = wiggly_path(10, 0.1);
    g.swap(3, 4);
    assert_eq!(associate(&g, &g, 0.1), Err(EvalError::NonMonotone(4)));
}

#[test]
fn association_matches_exhaustive_search() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    for _ in 0..50 {
        let mut t = 0.0;
        let g: Vec<(f64, Pose)> = (0..rng.random_range(1..200))
            .map(|_| {
                t += rng.random_range(0.01..0.2);
                (t, Pose::identity())
            })
            .collect();
        let mut s = rng.random_range(-0.5..0.5);
        let e: Vec<(f64, Pose)> = (0..rng.random_range(1..200))
            .map(|_| {
                s += rng.random_range(0.01..0.3);
                (s, Pose::identity())
            })
            .collect();
        let dt = rng.random_range(0.0..0.1);
        let oracle = associate_oracle(&g, &e, dt);
        match associate(&g, &e, dt) {
            Ok(p) => assert_eq!(p, oracle),
            Err(_) => assert!(oracle.is_empty()),
        }
    }
}

#[test]
fn rpe_of_identical_trajectories_is_zero() {
    let g = wiggly_path(200, 0.1);
    let pairs = associate(&g, &g, 1e-6).unwrap();
    for b in rpe(&g, &g, &pairs, &[1.0, 5.0, 10.0]).unwrap() {
        assert!(b.translation.unwrap().max < 1e-12);
        assert!(b.rotation.unwrap().max < 1e-12);
    }
}

#[test]
fn rpe_ignores_a_global_rigid_transform() {
    let g = wiggly_path(200, 0.1);
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let t = random_pose(&mut rng);
    let e: Vec<(f64, Pose)> = g.iter().map(|(s, p)| (*s, t.compose(p))).collect();
    let pairs = associate(&g, &e, 1e-6).unwrap();
    for b in rpe(&g, &e, &pairs, &[2.0, 10.0]).unwrap() {
        assert!(b.translation.unwrap().max < 1e-9);
    }
}

#[test]
fn constructed_drift_is_measured() {
    let g: Vec<(f64, Pose)> = (0..1000).map(|k| (k as f64 * 0.1, Pose::from_translation(Vec3::new(k as f64 * 0.1, 0.0, 0.0)))).collect();
    let e: Vec<(f64, Pose)> = g.iter().map(|(t, p)| (*t, Pose::from_translation(p.translation * 1.01))).collect();
    let pairs = associate(&g, &e, 1e-6).unwrap();
    for b in rpe(&g, &e, &pairs, &[5.0, 20.0, 50.0]).unwrap() {
        let d = b.drift_percent.unwrap();
        assert!((d - 1.0).abs() < 0.1, "{d}");
    }
}

#[test]
fn rpe_pairs_match_exhaustive_definition() {
    let g = wiggly_path(150, 0.1);
    let pos: Vec<Vec3> = g.iter().map(|(_, p)| p.translation).collect();
    for delta in [0.5, 3.0, 11.0] {
        let fast = rpe_index_pairs(&pos, delta);
        let mut slow = Vec::new();
        for i in 0..pos.len() {
            let mut len = 0.0;
            for j in i + 1..pos.len() {
                len += (pos[j] - pos[j - 1]).norm();
                if len >= delta {
                    slow.push((i, j));
                    break;
                }
            }
        }
        assert_eq!(fast, slow);
    }
}

#[test]
fn ape_with_rigid_alignment_removes_transform() {
    let g = wiggly_path(100, 0.1);
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let t = random_pose(&mut rng);
    let e: Vec<(f64, Pose)> = g.iter().map(|(s, p)| (*s, t.compose(p))).collect();
    let pairs = associate(&g, &e, 1e-6).unwrap();
    let r = ape(&g, &e, &pairs, ApeAlign::Rigid).unwrap();
    assert!(r.translation.max < 1e-9);
    assert!(r.rotation.max < 1e-9);
    let raw = ape(&g, &g, &pairs, ApeAlign::None).unwrap();
    assert_eq!(raw.translation.max, 0.0);
}

#[test]
fn alignment_matches_horn_oracle() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let noise = Normal::new(0.0, 0.1).unwrap();
    for _ in 0..100 {
        let n = rng.random_range(3..500);
        let t = random_pose(&mut rng);
        let src: Vec<Vec3> = (0..n).map(|_| Vec3::from_fn(|_, _| rng.random_range(-20.0..20.0))).collect();
        let dst: Vec<Vec3> = src.iter().map(|p| t.transform_point(p) + Vec3::from_fn(|_, _| noise.sample(&mut rng))).collect();
        let a = umeyama(&src, &dst).unwrap();
        let b = horn(&src, &dst);
        assert!((a.rotation - b.rotation).abs().max() < 1e-9);
        assert!((a.translation - b.translation).abs().max() < 1e-9);
    }
}

#[test]
fn ape_needs_three_pairs_to_align() {
    let g = wiggly_path(2, 0.1);
    let pairs = associate(&g, &g, 1e-6).unwrap();
    assert_eq!(ape(&g, &g, &pairs, ApeAlign::Rigid).unwrap_err(), EvalError::TooFewPairs { need: 3, got: 2 });
}

fn random_cloud(rng: &mut ChaCha8Rng, n: usize) -> Vec<Vec3> {
    (0..n).map(|_| Vec3::from_fn(|_, _| rng.random_range(0.0..5.0))).collect()
}

#[test]
fn map_distance_to_self_is_zero() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let c = random_cloud(&mut rng, 300);
    let r = map_distance(&c, &c, 0.0, true).unwrap();
    assert!(r.stats.max < 1e-12);
    assert_eq!(r.histogram[0].count, 300);
}

#[test]
fn shifted_plane_without_alignment() {
    let reference: Vec<Vec3> = (0..100).flat_map(|i| (0..100).map(move |j| Vec3::new(i as f64 * 0.01, j as f64 * 0.01, 0.0))).collect();
    let target: Vec<Vec3> = (0..10).flat_map(|i| (0..10).map(move |j| Vec3::new(0.2 + i as f64 * 0.05, 0.2 + j as f64 * 0.05, 0.05))).collect();
    let r = map_distance(&target, &reference, 0.0, false).unwrap();
    assert!((r.stats.mean - 0.05).abs() < 1e-12);
    let aligned = map_distance(&target, &reference, 0.0, true).unwrap();
    assert!(aligned.stats.mean < 1e-6);
}

#[test]
fn map_distance_matches_exhaustive_oracle() {
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    for _ in 0..10 {
        let target = random_cloud(&mut rng, 200);
        let reference = random_cloud(&mut rng, 500);
        let voxel = 0.5;
        let r = map_distance(&target, &reference, voxel, false).unwrap();
        let mut cells: BTreeMap<[i64; 3], Vec<Vec3>> = BTreeMap::new();
        for p in &target {
            cells.entry([(p.x / voxel).floor() as i64, (p.y / voxel).floor() as i64, (p.z / voxel).floor() as i64]).or_default().push(*p);
        }
        let d: Vec<f64> = cells
            .values()
            .map(|v| v.iter().sum::<Vec3>() / v.len() as f64)
            .map(|c| reference.iter().map(|q| (q - c).norm()).fold(f64::INFINITY, f64::min))
            .collect();
        let o = ErrorStats::from_values(&d).unwrap();
        assert_eq!(r.stats.count, o.count);
        for (a, b) in [(r.stats.mean, o.mean), (r.stats.rmse, o.rmse), (r.stats.std, o.std), (r.stats.max, o.max)] {
            assert!((a - b).abs() < 1e-9);
        }
        let oh = histogram(&d, HISTOGRAM_WIDTH, HISTOGRAM_MAX);
        assert_eq!(r.histogram, oh);
    }
}

#[test]
fn histogram_layout() {
    let h = histogram(&[0.0, 0.049, 0.05, 0.99, 1.0, 7.0], 0.05, 1.0);
    assert_eq!(h.len(), 21);
    assert_eq!(h[0].count, 2);
    assert_eq!(h[1].count, 1);
    assert_eq!(h[19].count, 1);
    assert_eq!(h[20].count, 2);
    assert!((h.iter().map(|b| b.fraction).sum::<f64>() - 1.0).abs() < 1e-12);
}

#[test]
fn empty_clouds_are_errors() {
    assert_eq!(map_distance(&[], &[Vec3::zeros()], 0.4, false).unwrap_err(), EvalError::EmptyCloud);
    assert_eq!(map_distance(&[Vec3::zeros()], &[], 0.4, false).unwrap_err(), EvalError::EmptyCloud);
}

#[test]
fn exact_targets_align_perfectly() {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let t = random_pose(&mut rng);
    let m = random_cloud(&mut rng, 10);
    let s: Vec<Vec3> = m.iter().map(|p| t.transform_point(p)).collect();
    let r = robust_target_align(&m, &s, &MsacParams::default()).unwrap();
    assert_eq!(r.inliers.len(), 10);
    assert!(r.stats.max < 1e-9);
}

#[test]
fn gross_outliers_are_rejected() {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let sigma = 0.02;
    let noise = Normal::new(0.0, sigma).unwrap();
    let t = random_pose(&mut rng);
    let m: Vec<Vec3> = (0..20).map(|_| Vec3::from_fn(|_, _| rng.random_range(0.0..50.0))).collect();
    let mut s: Vec<Vec3> = m.iter().map(|p| t.transform_point(p) + Vec3::from_fn(|_, _| noise.sample(&mut rng))).collect();
    for p in s.iter_mut().take(6) {
        *p += Vec3::from_fn(|_, _| rng.random_range(2.0..10.0));
    }
    let r = robust_target_align(&m, &s, &MsacParams { threshold: 0.1, ..MsacParams::default() }).unwrap();
    assert_eq!(r.inliers, (6..20).collect::<Vec<_>>());
    assert!(r.stats.rmse < 2.0 * sigma * 3f64.sqrt(), "{}", r.stats.rmse);
}

#[test]
fn collinear_targets_are_degenerate() {
    let m = vec![Vec3::zeros(), Vec3::x(), Vec3::x() * 2.0];
    assert_eq!(robust_target_align(&m, &m, &MsacParams::default()).unwrap_err(), EvalError::Degenerate);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]
    #[test]
    fn rigid_ape_is_invariant_to_estimate_frame(seed in 0u64..10_000) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let g = wiggly_path(40, 0.1);
        let noise = Normal::new(0.0, 0.05).unwrap();
        let e: Vec<(f64, Pose)> = g.iter().map(|(s, p)| (*s, Pose::new(p.rotation, p.translation + Vec3::from_fn(|_, _| noise.sample(&mut rng))))).collect();
        let t = random_pose(&mut rng);
        let moved: Vec<(f64, Pose)> = e.iter().map(|(s, p)| (*s, t.compose(p))).collect();
        let pairs = associate(&g, &e, 1e-6).unwrap();
        let a = ape(&g, &e, &pairs, ApeAlign::Rigid).unwrap();
        let b = ape(&g, &moved, &pairs, ApeAlign::Rigid).unwrap();
        prop_assert!((a.translation.rmse - b.translation.rmse).abs() < 1e-9);
    }
}
