use std::collections::BTreeMap;

use nalgebra::{Vector2, Vector3};
use proptest::prelude::*;

use vislam::camera::CameraRig;
use vislam::estimator::{maximum_spanning_tree, overlap_fraction, triangulate, Keypoint};
use vislam::geometry::{exp, Pose};
use vislam::loopclosure::{distribute_loop_error, four_dof_correction, loop_residual};
use vislam::FrameId;

fn vec3(s: f64) -> impl Strategy<Value = Vector3<f64>> {
    (-s..s, -s..s, -s..s).prop_map(|(x, y, z)| Vector3::new(x, y, z))
}

fn pose(t: f64, r: f64) -> impl Strategy<Value = Pose> {
    (vec3(t), vec3(r)).prop_map(|(p, w)| Pose::new(p, exp(&w)))
}

/// Brute-force maximum total weight over all spanning forests of a small graph.
fn best_forest_weight(n: usize, w: &BTreeMap<(FrameId, FrameId), usize>) -> usize {
    let edges: Vec<_> = w.iter().filter(|(_, v)| **v > 0).map(|(k, v)| (*k, *v)).collect();
    let mut best = 0;
    for mask in 0u32..(1 << edges.len()) {
        let mut parent: Vec<usize> = (0..n).collect();
        fn find(p: &mut Vec<usize>, x: usize) -> usize {
            if p[x] != x {
                let r = find(p, p[x]);
                p[x] = r;
            }
            p[x]
        }
        let mut total = 0;
        let mut ok = true;
        for (i, ((a, b), v)) in edges.iter().enumerate() {
            if mask & (1 << i) == 0 {
                continue;
            }
            let (ra, rb) = (find(&mut parent, a.0 as usize), find(&mut parent, b.0 as usize));
            if ra == rb {
                ok = false;
                break;
            }
            parent[ra] = rb;
            total += v;
        }
        if ok {
            best = best.max(total);
        }
    }
    best
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn distributed_chain_closes_exactly(
        start in pose(5.0, 3.0),
        steps in prop::collection::vec(pose(1.0, 0.3), 1..30),
        gap in pose(1.0, 1.0),
    ) {
        let mut chain = vec![start];
        for s in &steps {
            chain.push(chain.last().unwrap().compose(s));
        }
        let target = chain.last().unwrap().compose(&gap);
        let out = distribute_loop_error(&chain, &target).unwrap();
        prop_assert!(loop_residual(&out, &target) < 1e-10);
        prop_assert_eq!(out[0], chain[0]);
        prop_assert_eq!(out.len(), chain.len());
    }

    #[test]
    fn consistent_chain_is_unchanged(start in pose(5.0, 3.0), steps in prop::collection::vec(pose(1.0, 0.3), 1..20)) {
        let mut chain = vec![start];
        for s in &steps {
            chain.push(chain.last().unwrap().compose(s));
        }
        let out = distribute_loop_error(&chain, chain.last().unwrap()).unwrap();
        for (a, b) in out.iter().zip(&chain) {
            prop_assert!(a.box_minus(b).norm() < 1e-9);
        }
    }

    #[test]
    fn four_dof_correction_preserves_gravity(current in pose(5.0, 1.0), yaw in -3.0..3.0f64, shift in vec3(2.0)) {
        let delta = Pose::new(shift, exp(&Vector3::new(0.0, 0.0, yaw)));
        let solved = delta.compose(&current);
        let c = four_dof_correction(&current, &solved);
        prop_assert!((c.q.inverse() * Vector3::z() - Vector3::z()).norm() < 1e-9);
        prop_assert!(c.compose(&current).box_minus(&solved).norm() < 1e-9);
    }

    #[test]
    fn overlap_is_a_fraction(
        pts in prop::collection::vec((0.0..640.0f64, 0.0..480.0f64, any::<bool>()), 0..60),
    ) {
        let rig = CameraRig::default();
        let kps: Vec<Keypoint> = pts.iter().enumerate().map(|(i, (u, v, _))| Keypoint { cam: 0, uv: Vector2::new(*u, *v), track: i as u64 }).collect();
        let matched: Vec<bool> = pts.iter().map(|p| p.2).collect();
        let o = overlap_fraction(&rig, &kps, &matched, 15.0, 0.25);
        prop_assert!((0.0..=1.0).contains(&o));
        let all = overlap_fraction(&rig, &kps, &vec![true; kps.len()], 15.0, 0.25);
        prop_assert!(kps.is_empty() || all == 1.0);
        prop_assert!(overlap_fraction(&rig, &kps, &vec![false; kps.len()], 15.0, 0.25) == 0.0);
    }

    #[test]
    fn spanning_tree_is_maximal(n in 2usize..6, raw in prop::collection::vec(0usize..6, 15)) {
        let nodes: Vec<FrameId> = (0..n as u64).map(FrameId).collect();
        let mut w = BTreeMap::new();
        let mut k = 0;
        for a in 0..n as u64 {
            for b in a + 1..n as u64 {
                w.insert((FrameId(a), FrameId(b)), raw[k]);
                k += 1;
            }
        }
        let tree = maximum_spanning_tree(&nodes, &w);
        let total: usize = tree.iter().map(|e| w[e]).sum();
        prop_assert_eq!(total, best_forest_weight(n, &w));
        prop_assert!(tree.iter().all(|e| w[e] > 0));
        // a forest: no more edges than nodes minus one
        prop_assert!(tree.len() < n);
    }

    #[test]
    fn triangulation_recovers_exact_points(p in vec3(3.0), cams in prop::collection::vec(pose(1.0, 0.2), 2..5)) {
        let point = p + Vector3::new(0.0, 0.0, 8.0);
        let views: Vec<_> = cams.iter().map(|t| (*t, t.inverse().transform(&point))).collect();
        prop_assume!(views.iter().all(|(_, b)| b.z > 1.0));
        let base = (cams[0].r - cams[1].r).norm();
        prop_assume!(base > 0.2);
        let est = triangulate(&views).unwrap();
        prop_assert!((est - point).norm() < 1e-6 * point.norm());
    }
}
