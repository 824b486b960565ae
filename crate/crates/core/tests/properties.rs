//! Property tests for the invariants of the public types.

use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use focal_nerf::encoder::corner_weights;
use focal_nerf::geometry::clip_ray;
use focal_nerf::image::Image;
use focal_nerf::metrics::{psnr, ssim};
use focal_nerf::octree::{OctreeConfig, RaySamples, SpaceOctree};
use focal_nerf::partition::balanced_cluster;
use focal_nerf::renderer::composite;
use focal_nerf::sampler::{error_map_from_render, AliasTable, ErrorMapSet, Origin, PixelSampler};
use focal_nerf::trainer::{adam_step, lr_at, AdamState};
use focal_nerf::{Aabb, Vec3};

fn scene_box() -> Aabb {
    Aabb::new(Vec3::new(-2.0, -1.0, -1.0), Vec3::new(2.0, 1.0, 1.0)).unwrap()
}

/// A tree refined with random occupancies for a few rounds.
fn random_tree(seed: u64, rounds: usize) -> SpaceOctree {
    let mut tree = SpaceOctree::build(
        scene_box(),
        OctreeConfig {
            initial_depth: 2,
            max_depth: 4,
            seed,
            ..OctreeConfig::default()
        },
    )
    .unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for _ in 0..rounds {
        let obs: Vec<f32> = (0..tree.node_count())
            .map(|_| match rng.gen_range(0..4) {
                0 => 0.0,
                1 => 5.0,
                _ => rng.gen_range(0.0..2.0),
            })
            .collect();
        tree.record_density_max(&obs);
        tree.refine();
    }
    tree
}

fn arb_point() -> impl Strategy<Value = Vec3> {
    (-2.0..2.0f64, -1.0..1.0f64, -1.0..1.0f64).prop_map(|(x, y, z)| Vec3::new(x, y, z))
}

fn contains(b: &Aabb, p: Vec3) -> bool {
    (0..3).all(|k| b.min.to_array()[k] <= p.to_array()[k] && p.to_array()[k] <= b.max.to_array()[k])
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn children_tile_their_parent(seed in 0u64..1000, rounds in 0usize..4) {
        let tree = random_tree(seed, rounds);
        for n in tree.nodes().iter().filter(|n| !n.is_leaf) {
            let vol: f64 = n.children.iter().map(|&c| {
                let b = tree.node(c as u32).aabb;
                prop_assert!(contains(&n.aabb, b.min) && contains(&n.aabb, b.max));
                let e = b.extent();
                Ok(e.x * e.y * e.z)
            }).sum::<Result<f64, TestCaseError>>()?;
            let e = n.aabb.extent();
            prop_assert!((vol - e.x * e.y * e.z).abs() < 1e-12);
        }
        for n in tree.nodes().iter().filter(|n| n.is_leaf) {
            prop_assert!(n.children.iter().all(|&c| c == -1));
        }
    }

    #[test]
    fn primes_are_odd_and_large(seed in 0u64..1000) {
        let tree = random_tree(seed, 2);
        for n in tree.nodes() {
            for p in n.primes.pi {
                prop_assert!(p % 2 == 1 && p > 1 << 31);
            }
        }
        let mut ids: Vec<u32> = tree.nodes().iter().map(|n| n.node_id).collect();
        ids.dedup();
        prop_assert_eq!(ids.len(), tree.node_count());
    }

    #[test]
    fn every_point_has_exactly_one_leaf(seed in 0u64..1000, p in arb_point()) {
        let tree = random_tree(seed, 3);
        let owners = tree.nodes().iter().filter(|n| n.is_leaf && {
            let b = n.aabb;
            (0..3).all(|k| {
                let (lo, hi, v) = (b.min.to_array()[k], b.max.to_array()[k], p.to_array()[k]);
                lo <= v && (v < hi || (hi == tree.root().aabb.max.to_array()[k] && v <= hi))
            })
        }).count();
        prop_assert_eq!(owners, 1);
        let leaf = tree.leaf_at(p).expect("inside the root box");
        prop_assert!(contains(&tree.node(leaf).aabb, p));
    }

    #[test]
    fn ray_samples_are_ordered_and_bounded(
        seed in 0u64..500,
        o in (-5.0..5.0f64, -5.0..5.0f64, -5.0..5.0f64),
        target in arb_point(),
        max_points in 1usize..200,
        step_scale in 0.25..2.0f64,
    ) {
        let tree = random_tree(seed, 2);
        let origin = Vec3::new(o.0, o.1, o.2);
        let Some(ray) = clip_ray(origin, (target - origin).normalized(), &tree.root().aabb) else {
            return Ok(());
        };
        let mut s = RaySamples::default();
        tree.sample_ray(&ray, step_scale, max_points, &mut s);
        prop_assert!(s.len() <= max_points);
        for i in 0..s.len() {
            prop_assert!(s.delta[i] > 0.0);
            prop_assert!(!tree.node(s.leaf[i]).dead);
            if i > 0 {
                prop_assert!(s.t[i] > s.t[i - 1]);
            }
        }
    }

    #[test]
    fn trilinear_weights_form_a_partition_of_unity(f in prop::array::uniform3(0.0..=1.0f64)) {
        let w = corner_weights(f);
        prop_assert!(w.iter().all(|&v| v >= 0.0));
        prop_assert!((w.iter().sum::<f64>() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn compositing_weights_are_a_subprobability(
        sig in prop::collection::vec(0.0..20.0f64, 0..64),
        seed in 0u64..1000,
    ) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let n = sig.len();
        let col: Vec<[f64; 3]> = (0..n).map(|_| [rng.gen(), rng.gen(), rng.gen()]).collect();
        let del: Vec<f64> = (0..n).map(|_| rng.gen_range(1e-3..0.3)).collect();
        let ts: Vec<f64> = (0..n).map(|i| i as f64 * 0.3 + 0.1).collect();
        let out = composite(&sig, &col, &del, &ts, [1.0; 3], 30.0).unwrap();
        prop_assert!(out.opacity >= 0.0 && out.opacity <= 1.0 + 1e-6);
        prop_assert!(out.weights.iter().all(|&w| w >= 0.0));
        prop_assert!((out.weights.iter().sum::<f64>() - out.opacity).abs() < 1e-9);
        prop_assert!(out.color.iter().all(|&c| (-1e-9..=1.0 + 1e-9).contains(&c)));
    }

    #[test]
    fn error_maps_are_nonnegative_and_full_size(
        w in 1usize..6, h in 1usize..6, factor in 1usize..4, seed in 0u64..1000,
    ) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (fw, fh) = (w * factor, h * factor);
        let truth = Image::from_data(fw, fh, 3, (0..fw * fh * 3).map(|_| rng.gen()).collect()).unwrap();
        let render = Image::from_data(w, h, 3, (0..w * h * 3).map(|_| rng.gen()).collect()).unwrap();
        let m = error_map_from_render(0, &render, &truth, factor as u32).unwrap();
        prop_assert!(m.low.data.iter().all(|&v| v >= 0.0));
        prop_assert_eq!((m.full.width, m.full.height), (fw, fh));
    }

    #[test]
    fn hybrid_batches_have_exact_size_and_split(
        batch in 1usize..600, fraction in 0.0..=1.0f64, seed in 0u64..1000,
    ) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let dims = [(7u32, 5u32), (3, 9)];
        let maps = dims.iter().enumerate().map(|(i, &(w, h))| {
            let img = Image::from_data(w as usize, h as usize, 1, (0..w * h).map(|_| rng.gen()).collect()).unwrap();
            focal_nerf::sampler::ErrorMap { image_id: i + 10, low: img.clone(), full: img }
        }).collect();
        let set = ErrorMapSet { maps };
        let sampler = PixelSampler::from_errors(&set, &[10, 11]).unwrap();
        let b = sampler.sample_hybrid(batch, fraction, &mut rng).unwrap();
        let want = (fraction * batch as f64).round() as usize;
        prop_assert_eq!(b.len(), batch);
        prop_assert_eq!(b.count(Origin::Weighted), want);
        for p in &b.entries {
            let (w, h) = dims[p.image - 10];
            prop_assert!(p.x < w && p.y < h);
        }
    }

    #[test]
    fn alias_table_draws_only_positive_weights(
        weights in prop::collection::vec(prop_oneof![Just(0.0), 0.0..5.0f64], 1..40),
        seed in 0u64..1000,
    ) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        match AliasTable::new(&weights) {
            None => prop_assert!(weights.iter().all(|&w| w <= 0.0)),
            Some(t) => {
                prop_assert_eq!(t.len(), weights.len());
                for _ in 0..200 {
                    prop_assert!(weights[t.sample(&mut rng)] > 0.0);
                }
            }
        }
    }

    #[test]
    fn blocks_are_balanced_and_cover_every_camera(
        pts in prop::collection::vec((-3.0..3.0f64, -1.0..1.0f64, -3.0..3.0f64), 2..40),
        k in 1usize..5,
        seed in 0u64..100,
    ) {
        prop_assume!(k <= pts.len());
        let pos: Vec<Vec3> = pts.iter().map(|&(x, y, z)| Vec3::new(x, y, z)).collect();
        let ids: Vec<usize> = (0..pos.len()).map(|i| 100 + i).collect();
        let a = balanced_cluster(&pos, &ids, k, seed).unwrap();
        let sizes = a.sizes();
        prop_assert!(sizes.iter().max().unwrap() - sizes.iter().min().unwrap() <= 1);
        let mut seen: Vec<usize> = a.members.concat();
        seen.sort();
        prop_assert_eq!(seen, ids);
        prop_assert!(a.centers.iter().all(|c| c.to_array().iter().all(|v| v.is_finite())));
    }

    #[test]
    fn learning_rate_decays_monotonically(total in 1usize..10_000, start in 1e-4..1e-1f64, ratio in 1.5..1e3f64) {
        let end = start / ratio;
        let mut prev = f64::INFINITY;
        for step in [0, total / 3, total / 2, total] {
            let lr = lr_at(step, total, start, end);
            prop_assert!(lr > 0.0 && lr <= prev);
            prev = lr;
        }
        prop_assert!((lr_at(0, total, start, end) - start).abs() < 1e-15);
        prop_assert!((lr_at(total, total, start, end) - end).abs() < 1e-12 * start);
    }

    #[test]
    fn frozen_adam_steps_leave_parameters_bit_identical(
        params in prop::collection::vec(-1.0..1.0f32, 1..64), seed in 0u64..1000,
    ) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let grads: Vec<f32> = params.iter().map(|_| rng.gen_range(-1.0..1.0)).collect();
        let mut p = params.clone();
        let mut st = AdamState::new(p.len());
        prop_assert!(!adam_step(&mut st, &mut p, &grads, 1e-2, true).unwrap());
        prop_assert_eq!(
            p.iter().map(|v| v.to_bits()).collect::<Vec<_>>(),
            params.iter().map(|v| v.to_bits()).collect::<Vec<_>>()
        );
        for _ in 0..5 {
            adam_step(&mut st, &mut p, &grads, 1e-2, false).unwrap();
        }
        prop_assert!(st.m.iter().chain(&st.v).all(|v| v.is_finite()));
        st.reset();
        prop_assert!(st.m.iter().chain(&st.v).all(|&v| v == 0.0) && st.step == 0);
    }

    #[test]
    fn image_scores_stay_in_range(seed in 0u64..1000, w in 8usize..20, h in 8usize..20) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let a = Image::from_data(w, h, 3, (0..w * h * 3).map(|_| rng.gen()).collect()).unwrap();
        let b = Image::from_data(w, h, 3, (0..w * h * 3).map(|_| rng.gen()).collect()).unwrap();
        let s = ssim(&a, &b).unwrap();
        prop_assert!((-1.0..=1.0).contains(&s));
        prop_assert_eq!(psnr(&a, &a).unwrap(), 99.0);
        prop_assert!(psnr(&a, &b).unwrap() < 99.0);
    }
}
