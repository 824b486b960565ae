//! Balanced camera partitioning and block selection.

use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{invalid, IoContext, Result};
use crate::geometry::Vec3;

const MAX_ROUNDS: usize = 100;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BlockAssignment {
    pub k: usize,
    /// Camera ids that were clustered, in input order.
    pub camera_ids: Vec<usize>,
    /// Block of each entry of `camera_ids`.
    pub block_of: Vec<usize>,
    pub centers: Vec<Vec3>,
    pub members: Vec<Vec<usize>>,
}

impl BlockAssignment {
    pub fn block_of_camera(&self, camera_id: usize) -> Option<usize> {
        self.camera_ids.iter().position(|&c| c == camera_id).map(|i| self.block_of[i])
    }

    pub fn sizes(&self) -> Vec<usize> {
        self.members.iter().map(Vec::len).collect()
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, serde_json::to_string_pretty(self)?).at(path)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let a: BlockAssignment = serde_json::from_str(&std::fs::read_to_string(path).at(path)?)?;
        if a.k == 0 || a.centers.len() != a.k || a.members.len() != a.k || a.block_of.len() != a.camera_ids.len() {
            return Err(invalid(format!("{}: inconsistent block assignment", path.display())));
        }
        Ok(a)
    }
}

/// Capacity-constrained k-means over camera positions. Block sizes differ
/// by at most one.
pub fn balanced_cluster(positions: &[Vec3], camera_ids: &[usize], k: usize, seed: u64) -> Result<BlockAssignment> {
    let m = positions.len();
    if k == 0 || k > m {
        return Err(invalid(format!("cannot split {m} cameras into {k} blocks")));
    }
    if camera_ids.len() != m {
        return Err(invalid("one camera id per position required"));
    }
    if positions.iter().any(|p| !p.is_finite()) {
        return Err(invalid("camera positions must be finite"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut centers = kmeans_pp(positions, k, &mut rng);
    let mut labels = vec![usize::MAX; m];
    for _ in 0..MAX_ROUNDS {
        let next = assign_balanced(positions, &centers);
        let done = next == labels;
        labels = next;
        centers = centroids(positions, &labels, k);
        if done {
            break;
        }
    }
    let mut members = vec![Vec::new(); k];
    for (i, &l) in labels.iter().enumerate() {
        members[l].push(camera_ids[i]);
    }
    Ok(BlockAssignment {
        k,
        camera_ids: camera_ids.to_vec(),
        block_of: labels,
        centers,
        members,
    })
}

fn kmeans_pp(points: &[Vec3], k: usize, rng: &mut ChaCha8Rng) -> Vec<Vec3> {
    let mut centers = vec![points[rng.gen_range(0..points.len())]];
    while centers.len() < k {
        let d2: Vec<f64> = points
            .iter()
            .map(|p| centers.iter().map(|c| (*p - *c).norm_squared()).fold(f64::INFINITY, f64::min))
            .collect();
        let total: f64 = d2.iter().sum();
        let pick = if total > 0.0 {
            let mut r = rng.gen::<f64>() * total;
            let mut chosen = points.len() - 1;
            for (i, &d) in d2.iter().enumerate() {
                if r < d {
                    chosen = i;
                    break;
                }
                r -= d;
            }
            chosen
        } else {
            rng.gen_range(0..points.len())
        };
        centers.push(points[pick]);
    }
    centers
}

/// Greedy matching: points with the largest gap between their best and
/// second-best centre choose first; each takes its nearest block that still
/// has room. `m % k` blocks may hold `ceil(m/k)` points, the rest `floor`.
fn assign_balanced(points: &[Vec3], centers: &[Vec3]) -> Vec<usize> {
    let (m, k) = (points.len(), centers.len());
    let floor = m / k;
    let big_slots = m % k;
    let dist: Vec<Vec<f64>> = points
        .iter()
        .map(|p| centers.iter().map(|c| (*p - *c).norm_squared()).collect())
        .collect();
    let gap = |d: &[f64]| {
        let mut s: Vec<f64> = d.to_vec();
        s.sort_by(f64::total_cmp);
        if s.len() > 1 {
            s[1] - s[0]
        } else {
            0.0
        }
    };
    let gaps: Vec<f64> = dist.iter().map(|d| gap(d)).collect();
    let mut order: Vec<usize> = (0..m).collect();
    order.sort_by(|&a, &b| gaps[b].total_cmp(&gaps[a]).then(a.cmp(&b)));
    let mut sizes = vec![0usize; k];
    let mut big_used = 0;
    let mut labels = vec![0; m];
    for i in order {
        let mut prefs: Vec<usize> = (0..k).collect();
        prefs.sort_by(|&a, &b| dist[i][a].total_cmp(&dist[i][b]).then(a.cmp(&b)));
        let c = prefs
            .into_iter()
            .find(|&c| sizes[c] < floor || (sizes[c] == floor && big_used < big_slots))
            .expect("total capacity equals point count");
        if sizes[c] == floor {
            big_used += 1;
        }
        sizes[c] += 1;
        labels[i] = c;
    }
    labels
}

fn centroids(points: &[Vec3], labels: &[usize], k: usize) -> Vec<Vec3> {
    let mut sum = vec![Vec3::ZERO; k];
    let mut count = vec![0usize; k];
    for (p, &l) in points.iter().zip(labels) {
        sum[l] += *p;
        count[l] += 1;
    }
    sum.into_iter().zip(count).map(|(s, c)| s / c.max(1) as f64).collect()
}

/// Block whose centre is closest to `position`, lowest id on ties.
pub fn nearest_block(assignment: &BlockAssignment, position: Vec3) -> usize {
    let mut best = 0;
    let mut best_d = f64::INFINITY;
    for (i, c) in assignment.centers.iter().enumerate() {
        let d = (position - *c).norm_squared();
        if d < best_d {
            best = i;
            best_d = d;
        }
    }
    best
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::Mat3;

    fn ids(n: usize) -> Vec<usize> {
        (0..n).collect()
    }

    fn two_clusters(rng: &mut ChaCha8Rng) -> Vec<Vec3> {
        let mut pts = Vec::new();
        for c in [Vec3::new(-5.0, 0.0, 0.0), Vec3::new(5.0, 1.0, 0.0)] {
            for _ in 0..10 {
                pts.push(c + Vec3::new(rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0)));
            }
        }
        pts
    }

    fn sse(points: &[Vec3], labels: &[usize], k: usize) -> f64 {
        let c = centroids(points, labels, k);
        points.iter().zip(labels).map(|(p, &l)| (*p - c[l]).norm_squared()).sum()
    }

    #[test]
    fn single_block_centre_is_mean() {
        let pts = vec![Vec3::new(1.0, 2.0, 3.0), Vec3::new(3.0, 0.0, -1.0), Vec3::new(2.0, 1.0, 1.0)];
        let a = balanced_cluster(&pts, &ids(3), 1, 0).unwrap();
        assert_eq!(a.members, vec![vec![0, 1, 2]]);
        assert!((a.centers[0] - Vec3::new(2.0, 1.0, 1.0)).norm() < 1e-12);
    }

    #[test]
    fn k_equals_m_gives_singletons() {
        let pts: Vec<Vec3> = (0..5).map(|i| Vec3::new(i as f64, (i * i) as f64, 0.0)).collect();
        let a = balanced_cluster(&pts, &ids(5), 5, 3).unwrap();
        assert!(a.sizes().iter().all(|&s| s == 1));
        for (i, &b) in a.block_of.iter().enumerate() {
            assert_eq!(a.centers[b], pts[i]);
        }
    }

    #[test]
    fn rejects_too_many_blocks() {
        assert!(balanced_cluster(&[Vec3::ZERO], &[0], 2, 0).is_err());
        assert!(balanced_cluster(&[Vec3::ZERO], &[0], 0, 0).is_err());
    }

    #[test]
    fn recovers_separated_clusters_like_brute_force() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let pts = two_clusters(&mut rng);
        let a = balanced_cluster(&pts, &ids(20), 2, 7).unwrap();
        // exhaustive search over balanced 2-partitions with point 0 in block 0
        let mut best = (f64::INFINITY, 0u32);
        for mask in 0u32..(1 << 20) {
            if mask & 1 != 0 || mask.count_ones() != 10 {
                continue;
            }
            let labels: Vec<usize> = (0..20).map(|i| (mask >> i & 1) as usize).collect();
            let cost = sse(&pts, &labels, 2);
            if cost < best.0 {
                best = (cost, mask);
            }
        }
        let first = a.block_of[0];
        for i in 0..20 {
            let brute = (best.1 >> i & 1) as usize;
            assert_eq!(a.block_of[i] == first, brute == 0, "point {i}");
        }
        assert_eq!(a.sizes(), vec![10, 10]);
    }

    #[test]
    fn sizes_balanced_for_awkward_counts() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        for (m, k) in [(10, 4), (17, 3), (7, 7), (23, 5)] {
            let pts: Vec<Vec3> = (0..m)
                .map(|_| Vec3::new(rng.gen_range(-3.0..3.0), rng.gen(), rng.gen_range(-3.0..3.0)))
                .collect();
            let a = balanced_cluster(&pts, &ids(m), k, 5).unwrap();
            let s = a.sizes();
            assert!(s.iter().max().unwrap() - s.iter().min().unwrap() <= 1, "{s:?}");
            assert_eq!(s.iter().sum::<usize>(), m);
        }
    }

    #[test]
    fn deterministic_under_seed() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let pts = two_clusters(&mut rng);
        assert_eq!(
            balanced_cluster(&pts, &ids(20), 3, 11).unwrap(),
            balanced_cluster(&pts, &ids(20), 3, 11).unwrap()
        );
    }

    fn with_centers(centers: Vec<Vec3>) -> BlockAssignment {
        BlockAssignment {
            k: centers.len(),
            camera_ids: vec![],
            block_of: vec![],
            members: vec![vec![]; centers.len()],
            centers,
        }
    }

    #[test]
    fn nearest_block_rules() {
        let centers: Vec<Vec3> = (0..6).map(|i| Vec3::new(i as f64 * 10.0, 0.0, 0.0)).collect();
        let mut a = with_centers(centers);
        assert_eq!(nearest_block(&a, Vec3::new(30.0, 0.0, 0.0)), 3);
        // blocks 2 and 5 equidistant from the query, all others farther
        a.centers[5] = Vec3::new(20.0, 8.0, 0.0);
        a.centers[3] = Vec3::new(100.0, 0.0, 0.0);
        a.centers[4] = Vec3::new(100.0, 5.0, 0.0);
        assert_eq!(nearest_block(&a, Vec3::new(20.0, 4.0, 0.0)), 2);
    }

    #[test]
    fn nearest_block_matches_linear_scan() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let centers: Vec<Vec3> = (0..7)
            .map(|_| Vec3::new(rng.gen_range(-5.0..5.0), rng.gen_range(-5.0..5.0), rng.gen_range(-5.0..5.0)))
            .collect();
        let a = with_centers(centers.clone());
        for _ in 0..100 {
            let q = Vec3::new(rng.gen_range(-6.0..6.0), rng.gen_range(-6.0..6.0), rng.gen_range(-6.0..6.0));
            let d: Vec<f64> = centers.iter().map(|c| (q - *c).norm()).collect();
            let min = d.iter().cloned().fold(f64::INFINITY, f64::min);
            let want = d.iter().position(|&v| v == min).unwrap();
            assert_eq!(nearest_block(&a, q), want);
        }
    }

    #[test]
    fn nearest_block_is_similarity_invariant() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let centers: Vec<Vec3> = (0..5)
            .map(|_| Vec3::new(rng.gen_range(-5.0..5.0), rng.gen(), rng.gen_range(-5.0..5.0)))
            .collect();
        let rot = Mat3::rotation_y(0.7);
        let (scale, shift) = (2.5, Vec3::new(3.0, -1.0, 7.0));
        let tf = |p: Vec3| rot.mul_vec(p) * scale + shift;
        let a = with_centers(centers.clone());
        let b = with_centers(centers.into_iter().map(tf).collect());
        for _ in 0..100 {
            let q = Vec3::new(rng.gen_range(-6.0..6.0), rng.gen(), rng.gen_range(-6.0..6.0));
            assert_eq!(nearest_block(&a, q), nearest_block(&b, tf(q)));
        }
    }

    #[test]
    fn json_round_trip() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let pts = two_clusters(&mut rng);
        let a = balanced_cluster(&pts, &(100..120).collect::<Vec<_>>(), 2, 1).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("blocks.json");
        a.save(&p).unwrap();
        assert_eq!(BlockAssignment::load(&p).unwrap(), a);
        assert_eq!(a.block_of_camera(100), Some(a.block_of[0]));
    }
}
