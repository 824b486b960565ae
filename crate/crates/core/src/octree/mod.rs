//! Adaptive occupancy octree.
//!
//! Leaves carry the affine warp into their local unit cube and the primes
//! of their own hash function. During the global stage the tree tracks an
//! exponentially decayed maximum of the predicted density per leaf, prunes
//! empty leaves and splits dense ones. The focal stage freezes it.

pub mod primes;

use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{invalid, Error, IoContext, Result};
use crate::geometry::{ray_aabb_intersect, Aabb, Ray, Vec3};

pub const MAGIC: &[u8; 8] = b"GFN-OCT1";

/// Decay applied to a leaf's occupancy each time it is observed.
pub const OCCUPANCY_DECAY: f32 = 0.95;

/// Multipliers `pi` and offsets `b` of one node's spatial hash.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct NodePrimes {
    pub pi: [u64; 3],
    pub b: [u64; 3],
}

#[derive(Clone, Debug, PartialEq)]
pub struct OctreeNode {
    pub node_id: u32,
    pub aabb: Aabb,
    /// Child ids, `-1` for none.
    pub children: [i32; 8],
    pub depth: u8,
    pub is_leaf: bool,
    /// Pruned leaves stay in the arena so node ids remain stable.
    pub dead: bool,
    pub occupancy_ema: f32,
    pub primes: NodePrimes,
}

impl OctreeNode {
    pub fn is_live_leaf(&self) -> bool {
        self.is_leaf && !self.dead
    }
}

/// Maps `x` from the node's box to the unit cube. Points marginally outside
/// the box are clamped.
pub fn warp_point(node: &OctreeNode, x: Vec3) -> [f64; 3] {
    let z = (x - node.aabb.min).div_elem(node.aabb.extent());
    let z = z.to_array();
    debug_assert!(
        z.iter().all(|&v| (-1e-6..=1.0 + 1e-6).contains(&v)),
        "point {x:?} outside node {} box",
        node.node_id
    );
    z.map(|v| v.clamp(0.0, 1.0))
}

pub fn unwarp_point(node: &OctreeNode, z: [f64; 3]) -> Vec3 {
    node.aabb.min + Vec3::from(z).mul_elem(node.aabb.extent())
}

/// Spatial hash of lattice corner `g` at `level`:
/// `((g1·π1 + b1) ⊕ (g2·π2 + b2) ⊕ (g3·π3 + b3) ⊕ salt(level)) mod L`
/// in wrapping 64-bit arithmetic. `table_len` must be a power of two.
#[inline]
pub fn hash_index(primes: &NodePrimes, g: [u32; 3], level: usize, table_len: usize) -> usize {
    debug_assert!(table_len.is_power_of_two());
    let mut h = primes::level_salt(level);
    for k in 0..3 {
        h ^= (g[k] as u64).wrapping_mul(primes.pi[k]).wrapping_add(primes.b[k]);
    }
    (h & (table_len as u64 - 1)) as usize
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct OctreeConfig {
    pub initial_depth: u8,
    pub max_depth: u8,
    pub prune_threshold: f32,
    pub subdivide_threshold: f32,
    pub seed: u64,
}

impl Default for OctreeConfig {
    fn default() -> Self {
        Self {
            initial_depth: 3,
            max_depth: 6,
            prune_threshold: 0.01,
            subdivide_threshold: 1.0,
            seed: 0,
        }
    }
}

/// Samples of one ray, front to back.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct RaySamples {
    pub ray_id: usize,
    pub t: Vec<f64>,
    /// Width of the interval each sample stands for.
    pub delta: Vec<f64>,
    pub pos: Vec<Vec3>,
    pub leaf: Vec<u32>,
}

impl RaySamples {
    pub fn len(&self) -> usize {
        self.t.len()
    }

    pub fn is_empty(&self) -> bool {
        self.t.is_empty()
    }

    pub fn clear(&mut self) {
        self.t.clear();
        self.delta.clear();
        self.pos.clear();
        self.leaf.clear();
    }
}

pub type RaySampleBatch = Vec<RaySamples>;

#[derive(Clone, Debug, PartialEq)]
pub struct SpaceOctree {
    nodes: Vec<OctreeNode>,
    config: OctreeConfig,
    frozen: bool,
    prime_order: Vec<u16>,
}

#[derive(Serialize, Deserialize)]
struct Header {
    node_count: usize,
    initial_depth: u8,
    max_depth: u8,
    prune_threshold: f32,
    subdivide_threshold: f32,
    frozen: bool,
    seed: u64,
}

const RECORD_LEN: usize = 6 * 8 + 8 * 4 + 1 + 4 + 6 * 8;

impl SpaceOctree {
    /// Uniform tree of `config.initial_depth` levels below the root.
    pub fn build(root: Aabb, config: OctreeConfig) -> Result<Self> {
        Aabb::new(root.min, root.max)?;
        if config.initial_depth < 1 {
            return Err(invalid("initial_depth must be at least 1"));
        }
        if config.max_depth < config.initial_depth {
            return Err(invalid("max_depth must be >= initial_depth"));
        }
        let mut tree = Self {
            nodes: Vec::new(),
            prime_order: prime_order(config.seed),
            config,
            frozen: false,
        };
        let root_id = tree.push_node(root, 0, 0.0);
        let mut frontier = vec![root_id];
        for _ in 0..tree.config.initial_depth {
            let mut next = Vec::with_capacity(frontier.len() * 8);
            for id in frontier {
                next.extend(tree.split(id));
            }
            frontier = next;
        }
        Ok(tree)
    }

    fn push_node(&mut self, aabb: Aabb, depth: u8, ema: f32) -> u32 {
        let id = self.nodes.len() as u32;
        let primes = self.primes_for(id);
        self.nodes.push(OctreeNode {
            node_id: id,
            aabb,
            children: [-1; 8],
            depth,
            is_leaf: true,
            dead: false,
            occupancy_ema: ema,
            primes,
        });
        id
    }

    fn primes_for(&self, id: u32) -> NodePrimes {
        let table = primes::table();
        let pick = |k: usize| {
            let slot = (6 * id as usize + k) % primes::TABLE_LEN;
            table[self.prime_order[slot] as usize]
        };
        NodePrimes {
            pi: [pick(0), pick(1), pick(2)],
            b: [pick(3), pick(4), pick(5)],
        }
    }

    fn split(&mut self, id: u32) -> [u32; 8] {
        let (aabb, depth, ema) = {
            let n = &self.nodes[id as usize];
            (n.aabb, n.depth, n.occupancy_ema)
        };
        let mut ids = [0u32; 8];
        for (octant, slot) in ids.iter_mut().enumerate() {
            *slot = self.push_node(aabb.octant(octant), depth + 1, ema);
        }
        let node = &mut self.nodes[id as usize];
        node.is_leaf = false;
        node.children = ids.map(|c| c as i32);
        ids
    }

    pub fn config(&self) -> &OctreeConfig {
        &self.config
    }

    pub fn root(&self) -> &OctreeNode {
        &self.nodes[0]
    }

    pub fn node(&self, id: u32) -> &OctreeNode {
        &self.nodes[id as usize]
    }

    pub fn nodes(&self) -> &[OctreeNode] {
        &self.nodes
    }

    pub fn node_count(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_frozen(&self) -> bool {
        self.frozen
    }

    pub fn leaves(&self) -> impl Iterator<Item = &OctreeNode> {
        self.nodes.iter().filter(|n| n.is_leaf)
    }

    pub fn live_leaf_count(&self) -> usize {
        self.nodes.iter().filter(|n| n.is_live_leaf()).count()
    }

    /// Leaf (live or dead) containing `p`, or `None` outside the root box.
    pub fn leaf_at(&self, p: Vec3) -> Option<u32> {
        let mut node = &self.nodes[0];
        if !node.aabb.contains(p, 0.0) {
            return None;
        }
        while !node.is_leaf {
            let c = node.aabb.center();
            let octant = usize::from(p.x >= c.x) | usize::from(p.y >= c.y) << 1 | usize::from(p.z >= c.z) << 2;
            node = &self.nodes[node.children[octant] as usize];
        }
        Some(node.node_id)
    }

    /// Live leaves pierced by the ray within `[t_near, t_far]`, ordered
    /// front to back, as `(leaf, t_enter, t_exit)` with no overlaps.
    pub fn leaf_intervals(&self, ray: &Ray) -> Vec<(u32, f64, f64)> {
        let mut out = Vec::new();
        if let Some(span) = self.clip(0, ray) {
            self.visit(0, span, ray, &mut out);
        }
        // rays running exactly along a split plane touch both neighbours
        let mut cleaned: Vec<(u32, f64, f64)> = Vec::with_capacity(out.len());
        for (id, mut t0, t1) in out {
            if let Some(&(_, _, prev_end)) = cleaned.last() {
                t0 = t0.max(prev_end);
            }
            if t1 > t0 {
                cleaned.push((id, t0, t1));
            }
        }
        cleaned
    }

    fn clip(&self, id: u32, ray: &Ray) -> Option<(f64, f64)> {
        let (a, b) = ray_aabb_intersect(ray.origin, ray.dir, &self.nodes[id as usize].aabb)?;
        let (a, b) = (a.max(ray.t_near), b.min(ray.t_far));
        (b > a).then_some((a, b))
    }

    fn visit(&self, id: u32, span: (f64, f64), ray: &Ray, out: &mut Vec<(u32, f64, f64)>) {
        let node = &self.nodes[id as usize];
        if node.is_leaf {
            if !node.dead {
                out.push((id, span.0, span.1));
            }
            return;
        }
        let mut kids: [(f64, f64, u32); 8] = [(f64::INFINITY, 0.0, 0); 8];
        let mut n = 0;
        for &c in &node.children {
            if let Some((a, b)) = self.clip(c as u32, ray) {
                kids[n] = (a, b, c as u32);
                n += 1;
            }
        }
        kids[..n].sort_by(|x, y| x.0.total_cmp(&y.0));
        for &(a, b, c) in &kids[..n] {
            self.visit(c, (a, b), ray, out);
        }
    }

    /// Places samples along `ray` inside live leaves, spaced
    /// `step_scale · leaf_diagonal / 16` apart. At most `max_points`
    /// samples are kept, dropping the farthest.
    pub fn sample_ray(&self, ray: &Ray, step_scale: f64, max_points: usize, out: &mut RaySamples) {
        out.clear();
        for (leaf, t0, t1) in self.leaf_intervals(ray) {
            let len = t1 - t0;
            let spacing = step_scale * self.nodes[leaf as usize].aabb.diagonal() / 16.0;
            let n = ((len / spacing).ceil() as usize).max(1);
            let delta = len / n as f64;
            for j in 0..n {
                if out.t.len() >= max_points {
                    return;
                }
                let t = t0 + (j as f64 + 0.5) * delta;
                out.t.push(t);
                out.delta.push(delta);
                out.pos.push(ray.at(t));
                out.leaf.push(leaf);
            }
        }
    }

    /// One update round from per-node maxima (`leaf_max[id] < 0` means the
    /// node was not observed): `ema ← max(decay·ema, observed)`.
    pub fn record_density_max(&mut self, leaf_max: &[f32]) {
        if self.frozen {
            log::warn!("record_density on a frozen octree ignored");
            return;
        }
        for (node, &m) in self.nodes.iter_mut().zip(leaf_max) {
            if m >= 0.0 && node.is_leaf {
                node.occupancy_ema = (OCCUPANCY_DECAY * node.occupancy_ema).max(m);
            }
        }
    }

    /// One update round from a batch of samples and their densities.
    pub fn record_density(&mut self, batch: &[RaySamples], sigmas: &[Vec<f32>]) {
        let mut leaf_max = vec![-1.0f32; self.nodes.len()];
        for (samples, sig) in batch.iter().zip(sigmas) {
            for (&leaf, &s) in samples.leaf.iter().zip(sig) {
                let m = &mut leaf_max[leaf as usize];
                *m = m.max(s);
            }
        }
        self.record_density_max(&leaf_max);
    }

    /// Prunes live leaves whose occupancy fell below the prune threshold and
    /// splits those above the subdivide threshold. Returns
    /// `(pruned, subdivided)`.
    pub fn refine(&mut self) -> (usize, usize) {
        if self.frozen {
            return (0, 0);
        }
        let mut pruned = 0;
        let mut to_split = Vec::new();
        for node in self.nodes.iter_mut().filter(|n| n.is_live_leaf()) {
            if node.occupancy_ema < self.config.prune_threshold {
                node.dead = true;
                pruned += 1;
            } else if node.occupancy_ema > self.config.subdivide_threshold && node.depth < self.config.max_depth {
                to_split.push(node.node_id);
            }
        }
        for &id in &to_split {
            self.split(id);
        }
        (pruned, to_split.len())
    }

    pub fn freeze(&mut self) {
        self.frozen = true;
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let header = Header {
            node_count: self.nodes.len(),
            initial_depth: self.config.initial_depth,
            max_depth: self.config.max_depth,
            prune_threshold: self.config.prune_threshold,
            subdivide_threshold: self.config.subdivide_threshold,
            frozen: self.frozen,
            seed: self.config.seed,
        };
        let json = serde_json::to_vec(&header).expect("header serializes");
        let mut out = Vec::with_capacity(12 + json.len() + self.nodes.len() * RECORD_LEN);
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&(json.len() as u32).to_le_bytes());
        out.extend_from_slice(&json);
        for n in &self.nodes {
            for v in n.aabb.min.to_array().iter().chain(&n.aabb.max.to_array()) {
                out.extend_from_slice(&v.to_le_bytes());
            }
            for c in n.children {
                out.extend_from_slice(&c.to_le_bytes());
            }
            out.push(u8::from(n.is_leaf) | u8::from(n.dead) << 1);
            out.extend_from_slice(&n.occupancy_ema.to_le_bytes());
            for p in n.primes.pi.iter().chain(&n.primes.b) {
                out.extend_from_slice(&p.to_le_bytes());
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let bad = |reason: &str| Error::BadCheckpoint {
            path: "<octree>".into(),
            reason: reason.to_string(),
        };
        if bytes.len() < 12 || &bytes[..8] != MAGIC {
            return Err(bad("missing GFN-OCT1 magic"));
        }
        let hlen = u32::from_le_bytes(bytes[8..12].try_into().unwrap()) as usize;
        let body = bytes.get(12..12 + hlen).ok_or_else(|| bad("truncated header"))?;
        let header: Header = serde_json::from_slice(body)?;
        let mut rest = &bytes[12 + hlen..];
        if rest.len() != header.node_count * RECORD_LEN {
            return Err(bad("node payload length does not match header"));
        }
        let config = OctreeConfig {
            initial_depth: header.initial_depth,
            max_depth: header.max_depth,
            prune_threshold: header.prune_threshold,
            subdivide_threshold: header.subdivide_threshold,
            seed: header.seed,
        };
        let mut take = |n: usize| {
            let (a, b) = rest.split_at(n);
            rest = b;
            a
        };
        let mut nodes = Vec::with_capacity(header.node_count);
        for id in 0..header.node_count {
            let mut f = [0.0f64; 6];
            for v in &mut f {
                *v = f64::from_le_bytes(take(8).try_into().unwrap());
            }
            let mut children = [-1i32; 8];
            for c in &mut children {
                *c = i32::from_le_bytes(take(4).try_into().unwrap());
            }
            let flags = take(1)[0];
            let ema = f32::from_le_bytes(take(4).try_into().unwrap());
            let mut p = [0u64; 6];
            for v in &mut p {
                *v = u64::from_le_bytes(take(8).try_into().unwrap());
            }
            nodes.push(OctreeNode {
                node_id: id as u32,
                aabb: Aabb {
                    min: Vec3::new(f[0], f[1], f[2]),
                    max: Vec3::new(f[3], f[4], f[5]),
                },
                children,
                depth: 0,
                is_leaf: flags & 1 != 0,
                dead: flags & 2 != 0,
                occupancy_ema: ema,
                primes: NodePrimes {
                    pi: [p[0], p[1], p[2]],
                    b: [p[3], p[4], p[5]],
                },
            });
        }
        // depth is implied by the tree shape
        let mut stack = vec![0usize];
        while let Some(id) = stack.pop() {
            let depth = nodes[id].depth;
            for c in nodes[id].children {
                if c >= 0 {
                    let c = c as usize;
                    if c >= nodes.len() {
                        return Err(bad("child id out of range"));
                    }
                    nodes[c].depth = depth + 1;
                    stack.push(c);
                }
            }
        }
        Ok(Self {
            nodes,
            prime_order: prime_order(config.seed),
            config,
            frozen: header.frozen,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_bytes()).at(path)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).at(path)?;
        Self::from_bytes(&bytes).map_err(|e| match e {
            Error::BadCheckpoint { reason, .. } => Error::BadCheckpoint {
                path: path.to_path_buf(),
                reason,
            },
            e => e,
        })
    }

    /// Hex SHA-256 of the serialized tree.
    pub fn structure_hash(&self) -> String {
        hex_digest(&self.to_bytes())
    }
}

fn prime_order(seed: u64) -> Vec<u16> {
    let mut order: Vec<u16> = (0..primes::TABLE_LEN as u16).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    order
}

pub(crate) fn hex_digest(bytes: &[u8]) -> String {
    Sha256::digest(bytes).iter().map(|b| format!("{b:02x}")).collect()
}
