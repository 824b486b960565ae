//! Multi-resolution anchored hash encoding.
//!
//! One table of `L` rows, each row holding `feats_per_level` values for
//! every level. A point is warped into its octree leaf's unit cube, and per
//! level the eight surrounding lattice corners are hashed with that leaf's
//! own primes. The feature is the trilinear blend of those rows.

use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, IoContext, Result};
use crate::geometry::Vec3;
use crate::octree::{primes, warp_point, OctreeNode};

pub const MAGIC: &[u8; 8] = b"GFN-ENC1";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EncoderConfig {
    pub levels: usize,
    pub feats_per_level: usize,
    pub base_resolution: u32,
    pub max_resolution: u32,
    pub log2_table_len: u32,
    pub seed: u64,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        Self {
            levels: 8,
            feats_per_level: 2,
            base_resolution: 16,
            max_resolution: 256,
            log2_table_len: 15,
            seed: 0,
        }
    }
}

impl EncoderConfig {
    pub fn validate(&self) -> Result<()> {
        if self.levels == 0 || self.feats_per_level == 0 {
            return Err(invalid("encoder needs at least one level and one feature"));
        }
        if self.base_resolution == 0 || self.max_resolution < self.base_resolution {
            return Err(invalid("encoder resolutions must satisfy 0 < base <= max"));
        }
        if !(1..=30).contains(&self.log2_table_len) {
            return Err(invalid("table length must be a power of two between 2 and 2^30"));
        }
        Ok(())
    }

    pub fn table_len(&self) -> usize {
        1 << self.log2_table_len
    }

    pub fn output_dim(&self) -> usize {
        self.levels * self.feats_per_level
    }

    /// Lattice resolution per level, geometric between base and max.
    pub fn resolutions(&self) -> Vec<u32> {
        if self.levels == 1 {
            return vec![self.base_resolution];
        }
        let growth = ((self.max_resolution as f64).ln() - (self.base_resolution as f64).ln()) / (self.levels - 1) as f64;
        (0..self.levels)
            .map(|l| {
                let r = (self.base_resolution as f64 * (growth * l as f64).exp()).round();
                (r as u32).clamp(self.base_resolution, self.max_resolution)
            })
            .collect()
    }

    fn same_dims(&self, other: &EncoderConfig) -> bool {
        self.levels == other.levels
            && self.feats_per_level == other.feats_per_level
            && self.base_resolution == other.base_resolution
            && self.max_resolution == other.max_resolution
            && self.log2_table_len == other.log2_table_len
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum EncoderRole {
    Global,
    Focal,
}

/// Trilinear weights of the 8 corners for fractional position `frac`.
/// Corner `c` takes the upper neighbour on axis `k` when bit `k` is set.
pub fn corner_weights(frac: [f64; 3]) -> [f64; 8] {
    let mut w = [0.0; 8];
    for (c, wc) in w.iter_mut().enumerate() {
        let mut v = 1.0;
        for k in 0..3 {
            v *= if c >> k & 1 == 1 { frac[k] } else { 1.0 - frac[k] };
        }
        *wc = v;
    }
    w
}

/// Precomputed table rows and weights for one point. A plan depends only on
/// the encoder layout, the leaf and the point, so global and focal encoders
/// share it.
#[derive(Clone, Debug, Default)]
pub struct LookupPlan {
    pub rows: Vec<u32>,
    pub weights: Vec<f32>,
}

/// Dimensions shared by every encoder of a model, with cached resolutions
/// and level salts.
#[derive(Clone, Debug)]
pub struct Layout {
    levels: usize,
    feats: usize,
    table_len: usize,
    resolutions: Vec<u32>,
    salts: Vec<u64>,
}

impl Layout {
    pub fn new(cfg: &EncoderConfig) -> Self {
        Self {
            levels: cfg.levels,
            feats: cfg.feats_per_level,
            table_len: cfg.table_len(),
            resolutions: cfg.resolutions(),
            salts: (0..cfg.levels).map(primes::level_salt).collect(),
        }
    }

    pub fn output_dim(&self) -> usize {
        self.levels * self.feats
    }

    pub fn plan(&self, node: &OctreeNode, x: Vec3, plan: &mut LookupPlan) {
        let z = warp_point(node, x);
        plan.rows.clear();
        plan.weights.clear();
        for (level, &res) in self.resolutions.iter().enumerate() {
            let mut base = [0u32; 3];
            let mut frac = [0.0; 3];
            for k in 0..3 {
                let p = z[k] * res as f64;
                let g = (p.floor() as u32).min(res - 1);
                base[k] = g;
                frac[k] = p - g as f64;
            }
            let w = corner_weights(frac);
            // per-axis hash terms for the lower and upper lattice corner
            let terms: [[u64; 2]; 3] = std::array::from_fn(|k| {
                let pi = node.primes.pi[k];
                let b = node.primes.b[k];
                let g = base[k] as u64;
                [g.wrapping_mul(pi).wrapping_add(b), (g + 1).wrapping_mul(pi).wrapping_add(b)]
            });
            let mask = self.table_len as u64 - 1;
            let salt = self.salts[level];
            for (c, &wc) in w.iter().enumerate() {
                let h = salt ^ terms[0][c & 1] ^ terms[1][c >> 1 & 1] ^ terms[2][c >> 2 & 1];
                plan.rows.push((h & mask) as u32);
                plan.weights.push(wc as f32);
            }
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct HashEncoder {
    config: EncoderConfig,
    pub table: Vec<f32>,
    pub grad: Vec<f32>,
    frozen: bool,
    role: EncoderRole,
    block_id: Option<usize>,
}

#[derive(Serialize, Deserialize)]
struct Header {
    levels: usize,
    feats_per_level: usize,
    base_resolution: u32,
    max_resolution: u32,
    table_len: usize,
    resolutions: Vec<u32>,
    frozen: bool,
    role: EncoderRole,
    block_id: Option<usize>,
    seed: u64,
}

impl HashEncoder {
    /// Global encoder with entries drawn from `U(-1e-4, 1e-4)`.
    pub fn init_global(config: &EncoderConfig) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let n = config.table_len() * config.output_dim();
        let table = (0..n).map(|_| rng.gen_range(-1e-4f32..1e-4)).collect();
        Ok(Self {
            config: config.clone(),
            table,
            grad: vec![0.0; n],
            frozen: false,
            role: EncoderRole::Global,
            block_id: None,
        })
    }

    /// Zero-initialised focal encoder with the global encoder's dimensions.
    pub fn init_focal(config: &EncoderConfig, global: &HashEncoder, block_id: usize) -> Result<Self> {
        config.validate()?;
        if !config.same_dims(&global.config) {
            return Err(Error::DimensionMismatch("focal encoder must match the global encoder".into()));
        }
        let n = config.table_len() * config.output_dim();
        Ok(Self {
            config: config.clone(),
            table: vec![0.0; n],
            grad: vec![0.0; n],
            frozen: false,
            role: EncoderRole::Focal,
            block_id: Some(block_id),
        })
    }

    /// Focal encoder initialised like a global one, for training a block
    /// without global guidance.
    pub fn init_scratch(config: &EncoderConfig, block_id: usize) -> Result<Self> {
        let mut enc = Self::init_global(config)?;
        enc.role = EncoderRole::Focal;
        enc.block_id = Some(block_id);
        Ok(enc)
    }

    pub fn config(&self) -> &EncoderConfig {
        &self.config
    }

    pub fn layout(&self) -> Layout {
        Layout::new(&self.config)
    }

    pub fn role(&self) -> EncoderRole {
        self.role
    }

    pub fn block_id(&self) -> Option<usize> {
        self.block_id
    }

    pub fn is_frozen(&self) -> bool {
        self.frozen
    }

    pub fn freeze(&mut self) {
        self.frozen = true;
    }

    pub fn output_dim(&self) -> usize {
        self.config.output_dim()
    }

    pub fn same_dims(&self, other: &HashEncoder) -> bool {
        self.config.same_dims(&other.config)
    }

    /// Adds this encoder's feature for `plan` into `out`.
    #[inline]
    pub fn accumulate(&self, plan: &LookupPlan, out: &mut [f32]) {
        let width = self.output_dim();
        let feats = self.config.feats_per_level;
        for level in 0..self.config.levels {
            let o = &mut out[level * feats..(level + 1) * feats];
            for c in 0..8 {
                let i = level * 8 + c;
                let w = plan.weights[i];
                let base = plan.rows[i] as usize * width + level * feats;
                for (f, v) in o.iter_mut().enumerate() {
                    *v += w * self.table[base + f];
                }
            }
        }
    }

    pub fn encode_planned(&self, plan: &LookupPlan) -> Vec<f32> {
        let mut out = vec![0.0; self.output_dim()];
        self.accumulate(plan, &mut out);
        out
    }

    pub fn encode(&self, x: Vec3, node: &OctreeNode) -> Vec<f32> {
        let mut plan = LookupPlan::default();
        self.layout().plan(node, x, &mut plan);
        self.encode_planned(&plan)
    }

    /// Scatters `upstream · weight` into `grad` (same layout as the table).
    #[inline]
    pub fn backward_into(&self, plan: &LookupPlan, upstream: &[f32], grad: &mut [f32]) {
        let width = self.output_dim();
        let feats = self.config.feats_per_level;
        for level in 0..self.config.levels {
            let up = &upstream[level * feats..(level + 1) * feats];
            for c in 0..8 {
                let i = level * 8 + c;
                let w = plan.weights[i];
                let base = plan.rows[i] as usize * width + level * feats;
                for (f, u) in up.iter().enumerate() {
                    grad[base + f] += w * u;
                }
            }
        }
    }

    /// Accumulates the gradient of a feature into this encoder's own
    /// accumulator. No-op when frozen.
    pub fn encode_backward(&mut self, x: Vec3, node: &OctreeNode, upstream: &[f32]) {
        if self.frozen {
            return;
        }
        let mut plan = LookupPlan::default();
        self.layout().plan(node, x, &mut plan);
        let mut grad = std::mem::take(&mut self.grad);
        self.backward_into(&plan, upstream, &mut grad);
        self.grad = grad;
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let header = Header {
            levels: self.config.levels,
            feats_per_level: self.config.feats_per_level,
            base_resolution: self.config.base_resolution,
            max_resolution: self.config.max_resolution,
            table_len: self.config.table_len(),
            resolutions: self.config.resolutions(),
            frozen: self.frozen,
            role: self.role,
            block_id: self.block_id,
            seed: self.config.seed,
        };
        let json = serde_json::to_vec(&header).expect("header serializes");
        let mut out = Vec::with_capacity(12 + json.len() + self.table.len() * 4);
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&(json.len() as u32).to_le_bytes());
        out.extend_from_slice(&json);
        for v in &self.table {
            out.extend_from_slice(&v.to_le_bytes());
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let bad = |reason: &str| Error::BadCheckpoint {
            path: "<encoder>".into(),
            reason: reason.into(),
        };
        if bytes.len() < 12 || &bytes[..8] != MAGIC {
            return Err(bad("missing GFN-ENC1 magic"));
        }
        let hlen = u32::from_le_bytes(bytes[8..12].try_into().unwrap()) as usize;
        let json = bytes.get(12..12 + hlen).ok_or_else(|| bad("truncated header"))?;
        let h: Header = serde_json::from_slice(json)?;
        if !h.table_len.is_power_of_two() {
            return Err(bad("table length is not a power of two"));
        }
        let config = EncoderConfig {
            levels: h.levels,
            feats_per_level: h.feats_per_level,
            base_resolution: h.base_resolution,
            max_resolution: h.max_resolution,
            log2_table_len: h.table_len.trailing_zeros(),
            seed: h.seed,
        };
        config.validate()?;
        let payload = &bytes[12 + hlen..];
        let n = config.table_len() * config.output_dim();
        if payload.len() != n * 4 {
            return Err(bad("table payload length does not match header"));
        }
        let table = payload
            .chunks_exact(4)
            .map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]))
            .collect();
        Ok(Self {
            config,
            table,
            grad: vec![0.0; n],
            frozen: h.frozen,
            role: h.role,
            block_id: h.block_id,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_bytes()).at(path)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_bytes(&std::fs::read(path).at(path)?)
    }
}

/// `global + focal` features for the same lookup.
pub fn encode_fused(global: &HashEncoder, focal: &HashEncoder, x: Vec3, node: &OctreeNode) -> Result<Vec<f32>> {
    if !global.same_dims(focal) {
        return Err(Error::DimensionMismatch("fused encoders differ in shape".into()));
    }
    let mut plan = LookupPlan::default();
    global.layout().plan(node, x, &mut plan);
    let mut out = global.encode_planned(&plan);
    for (o, r) in out.iter_mut().zip(focal.encode_planned(&plan)) {
        *o += r;
    }
    Ok(out)
}
