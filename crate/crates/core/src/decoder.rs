//! Shared radiance decoder: a density MLP over the hash feature and a
//! colour MLP over its geometric feature plus the encoded view direction.

use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, IoContext, Result};
use crate::geometry::Vec3;

pub const MAGIC: &[u8; 8] = b"GFN-DEC1";
pub const SH_DIM: usize = 16;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    Relu,
    Identity,
}

/// Fully connected network stored as one flat parameter vector. Each layer
/// holds its weights as `[in][out]` followed by its bias.
#[derive(Clone, Debug, PartialEq)]
pub struct Mlp {
    dims: Vec<usize>,
    acts: Vec<Activation>,
    offsets: Vec<usize>,
    pub params: Vec<f32>,
}

/// Inputs of every layer plus the final output, concatenated.
#[derive(Clone, Debug, Default)]
pub struct MlpCache {
    acts: Vec<f32>,
}

/// Reusable buffers for reverse passes.
#[derive(Clone, Debug, Default)]
pub struct BackwardScratch {
    delta: Vec<f32>,
    prev: Vec<f32>,
    color_in: Vec<f32>,
    head: Vec<f32>,
}

/// `Σ a_i b_i` over eight interleaved partial sums, which vectorises.
#[inline]
fn dot(a: &[f32], b: &[f32]) -> f32 {
    let mut lanes = [0.0f32; 8];
    let (ca, cb) = (a.chunks_exact(8), b.chunks_exact(8));
    let tail: f32 = ca.remainder().iter().zip(cb.remainder()).map(|(x, y)| x * y).sum();
    for (x, y) in ca.zip(cb) {
        for k in 0..8 {
            lanes[k] += x[k] * y[k];
        }
    }
    lanes.iter().sum::<f32>() + tail
}

impl Mlp {
    pub fn new(dims: Vec<usize>, acts: Vec<Activation>) -> Result<Self> {
        if dims.len() < 2 || acts.len() != dims.len() - 1 || dims.contains(&0) {
            return Err(invalid("mlp needs at least one layer with nonzero widths"));
        }
        let mut offsets = vec![0];
        for w in dims.windows(2) {
            offsets.push(offsets.last().unwrap() + w[0] * w[1] + w[1]);
        }
        let n = *offsets.last().unwrap();
        Ok(Self {
            dims,
            acts,
            offsets,
            params: vec![0.0; n],
        })
    }

    pub fn input_dim(&self) -> usize {
        self.dims[0]
    }

    pub fn output_dim(&self) -> usize {
        *self.dims.last().unwrap()
    }

    pub fn dims(&self) -> &[usize] {
        &self.dims
    }

    pub fn activations(&self) -> &[Activation] {
        &self.acts
    }

    pub fn layer_count(&self) -> usize {
        self.acts.len()
    }

    pub fn param_count(&self) -> usize {
        self.params.len()
    }

    /// He-uniform hidden layers, `U(-1e-2, 1e-2)` output layer, zero biases.
    pub fn init(&mut self, rng: &mut impl Rng) {
        let last = self.layer_count() - 1;
        for l in 0..self.layer_count() {
            let (i, o) = (self.dims[l], self.dims[l + 1]);
            let bound = if l == last { 1e-2 } else { (6.0 / i as f32).sqrt() };
            let off = self.offsets[l];
            for w in &mut self.params[off..off + i * o] {
                *w = rng.gen_range(-bound..bound);
            }
            for b in &mut self.params[off + i * o..off + i * o + o] {
                *b = 0.0;
            }
        }
    }

    fn cache_len(&self) -> usize {
        self.dims.iter().sum()
    }

    /// Forward pass; the output is the tail of `cache`.
    pub fn forward<'c>(&self, input: &[f32], cache: &'c mut MlpCache) -> &'c [f32] {
        debug_assert_eq!(input.len(), self.dims[0]);
        cache.acts.clear();
        cache.acts.resize(self.cache_len(), 0.0);
        cache.acts[..input.len()].copy_from_slice(input);
        let mut start = 0;
        for l in 0..self.layer_count() {
            let (ni, no) = (self.dims[l], self.dims[l + 1]);
            let off = self.offsets[l];
            let w = &self.params[off..off + ni * no];
            let b = &self.params[off + ni * no..off + ni * no + no];
            let (done, rest) = cache.acts.split_at_mut(start + ni);
            let x = &done[start..];
            let y = &mut rest[..no];
            y.copy_from_slice(b);
            for (i, &xi) in x.iter().enumerate() {
                if xi == 0.0 {
                    continue;
                }
                for (yo, &wio) in y.iter_mut().zip(&w[i * no..(i + 1) * no]) {
                    *yo += xi * wio;
                }
            }
            if self.acts[l] == Activation::Relu {
                for v in y.iter_mut() {
                    *v = v.max(0.0);
                }
            }
            start += ni;
        }
        &cache.acts[start..]
    }

    /// Reverse pass from `d_out`. Parameter gradients are added to `grad`
    /// when given; the input gradient is written to `d_in`.
    pub fn backward(
        &self,
        cache: &MlpCache,
        d_out: &[f32],
        mut grad: Option<&mut [f32]>,
        d_in: &mut [f32],
        scratch: &mut BackwardScratch,
    ) {
        let BackwardScratch { delta, prev, .. } = scratch;
        delta.clear();
        delta.extend_from_slice(d_out);
        let mut end = cache.acts.len();
        for l in (0..self.layer_count()).rev() {
            let (ni, no) = (self.dims[l], self.dims[l + 1]);
            let start = end - no - ni;
            let x = &cache.acts[start..start + ni];
            let y = &cache.acts[start + ni..end];
            end = start + ni;
            if self.acts[l] == Activation::Relu {
                for (d, &v) in delta.iter_mut().zip(y) {
                    if v <= 0.0 {
                        *d = 0.0;
                    }
                }
            }
            let off = self.offsets[l];
            if let Some(g) = grad.as_deref_mut() {
                let (gw, gb) = g[off..off + ni * no + no].split_at_mut(ni * no);
                for (i, &xi) in x.iter().enumerate() {
                    if xi == 0.0 {
                        continue;
                    }
                    for (go, &dd) in gw[i * no..(i + 1) * no].iter_mut().zip(delta.iter()) {
                        *go += xi * dd;
                    }
                }
                for (gbo, &dd) in gb.iter_mut().zip(delta.iter()) {
                    *gbo += dd;
                }
            }
            let w = &self.params[off..off + ni * no];
            prev.clear();
            prev.extend(w.chunks_exact(no).map(|row| dot(row, &delta[..])));
            std::mem::swap(delta, prev);
        }
        d_in.copy_from_slice(delta);
    }
}

/// Real spherical harmonics up to degree 3, ordered by degree then `m`.
pub fn dir_encoding(d: Vec3) -> [f32; SH_DIM] {
    let n = d.norm();
    let d = if (n - 1.0).abs() > 1e-6 && n > 0.0 { d / n } else { d };
    let (x, y, z) = (d.x, d.y, d.z);
    let (xx, yy, zz) = (x * x, y * y, z * z);
    [
        0.282_094_791_773_878_14,
        -0.488_602_511_902_919_9 * y,
        0.488_602_511_902_919_9 * z,
        -0.488_602_511_902_919_9 * x,
        1.092_548_430_592_079_2 * x * y,
        -1.092_548_430_592_079_2 * y * z,
        0.315_391_565_252_520_05 * (3.0 * zz - 1.0),
        -1.092_548_430_592_079_2 * x * z,
        0.546_274_215_296_039_6 * (xx - yy),
        -0.590_043_589_926_643_5 * y * (3.0 * xx - yy),
        2.890_611_442_640_554 * x * y * z,
        -0.457_045_799_464_465_8 * y * (5.0 * zz - 1.0),
        0.373_176_332_590_115_4 * z * (5.0 * zz - 3.0),
        -0.457_045_799_464_465_8 * x * (5.0 * zz - 1.0),
        1.445_305_721_320_277 * z * (xx - yy),
        -0.590_043_589_926_643_5 * x * (xx - 3.0 * yy),
    ]
    .map(|v| v as f32)
}

#[inline]
pub fn softplus(x: f32) -> f32 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

#[inline]
pub fn sigmoid(x: f32) -> f32 {
    1.0 / (1.0 + (-x).exp())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DecoderConfig {
    pub feature_dim: usize,
    pub hidden: usize,
    pub hidden_layers: usize,
    pub geo_dim: usize,
    pub seed: u64,
}

impl Default for DecoderConfig {
    fn default() -> Self {
        Self {
            feature_dim: 16,
            hidden: 64,
            hidden_layers: 2,
            geo_dim: 15,
            seed: 0,
        }
    }
}

fn stack(input: usize, hidden: usize, layers: usize, output: usize) -> Result<Mlp> {
    let mut dims = vec![input];
    dims.extend(std::iter::repeat_n(hidden, layers));
    dims.push(output);
    let mut acts = vec![Activation::Relu; layers];
    acts.push(Activation::Identity);
    Mlp::new(dims, acts)
}

#[derive(Clone, Debug, PartialEq)]
pub struct RadianceDecoder {
    pub density: Mlp,
    pub color: Mlp,
    frozen: bool,
}

/// Gradient accumulators matching a decoder's parameters.
#[derive(Clone, Debug, PartialEq)]
pub struct DecoderGrads {
    pub density: Vec<f32>,
    pub color: Vec<f32>,
}

impl DecoderGrads {
    pub fn add(&mut self, other: &DecoderGrads) {
        for (a, b) in self.density.iter_mut().zip(&other.density) {
            *a += b;
        }
        for (a, b) in self.color.iter_mut().zip(&other.color) {
            *a += b;
        }
    }

    pub fn is_zero(&self) -> bool {
        self.density.iter().chain(&self.color).all(|&g| g == 0.0)
    }
}

/// Forward state of one decode, kept for the backward pass.
#[derive(Clone, Debug, Default)]
pub struct DecodeCache {
    density: MlpCache,
    color: MlpCache,
    color_in: Vec<f32>,
    raw_sigma: f32,
    raw_rgb: [f32; 3],
    rgb: [f32; 3],
}

impl RadianceDecoder {
    pub fn new(cfg: &DecoderConfig) -> Result<Self> {
        let mut dec = Self::zeroed(cfg)?;
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        dec.density.init(&mut rng);
        dec.color.init(&mut rng);
        Ok(dec)
    }

    /// All weights and biases zero.
    pub fn zeroed(cfg: &DecoderConfig) -> Result<Self> {
        Ok(Self {
            density: stack(cfg.feature_dim, cfg.hidden, cfg.hidden_layers, 1 + cfg.geo_dim)?,
            color: stack(cfg.geo_dim + SH_DIM, cfg.hidden, cfg.hidden_layers, 3)?,
            frozen: false,
        })
    }

    pub fn from_mlps(density: Mlp, color: Mlp) -> Result<Self> {
        if color.input_dim() != density.output_dim() - 1 + SH_DIM || color.output_dim() != 3 {
            return Err(Error::DimensionMismatch("colour mlp does not fit density mlp".into()));
        }
        Ok(Self {
            density,
            color,
            frozen: false,
        })
    }

    pub fn feature_dim(&self) -> usize {
        self.density.input_dim()
    }

    pub fn is_frozen(&self) -> bool {
        self.frozen
    }

    pub fn freeze(&mut self) {
        self.frozen = true;
    }

    pub fn zero_grads(&self) -> DecoderGrads {
        DecoderGrads {
            density: vec![0.0; self.density.param_count()],
            color: vec![0.0; self.color.param_count()],
        }
    }

    pub fn decode_cached(&self, feature: &[f32], sh: &[f32; SH_DIM], cache: &mut DecodeCache) -> (f32, [f32; 3]) {
        let h = self.density.forward(feature, &mut cache.density);
        cache.raw_sigma = h[0];
        cache.color_in.clear();
        cache.color_in.extend_from_slice(&h[1..]);
        cache.color_in.extend_from_slice(sh);
        let c = self.color.forward(&cache.color_in, &mut cache.color);
        cache.raw_rgb = [c[0], c[1], c[2]];
        cache.rgb = cache.raw_rgb.map(sigmoid);
        (softplus(cache.raw_sigma), cache.rgb)
    }

    pub fn decode(&self, feature: &[f32], d: Vec3) -> (f32, [f32; 3]) {
        self.decode_cached(feature, &dir_encoding(d), &mut DecodeCache::default())
    }

    /// Reverse pass of [`decode_cached`](Self::decode_cached). Weight
    /// gradients go to `grads` unless the decoder is frozen; the feature
    /// gradient is always written to `d_feature`.
    pub fn backward_cached(
        &self,
        cache: &DecodeCache,
        d_sigma: f32,
        d_rgb: [f32; 3],
        grads: Option<&mut DecoderGrads>,
        d_feature: &mut [f32],
        scratch: &mut BackwardScratch,
    ) {
        let grads = if self.frozen { None } else { grads };
        let (gd, gc) = match grads {
            Some(g) => (Some(&mut g.density[..]), Some(&mut g.color[..])),
            None => (None, None),
        };
        // σ'(x) = σ(x)·σ(−x) stays nonzero where 1 − σ(x) rounds to 0
        let d_c: [f32; 3] = std::array::from_fn(|k| d_rgb[k] * cache.rgb[k] * sigmoid(-cache.raw_rgb[k]));
        let mut d_color_in = std::mem::take(&mut scratch.color_in);
        d_color_in.resize(self.color.input_dim(), 0.0);
        self.color.backward(&cache.color, &d_c, gc, &mut d_color_in, scratch);
        let geo = self.density.output_dim() - 1;
        let mut d_h = std::mem::take(&mut scratch.head);
        d_h.clear();
        d_h.push(d_sigma * sigmoid(cache.raw_sigma));
        d_h.extend_from_slice(&d_color_in[..geo]);
        self.density.backward(&cache.density, &d_h, gd, d_feature, scratch);
        scratch.color_in = d_color_in;
        scratch.head = d_h;
    }

    /// Convenience reverse pass that recomputes the forward state.
    pub fn decode_backward(
        &self,
        feature: &[f32],
        d: Vec3,
        d_sigma: f32,
        d_rgb: [f32; 3],
        grads: Option<&mut DecoderGrads>,
    ) -> Vec<f32> {
        let mut cache = DecodeCache::default();
        self.decode_cached(feature, &dir_encoding(d), &mut cache);
        let mut d_feature = vec![0.0; feature.len()];
        self.backward_cached(&cache, d_sigma, d_rgb, grads, &mut d_feature, &mut BackwardScratch::default());
        d_feature
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let header = DecHeader {
            density: LayerSpec {
                dims: self.density.dims.clone(),
                activations: self.density.acts.clone(),
            },
            color: LayerSpec {
                dims: self.color.dims.clone(),
                activations: self.color.acts.clone(),
            },
            output: ["softplus".into(), "sigmoid".into()],
            frozen: self.frozen,
        };
        let json = serde_json::to_vec(&header).expect("header serializes");
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&(json.len() as u32).to_le_bytes());
        out.extend_from_slice(&json);
        for v in self.density.params.iter().chain(&self.color.params) {
            out.extend_from_slice(&v.to_le_bytes());
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let bad = |reason: &str| Error::BadCheckpoint {
            path: "<decoder>".into(),
            reason: reason.into(),
        };
        if bytes.len() < 12 || &bytes[..8] != MAGIC {
            return Err(bad("missing GFN-DEC1 magic"));
        }
        let hlen = u32::from_le_bytes(bytes[8..12].try_into().unwrap()) as usize;
        let json = bytes.get(12..12 + hlen).ok_or_else(|| bad("truncated header"))?;
        let h: DecHeader = serde_json::from_slice(json)?;
        let mut density = Mlp::new(h.density.dims, h.density.activations)?;
        let mut color = Mlp::new(h.color.dims, h.color.activations)?;
        let payload = &bytes[12 + hlen..];
        let (nd, nc) = (density.param_count(), color.param_count());
        if payload.len() != (nd + nc) * 4 {
            return Err(bad("parameter payload length does not match header"));
        }
        let vals: Vec<f32> = payload
            .chunks_exact(4)
            .map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]))
            .collect();
        if vals.iter().any(|v| !v.is_finite()) {
            return Err(bad("non-finite weight"));
        }
        density.params.copy_from_slice(&vals[..nd]);
        color.params.copy_from_slice(&vals[nd..]);
        let mut dec = Self::from_mlps(density, color)?;
        dec.frozen = h.frozen;
        Ok(dec)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_bytes()).at(path)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_bytes(&std::fs::read(path).at(path)?)
    }
}

#[derive(Serialize, Deserialize)]
struct LayerSpec {
    dims: Vec<usize>,
    activations: Vec<Activation>,
}

#[derive(Serialize, Deserialize)]
struct DecHeader {
    density: LayerSpec,
    color: LayerSpec,
    output: [String; 2],
    frozen: bool,
}
