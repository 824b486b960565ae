//! Two-stage optimisation.
//!
//! The global stage trains the global encoder, the decoder and the octree
//! on uniformly sampled pixels of every training view. The focal stage
//! freezes all of that and trains one zero-initialised residual encoder per
//! block on a mix of error-weighted and uniform pixels from the block's own
//! views.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::decoder::{DecoderConfig, DecoderGrads, RadianceDecoder};
use crate::encoder::{EncoderConfig, HashEncoder};
use crate::error::{invalid, Error, IoContext, Result};
use crate::exec::{self, Execution};
use crate::geometry::{generate_ray, load_cameras, save_cameras, Camera, Split};
use crate::image::Image;
use crate::metrics::{psnr, ssim, ImageMetrics, MetricReport};
use crate::octree::{hex_digest, OctreeConfig, SpaceOctree};
use crate::partition::{balanced_cluster, nearest_block, BlockAssignment};
use crate::renderer::{mean_samples_per_ray, render_image, Field, RayTrace, RenderSettings};
use crate::sampler::{compute_error_maps, ErrorMapSet, Pixel, PixelSampler};
use crate::scene::{render_reference, two_district_cameras, two_district_scene, BlobScene, SceneConfig};

pub const ADAM_BETA1: f64 = 0.9;
pub const ADAM_BETA2: f64 = 0.999;
pub const ADAM_EPS: f64 = 1e-15;

/// Every tunable of a run. Loaded from a flat TOML file; missing keys take
/// their defaults.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub seed: u64,
    pub global_steps: usize,
    pub focal_steps_per_block: usize,
    pub batch_rays: usize,
    pub max_points_per_ray: usize,
    pub step_scale: f64,
    pub early_stop_transmittance: f64,
    pub lr_global_start: f64,
    pub lr_global_end: f64,
    pub lr_focal_start: f64,
    pub lr_focal_end: f64,
    /// Multiplier on the global learning rate for the decoder weights.
    pub decoder_lr_scale: f64,
    pub epsilon: f64,
    pub weighted_fraction: f64,
    pub k_blocks: usize,
    pub error_map_downsample: u32,
    pub error_map_refresh: usize,
    pub refine_every: usize,
    pub octree_refine: bool,
    pub octree_initial_depth: u8,
    pub octree_max_depth: u8,
    /// Leaves whose occupancy (decayed max density) stays below this are
    /// pruned. 0.25 keeps the optical thickness of one depth-3 sample step
    /// under 0.01.
    pub prune_threshold: f32,
    pub subdivide_threshold: f32,
    pub levels: usize,
    pub feats_per_level: usize,
    pub base_resolution: u32,
    pub max_resolution: u32,
    pub log2_table_len: u32,
    pub hidden: usize,
    pub hidden_layers: usize,
    pub geo_dim: usize,
    /// Train focal encoders on their own, without the global encoder.
    pub focal_from_scratch: bool,
    /// Gradient shards per batch; 0 picks the worker count.
    pub grad_shards: usize,
    pub log_every: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            global_steps: 5000,
            focal_steps_per_block: 3000,
            batch_rays: 1024,
            max_points_per_ray: 1024,
            step_scale: 1.0,
            early_stop_transmittance: 1e-4,
            lr_global_start: 1e-2,
            lr_global_end: 1e-4,
            lr_focal_start: 5e-3,
            lr_focal_end: 5e-5,
            decoder_lr_scale: 0.1,
            epsilon: 1e-6,
            weighted_fraction: 0.3,
            k_blocks: 2,
            error_map_downsample: 4,
            error_map_refresh: 10_000,
            refine_every: 512,
            octree_refine: true,
            octree_initial_depth: 3,
            octree_max_depth: 4,
            prune_threshold: 0.25,
            subdivide_threshold: 1.0,
            levels: 8,
            feats_per_level: 2,
            base_resolution: 2,
            max_resolution: 32,
            log2_table_len: 15,
            hidden: 64,
            hidden_layers: 2,
            geo_dim: 15,
            focal_from_scratch: false,
            grad_shards: 8,
            log_every: 500,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("batch_rays", self.batch_rays),
            ("max_points_per_ray", self.max_points_per_ray),
            ("k_blocks", self.k_blocks),
            ("refine_every", self.refine_every),
            ("error_map_refresh", self.error_map_refresh),
        ];
        for (name, v) in positive {
            if v == 0 {
                return Err(Error::Config(format!("{name} must be positive")));
            }
        }
        if !(self.lr_global_start > self.lr_global_end && self.lr_global_end > 0.0)
            || !(self.lr_focal_start > self.lr_focal_end && self.lr_focal_end > 0.0)
        {
            return Err(Error::Config("learning rates must satisfy start > end > 0".into()));
        }
        if !(self.epsilon > 0.0) || !(self.step_scale > 0.0) || !(self.decoder_lr_scale > 0.0) {
            return Err(Error::Config("epsilon, step_scale and decoder_lr_scale must be positive".into()));
        }
        if !(0.0..=1.0).contains(&self.weighted_fraction) {
            return Err(Error::Config("weighted_fraction must lie in [0, 1]".into()));
        }
        if !(0.0..1.0).contains(&self.early_stop_transmittance) {
            return Err(Error::Config("early_stop_transmittance must lie in [0, 1)".into()));
        }
        if self.error_map_downsample == 0 {
            return Err(Error::Config("error_map_downsample must be positive".into()));
        }
        self.encoder_config().validate()
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: TrainConfig = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_toml(&std::fs::read_to_string(path).at(path)?)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    /// Short digest of the canonical JSON form.
    pub fn hash(&self) -> String {
        let json = serde_json::to_vec(self).expect("config serializes");
        hex_digest(&json)[..16].to_string()
    }

    pub fn encoder_config(&self) -> EncoderConfig {
        EncoderConfig {
            levels: self.levels,
            feats_per_level: self.feats_per_level,
            base_resolution: self.base_resolution,
            max_resolution: self.max_resolution,
            log2_table_len: self.log2_table_len,
            seed: self.seed ^ 0x0e0c,
        }
    }

    pub fn decoder_config(&self) -> DecoderConfig {
        DecoderConfig {
            feature_dim: self.levels * self.feats_per_level,
            hidden: self.hidden,
            hidden_layers: self.hidden_layers,
            geo_dim: self.geo_dim,
            seed: self.seed ^ 0x0dec,
        }
    }

    pub fn octree_config(&self) -> OctreeConfig {
        OctreeConfig {
            initial_depth: self.octree_initial_depth,
            max_depth: self.octree_max_depth,
            prune_threshold: self.prune_threshold,
            subdivide_threshold: self.subdivide_threshold,
            seed: self.seed,
        }
    }

    pub fn render_settings(&self, background: [f64; 3]) -> RenderSettings {
        RenderSettings {
            step_scale: self.step_scale,
            max_points: self.max_points_per_ray,
            background,
            early_stop: self.early_stop_transmittance,
        }
    }

    fn shards(&self) -> usize {
        if self.grad_shards == 0 {
            exec::worker_count().max(1)
        } else {
            self.grad_shards
        }
    }
}

/// Mean over channels of `sqrt(d² + ε)`.
pub fn charbonnier_loss(out: [f64; 3], gt: [f64; 3], epsilon: f64) -> f64 {
    (0..3).map(|k| ((out[k] - gt[k]).powi(2) + epsilon).sqrt()).sum::<f64>() / 3.0
}

/// Gradient of [`charbonnier_loss`] with respect to `out`.
pub fn charbonnier_grad(out: [f64; 3], gt: [f64; 3], epsilon: f64) -> [f64; 3] {
    let mut g = [0.0; 3];
    for k in 0..3 {
        let d = out[k] - gt[k];
        g[k] = d / (d * d + epsilon).sqrt() / 3.0;
    }
    g
}

/// Exponential decay from `start` at step 0 to `end` at `total`.
pub fn lr_at(step: usize, total: usize, start: f64, end: f64) -> f64 {
    if total == 0 {
        return start;
    }
    let f = step.min(total) as f64 / total as f64;
    start * (end / start).powf(f)
}

/// Moments and step count of one parameter tensor.
#[derive(Clone, Debug, PartialEq)]
pub struct AdamState {
    pub m: Vec<f32>,
    pub v: Vec<f32>,
    pub step: u64,
    /// Steps skipped because the gradient was not finite.
    pub skipped: usize,
}

impl AdamState {
    pub fn new(len: usize) -> Self {
        Self {
            m: vec![0.0; len],
            v: vec![0.0; len],
            step: 0,
            skipped: 0,
        }
    }

    pub fn reset(&mut self) {
        self.m.iter_mut().for_each(|v| *v = 0.0);
        self.v.iter_mut().for_each(|v| *v = 0.0);
        self.step = 0;
        self.skipped = 0;
    }
}

/// One bias-corrected Adam update. Returns `false` when the update was
/// skipped, either because the tensor is frozen or its gradient is not
/// finite.
pub fn adam_step(state: &mut AdamState, params: &mut [f32], grads: &[f32], lr: f64, frozen: bool) -> Result<bool> {
    if params.len() != grads.len() || state.m.len() != params.len() {
        return Err(Error::DimensionMismatch(format!(
            "adam: {} params, {} grads, {} moments",
            params.len(),
            grads.len(),
            state.m.len()
        )));
    }
    if frozen {
        return Ok(false);
    }
    if grads.iter().any(|g| !g.is_finite()) {
        state.skipped += 1;
        return Ok(false);
    }
    state.step += 1;
    let t = state.step as i32;
    let c1 = 1.0 - ADAM_BETA1.powi(t);
    let c2 = 1.0 - ADAM_BETA2.powi(t);
    let (b1, b2) = (ADAM_BETA1 as f32, ADAM_BETA2 as f32);
    let step = (lr / c1) as f32;
    let c2s = (1.0 / c2).sqrt() as f32;
    let eps = ADAM_EPS as f32;
    for i in 0..params.len() {
        let g = grads[i];
        let m = b1 * state.m[i] + (1.0 - b1) * g;
        let v = b2 * state.v[i] + (1.0 - b2) * g * g;
        state.m[i] = m;
        state.v[i] = v;
        if m != 0.0 {
            params[i] -= step * m / (v.sqrt() * c2s + eps);
        }
    }
    Ok(true)
}

/// Cameras, their ground-truth images and the scene they came from.
#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub scene: BlobScene,
    pub cameras: Vec<Camera>,
    pub images: Vec<Image>,
    pub train: Vec<usize>,
    pub test: Vec<usize>,
    /// Test cameras placed between districts to compare blocks.
    pub boundary: Vec<usize>,
}

#[derive(Serialize, Deserialize)]
struct DatasetIndex {
    train: Vec<usize>,
    test: Vec<usize>,
    boundary: Vec<usize>,
}

impl Dataset {
    /// Two-district blob scene with reference renders of every camera.
    pub fn generate(cfg: &SceneConfig, exec: Execution) -> Result<Self> {
        let scene = two_district_scene(cfg)?;
        let cameras = two_district_cameras(cfg)?;
        let images = cameras
            .iter()
            .map(|c| render_reference(&scene, c, cfg.reference_steps, exec))
            .collect::<Result<Vec<_>>>()?;
        let n = cameras.len();
        let boundary: Vec<usize> = (n - cfg.boundary_tests..n).collect();
        let train = (0..n).filter(|&i| cameras[i].split == Split::Train).collect();
        let test = (0..n).filter(|&i| cameras[i].split == Split::Test).collect();
        Ok(Self {
            scene,
            cameras,
            images,
            train,
            test,
            boundary,
        })
    }

    /// Writes `scene.json`, `cameras.json`, `dataset.json` and
    /// `images/gt_<id>.{png,f32}`.
    pub fn save(&self, dir: &Path) -> Result<()> {
        let images = dir.join("images");
        std::fs::create_dir_all(&images).at(&images)?;
        self.scene.save(&dir.join("scene.json"))?;
        save_cameras(&dir.join("cameras.json"), &self.cameras)?;
        let index = DatasetIndex {
            train: self.train.clone(),
            test: self.test.clone(),
            boundary: self.boundary.clone(),
        };
        let p = dir.join("dataset.json");
        std::fs::write(&p, serde_json::to_string_pretty(&index)?).at(&p)?;
        for (i, img) in self.images.iter().enumerate() {
            img.save(&images, &format!("gt_{i:03}"))?;
        }
        Ok(())
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let scene = BlobScene::load(&dir.join("scene.json"))?;
        let cameras = load_cameras(&dir.join("cameras.json"))?;
        let p = dir.join("dataset.json");
        let index: DatasetIndex = serde_json::from_str(&std::fs::read_to_string(&p).at(&p)?)?;
        let images = (0..cameras.len())
            .map(|i| Image::read_sidecar(&dir.join("images").join(format!("gt_{i:03}.f32"))))
            .collect::<Result<Vec<_>>>()?;
        for (c, img) in cameras.iter().zip(&images) {
            if img.width != c.width as usize || img.height != c.height as usize || img.channels != 3 {
                return Err(Error::DimensionMismatch("ground-truth image does not match its camera".into()));
            }
        }
        let n = cameras.len();
        if index.train.iter().chain(&index.test).chain(&index.boundary).any(|&i| i >= n) {
            return Err(invalid("dataset index refers to a missing camera"));
        }
        Ok(Self {
            scene,
            cameras,
            images,
            train: index.train,
            test: index.test,
            boundary: index.boundary,
        })
    }

    fn dims(&self, ids: &[usize]) -> Vec<(u32, u32)> {
        ids.iter().map(|&i| (self.cameras[i].width, self.cameras[i].height)).collect()
    }
}

/// Everything the global stage produces.
#[derive(Clone, Debug, PartialEq)]
pub struct GlobalModel {
    pub octree: SpaceOctree,
    pub encoder: HashEncoder,
    pub decoder: RadianceDecoder,
}

impl GlobalModel {
    pub fn init(config: &TrainConfig, scene: &BlobScene) -> Result<Self> {
        Ok(Self {
            octree: SpaceOctree::build(scene.bounds, config.octree_config())?,
            encoder: HashEncoder::init_global(&config.encoder_config())?,
            decoder: RadianceDecoder::new(&config.decoder_config())?,
        })
    }

    pub fn field<'a>(&'a self, focal: Option<&'a HashEncoder>) -> Result<Field<'a>> {
        Field::new(&self.octree, &self.encoder, focal, &self.decoder)
    }

    pub fn save(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir).at(dir)?;
        self.octree.save(&RunPaths::new(dir).octree())?;
        self.encoder.save(&RunPaths::new(dir).global_encoder())?;
        self.decoder.save(&RunPaths::new(dir).decoder())
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let p = RunPaths::new(dir);
        Ok(Self {
            octree: SpaceOctree::load(&p.octree())?,
            encoder: HashEncoder::load(&p.global_encoder())?,
            decoder: RadianceDecoder::load(&p.decoder())?,
        })
    }
}

/// File layout of a run directory.
#[derive(Clone, Debug)]
pub struct RunPaths {
    pub root: PathBuf,
}

impl RunPaths {
    pub fn new(root: &Path) -> Self {
        Self {
            root: root.to_path_buf(),
        }
    }

    pub fn octree(&self) -> PathBuf {
        self.root.join("octree.bin")
    }

    pub fn global_encoder(&self) -> PathBuf {
        self.root.join("encoder_global.bin")
    }

    pub fn decoder(&self) -> PathBuf {
        self.root.join("decoder.bin")
    }

    pub fn focal_encoder(&self, block: usize) -> PathBuf {
        self.root.join(format!("encoder_focal_{block}.bin"))
    }

    pub fn blocks(&self) -> PathBuf {
        self.root.join("blocks.json")
    }

    pub fn config(&self) -> PathBuf {
        self.root.join("config.json")
    }

    pub fn metrics(&self) -> PathBuf {
        self.root.join("metrics.json")
    }
}

/// Loss curve and bookkeeping of one training stage.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainLog {
    pub losses: Vec<f64>,
    pub skipped_updates: usize,
    pub pruned: usize,
    pub subdivided: usize,
}

struct BatchResult {
    loss: f64,
    table: Vec<f32>,
    decoder: Option<DecoderGrads>,
    leaf_max: Vec<f32>,
}

/// Forward and backward pass over a pixel batch, split into a fixed number
/// of shards whose gradients are summed in shard order.
fn run_batch(
    field: &Field,
    dataset: &Dataset,
    pixels: &[Pixel],
    settings: &RenderSettings,
    cfg: &TrainConfig,
    want_decoder: bool,
    want_density: bool,
    exec: Execution,
) -> BatchResult {
    let ranges = exec::chunk_ranges(pixels.len(), cfg.shards());
    let table_len = field.global.table.len();
    let nodes = field.octree.node_count();
    let scale = 1.0 / pixels.len() as f64;
    let bounds = *field.bounds();
    let shards = exec::map_range(exec, ranges.len(), |s| {
        let mut table = vec![0.0f32; table_len];
        let mut dec = want_decoder.then(|| field.decoder.zero_grads());
        let mut leaf_max = if want_density { vec![-1.0f32; nodes] } else { Vec::new() };
        let mut loss = 0.0;
        let mut trace = RayTrace::default();
        for p in &pixels[ranges[s].clone()] {
            let cam = &dataset.cameras[p.image];
            let gt_px = dataset.images[p.image].pixel(p.x as usize, p.y as usize);
            let gt = [gt_px[0] as f64, gt_px[1] as f64, gt_px[2] as f64];
            let ray = generate_ray(cam, p.x as f64, p.y as f64, &bounds).expect("pixel coordinates are finite");
            let Some(ray) = ray else {
                loss += charbonnier_loss(settings.background, gt, cfg.epsilon);
                continue;
            };
            let color = trace.forward(field, &ray, settings).color;
            loss += charbonnier_loss(color, gt, cfg.epsilon);
            if want_density {
                for (&leaf, &sigma) in trace.samples.leaf.iter().zip(&trace.sigmas) {
                    let m = &mut leaf_max[leaf as usize];
                    *m = m.max(sigma as f32);
                }
            }
            let g = charbonnier_grad(color, gt, cfg.epsilon).map(|v| v * scale);
            trace.backward(field, settings, g, Some(&mut table), dec.as_mut());
        }
        (loss, table, dec, leaf_max)
    });
    let mut iter = shards.into_iter();
    let (mut loss, mut table, mut decoder, mut leaf_max) = iter.next().expect("at least one shard");
    for (l, t, d, m) in iter {
        loss += l;
        for (a, b) in table.iter_mut().zip(&t) {
            *a += b;
        }
        if let (Some(a), Some(b)) = (decoder.as_mut(), d.as_ref()) {
            a.add(b);
        }
        for (a, b) in leaf_max.iter_mut().zip(&m) {
            *a = a.max(*b);
        }
    }
    BatchResult {
        loss: loss * scale,
        table,
        decoder,
        leaf_max,
    }
}

fn check_loss(loss: f64, step: usize, bad_streak: &mut usize) -> Result<()> {
    if loss.is_finite() {
        *bad_streak = 0;
        return Ok(());
    }
    *bad_streak += 1;
    log::warn!("non-finite loss at step {step}");
    if *bad_streak >= 3 {
        return Err(Error::Diverged { step });
    }
    Ok(())
}

/// Global stage: uniform pixels from every training view, all parameters
/// and the octree trainable.
pub fn train_global(dataset: &Dataset, config: &TrainConfig, exec: Execution) -> Result<(GlobalModel, TrainLog)> {
    config.validate()?;
    if dataset.train.is_empty() {
        return Err(invalid("dataset has no training views"));
    }
    let mut model = GlobalModel::init(config, &dataset.scene)?;
    let settings = config.render_settings(dataset.scene.background);
    let sampler = PixelSampler::uniform(&dataset.train, &dataset.dims(&dataset.train))?;
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed ^ 0x0061_06a1);
    let mut adam_table = AdamState::new(model.encoder.table.len());
    let mut adam_density = AdamState::new(model.decoder.density.param_count());
    let mut adam_color = AdamState::new(model.decoder.color.param_count());
    let mut log = TrainLog::default();
    let mut bad = 0;
    for step in 0..config.global_steps {
        let pixels = sampler.sample_uniform(config.batch_rays, &mut rng);
        let field = model.field(None)?;
        let batch = run_batch(&field, dataset, &pixels, &settings, config, true, true, exec);
        check_loss(batch.loss, step, &mut bad)?;
        log.losses.push(batch.loss);
        let lr = lr_at(step, config.global_steps, config.lr_global_start, config.lr_global_end);
        let dec = batch.decoder.expect("decoder grads requested");
        let dec_lr = lr * config.decoder_lr_scale;
        let frozen = model.decoder.is_frozen();
        let enc_frozen = model.encoder.is_frozen();
        let updates = [
            adam_step(&mut adam_table, &mut model.encoder.table, &batch.table, lr, enc_frozen)?,
            adam_step(&mut adam_density, &mut model.decoder.density.params, &dec.density, dec_lr, frozen)?,
            adam_step(&mut adam_color, &mut model.decoder.color.params, &dec.color, dec_lr, frozen)?,
        ];
        log.skipped_updates += updates.iter().filter(|&&u| !u).count();
        model.octree.record_density_max(&batch.leaf_max);
        if config.octree_refine && (step + 1) % config.refine_every == 0 && step + 1 < config.global_steps {
            let (p, s) = model.octree.refine();
            log.pruned += p;
            log.subdivided += s;
            log::debug!("step {}: pruned {p}, split {s}, live leaves {}", step + 1, model.octree.live_leaf_count());
        }
        if config.log_every > 0 && (step + 1) % config.log_every == 0 {
            log::info!("global step {}/{}: loss {:.5}", step + 1, config.global_steps, batch.loss);
        }
    }
    Ok((model, log))
}

/// Training view ids of `block`.
pub fn block_views(assignment: &BlockAssignment, block: usize) -> Result<Vec<usize>> {
    assignment
        .members
        .get(block)
        .cloned()
        .ok_or_else(|| invalid(format!("block {block} not in assignment of {} blocks", assignment.k)))
}

pub fn partition_cameras(dataset: &Dataset, config: &TrainConfig) -> Result<BlockAssignment> {
    let positions: Vec<_> = dataset.train.iter().map(|&i| dataset.cameras[i].position).collect();
    balanced_cluster(&positions, &dataset.train, config.k_blocks, config.seed)
}

/// Initial encoder of a block: zero residual, or a fresh global-style
/// encoder when training without the global encoder.
pub fn init_block_encoder(global: &GlobalModel, config: &TrainConfig, block: usize) -> Result<HashEncoder> {
    if config.focal_from_scratch {
        let cfg = EncoderConfig {
            seed: config.encoder_config().seed ^ (block as u64 + 1).wrapping_mul(0x9e37_79b9),
            ..config.encoder_config()
        };
        HashEncoder::init_scratch(&cfg, block)
    } else {
        HashEncoder::init_focal(&config.encoder_config(), &global.encoder, block)
    }
}

/// Field that renders one block: fused with the global encoder, or the
/// block encoder alone when trained from scratch.
pub fn block_field<'a>(global: &'a GlobalModel, focal: &'a HashEncoder, scratch: bool) -> Result<Field<'a>> {
    if scratch {
        Field::new(&global.octree, focal, None, &global.decoder)
    } else {
        global.field(Some(focal))
    }
}

/// Error maps of `ids` under `field`.
pub fn block_error_maps(
    field: &Field,
    dataset: &Dataset,
    ids: &[usize],
    config: &TrainConfig,
    exec: Execution,
) -> Result<ErrorMapSet> {
    let settings = config.render_settings(dataset.scene.background);
    compute_error_maps(
        field,
        &dataset.cameras,
        &dataset.images,
        ids,
        config.error_map_downsample,
        &settings,
        exec,
    )
}

/// Focal stage for one block. The global model is only borrowed, so it
/// cannot change.
pub fn train_focal(
    global: &GlobalModel,
    dataset: &Dataset,
    assignment: &BlockAssignment,
    block: usize,
    config: &TrainConfig,
    exec: Execution,
) -> Result<(HashEncoder, TrainLog)> {
    config.validate()?;
    let ids = block_views(assignment, block)?;
    if ids.is_empty() {
        return Err(invalid(format!("block {block} has no views")));
    }
    let scratch = config.focal_from_scratch;
    let mut focal = init_block_encoder(global, config, block)?;
    let settings = config.render_settings(dataset.scene.background);
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed ^ 0xf0ca1 ^ (block as u64) << 32);
    let mut adam = AdamState::new(focal.table.len());
    let mut log = TrainLog::default();
    let mut bad = 0;
    let mut sampler = None;
    let steps = config.focal_steps_per_block;
    for step in 0..steps {
        if step % config.error_map_refresh == 0 {
            let field = block_field(global, &focal, scratch)?;
            let errs = block_error_maps(&field, dataset, &ids, config, exec)?;
            sampler = Some(PixelSampler::from_errors(&errs, &ids)?);
        }
        let s = sampler.as_ref().expect("sampler built at step 0");
        let pixels = s.sample_hybrid(config.batch_rays, config.weighted_fraction, &mut rng)?.entries;
        let field = block_field(global, &focal, scratch)?;
        let batch = run_batch(&field, dataset, &pixels, &settings, config, false, false, exec);
        check_loss(batch.loss, step, &mut bad)?;
        log.losses.push(batch.loss);
        let lr = lr_at(step, steps, config.lr_focal_start, config.lr_focal_end);
        let frozen = focal.is_frozen();
        if !adam_step(&mut adam, &mut focal.table, &batch.table, lr, frozen)? {
            log.skipped_updates += 1;
        }
        if config.log_every > 0 && (step + 1) % config.log_every == 0 {
            log::info!("block {block} step {}/{steps}: loss {:.5}", step + 1, batch.loss);
        }
    }
    Ok((focal, log))
}

/// Block encoders indexed by block id.
pub type FocalSet = BTreeMap<usize, HashEncoder>;

pub fn load_focal_set(dir: &Path, k: usize) -> Result<FocalSet> {
    let paths = RunPaths::new(dir);
    let mut set = FocalSet::new();
    for b in 0..k {
        let p = paths.focal_encoder(b);
        if !p.exists() {
            return Err(Error::MissingBlock(b));
        }
        set.insert(b, HashEncoder::load(&p)?);
    }
    Ok(set)
}

/// Renders `camera` with the block nearest to it, or with the global model
/// alone when `focals` is `None`. Returns colour, depth and the block used.
pub fn render_view(
    global: &GlobalModel,
    focals: Option<(&FocalSet, &BlockAssignment)>,
    camera: &Camera,
    config: &TrainConfig,
    background: [f64; 3],
    exec: Execution,
) -> Result<(Image, Image, Option<usize>)> {
    let settings = config.render_settings(background);
    match focals {
        None => {
            let (rgb, depth) = render_image(&global.field(None)?, camera, 1, &settings, exec)?;
            Ok((rgb, depth, None))
        }
        Some((set, assignment)) => {
            let b = nearest_block(assignment, camera.position);
            let enc = set.get(&b).ok_or(Error::MissingBlock(b))?;
            let field = block_field(global, enc, config.focal_from_scratch)?;
            let (rgb, depth) = render_image(&field, camera, 1, &settings, exec)?;
            Ok((rgb, depth, Some(b)))
        }
    }
}

/// Blocks ordered by distance from `position`, nearest first.
fn blocks_by_distance(assignment: &BlockAssignment, position: crate::Vec3) -> Vec<usize> {
    let mut order: Vec<usize> = (0..assignment.k).collect();
    order.sort_by(|&a, &b| {
        let da = (position - assignment.centers[a]).norm_squared();
        let db = (position - assignment.centers[b]).norm_squared();
        da.total_cmp(&db).then(a.cmp(&b))
    });
    order
}

/// Test-view PSNR/SSIM with the nearest block per camera. With two or more
/// blocks, also reports how much the two nearest blocks disagree on the
/// boundary views. Renders are written under `out_dir` when given.
pub fn evaluate(
    global: &GlobalModel,
    focals: Option<(&FocalSet, &BlockAssignment)>,
    dataset: &Dataset,
    config: &TrainConfig,
    exec: Execution,
    out_dir: Option<&Path>,
) -> Result<MetricReport> {
    let bg = dataset.scene.background;
    if let Some(dir) = out_dir {
        std::fs::create_dir_all(dir).at(dir)?;
    }
    let mut images = Vec::new();
    for &id in &dataset.test {
        let (rgb, depth, block) = render_view(global, focals, &dataset.cameras[id], config, bg, exec)?;
        let truth = &dataset.images[id];
        images.push(ImageMetrics {
            camera_id: id,
            block,
            psnr: psnr(&rgb, truth)?,
            ssim: ssim(&rgb, truth)?,
        });
        if let Some(dir) = out_dir {
            rgb.save(dir, &format!("test_{id:03}"))?;
            let max = depth.data.iter().cloned().fold(0.0f32, f32::max);
            depth.write_sidecar(&dir.join(format!("depth_{id:03}.f32")))?;
            depth.heatmap(max).write_png(&dir.join(format!("depth_{id:03}.png")))?;
        }
    }
    let mut extra = BTreeMap::new();
    let settings = config.render_settings(bg);
    let probe = &dataset.cameras[*dataset.test.first().unwrap_or(&0)];
    extra.insert(
        "mean_samples_per_ray".to_string(),
        mean_samples_per_ray(&global.field(None)?, probe, &settings),
    );
    extra.insert("live_leaves".to_string(), global.octree.live_leaf_count() as f64);
    if let Some((set, assignment)) = focals {
        if assignment.k >= 2 && !dataset.boundary.is_empty() {
            let (depth_gap, cross_psnr) = boundary_consistency(global, set, assignment, dataset, config, exec)?;
            extra.insert("boundary_depth_mad".to_string(), depth_gap);
            extra.insert("boundary_cross_psnr".to_string(), cross_psnr);
        }
    }
    Ok(MetricReport::new(config.hash(), images, extra))
}

/// Mean absolute depth difference and colour PSNR between the two nearest
/// blocks' renderings of each boundary view, averaged over the views.
pub fn boundary_consistency(
    global: &GlobalModel,
    set: &FocalSet,
    assignment: &BlockAssignment,
    dataset: &Dataset,
    config: &TrainConfig,
    exec: Execution,
) -> Result<(f64, f64)> {
    let settings = config.render_settings(dataset.scene.background);
    let (mut depth_gap, mut cross) = (0.0, 0.0);
    for &id in &dataset.boundary {
        let cam = &dataset.cameras[id];
        let order = blocks_by_distance(assignment, cam.position);
        let mut renders = Vec::new();
        for &b in &order[..2] {
            let enc = set.get(&b).ok_or(Error::MissingBlock(b))?;
            renders.push(render_image(&block_field(global, enc, config.focal_from_scratch)?, cam, 1, &settings, exec)?);
        }
        let (da, db) = (&renders[0].1, &renders[1].1);
        depth_gap += da.data.iter().zip(&db.data).map(|(a, b)| (a - b).abs() as f64).sum::<f64>() / da.data.len() as f64;
        cross += psnr(&renders[0].0, &renders[1].0)?;
    }
    let n = dataset.boundary.len() as f64;
    Ok((depth_gap / n, cross / n))
}

/// Mean PSNR of the given training views under `field`.
pub fn views_psnr(field: &Field, dataset: &Dataset, ids: &[usize], config: &TrainConfig, exec: Execution) -> Result<f64> {
    let settings = config.render_settings(dataset.scene.background);
    let mut total = 0.0;
    for &id in ids {
        let (rgb, _) = render_image(field, &dataset.cameras[id], 1, &settings, exec)?;
        total += psnr(&rgb, &dataset.images[id])?;
    }
    Ok(total / ids.len().max(1) as f64)
}

pub fn save_config(path: &Path, config: &TrainConfig) -> Result<()> {
    std::fs::write(path, serde_json::to_string_pretty(config)?).at(path)
}

pub fn load_config(path: &Path) -> Result<TrainConfig> {
    let cfg: TrainConfig = serde_json::from_str(&std::fs::read_to_string(path).at(path)?)?;
    cfg.validate()?;
    Ok(cfg)
}
