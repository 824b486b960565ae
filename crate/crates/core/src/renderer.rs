//! Differentiable volume rendering.
//!
//! Compositing runs in `f64` with accumulated log-transmittance. The
//! per-ray tracer ties octree sampling, hash encoding and decoding
//! together and keeps everything the backward pass needs.

use serde::{Deserialize, Serialize};

use crate::decoder::{dir_encoding, BackwardScratch, DecodeCache, DecoderGrads, RadianceDecoder};
use crate::encoder::{HashEncoder, Layout, LookupPlan};
use crate::error::{invalid, Error, Result};
use crate::exec::{self, Execution};
use crate::geometry::{generate_ray, Aabb, Camera, Ray};
use crate::image::Image;
use crate::octree::{RaySamples, SpaceOctree};

/// Composited colour of one ray together with the state the backward pass
/// needs.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct RenderOutput {
    pub color: [f64; 3],
    pub depth: f64,
    pub opacity: f64,
    pub weights: Vec<f64>,
    /// `T_1 .. T_{N+1}`; the last entry is the residual transmittance.
    pub transmittance: Vec<f64>,
}

/// Front-to-back alpha compositing over `background`.
pub fn composite(
    sigmas: &[f64],
    colors: &[[f64; 3]],
    deltas: &[f64],
    ts: &[f64],
    background: [f64; 3],
    t_far: f64,
) -> Result<RenderOutput> {
    let n = sigmas.len();
    if colors.len() != n || deltas.len() != n || ts.len() != n {
        return Err(Error::DimensionMismatch(format!(
            "composite inputs of lengths {n}, {}, {}, {}",
            colors.len(),
            deltas.len(),
            ts.len()
        )));
    }
    if deltas.iter().any(|&d| !(d > 0.0)) || sigmas.iter().any(|&s| !(s >= 0.0)) {
        return Err(invalid("composite needs positive deltas and nonnegative densities"));
    }
    let mut out = RenderOutput {
        weights: Vec::with_capacity(n),
        transmittance: Vec::with_capacity(n + 1),
        ..Default::default()
    };
    let mut log_t = 0.0f64;
    let mut depth = 0.0;
    out.transmittance.push(1.0);
    for i in 0..n {
        let t_i = (-log_t).exp();
        log_t += deltas[i] * sigmas[i];
        let t_next = (-log_t).exp();
        let w = t_i - t_next;
        out.weights.push(w);
        out.transmittance.push(t_next);
        for k in 0..3 {
            out.color[k] += w * colors[i][k];
        }
        depth += w * ts[i];
    }
    let residual = (-log_t).exp();
    out.opacity = 1.0 - residual;
    for k in 0..3 {
        out.color[k] += residual * background[k];
    }
    out.depth = if n == 0 { t_far } else { depth / out.opacity.max(1e-6) };
    Ok(out)
}

/// Gradients of the composited colour with respect to every density and
/// colour, given the upstream gradient `d_color`.
pub fn composite_backward(
    out: &RenderOutput,
    colors: &[[f64; 3]],
    deltas: &[f64],
    background: [f64; 3],
    d_color: [f64; 3],
) -> (Vec<f64>, Vec<[f64; 3]>) {
    let n = out.weights.len();
    let dot = |c: &[f64; 3]| c[0] * d_color[0] + c[1] * d_color[1] + c[2] * d_color[2];
    let mut d_sigma = vec![0.0; n];
    let mut d_rgb = vec![[0.0; 3]; n];
    // suffix = Σ_{j>i} w_j c_j + T_{N+1} bg, projected onto d_color
    let mut suffix = out.transmittance[n] * dot(&background);
    for i in (0..n).rev() {
        let own = out.transmittance[i + 1] * dot(&colors[i]);
        d_sigma[i] = deltas[i] * (own - suffix);
        suffix += out.weights[i] * dot(&colors[i]);
        d_rgb[i] = d_color.map(|g| out.weights[i] * g);
    }
    (d_sigma, d_rgb)
}

/// Sampling and compositing knobs shared by training and rendering.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RenderSettings {
    pub step_scale: f64,
    pub max_points: usize,
    pub background: [f64; 3],
    /// Stop evaluating a ray once transmittance drops below this; 0
    /// evaluates every sample.
    pub early_stop: f64,
}

impl Default for RenderSettings {
    fn default() -> Self {
        Self {
            step_scale: 1.0,
            max_points: 1024,
            background: [1.0; 3],
            early_stop: 1e-4,
        }
    }
}

/// A renderable model: frozen or trainable parts borrowed together.
#[derive(Clone, Copy)]
pub struct Field<'a> {
    pub octree: &'a SpaceOctree,
    pub global: &'a HashEncoder,
    pub focal: Option<&'a HashEncoder>,
    pub decoder: &'a RadianceDecoder,
}

impl<'a> Field<'a> {
    pub fn new(
        octree: &'a SpaceOctree,
        global: &'a HashEncoder,
        focal: Option<&'a HashEncoder>,
        decoder: &'a RadianceDecoder,
    ) -> Result<Self> {
        if let Some(f) = focal {
            if !f.same_dims(global) {
                return Err(Error::DimensionMismatch("focal encoder differs from global".into()));
            }
        }
        if decoder.feature_dim() != global.output_dim() {
            return Err(Error::DimensionMismatch("decoder input differs from encoder output".into()));
        }
        Ok(Self {
            octree,
            global,
            focal,
            decoder,
        })
    }

    pub fn bounds(&self) -> &Aabb {
        &self.octree.root().aabb
    }
}

/// Per-ray scratch space reused across rays.
#[derive(Default)]
pub struct RayTrace {
    pub samples: RaySamples,
    plans: Vec<LookupPlan>,
    caches: Vec<DecodeCache>,
    features: Vec<f32>,
    residual: Vec<f32>,
    pub sigmas: Vec<f64>,
    pub colors: Vec<[f64; 3]>,
    pub output: RenderOutput,
    layout: Option<Layout>,
    scratch: BackwardScratch,
    d_feature: Vec<f32>,
}

impl RayTrace {
    /// Number of samples actually evaluated on the last ray.
    pub fn evaluated(&self) -> usize {
        self.sigmas.len()
    }

    /// Traces `ray` through `field`, keeping the forward state.
    pub fn forward(&mut self, field: &Field, ray: &Ray, settings: &RenderSettings) -> &RenderOutput {
        let layout = self.layout.get_or_insert_with(|| field.global.layout());
        field
            .octree
            .sample_ray(ray, settings.step_scale, settings.max_points, &mut self.samples);
        let n = self.samples.len();
        if self.plans.len() < n {
            self.plans.resize_with(n, LookupPlan::default);
            self.caches.resize_with(n, DecodeCache::default);
        }
        let dim = field.global.output_dim();
        self.features.clear();
        self.features.resize(dim, 0.0);
        self.residual.clear();
        self.residual.resize(dim, 0.0);
        self.sigmas.clear();
        self.colors.clear();
        let sh = dir_encoding(ray.dir);
        let mut log_t = 0.0f64;
        for i in 0..n {
            let leaf = field.octree.node(self.samples.leaf[i]);
            layout.plan(leaf, self.samples.pos[i], &mut self.plans[i]);
            self.features.iter_mut().for_each(|v| *v = 0.0);
            field.global.accumulate(&self.plans[i], &mut self.features);
            if let Some(f) = field.focal {
                // fused feature is the elementwise sum of two separate lookups
                self.residual.iter_mut().for_each(|v| *v = 0.0);
                f.accumulate(&self.plans[i], &mut self.residual);
                for (a, b) in self.features.iter_mut().zip(&self.residual) {
                    *a += b;
                }
            }
            let (sigma, rgb) = field.decoder.decode_cached(&self.features, &sh, &mut self.caches[i]);
            self.sigmas.push(sigma as f64);
            self.colors.push(rgb.map(|v| v as f64));
            log_t += sigma as f64 * self.samples.delta[i];
            if settings.early_stop > 0.0 && (-log_t).exp() < settings.early_stop {
                break;
            }
        }
        let m = self.sigmas.len();
        self.output = composite(
            &self.sigmas,
            &self.colors,
            &self.samples.delta[..m],
            &self.samples.t[..m],
            settings.background,
            ray.t_far,
        )
        .expect("octree samples have positive spacing");
        &self.output
    }

    /// Reverse pass of the last [`forward`](Self::forward) call. Table
    /// gradients go to `table_grad` (laid out like the encoder tables) and
    /// decoder weight gradients to `decoder_grads`, either may be absent.
    pub fn backward(
        &mut self,
        field: &Field,
        settings: &RenderSettings,
        d_color: [f64; 3],
        mut table_grad: Option<&mut [f32]>,
        mut decoder_grads: Option<&mut DecoderGrads>,
    ) {
        let m = self.sigmas.len();
        let (d_sigma, d_rgb) = composite_backward(
            &self.output,
            &self.colors,
            &self.samples.delta[..m],
            settings.background,
            d_color,
        );
        self.d_feature.resize(field.global.output_dim(), 0.0);
        for i in 0..m {
            if d_sigma[i] == 0.0 && d_rgb[i] == [0.0; 3] {
                continue;
            }
            field.decoder.backward_cached(
                &self.caches[i],
                d_sigma[i] as f32,
                d_rgb[i].map(|v| v as f32),
                decoder_grads.as_deref_mut(),
                &mut self.d_feature,
                &mut self.scratch,
            );
            if let Some(g) = table_grad.as_deref_mut() {
                field.global.backward_into(&self.plans[i], &self.d_feature, g);
            }
        }
    }
}

/// Colour and depth images of `camera` rendered at `1/downsample`
/// resolution.
pub fn render_image(
    field: &Field,
    camera: &Camera,
    downsample: u32,
    settings: &RenderSettings,
    exec: Execution,
) -> Result<(Image, Image)> {
    let cam = camera.downsampled(downsample)?;
    let (w, h) = (cam.width as usize, cam.height as usize);
    let bounds = *field.bounds();
    let rows = exec::map_range(exec, h, |y| {
        let mut trace = RayTrace::default();
        let mut rgb = Vec::with_capacity(w * 3);
        let mut depth = Vec::with_capacity(w);
        for x in 0..w {
            match generate_ray(&cam, x as f64, y as f64, &bounds).expect("pixel coordinates are finite") {
                Some(ray) => {
                    let out = trace.forward(field, &ray, settings);
                    rgb.extend(out.color.iter().map(|&v| v as f32));
                    depth.push(out.depth as f32);
                }
                None => {
                    rgb.extend(settings.background.iter().map(|&v| v as f32));
                    depth.push(0.0);
                }
            }
        }
        (rgb, depth)
    });
    let (mut rgb, mut depth) = (Vec::with_capacity(w * h * 3), Vec::with_capacity(w * h));
    for (r, d) in rows {
        rgb.extend(r);
        depth.extend(d);
    }
    Ok((Image::from_data(w, h, 3, rgb)?, Image::from_data(w, h, 1, depth)?))
}

/// Mean number of evaluated samples per ray over a camera's pixels that hit
/// the scene box.
pub fn mean_samples_per_ray(field: &Field, camera: &Camera, settings: &RenderSettings) -> f64 {
    let bounds = *field.bounds();
    let mut samples = RaySamples::default();
    let (mut total, mut rays) = (0usize, 0usize);
    for y in 0..camera.height {
        for x in 0..camera.width {
            if let Ok(Some(ray)) = generate_ray(camera, x as f64, y as f64, &bounds) {
                field
                    .octree
                    .sample_ray(&ray, settings.step_scale, settings.max_points, &mut samples);
                total += samples.len();
                rays += 1;
            }
        }
    }
    total as f64 / rays.max(1) as f64
}
