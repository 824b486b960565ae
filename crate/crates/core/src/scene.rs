//! Analytic ground-truth scenes made of truncated Gaussian blobs, plus a
//! dense-stepping reference renderer.

use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{invalid, IoContext, Result};
use crate::exec::{self, Execution};
use crate::geometry::{generate_ray, Aabb, Camera, Split, Vec3};
use crate::image::Image;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Blob {
    pub center: Vec3,
    pub radius: f64,
    pub peak_density: f64,
    pub albedo: [f64; 3],
}

impl Blob {
    /// Radius beyond which the blob contributes nothing.
    pub fn support_radius(&self) -> f64 {
        2.0 * self.radius
    }

    pub fn density(&self, x: Vec3) -> f64 {
        let r2 = (x - self.center).norm_squared();
        let cut = self.support_radius();
        if r2 > cut * cut {
            return 0.0;
        }
        let s = self.radius / 2.0;
        self.peak_density * (-r2 / (2.0 * s * s)).exp()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BlobScene {
    pub blobs: Vec<Blob>,
    pub background: [f64; 3],
    pub bounds: Aabb,
}

impl BlobScene {
    pub fn new(blobs: Vec<Blob>, background: [f64; 3], bounds: Aabb) -> Result<Self> {
        let scene = Self {
            blobs,
            background,
            bounds,
        };
        scene.validate()?;
        Ok(scene)
    }

    pub fn validate(&self) -> Result<()> {
        if self.blobs.is_empty() {
            return Err(invalid("scene needs at least one blob"));
        }
        for b in &self.blobs {
            if !self.bounds.contains(b.center, 0.0) {
                return Err(invalid(format!("blob centre {:?} outside bounds", b.center)));
            }
            if !(b.peak_density.is_finite() && b.peak_density >= 0.0) || !(b.radius > 0.0) {
                return Err(invalid("blob density must be finite and non-negative, radius positive"));
            }
        }
        Ok(())
    }

    /// Density and albedo at `x`.
    pub fn field(&self, x: Vec3) -> (f64, [f64; 3]) {
        if !self.bounds.contains(x, 0.0) {
            return (0.0, self.background);
        }
        let mut sigma = 0.0;
        let mut rgb = [0.0; 3];
        for b in &self.blobs {
            let s = b.density(x);
            if s > 0.0 {
                sigma += s;
                for c in 0..3 {
                    rgb[c] += s * b.albedo[c];
                }
            }
        }
        if sigma > 0.0 {
            for v in &mut rgb {
                *v /= sigma;
            }
            (sigma, rgb)
        } else {
            (0.0, self.background)
        }
    }

    /// Whether `bbox` overlaps any blob's support sphere.
    pub fn box_touches_support(&self, bbox: &Aabb) -> bool {
        self.blobs.iter().any(|b| {
            let r = b.support_radius();
            bbox.distance_squared(b.center) <= r * r
        })
    }

    pub fn load(path: &Path) -> Result<Self> {
        let scene: BlobScene = serde_json::from_str(&std::fs::read_to_string(path).at(path)?)?;
        scene.validate()?;
        Ok(scene)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, serde_json::to_string_pretty(self)?).at(path)
    }
}

pub fn oracle_field(scene: &BlobScene, x: Vec3) -> (f64, [f64; 3]) {
    scene.field(x)
}

/// Colour and opacity of one ray rendered with uniform midpoint
/// steps between the box entry and exit.
pub fn reference_ray(scene: &BlobScene, camera: &Camera, px: f64, py: f64, steps: usize) -> ([f64; 3], f64) {
    let Ok(Some(ray)) = generate_ray(camera, px, py, &scene.bounds) else {
        return (scene.background, 0.0);
    };
    let dt = (ray.t_far - ray.t_near) / steps as f64;
    let mut log_t = 0.0;
    let mut rgb = [0.0; 3];
    for i in 0..steps {
        let t = ray.t_near + (i as f64 + 0.5) * dt;
        let (sigma, albedo) = scene.field(ray.at(t));
        if sigma <= 0.0 {
            continue;
        }
        let trans = f64::exp(-log_t);
        let alpha = 1.0 - (-sigma * dt).exp();
        for c in 0..3 {
            rgb[c] += trans * alpha * albedo[c];
        }
        log_t += sigma * dt;
    }
    let trans = f64::exp(-log_t);
    for c in 0..3 {
        rgb[c] += trans * scene.background[c];
    }
    (rgb, 1.0 - trans)
}

/// Ground-truth rendering by dense uniform stepping.
pub fn render_reference(scene: &BlobScene, camera: &Camera, steps: usize, exec: Execution) -> Result<Image> {
    if steps < 256 {
        return Err(invalid(format!("reference renders need at least 256 steps, got {steps}")));
    }
    let (w, h) = (camera.width as usize, camera.height as usize);
    let rows = exec::map_range(exec, h, |y| {
        let mut row = Vec::with_capacity(w * 3);
        for x in 0..w {
            let (rgb, _) = reference_ray(scene, camera, x as f64, y as f64, steps);
            row.extend(rgb.iter().map(|&v| v.clamp(0.0, 1.0) as f32));
        }
        row
    });
    Image::from_data(w, h, 3, rows.concat())
}

/// Parameters for the synthetic two-district dataset.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct SceneConfig {
    pub seed: u64,
    pub width: u32,
    pub height: u32,
    pub focal: f64,
    pub blobs_per_district: usize,
    pub train_per_district: usize,
    pub test_per_district: usize,
    pub boundary_tests: usize,
    pub reference_steps: usize,
    pub background: [f64; 3],
}

impl Default for SceneConfig {
    fn default() -> Self {
        Self {
            seed: 7,
            width: 64,
            height: 64,
            focal: 60.0,
            blobs_per_district: 7,
            train_per_district: 20,
            test_per_district: 3,
            boundary_tests: 3,
            reference_steps: 512,
            background: [1.0, 1.0, 1.0],
        }
    }
}

/// District centres of the two-district layout.
pub const DISTRICT_CENTERS: [Vec3; 2] = [Vec3::new(-1.0, 0.0, 0.0), Vec3::new(1.0, 0.0, 0.0)];

/// Two clusters of blobs separated along x inside `[-2,2]×[-1,1]×[-1,1]`.
pub fn two_district_scene(cfg: &SceneConfig) -> Result<BlobScene> {
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let bounds = Aabb::new(Vec3::new(-2.0, -1.0, -1.0), Vec3::new(2.0, 1.0, 1.0))?;
    let mut blobs = Vec::new();
    for center in DISTRICT_CENTERS {
        for _ in 0..cfg.blobs_per_district {
            let offset = Vec3::new(
                rng.gen_range(-0.55..0.55),
                rng.gen_range(-0.45..0.45),
                rng.gen_range(-0.45..0.45),
            );
            let mut albedo = [0.0; 3];
            for a in &mut albedo {
                *a = rng.gen_range(0.05..0.95);
            }
            blobs.push(Blob {
                center: center + offset,
                radius: rng.gen_range(0.1..0.26),
                peak_density: rng.gen_range(15.0..60.0),
                albedo,
            });
        }
    }
    BlobScene::new(blobs, cfg.background, bounds)
}

/// Camera rig for the two-district scene: training and test cameras on a
/// ring around each district, plus boundary test cameras between them that
/// see both districts.
pub fn two_district_cameras(cfg: &SceneConfig) -> Result<Vec<Camera>> {
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x5eed_cafe);
    let up = Vec3::new(0.0, -1.0, 0.0);
    let res = (cfg.width, cfg.height);
    let mut cams = Vec::new();
    let per = cfg.train_per_district + cfg.test_per_district;
    let test_slots: Vec<usize> = (0..cfg.test_per_district)
        .map(|j| ((2 * j + 1) * per) / (2 * cfg.test_per_district))
        .collect();
    for (district, center) in DISTRICT_CENTERS.iter().enumerate() {
        for i in 0..per {
            // test cameras interleave with the training ring
            let frac = (i as f64 + rng.gen_range(0.0..0.3)) / per as f64;
            // keep the outward side of each district so rings overlap less
            let base = if district == 0 { std::f64::consts::PI } else { 0.0 };
            let angle = base + (frac - 0.5) * 1.6 * std::f64::consts::PI;
            let elevation = rng.gen_range(0.25..0.9);
            let dist = rng.gen_range(2.4..2.9);
            let dir = Vec3::new(angle.cos(), elevation, angle.sin()).normalized();
            let jitter = Vec3::new(rng.gen_range(-0.15..0.15), rng.gen_range(-0.1..0.1), rng.gen_range(-0.15..0.15));
            let mut cam = Camera::look_at(*center + dir * dist, *center + jitter, up, cfg.focal, res)?;
            cam.split = if test_slots.contains(&i) { Split::Test } else { Split::Train };
            cams.push(cam);
        }
    }
    for i in 0..cfg.boundary_tests {
        let side = if i % 2 == 0 { 1.0 } else { -1.0 };
        let pos = Vec3::new(rng.gen_range(-0.2..0.2), rng.gen_range(0.6..1.0), side * rng.gen_range(2.6..3.0));
        let target = Vec3::new(rng.gen_range(-0.1..0.1), 0.0, 0.0);
        let mut cam = Camera::look_at(pos, target, up, cfg.focal * 0.8, res)?;
        cam.split = Split::Test;
        cams.push(cam);
    }
    Ok(cams)
}
