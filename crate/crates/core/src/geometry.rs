//! Cameras, rays and boxes. Everything here is double precision.

use std::ops::{Add, AddAssign, Div, Index, Mul, Neg, Sub};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{invalid, IoContext, Result};

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(from = "[f64; 3]", into = "[f64; 3]")]
pub struct Vec3 {
    pub x: f64,
    pub y: f64,
    pub z: f64,
}

impl Vec3 {
    pub const ZERO: Vec3 = Vec3::new(0.0, 0.0, 0.0);

    pub const fn new(x: f64, y: f64, z: f64) -> Self {
        Self { x, y, z }
    }

    pub const fn splat(v: f64) -> Self {
        Self::new(v, v, v)
    }

    pub fn dot(self, o: Vec3) -> f64 {
        self.x * o.x + self.y * o.y + self.z * o.z
    }

    pub fn cross(self, o: Vec3) -> Vec3 {
        Vec3::new(
            self.y * o.z - self.z * o.y,
            self.z * o.x - self.x * o.z,
            self.x * o.y - self.y * o.x,
        )
    }

    pub fn norm(self) -> f64 {
        self.dot(self).sqrt()
    }

    pub fn norm_squared(self) -> f64 {
        self.dot(self)
    }

    pub fn normalized(self) -> Vec3 {
        self / self.norm()
    }

    pub fn is_finite(self) -> bool {
        self.x.is_finite() && self.y.is_finite() && self.z.is_finite()
    }

    pub fn min(self, o: Vec3) -> Vec3 {
        Vec3::new(self.x.min(o.x), self.y.min(o.y), self.z.min(o.z))
    }

    pub fn max(self, o: Vec3) -> Vec3 {
        Vec3::new(self.x.max(o.x), self.y.max(o.y), self.z.max(o.z))
    }

    pub fn mul_elem(self, o: Vec3) -> Vec3 {
        Vec3::new(self.x * o.x, self.y * o.y, self.z * o.z)
    }

    pub fn div_elem(self, o: Vec3) -> Vec3 {
        Vec3::new(self.x / o.x, self.y / o.y, self.z / o.z)
    }

    pub fn to_array(self) -> [f64; 3] {
        [self.x, self.y, self.z]
    }
}

impl From<[f64; 3]> for Vec3 {
    fn from(a: [f64; 3]) -> Self {
        Vec3::new(a[0], a[1], a[2])
    }
}

impl From<Vec3> for [f64; 3] {
    fn from(v: Vec3) -> Self {
        v.to_array()
    }
}

impl Index<usize> for Vec3 {
    type Output = f64;
    fn index(&self, i: usize) -> &f64 {
        match i {
            0 => &self.x,
            1 => &self.y,
            2 => &self.z,
            _ => panic!("Vec3 index {i} out of range"),
        }
    }
}

impl Add for Vec3 {
    type Output = Vec3;
    fn add(self, o: Vec3) -> Vec3 {
        Vec3::new(self.x + o.x, self.y + o.y, self.z + o.z)
    }
}

impl AddAssign for Vec3 {
    fn add_assign(&mut self, o: Vec3) {
        *self = *self + o;
    }
}

impl Sub for Vec3 {
    type Output = Vec3;
    fn sub(self, o: Vec3) -> Vec3 {
        Vec3::new(self.x - o.x, self.y - o.y, self.z - o.z)
    }
}

impl Mul<f64> for Vec3 {
    type Output = Vec3;
    fn mul(self, s: f64) -> Vec3 {
        Vec3::new(self.x * s, self.y * s, self.z * s)
    }
}

impl Div<f64> for Vec3 {
    type Output = Vec3;
    fn div(self, s: f64) -> Vec3 {
        Vec3::new(self.x / s, self.y / s, self.z / s)
    }
}

impl Neg for Vec3 {
    type Output = Vec3;
    fn neg(self) -> Vec3 {
        Vec3::new(-self.x, -self.y, -self.z)
    }
}

/// Row-major 3x3 matrix.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Mat3(pub [[f64; 3]; 3]);

impl Mat3 {
    pub const IDENTITY: Mat3 = Mat3([[1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [0.0, 0.0, 1.0]]);

    pub fn from_columns(a: Vec3, b: Vec3, c: Vec3) -> Mat3 {
        Mat3([[a.x, b.x, c.x], [a.y, b.y, c.y], [a.z, b.z, c.z]])
    }

    pub fn rotation_y(angle: f64) -> Mat3 {
        let (s, c) = angle.sin_cos();
        Mat3([[c, 0.0, s], [0.0, 1.0, 0.0], [-s, 0.0, c]])
    }

    pub fn transpose(&self) -> Mat3 {
        let m = &self.0;
        Mat3([
            [m[0][0], m[1][0], m[2][0]],
            [m[0][1], m[1][1], m[2][1]],
            [m[0][2], m[1][2], m[2][2]],
        ])
    }

    pub fn mul_vec(&self, v: Vec3) -> Vec3 {
        let m = &self.0;
        Vec3::new(
            m[0][0] * v.x + m[0][1] * v.y + m[0][2] * v.z,
            m[1][0] * v.x + m[1][1] * v.y + m[1][2] * v.z,
            m[2][0] * v.x + m[2][1] * v.y + m[2][2] * v.z,
        )
    }

    pub fn mul_mat(&self, o: &Mat3) -> Mat3 {
        let mut out = [[0.0; 3]; 3];
        for (i, row) in out.iter_mut().enumerate() {
            for (j, v) in row.iter_mut().enumerate() {
                *v = (0..3).map(|k| self.0[i][k] * o.0[k][j]).sum();
            }
        }
        Mat3(out)
    }

    /// Largest deviation of `RᵀR` from the identity.
    pub fn orthonormality_error(&self) -> f64 {
        let p = self.transpose().mul_mat(self);
        let mut err: f64 = 0.0;
        for i in 0..3 {
            for j in 0..3 {
                let id = if i == j { 1.0 } else { 0.0 };
                err = err.max((p.0[i][j] - id).abs());
            }
        }
        err
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Aabb {
    pub min: Vec3,
    pub max: Vec3,
}

impl Aabb {
    pub fn new(min: Vec3, max: Vec3) -> Result<Self> {
        if !(min.is_finite() && max.is_finite()) || min.x >= max.x || min.y >= max.y || min.z >= max.z
        {
            return Err(invalid(format!("degenerate box {min:?}..{max:?}")));
        }
        Ok(Self { min, max })
    }

    pub fn extent(&self) -> Vec3 {
        self.max - self.min
    }

    pub fn center(&self) -> Vec3 {
        (self.min + self.max) * 0.5
    }

    pub fn diagonal(&self) -> f64 {
        self.extent().norm()
    }

    pub fn volume(&self) -> f64 {
        let e = self.extent();
        e.x * e.y * e.z
    }

    pub fn contains(&self, p: Vec3, slack: f64) -> bool {
        p.x >= self.min.x - slack
            && p.x <= self.max.x + slack
            && p.y >= self.min.y - slack
            && p.y <= self.max.y + slack
            && p.z >= self.min.z - slack
            && p.z <= self.max.z + slack
    }

    /// Child box `octant` (bit 0 = x, bit 1 = y, bit 2 = z upper half).
    pub fn octant(&self, octant: usize) -> Aabb {
        let c = self.center();
        let pick = |bit: usize, lo: f64, mid: f64, hi: f64| {
            if octant & bit != 0 {
                (mid, hi)
            } else {
                (lo, mid)
            }
        };
        let (x0, x1) = pick(1, self.min.x, c.x, self.max.x);
        let (y0, y1) = pick(2, self.min.y, c.y, self.max.y);
        let (z0, z1) = pick(4, self.min.z, c.z, self.max.z);
        Aabb {
            min: Vec3::new(x0, y0, z0),
            max: Vec3::new(x1, y1, z1),
        }
    }

    /// Squared distance from `p` to the closest point of the box.
    pub fn distance_squared(&self, p: Vec3) -> f64 {
        let q = p.max(self.min).min(self.max);
        (p - q).norm_squared()
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Ray {
    pub origin: Vec3,
    pub dir: Vec3,
    pub t_near: f64,
    pub t_far: f64,
}

impl Ray {
    pub fn at(&self, t: f64) -> Vec3 {
        self.origin + self.dir * t
    }
}

/// Slab test. Returns `(t_enter, t_exit)` of the infinite line against the
/// box, or `None` when it misses. The entry may be negative when the origin
/// is inside the box.
pub fn ray_aabb_intersect(origin: Vec3, dir: Vec3, bbox: &Aabb) -> Option<(f64, f64)> {
    let mut t0 = f64::NEG_INFINITY;
    let mut t1 = f64::INFINITY;
    for axis in 0..3 {
        let o = origin[axis];
        let d = dir[axis];
        let lo = bbox.min[axis];
        let hi = bbox.max[axis];
        if d == 0.0 {
            if o < lo || o > hi {
                return None;
            }
            continue;
        }
        let inv = 1.0 / d;
        let (mut a, mut b) = ((lo - o) * inv, (hi - o) * inv);
        if a > b {
            std::mem::swap(&mut a, &mut b);
        }
        t0 = t0.max(a);
        t1 = t1.min(b);
        if t0 > t1 {
            return None;
        }
    }
    Some((t0, t1))
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    #[default]
    Train,
    Test,
}

/// Pinhole camera. `rotation` maps camera-frame directions to world
/// (x right, y down, z forward).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Camera {
    pub rotation: Mat3,
    pub position: Vec3,
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
    pub width: u32,
    pub height: u32,
    #[serde(default)]
    pub split: Split,
}

impl Camera {
    pub fn new(
        rotation: Mat3,
        position: Vec3,
        (fx, fy): (f64, f64),
        (cx, cy): (f64, f64),
        (width, height): (u32, u32),
    ) -> Result<Self> {
        let cam = Self {
            rotation,
            position,
            fx,
            fy,
            cx,
            cy,
            width,
            height,
            split: Split::Train,
        };
        cam.validate()?;
        Ok(cam)
    }

    /// Camera at `position` looking at `target`, with `up` roughly upward
    /// in the image. Principal point at the image centre.
    pub fn look_at(
        position: Vec3,
        target: Vec3,
        up: Vec3,
        focal: f64,
        (width, height): (u32, u32),
    ) -> Result<Self> {
        let forward = (target - position).normalized();
        // image y points down, so "right" is forward × up
        let right = forward.cross(up);
        if right.norm() < 1e-9 {
            return Err(invalid("look_at: up is parallel to the view direction"));
        }
        let right = right.normalized();
        let down = forward.cross(right);
        Camera::new(
            Mat3::from_columns(right, down, forward),
            position,
            (focal, focal),
            (width as f64 / 2.0, height as f64 / 2.0),
            (width, height),
        )
    }

    pub fn validate(&self) -> Result<()> {
        if self.rotation.orthonormality_error() > 1e-6 {
            return Err(invalid("camera rotation is not orthonormal"));
        }
        if !(self.fx > 0.0 && self.fy > 0.0) {
            return Err(invalid("focal lengths must be positive"));
        }
        if self.width == 0 || self.height == 0 {
            return Err(invalid("camera resolution must be positive"));
        }
        if !(self.cx > 0.0 && self.cx < self.width as f64 && self.cy > 0.0 && self.cy < self.height as f64)
        {
            return Err(invalid("principal point outside the image"));
        }
        if !self.position.is_finite() {
            return Err(invalid("camera position is not finite"));
        }
        Ok(())
    }

    /// Unit world-space direction through the centre of pixel `(px, py)`.
    pub fn direction(&self, px: f64, py: f64) -> Vec3 {
        let local = Vec3::new((px + 0.5 - self.cx) / self.fx, (py + 0.5 - self.cy) / self.fy, 1.0);
        self.rotation.mul_vec(local).normalized()
    }

    /// Projects a world point to continuous pixel coordinates using the
    /// same +0.5 pixel-centre convention as [`Camera::direction`].
    pub fn project(&self, p: Vec3) -> Option<(f64, f64)> {
        let local = self.rotation.transpose().mul_vec(p - self.position);
        if local.z <= 0.0 {
            return None;
        }
        Some((
            self.fx * local.x / local.z + self.cx - 0.5,
            self.fy * local.y / local.z + self.cy - 0.5,
        ))
    }

    /// Same camera rendering `factor`× fewer pixels per axis.
    pub fn downsampled(&self, factor: u32) -> Result<Camera> {
        if factor == 0 || !self.width.is_multiple_of(factor) || !self.height.is_multiple_of(factor) {
            return Err(invalid(format!(
                "downsample {factor} does not divide {}x{}",
                self.width, self.height
            )));
        }
        let f = factor as f64;
        Ok(Camera {
            fx: self.fx / f,
            fy: self.fy / f,
            cx: self.cx / f,
            cy: self.cy / f,
            width: self.width / factor,
            height: self.height / factor,
            ..self.clone()
        })
    }

    pub fn pixel_count(&self) -> usize {
        self.width as usize * self.height as usize
    }
}

/// Ray through pixel `(px, py)` clipped to `bounds`. `Ok(None)` when the
/// ray misses the box or the box lies behind the camera.
pub fn generate_ray(camera: &Camera, px: f64, py: f64, bounds: &Aabb) -> Result<Option<Ray>> {
    if !(px.is_finite() && py.is_finite()) {
        return Err(invalid(format!("non-finite pixel coordinate ({px}, {py})")));
    }
    let dir = camera.direction(px, py);
    Ok(clip_ray(camera.position, dir, bounds))
}

pub fn clip_ray(origin: Vec3, dir: Vec3, bounds: &Aabb) -> Option<Ray> {
    let (t0, t1) = ray_aabb_intersect(origin, dir, bounds)?;
    let t_near = t0.max(0.0);
    if t1 <= t_near {
        return None;
    }
    Some(Ray {
        origin,
        dir,
        t_near,
        t_far: t1,
    })
}

pub fn load_cameras(path: &Path) -> Result<Vec<Camera>> {
    let text = std::fs::read_to_string(path).at(path)?;
    let cams: Vec<Camera> = serde_json::from_str(&text)?;
    for c in &cams {
        c.validate()?;
    }
    Ok(cams)
}

pub fn save_cameras(path: &Path, cameras: &[Camera]) -> Result<()> {
    let text = serde_json::to_string_pretty(cameras)?;
    std::fs::write(path, text).at(path)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn unit_cube() -> Aabb {
        Aabb::new(Vec3::splat(-1.0), Vec3::splat(1.0)).unwrap()
    }

    fn camera(rotation: Mat3) -> Camera {
        Camera::new(rotation, Vec3::new(0.0, 0.0, -5.0), (40.0, 42.0), (16.0, 12.0), (32, 24)).unwrap()
    }

    #[test]
    fn principal_point_looks_down_optical_axis() {
        let cam = camera(Mat3::IDENTITY);
        let d = cam.direction(cam.cx - 0.5, cam.cy - 0.5);
        assert!((d - Vec3::new(0.0, 0.0, 1.0)).norm() < 1e-15);
    }

    #[test]
    fn single_pixel_camera() {
        let cam = Camera::new(Mat3::IDENTITY, Vec3::ZERO, (1.0, 1.0), (0.5, 0.5), (1, 1)).unwrap();
        let d = cam.direction(0.0, 0.0);
        assert_eq!(d, Vec3::new(0.0, 0.0, 1.0));
    }

    #[test]
    fn rotated_camera_matches_manual_product() {
        let r = Mat3::rotation_y(std::f64::consts::FRAC_PI_2);
        let cam = camera(r);
        let (px, py) = (3.0, 20.0);
        // independent evaluation: explicit sums over the row-major entries
        let local = [(px + 0.5 - cam.cx) / cam.fx, (py + 0.5 - cam.cy) / cam.fy, 1.0];
        let mut w = [0.0; 3];
        for (i, wi) in w.iter_mut().enumerate() {
            for (k, lk) in local.iter().enumerate() {
                *wi += r.0[i][k] * lk;
            }
        }
        let n = (w[0] * w[0] + w[1] * w[1] + w[2] * w[2]).sqrt();
        let d = cam.direction(px, py);
        assert!((d.x - w[0] / n).abs() < 1e-12);
        assert!((d.y - w[1] / n).abs() < 1e-12);
        assert!((d.z - w[2] / n).abs() < 1e-12);
        // rotation by +90° about y sends camera +z to world +x
        let axis = cam.direction(cam.cx - 0.5, cam.cy - 0.5);
        assert!((axis - Vec3::new(1.0, 0.0, 0.0)).norm() < 1e-12);
    }

    #[test]
    fn rejects_non_finite_pixels() {
        let cam = camera(Mat3::IDENTITY);
        assert!(generate_ray(&cam, f64::NAN, 0.0, &unit_cube()).is_err());
        assert!(generate_ray(&cam, 0.0, f64::INFINITY, &unit_cube()).is_err());
    }

    #[test]
    fn axis_aligned_hit() {
        let hit = ray_aabb_intersect(Vec3::new(0.0, 0.0, -5.0), Vec3::new(0.0, 0.0, 1.0), &unit_cube());
        assert_eq!(hit, Some((4.0, 6.0)));
    }

    #[test]
    fn parallel_ray_outside_slab_misses() {
        let hit = ray_aabb_intersect(Vec3::new(0.0, 2.0, -5.0), Vec3::new(0.0, 0.0, 1.0), &unit_cube());
        assert_eq!(hit, None);
    }

    #[test]
    fn diagonal_ray_matches_marching() {
        let o = Vec3::new(-3.0, -2.5, -2.0);
        let d = Vec3::new(1.0, 1.0, 1.0).normalized();
        let (t0, t1) = ray_aabb_intersect(o, d, &unit_cube()).unwrap();
        let (m0, m1) = march_oracle(o, d, &unit_cube(), 10.0, 10_000).unwrap();
        let step = 10.0 / 10_000.0;
        assert!((t0 - m0).abs() <= step && (t1 - m1).abs() <= step);
    }

    fn march_oracle(o: Vec3, d: Vec3, b: &Aabb, t_max: f64, steps: usize) -> Option<(f64, f64)> {
        let mut first = None;
        let mut last = None;
        for i in 0..=steps {
            let t = t_max * i as f64 / steps as f64;
            if b.contains(o + d * t, 0.0) {
                first.get_or_insert(t);
                last = Some(t);
            }
        }
        Some((first?, last?))
    }

    #[test]
    fn look_at_is_a_proper_rotation() {
        let cam = Camera::look_at(
            Vec3::new(2.0, -1.0, 3.0),
            Vec3::ZERO,
            Vec3::new(0.0, -1.0, 0.0),
            30.0,
            (16, 16),
        )
        .unwrap();
        assert!(cam.rotation.orthonormality_error() < 1e-12);
        let axis = cam.direction(cam.cx - 0.5, cam.cy - 0.5);
        let want = (Vec3::ZERO - cam.position).normalized();
        assert!((axis - want).norm() < 1e-12);
    }

    #[test]
    fn camera_json_round_trip() {
        let mut cam = camera(Mat3::rotation_y(0.3));
        cam.split = Split::Test;
        let text = serde_json::to_string(&vec![cam.clone()]).unwrap();
        let back: Vec<Camera> = serde_json::from_str(&text).unwrap();
        assert_eq!(back[0], cam);
        assert!(text.contains("\"test\""));
    }

    mod props {
        use super::*;
        use proptest::prelude::*;

        fn arb_camera() -> impl Strategy<Value = Camera> {
            (
                -3.0..3.0f64,
                -3.0..3.0f64,
                -3.0..3.0f64,
                -1.0..1.0f64,
                -1.0..1.0f64,
                -1.0..1.0f64,
                10.0..200.0f64,
            )
                .prop_filter_map("degenerate", |(x, y, z, tx, ty, tz, f)| {
                    let pos = Vec3::new(x, y, z) * 3.0;
                    let target = Vec3::new(tx, ty, tz);
                    if (target - pos).norm() < 0.5 {
                        return None;
                    }
                    Camera::look_at(pos, target, Vec3::new(0.0, 1.0, 0.0), f, (64, 48)).ok()
                })
        }

        proptest! {
            #![proptest_config(ProptestConfig::with_cases(1000))]

            #[test]
            fn directions_are_unit(cam in arb_camera(), px in 0.0..64.0f64, py in 0.0..48.0f64) {
                let d = cam.direction(px, py);
                prop_assert!((d.norm() - 1.0).abs() < 1e-9);
            }

            #[test]
            fn projection_round_trip(cam in arb_camera(), px in 0.0..64.0f64, py in 0.0..48.0f64, t in 0.1..20.0f64) {
                let d = cam.direction(px, py);
                let (u, v) = cam.project(cam.position + d * t).unwrap();
                prop_assert!((u - px).abs() < 1e-4 && (v - py).abs() < 1e-4);
            }

            #[test]
            fn intersect_agrees_with_marching(
                ox in -4.0..4.0f64, oy in -4.0..4.0f64, oz in -4.0..4.0f64,
                dx in -1.0..1.0f64, dy in -1.0..1.0f64, dz in -1.0..1.0f64,
                lx in -1.0..0.5f64, ly in -1.0..0.5f64, lz in -1.0..0.5f64,
                sx in 0.2..1.5f64, sy in 0.2..1.5f64, sz in 0.2..1.5f64,
            ) {
                let d = Vec3::new(dx, dy, dz);
                prop_assume!(d.norm() > 0.1);
                let d = d.normalized();
                let o = Vec3::new(ox, oy, oz);
                let b = Aabb::new(Vec3::new(lx, ly, lz), Vec3::new(lx + sx, ly + sy, lz + sz)).unwrap();
                let t_max = 20.0;
                let step = t_max / 10_000.0;
                let oracle = march_oracle(o, d, &b, t_max, 10_000);
                let hit = ray_aabb_intersect(o, d, &b).and_then(|(a, e)| {
                    let (a, e) = (a.max(0.0), e.min(t_max));
                    (a <= e).then_some((a, e))
                });
                match (hit, oracle) {
                    (Some((a, e)), Some((ma, me))) => {
                        prop_assert!((a - ma).abs() <= step + 1e-9);
                        prop_assert!((e - me).abs() <= step + 1e-9);
                    }
                    // the marcher can step over a sliver thinner than one step
                    (Some((a, e)), None) => prop_assert!(e - a <= step),
                    (None, Some(_)) => prop_assert!(false, "marching found a hit the slab test missed"),
                    (None, None) => {}
                }
            }
        }
    }
}
