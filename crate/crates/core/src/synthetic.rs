//! Procedural indoor-like scenes: a textured back wall and floor plus a few
//! Lambertian spheres, ray cast through a pinhole camera.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::depthio::{DepthMap, ImageRgb, Sample};
use crate::error::Result;

pub const SCENE_WIDTH: usize = 64;
pub const SCENE_HEIGHT: usize = 48;

#[derive(Debug, Clone, Copy)]
struct Sphere {
    center: [f64; 3],
    radius: f64,
    albedo: [f64; 3],
}

#[derive(Debug, Clone, Copy)]
struct Plane {
    /// Points `p` with `dot(normal, p) = offset`.
    normal: [f64; 3],
    offset: f64,
    albedo: [f64; 3],
    checker: f64,
}

#[derive(Debug, Clone)]
pub struct Scene {
    planes: Vec<Plane>,
    spheres: Vec<Sphere>,
    light: [f64; 3],
    focal: f64,
}

fn dot(a: [f64; 3], b: [f64; 3]) -> f64 {
    a[0] * b[0] + a[1] * b[1] + a[2] * b[2]
}

fn normalize(a: [f64; 3]) -> [f64; 3] {
    let n = dot(a, a).sqrt();
    [a[0] / n, a[1] / n, a[2] / n]
}

fn color(rng: &mut ChaCha8Rng) -> [f64; 3] {
    [rng.random_range(0.2..0.9), rng.random_range(0.2..0.9), rng.random_range(0.2..0.9)]
}

impl Scene {
    pub fn random(seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let wall_depth = rng.random_range(3.5..5.0);
        let tilt = rng.random_range(-0.25..0.25);
        let floor_height = rng.random_range(0.9..1.3);
        let planes = vec![
            Plane {
                normal: normalize([tilt, 0.0, 1.0]),
                offset: wall_depth * normalize([tilt, 0.0, 1.0])[2],
                albedo: color(&mut rng),
                checker: rng.random_range(0.4..0.8),
            },
            Plane {
                normal: [0.0, 1.0, 0.0],
                offset: floor_height,
                albedo: color(&mut rng),
                checker: rng.random_range(0.25..0.5),
            },
        ];
        let count = rng.random_range(1..=3);
        let spheres = (0..count)
            .map(|_| {
                let z = rng.random_range(2.0..3.2);
                let radius = rng.random_range(0.3..0.6);
                Sphere {
                    center: [rng.random_range(-0.9..0.9), rng.random_range(-0.5..floor_height - radius), z],
                    radius,
                    albedo: color(&mut rng),
                }
            })
            .collect();
        Self {
            planes,
            spheres,
            light: normalize([rng.random_range(-0.6..0.6), -1.0, -0.8]),
            focal: 58.0,
        }
    }

    /// Nearest hit along the camera ray through pixel `(x, y)`: `(depth, rgb)`.
    fn trace(&self, x: usize, y: usize, w: usize, h: usize) -> (f64, [f64; 3]) {
        let dir = [
            (x as f64 + 0.5 - w as f64 / 2.0) / self.focal,
            (y as f64 + 0.5 - h as f64 / 2.0) / self.focal,
            1.0,
        ];
        let mut best = (f64::INFINITY, [0.0; 3], [0.0; 3]);
        for p in &self.planes {
            let denom = dot(p.normal, dir);
            if denom.abs() < 1e-9 {
                continue;
            }
            let t = p.offset / denom;
            if t > 0.0 && t < best.0 {
                let hit = [dir[0] * t, dir[1] * t, dir[2] * t];
                let u = (hit[0] * 2.0).floor() + (hit[1] * 2.0).floor() + (hit[2] * 2.0).floor();
                let shade = if u.rem_euclid(2.0) < 1.0 { 1.0 } else { p.checker };
                let albedo = [p.albedo[0] * shade, p.albedo[1] * shade, p.albedo[2] * shade];
                best = (t, [-p.normal[0], -p.normal[1], -p.normal[2]], albedo);
            }
        }
        for s in &self.spheres {
            let b = dot(dir, s.center);
            let c = dot(s.center, s.center) - s.radius * s.radius;
            let a = dot(dir, dir);
            let disc = b * b - a * c;
            if disc < 0.0 {
                continue;
            }
            let t = (b - disc.sqrt()) / a;
            if t > 0.0 && t < best.0 {
                let hit = [dir[0] * t, dir[1] * t, dir[2] * t];
                let n = normalize([hit[0] - s.center[0], hit[1] - s.center[1], hit[2] - s.center[2]]);
                best = (t, n, s.albedo);
            }
        }
        let (t, n, albedo) = best;
        let lambert = 0.25 + 0.75 * (-dot(n, self.light)).max(0.0);
        let rgb = [albedo[0] * lambert, albedo[1] * lambert, albedo[2] * lambert];
        (t * dir[2], rgb)
    }

    pub fn render(&self, w: usize, h: usize) -> Result<(ImageRgb, DepthMap)> {
        let mut depth = Vec::with_capacity(w * h);
        let mut rgb = Vec::with_capacity(3 * w * h);
        for y in 0..h {
            for x in 0..w {
                let (d, c) = self.trace(x, y, w, h);
                depth.push(d.min(10.0) as f32);
                rgb.extend(c.iter().map(|v| *v as f32));
            }
        }
        Ok((ImageRgb::new(w, h, rgb)?, DepthMap::new(w, h, depth)?))
    }
}

/// `count` scenes at 64x48 with ids `synthetic-000`, ...; the sparse map is empty.
pub fn scenes(count: usize, seed: u64) -> Result<Vec<Sample>> {
    (0..count)
        .map(|i| {
            let (image, gt) = Scene::random(seed.wrapping_add(i as u64 * 7919)).render(SCENE_WIDTH, SCENE_HEIGHT)?;
            Sample::new(format!("synthetic-{i:03}"), image, DepthMap::zeros(SCENE_WIDTH, SCENE_HEIGHT), gt)
        })
        .collect()
}
