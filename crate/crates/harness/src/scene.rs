//! Procedural scenes: anti-aliased shapes on a gradient background, then an
//! underwater-style degradation (colour attenuation, scatter blur, haze,
//! sensor noise). Ground-truth masks come from the clean geometry.

use baris_core::rng::{standard_normal, stream};
use baris_core::Tensor;
use rand::Rng;
use serde::{Deserialize, Serialize};

/// Veil colour blended in by haze: the blue-green cast of turbid water.
pub const VEIL: [f32; 3] = [0.08, 0.42, 0.52];

/// Samples per pixel side for coverage.
const SUPERSAMPLE: usize = 4;

/// Every instance mask has at least this many foreground pixels.
pub const MIN_FOREGROUND: usize = 16;

/// Per-channel colour ranges. Backgrounds are dark like open water and
/// objects lighter, so an object is recognisable from its appearance and
/// not only from its closed outline.
const BACKGROUND_COLOURS: (f32, f32) = (0.0, 0.35);
const OBJECT_COLOURS: (f32, f32) = (0.45, 1.0);

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct DegradationParams {
    /// Per-channel multipliers, red first.
    pub attenuation: [f32; 3],
    pub scatter_blur_sigma: f32,
    pub haze_strength: f32,
    pub noise_sigma: f32,
}

impl DegradationParams {
    pub const IDENTITY: Self = Self {
        attenuation: [1.0; 3],
        scatter_blur_sigma: 0.0,
        haze_strength: 0.0,
        noise_sigma: 0.0,
    };
}

/// Closed sampling interval; `lo == hi` pins a value.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Range {
    pub lo: f32,
    pub hi: f32,
}

impl Range {
    pub const fn new(lo: f32, hi: f32) -> Self {
        Self { lo, hi }
    }

    pub const fn fixed(v: f32) -> Self {
        Self { lo: v, hi: v }
    }

    fn sample(&self, rng: &mut impl Rng) -> f32 {
        if self.lo == self.hi {
            self.lo
        } else {
            rng.random_range(self.lo..=self.hi)
        }
    }

    fn valid(&self, min: f32, max: f32) -> bool {
        min <= self.lo && self.lo <= self.hi && self.hi <= max
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct DegradationRanges {
    pub red: Range,
    pub green: Range,
    pub blue: Range,
    pub blur_sigma: Range,
    pub haze: Range,
    pub noise_sigma: Range,
}

impl Default for DegradationRanges {
    fn default() -> Self {
        Self {
            red: Range::new(0.2, 0.5),
            green: Range::new(0.5, 0.8),
            blue: Range::new(0.7, 1.0),
            blur_sigma: Range::new(0.0, 1.2),
            haze: Range::new(0.0, 0.4),
            noise_sigma: Range::new(0.0, 0.04),
        }
    }
}

impl DegradationRanges {
    pub fn pinned(p: DegradationParams) -> Self {
        Self {
            red: Range::fixed(p.attenuation[0]),
            green: Range::fixed(p.attenuation[1]),
            blue: Range::fixed(p.attenuation[2]),
            blur_sigma: Range::fixed(p.scatter_blur_sigma),
            haze: Range::fixed(p.haze_strength),
            noise_sigma: Range::fixed(p.noise_sigma),
        }
    }

    pub fn validate(&self) -> Result<(), String> {
        let checks = [
            ("red", self.red, 0.0, 1.0),
            ("green", self.green, 0.0, 1.0),
            ("blue", self.blue, 0.0, 1.0),
            ("blur_sigma", self.blur_sigma, 0.0, 8.0),
            ("haze", self.haze, 0.0, 1.0),
            ("noise_sigma", self.noise_sigma, 0.0, 1.0),
        ];
        for (name, r, min, max) in checks {
            if !r.valid(min, max) {
                return Err(format!("degradation {name} range [{}, {}] must lie within [{min}, {max}] with lo <= hi", r.lo, r.hi));
            }
        }
        Ok(())
    }

    pub fn sample(&self, rng: &mut impl Rng) -> DegradationParams {
        DegradationParams {
            attenuation: [self.red.sample(rng), self.green.sample(rng), self.blue.sample(rng)],
            scatter_blur_sigma: self.blur_sigma.sample(rng),
            haze_strength: self.haze.sample(rng),
            noise_sigma: self.noise_sigma.sample(rng),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SceneConfig {
    pub size: usize,
    pub max_instances: usize,
    pub degradation: DegradationRanges,
}

impl Default for SceneConfig {
    fn default() -> Self {
        Self {
            size: 64,
            max_instances: 5,
            degradation: DegradationRanges::default(),
        }
    }
}

impl SceneConfig {
    pub fn validate(&self) -> Result<(), String> {
        if self.size < 16 || self.max_instances == 0 {
            return Err(format!("scene size must be >= 16 and max_instances >= 1, got {} and {}", self.size, self.max_instances));
        }
        self.degradation.validate()
    }
}

#[derive(Clone, Debug)]
pub struct SyntheticScene {
    /// `[3, H, W]` in `[0, 1]`.
    pub image: Tensor<f32>,
    /// Clean render before degradation.
    pub clean: Tensor<f32>,
    /// Binary `[1, H, W]` per instance.
    pub masks: Vec<Tensor<f32>>,
    pub seed: u64,
    pub degradation: DegradationParams,
}

enum Shape {
    Ellipse { cx: f64, cy: f64, rx: f64, ry: f64, angle: f64 },
    /// Vertices sorted by angle around the centre, so star-shaped.
    Polygon(Vec<(f64, f64)>),
}

impl Shape {
    fn random(rng: &mut impl Rng, size: f64) -> Self {
        let cx = rng.random_range(0.15..0.85) * size;
        let cy = rng.random_range(0.15..0.85) * size;
        let r = rng.random_range(0.08..0.25) * size;
        if rng.random_bool(0.5) {
            Shape::Ellipse {
                cx,
                cy,
                rx: r,
                ry: r * rng.random_range(0.45..1.0),
                angle: rng.random_range(0.0..std::f64::consts::PI),
            }
        } else {
            let k = rng.random_range(3..7);
            let mut angles: Vec<f64> = (0..k).map(|_| rng.random_range(0.0..std::f64::consts::TAU)).collect();
            angles.sort_by(f64::total_cmp);
            let pts = angles
                .into_iter()
                .map(|a| {
                    let rr = r * rng.random_range(0.7..1.0);
                    (cx + rr * a.cos(), cy + rr * a.sin())
                })
                .collect();
            Shape::Polygon(pts)
        }
    }

    fn contains(&self, x: f64, y: f64) -> bool {
        match self {
            Shape::Ellipse { cx, cy, rx, ry, angle } => {
                let (dx, dy) = (x - cx, y - cy);
                let (s, c) = angle.sin_cos();
                let u = (c * dx + s * dy) / rx;
                let v = (-s * dx + c * dy) / ry;
                u * u + v * v <= 1.0
            }
            Shape::Polygon(pts) => {
                let mut inside = false;
                for i in 0..pts.len() {
                    let (x0, y0) = pts[i];
                    let (x1, y1) = pts[(i + 1) % pts.len()];
                    if (y0 > y) != (y1 > y) && x < x0 + (y - y0) * (x1 - x0) / (y1 - y0) {
                        inside = !inside;
                    }
                }
                inside
            }
        }
    }

    /// Fraction of `SUPERSAMPLE^2` subsamples inside, per pixel.
    fn coverage(&self, size: usize) -> Vec<f32> {
        let n = SUPERSAMPLE as f64;
        let mut cov = vec![0.0; size * size];
        for y in 0..size {
            for x in 0..size {
                let mut hits = 0;
                for sy in 0..SUPERSAMPLE {
                    for sx in 0..SUPERSAMPLE {
                        let px = x as f64 + (sx as f64 + 0.5) / n;
                        let py = y as f64 + (sy as f64 + 0.5) / n;
                        hits += self.contains(px, py) as u32;
                    }
                }
                cov[y * size + x] = hits as f32 / (SUPERSAMPLE * SUPERSAMPLE) as f32;
            }
        }
        cov
    }
}

fn random_colour(rng: &mut impl Rng, (lo, hi): (f32, f32)) -> [f32; 3] {
    std::array::from_fn(|_| rng.random_range(lo..hi))
}

/// Clean render and masks. Shapes are redrawn until their mask has at least
/// [`MIN_FOREGROUND`] pixels.
pub fn render_clean(seed: u64, cfg: &SceneConfig) -> (Tensor<f32>, Vec<Tensor<f32>>) {
    let size = cfg.size;
    let mut rng = stream(seed, "scene/layout");
    let (a, b) = (random_colour(&mut rng, BACKGROUND_COLOURS), random_colour(&mut rng, BACKGROUND_COLOURS));
    let dir = rng.random_range(0.0..std::f64::consts::TAU);
    let (dx, dy) = (dir.cos() as f32, dir.sin() as f32);
    let mut image = Tensor::from_fn(&[3, size, size], |i| {
        let (u, v) = (i[2] as f32 / (size - 1) as f32 - 0.5, i[1] as f32 / (size - 1) as f32 - 0.5);
        let t = (0.5 + dx * u + dy * v).clamp(0.0, 1.0);
        a[i[0]] * (1.0 - t) + b[i[0]] * t
    });
    let count = rng.random_range(1..=cfg.max_instances);
    let mut masks = Vec::with_capacity(count);
    for _ in 0..count {
        let (cov, mask) = loop {
            let cov = Shape::random(&mut rng, size as f64).coverage(size);
            let mask: Vec<f32> = cov.iter().map(|&c| (c >= 0.5) as u8 as f32).collect();
            if mask.iter().filter(|&&m| m > 0.0).count() >= MIN_FOREGROUND {
                break (cov, mask);
            }
        };
        let colour = random_colour(&mut rng, OBJECT_COLOURS);
        let data = image.data_mut();
        for ch in 0..3 {
            for (p, &c) in cov.iter().enumerate() {
                let px = &mut data[ch * size * size + p];
                *px = *px * (1.0 - c) + colour[ch] * c;
            }
        }
        masks.push(Tensor::new(&[1, size, size], mask).expect("length matches"));
    }
    (image, masks)
}

fn gaussian_kernel(sigma: f32) -> Vec<f32> {
    let radius = (3.0 * sigma).ceil() as i64;
    let k: Vec<f32> = (-radius..=radius).map(|d| (-(d * d) as f32 / (2.0 * sigma * sigma)).exp()).collect();
    let total: f32 = k.iter().sum();
    k.into_iter().map(|v| v / total).collect()
}

/// Separable Gaussian blur with edge clamping.
fn blur(image: &mut Tensor<f32>, sigma: f32) {
    let [c, h, w] = [image.shape()[0], image.shape()[1], image.shape()[2]];
    let k = gaussian_kernel(sigma);
    let r = (k.len() / 2) as i64;
    let clamp = |v: i64, n: usize| v.clamp(0, n as i64 - 1) as usize;
    let data = image.data_mut();
    let mut tmp = vec![0.0f32; h * w];
    for ch in 0..c {
        let plane = &mut data[ch * h * w..(ch + 1) * h * w];
        for y in 0..h {
            for x in 0..w {
                tmp[y * w + x] = k.iter().enumerate().map(|(j, &kv)| kv * plane[y * w + clamp(x as i64 + j as i64 - r, w)]).sum();
            }
        }
        for y in 0..h {
            for x in 0..w {
                plane[y * w + x] = k.iter().enumerate().map(|(j, &kv)| kv * tmp[clamp(y as i64 + j as i64 - r, h) * w + x]).sum();
            }
        }
    }
}

/// Attenuation, then blur, then haze, then noise, clamped to `[0, 1]`.
pub fn degrade(clean: &Tensor<f32>, p: &DegradationParams, rng: &mut impl Rng) -> Tensor<f32> {
    let plane = clean.shape()[1] * clean.shape()[2];
    let mut img = clean.clone();
    for (i, v) in img.data_mut().iter_mut().enumerate() {
        *v *= p.attenuation[i / plane];
    }
    if p.scatter_blur_sigma > 0.0 {
        blur(&mut img, p.scatter_blur_sigma);
    }
    if p.haze_strength > 0.0 {
        let hz = p.haze_strength;
        for (i, v) in img.data_mut().iter_mut().enumerate() {
            *v = (1.0 - hz) * *v + hz * VEIL[i / plane];
        }
    }
    if p.noise_sigma > 0.0 {
        for v in img.data_mut() {
            *v += p.noise_sigma * standard_normal(rng) as f32;
        }
    }
    img.map(|v| v.clamp(0.0, 1.0))
}

pub fn generate_scene(seed: u64, cfg: &SceneConfig) -> SyntheticScene {
    let (clean, masks) = render_clean(seed, cfg);
    let degradation = cfg.degradation.sample(&mut stream(seed, "scene/degradation"));
    let image = degrade(&clean, &degradation, &mut stream(seed, "scene/noise"));
    SyntheticScene {
        image,
        clean,
        masks,
        seed,
        degradation,
    }
}
