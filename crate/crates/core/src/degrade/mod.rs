//! Underwater image formation: per-channel transmission `t = exp(-ν d)` and
//! the blend `I = J t + α (1 - t)` of scene radiance `J` with ambient light
//! `α`, plus a procedural generator of clean/degraded training pairs.
//!
//! Images are `[3, H, W]` tensors with values in `[0, 1]`; depth maps are
//! `[H, W]`.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::tensor::{Scalar, Tensor};

/// Default maximum scene depth of synthetic depth maps.
pub const DEFAULT_MAX_DEPTH: f64 = 5.0;

#[derive(Debug, Clone, PartialEq)]
pub struct DegradationParams {
    /// Ambient light per channel, each in `[0, 1]`.
    pub ambient: [f64; 3],
    /// Attenuation coefficient per channel, `>= 0`.
    pub attenuation: [f64; 3],
    /// Non-negative scene depth per pixel, `[H, W]`.
    pub depth: Tensor<f64>,
}

impl DegradationParams {
    pub fn validate(&self) -> Result<()> {
        if self.ambient.iter().any(|a| !(0.0..=1.0).contains(a)) {
            return Err(Error::Contract(format!("ambient light {:?} outside [0, 1]", self.ambient)));
        }
        if self.attenuation.iter().any(|n| !(n.is_finite() && *n >= 0.0)) {
            return Err(Error::Contract(format!("attenuation {:?} must be finite and >= 0", self.attenuation)));
        }
        if self.depth.rank() != 2 {
            return Err(Error::dim("degrade", format!("depth map {:?} is not [H, W]", self.depth.shape())));
        }
        if self.depth.data().iter().any(|d| !(d.is_finite() && *d >= 0.0)) {
            return Err(Error::Contract("depth map must be finite and >= 0".into()));
        }
        Ok(())
    }
}

/// `exp(-nu * d)` for one depth and coefficient.
pub fn transmission_value(d: f64, nu: f64) -> f64 {
    (-nu * d).exp()
}

/// Per-channel transmission map `[3, H, W]` for depth `[H, W]`.
pub fn transmission(depth: &Tensor<f64>, nu: &[f64; 3]) -> Result<Tensor<f64>> {
    if depth.rank() != 2 {
        return Err(Error::dim("transmission", format!("depth map {:?} is not [H, W]", depth.shape())));
    }
    if depth.data().iter().any(|&d| !(d >= 0.0)) || nu.iter().any(|&n| !(n >= 0.0)) {
        return Err(Error::Contract("transmission needs depth >= 0 and nu >= 0".into()));
    }
    let (h, w) = (depth.shape()[0], depth.shape()[1]);
    let plane = h * w;
    Ok(Tensor::from_fn(&[3, h, w], |i| transmission_value(depth.data()[i % plane], nu[i / plane])))
}

/// Blends `clean` toward the ambient light through transmission `t`
/// (`[3, H, W]`). The result is clamped to the segment between `J` and `α`
/// so rounding never leaves it.
pub fn blend<T: Scalar>(clean: &Tensor<T>, t: &Tensor<f64>, ambient: &[f64; 3]) -> Result<Tensor<T>> {
    if clean.rank() != 3 || clean.shape()[0] != 3 || clean.shape() != t.shape() {
        return Err(Error::dim(
            "degrade",
            format!("image {:?} against transmission {:?}", clean.shape(), t.shape()),
        ));
    }
    let plane = clean.shape()[1] * clean.shape()[2];
    Ok(Tensor::from_fn(clean.shape(), |i| {
        let (a, j, ti) = (ambient[i / plane], clean.data()[i].as_f64(), t.data()[i]);
        T::from_f64((j * ti + a * (1.0 - ti)).clamp(j.min(a), j.max(a)))
    }))
}

/// Degraded image `I = J t + α (1 - t)` with `t = exp(-ν d)`.
pub fn degrade<T: Scalar>(clean: &Tensor<T>, params: &DegradationParams) -> Result<Tensor<T>> {
    params.validate()?;
    if clean.rank() != 3 || clean.shape()[1..] != *params.depth.shape() {
        return Err(Error::dim(
            "degrade",
            format!("image {:?} against depth {:?}", clean.shape(), params.depth.shape()),
        ));
    }
    let t = transmission(&params.depth, &params.attenuation)?;
    blend(clean, &t, &params.ambient)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Preset {
    Bluish,
    Greenish,
    Hazy,
}

impl Preset {
    pub const ALL: [Preset; 3] = [Preset::Bluish, Preset::Greenish, Preset::Hazy];

    /// Nominal `(ambient, attenuation)`; red always attenuates fastest.
    pub fn nominal(self) -> ([f64; 3], [f64; 3]) {
        match self {
            Preset::Bluish => ([0.06, 0.38, 0.72], [0.70, 0.22, 0.08]),
            Preset::Greenish => ([0.10, 0.62, 0.40], [0.65, 0.12, 0.10]),
            Preset::Hazy => ([0.62, 0.68, 0.72], [0.40, 0.32, 0.25]),
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Preset::Bluish => "bluish",
            Preset::Greenish => "greenish",
            Preset::Hazy => "hazy",
        }
    }
}

impl std::str::FromStr for Preset {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Preset::ALL
            .into_iter()
            .find(|p| p.name() == s)
            .ok_or_else(|| Error::Config(format!("unknown preset {s:?} (bluish|greenish|hazy)")))
    }
}

impl std::fmt::Display for Preset {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

/// Preset parameters jittered per draw: ambient by ±0.05, attenuation by a
/// factor in [0.8, 1.2]. The red > green > blue attenuation order is kept.
pub fn sample_optics<R: Rng + ?Sized>(preset: Preset, rng: &mut R) -> ([f64; 3], [f64; 3]) {
    let (mut ambient, mut nu) = preset.nominal();
    for a in &mut ambient {
        *a = (*a + rng.random_range(-0.05..=0.05)).clamp(0.0, 1.0);
    }
    for n in &mut nu {
        *n *= rng.random_range(0.8..=1.2);
    }
    nu.sort_by(|a, b| b.total_cmp(a));
    (ambient, nu)
}

/// Smooth depth field: a coarse grid of uniform values, bilinearly
/// upsampled and stretched to `[0, max_depth]`.
pub fn smooth_depth<R: Rng + ?Sized>(h: usize, w: usize, max_depth: f64, rng: &mut R) -> Tensor<f64> {
    const GRID: usize = 4;
    let coarse: Vec<f64> = (0..GRID * GRID).map(|_| rng.random::<f64>()).collect();
    let sample = |y: f64, x: f64| {
        let (y0, x0) = (y.floor() as usize, x.floor() as usize);
        let (y1, x1) = ((y0 + 1).min(GRID - 1), (x0 + 1).min(GRID - 1));
        let (fy, fx) = (y - y0 as f64, x - x0 as f64);
        let g = |r: usize, c: usize| coarse[r * GRID + c];
        (1.0 - fy) * ((1.0 - fx) * g(y0, x0) + fx * g(y0, x1)) + fy * ((1.0 - fx) * g(y1, x0) + fx * g(y1, x1))
    };
    let scale = |n: usize, i: usize| if n > 1 { i as f64 * (GRID - 1) as f64 / (n - 1) as f64 } else { 0.0 };
    let raw: Vec<f64> = (0..h * w).map(|i| sample(scale(h, i / w), scale(w, i % w))).collect();
    let lo = raw.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = raw.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let span = if hi > lo { hi - lo } else { 1.0 };
    Tensor::new(&[h, w], raw.into_iter().map(|d| (d - lo) / span * max_depth).collect()).unwrap()
}

/// Procedural scene: a two-colour linear gradient with a few soft-edged
/// discs and rectangles on top.
pub fn procedural_image<R: Rng + ?Sized>(h: usize, w: usize, rng: &mut R) -> Tensor<f32> {
    let color = |rng: &mut R| -> [f64; 3] { [rng.random(), rng.random(), rng.random()] };
    let c0 = color(rng);
    let c1 = color(rng);
    let angle: f64 = rng.random_range(0.0..std::f64::consts::TAU);
    let (dy, dx) = angle.sin_cos();
    let mut img = vec![0.0f64; 3 * h * w];
    let plane = h * w;
    for y in 0..h {
        for x in 0..w {
            let u = ((y as f64 / h as f64 - 0.5) * dy + (x as f64 / w as f64 - 0.5) * dx + 0.71) / 1.42;
            for c in 0..3 {
                img[c * plane + y * w + x] = c0[c] + (c1[c] - c0[c]) * u.clamp(0.0, 1.0);
            }
        }
    }
    let shapes = rng.random_range(2..=4);
    for _ in 0..shapes {
        let col = color(rng);
        let cy = rng.random_range(0.0..h as f64);
        let cx = rng.random_range(0.0..w as f64);
        let ry = rng.random_range(0.12..0.35) * h as f64;
        let rx = rng.random_range(0.12..0.35) * w as f64;
        let disc = rng.random::<bool>();
        for y in 0..h {
            for x in 0..w {
                let (py, px) = (y as f64 + 0.5 - cy, x as f64 + 0.5 - cx);
                // signed distance in pixels, negative inside
                let dist = if disc {
                    ((py / ry).powi(2) + (px / rx).powi(2)).sqrt().mul_add(ry.min(rx), -ry.min(rx))
                } else {
                    (py.abs() - ry).max(px.abs() - rx)
                };
                let cover = (0.5 - dist).clamp(0.0, 1.0);
                if cover > 0.0 {
                    for c in 0..3 {
                        let p = &mut img[c * plane + y * w + x];
                        *p += (col[c] - *p) * cover;
                    }
                }
            }
        }
    }
    Tensor::new(&[3, h, w], img.into_iter().map(|v| v.clamp(0.0, 1.0) as f32).collect()).unwrap()
}

#[derive(Debug, Clone, PartialEq)]
pub struct SynthOptions {
    pub preset: Preset,
    pub size: (usize, usize),
    pub max_depth: f64,
}

impl SynthOptions {
    pub fn new(preset: Preset, size: (usize, usize)) -> Self {
        SynthOptions {
            preset,
            size,
            max_depth: DEFAULT_MAX_DEPTH,
        }
    }
}

/// A clean procedural image and its degraded version; deterministic per seed.
pub fn synth_pair(seed: u64, preset: Preset, size: (usize, usize)) -> (Tensor<f32>, Tensor<f32>) {
    synth_pair_with(seed, &SynthOptions::new(preset, size))
}

pub fn synth_pair_with(seed: u64, opts: &SynthOptions) -> (Tensor<f32>, Tensor<f32>) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (h, w) = opts.size;
    let clean = procedural_image(h, w, &mut rng);
    let degraded = degrade_sampled(&clean, opts.preset, opts.max_depth, &mut rng);
    (clean, degraded)
}

/// Degrades `clean` (`[3, H, W]`) with optics drawn from `preset` and a
/// random smooth depth map reaching `max_depth`.
pub fn degrade_sampled<T: Scalar, R: Rng + ?Sized>(clean: &Tensor<T>, preset: Preset, max_depth: f64, rng: &mut R) -> Tensor<T> {
    let (h, w) = (clean.shape()[1], clean.shape()[2]);
    let (ambient, attenuation) = sample_optics(preset, rng);
    let params = DegradationParams {
        ambient,
        attenuation,
        depth: smooth_depth(h, w, max_depth, rng),
    };
    degrade(clean, &params).expect("preset parameters are valid")
}

/// Mean of each channel of a `[3, H, W]` image.
pub fn channel_means<T: Scalar>(img: &Tensor<T>) -> [f64; 3] {
    let plane = img.len() / 3;
    let mut m = [0.0; 3];
    for (c, chunk) in img.data().chunks(plane).enumerate().take(3) {
        m[c] = chunk.iter().map(|v| v.as_f64()).sum::<f64>() / plane as f64;
    }
    m
}
