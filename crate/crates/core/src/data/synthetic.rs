//! Synthetic distortion datasets.
//!
//! Every pristine reference comes from one of three procedural families and
//! is degraded by one distortion at one severity `s`:
//!
//! | distortion       | parameter                     |
//! |------------------|-------------------------------|
//! | `blur`           | Gaussian, sigma = s pixels    |
//! | `additive_noise` | Gaussian, sigma = 0.05 s      |
//! | `block_average`  | b x b blocks, b = 1 + round(2s) |
//!
//! The label is `MOS = 100 / (1 + s)`. For each base family, `images_per_cell`
//! references are drawn and each is distorted at every (distortion, severity)
//! pair, as in reference-based IQA databases.

use std::f64::consts::PI;
use std::fmt;
use std::path::Path;
use std::str::FromStr;

use image::RgbImage;
use loda_tensor::Rng;

use super::image_io::{from_unit_planes, save_ppm};
use super::manifest::{write_manifest, Manifest, ManifestRow};
use crate::config::DataConfig;
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Base {
    GaussianField,
    Checker,
    GradientMix,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Distortion {
    Blur,
    AdditiveNoise,
    BlockAverage,
}

impl Base {
    pub const ALL: [Base; 3] = [Base::GaussianField, Base::Checker, Base::GradientMix];

    pub fn as_str(&self) -> &'static str {
        match self {
            Base::GaussianField => "gaussian_field",
            Base::Checker => "checker",
            Base::GradientMix => "gradient_mix",
        }
    }
}

impl Distortion {
    pub const ALL: [Distortion; 3] = [Distortion::Blur, Distortion::AdditiveNoise, Distortion::BlockAverage];

    pub fn as_str(&self) -> &'static str {
        match self {
            Distortion::Blur => "blur",
            Distortion::AdditiveNoise => "additive_noise",
            Distortion::BlockAverage => "block_average",
        }
    }
}

impl fmt::Display for Base {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl fmt::Display for Distortion {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Base {
    type Err = Error;
    fn from_str(s: &str) -> Result<Base> {
        Base::ALL
            .into_iter()
            .find(|b| b.as_str() == s)
            .ok_or_else(|| Error::Config(format!("unknown base family {s:?}")))
    }
}

impl FromStr for Distortion {
    type Err = Error;
    fn from_str(s: &str) -> Result<Distortion> {
        Distortion::ALL
            .into_iter()
            .find(|d| d.as_str() == s)
            .ok_or_else(|| Error::Config(format!("unknown distortion {s:?}")))
    }
}

/// Quality label for severity `s >= 0`.
pub fn mos(severity: f64) -> f64 {
    100.0 / (1.0 + severity)
}

/// Planar `(3, n, n)` image with values nominally in `[0, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Planes {
    pub size: usize,
    pub data: Vec<f64>,
}

impl Planes {
    fn new(size: usize) -> Planes {
        Planes { size, data: vec![0.0; 3 * size * size] }
    }

    pub fn to_image(&self) -> RgbImage {
        from_unit_planes(&self.data, self.size, self.size)
    }
}

fn gaussian_kernel(sigma: f64) -> Vec<f64> {
    let radius = (3.0 * sigma).ceil() as isize;
    let k: Vec<f64> = (-radius..=radius).map(|i| (-(i * i) as f64 / (2.0 * sigma * sigma)).exp()).collect();
    let s: f64 = k.iter().sum();
    k.into_iter().map(|v| v / s).collect()
}

/// Separable convolution of each plane; `wrap` selects periodic borders,
/// otherwise borders are clamped.
fn convolve_separable(p: &Planes, kernel: &[f64], wrap: bool) -> Planes {
    let n = p.size as isize;
    let r = (kernel.len() / 2) as isize;
    let idx = |i: isize| -> usize {
        if wrap {
            i.rem_euclid(n) as usize
        } else {
            i.clamp(0, n - 1) as usize
        }
    };
    let mut tmp = Planes::new(p.size);
    let mut out = Planes::new(p.size);
    let sz = p.size;
    for c in 0..3 {
        let src = &p.data[c * sz * sz..(c + 1) * sz * sz];
        let t = &mut tmp.data[c * sz * sz..(c + 1) * sz * sz];
        for y in 0..sz {
            for x in 0..sz {
                t[y * sz + x] = kernel
                    .iter()
                    .enumerate()
                    .map(|(k, w)| w * src[y * sz + idx(x as isize + k as isize - r)])
                    .sum();
            }
        }
        let o = &mut out.data[c * sz * sz..(c + 1) * sz * sz];
        for y in 0..sz {
            for x in 0..sz {
                o[y * sz + x] = kernel
                    .iter()
                    .enumerate()
                    .map(|(k, w)| w * t[idx(y as isize + k as isize - r) * sz + x])
                    .sum();
            }
        }
    }
    out
}

/// Draw a pristine reference of the given family.
pub fn base_image(base: Base, size: usize, rng: &mut Rng) -> Planes {
    let n = size;
    let mut p = Planes::new(n);
    match base {
        Base::GaussianField => {
            for v in p.data.iter_mut() {
                *v = rng.normal(0.0, 1.0);
            }
            let mut f = convolve_separable(&p, &gaussian_kernel(1.5), true);
            for c in 0..3 {
                let plane = &mut f.data[c * n * n..(c + 1) * n * n];
                let m = plane.iter().sum::<f64>() / plane.len() as f64;
                let sd = (plane.iter().map(|v| (v - m) * (v - m)).sum::<f64>() / plane.len() as f64).sqrt();
                let (centre, spread) = (rng.uniform(0.35, 0.65), rng.uniform(0.12, 0.2));
                for v in plane.iter_mut() {
                    *v = centre + spread * (*v - m) / sd.max(1e-12);
                }
            }
            p = f;
        }
        Base::Checker => {
            let period = 4 + rng.below(9);
            let (px, py) = (rng.below(period), rng.below(period));
            let colors: Vec<[f64; 3]> =
                (0..2).map(|_| [rng.uniform(0.15, 0.85), rng.uniform(0.15, 0.85), rng.uniform(0.15, 0.85)]).collect();
            for y in 0..n {
                for x in 0..n {
                    let cell = ((x + px) / period + (y + py) / period) % 2;
                    for c in 0..3 {
                        p.data[c * n * n + y * n + x] = colors[cell][c];
                    }
                }
            }
        }
        Base::GradientMix => {
            for c in 0..3 {
                let theta = rng.uniform(0.0, 2.0 * PI);
                let (a0, a1) = (rng.uniform(0.25, 0.55), rng.uniform(0.1, 0.3));
                let freq = rng.uniform(1.0, 4.0);
                let phase = rng.uniform(0.0, 2.0 * PI);
                let (ct, st) = (theta.cos(), theta.sin());
                for y in 0..n {
                    for x in 0..n {
                        let (u, v) = (x as f64 / n as f64, y as f64 / n as f64);
                        let ramp = u * ct + v * st;
                        let wave = (2.0 * PI * freq * (u * st - v * ct) + phase).sin();
                        p.data[c * n * n + y * n + x] = a0 + a1 * ramp + 0.12 * wave;
                    }
                }
            }
        }
    }
    p
}

/// Apply one distortion at severity `s`. Severity 0 leaves the image as is.
pub fn distort(p: &Planes, d: Distortion, s: f64, rng: &mut Rng) -> Planes {
    if s <= 0.0 {
        return p.clone();
    }
    match d {
        Distortion::Blur => convolve_separable(p, &gaussian_kernel(s), false),
        Distortion::AdditiveNoise => {
            let sigma = 0.05 * s;
            Planes { size: p.size, data: p.data.iter().map(|v| v + rng.normal(0.0, sigma)).collect() }
        }
        Distortion::BlockAverage => {
            let b = 1 + (2.0 * s).round() as usize;
            let n = p.size;
            let mut out = p.clone();
            for c in 0..3 {
                let plane = &mut out.data[c * n * n..(c + 1) * n * n];
                for by in (0..n).step_by(b) {
                    for bx in (0..n).step_by(b) {
                        let (y1, x1) = ((by + b).min(n), (bx + b).min(n));
                        let mut sum = 0.0;
                        for y in by..y1 {
                            for x in bx..x1 {
                                sum += plane[y * n + x];
                            }
                        }
                        let mean = sum / ((y1 - by) * (x1 - bx)) as f64;
                        for y in by..y1 {
                            for x in bx..x1 {
                                plane[y * n + x] = mean;
                            }
                        }
                    }
                }
            }
            out
        }
    }
}

/// One generated sample.
#[derive(Debug, Clone)]
pub struct Sample {
    pub name: String,
    pub image: RgbImage,
    pub base: Base,
    pub distortion: Distortion,
    pub severity: f64,
    pub mos: f64,
}

/// Generate every sample of `data_cfg` in memory. Order: base, reference,
/// distortion, severity.
pub fn generate_samples(data_cfg: &DataConfig, seed: u64) -> Result<Vec<Sample>> {
    let bases: Vec<Base> = data_cfg.bases.iter().map(|s| s.parse()).collect::<Result<_>>()?;
    let dists: Vec<Distortion> = data_cfg.distortions.iter().map(|s| s.parse()).collect::<Result<_>>()?;
    if data_cfg.image_size < 8 || data_cfg.images_per_cell == 0 || data_cfg.severities.is_empty() {
        return Err(Error::Config("data needs image_size >= 8, images_per_cell >= 1 and a severity grid".into()));
    }
    if data_cfg.severities.iter().any(|s| !(s.is_finite() && *s >= 0.0)) {
        return Err(Error::Config("severities must be finite and >= 0".into()));
    }
    let root = Rng::new(seed);
    let mut out = Vec::new();
    for (bi, &base) in bases.iter().enumerate() {
        for k in 0..data_cfg.images_per_cell {
            let ref_stream = ((bi as u64) << 32) | k as u64;
            let reference = base_image(base, data_cfg.image_size, &mut root.derive(ref_stream));
            for (di, &dist) in dists.iter().enumerate() {
                for (si, &sev) in data_cfg.severities.iter().enumerate() {
                    let stream = (1 << 62) | ((bi as u64) << 40) | ((k as u64) << 20) | ((di as u64) << 10) | si as u64;
                    let planes = distort(&reference, dist, sev, &mut root.derive(stream));
                    out.push(Sample {
                        name: format!("{base}_{k:03}_{dist}_{si:02}.ppm"),
                        image: planes.to_image(),
                        base,
                        distortion: dist,
                        severity: sev,
                        mos: mos(sev),
                    });
                }
            }
        }
    }
    Ok(out)
}

/// Write all images of `data_cfg` plus `manifest.csv` into `out_dir`.
pub fn generate_dataset(data_cfg: &DataConfig, seed: u64, out_dir: &Path) -> Result<Manifest> {
    std::fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    let samples = generate_samples(data_cfg, seed)?;
    let mut rows = Vec::with_capacity(samples.len());
    for s in samples {
        save_ppm(&s.image, &out_dir.join(&s.name))?;
        rows.push(ManifestRow { path: s.name, mos: s.mos, split: None });
    }
    let manifest = Manifest { rows };
    write_manifest(&manifest, &out_dir.join("manifest.csv"))?;
    Ok(manifest)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn mos_is_decreasing_from_100() {
        assert_eq!(mos(0.0), 100.0);
        let grid: Vec<f64> = (0..20).map(|i| mos(i as f64 * 0.3)).collect();
        assert!(grid.windows(2).all(|w| w[1] < w[0]));
    }

    #[test]
    fn default_spec_has_64_images() {
        let s = generate_samples(&DataConfig::default(), 0).unwrap();
        assert_eq!(s.len(), 64);
        assert_eq!(s[0].image.dimensions(), (80, 80));
    }

    #[test]
    fn block_size_follows_severity() {
        let mut rng = Rng::new(1);
        let p = base_image(Base::GaussianField, 16, &mut rng);
        let q = distort(&p, Distortion::BlockAverage, 1.0, &mut rng);
        // b = 3: the top-left 3x3 block is constant, the next column differs.
        let px = |x: usize, y: usize| q.data[y * 16 + x];
        assert!((0..3).all(|y| (0..3).all(|x| px(x, y) == px(0, 0))));
        assert_ne!(px(3, 0), px(0, 0));
    }

    #[test]
    fn unknown_family_rejected() {
        let mut data_cfg = DataConfig::default();
        data_cfg.distortions = vec!["jpeg".into()];
        assert!(matches!(generate_samples(&data_cfg, 0), Err(Error::Config(_))));
    }
}
