//! Fourier analysis of feature maps.
//!
//! A map `(c, n, n)` is transformed channel by channel with a 2-D DFT; the
//! amplitudes are averaged over channels (and over images when several maps
//! are given) and floored at [`AMPLITUDE_FLOOR`]. The profile samples the
//! natural-log amplitude along the half-diagonal of the centered spectrum,
//! i.e. at frequency `(t, t)` for `t = 0..=n/2`. The frequency axis is
//! `2t/n` in units of pi, so the last point is the Nyquist frequency.

use std::io::Write;
use std::path::Path;

use loda_tensor::{Tape, Tensor};
use rustfft::num_complex::Complex;
use rustfft::FftPlanner;

use crate::adaptation::LodaModel;
use crate::error::{Error, Result};

pub const AMPLITUDE_FLOOR: f64 = 1e-12;

#[derive(Debug, Clone, PartialEq)]
pub struct SpectrumProfile {
    /// Frequency in units of pi.
    pub frequency: Vec<f64>,
    pub log_amplitude: Vec<f64>,
    /// `log_amplitude - log_amplitude[0]`; exactly 0 at frequency 0.
    pub delta: Vec<f64>,
}

fn check_map(map: &Tensor) -> Result<(usize, usize)> {
    let s = map.shape();
    if s.len() != 3 || s[1] != s[2] {
        return Err(Error::Contract(format!("fourier analysis needs a square (c, n, n) map, got {s:?}")));
    }
    Ok((s[0], s[1]))
}

/// Raw channel-mean amplitude spectrum `|F(u, v)|`, `n x n` row-major with
/// the DC term at index 0 (not centered, not floored).
pub fn amplitude_spectrum(map: &Tensor) -> Result<Vec<f64>> {
    let (c, n) = check_map(map)?;
    let fft = FftPlanner::<f64>::new().plan_fft_forward(n);
    let mut acc = vec![0.0; n * n];
    let mut buf = vec![Complex::new(0.0, 0.0); n * n];
    let mut col = vec![Complex::new(0.0, 0.0); n];
    for ch in 0..c {
        let plane = &map.data()[ch * n * n..(ch + 1) * n * n];
        for (b, &v) in buf.iter_mut().zip(plane) {
            *b = Complex::new(v, 0.0);
        }
        for row in buf.chunks_exact_mut(n) {
            fft.process(row);
        }
        for x in 0..n {
            for y in 0..n {
                col[y] = buf[y * n + x];
            }
            fft.process(&mut col);
            for y in 0..n {
                buf[y * n + x] = col[y];
            }
        }
        for (a, b) in acc.iter_mut().zip(&buf) {
            *a += b.norm();
        }
    }
    acc.iter_mut().for_each(|a| *a /= c as f64);
    Ok(acc)
}

/// Order-independent mean: values are sorted before summation, so any
/// permutation of the inputs gives bitwise the same result.
fn stable_mean(mut v: Vec<f64>) -> f64 {
    v.sort_by(f64::total_cmp);
    v.iter().sum::<f64>() / v.len() as f64
}

/// Profile of the amplitude averaged over all `maps` (each `(c, n, n)`).
pub fn mean_profile(maps: &[Tensor]) -> Result<SpectrumProfile> {
    let first = maps.first().ok_or_else(|| Error::Contract("no feature maps given".into()))?;
    let (_, n) = check_map(first)?;
    let spectra: Vec<Vec<f64>> = maps
        .iter()
        .map(|m| {
            if check_map(m)?.1 != n {
                return Err(Error::Contract(format!("maps of different sizes {:?} and {:?}", first.shape(), m.shape())));
            }
            amplitude_spectrum(m)
        })
        .collect::<Result<_>>()?;
    let half = n / 2;
    let mut frequency = Vec::with_capacity(half + 1);
    let mut log_amplitude = Vec::with_capacity(half + 1);
    for t in 0..=half {
        let idx = (t % n) * n + (t % n);
        let amp = stable_mean(spectra.iter().map(|s| s[idx]).collect());
        frequency.push(2.0 * t as f64 / n as f64);
        log_amplitude.push(amp.max(AMPLITUDE_FLOOR).ln());
    }
    let delta = log_amplitude.iter().map(|v| v - log_amplitude[0]).collect();
    Ok(SpectrumProfile { frequency, log_amplitude, delta })
}

pub fn fourier_profile(map: &Tensor) -> Result<SpectrumProfile> {
    mean_profile(std::slice::from_ref(map))
}

/// Patch tokens `(l, D)` (CLS first) to a `(D, g, g)` spatial map.
pub fn tokens_to_map(tokens: &Tensor) -> Result<Tensor> {
    let s = tokens.shape();
    if s.len() != 2 || s[0] < 2 {
        return Err(Error::Contract(format!("expected (tokens, dim), got {s:?}")));
    }
    let (l, d) = (s[0] - 1, s[1]);
    let g = (l as f64).sqrt().round() as usize;
    if g * g != l {
        return Err(Error::Contract(format!("{l} patch tokens do not form a square grid")));
    }
    let src = &tokens.data()[d..];
    let mut out = vec![0.0; d * l];
    for t in 0..l {
        for ch in 0..d {
            out[ch * l + t] = src[t * d + ch];
        }
    }
    Ok(Tensor::from_vec(&[d, g, g], out)?)
}

/// Per-layer profiles of two models and their high-band difference.
#[derive(Debug, Clone, PartialEq)]
pub struct LayerComparison {
    pub layer: usize,
    pub a: SpectrumProfile,
    pub b: SpectrumProfile,
    /// Mean of `delta_b - delta_a` over frequencies >= 0.5 pi.
    pub high_band_diff: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ProfileReport {
    pub model_a: String,
    pub model_b: String,
    pub layers: Vec<LayerComparison>,
}

/// Compare two models layer by layer. `layers_x[i]` holds the layer-`i` maps
/// of every analysed image.
pub fn compare_profiles(
    name_a: &str,
    layers_a: &[Vec<Tensor>],
    name_b: &str,
    layers_b: &[Vec<Tensor>],
) -> Result<ProfileReport> {
    if layers_a.len() != layers_b.len() {
        return Err(Error::Contract(format!(
            "layer count mismatch: {} vs {}",
            layers_a.len(),
            layers_b.len()
        )));
    }
    let mut layers = Vec::with_capacity(layers_a.len());
    for (i, (ma, mb)) in layers_a.iter().zip(layers_b).enumerate() {
        let a = mean_profile(ma)?;
        let b = mean_profile(mb)?;
        let band: Vec<f64> = a
            .frequency
            .iter()
            .zip(a.delta.iter().zip(&b.delta))
            .filter(|(f, _)| **f >= 0.5)
            .map(|(_, (da, db))| db - da)
            .collect();
        let high_band_diff = if band.is_empty() { 0.0 } else { band.iter().sum::<f64>() / band.len() as f64 };
        layers.push(LayerComparison { layer: i, a, b, high_band_diff });
    }
    Ok(ProfileReport { model_a: name_a.to_string(), model_b: name_b.to_string(), layers })
}

impl ProfileReport {
    /// Plot data with header `frequency,delta_log_amplitude,model,layer`.
    pub fn write_csv<W: Write>(&self, out: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        let wrap = |e: csv::Error| Error::Input(format!("writing plot data: {e}"));
        w.write_record(["frequency", "delta_log_amplitude", "model", "layer"]).map_err(wrap)?;
        for l in &self.layers {
            for (name, p) in [(&self.model_a, &l.a), (&self.model_b, &l.b)] {
                for (f, d) in p.frequency.iter().zip(&p.delta) {
                    w.write_record([f.to_string(), d.to_string(), name.clone(), l.layer.to_string()])
                        .map_err(wrap)?;
                }
            }
        }
        w.flush().map_err(|e| Error::Input(format!("writing plot data: {e}")))?;
        Ok(())
    }

    pub fn save_csv(&self, path: &Path) -> Result<()> {
        let f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
        self.write_csv(std::io::BufWriter::new(f))
    }
}

/// Per-layer token maps of `model` on centre crops of `images` (each
/// `(3, H, W)`): `out[layer][image]` is a `(D, g, g)` map.
pub fn layer_maps(model: &LodaModel, images: &[Tensor], chunk: usize) -> Result<Vec<Vec<Tensor>>> {
    let size = model.vit.image_size;
    let mut out: Vec<Vec<Tensor>> = vec![Vec::with_capacity(images.len()); model.vit.num_layers];
    for group in images.chunks(chunk.max(1)) {
        let tape = Tape::inference();
        let crops = group
            .iter()
            .map(|img| {
                let s = img.shape();
                if s.len() != 3 || s[1] < size || s[2] < size {
                    return Err(Error::Input(format!("image {s:?} is smaller than {size}x{size}")));
                }
                let v = tape.leaf(img).narrow(1, (s[1] - size) / 2, size)?.narrow(2, (s[2] - size) / 2, size)?;
                Ok(v.reshape(&[1, 3, size, size])?)
            })
            .collect::<Result<Vec<_>>>()?;
        let batch = loda_tensor::Var::concat(&crops, 0)?.value();
        let fwd = model.forward(&tape, &batch)?;
        for (layer, tokens) in fwd.layers.iter().enumerate() {
            let t = tokens.value();
            let (l, d) = (t.shape()[1], t.shape()[2]);
            for chunk in t.data().chunks(l * d) {
                out[layer].push(tokens_to_map(&Tensor::from_vec(&[l, d], chunk.to_vec())?)?);
            }
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use loda_tensor::Rng;
    use std::f64::consts::PI;

    fn map(c: usize, n: usize, f: impl Fn(usize, usize, usize) -> f64) -> Tensor {
        let mut v = Vec::with_capacity(c * n * n);
        for ch in 0..c {
            for y in 0..n {
                for x in 0..n {
                    v.push(f(ch, y, x));
                }
            }
        }
        Tensor::from_vec(&[c, n, n], v).unwrap()
    }

    #[test]
    fn constant_map_has_floor_level_high_frequencies() {
        let p = fourier_profile(&map(2, 8, |_, _, _| 0.75)).unwrap();
        assert_eq!(p.delta[0], 0.0);
        for t in 1..p.log_amplitude.len() {
            assert_eq!(p.log_amplitude[t], AMPLITUDE_FLOOR.ln());
            assert!(p.delta[t] < -20.0);
        }
    }

    #[test]
    fn impulse_is_flat() {
        let p = fourier_profile(&map(1, 8, |_, y, x| if y == 0 && x == 0 { 1.0 } else { 0.0 })).unwrap();
        assert!(p.delta.iter().all(|d| d.abs() < 1e-9));
        assert_eq!(p.frequency, vec![0.0, 0.25, 0.5, 0.75, 1.0]);
    }

    #[test]
    fn cosine_peaks_at_its_bin() {
        let n = 16;
        for k in 1..n / 2 {
            let amp = amplitude_spectrum(&map(1, n, |_, _, x| (2.0 * PI * (k * x) as f64 / n as f64).cos())).unwrap();
            let best = (0..n * n).max_by(|&a, &b| amp[a].total_cmp(&amp[b])).unwrap();
            // Peaks at (0, k) and (0, n - k); the first is found first.
            assert!(best == k || best == n - k, "k={k} best={best}");
            let diag = fourier_profile(&map(1, n, |_, y, x| (2.0 * PI * (k * (x + y)) as f64 / n as f64).cos())).unwrap();
            let peak = (1..diag.delta.len()).max_by(|&a, &b| diag.delta[a].total_cmp(&diag.delta[b])).unwrap();
            assert_eq!(peak, k);
        }
    }

    #[test]
    fn identical_models_have_zero_difference() {
        let mut rng = Rng::new(5);
        let layers: Vec<Vec<Tensor>> =
            (0..3).map(|_| (0..4).map(|_| Tensor::normal(&[3, 4, 4], 0.0, 1.0, &mut rng).unwrap()).collect()).collect();
        let r = compare_profiles("a", &layers, "b", &layers).unwrap();
        for l in &r.layers {
            assert_eq!(l.high_band_diff, 0.0);
            assert_eq!(l.a, l.b);
        }
        assert!(compare_profiles("a", &layers, "b", &layers[..2]).is_err());
    }

    #[test]
    fn non_square_grid_rejected() {
        assert!(tokens_to_map(&Tensor::zeros(&[6, 2]).unwrap()).is_err());
        let m = tokens_to_map(&Tensor::from_vec(&[5, 2], (0..10).map(f64::from).collect()).unwrap()).unwrap();
        assert_eq!(m.shape(), &[2, 2, 2]);
        assert_eq!(m.data(), &[2.0, 4.0, 6.0, 8.0, 3.0, 5.0, 7.0, 9.0]);
    }
}
