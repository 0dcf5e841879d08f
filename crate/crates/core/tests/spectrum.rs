use std::f64::consts::PI;

use loda::data::image_io::to_tensor;
use loda::data::synthetic::{base_image, distort, Base, Distortion};
use loda::spectrum::{amplitude_spectrum, compare_profiles, fourier_profile, layer_maps, mean_profile, AMPLITUDE_FLOOR};
use loda::metrics::srcc;
use loda::{Config, LodaModel, Mode};
use loda_tensor::{Rng, Tensor};

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

fn high_band(p: &loda::spectrum::SpectrumProfile) -> f64 {
    let v: Vec<f64> = p.frequency.iter().zip(&p.log_amplitude).filter(|(f, _)| **f >= 0.5).map(|(_, a)| *a).collect();
    v.iter().sum::<f64>() / v.len() as f64
}

#[test]
fn constant_impulse_and_cosine() {
    let p = fourier_profile(&map(3, 16, |c, _, _| 1.0 + c as f64)).unwrap();
    assert_eq!(p.delta[0], 0.0);
    assert!(p.log_amplitude[1..].iter().all(|&a| a == AMPLITUDE_FLOOR.ln()));

    let p = fourier_profile(&map(2, 16, |_, y, x| if (y, x) == (3, 5) { 2.0 } else { 0.0 })).unwrap();
    assert!(p.delta.iter().all(|d| d.abs() < 1e-9));

    for k in 1..=8 {
        let p = fourier_profile(&map(1, 16, |_, y, x| (2.0 * PI * (k * (x + y)) as f64 / 16.0).cos())).unwrap();
        for t in 0..p.delta.len() {
            if t != k {
                assert!(p.log_amplitude[t] < p.log_amplitude[k] - 10.0, "k={k} t={t}");
            }
        }
    }
}

#[test]
fn spectrum_matches_direct_dft() {
    let m = Tensor::normal(&[2, 6, 6], 0.0, 1.0, &mut Rng::new(4)).unwrap();
    let fast = amplitude_spectrum(&m).unwrap();
    let n = 6;
    for u in 0..n {
        for v in 0..n {
            let mut acc = 0.0;
            for c in 0..2 {
                let (mut re, mut im) = (0.0, 0.0);
                for y in 0..n {
                    for x in 0..n {
                        let a = -2.0 * PI * ((u * y + v * x) as f64) / n as f64;
                        let val = m.data()[c * n * n + y * n + x];
                        re += val * a.cos();
                        im += val * a.sin();
                    }
                }
                acc += (re * re + im * im).sqrt();
            }
            assert!((fast[u * n + v] - acc / 2.0).abs() < 1e-10);
        }
    }
}

#[test]
fn checkerboard_stub_raises_the_high_band() {
    let mut rng = Rng::new(1);
    let a: Vec<Vec<Tensor>> =
        (0..2).map(|_| (0..6).map(|_| Tensor::normal(&[4, 8, 8], 0.0, 1.0, &mut rng).unwrap()).collect()).collect();
    let checker = map(4, 8, |_, y, x| if (x + y) % 2 == 0 { 1.5 } else { -1.5 });
    let b: Vec<Vec<Tensor>> = a
        .iter()
        .map(|layer| {
            layer
                .iter()
                .map(|t| Tensor::from_vec(t.shape(), t.data().iter().zip(checker.data()).map(|(x, c)| x + c).collect()).unwrap())
                .collect()
        })
        .collect();
    let r = compare_profiles("plain", &a, "boosted", &b).unwrap();
    assert!(r.layers.iter().all(|l| l.high_band_diff > 0.0));
    let same = compare_profiles("plain", &a, "plain", &a).unwrap();
    assert!(same.layers.iter().all(|l| l.high_band_diff == 0.0 && l.a.delta == l.b.delta));
}

#[test]
fn image_order_does_not_matter() {
    let mut rng = Rng::new(2);
    let maps: Vec<Tensor> = (0..128).map(|_| Tensor::normal(&[2, 4, 4], 0.0, 1.0, &mut rng).unwrap()).collect();
    let mut shuffled = maps.clone();
    rng.shuffle(&mut shuffled);
    assert_eq!(mean_profile(&maps).unwrap(), mean_profile(&shuffled).unwrap());
}

/// Mean high-band log amplitude of the channel-averaged profile over several
/// references blurred at severity `s`. `quantize` goes through the 8-bit
/// image that is written to disk.
fn blurred_high_band(base: Base, s: f64, quantize: bool) -> f64 {
    let maps: Vec<Tensor> = (0..8)
        .map(|seed| {
            let p = distort(&base_image(base, 64, &mut Rng::new(seed)), Distortion::Blur, s, &mut Rng::new(0));
            if quantize {
                to_tensor(&p.to_image())
            } else {
                Tensor::from_vec(&[3, 64, 64], p.data).unwrap()
            }
        })
        .collect();
    high_band(&mean_profile(&maps).unwrap())
}

#[test]
fn blur_removes_high_frequencies() {
    let grid: Vec<f64> = (0..16).map(|i| i as f64 * 0.25).collect();
    // The smoothed field has almost nothing near Nyquist to begin with, so
    // the exact check uses the checker base only.
    let exact: Vec<f64> = grid.iter().map(|&s| blurred_high_band(Base::Checker, s, false)).collect();
    assert!(exact.windows(2).all(|w| w[1] < w[0]), "{exact:?}");
    // 8-bit files flatten out at the quantization floor, so only the first
    // steps are strict and the full grid is checked by rank.
    for base in [Base::Checker, Base::GaussianField] {
        let stored: Vec<f64> = grid.iter().map(|&s| blurred_high_band(base, s, true)).collect();
        assert!(stored[0] > stored[2] && stored[2] > stored[4] && stored[4] > stored[6], "{base}: {stored:?}");
        assert!(stored[6..].iter().all(|&e| e < stored[4]), "{base}: {stored:?}");
        if base == Base::Checker {
            assert!(srcc(&stored, &grid).unwrap() < -0.8, "{stored:?}");
        }
    }
}

#[test]
fn csv_layout_and_model_maps() {
    let cfg = Config::desk();
    let model = LodaModel::new(&cfg, Mode::Loda, 0).unwrap();
    let images: Vec<Tensor> =
        (0..3).map(|i| Tensor::normal(&[3, 80, 80], 0.0, 1.0, &mut Rng::new(i)).unwrap()).collect();
    let maps = layer_maps(&model, &images, 2).unwrap();
    assert_eq!(maps.len(), 4);
    assert!(maps.iter().all(|l| l.len() == 3 && l[0].shape() == [64, 4, 4]));
    let r = compare_profiles("vit", &maps, "loda", &maps).unwrap();
    let mut buf = Vec::new();
    r.write_csv(&mut buf).unwrap();
    let text = String::from_utf8(buf).unwrap();
    let mut lines = text.lines();
    assert_eq!(lines.next(), Some("frequency,delta_log_amplitude,model,layer"));
    assert_eq!(lines.next(), Some("0,0,vit,0"));
    assert_eq!(text.lines().count(), 1 + 4 * 2 * 3);
}
