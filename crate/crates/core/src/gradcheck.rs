//! Finite-difference checks of the full model: every tensor op, the PLCC
//! loss, and the end-to-end `forward + plcc_loss` composition.

use loda_tensor::gradcheck::{op_suite, GradCheck};
use loda_tensor::{finite_diff_directional, finite_diff_grad, relative_error, Rng, Tape, Tensor};

use crate::adaptation::LodaModel;
use crate::config::{Config, Mode};
use crate::error::Result;
use crate::metrics::plcc_loss;

pub const DEFAULT_STEP: f64 = 1e-5;
pub const DEFAULT_TOLERANCE: f64 = 1e-4;

/// Images per end-to-end check.
const MODEL_BATCH: usize = 4;

/// Gradient of `plcc_loss` with respect to a random 8-element prediction
/// vector.
pub fn plcc_loss_check(seed: u64, h: f64) -> Result<GradCheck> {
    let mut rng = Rng::new(seed).derive(1);
    let pred = Tensor::normal(&[8], 0.0, 1.0, &mut rng)?.with_requires_grad(true);
    let label: Vec<f64> = (0..8).map(|_| rng.uniform(0.0, 100.0)).collect();
    let tape = Tape::new();
    let v = tape.leaf(&pred);
    let grads = tape.backward(plcc_loss(v, &label)?)?;
    let analytic = grads.slice(v).map(<[f64]>::to_vec).unwrap_or_else(|| vec![0.0; 8]);
    let numeric = finite_diff_grad(
        |x| {
            let tape = Tape::inference();
            let loss = plcc_loss(tape.leaf(x), &label).map_err(|e| loda_tensor::TensorError::Contract(e.to_string()))?;
            loss.value().item()
        },
        &pred,
        h,
    )?;
    Ok(GradCheck { name: "plcc_loss".into(), seed, input: 0, rel_err: relative_error(&analytic, numeric.data()) })
}

fn model_loss(model: &LodaModel, images: &Tensor, labels: &[f64]) -> Result<f64> {
    let tape = Tape::inference();
    let out = model.forward(&tape, images)?;
    let b = labels.len();
    Ok(plcc_loss(out.score.reshape(&[b])?, labels)?.value().item()?)
}

/// End-to-end check of `forward + plcc_loss` in `mode`. Gates are drawn at
/// random so the injected branch contributes. For each trainable tensor the
/// analytic directional derivative along a random direction is compared to
/// a central difference; the reported error is the norm-wise relative error
/// over the vector of all per-tensor directional derivatives.
pub fn model_check(cfg: &Config, mode: Mode, seed: u64, h: f64) -> Result<GradCheck> {
    let mut model = LodaModel::new(cfg, mode, seed)?;
    let mut rng = Rng::new(seed).derive(500);
    for (name, t) in model.trainable.iter_mut() {
        if name.ends_with(".gate") {
            t.data_mut().iter_mut().for_each(|v| *v = rng.uniform(-0.5, 0.5));
        }
    }
    let size = cfg.vit.image_size;
    let images = Tensor::normal(&[MODEL_BATCH, 3, size, size], 0.0, 1.0, &mut rng)?;
    let labels: Vec<f64> = (0..MODEL_BATCH).map(|_| rng.uniform(0.0, 100.0)).collect();

    let tape = Tape::new();
    let bound = model.bind(&tape);
    let out = model.forward_with(&tape, &images, &bound)?;
    let loss = plcc_loss(out.score.reshape(&[MODEL_BATCH])?, &labels)?;
    let grads = bound.gradients(&tape.backward(loss)?);

    let names: Vec<String> = model.trainable.names().map(String::from).collect();
    let mut analytic = Vec::with_capacity(names.len());
    let mut numeric = Vec::with_capacity(names.len());
    for name in &names {
        let base = model.trainable.get(name)?.clone();
        let dir: Vec<f64> = (0..base.numel()).map(|_| rng.normal(0.0, 1.0)).collect();
        let g = grads.get(name).map(|g| g.data().to_vec()).unwrap_or_else(|| vec![0.0; base.numel()]);
        analytic.push(g.iter().zip(&dir).map(|(a, b)| a * b).sum::<f64>());
        let probe = std::cell::RefCell::new(model.clone());
        let fd = finite_diff_directional(
            |x| {
                let mut m = probe.borrow_mut();
                *m.trainable.get_mut(name).expect("listed name") = x.clone();
                model_loss(&m, &images, &labels).map_err(|e| loda_tensor::TensorError::Contract(e.to_string()))
            },
            &base,
            &dir,
            h,
        )?;
        numeric.push(fd);
    }
    Ok(GradCheck {
        name: format!("forward+plcc_loss[{mode}]"),
        seed,
        input: names.len(),
        rel_err: relative_error(&analytic, &numeric),
    })
}

/// The whole suite: every op, the loss and the end-to-end composition,
/// each over `seeds`.
pub fn full_suite(cfg: &Config, seeds: std::ops::Range<u64>, h: f64) -> Result<Vec<GradCheck>> {
    let mut out = op_suite(seeds.clone(), h)?;
    for seed in seeds.clone() {
        out.push(plcc_loss_check(seed, h)?);
    }
    for seed in seeds {
        out.push(model_check(cfg, Mode::Loda, seed, h)?);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn plcc_loss_gradient() {
        for seed in 0..5 {
            let c = plcc_loss_check(seed, DEFAULT_STEP).unwrap();
            assert!(c.passed(DEFAULT_TOLERANCE), "{c:?}");
        }
    }
}
