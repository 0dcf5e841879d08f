//! Frozen feature producers: a pre-norm ViT encoder and a 4-stage CNN.
//!
//! Both are randomly initialized from a seed and never trained in the
//! adapter modes. Real checkpoints can be supplied through [`load_frozen`]
//! as long as they use the parameter names below.

pub mod cnn;
pub mod vit;

use std::path::Path;

use loda_tensor::{Rng, Var};

use crate::config::{CnnConfig, VitConfig};
use crate::error::{Error, Result};
use crate::params::ParamStore;

pub use cnn::cnn_forward;
pub use vit::{encoder_layer, final_cls, patch_embed};

/// Deterministic frozen parameters for both backbones. Every tensor has
/// `requires_grad == false`.
pub fn init_frozen(seed: u64, vit_cfg: &VitConfig, cnn_cfg: &CnnConfig) -> Result<ParamStore> {
    vit_cfg.validate()?;
    cnn_cfg.validate()?;
    let root = Rng::new(seed);
    let mut store = vit::init(vit_cfg, &mut root.derive(1))?;
    store.extend(cnn::init(cnn_cfg, &mut root.derive(2))?)?;
    store.set_requires_grad(false);
    Ok(store)
}

/// Load frozen backbone weights, checking names and shapes against the
/// configured architecture.
pub fn load_frozen(path: &Path, vit_cfg: &VitConfig, cnn_cfg: &CnnConfig) -> Result<ParamStore> {
    let expected = init_frozen(0, vit_cfg, cnn_cfg)?;
    let file = crate::data::weights::load_weights(path)?;
    let mut store = file.frozen;
    expected.check_layout(&store).map_err(|e| match e {
        Error::Param { name, msg } => Error::Weights { path: path.to_path_buf(), msg: format!("tensor {name}: {msg}") },
        other => other,
    })?;
    store.set_requires_grad(false);
    Ok(store)
}

/// Multi-head scaled dot-product attention. `q` is `(b, lq, e)`, `k` and `v`
/// are `(b, lk, e)`; `e` is split into `heads` chunks. Returns the merged
/// heads `(b, lq, e)` and the attention probabilities `(b*heads, lq, lk)`.
pub fn multi_head_attention<'t>(
    q: Var<'t>,
    k: Var<'t>,
    v: Var<'t>,
    heads: usize,
) -> Result<(Var<'t>, Var<'t>)> {
    let (qs, ks) = (q.shape(), k.shape());
    if qs.len() != 3 || ks.len() != 3 || qs[0] != ks[0] || qs[2] != ks[2] || v.shape() != ks {
        return Err(Error::Contract(format!(
            "attention shapes q {qs:?} k {ks:?} v {:?}",
            v.shape()
        )));
    }
    let (b, lq, e) = (qs[0], qs[1], qs[2]);
    let lk = ks[1];
    if heads == 0 || e % heads != 0 {
        return Err(Error::Config(format!("width {e} is not divisible by {heads} heads")));
    }
    let dh = e / heads;
    let split = |x: Var<'t>, l: usize| -> Result<Var<'t>> {
        Ok(x.reshape(&[b, l, heads, dh])?.permute(&[0, 2, 1, 3])?.reshape(&[b * heads, l, dh])?)
    };
    let (qh, kh, vh) = (split(q, lq)?, split(k, lk)?, split(v, lk)?);
    let scores = qh.bmm(&kh.transpose_last()?)?.scale(1.0 / (dh as f64).sqrt());
    let probs = scores.softmax(2)?;
    let out = probs
        .bmm(&vh)?
        .reshape(&[b, heads, lq, dh])?
        .permute(&[0, 2, 1, 3])?
        .reshape(&[b, lq, e])?;
    Ok((out, probs))
}
