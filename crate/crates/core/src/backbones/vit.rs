//! Pre-norm ViT encoder.
//!
//! Parameter names follow the usual timm layout:
//! `vit.patch_embed.{weight,bias}`, `vit.cls_token`, `vit.pos_embed`,
//! `vit.blocks.{i}.{norm1,attn.qkv,attn.proj,norm2,mlp.fc1,mlp.fc2}.{weight,bias}`
//! and `vit.norm.{weight,bias}`. Affine weights are stored `(in, out)`.

use loda_tensor::{Rng, Tensor, Var};

use super::multi_head_attention;
use crate::config::VitConfig;
use crate::error::{Error, Result};
use crate::params::{lecun, linear, ones, zeros, Bound, ParamStore};

pub const LN_EPS: f64 = 1e-6;

pub fn init(cfg: &VitConfig, rng: &mut Rng) -> Result<ParamStore> {
    cfg.validate()?;
    let d = cfg.embed_dim;
    let p = cfg.patch_size;
    let hidden = d * cfg.mlp_ratio;
    let mut s = ParamStore::new();
    s.insert("vit.patch_embed.weight", lecun(&[d, 3, p, p], 3 * p * p, rng)?);
    s.insert("vit.patch_embed.bias", zeros(&[d])?);
    s.insert("vit.cls_token", Tensor::normal(&[1, 1, d], 0.0, 0.02, rng)?);
    s.insert("vit.pos_embed", Tensor::normal(&[1, cfg.num_tokens(), d], 0.0, 0.02, rng)?);
    for i in 0..cfg.num_layers {
        let b = format!("vit.blocks.{i}");
        s.insert(format!("{b}.norm1.weight"), ones(&[d])?);
        s.insert(format!("{b}.norm1.bias"), zeros(&[d])?);
        linear(&mut s, &format!("{b}.attn.qkv"), d, 3 * d, rng)?;
        linear(&mut s, &format!("{b}.attn.proj"), d, d, rng)?;
        s.insert(format!("{b}.norm2.weight"), ones(&[d])?);
        s.insert(format!("{b}.norm2.bias"), zeros(&[d])?);
        linear(&mut s, &format!("{b}.mlp.fc1"), d, hidden, rng)?;
        linear(&mut s, &format!("{b}.mlp.fc2"), hidden, d, rng)?;
    }
    s.insert("vit.norm.weight", ones(&[d])?);
    s.insert("vit.norm.bias", zeros(&[d])?);
    Ok(s)
}

/// `(b, 3, H, W)` image to `(b, 1 + (H/p)^2, D)` tokens: non-overlapping
/// patch projection, CLS prepended, position embeddings added.
pub fn patch_embed<'t>(image: Var<'t>, cfg: &VitConfig, p: &Bound<'t>) -> Result<Var<'t>> {
    let s = image.shape();
    if s.len() != 4 || s[1] != 3 {
        return Err(Error::Input(format!("expected a (b, 3, H, W) image, got {s:?}")));
    }
    if s[2] != cfg.image_size || s[3] != cfg.image_size || s[2] % cfg.patch_size != 0 {
        return Err(Error::Config(format!(
            "image {}x{} does not match image_size {} with patch_size {}",
            s[2], s[3], cfg.image_size, cfg.patch_size
        )));
    }
    let b = s[0];
    let patches = image
        .conv2d(
            &p.get("vit.patch_embed.weight")?,
            Some(&p.get("vit.patch_embed.bias")?),
            cfg.patch_size,
            0,
        )?
        .flatten(2)?
        .permute(&[0, 2, 1])?;
    let cls = p.get("vit.cls_token")?;
    let cls = Var::concat(&vec![cls; b], 0)?;
    let tokens = Var::concat(&[cls, patches], 1)?;
    Ok(tokens.add(&p.get("vit.pos_embed")?)?)
}

/// One pre-norm encoder layer:
/// `x + attn(ln1(x))`, then `x + mlp(ln2(x))`.
pub fn encoder_layer<'t>(x: Var<'t>, i: usize, cfg: &VitConfig, p: &Bound<'t>) -> Result<Var<'t>> {
    if i >= cfg.num_layers {
        return Err(Error::Contract(format!("layer {i} out of range 0..{}", cfg.num_layers)));
    }
    let pre = format!("vit.blocks.{i}");
    let w = |name: &str| p.get(&format!("{pre}.{name}"));
    let s = x.shape();
    let (b, l, d) = (s[0], s[1], s[2]);

    let h = x.layer_norm(&w("norm1.weight")?, &w("norm1.bias")?, LN_EPS)?;
    let qkv = h
        .affine(&w("attn.qkv.weight")?, Some(&w("attn.qkv.bias")?))?
        .reshape(&[b, l, 3, d])?;
    let q = qkv.narrow(2, 0, 1)?.reshape(&[b, l, d])?;
    let k = qkv.narrow(2, 1, 1)?.reshape(&[b, l, d])?;
    let v = qkv.narrow(2, 2, 1)?.reshape(&[b, l, d])?;
    let (att, _) = multi_head_attention(q, k, v, cfg.num_heads)?;
    let att = att.affine(&w("attn.proj.weight")?, Some(&w("attn.proj.bias")?))?;
    let x = x.add(&att)?;

    let h = x.layer_norm(&w("norm2.weight")?, &w("norm2.bias")?, LN_EPS)?;
    let h = h
        .affine(&w("mlp.fc1.weight")?, Some(&w("mlp.fc1.bias")?))?
        .gelu()
        .affine(&w("mlp.fc2.weight")?, Some(&w("mlp.fc2.bias")?))?;
    Ok(x.add(&h)?)
}

/// Final LayerNorm and CLS selection: `(b, l, D)` to `(b, D)`.
pub fn final_cls<'t>(x: Var<'t>, p: &Bound<'t>) -> Result<Var<'t>> {
    let s = x.shape();
    let h = x.layer_norm(&p.get("vit.norm.weight")?, &p.get("vit.norm.bias")?, LN_EPS)?;
    Ok(h.narrow(1, 0, 1)?.reshape(&[s[0], s[2]])?)
}
