//! Local distortion extractor, injector, fusion and the regression head.
//!
//! Trainable parameter names:
//! - `extractor.stages.{j}.{conv1x1,conv3x3}.{weight,bias}`
//! - `injector.kv_proj.{weight,bias}` (shared by every interaction)
//! - `injector.{i}.{query_proj,mhca.q,mhca.k,mhca.v,mhca.out,up_proj}.{weight,bias}`
//!   and `injector.{i}.gate`
//! - `fusion.up_proj.{weight,bias}` and `fusion.{i}.gate` (extractor-only mode)
//! - `head.{weight,bias}`

use std::path::Path;

use loda_tensor::{Rng, Tape, Tensor, Var};

use crate::backbones::{self, cnn_forward, encoder_layer, final_cls, multi_head_attention, patch_embed};
use crate::config::{AdapterConfig, CnnConfig, Config, Mode, VitConfig};
use crate::data::weights::{load_weights, save_weights, WeightFile};
use crate::error::{Error, Result};
use crate::params::{lecun, linear, zeros, Bound, ParamStore};

/// The backbones, the mode's trainable tensors and the architecture they
/// were built for.
#[derive(Debug, Clone)]
pub struct LodaModel {
    pub vit: VitConfig,
    pub cnn: CnnConfig,
    pub adapter: AdapterConfig,
    pub mode: Mode,
    /// Tensors that never change during training (`requires_grad == false`).
    pub frozen: ParamStore,
    /// Tensors optimized in this mode (`requires_grad == true`).
    pub trainable: ParamStore,
}

/// Everything a forward pass produces. Only `score` is needed for training;
/// the rest backs the analysis tools and tests.
pub struct Forward<'t> {
    /// `(b, 1)` quality scores.
    pub score: Var<'t>,
    /// Token matrix after each encoder layer, `(b, l, D)`.
    pub layers: Vec<Var<'t>>,
    /// CNN stage outputs (empty in modes without the CNN branch).
    pub maps: Vec<Var<'t>>,
    /// Multi-scale distortion tokens `(b, T_msd, c)`.
    pub msd: Option<Var<'t>>,
    /// Cross-attention probabilities per interaction, `(b*h, l, T_msd)`.
    pub attention: Vec<Var<'t>>,
}

fn head_params(d: usize, rng: &mut Rng) -> Result<ParamStore> {
    let mut s = ParamStore::new();
    linear(&mut s, "head", d, 1, rng)?;
    Ok(s)
}

fn extractor_params(cnn: &CnnConfig, a: &AdapterConfig, rng: &mut Rng) -> Result<ParamStore> {
    let c = a.extractor_channels;
    let mut s = ParamStore::new();
    for (j, &cj) in cnn.stage_channels.iter().enumerate() {
        let pre = format!("extractor.stages.{j}");
        s.insert(format!("{pre}.conv1x1.weight"), lecun(&[c, cj, 1, 1], cj, rng)?);
        s.insert(format!("{pre}.conv1x1.bias"), zeros(&[c])?);
        s.insert(format!("{pre}.conv3x3.weight"), lecun(&[c, c, 3, 3], 9 * c, rng)?);
        s.insert(format!("{pre}.conv3x3.bias"), zeros(&[c])?);
    }
    Ok(s)
}

fn injector_params(vit: &VitConfig, a: &AdapterConfig, rng: &mut Rng) -> Result<ParamStore> {
    let (d, r) = (vit.embed_dim, a.latent_dim);
    let mut s = ParamStore::new();
    linear(&mut s, "injector.kv_proj", a.extractor_channels, r, rng)?;
    for i in 0..a.interactions {
        let pre = format!("injector.{i}");
        linear(&mut s, &format!("{pre}.query_proj"), d, r, rng)?;
        for name in ["q", "k", "v", "out"] {
            linear(&mut s, &format!("{pre}.mhca.{name}"), r, r, rng)?;
        }
        linear(&mut s, &format!("{pre}.up_proj"), r, d, rng)?;
        s.insert(format!("{pre}.gate"), zeros(&[d])?);
    }
    Ok(s)
}

fn fusion_params(vit: &VitConfig, a: &AdapterConfig, rng: &mut Rng) -> Result<ParamStore> {
    let mut s = ParamStore::new();
    linear(&mut s, "fusion.up_proj", a.extractor_channels, vit.embed_dim, rng)?;
    for i in 0..a.interactions {
        s.insert(format!("fusion.{i}.gate"), zeros(&[vit.embed_dim])?);
    }
    Ok(s)
}

impl LodaModel {
    /// Fresh model: frozen backbones from `seed`, trainable tensors from
    /// streams derived from `seed`. The head initialization depends only on
    /// the seed, so every mode starts from the same head.
    pub fn new(cfg: &Config, mode: Mode, seed: u64) -> Result<LodaModel> {
        let frozen = backbones::init_frozen(seed, &cfg.vit, &cfg.cnn)?;
        LodaModel::with_backbones(cfg, mode, frozen, seed)
    }

    /// Build around existing backbone weights (`vit.*` and `cnn.*`).
    pub fn with_backbones(cfg: &Config, mode: Mode, backbone: ParamStore, seed: u64) -> Result<LodaModel> {
        cfg.vit.validate()?;
        cfg.cnn.validate()?;
        cfg.adapter.validate(&cfg.vit)?;
        let root = Rng::new(seed);
        let mut trainable = head_params(cfg.vit.embed_dim, &mut root.derive(10))?;
        let mut frozen = backbone;
        match mode {
            Mode::Loda => {
                trainable.extend(extractor_params(&cfg.cnn, &cfg.adapter, &mut root.derive(11))?)?;
                trainable.extend(injector_params(&cfg.vit, &cfg.adapter, &mut root.derive(12))?)?;
            }
            Mode::ExtractorOnly => {
                trainable.extend(extractor_params(&cfg.cnn, &cfg.adapter, &mut root.derive(11))?)?;
                trainable.extend(fusion_params(&cfg.vit, &cfg.adapter, &mut root.derive(13))?)?;
            }
            Mode::LinearProbe => {}
            Mode::FullFinetune => {
                let vit_names: Vec<String> =
                    frozen.names().filter(|n| n.starts_with("vit.")).map(String::from).collect();
                for n in vit_names {
                    let t = frozen.remove(&n).expect("listed name");
                    trainable.insert(n, t);
                }
            }
        }
        frozen.set_requires_grad(false);
        trainable.set_requires_grad(true);
        Ok(LodaModel {
            vit: cfg.vit.clone(),
            cnn: cfg.cnn.clone(),
            adapter: cfg.adapter.clone(),
            mode,
            frozen,
            trainable,
        })
    }

    /// Bind every parameter to `tape`.
    pub fn bind<'t>(&self, tape: &'t Tape) -> Bound<'t> {
        let mut p = self.frozen.bind(tape);
        p.merge(self.trainable.bind(tape));
        p
    }

    /// Names of the trainable tensors and their total scalar count.
    pub fn trainable_parameters(&self) -> (Vec<String>, usize) {
        (self.trainable.names().map(String::from).collect(), self.trainable.numel())
    }

    pub fn total_parameters(&self) -> usize {
        self.frozen.numel() + self.trainable.numel()
    }

    /// Set every gate (injector or fusion) to `value`.
    pub fn set_gates(&mut self, value: f64) {
        for (name, t) in self.trainable.iter_mut() {
            if name.ends_with(".gate") {
                t.data_mut().iter_mut().for_each(|v| *v = value);
            }
        }
    }

    /// Full forward pass on a `(b, 3, H, W)` image batch.
    pub fn forward<'t>(&self, tape: &'t Tape, image: &Tensor) -> Result<Forward<'t>> {
        let p = self.bind(tape);
        self.forward_with(tape, image, &p)
    }

    /// Forward pass with parameters already bound to `tape` (see [`Self::bind`]).
    pub fn forward_with<'t>(&self, tape: &'t Tape, image: &Tensor, p: &Bound<'t>) -> Result<Forward<'t>> {
        let x = tape.leaf(image);
        let (maps, msd) = if self.mode.uses_cnn() {
            let maps = cnn_forward(x, &self.cnn, p)?;
            let msd = extract_local_distortion(&maps, &self.adapter, p)?;
            (maps, Some(msd))
        } else {
            (Vec::new(), None)
        };
        let mut out = self.forward_tokens(x, msd, p)?;
        out.maps = maps;
        Ok(out)
    }

    /// ViT pass with distortion tokens supplied by the caller (used to probe
    /// how the score depends on individual `msd` entries).
    pub fn forward_tokens<'t>(&self, image: Var<'t>, msd: Option<Var<'t>>, p: &Bound<'t>) -> Result<Forward<'t>> {
        let blocks = self.adapter.interactions;
        let per_block = self.vit.num_layers / blocks;
        let mut tokens = patch_embed(image, &self.vit, p)?;
        let mut layers = Vec::with_capacity(self.vit.num_layers);
        let mut attention = Vec::new();

        enum Branch<'t> {
            None,
            Inject(Var<'t>),
            Add(Var<'t>),
        }
        let branch = match (self.mode, msd) {
            (Mode::Loda, Some(m)) => Branch::Inject(project_kv(m, p)?),
            (Mode::ExtractorOnly, Some(m)) => Branch::Add(direct_fusion_tokens(m, &self.vit, &self.adapter, p)?),
            (Mode::Loda | Mode::ExtractorOnly, None) => {
                return Err(Error::Contract(format!("mode {} needs distortion tokens", self.mode)))
            }
            _ => Branch::None,
        };

        for layer in 0..self.vit.num_layers {
            if layer % per_block == 0 {
                let i = layer / per_block;
                match &branch {
                    Branch::Inject(kv) => {
                        let (t, probs) = inject(tokens, *kv, i, &self.adapter, p)?;
                        tokens = t;
                        attention.push(probs);
                    }
                    Branch::Add(add) => {
                        tokens = tokens.add(&add.mul(&p.get(&format!("fusion.{i}.gate"))?)?)?;
                    }
                    Branch::None => {}
                }
            }
            tokens = encoder_layer(tokens, layer, &self.vit, p)?;
            layers.push(tokens);
        }
        let cls = final_cls(tokens, p)?;
        let score = cls.affine(&p.get("head.weight")?, Some(&p.get("head.bias")?))?;
        Ok(Forward { score, layers, maps: Vec::new(), msd, attention })
    }

    /// Scores as a plain vector, computed without recording gradients.
    pub fn predict(&self, image: &Tensor) -> Result<Vec<f64>> {
        let tape = Tape::inference();
        Ok(self.forward(&tape, image)?.score.value().into_vec())
    }

    /// Write both namespaces to a weight file.
    pub fn save(&self, path: &Path) -> Result<()> {
        let file = WeightFile { frozen: self.frozen.clone(), trainable: self.trainable.clone() };
        save_weights(&file, path)
    }

    /// Load a model saved with [`Self::save`]. Every tensor must match the
    /// layout `cfg` and `mode` imply; a mismatch names the tensor.
    pub fn load(cfg: &Config, mode: Mode, path: &Path) -> Result<LodaModel> {
        let template = LodaModel::new(cfg, mode, 0)?;
        let file = load_weights(path)?;
        let named = |e: Error| match e {
            Error::Param { name, msg } => Error::Weights { path: path.to_path_buf(), msg: format!("tensor {name}: {msg}") },
            other => other,
        };
        template.frozen.check_layout(&file.frozen).map_err(named)?;
        template.trainable.check_layout(&file.trainable).map_err(named)?;
        let mut model = template;
        model.frozen = file.frozen;
        model.trainable = file.trainable;
        model.frozen.set_requires_grad(false);
        model.trainable.set_requires_grad(true);
        Ok(model)
    }
}

/// Per stage: 1x1 conv to `c` channels, 3x3 conv, adaptive average pool to
/// `(m, n)`, flatten to `(b, m*n, c)`; stages concatenated in order.
pub fn extract_local_distortion<'t>(maps: &[Var<'t>], cfg: &AdapterConfig, p: &Bound<'t>) -> Result<Var<'t>> {
    if maps.len() != 4 {
        return Err(Error::Contract(format!("expected 4 stage maps, got {}", maps.len())));
    }
    let mut blocks = Vec::with_capacity(4);
    for (j, map) in maps.iter().enumerate() {
        let w = |name: &str| p.get(&format!("extractor.stages.{j}.{name}"));
        let x = map
            .conv2d(&w("conv1x1.weight")?, Some(&w("conv1x1.bias")?), 1, 0)?
            .conv2d(&w("conv3x3.weight")?, Some(&w("conv3x3.bias")?), 1, 1)?
            .avgpool2d(cfg.pooled_h, cfg.pooled_w)?
            .flatten(2)?
            .permute(&[0, 2, 1])?;
        blocks.push(x);
    }
    Ok(Var::concat(&blocks, 1)?)
}

/// Shared key/value down-projection of the distortion tokens,
/// `(b, T_msd, c)` to `(b, T_msd, r)`.
pub fn project_kv<'t>(msd: Var<'t>, p: &Bound<'t>) -> Result<Var<'t>> {
    Ok(msd.affine(&p.get("injector.kv_proj.weight")?, Some(&p.get("injector.kv_proj.bias")?))?)
}

/// Interaction `i`: the tokens query the distortion tokens through
/// cross-attention in the latent space, the result (plus the query residual)
/// is projected back to `D` and added under the gate:
/// `tokens + gate * up(mhca(q, kv, kv) + q)`.
///
/// Returns the new tokens and the attention probabilities.
pub fn inject<'t>(
    tokens: Var<'t>,
    kv: Var<'t>,
    i: usize,
    cfg: &AdapterConfig,
    p: &Bound<'t>,
) -> Result<(Var<'t>, Var<'t>)> {
    let w = |name: &str| p.get(&format!("injector.{i}.{name}"));
    let lin = |x: Var<'t>, name: &str| -> Result<Var<'t>> {
        Ok(x.affine(&w(&format!("{name}.weight"))?, Some(&w(&format!("{name}.bias"))?))?)
    };
    if cfg.heads == 0 || cfg.latent_dim % cfg.heads != 0 {
        return Err(Error::Config(format!(
            "latent_dim {} is not divisible by heads {}",
            cfg.latent_dim, cfg.heads
        )));
    }
    let q_lat = lin(tokens, "query_proj")?;
    let q = lin(q_lat, "mhca.q")?;
    let k = lin(kv, "mhca.k")?;
    let v = lin(kv, "mhca.v")?;
    let (att, probs) = multi_head_attention(q, k, v, cfg.heads)?;
    let fused = lin(att, "mhca.out")?.add(&q_lat)?;
    let up = lin(fused, "up_proj")?;
    let out = tokens.add(&up.mul(&w("gate")?)?)?;
    Ok((out, probs))
}

/// Extractor-only ablation: sum the stage blocks, resample the pooled grid
/// to the patch grid, project `c -> D` and prepend a zero CLS row, giving a
/// `(b, l, D)` map that is added to the tokens under each block's gate.
pub fn direct_fusion_tokens<'t>(
    msd: Var<'t>,
    vit: &VitConfig,
    cfg: &AdapterConfig,
    p: &Bound<'t>,
) -> Result<Var<'t>> {
    let s = msd.shape();
    let (b, c) = (s[0], s[2]);
    let mn = cfg.pooled_h * cfg.pooled_w;
    let mut sum = msd.narrow(1, 0, mn)?;
    for j in 1..4 {
        sum = sum.add(&msd.narrow(1, j * mn, mn)?)?;
    }
    let g = vit.grid();
    let grid = sum
        .permute(&[0, 2, 1])?
        .reshape(&[b, c, cfg.pooled_h, cfg.pooled_w])?
        .avgpool2d(g, g)?
        .flatten(2)?
        .permute(&[0, 2, 1])?;
    let up = grid.affine(&p.get("fusion.up_proj.weight")?, Some(&p.get("fusion.up_proj.bias")?))?;
    let cls = msd.tape().constant(Tensor::zeros(&[b, 1, vit.embed_dim])?);
    Ok(Var::concat(&[cls, up], 1)?)
}
