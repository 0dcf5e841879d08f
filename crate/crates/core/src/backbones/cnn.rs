//! Four-stage strided CNN producing the multi-scale feature maps.
//!
//! Stage `j` is one `k_j x k_j` convolution with stride `s_j` and padding
//! `k_j / 2`, followed by ReLU. Features are taken after the activation.
//! Parameters: `cnn.stages.{j}.{weight,bias}`.

use loda_tensor::{Rng, Var};

use crate::config::CnnConfig;
use crate::error::{Error, Result};
use crate::params::{he, zeros, Bound, ParamStore};

pub fn init(cfg: &CnnConfig, rng: &mut Rng) -> Result<ParamStore> {
    cfg.validate()?;
    let mut s = ParamStore::new();
    let mut in_ch = 3;
    for (j, (&c, &k)) in cfg.stage_channels.iter().zip(&cfg.kernel_sizes).enumerate() {
        s.insert(format!("cnn.stages.{j}.weight"), he(&[c, in_ch, k, k], in_ch * k * k, rng)?);
        s.insert(format!("cnn.stages.{j}.bias"), zeros(&[c])?);
        in_ch = c;
    }
    Ok(s)
}

/// Spatial size of every stage output for a square input of side `size`.
pub fn stage_sizes(cfg: &CnnConfig, size: usize) -> Vec<usize> {
    let mut out = Vec::with_capacity(4);
    let mut s = size;
    for (&st, &k) in cfg.stage_strides.iter().zip(&cfg.kernel_sizes) {
        s = (s + 2 * (k / 2) - k) / st + 1;
        out.push(s);
    }
    out
}

/// `(b, 3, H, W)` image to four maps `(b, c_j, H/S_j, W/S_j)`.
pub fn cnn_forward<'t>(image: Var<'t>, cfg: &CnnConfig, p: &Bound<'t>) -> Result<Vec<Var<'t>>> {
    let s = image.shape();
    let total = cfg.total_stride();
    if s.len() != 4 || s[1] != 3 {
        return Err(Error::Input(format!("expected a (b, 3, H, W) image, got {s:?}")));
    }
    if s[2] % total != 0 || s[3] % total != 0 {
        return Err(Error::Config(format!(
            "input {}x{} is not divisible by the total CNN stride {total}",
            s[2], s[3]
        )));
    }
    let mut x = image;
    let mut maps = Vec::with_capacity(4);
    for j in 0..4 {
        let k = cfg.kernel_sizes[j];
        x = x
            .conv2d(
                &p.get(&format!("cnn.stages.{j}.weight"))?,
                Some(&p.get(&format!("cnn.stages.{j}.bias"))?),
                cfg.stage_strides[j],
                k / 2,
            )?
            .relu();
        maps.push(x);
    }
    Ok(maps)
}

#[cfg(test)]
mod tests {
    use super::*;
    use loda_tensor::{Tape, Tensor};

    #[test]
    fn desk_and_full_scale_schedules() {
        assert_eq!(stage_sizes(&CnnConfig::default(), 64), vec![16, 8, 4, 2]);
        assert_eq!(stage_sizes(&CnnConfig::full_scale(), 224), vec![56, 28, 14, 7]);
    }

    #[test]
    fn maps_follow_schedule() {
        let cfg = CnnConfig::default();
        let store = init(&cfg, &mut Rng::new(0)).unwrap();
        let tape = Tape::inference();
        let p = store.bind(&tape);
        let img = Tensor::uniform(&[2, 3, 64, 64], -1.0, 1.0, &mut Rng::new(1)).unwrap();
        let maps = cnn_forward(tape.leaf(&img), &cfg, &p).unwrap();
        let shapes: Vec<Vec<usize>> = maps.iter().map(|m| m.shape()).collect();
        assert_eq!(
            shapes,
            vec![vec![2, 16, 16, 16], vec![2, 32, 8, 8], vec![2, 64, 4, 4], vec![2, 128, 2, 2]]
        );
    }

    #[test]
    fn zero_weights_give_bias_maps() {
        let cfg = CnnConfig::default();
        let mut store = init(&cfg, &mut Rng::new(0)).unwrap();
        for j in 0..4 {
            let name = format!("cnn.stages.{j}.weight");
            let shape = store.get(&name).unwrap().shape().to_vec();
            store.insert(name, Tensor::zeros(&shape).unwrap());
            let c = cfg.stage_channels[j];
            store.insert(format!("cnn.stages.{j}.bias"), Tensor::full(&[c], 0.25 * (j + 1) as f64).unwrap());
        }
        let tape = Tape::inference();
        let p = store.bind(&tape);
        let img = Tensor::full(&[1, 3, 64, 64], 0.7).unwrap();
        let maps = cnn_forward(tape.leaf(&img), &cfg, &p).unwrap();
        for (j, m) in maps.iter().enumerate() {
            assert!(m.value().data().iter().all(|&v| v == 0.25 * (j + 1) as f64));
        }
    }

    #[test]
    fn indivisible_input_is_config_error() {
        let cfg = CnnConfig::default();
        let store = init(&cfg, &mut Rng::new(0)).unwrap();
        let tape = Tape::inference();
        let p = store.bind(&tape);
        let img = Tensor::zeros(&[1, 3, 60, 60]).unwrap();
        assert!(matches!(cnn_forward(tape.leaf(&img), &cfg, &p), Err(Error::Config(_))));
    }
}
