use loda::adaptation::{extract_local_distortion, inject, project_kv};
use loda::backbones::{self, cnn::stage_sizes, cnn_forward, encoder_layer, patch_embed};
use loda::{AdapterConfig, CnnConfig, Config, Error, LodaModel, Mode, VitConfig};
use loda_tensor::{Rng, Tape, Tensor, Var};

fn images(b: usize, seed: u64) -> Tensor {
    Tensor::normal(&[b, 3, 64, 64], 0.0, 1.0, &mut Rng::new(seed)).unwrap()
}

fn randomize_gates(m: &mut LodaModel, seed: u64) {
    let mut rng = Rng::new(seed);
    for (name, t) in m.trainable.iter_mut() {
        if name.ends_with(".gate") {
            t.data_mut().iter_mut().for_each(|v| *v = rng.uniform(-1.0, 1.0));
        }
    }
}

#[test]
fn frozen_init_is_deterministic_and_frozen() {
    let cfg = Config::desk();
    let a = backbones::init_frozen(3, &cfg.vit, &cfg.cnn).unwrap();
    let b = backbones::init_frozen(3, &cfg.vit, &cfg.cnn).unwrap();
    assert_eq!(a.hash(), b.hash());
    assert!(a.iter().all(|(_, t)| !t.requires_grad()));
    let c = backbones::init_frozen(4, &cfg.vit, &cfg.cnn).unwrap();
    assert_ne!(a.hash(), c.hash());
}

#[test]
fn frozen_weights_round_trip_and_missing_tensor_is_named() {
    let cfg = Config::desk();
    let dir = tempfile::tempdir().unwrap();
    let model = LodaModel::new(&cfg, Mode::Loda, 1).unwrap();
    let path = dir.path().join("w.lodaw");
    model.save(&path).unwrap();
    let frozen = backbones::load_frozen(&path, &cfg.vit, &cfg.cnn).unwrap();
    assert_eq!(frozen.hash(), model.frozen.hash());
    let back = LodaModel::load(&cfg, Mode::Loda, &path).unwrap();
    assert_eq!(back.trainable.hash(), model.trainable.hash());

    let mut partial = model.clone();
    partial.frozen.remove("vit.blocks.2.mlp.fc1.bias");
    partial.save(&path).unwrap();
    let err = backbones::load_frozen(&path, &cfg.vit, &cfg.cnn).unwrap_err().to_string();
    assert!(err.contains("vit.blocks.2.mlp.fc1.bias"), "{err}");

    model.save(&path).unwrap();
    let mut wider = cfg.clone();
    wider.adapter.latent_dim = 32;
    let err = LodaModel::load(&wider, Mode::Loda, &path).unwrap_err().to_string();
    assert!(err.contains("injector.") && err.contains("shape"), "{err}");
}

#[test]
fn token_counts_for_both_profiles() {
    assert_eq!(VitConfig::full_scale().num_tokens(), 197);
    assert_eq!(VitConfig::default().num_tokens(), 17);
    let cfg = Config::desk();
    let m = LodaModel::new(&cfg, Mode::LinearProbe, 0).unwrap();
    let tape = Tape::inference();
    let p = m.bind(&tape);
    let t = patch_embed(tape.leaf(&images(2, 0)), &cfg.vit, &p).unwrap();
    assert_eq!(t.shape(), vec![2, 17, 64]);
}

#[test]
fn cnn_schedules() {
    assert_eq!(stage_sizes(&CnnConfig::default(), 64), vec![16, 8, 4, 2]);
    assert_eq!(stage_sizes(&CnnConfig::full_scale(), 224), vec![56, 28, 14, 7]);
    let cfg = Config::desk();
    let m = LodaModel::new(&cfg, Mode::Loda, 0).unwrap();
    let tape = Tape::inference();
    let p = m.bind(&tape);
    let bad = Tensor::zeros(&[1, 3, 60, 60]).unwrap();
    assert!(matches!(cnn_forward(tape.leaf(&bad), &cfg.cnn, &p), Err(Error::Config(_))));
}

#[test]
fn encoder_layer_is_batch_independent() {
    let cfg = Config::desk();
    let m = LodaModel::new(&cfg, Mode::LinearProbe, 0).unwrap();
    let tape = Tape::inference();
    let p = m.bind(&tape);
    let x = Tensor::normal(&[3, 17, 64], 0.0, 1.0, &mut Rng::new(9)).unwrap();
    let xv = tape.leaf(&x);
    let out = encoder_layer(xv, 1, &cfg.vit, &p).unwrap().value();
    assert_eq!(out.shape(), &[3, 17, 64]);
    let perm = [2usize, 0, 1];
    let parts: Vec<Var> = perm.iter().map(|&i| xv.narrow(0, i, 1).unwrap()).collect();
    let permuted = encoder_layer(Var::concat(&parts, 0).unwrap(), 1, &cfg.vit, &p).unwrap().value();
    let n = 17 * 64;
    for (k, &i) in perm.iter().enumerate() {
        assert_eq!(&permuted.data()[k * n..(k + 1) * n], &out.data()[i * n..(i + 1) * n]);
    }
}

#[test]
fn zero_gates_reproduce_the_frozen_vit_bitwise() {
    let cfg = Config::desk();
    let x = images(4, 11);
    for mode in [Mode::Loda, Mode::ExtractorOnly] {
        let model = LodaModel::new(&cfg, mode, 2).unwrap();
        let probe = LodaModel::new(&cfg, Mode::LinearProbe, 2).unwrap();
        assert_eq!(model.predict(&x).unwrap(), probe.predict(&x).unwrap(), "{mode}");
    }
}

#[test]
fn gradients_reach_exactly_the_trainable_set() {
    let cfg = Config::desk();
    for mode in Mode::ALL {
        let mut model = LodaModel::new(&cfg, mode, 5).unwrap();
        randomize_gates(&mut model, 6);
        let tape = Tape::new();
        let p = model.bind(&tape);
        let out = model.forward_with(&tape, &images(4, 12), &p).unwrap();
        let loss = loda::metrics::plcc_loss(out.score.reshape(&[4]).unwrap(), &[1.0, 3.0, 2.0, 5.0]).unwrap();
        let grads = p.gradients(&tape.backward(loss).unwrap());
        for name in model.trainable.names() {
            let g = grads.get(name).unwrap_or_else(|| panic!("{mode}: no gradient for {name}"));
            if name == "head.bias" {
                // The loss ignores a common shift of all scores.
                assert!(g.data()[0].abs() < 1e-12, "{mode}: head.bias gradient {:?}", g.data());
            } else {
                assert!(g.data().iter().any(|v| *v != 0.0), "{mode}: zero gradient for {name}");
            }
        }
        for name in model.frozen.names() {
            assert!(!grads.contains_key(name), "{mode}: frozen {name} received a gradient");
        }
    }
}

#[test]
fn zero_gate_head_gradient_is_nonzero() {
    let cfg = Config::desk();
    let model = LodaModel::new(&cfg, Mode::Loda, 7).unwrap();
    let tape = Tape::new();
    let p = model.bind(&tape);
    let out = model.forward_with(&tape, &images(4, 13), &p).unwrap();
    let loss = loda::metrics::plcc_loss(out.score.reshape(&[4]).unwrap(), &[1.0, 3.0, 2.0, 5.0]).unwrap();
    let grads = p.gradients(&tape.backward(loss).unwrap());
    assert!(grads["head.weight"].data().iter().any(|v| *v != 0.0));
    assert!(model.frozen.names().all(|n| !grads.contains_key(n)));
}

#[test]
fn cnn_inside_the_model_matches_standalone() {
    let cfg = Config::desk();
    let model = LodaModel::new(&cfg, Mode::Loda, 1).unwrap();
    let x = images(2, 3);
    let tape = Tape::inference();
    let inside: Vec<Tensor> = model.forward(&tape, &x).unwrap().maps.iter().map(Var::value).collect();
    let tape2 = Tape::inference();
    let p = model.frozen.bind(&tape2);
    let alone = cnn_forward(tape2.leaf(&x), &cfg.cnn, &p).unwrap();
    assert_eq!(inside.len(), 4);
    for (a, b) in inside.iter().zip(&alone) {
        assert!(a.bit_eq(&b.value()));
    }
}

#[test]
fn every_distortion_token_entry_reaches_the_score() {
    let cfg = Config::desk();
    let mut model = LodaModel::new(&cfg, Mode::Loda, 8).unwrap();
    randomize_gates(&mut model, 9);
    let x = images(1, 4);
    let tape = Tape::inference();
    let p = model.bind(&tape);
    let xv = tape.leaf(&x);
    let maps = cnn_forward(xv, &cfg.cnn, &p).unwrap();
    let msd = extract_local_distortion(&maps, &cfg.adapter, &p).unwrap().value();
    let base = model.forward_tokens(xv, Some(tape.leaf(&msd)), &p).unwrap().score.value().data()[0];
    let mut rng = Rng::new(10);
    for _ in 0..24 {
        let idx = rng.below(msd.numel());
        let mut bumped = msd.clone();
        bumped.data_mut()[idx] += 0.5;
        let s = model.forward_tokens(xv, Some(tape.leaf(&bumped)), &p).unwrap().score.value().data()[0];
        assert_ne!(s, base, "entry {idx} has no effect");
    }
}

#[test]
fn injection_laws() {
    let cfg = Config::desk();
    let mut model = LodaModel::new(&cfg, Mode::Loda, 2).unwrap();
    let tokens = Tensor::normal(&[2, 17, 64], 0.0, 1.0, &mut Rng::new(1)).unwrap();
    let msd = Tensor::normal(&[2, 64, 16], 0.0, 1.0, &mut Rng::new(2)).unwrap();

    // Zero gate: the tokens pass through bitwise.
    {
        let tape = Tape::inference();
        let p = model.bind(&tape);
        let kv = project_kv(tape.leaf(&msd), &p).unwrap();
        let (out, probs) = inject(tape.leaf(&tokens), kv, 0, &cfg.adapter, &p).unwrap();
        assert!(out.value().bit_eq(&tokens));
        assert_eq!(probs.shape(), vec![2 * 4, 17, 64]);
        for row in probs.value().data().chunks(64) {
            assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        }
    }

    // Zero MHCA output projection: the injected branch is up(query) only.
    model.set_gates(0.7);
    for name in ["injector.0.mhca.out.weight", "injector.0.mhca.out.bias"] {
        let shape = model.trainable.get(name).unwrap().shape().to_vec();
        model.trainable.insert(name, Tensor::zeros(&shape).unwrap());
    }
    let tape = Tape::inference();
    let p = model.bind(&tape);
    let tv = tape.leaf(&tokens);
    let kv = project_kv(tape.leaf(&msd), &p).unwrap();
    let (out, _) = inject(tv, kv, 0, &cfg.adapter, &p).unwrap();
    let q = lin(&p, tv, "query_proj");
    let expect = tv.add(&lin(&p, q, "up_proj").mul(&p.get("injector.0.gate").unwrap()).unwrap()).unwrap();
    assert!(out.value().bit_eq(&expect.value()));
}

fn lin<'t>(p: &loda::params::Bound<'t>, x: Var<'t>, n: &str) -> Var<'t> {
    let w = |s: &str| p.get(&format!("injector.0.{n}.{s}")).unwrap();
    x.affine(&w("weight"), Some(&w("bias"))).unwrap()
}

#[test]
fn identical_images_give_identical_scores() {
    let cfg = Config::desk();
    let mut model = LodaModel::new(&cfg, Mode::Loda, 3).unwrap();
    randomize_gates(&mut model, 4);
    let one = images(1, 5);
    let two = Tensor::from_vec(&[2, 3, 64, 64], [one.data(), one.data()].concat()).unwrap();
    let s = model.predict(&two).unwrap();
    assert_eq!(s[0], s[1]);
}

#[test]
fn trainable_count_grows_with_latent_dim() {
    let mut cfg = Config::desk();
    let mut last = 0;
    for r in [16, 32, 48, 64, 80] {
        cfg.adapter.latent_dim = r;
        let n = LodaModel::new(&cfg, Mode::Loda, 0).unwrap().trainable_parameters().1;
        assert!(n > last, "r={r}");
        last = n;
    }
}

#[test]
fn config_errors() {
    let mut cfg = Config::desk();
    cfg.adapter.interactions = 3;
    assert!(matches!(LodaModel::new(&cfg, Mode::Loda, 0), Err(Error::Config(_))));
    let mut cfg = Config::desk();
    cfg.adapter.heads = 3;
    assert!(matches!(LodaModel::new(&cfg, Mode::Loda, 0), Err(Error::Config(_))));
    let cfg = Config::desk();
    let m = LodaModel::new(&cfg, Mode::Loda, 0).unwrap();
    let tape = Tape::inference();
    assert!(matches!(m.forward(&tape, &Tensor::zeros(&[1, 3, 48, 48]).unwrap()), Err(Error::Config(_))));
}

#[test]
fn full_scale_adapter_shapes() {
    let a = AdapterConfig::full_scale();
    assert_eq!((a.latent_dim, a.heads, a.msd_tokens()), (64, 4, 196));
    assert!(a.validate(&VitConfig::full_scale()).is_ok());
}
