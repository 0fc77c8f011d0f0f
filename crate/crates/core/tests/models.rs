mod common;

use common::{randomize, to_nn};
use radarllm_core::models::{
    ae_loss, frozen_hash, infer_logits, trainable_parameter_report, AutoencoderConfig, AutoencoderHead, BackboneConfig,
    BackboneModel, Profile, ReferenceConfig, ReferenceModel, TokenModel,
};
use radarllm_nn::gradcheck::check_store;
use radarllm_nn::layers::Mode;
use radarllm_nn::optim::{Adam, AdamConfig};
use radarllm_nn::{Session, Tensor};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn tokens<T: radarllm_nn::Real>(b: usize, k: usize, l: usize, seed: u64) -> Tensor<T> {
    Tensor::randn(&[b, k, l], 1.0, &mut ChaCha8Rng::seed_from_u64(seed))
}

fn tiny_reference() -> ReferenceConfig {
    ReferenceConfig {
        tokens: 5,
        patch_len: 4,
        d_model: 8,
        heads: 2,
        layers: 1,
        ffn_hidden: 8,
        head_hidden: 4,
        eps: 1e-5,
        seed: 1,
    }
}

fn tiny_backbone() -> BackboneConfig {
    BackboneConfig {
        tokens: 4,
        patch_len: 4,
        width: 8,
        layers: 2,
        heads: 2,
        ffn_hidden: 16,
        lora_rank: 2,
        lora_scale: 2.0,
        head_hidden: 4,
        causal: false,
        trainable_positions: false,
        eps: 1e-5,
        seed: 2,
    }
}

#[test]
fn reference_output_shape_and_eval_determinism() {
    let m = ReferenceModel::<f32>::new(ReferenceConfig::default()).unwrap();
    let x = tokens::<f32>(2, 55, 48, 3);
    let y = infer_logits(&m, x.clone()).unwrap();
    assert_eq!(y.shape(), &[2, 55, 2]);
    let dup = Tensor::new(&[2, 55, 48], [&x.data()[..55 * 48], &x.data()[..55 * 48]].concat()).unwrap();
    let y = infer_logits(&m, dup).unwrap();
    assert_eq!(&y.data()[..110], &y.data()[110..]);
    assert!(infer_logits(&m, tokens::<f32>(2, 54, 48, 3)).is_err());
}

#[test]
fn reference_gradients_match_finite_differences() {
    let mut m = ReferenceModel::<f64>::new(tiny_reference()).unwrap();
    // Biases feeding straight into batch norm, and key biases, have an
    // exactly zero gradient; finite differences would measure only noise.
    let zero_grad: Vec<String> = m
        .store
        .iter()
        .map(|p| p.name.clone())
        .filter(|n| {
            ["attn.k.b", "attn.v.b", "attn.o.b", "ffn.fc2.b"].iter().any(|s| n.ends_with(s))
                || n.starts_with("block0.bn2.")
        })
        .collect();
    for n in zero_grad {
        m.store.set_trainable(&n, false).unwrap();
    }
    randomize(&mut m.store, 14);
    let x = tokens::<f64>(2, 5, 4, 4);
    let labels = [vec![0; 5], vec![1; 5]].concat();
    let err = check_store(&m.store, 1e-5, |s| {
        let mut sess = Session::new(s);
        let xv = sess.g.constant(x.clone());
        let out = m.forward(&mut sess, xv, Mode::Train).map_err(to_nn)?;
        let ce = sess.g.token_cross_entropy(out.logits, &labels)?;
        let loss = sess.g.mean(ce);
        let v = sess.g.value(loss).data()[0];
        Ok((v, sess.backward(loss)?))
    })
    .unwrap();
    assert!(err < 1e-4, "reference rel err {err}");
}


#[test]
fn backbone_gradients_match_finite_differences() {
    let mut m = BackboneModel::<f64>::new(tiny_backbone()).unwrap();
    randomize(&mut m.store, 5);
    let x = tokens::<f64>(2, 4, 4, 6);
    let labels = [vec![0; 4], vec![1; 4]].concat();
    let err = check_store(&m.store, 1e-5, |s| {
        let mut sess = Session::new(s);
        let xv = sess.g.constant(x.clone());
        let out = m.forward(&mut sess, xv, Mode::Train).map_err(to_nn)?;
        let ce = sess.g.token_cross_entropy(out.logits, &labels)?;
        let loss = sess.g.mean(ce);
        let v = sess.g.value(loss).data()[0];
        Ok((v, sess.backward(loss)?))
    })
    .unwrap();
    assert!(err < 1e-4, "backbone rel err {err}");
}

#[test]
fn zero_lora_matches_frozen_base() {
    let mut m = BackboneModel::<f64>::new(BackboneConfig {
        seed: 9,
        ..BackboneConfig::default()
    })
    .unwrap();
    let x = tokens::<f64>(3, 55, 48, 7);
    let with = infer_logits(&m, x.clone()).unwrap();
    m.use_lora = false;
    let base = infer_logits(&m, x).unwrap();
    assert!(with.max_abs_diff(&base) < 1e-10);
}

#[test]
fn backbone_outputs_follow_sample_permutation() {
    let m = BackboneModel::<f64>::new(tiny_backbone()).unwrap();
    let x = tokens::<f64>(4, 4, 4, 8);
    let perm = [2, 0, 3, 1];
    let xp = x.select_rows(&perm);
    let y = infer_logits(&m, x).unwrap();
    let yp = infer_logits(&m, xp).unwrap();
    let y_sel = y.select_rows(&perm);
    assert!(y_sel.max_abs_diff(&yp) < 1e-12);
}

#[test]
fn full_profile_hidden_shape() {
    let m = BackboneModel::<f32>::new(BackboneConfig::profile(Profile::Full, 55, 48)).unwrap();
    let mut sess = Session::inference(&m.store);
    let x = sess.g.constant(tokens::<f32>(1, 55, 48, 9));
    let out = m.forward(&mut sess, x, Mode::Eval).unwrap();
    assert_eq!(sess.g.shape(out.hidden), &[1, 55, 768]);
    assert_eq!(sess.g.shape(out.logits), &[1, 55, 2]);
    let lora = m.store.get("layer0.attn.q.lora_a").unwrap().tensor.len()
        + m.store.get("layer0.attn.q.lora_b").unwrap().tensor.len();
    assert_eq!(lora, 2 * 768 * 8);
}

#[test]
fn desk_backbone_counts_match_layer_arithmetic() {
    let cfg = BackboneConfig::default();
    let m = BackboneModel::<f32>::new(cfg.clone()).unwrap();
    let (l, d, f, r, h, layers) = (48, 128, 512, 8, 64, 4);
    let dense = |i: usize, o: usize| i * o + o;
    let frozen_per_layer = 4 * dense(d, d) + dense(d, f) + dense(f, d);
    let trainable_per_layer = 2 * (2 * d) + 2 * r * (d + d);
    let trainable = dense(l, d) + layers * trainable_per_layer + 2 * d + dense(d, h) + dense(h, 2);
    assert_eq!(m.store.count(Some(false)), layers * frozen_per_layer);
    assert_eq!(m.store.count(Some(true)), trainable);
    let report = trainable_parameter_report(&m.store);
    assert_eq!(report.iter().map(|p| p.count).sum::<usize>(), layers * frozen_per_layer + trainable);
    assert!(report.iter().filter(|p| p.name.contains("lora")).all(|p| p.trainable));
    assert!(report.iter().filter(|p| p.name.contains("mlp")).all(|p| !p.trainable));
}

#[test]
fn desk_reference_and_head_counts_match_layer_arithmetic() {
    let dense = |i: usize, o: usize| i * o + o;
    let r = ReferenceModel::<f32>::new(ReferenceConfig::default()).unwrap();
    let (k, l, d, f, hh) = (55, 48, 64, 128, 32);
    let block = 4 * dense(d, d) + 2 * (2 * d) + dense(d, f) + dense(f, d);
    let expected = dense(l, d) + k * d + 2 * block + 2 * d + dense(d, hh) + dense(hh, 2);
    assert_eq!(r.store.count(None), expected);

    let a = AutoencoderHead::<f32>::new(AutoencoderConfig::default()).unwrap();
    let enc = dense(128, 64) + dense(64, 32) + dense(32, 16) + dense(16, 8) + dense(55 * 8, 64) + dense(64, 20);
    let dec = dense(20, 64) + dense(64, 55 * 8) + dense(8, 16) + dense(16, 32) + dense(32, 64) + dense(64, 128);
    let cls = 2 * 20 + dense(20, 2);
    assert_eq!(a.store.count(None), enc + dec + cls + 2);
}

#[test]
fn full_autoencoder_shapes() {
    let a = AutoencoderHead::<f32>::new(AutoencoderConfig::profile(Profile::Full, 55)).unwrap();
    assert_eq!(a.cfg.decoder_ladder(), vec![32, 64, 128, 256, 512, 768]);
    for b in [1, 3] {
        let mut sess = Session::inference(&a.store);
        let h = sess.g.constant(Tensor::zeros(&[b, 55, 768]));
        let out = a.forward(&mut sess, h).unwrap();
        assert_eq!(sess.g.shape(out.latent), &[b, 20]);
        assert_eq!(sess.g.shape(out.logits), &[b, 2]);
        assert_eq!(sess.g.shape(out.recon), &[b, 55, 768]);
        assert!(sess.g.value(out.recon).all_finite());
    }
}

fn tiny_ae() -> AutoencoderConfig {
    AutoencoderConfig {
        tokens: 3,
        width: 8,
        ladder: vec![6, 4],
        fc_hidden: 5,
        latent: 20,
        eps: 1e-5,
        seed: 3,
    }
}

#[test]
fn autoencoder_total_loss_gradients() {
    let mut a = AutoencoderHead::<f64>::new(tiny_ae()).unwrap();
    let mut r = ChaCha8Rng::seed_from_u64(12);
    a.store.get_mut("log_sigma_recon").unwrap().tensor = Tensor::new(&[1], vec![0.3]).unwrap();
    a.store.get_mut("log_sigma_ce").unwrap().tensor = Tensor::new(&[1], vec![-0.2]).unwrap();
    let h = Tensor::<f64>::randn(&[2, 3, 8], 1.0, &mut r);
    let labels = [0, 1];
    let err = check_store(&a.store, 1e-5, |s| {
        let mut sess = Session::new(s);
        let hv = sess.g.constant(h.clone());
        let out = a.forward(&mut sess, hv).map_err(to_nn)?;
        let l = ae_loss(&mut sess, &out, hv, &labels).map_err(to_nn)?;
        let v = sess.g.value(l.total).data()[0];
        Ok((v, sess.backward(l.total)?))
    })
    .unwrap();
    assert!(err < 1e-4, "AE rel err {err}");
}

#[test]
fn autoencoder_reconstruction_improves_in_ten_steps() {
    let mut a = AutoencoderHead::<f32>::new(AutoencoderConfig {
        seed: 4,
        ..AutoencoderConfig::default()
    })
    .unwrap();
    let h = Tensor::<f32>::randn(&[8, 55, 128], 1.0, &mut ChaCha8Rng::seed_from_u64(13));
    let labels = [0, 1, 0, 1, 0, 1, 0, 1];
    let mut opt = Adam::new(AdamConfig { lr: 1e-3, ..Default::default() });
    let mut recon = Vec::new();
    for _ in 0..10 {
        let mut sess = Session::new(&a.store);
        let hv = sess.g.constant(h.clone());
        let out = a.forward(&mut sess, hv).unwrap();
        let l = ae_loss(&mut sess, &out, hv, &labels).unwrap();
        recon.push(sess.g.value(l.recon).data()[0]);
        let grads = sess.backward(l.total).unwrap();
        opt.step(&mut a.store, &grads).unwrap();
    }
    assert!(recon.iter().all(|v| v.is_finite()));
    assert!(recon[9] < recon[0], "{recon:?}");
}

#[test]
fn frozen_hash_tracks_only_frozen_weights() {
    let mut m = BackboneModel::<f32>::new(tiny_backbone()).unwrap();
    let h0 = frozen_hash(&m.store);
    m.store.get_mut("embed.w").unwrap().tensor.data_mut()[0] += 1.0;
    assert_eq!(frozen_hash(&m.store), h0);
    m.store.get_mut("layer0.mlp.fc.w").unwrap().tensor.data_mut()[0] += 1.0;
    assert_ne!(frozen_hash(&m.store), h0);
}
