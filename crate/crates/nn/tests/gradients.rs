//! Finite-difference checks for every differentiable layer (64-bit).

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use radarllm_nn::gradcheck::check_store;
use radarllm_nn::layers::{self, AttentionWeights, Mode, Projection};
use radarllm_nn::{Gradients, ParamStore, Result, Session, Tensor, Var};

const H: f64 = 1e-5;
const TOL: f64 = 1e-5;

fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Reduces an output to a scalar with fixed random weights so every output
/// coordinate contributes a distinct sensitivity.
fn project_to_scalar(sess: &mut Session<f64>, y: Var, seed: u64) -> Result<Var> {
    let n = sess.g.value(y).len();
    let w = Tensor::<f64>::randn(&[n], 1.0, &mut rng(seed));
    let flat = sess.g.reshape(y, &[n])?;
    let weighted = sess.g.mul_const(flat, w.data())?;
    Ok(sess.g.sum(weighted))
}

fn eval(
    store: &ParamStore<f64>,
    build: &dyn Fn(&mut Session<f64>) -> Result<Var>,
) -> Result<(f64, Gradients<f64>)> {
    let mut sess = Session::new(store);
    let y = build(&mut sess)?;
    let loss = project_to_scalar(&mut sess, y, 999)?;
    let value = sess.g.value(loss).data()[0];
    let grads = sess.backward(loss)?;
    Ok((value, grads))
}

fn check(store: &ParamStore<f64>, build: impl Fn(&mut Session<f64>) -> Result<Var>) -> f64 {
    check_store(store, H, |s| eval(s, &build)).unwrap()
}

#[test]
fn linear_gradients() {
    let mut r = rng(1);
    let mut s = ParamStore::new();
    s.add("x", Tensor::randn(&[3, 5], 1.0, &mut r), true).unwrap();
    s.add("w", Tensor::randn(&[5, 4], 1.0, &mut r), true).unwrap();
    s.add("b", Tensor::randn(&[4], 1.0, &mut r), true).unwrap();
    let err = check(&s, |sess| {
        let (x, w, b) = (sess.param("x")?, sess.param("w")?, sess.param("b")?);
        layers::linear(&mut sess.g, x, w, Some(b))
    });
    assert!(err < TOL, "linear rel err {err}");
}

#[test]
fn layer_norm_gradients() {
    let mut r = rng(2);
    let mut s = ParamStore::new();
    s.add("x", Tensor::randn(&[2, 5, 3], 1.0, &mut r), true).unwrap();
    s.add("g", Tensor::randn(&[3], 1.0, &mut r), true).unwrap();
    s.add("b", Tensor::randn(&[3], 1.0, &mut r), true).unwrap();
    let err = check(&s, |sess| {
        let (x, g, b) = (sess.param("x")?, sess.param("g")?, sess.param("b")?);
        layers::layer_norm(&mut sess.g, x, g, b, 1e-5)
    });
    assert!(err < TOL, "layer_norm rel err {err}");
    let err = check(&s, |sess| {
        let (x, g, b) = (sess.param("x")?, sess.param("g")?, sess.param("b")?);
        layers::feature_layer_norm(&mut sess.g, x, g, b, 1e-5)
    });
    assert!(err < TOL, "feature_layer_norm rel err {err}");
}

#[test]
fn batch_norm_train_gradients() {
    let mut r = rng(3);
    let mut s = ParamStore::new();
    s.add("x", Tensor::randn(&[3, 4, 2], 1.0, &mut r), true).unwrap();
    s.add("g", Tensor::randn(&[2], 1.0, &mut r), true).unwrap();
    s.add("b", Tensor::randn(&[2], 1.0, &mut r), true).unwrap();
    let err = check(&s, |sess| {
        let (x, g, b) = (sess.param("x")?, sess.param("g")?, sess.param("b")?);
        Ok(layers::batch_norm(&mut sess.g, x, g, b, &[0.0; 2], &[1.0; 2], Mode::Train, 1e-5)?.0)
    });
    assert!(err < TOL, "batch_norm rel err {err}");
}

fn attention_store(seed: u64, d: usize, lora_rank: Option<usize>) -> ParamStore<f64> {
    let mut r = rng(seed);
    let mut s = ParamStore::new();
    s.add("x", Tensor::randn(&[2, 3, d], 1.0, &mut r), true).unwrap();
    for p in ["q", "k", "v", "o"] {
        s.add(format!("{p}.w"), Tensor::randn(&[d, d], 0.5, &mut r), true).unwrap();
        // The key bias shifts every score in a row equally, so softmax makes
        // its true gradient exactly zero; finite differences would only
        // measure rounding noise there.
        s.add(format!("{p}.b"), Tensor::randn(&[d], 0.5, &mut r), p != "k").unwrap();
        if let (Some(rank), "q" | "v") = (lora_rank, p) {
            s.add(format!("{p}.a"), Tensor::randn(&[d, rank], 0.5, &mut r), true).unwrap();
            s.add(format!("{p}.bm"), Tensor::randn(&[rank, d], 0.5, &mut r), true).unwrap();
        }
    }
    s
}

fn attention_weights(sess: &mut Session<f64>) -> Result<AttentionWeights> {
    let mut proj = |p: &str| -> Result<Projection> {
        let w = sess.param(&format!("{p}.w"))?;
        let b = Some(sess.param(&format!("{p}.b"))?);
        if sess.store().contains(&format!("{p}.a")) {
            let a = sess.param(&format!("{p}.a"))?;
            let bm = sess.param(&format!("{p}.bm"))?;
            Ok(Projection::Lora { w, b, a, bm, scale: 2.0 })
        } else {
            Ok(Projection::Dense { w, b })
        }
    };
    Ok(AttentionWeights {
        q: proj("q")?,
        k: proj("k")?,
        v: proj("v")?,
        o: proj("o")?,
    })
}

#[test]
fn attention_gradients() {
    for causal in [false, true] {
        let s = attention_store(4, 8, None);
        let err = check(&s, |sess| {
            let x = sess.param("x")?;
            let w = attention_weights(sess)?;
            Ok(layers::multi_head_attention(&mut sess.g, x, &w, 2, causal)?.out)
        });
        assert!(err < TOL, "attention (causal={causal}) rel err {err}");
    }
}

#[test]
fn lora_attention_gradients() {
    let s = attention_store(5, 8, Some(2));
    let err = check(&s, |sess| {
        let x = sess.param("x")?;
        let w = attention_weights(sess)?;
        Ok(layers::multi_head_attention(&mut sess.g, x, &w, 2, false)?.out)
    });
    assert!(err < TOL, "lora attention rel err {err}");
}

#[test]
fn token_cross_entropy_gradients() {
    let mut r = rng(6);
    let mut s = ParamStore::new();
    s.add("logits", Tensor::randn(&[2, 3, 2], 2.0, &mut r), true).unwrap();
    let labels = [0, 1, 1, 0, 0, 1];
    let err = check(&s, |sess| {
        let l = sess.param("logits")?;
        sess.g.token_cross_entropy(l, &labels)
    });
    assert!(err < TOL, "token CE rel err {err}");
}

#[test]
fn elementwise_gradients() {
    let mut r = rng(7);
    let mut s = ParamStore::new();
    s.add("x", Tensor::randn(&[2, 6], 1.0, &mut r), true).unwrap();
    s.add("y", Tensor::randn(&[2, 6], 1.0, &mut r), true).unwrap();
    let err = check(&s, |sess| {
        let (x, y) = (sess.param("x")?, sess.param("y")?);
        let a = sess.g.gelu(x);
        let b = sess.g.exp(y);
        let p = sess.g.mul(a, b)?;
        let q = sess.g.sub(p, y)?;
        let sm = sess.g.softmax(q)?;
        let rl = sess.g.relu(q);
        sess.g.add(sm, rl)
    });
    assert!(err < TOL, "elementwise rel err {err}");
}

#[test]
fn reductions_and_permute_gradients() {
    let mut r = rng(8);
    let mut s = ParamStore::new();
    s.add("x", Tensor::randn(&[2, 3, 4], 1.0, &mut r), true).unwrap();
    s.add("row", Tensor::randn(&[3, 4], 1.0, &mut r), true).unwrap();
    let err = check(&s, |sess| {
        let (x, row) = (sess.param("x")?, sess.param("row")?);
        let a = sess.g.mul_row(x, row)?;
        let a = sess.g.add_row(a, row)?;
        let p = sess.g.permute(a, &[2, 0, 1])?;
        let sq = sess.g.mul(p, p)?;
        let m = sess.g.mean(sq);
        let t = sess.g.sum(p);
        let both = sess.g.add(m, t)?;
        let e = sess.g.exp(both);
        Ok(sess.g.scale(e, 0.01))
    });
    assert!(err < TOL, "reduction rel err {err}");
}

