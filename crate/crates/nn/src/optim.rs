use crate::error::{NnError, Result};
use crate::params::{Gradients, ParamStore};
use crate::scalar::{c, Real};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            lr: 1e-4,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// Bias-corrected Adam. Moment buffers are keyed by store index and created
/// lazily (zero) the first time a parameter receives a gradient.
#[derive(Debug, Clone)]
pub struct Adam<T> {
    pub cfg: AdamConfig,
    step: u64,
    m: Vec<Option<Vec<T>>>,
    v: Vec<Option<Vec<T>>>,
}

impl<T: Real> Adam<T> {
    pub fn new(cfg: AdamConfig) -> Self {
        Self {
            cfg,
            step: 0,
            m: Vec::new(),
            v: Vec::new(),
        }
    }

    pub fn steps(&self) -> u64 {
        self.step
    }

    /// Applies one update to every trainable parameter that has a gradient.
    /// Gradients are validated before anything is modified.
    pub fn step(&mut self, store: &mut ParamStore<T>, grads: &Gradients<T>) -> Result<()> {
        for i in 0..store.len() {
            let p = store.by_index(i);
            if let (true, Some(g)) = (p.trainable, grads.get(i)) {
                if g.iter().any(|x| !x.is_finite()) {
                    return Err(NnError::NonFiniteGradient(p.name.clone()));
                }
            }
        }
        if self.m.len() < store.len() {
            self.m.resize(store.len(), None);
            self.v.resize(store.len(), None);
        }
        self.step += 1;
        let t = self.step as f64;
        let (b1, b2) = (c::<T>(self.cfg.beta1), c::<T>(self.cfg.beta2));
        let bc1 = c::<T>(1.0 - self.cfg.beta1.powf(t));
        let bc2 = c::<T>(1.0 - self.cfg.beta2.powf(t));
        let (lr, eps) = (c::<T>(self.cfg.lr), c::<T>(self.cfg.eps));
        for i in 0..store.len() {
            let p = store.by_index_mut(i);
            if !p.trainable {
                continue;
            }
            let Some(g) = grads.get(i) else { continue };
            let n = g.len();
            let m = self.m[i].get_or_insert_with(|| vec![T::zero(); n]);
            let v = self.v[i].get_or_insert_with(|| vec![T::zero(); n]);
            for (j, w) in p.tensor.data_mut().iter_mut().enumerate() {
                m[j] = b1 * m[j] + (T::one() - b1) * g[j];
                v[j] = b2 * v[j] + (T::one() - b2) * g[j] * g[j];
                let mhat = m[j] / bc1;
                let vhat = v[j] / bc2;
                *w = *w - lr * mhat / (vhat.sqrt() + eps);
            }
        }
        Ok(())
    }

    /// Moment buffers as named tensors for checkpointing.
    pub fn export(&self, store: &ParamStore<T>) -> Vec<(String, Tensor<T>)> {
        let mut out = vec![(
            "adam.step".to_string(),
            Tensor::scalar(c::<T>(self.step as f64)),
        )];
        for (i, p) in store.iter().enumerate() {
            for (tag, buf) in [("m", &self.m), ("v", &self.v)] {
                if let Some(Some(b)) = buf.get(i) {
                    let t = Tensor::new(p.tensor.shape(), b.clone()).expect("moment shape");
                    out.push((format!("adam.{tag}.{}", p.name), t));
                }
            }
        }
        out
    }

    pub fn import(cfg: AdamConfig, store: &ParamStore<T>, named: &[(String, Tensor<T>)]) -> Result<Self> {
        let mut opt = Self::new(cfg);
        opt.m.resize(store.len(), None);
        opt.v.resize(store.len(), None);
        for (name, t) in named {
            if name == "adam.step" {
                opt.step = t.data()[0].to_f64_lossy() as u64;
            } else if let Some(rest) = name.strip_prefix("adam.m.") {
                opt.m[store.index_of(rest)?] = Some(t.data().to_vec());
            } else if let Some(rest) = name.strip_prefix("adam.v.") {
                opt.v[store.index_of(rest)?] = Some(t.data().to_vec());
            }
        }
        Ok(opt)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::params::Session;

    fn single(v: f64, trainable: bool) -> ParamStore<f64> {
        let mut s = ParamStore::new();
        s.add("x", Tensor::new(&[1], vec![v]).unwrap(), trainable).unwrap();
        s
    }

    fn grads_for(store: &ParamStore<f64>, coeff: f64) -> Gradients<f64> {
        // loss = coeff * x  => dloss/dx = coeff
        let mut sess = Session::new(store);
        let x = sess.param("x").unwrap();
        let y = sess.g.scale(x, coeff);
        let l = sess.g.sum(y);
        sess.backward(l).unwrap()
    }

    #[test]
    fn zero_gradient_leaves_params() {
        let mut s = single(0.7, true);
        let g = grads_for(&s, 0.0);
        let mut opt = Adam::new(AdamConfig::default());
        opt.step(&mut s, &g).unwrap();
        assert_eq!(s.get("x").unwrap().tensor.data()[0], 0.7);
    }

    #[test]
    fn first_step_matches_hand_computation() {
        let mut s = single(0.0, true);
        let g = grads_for(&s, 1.0);
        let cfg = AdamConfig { lr: 0.1, ..AdamConfig::default() };
        let mut opt = Adam::new(cfg);
        opt.step(&mut s, &g).unwrap();
        // m = 0.1, v = 0.001; mhat = 1, vhat = 1 => delta = -lr / (1 + eps)
        let m = (1.0 - 0.9) * 1.0;
        let v = (1.0 - 0.999) * 1.0;
        let mhat = m / (1.0 - 0.9);
        let vhat = v / (1.0 - 0.999);
        let want = -0.1 * mhat / (f64::sqrt(vhat) + 1e-8);
        let got = s.get("x").unwrap().tensor.data()[0];
        assert!((got - want).abs() < 1e-12, "{got} vs {want}");
        assert!((got + 0.1 / (1.0 + 1e-8)).abs() < 1e-12);
    }

    #[test]
    fn frozen_parameter_unchanged() {
        let mut s = single(0.3, false);
        // Gradient built while trainable, then applied to a frozen param.
        let g = grads_for(&single(0.3, true), 5.0);
        Adam::new(AdamConfig::default()).step(&mut s, &g).unwrap();
        assert_eq!(s.get("x").unwrap().tensor.data()[0], 0.3);
    }

    #[test]
    fn non_finite_gradient_names_parameter() {
        let mut s = single(0.0, true);
        let g = grads_for(&s, f64::NAN);
        let err = Adam::new(AdamConfig::default()).step(&mut s, &g).unwrap_err();
        assert!(matches!(err, NnError::NonFiniteGradient(ref n) if n == "x"));
        assert_eq!(s.get("x").unwrap().tensor.data()[0], 0.0);
    }

    #[test]
    fn export_import_round_trip() {
        let mut s = single(0.0, true);
        let g = grads_for(&s, 1.0);
        let mut opt = Adam::new(AdamConfig::default());
        opt.step(&mut s, &g).unwrap();
        let named = opt.export(&s);
        let back = Adam::import(AdamConfig::default(), &s, &named).unwrap();
        assert_eq!(back.steps(), 1);
        assert_eq!(back.export(&s), named);
    }
}
