use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use sha2::{Digest, Sha256};

use super::ModelConfig;
use crate::diffmath::{Real, Tape, Tensor, Var};
use crate::{Error, Result};

#[derive(Clone, Debug, PartialEq)]
pub struct LayerParams<T> {
    pub ln1_g: Tensor<T>,
    pub ln1_b: Tensor<T>,
    pub wq: Tensor<T>,
    pub wk: Tensor<T>,
    pub wv: Tensor<T>,
    pub wo: Tensor<T>,
    pub ln2_g: Tensor<T>,
    pub ln2_b: Tensor<T>,
    pub w1: Tensor<T>,
    pub b1: Tensor<T>,
    pub w2: Tensor<T>,
    pub b2: Tensor<T>,
}

impl<T> LayerParams<T> {
    const NAMES: [&'static str; 12] = [
        "ln1_g", "ln1_b", "wq", "wk", "wv", "wo", "ln2_g", "ln2_b", "w1", "b1", "w2", "b2",
    ];

    fn tensors(&self) -> [&Tensor<T>; 12] {
        [
            &self.ln1_g,
            &self.ln1_b,
            &self.wq,
            &self.wk,
            &self.wv,
            &self.wo,
            &self.ln2_g,
            &self.ln2_b,
            &self.w1,
            &self.b1,
            &self.w2,
            &self.b2,
        ]
    }

    fn tensors_mut(&mut self) -> [&mut Tensor<T>; 12] {
        [
            &mut self.ln1_g,
            &mut self.ln1_b,
            &mut self.wq,
            &mut self.wk,
            &mut self.wv,
            &mut self.wo,
            &mut self.ln2_g,
            &mut self.ln2_b,
            &mut self.w1,
            &mut self.b1,
            &mut self.w2,
            &mut self.b2,
        ]
    }
}

/// Weights of the toy decoder. `frozen` blocks every in-place update made
/// through [`ModelParams::update`].
#[derive(Clone, Debug, PartialEq)]
pub struct ModelParams<T> {
    pub config: ModelConfig,
    pub tok_emb: Tensor<T>,
    pub pos_emb: Tensor<T>,
    pub layers: Vec<LayerParams<T>>,
    pub lnf_g: Tensor<T>,
    pub lnf_b: Tensor<T>,
    pub w_out: Tensor<T>,
    pub frozen: bool,
}

#[derive(Clone, Copy, Debug)]
pub struct LayerVars {
    pub ln1_g: Var,
    pub ln1_b: Var,
    pub wq: Var,
    pub wk: Var,
    pub wv: Var,
    pub wo: Var,
    pub ln2_g: Var,
    pub ln2_b: Var,
    pub w1: Var,
    pub b1: Var,
    pub w2: Var,
    pub b2: Var,
}

/// Model parameters as tape nodes, in [`ModelParams::named_tensors`] order.
#[derive(Clone, Debug)]
pub struct ModelVars {
    pub tok_emb: Var,
    pub pos_emb: Var,
    pub layers: Vec<LayerVars>,
    pub lnf_g: Var,
    pub lnf_b: Var,
    pub w_out: Var,
}

impl ModelVars {
    /// Inverse of [`ModelVars::all`].
    pub fn from_vars(v: &[Var], n_layers: usize) -> Self {
        let layers = (0..n_layers)
            .map(|l| {
                let b = 2 + 12 * l;
                LayerVars {
                    ln1_g: v[b],
                    ln1_b: v[b + 1],
                    wq: v[b + 2],
                    wk: v[b + 3],
                    wv: v[b + 4],
                    wo: v[b + 5],
                    ln2_g: v[b + 6],
                    ln2_b: v[b + 7],
                    w1: v[b + 8],
                    b1: v[b + 9],
                    w2: v[b + 10],
                    b2: v[b + 11],
                }
            })
            .collect();
        let e = 2 + 12 * n_layers;
        Self {
            tok_emb: v[0],
            pos_emb: v[1],
            layers,
            lnf_g: v[e],
            lnf_b: v[e + 1],
            w_out: v[e + 2],
        }
    }

    pub fn all(&self) -> Vec<Var> {
        let mut v = vec![self.tok_emb, self.pos_emb];
        for l in &self.layers {
            v.extend([
                l.ln1_g, l.ln1_b, l.wq, l.wk, l.wv, l.wo, l.ln2_g, l.ln2_b, l.w1, l.b1, l.w2, l.b2,
            ]);
        }
        v.extend([self.lnf_g, self.lnf_b, self.w_out]);
        v
    }
}

impl<T: Real> ModelParams<T> {
    /// Deterministic init: normal weights scaled by `1/sqrt(fan_in)`
    /// (residual outputs further by `1/sqrt(2 n_layers)`), unit gains, zero
    /// biases.
    pub fn init(config: &ModelConfig) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let (d, f) = (config.d_model, config.d_ff);
        let sd = 1.0 / (d as f64).sqrt();
        let resid = 1.0 / (2.0 * config.n_layers as f64).sqrt();
        let tok_emb = Tensor::randn(&[config.vocab_size, d], 0.5, &mut rng);
        let pos_emb = Tensor::randn(&[config.max_seq_len, d], 0.1, &mut rng);
        let layers = (0..config.n_layers)
            .map(|_| LayerParams {
                ln1_g: Tensor::filled(&[d], T::one()),
                ln1_b: Tensor::zeros(&[d]),
                wq: Tensor::randn(&[d, d], sd, &mut rng),
                wk: Tensor::randn(&[d, d], sd, &mut rng),
                wv: Tensor::randn(&[d, d], sd, &mut rng),
                wo: Tensor::randn(&[d, d], sd * resid, &mut rng),
                ln2_g: Tensor::filled(&[d], T::one()),
                ln2_b: Tensor::zeros(&[d]),
                w1: Tensor::randn(&[d, f], sd, &mut rng),
                b1: Tensor::zeros(&[f]),
                w2: Tensor::randn(&[f, d], resid / (f as f64).sqrt(), &mut rng),
                b2: Tensor::zeros(&[d]),
            })
            .collect();
        Ok(Self {
            config: config.clone(),
            tok_emb,
            pos_emb,
            layers,
            lnf_g: Tensor::filled(&[d], T::one()),
            lnf_b: Tensor::zeros(&[d]),
            w_out: Tensor::randn(&[d, config.vocab_size], sd, &mut rng),
            frozen: false,
        })
    }

    pub fn named_tensors(&self) -> Vec<(String, &Tensor<T>)> {
        let mut out = vec![
            ("tok_emb".to_string(), &self.tok_emb),
            ("pos_emb".to_string(), &self.pos_emb),
        ];
        for (i, l) in self.layers.iter().enumerate() {
            for (name, t) in LayerParams::<T>::NAMES.iter().zip(l.tensors()) {
                out.push((format!("layers.{i}.{name}"), t));
            }
        }
        out.push(("lnf_g".into(), &self.lnf_g));
        out.push(("lnf_b".into(), &self.lnf_b));
        out.push(("w_out".into(), &self.w_out));
        out
    }

    fn tensors_mut(&mut self) -> Vec<&mut Tensor<T>> {
        let mut out = vec![&mut self.tok_emb, &mut self.pos_emb];
        for l in &mut self.layers {
            out.extend(l.tensors_mut());
        }
        out.extend([&mut self.lnf_g, &mut self.lnf_b, &mut self.w_out]);
        out
    }

    /// Rebuilds parameters from `(name, tensor)` pairs in any order.
    pub fn from_named(config: &ModelConfig, mut named: Vec<(String, Tensor<T>)>) -> Result<Self> {
        let mut params = Self::init(&ModelConfig {
            seed: config.seed,
            ..config.clone()
        })?;
        let names: Vec<String> = params.named_tensors().into_iter().map(|(n, _)| n).collect();
        let shapes: Vec<Vec<usize>> = params
            .named_tensors()
            .into_iter()
            .map(|(_, t)| t.shape().to_vec())
            .collect();
        if named.len() != names.len() {
            return Err(Error::Checkpoint(format!(
                "expected {} model tensors, found {}",
                names.len(),
                named.len()
            )));
        }
        for ((name, shape), slot) in names.iter().zip(&shapes).zip(params.tensors_mut()) {
            let pos = named
                .iter()
                .position(|(n, _)| n == name)
                .ok_or_else(|| Error::Checkpoint(format!("missing tensor {name}")))?;
            let (_, t) = named.swap_remove(pos);
            if t.shape() != shape.as_slice() {
                return Err(Error::Checkpoint(format!(
                    "tensor {name} has shape {:?}, expected {shape:?}",
                    t.shape()
                )));
            }
            *slot = t;
        }
        Ok(params)
    }

    pub fn checksum(&self) -> String {
        let mut h = Sha256::new();
        let mut buf = Vec::new();
        for (name, t) in self.named_tensors() {
            h.update(name.as_bytes());
            buf.clear();
            for &v in t.data() {
                v.write_le(&mut buf);
            }
            h.update(&buf);
        }
        format!("{:x}", h.finalize())
    }

    pub fn cast<U: Real>(&self) -> ModelParams<U> {
        ModelParams {
            config: self.config.clone(),
            tok_emb: self.tok_emb.cast(),
            pos_emb: self.pos_emb.cast(),
            layers: self
                .layers
                .iter()
                .map(|l| LayerParams {
                    ln1_g: l.ln1_g.cast(),
                    ln1_b: l.ln1_b.cast(),
                    wq: l.wq.cast(),
                    wk: l.wk.cast(),
                    wv: l.wv.cast(),
                    wo: l.wo.cast(),
                    ln2_g: l.ln2_g.cast(),
                    ln2_b: l.ln2_b.cast(),
                    w1: l.w1.cast(),
                    b1: l.b1.cast(),
                    w2: l.w2.cast(),
                    b2: l.b2.cast(),
                })
                .collect(),
            lnf_g: self.lnf_g.cast(),
            lnf_b: self.lnf_b.cast(),
            w_out: self.w_out.cast(),
            frozen: self.frozen,
        }
    }

    /// Puts every parameter on the tape, as trainable leaves or constants.
    pub fn register(&self, tape: &mut Tape<T>, trainable: bool) -> ModelVars {
        let mut leaf = |t: &Tensor<T>| tape.leaf(t.clone(), trainable);
        let tok_emb = leaf(&self.tok_emb);
        let pos_emb = leaf(&self.pos_emb);
        let layers = self
            .layers
            .iter()
            .map(|l| LayerVars {
                ln1_g: leaf(&l.ln1_g),
                ln1_b: leaf(&l.ln1_b),
                wq: leaf(&l.wq),
                wk: leaf(&l.wk),
                wv: leaf(&l.wv),
                wo: leaf(&l.wo),
                ln2_g: leaf(&l.ln2_g),
                ln2_b: leaf(&l.ln2_b),
                w1: leaf(&l.w1),
                b1: leaf(&l.b1),
                w2: leaf(&l.w2),
                b2: leaf(&l.b2),
            })
            .collect();
        ModelVars {
            tok_emb,
            pos_emb,
            layers,
            lnf_g: leaf(&self.lnf_g),
            lnf_b: leaf(&self.lnf_b),
            w_out: leaf(&self.w_out),
        }
    }

    /// Mutable access for an optimizer step; refused when frozen.
    pub fn trainable_tensors(&mut self) -> Result<Vec<&mut Tensor<T>>> {
        if self.frozen {
            return Err(Error::Frozen(
                "attempted to apply a gradient step to frozen base parameters".into(),
            ));
        }
        Ok(self.tensors_mut())
    }

    /// Applies `f(param, grad)` to every tensor with the matching gradient
    /// from `tape`. Fails without touching anything when frozen.
    pub fn update(
        &mut self,
        tape: &Tape<T>,
        vars: &ModelVars,
        mut f: impl FnMut(usize, &mut Tensor<T>, &Tensor<T>),
    ) -> Result<()> {
        if self.frozen {
            return Err(Error::Frozen(
                "attempted to apply a gradient step to frozen base parameters".into(),
            ));
        }
        for (i, (slot, var)) in self.tensors_mut().into_iter().zip(vars.all()).enumerate() {
            let g = tape.grad(var);
            f(i, slot, &g);
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small() -> ModelConfig {
        ModelConfig {
            n_layers: 2,
            d_model: 16,
            n_heads: 2,
            d_ff: 32,
            vocab_size: 20,
            max_seq_len: 12,
            seed: 3,
        }
    }

    #[test]
    fn init_is_deterministic() {
        let a = ModelParams::<f32>::init(&small()).unwrap();
        let b = ModelParams::<f32>::init(&small()).unwrap();
        assert_eq!(a.checksum(), b.checksum());
        let c = ModelParams::<f32>::init(&ModelConfig { seed: 4, ..small() }).unwrap();
        assert_ne!(a.checksum(), c.checksum());
    }

    #[test]
    fn param_count_matches_tensors() {
        let p = ModelParams::<f32>::init(&small()).unwrap();
        let n: usize = p.named_tensors().iter().map(|(_, t)| t.len()).sum();
        assert_eq!(n, small().param_count());
    }

    #[test]
    fn frozen_update_refused() {
        let mut p = ModelParams::<f64>::init(&small()).unwrap();
        p.frozen = true;
        let before = p.checksum();
        let mut tape = Tape::new();
        let vars = p.register(&mut tape, true);
        let err = p.update(&tape, &vars, |_, t, _| t.data_mut()[0] += 1.0).unwrap_err();
        assert!(matches!(err, Error::Frozen(_)));
        assert_eq!(p.checksum(), before);
    }

    #[test]
    fn from_named_round_trip() {
        let p = ModelParams::<f64>::init(&small()).unwrap();
        let mut named: Vec<(String, Tensor<f64>)> =
            p.named_tensors().into_iter().map(|(n, t)| (n, t.clone())).collect();
        named.reverse();
        let q = ModelParams::from_named(&small(), named).unwrap();
        assert_eq!(p, q);
    }
}
