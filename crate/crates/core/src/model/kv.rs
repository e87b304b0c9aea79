use super::ModelParams;
use crate::diffmath::attention::{self, AttnLayout};
use crate::diffmath::{gelu, Real, Tensor, LAYER_NORM_EPS};
use crate::kvcache::{self, HeavyHitterState, KVCachePolicy};
use crate::{Error, Result};

/// Keys and values of the tokens alive at one layer, in position order.
#[derive(Clone, Debug, PartialEq)]
pub struct LayerCache<T> {
    pub keys: Vec<T>,
    pub values: Vec<T>,
    pub positions: Vec<usize>,
}

impl<T: Real> LayerCache<T> {
    pub fn new(keys: &Tensor<T>, values: &Tensor<T>, positions: Vec<usize>) -> Self {
        Self {
            keys: keys.data().to_vec(),
            values: values.data().to_vec(),
            positions,
        }
    }

    pub fn len(&self) -> usize {
        self.positions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.positions.is_empty()
    }

    /// Keeps the entries at the given ascending indices.
    pub fn retain(&mut self, keep: &[usize], d: usize) {
        let pick = |src: &[T]| {
            let mut out = Vec::with_capacity(keep.len() * d);
            for &i in keep {
                out.extend_from_slice(&src[i * d..(i + 1) * d]);
            }
            out
        };
        self.keys = pick(&self.keys);
        self.values = pick(&self.values);
        self.positions = keep.iter().map(|&i| self.positions[i]).collect();
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct KVCache<T> {
    pub d_model: usize,
    pub layers: Vec<LayerCache<T>>,
    /// Entries per layer right after prefill; eviction budgets scale off it.
    pub prefill_len: Vec<usize>,
    /// Position assigned to the next appended token.
    pub next_position: usize,
    pub state: HeavyHitterState,
}

impl<T: Real> KVCache<T> {
    pub fn from_layers(d_model: usize, layers: Vec<LayerCache<T>>, next_position: usize) -> Self {
        let prefill_len: Vec<usize> = layers.iter().map(LayerCache::len).collect();
        let state = HeavyHitterState::new(&prefill_len);
        Self {
            d_model,
            layers,
            prefill_len,
            next_position,
            state,
        }
    }

    pub fn entries(&self) -> Vec<usize> {
        self.layers.iter().map(LayerCache::len).collect()
    }
}

fn layer_norm<T: Real>(x: &[T], g: &Tensor<T>, b: &Tensor<T>) -> Vec<T> {
    let inv_c = T::one() / T::c(x.len() as f64);
    let mean = x.iter().copied().sum::<T>() * inv_c;
    let var = x.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() * inv_c;
    let rs = T::one() / (var + T::c(LAYER_NORM_EPS)).sqrt();
    x.iter()
        .zip(g.data().iter().zip(b.data()))
        .map(|(&v, (&g, &b))| (v - mean) * rs * g + b)
        .collect()
}

fn vecmat<T: Real>(x: &[T], w: &Tensor<T>) -> Vec<T> {
    let (k, n) = (w.rows(), w.cols());
    let mut out = vec![T::zero(); n];
    T::gemm(1, k, n, T::one(), x, false, w.data(), false, T::zero(), &mut out);
    out
}

/// Appends one token, attends over the cache, accumulates attention mass,
/// applies `policy` and returns next-token logits.
pub fn decode_step<T: Real>(
    params: &ModelParams<T>,
    cache: &mut KVCache<T>,
    token: usize,
    policy: Option<&KVCachePolicy>,
) -> Result<Vec<T>> {
    let config = &params.config;
    if cache.layers.len() != config.n_layers || cache.d_model != config.d_model {
        return Err(Error::Cache(format!(
            "cache has {} layers of width {}, model has {} of width {}",
            cache.layers.len(),
            cache.d_model,
            config.n_layers,
            config.d_model
        )));
    }
    if token >= config.vocab_size {
        return Err(Error::Input(format!("token id {token} outside vocabulary")));
    }
    let pos = cache.next_position;
    if pos >= config.max_seq_len {
        return Err(Error::Input(format!(
            "position {pos} exceeds max_seq_len {}",
            config.max_seq_len
        )));
    }
    let d = config.d_model;
    let mut x: Vec<T> = params
        .tok_emb
        .row(token)
        .iter()
        .zip(params.pos_emb.row(pos))
        .map(|(&a, &b)| a + b)
        .collect();
    for (l, lp) in params.layers.iter().enumerate() {
        let h = layer_norm(&x, &lp.ln1_g, &lp.ln1_b);
        let q = vecmat(&h, &lp.wq);
        let k = vecmat(&h, &lp.wk);
        let v = vecmat(&h, &lp.wv);
        let lc = &mut cache.layers[l];
        lc.keys.extend_from_slice(&k);
        lc.values.extend_from_slice(&v);
        lc.positions.push(pos);
        cache.state.masses[l].push(0.0);
        let nk = lc.len();
        let lay = AttnLayout {
            nq: 1,
            nk,
            d,
            heads: config.n_heads,
            q_pos: &[pos],
            k_pos: &lc.positions,
        };
        let (a, e) = attention::forward(&q, &lc.keys, &lc.values, &lay, None, true);
        let inv_h = 1.0 / config.n_heads as f64;
        let weights: Vec<f64> = (0..nk)
            .map(|j| (0..config.n_heads).map(|hd| e[hd * nk + j].f64()).sum::<f64>() * inv_h)
            .collect();
        kvcache::accumulate_attention(&mut cache.state, l, &weights)?;
        let a = vecmat(&a, &lp.wo);
        for (xi, ai) in x.iter_mut().zip(&a) {
            *xi += *ai;
        }
        let h = layer_norm(&x, &lp.ln2_g, &lp.ln2_b);
        let mut m = vecmat(&h, &lp.w1);
        for (mi, &bi) in m.iter_mut().zip(lp.b1.data()) {
            *mi = gelu(*mi + bi);
        }
        let m = vecmat(&m, &lp.w2);
        for ((xi, &mi), &bi) in x.iter_mut().zip(&m).zip(lp.b2.data()) {
            *xi += mi + bi;
        }
    }
    cache.next_position = pos + 1;
    if let Some(p) = policy {
        kvcache::evict(cache, p)?;
    }
    let h = layer_norm(&x, &params.lnf_g, &params.lnf_b);
    Ok(vecmat(&h, &params.w_out))
}
