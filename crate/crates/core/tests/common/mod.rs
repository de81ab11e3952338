//! Plain-loop reference implementations used as test oracles.

#![allow(dead_code)]

use gsa::autodiff::Graph;
use gsa::gsa::{GsaConfig, GsaLayer};
use gsa::layers::Linear;
use gsa::{OpCounter, ParamStore, Tensor};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn random(shape: &[usize], seed: u64) -> Tensor {
    Tensor::uniform(shape, 1.0, &mut rng(seed))
}

pub fn naive_matmul(a: &Tensor, b: &Tensor) -> Tensor {
    let (n, k, m) = (a.rows(), a.cols(), b.cols());
    let mut out = Tensor::zeros(&[n, m]);
    for i in 0..n {
        for j in 0..m {
            out.set(i, j, (0..k).map(|t| a.get(i, t) * b.get(t, j)).sum());
        }
    }
    out
}

/// `x·W + b` for a stored linear layer.
pub fn naive_linear(store: &ParamStore, lin: &Linear, x: &Tensor) -> Tensor {
    let mut y = naive_matmul(x, store.value(lin.weight));
    if let Some(b) = lin.bias {
        let b = store.value(b);
        for i in 0..y.rows() {
            for j in 0..y.cols() {
                y.set(i, j, y.get(i, j) + b.data()[j]);
            }
        }
    }
    y
}

pub fn cols(x: &Tensor, start: usize, end: usize) -> Tensor {
    let mut out = Tensor::zeros(&[x.rows(), end - start]);
    for i in 0..x.rows() {
        for j in start..end {
            out.set(i, j - start, x.get(i, j));
        }
    }
    out
}

pub fn rows(x: &Tensor, start: usize, end: usize) -> Tensor {
    Tensor::new(&[end - start, x.cols()], x.data()[start * x.cols()..end * x.cols()].to_vec()).unwrap()
}

pub fn stack_cols(parts: &[Tensor]) -> Tensor {
    let n = parts[0].rows();
    let width: usize = parts.iter().map(|p| p.cols()).sum();
    let mut out = Tensor::zeros(&[n, width]);
    let mut off = 0;
    for p in parts {
        for i in 0..n {
            for j in 0..p.cols() {
                out.set(i, off + j, p.get(i, j));
            }
        }
        off += p.cols();
    }
    out
}

pub fn stack_rows(parts: &[Tensor]) -> Tensor {
    let c = parts[0].cols();
    let data: Vec<f64> = parts.iter().flat_map(|p| p.data().to_vec()).collect();
    Tensor::new(&[data.len() / c, c], data).unwrap()
}

/// `softmax(q·kᵀ/√d)·v` where query `i` may see key `j` iff `allowed(i, j)`.
pub fn naive_attention(q: &Tensor, k: &Tensor, v: &Tensor, allowed: impl Fn(usize, usize) -> bool) -> Tensor {
    let d = q.cols();
    let mut out = Tensor::zeros(&[q.rows(), v.cols()]);
    for i in 0..q.rows() {
        let keys: Vec<usize> = (0..k.rows()).filter(|&j| allowed(i, j)).collect();
        if keys.is_empty() {
            continue;
        }
        let s: Vec<f64> = keys
            .iter()
            .map(|&j| (0..d).map(|c| q.get(i, c) * k.get(j, c)).sum::<f64>() / (d as f64).sqrt())
            .collect();
        let mx = s.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let e: Vec<f64> = s.iter().map(|x| (x - mx).exp()).collect();
        let z: f64 = e.iter().sum();
        for c in 0..v.cols() {
            out.set(i, c, keys.iter().zip(&e).map(|(&j, w)| w / z * v.get(j, c)).sum());
        }
    }
    out
}

/// Multi-head attention over already-projected `q`, `k`, `v`.
pub fn naive_multi_head(q: &Tensor, k: &Tensor, v: &Tensor, heads: usize, allowed: impl Fn(usize, usize) -> bool + Copy) -> Tensor {
    let dh = q.cols() / heads;
    let outs: Vec<Tensor> = (0..heads)
        .map(|h| {
            let (s, e) = (h * dh, (h + 1) * dh);
            naive_attention(&cols(q, s, e), &cols(k, s, e), &cols(v, s, e), allowed)
        })
        .collect();
    stack_cols(&outs)
}

/// One head of grouped self-attention computed from the real rows only: no
/// padding is ever materialized.
pub fn naive_gsa_head(q: &Tensor, k: &Tensor, v: &Tensor, cfg: &GsaConfig, e: [&Tensor; 3], alpha: &[f64], beta: &[f64]) -> Tensor {
    let l = q.rows();
    let m = l.div_ceil(cfg.l_g);
    let spans: Vec<(usize, usize)> = (0..m).map(|j| (j * cfg.l_g, ((j + 1) * cfg.l_g).min(l))).collect();
    let local: Vec<Tensor> = spans
        .iter()
        .map(|&(s, t)| {
            let causal = cfg.causal;
            naive_attention(&rows(q, s, t), &rows(k, s, t), &rows(v, s, t), move |i, j| !causal || j <= i)
        })
        .collect();
    if !cfg.global_active() {
        return stack_rows(&local);
    }
    let summarize = |x: &Tensor, ei: &Tensor| -> Tensor {
        let parts: Vec<Tensor> = spans
            .iter()
            .map(|&(s, t)| naive_matmul(&cols(ei, 0, t - s), &rows(x, s, t)))
            .collect();
        stack_rows(&parts)
    };
    let (qs, ks, vs) = (summarize(q, e[0]), summarize(k, e[1]), summarize(v, e[2]));
    let o_s = naive_attention(&qs, &ks, &vs, |_, _| true);
    let merged: Vec<Tensor> = local
        .iter()
        .enumerate()
        .map(|(j, o)| {
            let idx = if alpha.len() == 1 { 0 } else { j };
            let seg = rows(&o_s, j * cfg.l_s, (j + 1) * cfg.l_s);
            let mut out = o.clone();
            for i in 0..out.rows() {
                for c in 0..out.cols() {
                    let pooled: f64 = (0..cfg.l_s).map(|r| seg.get(r, c)).sum::<f64>() / cfg.l_s as f64;
                    out.set(i, c, alpha[idx] * o.get(i, c) + beta[idx] * pooled);
                }
            }
            out
        })
        .collect();
    stack_rows(&merged)
}

/// Full grouped self-attention layer, independent of the library kernels.
pub fn naive_gsa_layer(store: &ParamStore, layer: &GsaLayer, x: &Tensor) -> Tensor {
    let p = &layer.params;
    let q = naive_linear(store, &p.proj.q, x);
    let k = naive_linear(store, &p.proj.k, x);
    let v = naive_linear(store, &p.proj.v, x);
    let heads = layer.cfg.heads;
    let dh = layer.cfg.d / heads;
    let e = [store.value(p.e_q), store.value(p.e_k), store.value(p.e_v)];
    let alpha = store.value(p.alpha).data();
    let beta = store.value(p.beta).data();
    let outs: Vec<Tensor> = (0..heads)
        .map(|h| {
            let (s, t) = (h * dh, (h + 1) * dh);
            naive_gsa_head(&cols(&q, s, t), &cols(&k, s, t), &cols(&v, s, t), &layer.cfg, e, alpha, beta)
        })
        .collect();
    naive_linear(store, &p.proj.o, &stack_cols(&outs))
}

pub fn gsa_layer(cfg: GsaConfig, seed: u64) -> (ParamStore, GsaLayer) {
    let mut store = ParamStore::new();
    let layer = GsaLayer::new(&mut store, "gsa", cfg, &mut rng(seed)).unwrap();
    (store, layer)
}

pub fn run_gsa(store: &ParamStore, layer: &GsaLayer, x: &Tensor) -> (Tensor, OpCounter) {
    let g = Graph::new();
    let mut c = OpCounter::new();
    let out = layer.forward(&g, store, &g.constant(x.clone()), &mut c).unwrap();
    let value = out.value().as_ref().clone();
    (value, c)
}

pub fn set_param(store: &mut ParamStore, name: &str, value: Tensor) {
    let id = store.find(name).unwrap_or_else(|| panic!("no parameter `{name}`"));
    store.set_value(id, value).unwrap();
}
