//! Encoder-decoder forecaster built from grouped self-attention and
//! compressed cross-attention.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::attention::{per_head, scaled_dot_attention, AttentionMask, OpCounter};
use crate::autodiff::{Graph, Var};
use crate::cca::{CcaConfig, CcaLayer};
use crate::error::{Error, Result};
use crate::gsa::{GsaConfig, GsaLayer, MergeScalars, Pooling};
use crate::layers::{sinusoidal_positions, FeedForward, LayerNorm, Linear, Projections};
use crate::params::ParamStore;
use crate::tensor::Tensor;

/// Self-attention mechanism used in encoder and decoder.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Default)]
pub enum Mechanism {
    #[default]
    Grouped,
    Canonical,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ModelConfig {
    pub d: usize,
    pub heads: usize,
    pub e_l: usize,
    pub d_l: usize,
    pub l_g: usize,
    pub l_s: usize,
    pub l_comp: usize,
    pub seq_len: usize,
    pub label_len: usize,
    pub pred_len: usize,
    pub n_features_in: usize,
    pub n_features_out: usize,
    pub ffn_hidden: usize,
    /// Encoder layers skip the summary path (local attention only).
    pub ablation_local_only: bool,
    pub attention: Mechanism,
    pub pooling: Pooling,
    pub merge: MergeScalars,
    /// Keep the summary path on in the causal decoder. Leaks future
    /// positions inside a group.
    pub decoder_leaky_global: bool,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            d: 64,
            heads: 4,
            e_l: 3,
            d_l: 3,
            l_g: 64,
            l_s: 4,
            l_comp: 256,
            seq_len: 96,
            label_len: 48,
            pred_len: 96,
            n_features_in: 1,
            n_features_out: 1,
            ffn_hidden: 128,
            ablation_local_only: false,
            attention: Mechanism::Grouped,
            pooling: Pooling::Mean,
            merge: MergeScalars::PerGroup,
            decoder_leaky_global: false,
        }
    }
}

impl ModelConfig {
    pub fn dec_len(&self) -> usize {
        self.label_len + self.pred_len
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(Error::Config(m));
        if self.d == 0 || self.heads == 0 || self.d % self.heads != 0 {
            return fail(format!("d={} must be a positive multiple of heads={}", self.d, self.heads));
        }
        if self.seq_len == 0 || self.pred_len == 0 {
            return fail("seq_len and pred_len must be positive".into());
        }
        if self.label_len > self.seq_len {
            return fail(format!(
                "label_len={} exceeds seq_len={}",
                self.label_len, self.seq_len
            ));
        }
        if self.n_features_in == 0 || self.n_features_out == 0 || self.ffn_hidden == 0 {
            return fail("feature counts and ffn_hidden must be positive".into());
        }
        if self.l_comp == 0 {
            return fail("l_comp must be positive".into());
        }
        if self.attention == Mechanism::Grouped && (self.l_g == 0 || self.l_s == 0 || self.l_s >= self.l_g) {
            return fail(format!(
                "need 0 < l_s < l_g, got l_s={} l_g={}",
                self.l_s, self.l_g
            ));
        }
        Ok(())
    }

    fn gsa_config(&self, max_len: usize, causal: bool) -> GsaConfig {
        let mut cfg = GsaConfig::new(self.d, self.heads, max_len).with_groups(self.l_g, self.l_s, max_len);
        cfg.causal = causal;
        cfg.global_path = if causal {
            self.decoder_leaky_global
        } else {
            !self.ablation_local_only
        };
        cfg.leaky_causal_global = causal && self.decoder_leaky_global;
        cfg.pooling = self.pooling;
        cfg.merge = self.merge;
        cfg
    }
}

#[derive(Clone, Debug)]
pub struct CanonicalSelfAttention {
    pub proj: Projections,
    pub heads: usize,
    pub causal: bool,
}

impl CanonicalSelfAttention {
    pub fn forward<'g>(
        &self,
        g: &'g Graph,
        store: &ParamStore,
        x: &Var<'g>,
        counter: &mut OpCounter,
    ) -> Result<Var<'g>> {
        let q = self.proj.q.forward(g, store, x)?;
        let k = self.proj.k.forward(g, store, x)?;
        let v = self.proj.v.forward(g, store, x)?;
        let mask = if self.causal {
            AttentionMask::Causal
        } else {
            AttentionMask::None
        };
        let out = per_head(&q, &k, &v, self.heads, |qh, kh, vh| {
            scaled_dot_attention(qh, kh, vh, &mask, counter)
        })?;
        self.proj.o.forward(g, store, &out)
    }
}

#[derive(Clone, Debug)]
pub enum SelfAttention {
    Grouped(GsaLayer),
    Canonical(CanonicalSelfAttention),
}

impl SelfAttention {
    fn build(
        cfg: &ModelConfig,
        store: &mut ParamStore,
        prefix: &str,
        max_len: usize,
        causal: bool,
        rng: &mut ChaCha8Rng,
    ) -> Result<Self> {
        Ok(match cfg.attention {
            Mechanism::Grouped => {
                SelfAttention::Grouped(GsaLayer::new(store, prefix, cfg.gsa_config(max_len, causal), rng)?)
            }
            Mechanism::Canonical => SelfAttention::Canonical(CanonicalSelfAttention {
                proj: Projections::new(store, prefix, cfg.d, rng),
                heads: cfg.heads,
                causal,
            }),
        })
    }

    pub fn forward<'g>(
        &self,
        g: &'g Graph,
        store: &ParamStore,
        x: &Var<'g>,
        counter: &mut OpCounter,
    ) -> Result<Var<'g>> {
        match self {
            SelfAttention::Grouped(l) => l.forward(g, store, x, counter),
            SelfAttention::Canonical(l) => l.forward(g, store, x, counter),
        }
    }

    pub fn op_count(&self, l: usize) -> u64 {
        match self {
            SelfAttention::Grouped(layer) => layer.op_count(l),
            SelfAttention::Canonical(layer) => (layer.heads * l * l) as u64,
        }
    }
}

#[derive(Clone, Debug)]
pub struct EncoderLayer {
    pub attn: SelfAttention,
    pub norm1: LayerNorm,
    pub ffn: FeedForward,
    pub norm2: LayerNorm,
}

#[derive(Clone, Debug)]
pub struct DecoderLayer {
    pub attn: SelfAttention,
    pub norm1: LayerNorm,
    pub cross: CcaLayer,
    pub norm2: LayerNorm,
    pub ffn: FeedForward,
    pub norm3: LayerNorm,
}

#[derive(Clone, Debug)]
pub struct ForecasterModel {
    pub cfg: ModelConfig,
    pub params: ParamStore,
    pub enc_embed: Linear,
    pub dec_embed: Linear,
    pub encoder: Vec<EncoderLayer>,
    pub decoder: Vec<DecoderLayer>,
    pub head: Linear,
    positions: Tensor,
}

/// Decoder input: the last `label_len` rows of `x`, then `pred_len` zero rows.
pub fn build_decoder_input(x: &Tensor, cfg: &ModelConfig) -> Result<Tensor> {
    if cfg.label_len > cfg.seq_len {
        return Err(Error::Config(format!(
            "label_len={} exceeds seq_len={}",
            cfg.label_len, cfg.seq_len
        )));
    }
    let (rows, f) = x.dims2("build_decoder_input")?;
    if rows != cfg.seq_len {
        return Err(Error::dim("build_decoder_input", x.shape(), &[cfg.seq_len, f]));
    }
    let mut data = x.data()[(rows - cfg.label_len) * f..].to_vec();
    data.resize(cfg.dec_len() * f, 0.0);
    Tensor::new(&[cfg.dec_len(), f], data)
}

impl ForecasterModel {
    pub fn new(cfg: ModelConfig, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let d = cfg.d;
        let enc_embed = Linear::new(&mut store, "enc_embed", cfg.n_features_in, d, true, &mut rng);
        let dec_embed = Linear::new(&mut store, "dec_embed", cfg.n_features_in, d, true, &mut rng);

        let mut encoder = Vec::with_capacity(cfg.e_l);
        for i in 0..cfg.e_l {
            let p = format!("encoder.{i}");
            encoder.push(EncoderLayer {
                attn: SelfAttention::build(&cfg, &mut store, &format!("{p}.attn"), cfg.seq_len, false, &mut rng)?,
                norm1: LayerNorm::new(&mut store, &format!("{p}.norm1"), d),
                ffn: FeedForward::new(&mut store, &p, d, cfg.ffn_hidden, &mut rng),
                norm2: LayerNorm::new(&mut store, &format!("{p}.norm2"), d),
            });
        }

        let mut decoder = Vec::with_capacity(cfg.d_l);
        for i in 0..cfg.d_l {
            let p = format!("decoder.{i}");
            // the canonical baseline attends to the full encoder output
            let l_comp = match cfg.attention {
                Mechanism::Grouped => cfg.l_comp,
                Mechanism::Canonical => cfg.seq_len.max(cfg.l_comp),
            };
            let cross_cfg = CcaConfig::new(d, cfg.heads, cfg.seq_len, l_comp);
            decoder.push(DecoderLayer {
                attn: SelfAttention::build(&cfg, &mut store, &format!("{p}.self_attn"), cfg.dec_len(), true, &mut rng)?,
                norm1: LayerNorm::new(&mut store, &format!("{p}.norm1"), d),
                cross: CcaLayer::new(&mut store, &format!("{p}.cross"), cross_cfg, &mut rng)?,
                norm2: LayerNorm::new(&mut store, &format!("{p}.norm2"), d),
                ffn: FeedForward::new(&mut store, &p, d, cfg.ffn_hidden, &mut rng),
                norm3: LayerNorm::new(&mut store, &format!("{p}.norm3"), d),
            });
        }

        let head = Linear::new(&mut store, "head", d, cfg.n_features_out, true, &mut rng);
        let positions = sinusoidal_positions(cfg.seq_len.max(cfg.dec_len()), d);
        Ok(Self {
            cfg,
            params: store,
            enc_embed,
            dec_embed,
            encoder,
            decoder,
            head,
            positions,
        })
    }

    fn embed<'g>(&self, g: &'g Graph, linear: &Linear, x: &Tensor) -> Result<Var<'g>> {
        let (rows, f) = x.dims2("embed")?;
        if f != self.cfg.n_features_in {
            return Err(Error::dim("embed", x.shape(), &[rows, self.cfg.n_features_in]));
        }
        let h = linear.forward(g, &self.params, &g.constant(x.clone()))?;
        h.add(&g.constant(self.positions.slice_rows(0, rows)?))
    }

    pub fn encoder_forward<'g>(&self, g: &'g Graph, x: &Tensor, counter: &mut OpCounter) -> Result<Var<'g>> {
        if x.rows() != self.cfg.seq_len {
            return Err(Error::dim("encoder_forward", x.shape(), &[self.cfg.seq_len, self.cfg.n_features_in]));
        }
        let store = &self.params;
        let mut h = self.embed(g, &self.enc_embed, x)?;
        for layer in &self.encoder {
            let a = layer.attn.forward(g, store, &h, counter)?;
            h = layer.norm1.forward(g, store, &h.add(&a)?)?;
            let f = layer.ffn.forward(g, store, &h)?;
            h = layer.norm2.forward(g, store, &h.add(&f)?)?;
        }
        Ok(h)
    }

    /// Predicts the `pred_len × n_features_out` continuation of `x`.
    pub fn forward<'g>(&self, g: &'g Graph, x: &Tensor, counter: &mut OpCounter) -> Result<Var<'g>> {
        let enc = self.encoder_forward(g, x, counter)?;
        let dec_in = build_decoder_input(x, &self.cfg)?;
        let store = &self.params;
        let mut h = self.embed(g, &self.dec_embed, &dec_in)?;
        for layer in &self.decoder {
            let a = layer.attn.forward(g, store, &h, counter)?;
            h = layer.norm1.forward(g, store, &h.add(&a)?)?;
            let c = layer.cross.forward(g, store, &h, &enc, counter)?;
            h = layer.norm2.forward(g, store, &h.add(&c)?)?;
            let f = layer.ffn.forward(g, store, &h)?;
            h = layer.norm3.forward(g, store, &h.add(&f)?)?;
        }
        let out = self.head.forward(g, store, &h)?;
        let rows = out.rows();
        if rows == self.cfg.pred_len {
            Ok(out)
        } else {
            out.slice_rows(rows - self.cfg.pred_len, rows)
        }
    }

    /// Convenience wrapper returning the prediction as a plain tensor.
    pub fn predict(&self, x: &Tensor) -> Result<Tensor> {
        let g = Graph::new();
        let out = self.forward(&g, x, &mut OpCounter::new())?;
        let value = out.value();
        Ok(value.as_ref().clone())
    }

    pub fn encoder_op_count(&self) -> u64 {
        self.encoder
            .iter()
            .map(|l| l.attn.op_count(self.cfg.seq_len))
            .sum()
    }

    /// Score elements one full forward adds to the counter.
    pub fn closed_form_score_elements(&self) -> u64 {
        let l_dec = self.cfg.dec_len();
        self.encoder_op_count()
            + self
                .decoder
                .iter()
                .map(|l| l.attn.op_count(l_dec) + l.cross.op_count(l_dec))
                .sum::<u64>()
    }
}
