//! Compressed cross-attention: each decoder layer owns a compression matrix
//! `C: l_comp × l_enc` that shrinks the encoder output to `l_comp` rows
//! before keys and values are projected from it.

use rand::Rng;

use crate::attention::{per_head, scaled_dot_attention, AttentionMask, OpCounter};
use crate::autodiff::{Graph, Var};
use crate::error::{Error, Result};
use crate::layers::Projections;
use crate::params::{ParamId, ParamStore};
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq)]
pub struct CcaConfig {
    pub d: usize,
    pub heads: usize,
    pub l_enc: usize,
    pub l_comp: usize,
    /// Allocate and apply `C` even when `l_enc <= l_comp`.
    pub force_compression: bool,
}

impl CcaConfig {
    pub fn new(d: usize, heads: usize, l_enc: usize, l_comp: usize) -> Self {
        Self {
            d,
            heads,
            l_enc,
            l_comp,
            force_compression: false,
        }
    }

    pub fn compresses(&self) -> bool {
        self.force_compression || self.l_enc > self.l_comp
    }

    /// Key length seen by the attention kernel.
    pub fn key_len(&self) -> usize {
        if self.compresses() {
            self.l_comp
        } else {
            self.l_enc
        }
    }
}

#[derive(Clone, Debug)]
pub struct CcaLayerParams {
    /// `None` when the encoder output is already no longer than `l_comp`.
    pub compression: Option<ParamId>,
    pub proj: Projections,
}

#[derive(Clone, Debug)]
pub struct CcaLayer {
    pub cfg: CcaConfig,
    pub params: CcaLayerParams,
}

/// `C · H_enc`, or `H_enc` unchanged when no compression matrix is given
/// and the encoder output already fits in `l_comp` rows.
pub fn compress_encoder_output<'g>(
    h_enc: &Var<'g>,
    compression: Option<&Var<'g>>,
    l_comp: usize,
) -> Result<Var<'g>> {
    match compression {
        Some(c) => {
            if c.cols() != h_enc.rows() {
                return Err(Error::dim("compress_encoder_output", &c.shape(), &h_enc.shape()));
            }
            c.matmul(h_enc)
        }
        None if h_enc.rows() <= l_comp => Ok(*h_enc),
        None => Err(Error::Contract(format!(
            "encoder output of {} rows exceeds l_comp={l_comp} but no compression matrix was given",
            h_enc.rows()
        ))),
    }
}

impl CcaLayer {
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        prefix: &str,
        cfg: CcaConfig,
        rng: &mut R,
    ) -> Result<Self> {
        if cfg.heads == 0 || cfg.d % cfg.heads != 0 {
            return Err(Error::Config(format!(
                "d={} is not divisible by heads={}",
                cfg.d, cfg.heads
            )));
        }
        if cfg.l_comp == 0 || cfg.l_enc == 0 {
            return Err(Error::Config("l_comp and l_enc must be positive".into()));
        }
        let compression = cfg.compresses().then(|| {
            let scale = 1.0 / (cfg.l_enc as f64).sqrt();
            store.add(
                format!("{prefix}.compress"),
                Tensor::uniform(&[cfg.l_comp, cfg.l_enc], scale, rng),
            )
        });
        let proj = Projections::new(store, prefix, cfg.d, rng);
        Ok(Self {
            cfg,
            params: CcaLayerParams { compression, proj },
        })
    }

    /// Score elements this layer adds per forward, all heads.
    pub fn op_count(&self, l_dec: usize) -> u64 {
        (self.cfg.heads * l_dec * self.cfg.key_len()) as u64
    }

    pub fn forward<'g>(
        &self,
        g: &'g Graph,
        store: &ParamStore,
        h_dec: &Var<'g>,
        h_enc: &Var<'g>,
        counter: &mut OpCounter,
    ) -> Result<Var<'g>> {
        if h_enc.rows() != self.cfg.l_enc {
            return Err(Error::Length(format!(
                "encoder output has {} rows, layer was built for {}",
                h_enc.rows(),
                self.cfg.l_enc
            )));
        }
        let c = self.params.compression.map(|id| g.param(store, id));
        let compressed = compress_encoder_output(h_enc, c.as_ref(), self.cfg.l_comp)?;
        let p = &self.params.proj;
        let q = p.q.forward(g, store, h_dec)?;
        let k = p.k.forward(g, store, &compressed)?;
        let v = p.v.forward(g, store, &compressed)?;
        let out = per_head(&q, &k, &v, self.cfg.heads, |qh, kh, vh| {
            scaled_dot_attention(qh, kh, vh, &AttentionMask::None, counter)
        })?;
        p.o.forward(g, store, &out)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn short_encoder_output_bypasses() {
        let g = Graph::new();
        let h = g.constant(Tensor::ones(&[128, 4]));
        let out = compress_encoder_output(&h, None, 256).unwrap();
        assert_eq!(out.id(), h.id());
        assert!(compress_encoder_output(&g.constant(Tensor::ones(&[300, 4])), None, 256).is_err());
    }

    #[test]
    fn selection_matrix_picks_rows() {
        let g = Graph::new();
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let h0 = Tensor::uniform(&[3, 2], 1.0, &mut rng);
        let c = Tensor::from_rows(&[&[1.0, 0.0, 0.0], &[0.0, 0.0, 1.0]]).unwrap();
        let out = compress_encoder_output(&g.constant(h0.clone()), Some(&g.constant(c)), 2).unwrap();
        assert_eq!(out.value().row(0), h0.row(0));
        assert_eq!(out.value().row(1), h0.row(2));
        let wrong = g.constant(Tensor::ones(&[2, 4]));
        assert!(compress_encoder_output(&g.constant(h0), Some(&wrong), 2).is_err());
    }

    #[test]
    fn layer_allocates_compression_only_when_needed() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let mut store = ParamStore::new();
        let short = CcaLayer::new(&mut store, "a", CcaConfig::new(4, 1, 8, 16), &mut rng).unwrap();
        assert!(short.params.compression.is_none());
        let long = CcaLayer::new(&mut store, "b", CcaConfig::new(4, 1, 32, 16), &mut rng).unwrap();
        let c = store.value(long.params.compression.unwrap());
        assert_eq!(c.shape(), &[16, 32]);
        let bound = 1.0 / 32f64.sqrt();
        assert!(c.data().iter().all(|v| v.abs() <= bound));
    }

    #[test]
    fn wrong_encoder_length_rejected() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let mut store = ParamStore::new();
        let layer = CcaLayer::new(&mut store, "a", CcaConfig::new(4, 1, 8, 16), &mut rng).unwrap();
        let g = Graph::new();
        let dec = g.constant(Tensor::ones(&[3, 4]));
        let enc = g.constant(Tensor::ones(&[9, 4]));
        assert!(layer.forward(&g, &store, &dec, &enc, &mut OpCounter::new()).is_err());
    }
}
