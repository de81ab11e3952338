//! Grouped self-attention.
//!
//! The sequence is cut into `m = ceil(l / l_g)` groups of `l_g` rows, the
//! last one zero-padded. Each group attends locally. Each group's projected
//! queries/keys/values are also compressed to `l_s` summary rows by the
//! shared matrices `E_q`, `E_k`, `E_v`; all `m·l_s` summary rows attend to
//! one another, and each group's slice of that result is pooled to one row
//! and mixed into the local output as `α_j·O_j + β_j·pool(S_j)`.
//!
//! Score elements per head: `m·l_g² + (m·l_s)²`, or `m·l_g²` when the
//! global path is off.

use rand::Rng;

use crate::attention::{per_head, scaled_dot_attention, AttentionMask, OpCounter};
use crate::autodiff::{Graph, Var};
use crate::error::{Error, Result};
use crate::layers::Projections;
use crate::params::{ParamId, ParamStore};
use crate::tensor::Tensor;

/// How a summary segment of `l_s` rows is reduced to one row before merging.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Default)]
pub enum Pooling {
    #[default]
    Mean,
    Sum,
}

/// Granularity of the `α`/`β` merge scalars.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Default)]
pub enum MergeScalars {
    #[default]
    PerGroup,
    PerLayer,
}

#[derive(Clone, Debug, PartialEq)]
pub struct GsaConfig {
    pub l_g: usize,
    pub l_s: usize,
    pub d: usize,
    pub heads: usize,
    /// Group count at the longest sequence this layer accepts.
    pub m_max: usize,
    pub causal: bool,
    pub global_path: bool,
    pub pooling: Pooling,
    pub merge: MergeScalars,
    /// Keep the global path on under a causal mask. Leaks future positions
    /// within a group; ablation use only.
    pub leaky_causal_global: bool,
}

impl GsaConfig {
    pub fn new(d: usize, heads: usize, max_len: usize) -> Self {
        Self {
            l_g: 64,
            l_s: 4,
            d,
            heads,
            m_max: max_len.div_ceil(64).max(1),
            causal: false,
            global_path: true,
            pooling: Pooling::Mean,
            merge: MergeScalars::PerGroup,
            leaky_causal_global: false,
        }
    }

    pub fn with_groups(mut self, l_g: usize, l_s: usize, max_len: usize) -> Self {
        self.l_g = l_g;
        self.l_s = l_s;
        self.m_max = if l_g == 0 { 0 } else { max_len.div_ceil(l_g).max(1) };
        self
    }

    pub fn validate(&self) -> Result<()> {
        if self.l_g == 0 || self.l_s == 0 {
            return Err(Error::Config("l_g and l_s must be positive".into()));
        }
        if self.l_s >= self.l_g {
            return Err(Error::Config(format!(
                "summary length l_s={} must be smaller than group length l_g={}",
                self.l_s, self.l_g
            )));
        }
        if self.heads == 0 || self.d % self.heads != 0 {
            return Err(Error::Config(format!(
                "d={} is not divisible by heads={}",
                self.d, self.heads
            )));
        }
        if self.m_max == 0 {
            return Err(Error::Config("m_max must be positive".into()));
        }
        Ok(())
    }

    /// Whether the summary path actually runs.
    pub fn global_active(&self) -> bool {
        self.global_path && (!self.causal || self.leaky_causal_global)
    }

    pub fn max_len(&self) -> usize {
        self.m_max * self.l_g
    }
}

/// Learnable state of one grouped self-attention layer.
#[derive(Clone, Debug)]
pub struct GsaLayerParams {
    pub proj: Projections,
    pub e_q: ParamId,
    pub e_k: ParamId,
    pub e_v: ParamId,
    pub alpha: ParamId,
    pub beta: ParamId,
}

#[derive(Clone, Debug)]
pub struct GsaLayer {
    pub cfg: GsaConfig,
    pub params: GsaLayerParams,
}

/// Result of [`partition_groups`].
#[derive(Clone, Debug, PartialEq)]
pub struct Partition {
    pub groups: Vec<Tensor>,
    pub m: usize,
    pub pad: usize,
}

/// Splits `l` rows into `ceil(l / l_g)` groups of `l_g` rows, zero-filling
/// the tail of the last group.
pub fn partition_groups(x: &Tensor, l_g: usize) -> Result<Partition> {
    if l_g == 0 {
        return Err(Error::Config("group length must be positive".into()));
    }
    let (l, d) = x.dims2("partition_groups")?;
    let m = l.div_ceil(l_g);
    let pad = m * l_g - l;
    let groups = (0..m)
        .map(|j| {
            let start = j * l_g;
            let end = (start + l_g).min(l);
            let mut data = x.data()[start * d..end * d].to_vec();
            data.resize(l_g * d, 0.0);
            Tensor::new(&[l_g, d], data)
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(Partition { groups, m, pad })
}

/// `(E_q·Q_g, E_k·K_g, E_v·V_g)`.
pub fn summarize_group<'g>(
    qkv: (&Var<'g>, &Var<'g>, &Var<'g>),
    e: (&Var<'g>, &Var<'g>, &Var<'g>),
) -> Result<(Var<'g>, Var<'g>, Var<'g>)> {
    Ok((e.0.matmul(qkv.0)?, e.1.matmul(qkv.1)?, e.2.matmul(qkv.2)?))
}

/// Canonical attention over all concatenated summary rows.
pub fn global_summary_attention<'g>(
    q_s: &Var<'g>,
    k_s: &Var<'g>,
    v_s: &Var<'g>,
    l_s: usize,
    counter: &mut OpCounter,
) -> Result<Var<'g>> {
    if l_s == 0 || q_s.rows() % l_s != 0 {
        return Err(Error::Length(format!(
            "{} summary rows are not a multiple of l_s={l_s}",
            q_s.rows()
        )));
    }
    scaled_dot_attention(q_s, k_s, v_s, &AttentionMask::None, counter)
}

/// `α·O_g + β·pool(O_s_segment)` broadcast over the group's rows.
pub fn merge_outputs<'g>(
    o_g: &Var<'g>,
    o_s_segment: &Var<'g>,
    alpha: &Var<'g>,
    beta: &Var<'g>,
    pooling: Pooling,
) -> Result<Var<'g>> {
    if o_g.cols() != o_s_segment.cols() {
        return Err(Error::dim("merge_outputs", &o_g.shape(), &o_s_segment.shape()));
    }
    let pooled = match pooling {
        Pooling::Mean => o_s_segment.mean_rows()?,
        Pooling::Sum => o_s_segment.mean_rows()?.scale(o_s_segment.rows() as f64)?,
    };
    o_g.scale_by(alpha)?.add(&pooled.scale_by(beta)?)
}

/// Score elements per head for one forward over `l` rows.
pub fn gsa_op_count(l: usize, l_g: usize, l_s: usize, global_path: bool) -> u64 {
    let m = l.div_ceil(l_g) as u64;
    let local = m * (l_g * l_g) as u64;
    if global_path {
        let s = m * l_s as u64;
        local + s * s
    } else {
        local
    }
}

impl GsaLayer {
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        prefix: &str,
        cfg: GsaConfig,
        rng: &mut R,
    ) -> Result<Self> {
        cfg.validate()?;
        let proj = Projections::new(store, prefix, cfg.d, rng);
        let e_scale = 1.0 / (cfg.l_g as f64).sqrt();
        let e_shape = [cfg.l_s, cfg.l_g];
        let e_q = store.add(format!("{prefix}.e_q"), Tensor::uniform(&e_shape, e_scale, rng));
        let e_k = store.add(format!("{prefix}.e_k"), Tensor::uniform(&e_shape, e_scale, rng));
        let e_v = store.add(format!("{prefix}.e_v"), Tensor::uniform(&e_shape, e_scale, rng));
        let n = match cfg.merge {
            MergeScalars::PerGroup => cfg.m_max,
            MergeScalars::PerLayer => 1,
        };
        let alpha = store.add(format!("{prefix}.alpha"), Tensor::ones(&[1, n]));
        let beta = store.add(format!("{prefix}.beta"), Tensor::zeros(&[1, n]));
        Ok(Self {
            cfg,
            params: GsaLayerParams {
                proj,
                e_q,
                e_k,
                e_v,
                alpha,
                beta,
            },
        })
    }

    /// Score elements this layer adds to the counter for an `l`-row input, all heads.
    pub fn op_count(&self, l: usize) -> u64 {
        self.cfg.heads as u64 * gsa_op_count(l, self.cfg.l_g, self.cfg.l_s, self.cfg.global_active())
    }

    pub fn forward<'g>(
        &self,
        g: &'g Graph,
        store: &ParamStore,
        x: &Var<'g>,
        counter: &mut OpCounter,
    ) -> Result<Var<'g>> {
        let l = x.rows();
        if l > self.cfg.max_len() {
            return Err(Error::Length(format!(
                "sequence of {l} rows exceeds the configured maximum {} (m_max={} groups of {})",
                self.cfg.max_len(),
                self.cfg.m_max,
                self.cfg.l_g
            )));
        }
        let p = &self.params;
        let q = p.proj.q.forward(g, store, x)?;
        let k = p.proj.k.forward(g, store, x)?;
        let v = p.proj.v.forward(g, store, x)?;
        let out = per_head(&q, &k, &v, self.cfg.heads, |qh, kh, vh| {
            self.attend_head(g, store, qh, kh, vh, counter)
        })?;
        p.proj.o.forward(g, store, &out)
    }

    fn attend_head<'g>(
        &self,
        g: &'g Graph,
        store: &ParamStore,
        q: &Var<'g>,
        k: &Var<'g>,
        v: &Var<'g>,
        counter: &mut OpCounter,
    ) -> Result<Var<'g>> {
        let cfg = &self.cfg;
        let l = q.rows();
        let m = l.div_ceil(cfg.l_g);

        let mut groups = Vec::with_capacity(m);
        let mut local = Vec::with_capacity(m);
        for j in 0..m {
            let start = j * cfg.l_g;
            let end = (start + cfg.l_g).min(l);
            let valid = end - start;
            // Pad rows are appended after projection, so they are exactly zero
            // regardless of the projection bias.
            let qg = q.slice_rows(start, end)?.pad_rows(cfg.l_g)?;
            let kg = k.slice_rows(start, end)?.pad_rows(cfg.l_g)?;
            let vg = v.slice_rows(start, end)?.pad_rows(cfg.l_g)?;
            let mask = match (cfg.causal, valid == cfg.l_g) {
                (false, true) => AttentionMask::None,
                (false, false) => AttentionMask::KeyPadding(valid),
                (true, true) => AttentionMask::Causal,
                (true, false) => AttentionMask::CausalKeyPadding(valid),
            };
            local.push(scaled_dot_attention(&qg, &kg, &vg, &mask, counter)?);
            groups.push((qg, kg, vg));
        }

        let merged = if cfg.global_active() {
            let e = (
                g.param(store, self.params.e_q),
                g.param(store, self.params.e_k),
                g.param(store, self.params.e_v),
            );
            let mut qs = Vec::with_capacity(m);
            let mut ks = Vec::with_capacity(m);
            let mut vs = Vec::with_capacity(m);
            for (qg, kg, vg) in &groups {
                let (a, b, c) = summarize_group((qg, kg, vg), (&e.0, &e.1, &e.2))?;
                qs.push(a);
                ks.push(b);
                vs.push(c);
            }
            let o_s = global_summary_attention(
                &Var::concat_rows(&qs)?,
                &Var::concat_rows(&ks)?,
                &Var::concat_rows(&vs)?,
                cfg.l_s,
                counter,
            )?;
            let alpha = g.param(store, self.params.alpha);
            let beta = g.param(store, self.params.beta);
            local
                .iter()
                .enumerate()
                .map(|(j, o_g)| {
                    let seg = o_s.slice_rows(j * cfg.l_s, (j + 1) * cfg.l_s)?;
                    let idx = match cfg.merge {
                        MergeScalars::PerGroup => j,
                        MergeScalars::PerLayer => 0,
                    };
                    merge_outputs(o_g, &seg, &alpha.select(idx)?, &beta.select(idx)?, cfg.pooling)
                })
                .collect::<Result<Vec<_>>>()?
        } else {
            local
        };

        let joined = Var::concat_rows(&merged)?;
        if joined.rows() == l {
            Ok(joined)
        } else {
            joined.slice_rows(0, l)
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn partition_counts() {
        for (l, m, pad) in [(128, 2, 0), (100, 2, 28), (64, 1, 0)] {
            let x = Tensor::ones(&[l, 3]);
            let p = partition_groups(&x, 64).unwrap();
            assert_eq!((p.m, p.pad), (m, pad), "l={l}");
        }
        assert!(partition_groups(&Tensor::ones(&[4, 2]), 0).is_err());
    }

    #[test]
    fn partition_round_trips_and_zero_pads() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let x = Tensor::uniform(&[10, 3], 1.0, &mut rng);
        let p = partition_groups(&x, 4).unwrap();
        assert_eq!(p.groups.len(), 3);
        assert!(p.groups[2].row(2).iter().all(|&v| v == 0.0));
        assert!(p.groups[2].row(3).iter().all(|&v| v == 0.0));
        let refs: Vec<&Tensor> = p.groups.iter().collect();
        let joined = crate::tensor::concat_rows(&refs).unwrap().slice_rows(0, 10).unwrap();
        assert_eq!(joined, x);
    }

    #[test]
    fn op_count_examples() {
        assert_eq!(gsa_op_count(512, 64, 4, true), 33792);
        assert_eq!(gsa_op_count(64, 64, 4, true), 4112);
        assert_eq!(gsa_op_count(512, 64, 4, false), 32768);
        assert_eq!(gsa_op_count(100, 64, 4, true), 2 * 4096 + 64);
    }

    #[test]
    fn config_validation() {
        let cfg = GsaConfig::new(8, 2, 64).with_groups(4, 4, 64);
        assert!(cfg.validate().is_err());
        let cfg = GsaConfig::new(9, 2, 64).with_groups(8, 2, 64);
        assert!(cfg.validate().is_err());
        let cfg = GsaConfig::new(8, 2, 64).with_groups(8, 2, 64);
        assert!(cfg.validate().is_ok());
    }

    #[test]
    fn causal_disables_global_path() {
        let mut cfg = GsaConfig::new(8, 1, 64);
        cfg.causal = true;
        assert!(!cfg.global_active());
        cfg.leaky_causal_global = true;
        assert!(cfg.global_active());
    }

    fn setup(l: usize) -> (ParamStore, GsaLayer, Tensor) {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let mut store = ParamStore::new();
        let cfg = GsaConfig::new(6, 2, l).with_groups(4, 2, l);
        let layer = GsaLayer::new(&mut store, "gsa", cfg, &mut rng).unwrap();
        let x = Tensor::uniform(&[l, 6], 1.0, &mut rng);
        (store, layer, x)
    }

    #[test]
    fn rejects_sequences_past_m_max() {
        let (store, layer, _) = setup(8);
        let g = Graph::new();
        let x = g.constant(Tensor::ones(&[9, 6]));
        let err = layer.forward(&g, &store, &x, &mut OpCounter::new()).unwrap_err();
        assert!(matches!(err, Error::Length(_)));
    }

    #[test]
    fn merge_scalar_per_layer_has_one_entry() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let mut store = ParamStore::new();
        let mut cfg = GsaConfig::new(6, 2, 16).with_groups(4, 2, 16);
        cfg.merge = MergeScalars::PerLayer;
        let layer = GsaLayer::new(&mut store, "gsa", cfg, &mut rng).unwrap();
        assert_eq!(store.value(layer.params.alpha).numel(), 1);
    }

    #[test]
    fn counter_matches_layer_op_count() {
        let (store, layer, x) = setup(10);
        let g = Graph::new();
        let mut c = OpCounter::new();
        layer.forward(&g, &store, &g.constant(x), &mut c).unwrap();
        assert_eq!(c.score_elements, layer.op_count(10));
        assert_eq!(c.score_elements, 2 * (3 * 16 + 36));
        assert_eq!(c.peak_score_buffer, 36);
    }
}
