//! Canonical scaled dot-product attention, row softmax with masking, and the
//! score-element counter every attention variant reports into.

use crate::autodiff::Var;
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Which score entries a query row may attend to.
#[derive(Clone, Debug, PartialEq, Eq, Default)]
pub enum AttentionMask {
    #[default]
    None,
    /// Query `i` sees keys `j <= i`.
    Causal,
    /// Only the first `n` keys are real; the rest are padding.
    KeyPadding(usize),
    CausalKeyPadding(usize),
    /// Row-major `rows × cols` matrix, `true` = allowed.
    Custom {
        rows: usize,
        cols: usize,
        allowed: Vec<bool>,
    },
}

impl AttentionMask {
    #[inline]
    pub fn allows(&self, i: usize, j: usize) -> bool {
        match self {
            AttentionMask::None => true,
            AttentionMask::Causal => j <= i,
            AttentionMask::KeyPadding(n) => j < *n,
            AttentionMask::CausalKeyPadding(n) => j <= i && j < *n,
            AttentionMask::Custom { cols, allowed, .. } => allowed[i * cols + j],
        }
    }

    fn check_shape(&self, rows: usize, cols: usize) -> Result<()> {
        if let AttentionMask::Custom {
            rows: mr, cols: mc, ..
        } = self
        {
            if (*mr, *mc) != (rows, cols) {
                return Err(Error::dim("attention mask", &[*mr, *mc], &[rows, cols]));
            }
        }
        Ok(())
    }
}

/// Score-element instrumentation. One element is one query-key dot product.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct OpCounter {
    pub score_elements: u64,
    /// Largest single score matrix materialized so far.
    pub peak_score_buffer: u64,
}

impl OpCounter {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn record(&mut self, queries: usize, keys: usize) {
        let n = (queries * keys) as u64;
        self.score_elements += n;
        self.peak_score_buffer = self.peak_score_buffer.max(n);
    }

    pub fn reset(&mut self) {
        *self = Self::default();
    }
}

/// Numerically stable row softmax. Masked entries are exactly zero and a
/// row with no allowed entry comes out all-zero.
pub fn softmax_rows(scores: &Tensor, mask: &AttentionMask) -> Result<Tensor> {
    let (r, c) = scores.dims2("row_softmax")?;
    mask.check_shape(r, c)?;
    if !scores.is_finite() {
        return Err(Error::NonFinite {
            op: "row_softmax",
            index: scores.data().iter().position(|v| !v.is_finite()).unwrap_or(0),
        });
    }
    let mut out = vec![0.0; r * c];
    for i in 0..r {
        let row = scores.row(i);
        let o = &mut out[i * c..(i + 1) * c];
        let max = (0..c)
            .filter(|&j| mask.allows(i, j))
            .map(|j| row[j])
            .fold(f64::NEG_INFINITY, f64::max);
        if max == f64::NEG_INFINITY {
            continue;
        }
        let mut total = 0.0;
        for j in 0..c {
            if mask.allows(i, j) {
                let e = (row[j] - max).exp();
                o[j] = e;
                total += e;
            }
        }
        let inv = 1.0 / total;
        o.iter_mut().for_each(|v| *v *= inv);
    }
    Ok(Tensor::from_parts(r, c, out))
}

/// Plain-tensor alias of [`softmax_rows`].
pub fn row_softmax(scores: &Tensor, mask: &AttentionMask) -> Result<Tensor> {
    softmax_rows(scores, mask)
}

/// `softmax(Q·Kᵀ / √d) · V`, differentiable, counted into `counter`.
pub fn scaled_dot_attention<'g>(
    q: &Var<'g>,
    k: &Var<'g>,
    v: &Var<'g>,
    mask: &AttentionMask,
    counter: &mut OpCounter,
) -> Result<Var<'g>> {
    let (lq, d) = (q.rows(), q.cols());
    let (lk, dk) = (k.rows(), k.cols());
    let lv = v.rows();
    if d != dk {
        return Err(Error::dim("scaled_dot_attention", &q.shape(), &k.shape()));
    }
    if lk != lv {
        return Err(Error::dim("scaled_dot_attention", &k.shape(), &v.shape()));
    }
    let scores = q.matmul_nt(k)?.scale(1.0 / (d as f64).sqrt())?;
    counter.record(lq, lk);
    let weights = scores.softmax(mask)?;
    weights.matmul(v)
}

/// Runs `kernel` on `heads` contiguous column slabs and concatenates the results.
pub fn per_head<'g>(
    q: &Var<'g>,
    k: &Var<'g>,
    v: &Var<'g>,
    heads: usize,
    mut kernel: impl FnMut(&Var<'g>, &Var<'g>, &Var<'g>) -> Result<Var<'g>>,
) -> Result<Var<'g>> {
    let d = q.cols();
    if heads == 0 || d % heads != 0 {
        return Err(Error::Config(format!(
            "model dim {d} not divisible by {heads} heads"
        )));
    }
    if heads == 1 {
        return kernel(q, k, v);
    }
    let dh = d / heads;
    let outs = (0..heads)
        .map(|h| {
            let (s, e) = (h * dh, (h + 1) * dh);
            kernel(&q.slice_cols(s, e)?, &k.slice_cols(s, e)?, &v.slice_cols(s, e)?)
        })
        .collect::<Result<Vec<_>>>()?;
    Var::concat_cols(&outs)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::Graph;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn naive_attention(q: &Tensor, k: &Tensor, v: &Tensor, scale: bool) -> Tensor {
        let d = q.cols();
        let s = if scale { (d as f64).sqrt() } else { 1.0 };
        let mut out = Tensor::zeros(&[q.rows(), v.cols()]);
        for i in 0..q.rows() {
            let scores: Vec<f64> = (0..k.rows())
                .map(|j| (0..d).map(|c| q.get(i, c) * k.get(j, c)).sum::<f64>() / s)
                .collect();
            let m = scores.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let exps: Vec<f64> = scores.iter().map(|x| (x - m).exp()).collect();
            let z: f64 = exps.iter().sum();
            for c in 0..v.cols() {
                let acc: f64 = (0..k.rows()).map(|j| exps[j] / z * v.get(j, c)).sum();
                out.set(i, c, acc);
            }
        }
        out
    }

    fn attend(q: &Tensor, k: &Tensor, v: &Tensor, counter: &mut OpCounter) -> Tensor {
        let g = Graph::new();
        let out = scaled_dot_attention(
            &g.constant(q.clone()),
            &g.constant(k.clone()),
            &g.constant(v.clone()),
            &AttentionMask::None,
            counter,
        )
        .unwrap();
        out.value().as_ref().clone()
    }

    #[test]
    fn softmax_examples() {
        let s = Tensor::zeros(&[1, 4]);
        assert_eq!(softmax_rows(&s, &AttentionMask::None).unwrap().data(), &[0.25; 4]);

        let s = Tensor::new(&[1, 2], vec![2f64.ln(), 0.0]).unwrap();
        let p = softmax_rows(&s, &AttentionMask::None).unwrap();
        assert!((p.data()[0] - 2.0 / 3.0).abs() < 1e-15);
        assert!((p.data()[1] - 1.0 / 3.0).abs() < 1e-15);

        let s = Tensor::new(&[1, 2], vec![5.0, 3.0]).unwrap();
        let p = softmax_rows(&s, &AttentionMask::KeyPadding(1)).unwrap();
        assert_eq!(p.data(), &[1.0, 0.0]);
    }

    #[test]
    fn fully_masked_row_is_zero() {
        let s = Tensor::new(&[2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        let mask = AttentionMask::Custom {
            rows: 2,
            cols: 2,
            allowed: vec![false, false, true, false],
        };
        let p = softmax_rows(&s, &mask).unwrap();
        assert_eq!(p.data(), &[0.0, 0.0, 1.0, 0.0]);
        let bad = AttentionMask::Custom {
            rows: 1,
            cols: 2,
            allowed: vec![true, true],
        };
        assert!(softmax_rows(&s, &bad).is_err());
    }

    #[test]
    fn causal_mask_zeroes_future() {
        let s = Tensor::ones(&[3, 3]);
        let p = softmax_rows(&s, &AttentionMask::Causal).unwrap();
        assert_eq!(p.row(0), &[1.0, 0.0, 0.0]);
        assert_eq!(p.row(1), &[0.5, 0.5, 0.0]);
    }

    #[test]
    fn single_key_returns_value() {
        let mut c = OpCounter::new();
        let v = Tensor::new(&[1, 3], vec![1.0, -2.0, 0.5]).unwrap();
        let out = attend(&Tensor::ones(&[1, 3]), &Tensor::ones(&[1, 3]), &v, &mut c);
        assert_eq!(out, v);
    }

    #[test]
    fn uniform_weights_give_mean() {
        let mut c = OpCounter::new();
        let out = attend(
            &Tensor::zeros(&[1, 1]),
            &Tensor::zeros(&[2, 1]),
            &Tensor::new(&[2, 1], vec![1.0, 3.0]).unwrap(),
            &mut c,
        );
        assert_eq!(out.data(), &[2.0]);
        assert_eq!(c.score_elements, 2);
    }

    #[test]
    fn matches_naive_loop_and_scales_by_sqrt_d() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let q = Tensor::uniform(&[4, 8], 1.5, &mut rng);
        let k = Tensor::uniform(&[4, 8], 1.5, &mut rng);
        let v = Tensor::uniform(&[4, 8], 1.5, &mut rng);
        let mut c = OpCounter::new();
        let got = attend(&q, &k, &v, &mut c);
        assert!(got.max_abs_diff(&naive_attention(&q, &k, &v, true)) < 1e-12);
        assert!(got.max_abs_diff(&naive_attention(&q, &k, &v, false)) > 1e-3);
        assert_eq!(c.score_elements, 16);
    }

    #[test]
    fn canonical_count_is_l_squared() {
        let mut c = OpCounter::new();
        let x = Tensor::zeros(&[37, 4]);
        attend(&x, &x, &x, &mut c);
        assert_eq!(c.score_elements, 37 * 37);
        assert_eq!(c.peak_score_buffer, 37 * 37);
    }

    #[test]
    fn dimension_errors() {
        let g = Graph::new();
        let mut c = OpCounter::new();
        let q = g.constant(Tensor::zeros(&[2, 4]));
        let k = g.constant(Tensor::zeros(&[3, 4]));
        let v_bad_len = g.constant(Tensor::zeros(&[2, 4]));
        let k_bad_d = g.constant(Tensor::zeros(&[3, 5]));
        let none = AttentionMask::None;
        assert!(scaled_dot_attention(&q, &k, &v_bad_len, &none, &mut c).is_err());
        assert!(scaled_dot_attention(&q, &k_bad_d, &k_bad_d, &none, &mut c).is_err());
    }
}
