//! Central-difference gradient verification.

use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::attention::OpCounter;
use crate::autodiff::{Graph, Var};
use crate::data::{make_windows, synthetic_series, SplitRatios, SynthKind, Window};
use crate::error::{Error, Result};
use crate::model::{ForecasterModel, ModelConfig};
use crate::params::ParamStore;
use crate::train::mse_loss;

/// A scalar function of the tensors in a parameter store.
pub trait Objective {
    fn params(&self) -> &ParamStore;
    fn params_mut(&mut self) -> &mut ParamStore;
    fn loss<'g>(&self, g: &'g Graph) -> Result<Var<'g>>;
}

#[derive(Clone, Debug, PartialEq)]
pub struct GradCheckConfig {
    pub epsilon: f64,
    pub tolerance: f64,
    pub max_coords_per_tensor: usize,
    pub seed: u64,
}

impl Default for GradCheckConfig {
    fn default() -> Self {
        Self {
            epsilon: 1e-6,
            tolerance: 1e-5,
            max_coords_per_tensor: 32,
            seed: 0,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TensorCheck {
    pub name: String,
    pub coords_checked: usize,
    pub max_rel_error: f64,
    /// Flat index, analytic and numeric gradient at the worst coordinate.
    pub worst: (usize, f64, f64),
}

#[derive(Clone, Debug, PartialEq)]
pub struct GradCheckReport {
    pub tolerance: f64,
    pub tensors: Vec<TensorCheck>,
}

impl GradCheckReport {
    pub fn max_rel_error(&self) -> f64 {
        self.tensors.iter().map(|t| t.max_rel_error).fold(0.0, f64::max)
    }

    pub fn passed(&self) -> bool {
        self.failures().next().is_none()
    }

    pub fn failures(&self) -> impl Iterator<Item = &TensorCheck> {
        self.tensors.iter().filter(|t| !(t.max_rel_error < self.tolerance))
    }

    pub fn to_csv(&self) -> String {
        let mut s = String::from("tensor,coords_checked,max_rel_error,worst_index,analytic,numeric,pass\n");
        for t in &self.tensors {
            s.push_str(&format!(
                "{},{},{:e},{},{:e},{:e},{}\n",
                t.name,
                t.coords_checked,
                t.max_rel_error,
                t.worst.0,
                t.worst.1,
                t.worst.2,
                t.max_rel_error < self.tolerance
            ));
        }
        s
    }
}

pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-8)
}

fn eval_loss<O: Objective + ?Sized>(obj: &O) -> Result<f64> {
    let g = Graph::new();
    Ok(obj.loss(&g)?.value().item())
}

/// Compares reverse-mode gradients with `(L(θ+ε) − L(θ−ε)) / 2ε` on up to
/// `max_coords_per_tensor` sampled coordinates of every parameter tensor.
pub fn grad_check<O: Objective + ?Sized>(obj: &mut O, cfg: &GradCheckConfig) -> Result<GradCheckReport> {
    if !(cfg.epsilon > 0.0) || cfg.max_coords_per_tensor == 0 {
        return Err(Error::Config("epsilon and max_coords_per_tensor must be positive".into()));
    }
    obj.params_mut().zero_grads();
    {
        let g = Graph::new();
        let loss = obj.loss(&g)?;
        g.backward(loss)?;
        g.accumulate_into(obj.params_mut());
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let ids: Vec<_> = obj.params().ids().collect();
    let mut tensors = Vec::with_capacity(ids.len());
    for id in ids {
        let (name, numel) = {
            let p = obj.params().get(id);
            (p.name.clone(), p.value.numel())
        };
        let coords: Vec<usize> = if numel <= cfg.max_coords_per_tensor {
            (0..numel).collect()
        } else {
            let mut c = sample(&mut rng, numel, cfg.max_coords_per_tensor).into_vec();
            c.sort_unstable();
            c
        };
        let mut check = TensorCheck {
            name,
            coords_checked: coords.len(),
            max_rel_error: 0.0,
            worst: (0, 0.0, 0.0),
        };
        for i in coords {
            let analytic = obj.params().get(id).grad.data()[i];
            let original = obj.params().get(id).value.data()[i];
            obj.params_mut().get_mut(id).value.data_mut()[i] = original + cfg.epsilon;
            let plus = eval_loss(obj);
            obj.params_mut().get_mut(id).value.data_mut()[i] = original - cfg.epsilon;
            let minus = eval_loss(obj);
            obj.params_mut().get_mut(id).value.data_mut()[i] = original;
            let numeric = (plus? - minus?) / (2.0 * cfg.epsilon);
            let err = relative_error(analytic, numeric);
            if !(err <= check.max_rel_error) {
                check.max_rel_error = err;
                check.worst = (i, analytic, numeric);
            }
        }
        tensors.push(check);
    }
    Ok(GradCheckReport {
        tolerance: cfg.tolerance,
        tensors,
    })
}

/// MSE of a forecaster on a single window.
#[derive(Clone, Debug)]
pub struct ModelObjective {
    pub model: ForecasterModel,
    pub window: Window,
}

impl Objective for ModelObjective {
    fn params(&self) -> &ParamStore {
        &self.model.params
    }

    fn params_mut(&mut self) -> &mut ParamStore {
        &mut self.model.params
    }

    fn loss<'g>(&self, g: &'g Graph) -> Result<Var<'g>> {
        let pred = self.model.forward(g, &self.window.input, &mut OpCounter::new())?;
        mse_loss(&pred, &g.constant(self.window.target.clone()))
    }
}

pub fn tiny_config() -> ModelConfig {
    ModelConfig {
        d: 16,
        heads: 2,
        e_l: 1,
        d_l: 1,
        l_g: 8,
        l_s: 2,
        l_comp: 16,
        seq_len: 24,
        label_len: 12,
        pred_len: 8,
        n_features_in: 2,
        n_features_out: 2,
        ffn_hidden: 16,
        ..ModelConfig::default()
    }
}

/// Tiny forecaster on one sine-mix window. Merge scalars and norm
/// parameters are moved off their initial values so every path carries
/// gradient.
pub fn tiny_preset(seed: u64) -> Result<ModelObjective> {
    let cfg = tiny_config();
    let mut model = ForecasterModel::new(cfg.clone(), seed)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed);
    for p in model.params.iter_mut() {
        let jitter = if p.name.ends_with(".alpha") || p.name.ends_with(".beta") || p.name.contains("norm") {
            0.3
        } else {
            continue;
        };
        for v in p.value.data_mut() {
            *v += rng.gen_range(-jitter..jitter) + if p.name.ends_with(".beta") { 0.5 } else { 0.0 };
        }
    }
    let series = synthetic_series(SynthKind::SineMix, cfg.seq_len + cfg.pred_len + 16, cfg.n_features_in, seed)?;
    let (train, ..) = make_windows(&series, cfg.seq_len, cfg.pred_len, SplitRatios::train_only(), 1)?;
    let window = train.windows[rng.gen_range(0..train.len())].clone();
    Ok(ModelObjective { model, window })
}
