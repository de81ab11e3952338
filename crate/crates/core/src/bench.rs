//! Sequence-length scaling sweep: instrumented score-element counts, peak
//! score buffer, and wall-clock time per forward+backward iteration.

use std::fmt;
use std::path::Path;
use std::str::FromStr;
use std::time::{Duration, Instant};

use log::{info, warn};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::attention::OpCounter;
use crate::autodiff::Graph;
use crate::error::{Error, Result};
use crate::gsa::gsa_op_count;
use crate::model::{ForecasterModel, Mechanism, ModelConfig};
use crate::tensor::Tensor;
use crate::train::mse_loss;

pub const CSV_HEADER: [&str; 6] = [
    "mechanism",
    "seq_len",
    "score_elements",
    "peak_score_buffer",
    "wall_ms_per_iter",
    "closed_form_elements",
];

/// Written in `wall_ms_per_iter` for cells skipped by the memory budget.
pub const OOM_MARKER: &str = "oom";

pub const DEFAULT_LENGTHS: [usize; 5] = [180, 360, 720, 1440, 2880];

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum BenchMechanism {
    Grouped,
    GroupedLocalOnly,
    Canonical,
}

impl BenchMechanism {
    pub const ALL: [BenchMechanism; 3] = [
        BenchMechanism::Grouped,
        BenchMechanism::GroupedLocalOnly,
        BenchMechanism::Canonical,
    ];

    pub fn name(self) -> &'static str {
        match self {
            BenchMechanism::Grouped => "grouped",
            BenchMechanism::GroupedLocalOnly => "grouped_local_only",
            BenchMechanism::Canonical => "canonical",
        }
    }

    fn configure(self, cfg: &mut ModelConfig) {
        cfg.attention = match self {
            BenchMechanism::Canonical => Mechanism::Canonical,
            _ => Mechanism::Grouped,
        };
        cfg.ablation_local_only = self == BenchMechanism::GroupedLocalOnly;
    }
}

impl fmt::Display for BenchMechanism {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for BenchMechanism {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        BenchMechanism::ALL
            .into_iter()
            .find(|m| m.name() == s)
            .ok_or_else(|| {
                Error::Config(format!(
                    "unknown mechanism `{s}` (expected grouped, grouped_local_only, canonical)"
                ))
            })
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct BenchConfig {
    /// Template; `seq_len`, `pred_len`, `label_len` and the mechanism are set per cell.
    pub model: ModelConfig,
    pub min_time: Duration,
    pub timing: bool,
    /// Cells whose estimated score-buffer footprint exceeds this are skipped.
    pub memory_budget_bytes: u64,
    pub seed: u64,
}

impl Default for BenchConfig {
    fn default() -> Self {
        Self {
            model: ModelConfig {
                d: 256,
                heads: 4,
                ffn_hidden: 256,
                e_l: 3,
                d_l: 3,
                label_len: 0,
                n_features_in: 7,
                n_features_out: 7,
                ..ModelConfig::default()
            },
            min_time: Duration::from_millis(500),
            timing: true,
            memory_budget_bytes: 4 << 30,
            seed: 0,
        }
    }
}

impl BenchConfig {
    fn cell_config(&self, mechanism: BenchMechanism, l: usize) -> ModelConfig {
        let mut cfg = self.model.clone();
        cfg.seq_len = l;
        cfg.pred_len = l;
        cfg.label_len = 0;
        mechanism.configure(&mut cfg);
        cfg
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct BenchRow {
    pub mechanism: BenchMechanism,
    pub seq_len: usize,
    /// `None` when the cell was skipped.
    pub score_elements: Option<u64>,
    pub peak_score_buffer: Option<u64>,
    /// `None` when timing was disabled or the cell was skipped.
    pub wall_ms_per_iter: Option<f64>,
    pub closed_form_elements: u64,
    pub out_of_memory: bool,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct BenchReport {
    pub rows: Vec<BenchRow>,
}

impl BenchReport {
    pub fn sort(&mut self) {
        self.rows.sort_by_key(|r| (r.mechanism, r.seq_len));
    }

    pub fn row(&self, mechanism: BenchMechanism, seq_len: usize) -> Option<&BenchRow> {
        self.rows
            .iter()
            .find(|r| r.mechanism == mechanism && r.seq_len == seq_len)
    }
}

/// Score elements one forward of `cfg` records, from the formulas alone.
pub fn closed_form_elements(cfg: &ModelConfig) -> u64 {
    let h = cfg.heads as u64;
    let l = cfg.seq_len;
    let l_dec = cfg.dec_len();
    let grouped = cfg.attention == Mechanism::Grouped;
    let self_count = |len: usize, global: bool| {
        if grouped {
            gsa_op_count(len, cfg.l_g, cfg.l_s, global)
        } else {
            (len * len) as u64
        }
    };
    let key_len = if grouped && l > cfg.l_comp { cfg.l_comp } else { l };
    let enc = cfg.e_l as u64 * h * self_count(l, !cfg.ablation_local_only);
    let dec = cfg.d_l as u64 * h * (self_count(l_dec, cfg.decoder_leaky_global) + (l_dec * key_len) as u64);
    enc + dec
}

/// Rough bytes held by score matrices across one forward+backward.
fn estimated_score_bytes(cfg: &ModelConfig) -> u64 {
    // scores, softmax output and their gradients, 8 bytes each
    closed_form_elements(cfg).saturating_mul(4 * 8)
}

fn input_for(cfg: &ModelConfig, seed: u64) -> Tensor {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Tensor::uniform(&[cfg.seq_len, cfg.n_features_in], 1.0, &mut rng)
}

fn forward_backward(model: &ForecasterModel, x: &Tensor, target: &Tensor) -> Result<()> {
    let g = Graph::new();
    let pred = model.forward(&g, x, &mut OpCounter::new())?;
    let loss = mse_loss(&pred, &g.constant(target.clone()))?;
    g.backward(loss)
}

pub fn run_cell(mechanism: BenchMechanism, l: usize, cfg: &BenchConfig) -> Result<BenchRow> {
    let mcfg = cfg.cell_config(mechanism, l);
    mcfg.validate()?;
    let closed = closed_form_elements(&mcfg);
    let mut row = BenchRow {
        mechanism,
        seq_len: l,
        score_elements: None,
        peak_score_buffer: None,
        wall_ms_per_iter: None,
        closed_form_elements: closed,
        out_of_memory: false,
    };
    if estimated_score_bytes(&mcfg) > cfg.memory_budget_bytes {
        warn!("{mechanism} at seq_len={l}: estimated score buffers exceed the memory budget, skipping");
        row.out_of_memory = true;
        return Ok(row);
    }

    let model = ForecasterModel::new(mcfg.clone(), cfg.seed)?;
    let x = input_for(&mcfg, cfg.seed);
    let mut counter = OpCounter::new();
    {
        let g = Graph::new();
        model.forward(&g, &x, &mut counter)?;
    }
    row.score_elements = Some(counter.score_elements);
    row.peak_score_buffer = Some(counter.peak_score_buffer);

    if cfg.timing {
        let target = Tensor::zeros(&[mcfg.pred_len, mcfg.n_features_out]);
        forward_backward(&model, &x, &target)?;
        let start = Instant::now();
        let mut iters = 0u32;
        while iters == 0 || start.elapsed() < cfg.min_time {
            forward_backward(&model, &x, &target)?;
            iters += 1;
        }
        row.wall_ms_per_iter = Some(start.elapsed().as_secs_f64() * 1e3 / iters as f64);
    }
    info!(
        "{mechanism} seq_len={l}: score_elements={} peak={} ms/iter={}",
        counter.score_elements,
        counter.peak_score_buffer,
        row.wall_ms_per_iter.map_or("-".into(), |w| format!("{w:.2}"))
    );
    Ok(row)
}

/// Runs every (mechanism, length) cell; rows come back sorted by mechanism, then length.
pub fn run_scaling_benchmark(
    lengths: &[usize],
    mechanisms: &[BenchMechanism],
    cfg: &BenchConfig,
) -> Result<BenchReport> {
    if lengths.is_empty() || mechanisms.is_empty() {
        return Err(Error::Config("benchmark needs at least one length and one mechanism".into()));
    }
    let mut report = BenchReport::default();
    for &m in mechanisms {
        for &l in lengths {
            report.rows.push(run_cell(m, l, cfg)?);
        }
    }
    report.sort();
    Ok(report)
}

fn opt_field<T: ToString>(v: Option<T>) -> String {
    v.map_or(String::new(), |x| x.to_string())
}

pub fn emit_csv_report(report: &BenchReport, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    if report.rows.is_empty() {
        return Err(Error::Data("benchmark report has no rows".into()));
    }
    let mut rows = report.rows.clone();
    rows.sort_by_key(|r| (r.mechanism, r.seq_len));
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(CSV_HEADER)?;
    for r in &rows {
        let wall = if r.out_of_memory {
            OOM_MARKER.to_string()
        } else {
            opt_field(r.wall_ms_per_iter)
        };
        w.write_record([
            r.mechanism.name().to_string(),
            r.seq_len.to_string(),
            opt_field(r.score_elements),
            opt_field(r.peak_score_buffer),
            wall,
            r.closed_form_elements.to_string(),
        ])?;
    }
    w.flush().map_err(|e| Error::io(path, e))?;
    Ok(())
}

pub fn parse_csv_report(path: impl AsRef<Path>) -> Result<BenchReport> {
    let path = path.as_ref();
    let mut r = csv::Reader::from_path(path)?;
    let header: Vec<String> = r.headers()?.iter().map(String::from).collect();
    if header != CSV_HEADER {
        return Err(Error::Format {
            path: path.to_path_buf(),
            msg: format!("unexpected header {header:?}"),
        });
    }
    let mut report = BenchReport::default();
    for (i, rec) in r.records().enumerate() {
        let rec = rec?;
        let line = i + 2;
        let field = |j: usize| rec.get(j).unwrap_or("");
        let bad = |j: usize| Error::Parse {
            path: path.to_path_buf(),
            row: line,
            column: CSV_HEADER[j].to_string(),
            value: field(j).to_string(),
        };
        let opt_u64 = |j: usize| -> Result<Option<u64>> {
            match field(j) {
                "" => Ok(None),
                s => s.parse().map(Some).map_err(|_| bad(j)),
            }
        };
        let out_of_memory = field(4) == OOM_MARKER;
        let wall_ms_per_iter = match field(4) {
            "" | OOM_MARKER => None,
            s => Some(s.parse().map_err(|_| bad(4))?),
        };
        report.rows.push(BenchRow {
            mechanism: field(0).parse().map_err(|_| bad(0))?,
            seq_len: field(1).parse().map_err(|_| bad(1))?,
            score_elements: opt_u64(2)?,
            peak_score_buffer: opt_u64(3)?,
            wall_ms_per_iter,
            closed_form_elements: field(5).parse().map_err(|_| bad(5))?,
            out_of_memory,
        });
    }
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn single_layer() -> BenchConfig {
        let mut cfg = BenchConfig {
            timing: false,
            ..BenchConfig::default()
        };
        cfg.model.d = 8;
        cfg.model.heads = 1;
        cfg.model.e_l = 1;
        cfg.model.d_l = 0;
        cfg.model.ffn_hidden = 8;
        cfg.model.n_features_in = 1;
        cfg.model.n_features_out = 1;
        cfg
    }

    #[test]
    fn single_layer_counts() {
        let cfg = single_layer();
        let report = run_scaling_benchmark(&[1024, 512], &BenchMechanism::ALL, &cfg).unwrap();
        let get = |m, l| report.row(m, l).unwrap().score_elements.unwrap();
        assert_eq!(get(BenchMechanism::Grouped, 512), 33792);
        assert_eq!(get(BenchMechanism::Grouped, 1024), 69632);
        assert_eq!(get(BenchMechanism::GroupedLocalOnly, 512), 32768);
        assert_eq!(get(BenchMechanism::Canonical, 512), 262144);
        assert_eq!(get(BenchMechanism::Canonical, 1024), 1048576);
        for r in &report.rows {
            assert_eq!(r.score_elements, Some(r.closed_form_elements));
        }
        assert_eq!(report.rows[0].seq_len, 512);
        assert_eq!(report.rows[0].mechanism, BenchMechanism::Grouped);
    }

    #[test]
    fn over_budget_cell_is_marked() {
        let mut cfg = single_layer();
        cfg.memory_budget_bytes = 1 << 20;
        let report = run_scaling_benchmark(&[512], &[BenchMechanism::Canonical], &cfg).unwrap();
        let r = &report.rows[0];
        assert!(r.out_of_memory);
        assert_eq!(r.score_elements, None);
        assert_eq!(r.closed_form_elements, 262144);
    }

    #[test]
    fn csv_round_trip_and_empty_report() {
        let report = BenchReport {
            rows: vec![
                BenchRow {
                    mechanism: BenchMechanism::Canonical,
                    seq_len: 360,
                    score_elements: None,
                    peak_score_buffer: None,
                    wall_ms_per_iter: None,
                    closed_form_elements: 129600,
                    out_of_memory: true,
                },
                BenchRow {
                    mechanism: BenchMechanism::Grouped,
                    seq_len: 180,
                    score_elements: Some(13456),
                    peak_score_buffer: Some(4096),
                    wall_ms_per_iter: Some(12.345678901234),
                    closed_form_elements: 13456,
                    out_of_memory: false,
                },
            ],
        };
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("bench.csv");
        emit_csv_report(&report, &path).unwrap();
        let text = std::fs::read_to_string(&path).unwrap();
        assert_eq!(text.lines().count(), 3);
        assert!(text.starts_with(&CSV_HEADER.join(",")));
        let mut expected = report.clone();
        expected.sort();
        assert_eq!(parse_csv_report(&path).unwrap(), expected);

        let empty = dir.path().join("empty.csv");
        assert!(emit_csv_report(&BenchReport::default(), &empty).is_err());
        assert!(!empty.exists());
    }

    #[test]
    fn mechanism_names_parse() {
        for m in BenchMechanism::ALL {
            assert_eq!(m.name().parse::<BenchMechanism>().unwrap(), m);
        }
        assert!("linear".parse::<BenchMechanism>().is_err());
    }
}
