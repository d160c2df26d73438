//! Minibatch training of a [`Model`] with the metric-learning loss.

use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::dataset::{Image, SplitData};
use crate::error::{Error, Result};
use crate::metric::{build_negative_sets, metric_loss, Kernel, LossConfig};
use crate::model::Model;
use crate::retrieval::{model_ranks, query_inputs, recall_from_ranks, EvalConfig};
use crate::tensor::{Graph, Sgd};

/// Embedding norm at which training is declared divergent.
pub const DIVERGENCE_LIMIT: f64 = 1e3;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub iterations: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub momentum: f64,
    /// Candidates per softmax term (positive included).
    pub k: usize,
    /// Candidate sets per anchor; derived from `k` when absent.
    pub m: Option<usize>,
    pub kernel: Kernel,
    pub seed: u64,
    /// Iterations between log records.
    pub eval_every: usize,
    /// Queries of the evaluation split used for the logged R@1.
    pub eval_queries: Option<usize>,
    /// Queries used for the logged identity contribution.
    pub identity_queries: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            iterations: 3000,
            batch_size: 16,
            learning_rate: 0.01,
            momentum: 0.0,
            k: 2,
            m: None,
            kernel: Kernel::Dot,
            seed: 0,
            eval_every: 500,
            eval_queries: None,
            identity_queries: 200,
        }
    }
}

impl TrainConfig {
    pub fn loss_config(&self) -> Result<LossConfig> {
        match self.m {
            Some(m) => LossConfig::with_m(self.batch_size, self.k, m, self.kernel),
            None => LossConfig::new(self.batch_size, self.k, self.kernel),
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.loss_config().map_err(|e| Error::Config(e.to_string()))?;
        if self.batch_size < 2 {
            return Err(Error::Config("batch_size must be at least 2".into()));
        }
        if !(self.learning_rate.is_finite() && self.learning_rate >= 0.0) {
            return Err(Error::Config(format!("learning_rate {} must be finite and >= 0", self.learning_rate)));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(Error::Config(format!("momentum {} must lie in [0, 1)", self.momentum)));
        }
        if self.eval_every == 0 {
            return Err(Error::Config("eval_every must be positive".into()));
        }
        Ok(())
    }
}

/// One line of the training log.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainRecord {
    pub iter: usize,
    /// Mean batch loss since the previous record (the first batch at 0).
    pub loss: Option<f64>,
    pub r1: Option<f64>,
    pub identity_contribution: Option<f64>,
}

/// Runs SGD on `model` and returns the log records. `eval` provides the
/// split used for logged R@1 and identity contribution; each record is
/// also passed to `on_record` as soon as it is produced.
pub fn train(
    model: &mut Model,
    cfg: &TrainConfig,
    data: &SplitData,
    eval: Option<&SplitData>,
    mut on_record: impl FnMut(&TrainRecord) -> Result<()>,
) -> Result<Vec<TrainRecord>> {
    cfg.validate()?;
    let loss_cfg = cfg.loss_config()?;
    let n_queries = data.queries().len();
    if n_queries < cfg.batch_size {
        return Err(Error::Config(format!(
            "batch_size {} exceeds the {n_queries} training queries",
            cfg.batch_size
        )));
    }
    let tokens: Vec<Vec<usize>> = data.queries().iter().map(|q| model.tokenize(&q.text)).collect();
    if let Some(i) = tokens.iter().position(Vec::is_empty) {
        return Err(Error::Data(format!("training query {i} has an empty text")));
    }
    let mut batch_rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    batch_rng.set_stream(1);
    let mut dropout_rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    dropout_rng.set_stream(2);
    // K = 2 sets are deterministic, so they are built once.
    let fixed_sets = (loss_cfg.k == 2).then(|| build_negative_sets(cfg.batch_size, 2, loss_cfg.m, 0)).transpose()?;
    let mut sgd = Sgd::new(cfg.learning_rate, cfg.momentum)?;
    let mut records = Vec::new();
    let mut emit = |model: &Model, iter: usize, loss: Option<f64>| -> Result<()> {
        let rec = log_record(model, cfg, data, eval, iter, loss)?;
        on_record(&rec)?;
        records.push(rec);
        Ok(())
    };
    if cfg.iterations == 0 {
        emit(model, 0, None)?;
    }
    let mut window = Vec::with_capacity(cfg.eval_every);
    for it in 0..cfg.iterations {
        let batch = sample(&mut batch_rng, n_queries, cfg.batch_size).into_vec();
        let sets = match &fixed_sets {
            Some(s) => s.clone(),
            None => build_negative_sets(cfg.batch_size, loss_cfg.k, loss_cfg.m, batch_rng.gen())?,
        };
        let refs: Vec<&Image> = batch.iter().map(|&i| data.reference(i)).collect();
        let tgts: Vec<&Image> = batch.iter().map(|&i| data.target(i)).collect();
        let toks: Vec<Vec<usize>> = batch.iter().map(|&i| tokens[i].clone()).collect();

        let mut g = Graph::new();
        let x = g.constant(model.image.batch_tensor(&refs)?);
        let y = g.constant(model.image.batch_tensor(&tgts)?);
        let q = model.query_embedding(&mut g, x, &toks, Some(&mut dropout_rng))?;
        let t = model.target_embedding(&mut g, y)?;
        let t_val = g.value(t);
        let norm = (0..cfg.batch_size)
            .map(|i| t_val.row(i).iter().map(|v| v * v).sum::<f64>().sqrt())
            .fold(0.0, f64::max);
        if !(norm < DIVERGENCE_LIMIT) {
            return Err(Error::Diverged { iteration: it, norm });
        }
        let loss = metric_loss(&mut g, q, t, &sets, cfg.kernel)?;
        let value = g.value(loss).item()?;
        if !value.is_finite() {
            return Err(Error::NonFinite {
                iteration: it,
                batch,
            });
        }
        g.backward(loss)?;
        model.store.accumulate_grads(&g)?;
        if it == 0 {
            emit(model, 0, Some(value))?;
        }
        sgd.step(&mut model.store)?;
        window.push(value);
        let done = it + 1;
        if done % cfg.eval_every == 0 || done == cfg.iterations {
            let mean = window.iter().sum::<f64>() / window.len() as f64;
            window.clear();
            emit(model, done, Some(mean))?;
        }
    }
    Ok(records)
}

fn log_record(
    model: &Model,
    cfg: &TrainConfig,
    data: &SplitData,
    eval: Option<&SplitData>,
    iter: usize,
    loss: Option<f64>,
) -> Result<TrainRecord> {
    let r1 = match eval {
        Some(split) => {
            let ecfg = EvalConfig {
                ks: vec![1],
                max_queries: cfg.eval_queries,
                ..Default::default()
            };
            let (ranks, _, _) = model_ranks(model, split, cfg.kernel, &ecfg)?;
            Some(recall_from_ranks(&ranks, 1))
        }
        None => None,
    };
    let probe = eval.unwrap_or(data);
    let n = cfg.identity_queries.min(probe.queries().len());
    let identity_contribution = if n == 0 {
        None
    } else {
        model.identity_contribution(&query_inputs(probe, n))?.map(|ic| ic.mean)
    };
    Ok(TrainRecord {
        iter,
        loss,
        r1,
        identity_contribution,
    })
}

/// Mean and sample standard deviation.
pub fn mean_std(values: &[f64]) -> (f64, f64) {
    let n = values.len() as f64;
    if values.is_empty() {
        return (f64::NAN, f64::NAN);
    }
    let mean = values.iter().sum::<f64>() / n;
    if values.len() < 2 {
        return (mean, 0.0);
    }
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0);
    (mean, var.sqrt())
}
