//! Verification suites shared by the `selfcheck` command and the tests:
//! finite-difference gradients for every op and every model pipeline, the
//! algebra between the loss forms, dataset replay closure and the ranking
//! oracle.

use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::composition::{CompositionConfig, LayerMode, Strategy};
use crate::dataset::{build_dataset, DatasetConfig};
use crate::encoders::{ImageEncoderConfig, TextEncoderConfig};
use crate::error::Result;
use crate::metric::{build_negative_sets, metric_loss, soft_triplet_loss, Kernel, NegativeSets};
use crate::model::{Model, ModelConfig};
use crate::retrieval::{recall_from_ranks, target_ranks, EmbeddedDatabase, EvalQuery};
use crate::tensor::{GradCheck, Graph, OpKind, ParamStore, Tensor, Var};

/// Gradient tolerance (max relative error).
pub const GRAD_TOLERANCE: f64 = 1e-4;

fn uniform(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor {
    Tensor::uniform(shape, 1.0, rng)
}

/// Uniform values kept at least `gap` away from zero, so piecewise-linear
/// ops are never probed on their kink.
fn off_zero(shape: &[usize], gap: f64, rng: &mut ChaCha8Rng) -> Tensor {
    let mut t = uniform(shape, rng);
    for v in t.data_mut() {
        *v += gap.copysign(*v);
    }
    t
}

/// Reduces `out` to a scalar through a fixed random weighting, so every
/// output coordinate contributes a distinct gradient.
fn project(g: &mut Graph, out: Var, weights: &Tensor) -> Result<Var> {
    let w = g.constant(weights.clone());
    let y = g.mul(out, w)?;
    Ok(g.sum(y))
}

fn dims(rng: &mut ChaCha8Rng, lo: usize, hi: usize) -> usize {
    rng.gen_range(lo..=hi)
}

/// Worst gradient error of one random instance of `op`.
pub fn check_op_instance(op: OpKind, rng: &mut ChaCha8Rng, checker: &GradCheck) -> Result<f64> {
    let n = dims(rng, 1, 3);
    let d = dims(rng, 1, 4);
    let m = dims(rng, 1, 4);
    let weights_for = |shape: &[usize], rng: &mut ChaCha8Rng| uniform(shape, rng);
    match op {
        OpKind::Matmul => {
            let (a, b) = (uniform(&[n, d], rng), uniform(&[d, m], rng));
            let w = weights_for(&[n, m], rng);
            checker.inputs(&[a, b], |g, v| {
                let y = g.matmul(v[0], v[1])?;
                project(g, y, &w)
            })
        }
        OpKind::Add | OpKind::Sub | OpKind::Mul => {
            let a = uniform(&[n, d, m], rng);
            // Same shape, trailing-suffix broadcast, or a single element.
            let b = match rng.gen_range(0..3) {
                0 => uniform(&[n, d, m], rng),
                1 => uniform(&[d, m], rng),
                _ => uniform(&[1], rng),
            };
            let w = weights_for(&[n, d, m], rng);
            checker.inputs(&[a, b], |g, v| {
                let y = match op {
                    OpKind::Add => g.add(v[0], v[1])?,
                    OpKind::Sub => g.sub(v[0], v[1])?,
                    _ => g.mul(v[0], v[1])?,
                };
                project(g, y, &w)
            })
        }
        OpKind::Relu | OpKind::Sigmoid | OpKind::Tanh => {
            let a = off_zero(&[n, d], 0.05, rng);
            let w = weights_for(&[n, d], rng);
            checker.inputs(&[a], |g, v| {
                let y = match op {
                    OpKind::Relu => g.relu(v[0]),
                    OpKind::Sigmoid => g.sigmoid(v[0]),
                    _ => g.tanh(v[0]),
                };
                project(g, y, &w)
            })
        }
        OpKind::Conv2d => {
            let (h, wd) = (dims(rng, 1, 5), dims(rng, 1, 5));
            let (cin, cout) = (dims(rng, 1, 3), dims(rng, 1, 3));
            let stride = dims(rng, 1, 2);
            let x = uniform(&[n, h, wd, cin], rng);
            let k = uniform(&[3, 3, cin, cout], rng);
            let out = [n, (h - 1) / stride + 1, (wd - 1) / stride + 1, cout];
            let w = weights_for(&out, rng);
            checker.inputs(&[x, k], |g, v| {
                let y = g.conv2d(v[0], v[1], stride)?;
                project(g, y, &w)
            })
        }
        OpKind::BroadcastSpatial => {
            let (h, wd) = (dims(rng, 1, 3), dims(rng, 1, 3));
            let a = uniform(&[n, d], rng);
            let w = weights_for(&[n, h, wd, d], rng);
            checker.inputs(&[a], |g, v| {
                let y = g.broadcast_spatial(v[0], h, wd)?;
                project(g, y, &w)
            })
        }
        OpKind::Concat => {
            let (a, b) = (uniform(&[n, d], rng), uniform(&[n, m], rng));
            let w = weights_for(&[n, d + m], rng);
            checker.inputs(&[a, b], |g, v| {
                let y = g.concat(v[0], v[1])?;
                project(g, y, &w)
            })
        }
        OpKind::Sum | OpKind::Mean | OpKind::L2Norm => {
            let a = uniform(&[n, d], rng);
            let w = weights_for(&[1], rng);
            checker.inputs(&[a], |g, v| {
                let y = match op {
                    OpKind::Sum => g.sum(v[0]),
                    OpKind::Mean => g.mean(v[0]),
                    _ => g.l2_norm(v[0]),
                };
                project(g, y, &w)
            })
        }
        OpKind::AvgPoolSpatial => {
            let (h, wd) = (dims(rng, 1, 4), dims(rng, 1, 4));
            let a = uniform(&[n, h, wd, d], rng);
            let w = weights_for(&[n, d], rng);
            checker.inputs(&[a], |g, v| {
                let y = g.avg_pool_spatial(v[0])?;
                project(g, y, &w)
            })
        }
        OpKind::Gather => {
            let vocab = dims(rng, 2, 6);
            let table = uniform(&[vocab, d], rng);
            let len = dims(rng, 1, 6);
            let idx: Vec<usize> = (0..len).map(|_| rng.gen_range(0..vocab)).collect();
            let w = weights_for(&[len, d], rng);
            checker.inputs(&[table], |g, v| {
                let y = g.gather(v[0], &idx)?;
                project(g, y, &w)
            })
        }
        OpKind::Similarity => {
            let kernel = if rng.gen() { Kernel::Dot } else { Kernel::NegL2 };
            let (a, b) = (uniform(&[n, d], rng), uniform(&[m, d], rng));
            let w = weights_for(&[n, m], rng);
            checker.inputs(&[a, b], |g, v| {
                let y = g.similarity(v[0], v[1], kernel)?;
                project(g, y, &w)
            })
        }
        OpKind::SoftmaxLoss | OpKind::SoftTripletLoss => {
            let b = dims(rng, 2, 5);
            let k = if op == OpKind::SoftTripletLoss { 2 } else { dims(rng, 2, b) };
            let sets = random_sets(b, k, rng)?;
            let scores = uniform(&[b, b], rng);
            let scale = Tensor::scalar(3.0);
            checker.inputs(&[scores], |g, v| {
                let s = g.constant(scale.clone());
                let s = g.mul(v[0], s)?;
                if op == OpKind::SoftmaxLoss {
                    g.softmax_loss(s, &sets)
                } else {
                    g.soft_triplet_loss(s, &sets.triplet_pairs()?)
                }
            })
        }
    }
}

fn random_sets(b: usize, k: usize, rng: &mut ChaCha8Rng) -> Result<NegativeSets> {
    let cfg = crate::metric::LossConfig::new(b, k, Kernel::Dot)?;
    build_negative_sets(b, k, cfg.m, rng.gen())
}

/// Worst error per op over `instances` random instances each.
pub fn check_ops(instances: usize, seed: u64, checker: &GradCheck) -> Result<Vec<(OpKind, f64)>> {
    OpKind::ALL
        .iter()
        .enumerate()
        .map(|(i, &op)| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            rng.set_stream(i as u64);
            let mut worst = 0.0f64;
            for _ in 0..instances {
                worst = worst.max(check_op_instance(op, &mut rng, checker)?);
            }
            Ok((op, worst))
        })
        .collect()
}

/// Every strategy and layer mode the model supports.
pub fn pipelines() -> Vec<(Strategy, LayerMode)> {
    let mut out = Vec::new();
    for s in Strategy::ALL {
        out.push((s, LayerMode::Fc));
        if !matches!(s, Strategy::Concat | Strategy::TextOnly) {
            out.push((s, LayerMode::Conv));
        }
    }
    out
}

/// A model small enough to finite-difference every parameter.
pub fn tiny_model_config(strategy: Strategy, layer_mode: LayerMode) -> ModelConfig {
    ModelConfig {
        image: ImageEncoderConfig {
            canvas_px: 6,
            channels: vec![2, 3],
            embed_dim: 8,
            ..Default::default()
        },
        text: TextEncoderConfig {
            embed_dim: 3,
            hidden_dim: 4,
            ..Default::default()
        },
        composition: CompositionConfig {
            strategy,
            layer_mode,
            hidden_dim: Some(5),
            ..Default::default()
        },
    }
}

/// Gradient error of the full image + text + composition + loss pipeline
/// with respect to every parameter, on one random instance.
pub fn check_pipeline_instance(
    strategy: Strategy,
    layer_mode: LayerMode,
    rng: &mut ChaCha8Rng,
    checker: &GradCheck,
) -> Result<f64> {
    let model = Model::new(tiny_model_config(strategy, layer_mode), rng.gen())?;
    // Random offsets on shifts and biases keep RELU inputs off zero.
    let mut store = model.store.clone();
    for id in model.store.ids() {
        let p = store.get_mut(id);
        if p.name.ends_with(".shift") || p.name.ends_with(".bias") {
            let shape = p.value.shape().to_vec();
            p.value = Tensor::uniform(&shape, 0.2, rng);
        }
    }
    let b = dims(rng, 2, 4);
    let px = model.config.image.canvas_px;
    let refs = uniform(&[b, px, px, 3], rng);
    let tgts = uniform(&[b, px, px, 3], rng);
    let vocab = model.vocab.len();
    let tokens: Vec<Vec<usize>> = (0..b)
        .map(|_| (0..dims(rng, 1, 4)).map(|_| rng.gen_range(0..vocab)).collect())
        .collect();
    let k = if rng.gen() { 2 } else { b };
    let sets = random_sets(b, k, rng)?;
    let kernel = if rng.gen() { Kernel::Dot } else { Kernel::NegL2 };
    checker.params(&store, |g: &mut Graph, s: &ParamStore| {
        let x = g.constant(refs.clone());
        let y = g.constant(tgts.clone());
        let q = model.query_embedding_with::<ChaCha8Rng>(s, g, x, &tokens, None)?;
        let t = model.target_embedding_with(s, g, y)?;
        metric_loss(g, q, t, &sets, kernel)
    })
}

/// Worst error per pipeline over `instances` random instances each.
pub fn check_pipelines(
    instances: usize,
    seed: u64,
    checker: &GradCheck,
) -> Result<Vec<((Strategy, LayerMode), f64)>> {
    pipelines()
        .into_iter()
        .enumerate()
        .map(|(i, p)| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            rng.set_stream(100 + i as u64);
            let mut worst = 0.0f64;
            for _ in 0..instances {
                worst = worst.max(check_pipeline_instance(p.0, p.1, &mut rng, checker)?);
            }
            Ok((p, worst))
        })
        .collect()
}

/// Worst disagreements between the loss forms.
#[derive(Clone, Copy, Debug, Default, Serialize)]
pub struct LossAlgebra {
    /// K = 2 softmax form vs soft-triplet form, loss value.
    pub triplet_value: f64,
    /// Same, gradient with respect to queries and targets.
    pub triplet_grad: f64,
    /// K = B form vs a plain batch softmax cross-entropy.
    pub batch_softmax: f64,
    /// Per-term deviation from log 2 when every similarity is equal.
    pub symmetric_log2: f64,
}

fn loss_and_grads(
    q: &Tensor,
    t: &Tensor,
    f: impl Fn(&mut Graph, Var, Var) -> Result<Var>,
) -> Result<(f64, Vec<f64>)> {
    let mut g = Graph::new();
    let (qv, tv) = (g.input(q.clone()), g.input(t.clone()));
    let loss = f(&mut g, qv, tv)?;
    g.backward(loss)?;
    let mut grads = g.grad(qv).map_or_else(|| vec![0.0; q.numel()], |t| t.data().to_vec());
    grads.extend(g.grad(tv).map_or_else(|| vec![0.0; t.numel()], |t| t.data().to_vec()));
    Ok((g.value(loss).item()?, grads))
}

/// Mean over anchors of `−log softmax(S_i)[i]`, written out directly.
pub fn plain_batch_softmax(q: &Tensor, t: &Tensor, kernel: Kernel) -> Result<f64> {
    let b = q.shape()[0];
    let mut total = 0.0;
    for i in 0..b {
        let s: Vec<f64> = (0..b)
            .map(|j| crate::metric::similarity(q.row(i), t.row(j), kernel))
            .collect::<Result<_>>()?;
        let max = s.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let lse = max + s.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
        total += lse - s[i];
    }
    Ok(total / b as f64)
}

/// Compares the loss forms on `batches` random batches.
pub fn loss_algebra(batches: usize, seed: u64) -> Result<LossAlgebra> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = LossAlgebra::default();
    for _ in 0..batches {
        let b = dims(&mut rng, 2, 8);
        let d = dims(&mut rng, 1, 6);
        let kernel = if rng.gen() { Kernel::Dot } else { Kernel::NegL2 };
        let q = uniform(&[b, d], &mut rng);
        let t = uniform(&[b, d], &mut rng);

        let k2 = build_negative_sets(b, 2, b - 1, 0)?;
        let (lv, lg) = loss_and_grads(&q, &t, |g, a, c| metric_loss(g, a, c, &k2, kernel))?;
        let (tv, tg) = loss_and_grads(&q, &t, |g, a, c| soft_triplet_loss(g, a, c, &k2, kernel))?;
        out.triplet_value = out.triplet_value.max((lv - tv).abs());
        for (x, y) in lg.iter().zip(&tg) {
            out.triplet_grad = out.triplet_grad.max((x - y).abs());
        }

        let kb = build_negative_sets(b, b, 1, 0)?;
        let (bv, _) = loss_and_grads(&q, &t, |g, a, c| metric_loss(g, a, c, &kb, kernel))?;
        out.batch_softmax = out.batch_softmax.max((bv - plain_batch_softmax(&q, &t, kernel)?).abs());

        // Identical rows make every similarity equal.
        let row = uniform(&[1, d], &mut rng);
        let same = Tensor::stack(&vec![&row; b])?.reshape(&[b, d])?;
        let (sv, _) = loss_and_grads(&same, &same, |g, a, c| metric_loss(g, a, c, &k2, kernel))?;
        out.symmetric_log2 = out.symmetric_log2.max((sv - std::f64::consts::LN_2).abs());
    }
    Ok(out)
}

/// Replay and condition checks on a generated dataset.
#[derive(Clone, Debug, Default, Serialize)]
pub struct DatasetIntegrity {
    pub queries: usize,
    pub replay_failures: usize,
    pub condition_violations: usize,
}

pub fn dataset_integrity(config: &DatasetConfig) -> Result<DatasetIntegrity> {
    let (train, test) = build_dataset(config)?;
    let mut out = DatasetIntegrity::default();
    for split in [&train, &test] {
        out.queries += split.queries.len();
        out.replay_failures += split.replay_failures().len();
        out.condition_violations += split.condition_violations().len();
    }
    Ok(out)
}

/// Position of each query's target in a full sort of the database, with
/// no shortcuts: the reference implementation for ranking tests.
pub fn brute_force_ranks(embeddings: &Tensor, queries: &[EvalQuery], db: &EmbeddedDatabase) -> Result<Vec<usize>> {
    queries
        .iter()
        .enumerate()
        .map(|(qi, q)| {
            let row = embeddings.row(qi);
            let mut items: Vec<(f64, &str)> = Vec::new();
            for (j, id) in db.ids().iter().enumerate() {
                if q.exclude.as_deref() == Some(id.as_str()) {
                    continue;
                }
                let s = crate::metric::similarity(row, db.embeddings().row(j), db.kernel())?;
                items.push((s, id));
            }
            items.sort_by(|a, b| b.0.total_cmp(&a.0).then(a.1.cmp(b.1)));
            items
                .iter()
                .position(|(_, id)| *id == q.target)
                .ok_or_else(|| crate::Error::Data(format!("query {qi}: target missing")))
        })
        .collect()
}

/// Outcome of the ranking oracle on random instances.
#[derive(Clone, Debug, Default, Serialize)]
pub struct RankingOracle {
    pub instances: usize,
    /// Instances where the fast ranks or the sorted order disagreed with
    /// the brute-force oracle.
    pub mismatches: usize,
    /// Instances violating monotonicity in K or R@|db| = 100.
    pub recall_violations: usize,
}

/// Random databases (≤ 200 items, some with tied rows) and query sets
/// (≤ 50 queries), checked against [`brute_force_ranks`].
pub fn ranking_oracle(instances: usize, seed: u64) -> Result<RankingOracle> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = RankingOracle {
        instances,
        ..Default::default()
    };
    for _ in 0..instances {
        let n = dims(&mut rng, 1, 200);
        let d = dims(&mut rng, 1, 8);
        let nq = dims(&mut rng, 1, 50);
        let kernel = if rng.gen() { Kernel::Dot } else { Kernel::NegL2 };
        // Coarse values produce exact ties.
        let mut emb = uniform(&[n, d], &mut rng);
        for v in emb.data_mut() {
            *v = (*v * 2.0).round() / 2.0;
        }
        let mut ids: Vec<String> = (0..n).map(|i| format!("s{:04}", (i * 7919) % 10007)).collect();
        ids.dedup();
        let db = EmbeddedDatabase::new(ids.clone(), emb, kernel)?;
        let q = uniform(&[nq, d], &mut rng);
        let queries: Vec<EvalQuery> = (0..nq)
            .map(|_| {
                let t = rng.gen_range(0..n);
                let exclude = (n > 1 && rng.gen()).then(|| {
                    let mut e = rng.gen_range(0..n);
                    if e == t {
                        e = (e + 1) % n;
                    }
                    ids[e].clone()
                });
                EvalQuery {
                    target: ids[t].clone(),
                    exclude,
                    kind: None,
                }
            })
            .collect();
        let fast = target_ranks(&q, &queries, &db)?;
        let slow = brute_force_ranks(&q, &queries, &db)?;
        let sorted_ok = queries.iter().enumerate().all(|(qi, query)| {
            db.rank_ids(q.row(qi), query.exclude.as_deref())
                .map(|ids| ids.iter().position(|id| *id == query.target) == Some(slow[qi]))
                .unwrap_or(false)
        });
        if fast != slow || !sorted_ok {
            out.mismatches += 1;
        }
        let recalls: Vec<f64> = (1..=n).map(|k| recall_from_ranks(&fast, k)).collect();
        let monotone = recalls.windows(2).all(|w| w[0] <= w[1]);
        if !monotone || recall_from_ranks(&fast, n) != 100.0 {
            out.recall_violations += 1;
        }
    }
    Ok(out)
}

/// One suite's verdict.
#[derive(Clone, Debug, Serialize)]
pub struct SuiteResult {
    pub name: String,
    pub passed: bool,
    pub detail: String,
    pub seconds: f64,
}

fn timed(name: &str, f: impl FnOnce() -> Result<(bool, String)>) -> SuiteResult {
    let start = Instant::now();
    let (passed, detail) = f().unwrap_or_else(|e| (false, format!("error: {e}")));
    SuiteResult {
        name: name.to_string(),
        passed,
        detail,
        seconds: start.elapsed().as_secs_f64(),
    }
}

/// Runs every suite. `fault` corrupts one op's backward rule, which the
/// gradient suites must then report.
pub fn run_all(fault: Option<OpKind>, instances: usize, seed: u64) -> Vec<SuiteResult> {
    let checker = GradCheck {
        fault,
        ..GradCheck::default()
    };
    vec![
        timed("grad_check ops", || {
            let res = check_ops(instances, seed, &checker)?;
            let bad: Vec<String> = res
                .iter()
                .filter(|(_, e)| !(*e < GRAD_TOLERANCE))
                .map(|(op, e)| format!("{op} ({e:.2e})"))
                .collect();
            let worst = res.iter().map(|r| r.1).fold(0.0, f64::max);
            Ok(if bad.is_empty() {
                (true, format!("{} ops, worst {worst:.2e}", res.len()))
            } else {
                (false, format!("failing: {}", bad.join(", ")))
            })
        }),
        timed("grad_check pipelines", || {
            let res = check_pipelines(instances.min(5), seed, &checker)?;
            let bad: Vec<String> = res
                .iter()
                .filter(|(_, e)| !(*e < GRAD_TOLERANCE))
                .map(|((s, m), e)| format!("{s}/{m} ({e:.2e})"))
                .collect();
            let worst = res.iter().map(|r| r.1).fold(0.0, f64::max);
            Ok(if bad.is_empty() {
                (true, format!("{} pipelines, worst {worst:.2e}", res.len()))
            } else {
                (false, format!("failing: {}", bad.join(", ")))
            })
        }),
        timed("loss algebra", || {
            let a = loss_algebra(50, seed)?;
            let ok = a.triplet_value < 1e-10 && a.triplet_grad < 1e-8 && a.batch_softmax < 1e-10 && a.symmetric_log2 < 1e-12;
            Ok((ok, format!("{a:?}")))
        }),
        timed("dataset replay", || {
            let cfg = DatasetConfig {
                n_base: 50,
                n_queries: 500,
                seed,
                canvas_px: 12,
                ..Default::default()
            };
            let r = dataset_integrity(&cfg)?;
            Ok((r.replay_failures == 0 && r.condition_violations == 0, format!("{r:?}")))
        }),
        timed("ranking oracle", || {
            let r = ranking_oracle(20, seed)?;
            Ok((r.mismatches == 0 && r.recall_violations == 0, format!("{r:?}")))
        }),
    ]
}
