//! Composition of an image feature `φ_x` and a text feature `φ_t` into a
//! query feature that lives in the image embedding space.
//!
//! TIRG keeps a gated copy of the image feature and adds a learned residual:
//!
//! ```text
//! f_gate = σ(W_g2 ∗ RELU(W_g1 ∗ [φ_x, φ_t])) ⊙ φ_x
//! f_res  = W_r2 ∗ RELU(W_r1 ∗ [φ_x, φ_t])
//! φ_xt   = w_g · f_gate + w_r · f_res
//! ```
//!
//! In fc mode `φ_x` is the pooled `[N, D]` embedding and the `W_*` are
//! dense layers. In conv mode `φ_x` is the `[N, h, w, C]` map, `φ_t` is
//! tiled over the grid and the `W_*` are 3×3 convolutions.

use std::fmt;
use std::str::FromStr;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{lecun_bound, Dense, Layer};
use crate::tensor::{Graph, ParamId, ParamStore, Tensor, Var};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum Strategy {
    ImageOnly,
    TextOnly,
    Concat,
    Film,
    #[default]
    Tirg,
}

impl Strategy {
    pub const ALL: [Strategy; 5] = [
        Strategy::ImageOnly,
        Strategy::TextOnly,
        Strategy::Concat,
        Strategy::Film,
        Strategy::Tirg,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Strategy::ImageOnly => "image_only",
            Strategy::TextOnly => "text_only",
            Strategy::Concat => "concat",
            Strategy::Film => "film",
            Strategy::Tirg => "tirg",
        }
    }
}

impl fmt::Display for Strategy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Strategy {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Strategy::ALL
            .into_iter()
            .find(|k| k.name() == s)
            .ok_or_else(|| Error::Argument(format!("unknown strategy `{s}`")))
    }
}

/// Where composition happens: on the pooled vector or on the last map.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum LayerMode {
    #[default]
    Fc,
    Conv,
}

impl fmt::Display for LayerMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            LayerMode::Fc => "fc",
            LayerMode::Conv => "conv",
        })
    }
}

impl FromStr for LayerMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "fc" => Ok(LayerMode::Fc),
            "conv" => Ok(LayerMode::Conv),
            _ => Err(Error::Argument(format!("unknown layer mode `{s}` (expected fc or conv)"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CompositionConfig {
    pub strategy: Strategy,
    pub layer_mode: LayerMode,
    /// Hidden width of the two-layer paths; defaults to the input width
    /// `feature + text`.
    pub hidden_dim: Option<usize>,
    /// Dropout on the concat MLP hidden layer during training.
    pub concat_dropout: f64,
    pub w_g_init: f64,
    pub w_r_init: f64,
}

impl Default for CompositionConfig {
    fn default() -> Self {
        CompositionConfig {
            strategy: Strategy::Tirg,
            layer_mode: LayerMode::Fc,
            hidden_dim: None,
            concat_dropout: 0.0,
            w_g_init: 1.0,
            w_r_init: 0.1,
        }
    }
}

impl CompositionConfig {
    pub fn validate(&self) -> Result<()> {
        if self.layer_mode == LayerMode::Conv && matches!(self.strategy, Strategy::Concat | Strategy::TextOnly) {
            return Err(Error::Config(format!("{} composes pooled vectors only; use layer_mode = \"fc\"", self.strategy)));
        }
        if !(0.0..1.0).contains(&self.concat_dropout) {
            return Err(Error::Config(format!("concat_dropout {} must lie in [0, 1)", self.concat_dropout)));
        }
        if self.hidden_dim == Some(0) {
            return Err(Error::Config("hidden_dim must be positive".into()));
        }
        Ok(())
    }
}

/// Scale applied to the initial weights of the last residual layer. With
/// `w_r = 0.1` this keeps the residual path an order of magnitude below the
/// gated identity at initialization, so training starts close to the
/// reference image feature.
pub const RESIDUAL_OUTPUT_GAIN: f64 = 0.1;

/// TIRG parameters.
#[derive(Clone, Debug)]
pub struct Tirg {
    pub gate1: Layer,
    pub gate2: Layer,
    pub res1: Layer,
    pub res2: Layer,
    pub w_g: ParamId,
    pub w_r: ParamId,
}

/// Intermediate values of a TIRG forward pass.
#[derive(Clone, Copy, Debug)]
pub struct TirgParts {
    /// `w_g · f_gate`
    pub gate: Var,
    /// `w_r · f_res`
    pub residual: Var,
    pub output: Var,
}

#[derive(Clone, Debug)]
pub enum Composer {
    ImageOnly,
    /// Linear projection of `φ_t` into the image embedding space.
    TextOnly(Dense),
    Concat { hidden: Dense, output: Dense },
    /// Per-channel `γ(φ_t) ⊙ φ_x + β(φ_t)`.
    Film { gamma: Dense, beta: Dense },
    Tirg(Tirg),
}

/// Mean identity contribution over a batch.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct IdentityContribution {
    pub mean: f64,
    /// Samples where both paths had zero norm and 0.5 was used.
    pub degenerate: usize,
    pub samples: usize,
}

/// `‖g‖ / (‖g‖ + ‖r‖)`, or 0.5 with a degenerate flag when both are zero.
pub fn identity_fraction(gate_norm: f64, residual_norm: f64) -> (f64, bool) {
    let total = gate_norm + residual_norm;
    if total == 0.0 {
        (0.5, true)
    } else {
        (gate_norm / total, false)
    }
}

#[derive(Clone, Debug)]
pub struct Composition {
    pub config: CompositionConfig,
    /// Channel count of `φ_x` (map channels in conv mode, embedding size in
    /// fc mode).
    pub feature_dim: usize,
    pub text_dim: usize,
    pub composer: Composer,
}

impl Composition {
    pub fn new<R: Rng + ?Sized>(
        config: CompositionConfig,
        feature_dim: usize,
        text_dim: usize,
        store: &mut ParamStore,
        rng: &mut R,
    ) -> Result<Self> {
        config.validate()?;
        let (c, d) = (feature_dim, text_dim);
        let hidden = config.hidden_dim.unwrap_or(c + d);
        let conv = config.layer_mode == LayerMode::Conv;
        let composer = match config.strategy {
            Strategy::ImageOnly => Composer::ImageOnly,
            Strategy::TextOnly => Composer::TextOnly(Dense::new(store, "compose.text", d, c, lecun_bound(d), rng)?),
            Strategy::Concat => Composer::Concat {
                hidden: Dense::new(store, "compose.hidden", c + d, hidden, crate::nn::he_bound(c + d), rng)?,
                output: Dense::new(store, "compose.output", hidden, c, lecun_bound(hidden), rng)?,
            },
            Strategy::Film => {
                let gamma = Dense::new(store, "compose.gamma", d, c, lecun_bound(d), rng)?;
                store.get_mut(gamma.bias).value = Tensor::full(&[c], 1.0);
                Composer::Film {
                    gamma,
                    beta: Dense::new(store, "compose.beta", d, c, lecun_bound(d), rng)?,
                }
            }
            Strategy::Tirg => {
                let tirg = Tirg {
                    gate1: Layer::new(store, "compose.gate1", conv, c + d, hidden, true, rng)?,
                    gate2: Layer::new(store, "compose.gate2", conv, hidden, c, false, rng)?,
                    res1: Layer::new(store, "compose.res1", conv, c + d, hidden, true, rng)?,
                    res2: Layer::new(store, "compose.res2", conv, hidden, c, false, rng)?,
                    w_g: store.add("compose.w_g", Tensor::scalar(config.w_g_init))?,
                    w_r: store.add("compose.w_r", Tensor::scalar(config.w_r_init))?,
                };
                for v in store.get_mut(tirg.res2.params()[0]).value.data_mut() {
                    *v *= RESIDUAL_OUTPUT_GAIN;
                }
                Composer::Tirg(tirg)
            }
        };
        Ok(Composition {
            config,
            feature_dim,
            text_dim,
            composer,
        })
    }

    pub fn strategy(&self) -> Strategy {
        self.config.strategy
    }

    pub fn layer_mode(&self) -> LayerMode {
        self.config.layer_mode
    }

    fn check_inputs(&self, g: &Graph, x: Var, t: Var) -> Result<()> {
        let (sx, st) = (g.shape(x), g.shape(t));
        let ok_t = st.len() == 2 && st[1] == self.text_dim;
        let ok_x = match self.config.layer_mode {
            LayerMode::Fc => sx.len() == 2 && sx[1] == self.feature_dim,
            LayerMode::Conv => sx.len() == 4 && sx[3] == self.feature_dim,
        };
        if !ok_t || !ok_x || sx[0] != st[0] {
            return Err(Error::dim("compose", sx, st));
        }
        Ok(())
    }

    /// `[φ_x, φ_t]` with `φ_t` tiled over the grid in conv mode.
    fn joint(&self, g: &mut Graph, x: Var, t: Var) -> Result<Var> {
        match *g.shape(x) {
            [_, h, w, _] => {
                let tiled = g.broadcast_spatial(t, h, w)?;
                g.concat(x, tiled)
            }
            _ => g.concat(x, t),
        }
    }

    /// Per-sample coefficients broadcast to `x`'s shape.
    fn per_channel(g: &mut Graph, coeff: Var, x: Var) -> Result<Var> {
        match *g.shape(x) {
            [_, h, w, _] => g.broadcast_spatial(coeff, h, w),
            _ => Ok(coeff),
        }
    }

    /// TIRG forward pass exposing both paths.
    pub fn tirg_parts(&self, g: &mut Graph, store: &ParamStore, x: Var, t: Var) -> Result<TirgParts> {
        let Composer::Tirg(p) = &self.composer else {
            return Err(Error::Argument(format!("{} has no gate and residual paths", self.strategy())));
        };
        self.check_inputs(g, x, t)?;
        let xt = self.joint(g, x, t)?;
        let a = p.gate1.forward(g, store, xt)?;
        let a = g.relu(a);
        let a = p.gate2.forward(g, store, a)?;
        let gate = g.sigmoid(a);
        let gate = g.mul(gate, x)?;
        let r = p.res1.forward(g, store, xt)?;
        let r = g.relu(r);
        let res = p.res2.forward(g, store, r)?;
        let w_g = g.param(store, p.w_g);
        let w_r = g.param(store, p.w_r);
        let gate = g.mul(gate, w_g)?;
        let residual = g.mul(res, w_r)?;
        let output = g.add(gate, residual)?;
        Ok(TirgParts { gate, residual, output })
    }

    /// Composes `x` and `t`. `dropout_rng` enables training-time dropout
    /// where configured; pass `None` for evaluation.
    pub fn compose<R: Rng + ?Sized>(
        &self,
        g: &mut Graph,
        store: &ParamStore,
        x: Var,
        t: Var,
        dropout_rng: Option<&mut R>,
    ) -> Result<Var> {
        self.check_inputs(g, x, t)?;
        match &self.composer {
            Composer::ImageOnly => Ok(x),
            Composer::TextOnly(proj) => proj.forward(g, store, t),
            Composer::Concat { hidden, output } => {
                let xt = g.concat(x, t)?;
                let h = hidden.forward(g, store, xt)?;
                let mut h = g.relu(h);
                let p = self.config.concat_dropout;
                if let (Some(rng), true) = (dropout_rng, p > 0.0) {
                    let keep = 1.0 / (1.0 - p);
                    let shape = g.shape(h).to_vec();
                    let n: usize = shape.iter().product();
                    let mask = (0..n).map(|_| if rng.gen::<f64>() < p { 0.0 } else { keep }).collect();
                    let mask = g.constant(Tensor::new(&shape, mask)?);
                    h = g.mul(h, mask)?;
                }
                output.forward(g, store, h)
            }
            Composer::Film { gamma, beta } => {
                let gm = gamma.forward(g, store, t)?;
                let bt = beta.forward(g, store, t)?;
                let gm = Self::per_channel(g, gm, x)?;
                let bt = Self::per_channel(g, bt, x)?;
                let y = g.mul(x, gm)?;
                g.add(y, bt)
            }
            Composer::Tirg(_) => Ok(self.tirg_parts(g, store, x, t)?.output),
        }
    }

    /// Mean over samples of `‖w_g f_gate‖ / (‖w_g f_gate‖ + ‖w_r f_res‖)`.
    pub fn identity_contribution(
        &self,
        g: &mut Graph,
        store: &ParamStore,
        x: Var,
        t: Var,
    ) -> Result<IdentityContribution> {
        let parts = self.tirg_parts(g, store, x, t)?;
        let (gate, res) = (g.value(parts.gate), g.value(parts.residual));
        let n = gate.shape()[0];
        let per = gate.numel() / n;
        let mut sum = 0.0;
        let mut degenerate = 0;
        for (gs, rs) in gate.data().chunks(per).zip(res.data().chunks(per)) {
            let norm = |v: &[f64]| v.iter().map(|a| a * a).sum::<f64>().sqrt();
            let (f, deg) = identity_fraction(norm(gs), norm(rs));
            sum += f;
            degenerate += deg as usize;
        }
        Ok(IdentityContribution {
            mean: sum / n as f64,
            degenerate,
            samples: n,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn build(strategy: Strategy, mode: LayerMode, c: usize, d: usize) -> (Composition, ParamStore) {
        let mut store = ParamStore::new();
        let cfg = CompositionConfig {
            strategy,
            layer_mode: mode,
            ..Default::default()
        };
        let comp = Composition::new(cfg, c, d, &mut store, &mut ChaCha8Rng::seed_from_u64(5)).unwrap();
        (comp, store)
    }

    fn eval(comp: &Composition, store: &ParamStore, x: &Tensor, t: &Tensor) -> Tensor {
        let mut g = Graph::inference();
        let (xv, tv) = (g.constant(x.clone()), g.constant(t.clone()));
        let out = comp.compose::<ChaCha8Rng>(&mut g, store, xv, tv, None).unwrap();
        g.value(out).clone()
    }

    fn zero(store: &mut ParamStore, ids: &[ParamId]) {
        for &id in ids {
            let p = store.get_mut(id);
            p.value = Tensor::zeros(p.value.shape());
        }
    }

    fn random(shape: &[usize], seed: u64) -> Tensor {
        Tensor::uniform(shape, 1.0, &mut ChaCha8Rng::seed_from_u64(seed))
    }

    #[test]
    fn strategy_names_round_trip() {
        for s in Strategy::ALL {
            assert_eq!(s.name().parse::<Strategy>().unwrap(), s);
        }
        assert!("lstm".parse::<Strategy>().is_err());
    }

    #[test]
    fn image_only_is_bitwise_pass_through() {
        let (comp, store) = build(Strategy::ImageOnly, LayerMode::Fc, 4, 3);
        let x = random(&[2, 4], 1);
        assert_eq!(eval(&comp, &store, &x, &random(&[2, 3], 2)), x);
    }

    #[test]
    fn tirg_halving_with_zero_gate_and_no_residual() {
        for mode in [LayerMode::Fc, LayerMode::Conv] {
            let (comp, mut store) = build(Strategy::Tirg, mode, 4, 3);
            let Composer::Tirg(p) = comp.composer.clone() else { unreachable!() };
            zero(&mut store, &[p.gate1.params(), p.gate2.params()].concat());
            zero(&mut store, &[p.w_r]);
            let x = if mode == LayerMode::Fc {
                random(&[3, 4], 1)
            } else {
                random(&[2, 3, 3, 4], 1)
            };
            let n = x.shape()[0];
            let out = eval(&comp, &store, &x, &random(&[n, 3], 2));
            for (o, v) in out.data().iter().zip(x.data()) {
                assert!((o - 0.5 * v).abs() <= 1e-12);
            }
        }
    }

    #[test]
    fn tirg_residual_only_when_gate_weight_is_zero() {
        let (comp, mut store) = build(Strategy::Tirg, LayerMode::Fc, 4, 3);
        let Composer::Tirg(p) = comp.composer.clone() else { unreachable!() };
        store.get_mut(p.w_g).value = Tensor::scalar(0.0);
        store.get_mut(p.w_r).value = Tensor::scalar(1.0);
        let (x, t) = (random(&[2, 4], 1), random(&[2, 3], 2));
        let mut g = Graph::inference();
        let (xv, tv) = (g.constant(x), g.constant(t));
        let parts = comp.tirg_parts(&mut g, &store, xv, tv).unwrap();
        assert_eq!(g.value(parts.output), g.value(parts.residual));
        let ic = comp.identity_contribution(&mut g, &store, xv, tv).unwrap();
        assert_eq!(ic.mean, 0.0);
    }

    #[test]
    fn identity_contribution_limits() {
        let (comp, mut store) = build(Strategy::Tirg, LayerMode::Fc, 4, 3);
        let Composer::Tirg(p) = comp.composer.clone() else { unreachable!() };
        let (x, t) = (random(&[5, 4], 1), random(&[5, 3], 2));
        // A graph caches parameter leaves, so each measurement gets its own.
        let measure = |store: &ParamStore| {
            let mut g = Graph::inference();
            let (xv, tv) = (g.constant(x.clone()), g.constant(t.clone()));
            comp.identity_contribution(&mut g, store, xv, tv).unwrap()
        };
        let init = measure(&store);
        assert!(init.mean > 0.5 && init.mean < 1.0, "{}", init.mean);
        store.get_mut(p.w_r).value = Tensor::scalar(0.0);
        let ic = measure(&store);
        assert_eq!((ic.mean, ic.degenerate), (1.0, 0));
        store.get_mut(p.w_g).value = Tensor::scalar(0.0);
        let ic = measure(&store);
        assert_eq!((ic.mean, ic.degenerate), (0.5, 5));
    }

    #[test]
    fn film_identity_and_constant_modulation() {
        for mode in [LayerMode::Fc, LayerMode::Conv] {
            let (comp, mut store) = build(Strategy::Film, mode, 4, 3);
            let Composer::Film { gamma, beta } = comp.composer.clone() else { unreachable!() };
            zero(&mut store, &[gamma.weight, beta.weight, beta.bias]);
            store.get_mut(gamma.bias).value = Tensor::full(&[4], 1.0);
            let x = if mode == LayerMode::Fc {
                random(&[2, 4], 1)
            } else {
                random(&[2, 2, 3, 4], 1)
            };
            let t = random(&[2, 3], 2);
            assert_eq!(eval(&comp, &store, &x, &t), x);

            store.get_mut(gamma.bias).value = Tensor::zeros(&[4]);
            let b = Tensor::vector(vec![0.5, -1.0, 2.0, 0.0]);
            store.get_mut(beta.bias).value = b.clone();
            let out = eval(&comp, &store, &x, &t);
            for px in out.data().chunks(4) {
                assert_eq!(px, b.data());
            }
        }
    }

    #[test]
    fn concat_zero_and_identity_constructions() {
        let (comp, mut store) = build(Strategy::Concat, LayerMode::Fc, 3, 2);
        let Composer::Concat { hidden, output } = comp.composer.clone() else { unreachable!() };
        let (x, t) = (random(&[4, 3], 1), random(&[4, 2], 2));
        zero(&mut store, &[hidden.weight, hidden.bias, output.weight, output.bias]);
        assert!(eval(&comp, &store, &x, &t).data().iter().all(|&v| v == 0.0));

        // Hidden copies the image block, output reads it back.
        let (c, d, h) = (3, 2, hidden.output);
        let mut wh = vec![0.0; (c + d) * h];
        let mut wo = vec![0.0; h * c];
        for i in 0..c {
            wh[i * h + i] = 1.0;
            wo[i * c + i] = 1.0;
        }
        store.get_mut(hidden.weight).value = Tensor::new(&[c + d, h], wh).unwrap();
        store.get_mut(output.weight).value = Tensor::new(&[h, c], wo).unwrap();
        let out = eval(&comp, &store, &x, &t);
        for (o, v) in out.data().iter().zip(x.data()) {
            assert_eq!(*o, v.max(0.0));
        }
    }

    #[test]
    fn text_only_with_zero_projection() {
        let (comp, mut store) = build(Strategy::TextOnly, LayerMode::Fc, 4, 3);
        let Composer::TextOnly(p) = comp.composer.clone() else { unreachable!() };
        zero(&mut store, &[p.weight, p.bias]);
        let out = eval(&comp, &store, &random(&[2, 4], 1), &random(&[2, 3], 2));
        assert_eq!(out.shape(), &[2, 4]);
        assert!(out.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn vector_only_strategies_reject_conv_mode() {
        for s in [Strategy::Concat, Strategy::TextOnly] {
            let cfg = CompositionConfig {
                strategy: s,
                layer_mode: LayerMode::Conv,
                ..Default::default()
            };
            assert!(matches!(cfg.validate(), Err(Error::Config(_))));
        }
    }

    #[test]
    fn shape_mismatch_is_a_dimension_error() {
        let (comp, store) = build(Strategy::Tirg, LayerMode::Fc, 4, 3);
        let mut g = Graph::inference();
        let x = g.constant(random(&[2, 5], 1));
        let t = g.constant(random(&[2, 3], 2));
        assert!(matches!(
            comp.compose::<ChaCha8Rng>(&mut g, &store, x, t, None),
            Err(Error::Dimension { .. })
        ));
    }

    #[test]
    fn concat_dropout_only_in_training() {
        let mut store = ParamStore::new();
        let cfg = CompositionConfig {
            strategy: Strategy::Concat,
            concat_dropout: 0.5,
            ..Default::default()
        };
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let comp = Composition::new(cfg, 4, 3, &mut store, &mut rng).unwrap();
        let (x, t) = (random(&[8, 4], 1), random(&[8, 3], 2));
        let a = eval(&comp, &store, &x, &t);
        assert_eq!(a, eval(&comp, &store, &x, &t));
        let mut g = Graph::inference();
        let (xv, tv) = (g.constant(x), g.constant(t));
        let out = comp.compose(&mut g, &store, xv, tv, Some(&mut rng)).unwrap();
        assert_ne!(g.value(out), &a);
    }
}
