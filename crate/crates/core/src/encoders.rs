//! Image and text encoders.
//!
//! The image encoder is a plain CNN: stride-2 3×3 convolutions, each
//! followed by a per-channel affine and a RELU, then spatial average pooling
//! and a dense layer. The text encoder embeds template tokens and runs a
//! single-gate recurrent cell over them, returning the last hidden state.

use std::collections::BTreeMap;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::dataset::{Color, Image, Position, Shape, Size};
use crate::error::{Error, Result};
use crate::nn::{he_bound, lecun_bound, Dense};
use crate::tensor::{Graph, ParamId, ParamStore, Tensor, Var};

pub const PAD: &str = "<pad>";
pub const UNK: &str = "<unk>";

/// Closed token vocabulary with dense indices in sorted token order.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Vocabulary {
    tokens: Vec<String>,
    index: BTreeMap<String, usize>,
}

impl Vocabulary {
    pub fn new<I: IntoIterator<Item = String>>(words: I) -> Self {
        let mut tokens: Vec<String> = words.into_iter().chain([PAD.to_string(), UNK.to_string()]).collect();
        tokens.sort();
        tokens.dedup();
        let index = tokens.iter().enumerate().map(|(i, t)| (t.clone(), i)).collect();
        Vocabulary { tokens, index }
    }

    /// Every word the modification templates can produce.
    pub fn css() -> Self {
        let fixed = ["add", "remove", "make", "to", "object"].map(String::from);
        let words = fixed
            .into_iter()
            .chain(Color::ALL.iter().map(|c| c.name().to_string()))
            .chain(Shape::ALL.iter().map(|s| s.name().to_string()))
            .chain(Size::ALL.iter().map(|s| s.text().to_string()))
            .chain(Position::all().map(Position::name));
        Self::new(words)
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn pad(&self) -> usize {
        self.index[PAD]
    }

    pub fn unk(&self) -> usize {
        self.index[UNK]
    }

    pub fn get(&self, token: &str) -> Option<usize> {
        self.index.get(token).copied()
    }

    pub fn token(&self, i: usize) -> Option<&str> {
        self.tokens.get(i).map(String::as_str)
    }

    pub fn tokens(&self) -> &[String] {
        &self.tokens
    }

    pub fn decode(&self, indices: &[usize]) -> String {
        indices
            .iter()
            .map(|&i| self.token(i).unwrap_or(UNK))
            .collect::<Vec<_>>()
            .join(" ")
    }
}

/// Lowercases and splits on whitespace; hyphenated position names stay one
/// token. Unknown words map to `<unk>`.
pub fn tokenize(text: &str, vocab: &Vocabulary) -> Vec<usize> {
    text.to_lowercase()
        .split_whitespace()
        .map(|w| vocab.get(w).unwrap_or_else(|| vocab.unk()))
        .collect()
}

/// Per-stage normalization after each convolution.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Normalization {
    /// Learnable per-channel scale and shift, no batch statistics.
    #[default]
    Affine,
}

/// Recurrent cell of the text encoder.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RecurrentCell {
    /// Update gate plus tanh candidate.
    #[default]
    Gated,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ImageEncoderConfig {
    pub canvas_px: usize,
    /// Output channels of each stride-2 stage.
    pub channels: Vec<usize>,
    /// Size of the pooled embedding.
    pub embed_dim: usize,
    pub normalization: Normalization,
}

impl Default for ImageEncoderConfig {
    fn default() -> Self {
        ImageEncoderConfig {
            canvas_px: 48,
            channels: vec![16, 32, 64],
            embed_dim: 64,
            normalization: Normalization::Affine,
        }
    }
}

impl ImageEncoderConfig {
    pub fn validate(&self) -> Result<()> {
        if self.canvas_px == 0 {
            return Err(Error::Config("image canvas_px must be positive".into()));
        }
        if self.channels.is_empty() || self.channels.contains(&0) {
            return Err(Error::Config("image channels must be a non-empty list of positive sizes".into()));
        }
        if self.embed_dim < 8 {
            return Err(Error::Config(format!("image embed_dim {} must be at least 8", self.embed_dim)));
        }
        Ok(())
    }

    /// Spatial side of the last feature map.
    pub fn map_side(&self) -> usize {
        self.channels.iter().fold(self.canvas_px, |s, _| (s - 1) / 2 + 1)
    }

    pub fn map_channels(&self) -> usize {
        *self.channels.last().expect("validated")
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TextEncoderConfig {
    pub embed_dim: usize,
    pub hidden_dim: usize,
    pub cell: RecurrentCell,
}

impl Default for TextEncoderConfig {
    fn default() -> Self {
        TextEncoderConfig {
            embed_dim: 32,
            hidden_dim: 64,
            cell: RecurrentCell::Gated,
        }
    }
}

impl TextEncoderConfig {
    pub fn validate(&self) -> Result<()> {
        if self.embed_dim == 0 || self.hidden_dim == 0 {
            return Err(Error::Config("text embed_dim and hidden_dim must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Debug)]
pub struct ConvStage {
    pub kernel: ParamId,
    pub scale: ParamId,
    pub shift: ParamId,
}

/// Output of [`ImageEncoder::forward`].
#[derive(Clone, Copy, Debug)]
pub struct ImageFeatures {
    /// `[N, h, w, C]` map from the last stage.
    pub map: Var,
    /// `[N, D]` pooled embedding.
    pub pooled: Var,
}

#[derive(Clone, Debug)]
pub struct ImageEncoder {
    pub config: ImageEncoderConfig,
    pub stages: Vec<ConvStage>,
    pub fc: Dense,
}

impl ImageEncoder {
    pub fn new<R: Rng + ?Sized>(config: ImageEncoderConfig, store: &mut ParamStore, rng: &mut R) -> Result<Self> {
        config.validate()?;
        let mut stages = Vec::with_capacity(config.channels.len());
        let mut cin = 3;
        for (i, &cout) in config.channels.iter().enumerate() {
            let name = format!("image.stage{i}");
            stages.push(ConvStage {
                kernel: store.add(
                    format!("{name}.kernel"),
                    Tensor::uniform(&[3, 3, cin, cout], he_bound(9 * cin), rng),
                )?,
                scale: store.add(format!("{name}.scale"), Tensor::full(&[cout], 1.0))?,
                shift: store.add(format!("{name}.shift"), Tensor::zeros(&[cout]))?,
            });
            cin = cout;
        }
        let fc = Dense::new(store, "image.fc", cin, config.embed_dim, lecun_bound(cin), rng)?;
        Ok(ImageEncoder { config, stages, fc })
    }

    /// Stacks images into an `[N, H, W, 3]` tensor, checking their size.
    pub fn batch_tensor(&self, images: &[&Image]) -> Result<Tensor> {
        if images.is_empty() {
            return Err(Error::Argument("no images to encode".into()));
        }
        let px = self.config.canvas_px;
        let tensors = images
            .iter()
            .map(|img| {
                if img.width != px || img.height != px {
                    return Err(Error::Argument(format!(
                        "image is {}x{}, encoder expects {px}x{px}",
                        img.width, img.height
                    )));
                }
                Ok(img.to_tensor())
            })
            .collect::<Result<Vec<_>>>()?;
        Tensor::stack(&tensors.iter().collect::<Vec<_>>())
    }

    /// Conv stages only: `[N, H, W, 3] → [N, h, w, C]`.
    pub fn feature_map(&self, g: &mut Graph, store: &ParamStore, images: Var) -> Result<Var> {
        let px = self.config.canvas_px;
        match *g.shape(images) {
            [_, h, w, 3] if h == px && w == px => {}
            _ => return Err(Error::dim("encode_image", g.shape(images), &[px, px, 3])),
        }
        let mut x = images;
        for stage in &self.stages {
            let k = g.param(store, stage.kernel);
            let scale = g.param(store, stage.scale);
            let shift = g.param(store, stage.shift);
            let y = g.conv2d(x, k, 2)?;
            let y = g.mul(y, scale)?;
            let y = g.add(y, shift)?;
            x = g.relu(y);
        }
        Ok(x)
    }

    /// Average pooling and the dense head: `[N, h, w, C] → [N, D]`.
    pub fn pool(&self, g: &mut Graph, store: &ParamStore, map: Var) -> Result<Var> {
        let pooled = g.avg_pool_spatial(map)?;
        self.fc.forward(g, store, pooled)
    }

    pub fn forward(&self, g: &mut Graph, store: &ParamStore, images: Var) -> Result<ImageFeatures> {
        let map = self.feature_map(g, store, images)?;
        let pooled = self.pool(g, store, map)?;
        Ok(ImageFeatures { map, pooled })
    }
}

/// Embedding table plus a recurrent cell with one update gate:
/// `z = σ(x W_z + h U_z + b_z)`, `c = tanh(x W_c + h U_c + b_c)`,
/// `h ← h + z ⊙ (c − h)`.
#[derive(Clone, Debug)]
pub struct TextEncoder {
    pub config: TextEncoderConfig,
    pub vocab_size: usize,
    pub pad: usize,
    pub embedding: ParamId,
    pub input_gate: Dense,
    pub input_candidate: Dense,
    pub hidden_gate: ParamId,
    pub hidden_candidate: ParamId,
}

impl TextEncoder {
    pub fn new<R: Rng + ?Sized>(
        config: TextEncoderConfig,
        vocab: &Vocabulary,
        store: &mut ParamStore,
        rng: &mut R,
    ) -> Result<Self> {
        config.validate()?;
        let (e, h) = (config.embed_dim, config.hidden_dim);
        Ok(TextEncoder {
            vocab_size: vocab.len(),
            pad: vocab.pad(),
            embedding: store.add(
                "text.embedding",
                Tensor::uniform(&[vocab.len(), e], 3f64.sqrt(), rng),
            )?,
            input_gate: Dense::new(store, "text.gate.input", e, h, lecun_bound(e), rng)?,
            input_candidate: Dense::new(store, "text.candidate.input", e, h, lecun_bound(e), rng)?,
            hidden_gate: store.add("text.gate.hidden", Tensor::uniform(&[h, h], lecun_bound(h), rng))?,
            hidden_candidate: store.add(
                "text.candidate.hidden",
                Tensor::uniform(&[h, h], lecun_bound(h), rng),
            )?,
            config,
        })
    }

    /// Encodes a batch of token sequences to `[N, d]`. Shorter sequences
    /// are left-padded and their hidden state is held at zero through the
    /// padding, so each row equals encoding that sequence alone.
    pub fn forward(&self, g: &mut Graph, store: &ParamStore, batch: &[Vec<usize>]) -> Result<Var> {
        if batch.is_empty() {
            return Err(Error::Argument("no texts to encode".into()));
        }
        if batch.iter().any(Vec::is_empty) {
            return Err(Error::Argument("cannot encode an empty token list".into()));
        }
        if let Some(&bad) = batch.iter().flatten().find(|&&i| i >= self.vocab_size) {
            return Err(Error::Argument(format!("token index {bad} outside vocabulary")));
        }
        let n = batch.len();
        let hd = self.config.hidden_dim;
        let len = batch.iter().map(Vec::len).max().expect("non-empty");
        let table = g.param(store, self.embedding);
        let u_gate = g.param(store, self.hidden_gate);
        let u_cand = g.param(store, self.hidden_candidate);
        let mut h: Option<Var> = None;
        for t in 0..len {
            let mut indices = Vec::with_capacity(n);
            let mut mask = Vec::with_capacity(n * hd);
            for seq in batch {
                let offset = len - seq.len();
                let live = t >= offset;
                indices.push(if live { seq[t - offset] } else { self.pad });
                mask.extend(std::iter::repeat_n(if live { 1.0 } else { 0.0 }, hd));
            }
            let x = g.gather(table, &indices)?;
            let mut zpre = self.input_gate.forward(g, store, x)?;
            let mut cpre = self.input_candidate.forward(g, store, x)?;
            if let Some(h) = h {
                let hz = g.matmul(h, u_gate)?;
                zpre = g.add(zpre, hz)?;
                let hc = g.matmul(h, u_cand)?;
                cpre = g.add(cpre, hc)?;
            }
            let z = g.sigmoid(zpre);
            let c = g.tanh(cpre);
            let mut step = match h {
                Some(h) => g.sub(c, h)?,
                None => c,
            };
            step = g.mul(z, step)?;
            if mask.iter().any(|&m| m == 0.0) {
                let m = g.constant(Tensor::new(&[n, hd], mask)?);
                step = g.mul(step, m)?;
            }
            h = Some(match h {
                Some(h) => g.add(h, step)?,
                None => step,
            });
        }
        Ok(h.expect("at least one step"))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataset::{Modification, Scene};
    use crate::tensor::GradCheck;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn rng() -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(11)
    }

    fn tiny_image() -> ImageEncoderConfig {
        ImageEncoderConfig {
            canvas_px: 6,
            channels: vec![2, 3],
            embed_dim: 8,
            ..Default::default()
        }
    }

    #[test]
    fn vocabulary_is_sorted_and_closed() {
        let v = Vocabulary::css();
        assert_eq!(v.len(), 29);
        assert!(v.tokens().windows(2).all(|w| w[0] < w[1]));
        assert_eq!(v.get(PAD), Some(v.pad()));
        for m in [
            "add big red cube to middle-center",
            "remove top-left small object",
            "make yellow sphere small",
        ] {
            let toks = tokenize(m, &v);
            assert!(!toks.contains(&v.unk()), "{m}");
            assert_eq!(Modification::parse(&v.decode(&toks)).unwrap().to_text(), m);
        }
    }

    #[test]
    fn tokenizer_examples() {
        let v = Vocabulary::css();
        assert_eq!(tokenize("add big red cube to middle-center", &v).len(), 6);
        assert!(tokenize("", &v).is_empty());
        assert_eq!(tokenize("zebra", &v), vec![v.unk()]);
        assert_eq!(tokenize("ADD Red", &v), tokenize("add red", &v));
        let once = tokenize("add a zebra", &v);
        assert_eq!(tokenize(&v.decode(&once), &v), once);
    }

    #[test]
    fn image_encoder_distinguishes_white_and_black() {
        let mut store = ParamStore::new();
        let enc = ImageEncoder::new(ImageEncoderConfig::default(), &mut store, &mut rng()).unwrap();
        let white = Image::blank(48, 48);
        let black = Image {
            pixels: vec![0; 48 * 48 * 3],
            ..white.clone()
        };
        let mut g = Graph::inference();
        let x = g.constant(enc.batch_tensor(&[&white, &black, &white]).unwrap());
        let f = enc.forward(&mut g, &store, x).unwrap();
        assert_eq!(g.shape(f.map), &[3, 6, 6, 64]);
        let p = g.value(f.pooled);
        assert_eq!(p.shape(), &[3, 64]);
        let dist: f64 = p.row(0).iter().zip(p.row(1)).map(|(a, b)| (a - b).powi(2)).sum();
        assert!(dist > 0.0);
        assert_eq!(p.row(0), p.row(2));
    }

    #[test]
    fn image_size_mismatch_is_an_argument_error() {
        let mut store = ParamStore::new();
        let enc = ImageEncoder::new(tiny_image(), &mut store, &mut rng()).unwrap();
        assert!(matches!(
            enc.batch_tensor(&[&Image::blank(9, 9)]),
            Err(Error::Argument(_))
        ));
    }

    #[test]
    fn image_encoder_gradient() {
        let mut store = ParamStore::new();
        let mut r = rng();
        let enc = ImageEncoder::new(tiny_image(), &mut store, &mut r).unwrap();
        let mut scene = Scene::empty("s");
        scene.set(
            Position::new(1, 1).unwrap(),
            Some(crate::dataset::ObjectSpec {
                color: Color::Red,
                shape: Shape::Cube,
                size: Size::Large,
            }),
        );
        let img = crate::dataset::render_2d(&scene, 6).unwrap();
        let input = enc.batch_tensor(&[&img]).unwrap();
        // Zero shifts put dead RELU regions exactly on the kink; offset them.
        for stage in &enc.stages {
            let shape = store.value(stage.shift).shape().to_vec();
            store.get_mut(stage.shift).value = Tensor::uniform(&shape, 0.1, &mut r);
        }
        let err = GradCheck::default()
            .params(&store, |g, s| {
                let x = g.constant(input.clone());
                let f = enc.forward(g, s, x)?;
                Ok(g.sum(f.pooled))
            })
            .unwrap();
        assert!(err < 1e-4, "{err}");
    }

    #[test]
    fn text_encoder_pad_step_and_distinctness() {
        let v = Vocabulary::css();
        let mut store = ParamStore::new();
        let enc = TextEncoder::new(TextEncoderConfig::default(), &v, &mut store, &mut rng()).unwrap();
        let mut g = Graph::inference();
        let out = enc.forward(&mut g, &store, &[vec![v.pad()]]).unwrap();
        // One step from h = 0: z ⊙ c.
        let e = store.value(enc.embedding).row(v.pad()).to_vec();
        let dense = |d: &Dense| -> Vec<f64> {
            let w = store.value(d.weight);
            let b = store.value(d.bias).data();
            (0..d.output)
                .map(|j| b[j] + (0..d.input).map(|i| e[i] * w.data()[i * d.output + j]).sum::<f64>())
                .collect()
        };
        let z = dense(&enc.input_gate);
        let c = dense(&enc.input_candidate);
        for (j, &o) in g.value(out).data().iter().enumerate() {
            let expect = 1.0 / (1.0 + (-z[j]).exp()) * c[j].tanh();
            assert!((o - expect).abs() < 1e-12);
        }

        let texts = [tokenize("add red cube", &v), tokenize("remove red cube", &v)];
        let out = enc.forward(&mut g, &store, &texts).unwrap();
        let t = g.value(out);
        assert_ne!(t.row(0), t.row(1));
    }

    #[test]
    fn padding_does_not_change_encodings() {
        let v = Vocabulary::css();
        let mut store = ParamStore::new();
        let enc = TextEncoder::new(TextEncoderConfig::default(), &v, &mut store, &mut rng()).unwrap();
        let short = tokenize("remove cube", &v);
        let long = tokenize("add big red cube to middle-center", &v);
        let mut g = Graph::inference();
        let both = enc.forward(&mut g, &store, &[short.clone(), long]).unwrap();
        let alone = enc.forward(&mut g, &store, &[short]).unwrap();
        assert_eq!(g.value(both).row(0), g.value(alone).row(0));
    }

    #[test]
    fn empty_text_rejected() {
        let v = Vocabulary::css();
        let mut store = ParamStore::new();
        let enc = TextEncoder::new(TextEncoderConfig::default(), &v, &mut store, &mut rng()).unwrap();
        let mut g = Graph::new();
        assert!(matches!(enc.forward(&mut g, &store, &[vec![]]), Err(Error::Argument(_))));
    }

    #[test]
    fn text_encoder_gradient() {
        let v = Vocabulary::css();
        let mut store = ParamStore::new();
        let cfg = TextEncoderConfig {
            embed_dim: 4,
            hidden_dim: 5,
            ..Default::default()
        };
        let enc = TextEncoder::new(cfg, &v, &mut store, &mut rng()).unwrap();
        let toks = tokenize("make top-left red cube small", &v);
        assert_eq!(toks.len(), 5);
        let err = GradCheck::default()
            .params(&store, |g, s| {
                let h = enc.forward(g, s, &[toks.clone(), vec![3, 4]])?;
                Ok(g.sum(h))
            })
            .unwrap();
        assert!(err < 1e-4, "{err}");
    }
}
