//! Full retrieval model: image encoder, text encoder and a composition
//! strategy sharing one parameter store.

use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::composition::{Composition, CompositionConfig, IdentityContribution, LayerMode, Strategy};
use crate::dataset::Image;
use crate::encoders::{tokenize, ImageEncoder, ImageEncoderConfig, TextEncoder, TextEncoderConfig, Vocabulary};
use crate::error::{Error, Result};
use crate::tensor::{read_checkpoint, write_checkpoint, Graph, ParamStore, Tensor, Var};

/// Images per forward pass when embedding outside of training.
const EMBED_CHUNK: usize = 64;

#[derive(Clone, Debug, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    pub image: ImageEncoderConfig,
    pub text: TextEncoderConfig,
    pub composition: CompositionConfig,
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        self.image.validate()?;
        self.text.validate()?;
        self.composition.validate()
    }
}

#[derive(Clone, Debug)]
pub struct Model {
    pub config: ModelConfig,
    pub vocab: Vocabulary,
    pub store: ParamStore,
    pub image: ImageEncoder,
    pub text: TextEncoder,
    pub composition: Composition,
}

impl Model {
    /// Randomly initialized model; the same seed gives the same weights.
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let vocab = Vocabulary::css();
        let mut store = ParamStore::new();
        let image = ImageEncoder::new(config.image.clone(), &mut store, &mut rng)?;
        let text = TextEncoder::new(config.text.clone(), &vocab, &mut store, &mut rng)?;
        let feature_dim = match config.composition.layer_mode {
            LayerMode::Fc => config.image.embed_dim,
            LayerMode::Conv => config.image.map_channels(),
        };
        let composition = Composition::new(
            config.composition.clone(),
            feature_dim,
            config.text.hidden_dim,
            &mut store,
            &mut rng,
        )?;
        Ok(Model {
            config,
            vocab,
            store,
            image,
            text,
            composition,
        })
    }

    /// Builds the model for `config` and loads its weights from a
    /// checkpoint. Names and shapes must match exactly.
    pub fn load(config: ModelConfig, path: &Path) -> Result<Self> {
        let mut model = Model::new(config, 0)?;
        model.store.load_values(read_checkpoint(path)?)?;
        Ok(model)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        write_checkpoint(&self.store, path)
    }

    pub fn strategy(&self) -> Strategy {
        self.composition.strategy()
    }

    pub fn embed_dim(&self) -> usize {
        self.config.image.embed_dim
    }

    pub fn tokenize(&self, text: &str) -> Vec<usize> {
        tokenize(text, &self.vocab)
    }

    /// Composed query embeddings `[N, D]` for reference images `[N, H, W, 3]`
    /// and their modification tokens.
    pub fn query_embedding<R: Rng + ?Sized>(
        &self,
        g: &mut Graph,
        images: Var,
        tokens: &[Vec<usize>],
        dropout_rng: Option<&mut R>,
    ) -> Result<Var> {
        self.query_embedding_with(&self.store, g, images, tokens, dropout_rng)
    }

    /// [`Model::query_embedding`] with parameter values taken from `store`,
    /// which must have this model's layout.
    pub fn query_embedding_with<R: Rng + ?Sized>(
        &self,
        store: &ParamStore,
        g: &mut Graph,
        images: Var,
        tokens: &[Vec<usize>],
        dropout_rng: Option<&mut R>,
    ) -> Result<Var> {
        let t = self.text.forward(g, store, tokens)?;
        let map = self.image.feature_map(g, store, images)?;
        match self.composition.layer_mode() {
            LayerMode::Fc => {
                let pooled = self.image.pool(g, store, map)?;
                self.composition.compose(g, store, pooled, t, dropout_rng)
            }
            LayerMode::Conv => {
                let composed = self.composition.compose(g, store, map, t, dropout_rng)?;
                self.image.pool(g, store, composed)
            }
        }
    }

    /// Database embeddings `[N, D]`: the pooled image feature.
    pub fn target_embedding(&self, g: &mut Graph, images: Var) -> Result<Var> {
        self.target_embedding_with(&self.store, g, images)
    }

    pub fn target_embedding_with(&self, store: &ParamStore, g: &mut Graph, images: Var) -> Result<Var> {
        Ok(self.image.forward(g, store, images)?.pooled)
    }

    /// Embeds images for retrieval, one row per image.
    pub fn embed_images(&self, images: &[&Image]) -> Result<Tensor> {
        let rows = parallel_chunks(images, |chunk| {
            let mut g = Graph::inference();
            let x = g.constant(self.image.batch_tensor(chunk)?);
            let out = self.target_embedding(&mut g, x)?;
            Ok(g.value(out).clone())
        })?;
        concat_rows(rows, self.embed_dim())
    }

    /// Composed embeddings for `(reference image, modification text)` pairs.
    pub fn embed_queries(&self, queries: &[(&Image, &str)]) -> Result<Tensor> {
        let rows = parallel_chunks(queries, |chunk| {
            let mut g = Graph::inference();
            let images: Vec<&Image> = chunk.iter().map(|q| q.0).collect();
            let x = g.constant(self.image.batch_tensor(&images)?);
            let tokens = self.tokenize_all(chunk.iter().map(|q| q.1))?;
            let out = self.query_embedding::<ChaCha8Rng>(&mut g, x, &tokens, None)?;
            Ok(g.value(out).clone())
        })?;
        concat_rows(rows, self.embed_dim())
    }

    fn tokenize_all<'a>(&self, texts: impl Iterator<Item = &'a str>) -> Result<Vec<Vec<usize>>> {
        texts
            .map(|t| {
                let toks = self.tokenize(t);
                if toks.is_empty() {
                    Err(Error::Argument("empty modification text".into()))
                } else {
                    Ok(toks)
                }
            })
            .collect()
    }

    /// Mean identity contribution over the given queries; `None` for
    /// strategies without gate and residual paths.
    pub fn identity_contribution(&self, queries: &[(&Image, &str)]) -> Result<Option<IdentityContribution>> {
        if self.strategy() != Strategy::Tirg {
            return Ok(None);
        }
        if queries.is_empty() {
            return Err(Error::Argument("identity contribution needs at least one query".into()));
        }
        let parts = parallel_chunks(queries, |chunk| {
            let mut g = Graph::inference();
            let images: Vec<&Image> = chunk.iter().map(|q| q.0).collect();
            let x = g.constant(self.image.batch_tensor(&images)?);
            let tokens = self.tokenize_all(chunk.iter().map(|q| q.1))?;
            let t = self.text.forward(&mut g, &self.store, &tokens)?;
            let f = self.image.forward(&mut g, &self.store, x)?;
            let x = match self.composition.layer_mode() {
                LayerMode::Fc => f.pooled,
                LayerMode::Conv => f.map,
            };
            self.composition.identity_contribution(&mut g, &self.store, x, t)
        })?;
        let samples: usize = parts.iter().map(|p| p.samples).sum();
        Ok(Some(IdentityContribution {
            mean: parts.iter().map(|p| p.mean * p.samples as f64).sum::<f64>() / samples as f64,
            degenerate: parts.iter().map(|p| p.degenerate).sum(),
            samples,
        }))
    }
}

/// Applies `f` to fixed-size chunks of `items`, spreading chunks over the
/// available cores. Results keep chunk order.
fn parallel_chunks<T: Sync, U: Send>(items: &[T], f: impl Fn(&[T]) -> Result<U> + Sync) -> Result<Vec<U>> {
    let chunks: Vec<&[T]> = items.chunks(EMBED_CHUNK).collect();
    let workers = std::thread::available_parallelism()
        .map_or(1, |n| n.get())
        .min(chunks.len());
    if workers <= 1 {
        return chunks.into_iter().map(f).collect();
    }
    let per = chunks.len().div_ceil(workers);
    std::thread::scope(|s| {
        let handles: Vec<_> = chunks
            .chunks(per)
            .map(|group| {
                let f = &f;
                s.spawn(move || group.iter().map(|c| f(c)).collect::<Result<Vec<U>>>())
            })
            .collect();
        let mut out = Vec::with_capacity(chunks.len());
        for h in handles {
            out.extend(h.join().expect("embedding worker panicked")?);
        }
        Ok(out)
    })
}

fn concat_rows(parts: Vec<Tensor>, dim: usize) -> Result<Tensor> {
    let n: usize = parts.iter().map(|t| t.shape()[0]).sum();
    if n == 0 {
        return Err(Error::Argument("nothing to embed".into()));
    }
    let data = parts.into_iter().flat_map(Tensor::into_data).collect();
    Tensor::new(&[n, dim], data)
}
