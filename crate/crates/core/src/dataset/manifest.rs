use std::collections::HashMap;
use std::fmt;
use std::fs;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::grammar::{apply_modification, sample_modification, Modification};
use super::render::{render_2d, Image};
use super::scene::{generate_base_scenes, Condition, Scene, ShapeColorTable};
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    Train,
    Test,
}

impl Split {
    pub fn name(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Test => "test",
        }
    }

    /// Train scenes follow condition A, test scenes condition B.
    pub fn condition(self) -> Condition {
        match self {
            Split::Train => Condition::A,
            Split::Test => Condition::B,
        }
    }

    fn stream(self) -> u64 {
        match self {
            Split::Train => 0,
            Split::Test => 1,
        }
    }
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

/// Generation settings. Test sizes default to the train sizes.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DatasetConfig {
    pub n_base: usize,
    pub n_queries: usize,
    pub test_n_base: Option<usize>,
    pub test_n_queries: Option<usize>,
    pub seed: u64,
    pub canvas_px: usize,
}

impl Default for DatasetConfig {
    fn default() -> Self {
        DatasetConfig {
            n_base: 200,
            n_queries: 2000,
            test_n_base: None,
            test_n_queries: None,
            seed: 0,
            canvas_px: 48,
        }
    }
}

impl DatasetConfig {
    pub fn sizes(&self, split: Split) -> (usize, usize) {
        match split {
            Split::Train => (self.n_base, self.n_queries),
            Split::Test => (
                self.test_n_base.unwrap_or(self.n_base),
                self.test_n_queries.unwrap_or(self.n_queries),
            ),
        }
    }

    pub fn validate(&self) -> Result<()> {
        for split in [Split::Train, Split::Test] {
            let (n_base, n_queries) = self.sizes(split);
            if n_base == 0 {
                return Err(Error::Argument(format!("{split}: n_base must be at least 1")));
            }
            if n_queries < n_base {
                return Err(Error::Argument(format!(
                    "{split}: n_queries ({n_queries}) must be >= n_base ({n_base})"
                )));
            }
        }
        if self.canvas_px == 0 || self.canvas_px % 3 != 0 {
            return Err(Error::Argument(format!(
                "canvas_px {} must be a positive multiple of 3",
                self.canvas_px
            )));
        }
        Ok(())
    }
}

/// A (reference scene, edit, target scene) triple. `apply_seed` seeds the
/// draws an add edit makes, so replaying it reproduces the target exactly.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct QueryRecord {
    pub base: String,
    pub modification: Modification,
    pub text: String,
    pub target: String,
    pub apply_seed: u64,
}

/// Scenes and queries of one split.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct DatasetManifest {
    pub split: Split,
    pub condition: Condition,
    pub seed: u64,
    pub canvas_px: usize,
    pub scenes: Vec<Scene>,
    pub queries: Vec<QueryRecord>,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct QueryJson {
    base: String,
    text: String,
    target: String,
    seed: u64,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct RendererJson {
    canvas_px: usize,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct ManifestJson {
    condition: Condition,
    seed: u64,
    split: Split,
    renderer: RendererJson,
    scenes: Vec<Scene>,
    queries: Vec<QueryJson>,
}

impl DatasetManifest {
    pub fn table(&self) -> ShapeColorTable {
        ShapeColorTable::for_condition(self.condition)
    }

    pub fn scene_index(&self) -> HashMap<&str, usize> {
        self.scenes.iter().enumerate().map(|(i, s)| (s.id.as_str(), i)).collect()
    }

    pub fn scene(&self, id: &str) -> Option<&Scene> {
        self.scenes.iter().find(|s| s.id == id)
    }

    /// Number of base scenes (scenes that are not a query target).
    pub fn base_count(&self) -> usize {
        self.scenes.len() - self.queries.len()
    }

    pub fn to_json(&self) -> Result<String> {
        let file = ManifestJson {
            condition: self.condition,
            seed: self.seed,
            split: self.split,
            renderer: RendererJson {
                canvas_px: self.canvas_px,
            },
            scenes: self.scenes.clone(),
            queries: self
                .queries
                .iter()
                .map(|q| QueryJson {
                    base: q.base.clone(),
                    text: q.text.clone(),
                    target: q.target.clone(),
                    seed: q.apply_seed,
                })
                .collect(),
        };
        Ok(serde_json::to_string(&file)?)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let file: ManifestJson = serde_json::from_str(text)?;
        let queries = file
            .queries
            .into_iter()
            .map(|q| {
                Ok(QueryRecord {
                    modification: Modification::parse(&q.text)?,
                    base: q.base,
                    text: q.text,
                    target: q.target,
                    apply_seed: q.seed,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        let manifest = DatasetManifest {
            split: file.split,
            condition: file.condition,
            seed: file.seed,
            canvas_px: file.renderer.canvas_px,
            scenes: file.scenes,
            queries,
        };
        manifest.check_references()?;
        Ok(manifest)
    }

    /// Every query references existing scenes and scene ids are unique.
    pub fn check_references(&self) -> Result<()> {
        let index = self.scene_index();
        if index.len() != self.scenes.len() {
            return Err(Error::Data(format!("{}: duplicate scene ids", self.split)));
        }
        for (i, q) in self.queries.iter().enumerate() {
            for id in [&q.base, &q.target] {
                if !index.contains_key(id.as_str()) {
                    return Err(Error::Data(format!("query {i} references unknown scene `{id}`")));
                }
            }
        }
        if self.split.condition() != self.condition {
            return Err(Error::Data(format!(
                "{} split must use condition {}",
                self.split,
                self.split.condition()
            )));
        }
        Ok(())
    }

    /// Indices of queries whose recorded edit does not reproduce the
    /// recorded target from the recorded base.
    pub fn replay_failures(&self) -> Vec<usize> {
        let table = self.table();
        let index = self.scene_index();
        self.queries
            .iter()
            .enumerate()
            .filter(|(_, q)| {
                let (Some(&b), Some(&t)) = (index.get(q.base.as_str()), index.get(q.target.as_str())) else {
                    return true;
                };
                let mut rng = ChaCha8Rng::seed_from_u64(q.apply_seed);
                match apply_modification(&self.scenes[b], &q.modification, &table, &mut rng) {
                    Ok(out) => !out.same_layout(&self.scenes[t]) || q.modification.to_text() != q.text,
                    Err(_) => true,
                }
            })
            .map(|(i, _)| i)
            .collect()
    }

    /// Ids of scenes that break this split's shape-color table.
    pub fn condition_violations(&self) -> Vec<&str> {
        let table = self.table();
        self.scenes
            .iter()
            .filter(|s| !s.satisfies(&table))
            .map(|s| s.id.as_str())
            .collect()
    }

    pub fn render_all(&self) -> Result<Vec<Image>> {
        self.scenes.iter().map(|s| render_2d(s, self.canvas_px)).collect()
    }

    /// Writes `manifest.json` and `images/<id>.ppm` under `dir`.
    pub fn write(&self, dir: &Path) -> Result<()> {
        let images = dir.join("images");
        fs::create_dir_all(&images).map_err(|e| Error::io(&images, e))?;
        let path = dir.join("manifest.json");
        fs::write(&path, self.to_json()?).map_err(|e| Error::io(&path, e))?;
        for scene in &self.scenes {
            render_2d(scene, self.canvas_px)?.write_ppm(&images.join(format!("{}.ppm", scene.id)))?;
        }
        Ok(())
    }

    /// Reads a split written by [`DatasetManifest::write`] together with its
    /// images, in scene order.
    pub fn read(dir: &Path) -> Result<(Self, Vec<Image>)> {
        let path = dir.join("manifest.json");
        let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
        let manifest = Self::from_json(&text)?;
        let images = manifest
            .scenes
            .iter()
            .map(|s| {
                let img = Image::read_ppm(&dir.join("images").join(format!("{}.ppm", s.id)))?;
                if img.width != manifest.canvas_px || img.height != manifest.canvas_px {
                    return Err(Error::Data(format!("image {} is not {} px", s.id, manifest.canvas_px)));
                }
                Ok(img)
            })
            .collect::<Result<Vec<_>>>()?;
        Ok((manifest, images))
    }
}

/// A split's manifest together with its images, in scene order.
#[derive(Clone, Debug)]
pub struct SplitData {
    pub manifest: DatasetManifest,
    pub images: Vec<Image>,
    index: HashMap<String, usize>,
}

impl SplitData {
    pub fn new(manifest: DatasetManifest, images: Vec<Image>) -> Result<Self> {
        if images.len() != manifest.scenes.len() {
            return Err(Error::Data(format!(
                "{} images for {} scenes",
                images.len(),
                manifest.scenes.len()
            )));
        }
        manifest.check_references()?;
        let index = manifest
            .scenes
            .iter()
            .enumerate()
            .map(|(i, s)| (s.id.clone(), i))
            .collect();
        Ok(SplitData {
            manifest,
            images,
            index,
        })
    }

    /// Generates and renders a split in memory.
    pub fn generate(config: &DatasetConfig, split: Split) -> Result<Self> {
        let manifest = build_split(config, split)?;
        let images = manifest.render_all()?;
        Self::new(manifest, images)
    }

    pub fn read(dir: &Path) -> Result<Self> {
        let (manifest, images) = DatasetManifest::read(dir)?;
        Self::new(manifest, images)
    }

    pub fn position(&self, id: &str) -> Option<usize> {
        self.index.get(id).copied()
    }

    pub fn image(&self, id: &str) -> Option<&Image> {
        self.position(id).map(|i| &self.images[i])
    }

    pub fn ids(&self) -> Vec<String> {
        self.manifest.scenes.iter().map(|s| s.id.clone()).collect()
    }

    pub fn queries(&self) -> &[QueryRecord] {
        &self.manifest.queries
    }

    /// Reference image of query `i`.
    pub fn reference(&self, i: usize) -> &Image {
        &self.images[self.index[&self.manifest.queries[i].base]]
    }

    /// Target image of query `i`.
    pub fn target(&self, i: usize) -> &Image {
        &self.images[self.index[&self.manifest.queries[i].target]]
    }
}

/// Generates one split: base scenes, then `n_queries` edits assigned to
/// bases round-robin, each producing a new target scene.
pub fn build_split(config: &DatasetConfig, split: Split) -> Result<DatasetManifest> {
    config.validate()?;
    let (n_base, n_queries) = config.sizes(split);
    let condition = split.condition();
    let table = ShapeColorTable::for_condition(condition);
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    rng.set_stream(split.stream());
    let prefix = format!("{split}-");
    let bases = generate_base_scenes(n_base, &table, &prefix, &mut rng);
    let mut scenes = bases.clone();
    let mut queries = Vec::with_capacity(n_queries);
    for q in 0..n_queries {
        let base = &bases[q % n_base];
        let modification = sample_modification(base, &table, &mut rng)?;
        let apply_seed: u64 = rng.gen();
        let mut target = apply_modification(base, &modification, &table, &mut ChaCha8Rng::seed_from_u64(apply_seed))?;
        target.id = format!("{prefix}{:05}", n_base + q);
        queries.push(QueryRecord {
            base: base.id.clone(),
            text: modification.to_text(),
            modification,
            target: target.id.clone(),
            apply_seed,
        });
        scenes.push(target);
    }
    Ok(DatasetManifest {
        split,
        condition,
        seed: config.seed,
        canvas_px: config.canvas_px,
        scenes,
        queries,
    })
}

/// Train (condition A) and test (condition B) splits from independent
/// random streams.
pub fn build_dataset(config: &DatasetConfig) -> Result<(DatasetManifest, DatasetManifest)> {
    Ok((build_split(config, Split::Train)?, build_split(config, Split::Test)?))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small() -> DatasetConfig {
        DatasetConfig {
            n_base: 20,
            n_queries: 60,
            test_n_base: Some(10),
            test_n_queries: Some(30),
            seed: 4,
            canvas_px: 12,
        }
    }

    #[test]
    fn counts_and_conditions() {
        let (train, test) = build_dataset(&small()).unwrap();
        assert_eq!((train.base_count(), train.queries.len()), (20, 60));
        assert_eq!((test.base_count(), test.queries.len()), (10, 30));
        assert_eq!(train.condition, Condition::A);
        assert_eq!(test.condition, Condition::B);
        assert!(train.condition_violations().is_empty());
        assert!(test.condition_violations().is_empty());
        assert!(train.replay_failures().is_empty());
        assert!(test.replay_failures().is_empty());
    }

    #[test]
    fn json_round_trip_preserves_everything() {
        let (train, _) = build_dataset(&small()).unwrap();
        let json = train.to_json().unwrap();
        assert!(json.starts_with(r#"{"condition":"A","seed":4,"#));
        let back = DatasetManifest::from_json(&json).unwrap();
        assert_eq!(back, train);
        assert!(back.replay_failures().is_empty());
    }

    #[test]
    fn contradictory_config_rejected() {
        let mut cfg = small();
        cfg.n_base = 0;
        assert!(build_dataset(&cfg).is_err());
        let mut cfg = small();
        cfg.n_queries = 5;
        assert!(build_dataset(&cfg).is_err());
    }

    #[test]
    fn dangling_reference_is_a_data_error() {
        let (mut train, _) = build_dataset(&small()).unwrap();
        train.queries[0].target = "nope".into();
        assert!(matches!(train.check_references(), Err(Error::Data(_))));
    }
}
