use std::collections::{BTreeMap, HashMap, HashSet};
use std::fs;
use std::path::Path;

use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use tirg_core::dataset::{
    apply_modification, build_dataset, generate_base_scenes, sample_modification, ChangeValue, Color, DatasetConfig,
    Modification, ModificationKind, ObjectSpec, Position, Scene, ShapeColorTable, Shape, Size, Split, SplitData,
};

fn desk() -> DatasetConfig {
    DatasetConfig {
        n_base: 200,
        n_queries: 2000,
        ..Default::default()
    }
}

fn tree(dir: &Path) -> BTreeMap<String, Vec<u8>> {
    let mut out = BTreeMap::new();
    let mut stack = vec![dir.to_path_buf()];
    while let Some(d) = stack.pop() {
        for e in fs::read_dir(&d).unwrap() {
            let p = e.unwrap().path();
            if p.is_dir() {
                stack.push(p);
            } else {
                let key = p.strip_prefix(dir).unwrap().display().to_string();
                out.insert(key, fs::read(&p).unwrap());
            }
        }
    }
    out
}

#[test]
fn desk_scale_counts_replay_and_conditions() {
    let (train, test) = build_dataset(&desk()).unwrap();
    for (m, bases, queries) in [(&train, 200, 2000), (&test, 200, 2000)] {
        assert_eq!(m.queries.len(), queries);
        assert_eq!(m.scenes.len(), bases + queries);
        assert!(m.replay_failures().is_empty());
        assert!(m.condition_violations().is_empty());
        m.check_references().unwrap();
    }
    assert!(train.scenes.iter().all(|s| s.satisfies(&ShapeColorTable::cogent_a())));
    assert!(test.scenes.iter().all(|s| s.satisfies(&ShapeColorTable::cogent_b())));
}

#[test]
fn regeneration_is_byte_identical() {
    let cfg = DatasetConfig {
        n_base: 20,
        n_queries: 120,
        ..Default::default()
    };
    let (a, b) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
    for dir in [a.path(), b.path()] {
        for split in [Split::Train, Split::Test] {
            let data = SplitData::generate(&cfg, split).unwrap();
            data.manifest.write(&dir.join(split.name())).unwrap();
        }
    }
    let (ta, tb) = (tree(a.path()), tree(b.path()));
    assert_eq!(ta.len(), 2 * (1 + 20 + 120));
    assert!(ta == tb);

    let back = SplitData::read(&a.path().join("train")).unwrap();
    let fresh = SplitData::generate(&cfg, Split::Train).unwrap();
    assert_eq!(back.manifest.to_json().unwrap(), fresh.manifest.to_json().unwrap());
    assert_eq!(back.images, fresh.images);
}

#[test]
fn full_scale_yields_seventeen_thousand_images() {
    let cfg = DatasetConfig {
        n_base: 1000,
        n_queries: 16000,
        ..Default::default()
    };
    let (train, _) = build_dataset(&cfg).unwrap();
    assert_eq!(train.queries.len(), 16000);
    assert_eq!(train.scenes.len(), 17000);
}

#[test]
fn mean_object_count_is_four() {
    let mut rng = ChaCha8Rng::seed_from_u64(21);
    let scenes = generate_base_scenes(10_000, &ShapeColorTable::cogent_a(), "s", &mut rng);
    let mean = scenes.iter().map(|s| s.object_count() as f64).sum::<f64>() / 1e4;
    assert!((mean - 4.0).abs() < 0.05, "{mean}");
}

#[test]
fn viable_kinds_are_uniform() {
    let table = ShapeColorTable::cogent_a();
    let mut scene = Scene::empty("mixed");
    let obj = ObjectSpec {
        color: Color::Gray,
        shape: Shape::Cube,
        size: Size::Large,
    };
    scene.set(Position::new(0, 0).unwrap(), Some(obj));
    scene.set(Position::new(2, 1).unwrap(), Some(obj));
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let mut counts: HashMap<ModificationKind, usize> = HashMap::new();
    for _ in 0..10_000 {
        *counts.entry(sample_modification(&scene, &table, &mut rng).unwrap().kind()).or_default() += 1;
    }
    for kind in ModificationKind::ALL {
        let f = counts[&kind] as f64 / 1e4;
        assert!((f - 1.0 / 3.0).abs() < 0.02, "{kind}: {f}");
    }
}

#[test]
fn emitted_texts_identify_their_edit() {
    let (train, test) = build_dataset(&desk()).unwrap();
    for m in [train, test] {
        let mut per_base: HashMap<&str, HashMap<String, Modification>> = HashMap::new();
        for q in &m.queries {
            assert_eq!(Modification::parse(&q.text).unwrap(), q.modification);
            let seen = per_base.entry(&q.base).or_default();
            if let Some(prev) = seen.insert(q.text.clone(), q.modification) {
                assert_eq!(prev, q.modification, "one text, two edits: {}", q.text);
            }
        }
    }
}

#[test]
fn lexicon_tokens_are_in_the_vocabulary() {
    let vocab = tirg_core::encoders::Vocabulary::css();
    let (train, _) = build_dataset(&desk()).unwrap();
    let words: HashSet<&str> = train.queries.iter().flat_map(|q| q.text.split(' ')).collect();
    for w in words {
        assert!(vocab.get(w).is_some(), "`{w}` missing");
    }
}

fn scene_strategy() -> impl Strategy<Value = (Scene, u64)> {
    (any::<u64>(), any::<bool>()).prop_map(|(seed, b)| {
        let table = if b { ShapeColorTable::cogent_a() } else { ShapeColorTable::cogent_b() };
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (generate_base_scenes(1, &table, "p", &mut rng).remove(0), seed)
    })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(200))]

    #[test]
    fn sampled_edits_apply_with_their_stated_semantics((scene, seed) in scene_strategy()) {
        let table = ShapeColorTable::cogent_a();
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed);
        let m = sample_modification(&scene, &table, &mut rng).unwrap();
        let out = apply_modification(&scene, &m, &table, &mut rng).unwrap();
        prop_assert!(m.text_consistent_with(&out));
        match m {
            Modification::Add { object } => {
                prop_assert_eq!(out.object_count(), scene.object_count() + 1);
                prop_assert!(!object.matching(&out).is_empty());
            }
            Modification::Remove { selector } => {
                prop_assert!(selector.matching(&out).is_empty());
                prop_assert!(out.object_count() < scene.object_count());
            }
            Modification::Change { selector, value } => {
                for p in selector.matching(&scene) {
                    let o = out.get(p).unwrap();
                    match value {
                        ChangeValue::Color(c) => prop_assert_eq!(o.color, c),
                        ChangeValue::Size(s) => prop_assert_eq!(o.size, s),
                    }
                }
                prop_assert_eq!(out.object_count(), scene.object_count());
            }
        }
    }

    #[test]
    fn text_round_trips((scene, seed) in scene_strategy()) {
        let table = ShapeColorTable::cogent_b();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let m = sample_modification(&scene, &table, &mut rng).unwrap();
        let text = m.to_text();
        prop_assert_eq!(Modification::parse(&text).unwrap(), m);
        prop_assert_eq!(text.to_lowercase(), text.clone());
    }
}
