//! The add / remove / change edit grammar and its template texts.

use std::fmt;

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use super::scene::{Color, ObjectSpec, Position, Scene, Shape, ShapeColorTable, Size};
use crate::error::{Error, Result};

/// Partial attribute pattern, optionally pinned to one cell.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash)]
pub struct Selector {
    pub size: Option<Size>,
    pub color: Option<Color>,
    pub shape: Option<Shape>,
    pub position: Option<Position>,
}

impl Selector {
    pub fn at(position: Position) -> Self {
        Selector {
            position: Some(position),
            ..Default::default()
        }
    }

    pub fn is_empty(&self) -> bool {
        self.size.is_none() && self.color.is_none() && self.shape.is_none() && self.position.is_none()
    }

    pub fn matches(&self, pos: Position, obj: &ObjectSpec) -> bool {
        self.position.is_none_or(|p| p == pos)
            && self.size.is_none_or(|s| s == obj.size)
            && self.color.is_none_or(|c| c == obj.color)
            && self.shape.is_none_or(|s| s == obj.shape)
    }

    pub fn matching(&self, scene: &Scene) -> Vec<Position> {
        scene
            .objects()
            .filter(|(p, o)| self.matches(*p, o))
            .map(|(p, _)| p)
            .collect()
    }

    /// `[big|small]? [color]? [shape|object]`
    fn attribute_words(&self, out: &mut Vec<String>) {
        if let Some(s) = self.size {
            out.push(s.text().into());
        }
        if let Some(c) = self.color {
            out.push(c.name().into());
        }
        out.push(self.shape.map_or("object", Shape::name).into());
    }

    /// Selector phrase used by remove and change: an optional leading
    /// position name followed by the attribute words.
    fn phrase(&self, out: &mut Vec<String>) {
        if let Some(p) = self.position {
            out.push(p.name());
        }
        self.attribute_words(out);
    }

    /// Every selector shape the grammar can express: each attribute subset
    /// (non-empty) plus the nine position-only selectors.
    pub fn all() -> Vec<Selector> {
        let mut out: Vec<Selector> = Position::all().map(Selector::at).collect();
        let sizes = std::iter::once(None).chain(Size::ALL.iter().copied().map(Some));
        for size in sizes {
            for color in std::iter::once(None).chain(Color::ALL.iter().copied().map(Some)) {
                for shape in std::iter::once(None).chain(Shape::ALL.iter().copied().map(Some)) {
                    let sel = Selector {
                        size,
                        color,
                        shape,
                        position: None,
                    };
                    if !sel.is_empty() {
                        out.push(sel);
                    }
                }
            }
        }
        out
    }
}

impl fmt::Display for Selector {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let mut words = Vec::new();
        self.phrase(&mut words);
        f.write_str(&words.join(" "))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ModificationKind {
    Add,
    Remove,
    Change,
}

impl ModificationKind {
    pub const ALL: [ModificationKind; 3] = [ModificationKind::Add, ModificationKind::Remove, ModificationKind::Change];

    pub fn name(self) -> &'static str {
        match self {
            ModificationKind::Add => "add",
            ModificationKind::Remove => "remove",
            ModificationKind::Change => "change",
        }
    }

    /// Kind of a template text, judged by its leading verb.
    pub fn of_text(text: &str) -> Option<Self> {
        match text.split_whitespace().next()? {
            "add" => Some(ModificationKind::Add),
            "remove" => Some(ModificationKind::Remove),
            "make" => Some(ModificationKind::Change),
            _ => None,
        }
    }
}

impl fmt::Display for ModificationKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

/// New value written by a change edit; only color or size may change.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum ChangeValue {
    Color(Color),
    Size(Size),
}

impl ChangeValue {
    fn word(self) -> &'static str {
        match self {
            ChangeValue::Color(c) => c.name(),
            ChangeValue::Size(s) => s.text(),
        }
    }

    fn holds_for(self, obj: &ObjectSpec) -> bool {
        match self {
            ChangeValue::Color(c) => obj.color == c,
            ChangeValue::Size(s) => obj.size == s,
        }
    }

    fn write(self, obj: &mut ObjectSpec) {
        match self {
            ChangeValue::Color(c) => obj.color = c,
            ChangeValue::Size(s) => obj.size = s,
        }
    }
}

/// One scene edit.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Modification {
    /// Place one object. Unset attributes and an unset position are drawn
    /// when the edit is applied.
    Add { object: Selector },
    /// Delete every object matching the selector.
    Remove { selector: Selector },
    /// Overwrite color or size of every object matching the selector.
    Change { selector: Selector, value: ChangeValue },
}

impl Modification {
    pub fn kind(&self) -> ModificationKind {
        match self {
            Modification::Add { .. } => ModificationKind::Add,
            Modification::Remove { .. } => ModificationKind::Remove,
            Modification::Change { .. } => ModificationKind::Change,
        }
    }

    /// Lowercase template tokens, e.g. `add big red cube to middle-center`.
    pub fn to_tokens(&self) -> Vec<String> {
        let mut out = Vec::new();
        match self {
            Modification::Add { object } => {
                out.push("add".into());
                object.attribute_words(&mut out);
                if let Some(p) = object.position {
                    out.push("to".into());
                    out.push(p.name());
                }
            }
            Modification::Remove { selector } => {
                out.push("remove".into());
                selector.phrase(&mut out);
            }
            Modification::Change { selector, value } => {
                out.push("make".into());
                selector.phrase(&mut out);
                out.push(value.word().into());
            }
        }
        out
    }

    pub fn to_text(&self) -> String {
        self.to_tokens().join(" ")
    }

    /// Inverse of [`Modification::to_text`].
    pub fn parse(text: &str) -> Result<Self> {
        let tokens: Vec<&str> = text.split_whitespace().collect();
        let bad = || Error::Data(format!("not a modification text: `{text}`"));
        let (&verb, rest) = tokens.split_first().ok_or_else(bad)?;
        match verb {
            "add" => {
                let (object, rest) = parse_attributes(rest).ok_or_else(bad)?;
                let position = match rest {
                    [] => None,
                    ["to", p] => Some(p.parse().map_err(|_| bad())?),
                    _ => return Err(bad()),
                };
                Ok(Modification::Add {
                    object: Selector { position, ..object },
                })
            }
            "remove" => {
                let selector = parse_selector(rest).ok_or_else(bad)?;
                Ok(Modification::Remove { selector })
            }
            "make" => {
                let (&last, sel) = rest.split_last().ok_or_else(bad)?;
                let selector = parse_selector(sel).ok_or_else(bad)?;
                let value = match (Size::from_text(last), last.parse::<Color>()) {
                    (Some(s), _) => ChangeValue::Size(s),
                    (None, Ok(c)) => ChangeValue::Color(c),
                    _ => return Err(bad()),
                };
                Ok(Modification::Change { selector, value })
            }
            _ => Err(bad()),
        }
    }

    /// Whether `target` is consistent with this edit's text alone, without
    /// knowing the reference scene.
    pub fn text_consistent_with(&self, target: &Scene) -> bool {
        match self {
            Modification::Add { object } => !object.matching(target).is_empty(),
            Modification::Remove { selector } => selector.matching(target).is_empty(),
            Modification::Change { selector, value } => {
                let mut after = *selector;
                match value {
                    ChangeValue::Color(c) => after.color = Some(*c),
                    ChangeValue::Size(s) => after.size = Some(*s),
                }
                // Every object the selector still matches must carry the new value.
                !after.matching(target).is_empty()
                    && target
                        .objects()
                        .filter(|(p, o)| selector.matches(*p, o))
                        .all(|(_, o)| value.holds_for(&o))
            }
        }
    }
}

fn parse_attributes<'a, 'b>(mut tokens: &'b [&'a str]) -> Option<(Selector, &'b [&'a str])> {
    let mut sel = Selector::default();
    if let Some(s) = tokens.first().and_then(|t| Size::from_text(t)) {
        sel.size = Some(s);
        tokens = &tokens[1..];
    }
    if let Some(c) = tokens.first().and_then(|t| t.parse::<Color>().ok()) {
        sel.color = Some(c);
        tokens = &tokens[1..];
    }
    let (&noun, rest) = tokens.split_first()?;
    if noun != "object" {
        sel.shape = Some(noun.parse().ok()?);
    }
    Some((sel, rest))
}

fn parse_selector(tokens: &[&str]) -> Option<Selector> {
    let (position, tokens) = match tokens.first().and_then(|t| t.parse::<Position>().ok()) {
        Some(p) => (Some(p), &tokens[1..]),
        None => (None, tokens),
    };
    let (sel, rest) = parse_attributes(tokens)?;
    rest.is_empty().then_some(Selector { position, ..sel })
}

impl fmt::Display for Modification {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.to_text())
    }
}

/// Selector built from one concrete object: each attribute kept with
/// probability 1/2; if none is kept the object's position is used instead.
fn random_selector<R: Rng + ?Sized>(pos: Position, obj: &ObjectSpec, rng: &mut R) -> Selector {
    let sel = Selector {
        size: rng.gen_bool(0.5).then_some(obj.size),
        color: rng.gen_bool(0.5).then_some(obj.color),
        shape: rng.gen_bool(0.5).then_some(obj.shape),
        position: None,
    };
    if sel.is_empty() {
        Selector::at(pos)
    } else {
        sel
    }
}

/// Kinds that can be applied to `scene`: add needs an empty cell, remove
/// and change need an object.
pub fn viable_kinds(scene: &Scene) -> Vec<ModificationKind> {
    let mut kinds = Vec::with_capacity(3);
    if !scene.empty_cells().is_empty() {
        kinds.push(ModificationKind::Add);
    }
    if scene.object_count() > 0 {
        kinds.push(ModificationKind::Remove);
        kinds.push(ModificationKind::Change);
    }
    kinds
}

/// Draws a random edit that is guaranteed to apply to `scene`.
pub fn sample_modification<R: Rng + ?Sized>(scene: &Scene, table: &ShapeColorTable, rng: &mut R) -> Result<Modification> {
    let kinds = viable_kinds(scene);
    let kind = *kinds
        .choose(rng)
        .ok_or_else(|| Error::State("scene admits no modification".into()))?;
    let objects: Vec<(Position, ObjectSpec)> = scene.objects().collect();
    Ok(match kind {
        ModificationKind::Add => {
            let obj = table.sample_object(rng);
            let pos = *scene.empty_cells().choose(rng).expect("add is viable");
            let object = Selector {
                size: rng.gen_bool(0.5).then_some(obj.size),
                color: rng.gen_bool(0.5).then_some(obj.color),
                shape: rng.gen_bool(0.5).then_some(obj.shape),
                position: rng.gen_bool(0.5).then_some(pos),
            };
            Modification::Add { object }
        }
        ModificationKind::Remove => {
            let (pos, obj) = *objects.choose(rng).expect("remove is viable");
            Modification::Remove {
                selector: random_selector(pos, &obj, rng),
            }
        }
        ModificationKind::Change => {
            let (pos, obj) = *objects.choose(rng).expect("change is viable");
            let selector = random_selector(pos, &obj, rng);
            let matched: Vec<ObjectSpec> = selector
                .matching(scene)
                .into_iter()
                .filter_map(|p| scene.get(p))
                .collect();
            // A new color must be legal for every shape it lands on.
            let colors: Vec<Color> = Color::ALL
                .iter()
                .copied()
                .filter(|&c| c != obj.color && matched.iter().all(|m| table.colors(m.shape).contains(&c)))
                .collect();
            let value = if rng.gen_bool(0.5) && !colors.is_empty() {
                ChangeValue::Color(*colors.choose(rng).expect("non-empty"))
            } else {
                ChangeValue::Size(obj.size.other())
            };
            Modification::Change { selector, value }
        }
    })
}

/// Applies an edit, returning a new scene (same id as the input).
///
/// Add draws its unspecified cell uniformly from the empty cells and its
/// unspecified attributes from `table`'s object distribution conditioned on
/// the given ones.
pub fn apply_modification<R: Rng + ?Sized>(
    scene: &Scene,
    modification: &Modification,
    table: &ShapeColorTable,
    rng: &mut R,
) -> Result<Scene> {
    let mut out = scene.clone();
    match modification {
        Modification::Add { object } => {
            let pos = match object.position {
                Some(p) if scene.get(p).is_some() => return Err(Error::CellOccupied(p.name())),
                Some(p) => p,
                None => *scene.empty_cells().choose(rng).ok_or(Error::GridFull)?,
            };
            let feasible = Shape::ALL.iter().any(|&shape| {
                table.colors(shape).iter().any(|&color| {
                    Size::ALL.iter().any(|&size| {
                        object.matches(
                            pos,
                            &ObjectSpec {
                                color,
                                shape,
                                size,
                            },
                        )
                    })
                })
            });
            if !feasible {
                return Err(Error::Argument(format!(
                    "`{}` cannot be satisfied under the active shape-color table",
                    modification.to_text()
                )));
            }
            let obj = loop {
                let candidate = table.sample_object(rng);
                if object.matches(pos, &candidate) {
                    break candidate;
                }
            };
            out.set(pos, Some(obj));
        }
        Modification::Remove { selector } => {
            let hits = selector.matching(scene);
            if hits.is_empty() {
                return Err(Error::NoMatch(selector.to_string()));
            }
            for p in hits {
                out.set(p, None);
            }
        }
        Modification::Change { selector, value } => {
            let hits = selector.matching(scene);
            if hits.is_empty() {
                return Err(Error::NoMatch(selector.to_string()));
            }
            for p in hits {
                let mut obj = scene.get(p).expect("matched cells are occupied");
                value.write(&mut obj);
                out.set(p, Some(obj));
            }
        }
    }
    Ok(out)
}

/// Whether some single edit of the grammar can turn `reference` into
/// `candidate` (identical layouts excluded).
pub fn reachable_in_one_step(reference: &Scene, candidate: &Scene) -> bool {
    let mut added = Vec::new();
    let mut removed = Vec::new();
    let mut changed = Vec::new();
    for p in Position::all() {
        match (reference.get(p), candidate.get(p)) {
            (None, Some(o)) => added.push((p, o)),
            (Some(o), None) => removed.push((p, o)),
            (Some(a), Some(b)) if a != b => changed.push((p, a, b)),
            _ => {}
        }
    }
    match (added.len(), removed.is_empty(), changed.is_empty()) {
        (1, true, true) => true,
        (0, false, true) => {
            let gone: Vec<Position> = removed.iter().map(|(p, _)| *p).collect();
            Selector::all().iter().any(|s| s.matching(reference) == gone)
        }
        (0, true, false) => {
            let first = changed[0];
            let value = if first.1.color != first.2.color {
                ChangeValue::Color(first.2.color)
            } else {
                ChangeValue::Size(first.2.size)
            };
            let consistent = changed.iter().all(|&(_, a, b)| {
                let mut expect = a;
                value.write(&mut expect);
                expect == b
            });
            consistent
                && Selector::all().iter().any(|s| {
                    let hits = s.matching(reference);
                    changed.iter().all(|(p, _, _)| hits.contains(p))
                        && hits.iter().all(|p| {
                            changed.iter().any(|(q, _, _)| q == p)
                                || value.holds_for(&reference.get(*p).expect("occupied"))
                        })
                })
        }
        _ => false,
    }
}
