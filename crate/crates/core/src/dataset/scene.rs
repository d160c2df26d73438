use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

macro_rules! word_enum {
    ($(#[$meta:meta])* $name:ident { $($variant:ident => $word:literal),+ $(,)? }) => {
        $(#[$meta])*
        #[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
        #[serde(rename_all = "snake_case")]
        pub enum $name { $($variant),+ }

        impl $name {
            pub const ALL: &'static [$name] = &[$($name::$variant),+];

            pub fn name(self) -> &'static str {
                match self { $($name::$variant => $word),+ }
            }
        }

        impl fmt::Display for $name {
            fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
                f.write_str(self.name())
            }
        }

        impl FromStr for $name {
            type Err = Error;

            fn from_str(s: &str) -> Result<Self> {
                match s {
                    $($word => Ok($name::$variant),)+
                    _ => Err(Error::Argument(format!(concat!("unknown ", stringify!($name), " `{}`"), s))),
                }
            }
        }
    };
}

word_enum!(
    /// The eight CLEVR color names.
    Color {
        Gray => "gray",
        Red => "red",
        Blue => "blue",
        Green => "green",
        Brown => "brown",
        Purple => "purple",
        Cyan => "cyan",
        Yellow => "yellow",
    }
);

word_enum!(Shape {
    Cube => "cube",
    Sphere => "sphere",
    Cylinder => "cylinder",
});

word_enum!(Size {
    Large => "large",
    Small => "small",
});

impl Size {
    /// Word used in modification texts.
    pub fn text(self) -> &'static str {
        match self {
            Size::Large => "big",
            Size::Small => "small",
        }
    }

    pub fn from_text(word: &str) -> Option<Size> {
        match word {
            "big" => Some(Size::Large),
            "small" => Some(Size::Small),
            _ => None,
        }
    }

    pub fn other(self) -> Size {
        match self {
            Size::Large => Size::Small,
            Size::Small => Size::Large,
        }
    }
}

/// A fully specified object.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct ObjectSpec {
    #[serde(rename = "c")]
    pub color: Color,
    #[serde(rename = "s")]
    pub shape: Shape,
    #[serde(rename = "z")]
    pub size: Size,
}

/// A cell of the 3×3 grid.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Position {
    row: u8,
    col: u8,
}

const ROW_NAMES: [&str; 3] = ["top", "middle", "bottom"];
const COL_NAMES: [&str; 3] = ["left", "center", "right"];

impl Position {
    pub fn new(row: usize, col: usize) -> Result<Self> {
        if row > 2 || col > 2 {
            return Err(Error::Argument(format!("position ({row}, {col}) outside the 3x3 grid")));
        }
        Ok(Position {
            row: row as u8,
            col: col as u8,
        })
    }

    pub fn row(self) -> usize {
        self.row as usize
    }

    pub fn col(self) -> usize {
        self.col as usize
    }

    /// All nine cells in row-major order.
    pub fn all() -> impl Iterator<Item = Position> {
        (0..9u8).map(|i| Position { row: i / 3, col: i % 3 })
    }

    /// Canonical name such as `middle-center`.
    pub fn name(self) -> String {
        format!("{}-{}", ROW_NAMES[self.row()], COL_NAMES[self.col()])
    }
}

impl fmt::Display for Position {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.name())
    }
}

impl FromStr for Position {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let (r, c) = s
            .split_once('-')
            .ok_or_else(|| Error::Argument(format!("bad position `{s}`")))?;
        let row = ROW_NAMES.iter().position(|&n| n == r);
        let col = COL_NAMES.iter().position(|&n| n == c);
        match (row, col) {
            (Some(row), Some(col)) => Position::new(row, col),
            _ => Err(Error::Argument(format!("bad position `{s}`"))),
        }
    }
}

/// Which shape-color table a split draws from.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Condition {
    A,
    B,
}

impl fmt::Display for Condition {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Condition::A => "A",
            Condition::B => "B",
        })
    }
}

/// Allowed colors per shape. Shapes missing from the map may take any color.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ShapeColorTable {
    pub allowed: BTreeMap<Shape, Vec<Color>>,
}

impl ShapeColorTable {
    /// CLEVR CoGenT condition A: cubes in gray/blue/brown/yellow, cylinders in
    /// red/green/purple/cyan, spheres unrestricted.
    pub fn cogent_a() -> Self {
        use Color::*;
        ShapeColorTable {
            allowed: BTreeMap::from([
                (Shape::Cube, vec![Gray, Blue, Brown, Yellow]),
                (Shape::Cylinder, vec![Red, Green, Purple, Cyan]),
            ]),
        }
    }

    /// Condition B swaps the cube and cylinder color sets of condition A.
    pub fn cogent_b() -> Self {
        let a = Self::cogent_a();
        ShapeColorTable {
            allowed: BTreeMap::from([
                (Shape::Cube, a.allowed[&Shape::Cylinder].clone()),
                (Shape::Cylinder, a.allowed[&Shape::Cube].clone()),
            ]),
        }
    }

    pub fn for_condition(condition: Condition) -> Self {
        match condition {
            Condition::A => Self::cogent_a(),
            Condition::B => Self::cogent_b(),
        }
    }

    pub fn colors(&self, shape: Shape) -> &[Color] {
        self.allowed.get(&shape).map_or(Color::ALL, Vec::as_slice)
    }

    pub fn permits(&self, obj: &ObjectSpec) -> bool {
        self.colors(obj.shape).contains(&obj.color)
    }

    /// Shape uniform, then color uniform over the shape's allowed colors,
    /// size uniform.
    pub fn sample_object<R: Rng + ?Sized>(&self, rng: &mut R) -> ObjectSpec {
        let shape = *Shape::ALL.choose(rng).expect("non-empty");
        let color = *self.colors(shape).choose(rng).expect("every shape allows a color");
        let size = *Size::ALL.choose(rng).expect("non-empty");
        ObjectSpec { color, shape, size }
    }
}

/// A 3×3 grid with at most one object per cell.
#[derive(Clone, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Scene {
    pub id: String,
    pub grid: [[Option<ObjectSpec>; 3]; 3],
}

impl Scene {
    pub fn empty(id: impl Into<String>) -> Self {
        Scene {
            id: id.into(),
            grid: [[None; 3]; 3],
        }
    }

    pub fn get(&self, pos: Position) -> Option<ObjectSpec> {
        self.grid[pos.row()][pos.col()]
    }

    pub fn set(&mut self, pos: Position, obj: Option<ObjectSpec>) {
        self.grid[pos.row()][pos.col()] = obj;
    }

    pub fn objects(&self) -> impl Iterator<Item = (Position, ObjectSpec)> + '_ {
        Position::all().filter_map(|p| self.get(p).map(|o| (p, o)))
    }

    pub fn empty_cells(&self) -> Vec<Position> {
        Position::all().filter(|&p| self.get(p).is_none()).collect()
    }

    pub fn object_count(&self) -> usize {
        self.objects().count()
    }

    /// Same grid contents, ignoring the id.
    pub fn same_layout(&self, other: &Scene) -> bool {
        self.grid == other.grid
    }

    pub fn satisfies(&self, table: &ShapeColorTable) -> bool {
        self.objects().all(|(_, o)| table.permits(&o))
    }
}

/// Random scenes: object count uniform in `2..=6`, distinct cells, attributes
/// from [`ShapeColorTable::sample_object`].
pub fn generate_base_scenes<R: Rng + ?Sized>(
    n: usize,
    table: &ShapeColorTable,
    id_prefix: &str,
    rng: &mut R,
) -> Vec<Scene> {
    (0..n)
        .map(|i| {
            let mut scene = Scene::empty(format!("{id_prefix}{i:05}"));
            let count = rng.gen_range(2..=6);
            let cells: Vec<Position> = Position::all().collect();
            for &pos in cells.choose_multiple(rng, count) {
                scene.set(pos, Some(table.sample_object(rng)));
            }
            scene
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn position_names_are_a_bijection() {
        let names: Vec<String> = Position::all().map(|p| p.name()).collect();
        assert_eq!(names[4], "middle-center");
        assert_eq!(names[0], "top-left");
        for (p, n) in Position::all().zip(&names) {
            assert_eq!(n.parse::<Position>().unwrap(), p);
        }
        let unique: std::collections::HashSet<_> = names.iter().collect();
        assert_eq!(unique.len(), 9);
    }

    #[test]
    fn tables_differ_only_on_cube_and_cylinder() {
        let (a, b) = (ShapeColorTable::cogent_a(), ShapeColorTable::cogent_b());
        assert_eq!(a.colors(Shape::Sphere), Color::ALL);
        assert_eq!(a.colors(Shape::Cube), b.colors(Shape::Cylinder));
        assert_eq!(a.colors(Shape::Cylinder), b.colors(Shape::Cube));
        assert!(a.colors(Shape::Cube).iter().all(|c| !b.colors(Shape::Cube).contains(c)));
    }

    #[test]
    fn generation_is_seeded() {
        let table = ShapeColorTable::cogent_a();
        let a = generate_base_scenes(1, &table, "s", &mut ChaCha8Rng::seed_from_u64(3));
        let b = generate_base_scenes(1, &table, "s", &mut ChaCha8Rng::seed_from_u64(3));
        assert_eq!(serde_json::to_vec(&a).unwrap(), serde_json::to_vec(&b).unwrap());
    }

    #[test]
    fn object_counts_and_condition() {
        let table = ShapeColorTable::cogent_a();
        let scenes = generate_base_scenes(1000, &table, "s", &mut ChaCha8Rng::seed_from_u64(9));
        for s in &scenes {
            assert!((2..=6).contains(&s.object_count()));
            assert!(s.satisfies(&table));
        }
    }
}
