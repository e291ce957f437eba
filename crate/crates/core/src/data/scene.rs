use serde::{Deserialize, Serialize};

use crate::numeric::Rng;

pub const CANVAS: usize = 32;
pub const GRID: usize = 4;
pub const CELL: usize = CANVAS / GRID;
pub const MAX_OBJECTS: usize = 4;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Shape {
    Circle,
    Square,
    Triangle,
}

impl Shape {
    pub const ALL: [Shape; 3] = [Shape::Circle, Shape::Square, Shape::Triangle];

    pub fn word(self) -> &'static str {
        match self {
            Shape::Circle => "circle",
            Shape::Square => "square",
            Shape::Triangle => "triangle",
        }
    }

    /// Coverage test in cell-local pixel coordinates (`0..CELL`).
    /// Integer arithmetic on doubled coordinates keeps rendering exact.
    pub fn covers(self, x: usize, y: usize) -> bool {
        let (x2, y2) = (2 * x as i64 - 7, 2 * y as i64 - 7);
        match self {
            Shape::Square => (1..=6).contains(&x) && (1..=6).contains(&y),
            Shape::Circle => x2 * x2 + y2 * y2 <= 36,
            Shape::Triangle => (1..=6).contains(&y) && x2.abs() <= y as i64,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Color {
    Red,
    Green,
    Blue,
    Yellow,
}

impl Color {
    pub const ALL: [Color; 4] = [Color::Red, Color::Green, Color::Blue, Color::Yellow];

    pub fn word(self) -> &'static str {
        match self {
            Color::Red => "red",
            Color::Green => "green",
            Color::Blue => "blue",
            Color::Yellow => "yellow",
        }
    }

    pub fn rgb(self) -> [u8; 3] {
        match self {
            Color::Red => [255, 0, 0],
            Color::Green => [0, 255, 0],
            Color::Blue => [0, 0, 255],
            Color::Yellow => [255, 255, 0],
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct SceneObject {
    pub shape: Shape,
    pub color: Color,
    pub row: usize,
    pub col: usize,
}

impl SceneObject {
    pub fn describe(&self) -> String {
        format!("{} {}", self.color.word(), self.shape.word())
    }
}

/// Up to four shapes on a 4×4 placement grid, one per cell.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Scene {
    pub seed: u64,
    pub objects: Vec<SceneObject>,
}

impl Scene {
    pub fn random(seed: u64, rng: &mut Rng) -> Scene {
        let count = 1 + rng.below(MAX_OBJECTS);
        let mut cells: Vec<usize> = (0..GRID * GRID).collect();
        rng.shuffle(&mut cells);
        let mut objects: Vec<SceneObject> = cells[..count]
            .iter()
            .map(|&c| SceneObject {
                shape: Shape::ALL[rng.below(Shape::ALL.len())],
                color: Color::ALL[rng.below(Color::ALL.len())],
                row: c / GRID,
                col: c % GRID,
            })
            .collect();
        objects.sort_by_key(|o| (o.row, o.col));
        Scene { seed, objects }
    }

    pub fn is_valid(&self) -> bool {
        let mut seen = [false; GRID * GRID];
        self.objects.len() <= MAX_OBJECTS
            && self.objects.iter().all(|o| {
                if o.row >= GRID || o.col >= GRID {
                    return false;
                }
                let c = o.row * GRID + o.col;
                !std::mem::replace(&mut seen[c], true)
            })
    }

    /// Objects in reading order (row-major over the placement grid).
    pub fn reading_order(&self) -> Vec<SceneObject> {
        let mut objs = self.objects.clone();
        objs.sort_by_key(|o| (o.row, o.col));
        objs
    }

    pub fn render(&self) -> Image {
        let mut img = Image::blank(CANVAS, CANVAS);
        for o in &self.objects {
            let rgb = o.color.rgb();
            for y in 0..CELL {
                for x in 0..CELL {
                    if o.shape.covers(x, y) {
                        img.set(o.row * CELL + y, o.col * CELL + x, rgb);
                    }
                }
            }
        }
        img
    }

    pub fn contains(&self, color: Color, shape: Shape) -> bool {
        self.objects.iter().any(|o| o.color == color && o.shape == shape)
    }

    pub fn find_unique(&self, color: Color, shape: Shape) -> Option<&SceneObject> {
        let mut it = self.objects.iter().filter(|o| o.color == color && o.shape == shape);
        let first = it.next()?;
        it.next().is_none().then_some(first)
    }
}

/// 8-bit RGB image, row-major, channels last.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Image {
    pub height: usize,
    pub width: usize,
    pub pixels: Vec<u8>,
}

impl Image {
    pub fn blank(height: usize, width: usize) -> Image {
        Image { height, width, pixels: vec![0; height * width * 3] }
    }

    pub fn from_pixels(height: usize, width: usize, pixels: Vec<u8>) -> Option<Image> {
        (pixels.len() == height * width * 3).then_some(Image { height, width, pixels })
    }

    pub fn get(&self, y: usize, x: usize) -> [u8; 3] {
        let i = (y * self.width + x) * 3;
        [self.pixels[i], self.pixels[i + 1], self.pixels[i + 2]]
    }

    pub fn set(&mut self, y: usize, x: usize, rgb: [u8; 3]) {
        let i = (y * self.width + x) * 3;
        self.pixels[i..i + 3].copy_from_slice(&rgb);
    }

    /// Channel values scaled to `[0, 1]`.
    pub fn to_unit(&self) -> Vec<f64> {
        self.pixels.iter().map(|&p| p as f64 / 255.0).collect()
    }
}
