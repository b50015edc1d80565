//! Deterministic toy scenes: objects on a grid, one region feature row per
//! object, and a templated reference paragraph with one sentence per object
//! in reading order of their cells.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::RngState;

const COLORS: [&str; 22] = [
    "red", "green", "blue", "yellow", "purple", "orange", "pink", "brown", "black", "white", "gray", "cyan",
    "magenta", "violet", "teal", "olive", "maroon", "navy", "gold", "silver", "beige", "lime",
];
const SHAPES: [&str; 22] = [
    "cube", "sphere", "cone", "cylinder", "pyramid", "ring", "star", "disk", "prism", "torus", "block", "ball",
    "arrow", "heart", "cross", "moon", "wedge", "tile", "rod", "bowl", "cup", "egg",
];
const COMPASS: [&str; 9] = [
    "northwest", "north", "northeast", "west", "center", "east", "southwest", "south", "southeast",
];
/// "the", "is", "in"
const TEMPLATE_WORDS: usize = 3;
const POSITION_SCALE: f64 = 0.5;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SyntheticConfig {
    pub grid: usize,
    pub min_objects: usize,
    pub max_objects: usize,
    /// Target vocabulary size including the four special tokens.
    pub vocab_size: usize,
    /// Standard deviation of Gaussian noise added to every feature value.
    pub noise: f64,
}

impl Default for SyntheticConfig {
    fn default() -> Self {
        Self {
            grid: 3,
            min_objects: 2,
            max_objects: 6,
            vocab_size: 60,
            noise: 0.05,
        }
    }
}

impl SyntheticConfig {
    pub fn cells(&self) -> usize {
        self.grid * self.grid
    }

    /// Colours and shapes used, split evenly from the vocabulary budget.
    pub fn palette(&self) -> usize {
        let fixed = 4 + TEMPLATE_WORDS + self.cells();
        (self.vocab_size.saturating_sub(fixed) / 2).clamp(1, COLORS.len())
    }

    pub fn feature_dim(&self) -> usize {
        2 * self.palette() + self.cells()
    }

    fn validate(&self) -> Result<()> {
        if self.grid == 0 || self.min_objects == 0 || self.min_objects > self.max_objects {
            return Err(Error::Config(format!("bad synthetic object range {}..={}", self.min_objects, self.max_objects)));
        }
        if self.max_objects > self.cells() {
            return Err(Error::Config(format!("{} objects do not fit a {}×{} grid", self.max_objects, self.grid, self.grid)));
        }
        if self.noise < 0.0 {
            return Err(Error::Config("negative noise".into()));
        }
        Ok(())
    }

    pub fn position_name(&self, cell: usize) -> String {
        if self.grid == 3 {
            COMPASS[cell].to_string()
        } else {
            format!("row{}col{}", cell / self.grid, cell % self.grid)
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct SceneObject {
    pub shape: usize,
    pub color: usize,
    pub cell: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticScene {
    pub id: String,
    pub objects: Vec<SceneObject>,
    /// `objects.len() × feature_dim`, row-major, f32-representable.
    pub features: Vec<f64>,
    pub feature_dim: usize,
    pub paragraph: String,
}

impl SyntheticScene {
    pub fn regions(&self) -> usize {
        self.objects.len()
    }
}

/// Scene `i` depends only on `(seed, i)`.
pub fn generate_synthetic_corpus(cfg: &SyntheticConfig, seed: u64, size: usize) -> Result<Vec<SyntheticScene>> {
    cfg.validate()?;
    if size == 0 {
        return Err(Error::Config("corpus size must be at least 1".into()));
    }
    let palette = cfg.palette();
    let dim = cfg.feature_dim();
    let width = size.to_string().len();
    let scenes = (0..size)
        .map(|i| {
            let mut rng = RngState::derive(seed, i as u64);
            let count = cfg.min_objects + rng.below(cfg.max_objects - cfg.min_objects + 1);
            let mut cells: Vec<usize> = (0..cfg.cells()).collect();
            rng.shuffle(&mut cells);
            let mut chosen: Vec<usize> = cells[..count].to_vec();
            chosen.sort_unstable();
            let objects: Vec<SceneObject> = chosen
                .into_iter()
                .map(|cell| SceneObject {
                    shape: rng.below(palette),
                    color: rng.below(palette),
                    cell,
                })
                .collect();
            let mut features = Vec::with_capacity(count * dim);
            for o in &objects {
                let mut row = vec![0.0; dim];
                row[o.shape] = 1.0;
                row[palette + o.color] = 1.0;
                row[2 * palette + o.cell] = POSITION_SCALE;
                for v in &mut row {
                    if cfg.noise > 0.0 {
                        *v += cfg.noise * rng.normal();
                    }
                    *v = *v as f32 as f64;
                }
                features.extend(row);
            }
            let paragraph = objects
                .iter()
                .map(|o| format!("the {} {} is in the {}.", COLORS[o.color], SHAPES[o.shape], cfg.position_name(o.cell)))
                .collect::<Vec<_>>()
                .join(" ");
            SyntheticScene {
                id: format!("scene{i:0width$}"),
                objects,
                features,
                feature_dim: dim,
                paragraph,
            }
        })
        .collect();
    Ok(scenes)
}
