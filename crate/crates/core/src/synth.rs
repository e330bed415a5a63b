//! Seeded synthetic transformer weights with injected outlier walls.
//!
//! Every tensor draws base weights from N(0, σ²). Wall layers then have `w`
//! input columns overwritten with `±U(lo, hi)`. Each tensor gets its own
//! ChaCha8 stream seeded from `splitmix64(seed ^ fnv1a(label))`, so the content
//! of a layer does not depend on generation order or thread count.

use rand::seq::index;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::store::{FpModel, LayerId, LayerKind, LAYERS_PER_BLOCK};
use crate::tensor::Tensor;

/// Kinds that may carry walls; `o` and `down` never do.
pub const WALL_CAPABLE: [LayerKind; 5] = [
    LayerKind::Q,
    LayerKind::K,
    LayerKind::V,
    LayerKind::Up,
    LayerKind::Gate,
];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SynthConfig {
    pub blocks: usize,
    pub dim: usize,
    /// Output rows of `k`/`v`; `None` keeps them square.
    pub kv_dim: Option<usize>,
    /// Hidden width of `up`/`gate`/`down`; `None` uses `dim`.
    pub ffn_dim: Option<usize>,
    pub base_std: f32,
    pub wall_blocks: Vec<usize>,
    pub wall_kinds: Vec<LayerKind>,
    pub wall_columns: usize,
    pub wall_magnitude: [f32; 2],
    pub shared_wall_columns: bool,
    pub seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            blocks: 80,
            dim: 64,
            kv_dim: None,
            ffn_dim: None,
            base_std: 0.02,
            wall_blocks: vec![0, 1, 3],
            wall_kinds: WALL_CAPABLE.to_vec(),
            wall_columns: 4,
            wall_magnitude: [50.0, 100.0],
            shared_wall_columns: true,
            seed: 0,
        }
    }
}

impl SynthConfig {
    pub fn clean(mut self) -> Self {
        self.wall_blocks.clear();
        self
    }

    /// (rows, cols) of a layer kind.
    pub fn shape(&self, kind: LayerKind) -> (usize, usize) {
        let kv = self.kv_dim.unwrap_or(self.dim);
        let ffn = self.ffn_dim.unwrap_or(self.dim);
        match kind {
            LayerKind::Q | LayerKind::O => (self.dim, self.dim),
            LayerKind::K | LayerKind::V => (kv, self.dim),
            LayerKind::Up | LayerKind::Gate => (ffn, self.dim),
            LayerKind::Down => (self.dim, ffn),
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::validation(m));
        if self.blocks == 0 || self.dim == 0 {
            return bad("blocks and dim must be positive".into());
        }
        if self.kv_dim == Some(0) || self.ffn_dim == Some(0) {
            return bad("kv_dim and ffn_dim must be positive".into());
        }
        if !(self.base_std.is_finite() && self.base_std >= 0.0) {
            return bad(format!("base_std must be finite and non-negative, got {}", self.base_std));
        }
        if let Some(b) = self.wall_blocks.iter().find(|b| **b >= self.blocks) {
            return bad(format!("wall block {b} outside [0, {})", self.blocks));
        }
        if let Some(k) = self.wall_kinds.iter().find(|k| !WALL_CAPABLE.contains(k)) {
            return bad(format!("layer kind `{k}` cannot carry walls"));
        }
        let [lo, hi] = self.wall_magnitude;
        if !(lo.is_finite() && hi.is_finite() && 0.0 <= lo && lo <= hi) {
            return bad(format!("wall magnitude range [{lo}, {hi}] is invalid"));
        }
        if !self.wall_blocks.is_empty() && !self.wall_kinds.is_empty() && self.wall_columns >= self.dim {
            return bad(format!(
                "wall_columns {} must be below the input dimension {}",
                self.wall_columns, self.dim
            ));
        }
        Ok(())
    }

    pub fn is_wall_layer(&self, id: LayerId) -> bool {
        self.wall_columns > 0 && self.wall_blocks.contains(&id.block) && self.wall_kinds.contains(&id.kind)
    }
}

fn fnv1a(label: &str) -> u64 {
    label
        .bytes()
        .fold(0xcbf2_9ce4_8422_2325u64, |h, b| (h ^ b as u64).wrapping_mul(0x0000_0100_0000_01b3))
}

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Seed of the sub-stream named `label`.
pub fn stream_seed(seed: u64, label: &str) -> u64 {
    splitmix64(seed ^ fnv1a(label))
}

fn stream(seed: u64, label: &str) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(stream_seed(seed, label))
}

/// Input columns that receive walls in layer `id`, ascending; empty for clean layers.
pub fn wall_columns_for(cfg: &SynthConfig, id: LayerId) -> Vec<usize> {
    if !cfg.is_wall_layer(id) {
        return Vec::new();
    }
    let label = if cfg.shared_wall_columns {
        format!("blocks.{}.walls", id.block)
    } else {
        format!("{id}.walls")
    };
    let (_, cols) = cfg.shape(id.kind);
    let mut picked = index::sample(&mut stream(cfg.seed, &label), cols, cfg.wall_columns).into_vec();
    picked.sort_unstable();
    picked
}

/// Overwrites `columns` of `w` with `±U(lo, hi)` drawn from `seed`.
pub fn inject_walls(w: &Tensor, columns: &[usize], magnitude: [f32; 2], seed: u64) -> Result<Tensor> {
    let [lo, hi] = magnitude;
    if !(lo.is_finite() && hi.is_finite() && 0.0 <= lo && lo <= hi) {
        return Err(Error::validation(format!("wall magnitude range [{lo}, {hi}] is invalid")));
    }
    let mut seen = vec![false; w.cols];
    for &c in columns {
        if c >= w.cols {
            return Err(Error::validation(format!(
                "wall column {c} outside tensor `{}` with {} columns",
                w.name, w.cols
            )));
        }
        if std::mem::replace(&mut seen[c], true) {
            return Err(Error::validation(format!("wall column {c} listed twice")));
        }
    }
    let mut out = w.clone();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for &c in columns {
        for i in 0..w.rows {
            let m = rng.random_range(lo..=hi);
            out.set(i, c, if rng.random_bool(0.5) { m } else { -m });
        }
    }
    Ok(out)
}

fn generate_layer(cfg: &SynthConfig, id: LayerId) -> Result<Tensor> {
    let name = id.name();
    let (rows, cols) = cfg.shape(id.kind);
    let normal = Normal::new(0.0f32, cfg.base_std)
        .map_err(|e| Error::validation(format!("base_std: {e}")))?;
    let mut rng = stream(cfg.seed, &name);
    let base = Tensor::from_fn(name.clone(), rows, cols, |_, _| normal.sample(&mut rng));
    let walls = wall_columns_for(cfg, id);
    if walls.is_empty() {
        return Ok(base);
    }
    inject_walls(
        &base,
        &walls,
        cfg.wall_magnitude,
        stream_seed(cfg.seed, &format!("{name}.wall_values")),
    )
}

/// Generates all `7·B` layers.
pub fn generate(cfg: &SynthConfig) -> Result<FpModel> {
    cfg.validate()?;
    let layers = (0..LAYERS_PER_BLOCK * cfg.blocks)
        .into_par_iter()
        .map(|i| generate_layer(cfg, LayerId::from_index(i)))
        .collect::<Result<Vec<_>>>()?;
    FpModel::new(cfg.blocks, layers)
}
