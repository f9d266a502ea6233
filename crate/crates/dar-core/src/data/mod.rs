//! Procedurally generated two-panel spurious-correlation datasets.
//!
//! Each example pairs a core glyph (determined by the label `y`) with a
//! spurious glyph (determined by the attribute `a`). In `Stacked` mode the
//! spurious panel occupies the top half of the image and the core panel the
//! bottom half; in `Overlap` mode the core glyph's shape is tinted by a
//! per-attribute color on the same pixels, so the two cues cannot be
//! separated spatially. The training split realizes a configurable spurious
//! strength `s = P(a == y)`; the target/val/test splits are group-balanced.

pub mod glyphs;
pub mod io;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum DataError {
    #[error("config: {0}")]
    Config(String),
    #[error("empty donor pool")]
    EmptyDonorPool,
    #[error("empty split")]
    EmptySplit,
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
    #[error("format: {0}")]
    Format(String),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PanelMode {
    Stacked,
    Overlap,
}

/// Which image component a counterfactual intervention replaces.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Component {
    Core,
    Spurious,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GenConfig {
    pub classes: usize,
    /// Panel edge length in pixels; stacked images are `1 x 2*panel x panel`,
    /// overlap images `3 x panel x panel`.
    pub panel: usize,
    pub mode: PanelMode,
    pub train: usize,
    pub target: usize,
    pub val: usize,
    pub test: usize,
    /// P(a == y) on the training split.
    pub spurious_strength: f64,
    pub noise_core: f64,
    pub noise_spu: f64,
}

impl Default for GenConfig {
    fn default() -> Self {
        GenConfig {
            classes: 4,
            panel: 16,
            mode: PanelMode::Stacked,
            train: 4000,
            target: 400,
            val: 400,
            test: 1600,
            spurious_strength: 0.95,
            noise_core: 0.35,
            noise_spu: 0.10,
        }
    }
}

impl GenConfig {
    /// (channels, height, width) of generated images.
    pub fn image_dims(&self) -> (usize, usize, usize) {
        match self.mode {
            PanelMode::Stacked => (1, 2 * self.panel, self.panel),
            PanelMode::Overlap => (3, self.panel, self.panel),
        }
    }

    pub fn image_len(&self) -> usize {
        let (c, h, w) = self.image_dims();
        c * h * w
    }

    pub fn validate(&self) -> Result<(), DataError> {
        let c = self.classes;
        if !(2..=glyphs::MAX_CLASSES).contains(&c) {
            return Err(DataError::Config(format!(
                "classes must be in 2..={}, got {}",
                glyphs::MAX_CLASSES,
                c
            )));
        }
        if self.panel < 8 {
            return Err(DataError::Config(format!("panel must be >= 8, got {}", self.panel)));
        }
        if !(0.0..=1.0).contains(&self.spurious_strength) {
            return Err(DataError::Config(format!(
                "spurious_strength must be in [0, 1], got {}",
                self.spurious_strength
            )));
        }
        if self.noise_core < 0.0 || self.noise_spu < 0.0 {
            return Err(DataError::Config("noise levels must be >= 0".into()));
        }
        if self.train == 0 {
            return Err(DataError::Config("train count must be > 0".into()));
        }
        for (name, n) in [("target", self.target), ("val", self.val), ("test", self.test)] {
            if n == 0 || n % (c * c) != 0 {
                return Err(DataError::Config(format!(
                    "{} count {} must be a positive multiple of classes^2 = {}",
                    name,
                    n,
                    c * c
                )));
            }
        }
        Ok(())
    }
}

/// One image with its label `y`, spurious attribute `a`, and group `(y, a)`.
#[derive(Clone, Debug, PartialEq)]
pub struct DominoExample {
    pub image: Vec<f32>,
    pub label: usize,
    pub attribute: usize,
}

impl DominoExample {
    pub fn group(&self) -> (usize, usize) {
        (self.label, self.attribute)
    }

    /// Majority examples are those where the spurious correlation holds.
    pub fn is_majority(&self) -> bool {
        self.label == self.attribute
    }
}

#[derive(Clone, Debug)]
pub struct DatasetSplits {
    pub config: GenConfig,
    pub seed: u64,
    pub train: Vec<DominoExample>,
    pub target: Vec<DominoExample>,
    pub val: Vec<DominoExample>,
    pub test: Vec<DominoExample>,
}

/// Counterfactual intervention request: replace `component` with the value
/// from each of `donor_count` donors drawn without replacement.
#[derive(Clone, Copy, Debug)]
pub struct InterventionSpec {
    pub component: Component,
    pub donor_count: usize,
}

// ── Group-count layout ──────────────────────────────────────────────

/// Training-split group counts realizing `P(a == y) = s` within rounding:
/// `round(n*s)` examples spread over the C diagonal groups, the remainder
/// spread over the C(C-1) off-diagonal groups, extra items going to the
/// lexicographically first groups.
pub fn train_group_layout(n: usize, classes: usize, s: f64) -> Vec<Vec<usize>> {
    let diag_total = (n as f64 * s).round() as usize;
    let off_total = n - diag_total.min(n);
    let mut counts = vec![vec![0usize; classes]; classes];
    let db = diag_total / classes;
    let dr = diag_total % classes;
    for y in 0..classes {
        counts[y][y] = db + usize::from(y < dr);
    }
    let off_groups = classes * (classes - 1);
    let ob = off_total / off_groups;
    let or = off_total % off_groups;
    let mut idx = 0usize;
    for y in 0..classes {
        for a in 0..classes {
            if y != a {
                counts[y][a] = ob + usize::from(idx < or);
                idx += 1;
            }
        }
    }
    counts
}

fn balanced_layout(n: usize, classes: usize) -> Vec<Vec<usize>> {
    vec![vec![n / (classes * classes); classes]; classes]
}

// ── Rendering ───────────────────────────────────────────────────────

fn render_panel(template: &[f32], sigma: f64, rng: &mut ChaCha8Rng, out: &mut [f32]) {
    if sigma == 0.0 {
        out.copy_from_slice(template);
        return;
    }
    let normal = Normal::new(0.0, sigma).expect("sigma validated non-negative");
    for (o, &t) in out.iter_mut().zip(template) {
        let v = t as f64 + normal.sample(rng);
        *o = v.clamp(0.0, 1.0) as f32;
    }
}

/// Tint a shape field with an attribute color: channel c = color[c] * shape.
pub fn compose_overlap(shape: &[f32], color: [f32; 3]) -> Vec<f32> {
    let mut img = Vec::with_capacity(3 * shape.len());
    for ch in color {
        img.extend(shape.iter().map(|&s| ch * s));
    }
    img
}

/// Recover the shape field of an overlap image as the per-pixel channel
/// maximum (exact, since every palette color has a unit component).
pub fn overlap_shape_field(image: &[f32], pixels: usize) -> Vec<f32> {
    let mut shape = vec![0.0f32; pixels];
    for ch in 0..image.len() / pixels {
        for (s, &v) in shape.iter_mut().zip(&image[ch * pixels..(ch + 1) * pixels]) {
            if v > *s {
                *s = v;
            }
        }
    }
    shape
}

fn render_example(cfg: &GenConfig, label: usize, attribute: usize, rng: &mut ChaCha8Rng) -> DominoExample {
    let p = cfg.panel;
    match cfg.mode {
        PanelMode::Stacked => {
            let mut image = vec![0.0f32; 2 * p * p];
            let spu = glyphs::spurious_template(attribute, p);
            let core = glyphs::core_template(label, p);
            render_panel(&spu, cfg.noise_spu, rng, &mut image[..p * p]);
            render_panel(&core, cfg.noise_core, rng, &mut image[p * p..]);
            DominoExample { image, label, attribute }
        }
        PanelMode::Overlap => {
            let core = glyphs::core_template(label, p);
            let mut shape = vec![0.0f32; p * p];
            render_panel(&core, cfg.noise_core, rng, &mut shape);
            let image = compose_overlap(&shape, glyphs::overlap_color(attribute));
            DominoExample { image, label, attribute }
        }
    }
}

fn render_split(cfg: &GenConfig, counts: &[Vec<usize>], stream: u64, seed: u64) -> Vec<DominoExample> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    let mut out = Vec::new();
    for (y, row) in counts.iter().enumerate() {
        for (a, &n) in row.iter().enumerate() {
            for _ in 0..n {
                out.push(render_example(cfg, y, a, &mut rng));
            }
        }
    }
    out.shuffle(&mut rng);
    out
}

/// Generate all four splits deterministically from `(config, seed)`. Each
/// split renders from its own RNG stream, so splits are disjoint by
/// construction.
pub fn generate(cfg: &GenConfig, seed: u64) -> Result<DatasetSplits, DataError> {
    cfg.validate()?;
    let c = cfg.classes;
    let train_counts = train_group_layout(cfg.train, c, cfg.spurious_strength);
    Ok(DatasetSplits {
        config: cfg.clone(),
        seed,
        train: render_split(cfg, &train_counts, 0, seed),
        target: render_split(cfg, &balanced_layout(cfg.target, c), 1, seed),
        val: render_split(cfg, &balanced_layout(cfg.val, c), 2, seed),
        test: render_split(cfg, &balanced_layout(cfg.test, c), 3, seed),
    })
}

// ── Interventions ───────────────────────────────────────────────────

/// Replace one component of `x` with the donor's, leaving the other
/// component untouched (byte-exact in stacked mode).
pub fn counterfactual(cfg: &GenConfig, x: &DominoExample, donor: &DominoExample, component: Component) -> Vec<f32> {
    let p = cfg.panel;
    match cfg.mode {
        PanelMode::Stacked => {
            let half = p * p;
            let mut img = x.image.clone();
            match component {
                Component::Core => img[half..].copy_from_slice(&donor.image[half..]),
                Component::Spurious => img[..half].copy_from_slice(&donor.image[..half]),
            }
            img
        }
        PanelMode::Overlap => {
            let pixels = p * p;
            match component {
                Component::Core => {
                    let shape = overlap_shape_field(&donor.image, pixels);
                    compose_overlap(&shape, glyphs::overlap_color(x.attribute))
                }
                Component::Spurious => {
                    let shape = overlap_shape_field(&x.image, pixels);
                    compose_overlap(&shape, glyphs::overlap_color(donor.attribute))
                }
            }
        }
    }
}

/// Draw donor indices uniformly without replacement from `pool`, excluding
/// `exclude` when given.
pub fn sample_donors(
    pool_len: usize,
    exclude: Option<usize>,
    count: usize,
    rng: &mut ChaCha8Rng,
) -> Result<Vec<usize>, DataError> {
    let candidates: Vec<usize> = (0..pool_len).filter(|&i| Some(i) != exclude).collect();
    if candidates.is_empty() || count == 0 {
        return Err(DataError::EmptyDonorPool);
    }
    let picks = rand::seq::index::sample(rng, candidates.len(), count.min(candidates.len()));
    Ok(picks.iter().map(|i| candidates[i]).collect())
}

/// Counterfactual images for `x` under `spec`, with donors drawn from `pool`
/// (excluding `exclude`, the index of `x` itself when it belongs to `pool`).
pub fn intervene(
    cfg: &GenConfig,
    x: &DominoExample,
    spec: &InterventionSpec,
    pool: &[DominoExample],
    exclude: Option<usize>,
    rng: &mut ChaCha8Rng,
) -> Result<Vec<Vec<f32>>, DataError> {
    let donors = sample_donors(pool.len(), exclude, spec.donor_count, rng)?;
    Ok(donors.iter().map(|&d| counterfactual(cfg, x, &pool[d], spec.component)).collect())
}

// ── Group bookkeeping ───────────────────────────────────────────────

/// C x C matrix of group sizes, indexed `[y][a]`.
pub fn group_counts(split: &[DominoExample], classes: usize) -> Vec<Vec<usize>> {
    let mut counts = vec![vec![0usize; classes]; classes];
    for ex in split {
        counts[ex.label][ex.attribute] += 1;
    }
    counts
}

#[derive(Clone, Debug, Default)]
pub struct SubsampleReport {
    /// Groups with zero members, excluded from the result.
    pub excluded_groups: Vec<(usize, usize)>,
    pub kept_per_group: usize,
}

/// Downsample every group to the smallest positive group size; empty groups
/// are reported rather than failing the whole operation.
pub fn subsample_balanced(
    split: &[DominoExample],
    classes: usize,
    rng: &mut ChaCha8Rng,
) -> Result<(Vec<DominoExample>, SubsampleReport), DataError> {
    if split.is_empty() {
        return Err(DataError::EmptySplit);
    }
    let counts = group_counts(split, classes);
    let mut excluded = Vec::new();
    let mut min_pos = usize::MAX;
    for (y, row) in counts.iter().enumerate() {
        for (a, &n) in row.iter().enumerate() {
            if n == 0 {
                excluded.push((y, a));
            } else {
                min_pos = min_pos.min(n);
            }
        }
    }
    let mut by_group: Vec<Vec<usize>> = vec![Vec::new(); classes * classes];
    for (i, ex) in split.iter().enumerate() {
        by_group[ex.label * classes + ex.attribute].push(i);
    }
    let mut selected = Vec::new();
    for members in by_group.iter().filter(|m| !m.is_empty()) {
        let picks = rand::seq::index::sample(rng, members.len(), min_pos);
        selected.extend(picks.iter().map(|i| members[i]));
    }
    selected.sort_unstable();
    let out = selected.into_iter().map(|i| split[i].clone()).collect();
    Ok((out, SubsampleReport { excluded_groups: excluded, kept_per_group: min_pos }))
}

/// Per-example weights proportional to inverse group size, normalized so the
/// mean weight over the split is 1.
pub fn reweight_weights(split: &[DominoExample], classes: usize) -> Result<Vec<f64>, DataError> {
    if split.is_empty() {
        return Err(DataError::EmptySplit);
    }
    let counts = group_counts(split, classes);
    let nonzero = counts.iter().flatten().filter(|&&n| n > 0).count();
    let n = split.len() as f64;
    Ok(split
        .iter()
        .map(|ex| n / (nonzero as f64 * counts[ex.label][ex.attribute] as f64))
        .collect())
}
