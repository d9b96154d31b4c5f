//! Text and image embedders, patch partitioning, and text-guided patch
//! localization.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::container::Container;
use crate::error::{Error, Result};
use crate::imaging;
use crate::numerics::{Graph, Tensor, Var};
use crate::vocab::{self, Role};

/// A shared text/image embedding space.
pub trait Embedder {
    fn name(&self) -> &str;

    fn dim(&self) -> usize;

    /// Unit vector for a prompt.
    fn embed_text(&self, prompt: &str) -> Result<Tensor>;

    /// Unit vector for an image patch `[p, p, 3]`.
    fn embed_patch(&self, patch: &Tensor) -> Result<Tensor>;

    /// One unit descriptor per non-overlapping `patch × patch` cell:
    /// `[H/patch, W/patch, dim]`.
    fn dense_features(&self, image: &Tensor, patch: usize) -> Result<Tensor>;

    /// [`Embedder::dense_features`] on a graph, for embedders that can pass
    /// gradients back to the image.
    fn dense_features_on(&self, _g: &Graph, _image: Var, _patch: usize) -> Result<Var> {
        Err(Error::Perception(format!("embedder `{}` is not differentiable", self.name())))
    }

    /// Whole-image embedding: the normalized mean of the dense features.
    fn embed_image(&self, image: &Tensor) -> Result<Tensor>;
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ToyEmbedderConfig {
    /// Softmax temperature of the color histogram, in squared RGB distance.
    pub temperature: f64,
    /// Weight of the gradient-energy channel.
    pub gradient_weight: f64,
    /// Floor inside the gradient square root; flat patches score exactly 0.
    pub gradient_floor: f64,
    /// Cell size used for whole-image embeddings.
    pub pool_patch: usize,
}

impl Default for ToyEmbedderConfig {
    fn default() -> Self {
        Self {
            temperature: 0.03,
            gradient_weight: 2.0,
            gradient_floor: 1e-4,
            pool_patch: 8,
        }
    }
}

/// Deterministic stand-in for the semantic encoders: a soft histogram over
/// the vocabulary's color prototypes plus one gradient-energy channel,
/// L2-normalized. Text maps to the descriptor of a solid patch of the named
/// color; nouns contribute their bound color.
#[derive(Clone, Debug, PartialEq)]
pub struct ToyColorEmbedder {
    pub config: ToyEmbedderConfig,
    /// `[K, 3]`.
    prototypes: Tensor,
    names: Vec<&'static str>,
}

pub fn toy_color_embedder() -> ToyColorEmbedder {
    ToyColorEmbedder::new(ToyEmbedderConfig::default())
}

impl ToyColorEmbedder {
    pub fn new(config: ToyEmbedderConfig) -> Self {
        let colors: Vec<_> = vocab::colors().collect();
        let data = colors.iter().flat_map(|w| w.color.expect("color word")).collect();
        Self {
            config,
            prototypes: Tensor::from_vec(&[colors.len(), 3], data),
            names: colors.iter().map(|w| w.text).collect(),
        }
    }

    pub fn prototypes(&self) -> &Tensor {
        &self.prototypes
    }

    pub fn color_names(&self) -> &[&'static str] {
        &self.names
    }

    fn word_vector(&self, word: &str) -> Result<Option<Tensor>> {
        let id = vocab::id(word)
            .ok_or_else(|| Error::Perception(format!("`{word}` is not in the vocabulary [{}]", vocab::listing())))?;
        let w = vocab::word(id);
        let color = match w.role {
            Role::Function => return Ok(None),
            Role::Color => w.color,
            Role::Noun => w.bound.and_then(vocab::color_rgb),
        };
        let rgb = color.ok_or_else(|| Error::Perception(format!("`{word}` has no color binding")))?;
        self.embed_patch(&imaging::solid(1, 1, rgb)).map(Some)
    }
}

impl Embedder for ToyColorEmbedder {
    fn name(&self) -> &str {
        "toy-color"
    }

    fn dim(&self) -> usize {
        self.prototypes.shape()[0] + 1
    }

    fn embed_text(&self, prompt: &str) -> Result<Tensor> {
        let ids = vocab::tokenize(prompt)?;
        let mut acc = Tensor::zeros(&[self.dim()]);
        let mut any = false;
        for id in ids {
            if let Some(v) = self.word_vector(vocab::word(id).text)? {
                acc.add_assign(&v);
                any = true;
            }
        }
        if !any {
            return Err(Error::Perception(format!("prompt `{prompt}` names no color or object")));
        }
        let n = acc.sq_norm().sqrt();
        Ok(acc.scale(1.0 / n))
    }

    fn embed_patch(&self, patch: &Tensor) -> Result<Tensor> {
        imaging::check_rgb(patch)?;
        let (h, w) = imaging::dims(patch);
        if h != w {
            return Err(Error::Argument(format!("patch must be square, got {h}x{w}")));
        }
        let f = self.dense_features(patch, h)?;
        f.into_reshape(&[self.dim()])
    }

    fn dense_features(&self, image: &Tensor, patch: usize) -> Result<Tensor> {
        let g = Graph::new();
        let x = g.constant(image.clone());
        let f = self.dense_features_on(&g, x, patch)?;
        Ok((*g.value(f)).clone())
    }

    fn dense_features_on(&self, g: &Graph, image: Var, patch: usize) -> Result<Var> {
        let s = g.shape(image);
        if s.len() != 3 || s[2] != 3 {
            return Err(Error::Argument(format!("expected an [H, W, 3] image, got {s:?}")));
        }
        let (h, w) = (s[0], s[1]);
        if patch == 0 || h % patch != 0 || w % patch != 0 {
            return Err(Error::Argument(format!("{h}x{w} image not divisible by patch {patch}")));
        }
        let (gh, gw, p) = (h / patch, w / patch, patch);
        let cells = gh * gw;
        let k = self.prototypes.shape()[0];
        let cfg = &self.config;

        // Soft histogram via ‖x − c‖² = ‖x‖² − 2x·c + ‖c‖².
        let grid = g.reshape(image, &[gh, p, gw, p, 3])?;
        let grid = g.permute(grid, &[0, 2, 1, 3, 4])?;
        let px = g.reshape(grid, &[cells * p * p, 3])?;
        let protos_t = g.constant(self.prototypes.transpose());
        let cross = g.matmul(px, protos_t)?;
        let sq = g.square(px);
        let xx = g.sum_axis(sq, 1)?;
        let xx = g.reshape(xx, &[cells * p * p, 1])?;
        let pp: Vec<f64> = (0..k)
            .map(|i| self.prototypes.data()[i * 3..i * 3 + 3].iter().map(|v| v * v).sum())
            .collect();
        let pp = g.constant(Tensor::from_vec(&[k], pp));
        let d2 = g.scale(cross, -2.0);
        let d2 = g.add(d2, xx)?;
        let d2 = g.add(d2, pp)?;
        let logits = g.scale(d2, -1.0 / cfg.temperature);
        let soft = g.softmax(logits);
        let soft = g.reshape(soft, &[cells, p * p, k])?;
        let hist = g.mean_axis(soft, 1)?;
        let hist = g.reshape(hist, &[cells, k])?;

        // Within-cell finite differences.
        let energy = |axis: usize| -> Result<Option<Var>> {
            if p < 2 {
                return Ok(None);
            }
            let img5 = g.reshape(image, &[gh, p, gw, p, 3])?;
            let a = g.slice(img5, axis, 1, p)?;
            let b = g.slice(img5, axis, 0, p - 1)?;
            let d = g.sub(a, b)?;
            let d = g.square(d);
            let d = g.permute(d, &[0, 2, 1, 3, 4])?;
            let d = g.reshape(d, &[cells, p * (p - 1) * 3])?;
            Ok(Some(g.mean_axis(d, 1)?))
        };
        let grad_feat = match (energy(3)?, energy(1)?) {
            (Some(ex), Some(ey)) => {
                let e = g.add(ex, ey)?;
                let e = g.shift(e, cfg.gradient_floor);
                let e = g.sqrt(e);
                let e = g.shift(e, -cfg.gradient_floor.sqrt());
                g.scale(e, cfg.gradient_weight)
            }
            _ => g.constant(Tensor::zeros(&[cells])),
        };
        let grad_feat = g.reshape(grad_feat, &[cells, 1])?;
        let desc = g.concat(&[hist, grad_feat], 1)?;
        let desc = g.l2_normalize(desc, 0.0)?;
        g.reshape(desc, &[gh, gw, k + 1])
    }

    fn embed_image(&self, image: &Tensor) -> Result<Tensor> {
        let f = self.dense_features(image, self.config.pool_patch)?;
        let dim = self.dim();
        let cells = f.numel() / dim;
        let mut acc = vec![0.0; dim];
        for c in 0..cells {
            for (a, v) in acc.iter_mut().zip(&f.data()[c * dim..(c + 1) * dim]) {
                *a += v;
            }
        }
        let n = acc.iter().map(|v| v * v).sum::<f64>().sqrt();
        if n == 0.0 {
            return Err(Error::Perception("image embedding vanished".into()));
        }
        Ok(Tensor::from_vec(&[dim], acc.into_iter().map(|v| v / n).collect()))
    }
}

/// Row-major grid of non-overlapping square crops.
#[derive(Clone, Debug, PartialEq)]
pub struct PatchGrid {
    pub rows: usize,
    pub cols: usize,
    pub patch: usize,
    pub patches: Vec<Tensor>,
}

impl PatchGrid {
    pub fn get(&self, i: usize, j: usize) -> &Tensor {
        &self.patches[i * self.cols + j]
    }

    pub fn reassemble(&self) -> Tensor {
        let (h, w, p) = (self.rows * self.patch, self.cols * self.patch, self.patch);
        let mut out = Tensor::zeros(&[h, w, 3]);
        for i in 0..self.rows {
            for j in 0..self.cols {
                let cell = self.get(i, j);
                for y in 0..p {
                    for x in 0..p {
                        imaging::set_pixel(&mut out, i * p + y, j * p + x, imaging::pixel(cell, y, x));
                    }
                }
            }
        }
        out
    }
}

pub fn partition_patches(image: &Tensor, p: usize) -> Result<PatchGrid> {
    imaging::check_rgb(image)?;
    let (h, w) = imaging::dims(image);
    if p == 0 || h % p != 0 || w % p != 0 {
        return Err(Error::Argument(format!("{h}x{w} image not divisible by patch {p}")));
    }
    let (rows, cols) = (h / p, w / p);
    let mut patches = Vec::with_capacity(rows * cols);
    for i in 0..rows {
        for j in 0..cols {
            patches.push(imaging::crop(image, i * p, j * p, p, p));
        }
    }
    Ok(PatchGrid {
        rows,
        cols,
        patch: p,
        patches,
    })
}

/// Per-view argmax patches for one prompt.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Localization {
    pub patch: usize,
    pub rows: usize,
    pub cols: usize,
    pub left: (usize, usize),
    pub right: (usize, usize),
    /// Row-major cosine scores per view.
    pub left_scores: Vec<f64>,
    pub right_scores: Vec<f64>,
    /// Best score of the weaker view.
    pub confidence: f64,
    pub low_confidence: bool,
}

impl Localization {
    /// Maps each view's localized cell to the containing cell of a coarser
    /// `lefl_patch` grid, through the localized cell's center.
    pub fn lefl_cells(&self, lefl_patch: usize) -> Result<((usize, usize), (usize, usize))> {
        if lefl_patch == 0 {
            return Err(Error::Argument("LEFL patch must be positive".into()));
        }
        let (h, w) = (self.rows * self.patch, self.cols * self.patch);
        if h % lefl_patch != 0 || w % lefl_patch != 0 {
            return Err(Error::Argument(format!(
                "{h}x{w} image not divisible by LEFL patch {lefl_patch}"
            )));
        }
        let map = |(i, j): (usize, usize)| {
            let cy = i * self.patch + self.patch / 2;
            let cx = j * self.patch + self.patch / 2;
            (cy / lefl_patch, cx / lefl_patch)
        };
        Ok((map(self.left), map(self.right)))
    }

    /// Swaps the roles of the two views.
    pub fn swapped(&self) -> Self {
        Self {
            left: self.right,
            right: self.left,
            left_scores: self.right_scores.clone(),
            right_scores: self.left_scores.clone(),
            ..self.clone()
        }
    }
}

pub const DEFAULT_CONFIDENCE_THRESHOLD: f64 = 0.3;

/// Cosine of every `p × p` cell against the prompt; ties resolve to the
/// smallest row-major index.
pub fn patch_scores(image: &Tensor, text: &Tensor, embedder: &dyn Embedder, p: usize) -> Result<(Vec<f64>, usize, usize)> {
    let grid = partition_patches(image, p)?;
    let scores = grid
        .patches
        .iter()
        .map(|patch| {
            let e = embedder.embed_patch(patch)?;
            Ok(cosine(&e, text))
        })
        .collect::<Result<Vec<_>>>()?;
    Ok((scores, grid.rows, grid.cols))
}

pub fn argmax_first(scores: &[f64]) -> usize {
    let mut best = 0;
    for (i, &s) in scores.iter().enumerate() {
        if s > scores[best] {
            best = i;
        }
    }
    best
}

pub fn localize(
    left: &Tensor,
    right: &Tensor,
    prompt: &str,
    embedder: &dyn Embedder,
    p: usize,
    threshold: f64,
) -> Result<Localization> {
    if left.shape() != right.shape() {
        return Err(Error::Dimension {
            op: "localize",
            left: left.shape().to_vec(),
            right: right.shape().to_vec(),
        });
    }
    let text = embedder.embed_text(prompt)?;
    let (ls, rows, cols) = patch_scores(left, &text, embedder, p)?;
    let (rs, _, _) = patch_scores(right, &text, embedder, p)?;
    let (li, ri) = (argmax_first(&ls), argmax_first(&rs));
    let confidence = ls[li].min(rs[ri]);
    Ok(Localization {
        patch: p,
        rows,
        cols,
        left: (li / cols, li % cols),
        right: (ri / cols, ri % cols),
        left_scores: ls,
        right_scores: rs,
        confidence,
        low_confidence: confidence < threshold,
    })
}

pub fn cosine(a: &Tensor, b: &Tensor) -> f64 {
    let dot: f64 = a.data().iter().zip(b.data()).map(|(x, y)| x * y).sum();
    let n = (a.sq_norm() * b.sq_norm()).sqrt();
    if n == 0.0 {
        0.0
    } else {
        (dot / n).clamp(-1.0, 1.0)
    }
}

/// Dense feature grids on disk, keyed by a hash of the image and settings.
pub struct EmbeddingCache {
    dir: PathBuf,
}

impl EmbeddingCache {
    pub fn new(dir: impl Into<PathBuf>) -> Result<Self> {
        let dir = dir.into();
        std::fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
        Ok(Self { dir })
    }

    pub fn key(image: &Tensor, embedder: &dyn Embedder, patch: usize) -> String {
        let mut h = Sha256::new();
        h.update(embedder.name().as_bytes());
        h.update((patch as u64).to_le_bytes());
        for &d in image.shape() {
            h.update((d as u64).to_le_bytes());
        }
        for &x in image.data() {
            h.update(x.to_bits().to_le_bytes());
        }
        h.finalize().iter().map(|b| format!("{b:02x}")).collect()
    }

    pub fn path_for(&self, key: &str) -> PathBuf {
        self.dir.join(format!("{key}.xvw"))
    }

    pub fn dense_features(&self, image: &Tensor, embedder: &dyn Embedder, patch: usize) -> Result<Tensor> {
        let key = Self::key(image, embedder, patch);
        let path = self.path_for(&key);
        if path.exists() {
            return Ok(Container::load(&path)?.get("features")?.clone());
        }
        let f = embedder.dense_features(image, patch)?;
        let mut c = Container::new(serde_json::json!({"embedder": embedder.name(), "patch": patch}));
        c.push("features", f.clone());
        c.save(&path)?;
        Ok(f)
    }

    pub fn dir(&self) -> &Path {
        &self.dir
    }
}
