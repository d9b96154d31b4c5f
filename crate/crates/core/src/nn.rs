//! Building blocks shared by the velocity model and the lifting network.

use std::collections::{BTreeMap, HashMap};

use rand::Rng;
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::numerics::{Graph, Tensor, Var};

/// Named weights, iterated in name order.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct Params {
    map: BTreeMap<String, Tensor>,
}

impl Params {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, t: Tensor) {
        self.map.insert(name.into(), t);
    }

    pub fn get(&self, name: &str) -> Result<&Tensor> {
        self.map
            .get(name)
            .ok_or_else(|| Error::Config(format!("missing weight `{name}`")))
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor> {
        self.map.get_mut(name)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Tensor)> {
        self.map.iter()
    }

    pub fn names(&self) -> Vec<String> {
        self.map.keys().cloned().collect()
    }

    pub fn len(&self) -> usize {
        self.map.len()
    }

    pub fn is_empty(&self) -> bool {
        self.map.is_empty()
    }

    pub fn num_scalars(&self) -> usize {
        self.map.values().map(Tensor::numel).sum()
    }

    /// Registers every weight on `g`, as trainable leaves or as constants.
    pub fn bind(&self, g: &Graph, trainable: bool) -> Bound {
        let vars = self
            .map
            .iter()
            .map(|(k, t)| {
                let v = if trainable { g.param(t.clone()) } else { g.constant(t.clone()) };
                (k.clone(), v)
            })
            .collect();
        Bound { vars }
    }

    /// SHA-256 over names, shapes, and the exact bit patterns of every value.
    pub fn checksum(&self) -> String {
        let mut h = Sha256::new();
        for (k, t) in &self.map {
            h.update(k.as_bytes());
            for &d in t.shape() {
                h.update((d as u64).to_le_bytes());
            }
            for &x in t.data() {
                h.update(x.to_bits().to_le_bytes());
            }
        }
        h.finalize().iter().map(|b| format!("{b:02x}")).collect()
    }
}

/// Graph handles for a bound [`Params`].
pub struct Bound {
    vars: HashMap<String, Var>,
}

impl Bound {
    pub fn var(&self, name: &str) -> Result<Var> {
        self.vars
            .get(name)
            .copied()
            .ok_or_else(|| Error::Config(format!("weight `{name}` not bound")))
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Var)> {
        self.vars.iter()
    }

    /// Rebinds `name` to another handle, e.g. a probe for gradient checks.
    pub fn set(&mut self, name: impl Into<String>, v: Var) {
        self.vars.insert(name.into(), v);
    }
}

/// Scaled-normal initialization for a `[fan_in, fan_out]` matrix.
pub fn init_linear<R: Rng + ?Sized>(p: &mut Params, name: &str, fan_in: usize, fan_out: usize, rng: &mut R) {
    let std = 1.0 / (fan_in as f64).sqrt();
    p.insert(format!("{name}.w"), Tensor::randn(&[fan_in, fan_out], std, rng));
    p.insert(format!("{name}.b"), Tensor::zeros(&[fan_out]));
}

pub fn linear(g: &Graph, b: &Bound, name: &str, x: Var) -> Result<Var> {
    let w = b.var(&format!("{name}.w"))?;
    let bias = b.var(&format!("{name}.b"))?;
    g.linear(x, w, Some(bias))
}

/// Two-layer GELU perceptron.
pub fn mlp(g: &Graph, b: &Bound, name: &str, x: Var) -> Result<Var> {
    let h = linear(g, b, &format!("{name}.fc1"), x)?;
    let h = g.gelu(h);
    linear(g, b, &format!("{name}.fc2"), h)
}

pub fn init_mlp<R: Rng + ?Sized>(p: &mut Params, name: &str, width: usize, hidden: usize, rng: &mut R) {
    init_linear(p, &format!("{name}.fc1"), width, hidden, rng);
    init_linear(p, &format!("{name}.fc2"), hidden, width, rng);
}

/// Multi-head scaled dot-product attention of `q: [n, d]` over `k, v: [m, d]`.
pub fn attention(g: &Graph, q: Var, k: Var, v: Var, heads: usize) -> Result<Var> {
    let (n, d) = {
        let s = g.shape(q);
        (s[0], s[1])
    };
    let m = g.shape(k)[0];
    if d % heads != 0 {
        return Err(Error::Config(format!("width {d} not divisible by {heads} heads")));
    }
    let dh = d / heads;
    let q = g.reshape(q, &[n, heads, dh])?;
    let q = g.permute(q, &[1, 0, 2])?;
    let k = g.reshape(k, &[m, heads, dh])?;
    let k = g.permute(k, &[1, 2, 0])?;
    let v = g.reshape(v, &[m, heads, dh])?;
    let v = g.permute(v, &[1, 0, 2])?;
    let scores = g.matmul(q, k)?;
    let scores = g.scale(scores, 1.0 / (dh as f64).sqrt());
    let attn = g.softmax(scores);
    let out = g.matmul(attn, v)?;
    let out = g.permute(out, &[1, 0, 2])?;
    g.reshape(out, &[n, d])
}

/// `[H, W, C]` image to `[(H/p)(W/p), p·p·C]` row-major patch tokens.
pub fn patchify(g: &Graph, img: Var, patch: usize) -> Result<Var> {
    let s = g.shape(img);
    let (h, w, c) = (s[0], s[1], s[2]);
    if h % patch != 0 || w % patch != 0 {
        return Err(Error::Argument(format!("{h}x{w} image not divisible by patch {patch}")));
    }
    let (gh, gw) = (h / patch, w / patch);
    let x = g.reshape(img, &[gh, patch, gw, patch, c])?;
    let x = g.permute(x, &[0, 2, 1, 3, 4])?;
    g.reshape(x, &[gh * gw, patch * patch * c])
}

/// Inverse of [`patchify`].
pub fn unpatchify(g: &Graph, tokens: Var, gh: usize, gw: usize, patch: usize, c: usize) -> Result<Var> {
    let x = g.reshape(tokens, &[gh, gw, patch, patch, c])?;
    let x = g.permute(x, &[0, 2, 1, 3, 4])?;
    g.reshape(x, &[gh * patch, gw * patch, c])
}

/// Fixed 2D sinusoidal codes for a `rows × cols` token grid. Column positions
/// wrap with `col_period`, so horizontally tiled panels share codes.
pub fn grid_positions(rows: usize, cols: usize, col_period: usize, width: usize) -> Tensor {
    let half = width / 2;
    let mut data = Vec::with_capacity(rows * cols * width);
    for r in 0..rows {
        for c in 0..cols {
            let cw = c % col_period.max(1);
            let mut row = sinusoid(r as f64, half);
            row.extend(sinusoid(cw as f64, width - half));
            data.extend(row);
        }
    }
    Tensor::from_vec(&[rows * cols, width], data)
}

/// Sinusoidal code of a scalar in `dim` channels.
pub fn sinusoid(x: f64, dim: usize) -> Vec<f64> {
    let pairs = dim / 2;
    let mut out = Vec::with_capacity(dim);
    for i in 0..pairs {
        let freq = (-(i as f64) * (100.0f64).ln() / pairs.max(1) as f64).exp();
        out.push((x * freq).sin());
        out.push((x * freq).cos());
    }
    if dim % 2 == 1 {
        out.push(0.0);
    }
    out
}
