//! The velocity network: a miniature double-stream / single-stream
//! transformer over pixel patches.
//!
//! Image tokens come from the noisy latent; in-context source tokens (the
//! pre-edit image, marked by a learned vector) are appended to the image
//! stream; prompt tokens form the text stream. The network predicts a
//! residual edit `Δ`, and the clean estimate is `x̂ = source + Δ`, giving
//! velocity `v = (z − x̂) / t`.

use std::path::Path;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::container::Container;
use crate::error::{Error, Result};
use crate::lora::{self, AdapterSet, BoundAdapters, LoraPlacement, PlacementRule, Projection, StreamKind};
use crate::nn::{self, Bound, Params};
use crate::numerics::{Graph, Tensor, Var};
use crate::vocab;

/// Smallest time used as a divisor when converting `x̂` to a velocity.
pub const T_MIN: f64 = 1e-3;
const LN_EPS: f64 = 1e-6;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EditorConfig {
    pub width: usize,
    pub heads: usize,
    pub patch: usize,
    pub double_blocks: usize,
    pub single_blocks: usize,
    pub mlp_ratio: usize,
    pub channels: usize,
    /// Width of the per-token feature spread to every pixel of the patch.
    pub pixel_features: usize,
    pub pixel_hidden: usize,
}

impl Default for EditorConfig {
    fn default() -> Self {
        Self {
            width: 64,
            heads: 4,
            patch: 4,
            double_blocks: 2,
            single_blocks: 4,
            mlp_ratio: 2,
            channels: 3,
            pixel_features: 16,
            pixel_hidden: 32,
        }
    }
}

impl EditorConfig {
    pub fn validate(&self) -> Result<()> {
        if self.width == 0 || self.heads == 0 || self.width % self.heads != 0 {
            return Err(Error::Config(format!(
                "width {} must be a positive multiple of heads {}",
                self.width, self.heads
            )));
        }
        if self.patch == 0 || self.channels == 0 || self.double_blocks + self.single_blocks == 0 {
            return Err(Error::Config("patch, channels and block count must be positive".into()));
        }
        Ok(())
    }

    pub fn num_blocks(&self) -> usize {
        self.double_blocks + self.single_blocks
    }

    pub fn token_dim(&self) -> usize {
        self.patch * self.patch * self.channels
    }

    /// `(d_in, d_out)` of the projection an adapter at `p` wraps.
    pub fn projection_dims(&self, p: LoraPlacement) -> (usize, usize) {
        match p.projection {
            Projection::Qkv => (self.width, 3 * self.width),
            Projection::Proj => (self.width, self.width),
        }
    }

    /// Maps a global block index to its stream and stream-local index.
    pub fn locate(&self, block: usize) -> Result<(StreamKind, usize)> {
        if block < self.double_blocks {
            Ok((StreamKind::Double, block))
        } else if block < self.num_blocks() {
            Ok((StreamKind::Single, block - self.double_blocks))
        } else {
            Err(Error::Config(format!(
                "block {block} out of range for a model with {} blocks",
                self.num_blocks()
            )))
        }
    }
}

/// Frozen backbone weights plus the adapters attached to them.
#[derive(Clone, Debug, PartialEq)]
pub struct FlowEditor {
    pub config: EditorConfig,
    pub weights: Params,
    pub adapters: AdapterSet,
}

/// A [`FlowEditor`] registered on a graph.
pub struct BoundEditor {
    pub weights: Bound,
    pub adapters: BoundAdapters,
}

/// Everything one forward pass needs besides the weights.
#[derive(Clone, Copy, Debug)]
pub struct ForwardArgs<'a> {
    /// Noisy latent `[H, W, C]`.
    pub z: Var,
    pub t: f64,
    pub prompt: &'a [usize],
    /// Pre-edit image appended as in-context tokens.
    pub source: Option<Var>,
    /// Token columns after which column positions repeat; `None` uses the
    /// full width.
    pub panel_cols: Option<usize>,
    /// Global block index whose output image-token grid is captured.
    pub tap: Option<usize>,
}

pub struct ForwardOutput {
    pub velocity: Var,
    pub x_hat: Var,
    /// `[H/p, W/p, width]` when a tap was requested.
    pub tap: Option<Var>,
}

impl FlowEditor {
    pub fn new<R: Rng + ?Sized>(config: EditorConfig, rng: &mut R) -> Result<Self> {
        config.validate()?;
        let d = config.width;
        let hidden = d * config.mlp_ratio;
        let mut p = Params::new();
        nn::init_linear(&mut p, "img_in", config.token_dim(), d, rng);
        p.insert("src_marker", Tensor::randn(&[d], 0.5, rng));
        p.insert("txt_embed", Tensor::randn(&[vocab::size(), d], 1.0, rng));
        nn::init_mlp(&mut p, "time_in", d, hidden, rng);
        nn::init_linear(&mut p, "txt_pool", d, d, rng);
        nn::init_linear(&mut p, "latent_pool", config.token_dim(), d, rng);
        for i in 0..config.double_blocks {
            for stream in ["img", "txt"] {
                let base = format!("double.{i}.{stream}");
                nn::init_linear(&mut p, &format!("{base}.qkv"), d, 3 * d, rng);
                nn::init_linear(&mut p, &format!("{base}.proj"), d, d, rng);
                nn::init_mlp(&mut p, &format!("{base}.mlp"), d, hidden, rng);
                init_modulation(&mut p, &format!("{base}.mod"), d, rng);
            }
        }
        for j in 0..config.single_blocks {
            let base = format!("single.{j}");
            nn::init_linear(&mut p, &format!("{base}.qkv"), d, 3 * d, rng);
            nn::init_linear(&mut p, &format!("{base}.proj"), d, d, rng);
            nn::init_mlp(&mut p, &format!("{base}.mlp"), d, hidden, rng);
            init_modulation(&mut p, &format!("{base}.mod"), d, rng);
        }
        nn::init_linear(&mut p, "final.mod", d, 2 * d, rng);
        // Zero output layers start the editor at the identity edit.
        p.insert("out.w", Tensor::zeros(&[d, config.token_dim()]));
        p.insert("out.b", Tensor::zeros(&[config.token_dim()]));
        let f = config.pixel_features;
        nn::init_linear(&mut p, "pixel.feat", d, f, rng);
        nn::init_linear(&mut p, "pixel.cond", d, f, rng);
        nn::init_linear(&mut p, "pixel.fc1", f + 2 * config.channels, config.pixel_hidden, rng);
        p.insert("pixel.fc2.w", Tensor::zeros(&[config.pixel_hidden, config.channels]));
        p.insert("pixel.fc2.b", Tensor::zeros(&[config.channels]));
        Ok(Self {
            config,
            weights: p,
            adapters: AdapterSet::empty(),
        })
    }

    /// Replaces the adapters with fresh ones at the placements `rule` selects.
    pub fn attach_adapters<R: Rng + ?Sized>(
        &mut self,
        rule: PlacementRule,
        rank: usize,
        scale: f64,
        rng: &mut R,
    ) -> Result<()> {
        let places = lora::placements(rule, self.config.double_blocks, self.config.single_blocks)?;
        let cfg = self.config.clone();
        self.adapters = AdapterSet::new(&places, |p| cfg.projection_dims(p), rank, scale, rng)?;
        Ok(())
    }

    pub fn detach_adapters(&mut self) -> AdapterSet {
        std::mem::take(&mut self.adapters)
    }

    /// Backbone weights are always constants; adapters are trainable leaves
    /// when `train_adapters` is set.
    pub fn bind(&self, g: &Graph, train_adapters: bool) -> BoundEditor {
        BoundEditor {
            weights: self.weights.bind(g, false),
            adapters: self.adapters.bind(g, train_adapters),
        }
    }

    /// Backbone weights as constants with no adapters: the frozen feature
    /// extractor of the global consistency term.
    pub fn bind_frozen_backbone(&self, g: &Graph) -> BoundEditor {
        BoundEditor {
            weights: self.weights.bind(g, false),
            adapters: BoundAdapters::empty(),
        }
    }

    /// Binds every backbone weight as trainable, for pretraining.
    pub fn bind_backbone_trainable(&self, g: &Graph) -> BoundEditor {
        BoundEditor {
            weights: self.weights.bind(g, true),
            adapters: self.adapters.bind(g, false),
        }
    }

    pub fn backbone_checksum(&self) -> String {
        self.weights.checksum()
    }

    pub fn forward(&self, g: &Graph, b: &BoundEditor, args: ForwardArgs<'_>) -> Result<ForwardOutput> {
        crate::instrument::editor_forward();
        let cfg = &self.config;
        let d = cfg.width;
        let zs = g.shape(args.z);
        if zs.len() != 3 || zs[2] != cfg.channels {
            return Err(Error::Argument(format!(
                "latent must be [H, W, {}], got {zs:?}",
                cfg.channels
            )));
        }
        let (h, w) = (zs[0], zs[1]);
        if h % cfg.patch != 0 || w % cfg.patch != 0 {
            return Err(Error::Argument(format!(
                "{h}x{w} latent not divisible by patch {}",
                cfg.patch
            )));
        }
        if !(0.0..=1.0).contains(&args.t) {
            return Err(Error::Argument(format!("flow time {} outside [0, 1]", args.t)));
        }
        if args.prompt.is_empty() {
            return Err(Error::Argument("empty prompt".into()));
        }
        if let Some(tap) = args.tap {
            cfg.locate(tap)?;
        }
        let (gh, gw) = (h / cfg.patch, w / cfg.patch);
        let n_noise = gh * gw;
        let period = args.panel_cols.unwrap_or(gw);
        let pos = g.constant(nn::grid_positions(gh, gw, period, d));

        let temb = g.constant(Tensor::from_vec(&[1, d], nn::sinusoid(args.t * 1000.0, d)));
        let temb = nn::mlp(g, &b.weights, "time_in", temb)?;

        let embed = |img: Var| -> Result<Var> {
            let tok = nn::patchify(g, img, cfg.patch)?;
            let tok = nn::linear(g, &b.weights, "img_in", tok)?;
            g.add(tok, pos)
        };
        let mut img = embed(args.z)?;
        // Global latent context: token sum over √n, unit scale for white noise.
        let zt = nn::patchify(g, args.z, cfg.patch)?;
        let zpool = g.mean_axis(zt, 0)?;
        let zpool = g.scale(zpool, (n_noise as f64).sqrt());
        let zpool = nn::linear(g, &b.weights, "latent_pool", zpool)?;
        let x_shape = zs.clone();
        if let Some(src) = args.source {
            if g.shape(src) != x_shape {
                return Err(Error::Dimension {
                    op: "source conditioning",
                    left: g.shape(src),
                    right: x_shape,
                });
            }
            let s = embed(src)?;
            let s = g.add(s, b.weights.var("src_marker")?)?;
            img = g.concat(&[img, s], 0)?;
        }

        let n_txt = args.prompt.len();
        let txt = g.gather_rows(b.weights.var("txt_embed")?, args.prompt)?;
        // Pooled prompt plus time drives every block's modulation.
        let pooled = g.mean_axis(txt, 0)?;
        let pooled = nn::linear(g, &b.weights, "txt_pool", pooled)?;
        let cond = g.add(temb, pooled)?;
        let cond = g.add(cond, zpool)?;
        let cond = g.silu(cond);
        let txt_pos = g.constant(nn::grid_positions(n_txt, 1, 1, d));
        let mut txt = g.add(txt, txt_pos)?;

        let mut tap = None;
        for i in 0..cfg.double_blocks {
            (txt, img) = self.double_block(g, b, i, cond, txt, img)?;
            if args.tap == Some(i) {
                tap = Some(g.slice(img, 0, 0, n_noise)?);
            }
        }
        let mut x = g.concat(&[txt, img], 0)?;
        for j in 0..cfg.single_blocks {
            x = self.single_block(g, b, j, cond, x)?;
            if args.tap == Some(cfg.double_blocks + j) {
                tap = Some(g.slice(x, 0, n_txt, n_txt + n_noise)?);
            }
        }
        let out = g.slice(x, 0, n_txt, n_txt + n_noise)?;
        let m = nn::linear(g, &b.weights, "final.mod", cond)?;
        let shift = g.slice(m, 1, 0, d)?;
        let scale = g.slice(m, 1, d, 2 * d)?;
        let out = modulate(g, out, shift, scale)?;
        let coarse = nn::linear(g, &b.weights, "out", out)?;
        let coarse = nn::unpatchify(g, coarse, gh, gw, cfg.patch, cfg.channels)?;
        let fine = self.pixel_head(g, b, out, cond, args.z, args.source, (gh, gw))?;
        let delta = g.add(coarse, fine)?;
        let x_hat = match args.source {
            Some(src) => g.add(src, delta)?,
            None => delta,
        };
        let diff = g.sub(args.z, x_hat)?;
        let velocity = g.scale(diff, 1.0 / args.t.max(T_MIN));
        let tap = match tap {
            Some(t) => Some(g.reshape(t, &[gh, gw, d])?),
            None => None,
        };
        Ok(ForwardOutput { velocity, x_hat, tap })
    }

    /// Per-pixel refinement: each token's feature is shared by its patch and
    /// combined with the latent and source values of the pixel itself.
    #[allow(clippy::too_many_arguments)]
    fn pixel_head(
        &self,
        g: &Graph,
        b: &BoundEditor,
        tokens: Var,
        cond: Var,
        z: Var,
        source: Option<Var>,
        (gh, gw): (usize, usize),
    ) -> Result<Var> {
        let cfg = &self.config;
        let f = cfg.pixel_features;
        let feat = nn::linear(g, &b.weights, "pixel.feat", tokens)?;
        let c = nn::linear(g, &b.weights, "pixel.cond", cond)?;
        let feat = g.add(feat, c)?;
        let copies = vec![feat; cfg.patch * cfg.patch];
        let spread = g.concat(&copies, 1)?;
        let spread = nn::unpatchify(g, spread, gh, gw, cfg.patch, f)?;
        let src = match source {
            Some(s) => s,
            None => g.constant(Tensor::zeros(&g.shape(z))),
        };
        let x = g.concat(&[spread, z, src], 2)?;
        let (h, w) = (gh * cfg.patch, gw * cfg.patch);
        let x = g.reshape(x, &[h * w, f + 2 * cfg.channels])?;
        let x = nn::linear(g, &b.weights, "pixel.fc1", x)?;
        let x = g.gelu(x);
        let x = nn::linear(g, &b.weights, "pixel.fc2", x)?;
        g.reshape(x, &[h, w, cfg.channels])
    }

    fn projection(&self, g: &Graph, b: &BoundEditor, name: &str, place: Option<LoraPlacement>, x: Var) -> Result<Var> {
        let w = b.weights.var(&format!("{name}.w"))?;
        let bias = b.weights.var(&format!("{name}.b"))?;
        let adapter = place.and_then(|p| b.adapters.find(p));
        lora::adapted_linear(g, x, w, bias, adapter)
    }

    fn double_block(&self, g: &Graph, b: &BoundEditor, i: usize, cond: Var, txt: Var, img: Var) -> Result<(Var, Var)> {
        let d = self.config.width;
        let place = |projection| LoraPlacement {
            stream: StreamKind::Double,
            block: i,
            projection,
        };
        let n_txt = g.shape(txt)[0];
        let mi = Modulation::new(g, b, &format!("double.{i}.img.mod"), cond, d)?;
        let mt = Modulation::new(g, b, &format!("double.{i}.txt.mod"), cond, d)?;
        let hi = modulate(g, img, mi.shift1, mi.scale1)?;
        let ht = modulate(g, txt, mt.shift1, mt.scale1)?;
        let qkv_i = self.projection(g, b, &format!("double.{i}.img.qkv"), Some(place(Projection::Qkv)), hi)?;
        let qkv_t = self.projection(g, b, &format!("double.{i}.txt.qkv"), None, ht)?;
        let joint = g.concat(&[qkv_t, qkv_i], 0)?;
        let q = g.slice(joint, 1, 0, d)?;
        let k = g.slice(joint, 1, d, 2 * d)?;
        let v = g.slice(joint, 1, 2 * d, 3 * d)?;
        let a = nn::attention(g, q, k, v, self.config.heads)?;
        let n = g.shape(a)[0];
        let at = g.slice(a, 0, 0, n_txt)?;
        let ai = g.slice(a, 0, n_txt, n)?;
        let pi = self.projection(g, b, &format!("double.{i}.img.proj"), Some(place(Projection::Proj)), ai)?;
        let pt = self.projection(g, b, &format!("double.{i}.txt.proj"), None, at)?;
        let img = gated_add(g, img, pi, mi.gate1)?;
        let txt = gated_add(g, txt, pt, mt.gate1)?;
        let hi = modulate(g, img, mi.shift2, mi.scale2)?;
        let hi = nn::mlp(g, &b.weights, &format!("double.{i}.img.mlp"), hi)?;
        let ht = modulate(g, txt, mt.shift2, mt.scale2)?;
        let ht = nn::mlp(g, &b.weights, &format!("double.{i}.txt.mlp"), ht)?;
        Ok((gated_add(g, txt, ht, mt.gate2)?, gated_add(g, img, hi, mi.gate2)?))
    }

    fn single_block(&self, g: &Graph, b: &BoundEditor, j: usize, cond: Var, x: Var) -> Result<Var> {
        let d = self.config.width;
        let place = |projection| LoraPlacement {
            stream: StreamKind::Single,
            block: j,
            projection,
        };
        let m = Modulation::new(g, b, &format!("single.{j}.mod"), cond, d)?;
        let h = modulate(g, x, m.shift1, m.scale1)?;
        let qkv = self.projection(g, b, &format!("single.{j}.qkv"), Some(place(Projection::Qkv)), h)?;
        let q = g.slice(qkv, 1, 0, d)?;
        let k = g.slice(qkv, 1, d, 2 * d)?;
        let v = g.slice(qkv, 1, 2 * d, 3 * d)?;
        let a = nn::attention(g, q, k, v, self.config.heads)?;
        let a = self.projection(g, b, &format!("single.{j}.proj"), Some(place(Projection::Proj)), a)?;
        let x = gated_add(g, x, a, m.gate1)?;
        let h = modulate(g, x, m.shift2, m.scale2)?;
        let h = nn::mlp(g, &b.weights, &format!("single.{j}.mlp"), h)?;
        gated_add(g, x, h, m.gate2)
    }

    pub fn to_container(&self) -> Container {
        let mut c = Container::new(serde_json::json!({ "editor": self.config }));
        for (name, t) in self.weights.iter() {
            c.push(name.clone(), t.clone());
        }
        self.adapters.write_into(&mut c);
        c
    }

    pub fn from_container(c: &Container) -> Result<Self> {
        let config: EditorConfig = serde_json::from_value(
            c.config
                .get("editor")
                .cloned()
                .ok_or_else(|| Error::Config("container has no editor config".into()))?,
        )?;
        config.validate()?;
        let mut weights = Params::new();
        for (name, t) in &c.tensors {
            if !name.starts_with("lora.") {
                weights.insert(name.clone(), t.clone());
            }
        }
        let adapters = AdapterSet::read_from(c)?;
        Ok(Self {
            config,
            weights,
            adapters,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        self.to_container().save(path)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_container(&Container::load(path)?)
    }
}

/// Shift, scale, and gate for the attention and MLP halves of a block.
struct Modulation {
    shift1: Var,
    scale1: Var,
    gate1: Var,
    shift2: Var,
    scale2: Var,
    gate2: Var,
}

impl Modulation {
    fn new(g: &Graph, b: &BoundEditor, name: &str, cond: Var, d: usize) -> Result<Self> {
        let m = nn::linear(g, &b.weights, name, cond)?;
        let part = |k: usize| g.slice(m, 1, k * d, (k + 1) * d);
        Ok(Self {
            shift1: part(0)?,
            scale1: part(1)?,
            gate1: part(2)?,
            shift2: part(3)?,
            scale2: part(4)?,
            gate2: part(5)?,
        })
    }
}

fn init_modulation<R: Rng + ?Sized>(p: &mut Params, name: &str, d: usize, rng: &mut R) {
    p.insert(format!("{name}.w"), Tensor::randn(&[d, 6 * d], 0.1 / (d as f64).sqrt(), rng));
    let mut bias = Tensor::zeros(&[6 * d]);
    // Gates open at 1 so a fresh block is a plain pre-norm residual block.
    for k in [2, 5] {
        bias.data_mut()[k * d..(k + 1) * d].iter_mut().for_each(|v| *v = 1.0);
    }
    p.insert(format!("{name}.b"), bias);
}

/// `LN(x)·(1 + scale) + shift`.
fn modulate(g: &Graph, x: Var, shift: Var, scale: Var) -> Result<Var> {
    let h = g.layer_norm(x, LN_EPS);
    let s = g.shift(scale, 1.0);
    let h = g.mul(h, s)?;
    g.add(h, shift)
}

fn gated_add(g: &Graph, x: Var, y: Var, gate: Var) -> Result<Var> {
    let y = g.mul(y, gate)?;
    g.add(x, y)
}
