//! Pose-free feedforward lifting: a shared-weight patch encoder conditioned
//! on camera intrinsics, a cross-view decoder, and per-token heads that
//! regress one Gaussian per token in the frame of the first view.

use std::io::Write;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::container::Container;
use crate::error::{Error, Result};
use crate::gaussians::{sh_coeffs, GaussianPrimitive, GaussianScene, SH_C0};
use crate::nn::{self, Bound, Params};
use crate::numerics::{adamw_step, rng, AdamW, Graph, OptimizerState, Tensor, Var};
use crate::rasterizer::{render_on, CameraIntrinsics, CameraPose, RasterConfig, SplatVars};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LifterConfig {
    pub patch: usize,
    pub width: usize,
    /// Channels of each token reserved for the intrinsics embedding.
    pub intrinsics_width: usize,
    pub encoder_depth: usize,
    pub decoder_depth: usize,
    pub heads: usize,
    pub sh_degree: usize,
    /// Depth along each token's ray before the learned correction.
    pub base_depth: f64,
    /// Scale of a primitive whose raw scale output is the initial bias.
    pub init_scale: f64,
}

impl Default for LifterConfig {
    fn default() -> Self {
        Self {
            patch: 2,
            width: 48,
            intrinsics_width: 8,
            encoder_depth: 2,
            decoder_depth: 2,
            heads: 4,
            sh_degree: 1,
            base_depth: 3.0,
            init_scale: 0.04,
        }
    }
}

impl LifterConfig {
    pub fn validate(&self) -> Result<()> {
        if self.patch == 0 || self.width == 0 || self.heads == 0 || self.width % self.heads != 0 {
            return Err(Error::Config(format!(
                "lifter width {} must be a positive multiple of heads {} and patch positive",
                self.width, self.heads
            )));
        }
        if self.intrinsics_width >= self.width {
            return Err(Error::Config("intrinsics embedding must leave room for patch features".into()));
        }
        if self.sh_degree > crate::gaussians::MAX_SH_DEGREE {
            return Err(Error::Config(format!("SH degree {} above 3", self.sh_degree)));
        }
        Ok(())
    }

    /// Raw head channels: mean 3, opacity 1, rotation 4, scale 3, SH.
    pub fn head_dim(&self) -> usize {
        11 + 3 * sh_coeffs(self.sh_degree)
    }
}

pub struct LifterOutput {
    pub scene: GaussianScene,
    /// Per-primitive opacity before any thresholding, used as confidence.
    pub confidence: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Lifter {
    pub config: LifterConfig,
    pub weights: Params,
}

/// Graph handles for one lifter forward pass.
pub struct LiftVars {
    pub splats: SplatVars,
    pub confidence: Var,
}

impl Lifter {
    pub fn new<R: Rng + ?Sized>(config: LifterConfig, rng: &mut R) -> Result<Self> {
        config.validate()?;
        let d = config.width;
        let mut p = Params::new();
        let patch_dim = config.patch * config.patch * 3;
        nn::init_linear(&mut p, "enc.patch", patch_dim, d - config.intrinsics_width, rng);
        nn::init_linear(&mut p, "enc.intrinsics", 4, config.intrinsics_width, rng);
        for i in 0..config.encoder_depth {
            init_block(&mut p, &format!("enc.{i}"), d, false, rng);
        }
        p.insert("dec.view_ref", Tensor::randn(&[d], 0.2, rng));
        p.insert("dec.view_other", Tensor::randn(&[d], 0.2, rng));
        for i in 0..config.decoder_depth {
            init_block(&mut p, &format!("dec.{i}"), d, true, rng);
        }
        let hd = config.head_dim();
        p.insert("head.w", Tensor::randn(&[d, hd], 0.01 / (d as f64).sqrt(), rng));
        let mut bias = vec![0.0; hd];
        // Identity rotation and small isotropic scales at initialization.
        bias[4] = 1.0;
        for b in &mut bias[8..11] {
            *b = config.init_scale.ln();
        }
        p.insert("head.b", Tensor::from_vec(&[hd], bias));
        Ok(Self { config, weights: p })
    }

    /// Patch tokens `[n, width]`: patch features with a learned projection of
    /// the normalized intrinsics concatenated to every token.
    pub fn tokenize(&self, g: &Graph, b: &Bound, image: Var, intr: &CameraIntrinsics) -> Result<Var> {
        let s = g.shape(image);
        if s.len() != 3 || s[2] != 3 {
            return Err(Error::Argument(format!("image must be [H, W, 3], got {s:?}")));
        }
        if s[0] != intr.height || s[1] != intr.width {
            return Err(Error::Argument(format!(
                "image {}x{} does not match intrinsics {}x{}",
                s[0], s[1], intr.height, intr.width
            )));
        }
        let p = self.config.patch;
        let tok = nn::patchify(g, image, p)?;
        let n = g.shape(tok)[0];
        let tok = nn::linear(g, b, "enc.patch", tok)?;
        let k = g.constant(Tensor::from_vec(&[1, 4], intr.normalized().to_vec()));
        let k = nn::linear(g, b, "enc.intrinsics", k)?;
        let k = g.tanh(k);
        let ones = g.constant(Tensor::ones(&[n, 1]));
        let k = g.matmul(ones, k)?;
        let x = g.concat(&[tok, k], 1)?;
        let pos = g.constant(nn::grid_positions(s[0] / p, s[1] / p, s[1] / p, self.config.width));
        g.add(x, pos)
    }

    /// Shared-weight encoder.
    pub fn encode(&self, g: &Graph, b: &Bound, tokens: Var) -> Result<Var> {
        let mut x = tokens;
        for i in 0..self.config.encoder_depth {
            x = block(g, b, &format!("enc.{i}"), x, None, self.config.heads)?;
        }
        Ok(x)
    }

    /// Each view's tokens attend to themselves and, through cross-attention,
    /// to the other view's tokens. View `a` is the reference.
    pub fn cross_view_decode(&self, g: &Graph, b: &Bound, a: Var, bt: Var) -> Result<(Var, Var)> {
        let (sa, sb) = (g.shape(a), g.shape(bt));
        if sa.len() != 2 || sb.len() != 2 || sa[1] != self.config.width || sb[1] != self.config.width {
            return Err(Error::Config(format!(
                "token widths {sa:?} and {sb:?} must both be {}",
                self.config.width
            )));
        }
        let mut xa = g.add(a, b.var("dec.view_ref")?)?;
        let mut xb = g.add(bt, b.var("dec.view_other")?)?;
        for i in 0..self.config.decoder_depth {
            let name = format!("dec.{i}");
            let na = block(g, b, &name, xa, Some(xb), self.config.heads)?;
            let nb = block(g, b, &name, xb, Some(xa), self.config.heads)?;
            (xa, xb) = (na, nb);
        }
        Ok((xa, xb))
    }

    /// Maps fused tokens of both views to splat parameters on the graph.
    /// Means follow each token's pixel ray, scaled by a learned depth, plus a
    /// free offset; colors add a learned SH residual to the patch's mean color.
    pub fn heads(
        &self,
        g: &Graph,
        b: &Bound,
        fused: [Var; 2],
        images: [Var; 2],
        intr: [&CameraIntrinsics; 2],
    ) -> Result<LiftVars> {
        let cfg = &self.config;
        let k = 3 * sh_coeffs(cfg.sh_degree);
        let mut means = Vec::new();
        let mut opac = Vec::new();
        let mut rot = Vec::new();
        let mut scale = Vec::new();
        let mut sh = Vec::new();
        for v in 0..2 {
            let raw = nn::linear(g, b, "head", fused[v])?;
            let n = g.shape(raw)[0];
            let (rays, colors) = self.token_priors(g, images[v], intr[v])?;
            let depth = g.slice(raw, 1, 0, 1)?;
            let depth = g.shift(depth, cfg.base_depth);
            let on_ray = g.mul(rays, depth)?;
            let offset = g.slice(raw, 1, 1, 3)?;
            let zero = g.constant(Tensor::zeros(&[n, 1]));
            let offset = g.concat(&[offset, zero], 1)?;
            means.push(g.add(on_ray, offset)?);
            let o = g.slice(raw, 1, 3, 4)?;
            opac.push(g.sigmoid(o));
            let q = g.slice(raw, 1, 4, 8)?;
            rot.push(normalize_quaternions(g, q)?);
            let s = g.slice(raw, 1, 8, 11)?;
            scale.push(g.exp(s));
            let c = g.slice(raw, 1, 11, 11 + k)?;
            let dc = g.slice(c, 1, 0, 3)?;
            let dc = g.add(dc, colors)?;
            sh.push(if k > 3 {
                let rest = g.slice(c, 1, 3, k)?;
                g.concat(&[dc, rest], 1)?
            } else {
                dc
            });
        }
        let opacity = g.concat(&opac, 0)?;
        let n = g.shape(opacity)[0];
        let opacity = g.reshape(opacity, &[n])?;
        let splats = SplatVars {
            means: g.concat(&means, 0)?,
            opacity,
            rotation: g.concat(&rot, 0)?,
            scale: g.concat(&scale, 0)?,
            sh: g.concat(&sh, 0)?,
            sh_degree: cfg.sh_degree,
        };
        Ok(LiftVars {
            splats,
            confidence: opacity,
        })
    }

    /// Unit-depth pixel rays through token centers, and the DC coefficient
    /// of each patch's mean color.
    fn token_priors(&self, g: &Graph, image: Var, intr: &CameraIntrinsics) -> Result<(Var, Var)> {
        let p = self.config.patch;
        let (gh, gw) = (intr.height / p, intr.width / p);
        let mut rays = Vec::with_capacity(gh * gw * 3);
        for r in 0..gh {
            for c in 0..gw {
                let u = (c as f64 + 0.5) * p as f64;
                let v = (r as f64 + 0.5) * p as f64;
                rays.extend([(u - intr.cx) / intr.fx, (v - intr.cy) / intr.fy, 1.0]);
            }
        }
        let rays = g.constant(Tensor::from_vec(&[gh * gw, 3], rays));
        let tok = nn::patchify(g, image, p)?;
        let tok = g.reshape(tok, &[gh * gw, p * p, 3])?;
        let mean = g.mean_axis(tok, 1)?;
        let mean = g.reshape(mean, &[gh * gw, 3])?;
        let dc = g.shift(mean, -0.5);
        Ok((rays, g.scale(dc, 1.0 / SH_C0)))
    }

    pub fn forward_on(&self, g: &Graph, b: &Bound, views: [Var; 2], intr: [&CameraIntrinsics; 2]) -> Result<LiftVars> {
        crate::instrument::lifter_forward();
        let ta = self.tokenize(g, b, views[0], intr[0])?;
        let tb = self.tokenize(g, b, views[1], intr[1])?;
        let ea = self.encode(g, b, ta)?;
        let eb = self.encode(g, b, tb)?;
        let (fa, fb) = self.cross_view_decode(g, b, ea, eb)?;
        self.heads(g, b, [fa, fb], views, intr)
    }

    /// One feedforward pass from two views to a scene in view 0's frame.
    pub fn predict_gaussians(&self, views: [&Tensor; 2], intr: [&CameraIntrinsics; 2]) -> Result<LifterOutput> {
        let g = Graph::new();
        let b = self.weights.bind(&g, false);
        let v = [g.constant(views[0].clone()), g.constant(views[1].clone())];
        let out = self.forward_on(&g, &b, v, intr)?;
        let params = out.splats.values(&g);
        let confidence = g.value(out.confidence).data().to_vec();
        let k = 3 * sh_coeffs(params.sh_degree);
        let primitives = (0..params.len())
            .map(|i| GaussianPrimitive {
                mean: params.means[i],
                // Sigmoid can round to exactly 0 in f64 for extreme inputs.
                opacity: params.opacity[i].max(f64::MIN_POSITIVE),
                rotation: params.rotation[i],
                scale: params.scale[i].map(|s| s.max(f64::MIN_POSITIVE)),
                sh: params.sh[i * k..(i + 1) * k].to_vec(),
            })
            .collect();
        Ok(LifterOutput {
            scene: GaussianScene {
                primitives,
                sh_degree: params.sh_degree,
                canonical_view: 0,
            },
            confidence,
        })
    }

    pub fn to_container(&self) -> Container {
        let mut c = Container::new(serde_json::json!({ "lifter": self.config }));
        for (n, t) in self.weights.iter() {
            c.push(n.clone(), t.clone());
        }
        c
    }

    pub fn from_container(c: &Container) -> Result<Self> {
        let config: LifterConfig = serde_json::from_value(
            c.config
                .get("lifter")
                .cloned()
                .ok_or_else(|| Error::Config("container has no lifter config".into()))?,
        )?;
        let mut weights = Params::new();
        for (n, t) in &c.tensors {
            weights.insert(n.clone(), t.clone());
        }
        Ok(Self { config, weights })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        self.to_container().save(path)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_container(&Container::load(path)?)
    }
}

fn init_block<R: Rng + ?Sized>(p: &mut Params, name: &str, d: usize, cross: bool, rng: &mut R) {
    nn::init_linear(p, &format!("{name}.qkv"), d, 3 * d, rng);
    nn::init_linear(p, &format!("{name}.proj"), d, d, rng);
    if cross {
        nn::init_linear(p, &format!("{name}.xq"), d, d, rng);
        nn::init_linear(p, &format!("{name}.xkv"), d, 2 * d, rng);
        nn::init_linear(p, &format!("{name}.xproj"), d, d, rng);
    }
    nn::init_mlp(p, &format!("{name}.mlp"), d, 2 * d, rng);
}

/// Pre-norm transformer block with optional cross-attention to `other`.
fn block(g: &Graph, b: &Bound, name: &str, x: Var, other: Option<Var>, heads: usize) -> Result<Var> {
    let d = g.shape(x)[1];
    let h = g.layer_norm(x, 1e-6);
    let qkv = nn::linear(g, b, &format!("{name}.qkv"), h)?;
    let q = g.slice(qkv, 1, 0, d)?;
    let k = g.slice(qkv, 1, d, 2 * d)?;
    let v = g.slice(qkv, 1, 2 * d, 3 * d)?;
    let a = nn::attention(g, q, k, v, heads)?;
    let a = nn::linear(g, b, &format!("{name}.proj"), a)?;
    let mut x = g.add(x, a)?;
    if let Some(o) = other {
        let h = g.layer_norm(x, 1e-6);
        let ho = g.layer_norm(o, 1e-6);
        let q = nn::linear(g, b, &format!("{name}.xq"), h)?;
        let kv = nn::linear(g, b, &format!("{name}.xkv"), ho)?;
        let k = g.slice(kv, 1, 0, d)?;
        let v = g.slice(kv, 1, d, 2 * d)?;
        let a = nn::attention(g, q, k, v, heads)?;
        let a = nn::linear(g, b, &format!("{name}.xproj"), a)?;
        x = g.add(x, a)?;
    }
    let h = g.layer_norm(x, 1e-6);
    let m = nn::mlp(g, b, &format!("{name}.mlp"), h)?;
    g.add(x, m)
}

/// Row-wise unit quaternions; a zero row maps to the identity rotation.
pub fn normalize_quaternions(g: &Graph, raw: Var) -> Result<Var> {
    let s = g.shape(raw);
    if s.len() != 2 || s[1] != 4 {
        return Err(Error::Argument(format!("quaternions must be [n, 4], got {s:?}")));
    }
    let x = g.value(raw);
    let mut out = Vec::with_capacity(x.numel());
    let mut norms = Vec::with_capacity(s[0]);
    for q in x.data().chunks(4) {
        let n = q.iter().map(|v| v * v).sum::<f64>().sqrt();
        norms.push(n);
        if n < 1e-12 {
            out.extend([1.0, 0.0, 0.0, 0.0]);
        } else {
            out.extend(q.iter().map(|v| v / n));
        }
    }
    let value = Tensor::from_vec(&s, out.clone());
    Ok(g.custom(&[raw], value, move |d| {
        let mut grad = vec![0.0; out.len()];
        for (i, &n) in norms.iter().enumerate() {
            if n < 1e-12 {
                continue;
            }
            let u = &out[i * 4..i * 4 + 4];
            let dv = &d.data()[i * 4..i * 4 + 4];
            let proj: f64 = u.iter().zip(dv).map(|(a, b)| a * b).sum();
            for j in 0..4 {
                grad[i * 4 + j] = (dv[j] - proj * u[j]) / n;
            }
        }
        vec![Some(Tensor::from_vec(&[norms.len(), 4], grad))]
    }))
}

/// One lifting training example: two input views and supervised target
/// views with poses relative to view 0.
#[derive(Clone, Debug)]
pub struct LiftSample {
    pub views: [Tensor; 2],
    pub intrinsics: [CameraIntrinsics; 2],
    pub targets: Vec<LiftTarget>,
}

#[derive(Clone, Debug)]
pub struct LiftTarget {
    pub image: Tensor,
    pub intrinsics: CameraIntrinsics,
    /// Canonical (view 0) frame to target camera.
    pub pose: CameraPose,
}

/// Backdrop color of the synthetic scenes and of every lifter render.
pub const DEFAULT_BACKGROUND: [f64; 3] = [0.85, 0.85, 0.82];

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LiftTrainConfig {
    pub steps: usize,
    pub lr: f64,
    pub seed: u64,
    pub background: [f64; 3],
    pub raster: RasterConfig,
}

impl Default for LiftTrainConfig {
    fn default() -> Self {
        Self {
            steps: 2000,
            lr: 2e-3,
            seed: 3,
            background: DEFAULT_BACKGROUND,
            raster: RasterConfig::default(),
        }
    }
}

#[derive(Clone, Debug, Serialize)]
pub struct LiftRecord {
    pub step: usize,
    pub sample: usize,
    pub loss: f64,
}

/// Mean photometric L2 over every target of `sample`.
pub fn photometric_loss(lifter: &Lifter, sample: &LiftSample, cfg: &LiftTrainConfig) -> Result<f64> {
    let out = lifter.predict_gaussians(
        [&sample.views[0], &sample.views[1]],
        [&sample.intrinsics[0], &sample.intrinsics[1]],
    )?;
    let mut total = 0.0;
    for t in &sample.targets {
        let img = crate::rasterizer::render(&out.scene, &t.intrinsics, &t.pose, cfg.background, &cfg.raster)?.image;
        total += img.zip_map(&t.image, |a, b| (a - b) * (a - b))?.mean();
    }
    Ok(total / sample.targets.len().max(1) as f64)
}

/// Minimizes the photometric L2 between renders of the predicted scene and
/// the targets, one sample per step in a seeded shuffled order.
pub fn train_lifter(
    lifter: &mut Lifter,
    data: &[LiftSample],
    cfg: &LiftTrainConfig,
    mut log: Option<&mut dyn Write>,
) -> Result<Vec<LiftRecord>> {
    if data.is_empty() {
        return Err(Error::Argument("lifting needs at least one sample".into()));
    }
    let mut r = rng(cfg.seed);
    let names = lifter.weights.names();
    let mut params: Vec<Tensor> = names.iter().map(|n| lifter.weights.get(n).cloned()).collect::<Result<_>>()?;
    let mut state = OptimizerState::new(&params);
    let mut order: Vec<usize> = Vec::new();
    let mut records = Vec::with_capacity(cfg.steps);
    for step in 0..cfg.steps {
        if order.is_empty() {
            order = (0..data.len()).collect();
            order.shuffle(&mut r);
        }
        let si = order.pop().expect("refilled above");
        let sample = &data[si];
        let g = Graph::new();
        let b = lifter.weights.bind(&g, true);
        let views = [g.constant(sample.views[0].clone()), g.constant(sample.views[1].clone())];
        let out = lifter.forward_on(&g, &b, views, [&sample.intrinsics[0], &sample.intrinsics[1]])?;
        let mut terms = Vec::new();
        for t in &sample.targets {
            let img = render_on(&g, out.splats, &t.intrinsics, &t.pose, cfg.background, &cfg.raster)?;
            let target = g.constant(t.image.clone());
            let diff = g.sub(img, target)?;
            terms.push(g.mean_square(diff));
        }
        let mut loss = terms[0];
        for &t in &terms[1..] {
            loss = g.add(loss, t)?;
        }
        let loss = g.scale(loss, 1.0 / terms.len() as f64);
        let value = g.value(loss).item();
        if !value.is_finite() {
            return Err(Error::Training {
                step,
                reason: "non-finite photometric loss".into(),
            });
        }
        let grads = g.backward(loss)?;
        let gs: Vec<Tensor> = names
            .iter()
            .zip(&params)
            .map(|(n, p)| {
                let v = b.var(n)?;
                Ok(grads.get(v).cloned().unwrap_or_else(|| Tensor::zeros(p.shape())))
            })
            .collect::<Result<_>>()?;
        let progress = step as f64 / cfg.steps.max(1) as f64;
        let lr = cfg.lr * (0.1 + 0.9 * 0.5 * (1.0 + (std::f64::consts::PI * progress).cos()));
        let (next, st) = adamw_step(
            &params,
            &gs,
            &state,
            &AdamW {
                lr,
                weight_decay: 0.0,
                ..AdamW::default()
            },
        )
        .map_err(|e| match e {
            Error::Training { reason, .. } => Error::Training { step, reason },
            other => other,
        })?;
        params = next;
        state = st;
        for (n, p) in names.iter().zip(&params) {
            lifter.weights.insert(n.clone(), p.clone());
        }
        let rec = LiftRecord {
            step,
            sample: si,
            loss: value,
        };
        if let Some(w) = log.as_deref_mut() {
            let line = serde_json::to_string(&rec)?;
            writeln!(w, "{line}").map_err(|e| Error::io("lifter log", e))?;
        }
        records.push(rec);
    }
    Ok(records)
}
