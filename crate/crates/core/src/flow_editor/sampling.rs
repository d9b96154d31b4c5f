//! Noising, one-step Euler sampling, feature taps, and decoding.

use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use super::model::{FlowEditor, ForwardArgs};
use crate::error::{Error, Result};
use crate::numerics::{Graph, Tensor, Var};
use crate::vocab;

/// Forward-diffusion timestep and horizon used for the global feature loss.
pub const GDFL_TIMESTEP: usize = 261;
pub const HORIZON: usize = 1000;

/// A pixel-space latent at flow time `t` (1 = noise, 0 = data).
#[derive(Clone, Debug, PartialEq)]
pub struct Latent {
    pub z: Tensor,
    pub t: f64,
}

impl Latent {
    pub fn new(z: Tensor, t: f64) -> Result<Self> {
        if !(0.0..=1.0).contains(&t) {
            return Err(Error::Argument(format!("flow time {t} outside [0, 1]")));
        }
        if !z.is_finite() {
            return Err(Error::Argument("latent has non-finite values".into()));
        }
        Ok(Self { z, t })
    }
}

/// An instruction as token ids over the closed vocabulary.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct EditPrompt {
    pub text: String,
    pub ids: Vec<usize>,
}

impl EditPrompt {
    pub fn parse(text: &str) -> Result<Self> {
        Ok(Self {
            text: text.to_string(),
            ids: vocab::tokenize(text)?,
        })
    }
}

pub fn gaussian_noise<R: Rng + ?Sized>(shape: &[usize], rng: &mut R) -> Tensor {
    let n: usize = shape.iter().product();
    Tensor::from_vec(shape, (0..n).map(|_| rng.sample::<f64, _>(StandardNormal)).collect())
}

/// `z₁ = (1 − s)·z_src + s·ε`.
pub fn perturb(source: &Tensor, noise: &Tensor, strength: f64) -> Result<Latent> {
    if !(strength > 0.0 && strength <= 1.0) {
        return Err(Error::Config(format!("strength {strength} outside (0, 1]")));
    }
    let z = source.zip_map(noise, |s, e| (1.0 - strength) * s + strength * e)?;
    Ok(Latent { z, t: 1.0 })
}

/// `x_t = (1 − t/T)·x₀ + (t/T)·ε` with the given noise.
pub fn forward_diffuse_with(x0: &Tensor, t: usize, horizon: usize, noise: &Tensor) -> Result<Tensor> {
    if horizon == 0 || t > horizon {
        return Err(Error::Argument(format!("timestep {t} outside [0, {horizon}]")));
    }
    let s = t as f64 / horizon as f64;
    x0.zip_map(noise, |x, e| (1.0 - s) * x + s * e)
}

pub fn forward_diffuse<R: Rng + ?Sized>(x0: &Tensor, t: usize, horizon: usize, rng: &mut R) -> Result<Tensor> {
    let noise = gaussian_noise(x0.shape(), rng);
    forward_diffuse_with(x0, t, horizon, &noise)
}

/// Velocity `v_θ(z, t, c)` with optional in-context source.
pub fn velocity(editor: &FlowEditor, z: &Latent, prompt: &EditPrompt, source: Option<&Tensor>) -> Result<Tensor> {
    let g = Graph::new();
    let b = editor.bind(&g, false);
    let zv = g.constant(z.z.clone());
    let src = source.map(|s| g.constant(s.clone()));
    let out = editor.forward(
        &g,
        &b,
        ForwardArgs {
            z: zv,
            t: z.t,
            prompt: &prompt.ids,
            source: src,
            panel_cols: None,
            tap: None,
        },
    )?;
    let v = (*g.value(out.velocity)).clone();
    if !v.is_finite() {
        return Err(Error::Inference("non-finite velocity".into()));
    }
    Ok(v)
}

/// `z₀ = z₁ − v_θ(z₁, 1, c)`; returns `z₀` and the velocity used.
pub fn euler_single_step(
    z1: &Latent,
    prompt: &EditPrompt,
    source: Option<&Tensor>,
    editor: &FlowEditor,
) -> Result<(Latent, Tensor)> {
    let v = velocity(editor, z1, prompt, source)?;
    let z0 = z1.z.sub(&v)?;
    Ok((Latent { z: z0, t: 0.0 }, v))
}

/// Clamps every channel to `[0, 1]`.
pub fn decode(z0: &Latent) -> Tensor {
    z0.z.map(|x| x.clamp(0.0, 1.0))
}

/// Captured post-block image-token activations.
#[derive(Clone, Debug, PartialEq)]
pub struct FeatureTap {
    pub layer: usize,
    /// `[h, w, d]`.
    pub features: Tensor,
}

/// Velocity plus the activation grid after global block `layer`.
pub fn forward_with_tap(
    x: &Tensor,
    t: f64,
    prompt: &EditPrompt,
    editor: &FlowEditor,
    layer: usize,
    panel_cols: Option<usize>,
) -> Result<(Tensor, FeatureTap)> {
    let g = Graph::new();
    let b = editor.bind(&g, false);
    let xv = g.constant(x.clone());
    let out = editor.forward(
        &g,
        &b,
        ForwardArgs {
            z: xv,
            t,
            prompt: &prompt.ids,
            source: None,
            panel_cols,
            tap: Some(layer),
        },
    )?;
    let tap = out.tap.expect("tap requested");
    Ok((
        (*g.value(out.velocity)).clone(),
        FeatureTap {
            layer,
            features: (*g.value(tap)).clone(),
        },
    ))
}

/// The full single-step edit on a graph: perturb, one Euler step, decode.
/// Differentiable with respect to whatever in `editor`'s binding is trainable.
pub fn edit_on_graph(
    g: &Graph,
    editor: &FlowEditor,
    bound: &super::model::BoundEditor,
    source: Var,
    noise: &Tensor,
    strength: f64,
    prompt: &EditPrompt,
) -> Result<Var> {
    let z1 = perturb(&g.value(source), noise, strength)?;
    let zv = g.constant(z1.z);
    let out = editor.forward(
        g,
        bound,
        ForwardArgs {
            z: zv,
            t: 1.0,
            prompt: &prompt.ids,
            source: Some(source),
            panel_cols: None,
            tap: None,
        },
    )?;
    let z0 = g.sub(zv, out.velocity)?;
    Ok(g.clamp(z0, 0.0, 1.0))
}

/// Edits one image without a graph the caller keeps.
pub fn edit_image(
    editor: &FlowEditor,
    source: &Tensor,
    noise: &Tensor,
    strength: f64,
    prompt: &EditPrompt,
) -> Result<Tensor> {
    let z1 = perturb(source, noise, strength)?;
    let (z0, _) = euler_single_step(&z1, prompt, Some(source), editor)?;
    Ok(decode(&z0))
}
