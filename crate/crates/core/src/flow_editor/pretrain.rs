//! Backbone pretraining on a generic 2D recolor corpus.
//!
//! The corpus is flat-shaded rectangles and discs on muted backgrounds with
//! instructions of the form "turn the <noun> <color>": pixels of the noun's
//! bound color become the requested color. The benchmark scenes are never
//! seen here.
//!
//! Noise and sample are coupled the way a one-step (reflowed) generator
//! couples them: the noise draw sets how strongly the edit is applied, so
//! two views edited with independent noise can disagree.

use rand::seq::IndexedRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use super::model::{FlowEditor, ForwardArgs};
use super::sampling::{gaussian_noise, EditPrompt};
use crate::error::{Error, Result};
use crate::imaging;
use crate::numerics::{adamw_step, rng, AdamW, Graph, OptimizerState, Tensor};
use crate::vocab;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PretrainConfig {
    pub steps: usize,
    pub image_size: usize,
    pub lr: f64,
    /// Fraction of steps drawn at `t = 1`, the only time used for editing.
    pub endpoint_fraction: f64,
    pub seed: u64,
    /// Slope of the edit strength in the normalized noise mean; 0 decouples.
    pub coupling_gain: f64,
    /// Offset of the edit strength logit.
    pub coupling_bias: f64,
}

impl Default for PretrainConfig {
    fn default() -> Self {
        Self {
            steps: 6000,
            image_size: 32,
            lr: 2e-3,
            endpoint_fraction: 0.5,
            seed: 7,
            coupling_gain: 3.0,
            coupling_bias: 1.5,
        }
    }
}

/// One corpus sample.
#[derive(Clone, Debug)]
pub struct RecolorExample {
    pub source: Tensor,
    /// The fully applied edit.
    pub target: Tensor,
    pub prompt: EditPrompt,
    /// Pixels the edit changes, row-major.
    pub mask: Vec<bool>,
    pub source_rgb: [f64; 3],
    pub target_rgb: [f64; 3],
}

/// Edit strength in `(0, 1)` coupled to a noise draw:
/// `σ(gain·a + bias)` with `a` the noise mean scaled to unit variance.
pub fn edit_strength(noise: &Tensor, gain: f64, bias: f64) -> f64 {
    let n = noise.numel().max(1) as f64;
    let a = noise.data().iter().sum::<f64>() / n.sqrt();
    crate::numerics::sigmoid(gain * a + bias)
}

/// The example's target under `noise`: masked pixels blend from the source
/// color toward the requested color by [`edit_strength`].
pub fn coupled_target(ex: &RecolorExample, noise: &Tensor, gain: f64, bias: f64) -> Tensor {
    let beta = edit_strength(noise, gain, bias);
    let rgb = [0, 1, 2].map(|c| (1.0 - beta) * ex.source_rgb[c] + beta * ex.target_rgb[c]);
    let w = ex.source.shape()[1];
    let mut out = ex.source.clone();
    for (i, &m) in ex.mask.iter().enumerate() {
        if m {
            imaging::set_pixel(&mut out, i / w, i % w, rgb);
        }
    }
    out
}

fn muted<R: Rng + ?Sized>(rng: &mut R) -> [f64; 3] {
    let base = rng.random_range(0.3..0.8);
    [0, 1, 2].map(|_| (base + rng.random_range(-0.06..0.06f64)).clamp(0.0, 1.0))
}

fn fill<R: Rng + ?Sized>(img: &mut Tensor, mask: &mut [bool], rng: &mut R, rgb: [f64; 3], size: usize) {
    let disc = rng.random_bool(0.5);
    let min = size / 6;
    let max = size / 2;
    let h = rng.random_range(min..=max);
    let w = if disc { h } else { rng.random_range(min..=max) };
    let y0 = rng.random_range(0..=size - h);
    let x0 = rng.random_range(0..=size - w);
    let (cy, cx, r) = (y0 as f64 + h as f64 / 2.0, x0 as f64 + w as f64 / 2.0, h as f64 / 2.0);
    for y in y0..y0 + h {
        for x in x0..x0 + w {
            let inside = !disc || {
                let (dy, dx) = (y as f64 + 0.5 - cy, x as f64 + 0.5 - cx);
                dy * dy + dx * dx <= r * r
            };
            if inside {
                imaging::set_pixel(img, y, x, rgb);
                mask[y * size + x] = true;
            }
        }
    }
}

pub fn recolor_example<R: Rng + ?Sized>(size: usize, rng: &mut R) -> Result<RecolorExample> {
    let nouns: Vec<_> = vocab::nouns().collect();
    let noun = *nouns.choose(rng).expect("vocabulary has nouns");
    let bound = noun.bound.expect("nouns carry a color");
    let colors: Vec<_> = vocab::colors().filter(|c| c.text != bound).collect();
    let target = *colors.choose(rng).expect("vocabulary has colors");
    let src_rgb = vocab::color_rgb(bound).expect("bound color exists");

    let mut source = imaging::solid(size, size, muted(rng));
    let mut mask = vec![false; size * size];
    let distractors = rng.random_range(0..=2);
    for _ in 0..distractors {
        let other = *colors.choose(rng).expect("vocabulary has colors");
        let mut scratch = vec![false; size * size];
        fill(&mut source, &mut scratch, rng, other.color.expect("color word"), size);
    }
    fill(&mut source, &mut mask, rng, src_rgb, size);

    let mut tgt = source.clone();
    let t_rgb = target.color.expect("color word");
    for (i, &m) in mask.iter().enumerate() {
        if m {
            imaging::set_pixel(&mut tgt, i / size, i % size, t_rgb);
        }
    }
    let prompt = EditPrompt::parse(&format!("turn the {} {}", noun.text, target.text))?;
    Ok(RecolorExample {
        source,
        target: tgt,
        prompt,
        mask,
        source_rgb: src_rgb,
        target_rgb: t_rgb,
    })
}

#[derive(Clone, Debug, Serialize)]
pub struct PretrainRecord {
    pub step: usize,
    pub loss: f64,
}

/// Trains every backbone weight with the rectified-flow objective written in
/// clean-estimate form, `‖x̂(z_t) − x‖²`.
pub fn pretrain(editor: &mut FlowEditor, cfg: &PretrainConfig) -> Result<Vec<PretrainRecord>> {
    let mut r = rng(cfg.seed);
    let names = editor.weights.names();
    let mut params: Vec<Tensor> = names.iter().map(|n| editor.weights.get(n).cloned()).collect::<Result<_>>()?;
    let mut state = OptimizerState::new(&params);
    let opt = AdamW {
        lr: cfg.lr,
        ..AdamW::default()
    };
    let mut log = Vec::with_capacity(cfg.steps);
    for step in 0..cfg.steps {
        let ex = recolor_example(cfg.image_size, &mut r)?;
        let t = if r.random_bool(cfg.endpoint_fraction) {
            1.0
        } else {
            r.random_range(0.05..1.0)
        };
        let noise = gaussian_noise(ex.target.shape(), &mut r);
        let target = coupled_target(&ex, &noise, cfg.coupling_gain, cfg.coupling_bias);
        let zt = target.zip_map(&noise, |x, e| (1.0 - t) * x + t * e)?;

        let g = Graph::new();
        let b = editor.bind_backbone_trainable(&g);
        let src = g.constant(ex.source.clone());
        let z = g.constant(zt);
        let out = editor.forward(
            &g,
            &b,
            ForwardArgs {
                z,
                t,
                prompt: &ex.prompt.ids,
                source: Some(src),
                panel_cols: None,
                tap: None,
            },
        )?;
        let tgt = g.constant(target);
        let diff = g.sub(out.x_hat, tgt)?;
        let loss = g.mean_square(diff);
        let value = g.value(loss).item();
        if !value.is_finite() {
            return Err(Error::Training {
                step,
                reason: "non-finite pretraining loss".into(),
            });
        }
        let grads = g.backward(loss)?;
        let gs: Vec<Tensor> = names
            .iter()
            .zip(&params)
            .map(|(n, p)| {
                let v = b.weights.var(n)?;
                Ok(grads.get(v).cloned().unwrap_or_else(|| Tensor::zeros(p.shape())))
            })
            .collect::<Result<_>>()?;
        // Cosine decay to a tenth of the base rate.
        let progress = step as f64 / cfg.steps.max(1) as f64;
        let lr = cfg.lr * (0.1 + 0.9 * 0.5 * (1.0 + (std::f64::consts::PI * progress).cos()));
        let (next, st) = adamw_step(&params, &gs, &state, &AdamW { lr, ..opt.clone() })
            .map_err(|e| match e {
                Error::Training { reason, .. } => Error::Training { step, reason },
                other => other,
            })?;
        params = next;
        state = st;
        for (n, p) in names.iter().zip(&params) {
            editor.weights.insert(n.clone(), p.clone());
        }
        log.push(PretrainRecord { step, loss: value });
    }
    Ok(log)
}
