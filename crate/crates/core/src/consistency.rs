//! Cross-view consistency objective and the self-supervised adapter
//! fine-tuning loop.
//!
//! The global term compares the two width-halves of an intermediate feature
//! map computed on the re-noised, side-by-side edited pair. The local term
//! compares dense features of the text-localized cell in each edited view.

use std::io::Write;
use std::time::Instant;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::flow_editor::{edit_on_graph, gaussian_noise, BoundEditor, EditPrompt, FlowEditor, ForwardArgs, GDFL_TIMESTEP, HORIZON};
use crate::numerics::{adamw_step, rng, AdamW, Graph, OptimizerState, Tensor, Var};
use crate::perception::{localize, Embedder, Localization, DEFAULT_CONFIDENCE_THRESHOLD};

/// Added under the square root when normalizing tapped features.
pub const FEATURE_EPS: f64 = 1e-12;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LossConfig {
    pub lambda_gd: f64,
    pub lambda_le: f64,
    /// Global block whose output is compared; `None` picks the second-to-last.
    pub tap_block: Option<usize>,
    pub timestep: usize,
    pub horizon: usize,
    pub lefl_patch: usize,
    pub localization_patch: usize,
    pub confidence_threshold: f64,
    /// Weight of the optional reconstruction anchor outside the localized
    /// cells. An extension beyond the two consistency terms; off by default.
    pub anchor_weight: f64,
}

impl Default for LossConfig {
    fn default() -> Self {
        Self {
            lambda_gd: 0.4,
            lambda_le: 0.6,
            tap_block: None,
            timestep: GDFL_TIMESTEP,
            horizon: HORIZON,
            lefl_patch: 16,
            localization_patch: 8,
            confidence_threshold: DEFAULT_CONFIDENCE_THRESHOLD,
            anchor_weight: 0.0,
        }
    }
}

impl LossConfig {
    /// Patch sizes for 32×32 views: a 2×2 LEFL grid and a 4×4
    /// localization grid. Same as the default.
    pub fn toy() -> Self {
        Self::default()
    }

    /// Reference patch sizes for 192×192 or larger views.
    pub fn full_scale() -> Self {
        Self {
            lefl_patch: 96,
            localization_patch: 32,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.lambda_gd < 0.0 || self.lambda_le < 0.0 || self.anchor_weight < 0.0 {
            return Err(Error::Config("loss weights must be non-negative".into()));
        }
        if self.timestep > self.horizon || self.horizon == 0 {
            return Err(Error::Config(format!(
                "timestep {} outside horizon {}",
                self.timestep, self.horizon
            )));
        }
        Ok(())
    }

    pub fn tap(&self, editor: &FlowEditor) -> Result<usize> {
        let n = editor.config.num_blocks();
        let block = self.tap_block.unwrap_or(n.saturating_sub(2));
        editor.config.locate(block)?;
        Ok(block)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub steps: usize,
    pub batch_size: usize,
    pub optimizer: AdamW,
    pub seed: u64,
    /// Edit strength of the perturbation before the Euler step.
    pub strength: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            steps: 2000,
            batch_size: 1,
            optimizer: AdamW::default(),
            seed: 0,
            strength: 1.0,
        }
    }
}

/// Global diffusion-feature loss on a graph. `noise` is one `[H, W, 3]` draw
/// tiled over both halves, so identical views yield identical halves.
/// `bound` is the feature extractor; training passes the frozen backbone so
/// gradients reach the adapters only through the edited images.
#[allow(clippy::too_many_arguments)]
pub fn gdfl_on(
    g: &Graph,
    editor: &FlowEditor,
    bound: &BoundEditor,
    left: Var,
    right: Var,
    prompt: &EditPrompt,
    noise: &Tensor,
    cfg: &LossConfig,
) -> Result<Var> {
    let (ls, rs) = (g.shape(left), g.shape(right));
    if ls != rs {
        return Err(Error::Dimension {
            op: "gdfl",
            left: ls,
            right: rs,
        });
    }
    if noise.shape() != ls.as_slice() {
        return Err(Error::Dimension {
            op: "gdfl noise",
            left: noise.shape().to_vec(),
            right: ls,
        });
    }
    let tap = cfg.tap(editor)?;
    let s = cfg.timestep as f64 / cfg.horizon as f64;
    let cat = g.concat(&[left, right], 1)?;
    let tiled = crate::imaging::hconcat(noise, noise)?;
    let noisy = g.scale(cat, 1.0 - s);
    let eps = g.constant(tiled.scale(s));
    let noisy = g.add(noisy, eps)?;
    let panel = ls[1] / editor.config.patch;
    let out = editor.forward(
        g,
        bound,
        ForwardArgs {
            z: noisy,
            t: s,
            prompt: &prompt.ids,
            source: None,
            panel_cols: Some(panel),
            tap: Some(tap),
        },
    )?;
    // Unit feature per location, the usual form of correspondence features;
    // it also puts this term on the scale of the unit local descriptors.
    let f = g.l2_normalize(out.tap.expect("tap requested"), FEATURE_EPS)?;
    let w = g.shape(f)[1];
    if w % 2 != 0 {
        return Err(Error::Evaluation(format!("feature width {w} is odd")));
    }
    let f0 = g.slice(f, 1, 0, w / 2)?;
    let f1 = g.slice(f, 1, w / 2, w)?;
    let d = g.sub(f0, f1)?;
    Ok(g.mean_square(d))
}

/// [`gdfl_on`] for plain images, features from the frozen backbone.
pub fn gdfl(
    left: &Tensor,
    right: &Tensor,
    editor: &FlowEditor,
    prompt: &EditPrompt,
    noise: &Tensor,
    cfg: &LossConfig,
) -> Result<f64> {
    let g = Graph::new();
    let b = editor.bind_frozen_backbone(&g);
    let (l, r) = (g.constant(left.clone()), g.constant(right.clone()));
    let v = gdfl_on(&g, editor, &b, l, r, prompt, noise, cfg)?;
    let out = g.value(v).item();
    Ok(out)
}

/// Local editing-feature loss on a graph: mean-square distance between the
/// dense features of the localized LEFL cell in each view.
pub fn lefl_on(
    g: &Graph,
    left: Var,
    right: Var,
    loc: &Localization,
    embedder: &dyn Embedder,
    cfg: &LossConfig,
) -> Result<Var> {
    let ((li, lj), (ri, rj)) = loc.lefl_cells(cfg.lefl_patch)?;
    let fl = embedder.dense_features_on(g, left, cfg.lefl_patch)?;
    let fr = embedder.dense_features_on(g, right, cfg.lefl_patch)?;
    let s = g.shape(fl);
    if li >= s[0] || lj >= s[1] || ri >= s[0] || rj >= s[1] {
        return Err(Error::Argument(format!(
            "localized cells ({li}, {lj}) / ({ri}, {rj}) outside a {}x{} grid",
            s[0], s[1]
        )));
    }
    let cell = |f: Var, i: usize, j: usize| -> Result<Var> {
        let row = g.slice(f, 0, i, i + 1)?;
        g.slice(row, 1, j, j + 1)
    };
    let a = cell(fl, li, lj)?;
    let b = cell(fr, ri, rj)?;
    let d = g.sub(a, b)?;
    Ok(g.mean_square(d))
}

pub fn lefl(left: &Tensor, right: &Tensor, loc: &Localization, embedder: &dyn Embedder, cfg: &LossConfig) -> Result<f64> {
    let g = Graph::new();
    let (l, r) = (g.constant(left.clone()), g.constant(right.clone()));
    let v = lefl_on(&g, l, r, loc, embedder, cfg)?;
    let out = g.value(v).item();
    Ok(out)
}

#[derive(Clone, Copy, Debug)]
pub struct EditLoss {
    pub total: Var,
    pub gd: Var,
    pub le: Var,
}

/// `λ_GD·L_GD + λ_LE·L_LE`, plus the anchor term when enabled. A term whose
/// weight is zero is not evaluated and reports 0.
#[allow(clippy::too_many_arguments)]
pub fn edit_loss_on(
    g: &Graph,
    editor: &FlowEditor,
    left: Var,
    right: Var,
    sources: Option<(Var, Var)>,
    prompt: &EditPrompt,
    loc: &Localization,
    embedder: &dyn Embedder,
    gd_noise: &Tensor,
    cfg: &LossConfig,
) -> Result<EditLoss> {
    cfg.validate()?;
    let zero = || g.constant(Tensor::scalar(0.0));
    let gd = if cfg.lambda_gd > 0.0 {
        let frozen = editor.bind_frozen_backbone(g);
        gdfl_on(g, editor, &frozen, left, right, prompt, gd_noise, cfg)?
    } else {
        zero()
    };
    let le = if cfg.lambda_le > 0.0 {
        lefl_on(g, left, right, loc, embedder, cfg)?
    } else {
        zero()
    };
    let a = g.scale(gd, cfg.lambda_gd);
    let b = g.scale(le, cfg.lambda_le);
    let mut total = g.add(a, b)?;
    if cfg.anchor_weight > 0.0 {
        if let Some((sl, sr)) = sources {
            let cells = loc.lefl_cells(cfg.lefl_patch)?;
            let al = anchor_term(g, left, sl, cells.0, cfg.lefl_patch)?;
            let ar = anchor_term(g, right, sr, cells.1, cfg.lefl_patch)?;
            let an = g.add(al, ar)?;
            let an = g.scale(an, cfg.anchor_weight);
            total = g.add(total, an)?;
        }
    }
    Ok(EditLoss { total, gd, le })
}

/// Mean-square change outside the localized cell.
fn anchor_term(g: &Graph, edited: Var, source: Var, cell: (usize, usize), p: usize) -> Result<Var> {
    let s = g.shape(edited);
    let mut mask = Tensor::ones(&s);
    for y in cell.0 * p..(cell.0 + 1) * p {
        for x in cell.1 * p..(cell.1 + 1) * p {
            for c in 0..3 {
                mask.set(&[y, x, c], 0.0);
            }
        }
    }
    let m = g.constant(mask);
    let d = g.sub(edited, source)?;
    let d = g.mul(d, m)?;
    Ok(g.mean_square(d))
}

/// Plain-valued [`edit_loss_on`]: `(total, gd, le)`.
pub fn edit_loss(
    left: &Tensor,
    right: &Tensor,
    loc: &Localization,
    editor: &FlowEditor,
    embedder: &dyn Embedder,
    prompt: &EditPrompt,
    gd_noise: &Tensor,
    cfg: &LossConfig,
) -> Result<(f64, f64, f64)> {
    let g = Graph::new();
    let (l, r) = (g.constant(left.clone()), g.constant(right.clone()));
    let out = edit_loss_on(&g, editor, l, r, None, prompt, loc, embedder, gd_noise, cfg)?;
    let vals = (g.value(out.total).item(), g.value(out.gd).item(), g.value(out.le).item());
    Ok(vals)
}

/// Two pre-edit views and the instruction applied to both.
#[derive(Clone, Debug)]
pub struct ViewPair {
    pub left: Tensor,
    pub right: Tensor,
    pub prompt: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossRecord {
    pub step: usize,
    pub pair: usize,
    pub total: f64,
    pub gd: f64,
    pub le: f64,
    pub wall_ms: f64,
}

/// Fine-tunes the editor's adapters with the consistency objective. The
/// backbone is bound as constants throughout, so only adapter tensors move.
/// Random draws are identical for every loss weighting, so runs that differ
/// only in weights see the same pairs and noise.
pub fn finetune_editor(
    pairs: &[ViewPair],
    editor: &mut FlowEditor,
    embedder: &dyn Embedder,
    cfg: &TrainConfig,
    loss_cfg: &LossConfig,
    mut log: Option<&mut dyn Write>,
) -> Result<Vec<LossRecord>> {
    loss_cfg.validate()?;
    if pairs.is_empty() {
        return Err(Error::Argument("no training pairs".into()));
    }
    if cfg.batch_size == 0 {
        return Err(Error::Config("batch size must be at least 1".into()));
    }
    if editor.adapters.is_empty() {
        return Err(Error::Config("no adapters attached".into()));
    }
    let prompts = pairs
        .iter()
        .map(|p| EditPrompt::parse(&p.prompt))
        .collect::<Result<Vec<_>>>()?;
    let locs = pairs
        .iter()
        .map(|p| {
            localize(
                &p.left,
                &p.right,
                &p.prompt,
                embedder,
                loss_cfg.localization_patch,
                loss_cfg.confidence_threshold,
            )
        })
        .collect::<Result<Vec<_>>>()?;

    let mut r = rng(cfg.seed);
    let mut params = editor.adapters.tensors();
    let mut state = OptimizerState::new(&params);
    let trains = loss_cfg.lambda_gd > 0.0 || loss_cfg.lambda_le > 0.0 || loss_cfg.anchor_weight > 0.0;
    let mut records = Vec::with_capacity(cfg.steps);
    for step in 0..cfg.steps {
        let start = Instant::now();
        let mut grads: Vec<Tensor> = params.iter().map(|p| Tensor::zeros(p.shape())).collect();
        let (mut total, mut gd, mut le) = (0.0, 0.0, 0.0);
        let mut first_pair = 0;
        for item in 0..cfg.batch_size {
            let idx = r.random_range(0..pairs.len());
            if item == 0 {
                first_pair = idx;
            }
            let pair = &pairs[idx];
            let shape = pair.left.shape().to_vec();
            let n_left = gaussian_noise(&shape, &mut r);
            let n_right = gaussian_noise(&shape, &mut r);
            let n_gd = gaussian_noise(&shape, &mut r);

            let g = Graph::new();
            let b = editor.bind(&g, true);
            let sl = g.constant(pair.left.clone());
            let sr = g.constant(pair.right.clone());
            let el = edit_on_graph(&g, editor, &b, sl, &n_left, cfg.strength, &prompts[idx])?;
            let er = edit_on_graph(&g, editor, &b, sr, &n_right, cfg.strength, &prompts[idx])?;
            let loss = edit_loss_on(
                &g,
                editor,
                el,
                er,
                Some((sl, sr)),
                &prompts[idx],
                &locs[idx],
                embedder,
                &n_gd,
                loss_cfg,
            )?;
            let value = g.value(loss.total).item();
            if !value.is_finite() {
                return Err(Error::Training {
                    step,
                    reason: "non-finite consistency loss".into(),
                });
            }
            total += value / cfg.batch_size as f64;
            gd += g.value(loss.gd).item() / cfg.batch_size as f64;
            le += g.value(loss.le).item() / cfg.batch_size as f64;
            if trains {
                let gr = g.backward(loss.total)?;
                for (acc, v) in grads.iter_mut().zip(b.adapters.vars()) {
                    if let Some(t) = gr.get(v) {
                        acc.add_assign(&t.scale(1.0 / cfg.batch_size as f64));
                    }
                }
            }
        }
        let (next, st) = adamw_step(&params, &grads, &state, &cfg.optimizer).map_err(|e| match e {
            Error::Training { reason, .. } => Error::Training { step, reason },
            other => other,
        })?;
        params = next;
        state = st;
        editor.adapters.set_tensors(params.clone())?;
        let rec = LossRecord {
            step,
            pair: first_pair,
            total,
            gd,
            le,
            wall_ms: start.elapsed().as_secs_f64() * 1e3,
        };
        if let Some(w) = log.as_deref_mut() {
            let line = serde_json::to_string(&rec)?;
            writeln!(w, "{line}").map_err(|e| Error::io("<loss log>", e))?;
        }
        records.push(rec);
    }
    Ok(records)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::flow_editor::tests::tiny_editor;
    use crate::lora::PlacementRule;
    use crate::numerics::{grad_check, Tensor};
    use crate::perception::toy_color_embedder;

    const PROMPT: &str = "turn the cube red";

    fn cfg() -> LossConfig {
        LossConfig {
            lefl_patch: 8,
            localization_patch: 8,
            ..LossConfig::default()
        }
    }

    fn loc() -> Localization {
        Localization {
            patch: 8,
            rows: 2,
            cols: 2,
            left: (0, 1),
            right: (1, 0),
            left_scores: vec![0.0, 1.0, 0.0, 0.0],
            right_scores: vec![0.0, 0.0, 1.0, 0.0],
            confidence: 1.0,
            low_confidence: false,
        }
    }

    fn image(seed: u64) -> Tensor {
        Tensor::uniform(&[16, 16, 3], 0.0, 1.0, &mut rng(seed))
    }

    /// Writes `probe` over the first entries of `base`.
    fn embed_probe(base: &Tensor, probe: &Tensor) -> Tensor {
        let mut out = base.clone();
        out.data_mut()[..probe.numel()].copy_from_slice(probe.data());
        out
    }

    #[test]
    fn identical_views_give_exact_zeros() {
        let e = tiny_editor(1);
        let emb = toy_color_embedder();
        let p = EditPrompt::parse(PROMPT).unwrap();
        let x = image(2);
        let noise = gaussian_noise(&[16, 16, 3], &mut rng(3));
        assert_eq!(gdfl(&x, &x, &e, &p, &noise, &cfg()).unwrap(), 0.0);
        // Same content in the two localized cells, different elsewhere.
        let mut y = image(4);
        for r in 0..8 {
            for c in 0..8 {
                for k in 0..3 {
                    y.set(&[8 + r, c, k], x.at(&[r, 8 + c, k]));
                }
            }
        }
        assert_eq!(lefl(&x, &y, &loc(), &emb, &cfg()).unwrap(), 0.0);
        let joint = LossConfig {
            localization_patch: 8,
            ..cfg()
        };
        let same = Localization {
            right: (0, 1),
            ..loc()
        };
        assert_eq!(edit_loss(&x, &x, &same, &e, &emb, &p, &noise, &joint).unwrap(), (0.0, 0.0, 0.0));
    }

    #[test]
    fn losses_are_symmetric_in_the_views() {
        let e = tiny_editor(5);
        let emb = toy_color_embedder();
        let p = EditPrompt::parse(PROMPT).unwrap();
        let (a, b) = (image(6), image(7));
        let noise = gaussian_noise(&[16, 16, 3], &mut rng(8));
        let ab = gdfl(&a, &b, &e, &p, &noise, &cfg()).unwrap();
        let ba = gdfl(&b, &a, &e, &p, &noise, &cfg()).unwrap();
        assert!(ab > 0.0);
        assert!((ab - ba).abs() <= 1e-9 * ab, "{ab} vs {ba}");
        let l = loc();
        let ab = lefl(&a, &b, &l, &emb, &cfg()).unwrap();
        let ba = lefl(&b, &a, &l.swapped(), &emb, &cfg()).unwrap();
        assert!(ab > 0.0);
        assert_eq!(ab, ba);
    }

    #[test]
    fn edit_loss_is_the_weighted_sum() {
        let e = tiny_editor(9);
        let emb = toy_color_embedder();
        let p = EditPrompt::parse(PROMPT).unwrap();
        let (a, b) = (image(10), image(11));
        let noise = gaussian_noise(&[16, 16, 3], &mut rng(12));
        let (total, gd, le) = edit_loss(&a, &b, &loc(), &e, &emb, &p, &noise, &cfg()).unwrap();
        assert_eq!(gd, gdfl(&a, &b, &e, &p, &noise, &cfg()).unwrap());
        assert_eq!(le, lefl(&a, &b, &loc(), &emb, &cfg()).unwrap());
        assert!((total - (0.4 * gd + 0.6 * le)).abs() < 1e-15);
        // The weights alone: unit terms give 0.4 + 1.2.
        let g = Graph::new();
        let one = g.constant(Tensor::scalar(1.0));
        let two = g.constant(Tensor::scalar(2.0));
        let t = g.add(g.scale(one, 0.4), g.scale(two, 0.6)).unwrap();
        assert!((g.value(t).item() - 1.6).abs() < 1e-15);
        let off = LossConfig {
            lambda_gd: 0.0,
            ..cfg()
        };
        let (t2, gd2, _) = edit_loss(&a, &b, &loc(), &e, &emb, &p, &noise, &off).unwrap();
        assert_eq!(gd2, 0.0);
        assert!((t2 - 0.6 * le).abs() < 1e-15);
    }

    #[test]
    fn gdfl_gradient_matches_finite_differences() {
        let e = tiny_editor(13);
        let p = EditPrompt::parse(PROMPT).unwrap();
        let (a, b) = (image(14), image(15));
        let noise = gaussian_noise(&[16, 16, 3], &mut rng(16));
        let probe = Tensor::from_vec(&[32], a.data()[..32].to_vec());
        let err = grad_check(
            |x| {
                let g = Graph::new();
                let bound = e.bind_frozen_backbone(&g);
                let l = g.param(embed_probe(&a, x));
                let r = g.constant(b.clone());
                let v = gdfl_on(&g, &e, &bound, l, r, &p, &noise, &cfg())?;
                let grads = g.backward(v)?;
                let full = grads.get(l).unwrap();
                Ok((g.value(v).item(), Tensor::from_vec(&[32], full.data()[..32].to_vec())))
            },
            &probe,
            1e-6,
        )
        .unwrap();
        assert!(err < 1e-3, "{err}");
    }

    #[test]
    fn lefl_gradient_matches_finite_differences() {
        let emb = toy_color_embedder();
        let (a, b) = (image(17), image(18));
        // First row of the localized left cell (0, 1).
        let offset = 8 * 3;
        let probe = Tensor::from_vec(&[24], a.data()[offset..offset + 24].to_vec());
        let err = grad_check(
            |x| {
                let mut img = a.clone();
                img.data_mut()[offset..offset + 24].copy_from_slice(x.data());
                let g = Graph::new();
                let l = g.param(img);
                let r = g.constant(b.clone());
                let v = lefl_on(&g, l, r, &loc(), &emb, &cfg())?;
                let grads = g.backward(v)?;
                let full = grads.get(l).unwrap();
                Ok((g.value(v).item(), Tensor::from_vec(&[24], full.data()[offset..offset + 24].to_vec())))
            },
            &probe,
            1e-6,
        )
        .unwrap();
        assert!(err < 1e-3, "{err}");
    }

    fn pairs() -> Vec<ViewPair> {
        (0..2)
            .map(|i| ViewPair {
                left: image(20 + i),
                right: image(30 + i),
                prompt: PROMPT.into(),
            })
            .collect()
    }

    #[test]
    fn training_moves_only_adapters() {
        let mut e = tiny_editor(19);
        e.attach_adapters(PlacementRule::LastK, 2, 1.0, &mut rng(20)).unwrap();
        let emb = toy_color_embedder();
        let before = e.backbone_checksum();
        let start = e.adapters.tensors();
        let tc = TrainConfig {
            steps: 0,
            ..TrainConfig::default()
        };
        assert!(finetune_editor(&pairs(), &mut e, &emb, &tc, &cfg(), None).unwrap().is_empty());
        assert_eq!(e.adapters.tensors(), start);
        let tc = TrainConfig {
            steps: 3,
            optimizer: AdamW {
                lr: 1e-2,
                ..AdamW::default()
            },
            ..TrainConfig::default()
        };
        let mut log = Vec::new();
        let recs = finetune_editor(&pairs(), &mut e, &emb, &tc, &cfg(), Some(&mut log)).unwrap();
        assert_eq!(recs.len(), 3);
        assert_eq!(String::from_utf8(log).unwrap().lines().count(), 3);
        assert_eq!(e.backbone_checksum(), before);
        assert_ne!(e.adapters.tensors(), start);
    }

    #[test]
    fn zero_weights_leave_adapters_untouched() {
        let mut e = tiny_editor(21);
        e.attach_adapters(PlacementRule::LastK, 2, 1.0, &mut rng(22)).unwrap();
        let start = e.adapters.tensors();
        let off = LossConfig {
            lambda_gd: 0.0,
            lambda_le: 0.0,
            ..cfg()
        };
        let tc = TrainConfig {
            steps: 2,
            ..TrainConfig::default()
        };
        finetune_editor(&pairs(), &mut e, &toy_color_embedder(), &tc, &off, None).unwrap();
        assert_eq!(e.adapters.tensors(), start);
    }

    #[test]
    fn training_without_adapters_is_a_config_error() {
        let mut e = tiny_editor(23);
        let r = finetune_editor(&pairs(), &mut e, &toy_color_embedder(), &TrainConfig::default(), &cfg(), None);
        assert!(matches!(r, Err(Error::Config(_))));
    }
}
