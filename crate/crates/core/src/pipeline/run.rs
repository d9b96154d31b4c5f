//! Feedforward inference, the evaluation protocol, and the consistency
//! ablation.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::consistency::{finetune_editor, LossConfig, LossRecord, ViewPair};
use crate::error::{Error, Result};
use crate::flow_editor::{edit_image, gaussian_noise, pretrain, EditPrompt, FlowEditor};
use crate::gaussians::GaussianScene;
use crate::imaging;
use crate::instrument::{self, Counts};
use crate::lifting::{train_lifter, LiftSample, Lifter, DEFAULT_BACKGROUND};
use crate::metrics::{clip_dir, clip_sim, lefl_metric, time_pipeline, MetricReport, Phase, WallClock};
use crate::numerics::{rng, Tensor};
use crate::perception::{Embedder, ToyColorEmbedder};
use crate::rasterizer::{render, CameraIntrinsics, CameraPose};
use crate::vocab::Instruction;

use super::config::PipelineConfig;
use super::synth::SceneRecord;

/// Name recorded in every report for the resampling used before scoring.
pub const RESIZE_FILTER: &str = "bilinear";

/// Two views, their intrinsics, and the instruction.
#[derive(Clone, Debug)]
pub struct SceneInput {
    pub left: Tensor,
    pub right: Tensor,
    pub k0: CameraIntrinsics,
    pub k1: CameraIntrinsics,
    pub prompt: String,
    /// Novel cameras relative to view 0; empty selects the default orbit.
    pub novel: Vec<CameraPose>,
}

impl SceneInput {
    pub fn validate(&self) -> Result<()> {
        imaging::check_rgb(&self.left)?;
        imaging::check_rgb(&self.right)?;
        if self.left.shape() != self.right.shape() {
            return Err(Error::Argument(format!(
                "views differ in shape: {:?} vs {:?}",
                self.left.shape(),
                self.right.shape()
            )));
        }
        self.k0.validate()?;
        self.k1.validate()?;
        let (h, w) = imaging::dims(&self.left);
        if (self.k0.width, self.k0.height) != (w, h) {
            return Err(Error::Argument(format!(
                "intrinsics are {}×{} but the views are {w}×{h}",
                self.k0.width, self.k0.height
            )));
        }
        for p in &self.novel {
            p.validate()?;
        }
        Ok(())
    }

    /// Input views and novel poses of a benchmark scene.
    pub fn from_record(rec: &SceneRecord) -> Self {
        let rig = &rec.scene.rig;
        Self {
            left: rec.views[0].clone(),
            right: rec.views[1].clone(),
            k0: rig.intrinsics,
            k1: rig.intrinsics,
            prompt: rec.prompt.clone(),
            novel: rig.novel.iter().map(|p| rig.relative(p)).collect(),
        }
    }
}

/// Everything inference produces for one scene.
#[derive(Clone, Debug)]
pub struct EditResult {
    pub edited: [Tensor; 2],
    pub scene: GaussianScene,
    pub renders: Vec<Tensor>,
    pub report: MetricReport,
    pub clock: WallClock,
    /// Forward passes, renders and optimizer steps spent by this call.
    pub counts: Counts,
}

/// Weights used at inference.
pub struct Models<'a> {
    pub editor: &'a FlowEditor,
    pub lifter: &'a Lifter,
    pub embedder: &'a (dyn Embedder + Sync),
}

/// `views` cameras orbiting a point `depth` ahead of view 0, spread over
/// `±orbit_deg` in azimuth with alternating small elevations.
pub fn default_novel_poses(views: usize, orbit_deg: f64, depth: f64) -> Result<Vec<CameraPose>> {
    let pivot = [0.0, 0.0, depth];
    (0..views)
        .map(|k| {
            let f = if views == 1 { 0.5 } else { k as f64 / (views - 1) as f64 };
            let az = (-orbit_deg + 2.0 * orbit_deg * f).to_radians();
            let el = (if k % 2 == 0 { 1.0 } else { -1.0 } * orbit_deg / 3.0).to_radians();
            // Offset of the eye from the pivot; view 0 sits at (0, 0, -depth).
            let eye = [
                pivot[0] - depth * el.cos() * az.sin(),
                pivot[1] - depth * el.sin(),
                pivot[2] - depth * el.cos() * az.cos(),
            ];
            CameraPose::look_at(eye, pivot, [0.0, -1.0, 0.0])
        })
        .collect()
}

fn prompts(text: &str) -> Result<(EditPrompt, String, String)> {
    let prompt = EditPrompt::parse(text)?;
    let ins = Instruction::parse(text)?;
    let source = ins
        .source_prompt()
        .ok_or_else(|| Error::Argument(format!("prompt `{text}` names no known object")))?;
    let target = ins
        .target_prompt()
        .ok_or_else(|| Error::Argument(format!("prompt `{text}` names no color")))?;
    Ok((prompt, source, target))
}

/// Edits both views, lifts them in one pass, renders the novel views and
/// scores the result. Nothing here optimizes.
pub fn edit_scene(input: &SceneInput, models: &Models<'_>, cfg: &PipelineConfig) -> Result<EditResult> {
    input.validate().map_err(Error::stage("input"))?;
    cfg.protocol.validate().map_err(Error::stage("input"))?;
    let (prompt, source, target) = prompts(&input.prompt).map_err(Error::stage("prompt"))?;
    let novel = if input.novel.is_empty() {
        default_novel_poses(cfg.protocol.views, cfg.protocol.orbit_deg, models.lifter.config.base_depth)
            .map_err(Error::stage("cameras"))?
    } else {
        input.novel.clone()
    };
    let before = instrument::snapshot();

    let (out, clock) = time_pipeline(|timer| -> Result<_> {
        let edited = timer
            .time(Phase::Edit, || -> Result<[Tensor; 2]> {
                let mut r = rng(cfg.protocol.noise_seed);
                let shape = input.left.shape().to_vec();
                let n0 = gaussian_noise(&shape, &mut r);
                let n1 = gaussian_noise(&shape, &mut r);
                let s = cfg.protocol.strength;
                Ok([
                    edit_image(models.editor, &input.left, &n0, s, &prompt)?,
                    edit_image(models.editor, &input.right, &n1, s, &prompt)?,
                ])
            })
            .map_err(Error::stage("edit"))?;
        let lifted = timer
            .time(Phase::Lift, || {
                models
                    .lifter
                    .predict_gaussians([&edited[0], &edited[1]], [&input.k0, &input.k1])
            })
            .map_err(Error::stage("lift"))?;
        let res = cfg.protocol.resolution;
        let intr = input.k0.resized(res, res);
        let renders = timer
            .time(Phase::Render, || -> Result<Vec<Tensor>> {
                novel
                    .iter()
                    .map(|p| Ok(render(&lifted.scene, &intr, p, DEFAULT_BACKGROUND, &cfg.raster)?.image))
                    .collect()
            })
            .map_err(Error::stage("render"))?;
        Ok((edited, lifted.scene, renders))
    });
    let (edited, scene, renders) = out?;
    let counts = instrument::snapshot().since(before);

    let report = (|| -> Result<MetricReport> {
        let res = cfg.protocol.resolution;
        let up = |t: &Tensor| imaging::resize_bilinear(t, res, res);
        let sim = clip_sim(&renders, &target, models.embedder)?;
        let dir = clip_dir(
            &[up(&edited[0]), up(&edited[1])],
            &[up(&input.left), up(&input.right)],
            &source,
            &target,
            models.embedder,
        )?;
        let lefl = lefl_metric(
            (&edited[0], &edited[1]),
            (&input.left, &input.right),
            &input.prompt,
            models.embedder,
            &cfg.loss,
        )?;
        Ok(MetricReport {
            clip_sim: sim,
            clip_dir: dir.value,
            clip_dir_undefined: dir.undefined,
            lefl_distance: lefl,
            views: renders.len(),
            resize_filter: RESIZE_FILTER.to_string(),
        })
    })()
    .map_err(Error::stage("metrics"))?;

    Ok(EditResult {
        edited,
        scene,
        renders,
        report,
        clock,
        counts,
    })
}

/// Runs [`edit_scene`] over a dataset, one worker thread per available core,
/// and returns the reports in dataset order.
pub fn evaluate(data: &[SceneRecord], models: &Models<'_>, cfg: &PipelineConfig) -> Result<Vec<MetricReport>> {
    let workers = std::thread::available_parallelism().map_or(1, |n| n.get()).min(data.len()).max(1);
    let chunk = data.len().div_ceil(workers);
    let results: Vec<Result<Vec<MetricReport>>> = std::thread::scope(|s| {
        let handles: Vec<_> = data
            .chunks(chunk.max(1))
            .map(|part| {
                s.spawn(move || {
                    part.iter()
                        .map(|rec| edit_scene(&SceneInput::from_record(rec), models, cfg).map(|r| r.report))
                        .collect::<Result<Vec<_>>>()
                })
            })
            .collect();
        handles
            .into_iter()
            .map(|h| h.join().unwrap_or_else(|_| Err(Error::Evaluation("evaluation worker panicked".into()))))
            .collect()
    });
    let mut out = Vec::with_capacity(data.len());
    for r in results {
        out.extend(r?);
    }
    Ok(out)
}

fn cache_key(kind: &str, parts: &[&serde_json::Value]) -> String {
    let mut h = Sha256::new();
    h.update(kind.as_bytes());
    for p in parts {
        h.update(p.to_string().as_bytes());
    }
    let digest = h.finalize();
    format!("{kind}-{}", digest.iter().take(8).map(|b| format!("{b:02x}")).collect::<String>())
}

/// The pretrained editing backbone for `cfg`, loaded from `cache` when a
/// matching file exists and written there otherwise. Cached weights are
/// stored at 32-bit precision, so a cache hit differs from a fresh run by
/// rounding only.
pub fn pretrained_editor(cfg: &PipelineConfig, cache: Option<&Path>) -> Result<FlowEditor> {
    let key = cache_key(
        "editor",
        &[&serde_json::to_value(&cfg.editor)?, &serde_json::to_value(&cfg.pretrain)?],
    );
    let path = cache.map(|d| d.join(format!("{key}.xvw")));
    if let Some(p) = path.as_ref().filter(|p| p.exists()) {
        return FlowEditor::load(p);
    }
    let mut editor = FlowEditor::new(cfg.editor.clone(), &mut rng(cfg.pretrain.seed))?;
    pretrain(&mut editor, &cfg.pretrain)?;
    // Round-trip through the container so both paths yield identical weights.
    let editor = FlowEditor::from_container(&crate::container::Container::from_bytes(
        &editor.to_container().to_bytes(),
    )?)?;
    if let Some(p) = path {
        save_atomic(&p, |tmp| editor.save(tmp))?;
    }
    Ok(editor)
}

/// A lifter trained on `data`, cached like [`pretrained_editor`].
pub fn trained_lifter(data: &[SceneRecord], cfg: &PipelineConfig, cache: Option<&Path>) -> Result<Lifter> {
    let samples: Vec<LiftSample> = data.iter().map(SceneRecord::lift_sample).collect();
    let mut h = Sha256::new();
    for s in &samples {
        for v in &s.views {
            for x in v.data() {
                h.update(x.to_le_bytes());
            }
        }
    }
    let data_hash = serde_json::Value::String(format!("{:x}", h.finalize()));
    let key = cache_key(
        "lifter",
        &[
            &serde_json::to_value(&cfg.lifter)?,
            &serde_json::to_value(&cfg.lift_train)?,
            &data_hash,
            &serde_json::Value::from(cfg.seed),
        ],
    );
    let path = cache.map(|d| d.join(format!("{key}.xvw")));
    if let Some(p) = path.as_ref().filter(|p| p.exists()) {
        return Lifter::load(p);
    }
    let mut lifter = Lifter::new(cfg.lifter.clone(), &mut rng(cfg.seed))?;
    train_lifter(&mut lifter, &samples, &cfg.lift_train, None)?;
    let lifter = Lifter::from_container(&crate::container::Container::from_bytes(
        &lifter.to_container().to_bytes(),
    )?)?;
    if let Some(p) = path {
        save_atomic(&p, |tmp| lifter.save(tmp))?;
    }
    Ok(lifter)
}

/// Writes through a temporary sibling so concurrent readers never see a
/// partial file.
fn save_atomic(path: &Path, write: impl FnOnce(&Path) -> Result<()>) -> Result<()> {
    if let Some(dir) = path.parent() {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    let tmp = path.with_extension(format!("tmp{}", std::process::id()));
    write(&tmp)?;
    std::fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}

/// One ablation configuration.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub name: String,
    pub lambda_gd: f64,
    pub lambda_le: f64,
    pub report: MetricReport,
    pub per_scene: Vec<MetricReport>,
    /// Mean training loss over the last tenth of the run.
    pub final_train_loss: f64,
}

/// Outcome of the ordering assertions.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct OrderingCheck {
    /// Smallest relative drop of the local distance between adjacent rows.
    pub min_relative_gap: f64,
    pub required_gap: f64,
    pub lefl_strictly_ordered: bool,
    pub clip_sim_non_decreasing: bool,
    /// Every run drew the same pair sequence.
    pub shared_data_order: bool,
}

impl OrderingCheck {
    pub fn holds(&self) -> bool {
        self.lefl_strictly_ordered && self.clip_sim_non_decreasing && self.shared_data_order
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationTable {
    pub rows: Vec<AblationRow>,
    pub check: OrderingCheck,
}

/// Minimum relative gap between adjacent ablation rows.
pub const ABLATION_GAP: f64 = 0.10;

/// Loss weightings compared by the ablation: none, global only, both.
pub fn ablation_variants(base: &LossConfig) -> Vec<(&'static str, LossConfig)> {
    vec![
        (
            "none",
            LossConfig {
                lambda_gd: 0.0,
                lambda_le: 0.0,
                ..base.clone()
            },
        ),
        (
            "gdfl",
            LossConfig {
                lambda_le: 0.0,
                ..base.clone()
            },
        ),
        ("gdfl+lefl", base.clone()),
    ]
}

/// Fine-tunes fresh adapters on `backbone` once per loss weighting, with
/// identical seeds and data order, and evaluates each result on `data`.
/// Ordering violations are reported in the table, not raised.
pub fn run_ablation(
    data: &[SceneRecord],
    backbone: &FlowEditor,
    lifter: &Lifter,
    embedder: &ToyColorEmbedder,
    cfg: &PipelineConfig,
) -> Result<AblationTable> {
    if data.is_empty() {
        return Err(Error::Argument("ablation needs at least one scene".into()));
    }
    let pairs: Vec<ViewPair> = data
        .iter()
        .map(|r| ViewPair {
            left: r.views[0].clone(),
            right: r.views[1].clone(),
            prompt: r.prompt.clone(),
        })
        .collect();
    let mut rows = Vec::new();
    let mut orders: Vec<Vec<usize>> = Vec::new();
    for (name, loss) in ablation_variants(&cfg.loss) {
        let mut editor = backbone.clone();
        editor
            .attach_adapters(cfg.lora.rule, cfg.lora.rank, cfg.lora.scale, &mut rng(cfg.seed))
            .map_err(Error::stage("adapters"))?;
        let log: Vec<LossRecord> =
            finetune_editor(&pairs, &mut editor, embedder, &cfg.train, &loss, None).map_err(Error::stage("finetune"))?;
        orders.push(log.iter().map(|r| r.pair).collect());
        let tail = &log[log.len() - (log.len() / 10).max(1).min(log.len())..];
        let final_train_loss = if tail.is_empty() {
            0.0
        } else {
            tail.iter().map(|r| r.total).sum::<f64>() / tail.len() as f64
        };
        let models = Models {
            editor: &editor,
            lifter,
            embedder,
        };
        let per_scene = evaluate(data, &models, cfg)?;
        let report = crate::metrics::aggregate(&per_scene)?;
        rows.push(AblationRow {
            name: name.to_string(),
            lambda_gd: loss.lambda_gd,
            lambda_le: loss.lambda_le,
            report,
            per_scene,
            final_train_loss,
        });
    }
    let check = ordering(&rows, orders.windows(2).all(|w| w[0] == w[1]));
    Ok(AblationTable { rows, check })
}

fn ordering(rows: &[AblationRow], shared_data_order: bool) -> OrderingCheck {
    let mut min_gap = f64::INFINITY;
    let mut strict = true;
    let mut clip = true;
    for w in rows.windows(2) {
        let (a, b) = (&w[0].report, &w[1].report);
        let gap = if a.lefl_distance > 0.0 {
            (a.lefl_distance - b.lefl_distance) / a.lefl_distance
        } else {
            f64::NEG_INFINITY
        };
        min_gap = min_gap.min(gap);
        strict &= gap >= ABLATION_GAP;
        clip &= b.clip_sim >= a.clip_sim;
    }
    OrderingCheck {
        min_relative_gap: min_gap,
        required_gap: ABLATION_GAP,
        lefl_strictly_ordered: strict,
        clip_sim_non_decreasing: clip,
        shared_data_order,
    }
}

impl AblationTable {
    pub fn markdown(&self) -> String {
        let mut s = String::from(
            "| run | λ_gd | λ_le | local distance | clip_sim | clip_dir | final train loss |\n|---|---|---|---|---|---|---|\n",
        );
        for r in &self.rows {
            s.push_str(&format!(
                "| {} | {} | {} | {:.5} | {:.4} | {:.4} | {:.5} |\n",
                r.name, r.lambda_gd, r.lambda_le, r.report.lefl_distance, r.report.clip_sim, r.report.clip_dir, r.final_train_loss
            ));
        }
        let c = &self.check;
        s.push_str(&format!(
            "\nlocal distance strictly ordered with ≥{:.0}% gaps: {} (smallest gap {:.1}%)\nclip_sim non-decreasing: {}\nshared data order: {}\n",
            c.required_gap * 100.0,
            c.lefl_strictly_ordered,
            c.min_relative_gap * 100.0,
            c.clip_sim_non_decreasing,
            c.shared_data_order
        ));
        s
    }
}

/// Default weight cache directory for the command line.
pub fn default_cache_dir(out: &Path) -> PathBuf {
    out.join("cache")
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::flow_editor::EditorConfig;
    use crate::lifting::LifterConfig;
    use crate::perception::toy_color_embedder;
    use crate::pipeline::synth::{synth_dataset, SynthConfig};

    fn tiny_config() -> PipelineConfig {
        PipelineConfig {
            editor: EditorConfig {
                width: 16,
                heads: 2,
                double_blocks: 1,
                single_blocks: 2,
                ..EditorConfig::default()
            },
            lifter: LifterConfig {
                width: 16,
                intrinsics_width: 4,
                encoder_depth: 1,
                decoder_depth: 1,
                heads: 2,
                ..LifterConfig::default()
            },
            protocol: crate::pipeline::config::ProtocolConfig {
                resolution: 48,
                ..Default::default()
            },
            ..PipelineConfig::default()
        }
    }

    #[test]
    fn default_orbit_is_valid_and_faces_the_pivot() {
        let poses = default_novel_poses(4, 12.0, 3.0).unwrap();
        assert_eq!(poses.len(), 4);
        for p in &poses {
            p.validate().unwrap();
            let c = p.apply([0.0, 0.0, 3.0]);
            assert!(c[0].abs() < 1e-9 && c[1].abs() < 1e-9 && c[2] > 0.0);
        }
        let id = default_novel_poses(1, 0.0, 3.0).unwrap();
        let c = id[0].apply([0.3, -0.2, 2.0]);
        for (a, b) in c.iter().zip([0.3, -0.2, 2.0]) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn edit_scene_counts_and_shapes() {
        let cfg = tiny_config();
        let data = synth_dataset(1, 5, &SynthConfig::default()).unwrap();
        let editor = FlowEditor::new(cfg.editor.clone(), &mut rng(0)).unwrap();
        let lifter = Lifter::new(cfg.lifter.clone(), &mut rng(1)).unwrap();
        let emb = toy_color_embedder();
        let models = Models {
            editor: &editor,
            lifter: &lifter,
            embedder: &emb,
        };
        let res = edit_scene(&SceneInput::from_record(&data[0]), &models, &cfg).unwrap();
        assert_eq!(res.counts.editor_forwards, 2);
        assert_eq!(res.counts.lifter_forwards, 1);
        assert_eq!(res.counts.renders, 4);
        assert_eq!(res.counts.optimizer_steps, 0);
        assert_eq!(res.renders.len(), 4);
        assert_eq!(res.renders[0].shape(), &[48, 48, 3]);
        res.scene.validate().unwrap();
        assert_eq!(res.report.views, 4);
    }

    #[test]
    fn stage_errors_name_the_stage() {
        let cfg = tiny_config();
        let data = synth_dataset(1, 5, &SynthConfig::default()).unwrap();
        let editor = FlowEditor::new(cfg.editor.clone(), &mut rng(0)).unwrap();
        let lifter = Lifter::new(cfg.lifter.clone(), &mut rng(1)).unwrap();
        let emb = toy_color_embedder();
        let models = Models {
            editor: &editor,
            lifter: &lifter,
            embedder: &emb,
        };
        let mut input = SceneInput::from_record(&data[0]);
        input.prompt = "turn the dragon red".into();
        let err = edit_scene(&input, &models, &cfg).unwrap_err();
        assert!(matches!(err, Error::Pipeline { stage: "prompt", .. }), "{err}");
        let mut input = SceneInput::from_record(&data[0]);
        input.right = imaging::solid(16, 16, [0.0; 3]);
        let err = edit_scene(&input, &models, &cfg).unwrap_err();
        assert!(matches!(err, Error::Pipeline { stage: "input", .. }), "{err}");
    }

    #[test]
    fn ordering_check_requires_gaps() {
        let row = |d: f64, s: f64| AblationRow {
            name: String::new(),
            lambda_gd: 0.0,
            lambda_le: 0.0,
            report: MetricReport {
                clip_sim: s,
                clip_dir: 0.0,
                clip_dir_undefined: false,
                lefl_distance: d,
                views: 4,
                resize_filter: RESIZE_FILTER.into(),
            },
            per_scene: vec![],
            final_train_loss: 0.0,
        };
        assert!(ordering(&[row(1.0, 0.1), row(0.8, 0.1), row(0.5, 0.2)], true).holds());
        assert!(!ordering(&[row(1.0, 0.1), row(0.95, 0.1), row(0.5, 0.2)], true).holds());
        assert!(!ordering(&[row(1.0, 0.2), row(0.8, 0.1), row(0.5, 0.2)], true).holds());
        assert!(!ordering(&[row(1.0, 0.1), row(0.8, 0.1), row(0.5, 0.2)], false).holds());
    }
}
