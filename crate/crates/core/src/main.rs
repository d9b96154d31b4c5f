//! Command-line front end: dataset generation, training, feedforward
//! editing, rendering, evaluation and the consistency ablation.

use std::fs::File;
use std::io::BufWriter;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use xview::consistency::{finetune_editor, ViewPair};
use xview::error::{Error, Result};
use xview::gaussians::read_ply;
use xview::imaging::{load_png, save_png};
use xview::lifting::{train_lifter, Lifter, DEFAULT_BACKGROUND};
use xview::metrics::aggregate;
use xview::numerics::rng;
use xview::perception::ToyColorEmbedder;
use xview::pipeline::io::{load_dataset, read_cameras, save_dataset, save_edit_result};
use xview::pipeline::{
    edit_scene, evaluate, pretrained_editor, run_ablation, synth_dataset, trained_lifter, Models, PipelineConfig,
    SceneInput,
};
use xview::flow_editor::FlowEditor;
use xview::rasterizer::{render, CameraIntrinsics};

#[derive(Parser)]
#[command(name = "xview", version, about = "Feedforward two-view 3D editing at desk scale")]
struct Cli {
    /// TOML configuration; omitted tables keep their defaults.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Overrides the top-level seed.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Output directory.
    #[arg(long, global = true, default_value = "out")]
    out: PathBuf,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic recolor benchmark.
    Synth {
        #[arg(long, default_value_t = 20)]
        scenes: usize,
    },
    /// Pretrain the backbone and fine-tune adapters on a dataset.
    TrainEditor {
        #[arg(long)]
        dataset: PathBuf,
    },
    /// Train the lifter on a dataset.
    TrainLifter {
        #[arg(long)]
        dataset: PathBuf,
    },
    /// Run the full feedforward pipeline on one view pair.
    Edit {
        #[arg(long)]
        left: PathBuf,
        #[arg(long)]
        right: PathBuf,
        #[arg(long)]
        prompt: String,
        /// Horizontal field of view of both inputs, in degrees.
        #[arg(long, default_value_t = 40.0)]
        fov: f64,
        #[command(flatten)]
        weights: Weights,
    },
    /// Render a PLY scene from every camera in a camera JSON file.
    Render {
        #[arg(long)]
        scene: PathBuf,
        #[arg(long)]
        camera: PathBuf,
    },
    /// Score the pipeline over every scene of a dataset.
    Eval {
        #[arg(long)]
        dataset: PathBuf,
        #[command(flatten)]
        weights: Weights,
    },
    /// Compare no regularization, the global term, and both terms.
    Ablate {
        #[arg(long)]
        dataset: PathBuf,
        /// Lifter weights; trained on the dataset when omitted.
        #[arg(long)]
        lifter: Option<PathBuf>,
    },
}

#[derive(clap::Args)]
struct Weights {
    /// Editor weights; the cached pretrained backbone when omitted.
    #[arg(long)]
    editor: Option<PathBuf>,
    /// Lifter weights; trained on a default synthetic set when omitted.
    #[arg(long)]
    lifter: Option<PathBuf>,
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(1) } else { ExitCode::SUCCESS };
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            let mut src = std::error::Error::source(&e);
            while let Some(s) = src {
                eprintln!("  caused by: {s}");
                src = s.source();
            }
            ExitCode::from(2)
        }
    }
}

fn write_json<T: serde::Serialize>(path: &Path, value: &T) -> Result<()> {
    std::fs::write(path, serde_json::to_string_pretty(value)?).map_err(|e| Error::Io {
        path: path.to_path_buf(),
        source: e,
    })
}

fn create_dir(dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::Io {
        path: dir.to_path_buf(),
        source: e,
    })
}

fn log_file(path: &Path) -> Result<BufWriter<File>> {
    File::create(path).map(BufWriter::new).map_err(|e| Error::Io {
        path: path.to_path_buf(),
        source: e,
    })
}

fn load_weights(w: &Weights, cfg: &PipelineConfig, cache: &Path) -> Result<(FlowEditor, Lifter)> {
    let editor = match &w.editor {
        Some(p) => FlowEditor::load(p)?,
        None => {
            eprintln!("no --editor given; using the pretrained backbone");
            pretrained_editor(cfg, Some(cache))?
        }
    };
    let lifter = match &w.lifter {
        Some(p) => Lifter::load(p)?,
        None => {
            eprintln!("no --lifter given; training one on a default synthetic set");
            let data = synth_dataset(20, cfg.seed, &cfg.synth)?;
            trained_lifter(&data, cfg, Some(cache))?
        }
    };
    Ok((editor, lifter))
}

fn run(cli: Cli) -> Result<()> {
    let mut cfg = match &cli.config {
        Some(p) => PipelineConfig::load(p)?,
        None => PipelineConfig::default(),
    };
    if let Some(s) = cli.seed {
        cfg.seed = s;
        cfg.train.seed = s;
    }
    let out = cli.out.as_path();
    create_dir(out)?;
    let cache = out.join("cache");
    let embedder = ToyColorEmbedder::new(cfg.embedder.clone());
    match cli.command {
        Command::Synth { scenes } => {
            let data = synth_dataset(scenes, cfg.seed, &cfg.synth)?;
            save_dataset(out, &data, &cfg.synth)?;
            println!("wrote {} scenes to {}", data.len(), out.display());
        }
        Command::TrainEditor { dataset } => {
            let (data, _) = load_dataset(&dataset)?;
            let mut editor = pretrained_editor(&cfg, Some(&cache))?;
            editor.attach_adapters(cfg.lora.rule, cfg.lora.rank, cfg.lora.scale, &mut rng(cfg.seed))?;
            let pairs: Vec<ViewPair> = data
                .iter()
                .map(|r| ViewPair {
                    left: r.views[0].clone(),
                    right: r.views[1].clone(),
                    prompt: r.prompt.clone(),
                })
                .collect();
            let mut log = log_file(&out.join("editor_log.jsonl"))?;
            let recs = finetune_editor(&pairs, &mut editor, &embedder, &cfg.train, &cfg.loss, Some(&mut log))?;
            editor.save(&out.join("editor.xvw"))?;
            if let (Some(a), Some(b)) = (recs.first(), recs.last()) {
                println!("loss {:.5} -> {:.5} over {} steps", a.total, b.total, recs.len());
            }
        }
        Command::TrainLifter { dataset } => {
            let (data, _) = load_dataset(&dataset)?;
            let samples: Vec<_> = data.iter().map(|r| r.lift_sample()).collect();
            let mut lifter = Lifter::new(cfg.lifter.clone(), &mut rng(cfg.seed))?;
            let mut log = log_file(&out.join("lifter_log.jsonl"))?;
            let recs = train_lifter(&mut lifter, &samples, &cfg.lift_train, Some(&mut log))?;
            lifter.save(&out.join("lifter.xvw"))?;
            if let (Some(a), Some(b)) = (recs.first(), recs.last()) {
                println!("loss {:.5} -> {:.5} over {} steps", a.loss, b.loss, recs.len());
            }
        }
        Command::Edit {
            left,
            right,
            prompt,
            fov,
            weights,
        } => {
            let (l, r) = (load_png(&left)?, load_png(&right)?);
            let (h, w) = (l.shape()[0], l.shape()[1]);
            let k = CameraIntrinsics::from_fov(w, h, fov);
            let (editor, lifter) = load_weights(&weights, &cfg, &cache)?;
            let input = SceneInput {
                left: l,
                right: r,
                k0: k,
                k1: k,
                prompt,
                novel: Vec::new(),
            };
            let models = Models {
                editor: &editor,
                lifter: &lifter,
                embedder: &embedder,
            };
            let res = edit_scene(&input, &models, &cfg)?;
            save_edit_result(out, &res)?;
            println!("{}", serde_json::to_string(&res.report)?);
        }
        Command::Render { scene, camera } => {
            let s = read_ply(&scene)?;
            for (i, cam) in read_cameras(&camera)?.iter().enumerate() {
                let img = render(&s, &cam.intrinsics()?, &cam.pose()?, DEFAULT_BACKGROUND, &cfg.raster)?.image;
                save_png(&img, &out.join(format!("render_{i}.png")))?;
            }
        }
        Command::Eval { dataset, weights } => {
            let (data, _) = load_dataset(&dataset)?;
            let (editor, lifter) = load_weights(&weights, &cfg, &cache)?;
            let models = Models {
                editor: &editor,
                lifter: &lifter,
                embedder: &embedder,
            };
            let per_scene = evaluate(&data, &models, &cfg)?;
            let mean = aggregate(&per_scene)?;
            write_json(
                &out.join("metrics.json"),
                &serde_json::json!({ "mean": mean, "scenes": per_scene }),
            )?;
            println!("{}", serde_json::to_string(&mean)?);
        }
        Command::Ablate { dataset, lifter } => {
            let (data, _) = load_dataset(&dataset)?;
            let backbone = pretrained_editor(&cfg, Some(&cache))?;
            let lifter = match lifter {
                Some(p) => Lifter::load(&p)?,
                None => trained_lifter(&data, &cfg, Some(&cache))?,
            };
            let table = run_ablation(&data, &backbone, &lifter, &embedder, &cfg)?;
            write_json(&out.join("ablation.json"), &table)?;
            let md = table.markdown();
            std::fs::write(out.join("ablation.md"), &md).map_err(|e| Error::Io {
                path: out.join("ablation.md"),
                source: e,
            })?;
            print!("{md}");
            if !table.check.holds() {
                eprintln!("ordering check failed; see ablation.json");
            }
        }
    }
    Ok(())
}
