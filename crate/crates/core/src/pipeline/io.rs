//! On-disk formats of the command line: camera files, benchmark datasets
//! and edit outputs.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::gaussians::write_ply;
use crate::imaging::save_png;
use crate::rasterizer::{CameraIntrinsics, CameraPose};

use super::run::EditResult;
use super::synth::{render_record, SceneRecord, SynthConfig, SyntheticScene};

/// Camera JSON: pinhole intrinsics plus a world-to-camera pose with a
/// row-major rotation.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CameraFile {
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
    pub w: usize,
    pub h: usize,
    #[serde(rename = "R")]
    pub r: [f64; 9],
    pub t: [f64; 3],
}

impl CameraFile {
    pub fn new(intr: &CameraIntrinsics, pose: &CameraPose) -> Self {
        let m = pose.rotation;
        Self {
            fx: intr.fx,
            fy: intr.fy,
            cx: intr.cx,
            cy: intr.cy,
            w: intr.width,
            h: intr.height,
            r: [m[0][0], m[0][1], m[0][2], m[1][0], m[1][1], m[1][2], m[2][0], m[2][1], m[2][2]],
            t: pose.translation,
        }
    }

    pub fn intrinsics(&self) -> Result<CameraIntrinsics> {
        let k = CameraIntrinsics {
            fx: self.fx,
            fy: self.fy,
            cx: self.cx,
            cy: self.cy,
            width: self.w,
            height: self.h,
        };
        k.validate()?;
        Ok(k)
    }

    pub fn pose(&self) -> Result<CameraPose> {
        let r = self.r;
        let p = CameraPose {
            rotation: [[r[0], r[1], r[2]], [r[3], r[4], r[5]], [r[6], r[7], r[8]]],
            translation: self.t,
        };
        p.validate()?;
        Ok(p)
    }
}

/// Reads one camera object or an array of them.
pub fn read_cameras(path: &Path) -> Result<Vec<CameraFile>> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let v: serde_json::Value = serde_json::from_str(&text)?;
    Ok(if v.is_array() {
        serde_json::from_value(v)?
    } else {
        vec![serde_json::from_value(v)?]
    })
}

#[derive(Clone, Debug, Serialize, Deserialize)]
struct DatasetScene {
    prompt: String,
    scene: SyntheticScene,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
struct DatasetFile {
    synth: SynthConfig,
    scenes: Vec<DatasetScene>,
}

/// Name of the dataset description inside a dataset directory.
pub const DATASET_FILE: &str = "dataset.json";

/// Writes `dataset.json` plus 8-bit previews of every rendered view. The
/// JSON alone is authoritative: loading re-renders the analytic scenes.
pub fn save_dataset(dir: &Path, data: &[SceneRecord], cfg: &SynthConfig) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let file = DatasetFile {
        synth: cfg.clone(),
        scenes: data
            .iter()
            .map(|r| DatasetScene {
                prompt: r.prompt.clone(),
                scene: r.scene.clone(),
            })
            .collect(),
    };
    let path = dir.join(DATASET_FILE);
    std::fs::write(&path, serde_json::to_string_pretty(&file)?).map_err(|e| Error::io(&path, e))?;
    for (i, r) in data.iter().enumerate() {
        let sd = dir.join(format!("scene_{i:03}"));
        std::fs::create_dir_all(&sd).map_err(|e| Error::io(&sd, e))?;
        save_png(&r.views[0], &sd.join("left.png"))?;
        save_png(&r.views[1], &sd.join("right.png"))?;
        save_png(&r.edited_truth[0], &sd.join("left_truth.png"))?;
        save_png(&r.edited_truth[1], &sd.join("right_truth.png"))?;
        for (k, img) in r.novel.iter().enumerate() {
            save_png(img, &sd.join(format!("novel_{k}.png")))?;
        }
    }
    Ok(())
}

pub fn load_dataset(dir: &Path) -> Result<(Vec<SceneRecord>, SynthConfig)> {
    let path = dir.join(DATASET_FILE);
    let text = std::fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    let file: DatasetFile = serde_json::from_str(&text)?;
    let data = file
        .scenes
        .into_iter()
        .map(|s| render_record(s.scene, s.prompt, &file.synth))
        .collect::<Result<Vec<_>>>()?;
    if data.is_empty() {
        return Err(Error::Argument(format!("{} lists no scenes", path.display())));
    }
    Ok((data, file.synth))
}

/// Writes edited views, the scene, the novel renders and the metrics.
pub fn save_edit_result(dir: &Path, res: &EditResult) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    save_png(&res.edited[0], &dir.join("edited_left.png"))?;
    save_png(&res.edited[1], &dir.join("edited_right.png"))?;
    write_ply(&res.scene, &dir.join("scene.ply"))?;
    for (k, img) in res.renders.iter().enumerate() {
        save_png(img, &dir.join(format!("novel_{k}.png")))?;
    }
    let path = dir.join("metrics.json");
    std::fs::write(&path, serde_json::to_string_pretty(&res.report)?).map_err(|e| Error::io(&path, e))?;
    let path = dir.join("timing.json");
    std::fs::write(&path, serde_json::to_string_pretty(&res.clock)?).map_err(|e| Error::io(&path, e))?;
    Ok(())
}
