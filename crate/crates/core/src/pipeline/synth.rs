//! Synthetic recolor benchmark: flat-shaded boxes and spheres, a camera rig
//! around them, and an analytic ray-caster that produces every ground-truth
//! image independently of the Gaussian rasterizer.

use rand::seq::{IndexedRandom, SliceRandom};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::gaussians::Vec3;
use crate::lifting::{LiftSample, LiftTarget, DEFAULT_BACKGROUND};
use crate::numerics::{rng, Tensor};
use crate::rasterizer::{mat_vec, transpose, CameraIntrinsics, CameraPose};
use crate::vocab;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Shape {
    /// Box with half extents, rotated by `yaw` radians about the vertical axis.
    Cuboid { half: Vec3, yaw: f64 },
    Sphere { radius: f64 },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SceneObject {
    pub noun: String,
    pub color: String,
    pub rgb: Vec3,
    pub center: Vec3,
    pub shape: Shape,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Rig {
    pub intrinsics: CameraIntrinsics,
    /// World-to-camera poses of the two input views.
    pub inputs: [CameraPose; 2],
    pub novel: Vec<CameraPose>,
}

impl Rig {
    /// Pose of `pose` relative to input view 0, the canonical frame.
    pub fn relative(&self, pose: &CameraPose) -> CameraPose {
        pose.compose(&self.inputs[0].inverse())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SyntheticScene {
    pub objects: Vec<SceneObject>,
    pub background: Vec3,
    pub rig: Rig,
    /// Index of the object the edit prompt names.
    pub target: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SynthConfig {
    pub image_size: usize,
    pub fov_deg: f64,
    pub camera_radius: f64,
    pub elevation_deg: f64,
    /// Smallest azimuth gap between the input views.
    pub min_separation_deg: f64,
    pub max_separation_deg: f64,
    pub novel_views: usize,
    /// Ray-cast samples per pixel side.
    pub supersample: usize,
    pub max_distractors: usize,
    /// Target pixels required in every view.
    pub min_visible: usize,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            image_size: 32,
            fov_deg: 40.0,
            camera_radius: 3.0,
            elevation_deg: 20.0,
            min_separation_deg: 20.0,
            max_separation_deg: 35.0,
            novel_views: 4,
            supersample: 3,
            max_distractors: 2,
            min_visible: 12,
        }
    }
}

fn sub(a: Vec3, b: Vec3) -> Vec3 {
    [a[0] - b[0], a[1] - b[1], a[2] - b[2]]
}

fn dot(a: Vec3, b: Vec3) -> f64 {
    a[0] * b[0] + a[1] * b[1] + a[2] * b[2]
}

/// Nearest positive hit distance of a ray with an object.
pub fn intersect(obj: &SceneObject, origin: Vec3, dir: Vec3) -> Option<f64> {
    let o = sub(origin, obj.center);
    match &obj.shape {
        Shape::Sphere { radius } => {
            let b = dot(o, dir);
            let c = dot(o, o) - radius * radius;
            let disc = b * b - c;
            if disc < 0.0 {
                return None;
            }
            let s = disc.sqrt();
            [-b - s, -b + s].into_iter().find(|t| *t > 1e-9)
        }
        Shape::Cuboid { half, yaw } => {
            // Into the box frame: rotate by −yaw about y.
            let (sn, cs) = yaw.sin_cos();
            let local = |v: Vec3| [cs * v[0] - sn * v[2], v[1], sn * v[0] + cs * v[2]];
            let (lo, ld) = (local(o), local(dir));
            let mut t0 = f64::NEG_INFINITY;
            let mut t1 = f64::INFINITY;
            for a in 0..3 {
                if ld[a].abs() < 1e-15 {
                    if lo[a].abs() > half[a] {
                        return None;
                    }
                    continue;
                }
                let ta = (-half[a] - lo[a]) / ld[a];
                let tb = (half[a] - lo[a]) / ld[a];
                t0 = t0.max(ta.min(tb));
                t1 = t1.min(ta.max(tb));
            }
            if t0 > t1 || t1 <= 1e-9 {
                return None;
            }
            Some(if t0 > 1e-9 { t0 } else { t1 })
        }
    }
}

/// Index of the object hit first along the ray, if any.
pub fn cast(objects: &[SceneObject], origin: Vec3, dir: Vec3) -> Option<usize> {
    let mut best: Option<(f64, usize)> = None;
    for (i, o) in objects.iter().enumerate() {
        if let Some(t) = intersect(o, origin, dir) {
            if best.is_none_or(|(bt, _)| t < bt) {
                best = Some((t, i));
            }
        }
    }
    best.map(|b| b.1)
}

/// Unit world-space ray through image point `(u, v)`.
fn ray(intr: &CameraIntrinsics, pose: &CameraPose, u: f64, v: f64) -> (Vec3, Vec3) {
    let cam = [(u - intr.cx) / intr.fx, (v - intr.cy) / intr.fy, 1.0];
    let rt = transpose(&pose.rotation);
    let d = mat_vec(&rt, cam);
    let n = dot(d, d).sqrt();
    (pose.center(), d.map(|x| x / n))
}

/// Flat-shaded ray-cast image with `s × s` supersampling per pixel, and the
/// per-pixel coverage of object `mask_object`.
pub fn raycast_with_coverage(
    objects: &[SceneObject],
    background: Vec3,
    intr: &CameraIntrinsics,
    pose: &CameraPose,
    supersample: usize,
    mask_object: Option<usize>,
) -> (Tensor, Vec<f64>) {
    let (w, h) = (intr.width, intr.height);
    let s = supersample.max(1);
    let mut img = vec![0.0; w * h * 3];
    let mut cover = vec![0.0; w * h];
    let inv = 1.0 / (s * s) as f64;
    for y in 0..h {
        for x in 0..w {
            let mut acc = [0.0; 3];
            for sy in 0..s {
                for sx in 0..s {
                    let u = x as f64 + (sx as f64 + 0.5) / s as f64;
                    let v = y as f64 + (sy as f64 + 0.5) / s as f64;
                    let (o, d) = ray(intr, pose, u, v);
                    let hit = cast(objects, o, d);
                    let rgb = hit.map_or(background, |i| objects[i].rgb);
                    if hit.is_some() && hit == mask_object {
                        cover[y * w + x] += inv;
                    }
                    for c in 0..3 {
                        acc[c] += rgb[c] * inv;
                    }
                }
            }
            img[(y * w + x) * 3..(y * w + x) * 3 + 3].copy_from_slice(&acc);
        }
    }
    (Tensor::from_vec(&[h, w, 3], img), cover)
}

pub fn raycast(objects: &[SceneObject], background: Vec3, intr: &CameraIntrinsics, pose: &CameraPose, supersample: usize) -> Tensor {
    raycast_with_coverage(objects, background, intr, pose, supersample, None).0
}

fn orbit_pose(radius: f64, azimuth_deg: f64, elevation_deg: f64) -> Result<CameraPose> {
    let (a, e) = (azimuth_deg.to_radians(), elevation_deg.to_radians());
    let eye = [radius * e.cos() * a.sin(), radius * e.sin(), -radius * e.cos() * a.cos()];
    CameraPose::look_at(eye, [0.0; 3], [0.0, 1.0, 0.0])
}

/// One benchmark scene with its edit task and every rendered image.
#[derive(Clone, Debug)]
pub struct SceneRecord {
    pub scene: SyntheticScene,
    pub prompt: String,
    pub views: [Tensor; 2],
    /// Ground truth of the edit, for evaluation only.
    pub edited_truth: [Tensor; 2],
    pub novel: Vec<Tensor>,
    pub novel_edited_truth: Vec<Tensor>,
}

impl SceneRecord {
    /// Lifting supervision: both input views and every novel view, with
    /// poses relative to view 0.
    pub fn lift_sample(&self) -> LiftSample {
        let rig = &self.scene.rig;
        let intr = rig.intrinsics;
        let mut targets: Vec<LiftTarget> = rig
            .inputs
            .iter()
            .zip(&self.views)
            .map(|(p, img)| LiftTarget {
                image: img.clone(),
                intrinsics: intr,
                pose: rig.relative(p),
            })
            .collect();
        targets.extend(rig.novel.iter().zip(&self.novel).map(|(p, img)| LiftTarget {
            image: img.clone(),
            intrinsics: intr,
            pose: rig.relative(p),
        }));
        LiftSample {
            views: self.views.clone(),
            intrinsics: [intr, intr],
            targets,
        }
    }
}

fn random_object<R: Rng + ?Sized>(noun: &vocab::Word, center: Vec3, rng: &mut R) -> SceneObject {
    let color = noun.bound.expect("nouns carry a color");
    let shape = match noun.text {
        "sphere" => Shape::Sphere {
            radius: rng.random_range(0.3..0.45),
        },
        "cube" => {
            let s = rng.random_range(0.25..0.38);
            Shape::Cuboid {
                half: [s; 3],
                yaw: rng.random_range(0.0..std::f64::consts::FRAC_PI_2),
            }
        }
        _ => Shape::Cuboid {
            half: [rng.random_range(0.35..0.5), rng.random_range(0.15..0.25), rng.random_range(0.15..0.25)],
            yaw: rng.random_range(0.0..std::f64::consts::PI),
        },
    };
    SceneObject {
        noun: noun.text.to_string(),
        color: color.to_string(),
        rgb: vocab::color_rgb(color).expect("bound colors exist"),
        center,
        shape,
    }
}

fn visible_pixels(scene: &SyntheticScene, pose: &CameraPose) -> usize {
    let (_, cover) = raycast_with_coverage(&scene.objects, scene.background, &scene.rig.intrinsics, pose, 1, Some(scene.target));
    cover.iter().filter(|c| **c > 0.0).count()
}

/// Azimuth gap giving an angle of `angle_deg` between two orbit cameras at
/// the same elevation.
fn azimuth_gap(angle_deg: f64, elevation_deg: f64) -> f64 {
    let (c, e) = (angle_deg.to_radians().cos(), elevation_deg.to_radians());
    ((c - e.sin().powi(2)) / e.cos().powi(2)).clamp(-1.0, 1.0).acos().to_degrees()
}

/// Draws one scene, retrying placements until the target object is visible
/// in every view.
pub fn random_scene<R: Rng + ?Sized>(cfg: &SynthConfig, rng: &mut R) -> Result<(SyntheticScene, String)> {
    let nouns: Vec<&vocab::Word> = vocab::nouns().collect();
    for _ in 0..100 {
        let mut order = nouns.clone();
        order.shuffle(rng);
        let n_distract = rng.random_range(1..=cfg.max_distractors.min(order.len() - 1).max(1));
        let target_center = [rng.random_range(-0.3..0.3), rng.random_range(-0.2..0.2), rng.random_range(-0.3..0.3)];
        let mut objects = vec![random_object(order[0], target_center, rng)];
        for noun in order.iter().skip(1).take(n_distract) {
            let angle = rng.random_range(0.0..std::f64::consts::TAU);
            let dist = rng.random_range(0.8..1.1);
            let c = [
                target_center[0] + dist * angle.cos(),
                rng.random_range(-0.3..0.3),
                target_center[2] + dist * angle.sin(),
            ];
            objects.push(random_object(noun, c, rng));
        }
        let a0 = rng.random_range(-25.0..25.0);
        let angle = rng.random_range(cfg.min_separation_deg..=cfg.max_separation_deg);
        let sep = azimuth_gap(angle, cfg.elevation_deg) * if rng.random_bool(0.5) { 1.0 } else { -1.0 };
        let inputs = [
            orbit_pose(cfg.camera_radius, a0, cfg.elevation_deg)?,
            orbit_pose(cfg.camera_radius, a0 + sep, cfg.elevation_deg)?,
        ];
        let novel = (0..cfg.novel_views)
            .map(|k| {
                let f = (k as f64 + 0.5) / cfg.novel_views as f64;
                let elev = cfg.elevation_deg + if k % 2 == 0 { 6.0 } else { -6.0 };
                orbit_pose(cfg.camera_radius, a0 + f * sep, elev)
            })
            .collect::<Result<Vec<_>>>()?;
        let scene = SyntheticScene {
            objects,
            background: DEFAULT_BACKGROUND,
            rig: Rig {
                intrinsics: CameraIntrinsics::from_fov(cfg.image_size, cfg.image_size, cfg.fov_deg),
                inputs,
                novel,
            },
            target: 0,
        };
        let all = scene.rig.inputs.iter().chain(&scene.rig.novel);
        if all.clone().all(|p| visible_pixels(&scene, p) >= cfg.min_visible) {
            let bound = scene.objects[0].color.clone();
            let colors: Vec<&vocab::Word> = vocab::colors()
                .filter(|c| c.text != bound && !scene.objects.iter().any(|o| o.color == c.text))
                .collect();
            let to = colors.choose(rng).ok_or_else(|| Error::Config("no recolor target available".into()))?;
            let prompt = format!("turn the {} {}", scene.objects[0].noun, to.text);
            return Ok((scene, prompt));
        }
    }
    Err(Error::Config("could not place a visible target in 100 attempts".into()))
}

/// The scene's objects after applying `prompt`'s recolor to the target.
pub fn edited_objects(scene: &SyntheticScene, prompt: &str) -> Result<Vec<SceneObject>> {
    let ins = vocab::Instruction::parse(prompt)?;
    let target = ins
        .target_prompt()
        .ok_or_else(|| Error::Argument(format!("prompt `{prompt}` names no color")))?;
    let rgb = vocab::color_rgb(&target).expect("parsed colors exist");
    let mut objects = scene.objects.clone();
    objects[scene.target].rgb = rgb;
    objects[scene.target].color = target;
    Ok(objects)
}

pub fn render_record(scene: SyntheticScene, prompt: String, cfg: &SynthConfig) -> Result<SceneRecord> {
    let rig = &scene.rig;
    let draw = |objs: &[SceneObject], pose: &CameraPose| raycast(objs, scene.background, &rig.intrinsics, pose, cfg.supersample);
    let edited = edited_objects(&scene, &prompt)?;
    let views = [draw(&scene.objects, &rig.inputs[0]), draw(&scene.objects, &rig.inputs[1])];
    let edited_truth = [draw(&edited, &rig.inputs[0]), draw(&edited, &rig.inputs[1])];
    let novel = rig.novel.iter().map(|p| draw(&scene.objects, p)).collect();
    let novel_edited_truth = rig.novel.iter().map(|p| draw(&edited, p)).collect();
    Ok(SceneRecord {
        scene,
        prompt,
        views,
        edited_truth,
        novel,
        novel_edited_truth,
    })
}

/// `n` scenes drawn from one seeded generator.
pub fn synth_dataset(n: usize, seed: u64, cfg: &SynthConfig) -> Result<Vec<SceneRecord>> {
    if n == 0 {
        return Err(Error::Argument("dataset needs at least one scene".into()));
    }
    let mut r = rng(seed);
    (0..n)
        .map(|_| {
            let (scene, prompt) = random_scene(cfg, &mut r)?;
            render_record(scene, prompt, cfg)
        })
        .collect()
}
