//! Gaussian splatting rasterizer: EWA projection, depth-sorted front-to-back
//! compositing over screen tiles, a brute-force oracle, and an analytic
//! backward pass for training on the autograd tape.

use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::gaussians::{quat_to_matrix, sh_basis_grad, sh_coeffs, GaussianScene, Mat3, Vec3};
use crate::numerics::{Graph, Tensor, Var};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct CameraIntrinsics {
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
    pub width: usize,
    pub height: usize,
}

impl CameraIntrinsics {
    /// Pinhole camera with the given horizontal field of view and a centered
    /// principal point.
    pub fn from_fov(width: usize, height: usize, fov_x_deg: f64) -> Self {
        let fx = width as f64 / 2.0 / (fov_x_deg.to_radians() / 2.0).tan();
        Self {
            fx,
            fy: fx,
            cx: width as f64 / 2.0,
            cy: height as f64 / 2.0,
            width,
            height,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.fx > 0.0 && self.fy > 0.0) {
            return Err(Error::Validation(format!("focal lengths ({}, {}) must be positive", self.fx, self.fy)));
        }
        if self.width == 0 || self.height == 0 {
            return Err(Error::Validation("image size must be positive".into()));
        }
        let inside = (0.0..=self.width as f64).contains(&self.cx) && (0.0..=self.height as f64).contains(&self.cy);
        if !inside {
            return Err(Error::Validation(format!(
                "principal point ({}, {}) outside {}x{}",
                self.cx, self.cy, self.width, self.height
            )));
        }
        Ok(())
    }

    /// The same camera resampled to a new resolution.
    pub fn resized(&self, width: usize, height: usize) -> Self {
        let (sx, sy) = (width as f64 / self.width as f64, height as f64 / self.height as f64);
        Self {
            fx: self.fx * sx,
            fy: self.fy * sy,
            cx: self.cx * sx,
            cy: self.cy * sy,
            width,
            height,
        }
    }

    /// `(fx/W, fy/H, cx/W, cy/H)`.
    pub fn normalized(&self) -> [f64; 4] {
        let (w, h) = (self.width as f64, self.height as f64);
        [self.fx / w, self.fy / h, self.cx / w, self.cy / h]
    }
}

/// World-to-camera transform `p_cam = R·p_world + t`, camera looking down +z
/// with +y pointing down the image.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct CameraPose {
    pub rotation: Mat3,
    pub translation: Vec3,
}

impl Default for CameraPose {
    fn default() -> Self {
        Self::identity()
    }
}

impl CameraPose {
    pub fn identity() -> Self {
        Self {
            rotation: [[1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [0.0, 0.0, 1.0]],
            translation: [0.0; 3],
        }
    }

    /// Camera at `eye` looking at `target`, with `up` as world up.
    pub fn look_at(eye: Vec3, target: Vec3, up: Vec3) -> Result<Self> {
        let f = normalize(sub(target, eye))?;
        let r = normalize(cross(f, up))?;
        // Image y points down.
        let d = cross(f, r);
        let rotation = [r, d, f];
        let translation = neg(mat_vec(&rotation, eye));
        Ok(Self { rotation, translation })
    }

    pub fn validate(&self) -> Result<()> {
        let r = &self.rotation;
        for i in 0..3 {
            for j in 0..3 {
                let dot: f64 = (0..3).map(|k| r[k][i] * r[k][j]).sum();
                let expect = if i == j { 1.0 } else { 0.0 };
                if (dot - expect).abs() > 1e-6 {
                    return Err(Error::Validation("pose rotation is not orthonormal".into()));
                }
            }
        }
        if (det3(r) - 1.0).abs() > 1e-6 {
            return Err(Error::Validation("pose rotation has determinant -1".into()));
        }
        Ok(())
    }

    /// Camera center in world coordinates, `−Rᵀt`.
    pub fn center(&self) -> Vec3 {
        neg(mat_t_vec(&self.rotation, self.translation))
    }

    pub fn apply(&self, p: Vec3) -> Vec3 {
        add(mat_vec(&self.rotation, p), self.translation)
    }

    pub fn inverse(&self) -> Self {
        let rt = transpose(&self.rotation);
        Self {
            rotation: rt,
            translation: neg(mat_vec(&rt, self.translation)),
        }
    }

    /// `self ∘ other`: first `other`, then `self`.
    pub fn compose(&self, other: &CameraPose) -> Self {
        Self {
            rotation: mat_mul(&self.rotation, &other.rotation),
            translation: self.apply(other.translation),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RasterConfig {
    /// Added to the screen covariance diagonal, in pixels².
    pub dilation: f64,
    pub alpha_cutoff: f64,
    pub max_alpha: f64,
    pub near: f64,
    pub tile: usize,
}

impl Default for RasterConfig {
    fn default() -> Self {
        Self {
            dilation: 0.3,
            alpha_cutoff: 1.0 / 255.0,
            max_alpha: 0.99,
            near: 0.01,
            tile: 16,
        }
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct RenderStats {
    pub culled: usize,
    pub skipped_singular: usize,
    pub ms: f64,
}

#[derive(Clone, Debug)]
pub struct RenderOutput {
    /// `[H, W, 3]`.
    pub image: Tensor,
    /// `[H, W]`, one minus the final transmittance.
    pub alpha: Tensor,
    pub stats: RenderStats,
}

/// Screen-space footprint of one primitive.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Projection {
    pub mean: [f64; 2],
    pub cov: [[f64; 2]; 2],
    pub depth: f64,
}

/// Primitive parameters as flat arrays, the common input of every render
/// path. `sh` holds `3·(L+1)²` coefficient-major values per primitive.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct SplatParams {
    pub means: Vec<Vec3>,
    pub opacity: Vec<f64>,
    pub rotation: Vec<[f64; 4]>,
    pub scale: Vec<Vec3>,
    pub sh: Vec<f64>,
    pub sh_degree: usize,
}

impl SplatParams {
    pub fn from_scene(scene: &GaussianScene) -> Self {
        let p = &scene.primitives;
        Self {
            means: p.iter().map(|g| g.mean).collect(),
            opacity: p.iter().map(|g| g.opacity).collect(),
            rotation: p.iter().map(|g| g.rotation).collect(),
            scale: p.iter().map(|g| g.scale).collect(),
            sh: p.iter().flat_map(|g| g.sh.iter().copied()).collect(),
            sh_degree: scene.sh_degree,
        }
    }

    pub fn len(&self) -> usize {
        self.means.len()
    }

    pub fn is_empty(&self) -> bool {
        self.means.is_empty()
    }

    fn check(&self) -> Result<()> {
        let n = self.len();
        let k = 3 * sh_coeffs(self.sh_degree);
        if self.opacity.len() != n || self.rotation.len() != n || self.scale.len() != n || self.sh.len() != n * k {
            return Err(Error::Argument("splat parameter arrays disagree in length".into()));
        }
        Ok(())
    }
}

/// Everything the backward pass needs about one visible primitive.
#[derive(Clone, Debug)]
struct Screen {
    index: usize,
    mean: [f64; 2],
    conic: [[f64; 2]; 2],
    depth: f64,
    cam: Vec3,
    jt: [[f64; 3]; 2],
    sigma: Mat3,
    rot: Mat3,
    color: Vec3,
    color_raw: Vec3,
    dir: Vec3,
    dist: f64,
    opacity: f64,
    /// Pixel radius beyond which the contribution is below the cutoff.
    radius: f64,
}

fn sub(a: Vec3, b: Vec3) -> Vec3 {
    [a[0] - b[0], a[1] - b[1], a[2] - b[2]]
}

fn add(a: Vec3, b: Vec3) -> Vec3 {
    [a[0] + b[0], a[1] + b[1], a[2] + b[2]]
}

fn neg(a: Vec3) -> Vec3 {
    [-a[0], -a[1], -a[2]]
}

fn dot(a: Vec3, b: Vec3) -> f64 {
    a[0] * b[0] + a[1] * b[1] + a[2] * b[2]
}

fn cross(a: Vec3, b: Vec3) -> Vec3 {
    [a[1] * b[2] - a[2] * b[1], a[2] * b[0] - a[0] * b[2], a[0] * b[1] - a[1] * b[0]]
}

fn normalize(a: Vec3) -> Result<Vec3> {
    let n = dot(a, a).sqrt();
    if n < 1e-12 {
        return Err(Error::Argument("cannot normalize a zero vector".into()));
    }
    Ok(a.map(|v| v / n))
}

pub(crate) fn mat_vec(m: &Mat3, v: Vec3) -> Vec3 {
    [dot(m[0], v), dot(m[1], v), dot(m[2], v)]
}

fn mat_t_vec(m: &Mat3, v: Vec3) -> Vec3 {
    std::array::from_fn(|j| (0..3).map(|i| m[i][j] * v[i]).sum())
}

pub(crate) fn mat_mul(a: &Mat3, b: &Mat3) -> Mat3 {
    std::array::from_fn(|i| std::array::from_fn(|j| (0..3).map(|k| a[i][k] * b[k][j]).sum()))
}

pub(crate) fn transpose(a: &Mat3) -> Mat3 {
    std::array::from_fn(|i| std::array::from_fn(|j| a[j][i]))
}

fn det3(m: &Mat3) -> f64 {
    m[0][0] * (m[1][1] * m[2][2] - m[1][2] * m[2][1]) - m[0][1] * (m[1][0] * m[2][2] - m[1][2] * m[2][0])
        + m[0][2] * (m[1][0] * m[2][1] - m[1][1] * m[2][0])
}

/// Rotation about an axis through the origin (Rodrigues).
pub fn axis_angle(axis: Vec3, angle: f64) -> Result<Mat3> {
    let [x, y, z] = normalize(axis)?;
    let (s, c) = angle.sin_cos();
    let t = 1.0 - c;
    Ok([
        [t * x * x + c, t * x * y - s * z, t * x * z + s * y],
        [t * x * y + s * z, t * y * y + c, t * y * z - s * x],
        [t * x * z - s * y, t * y * z + s * x, t * z * z + c],
    ])
}

fn covariance_parts(q: [f64; 4], s: Vec3) -> (Mat3, Mat3) {
    let rot = quat_to_matrix(q);
    let sigma = std::array::from_fn(|i| std::array::from_fn(|j| (0..3).map(|k| rot[i][k] * s[k] * s[k] * rot[j][k]).sum()));
    (rot, sigma)
}

/// EWA projection of a 3D Gaussian. Returns `None` when the center is not
/// beyond the near plane.
pub fn project_parts(mean: Vec3, sigma: &Mat3, intr: &CameraIntrinsics, pose: &CameraPose, cfg: &RasterConfig) -> Option<(Projection, Vec3, [[f64; 3]; 2])> {
    let cam = pose.apply(mean);
    let [x, y, z] = cam;
    if z <= cfg.near {
        return None;
    }
    let j = [[intr.fx / z, 0.0, -intr.fx * x / (z * z)], [0.0, intr.fy / z, -intr.fy * y / (z * z)]];
    let w = &pose.rotation;
    let jt: [[f64; 3]; 2] = std::array::from_fn(|r| std::array::from_fn(|c| (0..3).map(|k| j[r][k] * w[k][c]).sum()));
    let mut cov = [[0.0; 2]; 2];
    for (a, row) in cov.iter_mut().enumerate() {
        for (b, v) in row.iter_mut().enumerate() {
            *v = (0..3)
                .map(|k| (0..3).map(|l| jt[a][k] * sigma[k][l] * jt[b][l]).sum::<f64>())
                .sum();
        }
    }
    cov[0][0] += cfg.dilation;
    cov[1][1] += cfg.dilation;
    let proj = Projection {
        mean: [intr.fx * x / z + intr.cx, intr.fy * y / z + intr.cy],
        cov,
        depth: z,
    };
    Some((proj, cam, jt))
}

/// Screen mean, dilated screen covariance, and depth of one primitive.
pub fn project(g: &crate::gaussians::GaussianPrimitive, intr: &CameraIntrinsics, pose: &CameraPose, cfg: &RasterConfig) -> Result<Option<Projection>> {
    let sigma = g.covariance()?;
    Ok(project_parts(g.mean, &sigma, intr, pose, cfg).map(|p| p.0))
}

fn prepare(p: &SplatParams, intr: &CameraIntrinsics, pose: &CameraPose, cfg: &RasterConfig, stats: &mut RenderStats) -> Vec<Screen> {
    let k = 3 * sh_coeffs(p.sh_degree);
    let eye = pose.center();
    let mut out = Vec::new();
    for i in 0..p.len() {
        let (rot, sigma) = covariance_parts(p.rotation[i], p.scale[i]);
        let Some((proj, cam, jt)) = project_parts(p.means[i], &sigma, intr, pose, cfg) else {
            stats.culled += 1;
            continue;
        };
        let c = proj.cov;
        let det = c[0][0] * c[1][1] - c[0][1] * c[1][0];
        if !(det > 1e-12) || !det.is_finite() {
            stats.skipped_singular += 1;
            continue;
        }
        let conic = [[c[1][1] / det, -c[0][1] / det], [-c[1][0] / det, c[0][0] / det]];
        let opacity = p.opacity[i];
        // Contributions fall below the cutoff once α·exp(−q/2) < cutoff, and
        // q ≥ r²/λmax, so this radius loses nothing.
        let ratio = opacity / cfg.alpha_cutoff;
        if ratio <= 1.0 {
            continue;
        }
        let mid = 0.5 * (c[0][0] + c[1][1]);
        let lmax = mid + (mid * mid - det).max(0.0).sqrt();
        let radius = (2.0 * ratio.ln() * lmax).sqrt() + 1.0;
        let offset = sub(p.means[i], eye);
        let dist = dot(offset, offset).sqrt().max(1e-12);
        let dir = offset.map(|v| v / dist);
        let (basis, _) = sh_basis_grad(dir, p.sh_degree);
        let coeffs = &p.sh[i * k..(i + 1) * k];
        let mut raw = [0.5; 3];
        for (b, y) in basis.iter().enumerate() {
            for (ch, v) in raw.iter_mut().enumerate() {
                *v += coeffs[b * 3 + ch] * y;
            }
        }
        out.push(Screen {
            index: i,
            mean: proj.mean,
            conic,
            depth: proj.depth,
            cam,
            jt,
            sigma,
            rot,
            color: raw.map(|v| v.clamp(0.0, 1.0)),
            color_raw: raw,
            dir,
            dist,
            opacity,
            radius,
        });
    }
    out.sort_by(|a, b| a.depth.total_cmp(&b.depth).then(a.index.cmp(&b.index)));
    out
}

/// Per-pixel contribution `α' = min(max_alpha, α·exp(−½ dᵀΣ'⁻¹d))`, or
/// `None` below the cutoff. Returns `(α', gaussian, clamped)`.
fn contribution(s: &Screen, px: f64, py: f64, cfg: &RasterConfig) -> Option<(f64, f64, bool)> {
    let dx = px - s.mean[0];
    let dy = py - s.mean[1];
    let q = s.conic[0][0] * dx * dx + (s.conic[0][1] + s.conic[1][0]) * dx * dy + s.conic[1][1] * dy * dy;
    if q < 0.0 {
        return None;
    }
    let gauss = (-0.5 * q).exp();
    let a = s.opacity * gauss;
    if a < cfg.alpha_cutoff {
        return None;
    }
    if a > cfg.max_alpha {
        Some((cfg.max_alpha, gauss, true))
    } else {
        Some((a, gauss, false))
    }
}

/// Pixel center coordinates for integer pixel `(x, y)`.
fn pixel_center(x: usize, y: usize) -> (f64, f64) {
    (x as f64 + 0.5, y as f64 + 0.5)
}

/// Indices into the sorted screen list overlapping each tile, in depth order.
fn bin_tiles(screens: &[Screen], intr: &CameraIntrinsics, tile: usize) -> (usize, Vec<Vec<usize>>) {
    let tw = intr.width.div_ceil(tile);
    let th = intr.height.div_ceil(tile);
    let mut bins = vec![Vec::new(); tw * th];
    for (si, s) in screens.iter().enumerate() {
        let lo_x = ((s.mean[0] - s.radius) / tile as f64).floor().max(0.0);
        let hi_x = ((s.mean[0] + s.radius) / tile as f64).floor().min(tw as f64 - 1.0);
        let lo_y = ((s.mean[1] - s.radius) / tile as f64).floor().max(0.0);
        let hi_y = ((s.mean[1] + s.radius) / tile as f64).floor().min(th as f64 - 1.0);
        if lo_x > hi_x || lo_y > hi_y {
            continue;
        }
        for ty in lo_y as usize..=hi_y as usize {
            for tx in lo_x as usize..=hi_x as usize {
                bins[ty * tw + tx].push(si);
            }
        }
    }
    (tw, bins)
}

struct Composite {
    image: Vec<f64>,
    alpha: Vec<f64>,
    weight: Vec<f64>,
}

fn composite_pixel<'a>(
    candidates: impl Iterator<Item = &'a Screen>,
    px: f64,
    py: f64,
    bg: Vec3,
    cfg: &RasterConfig,
) -> ([f64; 3], f64, f64) {
    let mut color = [0.0; 3];
    let mut t = 1.0;
    let mut weight = 0.0;
    for s in candidates {
        if let Some((a, _, _)) = contribution(s, px, py, cfg) {
            let w = a * t;
            for (c, v) in color.iter_mut().enumerate() {
                *v += s.color[c] * w;
            }
            weight += w;
            t *= 1.0 - a;
        }
    }
    for (c, v) in color.iter_mut().enumerate() {
        *v += bg[c] * t;
    }
    (color, t, weight)
}

fn composite_tiled(screens: &[Screen], intr: &CameraIntrinsics, bg: Vec3, cfg: &RasterConfig) -> Composite {
    let (w, h) = (intr.width, intr.height);
    let mut out = Composite {
        image: vec![0.0; w * h * 3],
        alpha: vec![0.0; w * h],
        weight: vec![0.0; w * h],
    };
    let tile = cfg.tile.max(1);
    let (tw, bins) = bin_tiles(screens, intr, tile);
    for y in 0..h {
        for x in 0..w {
            let bin = &bins[(y / tile) * tw + x / tile];
            let (px, py) = pixel_center(x, y);
            let (c, t, wsum) = composite_pixel(bin.iter().map(|&i| &screens[i]), px, py, bg, cfg);
            let o = y * w + x;
            out.image[o * 3..o * 3 + 3].copy_from_slice(&c);
            out.alpha[o] = 1.0 - t;
            out.weight[o] = wsum;
        }
    }
    out
}

fn finish(c: Composite, intr: &CameraIntrinsics, stats: RenderStats) -> RenderOutput {
    RenderOutput {
        image: Tensor::from_vec(&[intr.height, intr.width, 3], c.image),
        alpha: Tensor::from_vec(&[intr.height, intr.width], c.alpha),
        stats,
    }
}

fn check_camera(intr: &CameraIntrinsics, pose: &CameraPose) -> Result<()> {
    intr.validate()?;
    pose.validate()
}

pub fn render_params(p: &SplatParams, intr: &CameraIntrinsics, pose: &CameraPose, bg: Vec3, cfg: &RasterConfig) -> Result<RenderOutput> {
    check_camera(intr, pose)?;
    p.check()?;
    crate::instrument::render();
    let start = Instant::now();
    let mut stats = RenderStats::default();
    let screens = prepare(p, intr, pose, cfg, &mut stats);
    let c = composite_tiled(&screens, intr, bg, cfg);
    stats.ms = start.elapsed().as_secs_f64() * 1e3;
    Ok(finish(c, intr, stats))
}

/// Tiled render of `scene`.
pub fn render(scene: &GaussianScene, intr: &CameraIntrinsics, pose: &CameraPose, bg: Vec3, cfg: &RasterConfig) -> Result<RenderOutput> {
    scene.validate()?;
    render_params(&SplatParams::from_scene(scene), intr, pose, bg, cfg)
}

/// Per-pixel accumulated compositing weight `Σ αᵢ'·Tᵢ`, for auditing.
pub fn render_weights(scene: &GaussianScene, intr: &CameraIntrinsics, pose: &CameraPose, cfg: &RasterConfig) -> Result<(Tensor, Tensor)> {
    check_camera(intr, pose)?;
    scene.validate()?;
    let mut stats = RenderStats::default();
    let screens = prepare(&SplatParams::from_scene(scene), intr, pose, cfg, &mut stats);
    let c = composite_tiled(&screens, intr, [0.0; 3], cfg);
    let shape = [intr.height, intr.width];
    let transmittance = c.alpha.iter().map(|a| 1.0 - a).collect();
    Ok((Tensor::from_vec(&shape, c.weight), Tensor::from_vec(&shape, transmittance)))
}

/// Oracle renderer: every pixel visits every visible primitive, with no
/// tiles and no radius test. O(pixels × primitives).
pub fn render_bruteforce(scene: &GaussianScene, intr: &CameraIntrinsics, pose: &CameraPose, bg: Vec3, cfg: &RasterConfig) -> Result<Tensor> {
    check_camera(intr, pose)?;
    scene.validate()?;
    let mut stats = RenderStats::default();
    let screens = prepare(&SplatParams::from_scene(scene), intr, pose, cfg, &mut stats);
    let (w, h) = (intr.width, intr.height);
    let mut img = vec![0.0; w * h * 3];
    for y in 0..h {
        for x in 0..w {
            let (px, py) = pixel_center(x, y);
            let (c, _, _) = composite_pixel(screens.iter(), px, py, bg, cfg);
            img[(y * w + x) * 3..(y * w + x) * 3 + 3].copy_from_slice(&c);
        }
    }
    Ok(Tensor::from_vec(&[h, w, 3], img))
}

/// Gradients of a scalar loss with respect to every splat parameter.
#[derive(Clone, Debug)]
pub struct SplatGrads {
    pub means: Vec<Vec3>,
    pub opacity: Vec<f64>,
    pub rotation: Vec<[f64; 4]>,
    pub scale: Vec<Vec3>,
    pub sh: Vec<f64>,
}

/// Backpropagates `d_image` (`[H, W, 3]`) through the tiled render.
pub fn render_backward(
    p: &SplatParams,
    intr: &CameraIntrinsics,
    pose: &CameraPose,
    bg: Vec3,
    cfg: &RasterConfig,
    d_image: &Tensor,
) -> Result<SplatGrads> {
    check_camera(intr, pose)?;
    p.check()?;
    let n = p.len();
    let k = 3 * sh_coeffs(p.sh_degree);
    let mut stats = RenderStats::default();
    let screens = prepare(p, intr, pose, cfg, &mut stats);
    let (w, h) = (intr.width, intr.height);
    let tile = cfg.tile.max(1);
    let (tw, bins) = bin_tiles(&screens, intr, tile);

    // Screen-space gradients per sorted primitive.
    let mut d_color = vec![[0.0; 3]; screens.len()];
    let mut d_opacity = vec![0.0; screens.len()];
    let mut d_mean2 = vec![[0.0; 2]; screens.len()];
    let mut d_conic = vec![[0.0; 3]; screens.len()];
    let dimg = d_image.data();
    let mut hits: Vec<(usize, f64, f64, bool)> = Vec::new();
    for y in 0..h {
        for x in 0..w {
            let bin = &bins[(y / tile) * tw + x / tile];
            let (px, py) = pixel_center(x, y);
            hits.clear();
            let mut t = 1.0;
            for &si in bin {
                if let Some((a, gauss, clamped)) = contribution(&screens[si], px, py, cfg) {
                    hits.push((si, a, gauss, clamped));
                    t *= 1.0 - a;
                }
            }
            let o = (y * w + x) * 3;
            let dc = [dimg[o], dimg[o + 1], dimg[o + 2]];
            // Walk back to front, carrying the color seen behind each layer.
            let mut behind = bg;
            let mut t_after = t;
            for &(si, a, gauss, clamped) in hits.iter().rev() {
                let t_before = t_after / (1.0 - a);
                let s = &screens[si];
                for c in 0..3 {
                    d_color[si][c] += a * t_before * dc[c];
                }
                let da: f64 = (0..3).map(|c| dc[c] * t_before * (s.color[c] - behind[c])).sum();
                if !clamped {
                    d_opacity[si] += da * gauss;
                    let dg = da * s.opacity;
                    let dq = -0.5 * gauss * dg;
                    let dx = px - s.mean[0];
                    let dy = py - s.mean[1];
                    let cn = s.conic;
                    d_mean2[si][0] += dq * -(2.0 * cn[0][0] * dx + (cn[0][1] + cn[1][0]) * dy);
                    d_mean2[si][1] += dq * -(2.0 * cn[1][1] * dy + (cn[0][1] + cn[1][0]) * dx);
                    d_conic[si][0] += dq * dx * dx;
                    d_conic[si][1] += dq * dx * dy;
                    d_conic[si][2] += dq * dy * dy;
                }
                for c in 0..3 {
                    behind[c] = s.color[c] * a + (1.0 - a) * behind[c];
                }
                t_after = t_before;
            }
        }
    }

    let mut g = SplatGrads {
        means: vec![[0.0; 3]; n],
        opacity: vec![0.0; n],
        rotation: vec![[0.0; 4]; n],
        scale: vec![[0.0; 3]; n],
        sh: vec![0.0; n * k],
    };
    for (si, s) in screens.iter().enumerate() {
        let i = s.index;
        g.opacity[i] = d_opacity[si];

        // Color through the SH basis and the view direction.
        let dcol: Vec3 = std::array::from_fn(|c| {
            if (0.0..=1.0).contains(&s.color_raw[c]) {
                d_color[si][c]
            } else {
                0.0
            }
        });
        let (basis, bgrad) = sh_basis_grad(s.dir, p.sh_degree);
        let coeffs = &p.sh[i * k..(i + 1) * k];
        let mut d_dir = [0.0; 3];
        for (b, y) in basis.iter().enumerate() {
            for c in 0..3 {
                g.sh[i * k + b * 3 + c] = y * dcol[c];
                for a in 0..3 {
                    d_dir[a] += coeffs[b * 3 + c] * dcol[c] * bgrad[b][a];
                }
            }
        }
        let proj_dir = dot(d_dir, s.dir);
        let mut d_mean = std::array::from_fn::<f64, 3, _>(|a| (d_dir[a] - proj_dir * s.dir[a]) / s.dist);

        // Conic = inverse of the dilated screen covariance.
        let cn = s.conic;
        let gc = [[d_conic[si][0], d_conic[si][1]], [d_conic[si][1], d_conic[si][2]]];
        let mut d_cov = [[0.0; 2]; 2];
        for a in 0..2 {
            for b in 0..2 {
                d_cov[a][b] = -(0..2)
                    .map(|u| (0..2).map(|v| cn[a][u] * gc[u][v] * cn[v][b]).sum::<f64>())
                    .sum::<f64>();
            }
        }
        // Σ' = T Σ Tᵀ with T = J·W.
        let jt = s.jt;
        let mut d_t = [[0.0; 3]; 2];
        for a in 0..2 {
            for c in 0..3 {
                d_t[a][c] = (0..2)
                    .map(|b| {
                        let sym = d_cov[a][b] + d_cov[b][a];
                        sym * (0..3).map(|l| jt[b][l] * s.sigma[l][c]).sum::<f64>()
                    })
                    .sum();
            }
        }
        let mut d_sigma = [[0.0; 3]; 3];
        for l in 0..3 {
            for m in 0..3 {
                d_sigma[l][m] = (0..2)
                    .map(|a| (0..2).map(|b| jt[a][l] * d_cov[a][b] * jt[b][m]).sum::<f64>())
                    .sum();
            }
        }
        let wr = &pose.rotation;
        // dJ = dT · Wᵀ.
        let d_j: [[f64; 3]; 2] = std::array::from_fn(|a| std::array::from_fn(|c| (0..3).map(|l| d_t[a][l] * wr[c][l]).sum()));
        let [x, y, z] = s.cam;
        let (fx, fy) = (intr.fx, intr.fy);
        let mut d_cam = [0.0; 3];
        d_cam[0] += d_mean2[si][0] * fx / z;
        d_cam[1] += d_mean2[si][1] * fy / z;
        d_cam[2] += -d_mean2[si][0] * fx * x / (z * z) - d_mean2[si][1] * fy * y / (z * z);
        d_cam[0] += d_j[0][2] * -fx / (z * z);
        d_cam[1] += d_j[1][2] * -fy / (z * z);
        d_cam[2] += d_j[0][0] * -fx / (z * z)
            + d_j[0][2] * 2.0 * fx * x / (z * z * z)
            + d_j[1][1] * -fy / (z * z)
            + d_j[1][2] * 2.0 * fy * y / (z * z * z);
        let d_world = mat_t_vec(wr, d_cam);
        for a in 0..3 {
            d_mean[a] += d_world[a];
        }
        g.means[i] = d_mean;

        // Σ = M Mᵀ with M = R·diag(s).
        let sc = p.scale[i];
        let rot = s.rot;
        let sym: Mat3 = std::array::from_fn(|a| std::array::from_fn(|b| d_sigma[a][b] + d_sigma[b][a]));
        let m: Mat3 = std::array::from_fn(|a| std::array::from_fn(|b| rot[a][b] * sc[b]));
        let d_m: Mat3 = std::array::from_fn(|a| std::array::from_fn(|b| (0..3).map(|c| sym[a][c] * m[c][b]).sum()));
        g.scale[i] = std::array::from_fn(|b| (0..3).map(|a| d_m[a][b] * rot[a][b]).sum());
        let d_r: Mat3 = std::array::from_fn(|a| std::array::from_fn(|b| d_m[a][b] * sc[b]));
        g.rotation[i] = quat_matrix_grad(p.rotation[i], &d_r);
    }
    Ok(g)
}

/// Pulls a gradient on the rotation matrix back to the quaternion entries.
fn quat_matrix_grad(q: [f64; 4], d: &Mat3) -> [f64; 4] {
    let [w, x, y, z] = q;
    let dw = 2.0 * (-z * d[0][1] + y * d[0][2] + z * d[1][0] - x * d[1][2] - y * d[2][0] + x * d[2][1]);
    let dx = 2.0
        * (y * d[0][1] + z * d[0][2] + y * d[1][0] - 2.0 * x * d[1][1] - w * d[1][2] + z * d[2][0] + w * d[2][1]
            - 2.0 * x * d[2][2]);
    let dy = 2.0
        * (-2.0 * y * d[0][0] + x * d[0][1] + w * d[0][2] + x * d[1][0] + z * d[1][2] - w * d[2][0] + z * d[2][1]
            - 2.0 * y * d[2][2]);
    let dz = 2.0
        * (-2.0 * z * d[0][0] - w * d[0][1] + x * d[0][2] + w * d[1][0] - 2.0 * z * d[1][1] + y * d[1][2]
            + x * d[2][0]
            + y * d[2][1]);
    [dw, dx, dy, dz]
}

/// Splat parameters living on a graph: means `[G, 3]`, opacity `[G]`,
/// rotation `[G, 4]` (unit rows), scale `[G, 3]`, sh `[G, 3·(L+1)²]`.
#[derive(Clone, Copy, Debug)]
pub struct SplatVars {
    pub means: Var,
    pub opacity: Var,
    pub rotation: Var,
    pub scale: Var,
    pub sh: Var,
    pub sh_degree: usize,
}

impl SplatVars {
    pub fn values(&self, g: &Graph) -> SplatParams {
        let rows3 = |v: Var| -> Vec<Vec3> { g.value(v).data().chunks(3).map(|c| [c[0], c[1], c[2]]).collect() };
        SplatParams {
            means: rows3(self.means),
            opacity: g.value(self.opacity).data().to_vec(),
            rotation: g.value(self.rotation).data().chunks(4).map(|c| [c[0], c[1], c[2], c[3]]).collect(),
            scale: rows3(self.scale),
            sh: g.value(self.sh).data().to_vec(),
            sh_degree: self.sh_degree,
        }
    }
}

/// Differentiable render: `[H, W, 3]` image whose backward pass is
/// [`render_backward`].
pub fn render_on(g: &Graph, vars: SplatVars, intr: &CameraIntrinsics, pose: &CameraPose, bg: Vec3, cfg: &RasterConfig) -> Result<Var> {
    let params = vars.values(g);
    let out = render_params(&params, intr, pose, bg, cfg)?;
    let (intr, pose, cfg) = (*intr, *pose, cfg.clone());
    let n = params.len();
    let k = 3 * sh_coeffs(params.sh_degree);
    let inputs = [vars.means, vars.opacity, vars.rotation, vars.scale, vars.sh];
    Ok(g.custom(&inputs, out.image, move |d| {
        let Ok(gr) = render_backward(&params, &intr, &pose, bg, &cfg, d) else {
            return vec![None; 5];
        };
        let flat3 = |v: &[Vec3]| v.iter().flatten().copied().collect::<Vec<_>>();
        vec![
            Some(Tensor::from_vec(&[n, 3], flat3(&gr.means))),
            Some(Tensor::from_vec(&[n], gr.opacity)),
            Some(Tensor::from_vec(&[n, 4], gr.rotation.iter().flatten().copied().collect())),
            Some(Tensor::from_vec(&[n, 3], flat3(&gr.scale))),
            Some(Tensor::from_vec(&[n, k], gr.sh)),
        ]
    }))
}
