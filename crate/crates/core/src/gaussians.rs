//! 3D Gaussian primitives, covariance construction, spherical-harmonics
//! color, and PLY scene files.

use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub type Vec3 = [f64; 3];
pub type Mat3 = [[f64; 3]; 3];

pub const SH_C0: f64 = 0.28209479177387814;
pub const SH_C1: f64 = 0.4886025119029199;
pub const SH_C2: [f64; 5] = [
    1.0925484305920792,
    -1.0925484305920792,
    0.31539156525252005,
    -1.0925484305920792,
    0.5462742152960396,
];
pub const SH_C3: [f64; 7] = [
    -0.5900435899266435,
    2.890611442640554,
    -0.4570457994644658,
    0.3731763325901154,
    -0.4570457994644658,
    1.445305721320277,
    -0.5900435899266435,
];
pub const MAX_SH_DEGREE: usize = 3;
pub const DEFAULT_SH_DEGREE: usize = 1;

pub fn sh_coeffs(degree: usize) -> usize {
    (degree + 1) * (degree + 1)
}

/// One splat. `sh` is coefficient-major: `sh[k * 3 + channel]`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GaussianPrimitive {
    pub mean: Vec3,
    pub opacity: f64,
    /// Unit quaternion `(w, x, y, z)`.
    pub rotation: [f64; 4],
    pub scale: Vec3,
    pub sh: Vec<f64>,
}

impl GaussianPrimitive {
    pub fn validate(&self, degree: usize) -> Result<()> {
        let n = quat_norm(self.rotation);
        if (n - 1.0).abs() > 1e-6 {
            return Err(Error::Validation(format!("quaternion norm {n} is not 1")));
        }
        if !self.scale.iter().all(|s| *s > 0.0 && s.is_finite()) {
            return Err(Error::Validation(format!("scales {:?} must be positive", self.scale)));
        }
        if !(self.opacity > 0.0 && self.opacity <= 1.0) {
            return Err(Error::Validation(format!("opacity {} outside (0, 1]", self.opacity)));
        }
        if self.sh.len() != 3 * sh_coeffs(degree) {
            return Err(Error::Validation(format!(
                "{} SH values for degree {degree}, expected {}",
                self.sh.len(),
                3 * sh_coeffs(degree)
            )));
        }
        if !self.sh.iter().chain(&self.mean).all(|v| v.is_finite()) {
            return Err(Error::Validation("non-finite mean or SH value".into()));
        }
        Ok(())
    }

    pub fn covariance(&self) -> Result<Mat3> {
        covariance(self.rotation, self.scale)
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct GaussianScene {
    pub primitives: Vec<GaussianPrimitive>,
    pub sh_degree: usize,
    /// Input view whose camera defines the scene frame.
    pub canonical_view: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SceneMeta {
    pub count: usize,
    pub sh_degree: usize,
    pub canonical_view: usize,
}

impl GaussianScene {
    pub fn new(sh_degree: usize) -> Self {
        Self {
            primitives: Vec::new(),
            sh_degree,
            canonical_view: 0,
        }
    }

    pub fn len(&self) -> usize {
        self.primitives.len()
    }

    pub fn is_empty(&self) -> bool {
        self.primitives.is_empty()
    }

    pub fn validate(&self) -> Result<()> {
        if self.sh_degree > MAX_SH_DEGREE {
            return Err(Error::Validation(format!("SH degree {} above {MAX_SH_DEGREE}", self.sh_degree)));
        }
        for (i, p) in self.primitives.iter().enumerate() {
            p.validate(self.sh_degree)
                .map_err(|e| Error::Validation(format!("primitive {i}: {e}")))?;
        }
        Ok(())
    }

    pub fn meta(&self) -> SceneMeta {
        SceneMeta {
            count: self.len(),
            sh_degree: self.sh_degree,
            canonical_view: self.canonical_view,
        }
    }
}

fn quat_norm(q: [f64; 4]) -> f64 {
    q.iter().map(|v| v * v).sum::<f64>().sqrt()
}

pub fn quat_to_matrix(q: [f64; 4]) -> Mat3 {
    let [w, x, y, z] = q;
    [
        [1.0 - 2.0 * (y * y + z * z), 2.0 * (x * y - w * z), 2.0 * (x * z + w * y)],
        [2.0 * (x * y + w * z), 1.0 - 2.0 * (x * x + z * z), 2.0 * (y * z - w * x)],
        [2.0 * (x * z - w * y), 2.0 * (y * z + w * x), 1.0 - 2.0 * (x * x + y * y)],
    ]
}

/// Unit quaternion `(w, x, y, z)` with `w ≥ 0` for a rotation matrix.
pub fn matrix_to_quat(m: &Mat3) -> [f64; 4] {
    let tr = m[0][0] + m[1][1] + m[2][2];
    let q = if tr > 0.0 {
        let s = (tr + 1.0).sqrt() * 2.0;
        [0.25 * s, (m[2][1] - m[1][2]) / s, (m[0][2] - m[2][0]) / s, (m[1][0] - m[0][1]) / s]
    } else if m[0][0] > m[1][1] && m[0][0] > m[2][2] {
        let s = (1.0 + m[0][0] - m[1][1] - m[2][2]).sqrt() * 2.0;
        [(m[2][1] - m[1][2]) / s, 0.25 * s, (m[0][1] + m[1][0]) / s, (m[0][2] + m[2][0]) / s]
    } else if m[1][1] > m[2][2] {
        let s = (1.0 + m[1][1] - m[0][0] - m[2][2]).sqrt() * 2.0;
        [(m[0][2] - m[2][0]) / s, (m[0][1] + m[1][0]) / s, 0.25 * s, (m[1][2] + m[2][1]) / s]
    } else {
        let s = (1.0 + m[2][2] - m[0][0] - m[1][1]).sqrt() * 2.0;
        [(m[1][0] - m[0][1]) / s, (m[0][2] + m[2][0]) / s, (m[1][2] + m[2][1]) / s, 0.25 * s]
    };
    let n = quat_norm(q);
    let sign = if q[0] < 0.0 { -1.0 } else { 1.0 };
    q.map(|v| sign * v / n)
}

/// `Σ = R·diag(s)²·Rᵀ`.
pub fn covariance(r: [f64; 4], s: Vec3) -> Result<Mat3> {
    let n = quat_norm(r);
    if (n - 1.0).abs() > 1e-6 {
        return Err(Error::Validation(format!("quaternion norm {n} is not 1")));
    }
    if !s.iter().all(|v| *v > 0.0) {
        return Err(Error::Validation(format!("scales {s:?} must be positive")));
    }
    let rm = quat_to_matrix(r);
    let mut out = [[0.0; 3]; 3];
    for (i, row) in out.iter_mut().enumerate() {
        for (j, v) in row.iter_mut().enumerate() {
            *v = (0..3).map(|k| rm[i][k] * s[k] * s[k] * rm[j][k]).sum();
        }
    }
    Ok(out)
}

/// Real SH basis values up to `degree` at unit direction `d`, in the
/// conventional 3DGS ordering and sign.
pub fn sh_basis(d: Vec3, degree: usize) -> Vec<f64> {
    let [x, y, z] = d;
    let mut b = vec![SH_C0];
    if degree >= 1 {
        b.extend([-SH_C1 * y, SH_C1 * z, -SH_C1 * x]);
    }
    if degree >= 2 {
        let (xx, yy, zz) = (x * x, y * y, z * z);
        b.extend([
            SH_C2[0] * x * y,
            SH_C2[1] * y * z,
            SH_C2[2] * (2.0 * zz - xx - yy),
            SH_C2[3] * x * z,
            SH_C2[4] * (xx - yy),
        ]);
        if degree >= 3 {
            b.extend([
                SH_C3[0] * y * (3.0 * xx - yy),
                SH_C3[1] * x * y * z,
                SH_C3[2] * y * (4.0 * zz - xx - yy),
                SH_C3[3] * z * (2.0 * zz - 3.0 * xx - 3.0 * yy),
                SH_C3[4] * x * (4.0 * zz - xx - yy),
                SH_C3[5] * z * (xx - yy),
                SH_C3[6] * x * (xx - 3.0 * yy),
            ]);
        }
    }
    b
}

/// [`sh_basis`] together with the gradient of each basis function with
/// respect to the direction.
pub fn sh_basis_grad(d: Vec3, degree: usize) -> (Vec<f64>, Vec<Vec3>) {
    let [x, y, z] = d;
    let (xx, yy, zz) = (x * x, y * y, z * z);
    let mut g = vec![[0.0; 3]];
    if degree >= 1 {
        g.extend([[0.0, -SH_C1, 0.0], [0.0, 0.0, SH_C1], [-SH_C1, 0.0, 0.0]]);
    }
    if degree >= 2 {
        let c = SH_C2;
        g.extend([
            [c[0] * y, c[0] * x, 0.0],
            [0.0, c[1] * z, c[1] * y],
            [-2.0 * c[2] * x, -2.0 * c[2] * y, 4.0 * c[2] * z],
            [c[3] * z, 0.0, c[3] * x],
            [2.0 * c[4] * x, -2.0 * c[4] * y, 0.0],
        ]);
    }
    if degree >= 3 {
        let c = SH_C3;
        g.extend([
            [c[0] * 6.0 * x * y, c[0] * (3.0 * xx - 3.0 * yy), 0.0],
            [c[1] * y * z, c[1] * x * z, c[1] * x * y],
            [-2.0 * c[2] * x * y, c[2] * (4.0 * zz - xx - 3.0 * yy), 8.0 * c[2] * y * z],
            [-6.0 * c[3] * x * z, -6.0 * c[3] * y * z, c[3] * (6.0 * zz - 3.0 * xx - 3.0 * yy)],
            [c[4] * (4.0 * zz - 3.0 * xx - yy), -2.0 * c[4] * x * y, 8.0 * c[4] * x * z],
            [2.0 * c[5] * x * z, -2.0 * c[5] * y * z, c[5] * (xx - yy)],
            [c[6] * (3.0 * xx - 3.0 * yy), -6.0 * c[6] * x * y, 0.0],
        ]);
    }
    (sh_basis(d, degree), g)
}

/// Unclamped `Σ_k sh_k·Y_k(d) + 0.5` per channel.
pub fn eval_sh_raw(sh: &[f64], dir: Vec3, degree: usize) -> Result<Vec3> {
    if degree > MAX_SH_DEGREE {
        return Err(Error::Validation(format!("SH degree {degree} above {MAX_SH_DEGREE}")));
    }
    let n = sh_coeffs(degree);
    if sh.len() != 3 * n {
        return Err(Error::Validation(format!(
            "{} SH values for degree {degree}, expected {}",
            sh.len(),
            3 * n
        )));
    }
    let basis = sh_basis(dir, degree);
    let mut rgb = [0.5; 3];
    for (k, y) in basis.iter().enumerate() {
        for (c, v) in rgb.iter_mut().enumerate() {
            *v += sh[k * 3 + c] * y;
        }
    }
    Ok(rgb)
}

/// Color seen from direction `dir`, offset by 0.5 and clamped to `[0, 1]`.
pub fn eval_sh(sh: &[f64], dir: Vec3, degree: usize) -> Result<Vec3> {
    Ok(eval_sh_raw(sh, dir, degree)?.map(|v| v.clamp(0.0, 1.0)))
}

/// DC coefficient that renders as `rgb`.
pub fn rgb_to_dc(rgb: f64) -> f64 {
    (rgb - 0.5) / SH_C0
}

fn logit(p: f64) -> f64 {
    let p = p.clamp(1e-7, 1.0 - 1e-7);
    (p / (1.0 - p)).ln()
}

fn ply_properties(degree: usize) -> Vec<String> {
    let rest = 3 * (sh_coeffs(degree) - 1);
    let mut names: Vec<String> = ["x", "y", "z", "f_dc_0", "f_dc_1", "f_dc_2"].map(String::from).to_vec();
    names.extend((0..rest).map(|i| format!("f_rest_{i}")));
    names.push("opacity".into());
    names.extend((0..3).map(|i| format!("scale_{i}")));
    names.extend((0..4).map(|i| format!("rot_{i}")));
    names
}

/// Binary little-endian PLY in the common splatting layout: opacity as a
/// logit, scales as logs, `f_rest` channel-major.
pub fn ply_bytes(scene: &GaussianScene) -> Result<Vec<u8>> {
    scene.validate()?;
    let names = ply_properties(scene.sh_degree);
    let mut out = Vec::new();
    writeln!(out, "ply").ok();
    writeln!(out, "format binary_little_endian 1.0").ok();
    writeln!(out, "comment sh_degree {}", scene.sh_degree).ok();
    writeln!(out, "comment canonical_view {}", scene.canonical_view).ok();
    writeln!(out, "element vertex {}", scene.len()).ok();
    for n in &names {
        writeln!(out, "property float {n}").ok();
    }
    writeln!(out, "end_header").ok();
    let rest = sh_coeffs(scene.sh_degree) - 1;
    for p in &scene.primitives {
        let mut vals: Vec<f64> = p.mean.to_vec();
        vals.extend(&p.sh[0..3]);
        for c in 0..3 {
            vals.extend((0..rest).map(|k| p.sh[(k + 1) * 3 + c]));
        }
        vals.push(logit(p.opacity));
        vals.extend(p.scale.map(f64::ln));
        vals.extend(p.rotation);
        for v in vals {
            out.extend_from_slice(&(v as f32).to_le_bytes());
        }
    }
    Ok(out)
}

pub fn write_ply(scene: &GaussianScene, path: &Path) -> Result<()> {
    let bytes = ply_bytes(scene)?;
    std::fs::write(path, bytes).map_err(|e| Error::io(path, e))?;
    let sidecar = path.with_extension("json");
    let meta = serde_json::to_string_pretty(&scene.meta())?;
    std::fs::write(&sidecar, meta).map_err(|e| Error::io(&sidecar, e))
}

fn type_size(t: &str) -> Option<usize> {
    Some(match t {
        "char" | "uchar" | "int8" | "uint8" => 1,
        "short" | "ushort" | "int16" | "uint16" => 2,
        "int" | "uint" | "float" | "int32" | "uint32" | "float32" => 4,
        "double" | "float64" => 8,
        _ => return None,
    })
}

pub fn parse_ply(bytes: &[u8]) -> Result<GaussianScene> {
    let marker = b"end_header\n";
    let end = bytes
        .windows(marker.len())
        .position(|w| w == marker)
        .ok_or_else(|| Error::Parse {
            offset: 0,
            reason: "missing end_header".into(),
        })?;
    let header = std::str::from_utf8(&bytes[..end]).map_err(|e| Error::Parse {
        offset: e.valid_up_to(),
        reason: "header is not UTF-8".into(),
    })?;
    let body = end + marker.len();
    let mut count = None;
    let mut degree = None;
    let mut canonical = 0;
    // (name, byte offset within a vertex record, is float32)
    let mut props: Vec<(String, usize, bool)> = Vec::new();
    let mut stride = 0;
    let mut offset = 0;
    let mut in_vertex = false;
    for (ln, line) in header.lines().enumerate() {
        let at = offset;
        offset += line.len() + 1;
        let parts: Vec<&str> = line.split_whitespace().collect();
        let err = |reason: String| Error::Parse { offset: at, reason };
        match parts.as_slice() {
            ["ply"] if ln == 0 => {}
            _ if ln == 0 => return Err(err("not a PLY file".into())),
            ["format", "binary_little_endian", _] => {}
            ["format", f, ..] => return Err(err(format!("unsupported format `{f}`"))),
            ["comment", "sh_degree", d] => degree = d.parse().ok(),
            ["comment", "canonical_view", v] => canonical = v.parse().unwrap_or(0),
            ["comment", ..] | ["obj_info", ..] => {}
            ["element", "vertex", n] => {
                count = Some(n.parse::<usize>().map_err(|_| err(format!("bad vertex count `{n}`")))?);
                in_vertex = true;
            }
            ["element", ..] => in_vertex = false,
            ["property", t, name] if in_vertex => {
                let size = type_size(t).ok_or_else(|| err(format!("unknown property type `{t}`")))?;
                props.push((name.to_string(), stride, *t == "float" || *t == "float32"));
                stride += size;
            }
            ["property", ..] => {}
            _ => return Err(err(format!("unexpected header line `{line}`"))),
        }
    }
    let count = count.ok_or_else(|| Error::Parse {
        offset: 0,
        reason: "no vertex element".into(),
    })?;
    let n_rest = props.iter().filter(|p| p.0.starts_with("f_rest_")).count();
    let degree = match degree {
        Some(d) => d,
        None => (0..=MAX_SH_DEGREE)
            .find(|&d| 3 * (sh_coeffs(d) - 1) == n_rest)
            .ok_or_else(|| Error::Parse {
                offset: 0,
                reason: format!("{n_rest} f_rest properties match no SH degree"),
            })?,
    };
    let mut slots = Vec::new();
    for name in ply_properties(degree) {
        let p = props.iter().find(|p| p.0 == name).ok_or_else(|| Error::Parse {
            offset: 0,
            reason: format!("missing property `{name}`"),
        })?;
        if !p.2 {
            return Err(Error::Parse {
                offset: 0,
                reason: format!("property `{name}` must be float"),
            });
        }
        slots.push(p.1);
    }
    let need = body + count * stride;
    if bytes.len() < need {
        return Err(Error::Parse {
            offset: bytes.len(),
            reason: format!("truncated: {count} vertices need {need} bytes"),
        });
    }
    let rest = sh_coeffs(degree) - 1;
    let mut primitives = Vec::with_capacity(count);
    for i in 0..count {
        let rec = body + i * stride;
        let v: Vec<f64> = slots
            .iter()
            .map(|&o| {
                let b = &bytes[rec + o..rec + o + 4];
                f32::from_le_bytes([b[0], b[1], b[2], b[3]]) as f64
            })
            .collect();
        let mut sh = vec![0.0; 3 * (rest + 1)];
        sh[0..3].copy_from_slice(&v[3..6]);
        for c in 0..3 {
            for k in 0..rest {
                sh[(k + 1) * 3 + c] = v[6 + c * rest + k];
            }
        }
        let o = 6 + 3 * rest;
        let q = [v[o + 4], v[o + 5], v[o + 6], v[o + 7]];
        let qn = quat_norm(q);
        primitives.push(GaussianPrimitive {
            mean: [v[0], v[1], v[2]],
            opacity: crate::numerics::sigmoid(v[o]),
            rotation: if qn > 0.0 { q.map(|x| x / qn) } else { [1.0, 0.0, 0.0, 0.0] },
            scale: [v[o + 1].exp(), v[o + 2].exp(), v[o + 3].exp()],
            sh,
        });
    }
    Ok(GaussianScene {
        primitives,
        sh_degree: degree,
        canonical_view: canonical,
    })
}

pub fn read_ply(path: &Path) -> Result<GaussianScene> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    parse_ply(&bytes)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::rng;
    use proptest::prelude::*;
    use rand::Rng;

    pub(crate) fn random_primitive<R: Rng>(r: &mut R, degree: usize) -> GaussianPrimitive {
        let q: [f64; 4] = std::array::from_fn(|_| r.random_range(-1.0..1.0));
        let n = quat_norm(q).max(1e-3);
        GaussianPrimitive {
            mean: std::array::from_fn(|_| r.random_range(-2.0..2.0)),
            opacity: r.random_range(0.01..1.0),
            rotation: q.map(|v| v / n),
            scale: std::array::from_fn(|_| r.random_range(0.01..2.0)),
            sh: (0..3 * sh_coeffs(degree)).map(|_| r.random_range(-1.0..1.0)).collect(),
        }
    }

    #[test]
    fn covariance_hand_cases() {
        let id = covariance([1.0, 0.0, 0.0, 0.0], [1.0, 1.0, 1.0]).unwrap();
        assert_eq!(id, [[1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [0.0, 0.0, 1.0]]);
        let d = covariance([1.0, 0.0, 0.0, 0.0], [2.0, 1.0, 1.0]).unwrap();
        assert_eq!(d, [[4.0, 0.0, 0.0], [0.0, 1.0, 0.0], [0.0, 0.0, 1.0]]);
        assert!(covariance([2.0, 0.0, 0.0, 0.0], [1.0; 3]).is_err());
    }

    #[test]
    fn sh_dc_constant() {
        for c in [-1.0, 0.0, 0.7] {
            let rgb = eval_sh(&[c, c, c], [0.0, 0.0, 1.0], 0).unwrap();
            assert!((rgb[0] - (c * 0.28209479177 + 0.5).clamp(0.0, 1.0)).abs() < 1e-9);
        }
        assert_eq!(eval_sh(&[0.0; 3], [1.0, 0.0, 0.0], 0).unwrap(), [0.5; 3]);
        assert!(eval_sh(&[0.0; 6], [1.0, 0.0, 0.0], 1).is_err());
    }

    #[test]
    fn sh_degree_one_along_z() {
        // Along +z only the DC and the z-linear term survive.
        let sh: Vec<f64> = (0..12).map(|i| 0.05 * i as f64 - 0.2).collect();
        let rgb = eval_sh_raw(&sh, [0.0, 0.0, 1.0], 1).unwrap();
        for c in 0..3 {
            let expect = 0.5 + SH_C0 * sh[c] + SH_C1 * sh[2 * 3 + c];
            assert!((rgb[c] - expect).abs() < 1e-12);
        }
    }

    #[test]
    fn ply_roundtrip() {
        let mut r = rng(11);
        let scene = GaussianScene {
            primitives: (0..100).map(|_| random_primitive(&mut r, 1)).collect(),
            sh_degree: 1,
            canonical_view: 0,
        };
        let back = parse_ply(&ply_bytes(&scene).unwrap()).unwrap();
        assert_eq!(back.len(), 100);
        for (a, b) in scene.primitives.iter().zip(&back.primitives) {
            let diffs = a
                .mean
                .iter()
                .zip(&b.mean)
                .chain(a.scale.iter().zip(&b.scale))
                .chain(a.rotation.iter().zip(&b.rotation))
                .chain(a.sh.iter().zip(&b.sh))
                .chain([(&a.opacity, &b.opacity)]);
            for (x, y) in diffs {
                assert!((x - y).abs() < 1e-6, "{x} vs {y}");
            }
        }
    }

    #[test]
    fn empty_and_malformed_ply() {
        let empty = GaussianScene::new(1);
        let bytes = ply_bytes(&empty).unwrap();
        assert!(parse_ply(&bytes).unwrap().is_empty());
        let text = String::from_utf8(bytes).unwrap().replace("property float rot_3\n", "");
        let err = parse_ply(text.as_bytes()).unwrap_err();
        assert!(matches!(err, Error::Parse { .. }));
        assert!(err.to_string().contains("rot_3"));
    }

    #[test]
    fn sh_basis_gradient_matches_differences() {
        let d = [0.3, -0.5, 0.7];
        let (_, grad) = sh_basis_grad(d, 3);
        let h = 1e-6;
        for axis in 0..3 {
            let mut hi = d;
            let mut lo = d;
            hi[axis] += h;
            lo[axis] -= h;
            let (bh, bl) = (sh_basis(hi, 3), sh_basis(lo, 3));
            for k in 0..16 {
                let fd = (bh[k] - bl[k]) / (2.0 * h);
                assert!((fd - grad[k][axis]).abs() < 1e-7, "basis {k} axis {axis}");
            }
        }
    }

    #[test]
    fn covariance_eigenvalues_are_squared_scales() {
        let mut r = rng(3);
        for _ in 0..50 {
            let p = random_primitive(&mut r, 0);
            let c = covariance(p.rotation, p.scale).unwrap();
            let m = nalgebra::Matrix3::from_fn(|i, j| c[i][j]);
            let mut eig: Vec<f64> = m.symmetric_eigen().eigenvalues.iter().copied().collect();
            let mut s2: Vec<f64> = p.scale.iter().map(|s| s * s).collect();
            eig.sort_by(f64::total_cmp);
            s2.sort_by(f64::total_cmp);
            for (a, b) in eig.iter().zip(&s2) {
                assert!((a - b).abs() < 1e-9, "{eig:?} vs {s2:?}");
            }
        }
    }

    #[test]
    fn quaternion_matrix_roundtrip() {
        let mut r = rng(4);
        for _ in 0..50 {
            let q = random_primitive(&mut r, 0).rotation;
            let back = matrix_to_quat(&quat_to_matrix(q));
            let sign = if q[0] < 0.0 { -1.0 } else { 1.0 };
            for (a, b) in back.iter().zip(q) {
                assert!((a - sign * b).abs() < 1e-9);
            }
        }
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(64))]
        #[test]
        fn covariance_is_psd_and_sign_invariant(seed in 0u64..10_000) {
            let mut r = rng(seed);
            let p = random_primitive(&mut r, 0);
            let a = covariance(p.rotation, p.scale).unwrap();
            let b = covariance(p.rotation.map(|v| -v), p.scale).unwrap();
            for i in 0..3 {
                for j in 0..3 {
                    prop_assert!((a[i][j] - b[i][j]).abs() < 1e-12);
                    prop_assert!((a[i][j] - a[j][i]).abs() < 1e-12);
                }
            }
            // Quadratic form on random vectors stays positive.
            for _ in 0..8 {
                let v: [f64; 3] = std::array::from_fn(|_| r.random_range(-1.0..1.0));
                let q: f64 = (0..3).map(|i| (0..3).map(|j| v[i] * a[i][j] * v[j]).sum::<f64>()).sum();
                prop_assert!(q > 0.0);
            }
        }

        #[test]
        fn dc_only_is_direction_independent(seed in 0u64..10_000) {
            let mut r = rng(seed);
            let sh: Vec<f64> = (0..3).map(|_| r.random_range(-2.0..2.0)).collect();
            let first = eval_sh(&sh, [0.0, 0.0, 1.0], 0).unwrap();
            let d: [f64; 3] = std::array::from_fn(|_| r.random_range(-1.0..1.0));
            let n = d.iter().map(|v| v * v).sum::<f64>().sqrt().max(1e-6);
            prop_assert_eq!(eval_sh(&sh, d.map(|v| v / n), 0).unwrap(), first);
        }
    }
}
