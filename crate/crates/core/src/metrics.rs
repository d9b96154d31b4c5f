//! Evaluation metrics: prompt similarity, edit-direction similarity, the
//! cross-view local feature distance, and wall-clock accounting.

use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::consistency::{lefl, LossConfig};
use crate::error::{Error, Result};
use crate::numerics::Tensor;
use crate::perception::{cosine, localize, Embedder};

/// Image-delta norms below this make the directional cosine undefined.
pub const DIRECTION_EPS: f64 = 1e-8;

/// Mean cosine between the prompt embedding and each view's whole-image
/// embedding.
pub fn clip_sim(views: &[Tensor], target_prompt: &str, embedder: &dyn Embedder) -> Result<f64> {
    if views.is_empty() {
        return Err(Error::Argument("clip_sim needs at least one view".into()));
    }
    let text = embedder.embed_text(target_prompt)?;
    let mut total = 0.0;
    for v in views {
        total += cosine(&text, &embedder.embed_image(v)?);
    }
    Ok(total / views.len() as f64)
}

/// Directional similarity with its undefined flag.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Directional {
    pub value: f64,
    /// Set when any view pair had a vanishing image delta and contributed 0.
    pub undefined: bool,
}

/// Mean cosine between `E(T1) − E(T0)` and `E(I) − E(I_orig)` per view.
pub fn clip_dir(
    views: &[Tensor],
    originals: &[Tensor],
    source_prompt: &str,
    target_prompt: &str,
    embedder: &dyn Embedder,
) -> Result<Directional> {
    if views.len() != originals.len() {
        return Err(Error::Argument(format!(
            "{} edited views but {} originals",
            views.len(),
            originals.len()
        )));
    }
    if views.is_empty() {
        return Err(Error::Argument("clip_dir needs at least one view".into()));
    }
    let vt = embedder.embed_text(target_prompt)?.sub(&embedder.embed_text(source_prompt)?)?;
    let mut total = 0.0;
    let mut undefined = false;
    for (v, o) in views.iter().zip(originals) {
        let vi = embedder.embed_image(v)?.sub(&embedder.embed_image(o)?)?;
        if vi.sq_norm().sqrt() < DIRECTION_EPS {
            undefined = true;
            continue;
        }
        total += cosine(&vt, &vi);
    }
    Ok(Directional {
        value: total / views.len() as f64,
        undefined,
    })
}

/// The local editing-feature loss used as a distance: localize on the
/// pre-edit pair, compare the localized cells of the edited pair.
pub fn lefl_metric(
    edited: (&Tensor, &Tensor),
    original: (&Tensor, &Tensor),
    prompt: &str,
    embedder: &dyn Embedder,
    cfg: &LossConfig,
) -> Result<f64> {
    let loc = localize(
        original.0,
        original.1,
        prompt,
        embedder,
        cfg.localization_patch,
        cfg.confidence_threshold,
    )?;
    lefl(edited.0, edited.1, &loc, embedder, cfg)
}

/// Per-phase wall-clock time of one pipeline run, in milliseconds.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct WallClock {
    pub edit_ms: f64,
    pub lift_ms: f64,
    pub render_ms: f64,
    pub total_ms: f64,
}

/// Monotonic phase timer behind [`WallClock`].
pub struct PhaseTimer {
    start: Instant,
    clock: WallClock,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Phase {
    Edit,
    Lift,
    Render,
}

impl Default for PhaseTimer {
    fn default() -> Self {
        Self::new()
    }
}

impl PhaseTimer {
    pub fn new() -> Self {
        Self {
            start: Instant::now(),
            clock: WallClock::default(),
        }
    }

    /// Runs `f`, charging its duration to `phase`.
    pub fn time<T>(&mut self, phase: Phase, f: impl FnOnce() -> T) -> T {
        let t0 = Instant::now();
        let out = f();
        let ms = t0.elapsed().as_secs_f64() * 1e3;
        match phase {
            Phase::Edit => self.clock.edit_ms += ms,
            Phase::Lift => self.clock.lift_ms += ms,
            Phase::Render => self.clock.render_ms += ms,
        }
        out
    }

    pub fn finish(mut self) -> WallClock {
        self.clock.total_ms = self.start.elapsed().as_secs_f64() * 1e3;
        self.clock
    }
}

/// Times one instrumented run.
pub fn time_pipeline<T>(run: impl FnOnce(&mut PhaseTimer) -> T) -> (T, WallClock) {
    let mut timer = PhaseTimer::new();
    let out = run(&mut timer);
    (out, timer.finish())
}

/// Scores of one edited scene. Timing is kept out of [`MetricReport`] so
/// the report is reproducible byte for byte.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub clip_sim: f64,
    pub clip_dir: f64,
    pub clip_dir_undefined: bool,
    pub lefl_distance: f64,
    /// Number of views the similarity means run over.
    pub views: usize,
    pub resize_filter: String,
}

/// Arithmetic mean of every field; the undefined flag is sticky.
pub fn aggregate(reports: &[MetricReport]) -> Result<MetricReport> {
    let n = reports.len();
    if n == 0 {
        return Err(Error::Argument("no reports to aggregate".into()));
    }
    let mean = |f: fn(&MetricReport) -> f64| reports.iter().map(f).sum::<f64>() / n as f64;
    Ok(MetricReport {
        clip_sim: mean(|r| r.clip_sim),
        clip_dir: mean(|r| r.clip_dir),
        clip_dir_undefined: reports.iter().any(|r| r.clip_dir_undefined),
        lefl_distance: mean(|r| r.lefl_distance),
        views: reports.iter().map(|r| r.views).sum(),
        resize_filter: reports[0].resize_filter.clone(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::imaging;
    use crate::numerics::rng;
    use crate::perception::toy_color_embedder;
    use crate::vocab;

    /// Embedder with fixed vectors, for exact cosine cases.
    struct Fixed {
        text: Vec<(&'static str, Tensor)>,
        rotation: Option<Tensor>,
    }

    impl Fixed {
        fn rot(&self, v: Tensor) -> Tensor {
            match &self.rotation {
                Some(r) => {
                    let n = v.numel();
                    r.matmul(&v.reshape(&[n, 1]).unwrap()).unwrap().reshape(&[n]).unwrap()
                }
                None => v,
            }
        }
    }

    impl Embedder for Fixed {
        fn name(&self) -> &str {
            "fixed"
        }
        fn dim(&self) -> usize {
            3
        }
        fn embed_text(&self, prompt: &str) -> Result<Tensor> {
            let t = self.text.iter().find(|(p, _)| *p == prompt).map(|(_, t)| t.clone());
            Ok(self.rot(t.ok_or_else(|| Error::Perception(prompt.into()))?))
        }
        fn embed_patch(&self, patch: &Tensor) -> Result<Tensor> {
            self.embed_image(patch)
        }
        fn dense_features(&self, image: &Tensor, _patch: usize) -> Result<Tensor> {
            Ok(self.embed_image(image)?.reshape(&[1, 1, 3])?)
        }
        fn embed_image(&self, image: &Tensor) -> Result<Tensor> {
            // The mean pixel is the embedding.
            let (h, w) = imaging::dims(image);
            let mut v = [0.0; 3];
            for y in 0..h {
                for x in 0..w {
                    let p = imaging::pixel(image, y, x);
                    for c in 0..3 {
                        v[c] += p[c] / (h * w) as f64;
                    }
                }
            }
            Ok(self.rot(Tensor::from_vec(&[3], v.to_vec())))
        }
    }

    fn fixed(rotation: Option<Tensor>) -> Fixed {
        Fixed {
            text: vec![
                ("x", Tensor::from_vec(&[3], vec![1.0, 0.0, 0.0])),
                ("y", Tensor::from_vec(&[3], vec![0.0, 1.0, 0.0])),
            ],
            rotation,
        }
    }

    #[test]
    fn clip_sim_cases() {
        let e = fixed(None);
        let along = imaging::solid(2, 2, [0.5, 0.0, 0.0]);
        assert!((clip_sim(std::slice::from_ref(&along), "x", &e).unwrap() - 1.0).abs() < 1e-12);
        assert!(clip_sim(std::slice::from_ref(&along), "y", &e).unwrap().abs() < 1e-12);
        assert!(clip_sim(&[], "x", &e).is_err());

        let toy = toy_color_embedder();
        let mut r = rng(1);
        let views: Vec<Tensor> = (0..4).map(|_| Tensor::uniform(&[16, 16, 3], 0.0, 1.0, &mut r)).collect();
        let text = toy.embed_text("turn the cube red").unwrap();
        let manual: f64 = views.iter().map(|v| cosine(&text, &toy.embed_image(v).unwrap())).sum::<f64>() / 4.0;
        let got = clip_sim(&views, "turn the cube red", &toy).unwrap();
        assert!((got - manual).abs() < 1e-12);
    }

    #[test]
    fn clip_dir_cases() {
        let e = fixed(None);
        let orig = imaging::solid(2, 2, [0.0, 0.5, 0.0]);
        let same = clip_dir(std::slice::from_ref(&orig), std::slice::from_ref(&orig), "y", "x", &e).unwrap();
        assert_eq!(same, Directional { value: 0.0, undefined: true });
        // Image moves by (+0.5, −0.5, 0), parallel to x − y.
        let edited = imaging::solid(2, 2, [0.5, 0.0, 0.0]);
        let d = clip_dir(&[edited], &[orig.clone()], "y", "x", &e).unwrap();
        assert!((d.value - 1.0).abs() < 1e-12 && !d.undefined);
        assert!(clip_dir(&[], std::slice::from_ref(&orig), "y", "x", &e).is_err());
    }

    #[test]
    fn recolor_moves_along_prompt_axis() {
        // Solid red→blue images under the toy embedder: the image delta and
        // the prompt delta are both prototype differences.
        let toy = toy_color_embedder();
        let red = vocab::color_rgb("red").unwrap();
        let blue = vocab::color_rgb("blue").unwrap();
        let before = imaging::solid(16, 16, red);
        let after = imaging::solid(16, 16, blue);
        let d = clip_dir(&[after], &[before], "red", "blue", &toy).unwrap();
        assert!((d.value - 1.0).abs() < 1e-6, "{}", d.value);
    }

    #[test]
    fn cosines_ignore_joint_rotation() {
        let rot = crate::rasterizer::axis_angle([0.2, 0.9, -0.4], 1.1).unwrap();
        let rt = Tensor::from_vec(&[3, 3], rot.iter().flatten().copied().collect());
        let (a, b) = (fixed(None), fixed(Some(rt)));
        let mut r = rng(2);
        let views: Vec<Tensor> = (0..3).map(|_| Tensor::uniform(&[4, 4, 3], 0.0, 1.0, &mut r)).collect();
        let origs: Vec<Tensor> = (0..3).map(|_| Tensor::uniform(&[4, 4, 3], 0.0, 1.0, &mut r)).collect();
        let s = (clip_sim(&views, "x", &a).unwrap(), clip_sim(&views, "x", &b).unwrap());
        assert!((s.0 - s.1).abs() < 1e-12);
        let d = (
            clip_dir(&views, &origs, "y", "x", &a).unwrap().value,
            clip_dir(&views, &origs, "y", "x", &b).unwrap().value,
        );
        assert!((d.0 - d.1).abs() < 1e-12);
    }

    fn scene_pair(seed: u64) -> (Tensor, Tensor) {
        let mut r = rng(seed);
        let mut a = Tensor::uniform(&[32, 32, 3], 0.3, 0.7, &mut r);
        let mut b = Tensor::uniform(&[32, 32, 3], 0.3, 0.7, &mut r);
        let blue = vocab::color_rgb("blue").unwrap();
        for y in 2..10 {
            for x in 4..12 {
                imaging::set_pixel(&mut a, y, x, blue);
                imaging::set_pixel(&mut b, y + 16, x + 16, blue);
            }
        }
        (a, b)
    }

    #[test]
    fn lefl_metric_matches_loss_and_symmetry() {
        let toy = toy_color_embedder();
        let cfg = LossConfig::toy();
        let (a, b) = scene_pair(3);
        let mut r = rng(4);
        let ea = Tensor::uniform(&[32, 32, 3], 0.0, 1.0, &mut r);
        let eb = Tensor::uniform(&[32, 32, 3], 0.0, 1.0, &mut r);
        let prompt = "turn the cube red";
        let m = lefl_metric((&ea, &eb), (&a, &b), prompt, &toy, &cfg).unwrap();
        let loc = localize(&a, &b, prompt, &toy, cfg.localization_patch, cfg.confidence_threshold).unwrap();
        let direct = lefl(&ea, &eb, &loc, &toy, &cfg).unwrap();
        assert!((m - direct).abs() < 1e-12);
        let swapped = lefl_metric((&eb, &ea), (&b, &a), prompt, &toy, &cfg).unwrap();
        assert!((m - swapped).abs() < 1e-12);
        assert_eq!(lefl_metric((&ea, &ea), (&a, &a), prompt, &toy, &cfg).unwrap(), 0.0);
    }

    #[test]
    fn phases_sum_to_total() {
        let (_, clock) = time_pipeline(|t| {
            t.time(Phase::Edit, || std::thread::sleep(std::time::Duration::from_millis(3)));
            t.time(Phase::Lift, || std::thread::sleep(std::time::Duration::from_millis(2)));
            t.time(Phase::Render, || std::thread::sleep(std::time::Duration::from_millis(1)));
        });
        let parts = clock.edit_ms + clock.lift_ms + clock.render_ms;
        assert!(clock.edit_ms > 0.0);
        assert!((clock.total_ms - parts).abs() < 5.0);
    }

    #[test]
    fn aggregate_is_exact_mean() {
        let mk = |s: f64, u: bool| MetricReport {
            clip_sim: s,
            clip_dir: -s,
            clip_dir_undefined: u,
            lefl_distance: 2.0 * s,
            views: 4,
            resize_filter: "bilinear".into(),
        };
        let agg = aggregate(&[mk(0.2, false), mk(0.4, true)]).unwrap();
        assert!((agg.clip_sim - 0.3).abs() < 1e-15);
        assert!((agg.lefl_distance - 0.6).abs() < 1e-15);
        assert!(agg.clip_dir_undefined);
        assert_eq!(agg.views, 8);
    }
}
