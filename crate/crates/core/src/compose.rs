//! Composite image formation: a projector layer warped onto a physical scene
//! by a homography and added as albedo-modulated light.
//!
//! For a camera pixel `x` inside the warped projector quad,
//!
//! ```text
//! composite(x) = clamp(S(x) + gain * S(x) * P^gamma(H^-1 x), 0, 1)
//! ```
//!
//! and `composite(x) = S(x)` everywhere else. The ground-truth mask is the
//! rasterized quad itself, not the silhouette of the projected content.

use nalgebra::{Matrix3, SMatrix, SVector};
use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::config::{BlendRanges, SceneEntry, SourceEntry, SynthConfig};
use crate::error::{ProcapError, Result};
use crate::image::{BinaryMask, Image};

const MIN_DET: f64 = 1e-9;

/// Physical-scene layer.
#[derive(Clone, Debug, PartialEq)]
pub struct SceneSpec {
    pub scene_id: String,
    pub scene_image: Image,
    pub scene_captions: Vec<String>,
}

/// Projector source layer.
#[derive(Clone, Debug, PartialEq)]
pub struct ProjectionSpec {
    pub source_id: String,
    pub source_image: Image,
    pub source_captions: Vec<String>,
    /// Object name stored in the knowledge base for this source.
    pub object_name: String,
}

/// Projector-to-camera homography (row-major 3x3).
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Homography(pub [f64; 9]);

impl Homography {
    pub fn identity() -> Self {
        Self([1.0, 0.0, 0.0, 0.0, 1.0, 0.0, 0.0, 0.0, 1.0])
    }

    fn matrix(&self) -> Matrix3<f64> {
        Matrix3::from_row_slice(&self.0)
    }

    pub fn determinant(&self) -> f64 {
        self.matrix().determinant()
    }

    pub fn inverse(&self) -> Result<Homography> {
        let det = self.determinant();
        if !det.is_finite() || det.abs() <= MIN_DET {
            return Err(ProcapError::NonInvertibleHomography(det.abs()));
        }
        let inv = self.matrix().try_inverse().ok_or(ProcapError::NonInvertibleHomography(det.abs()))?;
        let mut out = [0.0; 9];
        for r in 0..3 {
            for c in 0..3 {
                out[r * 3 + c] = inv[(r, c)];
            }
        }
        Ok(Homography(out))
    }

    /// Map a point; `None` when it lands on or behind the line at infinity.
    pub fn apply(&self, x: f64, y: f64) -> Option<(f64, f64)> {
        let h = &self.0;
        let w = h[6] * x + h[7] * y + h[8];
        if w <= 1e-12 {
            return None;
        }
        Some(((h[0] * x + h[1] * y + h[2]) / w, (h[3] * x + h[4] * y + h[5]) / w))
    }

    /// Homography sending each `src[i]` to `dst[i]` (direct linear transform).
    pub fn from_correspondences(src: &[(f64, f64); 4], dst: &[(f64, f64); 4]) -> Result<Self> {
        let mut a = SMatrix::<f64, 8, 8>::zeros();
        let mut b = SVector::<f64, 8>::zeros();
        for i in 0..4 {
            let ((x, y), (u, v)) = (src[i], dst[i]);
            let r = 2 * i;
            a.row_mut(r).copy_from_slice(&[x, y, 1.0, 0.0, 0.0, 0.0, -u * x, -u * y]);
            a.row_mut(r + 1).copy_from_slice(&[0.0, 0.0, 0.0, x, y, 1.0, -v * x, -v * y]);
            b[r] = u;
            b[r + 1] = v;
        }
        let sol = a.lu().solve(&b).ok_or(ProcapError::NonInvertibleHomography(0.0))?;
        let mut h = [0.0; 9];
        h[..8].copy_from_slice(sol.as_slice());
        h[8] = 1.0;
        let hom = Homography(h);
        hom.inverse()?;
        Ok(hom)
    }
}

/// Concrete parameters of the blend operator.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct BlendParams {
    pub homography: Homography,
    pub gain: [f64; 3],
    pub projector_gamma: f64,
    pub noise_sigma: f64,
}

impl BlendParams {
    pub fn validate(&self) -> Result<()> {
        self.homography.inverse()?;
        if !self.gain.iter().all(|g| g.is_finite() && *g >= 0.0) {
            return Err(ProcapError::SchemaViolation(format!("gain must be finite and >= 0: {:?}", self.gain)));
        }
        if !(self.projector_gamma > 0.0 && self.projector_gamma.is_finite()) {
            return Err(ProcapError::SchemaViolation(format!("gamma must be > 0: {}", self.projector_gamma)));
        }
        if !(self.noise_sigma >= 0.0 && self.noise_sigma.is_finite()) {
            return Err(ProcapError::SchemaViolation(format!("noise_sigma must be >= 0: {}", self.noise_sigma)));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Eval,
}

/// One composite observation.
#[derive(Clone, Debug, PartialEq)]
pub struct SarSample {
    pub sample_id: String,
    pub scene_id: String,
    pub source_id: String,
    pub composite_image: Image,
    pub gt_mask_pixel: BinaryMask,
    pub blend: BlendParams,
    pub split: Split,
}

/// Camera pixels whose centre back-projects inside the `src_h x src_w`
/// projector frame.
pub fn warped_mask(canvas: [usize; 2], src_dims: [usize; 2], homography: &Homography) -> Result<BinaryMask> {
    let inv = homography.inverse()?;
    let (sh, sw) = (src_dims[0] as f64, src_dims[1] as f64);
    Ok(BinaryMask::from_fn(canvas[0], canvas[1], |y, x| {
        inv.apply(x as f64 + 0.5, y as f64 + 0.5).is_some_and(|(u, v)| (0.0..sw).contains(&u) && (0.0..sh).contains(&v))
    }))
}

/// Blend `proj` onto `scene`. `rng` is drawn from only when
/// `blend.noise_sigma > 0`; noise is confined to the projected region.
pub fn compose(scene: &SceneSpec, proj: &ProjectionSpec, blend: &BlendParams, rng: &mut impl Rng) -> Result<SarSample> {
    blend.validate()?;
    let s = &scene.scene_image;
    let p = &proj.source_image;
    if !s.is_valid() || !p.is_valid() {
        return Err(ProcapError::DimensionMismatch("image values must lie in [0, 1]".into()));
    }
    if s.height() == 0 || s.width() == 0 || p.height() == 0 || p.width() == 0 {
        return Err(ProcapError::DimensionMismatch("empty image".into()));
    }
    let inv = blend.homography.inverse()?;
    let mask = warped_mask(s.dims(), p.dims(), &blend.homography)?;
    let gamma = blend.projector_gamma;
    let powered = Image::from_fn(p.height(), p.width(), |y, x| p.pixel(y, x).map(|v| v.powf(gamma)));
    let noise = (blend.noise_sigma > 0.0).then(|| Normal::new(0.0, blend.noise_sigma).expect("sigma > 0"));

    let mut out = s.clone();
    for y in 0..s.height() {
        for x in 0..s.width() {
            if !mask.get(y, x) {
                continue;
            }
            let (u, v) = inv.apply(x as f64 + 0.5, y as f64 + 0.5).expect("inside mask");
            let light = powered.sample_bilinear(u, v);
            let base = s.pixel(y, x);
            let mut px = [0.0; 3];
            for k in 0..3 {
                px[k] = (base[k] + blend.gain[k] * base[k] * light[k]).clamp(0.0, 1.0);
            }
            if let Some(n) = &noise {
                for v in &mut px {
                    *v = (*v + n.sample(rng)).clamp(0.0, 1.0);
                }
            }
            out.set(y, x, px);
        }
    }
    Ok(SarSample {
        sample_id: format!("{}__{}", scene.scene_id, proj.source_id),
        scene_id: scene.scene_id.clone(),
        source_id: proj.source_id.clone(),
        composite_image: out,
        gt_mask_pixel: mask,
        blend: *blend,
        split: Split::Train,
    })
}

/// Draw blend parameters: a jittered quad covering part of the canvas, plus
/// photometric settings from `ranges`.
pub fn random_blend(canvas: [usize; 2], src_dims: [usize; 2], ranges: &BlendRanges, rng: &mut impl Rng) -> Result<BlendParams> {
    let (ch, cw) = (canvas[0] as f64, canvas[1] as f64);
    let mut draw = |r: [f64; 2]| if r[1] > r[0] { rng.random_range(r[0]..r[1]) } else { r[0] };
    let side_h = draw(ranges.coverage) * ch;
    let side_w = draw(ranges.coverage) * cw;
    let cy = draw([side_h / 2.0, ch - side_h / 2.0]);
    let cx = draw([side_w / 2.0, cw - side_w / 2.0]);
    let j = ranges.corner_jitter;
    let mut corners = [(0.0, 0.0); 4];
    for (i, (sx, sy)) in [(-1.0, -1.0), (1.0, -1.0), (1.0, 1.0), (-1.0, 1.0)].into_iter().enumerate() {
        let jx = draw([-j, j]) * side_w;
        let jy = draw([-j, j]) * side_h;
        let x = (cx + sx * side_w / 2.0 + jx).clamp(0.0, cw);
        let y = (cy + sy * side_h / 2.0 + jy).clamp(0.0, ch);
        corners[i] = (x, y);
    }
    let (sh, sw) = (src_dims[0] as f64, src_dims[1] as f64);
    let src = [(0.0, 0.0), (sw, 0.0), (sw, sh), (0.0, sh)];
    let homography = Homography::from_correspondences(&src, &corners)?;
    let gain = [draw(ranges.gain), draw(ranges.gain), draw(ranges.gain)];
    let projector_gamma = draw(ranges.gamma);
    let noise_sigma = draw(ranges.noise_sigma);
    Ok(BlendParams { homography, gain, projector_gamma, noise_sigma })
}

/// Procedural image used by the built-in corpus and by configs without PNGs.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum Pattern {
    Solid { color: [f64; 3] },
    Stripes { colors: [[f64; 3]; 2], period: usize, vertical: bool },
    Checker { colors: [[f64; 3]; 2], cell: usize },
    Gradient { colors: [[f64; 3]; 2] },
    Bricks { mortar: [f64; 3], brick: [f64; 3], brick_w: usize, brick_h: usize },
    Shape { shape: ShapeKind, fg: [f64; 3], bg: [f64; 3] },
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ShapeKind {
    Circle,
    Square,
    Triangle,
    Cross,
    Ring,
    Diamond,
    Star,
    Bar,
}

impl ShapeKind {
    /// Membership test in normalized coordinates `(u, v) in [-1, 1]^2`.
    fn contains(self, u: f64, v: f64) -> bool {
        let r = (u * u + v * v).sqrt();
        match self {
            ShapeKind::Circle => r < 0.7,
            ShapeKind::Square => u.abs() < 0.6 && v.abs() < 0.6,
            ShapeKind::Triangle => v < 0.6 && v > -0.7 && u.abs() < (v + 0.7) * 0.55,
            ShapeKind::Cross => (u.abs() < 0.2 && v.abs() < 0.75) || (v.abs() < 0.2 && u.abs() < 0.75),
            ShapeKind::Ring => r < 0.75 && r > 0.45,
            ShapeKind::Diamond => u.abs() + v.abs() < 0.8,
            ShapeKind::Star => {
                let theta = v.atan2(u);
                r < 0.35 + 0.4 * (0.5 + 0.5 * (5.0 * theta).cos()).powi(2)
            }
            ShapeKind::Bar => v.abs() < 0.25 && u.abs() < 0.85,
        }
    }
}

impl Pattern {
    pub fn render(&self, height: usize, width: usize) -> Image {
        Image::from_fn(height, width, |y, x| match self {
            Pattern::Solid { color } => *color,
            Pattern::Stripes { colors, period, vertical } => {
                let t = if *vertical { x } else { y };
                colors[(t / (*period).max(1)) % 2]
            }
            Pattern::Checker { colors, cell } => {
                let c = (*cell).max(1);
                colors[(y / c + x / c) % 2]
            }
            Pattern::Gradient { colors } => {
                let t = (y as f64 + x as f64) / ((height + width).saturating_sub(2).max(1)) as f64;
                std::array::from_fn(|k| colors[0][k] * (1.0 - t) + colors[1][k] * t)
            }
            Pattern::Bricks { mortar, brick, brick_w, brick_h } => {
                let (bw, bh) = ((*brick_w).max(2), (*brick_h).max(2));
                let row = y / bh;
                let off = if row % 2 == 1 { bw / 2 } else { 0 };
                if y % bh == 0 || (x + off) % bw == 0 {
                    *mortar
                } else {
                    *brick
                }
            }
            Pattern::Shape { shape, fg, bg } => {
                let u = (x as f64 + 0.5) / width as f64 * 2.0 - 1.0;
                let v = (y as f64 + 0.5) / height as f64 * 2.0 - 1.0;
                if shape.contains(u, v) {
                    *fg
                } else {
                    *bg
                }
            }
        })
    }
}

/// Built-in desk-scale corpus: up to 4 textured scenes and 8 projected shapes,
/// one caption each.
pub fn builtin_corpus(n_scenes: usize, n_sources: usize) -> SynthConfig {
    let scenes = [
        (
            "living_room",
            "a wooden table in a living room",
            Pattern::Stripes { colors: [[0.55, 0.38, 0.22], [0.42, 0.28, 0.16]], period: 3, vertical: true },
        ),
        (
            "kitchen",
            "a green tiled floor in a kitchen",
            Pattern::Checker { colors: [[0.30, 0.55, 0.32], [0.78, 0.80, 0.76]], cell: 6 },
        ),
        (
            "garden",
            "a red brick wall in a garden",
            Pattern::Bricks { mortar: [0.75, 0.72, 0.68], brick: [0.58, 0.22, 0.18], brick_w: 12, brick_h: 6 },
        ),
        ("office", "a gray sofa in a quiet office", Pattern::Gradient { colors: [[0.35, 0.38, 0.42], [0.70, 0.72, 0.75]] }),
    ];
    let bg = [0.30, 0.30, 0.30];
    let sources = [
        ("red_circle", "circle", "a projected red circle", ShapeKind::Circle, [0.95, 0.15, 0.10]),
        ("blue_square", "square", "a projected blue square", ShapeKind::Square, [0.15, 0.30, 0.95]),
        ("yellow_star", "star", "a projected yellow star", ShapeKind::Star, [0.95, 0.90, 0.15]),
        ("green_triangle", "triangle", "a projected green triangle", ShapeKind::Triangle, [0.15, 0.90, 0.25]),
        ("white_cross", "cross", "a projected white cross", ShapeKind::Cross, [0.97, 0.97, 0.97]),
        ("orange_ring", "ring", "a projected orange ring", ShapeKind::Ring, [0.98, 0.55, 0.10]),
        ("purple_diamond", "diamond", "a projected purple diamond", ShapeKind::Diamond, [0.65, 0.20, 0.90]),
        ("cyan_bar", "bar", "a projected cyan bar", ShapeKind::Bar, [0.10, 0.90, 0.90]),
    ];
    SynthConfig {
        canvas: [64, 64],
        scenes: scenes
            .into_iter()
            .take(n_scenes)
            .map(|(id, cap, pattern)| SceneEntry {
                id: id.into(),
                captions: vec![cap.into()],
                image: None,
                pattern: Some(pattern),
            })
            .collect(),
        sources: sources
            .into_iter()
            .take(n_sources)
            .map(|(id, name, cap, shape, fg)| SourceEntry {
                id: id.into(),
                captions: vec![cap.into()],
                name: name.into(),
                image: None,
                pattern: Some(Pattern::Shape { shape, fg, bg }),
            })
            .collect(),
        draws_per_pair: 1,
        eval_fraction: 0.25,
        blend: BlendRanges::default(),
    }
}
