//! Visual front end: frozen patch encoder, transposed-convolution refinement,
//! projection segmentation head, and mask pooling.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::autograd::{Graph, Var};
use crate::error::{ProcapError, Result};
use crate::image::{BinaryMask, Image};
use crate::params::{normal_init, ParamId, ParamStore};
use crate::tensor::{gemm, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Resolution {
    Coarse,
    Refined,
}

/// `Hf x Wf x C` feature grid.
#[derive(Clone, Debug, PartialEq)]
pub struct FeatureGrid {
    pub grid: Tensor,
    pub resolution: Resolution,
}

impl FeatureGrid {
    pub fn dims(&self) -> [usize; 3] {
        let s = self.grid.shape();
        [s[0], s[1], s[2]]
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum MaskKind {
    Predicted,
    Target,
    Binary,
}

/// `Hf x Wf` map with values in `[0, 1]`.
#[derive(Clone, Debug, PartialEq)]
pub struct MaskGrid {
    pub grid: Tensor,
    pub kind: MaskKind,
}

impl MaskGrid {
    pub fn new(grid: Tensor, kind: MaskKind) -> Result<Self> {
        if grid.shape().len() != 2 {
            return Err(ProcapError::DimensionMismatch(format!("mask grid must be 2-D, got {:?}", grid.shape())));
        }
        let ok = match kind {
            MaskKind::Binary => grid.data().iter().all(|&v| v == 0.0 || v == 1.0),
            _ => grid.data().iter().all(|v| (0.0..=1.0).contains(v)),
        };
        if !ok {
            return Err(ProcapError::NonFinite(format!("{kind:?} mask values out of range")));
        }
        Ok(Self { grid, kind })
    }

    pub fn ones(h: usize, w: usize) -> Self {
        Self { grid: Tensor::full(&[h, w], 1.0), kind: MaskKind::Binary }
    }

    pub fn dims(&self) -> [usize; 2] {
        [self.grid.shape()[0], self.grid.shape()[1]]
    }

    /// Threshold at `t` (values `>= t` become 1).
    pub fn binarize(&self, t: f64) -> MaskGrid {
        MaskGrid { grid: self.grid.map(|v| if v >= t { 1.0 } else { 0.0 }), kind: MaskKind::Binary }
    }
}

/// Frozen patch embedding: a seeded random linear map of each flattened
/// patch plus a fixed 2-D sinusoidal position table. Never trained.
#[derive(Clone, Debug)]
pub struct FrozenEncoder {
    patch: usize,
    dim: usize,
    grid: [usize; 2],
    weight: Tensor,
    positions: Tensor,
}

impl FrozenEncoder {
    pub fn new(canvas: [usize; 2], patch: usize, dim: usize, seed: u64) -> Self {
        let fan_in = patch * patch * 3;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let weight = normal_init(&[fan_in, dim], 1.0 / (fan_in as f64).sqrt(), &mut rng);
        let grid = [canvas[0] / patch, canvas[1] / patch];
        Self { patch, dim, grid, weight, positions: sinusoidal_2d(grid[0], grid[1], dim) }
    }

    pub fn positions(&self) -> &Tensor {
        &self.positions
    }

    pub fn patch_size(&self) -> usize {
        self.patch
    }

    pub fn encode(&self, image: &Image) -> Result<FeatureGrid> {
        let [h, w] = image.dims();
        if h % self.patch != 0 || w % self.patch != 0 || [h / self.patch, w / self.patch] != self.grid {
            return Err(ProcapError::DimensionMismatch(format!(
                "image {h}x{w} does not tile into the encoder's {:?} grid of {}-pixel patches",
                self.grid, self.patch
            )));
        }
        let [gh, gw] = self.grid;
        let fan_in = self.patch * self.patch * 3;
        let mut patches = vec![0.0; gh * gw * fan_in];
        for gy in 0..gh {
            for gx in 0..gw {
                let base = (gy * gw + gx) * fan_in;
                let mut k = 0;
                for py in 0..self.patch {
                    for px in 0..self.patch {
                        let p = image.pixel(gy * self.patch + py, gx * self.patch + px);
                        patches[base + k..base + k + 3].copy_from_slice(&p);
                        k += 3;
                    }
                }
            }
        }
        let mut out = self.positions.data().to_vec();
        gemm(gh * gw, fan_in, self.dim, &patches, false, self.weight.data(), false, &mut out, true);
        Ok(FeatureGrid { grid: Tensor::from_vec(&[gh, gw, self.dim], out), resolution: Resolution::Coarse })
    }
}

/// Half of the channels encode the row, half the column.
fn sinusoidal_2d(h: usize, w: usize, dim: usize) -> Tensor {
    let half = dim / 2;
    let mut t = vec![0.0; h * w * dim];
    for y in 0..h {
        for x in 0..w {
            let base = (y * w + x) * dim;
            for (offset, pos) in [(0, y), (half, x)] {
                for i in 0..half / 2 {
                    let freq = 1.0 / 10000f64.powf(2.0 * i as f64 / half as f64);
                    t[base + offset + 2 * i] = (pos as f64 * freq).sin();
                    t[base + offset + 2 * i + 1] = (pos as f64 * freq).cos();
                }
            }
        }
    }
    Tensor::from_vec(&[h, w, dim], t)
}

/// Two stride-2 transposed convolutions (kernel 4, padding 1) with a GELU
/// between them: `(s, s, C) -> (4s, 4s, C_r)`.
#[derive(Clone, Debug)]
pub struct Refiner {
    pub w1: ParamId,
    pub b1: ParamId,
    pub w2: ParamId,
    pub b2: ParamId,
}

impl Refiner {
    pub fn new(store: &mut ParamStore, prefix: &str, in_ch: usize, hidden: usize, out_ch: usize, rng: &mut ChaCha8Rng) -> Self {
        let std1 = 1.0 / ((in_ch * 4) as f64).sqrt();
        let std2 = 1.0 / ((hidden * 4) as f64).sqrt();
        Self {
            w1: store.register(format!("{prefix}.w1"), normal_init(&[in_ch, 4, 4, hidden], std1, rng)),
            b1: store.register(format!("{prefix}.b1"), Tensor::zeros(&[hidden])),
            w2: store.register(format!("{prefix}.w2"), normal_init(&[hidden, 4, 4, out_ch], std2, rng)),
            b2: store.register(format!("{prefix}.b2"), Tensor::zeros(&[out_ch])),
        }
    }

    pub fn forward(&self, g: &mut Graph, coarse: Var) -> Var {
        let (w1, b1, w2, b2) = (g.param(self.w1), g.param(self.b1), g.param(self.w2), g.param(self.b2));
        let h = g.conv_transpose4x4(coarse, w1, b1);
        let h = g.gelu(h);
        g.conv_transpose4x4(h, w2, b2)
    }

    pub fn apply(&self, store: &ParamStore, coarse: &FeatureGrid) -> FeatureGrid {
        let mut g = Graph::new(store);
        let x = g.constant(coarse.grid.clone());
        let y = self.forward(&mut g, x);
        FeatureGrid { grid: g.value(y).clone(), resolution: Resolution::Refined }
    }
}

/// `conv3x3(C_r -> hidden) -> GELU -> conv3x3(hidden -> 1) -> sigmoid`.
#[derive(Clone, Debug)]
pub struct SegmentationHead {
    pub w1: ParamId,
    pub b1: ParamId,
    pub w2: ParamId,
    pub b2: ParamId,
}

impl SegmentationHead {
    pub fn new(store: &mut ParamStore, prefix: &str, in_ch: usize, hidden: usize, rng: &mut ChaCha8Rng) -> Self {
        Self {
            w1: store.register(format!("{prefix}.w1"), normal_init(&[3, 3, in_ch, hidden], 1.0 / ((9 * in_ch) as f64).sqrt(), rng)),
            b1: store.register(format!("{prefix}.b1"), Tensor::zeros(&[hidden])),
            w2: store.register(format!("{prefix}.w2"), normal_init(&[3, 3, hidden, 1], 1.0 / ((9 * hidden) as f64).sqrt(), rng)),
            b2: store.register(format!("{prefix}.b2"), Tensor::zeros(&[1])),
        }
    }

    /// Returns the `[Hf, Wf]` soft mask.
    pub fn forward(&self, g: &mut Graph, refined: Var) -> Var {
        let [h, w] = [g.shape(refined)[0], g.shape(refined)[1]];
        let (w1, b1, w2, b2) = (g.param(self.w1), g.param(self.b1), g.param(self.w2), g.param(self.b2));
        let x = g.conv3x3(refined, w1, b1);
        let x = g.gelu(x);
        let x = g.conv3x3(x, w2, b2);
        let x = g.sigmoid(x);
        g.reshape(x, &[h, w])
    }

    pub fn apply(&self, store: &ParamStore, refined: &FeatureGrid) -> MaskGrid {
        let mut g = Graph::new(store);
        let x = g.constant(refined.grid.clone());
        let y = self.forward(&mut g, x);
        MaskGrid { grid: g.value(y).clone(), kind: MaskKind::Predicted }
    }
}

/// Gate each refined cell by its mask value, preserving the grid shape.
pub fn mask_pool_var(g: &mut Graph, refined: Var, mask: Var) -> Result<Var> {
    let (rs, ms) = (g.shape(refined).to_vec(), g.shape(mask).to_vec());
    if rs.len() != 3 || ms.len() != 2 || rs[..2] != ms[..] {
        return Err(ProcapError::DimensionMismatch(format!("mask {ms:?} vs feature grid {rs:?}")));
    }
    Ok(g.gate_rows(refined, mask))
}

pub fn mask_pool(refined: &FeatureGrid, mask: &MaskGrid) -> Result<FeatureGrid> {
    let mut g = Graph::detached();
    let r = g.constant(refined.grid.clone());
    let m = g.constant(mask.grid.clone());
    let out = mask_pool_var(&mut g, r, m)?;
    Ok(FeatureGrid { grid: g.value(out).clone(), resolution: refined.resolution })
}

/// Block-mean coverage of a pixel mask at the `[gh, gw]` grid resolution.
pub fn downsample_gt_mask(mask: &BinaryMask, grid: [usize; 2]) -> Result<MaskGrid> {
    let [h, w] = mask.dims();
    let [gh, gw] = grid;
    if gh == 0 || gw == 0 || h % gh != 0 || w % gw != 0 {
        return Err(ProcapError::DimensionMismatch(format!("pixel mask {h}x{w} is not divisible into a {gh}x{gw} grid")));
    }
    let (bh, bw) = (h / gh, w / gw);
    let area = (bh * bw) as f64;
    let mut out = vec![0.0; gh * gw];
    for y in 0..h {
        for x in 0..w {
            if mask.get(y, x) {
                out[(y / bh) * gw + x / bw] += 1.0;
            }
        }
    }
    out.iter_mut().for_each(|v| *v /= area);
    Ok(MaskGrid { grid: Tensor::from_vec(&[gh, gw], out), kind: MaskKind::Target })
}

/// Intersection-over-union of two masks thresholded at 0.5.
pub fn mask_iou(pred: &MaskGrid, target: &MaskGrid) -> f64 {
    let (mut inter, mut union) = (0usize, 0usize);
    for (&p, &t) in pred.grid.data().iter().zip(target.grid.data()) {
        let (p, t) = (p >= 0.5, t >= 0.5);
        inter += (p && t) as usize;
        union += (p || t) as usize;
    }
    if union == 0 {
        1.0
    } else {
        inter as f64 / union as f64
    }
}
