//! The three heads (center locator, instance feature space builder,
//! category feature space builder) and the fusion strategies producing
//! instance-aware parsing similarity maps.

use ndarray::prelude::*;
use rand::Rng;

use crate::autodiff::{dims3, Tape, VarId};
use crate::datamodel::{FusionMode, SimilaritySpace};
use crate::features::append_coords;
use crate::nn::{randn_arr, Conv2d, ConvBlock, PId, ParamSet};

pub const NORM_EPS: f64 = 1e-8;

/// depth x (conv3x3 + group norm + ReLU).
#[derive(Debug, Clone)]
pub struct HeadTower {
    blocks: Vec<ConvBlock>,
}

impl HeadTower {
    pub fn new(
        ps: &mut ParamSet,
        rng: &mut impl Rng,
        name: &str,
        cin: usize,
        channels: usize,
        depth: usize,
    ) -> Self {
        assert!(depth >= 1);
        let mut blocks = Vec::with_capacity(depth);
        let mut c = cin;
        for d in 0..depth {
            blocks.push(ConvBlock::new(ps, rng, &format!("{name}.{d}"), c, channels, 1));
            c = channels;
        }
        Self { blocks }
    }

    pub fn forward(&self, t: &mut Tape, leaves: &[VarId], mut x: VarId) -> VarId {
        for b in &self.blocks {
            x = b.forward(t, leaves, x);
        }
        x
    }
}

/// Resize to S x S, append coords, tower, 1x1 conv, sigmoid.
#[derive(Debug, Clone)]
pub struct CenterLocator {
    tower: HeadTower,
    out: Conv2d,
}

impl CenterLocator {
    pub fn new(
        ps: &mut ParamSet,
        rng: &mut impl Rng,
        neck_channels: usize,
        channels: usize,
        depth: usize,
    ) -> Self {
        let tower = HeadTower::new(ps, rng, "cl.tower", neck_channels + 2, channels, depth);
        let out = Conv2d::new(ps, rng, "cl.out", channels, 1, 1, 1, 0);
        // Bias the initial heatmap toward a low prior so early training does
        // not flood the kernel selection with false centers.
        let prior: f64 = 0.01;
        ps.params[out.b.0].value.fill(-((1.0 - prior) / prior).ln());
        Self { tower, out }
    }

    pub fn forward(&self, t: &mut Tape, leaves: &[VarId], f_neck: VarId, s: usize) -> VarId {
        let x = t.bilinear_resize(f_neck, s, s);
        let x = append_coords(t, x);
        let x = self.tower.forward(t, leaves, x);
        let x = self.out.forward(t, leaves, x);
        t.sigmoid(x)
    }
}

/// IFSB / CFSB: a head tower followed by the configured similarity-space
/// mapping of per-pixel features.
#[derive(Debug, Clone)]
pub struct SpaceBuilder {
    tower: HeadTower,
    use_coords: bool,
    pub space: SimilaritySpace,
}

impl SpaceBuilder {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        ps: &mut ParamSet,
        rng: &mut impl Rng,
        name: &str,
        neck_channels: usize,
        channels: usize,
        depth: usize,
        use_coords: bool,
        space: SimilaritySpace,
    ) -> Self {
        let cin = neck_channels + if use_coords { 2 } else { 0 };
        Self {
            tower: HeadTower::new(ps, rng, name, cin, channels, depth),
            use_coords,
            space,
        }
    }

    /// Feature-space map at F_neck resolution (no resize).
    pub fn forward(&self, t: &mut Tape, leaves: &[VarId], f_neck: VarId) -> VarId {
        let x = if self.use_coords {
            append_coords(t, f_neck)
        } else {
            f_neck
        };
        let x = self.tower.forward(t, leaves, x);
        match self.space {
            SimilaritySpace::Cosine => t.l2_normalize_axis(x, 0, NORM_EPS),
            SimilaritySpace::InnerSigmoidBefore => t.sigmoid(x),
            SimilaritySpace::Inner | SimilaritySpace::InnerSigmoidAfter => x,
        }
    }
}

/// Learned per-category kernel vectors.
#[derive(Debug, Clone)]
pub struct CategoryKernels {
    pub id: PId,
    pub n_categories: usize,
}

impl CategoryKernels {
    pub fn new(
        ps: &mut ParamSet,
        rng: &mut impl Rng,
        n_categories: usize,
        channels: usize,
        init_std: f64,
    ) -> Self {
        let id = ps.add(
            "category_kernels",
            randn_arr(rng, &[n_categories, channels], init_std),
        );
        Self { id, n_categories }
    }

    /// Kernel rows as used for similarity: L2-normalized in cosine mode,
    /// raw in the inner-product modes.
    pub fn vectors(&self, t: &mut Tape, leaves: &[VarId], space: SimilaritySpace) -> VarId {
        let v = leaves[self.id.0];
        match space {
            SimilaritySpace::Cosine => t.l2_normalize_axis(v, 1, NORM_EPS),
            _ => v,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CenterSelection {
    /// Every cell above the threshold (training rule).
    Threshold,
    /// Cells above the threshold that are 3x3-neighborhood maxima
    /// (inference rule).
    LocalMax,
}

/// Grid cells selected from a center heatmap: (row, col, confidence).
pub fn select_centers(
    h_c: &Array2<f64>,
    theta: f64,
    selection: CenterSelection,
) -> Vec<(usize, usize, f64)> {
    let (s0, s1) = h_c.dim();
    let mut out = Vec::new();
    for i in 0..s0 {
        for j in 0..s1 {
            let v = h_c[[i, j]];
            if v <= theta {
                continue;
            }
            if selection == CenterSelection::LocalMax {
                let mut is_max = true;
                'nb: for di in -1i64..=1 {
                    for dj in -1i64..=1 {
                        if di == 0 && dj == 0 {
                            continue;
                        }
                        let (ni, nj) = (i as i64 + di, j as i64 + dj);
                        if ni < 0 || nj < 0 || ni >= s0 as i64 || nj >= s1 as i64 {
                            continue;
                        }
                        if h_c[[ni as usize, nj as usize]] > v {
                            is_max = false;
                            break 'nb;
                        }
                    }
                }
                if !is_max {
                    continue;
                }
            }
            out.push((i, j, v));
        }
    }
    out
}

/// Maps a grid cell on an S x S heatmap to the nearest feature pixel under
/// cell-center proportional scaling.
pub fn grid_to_feature(cell: (usize, usize), s: usize, feat_h: usize, feat_w: usize) -> (usize, usize) {
    let map = |i: usize, n_out: usize| -> usize {
        let x = (i as f64 + 0.5) / s as f64 * n_out as f64 - 0.5;
        (x.round() as isize).clamp(0, n_out as isize - 1) as usize
    };
    (map(cell.0, feat_h), map(cell.1, feat_w))
}

/// Extracts the dynamic instance kernels at the selected grid cells.
/// Returns (kernel rows K x C on the tape, grid coords, confidences);
/// an empty selection yields None.
pub fn select_instance_kernels(
    t: &mut Tape,
    f_ins: VarId,
    h_c: &Array2<f64>,
    theta: f64,
    selection: CenterSelection,
) -> (Option<VarId>, Vec<(usize, usize)>, Vec<f64>) {
    let centers = select_centers(h_c, theta, selection);
    gather_kernels_at(t, f_ins, h_c.nrows(), &centers)
}

/// Gathers kernel rows at explicit grid cells (used by the trainer, which
/// augments the thresholded cells with ground-truth-positive cells).
pub fn gather_kernels_at(
    t: &mut Tape,
    f_ins: VarId,
    s: usize,
    centers: &[(usize, usize, f64)],
) -> (Option<VarId>, Vec<(usize, usize)>, Vec<f64>) {
    if centers.is_empty() {
        return (None, vec![], vec![]);
    }
    let (_, fh, fw) = dims3(t.value(f_ins));
    let pix: Vec<(usize, usize)> = centers
        .iter()
        .map(|&(i, j, _)| grid_to_feature((i, j), s, fh, fw))
        .collect();
    let bank = t.gather_pixels(f_ins, &pix);
    (
        Some(bank),
        centers.iter().map(|&(i, j, _)| (i, j)).collect(),
        centers.iter().map(|&(_, _, v)| v).collect(),
    )
}

/// Per-kernel similarity maps: maps[k][p] = dot(kernels[k], features[p]).
/// With `sigmoid_after`, a sigmoid is applied to the inner products.
pub fn similarity_maps(
    t: &mut Tape,
    kernels: VarId,
    features: VarId,
    sigmoid_after: bool,
) -> VarId {
    let (c, h, w) = dims3(t.value(features));
    let k = t.value(kernels).shape()[0];
    let flat = t.reshape(features, &[c, h * w]);
    let q = t.matmul(kernels, flat);
    let q = t.reshape(q, &[k, h, w]);
    if sigmoid_after {
        t.sigmoid(q)
    } else {
        q
    }
}

/// Element-wise-minimum index fusion. Output (K * n_cate) x H x W in
/// instance-major order.
pub fn fuse_index(t: &mut Tape, q_ins: VarId, q_cate: VarId) -> VarId {
    let (k, h, w) = dims3(t.value(q_ins));
    let (n_cate, hc, wc) = dims3(t.value(q_cate));
    assert_eq!((h, w), (hc, wc), "fusion spatial mismatch");
    let a = t.reshape(q_ins, &[k, 1, h, w]);
    let a = t.expand_axis(a, 1, n_cate);
    let b = t.reshape(q_cate, &[1, n_cate, h, w]);
    let b = t.expand_axis(b, 0, k);
    let m = t.min2(a, b);
    t.reshape(m, &[k * n_cate, h, w])
}

/// Learned fusion tower for the conv / multi ablation variants.
#[derive(Debug, Clone)]
pub struct FusionModule {
    conv1: Conv2d,
    conv2: Conv2d,
    pub mode: FusionMode,
}

pub const FUSION_CHANNELS: usize = 64;

impl FusionModule {
    pub fn new(
        ps: &mut ParamSet,
        rng: &mut impl Rng,
        mode: FusionMode,
        feat_channels: usize,
        n_categories: usize,
    ) -> Option<Self> {
        let cin = match mode {
            FusionMode::Index => return None,
            FusionMode::Convs => 1 + n_categories,
            FusionMode::Multi => feat_channels,
        };
        Some(Self {
            conv1: Conv2d::new(ps, rng, "fusion.conv1", cin, FUSION_CHANNELS, 3, 1, 1),
            conv2: Conv2d::new(ps, rng, "fusion.conv2", FUSION_CHANNELS, n_categories, 3, 1, 1),
            mode,
        })
    }

    /// Per-instance fusion; concatenates instance outputs along axis 0.
    pub fn forward(
        &self,
        t: &mut Tape,
        leaves: &[VarId],
        q_ins: VarId,
        q_cate: VarId,
        f_cate: VarId,
    ) -> VarId {
        let (k, h, w) = dims3(t.value(q_ins));
        let (c_feat, _, _) = dims3(t.value(f_cate));
        let mut per_instance = Vec::with_capacity(k);
        for i in 0..k {
            let qi = t.slice_axis0(q_ins, i, 1); // 1 x H x W
            let x = match self.mode {
                FusionMode::Convs => t.concat(0, &[qi, q_cate]),
                FusionMode::Multi => {
                    let gate = t.expand_axis(qi, 0, c_feat);
                    t.mul(gate, f_cate)
                }
                FusionMode::Index => unreachable!(),
            };
            let x = self.conv1.forward(t, leaves, x);
            let x = t.relu(x);
            let x = self.conv2.forward(t, leaves, x);
            per_instance.push(x);
        }
        let _ = (h, w);
        t.concat(0, &per_instance)
    }
}
