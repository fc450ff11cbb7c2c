//! Core domain types shared by every module, plus derived ground-truth
//! constructions: barycenters, center heatmaps, per-instance part masks.

use std::collections::BTreeMap;

use ndarray::prelude::*;

use crate::autodiff::Arr;
use crate::error::{Error, Result};

/// An image plus dense instance-id and category-id label maps.
#[derive(Debug, Clone, PartialEq)]
pub struct ParsingSample {
    /// 3×H×W, values in [0,1].
    pub image: Array3<f64>,
    /// H×W, 0 = background, 1..=n_instances = instance id.
    pub instance_map: Array2<u16>,
    /// H×W, 0 = background, 1..=n_categories = part category id.
    pub category_map: Array2<u16>,
    pub sample_id: String,
}

impl ParsingSample {
    pub fn height(&self) -> usize {
        self.instance_map.nrows()
    }

    pub fn width(&self) -> usize {
        self.instance_map.ncols()
    }

    pub fn n_instances(&self) -> usize {
        self.instance_map.iter().copied().max().unwrap_or(0) as usize
    }

    /// Checks the label-consistency invariants: instance and category maps
    /// are zero at exactly the same pixels, and instance ids are contiguous
    /// 1..=N with every id present.
    pub fn validate(&self) -> Result<()> {
        if self.instance_map.dim() != self.category_map.dim() {
            return Err(Error::InconsistentLabels(format!(
                "label map shapes differ: {:?} vs {:?}",
                self.instance_map.dim(),
                self.category_map.dim()
            )));
        }
        let (h, w) = self.instance_map.dim();
        if self.image.dim() != (3, h, w) {
            return Err(Error::InconsistentLabels(format!(
                "image shape {:?} does not match labels {:?}",
                self.image.dim(),
                (h, w)
            )));
        }
        for ((r, c), (&m, &cat)) in self
            .instance_map
            .indexed_iter()
            .map(|(i, v)| (i, (v, &self.category_map[i])))
        {
            if (m == 0) != (cat == 0) {
                return Err(Error::InconsistentLabels(format!(
                    "pixel ({r},{c}): instance={m}, category={cat}"
                )));
            }
        }
        let n = self.n_instances();
        let mut seen = vec![false; n + 1];
        for &m in self.instance_map.iter() {
            seen[m as usize] = true;
        }
        for id in 1..=n {
            if !seen[id] {
                return Err(Error::InconsistentLabels(format!(
                    "instance id {id} missing (max id {n})"
                )));
            }
        }
        Ok(())
    }
}

/// Derived ground truth for one instance.
#[derive(Debug, Clone)]
pub struct InstanceGT {
    pub mask: Array2<bool>,
    /// (row, col) in pixel units.
    pub barycenter: (f64, f64),
    /// (top, left, height, width) in pixels.
    pub bbox: (usize, usize, usize, usize),
    pub part_masks: BTreeMap<u16, Array2<bool>>,
}

/// Real-valued C×H×W map with its input stride.
#[derive(Debug, Clone)]
pub struct FeatureMap {
    pub data: Arr,
    pub stride: usize,
}

impl FeatureMap {
    pub fn shape(&self) -> (usize, usize, usize) {
        crate::autodiff::dims3(&self.data)
    }
}

/// S×S barycenter-confidence grid, values in [0,1].
#[derive(Debug, Clone, PartialEq)]
pub struct CenterHeatmap {
    pub data: Array2<f64>,
}

impl CenterHeatmap {
    pub fn grid_size(&self) -> usize {
        self.data.nrows()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum KernelOrigin {
    Instance,
    Category,
}

/// A set of L2-normalized C-dimensional kernel vectors.
#[derive(Debug, Clone)]
pub struct KernelBank {
    /// K×C, one unit-norm vector per row (in cosine mode).
    pub vectors: Array2<f64>,
    pub origin: KernelOrigin,
    /// Source grid coordinates (instance kernels only).
    pub coords: Option<Vec<(usize, usize)>>,
    /// Per-kernel confidence (instance kernels: center confidence).
    pub scores: Vec<f64>,
}

impl KernelBank {
    pub fn len(&self) -> usize {
        self.vectors.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.vectors.nrows() == 0
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum StackKind {
    Instance,
    Category,
    Parsing,
}

/// Per-kernel similarity maps, K×H×W.
#[derive(Debug, Clone)]
pub struct SimilarityStack {
    pub maps: Arr,
    pub kind: StackKind,
}

impl SimilarityStack {
    pub fn len(&self) -> usize {
        self.maps.shape()[0]
    }
}

/// Row-major index of (instance, category) in a flattened parsing stack.
pub fn parsing_index(instance: usize, category: usize, n_categories: usize) -> usize {
    instance * n_categories + category
}

#[derive(Debug, Clone)]
pub struct PredictedInstance {
    pub score: f64,
    pub part_masks: BTreeMap<u16, Array2<bool>>,
}

/// Final output: per-detected-instance part masks with confidence scores.
#[derive(Debug, Clone, Default)]
pub struct ParsingPrediction {
    pub instances: Vec<PredictedInstance>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SimilaritySpace {
    Cosine,
    Inner,
    InnerSigmoidAfter,
    InnerSigmoidBefore,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FusionMode {
    Index,
    Convs,
    Multi,
}

#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct HyperParams {
    /// Center-locator grid size.
    pub s: usize,
    /// Fraction of the instance bbox marked positive around the barycenter.
    pub sigma_center: f64,
    /// Training-time center selection threshold.
    pub theta_c: f64,
    /// Inference-time center selection threshold.
    pub theta_ctr: f64,
    /// Mask binarization threshold on parsing similarities.
    pub theta_masks: f64,
    pub lambda_aux: f64,
    pub lambda_par: f64,
    pub lambda_metric: f64,
    pub head_channels: usize,
    pub head_depth: usize,
    pub kernel_init_std: f64,
    pub similarity_space: SimilaritySpace,
    pub fusion_mode: FusionMode,
}

impl Default for HyperParams {
    fn default() -> Self {
        Self {
            s: 40,
            sigma_center: 0.2,
            theta_c: 0.1,
            theta_ctr: 0.1,
            theta_masks: 0.5,
            lambda_aux: 3.0,
            lambda_par: 3.0,
            lambda_metric: 1.0,
            head_channels: 128,
            head_depth: 5,
            kernel_init_std: 0.01,
            similarity_space: SimilaritySpace::Cosine,
            fusion_mode: FusionMode::Index,
        }
    }
}

impl HyperParams {
    pub fn validate(&self) -> Result<()> {
        for (name, v) in [
            ("theta_c", self.theta_c),
            ("theta_ctr", self.theta_ctr),
            ("theta_masks", self.theta_masks),
        ] {
            if !(v > 0.0 && v < 1.0) {
                return Err(Error::Config(format!("{name} must be in (0,1), got {v}")));
            }
        }
        for (name, v) in [
            ("lambda_aux", self.lambda_aux),
            ("lambda_par", self.lambda_par),
            ("lambda_metric", self.lambda_metric),
        ] {
            if v < 0.0 {
                return Err(Error::Config(format!("{name} must be >= 0, got {v}")));
            }
        }
        Ok(())
    }
}

/// Arithmetic mean of the true-pixel (row, col) coordinates.
pub fn barycenter(mask: &Array2<bool>) -> Result<(f64, f64)> {
    let mut n = 0usize;
    let (mut sr, mut sc) = (0.0, 0.0);
    for ((r, c), &v) in mask.indexed_iter() {
        if v {
            n += 1;
            sr += r as f64;
            sc += c as f64;
        }
    }
    if n == 0 {
        return Err(Error::EmptyMask);
    }
    Ok((sr / n as f64, sc / n as f64))
}

/// Tight bounding box of a mask: (top, left, height, width).
pub fn mask_bbox(mask: &Array2<bool>) -> Result<(usize, usize, usize, usize)> {
    let (mut r0, mut r1, mut c0, mut c1) = (usize::MAX, 0usize, usize::MAX, 0usize);
    let mut any = false;
    for ((r, c), &v) in mask.indexed_iter() {
        if v {
            any = true;
            r0 = r0.min(r);
            r1 = r1.max(r);
            c0 = c0.min(c);
            c1 = c1.max(c);
        }
    }
    if !any {
        return Err(Error::EmptyMask);
    }
    Ok((r0, c0, r1 - r0 + 1, c1 - c0 + 1))
}

/// Splits a sample into per-instance ground truth with per-category part
/// masks. Categories with zero pixels in an instance are omitted.
pub fn instance_part_masks(sample: &ParsingSample) -> Result<Vec<InstanceGT>> {
    sample.validate()?;
    let n = sample.n_instances();
    let (h, w) = sample.instance_map.dim();
    let mut out = Vec::with_capacity(n);
    for id in 1..=n as u16 {
        let mask = Array2::from_shape_fn((h, w), |i| sample.instance_map[i] == id);
        let mut part_masks: BTreeMap<u16, Array2<bool>> = BTreeMap::new();
        for ((r, c), &m) in sample.instance_map.indexed_iter() {
            if m == id {
                let cat = sample.category_map[[r, c]];
                part_masks
                    .entry(cat)
                    .or_insert_with(|| Array2::from_elem((h, w), false))[[r, c]] = true;
            }
        }
        let barycenter = barycenter(&mask)?;
        let bbox = mask_bbox(&mask)?;
        out.push(InstanceGT {
            mask,
            barycenter,
            bbox,
            part_masks,
        });
    }
    Ok(out)
}

/// Binary ground-truth center heatmap. A grid cell is positive when its
/// center falls inside the rectangle of size (sigma*H_box, sigma*W_box)
/// centered at an instance barycenter. Instances whose rectangle captures
/// no cell center mark the single cell nearest their barycenter.
pub fn center_heatmap_gt(
    instances: &[InstanceGT],
    s: usize,
    sigma_center: f64,
    img_h: usize,
    img_w: usize,
) -> CenterHeatmap {
    let mut data = Array2::<f64>::zeros((s, s));
    for inst in instances {
        let cells = positive_center_cells(inst, s, sigma_center, img_h, img_w);
        for (i, j) in cells {
            data[[i, j]] = 1.0;
        }
    }
    CenterHeatmap { data }
}

/// The set of positive grid cells for one instance under the rectangle rule,
/// with the nearest-cell fallback.
pub fn positive_center_cells(
    inst: &InstanceGT,
    s: usize,
    sigma_center: f64,
    img_h: usize,
    img_w: usize,
) -> Vec<(usize, usize)> {
    let (br, bc) = inst.barycenter;
    let (_, _, bh, bw) = inst.bbox;
    let half_h = sigma_center * bh as f64 / 2.0;
    let half_w = sigma_center * bw as f64 / 2.0;
    let mut cells = Vec::new();
    for i in 0..s {
        let cy = (i as f64 + 0.5) / s as f64 * img_h as f64;
        if (cy - br).abs() > half_h {
            continue;
        }
        for j in 0..s {
            let cx = (j as f64 + 0.5) / s as f64 * img_w as f64;
            if (cx - bc).abs() <= half_w {
                cells.push((i, j));
            }
        }
    }
    if cells.is_empty() {
        let i = ((br / img_h as f64 * s as f64).floor() as isize).clamp(0, s as isize - 1);
        let j = ((bc / img_w as f64 * s as f64).floor() as isize).clamp(0, s as isize - 1);
        cells.push((i as usize, j as usize));
    }
    cells
}
