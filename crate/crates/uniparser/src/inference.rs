//! NMS-free decoding of network outputs into per-instance part masks,
//! plus a Matrix-NMS rescorer used only to verify that suppression does
//! not change the metrics.

use ndarray::prelude::*;
use std::collections::BTreeMap;

use crate::autodiff::Tape;
use crate::datamodel::{ParsingPrediction, PredictedInstance};
use crate::error::Result;
use crate::heads::{gather_kernels_at, select_centers, CenterSelection};
use crate::model::UniParserModel;

pub const MATRIX_NMS_SIGMA: f64 = 2.0;
pub const MATRIX_NMS_CUTOFF: f64 = 0.05;

/// Full decode: local-maximum centers above theta_ctr, per-instance
/// argmax category assignment at theta_masks, nearest-neighbor upsample
/// to input resolution. Empty-mask instances are dropped; the score is
/// the center confidence.
pub fn predict(model: &UniParserModel, image: &Array3<f64>) -> Result<ParsingPrediction> {
    let hp = &model.cfg.hyper;
    let mut t = Tape::new();
    let fw = model.forward(&mut t, image)?;
    let heat = model.heatmap_value(&t, fw.h_c);
    let centers = select_centers(&heat, hp.theta_ctr, CenterSelection::LocalMax);
    let (bank, _, scores) = gather_kernels_at(&mut t, fw.f_ins, hp.s, &centers);
    let Some(bank) = bank else {
        return Ok(ParsingPrediction::default());
    };
    let q_ins = model.instance_similarity(&mut t, bank, fw.f_ins);
    let q_par = model.fuse(&mut t, &fw.leaves, q_ins, fw.q_cate, fw.f_cate);
    let stack = t.value(q_par).clone();
    let (_, h, w) = image.dim();
    Ok(decode_parsing(
        &stack,
        &scores,
        model.cfg.n_categories,
        hp.theta_masks,
        fw.stride,
        h,
        w,
    ))
}

/// Turns a (K * n_categories) x fh x fw parsing stack into masks. Each
/// pixel of instance k gets the argmax category (first wins on ties) if
/// that similarity clears `theta_masks`, else background.
pub fn decode_parsing(
    stack: &crate::autodiff::Arr,
    scores: &[f64],
    n_categories: usize,
    theta_masks: f64,
    stride: usize,
    out_h: usize,
    out_w: usize,
) -> ParsingPrediction {
    let shape = stack.shape();
    let (fh, fw) = (shape[1], shape[2]);
    let k = shape[0] / n_categories;
    assert_eq!(k, scores.len(), "one score per instance kernel");
    let mut instances = Vec::new();
    for i in 0..k {
        let mut parts: BTreeMap<u16, Array2<bool>> = BTreeMap::new();
        for y in 0..fh {
            for x in 0..fw {
                let (mut best_c, mut best_v) = (0usize, f64::NEG_INFINITY);
                for c in 0..n_categories {
                    let v = stack[[crate::datamodel::parsing_index(i, c, n_categories), y, x]];
                    if v > best_v {
                        best_v = v;
                        best_c = c;
                    }
                }
                if best_v >= theta_masks {
                    parts
                        .entry(best_c as u16 + 1)
                        .or_insert_with(|| Array2::from_elem((fh, fw), false))[[y, x]] = true;
                }
            }
        }
        if parts.is_empty() {
            continue;
        }
        let part_masks = parts
            .into_iter()
            .map(|(c, m)| (c, upsample_nearest(&m, stride, out_h, out_w)))
            .collect();
        instances.push(PredictedInstance {
            score: scores[i],
            part_masks,
        });
    }
    ParsingPrediction { instances }
}

fn upsample_nearest(mask: &Array2<bool>, stride: usize, out_h: usize, out_w: usize) -> Array2<bool> {
    let (h, w) = mask.dim();
    Array2::from_shape_fn((out_h, out_w), |(y, x)| {
        mask[[(y / stride).min(h - 1), (x / stride).min(w - 1)]]
    })
}

/// Whole-instance mask: union of the part masks.
pub fn instance_mask(inst: &PredictedInstance) -> Array2<bool> {
    let mut it = inst.part_masks.values();
    let mut out = it.next().expect("nonempty instance").clone();
    for m in it {
        out.zip_mut_with(m, |a, &b| *a |= b);
    }
    out
}

pub fn mask_iou(a: &Array2<bool>, b: &Array2<bool>) -> f64 {
    let mut inter = 0usize;
    let mut union = 0usize;
    for (&x, &y) in a.iter().zip(b.iter()) {
        inter += (x && y) as usize;
        union += (x || y) as usize;
    }
    if union == 0 {
        0.0
    } else {
        inter as f64 / union as f64
    }
}

/// SOLOv2-style Matrix-NMS with Gaussian decay: rescoring only, in input
/// order; `cutoff` optionally drops rescored instances below it.
pub fn matrix_nms(pred: &ParsingPrediction, sigma: f64, cutoff: Option<f64>) -> ParsingPrediction {
    let n = pred.instances.len();
    if n == 0 {
        return pred.clone();
    }
    // descending score, insertion order on ties
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| {
        pred.instances[b]
            .score
            .partial_cmp(&pred.instances[a].score)
            .unwrap()
            .then(a.cmp(&b))
    });
    let masks: Vec<Array2<bool>> = order
        .iter()
        .map(|&i| instance_mask(&pred.instances[i]))
        .collect();
    let mut iou = vec![vec![0.0f64; n]; n]; // iou[j][i] for j ranked above i
    for j in 0..n {
        for i in (j + 1)..n {
            iou[j][i] = mask_iou(&masks[j], &masks[i]);
        }
    }
    // compensation: the most-overlapping higher-ranked mask for each j
    let compensate: Vec<f64> = (0..n)
        .map(|j| (0..j).map(|k| iou[k][j]).fold(0.0, f64::max))
        .collect();
    let mut instances: Vec<PredictedInstance> = pred.instances.clone();
    for (rank, &idx) in order.iter().enumerate() {
        let decay = (0..rank)
            .map(|j| {
                ((-(iou[j][rank].powi(2)) + compensate[j].powi(2)) / sigma).exp()
            })
            .fold(1.0, f64::min);
        instances[idx].score *= decay;
    }
    if let Some(c) = cutoff {
        instances.retain(|i| i.score >= c);
    }
    ParsingPrediction { instances }
}

/// Fixed color palette for overlays; index wraps.
pub fn default_palette() -> Vec<[u8; 3]> {
    vec![
        [230, 25, 75],
        [60, 180, 75],
        [255, 225, 25],
        [0, 130, 200],
        [245, 130, 48],
        [145, 30, 180],
        [70, 240, 240],
        [240, 50, 230],
        [210, 245, 60],
        [250, 190, 190],
        [0, 128, 128],
        [170, 110, 40],
    ]
}

/// 50/50 blend of a palette color per (instance, category) over the
/// input; pixels outside every part mask keep the original color.
pub fn render_overlay(
    image: &Array3<f64>,
    pred: &ParsingPrediction,
    palette: &[[u8; 3]],
) -> image::RgbImage {
    let (_, h, w) = image.dim();
    let mut out = image::RgbImage::new(w as u32, h as u32);
    for y in 0..h {
        for x in 0..w {
            let px = [
                (image[[0, y, x]] * 255.0).round().clamp(0.0, 255.0) as u8,
                (image[[1, y, x]] * 255.0).round().clamp(0.0, 255.0) as u8,
                (image[[2, y, x]] * 255.0).round().clamp(0.0, 255.0) as u8,
            ];
            out.put_pixel(x as u32, y as u32, image::Rgb(px));
        }
    }
    for (i, inst) in pred.instances.iter().enumerate() {
        for (&cat, mask) in &inst.part_masks {
            let color = palette[(i * 13 + cat as usize) % palette.len()];
            for ((y, x), &m) in mask.indexed_iter() {
                if m {
                    let p = out.get_pixel_mut(x as u32, y as u32);
                    for ch in 0..3 {
                        p.0[ch] = ((p.0[ch] as u16 + color[ch] as u16) / 2) as u8;
                    }
                }
            }
        }
    }
    out
}
