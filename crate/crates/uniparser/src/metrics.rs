//! Instance-level parsing metrics: AP^p over IoU-style part-score
//! thresholds, its average (AP^p_vol), and PCP_50.

use std::collections::BTreeMap;
use std::path::Path;


use crate::datamodel::{InstanceGT, ParsingPrediction, PredictedInstance};
use crate::error::Result;
use crate::inference::mask_iou;

/// One evaluated image: predicted instances plus ground-truth instances.
pub type Scene = (ParsingPrediction, Vec<InstanceGT>);

pub const AP_THRESHOLDS: [f64; 9] = [0.1, 0.2, 0.3, 0.4, 0.5, 0.6, 0.7, 0.8, 0.9];

/// Mean part IoU over the union of categories present in either
/// instance; a category missing on one side scores 0.
pub fn instance_part_score(pred: &PredictedInstance, gt: &InstanceGT) -> f64 {
    let cats: std::collections::BTreeSet<u16> = pred
        .part_masks
        .keys()
        .chain(gt.part_masks.keys())
        .copied()
        .collect();
    if cats.is_empty() {
        return 0.0;
    }
    let mut sum = 0.0;
    for c in &cats {
        sum += match (pred.part_masks.get(c), gt.part_masks.get(c)) {
            (Some(p), Some(g)) => mask_iou(p, g),
            _ => 0.0,
        };
    }
    sum / cats.len() as f64
}

/// Detections of one image after greedy matching: (score, is_tp). The
/// prediction order for equal scores is insertion order; a GT is
/// consumed only by the prediction that turns it into a true positive.
fn match_image(pred: &ParsingPrediction, gts: &[InstanceGT], threshold: f64) -> Vec<(f64, bool)> {
    let mut order: Vec<usize> = (0..pred.instances.len()).collect();
    order.sort_by(|&a, &b| {
        pred.instances[b]
            .score
            .partial_cmp(&pred.instances[a].score)
            .unwrap()
            .then(a.cmp(&b))
    });
    let mut used = vec![false; gts.len()];
    let mut out = Vec::with_capacity(order.len());
    for &pi in &order {
        let inst = &pred.instances[pi];
        let mut best: Option<(f64, usize)> = None;
        for (gi, gt) in gts.iter().enumerate() {
            if used[gi] {
                continue;
            }
            let s = instance_part_score(inst, gt);
            if best.map_or(true, |(bs, _)| s > bs) {
                best = Some((s, gi));
            }
        }
        let tp = match best {
            Some((s, gi)) if s > threshold => {
                used[gi] = true;
                true
            }
            _ => false,
        };
        out.push((inst.score, tp));
    }
    out
}

/// AP over pooled detections at one part-score threshold, using the
/// all-point interpolated precision-recall curve. Detections with equal
/// confidence form a single PR point (they cannot be separated by any
/// score cutoff), so a tied duplicate drags precision down.
pub fn ap_p(scenes: &[Scene], threshold: f64) -> f64 {
    let n_gt: usize = scenes.iter().map(|(_, g)| g.len()).sum();
    let mut dets: Vec<(f64, bool)> = Vec::new();
    for (pred, gts) in scenes {
        dets.extend(match_image(pred, gts, threshold));
    }
    if n_gt == 0 {
        return if dets.is_empty() { 1.0 } else { 0.0 };
    }
    if dets.is_empty() {
        return 0.0;
    }
    dets.sort_by(|a, b| b.0.partial_cmp(&a.0).unwrap());
    // PR points at distinct score cutoffs
    let mut points: Vec<(f64, f64)> = Vec::new(); // (recall, precision)
    let (mut tp, mut fp) = (0usize, 0usize);
    let mut i = 0;
    while i < dets.len() {
        let score = dets[i].0;
        while i < dets.len() && dets[i].0 == score {
            if dets[i].1 {
                tp += 1;
            } else {
                fp += 1;
            }
            i += 1;
        }
        points.push((tp as f64 / n_gt as f64, tp as f64 / (tp + fp) as f64));
    }
    // right-to-left precision envelope, rectangle integration
    let mut ap = 0.0;
    let mut max_p = 0.0f64;
    let mut prev_r = {
        let mut r = 0.0f64;
        for &(pr, _) in &points {
            r = r.max(pr);
        }
        r
    };
    for &(r, p) in points.iter().rev() {
        max_p = max_p.max(p);
        ap += (prev_r - r) * max_p;
        prev_r = r;
    }
    ap += prev_r * max_p; // first segment from recall 0
    ap
}

pub fn ap_p_vol(scenes: &[Scene]) -> f64 {
    AP_THRESHOLDS.iter().map(|&t| ap_p(scenes, t)).sum::<f64>() / AP_THRESHOLDS.len() as f64
}

/// For each true positive at threshold 0.5, the fraction of GT part
/// categories with part IoU > 0.5; summed and divided by the total GT
/// instance count, so misses and duplicates both reduce the score.
pub fn pcp_50(scenes: &[Scene]) -> f64 {
    let n_gt: usize = scenes.iter().map(|(_, g)| g.len()).sum();
    if n_gt == 0 {
        return if scenes.iter().all(|(p, _)| p.instances.is_empty()) {
            1.0
        } else {
            0.0
        };
    }
    let mut total = 0.0;
    for (pred, gts) in scenes {
        let mut order: Vec<usize> = (0..pred.instances.len()).collect();
        order.sort_by(|&a, &b| {
            pred.instances[b]
                .score
                .partial_cmp(&pred.instances[a].score)
                .unwrap()
                .then(a.cmp(&b))
        });
        let mut used = vec![false; gts.len()];
        for &pi in &order {
            let inst = &pred.instances[pi];
            let mut best: Option<(f64, usize)> = None;
            for (gi, gt) in gts.iter().enumerate() {
                if used[gi] {
                    continue;
                }
                let s = instance_part_score(inst, gt);
                if best.map_or(true, |(bs, _)| s > bs) {
                    best = Some((s, gi));
                }
            }
            if let Some((s, gi)) = best {
                if s > 0.5 {
                    used[gi] = true;
                    let gt = &gts[gi];
                    let good = gt
                        .part_masks
                        .iter()
                        .filter(|(c, g)| {
                            inst.part_masks.get(c).is_some_and(|p| mask_iou(p, g) > 0.5)
                        })
                        .count();
                    if !gt.part_masks.is_empty() {
                        total += good as f64 / gt.part_masks.len() as f64;
                    }
                }
            }
        }
    }
    total / n_gt as f64
}

#[derive(Debug, Clone)]
pub struct ImageDetail {
    pub sample_index: usize,
    pub n_predictions: usize,
    pub n_gts: usize,
    pub matched_at_50: usize,
}

#[derive(Debug, Clone)]
pub struct EvalResult {
    /// threshold -> AP^p, over [AP_THRESHOLDS].
    pub ap_p: Vec<(f64, f64)>,
    pub ap_p_vol: f64,
    pub pcp_50: f64,
    pub per_image_details: Vec<ImageDetail>,
}

impl EvalResult {
    pub fn ap_p_at(&self, threshold: f64) -> f64 {
        self.ap_p
            .iter()
            .find(|(t, _)| (t - threshold).abs() < 1e-9)
            .map(|&(_, v)| v)
            .unwrap_or(0.0)
    }
}

pub fn evaluate(scenes: &[Scene]) -> EvalResult {
    let ap_p: Vec<(f64, f64)> = AP_THRESHOLDS
        .iter()
        .map(|&t| (t, self::ap_p(scenes, t)))
        .collect();
    let ap_p_vol = ap_p.iter().map(|&(_, v)| v).sum::<f64>() / ap_p.len() as f64;
    let per_image_details = scenes
        .iter()
        .enumerate()
        .map(|(i, (pred, gts))| ImageDetail {
            sample_index: i,
            n_predictions: pred.instances.len(),
            n_gts: gts.len(),
            matched_at_50: match_image(pred, gts, 0.5).iter().filter(|d| d.1).count(),
        })
        .collect();
    EvalResult {
        ap_p,
        ap_p_vol,
        pcp_50: pcp_50(scenes),
        per_image_details,
    }
}

/// Machine-readable key = value report.
pub fn write_kv_report(path: &Path, r: &EvalResult) -> Result<()> {
    let mut out = String::new();
    for &(t, v) in &r.ap_p {
        out.push_str(&format!("ap_p_{t:.1} = {v}\n"));
    }
    out.push_str(&format!("ap_p_vol = {}\n", r.ap_p_vol));
    out.push_str(&format!("pcp_50 = {}\n", r.pcp_50));
    std::fs::write(path, out)?;
    Ok(())
}

/// Human-readable report.
pub fn write_text_report(path: &Path, r: &EvalResult) -> Result<()> {
    let mut out = String::from("evaluation summary\n==================\n");
    for &(t, v) in &r.ap_p {
        out.push_str(&format!("AP^p @ {t:.1}: {v:.4}\n"));
    }
    out.push_str(&format!("AP^p_vol:   {:.4}\n", r.ap_p_vol));
    out.push_str(&format!("PCP_50:     {:.4}\n", r.pcp_50));
    out.push_str(&format!("images:     {}\n", r.per_image_details.len()));
    for d in &r.per_image_details {
        out.push_str(&format!(
            "  image {}: {} predictions, {} gts, {} matched@0.5\n",
            d.sample_index, d.n_predictions, d.n_gts, d.matched_at_50
        ));
    }
    std::fs::write(path, out)?;
    Ok(())
}

/// Parses a key = value report back into (key, value) pairs.
pub fn read_kv_report(text: &str) -> BTreeMap<String, f64> {
    text.lines()
        .filter_map(|l| {
            let (k, v) = l.split_once('=')?;
            Some((k.trim().to_string(), v.trim().parse().ok()?))
        })
        .collect()
}
