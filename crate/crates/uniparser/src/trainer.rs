//! SGD training loop: per-step target construction, the joint loss, and
//! a warmup + step-drop learning-rate schedule. Deterministic given seed
//! and config.

use std::path::Path;

use ndarray::prelude::*;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Arr, Tape, VarId};
use crate::datamodel::{
    center_heatmap_gt, instance_part_masks, positive_center_cells, InstanceGT, ParsingSample,
};
use crate::error::{Error, Result};
use crate::heads::{gather_kernels_at, select_centers, CenterSelection};
use crate::losses::{
    aux_loss, focal_center_loss, metric_loss, parsing_loss, same_instance_weights,
    similarity_matrix, total_loss, LossReport,
};
use crate::model::UniParserModel;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub batch_size: usize,
    pub base_lr_per_sample: f64,
    pub momentum: f64,
    pub warmup_iters: usize,
    pub total_steps: usize,
    /// (fraction of total_steps, multiplicative factor); applied from
    /// floor(fraction * total_steps) onward.
    pub lr_drops: Vec<(f64, f64)>,
    pub seed: u64,
    /// Verify every gradient is finite after each backward pass.
    pub grad_check_mode: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            batch_size: 2,
            base_lr_per_sample: 6.25e-4,
            momentum: 0.9,
            warmup_iters: 500,
            total_steps: 0,
            lr_drops: vec![(0.75, 0.1), (11.0 / 12.0, 0.1)],
            seed: 0,
            grad_check_mode: false,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size < 1 {
            return Err(Error::Config("batch_size must be >= 1".into()));
        }
        if self.base_lr_per_sample < 0.0 {
            return Err(Error::Config("base_lr_per_sample must be >= 0".into()));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(Error::Config("momentum must be in [0,1)".into()));
        }
        for &(frac, factor) in &self.lr_drops {
            if !(0.0..=1.0).contains(&frac) || factor <= 0.0 {
                return Err(Error::Config(format!(
                    "bad lr drop ({frac}, {factor}): fraction in [0,1], factor > 0"
                )));
            }
        }
        Ok(())
    }

    /// Post-warmup learning rate, scaled by batch size.
    pub fn lr_full(&self) -> f64 {
        self.base_lr_per_sample * self.batch_size as f64
    }

    /// lr at step 0 is lr_full/100, rising linearly to lr_full at
    /// `warmup_iters`; each drop multiplies from its step onward.
    pub fn learning_rate(&self, step: usize) -> f64 {
        let full = self.lr_full();
        let mut lr = if self.warmup_iters > 0 && step < self.warmup_iters {
            let frac = step as f64 / self.warmup_iters as f64;
            full * (0.01 + 0.99 * frac)
        } else {
            full
        };
        for &(frac, factor) in &self.lr_drops {
            if step >= (frac * self.total_steps as f64).floor() as usize {
                lr *= factor;
            }
        }
        lr
    }
}

#[derive(Debug, Clone, Copy)]
pub struct StepRecord {
    pub step: usize,
    pub report: LossReport,
    pub lr: f64,
}

pub fn write_history_csv(path: &Path, history: &[StepRecord]) -> Result<()> {
    let mut out = String::from("step,l_center,l_aux,l_par,l_metric,l_total,lr\n");
    for r in history {
        out.push_str(&format!(
            "{},{},{},{},{},{},{}\n",
            r.step, r.report.l_center, r.report.l_aux, r.report.l_par, r.report.l_metric,
            r.report.l_total, r.lr
        ));
    }
    std::fs::write(path, out)?;
    Ok(())
}

/// Maps each selected grid cell to a ground-truth instance: inside an
/// instance's positive center region, or within 1 cell (Chebyshev) of a
/// barycenter cell. Cells matching neither get None and are excluded
/// from the auxiliary and parsing terms.
pub fn assign_kernels_to_instances(
    cells: &[(usize, usize)],
    instances: &[InstanceGT],
    s: usize,
    sigma_center: f64,
    img_h: usize,
    img_w: usize,
) -> Vec<Option<usize>> {
    let regions: Vec<Vec<(usize, usize)>> = instances
        .iter()
        .map(|inst| positive_center_cells(inst, s, sigma_center, img_h, img_w))
        .collect();
    let bary_cells: Vec<(usize, usize)> = instances
        .iter()
        .map(|inst| {
            let cell = |v: f64, n: usize| {
                ((v / n as f64 * s as f64).floor() as isize).clamp(0, s as isize - 1) as usize
            };
            (cell(inst.barycenter.0, img_h), cell(inst.barycenter.1, img_w))
        })
        .collect();
    cells
        .iter()
        .map(|&cell| {
            // inside a region wins; nearest barycenter breaks overlaps
            let mut best: Option<(usize, usize)> = None; // (dist, idx)
            for (idx, region) in regions.iter().enumerate() {
                if region.contains(&cell) {
                    let d = chebyshev(cell, bary_cells[idx]);
                    if best.map_or(true, |(bd, _)| d < bd) {
                        best = Some((d, idx));
                    }
                }
            }
            if let Some((_, idx)) = best {
                return Some(idx);
            }
            let mut near: Option<(usize, usize)> = None;
            for (idx, &bc) in bary_cells.iter().enumerate() {
                let d = chebyshev(cell, bc);
                if d <= 1 && near.map_or(true, |(bd, _)| d < bd) {
                    near = Some((d, idx));
                }
            }
            near.map(|(_, idx)| idx)
        })
        .collect()
}

fn chebyshev(a: (usize, usize), b: (usize, usize)) -> usize {
    a.0.abs_diff(b.0).max(a.1.abs_diff(b.1))
}

/// Nearest-neighbor downsample of a GT mask to feature resolution.
fn downsample_mask(mask: &Array2<bool>, stride: usize, fh: usize, fw: usize) -> Array2<f64> {
    let (h, w) = mask.dim();
    let src = |o: usize, n: usize| {
        (((o as f64 + 0.5) * stride as f64 - 0.5).round() as isize).clamp(0, n as isize - 1)
            as usize
    };
    Array2::from_shape_fn((fh, fw), |(y, x)| {
        if mask[[src(y, h), src(x, w)]] {
            1.0
        } else {
            0.0
        }
    })
}

struct SampleTargets {
    instances: Vec<InstanceGT>,
    heat_gt: Arr,
}

fn build_targets(sample: &ParsingSample, s: usize, sigma_center: f64) -> Result<SampleTargets> {
    let instances = instance_part_masks(sample)?;
    let heat = center_heatmap_gt(&instances, s, sigma_center, sample.height(), sample.width());
    Ok(SampleTargets {
        instances,
        heat_gt: heat.data.into_dyn(),
    })
}

/// Limit on selected cells without a GT assignment, to bound the cost of
/// spurious early-training firings.
const MAX_UNASSIGNED_KERNELS: usize = 8;

struct SampleLoss {
    leaves: Vec<VarId>,
    l_center: VarId,
    l_aux: VarId,
    l_par: VarId,
    l_metric: VarId,
}

fn sample_loss(
    model: &UniParserModel,
    t: &mut Tape,
    sample: &ParsingSample,
    tg: &SampleTargets,
) -> Result<SampleLoss> {
    let hp = &model.cfg.hyper;
    let fw = model.forward(t, &sample.image)?;
    let l_center = focal_center_loss(t, fw.h_c, &tg.heat_gt)?;

    let (h, w) = (sample.height(), sample.width());
    let heat = model.heatmap_value(t, fw.h_c);
    // kernels: thresholded predictions plus every GT-positive cell
    let mut cells: Vec<(usize, usize)> = select_centers(&heat, hp.theta_c, CenterSelection::Threshold)
        .into_iter()
        .map(|(i, j, _)| (i, j))
        .collect();
    for inst in &tg.instances {
        cells.extend(positive_center_cells(inst, hp.s, hp.sigma_center, h, w));
    }
    cells.sort_unstable();
    cells.dedup();
    let assignment = assign_kernels_to_instances(&cells, &tg.instances, hp.s, hp.sigma_center, h, w);
    // assigned kernels first so the aux/parsing bank is a prefix slice
    let mut order: Vec<usize> = (0..cells.len()).collect();
    order.sort_by_key(|&i| (assignment[i].is_none(), i));
    let mut cells: Vec<(usize, usize)> = order.iter().map(|&i| cells[i]).collect();
    let mut assignment: Vec<Option<usize>> = order.iter().map(|&i| assignment[i]).collect();
    let n_assigned = assignment.iter().filter(|a| a.is_some()).count();
    cells.truncate(n_assigned + MAX_UNASSIGNED_KERNELS);
    assignment.truncate(cells.len());

    let scored: Vec<(usize, usize, f64)> = cells
        .iter()
        .map(|&(i, j)| (i, j, heat[[i, j]]))
        .collect();
    let (bank, _, _) = gather_kernels_at(t, fw.f_ins, hp.s, &scored);

    let fdim = t.value(fw.f_ins).shape().to_vec();
    let (fh, fwid) = (fdim[1], fdim[2]);
    let stride = fw.stride;
    let n_cate = model.cfg.n_categories;

    // per-category GT: union of part masks over instances; None = absent
    let mut cate_gt: Vec<Option<Array2<f64>>> = Vec::with_capacity(n_cate);
    for c in 1..=n_cate as u16 {
        let mut union = Array2::<bool>::from_elem((h, w), false);
        let mut any = false;
        for inst in &tg.instances {
            if let Some(m) = inst.part_masks.get(&c) {
                any = true;
                union.zip_mut_with(m, |u, &v| *u |= v);
            }
        }
        cate_gt.push(any.then(|| downsample_mask(&union, stride, fh, fwid)));
    }

    let l_aux;
    let l_par;
    if n_assigned > 0 {
        let bank = bank.expect("nonempty selection");
        let assigned_bank = t.slice_axis0(bank, 0, n_assigned);
        let q_ins = model.instance_similarity(t, assigned_bank, fw.f_ins);
        let ins_gt: Vec<Array2<f64>> = assignment[..n_assigned]
            .iter()
            .map(|a| downsample_mask(&tg.instances[a.unwrap()].mask, stride, fh, fwid))
            .collect();
        l_aux = aux_loss(t, Some(q_ins), &ins_gt, fw.q_cate, &cate_gt)?;
        let q_par = model.fuse(t, &fw.leaves, q_ins, fw.q_cate, fw.f_cate);
        let par_gt: Vec<Vec<Option<Array2<f64>>>> = assignment[..n_assigned]
            .iter()
            .map(|a| {
                let inst = &tg.instances[a.unwrap()];
                (1..=n_cate as u16)
                    .map(|c| {
                        inst.part_masks
                            .get(&c)
                            .map(|m| downsample_mask(m, stride, fh, fwid))
                    })
                    .collect()
            })
            .collect();
        l_par = parsing_loss(t, Some(q_par), &par_gt)?;
    } else {
        l_aux = aux_loss(t, None, &[], fw.q_cate, &cate_gt)?;
        l_par = parsing_loss(t, None, &[])?;
    }

    let a_ins = bank.map(|b| similarity_matrix(t, b));
    let weights = same_instance_weights(&assignment);
    let a_cate = similarity_matrix(t, fw.kernel_rows);
    let l_metric = metric_loss(t, a_ins, Some(&weights), Some(a_cate))?;

    Ok(SampleLoss {
        leaves: fw.leaves,
        l_center,
        l_aux,
        l_par,
        l_metric,
    })
}

/// Runs SGD with momentum over the dataset in deterministic round-robin
/// order. Returns one record per step; the model is updated in place.
pub fn train(
    model: &mut UniParserModel,
    dataset: &[ParsingSample],
    tc: &TrainConfig,
) -> Result<Vec<StepRecord>> {
    tc.validate()?;
    if dataset.is_empty() {
        return Err(Error::Config("training dataset is empty".into()));
    }
    let hp = model.cfg.hyper.clone();
    let targets: Vec<SampleTargets> = dataset
        .iter()
        .map(|s| build_targets(s, hp.s, hp.sigma_center))
        .collect::<Result<_>>()?;

    let mut velocity: Vec<Arr> = model
        .ps
        .params
        .iter()
        .map(|p| Arr::zeros(p.value.raw_dim()))
        .collect();
    let mut history = Vec::with_capacity(tc.total_steps);

    for step in 0..tc.total_steps {
        let lr = tc.learning_rate(step);
        let mut t = Tape::new();
        let mut parts: Vec<SampleLoss> = Vec::with_capacity(tc.batch_size);
        for k in 0..tc.batch_size {
            let idx = (step * tc.batch_size + k) % dataset.len();
            parts.push(sample_loss(model, &mut t, &dataset[idx], &targets[idx])?);
        }
        let inv_b = 1.0 / tc.batch_size as f64;
        let mean_of = |t: &mut Tape, pick: &dyn Fn(&SampleLoss) -> VarId| {
            let mut acc = pick(&parts[0]);
            for p in &parts[1..] {
                acc = t.add(acc, pick(p));
            }
            t.scale(acc, inv_b)
        };
        let lc = mean_of(&mut t, &|p| p.l_center);
        let la = mean_of(&mut t, &|p| p.l_aux);
        let lp = mean_of(&mut t, &|p| p.l_par);
        let lm = mean_of(&mut t, &|p| p.l_metric);
        let lt = total_loss(&mut t, lc, la, lp, lm, &hp);

        let report = LossReport::new(
            t.scalar_value(lc),
            t.scalar_value(la),
            t.scalar_value(lp),
            t.scalar_value(lm),
            &hp,
        )
        .map_err(|e| match e {
            Error::NonFiniteLoss(m) => Error::NonFiniteLoss(format!("step {step}: {m}")),
            other => other,
        })?;

        let grads = t.backward(lt);
        for (pi, param) in model.ps.params.iter_mut().enumerate() {
            let mut g = Arr::zeros(param.value.raw_dim());
            for part in &parts {
                if let Some(gp) = grads.get(part.leaves[pi]) {
                    g += gp;
                }
            }
            if tc.grad_check_mode && g.iter().any(|v| !v.is_finite()) {
                return Err(Error::NonFiniteLoss(format!(
                    "step {step}: non-finite gradient for {}",
                    param.name
                )));
            }
            let v = &mut velocity[pi];
            *v *= tc.momentum;
            *v += &g;
            param.value.scaled_add(-lr, v);
        }
        history.push(StepRecord { step, report, lr });
    }
    Ok(history)
}
