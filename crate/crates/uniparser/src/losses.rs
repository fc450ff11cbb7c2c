//! The four training loss terms and their weighted total: focal center
//! loss, auxiliary similarity loss, parsing loss, and the kernel metric
//! loss, all differentiable on the tape.

use ndarray::prelude::*;

use crate::autodiff::{Arr, Tape, VarId};
use crate::datamodel::HyperParams;
use crate::error::{Error, Result};

pub const DICE_EPS: f64 = 1e-6;
pub const FOCAL_GAMMA: f64 = 2.0;
pub const FOCAL_ALPHA: f64 = 0.25;
const PROB_EPS: f64 = 1e-6;

/// V-Net dice loss: 1 - 2*sum(p*g) / (sum(p^2) + sum(g^2) + eps).
/// Predictions are clamped to [0,1] first, so cosine similarities <= 0
/// count as empty prediction.
pub fn dice_loss(t: &mut Tape, pred: VarId, gt: &Arr) -> Result<VarId> {
    if t.value(pred).shape() != gt.shape() {
        return Err(Error::BadShape(format!(
            "dice shapes differ: {:?} vs {:?}",
            t.value(pred).shape(),
            gt.shape()
        )));
    }
    let p = t.clamp(pred, 0.0, 1.0);
    let g = t.leaf(gt.clone());
    let pg = t.mul(p, g);
    let inter = t.sum_all(pg);
    let p2 = t.square(p);
    let sp2 = t.sum_all(p2);
    let denom = t.add_scalar(sp2, gt.mapv(|v| v * v).sum() + DICE_EPS);
    let inv = t.recip(denom);
    let ratio = t.mul(inter, inv);
    let neg = t.scale(ratio, -2.0);
    Ok(t.add_scalar(neg, 1.0))
}

/// Mean binary focal loss (gamma = 2, alpha = 0.25) over all grid cells.
pub fn focal_center_loss(t: &mut Tape, h_c: VarId, gt: &Arr) -> Result<VarId> {
    if t.value(h_c).len() != gt.len() {
        return Err(Error::BadShape(format!(
            "focal shapes differ: {:?} vs {:?}",
            t.value(h_c).shape(),
            gt.shape()
        )));
    }
    let gt = gt
        .clone()
        .into_shape_with_order(t.value(h_c).raw_dim())
        .expect("same element count");
    let p = t.clamp(h_c, PROB_EPS, 1.0 - PROB_EPS);
    let ln_p = t.ln(p);
    let mp = t.scale(p, -1.0);
    let one_minus_p = t.add_scalar(mp, 1.0);
    let ln_1mp = t.ln(one_minus_p);
    let sq_1mp = t.square(one_minus_p);
    let pos = t.mul(sq_1mp, ln_p);
    let pos = t.scale(pos, -FOCAL_ALPHA);
    let sq_p = t.square(p);
    let neg = t.mul(sq_p, ln_1mp);
    let neg = t.scale(neg, -(1.0 - FOCAL_ALPHA));
    let g = t.leaf(gt.clone());
    let g1m = t.leaf(gt.mapv(|v| 1.0 - v));
    let pos_term = t.mul(g, pos);
    let neg_term = t.mul(g1m, neg);
    let sum = t.add(pos_term, neg_term);
    Ok(t.mean_all(sum))
}

fn zero_scalar(t: &mut Tape) -> VarId {
    t.leaf(ndarray::arr0(0.0).into_dyn())
}

fn slice_map(t: &mut Tape, stack: VarId, i: usize) -> VarId {
    let shape: Vec<usize> = t.value(stack).shape()[1..].to_vec();
    let s = t.slice_axis0(stack, i, 1);
    t.reshape(s, &shape)
}

/// Auxiliary loss over the two builders: mean instance dice over the
/// kernel bank plus the per-category term, where absent categories are
/// pulled to zero with an L1 penalty.
pub fn aux_loss(
    t: &mut Tape,
    q_ins: Option<VarId>,
    ins_gt: &[Array2<f64>],
    q_cate: VarId,
    cate_gt: &[Option<Array2<f64>>],
) -> Result<VarId> {
    let mut total = zero_scalar(t);
    if let Some(q) = q_ins {
        let k = t.value(q).shape()[0];
        assert_eq!(k, ins_gt.len(), "one GT mask per instance kernel");
        if k > 0 {
            let mut acc = zero_scalar(t);
            for (i, gt) in ins_gt.iter().enumerate() {
                let m = slice_map(t, q, i);
                let d = dice_loss(t, m, &gt.clone().into_dyn())?;
                acc = t.add(acc, d);
            }
            let mean = t.scale(acc, 1.0 / k as f64);
            total = t.add(total, mean);
        }
    }
    let n_cate = t.value(q_cate).shape()[0];
    assert_eq!(n_cate, cate_gt.len(), "one entry per category");
    if n_cate > 0 {
        let mut acc = zero_scalar(t);
        for (c, gt) in cate_gt.iter().enumerate() {
            let m = slice_map(t, q_cate, c);
            let term = match gt {
                Some(mask) => dice_loss(t, m, &mask.clone().into_dyn())?,
                None => t.mean_abs(m),
            };
            acc = t.add(acc, term);
        }
        let mean = t.scale(acc, 1.0 / n_cate as f64);
        total = t.add(total, mean);
    }
    Ok(total)
}

/// Parsing loss over the fused stack: dice against the part mask for
/// (instance, category) pairs the instance contains, L1-to-zero otherwise.
/// `gt[i][c]` is the part mask of category c for the instance assigned to
/// kernel i (None when the instance lacks that category).
pub fn parsing_loss(
    t: &mut Tape,
    q_parsing: Option<VarId>,
    gt: &[Vec<Option<Array2<f64>>>],
) -> Result<VarId> {
    let Some(q) = q_parsing else {
        return Ok(zero_scalar(t));
    };
    let k = gt.len();
    if k == 0 {
        return Ok(zero_scalar(t));
    }
    let n_cate = gt[0].len();
    assert_eq!(t.value(q).shape()[0], k * n_cate, "flattened stack size");
    let mut acc = zero_scalar(t);
    for (i, row) in gt.iter().enumerate() {
        for (c, cell) in row.iter().enumerate() {
            let m = slice_map(t, q, crate::datamodel::parsing_index(i, c, n_cate));
            let term = match cell {
                Some(mask) => dice_loss(t, m, &mask.clone().into_dyn())?,
                None => t.mean_abs(m),
            };
            acc = t.add(acc, term);
        }
    }
    Ok(t.scale(acc, 1.0 / (k * n_cate) as f64))
}

/// Pairwise cosine similarity matrix A = V * V^T of a row bank.
pub fn similarity_matrix(t: &mut Tape, bank: VarId) -> VarId {
    let bt = t.transpose2(bank);
    t.matmul(bank, bt)
}

/// Sum of |A - I| over both kernel similarity matrices, divided by
/// (N_cate + N_c). `ins_weights` zeroes out off-diagonal pairs whose
/// kernels supervise the same ground-truth instance.
pub fn metric_loss(
    t: &mut Tape,
    a_ins: Option<VarId>,
    ins_weights: Option<&Array2<f64>>,
    a_cate: Option<VarId>,
) -> Result<VarId> {
    let n_c = a_ins.map_or(0, |a| t.value(a).shape()[0]);
    let n_cate = a_cate.map_or(0, |a| t.value(a).shape()[0]);
    if n_c + n_cate == 0 {
        return Ok(zero_scalar(t));
    }
    let mut num = zero_scalar(t);
    for (a, w) in [(a_ins, ins_weights), (a_cate, None)] {
        let Some(a) = a else { continue };
        let n = t.value(a).shape()[0];
        let eye = t.leaf(Array2::<f64>::eye(n).into_dyn());
        let e = t.sub(a, eye);
        let e = t.abs(e);
        let e = match w {
            Some(wm) => {
                assert_eq!(wm.dim(), (n, n));
                let wl = t.leaf(wm.clone().into_dyn());
                t.mul(e, wl)
            }
            None => e,
        };
        let s = t.sum_all(e);
        num = t.add(num, s);
    }
    Ok(t.scale(num, 1.0 / (n_c + n_cate) as f64))
}

/// Inclusion weights for the instance similarity matrix: an off-diagonal
/// pair is penalized only when both kernels are assigned to (distinct)
/// instances. Pairs sharing an instance must stay similar, and kernels
/// from spurious center firings (None = unassigned) have unknown identity,
/// so neither kind may be pushed apart.
/// `assignment[k]` is the GT instance of kernel k.
pub fn same_instance_weights(assignment: &[Option<usize>]) -> Array2<f64> {
    let k = assignment.len();
    Array2::from_shape_fn((k, k), |(i, j)| {
        if i == j {
            return 1.0;
        }
        match (assignment[i], assignment[j]) {
            (Some(a), Some(b)) if a != b => 1.0,
            _ => 0.0,
        }
    })
}

/// Weighted total on the tape.
pub fn total_loss(
    t: &mut Tape,
    l_center: VarId,
    l_aux: VarId,
    l_par: VarId,
    l_metric: VarId,
    hp: &HyperParams,
) -> VarId {
    let a = t.scale(l_aux, hp.lambda_aux);
    let p = t.scale(l_par, hp.lambda_par);
    let m = t.scale(l_metric, hp.lambda_metric);
    let s = t.add(l_center, a);
    let s = t.add(s, p);
    t.add(s, m)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossReport {
    pub l_center: f64,
    pub l_aux: f64,
    pub l_par: f64,
    pub l_metric: f64,
    pub l_total: f64,
}

impl LossReport {
    pub fn new(l_center: f64, l_aux: f64, l_par: f64, l_metric: f64, hp: &HyperParams) -> Result<Self> {
        for (name, v) in [
            ("l_center", l_center),
            ("l_aux", l_aux),
            ("l_par", l_par),
            ("l_metric", l_metric),
        ] {
            if !v.is_finite() {
                return Err(Error::NonFiniteLoss(format!("{name} = {v}")));
            }
        }
        Ok(Self {
            l_center,
            l_aux,
            l_par,
            l_metric,
            l_total: l_center
                + hp.lambda_aux * l_aux
                + hp.lambda_par * l_par
                + hp.lambda_metric * l_metric,
        })
    }
}
