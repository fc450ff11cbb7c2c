//! Minimal reverse-mode autodiff over dynamic-dimension f64 arrays.
//!
//! A `Tape` records a topologically ordered computation graph; `backward`
//! walks it in reverse creation order. Only the ops the model needs exist
//! here, each with a hand-written adjoint. Everything is deterministic:
//! no threading, fixed accumulation order.

use ndarray::prelude::*;
use ndarray::{concatenate, Axis, Slice};

pub type Arr = ArrayD<f64>;
pub type VarId = usize;

type BackFn = Box<dyn Fn(&[Arr], &Arr) -> Vec<Arr>>;

#[derive(Default)]
pub struct Tape {
    values: Vec<Arr>,
    parents: Vec<Vec<VarId>>,
    backs: Vec<Option<BackFn>>,
}

pub struct Grads(Vec<Option<Arr>>);

impl Grads {
    pub fn get(&self, id: VarId) -> Option<&Arr> {
        self.0.get(id).and_then(|g| g.as_ref())
    }
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn value(&self, id: VarId) -> &Arr {
        &self.values[id]
    }

    pub fn scalar_value(&self, id: VarId) -> f64 {
        *self.values[id].iter().next().expect("scalar node")
    }

    fn push(&mut self, value: Arr, parents: Vec<VarId>, back: Option<BackFn>) -> VarId {
        self.values.push(value);
        self.parents.push(parents);
        self.backs.push(back);
        self.values.len() - 1
    }

    pub fn leaf(&mut self, value: Arr) -> VarId {
        self.push(value, vec![], None)
    }

    pub fn backward(&self, root: VarId) -> Grads {
        let mut grads: Vec<Option<Arr>> = (0..self.values.len()).map(|_| None).collect();
        grads[root] = Some(Arr::ones(self.values[root].raw_dim()));
        for i in (0..=root).rev() {
            let Some(gi) = grads[i].take() else { continue };
            if let Some(back) = &self.backs[i] {
                let parent_grads = back(&self.values, &gi);
                debug_assert_eq!(parent_grads.len(), self.parents[i].len());
                for (&p, pg) in self.parents[i].iter().zip(parent_grads) {
                    match &mut grads[p] {
                        Some(acc) => *acc += &pg,
                        slot => *slot = Some(pg),
                    }
                }
            }
            grads[i] = Some(gi);
        }
        Grads(grads)
    }

    // ---- elementwise ----

    fn unary<F, D>(&mut self, a: VarId, f: F, df: D) -> VarId
    where
        F: Fn(f64) -> f64,
        D: Fn(f64) -> f64 + 'static,
    {
        let out = self.values[a].mapv(f);
        let back: BackFn = Box::new(move |vals, g| {
            let mut pg = g.clone();
            ndarray::Zip::from(&mut pg).and(&vals[a]).for_each(|gv, &xv| {
                *gv *= df(xv);
            });
            vec![pg]
        });
        self.push(out, vec![a], Some(back))
    }

    /// Unary op whose derivative is expressed through the *output* value.
    fn unary_on_output<F, D>(&mut self, a: VarId, f: F, df: D) -> VarId
    where
        F: Fn(f64) -> f64,
        D: Fn(f64) -> f64 + 'static,
    {
        let out = self.values[a].mapv(f);
        let id_hint = self.values.len(); // id this node will get
        let back: BackFn = Box::new(move |vals, g| {
            let y = &vals[id_hint];
            let mut pg = g.clone();
            ndarray::Zip::from(&mut pg).and(y).for_each(|gv, &yv| {
                *gv *= df(yv);
            });
            vec![pg]
        });
        self.push(out, vec![a], Some(back))
    }

    pub fn add(&mut self, a: VarId, b: VarId) -> VarId {
        assert_eq!(self.values[a].shape(), self.values[b].shape(), "add shape");
        let out = &self.values[a] + &self.values[b];
        let back: BackFn = Box::new(|_, g| vec![g.clone(), g.clone()]);
        self.push(out, vec![a, b], Some(back))
    }

    pub fn sub(&mut self, a: VarId, b: VarId) -> VarId {
        assert_eq!(self.values[a].shape(), self.values[b].shape(), "sub shape");
        let out = &self.values[a] - &self.values[b];
        let back: BackFn = Box::new(|_, g| vec![g.clone(), g.mapv(|v| -v)]);
        self.push(out, vec![a, b], Some(back))
    }

    pub fn mul(&mut self, a: VarId, b: VarId) -> VarId {
        assert_eq!(self.values[a].shape(), self.values[b].shape(), "mul shape");
        let out = &self.values[a] * &self.values[b];
        let back: BackFn = Box::new(move |vals, g| vec![g * &vals[b], g * &vals[a]]);
        self.push(out, vec![a, b], Some(back))
    }

    pub fn scale(&mut self, a: VarId, k: f64) -> VarId {
        let out = self.values[a].mapv(|v| v * k);
        let back: BackFn = Box::new(move |_, g| vec![g.mapv(|v| v * k)]);
        self.push(out, vec![a], Some(back))
    }

    pub fn add_scalar(&mut self, a: VarId, k: f64) -> VarId {
        let out = self.values[a].mapv(|v| v + k);
        let back: BackFn = Box::new(|_, g| vec![g.clone()]);
        self.push(out, vec![a], Some(back))
    }

    pub fn neg(&mut self, a: VarId) -> VarId {
        self.scale(a, -1.0)
    }

    pub fn relu(&mut self, a: VarId) -> VarId {
        self.unary(a, |x| x.max(0.0), |x| if x > 0.0 { 1.0 } else { 0.0 })
    }

    pub fn sigmoid(&mut self, a: VarId) -> VarId {
        self.unary_on_output(a, |x| 1.0 / (1.0 + (-x).exp()), |y| y * (1.0 - y))
    }

    pub fn ln(&mut self, a: VarId) -> VarId {
        self.unary(a, |x| x.ln(), |x| 1.0 / x)
    }

    pub fn sqrt(&mut self, a: VarId) -> VarId {
        self.unary_on_output(a, |x| x.sqrt(), |y| 0.5 / y)
    }

    pub fn square(&mut self, a: VarId) -> VarId {
        self.unary(a, |x| x * x, |x| 2.0 * x)
    }

    pub fn abs(&mut self, a: VarId) -> VarId {
        self.unary(a, |x| x.abs(), |x| {
            if x > 0.0 {
                1.0
            } else if x < 0.0 {
                -1.0
            } else {
                0.0
            }
        })
    }

    pub fn recip(&mut self, a: VarId) -> VarId {
        self.unary(a, |x| 1.0 / x, |x| -1.0 / (x * x))
    }

    /// Clamp to [lo, hi]; gradient passes through strictly inside the range.
    pub fn clamp(&mut self, a: VarId, lo: f64, hi: f64) -> VarId {
        self.unary(
            a,
            move |x| x.clamp(lo, hi),
            move |x| if x > lo && x < hi { 1.0 } else { 0.0 },
        )
    }

    /// max(a, k); gradient passes through where a > k.
    pub fn max_scalar(&mut self, a: VarId, k: f64) -> VarId {
        self.unary(a, move |x| x.max(k), move |x| if x > k { 1.0 } else { 0.0 })
    }

    /// Elementwise minimum; ties route the gradient to `a`.
    pub fn min2(&mut self, a: VarId, b: VarId) -> VarId {
        assert_eq!(self.values[a].shape(), self.values[b].shape(), "min2 shape");
        let out = ndarray::Zip::from(&self.values[a])
            .and(&self.values[b])
            .map_collect(|&x, &y| x.min(y));
        let back: BackFn = Box::new(move |vals, g| {
            let (va, vb) = (&vals[a], &vals[b]);
            let ga = ndarray::Zip::from(g)
                .and(va)
                .and(vb)
                .map_collect(|&gv, &x, &y| if x <= y { gv } else { 0.0 });
            let gb = ndarray::Zip::from(g)
                .and(va)
                .and(vb)
                .map_collect(|&gv, &x, &y| if y < x { gv } else { 0.0 });
            vec![ga, gb]
        });
        self.push(out, vec![a, b], Some(back))
    }

    // ---- reductions / shape ----

    pub fn sum_all(&mut self, a: VarId) -> VarId {
        let shape = self.values[a].raw_dim();
        let out = ndarray::arr0(self.values[a].sum()).into_dyn();
        let back: BackFn = Box::new(move |_, g| {
            let gv = *g.iter().next().unwrap();
            vec![Arr::from_elem(shape.clone(), gv)]
        });
        self.push(out, vec![a], Some(back))
    }

    pub fn mean_all(&mut self, a: VarId) -> VarId {
        let n = self.values[a].len() as f64;
        let s = self.sum_all(a);
        self.scale(s, 1.0 / n)
    }

    pub fn sum_axis_keep(&mut self, a: VarId, axis: usize) -> VarId {
        let out = self.values[a]
            .sum_axis(Axis(axis))
            .insert_axis(Axis(axis))
            .into_dyn();
        let shape: Vec<usize> = self.values[a].shape().to_vec();
        let back: BackFn = Box::new(move |_, g| {
            let mut pg = Arr::zeros(IxDyn(&shape));
            for mut lane in pg.axis_iter_mut(Axis(axis)) {
                lane += &g.index_axis(Axis(axis), 0);
            }
            vec![pg]
        });
        self.push(out, vec![a], Some(back))
    }

    /// Broadcast a size-1 axis to length `n`.
    pub fn expand_axis(&mut self, a: VarId, axis: usize, n: usize) -> VarId {
        assert_eq!(self.values[a].shape()[axis], 1, "expand_axis needs size 1");
        let mut shape: Vec<usize> = self.values[a].shape().to_vec();
        shape[axis] = n;
        let out = self.values[a]
            .broadcast(IxDyn(&shape))
            .expect("broadcast")
            .to_owned();
        let back: BackFn = Box::new(move |_, g| {
            vec![g.sum_axis(Axis(axis)).insert_axis(Axis(axis)).into_dyn()]
        });
        self.push(out, vec![a], Some(back))
    }

    pub fn reshape(&mut self, a: VarId, shape: &[usize]) -> VarId {
        let orig: Vec<usize> = self.values[a].shape().to_vec();
        let out = self.values[a]
            .clone()
            .into_shape_with_order(IxDyn(shape))
            .expect("reshape size mismatch");
        let back: BackFn = Box::new(move |_, g| {
            vec![g
                .clone()
                .into_shape_with_order(IxDyn(&orig))
                .expect("reshape back")]
        });
        self.push(out, vec![a], Some(back))
    }

    pub fn concat(&mut self, axis: usize, ids: &[VarId]) -> VarId {
        assert!(!ids.is_empty());
        let views: Vec<_> = ids.iter().map(|&i| self.values[i].view()).collect();
        let out = concatenate(Axis(axis), &views).expect("concat shapes");
        let sizes: Vec<usize> = ids.iter().map(|&i| self.values[i].shape()[axis]).collect();
        let back: BackFn = Box::new(move |_, g| {
            let mut offs = 0isize;
            let mut parts = Vec::with_capacity(sizes.len());
            for &s in &sizes {
                let sl = g
                    .slice_axis(Axis(axis), Slice::from(offs..offs + s as isize))
                    .to_owned();
                parts.push(sl);
                offs += s as isize;
            }
            parts
        });
        self.push(out, ids.to_vec(), Some(back))
    }

    /// Contiguous slice along axis 0; backward zero-pads.
    pub fn slice_axis0(&mut self, a: VarId, start: usize, len: usize) -> VarId {
        let out = self.values[a]
            .slice_axis(Axis(0), Slice::from(start..start + len))
            .to_owned();
        let shape: Vec<usize> = self.values[a].shape().to_vec();
        let back: BackFn = Box::new(move |_, g| {
            let mut pg = Arr::zeros(IxDyn(&shape));
            pg.slice_axis_mut(Axis(0), Slice::from(start..start + len))
                .assign(g);
            vec![pg]
        });
        self.push(out, vec![a], Some(back))
    }

    pub fn transpose2(&mut self, a: VarId) -> VarId {
        assert_eq!(self.values[a].ndim(), 2);
        let out = self.values[a].t().to_owned();
        let back: BackFn = Box::new(|_, g| vec![g.t().to_owned()]);
        self.push(out, vec![a], Some(back))
    }

    pub fn matmul(&mut self, a: VarId, b: VarId) -> VarId {
        let av = as2(&self.values[a]);
        let bv = as2(&self.values[b]);
        let out = av.dot(&bv).into_dyn();
        let back: BackFn = Box::new(move |vals, g| {
            let g2 = as2(g);
            let av = as2(&vals[a]);
            let bv = as2(&vals[b]);
            vec![g2.dot(&bv.t()).into_dyn(), av.t().dot(&g2).into_dyn()]
        });
        self.push(out, vec![a, b], Some(back))
    }

    /// Extract per-pixel feature vectors at the given (row, col) locations.
    /// Input C×H×W, output K×C.
    pub fn gather_pixels(&mut self, a: VarId, coords: &[(usize, usize)]) -> VarId {
        let x = &self.values[a];
        let (c, _h, w) = dims3(x);
        let k = coords.len();
        let mut out = Array2::<f64>::zeros((k, c));
        for (ki, &(r, cc)) in coords.iter().enumerate() {
            for ch in 0..c {
                out[[ki, ch]] = x[[ch, r, cc]];
            }
        }
        let coords = coords.to_vec();
        let shape: Vec<usize> = x.shape().to_vec();
        let _ = w;
        let back: BackFn = Box::new(move |_, g| {
            let g2 = as2(g);
            let mut pg = Arr::zeros(IxDyn(&shape));
            for (ki, &(r, cc)) in coords.iter().enumerate() {
                for ch in 0..shape[0] {
                    pg[[ch, r, cc]] += g2[[ki, ch]];
                }
            }
            vec![pg]
        });
        self.push(out.into_dyn(), vec![a], Some(back))
    }

    // ---- structured ops ----

    /// 2-D convolution on a C×H×W map with O×C×kh×kw weights and O bias.
    pub fn conv2d(&mut self, x: VarId, w: VarId, b: VarId, stride: usize, pad: usize) -> VarId {
        let xv = &self.values[x];
        let wv = &self.values[w];
        let (cin, h, wid) = dims3(xv);
        let wsh = wv.shape();
        let (cout, kc, kh, kw) = (wsh[0], wsh[1], wsh[2], wsh[3]);
        assert_eq!(cin, kc, "conv2d channel mismatch");
        let ho = (h + 2 * pad - kh) / stride + 1;
        let wo = (wid + 2 * pad - kw) / stride + 1;

        let cols = im2col(xv, kh, kw, stride, pad, ho, wo);
        let w2 = as2_shaped(wv, cout, cin * kh * kw);
        let mut out2 = w2.dot(&cols); // cout × (ho*wo)
        let bv = &self.values[b];
        for (o, mut row) in out2.axis_iter_mut(Axis(0)).enumerate() {
            row += bv[[o]];
        }
        let out = out2
            .into_shape_with_order((cout, ho, wo))
            .unwrap()
            .into_dyn();

        let back: BackFn = Box::new(move |vals, g| {
            let xv = &vals[x];
            let wv = &vals[w];
            let g2 = as2_shaped(g, cout, ho * wo);
            let cols = im2col(xv, kh, kw, stride, pad, ho, wo);
            let gw = g2.dot(&cols.t()); // cout × (cin*kh*kw)
            let gw = gw
                .into_shape_with_order((cout, cin, kh, kw))
                .unwrap()
                .into_dyn();
            let gb = g2.sum_axis(Axis(1)).into_dyn();
            let w2 = as2_shaped(wv, cout, cin * kh * kw);
            let gcols = w2.t().dot(&g2); // (cin*kh*kw) × (ho*wo)
            let gx = col2im(&gcols, cin, h, wid, kh, kw, stride, pad, ho, wo);
            vec![gx, gw, gb]
        });
        self.push(out, vec![x, w, b], Some(back))
    }

    /// Bilinear resize of a C×H×W map (align-corners = false).
    pub fn bilinear_resize(&mut self, a: VarId, out_h: usize, out_w: usize) -> VarId {
        let xv = &self.values[a];
        let (c, h, w) = dims3(xv);
        let ytab = bilinear_taps(h, out_h);
        let xtab = bilinear_taps(w, out_w);
        let mut out = Array3::<f64>::zeros((c, out_h, out_w));
        for ch in 0..c {
            for (oy, &(y0, y1, wy0, wy1)) in ytab.iter().enumerate() {
                for (ox, &(x0, x1, wx0, wx1)) in xtab.iter().enumerate() {
                    out[[ch, oy, ox]] = wy0 * wx0 * xv[[ch, y0, x0]]
                        + wy0 * wx1 * xv[[ch, y0, x1]]
                        + wy1 * wx0 * xv[[ch, y1, x0]]
                        + wy1 * wx1 * xv[[ch, y1, x1]];
                }
            }
        }
        let back: BackFn = Box::new(move |vals, g| {
            let (c, h, w) = dims3(&vals[a]);
            let mut pg = Array3::<f64>::zeros((c, h, w));
            for ch in 0..c {
                for (oy, &(y0, y1, wy0, wy1)) in ytab.iter().enumerate() {
                    for (ox, &(x0, x1, wx0, wx1)) in xtab.iter().enumerate() {
                        let gv = g[[ch, oy, ox]];
                        pg[[ch, y0, x0]] += wy0 * wx0 * gv;
                        pg[[ch, y0, x1]] += wy0 * wx1 * gv;
                        pg[[ch, y1, x0]] += wy1 * wx0 * gv;
                        pg[[ch, y1, x1]] += wy1 * wx1 * gv;
                    }
                }
            }
            vec![pg.into_dyn()]
        });
        self.push(out.into_dyn(), vec![a], Some(back))
    }

    // ---- composed helpers ----

    /// L2-normalize along `axis` with an epsilon guard: x / max(||x||, eps).
    pub fn l2_normalize_axis(&mut self, a: VarId, axis: usize, eps: f64) -> VarId {
        let n = self.values[a].shape()[axis];
        let sq = self.square(a);
        let ssum = self.sum_axis_keep(sq, axis);
        // eps inside the sqrt keeps the derivative finite at zero vectors
        let guarded = self.add_scalar(ssum, eps * eps);
        let norm = self.sqrt(guarded);
        let inv = self.recip(norm);
        let invb = self.expand_axis(inv, axis, n);
        self.mul(a, invb)
    }

    /// Group normalization over a C×H×W map, with per-channel affine params
    /// gamma and beta of shape [C].
    pub fn group_norm(
        &mut self,
        a: VarId,
        groups: usize,
        gamma: VarId,
        beta: VarId,
        eps: f64,
    ) -> VarId {
        let (c, h, w) = dims3(&self.values[a]);
        assert_eq!(c % groups, 0, "channels divisible by groups");
        let per = c / groups * h * w;
        let g2 = self.reshape(a, &[groups, per]);
        let s = self.sum_axis_keep(g2, 1);
        let mean = self.scale(s, 1.0 / per as f64);
        let meanb = self.expand_axis(mean, 1, per);
        let centered = self.sub(g2, meanb);
        let csq = self.square(centered);
        let vsum = self.sum_axis_keep(csq, 1);
        let var = self.scale(vsum, 1.0 / per as f64);
        let vareps = self.add_scalar(var, eps);
        let std = self.sqrt(vareps);
        let inv = self.recip(std);
        let invb = self.expand_axis(inv, 1, per);
        let xhat = self.mul(centered, invb);
        let xhat = self.reshape(xhat, &[c, h, w]);
        let gam3 = self.reshape(gamma, &[c, 1, 1]);
        let gam3 = self.expand_axis(gam3, 1, h);
        let gam3 = self.expand_axis(gam3, 2, w);
        let bet3 = self.reshape(beta, &[c, 1, 1]);
        let bet3 = self.expand_axis(bet3, 1, h);
        let bet3 = self.expand_axis(bet3, 2, w);
        let scaled = self.mul(xhat, gam3);
        self.add(scaled, bet3)
    }

    /// Mean absolute value of a tensor.
    pub fn mean_abs(&mut self, a: VarId) -> VarId {
        let ab = self.abs(a);
        self.mean_all(ab)
    }
}

fn as2(a: &Arr) -> ArrayView2<'_, f64> {
    a.view().into_dimensionality::<Ix2>().expect("2-d array")
}

fn as2_shaped(a: &Arr, r: usize, c: usize) -> Array2<f64> {
    a.view()
        .into_shape_with_order((r, c))
        .expect("contiguous reshape")
        .to_owned()
}

pub fn dims3(a: &Arr) -> (usize, usize, usize) {
    let s = a.shape();
    assert_eq!(s.len(), 3, "expected 3-d array, got {:?}", s);
    (s[0], s[1], s[2])
}

fn im2col(
    x: &Arr,
    kh: usize,
    kw: usize,
    stride: usize,
    pad: usize,
    ho: usize,
    wo: usize,
) -> Array2<f64> {
    let (c, h, w) = dims3(x);
    let mut cols = Array2::<f64>::zeros((c * kh * kw, ho * wo));
    for ch in 0..c {
        for ki in 0..kh {
            for kj in 0..kw {
                let row = (ch * kh + ki) * kw + kj;
                for oy in 0..ho {
                    let sy = oy * stride + ki;
                    if sy < pad || sy >= h + pad {
                        continue;
                    }
                    let iy = sy - pad;
                    for ox in 0..wo {
                        let sx = ox * stride + kj;
                        if sx < pad || sx >= w + pad {
                            continue;
                        }
                        cols[[row, oy * wo + ox]] = x[[ch, iy, sx - pad]];
                    }
                }
            }
        }
    }
    cols
}

#[allow(clippy::too_many_arguments)]
fn col2im(
    gcols: &Array2<f64>,
    c: usize,
    h: usize,
    w: usize,
    kh: usize,
    kw: usize,
    stride: usize,
    pad: usize,
    ho: usize,
    wo: usize,
) -> Arr {
    let mut gx = Array3::<f64>::zeros((c, h, w));
    for ch in 0..c {
        for ki in 0..kh {
            for kj in 0..kw {
                let row = (ch * kh + ki) * kw + kj;
                for oy in 0..ho {
                    let sy = oy * stride + ki;
                    if sy < pad || sy >= h + pad {
                        continue;
                    }
                    let iy = sy - pad;
                    for ox in 0..wo {
                        let sx = ox * stride + kj;
                        if sx < pad || sx >= w + pad {
                            continue;
                        }
                        gx[[ch, iy, sx - pad]] += gcols[[row, oy * wo + ox]];
                    }
                }
            }
        }
    }
    gx.into_dyn()
}

/// Source taps and weights for one output axis of an align-corners-false
/// bilinear resize. Returns (i0, i1, w0, w1) per output index.
pub fn bilinear_taps(in_len: usize, out_len: usize) -> Vec<(usize, usize, f64, f64)> {
    let scale = in_len as f64 / out_len as f64;
    (0..out_len)
        .map(|o| {
            let s = (o as f64 + 0.5) * scale - 0.5;
            let s = s.max(0.0).min(in_len as f64 - 1.0);
            let i0 = s.floor() as usize;
            let i1 = (i0 + 1).min(in_len - 1);
            let w1 = s - i0 as f64;
            (i0, i1, 1.0 - w1, w1)
        })
        .collect()
}
