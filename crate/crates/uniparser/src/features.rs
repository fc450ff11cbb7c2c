//! Small trainable backbone + FPN-style neck producing the shared feature
//! map F_neck, plus coordinate concatenation and resize utilities.

use ndarray::prelude::*;
use rand::Rng;

use crate::autodiff::{bilinear_taps, dims3, Arr, Tape, VarId};
use crate::error::{Error, Result};
use crate::nn::{Conv2d, ConvBlock, ParamSet};

#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BackboneConfig {
    /// Output channels per stage; stage i has stride out_stride * 2^i.
    pub stage_channels: Vec<usize>,
    pub neck_channels: usize,
    /// Stride of the finest stage; must be a power of two >= 2.
    pub out_stride: usize,
}

impl Default for BackboneConfig {
    fn default() -> Self {
        Self {
            stage_channels: vec![16, 32, 64, 64],
            neck_channels: 64,
            out_stride: 4,
        }
    }
}

impl BackboneConfig {
    pub fn validate(&self) -> Result<()> {
        if self.stage_channels.len() < 2 {
            return Err(Error::Config("backbone needs >= 2 stages".into()));
        }
        if !self.out_stride.is_power_of_two() || self.out_stride < 2 {
            return Err(Error::Config(format!(
                "out_stride must be a power of two >= 2, got {}",
                self.out_stride
            )));
        }
        Ok(())
    }

    /// Coarsest stride; input sizes must be divisible by this.
    pub fn max_stride(&self) -> usize {
        self.out_stride << (self.stage_channels.len() - 1)
    }
}

/// Plain convnet backbone: a stride-reducing stem to `out_stride`, then one
/// stride-2 block per further stage.
#[derive(Debug, Clone)]
pub struct Backbone {
    pub cfg: BackboneConfig,
    stem: Vec<ConvBlock>,
    stages: Vec<ConvBlock>,
}

impl Backbone {
    pub fn new(ps: &mut ParamSet, rng: &mut impl Rng, cfg: BackboneConfig) -> Result<Self> {
        cfg.validate()?;
        let mut stem = Vec::new();
        let steps = cfg.out_stride.trailing_zeros() as usize;
        let mut cin = 3;
        for s in 0..steps {
            let cout = cfg.stage_channels[0];
            stem.push(ConvBlock::new(ps, rng, &format!("backbone.stem{s}"), cin, cout, 2));
            cin = cout;
        }
        let mut stages = Vec::new();
        for (i, &cout) in cfg.stage_channels.iter().enumerate().skip(1) {
            stages.push(ConvBlock::new(
                ps,
                rng,
                &format!("backbone.stage{i}"),
                cin,
                cout,
                2,
            ));
            cin = cout;
        }
        Ok(Self { cfg, stem, stages })
    }

    /// One feature per stage, strides out_stride * 2^i.
    pub fn extract_pyramid(
        &self,
        t: &mut Tape,
        leaves: &[VarId],
        image: VarId,
    ) -> Result<Vec<(VarId, usize)>> {
        let (c, h, w) = dims3(t.value(image));
        if c != 3 {
            return Err(Error::BadShape(format!("expected 3-channel image, got {c}")));
        }
        let ms = self.cfg.max_stride();
        if h % ms != 0 || w % ms != 0 {
            return Err(Error::BadShape(format!(
                "image {h}x{w} not divisible by max stride {ms}"
            )));
        }
        let mut x = image;
        for block in &self.stem {
            x = block.forward(t, leaves, x);
        }
        let mut out = vec![(x, self.cfg.out_stride)];
        let mut stride = self.cfg.out_stride;
        for block in &self.stages {
            x = block.forward(t, leaves, x);
            stride *= 2;
            out.push((x, stride));
        }
        Ok(out)
    }
}

/// 1x1 compression of the upsampled, channel-concatenated pyramid.
#[derive(Debug, Clone)]
pub struct Neck {
    pub compress: Conv2d,
    pub neck_channels: usize,
}

impl Neck {
    pub fn new(ps: &mut ParamSet, rng: &mut impl Rng, cfg: &BackboneConfig) -> Self {
        let cin: usize = cfg.stage_channels.iter().sum();
        Self {
            compress: Conv2d::new(ps, rng, "neck.compress", cin, cfg.neck_channels, 1, 1, 0),
            neck_channels: cfg.neck_channels,
        }
    }

    /// Upsample every level to the finest level's size, concatenate along
    /// channels, compress with the 1x1 conv. Output stride = finest stride.
    pub fn fuse(
        &self,
        t: &mut Tape,
        leaves: &[VarId],
        pyramid: &[(VarId, usize)],
    ) -> Result<(VarId, usize)> {
        if pyramid.is_empty() {
            return Err(Error::BadShape("empty pyramid".into()));
        }
        let (_, h0, w0) = dims3(t.value(pyramid[0].0));
        let mut ups = Vec::with_capacity(pyramid.len());
        for &(id, _) in pyramid {
            let (_, h, w) = dims3(t.value(id));
            ups.push(if (h, w) == (h0, w0) {
                id
            } else {
                t.bilinear_resize(id, h0, w0)
            });
        }
        let cat = if ups.len() == 1 {
            ups[0]
        } else {
            t.concat(0, &ups)
        };
        Ok((self.compress.forward(t, leaves, cat), pyramid[0].1))
    }
}

/// Appends two channels spanning [-1, 1]: row coordinate then column
/// coordinate. A single-cell axis maps to 0.
pub fn append_coords(t: &mut Tape, x: VarId) -> VarId {
    let (_, h, w) = dims3(t.value(x));
    let coords = coord_channels(h, w);
    let c = t.leaf(coords);
    t.concat(0, &[x, c])
}

pub fn coord_channels(h: usize, w: usize) -> Arr {
    let mut out = Array3::<f64>::zeros((2, h, w));
    for r in 0..h {
        let rv = axis_coord(r, h);
        for c in 0..w {
            out[[0, r, c]] = rv;
            out[[1, r, c]] = axis_coord(c, w);
        }
    }
    out.into_dyn()
}

fn axis_coord(i: usize, n: usize) -> f64 {
    if n <= 1 {
        0.0
    } else {
        -1.0 + 2.0 * i as f64 / (n - 1) as f64
    }
}

/// Plain-array bilinear resize (align-corners = false), used outside tapes.
pub fn bilinear_resize_arr(x: &Arr, out_h: usize, out_w: usize) -> Arr {
    let (c, h, w) = dims3(x);
    let ytab = bilinear_taps(h, out_h);
    let xtab = bilinear_taps(w, out_w);
    let mut out = Array3::<f64>::zeros((c, out_h, out_w));
    for ch in 0..c {
        for (oy, &(y0, y1, wy0, wy1)) in ytab.iter().enumerate() {
            for (ox, &(x0, x1, wx0, wx1)) in xtab.iter().enumerate() {
                out[[ch, oy, ox]] = wy0 * wx0 * x[[ch, y0, x0]]
                    + wy0 * wx1 * x[[ch, y0, x1]]
                    + wy1 * wx0 * x[[ch, y1, x0]]
                    + wy1 * wx1 * x[[ch, y1, x1]];
            }
        }
    }
    out.into_dyn()
}
