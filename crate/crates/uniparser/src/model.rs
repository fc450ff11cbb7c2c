//! Full model: backbone + neck + three heads + category kernels + optional
//! fusion tower, with deterministic initialization and checkpoint I/O.

use std::fs;
use std::io::Write as _;
use std::path::Path;

use ndarray::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::autodiff::{Arr, Tape, VarId};
use crate::datamodel::{HyperParams, SimilaritySpace};
use crate::error::{Error, Result};
use crate::features::{Backbone, BackboneConfig, Neck};
use crate::heads::{similarity_maps, CategoryKernels, CenterLocator, FusionModule, SpaceBuilder};
use crate::nn::ParamSet;

#[derive(Debug, Clone)]
pub struct ModelConfig {
    pub backbone: BackboneConfig,
    pub hyper: HyperParams,
    pub n_categories: usize,
    pub seed: u64,
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        self.backbone.validate()?;
        self.hyper.validate()?;
        if self.n_categories < 1 {
            return Err(Error::Config("n_categories must be >= 1".into()));
        }
        Ok(())
    }
}

pub struct UniParserModel {
    pub ps: ParamSet,
    pub backbone: Backbone,
    pub neck: Neck,
    pub cl: CenterLocator,
    pub ifsb: SpaceBuilder,
    pub cfsb: SpaceBuilder,
    pub kernels: CategoryKernels,
    pub fusion: Option<FusionModule>,
    pub cfg: ModelConfig,
}

/// Tape ids of one forward pass over a single image.
pub struct Forward {
    pub leaves: Vec<VarId>,
    /// 1 x S x S sigmoid heatmap.
    pub h_c: VarId,
    pub f_ins: VarId,
    pub f_cate: VarId,
    /// n_categories x H x W similarity stack.
    pub q_cate: VarId,
    /// Normalized (or raw, per space) category kernel rows.
    pub kernel_rows: VarId,
    /// Stride of f_ins / f_cate relative to the input image.
    pub stride: usize,
}

impl UniParserModel {
    pub fn new(cfg: ModelConfig) -> Result<Self> {
        cfg.validate()?;
        let mut ps = ParamSet::default();
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        let backbone = Backbone::new(&mut ps, &mut rng, cfg.backbone.clone())?;
        let neck = Neck::new(&mut ps, &mut rng, &cfg.backbone);
        let nc = cfg.backbone.neck_channels;
        let (hc, hd) = (cfg.hyper.head_channels, cfg.hyper.head_depth);
        let cl = CenterLocator::new(&mut ps, &mut rng, nc, hc, hd);
        let space = cfg.hyper.similarity_space;
        let ifsb = SpaceBuilder::new(&mut ps, &mut rng, "ifsb", nc, hc, hd, true, space);
        let cfsb = SpaceBuilder::new(&mut ps, &mut rng, "cfsb", nc, hc, hd, false, space);
        let kernels =
            CategoryKernels::new(&mut ps, &mut rng, cfg.n_categories, hc, cfg.hyper.kernel_init_std);
        let fusion = FusionModule::new(&mut ps, &mut rng, cfg.hyper.fusion_mode, hc, cfg.n_categories);
        Ok(Self {
            ps,
            backbone,
            neck,
            cl,
            ifsb,
            cfsb,
            kernels,
            fusion,
            cfg,
        })
    }

    pub fn forward(&self, t: &mut Tape, image: &Array3<f64>) -> Result<Forward> {
        let leaves = self.ps.leaves(t);
        let img = t.leaf(image.clone().into_dyn());
        let pyramid = self.backbone.extract_pyramid(t, &leaves, img)?;
        let (f_neck, stride) = self.neck.fuse(t, &leaves, &pyramid)?;
        let h_c = self.cl.forward(t, &leaves, f_neck, self.cfg.hyper.s);
        let f_ins = self.ifsb.forward(t, &leaves, f_neck);
        let f_cate = self.cfsb.forward(t, &leaves, f_neck);
        let kernel_rows = self.kernels.vectors(t, &leaves, self.cfg.hyper.similarity_space);
        let sigmoid_after = self.cfg.hyper.similarity_space == SimilaritySpace::InnerSigmoidAfter;
        let q_cate = similarity_maps(t, kernel_rows, f_cate, sigmoid_after);
        Ok(Forward {
            leaves,
            h_c,
            f_ins,
            f_cate,
            q_cate,
            kernel_rows,
            stride,
        })
    }

    /// Instance similarity maps for a kernel bank, honoring the space mode.
    pub fn instance_similarity(&self, t: &mut Tape, bank: VarId, f_ins: VarId) -> VarId {
        let sigmoid_after = self.cfg.hyper.similarity_space == SimilaritySpace::InnerSigmoidAfter;
        similarity_maps(t, bank, f_ins, sigmoid_after)
    }

    /// Fuses instance and category outputs into the parsing stack,
    /// (K * n_categories) x H x W, instance-major.
    pub fn fuse(
        &self,
        t: &mut Tape,
        leaves: &[VarId],
        q_ins: VarId,
        q_cate: VarId,
        f_cate: VarId,
    ) -> VarId {
        match &self.fusion {
            None => crate::heads::fuse_index(t, q_ins, q_cate),
            Some(module) => module.forward(t, leaves, q_ins, q_cate, f_cate),
        }
    }

    pub fn heatmap_value(&self, t: &Tape, h_c: VarId) -> Array2<f64> {
        let v = t.value(h_c);
        let s = v.shape()[1];
        Array2::from_shape_fn((s, v.shape()[2]), |(i, j)| v[[0, i, j]])
    }

    /// Mean |cosine| over off-diagonal category-kernel pairs; the metric
    /// loss drives this toward zero.
    pub fn category_offdiag_mean(&self) -> f64 {
        let mut t = Tape::new();
        let leaves = self.ps.leaves(&mut t);
        let rows = self.kernels.vectors(&mut t, &leaves, SimilaritySpace::Cosine);
        let rt = t.transpose2(rows);
        let gram = t.matmul(rows, rt);
        let g = t.value(gram);
        let n = g.shape()[0];
        if n < 2 {
            return 0.0;
        }
        let mut sum = 0.0;
        for i in 0..n {
            for j in 0..n {
                if i != j {
                    sum += g[[i, j]].abs();
                }
            }
        }
        sum / (n * (n - 1)) as f64
    }

    // ---- checkpoint I/O ----

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut buf: Vec<u8> = Vec::new();
        buf.extend_from_slice(b"UNIPARSER-CKPT v1\n");
        let c = &self.cfg;
        let hdr = format!(
            "stage_channels={}\nneck_channels={}\nout_stride={}\nn_categories={}\nseed={}\n\
             s={}\nsigma_center={}\ntheta_c={}\ntheta_ctr={}\ntheta_masks={}\n\
             lambda_aux={}\nlambda_par={}\nlambda_metric={}\nhead_channels={}\nhead_depth={}\n\
             kernel_init_std={}\nsimilarity_space={}\nfusion_mode={}\nparams={}\n",
            c.backbone
                .stage_channels
                .iter()
                .map(|v| v.to_string())
                .collect::<Vec<_>>()
                .join(","),
            c.backbone.neck_channels,
            c.backbone.out_stride,
            c.n_categories,
            c.seed,
            c.hyper.s,
            c.hyper.sigma_center,
            c.hyper.theta_c,
            c.hyper.theta_ctr,
            c.hyper.theta_masks,
            c.hyper.lambda_aux,
            c.hyper.lambda_par,
            c.hyper.lambda_metric,
            c.hyper.head_channels,
            c.hyper.head_depth,
            c.hyper.kernel_init_std,
            crate::config::similarity_space_name(c.hyper.similarity_space),
            crate::config::fusion_mode_name(c.hyper.fusion_mode),
            self.ps.len(),
        );
        buf.extend_from_slice(hdr.as_bytes());
        for p in &self.ps.params {
            let shape = p
                .value
                .shape()
                .iter()
                .map(|v| v.to_string())
                .collect::<Vec<_>>()
                .join("x");
            buf.extend_from_slice(format!("param {} {}\n", p.name, shape).as_bytes());
            for v in p.value.iter() {
                buf.extend_from_slice(&v.to_le_bytes());
            }
            buf.push(b'\n');
        }
        let mut f = fs::File::create(path)?;
        f.write_all(&buf)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let data = fs::read(path)?;
        let mut pos = 0usize;
        fn line(data: &[u8], pos: &mut usize) -> Result<String> {
            let start = *pos;
            while *pos < data.len() && data[*pos] != b'\n' {
                *pos += 1;
            }
            if *pos >= data.len() {
                return Err(Error::Checkpoint("truncated checkpoint".into()));
            }
            let s = String::from_utf8_lossy(&data[start..*pos]).into_owned();
            *pos += 1;
            Ok(s)
        }
        if line(&data, &mut pos)? != "UNIPARSER-CKPT v1" {
            return Err(Error::Checkpoint("bad magic".into()));
        }
        let mut kv = std::collections::BTreeMap::new();
        let n_params;
        loop {
            let l = line(&data, &mut pos)?;
            let (k, v) = l
                .split_once('=')
                .ok_or_else(|| Error::Checkpoint(format!("bad header line: {l}")))?;
            if k == "params" {
                n_params = v
                    .parse()
                    .map_err(|_| Error::Checkpoint("bad param count".into()))?;
                break;
            }
            kv.insert(k.to_string(), v.to_string());
        }
        let get = |k: &str| -> Result<&String> {
            kv.get(k)
                .ok_or_else(|| Error::Checkpoint(format!("missing header key {k}")))
        };
        let pf = |k: &str| -> Result<f64> {
            get(k)?
                .parse()
                .map_err(|_| Error::Checkpoint(format!("bad value for {k}")))
        };
        let pu = |k: &str| -> Result<usize> {
            get(k)?
                .parse()
                .map_err(|_| Error::Checkpoint(format!("bad value for {k}")))
        };
        let cfg = ModelConfig {
            backbone: BackboneConfig {
                stage_channels: get("stage_channels")?
                    .split(',')
                    .map(|v| v.parse().map_err(|_| Error::Checkpoint("bad stage_channels".into())))
                    .collect::<Result<_>>()?,
                neck_channels: pu("neck_channels")?,
                out_stride: pu("out_stride")?,
            },
            n_categories: pu("n_categories")?,
            seed: get("seed")?
                .parse()
                .map_err(|_| Error::Checkpoint("bad seed".into()))?,
            hyper: HyperParams {
                s: pu("s")?,
                sigma_center: pf("sigma_center")?,
                theta_c: pf("theta_c")?,
                theta_ctr: pf("theta_ctr")?,
                theta_masks: pf("theta_masks")?,
                lambda_aux: pf("lambda_aux")?,
                lambda_par: pf("lambda_par")?,
                lambda_metric: pf("lambda_metric")?,
                head_channels: pu("head_channels")?,
                head_depth: pu("head_depth")?,
                kernel_init_std: pf("kernel_init_std")?,
                similarity_space: crate::config::parse_similarity_space(get("similarity_space")?)?,
                fusion_mode: crate::config::parse_fusion_mode(get("fusion_mode")?)?,
            },
        };
        let mut model = Self::new(cfg)?;
        if model.ps.len() != n_params {
            return Err(Error::Checkpoint(format!(
                "param count mismatch: checkpoint {n_params}, model {}",
                model.ps.len()
            )));
        }
        for i in 0..n_params {
            let l = line(&data, &mut pos)?;
            let mut parts = l.split(' ');
            let tag = parts.next();
            let name = parts.next().unwrap_or("");
            let shape_s = parts.next().unwrap_or("");
            if tag != Some("param") || name != model.ps.params[i].name {
                return Err(Error::Checkpoint(format!(
                    "param {i} mismatch: expected {}, found line {l}",
                    model.ps.params[i].name
                )));
            }
            let shape: Vec<usize> = if shape_s.is_empty() {
                vec![]
            } else {
                shape_s
                    .split('x')
                    .map(|v| v.parse().map_err(|_| Error::Checkpoint("bad shape".into())))
                    .collect::<Result<_>>()?
            };
            let n: usize = shape.iter().product();
            let bytes = n * 8;
            if pos + bytes + 1 > data.len() {
                return Err(Error::Checkpoint("truncated param data".into()));
            }
            let mut vals = Vec::with_capacity(n);
            for j in 0..n {
                let o = pos + j * 8;
                vals.push(f64::from_le_bytes(data[o..o + 8].try_into().unwrap()));
            }
            pos += bytes + 1; // trailing newline
            let arr = Arr::from_shape_vec(IxDyn(&shape), vals)
                .map_err(|_| Error::Checkpoint("shape/data mismatch".into()))?;
            if arr.shape() != model.ps.params[i].value.shape() {
                return Err(Error::Checkpoint(format!(
                    "param {name}: shape {:?} does not match model {:?}",
                    arr.shape(),
                    model.ps.params[i].value.shape()
                )));
            }
            model.ps.params[i].value = arr;
        }
        Ok(model)
    }
}
