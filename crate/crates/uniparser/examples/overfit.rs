//! Quick overfit probe: trains a small model on a tiny synthetic set and
//! prints loss/metric trajectories. Handy for picking fixture configs.

use std::time::Instant;

use uniparser::datamodel::{instance_part_masks, HyperParams};
use uniparser::features::BackboneConfig;
use uniparser::inference::predict;
use uniparser::metrics::{evaluate, Scene};
use uniparser::model::{ModelConfig, UniParserModel};
use uniparser::synthgen::{generate_sample, SynthSpec};
use uniparser::trainer::{train, TrainConfig};

fn main() {
    let args: Vec<String> = std::env::args().collect();
    let steps: usize = args.get(1).and_then(|a| a.parse().ok()).unwrap_or(500);
    let head: usize = args.get(2).and_then(|a| a.parse().ok()).unwrap_or(16);
    let depth: usize = args.get(3).and_then(|a| a.parse().ok()).unwrap_or(2);
    let lr: f64 = args.get(4).and_then(|a| a.parse().ok()).unwrap_or(6.25e-4);
    let stride: usize = args.get(5).and_then(|a| a.parse().ok()).unwrap_or(4);
    let neck: usize = args.get(6).and_then(|a| a.parse().ok()).unwrap_or(16);

    let spec = SynthSpec {
        image_size: (64, 64),
        n_instances: (3, 3),
        n_categories: 4,
        min_instance_px: 40,
        overlap_allowed: false,
        seed: 7,
    };
    let samples: Vec<_> = (0..8).map(|i| generate_sample(&spec, i).unwrap()).collect();

    let cfg = ModelConfig {
        backbone: BackboneConfig {
            stage_channels: vec![16, 16],
            neck_channels: neck,
            out_stride: stride,
        },
        hyper: HyperParams {
            s: 16,
            head_channels: head,
            head_depth: depth,
            ..Default::default()
        },
        n_categories: 4,
        seed: 7,
    };
    let tc = TrainConfig {
        batch_size: 2,
        base_lr_per_sample: lr,
        warmup_iters: 100,
        total_steps: steps,
        lr_drops: vec![(0.75, 0.1), (11.0 / 12.0, 0.1)],
        seed: 7,
        ..Default::default()
    };

    let mut model = UniParserModel::new(cfg).unwrap();
    let t0 = Instant::now();
    let hist = train(&mut model, &samples, &tc).unwrap();
    let train_secs = t0.elapsed().as_secs_f64();
    for r in hist.iter().step_by((steps / 20).max(1)) {
        println!(
            "step {:>5} lr {:.2e} lc {:.4} laux {:.4} lpar {:.4} lm {:.4} total {:.4}",
            r.step, r.lr, r.report.l_center, r.report.l_aux, r.report.l_par, r.report.l_metric,
            r.report.l_total
        );
    }
    if let Some(last) = hist.last() {
        println!("final: {:?}", last.report);
    }
    let scenes: Vec<Scene> = samples
        .iter()
        .map(|s| (predict(&model, &s.image).unwrap(), instance_part_masks(s).unwrap()))
        .collect();
    let r = evaluate(&scenes);
    println!(
        "train took {train_secs:.1}s ({:.3}s/step); AP^p_50 {:.4} AP^p_vol {:.4} PCP_50 {:.4} offdiag {:.4}",
        train_secs / steps.max(1) as f64,
        r.ap_p_at(0.5),
        r.ap_p_vol,
        r.pcp_50,
        model.category_offdiag_mean()
    );
    for d in &r.per_image_details {
        println!(
            "  img {}: {} preds / {} gts, {} matched",
            d.sample_index, d.n_predictions, d.n_gts, d.matched_at_50
        );
    }
}
