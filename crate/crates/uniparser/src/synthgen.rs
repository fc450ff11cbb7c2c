//! Deterministic synthetic multi-instance part-parsing dataset: humanoids
//! assembled from geometric primitives, plus a PNG-based on-disk format.

use std::fs;
use std::path::Path;

use ndarray::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::datamodel::ParsingSample;
use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SynthSpec {
    pub image_size: (usize, usize),
    /// Inclusive [min, max] instance count per image.
    pub n_instances: (usize, usize),
    pub n_categories: usize,
    pub min_instance_px: usize,
    pub overlap_allowed: bool,
    pub seed: u64,
}

impl Default for SynthSpec {
    fn default() -> Self {
        Self {
            image_size: (64, 64),
            n_instances: (1, 3),
            n_categories: 4,
            min_instance_px: 40,
            overlap_allowed: false,
            seed: 0,
        }
    }
}

impl SynthSpec {
    pub fn validate(&self) -> Result<()> {
        if self.n_categories < 1 {
            return Err(Error::Config("n_categories must be >= 1".into()));
        }
        if self.n_instances.0 > self.n_instances.1 {
            return Err(Error::Config("n_instances min > max".into()));
        }
        if self.image_size.0 < 16 || self.image_size.1 < 16 {
            return Err(Error::Config("image_size must be >= 16".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy)]
pub struct GenMeta {
    pub requested_instances: usize,
    pub placed_instances: usize,
}

/// One primitive of a humanoid: a filled disc or rectangle with a part
/// category, positioned relative to the humanoid bbox.
enum Primitive {
    Disc { cy: f64, cx: f64, r: f64, cat: u16 },
    Rect { r0: f64, r1: f64, c0: f64, c1: f64, cat: u16 },
}

/// Humanoid primitives in a unit box, scaled by (h, w) at draw time.
/// Categories above n_categories fold down so every spec size works.
fn humanoid_primitives(n_categories: u16) -> Vec<Primitive> {
    let cat = |c: u16| c.min(n_categories);
    vec![
        // torso first so head/limbs draw over it at the seams
        Primitive::Rect { r0: 0.28, r1: 0.66, c0: 0.22, c1: 0.78, cat: cat(2) },
        Primitive::Disc { cy: 0.15, cx: 0.5, r: 0.14, cat: cat(1) },
        // arms
        Primitive::Rect { r0: 0.28, r1: 0.62, c0: 0.0, c1: 0.18, cat: cat(3) },
        Primitive::Rect { r0: 0.28, r1: 0.62, c0: 0.82, c1: 1.0, cat: cat(3) },
        // legs
        Primitive::Rect { r0: 0.66, r1: 1.0, c0: 0.25, c1: 0.46, cat: cat(4) },
        Primitive::Rect { r0: 0.66, r1: 1.0, c0: 0.54, c1: 0.75, cat: cat(4) },
        // feet
        Primitive::Rect { r0: 0.93, r1: 1.0, c0: 0.18, c1: 0.46, cat: cat(5) },
        Primitive::Rect { r0: 0.93, r1: 1.0, c0: 0.54, c1: 0.82, cat: cat(5) },
    ]
}

fn rasterize(
    prims: &[Primitive],
    top: f64,
    left: f64,
    h: f64,
    w: f64,
    img_h: usize,
    img_w: usize,
) -> Vec<(usize, usize, u16)> {
    let mut px = Vec::new();
    let r_lo = top.floor().max(0.0) as usize;
    let r_hi = ((top + h).ceil() as usize).min(img_h);
    let c_lo = left.floor().max(0.0) as usize;
    let c_hi = ((left + w).ceil() as usize).min(img_w);
    for r in r_lo..r_hi {
        for c in c_lo..c_hi {
            let u = (r as f64 + 0.5 - top) / h;
            let v = (c as f64 + 0.5 - left) / w;
            if !(0.0..1.0).contains(&u) || !(0.0..1.0).contains(&v) {
                continue;
            }
            // Later primitives overwrite earlier ones inside one humanoid.
            let mut hit = None;
            for p in prims {
                match *p {
                    Primitive::Disc { cy, cx, r: rad, cat } => {
                        let du = (u - cy) / rad;
                        // keep the disc round in pixel space
                        let dv = (v - cx) / rad * (w / h);
                        if du * du + dv * dv <= 1.0 {
                            hit = Some(cat);
                        }
                    }
                    Primitive::Rect { r0, r1, c0, c1, cat } => {
                        if u >= r0 && u < r1 && v >= c0 && v < c1 {
                            hit = Some(cat);
                        }
                    }
                }
            }
            if let Some(cat) = hit {
                px.push((r, c, cat));
            }
        }
    }
    px
}

/// Deterministic function of (spec.seed, index).
pub fn generate_sample(spec: &SynthSpec, index: usize) -> Result<ParsingSample> {
    generate_sample_with_meta(spec, index).map(|(s, _)| s)
}

pub fn generate_sample_with_meta(
    spec: &SynthSpec,
    index: usize,
) -> Result<(ParsingSample, GenMeta)> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(
        spec.seed ^ (index as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15),
    );
    let (img_h, img_w) = spec.image_size;
    let requested = rng.gen_range(spec.n_instances.0..=spec.n_instances.1);

    let mut instance_map = Array2::<u16>::zeros((img_h, img_w));
    let mut category_map = Array2::<u16>::zeros((img_h, img_w));
    let mut colors: Vec<[u8; 3]> = Vec::new();
    let prims = humanoid_primitives(spec.n_categories as u16);

    let mut placed = 0u16;
    for _ in 0..requested {
        let mut ok = false;
        for _attempt in 0..24 {
            let h = rng.gen_range(0.40..0.62) * img_h as f64;
            let w = h * rng.gen_range(0.55..0.70);
            let top = rng.gen_range(0.0..(img_h as f64 - h).max(1.0));
            let left = rng.gen_range(0.0..(img_w as f64 - w).max(1.0));
            let px = rasterize(&prims, top, left, h, w, img_h, img_w);
            if px.len() < spec.min_instance_px {
                continue;
            }
            // every present primitive category must carry enough pixels
            let mut per_cat = std::collections::BTreeMap::<u16, usize>::new();
            for &(_, _, cat) in &px {
                *per_cat.entry(cat).or_default() += 1;
            }
            if per_cat.values().any(|&n| n < spec.min_instance_px / 4) {
                continue;
            }
            if !spec.overlap_allowed {
                let clear = px.iter().all(|&(r, c, _)| {
                    let r0 = r.saturating_sub(1);
                    let c0 = c.saturating_sub(1);
                    (r0..=(r + 1).min(img_h - 1)).all(|rr| {
                        (c0..=(c + 1).min(img_w - 1)).all(|cc| instance_map[[rr, cc]] == 0)
                    })
                });
                if !clear {
                    continue;
                }
            }
            placed += 1;
            for &(r, c, cat) in &px {
                instance_map[[r, c]] = placed;
                category_map[[r, c]] = cat;
            }
            colors.push([
                rng.gen_range(64..=255u8),
                rng.gen_range(64..=255u8),
                rng.gen_range(64..=255u8),
            ]);
            ok = true;
            break;
        }
        if !ok {
            continue; // fewer instances than requested; recorded in meta
        }
    }

    // Occlusion can erase earlier instances entirely; compact ids so they
    // stay contiguous with every id occupying >= 1 pixel.
    let mut pixel_count = vec![0usize; placed as usize + 1];
    for &m in instance_map.iter() {
        pixel_count[m as usize] += 1;
    }
    let mut remap = vec![0u16; placed as usize + 1];
    let mut next = 0u16;
    for id in 1..=placed as usize {
        if pixel_count[id] > 0 {
            next += 1;
            remap[id] = next;
        }
    }
    let survivors: Vec<[u8; 3]> = (1..=placed as usize)
        .filter(|&id| pixel_count[id] > 0)
        .map(|id| colors[id - 1])
        .collect();
    instance_map.mapv_inplace(|m| remap[m as usize]);

    // Render: distinct per-instance colors plus additive noise, quantized to
    // u8 so the on-disk round trip is exact.
    let mut image = Array3::<f64>::zeros((3, img_h, img_w));
    for r in 0..img_h {
        for c in 0..img_w {
            let m = instance_map[[r, c]] as usize;
            let base: [u8; 3] = if m == 0 { [28, 28, 32] } else { survivors[m - 1] };
            // parts within an instance get a deterministic tint
            let cat = category_map[[r, c]] as i16;
            for ch in 0..3 {
                let noise = rng.gen_range(-8i16..=8i16);
                let tint = cat * 9 * if ch == cat as usize % 3 { 1 } else { -1 };
                let v = (base[ch] as i16 + noise + tint).clamp(0, 255) as u8;
                image[[ch, r, c]] = v as f64 / 255.0;
            }
        }
    }

    let sample = ParsingSample {
        image,
        instance_map,
        category_map,
        sample_id: format!("sample_{index:05}"),
    };
    sample.validate().map_err(|e| {
        Error::InconsistentLabels(format!("generator produced invalid sample: {e}"))
    })?;
    Ok((
        sample,
        GenMeta {
            requested_instances: requested,
            placed_instances: next as usize,
        },
    ))
}

pub fn generate_dataset(spec: &SynthSpec, count: usize) -> Result<Vec<ParsingSample>> {
    (0..count).map(|i| generate_sample(spec, i)).collect()
}

// ---- on-disk format ----
//
// dir/
//   manifest.txt
//   images/<id>.png      (8-bit RGB)
//   instance/<id>.png    (16-bit gray)
//   category/<id>.png    (16-bit gray)

pub fn write_dataset(samples: &[ParsingSample], spec: Option<&SynthSpec>, dir: &Path) -> Result<()> {
    fs::create_dir_all(dir.join("images"))?;
    fs::create_dir_all(dir.join("instance"))?;
    fs::create_dir_all(dir.join("category"))?;
    let mut manifest = String::from("uniparser-dataset v1\n");
    if let Some(s) = spec {
        manifest.push_str(&format!(
            "spec image_size={},{} n_instances={},{} n_categories={} min_instance_px={} overlap_allowed={} seed={}\n",
            s.image_size.0, s.image_size.1, s.n_instances.0, s.n_instances.1,
            s.n_categories, s.min_instance_px, s.overlap_allowed, s.seed
        ));
    }
    manifest.push_str(&format!("count {}\n", samples.len()));
    for sample in samples {
        let (h, w) = sample.instance_map.dim();
        let mut rgb = image::RgbImage::new(w as u32, h as u32);
        for r in 0..h {
            for c in 0..w {
                let px = [0, 1, 2].map(|ch| (sample.image[[ch, r, c]] * 255.0).round() as u8);
                rgb.put_pixel(c as u32, r as u32, image::Rgb(px));
            }
        }
        rgb.save(dir.join("images").join(format!("{}.png", sample.sample_id)))?;
        for (sub, map) in [("instance", &sample.instance_map), ("category", &sample.category_map)] {
            let mut gray = image::ImageBuffer::<image::Luma<u16>, Vec<u16>>::new(w as u32, h as u32);
            for r in 0..h {
                for c in 0..w {
                    gray.put_pixel(c as u32, r as u32, image::Luma([map[[r, c]]]));
                }
            }
            gray.save(dir.join(sub).join(format!("{}.png", sample.sample_id)))?;
        }
        manifest.push_str(&format!("sample {}\n", sample.sample_id));
    }
    fs::write(dir.join("manifest.txt"), manifest)?;
    Ok(())
}

pub fn read_dataset(dir: &Path) -> Result<Vec<ParsingSample>> {
    let manifest_path = dir.join("manifest.txt");
    let manifest = fs::read_to_string(&manifest_path)
        .map_err(|_| Error::DatasetCorrupt(format!("missing {}", manifest_path.display())))?;
    let mut samples = Vec::new();
    for line in manifest.lines() {
        let Some(id) = line.strip_prefix("sample ") else { continue };
        samples.push(read_sample(dir, id.trim())?);
    }
    Ok(samples)
}

fn read_sample(dir: &Path, id: &str) -> Result<ParsingSample> {
    let img_path = dir.join("images").join(format!("{id}.png"));
    let rgb = image::open(&img_path)
        .map_err(|_| Error::DatasetCorrupt(format!("missing or unreadable {}", img_path.display())))?
        .to_rgb8();
    let (w, h) = (rgb.width() as usize, rgb.height() as usize);
    let mut image_arr = Array3::<f64>::zeros((3, h, w));
    for r in 0..h {
        for c in 0..w {
            let px = rgb.get_pixel(c as u32, r as u32);
            for ch in 0..3 {
                image_arr[[ch, r, c]] = px[ch] as f64 / 255.0;
            }
        }
    }
    let mut maps = Vec::new();
    for sub in ["instance", "category"] {
        let p = dir.join(sub).join(format!("{id}.png"));
        let gray = image::open(&p)
            .map_err(|_| Error::DatasetCorrupt(format!("missing or unreadable {}", p.display())))?
            .to_luma16();
        if (gray.width() as usize, gray.height() as usize) != (w, h) {
            return Err(Error::DatasetCorrupt(format!(
                "{}: size differs from image",
                p.display()
            )));
        }
        let arr = Array2::from_shape_fn((h, w), |(r, c)| gray.get_pixel(c as u32, r as u32)[0]);
        maps.push(arr);
    }
    let category_map = maps.pop().unwrap();
    let instance_map = maps.pop().unwrap();
    Ok(ParsingSample {
        image: image_arr,
        instance_map,
        category_map,
        sample_id: id.to_string(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_spec_yields_background_only() {
        let spec = SynthSpec {
            n_instances: (0, 0),
            ..Default::default()
        };
        let s = generate_sample(&spec, 0).unwrap();
        assert_eq!(s.instance_map.iter().filter(|&&v| v != 0).count(), 0);
    }

    #[test]
    fn determinism_same_seed_index() {
        let spec = SynthSpec::default();
        let a = generate_sample(&spec, 3).unwrap();
        let b = generate_sample(&spec, 3).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn three_instances_valid() {
        let spec = SynthSpec {
            image_size: (64, 64),
            n_instances: (3, 3),
            n_categories: 4,
            ..Default::default()
        };
        let s = generate_sample(&spec, 1).unwrap();
        s.validate().unwrap();
        assert_eq!(s.n_instances(), 3);
    }

    #[test]
    fn disjoint_with_gap_when_overlap_forbidden() {
        let spec = SynthSpec {
            image_size: (96, 96),
            n_instances: (3, 3),
            overlap_allowed: false,
            ..Default::default()
        };
        let s = generate_sample(&spec, 2).unwrap();
        let (h, w) = s.instance_map.dim();
        for r in 0..h {
            for c in 0..w {
                let m = s.instance_map[[r, c]];
                if m == 0 {
                    continue;
                }
                for rr in r.saturating_sub(1)..=(r + 1).min(h - 1) {
                    for cc in c.saturating_sub(1)..=(c + 1).min(w - 1) {
                        let n = s.instance_map[[rr, cc]];
                        assert!(n == 0 || n == m, "instances touch at ({r},{c})");
                    }
                }
            }
        }
    }

    #[test]
    fn roundtrip_bit_exact() {
        let dir = tempfile::tempdir().unwrap();
        let spec = SynthSpec::default();
        let samples = generate_dataset(&spec, 10).unwrap();
        write_dataset(&samples, Some(&spec), dir.path()).unwrap();
        let back = read_dataset(dir.path()).unwrap();
        assert_eq!(samples, back);
    }

    #[test]
    fn empty_dataset_roundtrip() {
        let dir = tempfile::tempdir().unwrap();
        write_dataset(&[], None, dir.path()).unwrap();
        assert!(read_dataset(dir.path()).unwrap().is_empty());
    }

    #[test]
    fn missing_label_file_is_corrupt() {
        let dir = tempfile::tempdir().unwrap();
        let spec = SynthSpec::default();
        let samples = generate_dataset(&spec, 1).unwrap();
        write_dataset(&samples, Some(&spec), dir.path()).unwrap();
        fs::remove_file(dir.path().join("category").join("sample_00000.png")).unwrap();
        assert!(matches!(
            read_dataset(dir.path()),
            Err(Error::DatasetCorrupt(_))
        ));
    }
}
