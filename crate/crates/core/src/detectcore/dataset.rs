//! Synthetic shape-detection dataset.
//!
//! Images are textured backgrounds with 1-4 colored shapes; the class is
//! the shape type and labels are exact analytic bounding boxes. Everything
//! derives from named substreams of one seed, and pixel values are
//! quantized to 8 bits at generation time so in-memory tensors equal what
//! a PPM round trip produces.

use std::io::{BufWriter, Write};
use std::path::Path;

use rand::seq::SliceRandom;
use rand::Rng;
use rand_chacha::ChaCha8Rng;

use super::{iou, shape_iou, Anchors, BoxLabel, DetectError, Result};
use crate::rng::stream;
use crate::tensor::Tensor;

pub const SHAPE_NAMES: [&str; 8] =
    ["circle", "square", "triangle", "ring", "diamond", "plus", "bars", "checker"];

#[derive(Debug, Clone)]
pub struct DatasetConfig {
    pub seed: u64,
    pub n_train: usize,
    pub n_val: usize,
    pub image_size: usize,
    pub n_classes: usize,
}

#[derive(Debug, Clone)]
pub struct Dataset {
    pub cfg: DatasetConfig,
    /// `[3, S, S]` tensors, values in [0, 1], 8-bit quantized.
    pub train_images: Vec<Tensor>,
    pub train_labels: Vec<Vec<BoxLabel>>,
    pub val_images: Vec<Tensor>,
    pub val_labels: Vec<Vec<BoxLabel>>,
    pub anchors: Anchors,
    pub class_names: Vec<String>,
}

fn check_cfg(cfg: &DatasetConfig) -> Result<()> {
    if cfg.n_classes == 0 || cfg.n_classes > 8 {
        return Err(DetectError::Invalid(format!(
            "n_classes must be in 1..=8, got {}",
            cfg.n_classes
        )));
    }
    if cfg.image_size == 0 || cfg.image_size % 32 != 0 {
        return Err(DetectError::Invalid(format!(
            "image size {} must be a positive multiple of 32",
            cfg.image_size
        )));
    }
    Ok(())
}

/// Generate `n` images with labels; deterministic in (seed, stream name).
pub fn gen_images(
    seed: u64,
    stream_name: &str,
    n: usize,
    image_size: usize,
    n_classes: usize,
) -> Vec<(Tensor, Vec<BoxLabel>)> {
    let mut rng = stream(seed, stream_name);
    let mut out = Vec::with_capacity(n);
    // round-robin deck keeps the class histogram near uniform
    let mut deck: Vec<usize> = Vec::new();
    for _ in 0..n {
        out.push(gen_one(&mut rng, image_size, n_classes, &mut deck));
    }
    out
}

fn next_class(rng: &mut ChaCha8Rng, n_classes: usize, deck: &mut Vec<usize>) -> usize {
    if deck.is_empty() {
        let mut d: Vec<usize> = (0..n_classes).collect();
        d.shuffle(rng);
        *deck = d;
    }
    deck.pop().unwrap()
}

fn gen_one(
    rng: &mut ChaCha8Rng,
    size: usize,
    n_classes: usize,
    deck: &mut Vec<usize>,
) -> (Tensor, Vec<BoxLabel>) {
    let s = size;
    // muted, near-gray background so the shapes carry the signal
    let level = rng.gen_range(0.12..0.28);
    let tint = [rng.gen_range(-0.04..0.04), rng.gen_range(-0.04..0.04), rng.gen_range(-0.04..0.04)];
    let base = [level + tint[0], level + tint[1], level + tint[2]];
    let grad = [rng.gen_range(-0.08..0.08), rng.gen_range(-0.08..0.08), rng.gen_range(-0.08..0.08)];
    let mut img = vec![0.0f64; 3 * s * s];
    for y in 0..s {
        for x in 0..s {
            let fy = y as f64 / s as f64;
            let fx = x as f64 / s as f64;
            for c in 0..3 {
                let noise = rng.gen_range(-0.03..0.03);
                let v = base[c] + grad[c] * (fx + fy) + noise;
                img[(c * s + y) * s + x] = v.clamp(0.0, 1.0);
            }
        }
    }

    let n_shapes = rng.gen_range(1..=4usize);
    let mut labels: Vec<BoxLabel> = Vec::new();
    for _ in 0..n_shapes {
        let class_id = next_class(rng, n_classes, deck);
        // find a placement that does not bury an existing shape
        let mut placed = None;
        for _ in 0..12 {
            let w = rng.gen_range(0.16..0.42);
            let h = if class_id == 0 || class_id == 3 { w } else { rng.gen_range(0.16..0.42) };
            let cx = rng.gen_range(w / 2.0 + 0.02..1.0 - w / 2.0 - 0.02);
            let cy = rng.gen_range(h / 2.0 + 0.02..1.0 - h / 2.0 - 0.02);
            let candidate = BoxLabel { class_id, cx, cy, w, h };
            if labels.iter().all(|l| iou(l, &candidate) < 0.25) {
                placed = Some(candidate);
                break;
            }
        }
        let Some(label) = placed else { continue };
        // bright shape color from a class-anchored hue band, so the class
        // signal is learnable from a desk-scale number of images
        let hue = (class_id as f64 / n_classes as f64
            + rng.gen_range(-0.05..0.05))
        .rem_euclid(1.0);
        let sat = rng.gen_range(0.65..1.0);
        let val = rng.gen_range(0.75..1.0);
        let color = hsv_to_rgb(hue, sat, val);
        draw_shape(&mut img, s, &label, &color);
        labels.push(label);
    }

    // 8-bit quantization; the PPM round trip reproduces these exact values
    for v in &mut img {
        *v = (*v * 255.0).round() / 255.0;
    }
    (Tensor::new(vec![3, s, s], img), labels)
}

fn hsv_to_rgb(h: f64, s: f64, v: f64) -> [f64; 3] {
    let i = (h * 6.0).floor();
    let f = h * 6.0 - i;
    let p = v * (1.0 - s);
    let q = v * (1.0 - f * s);
    let t = v * (1.0 - (1.0 - f) * s);
    match (i as i64).rem_euclid(6) {
        0 => [v, t, p],
        1 => [q, v, p],
        2 => [p, v, t],
        3 => [p, q, v],
        4 => [t, p, v],
        _ => [v, p, q],
    }
}

fn draw_shape(img: &mut [f64], s: usize, label: &BoxLabel, color: &[f64; 3]) {
    let (x1, y1, x2, y2) = label.corners();
    let px1 = ((x1 * s as f64).floor().max(0.0)) as usize;
    let py1 = ((y1 * s as f64).floor().max(0.0)) as usize;
    let px2 = ((x2 * s as f64).ceil().min(s as f64)) as usize;
    let py2 = ((y2 * s as f64).ceil().min(s as f64)) as usize;
    let (cx, cy, w, h) = (label.cx, label.cy, label.w, label.h);
    for py in py1..py2 {
        for px in px1..px2 {
            let fx = (px as f64 + 0.5) / s as f64;
            let fy = (py as f64 + 0.5) / s as f64;
            let u = (fx - cx) / (w / 2.0); // in [-1, 1] inside the box
            let v = (fy - cy) / (h / 2.0);
            if u.abs() > 1.0 || v.abs() > 1.0 {
                continue;
            }
            let inside = match label.class_id {
                0 => u * u + v * v <= 1.0,
                1 => true,
                2 => {
                    // triangle: apex up, base at the bottom edge
                    let t = (v + 1.0) / 2.0; // 0 at top, 1 at bottom
                    u.abs() <= t
                }
                3 => {
                    let r2 = u * u + v * v;
                    (0.36..=1.0).contains(&r2)
                }
                4 => u.abs() + v.abs() <= 1.0,
                5 => u.abs() <= 0.33 || v.abs() <= 0.33,
                6 => (v.abs() <= 0.2) || (v.abs() >= 0.6 && v.abs() <= 1.0),
                7 => (u > 0.0) == (v > 0.0),
                _ => true,
            };
            if inside {
                for c in 0..3 {
                    img[(c * s + py) * s + px] = color[c];
                }
            }
        }
    }
}

/// Nine k-means anchors over the training boxes, shape-IoU metric,
/// area-sorted and split small/medium/large across the three strides.
fn kmeans_anchors(seed: u64, labels: &[Vec<BoxLabel>]) -> Anchors {
    let mut boxes: Vec<(f64, f64)> = labels.iter().flatten().map(|b| (b.w, b.h)).collect();
    if boxes.is_empty() {
        boxes.push((0.2, 0.2));
    }
    while boxes.len() < 9 {
        let mut extended = boxes.clone();
        extended.extend(boxes.iter().map(|&(w, h)| (w * 1.1, h * 0.9)));
        boxes = extended;
    }
    let mut rng = stream(seed, "anchors");
    // k-means++ seeding
    let mut centers: Vec<(f64, f64)> = vec![*boxes.choose(&mut rng).unwrap()];
    while centers.len() < 9 {
        let dists: Vec<f64> = boxes
            .iter()
            .map(|&(w, h)| {
                centers
                    .iter()
                    .map(|&(cw, ch)| 1.0 - shape_iou(w, h, cw, ch))
                    .fold(f64::INFINITY, f64::min)
            })
            .collect();
        let total: f64 = dists.iter().sum();
        let mut pick = rng.gen::<f64>() * total;
        let mut chosen = boxes.len() - 1;
        for (i, d) in dists.iter().enumerate() {
            pick -= d;
            if pick <= 0.0 {
                chosen = i;
                break;
            }
        }
        centers.push(boxes[chosen]);
    }
    for _ in 0..30 {
        let mut sums = vec![(0.0f64, 0.0f64, 0usize); 9];
        for &(w, h) in &boxes {
            let best = (0..9)
                .min_by(|&a, &b| {
                    let da = 1.0 - shape_iou(w, h, centers[a].0, centers[a].1);
                    let db = 1.0 - shape_iou(w, h, centers[b].0, centers[b].1);
                    da.partial_cmp(&db).unwrap()
                })
                .unwrap();
            sums[best].0 += w;
            sums[best].1 += h;
            sums[best].2 += 1;
        }
        let mut moved = false;
        for (i, (sw, sh, n)) in sums.iter().enumerate() {
            if *n > 0 {
                let nw = sw / *n as f64;
                let nh = sh / *n as f64;
                if (nw - centers[i].0).abs() > 1e-9 || (nh - centers[i].1).abs() > 1e-9 {
                    centers[i] = (nw, nh);
                    moved = true;
                }
            }
        }
        if !moved {
            break;
        }
    }
    centers.sort_by(|a, b| (a.0 * a.1).partial_cmp(&(b.0 * b.1)).unwrap());
    Anchors {
        per_scale: [centers[0..3].to_vec(), centers[3..6].to_vec(), centers[6..9].to_vec()],
    }
}

/// Generate the full dataset: train and val splits plus anchors.
pub fn gen_dataset(cfg: &DatasetConfig) -> Result<Dataset> {
    check_cfg(cfg)?;
    let train = gen_images(cfg.seed, "data.train", cfg.n_train, cfg.image_size, cfg.n_classes);
    let val = gen_images(cfg.seed, "data.val", cfg.n_val, cfg.image_size, cfg.n_classes);
    let (train_images, train_labels): (Vec<_>, Vec<_>) = train.into_iter().unzip();
    let (val_images, val_labels): (Vec<_>, Vec<_>) = val.into_iter().unzip();
    let anchors = kmeans_anchors(cfg.seed, &train_labels);
    Ok(Dataset {
        class_names: SHAPE_NAMES[..cfg.n_classes].iter().map(|s| s.to_string()).collect(),
        cfg: cfg.clone(),
        train_images,
        train_labels,
        val_images,
        val_labels,
        anchors,
    })
}

// ---------------------------------------------------------------------------
// On-disk form: manifest + PPM images + label files
// ---------------------------------------------------------------------------

fn write_ppm(img: &Tensor, path: &Path) -> Result<()> {
    let s = img.shape[1];
    let mut f = BufWriter::new(std::fs::File::create(path)?);
    write!(f, "P6\n{s} {s}\n255\n")?;
    let mut row = Vec::with_capacity(3 * s);
    for y in 0..s {
        row.clear();
        for x in 0..s {
            for c in 0..3 {
                row.push((img.data[(c * s + y) * s + x] * 255.0).round() as u8);
            }
        }
        f.write_all(&row)?;
    }
    Ok(())
}

fn read_ppm(path: &Path) -> Result<Tensor> {
    let bytes = std::fs::read(path)?;
    let header_end = bytes
        .windows(1)
        .enumerate()
        .scan(0, |fields, (i, w)| {
            if w[0].is_ascii_whitespace() {
                *fields += 1;
            }
            Some((i, *fields))
        })
        .find(|(_, fields)| *fields == 4)
        .map(|(i, _)| i + 1)
        .ok_or_else(|| DetectError::Invalid("bad ppm header".to_string()))?;
    let header = std::str::from_utf8(&bytes[..header_end])
        .map_err(|_| DetectError::Invalid("bad ppm header".to_string()))?;
    let mut it = header.split_ascii_whitespace();
    if it.next() != Some("P6") {
        return Err(DetectError::Invalid("not a P6 ppm".to_string()));
    }
    let w: usize = it.next().and_then(|v| v.parse().ok()).unwrap_or(0);
    let h: usize = it.next().and_then(|v| v.parse().ok()).unwrap_or(0);
    let pixels = &bytes[header_end..];
    if pixels.len() != 3 * w * h {
        return Err(DetectError::Invalid("ppm payload size mismatch".to_string()));
    }
    let mut data = vec![0.0; 3 * w * h];
    for y in 0..h {
        for x in 0..w {
            for c in 0..3 {
                data[(c * h + y) * w + x] = pixels[(y * w + x) * 3 + c] as f64 / 255.0;
            }
        }
    }
    Ok(Tensor::new(vec![3, h, w], data))
}

fn write_labels(labels: &[BoxLabel], path: &Path) -> Result<()> {
    let mut f = BufWriter::new(std::fs::File::create(path)?);
    for l in labels {
        writeln!(f, "{} {} {} {} {}", l.class_id, l.cx, l.cy, l.w, l.h)?;
    }
    Ok(())
}

fn read_labels(path: &Path) -> Result<Vec<BoxLabel>> {
    let text = std::fs::read_to_string(path)?;
    let mut out = Vec::new();
    for line in text.lines() {
        let parts: Vec<&str> = line.split_whitespace().collect();
        if parts.len() != 5 {
            return Err(DetectError::Invalid(format!("bad label line `{line}`")));
        }
        out.push(BoxLabel {
            class_id: parts[0].parse().map_err(|_| DetectError::Invalid("bad class".into()))?,
            cx: parts[1].parse().map_err(|_| DetectError::Invalid("bad cx".into()))?,
            cy: parts[2].parse().map_err(|_| DetectError::Invalid("bad cy".into()))?,
            w: parts[3].parse().map_err(|_| DetectError::Invalid("bad w".into()))?,
            h: parts[4].parse().map_err(|_| DetectError::Invalid("bad h".into()))?,
        });
    }
    Ok(out)
}

pub fn save_dataset(ds: &Dataset, dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir.join("train"))?;
    std::fs::create_dir_all(dir.join("val"))?;
    let mut manifest = String::new();
    manifest.push_str(&format!("seed={}\n", ds.cfg.seed));
    manifest.push_str(&format!("n_train={}\n", ds.cfg.n_train));
    manifest.push_str(&format!("n_val={}\n", ds.cfg.n_val));
    manifest.push_str(&format!("image_size={}\n", ds.cfg.image_size));
    manifest.push_str(&format!("classes={}\n", ds.class_names.join(",")));
    let anchor_text = ds
        .anchors
        .per_scale
        .iter()
        .flatten()
        .map(|(w, h)| format!("{w},{h}"))
        .collect::<Vec<_>>()
        .join(";");
    manifest.push_str(&format!("anchors={anchor_text}\n"));
    std::fs::write(dir.join("manifest.txt"), manifest)?;
    for (i, (img, labels)) in ds.train_images.iter().zip(&ds.train_labels).enumerate() {
        write_ppm(img, &dir.join(format!("train/img_{i:04}.ppm")))?;
        write_labels(labels, &dir.join(format!("train/img_{i:04}.txt")))?;
    }
    for (i, (img, labels)) in ds.val_images.iter().zip(&ds.val_labels).enumerate() {
        write_ppm(img, &dir.join(format!("val/img_{i:04}.ppm")))?;
        write_labels(labels, &dir.join(format!("val/img_{i:04}.txt")))?;
    }
    Ok(())
}

pub fn load_dataset(dir: &Path) -> Result<Dataset> {
    let manifest = std::fs::read_to_string(dir.join("manifest.txt"))?;
    let mut seed = 0u64;
    let mut n_train = 0usize;
    let mut n_val = 0usize;
    let mut image_size = 0usize;
    let mut class_names: Vec<String> = Vec::new();
    let mut anchors: Vec<(f64, f64)> = Vec::new();
    for line in manifest.lines() {
        let Some((k, v)) = line.split_once('=') else { continue };
        match k {
            "seed" => seed = v.parse().unwrap_or(0),
            "n_train" => n_train = v.parse().unwrap_or(0),
            "n_val" => n_val = v.parse().unwrap_or(0),
            "image_size" => image_size = v.parse().unwrap_or(0),
            "classes" => class_names = v.split(',').map(|s| s.to_string()).collect(),
            "anchors" => {
                for pair in v.split(';') {
                    let Some((w, h)) = pair.split_once(',') else { continue };
                    anchors.push((
                        w.parse().map_err(|_| DetectError::Invalid("bad anchor".into()))?,
                        h.parse().map_err(|_| DetectError::Invalid("bad anchor".into()))?,
                    ));
                }
            }
            _ => {}
        }
    }
    if anchors.len() != 9 {
        return Err(DetectError::Invalid(format!("expected 9 anchors, found {}", anchors.len())));
    }
    let mut train_images = Vec::new();
    let mut train_labels = Vec::new();
    for i in 0..n_train {
        train_images.push(read_ppm(&dir.join(format!("train/img_{i:04}.ppm")))?);
        train_labels.push(read_labels(&dir.join(format!("train/img_{i:04}.txt")))?);
    }
    let mut val_images = Vec::new();
    let mut val_labels = Vec::new();
    for i in 0..n_val {
        val_images.push(read_ppm(&dir.join(format!("val/img_{i:04}.ppm")))?);
        val_labels.push(read_labels(&dir.join(format!("val/img_{i:04}.txt")))?);
    }
    Ok(Dataset {
        cfg: DatasetConfig {
            seed,
            n_train,
            n_val,
            image_size,
            n_classes: class_names.len(),
        },
        train_images,
        train_labels,
        val_images,
        val_labels,
        anchors: Anchors {
            per_scale: [anchors[0..3].to_vec(), anchors[3..6].to_vec(), anchors[6..9].to_vec()],
        },
        class_names,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn generation_is_deterministic() {
        let a = gen_images(42, "data.train", 3, 64, 3);
        let b = gen_images(42, "data.train", 3, 64, 3);
        for ((ia, la), (ib, lb)) in a.iter().zip(&b) {
            assert!(ia.data.iter().zip(&ib.data).all(|(x, y)| x.to_bits() == y.to_bits()));
            assert_eq!(la, lb);
        }
    }

    #[test]
    fn zero_images_is_fine() {
        let ds = gen_dataset(&DatasetConfig {
            seed: 1,
            n_train: 0,
            n_val: 0,
            image_size: 64,
            n_classes: 2,
        })
        .unwrap();
        assert!(ds.train_images.is_empty());
    }

    #[test]
    fn class_histogram_near_uniform() {
        // 200 images, 3 classes, 96x96: shape counts within 20% of uniform
        let imgs = gen_images(42, "data.train", 200, 96, 3);
        let mut counts = [0usize; 3];
        for (_, labels) in &imgs {
            for l in labels {
                counts[l.class_id] += 1;
            }
        }
        let total: usize = counts.iter().sum();
        let uniform = total as f64 / 3.0;
        for c in counts {
            assert!(
                (c as f64 - uniform).abs() / uniform < 0.2,
                "counts {counts:?} not within 20% of uniform"
            );
        }
    }

    #[test]
    fn labels_are_inside_image() {
        for (_, labels) in gen_images(7, "data.train", 20, 64, 8) {
            for l in labels {
                let (x1, y1, x2, y2) = l.corners();
                assert!(x1 >= 0.0 && y1 >= 0.0 && x2 <= 1.0 && y2 <= 1.0);
                assert!(l.w > 0.0 && l.h > 0.0 && l.w <= 1.0 && l.h <= 1.0);
            }
        }
    }

    #[test]
    fn save_load_round_trip_bit_exact() {
        let ds = gen_dataset(&DatasetConfig {
            seed: 5,
            n_train: 4,
            n_val: 2,
            image_size: 64,
            n_classes: 3,
        })
        .unwrap();
        let dir = tempfile::tempdir().unwrap();
        save_dataset(&ds, dir.path()).unwrap();
        let loaded = load_dataset(dir.path()).unwrap();
        assert_eq!(ds.anchors, loaded.anchors);
        assert_eq!(ds.train_labels, loaded.train_labels);
        for (a, b) in ds.train_images.iter().zip(&loaded.train_images) {
            assert!(a.data.iter().zip(&b.data).all(|(x, y)| x.to_bits() == y.to_bits()));
        }
    }

    #[test]
    fn anchors_sorted_small_to_large() {
        let ds = gen_dataset(&DatasetConfig {
            seed: 3,
            n_train: 40,
            n_val: 0,
            image_size: 64,
            n_classes: 3,
        })
        .unwrap();
        let areas: Vec<f64> =
            ds.anchors.per_scale.iter().flatten().map(|(w, h)| w * h).collect();
        for pair in areas.windows(2) {
            assert!(pair[0] <= pair[1] + 1e-12);
        }
    }
}
