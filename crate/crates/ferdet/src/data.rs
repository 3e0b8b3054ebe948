//! Dataset handling: manifest parsing, image loading, letterboxing, and a
//! deterministic synthetic face-expression corpus for end-to-end runs.
//!
//! A manifest is a text file with one image per line:
//! `relative/path.png cls,x1,y1,x2,y2 [cls,x1,y1,x2,y2 ...]`
//! with pixel-space corner boxes.

use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{FerError, Result};
use crate::metrics::BoxXyxy;
use crate::tensor::Tensor;

/// The seven expression classes, in label order.
pub const CLASS_NAMES: [&str; 7] = [
    "anger", "disgust", "fear", "happy", "neutral", "sad", "surprise",
];

/// One labeled image.
#[derive(Clone, Debug)]
pub struct Sample {
    pub path: PathBuf,
    pub boxes: Vec<(usize, BoxXyxy)>,
}

/// Parses a manifest; paths resolve relative to `root`. Malformed lines
/// report their 1-based line number.
pub fn load_manifest(root: &Path, manifest: &Path) -> Result<Vec<Sample>> {
    let text = std::fs::read_to_string(manifest)
        .map_err(|e| FerError::data(format!("cannot read manifest {}: {e}", manifest.display())))?;
    let mut out = Vec::new();
    for (ln, line) in text.lines().enumerate() {
        let ln = ln + 1;
        let line = line.trim();
        if line.is_empty() {
            continue;
        }
        let mut fields = line.split_whitespace();
        let rel = fields.next().unwrap();
        let mut boxes = Vec::new();
        for (bi, field) in fields.enumerate() {
            let parts: Vec<&str> = field.split(',').collect();
            if parts.len() != 5 {
                return Err(FerError::data(format!(
                    "{}:{ln}: box {} has {} fields, expected cls,x1,y1,x2,y2",
                    manifest.display(),
                    bi + 1,
                    parts.len()
                )));
            }
            let cls: usize = parts[0].parse().map_err(|e| {
                FerError::data(format!("{}:{ln}: bad class '{}': {e}", manifest.display(), parts[0]))
            })?;
            let mut vals = [0f64; 4];
            for (vi, v) in vals.iter_mut().enumerate() {
                *v = parts[vi + 1].parse().map_err(|e| {
                    FerError::data(format!(
                        "{}:{ln}: bad coordinate '{}': {e}",
                        manifest.display(),
                        parts[vi + 1]
                    ))
                })?;
            }
            if vals[2] <= vals[0] || vals[3] <= vals[1] {
                return Err(FerError::data(format!(
                    "{}:{ln}: box {} is empty or inverted",
                    manifest.display(),
                    bi + 1
                )));
            }
            boxes.push((cls, BoxXyxy::new(vals[0], vals[1], vals[2], vals[3])));
        }
        out.push(Sample {
            path: root.join(rel),
            boxes,
        });
    }
    if out.is_empty() {
        return Err(FerError::data(format!(
            "manifest {} lists no images",
            manifest.display()
        )));
    }
    Ok(out)
}

/// Simple owned RGB image.
#[derive(Clone)]
pub struct RgbImage {
    pub w: usize,
    pub h: usize,
    /// Row-major RGB triples, 0..=255.
    pub data: Vec<u8>,
}

impl RgbImage {
    pub fn new(w: usize, h: usize, fill: [u8; 3]) -> Self {
        RgbImage {
            w,
            h,
            data: fill.iter().cycle().copied().take(w * h * 3).collect(),
        }
    }

    pub fn put(&mut self, x: i64, y: i64, rgb: [u8; 3]) {
        if x >= 0 && y >= 0 && (x as usize) < self.w && (y as usize) < self.h {
            let i = (y as usize * self.w + x as usize) * 3;
            self.data[i..i + 3].copy_from_slice(&rgb);
        }
    }

    pub fn save_png(&self, path: &Path) -> Result<()> {
        image::save_buffer(
            path,
            &self.data,
            self.w as u32,
            self.h as u32,
            image::ColorType::Rgb8,
        )
        .map_err(|e| FerError::data(format!("cannot write {}: {e}", path.display())))
    }

    pub fn load_png(path: &Path) -> Result<Self> {
        let img = image::open(path)
            .map_err(|e| FerError::data(format!("cannot read {}: {e}", path.display())))?
            .to_rgb8();
        Ok(RgbImage {
            w: img.width() as usize,
            h: img.height() as usize,
            data: img.into_raw(),
        })
    }
}

/// Mapping from original pixel coordinates to letterboxed network input.
#[derive(Clone, Copy, Debug)]
pub struct Letterbox {
    pub scale: f64,
    pub pad_x: f64,
    pub pad_y: f64,
}

impl Letterbox {
    pub fn apply(&self, b: &BoxXyxy) -> BoxXyxy {
        BoxXyxy::new(
            b.x1 * self.scale + self.pad_x,
            b.y1 * self.scale + self.pad_y,
            b.x2 * self.scale + self.pad_x,
            b.y2 * self.scale + self.pad_y,
        )
    }

    pub fn invert(&self, b: &BoxXyxy) -> BoxXyxy {
        BoxXyxy::new(
            (b.x1 - self.pad_x) / self.scale,
            (b.y1 - self.pad_y) / self.scale,
            (b.x2 - self.pad_x) / self.scale,
            (b.y2 - self.pad_y) / self.scale,
        )
    }
}

/// Scales the image to fit a `size x size` square without distortion,
/// centers it on gray padding, and normalizes to `[0,1]` CHW.
pub fn letterbox(img: &RgbImage, size: usize) -> (Tensor<f32>, Letterbox) {
    let scale = (size as f64 / img.w as f64).min(size as f64 / img.h as f64);
    let nw = ((img.w as f64 * scale).round() as usize).max(1);
    let nh = ((img.h as f64 * scale).round() as usize).max(1);
    let pad_x = ((size - nw) / 2) as f64;
    let pad_y = ((size - nh) / 2) as f64;
    let mut t = Tensor::full(&[3, size, size], 114.0 / 255.0f32);
    for y in 0..nh {
        // nearest-neighbor resample
        let sy = ((y as f64 + 0.5) / scale) as usize;
        let sy = sy.min(img.h - 1);
        for x in 0..nw {
            let sx = (((x as f64 + 0.5) / scale) as usize).min(img.w - 1);
            let src = (sy * img.w + sx) * 3;
            let dy = y + pad_y as usize;
            let dx = x + pad_x as usize;
            for c in 0..3 {
                t.data_mut()[c * size * size + dy * size + dx] =
                    img.data[src + c] as f32 / 255.0;
            }
        }
    }
    (
        t,
        Letterbox {
            scale,
            pad_x,
            pad_y,
        },
    )
}

/// Loads, letterboxes, and transforms one sample's boxes.
pub fn load_sample(sample: &Sample, size: usize) -> Result<(Tensor<f32>, Vec<(usize, BoxXyxy)>, Letterbox)> {
    let img = RgbImage::load_png(&sample.path)?;
    let (t, lb) = letterbox(&img, size);
    let boxes = sample.boxes.iter().map(|(c, b)| (*c, lb.apply(b))).collect();
    Ok((t, boxes, lb))
}

fn draw_disc(img: &mut RgbImage, cx: f64, cy: f64, r: f64, rgb: [u8; 3]) {
    let (x0, x1) = ((cx - r).floor() as i64, (cx + r).ceil() as i64);
    let (y0, y1) = ((cy - r).floor() as i64, (cy + r).ceil() as i64);
    for y in y0..=y1 {
        for x in x0..=x1 {
            let dx = x as f64 - cx;
            let dy = y as f64 - cy;
            if dx * dx + dy * dy <= r * r {
                img.put(x, y, rgb);
            }
        }
    }
}

fn draw_ring(img: &mut RgbImage, cx: f64, cy: f64, r: f64, thick: f64, rgb: [u8; 3]) {
    let (x0, x1) = ((cx - r - thick).floor() as i64, (cx + r + thick).ceil() as i64);
    let (y0, y1) = ((cy - r - thick).floor() as i64, (cy + r + thick).ceil() as i64);
    for y in y0..=y1 {
        for x in x0..=x1 {
            let d = ((x as f64 - cx).powi(2) + (y as f64 - cy).powi(2)).sqrt();
            if (d - r).abs() <= thick {
                img.put(x, y, rgb);
            }
        }
    }
}

fn draw_arc(img: &mut RgbImage, cx: f64, cy: f64, r: f64, upward: bool, rgb: [u8; 3]) {
    // half-ring mouth: upward = smile (lower half), else frown (upper half)
    for t in 0..=180 {
        let ang = (t as f64).to_radians();
        let (sx, sy) = (ang.cos() * r, ang.sin() * r);
        let y = if upward { cy + sy * 0.6 } else { cy - sy * 0.6 };
        for d in [-1.0, 0.0, 1.0] {
            img.put((cx + sx) as i64, (y + d) as i64, rgb);
        }
    }
}

fn draw_line(img: &mut RgbImage, x1: f64, y1: f64, x2: f64, y2: f64, thick: i64, rgb: [u8; 3]) {
    let steps = ((x2 - x1).abs().max((y2 - y1).abs()) as i64).max(1);
    for s in 0..=steps {
        let f = s as f64 / steps as f64;
        let x = x1 + (x2 - x1) * f;
        let y = y1 + (y2 - y1) * f;
        for dy in -thick..=thick {
            img.put(x as i64, y as i64 + dy, rgb);
        }
    }
}

/// Per-class face tints: geometry carries the expression, the tint adds a
/// stable chromatic cue so tiny models converge quickly.
const FACE_TINTS: [[u8; 3]; 7] = [
    [220, 120, 110], // anger
    [140, 200, 120], // disgust
    [170, 140, 220], // fear
    [240, 210, 120], // happy
    [190, 190, 190], // neutral
    [130, 160, 220], // sad
    [240, 160, 200], // surprise
];

/// Draws one face of `class` with its bounding box, returning the box.
fn draw_face(img: &mut RgbImage, rng: &mut ChaCha8Rng, class: usize) -> BoxXyxy {
    let (w, h) = (img.w as f64, img.h as f64);
    let r = rng.gen_range(0.16..0.24) * w.min(h);
    let cx = rng.gen_range(r + 4.0..w - r - 4.0);
    let cy = rng.gen_range(r + 4.0..h - r - 4.0);
    let tint = FACE_TINTS[class];
    let dark = [30u8, 30, 30];
    draw_disc(img, cx, cy, r, tint);

    let eye_y = cy - 0.35 * r;
    let eye_dx = 0.42 * r;
    let mouth_y = cy + 0.45 * r;
    match class {
        0 => {
            // anger: brows slanting inward, flat mouth
            for s in [-1.0, 1.0] {
                let ex = cx + s * eye_dx;
                draw_disc(img, ex, eye_y, 0.12 * r, dark);
                draw_line(img, ex - s * 0.2 * r, eye_y - 0.35 * r, ex + s * 0.2 * r, eye_y - 0.18 * r, 1, dark);
            }
            draw_line(img, cx - 0.45 * r, mouth_y, cx + 0.45 * r, mouth_y, 1, dark);
        }
        1 => {
            // disgust: slit eyes, zigzag mouth
            for s in [-1.0, 1.0] {
                draw_line(img, cx + s * eye_dx - 0.15 * r, eye_y, cx + s * eye_dx + 0.15 * r, eye_y, 1, dark);
            }
            let mut px = cx - 0.45 * r;
            let mut up = true;
            while px < cx + 0.45 * r {
                let ny = if up { mouth_y - 0.12 * r } else { mouth_y + 0.12 * r };
                draw_line(img, px, if up { mouth_y + 0.12 * r } else { mouth_y - 0.12 * r }, px + 0.15 * r, ny, 1, dark);
                px += 0.15 * r;
                up = !up;
            }
        }
        2 => {
            // fear: wide elliptical mouth, raised brows
            for s in [-1.0, 1.0] {
                let ex = cx + s * eye_dx;
                draw_disc(img, ex, eye_y, 0.1 * r, dark);
                draw_line(img, ex - 0.18 * r, eye_y - 0.4 * r, ex + 0.18 * r, eye_y - 0.4 * r, 1, dark);
            }
            draw_ring(img, cx, mouth_y, 0.28 * r, 1.5, dark);
            draw_ring(img, cx, mouth_y, 0.16 * r, 1.0, dark);
        }
        3 => {
            // happy: smile arc
            for s in [-1.0, 1.0] {
                draw_disc(img, cx + s * eye_dx, eye_y, 0.12 * r, dark);
            }
            draw_arc(img, cx, mouth_y - 0.1 * r, 0.5 * r, true, dark);
        }
        4 => {
            // neutral: plain eyes, straight mouth
            for s in [-1.0, 1.0] {
                draw_disc(img, cx + s * eye_dx, eye_y, 0.1 * r, dark);
            }
            draw_line(img, cx - 0.35 * r, mouth_y, cx + 0.35 * r, mouth_y, 1, dark);
        }
        5 => {
            // sad: frown arc
            for s in [-1.0, 1.0] {
                draw_disc(img, cx + s * eye_dx, eye_y, 0.11 * r, dark);
            }
            draw_arc(img, cx, mouth_y + 0.15 * r, 0.45 * r, false, dark);
        }
        _ => {
            // surprise: big ring eyes, round open mouth
            for s in [-1.0, 1.0] {
                draw_ring(img, cx + s * eye_dx, eye_y, 0.14 * r, 1.2, dark);
            }
            draw_disc(img, cx, mouth_y, 0.2 * r, dark);
        }
    }
    BoxXyxy::new(cx - r, cy - r, cx + r, cy + r)
}

/// Generates `count` synthetic images under `out/images` with balanced
/// classes, plus `train.txt` and `val.txt` manifests (17:3 split).
/// Deterministic in `seed`.
pub fn gen_synth(out: &Path, count: usize, seed: u64) -> Result<()> {
    if count == 0 {
        return Err(FerError::invalid("gen-synth count must be positive"));
    }
    let images = out.join("images");
    std::fs::create_dir_all(&images)?;
    let mut train = String::new();
    let mut val = String::new();
    for i in 0..count {
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ (i as u64).wrapping_mul(0x9e3779b97f4a7c15));
        let class = i % CLASS_NAMES.len();
        let w = rng.gen_range(140..200usize);
        let h = rng.gen_range(140..200usize);
        let mut img = RgbImage::new(w, h, [60, 62, 66]);
        // speckle noise background
        for _ in 0..w * h / 12 {
            let x = rng.gen_range(0..w) as i64;
            let y = rng.gen_range(0..h) as i64;
            let v = rng.gen_range(40..110u8);
            img.put(x, y, [v, v, v]);
        }
        let bbox = draw_face(&mut img, &mut rng, class);
        let rel = format!("images/img_{i:05}.png");
        img.save_png(&images.join(format!("img_{i:05}.png")))?;
        let line = format!(
            "{rel} {class},{:.1},{:.1},{:.1},{:.1}\n",
            bbox.x1, bbox.y1, bbox.x2, bbox.y2
        );
        if i % 20 < 3 {
            val.push_str(&line);
        } else {
            train.push_str(&line);
        }
    }
    std::fs::write(out.join("train.txt"), train)?;
    std::fs::write(out.join("val.txt"), val)?;
    Ok(())
}

/// Leave-one-out nearest-centroid accuracy over mean-RGB features of the
/// ground-truth crops: a crude separability floor for the corpus.
pub fn centroid_separability(samples: &[Sample]) -> Result<f64> {
    let mut feats: Vec<(usize, [f64; 3])> = Vec::new();
    for s in samples {
        let img = RgbImage::load_png(&s.path)?;
        for (cls, b) in &s.boxes {
            let (x1, y1) = (b.x1.max(0.0) as usize, b.y1.max(0.0) as usize);
            let (x2, y2) = ((b.x2 as usize).min(img.w), (b.y2 as usize).min(img.h));
            let mut acc = [0f64; 3];
            let mut n = 0f64;
            for y in y1..y2 {
                for x in x1..x2 {
                    for c in 0..3 {
                        acc[c] += img.data[(y * img.w + x) * 3 + c] as f64;
                    }
                    n += 1.0;
                }
            }
            if n > 0.0 {
                feats.push((*cls, [acc[0] / n, acc[1] / n, acc[2] / n]));
            }
        }
    }
    if feats.is_empty() {
        return Err(FerError::data("no boxes to measure separability on"));
    }
    let num_classes = feats.iter().map(|(c, _)| *c).max().unwrap() + 1;
    let mut correct = 0usize;
    for (i, (cls, f)) in feats.iter().enumerate() {
        let mut sums = vec![[0f64; 3]; num_classes];
        let mut counts = vec![0f64; num_classes];
        for (j, (c2, f2)) in feats.iter().enumerate() {
            if j != i {
                for k in 0..3 {
                    sums[*c2][k] += f2[k];
                }
                counts[*c2] += 1.0;
            }
        }
        let mut best = (f64::INFINITY, 0usize);
        for c in 0..num_classes {
            if counts[c] == 0.0 {
                continue;
            }
            let d: f64 = (0..3).map(|k| (f[k] - sums[c][k] / counts[c]).powi(2)).sum();
            if d < best.0 {
                best = (d, c);
            }
        }
        if best.1 == *cls {
            correct += 1;
        }
    }
    Ok(correct as f64 / feats.len() as f64)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn manifest_parses_and_reports_line_numbers() {
        let dir = tempfile::tempdir().unwrap();
        let m = dir.path().join("list.txt");
        std::fs::write(&m, "a.png 0,1,2,11,12 1,5,5,9,9\n\nb.png 2,0,0,4,4\n").unwrap();
        let samples = load_manifest(dir.path(), &m).unwrap();
        assert_eq!(samples.len(), 2);
        assert_eq!(samples[0].boxes.len(), 2);
        assert_eq!(samples[0].boxes[1].0, 1);
        assert_eq!(samples[1].path, dir.path().join("b.png"));

        for (body, needle) in [
            ("a.png 0,1,2,11\n", ":1:"),
            ("a.png 0,1,2,11,12\nb.png x,0,0,4,4\n", ":2:"),
            ("a.png 0,5,5,1,1\n", "inverted"),
        ] {
            std::fs::write(&m, body).unwrap();
            let err = load_manifest(dir.path(), &m).unwrap_err().to_string();
            assert!(err.contains(needle), "'{err}' lacks '{needle}'");
        }
        std::fs::write(&m, "").unwrap();
        assert!(load_manifest(dir.path(), &m).is_err());
    }

    #[test]
    fn letterbox_roundtrips_boxes() {
        let img = RgbImage::new(200, 100, [10, 20, 30]);
        let (t, lb) = letterbox(&img, 64);
        assert_eq!(t.shape(), &[3, 64, 64]);
        // aspect preserved: 200x100 -> 64x32 centered, 16px bands
        assert_eq!(lb.pad_y, 16.0);
        assert_eq!(lb.pad_x, 0.0);
        let b = BoxXyxy::new(50.0, 25.0, 150.0, 75.0);
        let fwd = lb.apply(&b);
        let back = lb.invert(&fwd);
        assert!((back.x1 - b.x1).abs() < 1e-9 && (back.y2 - b.y2).abs() < 1e-9);
        // padding rows keep the fill value
        assert!((t.data()[0] - 114.0 / 255.0).abs() < 1e-6);
    }

    #[test]
    fn synth_is_deterministic_and_balanced() {
        let d1 = tempfile::tempdir().unwrap();
        let d2 = tempfile::tempdir().unwrap();
        gen_synth(d1.path(), 40, 7).unwrap();
        gen_synth(d2.path(), 40, 7).unwrap();
        let t1 = std::fs::read_to_string(d1.path().join("train.txt")).unwrap();
        let t2 = std::fs::read_to_string(d2.path().join("train.txt")).unwrap();
        assert_eq!(t1, t2);
        let b1 = std::fs::read(d1.path().join("images/img_00000.png")).unwrap();
        let b2 = std::fs::read(d2.path().join("images/img_00000.png")).unwrap();
        assert_eq!(b1, b2);

        let val = std::fs::read_to_string(d1.path().join("val.txt")).unwrap();
        assert_eq!(t1.lines().count() + val.lines().count(), 40);
        // balanced classes across the corpus
        let mut counts = [0usize; 7];
        for line in t1.lines().chain(val.lines()) {
            let cls: usize = line.split_whitespace().nth(1).unwrap().split(',').next().unwrap().parse().unwrap();
            counts[cls] += 1;
        }
        assert!(counts.iter().all(|&c| c >= 5));

        // a different seed changes the pixels
        let d3 = tempfile::tempdir().unwrap();
        gen_synth(d3.path(), 40, 8).unwrap();
        let b3 = std::fs::read(d3.path().join("images/img_00000.png")).unwrap();
        assert_ne!(b1, b3);
    }

    #[test]
    fn synth_classes_are_centroid_separable() {
        let dir = tempfile::tempdir().unwrap();
        gen_synth(dir.path(), 70, 3).unwrap();
        let samples = load_manifest(dir.path(), &dir.path().join("train.txt")).unwrap();
        let acc = centroid_separability(&samples).unwrap();
        assert!(acc > 0.9, "separability only {acc:.3}");
    }

    #[test]
    fn load_sample_transforms_boxes() {
        let dir = tempfile::tempdir().unwrap();
        gen_synth(dir.path(), 5, 1).unwrap();
        let samples = load_manifest(dir.path(), &dir.path().join("train.txt")).unwrap();
        let (t, boxes, _) = load_sample(&samples[0], 96).unwrap();
        assert_eq!(t.shape(), &[3, 96, 96]);
        assert!(!boxes.is_empty());
        for (_, b) in &boxes {
            assert!(b.x1 >= -1.0 && b.y1 >= -1.0 && b.x2 <= 97.0 && b.y2 <= 97.0);
        }
    }
}
