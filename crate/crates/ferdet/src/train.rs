//! Training and inference harness: target assignment, the detection loss
//! with an analytic IoU gradient, Adam, the epoch loop with checkpointing,
//! evaluation, and single-image detection with heatmap export.

use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::data::{self, Sample};
use crate::error::{FerError, Result};
use crate::graph::{Graph, Var};
use crate::metrics::{self, BoxXyxy, Detection, EvalSummary, GroundTruth, ImageEval};
use crate::network::{
    decode_level, load_checkpoint, nms, save_checkpoint, Detector, LevelOut, NetConfig, STRIDES,
};
use crate::params::{ParamId, ParamStore, Session};
use crate::tensor::{lit, Scalar, Tensor};

/// Optimization hyperparameters.
#[derive(Clone, Debug)]
pub struct TrainConfig {
    pub net: NetConfig,
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub lr_decay: f64,
    /// Epochs between learning-rate decays.
    pub lr_step: usize,
    pub seed: u64,
    pub conf_thresh: f64,
    pub nms_thresh: f64,
    /// Epochs between held-out evaluations.
    pub eval_every: usize,
    /// Stop early once held-out mAP reaches this value.
    pub target_map: Option<f64>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            net: NetConfig::default(),
            epochs: 64,
            batch_size: 16,
            lr: 0.001,
            lr_decay: 0.9,
            lr_step: 64,
            seed: 0,
            conf_thresh: 0.5,
            nms_thresh: 0.5,
            eval_every: 2,
            target_map: None,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        self.net.validate()?;
        if self.epochs == 0 || self.batch_size == 0 || self.lr_step == 0 || self.eval_every == 0 {
            return Err(FerError::invalid(
                "epochs, batch_size, lr_step, and eval_every must be positive",
            ));
        }
        if self.lr <= 0.0 || self.lr_decay <= 0.0 || self.lr_decay > 1.0 {
            return Err(FerError::invalid("lr must be > 0 and lr_decay in (0, 1]"));
        }
        Ok(())
    }

    /// Step schedule: `lr * decay^floor(epoch / step)`.
    pub fn lr_at(&self, epoch: usize) -> f64 {
        self.lr * self.lr_decay.powi((epoch / self.lr_step) as i32)
    }
}

/// One level's positive assignments for a batch.
#[derive(Clone, Debug)]
pub struct LevelAssign {
    pub stride: usize,
    pub h: usize,
    pub w: usize,
    /// `(image, row, col, ground-truth box, class)`
    pub pos: Vec<(usize, usize, usize, BoxXyxy, usize)>,
}

/// Assigns each ground truth to the level whose stride is closest to
/// `sqrt(area)` (ties to the smaller stride) and to the cell containing its
/// center. The first ground truth to claim a cell keeps it.
pub fn assign_targets(
    batch_boxes: &[Vec<(usize, BoxXyxy)>],
    input_size: usize,
) -> Vec<LevelAssign> {
    let mut levels: Vec<LevelAssign> = STRIDES
        .iter()
        .map(|&s| LevelAssign {
            stride: s,
            h: input_size / s,
            w: input_size / s,
            pos: Vec::new(),
        })
        .collect();
    for (bi, boxes) in batch_boxes.iter().enumerate() {
        for (cls, bb) in boxes {
            let side = bb.area().max(1e-9).sqrt();
            let li = STRIDES
                .iter()
                .enumerate()
                .min_by(|(_, a), (_, b)| {
                    let da = (**a as f64 - side).abs();
                    let db = (**b as f64 - side).abs();
                    da.partial_cmp(&db).unwrap()
                })
                .map(|(i, _)| i)
                .unwrap();
            let lv = &mut levels[li];
            let cx = (bb.x1 + bb.x2) / 2.0;
            let cy = (bb.y1 + bb.y2) / 2.0;
            let c = ((cx / lv.stride as f64).floor() as i64).clamp(0, lv.w as i64 - 1) as usize;
            let r = ((cy / lv.stride as f64).floor() as i64).clamp(0, lv.h as i64 - 1) as usize;
            if !lv.pos.iter().any(|&(b2, r2, c2, _, _)| b2 == bi && r2 == r && c2 == c) {
                lv.pos.push((bi, r, c, *bb, *cls));
            }
        }
    }
    levels
}

struct IouGrad {
    iou: f64,
    d_cx: f64,
    d_cy: f64,
    d_w: f64,
    d_h: f64,
}

/// IoU of the predicted box `(cx, cy, w, h)` against `gt`, with its
/// gradient in those four coordinates. Piecewise: non-overlapping boxes
/// have zero gradient.
fn iou_with_grad(cx: f64, cy: f64, w: f64, h: f64, gt: &BoxXyxy) -> IouGrad {
    let (px1, px2) = (cx - w / 2.0, cx + w / 2.0);
    let (py1, py2) = (cy - h / 2.0, cy + h / 2.0);
    let iw = px2.min(gt.x2) - px1.max(gt.x1);
    let ih = py2.min(gt.y2) - py1.max(gt.y1);
    if iw <= 0.0 || ih <= 0.0 {
        return IouGrad {
            iou: 0.0,
            d_cx: 0.0,
            d_cy: 0.0,
            d_w: 0.0,
            d_h: 0.0,
        };
    }
    let inter = iw * ih;
    let union = w * h + gt.area() - inter;
    let iou = inter / union;
    let di = (union + inter) / (union * union); // d iou / d inter
    let da = -inter / (union * union); // d iou / d pred-area
    let di_px1 = if px1 > gt.x1 { -ih } else { 0.0 };
    let di_px2 = if px2 < gt.x2 { ih } else { 0.0 };
    let di_py1 = if py1 > gt.y1 { -iw } else { 0.0 };
    let di_py2 = if py2 < gt.y2 { iw } else { 0.0 };
    IouGrad {
        iou,
        d_cx: di * (di_px1 + di_px2),
        d_cy: di * (di_py1 + di_py2),
        d_w: di * (-0.5 * di_px1 + 0.5 * di_px2) + da * h,
        d_h: di * (-0.5 * di_py1 + 0.5 * di_py2) + da * w,
    }
}

fn bce_terms<T: Scalar>(z: T, t: f64) -> (f64, f64) {
    // stable BCE-with-logits value and d/dz
    let z = z.to_f64().unwrap();
    let val = z.max(0.0) - z * t + (-z.abs()).exp().ln_1p();
    let grad = 1.0 / (1.0 + (-z).exp()) - t;
    (val, grad)
}

/// Detection loss over all three levels:
/// `(sum(1 - IoU) + sum BCE_cls + sum BCE_obj) / max(1, N_pos)`.
/// Box and class terms run over positive cells, objectness over every cell.
/// One custom operator with a fully analytic backward pass.
pub fn detection_loss<T: Scalar>(
    g: &mut Graph<T>,
    levels: &[LevelOut],
    assigns: &[LevelAssign],
    num_classes: usize,
) -> Result<Var> {
    if levels.len() != assigns.len() {
        return Err(FerError::invalid(format!(
            "{} levels but {} assignment sets",
            levels.len(),
            assigns.len()
        )));
    }
    let n_pos: usize = assigns.iter().map(|a| a.pos.len()).sum();
    let norm = n_pos.max(1) as f64;

    let mut total = 0.0f64;
    // per-level raw gradients (before upstream scaling), same shapes as maps
    let mut raw_grads: Vec<[Tensor<T>; 3]> = Vec::new();
    let mut parents: Vec<Var> = Vec::new();

    for (lv, asg) in levels.iter().zip(assigns) {
        let boxes = g.rc(lv.boxes);
        let obj = g.rc(lv.obj);
        let cls = g.rc(lv.cls);
        let (h, w) = (asg.h, asg.w);
        if obj.shape()[2] != h || obj.shape()[3] != w {
            return Err(FerError::shape(format!(
                "level stride {} maps are {:?}, assignment grid is {h}x{w}",
                asg.stride,
                obj.shape()
            )));
        }
        let hw = h * w;
        let stride = asg.stride as f64;
        let mut gb = Tensor::zeros(boxes.shape());
        let mut go = Tensor::zeros(obj.shape());
        let mut gc = Tensor::zeros(cls.shape());

        // objectness: BCE over every cell, positives get target 1
        let bsz = obj.shape()[0];
        let mut pos_mask = vec![false; bsz * hw];
        for &(bi, r, c, _, _) in &asg.pos {
            pos_mask[bi * hw + r * w + c] = true;
        }
        for i in 0..bsz * hw {
            let t = if pos_mask[i] { 1.0 } else { 0.0 };
            let (val, grad) = bce_terms(obj.data()[i], t);
            total += val / norm;
            go.data_mut()[i] = lit(grad / norm);
        }

        for &(bi, r, c, ref gt, cls_id) in &asg.pos {
            let cell = r * w + c;
            // class BCE at the positive cell
            for k in 0..num_classes {
                let idx = (bi * num_classes + k) * hw + cell;
                let t = if k == cls_id { 1.0 } else { 0.0 };
                let (val, grad) = bce_terms(cls.data()[idx], t);
                total += val / norm;
                gc.data_mut()[idx] = lit(grad / norm);
            }
            // box IoU at the positive cell
            let bidx = |ch: usize| (bi * 4 + ch) * hw + cell;
            let dx = boxes.data()[bidx(0)].to_f64().unwrap();
            let dy = boxes.data()[bidx(1)].to_f64().unwrap();
            let tw = boxes.data()[bidx(2)].to_f64().unwrap();
            let th = boxes.data()[bidx(3)].to_f64().unwrap();
            let cx = (c as f64 + dx) * stride;
            let cy = (r as f64 + dy) * stride;
            let bw = tw.min(8.0).exp() * stride;
            let bh = th.min(8.0).exp() * stride;
            let ig = iou_with_grad(cx, cy, bw, bh, gt);
            total += (1.0 - ig.iou) / norm;
            // chain: cx = (c+dx)*s, w = exp(tw)*s (grad 0 past the clamp)
            gb.data_mut()[bidx(0)] = lit(-ig.d_cx * stride / norm);
            gb.data_mut()[bidx(1)] = lit(-ig.d_cy * stride / norm);
            gb.data_mut()[bidx(2)] = lit(if tw < 8.0 { -ig.d_w * bw / norm } else { 0.0 });
            gb.data_mut()[bidx(3)] = lit(if th < 8.0 { -ig.d_h * bh / norm } else { 0.0 });
        }
        raw_grads.push([gb, go, gc]);
        parents.extend([lv.boxes, lv.obj, lv.cls]);
    }

    let level_vars: Vec<[Var; 3]> = levels.iter().map(|l| [l.boxes, l.obj, l.cls]).collect();
    g.push_op(
        Tensor::scalar(lit(total)),
        &parents,
        Box::new(move |gout| {
            let s = gout.data()[0];
            let mut out = Vec::new();
            for (vars, grads) in level_vars.iter().zip(&raw_grads) {
                for (v, gr) in vars.iter().zip(grads) {
                    out.push((*v, gr.map(|x| x * s)));
                }
            }
            out
        }),
    )
}

/// Adam with bias correction.
pub struct Adam {
    beta1: f64,
    beta2: f64,
    eps: f64,
    m: Vec<Tensor<f32>>,
    v: Vec<Tensor<f32>>,
    t: i32,
}

impl Adam {
    pub fn new(store: &ParamStore<f32>) -> Self {
        let zeros: Vec<Tensor<f32>> = store
            .iter()
            .map(|(_, _, val)| Tensor::zeros(val.shape()))
            .collect();
        Adam {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            m: zeros.clone(),
            v: zeros,
            t: 0,
        }
    }

    pub fn step(
        &mut self,
        store: &mut ParamStore<f32>,
        grads: &[(ParamId, Tensor<f32>)],
        lr: f64,
    ) {
        self.t += 1;
        let bc1 = 1.0 - self.beta1.powi(self.t);
        let bc2 = 1.0 - self.beta2.powi(self.t);
        for (id, grad) in grads {
            let i = id.0;
            let m = self.m[i].data_mut();
            let v = self.v[i].data_mut();
            let p = store.value_mut(*id).data_mut();
            for ((pv, gv), (mv, vv)) in p.iter_mut().zip(grad.data()).zip(m.iter_mut().zip(v.iter_mut())) {
                let gd = *gv as f64;
                let mn = self.beta1 * *mv as f64 + (1.0 - self.beta1) * gd;
                let vn = self.beta2 * *vv as f64 + (1.0 - self.beta2) * gd * gd;
                *mv = mn as f32;
                *vv = vn as f32;
                let update = lr * (mn / bc1) / ((vn / bc2).sqrt() + self.eps);
                *pv -= update as f32;
            }
        }
    }
}

/// In-memory dataset: letterboxed tensors plus transformed boxes.
pub struct Loaded {
    pub images: Vec<Tensor<f32>>,
    pub boxes: Vec<Vec<(usize, BoxXyxy)>>,
}

pub fn load_all(samples: &[Sample], size: usize) -> Result<Loaded> {
    let mut images = Vec::with_capacity(samples.len());
    let mut boxes = Vec::with_capacity(samples.len());
    for s in samples {
        let (t, b, _) = data::load_sample(s, size)?;
        images.push(t);
        boxes.push(b);
    }
    Ok(Loaded { images, boxes })
}

fn batch_tensor(images: &[&Tensor<f32>]) -> Tensor<f32> {
    let (c, h, w) = (
        images[0].shape()[0],
        images[0].shape()[1],
        images[0].shape()[2],
    );
    let mut out = Tensor::zeros(&[images.len(), c, h, w]);
    for (i, img) in images.iter().enumerate() {
        out.data_mut()[i * c * h * w..(i + 1) * c * h * w].copy_from_slice(img.data());
    }
    out
}

/// One gradient step over a prepared batch; returns the loss.
pub fn train_step(
    det: &Detector,
    store: &mut ParamStore<f32>,
    opt: &mut Adam,
    batch: &Tensor<f32>,
    boxes: &[Vec<(usize, BoxXyxy)>],
    lr: f64,
) -> Result<f64> {
    let mut sess = Session::new(store);
    sess.g.check_finite = false;
    let x = sess.g.leaf(batch.clone(), false);
    let outs = det.forward(&mut sess, x, None)?;
    let assigns = assign_targets(boxes, det.cfg.input_size);
    let loss = detection_loss(&mut sess.g, &outs, &assigns, det.cfg.num_classes)?;
    let loss_val = sess.g.value(loss).data()[0] as f64;
    if !loss_val.is_finite() {
        return Err(FerError::Numeric(format!(
            "training diverged: loss = {loss_val}"
        )));
    }
    sess.g.backward(loss)?;
    let grads = sess.grads();
    opt.step(store, &grads, lr);
    Ok(loss_val)
}

/// Runs the detector on every sample and scores it.
pub fn evaluate_model(
    det: &Detector,
    store: &ParamStore<f32>,
    loaded: &Loaded,
    conf: f64,
    nms_thresh: f64,
) -> Result<EvalSummary> {
    let mut images = Vec::with_capacity(loaded.images.len());
    for (img, boxes) in loaded.images.iter().zip(&loaded.boxes) {
        let dets = detect_tensor(det, store, img, conf, nms_thresh)?;
        images.push(ImageEval {
            detections: dets,
            truths: boxes
                .iter()
                .map(|(c, b)| GroundTruth { bbox: *b, class: *c })
                .collect(),
        });
    }
    let names = data::CLASS_NAMES.iter().map(|s| s.to_string()).collect::<Vec<_>>();
    let names = &names[..det.cfg.num_classes.min(names.len())];
    let mut names = names.to_vec();
    while names.len() < det.cfg.num_classes {
        names.push(format!("class{}", names.len()));
    }
    metrics::evaluate(&images, &names, 0.5)
}

/// Detections for one letterboxed CHW tensor, in input coordinates.
pub fn detect_tensor(
    det: &Detector,
    store: &ParamStore<f32>,
    img: &Tensor<f32>,
    conf: f64,
    nms_thresh: f64,
) -> Result<Vec<Detection>> {
    let mut sess = Session::new(store);
    sess.g.check_finite = false;
    let shape = img.shape().to_vec();
    let x = sess.g.leaf(img.clone().reshaped(&[1, shape[0], shape[1], shape[2]])?, false);
    let outs = det.forward(&mut sess, x, None)?;
    let mut dets = Vec::new();
    for o in &outs {
        dets.extend(decode_level(
            sess.g.value(o.boxes),
            sess.g.value(o.obj),
            sess.g.value(o.cls),
            o.stride,
            conf,
        ));
    }
    Ok(nms(dets, nms_thresh))
}

/// Result of a training run.
pub struct TrainOutcome {
    pub epochs_run: usize,
    pub best_map: f64,
    pub final_loss: f64,
}

/// Full training loop: shuffled mini-batches, step-decayed Adam, periodic
/// held-out evaluation, best and final checkpoints under `out_dir`.
pub fn train(cfg: &TrainConfig, data_dir: &Path, out_dir: &Path) -> Result<TrainOutcome> {
    cfg.validate()?;
    std::fs::create_dir_all(out_dir)?;
    let train_samples = data::load_manifest(data_dir, &data_dir.join("train.txt"))?;
    let val_samples = data::load_manifest(data_dir, &data_dir.join("val.txt"))?;
    let train_data = load_all(&train_samples, cfg.net.input_size)?;
    let val_data = load_all(&val_samples, cfg.net.input_size)?;

    let mut store = ParamStore::<f32>::new();
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let det = Detector::new(cfg.net.clone(), &mut store, &mut rng)?;
    let mut opt = Adam::new(&store);

    let mut best_map = -1.0f64;
    let mut final_loss = f64::NAN;
    let mut epochs_run = 0;
    let n = train_data.images.len();
    for epoch in 0..cfg.epochs {
        let lr = cfg.lr_at(epoch);
        let mut order: Vec<usize> = (0..n).collect();
        order.shuffle(&mut rng);
        let mut loss_sum = 0.0;
        let mut batches = 0usize;
        for chunk in order.chunks(cfg.batch_size) {
            let imgs: Vec<&Tensor<f32>> = chunk.iter().map(|&i| &train_data.images[i]).collect();
            let boxes: Vec<Vec<(usize, BoxXyxy)>> =
                chunk.iter().map(|&i| train_data.boxes[i].clone()).collect();
            let batch = batch_tensor(&imgs);
            loss_sum += train_step(&det, &mut store, &mut opt, &batch, &boxes, lr)?;
            batches += 1;
        }
        final_loss = loss_sum / batches.max(1) as f64;
        epochs_run = epoch + 1;
        let mut line = format!(
            "epoch {:>3}/{} lr {:.6} loss {:.4}",
            epoch + 1,
            cfg.epochs,
            lr,
            final_loss
        );
        let mut current_map = None;
        if (epoch + 1) % cfg.eval_every == 0 || epoch + 1 == cfg.epochs {
            let summary =
                evaluate_model(&det, &store, &val_data, cfg.conf_thresh, cfg.nms_thresh)?;
            line.push_str(&format!(" val mAP {:.4}", summary.map));
            current_map = Some(summary.map);
        }
        println!("{line}");
        if let Some(m) = current_map {
            if m > best_map {
                best_map = m;
                save_checkpoint(&out_dir.join("best.ckpt"), &cfg.net, &store)?;
            }
            if cfg.target_map.is_some_and(|t| m >= t) {
                break;
            }
        }
    }
    save_checkpoint(&out_dir.join("final.ckpt"), &cfg.net, &store)?;
    if best_map < 0.0 {
        // no eval epoch ever ran; fall back to the final weights
        save_checkpoint(&out_dir.join("best.ckpt"), &cfg.net, &store)?;
        best_map = f64::NAN;
    }
    Ok(TrainOutcome {
        epochs_run,
        best_map,
        final_loss,
    })
}

/// Evaluates a checkpoint against a manifest.
pub fn eval_checkpoint(
    ckpt: &Path,
    data_dir: &Path,
    manifest: &Path,
    conf: f64,
    nms_thresh: f64,
) -> Result<EvalSummary> {
    let (_, det, store) = load_checkpoint(ckpt)?;
    let samples = data::load_manifest(data_dir, manifest)?;
    let loaded = load_all(&samples, det.cfg.input_size)?;
    evaluate_model(&det, &store, &loaded, conf, nms_thresh)
}

/// Detections for an image file, mapped back to original pixel
/// coordinates. Optionally writes per-level fused score heatmaps.
pub fn detect_file(
    ckpt: &Path,
    image_path: &Path,
    conf: f64,
    nms_thresh: f64,
    heatmap_dir: Option<&Path>,
) -> Result<Vec<Detection>> {
    let (_, det, store) = load_checkpoint(ckpt)?;
    let img = data::RgbImage::load_png(image_path)?;
    let (tensor, lb) = data::letterbox(&img, det.cfg.input_size);

    if let Some(dir) = heatmap_dir {
        export_heatmap(&det, &store, &tensor, dir)?;
    }
    let dets = detect_tensor(&det, &store, &tensor, conf, nms_thresh)?;
    Ok(dets
        .into_iter()
        .map(|mut d| {
            d.bbox = lb.invert(&d.bbox);
            d
        })
        .collect())
}

/// Bilinear upsample of one single-channel map to `size x size`.
fn bilinear_to(map: &[f64], h: usize, w: usize, size: usize) -> Vec<f64> {
    let mut out = vec![0.0; size * size];
    for y in 0..size {
        let fy = ((y as f64 + 0.5) * h as f64 / size as f64 - 0.5).clamp(0.0, h as f64 - 1.0);
        let y0 = fy.floor() as usize;
        let y1 = (y0 + 1).min(h - 1);
        let wy = fy - y0 as f64;
        for x in 0..size {
            let fx = ((x as f64 + 0.5) * w as f64 / size as f64 - 0.5).clamp(0.0, w as f64 - 1.0);
            let x0 = fx.floor() as usize;
            let x1 = (x0 + 1).min(w - 1);
            let wx = fx - x0 as f64;
            let top = map[y0 * w + x0] * (1.0 - wx) + map[y0 * w + x1] * wx;
            let bot = map[y1 * w + x0] * (1.0 - wx) + map[y1 * w + x1] * wx;
            out[y * size + x] = top * (1.0 - wy) + bot * wy;
        }
    }
    out
}

/// Fused confidence heatmap: per level, the max over classes of
/// `sigmoid(obj) * sigmoid(cls)` per cell, bilinearly upsampled to the input
/// size, max-fused across levels, then min-max normalized. Writes
/// `heatmap.png` (grayscale) and `heatmap.csv`.
pub fn export_heatmap(
    det: &Detector,
    store: &ParamStore<f32>,
    img: &Tensor<f32>,
    dir: &Path,
) -> Result<()> {
    std::fs::create_dir_all(dir)?;
    let mut sess = Session::new(store);
    sess.g.check_finite = false;
    let s = det.cfg.input_size;
    let x = sess.g.leaf(img.clone().reshaped(&[1, 3, s, s])?, false);
    let outs = det.forward(&mut sess, x, None)?;
    let mut fused = vec![0.0f64; s * s];
    for o in &outs {
        let obj = sess.g.value(o.obj);
        let cls = sess.g.value(o.cls);
        let (k, h, w) = (cls.shape()[1], cls.shape()[2], cls.shape()[3]);
        let hw = h * w;
        let mut level = vec![0.0f64; hw];
        for i in 0..hw {
            let ov = crate::ops::sigmoid_scalar(obj.data()[i]) as f64;
            let best = (0..k)
                .map(|ki| crate::ops::sigmoid_scalar(cls.data()[ki * hw + i]) as f64)
                .fold(0.0f64, f64::max);
            level[i] = ov * best;
        }
        for (f, v) in fused.iter_mut().zip(bilinear_to(&level, h, w, s)) {
            *f = f.max(v);
        }
    }
    let (lo, hi) = fused
        .iter()
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(l, h), &v| (l.min(v), h.max(v)));
    let span = (hi - lo).max(1e-12);
    let bytes: Vec<u8> = fused.iter().map(|&v| (255.0 * (v - lo) / span) as u8).collect();
    image::save_buffer(
        dir.join("heatmap.png"),
        &bytes,
        s as u32,
        s as u32,
        image::ColorType::L8,
    )
    .map_err(|e| FerError::data(format!("cannot write heatmap: {e}")))?;
    let mut csv = String::from("row,col,score\n");
    for r in 0..s {
        for c in 0..s {
            csv.push_str(&format!("{r},{c},{:.6}\n", fused[r * s + c]));
        }
    }
    std::fs::write(dir.join("heatmap.csv"), csv)?;
    Ok(())
}

/// Inputs for the detection-loss gradient check: one small level.
pub fn detection_loss_check_inputs() -> Vec<Tensor<f64>> {
    use rand::Rng;
    let mut rng = ChaCha8Rng::seed_from_u64(99);
    let mut t = |shape: &[usize], lo: f64, hi: f64| {
        let n: usize = shape.iter().product();
        Tensor::new(shape.to_vec(), (0..n).map(|_| rng.gen_range(lo..hi)).collect()).unwrap()
    };
    vec![
        t(&[1, 4, 3, 3], -0.4, 0.4), // box map
        t(&[1, 1, 3, 3], -2.0, 2.0), // objectness
        t(&[1, 2, 3, 3], -2.0, 2.0), // class logits
    ]
}

/// Builder matching [`detection_loss_check_inputs`]: a stride-8 level with
/// two positives whose predicted boxes clearly overlap their targets.
pub fn detection_loss_check_builder(
) -> Box<dyn Fn(&mut Graph<f64>, &[Var]) -> Result<Var>> {
    Box::new(|g, v| {
        let levels = vec![LevelOut {
            boxes: v[0],
            obj: v[1],
            cls: v[2],
            stride: 8,
        }];
        let assigns = vec![LevelAssign {
            stride: 8,
            h: 3,
            w: 3,
            pos: vec![
                (0, 1, 1, BoxXyxy::new(7.3, 8.1, 16.9, 17.2), 0),
                (0, 2, 0, BoxXyxy::new(1.2, 17.5, 8.8, 24.1), 1),
            ],
        }];
        detection_loss(g, &levels, &assigns, 2)
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn lr_schedule_steps() {
        let cfg = TrainConfig::default();
        assert!((cfg.lr_at(0) - 0.001).abs() < 1e-12);
        assert!((cfg.lr_at(63) - 0.001).abs() < 1e-12);
        assert!((cfg.lr_at(64) - 0.0009).abs() < 1e-12);
        assert!((cfg.lr_at(128) - 0.00081).abs() < 1e-12);
    }

    #[test]
    fn assignment_picks_nearest_stride_and_center_cell() {
        // 12x12 box (side 12): |8-12|=4, |16-12|=4 -> tie goes to stride 8
        let boxes = vec![vec![(3usize, BoxXyxy::new(10.0, 10.0, 22.0, 22.0))]];
        let lv = assign_targets(&boxes, 160);
        assert_eq!(lv[0].pos.len(), 1);
        assert!(lv[1].pos.is_empty() && lv[2].pos.is_empty());
        let (bi, r, c, _, cls) = lv[0].pos[0];
        // center (16,16) / stride 8 -> cell (2,2)
        assert_eq!((bi, r, c, cls), (0, 2, 2, 3));

        // a 100x100 box lands on stride 32 (|32-100| < |16-100|)
        let big = vec![vec![(0usize, BoxXyxy::new(10.0, 10.0, 110.0, 110.0))]];
        let lv = assign_targets(&big, 160);
        assert_eq!(lv[2].pos.len(), 1);
    }

    #[test]
    fn duplicate_cells_keep_first_truth() {
        let boxes = vec![vec![
            (0usize, BoxXyxy::new(10.0, 10.0, 22.0, 22.0)),
            (1usize, BoxXyxy::new(11.0, 11.0, 21.0, 21.0)),
        ]];
        let lv = assign_targets(&boxes, 160);
        assert_eq!(lv[0].pos.len(), 1);
        assert_eq!(lv[0].pos[0].4, 0);
    }

    #[test]
    fn iou_grad_matches_finite_differences() {
        let gt = BoxXyxy::new(4.0, 5.0, 16.0, 14.0);
        let (cx, cy, w, h) = (9.3, 10.1, 10.0, 7.8);
        let g = iou_with_grad(cx, cy, w, h, &gt);
        assert!(g.iou > 0.3);
        let eps = 1e-6;
        let f = |cx: f64, cy: f64, w: f64, h: f64| iou_with_grad(cx, cy, w, h, &gt).iou;
        for (analytic, numeric) in [
            (g.d_cx, (f(cx + eps, cy, w, h) - f(cx - eps, cy, w, h)) / (2.0 * eps)),
            (g.d_cy, (f(cx, cy + eps, w, h) - f(cx, cy - eps, w, h)) / (2.0 * eps)),
            (g.d_w, (f(cx, cy, w + eps, h) - f(cx, cy, w - eps, h)) / (2.0 * eps)),
            (g.d_h, (f(cx, cy, w, h + eps) - f(cx, cy, w, h - eps)) / (2.0 * eps)),
        ] {
            assert!(
                (analytic - numeric).abs() < 1e-6,
                "{analytic} vs {numeric}"
            );
        }
        // disjoint boxes: zero everywhere
        let far = iou_with_grad(100.0, 100.0, 4.0, 4.0, &gt);
        assert_eq!(far.iou, 0.0);
        assert_eq!(far.d_cx, 0.0);
    }

    #[test]
    fn loss_decreases_on_single_image_steps() {
        use rand::SeedableRng;
        let cfg = NetConfig {
            input_size: 64,
            num_classes: 3,
            width_mult: 0.25,
            n_state: 2,
        };
        let mut store = ParamStore::<f32>::new();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let det = Detector::new(cfg, &mut store, &mut rng).unwrap();
        let mut opt = Adam::new(&store);
        let img = Tensor::new(
            vec![1, 3, 64, 64],
            (0..3 * 64 * 64).map(|i| ((i * 7 % 256) as f32) / 255.0).collect(),
        )
        .unwrap();
        let boxes = vec![vec![(1usize, BoxXyxy::new(20.0, 20.0, 34.0, 34.0))]];
        let first = train_step(&det, &mut store, &mut opt, &img, &boxes, 1e-3).unwrap();
        let mut last = first;
        for _ in 0..30 {
            last = train_step(&det, &mut store, &mut opt, &img, &boxes, 1e-3).unwrap();
        }
        assert!(last < first * 0.5, "loss {first:.4} -> {last:.4}");
    }

    #[test]
    fn adam_minimizes_quadratic() {
        let mut store = ParamStore::<f32>::new();
        let id = store.add("x", Tensor::full(&[1], 3.0f32));
        let mut opt = Adam::new(&store);
        for _ in 0..600 {
            let x = store.value(id).data()[0];
            let grad = Tensor::full(&[1], 2.0 * x);
            opt.step(&mut store, &[(id, grad)], 0.05);
        }
        assert!(store.value(id).data()[0].abs() < 1e-2);
    }

    #[test]
    fn bilinear_preserves_constant_maps() {
        let up = bilinear_to(&[0.7; 6], 2, 3, 8);
        assert!(up.iter().all(|v| (v - 0.7).abs() < 1e-12));
    }
}
