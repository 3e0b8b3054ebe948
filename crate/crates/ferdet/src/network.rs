//! The detector: a CSP backbone with VSS2 refinement on its pyramid
//! outputs, a PAN-style neck built from VSS modules, and a decoupled
//! anchor-free head, plus box decoding, NMS, cost reporting, and
//! checkpoint serialization.

use std::io::{Read as _, Write as _};

use rand::Rng;

use crate::blocks::{ChannelNorm, ConvLayer, VssKind, VssModule};
use crate::error::{FerError, Result};
use crate::graph::Var;
use crate::metrics::{iou, BoxXyxy, Detection};
use crate::ops;
use crate::params::{ParamStore, Session};
use crate::tensor::{Scalar, Tensor};

/// Strides of the three output levels relative to the input.
pub const STRIDES: [usize; 3] = [8, 16, 32];

const BASE_WIDTHS: [usize; 5] = [32, 64, 128, 256, 512];
const CKPT_MAGIC: &[u8; 8] = b"FERCKPT\0";

/// Architecture hyperparameters.
#[derive(Clone, Debug, PartialEq)]
pub struct NetConfig {
    /// Square input resolution; must be divisible by 32.
    pub input_size: usize,
    pub num_classes: usize,
    /// Multiplies the base widths {32,64,128,256,512}.
    pub width_mult: f64,
    /// SSM state dimension per direction.
    pub n_state: usize,
}

impl Default for NetConfig {
    fn default() -> Self {
        NetConfig {
            input_size: 320,
            num_classes: 7,
            width_mult: 1.0,
            n_state: 8,
        }
    }
}

impl NetConfig {
    pub fn validate(&self) -> Result<()> {
        if self.input_size == 0 || self.input_size % 32 != 0 {
            return Err(FerError::invalid(format!(
                "input_size must be a positive multiple of 32, got {}",
                self.input_size
            )));
        }
        if self.num_classes == 0 {
            return Err(FerError::invalid("num_classes must be positive"));
        }
        if self.n_state == 0 {
            return Err(FerError::invalid("n_state must be positive"));
        }
        for w in self.widths() {
            if w < 4 || w % 4 != 0 {
                return Err(FerError::invalid(format!(
                    "width_mult {} yields channel width {w}, need multiples of 4",
                    self.width_mult
                )));
            }
        }
        Ok(())
    }

    /// Channel widths of the stem and the four stages.
    pub fn widths(&self) -> [usize; 5] {
        let mut out = [0usize; 5];
        for (o, b) in out.iter_mut().zip(BASE_WIDTHS) {
            // round to the nearest multiple of 4 so VSS splits stay even
            let scaled = (b as f64 * self.width_mult / 4.0).round().max(1.0) as usize * 4;
            *o = scaled;
        }
        out
    }

    fn to_kv(&self) -> String {
        format!(
            "input_size={}\nnum_classes={}\nwidth_mult={}\nn_state={}\n",
            self.input_size, self.num_classes, self.width_mult, self.n_state
        )
    }

    fn from_kv(text: &str) -> Result<Self> {
        let mut cfg = NetConfig::default();
        for line in text.lines() {
            let line = line.trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| FerError::data(format!("bad checkpoint config line '{line}'")))?;
            let bad = |e: &dyn std::fmt::Display| {
                FerError::data(format!("bad checkpoint config value {k}={v}: {e}"))
            };
            match k {
                "input_size" => cfg.input_size = v.parse().map_err(|e| bad(&e))?,
                "num_classes" => cfg.num_classes = v.parse().map_err(|e| bad(&e))?,
                "width_mult" => cfg.width_mult = v.parse().map_err(|e| bad(&e))?,
                "n_state" => cfg.n_state = v.parse().map_err(|e| bad(&e))?,
                other => {
                    return Err(FerError::data(format!(
                        "unknown checkpoint config key '{other}'"
                    )))
                }
            }
        }
        cfg.validate()?;
        Ok(cfg)
    }
}

/// Convolution, channel layer norm, SiLU.
struct ConvNormAct {
    conv: ConvLayer,
    norm: ChannelNorm,
}

impl ConvNormAct {
    #[allow(clippy::too_many_arguments)]
    fn new<T: Scalar>(
        store: &mut ParamStore<T>,
        rng: &mut impl Rng,
        name: &str,
        in_ch: usize,
        out_ch: usize,
        k: usize,
        stride: usize,
    ) -> Self {
        ConvNormAct {
            conv: ConvLayer::new(store, rng, &format!("{name}.conv"), in_ch, out_ch, k, stride, k / 2, 1, false),
            norm: ChannelNorm::new(store, &format!("{name}.norm"), out_ch),
        }
    }

    fn forward<T: Scalar>(&self, sess: &mut Session<T>, x: Var) -> Result<Var> {
        let y = self.conv.forward(sess, x)?;
        let y = self.norm.forward(sess, y)?;
        ops::silu(&mut sess.g, y)
    }
}

/// Cross-stage-partial block: half the channels pass through a residual
/// bottleneck, the other half bypass; a pointwise fusion recombines.
struct CspBlock {
    split_a: ConvLayer,
    split_b: ConvLayer,
    inner1: ConvNormAct,
    inner2: ConvNormAct,
    fuse: ConvLayer,
}

impl CspBlock {
    fn new<T: Scalar>(
        store: &mut ParamStore<T>,
        rng: &mut impl Rng,
        name: &str,
        ch: usize,
    ) -> Self {
        let half = ch / 2;
        CspBlock {
            split_a: ConvLayer::new(store, rng, &format!("{name}.split_a"), ch, half, 1, 1, 0, 1, true),
            split_b: ConvLayer::new(store, rng, &format!("{name}.split_b"), ch, half, 1, 1, 0, 1, true),
            inner1: ConvNormAct::new(store, rng, &format!("{name}.inner1"), half, half, 1, 1),
            inner2: ConvNormAct::new(store, rng, &format!("{name}.inner2"), half, half, 3, 1),
            fuse: ConvLayer::new(store, rng, &format!("{name}.fuse"), ch, ch, 1, 1, 0, 1, true),
        }
    }

    fn forward<T: Scalar>(&self, sess: &mut Session<T>, x: Var) -> Result<Var> {
        let a = self.split_a.forward(sess, x)?;
        let b = self.split_b.forward(sess, x)?;
        let y = self.inner1.forward(sess, b)?;
        let y = self.inner2.forward(sess, y)?;
        let y = ops::add(&mut sess.g, y, b)?;
        let cat = ops::concat_channels(&mut sess.g, &[a, y])?;
        self.fuse.forward(sess, cat)
    }
}

struct Stage {
    down: ConvNormAct,
    csp: CspBlock,
}

/// Per-level raw head outputs: box regression `[B,4,H,W]`, objectness
/// `[B,1,H,W]`, class logits `[B,K,H,W]`.
pub struct LevelOut {
    pub boxes: Var,
    pub obj: Var,
    pub cls: Var,
    pub stride: usize,
}

struct HeadLevel {
    stem: ConvLayer,
    cls_tower: ConvNormAct,
    reg_tower: ConvNormAct,
    cls_out: ConvLayer,
    box_out: ConvLayer,
    obj_out: ConvLayer,
}

impl HeadLevel {
    fn new<T: Scalar>(
        store: &mut ParamStore<T>,
        rng: &mut impl Rng,
        name: &str,
        in_ch: usize,
        head_ch: usize,
        num_classes: usize,
    ) -> Self {
        HeadLevel {
            stem: ConvLayer::new(store, rng, &format!("{name}.stem"), in_ch, head_ch, 1, 1, 0, 1, true),
            cls_tower: ConvNormAct::new(store, rng, &format!("{name}.cls_tower"), head_ch, head_ch, 3, 1),
            reg_tower: ConvNormAct::new(store, rng, &format!("{name}.reg_tower"), head_ch, head_ch, 3, 1),
            cls_out: ConvLayer::new(store, rng, &format!("{name}.cls_out"), head_ch, num_classes, 1, 1, 0, 1, true),
            box_out: ConvLayer::new(store, rng, &format!("{name}.box_out"), head_ch, 4, 1, 1, 0, 1, true),
            obj_out: ConvLayer::new(store, rng, &format!("{name}.obj_out"), head_ch, 1, 1, 1, 0, 1, true),
        }
    }

    fn forward<T: Scalar>(&self, sess: &mut Session<T>, x: Var, stride: usize) -> Result<LevelOut> {
        let s = self.stem.forward(sess, x)?;
        let ct = self.cls_tower.forward(sess, s)?;
        let rt = self.reg_tower.forward(sess, s)?;
        Ok(LevelOut {
            boxes: self.box_out.forward(sess, rt)?,
            obj: self.obj_out.forward(sess, rt)?,
            cls: self.cls_out.forward(sess, ct)?,
            stride,
        })
    }
}

/// The full detector.
pub struct Detector {
    pub cfg: NetConfig,
    stem: ConvNormAct,
    stages: Vec<Stage>,
    out_vss: Vec<VssModule>,       // VSS2 on P3/P4/P5
    lat5: ConvLayer,               // p5 -> w3 before upsampling
    vss_t4: VssModule,             // VSS1 on cat(up5, p4)
    lat4: ConvLayer,               // t4 -> w2 before upsampling
    vss_t3: VssModule,             // VSS1 on cat(up4, p3)
    vss_n3: VssModule,             // VSS2 on t3
    down3: ConvNormAct,            // n3 stride-2
    fuse4: ConvLayer,              // cat(down3, t4) -> w3
    vss_n4: VssModule,
    down4: ConvNormAct,            // n4 stride-2
    fuse5: ConvLayer,              // cat(down4, p5) -> w4
    vss_n5: VssModule,
    heads: Vec<HeadLevel>,
}

impl Detector {
    pub fn new<T: Scalar>(
        cfg: NetConfig,
        store: &mut ParamStore<T>,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        cfg.validate()?;
        let w = cfg.widths();
        let ns = cfg.n_state;
        let stem = ConvNormAct::new(store, rng, "stem", 3, w[0], 3, 2);
        let mut stages = Vec::new();
        for i in 0..4 {
            stages.push(Stage {
                down: ConvNormAct::new(store, rng, &format!("stage{}.down", i + 1), w[i], w[i + 1], 3, 2),
                csp: CspBlock::new(store, rng, &format!("stage{}.csp", i + 1), w[i + 1]),
            });
        }
        let out_vss = (0..3)
            .map(|i| {
                VssModule::new(store, rng, &format!("p{}_vss", i + 3), w[i + 2], VssKind::Keep, ns)
            })
            .collect::<Result<Vec<_>>>()?;
        let lat5 = ConvLayer::new(store, rng, "neck.lat5", w[4], w[3], 1, 1, 0, 1, true);
        let vss_t4 = VssModule::new(store, rng, "neck.t4", 2 * w[3], VssKind::Reduce, ns)?;
        let lat4 = ConvLayer::new(store, rng, "neck.lat4", w[3], w[2], 1, 1, 0, 1, true);
        let vss_t3 = VssModule::new(store, rng, "neck.t3", 2 * w[2], VssKind::Reduce, ns)?;
        let vss_n3 = VssModule::new(store, rng, "neck.n3", w[2], VssKind::Keep, ns)?;
        let down3 = ConvNormAct::new(store, rng, "neck.down3", w[2], w[2], 3, 2);
        let fuse4 = ConvLayer::new(store, rng, "neck.fuse4", w[2] + w[3], w[3], 1, 1, 0, 1, true);
        let vss_n4 = VssModule::new(store, rng, "neck.n4", w[3], VssKind::Keep, ns)?;
        let down4 = ConvNormAct::new(store, rng, "neck.down4", w[3], w[3], 3, 2);
        let fuse5 = ConvLayer::new(store, rng, "neck.fuse5", w[3] + w[4], w[4], 1, 1, 0, 1, true);
        let vss_n5 = VssModule::new(store, rng, "neck.n5", w[4], VssKind::Keep, ns)?;
        let heads = (0..3)
            .map(|i| {
                HeadLevel::new(
                    store,
                    rng,
                    &format!("head{}", i + 3),
                    w[i + 2],
                    w[2],
                    cfg.num_classes,
                )
            })
            .collect();
        Ok(Detector {
            cfg,
            stem,
            stages,
            out_vss,
            lat5,
            vss_t4,
            lat4,
            vss_t3,
            vss_n3,
            down3,
            fuse4,
            vss_n4,
            down4,
            fuse5,
            vss_n5,
            heads,
        })
    }

    /// `x: [B,3,S,S]` -> three levels of raw head maps.
    pub fn forward<T: Scalar>(
        &self,
        sess: &mut Session<T>,
        x: Var,
        chunk: Option<usize>,
    ) -> Result<Vec<LevelOut>> {
        let shape = sess.g.value(x).shape().to_vec();
        if shape.len() != 4 || shape[1] != 3 || shape[2] != self.cfg.input_size || shape[3] != self.cfg.input_size {
            return Err(FerError::shape(format!(
                "detector expects [B,3,{0},{0}], got {shape:?}",
                self.cfg.input_size
            )));
        }
        let mut y = self.stem.forward(sess, x)?;
        let mut pyramid = Vec::new();
        for (i, st) in self.stages.iter().enumerate() {
            y = st.down.forward(sess, y)?;
            y = st.csp.forward(sess, y)?;
            if i >= 1 {
                pyramid.push(y);
            }
        }
        let p3 = self.out_vss[0].forward(sess, pyramid[0], chunk)?;
        let p4 = self.out_vss[1].forward(sess, pyramid[1], chunk)?;
        let p5 = self.out_vss[2].forward(sess, pyramid[2], chunk)?;

        // top-down
        let l5 = self.lat5.forward(sess, p5)?;
        let up5 = ops::nearest_upsample(&mut sess.g, l5, 2)?;
        let cat4 = ops::concat_channels(&mut sess.g, &[up5, p4])?;
        let t4 = self.vss_t4.forward(sess, cat4, chunk)?;
        let l4 = self.lat4.forward(sess, t4)?;
        let up4 = ops::nearest_upsample(&mut sess.g, l4, 2)?;
        let cat3 = ops::concat_channels(&mut sess.g, &[up4, p3])?;
        let t3 = self.vss_t3.forward(sess, cat3, chunk)?;

        // bottom-up
        let n3 = self.vss_n3.forward(sess, t3, chunk)?;
        let d3 = self.down3.forward(sess, n3)?;
        let cat = ops::concat_channels(&mut sess.g, &[d3, t4])?;
        let f4 = self.fuse4.forward(sess, cat)?;
        let n4 = self.vss_n4.forward(sess, f4, chunk)?;
        let d4 = self.down4.forward(sess, n4)?;
        let cat = ops::concat_channels(&mut sess.g, &[d4, p5])?;
        let f5 = self.fuse5.forward(sess, cat)?;
        let n5 = self.vss_n5.forward(sess, f5, chunk)?;

        [n3, n4, n5]
            .into_iter()
            .zip(STRIDES)
            .zip(&self.heads)
            .map(|((feat, stride), head)| head.forward(sess, feat, stride))
            .collect()
    }
}

/// Decodes one level's raw maps (batch size 1) into boxes in input-image
/// coordinates: center `(grid + offset) * stride`, size `exp(pred) * stride`,
/// score `sigmoid(obj) * sigmoid(cls)`.
pub fn decode_level(
    boxes: &Tensor<f32>,
    obj: &Tensor<f32>,
    cls: &Tensor<f32>,
    stride: usize,
    conf: f64,
) -> Vec<Detection> {
    let (k, h, w) = (cls.shape()[1], cls.shape()[2], cls.shape()[3]);
    let hw = h * w;
    let sig = |z: f32| crate::ops::sigmoid_scalar(z) as f64;
    let mut out = Vec::new();
    for r in 0..h {
        for c in 0..w {
            let i = r * w + c;
            let o = sig(obj.data()[i]);
            if o * 1.0 < conf {
                // even a perfect class score cannot reach conf
                continue;
            }
            let cx = (c as f64 + boxes.data()[i] as f64) * stride as f64;
            let cy = (r as f64 + boxes.data()[hw + i] as f64) * stride as f64;
            let bw = (boxes.data()[2 * hw + i] as f64).min(8.0).exp() * stride as f64;
            let bh = (boxes.data()[3 * hw + i] as f64).min(8.0).exp() * stride as f64;
            let bb = BoxXyxy::new(cx - bw / 2.0, cy - bh / 2.0, cx + bw / 2.0, cy + bh / 2.0);
            for ki in 0..k {
                let score = o * sig(cls.data()[ki * hw + i]);
                if score >= conf {
                    out.push(Detection {
                        bbox: bb,
                        class: ki,
                        score,
                    });
                }
            }
        }
    }
    out
}

/// Class-wise greedy NMS; the result is sorted by descending score.
pub fn nms(mut dets: Vec<Detection>, iou_thresh: f64) -> Vec<Detection> {
    dets.sort_by(|a, b| b.score.partial_cmp(&a.score).unwrap_or(std::cmp::Ordering::Equal));
    let mut keep: Vec<Detection> = Vec::new();
    'outer: for d in dets {
        for kept in &keep {
            if kept.class == d.class && iou(&kept.bbox, &d.bbox) > iou_thresh {
                continue 'outer;
            }
        }
        keep.push(d);
    }
    keep
}

/// Parameter count and FLOPs (2x the counted multiply-accumulates) for one
/// single-image forward pass at the configured input size.
pub struct CostReport {
    pub params: usize,
    pub macs: u64,
    pub flops: u64,
}

pub fn report_cost(cfg: &NetConfig) -> Result<CostReport> {
    use rand::SeedableRng;
    let mut store = ParamStore::<f32>::new();
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(0);
    let det = Detector::new(cfg.clone(), &mut store, &mut rng)?;
    let params = store.scalar_count();
    let x = Tensor::zeros(&[1, 3, cfg.input_size, cfg.input_size]);
    ops::cost::reset();
    let mut sess = Session::new(&store);
    let xv = sess.g.leaf(x, false);
    det.forward(&mut sess, xv, None)?;
    let macs = ops::cost::total_macs();
    Ok(CostReport {
        params,
        macs,
        flops: 2 * macs,
    })
}

/// Writes config plus every named parameter.
pub fn save_checkpoint(path: &std::path::Path, cfg: &NetConfig, store: &ParamStore<f32>) -> Result<()> {
    let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
    f.write_all(CKPT_MAGIC)?;
    let cfg_text = cfg.to_kv();
    f.write_all(&(cfg_text.len() as u32).to_le_bytes())?;
    f.write_all(cfg_text.as_bytes())?;
    f.write_all(&(store.len() as u32).to_le_bytes())?;
    for (_, name, value) in store.iter() {
        f.write_all(&(name.len() as u32).to_le_bytes())?;
        f.write_all(name.as_bytes())?;
        value.write_to(&mut f)?;
    }
    Ok(())
}

/// Reads a checkpoint back into a freshly built detector.
pub fn load_checkpoint(path: &std::path::Path) -> Result<(NetConfig, Detector, ParamStore<f32>)> {
    use rand::SeedableRng;
    let mut f = std::io::BufReader::new(std::fs::File::open(path)?);
    let mut magic = [0u8; 8];
    f.read_exact(&mut magic)?;
    if &magic != CKPT_MAGIC {
        return Err(FerError::data("not a checkpoint file (bad magic)"));
    }
    let mut len4 = [0u8; 4];
    f.read_exact(&mut len4)?;
    let mut cfg_bytes = vec![0u8; u32::from_le_bytes(len4) as usize];
    f.read_exact(&mut cfg_bytes)?;
    let cfg = NetConfig::from_kv(
        std::str::from_utf8(&cfg_bytes).map_err(|e| FerError::data(format!("checkpoint config not utf-8: {e}")))?,
    )?;
    let mut store = ParamStore::<f32>::new();
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(0);
    let det = Detector::new(cfg.clone(), &mut store, &mut rng)?;
    f.read_exact(&mut len4)?;
    let count = u32::from_le_bytes(len4) as usize;
    if count != store.len() {
        return Err(FerError::data(format!(
            "checkpoint has {count} tensors, model has {}",
            store.len()
        )));
    }
    for _ in 0..count {
        f.read_exact(&mut len4)?;
        let mut name_bytes = vec![0u8; u32::from_le_bytes(len4) as usize];
        f.read_exact(&mut name_bytes)?;
        let name = String::from_utf8(name_bytes)
            .map_err(|e| FerError::data(format!("checkpoint tensor name not utf-8: {e}")))?;
        let value = Tensor::<f32>::read_from(&mut f)?;
        let id = store
            .find(&name)
            .ok_or_else(|| FerError::data(format!("checkpoint tensor '{name}' not in model")))?;
        if store.value(id).shape() != value.shape() {
            return Err(FerError::data(format!(
                "checkpoint tensor '{name}' has shape {:?}, model wants {:?}",
                value.shape(),
                store.value(id).shape()
            )));
        }
        *store.value_mut(id) = value;
    }
    Ok((cfg, det, store))
}
