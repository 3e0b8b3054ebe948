//! Composite network blocks: channel attention (ABMLP), the feature
//! refinement branch (FRM), the omnidirectional scan branch (OSS), and the
//! dual-branch visual state-space modules (VSS1 / VSS2).

use rand::Rng;

use crate::error::{FerError, Result};
use crate::graph::Var;
use crate::ops;
use crate::oss::OssmBlock;
use crate::params::{kaiming_uniform, ParamId, ParamStore, Session};
use crate::tensor::{Scalar, Tensor};

/// A convolution with learned weights, optionally biased.
#[derive(Clone)]
pub struct ConvLayer {
    pub w: ParamId,
    pub b: Option<ParamId>,
    pub stride: usize,
    pub pad: usize,
    pub groups: usize,
    pub in_ch: usize,
    pub out_ch: usize,
}

impl ConvLayer {
    pub fn new<T: Scalar>(
        store: &mut ParamStore<T>,
        rng: &mut impl Rng,
        name: &str,
        in_ch: usize,
        out_ch: usize,
        k: usize,
        stride: usize,
        pad: usize,
        groups: usize,
        bias: bool,
    ) -> Self {
        let fan_in = (in_ch / groups) * k * k;
        let w = store.add(
            format!("{name}.w"),
            kaiming_uniform(rng, &[out_ch, in_ch / groups, k, k], fan_in),
        );
        let b = bias.then(|| store.add(format!("{name}.b"), Tensor::zeros(&[out_ch])));
        ConvLayer {
            w,
            b,
            stride,
            pad,
            groups,
            in_ch,
            out_ch,
        }
    }

    pub fn forward<T: Scalar>(&self, sess: &mut Session<T>, x: Var) -> Result<Var> {
        let w = sess.param(self.w);
        let b = self.b.map(|id| sess.param(id));
        ops::conv2d(&mut sess.g, x, w, b, self.stride, self.pad, self.groups)
    }
}

/// Channel layer normalization with learned affine, applied per spatial site.
#[derive(Clone)]
pub struct ChannelNorm {
    gamma: ParamId,
    beta: ParamId,
}

impl ChannelNorm {
    pub fn new<T: Scalar>(store: &mut ParamStore<T>, name: &str, channels: usize) -> Self {
        ChannelNorm {
            gamma: store.add(format!("{name}.gamma"), Tensor::full(&[channels], T::one())),
            beta: store.add(format!("{name}.beta"), Tensor::zeros(&[channels])),
        }
    }

    pub fn forward<T: Scalar>(&self, sess: &mut Session<T>, x: Var) -> Result<Var> {
        let gamma = sess.param(self.gamma);
        let beta = sess.param(self.beta);
        ops::layer_norm(&mut sess.g, x, gamma, beta, 1e-5)
    }
}

fn lin_pair<T: Scalar>(
    store: &mut ParamStore<T>,
    rng: &mut impl Rng,
    name: &str,
    out_f: usize,
    in_f: usize,
) -> (ParamId, ParamId) {
    (
        store.add(format!("{name}.w"), kaiming_uniform(rng, &[out_f, in_f], in_f)),
        store.add(format!("{name}.b"), Tensor::zeros(&[out_f])),
    )
}

/// Attention-balanced MLP: global average pooling followed by a three-layer
/// bottleneck MLP whose sigmoid output gates each channel.
pub struct AbmlpBlock {
    channels: usize,
    w1: ParamId,
    b1: ParamId,
    w2: ParamId,
    b2: ParamId,
    w3: ParamId,
    b3: ParamId,
}

impl AbmlpBlock {
    /// `reduction` divides the hidden width (clamped to at least 1).
    pub fn new<T: Scalar>(
        store: &mut ParamStore<T>,
        rng: &mut impl Rng,
        name: &str,
        channels: usize,
        reduction: usize,
    ) -> Self {
        let hidden = (channels / reduction).max(1);
        let (w1, b1) = lin_pair(store, rng, &format!("{name}.fc1"), hidden, channels);
        let (w2, b2) = lin_pair(store, rng, &format!("{name}.fc2"), hidden, hidden);
        let (w3, b3) = lin_pair(store, rng, &format!("{name}.fc3"), channels, hidden);
        AbmlpBlock {
            channels,
            w1,
            b1,
            w2,
            b2,
            w3,
            b3,
        }
    }

    /// `x: [B,C,H,W] -> x * gate`, gate broadcast from `[B,C,1,1]`.
    pub fn forward<T: Scalar>(&self, sess: &mut Session<T>, x: Var) -> Result<Var> {
        let shape = sess.g.value(x).shape().to_vec();
        if shape.len() != 4 || shape[1] != self.channels {
            return Err(FerError::shape(format!(
                "abmlp expects [B,{},H,W], got {shape:?}",
                self.channels
            )));
        }
        let pooled = ops::global_avg_pool(&mut sess.g, x)?; // [B,C]
        let (w1, b1) = (sess.param(self.w1), sess.param(self.b1));
        let h1 = ops::linear(&mut sess.g, pooled, w1, Some(b1))?;
        let h1 = ops::relu(&mut sess.g, h1)?;
        let (w2, b2) = (sess.param(self.w2), sess.param(self.b2));
        let h2 = ops::linear(&mut sess.g, h1, w2, Some(b2))?;
        let h2 = ops::relu(&mut sess.g, h2)?;
        let (w3, b3) = (sess.param(self.w3), sess.param(self.b3));
        let h3 = ops::linear(&mut sess.g, h2, w3, Some(b3))?;
        let gate = ops::sigmoid(&mut sess.g, h3)?;
        let gate = ops::reshape(&mut sess.g, gate, &[shape[0], shape[1], 1, 1])?;
        ops::mul_bcast(&mut sess.g, x, gate)
    }
}

/// Feature refinement branch: squeeze to `C/2` with attention in between.
/// Input and output both carry `channels` channels.
pub struct FrmBranch {
    reduce: ConvLayer,
    attn: AbmlpBlock,
    expand: ConvLayer,
}

impl FrmBranch {
    pub fn new<T: Scalar>(
        store: &mut ParamStore<T>,
        rng: &mut impl Rng,
        name: &str,
        channels: usize,
    ) -> Self {
        let mid = (channels / 2).max(1);
        FrmBranch {
            reduce: ConvLayer::new(store, rng, &format!("{name}.reduce"), channels, mid, 1, 1, 0, 1, true),
            attn: AbmlpBlock::new(store, rng, &format!("{name}.attn"), mid, 4),
            expand: ConvLayer::new(store, rng, &format!("{name}.expand"), mid, channels, 1, 1, 0, 1, true),
        }
    }

    pub fn forward<T: Scalar>(&self, sess: &mut Session<T>, x: Var) -> Result<Var> {
        let y = self.reduce.forward(sess, x)?;
        let y = ops::silu(&mut sess.g, y)?;
        let y = self.attn.forward(sess, y)?;
        self.expand.forward(sess, y)
    }
}

/// Omnidirectional scan branch: a gated pair of paths around the OSSM.
/// Path 1 gates (pointwise linear + SiLU); path 2 runs depthwise conv,
/// SiLU, the omnidirectional scan, and a norm. Their product is mixed back
/// and added to the input.
pub struct OssBranch {
    norm_in: ChannelNorm,
    gate_proj: ConvLayer,
    in_proj: ConvLayer,
    dw_conv: ConvLayer,
    ossm: OssmBlock,
    norm_out: ChannelNorm,
    out_proj: ConvLayer,
}

impl OssBranch {
    pub fn new<T: Scalar>(
        store: &mut ParamStore<T>,
        rng: &mut impl Rng,
        name: &str,
        channels: usize,
        n_state: usize,
    ) -> Self {
        fn pw<T: Scalar>(
            store: &mut ParamStore<T>,
            rng: &mut impl Rng,
            name: &str,
            channels: usize,
        ) -> ConvLayer {
            ConvLayer::new(store, rng, name, channels, channels, 1, 1, 0, 1, true)
        }
        OssBranch {
            norm_in: ChannelNorm::new(store, &format!("{name}.norm_in"), channels),
            gate_proj: pw(store, rng, &format!("{name}.gate_proj"), channels),
            in_proj: pw(store, rng, &format!("{name}.in_proj"), channels),
            dw_conv: ConvLayer::new(
                store,
                rng,
                &format!("{name}.dw_conv"),
                channels,
                channels,
                3,
                1,
                1,
                channels,
                true,
            ),
            ossm: OssmBlock::new(store, rng, &format!("{name}.ossm"), channels, n_state),
            norm_out: ChannelNorm::new(store, &format!("{name}.norm_out"), channels),
            out_proj: pw(store, rng, &format!("{name}.out_proj"), channels),
        }
    }

    pub fn forward<T: Scalar>(
        &self,
        sess: &mut Session<T>,
        x: Var,
        chunk: Option<usize>,
    ) -> Result<Var> {
        let n = self.norm_in.forward(sess, x)?;
        let gate = self.gate_proj.forward(sess, n)?;
        let gate = ops::silu(&mut sess.g, gate)?;
        let p = self.in_proj.forward(sess, n)?;
        let p = self.dw_conv.forward(sess, p)?;
        let p = ops::silu(&mut sess.g, p)?;
        let p = self.ossm.forward(sess, p, chunk)?;
        let p = self.norm_out.forward(sess, p)?;
        let gated = ops::mul(&mut sess.g, gate, p)?;
        let mixed = self.out_proj.forward(sess, gated)?;
        ops::add(&mut sess.g, mixed, x)
    }
}

/// Which fusion a VSS module applies.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum VssKind {
    /// `C -> C/2`, no shortcut.
    Reduce,
    /// `C -> C`, residual shortcut around the fusion.
    Keep,
}

/// Dual-branch visual state-space module: the input splits channel-wise,
/// one half through FRM and the other through OSS, and a pointwise fusion
/// recombines them.
pub struct VssModule {
    pub kind: VssKind,
    pub in_ch: usize,
    frm: FrmBranch,
    oss: OssBranch,
    fuse: ConvLayer,
}

impl VssModule {
    pub fn new<T: Scalar>(
        store: &mut ParamStore<T>,
        rng: &mut impl Rng,
        name: &str,
        in_ch: usize,
        kind: VssKind,
        n_state: usize,
    ) -> Result<Self> {
        if in_ch % 2 != 0 {
            return Err(FerError::invalid(format!(
                "vss module needs even input channels, got {in_ch}"
            )));
        }
        let half = in_ch / 2;
        let out_ch = match kind {
            VssKind::Reduce => half,
            VssKind::Keep => in_ch,
        };
        Ok(VssModule {
            kind,
            in_ch,
            frm: FrmBranch::new(store, rng, &format!("{name}.frm"), half),
            oss: OssBranch::new(store, rng, &format!("{name}.oss"), half, n_state),
            fuse: ConvLayer::new(store, rng, &format!("{name}.fuse"), in_ch, out_ch, 1, 1, 0, 1, true),
        })
    }

    pub fn out_ch(&self) -> usize {
        self.fuse.out_ch
    }

    pub fn forward<T: Scalar>(
        &self,
        sess: &mut Session<T>,
        x: Var,
        chunk: Option<usize>,
    ) -> Result<Var> {
        let halves = ops::split_channels(&mut sess.g, x, 2)?;
        let a = self.frm.forward(sess, halves[0])?;
        let b = self.oss.forward(sess, halves[1], chunk)?;
        let cat = ops::concat_channels(&mut sess.g, &[a, b])?;
        let fused = self.fuse.forward(sess, cat)?;
        match self.kind {
            VssKind::Reduce => Ok(fused),
            VssKind::Keep => ops::add(&mut sess.g, fused, x),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn demo_input(b: usize, c: usize, h: usize, w: usize) -> Tensor<f32> {
        Tensor::new(
            vec![b, c, h, w],
            (0..b * c * h * w).map(|i| ((i * 37 % 113) as f32 / 56.5) - 1.0).collect(),
        )
        .unwrap()
    }

    #[test]
    fn abmlp_zero_weights_halve_input() {
        // all-zero MLP -> sigmoid(0) = 0.5 gate on every channel
        let mut store = ParamStore::<f32>::new();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let attn = AbmlpBlock::new(&mut store, &mut rng, "attn", 8, 4);
        for (_, v) in store.iter_mut() {
            v.data_mut().fill(0.0);
        }
        let x = demo_input(2, 8, 3, 3);
        let mut sess = Session::new(&store);
        let xv = sess.g.leaf(x.clone(), false);
        let y = attn.forward(&mut sess, xv).unwrap();
        let yv = sess.g.value(y);
        for (o, i) in yv.data().iter().zip(x.data()) {
            assert!((o - 0.5 * i).abs() < 1e-6);
        }
    }

    #[test]
    fn abmlp_hidden_width_never_zero() {
        let mut store = ParamStore::<f32>::new();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let attn = AbmlpBlock::new(&mut store, &mut rng, "a", 2, 4);
        let x = demo_input(1, 2, 2, 2);
        let mut sess = Session::new(&store);
        let xv = sess.g.leaf(x, false);
        assert!(attn.forward(&mut sess, xv).is_ok());
    }

    #[test]
    fn frm_preserves_shape() {
        let mut store = ParamStore::<f32>::new();
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let frm = FrmBranch::new(&mut store, &mut rng, "frm", 8);
        let x = demo_input(1, 8, 4, 5);
        let mut sess = Session::new(&store);
        let xv = sess.g.leaf(x, false);
        let y = frm.forward(&mut sess, xv).unwrap();
        assert_eq!(sess.g.value(y).shape(), &[1, 8, 4, 5]);
    }

    #[test]
    fn oss_branch_zero_out_proj_is_identity() {
        // zeroing the output projection leaves only the residual path
        let mut store = ParamStore::<f32>::new();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let oss = OssBranch::new(&mut store, &mut rng, "oss", 4, 2);
        for (name, v) in store.iter_mut() {
            if name.starts_with("oss.out_proj") {
                v.data_mut().fill(0.0);
            }
        }
        let x = demo_input(1, 4, 3, 4);
        let mut sess = Session::new(&store);
        let xv = sess.g.leaf(x.clone(), false);
        let y = oss.forward(&mut sess, xv, None).unwrap();
        assert_eq!(sess.g.value(y).data(), x.data());
    }

    #[test]
    fn vss_shapes_and_shortcut() {
        let mut store = ParamStore::<f32>::new();
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let v1 = VssModule::new(&mut store, &mut rng, "v1", 8, VssKind::Reduce, 2).unwrap();
        let v2 = VssModule::new(&mut store, &mut rng, "v2", 8, VssKind::Keep, 2).unwrap();
        let x = demo_input(2, 8, 4, 4);
        let mut sess = Session::new(&store);
        let xv = sess.g.leaf(x.clone(), false);
        let y1 = v1.forward(&mut sess, xv, None).unwrap();
        let y2 = v2.forward(&mut sess, xv, None).unwrap();
        assert_eq!(sess.g.value(y1).shape(), &[2, 4, 4, 4]);
        assert_eq!(sess.g.value(y2).shape(), &[2, 8, 4, 4]);

        // zero fusion weights turn the Keep variant into the identity
        let mut store2 = ParamStore::<f32>::new();
        let mut rng2 = ChaCha8Rng::seed_from_u64(5);
        let v = VssModule::new(&mut store2, &mut rng2, "v", 8, VssKind::Keep, 2).unwrap();
        for (name, t) in store2.iter_mut() {
            if name.starts_with("v.fuse") {
                t.data_mut().fill(0.0);
            }
        }
        let mut sess2 = Session::new(&store2);
        let xv2 = sess2.g.leaf(x.clone(), false);
        let y = v.forward(&mut sess2, xv2, None).unwrap();
        assert_eq!(sess2.g.value(y).data(), x.data());
    }

    #[test]
    fn vss_rejects_odd_channels() {
        let mut store = ParamStore::<f32>::new();
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        assert!(VssModule::new(&mut store, &mut rng, "v", 7, VssKind::Keep, 2).is_err());
    }

    #[test]
    fn vss_gradients_flow_to_both_branches() {
        let mut store = ParamStore::<f32>::new();
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let v = VssModule::new(&mut store, &mut rng, "v", 4, VssKind::Keep, 2).unwrap();
        let x = demo_input(1, 4, 3, 3);
        let mut sess = Session::new(&store);
        let xv = sess.g.leaf(x, false);
        let y = v.forward(&mut sess, xv, None).unwrap();
        let loss = ops::sum_all(&mut sess.g, y).unwrap();
        sess.g.backward(loss).unwrap();
        let grads = sess.grads_named();
        let nonzero = |needle: &str| {
            grads.iter().any(|(name, g)| {
                name.contains(needle) && g.data().iter().any(|v| v.abs() > 0.0)
            })
        };
        assert!(nonzero("frm.reduce"), "no gradient into the FRM branch");
        assert!(nonzero("oss.in_proj"), "no gradient into the OSS branch");
        assert!(nonzero("ossm.h_fwd"), "no gradient into the scan lanes");
    }
}
