use rayon::prelude::*;

use crate::error::{FerError, Result};
use crate::graph::{Graph, Var};
use crate::tensor::{Scalar, Tensor};

/// Output extent for one spatial axis.
fn out_extent(input: usize, k: usize, stride: usize, pad: usize, axis: &str) -> Result<usize> {
    let span = input + 2 * pad;
    if span < k {
        return Err(FerError::shape(format!(
            "conv2d: kernel {k} exceeds padded input {span} on axis {axis}"
        )));
    }
    // standard floor semantics: trailing rows/cols that don't fit a full
    // stride step are dropped
    Ok((span - k) / stride + 1)
}

pub(crate) fn conv2d_forward<T: Scalar>(
    x: &Tensor<T>,
    w: &Tensor<T>,
    bias: Option<&Tensor<T>>,
    stride: usize,
    pad: usize,
    groups: usize,
) -> Result<Tensor<T>> {
    if x.rank() != 4 || w.rank() != 4 {
        return Err(FerError::shape(format!(
            "conv2d wants 4-D input and kernel, got {:?} and {:?}",
            x.shape(),
            w.shape()
        )));
    }
    let (b, c, h, wdt) = (x.shape()[0], x.shape()[1], x.shape()[2], x.shape()[3]);
    let (oc, icpg, kh, kw) = (w.shape()[0], w.shape()[1], w.shape()[2], w.shape()[3]);
    if groups == 0 || c % groups != 0 || oc % groups != 0 {
        return Err(FerError::shape(format!(
            "conv2d: channels (in {c}, out {oc}) not divisible by groups {groups}"
        )));
    }
    if icpg != c / groups {
        return Err(FerError::shape(format!(
            "conv2d: kernel in-channels {icpg} != C/groups = {}",
            c / groups
        )));
    }
    if let Some(bt) = bias {
        if bt.shape() != [oc] {
            return Err(FerError::shape(format!(
                "conv2d: bias shape {:?} != [{oc}]",
                bt.shape()
            )));
        }
    }
    let oh = out_extent(h, kh, stride, pad, "H")?;
    let ow = out_extent(wdt, kw, stride, pad, "W")?;
    let ocpg = oc / groups;

    let mut out = vec![T::zero(); b * oc * oh * ow];
    super::cost::add((b * oc * oh * ow * icpg * kh * kw) as u64);
    let xd = x.data();
    let wd = w.data();
    out.par_chunks_mut(oh * ow).enumerate().for_each(|(bo, plane)| {
        let bi = bo / oc;
        let o = bo % oc;
        let grp = o / ocpg;
        let wbase = o * icpg * kh * kw;
        for icg in 0..icpg {
            let ic = grp * icpg + icg;
            let xplane = &xd[(bi * c + ic) * h * wdt..(bi * c + ic + 1) * h * wdt];
            let wslab = &wd[wbase + icg * kh * kw..wbase + (icg + 1) * kh * kw];
            for khi in 0..kh {
                for kwi in 0..kw {
                    let wv = wslab[khi * kw + kwi];
                    if wv == T::zero() {
                        continue;
                    }
                    for ohi in 0..oh {
                        let ih = (ohi * stride + khi) as isize - pad as isize;
                        if ih < 0 || ih >= h as isize {
                            continue;
                        }
                        let xrow = &xplane[ih as usize * wdt..(ih as usize + 1) * wdt];
                        let orow = ohi * ow;
                        for owi in 0..ow {
                            let iw = (owi * stride + kwi) as isize - pad as isize;
                            if iw < 0 || iw >= wdt as isize {
                                continue;
                            }
                            plane[orow + owi] = plane[orow + owi] + wv * xrow[iw as usize];
                        }
                    }
                }
            }
        }
        if let Some(bt) = bias {
            let bv = bt.data()[o];
            for v in plane.iter_mut() {
                *v = *v + bv;
            }
        }
    });
    Tensor::new(vec![b, oc, oh, ow], out)
}

/// 2-D cross-correlation with stride, zero padding, and channel groups.
/// `groups == C` gives the depthwise case; 1x1 kernels give pointwise mixing.
pub fn conv2d<T: Scalar>(
    g: &mut Graph<T>,
    x: Var,
    w: Var,
    bias: Option<Var>,
    stride: usize,
    pad: usize,
    groups: usize,
) -> Result<Var> {
    let (tx, tw) = (g.rc(x), g.rc(w));
    let tb = bias.map(|bv| g.rc(bv));
    let out = conv2d_forward(&tx, &tw, tb.as_deref(), stride, pad, groups)?;
    let out_shape = out.shape().to_vec();
    let mut parents = vec![x, w];
    if let Some(bv) = bias {
        parents.push(bv);
    }
    g.push_op(
        out,
        &parents,
        Box::new(move |gout| {
            let (b, c, h, wdt) = (
                tx.shape()[0],
                tx.shape()[1],
                tx.shape()[2],
                tx.shape()[3],
            );
            let (oc, icpg, kh, kw) = (
                tw.shape()[0],
                tw.shape()[1],
                tw.shape()[2],
                tw.shape()[3],
            );
            let (oh, ow) = (out_shape[2], out_shape[3]);
            let ocpg = oc / groups;
            let god = gout.data();
            let xd = tx.data();
            let wd = tw.data();

            // input gradient: scatter upstream grads through the kernel
            let mut gx = vec![T::zero(); tx.numel()];
            gx.par_chunks_mut(h * wdt).enumerate().for_each(|(bc, gplane)| {
                let bi = bc / c;
                let ic = bc % c;
                let grp = ic / icpg;
                let icg = ic % icpg;
                for og in 0..ocpg {
                    let o = grp * ocpg + og;
                    let goplane = &god[(bi * oc + o) * oh * ow..(bi * oc + o + 1) * oh * ow];
                    let wslab = &wd[(o * icpg + icg) * kh * kw..(o * icpg + icg + 1) * kh * kw];
                    for khi in 0..kh {
                        for kwi in 0..kw {
                            let wv = wslab[khi * kw + kwi];
                            if wv == T::zero() {
                                continue;
                            }
                            for ohi in 0..oh {
                                let ih = (ohi * stride + khi) as isize - pad as isize;
                                if ih < 0 || ih >= h as isize {
                                    continue;
                                }
                                let grow = ih as usize * wdt;
                                let gorow = ohi * ow;
                                for owi in 0..ow {
                                    let iw = (owi * stride + kwi) as isize - pad as isize;
                                    if iw < 0 || iw >= wdt as isize {
                                        continue;
                                    }
                                    gplane[grow + iw as usize] =
                                        gplane[grow + iw as usize] + wv * goplane[gorow + owi];
                                }
                            }
                        }
                    }
                }
            });

            // weight gradient
            let mut gw = vec![T::zero(); tw.numel()];
            gw.par_chunks_mut(icpg * kh * kw).enumerate().for_each(|(o, gwslab)| {
                let grp = o / ocpg;
                for bi in 0..b {
                    let goplane = &god[(bi * oc + o) * oh * ow..(bi * oc + o + 1) * oh * ow];
                    for icg in 0..icpg {
                        let ic = grp * icpg + icg;
                        let xplane = &xd[(bi * c + ic) * h * wdt..(bi * c + ic + 1) * h * wdt];
                        for khi in 0..kh {
                            for kwi in 0..kw {
                                let mut acc = T::zero();
                                for ohi in 0..oh {
                                    let ih = (ohi * stride + khi) as isize - pad as isize;
                                    if ih < 0 || ih >= h as isize {
                                        continue;
                                    }
                                    let xrow = &xplane[ih as usize * wdt..];
                                    let gorow = ohi * ow;
                                    for owi in 0..ow {
                                        let iw = (owi * stride + kwi) as isize - pad as isize;
                                        if iw < 0 || iw >= wdt as isize {
                                            continue;
                                        }
                                        acc = acc + xrow[iw as usize] * goplane[gorow + owi];
                                    }
                                }
                                gwslab[icg * kh * kw + khi * kw + kwi] =
                                    gwslab[icg * kh * kw + khi * kw + kwi] + acc;
                            }
                        }
                    }
                }
            });

            let mut res = vec![
                (x, Tensor::new(tx.shape().to_vec(), gx).unwrap()),
                (w, Tensor::new(tw.shape().to_vec(), gw).unwrap()),
            ];
            if let Some(bv) = bias {
                let mut gb = vec![T::zero(); oc];
                for bi in 0..b {
                    for (o, gbo) in gb.iter_mut().enumerate() {
                        let goplane = &god[(bi * oc + o) * oh * ow..(bi * oc + o + 1) * oh * ow];
                        for &v in goplane {
                            *gbo = *gbo + v;
                        }
                    }
                }
                res.push((bv, Tensor::new(vec![oc], gb).unwrap()));
            }
            res
        }),
    )
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    /// Direct six-nested-loop reference, independent of the kernel above.
    fn conv_oracle(
        x: &Tensor<f64>,
        w: &Tensor<f64>,
        stride: usize,
        pad: usize,
        groups: usize,
    ) -> Tensor<f64> {
        let (b, _c, h, wd) = (x.shape()[0], x.shape()[1], x.shape()[2], x.shape()[3]);
        let (oc, icpg, kh, kw) = (w.shape()[0], w.shape()[1], w.shape()[2], w.shape()[3]);
        let oh = (h + 2 * pad - kh) / stride + 1;
        let ow = (wd + 2 * pad - kw) / stride + 1;
        let ocpg = oc / groups;
        let mut out = Tensor::<f64>::zeros(&[b, oc, oh, ow]);
        for bi in 0..b {
            for o in 0..oc {
                let grp = o / ocpg;
                for ohi in 0..oh {
                    for owi in 0..ow {
                        let mut acc = 0.0;
                        for icg in 0..icpg {
                            for khi in 0..kh {
                                for kwi in 0..kw {
                                    let ih = (ohi * stride + khi) as isize - pad as isize;
                                    let iw = (owi * stride + kwi) as isize - pad as isize;
                                    if ih < 0 || iw < 0 || ih >= h as isize || iw >= wd as isize {
                                        continue;
                                    }
                                    acc += x.at(&[bi, grp * icpg + icg, ih as usize, iw as usize])
                                        * w.at(&[o, icg, khi, kwi]);
                                }
                            }
                        }
                        out.set(&[bi, o, ohi, owi], acc);
                    }
                }
            }
        }
        out
    }

    #[test]
    fn pointwise_scaling() {
        let x = Tensor::<f32>::full(&[1, 1, 3, 3], 1.0);
        let w = Tensor::from_vec(&[1, 1, 1, 1], vec![2.0f32]).unwrap();
        let y = conv2d_forward(&x, &w, None, 1, 0, 1).unwrap();
        assert_eq!(y.shape(), &[1, 1, 3, 3]);
        assert!(y.data().iter().all(|&v| v == 2.0));
    }

    #[test]
    fn full_window_sum() {
        let x = Tensor::from_vec(&[1, 1, 2, 2], vec![1.0f32, 2.0, 3.0, 4.0]).unwrap();
        let w = Tensor::<f32>::full(&[1, 1, 2, 2], 1.0);
        let y = conv2d_forward(&x, &w, None, 1, 0, 1).unwrap();
        assert_eq!(y.shape(), &[1, 1, 1, 1]);
        assert_eq!(y.data()[0], 10.0);
    }

    #[test]
    fn depthwise_matches_loop_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(42);
        let x = Tensor::from_vec(
            &[2, 4, 8, 8],
            (0..2 * 4 * 8 * 8).map(|_| rng.gen_range(-1.0..1.0)).collect(),
        )
        .unwrap();
        let w = Tensor::from_vec(
            &[4, 1, 3, 3],
            (0..4 * 9).map(|_| rng.gen_range(-1.0..1.0)).collect(),
        )
        .unwrap();
        let fast = conv2d_forward(&x, &w, None, 1, 1, 4).unwrap();
        let slow = conv_oracle(&x, &w, 1, 1, 4);
        for (a, b) in fast.data().iter().zip(slow.data()) {
            assert!((a - b).abs() <= 1e-6 * b.abs().max(1.0));
        }
    }

    #[test]
    fn grouped_strided_matches_loop_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let x = Tensor::from_vec(
            &[1, 6, 9, 9],
            (0..6 * 81).map(|_| rng.gen_range(-1.0..1.0)).collect(),
        )
        .unwrap();
        let w = Tensor::from_vec(
            &[4, 3, 3, 3],
            (0..4 * 27).map(|_| rng.gen_range(-1.0..1.0)).collect(),
        )
        .unwrap();
        let fast = conv2d_forward(&x, &w, None, 2, 1, 2).unwrap();
        let slow = conv_oracle(&x, &w, 2, 1, 2);
        assert_eq!(fast.shape(), slow.shape());
        for (a, b) in fast.data().iter().zip(slow.data()) {
            assert!((a - b).abs() <= 1e-9);
        }
    }

    #[test]
    fn shape_errors_name_the_axis() {
        let x = Tensor::<f32>::zeros(&[1, 3, 5, 5]);
        let w = Tensor::<f32>::zeros(&[2, 3, 7, 7]);
        let err = conv2d_forward(&x, &w, None, 1, 0, 1).unwrap_err();
        assert!(err.to_string().contains("axis H"), "{err}");
        let w2 = Tensor::<f32>::zeros(&[2, 2, 3, 3]);
        assert!(conv2d_forward(&x, &w2, None, 1, 1, 1).is_err());
    }
}
