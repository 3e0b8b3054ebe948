use crate::error::{FerError, Result};
use crate::graph::{Graph, Var};
use crate::tensor::{lit, Scalar, Tensor};

/// `[B,C,H,W] -> [B,C]` spatial mean.
pub fn global_avg_pool<T: Scalar>(g: &mut Graph<T>, x: Var) -> Result<Var> {
    let tx = g.rc(x);
    if tx.rank() != 4 {
        return Err(FerError::shape(format!(
            "global_avg_pool wants [B,C,H,W], got {:?}",
            tx.shape()
        )));
    }
    let (b, c, h, w) = (tx.shape()[0], tx.shape()[1], tx.shape()[2], tx.shape()[3]);
    let hw = h * w;
    let inv = lit::<T>(1.0 / hw as f64);
    let mut out = vec![T::zero(); b * c];
    for (bc, o) in out.iter_mut().enumerate() {
        let plane = &tx.data()[bc * hw..(bc + 1) * hw];
        let mut acc = T::zero();
        for &v in plane {
            acc = acc + v;
        }
        *o = acc * inv;
    }
    g.push_op(
        Tensor::new(vec![b, c], out)?,
        &[x],
        Box::new(move |gout| {
            let mut gx = vec![T::zero(); tx.numel()];
            for bc in 0..b * c {
                let gv = gout.data()[bc] * inv;
                for v in &mut gx[bc * hw..(bc + 1) * hw] {
                    *v = gv;
                }
            }
            vec![(x, Tensor::new(tx.shape().to_vec(), gx).unwrap())]
        }),
    )
}

/// Max pooling with square window `k` and stride `s` (no padding).
pub fn max_pool<T: Scalar>(g: &mut Graph<T>, x: Var, k: usize, s: usize) -> Result<Var> {
    let tx = g.rc(x);
    if tx.rank() != 4 {
        return Err(FerError::shape(format!(
            "max_pool wants [B,C,H,W], got {:?}",
            tx.shape()
        )));
    }
    let (b, c, h, w) = (tx.shape()[0], tx.shape()[1], tx.shape()[2], tx.shape()[3]);
    if h < k || w < k {
        return Err(FerError::shape(format!(
            "max_pool window {k} larger than input {h}x{w}"
        )));
    }
    let oh = (h - k) / s + 1;
    let ow = (w - k) / s + 1;
    let mut out = vec![T::zero(); b * c * oh * ow];
    let mut argmax = vec![0usize; out.len()];
    for bc in 0..b * c {
        let plane = &tx.data()[bc * h * w..(bc + 1) * h * w];
        for ohi in 0..oh {
            for owi in 0..ow {
                let mut best = T::neg_infinity();
                let mut besti = 0usize;
                for khi in 0..k {
                    for kwi in 0..k {
                        let idx = (ohi * s + khi) * w + owi * s + kwi;
                        if plane[idx] > best {
                            best = plane[idx];
                            besti = idx;
                        }
                    }
                }
                let o = bc * oh * ow + ohi * ow + owi;
                out[o] = best;
                argmax[o] = bc * h * w + besti;
            }
        }
    }
    let argmax = std::rc::Rc::new(argmax);
    g.push_op(
        Tensor::new(vec![b, c, oh, ow], out)?,
        &[x],
        Box::new(move |gout| {
            let mut gx = vec![T::zero(); tx.numel()];
            for (o, &src) in argmax.iter().enumerate() {
                gx[src] = gx[src] + gout.data()[o];
            }
            vec![(x, Tensor::new(tx.shape().to_vec(), gx).unwrap())]
        }),
    )
}

/// Nearest-neighbour spatial upsampling by an integer factor.
pub fn nearest_upsample<T: Scalar>(g: &mut Graph<T>, x: Var, factor: usize) -> Result<Var> {
    if factor == 0 {
        return Err(FerError::invalid("upsample factor must be >= 1"));
    }
    let tx = g.rc(x);
    if tx.rank() != 4 {
        return Err(FerError::shape(format!(
            "nearest_upsample wants [B,C,H,W], got {:?}",
            tx.shape()
        )));
    }
    let (b, c, h, w) = (tx.shape()[0], tx.shape()[1], tx.shape()[2], tx.shape()[3]);
    let (oh, ow) = (h * factor, w * factor);
    let mut out = vec![T::zero(); b * c * oh * ow];
    for bc in 0..b * c {
        let plane = &tx.data()[bc * h * w..(bc + 1) * h * w];
        let oplane = &mut out[bc * oh * ow..(bc + 1) * oh * ow];
        for ohi in 0..oh {
            let ih = ohi / factor;
            for owi in 0..ow {
                oplane[ohi * ow + owi] = plane[ih * w + owi / factor];
            }
        }
    }
    g.push_op(
        Tensor::new(vec![b, c, oh, ow], out)?,
        &[x],
        Box::new(move |gout| {
            let mut gx = vec![T::zero(); tx.numel()];
            for bc in 0..b * c {
                let gplane = &mut gx[bc * h * w..(bc + 1) * h * w];
                let goplane = &gout.data()[bc * oh * ow..(bc + 1) * oh * ow];
                for ohi in 0..oh {
                    let ih = ohi / factor;
                    for owi in 0..ow {
                        let t = ih * w + owi / factor;
                        gplane[t] = gplane[t] + goplane[ohi * ow + owi];
                    }
                }
            }
            vec![(x, Tensor::new(tx.shape().to_vec(), gx).unwrap())]
        }),
    )
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn gap_of_constant_is_constant() {
        let mut g = Graph::<f32>::new();
        let x = g.constant(Tensor::full(&[2, 3, 4, 5], 7.5));
        let y = global_avg_pool(&mut g, x).unwrap();
        assert_eq!(g.value(y).shape(), &[2, 3]);
        assert!(g.value(y).data().iter().all(|&v| (v - 7.5).abs() < 1e-6));
    }

    #[test]
    fn max_pool_picks_window_max() {
        let mut g = Graph::<f32>::new();
        let x = g.constant(
            Tensor::from_vec(&[1, 1, 2, 4], vec![1.0, 2.0, 3.0, 4.0, 8.0, 7.0, 6.0, 5.0]).unwrap(),
        );
        let y = max_pool(&mut g, x, 2, 2).unwrap();
        assert_eq!(g.value(y).data(), &[8.0, 6.0]);
    }

    #[test]
    fn upsample_then_shape() {
        let mut g = Graph::<f32>::new();
        let x = g.constant(Tensor::from_vec(&[1, 1, 1, 2], vec![1.0, 2.0]).unwrap());
        let y = nearest_upsample(&mut g, x, 2).unwrap();
        assert_eq!(g.value(y).shape(), &[1, 1, 2, 4]);
        assert_eq!(g.value(y).data(), &[1.0, 1.0, 2.0, 2.0, 1.0, 1.0, 2.0, 2.0]);
    }
}
