use crate::error::{FerError, Result};
use crate::graph::{Graph, Var};
use crate::tensor::{Scalar, Tensor};

pub fn reshape<T: Scalar>(g: &mut Graph<T>, x: Var, shape: &[usize]) -> Result<Var> {
    let tx = g.rc(x);
    let out = tx.reshaped(shape)?;
    let old_shape = tx.shape().to_vec();
    g.push_op(
        out,
        &[x],
        Box::new(move |gout| vec![(x, gout.reshaped(&old_shape).unwrap())]),
    )
}

fn permute_data<T: Scalar>(t: &Tensor<T>, axes: &[usize]) -> Tensor<T> {
    let in_shape = t.shape();
    let out_shape: Vec<usize> = axes.iter().map(|&a| in_shape[a]).collect();
    let in_strides = t.strides();
    let mut out = vec![T::zero(); t.numel()];
    let rank = axes.len();
    // strides of the output walk, expressed in input linear offsets
    let walk: Vec<usize> = axes.iter().map(|&a| in_strides[a]).collect();
    let mut idx = vec![0usize; rank];
    let mut src = 0usize;
    for o in out.iter_mut() {
        *o = t.data()[src];
        for d in (0..rank).rev() {
            idx[d] += 1;
            src += walk[d];
            if idx[d] < out_shape[d] {
                break;
            }
            src -= walk[d] * out_shape[d];
            idx[d] = 0;
        }
    }
    Tensor::new(out_shape, out).unwrap()
}

/// Axis permutation; `axes[i]` names the input axis placed at output axis `i`.
pub fn permute<T: Scalar>(g: &mut Graph<T>, x: Var, axes: &[usize]) -> Result<Var> {
    let tx = g.rc(x);
    let rank = tx.rank();
    let mut seen = vec![false; rank];
    if axes.len() != rank || axes.iter().any(|&a| a >= rank || std::mem::replace(&mut seen[a], true))
    {
        return Err(FerError::invalid(format!(
            "permute: {axes:?} is not a permutation of 0..{rank}"
        )));
    }
    let out = permute_data(&tx, axes);
    // inverse permutation for backward
    let mut inv = vec![0usize; rank];
    for (i, &a) in axes.iter().enumerate() {
        inv[a] = i;
    }
    g.push_op(
        out,
        &[x],
        Box::new(move |gout| vec![(x, permute_data(gout, &inv))]),
    )
}

/// Concatenation along the channel axis (axis 1).
pub fn concat_channels<T: Scalar>(g: &mut Graph<T>, parts: &[Var]) -> Result<Var> {
    if parts.is_empty() {
        return Err(FerError::invalid("concat of zero tensors"));
    }
    let tensors: Vec<_> = parts.iter().map(|&p| g.rc(p)).collect();
    let rank = tensors[0].rank();
    if rank < 2 {
        return Err(FerError::shape("concat_channels wants rank >= 2"));
    }
    let b = tensors[0].shape()[0];
    let tail: Vec<usize> = tensors[0].shape()[2..].to_vec();
    let mut c_total = 0usize;
    for t in &tensors {
        if t.shape()[0] != b || t.shape()[2..] != tail[..] {
            return Err(FerError::shape(format!(
                "concat_channels: inconsistent non-channel extents {:?} vs {:?}",
                tensors[0].shape(),
                t.shape()
            )));
        }
        c_total += t.shape()[1];
    }
    let inner: usize = tail.iter().product();
    let mut out_shape = vec![b, c_total];
    out_shape.extend_from_slice(&tail);
    let mut out = vec![T::zero(); b * c_total * inner];
    for bi in 0..b {
        let mut coff = 0usize;
        for t in &tensors {
            let tc = t.shape()[1];
            let src = &t.data()[bi * tc * inner..(bi + 1) * tc * inner];
            out[(bi * c_total + coff) * inner..(bi * c_total + coff + tc) * inner]
                .copy_from_slice(src);
            coff += tc;
        }
    }
    let parts_owned: Vec<Var> = parts.to_vec();
    let chans: Vec<usize> = tensors.iter().map(|t| t.shape()[1]).collect();
    let shapes: Vec<Vec<usize>> = tensors.iter().map(|t| t.shape().to_vec()).collect();
    g.push_op(
        Tensor::new(out_shape, out)?,
        parts,
        Box::new(move |gout| {
            let mut res = Vec::with_capacity(parts_owned.len());
            for (pi, &pv) in parts_owned.iter().enumerate() {
                let tc = chans[pi];
                let coff: usize = chans[..pi].iter().sum();
                let mut gp = vec![T::zero(); b * tc * inner];
                for bi in 0..b {
                    gp[bi * tc * inner..(bi + 1) * tc * inner].copy_from_slice(
                        &gout.data()
                            [(bi * c_total + coff) * inner..(bi * c_total + coff + tc) * inner],
                    );
                }
                res.push((pv, Tensor::new(shapes[pi].clone(), gp).unwrap()));
            }
            res
        }),
    )
}

/// Splits along the channel axis into equal parts.
pub fn split_channels<T: Scalar>(g: &mut Graph<T>, x: Var, parts: usize) -> Result<Vec<Var>> {
    let tx = g.rc(x);
    if tx.rank() < 2 {
        return Err(FerError::shape("split_channels wants rank >= 2"));
    }
    let c = tx.shape()[1];
    if parts == 0 || c % parts != 0 {
        return Err(FerError::shape(format!(
            "split_channels: {c} channels not divisible into {parts} parts"
        )));
    }
    let pc = c / parts;
    let b = tx.shape()[0];
    let inner: usize = tx.shape()[2..].iter().product();
    let mut out_shape = tx.shape().to_vec();
    out_shape[1] = pc;
    let mut vars = Vec::with_capacity(parts);
    for p in 0..parts {
        let mut data = vec![T::zero(); b * pc * inner];
        for bi in 0..b {
            data[bi * pc * inner..(bi + 1) * pc * inner].copy_from_slice(
                &tx.data()[(bi * c + p * pc) * inner..(bi * c + (p + 1) * pc) * inner],
            );
        }
        let txc = tx.clone();
        let v = g.push_op(
            Tensor::new(out_shape.clone(), data)?,
            &[x],
            Box::new(move |gout| {
                let mut gx = vec![T::zero(); txc.numel()];
                for bi in 0..b {
                    gx[(bi * c + p * pc) * inner..(bi * c + (p + 1) * pc) * inner]
                        .copy_from_slice(&gout.data()[bi * pc * inner..(bi + 1) * pc * inner]);
                }
                vec![(x, Tensor::new(txc.shape().to_vec(), gx).unwrap())]
            }),
        )?;
        vars.push(v);
    }
    Ok(vars)
}

/// Flattens `[B,C,H,W]` to `[B,C,L]` visiting spatial sites in `order`;
/// `out[b,c,k] = x[b,c,order[k]]`.
pub fn gather_spatial<T: Scalar>(g: &mut Graph<T>, x: Var, order: std::rc::Rc<Vec<usize>>) -> Result<Var> {
    let tx = g.rc(x);
    if tx.rank() != 4 {
        return Err(FerError::shape(format!(
            "gather_spatial wants [B,C,H,W], got {:?}",
            tx.shape()
        )));
    }
    let (b, c, h, w) = (tx.shape()[0], tx.shape()[1], tx.shape()[2], tx.shape()[3]);
    let l = h * w;
    if order.len() != l {
        return Err(FerError::shape(format!(
            "gather_spatial: order length {} != H*W = {l}",
            order.len()
        )));
    }
    let mut out = vec![T::zero(); b * c * l];
    for bc in 0..b * c {
        let plane = &tx.data()[bc * l..(bc + 1) * l];
        let oplane = &mut out[bc * l..(bc + 1) * l];
        for (k, &src) in order.iter().enumerate() {
            oplane[k] = plane[src];
        }
    }
    let ord = order.clone();
    g.push_op(
        Tensor::new(vec![b, c, l], out)?,
        &[x],
        Box::new(move |gout| {
            let mut gx = vec![T::zero(); b * c * l];
            for bc in 0..b * c {
                let gplane = &mut gx[bc * l..(bc + 1) * l];
                let goplane = &gout.data()[bc * l..(bc + 1) * l];
                for (k, &src) in ord.iter().enumerate() {
                    gplane[src] = gplane[src] + goplane[k];
                }
            }
            vec![(x, Tensor::new(tx.shape().to_vec(), gx).unwrap())]
        }),
    )
}

/// Inverse of [`gather_spatial`]: `out[b,c,order[k]] = x[b,c,k]`, reshaped to
/// `[B,C,H,W]`.
pub fn scatter_spatial<T: Scalar>(
    g: &mut Graph<T>,
    x: Var,
    order: std::rc::Rc<Vec<usize>>,
    h: usize,
    w: usize,
) -> Result<Var> {
    let tx = g.rc(x);
    if tx.rank() != 3 {
        return Err(FerError::shape(format!(
            "scatter_spatial wants [B,C,L], got {:?}",
            tx.shape()
        )));
    }
    let (b, c, l) = (tx.shape()[0], tx.shape()[1], tx.shape()[2]);
    if l != h * w || order.len() != l {
        return Err(FerError::shape(format!(
            "scatter_spatial: L={l} inconsistent with {h}x{w} / order {}",
            order.len()
        )));
    }
    let mut out = vec![T::zero(); b * c * l];
    for bc in 0..b * c {
        let plane = &tx.data()[bc * l..(bc + 1) * l];
        let oplane = &mut out[bc * l..(bc + 1) * l];
        for (k, &dst) in order.iter().enumerate() {
            oplane[dst] = plane[k];
        }
    }
    let ord = order.clone();
    g.push_op(
        Tensor::new(vec![b, c, h, w], out)?,
        &[x],
        Box::new(move |gout| {
            let mut gx = vec![T::zero(); b * c * l];
            for bc in 0..b * c {
                let gplane = &mut gx[bc * l..(bc + 1) * l];
                let goplane = &gout.data()[bc * l..(bc + 1) * l];
                for (k, &dst) in ord.iter().enumerate() {
                    gplane[k] = goplane[dst];
                }
            }
            vec![(x, Tensor::new(tx.shape().to_vec(), gx).unwrap())]
        }),
    )
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn concat_of_split_is_identity() {
        let data: Vec<f32> = (0..2 * 4 * 3 * 3).map(|i| i as f32).collect();
        let mut g = Graph::<f32>::new();
        let x = g.constant(Tensor::from_vec(&[2, 4, 3, 3], data.clone()).unwrap());
        let halves = split_channels(&mut g, x, 2).unwrap();
        let back = concat_channels(&mut g, &halves).unwrap();
        assert_eq!(g.value(back).data(), &data[..]);
    }

    proptest! {
        #[test]
        fn permute_inverse_is_identity(b in 1usize..3, c in 1usize..5, h in 1usize..5, w in 1usize..5, seed in 0u64..100) {
            use rand::{Rng, SeedableRng};
            let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
            let data: Vec<f32> = (0..b*c*h*w).map(|_| rng.gen_range(-1.0..1.0)).collect();
            let mut g = Graph::<f32>::new();
            let x = g.constant(Tensor::from_vec(&[b, c, h, w], data.clone()).unwrap());
            let p = permute(&mut g, x, &[2, 0, 3, 1]).unwrap();
            // inverse of [2,0,3,1] is [1,3,0,2]
            let back = permute(&mut g, p, &[1, 3, 0, 2]).unwrap();
            prop_assert_eq!(g.value(back).shape(), &[b, c, h, w]);
            prop_assert_eq!(g.value(back).data(), &data[..]);
        }

        #[test]
        fn concat_split_roundtrip_bit_exact(b in 1usize..3, half in 1usize..6, hw in 1usize..5, seed in 0u64..100) {
            use rand::{Rng, SeedableRng};
            let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
            let c = 2 * half;
            let data: Vec<f32> = (0..b*c*hw*hw).map(|_| rng.gen_range(-1.0..1.0)).collect();
            let mut g = Graph::<f32>::new();
            let x = g.constant(Tensor::from_vec(&[b, c, hw, hw], data.clone()).unwrap());
            let halves = split_channels(&mut g, x, 2).unwrap();
            let back = concat_channels(&mut g, &halves).unwrap();
            prop_assert_eq!(g.value(back).data(), &data[..]);
        }
    }

    #[test]
    fn gather_scatter_roundtrip() {
        let order = std::rc::Rc::new(vec![3usize, 0, 2, 1]);
        let mut g = Graph::<f32>::new();
        let x = g.constant(Tensor::from_vec(&[1, 1, 2, 2], vec![10.0, 11.0, 12.0, 13.0]).unwrap());
        let seq = gather_spatial(&mut g, x, order.clone()).unwrap();
        assert_eq!(g.value(seq).data(), &[13.0, 10.0, 12.0, 11.0]);
        let back = scatter_spatial(&mut g, seq, order, 2, 2).unwrap();
        assert_eq!(g.value(back).data(), &[10.0, 11.0, 12.0, 13.0]);
    }
}
