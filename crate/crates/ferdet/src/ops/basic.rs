use rayon::prelude::*;

use crate::error::{FerError, Result};
use crate::graph::{Graph, Var};
use crate::tensor::{lit, Scalar, Tensor};

fn same_shape<T: Scalar>(g: &Graph<T>, a: Var, b: Var, op: &str) -> Result<()> {
    if g.value(a).shape() != g.value(b).shape() {
        return Err(FerError::shape(format!(
            "{op}: operand shapes differ: {:?} vs {:?}",
            g.value(a).shape(),
            g.value(b).shape()
        )));
    }
    Ok(())
}

pub fn add<T: Scalar>(g: &mut Graph<T>, a: Var, b: Var) -> Result<Var> {
    same_shape(g, a, b, "add")?;
    let (ta, tb) = (g.rc(a), g.rc(b));
    let data = ta
        .data()
        .iter()
        .zip(tb.data())
        .map(|(&x, &y)| x + y)
        .collect();
    let out = Tensor::new(ta.shape().to_vec(), data)?;
    g.push_op(
        out,
        &[a, b],
        Box::new(move |gout| vec![(a, gout.clone()), (b, gout.clone())]),
    )
}

pub fn sub<T: Scalar>(g: &mut Graph<T>, a: Var, b: Var) -> Result<Var> {
    same_shape(g, a, b, "sub")?;
    let (ta, tb) = (g.rc(a), g.rc(b));
    let data = ta
        .data()
        .iter()
        .zip(tb.data())
        .map(|(&x, &y)| x - y)
        .collect();
    let out = Tensor::new(ta.shape().to_vec(), data)?;
    g.push_op(
        out,
        &[a, b],
        Box::new(move |gout| {
            let neg = gout.map(|v| -v);
            vec![(a, gout.clone()), (b, neg)]
        }),
    )
}

pub fn mul<T: Scalar>(g: &mut Graph<T>, a: Var, b: Var) -> Result<Var> {
    same_shape(g, a, b, "mul")?;
    let (ta, tb) = (g.rc(a), g.rc(b));
    let data = ta
        .data()
        .iter()
        .zip(tb.data())
        .map(|(&x, &y)| x * y)
        .collect();
    let out = Tensor::new(ta.shape().to_vec(), data)?;
    g.push_op(
        out,
        &[a, b],
        Box::new(move |gout| {
            let ga: Vec<T> = gout
                .data()
                .iter()
                .zip(tb.data())
                .map(|(&go, &y)| go * y)
                .collect();
            let gb: Vec<T> = gout
                .data()
                .iter()
                .zip(ta.data())
                .map(|(&go, &x)| go * x)
                .collect();
            vec![
                (a, Tensor::new(ta.shape().to_vec(), ga).unwrap()),
                (b, Tensor::new(tb.shape().to_vec(), gb).unwrap()),
            ]
        }),
    )
}

/// Elementwise product of `x: [B,C,H,W]` with per-channel gains `s: [B,C,1,1]`.
pub fn mul_bcast<T: Scalar>(g: &mut Graph<T>, x: Var, s: Var) -> Result<Var> {
    let (tx, ts) = (g.rc(x), g.rc(s));
    let xs = tx.shape();
    let ss = ts.shape();
    if xs.len() != 4 || ss.len() != 4 || ss[0] != xs[0] || ss[1] != xs[1] || ss[2] != 1 || ss[3] != 1
    {
        return Err(FerError::shape(format!(
            "mul_bcast wants [B,C,H,W] x [B,C,1,1], got {xs:?} x {ss:?}"
        )));
    }
    let (b, c, h, w) = (xs[0], xs[1], xs[2], xs[3]);
    let hw = h * w;
    let mut data = vec![T::zero(); tx.numel()];
    for bi in 0..b {
        for ci in 0..c {
            let gain = ts.data()[bi * c + ci];
            let base = (bi * c + ci) * hw;
            for k in 0..hw {
                data[base + k] = tx.data()[base + k] * gain;
            }
        }
    }
    let out = Tensor::new(xs.to_vec(), data)?;
    g.push_op(
        out,
        &[x, s],
        Box::new(move |gout| {
            let mut gx = vec![T::zero(); tx.numel()];
            let mut gs = vec![T::zero(); ts.numel()];
            for bi in 0..b {
                for ci in 0..c {
                    let gain = ts.data()[bi * c + ci];
                    let base = (bi * c + ci) * hw;
                    let mut acc = T::zero();
                    for k in 0..hw {
                        gx[base + k] = gout.data()[base + k] * gain;
                        acc = acc + gout.data()[base + k] * tx.data()[base + k];
                    }
                    gs[bi * c + ci] = acc;
                }
            }
            vec![
                (x, Tensor::new(tx.shape().to_vec(), gx).unwrap()),
                (s, Tensor::new(ts.shape().to_vec(), gs).unwrap()),
            ]
        }),
    )
}

/// Multiplies by a compile-time constant.
pub fn scale<T: Scalar>(g: &mut Graph<T>, x: Var, c: f64) -> Result<Var> {
    let tx = g.rc(x);
    let k = lit::<T>(c);
    let out = tx.map(|v| v * k);
    g.push_op(out, &[x], Box::new(move |gout| vec![(x, gout.map(|v| v * k))]))
}

fn unary<T: Scalar>(
    g: &mut Graph<T>,
    x: Var,
    f: impl Fn(T) -> T,
    // derivative given (input, output)
    df: impl Fn(T, T) -> T + 'static,
) -> Result<Var> {
    let tx = g.rc(x);
    let out = tx.map(f);
    let ty = std::rc::Rc::new(out.clone());
    g.push_op(
        out,
        &[x],
        Box::new(move |gout| {
            let data: Vec<T> = gout
                .data()
                .iter()
                .zip(tx.data().iter().zip(ty.data()))
                .map(|(&go, (&xi, &yi))| go * df(xi, yi))
                .collect();
            vec![(x, Tensor::new(tx.shape().to_vec(), data).unwrap())]
        }),
    )
}

#[inline]
pub fn sigmoid_scalar<T: Scalar>(z: T) -> T {
    if z >= T::zero() {
        T::one() / (T::one() + (-z).exp())
    } else {
        let e = z.exp();
        e / (T::one() + e)
    }
}

#[inline]
pub fn softplus_scalar<T: Scalar>(z: T) -> T {
    // ln(1 + e^z) without overflow
    if z > lit::<T>(20.0) {
        z
    } else if z < lit::<T>(-20.0) {
        z.exp()
    } else {
        (T::one() + z.exp()).ln()
    }
}

pub fn relu<T: Scalar>(g: &mut Graph<T>, x: Var) -> Result<Var> {
    unary(
        g,
        x,
        |v| if v > T::zero() { v } else { T::zero() },
        |xi, _| if xi > T::zero() { T::one() } else { T::zero() },
    )
}

pub fn sigmoid<T: Scalar>(g: &mut Graph<T>, x: Var) -> Result<Var> {
    unary(g, x, sigmoid_scalar, |_, yi| yi * (T::one() - yi))
}

pub fn silu<T: Scalar>(g: &mut Graph<T>, x: Var) -> Result<Var> {
    unary(
        g,
        x,
        |v| v * sigmoid_scalar(v),
        |xi, _| {
            let s = sigmoid_scalar(xi);
            s + xi * s * (T::one() - s)
        },
    )
}

pub fn exp<T: Scalar>(g: &mut Graph<T>, x: Var) -> Result<Var> {
    unary(g, x, |v| v.exp(), |_, yi| yi)
}

pub fn softplus<T: Scalar>(g: &mut Graph<T>, x: Var) -> Result<Var> {
    unary(g, x, softplus_scalar, |xi, _| sigmoid_scalar(xi))
}

/// Softmax over the last axis.
pub fn softmax<T: Scalar>(g: &mut Graph<T>, x: Var) -> Result<Var> {
    let tx = g.rc(x);
    let n = *tx.shape().last().ok_or_else(|| FerError::shape("softmax on rank-0"))?;
    let rows = tx.numel() / n;
    let mut data = vec![T::zero(); tx.numel()];
    for r in 0..rows {
        let row = &tx.data()[r * n..(r + 1) * n];
        let m = row.iter().cloned().fold(T::neg_infinity(), T::max);
        let mut denom = T::zero();
        for (o, &v) in data[r * n..(r + 1) * n].iter_mut().zip(row) {
            *o = (v - m).exp();
            denom = denom + *o;
        }
        for o in &mut data[r * n..(r + 1) * n] {
            *o = *o / denom;
        }
    }
    let out = Tensor::new(tx.shape().to_vec(), data)?;
    let ty = std::rc::Rc::new(out.clone());
    g.push_op(
        out,
        &[x],
        Box::new(move |gout| {
            let mut gx = vec![T::zero(); ty.numel()];
            for r in 0..rows {
                let y = &ty.data()[r * n..(r + 1) * n];
                let go = &gout.data()[r * n..(r + 1) * n];
                let dot: T = y.iter().zip(go).map(|(&yi, &gi)| yi * gi).sum();
                for i in 0..n {
                    gx[r * n + i] = y[i] * (go[i] - dot);
                }
            }
            vec![(x, Tensor::new(ty.shape().to_vec(), gx).unwrap())]
        }),
    )
}

pub fn sum_all<T: Scalar>(g: &mut Graph<T>, x: Var) -> Result<Var> {
    let tx = g.rc(x);
    let s: T = tx.data().iter().cloned().sum();
    g.push_op(
        Tensor::scalar(s),
        &[x],
        Box::new(move |gout| {
            let go = gout.data()[0];
            vec![(x, Tensor::full(tx.shape(), go))]
        }),
    )
}

pub fn mean_all<T: Scalar>(g: &mut Graph<T>, x: Var) -> Result<Var> {
    let n = g.value(x).numel() as f64;
    let s = sum_all(g, x)?;
    scale(g, s, 1.0 / n)
}

/// `y = x W^T + b` with `x: [M,K]`, `w: [N,K]`, `b: [N]`.
pub fn linear<T: Scalar>(g: &mut Graph<T>, x: Var, w: Var, b: Option<Var>) -> Result<Var> {
    let (tx, tw) = (g.rc(x), g.rc(w));
    if tx.rank() != 2 || tw.rank() != 2 {
        return Err(FerError::shape(format!(
            "linear wants rank-2 operands, got {:?} and {:?}",
            tx.shape(),
            tw.shape()
        )));
    }
    let (m, k) = (tx.shape()[0], tx.shape()[1]);
    let (n, k2) = (tw.shape()[0], tw.shape()[1]);
    if k != k2 {
        return Err(FerError::shape(format!(
            "linear: input features {k} != weight features {k2}"
        )));
    }
    let tb = b.map(|bv| g.rc(bv));
    if let Some(tb) = &tb {
        if tb.shape() != [n] {
            return Err(FerError::shape(format!(
                "linear: bias shape {:?} != [{n}]",
                tb.shape()
            )));
        }
    }
    let mut data = vec![T::zero(); m * n];
    super::cost::add((m * n * k) as u64);
    {
        let xd = tx.data();
        let wd = tw.data();
        let bd = tb.as_ref().map(|t| t.data());
        data.par_chunks_mut(n).enumerate().for_each(|(r, orow)| {
            let xr = &xd[r * k..(r + 1) * k];
            for (j, o) in orow.iter_mut().enumerate() {
                let wr = &wd[j * k..(j + 1) * k];
                let mut acc = T::zero();
                for i in 0..k {
                    acc = acc + xr[i] * wr[i];
                }
                if let Some(bd) = bd {
                    acc = acc + bd[j];
                }
                *o = acc;
            }
        });
    }
    let out = Tensor::new(vec![m, n], data)?;
    let mut parents = vec![x, w];
    if let Some(bv) = b {
        parents.push(bv);
    }
    g.push_op(
        out,
        &parents,
        Box::new(move |gout| {
            // gx = gout W ; gw = gout^T x ; gb = column sums of gout
            let god = gout.data();
            let wd = tw.data();
            let xd = tx.data();
            let mut gx = vec![T::zero(); m * k];
            gx.par_chunks_mut(k).enumerate().for_each(|(r, gxr)| {
                let gor = &god[r * n..(r + 1) * n];
                for j in 0..n {
                    let go = gor[j];
                    let wr = &wd[j * k..(j + 1) * k];
                    for i in 0..k {
                        gxr[i] = gxr[i] + go * wr[i];
                    }
                }
            });
            let mut gw = vec![T::zero(); n * k];
            gw.par_chunks_mut(k).enumerate().for_each(|(j, gwr)| {
                for r in 0..m {
                    let go = god[r * n + j];
                    let xr = &xd[r * k..(r + 1) * k];
                    for i in 0..k {
                        gwr[i] = gwr[i] + go * xr[i];
                    }
                }
            });
            let mut res = vec![
                (x, Tensor::new(vec![m, k], gx).unwrap()),
                (w, Tensor::new(vec![n, k], gw).unwrap()),
            ];
            if let Some(bv) = b {
                let mut gb = vec![T::zero(); n];
                for r in 0..m {
                    for (j, gbj) in gb.iter_mut().enumerate() {
                        *gbj = *gbj + gout.data()[r * n + j];
                    }
                }
                res.push((bv, Tensor::new(vec![n], gb).unwrap()));
            }
            res
        }),
    )
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn silu_and_sigmoid_centered_points() {
        let mut g = Graph::<f64>::new();
        let x = g.constant(Tensor::scalar(0.0));
        let s = silu(&mut g, x).unwrap();
        assert_eq!(g.value(s).data()[0], 0.0);
        let sg = sigmoid(&mut g, x).unwrap();
        assert_eq!(g.value(sg).data()[0], 0.5);
    }

    #[test]
    fn restricted_broadcast_rejects_bad_shapes() {
        let mut g = Graph::<f32>::new();
        let x = g.constant(Tensor::zeros(&[1, 2, 3, 3]));
        let s = g.constant(Tensor::zeros(&[1, 3, 1, 1]));
        assert!(mul_bcast(&mut g, x, s).is_err());
    }

    #[test]
    fn linear_matches_hand_matmul() {
        let mut g = Graph::<f64>::new();
        let x = g.constant(Tensor::from_vec(&[1, 2], vec![1.0, 2.0]).unwrap());
        let w = g.constant(Tensor::from_vec(&[2, 2], vec![1.0, 0.0, 3.0, 4.0]).unwrap());
        let b = g.constant(Tensor::from_vec(&[2], vec![10.0, 20.0]).unwrap());
        let y = linear(&mut g, x, w, Some(b)).unwrap();
        assert_eq!(g.value(y).data(), &[11.0, 31.0]);
    }

    #[test]
    fn softmax_rows_sum_to_one() {
        let mut g = Graph::<f64>::new();
        let x = g.constant(Tensor::from_vec(&[2, 3], vec![1.0, 2.0, 3.0, -1.0, 0.0, 1.0]).unwrap());
        let y = softmax(&mut g, x).unwrap();
        let d = g.value(y).data();
        assert!((d[0] + d[1] + d[2] - 1.0).abs() < 1e-12);
        assert!((d[3] + d[4] + d[5] - 1.0).abs() < 1e-12);
    }
}
