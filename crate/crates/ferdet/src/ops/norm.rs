use crate::error::{FerError, Result};
use crate::graph::{Graph, Var};
use crate::tensor::{lit, Scalar, Tensor};

/// Layer normalization over the channel axis (axis 1), with learned scale and
/// shift of length C. For `[B,C,H,W]` each spatial site is normalized across
/// its channel vector; for `[M,C]` each row is normalized.
pub fn layer_norm<T: Scalar>(
    g: &mut Graph<T>,
    x: Var,
    gamma: Var,
    beta: Var,
    eps: f64,
) -> Result<Var> {
    let tx = g.rc(x);
    let tg = g.rc(gamma);
    let tb = g.rc(beta);
    let (c, sites_per_batch, batches) = match tx.rank() {
        2 => (tx.shape()[1], 1usize, tx.shape()[0]),
        4 => (tx.shape()[1], tx.shape()[2] * tx.shape()[3], tx.shape()[0]),
        r => {
            return Err(FerError::shape(format!(
                "layer_norm wants rank 2 or 4, got rank {r}"
            )))
        }
    };
    if c == 0 {
        return Err(FerError::shape("layer_norm over zero-length channel axis"));
    }
    if tg.shape() != [c] || tb.shape() != [c] {
        return Err(FerError::shape(format!(
            "layer_norm: scale/shift must be [{c}], got {:?} / {:?}",
            tg.shape(),
            tb.shape()
        )));
    }
    let epsv = lit::<T>(eps);
    let cn = lit::<T>(c as f64);

    // per-site normalized values and inverse stddev, saved for backward
    let mut out = vec![T::zero(); tx.numel()];
    let nsites = batches * sites_per_batch;
    let mut xhat = vec![T::zero(); tx.numel()];
    let mut inv_std = vec![T::zero(); nsites];
    let xd = tx.data();
    for b in 0..batches {
        for s in 0..sites_per_batch {
            // channel stride is sites_per_batch within one batch slab
            let base = b * c * sites_per_batch + s;
            let mut mean = T::zero();
            for ci in 0..c {
                mean = mean + xd[base + ci * sites_per_batch];
            }
            mean = mean / cn;
            let mut var = T::zero();
            for ci in 0..c {
                let d = xd[base + ci * sites_per_batch] - mean;
                var = var + d * d;
            }
            var = var / cn;
            let istd = T::one() / (var + epsv).sqrt();
            inv_std[b * sites_per_batch + s] = istd;
            for ci in 0..c {
                let idx = base + ci * sites_per_batch;
                let xh = (xd[idx] - mean) * istd;
                xhat[idx] = xh;
                out[idx] = xh * tg.data()[ci] + tb.data()[ci];
            }
        }
    }
    let out = Tensor::new(tx.shape().to_vec(), out)?;
    let xhat = std::rc::Rc::new(xhat);
    let inv_std = std::rc::Rc::new(inv_std);
    g.push_op(
        out,
        &[x, gamma, beta],
        Box::new(move |gout| {
            let god = gout.data();
            let mut gx = vec![T::zero(); tx.numel()];
            let mut gg = vec![T::zero(); c];
            let mut gb = vec![T::zero(); c];
            for b in 0..batches {
                for s in 0..sites_per_batch {
                    let base = b * c * sites_per_batch + s;
                    let istd = inv_std[b * sites_per_batch + s];
                    let mut mean_dxh = T::zero();
                    let mut mean_dxh_xh = T::zero();
                    for ci in 0..c {
                        let idx = base + ci * sites_per_batch;
                        let dxh = god[idx] * tg.data()[ci];
                        mean_dxh = mean_dxh + dxh;
                        mean_dxh_xh = mean_dxh_xh + dxh * xhat[idx];
                        gg[ci] = gg[ci] + god[idx] * xhat[idx];
                        gb[ci] = gb[ci] + god[idx];
                    }
                    mean_dxh = mean_dxh / cn;
                    mean_dxh_xh = mean_dxh_xh / cn;
                    for ci in 0..c {
                        let idx = base + ci * sites_per_batch;
                        let dxh = god[idx] * tg.data()[ci];
                        gx[idx] = istd * (dxh - mean_dxh - xhat[idx] * mean_dxh_xh);
                    }
                }
            }
            vec![
                (x, Tensor::new(tx.shape().to_vec(), gx).unwrap()),
                (gamma, Tensor::new(vec![c], gg).unwrap()),
                (beta, Tensor::new(vec![c], gb).unwrap()),
            ]
        }),
    )
}
