//! Selective state-space core.
//!
//! A per-channel diagonal continuous system `h' = a h + b x` is discretized
//! with a zero-order hold (`A_bar = e^{dt a}`, `B_bar = ((e^{dt a}-1)/a) b`)
//! and scanned along the sequence: `h_k = A_bar h_{k-1} + B_bar x_k`,
//! `y_k = c_k . h_k + d_skip x_k`. Selectivity comes from `dt`, `b_k`, `c_k`
//! being functions of the input at each timestep.
//!
//! Two kernels produce identical results: a sequential reference and a
//! chunked kernel that combines per-chunk affine summaries with the
//! associative rule `(a2,b2) o (a1,b1) = (a2*a1, a2*b1 + b2)`.

use rand::Rng;
use rayon::prelude::*;

use crate::error::{FerError, Result};
use crate::graph::{Graph, Var};
use crate::ops;
use crate::params::{kaiming_uniform, ParamId, ParamStore, Session};
use crate::tensor::{lit, Scalar, Tensor};

/// Series cutoff for the `(e^z - 1)/a` singularity at `a = 0`.
const SERIES_CUTOFF: f64 = 1e-6;

/// Zero-order-hold discretization of one diagonal entry.
/// Returns `(a_bar, coef)` with `b_bar = coef * b`.
#[inline]
pub fn zoh<T: Scalar>(a: T, dt: T) -> (T, T) {
    let z = dt * a;
    let a_bar = z.exp();
    let coef = if z.abs() < lit::<T>(SERIES_CUTOFF) {
        // dt * (1 + z/2 + z^2/6), exact enough below the cutoff
        dt * (T::one() + z * lit::<T>(0.5) + z * z * lit::<T>(1.0 / 6.0))
    } else {
        (a_bar - T::one()) / a
    };
    (a_bar, coef)
}

/// Discretizes `(a, b)` at step `dt`, rejecting non-positive `dt`.
pub fn discretize<T: Scalar>(a: T, b: T, dt: T) -> Result<(T, T)> {
    if dt <= T::zero() {
        return Err(FerError::invalid(format!(
            "discretize: dt must be positive, got {:?}",
            dt.to_f64()
        )));
    }
    let (a_bar, coef) = zoh(a, dt);
    Ok((a_bar, coef * b))
}

/// One scan step as an affine map `h -> a h + b`; composition is associative.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ScanElem<T> {
    pub a: T,
    pub b: T,
}

impl<T: Scalar> ScanElem<T> {
    pub fn identity() -> Self {
        ScanElem {
            a: T::one(),
            b: T::zero(),
        }
    }

    /// `later o earlier`: applies `earlier` first.
    pub fn compose(later: &Self, earlier: &Self) -> Self {
        ScanElem {
            a: later.a * earlier.a,
            b: later.a * earlier.b + later.b,
        }
    }

    pub fn apply(&self, h: T) -> T {
        self.a * h + self.b
    }
}

/// Dimensions of one scan problem.
#[derive(Clone, Copy, Debug)]
pub struct ScanDims {
    pub batch: usize,
    pub channels: usize,
    pub states: usize,
    pub len: usize,
}

/// Plain-slice scan inputs. `x`/`dt` are `[B,D,L]`, `b_seq`/`c_seq` are
/// `[B,N,L]` (shared over channels), `a` is the continuous `[D,N]` diagonal,
/// `d_skip` is `[D]`.
pub struct ScanInputs<'a, T> {
    pub dims: ScanDims,
    pub x: &'a [T],
    pub dt: &'a [T],
    pub b_seq: &'a [T],
    pub c_seq: &'a [T],
    pub a: &'a [T],
    pub d_skip: &'a [T],
}

impl<T: Scalar> ScanInputs<'_, T> {
    fn validate(&self) -> Result<()> {
        let ScanDims {
            batch,
            channels,
            states,
            len,
        } = self.dims;
        if len == 0 {
            return Err(FerError::invalid("scan over a length-0 sequence"));
        }
        let want = |n: usize, got: usize, what: &str| -> Result<()> {
            if n != got {
                return Err(FerError::shape(format!(
                    "scan: {what} has {got} elements, expected {n}"
                )));
            }
            Ok(())
        };
        want(batch * channels * len, self.x.len(), "x")?;
        want(batch * channels * len, self.dt.len(), "dt")?;
        want(batch * states * len, self.b_seq.len(), "b_seq")?;
        want(batch * states * len, self.c_seq.len(), "c_seq")?;
        want(channels * states, self.a.len(), "a")?;
        want(channels, self.d_skip.len(), "d_skip")?;
        Ok(())
    }
}

fn scan_one_lane<T: Scalar>(
    inp: &ScanInputs<T>,
    bi: usize,
    di: usize,
    h0: &[T],
    range: std::ops::Range<usize>,
    mut emit: impl FnMut(usize, &[T], T),
) {
    let ScanDims {
        channels,
        states,
        len,
        ..
    } = inp.dims;
    let xrow = &inp.x[(bi * channels + di) * len..(bi * channels + di + 1) * len];
    let dtrow = &inp.dt[(bi * channels + di) * len..(bi * channels + di + 1) * len];
    let arow = &inp.a[di * states..(di + 1) * states];
    let dsk = inp.d_skip[di];
    let mut h = h0.to_vec();
    for k in range {
        let xv = xrow[k];
        let dt = dtrow[k];
        let mut y = T::zero();
        for n in 0..states {
            let (a_bar, coef) = zoh(arow[n], dt);
            let bk = inp.b_seq[(bi * states + n) * len + k];
            h[n] = a_bar * h[n] + coef * bk * xv;
            let ck = inp.c_seq[(bi * states + n) * len + k];
            y = y + ck * h[n];
        }
        emit(k, &h, y + dsk * xv);
    }
}

/// Sequential reference kernel. Bitwise deterministic.
pub fn scan_sequential<T: Scalar>(inp: &ScanInputs<T>) -> Result<Tensor<T>> {
    inp.validate()?;
    let ScanDims {
        batch,
        channels,
        states,
        len,
    } = inp.dims;
    let mut y = vec![T::zero(); batch * channels * len];
    // 4 multiply-adds per state-step: state decay, input injection, readout
    crate::ops::cost::add((batch * channels * len * states * 4) as u64);
    let h0 = vec![T::zero(); states];
    y.par_chunks_mut(len).enumerate().for_each(|(bd, yrow)| {
        let (bi, di) = (bd / channels, bd % channels);
        scan_one_lane(inp, bi, di, &h0, 0..len, |k, _, yv| yrow[k] = yv);
    });
    Tensor::new(vec![batch, channels, len], y)
}

/// Chunked kernel: per-chunk summaries combined with the associative rule,
/// then a second pass emits outputs from the correct chunk-entry states.
/// `chunk >= L` falls through to the sequential code path.
pub fn scan_parallel<T: Scalar>(inp: &ScanInputs<T>, chunk: usize) -> Result<Tensor<T>> {
    if chunk == 0 {
        return Err(FerError::invalid("scan chunk must be >= 1"));
    }
    inp.validate()?;
    let ScanDims {
        batch,
        channels,
        states,
        len,
    } = inp.dims;
    if chunk >= len {
        return scan_sequential(inp);
    }
    let nchunks = len.div_ceil(chunk);
    crate::ops::cost::add((batch * channels * len * states * 4) as u64);

    // phase 1: per-chunk affine summaries (a_prod, h_from_zero) per state
    let summaries: Vec<Vec<ScanElem<T>>> = (0..batch * channels * nchunks)
        .into_par_iter()
        .map(|idx| {
            let bd = idx / nchunks;
            let ci = idx % nchunks;
            let (bi, di) = (bd / channels, bd % channels);
            let start = ci * chunk;
            let end = (start + chunk).min(len);
            let xrow = &inp.x[bd * len..(bd + 1) * len];
            let dtrow = &inp.dt[bd * len..(bd + 1) * len];
            let arow = &inp.a[di * states..(di + 1) * states];
            let mut elems = vec![ScanElem::identity(); states];
            for k in start..end {
                let xv = xrow[k];
                let dt = dtrow[k];
                for (n, e) in elems.iter_mut().enumerate() {
                    let (a_bar, coef) = zoh(arow[n], dt);
                    let bk = inp.b_seq[(bi * states + n) * len + k];
                    *e = ScanElem::compose(
                        &ScanElem {
                            a: a_bar,
                            b: coef * bk * xv,
                        },
                        e,
                    );
                }
            }
            elems
        })
        .collect();

    // phase 2: chunk-entry states via a fixed-order sequential combine
    let mut entry = vec![T::zero(); batch * channels * nchunks * states];
    for bd in 0..batch * channels {
        for ci in 0..nchunks - 1 {
            let summ = &summaries[bd * nchunks + ci];
            for n in 0..states {
                let prev = entry[(bd * nchunks + ci) * states + n];
                entry[(bd * nchunks + ci + 1) * states + n] = summ[n].apply(prev);
            }
        }
    }

    // phase 3: emit outputs from the correct entry states
    let mut y = vec![T::zero(); batch * channels * len];
    let lanes: Vec<(usize, &mut [T])> = {
        // split y into (bd, chunk) slices for parallel emission
        let mut lanes = Vec::with_capacity(batch * channels * nchunks);
        let mut rest: &mut [T] = &mut y;
        let mut bd = 0usize;
        while bd < batch * channels {
            for ci in 0..nchunks {
                let start = ci * chunk;
                let end = (start + chunk).min(len);
                let (head, tail) = rest.split_at_mut(end - start);
                lanes.push((bd * nchunks + ci, head));
                rest = tail;
            }
            bd += 1;
        }
        lanes
    };
    lanes.into_par_iter().for_each(|(idx, yslice)| {
        let bd = idx / nchunks;
        let ci = idx % nchunks;
        let (bi, di) = (bd / channels, bd % channels);
        let start = ci * chunk;
        let end = (start + chunk).min(len);
        let h0 = &entry[(bd * nchunks + ci) * states..(bd * nchunks + ci + 1) * states];
        scan_one_lane(inp, bi, di, h0, start..end, |k, _, yv| {
            yslice[k - start] = yv;
        });
    });
    Tensor::new(vec![batch, channels, len], y)
}

/// Per-batch gradient buffers for the reverse recurrence.
struct LaneGrads<T> {
    gx: Vec<T>,
    gdt: Vec<T>,
    gb: Vec<T>,
    gc: Vec<T>,
    ga: Vec<T>,
    gdsk: Vec<T>,
}

/// Reverse-mode scan: recomputes hidden states per lane, then runs the
/// reverse recurrence `g_{k-1} += A_bar_k * g_k`. Above
/// `RECOMPUTE_SEGMENT` timesteps the recomputation is segmented so peak
/// memory stays bounded.
const RECOMPUTE_SEGMENT: usize = 4096;

pub fn scan_backward<T: Scalar>(inp: &ScanInputs<T>, gout: &[T]) -> LaneGradsPublic<T> {
    let ScanDims {
        batch,
        channels,
        states,
        len,
    } = inp.dims;
    let per_batch: Vec<LaneGrads<T>> = (0..batch)
        .into_par_iter()
        .map(|bi| {
            let mut g = LaneGrads {
                gx: vec![T::zero(); channels * len],
                gdt: vec![T::zero(); channels * len],
                gb: vec![T::zero(); states * len],
                gc: vec![T::zero(); states * len],
                ga: vec![T::zero(); channels * states],
                gdsk: vec![T::zero(); channels],
            };
            let seg = len.min(RECOMPUTE_SEGMENT);
            let nsegs = len.div_ceil(seg);
            let mut hbuf = vec![T::zero(); seg * states];
            let mut seg_entry = vec![T::zero(); nsegs * states];
            for di in 0..channels {
                // checkpoint the state at each segment boundary
                if nsegs > 1 {
                    let mut h = vec![T::zero(); states];
                    for si in 0..nsegs - 1 {
                        let h_in = h.clone();
                        scan_one_lane(inp, bi, di, &h_in, si * seg..(si + 1) * seg, |_, hk, _| {
                            h.copy_from_slice(hk)
                        });
                        seg_entry[(si + 1) * states..(si + 2) * states].copy_from_slice(&h);
                    }
                }
                let xrow = &inp.x[(bi * channels + di) * len..];
                let dtrow = &inp.dt[(bi * channels + di) * len..];
                let arow = &inp.a[di * states..(di + 1) * states];
                let dsk = inp.d_skip[di];
                let mut gh = vec![T::zero(); states];
                for si in (0..nsegs).rev() {
                    let start = si * seg;
                    let end = (start + seg).min(len);
                    let h0 = &seg_entry[si * states..(si + 1) * states];
                    scan_one_lane(inp, bi, di, h0, start..end, |k, hk, _| {
                        hbuf[(k - start) * states..(k - start + 1) * states].copy_from_slice(hk);
                    });
                    for k in (start..end).rev() {
                        let gy = gout[(bi * channels + di) * len + k];
                        let xv = xrow[k];
                        let dt = dtrow[k];
                        g.gdsk[di] = g.gdsk[di] + gy * xv;
                        let mut gx_k = gy * dsk;
                        let mut gdt_k = T::zero();
                        for n in 0..states {
                            let hkn = hbuf[(k - start) * states + n];
                            let ck = inp.c_seq[(bi * states + n) * len + k];
                            g.gc[n * len + k] = g.gc[n * len + k] + gy * hkn;
                            let ghn = gh[n] + ck * gy;
                            let a = arow[n];
                            let z = dt * a;
                            let (a_bar, coef) = zoh(a, dt);
                            let h_prev = if k > start {
                                hbuf[(k - start - 1) * states + n]
                            } else {
                                h0[n]
                            };
                            let bk = inp.b_seq[(bi * states + n) * len + k];
                            let g_a_bar = ghn * h_prev;
                            let g_coef = ghn * bk * xv;
                            gx_k = gx_k + ghn * coef * bk;
                            g.gb[n * len + k] = g.gb[n * len + k] + ghn * coef * xv;
                            let (dcoef_ddt, dcoef_da) = if z.abs() < lit::<T>(SERIES_CUTOFF) {
                                (
                                    T::one() + z + z * z * lit::<T>(0.5),
                                    dt * dt * (lit::<T>(0.5) + z * lit::<T>(1.0 / 3.0)),
                                )
                            } else {
                                (a_bar, (dt * a_bar * a - (a_bar - T::one())) / (a * a))
                            };
                            gdt_k = gdt_k + g_a_bar * a * a_bar + g_coef * dcoef_ddt;
                            g.ga[di * states + n] =
                                g.ga[di * states + n] + g_a_bar * dt * a_bar + g_coef * dcoef_da;
                            gh[n] = ghn * a_bar;
                        }
                        g.gx[di * len + k] = gx_k;
                        g.gdt[di * len + k] = gdt_k;
                    }
                }
            }
            g
        })
        .collect();

    // stitch per-batch buffers; ga / gdsk sum across batches
    let mut out = LaneGradsPublic {
        gx: vec![T::zero(); batch * channels * len],
        gdt: vec![T::zero(); batch * channels * len],
        gb: vec![T::zero(); batch * states * len],
        gc: vec![T::zero(); batch * states * len],
        ga: vec![T::zero(); channels * states],
        gdsk: vec![T::zero(); channels],
    };
    for (bi, g) in per_batch.into_iter().enumerate() {
        out.gx[bi * channels * len..(bi + 1) * channels * len].copy_from_slice(&g.gx);
        out.gdt[bi * channels * len..(bi + 1) * channels * len].copy_from_slice(&g.gdt);
        out.gb[bi * states * len..(bi + 1) * states * len].copy_from_slice(&g.gb);
        out.gc[bi * states * len..(bi + 1) * states * len].copy_from_slice(&g.gc);
        for (acc, v) in out.ga.iter_mut().zip(&g.ga) {
            *acc = *acc + *v;
        }
        for (acc, v) in out.gdsk.iter_mut().zip(&g.gdsk) {
            *acc = *acc + *v;
        }
    }
    out
}

pub struct LaneGradsPublic<T> {
    pub gx: Vec<T>,
    pub gdt: Vec<T>,
    pub gb: Vec<T>,
    pub gc: Vec<T>,
    pub ga: Vec<T>,
    pub gdsk: Vec<T>,
}

/// Graph operator over the scan. `a_log` parameterizes `a = -exp(a_log)` so
/// the continuous diagonal stays negative; `dt` must already be positive
/// (softplus upstream). `chunk = None` selects the sequential kernel.
#[allow(clippy::too_many_arguments)]
pub fn selective_scan<T: Scalar>(
    g: &mut Graph<T>,
    x: Var,
    dt: Var,
    b_seq: Var,
    c_seq: Var,
    a_log: Var,
    d_skip: Var,
    chunk: Option<usize>,
) -> Result<Var> {
    let (tx, tdt, tb, tc, tal, tdsk) = (
        g.rc(x),
        g.rc(dt),
        g.rc(b_seq),
        g.rc(c_seq),
        g.rc(a_log),
        g.rc(d_skip),
    );
    if tx.rank() != 3 {
        return Err(FerError::shape(format!(
            "selective_scan wants x as [B,D,L], got {:?}",
            tx.shape()
        )));
    }
    let dims = ScanDims {
        batch: tx.shape()[0],
        channels: tx.shape()[1],
        states: tal.shape()[1],
        len: tx.shape()[2],
    };
    let a: Vec<T> = tal.data().iter().map(|&v| -v.exp()).collect();
    let dsk: Vec<T> = tdsk.data().to_vec();
    let inp = ScanInputs {
        dims,
        x: tx.data(),
        dt: tdt.data(),
        b_seq: tb.data(),
        c_seq: tc.data(),
        a: &a,
        d_skip: &dsk,
    };
    let y = match chunk {
        Some(c) => scan_parallel(&inp, c)?,
        None => scan_sequential(&inp)?,
    };
    let a = std::rc::Rc::new(a);
    g.push_op(
        y,
        &[x, dt, b_seq, c_seq, a_log, d_skip],
        Box::new(move |gout| {
            let inp = ScanInputs {
                dims,
                x: tx.data(),
                dt: tdt.data(),
                b_seq: tb.data(),
                c_seq: tc.data(),
                a: &a,
                d_skip: tdsk.data(),
            };
            let grads = scan_backward(&inp, gout.data());
            // chain a = -exp(a_log): d/d a_log = a
            let ga_log: Vec<T> = grads.ga.iter().zip(a.iter()).map(|(&g, &av)| g * av).collect();
            vec![
                (x, Tensor::new(tx.shape().to_vec(), grads.gx).unwrap()),
                (dt, Tensor::new(tdt.shape().to_vec(), grads.gdt).unwrap()),
                (b_seq, Tensor::new(tb.shape().to_vec(), grads.gb).unwrap()),
                (c_seq, Tensor::new(tc.shape().to_vec(), grads.gc).unwrap()),
                (a_log, Tensor::new(tal.shape().to_vec(), ga_log).unwrap()),
                (d_skip, Tensor::new(tdsk.shape().to_vec(), grads.gdsk).unwrap()),
            ]
        }),
    )
}

/// The learnable selective-SSM layer: input-dependent `dt`, `b`, `c`
/// projections around the scan kernel.
#[derive(Clone)]
pub struct SsmLayer {
    pub d_model: usize,
    pub n_state: usize,
    a_log: ParamId,
    d_skip: ParamId,
    b_proj: ParamId,
    c_proj: ParamId,
    dt_proj: ParamId,
    dt_bias: ParamId,
}

impl SsmLayer {
    pub fn new<T: Scalar>(
        store: &mut ParamStore<T>,
        rng: &mut impl Rng,
        prefix: &str,
        d_model: usize,
        n_state: usize,
    ) -> Self {
        // S4D-real style: a = -exp(a_log) with a_log = ln(n), n = 1..N
        let a_log_vals: Vec<T> = (0..d_model)
            .flat_map(|_| (1..=n_state).map(|n| lit((n as f64).ln())))
            .collect();
        let a_log = store.add(
            format!("{prefix}.a_log"),
            Tensor::new(vec![d_model, n_state], a_log_vals).unwrap(),
        );
        let d_skip = store.add(format!("{prefix}.d_skip"), Tensor::full(&[d_model], T::one()));
        let b_proj = store.add(
            format!("{prefix}.b_proj"),
            kaiming_uniform(rng, &[n_state, d_model], d_model),
        );
        let c_proj = store.add(
            format!("{prefix}.c_proj"),
            kaiming_uniform(rng, &[n_state, d_model], d_model),
        );
        let dt_proj = store.add(
            format!("{prefix}.dt_proj"),
            kaiming_uniform(rng, &[d_model, d_model], d_model),
        );
        // bias chosen so softplus(bias) lands in [1e-3, 1e-1]
        let dt_bias_vals: Vec<T> = (0..d_model)
            .map(|_| {
                let target = (10f64).powf(rng.gen_range(-3.0..-1.0));
                lit((target.exp_m1()).ln())
            })
            .collect();
        let dt_bias = store.add(
            format!("{prefix}.dt_bias"),
            Tensor::new(vec![d_model], dt_bias_vals).unwrap(),
        );
        SsmLayer {
            d_model,
            n_state,
            a_log,
            d_skip,
            b_proj,
            c_proj,
            dt_proj,
            dt_bias,
        }
    }

    /// `x: [B,D,L] -> y: [B,D,L]`.
    pub fn forward<T: Scalar>(
        &self,
        sess: &mut Session<T>,
        x: Var,
        chunk: Option<usize>,
    ) -> Result<Var> {
        let shape = sess.g.value(x).shape().to_vec();
        let (b, d, l) = (shape[0], shape[1], shape[2]);
        if d != self.d_model {
            return Err(FerError::shape(format!(
                "ssm layer expects {} channels, got {d}",
                self.d_model
            )));
        }
        // [B,D,L] -> [B*L, D] rows for the projections
        let xt = ops::permute(&mut sess.g, x, &[0, 2, 1])?;
        let xf = ops::reshape(&mut sess.g, xt, &[b * l, d])?;

        let bw = self.param_var(sess, self.b_proj);
        let b_flat = ops::linear(&mut sess.g, xf, bw, None)?;
        let b_seq = to_bnl(sess, b_flat, b, l, self.n_state)?;

        let cw = self.param_var(sess, self.c_proj);
        let c_flat = ops::linear(&mut sess.g, xf, cw, None)?;
        let c_seq = to_bnl(sess, c_flat, b, l, self.n_state)?;

        let dtw = self.param_var(sess, self.dt_proj);
        let dtb = self.param_var(sess, self.dt_bias);
        let dt_flat = ops::linear(&mut sess.g, xf, dtw, Some(dtb))?;
        let dt_pos = ops::softplus(&mut sess.g, dt_flat)?;
        let dt = to_bnl(sess, dt_pos, b, l, d)?;

        let a_log = self.param_var(sess, self.a_log);
        let d_skip = self.param_var(sess, self.d_skip);
        selective_scan(&mut sess.g, x, dt, b_seq, c_seq, a_log, d_skip, chunk)
    }

    fn param_var<T: Scalar>(&self, sess: &mut Session<T>, id: ParamId) -> Var {
        sess.param(id)
    }
}

fn to_bnl<T: Scalar>(
    sess: &mut Session<T>,
    flat: Var,
    b: usize,
    l: usize,
    c: usize,
) -> Result<Var> {
    let r = ops::reshape(&mut sess.g, flat, &[b, l, c])?;
    ops::permute(&mut sess.g, r, &[0, 2, 1])
}

/// One timing row of the scan benchmark.
#[derive(Clone, Debug)]
pub struct BenchRow {
    pub kernel: String,
    pub len: usize,
    pub channels: usize,
    pub states: usize,
    pub median_ns: u128,
    pub throughput: f64,
}

impl BenchRow {
    pub fn csv_header() -> &'static str {
        "kernel,L,D,N,median_ns,throughput"
    }

    pub fn to_csv(&self) -> String {
        format!(
            "{},{},{},{},{},{:.3}",
            self.kernel, self.len, self.channels, self.states, self.median_ns, self.throughput
        )
    }
}

/// Times one kernel on random data; reports median wall time over `repeats`
/// and sequence elements per second.
pub fn bench_scan(
    len: usize,
    channels: usize,
    states: usize,
    kernel: &str,
    repeats: usize,
) -> Result<BenchRow> {
    if len == 0 || channels == 0 || states == 0 || repeats == 0 {
        return Err(FerError::invalid("bench sizes and repeats must be positive"));
    }
    use rand::SeedableRng;
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(1);
    let dims = ScanDims {
        batch: 1,
        channels,
        states,
        len,
    };
    let gen = |n: usize, rng: &mut rand_chacha::ChaCha8Rng| -> Vec<f32> {
        (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect()
    };
    let x = gen(channels * len, &mut rng);
    let dt: Vec<f32> = (0..channels * len).map(|_| rng.gen_range(0.01..0.2)).collect();
    let b_seq = gen(states * len, &mut rng);
    let c_seq = gen(states * len, &mut rng);
    let a: Vec<f32> = (0..channels * states).map(|_| -rng.gen_range(0.1..2.0)).collect();
    let d_skip = vec![1.0f32; channels];
    let inp = ScanInputs {
        dims,
        x: &x,
        dt: &dt,
        b_seq: &b_seq,
        c_seq: &c_seq,
        a: &a,
        d_skip: &d_skip,
    };
    let mut times = Vec::with_capacity(repeats);
    let mut sink = 0.0f32;
    for _ in 0..repeats {
        let t0 = std::time::Instant::now();
        let y = match kernel {
            "sequential" => scan_sequential(&inp)?,
            "parallel" => {
                let chunk = (len / (4 * rayon::current_num_threads()).max(1)).max(64);
                scan_parallel(&inp, chunk)?
            }
            other => {
                return Err(FerError::invalid(format!(
                    "unknown kernel '{other}' (sequential|parallel)"
                )))
            }
        };
        times.push(t0.elapsed().as_nanos());
        sink += y.data()[len - 1];
    }
    std::hint::black_box(sink);
    times.sort_unstable();
    let median_ns = times[times.len() / 2];
    let elements = (channels * len) as f64;
    Ok(BenchRow {
        kernel: kernel.to_string(),
        len,
        channels,
        states,
        median_ns,
        throughput: elements / (median_ns as f64 * 1e-9),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn random_inputs(
        rng: &mut ChaCha8Rng,
        dims: ScanDims,
    ) -> (Vec<f32>, Vec<f32>, Vec<f32>, Vec<f32>, Vec<f32>, Vec<f32>) {
        let ScanDims {
            batch,
            channels,
            states,
            len,
        } = dims;
        let x: Vec<f32> = (0..batch * channels * len)
            .map(|_| rng.gen_range(-1.0..1.0))
            .collect();
        let dt: Vec<f32> = (0..batch * channels * len)
            .map(|_| rng.gen_range(0.01..0.5))
            .collect();
        let b: Vec<f32> = (0..batch * states * len)
            .map(|_| rng.gen_range(-1.0..1.0))
            .collect();
        let c: Vec<f32> = (0..batch * states * len)
            .map(|_| rng.gen_range(-1.0..1.0))
            .collect();
        let a: Vec<f32> = (0..channels * states)
            .map(|_| -rng.gen_range(0.05..2.0))
            .collect();
        let dsk: Vec<f32> = (0..channels).map(|_| rng.gen_range(-1.0..1.0)).collect();
        (x, dt, b, c, a, dsk)
    }

    #[test]
    fn discretize_closed_form() {
        // a = -1, dt = ln 2, b = 1 -> a_bar = 0.5, b_bar = 0.5
        let (a_bar, b_bar) = discretize(-1.0f64, 1.0, std::f64::consts::LN_2).unwrap();
        assert!((a_bar - 0.5).abs() < 1e-15);
        assert!((b_bar - 0.5).abs() < 1e-15);
    }

    #[test]
    fn discretize_zoh_limits() {
        // dt -> 0+: a_bar -> 1, b_bar -> 0
        let (a_bar, b_bar) = discretize(-1.0f64, 1.0, 1e-9).unwrap();
        assert!((a_bar - 1.0).abs() < 1e-8);
        assert!(b_bar.abs() < 1e-8);
        // a -> 0 with dt = 0.1, b = 1: series branch gives b_bar -> 0.1
        let (a_bar, b_bar) = discretize(-1e-12f64, 1.0, 0.1).unwrap();
        assert!((a_bar - 1.0).abs() < 1e-9);
        assert!((b_bar - 0.1).abs() < 1e-12);
        assert!(discretize(-1.0f64, 1.0, 0.0).is_err());
        assert!(discretize(-1.0f64, 1.0, -0.5).is_err());
    }

    fn single_channel_inputs<'a>(
        x: &'a [f64],
        dt: &'a [f64],
        b: &'a [f64],
        c: &'a [f64],
        a: &'a [f64],
        dsk: &'a [f64],
    ) -> ScanInputs<'a, f64> {
        ScanInputs {
            dims: ScanDims {
                batch: 1,
                channels: 1,
                states: 1,
                len: x.len(),
            },
            x,
            dt,
            b_seq: b,
            c_seq: c,
            a,
            d_skip: dsk,
        }
    }

    #[test]
    fn pure_skip_path() {
        let x = [1.0, -2.0, 3.0];
        let dt = [0.3; 3];
        let b = [1.0; 3];
        let c = [0.0; 3];
        let y = scan_sequential(&single_channel_inputs(&x, &dt, &b, &c, &[-1.0], &[1.0])).unwrap();
        assert_eq!(y.data(), &x);
    }

    #[test]
    fn hand_unrolled_recurrence() {
        // n=1, a=-1, dt=ln2, b=c=1, d_skip=0, x=[1,1,1] -> y=[0.5,0.75,0.875]
        let x = [1.0f64; 3];
        let dt = [std::f64::consts::LN_2; 3];
        let b = [1.0; 3];
        let c = [1.0; 3];
        let y = scan_sequential(&single_channel_inputs(&x, &dt, &b, &c, &[-1.0], &[0.0])).unwrap();
        for (got, want) in y.data().iter().zip([0.5, 0.75, 0.875]) {
            assert!((got - want).abs() < 1e-12);
        }
    }

    #[test]
    fn integrator_limit_is_prefix_sum() {
        // a -> 0, dt = 1, b = c = 1: y = cumulative sums of x
        let x = [1.0f64, 2.0, 3.0];
        let dt = [1.0; 3];
        let b = [1.0; 3];
        let c = [1.0; 3];
        let y =
            scan_sequential(&single_channel_inputs(&x, &dt, &b, &c, &[-1e-13], &[0.0])).unwrap();
        for (got, want) in y.data().iter().zip([1.0, 3.0, 6.0]) {
            assert!((got - want).abs() < 1e-9);
        }
    }

    #[test]
    fn zero_length_rejected() {
        let i = ScanInputs::<f64> {
            dims: ScanDims {
                batch: 1,
                channels: 1,
                states: 1,
                len: 0,
            },
            x: &[],
            dt: &[],
            b_seq: &[],
            c_seq: &[],
            a: &[-1.0],
            d_skip: &[0.0],
        };
        assert!(scan_sequential(&i).is_err());
    }

    #[test]
    fn parallel_chunk_equals_sequential_bitwise_when_degenerate() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let dims = ScanDims {
            batch: 2,
            channels: 3,
            states: 4,
            len: 33,
        };
        let (x, dt, b, c, a, dsk) = random_inputs(&mut rng, dims);
        let inp = ScanInputs {
            dims,
            x: &x,
            dt: &dt,
            b_seq: &b,
            c_seq: &c,
            a: &a,
            d_skip: &dsk,
        };
        let seq = scan_sequential(&inp).unwrap();
        let par = scan_parallel(&inp, 33).unwrap();
        assert_eq!(seq.data(), par.data());
    }

    #[test]
    fn parallel_chunk_one_matches_sequential() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let dims = ScanDims {
            batch: 1,
            channels: 2,
            states: 3,
            len: 257,
        };
        let (x, dt, b, c, a, dsk) = random_inputs(&mut rng, dims);
        let inp = ScanInputs {
            dims,
            x: &x,
            dt: &dt,
            b_seq: &b,
            c_seq: &c,
            a: &a,
            d_skip: &dsk,
        };
        let seq = scan_sequential(&inp).unwrap();
        let par = scan_parallel(&inp, 1).unwrap();
        for (s, p) in seq.data().iter().zip(par.data()) {
            assert!((s - p).abs() <= 1e-5 * s.abs().max(1.0));
        }
    }

    #[test]
    fn scan_elem_associativity() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for _ in 0..100 {
            let e: Vec<ScanElem<f64>> = (0..3)
                .map(|_| ScanElem {
                    a: rng.gen_range(-1.0..1.0),
                    b: rng.gen_range(-1.0..1.0),
                })
                .collect();
            let left = ScanElem::compose(&ScanElem::compose(&e[2], &e[1]), &e[0]);
            let right = ScanElem::compose(&e[2], &ScanElem::compose(&e[1], &e[0]));
            assert!((left.a - right.a).abs() < 1e-6);
            assert!((left.b - right.b).abs() < 1e-6);
        }
    }

    #[test]
    fn scan_is_order_sensitive() {
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        let dims = ScanDims {
            batch: 1,
            channels: 1,
            states: 2,
            len: 8,
        };
        let (x, dt, b, c, a, dsk) = random_inputs(&mut rng, dims);
        let inp = ScanInputs {
            dims,
            x: &x,
            dt: &dt,
            b_seq: &b,
            c_seq: &c,
            a: &a,
            d_skip: &dsk,
        };
        let y = scan_sequential(&inp).unwrap();
        let mut xr = x.clone();
        xr.reverse();
        let inp_r = ScanInputs { x: &xr, ..inp };
        let mut yr = scan_sequential(&inp_r).unwrap().into_data();
        yr.reverse();
        assert!(y
            .data()
            .iter()
            .zip(&yr)
            .any(|(a, b)| (a - b).abs() > 1e-4));
    }

    #[test]
    fn stability_no_overflow_on_long_sequences() {
        let len = 65536;
        let dims = ScanDims {
            batch: 1,
            channels: 1,
            states: 1,
            len,
        };
        let x = vec![1.0f32; len];
        let dt = vec![0.1f32; len];
        let b = vec![1.0f32; len];
        let c = vec![1.0f32; len];
        let y = scan_sequential(&ScanInputs {
            dims,
            x: &x,
            dt: &dt,
            b_seq: &b,
            c_seq: &c,
            a: &[-0.5],
            d_skip: &[0.0],
        })
        .unwrap();
        let (a_bar, b_bar) = discretize(-0.5f32, 1.0, 0.1).unwrap();
        let bound = b_bar / (1.0 - a_bar) + 1e-3;
        assert!(y.data().iter().all(|v| v.is_finite() && v.abs() <= bound));
    }

    #[test]
    fn bench_emits_one_row() {
        let row = bench_scan(128, 2, 2, "sequential", 1).unwrap();
        assert_eq!(row.len, 128);
        assert!(row.median_ns > 0);
        assert!(bench_scan(128, 2, 2, "warp", 1).is_err());
    }
}
