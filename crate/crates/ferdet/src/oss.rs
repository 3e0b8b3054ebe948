//! Omnidirectional 2D selective scanning.
//!
//! A feature map `[B,C,H,W]` is flattened along eight traversal orders
//! (horizontal, vertical, anti-diagonal, and main-diagonal sweeps, each
//! forwards and reversed), scanned independently with per-direction SSM
//! parameters, mapped back to the grid, and merged by summation.

use rand::Rng;

use crate::error::{FerError, Result};
use crate::graph::Var;
use crate::ops;
use crate::params::{ParamStore, Session};
use crate::ssm::SsmLayer;
use crate::tensor::{lit, Scalar, Tensor};

/// The eight traversal directions over an `H x W` grid.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Direction {
    /// Row-major, left to right.
    HorizontalFwd,
    /// Row-major reversed.
    HorizontalRev,
    /// Column-major, top to bottom.
    VerticalFwd,
    /// Column-major reversed.
    VerticalRev,
    /// Anti-diagonals (constant `r + c`), ascending row within each.
    DiagFwd,
    /// Anti-diagonals reversed.
    DiagRev,
    /// Main diagonals (constant `c - r`), ascending row within each.
    RdiagFwd,
    /// Main diagonals reversed.
    RdiagRev,
}

impl Direction {
    pub const ALL: [Direction; 8] = [
        Direction::HorizontalFwd,
        Direction::HorizontalRev,
        Direction::VerticalFwd,
        Direction::VerticalRev,
        Direction::DiagFwd,
        Direction::DiagRev,
        Direction::RdiagFwd,
        Direction::RdiagRev,
    ];

    pub fn name(&self) -> &'static str {
        match self {
            Direction::HorizontalFwd => "h_fwd",
            Direction::HorizontalRev => "h_rev",
            Direction::VerticalFwd => "v_fwd",
            Direction::VerticalRev => "v_rev",
            Direction::DiagFwd => "diag_fwd",
            Direction::DiagRev => "diag_rev",
            Direction::RdiagFwd => "rdiag_fwd",
            Direction::RdiagRev => "rdiag_rev",
        }
    }
}

/// Builds the visiting order for `dir` over an `h x w` grid: `order[k]` is
/// the row-major index of the k-th visited cell. Every map is a permutation
/// of `0..h*w`, and each reversed map is its forward twin back to front.
pub fn build_direction_map(dir: Direction, h: usize, w: usize) -> Result<Vec<usize>> {
    if h == 0 || w == 0 {
        return Err(FerError::invalid(format!(
            "direction map needs a non-empty grid, got {h}x{w}"
        )));
    }
    let mut order = Vec::with_capacity(h * w);
    match dir {
        Direction::HorizontalFwd | Direction::HorizontalRev => {
            order.extend(0..h * w);
        }
        Direction::VerticalFwd | Direction::VerticalRev => {
            for c in 0..w {
                for r in 0..h {
                    order.push(r * w + c);
                }
            }
        }
        Direction::DiagFwd | Direction::DiagRev => {
            // anti-diagonals: r + c = s, ascending r within each
            for s in 0..h + w - 1 {
                let r_lo = s.saturating_sub(w - 1);
                let r_hi = s.min(h - 1);
                for r in r_lo..=r_hi {
                    order.push(r * w + (s - r));
                }
            }
        }
        Direction::RdiagFwd | Direction::RdiagRev => {
            // main diagonals: c - r = d for d = -(h-1)..=(w-1), ascending r
            for d in 0..h + w - 1 {
                let d = d as isize - (h as isize - 1);
                for r in 0..h {
                    let c = r as isize + d;
                    if (0..w as isize).contains(&c) {
                        order.push(r * w + c as usize);
                    }
                }
            }
        }
    }
    if matches!(
        dir,
        Direction::HorizontalRev | Direction::VerticalRev | Direction::DiagRev | Direction::RdiagRev
    ) {
        order.reverse();
    }
    Ok(order)
}

/// Eight direction-specific selective-SSM lanes over a 2D grid, merged by
/// an unweighted sum. Direction maps are cached per grid size.
pub struct OssmBlock {
    pub channels: usize,
    lanes: Vec<(Direction, SsmLayer)>,
    maps: std::cell::RefCell<std::collections::HashMap<(usize, usize), Vec<std::rc::Rc<Vec<usize>>>>>,
}

impl OssmBlock {
    pub fn new<T: Scalar>(
        store: &mut ParamStore<T>,
        rng: &mut impl Rng,
        prefix: &str,
        channels: usize,
        n_state: usize,
    ) -> Self {
        let lanes = Direction::ALL
            .iter()
            .map(|&d| {
                (
                    d,
                    SsmLayer::new(store, rng, &format!("{prefix}.{}", d.name()), channels, n_state),
                )
            })
            .collect();
        OssmBlock {
            channels,
            lanes,
            maps: Default::default(),
        }
    }

    fn maps_for(&self, h: usize, w: usize) -> Result<Vec<std::rc::Rc<Vec<usize>>>> {
        let mut cache = self.maps.borrow_mut();
        if let Some(m) = cache.get(&(h, w)) {
            return Ok(m.clone());
        }
        let maps: Vec<_> = Direction::ALL
            .iter()
            .map(|&d| build_direction_map(d, h, w).map(std::rc::Rc::new))
            .collect::<Result<_>>()?;
        cache.insert((h, w), maps.clone());
        Ok(maps)
    }

    /// `x: [B,C,H,W] -> [B,C,H,W]`.
    pub fn forward<T: Scalar>(
        &self,
        sess: &mut Session<T>,
        x: Var,
        chunk: Option<usize>,
    ) -> Result<Var> {
        let shape = sess.g.value(x).shape().to_vec();
        if shape.len() != 4 || shape[1] != self.channels {
            return Err(FerError::shape(format!(
                "ossm expects [B,{},H,W], got {shape:?}",
                self.channels
            )));
        }
        let (h, w) = (shape[2], shape[3]);
        let maps = self.maps_for(h, w)?;
        let mut merged: Option<Var> = None;
        for ((_, layer), order) in self.lanes.iter().zip(maps) {
            let seq = ops::gather_spatial(&mut sess.g, x, order.clone())?;
            let y_seq = layer.forward(sess, seq, chunk)?;
            let y = ops::scatter_spatial(&mut sess.g, y_seq, order, h, w)?;
            merged = Some(match merged {
                Some(acc) => ops::add(&mut sess.g, acc, y)?,
                None => y,
            });
        }
        Ok(merged.unwrap())
    }
}

/// Measures how far a unit perturbation at the grid center propagates:
/// returns the normalized absolute response map of a fixed, benign OSSM
/// (identity-ish parameters) to a centered impulse. Non-zero response on
/// rows, columns, and both diagonals through the center demonstrates
/// omnidirectional reach.
pub fn receptive_probe(h: usize, w: usize) -> Result<Tensor<f64>> {
    let mut base = Tensor::zeros(&[1, 1, h, w]);
    let center = (h / 2) * w + (w / 2);
    base.data_mut()[center] = 1.0;
    let mut out = Tensor::zeros(&[1, 1, h, w]);
    for dir in Direction::ALL {
        let order = build_direction_map(dir, h, w)?;
        // fixed scalar lane: a = -0.25, dt = 1, b = c = 1, no skip
        let x: Vec<f64> = order.iter().map(|&i| base.data()[i]).collect();
        let dt = vec![1.0; h * w];
        let ones = vec![1.0; h * w];
        let inp = crate::ssm::ScanInputs {
            dims: crate::ssm::ScanDims {
                batch: 1,
                channels: 1,
                states: 1,
                len: h * w,
            },
            x: &x,
            dt: &dt,
            b_seq: &ones,
            c_seq: &ones,
            a: &[-0.25],
            d_skip: &[0.0],
        };
        let y = crate::ssm::scan_sequential(&inp)?;
        for (k, &pos) in order.iter().enumerate() {
            out.data_mut()[pos] += y.data()[k].abs();
        }
    }
    let peak = out.data().iter().cloned().fold(0.0f64, f64::max);
    if peak > 0.0 {
        let inv = 1.0 / peak;
        out.data_mut().iter_mut().for_each(|v| *v *= inv);
    }
    let _ = lit::<f64>(0.0);
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn frozen_small_grid_orders() {
        // 2x3 grid, row-major cell ids 0..6
        assert_eq!(
            build_direction_map(Direction::HorizontalFwd, 2, 3).unwrap(),
            vec![0, 1, 2, 3, 4, 5]
        );
        assert_eq!(
            build_direction_map(Direction::VerticalFwd, 2, 3).unwrap(),
            vec![0, 3, 1, 4, 2, 5]
        );
        assert_eq!(
            build_direction_map(Direction::DiagFwd, 2, 3).unwrap(),
            vec![0, 1, 3, 2, 4, 5]
        );
        assert_eq!(
            build_direction_map(Direction::RdiagFwd, 2, 3).unwrap(),
            vec![3, 0, 4, 1, 5, 2]
        );
    }

    #[test]
    fn every_map_is_a_permutation() {
        for dir in Direction::ALL {
            for (h, w) in [(1, 1), (1, 7), (5, 1), (4, 4), (3, 5), (7, 2)] {
                let order = build_direction_map(dir, h, w).unwrap();
                let mut seen = vec![false; h * w];
                for &i in &order {
                    assert!(!seen[i], "{dir:?} {h}x{w} repeats {i}");
                    seen[i] = true;
                }
                assert!(seen.iter().all(|&s| s), "{dir:?} {h}x{w} misses cells");
            }
        }
    }

    #[test]
    fn reversed_maps_mirror_forward() {
        use Direction::*;
        for (f, r) in [
            (HorizontalFwd, HorizontalRev),
            (VerticalFwd, VerticalRev),
            (DiagFwd, DiagRev),
            (RdiagFwd, RdiagRev),
        ] {
            let fwd = build_direction_map(f, 3, 5).unwrap();
            let rev = build_direction_map(r, 3, 5).unwrap();
            for (i, &v) in rev.iter().enumerate() {
                assert_eq!(v, fwd[fwd.len() - 1 - i]);
            }
        }
    }

    #[test]
    fn vertical_is_transposed_horizontal() {
        // visiting cell (r,c) of HxW column-major equals visiting (c,r) of
        // the transposed WxH grid row-major
        let (h, w) = (3, 4);
        let v = build_direction_map(Direction::VerticalFwd, h, w).unwrap();
        let ht = build_direction_map(Direction::HorizontalFwd, w, h).unwrap();
        for (k, &idx) in v.iter().enumerate() {
            let (r, c) = (idx / w, idx % w);
            let (tr, tc) = (ht[k] / h, ht[k] % h);
            assert_eq!((r, c), (tc, tr));
        }
    }

    #[test]
    fn empty_grid_rejected() {
        assert!(build_direction_map(Direction::DiagFwd, 0, 3).is_err());
        assert!(build_direction_map(Direction::DiagFwd, 3, 0).is_err());
    }

    #[test]
    fn ossm_forward_shape_and_determinism() {
        let mut store = ParamStore::<f32>::new();
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let block = OssmBlock::new(&mut store, &mut rng, "ossm", 4, 4);
        let x = Tensor::new(
            vec![1, 4, 5, 6],
            (0..120).map(|i| (i as f32 * 0.37).sin()).collect(),
        )
        .unwrap();
        let run = |store: &ParamStore<f32>| {
            let mut sess = Session::new(store);
            let xv = sess.g.leaf(x.clone(), false);
            let y = block.forward(&mut sess, xv, None).unwrap();
            sess.g.value(y).clone()
        };
        let y1 = run(&store);
        let y2 = run(&store);
        assert_eq!(y1.shape(), &[1, 4, 5, 6]);
        assert_eq!(y1.data(), y2.data());
        assert!(y1.all_finite());
    }

    #[test]
    fn receptive_probe_reaches_all_eight_rays() {
        let h = 9;
        let w = 9;
        let probe = receptive_probe(h, w).unwrap();
        let at = |r: usize, c: usize| probe.data()[r * w + c];
        let (cr, cc) = (h / 2, w / 2);
        for (dr, dc) in [
            (0i64, 1i64),
            (0, -1),
            (1, 0),
            (-1, 0),
            (1, 1),
            (-1, -1),
            (1, -1),
            (-1, 1),
        ] {
            let r = (cr as i64 + 3 * dr) as usize;
            let c = (cc as i64 + 3 * dc) as usize;
            assert!(
                at(r, c) > 1e-6,
                "no response three steps along ({dr},{dc})"
            );
        }
    }
}
