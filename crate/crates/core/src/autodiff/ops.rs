//! Elementwise, reduction, shape, and matrix ops. Each op records a backward
//! closure returning one gradient per parent, already reduced to the parent's
//! shape (broadcast axes are summed out).

use ndarray::{concatenate, ArrayD, Axis, Ix2, IxDyn, Slice, Zip};

use super::tape::{Tape, VarId};

pub(crate) fn co_broadcast(a: &[usize], b: &[usize]) -> Vec<usize> {
    let n = a.len().max(b.len());
    let mut out = vec![0usize; n];
    for i in 0..n {
        let da = if i + a.len() >= n { a[i + a.len() - n] } else { 1 };
        let db = if i + b.len() >= n { b[i + b.len() - n] } else { 1 };
        out[i] = match (da, db) {
            (x, y) if x == y => x,
            (1, y) => y,
            (x, 1) => x,
            _ => panic!("incompatible broadcast: {a:?} vs {b:?}"),
        };
    }
    out
}

pub(crate) fn broadcast_to(x: &ArrayD<f64>, shape: &[usize]) -> ArrayD<f64> {
    x.broadcast(IxDyn(shape))
        .unwrap_or_else(|| panic!("cannot broadcast {:?} to {shape:?}", x.shape()))
        .to_owned()
}

/// Sum `g` down to `shape`, undoing broadcasting: leading extra axes are
/// summed away, then axes where `shape` has size 1 are summed keeping dims.
pub(crate) fn reduce_to_shape(mut g: ArrayD<f64>, shape: &[usize]) -> ArrayD<f64> {
    while g.ndim() > shape.len() {
        g = g.sum_axis(Axis(0));
    }
    for ax in 0..shape.len() {
        if shape[ax] == 1 && g.shape()[ax] != 1 {
            g = g.sum_axis(Axis(ax)).insert_axis(Axis(ax));
        }
    }
    g
}

/// Reshape via copy when the source is not in standard layout.
pub(crate) fn reshaped(x: &ArrayD<f64>, shape: &[usize]) -> ArrayD<f64> {
    let flat: Vec<f64> = x.iter().copied().collect();
    ArrayD::from_shape_vec(IxDyn(shape), flat)
        .unwrap_or_else(|e| panic!("reshape {:?} -> {shape:?}: {e}", x.shape()))
}

impl Tape {
    fn binary<F, Da, Db>(&mut self, a: VarId, b: VarId, f: F, dfa: Da, dfb: Db) -> VarId
    where
        F: Fn(f64, f64) -> f64,
        Da: Fn(f64, f64, f64) -> f64 + 'static,
        Db: Fn(f64, f64, f64) -> f64 + 'static,
    {
        let target = co_broadcast(self.value(a).shape(), self.value(b).shape());
        let av = broadcast_to(self.value(a), &target);
        let bv = broadcast_to(self.value(b), &target);
        let mut y = ArrayD::zeros(IxDyn(&target));
        Zip::from(&mut y).and(&av).and(&bv).for_each(|y, &a, &b| *y = f(a, b));
        self.push(
            y,
            vec![a, b],
            Some(Box::new(move |g, parents, out| {
                let target: Vec<usize> = out.shape().to_vec();
                let av = broadcast_to(parents[0], &target);
                let bv = broadcast_to(parents[1], &target);
                let mut ga = ArrayD::zeros(IxDyn(&target));
                let mut gb = ArrayD::zeros(IxDyn(&target));
                Zip::from(&mut ga)
                    .and(&mut gb)
                    .and(g)
                    .and(&av)
                    .and(&bv)
                    .and(out)
                    .for_each(|ga, gb, &g, &a, &b, &y| {
                        *ga = g * dfa(a, b, y);
                        *gb = g * dfb(a, b, y);
                    });
                vec![
                    reduce_to_shape(ga, parents[0].shape()),
                    reduce_to_shape(gb, parents[1].shape()),
                ]
            })),
        )
    }

    fn unary<F, Df>(&mut self, x: VarId, f: F, df: Df) -> VarId
    where
        F: Fn(f64) -> f64,
        Df: Fn(f64, f64) -> f64 + 'static,
    {
        let y = self.value(x).mapv(f);
        self.push(
            y,
            vec![x],
            Some(Box::new(move |g, parents, out| {
                let mut gx = ArrayD::zeros(parents[0].raw_dim());
                Zip::from(&mut gx)
                    .and(g)
                    .and(parents[0])
                    .and(out)
                    .for_each(|gx, &g, &x, &y| *gx = g * df(x, y));
                vec![gx]
            })),
        )
    }

    pub fn add(&mut self, a: VarId, b: VarId) -> VarId {
        self.binary(a, b, |a, b| a + b, |_, _, _| 1.0, |_, _, _| 1.0)
    }

    pub fn sub(&mut self, a: VarId, b: VarId) -> VarId {
        self.binary(a, b, |a, b| a - b, |_, _, _| 1.0, |_, _, _| -1.0)
    }

    pub fn mul(&mut self, a: VarId, b: VarId) -> VarId {
        self.binary(a, b, |a, b| a * b, |_, b, _| b, |a, _, _| a)
    }

    pub fn div(&mut self, a: VarId, b: VarId) -> VarId {
        self.binary(a, b, |a, b| a / b, |_, b, _| 1.0 / b, |_, b, y| -y / b)
    }

    /// Elementwise minimum; ties send the gradient to the first argument.
    pub fn minimum(&mut self, a: VarId, b: VarId) -> VarId {
        self.binary(
            a,
            b,
            f64::min,
            |a, b, _| if a <= b { 1.0 } else { 0.0 },
            |a, b, _| if b < a { 1.0 } else { 0.0 },
        )
    }

    /// Elementwise maximum; ties send the gradient to the first argument.
    pub fn maximum(&mut self, a: VarId, b: VarId) -> VarId {
        self.binary(
            a,
            b,
            f64::max,
            |a, b, _| if a >= b { 1.0 } else { 0.0 },
            |a, b, _| if b > a { 1.0 } else { 0.0 },
        )
    }

    pub fn add_scalar(&mut self, x: VarId, c: f64) -> VarId {
        self.unary(x, move |x| x + c, |_, _| 1.0)
    }

    pub fn mul_scalar(&mut self, x: VarId, c: f64) -> VarId {
        self.unary(x, move |x| x * c, move |_, _| c)
    }

    pub fn neg(&mut self, x: VarId) -> VarId {
        self.mul_scalar(x, -1.0)
    }

    pub fn relu(&mut self, x: VarId) -> VarId {
        self.unary(
            x,
            |x| x.max(0.0),
            |x, _| if x > 0.0 { 1.0 } else { 0.0 },
        )
    }

    pub fn ln(&mut self, x: VarId) -> VarId {
        self.unary(x, f64::ln, |x, _| 1.0 / x)
    }

    pub fn exp(&mut self, x: VarId) -> VarId {
        self.unary(x, f64::exp, |_, y| y)
    }

    pub fn sigmoid(&mut self, x: VarId) -> VarId {
        self.unary(
            x,
            |x| {
                if x >= 0.0 {
                    1.0 / (1.0 + (-x).exp())
                } else {
                    let e = x.exp();
                    e / (1.0 + e)
                }
            },
            |_, y| y * (1.0 - y),
        )
    }

    /// Clamp to `[lo, hi]`. Gradient passes only where the input lies inside
    /// the range (inclusive); it is zero where clamping was active.
    pub fn clamp(&mut self, x: VarId, lo: f64, hi: f64) -> VarId {
        assert!(lo < hi, "clamp bounds out of order");
        self.unary(
            x,
            move |x| x.clamp(lo, hi),
            move |x, _| if (lo..=hi).contains(&x) { 1.0 } else { 0.0 },
        )
    }

    /// Sum of all elements; result is a 0-d tensor.
    pub fn sum_all(&mut self, x: VarId) -> VarId {
        let s = self.value(x).sum();
        self.push(
            ArrayD::from_elem(IxDyn(&[]), s),
            vec![x],
            Some(Box::new(|g, parents, _| {
                let gv = *g.iter().next().unwrap();
                vec![ArrayD::from_elem(parents[0].raw_dim(), gv)]
            })),
        )
    }

    pub fn mean_all(&mut self, x: VarId) -> VarId {
        let n = self.value(x).len() as f64;
        let s = self.sum_all(x);
        self.mul_scalar(s, 1.0 / n)
    }

    /// Sum along `axis`, removing it.
    pub fn sum_axis(&mut self, x: VarId, axis: usize) -> VarId {
        let y = self.value(x).sum_axis(Axis(axis));
        self.push(
            y,
            vec![x],
            Some(Box::new(move |g, parents, _| {
                let expanded = g.clone().insert_axis(Axis(axis));
                vec![broadcast_to(&expanded, parents[0].shape())]
            })),
        )
    }

    /// Mean along `axis`, removing it.
    pub fn mean_axis(&mut self, x: VarId, axis: usize) -> VarId {
        let n = self.value(x).shape()[axis] as f64;
        let s = self.sum_axis(x, axis);
        self.mul_scalar(s, 1.0 / n)
    }

    pub fn reshape(&mut self, x: VarId, shape: &[usize]) -> VarId {
        let y = reshaped(self.value(x), shape);
        self.push(
            y,
            vec![x],
            Some(Box::new(|g, parents, _| {
                vec![reshaped(g, parents[0].shape())]
            })),
        )
    }

    /// Transpose of a rank-2 variable.
    pub fn transpose2(&mut self, x: VarId) -> VarId {
        let y = self.value(x).t().to_owned();
        self.push(
            y,
            vec![x],
            Some(Box::new(|g, _, _| vec![g.t().to_owned()])),
        )
    }

    /// Matrix product of rank-2 variables: (m,k) x (k,n) -> (m,n).
    pub fn matmul(&mut self, a: VarId, b: VarId) -> VarId {
        let a2 = self
            .value(a)
            .view()
            .into_dimensionality::<Ix2>()
            .expect("matmul lhs must be rank 2");
        let b2 = self
            .value(b)
            .view()
            .into_dimensionality::<Ix2>()
            .expect("matmul rhs must be rank 2");
        assert_eq!(
            a2.shape()[1],
            b2.shape()[0],
            "matmul inner dims: {:?} x {:?}",
            a2.shape(),
            b2.shape()
        );
        let y = a2.dot(&b2).into_dyn();
        self.push(
            y,
            vec![a, b],
            Some(Box::new(|g, parents, _| {
                let g2 = g.view().into_dimensionality::<Ix2>().unwrap();
                let a2 = parents[0].view().into_dimensionality::<Ix2>().unwrap();
                let b2 = parents[1].view().into_dimensionality::<Ix2>().unwrap();
                vec![g2.dot(&b2.t()).into_dyn(), a2.t().dot(&g2).into_dyn()]
            })),
        )
    }

    /// Concatenate along `axis`; backward splits the gradient back.
    pub fn concat(&mut self, axis: usize, parts: &[VarId]) -> VarId {
        assert!(!parts.is_empty(), "concat of zero parts");
        let views: Vec<_> = parts.iter().map(|&p| self.value(p).view()).collect();
        let y = concatenate(Axis(axis), &views).expect("concat shape mismatch");
        let sizes: Vec<usize> = parts.iter().map(|&p| self.value(p).shape()[axis]).collect();
        self.push(
            y,
            parts.to_vec(),
            Some(Box::new(move |g, _, _| {
                let mut out = Vec::with_capacity(sizes.len());
                let mut off = 0;
                for &sz in &sizes {
                    out.push(
                        g.slice_axis(Axis(axis), Slice::from(off..off + sz))
                            .to_owned(),
                    );
                    off += sz;
                }
                out
            })),
        )
    }

    /// Slice `[start, end)` along `axis`. Backward scatters into zeros.
    pub fn slice_axis_range(&mut self, x: VarId, axis: usize, start: usize, end: usize) -> VarId {
        let dim = self.value(x).shape()[axis];
        assert!(start < end && end <= dim, "slice [{start},{end}) out of range for axis of {dim}");
        let y = self
            .value(x)
            .slice_axis(Axis(axis), Slice::from(start..end))
            .to_owned();
        self.push(
            y,
            vec![x],
            Some(Box::new(move |g, parents, _| {
                let mut gx = ArrayD::zeros(parents[0].raw_dim());
                gx.slice_axis_mut(Axis(axis), Slice::from(start..end))
                    .assign(g);
                vec![gx]
            })),
        )
    }
}
