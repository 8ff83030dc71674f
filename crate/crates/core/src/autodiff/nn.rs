//! Neural-network kernels: convolution, normalization, softmax, bilinear
//! resampling, dropout. Layouts follow (N, C, H, W) for images and (rows,
//! features) for token matrices.

use ndarray::{Array1, Array2, Array3, ArrayD, ArrayView3, Axis, Ix2, Ix4, IxDyn};
use rand::Rng;
use rand_chacha::ChaCha8Rng;

use super::ops::reshaped;
use super::tape::{Tape, VarId};

fn conv_out(dim: usize, k: usize, stride: usize, pad: usize) -> usize {
    assert!(dim + 2 * pad >= k, "kernel {k} larger than padded input {dim}+2*{pad}");
    (dim + 2 * pad - k) / stride + 1
}

fn im2col(
    xs: &ArrayView3<f64>,
    kh: usize,
    kw: usize,
    stride: usize,
    pad: usize,
    ho: usize,
    wo: usize,
) -> Array2<f64> {
    let (c, h, w) = (xs.shape()[0], xs.shape()[1], xs.shape()[2]);
    let mut cols = Array2::<f64>::zeros((c * kh * kw, ho * wo));
    for ci in 0..c {
        for ki in 0..kh {
            for kj in 0..kw {
                let row = (ci * kh + ki) * kw + kj;
                for oh in 0..ho {
                    let ih = (oh * stride + ki) as isize - pad as isize;
                    if ih < 0 || ih >= h as isize {
                        continue;
                    }
                    for ow in 0..wo {
                        let iw = (ow * stride + kj) as isize - pad as isize;
                        if iw < 0 || iw >= w as isize {
                            continue;
                        }
                        cols[(row, oh * wo + ow)] = xs[(ci, ih as usize, iw as usize)];
                    }
                }
            }
        }
    }
    cols
}

fn col2im(
    gcols: &Array2<f64>,
    c: usize,
    h: usize,
    w: usize,
    kh: usize,
    kw: usize,
    stride: usize,
    pad: usize,
    ho: usize,
    wo: usize,
) -> Array3<f64> {
    let mut gx = Array3::<f64>::zeros((c, h, w));
    for ci in 0..c {
        for ki in 0..kh {
            for kj in 0..kw {
                let row = (ci * kh + ki) * kw + kj;
                for oh in 0..ho {
                    let ih = (oh * stride + ki) as isize - pad as isize;
                    if ih < 0 || ih >= h as isize {
                        continue;
                    }
                    for ow in 0..wo {
                        let iw = (ow * stride + kj) as isize - pad as isize;
                        if iw < 0 || iw >= w as isize {
                            continue;
                        }
                        gx[(ci, ih as usize, iw as usize)] += gcols[(row, oh * wo + ow)];
                    }
                }
            }
        }
    }
    gx
}

/// Index/weight table for 1-d bilinear resampling with half-pixel alignment
/// (align_corners = false). Linear in the input, so gradients are exact.
fn bilinear_table(n_in: usize, n_out: usize) -> Vec<(usize, usize, f64, f64)> {
    let scale = n_in as f64 / n_out as f64;
    (0..n_out)
        .map(|o| {
            let src = ((o as f64 + 0.5) * scale - 0.5).clamp(0.0, (n_in - 1) as f64);
            let i0 = src.floor() as usize;
            let i1 = (i0 + 1).min(n_in - 1);
            let f = src - i0 as f64;
            (i0, i1, 1.0 - f, f)
        })
        .collect()
}

impl Tape {
    /// 2-d convolution with zero padding. `x` is (N,C,H,W), `w` is
    /// (O,C,kh,kw), optional bias (O,).
    pub fn conv2d(
        &mut self,
        x: VarId,
        w: VarId,
        b: Option<VarId>,
        stride: usize,
        pad: usize,
    ) -> VarId {
        let xs = self.value(x).shape().to_vec();
        let ws = self.value(w).shape().to_vec();
        assert_eq!(xs.len(), 4, "conv2d input must be (N,C,H,W), got {xs:?}");
        assert_eq!(ws.len(), 4, "conv2d weight must be (O,C,kh,kw), got {ws:?}");
        assert_eq!(xs[1], ws[1], "conv2d channels: input {xs:?} vs weight {ws:?}");
        let (n, c, h, wdt) = (xs[0], xs[1], xs[2], xs[3]);
        let (o, kh, kw) = (ws[0], ws[2], ws[3]);
        let ho = conv_out(h, kh, stride, pad);
        let wo = conv_out(wdt, kw, stride, pad);

        let xv = self.value(x).view().into_dimensionality::<Ix4>().unwrap();
        let w2 = reshaped(self.value(w), &[o, c * kh * kw])
            .into_dimensionality::<Ix2>()
            .unwrap();

        let mut y = ArrayD::<f64>::zeros(IxDyn(&[n, o, ho, wo]));
        let mut cols_all: Vec<Array2<f64>> = Vec::with_capacity(n);
        for ni in 0..n {
            let cols = im2col(&xv.index_axis(Axis(0), ni), kh, kw, stride, pad, ho, wo);
            let out2 = w2.dot(&cols);
            let mut dst = y.index_axis_mut(Axis(0), ni);
            for oi in 0..o {
                for hw in 0..ho * wo {
                    dst[[oi, hw / wo, hw % wo]] = out2[(oi, hw)];
                }
            }
            if self.grad_enabled() {
                cols_all.push(cols);
            }
        }
        if let Some(bv) = b {
            let bias = self.value(bv).clone();
            assert_eq!(bias.len(), o, "conv2d bias length");
            let b1 = bias.into_dimensionality::<ndarray::Ix1>().unwrap();
            for ni in 0..n {
                for oi in 0..o {
                    y.slice_mut(ndarray::s![ni, oi, .., ..]).mapv_inplace(|v| v + b1[oi]);
                }
            }
        }

        let mut parents = vec![x, w];
        if let Some(bv) = b {
            parents.push(bv);
        }
        let has_bias = b.is_some();
        self.push(
            y,
            parents,
            Some(Box::new(move |g, parents, _| {
                let g4 = g.view().into_dimensionality::<Ix4>().unwrap();
                let w2 = reshaped(parents[1], &[o, c * kh * kw])
                    .into_dimensionality::<Ix2>()
                    .unwrap();
                let mut gw2 = Array2::<f64>::zeros((o, c * kh * kw));
                let mut gx = ArrayD::<f64>::zeros(parents[0].raw_dim());
                for ni in 0..n {
                    let gn = g4.index_axis(Axis(0), ni);
                    let mut g2 = Array2::<f64>::zeros((o, ho * wo));
                    for oi in 0..o {
                        for hi in 0..ho {
                            for wi in 0..wo {
                                g2[(oi, hi * wo + wi)] = gn[[oi, hi, wi]];
                            }
                        }
                    }
                    gw2 = gw2 + g2.dot(&cols_all[ni].t());
                    let gcols = w2.t().dot(&g2);
                    let gxn = col2im(&gcols, c, h, wdt, kh, kw, stride, pad, ho, wo);
                    gx.index_axis_mut(Axis(0), ni).assign(&gxn);
                }
                let gw = reshaped(&gw2.into_dyn(), &[o, c, kh, kw]);
                let mut grads = vec![gx, gw];
                if has_bias {
                    let gb = g.sum_axis(Axis(3)).sum_axis(Axis(2)).sum_axis(Axis(0));
                    grads.push(gb);
                }
                grads
            })),
        )
    }

    /// Batch normalization over (N,H,W) per channel using batch statistics.
    /// Returns the normalized output plus the batch mean and unbiased
    /// variance so the caller can stage running-stat updates; the op itself
    /// mutates nothing.
    pub fn batch_norm_train(
        &mut self,
        x: VarId,
        gamma: VarId,
        beta: VarId,
        eps: f64,
    ) -> (VarId, Array1<f64>, Array1<f64>) {
        let xs = self.value(x).shape().to_vec();
        assert_eq!(xs.len(), 4, "batch_norm input must be (N,C,H,W)");
        let (n, c, h, w) = (xs[0], xs[1], xs[2], xs[3]);
        let m = (n * h * w) as f64;
        assert!(m >= 1.0);

        let xv = self.value(x).view().into_dimensionality::<Ix4>().unwrap();
        let mut mean = Array1::<f64>::zeros(c);
        let mut var = Array1::<f64>::zeros(c);
        for ci in 0..c {
            let ch = xv.slice(ndarray::s![.., ci, .., ..]);
            let mu = ch.sum() / m;
            mean[ci] = mu;
            var[ci] = ch.iter().map(|&v| (v - mu) * (v - mu)).sum::<f64>() / m;
        }
        let invstd: Array1<f64> = var.mapv(|v| 1.0 / (v + eps).sqrt());
        let g1 = self.value(gamma).clone().into_dimensionality::<ndarray::Ix1>().unwrap();
        let b1 = self.value(beta).clone().into_dimensionality::<ndarray::Ix1>().unwrap();

        let mut y = ArrayD::<f64>::zeros(IxDyn(&xs));
        {
            let mut yv = y.view_mut().into_dimensionality::<Ix4>().unwrap();
            for ci in 0..c {
                let (mu, is, ga, be) = (mean[ci], invstd[ci], g1[ci], b1[ci]);
                let mut dst = yv.slice_mut(ndarray::s![.., ci, .., ..]);
                let src = xv.slice(ndarray::s![.., ci, .., ..]);
                ndarray::Zip::from(&mut dst).and(&src).for_each(|y, &x| {
                    *y = (x - mu) * is * ga + be;
                });
            }
        }

        let var_unbiased = if m > 1.0 {
            var.mapv(|v| v * m / (m - 1.0))
        } else {
            var.clone()
        };

        let mean_c = mean.clone();
        let invstd_c = invstd.clone();
        let out = self.push(
            y,
            vec![x, gamma, beta],
            Some(Box::new(move |g, parents, _| {
                let xv = parents[0].view().into_dimensionality::<Ix4>().unwrap();
                let gv = g.view().into_dimensionality::<Ix4>().unwrap();
                let g1 = parents[1].view().into_dimensionality::<ndarray::Ix1>().unwrap();
                let mut gx = ArrayD::<f64>::zeros(parents[0].raw_dim());
                let mut ggamma = Array1::<f64>::zeros(c);
                let mut gbeta = Array1::<f64>::zeros(c);
                {
                    let mut gxv = gx.view_mut().into_dimensionality::<Ix4>().unwrap();
                    for ci in 0..c {
                        let (mu, is, ga) = (mean_c[ci], invstd_c[ci], g1[ci]);
                        let xch = xv.slice(ndarray::s![.., ci, .., ..]);
                        let gch = gv.slice(ndarray::s![.., ci, .., ..]);
                        let mut sum_gxhat = 0.0;
                        let mut sum_gxhat_xhat = 0.0;
                        for (&gi, &xi) in gch.iter().zip(xch.iter()) {
                            let xhat = (xi - mu) * is;
                            let gxhat = gi * ga;
                            sum_gxhat += gxhat;
                            sum_gxhat_xhat += gxhat * xhat;
                            gbeta[ci] += gi;
                            ggamma[ci] += gi * xhat;
                        }
                        let mut dst = gxv.slice_mut(ndarray::s![.., ci, .., ..]);
                        ndarray::Zip::from(&mut dst).and(&xch).and(&gch).for_each(
                            |o, &xi, &gi| {
                                let xhat = (xi - mu) * is;
                                let gxhat = gi * ga;
                                *o = is / m * (m * gxhat - sum_gxhat - xhat * sum_gxhat_xhat);
                            },
                        );
                    }
                }
                vec![gx, ggamma.into_dyn(), gbeta.into_dyn()]
            })),
        );
        (out, mean, var_unbiased)
    }

    /// Batch normalization using fixed running statistics (inference mode).
    pub fn batch_norm_eval(
        &mut self,
        x: VarId,
        gamma: VarId,
        beta: VarId,
        running_mean: &Array1<f64>,
        running_var: &Array1<f64>,
        eps: f64,
    ) -> VarId {
        let xs = self.value(x).shape().to_vec();
        assert_eq!(xs.len(), 4, "batch_norm input must be (N,C,H,W)");
        let c = xs[1];
        assert_eq!(running_mean.len(), c);
        let rinv: Array1<f64> = running_var.mapv(|v| 1.0 / (v + eps).sqrt());
        let rm = running_mean.clone();

        let xv = self.value(x).view().into_dimensionality::<Ix4>().unwrap();
        let g1 = self.value(gamma).clone().into_dimensionality::<ndarray::Ix1>().unwrap();
        let b1 = self.value(beta).clone().into_dimensionality::<ndarray::Ix1>().unwrap();
        let mut y = ArrayD::<f64>::zeros(IxDyn(&xs));
        {
            let mut yv = y.view_mut().into_dimensionality::<Ix4>().unwrap();
            for ci in 0..c {
                let (mu, is, ga, be) = (rm[ci], rinv[ci], g1[ci], b1[ci]);
                let mut dst = yv.slice_mut(ndarray::s![.., ci, .., ..]);
                let src = xv.slice(ndarray::s![.., ci, .., ..]);
                ndarray::Zip::from(&mut dst).and(&src).for_each(|y, &x| {
                    *y = (x - mu) * is * ga + be;
                });
            }
        }

        let rm_c = rm.clone();
        let rinv_c = rinv.clone();
        self.push(
            y,
            vec![x, gamma, beta],
            Some(Box::new(move |g, parents, _| {
                let xv = parents[0].view().into_dimensionality::<Ix4>().unwrap();
                let gv = g.view().into_dimensionality::<Ix4>().unwrap();
                let g1 = parents[1].view().into_dimensionality::<ndarray::Ix1>().unwrap();
                let mut gx = ArrayD::<f64>::zeros(parents[0].raw_dim());
                let mut ggamma = Array1::<f64>::zeros(c);
                let mut gbeta = Array1::<f64>::zeros(c);
                {
                    let mut gxv = gx.view_mut().into_dimensionality::<Ix4>().unwrap();
                    for ci in 0..c {
                        let (mu, is, ga) = (rm_c[ci], rinv_c[ci], g1[ci]);
                        let xch = xv.slice(ndarray::s![.., ci, .., ..]);
                        let gch = gv.slice(ndarray::s![.., ci, .., ..]);
                        for (&gi, &xi) in gch.iter().zip(xch.iter()) {
                            gbeta[ci] += gi;
                            ggamma[ci] += gi * (xi - mu) * is;
                        }
                        let mut dst = gxv.slice_mut(ndarray::s![.., ci, .., ..]);
                        ndarray::Zip::from(&mut dst).and(&gch).for_each(|o, &gi| {
                            *o = gi * ga * is;
                        });
                    }
                }
                vec![gx, ggamma.into_dyn(), gbeta.into_dyn()]
            })),
        )
    }

    /// Layer normalization over the last axis of a (rows, features) matrix.
    pub fn layer_norm(&mut self, x: VarId, gamma: VarId, beta: VarId, eps: f64) -> VarId {
        let xs = self.value(x).shape().to_vec();
        assert_eq!(xs.len(), 2, "layer_norm input must be rank 2");
        let (r, c) = (xs[0], xs[1]);
        let xv = self.value(x).view().into_dimensionality::<Ix2>().unwrap();
        let g1 = self.value(gamma).clone().into_dimensionality::<ndarray::Ix1>().unwrap();
        let b1 = self.value(beta).clone().into_dimensionality::<ndarray::Ix1>().unwrap();
        assert_eq!(g1.len(), c);

        let mut mean = Array1::<f64>::zeros(r);
        let mut invstd = Array1::<f64>::zeros(r);
        let mut y = Array2::<f64>::zeros((r, c));
        for ri in 0..r {
            let row = xv.row(ri);
            let mu = row.sum() / c as f64;
            let var = row.iter().map(|&v| (v - mu) * (v - mu)).sum::<f64>() / c as f64;
            let is = 1.0 / (var + eps).sqrt();
            mean[ri] = mu;
            invstd[ri] = is;
            for ci in 0..c {
                y[(ri, ci)] = (row[ci] - mu) * is * g1[ci] + b1[ci];
            }
        }

        self.push(
            y.into_dyn(),
            vec![x, gamma, beta],
            Some(Box::new(move |g, parents, _| {
                let xv = parents[0].view().into_dimensionality::<Ix2>().unwrap();
                let gv = g.view().into_dimensionality::<Ix2>().unwrap();
                let g1 = parents[1].view().into_dimensionality::<ndarray::Ix1>().unwrap();
                let mut gx = Array2::<f64>::zeros((r, c));
                let mut ggamma = Array1::<f64>::zeros(c);
                let mut gbeta = Array1::<f64>::zeros(c);
                for ri in 0..r {
                    let (mu, is) = (mean[ri], invstd[ri]);
                    let mut sum_gxhat = 0.0;
                    let mut sum_gxhat_xhat = 0.0;
                    for ci in 0..c {
                        let xhat = (xv[(ri, ci)] - mu) * is;
                        let gxhat = gv[(ri, ci)] * g1[ci];
                        sum_gxhat += gxhat;
                        sum_gxhat_xhat += gxhat * xhat;
                        ggamma[ci] += gv[(ri, ci)] * xhat;
                        gbeta[ci] += gv[(ri, ci)];
                    }
                    let cf = c as f64;
                    for ci in 0..c {
                        let xhat = (xv[(ri, ci)] - mu) * is;
                        let gxhat = gv[(ri, ci)] * g1[ci];
                        gx[(ri, ci)] = is / cf * (cf * gxhat - sum_gxhat - xhat * sum_gxhat_xhat);
                    }
                }
                vec![gx.into_dyn(), ggamma.into_dyn(), gbeta.into_dyn()]
            })),
        )
    }

    /// Row-wise softmax of a (rows, cols) matrix, numerically stabilized by
    /// max subtraction.
    pub fn softmax_rows(&mut self, x: VarId) -> VarId {
        let xs = self.value(x).shape().to_vec();
        assert_eq!(xs.len(), 2, "softmax_rows input must be rank 2");
        let (r, c) = (xs[0], xs[1]);
        let xv = self.value(x).view().into_dimensionality::<Ix2>().unwrap();
        let mut y = Array2::<f64>::zeros((r, c));
        for ri in 0..r {
            let row = xv.row(ri);
            let mx = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let mut denom = 0.0;
            for ci in 0..c {
                let e = (row[ci] - mx).exp();
                y[(ri, ci)] = e;
                denom += e;
            }
            for ci in 0..c {
                y[(ri, ci)] /= denom;
            }
        }
        self.push(
            y.into_dyn(),
            vec![x],
            Some(Box::new(move |g, _, out| {
                let yv = out.view().into_dimensionality::<Ix2>().unwrap();
                let gv = g.view().into_dimensionality::<Ix2>().unwrap();
                let mut gx = Array2::<f64>::zeros((r, c));
                for ri in 0..r {
                    let dot: f64 = (0..c).map(|ci| gv[(ri, ci)] * yv[(ri, ci)]).sum();
                    for ci in 0..c {
                        gx[(ri, ci)] = yv[(ri, ci)] * (gv[(ri, ci)] - dot);
                    }
                }
                vec![gx.into_dyn()]
            })),
        )
    }

    /// Bilinear resize of (N,C,H,W) to (out_h, out_w) with half-pixel corner
    /// alignment (align_corners = false).
    pub fn bilinear_resize(&mut self, x: VarId, out_h: usize, out_w: usize) -> VarId {
        let xs = self.value(x).shape().to_vec();
        assert_eq!(xs.len(), 4, "bilinear_resize input must be (N,C,H,W)");
        let (n, c, h, w) = (xs[0], xs[1], xs[2], xs[3]);
        let rows = bilinear_table(h, out_h);
        let cols = bilinear_table(w, out_w);

        let xv = self.value(x).view().into_dimensionality::<Ix4>().unwrap();
        let mut y = ArrayD::<f64>::zeros(IxDyn(&[n, c, out_h, out_w]));
        {
            let mut yv = y.view_mut().into_dimensionality::<Ix4>().unwrap();
            for ni in 0..n {
                for ci in 0..c {
                    for (oi, &(i0, i1, wi0, wi1)) in rows.iter().enumerate() {
                        for (oj, &(j0, j1, wj0, wj1)) in cols.iter().enumerate() {
                            yv[[ni, ci, oi, oj]] = wi0 * wj0 * xv[[ni, ci, i0, j0]]
                                + wi0 * wj1 * xv[[ni, ci, i0, j1]]
                                + wi1 * wj0 * xv[[ni, ci, i1, j0]]
                                + wi1 * wj1 * xv[[ni, ci, i1, j1]];
                        }
                    }
                }
            }
        }
        self.push(
            y,
            vec![x],
            Some(Box::new(move |g, parents, _| {
                let gv = g.view().into_dimensionality::<Ix4>().unwrap();
                let mut gx = ArrayD::<f64>::zeros(parents[0].raw_dim());
                {
                    let mut gxv = gx.view_mut().into_dimensionality::<Ix4>().unwrap();
                    for ni in 0..n {
                        for ci in 0..c {
                            for (oi, &(i0, i1, wi0, wi1)) in rows.iter().enumerate() {
                                for (oj, &(j0, j1, wj0, wj1)) in cols.iter().enumerate() {
                                    let gg = gv[[ni, ci, oi, oj]];
                                    gxv[[ni, ci, i0, j0]] += wi0 * wj0 * gg;
                                    gxv[[ni, ci, i0, j1]] += wi0 * wj1 * gg;
                                    gxv[[ni, ci, i1, j0]] += wi1 * wj0 * gg;
                                    gxv[[ni, ci, i1, j1]] += wi1 * wj1 * gg;
                                }
                            }
                        }
                    }
                }
                vec![gx]
            })),
        )
    }

    /// Inverted dropout: zero with probability `p`, scale survivors by
    /// 1/(1-p). Call only in training mode; the mask comes from `rng`.
    pub fn dropout(&mut self, x: VarId, p: f64, rng: &mut ChaCha8Rng) -> VarId {
        assert!((0.0..1.0).contains(&p), "dropout probability {p} out of range");
        if p == 0.0 {
            return x;
        }
        let keep = 1.0 - p;
        let mask = self.value(x).mapv(|_| {
            if rng.gen::<f64>() < keep {
                1.0 / keep
            } else {
                0.0
            }
        });
        let y = self.value(x) * &mask;
        self.push(
            y,
            vec![x],
            Some(Box::new(move |g, _, _| vec![g * &mask])),
        )
    }
}
