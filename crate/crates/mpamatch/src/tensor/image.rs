//! Image-shaped ops: convolution, bilinear resampling, normalization.
//! Layout is channels-first (C, H, W) throughout; batching happens one
//! image at a time in the training loop.

use super::{Data, Tensor};
use ndarray::{Array1, Array2, Array3, Array4, Axis, Ix1, Ix3, Ix4};

fn as3(x: &Data) -> Array3<f64> {
    x.clone().into_dimensionality::<Ix3>().expect("expected 3-d tensor")
}

fn as4(x: &Data) -> Array4<f64> {
    x.clone().into_dimensionality::<Ix4>().expect("expected 4-d tensor")
}

fn im2col(x: &Array3<f64>, kh: usize, kw: usize, pad_h: usize, pad_w: usize) -> Array2<f64> {
    let (cin, h, w) = x.dim();
    let mut col = Array2::<f64>::zeros((cin * kh * kw, h * w));
    for c in 0..cin {
        for ky in 0..kh {
            for kx in 0..kw {
                let row = (c * kh + ky) * kw + kx;
                for oy in 0..h {
                    let iy = oy as isize + ky as isize - pad_h as isize;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    for ox in 0..w {
                        let ix = ox as isize + kx as isize - pad_w as isize;
                        if ix < 0 || ix >= w as isize {
                            continue;
                        }
                        col[[row, oy * w + ox]] = x[[c, iy as usize, ix as usize]];
                    }
                }
            }
        }
    }
    col
}

fn col2im(
    col: &Array2<f64>,
    cin: usize,
    h: usize,
    w: usize,
    kh: usize,
    kw: usize,
    pad_h: usize,
    pad_w: usize,
) -> Array3<f64> {
    let mut x = Array3::<f64>::zeros((cin, h, w));
    for c in 0..cin {
        for ky in 0..kh {
            for kx in 0..kw {
                let row = (c * kh + ky) * kw + kx;
                for oy in 0..h {
                    let iy = oy as isize + ky as isize - pad_h as isize;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    for ox in 0..w {
                        let ix = ox as isize + kx as isize - pad_w as isize;
                        if ix < 0 || ix >= w as isize {
                            continue;
                        }
                        x[[c, iy as usize, ix as usize]] += col[[row, oy * w + ox]];
                    }
                }
            }
        }
    }
    x
}

/// Bilinear sampling weights for one output coordinate (half-pixel centers).
fn lerp_coords(out_i: usize, in_len: usize, out_len: usize) -> (usize, usize, f64) {
    if in_len == out_len {
        return (out_i, out_i, 0.0);
    }
    let scale = in_len as f64 / out_len as f64;
    let src = ((out_i as f64 + 0.5) * scale - 0.5).clamp(0.0, in_len as f64 - 1.0);
    let lo = src.floor() as usize;
    let hi = (lo + 1).min(in_len - 1);
    (lo, hi, src - lo as f64)
}

impl Tensor {
    /// 2-d convolution, stride 1, zero padding `(kh/2, kw/2)` so odd
    /// kernels preserve the spatial size. Input (Cin,H,W), weight
    /// (Cout,Cin,kh,kw), bias (Cout).
    pub fn conv2d(&self, weight: &Tensor, bias: &Tensor) -> Tensor {
        let x = as3(&self.data());
        let w = as4(&weight.data());
        let b = bias
            .to_data()
            .into_dimensionality::<Ix1>()
            .expect("conv2d: bias must be 1-d");
        let (cin, h, wd) = x.dim();
        let (cout, wcin, kh, kw) = w.dim();
        assert_eq!(cin, wcin, "conv2d: channel mismatch");
        assert_eq!(b.len(), cout, "conv2d: bias length mismatch");
        let (pad_h, pad_w) = (kh / 2, kw / 2);
        let col = im2col(&x, kh, kw, pad_h, pad_w);
        let w2 = w
            .to_shape((cout, cin * kh * kw))
            .expect("conv2d weight reshape")
            .to_owned();
        let mut out2 = w2.dot(&col);
        for (mut row, bv) in out2.axis_iter_mut(Axis(0)).zip(b.iter()) {
            row.mapv_inplace(|v| v + bv);
        }
        let out = out2.to_shape((cout, h, wd)).expect("conv2d output reshape").to_owned();
        let col_saved = col;
        let w2_saved = w2;
        Tensor::from_op(
            out.into_dyn(),
            vec![self.clone(), weight.clone(), bias.clone()],
            Box::new(move |g| {
                let g3 = as3(g);
                let g2 = g3
                    .to_shape((cout, h * wd))
                    .expect("conv2d grad reshape")
                    .to_owned();
                let dw2 = g2.dot(&col_saved.t());
                let dw = dw2
                    .to_shape((cout, cin, kh, kw))
                    .expect("conv2d dw reshape")
                    .to_owned();
                let db = g2.sum_axis(Axis(1));
                let dcol = w2_saved.t().dot(&g2);
                let dx = col2im(&dcol, cin, h, wd, kh, kw, pad_h, pad_w);
                vec![Some(dx.into_dyn()), Some(dw.into_dyn()), Some(db.into_dyn())]
            }),
        )
    }

    /// Bilinear resample of a (C,H,W) tensor to (C,out_h,out_w),
    /// half-pixel convention. Backward scatters with the same weights.
    pub fn bilinear_resize(&self, out_h: usize, out_w: usize) -> Tensor {
        let x = as3(&self.data());
        let (c, h, w) = x.dim();
        if h == out_h && w == out_w {
            // identity; keep graph simple
            return Tensor::from_op(
                self.to_data(),
                vec![self.clone()],
                Box::new(|g| vec![Some(g.clone())]),
            );
        }
        let ys: Vec<(usize, usize, f64)> = (0..out_h).map(|i| lerp_coords(i, h, out_h)).collect();
        let xs: Vec<(usize, usize, f64)> = (0..out_w).map(|i| lerp_coords(i, w, out_w)).collect();
        let mut out = Array3::<f64>::zeros((c, out_h, out_w));
        for ch in 0..c {
            for (oy, &(y0, y1, wy)) in ys.iter().enumerate() {
                for (ox, &(x0, x1, wx)) in xs.iter().enumerate() {
                    out[[ch, oy, ox]] = (1.0 - wy) * (1.0 - wx) * x[[ch, y0, x0]]
                        + (1.0 - wy) * wx * x[[ch, y0, x1]]
                        + wy * (1.0 - wx) * x[[ch, y1, x0]]
                        + wy * wx * x[[ch, y1, x1]];
                }
            }
        }
        Tensor::from_op(
            out.into_dyn(),
            vec![self.clone()],
            Box::new(move |g| {
                let g3 = as3(g);
                let mut dx = Array3::<f64>::zeros((c, h, w));
                for ch in 0..c {
                    for (oy, &(y0, y1, wy)) in ys.iter().enumerate() {
                        for (ox, &(x0, x1, wx)) in xs.iter().enumerate() {
                            let gv = g3[[ch, oy, ox]];
                            dx[[ch, y0, x0]] += (1.0 - wy) * (1.0 - wx) * gv;
                            dx[[ch, y0, x1]] += (1.0 - wy) * wx * gv;
                            dx[[ch, y1, x0]] += wy * (1.0 - wx) * gv;
                            dx[[ch, y1, x1]] += wy * wx * gv;
                        }
                    }
                }
                vec![Some(dx.into_dyn())]
            }),
        )
    }

    /// Group normalization over a (C,H,W) tensor with per-channel affine
    /// parameters. `groups` must divide C.
    pub fn group_norm(&self, groups: usize, gamma: &Tensor, beta: &Tensor, eps: f64) -> Tensor {
        let x = as3(&self.data());
        let (c, h, w) = x.dim();
        assert!(groups >= 1 && c % groups == 0, "group_norm: groups must divide channels");
        let gam = gamma.to_data().into_dimensionality::<Ix1>().unwrap();
        let bet = beta.to_data().into_dimensionality::<Ix1>().unwrap();
        assert_eq!(gam.len(), c, "group_norm: gamma length mismatch");
        assert_eq!(bet.len(), c, "group_norm: beta length mismatch");
        let cpg = c / groups;
        let gsize = (cpg * h * w) as f64;
        let mut xhat = Array3::<f64>::zeros((c, h, w));
        let mut inv_std = Array1::<f64>::zeros(groups);
        for g in 0..groups {
            let sl = x.slice(ndarray::s![g * cpg..(g + 1) * cpg, .., ..]);
            let mean = sl.sum() / gsize;
            let var = sl.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / gsize;
            let istd = 1.0 / (var + eps).sqrt();
            inv_std[g] = istd;
            let mut dst = xhat.slice_mut(ndarray::s![g * cpg..(g + 1) * cpg, .., ..]);
            dst.assign(&sl);
            dst.mapv_inplace(|v| (v - mean) * istd);
        }
        let mut out = xhat.clone();
        for ch in 0..c {
            let mut sl = out.slice_mut(ndarray::s![ch, .., ..]);
            sl.mapv_inplace(|v| v * gam[ch] + bet[ch]);
        }
        let xhat_saved = xhat;
        let gam_saved = gam;
        Tensor::from_op(
            out.into_dyn(),
            vec![self.clone(), gamma.clone(), beta.clone()],
            Box::new(move |gr| {
                let g3 = as3(gr);
                let mut dgamma = Array1::<f64>::zeros(c);
                let mut dbeta = Array1::<f64>::zeros(c);
                for ch in 0..c {
                    let gs = g3.slice(ndarray::s![ch, .., ..]);
                    let xs = xhat_saved.slice(ndarray::s![ch, .., ..]);
                    dgamma[ch] = (&gs * &xs).sum();
                    dbeta[ch] = gs.sum();
                }
                let mut dx = Array3::<f64>::zeros((c, h, w));
                for g in 0..groups {
                    let range = g * cpg..(g + 1) * cpg;
                    // dxhat = grad * gamma (per channel)
                    let mut dxhat = g3.slice(ndarray::s![range.clone(), .., ..]).to_owned();
                    for (i, ch) in range.clone().enumerate() {
                        dxhat
                            .slice_mut(ndarray::s![i, .., ..])
                            .mapv_inplace(|v| v * gam_saved[ch]);
                    }
                    let xh = xhat_saved.slice(ndarray::s![range.clone(), .., ..]);
                    let mean_dxhat = dxhat.sum() / gsize;
                    let mean_dxhat_xhat = (&dxhat * &xh).sum() / gsize;
                    let istd = inv_std[g];
                    let mut dst = dx.slice_mut(ndarray::s![range, .., ..]);
                    ndarray::Zip::from(&mut dst).and(&dxhat).and(&xh).for_each(
                        |d, &dxh, &xhv| {
                            *d = istd * (dxh - mean_dxhat - xhv * mean_dxhat_xhat);
                        },
                    );
                }
                vec![
                    Some(dx.into_dyn()),
                    Some(dgamma.into_dyn()),
                    Some(dbeta.into_dyn()),
                ]
            }),
        )
    }

    /// Layer normalization over the last axis of a (T,D) tensor.
    pub fn layer_norm(&self, gamma: &Tensor, beta: &Tensor, eps: f64) -> Tensor {
        let x = self
            .to_data()
            .into_dimensionality::<ndarray::Ix2>()
            .expect("layer_norm: expected 2-d input");
        let (t, d) = x.dim();
        let gam = gamma.to_data().into_dimensionality::<Ix1>().unwrap();
        let bet = beta.to_data().into_dimensionality::<Ix1>().unwrap();
        assert_eq!(gam.len(), d, "layer_norm: gamma length mismatch");
        let mut xhat = Array2::<f64>::zeros((t, d));
        let mut inv_std = Array1::<f64>::zeros(t);
        for i in 0..t {
            let row = x.row(i);
            let mean = row.sum() / d as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
            let istd = 1.0 / (var + eps).sqrt();
            inv_std[i] = istd;
            for j in 0..d {
                xhat[[i, j]] = (x[[i, j]] - mean) * istd;
            }
        }
        let mut out = xhat.clone();
        for j in 0..d {
            let mut col = out.column_mut(j);
            col.mapv_inplace(|v| v * gam[j] + bet[j]);
        }
        let xhat_saved = xhat;
        let gam_saved = gam;
        Tensor::from_op(
            out.into_dyn(),
            vec![self.clone(), gamma.clone(), beta.clone()],
            Box::new(move |gr| {
                let g2 = gr.clone().into_dimensionality::<ndarray::Ix2>().unwrap();
                let mut dgamma = Array1::<f64>::zeros(d);
                let mut dbeta = Array1::<f64>::zeros(d);
                for j in 0..d {
                    dgamma[j] = (&g2.column(j) * &xhat_saved.column(j)).sum();
                    dbeta[j] = g2.column(j).sum();
                }
                let mut dx = Array2::<f64>::zeros((t, d));
                for i in 0..t {
                    let mut dxhat = Array1::<f64>::zeros(d);
                    for j in 0..d {
                        dxhat[j] = g2[[i, j]] * gam_saved[j];
                    }
                    let mean_dxhat = dxhat.sum() / d as f64;
                    let mean_dxhat_xhat = dxhat
                        .iter()
                        .zip(xhat_saved.row(i))
                        .map(|(a, b)| a * b)
                        .sum::<f64>()
                        / d as f64;
                    for j in 0..d {
                        dx[[i, j]] = inv_std[i]
                            * (dxhat[j] - mean_dxhat - xhat_saved[[i, j]] * mean_dxhat_xhat);
                    }
                }
                vec![
                    Some(dx.into_dyn()),
                    Some(dgamma.into_dyn()),
                    Some(dbeta.into_dyn()),
                ]
            }),
        )
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::test_util::fd_check_scalar;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn rand_data(shape: &[usize], seed: u64) -> Data {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Data::from_shape_fn(ndarray::IxDyn(shape), |_| rng.gen_range(-1.0..1.0))
    }

    #[test]
    fn conv2d_matches_direct_loop() {
        let x = Tensor::constant(rand_data(&[2, 5, 4], 1));
        let w = Tensor::constant(rand_data(&[3, 2, 3, 3], 2));
        let b = Tensor::constant(rand_data(&[3], 3));
        let out = as3(&out_of(&x.conv2d(&w, &b)));
        let xv = as3(&x.to_data());
        let wv = as4(&w.to_data());
        let bv = b.to_data();
        for co in 0..3 {
            for oy in 0..5 {
                for ox in 0..4 {
                    let mut acc = bv[[co]];
                    for ci in 0..2 {
                        for ky in 0..3 {
                            for kx in 0..3 {
                                let iy = oy as isize + ky as isize - 1;
                                let ix = ox as isize + kx as isize - 1;
                                if iy >= 0 && iy < 5 && ix >= 0 && ix < 4 {
                                    acc += xv[[ci, iy as usize, ix as usize]]
                                        * wv[[co, ci, ky, kx]];
                                }
                            }
                        }
                    }
                    assert!((out[[co, oy, ox]] - acc).abs() < 1e-12);
                }
            }
        }
    }

    fn out_of(t: &Tensor) -> Data {
        t.to_data()
    }

    #[test]
    fn conv2d_grads() {
        let x = Tensor::param(rand_data(&[2, 4, 4], 11));
        let w = Tensor::param(rand_data(&[3, 2, 3, 3], 12));
        let b = Tensor::param(rand_data(&[3], 13));
        let forward = || x.conv2d(&w, &b).gelu().mean_all();
        for t in [&x, &w, &b] {
            fd_check_scalar(t, &forward, 1e-5, 1e-6);
        }
    }

    #[test]
    fn bilinear_resize_grads_and_upscale() {
        let x = Tensor::param(rand_data(&[2, 3, 3], 21));
        let forward = || {
            let up = x.bilinear_resize(6, 6);
            let down = up.bilinear_resize(2, 4);
            down.mul(&down).sum_all()
        };
        fd_check_scalar(&x, &forward, 1e-5, 1e-6);
    }

    #[test]
    fn resize_preserves_constant_images() {
        let x = Tensor::constant(Data::from_elem(ndarray::IxDyn(&[1, 4, 4]), 0.7));
        let y = x.bilinear_resize(9, 5).to_data();
        for v in y.iter() {
            assert!((v - 0.7).abs() < 1e-12);
        }
    }

    #[test]
    fn group_norm_grads() {
        let x = Tensor::param(rand_data(&[4, 3, 3], 31));
        let gamma = Tensor::param(rand_data(&[4], 32));
        let beta = Tensor::param(rand_data(&[4], 33));
        let forward = || {
            let y = x.group_norm(2, &gamma, &beta, 1e-5);
            y.mul(&y).mean_all()
        };
        for t in [&x, &gamma, &beta] {
            fd_check_scalar(t, &forward, 1e-5, 1e-5);
        }
    }

    #[test]
    fn layer_norm_grads() {
        let x = Tensor::param(rand_data(&[3, 6], 41));
        let gamma = Tensor::param(rand_data(&[6], 42));
        let beta = Tensor::param(rand_data(&[6], 43));
        let forward = || {
            let y = x.layer_norm(&gamma, &beta, 1e-5);
            y.gelu().mean_all()
        };
        for t in [&x, &gamma, &beta] {
            fd_check_scalar(t, &forward, 1e-5, 1e-5);
        }
    }
}
