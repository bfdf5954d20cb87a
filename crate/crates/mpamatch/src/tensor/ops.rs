//! Elementwise, reduction and matrix ops with their backward rules.

use super::{Data, Tensor};
use ndarray::{Array1, Array2, Axis, Ix1, Ix2};

fn as2(x: &Data) -> Array2<f64> {
    x.clone().into_dimensionality::<Ix2>().expect("expected 2-d tensor")
}

fn as1(x: &Data) -> Array1<f64> {
    x.clone().into_dimensionality::<Ix1>().expect("expected 1-d tensor")
}

impl Tensor {
    pub fn add(&self, other: &Tensor) -> Tensor {
        assert_eq!(self.shape(), other.shape(), "add: shape mismatch");
        let out = &*self.data() + &*other.data();
        Tensor::from_op(
            out,
            vec![self.clone(), other.clone()],
            Box::new(|g| vec![Some(g.clone()), Some(g.clone())]),
        )
    }

    pub fn sub(&self, other: &Tensor) -> Tensor {
        assert_eq!(self.shape(), other.shape(), "sub: shape mismatch");
        let out = &*self.data() - &*other.data();
        Tensor::from_op(
            out,
            vec![self.clone(), other.clone()],
            Box::new(|g| vec![Some(g.clone()), Some(-g.clone())]),
        )
    }

    pub fn mul(&self, other: &Tensor) -> Tensor {
        assert_eq!(self.shape(), other.shape(), "mul: shape mismatch");
        let out = &*self.data() * &*other.data();
        let a = self.clone();
        let b = other.clone();
        Tensor::from_op(
            out,
            vec![self.clone(), other.clone()],
            Box::new(move |g| vec![Some(g * &*b.data()), Some(g * &*a.data())]),
        )
    }

    pub fn div(&self, other: &Tensor) -> Tensor {
        assert_eq!(self.shape(), other.shape(), "div: shape mismatch");
        let out = &*self.data() / &*other.data();
        let a = self.clone();
        let b = other.clone();
        Tensor::from_op(
            out,
            vec![self.clone(), other.clone()],
            Box::new(move |g| {
                let bd = b.data();
                let da = g / &*bd;
                let db = -(g * &*a.data()) / (&*bd * &*bd);
                vec![Some(da), Some(db)]
            }),
        )
    }

    pub fn scale(&self, c: f64) -> Tensor {
        let out = self.to_data() * c;
        Tensor::from_op(out, vec![self.clone()], Box::new(move |g| vec![Some(g * c)]))
    }

    pub fn add_scalar(&self, c: f64) -> Tensor {
        let out = self.to_data() + c;
        Tensor::from_op(out, vec![self.clone()], Box::new(|g| vec![Some(g.clone())]))
    }

    /// Elementwise product with a fixed array (masks, indicators).
    pub fn mul_const(&self, m: &Data) -> Tensor {
        assert_eq!(self.shape(), m.shape().to_vec(), "mul_const: shape mismatch");
        let out = &*self.data() * m;
        let m = m.clone();
        Tensor::from_op(out, vec![self.clone()], Box::new(move |g| vec![Some(g * &m)]))
    }

    pub fn relu(&self) -> Tensor {
        let x = self.to_data();
        let out = x.mapv(|v| v.max(0.0));
        Tensor::from_op(
            out,
            vec![self.clone()],
            Box::new(move |g| {
                let mut dx = g.clone();
                dx.zip_mut_with(&x, |gv, xv| {
                    if *xv <= 0.0 {
                        *gv = 0.0;
                    }
                });
                vec![Some(dx)]
            }),
        )
    }

    /// tanh-form GELU; the derivative below differentiates this exact form.
    pub fn gelu(&self) -> Tensor {
        const A: f64 = 0.7978845608028654; // sqrt(2/pi)
        const B: f64 = 0.044715;
        let x = self.to_data();
        let out = x.mapv(|v| 0.5 * v * (1.0 + (A * (v + B * v * v * v)).tanh()));
        Tensor::from_op(
            out,
            vec![self.clone()],
            Box::new(move |g| {
                let dx = ndarray::Zip::from(g).and(&x).map_collect(|gv, xv| {
                    let u = A * (xv + B * xv * xv * xv);
                    let t = u.tanh();
                    let du = A * (1.0 + 3.0 * B * xv * xv);
                    gv * (0.5 * (1.0 + t) + 0.5 * xv * (1.0 - t * t) * du)
                });
                vec![Some(dx)]
            }),
        )
    }

    /// ln(max(x, floor)) — keeps probability logs finite.
    pub fn ln_stable(&self, floor: f64) -> Tensor {
        let x = self.to_data();
        let out = x.mapv(|v| v.max(floor).ln());
        Tensor::from_op(
            out,
            vec![self.clone()],
            Box::new(move |g| {
                let dx = ndarray::Zip::from(g)
                    .and(&x)
                    .map_collect(|gv, xv| gv / xv.max(floor));
                vec![Some(dx)]
            }),
        )
    }

    pub fn sum_all(&self) -> Tensor {
        let s = self.data().sum();
        let shape = self.shape();
        Tensor::from_op(
            Data::from_elem(ndarray::IxDyn(&[1]), s),
            vec![self.clone()],
            Box::new(move |g| {
                let gv = g[[0]];
                vec![Some(Data::from_elem(ndarray::IxDyn(&shape), gv))]
            }),
        )
    }

    pub fn mean_all(&self) -> Tensor {
        let n = self.len() as f64;
        self.sum_all().scale(1.0 / n)
    }

    /// Sum over one axis; the axis is removed from the output shape.
    pub fn sum_axis(&self, axis: usize) -> Tensor {
        let out = self.data().sum_axis(Axis(axis));
        let shape = self.shape();
        Tensor::from_op(
            out.into_dyn(),
            vec![self.clone()],
            Box::new(move |g| {
                let expanded = g.clone().insert_axis(Axis(axis));
                let b = expanded
                    .broadcast(ndarray::IxDyn(&shape))
                    .expect("sum_axis backward broadcast")
                    .to_owned();
                vec![Some(b)]
            }),
        )
    }

    pub fn mean_axis(&self, axis: usize) -> Tensor {
        let n = self.shape()[axis] as f64;
        self.sum_axis(axis).scale(1.0 / n)
    }

    pub fn reshape(&self, shape: &[usize]) -> Tensor {
        let old: Vec<usize> = self.shape();
        assert_eq!(
            old.iter().product::<usize>(),
            shape.iter().product::<usize>(),
            "reshape: element count mismatch"
        );
        let flat: Vec<f64> = self.data().iter().cloned().collect();
        let out = Data::from_shape_vec(ndarray::IxDyn(shape), flat).unwrap();
        Tensor::from_op(
            out,
            vec![self.clone()],
            Box::new(move |g| {
                let flat: Vec<f64> = g.iter().cloned().collect();
                vec![Some(Data::from_shape_vec(ndarray::IxDyn(&old), flat).unwrap())]
            }),
        )
    }

    pub fn permute_axes(&self, perm: &[usize]) -> Tensor {
        let perm = perm.to_vec();
        let out = self
            .to_data()
            .permuted_axes(perm.clone())
            .as_standard_layout()
            .to_owned();
        let mut inverse = vec![0usize; perm.len()];
        for (i, &p) in perm.iter().enumerate() {
            inverse[p] = i;
        }
        Tensor::from_op(
            out,
            vec![self.clone()],
            Box::new(move |g| {
                let back = g
                    .clone()
                    .permuted_axes(inverse.clone())
                    .as_standard_layout()
                    .to_owned();
                vec![Some(back)]
            }),
        )
    }

    /// 2-d matrix product.
    pub fn matmul(&self, other: &Tensor) -> Tensor {
        let a = as2(&self.data());
        let b = as2(&other.data());
        assert_eq!(a.ncols(), b.nrows(), "matmul: inner dimension mismatch");
        let out = a.dot(&b).into_dyn();
        let lhs = self.clone();
        let rhs = other.clone();
        Tensor::from_op(
            out,
            vec![self.clone(), other.clone()],
            Box::new(move |g| {
                let g2 = as2(g);
                let a = as2(&lhs.data());
                let b = as2(&rhs.data());
                let da = g2.dot(&b.t()).into_dyn();
                let db = a.t().dot(&g2).into_dyn();
                vec![Some(da), Some(db)]
            }),
        )
    }

    /// Rows of 2-d input plus a bias vector.
    pub fn add_bias_rows(&self, bias: &Tensor) -> Tensor {
        let x = as2(&self.data());
        let b = as1(&bias.data());
        assert_eq!(x.ncols(), b.len(), "add_bias_rows: width mismatch");
        let out = (&x + &b).into_dyn();
        Tensor::from_op(
            out,
            vec![self.clone(), bias.clone()],
            Box::new(move |g| {
                let g2 = as2(g);
                let db = g2.sum_axis(Axis(0)).into_dyn();
                vec![Some(g.clone()), Some(db)]
            }),
        )
    }

    pub fn softmax_axis(&self, axis: usize) -> Tensor {
        let x = self.to_data();
        let max = x.fold_axis(Axis(axis), f64::NEG_INFINITY, |a, b| a.max(*b));
        let shifted = &x - &max.insert_axis(Axis(axis));
        let e = shifted.mapv(f64::exp);
        let denom = e.sum_axis(Axis(axis)).insert_axis(Axis(axis));
        let y = &e / &denom;
        let y_saved = y.clone();
        Tensor::from_op(
            y,
            vec![self.clone()],
            Box::new(move |g| {
                let dot = (g * &y_saved).sum_axis(Axis(axis)).insert_axis(Axis(axis));
                let dx = (g - &dot) * &y_saved;
                vec![Some(dx)]
            }),
        )
    }

    pub fn log_softmax_axis(&self, axis: usize) -> Tensor {
        let x = self.to_data();
        let max = x.fold_axis(Axis(axis), f64::NEG_INFINITY, |a, b| a.max(*b));
        let shifted = &x - &max.insert_axis(Axis(axis));
        let lse = shifted
            .mapv(f64::exp)
            .sum_axis(Axis(axis))
            .mapv(f64::ln)
            .insert_axis(Axis(axis));
        let y = &shifted - &lse;
        let softmax = y.mapv(f64::exp);
        Tensor::from_op(
            y,
            vec![self.clone()],
            Box::new(move |g| {
                let gsum = g.sum_axis(Axis(axis)).insert_axis(Axis(axis));
                let dx = g - &(&softmax * &gsum);
                vec![Some(dx)]
            }),
        )
    }

    /// Row-wise L2 normalization of a 2-d tensor. Rows with norm below
    /// `ZERO_NORM_EPS` map to zero rows (and get zero gradient).
    pub fn l2_normalize_rows(&self) -> Tensor {
        const ZERO_NORM_EPS: f64 = 1e-12;
        let x = as2(&self.data());
        let mut y = x.clone();
        let mut norms = Array1::<f64>::zeros(x.nrows());
        for (i, mut row) in y.axis_iter_mut(Axis(0)).enumerate() {
            let n = row.iter().map(|v| v * v).sum::<f64>().sqrt();
            norms[i] = n;
            if n < ZERO_NORM_EPS {
                row.fill(0.0);
            } else {
                row.mapv_inplace(|v| v / n);
            }
        }
        let y_saved = y.clone();
        Tensor::from_op(
            y.into_dyn(),
            vec![self.clone()],
            Box::new(move |g| {
                let g2 = as2(g);
                let mut dx = Array2::<f64>::zeros(g2.raw_dim());
                for i in 0..g2.nrows() {
                    let n = norms[i];
                    if n < ZERO_NORM_EPS {
                        continue;
                    }
                    let yi = y_saved.row(i);
                    let gi = g2.row(i);
                    let dot = gi.dot(&yi);
                    for j in 0..g2.ncols() {
                        dx[[i, j]] = (gi[j] - yi[j] * dot) / n;
                    }
                }
                vec![Some(dx.into_dyn())]
            }),
        )
    }

    /// Per-row log-sum-exp restricted to entries where `mask != 0`.
    /// Every row must select at least one entry.
    pub fn masked_logsumexp_rows(&self, mask: &Data) -> Tensor {
        let z = as2(&self.data());
        let m = as2(mask);
        assert_eq!(z.shape(), m.shape(), "masked_logsumexp_rows: shape mismatch");
        let n = z.nrows();
        let mut out = Array1::<f64>::zeros(n);
        for i in 0..n {
            let mut mx = f64::NEG_INFINITY;
            for j in 0..z.ncols() {
                if m[[i, j]] != 0.0 {
                    mx = mx.max(z[[i, j]]);
                }
            }
            debug_assert!(mx.is_finite(), "masked_logsumexp_rows: empty mask row {i}");
            let mut s = 0.0;
            for j in 0..z.ncols() {
                if m[[i, j]] != 0.0 {
                    s += (z[[i, j]] - mx).exp();
                }
            }
            out[i] = mx + s.ln();
        }
        let lse = out.clone();
        let mask_saved = m.clone();
        let z_saved = z.clone();
        Tensor::from_op(
            out.into_dyn(),
            vec![self.clone()],
            Box::new(move |g| {
                let g1 = as1(g);
                let mut dz = Array2::<f64>::zeros(z_saved.raw_dim());
                for i in 0..z_saved.nrows() {
                    for j in 0..z_saved.ncols() {
                        if mask_saved[[i, j]] != 0.0 {
                            dz[[i, j]] = g1[i] * (z_saved[[i, j]] - lse[i]).exp();
                        }
                    }
                }
                vec![Some(dz.into_dyn())]
            }),
        )
    }

    /// out[i] = x[i, idx[i]] for a 2-d input.
    pub fn gather_rows(&self, idx: &[usize]) -> Tensor {
        let x = as2(&self.data());
        assert_eq!(x.nrows(), idx.len(), "gather_rows: index length mismatch");
        let mut out = Array1::<f64>::zeros(idx.len());
        for (i, &j) in idx.iter().enumerate() {
            assert!(j < x.ncols(), "gather_rows: index {j} out of range");
            out[i] = x[[i, j]];
        }
        let idx = idx.to_vec();
        let shape = (x.nrows(), x.ncols());
        Tensor::from_op(
            out.into_dyn(),
            vec![self.clone()],
            Box::new(move |g| {
                let g1 = as1(g);
                let mut dx = Array2::<f64>::zeros(shape);
                for (i, &j) in idx.iter().enumerate() {
                    dx[[i, j]] = g1[i];
                }
                vec![Some(dx.into_dyn())]
            }),
        )
    }

    /// Horizontal concatenation of two 2-d tensors with equal row counts.
    pub fn concat_cols(&self, other: &Tensor) -> Tensor {
        let a = as2(&self.data());
        let b = as2(&other.data());
        assert_eq!(a.nrows(), b.nrows(), "concat_cols: row count mismatch");
        let out = ndarray::concatenate(Axis(1), &[a.view(), b.view()]).unwrap();
        let wa = a.ncols();
        Tensor::from_op(
            out.into_dyn(),
            vec![self.clone(), other.clone()],
            Box::new(move |g| {
                let g2 = as2(g);
                let da = g2.slice(ndarray::s![.., ..wa]).to_owned().into_dyn();
                let db = g2.slice(ndarray::s![.., wa..]).to_owned().into_dyn();
                vec![Some(da), Some(db)]
            }),
        )
    }

    /// Column slice [start, start+len) of a 2-d tensor.
    pub fn slice_cols(&self, start: usize, len: usize) -> Tensor {
        let x = as2(&self.data());
        assert!(start + len <= x.ncols(), "slice_cols: out of range");
        let out = x.slice(ndarray::s![.., start..start + len]).to_owned();
        let shape = (x.nrows(), x.ncols());
        Tensor::from_op(
            out.into_dyn(),
            vec![self.clone()],
            Box::new(move |g| {
                let g2 = as2(g);
                let mut dx = Array2::<f64>::zeros(shape);
                dx.slice_mut(ndarray::s![.., start..start + len]).assign(&g2);
                vec![Some(dx.into_dyn())]
            }),
        )
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::test_util::fd_check_scalar;
    use ndarray::{arr1, arr2};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn rand_data(shape: &[usize], seed: u64) -> Data {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Data::from_shape_fn(ndarray::IxDyn(shape), |_| rng.gen_range(-1.5..1.5))
    }

    #[test]
    fn matmul_values() {
        let a = Tensor::constant(arr2(&[[1.0, 2.0], [3.0, 4.0]]).into_dyn());
        let b = Tensor::constant(arr2(&[[5.0], [6.0]]).into_dyn());
        let c = a.matmul(&b);
        assert_eq!(c.to_data().as_slice().unwrap(), &[17.0, 39.0]);
    }

    #[test]
    fn softmax_rows_sum_to_one() {
        let x = Tensor::constant(rand_data(&[4, 7], 3));
        let y = x.softmax_axis(1).to_data();
        for row in as2(&y).axis_iter(Axis(0)) {
            assert!((row.sum() - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn grad_chain_matches_finite_differences() {
        // A lumped graph touching most primitives.
        let x = Tensor::param(rand_data(&[3, 4], 11));
        let w = Tensor::param(rand_data(&[4, 5], 12));
        let b = Tensor::param(rand_data(&[5], 13));
        let forward = || {
            let h = x.matmul(&w).add_bias_rows(&b).gelu();
            let p = h.log_softmax_axis(1);
            let q = h.softmax_axis(1);
            let n = h.l2_normalize_rows();
            p.sum_all()
                .add(&q.mean_all())
                .add(&n.mul(&n).sum_all())
                .add(&h.relu().mean_all())
        };
        for t in [&x, &w, &b] {
            fd_check_scalar(t, &forward, 1e-5, 1e-6);
        }
    }

    #[test]
    fn masked_logsumexp_and_gather_grads() {
        let z = Tensor::param(rand_data(&[5, 6], 21));
        let mut mask = Data::from_elem(ndarray::IxDyn(&[5, 6]), 0.0);
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        for i in 0..5 {
            mask[[i, rng.gen_range(0..6)]] = 1.0;
            mask[[i, rng.gen_range(0..6)]] = 1.0;
            mask[[i, i]] = 1.0;
        }
        let idx = vec![0usize, 1, 2, 3, 4];
        let forward = || {
            let lse = z.masked_logsumexp_rows(&mask);
            let picked = z.gather_rows(&idx);
            lse.sub(&picked).mean_all()
        };
        fd_check_scalar(&z, &forward, 1e-5, 1e-6);
    }

    #[test]
    fn structural_op_grads() {
        let x = Tensor::param(rand_data(&[2, 3, 4], 31));
        let y = Tensor::param(rand_data(&[6, 4], 32));
        let forward = || {
            let a = x.permute_axes(&[2, 0, 1]).reshape(&[4, 6]);
            let b = a.matmul(&y).slice_cols(1, 2);
            let c = b.concat_cols(&b).sum_axis(1);
            c.mul(&c).mean_all()
        };
        fd_check_scalar(&x, &forward, 1e-5, 1e-6);
        fd_check_scalar(&y, &forward, 1e-5, 1e-6);
    }

    #[test]
    fn zero_rows_normalize_to_zero() {
        let x = Tensor::constant(arr2(&[[0.0, 0.0], [3.0, 4.0]]).into_dyn());
        let y = x.l2_normalize_rows().to_data();
        let y = as2(&y);
        assert_eq!(y[[0, 0]], 0.0);
        assert_eq!(y[[0, 1]], 0.0);
        assert!((y[[1, 0]] - 0.6).abs() < 1e-12);
        assert!((y[[1, 1]] - 0.8).abs() < 1e-12);
    }

    #[test]
    fn div_and_ln_grads() {
        let a = Tensor::param(arr1(&[0.5, 1.5, 2.5]).into_dyn());
        let b = Tensor::param(arr1(&[1.2, 0.7, 3.0]).into_dyn());
        let forward = || a.div(&b).ln_stable(1e-12).sum_all();
        fd_check_scalar(&a, &forward, 1e-6, 1e-6);
        fd_check_scalar(&b, &forward, 1e-6, 1e-6);
    }
}
