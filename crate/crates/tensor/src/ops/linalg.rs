use crate::element::Real;
use crate::error::{shape_err, Result};
use crate::tensor::Tensor;

/// `c[m×p] += a[m×k] · b[k×p]`
fn gemm_acc<T: Real>(a: &[T], b: &[T], c: &mut [T], m: usize, k: usize, p: usize) {
    for i in 0..m {
        let crow = &mut c[i * p..(i + 1) * p];
        for (kk, &av) in a[i * k..(i + 1) * k].iter().enumerate() {
            if av == T::zero() {
                continue;
            }
            let brow = &b[kk * p..(kk + 1) * p];
            for (cv, &bv) in crow.iter_mut().zip(brow) {
                *cv += av * bv;
            }
        }
    }
}

/// `c[m×k] += g[m×p] · b[k×p]ᵀ`
fn gemm_nt_acc<T: Real>(g: &[T], b: &[T], c: &mut [T], m: usize, k: usize, p: usize) {
    for i in 0..m {
        let grow = &g[i * p..(i + 1) * p];
        for kk in 0..k {
            let brow = &b[kk * p..(kk + 1) * p];
            let mut s = T::zero();
            for (&gv, &bv) in grow.iter().zip(brow) {
                s += gv * bv;
            }
            c[i * k + kk] += s;
        }
    }
}

/// `c[k×p] += a[m×k]ᵀ · g[m×p]`
fn gemm_tn_acc<T: Real>(a: &[T], g: &[T], c: &mut [T], m: usize, k: usize, p: usize) {
    for i in 0..m {
        let grow = &g[i * p..(i + 1) * p];
        for (kk, &av) in a[i * k..(i + 1) * k].iter().enumerate() {
            if av == T::zero() {
                continue;
            }
            let crow = &mut c[kk * p..(kk + 1) * p];
            for (cv, &gv) in crow.iter_mut().zip(grow) {
                *cv += av * gv;
            }
        }
    }
}

impl<T: Real> Tensor<T> {
    /// Batched matrix product `[..., M, K] · [..., K, P]`. The right operand
    /// may also be a plain `[K, P]` matrix shared across the batch.
    pub fn matmul(&self, other: &Tensor<T>) -> Result<Tensor<T>> {
        let (sa, sb) = (self.shape(), other.shape());
        if sa.len() < 2 || sb.len() < 2 {
            return Err(shape_err(
                "matmul",
                format!("{sa:?} · {sb:?}: need rank ≥ 2"),
            ));
        }
        let (m, k) = (sa[sa.len() - 2], sa[sa.len() - 1]);
        let (k2, p) = (sb[sb.len() - 2], sb[sb.len() - 1]);
        let batch_a = &sa[..sa.len() - 2];
        let batch_b = &sb[..sb.len() - 2];
        let shared_b = batch_b.is_empty();
        if k != k2 || (!shared_b && batch_a != batch_b) {
            return Err(shape_err("matmul", format!("{sa:?} · {sb:?}")));
        }
        let batch: usize = batch_a.iter().product();
        let mut out_shape = batch_a.to_vec();
        out_shape.extend([m, p]);
        let mut data = vec![T::zero(); batch * m * p];
        {
            let (da, db) = (self.data(), other.data());
            if shared_b {
                gemm_acc(&da, &db, &mut data, batch * m, k, p);
            } else {
                for bi in 0..batch {
                    gemm_acc(
                        &da[bi * m * k..(bi + 1) * m * k],
                        &db[bi * k * p..(bi + 1) * k * p],
                        &mut data[bi * m * p..(bi + 1) * m * p],
                        m,
                        k,
                        p,
                    );
                }
            }
        }
        let (pa, pb) = (self.clone(), other.clone());
        let (ta, tb) = (self.tracks_grad(), other.tracks_grad());
        Tensor::from_op(
            "matmul",
            out_shape,
            data,
            vec![self.clone(), other.clone()],
            Box::new(move |g, _| {
                let (da, db) = (pa.data(), pb.data());
                let ga = ta.then(|| {
                    let mut ga = vec![T::zero(); da.len()];
                    if shared_b {
                        gemm_nt_acc(g, &db, &mut ga, batch * m, k, p);
                    } else {
                        for bi in 0..batch {
                            gemm_nt_acc(
                                &g[bi * m * p..(bi + 1) * m * p],
                                &db[bi * k * p..(bi + 1) * k * p],
                                &mut ga[bi * m * k..(bi + 1) * m * k],
                                m,
                                k,
                                p,
                            );
                        }
                    }
                    ga
                });
                let gb = tb.then(|| {
                    let mut gb = vec![T::zero(); db.len()];
                    if shared_b {
                        gemm_tn_acc(&da, g, &mut gb, batch * m, k, p);
                    } else {
                        for bi in 0..batch {
                            gemm_tn_acc(
                                &da[bi * m * k..(bi + 1) * m * k],
                                &g[bi * m * p..(bi + 1) * m * p],
                                &mut gb[bi * k * p..(bi + 1) * k * p],
                                m,
                                k,
                                p,
                            );
                        }
                    }
                    gb
                });
                vec![ga, gb]
            }),
        )
    }

    /// `x · weight + bias` over the last dimension; `weight` is `[in, out]`.
    pub fn linear(&self, weight: &Tensor<T>, bias: Option<&Tensor<T>>) -> Result<Tensor<T>> {
        let y = self.matmul(weight)?;
        match bias {
            Some(b) => y.add(b),
            None => Ok(y),
        }
    }
}
