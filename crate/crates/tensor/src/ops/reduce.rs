use crate::element::Real;
use crate::error::{arg_err, Result};
use crate::tensor::Tensor;

impl<T: Real> Tensor<T> {
    /// Sum of all elements, shape `[1]`.
    pub fn sum_all(&self) -> Result<Tensor<T>> {
        let s: T = self.data().iter().copied().sum();
        let n = self.numel();
        Tensor::from_op(
            "sum_all",
            vec![1],
            vec![s],
            vec![self.clone()],
            Box::new(move |g, _| vec![Some(vec![g[0]; n])]),
        )
    }

    pub fn mean_all(&self) -> Result<Tensor<T>> {
        self.sum_all()?.mul_scalar(1.0 / self.numel() as f64)
    }

    /// Sums every dimension after the first `keep`, giving shape
    /// `shape[..keep]`.
    pub fn sum_trailing(&self, keep: usize) -> Result<Tensor<T>> {
        if keep == 0 {
            return self.sum_all();
        }
        if keep > self.ndim() {
            return Err(arg_err(
                "sum_trailing",
                format!("keep {keep} dims of {:?}", self.shape()),
            ));
        }
        let out_shape = self.shape()[..keep].to_vec();
        let outer: usize = out_shape.iter().product();
        let inner = self.numel() / outer;
        let data = {
            let d = self.data();
            d.chunks(inner).map(|c| c.iter().copied().sum()).collect()
        };
        Tensor::from_op(
            "sum_trailing",
            out_shape,
            data,
            vec![self.clone()],
            Box::new(move |g, _| {
                let mut gx = Vec::with_capacity(outer * inner);
                for &gi in g {
                    gx.extend(std::iter::repeat_n(gi, inner));
                }
                vec![Some(gx)]
            }),
        )
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sums() {
        let x = Tensor::<f64>::from_vec((1..=6).map(f64::from).collect(), &[2, 3]).unwrap();
        assert_eq!(x.sum_all().unwrap().item(), 21.0);
        assert_eq!(x.mean_all().unwrap().item(), 3.5);
        assert_eq!(x.sum_trailing(1).unwrap().to_vec(), vec![6.0, 15.0]);
        assert_eq!(x.sum_trailing(2).unwrap().to_vec(), x.to_vec());
    }
}
