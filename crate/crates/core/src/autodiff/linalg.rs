use crate::autodiff::tape::{Backward, Var};
use crate::error::{Error, Result};
use crate::real::Real;
use crate::tensor::Tensor;

/// Batched matrix product: `[.., m, k] x [.., k, n]`, or a shared 2-D right
/// operand `[k, n]`.
struct MatmulOp {
    batch: usize,
    m: usize,
    k: usize,
    n: usize,
    shared_rhs: bool,
}

impl<T: Real> Backward<T> for MatmulOp {
    fn backward(
        &self,
        inputs: &[&Tensor<T>],
        _output: &Tensor<T>,
        grad: &Tensor<T>,
        needs: &[bool],
    ) -> Result<Vec<Option<Tensor<T>>>> {
        let (a, b) = (inputs[0], inputs[1]);
        let MatmulOp { batch, m, k, n, .. } = *self;
        let g = grad.data();
        let rhs = |i: usize| if self.shared_rhs { 0 } else { i * k * n };
        let ga = needs[0].then(|| {
            let mut out = vec![T::zero(); a.len()];
            for i in 0..batch {
                // ga = g bᵀ
                T::gemm(
                    m,
                    n,
                    k,
                    T::one(),
                    &g[i * m * n..],
                    n as isize,
                    1,
                    &b.data()[rhs(i)..],
                    1,
                    n as isize,
                    T::zero(),
                    &mut out[i * m * k..],
                    k as isize,
                    1,
                );
            }
            Tensor::new(a.shape(), out)
        });
        let gb = needs[1].then(|| {
            let mut out = vec![T::zero(); b.len()];
            for i in 0..batch {
                // gb = aᵀ g
                let beta = if self.shared_rhs && i > 0 { T::one() } else { T::zero() };
                T::gemm(
                    k,
                    m,
                    n,
                    T::one(),
                    &a.data()[i * m * k..],
                    1,
                    k as isize,
                    &g[i * m * n..],
                    n as isize,
                    1,
                    beta,
                    &mut out[rhs(i)..],
                    n as isize,
                    1,
                );
            }
            Tensor::new(b.shape(), out)
        });
        Ok(vec![ga.transpose()?, gb.transpose()?])
    }
}

impl<'t, T: Real> Var<'t, T> {
    pub fn matmul(self, rhs: Var<'t, T>) -> Result<Var<'t, T>> {
        let (a, b) = (self.value(), rhs.value());
        let (sa, sb) = (a.shape(), b.shape());
        let err = || Error::shape("matmul", &[sa, sb]);
        if sa.len() < 2 || sb.len() < 2 {
            return Err(err());
        }
        let (m, k) = (sa[sa.len() - 2], sa[sa.len() - 1]);
        let (k2, n) = (sb[sb.len() - 2], sb[sb.len() - 1]);
        let batch_dims = &sa[..sa.len() - 2];
        let shared_rhs = sb.len() == 2;
        if k != k2 || (!shared_rhs && &sb[..sb.len() - 2] != batch_dims) {
            return Err(err());
        }
        let batch: usize = batch_dims.iter().product();
        let mut out = vec![T::zero(); batch * m * n];
        for i in 0..batch {
            let boff = if shared_rhs { 0 } else { i * k * n };
            T::gemm(
                m,
                k,
                n,
                T::one(),
                &a.data()[i * m * k..],
                k as isize,
                1,
                &b.data()[boff..],
                n as isize,
                1,
                T::zero(),
                &mut out[i * m * n..],
                n as isize,
                1,
            );
        }
        let mut shape = batch_dims.to_vec();
        shape.extend([m, n]);
        let value = Tensor::new(&shape, out)?;
        Ok(self.tape().push(
            value,
            &[self, rhs],
            MatmulOp {
                batch,
                m,
                k,
                n,
                shared_rhs,
            },
        ))
    }
}

#[cfg(test)]
mod tests {
    use crate::autodiff::tape::Tape;
    use crate::tensor::Tensor;

    #[test]
    fn batched_product() {
        let tape = Tape::<f64>::new();
        let a = tape.constant(Tensor::from_f64(&[2, 1, 2], &[1., 2., 3., 4.]).unwrap());
        let b = tape.constant(Tensor::from_f64(&[2, 2, 1], &[5., 6., 7., 8.]).unwrap());
        let c = a.matmul(b).unwrap().value();
        assert_eq!(c.shape(), &[2, 1, 1]);
        assert_eq!(c.data(), &[17., 53.]);
    }

    #[test]
    fn shape_errors() {
        let tape = Tape::<f64>::new();
        let a = tape.constant(Tensor::zeros(&[2, 3]));
        let b = tape.constant(Tensor::zeros(&[2, 3]));
        assert!(a.matmul(b).is_err());
    }
}
