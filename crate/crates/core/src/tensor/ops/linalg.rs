use crate::error::{Error, Result};
use crate::tensor::{numel_of, Scalar, Tensor};

impl<T: Scalar> Tensor<T> {
    /// Matrix product over the last two axes. Leading batch axes must match, or one side's
    /// batch must hold a single matrix that is reused for every batch entry.
    pub fn matmul(&self, other: &Tensor<T>) -> Result<Tensor<T>> {
        let (sa, sb) = (self.shape(), other.shape());
        if sa.len() < 2 || sb.len() < 2 {
            return Err(Error::shape(
                "matmul",
                format!("operands need rank >= 2, got {sa:?} and {sb:?}"),
            ));
        }
        let (m, k) = (sa[sa.len() - 2], sa[sa.len() - 1]);
        let (k2, p) = (sb[sb.len() - 2], sb[sb.len() - 1]);
        if k != k2 {
            return Err(Error::shape(
                "matmul",
                format!("inner extents differ: {sa:?} x {sb:?}"),
            ));
        }
        let (lead_a, lead_b) = (&sa[..sa.len() - 2], &sb[..sb.len() - 2]);
        let (ba, bb) = (numel_of(lead_a), numel_of(lead_b));
        let (batch, lead) = if lead_a == lead_b {
            (ba, lead_a.to_vec())
        } else if ba == 1 {
            (bb, lead_b.to_vec())
        } else if bb == 1 {
            (ba, lead_a.to_vec())
        } else {
            return Err(Error::shape(
                "matmul",
                format!("batch axes not broadcastable: {sa:?} x {sb:?}"),
            ));
        };
        let (a_step, b_step) = (
            if ba == 1 { 0 } else { m * k },
            if bb == 1 { 0 } else { k * p },
        );
        let (ad, bd) = (self.data(), other.data());
        let mut out = vec![T::zero(); batch * m * p];
        for i in 0..batch {
            T::gemm(
                m,
                k,
                p,
                &ad[i * a_step..],
                false,
                &bd[i * b_step..],
                false,
                &mut out[i * m * p..(i + 1) * m * p],
                false,
            );
        }
        let mut shape = lead;
        shape.extend([m, p]);
        let (a, b) = (self.clone(), other.clone());
        Ok(Tensor::from_op(
            "matmul",
            shape,
            out,
            vec![self.clone(), other.clone()],
            move |_, g| {
                let (ad, bd) = (a.data(), b.data());
                let ga = a.requires_grad().then(|| {
                    let mut ga = vec![T::zero(); ad.len()];
                    for i in 0..batch {
                        let dst = &mut ga[i * a_step..i * a_step + m * k];
                        T::gemm(
                            m,
                            p,
                            k,
                            &g[i * m * p..],
                            false,
                            &bd[i * b_step..],
                            true,
                            dst,
                            true,
                        );
                    }
                    ga
                });
                let gb = b.requires_grad().then(|| {
                    let mut gb = vec![T::zero(); bd.len()];
                    for i in 0..batch {
                        let dst = &mut gb[i * b_step..i * b_step + k * p];
                        T::gemm(
                            k,
                            m,
                            p,
                            &ad[i * a_step..],
                            true,
                            &g[i * m * p..],
                            false,
                            dst,
                            true,
                        );
                    }
                    gb
                });
                vec![ga, gb]
            },
        ))
    }

    /// `x [N, Cin] . weight[Cout, Cin]^T + bias[Cout]`.
    pub fn fully_connected(
        &self,
        weight: &Tensor<T>,
        bias: Option<&Tensor<T>>,
    ) -> Result<Tensor<T>> {
        if self.rank() != 2 || weight.rank() != 2 || weight.dim(1) != self.dim(1) {
            return Err(Error::shape(
                "fully_connected",
                format!("input {:?} vs weight {:?}", self.shape(), weight.shape()),
            ));
        }
        let (n, cin, cout) = (self.dim(0), self.dim(1), weight.dim(0));
        if let Some(b) = bias {
            if b.shape() != [cout] {
                return Err(Error::shape(
                    "fully_connected",
                    format!("bias {:?} vs {cout} outputs", b.shape()),
                ));
            }
        }
        let mut out = vec![T::zero(); n * cout];
        T::gemm(
            n,
            cin,
            cout,
            self.data(),
            false,
            weight.data(),
            true,
            &mut out,
            false,
        );
        if let Some(b) = bias {
            for row in out.chunks_mut(cout) {
                row.iter_mut().zip(b.data()).for_each(|(o, &bv)| *o += bv);
            }
        }
        let mut parents = vec![self.clone(), weight.clone()];
        parents.extend(bias.cloned());
        let (x, w, has_bias) = (self.clone(), weight.clone(), bias.is_some());
        Ok(Tensor::from_op(
            "fully_connected",
            vec![n, cout],
            out,
            parents,
            move |_, g| {
                let gx = x.requires_grad().then(|| {
                    let mut gx = vec![T::zero(); n * cin];
                    T::gemm(n, cout, cin, g, false, w.data(), false, &mut gx, false);
                    gx
                });
                let gw = w.requires_grad().then(|| {
                    let mut gw = vec![T::zero(); cout * cin];
                    T::gemm(cout, n, cin, g, true, x.data(), false, &mut gw, false);
                    gw
                });
                let mut grads = vec![gx, gw];
                if has_bias {
                    let mut gb = vec![T::zero(); cout];
                    for row in g.chunks(cout) {
                        gb.iter_mut().zip(row).for_each(|(b, &v)| *b += v);
                    }
                    grads.push(Some(gb));
                }
                grads
            },
        ))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn matmul_hand_example() {
        let a = Tensor::<f64>::new(vec![1.0, 2.0], &[1, 2]).unwrap();
        let b = Tensor::<f64>::new(vec![3.0, 4.0], &[2, 1]).unwrap();
        assert_eq!(a.matmul(&b).unwrap().data(), &[11.0]);
    }

    #[test]
    fn identity_and_zero() {
        let a = Tensor::<f64>::from_fn(&[3, 3], |i| i as f64 - 4.0);
        let eye = Tensor::<f64>::from_fn(&[3, 3], |i| if i % 4 == 0 { 1.0 } else { 0.0 });
        assert_eq!(eye.matmul(&a).unwrap().data(), a.data());
        let z = Tensor::<f64>::zeros(&[2, 3]);
        assert!(z.matmul(&a).unwrap().data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn inner_mismatch_is_invalid_shape() {
        let a = Tensor::<f64>::zeros(&[2, 3]);
        let b = Tensor::<f64>::zeros(&[2, 3]);
        assert!(matches!(a.matmul(&b), Err(Error::InvalidShape { .. })));
    }

    #[test]
    fn batched_with_shared_rhs() {
        let a = Tensor::<f64>::from_fn(&[2, 1, 2], |i| i as f64);
        let b = Tensor::<f64>::new(vec![1.0, 1.0], &[2, 1]).unwrap();
        let c = a.matmul(&b).unwrap();
        assert_eq!(c.shape(), &[2, 1, 1]);
        assert_eq!(c.data(), &[1.0, 5.0]);
    }

    #[test]
    fn fully_connected_examples() {
        let x = Tensor::<f64>::new(vec![1.0, 2.0], &[1, 2]).unwrap();
        let w = Tensor::<f64>::new(vec![1.0, 1.0], &[1, 2]).unwrap();
        assert_eq!(x.fully_connected(&w, None).unwrap().data(), &[3.0]);

        let eye = Tensor::<f64>::new(vec![1.0, 0.0, 0.0, 1.0], &[2, 2]).unwrap();
        let zb = Tensor::<f64>::zeros(&[2]);
        assert_eq!(x.fully_connected(&eye, Some(&zb)).unwrap().data(), x.data());

        let zw = Tensor::<f64>::zeros(&[2, 2]);
        let b = Tensor::<f64>::new(vec![0.5, -1.0], &[2]).unwrap();
        assert_eq!(
            x.fully_connected(&zw, Some(&b)).unwrap().data(),
            &[0.5, -1.0]
        );
    }
}
