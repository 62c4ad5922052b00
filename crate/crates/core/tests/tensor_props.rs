use crt_core::tensor::io::{read_tensor, write_tensor};
use crt_core::tensor::{Conv2dOptions, Tensor};
use proptest::prelude::*;

fn tensor(shape: Vec<usize>) -> impl Strategy<Value = Tensor<f64>> {
    let n: usize = shape.iter().product();
    prop::collection::vec(-3.0f64..3.0, n).prop_map(move |v| Tensor::new(v, &shape).unwrap())
}

fn image() -> impl Strategy<Value = Tensor<f64>> {
    (1usize..3, 1usize..4, 1usize..6, 1usize..6)
        .prop_flat_map(|(n, c, h, w)| tensor(vec![n, c, h, w]))
}

/// Direct cross-correlation with zero padding.
fn naive_conv(
    x: &Tensor<f64>,
    w: &Tensor<f64>,
    stride: usize,
    pad: usize,
    groups: usize,
) -> Vec<f64> {
    let [n, cin, h, wd] = x.shape().try_into().unwrap();
    let [cout, cpg, kh, kw] = w.shape().try_into().unwrap();
    let oh = (h + 2 * pad - kh) / stride + 1;
    let ow = (wd + 2 * pad - kw) / stride + 1;
    let opg = cout / groups;
    let mut out = vec![0.0; n * cout * oh * ow];
    for b in 0..n {
        for o in 0..cout {
            let g = o / opg;
            for i in 0..oh {
                for j in 0..ow {
                    let mut acc = 0.0;
                    for ci in 0..cpg {
                        let c = g * cpg + ci;
                        for u in 0..kh {
                            for v in 0..kw {
                                let (y, xx) = (
                                    (i * stride + u) as isize - pad as isize,
                                    (j * stride + v) as isize - pad as isize,
                                );
                                if y >= 0 && xx >= 0 && (y as usize) < h && (xx as usize) < wd {
                                    acc += x.data()
                                        [((b * cin + c) * h + y as usize) * wd + xx as usize]
                                        * w.data()[((o * cpg + ci) * kh + u) * kw + v];
                                }
                            }
                        }
                    }
                    out[((b * cout + o) * oh + i) * ow + j] = acc;
                }
            }
        }
    }
    out
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn softmax_rows_are_distributions(x in tensor(vec![3, 5]), shift in -100.0f64..100.0) {
        let y = x.softmax(1).unwrap();
        for row in y.data().chunks(5) {
            prop_assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-6);
            prop_assert!(row.iter().all(|&p| p > 0.0 && p < 1.0));
        }
        let z = x.add_scalar(shift).softmax(1).unwrap();
        for (a, b) in y.data().iter().zip(z.data()) {
            prop_assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn sigmoid_is_symmetric(x in tensor(vec![16])) {
        let s = x.sigmoid();
        let t = x.neg().sigmoid();
        for (a, b) in s.data().iter().zip(t.data()) {
            prop_assert!((a + b - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn concat_then_narrow_is_identity(a in tensor(vec![2, 3, 2]), b in tensor(vec![2, 1, 2]), c in tensor(vec![2, 4, 2])) {
        let cat = Tensor::concat(&[a.clone(), b.clone(), c.clone()], 1).unwrap();
        prop_assert_eq!(cat.shape(), &[2, 8, 2]);
        prop_assert_eq!(cat.narrow(1, 0, 3).unwrap().to_vec(), a.to_vec());
        prop_assert_eq!(cat.narrow(1, 3, 1).unwrap().to_vec(), b.to_vec());
        prop_assert_eq!(cat.narrow(1, 4, 4).unwrap().to_vec(), c.to_vec());
    }

    #[test]
    fn conv2d_matches_direct_loop(
        x in image(),
        cout_per_group in 1usize..3,
        k in prop::sample::select(vec![1usize, 3]),
        stride in 1usize..3,
        seed in any::<u64>(),
    ) {
        let cin = x.dim(1);
        let groups = if seed % 2 == 0 { cin } else { 1 };
        let cout = cout_per_group * groups;
        let pad = k / 2;
        let w = Tensor::<f64>::from_fn(&[cout, cin / groups, k, k], |i| ((i as u64 ^ seed) % 7) as f64 - 3.0);
        let y = x.conv2d(&w, None, Conv2dOptions::new(stride, pad, groups)).unwrap();
        let expect = naive_conv(&x, &w, stride, pad, groups);
        prop_assert_eq!(y.numel(), expect.len());
        for (a, b) in y.data().iter().zip(&expect) {
            prop_assert!((a - b).abs() < 1e-9);
        }
    }

    #[test]
    fn depthwise_is_per_channel_convolution(x in image(), seed in any::<u64>()) {
        let c = x.dim(1);
        let w = Tensor::<f64>::from_fn(&[c, 1, 3, 3], |i| ((i as u64).wrapping_mul(seed | 1) % 5) as f64 - 2.0);
        let y = x.conv2d(&w, None, Conv2dOptions::new(1, 1, c)).unwrap();
        for ch in 0..c {
            let xc = x.narrow(1, ch, 1).unwrap();
            let wc = w.narrow(0, ch, 1).unwrap();
            let yc = xc.conv2d(&wc, None, Conv2dOptions::new(1, 1, 1)).unwrap();
            prop_assert_eq!(y.narrow(1, ch, 1).unwrap().to_vec(), yc.to_vec());
        }
    }

    #[test]
    fn matmul_matches_triple_loop(a in tensor(vec![2, 3, 4]), b in tensor(vec![4, 5])) {
        let y = a.matmul(&b).unwrap();
        prop_assert_eq!(y.shape(), &[2, 3, 5]);
        for bi in 0..2 {
            for i in 0..3 {
                for j in 0..5 {
                    let s: f64 = (0..4).map(|k| a.data()[(bi * 3 + i) * 4 + k] * b.data()[k * 5 + j]).sum();
                    prop_assert!((y.data()[(bi * 3 + i) * 5 + j] - s).abs() < 1e-10);
                }
            }
        }
    }

    #[test]
    fn group_norm_standardizes_each_group(x in tensor(vec![2, 4, 3, 3])) {
        let y = x.group_norm(2, &Tensor::ones(&[4]), &Tensor::zeros(&[4]), 1e-12).unwrap();
        for group in y.data().chunks(18) {
            let mean = group.iter().sum::<f64>() / 18.0;
            let var = group.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / 18.0;
            prop_assert!(mean.abs() < 1e-9);
            prop_assert!((var - 1.0).abs() < 1e-6);
        }
    }

    #[test]
    fn upsampling_preserves_mean(x in image(), s in 1usize..4) {
        let y = x.upsample_nearest(s).unwrap();
        prop_assert!((y.mean().item() - x.mean().item()).abs() < 1e-12);
        prop_assert_eq!(y.dim(2), x.dim(2) * s);
    }

    #[test]
    fn broadcasting_add_commutes(a in tensor(vec![2, 3, 1]), b in tensor(vec![3, 4])) {
        let ab = a.add(&b).unwrap();
        let ba = b.add(&a).unwrap();
        prop_assert_eq!(ab.shape(), &[2, 3, 4]);
        prop_assert_eq!(ab.data(), ba.data());
    }

    #[test]
    fn forward_is_bit_deterministic(x in image()) {
        let f = |x: &Tensor<f64>| x.silu().softmax(1).unwrap().global_avg_pool_2d().unwrap();
        prop_assert_eq!(f(&x).to_vec(), f(&x).to_vec());
    }

    #[test]
    fn serialization_round_trips(x in image()) {
        // the file format stores f32
        let x: Tensor<f32> = x.cast();
        let mut buf = Vec::new();
        write_tensor(&mut buf, &x).unwrap();
        let y: Tensor<f32> = read_tensor(&mut buf.as_slice()).unwrap();
        prop_assert_eq!(y.shape(), x.shape());
        prop_assert_eq!(y.to_vec(), x.to_vec());
    }

    #[test]
    fn gradients_match_data_shape(x in image()) {
        let leaf = x.requiring_grad();
        leaf.square().mul(&leaf).unwrap().sum().backward().unwrap();
        let g = leaf.grad().unwrap();
        prop_assert_eq!(g.len(), x.numel());
        for (gi, xi) in g.iter().zip(x.data()) {
            prop_assert!((gi - 3.0 * xi * xi).abs() < 1e-9);
        }
    }
}
