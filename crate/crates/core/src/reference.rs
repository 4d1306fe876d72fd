//! Naive reference implementations used by tests and benches.
//!
//! These are deliberately written as plain nested loops with f64
//! accumulation and share no code with the optimized paths they check.

use crate::tensor::Tensor;

/// Six-nested-loop direct convolution (cross-correlation), zero padding.
pub fn naive_conv2d(input: &Tensor, kernel: &Tensor, stride: usize, padding: usize) -> Tensor {
    let (n, ci, h, w) = input.dims4().expect("input NCHW");
    let (co, cik, k, _) = kernel.dims4().expect("kernel OIKK");
    assert_eq!(ci, cik);
    let oh = (h + 2 * padding - k) / stride + 1;
    let ow = (w + 2 * padding - k) / stride + 1;
    let mut out = vec![0.0f32; n * co * oh * ow];
    let iv = input.data();
    let kv = kernel.data();
    for nn in 0..n {
        for o in 0..co {
            for oy in 0..oh {
                for ox in 0..ow {
                    let mut acc = 0.0f64;
                    for i in 0..ci {
                        for ky in 0..k {
                            for kx in 0..k {
                                let iy = (oy * stride + ky) as i64 - padding as i64;
                                let ix = (ox * stride + kx) as i64 - padding as i64;
                                if iy < 0 || iy >= h as i64 || ix < 0 || ix >= w as i64 {
                                    continue;
                                }
                                let xv = iv[((nn * ci + i) * h + iy as usize) * w + ix as usize];
                                let wv = kv[((o * ci + i) * k + ky) * k + kx];
                                acc += xv as f64 * wv as f64;
                            }
                        }
                    }
                    out[((nn * co + o) * oh + oy) * ow + ox] = acc as f32;
                }
            }
        }
    }
    Tensor::new(vec![n, co, oh, ow], out).unwrap()
}
