//! Direct 2-D convolution kernels (forward and both backward passes).
//!
//! The hot loops are written as shifted-row axpy / row-dot passes so LLVM can
//! vectorize them. All accumulation orders are fixed, which keeps results
//! bit-identical regardless of thread count; parallelism only ever splits
//! writes across disjoint output planes.

use crate::par;

/// Valid output index range for one kernel tap: all `o` with
/// `0 <= o*stride + k_off < limit_in`, clipped to `[0, limit_out)`.
#[inline]
fn tap_range(limit_in: i64, k_off: i64, stride: i64, limit_out: i64) -> (usize, usize) {
    let lo = if k_off >= 0 {
        0
    } else {
        (-k_off + stride - 1) / stride
    };
    let hi = if limit_in - 1 - k_off < 0 {
        0
    } else {
        ((limit_in - 1 - k_off) / stride + 1).min(limit_out)
    };
    if hi <= lo {
        (0, 0)
    } else {
        (lo as usize, hi as usize)
    }
}

/// Row dot product with fixed lane order (deterministic, vectorizable).
#[inline]
fn dot_rows(a: &[f32], b: &[f32]) -> f32 {
    debug_assert_eq!(a.len(), b.len());
    let mut lanes = [0.0f32; 8];
    let chunks = a.len() / 8;
    for c in 0..chunks {
        for l in 0..8 {
            lanes[l] += a[c * 8 + l] * b[c * 8 + l];
        }
    }
    let mut tail = 0.0f32;
    for i in chunks * 8..a.len() {
        tail += a[i] * b[i];
    }
    (((lanes[0] + lanes[1]) + (lanes[2] + lanes[3]))
        + ((lanes[4] + lanes[5]) + (lanes[6] + lanes[7])))
        + tail
}

pub struct ConvDims {
    pub batch: usize,
    pub c_in: usize,
    pub h: usize,
    pub w: usize,
    pub c_out: usize,
    pub k: usize,
    pub stride: usize,
    pub padding: usize,
    pub oh: usize,
    pub ow: usize,
}

/// out[n,o,oy,ox] = sum_{i,ky,kx} in[n,i,oy*s+ky-p,ox*s+kx-p] * ker[o,i,ky,kx]
pub fn forward(input: &[f32], kernel: &[f32], d: &ConvDims) -> Vec<f32> {
    let mut out = vec![0.0f32; d.batch * d.c_out * d.oh * d.ow];
    let plane = d.oh * d.ow;
    par::for_each_chunk_mut(&mut out, plane, |no, out_plane| {
        let n = no / d.c_out;
        let o = no % d.c_out;
        for i in 0..d.c_in {
            let in_plane = &input[((n * d.c_in + i) * d.h) * d.w..][..d.h * d.w];
            for ky in 0..d.k {
                let koy = ky as i64 - d.padding as i64;
                let (oy_lo, oy_hi) =
                    tap_range(d.h as i64, koy, d.stride as i64, d.oh as i64);
                for kx in 0..d.k {
                    let wgt = kernel[((o * d.c_in + i) * d.k + ky) * d.k + kx];
                    if wgt == 0.0 {
                        continue;
                    }
                    let kox = kx as i64 - d.padding as i64;
                    let (ox_lo, ox_hi) =
                        tap_range(d.w as i64, kox, d.stride as i64, d.ow as i64);
                    if ox_hi <= ox_lo {
                        continue;
                    }
                    for oy in oy_lo..oy_hi {
                        let iy = (oy * d.stride) as i64 + koy;
                        let in_row = &in_plane[iy as usize * d.w..][..d.w];
                        let out_row = &mut out_plane[oy * d.ow..][..d.ow];
                        if d.stride == 1 {
                            let shift = kox; // ix = ox + shift
                            let src =
                                &in_row[(ox_lo as i64 + shift) as usize..][..ox_hi - ox_lo];
                            let dst = &mut out_row[ox_lo..ox_hi];
                            for (dv, sv) in dst.iter_mut().zip(src) {
                                *dv += wgt * sv;
                            }
                        } else {
                            for ox in ox_lo..ox_hi {
                                let ix = (ox * d.stride) as i64 + kox;
                                out_row[ox] += wgt * in_row[ix as usize];
                            }
                        }
                    }
                }
            }
        }
    });
    out
}

/// d_in[n,i,iy,ix] = sum_{o,ky,kx over valid taps} ker[o,i,ky,kx] * d_out[n,o,oy,ox]
pub fn backward_input(d_out: &[f32], kernel: &[f32], d: &ConvDims) -> Vec<f32> {
    let mut d_in = vec![0.0f32; d.batch * d.c_in * d.h * d.w];
    let plane = d.h * d.w;
    par::for_each_chunk_mut(&mut d_in, plane, |ni, in_plane| {
        let n = ni / d.c_in;
        let i = ni % d.c_in;
        for o in 0..d.c_out {
            let out_plane = &d_out[((n * d.c_out + o) * d.oh) * d.ow..][..d.oh * d.ow];
            for ky in 0..d.k {
                let koy = ky as i64 - d.padding as i64;
                let (oy_lo, oy_hi) =
                    tap_range(d.h as i64, koy, d.stride as i64, d.oh as i64);
                for kx in 0..d.k {
                    let wgt = kernel[((o * d.c_in + i) * d.k + ky) * d.k + kx];
                    if wgt == 0.0 {
                        continue;
                    }
                    let kox = kx as i64 - d.padding as i64;
                    let (ox_lo, ox_hi) =
                        tap_range(d.w as i64, kox, d.stride as i64, d.ow as i64);
                    if ox_hi <= ox_lo {
                        continue;
                    }
                    for oy in oy_lo..oy_hi {
                        let iy = (oy * d.stride) as i64 + koy;
                        let g_row = &out_plane[oy * d.ow..][..d.ow];
                        let in_row = &mut in_plane[iy as usize * d.w..][..d.w];
                        if d.stride == 1 {
                            let shift = kox;
                            let dst =
                                &mut in_row[(ox_lo as i64 + shift) as usize..][..ox_hi - ox_lo];
                            let src = &g_row[ox_lo..ox_hi];
                            for (dv, sv) in dst.iter_mut().zip(src) {
                                *dv += wgt * sv;
                            }
                        } else {
                            for ox in ox_lo..ox_hi {
                                let ix = (ox * d.stride) as i64 + kox;
                                in_row[ix as usize] += wgt * g_row[ox];
                            }
                        }
                    }
                }
            }
        }
    });
    d_in
}

/// d_ker[o,i,ky,kx] = sum_{n,oy,ox} d_out[n,o,oy,ox] * in[n,i,oy*s+ky-p,ox*s+kx-p]
pub fn backward_kernel(input: &[f32], d_out: &[f32], d: &ConvDims) -> Vec<f32> {
    let mut d_ker = vec![0.0f32; d.c_out * d.c_in * d.k * d.k];
    let slice = d.k * d.k;
    par::for_each_chunk_mut(&mut d_ker, slice, |oi, ker_slice| {
        let o = oi / d.c_in;
        let i = oi % d.c_in;
        for ky in 0..d.k {
            let koy = ky as i64 - d.padding as i64;
            let (oy_lo, oy_hi) = tap_range(d.h as i64, koy, d.stride as i64, d.oh as i64);
            for kx in 0..d.k {
                let kox = kx as i64 - d.padding as i64;
                let (ox_lo, ox_hi) = tap_range(d.w as i64, kox, d.stride as i64, d.ow as i64);
                // Rows combine in f64; the row dot itself stays in f32 lanes.
                let mut acc = 0.0f64;
                for n in 0..d.batch {
                    let in_plane = &input[((n * d.c_in + i) * d.h) * d.w..][..d.h * d.w];
                    let out_plane =
                        &d_out[((n * d.c_out + o) * d.oh) * d.ow..][..d.oh * d.ow];
                    for oy in oy_lo..oy_hi {
                        let iy = (oy * d.stride) as i64 + koy;
                        let in_row = &in_plane[iy as usize * d.w..][..d.w];
                        let g_row = &out_plane[oy * d.ow..][..d.ow];
                        if ox_hi <= ox_lo {
                            continue;
                        }
                        if d.stride == 1 {
                            let src = &in_row[(ox_lo as i64 + kox) as usize..][..ox_hi - ox_lo];
                            acc += dot_rows(&g_row[ox_lo..ox_hi], src) as f64;
                        } else {
                            let mut s = 0.0f32;
                            for ox in ox_lo..ox_hi {
                                let ix = (ox * d.stride) as i64 + kox;
                                s += g_row[ox] * in_row[ix as usize];
                            }
                            acc += s as f64;
                        }
                    }
                }
                ker_slice[ky * d.k + kx] = acc as f32;
            }
        }
    });
    d_ker
}
