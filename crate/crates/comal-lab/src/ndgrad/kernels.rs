//! Dense inner loops shared by forward and backward passes.
//!
//! Plain row-major f64 slice arithmetic. Loops are tiled so the streamed
//! operand stays in L1, and the innermost loop always runs over a
//! contiguous slice so the compiler can vectorize. Tiling never reorders
//! the per-element accumulation, so results are bit-identical to the
//! untiled loops.

use crate::Real;

const TILE_K: usize = 64;
const TILE_N: usize = 64;

/// c += a(m,k) @ b(k,n)
pub fn matmul_acc(a: &[Real], b: &[Real], c: &mut [Real], m: usize, k: usize, n: usize) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(c.len(), m * n);
    let mut kt = 0;
    while kt < k {
        let kend = (kt + TILE_K).min(k);
        let mut jt = 0;
        while jt < n {
            let jend = (jt + TILE_N).min(n);
            for i in 0..m {
                let arow = &a[i * k..(i + 1) * k];
                let crow = &mut c[i * n + jt..i * n + jend];
                for kk in kt..kend {
                    let aik = arow[kk];
                    if aik == 0.0 {
                        continue;
                    }
                    let brow = &b[kk * n + jt..kk * n + jend];
                    for (cv, &bv) in crow.iter_mut().zip(brow) {
                        *cv += aik * bv;
                    }
                }
            }
            jt = jend;
        }
        kt = kend;
    }
}

pub fn matmul(a: &[Real], b: &[Real], m: usize, k: usize, n: usize) -> Vec<Real> {
    let mut c = vec![0.0; m * n];
    matmul_acc(a, b, &mut c, m, k, n);
    c
}

/// c += a(m,n) @ b(k,n)^T  -> (m,k); rows of both operands stay contiguous.
pub fn matmul_nt_acc(a: &[Real], b: &[Real], c: &mut [Real], m: usize, n: usize, k: usize) {
    let mut kt = 0;
    while kt < k {
        let kend = (kt + TILE_K).min(k);
        for i in 0..m {
            let arow = &a[i * n..(i + 1) * n];
            let crow = &mut c[i * k..(i + 1) * k];
            for kk in kt..kend {
                let brow = &b[kk * n..(kk + 1) * n];
                let mut acc = 0.0;
                for j in 0..n {
                    acc += arow[j] * brow[j];
                }
                crow[kk] += acc;
            }
        }
        kt = kend;
    }
}

/// c += a(m,k)^T @ b(m,n) -> (k,n)
pub fn matmul_tn_acc(a: &[Real], b: &[Real], c: &mut [Real], m: usize, k: usize, n: usize) {
    let mut kt = 0;
    while kt < k {
        let kend = (kt + TILE_K).min(k);
        for i in 0..m {
            let arow = &a[i * k..(i + 1) * k];
            let brow = &b[i * n..(i + 1) * n];
            for kk in kt..kend {
                let aik = arow[kk];
                if aik == 0.0 {
                    continue;
                }
                let crow = &mut c[kk * n..(kk + 1) * n];
                for j in 0..n {
                    crow[j] += aik * brow[j];
                }
            }
        }
        kt = kend;
    }
}

/// 2-D convolution, stride 1, zero padding `pad`, channels-last layout.
/// input (h,w,ci), kernel (kh,kw,ci,co) -> out (h-kh+1+2p, w-kw+1+2p, co).
/// The (dh,dw) kernel window is the outer loop so one ci x co kernel block
/// stays hot across all output pixels.
pub fn conv2d(
    input: &[Real],
    kernel: &[Real],
    h: usize,
    w: usize,
    ci: usize,
    kh: usize,
    kw: usize,
    co: usize,
    pad: usize,
) -> Vec<Real> {
    let oh = h + 2 * pad + 1 - kh;
    let ow = w + 2 * pad + 1 - kw;
    let mut out = vec![0.0; oh * ow * co];
    for dh in 0..kh {
        for dw in 0..kw {
            let kblock = &kernel[(dh * kw + dw) * ci * co..][..ci * co];
            for orow in 0..oh {
                let irow = orow + dh;
                if irow < pad || irow >= h + pad {
                    continue;
                }
                let irow = irow - pad;
                for ocol in 0..ow {
                    let icol = ocol + dw;
                    if icol < pad || icol >= w + pad {
                        continue;
                    }
                    let icol = icol - pad;
                    let ibase = (irow * w + icol) * ci;
                    let orow_s = &mut out[(orow * ow + ocol) * co..(orow * ow + ocol + 1) * co];
                    for c_in in 0..ci {
                        let v = input[ibase + c_in];
                        if v == 0.0 {
                            continue;
                        }
                        let krow = &kblock[c_in * co..(c_in + 1) * co];
                        for (ov, &kv) in orow_s.iter_mut().zip(krow) {
                            *ov += v * kv;
                        }
                    }
                }
            }
        }
    }
    out
}

/// Gradient w.r.t. the convolution input.
#[allow(clippy::too_many_arguments)]
pub fn conv2d_grad_input(
    gout: &[Real],
    kernel: &[Real],
    h: usize,
    w: usize,
    ci: usize,
    kh: usize,
    kw: usize,
    co: usize,
    pad: usize,
) -> Vec<Real> {
    let oh = h + 2 * pad + 1 - kh;
    let ow = w + 2 * pad + 1 - kw;
    let mut gin = vec![0.0; h * w * ci];
    for dh in 0..kh {
        for dw in 0..kw {
            let kblock = &kernel[(dh * kw + dw) * ci * co..][..ci * co];
            for orow in 0..oh {
                let irow = orow + dh;
                if irow < pad || irow >= h + pad {
                    continue;
                }
                let irow = irow - pad;
                for ocol in 0..ow {
                    let icol = ocol + dw;
                    if icol < pad || icol >= w + pad {
                        continue;
                    }
                    let icol = icol - pad;
                    let grow = &gout[(orow * ow + ocol) * co..(orow * ow + ocol + 1) * co];
                    let gbase = (irow * w + icol) * ci;
                    for c_in in 0..ci {
                        let krow = &kblock[c_in * co..(c_in + 1) * co];
                        let mut acc = 0.0;
                        for (gv, &kv) in grow.iter().zip(krow) {
                            acc += gv * kv;
                        }
                        gin[gbase + c_in] += acc;
                    }
                }
            }
        }
    }
    gin
}

/// Gradient w.r.t. the convolution kernel.
#[allow(clippy::too_many_arguments)]
pub fn conv2d_grad_kernel(
    gout: &[Real],
    input: &[Real],
    h: usize,
    w: usize,
    ci: usize,
    kh: usize,
    kw: usize,
    co: usize,
    pad: usize,
) -> Vec<Real> {
    let oh = h + 2 * pad + 1 - kh;
    let ow = w + 2 * pad + 1 - kw;
    let mut gk = vec![0.0; kh * kw * ci * co];
    for dh in 0..kh {
        for dw in 0..kw {
            let kblock = &mut gk[(dh * kw + dw) * ci * co..][..ci * co];
            for orow in 0..oh {
                let irow = orow + dh;
                if irow < pad || irow >= h + pad {
                    continue;
                }
                let irow = irow - pad;
                for ocol in 0..ow {
                    let icol = ocol + dw;
                    if icol < pad || icol >= w + pad {
                        continue;
                    }
                    let icol = icol - pad;
                    let grow = &gout[(orow * ow + ocol) * co..(orow * ow + ocol + 1) * co];
                    let ibase = (irow * w + icol) * ci;
                    for c_in in 0..ci {
                        let v = input[ibase + c_in];
                        if v == 0.0 {
                            continue;
                        }
                        let krow = &mut kblock[c_in * co..(c_in + 1) * co];
                        for (kv, &gv) in krow.iter_mut().zip(grow) {
                            *kv += v * gv;
                        }
                    }
                }
            }
        }
    }
    gk
}
