//! im2col convolution kernels.

use crate::autodiff::tape::PlaneMask;
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Geometry {
    pub batch: usize,
    pub c_in: usize,
    pub h: usize,
    pub w: usize,
    pub c_out: usize,
    pub k: usize,
    pub stride: usize,
    pub padding: usize,
    pub h_out: usize,
    pub w_out: usize,
}

impl Geometry {
    pub fn infer(x: &[usize], w: &[usize], stride: usize, padding: usize) -> Result<Self> {
        if x.len() != 4 || w.len() != 4 {
            return Err(Error::dim(
                "conv2d",
                format!("expected [N,C,H,W] input and [O,C,k,k] weights, got {x:?} and {w:?}"),
            ));
        }
        let (batch, c_in, h, wd) = (x[0], x[1], x[2], x[3]);
        let (c_out, wc, k, k2) = (w[0], w[1], w[2], w[3]);
        if wc != c_in {
            return Err(Error::dim(
                "conv2d",
                format!("weights expect {wc} input channels, input has {c_in}"),
            ));
        }
        if k != k2 || k == 0 {
            return Err(Error::dim("conv2d", format!("kernel must be square, got {k}x{k2}")));
        }
        if stride == 0 {
            return Err(Error::dim("conv2d", "stride must be >= 1"));
        }
        if k > h + 2 * padding || k > wd + 2 * padding {
            return Err(Error::dim(
                "conv2d",
                format!("kernel {k} larger than padded input {h}x{wd} (pad {padding})"),
            ));
        }
        Ok(Self {
            batch,
            c_in,
            h,
            w: wd,
            c_out,
            k,
            stride,
            padding,
            h_out: (h + 2 * padding - k) / stride + 1,
            w_out: (wd + 2 * padding - k) / stride + 1,
        })
    }

    pub fn patch_len(&self) -> usize {
        self.c_in * self.k * self.k
    }

    pub fn out_plane(&self) -> usize {
        self.h_out * self.w_out
    }

    fn in_sample(&self) -> usize {
        self.c_in * self.h * self.w
    }
}

/// Unfolds one sample into `[C_in*k*k, H_out*W_out]`.
fn im2col(g: &Geometry, x: &[f64], cols: &mut [f64]) {
    let p = g.out_plane();
    for ci in 0..g.c_in {
        for ki in 0..g.k {
            for kj in 0..g.k {
                let row = (ci * g.k + ki) * g.k + kj;
                let dst = &mut cols[row * p..(row + 1) * p];
                for oi in 0..g.h_out {
                    let ii = (oi * g.stride + ki) as isize - g.padding as isize;
                    let line = &mut dst[oi * g.w_out..(oi + 1) * g.w_out];
                    if ii < 0 || ii >= g.h as isize {
                        line.iter_mut().for_each(|v| *v = 0.0);
                        continue;
                    }
                    let src = &x[(ci * g.h + ii as usize) * g.w..][..g.w];
                    for (oj, v) in line.iter_mut().enumerate() {
                        let jj = (oj * g.stride + kj) as isize - g.padding as isize;
                        *v = if jj < 0 || jj >= g.w as isize {
                            0.0
                        } else {
                            src[jj as usize]
                        };
                    }
                }
            }
        }
    }
}

fn col2im(g: &Geometry, cols: &[f64], dx: &mut [f64]) {
    let p = g.out_plane();
    for ci in 0..g.c_in {
        for ki in 0..g.k {
            for kj in 0..g.k {
                let row = (ci * g.k + ki) * g.k + kj;
                let src = &cols[row * p..(row + 1) * p];
                for oi in 0..g.h_out {
                    let ii = (oi * g.stride + ki) as isize - g.padding as isize;
                    if ii < 0 || ii >= g.h as isize {
                        continue;
                    }
                    let dst = &mut dx[(ci * g.h + ii as usize) * g.w..][..g.w];
                    for oj in 0..g.w_out {
                        let jj = (oj * g.stride + kj) as isize - g.padding as isize;
                        if jj >= 0 && (jj as usize) < g.w {
                            dst[jj as usize] += src[oi * g.w_out + oj];
                        }
                    }
                }
            }
        }
    }
}

/// `c[m,n] = alpha * a[m,k] b[k,n] + beta * c`, all row-major with the given
/// row strides; `trans_*` reads the operand transposed.
#[allow(clippy::too_many_arguments)]
fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    trans_a: bool,
    b: &[f64],
    trans_b: bool,
    c: &mut [f64],
    beta: f64,
) {
    if m == 0 || n == 0 {
        return;
    }
    // row-major [m,k]: (rs, cs) = (k, 1); transposed storage [k,m]: (1, m)
    let (rsa, csa) = if trans_a { (1, m as isize) } else { (k as isize, 1) };
    let (rsb, csb) = if trans_b { (1, k as isize) } else { (n as isize, 1) };
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            rsa,
            csa,
            b.as_ptr(),
            rsb,
            csb,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

pub fn forward(g: &Geometry, x: &[f64], w: &[f64], bias: Option<&[f64]>, mask: Option<&PlaneMask>) -> Vec<f64> {
    let (kl, p) = (g.patch_len(), g.out_plane());
    let mut out = vec![0.0; g.batch * g.c_out * p];
    let mut cols = vec![0.0; kl * p];
    let mut sub_w = Vec::new();
    let mut sub_out = Vec::new();
    for n in 0..g.batch {
        let live: Option<Vec<usize>> = mask.map(|m| m.live_channels(n));
        if matches!(&live, Some(l) if l.is_empty()) {
            continue;
        }
        im2col(g, &x[n * g.in_sample()..(n + 1) * g.in_sample()], &mut cols);
        let dst = &mut out[n * g.c_out * p..(n + 1) * g.c_out * p];
        match live {
            Some(l) if l.len() < g.c_out => {
                sub_w.clear();
                for &co in &l {
                    sub_w.extend_from_slice(&w[co * kl..(co + 1) * kl]);
                }
                sub_out.clear();
                sub_out.resize(l.len() * p, 0.0);
                gemm(l.len(), kl, p, &sub_w, false, &cols, false, &mut sub_out, 0.0);
                for (r, &co) in l.iter().enumerate() {
                    dst[co * p..(co + 1) * p].copy_from_slice(&sub_out[r * p..(r + 1) * p]);
                }
            }
            _ => gemm(g.c_out, kl, p, w, false, &cols, false, dst, 0.0),
        }
        if let Some(b) = bias {
            for co in 0..g.c_out {
                if mask.is_none_or(|m| m.is_live(n, co)) {
                    dst[co * p..(co + 1) * p].iter_mut().for_each(|v| *v += b[co]);
                }
            }
        }
    }
    out
}

/// Returns `(dx, dw, dbias)`; `dx` is skipped when the input needs no gradient.
pub fn backward(
    g: &Geometry,
    x: &[f64],
    w: &[f64],
    gy: &[f64],
    mask: Option<&PlaneMask>,
    want_dx: bool,
) -> (Option<Vec<f64>>, Vec<f64>, Vec<f64>) {
    let (kl, p) = (g.patch_len(), g.out_plane());
    let mut dx = want_dx.then(|| vec![0.0; x.len()]);
    let mut dw = vec![0.0; w.len()];
    let mut db = vec![0.0; g.c_out];
    let mut cols = vec![0.0; kl * p];
    let mut dcols = vec![0.0; kl * p];
    let mut gy_n = vec![0.0; g.c_out * p];
    for n in 0..g.batch {
        gy_n.copy_from_slice(&gy[n * g.c_out * p..(n + 1) * g.c_out * p]);
        if let Some(m) = mask {
            for co in 0..g.c_out {
                if !m.is_live(n, co) {
                    gy_n[co * p..(co + 1) * p].iter_mut().for_each(|v| *v = 0.0);
                }
            }
            if m.live_channels(n).is_empty() {
                continue;
            }
        }
        for co in 0..g.c_out {
            db[co] += gy_n[co * p..(co + 1) * p].iter().sum::<f64>();
        }
        im2col(g, &x[n * g.in_sample()..(n + 1) * g.in_sample()], &mut cols);
        // dw += gy_n [c_out, p] . cols^T [p, kl]
        gemm(g.c_out, p, kl, &gy_n, false, &cols, true, &mut dw, 1.0);
        if let Some(dx) = dx.as_mut() {
            // dcols = w^T [kl, c_out] . gy_n [c_out, p]
            gemm(kl, g.c_out, p, w, true, &gy_n, false, &mut dcols, 0.0);
            col2im(g, &dcols, &mut dx[n * g.in_sample()..(n + 1) * g.in_sample()]);
        }
    }
    (dx, dw, db)
}

#[cfg(test)]
mod tests {
    use super::*;

    /// Direct six-loop cross-correlation.
    fn naive(g: &Geometry, x: &[f64], w: &[f64]) -> Vec<f64> {
        let mut out = vec![0.0; g.batch * g.c_out * g.out_plane()];
        for n in 0..g.batch {
            for co in 0..g.c_out {
                for oi in 0..g.h_out {
                    for oj in 0..g.w_out {
                        let mut acc = 0.0;
                        for ci in 0..g.c_in {
                            for ki in 0..g.k {
                                for kj in 0..g.k {
                                    let ii = (oi * g.stride + ki) as isize - g.padding as isize;
                                    let jj = (oj * g.stride + kj) as isize - g.padding as isize;
                                    if ii < 0 || jj < 0 || ii >= g.h as isize || jj >= g.w as isize {
                                        continue;
                                    }
                                    acc += x[((n * g.c_in + ci) * g.h + ii as usize) * g.w + jj as usize]
                                        * w[((co * g.c_in + ci) * g.k + ki) * g.k + kj];
                                }
                            }
                        }
                        out[((n * g.c_out + co) * g.h_out + oi) * g.w_out + oj] = acc;
                    }
                }
            }
        }
        out
    }

    #[test]
    fn im2col_gemm_matches_direct_loops() {
        let cases = [(2, 3, 5, 6, 4, 3, 1, 1), (1, 2, 7, 7, 3, 3, 2, 1), (1, 1, 4, 4, 2, 1, 1, 0), (2, 2, 5, 5, 3, 3, 2, 0)];
        for (b, ci, h, wd, co, k, s, pad) in cases {
            let g = Geometry::infer(&[b, ci, h, wd], &[co, ci, k, k], s, pad).unwrap();
            let x: Vec<f64> = (0..b * ci * h * wd).map(|i| ((i * 37 % 11) as f64) - 5.0).collect();
            let w: Vec<f64> = (0..co * ci * k * k).map(|i| ((i * 13 % 7) as f64) - 3.0).collect();
            assert_eq!(forward(&g, &x, &w, None, None), naive(&g, &x, &w));
        }
    }

    #[test]
    fn output_size_uses_floor() {
        let g = Geometry::infer(&[1, 1, 7, 8], &[1, 1, 3, 3], 2, 1).unwrap();
        assert_eq!((g.h_out, g.w_out), (4, 4));
    }

    #[test]
    fn rejects_bad_shapes() {
        assert!(Geometry::infer(&[1, 3, 4, 4], &[2, 2, 3, 3], 1, 0).is_err());
        assert!(Geometry::infer(&[1, 1, 2, 2], &[1, 1, 5, 5], 1, 1).is_err());
        assert!(Geometry::infer(&[1, 1, 4, 4], &[1, 1, 3, 3], 0, 0).is_err());
    }
}
