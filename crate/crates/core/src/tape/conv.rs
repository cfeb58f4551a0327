use serde::{Deserialize, Serialize};

use super::{Tape, Var};
use crate::bitcore::ConvGeometry;
use crate::error::{Error, Result};
use crate::scalar::Real;
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConvParams {
    pub stride: usize,
    pub padding: usize,
    pub dilation: usize,
}

impl ConvParams {
    pub const fn unit() -> Self {
        Self {
            stride: 1,
            padding: 0,
            dilation: 1,
        }
    }

    /// "Same" padding for a square kernel of size `k`.
    pub const fn same(k: usize, stride: usize, dilation: usize) -> Self {
        Self {
            stride,
            padding: dilation * (k - 1) / 2,
            dilation,
        }
    }

    pub fn geometry(&self, input: &[usize], weight: &[usize]) -> Result<ConvGeometry> {
        let [_, c, h, w] = dims4(input)?;
        let [o, ci, kh, kw] = dims4(weight)?;
        if c != ci {
            return Err(Error::Geometry(format!(
                "input has {c} channels but weight expects {ci}"
            )));
        }
        ConvGeometry::new(c, o, kh, kw, self.stride, self.padding, self.dilation, h, w)
    }
}

fn dims4(s: &[usize]) -> Result<[usize; 4]> {
    s.try_into().map_err(|_| Error::ShapeMismatch {
        context: "conv2d expects rank-4 tensors",
        expected: vec![0; 4],
        actual: s.to_vec(),
    })
}

/// Output columns `[lo, hi)` whose horizontal tap `kx` lands inside the image.
fn span(g: &ConvGeometry, kx: usize) -> (usize, usize) {
    let lo = (0..g.output_w).find(|&ox| g.tap(ox, kx, g.input_w).is_some());
    match lo {
        None => (0, 0),
        Some(lo) => {
            let hi = (lo..g.output_w).take_while(|&ox| g.tap(ox, kx, g.input_w).is_some()).count();
            (lo, lo + hi)
        }
    }
}

/// Unfolds one (c, h, w) image into `c·k_h·k_w` rows of `h_out·w_out`
/// columns; row `r` starts at `cols[r * ld]`.
pub fn im2col<T: Real>(x: &[T], g: &ConvGeometry, cols: &mut [T], ld: usize) {
    let (oh, ow) = (g.output_h, g.output_w);
    let npos = oh * ow;
    let spans: Vec<(usize, usize)> = (0..g.kernel_w).map(|kx| span(g, kx)).collect();
    let mut row = 0;
    for c in 0..g.in_channels {
        let plane = &x[c * g.input_h * g.input_w..(c + 1) * g.input_h * g.input_w];
        for ky in 0..g.kernel_h {
            for (kx, &(lo, hi)) in spans.iter().enumerate() {
                let dst = &mut cols[row * ld..row * ld + npos];
                for oy in 0..oh {
                    let line = &mut dst[oy * ow..(oy + 1) * ow];
                    let Some(iy) = g.tap(oy, ky, g.input_h) else {
                        line.fill(T::zero());
                        continue;
                    };
                    line[..lo].fill(T::zero());
                    line[hi..].fill(T::zero());
                    let src = &plane[iy * g.input_w..(iy + 1) * g.input_w];
                    let off = kx * g.dilation;
                    for (ox, v) in line[lo..hi].iter_mut().enumerate() {
                        *v = src[(lo + ox) * g.stride + off - g.padding];
                    }
                }
                row += 1;
            }
        }
    }
}

/// Adjoint of [`im2col`]: scatter-adds columns back into an image gradient.
pub fn col2im<T: Real>(cols: &[T], g: &ConvGeometry, dx: &mut [T], ld: usize) {
    let (oh, ow) = (g.output_h, g.output_w);
    let spans: Vec<(usize, usize)> = (0..g.kernel_w).map(|kx| span(g, kx)).collect();
    let mut row = 0;
    for c in 0..g.in_channels {
        let base = c * g.input_h * g.input_w;
        for ky in 0..g.kernel_h {
            for (kx, &(lo, hi)) in spans.iter().enumerate() {
                let src = &cols[row * ld..];
                let off = kx * g.dilation;
                for oy in 0..oh {
                    let Some(iy) = g.tap(oy, ky, g.input_h) else { continue };
                    let dst = &mut dx[base + iy * g.input_w..base + (iy + 1) * g.input_w];
                    for ox in lo..hi {
                        dst[ox * g.stride + off - g.padding] += src[oy * ow + ox];
                    }
                }
                row += 1;
            }
        }
    }
}

/// im2col of a whole batch: `fan_in` rows of `n·h_out·w_out` columns.
fn im2col_batch<T: Real>(x: &Tensor<T>, g: &ConvGeometry) -> Vec<T> {
    let n = x.shape()[0];
    let npos = g.output_positions();
    let in_per = g.in_channels * g.input_h * g.input_w;
    let ld = n * npos;
    let mut cols = vec![T::zero(); g.fan_in() * ld];
    for s in 0..n {
        im2col(&x.data()[s * in_per..(s + 1) * in_per], g, &mut cols[s * npos..], ld);
    }
    cols
}

/// `(n, o, p)` → `(o, n·p)` and back.
fn to_channel_major<T: Real>(v: &[T], n: usize, o: usize, npos: usize) -> Vec<T> {
    let mut out = vec![T::zero(); v.len()];
    for s in 0..n {
        for c in 0..o {
            out[c * n * npos + s * npos..][..npos].copy_from_slice(&v[(s * o + c) * npos..][..npos]);
        }
    }
    out
}

fn to_sample_major<T: Real>(v: &[T], n: usize, o: usize, npos: usize) -> Vec<T> {
    let mut out = vec![T::zero(); v.len()];
    for s in 0..n {
        for c in 0..o {
            out[(s * o + c) * npos..][..npos].copy_from_slice(&v[c * n * npos + s * npos..][..npos]);
        }
    }
    out
}

/// Batched cross-correlation with zero padding, (n, c, h, w) ⊛ (o, c, kh, kw).
pub fn conv2d_forward<T: Real>(x: &Tensor<T>, w: &Tensor<T>, p: ConvParams) -> Result<Tensor<T>> {
    let g = p.geometry(x.shape(), w.shape())?;
    let n = x.shape()[0];
    let (fan, npos, o) = (g.fan_in(), g.output_positions(), g.out_channels);
    let cols = im2col_batch(x, &g);
    let mut out = vec![T::zero(); o * n * npos];
    T::gemm(o, fan, n * npos, w.data(), false, &cols, false, T::zero(), &mut out);
    Tensor::from_vec(&[n, o, g.output_h, g.output_w], to_sample_major(&out, n, o, npos))
}

impl<T: Real> Tape<T> {
    pub fn conv2d(&mut self, x: Var, w: Var, p: ConvParams) -> Result<Var> {
        let xv = self.value(x).clone();
        let wv = self.value(w).clone();
        let out = conv2d_forward(&xv, &wv, p)?;
        let g = p.geometry(xv.shape(), wv.shape())?;
        let need_x = self.requires_grad(x);
        let need_w = self.requires_grad(w);
        Ok(self.push("conv2d", out, &[x, w], move || {
            move |dy: &Tensor<T>| {
                let n = xv.shape()[0];
                let (fan, npos, o) = (g.fan_in(), g.output_positions(), g.out_channels);
                let in_per = g.in_channels * g.input_h * g.input_w;
                let ld = n * npos;
                let dyc = to_channel_major(dy.data(), n, o, npos);
                let dw = need_w.then(|| {
                    let cols = im2col_batch(&xv, &g);
                    let mut dw = vec![T::zero(); wv.len()];
                    // dW = dY · colsᵀ
                    T::gemm(o, ld, fan, &dyc, false, &cols, true, T::zero(), &mut dw);
                    dw
                });
                let dx = need_x.then(|| {
                    // dcols = Wᵀ · dY
                    let mut cols = vec![T::zero(); fan * ld];
                    T::gemm(fan, o, ld, wv.data(), true, &dyc, false, T::zero(), &mut cols);
                    let mut dx = vec![T::zero(); xv.len()];
                    for s in 0..n {
                        col2im(&cols[s * npos..], &g, &mut dx[s * in_per..(s + 1) * in_per], ld);
                    }
                    dx
                });
                vec![
                    dx.map(|d| Tensor::from_vec(xv.shape(), d).expect("dx shape")),
                    dw.map(|d| Tensor::from_vec(wv.shape(), d).expect("dw shape")),
                ]
            }
        }))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn two_by_two_valid() {
        let x = Tensor::from_vec(&[1, 1, 2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        let w = Tensor::from_vec(&[1, 1, 2, 2], vec![1.0, 0.0, 0.0, 1.0]).unwrap();
        let y = conv2d_forward(&x, &w, ConvParams::unit()).unwrap();
        assert_eq!(y.shape(), &[1, 1, 1, 1]);
        assert_eq!(y.data(), &[5.0]);
    }

    #[test]
    fn identity_kernel() {
        let x = Tensor::from_vec(&[2, 1, 3, 2], (0..12).map(|i| i as f64 * 0.5 - 2.0).collect()).unwrap();
        let w = Tensor::from_vec(&[1, 1, 1, 1], vec![1.0]).unwrap();
        assert_eq!(conv2d_forward(&x, &w, ConvParams::unit()).unwrap(), x);
    }

    #[test]
    fn channel_mismatch_rejected() {
        let x = Tensor::<f64>::zeros(&[1, 2, 3, 3]);
        let w = Tensor::<f64>::zeros(&[1, 3, 3, 3]);
        assert!(conv2d_forward(&x, &w, ConvParams::unit()).is_err());
    }
}
