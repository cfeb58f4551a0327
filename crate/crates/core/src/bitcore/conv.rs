use serde::{Deserialize, Serialize};

use super::bits::{words_for, xnor_popcount_masked, xnor_popcount_words, BitTensor, WORD_BITS};
use crate::error::{Error, Result};
use crate::scalar::Real;
use crate::tensor::Tensor;

/// Shape bookkeeping for one 2-D convolution over a single image.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConvGeometry {
    pub in_channels: usize,
    pub out_channels: usize,
    pub kernel_h: usize,
    pub kernel_w: usize,
    pub stride: usize,
    pub padding: usize,
    pub dilation: usize,
    pub input_h: usize,
    pub input_w: usize,
    pub output_h: usize,
    pub output_w: usize,
}

fn out_dim(input: usize, kernel: usize, stride: usize, padding: usize, dilation: usize) -> Option<usize> {
    let span = dilation * (kernel - 1) + 1;
    let padded = input + 2 * padding;
    if padded < span {
        return None;
    }
    Some((padded - span) / stride + 1)
}

impl ConvGeometry {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        in_channels: usize,
        out_channels: usize,
        kernel_h: usize,
        kernel_w: usize,
        stride: usize,
        padding: usize,
        dilation: usize,
        input_h: usize,
        input_w: usize,
    ) -> Result<Self> {
        if in_channels == 0 || out_channels == 0 || kernel_h == 0 || kernel_w == 0 {
            return Err(Error::Geometry("channel and kernel sizes must be positive".into()));
        }
        if stride == 0 || dilation == 0 {
            return Err(Error::Geometry("stride and dilation must be at least 1".into()));
        }
        let output_h = out_dim(input_h, kernel_h, stride, padding, dilation);
        let output_w = out_dim(input_w, kernel_w, stride, padding, dilation);
        match (output_h, output_w) {
            (Some(output_h), Some(output_w)) => Ok(Self {
                in_channels,
                out_channels,
                kernel_h,
                kernel_w,
                stride,
                padding,
                dilation,
                input_h,
                input_w,
                output_h,
                output_w,
            }),
            _ => Err(Error::Geometry(format!(
                "dilated kernel {kernel_h}x{kernel_w} (dilation {dilation}) exceeds padded input {input_h}x{input_w} (padding {padding})"
            ))),
        }
    }

    /// Square kernel with "same"-style padding `dilation·(k−1)/2`.
    pub fn same(in_channels: usize, out_channels: usize, kernel: usize, stride: usize, dilation: usize, h: usize, w: usize) -> Result<Self> {
        Self::new(in_channels, out_channels, kernel, kernel, stride, dilation * (kernel - 1) / 2, dilation, h, w)
    }

    /// Checks the stored output sizes against the output-size formula.
    pub fn validate(&self) -> Result<()> {
        let fresh = Self::new(
            self.in_channels,
            self.out_channels,
            self.kernel_h,
            self.kernel_w,
            self.stride,
            self.padding,
            self.dilation,
            self.input_h,
            self.input_w,
        )?;
        if fresh != *self {
            return Err(Error::Geometry(format!(
                "output {}x{} inconsistent with formula ({}x{})",
                self.output_h, self.output_w, fresh.output_h, fresh.output_w
            )));
        }
        Ok(())
    }

    /// Fan-in of one output element, `c_in·k_h·k_w`.
    pub fn fan_in(&self) -> usize {
        self.in_channels * self.kernel_h * self.kernel_w
    }

    pub fn output_positions(&self) -> usize {
        self.output_h * self.output_w
    }

    pub fn input_shape(&self) -> [usize; 3] {
        [self.in_channels, self.input_h, self.input_w]
    }

    pub fn weight_shape(&self) -> [usize; 4] {
        [self.out_channels, self.in_channels, self.kernel_h, self.kernel_w]
    }

    pub fn output_shape(&self) -> [usize; 3] {
        [self.out_channels, self.output_h, self.output_w]
    }

    /// Input coordinate sampled by kernel tap `k` at output coordinate `o`,
    /// or `None` when it falls in the padding.
    #[inline]
    pub fn tap(&self, o: usize, k: usize, extent: usize) -> Option<usize> {
        let pos = (o * self.stride + k * self.dilation) as isize - self.padding as isize;
        (pos >= 0 && (pos as usize) < extent).then_some(pos as usize)
    }
}

/// How padded taps enter the ±1 accumulator.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub enum PadMode {
    /// Padded taps read as −1; every accumulator sums exactly `fan_in` terms.
    #[default]
    MinusOne,
    /// Padded taps are excluded, matching a real-valued convolution that pads with 0.
    Exclude,
}

/// Binary filter bank, one word-aligned packed row per output channel over
/// (c_in, k_h, k_w).
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PackedFilters {
    out_channels: usize,
    fan_in: usize,
    words_per_row: usize,
    words: Vec<u64>,
}

impl PackedFilters {
    pub fn from_bit_tensor(weight: &BitTensor) -> Result<Self> {
        let shape = weight.shape();
        if shape.len() < 2 {
            return Err(Error::ShapeMismatch {
                context: "filter bank needs (c_out, ...) shape",
                expected: vec![0, 0],
                actual: shape.to_vec(),
            });
        }
        let out_channels = shape[0];
        let fan_in: usize = shape[1..].iter().product();
        let words_per_row = words_for(fan_in);
        let mut words = vec![0u64; out_channels * words_per_row];
        for o in 0..out_channels {
            for j in 0..fan_in {
                if weight.bit(o * fan_in + j) {
                    words[o * words_per_row + j / WORD_BITS] |= 1 << (j % WORD_BITS);
                }
            }
        }
        Ok(Self {
            out_channels,
            fan_in,
            words_per_row,
            words,
        })
    }

    pub fn from_raw(out_channels: usize, fan_in: usize, words: Vec<u64>) -> Result<Self> {
        let words_per_row = words_for(fan_in);
        if words.len() != out_channels * words_per_row {
            return Err(Error::LengthMismatch {
                left: out_channels * words_per_row,
                right: words.len(),
            });
        }
        let tail = super::bits::tail_mask(fan_in);
        for o in 0..out_channels {
            if words_per_row > 0 && words[o * words_per_row + words_per_row - 1] & !tail != 0 {
                return Err(Error::InvalidArgument(format!("pad bits set in filter {o}")));
            }
        }
        Ok(Self {
            out_channels,
            fan_in,
            words_per_row,
            words,
        })
    }

    pub fn out_channels(&self) -> usize {
        self.out_channels
    }

    pub fn fan_in(&self) -> usize {
        self.fan_in
    }

    pub fn words_per_row(&self) -> usize {
        self.words_per_row
    }

    pub fn words(&self) -> &[u64] {
        &self.words
    }

    pub fn row(&self, o: usize) -> &[u64] {
        &self.words[o * self.words_per_row..(o + 1) * self.words_per_row]
    }

    pub fn to_bit_tensor(&self, shape: &[usize]) -> Result<BitTensor> {
        let bits = (0..self.out_channels).flat_map(|o| {
            let row = self.row(o);
            (0..self.fan_in).map(move |j| (row[j / WORD_BITS] >> (j % WORD_BITS)) & 1 == 1)
        });
        BitTensor::from_bools(shape, bits)
    }
}

/// Work performed by a binary convolution.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct ConvStats {
    /// XNOR-popcount dot products, one per output element.
    pub xnor_dots: u64,
    /// 64-bit word XNOR+popcount operations.
    pub word_ops: u64,
}

impl std::ops::AddAssign for ConvStats {
    fn add_assign(&mut self, rhs: Self) {
        self.xnor_dots += rhs.xnor_dots;
        self.word_ops += rhs.word_ops;
    }
}

/// XNOR-popcount convolution of a (c_in, h_in, w_in) sign tensor with a
/// (c_out, c_in, k_h, k_w) sign filter bank. Output is (c_out, h_out, w_out).
pub fn binary_conv2d(input: &BitTensor, weight: &BitTensor, geom: &ConvGeometry) -> Result<Tensor<i32>> {
    if weight.shape() != geom.weight_shape() {
        return Err(Error::ShapeMismatch {
            context: "binary_conv2d weight",
            expected: geom.weight_shape().to_vec(),
            actual: weight.shape().to_vec(),
        });
    }
    let filters = PackedFilters::from_bit_tensor(weight)?;
    binary_conv2d_packed(input, &filters, geom, PadMode::MinusOne).map(|(t, _)| t)
}

pub fn binary_conv2d_packed(
    input: &BitTensor,
    filters: &PackedFilters,
    geom: &ConvGeometry,
    pad: PadMode,
) -> Result<(Tensor<i32>, ConvStats)> {
    geom.validate()?;
    if input.shape() != geom.input_shape() {
        return Err(Error::ShapeMismatch {
            context: "binary_conv2d input",
            expected: geom.input_shape().to_vec(),
            actual: input.shape().to_vec(),
        });
    }
    if filters.out_channels != geom.out_channels || filters.fan_in != geom.fan_in() {
        return Err(Error::Geometry(format!(
            "filter bank {}x{} does not match geometry {}x{}",
            filters.out_channels,
            filters.fan_in,
            geom.out_channels,
            geom.fan_in()
        )));
    }
    let mut out = vec![0i32; geom.out_channels * geom.output_h * geom.output_w];
    #[cfg(target_arch = "x86_64")]
    let stats = if std::arch::is_x86_feature_detected!("popcnt") {
        // SAFETY: the CPU supports the feature the kernel was compiled for.
        unsafe { packed_kernel_popcnt(input, filters, geom, pad, &mut out) }
    } else {
        packed_kernel(input, filters, geom, pad, &mut out)
    };
    #[cfg(not(target_arch = "x86_64"))]
    let stats = packed_kernel(input, filters, geom, pad, &mut out);
    Ok((Tensor::from_vec(&geom.output_shape(), out)?, stats))
}

#[cfg(target_arch = "x86_64")]
#[target_feature(enable = "popcnt")]
unsafe fn packed_kernel_popcnt(
    input: &BitTensor,
    filters: &PackedFilters,
    geom: &ConvGeometry,
    pad: PadMode,
    out: &mut [i32],
) -> ConvStats {
    packed_kernel(input, filters, geom, pad, out)
}

#[inline(always)]
fn packed_kernel(input: &BitTensor, filters: &PackedFilters, geom: &ConvGeometry, pad: PadMode, out: &mut [i32]) -> ConvStats {
    let fan_in = geom.fan_in();
    let wpr = filters.words_per_row;
    let (oh, ow) = (geom.output_h, geom.output_w);
    let (kh, kw) = (geom.kernel_h, geom.kernel_w);
    let plane = geom.input_h * geom.input_w;
    let positions = oh * ow;
    let masked = pad == PadMode::Exclude;
    let ys: Vec<Option<usize>> = (0..oh * kh).map(|i| geom.tap(i / kh, i % kh, geom.input_h)).collect();
    // Per kernel column, the contiguous range of output columns whose tap is in bounds.
    let spans: Vec<(usize, usize)> = (0..kw)
        .map(|kx| {
            let inside: Vec<usize> = (0..ow).filter(|&ox| geom.tap(ox, kx, geom.input_w).is_some()).collect();
            inside.first().map_or((0, 0), |&lo| (lo, inside[inside.len() - 1] + 1))
        })
        .collect();

    // im2col into packed words, stored word-major so that filling is sequential.
    let mut patches = vec![0u64; positions * wpr];
    let mut masks = vec![0u64; if masked { positions * wpr } else { 0 }];
    let mut padded = vec![false; positions];
    let mut j = 0;
    for c in 0..geom.in_channels {
        for ky in 0..kh {
            for kx in 0..kw {
                let (word, shift) = (j / WORD_BITS, j % WORD_BITS);
                for oy in 0..oh {
                    let Some(iy) = ys[oy * kh + ky] else {
                        padded[oy * ow..(oy + 1) * ow].iter_mut().for_each(|p| *p = true);
                        continue;
                    };
                    let row = c * plane + iy * geom.input_w;
                    let (lo, hi) = spans[kx];
                    let dst = word * positions + oy * ow;
                    padded[oy * ow..oy * ow + lo].iter_mut().for_each(|p| *p = true);
                    padded[oy * ow + hi..(oy + 1) * ow].iter_mut().for_each(|p| *p = true);
                    for ox in lo..hi {
                        let ix = ox * geom.stride + kx * geom.dilation - geom.padding;
                        // Branch-free: input bits are close to random.
                        patches[dst + ox] |= (input.bit(row + ix) as u64) << shift;
                    }
                    if masked {
                        masks[dst + lo..dst + hi].iter_mut().for_each(|m| *m |= 1 << shift);
                    }
                }
                j += 1;
            }
        }
    }

    let mut patch = vec![0u64; wpr];
    let mut mask = vec![0u64; wpr];
    for p in 0..positions {
        let exclude = masked && padded[p];
        for w in 0..wpr {
            patch[w] = patches[w * positions + p];
            if exclude {
                mask[w] = masks[w * positions + p];
            }
        }
        for o in 0..geom.out_channels {
            let row = filters.row(o);
            out[o * positions + p] = if exclude {
                xnor_popcount_masked(&patch, row, &mask).0
            } else {
                xnor_popcount_words(&patch, row, fan_in)
            };
        }
    }
    ConvStats {
        xnor_dots: (positions * geom.out_channels) as u64,
        word_ops: (positions * geom.out_channels * wpr) as u64,
    }
}

/// Elementwise `Σ_i scales_i · acc_i`.
pub fn scaled_branch_sum<T: Real>(accumulators: &[Tensor<i32>], scales: &[T]) -> Result<Tensor<T>> {
    if accumulators.len() != scales.len() {
        return Err(Error::LengthMismatch {
            left: accumulators.len(),
            right: scales.len(),
        });
    }
    let Some(first) = accumulators.first() else {
        return Err(Error::InvalidArgument("no branches to sum".into()));
    };
    let mut out = Tensor::<T>::zeros(first.shape());
    for (acc, &s) in accumulators.iter().zip(scales) {
        acc.expect_shape(first.shape(), "scaled_branch_sum accumulators")?;
        for (o, &a) in out.data_mut().iter_mut().zip(acc.data()) {
            *o += s * T::of(a as f64);
        }
    }
    Ok(out)
}
