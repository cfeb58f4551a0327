//! Bit-packed ±1 tensors and exact XNOR-popcount arithmetic.
//!
//! Everything here is a pure function of immutable inputs.

mod bits;
mod conv;

pub use bits::{
    pack_signs, tail_mask, words_for, xnor_popcount_dot, xnor_popcount_masked, xnor_popcount_words, BitTensor,
    ZeroRule, WORD_BITS,
};
pub use conv::{
    binary_conv2d, binary_conv2d_packed, scaled_branch_sum, ConvGeometry, ConvStats, PackedFilters, PadMode,
};
