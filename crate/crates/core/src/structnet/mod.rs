//! Group-Net structure compiler.
//!
//! [`ModelGraph`] holds the latent parameters of every binary branch and a
//! [`Wiring`] describing how branches are combined: inside each layer,
//! per group of blocks, or through learned fusion gates. The same
//! parameters can be rewired, which is how saturated gates are compared
//! against explicit hard partitions. [`lower_to_inference`] turns a trained
//! graph into a [`PackedModel`] that runs on XNOR-popcount kernels.

mod config;
mod harden;
mod lower;
mod model;

pub use config::{
    bpac_rates, check_partition, ArchConfig, BlockKind, BlockSpec, BpacCombine, BpacConfig, Decomposition,
    Nonlinearity, Task,
};
pub use harden::{gate_degeneracy_check, harden, DegeneracyReport, GateMode};
pub use lower::{
    lower_to_inference, PackedAct, PackedBlock, PackedFp, PackedHead, PackedModel, PackedUnit, PackedWiring,
    UnitOrder,
};
pub use model::{
    BinaryLayerInfo, BlockLayout, ConvUnit, ForwardOptions, FpConv, GroupWiring, Head, ModelGraph, Precision, Wiring,
};

use crate::error::{Error, Result};
use crate::scalar::Real;
use crate::tensor::Tensor;

/// `C ⊙ straight + (1 − C) ⊙ aggregated` with `C = sigmoid(θ)`.
pub fn fusion_gate_mix<T: Real>(straight: &Tensor<T>, aggregated: &Tensor<T>, theta: f64) -> Result<Tensor<T>> {
    let c = T::of(crate::tape::sigmoid(theta));
    straight.zip_map(aggregated, |s, a| c * s + (T::one() - c) * a)
}

/// `Σ_i λ_i · out_i`.
pub fn branch_aggregate<T: Real>(outputs: &[Tensor<T>], lambda: &[T]) -> Result<Tensor<T>> {
    if outputs.len() != lambda.len() || outputs.is_empty() {
        return Err(Error::LengthMismatch {
            left: outputs.len(),
            right: lambda.len(),
        });
    }
    let mut acc = Tensor::zeros(outputs[0].shape());
    for (o, &l) in outputs.iter().zip(lambda) {
        o.expect_shape(acc.shape(), "branch_aggregate")?;
        for (a, &v) in acc.data_mut().iter_mut().zip(o.data()) {
            *a += l * v;
        }
    }
    Ok(acc)
}
