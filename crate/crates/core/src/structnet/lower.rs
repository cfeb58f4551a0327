use serde::{Deserialize, Serialize};

use super::config::{ArchConfig, BlockKind};
use super::model::{ConvUnit, FpConv, Head, ModelGraph, Wiring};
use crate::bitcore::{
    binary_conv2d_packed, pack_signs, BitTensor, ConvGeometry, ConvStats, PackedFilters, PadMode, ZeroRule,
};
use crate::error::{Error, Result};
use crate::quant::{self, ActivationScheme};
use crate::scalar::Real;
use crate::tape::{conv2d_forward, sigmoid, BatchNormState, BnBuffers, ConvParams, ParamStore};
use crate::tensor::Tensor;

/// Full-precision convolution with BN folded to `scale · conv(x) + bias`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PackedFp {
    pub weight: Tensor<f64>,
    pub conv: ConvParams,
    pub scale: Vec<f64>,
    pub bias: Vec<f64>,
    pub relu: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub enum PackedAct {
    Sign,
    Kbit { bits: u32, beta: f64 },
}

/// Where the ReLU sits relative to the folded affine map.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum UnitOrder {
    /// `scale · max(acc, 0) + bias`.
    ReluThenAffine,
    /// `max(scale · acc + bias, 0)`.
    AffineThenRelu,
}

/// A binarized convolution lowered to packed filters and an integer
/// accumulator followed by a per-channel affine map.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PackedUnit {
    pub filters: PackedFilters,
    pub in_channels: usize,
    pub out_channels: usize,
    pub kernel: usize,
    pub conv: ConvParams,
    pub act: PackedAct,
    pub order: UnitOrder,
    pub scale: Vec<f64>,
    pub bias: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PackedBlock {
    pub kind: BlockKind,
    pub projection: Option<PackedFp>,
    pub branches: Vec<Vec<PackedUnit>>,
    /// Layer-wise coefficients that could not be folded into the units.
    pub unit_lambdas: Vec<Option<Vec<f64>>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum PackedWiring {
    Layerwise,
    Groups(Vec<(Vec<usize>, Option<Vec<f64>>)>),
    Soft {
        lambdas: Vec<Option<Vec<f64>>>,
        /// Gate values `sigmoid(θ)` per block; `None` for the first block.
        gates: Vec<Option<Vec<f64>>>,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum PackedHead {
    Linear(Tensor<f64>),
    Pixelwise(Tensor<f64>),
}

/// Inference-time Group-Net.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PackedModel {
    pub arch: ArchConfig,
    /// Per-pixel mean subtracted from raw inputs, when known.
    pub input_mean: Option<Tensor<f64>>,
    pub stem: PackedFp,
    pub blocks: Vec<PackedBlock>,
    pub wiring: PackedWiring,
    pub head: PackedHead,
}

fn values<T: Real>(t: &Tensor<T>) -> Vec<f64> {
    t.data().iter().map(|v| v.as_f64()).collect()
}

/// `(γ/σ, β − γμ/σ)` with `σ = √(var + ε)`.
fn bn_fold<T: Real>(store: &ParamStore<T>, buffers: &[BnBuffers<T>], bn: &BatchNormState) -> (Vec<f64>, Vec<f64>) {
    let g = values(store.get(bn.gamma));
    let b = values(store.get(bn.beta));
    let buf = &buffers[bn.buffers];
    let mut scale = Vec::with_capacity(g.len());
    let mut bias = Vec::with_capacity(g.len());
    for c in 0..g.len() {
        let inv = 1.0 / (buf.running_var[c].as_f64() + buf.eps).sqrt();
        scale.push(g[c] * inv);
        bias.push(b[c] - g[c] * buf.running_mean[c].as_f64() * inv);
    }
    (scale, bias)
}

fn lower_fp<T: Real>(model: &ModelGraph<T>, layer: &FpConv, relu: bool) -> PackedFp {
    let (scale, bias) = bn_fold(&model.store, &model.buffers, &layer.bn);
    PackedFp {
        weight: model.store.get(layer.weight).cast(),
        conv: layer.conv,
        scale,
        bias,
        relu,
    }
}

fn lower_unit<T: Real>(model: &ModelGraph<T>, unit: &ConvUnit, lambda: Option<f64>) -> Result<PackedUnit> {
    let w = model.store.get(unit.weight).cast::<f64>();
    let q = &model.config.quant;
    let (bits, alpha) = quant::binarize_weights(&w, q)?;
    let per = alpha.len();
    let alpha_of = |o: usize| if per == 1 { alpha[0] } else { alpha[o] };
    let (s, b) = bn_fold(&model.store, &model.buffers, &unit.bn);
    let (act, order, grid) = match q.activation_scheme {
        ActivationScheme::BinarySign => (PackedAct::Sign, UnitOrder::ReluThenAffine, 1.0),
        ActivationScheme::UniformKbit => {
            let levels = ((1u64 << q.activation_bits) - 1) as f64;
            (
                PackedAct::Kbit {
                    bits: q.activation_bits,
                    beta: q.clip_bound,
                },
                UnitOrder::AffineThenRelu,
                q.clip_bound / levels,
            )
        }
        ActivationScheme::FullPrecision => {
            return Err(Error::Structure(
                "full-precision activations have no packed form; use binary-sign or uniform-kbit".into(),
            ))
        }
    };
    let l = lambda.unwrap_or(1.0);
    let scale = (0..unit.out_channels).map(|o| l * s[o] * alpha_of(o) * grid).collect();
    let bias = b.iter().map(|v| l * v).collect();
    Ok(PackedUnit {
        filters: PackedFilters::from_bit_tensor(&bits)?,
        in_channels: unit.in_channels,
        out_channels: unit.out_channels,
        kernel: 3,
        conv: unit.conv,
        act,
        order,
        scale,
        bias,
    })
}

/// Folds α, BN statistics and, where the algebra allows, λ into per-channel
/// scale and bias on integer accumulators. Gate values become constants.
pub fn lower_to_inference<T: Real>(model: &ModelGraph<T>) -> Result<PackedModel> {
    if let Some(i) = model.buffers.iter().position(|b| !b.frozen) {
        return Err(Error::Unfrozen(format!(
            "batch norm #{i} still tracks batch statistics; freeze the model before lowering"
        )));
    }
    lower_unchecked(model)
}

pub(crate) fn lower_unchecked<T: Real>(model: &ModelGraph<T>) -> Result<PackedModel> {
    let store = &model.store;
    let get = |id| values(store.get(id));
    // λ folds through `ReLU → affine` for any sign, and through `affine → ReLU`
    // only when it is non-negative; kbit units keep it separate.
    let foldable = model.config.quant.activation_scheme == ActivationScheme::BinarySign;
    let mut blocks = Vec::with_capacity(model.blocks.len());
    for blk in &model.blocks {
        let lambdas: Vec<Option<Vec<f64>>> = blk.unit_lambdas.iter().map(|l| l.map(get)).collect();
        let mut branches = Vec::with_capacity(blk.branches.len());
        for (i, units) in blk.branches.iter().enumerate() {
            let packed = units
                .iter()
                .enumerate()
                .map(|(u, unit)| {
                    let l = lambdas.get(u).and_then(|l| l.as_ref()).filter(|_| foldable).map(|l| l[i]);
                    lower_unit(model, unit, l)
                })
                .collect::<Result<Vec<_>>>()?;
            branches.push(packed);
        }
        blocks.push(PackedBlock {
            kind: blk.kind,
            projection: blk.projection.as_ref().map(|p| lower_fp(model, p, false)),
            branches,
            unit_lambdas: if foldable {
                vec![None; lambdas.len()]
            } else {
                lambdas
            },
        });
    }
    let wiring = match &model.wiring {
        Wiring::Layerwise => PackedWiring::Layerwise,
        Wiring::Groups(groups) => {
            PackedWiring::Groups(groups.iter().map(|g| (g.blocks.clone(), g.lambda.map(get))).collect())
        }
        Wiring::Soft { lambdas, thetas } => PackedWiring::Soft {
            lambdas: lambdas.iter().map(|l| l.map(get)).collect(),
            gates: thetas
                .iter()
                .map(|t| t.map(|id| get(id).into_iter().map(sigmoid).collect()))
                .collect(),
        },
    };
    let head = match &model.head {
        Head::Linear { weight } => PackedHead::Linear(store.get(*weight).cast()),
        Head::Pixelwise { weight } => PackedHead::Pixelwise(store.get(*weight).cast()),
    };
    Ok(PackedModel {
        arch: model.config.clone(),
        input_mean: None,
        stem: lower_fp(model, &model.stem, true),
        blocks,
        wiring,
        head,
    })
}

/// Single-sample activation map (c, h, w).
type Map = Tensor<f64>;

fn apply_fp(layer: &PackedFp, x: &Map) -> Result<Map> {
    let [c, h, w] = dims3(x)?;
    let batched = x.clone().reshape(&[1, c, h, w])?;
    let y = conv2d_forward(&batched, &layer.weight, layer.conv)?;
    let (_, oc, oh, ow) = y.nchw()?;
    let mut data = y.into_data();
    let plane = oh * ow;
    for (o, chunk) in data.chunks_mut(plane).enumerate() {
        for v in chunk {
            *v = layer.scale[o] * *v + layer.bias[o];
            if layer.relu {
                *v = v.max(0.0);
            }
        }
    }
    Tensor::from_vec(&[oc, oh, ow], data)
}

fn dims3(x: &Map) -> Result<[usize; 3]> {
    x.shape().try_into().map_err(|_| Error::ShapeMismatch {
        context: "packed forward expects (c, h, w) maps",
        expected: vec![0; 3],
        actual: x.shape().to_vec(),
    })
}

fn add(a: &Map, b: &Map) -> Result<Map> {
    a.zip_map(b, |x, y| x + y)
}

fn combine(xs: &[Map], lambda: Option<&[f64]>) -> Result<Map> {
    let mut acc = Tensor::zeros(xs[0].shape());
    for (i, x) in xs.iter().enumerate() {
        let l = lambda.map_or(1.0, |l| l[i]);
        x.expect_shape(acc.shape(), "branch combination")?;
        for (a, &v) in acc.data_mut().iter_mut().zip(x.data()) {
            *a += l * v;
        }
    }
    Ok(acc)
}

impl PackedUnit {
    pub fn geometry(&self, h: usize, w: usize) -> Result<ConvGeometry> {
        ConvGeometry::new(
            self.in_channels,
            self.out_channels,
            self.kernel,
            self.kernel,
            self.conv.stride,
            self.conv.padding,
            self.conv.dilation,
            h,
            w,
        )
    }

    /// Integer accumulator `Σ w·a` over valid taps, with `a` the ±1 sign or
    /// the K-bit level index of the input.
    pub fn accumulate(&self, x: &Map, stats: &mut ConvStats) -> Result<Tensor<i64>> {
        let [c, h, w] = dims3(x)?;
        let geom = self.geometry(h, w)?;
        let shape = [c, h, w];
        match self.act {
            PackedAct::Sign => {
                let bits = pack_signs(x.data(), &shape, ZeroRule::PlusOne)?;
                let (acc, s) = binary_conv2d_packed(&bits, &self.filters, &geom, PadMode::Exclude)?;
                *stats += s;
                Ok(acc.map(|v| v as i64))
            }
            PackedAct::Kbit { bits, beta } => {
                let levels = (1u64 << bits) - 1;
                let q: Vec<u64> = x
                    .data()
                    .iter()
                    .map(|&v| (quant::uniform_quantize_scalar(v, bits, beta) * levels as f64 / beta).round() as u64)
                    .collect();
                // Σ w·b over {0,1} planes is (D + S)/2, where D is the ±1 plane
                // dot and S the dot with an all-ones plane.
                let ones = BitTensor::from_bools(&shape, std::iter::repeat(true).take(c * h * w))?;
                let (s_acc, s) = binary_conv2d_packed(&ones, &self.filters, &geom, PadMode::Exclude)?;
                *stats += s;
                let mut acc = Tensor::<i64>::full(&geom.output_shape(), 0);
                for j in 0..bits {
                    let plane = BitTensor::from_bools(&shape, q.iter().map(|v| (v >> j) & 1 == 1))?;
                    let (d, s) = binary_conv2d_packed(&plane, &self.filters, &geom, PadMode::Exclude)?;
                    *stats += s;
                    for ((a, &dv), &sv) in acc.data_mut().iter_mut().zip(d.data()).zip(s_acc.data()) {
                        *a += (1i64 << j) * ((dv + sv) as i64 / 2);
                    }
                }
                Ok(acc)
            }
        }
    }

    pub fn forward(&self, x: &Map, stats: &mut ConvStats) -> Result<Map> {
        let acc = self.accumulate(x, stats)?;
        let [_, oh, ow] = dims3(&acc.map(|v| v as f64))?;
        let plane = oh * ow;
        let mut out = Vec::with_capacity(acc.len());
        for (o, chunk) in acc.data().chunks(plane).enumerate() {
            let (s, b) = (self.scale[o], self.bias[o]);
            out.extend(chunk.iter().map(|&a| match self.order {
                UnitOrder::ReluThenAffine => s * (a.max(0) as f64) + b,
                UnitOrder::AffineThenRelu => (s * a as f64 + b).max(0.0),
            }));
        }
        Tensor::from_vec(acc.shape(), out)
    }
}

impl PackedModel {
    /// A model with the layout `arch` describes and placeholder values.
    pub fn skeleton(arch: &ArchConfig) -> Result<Self> {
        let mut g = ModelGraph::<f64>::build(arch, 0)?;
        g.freeze_bn();
        lower_unchecked(&g)
    }

    fn block_branch(&self, b: usize, i: usize, x: &Map, stats: &mut ConvStats) -> Result<Map> {
        let blk = &self.blocks[b];
        let extra = self.arch.extra_shortcuts;
        let mut h = x.clone();
        for (u, unit) in blk.branches[i].iter().enumerate() {
            let mut y = unit.forward(&h, stats)?;
            if extra {
                let s = if u == 0 { self.shortcut(blk, x)? } else { h };
                y = add(&y, &s)?;
            }
            h = y;
        }
        self.finish(blk, x, h)
    }

    fn layerwise_block(&self, b: usize, x: &Map, stats: &mut ConvStats) -> Result<Map> {
        let blk = &self.blocks[b];
        let extra = self.arch.extra_shortcuts;
        let mut h = x.clone();
        for (u, lambda) in blk.unit_lambdas.iter().enumerate() {
            let outs = blk
                .branches
                .iter()
                .map(|units| units[u].forward(&h, stats))
                .collect::<Result<Vec<_>>>()?;
            let mut y = combine(&outs, lambda.as_deref())?;
            if extra {
                let s = if u == 0 { self.shortcut(blk, x)? } else { h };
                y = add(&y, &s)?;
            }
            h = y;
        }
        self.finish(blk, x, h)
    }

    fn shortcut(&self, blk: &PackedBlock, x: &Map) -> Result<Map> {
        match &blk.projection {
            Some(p) => apply_fp(p, x),
            None => Ok(x.clone()),
        }
    }

    fn finish(&self, blk: &PackedBlock, x: &Map, h: Map) -> Result<Map> {
        if blk.kind == BlockKind::BasicResidual && !self.arch.extra_shortcuts {
            add(&h, &self.shortcut(blk, x)?)
        } else {
            Ok(h)
        }
    }

    fn features(&self, x: &Map, stats: &mut ConvStats) -> Result<Map> {
        let h = apply_fp(&self.stem, x)?;
        match &self.wiring {
            PackedWiring::Layerwise => (0..self.blocks.len()).try_fold(h, |h, b| self.layerwise_block(b, &h, stats)),
            PackedWiring::Groups(groups) => groups.iter().try_fold(h, |h, (blocks, lambda)| {
                let outs = (0..self.arch.k)
                    .map(|i| blocks.iter().try_fold(h.clone(), |hh, &b| self.block_branch(b, i, &hh, stats)))
                    .collect::<Result<Vec<_>>>()?;
                combine(&outs, lambda.as_deref())
            }),
            PackedWiring::Soft { lambdas, gates } => {
                let mut outs = (0..self.arch.k)
                    .map(|i| self.block_branch(0, i, &h, stats))
                    .collect::<Result<Vec<_>>>()?;
                for n in 1..self.blocks.len() {
                    let agg = combine(&outs, lambdas[n - 1].as_deref())?;
                    let c = gates[n]
                        .as_ref()
                        .ok_or_else(|| Error::Structure(format!("block {n} has no gate values")))?;
                    outs = outs
                        .iter()
                        .enumerate()
                        .map(|(i, s)| {
                            let xi = s.zip_map(&agg, |a, b| c[i] * a + (1.0 - c[i]) * b)?;
                            self.block_branch(n, i, &xi, stats)
                        })
                        .collect::<Result<Vec<_>>>()?;
                }
                combine(&outs, lambdas[self.blocks.len() - 1].as_deref())
            }
        }
    }

    /// Logits of one `(c, h, w)` sample, plus the binary work performed.
    pub fn forward_one(&self, x: &Map) -> Result<(Tensor<f64>, ConvStats)> {
        let mut stats = ConvStats::default();
        let f = self.features(x, &mut stats)?;
        let [c, h, w] = dims3(&f)?;
        let out = match &self.head {
            PackedHead::Linear(wt) => {
                let &[o, fi] = wt.shape() else {
                    return Err(Error::Structure("linear head must be 2-d".into()));
                };
                if fi != c {
                    return Err(Error::Structure(format!("head expects {fi} features, got {c}")));
                }
                let pooled: Vec<f64> = f.data().chunks(h * w).map(|p| p.iter().sum::<f64>() / (h * w) as f64).collect();
                let logits = (0..o)
                    .map(|k| wt.data()[k * fi..(k + 1) * fi].iter().zip(&pooled).map(|(a, b)| a * b).sum())
                    .collect();
                Tensor::from_vec(&[o], logits)?
            }
            PackedHead::Pixelwise(wt) => {
                let y = conv2d_forward(&f.reshape(&[1, c, h, w])?, wt, ConvParams::unit())?;
                let (_, o, oh, ow) = y.nchw()?;
                y.reshape(&[o, oh, ow])?
            }
        };
        Ok((out, stats))
    }

    /// Logits for a batch, shaped like the float model's output.
    pub fn forward(&self, x: &Tensor<f64>) -> Result<Tensor<f64>> {
        Ok(self.forward_with_stats(x)?.0)
    }

    pub fn forward_with_stats(&self, x: &Tensor<f64>) -> Result<(Tensor<f64>, ConvStats)> {
        let (n, c, h, w) = x.nchw()?;
        let mut data = Vec::new();
        let mut shape = Vec::new();
        let mut stats = ConvStats::default();
        for s in 0..n {
            let (y, st) = self.forward_one(&x.sample(s).reshape(&[c, h, w])?)?;
            stats += st;
            shape = y.shape().to_vec();
            data.extend_from_slice(y.data());
        }
        shape.insert(0, n);
        Ok((Tensor::from_vec(&shape, data)?, stats))
    }

    pub fn branch_count(&self) -> usize {
        self.arch.k
    }

    /// Packed filter bits across all binarized units.
    pub fn binary_weight_bits(&self) -> usize {
        self.units().map(|u| u.out_channels * u.filters.fan_in()).sum()
    }

    pub fn units(&self) -> impl Iterator<Item = &PackedUnit> {
        self.blocks.iter().flat_map(|b| b.branches.iter().flatten())
    }
}
