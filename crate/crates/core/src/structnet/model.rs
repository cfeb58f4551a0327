use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::config::{ArchConfig, BlockKind, BpacCombine, Decomposition, Nonlinearity, Task};
use crate::bitcore::ConvGeometry;
use crate::error::{Error, Result};
use crate::quant::ActivationScheme;
use crate::scalar::Real;
use crate::tape::{BatchNormState, BnBuffers, Bound, ConvParams, ParamId, ParamStore, Tape, Var};
use crate::tensor::Tensor;

/// One binarized convolution: activation quantizer, binary conv, ReLU and BN.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConvUnit {
    pub weight: ParamId,
    pub bn: BatchNormState,
    pub conv: ConvParams,
    pub in_channels: usize,
    pub out_channels: usize,
}

/// Full-precision convolution followed by BN.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FpConv {
    pub weight: ParamId,
    pub bn: BatchNormState,
    pub conv: ConvParams,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BlockLayout {
    pub kind: BlockKind,
    pub in_channels: usize,
    pub out_channels: usize,
    pub stride: usize,
    /// Shortcut projection, shared by all branches, when the shape changes.
    pub projection: Option<FpConv>,
    /// `branches[i][u]` is unit `u` of branch `i`.
    pub branches: Vec<Vec<ConvUnit>>,
    /// Per-unit combination coefficients for layer-wise decomposition.
    pub unit_lambdas: Vec<Option<ParamId>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroupWiring {
    pub blocks: Vec<usize>,
    pub lambda: Option<ParamId>,
}

/// How branches connect across blocks. A `None` coefficient is a plain sum.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum Wiring {
    /// Every block has a single path; decomposition happens inside each unit.
    Layerwise,
    /// Each group runs K independent cascades whose outputs are combined.
    Groups(Vec<GroupWiring>),
    /// Fusion gates between consecutive blocks; `thetas[0]` is `None`.
    Soft {
        lambdas: Vec<Option<ParamId>>,
        thetas: Vec<Option<ParamId>>,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum Head {
    /// Global average pool then a bias-free linear layer.
    Linear { weight: ParamId },
    /// Bias-free 1×1 convolution producing per-pixel logits.
    Pixelwise { weight: ParamId },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Precision {
    /// Binary forward with surrogate backward.
    #[default]
    Quantized,
    /// Smooth surrogate forward; used for gradient checks.
    Surrogate,
    /// Real weights and the configured pretraining nonlinearity.
    Full,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct ForwardOptions {
    pub training: bool,
    pub precision: Precision,
    /// Fixed gate values per block boundary (`gates[n-1]` feeds block `n`).
    pub gates: Option<Vec<f64>>,
}

impl ForwardOptions {
    pub fn train() -> Self {
        Self {
            training: true,
            ..Self::default()
        }
    }

    pub fn eval() -> Self {
        Self::default()
    }

    pub fn with_precision(mut self, precision: Precision) -> Self {
        self.precision = precision;
        self
    }

    pub fn with_gates(mut self, gates: Vec<f64>) -> Self {
        self.gates = Some(gates);
        self
    }
}

/// Geometry of one binarized convolution at a given input size.
#[derive(Debug, Clone, PartialEq)]
pub struct BinaryLayerInfo {
    pub block: usize,
    pub branch: usize,
    pub unit: usize,
    pub geometry: ConvGeometry,
}

/// Training-time Group-Net: parameters, BN statistics and wiring.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(bound = "T: Serialize + serde::de::DeserializeOwned")]
pub struct ModelGraph<T: Real> {
    pub config: ArchConfig,
    pub store: ParamStore<T>,
    pub buffers: Vec<BnBuffers<T>>,
    pub stem: FpConv,
    pub blocks: Vec<BlockLayout>,
    pub wiring: Wiring,
    pub head: Head,
}

struct Builder<'a, T: Real> {
    store: ParamStore<T>,
    buffers: Vec<BnBuffers<T>>,
    rng: &'a mut ChaCha8Rng,
}

impl<T: Real> Builder<'_, T> {
    fn kaiming(&mut self, name: String, shape: &[usize]) -> ParamId {
        let fan_in: usize = shape[1..].iter().product();
        let normal = Normal::new(0.0, (2.0 / fan_in as f64).sqrt()).expect("positive std");
        let n: usize = shape.iter().product();
        let data = (0..n).map(|_| T::of(normal.sample(self.rng))).collect();
        self.store.add(name, Tensor::from_vec(shape, data).expect("shape"))
    }

    fn bn(&mut self, name: &str, c: usize) -> BatchNormState {
        let gamma = self.store.add(format!("{name}.bn.gamma"), Tensor::full(&[c], T::one()));
        let beta = self.store.add(format!("{name}.bn.beta"), Tensor::zeros(&[c]));
        self.buffers.push(BnBuffers::new(c));
        BatchNormState {
            gamma,
            beta,
            buffers: self.buffers.len() - 1,
        }
    }

    fn lambda(&mut self, name: String, k: usize) -> ParamId {
        self.store.add(name, Tensor::full(&[k], T::of(1.0 / k as f64)))
    }
}

impl<T: Real> ModelGraph<T> {
    pub fn build(config: &ArchConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut b = Builder {
            store: ParamStore::new(),
            buffers: Vec::new(),
            rng: &mut rng,
        };
        let cfg = config;
        let k = cfg.k;
        let nb = cfg.blocks.len();
        let sum_combine = |blk: usize| {
            matches!(cfg.bpac, Some(p) if p.combine == BpacCombine::Sum) && blk + 2 >= nb
        };

        let stem = FpConv {
            weight: b.kaiming("stem.weight".into(), &[cfg.stem_channels, cfg.in_channels, 3, 3]),
            bn: b.bn("stem", cfg.stem_channels),
            conv: ConvParams::same(3, cfg.stem_stride, 1),
        };

        let layerwise = matches!(cfg.decomposition, Decomposition::Direct | Decomposition::Lbd);
        let mut blocks = Vec::with_capacity(nb);
        let mut cin = cfg.stem_channels;
        for (bi, spec) in cfg.blocks.iter().enumerate() {
            let cout = spec.channels;
            let projection = (spec.stride != 1 || cin != cout).then(|| FpConv {
                weight: b.kaiming(format!("block{bi}.proj.weight"), &[cout, cin, 1, 1]),
                bn: b.bn(&format!("block{bi}.proj"), cout),
                conv: ConvParams {
                    stride: spec.stride,
                    padding: 0,
                    dilation: 1,
                },
            });
            let mut branches = Vec::with_capacity(k);
            for br in 0..k {
                let dil = cfg.branch_dilation(bi, br);
                let mut units = Vec::with_capacity(2);
                for u in 0..2 {
                    let (ui, stride) = if u == 0 { (cin, spec.stride) } else { (cout, 1) };
                    let name = format!("block{bi}.branch{br}.unit{u}");
                    units.push(ConvUnit {
                        weight: b.kaiming(format!("{name}.weight"), &[cout, ui, 3, 3]),
                        bn: b.bn(&name, cout),
                        conv: ConvParams::same(3, stride, dil),
                        in_channels: ui,
                        out_channels: cout,
                    });
                }
                branches.push(units);
            }
            let unit_lambdas = (0..2)
                .map(|u| {
                    (cfg.decomposition == Decomposition::Lbd && !sum_combine(bi))
                        .then(|| b.lambda(format!("block{bi}.unit{u}.lambda"), k))
                })
                .collect();
            blocks.push(BlockLayout {
                kind: spec.kind,
                in_channels: cin,
                out_channels: cout,
                stride: spec.stride,
                projection,
                branches,
                unit_lambdas,
            });
            cin = cout;
        }

        let wiring = if layerwise {
            Wiring::Layerwise
        } else if cfg.decomposition == Decomposition::Soft {
            let lambdas = (0..nb)
                .map(|bi| (!sum_combine(bi)).then(|| b.lambda(format!("block{bi}.lambda"), k)))
                .collect();
            let thetas = (0..nb)
                .map(|bi| (bi > 0).then(|| b.store.add(format!("block{bi}.theta"), Tensor::zeros(&[k]))))
                .collect();
            Wiring::Soft { lambdas, thetas }
        } else {
            let groups = cfg
                .partition()?
                .into_iter()
                .enumerate()
                .map(|(p, blocks)| {
                    let lambda = (!blocks.iter().any(|&bi| sum_combine(bi))).then(|| b.lambda(format!("group{p}.lambda"), k));
                    GroupWiring { blocks, lambda }
                })
                .collect();
            Wiring::Groups(groups)
        };

        let head = match cfg.task {
            Task::Classification => Head::Linear {
                weight: b.kaiming("head.weight".into(), &[cfg.num_classes, cin]),
            },
            Task::Segmentation => Head::Pixelwise {
                weight: b.kaiming("head.weight".into(), &[cfg.num_classes, cin, 1, 1]),
            },
        };

        let Builder { store, buffers, .. } = b;
        Ok(Self {
            config: config.clone(),
            store,
            buffers,
            stem,
            blocks,
            wiring,
            head,
        })
    }

    pub fn k(&self) -> usize {
        self.config.k
    }

    /// All binarized units in (block, branch, unit) order.
    pub fn units(&self) -> impl Iterator<Item = (usize, usize, usize, &ConvUnit)> {
        self.blocks.iter().enumerate().flat_map(|(bi, blk)| {
            blk.branches
                .iter()
                .enumerate()
                .flat_map(move |(br, units)| units.iter().enumerate().map(move |(u, unit)| (bi, br, u, unit)))
        })
    }

    /// Number of latent weights behind binarized convolutions.
    pub fn binary_weight_count(&self) -> usize {
        self.units().map(|(_, _, _, u)| self.store.get(u.weight).len()).sum()
    }

    pub fn param_count(&self) -> usize {
        self.store.values().iter().map(|t| t.len()).sum()
    }

    /// Combination coefficients and gate logits, by name.
    pub fn structure_params(&self) -> Vec<(String, Vec<f64>)> {
        self.store
            .ids()
            .filter(|&id| {
                let n = self.store.name(id);
                n.ends_with(".lambda") || n.ends_with(".theta")
            })
            .map(|id| {
                (
                    self.store.name(id).to_string(),
                    self.store.get(id).data().iter().map(|v| v.as_f64()).collect(),
                )
            })
            .collect()
    }

    /// Spatial size after the stem.
    pub fn stem_output_hw(&self, h: usize, w: usize) -> Result<(usize, usize)> {
        let g = self.stem.conv.geometry(&[1, self.config.in_channels, h, w], &[1, self.config.in_channels, 3, 3])?;
        Ok((g.output_h, g.output_w))
    }

    /// Geometry of every binarized convolution for an `h × w` input image.
    pub fn binary_layers(&self, h: usize, w: usize) -> Result<Vec<BinaryLayerInfo>> {
        let (mut h, mut w) = self.stem_output_hw(h, w)?;
        let mut out = Vec::new();
        for (bi, blk) in self.blocks.iter().enumerate() {
            let mut next = (h, w);
            for (br, units) in blk.branches.iter().enumerate() {
                let (mut uh, mut uw) = (h, w);
                for (u, unit) in units.iter().enumerate() {
                    let g = unit.conv.geometry(
                        &[1, unit.in_channels, uh, uw],
                        &[unit.out_channels, unit.in_channels, 3, 3],
                    )?;
                    (uh, uw) = (g.output_h, g.output_w);
                    out.push(BinaryLayerInfo {
                        block: bi,
                        branch: br,
                        unit: u,
                        geometry: g,
                    });
                }
                next = (uh, uw);
            }
            (h, w) = next;
        }
        Ok(out)
    }

    /// Re-estimates BN running statistics as the plain average of batch
    /// statistics over `batches`, leaving the trainable parameters alone.
    pub fn recalibrate_bn<I>(&mut self, batches: I, precision: Precision) -> Result<()>
    where
        I: IntoIterator<Item = Tensor<T>>,
    {
        if self.buffers.iter().any(|b| b.frozen) {
            return Err(Error::InvalidArgument("batch norm statistics are frozen".into()));
        }
        let saved: Vec<f64> = self.buffers.iter().map(|b| b.momentum).collect();
        let opts = ForwardOptions::train().with_precision(precision);
        let mut result = Ok(());
        for (t, x) in batches.into_iter().enumerate() {
            // Running average: the t-th batch gets weight 1/(t+1).
            self.buffers.iter_mut().for_each(|b| b.momentum = 1.0 / (t + 1) as f64);
            if let Err(e) = self.predict(&x, &opts) {
                result = Err(e);
                break;
            }
        }
        for (b, m) in self.buffers.iter_mut().zip(saved) {
            b.momentum = m;
        }
        result
    }

    /// Marks all BN statistics as final.
    pub fn freeze_bn(&mut self) {
        self.buffers.iter_mut().for_each(|b| b.frozen = true);
    }

    /// Logits for `x`; `(n, classes)` or `(n, classes, h, w)`.
    pub fn forward(&mut self, tape: &mut Tape<T>, bound: &mut Bound, x: Var, opts: &ForwardOptions) -> Result<Var> {
        let Self {
            config,
            store,
            buffers,
            stem,
            blocks,
            wiring,
            head,
        } = self;
        let mut cx = Ctx {
            tape,
            bound,
            store,
            buffers,
            opts,
            cfg: config,
        };
        let h = cx.fp_conv(stem, x, true)?;
        let h = cx.body(blocks, wiring, h)?;
        cx.head(head, h)
    }

    /// Stem output for `x`.
    pub fn stem_forward(&mut self, tape: &mut Tape<T>, bound: &mut Bound, x: Var, opts: &ForwardOptions) -> Result<Var> {
        let stem = self.stem.clone();
        let mut cx = self.ctx(tape, bound, opts);
        cx.fp_conv(&stem, x, true)
    }

    /// One branch of one block on its own.
    #[allow(clippy::too_many_arguments)]
    pub fn block_branch_forward(
        &mut self,
        tape: &mut Tape<T>,
        bound: &mut Bound,
        block: usize,
        branch: usize,
        x: Var,
        opts: &ForwardOptions,
    ) -> Result<Var> {
        let blk = self.blocks[block].clone();
        let mut cx = self.ctx(tape, bound, opts);
        cx.block_branch(&blk, branch, x)
    }

    pub fn head_forward(&mut self, tape: &mut Tape<T>, bound: &mut Bound, x: Var, opts: &ForwardOptions) -> Result<Var> {
        let head = self.head.clone();
        let mut cx = self.ctx(tape, bound, opts);
        cx.head(&head, x)
    }

    fn ctx<'a>(&'a mut self, tape: &'a mut Tape<T>, bound: &'a mut Bound, opts: &'a ForwardOptions) -> Ctx<'a, T> {
        Ctx {
            tape,
            bound,
            store: &self.store,
            buffers: &mut self.buffers,
            opts,
            cfg: &self.config,
        }
    }

    /// Float forward of a whole batch on an inference tape.
    pub fn predict(&mut self, x: &Tensor<T>, opts: &ForwardOptions) -> Result<Tensor<T>> {
        let mut tape = Tape::inference();
        let mut bound = Bound::new(&self.store);
        let xv = tape.constant(x.clone());
        let y = self.forward(&mut tape, &mut bound, xv, opts)?;
        Ok(tape.value(y).clone())
    }
}

struct Ctx<'a, T: Real> {
    tape: &'a mut Tape<T>,
    bound: &'a mut Bound,
    store: &'a ParamStore<T>,
    buffers: &'a mut [BnBuffers<T>],
    opts: &'a ForwardOptions,
    cfg: &'a ArchConfig,
}

impl<T: Real> Ctx<'_, T> {
    fn body(&mut self, blocks: &[BlockLayout], wiring: &Wiring, x: Var) -> Result<Var> {
        let cx = self;
        let k = cx.cfg.k;
        match wiring {
            Wiring::Layerwise => blocks.iter().try_fold(x, |h, blk| cx.layerwise_block(blk, h)),
            Wiring::Groups(groups) => groups.iter().try_fold(x, |h, g| {
                let outs = (0..k)
                    .map(|i| g.blocks.iter().try_fold(h, |hh, &bi| cx.block_branch(&blocks[bi], i, hh)))
                    .collect::<Result<Vec<_>>>()?;
                cx.aggregate(&outs, g.lambda)
            }),
            Wiring::Soft { lambdas, thetas } => {
                let nb = blocks.len();
                if let Some(g) = &cx.opts.gates {
                    if g.len() + 1 != nb {
                        return Err(Error::InvalidArgument(format!(
                            "{} gate values given for {} block boundaries",
                            g.len(),
                            nb - 1
                        )));
                    }
                }
                let mut outs = (0..k)
                    .map(|i| cx.block_branch(&blocks[0], i, x))
                    .collect::<Result<Vec<_>>>()?;
                for n in 1..nb {
                    let agg = cx.aggregate(&outs, lambdas[n - 1])?;
                    let mut next = Vec::with_capacity(outs.len());
                    for (i, &straight) in outs.iter().enumerate() {
                        let c = match &cx.opts.gates {
                            Some(g) => cx.tape.constant(Tensor::scalar(T::of(g[n - 1]))),
                            None => {
                                let theta = thetas[n].ok_or_else(|| Error::Structure(format!("block {n} has no gate")))?;
                                let th = cx.param(theta);
                                let t = cx.tape.pick(th, i)?;
                                cx.tape.sigmoid(t)
                            }
                        };
                        let xi = cx.gate_mix(straight, agg, c)?;
                        next.push(cx.block_branch(&blocks[n], i, xi)?);
                    }
                    outs = next;
                }
                cx.aggregate(&outs, lambdas[nb - 1])
            }
        }
    }

    fn param(&mut self, id: ParamId) -> Var {
        self.bound.var(self.tape, self.store, id)
    }

    fn bn(&mut self, bn: &BatchNormState, x: Var) -> Result<Var> {
        let g = self.param(bn.gamma);
        let b = self.param(bn.beta);
        self.tape.batch_norm(x, g, b, &mut self.buffers[bn.buffers], self.opts.training)
    }

    fn fp_conv(&mut self, layer: &FpConv, x: Var, relu: bool) -> Result<Var> {
        let w = self.param(layer.weight);
        let y = self.tape.conv2d(x, w, layer.conv)?;
        let y = self.bn(&layer.bn, y)?;
        Ok(if relu { self.tape.relu(y) } else { y })
    }

    fn unit(&mut self, unit: &ConvUnit, x: Var) -> Result<Var> {
        let w = self.param(unit.weight);
        let q = &self.cfg.quant;
        if self.opts.precision == Precision::Full {
            let a = match self.cfg.pretrain_nonlinearity {
                Nonlinearity::Relu => self.tape.relu(x),
                Nonlinearity::Tanh => self.tape.tanh(x),
            };
            let y = self.tape.conv2d(a, w, unit.conv)?;
            let y = self.tape.relu(y);
            return self.bn(&unit.bn, y);
        }
        let surrogate = self.opts.precision == Precision::Surrogate;
        let wb = self.tape.binarize_weight(w, q, surrogate)?;
        match q.activation_scheme {
            ActivationScheme::BinarySign | ActivationScheme::FullPrecision => {
                let a = if q.activation_scheme == ActivationScheme::BinarySign {
                    self.tape.sign_act(x, surrogate)?
                } else {
                    x
                };
                let y = self.tape.conv2d(a, wb, unit.conv)?;
                let y = self.tape.relu(y);
                self.bn(&unit.bn, y)
            }
            ActivationScheme::UniformKbit => {
                let a = self.tape.uniform_quant(x, q.activation_bits, q.clip_bound, surrogate)?;
                let y = self.tape.conv2d(a, wb, unit.conv)?;
                let y = self.bn(&unit.bn, y)?;
                Ok(self.tape.relu(y))
            }
        }
    }

    fn shortcut(&mut self, blk: &BlockLayout, x: Var) -> Result<Var> {
        match &blk.projection {
            Some(p) => self.fp_conv(p, x, false),
            None => Ok(x),
        }
    }

    /// Combination `Σ λ_i x_i`; a missing λ means a plain sum.
    fn aggregate(&mut self, xs: &[Var], lambda: Option<ParamId>) -> Result<Var> {
        match lambda {
            None => self.tape.add_n(xs),
            Some(id) => {
                let l = self.param(id);
                let terms = xs
                    .iter()
                    .enumerate()
                    .map(|(i, &x)| {
                        let li = self.tape.pick(l, i)?;
                        self.tape.mul_scalar(x, li)
                    })
                    .collect::<Result<Vec<_>>>()?;
                self.tape.add_n(&terms)
            }
        }
    }

    fn gate_mix(&mut self, straight: Var, aggregated: Var, c: Var) -> Result<Var> {
        let a = self.tape.mul_scalar(straight, c)?;
        let oc = self.tape.one_minus(c);
        let b = self.tape.mul_scalar(aggregated, oc)?;
        self.tape.add(a, b)
    }

    fn block_branch(&mut self, blk: &BlockLayout, branch: usize, x: Var) -> Result<Var> {
        let extra = self.cfg.extra_shortcuts;
        let mut h = x;
        for (u, unit) in blk.branches[branch].iter().enumerate() {
            let mut y = self.unit(unit, h)?;
            if extra {
                let s = if u == 0 { self.shortcut(blk, x)? } else { h };
                y = self.tape.add(y, s)?;
            }
            h = y;
        }
        self.finish_block(blk, x, h)
    }

    fn layerwise_block(&mut self, blk: &BlockLayout, x: Var) -> Result<Var> {
        let extra = self.cfg.extra_shortcuts;
        let mut h = x;
        for u in 0..blk.unit_lambdas.len() {
            let outs = blk
                .branches
                .iter()
                .map(|units| self.unit(&units[u], h))
                .collect::<Result<Vec<_>>>()?;
            let mut y = if outs.len() == 1 {
                outs[0]
            } else {
                self.aggregate(&outs, blk.unit_lambdas[u])?
            };
            if extra {
                let s = if u == 0 { self.shortcut(blk, x)? } else { h };
                y = self.tape.add(y, s)?;
            }
            h = y;
        }
        self.finish_block(blk, x, h)
    }

    /// Block-level residual; per-unit shortcuts replace it when enabled.
    fn finish_block(&mut self, blk: &BlockLayout, x: Var, h: Var) -> Result<Var> {
        if blk.kind == BlockKind::BasicResidual && !self.cfg.extra_shortcuts {
            let s = self.shortcut(blk, x)?;
            self.tape.add(h, s)
        } else {
            Ok(h)
        }
    }

    fn head(&mut self, head: &Head, x: Var) -> Result<Var> {
        match head {
            Head::Linear { weight } => {
                let p = self.tape.global_avg_pool(x)?;
                let w = self.param(*weight);
                self.tape.linear(p, w)
            }
            Head::Pixelwise { weight } => {
                let w = self.param(*weight);
                self.tape.conv2d(x, w, ConvParams::unit())
            }
        }
    }
}
