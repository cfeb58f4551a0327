//! Acceptance gate. Prints one PASS/FAIL line per criterion and exits
//! nonzero if any fails. Numeric arguments select a subset, e.g.
//! `cargo test --release --test acceptance -- 1 2 9`.

use std::cell::RefCell;
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::PathBuf;
use std::time::Instant;

use groupnet::bitcore::{binary_conv2d, binary_conv2d_packed, xnor_popcount_words, BitTensor, ConvGeometry, PackedFilters, PadMode};
use groupnet::costmodel::{accumulator_range, speedup_ratio, Scheme};
use groupnet::quant::{fixedpoint_dot, fixedpoint_dot_levels, sign_surrogate_factor, FixedPointDot, QuantSpec};
use groupnet::structnet::{
    gate_degeneracy_check, lower_to_inference, ArchConfig, BlockSpec, Decomposition, ForwardOptions, GateMode, ModelGraph,
    Precision, Wiring,
};
use groupnet::tape::{check_gradients, BnBuffers, Bound, ConvParams, GradCheckReport, ParamId, Tape};
use groupnet::Tensor;
use groupnet_cli::config::RunConfig;
use groupnet_cli::data::load_splits;
use groupnet_cli::modelfile::ModelFile;
use groupnet_cli::train::train_on;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

type Outcome = Result<String, String>;

fn ensure(ok: bool, msg: impl FnOnce() -> String) -> Result<(), String> {
    if ok {
        Ok(())
    } else {
        Err(msg())
    }
}

fn workspace() -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("../..")
}

// ---------------------------------------------------------------- 1

/// Direct ±1 convolution over the unpacked bits.
fn conv_oracle(x: &[bool], w: &[bool], g: &ConvGeometry, pad: PadMode) -> Vec<i32> {
    let s = |b: bool| if b { 1 } else { -1 };
    let (c, h, wd) = (g.in_channels, g.input_h, g.input_w);
    let mut out = Vec::new();
    for o in 0..g.out_channels {
        for oy in 0..g.output_h {
            for ox in 0..g.output_w {
                let mut acc = 0i32;
                for ci in 0..c {
                    for ky in 0..g.kernel_h {
                        for kx in 0..g.kernel_w {
                            let wv = s(w[((o * c + ci) * g.kernel_h + ky) * g.kernel_w + kx]);
                            let iy = (oy * g.stride + ky * g.dilation) as isize - g.padding as isize;
                            let ix = (ox * g.stride + kx * g.dilation) as isize - g.padding as isize;
                            if iy >= 0 && ix >= 0 && (iy as usize) < h && (ix as usize) < wd {
                                acc += wv * s(x[(ci * h + iy as usize) * wd + ix as usize]);
                            } else if pad == PadMode::MinusOne {
                                acc -= wv;
                            }
                        }
                    }
                }
                out.push(acc);
            }
        }
    }
    out
}

fn kernel_exactness() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let start = Instant::now();
    let mut done = 0;
    let mut outputs = 0usize;
    while done < 1000 {
        let (cin, cout) = (rng.random_range(1..=8), rng.random_range(1..=8));
        let (kh, kw) = (rng.random_range(1..=3), rng.random_range(1..=3));
        let (h, w) = (rng.random_range(1..=9), rng.random_range(1..=9));
        let dilation = rng.random_range(1..=3);
        let stride = rng.random_range(1..=2);
        let padding = rng.random_range(0..=dilation * (kh.max(kw) - 1));
        let Ok(g) = ConvGeometry::new(cin, cout, kh, kw, stride, padding, dilation, h, w) else { continue };
        let xb: Vec<bool> = (0..cin * h * w).map(|_| rng.random()).collect();
        let wb: Vec<bool> = (0..cout * cin * kh * kw).map(|_| rng.random()).collect();
        let x = BitTensor::from_bools(&g.input_shape(), xb.iter().copied()).map_err(|e| e.to_string())?;
        let wt = BitTensor::from_bools(&g.weight_shape(), wb.iter().copied()).map_err(|e| e.to_string())?;
        let filters = PackedFilters::from_bit_tensor(&wt).map_err(|e| e.to_string())?;
        for pad in [PadMode::MinusOne, PadMode::Exclude] {
            let (y, _) = binary_conv2d_packed(&x, &filters, &g, pad).map_err(|e| e.to_string())?;
            let want = conv_oracle(&xb, &wb, &g, pad);
            ensure(y.data() == want.as_slice(), || format!("{g:?} {pad:?} differs from the oracle"))?;
            outputs += want.len();
        }
        let y = binary_conv2d(&x, &wt, &g).map_err(|e| e.to_string())?;
        ensure(y.data() == conv_oracle(&xb, &wb, &g, PadMode::MinusOne).as_slice(), || {
            format!("{g:?} binary_conv2d differs from the oracle")
        })?;
        done += 1;
    }
    let secs = start.elapsed().as_secs_f64();
    ensure(secs < 60.0, || format!("took {secs:.1}s"))?;
    Ok(format!("1000 geometries, {outputs} outputs exact in both pad modes, {secs:.2}s"))
}

// ---------------------------------------------------------------- 2

fn speedup_golden() -> Outcome {
    let g = ConvGeometry::same(256, 256, 3, 1, 1, 28, 28).map_err(|e| e.to_string())?;
    let s = speedup_ratio(&g, 5).map_err(|e| e.to_string())?;
    ensure((s - 12.45).abs() <= 0.01, || format!("sigma = {s:.4}"))?;
    Ok(format!("sigma = {s:.4}"))
}

// ---------------------------------------------------------------- 3

fn fixed_point_oracle() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    for case in 0..500 {
        let bits: u32 = rng.random_range(1..=3);
        let m = rng.random_range(1..=64);
        let w: Vec<f64> = (0..m).map(|_| rng.random_range(-1.2..1.2)).collect();
        let x: Vec<f64> = (0..m).map(|_| rng.random_range(-1.2..1.2)).collect();
        // Quantize each operand to its odd integer code, then multiply.
        let l = ((1u32 << bits) - 1) as f64;
        let code = |v: f64| 2 * ((v.clamp(-1.0, 1.0) + 1.0) * 0.5 * l).round() as i64 - l as i64;
        let want: i64 = w.iter().zip(&x).map(|(&a, &b)| code(a) * code(b)).sum();
        let deq: f64 = w.iter().zip(&x).map(|(&a, &b)| code(a) as f64 * code(b) as f64).sum::<f64>() / (l * l);
        let got = fixedpoint_dot(&w, &x, bits).map_err(|e| e.to_string())?;
        ensure(got.integer == want, || format!("case {case}: K={bits} M={m} got {} want {want}", got.integer))?;
        ensure((got.value() - deq).abs() < 1e-9, || format!("case {case}: value {} vs {deq}", got.value()))?;
        ensure(got.xnor_dots == (bits * bits) as u64, || format!("case {case}: {} plane dots", got.xnor_dots))?;
    }
    Ok("500 cases exact".into())
}

// ---------------------------------------------------------------- 4

fn rand_tensor(rng: &mut ChaCha8Rng, shape: &[usize], lo: f64, hi: f64) -> Tensor<f64> {
    let n = shape.iter().product();
    Tensor::from_vec(shape, (0..n).map(|_| rng.random_range(lo..hi)).collect()).unwrap()
}

/// Magnitudes in [0.1, 0.9], away from the quantizer breakpoints.
fn smooth_tensor(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor<f64> {
    let n = shape.iter().product();
    let data = (0..n)
        .map(|_| {
            let m = rng.random_range(0.1..0.9);
            if rng.random_bool(0.5) {
                m
            } else {
                -m
            }
        })
        .collect();
    Tensor::from_vec(shape, data).unwrap()
}

fn toy(decomposition: Decomposition, k: usize, extra: bool) -> ArchConfig {
    ArchConfig {
        in_channels: 1,
        num_classes: 5,
        stem_channels: 4,
        blocks: vec![
            BlockSpec::new(4, 1),
            BlockSpec::new(4, 1),
            BlockSpec::new(6, 2),
            BlockSpec::new(6, 1),
        ],
        k,
        decomposition,
        extra_shortcuts: extra,
        ..ArchConfig::default()
    }
}

fn three_block_soft(k: usize) -> ArchConfig {
    ArchConfig {
        blocks: vec![BlockSpec::new(4, 1), BlockSpec::new(6, 2), BlockSpec::new(6, 1)],
        ..toy(Decomposition::Soft, k, false)
    }
}

fn normal(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor<f64> {
    // Sum of uniforms, close enough to Gaussian for test inputs.
    let n: usize = shape.iter().product();
    let data = (0..n).map(|_| (0..4).map(|_| rng.random_range(-1.0..1.0)).sum::<f64>() * 0.866).collect();
    Tensor::from_vec(shape, data).unwrap()
}

/// Moves continuous parameters and BN statistics off their initial values.
fn perturb(model: &mut ModelGraph<f64>, seed: u64) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for id in model.store.ids().collect::<Vec<_>>() {
        let name = model.store.name(id).to_string();
        let t = model.store.get_mut(id);
        if name.ends_with("gamma") {
            t.data_mut().iter_mut().for_each(|v| *v = rng.random_range(0.5..1.5));
        } else if name.ends_with("beta") || name.ends_with("theta") {
            t.data_mut().iter_mut().for_each(|v| *v = rng.random_range(-1.0..1.0));
        } else if name.ends_with("lambda") {
            t.data_mut().iter_mut().for_each(|v| *v += rng.random_range(-0.5..0.5));
        }
    }
    for b in &mut model.buffers {
        b.running_mean.iter_mut().for_each(|v| *v = rng.random_range(-0.5..0.5));
        b.running_var.iter_mut().for_each(|v| *v = rng.random_range(0.3..1.3));
    }
    model.freeze_bn();
}

fn grad_ok(name: &str, r: GradCheckReport, worst: &mut f64) -> Result<(), String> {
    *worst = worst.max(r.max_rel_error);
    ensure(r.max_rel_error < 1e-4, || format!("{name}: {r:?}"))
}

fn gradient_suite() -> Outcome {
    let e = |e: groupnet::Error| e.to_string();
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let mut worst = 0.0f64;

    let x = smooth_tensor(&mut rng, &[2, 3]);
    let s = rand_tensor(&mut rng, &[1], 0.5, 1.5);
    let r = check_gradients(
        |t, v| {
            let a = t.tanh(v[0]);
            let b = t.sigmoid(v[0]);
            let c = t.relu(v[0]);
            let d = t.mul_scalar(a, v[1])?;
            let e = t.sub(d, b)?;
            let f = t.one_minus(c);
            let g = t.add_n(&[e, f, a])?;
            let h = t.add(g, b)?;
            let h = t.scale(h, 0.7);
            let p = t.pick(v[0], 4)?;
            let q = t.mul_scalar(h, p)?;
            let m = t.mean(q);
            let n = t.sum(q);
            t.add(m, n)
        },
        &[x, s],
        1e-6,
    )
    .map_err(e)?;
    grad_ok("elementwise", r, &mut worst)?;

    let x = rand_tensor(&mut rng, &[2, 2, 5, 4], -1.0, 1.0);
    let w = rand_tensor(&mut rng, &[3, 2, 3, 3], -1.0, 1.0);
    for p in [ConvParams::same(3, 1, 1), ConvParams { stride: 2, padding: 2, dilation: 2 }] {
        let r = check_gradients(
            |t, v| {
                let y = t.conv2d(v[0], v[1], p)?;
                let y = t.tanh(y);
                Ok(t.sum(y))
            },
            &[x.clone(), w.clone()],
            1e-6,
        )
        .map_err(e)?;
        grad_ok("conv2d", r, &mut worst)?;
    }

    let x = rand_tensor(&mut rng, &[3, 2, 2, 2], -2.0, 2.0);
    let g = rand_tensor(&mut rng, &[2], 0.5, 1.5);
    let b = rand_tensor(&mut rng, &[2], -0.5, 0.5);
    for training in [true, false] {
        let r = check_gradients(
            |t, v| {
                let mut buf = BnBuffers::new(2);
                buf.running_var.iter_mut().for_each(|v| *v = 0.7);
                let y = t.batch_norm(v[0], v[1], v[2], &mut buf, training)?;
                let y = t.tanh(y);
                Ok(t.sum(y))
            },
            &[x.clone(), g.clone(), b.clone()],
            1e-6,
        )
        .map_err(e)?;
        grad_ok("batch_norm", r, &mut worst)?;
    }

    let x = rand_tensor(&mut rng, &[3, 4, 2, 2], -1.0, 1.0);
    let w = rand_tensor(&mut rng, &[5, 4], -1.0, 1.0);
    let r = check_gradients(
        |t, v| {
            let p = t.global_avg_pool(v[0])?;
            let l = t.linear(p, v[1])?;
            t.softmax_cross_entropy(l, &[0, 4, 2])
        },
        &[x.clone(), w],
        1e-6,
    )
    .map_err(e)?;
    grad_ok("classification head", r, &mut worst)?;
    let labels: Vec<usize> = (0..12).map(|i| i % 4).collect();
    let r = check_gradients(|t, v| t.softmax_ce_nchw(v[0], &labels), &[x], 1e-6).map_err(e)?;
    grad_ok("pixel cross-entropy", r, &mut worst)?;

    let x = smooth_tensor(&mut rng, &[1, 2, 3, 3]);
    let w = rand_tensor(&mut rng, &[2, 2, 3, 3], -1.0, 1.0);
    let spec = QuantSpec::default();
    let r = check_gradients(
        |t, v| {
            let a = t.sign_act(v[0], true)?;
            let wb = t.binarize_weight(v[1], &spec, true)?;
            let y = t.conv2d(a, wb, ConvParams::same(3, 1, 1))?;
            let y = t.scale(y, 0.3);
            let q = t.uniform_quant(y, 2, 1.0, true)?;
            let y = t.tanh(y);
            let s = t.add(y, q)?;
            Ok(t.sum(s))
        },
        &[x, w],
        1e-6,
    )
    .map_err(e)?;
    grad_ok("quantizer surrogates", r, &mut worst)?;

    // Whole soft-gated network through its smooth surrogate.
    let mut cfg = three_block_soft(2);
    cfg.stem_channels = 3;
    cfg.blocks = vec![BlockSpec::new(3, 1), BlockSpec::new(4, 2), BlockSpec::new(4, 1)];
    let mut m = ModelGraph::<f64>::build(&cfg, 21).map_err(e)?;
    perturb(&mut m, 22);
    let binary: Vec<ParamId> = m.units().map(|(_, _, _, u)| u.weight).collect();
    let ids: Vec<ParamId> = m.store.ids().filter(|id| !binary.contains(id)).collect();
    let names: Vec<String> = ids.iter().map(|&id| m.store.name(id).to_string()).collect();
    for kind in ["lambda", "theta", "gamma", "beta"] {
        ensure(names.iter().any(|n| n.ends_with(kind)), || format!("no {kind} parameter checked"))?;
    }
    let inputs: Vec<Tensor<f64>> = ids.iter().map(|&id| m.store.get(id).clone()).collect();
    let x = normal(&[2, 1, 6, 6], &mut ChaCha8Rng::seed_from_u64(23));
    let cell = RefCell::new(m);
    let opts = ForwardOptions::eval().with_precision(Precision::Surrogate);
    let r = check_gradients(
        |tape: &mut Tape<f64>, vars| {
            let mut m = cell.borrow_mut();
            let mut bound = Bound::new(&m.store);
            for (&id, &v) in ids.iter().zip(vars) {
                bound.set(id, v);
            }
            let xv = tape.constant(x.clone());
            let y = m.forward(tape, &mut bound, xv, &opts)?;
            tape.softmax_cross_entropy(y, &[1, 3])
        },
        &inputs,
        1e-6,
    )
    .map_err(e)?;
    let checked = r.checked;
    grad_ok("soft Group-Net", r, &mut worst)?;

    let want = [0.0, 1.0, 2.0, 1.0, 0.0];
    for (x, w) in [-1.5, -0.5, 0.0, 0.5, 1.5].into_iter().zip(want) {
        let f = sign_surrogate_factor::<f64>(x);
        ensure(f == w, || format!("surrogate factor at {x} is {f}, expected {w}"))?;
    }
    Ok(format!("max rel error {worst:.2e}, {checked} network coordinates, surrogate factors exact"))
}

// ---------------------------------------------------------------- 5

/// Runs `m` as K branch cascades through `stem`, the blocks and the head,
/// combining at each closed boundary with that block's λ.
fn gated_oracle(m: &mut ModelGraph<f64>, x: &Tensor<f64>, open: &[bool]) -> Tensor<f64> {
    let Wiring::Soft { lambdas, .. } = m.wiring.clone() else { panic!("not a soft model") };
    let k = m.k();
    let opts = ForwardOptions::eval();
    let combine = |m: &ModelGraph<f64>, outs: &[Tensor<f64>], b: usize| {
        let l = lambdas[b].map(|id| m.store.get(id).data().to_vec());
        let mut acc = Tensor::zeros(outs[0].shape());
        for (i, o) in outs.iter().enumerate() {
            let c = l.as_ref().map_or(1.0, |l| l[i]);
            for (a, v) in acc.data_mut().iter_mut().zip(o.data()) {
                *a += c * v;
            }
        }
        acc
    };
    let run = |m: &mut ModelGraph<f64>, b: usize, i: usize, h: &Tensor<f64>| {
        let mut tape = Tape::inference();
        let mut bound = Bound::new(&m.store);
        let hv = tape.constant(h.clone());
        let y = m.block_branch_forward(&mut tape, &mut bound, b, i, hv, &opts).unwrap();
        tape.value(y).clone()
    };
    let mut tape = Tape::inference();
    let mut bound = Bound::new(&m.store);
    let xv = tape.constant(x.clone());
    let stem = m.stem_forward(&mut tape, &mut bound, xv, &opts).unwrap();
    let stem = tape.value(stem).clone();
    let mut outs: Vec<Tensor<f64>> = (0..k).map(|i| run(m, 0, i, &stem)).collect();
    for b in 1..m.blocks.len() {
        let agg = combine(m, &outs, b - 1);
        outs = (0..k).map(|i| run(m, b, i, if open[b - 1] { &outs[i] } else { &agg })).collect();
    }
    let feat = combine(m, &outs, m.blocks.len() - 1);
    let mut tape = Tape::inference();
    let mut bound = Bound::new(&m.store);
    let f = tape.constant(feat);
    let y = m.head_forward(&mut tape, &mut bound, f, &opts).unwrap();
    tape.value(y).clone()
}

fn gate_degeneracy() -> Outcome {
    let mut m = ModelGraph::<f64>::build(&three_block_soft(3), 2).map_err(|e| e.to_string())?;
    perturb(&mut m, 12);
    let x = normal(&[4, 1, 8, 8], &mut ChaCha8Rng::seed_from_u64(8));
    let cases = [
        (GateMode::Closed, vec![false, false], Decomposition::GbdV1, vec![vec![0], vec![1], vec![2]]),
        (GateMode::Pattern(vec![true, false]), vec![true, false], Decomposition::GbdV1, vec![vec![0, 1], vec![2]]),
        (GateMode::Pattern(vec![false, true]), vec![false, true], Decomposition::GbdV1, vec![vec![0], vec![1, 2]]),
        (GateMode::Open, vec![true, true], Decomposition::GbdV3, vec![vec![0, 1, 2]]),
    ];
    let mut worst = 0.0f64;
    for (mode, open, d, part) in cases {
        let r = gate_degeneracy_check(&m, &mode, &x, 1e-6).map_err(|e| e.to_string())?;
        ensure(r.equal && r.max_abs_diff <= 1e-6, || format!("{mode:?}: hardened model differs by {}", r.max_abs_diff))?;
        ensure(r.decomposition == d && r.partition == part, || format!("{mode:?}: got {:?} {:?}", r.decomposition, r.partition))?;
        let gates: Vec<f64> = open.iter().map(|&o| if o { 1.0 } else { 0.0 }).collect();
        let soft = m.predict(&x, &ForwardOptions::eval().with_gates(gates)).map_err(|e| e.to_string())?;
        let diff = soft.max_abs_diff(&gated_oracle(&mut m, &x, &open));
        ensure(diff <= 1e-6, || format!("{mode:?}: branch-cascade oracle differs by {diff}"))?;
        worst = worst.max(diff).max(r.max_abs_diff);
    }
    let closed = gated_oracle(&mut m, &x, &[false, false]);
    let open = gated_oracle(&mut m, &x, &[true, true]);
    ensure(closed.max_abs_diff(&open) > 1e-3, || "closed and open gates give the same logits".into())?;
    Ok(format!("closed, two-block groups and open all match, max deviation {worst:.2e}"))
}

// ---------------------------------------------------------------- 6

const VARIANTS: [(Decomposition, usize); 6] = [
    (Decomposition::Direct, 1),
    (Decomposition::Lbd, 3),
    (Decomposition::GbdV1, 3),
    (Decomposition::GbdV2, 3),
    (Decomposition::GbdV3, 3),
    (Decomposition::Soft, 3),
];

fn lowering_equivalence() -> Outcome {
    let mut worst = 0.0f64;
    for (i, (d, k)) in VARIANTS.into_iter().enumerate() {
        for extra in [false, true] {
            let cfg = toy(d, k, extra);
            let seed = 10 * i as u64 + extra as u64;
            let mut model = ModelGraph::<f64>::build(&cfg, seed).map_err(|e| e.to_string())?;
            perturb(&mut model, seed + 100);
            let packed = lower_to_inference(&model).map_err(|e| e.to_string())?;
            let x = normal(&[100, 1, 8, 8], &mut ChaCha8Rng::seed_from_u64(seed + 200));
            let float = model.predict(&x, &ForwardOptions::eval()).map_err(|e| e.to_string())?;
            let low = packed.forward(&x).map_err(|e| e.to_string())?;
            ensure(float.shape() == low.shape(), || format!("{d:?}: shapes differ"))?;
            let gap = float.max_abs_diff(&low);
            ensure(gap <= 1e-4, || format!("{d:?} extra_shortcuts={extra}: gap {gap}"))?;
            worst = worst.max(gap);
        }
    }
    Ok(format!("12 models on 100 inputs, max gap {worst:.2e}"))
}

// ---------------------------------------------------------------- 7

fn mnist_config(dec: &str, k: usize, seed: u64) -> Result<RunConfig, String> {
    let data = workspace().join("data/mnist");
    let o = vec![
        format!("arch.decomposition=\"{dec}\""),
        format!("arch.k={k}"),
        format!("seed={seed}"),
        "optimizer.epochs=3".into(),
        "optimizer.milestones=[2]".into(),
        format!("data.path=\"{}\"", data.display()),
    ];
    RunConfig::load(&workspace().join("configs/mnist-soft.toml"), &o).map_err(|e| e.to_string())
}

fn mnist_ordering() -> Outcome {
    let start = Instant::now();
    let variants = [("soft", 5), ("direct", 1), ("gbd-v1", 5), ("lbd", 5)];
    let mut acc = [[0.0; 3]; 4];
    for (s, seed) in [1u64, 2, 3].into_iter().enumerate() {
        let cfg = mnist_config("soft", 5, seed)?;
        let splits = load_splits(&cfg.data, seed).map_err(|e| e.to_string())?;
        for (v, &(dec, k)) in variants.iter().enumerate() {
            let cfg = mnist_config(dec, k, seed)?;
            let out = train_on(&cfg, &splits, &mut |_| {}).map_err(|e| e.to_string())?;
            acc[v][s] = out.test.top1 * 100.0;
            println!("  seed {seed} {dec} K={k}: top1 {:.2}% ({:.0}s elapsed)", acc[v][s], start.elapsed().as_secs_f64());
        }
    }
    let mean: Vec<f64> = acc.iter().map(|a| a.iter().sum::<f64>() / 3.0).collect();
    let secs = start.elapsed().as_secs_f64();
    let summary = format!(
        "mean top1 soft {:.2}, direct {:.2}, gbd-v1 {:.2}, lbd {:.2}; {secs:.0}s",
        mean[0], mean[1], mean[2], mean[3]
    );
    ensure(mean[0] >= mean[1] + 2.0, || format!("soft is not 2 points above direct: {summary}"))?;
    ensure(mean[2] >= mean[3], || format!("gbd-v1 is below lbd: {summary}"))?;
    ensure(secs <= 7200.0, || format!("over the 2 hour budget: {summary}"))?;
    Ok(summary)
}

// ---------------------------------------------------------------- 8

fn bpac_property() -> Outcome {
    let start = Instant::now();
    let (mut bpac_sum, mut base_sum) = (0.0, 0.0);
    for seed in [1u64, 2, 3] {
        let bpac = RunConfig::load(&workspace().join("configs/shapes-bpac.toml"), &[format!("seed={seed}")])
            .map_err(|e| e.to_string())?;
        let mut base = bpac.clone();
        base.arch.bpac = None;
        // Each block runs at the median of the rates BPAC gives its branches.
        let n = base.arch.blocks.len();
        base.arch.blocks[n - 1].dilation = 4;
        base.arch.blocks[n - 2].dilation = 8;
        base.validate().map_err(|e| e.to_string())?;

        let a = ModelGraph::<f32>::build(&bpac.arch, seed).map_err(|e| e.to_string())?;
        let b = ModelGraph::<f32>::build(&base.arch, seed).map_err(|e| e.to_string())?;
        ensure(a.param_count() == b.param_count(), || format!("{} vs {} parameters", a.param_count(), b.param_count()))?;

        let splits = load_splits(&bpac.data, seed).map_err(|e| e.to_string())?;
        let ra = train_on(&bpac, &splits, &mut |_| {}).map_err(|e| e.to_string())?;
        let rb = train_on(&base, &splits, &mut |_| {}).map_err(|e| e.to_string())?;
        let probe = splits.test.images.gather(&[0, 1]);
        let (_, sa) = ra.file.model.forward_with_stats(&probe).map_err(|e| e.to_string())?;
        let (_, sb) = rb.file.model.forward_with_stats(&probe).map_err(|e| e.to_string())?;
        ensure(sa == sb, || format!("binary op counts differ: {sa:?} vs {sb:?}"))?;
        println!(
            "  seed {seed}: bpac miou {:.4}, same-rate miou {:.4} ({:.0}s elapsed)",
            ra.test.miou,
            rb.test.miou,
            start.elapsed().as_secs_f64()
        );
        bpac_sum += ra.test.miou;
        base_sum += rb.test.miou;
    }
    let summary = format!("mean miou bpac {:.4}, same-rate {:.4}, equal parameter and op counts", bpac_sum / 3.0, base_sum / 3.0);
    ensure(bpac_sum >= base_sum, || summary.clone())?;
    Ok(summary)
}

// ---------------------------------------------------------------- 9

fn accumulator_ranges() -> Outcome {
    let m = 6;
    let all: Vec<u64> = (0..1u64 << m).collect();
    let mut notes = Vec::new();
    for k in 1..=3usize {
        let (lo, hi) = accumulator_range(Scheme::GroupNet, k, m).map_err(|e| e.to_string())?;
        ensure((lo, hi) == (-((k * m) as i64), (k * m) as i64), || format!("K={k}: range ({lo}, {hi})"))?;
        let (mut min, mut max) = (i64::MAX, i64::MIN);
        // Every branch sees the same x and has its own weights.
        for &x in &all {
            let mut weights = vec![0usize; k];
            loop {
                let acc: i64 = weights.iter().map(|&w| xnor_popcount_words(&[x], &[all[w]], m) as i64).sum();
                min = min.min(acc);
                max = max.max(acc);
                let mut i = 0;
                while i < k {
                    weights[i] += 1;
                    if weights[i] < all.len() {
                        break;
                    }
                    weights[i] = 0;
                    i += 1;
                }
                if i == k {
                    break;
                }
            }
        }
        ensure((min, max) == (lo, hi), || format!("K={k}: enumerated [{min}, {max}], expected [{lo}, {hi}]"))?;
        notes.push(format!("K={k} [{min}, {max}]"));
    }

    let (bits, m) = (2u32, 4usize);
    let (lo, hi) = accumulator_range(Scheme::KbitFixed, bits as usize, m).map_err(|e| e.to_string())?;
    ensure((lo, hi) == (-36, 36) && FixedPointDot::bound(bits, m) == 36, || format!("fixed-point range ({lo}, {hi})"))?;
    let levels = 1usize << bits;
    let decode = |mut i: usize| {
        (0..m)
            .map(|_| {
                let q = (i % levels) as u32;
                i /= levels;
                q
            })
            .collect::<Vec<_>>()
    };
    let n = levels.pow(m as u32);
    let (mut min, mut max) = (i64::MAX, i64::MIN);
    for a in 0..n {
        let qw = decode(a);
        for b in 0..n {
            let d = fixedpoint_dot_levels(&qw, &decode(b), bits);
            min = min.min(d.integer);
            max = max.max(d.integer);
        }
    }
    ensure((min, max) == (-36, 36), || format!("fixed-point enumerated [{min}, {max}]"))?;
    notes.push(format!("fixed-point K=2 M=4 [{min}, {max}]"));
    Ok(format!("M=6: {}", notes.join(", ")))
}

// ---------------------------------------------------------------- 10

const TINY: &str = r#"
seed = 7
task = "segmentation"

[arch]
in_channels = 1
num_classes = 5
stem_channels = 4
k = 3
decomposition = "soft"
blocks = [{ channels = 4 }, { channels = 4 }, { channels = 4 }]

[optimizer]
lr = 0.01
batch_size = 8
epochs = 2
pretrain_epochs = 1
bn_recalibration = 16

[data]
kind = "synthetic-shapes"
val_fraction = 0.25

[data.synthetic]
size = 10
train = 16
test = 8
"#;

fn determinism_and_serialization() -> Outcome {
    let e = |e: groupnet_cli::CliError| e.to_string();
    let cfg = RunConfig::parse(TINY, &[]).map_err(e)?;
    let splits = load_splits(&cfg.data, cfg.seed).map_err(e)?;
    let a = train_on(&cfg, &splits, &mut |_| {}).map_err(e)?;
    let b = train_on(&cfg, &load_splits(&cfg.data, cfg.seed).map_err(e)?, &mut |_| {}).map_err(e)?;
    ensure(a.log.render() == b.log.render(), || "two runs of the same config logged different metrics".into())?;
    let bytes = a.file.to_bytes().map_err(e)?;
    ensure(b.file.to_bytes().map_err(e)? == bytes, || "two runs of the same config saved different models".into())?;

    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    let path = dir.path().join("model.gnet");
    a.file.save(&path).map_err(e)?;
    let back = ModelFile::load(&path).map_err(e)?;
    ensure(back == a.file, || "loaded model differs".into())?;
    let again = dir.path().join("again.gnet");
    back.save(&again).map_err(e)?;
    ensure(std::fs::read(&again).map_err(|e| e.to_string())? == bytes, || "save/load/save changed bytes".into())?;

    let masks = [0x01u8, 0x10, 0x80, 0x5a, 0xff];
    let mut flipped = bytes.clone();
    for i in 0..bytes.len() {
        for &mask in &masks {
            flipped[i] ^= mask;
            ensure(ModelFile::from_bytes(&flipped).is_err(), || format!("byte {i} ^ {mask:#04x} went undetected"))?;
            flipped[i] ^= mask;
        }
    }
    Ok(format!(
        "{} log lines repeat, save/load/save identical, {} corrupted files rejected",
        a.log.lines().len(),
        bytes.len() * masks.len()
    ))
}

// ----------------------------------------------------------------

fn main() {
    let criteria: [(usize, &str, fn() -> Outcome); 10] = [
        (1, "packed kernel matches the +-1 oracle", kernel_exactness),
        (2, "speedup golden value", speedup_golden),
        (3, "fixed-point dot equals quantize-then-multiply", fixed_point_oracle),
        (4, "gradient suite", gradient_suite),
        (5, "gate degeneracy", gate_degeneracy),
        (6, "lowering equivalence", lowering_equivalence),
        (7, "MNIST ordering", mnist_ordering),
        (8, "BPAC versus same-rate branches", bpac_property),
        (9, "accumulator ranges", accumulator_ranges),
        (10, "determinism and serialization", determinism_and_serialization),
    ];
    let selected: Vec<usize> = std::env::args().skip(1).filter_map(|a| a.parse().ok()).collect();
    std::panic::set_hook(Box::new(|_| {}));
    let mut failed = 0;
    for (n, name, check) in criteria {
        if !selected.is_empty() && !selected.contains(&n) {
            continue;
        }
        let t = Instant::now();
        let result = catch_unwind(AssertUnwindSafe(check)).unwrap_or_else(|p| {
            let msg = p
                .downcast_ref::<String>()
                .cloned()
                .or_else(|| p.downcast_ref::<&str>().map(|s| s.to_string()))
                .unwrap_or_else(|| "panic".into());
            Err(format!("panicked: {msg}"))
        });
        let secs = t.elapsed().as_secs_f64();
        match result {
            Ok(detail) => println!("criterion {n:>2} PASS  {name}: {detail} [{secs:.1}s]"),
            Err(detail) => {
                failed += 1;
                println!("criterion {n:>2} FAIL  {name}: {detail} [{secs:.1}s]");
            }
        }
    }
    if failed > 0 {
        println!("{failed} criteria failed");
        std::process::exit(1);
    }
}
