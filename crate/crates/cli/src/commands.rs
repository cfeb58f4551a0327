use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::time::Instant;

use clap::{Args, Parser, Subcommand};
use groupnet::bitcore::{binary_conv2d_packed, BitTensor, ConvGeometry, ConvStats, PackedFilters, PadMode};
use groupnet::costmodel::{render_table, scheme_report, speedup_ratio, ComplexityReport, Scheme};
use groupnet::quant::ActivationScheme;
use groupnet::structnet::{ModelGraph, PackedHead, PackedModel, PackedWiring, Task};
use groupnet::tape::{conv2d_forward, ConvParams};
use groupnet::Tensor;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::config::RunConfig;
use crate::error::{read, write, CliError, Result};
use crate::modelfile::ModelFile;
use crate::train::{eval_data, evaluate_packed, train, Checkpoint};

#[derive(Debug, Parser)]
#[command(name = "groupnet", version, about = "Train, evaluate and inspect Group-Net binary networks")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Train a model from a TOML run configuration.
    Train {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        seed: Option<u64>,
        /// `key=value` applied to the configuration, e.g. `optimizer.lr=0.01`.
        #[arg(long = "override", value_name = "KEY=VALUE")]
        overrides: Vec<String>,
    },
    /// Evaluate a saved model on the test split found in a data directory.
    Eval {
        #[arg(long)]
        model: PathBuf,
        #[arg(long, default_value = ".")]
        data: PathBuf,
    },
    /// Time packed binary convolution against float convolution.
    Bench(BenchArgs),
    /// Lower a training checkpoint and write a model file.
    Export {
        #[arg(long = "in")]
        input: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Summarize a saved model.
    Inspect {
        #[arg(long)]
        model: PathBuf,
    },
}

#[derive(Debug, Clone, Args)]
pub struct BenchArgs {
    #[arg(long)]
    pub cin: usize,
    #[arg(long)]
    pub cout: usize,
    #[arg(long)]
    pub kh: usize,
    #[arg(long)]
    pub kw: usize,
    #[arg(long)]
    pub hin: usize,
    #[arg(long)]
    pub win: usize,
    #[arg(long, default_value_t = 1)]
    pub k: usize,
    #[arg(long, default_value_t = 1)]
    pub dilation: usize,
    #[arg(long, default_value_t = 1)]
    pub stride: usize,
    /// Minimum wall-clock per measurement, in milliseconds.
    #[arg(long, default_value_t = 200)]
    pub min_ms: u64,
}

/// Runs one command and returns what it prints on success.
pub fn execute(cli: Cli, progress: &mut dyn FnMut(&str)) -> Result<String> {
    match cli.command {
        Command::Train { config, seed, overrides } => {
            let mut overrides = overrides;
            if let Some(s) = seed {
                overrides.push(format!("seed={s}"));
            }
            cmd_train(&RunConfig::load(&config, &overrides)?, progress)
        }
        Command::Eval { model, data } => cmd_eval(&model, &data),
        Command::Bench(args) => cmd_bench(&args),
        Command::Export { input, out } => cmd_export(&input, &out),
        Command::Inspect { model } => cmd_inspect(&ModelFile::load(&model)?),
    }
}

pub fn cmd_train(cfg: &RunConfig, progress: &mut dyn FnMut(&str)) -> Result<String> {
    let outcome = train(cfg, progress)?;
    let out = &cfg.output;
    write(&out.log_path(), outcome.log.render().as_bytes())?;
    let ckpt = serde_json::to_vec(&outcome.checkpoint).map_err(|e| CliError::Format(e.to_string()))?;
    write(&out.checkpoint_path(), &ckpt)?;
    outcome.file.save(&out.model_path())?;
    Ok(format!(
        "model = {}\ncheckpoint = {}\nlog = {}\n",
        out.model_path().display(),
        out.checkpoint_path().display(),
        out.log_path().display()
    ))
}

pub fn cmd_eval(model: &Path, data: &Path) -> Result<String> {
    let file = ModelFile::load(model)?;
    let test = eval_data(&file.header, &file.model, data)?;
    let m = evaluate_packed(&file.model, &test)?;
    let mut s = format!("samples = {}\n", test.len());
    match file.header.arch.task {
        Task::Classification => {
            let _ = writeln!(s, "top1 = {:.6}\ntop5 = {:.6}", m.top1, m.top5);
        }
        Task::Segmentation => {
            let _ = writeln!(s, "miou = {:.6}\npixel_accuracy = {:.6}", m.miou, m.pixel_accuracy);
        }
    }
    Ok(s)
}

pub fn cmd_export(input: &Path, out: &Path) -> Result<String> {
    let ckpt: Checkpoint =
        serde_json::from_slice(&read(input)?).map_err(|e| CliError::Format(format!("{}: {e}", input.display())))?;
    let file = ckpt.to_model_file()?;
    file.save(out)?;
    Ok(format!("model = {}\n", out.display()))
}

/// Median seconds per call, repeating until `min_ms` has elapsed.
fn time_it(min_ms: u64, mut f: impl FnMut()) -> f64 {
    let mut samples = Vec::new();
    let start = Instant::now();
    while samples.len() < 3 || (start.elapsed().as_millis() as u64) < min_ms {
        let t = Instant::now();
        f();
        samples.push(t.elapsed().as_secs_f64());
        if samples.len() >= 10_000 {
            break;
        }
    }
    samples.sort_by(f64::total_cmp);
    samples[samples.len() / 2]
}

pub fn cmd_bench(a: &BenchArgs) -> Result<String> {
    let geom = ConvGeometry::new(
        a.cin,
        a.cout,
        a.kh,
        a.kw,
        a.stride,
        a.dilation * (a.kh.max(a.kw) - 1) / 2,
        a.dilation,
        a.hin,
        a.win,
    )?;
    if a.k == 0 {
        return Err(CliError::config("--k", "must be at least 1"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let input_n = a.cin * a.hin * a.win;
    let x: Vec<f32> = (0..input_n).map(|_| rng.random::<f32>() - 0.5).collect();
    let bits = BitTensor::from_bools(&geom.input_shape(), x.iter().map(|&v| v >= 0.0).collect::<Vec<_>>())?;
    let filters = (0..a.k)
        .map(|_| {
            let w = BitTensor::from_bools(
                &geom.weight_shape(),
                (0..geom.out_channels * geom.fan_in()).map(|_| rng.random::<bool>()).collect::<Vec<_>>(),
            )?;
            PackedFilters::from_bit_tensor(&w)
        })
        .collect::<groupnet::Result<Vec<_>>>()?;
    let xf = Tensor::from_vec(&[1, a.cin, a.hin, a.win], x)?;
    let wf: Tensor<f32> = Tensor::from_vec(
        &[a.cout, a.cin, a.kh, a.kw],
        (0..a.cout * geom.fan_in()).map(|_| rng.random::<f32>() - 0.5).collect(),
    )?;
    let params = ConvParams {
        stride: geom.stride,
        padding: geom.padding,
        dilation: geom.dilation,
    };
    let mut stats = ConvStats::default();
    let binary = time_it(a.min_ms, || {
        stats = ConvStats::default();
        for f in &filters {
            let (_, s) = binary_conv2d_packed(&bits, f, &geom, PadMode::Exclude).expect("validated geometry");
            stats += s;
        }
    });
    let float = time_it(a.min_ms, || {
        conv2d_forward(&xf, &wf, params).expect("validated geometry");
    });
    let theory = speedup_ratio(&geom, a.k)?;
    let scheme = if a.k == 1 { Scheme::BinaryDirect } else { Scheme::GroupNet };
    let report = scheme_report(scheme, a.k, &geom)?;
    let mut s = String::new();
    let _ = writeln!(
        s,
        "geometry = cin {} cout {} kernel {}x{} input {}x{} output {}x{} stride {} dilation {}",
        a.cin, a.cout, a.kh, a.kw, a.hin, a.win, geom.output_h, geom.output_w, a.stride, a.dilation
    );
    let _ = writeln!(s, "k = {}", a.k);
    let _ = writeln!(s, "theoretical_speedup = {theory:.2}");
    let _ = writeln!(s, "measured_ratio = {:.3}", float / binary.max(f64::MIN_POSITIVE));
    let _ = writeln!(s, "float_seconds = {float:.3e}");
    let _ = writeln!(s, "binary_seconds = {binary:.3e}");
    let _ = writeln!(s, "binary_xnor_dots = {}", stats.xnor_dots);
    let _ = writeln!(s, "binary_word_ops = {}", stats.word_ops);
    let _ = writeln!(
        s,
        "caveat = the theoretical figure assumes 64 XNOR-popcount lanes per instruction and free memory access; \
         the measured figure includes bit gathering, memory reads and a float GEMM backend, so the two need not agree"
    );
    s.push_str(&report.to_key_values());
    Ok(s)
}

fn fmt_values(v: &[f64]) -> String {
    let parts: Vec<String> = v.iter().map(|x| format!("{x:.4}")).collect();
    format!("[{}]", parts.join(", "))
}

pub fn cmd_inspect(file: &ModelFile) -> Result<String> {
    let h = &file.header;
    let m: &PackedModel = &file.model;
    let arch = &h.arch;
    let mut s = String::new();
    let _ = writeln!(s, "decomposition = {}", arch.decomposition.name());
    let _ = writeln!(s, "k = {}", arch.k);
    let groups: Vec<usize> = match &m.wiring {
        PackedWiring::Groups(g) => g.iter().map(|(b, _)| b.len()).collect(),
        _ => vec![1; m.blocks.len()],
    };
    let _ = writeln!(s, "groups = {}", groups.len());
    let _ = writeln!(s, "branches_per_group = {}", m.branch_count());
    let _ = writeln!(s, "blocks_per_group = {groups:?}");
    let _ = writeln!(s, "extra_shortcuts = {}", arch.extra_shortcuts);
    let _ = writeln!(s, "bpac = {}", arch.bpac.is_some());
    let _ = writeln!(s, "input_shape = {:?}", h.input_shape);

    let (hh, ww) = (h.input_shape[1], h.input_shape[2]);
    let graph = ModelGraph::<f64>::build(arch, 0)?;
    let layers = graph.binary_layers(hh, ww)?;
    let mut table = String::from("layer                    kind     shape            stride  dilation  act\n");
    let fp_shape = |t: &Tensor<f64>| format!("{:?}", t.shape());
    let _ = writeln!(table, "{:<24} {:<8} {:<16} {:<7} {:<9} -", "stem", "fp", fp_shape(&m.stem.weight), m.stem.conv.stride, 1);
    let mut li = layers.iter();
    for (bi, blk) in m.blocks.iter().enumerate() {
        if let Some(p) = &blk.projection {
            let _ = writeln!(table, "{:<24} {:<8} {:<16} {:<7} {:<9} -", format!("block{bi}.proj"), "fp", fp_shape(&p.weight), p.conv.stride, 1);
        }
        for (br, units) in blk.branches.iter().enumerate() {
            for (u, unit) in units.iter().enumerate() {
                let _ = li.next();
                let act = match arch.quant.activation_scheme {
                    ActivationScheme::UniformKbit => format!("{}-bit", arch.quant.activation_bits),
                    _ => "sign".to_string(),
                };
                let _ = writeln!(
                    table,
                    "{:<24} {:<8} {:<16} {:<7} {:<9} {act}",
                    format!("block{bi}.branch{br}.unit{u}"),
                    "binary",
                    format!("{:?}", [unit.out_channels, unit.in_channels, unit.kernel, unit.kernel]),
                    unit.conv.stride,
                    unit.conv.dilation
                );
            }
        }
        for (u, l) in blk.unit_lambdas.iter().enumerate() {
            if let Some(l) = l {
                let _ = writeln!(s, "block{bi}.unit{u}.lambda = {}", fmt_values(l));
            }
        }
    }
    match &m.wiring {
        PackedWiring::Groups(g) => {
            for (p, (_, l)) in g.iter().enumerate() {
                if let Some(l) = l {
                    let _ = writeln!(s, "group{p}.lambda = {}", fmt_values(l));
                }
            }
        }
        PackedWiring::Soft { lambdas, gates } => {
            for (b, l) in lambdas.iter().enumerate() {
                if let Some(l) = l {
                    let _ = writeln!(s, "block{b}.lambda = {}", fmt_values(l));
                }
            }
            for (b, g) in gates.iter().enumerate() {
                if let Some(g) = g {
                    let _ = writeln!(s, "block{b}.gate = {}", fmt_values(g));
                }
            }
        }
        PackedWiring::Layerwise => {}
    }
    let head = match &m.head {
        PackedHead::Linear(w) | PackedHead::Pixelwise(w) => w,
    };
    let _ = writeln!(table, "{:<24} {:<8} {:<16} {:<7} {:<9} -", "head", "fp", fp_shape(head), 1, 1);

    let mut fp_params = m.stem.weight.len() + head.len();
    fp_params += m.blocks.iter().filter_map(|b| b.projection.as_ref()).map(|p| p.weight.len()).sum::<usize>();
    let _ = writeln!(s, "binary_weight_bits = {}", m.binary_weight_bits());
    let _ = writeln!(s, "full_precision_weights = {fp_params}");
    s.push_str("\n");
    s.push_str(&table);

    // Complexity of the base network's binarized layers with K branches each.
    let scheme = if arch.k == 1 { Scheme::BinaryDirect } else { Scheme::GroupNet };
    let per_layer = layers
        .iter()
        .filter(|l| l.branch == 0)
        .map(|l| Ok((l.geometry.clone(), scheme_report(scheme, arch.k, &l.geometry)?)))
        .collect::<Result<Vec<_>>>()?;
    let total = ComplexityReport::combine(&per_layer)?;
    s.push_str("\ncomplexity (binarized layers only)\n");
    s.push_str(&render_table(&[total]));
    Ok(s)
}

/// Parses arguments, runs the command, prints, and returns the exit code.
pub fn run(cli: Cli) -> i32 {
    let mut progress = |line: &str| eprintln!("{line}");
    match execute(cli, &mut progress) {
        Ok(out) => {
            print!("{out}");
            0
        }
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}
