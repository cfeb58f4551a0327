//! Analytical complexity, storage and accumulator-range models for one
//! convolutional layer under the quantization schemes of interest.
//!
//! Reports cover binarized layers only; first and last full-precision
//! layers are not included.

use std::fmt::{self, Write as _};
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::bitcore::{words_for, ConvGeometry};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Scheme {
    Full,
    BinaryDirect,
    BinaryWeightOnly,
    TernaryWeight,
    KbitFixed,
    MultiBinarization,
    GroupNet,
}

impl Scheme {
    pub const ALL: [Scheme; 7] = [
        Scheme::Full,
        Scheme::BinaryDirect,
        Scheme::BinaryWeightOnly,
        Scheme::TernaryWeight,
        Scheme::KbitFixed,
        Scheme::MultiBinarization,
        Scheme::GroupNet,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Scheme::Full => "full",
            Scheme::BinaryDirect => "binary-direct",
            Scheme::BinaryWeightOnly => "binary-weight-only",
            Scheme::TernaryWeight => "ternary-weight",
            Scheme::KbitFixed => "kbit-fixed",
            Scheme::MultiBinarization => "multi-binarization",
            Scheme::GroupNet => "group-net",
        }
    }

    /// XNOR-popcount dot products per output element.
    pub fn dots_per_output(self, k: usize) -> usize {
        match self {
            Scheme::Full | Scheme::BinaryWeightOnly | Scheme::TernaryWeight => 0,
            Scheme::BinaryDirect => 1,
            Scheme::GroupNet => k,
            Scheme::KbitFixed | Scheme::MultiBinarization => k * k,
        }
    }
}

impl fmt::Display for Scheme {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Scheme {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Scheme::ALL
            .into_iter()
            .find(|x| x.name() == s)
            .ok_or_else(|| Error::UnknownScheme(s.to_string()))
    }
}

/// Whether a saving figure is approximate or a strict upper bound.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum BoundKind {
    Approx,
    Below,
}

impl BoundKind {
    fn symbol(self) -> &'static str {
        match self {
            BoundKind::Approx => "~",
            BoundKind::Below => "<",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct OpCounts {
    pub xnor_dots: u64,
    /// 64-bit XNOR+popcount word operations.
    pub word_ops: u64,
    pub real_mul_adds: u64,
    pub real_adds: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ComplexityReport {
    pub scheme: Scheme,
    pub k: usize,
    /// Speedup over the full-precision layer from the XNOR-popcount formula.
    pub speedup: f64,
    pub memory_saving: f64,
    pub memory_bound: BoundKind,
    pub compute_saving: f64,
    pub compute_bound: BoundKind,
    pub counts: OpCounts,
    /// Integer accumulator interval, when the scheme accumulates integers.
    pub accumulator_range: Option<(i64, i64)>,
    pub bandwidth_note: String,
}

fn check_geom(geom: &ConvGeometry) -> Result<()> {
    let dims = [
        ("in_channels", geom.in_channels),
        ("out_channels", geom.out_channels),
        ("kernel_h", geom.kernel_h),
        ("kernel_w", geom.kernel_w),
        ("input_h", geom.input_h),
        ("input_w", geom.input_w),
        ("output_h", geom.output_h),
        ("output_w", geom.output_w),
    ];
    match dims.iter().find(|(_, v)| *v == 0) {
        Some((name, _)) => Err(Error::Geometry(format!("{name} must be positive"))),
        None => Ok(()),
    }
}

fn check_k(k: usize) -> Result<()> {
    if k == 0 {
        return Err(Error::InvalidArgument("K must be at least 1".into()));
    }
    Ok(())
}

/// `σ = (64/K) · A / (A + 64·w_out·h_out)` with `A = c_in·w·h·w_in·h_in`.
pub fn speedup_ratio(geom: &ConvGeometry, k: usize) -> Result<f64> {
    check_geom(geom)?;
    check_k(k)?;
    let a = (geom.in_channels * geom.kernel_h * geom.kernel_w * geom.input_h * geom.input_w) as f64;
    let o = (geom.output_h * geom.output_w) as f64;
    Ok(64.0 / k as f64 * a / (a + 64.0 * o))
}

/// `[−r, r]` for `M`-term accumulators.
pub fn accumulator_range(scheme: Scheme, k: usize, m: usize) -> Result<(i64, i64)> {
    check_k(k)?;
    if m == 0 {
        return Err(Error::InvalidArgument("M must be at least 1".into()));
    }
    let (k, m) = (k as i64, m as i64);
    let r = match scheme {
        Scheme::BinaryDirect => m,
        Scheme::GroupNet => k * m,
        Scheme::MultiBinarization => k * k * m,
        Scheme::KbitFixed => {
            let levels = (1i64 << k) - 1;
            levels * levels * m
        }
        _ => {
            return Err(Error::InvalidArgument(format!(
                "{scheme} accumulates real values, not integers"
            )))
        }
    };
    Ok((-r, r))
}

/// Complexity of one layer of `geom` under `scheme` with `k` bases or bits.
pub fn scheme_report(scheme: Scheme, k: usize, geom: &ConvGeometry) -> Result<ComplexityReport> {
    check_geom(geom)?;
    check_k(k)?;
    match scheme {
        Scheme::Full | Scheme::BinaryDirect | Scheme::BinaryWeightOnly if k != 1 => {
            return Err(Error::InvalidArgument(format!("{scheme} takes K = 1, got {k}")));
        }
        Scheme::TernaryWeight if k != 2 => {
            return Err(Error::InvalidArgument(format!("{scheme} stores 2 bits, got K = {k}")));
        }
        _ => {}
    }
    let m = geom.fan_in();
    let outputs = (geom.out_channels * geom.output_positions()) as u64;
    let dots = scheme.dots_per_output(k) as u64;
    let kf = k as f64;
    let mut counts = OpCounts {
        xnor_dots: dots * outputs,
        word_ops: dots * outputs * words_for(m) as u64,
        ..OpCounts::default()
    };
    use BoundKind::*;
    let (memory_saving, memory_bound, compute_saving, compute_bound, note) = match scheme {
        Scheme::Full => {
            counts.real_mul_adds = outputs * m as u64;
            (1.0, Approx, 1.0, Approx, "32-bit weights and activations")
        }
        Scheme::BinaryDirect => {
            counts.real_mul_adds = outputs;
            (32.0, Approx, 64.0, Approx, "1-bit weights and activations")
        }
        Scheme::BinaryWeightOnly | Scheme::TernaryWeight => {
            counts.real_adds = outputs * m as u64;
            counts.real_mul_adds = outputs;
            (32.0 / kf, Approx, 2.0, Approx, "low-bit weights; 32-bit activations")
        }
        Scheme::KbitFixed => {
            counts.real_adds = outputs * (dots - 1);
            counts.real_mul_adds = outputs;
            (
                32.0 / kf,
                Approx,
                64.0 / (kf * kf),
                Below,
                "K-bit accumulator inputs; range grows as (2^K - 1)^2",
            )
        }
        Scheme::MultiBinarization => {
            counts.real_mul_adds = outputs * dots;
            (32.0 / kf, Approx, 64.0 / (kf * kf), Below, "K weight bases times K activation bases")
        }
        Scheme::GroupNet => {
            counts.real_mul_adds = outputs * k as u64;
            (32.0 / kf, Approx, 64.0 / kf, Below, "K 1-bit branches; accumulators stay within K*M")
        }
    };
    let speedup = if dots == 0 { 1.0 } else { speedup_ratio(geom, dots as usize)? };
    Ok(ComplexityReport {
        scheme,
        k,
        speedup,
        memory_saving,
        memory_bound,
        compute_saving,
        compute_bound,
        counts,
        accumulator_range: accumulator_range(scheme, k, m).ok(),
        bandwidth_note: note.to_string(),
    })
}

impl ComplexityReport {
    /// Combines per-layer reports of the same scheme: counts add, and the
    /// speedup is the ratio of summed full-precision to summed binary cost.
    pub fn combine(layers: &[(ConvGeometry, ComplexityReport)]) -> Result<ComplexityReport> {
        let Some((_, first)) = layers.first() else {
            return Err(Error::InvalidArgument("no layers to combine".into()));
        };
        let mut out = first.clone();
        out.counts = OpCounts::default();
        let (mut full, mut binary) = (0.0, 0.0);
        let mut range = (0i64, 0i64);
        for (g, r) in layers {
            if r.scheme != first.scheme || r.k != first.k {
                return Err(Error::InvalidArgument("layers use different schemes".into()));
            }
            out.counts.xnor_dots += r.counts.xnor_dots;
            out.counts.word_ops += r.counts.word_ops;
            out.counts.real_mul_adds += r.counts.real_mul_adds;
            out.counts.real_adds += r.counts.real_adds;
            let a = (g.out_channels * g.fan_in() * g.input_h * g.input_w) as f64;
            full += a;
            binary += a / r.speedup;
            if let Some((lo, hi)) = r.accumulator_range {
                range = (range.0.min(lo), range.1.max(hi));
            }
        }
        out.speedup = full / binary;
        out.accumulator_range = first.accumulator_range.map(|_| range);
        Ok(out)
    }

    fn fields(&self) -> Vec<(&'static str, String)> {
        let range = match self.accumulator_range {
            Some((lo, hi)) => format!("[{lo}, {hi}]"),
            None => "real".to_string(),
        };
        vec![
            ("scheme", self.scheme.to_string()),
            ("k", self.k.to_string()),
            ("speedup", format!("{:.2}", self.speedup)),
            ("memory_saving", format!("{}{:.2}", self.memory_bound.symbol(), self.memory_saving)),
            ("compute_saving", format!("{}{:.2}", self.compute_bound.symbol(), self.compute_saving)),
            ("xnor_dots", self.counts.xnor_dots.to_string()),
            ("word_ops", self.counts.word_ops.to_string()),
            ("real_mul_adds", self.counts.real_mul_adds.to_string()),
            ("real_adds", self.counts.real_adds.to_string()),
            ("accumulator_range", range),
            ("bandwidth", self.bandwidth_note.clone()),
        ]
    }

    /// One `key = value` line per field.
    pub fn to_key_values(&self) -> String {
        let mut s = String::new();
        for (k, v) in self.fields() {
            let _ = writeln!(s, "{k} = {v}");
        }
        s
    }
}

/// Aligned text table, one row per report.
pub fn render_table(reports: &[ComplexityReport]) -> String {
    let rows: Vec<Vec<(&str, String)>> = reports.iter().map(|r| r.fields()).collect();
    let Some(first) = rows.first() else {
        return String::new();
    };
    let headers: Vec<&str> = first.iter().map(|(k, _)| *k).collect();
    let widths: Vec<usize> = (0..headers.len())
        .map(|c| rows.iter().map(|r| r[c].1.len()).chain([headers[c].len()]).max().unwrap_or(0))
        .collect();
    let line = |cells: Vec<&str>| {
        let mut s = cells
            .iter()
            .zip(&widths)
            .map(|(c, w)| format!("{c:<w$}"))
            .collect::<Vec<_>>()
            .join("  ");
        s.truncate(s.trim_end().len());
        s.push('\n');
        s
    };
    let mut out = line(headers);
    for r in &rows {
        out.push_str(&line(r.iter().map(|(_, v)| v.as_str()).collect()));
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    fn geom(cin: usize, k: usize, hw: usize) -> ConvGeometry {
        ConvGeometry::same(cin, cin, k, 1, 1, hw, hw).unwrap()
    }

    #[test]
    fn golden_speedup() {
        let g = geom(256, 3, 28);
        assert!((speedup_ratio(&g, 5).unwrap() - 12.45).abs() <= 0.01);
        let one = speedup_ratio(&g, 1).unwrap();
        assert!((one - 62.27).abs() <= 0.1, "{one}");
    }

    #[test]
    fn speedup_tends_to_64() {
        let g = geom(1 << 20, 3, 4);
        assert!((64.0 - speedup_ratio(&g, 1).unwrap()) < 0.01);
    }

    #[test]
    fn speedup_rejects_zero_dims() {
        let mut g = geom(4, 3, 8);
        g.in_channels = 0;
        assert!(speedup_ratio(&g, 1).is_err());
        assert!(speedup_ratio(&geom(4, 3, 8), 0).is_err());
    }

    #[test]
    fn degenerate_geometry() {
        let g = ConvGeometry::new(1, 1, 1, 1, 1, 0, 1, 1, 1).unwrap();
        let s = speedup_ratio(&g, 1).unwrap();
        assert!(s.is_finite() && s > 0.0);
    }

    #[test]
    fn ranges() {
        assert_eq!(accumulator_range(Scheme::GroupNet, 5, 2304).unwrap(), (-11520, 11520));
        assert_eq!(accumulator_range(Scheme::KbitFixed, 2, 9).unwrap(), (-81, 81));
        assert!(accumulator_range(Scheme::Full, 1, 9).is_err());
    }

    #[test]
    fn table_rows() {
        let g = geom(64, 3, 14);
        let bd = scheme_report(Scheme::BinaryDirect, 1, &g).unwrap();
        assert_eq!((bd.memory_saving, bd.compute_saving), (32.0, 64.0));
        let gn = scheme_report(Scheme::GroupNet, 5, &g).unwrap();
        assert!((gn.memory_saving - 6.4).abs() < 1e-12);
        assert!((gn.compute_saving - 12.8).abs() < 1e-12);
        assert_eq!(gn.compute_bound, BoundKind::Below);
        assert!(gn.speedup < gn.compute_saving);
    }

    #[test]
    fn fixed_point_versus_group_net_counts() {
        let g = geom(16, 3, 8);
        let fx = scheme_report(Scheme::KbitFixed, 2, &g).unwrap();
        let gn = scheme_report(Scheme::GroupNet, 4, &g).unwrap();
        let outputs = (16 * 64) as u64;
        assert_eq!(fx.counts.xnor_dots, 4 * outputs);
        assert_eq!(gn.counts.xnor_dots, 4 * outputs);
        let (fx_lo, _) = fx.accumulator_range.unwrap();
        let (gn_lo, _) = gn.accumulator_range.unwrap();
        assert!(gn_lo > fx_lo);
    }

    #[test]
    fn incompatible_k() {
        let g = geom(4, 3, 4);
        assert!(scheme_report(Scheme::BinaryDirect, 2, &g).is_err());
        assert!(scheme_report(Scheme::TernaryWeight, 1, &g).is_err());
        assert!("bogus".parse::<Scheme>().is_err());
        assert_eq!("group-net".parse::<Scheme>().unwrap(), Scheme::GroupNet);
    }

    #[test]
    fn rendering() {
        let g = geom(256, 3, 28);
        let r = scheme_report(Scheme::GroupNet, 5, &g).unwrap();
        let kv = r.to_key_values();
        assert!(kv.contains("speedup = 12.45\n"));
        let t = render_table(&[r, scheme_report(Scheme::BinaryDirect, 1, &g).unwrap()]);
        assert_eq!(t.lines().count(), 3);
        assert!(t.starts_with("scheme"));
    }

    #[test]
    fn combine_single_layer_is_identity() {
        let g = geom(32, 3, 10);
        let r = scheme_report(Scheme::GroupNet, 3, &g).unwrap();
        let c = ComplexityReport::combine(&[(g, r.clone())]).unwrap();
        assert!((c.speedup - r.speedup).abs() < 1e-12);
        assert_eq!(c.counts, r.counts);
    }
}
