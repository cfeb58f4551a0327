use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::quant::QuantSpec;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum BlockKind {
    #[default]
    BasicResidual,
    Plain,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BlockSpec {
    pub channels: usize,
    #[serde(default = "one")]
    pub stride: usize,
    #[serde(default)]
    pub kind: BlockKind,
    /// Dilation of both 3×3 convolutions; BPAC overrides it per branch.
    #[serde(default = "one")]
    pub dilation: usize,
}

fn one() -> usize {
    1
}

impl BlockSpec {
    pub fn new(channels: usize, stride: usize) -> Self {
        Self {
            channels,
            stride,
            kind: BlockKind::BasicResidual,
            dilation: 1,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Decomposition {
    #[default]
    Direct,
    Lbd,
    GbdV1,
    GbdV2,
    GbdV3,
    Soft,
}

impl Decomposition {
    pub fn name(self) -> &'static str {
        match self {
            Decomposition::Direct => "direct",
            Decomposition::Lbd => "lbd",
            Decomposition::GbdV1 => "gbd-v1",
            Decomposition::GbdV2 => "gbd-v2",
            Decomposition::GbdV3 => "gbd-v3",
            Decomposition::Soft => "soft",
        }
    }

    pub fn is_group_wise(self) -> bool {
        matches!(self, Decomposition::GbdV1 | Decomposition::GbdV2 | Decomposition::GbdV3)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Task {
    #[default]
    Classification,
    Segmentation,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Nonlinearity {
    #[default]
    Relu,
    Tanh,
}

/// How the K dilated branches of a BPAC block are combined.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum BpacCombine {
    #[default]
    Weighted,
    Sum,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BpacConfig {
    pub combine: BpacCombine,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ArchConfig {
    pub in_channels: usize,
    pub num_classes: usize,
    pub stem_channels: usize,
    pub stem_stride: usize,
    pub blocks: Vec<BlockSpec>,
    /// Number of binary bases.
    pub k: usize,
    pub decomposition: Decomposition,
    /// Explicit block partition for group-wise decomposition.
    pub groups: Option<Vec<Vec<usize>>>,
    /// Identity bypass around every binary convolution.
    pub extra_shortcuts: bool,
    /// Multi-rate dilation in the last two blocks.
    pub bpac: Option<BpacConfig>,
    pub quant: QuantSpec,
    pub task: Task,
    /// Nonlinearity used in place of `sign` during full-precision pretraining.
    pub pretrain_nonlinearity: Nonlinearity,
}

impl Default for ArchConfig {
    fn default() -> Self {
        Self {
            in_channels: 1,
            num_classes: 10,
            stem_channels: 16,
            stem_stride: 1,
            blocks: vec![BlockSpec::new(16, 1), BlockSpec::new(16, 1), BlockSpec::new(32, 2), BlockSpec::new(32, 1)],
            k: 1,
            decomposition: Decomposition::Direct,
            groups: None,
            extra_shortcuts: false,
            bpac: None,
            quant: QuantSpec::default(),
            task: Task::Classification,
            pretrain_nonlinearity: Nonlinearity::Relu,
        }
    }
}

fn bad(field: &str, reason: impl Into<String>) -> Error {
    Error::Config {
        field: format!("arch.{field}"),
        reason: reason.into(),
    }
}

impl ArchConfig {
    pub fn validate(&self) -> Result<()> {
        for (name, v) in [
            ("in_channels", self.in_channels),
            ("num_classes", self.num_classes),
            ("stem_channels", self.stem_channels),
            ("stem_stride", self.stem_stride),
        ] {
            if v == 0 {
                return Err(bad(name, "must be at least 1"));
            }
        }
        if self.blocks.is_empty() {
            return Err(bad("blocks", "at least one block is required"));
        }
        for (i, b) in self.blocks.iter().enumerate() {
            if b.channels == 0 || b.stride == 0 || b.dilation == 0 {
                return Err(bad(
                    &format!("blocks[{i}]"),
                    "channels, stride and dilation must be at least 1",
                ));
            }
        }
        if self.k == 0 {
            return Err(bad("k", "must be at least 1"));
        }
        if self.decomposition == Decomposition::Direct && self.k != 1 {
            return Err(bad("k", format!("direct binarization uses k = 1, got {}", self.k)));
        }
        if self.bpac.is_some() && self.blocks.len() < 2 {
            return Err(bad("bpac", "needs at least two blocks"));
        }
        if self.groups.is_some() && !self.decomposition.is_group_wise() {
            return Err(bad(
                "groups",
                format!("a partition only applies to group-wise decomposition, not {}", self.decomposition.name()),
            ));
        }
        if self.decomposition.is_group_wise() {
            self.partition()?;
        }
        self.quant.validate()
    }

    /// Block partition for group-wise decomposition.
    pub fn partition(&self) -> Result<Vec<Vec<usize>>> {
        let n = self.blocks.len();
        let groups = match (&self.groups, self.decomposition) {
            (Some(g), _) => g.clone(),
            (None, Decomposition::GbdV2) => {
                if n % 2 != 0 {
                    return Err(bad("decomposition", format!("gbd-v2 pairs blocks, but there are {n} blocks")));
                }
                (0..n / 2).map(|p| vec![2 * p, 2 * p + 1]).collect()
            }
            (None, Decomposition::GbdV3) => vec![(0..n).collect()],
            (None, _) => (0..n).map(|b| vec![b]).collect(),
        };
        check_partition(&groups, n)?;
        match self.decomposition {
            Decomposition::GbdV2 if groups.iter().any(|g| g.len() != 2) => {
                Err(bad("groups", "gbd-v2 groups contain exactly two blocks"))
            }
            Decomposition::GbdV3 if groups.len() != 1 => Err(bad("groups", "gbd-v3 is a single group of all blocks")),
            _ => Ok(groups),
        }
    }

    /// Dilation rates `(last block, second-to-last block)` per branch, when BPAC is on.
    pub fn branch_dilation(&self, block: usize, branch: usize) -> usize {
        let n = self.blocks.len();
        if self.bpac.is_some() {
            let (last, second) = bpac_rates(self.k).expect("k validated");
            if block + 1 == n {
                return last[branch];
            }
            if block + 2 == n {
                return second[branch];
            }
        }
        self.blocks[block].dilation
    }
}

/// Groups must be non-empty runs of consecutive block indices covering `0..n` in order.
pub fn check_partition(groups: &[Vec<usize>], n: usize) -> Result<()> {
    let mut next = 0;
    for (p, g) in groups.iter().enumerate() {
        if g.is_empty() {
            return Err(Error::Partition(format!("group {p} is empty")));
        }
        for &b in g {
            if b >= n {
                return Err(Error::Partition(format!("group {p} names block {b}, but there are {n} blocks")));
            }
            if b != next {
                return Err(Error::Partition(format!(
                    "group {p} lists block {b} where block {next} was expected; groups must be disjoint consecutive runs"
                )));
            }
            next += 1;
        }
    }
    if next != n {
        return Err(Error::Partition(format!("blocks {next}..{n} are not in any group")));
    }
    Ok(())
}

/// BPAC dilation rates for K bases: `{2..K+1}` for the last block and
/// `{6..K+5}` for the block before it.
pub fn bpac_rates(k: usize) -> Result<(Vec<usize>, Vec<usize>)> {
    if k == 0 {
        return Err(Error::InvalidArgument("bpac needs k >= 1".into()));
    }
    Ok(((2..=k + 1).collect(), (6..=k + 5).collect()))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn cfg(dec: Decomposition, k: usize, n: usize) -> ArchConfig {
        ArchConfig {
            decomposition: dec,
            k,
            blocks: vec![BlockSpec::new(8, 1); n],
            ..Default::default()
        }
    }

    #[test]
    fn bpac_rate_examples() {
        assert_eq!(bpac_rates(5).unwrap(), (vec![2, 3, 4, 5, 6], vec![6, 7, 8, 9, 10]));
        assert_eq!(bpac_rates(1).unwrap(), (vec![2], vec![6]));
        assert_eq!(bpac_rates(3).unwrap(), (vec![2, 3, 4], vec![6, 7, 8]));
        assert!(bpac_rates(0).is_err());
    }

    #[test]
    fn default_partitions() {
        assert_eq!(cfg(Decomposition::GbdV1, 3, 3).partition().unwrap(), vec![vec![0], vec![1], vec![2]]);
        assert_eq!(cfg(Decomposition::GbdV2, 3, 4).partition().unwrap(), vec![vec![0, 1], vec![2, 3]]);
        assert_eq!(cfg(Decomposition::GbdV3, 3, 3).partition().unwrap(), vec![vec![0, 1, 2]]);
        assert!(cfg(Decomposition::GbdV2, 3, 3).validate().is_err());
    }

    #[test]
    fn partition_rules() {
        assert!(check_partition(&[vec![0, 1], vec![2]], 3).is_ok());
        assert!(check_partition(&[vec![0], vec![2]], 3).is_err());
        assert!(check_partition(&[vec![0, 2], vec![1]], 3).is_err());
        assert!(check_partition(&[vec![0, 1], vec![1, 2]], 3).is_err());
        assert!(check_partition(&[vec![0, 1]], 3).is_err());
        assert!(check_partition(&[vec![], vec![0, 1, 2]], 3).is_err());
        let mut c = cfg(Decomposition::GbdV3, 2, 3);
        c.groups = Some(vec![vec![0], vec![1, 2]]);
        assert!(c.validate().is_err());
        let mut c = cfg(Decomposition::GbdV1, 2, 3);
        c.groups = Some(vec![vec![0], vec![1, 2]]);
        assert!(c.validate().is_ok());
    }

    #[test]
    fn direct_requires_single_base() {
        let err = cfg(Decomposition::Direct, 2, 2).validate().unwrap_err();
        assert!(err.to_string().contains("arch.k"));
        assert!(cfg(Decomposition::Lbd, 0, 2).validate().is_err());
    }

    #[test]
    fn groups_rejected_for_layerwise() {
        let mut c = cfg(Decomposition::Lbd, 2, 2);
        c.groups = Some(vec![vec![0, 1]]);
        assert!(c.validate().is_err());
    }

    #[test]
    fn bpac_overrides_last_two_blocks() {
        let mut c = cfg(Decomposition::GbdV1, 3, 4);
        c.bpac = Some(BpacConfig::default());
        let rates: Vec<Vec<usize>> = (0..4).map(|b| (0..3).map(|i| c.branch_dilation(b, i)).collect()).collect();
        assert_eq!(rates, vec![vec![1, 1, 1], vec![1, 1, 1], vec![6, 7, 8], vec![2, 3, 4]]);
    }

    #[test]
    fn serde_names() {
        let c = cfg(Decomposition::GbdV2, 2, 2);
        let s = serde_json::to_string(&c).unwrap();
        assert!(s.contains("\"gbd-v2\""));
        assert_eq!(serde_json::from_str::<ArchConfig>(&s).unwrap(), c);
    }
}
