//! Architecture description for WideResNet-style residual networks.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::ConvGeometry;

/// One group of residual blocks sharing an output width and resolution.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct GroupSpec {
    /// Output channels of every block in the group.
    pub width: usize,
    /// Stride of the group's first block (1 or 2).
    pub stride: usize,
    /// Prunable width of each block: output channels of its first conv.
    pub blocks: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct NetworkSpec {
    /// Input (channels, height, width).
    pub input: [usize; 3],
    pub classes: usize,
    /// Output channels of the stem convolution.
    pub stem_width: usize,
    pub groups: Vec<GroupSpec>,
    /// Group indices whose outputs are attention points.
    pub attention: Vec<usize>,
}

/// Static description of one block, derived from the spec.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct BlockShape {
    pub group: usize,
    pub in_channels: usize,
    pub width: usize,
    pub out_channels: usize,
    pub stride: usize,
    /// Spatial size at the block input.
    pub in_hw: (usize, usize),
    /// Spatial size at the block output.
    pub out_hw: (usize, usize),
}

impl BlockShape {
    pub fn has_projection(&self) -> bool {
        self.in_channels != self.out_channels || self.stride != 1
    }
}

impl NetworkSpec {
    /// WideResNet of the given depth (`6n + 4`) and width multiplier.
    pub fn wide_resnet(depth: usize, widen: usize, input: [usize; 3], classes: usize) -> Result<Self> {
        if depth < 10 || (depth - 4) % 6 != 0 {
            return Err(Error::Spec(format!("depth {depth} is not of the form 6n+4 with n >= 1")));
        }
        if widen == 0 {
            return Err(Error::Spec("width multiplier must be positive".into()));
        }
        let n = (depth - 4) / 6;
        let groups = [16, 32, 64]
            .iter()
            .enumerate()
            .map(|(i, &w)| GroupSpec {
                width: w * widen,
                stride: if i == 0 { 1 } else { 2 },
                blocks: vec![w * widen; n],
            })
            .collect();
        let spec = Self {
            input,
            classes,
            stem_width: 16,
            groups,
            attention: vec![0, 1, 2],
        };
        spec.validate()?;
        Ok(spec)
    }

    pub fn validate(&self) -> Result<()> {
        if self.input.iter().any(|&d| d == 0) {
            return Err(Error::Spec(format!("input shape {:?} has a zero extent", self.input)));
        }
        if self.classes < 2 {
            return Err(Error::Spec("need at least two classes".into()));
        }
        if self.stem_width == 0 {
            return Err(Error::Spec("stem width must be positive".into()));
        }
        if self.groups.is_empty() {
            return Err(Error::Spec("need at least one group".into()));
        }
        for (g, group) in self.groups.iter().enumerate() {
            if group.width == 0 {
                return Err(Error::Spec(format!("group {g} has zero width")));
            }
            if group.stride != 1 && group.stride != 2 {
                return Err(Error::Spec(format!("group {g} stride {} not in {{1, 2}}", group.stride)));
            }
            if group.blocks.is_empty() {
                return Err(Error::Spec(format!("group {g} has no blocks")));
            }
            if let Some(b) = group.blocks.iter().position(|&w| w == 0) {
                return Err(Error::Spec(format!("group {g} block {b} has zero prunable width")));
            }
        }
        let want: Vec<usize> = (0..self.groups.len()).collect();
        if self.attention != want {
            return Err(Error::Spec(format!(
                "attention points {:?} must be one per group output {want:?}",
                self.attention
            )));
        }
        let (h, w) = (self.input[1], self.input[2]);
        let mut hw = (h, w);
        for group in &self.groups {
            hw = ConvGeometry::same3x3(group.stride)
                .output_hw(hw.0, hw.1)
                .map_err(|e| Error::Spec(e.to_string()))?;
        }
        Ok(())
    }

    pub fn block_count(&self) -> usize {
        self.groups.iter().map(|g| g.blocks.len()).sum()
    }

    /// Prunable widths in block order.
    pub fn widths(&self) -> Vec<usize> {
        self.groups.iter().flat_map(|g| g.blocks.iter().copied()).collect()
    }

    /// Copy of this spec with the prunable widths replaced.
    pub fn with_widths(&self, widths: &[usize]) -> Result<Self> {
        if widths.len() != self.block_count() {
            return Err(Error::Spec(format!(
                "{} widths given for {} prunable layers",
                widths.len(),
                self.block_count()
            )));
        }
        let mut out = self.clone();
        let mut it = widths.iter();
        for g in &mut out.groups {
            for b in &mut g.blocks {
                *b = *it.next().unwrap();
            }
        }
        out.validate()?;
        Ok(out)
    }

    /// True when `other` has the same topology and every prunable width is
    /// no larger than this spec's.
    pub fn is_reduction_of(&self, teacher: &NetworkSpec) -> bool {
        self.same_topology(teacher)
            && self.widths().iter().zip(teacher.widths()).all(|(a, b)| *a <= b)
    }

    pub fn same_topology(&self, other: &NetworkSpec) -> bool {
        self.input == other.input
            && self.classes == other.classes
            && self.stem_width == other.stem_width
            && self.attention == other.attention
            && self.groups.len() == other.groups.len()
            && self.groups.iter().zip(&other.groups).all(|(a, b)| {
                a.width == b.width && a.stride == b.stride && a.blocks.len() == b.blocks.len()
            })
    }

    pub fn block_shapes(&self) -> Vec<BlockShape> {
        let mut out = Vec::with_capacity(self.block_count());
        let mut hw = (self.input[1], self.input[2]);
        let mut channels = self.stem_width;
        for (g, group) in self.groups.iter().enumerate() {
            for (b, &width) in group.blocks.iter().enumerate() {
                let stride = if b == 0 { group.stride } else { 1 };
                let out_hw = ConvGeometry::same3x3(stride)
                    .output_hw(hw.0, hw.1)
                    .expect("validated spec");
                out.push(BlockShape {
                    group: g,
                    in_channels: channels,
                    width,
                    out_channels: group.width,
                    stride,
                    in_hw: hw,
                    out_hw,
                });
                hw = out_hw;
                channels = group.width;
            }
        }
        out
    }

    /// Trainable parameter count of the compact network.
    ///
    /// Convolutions carry no bias (a batch norm follows each), batch norms
    /// carry a scale and a shift per channel, the classifier has a bias.
    pub fn param_count(&self) -> usize {
        let c_in = self.input[0];
        let mut total = c_in * self.stem_width * 9 + 2 * self.stem_width;
        for b in self.block_shapes() {
            total += b.in_channels * b.width * 9 + 2 * b.width;
            total += b.width * b.out_channels * 9 + 2 * b.out_channels;
            if b.has_projection() {
                total += b.in_channels * b.out_channels;
            }
        }
        let last = self.groups.last().unwrap().width;
        total + last * self.classes + self.classes
    }

    /// Multiply-accumulates of one inference: `out·in·k²·H'·W'` per
    /// convolution plus `in·classes` for the classifier.
    pub fn mac_count(&self) -> u64 {
        let c_in = self.input[0] as u64;
        let (h, w) = (self.input[1] as u64, self.input[2] as u64);
        let mut total = self.stem_width as u64 * c_in * 9 * h * w;
        for b in self.block_shapes() {
            let p = (b.out_hw.0 * b.out_hw.1) as u64;
            total += b.width as u64 * b.in_channels as u64 * 9 * p;
            total += b.out_channels as u64 * b.width as u64 * 9 * p;
            if b.has_projection() {
                total += b.out_channels as u64 * b.in_channels as u64 * p;
            }
        }
        let last = self.groups.last().unwrap().width as u64;
        total + last * self.classes as u64
    }
}
