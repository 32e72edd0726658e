use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, Var};
use crate::error::{Error, Result};

/// The seven candidate operations on a cell edge. All are stride 1 with
/// same padding, so they preserve (b, c, h, w).
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OpKind {
    Identity,
    MaxPool3x3,
    AvgPool3x3,
    SepConv3x3,
    SepConv5x5,
    DilConv3x3,
    DilConv5x5,
}

pub const NUM_OPS: usize = 7;

impl OpKind {
    /// Fixed candidate order; genotype vectors index ops by this order.
    pub const ALL: [OpKind; NUM_OPS] = [
        OpKind::Identity,
        OpKind::MaxPool3x3,
        OpKind::AvgPool3x3,
        OpKind::SepConv3x3,
        OpKind::SepConv5x5,
        OpKind::DilConv3x3,
        OpKind::DilConv5x5,
    ];

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn from_index(i: usize) -> Option<OpKind> {
        Self::ALL.get(i).copied()
    }

    pub fn name(self) -> &'static str {
        match self {
            OpKind::Identity => "identity",
            OpKind::MaxPool3x3 => "max_pool_3x3",
            OpKind::AvgPool3x3 => "avg_pool_3x3",
            OpKind::SepConv3x3 => "sep_conv_3x3",
            OpKind::SepConv5x5 => "sep_conv_5x5",
            OpKind::DilConv3x3 => "dil_conv_3x3",
            OpKind::DilConv5x5 => "dil_conv_5x5",
        }
    }

    /// (kernel, dilation) for the separable convolutions.
    pub fn conv_geometry(self) -> Option<(usize, usize)> {
        match self {
            OpKind::SepConv3x3 => Some((3, 1)),
            OpKind::SepConv5x5 => Some((5, 1)),
            OpKind::DilConv3x3 => Some((3, 2)),
            OpKind::DilConv5x5 => Some((5, 2)),
            _ => None,
        }
    }

    pub fn has_weights(self) -> bool {
        self.conv_geometry().is_some()
    }

    /// Half-width of the receptive field under same padding.
    pub fn reach(self) -> usize {
        match self {
            OpKind::Identity => 0,
            OpKind::MaxPool3x3 | OpKind::AvgPool3x3 => 1,
            _ => {
                let (k, d) = self.conv_geometry().unwrap_or((1, 1));
                d * (k - 1) / 2
            }
        }
    }
}

impl fmt::Display for OpKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for OpKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        OpKind::ALL
            .into_iter()
            .find(|o| o.name() == s)
            .ok_or_else(|| Error::Genotype(format!("unknown operation `{s}`")))
    }
}

/// Graph handles for a separable convolution: depthwise (c, 1, k, k)
/// followed by pointwise (c, c, 1, 1).
#[derive(Debug, Clone, Copy)]
pub struct SepConvVars {
    pub depthwise: Var,
    pub pointwise: Var,
}

/// Applies one candidate op. Separable convs are depthwise -> pointwise -> ReLU.
pub fn apply(g: &mut Graph, op: OpKind, input: Var, weights: Option<SepConvVars>) -> Result<Var> {
    let shape = g.shape(input).to_vec();
    let [_, c, h, w] = match shape[..] {
        [b, c, h, w] => [b, c, h, w],
        _ => {
            return Err(Error::shape(
                op.name(),
                format!("expected rank-4 input, got {shape:?}"),
            ))
        }
    };
    if h <= op.reach() || w <= op.reach() {
        return Err(Error::shape(
            op.name(),
            format!("spatial extent {h}x{w} too small for reach {}", op.reach()),
        ));
    }
    match op {
        OpKind::Identity => Ok(input),
        OpKind::MaxPool3x3 => g.max_pool3(input),
        OpKind::AvgPool3x3 => g.avg_pool3(input),
        _ => {
            let (k, dilation) = op.conv_geometry().expect("conv op");
            let wv = weights.ok_or_else(|| Error::shape(op.name(), "missing weights"))?;
            let dw = g.shape(wv.depthwise).to_vec();
            let pw = g.shape(wv.pointwise).to_vec();
            if dw != [c, 1, k, k] || pw != [c, c, 1, 1] {
                return Err(Error::shape(
                    op.name(),
                    format!("input channels {c}, depthwise {dw:?}, pointwise {pw:?}"),
                ));
            }
            let y = g.conv2d(input, wv.depthwise, None, c, dilation)?;
            let y = g.conv2d(y, wv.pointwise, None, 1, 1)?;
            Ok(g.relu(y))
        }
    }
}
