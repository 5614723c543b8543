//! Named toy architectures. `cnn-max` and `cnn-avg` differ only in the pooling
//! kind, and the stride variants only in pooling stride, so seeded pairs share
//! every non-pooling parameter.

use std::fmt;
use std::str::FromStr;

use super::layer::{LayerSpec, Padding};
use super::network::Network;
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Preset {
    CnnMax,
    CnnAvg,
    /// Max-pool with the given stride; kernel is `max(2, stride)`.
    CnnStride(usize),
    Linear,
}

impl Preset {
    pub const ALL: [Preset; 6] = [
        Preset::CnnMax,
        Preset::CnnAvg,
        Preset::CnnStride(1),
        Preset::CnnStride(2),
        Preset::CnnStride(4),
        Preset::Linear,
    ];

    pub fn layers(&self, num_classes: usize) -> Vec<LayerSpec> {
        let pool = |stride: usize, max: bool| {
            let kernel = stride.max(2);
            if max {
                LayerSpec::MaxPool2D { kernel, stride }
            } else {
                LayerSpec::AvgPool2D { kernel, stride }
            }
        };
        let cnn = |p: LayerSpec| {
            vec![
                LayerSpec::conv(3, 8, Padding::Same),
                LayerSpec::ReLU,
                p,
                LayerSpec::conv(3, 16, Padding::Same),
                LayerSpec::ReLU,
                p,
                LayerSpec::Flatten,
                LayerSpec::Dense { units: num_classes },
            ]
        };
        match *self {
            Preset::CnnMax => cnn(pool(2, true)),
            Preset::CnnAvg => cnn(pool(2, false)),
            Preset::CnnStride(s) => cnn(pool(s, true)),
            Preset::Linear => vec![LayerSpec::Flatten, LayerSpec::Dense { units: num_classes }],
        }
    }

    pub fn build(&self, input_shape: [usize; 3], num_classes: usize, seed: u64) -> Result<Network> {
        Network::init(self.layers(num_classes), input_shape, num_classes, seed)
    }

    /// Index of the first pooling layer, if any.
    pub fn first_pool(&self) -> Option<usize> {
        match self {
            Preset::Linear => None,
            _ => Some(2),
        }
    }
}

impl fmt::Display for Preset {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Preset::CnnMax => f.write_str("cnn-max"),
            Preset::CnnAvg => f.write_str("cnn-avg"),
            Preset::CnnStride(s) => write!(f, "cnn-stride{s}"),
            Preset::Linear => f.write_str("linear"),
        }
    }
}

impl FromStr for Preset {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "cnn-max" => Ok(Preset::CnnMax),
            "cnn-avg" => Ok(Preset::CnnAvg),
            "linear" => Ok(Preset::Linear),
            _ => s
                .strip_prefix("cnn-stride")
                .and_then(|n| n.parse().ok())
                .filter(|&n: &usize| n >= 1)
                .map(Preset::CnnStride)
                .ok_or_else(|| Error::InvalidConfig(format!("unknown architecture {s:?}"))),
        }
    }
}
