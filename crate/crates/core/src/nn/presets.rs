//! Architectures selectable by name.

use std::fmt;
use std::str::FromStr;

use super::{LayerKind, LayerSpec};
use crate::error::{config_err, dim_err, Result};
use crate::tensor::{conv_output_hw, Conv2dGeometry};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Preset {
    /// One hidden dense layer of 64 units.
    BlobsMlp,
    /// Two hidden dense layers of 256 units.
    MnistMlp,
    /// conv 8@5×5, pool 2, conv 16@5×5, pool 2, dense 128.
    MnistCnn,
    /// conv 96/128/256 @5×5 each followed by 3×3 stride-2 pooling, then two
    /// dense 2048 layers.
    ConventionalCnn,
}

/// Which relu outputs carry a distortion attachment.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum AttachAt {
    None,
    /// Hidden dense layers.
    Dense,
    /// Conv feature maps that feed another conv layer.
    Conv,
}

impl Preset {
    pub const ALL: [Preset; 4] = [Preset::BlobsMlp, Preset::MnistMlp, Preset::MnistCnn, Preset::ConventionalCnn];

    pub fn name(self) -> &'static str {
        match self {
            Preset::BlobsMlp => "blobs-mlp",
            Preset::MnistMlp => "mnist-mlp",
            Preset::MnistCnn => "mnist-cnn",
            Preset::ConventionalCnn => "conventional-cnn",
        }
    }

    pub fn is_conv(self) -> bool {
        matches!(self, Preset::MnistCnn | Preset::ConventionalCnn)
    }
}

impl fmt::Display for Preset {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Preset {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Preset::ALL
            .into_iter()
            .find(|p| p.name() == s)
            .ok_or_else(|| format!("unknown preset `{s}` (expected one of blobs-mlp, mnist-mlp, mnist-cnn, conventional-cnn)"))
    }
}

struct Builder {
    layers: Vec<LayerSpec>,
    shape: Vec<usize>,
    attach: AttachAt,
}

impl Builder {
    fn conv(&mut self, out_channels: usize, kernel: usize, padding: usize) -> Result<()> {
        let &[c, h, w] = self.shape.as_slice() else {
            return Err(dim_err!("conv preset needs C×H×W input, got {:?}", self.shape));
        };
        let geom = Conv2dGeometry::new(1, padding);
        let (oh, ow) = conv_output_hw(h, w, kernel, kernel, geom)?;
        self.layers.push(LayerSpec::new(LayerKind::Conv {
            in_channels: c,
            out_channels,
            kernel,
            geom,
        }));
        self.shape = vec![out_channels, oh, ow];
        Ok(())
    }

    fn pool(&mut self, window: usize, stride: usize) -> Result<()> {
        let &[c, h, w] = self.shape.as_slice() else { unreachable!("pool follows conv") };
        if window > h || window > w {
            return Err(dim_err!("input too small: {h}×{w} map before a {window}×{window} pool"));
        }
        self.layers.push(LayerSpec::maxpool(window, stride));
        self.shape = vec![c, (h - window) / stride + 1, (w - window) / stride + 1];
        Ok(())
    }

    /// Relu after a conv block; distorted when another conv follows.
    fn conv_relu(&mut self, conv_follows: bool) {
        let distort = conv_follows && self.attach == AttachAt::Conv;
        self.layers.push(LayerSpec {
            kind: LayerKind::Relu,
            distort,
        });
    }

    fn flatten(&mut self) {
        self.layers.push(LayerSpec::flatten());
        self.shape = vec![self.shape.iter().product()];
    }

    fn dense(&mut self, outputs: usize, hidden: bool) {
        self.layers.push(LayerSpec::dense(self.shape[0], outputs));
        self.shape = vec![outputs];
        if hidden {
            self.layers.push(LayerSpec {
                kind: LayerKind::Relu,
                distort: self.attach == AttachAt::Dense,
            });
        }
    }
}

/// Layer stack of `preset` for samples of `input_shape` and `classes` outputs.
pub fn preset_layers(preset: Preset, input_shape: &[usize], classes: usize, attach: AttachAt) -> Result<Vec<LayerSpec>> {
    if classes < 2 {
        return Err(config_err!("a classifier needs at least two classes, got {classes}"));
    }
    if attach == AttachAt::Conv && !preset.is_conv() {
        return Err(config_err!("preset {preset} has no conv feature maps for block masks"));
    }
    let mut b = Builder {
        layers: Vec::new(),
        shape: input_shape.to_vec(),
        attach,
    };
    match preset {
        Preset::BlobsMlp => {
            b.flatten();
            b.dense(64, true);
        }
        Preset::MnistMlp => {
            b.flatten();
            b.dense(256, true);
            b.dense(256, true);
        }
        Preset::MnistCnn => {
            b.conv(8, 5, 0)?;
            b.pool(2, 2)?;
            b.conv_relu(true);
            b.conv(16, 5, 0)?;
            b.pool(2, 2)?;
            b.conv_relu(false);
            b.flatten();
            b.dense(128, true);
        }
        Preset::ConventionalCnn => {
            for (i, filters) in [96, 128, 256].into_iter().enumerate() {
                b.conv(filters, 5, 2)?;
                b.pool(3, 2)?;
                b.conv_relu(i < 2);
            }
            b.flatten();
            b.dense(2048, true);
            b.dense(2048, true);
        }
    }
    b.dense(classes, false);
    b.layers.push(LayerSpec::head());
    Ok(b.layers)
}
