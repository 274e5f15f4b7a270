use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use super::{LayerKind, NetworkGraph, NodeId};
use crate::error::{Error, Result};
use crate::tensor::Shape;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Architecture {
    Resnet18Rgb,
    Resnet18Dct,
    Resnet20Rgb,
    Resnet20Dct,
}

impl Architecture {
    pub const ALL: [Architecture; 4] = [
        Architecture::Resnet18Rgb,
        Architecture::Resnet18Dct,
        Architecture::Resnet20Rgb,
        Architecture::Resnet20Dct,
    ];

    pub fn is_dct(self) -> bool {
        matches!(self, Architecture::Resnet18Dct | Architecture::Resnet20Dct)
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Architecture::Resnet18Rgb => "resnet18_rgb",
            Architecture::Resnet18Dct => "resnet18_dct",
            Architecture::Resnet20Rgb => "resnet20_rgb",
            Architecture::Resnet20Dct => "resnet20_dct",
        }
    }

    pub fn default_classes(self) -> usize {
        match self {
            Architecture::Resnet18Rgb | Architecture::Resnet18Dct => 1000,
            Architecture::Resnet20Rgb | Architecture::Resnet20Dct => 10,
        }
    }
}

impl fmt::Display for Architecture {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Architecture {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let norm = s.to_ascii_lowercase().replace('-', "_");
        Architecture::ALL
            .into_iter()
            .find(|a| a.as_str() == norm)
            .ok_or_else(|| Error::InvalidConfig(format!("unknown architecture `{s}`")))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct BuildOptions {
    /// Defaults to 1000 for ResNet-18 and 10 for ResNet-20.
    pub num_classes: Option<usize>,
    /// ReLU after the stem convolution. Defaults to on for RGB stems and off
    /// for DCT stems.
    pub head_relu: Option<bool>,
    /// ReLU after every residual addition.
    pub residual_relu: bool,
}

impl Default for BuildOptions {
    fn default() -> Self {
        Self {
            num_classes: None,
            head_relu: None,
            residual_relu: true,
        }
    }
}

struct Builder {
    g: NetworkGraph,
    residual_relu: bool,
}

impl Builder {
    fn conv_bn(&mut self, prefix: &str, x: NodeId, in_ch: usize, out_ch: usize, kernel: usize, stride: usize) -> NodeId {
        let c = self.g.push(
            format!("{prefix}conv"),
            LayerKind::Conv2d {
                in_ch,
                out_ch,
                kernel,
                stride,
                pad: kernel / 2,
                bias: false,
            },
            &[x],
        );
        self.g.push(
            format!("{prefix}bn"),
            LayerKind::BatchNorm {
                channels: out_ch,
                eps: 1e-5,
            },
            &[c],
        )
    }

    fn basic_block(&mut self, name: &str, x: NodeId, in_ch: usize, out_ch: usize, stride: usize) -> NodeId {
        let a = self.conv_bn(&format!("{name}.1."), x, in_ch, out_ch, 3, stride);
        let a = self.g.push(format!("{name}.relu1"), LayerKind::Relu, &[a]);
        let b = self.conv_bn(&format!("{name}.2."), a, out_ch, out_ch, 3, 1);
        let skip = if stride != 1 || in_ch != out_ch {
            self.conv_bn(&format!("{name}.downsample."), x, in_ch, out_ch, 1, stride)
        } else {
            x
        };
        let sum = self.g.push(format!("{name}.add"), LayerKind::Add, &[b, skip]);
        if self.residual_relu {
            self.g.push(format!("{name}.relu2"), LayerKind::Relu, &[sum])
        } else {
            sum
        }
    }

    fn stages(&mut self, mut x: NodeId, mut ch: usize, widths: &[usize], strides: &[usize], blocks: usize) -> (NodeId, usize) {
        for (s, (&w, &stride)) in widths.iter().zip(strides).enumerate() {
            for b in 0..blocks {
                let st = if b == 0 { stride } else { 1 };
                x = self.basic_block(&format!("layer{}.{b}", s + 1), x, ch, w, st);
                ch = w;
            }
        }
        (x, ch)
    }

    fn head(&mut self, x: NodeId, ch: usize, classes: usize) -> NodeId {
        let p = self.g.push("avgpool", LayerKind::GlobalAvgPool, &[x]);
        self.g.push(
            "fc",
            LayerKind::FullyConnected {
                in_features: ch,
                out_features: classes,
                bias: true,
            },
            &[p],
        )
    }
}

/// Builds one of the four ResNet variants.
///
/// RGB ResNet-18 uses the ImageNet stem (7x7/2 conv, BN, ReLU, 3x3/2 max
/// pool); the DCT variant swaps it for a 1x1/1 conv and BN with no ReLU and
/// no pooling, leaving the four stages untouched. ResNet-20 uses a 3x3 stem
/// and widths 16/32/64; its DCT variant has a 1x1 stem, widths 48/56/64 and
/// only the last stage downsamples. Projection shortcuts are 1x1 conv + BN.
pub fn build_network(arch: Architecture, input: Shape, opts: &BuildOptions) -> Result<NetworkGraph> {
    if arch.is_dct() {
        if input.c == 0 {
            return Err(Error::InvalidConfig("DCT input needs at least one channel".into()));
        }
    } else if input.c != 3 {
        return Err(Error::InvalidConfig(format!(
            "{arch} expects 3 input channels, got {}",
            input.c
        )));
    }
    let classes = opts.num_classes.unwrap_or_else(|| arch.default_classes());
    let head_relu = opts.head_relu.unwrap_or(!arch.is_dct());
    let mut b = Builder {
        g: NetworkGraph::new(),
        residual_relu: opts.residual_relu,
    };
    let x = b.g.push("input", LayerKind::Input { dims: input }, &[]);
    let (stem_ch, stem_kernel, stem_stride) = match arch {
        Architecture::Resnet18Rgb => (64, 7, 2),
        Architecture::Resnet18Dct => (64, 1, 1),
        Architecture::Resnet20Rgb => (16, 3, 1),
        Architecture::Resnet20Dct => (48, 1, 1),
    };
    let mut x = b.conv_bn("stem.", x, input.c, stem_ch, stem_kernel, stem_stride);
    if head_relu {
        x = b.g.push("stem.relu", LayerKind::Relu, &[x]);
    }
    if arch == Architecture::Resnet18Rgb {
        x = b.g.push(
            "stem.maxpool",
            LayerKind::MaxPool {
                kernel: 3,
                stride: 2,
                pad: 1,
            },
            &[x],
        );
    }
    let (x, ch) = match arch {
        Architecture::Resnet18Rgb | Architecture::Resnet18Dct => {
            b.stages(x, 64, &[64, 128, 256, 512], &[1, 2, 2, 2], 2)
        }
        Architecture::Resnet20Rgb => b.stages(x, 16, &[16, 32, 64], &[1, 2, 2], 3),
        Architecture::Resnet20Dct => b.stages(x, 48, &[48, 56, 64], &[1, 1, 2], 3),
    };
    b.head(x, ch, classes);
    b.g.infer_shapes().map_err(|e| {
        Error::InvalidConfig(format!("input {input} is incompatible with {arch}: {e}"))
    })?;
    Ok(b.g)
}

/// Small two-layer CNN (3x3 conv with bias, ReLU, global pool, linear).
pub fn toy_cnn(input: Shape, hidden: usize, classes: usize) -> NetworkGraph {
    let mut g = NetworkGraph::new();
    let x = g.push("input", LayerKind::Input { dims: input }, &[]);
    let c = g.push(
        "conv",
        LayerKind::Conv2d {
            in_ch: input.c,
            out_ch: hidden,
            kernel: 3,
            stride: 1,
            pad: 1,
            bias: true,
        },
        &[x],
    );
    let r = g.push("relu", LayerKind::Relu, &[c]);
    let p = g.push("avgpool", LayerKind::GlobalAvgPool, &[r]);
    g.push(
        "fc",
        LayerKind::FullyConnected {
            in_features: hidden,
            out_features: classes,
            bias: true,
        },
        &[p],
    );
    g
}

#[cfg(test)]
mod tests {
    use super::*;

    fn relus(g: &NetworkGraph) -> usize {
        g.count_kind(|k| matches!(k, LayerKind::Relu))
    }

    fn build(arch: Architecture, c: usize, s: usize) -> NetworkGraph {
        build_network(arch, Shape::new(c, s, s), &BuildOptions::default()).unwrap()
    }

    #[test]
    fn resnet18_rgb_structure() {
        let g = build(Architecture::Resnet18Rgb, 3, 224);
        assert_eq!(relus(&g), 17);
        let shapes = g.infer_shapes().unwrap();
        assert_eq!(shapes[g.find("stem.conv").unwrap()], Shape::new(64, 112, 112));
        assert_eq!(shapes[g.find("stem.maxpool").unwrap()], Shape::new(64, 56, 56));
        assert_eq!(shapes[g.output], Shape::new(1000, 1, 1));
    }

    #[test]
    fn resnet18_dct_head() {
        let g = build(Architecture::Resnet18Dct, 64, 56);
        let stem = &g.nodes[g.find("stem.conv").unwrap()];
        assert_eq!(
            stem.kind,
            LayerKind::Conv2d {
                in_ch: 64,
                out_ch: 64,
                kernel: 1,
                stride: 1,
                pad: 0,
                bias: false
            }
        );
        let bn = g.find("stem.bn").unwrap();
        let consumers = &g.consumers()[bn];
        assert!(consumers
            .iter()
            .all(|&c| !matches!(g.nodes[c].kind, LayerKind::Relu)));
        assert_eq!(g.count_kind(|k| matches!(k, LayerKind::MaxPool { .. })), 0);
        assert_eq!(relus(&g), 16);
        let shapes = g.infer_shapes().unwrap();
        for (n, s) in g.nodes.iter().zip(&shapes) {
            if n.name.starts_with("layer1.") {
                assert_eq!(*s, Shape::new(64, 56, 56), "{}", n.name);
            }
        }
    }

    #[test]
    fn dct_channels_only_touch_stem() {
        let base = build(Architecture::Resnet18Dct, 64, 56).infer_shapes().unwrap();
        for c in [6, 24, 48, 192] {
            let g = build(Architecture::Resnet18Dct, c, 56);
            let shapes = g.infer_shapes().unwrap();
            for (i, n) in g.nodes.iter().enumerate() {
                if n.name != "input" {
                    assert_eq!(shapes[i], base[i], "{}", n.name);
                }
            }
        }
    }

    #[test]
    fn resolution_scaling_is_quadratic() {
        let a = build(Architecture::Resnet18Rgb, 3, 224).infer_shapes().unwrap();
        let b = build(Architecture::Resnet18Rgb, 3, 448).infer_shapes().unwrap();
        let g = build(Architecture::Resnet18Rgb, 3, 224);
        for (i, n) in g.nodes.iter().enumerate() {
            if !matches!(n.kind, LayerKind::GlobalAvgPool | LayerKind::FullyConnected { .. }) {
                assert_eq!(b[i].len(), 4 * a[i].len(), "{}", n.name);
            }
        }
    }

    #[test]
    fn resnet20_variants() {
        let rgb = build(Architecture::Resnet20Rgb, 3, 32);
        assert_eq!(relus(&rgb), 19);
        // 3x3 stem, 18 block convs, two projection shortcuts, BN affine, FC
        let p = rgb.count_params();
        assert!((265_000..280_000).contains(&p), "{p}");

        for s in [8, 16] {
            let dct = build(Architecture::Resnet20Dct, 48, s);
            let shapes = dct.infer_shapes().unwrap();
            assert_eq!(shapes[dct.find("layer2.2.add").unwrap()], Shape::new(56, s, s));
            assert_eq!(shapes[dct.find("layer3.2.add").unwrap()], Shape::new(64, s / 2, s / 2));
            let ratio = dct.count_params() as f64 / p as f64;
            assert!((1.8..=2.2).contains(&ratio), "{ratio}");
        }
    }

    #[test]
    fn rgb_rejects_wrong_channels() {
        assert!(build_network(Architecture::Resnet18Rgb, Shape::new(64, 56, 56), &BuildOptions::default()).is_err());
        assert!(build_network(Architecture::Resnet18Rgb, Shape::new(3, 0, 0), &BuildOptions::default()).is_err());
    }

    #[test]
    fn arch_parsing() {
        assert_eq!("resnet18-dct".parse::<Architecture>().unwrap(), Architecture::Resnet18Dct);
        assert_eq!("RESNET20_RGB".parse::<Architecture>().unwrap(), Architecture::Resnet20Rgb);
        assert!("vgg9".parse::<Architecture>().is_err());
    }
}
