use super::cost::{separable_conv_cost, standard_conv_cost, ConvShape};
use crate::error::{Error, Result};
use crate::params::{self, fan_in_normal, Bound, ParamSet};
use crate::tensor::{ActivationKind, Graph, Tensor, Var};
use rand::Rng;
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ImageEncoderConfig {
    pub input_size: usize,
    pub stem_channels: usize,
    /// Output channels of the stride-8, stride-16 and stride-32 stages.
    pub stage_channels: [usize; 3],
    pub embed_dim: usize,
    pub expand_ratio: usize,
    pub block_activation: ActivationKind,
}

impl Default for ImageEncoderConfig {
    fn default() -> Self {
        Self {
            input_size: 224,
            stem_channels: 16,
            stage_channels: [24, 48, 96],
            embed_dim: 512,
            expand_ratio: 4,
            block_activation: ActivationKind::HSwish,
        }
    }
}

impl ImageEncoderConfig {
    pub fn desk() -> Self {
        Self {
            input_size: 64,
            stem_channels: 16,
            stage_channels: [16, 32, 64],
            embed_dim: 128,
            expand_ratio: 2,
            block_activation: ActivationKind::HSwish,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.input_size == 0 || !self.input_size.is_multiple_of(32) {
            return Err(Error::Config(format!(
                "image input size must be a positive multiple of 32, got {}",
                self.input_size
            )));
        }
        if self.embed_dim == 0
            || self.stem_channels == 0
            || self.expand_ratio == 0
            || self.stage_channels.contains(&0)
        {
            return Err(Error::Config("image encoder widths must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
struct Block {
    name: String,
    in_c: usize,
    hidden: usize,
    out_c: usize,
    stride: usize,
    /// Output side length.
    size: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum LayerKind {
    /// Depthwise followed by pointwise.
    Separable,
    /// A lone 1x1 convolution (expansion or tap projection).
    Pointwise,
}

/// Analytic cost of one encoder layer.
#[derive(Debug, Clone, Serialize)]
pub struct LayerCost {
    pub name: String,
    pub kind: LayerKind,
    pub shape: ConvShape,
}

impl LayerCost {
    /// MACs this layer performs in the encoder: the separable cost for a
    /// depthwise+pointwise pair, and the `D_K = 1` standard cost for a lone
    /// 1x1 convolution.
    pub fn macs(&self) -> u64 {
        match self.kind {
            LayerKind::Separable => separable_conv_cost(self.shape),
            LayerKind::Pointwise => standard_conv_cost(self.shape),
        }
    }
}

/// MobileNet-style encoder: a separable stem, three stages of inverted
/// residual blocks (expand 1x1, depthwise 3x3, linear 1x1) and one tap per
/// stage at strides 8, 16 and 32. Each tap is projected by its own 1x1
/// convolution to `embed_dim`, average pooled, concatenated and mapped back
/// to `embed_dim` by a linear layer followed by LayerNorm.
#[derive(Debug, Clone)]
pub struct ImageEncoder {
    cfg: ImageEncoderConfig,
    stages: [Vec<Block>; 3],
    tap_sizes: [usize; 3],
}

const KERNEL: usize = 3;

impl ImageEncoder {
    pub fn new(cfg: ImageEncoderConfig) -> Result<Self> {
        cfg.validate()?;
        let s = cfg.input_size;
        let [c1, c2, c3] = cfg.stage_channels;
        let e = cfg.expand_ratio;
        let block = |name: &str, in_c: usize, out_c: usize, stride: usize, size: usize| Block {
            name: format!("image.{name}"),
            in_c,
            hidden: in_c * e,
            out_c,
            stride,
            size,
        };
        let stages = [
            vec![
                block("stage1.block0", cfg.stem_channels, c1, 2, s / 4),
                block("stage1.block1", c1, c1, 2, s / 8),
            ],
            vec![
                block("stage2.block0", c1, c2, 2, s / 16),
                block("stage2.block1", c2, c2, 1, s / 16),
            ],
            vec![
                block("stage3.block0", c2, c3, 2, s / 32),
                block("stage3.block1", c3, c3, 1, s / 32),
            ],
        ];
        Ok(Self {
            cfg,
            stages,
            tap_sizes: [s / 8, s / 16, s / 32],
        })
    }

    pub fn config(&self) -> &ImageEncoderConfig {
        &self.cfg
    }

    pub fn init_params<R: Rng + ?Sized>(&self, rng: &mut R) -> ParamSet {
        let mut p = ParamSet::new();
        let k2 = KERNEL * KERNEL;
        let stem = self.cfg.stem_channels;
        p.insert("image.stem.dw.weight", fan_in_normal(&[3, KERNEL, KERNEL], k2, 2.0, rng));
        p.insert("image.stem.dw.bias", Tensor::zeros(&[3]));
        p.insert("image.stem.pw.weight", fan_in_normal(&[stem, 3], 3, 2.0, rng));
        p.insert("image.stem.pw.bias", Tensor::zeros(&[stem]));
        for b in self.stages.iter().flatten() {
            let n = &b.name;
            p.insert(format!("{n}.expand.weight"), fan_in_normal(&[b.hidden, b.in_c], b.in_c, 2.0, rng));
            p.insert(format!("{n}.expand.bias"), Tensor::zeros(&[b.hidden]));
            p.insert(format!("{n}.dw.weight"), fan_in_normal(&[b.hidden, KERNEL, KERNEL], k2, 2.0, rng));
            p.insert(format!("{n}.dw.bias"), Tensor::zeros(&[b.hidden]));
            p.insert(format!("{n}.project.weight"), fan_in_normal(&[b.out_c, b.hidden], b.hidden, 1.0, rng));
            p.insert(format!("{n}.project.bias"), Tensor::zeros(&[b.out_c]));
        }
        let d = self.cfg.embed_dim;
        for (i, &c) in self.cfg.stage_channels.iter().enumerate() {
            p.insert(format!("image.tap{}.weight", i + 1), fan_in_normal(&[d, c], c, 1.0, rng));
            p.insert(format!("image.tap{}.bias", i + 1), Tensor::zeros(&[d]));
        }
        params::init_linear(&mut p, "image.proj", 3 * d, d, rng);
        params::init_layer_norm(&mut p, "image.norm", d);
        p
    }

    fn conv_bias(g: &mut Graph, p: &Bound, name: &str, y: Var) -> Result<Var> {
        let b = p.get(&format!("{name}.bias"))?;
        g.add_channel(y, b)
    }

    fn block(&self, g: &mut Graph, p: &Bound, b: &Block, x: Var) -> Result<Var> {
        let act = self.cfg.block_activation;
        let n = &b.name;
        let h = g.pointwise_conv2d(x, p.get(&format!("{n}.expand.weight"))?)?;
        let h = Self::conv_bias(g, p, &format!("{n}.expand"), h)?;
        let h = g.activate(h, act)?;
        let h = g.depthwise_conv2d(h, p.get(&format!("{n}.dw.weight"))?, b.stride)?;
        let h = Self::conv_bias(g, p, &format!("{n}.dw"), h)?;
        let h = g.activate(h, act)?;
        let h = g.pointwise_conv2d(h, p.get(&format!("{n}.project.weight"))?)?;
        let h = Self::conv_bias(g, p, &format!("{n}.project"), h)?;
        if b.stride == 1 && b.in_c == b.out_c {
            g.add(h, x)
        } else {
            Ok(h)
        }
    }

    /// `[B, 3, S, S] -> [B, embed_dim]`.
    pub fn forward(&self, g: &mut Graph, p: &Bound, img: Var) -> Result<Var> {
        let s = self.cfg.input_size;
        let shape = g.shape(img);
        if shape.len() != 4 || shape[1] != 3 || shape[2] != s || shape[3] != s {
            return Err(Error::dim(
                "encode_image",
                format!("expected [B, 3, {s}, {s}], got {shape:?}"),
            ));
        }
        let act = self.cfg.block_activation;
        let h = g.depthwise_conv2d(img, p.get("image.stem.dw.weight")?, 2)?;
        let h = Self::conv_bias(g, p, "image.stem.dw", h)?;
        let h = g.pointwise_conv2d(h, p.get("image.stem.pw.weight")?)?;
        let h = Self::conv_bias(g, p, "image.stem.pw", h)?;
        let mut h = g.activate(h, act)?;

        let mut pooled = Vec::with_capacity(3);
        for (i, stage) in self.stages.iter().enumerate() {
            for b in stage {
                h = self.block(g, p, b, h)?;
            }
            let tap = format!("image.tap{}", i + 1);
            let f = g.pointwise_conv2d(h, p.get(&format!("{tap}.weight"))?)?;
            let f = Self::conv_bias(g, p, &tap, f)?;
            pooled.push(g.global_avg_pool(f)?);
        }
        let v = g.concat(&pooled, 1)?;
        let v = params::linear(g, p, "image.proj", v)?;
        params::layer_norm(g, p, "image.norm", v)
    }

    /// Encode one `[3, S, S]` image or a `[B, 3, S, S]` batch outside of training.
    pub fn encode(&self, params: &ParamSet, img: &Tensor) -> Result<Tensor> {
        let img = if img.rank() == 3 {
            let mut shape = vec![1];
            shape.extend_from_slice(img.shape());
            img.reshape(&shape)?
        } else {
            img.clone()
        };
        let mut g = Graph::new();
        let p = params.bind(&mut g, false);
        let x = g.constant(img);
        let out = self.forward(&mut g, &p, x)?;
        Ok(g.value(out).clone())
    }

    /// Every convolution of the encoder with the geometry it runs at.
    pub fn layer_costs(&self) -> Vec<LayerCost> {
        let s = self.cfg.input_size;
        let mut out = vec![LayerCost {
            name: "image.stem".into(),
            kind: LayerKind::Separable,
            shape: ConvShape {
                df: s / 2,
                m: 3,
                n: self.cfg.stem_channels,
                dk: KERNEL,
            },
        }];
        let mut size = s / 2;
        for (i, stage) in self.stages.iter().enumerate() {
            for b in stage {
                out.push(LayerCost {
                    name: format!("{}.expand", b.name),
                    kind: LayerKind::Pointwise,
                    shape: ConvShape {
                        df: size,
                        m: b.in_c,
                        n: b.hidden,
                        dk: 1,
                    },
                });
                out.push(LayerCost {
                    name: format!("{}.dw+project", b.name),
                    kind: LayerKind::Separable,
                    shape: ConvShape {
                        df: b.size,
                        m: b.hidden,
                        n: b.out_c,
                        dk: KERNEL,
                    },
                });
                size = b.size;
            }
            out.push(LayerCost {
                name: format!("image.tap{}", i + 1),
                kind: LayerKind::Pointwise,
                shape: ConvShape {
                    df: self.tap_sizes[i],
                    m: self.cfg.stage_channels[i],
                    n: self.cfg.embed_dim,
                    dk: 1,
                },
            });
        }
        out
    }

    /// Sum of [`LayerCost::macs`] for one image.
    pub fn analytic_macs(&self) -> u64 {
        self.layer_costs().iter().map(LayerCost::macs).sum()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn tiny() -> ImageEncoderConfig {
        ImageEncoderConfig {
            input_size: 32,
            stem_channels: 4,
            stage_channels: [4, 6, 8],
            embed_dim: 8,
            expand_ratio: 2,
            block_activation: ActivationKind::HSwish,
        }
    }

    #[test]
    fn rejects_sizes_not_divisible_by_32() {
        let cfg = ImageEncoderConfig {
            input_size: 48,
            ..tiny()
        };
        assert!(matches!(ImageEncoder::new(cfg), Err(Error::Config(_))));
    }

    #[test]
    fn wrong_input_shape_is_dimension_error() {
        let enc = ImageEncoder::new(tiny()).unwrap();
        let p = enc.init_params(&mut ChaCha8Rng::seed_from_u64(0));
        let err = enc.encode(&p, &Tensor::zeros(&[3, 64, 64])).unwrap_err();
        assert!(matches!(err, Error::Dimension { .. }));
        let err = enc.encode(&p, &Tensor::zeros(&[1, 32, 32])).unwrap_err();
        assert!(matches!(err, Error::Dimension { .. }));
    }

    #[test]
    fn zero_image_maps_to_norm_bias() {
        let enc = ImageEncoder::new(tiny()).unwrap();
        let mut p = enc.init_params(&mut ChaCha8Rng::seed_from_u64(1));
        let bias: Vec<f64> = (0..8).map(|i| i as f64 * 0.25 - 1.0).collect();
        *p.get_mut("image.norm.bias").unwrap() = Tensor::new(vec![8], bias.clone()).unwrap();
        let out = enc.encode(&p, &Tensor::zeros(&[3, 32, 32])).unwrap();
        assert_eq!(out.shape(), &[1, 8]);
        assert_eq!(out.data(), bias.as_slice());
    }

    #[test]
    fn full_preset_width() {
        let enc = ImageEncoder::new(ImageEncoderConfig::default()).unwrap();
        assert_eq!(enc.config().embed_dim, 512);
        let p = enc.init_params(&mut ChaCha8Rng::seed_from_u64(2));
        let img = Tensor::uniform(&[3, 224, 224], -1.0, 1.0, &mut ChaCha8Rng::seed_from_u64(3));
        let out = enc.encode(&p, &img).unwrap();
        assert_eq!(out.shape(), &[1, 512]);
    }

    #[test]
    fn forward_mac_count_matches_layer_table() {
        for cfg in [tiny(), ImageEncoderConfig::desk()] {
            let enc = ImageEncoder::new(cfg.clone()).unwrap();
            let p = enc.init_params(&mut ChaCha8Rng::seed_from_u64(4));
            let mut g = Graph::new();
            let b = p.bind(&mut g, false);
            let s = cfg.input_size;
            let x = g.constant(Tensor::zeros(&[1, 3, s, s]));
            enc.forward(&mut g, &b, x).unwrap();
            assert_eq!(g.mac_count(), enc.analytic_macs());
        }
    }
}
