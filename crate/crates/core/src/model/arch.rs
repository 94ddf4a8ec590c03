//! Network layouts for every CIGMO component.
//!
//! Encoders are a trunk followed by small heads. The shape encoder has one
//! trunk shared by all categories and by the mean and variance heads. Each
//! decoder owns its first `category_layers` fully connected layers; the
//! remaining stages are shared.

use std::fmt;
use std::str::FromStr;

use crate::nn::{LayerSpec, NetSpec, Shape};

use super::{CigmoConfig, ModelError, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Arch {
    /// Fully connected trunks; fast enough for CPU experiments.
    Mlp,
    /// Three stride-2 conv layers (16/32/64 filters) and a mirrored deconv decoder.
    #[default]
    Conv,
}

impl fmt::Display for Arch {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Arch::Mlp => "mlp",
            Arch::Conv => "conv",
        })
    }
}

impl FromStr for Arch {
    type Err = ModelError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "mlp" => Ok(Arch::Mlp),
            "conv" => Ok(Arch::Conv),
            _ => Err(ModelError::Config(format!("unknown arch `{s}` (expected mlp or conv)"))),
        }
    }
}

pub const CONV_FILTERS: [usize; 3] = [16, 32, 64];

#[derive(Debug, Clone, PartialEq)]
pub struct NetPlan {
    /// Image to C logits.
    pub categorizer: NetSpec,
    pub view_trunk: NetSpec,
    pub view_mean: NetSpec,
    pub view_var: NetSpec,
    pub shape_trunk: NetSpec,
    pub shape_mean: NetSpec,
    pub shape_var: NetSpec,
    /// Per-category first decoder layer on the concatenated `[y, z]`.
    pub decoder_in: NetSpec,
    pub decoder_trunk: NetSpec,
}

fn act(layers: &mut Vec<LayerSpec>, bn: bool) {
    if bn {
        layers.push(LayerSpec::BatchNorm);
    }
    layers.push(LayerSpec::Relu);
}

fn encoder_trunk(cfg: &CigmoConfig) -> Result<Vec<LayerSpec>> {
    let h = cfg.hidden;
    let mut layers = Vec::new();
    match cfg.arch {
        Arch::Mlp => {
            layers.push(LayerSpec::Dense { inputs: cfg.image_dim(), outputs: h });
            act(&mut layers, cfg.batchnorm);
            layers.push(LayerSpec::Dense { inputs: h, outputs: h });
            act(&mut layers, cfg.batchnorm);
        }
        Arch::Conv => {
            let (side_h, side_w) = conv_grid(cfg)?;
            for f in CONV_FILTERS {
                layers.push(LayerSpec::Conv { filters: f, kernel: 5, stride: 2, pad: 2 });
                act(&mut layers, cfg.batchnorm);
            }
            layers.push(LayerSpec::Dense { inputs: CONV_FILTERS[2] * side_h * side_w, outputs: h });
            act(&mut layers, cfg.batchnorm);
        }
    }
    Ok(layers)
}

fn conv_grid(cfg: &CigmoConfig) -> Result<(usize, usize)> {
    match cfg.image {
        Shape::Image { height, width, .. } if height % 8 == 0 && width % 8 == 0 => Ok((height / 8, width / 8)),
        other => Err(ModelError::Config(format!(
            "the conv architecture needs an image whose sides are multiples of 8, got {other}"
        ))),
    }
}

fn spec(input: Shape, layers: Vec<LayerSpec>) -> Result<NetSpec> {
    Ok(NetSpec::new(input, layers)?)
}

pub fn plan_nets(cfg: &CigmoConfig) -> Result<NetPlan> {
    let h = cfg.hidden;
    let trunk = encoder_trunk(cfg)?;
    let head = |out: usize, last: LayerSpec| spec(Shape::Flat(h), vec![LayerSpec::Dense { inputs: h, outputs: out }, last]);

    let mut cat = trunk.clone();
    cat.push(LayerSpec::Dense { inputs: h, outputs: cfg.categories });
    cat.push(LayerSpec::Linear);

    let latent = cfg.view_dim + cfg.shape_dim;
    // Two fully connected layers precede the output stage; the first
    // `category_layers` of them belong to each category.
    let top = match cfg.arch {
        Arch::Mlp => h,
        Arch::Conv => {
            let (gh, gw) = conv_grid(cfg)?;
            CONV_FILTERS[2] * gh * gw
        }
    };
    let mut own = vec![LayerSpec::Dense { inputs: latent, outputs: h }];
    let mut dec = Vec::new();
    if cfg.category_layers >= 2 {
        act(&mut own, cfg.batchnorm);
        own.push(LayerSpec::Dense { inputs: h, outputs: top });
        act(&mut own, cfg.batchnorm);
    } else {
        own.push(LayerSpec::Linear);
        act(&mut dec, cfg.batchnorm);
        dec.push(LayerSpec::Dense { inputs: h, outputs: top });
        act(&mut dec, cfg.batchnorm);
    }
    match cfg.arch {
        Arch::Mlp => dec.push(LayerSpec::Dense { inputs: h, outputs: cfg.image_dim() }),
        Arch::Conv => {
            let (gh, gw) = conv_grid(cfg)?;
            let Shape::Image { channels, .. } = cfg.image else { unreachable!("checked by conv_grid") };
            dec.push(LayerSpec::Reshape { channels: CONV_FILTERS[2], height: gh, width: gw });
            dec.push(LayerSpec::Deconv { filters: CONV_FILTERS[1], kernel: 6, stride: 2, pad: 2 });
            act(&mut dec, cfg.batchnorm);
            dec.push(LayerSpec::Deconv { filters: CONV_FILTERS[0], kernel: 6, stride: 2, pad: 2 });
            act(&mut dec, cfg.batchnorm);
            dec.push(LayerSpec::Deconv { filters: channels, kernel: 6, stride: 2, pad: 2 });
        }
    }
    dec.push(LayerSpec::Sigmoid);

    Ok(NetPlan {
        categorizer: spec(cfg.image, cat)?,
        view_trunk: spec(cfg.image, trunk.clone())?,
        view_mean: head(cfg.view_dim, LayerSpec::Linear)?,
        view_var: head(cfg.view_dim, LayerSpec::Softplus)?,
        shape_trunk: spec(cfg.image, trunk)?,
        shape_mean: head(cfg.shape_dim, LayerSpec::Linear)?,
        shape_var: head(cfg.shape_dim, LayerSpec::Softplus)?,
        decoder_in: spec(Shape::Flat(latent), own)?,
        decoder_trunk: spec(Shape::Flat(if cfg.category_layers >= 2 { top } else { h }), dec)?,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn desk_scale_conv_plan_composes() {
        let plan = plan_nets(&CigmoConfig::default()).unwrap();
        assert_eq!(plan.categorizer.output_shape(), Shape::Flat(3));
        assert_eq!(plan.decoder_trunk.output_shape(), Shape::Image { channels: 1, height: 32, width: 32 });
        assert_eq!(plan.decoder_in.input, Shape::Flat(18));
    }

    #[test]
    fn full_scale_decoder_input_has_103_units() {
        let cfg = CigmoConfig { shape_dim: 100, view_dim: 3, hidden: 500, ..CigmoConfig::default() };
        let plan = plan_nets(&cfg).unwrap();
        assert_eq!(plan.decoder_in.input, Shape::Flat(103));
    }

    #[test]
    fn category_layers_move_the_boundary_between_private_and_shared() {
        let mlp = CigmoConfig { arch: Arch::Mlp, batchnorm: false, hidden: 10, ..CigmoConfig::default() };
        let one = plan_nets(&mlp).unwrap();
        assert_eq!(one.decoder_in.layers.len(), 2);
        assert_eq!(one.decoder_in.output_shape(), Shape::Flat(10));
        let two = plan_nets(&CigmoConfig { category_layers: 2, ..mlp }).unwrap();
        assert_eq!(two.decoder_in.layers.len(), 4);
        assert_eq!(two.decoder_trunk.layers.len(), 2);
        let conv = plan_nets(&CigmoConfig { category_layers: 2, ..CigmoConfig::default() }).unwrap();
        assert_eq!(conv.decoder_in.output_shape(), Shape::Flat(64 * 4 * 4));
        assert_eq!(conv.decoder_trunk.output_shape(), Shape::Image { channels: 1, height: 32, width: 32 });
        assert!(CigmoConfig { category_layers: 3, ..mlp }.validate().is_err());
    }

    #[test]
    fn conv_needs_sides_divisible_by_eight() {
        let cfg = CigmoConfig { image: Shape::Image { channels: 1, height: 12, width: 12 }, ..CigmoConfig::default() };
        assert!(plan_nets(&cfg).is_err());
        let mlp = CigmoConfig { arch: Arch::Mlp, ..cfg };
        assert_eq!(plan_nets(&mlp).unwrap().decoder_trunk.output_shape(), Shape::Flat(144));
    }
}
