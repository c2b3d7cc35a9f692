//! Toy single-stage grid detectors in four input configurations.
//!
//! * `Rgb`, `Depth`, `Early`: one backbone (stride 1, 2, 2, 2 convolutions)
//!   over 3, 2 or 5 input channels; early fusion concatenates RGB and the two
//!   LiDAR channels at the input.
//! * `Late`: separate stride-8 backbones for RGB and LiDAR whose features are
//!   concatenated, fused by one more 3×3 convolution, and fed to the shared head.
//!
//! The head is a 1×1 convolution producing `1 + K + 4` channels per cell:
//! objectness logit, `K` class logits, and box parameters `(tx, ty, tw, th)`.

mod decode;
mod targets;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::ndlab::{ParamStore, Tape, Tensor, Var};
use crate::rng::named_rng;
use crate::scenegen::ObjectClass;

pub use decode::{decode, iou, nms, Detection, DEFAULT_NMS_IOU, DEFAULT_SCORE_THRESH};
pub use targets::{
    assign_targets, detection_loss, loss_of, perfect_prediction, regression_loss, LossParts, LossVars, Targets, REG_BETA, REG_WEIGHT,
};

pub const NUM_CLASSES: usize = ObjectClass::COUNT;
/// Objectness + class logits + four box parameters.
pub const HEAD_CHANNELS: usize = 1 + NUM_CLASSES + 4;
pub const OBJ_CHANNEL: usize = 0;
pub const CLS_CHANNEL: usize = 1;
pub const BOX_CHANNEL: usize = 1 + NUM_CLASSES;

const HEAD_LAYER: &str = "head";
/// The head starts near its bias so that early box and objectness losses stay
/// small; full-size He weights make plain SGD blow up at useful rates.
pub const HEAD_INIT_SCALE: f32 = 0.1;
/// Initial head biases: objectness prior 0.01, and `tw`, `th` at a box about
/// 8% of the image wide and 14% high.
pub const HEAD_BIAS_PRIORS: [(usize, f32); 3] = [(OBJ_CHANNEL, -4.6), (BOX_CHANNEL + 2, -2.5), (BOX_CHANNEL + 3, -2.0)];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum FusionMode {
    Rgb,
    Depth,
    Early,
    Late,
}

impl FusionMode {
    pub const ALL: [FusionMode; 4] = [FusionMode::Rgb, FusionMode::Depth, FusionMode::Early, FusionMode::Late];

    pub fn uses_rgb(self) -> bool {
        !matches!(self, FusionMode::Depth)
    }

    pub fn uses_lidar(self) -> bool {
        !matches!(self, FusionMode::Rgb)
    }

    pub fn name(self) -> &'static str {
        match self {
            FusionMode::Rgb => "rgb",
            FusionMode::Depth => "depth",
            FusionMode::Early => "early",
            FusionMode::Late => "late",
        }
    }

    /// Total input channels seen by the network.
    pub fn input_channels(self) -> usize {
        match self {
            FusionMode::Rgb => 3,
            FusionMode::Depth => 2,
            FusionMode::Early | FusionMode::Late => 5,
        }
    }
}

impl std::str::FromStr for FusionMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        FusionMode::ALL
            .into_iter()
            .find(|m| m.name() == s)
            .ok_or_else(|| Error::Config(format!("unknown fusion mode {s:?}")))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DetectorConfig {
    pub fusion: FusionMode,
    /// Single-backbone widths; strides are 1, 2, 2, 2.
    pub backbone_widths: [usize; 4],
    /// Late-fusion branch widths; strides are 2, 2, 2.
    pub branch_widths: [usize; 3],
    /// Late-fusion post-concatenation width.
    pub fuse_width: usize,
    pub image_height: usize,
    pub image_width: usize,
}

impl Default for DetectorConfig {
    fn default() -> Self {
        Self {
            fusion: FusionMode::Early,
            backbone_widths: [16, 32, 64, 64],
            branch_widths: [16, 32, 32],
            fuse_width: 64,
            image_height: 96,
            image_width: 128,
        }
    }
}

pub const STRIDE: usize = 8;

impl DetectorConfig {
    pub fn with_fusion(fusion: FusionMode) -> Self {
        Self {
            fusion,
            ..Self::default()
        }
    }

    pub fn grid(&self) -> (usize, usize) {
        (self.image_height / STRIDE, self.image_width / STRIDE)
    }

    pub fn validate(&self) -> Result<()> {
        if self.image_height % STRIDE != 0 || self.image_width % STRIDE != 0 || self.image_height == 0 || self.image_width == 0 {
            return Err(Error::Config(format!(
                "stride {STRIDE} must divide the image size {}×{}",
                self.image_height, self.image_width
            )));
        }
        if self.backbone_widths.contains(&0) || self.branch_widths.contains(&0) || self.fuse_width == 0 {
            return Err(Error::Config("layer widths must be positive".into()));
        }
        Ok(())
    }

    /// Convolution layers in parameter order.
    pub fn layers(&self) -> Vec<LayerSpec> {
        let mut layers = Vec::new();
        let mut chain = |prefix: &str, input: usize, widths: &[usize], strides: &[usize]| {
            let mut c = input;
            for (i, (&w, &s)) in widths.iter().zip(strides).enumerate() {
                layers.push(LayerSpec {
                    name: format!("{prefix}.conv{}", i + 1),
                    in_channels: c,
                    out_channels: w,
                    kernel: 3,
                    stride: s,
                });
                c = w;
            }
            c
        };
        let features = match self.fusion {
            FusionMode::Late => {
                let r = chain("rgb_branch", 3, &self.branch_widths, &[2, 2, 2]);
                let l = chain("lidar_branch", 2, &self.branch_widths, &[2, 2, 2]);
                chain("fuse", r + l, &[self.fuse_width], &[1])
            }
            mode => chain("backbone", mode.input_channels(), &self.backbone_widths, &[1, 2, 2, 2]),
        };
        layers.push(LayerSpec {
            name: HEAD_LAYER.into(),
            in_channels: features,
            out_channels: HEAD_CHANNELS,
            kernel: 1,
            stride: 1,
        });
        layers
    }

    pub fn num_params(&self) -> usize {
        self.layers().iter().map(LayerSpec::num_params).sum()
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LayerSpec {
    pub name: String,
    pub in_channels: usize,
    pub out_channels: usize,
    pub kernel: usize,
    pub stride: usize,
}

impl LayerSpec {
    pub fn weight_shape(&self) -> Vec<usize> {
        vec![self.out_channels, self.in_channels, self.kernel, self.kernel]
    }

    pub fn num_params(&self) -> usize {
        self.out_channels * self.in_channels * self.kernel * self.kernel + self.out_channels
    }
}

/// Raw head output, `(1 + K + 4) × H/8 × W/8`.
#[derive(Debug, Clone, PartialEq)]
pub struct RawPrediction {
    pub grid: Tensor,
}

impl RawPrediction {
    pub fn grid_dims(&self) -> (usize, usize) {
        let s = self.grid.shape();
        (s[1], s[2])
    }
}

/// Network inputs for one scene: RGB scaled to [0, 1], LiDAR from `normalize_depth`.
#[derive(Debug, Clone, Copy, Default)]
pub struct ModelInputs<'a> {
    pub rgb: Option<&'a Tensor>,
    pub lidar: Option<&'a Tensor>,
}

/// Which leaves of a forward graph want gradients.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct GradRequest {
    pub params: bool,
    pub rgb: bool,
    pub lidar: bool,
}

/// Handles into a recorded forward pass.
#[derive(Debug, Clone)]
pub struct ForwardGraph {
    pub pred: Var,
    pub params: Vec<Var>,
    pub rgb: Option<Var>,
    pub lidar: Option<Var>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Detector {
    pub config: DetectorConfig,
    pub params: ParamStore,
}

impl Detector {
    /// He-uniform weights (bound `sqrt(6 / fan_in)`), zero biases; each
    /// weight tensor draws from its own stream named after the parameter.
    pub fn init(config: DetectorConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut params = ParamStore::new();
        for layer in config.layers() {
            let name = format!("{}.weight", layer.name);
            let fan_in = (layer.in_channels * layer.kernel * layer.kernel) as f32;
            let is_head = layer.name == HEAD_LAYER;
            let bound = (6.0 / fan_in).sqrt() * if is_head { HEAD_INIT_SCALE } else { 1.0 };
            let mut rng = named_rng(seed, &name);
            let shape = layer.weight_shape();
            let data = (0..shape.iter().product::<usize>())
                .map(|_| rng.gen_range(-bound..bound))
                .collect();
            params.insert(name, Tensor::new(shape, data)?)?;
            let mut bias = Tensor::zeros(&[layer.out_channels]);
            if is_head {
                for (c, v) in HEAD_BIAS_PRIORS {
                    bias.data_mut()[c] = v;
                }
            }
            params.insert(format!("{}.bias", layer.name), bias)?;
        }
        Ok(Self { config, params })
    }

    /// All-zero parameters.
    pub fn zeros(config: DetectorConfig) -> Result<Self> {
        let mut d = Self::init(config, 0)?;
        for i in 0..d.params.len() {
            d.params.value_mut(i).data_mut().iter_mut().for_each(|v| *v = 0.0);
        }
        Ok(d)
    }

    /// Wraps loaded parameters, checking names and shapes against the config.
    pub fn from_params(config: DetectorConfig, params: ParamStore) -> Result<Self> {
        config.validate()?;
        let expected = Self::init(config.clone(), 0)?;
        let matches = params.len() == expected.params.len()
            && params
                .iter()
                .zip(expected.params.iter())
                .all(|(a, b)| a.name == b.name && a.value.shape() == b.value.shape());
        if !matches {
            return Err(Error::Checkpoint(format!(
                "parameters do not match a {} detector with this configuration",
                config.fusion.name()
            )));
        }
        Ok(Self { config, params })
    }

    fn check_inputs(&self, inputs: &ModelInputs) -> Result<()> {
        let (h, w) = (self.config.image_height, self.config.image_width);
        let mode = self.config.fusion.name();
        let check = |t: Option<&Tensor>, c: usize, name: &'static str| -> Result<()> {
            match t {
                None => Err(Error::MissingInput { mode, input: name }),
                Some(t) if t.shape() != [c, h, w] => Err(Error::shape(
                    "detector",
                    format!("{name} input {:?}, expected {:?}", t.shape(), [c, h, w]),
                )),
                Some(_) => Ok(()),
            }
        };
        if self.config.fusion.uses_rgb() {
            check(inputs.rgb, 3, "rgb")?;
        }
        if self.config.fusion.uses_lidar() {
            check(inputs.lidar, 2, "lidar")?;
        }
        Ok(())
    }

    /// Records the forward pass on `tape`.
    pub fn graph(&self, tape: &mut Tape, inputs: ModelInputs, want: GradRequest) -> Result<ForwardGraph> {
        self.check_inputs(&inputs)?;
        let fusion = self.config.fusion;
        let params = self.params.bind(tape, want.params);
        let rgb = fusion.uses_rgb().then(|| tape.leaf(inputs.rgb.unwrap().clone(), want.rgb));
        let lidar = fusion.uses_lidar().then(|| tape.leaf(inputs.lidar.unwrap().clone(), want.lidar));

        let layers = self.config.layers();
        let mut next = 0;
        let mut conv = |tape: &mut Tape, x: Var, leaky: bool| -> Result<Var> {
            let layer = &layers[next];
            let (w, b) = (params[2 * next], params[2 * next + 1]);
            next += 1;
            let y = tape.conv2d(x, w, Some(b), layer.stride)?;
            if leaky {
                tape.leaky_relu(y)
            } else {
                Ok(y)
            }
        };

        let features = match fusion {
            FusionMode::Late => {
                let mut r = rgb.unwrap();
                for _ in 0..3 {
                    r = conv(tape, r, true)?;
                }
                let mut l = lidar.unwrap();
                for _ in 0..3 {
                    l = conv(tape, l, true)?;
                }
                let cat = tape.concat_channels(&[r, l])?;
                conv(tape, cat, true)?
            }
            _ => {
                let mut x = match fusion {
                    FusionMode::Rgb => rgb.unwrap(),
                    FusionMode::Depth => lidar.unwrap(),
                    _ => tape.concat_channels(&[rgb.unwrap(), lidar.unwrap()])?,
                };
                for _ in 0..4 {
                    x = conv(tape, x, true)?;
                }
                x
            }
        };
        let pred = conv(tape, features, false)?;
        Ok(ForwardGraph {
            pred,
            params,
            rgb,
            lidar,
        })
    }

    /// Inference-only forward pass.
    pub fn forward(&self, inputs: ModelInputs) -> Result<RawPrediction> {
        let mut tape = Tape::new();
        let g = self.graph(&mut tape, inputs, GradRequest::default())?;
        Ok(RawPrediction {
            grid: tape.value(g.pred).clone(),
        })
    }
}

/// RGB intensities in [0, 255] → network input in [0, 1].
pub fn scale_rgb(rgb: &Tensor) -> Tensor {
    let data = rgb.data().iter().map(|v| v / 255.0).collect();
    Tensor::new(rgb.shape().to_vec(), data).expect("same shape")
}
