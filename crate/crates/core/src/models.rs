//! The illuminant-estimation (IE) and object-recognition (OR) networks.
//!
//! Both share one trunk: conv 3→16 (3×3, pad 1) + bias, relu, 2×2 average
//! pool, conv 16→32 + bias, relu, 2×2 average pool, global average pool and a
//! fully connected head. Inputs are planar `[3, H, W]` tensors with 0.5
//! subtracted; H and W must be multiples of 4.
//!
//! IE emits `z ∈ R³` and the illuminant `ρ = exp(z)`. Its head starts at zero,
//! so a fresh IE predicts the neutral illuminant for every image.

use std::fmt;
use std::str::FromStr;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{ParamSet, Tape, Tensor, Var};
use crate::colorops::{
    channel_normalize, compose, gamma_encode, global_normalize, illuminant_to_linear, ColorSpace, Illuminant, Image,
    MaskRect, DEFAULT_TARGET_MEAN,
};
use crate::dataio::{Checkpoint, CheckpointMeta};
use crate::error::{Error, Result};
use crate::rng;

pub const INPUT_OFFSET: f64 = 0.5;
pub const CONV1_CHANNELS: usize = 16;
pub const CONV2_CHANNELS: usize = 32;

const PARAM_NAMES: [&str; 6] = ["conv1.weight", "conv1.bias", "conv2.weight", "conv2.bias", "fc.weight", "fc.bias"];

fn trunk_shapes(out: usize) -> [Vec<usize>; 6] {
    [
        vec![CONV1_CHANNELS, 3, 3, 3],
        vec![CONV1_CHANNELS],
        vec![CONV2_CHANNELS, CONV1_CHANNELS, 3, 3],
        vec![CONV2_CHANNELS],
        vec![CONV2_CHANNELS, out],
        vec![out],
    ]
}

fn normal_tensor<R: Rng + ?Sized>(shape: &[usize], std: f64, rng: &mut R) -> Tensor {
    let mut t = Tensor::zeros(shape);
    for v in t.data_mut() {
        *v = std * rng::standard_normal(rng);
    }
    t
}

/// He-initialized convolutions with zero biases; the head is drawn with
/// `head_std` (zero means an all-zero head).
fn init_trunk(out: usize, head_std: f64, seed: u64, label: &str) -> ParamSet {
    let mut r = rng::stream(seed, label, 0);
    let shapes = trunk_shapes(out);
    let mut ps = ParamSet::new();
    ps.push(PARAM_NAMES[0], normal_tensor(&shapes[0], (2.0 / 27.0f64).sqrt(), &mut r));
    ps.push(PARAM_NAMES[1], Tensor::zeros(&shapes[1]));
    ps.push(PARAM_NAMES[2], normal_tensor(&shapes[2], (2.0 / (CONV1_CHANNELS * 9) as f64).sqrt(), &mut r));
    ps.push(PARAM_NAMES[3], Tensor::zeros(&shapes[3]));
    let head = if head_std > 0.0 {
        normal_tensor(&shapes[4], head_std, &mut r)
    } else {
        Tensor::zeros(&shapes[4])
    };
    ps.push(PARAM_NAMES[4], head);
    ps.push(PARAM_NAMES[5], Tensor::zeros(&shapes[5]));
    ps
}

fn check_layout(params: &ParamSet, out: usize, what: &str) -> Result<()> {
    let shapes = trunk_shapes(out);
    if params.len() != PARAM_NAMES.len() {
        return Err(Error::Checkpoint(format!("{what}: expected {} tensors, found {}", PARAM_NAMES.len(), params.len())));
    }
    for ((p, name), shape) in params.iter().zip(PARAM_NAMES).zip(&shapes) {
        if p.name != name || p.value.shape() != shape.as_slice() {
            return Err(Error::Checkpoint(format!(
                "{what}: expected {name} {shape:?}, found {} {:?}",
                p.name,
                p.value.shape()
            )));
        }
    }
    Ok(())
}

/// Head width stored in a checkpoint, read from the `fc.bias` length.
fn head_width(params: &ParamSet) -> Result<usize> {
    params
        .get("fc.bias")
        .map(|p| p.value.len())
        .ok_or_else(|| Error::Checkpoint("missing fc.bias".into()))
}

/// Runs the shared trunk on a planar `[3, H, W]` input in `[0, 1]` and
/// returns the head output as a `[1, out]` row.
fn trunk_forward(tape: &Tape, w: &[Var], input: Var) -> Result<Var> {
    let shape = tape.shape(input)?;
    if shape.len() != 3 || shape[0] != 3 {
        return Err(Error::shape("trunk", format!("expected a [3, H, W] input, got {shape:?}")));
    }
    if shape[1] % 4 != 0 || shape[2] % 4 != 0 || shape[1] == 0 || shape[2] == 0 {
        return Err(Error::shape("trunk", format!("spatial size {}×{} must be a positive multiple of 4", shape[1], shape[2])));
    }
    let x = tape.add_scalar(input, -INPUT_OFFSET)?;
    let x = tape.conv2d(x, w[0], 1, 1)?;
    let x = tape.add_channel_bias(x, w[1])?;
    let x = tape.avgpool2(tape.relu(x)?)?;
    let x = tape.conv2d(x, w[2], 1, 1)?;
    let x = tape.add_channel_bias(x, w[3])?;
    let x = tape.avgpool2(tape.relu(x)?)?;
    let x = tape.global_avg_pool(x)?;
    let x = tape.reshape(x, &[1, CONV2_CHANNELS])?;
    let x = tape.matmul(x, w[4])?;
    tape.add_row_bias(x, w[5])
}

/// Records an image on the tape as a constant planar `[3, H, W]` tensor.
pub fn image_input(tape: &Tape, img: &Image) -> Result<Var> {
    Ok(tape.constant(Tensor::new(vec![3, img.height(), img.width()], img.to_planar())?))
}

/// Reads a planar `[3, H, W]` tensor back into an image.
pub fn tensor_to_image(t: &Tensor, space: ColorSpace) -> Result<Image> {
    match t.shape() {
        [3, h, w] => Image::from_planar(*w, *h, t.data(), space),
        s => Err(Error::shape("tensor_to_image", format!("expected [3, H, W], got {s:?}"))),
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct IENet {
    pub params: ParamSet,
}

impl IENet {
    /// Random trunk and zero head, drawn from stream `(seed, "ie-init")`.
    pub fn new(seed: u64) -> Self {
        IENet {
            params: init_trunk(3, 0.0, seed, "ie-init"),
        }
    }

    pub fn from_params(params: ParamSet) -> Result<Self> {
        check_layout(&params, 3, "IE")?;
        Ok(IENet { params })
    }

    pub fn from_checkpoint(ckpt: &Checkpoint) -> Result<Self> {
        Self::from_params(ckpt.params.clone())
    }

    pub fn to_checkpoint(&self, meta: CheckpointMeta) -> Checkpoint {
        Checkpoint {
            meta,
            params: self.params.clone(),
        }
    }

    /// The raw illuminant for one image on a throwaway tape.
    pub fn predict(&self, img: &Image) -> Result<Illuminant> {
        let tape = Tape::new();
        let w = bind_constants(&tape, &self.params);
        let rho = ie_forward(&tape, &w, image_input(&tape, img)?)?;
        Illuminant::from_rgb(vec3(&tape.value(rho)?))
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ORNet {
    pub params: ParamSet,
}

impl ORNet {
    /// Random network for `n_classes`, drawn from stream `(seed, "or-init")`.
    /// The head uses Xavier-normal weights.
    pub fn new(n_classes: usize, seed: u64) -> Result<Self> {
        if n_classes < 2 {
            return Err(Error::invalid(format!("OR needs at least 2 classes, got {n_classes}")));
        }
        let std = (2.0 / (CONV2_CHANNELS + n_classes) as f64).sqrt();
        Ok(ORNet {
            params: init_trunk(n_classes, std, seed, "or-init"),
        })
    }

    pub fn n_classes(&self) -> usize {
        head_width(&self.params).expect("validated layout")
    }

    pub fn from_params(params: ParamSet) -> Result<Self> {
        let k = head_width(&params)?;
        if k < 2 {
            return Err(Error::Checkpoint(format!("OR head has {k} outputs")));
        }
        check_layout(&params, k, "OR")?;
        Ok(ORNet { params })
    }

    pub fn from_checkpoint(ckpt: &Checkpoint) -> Result<Self> {
        Self::from_params(ckpt.params.clone())
    }

    pub fn to_checkpoint(&self, meta: CheckpointMeta) -> Checkpoint {
        Checkpoint {
            meta,
            params: self.params.clone(),
        }
    }

    pub fn logits(&self, img: &Image) -> Result<Vec<f64>> {
        let tape = Tape::new();
        let w = bind_constants(&tape, &self.params);
        let logits = or_forward(&tape, &w, image_input(&tape, img)?)?;
        Ok(tape.value(logits)?.into_data())
    }

    /// Index of the largest logit (lowest index on ties).
    pub fn classify(&self, img: &Image) -> Result<usize> {
        Ok(argmax(&self.logits(img)?))
    }
}

pub fn argmax(v: &[f64]) -> usize {
    let mut best = 0;
    for (i, &x) in v.iter().enumerate() {
        if x > v[best] {
            best = i;
        }
    }
    best
}

fn vec3(t: &Tensor) -> [f64; 3] {
    let d = t.data();
    [d[0], d[1], d[2]]
}

/// Records every parameter as a tape constant.
pub fn bind_constants(tape: &Tape, params: &ParamSet) -> Vec<Var> {
    params.iter().map(|p| tape.constant(p.value.clone())).collect()
}

/// IE on tape: returns `ρ = exp(z)` with shape `[3]`.
pub fn ie_forward(tape: &Tape, ie: &[Var], input: Var) -> Result<Var> {
    let z = trunk_forward(tape, ie, input)?;
    tape.exp(tape.reshape(z, &[3])?)
}

/// OR on tape: returns logits with shape `[1, K]`.
pub fn or_forward(tape: &Tape, or_net: &[Var], input: Var) -> Result<Var> {
    trunk_forward(tape, or_net, input)
}

/// Output of [`ieor_forward`], all on the same tape.
#[derive(Clone, Copy, Debug)]
pub struct IeorOutput {
    pub rho: Var,
    pub corrected: Var,
    pub logits: Var,
}

/// IE, correction by `1/ρ`, clipping, then OR.
pub fn ieor_forward(tape: &Tape, ie: &[Var], or_net: &[Var], input: Var) -> Result<IeorOutput> {
    let z = tape.reshape(trunk_forward(tape, ie, input)?, &[3])?;
    let rho = tape.exp(z)?;
    let inv = tape.exp(tape.scalar_mul(z, -1.0)?)?;
    let corrected = tape.clip01(tape.channel_scale(input, inv)?)?;
    let logits = or_forward(tape, or_net, corrected)?;
    Ok(IeorOutput { rho, corrected, logits })
}

/// IE followed by a frozen OR.
#[derive(Clone, Debug, PartialEq)]
pub struct IEORPipeline {
    pub ie: IENet,
    pub or_net: ORNet,
    pub or_frozen: bool,
}

impl IEORPipeline {
    /// Builds a pipeline with OR frozen: its parameters are bound as
    /// constants on every tape and never receive gradients.
    pub fn new(ie: IENet, mut or_net: ORNet) -> Self {
        or_net.params.set_trainable(false);
        IEORPipeline {
            ie,
            or_net,
            or_frozen: true,
        }
    }

    /// Runs the full chain on one image and returns `(ρ, corrected, logits)`.
    pub fn forward(&self, img: &Image) -> Result<(Illuminant, Image, Vec<f64>)> {
        let tape = Tape::new();
        let ie = bind_constants(&tape, &self.ie.params);
        let or_net = bind_constants(&tape, &self.or_net.params);
        let out = ieor_forward(&tape, &ie, &or_net, image_input(&tape, img)?)?;
        let rho = Illuminant::from_rgb(vec3(&tape.value(out.rho)?))?;
        let corrected = tensor_to_image(&tape.value(out.corrected)?, img.space())?;
        Ok((rho, corrected, tape.value(out.logits)?.into_data()))
    }
}

/// Input normalization applied before IE at inference time.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NormMode {
    #[default]
    None,
    Global,
    Channel,
}

impl NormMode {
    pub fn as_str(&self) -> &'static str {
        match self {
            NormMode::None => "none",
            NormMode::Global => "global",
            NormMode::Channel => "channel",
        }
    }
}

impl fmt::Display for NormMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for NormMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "none" => Ok(NormMode::None),
            "global" => Ok(NormMode::Global),
            "channel" => Ok(NormMode::Channel),
            _ => Err(Error::invalid(format!("unknown normalization mode {s:?} (expected none, global or channel)"))),
        }
    }
}

/// Anything that maps a display-space image in `[0, 1]` to an illuminant.
pub trait Estimator {
    fn estimate(&self, img: &Image) -> Result<Illuminant>;
}

impl Estimator for IENet {
    fn estimate(&self, img: &Image) -> Result<Illuminant> {
        self.predict(img)
    }
}

impl<F: Fn(&Image) -> Result<Illuminant>> Estimator for F {
    fn estimate(&self, img: &Image) -> Result<Illuminant> {
        self(img)
    }
}

/// Full inference path: gamma-encode linear input, normalize with a support
/// illuminant, estimate, compose the support back and return to the input's
/// native space. The result is green-normalized.
///
/// `gamma` is required for linear images and rejected for encoded ones.
/// `mask` excludes pixels from the normalization statistics.
pub fn predict_illuminant<E: Estimator + ?Sized>(
    estimator: &E,
    img: &Image,
    norm: NormMode,
    gamma: Option<f64>,
    mask: Option<&MaskRect>,
) -> Result<Illuminant> {
    let encoded = match (img.space(), gamma) {
        (ColorSpace::Linear, Some(g)) => gamma_encode(img, g)?,
        (ColorSpace::Linear, None) => return Err(Error::invalid("linear images need a gamma for inference")),
        (ColorSpace::GammaEncoded, Some(_)) => {
            return Err(Error::invalid("image is already gamma encoded; refusing to encode twice"))
        }
        (ColorSpace::GammaEncoded, None) => img.clone(),
    };
    let (input, support) = match norm {
        NormMode::None => (encoded, Illuminant::NEUTRAL),
        NormMode::Global => {
            let (im, s) = global_normalize(&encoded, DEFAULT_TARGET_MEAN, mask)?;
            (im, Illuminant::new(1.0 / s, 1.0 / s, 1.0 / s)?)
        }
        NormMode::Channel => channel_normalize(&encoded, DEFAULT_TARGET_MEAN, mask)?,
    };
    let est = compose(&support, &estimator.estimate(&input)?);
    let native = match gamma {
        Some(g) => illuminant_to_linear(&est, g)?,
        None => est,
    };
    Ok(native.green_normalized())
}
