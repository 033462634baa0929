//! Segmentation heads and toy models.
//!
//! The kernel-sharing head keeps exactly one 3×3 kernel and applies it at
//! every atrous rate, each branch followed by its own batch normalization,
//! with the branch outputs summed after ReLU. The ASPP baseline is the same
//! topology with an independent kernel per rate and channel concatenation of
//! the branch outputs. Both heads add a 1×1 branch and an image-level pooling
//! branch, and fuse everything through a 1×1 projection.
//!
//! Model parameters live in plain buffers owned by the layer structs; every
//! forward pass binds them onto a fresh tape (recording name → tensor id in a
//! [`Binding`]) so gradients can be read back by name after `backward`.

use std::collections::HashSet;
use std::path::Path;

use crate::checkpoint::{self, TensorEntry};
use crate::error::{Error, Result};
use crate::ops::{
    batch_norm, bilinear_upsample, conv2d, global_avg_pool, relu, BatchNormState, BnMode, ConvSpec,
};
use crate::tensor::{fill_data, Fill, Real, Shape, Tape, TensorId};

/// Name → tape tensor mapping for one forward pass.
#[derive(Default)]
pub struct Binding {
    ids: Vec<(String, TensorId)>,
}

impl Binding {
    fn bind(&mut self, tape: &mut Tape, name: &str, shape: Shape, data: &[Real]) -> TensorId {
        let id = tape.leaf(shape, data.to_vec(), true);
        self.ids.push((name.to_string(), id));
        id
    }

    pub fn id(&self, name: &str) -> Option<TensorId> {
        self.ids
            .iter()
            .find(|(n, _)| n == name)
            .map(|&(_, id)| id)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, TensorId)> {
        self.ids.iter().map(|(n, id)| (n.as_str(), *id))
    }
}

/// One named convolution kernel (plus optional bias) with its geometry.
#[derive(Debug, Clone)]
pub struct ConvLayer {
    pub name: String,
    pub spec: ConvSpec,
    pub weight: Vec<Real>,
    pub bias: Option<Vec<Real>>,
}

impl ConvLayer {
    fn new(name: &str, spec: ConvSpec, with_bias: bool, seed: &mut u64) -> Self {
        let shape = Self::weight_shape(&spec);
        let weight = fill_data(shape, Fill::HeNormal { seed: *seed }).expect("valid shape");
        *seed += 1;
        Self {
            name: name.to_string(),
            spec,
            weight,
            bias: with_bias.then(|| vec![0.0; spec.out_channels]),
        }
    }

    fn weight_shape(spec: &ConvSpec) -> Shape {
        [
            spec.out_channels,
            spec.in_channels,
            spec.kernel.0,
            spec.kernel.1,
        ]
    }

    fn bind(&self, tape: &mut Tape, bind: &mut Binding) -> (TensorId, Option<TensorId>) {
        let w = bind.bind(
            tape,
            &self.name,
            Self::weight_shape(&self.spec),
            &self.weight,
        );
        let b = self.bias.as_ref().map(|bv| {
            bind.bind(
                tape,
                &format!("{}.bias", self.name),
                [1, self.spec.out_channels, 1, 1],
                bv,
            )
        });
        (w, b)
    }

    fn forward(&self, tape: &mut Tape, x: TensorId, bind: &mut Binding) -> Result<TensorId> {
        let (w, b) = self.bind(tape, bind);
        conv2d(tape, x, w, b, self.spec)
    }
}

/// Per-channel batch-norm layer: trainable gamma/beta plus running buffers.
#[derive(Debug, Clone)]
pub struct BnLayer {
    pub name: String,
    pub gamma: Vec<Real>,
    pub beta: Vec<Real>,
    pub state: BatchNormState,
}

impl BnLayer {
    fn new(name: &str, channels: usize) -> Self {
        Self {
            name: name.to_string(),
            gamma: vec![1.0; channels],
            beta: vec![0.0; channels],
            state: BatchNormState::new(channels),
        }
    }

    fn forward(
        &mut self,
        tape: &mut Tape,
        x: TensorId,
        bind: &mut Binding,
        mode: BnMode,
    ) -> Result<TensorId> {
        let c = self.gamma.len();
        let g = bind.bind(tape, &format!("{}.gamma", self.name), [1, c, 1, 1], &self.gamma);
        let b = bind.bind(tape, &format!("{}.beta", self.name), [1, c, 1, 1], &self.beta);
        batch_norm(tape, x, g, b, &mut self.state, mode)
    }
}

fn conv_bn_relu(
    tape: &mut Tape,
    x: TensorId,
    conv: &ConvLayer,
    bn: &mut BnLayer,
    bind: &mut Binding,
    mode: BnMode,
) -> Result<TensorId> {
    let y = conv.forward(tape, x, bind)?;
    let y = bn.forward(tape, y, bind, mode)?;
    Ok(relu(tape, y))
}

fn check_rates(rates: &[usize]) -> Result<()> {
    if rates.is_empty() {
        return Err(Error::Config("rate list must not be empty".into()));
    }
    let mut seen = HashSet::new();
    for &r in rates {
        if r == 0 {
            return Err(Error::Config("atrous rates must be positive".into()));
        }
        if !seen.insert(r) {
            return Err(Error::Config(format!("atrous rate {r} repeated")));
        }
    }
    Ok(())
}

/// Kernel-sharing head: one 3×3 kernel for all rates.
#[derive(Debug, Clone)]
pub struct KsacHead {
    pub rates: Vec<usize>,
    pub c_in: usize,
    pub c_out: usize,
    pub shared_kernel: ConvLayer,
    pub bn_per_rate: Vec<BnLayer>,
    pub conv1x1: ConvLayer,
    pub conv1x1_bn: BnLayer,
    pub image_pool: ConvLayer,
    pub image_pool_bn: BnLayer,
    pub project: ConvLayer,
    pub project_bn: BnLayer,
}

impl KsacHead {
    pub fn new(c_in: usize, c_out: usize, rates: &[usize], seed: &mut u64) -> Result<Self> {
        check_rates(rates)?;
        // Fused channels: 1×1 branch + image-level branch + pyramid sum.
        let fused = 3 * c_out;
        Ok(Self {
            rates: rates.to_vec(),
            c_in,
            c_out,
            shared_kernel: ConvLayer::new("head.shared_kernel", ConvSpec::new(c_in, c_out, 3), false, seed),
            bn_per_rate: rates
                .iter()
                .map(|r| BnLayer::new(&format!("head.bn.r{r}"), c_out))
                .collect(),
            conv1x1: ConvLayer::new("head.conv1x1.kernel", ConvSpec::new(c_in, c_out, 1), false, seed),
            conv1x1_bn: BnLayer::new("head.conv1x1.bn", c_out),
            image_pool: ConvLayer::new("head.image_pool.kernel", ConvSpec::new(c_in, c_out, 1), false, seed),
            image_pool_bn: BnLayer::new("head.image_pool.bn", c_out),
            project: ConvLayer::new("head.project.kernel", ConvSpec::new(fused, c_out, 1), false, seed),
            project_bn: BnLayer::new("head.project.bn", c_out),
        })
    }
}

/// ASPP baseline head: an independent 3×3 kernel per rate.
#[derive(Debug, Clone)]
pub struct AsppHead {
    pub rates: Vec<usize>,
    pub c_in: usize,
    pub c_out: usize,
    pub per_rate_kernels: Vec<ConvLayer>,
    pub bn_per_rate: Vec<BnLayer>,
    pub conv1x1: ConvLayer,
    pub conv1x1_bn: BnLayer,
    pub image_pool: ConvLayer,
    pub image_pool_bn: BnLayer,
    pub project: ConvLayer,
    pub project_bn: BnLayer,
}

impl AsppHead {
    pub fn new(c_in: usize, c_out: usize, rates: &[usize], seed: &mut u64) -> Result<Self> {
        check_rates(rates)?;
        // 1×1 branch + image-level branch + |R| concatenated rate branches.
        let fused = (2 + rates.len()) * c_out;
        Ok(Self {
            rates: rates.to_vec(),
            c_in,
            c_out,
            per_rate_kernels: rates
                .iter()
                .map(|r| {
                    ConvLayer::new(
                        &format!("head.kernel.r{r}"),
                        ConvSpec::new(c_in, c_out, 3),
                        false,
                        seed,
                    )
                })
                .collect(),
            bn_per_rate: rates
                .iter()
                .map(|r| BnLayer::new(&format!("head.bn.r{r}"), c_out))
                .collect(),
            conv1x1: ConvLayer::new("head.conv1x1.kernel", ConvSpec::new(c_in, c_out, 1), false, seed),
            conv1x1_bn: BnLayer::new("head.conv1x1.bn", c_out),
            image_pool: ConvLayer::new("head.image_pool.kernel", ConvSpec::new(c_in, c_out, 1), false, seed),
            image_pool_bn: BnLayer::new("head.image_pool.bn", c_out),
            project: ConvLayer::new("head.project.kernel", ConvSpec::new(fused, c_out, 1), false, seed),
            project_bn: BnLayer::new("head.project.bn", c_out),
        })
    }
}

/// The summed shared-kernel pyramid: `Σ_r ReLU(BN_r(conv(T, K, rate=r)))`.
///
/// The kernel is bound to the tape exactly once, so its gradient accumulates
/// over all rate branches.
pub fn ksac_pyramid(
    tape: &mut Tape,
    x: TensorId,
    head: &mut KsacHead,
    bind: &mut Binding,
    mode: BnMode,
) -> Result<TensorId> {
    check_rates(&head.rates)?;
    let (w, _) = head.shared_kernel.bind(tape, bind);
    let mut acc: Option<TensorId> = None;
    for (i, &r) in head.rates.clone().iter().enumerate() {
        let spec = head.shared_kernel.spec.rate(r);
        let y = conv2d(tape, x, w, None, spec)?;
        let y = head.bn_per_rate[i].forward(tape, y, bind, mode)?;
        let y = relu(tape, y);
        acc = Some(match acc {
            None => y,
            Some(a) => tape.add(a, y)?,
        });
    }
    Ok(acc.expect("rate list checked non-empty"))
}

/// Concatenated per-kernel pyramid of the ASPP baseline.
pub fn aspp_pyramid(
    tape: &mut Tape,
    x: TensorId,
    head: &mut AsppHead,
    bind: &mut Binding,
    mode: BnMode,
) -> Result<TensorId> {
    check_rates(&head.rates)?;
    let rates = head.rates.clone();
    let mut branches = Vec::with_capacity(rates.len());
    for (i, &r) in rates.iter().enumerate() {
        let conv = head.per_rate_kernels[i].clone();
        let spec = conv.spec.rate(r);
        let (w, _) = conv.bind(tape, bind);
        let y = conv2d(tape, x, w, None, spec)?;
        let y = head.bn_per_rate[i].forward(tape, y, bind, mode)?;
        branches.push(relu(tape, y));
    }
    tape.concat_channels(&branches)
}

fn fuse_branches(
    tape: &mut Tape,
    x: TensorId,
    pyramid: TensorId,
    conv1x1: &ConvLayer,
    conv1x1_bn: &mut BnLayer,
    image_pool: &ConvLayer,
    image_pool_bn: &mut BnLayer,
    project: &ConvLayer,
    project_bn: &mut BnLayer,
    bind: &mut Binding,
    mode: BnMode,
) -> Result<TensorId> {
    let [_, _, h, w] = tape.shape(x);
    let a = conv_bn_relu(tape, x, conv1x1, conv1x1_bn, bind, mode)?;
    let pooled = global_avg_pool(tape, x);
    let b = conv_bn_relu(tape, pooled, image_pool, image_pool_bn, bind, mode)?;
    let b = bilinear_upsample(tape, b, h, w)?;
    let fused = tape.concat_channels(&[a, b, pyramid])?;
    conv_bn_relu(tape, fused, project, project_bn, bind, mode)
}

/// Full kernel-sharing head: 1×1 branch, image-level branch and the shared
/// pyramid, fused by concatenation and a 1×1 projection.
pub fn ksac_head_forward(
    tape: &mut Tape,
    x: TensorId,
    head: &mut KsacHead,
    bind: &mut Binding,
    mode: BnMode,
) -> Result<TensorId> {
    let pyramid = ksac_pyramid(tape, x, head, bind, mode)?;
    let conv1x1 = head.conv1x1.clone();
    let image_pool = head.image_pool.clone();
    let project = head.project.clone();
    fuse_branches(
        tape,
        x,
        pyramid,
        &conv1x1,
        &mut head.conv1x1_bn,
        &image_pool,
        &mut head.image_pool_bn,
        &project,
        &mut head.project_bn,
        bind,
        mode,
    )
}

/// ASPP baseline head with identical topology except the pyramid
/// concatenates per-kernel branch outputs.
pub fn aspp_head_forward(
    tape: &mut Tape,
    x: TensorId,
    head: &mut AsppHead,
    bind: &mut Binding,
    mode: BnMode,
) -> Result<TensorId> {
    let pyramid = aspp_pyramid(tape, x, head, bind, mode)?;
    let conv1x1 = head.conv1x1.clone();
    let image_pool = head.image_pool.clone();
    let project = head.project.clone();
    fuse_branches(
        tape,
        x,
        pyramid,
        &conv1x1,
        &mut head.conv1x1_bn,
        &image_pool,
        &mut head.image_pool_bn,
        &project,
        &mut head.project_bn,
        bind,
        mode,
    )
}

/// Fixed 4-stage conv+BN+ReLU encoder realizing output stride 8 or 16, with
/// a tap at OS=4 for the decoder.
#[derive(Debug, Clone)]
pub struct ToyBackbone {
    pub stages: Vec<(ConvLayer, BnLayer)>,
    pub os: usize,
    pub tap_channels: usize,
}

impl ToyBackbone {
    pub fn new(c_final: usize, os: usize, seed: &mut u64) -> Result<Self> {
        if os != 8 && os != 16 {
            return Err(Error::Config(format!("output stride must be 8 or 16, got {os}")));
        }
        let channels = [3usize, 16, 32, 64, c_final];
        // OS=8 trades the last stride for a rate-2 dilation.
        let strides = if os == 16 { [2, 2, 2, 2] } else { [2, 2, 2, 1] };
        let rates = if os == 16 { [1, 1, 1, 1] } else { [1, 1, 1, 2] };
        let stages = (0..4)
            .map(|i| {
                let spec = ConvSpec::new(channels[i], channels[i + 1], 3)
                    .stride(strides[i])
                    .rate(rates[i]);
                (
                    ConvLayer::new(&format!("backbone.stage{i}.conv"), spec, false, seed),
                    BnLayer::new(&format!("backbone.stage{i}.bn"), channels[i + 1]),
                )
            })
            .collect();
        Ok(Self {
            stages,
            os,
            tap_channels: channels[2],
        })
    }

    /// Returns the final feature map and the OS=4 tap.
    pub fn forward(
        &mut self,
        tape: &mut Tape,
        x: TensorId,
        bind: &mut Binding,
        mode: BnMode,
    ) -> Result<(TensorId, TensorId)> {
        let mut cur = x;
        let mut tap = x;
        for (i, (conv, bn)) in self.stages.iter_mut().enumerate() {
            let c = conv.clone();
            cur = conv_bn_relu(tape, cur, &c, bn, bind, mode)?;
            if i == 1 {
                tap = cur;
            }
        }
        Ok((cur, tap))
    }
}

/// Optional decoder: fuse the upsampled head output with reduced OS=4
/// features and refine with two 3×3 convolutions.
#[derive(Debug, Clone)]
pub struct Decoder {
    pub reduce: ConvLayer,
    pub reduce_bn: BnLayer,
    pub refine1: ConvLayer,
    pub refine1_bn: BnLayer,
    pub refine2: ConvLayer,
    pub refine2_bn: BnLayer,
}

pub const DECODER_REDUCE_CHANNELS: usize = 48;

impl Decoder {
    pub fn new(tap_channels: usize, c_out: usize, seed: &mut u64) -> Self {
        let red = DECODER_REDUCE_CHANNELS;
        Self {
            reduce: ConvLayer::new("decoder.reduce.kernel", ConvSpec::new(tap_channels, red, 1), false, seed),
            reduce_bn: BnLayer::new("decoder.reduce.bn", red),
            refine1: ConvLayer::new("decoder.refine1.kernel", ConvSpec::new(c_out + red, c_out, 3), false, seed),
            refine1_bn: BnLayer::new("decoder.refine1.bn", c_out),
            refine2: ConvLayer::new("decoder.refine2.kernel", ConvSpec::new(c_out, c_out, 3), false, seed),
            refine2_bn: BnLayer::new("decoder.refine2.bn", c_out),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum HeadKind {
    Ksac,
    Aspp,
}

impl std::fmt::Display for HeadKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            HeadKind::Ksac => "ksac",
            HeadKind::Aspp => "aspp",
        })
    }
}

impl std::str::FromStr for HeadKind {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "ksac" => Ok(HeadKind::Ksac),
            "aspp" => Ok(HeadKind::Aspp),
            other => Err(Error::Config(format!("unknown head kind '{other}'"))),
        }
    }
}

#[derive(Debug, Clone)]
pub enum AnyHead {
    Ksac(KsacHead),
    Aspp(AsppHead),
}

/// Model construction parameters.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ModelConfig {
    pub head: HeadKind,
    pub rates: Vec<usize>,
    /// Backbone output channels = head input channels.
    pub c_in: usize,
    /// Head output channels.
    pub c_out: usize,
    pub os: usize,
    pub decoder: bool,
    pub num_classes: usize,
    pub seed: u64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            head: HeadKind::Ksac,
            rates: vec![6, 12, 18],
            c_in: 256,
            c_out: 256,
            os: 16,
            decoder: false,
            num_classes: 21,
            seed: 0,
        }
    }
}

/// Backbone → head → optional decoder → classifier → upsample to input size.
#[derive(Debug, Clone)]
pub struct Model {
    pub cfg: ModelConfig,
    pub backbone: ToyBackbone,
    pub head: AnyHead,
    pub decoder: Option<Decoder>,
    pub classifier: ConvLayer,
}

pub fn build_model(cfg: ModelConfig) -> Result<Model> {
    if cfg.num_classes < 2 {
        return Err(Error::Config(format!(
            "need at least 2 classes, got {}",
            cfg.num_classes
        )));
    }
    check_rates(&cfg.rates)?;
    let mut seed = cfg.seed.wrapping_mul(0x9e3779b97f4a7c15).wrapping_add(1);
    let backbone = ToyBackbone::new(cfg.c_in, cfg.os, &mut seed)?;
    let head = match cfg.head {
        HeadKind::Ksac => AnyHead::Ksac(KsacHead::new(cfg.c_in, cfg.c_out, &cfg.rates, &mut seed)?),
        HeadKind::Aspp => AnyHead::Aspp(AsppHead::new(cfg.c_in, cfg.c_out, &cfg.rates, &mut seed)?),
    };
    let decoder = cfg
        .decoder
        .then(|| Decoder::new(backbone.tap_channels, cfg.c_out, &mut seed));
    // Classifier is not followed by BN, so it carries a bias.
    let classifier = ConvLayer::new(
        "classifier.kernel",
        ConvSpec::new(cfg.c_out, cfg.num_classes, 1),
        true,
        &mut seed,
    );
    Ok(Model {
        cfg,
        backbone,
        head,
        decoder,
        classifier,
    })
}

impl Model {
    /// Forward pass producing per-pixel class logits at the input resolution.
    pub fn forward(
        &mut self,
        tape: &mut Tape,
        x: TensorId,
        mode: BnMode,
    ) -> Result<(TensorId, Binding)> {
        let mut bind = Binding::default();
        let [_, _, in_h, in_w] = tape.shape(x);
        let (features, tap) = self.backbone.forward(tape, x, &mut bind, mode)?;
        let mut out = match &mut self.head {
            AnyHead::Ksac(h) => ksac_head_forward(tape, features, h, &mut bind, mode)?,
            AnyHead::Aspp(h) => aspp_head_forward(tape, features, h, &mut bind, mode)?,
        };
        if let Some(dec) = &mut self.decoder {
            let [_, _, th, tw] = tape.shape(tap);
            out = bilinear_upsample(tape, out, th, tw)?;
            let reduce = dec.reduce.clone();
            let reduced = conv_bn_relu(tape, tap, &reduce, &mut dec.reduce_bn, &mut bind, mode)?;
            out = tape.concat_channels(&[out, reduced])?;
            let r1 = dec.refine1.clone();
            out = conv_bn_relu(tape, out, &r1, &mut dec.refine1_bn, &mut bind, mode)?;
            let r2 = dec.refine2.clone();
            out = conv_bn_relu(tape, out, &r2, &mut dec.refine2_bn, &mut bind, mode)?;
        }
        let logits = self.classifier.forward(tape, out, &mut bind)?;
        let logits = bilinear_upsample(tape, logits, in_h, in_w)?;
        Ok((logits, bind))
    }

    /// Per-rate pre-fusion branch activations `ReLU(BN_r(conv_r(features)))`
    /// in eval mode, for feature-map inspection. Returns `(rate, tensor)`
    /// pairs in rate-list order.
    pub fn branch_activations(
        &mut self,
        tape: &mut Tape,
        x: TensorId,
    ) -> Result<Vec<(usize, TensorId)>> {
        let mut bind = Binding::default();
        let mode = BnMode::Eval;
        let (features, _) = self.backbone.forward(tape, x, &mut bind, mode)?;
        let mut out = Vec::new();
        match &mut self.head {
            AnyHead::Ksac(h) => {
                let (w, _) = h.shared_kernel.bind(tape, &mut bind);
                for (i, &r) in h.rates.clone().iter().enumerate() {
                    let spec = h.shared_kernel.spec.rate(r);
                    let y = conv2d(tape, features, w, None, spec)?;
                    let y = h.bn_per_rate[i].forward(tape, y, &mut bind, mode)?;
                    out.push((r, relu(tape, y)));
                }
            }
            AnyHead::Aspp(h) => {
                for (i, &r) in h.rates.clone().iter().enumerate() {
                    let conv = h.per_rate_kernels[i].clone();
                    let spec = conv.spec.rate(r);
                    let (w, _) = conv.bind(tape, &mut bind);
                    let y = conv2d(tape, features, w, None, spec)?;
                    let y = h.bn_per_rate[i].forward(tape, y, &mut bind, mode)?;
                    out.push((r, relu(tape, y)));
                }
            }
        }
        Ok(out)
    }

    /// Visits every stored buffer in a stable order: `(name, shape, values,
    /// trainable)`. BN running statistics appear as non-trainable buffers.
    pub fn visit_params(&self, f: &mut dyn FnMut(&str, Shape, &[Real], bool)) {
        let conv = |f: &mut dyn FnMut(&str, Shape, &[Real], bool), c: &ConvLayer| {
            f(&c.name, ConvLayer::weight_shape(&c.spec), &c.weight, true);
            if let Some(b) = &c.bias {
                f(
                    &format!("{}.bias", c.name),
                    [1, c.spec.out_channels, 1, 1],
                    b,
                    true,
                );
            }
        };
        let bn = |f: &mut dyn FnMut(&str, Shape, &[Real], bool), l: &BnLayer| {
            let c = l.gamma.len();
            let s = [1, c, 1, 1];
            f(&format!("{}.gamma", l.name), s, &l.gamma, true);
            f(&format!("{}.beta", l.name), s, &l.beta, true);
            f(&format!("{}.running_mean", l.name), s, &l.state.running_mean, false);
            f(&format!("{}.running_var", l.name), s, &l.state.running_var, false);
        };
        for (c, b) in &self.backbone.stages {
            conv(f, c);
            bn(f, b);
        }
        match &self.head {
            AnyHead::Ksac(h) => {
                conv(f, &h.shared_kernel);
                for b in &h.bn_per_rate {
                    bn(f, b);
                }
                conv(f, &h.conv1x1);
                bn(f, &h.conv1x1_bn);
                conv(f, &h.image_pool);
                bn(f, &h.image_pool_bn);
                conv(f, &h.project);
                bn(f, &h.project_bn);
            }
            AnyHead::Aspp(h) => {
                for c in &h.per_rate_kernels {
                    conv(f, c);
                }
                for b in &h.bn_per_rate {
                    bn(f, b);
                }
                conv(f, &h.conv1x1);
                bn(f, &h.conv1x1_bn);
                conv(f, &h.image_pool);
                bn(f, &h.image_pool_bn);
                conv(f, &h.project);
                bn(f, &h.project_bn);
            }
        }
        if let Some(d) = &self.decoder {
            conv(f, &d.reduce);
            bn(f, &d.reduce_bn);
            conv(f, &d.refine1);
            bn(f, &d.refine1_bn);
            conv(f, &d.refine2);
            bn(f, &d.refine2_bn);
        }
        conv(f, &self.classifier);
    }

    /// Visits every trainable buffer mutably, in the same order as
    /// [`Model::visit_params`].
    pub fn visit_trainable_mut(&mut self, f: &mut dyn FnMut(&str, &mut [Real])) {
        let conv = |f: &mut dyn FnMut(&str, &mut [Real]), c: &mut ConvLayer| {
            f(&c.name.clone(), &mut c.weight);
            let name = format!("{}.bias", c.name);
            if let Some(b) = &mut c.bias {
                f(&name, b);
            }
        };
        let bn = |f: &mut dyn FnMut(&str, &mut [Real]), l: &mut BnLayer| {
            f(&format!("{}.gamma", l.name), &mut l.gamma);
            f(&format!("{}.beta", l.name), &mut l.beta);
        };
        for (c, b) in &mut self.backbone.stages {
            conv(f, c);
            bn(f, b);
        }
        match &mut self.head {
            AnyHead::Ksac(h) => {
                conv(f, &mut h.shared_kernel);
                for b in &mut h.bn_per_rate {
                    bn(f, b);
                }
                conv(f, &mut h.conv1x1);
                bn(f, &mut h.conv1x1_bn);
                conv(f, &mut h.image_pool);
                bn(f, &mut h.image_pool_bn);
                conv(f, &mut h.project);
                bn(f, &mut h.project_bn);
            }
            AnyHead::Aspp(h) => {
                for c in &mut h.per_rate_kernels {
                    conv(f, c);
                }
                for b in &mut h.bn_per_rate {
                    bn(f, b);
                }
                conv(f, &mut h.conv1x1);
                bn(f, &mut h.conv1x1_bn);
                conv(f, &mut h.image_pool);
                bn(f, &mut h.image_pool_bn);
                conv(f, &mut h.project);
                bn(f, &mut h.project_bn);
            }
        }
        if let Some(d) = &mut self.decoder {
            conv(f, &mut d.reduce);
            bn(f, &mut d.reduce_bn);
            conv(f, &mut d.refine1);
            bn(f, &mut d.refine1_bn);
            conv(f, &mut d.refine2);
            bn(f, &mut d.refine2_bn);
        }
        conv(f, &mut self.classifier);
    }

    /// All stored buffers as checkpoint entries.
    pub fn to_entries(&self) -> Vec<TensorEntry> {
        let mut entries = Vec::new();
        self.visit_params(&mut |name, shape, data, _| {
            entries.push(TensorEntry {
                name: name.to_string(),
                shape,
                data: data.to_vec(),
            });
        });
        entries
    }

    /// Restores all buffers from checkpoint entries; every stored buffer must
    /// be present with a matching shape.
    pub fn load_entries(&mut self, entries: &[TensorEntry]) -> Result<()> {
        let mut missing = Vec::new();
        // running stats are restored via a second visit over BN layers
        let lookup = |name: &str| entries.iter().find(|e| e.name == name);
        let mut shapes = Vec::new();
        self.visit_params(&mut |name, shape, _, _| shapes.push((name.to_string(), shape)));
        for (name, shape) in &shapes {
            match lookup(name) {
                Some(e) if e.shape == *shape => {}
                Some(e) => {
                    return Err(Error::Checkpoint(format!(
                        "tensor '{name}': shape {:?} in file, model expects {shape:?}",
                        e.shape
                    )))
                }
                None => missing.push(name.clone()),
            }
        }
        if !missing.is_empty() {
            return Err(Error::Checkpoint(format!(
                "checkpoint is missing tensors: {missing:?}"
            )));
        }
        self.visit_trainable_mut(&mut |name, buf| {
            if let Some(e) = entries.iter().find(|e| e.name == name) {
                buf.copy_from_slice(&e.data);
            }
        });
        self.visit_bn_mut(&mut |name, state| {
            if let Some(e) = entries.iter().find(|e| e.name == format!("{name}.running_mean")) {
                state.running_mean.copy_from_slice(&e.data);
            }
            if let Some(e) = entries.iter().find(|e| e.name == format!("{name}.running_var")) {
                state.running_var.copy_from_slice(&e.data);
            }
        });
        Ok(())
    }

    fn visit_bn_mut(&mut self, f: &mut dyn FnMut(&str, &mut BatchNormState)) {
        for (_, b) in &mut self.backbone.stages {
            f(&b.name.clone(), &mut b.state);
        }
        match &mut self.head {
            AnyHead::Ksac(h) => {
                for b in &mut h.bn_per_rate {
                    f(&b.name.clone(), &mut b.state);
                }
                f(&h.conv1x1_bn.name.clone(), &mut h.conv1x1_bn.state);
                f(&h.image_pool_bn.name.clone(), &mut h.image_pool_bn.state);
                f(&h.project_bn.name.clone(), &mut h.project_bn.state);
            }
            AnyHead::Aspp(h) => {
                for b in &mut h.bn_per_rate {
                    f(&b.name.clone(), &mut b.state);
                }
                f(&h.conv1x1_bn.name.clone(), &mut h.conv1x1_bn.state);
                f(&h.image_pool_bn.name.clone(), &mut h.image_pool_bn.state);
                f(&h.project_bn.name.clone(), &mut h.project_bn.state);
            }
        }
        if let Some(d) = &mut self.decoder {
            f(&d.reduce_bn.name.clone(), &mut d.reduce_bn.state);
            f(&d.refine1_bn.name.clone(), &mut d.refine1_bn.state);
            f(&d.refine2_bn.name.clone(), &mut d.refine2_bn.state);
        }
    }

    /// Writes the tensor container plus a text manifest next to it.
    pub fn save(&self, path: &Path) -> Result<()> {
        checkpoint::save(path, &self.to_entries())?;
        let manifest = format!(
            "head = {}\nrates = {}\nos = {}\ndecoder = {}\nclasses = {}\nc_in = {}\nc_out = {}\n",
            self.cfg.head,
            self.cfg
                .rates
                .iter()
                .map(|r| r.to_string())
                .collect::<Vec<_>>()
                .join(","),
            self.cfg.os,
            self.cfg.decoder,
            self.cfg.num_classes,
            self.cfg.c_in,
            self.cfg.c_out,
        );
        let mpath = path.with_extension("manifest");
        std::fs::write(&mpath, manifest).map_err(|e| Error::Io {
            path: mpath,
            source: e,
        })
    }

    pub fn load(&mut self, path: &Path) -> Result<()> {
        let entries = checkpoint::load(path)?;
        self.load_entries(&entries)
    }
}
