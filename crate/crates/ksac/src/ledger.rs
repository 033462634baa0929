//! Exact parameter accounting and analytic MAC counts.
//!
//! The head's 3×3 subtotal must reproduce the closed-form complexity:
//! `9·C_in·C_out` for the kernel-sharing head regardless of the number of
//! rates, versus `9·C_in·C_out·N` for the ASPP baseline with `N` branches.

use crate::error::{Error, Result};
use crate::heads::{AnyHead, Model};
use crate::ops::ConvSpec;
use crate::tensor::{Real, Shape};

/// One stored buffer of the model.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ParamEntry {
    pub name: String,
    pub shape: Shape,
    pub count: usize,
    pub trainable: bool,
}

/// Per-subsystem totals plus the formula prediction for cross-checking.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ParamReport {
    pub entries: Vec<ParamEntry>,
    /// 3×3 rate-branch kernels of the head.
    pub head_3x3: usize,
    /// The head's 1×1 kernels (direct branch, image pool, projection).
    pub head_1x1: usize,
    /// All batch-norm gammas and betas, model wide.
    pub bn_trainable: usize,
    /// Running statistics; buffers, not parameters.
    pub bn_buffers: usize,
    /// Backbone conv kernels.
    pub backbone: usize,
    /// Decoder conv kernels.
    pub decoder: usize,
    /// Classifier kernel and bias.
    pub classifier: usize,
    /// Closed-form prediction for `head_3x3`.
    pub formula_head_3x3: usize,
    /// `O(1)` for kernel sharing, `O(N)` for per-branch kernels.
    pub complexity: &'static str,
}

impl ParamReport {
    /// Sum over all trainable entries.
    pub fn trainable_total(&self) -> usize {
        self.entries
            .iter()
            .filter(|e| e.trainable)
            .map(|e| e.count)
            .sum()
    }

    /// Every stored value, trainable or buffer; equals the value count of a
    /// checkpoint of the same model.
    pub fn grand_total(&self) -> usize {
        self.entries.iter().map(|e| e.count).sum()
    }

    /// Head parameters excluding batch norm; the quantity that stays constant
    /// when the shared-kernel head gains rates.
    pub fn head_non_bn(&self) -> usize {
        self.head_3x3 + self.head_1x1
    }

    pub fn formula_ok(&self) -> bool {
        self.head_3x3 == self.formula_head_3x3
    }
}

fn is_head_3x3(name: &str) -> bool {
    name == "head.shared_kernel" || name.starts_with("head.kernel.r")
}

fn is_head_1x1(name: &str) -> bool {
    matches!(
        name,
        "head.conv1x1.kernel" | "head.image_pool.kernel" | "head.project.kernel"
    )
}

/// Enumerates every stored tensor of the model and cross-checks the head
/// subtotal against the complexity formula.
pub fn count_params(model: &Model) -> ParamReport {
    let mut entries = Vec::new();
    model.visit_params(&mut |name, shape, data, trainable| {
        entries.push(ParamEntry {
            name: name.to_string(),
            shape,
            count: data.len(),
            trainable,
        });
    });
    let mut report = ParamReport {
        entries,
        head_3x3: 0,
        head_1x1: 0,
        bn_trainable: 0,
        bn_buffers: 0,
        backbone: 0,
        decoder: 0,
        classifier: 0,
        formula_head_3x3: 9
            * model.cfg.c_in
            * model.cfg.c_out
            * match model.head {
                AnyHead::Ksac(_) => 1,
                AnyHead::Aspp(_) => model.cfg.rates.len(),
            },
        complexity: match model.head {
            AnyHead::Ksac(_) => "O(1)",
            AnyHead::Aspp(_) => "O(N)",
        },
    };
    for e in &report.entries.clone() {
        let n = &e.name;
        if n.ends_with(".running_mean") || n.ends_with(".running_var") {
            report.bn_buffers += e.count;
        } else if n.ends_with(".gamma") || n.ends_with(".beta") {
            report.bn_trainable += e.count;
        } else if is_head_3x3(n) {
            report.head_3x3 += e.count;
        } else if is_head_1x1(n) {
            report.head_1x1 += e.count;
        } else if n.starts_with("backbone.") {
            report.backbone += e.count;
        } else if n.starts_with("decoder.") {
            report.decoder += e.count;
        } else if n.starts_with("classifier.") {
            report.classifier += e.count;
        }
    }
    report
}

/// Convention for the `M` term: the count of "the other two 1×1 layers" read
/// as one shared value or as two layers' worth.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum MConvention {
    OneLayer,
    TwoLayers,
}

/// Fraction of 3×3-plus-M parameters saved by sharing one kernel across `n`
/// branches: `1 − (9·C_in·C_out + M)/(9·C_in·C_out·N + M)`.
pub fn savings_report(c_in: usize, c_out: usize, n: usize, convention: MConvention) -> Real {
    let cc = (c_in * c_out) as Real;
    let m = match convention {
        MConvention::OneLayer => cc,
        MConvention::TwoLayers => 2.0 * cc,
    };
    1.0 - (9.0 * cc + m) / (9.0 * cc * n as Real + m)
}

/// Multiply-accumulate count of one convolution layer.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LayerMacs {
    pub name: String,
    pub macs: u64,
}

/// Analytic MAC totals for a model applied to a given input shape.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct FlopsReport {
    pub layers: Vec<LayerMacs>,
    pub backbone: u64,
    /// Head convs whose output resolution follows the feature grid (rate
    /// branches, 1×1 branch, projection).
    pub head_spatial: u64,
    /// The image-level branch conv; a constant independent of output stride.
    pub head_image_pool: u64,
    pub decoder: u64,
    pub classifier: u64,
}

impl FlopsReport {
    pub fn head_total(&self) -> u64 {
        self.head_spatial + self.head_image_pool
    }

    pub fn total(&self) -> u64 {
        self.backbone + self.head_total() + self.decoder + self.classifier
    }
}

fn conv_macs(spec: &ConvSpec, n: usize, h: usize, w: usize) -> Result<(u64, usize, usize)> {
    let (oh, ow, _, _) = spec.out_dims(h, w)?;
    let macs = (n * spec.out_channels * oh * ow * spec.in_channels * spec.kernel.0 * spec.kernel.1)
        as u64;
    Ok((macs, oh, ow))
}

/// Walks the model's layer geometry with plain shape arithmetic; no tensors
/// are allocated.
pub fn flops_estimate(model: &Model, input_shape: Shape) -> Result<FlopsReport> {
    let [n, c, mut h, mut w] = input_shape;
    if c != 3 || n == 0 || h == 0 || w == 0 {
        return Err(Error::Config(format!(
            "flops_estimate: expected (N,3,H,W) input, got {input_shape:?}"
        )));
    }
    let mut layers = Vec::new();
    let report_push = |layers: &mut Vec<LayerMacs>, name: &str, macs: u64| {
        layers.push(LayerMacs {
            name: name.to_string(),
            macs,
        });
    };
    let mut backbone = 0;
    let mut tap_dims = (h, w);
    for (i, (conv, _)) in model.backbone.stages.iter().enumerate() {
        let (macs, oh, ow) = conv_macs(&conv.spec, n, h, w)?;
        report_push(&mut layers, &conv.name, macs);
        backbone += macs;
        h = oh;
        w = ow;
        if i == 1 {
            tap_dims = (h, w);
        }
    }
    let mut head_spatial = 0;
    let mut head_image_pool = 0;
    let (rates, k3, c1, ip, pr): (&[usize], ConvSpec, ConvSpec, ConvSpec, ConvSpec) =
        match &model.head {
            AnyHead::Ksac(hd) => (
                &hd.rates,
                hd.shared_kernel.spec,
                hd.conv1x1.spec,
                hd.image_pool.spec,
                hd.project.spec,
            ),
            AnyHead::Aspp(hd) => (
                &hd.rates,
                hd.per_rate_kernels[0].spec,
                hd.conv1x1.spec,
                hd.image_pool.spec,
                hd.project.spec,
            ),
        };
    for &r in rates {
        let (macs, _, _) = conv_macs(&k3.rate(r), n, h, w)?;
        report_push(&mut layers, &format!("head.rate{r}"), macs);
        head_spatial += macs;
    }
    let (macs, _, _) = conv_macs(&c1, n, h, w)?;
    report_push(&mut layers, "head.conv1x1", macs);
    head_spatial += macs;
    let (macs, _, _) = conv_macs(&ip, n, 1, 1)?;
    report_push(&mut layers, "head.image_pool", macs);
    head_image_pool += macs;
    let (macs, _, _) = conv_macs(&pr, n, h, w)?;
    report_push(&mut layers, "head.project", macs);
    head_spatial += macs;
    let mut decoder = 0;
    let (mut ch, mut cw) = (h, w);
    if let Some(dec) = &model.decoder {
        (ch, cw) = tap_dims;
        for conv in [&dec.reduce, &dec.refine1, &dec.refine2] {
            let (macs, _, _) = conv_macs(&conv.spec, n, ch, cw)?;
            report_push(&mut layers, &conv.name, macs);
            decoder += macs;
        }
    }
    let (classifier, _, _) = conv_macs(&model.classifier.spec, n, ch, cw)?;
    report_push(&mut layers, &model.classifier.name, classifier);
    Ok(FlopsReport {
        layers,
        backbone,
        head_spatial,
        head_image_pool,
        decoder,
        classifier,
    })
}
