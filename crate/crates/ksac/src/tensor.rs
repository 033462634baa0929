//! Dense rank-4 tensors on a reverse-mode autodiff tape.
//!
//! Every value is a `(N, C, H, W)` array of [`Real`] stored row-major. Tensors
//! live on a [`Tape`]; operations record a backward rule so that
//! [`Tape::backward`] can populate gradients in exact reverse recording order.
//! Gradients accumulate additively across multiple uses of the same tensor,
//! which is what makes a kernel shared by several branches receive the sum of
//! all branch gradients.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};

/// Scalar type used throughout. 64-bit by default; the `f32` feature switches
/// the whole library to single precision (gradient checks need f64 headroom,
/// so tests assume the default).
#[cfg(not(feature = "f32"))]
pub type Real = f64;
#[cfg(feature = "f32")]
pub type Real = f32;

/// `(N, C, H, W)` shape.
pub type Shape = [usize; 4];

pub fn numel(shape: Shape) -> usize {
    shape.iter().product()
}

fn checked_numel(shape: Shape) -> Result<usize> {
    shape
        .iter()
        .try_fold(1usize, |acc, &d| acc.checked_mul(d))
        .ok_or(Error::Allocation(shape.map(|d| d as u64)))
}

/// Handle to a tensor recorded on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct TensorId(pub(crate) usize);

/// Initialization recipe for [`Tape::tensor_new`].
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Fill {
    Zeros,
    Ones,
    Constant(Real),
    /// Uniform on `[lo, hi)`, fully determined by the seed.
    Uniform { lo: Real, hi: Real, seed: u64 },
    /// Zero-mean normal with `std = sqrt(2 / fan_in)`, `fan_in = C_in·kh·kw`.
    HeNormal { seed: u64 },
}

/// Generates the raw buffer for a fill without touching a tape, so model
/// parameters can be initialized outside any graph.
pub fn fill_data(shape: Shape, fill: Fill) -> Result<Vec<Real>> {
    let n = checked_numel(shape)?;
    Ok(match fill {
        Fill::Zeros => vec![0.0; n],
        Fill::Ones => vec![1.0; n],
        Fill::Constant(c) => vec![c; n],
        Fill::Uniform { lo, hi, seed } => {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            (0..n).map(|_| rng.gen_range(lo..hi)).collect()
        }
        Fill::HeNormal { seed } => {
            let fan_in = (shape[1] * shape[2] * shape[3]).max(1);
            let std = (2.0 / fan_in as Real).sqrt();
            let normal = Normal::new(0.0, std as f64).expect("std is finite");
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            (0..n).map(|_| normal.sample(&mut rng) as Real).collect()
        }
    })
}

pub(crate) struct Node {
    pub shape: Shape,
    pub data: Vec<Real>,
    pub requires_grad: bool,
    /// True when a gradient must flow through this node (it or an ancestor
    /// requires grad).
    pub needs_grad: bool,
    pub grad: Option<Vec<Real>>,
    pub rule: Option<Box<dyn BackwardRule>>,
}

/// Backward rule recorded by an operation: given the output gradient, scatter
/// contributions into the inputs' gradient buffers.
pub(crate) trait BackwardRule {
    fn backward(&self, tape: &Tape, gout: &[Real], sink: &mut GradSink);
}

/// Accumulator for gradient buffers during a single backward sweep.
pub(crate) struct GradSink<'a> {
    grads: &'a mut [Option<Vec<Real>>],
    wants: &'a [bool],
}

impl GradSink<'_> {
    /// Whether any gradient needs to reach `id` at all.
    pub fn wants(&self, id: TensorId) -> bool {
        self.wants[id.0]
    }

    /// Zero-initialized gradient buffer for `id`, for in-place accumulation.
    pub fn buf(&mut self, id: TensorId, len: usize) -> &mut [Real] {
        self.grads[id.0].get_or_insert_with(|| vec![0.0; len])
    }

    pub fn add(&mut self, id: TensorId, contrib: &[Real]) {
        if !self.wants(id) {
            return;
        }
        let buf = self.buf(id, contrib.len());
        for (g, c) in buf.iter_mut().zip(contrib) {
            *g += c;
        }
    }
}

/// Single-threaded operation tape. One tape per training thread; finished
/// tensors may be copied out and sent anywhere.
#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Records a leaf tensor from an existing buffer.
    pub fn leaf(&mut self, shape: Shape, data: Vec<Real>, requires_grad: bool) -> TensorId {
        assert_eq!(
            data.len(),
            numel(shape),
            "leaf buffer length must match shape"
        );
        self.push_node(shape, data, requires_grad, None)
    }

    /// Fresh tensor from a fill recipe. Random fills are fully determined by
    /// their seed.
    pub fn tensor_new(&mut self, shape: Shape, fill: Fill) -> Result<TensorId> {
        let data = fill_data(shape, fill)?;
        Ok(self.leaf(shape, data, false))
    }

    pub(crate) fn push_node(
        &mut self,
        shape: Shape,
        data: Vec<Real>,
        requires_grad: bool,
        rule: Option<Box<dyn BackwardRule>>,
    ) -> TensorId {
        let needs_grad = requires_grad || rule.is_some();
        self.nodes.push(Node {
            shape,
            data,
            requires_grad,
            needs_grad,
            grad: None,
            rule,
        });
        TensorId(self.nodes.len() - 1)
    }

    /// Records `data` as the output of an op over `inputs`, keeping the rule
    /// only if some input carries gradient.
    pub(crate) fn push_op(
        &mut self,
        shape: Shape,
        data: Vec<Real>,
        inputs: &[TensorId],
        rule: Box<dyn BackwardRule>,
    ) -> TensorId {
        let flows = inputs.iter().any(|&i| self.nodes[i.0].needs_grad);
        self.push_node(shape, data, false, flows.then_some(rule))
    }

    pub fn shape(&self, id: TensorId) -> Shape {
        self.nodes[id.0].shape
    }

    pub fn data(&self, id: TensorId) -> &[Real] {
        &self.nodes[id.0].data
    }

    /// Accumulated gradient buffer, present only after a backward pass reached
    /// a `requires_grad` tensor.
    pub fn grad(&self, id: TensorId) -> Option<&[Real]> {
        self.nodes[id.0].grad.as_deref()
    }

    pub fn set_requires_grad(&mut self, id: TensorId, on: bool) {
        self.nodes[id.0].requires_grad = on;
        if on {
            self.nodes[id.0].needs_grad = true;
        }
    }

    pub fn clear_grads(&mut self) {
        for node in &mut self.nodes {
            node.grad = None;
        }
    }

    /// Reverse-mode sweep from a scalar loss. Populates `grad` on every
    /// `requires_grad` tensor reachable from `loss`; gradients from multiple
    /// uses of a tensor sum.
    pub fn backward(&mut self, loss: TensorId) -> Result<()> {
        if loss.0 >= self.nodes.len() {
            return Err(Error::Contract(
                "backward: loss tensor is not on this tape".into(),
            ));
        }
        if self.nodes[loss.0].shape != [1, 1, 1, 1] {
            return Err(Error::Contract(format!(
                "backward: loss must be scalar-shaped (1,1,1,1), got {:?}",
                self.nodes[loss.0].shape
            )));
        }
        let wants: Vec<bool> = self.nodes.iter().map(|n| n.needs_grad).collect();
        let mut grads: Vec<Option<Vec<Real>>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(vec![1.0]);
        for i in (0..=loss.0).rev() {
            let Some(gout) = grads[i].take() else { continue };
            if let Some(rule) = &self.nodes[i].rule {
                let mut sink = GradSink {
                    grads: &mut grads,
                    wants: &wants,
                };
                rule.backward(self, &gout, &mut sink);
            }
            grads[i] = Some(gout);
        }
        for (node, g) in self.nodes.iter_mut().zip(grads) {
            if node.requires_grad {
                if let Some(g) = g {
                    match &mut node.grad {
                        Some(acc) => {
                            for (a, b) in acc.iter_mut().zip(&g) {
                                *a += b;
                            }
                        }
                        None => node.grad = Some(g),
                    }
                }
            }
        }
        Ok(())
    }

    // ---- elementwise and structural ops ----

    fn check_same_shape(&self, op: &'static str, a: TensorId, b: TensorId) -> Result<()> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa != sb {
            return Err(Error::ShapeMismatch {
                op,
                left: sa,
                right: sb,
            });
        }
        Ok(())
    }

    pub fn add(&mut self, a: TensorId, b: TensorId) -> Result<TensorId> {
        self.check_same_shape("elementwise_add", a, b)?;
        let data = self
            .data(a)
            .iter()
            .zip(self.data(b))
            .map(|(x, y)| x + y)
            .collect();
        Ok(self.push_op(self.shape(a), data, &[a, b], Box::new(AddRule { a, b })))
    }

    pub fn mul(&mut self, a: TensorId, b: TensorId) -> Result<TensorId> {
        self.check_same_shape("elementwise_mul", a, b)?;
        let data = self
            .data(a)
            .iter()
            .zip(self.data(b))
            .map(|(x, y)| x * y)
            .collect();
        Ok(self.push_op(self.shape(a), data, &[a, b], Box::new(MulRule { a, b })))
    }

    pub fn scalar_mul(&mut self, a: TensorId, s: Real) -> TensorId {
        let data = self.data(a).iter().map(|x| x * s).collect();
        self.push_op(self.shape(a), data, &[a], Box::new(ScalarMulRule { a, s }))
    }

    /// Sum of all entries as a `(1,1,1,1)` tensor.
    pub fn sum_all(&mut self, a: TensorId) -> TensorId {
        let total: Real = self.data(a).iter().sum();
        self.push_op(
            [1, 1, 1, 1],
            vec![total],
            &[a],
            Box::new(SumAllRule {
                a,
                len: self.data(a).len(),
            }),
        )
    }

    /// Concatenates along the channel axis; all inputs must agree on N, H, W.
    pub fn concat_channels(&mut self, inputs: &[TensorId]) -> Result<TensorId> {
        let Some(&first) = inputs.first() else {
            return Err(Error::Config("concat_channels: empty input list".into()));
        };
        let [n, _, h, w] = self.shape(first);
        let mut c_total = 0;
        for &id in inputs {
            let s = self.shape(id);
            if [s[0], s[2], s[3]] != [n, h, w] {
                return Err(Error::ShapeMismatch {
                    op: "concat_channels",
                    left: self.shape(first),
                    right: s,
                });
            }
            c_total += s[1];
        }
        let out_shape = [n, c_total, h, w];
        let plane = h * w;
        let mut data = vec![0.0; numel(out_shape)];
        for ni in 0..n {
            let mut c_off = 0;
            for &id in inputs {
                let c = self.shape(id)[1];
                let src = &self.data(id)[ni * c * plane..(ni + 1) * c * plane];
                data[(ni * c_total + c_off) * plane..(ni * c_total + c_off + c) * plane]
                    .copy_from_slice(src);
                c_off += c;
            }
        }
        let rule = Box::new(ConcatRule {
            inputs: inputs.to_vec(),
        });
        Ok(self.push_op(out_shape, data, inputs, rule))
    }
}

struct AddRule {
    a: TensorId,
    b: TensorId,
}

impl BackwardRule for AddRule {
    fn backward(&self, _tape: &Tape, gout: &[Real], sink: &mut GradSink) {
        sink.add(self.a, gout);
        sink.add(self.b, gout);
    }
}

struct MulRule {
    a: TensorId,
    b: TensorId,
}

impl BackwardRule for MulRule {
    fn backward(&self, tape: &Tape, gout: &[Real], sink: &mut GradSink) {
        if sink.wants(self.a) {
            let contrib: Vec<Real> = gout
                .iter()
                .zip(tape.data(self.b))
                .map(|(g, y)| g * y)
                .collect();
            sink.add(self.a, &contrib);
        }
        if sink.wants(self.b) {
            let contrib: Vec<Real> = gout
                .iter()
                .zip(tape.data(self.a))
                .map(|(g, x)| g * x)
                .collect();
            sink.add(self.b, &contrib);
        }
    }
}

struct ScalarMulRule {
    a: TensorId,
    s: Real,
}

impl BackwardRule for ScalarMulRule {
    fn backward(&self, _tape: &Tape, gout: &[Real], sink: &mut GradSink) {
        if sink.wants(self.a) {
            let contrib: Vec<Real> = gout.iter().map(|g| g * self.s).collect();
            sink.add(self.a, &contrib);
        }
    }
}

struct SumAllRule {
    a: TensorId,
    len: usize,
}

impl BackwardRule for SumAllRule {
    fn backward(&self, _tape: &Tape, gout: &[Real], sink: &mut GradSink) {
        if sink.wants(self.a) {
            let g = gout[0];
            let buf = sink.buf(self.a, self.len);
            for v in buf.iter_mut() {
                *v += g;
            }
        }
    }
}

struct ConcatRule {
    inputs: Vec<TensorId>,
}

impl BackwardRule for ConcatRule {
    fn backward(&self, tape: &Tape, gout: &[Real], sink: &mut GradSink) {
        let shapes: Vec<Shape> = self.inputs.iter().map(|&id| tape.shape(id)).collect();
        let [n, _, h, w] = shapes[0];
        let plane = h * w;
        let c_total: usize = shapes.iter().map(|s| s[1]).sum();
        for ni in 0..n {
            let mut c_off = 0;
            for (&id, s) in self.inputs.iter().zip(&shapes) {
                let c = s[1];
                if sink.wants(id) {
                    let src = &gout
                        [(ni * c_total + c_off) * plane..(ni * c_total + c_off + c) * plane];
                    let buf = sink.buf(id, numel(*s));
                    for (g, v) in buf[ni * c * plane..(ni + 1) * c * plane]
                        .iter_mut()
                        .zip(src)
                    {
                        *g += v;
                    }
                }
                c_off += c;
            }
        }
    }
}
