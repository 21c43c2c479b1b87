//! Dense layers with explicit backward passes.
//!
//! A forward pass over a [`Sequential`] records a [`Tape`] holding the
//! cached activations of every node; [`Sequential::backprop`] consumes the
//! tape in reverse and returns gradients shaped exactly like the network.

use rand::Rng;
use rand_distr::{Distribution, Uniform};
use serde::{Deserialize, Serialize};

use super::params::{join, Parameters};
use super::Tensor2;
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Activation {
    Identity,
    Relu,
}

impl Activation {
    fn apply(self, t: &mut Tensor2) {
        if self == Activation::Relu {
            relu_in_place(t);
        }
    }
}

fn relu_in_place(t: &mut Tensor2) {
    t.data_mut().iter_mut().for_each(|v| {
        if *v < 0.0 {
            *v = 0.0
        }
    });
}

/// Zeroes `grad` wherever the rectified activation was not positive.
fn relu_mask(grad: &mut Tensor2, activated: &Tensor2) {
    for (g, a) in grad.data_mut().iter_mut().zip(activated.data()) {
        if *a <= 0.0 {
            *g = 0.0;
        }
    }
}

/// Affine map `y = x·W + b` with `W` stored as `in × out`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Linear {
    pub weight: Tensor2,
    pub bias: Tensor2,
}

impl Linear {
    /// Weights uniform in `±1/√fan_in`, zero bias.
    pub fn init<R: Rng + ?Sized>(fan_in: usize, fan_out: usize, rng: &mut R) -> Self {
        let bound = 1.0 / (fan_in.max(1) as f64).sqrt();
        let dist = Uniform::new_inclusive(-bound, bound).expect("finite bound");
        let data = (0..fan_in * fan_out).map(|_| dist.sample(rng)).collect();
        Self {
            weight: Tensor2::from_vec(fan_in, fan_out, data).expect("sized buffer"),
            bias: Tensor2::zeros(1, fan_out),
        }
    }

    pub fn from_parts(weight: Tensor2, bias: Tensor2) -> Result<Self> {
        if bias.rows() != 1 || bias.cols() != weight.cols() {
            return Err(Error::shape(format!(
                "bias {:?} does not match weight {:?}",
                bias.shape(),
                weight.shape()
            )));
        }
        Ok(Self { weight, bias })
    }

    pub fn zeros(fan_in: usize, fan_out: usize) -> Self {
        Self {
            weight: Tensor2::zeros(fan_in, fan_out),
            bias: Tensor2::zeros(1, fan_out),
        }
    }

    pub fn in_dim(&self) -> usize {
        self.weight.rows()
    }

    pub fn out_dim(&self) -> usize {
        self.weight.cols()
    }

    pub fn forward(&self, x: &Tensor2) -> Result<Tensor2> {
        if x.cols() != self.in_dim() {
            return Err(Error::shape(format!(
                "linear expects {} input columns, got {}",
                self.in_dim(),
                x.cols()
            )));
        }
        let mut y = x.matmul(&self.weight)?;
        y.add_row_broadcast(&self.bias)?;
        Ok(y)
    }

    /// Gradients for an input batch `x` given `∂L/∂y`; returns
    /// `(∂L/∂params, ∂L/∂x)`.
    pub fn backward(&self, x: &Tensor2, grad_out: &Tensor2) -> Result<(Linear, Tensor2)> {
        let grads = self.param_grads(x, grad_out)?;
        let grad_in = grad_out.matmul_nt(&self.weight)?;
        Ok((grads, grad_in))
    }

    /// Parameter gradients only, skipping the input-gradient product.
    pub fn param_grads(&self, x: &Tensor2, grad_out: &Tensor2) -> Result<Linear> {
        if grad_out.cols() != self.out_dim() || grad_out.rows() != x.rows() {
            return Err(Error::shape(format!(
                "linear grad {:?} for input {:?} and weight {:?}",
                grad_out.shape(),
                x.shape(),
                self.weight.shape()
            )));
        }
        Ok(Linear {
            weight: x.matmul_tn(grad_out)?,
            bias: grad_out.sum_rows(),
        })
    }
}

impl Parameters for Linear {
    fn visit<'a>(&'a self, prefix: &str, out: &mut Vec<(String, &'a Tensor2)>) {
        out.push((join(prefix, "weight"), &self.weight));
        out.push((join(prefix, "bias"), &self.bias));
    }

    fn visit_mut<'a>(&'a mut self, out: &mut Vec<&'a mut Tensor2>) {
        out.push(&mut self.weight);
        out.push(&mut self.bias);
    }
}

/// `y = x + relu(L2(relu(L1(x))))`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ResidualBlock {
    pub first: Linear,
    pub second: Linear,
}

impl ResidualBlock {
    pub fn init<R: Rng + ?Sized>(dim: usize, rng: &mut R) -> Self {
        Self {
            first: Linear::init(dim, dim, rng),
            second: Linear::init(dim, dim, rng),
        }
    }

    pub fn new(first: Linear, second: Linear) -> Result<Self> {
        let d = first.in_dim();
        if first.out_dim() != second.in_dim() || second.out_dim() != d {
            return Err(Error::shape(
                "residual block must map its input dimension back onto itself",
            ));
        }
        Ok(Self { first, second })
    }

    pub fn dim(&self) -> usize {
        self.first.in_dim()
    }
}

impl Parameters for ResidualBlock {
    fn visit<'a>(&'a self, prefix: &str, out: &mut Vec<(String, &'a Tensor2)>) {
        self.first.visit(&join(prefix, "first"), out);
        self.second.visit(&join(prefix, "second"), out);
    }

    fn visit_mut<'a>(&'a mut self, out: &mut Vec<&'a mut Tensor2>) {
        self.first.visit_mut(out);
        self.second.visit_mut(out);
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub enum Layer {
    Linear {
        linear: Linear,
        activation: Activation,
    },
    Residual(ResidualBlock),
}

impl Layer {
    pub fn in_dim(&self) -> usize {
        match self {
            Layer::Linear { linear, .. } => linear.in_dim(),
            Layer::Residual(b) => b.dim(),
        }
    }

    pub fn out_dim(&self) -> usize {
        match self {
            Layer::Linear { linear, .. } => linear.out_dim(),
            Layer::Residual(b) => b.dim(),
        }
    }
}

impl Parameters for Layer {
    fn visit<'a>(&'a self, prefix: &str, out: &mut Vec<(String, &'a Tensor2)>) {
        match self {
            Layer::Linear { linear, .. } => linear.visit(prefix, out),
            Layer::Residual(b) => b.visit(prefix, out),
        }
    }

    fn visit_mut<'a>(&'a mut self, out: &mut Vec<&'a mut Tensor2>) {
        match self {
            Layer::Linear { linear, .. } => linear.visit_mut(out),
            Layer::Residual(b) => b.visit_mut(out),
        }
    }
}

/// Cached activations of one layer.
#[derive(Clone, Debug)]
enum Node {
    Linear {
        input: Tensor2,
        output: Tensor2,
    },
    Residual {
        input: Tensor2,
        hidden: Tensor2,
        branch: Tensor2,
    },
}

/// Record of one forward pass over a [`Sequential`].
#[derive(Clone, Debug)]
pub struct Tape {
    nodes: Vec<Node>,
    output_shape: (usize, usize),
}

impl Tape {
    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn output_shape(&self) -> (usize, usize) {
        self.output_shape
    }
}

enum Cached {
    Linear { output: Tensor2 },
    Residual { hidden: Tensor2, branch: Tensor2 },
}

impl Cached {
    fn with_input(self, input: Tensor2) -> Node {
        match self {
            Cached::Linear { output } => Node::Linear { input, output },
            Cached::Residual { hidden, branch } => Node::Residual {
                input,
                hidden,
                branch,
            },
        }
    }
}

/// An ordered stack of layers.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Sequential {
    pub layers: Vec<Layer>,
}

impl Sequential {
    pub fn new(layers: Vec<Layer>) -> Result<Self> {
        for (i, pair) in layers.windows(2).enumerate() {
            if pair[0].out_dim() != pair[1].in_dim() {
                return Err(Error::Shape {
                    msg: format!(
                        "layer output {} does not feed input {}",
                        pair[0].out_dim(),
                        pair[1].in_dim()
                    ),
                    layer: Some(i + 1),
                });
            }
        }
        Ok(Self { layers })
    }

    pub fn in_dim(&self) -> Option<usize> {
        self.layers.first().map(Layer::in_dim)
    }

    pub fn out_dim(&self) -> Option<usize> {
        self.layers.last().map(Layer::out_dim)
    }

    /// Inference-only forward pass; nothing is cached.
    pub fn infer(&self, input: &Tensor2) -> Result<Tensor2> {
        let mut x = input.clone();
        for (i, layer) in self.layers.iter().enumerate() {
            x = Self::apply(layer, &x, i)?.0;
        }
        Ok(x)
    }

    pub fn forward(&self, input: &Tensor2) -> Result<(Tensor2, Tape)> {
        if !input.is_finite() {
            return Err(Error::NonFinite("network input".into()));
        }
        let mut nodes = Vec::with_capacity(self.layers.len());
        let mut x = input.clone();
        for (i, layer) in self.layers.iter().enumerate() {
            let (y, cached) = Self::apply(layer, &x, i)?;
            nodes.push(cached.with_input(std::mem::replace(&mut x, y)));
        }
        let output_shape = x.shape();
        Ok((
            x,
            Tape {
                nodes,
                output_shape,
            },
        ))
    }

    fn apply(layer: &Layer, x: &Tensor2, index: usize) -> Result<(Tensor2, Cached)> {
        let tag = |e: Error| match e {
            Error::Shape { msg, .. } => Error::Shape {
                msg,
                layer: Some(index),
            },
            other => other,
        };
        match layer {
            Layer::Linear { linear, activation } => {
                let mut y = linear.forward(x).map_err(tag)?;
                activation.apply(&mut y);
                Ok((y.clone(), Cached::Linear { output: y }))
            }
            Layer::Residual(block) => {
                let mut hidden = block.first.forward(x).map_err(tag)?;
                relu_in_place(&mut hidden);
                let mut branch = block.second.forward(&hidden).map_err(tag)?;
                relu_in_place(&mut branch);
                let mut y = branch.clone();
                y.add_assign(x).map_err(tag)?;
                Ok((y, Cached::Residual { hidden, branch }))
            }
        }
    }

    /// Reverse pass over `tape`. Returns parameter gradients (same layout
    /// as `self`) and the gradient with respect to the network input.
    pub fn backprop(&self, tape: Tape, output_grad: &Tensor2) -> Result<(Sequential, Tensor2)> {
        let (g, x) = self.backprop_inner(tape, output_grad, true)?;
        Ok((g, x.expect("input gradient requested")))
    }

    /// Like [`Sequential::backprop`] but skips the input-gradient product of
    /// the first layer, for networks fed by frozen features.
    pub fn backprop_params(&self, tape: Tape, output_grad: &Tensor2) -> Result<Sequential> {
        self.backprop_inner(tape, output_grad, false).map(|(g, _)| g)
    }

    fn backprop_inner(
        &self,
        tape: Tape,
        output_grad: &Tensor2,
        need_input_grad: bool,
    ) -> Result<(Sequential, Option<Tensor2>)> {
        if tape.nodes.len() != self.layers.len() {
            return Err(Error::shape(format!(
                "tape has {} nodes for {} layers",
                tape.nodes.len(),
                self.layers.len()
            )));
        }
        if output_grad.shape() != tape.output_shape {
            return Err(Error::shape(format!(
                "output gradient {:?} for output {:?}",
                output_grad.shape(),
                tape.output_shape
            )));
        }
        let mut grads: Vec<Option<Layer>> = vec![None; self.layers.len()];
        let mut g = output_grad.clone();
        for (i, node) in tape.nodes.into_iter().enumerate().rev() {
            let want_input = need_input_grad || i > 0;
            let layer_grad = match (&self.layers[i], node) {
                (Layer::Linear { linear, activation }, Node::Linear { input, output }) => {
                    if *activation == Activation::Relu {
                        relu_mask(&mut g, &output);
                    }
                    let pg = linear.param_grads(&input, &g)?;
                    if want_input {
                        g = g.matmul_nt(&linear.weight)?;
                    }
                    Layer::Linear {
                        linear: pg,
                        activation: *activation,
                    }
                }
                (
                    Layer::Residual(block),
                    Node::Residual {
                        input,
                        hidden,
                        branch,
                    },
                ) => {
                    let skip = g.clone();
                    relu_mask(&mut g, &branch);
                    let (g2, mut gh) = block.second.backward(&hidden, &g)?;
                    relu_mask(&mut gh, &hidden);
                    let g1 = block.first.param_grads(&input, &gh)?;
                    if want_input {
                        g = gh.matmul_nt(&block.first.weight)?;
                        g.add_assign(&skip)?;
                    }
                    Layer::Residual(ResidualBlock {
                        first: g1,
                        second: g2,
                    })
                }
                _ => {
                    return Err(Error::Shape {
                        msg: "tape node kind does not match layer".into(),
                        layer: Some(i),
                    })
                }
            };
            grads[i] = Some(layer_grad);
        }
        let grads = Sequential {
            layers: grads
                .into_iter()
                .map(|l| l.expect("every node visited"))
                .collect(),
        };
        Ok((grads, need_input_grad.then_some(g)))
    }
}

impl Parameters for Sequential {
    fn visit<'a>(&'a self, prefix: &str, out: &mut Vec<(String, &'a Tensor2)>) {
        for (i, l) in self.layers.iter().enumerate() {
            l.visit(&join(prefix, &format!("layer{i}")), out);
        }
    }

    fn visit_mut<'a>(&'a mut self, out: &mut Vec<&'a mut Tensor2>) {
        for l in self.layers.iter_mut() {
            l.visit_mut(out);
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::math::{finite_diff_grad, max_relative_error, mse, stream_rng};

    fn linear(weight: Tensor2) -> Layer {
        let out = weight.cols();
        Layer::Linear {
            linear: Linear::from_parts(weight, Tensor2::zeros(1, out)).unwrap(),
            activation: Activation::Identity,
        }
    }

    #[test]
    fn identity_linear() {
        let net = Sequential::new(vec![linear(Tensor2::identity(2))]).unwrap();
        let (y, _) = net.forward(&Tensor2::row_vector(&[1.0, 2.0])).unwrap();
        assert_eq!(y.data(), &[1.0, 2.0]);
    }

    #[test]
    fn relu_activation() {
        let relu = Sequential::new(vec![Layer::Linear {
            linear: Linear::from_parts(Tensor2::identity(2), Tensor2::zeros(1, 2)).unwrap(),
            activation: Activation::Relu,
        }])
        .unwrap();
        let (y, _) = relu.forward(&Tensor2::row_vector(&[-1.0, 3.0])).unwrap();
        assert_eq!(y.data(), &[0.0, 3.0]);

        // Inside a block with identity weights the branch is relu(relu(x)).
        let id = Linear::from_parts(Tensor2::identity(2), Tensor2::zeros(1, 2)).unwrap();
        let block = ResidualBlock::new(id.clone(), id).unwrap();
        let net = Sequential::new(vec![Layer::Residual(block)]).unwrap();
        let (y, tape) = net.forward(&Tensor2::row_vector(&[-1.0, 3.0])).unwrap();
        assert_eq!(y.data(), &[-1.0, 6.0]);
        assert_eq!(tape.len(), 1);
    }

    #[test]
    fn zero_weight_residual_is_skip_only() {
        let block = ResidualBlock::new(Linear::zeros(2, 2), Linear::zeros(2, 2)).unwrap();
        let net = Sequential::new(vec![Layer::Residual(block)]).unwrap();
        let (y, _) = net.forward(&Tensor2::row_vector(&[0.5, -0.5])).unwrap();
        assert_eq!(y.data(), &[0.5, -0.5]);
    }

    #[test]
    fn shape_error_names_layer() {
        let err = Sequential::new(vec![
            linear(Tensor2::zeros(2, 3)),
            linear(Tensor2::zeros(4, 1)),
        ])
        .unwrap_err();
        assert!(matches!(err, Error::Shape { layer: Some(1), .. }));

        let net = Sequential::new(vec![linear(Tensor2::zeros(2, 3))]).unwrap();
        let err = net.forward(&Tensor2::zeros(1, 5)).unwrap_err();
        assert!(matches!(err, Error::Shape { layer: Some(0), .. }));
    }

    #[test]
    fn linear_weight_gradient_is_outer_product() {
        // Row-vector convention y = x·W, so ∂L/∂W = xᵀ·g.
        let w = Tensor2::from_vec(2, 3, vec![0.1, 0.2, 0.3, -0.4, 0.5, 0.6]).unwrap();
        let net = Sequential::new(vec![linear(w)]).unwrap();
        let x = Tensor2::row_vector(&[2.0, -1.0]);
        let (_, tape) = net.forward(&x).unwrap();
        let g = Tensor2::row_vector(&[1.0, 0.5, -2.0]);
        let (grads, gx) = net.backprop(tape, &g).unwrap();
        let Layer::Linear { linear: lg, .. } = &grads.layers[0] else {
            panic!("layer kind changed")
        };
        for i in 0..2 {
            for j in 0..3 {
                assert_eq!(lg.weight.get(i, j), x.get(0, i) * g.get(0, j));
            }
        }
        assert_eq!(lg.bias.data(), g.data());
        assert_eq!(gx.cols(), 2);
        let tape = net.forward(&x).unwrap().1;
        assert!(net.backprop(tape, &Tensor2::zeros(1, 2)).is_err());
    }

    #[test]
    fn residual_net_matches_finite_differences() {
        let mut rng = stream_rng(3, 0);
        let mut layers = vec![Layer::Linear {
            linear: Linear::init(3, 5, &mut rng),
            activation: Activation::Relu,
        }];
        for _ in 0..2 {
            layers.push(Layer::Residual(ResidualBlock::init(5, &mut rng)));
        }
        let mut net = Sequential::new(layers).unwrap();
        for p in net.params_mut() {
            for (k, v) in p.data_mut().iter_mut().enumerate() {
                *v += 0.05 * ((k as f64) * 0.7).cos();
            }
        }
        let x = Tensor2::from_vec(4, 3, (0..12).map(|i| (i as f64 * 1.3).sin()).collect())
            .unwrap();
        let target =
            Tensor2::from_vec(4, 5, (0..20).map(|i| (i as f64 * 0.4).cos()).collect()).unwrap();
        let (y, tape) = net.forward(&x).unwrap();
        let l = mse(&y, &target).unwrap();
        let (grads, _) = net.backprop(tape, &l.grad).unwrap();
        let theta = net.flatten();
        let fd = finite_diff_grad(
            |th| {
                let mut n = net.clone();
                n.assign_flat(th)?;
                Ok(mse(&n.infer(&x)?, &target)?.loss)
            },
            &theta,
            1e-5,
        )
        .unwrap();
        assert!(max_relative_error(&grads.flatten(), &fd, 1e-6) < 1e-4);
    }

    #[test]
    fn forward_and_backprop_are_pure() {
        let mut rng = stream_rng(9, 0);
        let net =
            Sequential::new(vec![Layer::Residual(ResidualBlock::init(4, &mut rng))]).unwrap();
        let x = Tensor2::from_vec(2, 4, vec![0.1, -0.2, 0.3, 0.9, 1.0, 0.0, -1.0, 0.5]).unwrap();
        let (a, ta) = net.forward(&x).unwrap();
        let (b, tb) = net.forward(&x).unwrap();
        assert_eq!(a, b);
        let g = Tensor2::filled(2, 4, 0.25);
        assert_eq!(net.backprop(ta, &g).unwrap(), net.backprop(tb, &g).unwrap());
    }
}
