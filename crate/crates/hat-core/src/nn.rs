//! Parameterized layers: each struct owns its tensors and knows how to apply
//! itself to a graph value, register its leaves, and report parameter counts.
//!
//! Naming convention for [`Visit`]: slash-separated paths (`stage2/block0/attn/q/weight`).
//! `visit_params` walks learnable tensors only; `visit_buffers` walks
//! non-learnable state (batch-norm running statistics).

use crate::graph::{Graph, Value};
use crate::init::Initializer;
use crate::tensor::{Scalar, Tensor};
use crate::Result;

/// Callback over named tensors. Mutable access supports loading from archives.
pub trait Visit<T: Scalar> {
    fn visit_params(&mut self, prefix: &str, f: &mut dyn FnMut(String, &mut Tensor<T>));
    fn visit_buffers(&mut self, _prefix: &str, _f: &mut dyn FnMut(String, &mut Tensor<T>)) {}

    fn param_count(&mut self) -> u64 {
        let mut n = 0u64;
        self.visit_params("", &mut |_, t| n += t.len() as u64);
        n
    }
}

pub(crate) fn join(prefix: &str, name: &str) -> String {
    if prefix.is_empty() {
        name.to_string()
    } else {
        format!("{prefix}/{name}")
    }
}

// ---- linear ----

/// Dense layer with weight stored [in, out] so forward is a plain right-multiply.
#[derive(Debug, Clone)]
pub struct LinearParams<T: Scalar> {
    pub weight: Tensor<T>,
    pub bias: Option<Tensor<T>>,
}

impl<T: Scalar> LinearParams<T> {
    pub fn new(d_in: usize, d_out: usize, bias: bool, init: &mut Initializer) -> Self {
        LinearParams {
            weight: init.weight(&[d_in, d_out], 0.02),
            bias: bias.then(|| Tensor::zeros(&[d_out])),
        }
    }

    pub fn d_in(&self) -> usize {
        self.weight.shape()[0]
    }

    pub fn d_out(&self) -> usize {
        self.weight.shape()[1]
    }

    /// x: [.., d_in] -> [.., d_out].
    pub fn forward(&self, g: &mut Graph<T>, x: Value) -> Result<Value> {
        let shape = g.value(x).shape().to_vec();
        let d_in = *shape.last().ok_or_else(|| crate::Error::dim("linear", "rank-0 input".to_string()))?;
        let rows: usize = shape[..shape.len() - 1].iter().product();
        let flat = g.reshape(x, &[rows, d_in])?;
        let w = g.param(&self.weight);
        let mut y = g.matmul(flat, w)?;
        if let Some(b) = &self.bias {
            let bv = g.param(b);
            y = g.add(y, bv)?;
        }
        let mut out_shape = shape;
        *out_shape.last_mut().unwrap() = self.d_out();
        g.reshape(y, &out_shape)
    }
}

impl<T: Scalar> Visit<T> for LinearParams<T> {
    fn visit_params(&mut self, prefix: &str, f: &mut dyn FnMut(String, &mut Tensor<T>)) {
        f(join(prefix, "weight"), &mut self.weight);
        if let Some(b) = &mut self.bias {
            f(join(prefix, "bias"), b);
        }
    }
}

// ---- conv ----

#[derive(Debug, Clone)]
pub struct Conv2dParams<T: Scalar> {
    /// OIHW.
    pub weight: Tensor<T>,
    pub bias: Option<Tensor<T>>,
    pub stride: usize,
    pub pad: usize,
}

impl<T: Scalar> Conv2dParams<T> {
    pub fn new(
        c_in: usize,
        c_out: usize,
        k: usize,
        stride: usize,
        pad: usize,
        bias: bool,
        init: &mut Initializer,
    ) -> Self {
        // Fan-in scaled normal keeps activations O(1) through deep conv stacks.
        let std = (2.0 / (c_in * k * k) as f64).sqrt();
        Conv2dParams {
            weight: init.weight(&[c_out, c_in, k, k], std),
            bias: bias.then(|| Tensor::zeros(&[c_out])),
            stride,
            pad,
        }
    }

    /// x: NCHW.
    pub fn forward(&self, g: &mut Graph<T>, x: Value) -> Result<Value> {
        let w = g.param(&self.weight);
        let b = self.bias.as_ref().map(|b| g.param(b));
        g.conv2d(x, w, b, self.stride, self.pad)
    }
}

impl<T: Scalar> Visit<T> for Conv2dParams<T> {
    fn visit_params(&mut self, prefix: &str, f: &mut dyn FnMut(String, &mut Tensor<T>)) {
        f(join(prefix, "weight"), &mut self.weight);
        if let Some(b) = &mut self.bias {
            f(join(prefix, "bias"), b);
        }
    }
}

// ---- batch norm ----

/// Inference-mode batch norm; running statistics are buffers, not parameters.
#[derive(Debug, Clone)]
pub struct BnParams<T: Scalar> {
    pub scale: Tensor<T>,
    pub shift: Tensor<T>,
    pub mean: Tensor<T>,
    pub var: Tensor<T>,
    pub eps: T,
}

impl<T: Scalar> BnParams<T> {
    pub fn new(c: usize, eps: f64) -> Self {
        BnParams {
            scale: Tensor::full(&[c], T::ONE),
            shift: Tensor::zeros(&[c]),
            mean: Tensor::zeros(&[c]),
            var: Tensor::full(&[c], T::ONE),
            eps: T::from_f64(eps),
        }
    }

    pub fn forward(&self, g: &mut Graph<T>, x: Value) -> Result<Value> {
        let sc = g.param(&self.scale);
        let sh = g.param(&self.shift);
        g.batchnorm(x, sc, sh, &self.mean, &self.var, self.eps)
    }
}

impl<T: Scalar> Visit<T> for BnParams<T> {
    fn visit_params(&mut self, prefix: &str, f: &mut dyn FnMut(String, &mut Tensor<T>)) {
        f(join(prefix, "scale"), &mut self.scale);
        f(join(prefix, "shift"), &mut self.shift);
    }

    fn visit_buffers(&mut self, prefix: &str, f: &mut dyn FnMut(String, &mut Tensor<T>)) {
        f(join(prefix, "mean"), &mut self.mean);
        f(join(prefix, "var"), &mut self.var);
    }
}

// ---- layer norm ----

/// Affine layer norm; applies over the trailing dim or over NCHW channels.
#[derive(Debug, Clone)]
pub struct LnParams<T: Scalar> {
    pub scale: Tensor<T>,
    pub shift: Tensor<T>,
    pub eps: T,
}

impl<T: Scalar> LnParams<T> {
    pub fn new(d: usize, eps: f64) -> Self {
        LnParams {
            scale: Tensor::full(&[d], T::ONE),
            shift: Tensor::zeros(&[d]),
            eps: T::from_f64(eps),
        }
    }

    /// x: [.., d].
    pub fn forward(&self, g: &mut Graph<T>, x: Value) -> Result<Value> {
        let sc = g.param(&self.scale);
        let sh = g.param(&self.shift);
        g.layernorm_lastdim(x, sc, sh, self.eps)
    }

    /// x: NCHW, normalizing over channels at each position.
    pub fn forward_2d(&self, g: &mut Graph<T>, x: Value) -> Result<Value> {
        let sc = g.param(&self.scale);
        let sh = g.param(&self.shift);
        g.layernorm_2d(x, sc, sh, self.eps)
    }
}

impl<T: Scalar> Visit<T> for LnParams<T> {
    fn visit_params(&mut self, prefix: &str, f: &mut dyn FnMut(String, &mut Tensor<T>)) {
        f(join(prefix, "scale"), &mut self.scale);
        f(join(prefix, "shift"), &mut self.shift);
    }
}

// ---- MLP ----

/// Token MLP: d -> ratio*d -> d with exact-erf GELU between.
#[derive(Debug, Clone)]
pub struct MlpParams<T: Scalar> {
    pub fc1: LinearParams<T>,
    pub fc2: LinearParams<T>,
}

impl<T: Scalar> MlpParams<T> {
    pub fn new(d: usize, ratio: usize, bias: bool, init: &mut Initializer) -> Self {
        MlpParams {
            fc1: LinearParams::new(d, d * ratio, bias, init),
            fc2: LinearParams::new(d * ratio, d, bias, init),
        }
    }

    pub fn forward(&self, g: &mut Graph<T>, x: Value) -> Result<Value> {
        let h = self.fc1.forward(g, x)?;
        let h = g.gelu(h);
        self.fc2.forward(g, h)
    }
}

impl<T: Scalar> Visit<T> for MlpParams<T> {
    fn visit_params(&mut self, prefix: &str, f: &mut dyn FnMut(String, &mut Tensor<T>)) {
        self.fc1.visit_params(&join(prefix, "fc1"), f);
        self.fc2.visit_params(&join(prefix, "fc2"), f);
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn linear_matches_hand_product() {
        let mut g = Graph::<f64>::new();
        let lin = LinearParams {
            weight: Tensor::from_vec(&[2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap(),
            bias: Some(Tensor::from_vec(&[2], vec![10.0, 20.0]).unwrap()),
        };
        let x = g.constant(Tensor::from_vec(&[1, 2], vec![1.0, 1.0]).unwrap());
        let y = lin.forward(&mut g, x).unwrap();
        assert_eq!(g.value(y).data(), &[14.0, 26.0]);
    }

    #[test]
    fn linear_keeps_leading_dims() {
        let mut init = Initializer::new(0);
        let lin = LinearParams::<f64>::new(4, 6, true, &mut init);
        let mut g = Graph::new();
        let x = g.constant(Tensor::zeros(&[2, 3, 4]));
        let y = lin.forward(&mut g, x).unwrap();
        assert_eq!(g.value(y).shape(), &[2, 3, 6]);
    }

    #[test]
    fn mlp_expands_by_ratio() {
        let mut init = Initializer::new(0);
        let mlp = MlpParams::<f64>::new(8, 4, true, &mut init);
        assert_eq!(mlp.fc1.d_out(), 32);
        assert_eq!(mlp.fc2.d_out(), 8);
        let mut count = mlp.clone();
        // 8*32 + 32 + 32*8 + 8
        assert_eq!(count.param_count(), 8 * 32 + 32 + 32 * 8 + 8);
    }

    #[test]
    fn bn_params_exclude_buffers_from_count() {
        let mut bn = BnParams::<f64>::new(16, 1e-5);
        assert_eq!(bn.param_count(), 32);
        let mut buffers = Vec::new();
        bn.visit_buffers("bn", &mut |name, _| buffers.push(name));
        assert_eq!(buffers, vec!["bn/mean".to_string(), "bn/var".to_string()]);
    }

    #[test]
    fn visit_names_are_slash_paths() {
        let mut init = Initializer::new(0);
        let mut conv = Conv2dParams::<f64>::new(3, 8, 3, 1, 1, true, &mut init);
        let mut names = Vec::new();
        conv.visit_params("stem/conv1", &mut |name, _| names.push(name));
        assert_eq!(names, vec!["stem/conv1/weight".to_string(), "stem/conv1/bias".to_string()]);
    }
}
