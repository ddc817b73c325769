use super::kernels::{self, ConvGeom};
use super::{Element, Tensor};
use crate::error::{Error, Result};

/// Handle to a node in a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Backward rule for an operation defined outside the engine (the losses use
/// this). Returns one gradient buffer per input, `None` for inputs it does not
/// differentiate.
pub trait BackwardRule<T: Element> {
    fn name(&self) -> &'static str;

    fn backward(&self, inputs: &[&Tensor<T>], output: &Tensor<T>, grad_out: &[T]) -> Vec<Option<Vec<T>>>;
}

/// Fault injection for the `verify` self-test.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Fault {
    /// Scales the input gradient of every convolution by 1.01.
    Conv3dBackward,
}

enum Op<T: Element> {
    Leaf,
    Conv3d {
        input: Var,
        weight: Var,
        bias: Option<Var>,
        geom: ConvGeom,
    },
    Add(Var, Var),
    Mul(Var, Var),
    Scale(Var, T),
    Relu(Var),
    ConcatChannels(Vec<Var>),
    Upsample {
        input: Var,
        factor: usize,
    },
    InstanceNorm {
        input: Var,
        inv_std: Vec<T>,
    },
    Softmax(Var),
    Sum(Var),
    Custom {
        inputs: Vec<Var>,
        rule: Box<dyn BackwardRule<T>>,
    },
}

struct Node<T: Element> {
    value: Tensor<T>,
    requires_grad: bool,
    grad: Option<Tensor<T>>,
    op: Op<T>,
}

/// Operation record. Nodes are appended in creation order, which is a valid
/// topological order, so backward is a single reverse sweep.
pub struct Graph<T: Element> {
    nodes: Vec<Node<T>>,
    fault: Option<Fault>,
}

impl<T: Element> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Element> Graph<T> {
    pub fn new() -> Self {
        Graph {
            nodes: Vec::new(),
            fault: None,
        }
    }

    pub fn with_fault(fault: Option<Fault>) -> Self {
        Graph {
            nodes: Vec::new(),
            fault,
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn leaf(&mut self, value: Tensor<T>, requires_grad: bool) -> Var {
        self.push(value, requires_grad, Op::Leaf)
    }

    /// Trainable leaf.
    pub fn param(&mut self, value: Tensor<T>) -> Var {
        self.leaf(value, true)
    }

    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.leaf(value, false)
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Gradient populated by the last [`Graph::backward`] call, if `v` was reachable.
    pub fn grad(&self, v: Var) -> Option<&Tensor<T>> {
        self.nodes[v.0].grad.as_ref()
    }

    fn push(&mut self, value: Tensor<T>, requires_grad: bool, op: Op<T>) -> Var {
        self.nodes.push(Node {
            value,
            requires_grad,
            grad: None,
            op,
        });
        Var(self.nodes.len() - 1)
    }

    fn any_grad(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].requires_grad)
    }

    pub fn conv3d(&mut self, input: Var, weight: Var, bias: Option<Var>, stride: usize, padding: usize) -> Result<Var> {
        let (n, c_in, sp) = self.value(input).volume_dims("conv3d input")?;
        let (c_out, w_in, ksp) = self.value(weight).volume_dims("conv3d weight")?;
        let k = ksp[0];
        if ksp.iter().any(|&e| e != k) {
            return Err(Error::dim(format!("conv3d: kernel must be cubic, got {ksp:?}")));
        }
        if w_in != c_in {
            return Err(Error::dim(format!(
                "conv3d: input has {c_in} channels but weight expects {w_in}"
            )));
        }
        if stride == 0 {
            return Err(Error::param("conv3d: stride must be >= 1"));
        }
        if let Some(b) = bias {
            if self.value(b).shape() != [c_out] {
                return Err(Error::dim(format!(
                    "conv3d: bias shape {:?} does not match {c_out} output channels",
                    self.value(b).shape()
                )));
            }
        }
        let mut output = [0; 3];
        for axis in 0..3 {
            output[axis] = ConvGeom::out_extent(sp[axis], k, stride, padding).ok_or_else(|| {
                Error::dim(format!(
                    "conv3d: non-positive output extent (input {sp:?}, kernel {k}, padding {padding})"
                ))
            })?;
        }
        let geom = ConvGeom {
            batch: n,
            c_in,
            c_out,
            input: sp,
            output,
            kernel: k,
            stride,
            padding,
        };
        let data = kernels::conv3d_forward(
            self.value(input).data(),
            self.value(weight).data(),
            bias.map(|b| self.value(b).data()),
            &geom,
        );
        let value = Tensor::new(vec![n, c_out, output[0], output[1], output[2]], data)?;
        let mut deps = vec![input, weight];
        deps.extend(bias);
        let rg = self.any_grad(&deps);
        Ok(self.push(
            value,
            rg,
            Op::Conv3d {
                input,
                weight,
                bias,
                geom,
            },
        ))
    }

    /// 1x1x1 convolution; identical arithmetic to `conv3d` with `k = 1, padding = 0`.
    pub fn pointwise_conv(&mut self, input: Var, weight: Var, bias: Option<Var>) -> Result<Var> {
        let ws = self.value(weight).shape();
        if ws.len() != 5 || ws[2..] != [1, 1, 1] {
            return Err(Error::dim(format!(
                "pointwise_conv: weight must be [C_out, C_in, 1, 1, 1], got {ws:?}"
            )));
        }
        self.conv3d(input, weight, bias, 1, 0)
    }

    pub fn upsample_nearest3d(&mut self, input: Var, factor: usize) -> Result<Var> {
        if factor < 1 {
            return Err(Error::param("upsample_nearest3d: factor must be >= 1"));
        }
        let (n, c, sp) = self.value(input).volume_dims("upsample_nearest3d")?;
        let data = kernels::upsample_forward(self.value(input).data(), n * c, sp, factor);
        let value = Tensor::new(vec![n, c, sp[0] * factor, sp[1] * factor, sp[2] * factor], data)?;
        let rg = self.any_grad(&[input]);
        Ok(self.push(value, rg, Op::Upsample { input, factor }))
    }

    fn same_shape(&self, what: &str, a: Var, b: Var) -> Result<()> {
        let (sa, sb) = (self.value(a).shape(), self.value(b).shape());
        if sa != sb {
            return Err(Error::dim(format!("{what}: shapes {sa:?} and {sb:?} differ")));
        }
        Ok(())
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("add", a, b)?;
        let (va, vb) = (self.value(a), self.value(b));
        let data = va.data().iter().zip(vb.data()).map(|(&x, &y)| x + y).collect();
        let value = Tensor::new(va.shape().to_vec(), data)?;
        let rg = self.any_grad(&[a, b]);
        Ok(self.push(value, rg, Op::Add(a, b)))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("mul", a, b)?;
        let (va, vb) = (self.value(a), self.value(b));
        let data = va.data().iter().zip(vb.data()).map(|(&x, &y)| x * y).collect();
        let value = Tensor::new(va.shape().to_vec(), data)?;
        let rg = self.any_grad(&[a, b]);
        Ok(self.push(value, rg, Op::Mul(a, b)))
    }

    /// Multiplies by a constant.
    pub fn scale(&mut self, a: Var, factor: T) -> Var {
        let value = self.value(a).map(|x| x * factor);
        let rg = self.any_grad(&[a]);
        self.push(value, rg, Op::Scale(a, factor))
    }

    /// ReLU with subgradient 0 at exactly 0.
    pub fn relu(&mut self, a: Var) -> Var {
        let value = self.value(a).map(|x| if x > T::zero() { x } else { T::zero() });
        let rg = self.any_grad(&[a]);
        self.push(value, rg, Op::Relu(a))
    }

    /// Concatenates along the channel axis, preserving operand order.
    pub fn concat_channels(&mut self, parts: &[Var]) -> Result<Var> {
        let first = *parts
            .first()
            .ok_or_else(|| Error::param("concat_channels: no operands"))?;
        let (n, _, sp) = self.value(first).volume_dims("concat_channels")?;
        let mut channels = 0;
        for &p in parts {
            let (pn, pc, psp) = self.value(p).volume_dims("concat_channels")?;
            if pn != n || psp != sp {
                return Err(Error::dim(format!(
                    "concat_channels: operand shape {:?} incompatible with {:?}",
                    self.value(p).shape(),
                    self.value(first).shape()
                )));
            }
            channels += pc;
        }
        let plane: usize = sp.iter().product();
        let mut data = Vec::with_capacity(n * channels * plane);
        for b in 0..n {
            for &p in parts {
                let v = self.value(p);
                let block = v.shape()[1] * plane;
                data.extend_from_slice(&v.data()[b * block..(b + 1) * block]);
            }
        }
        let value = Tensor::new(vec![n, channels, sp[0], sp[1], sp[2]], data)?;
        let rg = self.any_grad(parts);
        Ok(self.push(value, rg, Op::ConcatChannels(parts.to_vec())))
    }

    /// Softmax across channels at every voxel, max-shifted.
    pub fn softmax_channels(&mut self, input: Var) -> Result<Var> {
        let (n, c, sp) = self.value(input).volume_dims("softmax_channels")?;
        let x = self.value(input);
        if let Some(pos) = x.data().iter().position(|v| !v.is_finite()) {
            return Err(Error::Numeric(format!(
                "softmax_channels: non-finite input at flat index {pos}"
            )));
        }
        let data = kernels::softmax_forward(x.data(), n, c, sp.iter().product());
        let value = Tensor::new(x.shape().to_vec(), data)?;
        let rg = self.any_grad(&[input]);
        Ok(self.push(value, rg, Op::Softmax(input)))
    }

    /// Per-sample, per-channel normalization over the spatial axes (no affine).
    pub fn instance_norm(&mut self, input: Var, eps: T) -> Result<Var> {
        let (n, c, _) = self.value(input).volume_dims("instance_norm")?;
        let x = self.value(input);
        let (data, inv_std) = kernels::instance_norm_forward(x.data(), n * c, eps);
        let value = Tensor::new(x.shape().to_vec(), data)?;
        let rg = self.any_grad(&[input]);
        Ok(self.push(value, rg, Op::InstanceNorm { input, inv_std }))
    }

    /// Sum of all elements, as a scalar.
    pub fn sum(&mut self, a: Var) -> Var {
        let total = self.value(a).data().iter().fold(T::zero(), |acc, &v| acc + v);
        let rg = self.any_grad(&[a]);
        self.push(Tensor::scalar(total), rg, Op::Sum(a))
    }

    /// Records an externally computed value together with its backward rule.
    pub fn custom(&mut self, inputs: &[Var], value: Tensor<T>, rule: Box<dyn BackwardRule<T>>) -> Var {
        let rg = self.any_grad(inputs);
        self.push(
            value,
            rg,
            Op::Custom {
                inputs: inputs.to_vec(),
                rule,
            },
        )
    }

    /// Reverse sweep from a scalar `loss`. Afterwards every node that requires
    /// grad and feeds `loss` carries `d loss / d node`; all others carry none.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if !self.value(loss).is_scalar() {
            return Err(Error::Contract(format!(
                "backward: loss must be a scalar, got shape {:?}",
                self.value(loss).shape()
            )));
        }
        if !self.requires_grad(loss) {
            return Err(Error::Contract(
                "backward: loss does not depend on any tracked tensor".into(),
            ));
        }
        let mut grads: Vec<Option<Vec<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(vec![T::one()]);
        for id in (0..=loss.0).rev() {
            let Some(gy) = grads[id].take() else { continue };
            let contributions = self.input_grads(id, &gy);
            grads[id] = Some(gy);
            for (var, g) in contributions {
                if !self.nodes[var.0].requires_grad {
                    continue;
                }
                match &mut grads[var.0] {
                    Some(acc) => {
                        for (a, v) in acc.iter_mut().zip(g) {
                            *a = *a + v;
                        }
                    }
                    slot @ None => *slot = Some(g),
                }
            }
        }
        for (node, g) in self.nodes.iter_mut().zip(grads) {
            node.grad = match g {
                Some(g) if node.requires_grad => Some(Tensor::new(node.value.shape().to_vec(), g)?),
                _ => None,
            };
        }
        Ok(())
    }

    fn input_grads(&self, id: usize, gy: &[T]) -> Vec<(Var, Vec<T>)> {
        let node = &self.nodes[id];
        let rg = |v: Var| self.nodes[v.0].requires_grad;
        let val = |v: Var| &self.nodes[v.0].value;
        match &node.op {
            Op::Leaf => Vec::new(),
            Op::Conv3d {
                input,
                weight,
                bias,
                geom,
            } => {
                let (gx, gw, gb) = kernels::conv3d_backward(
                    val(*input).data(),
                    val(*weight).data(),
                    gy,
                    geom,
                    rg(*input),
                    rg(*weight),
                    bias.is_some_and(rg),
                );
                let gx = gx.map(|mut gx| {
                    if self.fault == Some(Fault::Conv3dBackward) {
                        let skew = T::lit(1.01);
                        gx.iter_mut().for_each(|v| *v = *v * skew);
                    }
                    gx
                });
                let mut out = Vec::with_capacity(3);
                out.extend(gx.map(|g| (*input, g)));
                out.extend(gw.map(|g| (*weight, g)));
                if let (Some(b), Some(g)) = (bias, gb) {
                    out.push((*b, g));
                }
                out
            }
            Op::Add(a, b) => vec![(*a, gy.to_vec()), (*b, gy.to_vec())],
            Op::Mul(a, b) => {
                let (va, vb) = (val(*a).data(), val(*b).data());
                let mut out = Vec::with_capacity(2);
                if rg(*a) {
                    out.push((*a, gy.iter().zip(vb).map(|(&g, &y)| g * y).collect()));
                }
                if rg(*b) {
                    out.push((*b, gy.iter().zip(va).map(|(&g, &x)| g * x).collect()));
                }
                out
            }
            Op::Scale(a, factor) => vec![(*a, gy.iter().map(|&g| g * *factor).collect())],
            Op::Relu(a) => {
                let y = node.value.data();
                let g = gy
                    .iter()
                    .zip(y)
                    .map(|(&g, &yv)| if yv > T::zero() { g } else { T::zero() })
                    .collect();
                vec![(*a, g)]
            }
            Op::ConcatChannels(parts) => {
                let shape = node.value.shape();
                let (n, total_c) = (shape[0], shape[1]);
                let plane: usize = shape[2..].iter().product();
                let mut c0 = 0;
                let mut out = Vec::with_capacity(parts.len());
                for &p in parts {
                    let pc = val(p).shape()[1];
                    if rg(p) {
                        let mut g = Vec::with_capacity(n * pc * plane);
                        for b in 0..n {
                            let start = (b * total_c + c0) * plane;
                            g.extend_from_slice(&gy[start..start + pc * plane]);
                        }
                        out.push((p, g));
                    }
                    c0 += pc;
                }
                out
            }
            Op::Upsample { input, factor } => {
                let s = val(*input).shape();
                let g = kernels::upsample_backward(gy, s[0] * s[1], [s[2], s[3], s[4]], *factor);
                vec![(*input, g)]
            }
            Op::InstanceNorm { input, inv_std } => {
                vec![(*input, kernels::instance_norm_backward(node.value.data(), gy, inv_std))]
            }
            Op::Softmax(input) => {
                let s = node.value.shape();
                let g = kernels::softmax_backward(node.value.data(), gy, s[0], s[1], s[2..].iter().product());
                vec![(*input, g)]
            }
            Op::Sum(a) => vec![(*a, vec![gy[0]; val(*a).len()])],
            Op::Custom { inputs, rule } => {
                let ins: Vec<&Tensor<T>> = inputs.iter().map(|&v| val(v)).collect();
                rule.backward(&ins, &node.value, gy)
                    .into_iter()
                    .zip(inputs)
                    .filter_map(|(g, &v)| g.map(|g| (v, g)))
                    .collect()
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn vol(shape: [usize; 5], data: Vec<f64>) -> Tensor<f64> {
        Tensor::new(shape.to_vec(), data).unwrap()
    }

    #[test]
    fn conv_unit_case() {
        let mut g = Graph::new();
        let x = g.constant(vol([1; 5], vec![5.0]));
        let w = g.constant(vol([1; 5], vec![2.0]));
        let y = g.conv3d(x, w, None, 1, 0).unwrap();
        assert_eq!(g.value(y).data(), &[10.0]);
    }

    #[test]
    fn conv_counts_overlapping_ones() {
        let mut g = Graph::new();
        let x = g.constant(Tensor::full(&[1, 1, 3, 3, 3], 1.0f64));
        let w = g.constant(Tensor::full(&[1, 1, 3, 3, 3], 1.0f64));
        let y = g.conv3d(x, w, None, 1, 1).unwrap();
        let out = g.value(y);
        assert_eq!(out.shape(), &[1, 1, 3, 3, 3]);
        assert_eq!(out.at(&[0, 0, 1, 1, 1]), 27.0);
        assert_eq!(out.at(&[0, 0, 0, 0, 0]), 8.0);
        assert_eq!(out.at(&[0, 0, 0, 1, 1]), 18.0);
    }

    #[test]
    fn conv_rejects_channel_mismatch_and_empty_output() {
        let mut g = Graph::new();
        let x = g.constant(Tensor::zeros(&[1, 2, 3, 3, 3]));
        let w = g.constant(Tensor::<f64>::zeros(&[1, 3, 3, 3, 3]));
        assert!(matches!(g.conv3d(x, w, None, 1, 1), Err(Error::Dimension(_))));
        let w5 = g.constant(Tensor::<f64>::zeros(&[1, 2, 5, 5, 5]));
        assert!(matches!(g.conv3d(x, w5, None, 1, 0), Err(Error::Dimension(_))));
    }

    #[test]
    fn pointwise_is_linear_combination() {
        let mut g = Graph::new();
        let x = g.constant(Tensor::from_fn(&[1, 2, 2, 1, 1], |i| (i + 1) as f64));
        let w = g.constant(vol([1, 2, 1, 1, 1], vec![3.0, -1.0]));
        let y = g.pointwise_conv(x, w, None).unwrap();
        // channel 0 = [1, 2], channel 1 = [3, 4]
        assert_eq!(g.value(y).data(), &[3.0 * 1.0 - 3.0, 3.0 * 2.0 - 4.0]);
    }

    #[test]
    fn upsample_replicates() {
        let mut g = Graph::new();
        let x = g.param(vol([1; 5], vec![3.0]));
        let y = g.upsample_nearest3d(x, 2).unwrap();
        assert_eq!(g.value(y).shape(), &[1, 1, 2, 2, 2]);
        assert!(g.value(y).data().iter().all(|&v| v == 3.0));
        let s = g.sum(y);
        g.backward(s).unwrap();
        assert_eq!(g.grad(x).unwrap().data(), &[8.0]);
        assert!(matches!(g.upsample_nearest3d(x, 0), Err(Error::Parameter(_))));
    }

    #[test]
    fn concat_preserves_order() {
        let mut g = Graph::new();
        let a = g.constant(Tensor::full(&[1, 2, 1, 1, 2], 1.0f64));
        let b = g.constant(Tensor::full(&[1, 3, 1, 1, 2], 2.0f64));
        let c = g.concat_channels(&[a, b]).unwrap();
        assert_eq!(g.value(c).shape(), &[1, 5, 1, 1, 2]);
        assert_eq!(g.value(c).data(), &[1.0, 1.0, 1.0, 1.0, 2.0, 2.0, 2.0, 2.0, 2.0, 2.0]);
        let bad = g.constant(Tensor::full(&[1, 1, 2, 1, 2], 0.0f64));
        assert!(g.concat_channels(&[a, bad]).is_err());
    }

    #[test]
    fn mul_by_zeros_and_shape_checks() {
        let mut g = Graph::new();
        let a = g.constant(Tensor::from_fn(&[2, 3], |i| i as f64 + 1.0));
        let z = g.constant(Tensor::zeros(&[2, 3]));
        let p = g.mul(a, z).unwrap();
        assert!(g.value(p).data().iter().all(|&v| v == 0.0));
        let other = g.constant(Tensor::zeros(&[3, 2]));
        assert!(matches!(g.add(a, other), Err(Error::Dimension(_))));
    }

    #[test]
    fn sum_of_squares_gradient() {
        let mut g = Graph::new();
        let x = g.param(Tensor::new(vec![3], vec![1.0, -2.0, 0.5]).unwrap());
        let sq = g.mul(x, x).unwrap();
        let loss = g.sum(sq);
        g.backward(loss).unwrap();
        assert_eq!(g.grad(x).unwrap().data(), &[2.0, -4.0, 1.0]);
    }

    #[test]
    fn branches_accumulate() {
        let mut g = Graph::new();
        let x = g.param(Tensor::new(vec![2], vec![1.0, 2.0]).unwrap());
        let a = g.scale(x, 3.0);
        let b = g.scale(x, 5.0);
        let s = g.add(a, b).unwrap();
        let loss = g.sum(s);
        g.backward(loss).unwrap();
        assert_eq!(g.grad(x).unwrap().data(), &[8.0, 8.0]);
    }

    #[test]
    fn relu_zero_subgradient() {
        let mut g = Graph::new();
        let x = g.param(Tensor::new(vec![3], vec![-1.0, 0.0, 2.0]).unwrap());
        let r = g.relu(x);
        let loss = g.sum(r);
        g.backward(loss).unwrap();
        assert_eq!(g.grad(x).unwrap().data(), &[0.0, 0.0, 1.0]);
    }

    #[test]
    fn backward_requires_scalar() {
        let mut g = Graph::new();
        let x = g.param(Tensor::<f64>::zeros(&[2]));
        assert!(matches!(g.backward(x), Err(Error::Contract(_))));
    }

    #[test]
    fn softmax_symmetry_and_overflow() {
        let mut g = Graph::new();
        let x = g.constant(Tensor::full(&[1, 4, 1, 1, 1], 7.0f64));
        let y = g.softmax_channels(x).unwrap();
        assert!(g.value(y).data().iter().all(|&v| (v - 0.25).abs() < 1e-15));

        let x = g.constant(vol([1, 2, 1, 1, 1], vec![1000.0, 0.0]));
        let y = g.softmax_channels(x).unwrap();
        let d = g.value(y).data();
        assert!((d[0] - 1.0).abs() < 1e-12 && d[1] >= 0.0 && d[1] < 1e-300);

        let x = g.constant(vol([1, 2, 1, 1, 1], vec![f64::NAN, 0.0]));
        assert!(matches!(g.softmax_channels(x), Err(Error::Numeric(_))));
    }

    #[test]
    fn instance_norm_zero_mean_unit_var() {
        let mut g = Graph::new();
        let x = g.constant(Tensor::from_fn(&[1, 2, 2, 2, 2], |i| (i * i) as f64));
        let y = g.instance_norm(x, 0.0).unwrap();
        for plane in g.value(y).data().chunks(8) {
            let mean: f64 = plane.iter().sum::<f64>() / 8.0;
            let var: f64 = plane.iter().map(|v| v * v).sum::<f64>() / 8.0;
            assert!(mean.abs() < 1e-12);
            assert!((var - 1.0).abs() < 1e-12);
        }
    }
}
