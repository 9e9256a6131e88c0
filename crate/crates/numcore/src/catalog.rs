//! Enumerates the differentiable primitives and gives each a scalar probe
//! function so the whole set can be swept by [`crate::grad_check`].

use crate::error::Result;
use crate::graph::{Graph, Var};
use crate::real::Real;
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Primitive {
    Add,
    Sub,
    Mul,
    Div,
    Affine,
    Exp,
    Log,
    Relu,
    Sqrt,
    Softplus,
    Clamp,
    MatMul,
    Transpose,
    Reshape,
    Conv2d,
    AvgPool2d,
    GlobalAvgPool,
    ResizeBilinear,
    Concat,
    Sum,
    Mean,
    L2Norm,
    LogSumExp,
    InstanceStats,
}

const ALL: [Primitive; 24] = [
    Primitive::Add,
    Primitive::Sub,
    Primitive::Mul,
    Primitive::Div,
    Primitive::Affine,
    Primitive::Exp,
    Primitive::Log,
    Primitive::Relu,
    Primitive::Sqrt,
    Primitive::Softplus,
    Primitive::Clamp,
    Primitive::MatMul,
    Primitive::Transpose,
    Primitive::Reshape,
    Primitive::Conv2d,
    Primitive::AvgPool2d,
    Primitive::GlobalAvgPool,
    Primitive::ResizeBilinear,
    Primitive::Concat,
    Primitive::Sum,
    Primitive::Mean,
    Primitive::L2Norm,
    Primitive::LogSumExp,
    Primitive::InstanceStats,
];

/// Every primitive that has both a forward and a backward rule.
pub fn diff_primitive_set() -> &'static [Primitive] {
    &ALL
}

/// Deterministic non-trivial weights for probe reductions and fixed operands.
fn pattern<T: Real>(shape: &[usize], phase: f64, offset: f64) -> Tensor<T> {
    Tensor::from_fn(shape.to_vec(), |i| T::lit((1.37 * i as f64 + phase).sin() + offset))
}

/// `Σ w ⊙ y` with a fixed weight pattern, turning any output into a scalar.
fn weighted_sum<T: Real>(g: &mut Graph<T>, y: Var, phase: f64) -> Result<Var> {
    let w = g.constant(pattern(g.shape(y), phase, 0.2));
    let p = g.mul(y, w)?;
    g.sum(p, &[], false)
}

impl Primitive {
    pub fn name(self) -> &'static str {
        match self {
            Primitive::Add => "add",
            Primitive::Sub => "sub",
            Primitive::Mul => "mul",
            Primitive::Div => "div",
            Primitive::Affine => "affine",
            Primitive::Exp => "exp",
            Primitive::Log => "log",
            Primitive::Relu => "relu",
            Primitive::Sqrt => "sqrt",
            Primitive::Softplus => "softplus",
            Primitive::Clamp => "clamp",
            Primitive::MatMul => "matmul",
            Primitive::Transpose => "transpose",
            Primitive::Reshape => "reshape",
            Primitive::Conv2d => "conv2d",
            Primitive::AvgPool2d => "avg_pool2d",
            Primitive::GlobalAvgPool => "global_avg_pool",
            Primitive::ResizeBilinear => "resize_bilinear",
            Primitive::Concat => "concat",
            Primitive::Sum => "sum",
            Primitive::Mean => "mean",
            Primitive::L2Norm => "l2_norm",
            Primitive::LogSumExp => "logsumexp",
            Primitive::InstanceStats => "instance_stats",
        }
    }

    /// Shape of the probe input.
    pub fn probe_shape(self) -> Vec<usize> {
        match self {
            Primitive::MatMul => vec![3, 4],
            Primitive::Transpose => vec![3, 5],
            Primitive::Conv2d => vec![2, 2, 5, 5],
            Primitive::AvgPool2d
            | Primitive::GlobalAvgPool
            | Primitive::ResizeBilinear
            | Primitive::InstanceStats => vec![2, 3, 4, 5],
            _ => vec![3, 4],
        }
    }

    /// Range to draw probe points from, keeping the function smooth and defined.
    pub fn probe_domain(self) -> (f64, f64) {
        match self {
            Primitive::Div | Primitive::Log | Primitive::Sqrt => (0.5, 1.5),
            Primitive::L2Norm => (0.2, 1.0),
            _ => (-1.0, 1.0),
        }
    }

    /// Scalar function of `x` that routes gradients through this primitive,
    /// through every operand position it has.
    pub fn probe<T: Real>(self, g: &mut Graph<T>, x: Var) -> Result<Var> {
        let shape = g.shape(x).to_vec();
        let y = match self {
            Primitive::Add | Primitive::Sub | Primitive::Mul | Primitive::Div => {
                let c = g.constant(pattern(&shape, 0.4, 1.5));
                // the second term broadcasts a reduced copy of x on the right
                let row = g.mean(x, &[0], true)?;
                let lhs = g.constant(pattern(&shape, 1.1, 0.3));
                let (t1, t2) = match self {
                    Primitive::Add => (g.add(x, c)?, g.add(lhs, row)?),
                    Primitive::Sub => (g.sub(x, c)?, g.sub(lhs, row)?),
                    Primitive::Mul => (g.mul(x, c)?, g.mul(lhs, row)?),
                    _ => (g.div(x, c)?, g.div(lhs, row)?),
                };
                let a = weighted_sum(g, t1, 0.1)?;
                let b = weighted_sum(g, t2, 0.7)?;
                return g.add(a, b);
            }
            Primitive::Affine => g.affine(x, -1.7, 0.3)?,
            Primitive::Exp => g.exp(x)?,
            Primitive::Log => g.log(x)?,
            Primitive::Relu => g.relu(x)?,
            Primitive::Sqrt => g.sqrt(x)?,
            Primitive::Softplus => g.softplus(x)?,
            Primitive::Clamp => g.clamp(x, -0.5, 0.5)?,
            Primitive::MatMul => {
                let right = g.constant(pattern(&[shape[1], 2], 0.9, 0.0));
                let left = g.constant(pattern(&[2, shape[0]], 0.2, 0.0));
                let a = g.matmul(x, right)?;
                let b = g.matmul(left, x)?;
                let a = weighted_sum(g, a, 0.3)?;
                let b = weighted_sum(g, b, 0.5)?;
                return g.add(a, b);
            }
            Primitive::Transpose => g.transpose(x)?,
            Primitive::Reshape => {
                let n = shape.iter().product::<usize>();
                g.reshape(x, &[n])?
            }
            Primitive::Conv2d => {
                // x as the image, then x as the kernel with a derived bias
                let w = g.constant(pattern(&[3, shape[1], 3, 3], 0.6, 0.0));
                let a = g.conv2d(x, w, None, 2, 1)?;
                let img = g.constant(pattern(&[1, shape[1], 6, 6], 1.3, 0.0));
                let bias = g.sum(x, &[1, 2, 3], false)?;
                let b = g.conv2d(img, x, Some(bias), 1, 1)?;
                let a = weighted_sum(g, a, 0.3)?;
                let b = weighted_sum(g, b, 0.8)?;
                return g.add(a, b);
            }
            Primitive::AvgPool2d => g.avg_pool2d(x, 2, 1)?,
            Primitive::GlobalAvgPool => g.global_avg_pool(x)?,
            Primitive::ResizeBilinear => {
                let a = g.resize_bilinear(x, 7, 3)?;
                let a = weighted_sum(g, a, 0.2)?;
                let b = g.resize_bilinear(x, 2, 9)?;
                let b = weighted_sum(g, b, 0.9)?;
                return g.add(a, b);
            }
            Primitive::Concat => {
                let c = g.constant(pattern(&[shape[0], 2], 0.5, 0.0));
                g.concat(&[x, c, x], 1)?
            }
            Primitive::Sum => g.sum(x, &[1], false)?,
            Primitive::Mean => g.mean(x, &[0], true)?,
            Primitive::L2Norm => g.l2_norm(x, 1)?,
            Primitive::LogSumExp => g.logsumexp(x, 1)?,
            Primitive::InstanceStats => {
                let (m, s) = g.instance_stats(x)?;
                let a = weighted_sum(g, m, 0.4)?;
                let b = weighted_sum(g, s, 1.2)?;
                return g.add(a, b);
            }
        };
        weighted_sum(g, y, 0.0)
    }
}
