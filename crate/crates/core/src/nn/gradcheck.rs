//! Finite-difference verification of every graph operation.
//!
//! Each case builds a small graph from random inputs, reduces its output to
//! `Σ out ⊙ R` for a fixed random `R`, and compares the analytic gradient of
//! every input against central differences. The error is the norm-wise
//! relative error `‖analytic - numeric‖ / max(‖analytic‖, ‖numeric‖)`.

use super::gaussian::{kl_diag_gaussian, reparameterize, DiagGaussianLatent};
use super::graph::{Graph, NodeId, Padding};
use crate::error::Result;
use crate::real::Real;
use crate::rng::Rng;
use crate::tensor::Tensor;
use alloc::vec::Vec;

/// Central-difference step in 32-bit mode.
pub const STEP_F32: f64 = 1e-3;
/// Central-difference step in 64-bit mode.
pub const STEP_F64: f64 = 1e-5;
pub const TOL_F32: f64 = 1e-3;
pub const TOL_F64: f64 = 1e-6;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Case {
    Conv2dSame,
    Conv2dStride2,
    Conv2dValid,
    Upsample2x,
    Linear,
    Swish,
    LeakyRelu,
    Relu,
    Tanh,
    Exp,
    Abs,
    Square,
    Sqrt,
    Clamp,
    Scale,
    GroupNorm,
    Add,
    Sub,
    Mul,
    Div,
    MulBcastChannels,
    AddVecBcast,
    ConcatChannels,
    SliceChannels,
    SumChannels,
    Sum,
    Mean,
    L1,
    L2,
    PositionGram,
    GatherPositions,
    Reparameterize,
    Kl,
    Composite,
}

pub const ALL_CASES: &[Case] = &[
    Case::Conv2dSame,
    Case::Conv2dStride2,
    Case::Conv2dValid,
    Case::Upsample2x,
    Case::Linear,
    Case::Swish,
    Case::LeakyRelu,
    Case::Relu,
    Case::Tanh,
    Case::Exp,
    Case::Abs,
    Case::Square,
    Case::Sqrt,
    Case::Clamp,
    Case::Scale,
    Case::GroupNorm,
    Case::Add,
    Case::Sub,
    Case::Mul,
    Case::Div,
    Case::MulBcastChannels,
    Case::AddVecBcast,
    Case::ConcatChannels,
    Case::SliceChannels,
    Case::SumChannels,
    Case::Sum,
    Case::Mean,
    Case::L1,
    Case::L2,
    Case::PositionGram,
    Case::GatherPositions,
    Case::Reparameterize,
    Case::Kl,
    Case::Composite,
];

#[derive(Clone, Copy)]
enum Init {
    Uniform,
    /// Uniform with `|v| >= 0.1`, keeping kinks out of the stencil.
    AwayFromZero,
    Positive,
}

impl Case {
    pub fn name(self) -> &'static str {
        match self {
            Case::Conv2dSame => "conv2d(stride 1, same)",
            Case::Conv2dStride2 => "conv2d(stride 2, same)",
            Case::Conv2dValid => "conv2d(stride 1, valid)",
            Case::Upsample2x => "nearest_upsample2x",
            Case::Linear => "linear",
            Case::Swish => "swish",
            Case::LeakyRelu => "leaky_relu(0.2)",
            Case::Relu => "relu",
            Case::Tanh => "tanh",
            Case::Exp => "exp",
            Case::Abs => "abs",
            Case::Square => "square",
            Case::Sqrt => "sqrt",
            Case::Clamp => "clamp",
            Case::Scale => "scale",
            Case::GroupNorm => "group_norm",
            Case::Add => "add",
            Case::Sub => "sub",
            Case::Mul => "mul",
            Case::Div => "div",
            Case::MulBcastChannels => "mul_bcast_channels",
            Case::AddVecBcast => "add_vec_bcast",
            Case::ConcatChannels => "concat_channels",
            Case::SliceChannels => "slice_channels",
            Case::SumChannels => "sum_channels",
            Case::Sum => "sum",
            Case::Mean => "mean_reduce",
            Case::L1 => "l1",
            Case::L2 => "l2",
            Case::PositionGram => "position_gram",
            Case::GatherPositions => "gather_positions",
            Case::Reparameterize => "reparameterize",
            Case::Kl => "kl_diag_gaussian",
            Case::Composite => "3-layer composite",
        }
    }

    fn inputs(self) -> Vec<(Vec<usize>, Init)> {
        use Init::*;
        let v = |s: &[usize], i: Init| (s.to_vec(), i);
        match self {
            Case::Conv2dSame => alloc::vec![v(&[2, 2, 4, 4], Uniform), v(&[3, 2, 3, 3], Uniform), v(&[3], Uniform)],
            Case::Conv2dStride2 => alloc::vec![v(&[1, 2, 6, 6], Uniform), v(&[2, 2, 3, 3], Uniform), v(&[2], Uniform)],
            Case::Conv2dValid => alloc::vec![v(&[1, 2, 5, 4], Uniform), v(&[2, 2, 3, 3], Uniform), v(&[2], Uniform)],
            Case::Upsample2x => alloc::vec![v(&[1, 2, 2, 3], Uniform)],
            Case::Linear => alloc::vec![v(&[2, 5], Uniform), v(&[3, 5], Uniform), v(&[3], Uniform)],
            Case::Swish | Case::Tanh | Case::Exp | Case::Square | Case::Scale => alloc::vec![v(&[1, 2, 2, 3], Uniform)],
            Case::LeakyRelu | Case::Relu | Case::Abs | Case::Clamp => alloc::vec![v(&[1, 2, 2, 3], AwayFromZero)],
            Case::Sqrt => alloc::vec![v(&[1, 2, 2, 3], Positive)],
            Case::GroupNorm => alloc::vec![v(&[2, 4, 2, 2], Uniform), v(&[4], Uniform), v(&[4], Uniform)],
            Case::Add | Case::Sub | Case::Mul => alloc::vec![v(&[1, 2, 2, 3], Uniform), v(&[1, 2, 2, 3], Uniform)],
            Case::Div => alloc::vec![v(&[1, 2, 2, 3], Uniform), v(&[1, 2, 2, 3], Positive)],
            Case::MulBcastChannels => alloc::vec![v(&[2, 3, 2, 2], Uniform), v(&[2, 1, 2, 2], Uniform)],
            Case::AddVecBcast => alloc::vec![v(&[2, 3, 2, 2], Uniform), v(&[2, 3], Uniform)],
            Case::ConcatChannels => alloc::vec![v(&[2, 1, 2, 2], Uniform), v(&[2, 2, 2, 2], Uniform)],
            Case::SliceChannels | Case::SumChannels => alloc::vec![v(&[2, 3, 2, 2], Uniform)],
            Case::Sum | Case::Mean => alloc::vec![v(&[1, 2, 2, 3], Uniform)],
            Case::L1 => alloc::vec![v(&[1, 2, 2, 3], Uniform), v(&[1, 2, 2, 3], AwayFromZero)],
            Case::L2 => alloc::vec![v(&[1, 2, 2, 3], Uniform), v(&[1, 2, 2, 3], Uniform)],
            Case::PositionGram | Case::GatherPositions => alloc::vec![v(&[2, 3, 2, 2], Uniform)],
            Case::Reparameterize | Case::Kl => alloc::vec![v(&[1, 2, 2, 3], Uniform), v(&[1, 2, 2, 3], Uniform)],
            Case::Composite => alloc::vec![v(&[2, 2, 4, 4], Uniform), v(&[4, 2, 3, 3], Uniform), v(&[4], Uniform), v(&[4], Positive), v(&[4], Uniform), v(&[2, 4, 3, 3], Uniform), v(&[2], Uniform), v(&[2, 2, 2, 2], Uniform)],
        }
    }

    fn build<T: Real>(self, g: &mut Graph<T>, x: &[NodeId]) -> Result<NodeId> {
        Ok(match self {
            Case::Conv2dSame => g.conv2d(x[0], x[1], Some(x[2]), 1, Padding::Same)?,
            Case::Conv2dStride2 => g.conv2d(x[0], x[1], Some(x[2]), 2, Padding::Same)?,
            Case::Conv2dValid => g.conv2d(x[0], x[1], Some(x[2]), 1, Padding::Valid)?,
            Case::Upsample2x => g.upsample2x(x[0])?,
            Case::Linear => g.linear(x[0], x[1], Some(x[2]))?,
            Case::Swish => g.swish(x[0]),
            Case::LeakyRelu => g.leaky_relu(x[0], 0.2),
            Case::Relu => g.relu(x[0]),
            Case::Tanh => g.tanh(x[0]),
            Case::Exp => g.exp(x[0]),
            Case::Abs => g.abs(x[0]),
            Case::Square => g.square(x[0]),
            Case::Sqrt => g.sqrt(x[0]),
            Case::Clamp => g.clamp(x[0], -2.0, 0.05),
            Case::Scale => g.scale(x[0], -1.7),
            Case::GroupNorm => g.group_norm(x[0], x[1], x[2], 2, 1e-5)?,
            Case::Add => g.add(x[0], x[1])?,
            Case::Sub => g.sub(x[0], x[1])?,
            Case::Mul => g.mul(x[0], x[1])?,
            Case::Div => g.div(x[0], x[1])?,
            Case::MulBcastChannels => g.mul_bcast_channels(x[0], x[1])?,
            Case::AddVecBcast => g.add_vec_bcast(x[0], x[1])?,
            Case::ConcatChannels => g.concat_channels(x[0], x[1])?,
            Case::SliceChannels => g.slice_channels(x[0], 1, 2)?,
            Case::SumChannels => g.sum_channels(x[0])?,
            Case::Sum => g.sum(x[0]),
            Case::Mean => g.mean(x[0]),
            Case::L1 => g.l1(x[0], x[1])?,
            Case::L2 => g.mse(x[0], x[1])?,
            Case::PositionGram => g.position_gram(x[0])?,
            Case::GatherPositions => g.gather_positions(x[0], &[3, 0, 3])?,
            Case::Reparameterize => {
                let mut lat = DiagGaussianLatent::from_parts(g, x[0], x[1]);
                reparameterize(g, &mut lat, &mut Rng::new(77))?
            }
            Case::Kl => {
                let lat = DiagGaussianLatent::from_parts(g, x[0], x[1]);
                kl_diag_gaussian(g, &lat)?
            }
            Case::Composite => {
                // conv -> group_norm -> swish -> strided conv -> tanh, against a target
                let h = g.conv2d(x[0], x[1], Some(x[2]), 1, Padding::Same)?;
                let h = g.group_norm(h, x[3], x[4], 2, 1e-5)?;
                let h = g.swish(h);
                let h = g.conv2d(h, x[5], Some(x[6]), 2, Padding::Same)?;
                let h = g.tanh(h);
                g.mse(h, x[7])?
            }
        })
    }
}

fn sample_inputs(case: Case, rng: &mut Rng) -> Vec<Tensor<f64>> {
    let mut ins: Vec<Tensor<f64>> = case.inputs()
        .into_iter()
        .map(|(shape, init)| {
            let t: Tensor<f64> = rng.uniform_tensor(&shape, -1.0, 1.0);
            match init {
                Init::Uniform => t,
                Init::AwayFromZero => t.map(|v| if v.abs() < 0.1 { v.signum() * 0.1 + v } else { v }),
                Init::Positive => t.map(|v| 0.5 + v.abs()),
            }
        })
        .collect();
    if case == Case::L1 {
        // The kink is at a == b, so use the second input as an offset from the first.
        ins[1] = ins[0].zip_map(&ins[1], |a, d| a + d).expect("same shapes");
    }
    ins
}

fn weighted_output<T: Real>(case: Case, ins: &[Tensor<T>], weights: Option<&Tensor<f64>>, want_grad: bool) -> Result<(f64, Vec<Tensor<T>>, Tensor<f64>)> {
    let mut g = Graph::<T>::new();
    let ids: Vec<NodeId> = ins.iter().map(|t| if want_grad { g.input_with_grad(t.clone()) } else { g.input(t.clone()) }).collect();
    let out = case.build(&mut g, &ids)?;
    let shape = g.shape(out).to_vec();
    let r = match weights {
        Some(r) => r.clone(),
        None => Rng::new(0xC0FFEE).uniform_tensor(&shape, -1.0, 1.0),
    };
    let val: f64 = g.value(out).data().iter().zip(r.data()).map(|(&o, &w)| o.as_f64() * w).sum();
    let mut grads = Vec::new();
    if want_grad {
        let rn = g.input(r.cast::<T>());
        let prod = g.mul(out, rn)?;
        let loss = g.sum(prod);
        let gr = g.backward(loss);
        grads = ids.iter().zip(ins).map(|(&i, t)| gr.get(i).cloned().unwrap_or_else(|| Tensor::zeros(t.shape()))).collect();
    }
    Ok((val, grads, r))
}

/// Relative gradient error of one case at precision `T` with step `h`.
pub fn check_case<T: Real>(case: Case, seed: u64, h: f64) -> Result<f64> {
    let mut rng = Rng::new(seed ^ (case as u64).wrapping_mul(0x9E37));
    let base = sample_inputs(case, &mut rng);
    let ins: Vec<Tensor<T>> = base.iter().map(|t| t.cast()).collect();
    let (_, analytic, r) = weighted_output(case, &ins, None, true)?;
    let (mut diff2, mut a2, mut n2) = (0.0f64, 0.0f64, 0.0f64);
    for k in 0..ins.len() {
        for e in 0..ins[k].len() {
            let mut up = ins.clone();
            up[k].data_mut()[e] += T::of(h);
            let mut dn = ins.clone();
            dn[k].data_mut()[e] -= T::of(h);
            let real_h = (up[k].data()[e] - dn[k].data()[e]).as_f64();
            let (fu, _, _) = weighted_output(case, &up, Some(&r), false)?;
            let (fd, _, _) = weighted_output(case, &dn, Some(&r), false)?;
            let num = (fu - fd) / real_h;
            let an = analytic[k].data()[e].as_f64();
            diff2 += (an - num) * (an - num);
            a2 += an * an;
            n2 += num * num;
        }
    }
    let denom = libm::sqrt(a2.max(n2));
    Ok(if denom == 0.0 { 0.0 } else { libm::sqrt(diff2) / denom })
}

#[derive(Clone, Debug, PartialEq)]
pub struct CheckResult {
    pub name: &'static str,
    pub rel_err_f32: f64,
    pub rel_err_f64: f64,
}

impl CheckResult {
    pub fn passed(&self) -> bool {
        self.rel_err_f32 < TOL_F32 && self.rel_err_f64 < TOL_F64
    }
}

/// Run every case in both precisions.
pub fn run_suite(seed: u64) -> Result<Vec<CheckResult>> {
    ALL_CASES
        .iter()
        .map(|&c| {
            Ok(CheckResult {
                name: c.name(),
                rel_err_f32: check_case::<f32>(c, seed, STEP_F32)?,
                rel_err_f64: check_case::<f64>(c, seed, STEP_F64)?,
            })
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn every_case_passes_both_precisions() {
        for seed in 0..20 {
            for r in run_suite(seed).unwrap() {
                assert!(r.passed(), "seed {seed}: {r:?}");
            }
        }
    }
}
