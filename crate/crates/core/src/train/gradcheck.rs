//! Central finite-difference gradient checks on f64 shadow copies.
//!
//! Every check uses the scalar objective `L = ⟨output, R⟩` with a seeded
//! random `R`, so the analytic gradients come from a backward pass with
//! `R` as the upstream gradient.

use std::fmt;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::conv::{conv3d_backward, conv3d_forward, tconv3d_backward, tconv3d_forward, ConvKernel, ConvSpec};
use crate::error::Result;
use crate::net::Model;
use crate::qru::{QruUnit, UnitParams};
use crate::tensor::{FeatureTensor, Shape};

pub const FD_EPSILON: f64 = 1e-3;
/// Magnitude below which errors are measured absolutely rather than relatively.
pub const REL_FLOOR: f64 = 1e-4;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroupReport {
    pub name: String,
    pub count: usize,
    pub max_rel_error: f64,
    pub max_abs_error: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GradCheckReport {
    pub tolerance: f64,
    pub groups: Vec<GroupReport>,
}

impl GradCheckReport {
    pub fn max_rel_error(&self) -> f64 {
        self.groups.iter().map(|g| g.max_rel_error).fold(0.0, f64::max)
    }

    pub fn passed(&self) -> bool {
        self.groups.iter().all(|g| g.max_rel_error <= self.tolerance)
    }
}

impl fmt::Display for GradCheckReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for g in &self.groups {
            let mark = if g.max_rel_error <= self.tolerance { "ok  " } else { "FAIL" };
            writeln!(f, "{mark} {:<28} n={:<6} rel={:.3e} abs={:.3e}", g.name, g.count, g.max_rel_error, g.max_abs_error)?;
        }
        write!(f, "max relative error {:.3e} (tolerance {:.1e})", self.max_rel_error(), self.tolerance)
    }
}

pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(REL_FLOOR)
}

/// Compare `analytic` against central differences of `loss` around `params`.
pub fn check_gradients(
    names: &[String],
    params: &[Vec<f64>],
    analytic: &[Vec<f64>],
    tolerance: f64,
    mut loss: impl FnMut(&[Vec<f64>]) -> Result<f64>,
) -> Result<GradCheckReport> {
    let mut work = params.to_vec();
    let mut groups = Vec::with_capacity(params.len());
    for g in 0..params.len() {
        let (mut rel, mut abs) = (0.0f64, 0.0f64);
        for i in 0..params[g].len() {
            let x = params[g][i];
            work[g][i] = x + FD_EPSILON;
            let up = loss(&work)?;
            work[g][i] = x - FD_EPSILON;
            let down = loss(&work)?;
            work[g][i] = x;
            let numeric = (up - down) / (2.0 * FD_EPSILON);
            let a = analytic[g][i];
            rel = rel.max(relative_error(a, numeric));
            abs = abs.max((a - numeric).abs());
        }
        groups.push(GroupReport { name: names[g].clone(), count: params[g].len(), max_rel_error: rel, max_abs_error: abs });
    }
    Ok(GradCheckReport { tolerance, groups })
}

fn projection(shape: Shape, seed: u64) -> FeatureTensor<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    FeatureTensor::from_fn(shape, |_| StandardNormal.sample(&mut rng))
}

fn unit_tensor_names(prefix: &str, params: &UnitParams<f64>) -> Vec<String> {
    let banks: Vec<&str> = match params {
        UnitParams::Gated { reverse: None, .. } => vec!["wz", "wf"],
        UnitParams::Gated { reverse: Some(_), .. } => vec!["wz", "wf", "rev.wz", "rev.wf"],
        UnitParams::Plain(_) => vec!["w"],
    };
    banks.iter().flat_map(|b| [format!("{prefix}{b}.weight"), format!("{prefix}{b}.bias")]).collect()
}

fn load(dst: Vec<&mut [f64]>, src: &[Vec<f64>]) {
    for (d, s) in dst.into_iter().zip(src) {
        d.copy_from_slice(s);
    }
}

/// Check a plain (linear) convolution, or a transposed one when
/// `output_padding` is given. The objective is linear in every input.
pub fn grad_check_conv(
    input: &FeatureTensor<f32>,
    kernel: &ConvKernel<f32>,
    spec: &ConvSpec,
    output_padding: Option<[usize; 3]>,
    tolerance: f64,
    seed: u64,
) -> Result<GradCheckReport> {
    let x = input.cast::<f64>();
    let k = kernel.cast::<f64>();
    let run = |x: &FeatureTensor<f64>, k: &ConvKernel<f64>| match output_padding {
        Some(op) => tconv3d_forward(x, k, spec, op),
        None => conv3d_forward(x, k, spec),
    };
    let r = projection(run(&x, &k)?.shape(), seed);
    let grads = match output_padding {
        Some(op) => tconv3d_backward(&x, &k, spec, op, &r)?,
        None => conv3d_backward(&x, &k, spec, &r)?,
    };
    let names = ["weight", "bias", "input"].map(String::from);
    let params = vec![k.weights.clone(), k.bias.clone(), x.data().to_vec()];
    let analytic = vec![grads.grad_kernel.weights, grads.grad_kernel.bias, grads.grad_input.into_vec()];
    check_gradients(&names, &params, &analytic, tolerance, |p| {
        let mut k2 = k.clone();
        k2.weights.copy_from_slice(&p[0]);
        k2.bias.copy_from_slice(&p[1]);
        let x2 = FeatureTensor::from_vec(x.shape(), p[2].clone())?;
        run(&x2, &k2)?.dot(&r)
    })
}

/// Check one unit's parameter and input gradients.
pub fn grad_check_unit(unit: &QruUnit<f32>, input: &FeatureTensor<f32>, tolerance: f64, seed: u64) -> Result<GradCheckReport> {
    let u = unit.cast::<f64>();
    let x = input.cast::<f64>();
    let (out, trace) = u.forward_traced(&x)?;
    let r = projection(out.shape(), seed);
    let (gin, gp) = u.backward(&trace, &r)?;
    let mut names = unit_tensor_names("", &u.params);
    names.push("input".into());
    let mut params: Vec<Vec<f64>> = u.params.tensors().iter().map(|t| t.to_vec()).collect();
    params.push(x.data().to_vec());
    let mut analytic: Vec<Vec<f64>> = gp.tensors().iter().map(|t| t.to_vec()).collect();
    analytic.push(gin.into_vec());
    let n = params.len() - 1;
    check_gradients(&names, &params, &analytic, tolerance, |p| {
        let mut u2 = u.clone();
        load(u2.params.tensors_mut(), &p[..n]);
        let x2 = FeatureTensor::from_vec(x.shape(), p[n].clone())?;
        u2.forward(&x2)?.dot(&r)
    })
}

/// Check every parameter tensor of a whole network plus its input gradient.
pub fn grad_check_model(model: &Model<f32>, input: &FeatureTensor<f32>, tolerance: f64, seed: u64) -> Result<GradCheckReport> {
    let m = model.cast::<f64>();
    let x = input.cast::<f64>();
    let out = m.forward(&x, true)?;
    let r = projection(out.output.shape(), seed);
    let grads = m.backward(out.trace.as_ref(), &r)?;
    let mut names: Vec<String> = m
        .units
        .iter()
        .enumerate()
        .flat_map(|(l, u)| unit_tensor_names(&format!("layer{l}."), &u.params))
        .collect();
    names.push("input".into());
    let mut params: Vec<Vec<f64>> = m.tensors().iter().map(|t| t.to_vec()).collect();
    params.push(x.data().to_vec());
    let mut analytic: Vec<Vec<f64>> = grads.tensors().iter().map(|t| t.to_vec()).collect();
    analytic.push(grads.input.into_vec());
    let n = params.len() - 1;
    check_gradients(&names, &params, &analytic, tolerance, |p| {
        let mut m2 = m.clone();
        load(m2.tensors_mut(), &p[..n]);
        let x2 = FeatureTensor::from_vec(x.shape(), p[n].clone())?;
        m2.predict(&x2)?.dot(&r)
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn detects_a_corrupted_gradient() {
        let params = vec![vec![0.3, -1.2, 2.0]];
        let loss = |p: &[Vec<f64>]| Ok(p[0].iter().map(|v| v * v * v).sum::<f64>());
        let exact: Vec<Vec<f64>> = vec![params[0].iter().map(|v| 3.0 * v * v).collect()];
        let names = vec!["cubic".to_string()];
        assert!(check_gradients(&names, &params, &exact, 1e-3, loss).unwrap().passed());
        let mut bad = exact.clone();
        bad[0][1] *= 1.1;
        let report = check_gradients(&names, &params, &bad, 1e-3, loss).unwrap();
        assert!(!report.passed());
        assert!((report.max_rel_error() - 0.1 / 1.1).abs() < 1e-3);
    }
}
