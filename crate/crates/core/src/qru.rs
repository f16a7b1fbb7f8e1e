//! The 3D quasi-recurrent unit: a gated 3D convolution followed by
//! f-pooling along the band axis, plus the ablation variants.

use std::fmt;

use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::conv::{
    activate, activate_grad, conv3d_backward, conv3d_forward, tconv3d_backward, tconv3d_forward,
    Activation, ConvGrads, ConvKernel, ConvSpec, KernelShape,
};
use crate::error::{config_err, dim_err, Error, Result};
use crate::tensor::{FeatureTensor, Scalar};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Direction {
    Forward,
    Backward,
    Bidirectional,
}

impl Direction {
    pub fn tag(self) -> u8 {
        match self {
            Direction::Forward => 0,
            Direction::Backward => 1,
            Direction::Bidirectional => 2,
        }
    }

    pub fn from_tag(tag: u8) -> Option<Self> {
        match tag {
            0 => Some(Direction::Forward),
            1 => Some(Direction::Backward),
            2 => Some(Direction::Bidirectional),
            _ => None,
        }
    }

    pub fn short(self) -> &'static str {
        match self {
            Direction::Forward => "F",
            Direction::Backward => "Bk",
            Direction::Bidirectional => "B",
        }
    }
}

/// Building-block variant.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum UnitKind {
    /// Gated 3×3×3 convolution with quasi-recurrent pooling.
    Qru3d,
    /// Same as `Qru3d` with 3×3×1 kernels.
    Qru2d,
    /// Plain 3D convolution with tanh; no gate, no recurrence.
    C3d,
}

impl UnitKind {
    pub fn kernel_extent(self) -> [usize; 3] {
        match self {
            UnitKind::Qru2d => [3, 3, 1],
            UnitKind::Qru3d | UnitKind::C3d => [3, 3, 3],
        }
    }

    pub fn is_gated(self) -> bool {
        !matches!(self, UnitKind::C3d)
    }

    pub fn tag(self) -> u8 {
        match self {
            UnitKind::Qru3d => 0,
            UnitKind::Qru2d => 1,
            UnitKind::C3d => 2,
        }
    }

    pub fn from_tag(tag: u8) -> Option<Self> {
        match tag {
            0 => Some(UnitKind::Qru3d),
            1 => Some(UnitKind::Qru2d),
            2 => Some(UnitKind::C3d),
            _ => None,
        }
    }
}

impl std::str::FromStr for UnitKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "qru3d" => Ok(UnitKind::Qru3d),
            "qru2d" => Ok(UnitKind::Qru2d),
            "c3d" => Ok(UnitKind::C3d),
            other => config_err(format!("unknown unit kind {other:?} (expected qru3d, qru2d or c3d)")),
        }
    }
}

impl fmt::Display for UnitKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            UnitKind::Qru3d => "QRU3D",
            UnitKind::Qru2d => "QRU2D",
            UnitKind::C3d => "C3D",
        })
    }
}

/// Spatial resampling performed by a unit. The band axis is never resampled.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Sampling {
    /// Stride 1.
    Same,
    /// Stride (2, 2, 1).
    Down,
    /// Fractional stride (1/2, 1/2, 1) via transposed convolution.
    Up,
}

impl Sampling {
    /// (numerator, denominator) per axis.
    pub fn stride_fraction(self) -> [(u32, u32); 3] {
        match self {
            Sampling::Same => [(1, 1), (1, 1), (1, 1)],
            Sampling::Down => [(2, 1), (2, 1), (1, 1)],
            Sampling::Up => [(1, 2), (1, 2), (1, 1)],
        }
    }

    pub fn from_fraction(f: [(u32, u32); 3]) -> Option<Self> {
        [Sampling::Same, Sampling::Down, Sampling::Up].into_iter().find(|s| s.stride_fraction() == f)
    }

    pub fn conv_spec(self, k: [usize; 3]) -> ConvSpec {
        match self {
            Sampling::Same => ConvSpec::same(k),
            Sampling::Down | Sampling::Up => ConvSpec::spatial_down2(k),
        }
    }

    /// Output extent given an input extent.
    pub fn output_extent(self, input: [usize; 3]) -> [usize; 3] {
        match self {
            Sampling::Same => input,
            Sampling::Down => [input[0].div_ceil(2), input[1].div_ceil(2), input[2]],
            Sampling::Up => [input[0] * 2, input[1] * 2, input[2]],
        }
    }
}

/// Architecture of one unit.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct UnitSpec {
    pub kind: UnitKind,
    pub cin: usize,
    pub cout: usize,
    pub direction: Direction,
    pub sampling: Sampling,
}

impl UnitSpec {
    pub fn kernel_shape(&self) -> KernelShape {
        let [kh, kw, kb] = self.kind.kernel_extent();
        KernelShape::new(self.cout, self.cin, kh, kw, kb)
    }

    pub fn conv_spec(&self) -> ConvSpec {
        self.sampling.conv_spec(self.kind.kernel_extent())
    }

    /// Number of independent pooling branches.
    pub fn branch_count(&self) -> usize {
        match (self.kind, self.direction) {
            (UnitKind::C3d, _) => 1,
            (_, Direction::Bidirectional) => 2,
            _ => 1,
        }
    }

    pub fn param_count(&self) -> usize {
        let k = self.kernel_shape();
        let per_bank = k.weight_count() + k.cout;
        let banks = if self.kind.is_gated() { 2 } else { 1 };
        per_bank * banks * self.branch_count()
    }
}

/// Candidate (`wz`) and forget-gate (`wf`) filter banks.
#[derive(Debug, Clone, PartialEq)]
pub struct QruParams<T = f32> {
    pub wz: ConvKernel<T>,
    pub wf: ConvKernel<T>,
}

impl<T: Scalar> QruParams<T> {
    pub fn new(wz: ConvKernel<T>, wf: ConvKernel<T>) -> Result<Self> {
        if wz.shape != wf.shape {
            return dim_err(format!("wz {:?} and wf {:?} differ", wz.shape, wf.shape));
        }
        Ok(QruParams { wz, wf })
    }

    pub fn zeros(shape: KernelShape) -> Self {
        QruParams { wz: ConvKernel::zeros(shape), wf: ConvKernel::zeros(shape) }
    }
}

/// Trainable state of one unit.
#[derive(Debug, Clone, PartialEq)]
#[allow(clippy::large_enum_variant)]
pub enum UnitParams<T = f32> {
    /// `main` pools in the unit's direction (forward for bidirectional);
    /// `reverse` is the independent backward branch of a bidirectional unit.
    Gated { main: QruParams<T>, reverse: Option<QruParams<T>> },
    Plain(ConvKernel<T>),
}

impl<T: Scalar> UnitParams<T> {
    pub fn zeros(spec: &UnitSpec) -> Self {
        let shape = spec.kernel_shape();
        if spec.kind.is_gated() {
            UnitParams::Gated {
                main: QruParams::zeros(shape),
                reverse: (spec.direction == Direction::Bidirectional).then(|| QruParams::zeros(shape)),
            }
        } else {
            UnitParams::Plain(ConvKernel::zeros(shape))
        }
    }

    /// Zero-mean normal weights with variance `2 / fan_in`, zero biases.
    pub fn he_init(spec: &UnitSpec, rng: &mut impl Rng) -> Self {
        let mut params = Self::zeros(spec);
        let fan_in = spec.cin * spec.kernel_shape().taps();
        let normal = Normal::new(0.0, (2.0 / fan_in as f64).sqrt()).expect("finite std");
        for kernel in params.kernels_mut() {
            for w in kernel.weights.iter_mut() {
                *w = T::of_f64(normal.sample(rng));
            }
        }
        params
    }

    pub fn kernels(&self) -> Vec<&ConvKernel<T>> {
        match self {
            UnitParams::Gated { main, reverse } => {
                let mut v = vec![&main.wz, &main.wf];
                if let Some(r) = reverse {
                    v.extend([&r.wz, &r.wf]);
                }
                v
            }
            UnitParams::Plain(k) => vec![k],
        }
    }

    pub fn kernels_mut(&mut self) -> Vec<&mut ConvKernel<T>> {
        match self {
            UnitParams::Gated { main, reverse } => {
                let mut v = vec![&mut main.wz, &mut main.wf];
                if let Some(r) = reverse {
                    v.extend([&mut r.wz, &mut r.wf]);
                }
                v
            }
            UnitParams::Plain(k) => vec![k],
        }
    }

    /// Flat parameter buffers in declaration order: for every kernel its
    /// weights then its bias.
    pub fn tensors(&self) -> Vec<&[T]> {
        self.kernels().into_iter().flat_map(|k| [k.weights.as_slice(), k.bias.as_slice()]).collect()
    }

    pub fn tensors_mut(&mut self) -> Vec<&mut [T]> {
        self.kernels_mut()
            .into_iter()
            .flat_map(|k| [k.weights.as_mut_slice(), k.bias.as_mut_slice()])
            .collect()
    }

    pub fn param_count(&self) -> usize {
        self.kernels().iter().map(|k| k.param_count()).sum()
    }

    pub fn cast<U: Scalar>(&self) -> UnitParams<U> {
        match self {
            UnitParams::Gated { main, reverse } => UnitParams::Gated {
                main: QruParams { wz: main.wz.cast(), wf: main.wf.cast() },
                reverse: reverse.as_ref().map(|r| QruParams { wz: r.wz.cast(), wf: r.wf.cast() }),
            },
            UnitParams::Plain(k) => UnitParams::Plain(k.cast()),
        }
    }
}

/// Candidates, gates and hidden states of one pooling pass.
#[derive(Debug, Clone)]
pub struct PoolingTrace<T = f32> {
    pub z: FeatureTensor<T>,
    pub f: FeatureTensor<T>,
    pub h: FeatureTensor<T>,
    /// Forward or Backward.
    pub direction: Direction,
}

/// Saved activations of one unit, consumed by [`QruUnit::backward`].
#[derive(Debug, Clone)]
pub struct UnitTrace<T = f32> {
    pub input: FeatureTensor<T>,
    pub branches: Vec<BranchTrace<T>>,
}

#[derive(Debug, Clone)]
pub enum BranchTrace<T = f32> {
    Gated(PoolingTrace<T>),
    Plain { z: FeatureTensor<T> },
}

fn conv_apply<T: Scalar>(spec: &UnitSpec, input: &FeatureTensor<T>, k: &ConvKernel<T>) -> Result<FeatureTensor<T>> {
    let cs = spec.conv_spec();
    match spec.sampling {
        Sampling::Up => tconv3d_forward(input, k, &cs, [1, 1, 0]),
        _ => conv3d_forward(input, k, &cs),
    }
}

fn conv_grad<T: Scalar>(
    spec: &UnitSpec,
    input: &FeatureTensor<T>,
    k: &ConvKernel<T>,
    grad_out: &FeatureTensor<T>,
) -> Result<ConvGrads<T>> {
    let cs = spec.conv_spec();
    match spec.sampling {
        Sampling::Up => tconv3d_backward(input, k, &cs, [1, 1, 0], grad_out),
        _ => conv3d_backward(input, k, &cs, grad_out),
    }
}

/// `Z = tanh(Wz * I)`, `F = σ(Wf * I)`.
pub fn gates_forward<T: Scalar>(
    input: &FeatureTensor<T>,
    params: &QruParams<T>,
    spec: &ConvSpec,
) -> Result<(FeatureTensor<T>, FeatureTensor<T>)> {
    let z = activate(&conv3d_forward(input, &params.wz, spec)?, Activation::Tanh);
    let f = activate(&conv3d_forward(input, &params.wf, spec)?, Activation::Sigmoid);
    Ok((z, f))
}

/// f-pooling along the band axis: `h_b = f_b ⊙ h_{b-1} + (1 - f_b) ⊙ z_b`
/// with a zero initial state. `Backward` runs from the last band to the first.
pub fn qru_pool_forward<T: Scalar>(
    z: &FeatureTensor<T>,
    f: &FeatureTensor<T>,
    direction: Direction,
) -> Result<FeatureTensor<T>> {
    z.ensure_shape(f, "qru_pool_forward")?;
    if direction == Direction::Bidirectional {
        return config_err("pooling runs one direction at a time");
    }
    let nb = z.shape().bands;
    let mut h = FeatureTensor::zeros(z.shape());
    for ((hr, zr), fr) in h.data_mut().chunks_mut(nb).zip(z.data().chunks(nb)).zip(f.data().chunks(nb)) {
        let mut state = T::zero();
        let mut step = |b: usize| {
            state = fr[b] * state + (T::one() - fr[b]) * zr[b];
            hr[b] = state;
        };
        match direction {
            Direction::Forward => (0..nb).for_each(&mut step),
            _ => (0..nb).rev().for_each(&mut step),
        }
    }
    Ok(h)
}

/// Reverse-mode derivative of [`qru_pool_forward`].
pub fn qru_pool_backward<T: Scalar>(
    trace: &PoolingTrace<T>,
    grad_h: &FeatureTensor<T>,
) -> Result<(FeatureTensor<T>, FeatureTensor<T>)> {
    trace.h.ensure_shape(grad_h, "qru_pool_backward")?;
    trace.z.ensure_shape(&trace.f, "qru_pool_backward")?;
    let shape = trace.h.shape();
    let nb = shape.bands;
    let mut gz = FeatureTensor::zeros(shape);
    let mut gf = FeatureTensor::zeros(shape);
    let rows = trace
        .z
        .data()
        .chunks(nb)
        .zip(trace.f.data().chunks(nb))
        .zip(trace.h.data().chunks(nb))
        .zip(grad_h.data().chunks(nb))
        .zip(gz.data_mut().chunks_mut(nb).zip(gf.data_mut().chunks_mut(nb)));
    for ((((zr, fr), hr), gr), (gzr, gfr)) in rows {
        let mut carry = T::zero();
        let mut step = |b: usize, prev: Option<usize>| {
            let g = gr[b] + carry;
            let h_prev = prev.map_or(T::zero(), |p| hr[p]);
            gzr[b] = (T::one() - fr[b]) * g;
            gfr[b] = (h_prev - zr[b]) * g;
            carry = fr[b] * g;
        };
        match trace.direction {
            Direction::Forward => (0..nb).rev().for_each(|b| step(b, b.checked_sub(1))),
            _ => (0..nb).for_each(|b| step(b, (b + 1 < nb).then_some(b + 1))),
        }
    }
    Ok((gz, gf))
}

/// A unit with its parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct QruUnit<T = f32> {
    pub spec: UnitSpec,
    pub params: UnitParams<T>,
}

impl<T: Scalar> QruUnit<T> {
    pub fn new(spec: UnitSpec, params: UnitParams<T>) -> Result<Self> {
        let expected = UnitParams::<T>::zeros(&spec);
        let ok = expected.kernels().len() == params.kernels().len()
            && expected.kernels().iter().zip(params.kernels()).all(|(a, b)| a.shape == b.shape);
        if !ok {
            return dim_err(format!("parameters do not match unit {spec:?}"));
        }
        Ok(QruUnit { spec, params })
    }

    pub fn he_init(spec: UnitSpec, rng: &mut impl Rng) -> Self {
        QruUnit { spec, params: UnitParams::he_init(&spec, rng) }
    }

    fn check_input(&self, input: &FeatureTensor<T>) -> Result<()> {
        if input.shape().channels != self.spec.cin {
            return dim_err(format!(
                "unit expects {} input channels, got {}",
                self.spec.cin,
                input.shape().channels
            ));
        }
        Ok(())
    }

    fn gated_branch(
        &self,
        input: &FeatureTensor<T>,
        p: &QruParams<T>,
        direction: Direction,
    ) -> Result<PoolingTrace<T>> {
        let z = activate(&conv_apply(&self.spec, input, &p.wz)?, Activation::Tanh);
        let f = activate(&conv_apply(&self.spec, input, &p.wf)?, Activation::Sigmoid);
        let h = qru_pool_forward(&z, &f, direction)?;
        Ok(PoolingTrace { z, f, h, direction })
    }

    /// Forward pass returning the output and the saved activations.
    pub fn forward_traced(&self, input: &FeatureTensor<T>) -> Result<(FeatureTensor<T>, UnitTrace<T>)> {
        self.check_input(input)?;
        let mut branches = Vec::with_capacity(2);
        let output = match &self.params {
            UnitParams::Gated { main, reverse } => {
                let main_dir = match self.spec.direction {
                    Direction::Backward => Direction::Backward,
                    _ => Direction::Forward,
                };
                let t = self.gated_branch(input, main, main_dir)?;
                let mut out = t.h.clone();
                branches.push(BranchTrace::Gated(t));
                if let Some(r) = reverse {
                    let t = self.gated_branch(input, r, Direction::Backward)?;
                    out.add_assign(&t.h)?;
                    branches.push(BranchTrace::Gated(t));
                }
                out
            }
            UnitParams::Plain(k) => {
                let z = activate(&conv_apply(&self.spec, input, k)?, Activation::Tanh);
                branches.push(BranchTrace::Plain { z: z.clone() });
                z
            }
        };
        Ok((output, UnitTrace { input: input.clone(), branches }))
    }

    pub fn forward(&self, input: &FeatureTensor<T>) -> Result<FeatureTensor<T>> {
        Ok(self.forward_traced(input)?.0)
    }

    /// Input gradient and parameter gradients (same layout as the params).
    pub fn backward(
        &self,
        trace: &UnitTrace<T>,
        grad_out: &FeatureTensor<T>,
    ) -> Result<(FeatureTensor<T>, UnitParams<T>)> {
        let input = &trace.input;
        let mut grad_input = FeatureTensor::zeros(input.shape());
        let mut branch_grad = |t: &PoolingTrace<T>, p: &QruParams<T>| -> Result<QruParams<T>> {
            let (gz, gf) = qru_pool_backward(t, grad_out)?;
            let gz = activate_grad(&t.z, &gz, Activation::Tanh)?;
            let gf = activate_grad(&t.f, &gf, Activation::Sigmoid)?;
            let cz = conv_grad(&self.spec, input, &p.wz, &gz)?;
            let cf = conv_grad(&self.spec, input, &p.wf, &gf)?;
            grad_input.add_assign(&cz.grad_input)?;
            grad_input.add_assign(&cf.grad_input)?;
            Ok(QruParams { wz: cz.grad_kernel, wf: cf.grad_kernel })
        };
        let grads = match (&self.params, trace.branches.as_slice()) {
            (UnitParams::Gated { main, reverse: None }, [BranchTrace::Gated(t)]) => {
                UnitParams::Gated { main: branch_grad(t, main)?, reverse: None }
            }
            (
                UnitParams::Gated { main, reverse: Some(r) },
                [BranchTrace::Gated(tm), BranchTrace::Gated(tr)],
            ) => UnitParams::Gated { main: branch_grad(tm, main)?, reverse: Some(branch_grad(tr, r)?) },
            (UnitParams::Plain(k), [BranchTrace::Plain { z }]) => {
                let gz = activate_grad(z, grad_out, Activation::Tanh)?;
                let c = conv_grad(&self.spec, input, k, &gz)?;
                grad_input.add_assign(&c.grad_input)?;
                UnitParams::Plain(c.grad_kernel)
            }
            _ => return Err(Error::State("trace does not belong to this unit".into())),
        };
        Ok((grad_input, grads))
    }

    pub fn cast<U: Scalar>(&self) -> QruUnit<U> {
        QruUnit { spec: self.spec, params: self.params.cast() }
    }
}

/// Constructor for one ablation variant at a given width multiplier.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct VariantBuilder {
    pub kind: UnitKind,
    pub width: f64,
}

/// Resolve a variant by name (`qru3d`, `qru2d`, `c3d`).
pub fn make_variant(kind: &str, width: f64) -> Result<VariantBuilder> {
    if !(width.is_finite() && width > 0.0) {
        return config_err(format!("width multiplier must be positive, got {width}"));
    }
    Ok(VariantBuilder { kind: kind.parse()?, width })
}

impl VariantBuilder {
    /// Scale a nominal channel count by the width multiplier.
    pub fn channels(&self, nominal: usize) -> usize {
        ((nominal as f64 * self.width).round() as usize).max(1)
    }

    pub fn spec(&self, cin: usize, cout: usize, direction: Direction, sampling: Sampling) -> UnitSpec {
        UnitSpec { kind: self.kind, cin, cout, direction, sampling }
    }

    pub fn build<T: Scalar>(
        &self,
        cin: usize,
        cout: usize,
        direction: Direction,
        sampling: Sampling,
        rng: &mut impl Rng,
    ) -> QruUnit<T> {
        QruUnit::he_init(self.spec(cin, cout, direction, sampling), rng)
    }
}
