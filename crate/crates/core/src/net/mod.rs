//! Residual encoder-decoder built from quasi-recurrent units, with additive
//! symmetric skips and a direction schedule over layers.

mod weights;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{config_err, dim_err, Error, Result};
use crate::qru::{Direction, QruUnit, Sampling, UnitKind, UnitParams, UnitSpec, UnitTrace};
use crate::tensor::{FeatureTensor, Scalar, Shape};

pub use weights::{read_weights, read_weights_from, write_weights, write_weights_to, WEIGHTS_MAGIC, WEIGHTS_VERSION};

/// How directions are assigned across layers.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum DirectionScheme {
    /// Bidirectional ends, interior alternating Forward/Backward from layer 2.
    Alternating,
    /// Every layer Forward.
    Unidirectional,
    /// Every layer Bidirectional.
    Bidirectional,
}

impl std::str::FromStr for DirectionScheme {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "A" | "a" | "alternating" => Ok(DirectionScheme::Alternating),
            "U" | "u" | "unidirectional" => Ok(DirectionScheme::Unidirectional),
            "B" | "b" | "bidirectional" => Ok(DirectionScheme::Bidirectional),
            other => config_err(format!("unknown direction scheme {other:?}")),
        }
    }
}

/// Per-layer directions for `layers` layers.
pub fn direction_schedule(layers: usize, scheme: DirectionScheme) -> Vec<Direction> {
    match scheme {
        DirectionScheme::Unidirectional => vec![Direction::Forward; layers],
        DirectionScheme::Bidirectional => vec![Direction::Bidirectional; layers],
        DirectionScheme::Alternating => (0..layers)
            .map(|l| {
                if l == 0 || l + 1 == layers {
                    Direction::Bidirectional
                } else if l % 2 == 1 {
                    Direction::Forward
                } else {
                    Direction::Backward
                }
            })
            .collect(),
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct LayerSpec {
    pub cout: usize,
    pub sampling: Sampling,
    pub direction: Direction,
    pub kind: UnitKind,
}

/// Ordered layers (extractor, encoder, decoder, reconstructor). The output
/// of layer `i` is added to the input of layer `n - 1 - i` whenever at least
/// one layer separates them.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NetworkConfig {
    pub in_channels: usize,
    pub layers: Vec<LayerSpec>,
    /// Add the network input to the reconstructor output.
    pub global_residual: bool,
}

const BENCHMARK_WIDTHS: [usize; 12] = [16, 16, 32, 32, 64, 64, 64, 32, 32, 16, 16, 1];
const BENCHMARK_SAMPLING: [Sampling; 12] = {
    use Sampling::*;
    [Same, Same, Down, Same, Down, Same, Same, Up, Same, Up, Same, Same]
};

impl NetworkConfig {
    /// The 12-layer benchmark network.
    pub fn benchmark() -> Self {
        Self::variant(UnitKind::Qru3d, 1.0, DirectionScheme::Alternating)
    }

    /// Benchmark topology with another unit kind, width multiplier and
    /// direction scheme (the ablation grid).
    pub fn variant(kind: UnitKind, width: f64, scheme: DirectionScheme) -> Self {
        let n = BENCHMARK_WIDTHS.len();
        let dirs = direction_schedule(n, scheme);
        let layers = (0..n)
            .map(|l| LayerSpec {
                cout: if l + 1 == n {
                    BENCHMARK_WIDTHS[l]
                } else {
                    ((BENCHMARK_WIDTHS[l] as f64 * width).round() as usize).max(1)
                },
                sampling: BENCHMARK_SAMPLING[l],
                direction: dirs[l],
                kind,
            })
            .collect();
        NetworkConfig { in_channels: 1, layers, global_residual: true }
    }

    /// Three same-resolution layers of width 8, for gradient checks and
    /// quick training runs.
    pub fn desk() -> Self {
        Self::shallow(8)
    }

    pub fn shallow(width: usize) -> Self {
        let dirs = direction_schedule(3, DirectionScheme::Alternating);
        let layers = [width, width, 1]
            .into_iter()
            .zip(dirs)
            .map(|(cout, direction)| LayerSpec { cout, sampling: Sampling::Same, direction, kind: UnitKind::Qru3d })
            .collect();
        NetworkConfig { in_channels: 1, layers, global_residual: true }
    }

    pub fn with_scheme(mut self, scheme: DirectionScheme) -> Self {
        let dirs = direction_schedule(self.layers.len(), scheme);
        for (l, d) in self.layers.iter_mut().zip(dirs) {
            l.direction = d;
        }
        self
    }

    /// `(source, target)` layer pairs joined by additive skips.
    pub fn skip_pairs(&self) -> Vec<(usize, usize)> {
        let n = self.layers.len();
        (0..n / 2).map(|i| (i, n - 1 - i)).filter(|&(i, t)| t > i + 1).collect()
    }

    /// Spatial extents must be multiples of this.
    pub fn spatial_divisor(&self) -> usize {
        1 << self.layers.iter().filter(|l| l.sampling == Sampling::Down).count()
    }

    pub fn unit_specs(&self) -> Vec<UnitSpec> {
        let mut cin = self.in_channels;
        self.layers
            .iter()
            .map(|l| {
                let s = UnitSpec { kind: l.kind, cin, cout: l.cout, direction: l.direction, sampling: l.sampling };
                cin = l.cout;
                s
            })
            .collect()
    }

    pub fn param_count(&self) -> usize {
        self.unit_specs().iter().map(|s| s.param_count()).sum()
    }

    /// Check that every skip joins tensors of equal channel count and
    /// resolution and that the output matches the input.
    pub fn validate(&self) -> Result<()> {
        if self.layers.is_empty() || self.in_channels == 0 {
            return config_err("network needs at least one layer and one input channel");
        }
        if self.layers.iter().any(|l| l.cout == 0) {
            return config_err("layer widths must be positive");
        }
        // level = number of pending downsamplings
        let mut level: i64 = 0;
        let mut out_state = Vec::with_capacity(self.layers.len());
        for (idx, l) in self.layers.iter().enumerate() {
            level += match l.sampling {
                Sampling::Same => 0,
                Sampling::Down => 1,
                Sampling::Up => -1,
            };
            if level < 0 {
                return config_err(format!("layer {idx} upsamples above the input resolution"));
            }
            out_state.push((l.cout, level));
        }
        for (i, t) in self.skip_pairs() {
            if out_state[i] != out_state[t - 1] {
                return config_err(format!(
                    "skip {i}->{t} joins (channels, level) {:?} with {:?}",
                    out_state[i],
                    out_state[t - 1]
                ));
            }
        }
        let (c, lv) = *out_state.last().unwrap();
        if lv != 0 {
            return config_err("network output resolution differs from input");
        }
        if self.global_residual && c != self.in_channels {
            return config_err(format!("global residual needs {} output channels, got {c}", self.in_channels));
        }
        Ok(())
    }
}

/// Network parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct Model<T = f32> {
    pub config: NetworkConfig,
    pub units: Vec<QruUnit<T>>,
}

/// Saved activations of a whole forward pass.
#[derive(Debug, Clone)]
pub struct NetTrace<T = f32> {
    pub units: Vec<UnitTrace<T>>,
}

#[derive(Debug, Clone)]
pub struct ForwardOutput<T = f32> {
    pub output: FeatureTensor<T>,
    /// Output shape of every layer.
    pub layer_shapes: Vec<Shape>,
    pub trace: Option<NetTrace<T>>,
}

/// Parameter gradients mirroring [`Model::units`], plus the input gradient.
#[derive(Debug, Clone)]
pub struct ModelGrads<T = f32> {
    pub units: Vec<UnitParams<T>>,
    pub input: FeatureTensor<T>,
}

impl<T: Scalar> ModelGrads<T> {
    pub fn tensors(&self) -> Vec<&[T]> {
        self.units.iter().flat_map(|u| u.tensors()).collect()
    }
}

/// Model ready for training; identical seeds give identical parameters.
///
/// Layers are He-initialised, except that with the global residual on the
/// last layer starts at zero so the untrained network is the identity map.
/// Random last-layer weights would first have to be silenced by closing
/// its forget gates, which stalls learning.
pub fn build_network(config: &NetworkConfig, seed: u64) -> Result<Model<f32>> {
    let mut model = build_random_network(config, seed)?;
    if config.global_residual {
        if let Some(last) = model.units.last_mut() {
            last.params.tensors_mut().into_iter().for_each(|t| t.fill(0.0));
        }
    }
    Ok(model)
}

/// Every layer He-initialised, the last one included.
pub fn build_random_network(config: &NetworkConfig, seed: u64) -> Result<Model<f32>> {
    config.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let units = config.unit_specs().into_iter().map(|s| QruUnit::he_init(s, &mut rng)).collect();
    Ok(Model { config: config.clone(), units })
}

impl<T: Scalar> Model<T> {
    pub fn from_units(config: NetworkConfig, units: Vec<QruUnit<T>>) -> Result<Self> {
        config.validate()?;
        let specs = config.unit_specs();
        if specs.len() != units.len() || specs.iter().zip(&units).any(|(s, u)| *s != u.spec) {
            return config_err("units do not match the network configuration");
        }
        Ok(Model { config, units })
    }

    pub fn param_count(&self) -> usize {
        self.units.iter().map(|u| u.params.param_count()).sum()
    }

    pub fn tensors(&self) -> Vec<&[T]> {
        self.units.iter().flat_map(|u| u.params.tensors()).collect()
    }

    pub fn tensors_mut(&mut self) -> Vec<&mut [T]> {
        self.units.iter_mut().flat_map(|u| u.params.tensors_mut()).collect()
    }

    pub fn zero_params(&mut self) {
        for t in self.tensors_mut() {
            t.fill(T::zero());
        }
    }

    pub fn cast<U: Scalar>(&self) -> Model<U> {
        Model { config: self.config.clone(), units: self.units.iter().map(|u| u.cast()).collect() }
    }

    /// Validate an input tensor against the configuration.
    pub fn check_input(&self, shape: Shape) -> Result<()> {
        if shape.channels != self.config.in_channels {
            return dim_err(format!(
                "model expects {} input channels, got {}",
                self.config.in_channels, shape.channels
            ));
        }
        let d = self.config.spatial_divisor();
        if !shape.height.is_multiple_of(d) || !shape.width.is_multiple_of(d) {
            return config_err(format!(
                "height and width must be divisible by {d}, got {}x{}",
                shape.height, shape.width
            ));
        }
        Ok(())
    }

    fn skip_targets(&self) -> Vec<Option<usize>> {
        let mut into = vec![None; self.units.len()];
        for (i, t) in self.config.skip_pairs() {
            into[t] = Some(i);
        }
        into
    }

    pub fn forward(&self, input: &FeatureTensor<T>, keep_traces: bool) -> Result<ForwardOutput<T>> {
        self.check_input(input.shape())?;
        let skip_into = self.skip_targets();
        let mut saved: Vec<Option<FeatureTensor<T>>> = vec![None; self.units.len()];
        for (i, _) in self.config.skip_pairs() {
            saved[i] = Some(FeatureTensor::zeros(Shape::new(1, 1, 1, 1, 1)));
        }
        let mut traces = Vec::new();
        let mut layer_shapes = Vec::with_capacity(self.units.len());
        let mut x = input.clone();
        for (l, unit) in self.units.iter().enumerate() {
            if let Some(i) = skip_into[l] {
                x.add_assign(saved[i].as_ref().expect("skip source runs first"))?;
            }
            let y = if keep_traces {
                let (y, t) = unit.forward_traced(&x)?;
                traces.push(t);
                y
            } else {
                unit.forward(&x)?
            };
            if saved[l].is_some() {
                saved[l] = Some(y.clone());
            }
            layer_shapes.push(y.shape());
            x = y;
        }
        if self.config.global_residual {
            x.add_assign(input)?;
        }
        Ok(ForwardOutput { output: x, layer_shapes, trace: keep_traces.then_some(NetTrace { units: traces }) })
    }

    /// Convenience: forward without traces.
    pub fn predict(&self, input: &FeatureTensor<T>) -> Result<FeatureTensor<T>> {
        Ok(self.forward(input, false)?.output)
    }

    pub fn backward(&self, trace: Option<&NetTrace<T>>, grad_output: &FeatureTensor<T>) -> Result<ModelGrads<T>> {
        let trace = trace.ok_or_else(|| Error::State("backward needs a traced forward pass".into()))?;
        if trace.units.len() != self.units.len() {
            return Err(Error::State("trace does not match this model".into()));
        }
        let skip_into = self.skip_targets();
        let mut skip_grads: Vec<Option<FeatureTensor<T>>> = vec![None; self.units.len()];
        let mut grads: Vec<Option<UnitParams<T>>> = vec![None; self.units.len()];
        let mut g = grad_output.clone();
        for l in (0..self.units.len()).rev() {
            if let Some(sg) = skip_grads[l].take() {
                g.add_assign(&sg)?;
            }
            let (g_in, pg) = self.units[l].backward(&trace.units[l], &g)?;
            if let Some(i) = skip_into[l] {
                skip_grads[i] = Some(g_in.clone());
            }
            grads[l] = Some(pg);
            g = g_in;
        }
        if self.config.global_residual {
            g.add_assign(grad_output)?;
        }
        Ok(ModelGrads { units: grads.into_iter().map(|p| p.expect("every layer visited")).collect(), input: g })
    }

    /// Index of the first bidirectional gated layer.
    pub fn first_bidirectional(&self) -> Option<usize> {
        self.units
            .iter()
            .position(|u| u.spec.direction == Direction::Bidirectional && u.spec.kind.is_gated())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use Direction::*;

    #[test]
    fn benchmark_schedule() {
        let d = direction_schedule(12, DirectionScheme::Alternating);
        assert_eq!(
            d,
            vec![
                Bidirectional, Forward, Backward, Forward, Backward, Forward, Backward, Forward, Backward, Forward,
                Backward, Bidirectional
            ]
        );
        assert_eq!(direction_schedule(3, DirectionScheme::Alternating), vec![Bidirectional, Forward, Bidirectional]);
        assert!(direction_schedule(4, DirectionScheme::Unidirectional).iter().all(|&d| d == Forward));
    }

    #[test]
    fn skip_pairs_mirror_encoder_and_decoder() {
        assert_eq!(NetworkConfig::benchmark().skip_pairs(), vec![(0, 11), (1, 10), (2, 9), (3, 8), (4, 7)]);
        assert_eq!(NetworkConfig::desk().skip_pairs(), vec![(0, 2)]);
        NetworkConfig::benchmark().validate().unwrap();
        NetworkConfig::desk().validate().unwrap();
    }

    #[test]
    fn rejects_unmirrored_config() {
        let mut c = NetworkConfig::benchmark();
        c.layers[2].cout = 48;
        assert!(matches!(c.validate(), Err(Error::Config(_))));
        let mut c = NetworkConfig::benchmark();
        c.layers[11].cout = 2;
        assert!(c.validate().is_err());
    }

    #[test]
    fn same_seed_same_parameters() {
        let a = build_network(&NetworkConfig::desk(), 5).unwrap();
        let b = build_network(&NetworkConfig::desk(), 5).unwrap();
        let c = build_network(&NetworkConfig::desk(), 6).unwrap();
        assert_eq!(a, b);
        assert_ne!(a, c);
    }

    #[test]
    fn fresh_residual_network_is_identity() {
        let m = build_network(&NetworkConfig::desk(), 3).unwrap();
        let x = FeatureTensor::from_fn(Shape::new(1, 1, 4, 4, 5), |i| (i as f32 * 0.21).cos());
        assert_eq!(m.predict(&x).unwrap(), x);
        let r = build_random_network(&NetworkConfig::desk(), 3).unwrap();
        assert_ne!(r.predict(&x).unwrap(), x);
        assert_eq!(r.units[..2], m.units[..2]);
    }

    #[test]
    fn zero_parameters_with_residual_is_identity() {
        let mut m = build_network(&NetworkConfig::benchmark(), 0).unwrap();
        m.zero_params();
        let x = FeatureTensor::from_fn(Shape::new(1, 1, 8, 8, 3), |i| (i as f32 * 0.37).sin());
        assert_eq!(m.predict(&x).unwrap(), x);
    }

    #[test]
    fn rejects_indivisible_extents_and_missing_trace() {
        let m = build_network(&NetworkConfig::benchmark(), 0).unwrap();
        let x = FeatureTensor::zeros(Shape::new(1, 1, 6, 8, 3));
        assert!(matches!(m.predict(&x), Err(Error::Config(_))));
        let d = build_network(&NetworkConfig::desk(), 0).unwrap();
        let g = FeatureTensor::zeros(Shape::new(1, 1, 4, 4, 3));
        assert!(matches!(d.backward(None, &g), Err(Error::State(_))));
    }

    #[test]
    fn zero_upstream_gives_zero_gradients() {
        let m = build_random_network(&NetworkConfig::desk(), 1).unwrap();
        let x = FeatureTensor::from_fn(Shape::new(1, 1, 4, 4, 3), |i| (i as f32).cos());
        let fwd = m.forward(&x, true).unwrap();
        let g = m.backward(fwd.trace.as_ref(), &FeatureTensor::zeros(x.shape())).unwrap();
        assert!(g.tensors().iter().all(|t| t.iter().all(|&v| v == 0.0)));
    }

    #[test]
    fn residual_passes_gradient_verbatim() {
        let mut m = build_network(&NetworkConfig::desk(), 1).unwrap();
        m.zero_params();
        // With zero parameters the branch derivative is not zero, so compare
        // the residual and non-residual input gradients instead.
        let x = FeatureTensor::from_fn(Shape::new(1, 1, 4, 4, 3), |i| (i as f32).cos());
        let up = FeatureTensor::from_fn(x.shape(), |i| (i as f32 * 0.3).sin());
        let with = m.backward(m.forward(&x, true).unwrap().trace.as_ref(), &up).unwrap();
        m.config.global_residual = false;
        let without = m.backward(m.forward(&x, true).unwrap().trace.as_ref(), &up).unwrap();
        let diff = with.input.sub(&without.input).unwrap();
        assert!(diff.max_abs_diff(&up).unwrap() < 1e-6);
        for (a, b) in with.tensors().iter().zip(without.tensors()) {
            assert_eq!(*a, b);
        }
    }
}
