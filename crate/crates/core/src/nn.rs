//! Network building blocks: dense and embedding layers, the power
//! normalization layer, softmax output, and JSON checkpoints.

use std::collections::BTreeMap;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::autodiff::{Gradients, ParamSet, Tape, Tensor, Var};
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum LayerKind {
    Dense,
    Embedding,
    PowerNorm,
    Softmax,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    Linear,
    Relu,
    Elu,
    Tanh,
}

impl std::str::FromStr for Activation {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "linear" => Ok(Activation::Linear),
            "relu" => Ok(Activation::Relu),
            "elu" => Ok(Activation::Elu),
            "tanh" => Ok(Activation::Tanh),
            _ => Err(Error::Unknown { what: "activation", name: s.to_string() }),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LayerSpec {
    pub kind: LayerKind,
    pub input: usize,
    pub output: usize,
    pub activation: Activation,
}

impl LayerSpec {
    pub fn dense(input: usize, output: usize, activation: Activation) -> Self {
        LayerSpec { kind: LayerKind::Dense, input, output, activation }
    }

    /// Lookup table applied to one-hot rows (`input` = alphabet size).
    pub fn embedding(input: usize, output: usize, activation: Activation) -> Self {
        LayerSpec { kind: LayerKind::Embedding, input, output, activation }
    }

    pub fn power_norm(width: usize) -> Self {
        LayerSpec { kind: LayerKind::PowerNorm, input: width, output: width, activation: Activation::Linear }
    }

    pub fn softmax(width: usize) -> Self {
        LayerSpec { kind: LayerKind::Softmax, input: width, output: width, activation: Activation::Linear }
    }

    fn has_params(&self) -> bool {
        matches!(self.kind, LayerKind::Dense | LayerKind::Embedding)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NetworkSpec {
    pub layers: Vec<LayerSpec>,
    pub initializer: String,
    pub seed: u64,
}

impl NetworkSpec {
    pub fn new(layers: Vec<LayerSpec>, seed: u64) -> Self {
        NetworkSpec { layers, initializer: "glorot-uniform".into(), seed }
    }

    /// Input → hidden… → output stack of dense layers, `hidden_act` on the
    /// hidden layers, linear output.
    pub fn mlp(input: usize, hidden: &[usize], output: usize, hidden_act: Activation, seed: u64) -> Self {
        let mut layers = Vec::new();
        let mut prev = input;
        for &h in hidden {
            layers.push(LayerSpec::dense(prev, h, hidden_act));
            prev = h;
        }
        layers.push(LayerSpec::dense(prev, output, Activation::Linear));
        Self::new(layers, seed)
    }

    pub fn validate(&self) -> Result<()> {
        for (i, l) in self.layers.iter().enumerate() {
            if l.input == 0 || l.output == 0 {
                return Err(Error::input(format!("layer {i}: widths must be positive")));
            }
            if matches!(l.kind, LayerKind::PowerNorm | LayerKind::Softmax) && l.input != l.output {
                return Err(Error::input(format!("layer {i}: {:?} must preserve width", l.kind)));
            }
            if l.kind == LayerKind::PowerNorm && l.input % 2 != 0 {
                return Err(Error::input(format!("layer {i}: power-norm width must be even (re, im pairs)")));
            }
        }
        for (i, w) in self.layers.windows(2).enumerate() {
            if w[0].output != w[1].input {
                return Err(Error::input(format!(
                    "layers {i} and {}: width {} does not chain into {}",
                    i + 1,
                    w[0].output,
                    w[1].input
                )));
            }
        }
        Initializer::parse(&self.initializer)?;
        Ok(())
    }

    pub fn input_width(&self) -> Option<usize> {
        self.layers.first().map(|l| l.input)
    }

    pub fn output_width(&self) -> Option<usize> {
        self.layers.last().map(|l| l.output)
    }
}

#[derive(Clone, Copy, Debug)]
enum Initializer {
    GlorotUniform,
    GlorotNormal,
    HeUniform,
}

impl Initializer {
    fn parse(name: &str) -> Result<Self> {
        match name {
            "glorot-uniform" => Ok(Initializer::GlorotUniform),
            "glorot-normal" => Ok(Initializer::GlorotNormal),
            "he-uniform" => Ok(Initializer::HeUniform),
            _ => Err(Error::Unknown { what: "initializer", name: name.to_string() }),
        }
    }

    fn sample(self, rng: &mut ChaCha8Rng, fan_in: usize, fan_out: usize, count: usize) -> Vec<f64> {
        match self {
            Initializer::GlorotUniform => {
                let a = glorot_uniform_bound(fan_in, fan_out);
                (0..count).map(|_| rng.random_range(-a..a)).collect()
            }
            Initializer::HeUniform => {
                let a = (6.0 / fan_in as f64).sqrt();
                (0..count).map(|_| rng.random_range(-a..a)).collect()
            }
            Initializer::GlorotNormal => {
                let std = (2.0 / (fan_in + fan_out) as f64).sqrt();
                let normal = Normal::new(0.0, std).expect("positive std");
                (0..count).map(|_| normal.sample(rng)).collect()
            }
        }
    }
}

pub fn glorot_uniform_bound(fan_in: usize, fan_out: usize) -> f64 {
    (6.0 / (fan_in + fan_out) as f64).sqrt()
}

fn weight_name(layer: usize, kind: LayerKind) -> String {
    match kind {
        LayerKind::Embedding => format!("layer{layer}.table"),
        _ => format!("layer{layer}.weight"),
    }
}

fn bias_name(layer: usize) -> String {
    format!("layer{layer}.bias")
}

/// Draws a parameter set for `spec`: weights from the named initializer,
/// biases zero. Deterministic in `spec.seed`.
pub fn init_network(spec: &NetworkSpec) -> Result<ParamSet> {
    spec.validate()?;
    let init = Initializer::parse(&spec.initializer)?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let mut params = ParamSet::new();
    for (i, l) in spec.layers.iter().enumerate() {
        if !l.has_params() {
            continue;
        }
        let w = init.sample(&mut rng, l.input, l.output, l.input * l.output);
        params.insert(weight_name(i, l.kind), Tensor::matrix(l.input, l.output, w)?);
        if l.kind == LayerKind::Dense {
            params.insert(bias_name(i), Tensor::zeros(&[1, l.output]));
        }
    }
    Ok(params)
}

/// One-hot rows for message indices `s` over an alphabet of `m`.
pub fn embed_messages(s: &[usize], m: usize) -> Result<Tensor> {
    if s.is_empty() {
        return Err(Error::input("empty message batch"));
    }
    let mut data = vec![0.0; s.len() * m];
    for (r, &idx) in s.iter().enumerate() {
        if idx >= m {
            return Err(Error::input(format!("message index {idx} out of range for M = {m}")));
        }
        data[r * m + idx] = 1.0;
    }
    Tensor::matrix(s.len(), m, data)
}

/// Scales a `B × 2n` batch so its average power per complex symbol is one:
/// `x · sqrt(B·n / Σ x²)`. Recorded on the tape.
pub fn power_normalize(tape: &mut Tape, x: Var) -> Result<Var> {
    let value = tape.value(x);
    let shape = value.shape().to_vec();
    if value.cols() % 2 != 0 {
        return Err(Error::Shape { op: "power_normalize", shapes: vec![shape] });
    }
    if value.data().iter().all(|&v| v == 0.0) {
        return Err(Error::input("power_normalize: all-zero batch has no defined scale"));
    }
    let symbols = (value.numel() / 2) as f64;
    let sq = tape.mul(x, x)?;
    let energy = tape.sum(sq)?;
    let mean_power = tape.scale(energy, 1.0 / symbols)?;
    let factor = tape.powf(mean_power, -0.5)?;
    let factor = tape.broadcast(factor, &shape)?;
    tape.mul(x, factor)
}

/// Untracked [`power_normalize`].
pub fn power_normalize_values(x: &Tensor) -> Result<Tensor> {
    let mut tape = Tape::new();
    let v = tape.constant(x.clone());
    let out = power_normalize(&mut tape, v)?;
    Ok(tape.value(out).clone())
}

/// Mean power per complex symbol of a `B × 2n` batch.
pub fn average_power(x: &Tensor) -> f64 {
    x.data().iter().map(|v| v * v).sum::<f64>() / (x.numel() / 2) as f64
}

/// Parameters bound to tape variables for one pass.
#[derive(Clone, Debug, Default)]
pub struct Bound {
    vars: BTreeMap<String, Var>,
}

impl Bound {
    pub fn var(&self, name: &str) -> Result<Var> {
        self.vars.get(name).copied().ok_or_else(|| Error::MissingParameter(name.to_string()))
    }

    /// Collects gradients per parameter name.
    pub fn gradients(&self, grads: &Gradients, params: &ParamSet) -> ParamSet {
        self.vars
            .iter()
            .map(|(name, &v)| (name.clone(), grads.get_or_zeros(v, params[name].shape())))
            .collect()
    }
}

/// A network spec with its parameters.
#[derive(Clone, Debug, PartialEq)]
pub struct Network {
    pub spec: NetworkSpec,
    pub params: ParamSet,
}

impl Network {
    pub fn new(spec: NetworkSpec) -> Result<Self> {
        let params = init_network(&spec)?;
        Ok(Network { spec, params })
    }

    pub fn with_params(spec: NetworkSpec, params: ParamSet) -> Result<Self> {
        spec.validate()?;
        let expected = init_network(&spec)?;
        for (name, t) in &expected {
            match params.get(name) {
                Some(p) if p.shape() == t.shape() => {}
                Some(p) => {
                    return Err(Error::Shape { op: "load_params", shapes: vec![t.shape().to_vec(), p.shape().to_vec()] })
                }
                None => return Err(Error::MissingParameter(name.clone())),
            }
        }
        Ok(Network { spec, params })
    }

    /// Records every parameter on `tape`, differentiable when `trainable`.
    pub fn bind(&self, tape: &mut Tape, trainable: bool) -> Bound {
        let vars = self
            .params
            .iter()
            .map(|(name, t)| {
                let v = if trainable { tape.param(t.clone()) } else { tape.constant(t.clone()) };
                (name.clone(), v)
            })
            .collect();
        Bound { vars }
    }

    /// Full forward pass.
    pub fn forward(&self, tape: &mut Tape, bound: &Bound, input: Var) -> Result<Var> {
        self.forward_layers(tape, bound, input, self.spec.layers.len())
    }

    /// Forward pass that stops before a trailing softmax layer.
    pub fn forward_logits(&self, tape: &mut Tape, bound: &Bound, input: Var) -> Result<Var> {
        let mut end = self.spec.layers.len();
        if self.spec.layers.last().map(|l| l.kind) == Some(LayerKind::Softmax) {
            end -= 1;
        }
        self.forward_layers(tape, bound, input, end)
    }

    fn forward_layers(&self, tape: &mut Tape, bound: &Bound, input: Var, end: usize) -> Result<Var> {
        let mut h = input;
        for (i, l) in self.spec.layers[..end].iter().enumerate() {
            if tape.value(h).cols() != l.input {
                return Err(Error::Shape {
                    op: "network_forward",
                    shapes: vec![tape.value(h).shape().to_vec(), vec![l.input, l.output]],
                });
            }
            h = match l.kind {
                LayerKind::Dense => {
                    let w = bound.var(&weight_name(i, l.kind))?;
                    let b = bound.var(&bias_name(i))?;
                    let z = tape.matmul(h, w)?;
                    let shape = tape.value(z).shape().to_vec();
                    let b = tape.broadcast(b, &shape)?;
                    let z = tape.add(z, b)?;
                    activate(tape, z, l.activation)?
                }
                LayerKind::Embedding => {
                    let w = bound.var(&weight_name(i, l.kind))?;
                    let z = tape.matmul(h, w)?;
                    activate(tape, z, l.activation)?
                }
                LayerKind::PowerNorm => power_normalize(tape, h)?,
                LayerKind::Softmax => tape.softmax_rows(h)?,
            };
        }
        Ok(h)
    }

    /// Untracked forward pass.
    pub fn infer(&self, input: &Tensor) -> Result<Tensor> {
        let mut tape = Tape::new();
        let bound = self.bind(&mut tape, false);
        let x = tape.constant(input.clone());
        let y = self.forward(&mut tape, &bound, x)?;
        Ok(tape.value(y).clone())
    }
}

fn activate(tape: &mut Tape, z: Var, act: Activation) -> Result<Var> {
    match act {
        Activation::Linear => Ok(z),
        Activation::Relu => tape.relu(z),
        Activation::Elu => tape.elu(z),
        Activation::Tanh => tape.tanh(z),
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StoredTensor {
    pub shape: Vec<usize>,
    pub values: Vec<f64>,
}

/// Name → shape + row-major values.
pub type ParamDocument = BTreeMap<String, StoredTensor>;

pub fn params_to_document(params: &ParamSet) -> ParamDocument {
    params
        .iter()
        .map(|(k, t)| (k.clone(), StoredTensor { shape: t.shape().to_vec(), values: t.data().to_vec() }))
        .collect()
}

pub fn params_from_document(doc: &ParamDocument) -> Result<ParamSet> {
    doc.iter().map(|(k, s)| Ok((k.clone(), Tensor::new(s.shape.clone(), s.values.clone())?))).collect()
}

/// Writes a parameter set as a JSON checkpoint.
pub fn save_params(params: &ParamSet, path: &Path) -> Result<()> {
    let text = serde_json::to_string_pretty(&params_to_document(params))?;
    std::fs::write(path, text)?;
    Ok(())
}

pub fn load_params(path: &Path) -> Result<ParamSet> {
    let doc: ParamDocument = serde_json::from_str(&std::fs::read_to_string(path)?)?;
    params_from_document(&doc)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::finite_difference_gradient;
    use proptest::prelude::*;

    fn encoder_spec(seed: u64) -> NetworkSpec {
        NetworkSpec::new(
            vec![
                LayerSpec::embedding(4, 8, Activation::Elu),
                LayerSpec::dense(8, 8, Activation::Elu),
                LayerSpec::dense(8, 4, Activation::Linear),
                LayerSpec::power_norm(4),
            ],
            seed,
        )
    }

    #[test]
    fn init_is_deterministic() {
        let a = init_network(&encoder_spec(11)).unwrap();
        let b = init_network(&encoder_spec(11)).unwrap();
        let c = init_network(&encoder_spec(12)).unwrap();
        assert_eq!(a, b);
        assert_ne!(a, c);
        assert!(a["layer1.bias"].data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn glorot_bound() {
        assert!((glorot_uniform_bound(4, 4) - 0.75f64.sqrt()).abs() < 1e-15);
        assert!((glorot_uniform_bound(4, 4) - 0.866).abs() < 1e-3);
        let spec = NetworkSpec::new(vec![LayerSpec::dense(4, 4, Activation::Linear)], 3);
        let p = init_network(&spec).unwrap();
        assert!(p["layer0.weight"].data().iter().all(|v| v.abs() <= glorot_uniform_bound(4, 4)));
    }

    #[test]
    fn empty_spec_has_no_params() {
        assert!(init_network(&NetworkSpec::new(vec![], 0)).unwrap().is_empty());
    }

    #[test]
    fn bad_specs_are_rejected() {
        let mut s = encoder_spec(0);
        s.initializer = "lecun".into();
        assert!(matches!(init_network(&s), Err(Error::Unknown { .. })));
        let broken = NetworkSpec::new(
            vec![LayerSpec::dense(4, 8, Activation::Elu), LayerSpec::dense(7, 2, Activation::Linear)],
            0,
        );
        assert!(broken.validate().is_err());
        assert!(NetworkSpec::new(vec![LayerSpec::power_norm(3)], 0).validate().is_err());
    }

    #[test]
    fn one_hot_embedding() {
        assert_eq!(embed_messages(&[2], 4).unwrap().data(), &[0.0, 0.0, 1.0, 0.0]);
        let b = embed_messages(&[0, 3], 4).unwrap();
        assert_eq!(b.data(), &[1.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0, 1.0]);
        assert!(embed_messages(&[4], 4).is_err());
    }

    #[test]
    fn power_norm_examples() {
        let x = Tensor::matrix(1, 2, vec![2.0, 0.0]).unwrap();
        assert_eq!(power_normalize_values(&x).unwrap().data(), &[1.0, 0.0]);
        let unit = Tensor::matrix(2, 2, vec![1.0, 0.0, 0.0, -1.0]).unwrap();
        assert_eq!(power_normalize_values(&unit).unwrap(), unit);
        assert!(power_normalize_values(&Tensor::zeros(&[2, 2])).is_err());
    }

    #[test]
    fn power_norm_gradient_matches_finite_differences() {
        let x0 = Tensor::matrix(3, 4, (0..12).map(|i| ((i * 7 % 5) as f64 - 1.7) * 0.4).collect()).unwrap();
        let w = Tensor::matrix(3, 4, (0..12).map(|i| (i as f64 * 0.9).sin()).collect()).unwrap();
        let loss = |x: &Tensor| {
            let mut tape = Tape::new();
            let xv = tape.param(x.clone());
            let wv = tape.constant(w.clone());
            let y = power_normalize(&mut tape, xv).unwrap();
            let t = tape.tanh(y).unwrap();
            let p = tape.mul(t, wv).unwrap();
            let r = tape.sum(p).unwrap();
            (tape, xv, r)
        };
        let (tape, xv, r) = loss(&x0);
        let g = tape.backward(r).unwrap().get(xv).unwrap().clone();
        let fd = finite_difference_gradient(&x0, 1e-5, |x| {
            let (t, _, r) = loss(x);
            t.value(r).item()
        });
        for (a, b) in g.data().iter().zip(fd.data()) {
            assert!((a - b).abs() < 1e-7, "{a} vs {b}");
        }
    }

    #[test]
    fn checkpoint_round_trip_is_exact() {
        let p = init_network(&encoder_spec(5)).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("ckpt.json");
        save_params(&p, &path).unwrap();
        assert_eq!(load_params(&path).unwrap(), p);
    }

    #[test]
    fn softmax_network_rows_sum_to_one() {
        let spec = NetworkSpec::new(
            vec![LayerSpec::dense(2, 5, Activation::Elu), LayerSpec::dense(5, 3, Activation::Linear), LayerSpec::softmax(3)],
            9,
        );
        let net = Network::new(spec).unwrap();
        let y = net.infer(&Tensor::matrix(2, 2, vec![0.3, -2.0, 5.0, 1.0]).unwrap()).unwrap();
        for r in 0..2 {
            assert!((y.row(r).iter().sum::<f64>() - 1.0).abs() < 1e-12);
        }
    }

    proptest! {
        #[test]
        fn power_norm_unit_power_and_scale_invariance(
            vals in proptest::collection::vec(-3.0f64..3.0, 8),
            c in 0.01f64..100.0,
        ) {
            prop_assume!(vals.iter().any(|v| v.abs() > 1e-3));
            let x = Tensor::matrix(2, 4, vals.clone()).unwrap();
            let y = power_normalize_values(&x).unwrap();
            prop_assert!((average_power(&y) - 1.0).abs() < 1e-12);
            let scaled = Tensor::matrix(2, 4, vals.iter().map(|v| v * c).collect()).unwrap();
            let ys = power_normalize_values(&scaled).unwrap();
            for (a, b) in y.data().iter().zip(ys.data()) {
                prop_assert!((a - b).abs() < 1e-12);
            }
        }

        #[test]
        fn one_hot_rows_sum_to_one(idx in proptest::collection::vec(0usize..6, 1..20)) {
            let t = embed_messages(&idx, 6).unwrap();
            for r in 0..idx.len() {
                prop_assert_eq!(t.row(r).iter().sum::<f64>(), 1.0);
                prop_assert_eq!(t.get(r, idx[r]), 1.0);
            }
        }
    }
}
