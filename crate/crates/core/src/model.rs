//! Encoder, projection head and cosine classifier.
//!
//! The encoder is an MLP producing features `f(x)`. The projection head maps
//! raw features to unit-norm `z`; the classifier compares unit-norm features
//! against unit-norm class prototypes, so logits are cosine similarities.

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::autodiff::{softmax_in_place, Tape, Tensor, Var};
use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq)]
pub struct ModelConfig {
    pub input_dim: usize,
    pub encoder_hidden: Vec<usize>,
    pub feature_dim: usize,
    pub projection_hidden: Vec<usize>,
    pub projection_dim: usize,
    pub num_classes: usize,
    /// Apply ReLU to the encoder output as well as between its layers.
    pub relu_output: bool,
    /// Train only the last encoder layer (plus both heads).
    pub freeze_encoder_except_last: bool,
}

impl ModelConfig {
    pub fn new(input_dim: usize, num_classes: usize) -> Self {
        Self {
            input_dim,
            encoder_hidden: vec![64, 64],
            feature_dim: 32,
            projection_hidden: vec![64],
            projection_dim: 16,
            num_classes,
            relu_output: false,
            freeze_encoder_except_last: false,
        }
    }

    fn validate(&self) -> Result<()> {
        let dims = [self.input_dim, self.feature_dim, self.projection_dim, self.num_classes];
        if dims.contains(&0)
            || self.encoder_hidden.contains(&0)
            || self.projection_hidden.contains(&0)
        {
            return Err(Error::Config("model dimensions must be positive".into()));
        }
        Ok(())
    }
}

/// Affine map `x·W + b` with `W` stored `in × out`.
#[derive(Clone, Debug, PartialEq)]
pub struct Linear {
    pub weight: Tensor,
    pub bias: Tensor,
}

impl Linear {
    pub fn zeros(input: usize, output: usize) -> Self {
        Self {
            weight: Tensor::zeros(&[input, output]),
            bias: Tensor::zeros(&[output]),
        }
    }

    /// Uniform fan-in initialization in `±1/√in`.
    pub fn init<R: Rng + ?Sized>(input: usize, output: usize, rng: &mut R) -> Self {
        let bound = 1.0 / (input as f64).sqrt();
        let w = (0..input * output)
            .map(|_| rng.random_range(-bound..bound))
            .collect();
        let b = (0..output).map(|_| rng.random_range(-bound..bound)).collect();
        Self {
            weight: Tensor::matrix(input, output, w).unwrap(),
            bias: Tensor::vector(b),
        }
    }

    pub fn input_dim(&self) -> usize {
        self.weight.rows()
    }

    pub fn output_dim(&self) -> usize {
        self.weight.cols()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Model {
    pub config: ModelConfig,
    pub encoder: Vec<Linear>,
    pub projection: Vec<Linear>,
    /// `num_classes × feature_dim`, rows kept at unit norm.
    pub prototypes: Tensor,
}

fn layer_dims(input: usize, hidden: &[usize], output: usize) -> Vec<(usize, usize)> {
    let mut dims = Vec::with_capacity(hidden.len() + 1);
    let mut prev = input;
    for &h in hidden.iter().chain(std::iter::once(&output)) {
        dims.push((prev, h));
        prev = h;
    }
    dims
}

/// Leaves registered for one forward pass.
#[derive(Clone, Debug)]
pub struct ParamVars {
    pub encoder: Vec<(Var, Var)>,
    pub projection: Vec<(Var, Var)>,
    pub prototypes: Var,
}

impl ParamVars {
    /// All parameter handles in declaration order.
    pub fn all(&self) -> Vec<Var> {
        let mut v = Vec::new();
        for &(w, b) in self.encoder.iter().chain(&self.projection) {
            v.push(w);
            v.push(b);
        }
        v.push(self.prototypes);
        v
    }
}

/// Forward-pass handles for a batch.
#[derive(Clone, Copy, Debug)]
pub struct Forward {
    pub features: Var,
    pub features_unit: Var,
    pub projection: Var,
    /// Cosine similarities to each prototype.
    pub logits: Var,
}

impl Model {
    pub fn new<R: Rng + ?Sized>(config: ModelConfig, rng: &mut R) -> Result<Self> {
        config.validate()?;
        let encoder = layer_dims(config.input_dim, &config.encoder_hidden, config.feature_dim)
            .into_iter()
            .map(|(i, o)| Linear::init(i, o, rng))
            .collect();
        let projection =
            layer_dims(config.feature_dim, &config.projection_hidden, config.projection_dim)
                .into_iter()
                .map(|(i, o)| Linear::init(i, o, rng))
                .collect();
        let protos: Vec<f64> = (0..config.num_classes * config.feature_dim)
            .map(|_| StandardNormal.sample(rng))
            .collect();
        let mut model = Self {
            prototypes: Tensor::matrix(config.num_classes, config.feature_dim, protos)?,
            config,
            encoder,
            projection,
        };
        model.normalize_prototypes();
        Ok(model)
    }

    /// Assemble a model from explicit layers; shapes must chain.
    pub fn from_parts(
        config: ModelConfig,
        encoder: Vec<Linear>,
        projection: Vec<Linear>,
        prototypes: Tensor,
    ) -> Result<Self> {
        let model = Self {
            config,
            encoder,
            projection,
            prototypes,
        };
        model.check_shapes()?;
        Ok(model)
    }

    pub fn check_shapes(&self) -> Result<()> {
        let c = &self.config;
        let chain = |layers: &[Linear], input: usize, output: usize, what: &str| {
            let mut prev = input;
            for l in layers {
                if l.input_dim() != prev || l.bias.len() != l.output_dim() {
                    return Err(Error::dim("model", format!("{what} layers do not chain")));
                }
                prev = l.output_dim();
            }
            if layers.is_empty() || prev != output {
                return Err(Error::dim("model", format!("{what} output is not {output}")));
            }
            Ok(())
        };
        chain(&self.encoder, c.input_dim, c.feature_dim, "encoder")?;
        chain(&self.projection, c.feature_dim, c.projection_dim, "projection")?;
        if self.prototypes.shape() != [c.num_classes, c.feature_dim] {
            return Err(Error::dim("model", "prototype matrix shape"));
        }
        Ok(())
    }

    /// Rescale prototype rows to unit ℓ2 norm.
    pub fn normalize_prototypes(&mut self) {
        normalize_rows(self.prototypes.data_mut(), self.config.feature_dim);
    }

    /// Parameter tensors in declaration order: encoder `(W, b)` pairs,
    /// projection `(W, b)` pairs, prototypes.
    pub fn tensors(&self) -> Vec<&Tensor> {
        let mut v = Vec::new();
        for l in self.encoder.iter().chain(&self.projection) {
            v.push(&l.weight);
            v.push(&l.bias);
        }
        v.push(&self.prototypes);
        v
    }

    fn tensors_mut(&mut self) -> Vec<&mut Tensor> {
        let mut v = Vec::new();
        for l in self.encoder.iter_mut().chain(self.projection.iter_mut()) {
            v.push(&mut l.weight);
            v.push(&mut l.bias);
        }
        v.push(&mut self.prototypes);
        v
    }

    pub fn num_params(&self) -> usize {
        self.tensors().iter().map(|t| t.len()).sum()
    }

    /// Concatenation of all parameters in declaration order.
    pub fn flatten(&self) -> Vec<f64> {
        let mut v = Vec::with_capacity(self.num_params());
        for t in self.tensors() {
            v.extend_from_slice(t.data());
        }
        v
    }

    pub fn load_flat(&mut self, flat: &[f64]) -> Result<()> {
        if flat.len() != self.num_params() {
            return Err(Error::dim(
                "load_flat",
                format!("{} values for {} parameters", flat.len(), self.num_params()),
            ));
        }
        let mut off = 0;
        for t in self.tensors_mut() {
            let n = t.len();
            t.data_mut().copy_from_slice(&flat[off..off + n]);
            off += n;
        }
        Ok(())
    }

    /// Per-coordinate flag over the flat layout: true where the optimizer
    /// may move the parameter.
    pub fn trainable_mask(&self) -> Vec<bool> {
        let last = self.encoder.len() - 1;
        let mut mask = Vec::with_capacity(self.num_params());
        for (i, l) in self.encoder.iter().enumerate() {
            let on = !self.config.freeze_encoder_except_last || i == last;
            mask.extend(std::iter::repeat_n(on, l.weight.len() + l.bias.len()));
        }
        let rest = self.num_params() - mask.len();
        mask.extend(std::iter::repeat_n(true, rest));
        mask
    }

    /// Range of the prototype block within the flat layout.
    pub fn prototype_range(&self) -> std::ops::Range<usize> {
        let n = self.num_params();
        n - self.prototypes.len()..n
    }

    pub fn register(&self, tape: &mut Tape) -> ParamVars {
        let mut reg = |layers: &[Linear]| {
            layers
                .iter()
                .map(|l| (tape.leaf(l.weight.clone()), tape.leaf(l.bias.clone())))
                .collect::<Vec<_>>()
        };
        let encoder = reg(&self.encoder);
        let projection = reg(&self.projection);
        let prototypes = tape.leaf(self.prototypes.clone());
        ParamVars {
            encoder,
            projection,
            prototypes,
        }
    }

    /// Encoder output for a `B × input_dim` batch.
    pub fn encode(&self, tape: &mut Tape, p: &ParamVars, x: Var) -> Result<Var> {
        let cols = tape.value(x).cols();
        if cols != self.config.input_dim {
            return Err(Error::dim(
                "encode",
                format!("input has {cols} columns, model expects {}", self.config.input_dim),
            ));
        }
        let mut h = x;
        let last = p.encoder.len() - 1;
        for (i, &(w, b)) in p.encoder.iter().enumerate() {
            h = tape.matmul(h, w)?;
            h = tape.add_row(h, b)?;
            if i < last || self.config.relu_output {
                h = tape.relu(h)?;
            }
        }
        Ok(h)
    }

    /// Unit-norm projection of raw features.
    pub fn project(&self, tape: &mut Tape, p: &ParamVars, features: Var) -> Result<Var> {
        let mut h = features;
        let last = p.projection.len() - 1;
        for (i, &(w, b)) in p.projection.iter().enumerate() {
            h = tape.matmul(h, w)?;
            h = tape.add_row(h, b)?;
            if i < last {
                h = tape.relu(h)?;
            }
        }
        tape.l2_normalize_rows(h)
    }

    /// Cosine logits `normalize(f) · normalize(H)ᵀ`; returns the unit
    /// features alongside.
    pub fn classify(&self, tape: &mut Tape, p: &ParamVars, features: Var) -> Result<(Var, Var)> {
        let fu = tape.l2_normalize_rows(features)?;
        let hu = tape.l2_normalize_rows(p.prototypes)?;
        let logits = tape.matmul_t(fu, hu)?;
        Ok((fu, logits))
    }

    pub fn forward(&self, tape: &mut Tape, p: &ParamVars, x: Var) -> Result<Forward> {
        let features = self.encode(tape, p, x)?;
        let projection = self.project(tape, p, features)?;
        let (features_unit, logits) = self.classify(tape, p, features)?;
        Ok(Forward {
            features,
            features_unit,
            projection,
            logits,
        })
    }

    /// Tape-free inference: unit features and `softmax(logits/τ)` per row.
    pub fn predict(&self, x: &Tensor, tau: f64) -> Result<Prediction> {
        if tau <= 0.0 {
            return Err(Error::Config(format!("temperature must be positive, got {tau}")));
        }
        let mut tape = Tape::new();
        let p = self.register(&mut tape);
        let xv = tape.leaf(x.clone());
        let features = self.encode(&mut tape, &p, xv)?;
        let (fu, logits) = self.classify(&mut tape, &p, features)?;
        let logits = tape.value(logits).clone();
        let mut probs = logits.clone();
        let c = probs.cols();
        for row in probs.data_mut().chunks_mut(c) {
            softmax_in_place(row, 1.0 / tau);
        }
        Ok(Prediction {
            features: tape.value(fu).clone(),
            logits,
            probs,
        })
    }
}

#[derive(Clone, Debug)]
pub struct Prediction {
    pub features: Tensor,
    pub logits: Tensor,
    pub probs: Tensor,
}

impl Prediction {
    pub fn argmax(&self) -> Vec<usize> {
        let c = self.probs.cols();
        self.probs
            .data()
            .chunks(c)
            .map(|row| argmax(row))
            .collect()
    }
}

/// Index of the largest entry; ties go to the lowest index.
pub fn argmax(row: &[f64]) -> usize {
    let mut best = 0;
    for (j, &v) in row.iter().enumerate() {
        if v > row[best] {
            best = j;
        }
    }
    best
}

pub(crate) fn normalize_rows(data: &mut [f64], width: usize) {
    for row in data.chunks_mut(width) {
        let n = row.iter().map(|v| v * v).sum::<f64>().sqrt();
        if n > 0.0 {
            row.iter_mut().for_each(|v| *v /= n);
        }
    }
}

/// Desk-scale stand-in for image augmentation: additive Gaussian noise
/// followed by random coordinate dropout.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Augment {
    pub noise_std: f64,
    pub dropout: f64,
}

impl Default for Augment {
    fn default() -> Self {
        Self {
            noise_std: 0.1,
            dropout: 0.1,
        }
    }
}

impl Augment {
    pub fn apply<R: Rng + ?Sized>(&self, x: &Tensor, rng: &mut R) -> Tensor {
        let mut out = x.clone();
        for v in out.data_mut() {
            let noise: f64 = StandardNormal.sample(rng);
            *v += self.noise_std * noise;
            if rng.random::<f64>() < self.dropout {
                *v = 0.0;
            }
        }
        out
    }

    /// Two independent views of the same batch.
    pub fn views<R: Rng + ?Sized>(&self, x: &Tensor, rng: &mut R) -> (Tensor, Tensor) {
        let a = self.apply(x, rng);
        let b = self.apply(x, rng);
        (a, b)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::seeded;
    use approx::assert_relative_eq;

    fn one_layer(dim: usize, weight: Tensor, relu_output: bool) -> Model {
        let mut config = ModelConfig::new(dim, 2);
        config.encoder_hidden = vec![];
        config.feature_dim = dim;
        config.projection_hidden = vec![];
        config.projection_dim = dim;
        config.relu_output = relu_output;
        let mut ident = vec![0.0; dim * dim];
        (0..dim).for_each(|i| ident[i * dim + i] = 1.0);
        let eye = Tensor::matrix(dim, dim, ident).unwrap();
        Model::from_parts(
            config,
            vec![Linear {
                weight,
                bias: Tensor::zeros(&[dim]),
            }],
            vec![Linear {
                weight: eye,
                bias: Tensor::zeros(&[dim]),
            }],
            Tensor::from_rows(&[vec![1.0; dim], vec![-1.0; dim]]).unwrap(),
        )
        .unwrap()
    }

    fn run_encode(model: &Model, x: Tensor) -> Tensor {
        let mut t = Tape::new();
        let p = model.register(&mut t);
        let xv = t.leaf(x);
        let f = model.encode(&mut t, &p, xv).unwrap();
        t.value(f).clone()
    }

    #[test]
    fn zero_weights_give_bias_only_output() {
        let mut rng = seeded(3, 0);
        let mut model = Model::new(ModelConfig::new(4, 3), &mut rng).unwrap();
        for l in &mut model.encoder {
            l.weight = Tensor::zeros(l.weight.shape());
        }
        let last = model.encoder.last_mut().unwrap();
        last.bias = Tensor::vector((0..32).map(|i| i as f64 - 10.0).collect());
        let x = Tensor::from_rows(&[[1.0, -2.0, 3.0, 4.0], [9.0, 9.0, 9.0, 9.0]]).unwrap();
        let out = run_encode(&model, x);
        for r in 0..2 {
            assert_eq!(out.row(r), model.encoder[2].bias.data());
        }
    }

    #[test]
    fn identity_encoder_with_output_relu() {
        let mut eye = Tensor::zeros(&[3, 3]);
        (0..3).for_each(|i| eye.data_mut()[i * 3 + i] = 1.0);
        let model = one_layer(3, eye, true);
        let out = run_encode(&model, Tensor::from_rows(&[[1.5, -2.0, 0.25]]).unwrap());
        assert_eq!(out.data(), &[1.5, 0.0, 0.25]);
    }

    #[test]
    fn seeded_encoder_golden() {
        let mut rng = seeded(0, 0);
        let model = Model::new(ModelConfig::new(4, 3), &mut rng).unwrap();
        let x = Tensor::from_rows(&[[0.5, -1.0, 2.0, 0.0]]).unwrap();
        let out = run_encode(&model, x);
        let golden = [
            -0.3300600843990403,
            0.09510501936879374,
            0.07015671542488655,
            -0.01493964976460753,
        ];
        for (a, b) in out.data().iter().zip(golden) {
            assert_relative_eq!(*a, b, epsilon = 1e-14);
        }
    }

    #[test]
    fn identity_head_projects_three_four_five() {
        let mut eye = Tensor::zeros(&[2, 2]);
        eye.data_mut()[0] = 1.0;
        eye.data_mut()[3] = 1.0;
        let model = one_layer(2, eye, false);
        let mut t = Tape::new();
        let p = model.register(&mut t);
        let f = t.leaf(Tensor::from_rows(&[[3.0, 4.0]]).unwrap());
        let z = model.project(&mut t, &p, f).unwrap();
        assert_relative_eq!(t.value(z).data()[0], 0.6, epsilon = 1e-12);
        assert_relative_eq!(t.value(z).data()[1], 0.8, epsilon = 1e-12);
    }

    #[test]
    fn feature_equal_to_prototype_scores_one() {
        let mut rng = seeded(5, 0);
        let model = Model::new(ModelConfig::new(4, 3), &mut rng).unwrap();
        let mut t = Tape::new();
        let p = model.register(&mut t);
        let f = t.leaf(Tensor::from_rows(&[model.prototypes.row(1).iter().map(|v| v * 7.0).collect::<Vec<_>>()]).unwrap());
        let (_, logits) = model.classify(&mut t, &p, f).unwrap();
        let l = t.value(logits).data();
        assert_relative_eq!(l[1], 1.0, epsilon = 1e-12);
        assert!(l[0] < 1.0 && l[2] < 1.0);
    }

    #[test]
    fn orthogonal_feature_scores_zero() {
        let mut eye = Tensor::zeros(&[2, 2]);
        eye.data_mut()[0] = 1.0;
        eye.data_mut()[3] = 1.0;
        let mut model = one_layer(2, eye, false);
        model.prototypes = Tensor::from_rows(&[[1.0, 0.0], [0.0, 1.0]]).unwrap();
        let mut t = Tape::new();
        let p = model.register(&mut t);
        let f = t.leaf(Tensor::from_rows(&[[0.0, 2.0]]).unwrap());
        let (_, logits) = model.classify(&mut t, &p, f).unwrap();
        assert_eq!(t.value(logits).data()[0], 0.0);
    }

    #[test]
    fn scaled_probabilities_follow_softmax() {
        let mut eye = Tensor::zeros(&[3, 3]);
        (0..3).for_each(|i| eye.data_mut()[i * 3 + i] = 1.0);
        let mut model = one_layer(3, eye.clone(), false);
        model.config.num_classes = 3;
        model.prototypes = eye;
        let pred = model
            .predict(&Tensor::from_rows(&[[1.0, 0.0, 0.0]]).unwrap(), 0.1)
            .unwrap();
        assert_relative_eq!(pred.logits.data()[0], 1.0, epsilon = 1e-9);
        let mut expected = pred.logits.data().iter().map(|l| l * 10.0).collect::<Vec<_>>();
        // scalar oracle on the exact logits
        let z: f64 = expected.iter().map(|v| v.exp()).sum();
        expected.iter_mut().for_each(|v| *v = v.exp() / z);
        for (a, b) in pred.probs.data().iter().zip(&expected) {
            assert_relative_eq!(*a, *b, epsilon = 1e-15);
        }
        let z = 10f64.exp() + 2.0;
        assert_relative_eq!(pred.probs.data()[0], 10f64.exp() / z, epsilon = 1e-9);
    }

    #[test]
    fn non_positive_temperature_is_config_error() {
        let mut rng = seeded(1, 0);
        let model = Model::new(ModelConfig::new(2, 2), &mut rng).unwrap();
        let x = Tensor::from_rows(&[[1.0, 1.0]]).unwrap();
        assert!(matches!(model.predict(&x, 0.0), Err(Error::Config(_))));
    }

    #[test]
    fn input_width_mismatch_is_dimension_error() {
        let mut rng = seeded(1, 0);
        let model = Model::new(ModelConfig::new(2, 2), &mut rng).unwrap();
        let x = Tensor::from_rows(&[[1.0, 1.0, 1.0]]).unwrap();
        assert!(matches!(model.predict(&x, 0.1), Err(Error::Dimension { .. })));
    }

    #[test]
    fn flat_roundtrip_and_freeze_mask() {
        let mut rng = seeded(2, 0);
        let mut config = ModelConfig::new(4, 3);
        config.freeze_encoder_except_last = true;
        let model = Model::new(config, &mut rng).unwrap();
        let flat = model.flatten();
        let mut other = model.clone();
        other.load_flat(&vec![0.0; flat.len()]).unwrap();
        other.load_flat(&flat).unwrap();
        assert_eq!(other, model);

        let mask = model.trainable_mask();
        let frozen = 4 * 64 + 64 + 64 * 64 + 64;
        assert!(mask[..frozen].iter().all(|&m| !m));
        assert!(mask[frozen..].iter().all(|&m| m));
        assert_eq!(model.prototype_range().len(), 3 * 32);
    }

    #[test]
    fn prototype_renormalization_is_idempotent() {
        let mut rng = seeded(9, 0);
        let mut model = Model::new(ModelConfig::new(4, 5), &mut rng).unwrap();
        for r in 0..5 {
            let n: f64 = model.prototypes.row(r).iter().map(|v| v * v).sum::<f64>().sqrt();
            assert_relative_eq!(n, 1.0, epsilon = 1e-12);
        }
        let before = model.prototypes.clone();
        model.normalize_prototypes();
        for (a, b) in model.prototypes.data().iter().zip(before.data()) {
            assert_relative_eq!(*a, *b, epsilon = 1e-15);
        }
    }

    #[test]
    fn augmented_views_keep_shape() {
        let mut rng = seeded(4, 0);
        let x = Tensor::from_rows(&[[1.0; 10]; 6]).unwrap();
        let (a, b) = Augment::default().views(&x, &mut rng);
        assert_eq!(a.shape(), x.shape());
        assert_eq!(b.shape(), x.shape());
        assert_ne!(a, b);
    }
}
