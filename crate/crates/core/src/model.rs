//! MLP encoder, projection head and cosine prototype classifier.

use alloc::vec;
use alloc::vec::Vec;

use rand::Rng as _;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng;
use crate::tensor::{Gradients, Tape, Tensor, Var};

/// Pixel normalization applied before the first layer.
const INPUT_CENTER: f64 = 0.5;
const INPUT_SCALE: f64 = 4.0;

/// Inference batch size for the gradient-free helpers.
const CHUNK: usize = 256;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelDims {
    /// Flattened image length `C·H·W`; filled in from the data.
    pub input: usize,
    pub hidden: [usize; 2],
    pub feature: usize,
    pub projection: usize,
    /// `K`, the total class count; filled in from the data.
    pub num_classes: usize,
}

impl Default for ModelDims {
    fn default() -> Self {
        Self {
            input: 3 * 32 * 32,
            hidden: [256, 256],
            feature: 64,
            projection: 32,
            num_classes: 10,
        }
    }
}

impl ModelDims {
    pub fn validate(&self) -> Result<()> {
        let all = [
            ("model.input", self.input),
            ("model.hidden", self.hidden[0]),
            ("model.hidden", self.hidden[1]),
            ("model.feature", self.feature),
            ("model.projection", self.projection),
            ("model.num_classes", self.num_classes),
        ];
        for (field, v) in all {
            if v == 0 {
                return Err(Error::invalid(field, "must be positive"));
            }
        }
        Ok(())
    }

    /// Parameter shapes in declaration order.
    pub fn shapes(&self) -> [Vec<usize>; 9] {
        let [h1, h2] = self.hidden;
        [
            vec![self.input, h1],
            vec![h1],
            vec![h1, h2],
            vec![h2],
            vec![h2, self.feature],
            vec![self.feature],
            vec![self.feature, self.projection],
            vec![self.projection],
            vec![self.num_classes, self.feature],
        ]
    }

    pub fn param_count(&self) -> usize {
        self.shapes()
            .iter()
            .map(|s| s.iter().product::<usize>())
            .sum()
    }
}

pub const PARAM_NAMES: [&str; 9] = [
    "encoder.w1",
    "encoder.b1",
    "encoder.w2",
    "encoder.b2",
    "encoder.w3",
    "encoder.b3",
    "head.w",
    "head.b",
    "classifier.prototypes",
];

/// Encoder `f`, projection head and the `K × d` learnable prototypes.
#[derive(Debug, Clone, PartialEq)]
pub struct Model {
    dims: ModelDims,
    params: Vec<Tensor>,
}

/// Parameter leaves of one model on one tape.
#[derive(Debug, Clone, Copy)]
pub struct Bound {
    vars: [Var; 9],
}

impl Bound {
    pub fn vars(&self) -> &[Var; 9] {
        &self.vars
    }

    pub fn prototypes(&self) -> Var {
        self.vars[8]
    }
}

impl Model {
    /// Xavier-uniform weights, zero biases, prototypes uniform on the unit
    /// sphere.
    pub fn init(dims: ModelDims, seed: u64) -> Result<Self> {
        dims.validate()?;
        let mut rng = rng::stream(seed, "init");
        let shapes = dims.shapes();
        let mut params = Vec::with_capacity(9);
        for (i, shape) in shapes.into_iter().enumerate() {
            let n: usize = shape.iter().product();
            let data = match i {
                0 | 2 | 4 | 6 => {
                    let limit = libm::sqrt(6.0 / (shape[0] + shape[1]) as f64);
                    (0..n).map(|_| rng.random_range(-limit..=limit)).collect()
                }
                8 => {
                    let d = dims.feature;
                    let mut data: Vec<f64> =
                        (0..n).map(|_| StandardNormal.sample(&mut rng)).collect();
                    for row in data.chunks_mut(d) {
                        let norm = libm::sqrt(row.iter().map(|v| v * v).sum::<f64>());
                        row.iter_mut().for_each(|v| *v /= norm);
                    }
                    data
                }
                _ => vec![0.0; n],
            };
            params.push(Tensor::new(shape, data)?.with_requires_grad(true));
        }
        Ok(Self { dims, params })
    }

    /// Rebuilds a model from parameters concatenated in declaration order.
    pub fn from_flat(dims: ModelDims, flat: &[f64]) -> Result<Self> {
        dims.validate()?;
        if flat.len() != dims.param_count() {
            return Err(Error::invalid(
                "parameters",
                alloc::format!("expected {} values, got {}", dims.param_count(), flat.len()),
            ));
        }
        let mut offset = 0;
        let params = dims
            .shapes()
            .into_iter()
            .map(|shape| {
                let n: usize = shape.iter().product();
                let t = Tensor::new(shape, flat[offset..offset + n].to_vec());
                offset += n;
                t.map(|t| t.with_requires_grad(true))
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Self { dims, params })
    }

    pub fn flat_params(&self) -> Vec<f64> {
        self.params
            .iter()
            .flat_map(|p| p.data().iter().copied())
            .collect()
    }

    pub fn dims(&self) -> &ModelDims {
        &self.dims
    }

    pub fn params(&self) -> &[Tensor] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [Tensor] {
        &mut self.params
    }

    pub fn prototypes(&self) -> &Tensor {
        &self.params[8]
    }

    /// Records the parameters as trainable leaves.
    pub fn bind(&self, tape: &mut Tape) -> Bound {
        let vars = core::array::from_fn(|i| tape.leaf(&self.params[i]));
        Bound { vars }
    }

    /// Records the parameters as constants (no gradient).
    pub fn bind_frozen(&self, tape: &mut Tape) -> Bound {
        let vars = core::array::from_fn(|i| tape.constant(self.params[i].clone()));
        Bound { vars }
    }

    /// Adds the gradients of a backward pass into the parameter buffers.
    pub fn accumulate_grads(&mut self, grads: &Gradients, bound: &Bound) {
        for (p, &v) in self.params.iter_mut().zip(&bound.vars) {
            if let Some(g) = grads.get(v) {
                p.accumulate_grad(g);
            }
        }
    }

    pub fn zero_grad(&mut self) {
        self.params.iter_mut().for_each(Tensor::zero_grad);
    }

    /// `h = f(x)` for a `[B × C·H·W]` batch.
    pub fn forward_features(&self, tape: &mut Tape, bound: &Bound, x: Var) -> Result<Var> {
        let v = &bound.vars;
        let centered = {
            let shift = tape.constant(Tensor::full(tape.shape(x).to_vec(), INPUT_CENTER));
            let d = tape.sub(x, shift)?;
            tape.scale(d, INPUT_SCALE)
        };
        let a1 = tape.matmul(centered, v[0])?;
        let a1 = tape.add_row_vector(a1, v[1])?;
        let a1 = tape.relu(a1);
        let a2 = tape.matmul(a1, v[2])?;
        let a2 = tape.add_row_vector(a2, v[3])?;
        let a2 = tape.relu(a2);
        let h = tape.matmul(a2, v[4])?;
        tape.add_row_vector(h, v[5])
    }

    /// Unit-norm projection `z` of features `h`.
    pub fn project(&self, tape: &mut Tape, bound: &Bound, h: Var) -> Result<Var> {
        let z = tape.matmul(h, bound.vars[6])?;
        let z = tape.add_row_vector(z, bound.vars[7])?;
        tape.l2_normalize_rows(z)
    }

    /// Class probabilities of features `h` at temperature `tau`.
    pub fn classify(&self, tape: &mut Tape, bound: &Bound, h: Var, tau: f64) -> Result<Var> {
        classify_with(tape, h, bound.prototypes(), tau)
    }

    /// Features of every image, computed without recording gradients.
    pub fn features(&self, images: &[&Tensor]) -> Result<Tensor> {
        self.map_chunks(images, self.dims.feature, |model, tape, bound, x| {
            model.forward_features(tape, bound, x)
        })
    }

    /// Class probabilities of every image at temperature `tau`.
    pub fn probabilities(&self, images: &[&Tensor], tau: f64) -> Result<Tensor> {
        self.map_chunks(images, self.dims.num_classes, |model, tape, bound, x| {
            let h = model.forward_features(tape, bound, x)?;
            model.classify(tape, bound, h, tau)
        })
    }

    fn map_chunks(
        &self,
        images: &[&Tensor],
        width: usize,
        f: impl Fn(&Self, &mut Tape, &Bound, Var) -> Result<Var>,
    ) -> Result<Tensor> {
        let mut out = Vec::with_capacity(images.len() * width);
        for chunk in images.chunks(CHUNK) {
            let mut tape = Tape::new();
            let bound = self.bind_frozen(&mut tape);
            let x = tape.constant(stack_images(chunk)?);
            let y = f(self, &mut tape, &bound, x)?;
            out.extend_from_slice(tape.value(y));
        }
        Tensor::new(vec![images.len(), width], out)
    }
}

/// `p_i^(k) = softmax_k(⟨h_i/‖h_i‖, c_k/‖c_k‖⟩ / tau)`.
pub fn classify_with(tape: &mut Tape, h: Var, prototypes: Var, tau: f64) -> Result<Var> {
    let logits = cosine_logits(tape, h, prototypes)?;
    tape.softmax_rows(logits, tau)
}

/// Cosine similarity of every row of `a` with every row of `b`.
pub fn cosine_logits(tape: &mut Tape, a: Var, b: Var) -> Result<Var> {
    if !(tape.shape(a).len() == 2 && tape.shape(b).len() == 2) {
        return Err(Error::ShapeMismatch {
            op: "cosine_logits",
            left: tape.shape(a).to_vec(),
            right: tape.shape(b).to_vec(),
        });
    }
    let an = tape.l2_normalize_rows(a)?;
    let bn = tape.l2_normalize_rows(b)?;
    let bt = tape.transpose(bn)?;
    tape.matmul(an, bt)
}

/// Flattens `[C, H, W]` images into one `[B × C·H·W]` tensor.
pub fn stack_images(images: &[&Tensor]) -> Result<Tensor> {
    let width = images.first().map_or(0, |t| t.len());
    let mut data = Vec::with_capacity(images.len() * width);
    for img in images {
        if img.len() != width {
            return Err(Error::ShapeMismatch {
                op: "stack_images",
                left: images[0].shape().to_vec(),
                right: img.shape().to_vec(),
            });
        }
        data.extend_from_slice(img.data());
    }
    Tensor::new(vec![images.len(), width], data)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::grad_check;

    fn tiny() -> ModelDims {
        ModelDims {
            input: 6,
            hidden: [5, 4],
            feature: 3,
            projection: 2,
            num_classes: 4,
        }
    }

    fn input(b: usize, d: usize, seed: u64) -> Tensor {
        let mut r = rng::from_seed(seed);
        Tensor::new(vec![b, d], (0..b * d).map(|_| r.random::<f64>()).collect()).unwrap()
    }

    #[test]
    fn zero_parameters_give_zero_features() {
        let dims = tiny();
        let model = Model::from_flat(dims, &vec![0.0; dims.param_count()]).unwrap();
        let mut tape = Tape::new();
        let b = model.bind(&mut tape);
        let x = tape.constant(input(3, 6, 0));
        let h = model.forward_features(&mut tape, &b, x).unwrap();
        assert!(tape.value(h).iter().all(|&v| v == 0.0));
    }

    #[test]
    fn identical_rows_give_identical_features() {
        let model = Model::init(tiny(), 1).unwrap();
        let row = input(1, 6, 2);
        let images = [&row, &row, &row];
        let f = model.features(&images.map(|t| t)).unwrap();
        assert_eq!(f.row(0), f.row(1));
        assert_eq!(f.row(1), f.row(2));
    }

    #[test]
    fn classify_examples() {
        let mut tape = Tape::new();
        let h = tape.constant(Tensor::from_rows(&[[2.0, 0.0]]).unwrap());
        let one = tape.constant(Tensor::from_rows(&[[1.0, 5.0]]).unwrap());
        let p = classify_with(&mut tape, h, one, 0.1).unwrap();
        assert_eq!(tape.value(p), &[1.0]);

        let c = tape.constant(Tensor::from_rows(&[[1.0, 0.0], [0.0, 1.0]]).unwrap());
        let p = classify_with(&mut tape, h, c, 1.0).unwrap();
        let e = core::f64::consts::E;
        assert!((tape.value(p)[0] - e / (e + 1.0)).abs() < 1e-12);
        assert!((tape.value(p)[0] - 0.7311).abs() < 1e-4);
        assert!((tape.value(p)[1] - 0.2689).abs() < 1e-4);

        let eq = tape.constant(Tensor::from_rows(&[[1.0, 1.0]]).unwrap());
        let p = classify_with(&mut tape, eq, c, 0.3).unwrap();
        assert!(tape.value(p).iter().all(|&v| (v - 0.5).abs() < 1e-12));

        assert!(classify_with(&mut tape, h, c, 0.0).is_err());
    }

    #[test]
    fn classify_is_scale_invariant() {
        let model = Model::init(tiny(), 3).unwrap();
        let h = input(5, 3, 4);
        let scaled = Tensor::new(vec![5, 3], h.data().iter().map(|v| v * 7.5).collect()).unwrap();
        let run = |h: &Tensor| {
            let mut tape = Tape::new();
            let b = model.bind_frozen(&mut tape);
            let hv = tape.constant(h.clone());
            let p = model.classify(&mut tape, &b, hv, 0.1).unwrap();
            tape.value(p).to_vec()
        };
        let (a, b) = (run(&h), run(&scaled));
        for (x, y) in a.iter().zip(&b) {
            assert!((x - y).abs() < 1e-10);
        }
        for row in a.chunks(4) {
            assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn init_is_deterministic_with_unit_prototypes() {
        let dims = ModelDims::default();
        let a = Model::init(dims, 9).unwrap();
        let b = Model::init(dims, 9).unwrap();
        assert_eq!(a, b);
        for row in a.prototypes().data().chunks(dims.feature) {
            let n = row.iter().map(|v| v * v).sum::<f64>().sqrt();
            assert!((n - 1.0).abs() < 1e-12);
        }
        assert!(a.params()[1].data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn init_predictions_are_near_uniform_on_average() {
        // averaged over inputs and 10 seeds
        for k in [2usize, 5, 10, 20] {
            let dims = ModelDims {
                input: 48,
                num_classes: k,
                ..ModelDims::default()
            };
            let mut mean = vec![0.0; k];
            for seed in 0..10 {
                let model = Model::init(dims, seed).unwrap();
                let x = input(32, 48, 100 + seed);
                let rows: Vec<Tensor> = (0..32)
                    .map(|i| Tensor::new(vec![48], x.row(i).to_vec()).unwrap())
                    .collect();
                let refs: Vec<&Tensor> = rows.iter().collect();
                let p = model.probabilities(&refs, 0.1).unwrap();
                for row in p.data().chunks(k) {
                    for (m, v) in mean.iter_mut().zip(row) {
                        *m += v / 320.0;
                    }
                }
            }
            let dev = mean
                .iter()
                .map(|m| (m - 1.0 / k as f64).abs())
                .fold(0.0, f64::max);
            assert!(dev < 0.2, "K={k}: deviation {dev}");
        }
    }

    #[test]
    fn end_to_end_parameter_gradients_match_finite_differences() {
        // positive biases keep every ReLU active, away from its kink
        let dims = tiny();
        let mut model = Model::init(dims, 5).unwrap();
        for i in [1, 3] {
            model.params_mut()[i]
                .data_mut()
                .iter_mut()
                .for_each(|b| *b = 3.0);
        }
        let x = input(4, 6, 6);
        for which in 0..9 {
            let base = model.clone();
            let x = x.clone();
            let f = move |tape: &mut Tape, p: Var| {
                let mut vars = base.bind_frozen(tape).vars;
                vars[which] = p;
                let bound = Bound { vars };
                let xv = tape.constant(x.clone());
                let h = base.forward_features(tape, &bound, xv)?;
                let z = base.project(tape, &bound, h)?;
                let probs = base.classify(tape, &bound, h, 0.5)?;
                let lp = tape.log(probs)?;
                let s1 = tape.sum(lp);
                let s2 = tape.sum(z);
                let s2 = tape.scale(s2, 0.3);
                tape.add(s1, s2)
            };
            let r = grad_check(f, &model.params()[which].clone(), 1e-5, 1e-4).unwrap();
            assert!(r.passed(), "{}: {}", PARAM_NAMES[which], r.max_rel_error());
        }
    }

    #[test]
    fn flat_round_trip() {
        let m = Model::init(tiny(), 2).unwrap();
        let back = Model::from_flat(*m.dims(), &m.flat_params()).unwrap();
        assert_eq!(m, back);
        assert!(Model::from_flat(*m.dims(), &[0.0; 3]).is_err());
    }
}
