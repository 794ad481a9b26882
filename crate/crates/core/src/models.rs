//! Small convolutional classifiers and running weight averages.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::rng::{digest64, Streams};
use crate::scalar::Scalar;
use crate::tensor::{shape_str, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "layer", rename_all = "snake_case")]
pub enum Layer {
    /// Square kernel, stride 1.
    Conv {
        out_channels: usize,
        kernel: usize,
        padding: usize,
    },
    Relu,
    /// 2×2, stride 2, floor on odd extents.
    MaxPool2,
    /// Flattens whatever precedes it.
    Dense { out: usize },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelSpec {
    /// C×H×W.
    pub input: [usize; 3],
    /// Subtracted from every input pixel before the first layer.
    #[serde(default)]
    pub input_offset: f64,
    pub layers: Vec<Layer>,
    pub classes: usize,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ParamShape {
    pub name: String,
    pub shape: Vec<usize>,
    pub fan_in: usize,
}

impl ModelSpec {
    /// conv8-relu-pool, conv16-relu-pool, dense.
    pub fn desk(input: [usize; 3], classes: usize) -> Self {
        Self {
            input,
            input_offset: 0.5,
            layers: vec![
                Layer::Conv {
                    out_channels: 8,
                    kernel: 3,
                    padding: 1,
                },
                Layer::Relu,
                Layer::MaxPool2,
                Layer::Conv {
                    out_channels: 16,
                    kernel: 3,
                    padding: 1,
                },
                Layer::Relu,
                Layer::MaxPool2,
                Layer::Dense { out: classes },
            ],
            classes,
        }
    }

    /// One dense layer straight from pixels.
    pub fn linear(input: [usize; 3], classes: usize) -> Self {
        Self {
            input,
            input_offset: 0.0,
            layers: vec![Layer::Dense { out: classes }],
            classes,
        }
    }

    /// Walks the layer chain; returns parameter shapes in storage order.
    pub fn param_shapes(&self) -> Result<Vec<ParamShape>> {
        if self.layers.is_empty() {
            return Err(Error::invalid("model spec has no layers"));
        }
        if !self.input_offset.is_finite() {
            return Err(Error::invalid("input offset must be finite"));
        }
        if self.classes == 0 || self.input.iter().any(|&d| d == 0) {
            return Err(Error::invalid("model spec needs non-empty input and at least one class"));
        }
        let mut shapes = Vec::new();
        // Some(c, h, w) while spatial, None once flattened.
        let mut spatial = Some((self.input[0], self.input[1], self.input[2]));
        let mut flat = self.input.iter().product::<usize>();
        for (i, layer) in self.layers.iter().enumerate() {
            match *layer {
                Layer::Conv {
                    out_channels,
                    kernel,
                    padding,
                } => {
                    let (c, h, w) = spatial.ok_or_else(|| Error::invalid(format!("layer {i}: conv after dense")))?;
                    if out_channels == 0 || kernel == 0 || h + 2 * padding < kernel || w + 2 * padding < kernel {
                        return Err(Error::invalid(format!("layer {i}: conv does not fit {c}x{h}x{w}")));
                    }
                    let fan_in = c * kernel * kernel;
                    shapes.push(ParamShape {
                        name: format!("conv{i}.weight"),
                        shape: vec![out_channels, c, kernel, kernel],
                        fan_in,
                    });
                    shapes.push(ParamShape {
                        name: format!("conv{i}.bias"),
                        shape: vec![out_channels],
                        fan_in,
                    });
                    let (ho, wo) = (h + 2 * padding + 1 - kernel, w + 2 * padding + 1 - kernel);
                    spatial = Some((out_channels, ho, wo));
                    flat = out_channels * ho * wo;
                }
                Layer::Relu => {}
                Layer::MaxPool2 => {
                    let (c, h, w) = spatial.ok_or_else(|| Error::invalid(format!("layer {i}: pool after dense")))?;
                    if h < 2 || w < 2 {
                        return Err(Error::invalid(format!("layer {i}: pool on {c}x{h}x{w}")));
                    }
                    spatial = Some((c, h / 2, w / 2));
                    flat = c * (h / 2) * (w / 2);
                }
                Layer::Dense { out } => {
                    if out == 0 {
                        return Err(Error::invalid(format!("layer {i}: dense with zero outputs")));
                    }
                    shapes.push(ParamShape {
                        name: format!("dense{i}.weight"),
                        shape: vec![flat, out],
                        fan_in: flat,
                    });
                    shapes.push(ParamShape {
                        name: format!("dense{i}.bias"),
                        shape: vec![out],
                        fan_in: flat,
                    });
                    spatial = None;
                    flat = out;
                }
            }
        }
        if spatial.is_some() || flat != self.classes {
            return Err(Error::invalid(format!(
                "model output has {flat} values{}, expected {} classes",
                if spatial.is_some() { " (not flattened)" } else { "" },
                self.classes
            )));
        }
        Ok(shapes)
    }

    pub fn validate(&self) -> Result<()> {
        self.param_shapes().map(|_| ())
    }

    pub fn param_count(&self) -> Result<usize> {
        Ok(self
            .param_shapes()?
            .iter()
            .map(|p| p.shape.iter().product::<usize>())
            .sum())
    }

    pub fn hash(&self) -> u64 {
        digest64(&serde_json::to_vec(self).expect("spec serializes"))
    }
}

/// Named parameter tensors in the order [`ModelSpec::param_shapes`] lists them.
#[derive(Debug, Clone, PartialEq)]
pub struct Params<T> {
    entries: Vec<(String, Tensor<T>)>,
}

impl<T: Scalar> Params<T> {
    pub fn new(entries: Vec<(String, Tensor<T>)>) -> Self {
        Self { entries }
    }

    pub fn zeros(spec: &ModelSpec) -> Result<Self> {
        Ok(Self::new(
            spec.param_shapes()?
                .into_iter()
                .map(|p| (p.name, Tensor::zeros(&p.shape)))
                .collect(),
        ))
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn entries(&self) -> &[(String, Tensor<T>)] {
        &self.entries
    }

    pub fn tensors(&self) -> impl Iterator<Item = &Tensor<T>> {
        self.entries.iter().map(|(_, t)| t)
    }

    pub fn tensors_mut(&mut self) -> impl Iterator<Item = &mut Tensor<T>> {
        self.entries.iter_mut().map(|(_, t)| t)
    }

    pub fn get(&self, name: &str) -> Option<&Tensor<T>> {
        self.entries.iter().find(|(n, _)| n == name).map(|(_, t)| t)
    }

    pub fn scalar_count(&self) -> usize {
        self.tensors().map(Tensor::len).sum()
    }

    pub fn all_finite(&self) -> bool {
        self.tensors().all(Tensor::all_finite)
    }

    pub fn cast<U: Scalar>(&self) -> Params<U> {
        Params::new(self.entries.iter().map(|(n, t)| (n.clone(), t.cast())).collect())
    }

    pub fn map(&self, f: impl Fn(T) -> T + Copy) -> Self {
        Self::new(self.entries.iter().map(|(n, t)| (n.clone(), t.map(f))).collect())
    }

    /// Fails unless names and shapes agree with `spec`.
    pub fn check(&self, spec: &ModelSpec) -> Result<()> {
        let shapes = spec.param_shapes()?;
        if shapes.len() != self.entries.len() {
            return Err(Error::shape(
                "params",
                format!("{} tensors", shapes.len()),
                format!("{}", self.entries.len()),
            ));
        }
        for (p, (name, t)) in shapes.iter().zip(&self.entries) {
            if &p.name != name || p.shape != t.shape() {
                return Err(Error::shape(
                    "params",
                    format!("{} {}", p.name, shape_str(&p.shape)),
                    format!("{name} {}", shape_str(t.shape())),
                ));
            }
        }
        Ok(())
    }

    fn check_same_layout(&self, other: &Self, op: &'static str) -> Result<()> {
        let layout = |p: &Self| {
            p.entries
                .iter()
                .map(|(n, t)| format!("{n}{}", shape_str(t.shape())))
                .collect::<Vec<_>>()
                .join(",")
        };
        let (a, b) = (layout(self), layout(other));
        if a != b {
            return Err(Error::shape(op, a, b));
        }
        Ok(())
    }

    /// Differentiable (`trainable`) or constant tape leaves, one per tensor.
    pub fn on_tape(&self, tape: &mut Tape<T>, trainable: bool) -> Vec<Var> {
        self.entries
            .iter()
            .map(|(n, t)| {
                if trainable {
                    tape.param(n.clone(), t.clone())
                } else {
                    tape.constant(t.clone())
                }
            })
            .collect()
    }
}

/// Uniform ±1/√fan_in for every weight and bias.
pub fn build_model<T: Scalar>(spec: &ModelSpec, seed: u64) -> Result<Params<T>> {
    let mut rng = Streams::new(seed).stream("init");
    let mut entries = Vec::new();
    for p in spec.param_shapes()? {
        let bound = 1.0 / (p.fan_in as f64).sqrt();
        let t = Tensor::from_fn(&p.shape, |_| T::of(rng.gen_range(-bound..=bound)));
        entries.push((p.name, t));
    }
    Ok(Params::new(entries))
}

/// Records the forward pass of `spec` on `tape`; `params` must come from [`Params::on_tape`].
pub fn forward<T: Scalar>(spec: &ModelSpec, tape: &mut Tape<T>, params: &[Var], x: Var) -> Result<Var> {
    let shape = tape.value(x).shape();
    if shape.len() != 4 || shape[1..] != spec.input {
        return Err(Error::shape(
            "forward",
            format!("[N,{},{},{}]", spec.input[0], spec.input[1], spec.input[2]),
            shape_str(shape),
        ));
    }
    let mut next = params.iter().copied();
    let mut take = || next.next().ok_or_else(|| Error::invalid("forward: too few parameters"));
    let mut h = if spec.input_offset == 0.0 {
        x
    } else {
        tape.add_scalar(x, -spec.input_offset)?
    };
    for layer in &spec.layers {
        h = match *layer {
            Layer::Conv { padding, .. } => {
                let (w, b) = (take()?, take()?);
                tape.conv2d(h, w, Some(b), padding)?
            }
            Layer::Relu => tape.relu(h)?,
            Layer::MaxPool2 => tape.max_pool2(h)?,
            Layer::Dense { .. } => {
                let (w, b) = (take()?, take()?);
                let flat = tape.flatten(h)?;
                let z = tape.matmul(flat, w)?;
                tape.add_bias(z, b)?
            }
        };
    }
    Ok(h)
}

/// Logits for an N×C×H×W batch.
pub fn predict_logits<T: Scalar>(spec: &ModelSpec, params: &Params<T>, x: &Tensor<T>) -> Result<Tensor<T>> {
    let mut tape = Tape::new();
    let vars = params.on_tape(&mut tape, false);
    let input = tape.constant(x.clone());
    let out = forward(spec, &mut tape, &vars, input)?;
    Ok(tape.value(out).clone())
}

/// Row-wise argmax; ties go to the lowest index.
pub fn argmax_rows<T: Scalar>(logits: &Tensor<T>) -> Vec<usize> {
    let c = *logits.shape().last().unwrap_or(&1);
    logits
        .data()
        .chunks_exact(c.max(1))
        .map(|row| {
            let mut best = 0;
            for (i, &v) in row.iter().enumerate() {
                if v > row[best] {
                    best = i;
                }
            }
            best
        })
        .collect()
}

pub fn predict<T: Scalar>(spec: &ModelSpec, params: &Params<T>, x: &Tensor<T>) -> Result<Vec<usize>> {
    Ok(argmax_rows(&predict_logits(spec, params, x)?))
}

/// Running arithmetic mean of parameter snapshots.
#[derive(Debug, Clone, PartialEq)]
pub struct WAState<T> {
    pub params: Params<T>,
    /// Snapshots absorbed so far.
    pub count: u64,
    pub start_epoch: usize,
    pub cycle: usize,
}

impl<T: Scalar> WAState<T> {
    /// Empty average shaped like `template`; the first update replaces it outright.
    pub fn new(template: &Params<T>, start_epoch: usize) -> Self {
        Self {
            params: template.map(|_| T::zero()),
            count: 0,
            start_epoch,
            cycle: 1,
        }
    }
}

/// `W ← (W·k + θ) / (k + 1)`.
pub fn wa_update<T: Scalar>(state: WAState<T>, theta: &Params<T>) -> Result<WAState<T>> {
    state.params.check_same_layout(theta, "wa_update")?;
    let k = T::of(state.count as f64);
    let k1 = T::of(state.count as f64 + 1.0);
    let entries = state
        .params
        .entries
        .into_iter()
        .zip(theta.tensors())
        .map(|((name, w), t)| {
            let avg = w.zip_map(t, |a, b| (a * k + b) / k1)?;
            Ok((name, avg))
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(WAState {
        params: Params::new(entries),
        count: state.count + 1,
        start_epoch: state.start_epoch,
        cycle: state.cycle,
    })
}

#[cfg(test)]
mod tests {
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    use super::*;

    #[test]
    fn desk_parameter_count_is_closed_form() {
        let spec = ModelSpec::desk([1, 16, 16], 2);
        let by_enumeration: usize = spec
            .param_shapes()
            .unwrap()
            .iter()
            .map(|p| p.shape.iter().product::<usize>())
            .sum();
        assert_eq!(by_enumeration, 8 * (9 + 1) + 16 * (8 * 9 + 1) + 2 * (16 * 16 + 1));
        assert_eq!(spec.param_count().unwrap(), 1762);
        assert_eq!(build_model::<f32>(&spec, 0).unwrap().scalar_count(), 1762);
    }

    #[test]
    fn same_seed_same_parameters() {
        let spec = ModelSpec::desk([3, 8, 8], 10);
        let a = build_model::<f32>(&spec, 7).unwrap();
        let b = build_model::<f32>(&spec, 7).unwrap();
        let c = build_model::<f32>(&spec, 8).unwrap();
        assert_eq!(a, b);
        assert_ne!(a, c);
    }

    #[test]
    fn bad_specs_are_rejected() {
        let mut spec = ModelSpec::desk([1, 16, 16], 2);
        spec.layers.clear();
        assert!(build_model::<f32>(&spec, 0).is_err());
        let spec = ModelSpec {
            layers: vec![Layer::Dense { out: 3 }],
            ..ModelSpec::linear([1, 4, 4], 2)
        };
        assert!(spec.validate().is_err());
        let spec = ModelSpec {
            input_offset: f64::NAN,
            ..ModelSpec::linear([1, 4, 4], 2)
        };
        assert!(spec.validate().is_err());
        let spec = ModelSpec {
            layers: vec![Layer::MaxPool2, Layer::Dense { out: 2 }],
            ..ModelSpec::linear([1, 1, 1], 2)
        };
        assert!(spec.validate().is_err());
        let spec = ModelSpec {
            layers: vec![Layer::Dense { out: 2 }, Layer::MaxPool2],
            ..ModelSpec::linear([1, 4, 4], 2)
        };
        assert!(spec.validate().is_err());
    }

    #[test]
    fn zero_parameters_give_zero_logits_and_class_zero() {
        let spec = ModelSpec::desk([1, 8, 8], 3);
        let params = Params::<f64>::zeros(&spec).unwrap();
        let x = Tensor::from_fn(&[4, 1, 8, 8], |i| (i % 7) as f64 / 7.0);
        let logits = predict_logits(&spec, &params, &x).unwrap();
        assert!(logits.data().iter().all(|&v| v == 0.0));
        assert_eq!(argmax_rows(&logits), vec![0; 4]);
    }

    #[test]
    fn identical_images_identical_rows() {
        let spec = ModelSpec::desk([1, 8, 8], 3);
        let params = build_model::<f32>(&spec, 1).unwrap();
        let img: Vec<f32> = (0..64).map(|i| (i as f32 * 0.37).sin().abs()).collect();
        let x = Tensor::new(vec![3, 1, 8, 8], img.repeat(3)).unwrap();
        let logits = predict_logits(&spec, &params, &x).unwrap();
        let rows: Vec<&[f32]> = logits.data().chunks(3).collect();
        assert_eq!(rows[0], rows[1]);
        assert_eq!(rows[1], rows[2]);
    }

    #[test]
    fn linear_layer_matches_hand_matmul() {
        let spec = ModelSpec::linear([1, 2, 2], 2);
        let w = vec![1.0, -1.0, 0.5, 2.0, -3.0, 0.0, 0.25, 1.0];
        let b = vec![0.1, -0.2];
        let params = Params::new(vec![
            ("dense0.weight".into(), Tensor::new(vec![4, 2], w).unwrap()),
            ("dense0.bias".into(), Tensor::from_vec(b)),
        ]);
        params.check(&spec).unwrap();
        let x = Tensor::new(vec![2, 1, 2, 2], vec![1.0, 2.0, 3.0, 4.0, 0.0, -1.0, 0.5, 0.0]).unwrap();
        let logits = predict_logits(&spec, &params, &x).unwrap();
        let want = [
            1.0 * 1.0 + 2.0 * 0.5 + 3.0 * -3.0 + 4.0 * 0.25 + 0.1,
            1.0 * -1.0 + 2.0 * 2.0 + 3.0 * 0.0 + 4.0 * 1.0 - 0.2,
            0.0 * 1.0 + -1.0 * 0.5 + 0.5 * -3.0 + 0.0 * 0.25 + 0.1,
            0.0 * -1.0 + -1.0 * 2.0 + 0.5 * 0.0 + 0.0 * 1.0 - 0.2,
        ];
        for (g, w) in logits.data().iter().zip(want) {
            let g: f64 = *g;
            assert!((g - w).abs() < 1e-12);
        }
    }

    #[test]
    fn input_offset_shifts_pixels_before_the_first_layer() {
        let plain = ModelSpec::linear([1, 2, 2], 2);
        let shifted = ModelSpec {
            input_offset: 0.25,
            ..plain.clone()
        };
        let params = build_model::<f64>(&plain, 9).unwrap();
        let x = Tensor::new(vec![1, 1, 2, 2], vec![0.25, 0.5, 1.0, 0.0]).unwrap();
        let a = predict_logits(&shifted, &params, &x).unwrap();
        let b = predict_logits(&plain, &params, &x.map(|v| v - 0.25)).unwrap();
        assert_eq!(a, b);
        assert_ne!(plain.hash(), shifted.hash());
    }

    #[test]
    fn batch_permutation_permutes_rows() {
        let spec = ModelSpec::desk([1, 8, 8], 4);
        let params = build_model::<f64>(&spec, 3).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let x = Tensor::from_fn(&[5, 1, 8, 8], |_| rng.gen_range(0.0..1.0));
        let perm = [3, 0, 4, 1, 2];
        let a = predict_logits(&spec, &params, &x).unwrap();
        let b = predict_logits(&spec, &params, &x.select_outer(&perm).unwrap()).unwrap();
        assert_eq!(b, a.select_outer(&perm).unwrap());
    }

    #[test]
    fn shape_mismatch_is_an_error() {
        let spec = ModelSpec::desk([1, 8, 8], 2);
        let params = build_model::<f32>(&spec, 0).unwrap();
        assert!(predict_logits(&spec, &params, &Tensor::zeros(&[2, 1, 8, 9])).is_err());
        assert!(predict_logits(&spec, &params, &Tensor::zeros(&[1, 8, 8])).is_err());
    }

    fn scalar_params(v: f64) -> Params<f64> {
        Params::new(vec![("w".into(), Tensor::from_vec(vec![v]))])
    }

    #[test]
    fn wa_examples() {
        let s = WAState::new(&scalar_params(0.0), 0);
        let theta = Params::new(vec![("w".into(), Tensor::from_vec(vec![0.1f64, -3.7, 1e300]))]);
        let one = wa_update(WAState::new(&theta, 0), &theta).unwrap();
        assert_eq!(one.params, theta);
        assert_eq!(one.count, 1);

        let s = WAState { count: 1, ..s };
        let two = wa_update(s, &scalar_params(2.0)).unwrap();
        assert_eq!(two.params.get("w").unwrap().data(), &[1.0]);
        assert_eq!(two.count, 2);
    }

    #[test]
    fn wa_is_the_arithmetic_mean() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let mut state = WAState::new(&scalar_params(0.0), 0);
        let mut seen = Vec::new();
        for _ in 0..5 {
            let v = rng.gen_range(-10.0..10.0);
            seen.push(v);
            state = wa_update(state, &scalar_params(v)).unwrap();
        }
        let mean = seen.iter().sum::<f64>() / 5.0;
        assert!((state.params.get("w").unwrap().data()[0] - mean).abs() < 1e-12);
    }

    #[test]
    fn wa_rejects_layout_mismatch() {
        let s = WAState::new(&scalar_params(0.0), 0);
        let other = Params::new(vec![("w".into(), Tensor::<f64>::from_vec(vec![1.0, 2.0]))]);
        assert!(wa_update(s.clone(), &other).is_err());
        let renamed = Params::new(vec![("v".into(), Tensor::<f64>::from_vec(vec![1.0]))]);
        assert!(wa_update(s, &renamed).is_err());
    }

    proptest::proptest! {
        #[test]
        fn wa_commutes_with_scaling(vals in proptest::collection::vec(-5.0f64..5.0, 1..8), a in -3.0f64..3.0) {
            let mut plain = WAState::new(&scalar_params(0.0), 0);
            let mut scaled = WAState::new(&scalar_params(0.0), 0);
            for &v in &vals {
                plain = wa_update(plain, &scalar_params(v)).unwrap();
                scaled = wa_update(scaled, &scalar_params(a * v)).unwrap();
            }
            let p = plain.params.get("w").unwrap().data()[0];
            let s = scaled.params.get("w").unwrap().data()[0];
            proptest::prop_assert!((s - a * p).abs() <= 1e-12 * (1.0 + s.abs()));
        }
    }
}
