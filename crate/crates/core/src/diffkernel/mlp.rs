//! Multilayer perceptrons with recorded forward passes and exact
//! reverse-mode gradients.

use rand::Rng;
use serde::{Deserialize, Serialize};

use super::tensor::{Scalar, Tensor};
use super::{Gradients, ParameterSet};
use crate::error::{Error, Result};

/// Hidden-layer activation.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Activation {
    /// x * sigmoid(x); smooth gradients suit the denoiser.
    Silu,
    Relu,
    Tanh,
}

impl Activation {
    fn apply<S: Scalar>(self, x: S) -> S {
        match self {
            Activation::Silu => {
                let sig = S::one() / (S::one() + (-x).exp());
                x * sig
            }
            Activation::Relu => {
                if x > S::zero() {
                    x
                } else {
                    S::zero()
                }
            }
            Activation::Tanh => x.tanh(),
        }
    }

    /// Derivative in terms of the pre-activation value.
    fn derivative<S: Scalar>(self, x: S) -> S {
        match self {
            Activation::Silu => {
                let sig = S::one() / (S::one() + (-x).exp());
                sig + x * sig * (S::one() - sig)
            }
            Activation::Relu => {
                if x > S::zero() {
                    S::one()
                } else {
                    S::zero()
                }
            }
            Activation::Tanh => {
                let t = x.tanh();
                S::one() - t * t
            }
        }
    }
}

/// Layer widths and activation of one MLP: `input -> hidden... ->
/// output`, activation applied after every layer except the last.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MlpSpec {
    pub input: usize,
    pub hidden: Vec<usize>,
    pub output: usize,
    pub activation: Activation,
}

impl MlpSpec {
    pub fn new(input: usize, hidden: Vec<usize>, output: usize) -> MlpSpec {
        MlpSpec {
            input,
            hidden,
            output,
            activation: Activation::Silu,
        }
    }

    /// (in, out) widths of every linear layer.
    pub fn layer_dims(&self) -> Vec<(usize, usize)> {
        let mut dims = Vec::with_capacity(self.hidden.len() + 1);
        let mut prev = self.input;
        for &h in &self.hidden {
            dims.push((prev, h));
            prev = h;
        }
        dims.push((prev, self.output));
        dims
    }

    pub fn weight_name(prefix: &str, layer: usize) -> String {
        format!("{prefix}.w{layer}")
    }

    pub fn bias_name(prefix: &str, layer: usize) -> String {
        format!("{prefix}.b{layer}")
    }
}

/// Recorded forward pass of one MLP, consumed by [`mlp_backward`].
#[derive(Debug)]
pub struct MlpTrace<S: Scalar> {
    /// Input to each linear layer.
    inputs: Vec<Tensor<S>>,
    /// Pre-activation output of each hidden layer.
    preacts: Vec<Tensor<S>>,
    consumed: bool,
}

/// Insert freshly initialized parameters for `spec` under `prefix`.
///
/// Kaiming-style normal init scaled by fan-in for hidden layers; the
/// final layer uses a smaller 1/fan-in scale. Biases start at zero.
pub fn init_mlp<S: Scalar>(
    params: &mut ParameterSet<S>,
    prefix: &str,
    spec: &MlpSpec,
    rng: &mut impl Rng,
) {
    let dims = spec.layer_dims();
    let last = dims.len() - 1;
    for (i, (fan_in, fan_out)) in dims.into_iter().enumerate() {
        let std = if i == last {
            (1.0 / fan_in as f64).sqrt()
        } else {
            (2.0 / fan_in as f64).sqrt()
        };
        let w = Tensor::<S>::randn(vec![fan_in, fan_out], rng).scale(S::from_f64(std));
        params.insert(MlpSpec::weight_name(prefix, i), w);
        params.insert(MlpSpec::bias_name(prefix, i), Tensor::zeros(vec![fan_out]));
    }
}

/// Forward pass over a batch `x` of shape `(B, input)`, recording
/// enough to compute exact reverse-mode gradients.
pub fn mlp_forward<S: Scalar>(
    params: &ParameterSet<S>,
    prefix: &str,
    spec: &MlpSpec,
    x: &Tensor<S>,
) -> Result<(Tensor<S>, MlpTrace<S>)> {
    if x.shape().len() != 2 || x.cols() != spec.input {
        return Err(Error::Validation(format!(
            "mlp {prefix} expects (B, {}), got {:?}",
            spec.input,
            x.shape()
        )));
    }
    let dims = spec.layer_dims();
    let mut inputs = Vec::with_capacity(dims.len());
    let mut preacts = Vec::with_capacity(dims.len().saturating_sub(1));
    let mut cur = x.clone();
    for (i, _) in dims.iter().enumerate() {
        let w = params.get(&MlpSpec::weight_name(prefix, i))?;
        let b = params.get(&MlpSpec::bias_name(prefix, i))?;
        inputs.push(cur.clone());
        let pre = cur.matmul(w)?.add_row(b)?;
        if i + 1 < dims.len() {
            preacts.push(pre.clone());
            cur = pre.map(|v| spec.activation.apply(v));
        } else {
            cur = pre;
        }
    }
    Ok((
        cur,
        MlpTrace {
            inputs,
            preacts,
            consumed: false,
        },
    ))
}

/// Reverse-mode gradients of the recorded forward pass, contracted
/// with `upstream` (shape `(B, output)`).
///
/// Accumulates parameter gradients into `grads` and returns the
/// gradient with respect to the input. The trace is consumed; calling
/// again without re-recording is a state error.
pub fn mlp_backward<S: Scalar>(
    params: &ParameterSet<S>,
    prefix: &str,
    spec: &MlpSpec,
    trace: &mut MlpTrace<S>,
    upstream: &Tensor<S>,
    grads: &mut Gradients<S>,
) -> Result<Tensor<S>> {
    if trace.consumed {
        return Err(Error::State(format!(
            "backward already ran for {prefix}; re-record the forward pass first"
        )));
    }
    trace.consumed = true;

    let dims = spec.layer_dims();
    if upstream.shape() != [trace.inputs[0].rows(), spec.output] {
        return Err(Error::Validation(format!(
            "upstream shape {:?} does not match (B, {})",
            upstream.shape(),
            spec.output
        )));
    }
    let mut delta = upstream.clone();
    for i in (0..dims.len()).rev() {
        let w_name = MlpSpec::weight_name(prefix, i);
        let b_name = MlpSpec::bias_name(prefix, i);
        let w = params.get(&w_name)?;
        let input = &trace.inputs[i];

        let dw = input.matmul_at_b(&delta)?;
        let db = delta.col_sum();
        accumulate(grads, &w_name, dw)?;
        accumulate(grads, &b_name, db)?;

        if i > 0 {
            let dx = delta.matmul_a_bt(w)?;
            let pre = &trace.preacts[i - 1];
            delta = Tensor::from_vec(
                dx.shape().to_vec(),
                dx.data()
                    .iter()
                    .zip(pre.data())
                    .map(|(&g, &p)| g * spec.activation.derivative(p))
                    .collect(),
            )?;
        } else {
            delta = delta.matmul_a_bt(w)?;
        }
    }
    Ok(delta)
}

fn accumulate<S: Scalar>(grads: &mut Gradients<S>, name: &str, g: Tensor<S>) -> Result<()> {
    match grads.get_mut(name) {
        Some(existing) => {
            *existing = existing.add(&g)?;
        }
        None => {
            grads.insert(name.to_string(), g);
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::seed::derive_rng;

    fn tiny_spec() -> MlpSpec {
        MlpSpec::new(2, vec![3], 2)
    }

    #[test]
    fn zero_parameters_give_zero_output() {
        let spec = tiny_spec();
        let mut ps = ParameterSet::<f64>::new();
        for (i, (fi, fo)) in spec.layer_dims().into_iter().enumerate() {
            ps.insert(MlpSpec::weight_name("net", i), Tensor::zeros(vec![fi, fo]));
            ps.insert(MlpSpec::bias_name("net", i), Tensor::zeros(vec![fo]));
        }
        let x = Tensor::from_vec(vec![1, 2], vec![0.3, -0.7]).unwrap();
        let (y, _) = mlp_forward(&ps, "net", &spec, &x).unwrap();
        assert!(y.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn identity_single_layer_passes_input_through() {
        let spec = MlpSpec::new(2, vec![], 2);
        let mut ps = ParameterSet::<f64>::new();
        ps.insert(
            "net.w0",
            Tensor::from_vec(vec![2, 2], vec![1.0, 0.0, 0.0, 1.0]).unwrap(),
        );
        ps.insert("net.b0", Tensor::zeros(vec![2]));
        let x = Tensor::from_vec(vec![1, 2], vec![0.25, -1.5]).unwrap();
        let (y, _) = mlp_forward(&ps, "net", &spec, &x).unwrap();
        assert_eq!(y.data(), x.data());
    }

    #[test]
    fn two_layer_net_matches_hand_computation() {
        // 2 -> 2 (tanh) -> 1 with fixed small weights.
        let spec = MlpSpec {
            input: 2,
            hidden: vec![2],
            output: 1,
            activation: Activation::Tanh,
        };
        let mut ps = ParameterSet::<f64>::new();
        ps.insert(
            "net.w0",
            Tensor::from_vec(vec![2, 2], vec![0.1, 0.2, -0.3, 0.4]).unwrap(),
        );
        ps.insert("net.b0", Tensor::from_vec(vec![2], vec![0.05, -0.05]).unwrap());
        ps.insert(
            "net.w1",
            Tensor::from_vec(vec![2, 1], vec![0.7, -0.6]).unwrap(),
        );
        ps.insert("net.b1", Tensor::from_vec(vec![1], vec![0.2]).unwrap());

        let x = Tensor::from_vec(vec![1, 2], vec![0.5, -1.0]).unwrap();
        let (y, _) = mlp_forward(&ps, "net", &spec, &x).unwrap();

        // Hand matrix arithmetic.
        let h0 = (0.5f64 * 0.1 + (-1.0) * (-0.3) + 0.05).tanh();
        let h1 = (0.5f64 * 0.2 + (-1.0) * 0.4 + (-0.05)).tanh();
        let expected = 0.7 * h0 + (-0.6) * h1 + 0.2;
        assert!((y.data()[0] - expected).abs() < 1e-6);
    }

    #[test]
    fn backward_twice_is_a_state_error() {
        let spec = tiny_spec();
        let mut ps = ParameterSet::<f64>::new();
        init_mlp(&mut ps, "net", &spec, &mut derive_rng(5, "mlp", 0));
        let x = Tensor::randn(vec![2, 2], &mut derive_rng(5, "mlp", 1));
        let (_, mut trace) = mlp_forward(&ps, "net", &spec, &x).unwrap();
        let up = Tensor::zeros(vec![2, 2]);
        let mut grads = Gradients::new();
        mlp_backward(&ps, "net", &spec, &mut trace, &up, &mut grads).unwrap();
        let again = mlp_backward(&ps, "net", &spec, &mut trace, &up, &mut grads);
        assert!(matches!(again, Err(Error::State(_))));
    }

    #[test]
    fn gradient_of_squared_norm_is_two_x() {
        // loss = ||y||^2 with a pass-through net: d loss / d x = 2x.
        let spec = MlpSpec::new(3, vec![], 3);
        let mut ps = ParameterSet::<f64>::new();
        ps.insert(
            "net.w0",
            Tensor::from_vec(vec![3, 3], vec![1., 0., 0., 0., 1., 0., 0., 0., 1.]).unwrap(),
        );
        ps.insert("net.b0", Tensor::zeros(vec![3]));
        let x = Tensor::from_vec(vec![1, 3], vec![0.5, -1.0, 2.0]).unwrap();
        let (y, mut trace) = mlp_forward(&ps, "net", &spec, &x).unwrap();
        let upstream = y.scale(2.0); // d ||y||^2 / d y
        let mut grads = Gradients::new();
        let dx = mlp_backward(&ps, "net", &spec, &mut trace, &upstream, &mut grads).unwrap();
        for (g, &v) in dx.data().iter().zip(x.data()) {
            assert!((g - 2.0 * v).abs() < 1e-12);
        }
    }

    #[test]
    fn unused_parameters_get_no_gradient_entry() {
        let spec = tiny_spec();
        let mut ps = ParameterSet::<f64>::new();
        init_mlp(&mut ps, "net", &spec, &mut derive_rng(5, "mlp", 2));
        init_mlp(&mut ps, "other", &spec, &mut derive_rng(5, "mlp", 3));
        let x = Tensor::randn(vec![1, 2], &mut derive_rng(5, "mlp", 4));
        let (y, mut trace) = mlp_forward(&ps, "net", &spec, &x).unwrap();
        let mut grads = Gradients::new();
        mlp_backward(&ps, "net", &spec, &mut trace, &y, &mut grads).unwrap();
        assert!(grads.keys().all(|k| k.starts_with("net.")));
    }

    /// Central finite differences against reverse mode, double
    /// precision, for a 3-layer MLP and a scalar sum-of-outputs loss.
    #[test]
    fn gradients_match_finite_differences() {
        let spec = MlpSpec {
            input: 4,
            hidden: vec![5, 4],
            output: 3,
            activation: Activation::Silu,
        };
        let mut ps = ParameterSet::<f64>::new();
        init_mlp(&mut ps, "net", &spec, &mut derive_rng(5, "mlp", 5));
        let x = Tensor::randn(vec![2, 4], &mut derive_rng(5, "mlp", 6));

        // loss = sum(y): upstream of ones.
        let loss = |ps: &ParameterSet<f64>| -> f64 {
            let (y, _) = mlp_forward(ps, "net", &spec, &x).unwrap();
            y.data().iter().sum()
        };

        let (y, mut trace) = mlp_forward(&ps, "net", &spec, &x).unwrap();
        let ones = Tensor::from_vec(y.shape().to_vec(), vec![1.0; y.len()]).unwrap();
        let mut grads = Gradients::new();
        mlp_backward(&ps, "net", &spec, &mut trace, &ones, &mut grads).unwrap();

        let h = 1e-4;
        let names: Vec<String> = ps.names().map(String::from).collect();
        let mut max_rel = 0.0f64;
        for name in names {
            let n = ps.get(&name).unwrap().len();
            for idx in 0..n {
                let orig = ps.get(&name).unwrap().data()[idx];
                let mut ps_p = ps.clone();
                ps_p.get_mut(&name).unwrap().value.data_mut()[idx] = orig + h;
                let mut ps_m = ps.clone();
                ps_m.get_mut(&name).unwrap().value.data_mut()[idx] = orig - h;
                let fd = (loss(&ps_p) - loss(&ps_m)) / (2.0 * h);
                let ad = grads[&name].data()[idx];
                let rel = (fd - ad).abs() / fd.abs().max(ad.abs()).max(1e-3);
                max_rel = max_rel.max(rel);
            }
        }
        assert!(max_rel <= 1e-4, "max relative error {max_rel}");
    }
}
