//! Central-difference gradient oracle.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::data::{generate_clip, SyntheticSceneSpec, VideoClip};
use crate::error::{Error, Result};
use crate::label::{LabelMap, IGNORE_INDEX};
use crate::model::{aggregate_features, temporal_memory_attention, Aggregation, AttentionScaling, EncodedFeatures, ModelConfig, Stage, TmaNet};
use crate::tape::{GradTape, Var};
use crate::tensor::Tensor;

pub const DEFAULT_EPS: f64 = 1e-5;

/// Largest input size accepted by [`grad_check`].
pub const MAX_CHECK_ELEMENTS: usize = 200;

/// `|analytic - numeric| / max(1, |numeric|)`
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / numeric.abs().max(1.0)
}

fn eval_scalar<F>(f: &F, inputs: &[Tensor]) -> Result<f64>
where
    F: Fn(&mut GradTape, &[Var]) -> Result<Var>,
{
    let mut tape = GradTape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.leaf(t.clone())).collect();
    let out = f(&mut tape, &vars)?;
    let v = tape.value(out);
    if v.len() != 1 {
        return Err(Error::contract(format!("grad_check needs a scalar function, got shape {:?}", v.shape())));
    }
    Ok(v.item())
}

/// Compares tape gradients of the scalar function `f` against central
/// differences in every input element. Returns the maximum relative error.
pub fn grad_check<F>(f: F, inputs: &[Tensor], eps: f64) -> Result<f64>
where
    F: Fn(&mut GradTape, &[Var]) -> Result<Var>,
{
    if let Some(big) = inputs.iter().find(|t| t.len() > MAX_CHECK_ELEMENTS) {
        return Err(Error::contract(format!(
            "grad_check inputs are limited to {MAX_CHECK_ELEMENTS} elements, got {:?}",
            big.shape()
        )));
    }
    let mut tape = GradTape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.leaf(t.clone())).collect();
    let out = f(&mut tape, &vars)?;
    if tape.value(out).len() != 1 {
        return Err(Error::contract(format!(
            "grad_check needs a scalar function, got shape {:?}",
            tape.shape(out)
        )));
    }
    let grads = tape.backward(out)?;

    let mut worst = 0.0f64;
    let mut probe = inputs.to_vec();
    for (k, var) in vars.iter().enumerate() {
        let analytic = grads.get(*var).cloned().unwrap_or_else(|| Tensor::zeros(inputs[k].shape()));
        for i in 0..inputs[k].len() {
            let x = inputs[k].data()[i];
            probe[k].data_mut()[i] = x + eps;
            let plus = eval_scalar(&f, &probe)?;
            probe[k].data_mut()[i] = x - eps;
            let minus = eval_scalar(&f, &probe)?;
            probe[k].data_mut()[i] = x;
            let numeric = (plus - minus) / (2.0 * eps);
            worst = worst.max(relative_error(analytic.data()[i], numeric));
        }
    }
    Ok(worst)
}

#[cfg(test)]
mod unit_tests {
    use super::*;

    #[test]
    fn linear_sum_is_exact() {
        let x = Tensor::from_fn(&[3, 4], |i| i as f64 * 0.3 - 1.0);
        let err = grad_check(|t, v| Ok(t.sum(v[0])), &[x], DEFAULT_EPS).unwrap();
        assert!(err < 1e-9, "{err}");
    }

    #[test]
    fn rejects_non_scalar_and_large_inputs() {
        let x = Tensor::zeros(&[2, 2]);
        assert!(matches!(grad_check(|_, v| Ok(v[0]), &[x], DEFAULT_EPS), Err(Error::Contract(_))));
        let big = Tensor::zeros(&[201]);
        assert!(matches!(grad_check(|t, v| Ok(t.sum(v[0])), &[big], DEFAULT_EPS), Err(Error::Contract(_))));
    }
}

// ---------------------------------------------------------------------------
// built-in suites

/// Max relative error of one named check.
#[derive(Clone, Debug, PartialEq)]
pub struct CheckResult {
    pub name: String,
    pub max_rel_error: f64,
}

fn random_tensor(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
    Tensor::from_fn(shape, |_| rng.gen_range(-1.0..1.0))
}

/// Nonlinear scalar probe: softmax cross-entropy over all elements of `x`
/// against a fixed target element, so every input element gets a distinct
/// gradient.
fn probe(tape: &mut GradTape, x: Var, target: usize) -> Result<Var> {
    let n = tape.value(x).len();
    let flat = tape.reshape(x, &[n, 1, 1])?;
    let label = LabelMap::new(1, 1, vec![(target % n) as u8])?;
    tape.cross_entropy(flat, &label)
}

type CheckFn = fn(&mut GradTape, &[Var]) -> Result<Var>;

fn op_cases() -> Vec<(&'static str, Vec<Vec<usize>>, CheckFn)> {
    vec![
        ("matmul", vec![vec![3, 4], vec![4, 5]], |t, v| {
            let y = t.matmul(v[0], v[1])?;
            probe(t, y, 7)
        }),
        ("conv2d_3x3_s1", vec![vec![2, 5, 5], vec![3, 2, 3, 3], vec![3]], |t, v| {
            let y = t.conv2d(v[0], v[1], v[2], 1, 1)?;
            probe(t, y, 11)
        }),
        ("conv2d_3x3_s2", vec![vec![2, 6, 6], vec![3, 2, 3, 3], vec![3]], |t, v| {
            let y = t.conv2d(v[0], v[1], v[2], 2, 1)?;
            probe(t, y, 5)
        }),
        ("conv2d_1x1", vec![vec![4, 3, 3], vec![2, 4, 1, 1], vec![2]], |t, v| {
            let y = t.conv2d(v[0], v[1], v[2], 1, 0)?;
            probe(t, y, 3)
        }),
        ("softmax_rows", vec![vec![4, 6]], |t, v| {
            let y = t.softmax_rows(v[0])?;
            let s = t.scale(y, 3.0);
            probe(t, s, 9)
        }),
        ("concat_channels", vec![vec![2, 3, 3], vec![1, 3, 3]], |t, v| {
            let y = t.concat_channels(v[0], v[1])?;
            probe(t, y, 20)
        }),
        ("reshape_permute", vec![vec![2, 3, 4]], |t, v| {
            let y = t.reshape_permute(v[0], &[4, 6], &[2, 0, 1])?;
            let w = t.scale(y, 2.5);
            probe(t, w, 13)
        }),
        ("relu", vec![vec![4, 5]], |t, v| {
            let y = t.relu(v[0]);
            probe(t, y, 2)
        }),
        ("upsample_bilinear", vec![vec![2, 3, 3]], |t, v| {
            let y = t.upsample_bilinear(v[0], 5, 7)?;
            probe(t, y, 33)
        }),
        ("cross_entropy", vec![vec![3, 4, 4]], |t, v| {
            let labels: Vec<u8> = (0..16).map(|i| if i % 5 == 4 { IGNORE_INDEX } else { (i * 7 % 3) as u8 }).collect();
            t.cross_entropy(v[0], &LabelMap::new(4, 4, labels)?)
        }),
        ("add_scale_sum", vec![vec![3, 3], vec![3, 3]], |t, v| {
            let s = t.scale(v[1], -0.7);
            let y = t.add(v[0], s)?;
            let r = t.relu(y);
            Ok(t.sum(r))
        }),
        ("conv2d_relu_cross_entropy", vec![vec![1, 4, 4], vec![3, 1, 3, 3], vec![3]], |t, v| {
            let y = t.conv2d(v[0], v[1], v[2], 1, 1)?;
            let r = t.relu(y);
            let labels: Vec<u8> = (0..16).map(|i| (i % 3) as u8).collect();
            t.cross_entropy(r, &LabelMap::new(4, 4, labels)?)
        }),
        ("temporal_memory_attention", vec![vec![2, 3, 2, 2], vec![2, 4, 2, 2], vec![3, 2, 2], vec![4, 2, 2]], |t, v| {
            let enc = EncodedFeatures { memory_key: v[0], memory_value: v[1], query_key: v[2], query_value: v[3] };
            let (readout, _) = temporal_memory_attention(t, &enc, AttentionScaling::None)?;
            let f = aggregate_features(t, readout, enc.query_value, Aggregation::Concat)?;
            probe(t, f, 17)
        }),
        ("temporal_memory_attention_scaled_sum", vec![vec![2, 3, 2, 2], vec![2, 4, 2, 2], vec![3, 2, 2], vec![4, 2, 2]], |t, v| {
            let enc = EncodedFeatures { memory_key: v[0], memory_value: v[1], query_key: v[2], query_value: v[3] };
            let (readout, _) = temporal_memory_attention(t, &enc, AttentionScaling::InvSqrtKey)?;
            let f = aggregate_features(t, readout, enc.query_value, Aggregation::Sum)?;
            probe(t, f, 6)
        }),
    ]
}

/// Every differentiable op (and the attention composite), each over
/// `seeds` random draws. Reports the worst error per op.
pub fn op_suite(seeds: u64) -> Result<Vec<CheckResult>> {
    op_cases()
        .into_iter()
        .map(|(name, shapes, f)| {
            let mut worst = 0.0f64;
            for seed in 0..seeds {
                let mut rng = ChaCha8Rng::seed_from_u64(seed);
                let inputs: Vec<Tensor> = shapes.iter().map(|s| random_tensor(&mut rng, s)).collect();
                worst = worst.max(grad_check(f, &inputs, DEFAULT_EPS)?);
            }
            Ok(CheckResult { name: name.to_string(), max_rel_error: worst })
        })
        .collect()
}

/// Central differences in every element of every model parameter against
/// the tape gradient of `main + aux_weight·aux` on `clip`. Returns one
/// result per parameter.
pub fn model_grad_check(model: &TmaNet, clip: &VideoClip, aux_weight: f64, eps: f64) -> Result<Vec<CheckResult>> {
    let loss_of = |m: &TmaNet| -> Result<f64> {
        let mut tape = GradTape::new();
        let vars = m.params().bind(&mut tape);
        let out = m.forward(&mut tape, &vars, clip)?;
        let l = m.loss(&mut tape, &out, &clip.label, aux_weight)?;
        Ok(tape.value(l.total).item())
    };

    let mut analytic = model.clone();
    analytic.params_mut().zero_grad();
    {
        let mut tape = GradTape::new();
        let vars = analytic.params().bind(&mut tape);
        let out = analytic.forward(&mut tape, &vars, clip)?;
        let l = analytic.loss(&mut tape, &out, &clip.label, aux_weight)?;
        let g = tape.backward(l.total)?;
        analytic.params_mut().accumulate(&g);
    }

    let mut probe_model = model.clone();
    let mut results = Vec::with_capacity(model.params().len());
    for (pi, p) in model.params().iter().enumerate() {
        let mut worst = 0.0f64;
        for i in 0..p.value.len() {
            let x = p.value.data()[i];
            probe_model.params_mut().get_mut(pi).value.data_mut()[i] = x + eps;
            let plus = loss_of(&probe_model)?;
            probe_model.params_mut().get_mut(pi).value.data_mut()[i] = x - eps;
            let minus = loss_of(&probe_model)?;
            probe_model.params_mut().get_mut(pi).value.data_mut()[i] = x;
            let numeric = (plus - minus) / (2.0 * eps);
            worst = worst.max(relative_error(analytic.params().get(pi).grad.data()[i], numeric));
        }
        results.push(CheckResult { name: p.name.clone(), max_rel_error: worst });
    }
    Ok(results)
}

/// The small end-to-end configuration used by the built-in gradient check:
/// `T = 2`, 4 key channels, 3×16×16 frames.
pub fn end_to_end_fixture() -> Result<(TmaNet, VideoClip)> {
    let mut config = ModelConfig::with_key_channels(
        2,
        4,
        3,
        vec![Stage { width: 4, stride: 2 }, Stage { width: 6, stride: 2 }],
    );
    config.value_channels = 8;
    let model = TmaNet::new(config, 11)?;
    let spec = SyntheticSceneSpec { seed: 5, num_classes: 3, num_objects: 2, ..Default::default() };
    let clip = generate_clip(&spec, 2, 16, 16, 3)?.final_snippet();
    Ok((model, clip))
}
