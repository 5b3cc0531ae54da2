//! SGD with momentum, the poly schedule and the training loop.

use rand::seq::SliceRandom;
use rayon::prelude::*;

use crate::data::{augment, AugmentParams, SamplerMode, VideoClip, DEFAULT_WINDOW};
use crate::error::{Error, Result};
use crate::model::{ModelConfig, TmaNet};
use crate::param::ParamStore;
use crate::rng::stream_rng;
use crate::tape::GradTape;
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub base_lr: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    pub total_iters: usize,
    pub poly_power: f64,
    pub batch_size: usize,
    pub aux_weight: f64,
    pub seed: u64,
    pub sampler: SamplerMode,
    pub window: usize,
    /// `None` trains on the clips as stored.
    pub augment: Option<AugmentParams>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            base_lr: 0.01,
            momentum: 0.9,
            weight_decay: 5e-4,
            total_iters: 500,
            poly_power: 0.9,
            batch_size: 2,
            aux_weight: 0.4,
            seed: 0,
            sampler: SamplerMode::Continuous,
            window: DEFAULT_WINDOW,
            augment: Some(AugmentParams::default()),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("base_lr", self.base_lr),
            ("poly_power", self.poly_power),
        ];
        if let Some((name, v)) = positive.iter().find(|(_, v)| !(*v > 0.0 && v.is_finite())) {
            return Err(Error::Config(format!("{name} must be positive, got {v}")));
        }
        let nonneg = [
            ("momentum", self.momentum),
            ("weight_decay", self.weight_decay),
            ("aux_weight", self.aux_weight),
        ];
        if let Some((name, v)) = nonneg.iter().find(|(_, v)| !(*v >= 0.0 && v.is_finite())) {
            return Err(Error::Config(format!("{name} must be nonnegative, got {v}")));
        }
        if self.total_iters == 0 || self.batch_size == 0 {
            return Err(Error::Config("total_iters and batch_size must be positive".into()));
        }
        Ok(())
    }
}

/// `base_lr · (1 − iter/total_iters)^power`
pub fn poly_lr(base_lr: f64, iter: usize, total_iters: usize, power: f64) -> Result<f64> {
    if iter > total_iters || total_iters == 0 {
        return Err(Error::contract(format!("poly_lr at iteration {iter} of {total_iters}")));
    }
    Ok(base_lr * (1.0 - iter as f64 / total_iters as f64).powf(power))
}

/// Momentum buffers and the number of completed steps.
#[derive(Clone, Debug, PartialEq)]
pub struct OptimState {
    pub velocity: Vec<Tensor>,
    pub iteration: usize,
}

impl OptimState {
    pub fn new(params: &ParamStore) -> Self {
        Self {
            velocity: params.iter().map(|p| Tensor::zeros(p.value.shape())).collect(),
            iteration: 0,
        }
    }
}

/// Classic SGD with momentum and L2 decay folded into the gradient:
/// `v ← μ·v + g + λ·w`, `w ← w − lr·v`.
pub fn sgd_step(params: &mut ParamStore, state: &mut OptimState, lr: f64, momentum: f64, weight_decay: f64) -> Result<()> {
    if state.velocity.len() != params.len() {
        return Err(Error::shape(format!(
            "{} velocity buffers for {} parameters",
            state.velocity.len(),
            params.len()
        )));
    }
    for (p, v) in params.iter_mut().zip(&mut state.velocity) {
        if v.shape() != p.value.shape() {
            return Err(Error::shape(format!(
                "velocity {:?} for parameter {} {:?}",
                v.shape(),
                p.name,
                p.value.shape()
            )));
        }
        let (w, g) = (p.value.data_mut(), p.grad.data());
        for ((wi, &gi), vi) in w.iter_mut().zip(g).zip(v.data_mut()) {
            *vi = momentum * *vi + gi + weight_decay * *wi;
            *wi -= lr * *vi;
        }
    }
    Ok(())
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct StepStats {
    pub iteration: usize,
    pub lr: f64,
    pub total_loss: f64,
    pub main_loss: f64,
    pub aux_loss: f64,
}

struct ClipGrad {
    grads: Vec<Option<Tensor>>,
    total: f64,
    main: f64,
    aux: f64,
}

fn clip_gradients(model: &TmaNet, clip: &VideoClip, aux_weight: f64, batch: usize) -> Result<ClipGrad> {
    let mut tape = GradTape::new();
    let vars = model.params().bind(&mut tape);
    let out = model.forward(&mut tape, &vars, clip)?;
    let losses = model.loss(&mut tape, &out, &clip.label, aux_weight)?;
    let scaled = tape.scale(losses.total, 1.0 / batch as f64);
    let g = tape.backward(scaled)?;
    let mut grads = vec![None; model.params().len()];
    for (i, t) in g.params() {
        grads[i] = Some(t.clone());
    }
    Ok(ClipGrad {
        grads,
        total: tape.value(losses.total).item(),
        main: tape.value(losses.main).item(),
        aux: tape.value(losses.aux).item(),
    })
}

/// One optimisation step on `batch`: batch-averaged `main + aux_weight·aux`
/// loss, gradients reduced in batch order, SGD at the poly rate for the
/// current iteration, gradients zeroed afterwards.
pub fn train_step(model: &mut TmaNet, batch: &[VideoClip], optim: &mut OptimState, cfg: &TrainConfig) -> Result<StepStats> {
    if batch.is_empty() {
        return Err(Error::contract("train_step needs a nonempty batch"));
    }
    let lr = poly_lr(cfg.base_lr, optim.iteration, cfg.total_iters, cfg.poly_power)?;
    let n = batch.len();
    let frozen: &TmaNet = model;
    let per_clip: Vec<ClipGrad> = batch
        .par_iter()
        .map(|clip| clip_gradients(frozen, clip, cfg.aux_weight, n))
        .collect::<Result<_>>()?;

    let mut stats = StepStats { iteration: optim.iteration, lr, total_loss: 0.0, main_loss: 0.0, aux_loss: 0.0 };
    let params = model.params_mut();
    for cg in &per_clip {
        for (i, g) in cg.grads.iter().enumerate() {
            if let Some(g) = g {
                params.get_mut(i).grad.add_assign(g);
            }
        }
        stats.total_loss += cg.total;
        stats.main_loss += cg.main;
        stats.aux_loss += cg.aux;
    }
    stats.total_loss /= n as f64;
    stats.main_loss /= n as f64;
    stats.aux_loss /= n as f64;

    sgd_step(params, optim, lr, cfg.momentum, cfg.weight_decay)?;
    params.zero_grad();
    optim.iteration += 1;
    Ok(stats)
}

/// The clips that iteration `iter` trains on: an epoch-wise shuffle of the
/// dataset, then per-slot memory sampling and augmentation. A pure function
/// of `(cfg.seed, iter)`, so resumed runs see the same batches.
pub fn batch_for_iteration(dataset: &[VideoClip], memory_length: usize, cfg: &TrainConfig, iter: usize) -> Result<Vec<VideoClip>> {
    if dataset.is_empty() {
        return Err(Error::contract("empty dataset"));
    }
    let n = dataset.len();
    let mut cached_epoch = usize::MAX;
    let mut order: Vec<usize> = Vec::new();
    (0..cfg.batch_size)
        .map(|slot| {
            let g = iter * cfg.batch_size + slot;
            let epoch = g / n;
            if epoch != cached_epoch {
                order = (0..n).collect();
                order.shuffle(&mut stream_rng(cfg.seed, &[0xE90C, epoch as u64]));
                cached_epoch = epoch;
            }
            let source = &dataset[order[g % n]];
            let mut rng = stream_rng(cfg.seed, &[0xBA7C, iter as u64, slot as u64]);
            let clip = source.select_memory(memory_length, cfg.sampler, cfg.window, &mut rng)?;
            match &cfg.augment {
                Some(params) => augment(&clip, &mut rng, params),
                None => Ok(clip),
            }
        })
        .collect()
}

/// Trains `model` from `optim.iteration` up to `cfg.total_iters`, calling
/// `on_step` after every step.
pub fn run_training(
    model: &mut TmaNet,
    optim: &mut OptimState,
    cfg: &TrainConfig,
    dataset: &[VideoClip],
    mut on_step: impl FnMut(&StepStats) -> Result<()>,
) -> Result<()> {
    cfg.validate()?;
    if dataset.is_empty() {
        return Err(Error::contract("empty dataset"));
    }
    let num_classes = model.config().num_classes;
    for clip in dataset {
        clip.validate(num_classes)?;
    }
    let memory_length = model.config().memory_length;
    while optim.iteration < cfg.total_iters {
        let batch = batch_for_iteration(dataset, memory_length, cfg, optim.iteration)?;
        let stats = train_step(model, &batch, optim, cfg)?;
        on_step(&stats)?;
    }
    Ok(())
}

/// Fresh model plus optimiser state for `(model_cfg, train_cfg.seed)`.
pub fn init_training(model_cfg: &ModelConfig, train_cfg: &TrainConfig) -> Result<(TmaNet, OptimState)> {
    let model = TmaNet::new(model_cfg.clone(), train_cfg.seed)?;
    let optim = OptimState::new(model.params());
    Ok((model, optim))
}

/// `iter  lr  total  main  aux`, tab separated, six significant digits.
pub fn format_log_line(s: &StepStats) -> String {
    format!(
        "{}\t{}\t{}\t{}\t{}",
        s.iteration,
        format_sig6(s.lr),
        format_sig6(s.total_loss),
        format_sig6(s.main_loss),
        format_sig6(s.aux_loss)
    )
}

/// `%g`-style rendering with 6 significant digits.
pub fn format_sig6(v: f64) -> String {
    if v == 0.0 || !v.is_finite() {
        return if v == 0.0 { "0".into() } else { v.to_string() };
    }
    let sci = format!("{v:.5e}");
    let (mantissa, exp) = sci.split_once('e').expect("exponent present");
    let exp: i32 = exp.parse().expect("integer exponent");
    if (-4..6).contains(&exp) {
        let decimals = (5 - exp).max(0) as usize;
        trim_zeros(&format!("{v:.decimals$}"))
    } else {
        format!("{}e{}{:02}", trim_zeros(mantissa), if exp < 0 { '-' } else { '+' }, exp.abs())
    }
}

fn trim_zeros(s: &str) -> String {
    if s.contains('.') {
        s.trim_end_matches('0').trim_end_matches('.').to_string()
    } else {
        s.to_string()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn poly_values() {
        assert_eq!(poly_lr(0.01, 0, 80_000, 0.9).unwrap(), 0.01);
        assert_eq!(poly_lr(0.01, 80_000, 80_000, 0.9).unwrap(), 0.0);
        let mid = poly_lr(0.01, 40_000, 80_000, 0.9).unwrap();
        assert!((mid - 0.0053589).abs() < 1e-7, "{mid}");
        assert!(poly_lr(0.01, 80_001, 80_000, 0.9).is_err());
    }

    fn single(w: f64, g: f64) -> ParamStore {
        let mut p = ParamStore::new();
        let i = p.push("w", Tensor::full(&[1], w));
        p.get_mut(i).grad = Tensor::full(&[1], g);
        p
    }

    #[test]
    fn sgd_fixed_point() {
        let mut p = single(1.25, 0.0);
        let mut s = OptimState::new(&p);
        sgd_step(&mut p, &mut s, 0.1, 0.9, 0.0).unwrap();
        assert_eq!(p.get(0).value.data(), &[1.25]);
    }

    #[test]
    fn sgd_hand_evaluations() {
        let mut p = single(1.0, 0.5);
        let mut s = OptimState::new(&p);
        sgd_step(&mut p, &mut s, 0.1, 0.0, 0.0).unwrap();
        assert!((p.get(0).value.item() - 0.95).abs() < 1e-15);

        let mut p = single(1.0, 0.5);
        let mut s = OptimState::new(&p);
        sgd_step(&mut p, &mut s, 0.1, 0.9, 0.0).unwrap();
        sgd_step(&mut p, &mut s, 0.1, 0.9, 0.0).unwrap();
        assert!((p.get(0).value.item() - 0.855).abs() < 1e-15);
    }

    #[test]
    fn weight_decay_shrinks_monotonically() {
        let mut p = single(-2.0, 0.0);
        let mut s = OptimState::new(&p);
        let mut last = 2.0;
        for _ in 0..50 {
            sgd_step(&mut p, &mut s, 0.1, 0.0, 0.05).unwrap();
            let m = p.get(0).value.item().abs();
            assert!(m < last);
            last = m;
        }
    }

    #[test]
    fn sig6_formatting() {
        assert_eq!(format_sig6(0.0), "0");
        assert_eq!(format_sig6(0.01), "0.01");
        assert_eq!(format_sig6(0.0053589418), "0.00535894");
        assert_eq!(format_sig6(1.3862943611), "1.38629");
        assert_eq!(format_sig6(123456.7), "123457");
        assert_eq!(format_sig6(1234567.0), "1.23457e+06");
        assert_eq!(format_sig6(0.00001234), "1.234e-05");
        assert_eq!(format_sig6(-2.5), "-2.5");
    }
}
