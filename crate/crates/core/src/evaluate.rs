//! Sliding-window evaluation of a trained model.

use rayon::prelude::*;

use crate::data::{SamplerMode, VideoClip};
use crate::error::Result;
use crate::metrics::{ConfusionMatrix, EvalReport};
use crate::model::{argmax_labels, TmaNet};
use crate::rng::stream_rng;

/// Seed of the memory sampler at test time.
pub const TEST_SEED: u64 = 0x7E57;

/// Predicts every snippet (memory picked from the frames preceding its query
/// with `mode`, seeded per snippet from `test_seed`) and accumulates one
/// confusion matrix. Per-snippet matrices are merged in input order.
pub fn evaluate(model: &TmaNet, snippets: &[VideoClip], mode: SamplerMode, window: usize, test_seed: u64) -> Result<EvalReport> {
    let cm = confusion(model, snippets, mode, window, test_seed)?;
    EvalReport::from_confusion(&cm)
}

pub fn confusion(model: &TmaNet, snippets: &[VideoClip], mode: SamplerMode, window: usize, test_seed: u64) -> Result<ConfusionMatrix> {
    let c = model.config().num_classes;
    let t = model.config().memory_length;
    let parts: Vec<ConfusionMatrix> = snippets
        .par_iter()
        .enumerate()
        .map(|(i, snippet)| {
            let mut rng = stream_rng(test_seed, &[i as u64]);
            let clip = snippet.select_memory(t, mode, window, &mut rng)?;
            let pred = argmax_labels(&model.predict(&clip)?.main_logits)?;
            let mut cm = ConfusionMatrix::new(c);
            cm.accumulate(&pred, &clip.label)?;
            Ok(cm)
        })
        .collect::<Result<_>>()?;
    let mut total = ConfusionMatrix::new(c);
    for p in &parts {
        total.merge(p)?;
    }
    Ok(total)
}
