//! Minibatch Adam loop with best-on-dev selection, shared by all trainable stages.

use alloc::vec::Vec;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::netcore::{adam_step, rng, AdamState, Gradients, NetError, ParamStore, DEFAULT_CLIP_NORM};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainOptions {
    pub epochs: usize,
    pub lr: f64,
    pub batch_size: usize,
    pub clip_norm: f64,
    /// Seeds parameter initialisation and the per-epoch shuffle.
    pub seed: u64,
}

impl Default for TrainOptions {
    fn default() -> Self {
        TrainOptions { epochs: 10, lr: 1e-3, batch_size: 8, clip_norm: DEFAULT_CLIP_NORM, seed: 13 }
    }
}

impl TrainOptions {
    pub fn validate(&self) -> Result<(), &'static str> {
        if self.batch_size == 0 {
            return Err("batch_size must be positive");
        }
        if !(self.lr >= 0.0 && self.lr.is_finite()) {
            return Err("lr must be a non-negative number");
        }
        if !(self.clip_norm > 0.0) {
            return Err("clip_norm must be positive");
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    pub epoch: usize,
    pub loss: f64,
    pub dev_metric: f64,
    pub best: bool,
}

/// Run `opts.epochs` passes over `items` and leave the best-on-dev values in `store`.
///
/// `loss_grad` adds one item's gradient into the buffer and returns its loss;
/// batches average over their items. `evaluate` scores the current values on
/// dev (higher is better, ties keep the earlier epoch).
pub fn fit<T, E, L, V, C>(
    store: &mut ParamStore,
    items: &[T],
    opts: &TrainOptions,
    mut loss_grad: L,
    mut evaluate: V,
    mut on_epoch: C,
) -> Result<Vec<EpochLog>, E>
where
    E: From<NetError>,
    L: FnMut(&ParamStore, &T, &mut Gradients) -> Result<f64, E>,
    V: FnMut(&ParamStore) -> Result<f64, E>,
    C: FnMut(&EpochLog),
{
    let mut history = Vec::with_capacity(opts.epochs);
    if opts.epochs == 0 || items.is_empty() {
        if opts.epochs > 0 {
            log::warn!("no training items; returning the initial model");
        }
        return Ok(history);
    }
    let mut adam = AdamState::new(store, opts.lr);
    let mut best: Option<(f64, ParamStore)> = None;
    let mut grads = store.gradients();
    let mut order: Vec<usize> = (0..items.len()).collect();
    let mut shuffle_rng = rng(opts.seed ^ 0x5eed);
    for epoch in 1..=opts.epochs {
        order.shuffle(&mut shuffle_rng);
        let mut total = 0.0;
        for batch in order.chunks(opts.batch_size) {
            grads.zero();
            for &i in batch {
                let loss = loss_grad(store, &items[i], &mut grads)?;
                if !loss.is_finite() {
                    return Err(NetError::TrainingDiverged(alloc::format!("non-finite loss in epoch {epoch}")).into());
                }
                total += loss;
            }
            store.accumulate(&grads, 1.0 / batch.len() as f64);
            store.clip_grad_norm(opts.clip_norm);
            adam_step(store, &mut adam)?;
        }
        let loss = total / items.len() as f64;
        let dev_metric = evaluate(store)?;
        let improved = best.as_ref().map_or(true, |(b, _)| dev_metric > *b);
        if improved {
            best = Some((dev_metric, store.clone()));
        }
        let entry = EpochLog { epoch, loss, dev_metric, best: improved };
        log::info!("epoch {epoch}: loss {loss:.5} dev {dev_metric:.4}{}", if improved { " *" } else { "" });
        on_epoch(&entry);
        history.push(entry);
    }
    if let Some((_, b)) = best {
        store.copy_values_from(&b);
    }
    Ok(history)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::netcore::Init;

    #[test]
    fn keeps_best_epoch() {
        let mut store = ParamStore::new();
        let w = store.add("w", &[1], Init::Constant(0.0), &mut rng(0));
        let items = [1.0f64];
        let opts = TrainOptions { epochs: 6, lr: 0.5, batch_size: 1, ..TrainOptions::default() };
        let mut seen = Vec::new();
        // Loss pushes w upward forever; dev prefers w near 1.
        let hist = fit::<_, NetError, _, _, _>(
            &mut store,
            &items,
            &opts,
            |_, _, g| {
                g.get_mut(w)[0] += -1.0;
                Ok(1.0)
            },
            |s| Ok(-libm::fabs(s.values(w)[0] - 1.0)),
            |e| seen.push(e.epoch),
        )
        .unwrap();
        assert_eq!(seen, [1, 2, 3, 4, 5, 6]);
        let best = hist.iter().max_by(|a, b| a.dev_metric.total_cmp(&b.dev_metric).then(b.epoch.cmp(&a.epoch))).unwrap();
        assert!(best.best);
        assert!(best.epoch < 6);
        assert!((-libm::fabs(store.values(w)[0] - 1.0) - best.dev_metric).abs() < 1e-15);
    }

    #[test]
    fn zero_epochs_returns_initial() {
        let mut store = ParamStore::new();
        let w = store.add("w", &[1], Init::Constant(0.25), &mut rng(0));
        let opts = TrainOptions { epochs: 0, ..TrainOptions::default() };
        let hist =
            fit::<_, NetError, _, _, _>(&mut store, &[()], &opts, |_, _, _| Ok(0.0), |_| Ok(0.0), |_| {}).unwrap();
        assert!(hist.is_empty());
        assert_eq!(store.values(w), [0.25]);
    }
}
