//! Plain cross-entropy training.

use rand::seq::SliceRandom;
use rand::Rng;

use crate::autograd::Tape;
use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::graph::{ExecutableGraph, Mode};
use crate::optim::OptimizerState;
use crate::params::ParameterStore;
use crate::tensor::Tensor;

/// Shuffled minibatch index lists covering the dataset once.
pub fn shuffled_batches(n: usize, batch_size: usize, rng: &mut impl Rng) -> Vec<Vec<usize>> {
    let mut idx: Vec<usize> = (0..n).collect();
    idx.shuffle(rng);
    idx.chunks(batch_size.max(1)).map(<[usize]>::to_vec).collect()
}

/// One cross-entropy optimizer step on a minibatch. Returns the loss.
pub fn ce_step(
    graph: &ExecutableGraph,
    store: &mut ParameterStore,
    opt: &mut OptimizerState,
    x: &Tensor,
    labels: &[usize],
    rng: &mut impl Rng,
) -> Result<f32> {
    let mut tape = Tape::new();
    let xv = tape.constant(x.clone());
    let logits = graph.forward(&mut tape, store, xv, Mode::Train, rng)?;
    let loss = tape.softmax_cross_entropy(logits, labels)?;
    let value = tape.value(loss).item();
    if !value.is_finite() {
        return Err(Error::NonFinite(format!("cross-entropy loss {value}")));
    }
    store.backward(&tape, loss)?;
    store.apply_buffer_updates(&tape)?;
    opt.step(store)?;
    Ok(value)
}

/// One epoch over `data`. Returns the mean minibatch loss.
pub fn train_epoch(
    graph: &ExecutableGraph,
    store: &mut ParameterStore,
    opt: &mut OptimizerState,
    data: &Dataset,
    batch_size: usize,
    rng: &mut impl Rng,
) -> Result<f64> {
    if data.is_empty() {
        return Err(Error::invalid("training on an empty dataset"));
    }
    let batches = shuffled_batches(data.len(), batch_size, rng);
    let mut total = 0.0;
    for b in &batches {
        let (x, y) = data.batch(b);
        total += ce_step(graph, store, opt, &x, &y, rng)? as f64;
    }
    Ok(total / batches.len() as f64)
}

#[cfg(test)]
mod tests {
    use rand::SeedableRng;
    use rand_xoshiro::SplitMix64;

    use super::*;
    use crate::data::{make_synthetic, Split, SyntheticSpec};
    use crate::graph::ModelSpec;
    use crate::metrics::accuracy;

    #[test]
    fn batches_cover_everything_once() {
        let mut rng = SplitMix64::seed_from_u64(0);
        let b = shuffled_batches(10, 3, &mut rng);
        assert_eq!(b.len(), 4);
        let mut all: Vec<usize> = b.concat();
        all.sort();
        assert_eq!(all, (0..10).collect::<Vec<_>>());
    }

    #[test]
    fn synthetic_data_is_learnable_in_two_epochs() {
        let spec = SyntheticSpec { n_classes: 10, samples_per_class: 100, dims: [1, 16, 16], seed: 2 };
        let data = make_synthetic(&spec, Split::Train).unwrap();
        let model = ModelSpec::default_cnn([1, 16, 16], 10);
        let mut store = model.init_store(0).unwrap();
        let graph = ExecutableGraph::build(&model, &store).unwrap();
        let mut opt = OptimizerState::adam(1e-3).unwrap();
        let mut rng = SplitMix64::seed_from_u64(1);
        for _ in 0..2 {
            train_epoch(&graph, &mut store, &mut opt, &data, 32, &mut rng).unwrap();
        }
        let acc = accuracy(&graph, &store, &data).unwrap();
        assert!(acc >= 0.9, "{acc}");
    }
}
