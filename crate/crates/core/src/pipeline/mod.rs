//! 1F1B schedule, replica all-reduce, layer-wise updates and the training
//! driver.

mod engine;
mod schedule;
mod threaded;

pub use engine::{Engine, EngineConfig, EngineStats, IterationOutcome, IterationResult, Worker};
pub use schedule::{bubble_ratio, build_1f1b_schedule, Schedule, Slot};

pub(crate) use engine::{backward_op, forward_op, StepCtx};

use crate::error::{Error, Result};
use crate::numerics::ordered_sum;
use crate::optimizers::OptimizerHyper;
use crate::{Stage, Tensor};

/// Mean over replicas: ordered sum in ascending rank, then divide by the
/// group size. Every member receives the same bits.
pub fn allreduce_replicas(grads: &[&Tensor]) -> Result<Tensor> {
    let sum = ordered_sum(grads)?;
    let n = grads.len() as f64;
    Ok(sum.map(|v| v / n))
}

/// Synchronises and applies one stage's update across its replicas, layer by
/// layer from the last layer down. `acc[r]` holds replica `r`'s accumulated
/// gradients in block order. Stops after `limit` layers when given; returns
/// how many layers were updated.
pub fn apply_layerwise_updates(
    replicas: &mut [&mut Stage],
    acc: &[Vec<Tensor>],
    hyper: &OptimizerHyper,
    limit: Option<usize>,
) -> Result<usize> {
    if replicas.len() != acc.len() || replicas.is_empty() {
        return Err(Error::InvalidConfig("one gradient list per replica required".into()));
    }
    let layers = replicas[0].num_layers();
    let mut done = 0;
    for j in (0..layers).rev() {
        if limit == Some(done) {
            break;
        }
        for b in [2 * j, 2 * j + 1] {
            let column: Vec<&Tensor> = acc.iter().map(|a| &a[b]).collect();
            let avg = allreduce_replicas(&column)?;
            for st in replicas.iter_mut() {
                let layer = &mut st.layers[j];
                let block = if b % 2 == 0 { &mut layer.weight } else { &mut layer.bias };
                block.step(&avg, hyper)?;
            }
        }
        done += 1;
    }
    Ok(done)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::ModelDims;
    use crate::optimizers::OptimizerKind;

    #[test]
    fn mean_of_two() {
        let a = Tensor::new(vec![1], vec![1.0]).unwrap();
        let b = Tensor::new(vec![1], vec![3.0]).unwrap();
        assert_eq!(allreduce_replicas(&[&a, &b]).unwrap().data(), &[2.0]);
        assert!(allreduce_replicas(&[&a]).unwrap().bit_eq(&a));
    }

    #[test]
    fn interrupted_update_touches_last_layers_first() {
        let dims = ModelDims {
            input_dim: 2,
            hidden_dim: 2,
            output_dim: 2,
            layers_per_stage: 4,
            batch_rows: 1,
        };
        let h = OptimizerHyper::new(OptimizerKind::Sgd, 0.1);
        let base = Stage::init(0, 1, &dims, 1).unwrap();
        let grads: Vec<Tensor> = base
            .blocks()
            .map(|b| Tensor::seeded_fill(b.x.shape(), 5).unwrap())
            .collect();
        for k in 0..=4 {
            let mut st = base.clone();
            let done = apply_layerwise_updates(&mut [&mut st], std::slice::from_ref(&grads), &h, Some(k)).unwrap();
            assert_eq!(done, k);
            let flags = st.updated_flags();
            for (j, f) in flags.iter().enumerate() {
                assert_eq!(*f, j >= 4 - k);
            }
        }
        let mut st = base.clone();
        assert_eq!(apply_layerwise_updates(&mut [&mut st], &[grads], &h, None).unwrap(), 4);
    }
}
