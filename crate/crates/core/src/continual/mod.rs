//! Continual training and evaluation: per-family task trainers, the
//! all-seen-relations protocol, and run/seed aggregation.

mod config;
mod learner;
mod metrics;
pub mod objective;

use rayon::prelude::*;

pub use config::{Family, MethodConfig};
pub use learner::{EpochLoss, Evaluation, Learner};
pub use metrics::{accuracy_drop, average_row, Aggregate, MeanStd, Metrics, RunResult};

use crate::data::TaskStream;
use crate::error::{Error, Result};
use crate::model::EncoderParams;

/// Train through the whole stream with one seed. `on_task` sees the partial
/// result and the learner after every task.
pub fn run_single(
    stream: &TaskStream,
    pretrained: &EncoderParams,
    cfg: &MethodConfig,
    seed: u64,
    mut on_task: impl FnMut(&RunResult, &Learner) -> Result<()>,
) -> Result<RunResult> {
    stream.validate()?;
    let mut learner = Learner::new(pretrained, stream.relation_count(), cfg.clone(), seed)?;
    let mut result = RunResult::new(cfg.label(), seed);
    for (j, task) in stream.tasks.iter().enumerate() {
        result.losses.extend(learner.train_task(task)?);
        let eval = learner.evaluate(&stream.tasks[..=j])?;
        result.accuracy.push(eval.accuracies);
        result.test_loss.push(eval.test_loss);
        result.train_loss.push(learner.probe_loss(&task.train)?);
        on_task(&result, &learner)?;
    }
    Ok(result)
}

/// Every seed of one method, run in parallel; results in seed order.
pub fn run_experiment(
    stream: &TaskStream,
    pretrained: &EncoderParams,
    cfg: &MethodConfig,
    seeds: &[u64],
) -> Result<(Vec<RunResult>, Aggregate)> {
    if seeds.is_empty() {
        return Err(Error::config("at least one seed is required"));
    }
    cfg.validate()?;
    let runs: Vec<Result<RunResult>> = seeds
        .par_iter()
        .map(|&seed| {
            run_single(stream, pretrained, cfg, seed, |_, _| Ok(()))
                .map_err(|e| Error::Experiment { seed, source: Box::new(e) })
        })
        .collect();
    let runs = runs.into_iter().collect::<Result<Vec<_>>>()?;
    let agg = Aggregate::from_runs(&runs)?;
    Ok((runs, agg))
}
