//! Sequential training of one adapter over a task sequence.

use serde::{Deserialize, Serialize};

use super::metrics::avgacc_and_forgetting;
use super::pipeline::{evaluate, MethodSpec};
use super::world::World;
use crate::cache::LayerCaches;
use crate::error::{Error, Result};
use crate::rng::derive_seed;
use crate::trainer::{init_adapter, train, TrainConfig};

/// Contents of `continual_matrix.json`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ContinualReport {
    pub method: String,
    pub seed: u64,
    pub sequence: Vec<String>,
    /// `acc[t][i]`: accuracy on `sequence[i]` after stage `t`, for `i ≤ t`.
    pub acc: Vec<Vec<f64>>,
    pub avg_acc: f64,
    pub forgetting: Option<f64>,
}

/// Train one adapter through `sequence` (task ids), `cfg.steps` steps per
/// stage, carrying the adapter over between stages. Stage `t` trains with
/// seed `derive_seed(seed, t)`.
#[allow(clippy::too_many_arguments)]
pub fn continual_train(
    world: &World,
    caches: &LayerCaches,
    method: &MethodSpec,
    sequence: &[String],
    base_cfg: &TrainConfig,
    seed: u64,
    k: usize,
    r: usize,
) -> Result<ContinualReport> {
    if sequence.is_empty() {
        return Err(Error::Empty("continual sequence".into()));
    }
    let tasks = sequence
        .iter()
        .map(|id| {
            world
                .task(id)
                .ok_or_else(|| Error::Config(format!("unknown task `{id}`")))
        })
        .collect::<Result<Vec<_>>>()?;
    let first_cfg = method.train_config(base_cfg, seed);
    let mut adapter = init_adapter(&method.adapter_config(k, r, seed), caches, &first_cfg)?;
    let stab = method.stability();
    let mut acc = Vec::with_capacity(tasks.len());
    for (t, task) in tasks.iter().enumerate() {
        let cfg = method.train_config(base_cfg, derive_seed(seed, t as u64));
        adapter = train(adapter, &world.backbone, caches, &task.train, &cfg, &stab)?.0;
        let row = tasks[..=t]
            .iter()
            .map(|seen| evaluate(&world.backbone, &adapter, caches, &seen.eval))
            .collect::<Result<Vec<_>>>()?;
        acc.push(row);
    }
    let (avg_acc, forgetting) = avgacc_and_forgetting(&acc)?;
    Ok(ContinualReport {
        method: method.name.clone(),
        seed,
        sequence: sequence.to_vec(),
        acc,
        avg_acc,
        forgetting,
    })
}
