//! AdamW training of adapter parameters against a frozen backbone.
//!
//! Each step: forward (factors are projected inside the forward) → backward →
//! global-norm clip → AdamW → retract.

use std::fs;
use std::path::Path;

use log::debug;
use serde::{Deserialize, Serialize};

use crate::adapter::{retract, Adapter, AdapterConfig, AdapterState};
use crate::cache::LayerCaches;
use crate::error::{Error, Result};
use crate::model::{Backbone, Batch};
use crate::objective::{backward, forward, StabilityConfig};
use crate::rng::{derive_seed, label_seed, Stream};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub steps: usize,
    pub lr: f64,
    pub betas: (f64, f64),
    pub eps: f64,
    pub weight_decay: f64,
    pub grad_clip: f64,
    pub warmup_frac: f64,
    /// Minibatch size; `0` or anything at least the data size means full batch.
    pub batch_size: usize,
    pub seed: u64,
    pub no_stability_reg: bool,
    pub no_residual_proj: bool,
    pub gaussian_init: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            steps: 2000,
            lr: 2e-4,
            betas: (0.9, 0.95),
            eps: 1e-8,
            weight_decay: 0.01,
            grad_clip: 1.0,
            warmup_frac: 0.03,
            batch_size: 64,
            seed: 0,
            no_stability_reg: false,
            no_residual_proj: false,
            gaussian_init: false,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.steps == 0 {
            return Err(Error::Config("steps must be >= 1".into()));
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(Error::Config(format!(
                "lr must be positive, got {}",
                self.lr
            )));
        }
        let (b1, b2) = self.betas;
        if !(0.0..1.0).contains(&b1) || !(0.0..1.0).contains(&b2) {
            return Err(Error::Config(format!(
                "betas must lie in [0, 1), got ({b1}, {b2})"
            )));
        }
        if self.eps.is_nan()
            || self.eps <= 0.0
            || self.weight_decay < 0.0
            || self.grad_clip.is_nan()
            || self.grad_clip <= 0.0
        {
            return Err(Error::Config(
                "eps and grad_clip must be positive, weight_decay >= 0".into(),
            ));
        }
        if !(0.0..=1.0).contains(&self.warmup_frac) {
            return Err(Error::Config(format!(
                "warmup_frac {} outside [0, 1]",
                self.warmup_frac
            )));
        }
        Ok(())
    }

    /// Number of warmup steps, `ceil(warmup_frac · steps)`.
    pub fn warmup_steps(&self) -> usize {
        (self.warmup_frac * self.steps as f64).ceil() as usize
    }

    /// Learning rate at 1-based step `t`: linear ramp, then constant.
    pub fn lr_at(&self, t: usize) -> f64 {
        let warm = self.warmup_steps();
        if warm == 0 || t >= warm {
            self.lr
        } else {
            self.lr * t as f64 / warm as f64
        }
    }
}

/// AdamW moments, one slot per parameter tensor.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct OptimizerState {
    pub m: Vec<Vec<f64>>,
    pub v: Vec<Vec<f64>>,
    pub t: u64,
}

impl OptimizerState {
    pub fn new(sizes: &[usize]) -> Self {
        Self {
            m: sizes.iter().map(|&n| vec![0.0; n]).collect(),
            v: sizes.iter().map(|&n| vec![0.0; n]).collect(),
            t: 0,
        }
    }
}

/// Global L2 norm over all gradient tensors.
pub fn global_norm(grads: &[&[f64]]) -> f64 {
    grads
        .iter()
        .flat_map(|g| g.iter())
        .map(|x| x * x)
        .sum::<f64>()
        .sqrt()
}

/// Rescale `grads` so their global norm is at most `max_norm`; returns the
/// norm before clipping.
pub fn clip_global_norm(grads: &mut [&mut [f64]], max_norm: f64) -> f64 {
    let norm = grads
        .iter()
        .flat_map(|g| g.iter())
        .map(|x| x * x)
        .sum::<f64>()
        .sqrt();
    if norm > max_norm {
        let s = max_norm / norm;
        grads
            .iter_mut()
            .for_each(|g| g.iter_mut().for_each(|x| *x *= s));
    }
    norm
}

/// One AdamW step with decoupled weight decay and bias correction.
///
/// Gradients are expected to be clipped already.
pub fn adamw_step(
    params: &mut [&mut [f64]],
    grads: &[&[f64]],
    opt: &mut OptimizerState,
    cfg: &TrainConfig,
    lr: f64,
) -> Result<()> {
    if params.len() != grads.len() || params.len() != opt.m.len() {
        return Err(Error::dim(format!(
            "{} parameter tensors, {} gradients, {} moment slots",
            params.len(),
            grads.len(),
            opt.m.len()
        )));
    }
    for (i, (p, g)) in params.iter().zip(grads).enumerate() {
        if p.len() != g.len() || p.len() != opt.m[i].len() {
            return Err(Error::dim(format!("tensor {i}: shape mismatch")));
        }
        if let Some(j) = g.iter().position(|x| !x.is_finite()) {
            return Err(Error::Diverged {
                step: opt.t as usize + 1,
                reason: format!("non-finite gradient in tensor {i} entry {j}"),
            });
        }
    }
    opt.t += 1;
    let (b1, b2) = cfg.betas;
    let c1 = 1.0 - b1.powi(opt.t as i32);
    let c2 = 1.0 - b2.powi(opt.t as i32);
    for (i, (p, g)) in params.iter_mut().zip(grads).enumerate() {
        let (m, v) = (&mut opt.m[i], &mut opt.v[i]);
        for j in 0..p.len() {
            p[j] -= lr * cfg.weight_decay * p[j];
            m[j] = b1 * m[j] + (1.0 - b1) * g[j];
            v[j] = b2 * v[j] + (1.0 - b2) * g[j] * g[j];
            let m_hat = m[j] / c1;
            let v_hat = v[j] / c2;
            p[j] -= lr * m_hat / (v_hat.sqrt() + cfg.eps);
        }
    }
    Ok(())
}

/// One row of `trace.json`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TraceEntry {
    pub step: usize,
    pub loss: f64,
    pub omega: f64,
    pub grad_norm: f64,
    pub lr: f64,
}

pub fn save_trace(trace: &[TraceEntry], path: &Path) -> Result<()> {
    let text = serde_json::to_string_pretty(trace)?;
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

/// Adapter config with the trainer's residual-projection ablation applied.
pub fn effective_adapter_config(adapter_cfg: &AdapterConfig, cfg: &TrainConfig) -> AdapterConfig {
    let mut c = adapter_cfg.clone();
    c.residual_projection = adapter_cfg.residual_projection && !cfg.no_residual_proj;
    c
}

/// Fresh adapter for training: all-zero, or `B ~ N(0, 1/m)` when
/// `gaussian_init` is set (retracted when the mode projects).
pub fn init_adapter(
    adapter_cfg: &AdapterConfig,
    caches: &LayerCaches,
    cfg: &TrainConfig,
) -> Result<Adapter> {
    adapter_cfg.validate()?;
    let acfg = effective_adapter_config(adapter_cfg, cfg);
    let mut adapter = Adapter::zeros(acfg.clone(), caches);
    if cfg.gaussian_init {
        for (id, st) in adapter.layers.iter_mut() {
            let cache = &caches[id];
            let mut stream = Stream::new(derive_seed(acfg.seed, label_seed(id)));
            let mut fresh = AdapterState::gaussian_b(cache, acfg.r, &mut stream);
            if acfg.projects_residual() {
                fresh = retract(&fresh, cache, &acfg)?;
            }
            *st = fresh;
        }
    }
    Ok(adapter)
}

fn param_sizes(adapter: &Adapter) -> Vec<usize> {
    let phi = adapter.config.trains_phi();
    adapter
        .layers
        .values()
        .flat_map(|st| {
            let mut v = Vec::new();
            if phi {
                v.push(st.phi.len());
            }
            v.push(st.a.data().len());
            v.push(st.b.data().len());
            v
        })
        .collect()
}

/// Minibatch indices for step `t`.
fn batch_indices(n: usize, size: usize, stream: &mut Stream) -> Option<Vec<usize>> {
    if size == 0 || size >= n {
        return None;
    }
    Some((0..size).map(|_| stream.below(n)).collect())
}

/// Run `cfg.steps` optimizer steps from `adapter`. The adapter is used as
/// given, so continual stages can carry state over; use [`init_adapter`] for a
/// fresh start.
pub fn train(
    adapter: Adapter,
    backbone: &Backbone,
    caches: &LayerCaches,
    data: &Batch,
    cfg: &TrainConfig,
    stab: &StabilityConfig,
) -> Result<(Adapter, Vec<TraceEntry>)> {
    cfg.validate()?;
    stab.validate()?;
    adapter.config.validate()?;
    adapter.check_against(caches)?;
    if data.is_empty() {
        return Err(Error::Empty("training data".into()));
    }
    let mut adapter = adapter;
    adapter.config = effective_adapter_config(&adapter.config, cfg);
    let stab = if cfg.no_stability_reg {
        StabilityConfig {
            lambda_stab: 0.0,
            ..*stab
        }
    } else {
        *stab
    };
    let trains_phi = adapter.config.trains_phi();
    let mut opt = OptimizerState::new(&param_sizes(&adapter));
    let mut sampler = Stream::new(derive_seed(cfg.seed, 0x7261_696e));
    let mut trace = Vec::with_capacity(cfg.steps);

    for step in 1..=cfg.steps {
        let owned;
        let batch = match batch_indices(data.len(), cfg.batch_size, &mut sampler) {
            Some(idx) => {
                owned = data.select(&idx)?;
                &owned
            }
            None => data,
        };
        let fwd = forward(backbone, &adapter, caches, &stab, batch)?;
        if !fwd.objective.is_finite() {
            return Err(Error::Diverged {
                step,
                reason: format!("objective is {}", fwd.objective),
            });
        }
        let mut grads = backward(backbone, &adapter, caches, &stab, batch, &fwd)?;

        let mut gslices: Vec<&mut [f64]> = Vec::new();
        for g in grads.values_mut() {
            if trains_phi {
                gslices.push(&mut g.d_phi);
            }
            gslices.push(g.d_a.data_mut());
            gslices.push(g.d_b.data_mut());
        }
        if let Some(bad) = gslices
            .iter()
            .flat_map(|g| g.iter())
            .find(|x| !x.is_finite())
        {
            return Err(Error::Diverged {
                step,
                reason: format!("non-finite gradient {bad}"),
            });
        }
        let grad_norm = clip_global_norm(&mut gslices, cfg.grad_clip);
        let lr = cfg.lr_at(step);
        let gview: Vec<&[f64]> = gslices.iter().map(|g| &**g).collect();

        let mut pslices: Vec<&mut [f64]> = Vec::new();
        for st in adapter.layers.values_mut() {
            if trains_phi {
                pslices.push(&mut st.phi);
            }
            pslices.push(st.a.data_mut());
            pslices.push(st.b.data_mut());
        }
        adamw_step(&mut pslices, &gview, &mut opt, cfg, lr).map_err(|e| match e {
            Error::Diverged { reason, .. } => Error::Diverged { step, reason },
            other => other,
        })?;

        if adapter.config.projects_residual() {
            for (id, st) in adapter.layers.iter_mut() {
                *st = retract(st, &caches[id], &adapter.config)?;
            }
        }
        trace.push(TraceEntry {
            step,
            loss: fwd.loss,
            omega: fwd.omega,
            grad_norm,
            lr,
        });
        if step % 100 == 0 {
            debug!("step {step}: loss {:.6} omega {:.3e}", fwd.loss, fwd.omega);
        }
    }
    Ok((adapter, trace))
}
