//! The synthetic world: a frozen two-layer backbone with planted geometric
//! spectra, a retention task labelled by the backbone itself, and a pool of
//! tasks labelled by perturbed teachers.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::{random_orthonormal, thin_q, Matrix};
use crate::model::{predict, Backbone, Batch};
use crate::rng::{derive_seed, Stream};

pub const RETENTION_TASK: &str = "general";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct WorldConfig {
    pub seed: u64,
    pub input_dim: usize,
    pub hidden: usize,
    pub classes: usize,
    pub sigma1: f64,
    pub rho: f64,
    pub n_tasks: usize,
    pub n_train: usize,
    pub n_eval: usize,
    /// Dimension of each task's input subspace.
    pub domain_dim: usize,
    /// Isotropic noise added to domain inputs.
    pub domain_noise: f64,
    /// Number of leading singular directions a teacher may re-gain.
    pub principal_dirs: usize,
    /// Relative gain change on each perturbed principal direction.
    pub principal_strength: f64,
    /// Frobenius norm of the complement perturbation, relative to `sigma1`.
    pub complement_strength: f64,
    /// Rank of the complement perturbation.
    pub complement_rank: usize,
    /// Use the first layer's left singular vectors as the second layer's
    /// right singular vectors, so the dominant pathway runs through both.
    pub aligned_layers: bool,
}

impl Default for WorldConfig {
    fn default() -> Self {
        Self {
            seed: 7,
            input_dim: 32,
            hidden: 32,
            classes: 8,
            sigma1: 4.0,
            rho: 0.85,
            n_tasks: 4,
            n_train: 512,
            n_eval: 1024,
            domain_dim: 8,
            domain_noise: 0.1,
            principal_dirs: 8,
            principal_strength: 0.6,
            complement_strength: 0.5,
            complement_rank: 2,
            aligned_layers: true,
        }
    }
}

/// `σ_i = σ₁ ρ^{i−1}` for `i = 1..=n`.
pub fn planted_sigma(sigma1: f64, rho: f64, n: usize) -> Vec<f64> {
    (0..n).map(|i| sigma1 * rho.powi(i as i32)).collect()
}

/// The planted factors of one layer.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PlantedLayer {
    pub u: Matrix,
    pub v: Matrix,
    pub sigma: Vec<f64>,
}

impl PlantedLayer {
    fn draw(rows: usize, cols: usize, sigma1: f64, rho: f64, stream: &mut Stream) -> Result<Self> {
        let n = rows.min(cols);
        Ok(Self {
            u: random_orthonormal(rows, n, stream)?,
            v: random_orthonormal(cols, n, stream)?,
            sigma: planted_sigma(sigma1, rho, n),
        })
    }

    pub fn weight(&self) -> Result<Matrix> {
        self.u.scale_columns(&self.sigma)?.matmul_t(&self.v)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TaskSpec {
    pub task_id: String,
    /// Share of the perturbation on the principal directions; the rest lives
    /// in the two-sided complement.
    pub principal_share: f64,
    /// Teacher weights, one per backbone layer.
    pub teacher: Vec<Matrix>,
    /// `input_dim × domain_dim` orthonormal basis of the task's inputs.
    pub domain: Matrix,
    pub train: Batch,
    pub eval: Batch,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct World {
    pub config: WorldConfig,
    pub backbone: Backbone,
    pub planted: Vec<PlantedLayer>,
    pub retention: TaskSpec,
    pub pool: Vec<TaskSpec>,
}

impl World {
    pub fn task(&self, id: &str) -> Option<&TaskSpec> {
        if id == RETENTION_TASK {
            return Some(&self.retention);
        }
        self.pool.iter().find(|t| t.task_id == id)
    }

    pub fn pool_ids(&self) -> Vec<String> {
        self.pool.iter().map(|t| t.task_id.clone()).collect()
    }

    /// Retention task followed by the pool.
    pub fn suite(&self) -> Vec<&TaskSpec> {
        std::iter::once(&self.retention).chain(&self.pool).collect()
    }
}

/// Principal share of pool task `t`: one task fully principal, one fully in
/// the complement, the rest mixed.
pub fn principal_share(t: usize, n_tasks: usize) -> f64 {
    match t {
        0 => 1.0,
        1 => 0.0,
        _ if n_tasks <= 2 => 0.5,
        _ => {
            let mixes = (n_tasks - 2) as f64;
            0.75 - 0.5 * (t - 2) as f64 / mixes.max(1.0)
        }
    }
}

/// Perturbation of one planted layer: relative gain changes on a task-specific
/// half of the leading directions plus a low-rank update confined to the
/// two-sided complement of those directions.
/// Also returns the input-side directions the perturbation touches.
fn perturbation(
    layer: &PlantedLayer,
    cfg: &WorldConfig,
    share: f64,
    stream: &mut Stream,
) -> Result<(Matrix, Vec<Vec<f64>>)> {
    let (m, n) = (layer.u.rows(), layer.v.rows());
    let kp = cfg.principal_dirs.min(m.min(n) / 2).max(1);
    let mut gains = vec![0.0; layer.sigma.len()];
    let mut dirs: Vec<usize> = (0..kp).collect();
    for i in 0..kp {
        let j = i + stream.below(kp - i);
        dirs.swap(i, j);
    }
    let mut touched = Vec::new();
    for &d in &dirs[..kp.div_ceil(2)] {
        let sign = if stream.uniform() < 0.5 { -1.0 } else { 1.0 };
        gains[d] = sign * cfg.principal_strength * share.sqrt() * layer.sigma[d];
        if share > 0.0 {
            touched.push(layer.v.column(d));
        }
    }
    let mut delta = layer.u.scale_columns(&gains)?.matmul_t(&layer.v)?;

    let comp = 1.0 - share;
    if comp > 0.0 {
        let uk = layer.u.leading_columns(kp);
        let vk = layer.v.leading_columns(kp);
        let l = Matrix::gaussian(m, cfg.complement_rank, 1.0, stream);
        let r = Matrix::gaussian(n, cfg.complement_rank, 1.0, stream);
        let l = l.sub(&uk.matmul(&uk.t_matmul(&l)?)?)?;
        let r = r.sub(&vk.matmul(&vk.t_matmul(&r)?)?)?;
        let c = l.matmul_t(&r)?;
        let scale = cfg.complement_strength * comp.sqrt() * cfg.sigma1 / c.frobenius_norm();
        delta.axpy(scale, &c)?;
        touched.extend((0..r.cols()).map(|j| r.column(j)));
    }
    Ok((delta, touched))
}

/// Orthonormal basis whose span contains the first-layer input directions
/// the task's teacher perturbs, filled up with random directions.
fn task_domain(
    cfg: &WorldConfig,
    mut touched: Vec<Vec<f64>>,
    stream: &mut Stream,
) -> Result<Matrix> {
    touched.truncate(cfg.domain_dim);
    let fill = Matrix::gaussian(cfg.input_dim, cfg.domain_dim - touched.len(), 1.0, stream);
    let mut basis = Matrix::zeros(cfg.input_dim, cfg.domain_dim);
    for (j, col) in touched.iter().enumerate() {
        basis.set_column(j, col);
    }
    for j in 0..fill.cols() {
        basis.set_column(touched.len() + j, &fill.column(j));
    }
    Ok(thin_q(&basis))
}

/// `n` inputs `x = Q z + ε` with `z ~ N(0, (d_in/d) I)` and `ε ~ N(0, noise² I)`,
/// so `E‖x‖²` roughly matches an isotropic standard input.
fn domain_inputs(q: &Matrix, n: usize, noise: f64, stream: &mut Stream) -> Result<Matrix> {
    let (d_in, d) = q.shape();
    let z = Matrix::gaussian(n, d, (d_in as f64 / d as f64).sqrt(), stream);
    let mut x = z.matmul_t(q)?;
    x.add_assign(&Matrix::gaussian(n, d_in, noise, stream))?;
    Ok(x)
}

fn labelled(weights: &[Matrix], x: Matrix) -> Result<Batch> {
    let refs: Vec<&Matrix> = weights.iter().collect();
    let y = predict(&refs, &x)?;
    Batch::new(x, y)
}

/// Build the world for `cfg.seed`.
pub fn make_world(cfg: &WorldConfig) -> Result<World> {
    if cfg.n_tasks == 0 || cfg.classes < 2 || cfg.domain_dim == 0 || cfg.domain_dim > cfg.input_dim
    {
        return Err(Error::Config(
            "world needs tasks, >= 2 classes and 1 <= domain_dim <= input_dim".into(),
        ));
    }
    let mut s = Stream::child(cfg.seed, 0);
    let first = PlantedLayer::draw(cfg.hidden, cfg.input_dim, cfg.sigma1, cfg.rho, &mut s)?;
    let mut second = PlantedLayer::draw(cfg.classes, cfg.hidden, cfg.sigma1, cfg.rho, &mut s)?;
    if cfg.aligned_layers {
        second.v = first.u.leading_columns(second.v.cols());
    }
    let planted = vec![first, second];
    let weights: Vec<Matrix> = planted
        .iter()
        .map(PlantedLayer::weight)
        .collect::<Result<_>>()?;
    let backbone = Backbone::new(
        &format!("planted-{}", cfg.seed),
        vec![
            ("fc1".into(), weights[0].clone()),
            ("fc2".into(), weights[1].clone()),
        ],
    )?;

    let mut ds = Stream::child(cfg.seed, 1);
    let mut es = Stream::child(cfg.seed, 2);
    let retention = TaskSpec {
        task_id: RETENTION_TASK.to_string(),
        principal_share: 0.0,
        teacher: weights.clone(),
        domain: Matrix::identity(cfg.input_dim),
        train: labelled(
            &weights,
            Matrix::gaussian(cfg.n_train, cfg.input_dim, 1.0, &mut ds),
        )?,
        eval: labelled(
            &weights,
            Matrix::gaussian(cfg.n_eval, cfg.input_dim, 1.0, &mut es),
        )?,
    };

    let mut pool = Vec::with_capacity(cfg.n_tasks);
    for t in 0..cfg.n_tasks {
        let share = principal_share(t, cfg.n_tasks);
        let mut ts = Stream::child(cfg.seed, derive_seed(100, t as u64));
        let mut teacher = Vec::with_capacity(planted.len());
        let mut touched = Vec::new();
        for (l, (layer, w)) in planted.iter().zip(&weights).enumerate() {
            let (delta, dirs) = perturbation(layer, cfg, share, &mut ts)?;
            teacher.push(w.add(&delta)?);
            if l == 0 {
                touched = dirs;
            }
        }
        let domain = task_domain(cfg, touched, &mut ts)?;
        let mut train_s = Stream::child(cfg.seed, derive_seed(200, t as u64));
        let mut eval_s = Stream::child(cfg.seed, derive_seed(300, t as u64));
        pool.push(TaskSpec {
            task_id: format!("task{t}"),
            principal_share: share,
            train: labelled(
                &teacher,
                domain_inputs(&domain, cfg.n_train, cfg.domain_noise, &mut train_s)?,
            )?,
            eval: labelled(
                &teacher,
                domain_inputs(&domain, cfg.n_eval, cfg.domain_noise, &mut eval_s)?,
            )?,
            teacher,
            domain,
        });
    }
    Ok(World {
        config: cfg.clone(),
        backbone,
        planted,
        retention,
        pool,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::linalg::exact_svd_oracle;
    use crate::model::accuracy;

    #[test]
    fn world_is_deterministic() {
        let cfg = WorldConfig {
            n_train: 32,
            n_eval: 32,
            ..WorldConfig::default()
        };
        assert_eq!(make_world(&cfg).unwrap(), make_world(&cfg).unwrap());
    }

    #[test]
    fn backbone_scores_perfectly_on_retention() {
        let w = make_world(&WorldConfig::default()).unwrap();
        let refs: Vec<&Matrix> = w.backbone.layers.iter().map(|l| &l.weight).collect();
        assert_eq!(accuracy(&refs, &w.retention.eval).unwrap(), 100.0);
    }

    #[test]
    fn planted_spectrum_matches_oracle() {
        let w = make_world(&WorldConfig::default()).unwrap();
        for (layer, plant) in w.backbone.layers.iter().zip(&w.planted) {
            let svd = exact_svd_oracle(&layer.weight).unwrap();
            for (a, b) in svd.sigma.iter().zip(&plant.sigma) {
                assert!((a - b).abs() <= 1e-8 * b.max(1.0));
            }
        }
    }

    #[test]
    fn shares_cover_both_extremes() {
        assert_eq!(principal_share(0, 4), 1.0);
        assert_eq!(principal_share(1, 4), 0.0);
        let mid = principal_share(2, 4);
        assert!(mid > 0.0 && mid < 1.0);
    }
}
