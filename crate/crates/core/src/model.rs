//! Frozen feed-forward backbone: linear layers with `tanh` between them and
//! raw logits at the output. No biases.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::Matrix;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Layer {
    pub layer_id: String,
    /// `out × in`
    pub weight: Matrix,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Backbone {
    pub id: String,
    pub layers: Vec<Layer>,
}

/// Inputs (one example per row) and class labels.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Batch {
    pub x: Matrix,
    pub y: Vec<usize>,
}

impl Batch {
    pub fn new(x: Matrix, y: Vec<usize>) -> Result<Self> {
        if x.rows() != y.len() {
            return Err(Error::dim(format!(
                "{} inputs but {} labels",
                x.rows(),
                y.len()
            )));
        }
        Ok(Self { x, y })
    }

    pub fn len(&self) -> usize {
        self.y.len()
    }

    pub fn is_empty(&self) -> bool {
        self.y.is_empty()
    }

    /// Rows `idx` of this batch.
    pub fn select(&self, idx: &[usize]) -> Result<Batch> {
        if idx.is_empty() {
            return Err(Error::Empty("batch selection".into()));
        }
        let d = self.x.cols();
        let mut data = Vec::with_capacity(idx.len() * d);
        for &i in idx {
            data.extend_from_slice(self.x.row(i));
        }
        Batch::new(
            Matrix::new(idx.len(), d, data)?,
            idx.iter().map(|&i| self.y[i]).collect(),
        )
    }
}

impl Backbone {
    pub fn new(id: &str, layers: Vec<(String, Matrix)>) -> Result<Self> {
        if layers.is_empty() {
            return Err(Error::Empty("backbone has no layers".into()));
        }
        for w in layers.windows(2) {
            if w[0].1.rows() != w[1].1.cols() {
                return Err(Error::dim(format!(
                    "layer `{}` outputs {} but `{}` expects {}",
                    w[0].0,
                    w[0].1.rows(),
                    w[1].0,
                    w[1].1.cols()
                )));
            }
        }
        Ok(Self {
            id: id.to_string(),
            layers: layers
                .into_iter()
                .map(|(layer_id, weight)| Layer { layer_id, weight })
                .collect(),
        })
    }

    pub fn input_dim(&self) -> usize {
        self.layers[0].weight.cols()
    }

    pub fn classes(&self) -> usize {
        self.layers.last().unwrap().weight.rows()
    }

    pub fn weights(&self) -> BTreeMap<String, Matrix> {
        self.layers
            .iter()
            .map(|l| (l.layer_id.clone(), l.weight.clone()))
            .collect()
    }

    pub fn layer_ids(&self) -> Vec<String> {
        self.layers.iter().map(|l| l.layer_id.clone()).collect()
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let text = serde_json::to_string_pretty(self)?;
        fs::write(path, text).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let b: Backbone = serde_json::from_str(&text)?;
        let layers = b
            .layers
            .into_iter()
            .map(|l| (l.layer_id, l.weight))
            .collect();
        Backbone::new(&b.id, layers)
    }
}

/// Activations of one forward pass.
#[derive(Clone, Debug)]
pub struct Activations {
    /// Input to each layer (`N × in_l`); the first is the batch itself.
    pub inputs: Vec<Matrix>,
    pub logits: Matrix,
}

/// Forward through `weights` (in layer order).
pub fn forward(weights: &[&Matrix], x: &Matrix) -> Result<Activations> {
    let mut inputs = Vec::with_capacity(weights.len());
    let mut h = x.clone();
    for (l, w) in weights.iter().enumerate() {
        let z = h.matmul_t(w)?;
        inputs.push(h);
        if l + 1 == weights.len() {
            return Ok(Activations { inputs, logits: z });
        }
        h = z;
        h.data_mut().iter_mut().for_each(|v| *v = v.tanh());
    }
    Err(Error::Empty("no layers".into()))
}

/// Row-wise softmax with max subtraction.
pub fn softmax_rows(logits: &Matrix) -> Matrix {
    let (n, c) = logits.shape();
    let mut out = logits.clone();
    for i in 0..n {
        let row = &mut out.data_mut()[i * c..(i + 1) * c];
        let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let mut sum = 0.0;
        for v in row.iter_mut() {
            *v = (*v - max).exp();
            sum += *v;
        }
        row.iter_mut().for_each(|v| *v /= sum);
    }
    out
}

/// Mean softmax cross-entropy, via log-sum-exp.
pub fn cross_entropy(logits: &Matrix, y: &[usize]) -> Result<f64> {
    if y.is_empty() {
        return Err(Error::Empty("cross-entropy over an empty batch".into()));
    }
    if logits.rows() != y.len() {
        return Err(Error::dim(format!(
            "{} logit rows, {} labels",
            logits.rows(),
            y.len()
        )));
    }
    let c = logits.cols();
    let mut total = 0.0;
    for (i, &label) in y.iter().enumerate() {
        if label >= c {
            return Err(Error::dim(format!("label {label} with {c} classes")));
        }
        let row = logits.row(i);
        let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let lse = max + row.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
        total += lse - row[label];
    }
    Ok(total / y.len() as f64)
}

/// `∂L/∂W_l` for every layer of the mean cross-entropy loss.
pub fn weight_gradients(
    weights: &[&Matrix],
    acts: &Activations,
    y: &[usize],
) -> Result<Vec<Matrix>> {
    let n = y.len() as f64;
    let mut dz = softmax_rows(&acts.logits);
    for (i, &label) in y.iter().enumerate() {
        let c = dz.cols();
        dz.data_mut()[i * c + label] -= 1.0;
    }
    dz.scale_in_place(1.0 / n);
    let mut grads = vec![None; weights.len()];
    for l in (0..weights.len()).rev() {
        let h = &acts.inputs[l];
        grads[l] = Some(dz.t_matmul(h)?);
        if l > 0 {
            let mut dh = dz.matmul(weights[l])?;
            for (g, a) in dh.data_mut().iter_mut().zip(h.data()) {
                *g *= 1.0 - a * a;
            }
            dz = dh;
        }
    }
    Ok(grads.into_iter().map(Option::unwrap).collect())
}

/// First index of the row maximum.
pub fn argmax(row: &[f64]) -> usize {
    let mut best = 0;
    for (j, v) in row.iter().enumerate() {
        if *v > row[best] {
            best = j;
        }
    }
    best
}

/// Classification accuracy in percent.
pub fn accuracy(weights: &[&Matrix], batch: &Batch) -> Result<f64> {
    if batch.is_empty() {
        return Err(Error::Empty("accuracy over an empty batch".into()));
    }
    let acts = forward(weights, &batch.x)?;
    let hits = batch
        .y
        .iter()
        .enumerate()
        .filter(|(i, &y)| argmax(acts.logits.row(*i)) == y)
        .count();
    Ok(100.0 * hits as f64 / batch.len() as f64)
}

/// Predicted classes for every row of `x`.
pub fn predict(weights: &[&Matrix], x: &Matrix) -> Result<Vec<usize>> {
    let acts = forward(weights, x)?;
    Ok((0..x.rows()).map(|i| argmax(acts.logits.row(i))).collect())
}
