use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::predictor::argmax;
use crate::tensor::{AdamW, AdamWConfig, Graph, NodeId, ParamSet, Scalar, SeededRng, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SelectorConfig {
    pub hidden: usize,
}

impl Default for SelectorConfig {
    fn default() -> Self {
        SelectorConfig { hidden: 128 }
    }
}

/// One-hidden-layer tanh MLP from embeddings to cluster logits.
#[derive(Debug, Clone, PartialEq)]
pub struct Selector {
    pub params: ParamSet,
}

impl Selector {
    pub fn new(input_dim: usize, k: usize, config: SelectorConfig, rng: &SeededRng) -> Result<Self> {
        if input_dim == 0 || k == 0 || config.hidden == 0 {
            return Err(Error::Config("selector dimensions must be positive".into()));
        }
        let init = |shape: [usize; 2], fan_in: usize, stream: u64| {
            let mut r = rng.split(stream);
            let std = 1.0 / (fan_in as f64).sqrt();
            Tensor::new(shape.to_vec(), (0..shape[0] * shape[1]).map(|_| (r.normal() * std) as f32).collect())
                .expect("shape")
        };
        let mut params = ParamSet::new();
        params.insert("w1", init([input_dim, config.hidden], input_dim, 1));
        params.insert("b1", Tensor::zeros(&[config.hidden]));
        params.insert("w2", init([config.hidden, k], config.hidden, 2));
        params.insert("b2", Tensor::zeros(&[k]));
        Ok(Selector { params })
    }

    /// Number of output columns (active clusters).
    pub fn k(&self) -> usize {
        self.params.get("b2").map(Tensor::len).unwrap_or(0)
    }

    /// Cluster probabilities for every row of `z`.
    pub fn probs(&self, z: &Tensor) -> Result<Tensor> {
        let mut g = Graph::<f32>::new();
        let p = self.params.bind_frozen(&mut g);
        let zi = g.input(z.clone());
        let logits = logits_graph(&mut g, &p, zi)?;
        let pi = g.softmax(logits);
        Ok(g.value(pi).clone())
    }

    /// Hard assignment per row (lowest index on ties).
    pub fn assign(&self, z: &Tensor) -> Result<Vec<usize>> {
        let pi = self.probs(z)?;
        Ok((0..pi.rows()).map(|i| argmax(pi.row(i))).collect())
    }

    /// Keeps only the listed output columns.
    pub fn select_clusters(&mut self, keep: &[usize]) -> Result<()> {
        let w2 = self.params.get("w2")?.select_columns(keep)?;
        let b2 = self.params.get("b2")?.select_columns(keep)?;
        self.params.insert("w2", w2);
        self.params.insert("b2", b2);
        Ok(())
    }
}

/// `tanh(z W1 + b1) W2 + b2`.
pub fn logits_graph<T: Scalar>(g: &mut Graph<T>, p: &BTreeMap<String, NodeId>, z: NodeId) -> Result<NodeId> {
    let get = |n: &str| {
        p.get(n)
            .copied()
            .ok_or_else(|| Error::Tensor(format!("selector parameter `{n}` is missing")))
    };
    let h = g.matmul(z, get("w1")?)?;
    let h = g.add_row(h, get("b1")?)?;
    let h = g.tanh(h);
    let o = g.matmul(h, get("w2")?)?;
    g.add_row(o, get("b2")?)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SelectorPretrainConfig {
    pub epochs: usize,
    pub lr: f64,
    pub batch_size: usize,
}

impl Default for SelectorPretrainConfig {
    fn default() -> Self {
        SelectorPretrainConfig {
            epochs: 20,
            lr: 1e-3,
            batch_size: 64,
        }
    }
}

/// Fits the selector to reproduce `labels` by cross-entropy and returns the
/// final agreement rate `argmax(π) == label`.
pub fn pretrain_selector(
    selector: &mut Selector,
    z: &Tensor,
    labels: &[usize],
    config: &SelectorPretrainConfig,
    seed: u64,
) -> Result<f64> {
    let n = z.rows();
    if labels.len() != n {
        return Err(Error::LengthMismatch {
            what: "selector labels",
            expected: n,
            got: labels.len(),
        });
    }
    if let Some(&bad) = labels.iter().find(|&&l| l >= selector.k()) {
        return Err(Error::Config(format!("label {bad} exceeds selector width {}", selector.k())));
    }
    let mut opt = AdamW::new(AdamWConfig {
        lr: config.lr,
        ..Default::default()
    });
    let root = SeededRng::new(seed).split_named("selector-pretrain");
    let dim = z.cols();
    for epoch in 0..config.epochs {
        let mut order: Vec<usize> = (0..n).collect();
        root.split(epoch as u64).shuffle(&mut order);
        for chunk in order.chunks(config.batch_size.max(1)) {
            let mut data = Vec::with_capacity(chunk.len() * dim);
            for &i in chunk {
                data.extend_from_slice(z.row(i));
            }
            let targets: Vec<Option<usize>> = chunk.iter().map(|&i| Some(labels[i])).collect();
            let mut g = Graph::<f32>::new();
            let p = selector.params.bind(&mut g);
            let zi = g.input(Tensor::new(vec![chunk.len(), dim], data)?);
            let logits = logits_graph(&mut g, &p, zi)?;
            let ce = g.cross_entropy(logits, &targets, &[crate::tensor::Segment::new(0, chunk.len())])?;
            let loss = g.scale(ce, 1.0 / chunk.len() as f32);
            let grads = g.backward(loss)?;
            opt.step(&mut selector.params, &grads)?;
        }
    }
    let assigned = selector.assign(z)?;
    let agree = assigned.iter().zip(labels).filter(|(a, b)| a == b).count();
    Ok(agree as f64 / n as f64)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_weights_give_uniform() {
        let mut s = Selector::new(3, 4, SelectorConfig { hidden: 5 }, &SeededRng::new(0)).unwrap();
        for (_, t) in s.params.iter_mut() {
            t.data_mut().iter_mut().for_each(|v| *v = 0.0);
        }
        let pi = s.probs(&Tensor::filled(&[2, 3], 0.7)).unwrap();
        assert!(pi.data().iter().all(|&v| (v - 0.25).abs() < 1e-7));
    }

    #[test]
    fn pruned_selector_renormalizes() {
        let mut s = Selector::new(3, 6, SelectorConfig { hidden: 5 }, &SeededRng::new(0)).unwrap();
        s.select_clusters(&[0, 2, 5]).unwrap();
        let pi = s.probs(&Tensor::filled(&[1, 3], 0.3)).unwrap();
        assert_eq!(pi.cols(), 3);
        assert!((pi.data().iter().sum::<f32>() - 1.0).abs() < 1e-6);
    }

    #[test]
    fn learns_two_blobs() {
        let mut r = SeededRng::new(4);
        let mut data = Vec::new();
        let mut labels = Vec::new();
        for i in 0..200 {
            let c = if i % 2 == 0 { 1.0 } else { -1.0 };
            data.push((c + 0.1 * r.normal()) as f32);
            data.push((0.1 * r.normal()) as f32);
            labels.push(i % 2);
        }
        let z = Tensor::new(vec![200, 2], data).unwrap();
        let mut s = Selector::new(2, 2, SelectorConfig { hidden: 8 }, &SeededRng::new(1)).unwrap();
        let agree = pretrain_selector(&mut s, &z, &labels, &SelectorPretrainConfig::default(), 0).unwrap();
        assert!(agree >= 0.99, "{agree}");
    }

    #[test]
    fn zero_epochs_is_a_no_op() {
        let z = Tensor::filled(&[4, 2], 0.5);
        let mut s = Selector::new(2, 2, SelectorConfig { hidden: 3 }, &SeededRng::new(1)).unwrap();
        let before = s.clone();
        let cfg = SelectorPretrainConfig {
            epochs: 0,
            ..Default::default()
        };
        pretrain_selector(&mut s, &z, &[0, 0, 0, 0], &cfg, 0).unwrap();
        assert_eq!(s, before);
    }
}
