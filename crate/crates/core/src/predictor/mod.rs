//! Tiny decoder-only transformer over page tokens.

mod pretrain;

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::corpus::{tokenize, UserRecord, Vocabulary, BOS, EOS};
use crate::error::{Error, Result};
use crate::tensor::{Gradients, Graph, NodeId, ParamSet, Scalar, SeededRng, Segment, Tensor};

pub use pretrain::{pretrain, write_curves, EpochStats, PretrainConfig, PretrainOutcome};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PredictorConfig {
    pub layers: usize,
    pub heads: usize,
    pub model_dim: usize,
    pub ffn_dim: usize,
    pub max_seq_len: usize,
    pub dropout: f64,
}

impl Default for PredictorConfig {
    fn default() -> Self {
        PredictorConfig {
            layers: 2,
            heads: 2,
            model_dim: 64,
            ffn_dim: 256,
            max_seq_len: 512,
            dropout: 0.0,
        }
    }
}

impl PredictorConfig {
    pub fn validate(&self) -> Result<()> {
        if self.layers == 0 || self.heads == 0 || self.model_dim == 0 || self.ffn_dim == 0 || self.max_seq_len < 2 {
            return Err(Error::Config(format!("degenerate predictor config {self:?}")));
        }
        if !self.model_dim.is_multiple_of(self.heads) {
            return Err(Error::Config(format!(
                "model_dim {} is not divisible by {} heads",
                self.model_dim, self.heads
            )));
        }
        if self.dropout != 0.0 {
            return Err(Error::Config("dropout is not supported; set it to 0".into()));
        }
        Ok(())
    }
}

/// One training/evaluation example: context ids and the session to predict.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Example {
    pub input: Vec<usize>,
    pub target: Vec<usize>,
}

impl Example {
    /// Tokenizes a record, trimming context so the pair fits `max_seq_len`.
    pub fn from_record(record: &UserRecord, vocab: &Vocabulary, max_seq_len: usize) -> Result<Self> {
        let target_len = record.actual_session.len() + 2;
        if target_len + 1 > max_seq_len {
            return Err(Error::SequenceTooLong {
                len: target_len + 1,
                max: max_seq_len,
            });
        }
        let (input, target) = tokenize(record, vocab, max_seq_len - target_len);
        Ok(Example { input, target })
    }

    pub fn len(&self) -> usize {
        self.input.len() + self.target.len()
    }

    pub fn is_empty(&self) -> bool {
        self.target.is_empty()
    }
}

/// Output of a single-sequence forward pass.
#[derive(Debug, Clone)]
pub struct NllOutput {
    /// Summed NLL over target tokens.
    pub nll: f64,
    /// One distribution per target token, `[target len, vocab]`.
    pub distributions: Tensor,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Sampling {
    pub temperature: f64,
    pub top_k: usize,
    pub seed: u64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct GenerateOptions {
    pub max_new_tokens: usize,
    /// `None` means greedy decoding.
    pub sampling: Option<Sampling>,
}

impl Default for GenerateOptions {
    fn default() -> Self {
        GenerateOptions {
            max_new_tokens: 64,
            sampling: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Predictor {
    pub config: PredictorConfig,
    pub vocab_size: usize,
    pub params: ParamSet,
}

struct Packed {
    tokens: Vec<usize>,
    positions: Vec<usize>,
    targets: Vec<Option<usize>>,
    segments: Vec<Segment>,
    /// Row of the first target prediction in each segment.
    first_target_row: Vec<usize>,
}

fn pack(examples: &[&Example], max_seq_len: usize) -> Result<Packed> {
    let mut p = Packed {
        tokens: Vec::new(),
        positions: Vec::new(),
        targets: Vec::new(),
        segments: Vec::new(),
        first_target_row: Vec::new(),
    };
    for ex in examples {
        if ex.input.is_empty() || ex.target.is_empty() {
            return Err(Error::Malformed("example needs non-empty input and target".into()));
        }
        let len = ex.len();
        if len > max_seq_len {
            return Err(Error::SequenceTooLong { len, max: max_seq_len });
        }
        let start = p.tokens.len();
        let seq: Vec<usize> = ex.input.iter().chain(&ex.target).copied().collect();
        let n_in = ex.input.len();
        // Row i reads seq[i] and predicts seq[i + 1].
        for i in 0..len - 1 {
            p.tokens.push(seq[i]);
            p.positions.push(i);
            p.targets.push((i + 1 >= n_in).then(|| seq[i + 1]));
        }
        p.segments.push(Segment::new(start, len - 1));
        p.first_target_row.push(start + n_in - 1);
    }
    Ok(p)
}

fn lookup(map: &BTreeMap<String, NodeId>, name: &str) -> Result<NodeId> {
    map.get(name)
        .copied()
        .ok_or_else(|| Error::Tensor(format!("predictor parameter `{name}` is missing")))
}

/// Records the transformer forward pass for packed rows and returns the logits node.
pub(crate) fn logits_graph<T: Scalar>(
    g: &mut Graph<T>,
    p: &BTreeMap<String, NodeId>,
    cfg: &PredictorConfig,
    tokens: &[usize],
    positions: &[usize],
    segments: &[Segment],
) -> Result<NodeId> {
    let tok = g.embedding(lookup(p, "tok_emb")?, tokens)?;
    let pos = g.embedding(lookup(p, "pos_emb")?, positions)?;
    let mut x = g.add(tok, pos)?;
    for l in 0..cfg.layers {
        let w = |s: &str| lookup(p, &format!("blocks.{l}.{s}"));
        let h = g.layer_norm(x, w("ln1.g")?, w("ln1.b")?, 1e-5)?;
        let q = g.matmul(h, w("attn.wq")?)?;
        let k = g.matmul(h, w("attn.wk")?)?;
        let v = g.matmul(h, w("attn.wv")?)?;
        let a = g.causal_attention(q, k, v, cfg.heads, segments)?;
        let o = g.matmul(a, w("attn.wo")?)?;
        let o = g.add_row(o, w("attn.bo")?)?;
        x = g.add(x, o)?;
        let h = g.layer_norm(x, w("ln2.g")?, w("ln2.b")?, 1e-5)?;
        let f = g.matmul(h, w("ffn.w1")?)?;
        let f = g.add_row(f, w("ffn.b1")?)?;
        let f = g.gelu(f);
        let f = g.matmul(f, w("ffn.w2")?)?;
        let f = g.add_row(f, w("ffn.b2")?)?;
        x = g.add(x, f)?;
    }
    let h = g.layer_norm(x, lookup(p, "ln_f.g")?, lookup(p, "ln_f.b")?, 1e-5)?;
    let logits = g.matmul(h, lookup(p, "head.w")?)?;
    g.add_row(logits, lookup(p, "head.b")?)
}

/// Builds the graph for a batch and returns it with the `[batch]` node of
/// per-sequence summed target NLLs. Parameters are bound as trainable
/// leaves when `trainable`, otherwise as constants.
pub fn batch_nll_graph<T: Scalar>(
    params: &ParamSet<T>,
    cfg: &PredictorConfig,
    examples: &[&Example],
    trainable: bool,
) -> Result<(Graph<T>, NodeId)> {
    if examples.is_empty() {
        return Err(Error::EmptyDataset("nll batch"));
    }
    let packed = pack(examples, cfg.max_seq_len)?;
    let mut g = Graph::new();
    let p = if trainable {
        params.bind(&mut g)
    } else {
        params.bind_frozen(&mut g)
    };
    let logits = logits_graph(&mut g, &p, cfg, &packed.tokens, &packed.positions, &packed.segments)?;
    let nll = g.cross_entropy(logits, &packed.targets, &packed.segments)?;
    Ok((g, nll))
}

impl Predictor {
    /// Fresh parameters: N(0, 0.02) weights, zero biases, unit layer-norm gains.
    pub fn new(config: PredictorConfig, vocab_size: usize, rng: &SeededRng) -> Result<Self> {
        config.validate()?;
        let d = config.model_dim;
        let f = config.ffn_dim;
        let mut params = ParamSet::new();
        let mut counter = 0u64;
        let mut normal = |shape: &[usize], std: f64| {
            counter += 1;
            let mut r = rng.split(counter);
            let n = shape.iter().product();
            Tensor::new(shape.to_vec(), (0..n).map(|_| (r.normal() * std) as f32).collect()).expect("shape")
        };
        let proj_std = 0.02 / (2.0 * config.layers as f64).sqrt();
        params.insert("tok_emb", normal(&[vocab_size, d], 0.02));
        params.insert("pos_emb", normal(&[config.max_seq_len, d], 0.01));
        for l in 0..config.layers {
            let n = |s: &str| format!("blocks.{l}.{s}");
            params.insert(n("ln1.g"), Tensor::filled(&[d], 1.0));
            params.insert(n("ln1.b"), Tensor::zeros(&[d]));
            params.insert(n("attn.wq"), normal(&[d, d], 0.02));
            params.insert(n("attn.wk"), normal(&[d, d], 0.02));
            params.insert(n("attn.wv"), normal(&[d, d], 0.02));
            params.insert(n("attn.wo"), normal(&[d, d], proj_std));
            params.insert(n("attn.bo"), Tensor::zeros(&[d]));
            params.insert(n("ln2.g"), Tensor::filled(&[d], 1.0));
            params.insert(n("ln2.b"), Tensor::zeros(&[d]));
            params.insert(n("ffn.w1"), normal(&[d, f], 0.02));
            params.insert(n("ffn.b1"), Tensor::zeros(&[f]));
            params.insert(n("ffn.w2"), normal(&[f, d], proj_std));
            params.insert(n("ffn.b2"), Tensor::zeros(&[d]));
        }
        params.insert("ln_f.g", Tensor::filled(&[d], 1.0));
        params.insert("ln_f.b", Tensor::zeros(&[d]));
        params.insert("head.w", normal(&[d, vocab_size], 0.02));
        params.insert("head.b", Tensor::zeros(&[vocab_size]));
        Ok(Predictor {
            config,
            vocab_size,
            params,
        })
    }

    /// Rebuilds a predictor around loaded parameters, checking shapes.
    pub fn from_params(config: PredictorConfig, params: ParamSet) -> Result<Self> {
        config.validate()?;
        let head = params.get("head.w")?;
        let vocab_size = head.cols();
        let fresh = Predictor::new(config, vocab_size, &SeededRng::new(0))?;
        for (name, t) in fresh.params.iter() {
            let got = params.get(name)?;
            if got.shape() != t.shape() {
                return Err(Error::Tensor(format!(
                    "parameter `{name}` has shape {:?}, expected {:?}",
                    got.shape(),
                    t.shape()
                )));
            }
        }
        if params.len() != fresh.params.len() {
            return Err(Error::Tensor("unexpected extra predictor parameters".into()));
        }
        Ok(Predictor {
            config,
            vocab_size,
            params,
        })
    }

    pub fn num_params(&self) -> usize {
        self.params.num_elements()
    }

    /// Summed target NLL and the predicted distribution for every target token.
    pub fn forward_nll(&self, input: &[usize], target: &[usize]) -> Result<NllOutput> {
        let ex = Example {
            input: input.to_vec(),
            target: target.to_vec(),
        };
        let packed = pack(&[&ex], self.config.max_seq_len)?;
        let mut g = Graph::<f32>::new();
        let p = self.params.bind_frozen(&mut g);
        let logits = logits_graph(&mut g, &p, &self.config, &packed.tokens, &packed.positions, &packed.segments)?;
        let nll = g.cross_entropy(logits, &packed.targets, &packed.segments)?;
        let lv = g.value(logits);
        let rows: Vec<usize> = (packed.first_target_row[0]..packed.tokens.len()).collect();
        let mut dist = Vec::with_capacity(rows.len() * self.vocab_size);
        for &r in &rows {
            let mut row = lv.row(r).to_vec();
            crate::tensor::softmax_in_place(&mut row);
            dist.extend(row);
        }
        Ok(NllOutput {
            nll: g.value(nll).item() as f64,
            distributions: Tensor::new(vec![rows.len(), self.vocab_size], dist)?,
        })
    }

    /// Per-example summed NLL without building gradients.
    pub fn nll_batch(&self, examples: &[&Example]) -> Result<Vec<f32>> {
        let (g, nll) = batch_nll_graph(&self.params, &self.config, examples, false)?;
        Ok(g.value(nll).data().to_vec())
    }

    /// Mean over the batch of per-sequence summed NLL, and its gradients.
    pub fn loss_and_grads(&self, examples: &[&Example]) -> Result<(Vec<f32>, Gradients<f32>)> {
        let (mut g, nll) = batch_nll_graph(&self.params, &self.config, examples, true)?;
        let per_seq = g.value(nll).data().to_vec();
        let loss = g.mean(nll);
        let grads = g.backward(loss)?;
        Ok((per_seq, grads))
    }

    /// Logits of the next token after `context`.
    pub fn next_logits(&self, context: &[usize]) -> Result<Vec<f32>> {
        if context.is_empty() {
            return Err(Error::Malformed("empty generation context".into()));
        }
        if context.len() > self.config.max_seq_len {
            return Err(Error::SequenceTooLong {
                len: context.len(),
                max: self.config.max_seq_len,
            });
        }
        let positions: Vec<usize> = (0..context.len()).collect();
        let mut g = Graph::<f32>::new();
        let p = self.params.bind_frozen(&mut g);
        let logits = logits_graph(
            &mut g,
            &p,
            &self.config,
            context,
            &positions,
            &[Segment::new(0, context.len())],
        )?;
        Ok(g.value(logits).row(context.len() - 1).to_vec())
    }

    /// Generates the next session after `input`: a forced BOS, then one
    /// token at a time until EOS or `max_new_tokens`. The result always
    /// ends with EOS.
    pub fn generate(&self, input: &[usize], opts: &GenerateOptions) -> Result<Vec<usize>> {
        let mut out = vec![BOS];
        let mut rng = opts.sampling.map(|s| SeededRng::new(s.seed));
        for _ in 0..opts.max_new_tokens {
            let mut ctx: Vec<usize> = input.iter().chain(&out).copied().collect();
            if ctx.len() > self.config.max_seq_len {
                ctx.drain(..ctx.len() - self.config.max_seq_len);
            }
            let logits = self.next_logits(&ctx)?;
            let next = match (opts.sampling, rng.as_mut()) {
                (Some(s), Some(r)) => sample(&logits, s, r),
                _ => argmax(&logits),
            };
            out.push(next);
            if next == EOS {
                return Ok(out);
            }
        }
        out.push(EOS);
        Ok(out)
    }

    /// `exp(total NLL / total target tokens)`.
    pub fn perplexity(&self, examples: &[Example], batch_size: usize) -> Result<f64> {
        let (total, tokens) = self.total_nll(examples, batch_size)?;
        Ok((total / tokens as f64).exp())
    }

    /// Summed NLL over a dataset and the number of target tokens.
    pub fn total_nll(&self, examples: &[Example], batch_size: usize) -> Result<(f64, usize)> {
        if examples.is_empty() {
            return Err(Error::EmptyDataset("perplexity"));
        }
        let mut total = 0.0;
        let mut tokens = 0;
        for chunk in examples.chunks(batch_size.max(1)) {
            let refs: Vec<&Example> = chunk.iter().collect();
            total += self.nll_batch(&refs)?.iter().map(|&v| v as f64).sum::<f64>();
            tokens += chunk.iter().map(|e| e.target.len()).sum::<usize>();
        }
        Ok((total, tokens))
    }
}

/// Index of the largest value; ties go to the lowest index.
pub fn argmax(values: &[f32]) -> usize {
    let mut best = 0;
    for (i, &v) in values.iter().enumerate() {
        if v > values[best] {
            best = i;
        }
    }
    best
}

fn sample(logits: &[f32], s: Sampling, rng: &mut SeededRng) -> usize {
    let mut order: Vec<usize> = (0..logits.len()).collect();
    order.sort_by(|&a, &b| logits[b].total_cmp(&logits[a]).then(a.cmp(&b)));
    let k = if s.top_k == 0 { order.len() } else { s.top_k.min(order.len()) };
    let t = s.temperature.max(1e-6);
    let top = logits[order[0]] as f64;
    let weights: Vec<f64> = order[..k].iter().map(|&i| ((logits[i] as f64 - top) / t).exp()).collect();
    order[rng.weighted_index(&weights)]
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny(vocab: usize) -> Predictor {
        let cfg = PredictorConfig {
            layers: 1,
            heads: 2,
            model_dim: 8,
            ffn_dim: 16,
            max_seq_len: 32,
            dropout: 0.0,
        };
        Predictor::new(cfg, vocab, &SeededRng::new(3)).unwrap()
    }

    fn force_uniform(p: &mut Predictor) {
        for (name, t) in p.params.iter_mut() {
            if name.starts_with("head.") {
                t.data_mut().iter_mut().for_each(|v| *v = 0.0);
            }
        }
    }

    #[test]
    fn uniform_model_costs_log_vocab_per_token() {
        let mut p = tiny(5);
        force_uniform(&mut p);
        let out = p.forward_nll(&[0, 4, 1], &[0, 3, 2, 1]).unwrap();
        assert!((out.nll - 4.0 * 5f64.ln()).abs() < 1e-5);
        for r in 0..4 {
            let s: f32 = out.distributions.row(r).iter().sum();
            assert!((s - 1.0).abs() < 1e-5);
        }
        let ex = vec![Example {
            input: vec![0, 4, 1],
            target: vec![0, 3, 1],
        }];
        assert!((p.perplexity(&ex, 4).unwrap() - 5.0).abs() < 1e-4);
    }

    #[test]
    fn overlength_is_rejected() {
        let p = tiny(5);
        let long = vec![4; 40];
        assert!(matches!(p.forward_nll(&long, &[0, 1]), Err(Error::SequenceTooLong { .. })));
    }

    #[test]
    fn forced_eos_generates_empty_session() {
        let mut p = tiny(6);
        force_uniform(&mut p);
        p.params.get_mut("head.b").unwrap().data_mut()[EOS] = 50.0;
        let g = p.generate(&[0, 4, 1], &GenerateOptions::default()).unwrap();
        assert_eq!(g, vec![BOS, EOS]);
    }

    #[test]
    fn argmax_ties_go_low() {
        assert_eq!(argmax(&[1.0, 3.0, 3.0, 2.0]), 1);
        assert_eq!(argmax(&[0.0; 4]), 0);
    }

    #[test]
    fn generation_is_capped_and_closed() {
        let mut p = tiny(6);
        force_uniform(&mut p);
        p.params.get_mut("head.b").unwrap().data_mut()[5] = 50.0;
        let opts = GenerateOptions {
            max_new_tokens: 4,
            sampling: None,
        };
        let g = p.generate(&[0, 4, 1], &opts).unwrap();
        assert_eq!(g, vec![BOS, 5, 5, 5, 5, EOS]);
    }

    #[test]
    fn batched_nll_matches_single() {
        let p = tiny(7);
        let a = Example {
            input: vec![0, 4, 5, 1],
            target: vec![0, 6, 1],
        };
        let b = Example {
            input: vec![0, 6, 1],
            target: vec![0, 4, 4, 5, 1],
        };
        let batch = p.nll_batch(&[&a, &b]).unwrap();
        let sa = p.forward_nll(&a.input, &a.target).unwrap().nll;
        let sb = p.forward_nll(&b.input, &b.target).unwrap().nll;
        assert!((batch[0] as f64 - sa).abs() < 1e-5);
        assert!((batch[1] as f64 - sb).abs() < 1e-5);
    }
}
