use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::cluster::{nearest, Selector};
use crate::corpus::{SessionDataset, Vocabulary};
use crate::encoder::{BagOfPagesEncoder, Encoder, EncoderConfig};
use crate::error::{Error, Result};
use crate::predictor::{Example, Predictor, PredictorConfig};
use crate::tensor::{load_checkpoint, save_checkpoint, Tensor};

/// How a user is mapped to one of the predictors.
#[derive(Debug, Clone, PartialEq)]
pub enum Routing {
    /// Argmax of the learned selector.
    Selector(Selector),
    /// Nearest fixed centroid (k-means baseline).
    Centroids(Vec<Vec<f64>>),
    /// Everybody goes to predictor 0.
    Single,
}

/// A set of predictors plus the rule that picks one per user.
#[derive(Debug, Clone, PartialEq)]
pub struct ClusterModel {
    pub name: String,
    pub encoder: EncoderConfig,
    pub vocab: Vocabulary,
    pub routing: Routing,
    pub predictors: Vec<Predictor>,
}

#[derive(Serialize, Deserialize)]
struct Manifest {
    name: String,
    routing: String,
    encoder: EncoderConfig,
    predictor: PredictorConfig,
    clusters: usize,
    #[serde(default)]
    centroids: Vec<Vec<f64>>,
}

impl ClusterModel {
    pub fn single(name: impl Into<String>, encoder: EncoderConfig, vocab: Vocabulary, predictor: Predictor) -> Self {
        ClusterModel {
            name: name.into(),
            encoder,
            vocab,
            routing: Routing::Single,
            predictors: vec![predictor],
        }
    }

    pub fn k(&self) -> usize {
        self.predictors.len()
    }

    pub fn encoder(&self) -> Result<BagOfPagesEncoder> {
        BagOfPagesEncoder::new(self.encoder, &self.vocab)
    }

    pub fn embed(&self, dataset: &SessionDataset) -> Result<Tensor> {
        self.encoder()?.embed_all(dataset)
    }

    /// Predictor index for every embedding row.
    pub fn route_embeddings(&self, z: &Tensor) -> Result<Vec<usize>> {
        match &self.routing {
            Routing::Selector(s) => s.assign(z),
            Routing::Centroids(c) => Ok((0..z.rows())
                .map(|i| {
                    let row: Vec<f64> = z.row(i).iter().map(|&v| v as f64).collect();
                    nearest(&row, c).0
                })
                .collect()),
            Routing::Single => Ok(vec![0; z.rows()]),
        }
    }

    pub fn route(&self, dataset: &SessionDataset) -> Result<Vec<usize>> {
        if dataset.is_empty() {
            return Ok(Vec::new());
        }
        self.route_embeddings(&self.embed(dataset)?)
    }

    pub fn examples(&self, dataset: &SessionDataset) -> Result<Vec<Example>> {
        let max = self.predictors[0].config.max_seq_len;
        dataset
            .records
            .iter()
            .map(|r| Example::from_record(r, &self.vocab, max))
            .collect()
    }

    /// Summed NLL of each example under its routed predictor.
    pub fn routed_nll(&self, examples: &[Example], routes: &[usize], workers: usize) -> Result<Vec<f64>> {
        if examples.len() != routes.len() {
            return Err(Error::LengthMismatch {
                what: "routes",
                expected: examples.len(),
                got: routes.len(),
            });
        }
        let mut out = vec![0.0; examples.len()];
        let per_cluster = crate::parallel::par_map(&(0..self.k()).collect::<Vec<_>>(), workers, |&k| {
            let idx: Vec<usize> = (0..examples.len()).filter(|&i| routes[i] == k).collect();
            let mut vals = Vec::with_capacity(idx.len());
            for chunk in idx.chunks(32) {
                let refs: Vec<&Example> = chunk.iter().map(|&i| &examples[i]).collect();
                vals.extend(self.predictors[k].nll_batch(&refs)?.into_iter().map(|v| v as f64));
            }
            Ok::<_, Error>((idx, vals))
        });
        for res in per_cluster {
            let (idx, vals) = res?;
            for (i, v) in idx.into_iter().zip(vals) {
                out[i] = v;
            }
        }
        Ok(out)
    }

    /// Per-token NLL of the routed predictors over a dataset.
    pub fn combined_nll(&self, dataset: &SessionDataset, workers: usize) -> Result<f64> {
        let examples = self.examples(dataset)?;
        if examples.is_empty() {
            return Err(Error::EmptyDataset("combined nll"));
        }
        let routes = self.route(dataset)?;
        let total: f64 = self.routed_nll(&examples, &routes, workers)?.iter().sum();
        let tokens: usize = examples.iter().map(|e| e.target.len()).sum();
        Ok(total / tokens as f64)
    }

    pub fn save(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir).map_err(|e| Error::file(dir, e))?;
        let (routing, centroids) = match &self.routing {
            Routing::Selector(s) => {
                save_checkpoint(&dir.join("selector"), &s.params, serde_json::json!({ "k": s.k() }))?;
                ("selector", Vec::new())
            }
            Routing::Centroids(c) => ("centroids", c.clone()),
            Routing::Single => ("single", Vec::new()),
        };
        let manifest = Manifest {
            name: self.name.clone(),
            routing: routing.into(),
            encoder: self.encoder,
            predictor: self.predictors[0].config,
            clusters: self.k(),
            centroids,
        };
        let path = dir.join("model.json");
        std::fs::write(&path, serde_json::to_string_pretty(&manifest)?).map_err(|e| Error::file(&path, e))?;
        self.vocab.save(&dir.join("vocab.json"))?;
        for (k, p) in self.predictors.iter().enumerate() {
            save_checkpoint(
                &dir.join(format!("predictor_{k}")),
                &p.params,
                serde_json::json!({ "cluster": k }),
            )?;
        }
        Ok(())
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let path = dir.join("model.json");
        let text = std::fs::read_to_string(&path).map_err(|e| Error::file(&path, e))?;
        let m: Manifest = serde_json::from_str(&text)?;
        let vocab = Vocabulary::load(&dir.join("vocab.json"))?;
        let predictors = (0..m.clusters)
            .map(|k| {
                let (params, _) = load_checkpoint(&dir.join(format!("predictor_{k}")))?;
                Predictor::from_params(m.predictor, params)
            })
            .collect::<Result<Vec<_>>>()?;
        if predictors.is_empty() {
            return Err(Error::Malformed(format!("{} lists no predictors", path.display())));
        }
        let routing = match m.routing.as_str() {
            "selector" => {
                let (params, _) = load_checkpoint(&dir.join("selector"))?;
                Routing::Selector(Selector { params })
            }
            "centroids" => Routing::Centroids(m.centroids),
            "single" => Routing::Single,
            other => return Err(Error::Malformed(format!("unknown routing `{other}`"))),
        };
        Ok(ClusterModel {
            name: m.name,
            encoder: m.encoder,
            vocab,
            routing,
            predictors,
        })
    }
}
