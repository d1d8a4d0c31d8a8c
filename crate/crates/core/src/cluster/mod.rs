//! K-means initialisation, the cluster selector, the centroid dictionary and pruning.

mod ari;
mod kmeans;
mod selector;
mod state;

pub use ari::adjusted_rand_index;
pub use kmeans::{kmeans, nearest, KMeansResult};
pub use selector::{logits_graph, pretrain_selector, Selector, SelectorConfig, SelectorPretrainConfig};
pub use state::{ClusterState, EpochClusterStats};
