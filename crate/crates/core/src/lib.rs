//! Clustered federated learning with a loss-gap client metric.
//!
//! Clients train briefly on their own data, exchange model parameters, and
//! report how much worse each peer's model does on their local data. The
//! server sums the two one-sided gaps into a symmetric distance matrix,
//! clusters it with a distance-only algorithm (k-medoids, agglomerative,
//! DBSCAN) and then runs federated averaging inside every cluster.
//!
//! Module map:
//!
//! * [`model`]: linear regression, softmax and small MLP hypotheses.
//! * [`data`]: synthetic heterogeneous federations and IDX ingestion.
//! * [`trainer`]: local SGD, warm-up and the closed-form linear solver.
//! * [`metrics`]: loss-gap, parameter-norm and gradient-cosine matrices.
//! * [`clustering`]: k-medoids, agglomerative, DBSCAN and ARI.
//! * [`fed`]: FedAvg, the clustered pipeline, IFCA and local training.
//! * [`bounds`]: concentration bound machinery and its Monte-Carlo check.
//! * [`harness`]: experiment configs, multi-seed runs and artifacts.

#![allow(clippy::neg_cmp_op_on_partial_ord, clippy::needless_range_loop)]

pub mod bounds;
pub mod clustering;
pub mod data;
mod error;
pub mod fed;
pub mod harness;
pub mod metrics;
pub mod model;
mod parallel;
pub mod seed;
pub mod trainer;

pub use error::{Error, Result};
