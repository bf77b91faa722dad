//! Per-flow forecasting of network traffic windows with a heterogeneous
//! graph autoencoder, sequence baselines, metrics and hyperparameter search.

pub mod autodiff;
pub mod baseline;
pub mod config;
pub mod dataset;
pub mod flow;
pub mod gnn;
pub mod graph;
pub mod hpo;
pub mod metrics;
pub mod model;
pub mod nn;
pub mod preprocess;
pub mod trainer;
