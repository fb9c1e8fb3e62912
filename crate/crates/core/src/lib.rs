//! Graph self-attention forecasting: sparse dependency graphs, masked
//! attention networks, training and command-line tooling.

pub mod attention;
pub mod autodiff;
pub mod cli;
pub mod data;
pub mod graph;
pub mod layers;
pub mod model;
pub mod training;
