pub mod autodiff;
pub mod market_data;
pub mod relation_graph;
pub mod seed;
pub mod encoders;
pub mod gat;
pub mod model;
pub mod eval;
pub mod training;
pub mod cli;
