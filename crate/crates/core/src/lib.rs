pub mod expr;
pub mod model;
pub mod parser;
pub mod simulator;
pub mod classifier;
pub mod graph;
pub mod controllability;
pub mod report;
