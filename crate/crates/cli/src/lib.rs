pub mod audit;
pub mod bench;
pub mod config;
pub mod dataset;
pub mod stream;
