pub mod graph;
pub mod seed;
pub mod tensor;
pub mod encoder;
pub mod checkpoint;
pub mod library;
pub mod synth;
pub mod labeling;
pub mod tam;
pub mod retrieval;
pub mod metrics;
pub mod config;
pub mod pipeline;
