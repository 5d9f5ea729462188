pub mod checkpoint;
pub mod config;
pub mod distill;
pub mod eval;
pub mod kv;
pub mod formats;
pub mod generate;
pub mod pipeline;
pub mod synth;
pub mod train;
