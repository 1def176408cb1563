pub mod cka;
pub mod config;
pub mod datasets;
pub mod distill;
pub mod error;
pub mod eval_mono;
pub mod eval_xling;
pub mod grid;
pub mod matrix;
pub mod numerics;
pub mod par;
pub mod store;
pub mod vocab;
