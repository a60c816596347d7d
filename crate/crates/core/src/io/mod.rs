//! File formats and the synthetic dataset generator.

pub mod gate_file;
pub mod jsonl;
pub mod manifest;
pub mod synth;
pub mod tensor_file;
