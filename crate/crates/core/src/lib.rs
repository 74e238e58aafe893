//! NetConv: a byte-token convolution model for traffic classification.
//!
//! The pipeline turns packet captures into fixed-layout two-byte-token flow
//! records, pre-trains a stacked traffic-convolution encoder by predicting
//! masked contiguous token spans, fine-tunes it for classification, and
//! benchmarks its throughput and length scaling against a reference
//! self-attention layer.

pub mod bench;
pub mod finetune;
pub mod ingest;
pub mod model;
pub mod pretrain;
pub mod rng;
pub mod vocab;
