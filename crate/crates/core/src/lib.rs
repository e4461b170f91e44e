//! Visual product search for generated outfit images.
//!
//! Catalog packets are enriched and embedded into a shared text/image space
//! ([`ingest`], [`embedding`], [`index`]). A look is turned into per-layer
//! text queries ([`querygen`]), each query retrieves, deduplicates and filters
//! candidates ([`retrieval`]), and candidates are reranked by a judge with a
//! cosine fallback ([`rerank`]). [`service`] runs the online pipeline under a
//! latency budget and [`eval`] aggregates human opinion scores.

pub mod attributes;
pub mod deadline;
pub mod embedding;
pub mod eval;
pub mod image;
pub mod index;
pub mod ingest;
pub mod querygen;
pub mod rerank;
pub mod retrieval;
pub mod service;
pub mod tables;

mod remote;
