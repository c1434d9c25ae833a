//! Desk-scale federated semi-supervised learning simulator.
//!
//! One labeled client guides several unlabeled clients: the unlabeled side
//! trains a feature extractor with a temporal cycle-consistency objective on
//! sampled clips, the labeled side trains extractor plus classifier with
//! cross-entropy and a supervised contrastive term, and a server merges the
//! extractors by data-fraction-weighted averaging each round. Synthetic
//! multicenter workflow sequences stand in for surgical video so every loss,
//! sampler, and protocol step is executable and verifiable on a desktop CPU.

pub mod engine;
pub mod federation;
pub mod gradcheck;
pub mod losses;
pub mod metrics;
pub mod model;
pub mod rng;
pub mod sampling;
pub mod synthdata;
