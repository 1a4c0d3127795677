//! Measurement and attack toolkit for embedding-table access patterns.
//!
//! Recommendation models look up sparse categorical features in embedding
//! tables, usually after a size-reducing hash layer. Someone who can watch
//! which rows get touched learns a lot about the users issuing the queries.
//! This crate models those access traces and implements the analyses that
//! quantify the leak:
//!
//! * [`trace`]: access traces, user profiles, CSV ingestion and the empirical
//!   marginal / consecutive-pair distributions every attack starts from.
//! * [`synth`]: seeded synthetic traces and profiles (Zipf popularity,
//!   group-conditioned preferences, Markov item sequences).
//! * [`hashing`]: modulo-with-mask and secret random-map hash layers.
//! * [`infotheory`]: entropy and mutual information of pre/post-hash streams.
//! * [`freq_attack`]: mask recovery against modulo hashing and top-K
//!   inversion accuracy.
//! * [`private_hash`]: greedy and OMP attacks on a secret random hash.
//! * [`anonymity`]: k-anonymity of static profiles and per-item ambiguity of
//!   demographic attributes.
//! * [`reident`]: recent-purchase keys, uniqueness and time-threshold linkage.
//!
//! All randomness goes through [`rng::seeded`], a ChaCha8 stream, so every
//! result is reproducible from its seed.

pub mod anonymity;
pub mod error;
pub mod freq_attack;
pub mod hashing;
pub mod infotheory;
pub mod private_hash;
pub mod reident;
pub mod rng;
pub mod sparse;
pub mod synth;
pub mod trace;

pub use error::{Error, Result};
