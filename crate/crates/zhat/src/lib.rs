//! # zhat
//!
//! Estimation of the softmax partition function `Z(q) = Σᵢ exp(vᵢ·q)` of a
//! trained classifier output layer, in sublinear time.
//!
//! Computing `Z(q)` exactly costs `O(N·d)` per query, which dominates
//! inference when the class count `N` is large (vocabularies, fine-grained
//! recognition). This crate implements estimators that need only the few
//! classes with the largest inner products plus a small uniform sample of
//! the rest:
//!
//! | Estimator | Idea | Cost per query |
//! |-----------|------|----------------|
//! | `nmimps`  | sum exp over the top-k head only | O(k) after retrieval |
//! | `mimps`   | head sum + importance-weighted uniform tail sample | O(k+l) |
//! | `mince`   | noise-contrastive objective with Z as the only parameter | O(k+l) per solver step |
//! | `fmbe`    | random feature map linearization of the exp kernel | O(P) |
//!
//! Top-k retrieval is provided both as an exact oracle
//! ([`oracle::exact_top_k`]) and as an approximate maximum-inner-product
//! index ([`mips::AugmentedIndex`]) that reduces inner-product ranking to
//! Euclidean nearest-neighbor search over `(d+1)`-dimensional augmented
//! vectors and searches a hierarchical k-means tree under a scoring budget.
//!
//! The [`experiments`] module reproduces the measurement protocol used to
//! evaluate the estimators: mean absolute relative error sweeps over
//! `(k, l)` grids, query-noise and simulated retrieval-error studies, CDF
//! coverage profiles, and an end-to-end comparison against the `Z ≡ 1`
//! self-normalization heuristic. The `zhat` binary wires everything into
//! reproducible, seeded runs.

pub mod dataset;
pub mod error;
pub mod estimators;
pub mod experiments;
pub mod featuremap;
pub mod mips;
pub mod numeric;
pub mod oracle;

pub use error::{Error, Result};
