//! Categorical invariant generative model (CIGMO): category, shape and view
//! latent variables learned from groups of same-object images, together with
//! comparison baselines and the evaluation protocol.

pub mod baselines;
pub mod cli;
pub mod data;
pub mod eval;
pub mod experiment;
pub mod model;
pub mod nn;
