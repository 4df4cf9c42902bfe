//! Contrastive stratification for compound-protein interaction prediction.
//!
//! The crate ingests interaction and reaction data ([`chemio`],
//! [`datamodel`]), partitions it into congruent views ([`stratify`]),
//! pre-trains graph and sequence encoders with a temperature-scaled
//! contrastive objective ([`encoders`], [`contrastive`], [`pipeline`]) and
//! scores the resulting interaction predictor with ranking metrics
//! ([`metrics`]). All numerics run on a small reverse-mode kernel
//! ([`autodiff`]) in 64-bit floats.

pub mod autodiff;
pub mod chemio;
pub mod contrastive;
pub mod datamodel;
pub mod encoders;
pub mod experiment;
pub mod metrics;
pub mod pipeline;
pub mod seed;
pub mod stratify;
pub mod synth;
