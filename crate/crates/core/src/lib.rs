//! Tractogram registration and clustering with a shared embedding network.

pub mod clustering;
pub mod embedding;
pub mod geometry;
pub mod gradcheck;
pub mod io;
pub mod metrics;
pub mod model;
pub mod registration;
pub mod training;
