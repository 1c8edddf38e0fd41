//! Binocular near-field photometric stereo with a neural heightmap.
//!
//! The pipeline reconstructs a surface heightmap `z = F(x, y)`, a per-point
//! albedo, and a single isotropic BRDF from two calibrated views of an object
//! lit by calibrated near-field point lights. The surface and albedo live in
//! a sinusoidal coordinate network ([`heightmap`]), rendering follows a
//! physically based near-field image formation model ([`shading`]), and both
//! are fit jointly by gradient descent on a reverse-mode autodiff tape
//! ([`diffmath`]). A synthetic-scene generator ([`scenegen`]) provides ground
//! truth for end-to-end validation.

pub mod dataio;
pub mod diffmath;
pub mod eval;
pub mod geometry;
pub mod heightmap;
pub mod losses;
pub mod scenegen;
pub mod shading;
pub mod trainer;
