//! Numerical laboratory for one-frequency quasi-periodic Schrödinger operators:
//! continued fractions, cocycle spectral quantities, KAM reducibility, wavepacket
//! transport and the modified spectral transform.

pub mod cocycle;
pub mod evolve;
pub mod grid;
pub mod kam;
pub mod numberfield;
pub mod spectral_transform;
pub mod torusfun;
