//! Homogeneous Boltzmann equation for Maxwellian molecules in Fourier
//! variables: spectral constants, Wild sums, compensated Runge–Kutta
//! evolution and self-similar profiles.

pub mod kernel;
pub mod quad;
pub mod spectra;
pub mod charfn;
pub mod evolve;
pub mod selfsim;
pub mod cli;
