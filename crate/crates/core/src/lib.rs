//! Charging N two-level atoms from one cavity mode: Bethe roots, stored energy
//! for arbitrary photon statistics, and open-system checks.

pub mod battery;
pub mod bethe;
pub mod cli;
pub mod ed_oracle;
pub mod lindblad;
pub mod spectral;
