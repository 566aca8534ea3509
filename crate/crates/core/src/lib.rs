//! Forward and inverse scattering for the 2-D Dirac operator
//! `H = -i σ3 ∂x + i σ2 ∂y + y σ1 + V`, whose mass term `y σ1` is a linear
//! domain wall.
//!
//! The forward solver projects the Lippmann–Schwinger equation onto a
//! Legendre (x) by Hermite (y) basis, extracts transmission/reflection
//! (TR) matrices per slab and merges slabs. The inverse side has an
//! explicit Born-level inversion and an adjoint gradient descent.

pub mod adjoint_inversion;
pub mod dense;
pub mod error;
pub mod experiments;
pub mod greens_slab;
pub mod linearized;
pub mod spectral_basis;
pub mod tr_merge;

pub use error::{Error, Result};
pub use num_complex::Complex64 as C64;

/// Number of worker threads requested through `DIRAC_THREADS`, if set.
pub fn thread_cap() -> Option<usize> {
    std::env::var("DIRAC_THREADS")
        .ok()
        .and_then(|s| s.trim().parse::<usize>().ok())
        .filter(|&n| n > 0)
}

/// Install a global rayon pool honouring `DIRAC_THREADS`. Safe to call twice.
pub fn init_threads() {
    if let Some(n) = thread_cap() {
        let _ = rayon::ThreadPoolBuilder::new().num_threads(n).build_global();
    }
}
