//! Global tolerance record.
//!
//! Every module reads its thresholds from a [`Tolerances`] value; nothing
//! hard-codes its own. Values are relative wherever a reference norm exists.

use serde::{Deserialize, Serialize};

/// Environment variable selecting the tolerance profile (`strict` or `default`).
pub const PROFILE_ENV: &str = "OPC_TOL_PROFILE";

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct Tolerances {
    /// Orthonormality of bases and isometries.
    pub ortho: f64,
    /// Hermitian symmetry, relative to the matrix norm.
    pub herm: f64,
    /// Negative eigenvalues above `-psd` are clamped to zero.
    pub psd: f64,
    /// Reconstruction of factorizations, relative.
    pub recon: f64,
    /// Residual of inverse field-of-values solves.
    pub realize: f64,
    /// Shrink applied to sampled numerical-range hulls before membership tests.
    pub region: f64,
    /// Default number of support angles for numerical-range sweeps.
    pub n_angles: usize,
    /// Rank threshold when orthonormalizing spanning sets.
    pub rank: f64,
    /// Span-completeness level for diagonal synthesis reports.
    pub span: f64,
}

impl Default for Tolerances {
    fn default() -> Self {
        Self {
            ortho: 1e-10,
            herm: 1e-10,
            psd: 1e-9,
            recon: 1e-10,
            realize: 1e-9,
            region: 1e-9,
            n_angles: 360,
            rank: 1e-9,
            span: 1e-3,
        }
    }
}

impl Tolerances {
    pub fn strict() -> Self {
        Self {
            ortho: 1e-12,
            herm: 1e-12,
            psd: 1e-11,
            recon: 1e-12,
            realize: 1e-11,
            region: 1e-11,
            n_angles: 720,
            rank: 1e-11,
            span: 1e-4,
        }
    }

    /// Profile by name; unknown names yield `None`.
    pub fn profile(name: &str) -> Option<Self> {
        match name.trim().to_ascii_lowercase().as_str() {
            "default" | "" => Some(Self::default()),
            "strict" => Some(Self::strict()),
            _ => None,
        }
    }

    /// Reads [`PROFILE_ENV`], falling back to the default profile.
    pub fn from_env() -> Self {
        std::env::var(PROFILE_ENV)
            .ok()
            .and_then(|p| Self::profile(&p))
            .unwrap_or_default()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn profiles_resolve() {
        assert_eq!(Tolerances::profile("STRICT"), Some(Tolerances::strict()));
        assert_eq!(Tolerances::profile("default"), Some(Tolerances::default()));
        assert!(Tolerances::profile("loose").is_none());
        assert!(Tolerances::strict().recon < Tolerances::default().recon);
    }
}
