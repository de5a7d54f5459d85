//! Regional singular-vector keys and the reduced non-local module built on
//! them, plus the exact SVD used to check them.

mod matrix;
mod power;
mod regions;
mod svd;
mod svn;

pub use matrix::Matrix;
pub use power::{power_iteration, power_iteration_traced, PowerTrace, SignFix};
pub use regions::{partition_regions, FeatureView, RegionBounds, RegionGrid};
pub use svd::{rank_k_approx, svd_oracle, SvdResult};
pub use svn::{
    extract_keys, reduced_nonlocal, standard_nonlocal, svn_block, svn_module_forward, KeyValueBank,
    Normalizer, SvnConfig, SvnVars, SvnWeights,
};
