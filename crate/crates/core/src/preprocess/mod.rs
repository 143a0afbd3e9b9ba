//! PCA whitening, patch extraction and stratified low-label splitting.

mod jacobi;
mod patches;
mod pca;
mod split;

pub use jacobi::symmetric_eigen;
pub use patches::{extract_patches, patches_at, PatchMode, PatchSet};
pub use pca::{apply_pca_whiten, fit_pca, spectral_covariance, PcaModel, EIGEN_FLOOR, PCA_MAGIC};
pub use split::{stratified_split, ClassSplit, SplitSpec};
