//! Latent-space tools: PCA directions and edits, projection of images into
//! W+, style-mixing grids, latent archives and edit sessions.

mod archive;
mod grid;
mod pca;
mod project;
mod session;

pub use archive::{LatentArchive, LATENT_FORMAT_VERSION, LATENT_KIND};
pub use grid::{mix_grid, tile_grid};
pub use pca::{apply_pca_edits, compute_pca_basis, pca_from_samples, PcaBasis, PcaEdit, PCA_KIND};
pub use project::{project, smooth, ProjectOptions, ProjectionResult, PERCEPTUAL_SEED};
pub use session::{render_session, session_latent, EditSession, FieldError, SessionLimits};
