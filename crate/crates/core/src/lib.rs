//! Seamless texture tiling by Gram-matrix feature matching.
//!
//! A new tile is appended to an exemplar texture and optimized with Adam so
//! the merged image's VGG19 (average-pooling) Gram statistics match the
//! exemplar's. The same machinery fills rectangular holes and grows a
//! texture step by step in any direction.

pub mod error;
pub mod gram;
pub mod image;
pub mod network;
pub mod optim;
pub mod tiling;
pub mod weights;

pub use error::{Error, Result};
pub use gram::{gram_matrix, layer_loss, total_loss, GramMatrix, GramTargets, LossConfig};
pub use image::{
    alpha_optimal, build_merged_canvas, load_image, make_seam_init, make_white_noise, save_image,
    Direction, MergedCanvas, Rect, SeamNoiseConfig, TextureImage, TileGeometry,
};
pub use network::{forward_features, input_gradient, preprocess, FeatureNetwork, LayerId};
pub use optim::{adam_step, synthesize, AdamState, OptimConfig, OptimTrace, Precision};
pub use tiling::{expand, fill_hole, tile, Alpha, ExpansionPlan, HoleSpec, TileRequest};
pub use weights::{load_weights, random_weights, NetworkWeights};
