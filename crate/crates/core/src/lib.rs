//! Instance search with saliency-weighted bags of local convolutional features.
//!
//! Local activations of a convolutional layer are post-processed ([`descriptors`]), quantised
//! against a k-means vocabulary into an assignment map ([`vocab`]), weighted spatially
//! ([`weighting`]) and histogrammed into sparse vectors ([`bow`]) that are ranked by cosine
//! similarity through an inverted index ([`index`]). [`evalkit`] scores rankings with the
//! Oxford mAP protocol.
//!
//! The numeric code is generic over [`Scalar`] (`f32` or `f64`); the aliases below fix the
//! single-precision flavour used for on-disk data.

pub mod bow;
pub mod descriptors;
pub mod error;
pub mod evalkit;
pub mod index;
mod resample;
pub mod scalar;
pub mod tensorio;
pub mod vocab;
pub mod weighting;

pub use bow::{encode, encode_cells, encode_image, encode_query, sum_pool, QueryRegion, SparseBow};
pub use descriptors::{fit_pca, PcaModel};
pub use error::{Error, Result};
pub use evalkit::{average_precision, ApConvention, EvalReport, QueryGroundTruth};
pub use index::{build_index, InvertedIndex, RankedList};
pub use scalar::Scalar;
pub use tensorio::{read_manifest, read_tensor, read_tensor_dims, write_tensor, ImageMeta, Tensor};
pub use vocab::{train_vocabulary, upsample_query, AssignmentMap, Vocabulary};
pub use weighting::{make_weights, WeightMap, WeightingScheme};

pub type TensorF32 = Tensor<f32>;
pub type TensorF64 = Tensor<f64>;
pub type PcaModelF32 = PcaModel<f32>;
pub type PcaModelF64 = PcaModel<f64>;
pub type VocabularyF32 = Vocabulary<f32>;
pub type VocabularyF64 = Vocabulary<f64>;
pub type WeightMapF32 = WeightMap<f32>;
pub type WeightMapF64 = WeightMap<f64>;
pub type SparseBowF32 = SparseBow<f32>;
pub type SparseBowF64 = SparseBow<f64>;
pub type InvertedIndexF32 = InvertedIndex<f32>;
pub type InvertedIndexF64 = InvertedIndex<f64>;
