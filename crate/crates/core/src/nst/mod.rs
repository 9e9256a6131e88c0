//! Style transfer augmentation: style codes, conditional instance
//! normalization, the stylization network and the augmentation block that
//! blends codes in feature space and images in pixel space.

mod augment;
mod embedding;
mod extractor;
mod stylizer;

pub use augment::{
    draw_noise_style, draw_style_params, interpolate_pixels, SasslParams, StyleDraw, StyleRef, StyleSource,
    StyleTrace, StyleTransfer,
};
pub use embedding::{blend_embeddings, StyleEmbedding, DEFAULT_EMBEDDING_DIM};
pub use extractor::StyleExtractor;
pub use stylizer::{
    cin_affine, cin_graph, random_code, StyledLayers, Stylizer, StylizerConfig, LAYER_COUNT, NORM_EPS,
};
