//! Query embeddings from text prompts or example image patches.

mod engine;
mod set;

pub use engine::{
    argmin, check_query_box, dissimilarity_scores, embed_text_queries, extract_image_query,
    fewshot_average, fewshot_from_patches, select_query_token, ImageQuery, FALLBACK_QUERY,
    QUERY_IOU,
};
pub use set::{QueryEntry, QueryOrigin, QuerySet};
