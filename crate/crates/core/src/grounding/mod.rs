//! Grounding an answer span in the image: a layer-max heatmap and an
//! exhaustive best-box search accelerated by summed-area tables.

mod boxes;
mod heatmap;
mod sat;

pub use boxes::{
    best_bbox, pixel_box, search_boxes, top_k_boxes, BoxCandidate, BoxSearchOptions,
    BoxSearchOutput, BoxStrategy, PixelBox, SCORE_TIE_EPS,
};
pub use heatmap::{
    layerwise_final_scores, layerwise_final_scores_with, resize_map, HeatmapGround, ResizeMode,
};
pub use sat::{build_sat, SummedAreaTable};
