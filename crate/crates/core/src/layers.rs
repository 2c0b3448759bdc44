//! Choosing `(l_I, l_T)` for detection and `l_b` for grounding on a
//! validation split.

use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::eval::{average_precision, bbox_pr_point, scored_record, DetectionRecord, LoadedEntry};
use crate::grounding::{search_boxes, BoxSearchOptions};
use crate::manifest::Category;
use crate::scoring::{
    detection_confidence, patch_scores, span_embedding, DetectLayers, LayerChoice, TokenSpan,
};

/// Validation mAP of every evaluated layer pair, per category.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct LayerGrid {
    pub cells: BTreeMap<DetectLayers, BTreeMap<Category, f64>>,
}

// JSON objects need string keys, so cells serialize as a list.
#[derive(Serialize, Deserialize)]
struct GridCellJson {
    #[serde(rename = "l_I")]
    image: usize,
    #[serde(rename = "l_T")]
    text: usize,
    map: BTreeMap<Category, f64>,
}

impl LayerGrid {
    pub fn categories(&self) -> BTreeSet<Category> {
        self.cells.values().flat_map(|m| m.keys().copied()).collect()
    }

    pub fn to_json(&self) -> serde_json::Value {
        let cells: Vec<GridCellJson> = self
            .cells
            .iter()
            .map(|(p, m)| GridCellJson {
                image: p.image,
                text: p.text,
                map: m.clone(),
            })
            .collect();
        serde_json::to_value(cells).expect("grid serializes")
    }

    pub fn from_json(value: serde_json::Value) -> Result<Self> {
        let cells: Vec<GridCellJson> = serde_json::from_value(value).map_err(|e| Error::Parse {
            line: 0,
            message: e.to_string(),
        })?;
        Ok(Self {
            cells: cells
                .into_iter()
                .map(|c| {
                    (
                        DetectLayers {
                            image: c.image,
                            text: c.text,
                        },
                        c.map,
                    )
                })
                .collect(),
        })
    }
}

/// Every `(l_I, l_T)` pair below `layers`.
pub fn all_pairs(layers: usize) -> Vec<DetectLayers> {
    (0..layers)
        .flat_map(|image| (0..layers).map(move |text| DetectLayers { image, text }))
        .collect()
}

fn common_layers(entries: &[LoadedEntry]) -> Result<usize> {
    entries
        .iter()
        .map(|e| e.trace.layers())
        .min()
        .ok_or_else(|| Error::EmptyCategory("validation split".into()))
}

/// Contextual-lens validation mAP for each pair in `layer_set` (all pairs
/// when `None`), per category.
pub fn grid_search(entries: &[LoadedEntry], layer_set: Option<&[DetectLayers]>) -> Result<LayerGrid> {
    let layers = common_layers(entries)?;
    let pairs = match layer_set {
        Some(set) => set.to_vec(),
        None => all_pairs(layers),
    };
    for p in &pairs {
        for l in [p.image, p.text] {
            if l >= layers {
                return Err(Error::LayerOutOfRange { layer: l, layers });
            }
        }
    }
    let mut grid = LayerGrid::default();
    evaluate_pairs(entries, &pairs, &mut grid)?;
    Ok(grid)
}

fn evaluate_pairs(entries: &[LoadedEntry], pairs: &[DetectLayers], grid: &mut LayerGrid) -> Result<()> {
    let texts: BTreeSet<usize> = pairs.iter().map(|p| p.text).collect();
    // records[pair index][entry index]
    let mut records: Vec<Vec<DetectionRecord>> = vec![Vec::with_capacity(entries.len()); pairs.len()];
    for e in entries {
        let span = TokenSpan::full(e.trace.tokens());
        let embs: BTreeMap<usize, _> = texts
            .iter()
            .map(|&t| Ok((t, span_embedding(&e.trace, span, LayerChoice::Single(t))?)))
            .collect::<Result<_>>()?;
        for (i, p) in pairs.iter().enumerate() {
            let rec = scored_record(e, |t| detection_confidence(&patch_scores(t, &embs[&p.text], p.image)?))?;
            records[i].push(rec);
        }
    }
    for (p, recs) in pairs.iter().zip(records) {
        let mut by_cat: BTreeMap<Category, Vec<DetectionRecord>> = BTreeMap::new();
        for r in recs {
            by_cat.entry(r.category).or_default().push(r);
        }
        let mut cell = BTreeMap::new();
        for (cat, rs) in by_cat {
            let ap = average_precision(&rs).map_err(|_| Error::EmptyCategory(cat.to_string()))?;
            cell.insert(cat, ap);
        }
        grid.cells.insert(*p, cell);
    }
    Ok(())
}

/// Stride-2 grid first, then every pair within one layer of each
/// category's best coarse pair.
pub fn grid_search_coarse(entries: &[LoadedEntry]) -> Result<LayerGrid> {
    let layers = common_layers(entries)?;
    let coarse: Vec<DetectLayers> = all_pairs(layers)
        .into_iter()
        .filter(|p| p.image % 2 == 0 && p.text % 2 == 0)
        .collect();
    let mut grid = LayerGrid::default();
    evaluate_pairs(entries, &coarse, &mut grid)?;
    let mut refine = BTreeSet::new();
    for cat in grid.categories() {
        let best = select_task_specific(&grid, cat)?;
        for di in -1i64..=1 {
            for dt in -1i64..=1 {
                let (i, t) = (best.image as i64 + di, best.text as i64 + dt);
                if (0..layers as i64).contains(&i) && (0..layers as i64).contains(&t) {
                    let p = DetectLayers {
                        image: i as usize,
                        text: t as usize,
                    };
                    if !grid.cells.contains_key(&p) {
                        refine.insert(p);
                    }
                }
            }
        }
    }
    let refine: Vec<_> = refine.into_iter().collect();
    evaluate_pairs(entries, &refine, &mut grid)?;
    Ok(grid)
}

/// Pair with the highest mAP for `category`; ties go to the smallest
/// `(l_I, l_T)`.
pub fn select_task_specific(grid: &LayerGrid, category: Category) -> Result<DetectLayers> {
    let mut best: Option<(DetectLayers, f64)> = None;
    // BTreeMap iterates pairs in ascending order, so strict > keeps the smallest.
    for (p, m) in &grid.cells {
        if let Some(&v) = m.get(&category) {
            if best.is_none_or(|(_, b)| v > b) {
                best = Some((*p, v));
            }
        }
    }
    best.map(|(p, _)| p).ok_or(Error::UnknownCategory {
        name: category.to_string(),
        line: None,
    })
}

/// 1-based ranks by descending mAP, averaged over ties.
fn ranks(values: &[(DetectLayers, f64)]) -> BTreeMap<DetectLayers, f64> {
    let mut sorted = values.to_vec();
    sorted.sort_by(|a, b| b.1.total_cmp(&a.1));
    let mut out = BTreeMap::new();
    let mut i = 0;
    while i < sorted.len() {
        let mut j = i;
        while j + 1 < sorted.len() && sorted[j + 1].1 == sorted[i].1 {
            j += 1;
        }
        let avg = (i + j) as f64 / 2.0 + 1.0;
        for entry in &sorted[i..=j] {
            out.insert(entry.0, avg);
        }
        i = j + 1;
    }
    out
}

/// Pair with the lowest mean rank over `categories`, considering only pairs
/// scored for all of them. Ties go to the smallest pair.
pub fn select_by_mean_rank(grid: &LayerGrid, categories: &[Category]) -> Result<DetectLayers> {
    let pairs: Vec<DetectLayers> = grid
        .cells
        .iter()
        .filter(|(_, m)| categories.iter().all(|c| m.contains_key(c)))
        .map(|(p, _)| *p)
        .collect();
    let mut total: BTreeMap<DetectLayers, f64> = pairs.iter().map(|p| (*p, 0.0)).collect();
    for c in categories {
        let vals: Vec<(DetectLayers, f64)> = pairs.iter().map(|p| (*p, grid.cells[p][c])).collect();
        for (p, r) in ranks(&vals) {
            *total.get_mut(&p).unwrap() += r;
        }
    }
    let mut best: Option<(DetectLayers, f64)> = None;
    for (p, t) in total {
        if best.is_none_or(|(_, b)| t < b) {
            best = Some((p, t));
        }
    }
    best.map(|(p, _)| p)
        .ok_or_else(|| Error::EmptyCategory("no pair is scored for every category".into()))
}

/// Selection with `held_out` excluded: mean rank over the other categories.
pub fn select_adversarial(grid: &LayerGrid, held_out: Category) -> Result<DetectLayers> {
    let others: Vec<Category> = grid.categories().into_iter().filter(|&c| c != held_out).collect();
    if others.is_empty() {
        return Err(Error::NoOtherCategories(held_out.to_string()));
    }
    select_by_mean_rank(grid, &others)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LayerGridResult {
    pub scores: serde_json::Value,
    pub best_task_specific: BTreeMap<Category, DetectLayers>,
    /// Absent for categories when the grid holds a single category.
    pub best_adversarial: BTreeMap<Category, DetectLayers>,
}

pub fn analyze_grid(grid: &LayerGrid) -> Result<LayerGridResult> {
    let cats = grid.categories();
    let mut best_task_specific = BTreeMap::new();
    let mut best_adversarial = BTreeMap::new();
    for &c in &cats {
        best_task_specific.insert(c, select_task_specific(grid, c)?);
        if cats.len() > 1 {
            best_adversarial.insert(c, select_adversarial(grid, c)?);
        }
    }
    Ok(LayerGridResult {
        scores: grid.to_json(),
        best_task_specific,
        best_adversarial,
    })
}

/// Mean best-box precision per layer over the masked traces; returns the
/// best layer (lowest on ties) and the per-layer values.
pub fn select_box_layer(entries: &[LoadedEntry]) -> Result<(usize, BTreeMap<usize, f64>)> {
    let masked: Vec<&LoadedEntry> = entries
        .iter()
        .filter(|e| e.trace.gt_mask().is_some_and(|m| m.foreground_count() > 0))
        .collect();
    if masked.is_empty() {
        return Err(Error::MissingMask);
    }
    let layers = masked.iter().map(|e| e.trace.layers()).min().unwrap();
    let mut per_layer = BTreeMap::new();
    for l in 0..layers {
        let mut sum = 0.0;
        for e in &masked {
            let t = &e.trace;
            let best = search_boxes(t, TokenSpan::full(t.tokens()), l, &BoxSearchOptions::default())?.best;
            sum += bbox_pr_point(&best.pixel_box, t.gt_mask().unwrap())?.precision;
        }
        per_layer.insert(l, sum / masked.len() as f64);
    }
    let mut best = (0, f64::NEG_INFINITY);
    for (&l, &v) in &per_layer {
        if v > best.1 {
            best = (l, v);
        }
    }
    Ok((best.0, per_layer))
}

/// One model's engine defaults as stored in `layers.json`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelLayers {
    #[serde(rename = "l_I")]
    pub image: usize,
    #[serde(rename = "l_T")]
    pub text: usize,
    #[serde(rename = "l_b", default, skip_serializing_if = "Option::is_none")]
    pub bbox: Option<usize>,
}

impl ModelLayers {
    pub fn detect(&self) -> DetectLayers {
        DetectLayers {
            image: self.image,
            text: self.text,
        }
    }
}

/// `layers.json`: `{model_id: {l_I, l_T, l_b}}`.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct LayersConfig(pub BTreeMap<String, ModelLayers>);

impl LayersConfig {
    pub const DEFAULT_MODEL: &'static str = "default";

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        serde_json::from_str(&text).map_err(|e| Error::Parse {
            line: e.line(),
            message: e.to_string(),
        })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let text = serde_json::to_string_pretty(self).expect("config serializes");
        fs::write(path, text + "\n").map_err(|e| Error::io(path, e))
    }

    /// Entry for `model_id`, falling back to the `default` entry.
    pub fn for_model(&self, model_id: Option<&str>) -> Option<&ModelLayers> {
        model_id
            .and_then(|id| self.0.get(id))
            .or_else(|| self.0.get(Self::DEFAULT_MODEL))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn pair(image: usize, text: usize) -> DetectLayers {
        DetectLayers { image, text }
    }

    fn grid(cells: &[((usize, usize), &[(Category, f64)])]) -> LayerGrid {
        LayerGrid {
            cells: cells
                .iter()
                .map(|((i, t), m)| (pair(*i, *t), m.iter().copied().collect()))
                .collect(),
        }
    }

    #[test]
    fn task_specific_unique_and_tied() {
        let g = grid(&[
            ((0, 0), &[(Category::Ocr, 0.5)]),
            ((1, 3), &[(Category::Ocr, 0.9)]),
            ((2, 2), &[(Category::Ocr, 0.9)]),
        ]);
        assert_eq!(select_task_specific(&g, Category::Ocr).unwrap(), pair(1, 3));
        assert!(matches!(
            select_task_specific(&g, Category::Count),
            Err(Error::UnknownCategory { .. })
        ));
    }

    #[test]
    fn adversarial_on_one_remaining_category_matches_task_specific() {
        let g = grid(&[
            ((0, 0), &[(Category::Ocr, 0.5), (Category::Count, 0.9)]),
            ((0, 1), &[(Category::Ocr, 0.8), (Category::Count, 0.1)]),
            ((1, 1), &[(Category::Ocr, 0.6), (Category::Count, 0.3)]),
        ]);
        assert_eq!(
            select_adversarial(&g, Category::Count).unwrap(),
            select_task_specific(&g, Category::Ocr).unwrap()
        );
    }

    #[test]
    fn adversarial_needs_other_categories() {
        let g = grid(&[((0, 0), &[(Category::Ocr, 0.5)])]);
        assert!(matches!(select_adversarial(&g, Category::Ocr), Err(Error::NoOtherCategories(_))));
    }

    #[test]
    fn mean_rank_prefers_consistent_pair() {
        use Category::*;
        // A = (0,1) is first in three held-in categories and second in one.
        let g = grid(&[
            ((0, 1), &[(Action, 0.9), (Attribute, 0.9), (Relation, 0.9), (Count, 0.7), (Ocr, 0.0)]),
            ((2, 0), &[(Action, 0.8), (Attribute, 0.8), (Relation, 0.8), (Count, 0.8), (Ocr, 1.0)]),
        ]);
        assert_eq!(select_adversarial(&g, Ocr).unwrap(), pair(0, 1));
    }

    #[test]
    fn average_ranks_for_ties() {
        let r = ranks(&[(pair(0, 0), 0.5), (pair(0, 1), 0.9), (pair(1, 0), 0.5)]);
        assert_eq!(r[&pair(0, 1)], 1.0);
        assert_eq!(r[&pair(0, 0)], 2.5);
        assert_eq!(r[&pair(1, 0)], 2.5);
    }

    #[test]
    fn grid_json_round_trip() {
        let g = grid(&[((3, 27), &[(Category::Action, 0.75)])]);
        assert_eq!(LayerGrid::from_json(g.to_json()).unwrap(), g);
    }

    #[test]
    fn layers_config_fallback() {
        let mut c = LayersConfig::default();
        c.0.insert("default".into(), ModelLayers { image: 1, text: 2, bbox: None });
        c.0.insert("m".into(), ModelLayers { image: 13, text: 27, bbox: Some(13) });
        assert_eq!(c.for_model(Some("m")).unwrap().image, 13);
        assert_eq!(c.for_model(Some("zzz")).unwrap().image, 1);
        assert_eq!(c.for_model(None).unwrap().text, 2);
        let json = serde_json::to_string(&c).unwrap();
        assert!(json.contains(r#""m":{"l_I":13,"l_T":27,"l_b":13}"#), "{json}");
    }
}
