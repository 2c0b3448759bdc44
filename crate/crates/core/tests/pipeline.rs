use std::collections::BTreeMap;

use lensground::eval::{
    evaluate_grounding, load_split, map_by_category, Detector, GroundingMode, GroundingOptions,
};
use lensground::layers::{analyze_grid, grid_search, grid_search_coarse, select_box_layer, select_task_specific};
use lensground::synth::{generate_corpus, CorpusSpec, SynthSpec};
use lensground::{Category, DetectLayers, Split};

fn corpus(sigma: f64, layers: BTreeMap<Category, Vec<usize>>) -> CorpusSpec {
    CorpusSpec {
        template: SynthSpec { noise_sigma: sigma, ..SynthSpec::new(4, 32, 4, 4, 2) },
        categories: vec![Category::Count, Category::Ocr],
        per_label: 8,
        category_signal_layers: layers,
        seed: 11,
    }
}

#[test]
fn zero_noise_corpus_detects_perfectly() {
    let dir = tempfile::tempdir().unwrap();
    let m = generate_corpus(&corpus(0.0, BTreeMap::new()), dir.path()).unwrap();
    let r = map_by_category(&m, &Detector::ContextualLens { layers: None }, Split::Test).unwrap();
    assert_eq!(r.per_category_map.len(), 2);
    assert!(r.per_category_map.values().all(|&v| v == 1.0), "{r:?}");
    assert_eq!(r.mean_map, Some(1.0));
}

#[test]
fn grid_recovers_category_layers() {
    let layers = BTreeMap::from([(Category::Count, vec![1]), (Category::Ocr, vec![3])]);
    let dir = tempfile::tempdir().unwrap();
    let m = generate_corpus(&corpus(0.05, layers), dir.path()).unwrap();
    let val = load_split(&m, Split::Validation).unwrap();
    let grid = grid_search(&val, None).unwrap();
    assert_eq!(grid.cells.len(), 16);
    assert_eq!(select_task_specific(&grid, Category::Count).unwrap(), DetectLayers { image: 1, text: 1 });
    assert_eq!(select_task_specific(&grid, Category::Ocr).unwrap(), DetectLayers { image: 3, text: 3 });
    let analysis = analyze_grid(&grid).unwrap();
    assert_eq!(analysis.best_adversarial[&Category::Ocr], DetectLayers { image: 1, text: 1 });

    let coarse = grid_search_coarse(&val).unwrap();
    assert!(coarse.cells.len() < 16);
    assert_eq!(select_task_specific(&coarse, Category::Count).unwrap(), DetectLayers { image: 1, text: 1 });
}

#[test]
fn grounding_reports_on_masked_traces() {
    let dir = tempfile::tempdir().unwrap();
    let m = generate_corpus(&corpus(0.0, BTreeMap::new()), dir.path()).unwrap();
    let bbox = evaluate_grounding(&m, GroundingMode::Bbox, &GroundingOptions::default()).unwrap();
    assert_eq!(bbox.images, 8);
    let pooled = bbox.pooled_bbox_point.unwrap();
    assert_eq!((pooled.precision, pooled.recall), (1.0, 1.0));
    assert_eq!(bbox.notes.len(), 8);

    let heat = evaluate_grounding(&m, GroundingMode::Heatmap, &GroundingOptions::default()).unwrap();
    let curve = heat.curve.unwrap();
    assert_eq!(curve.points.len(), 258);
    assert_eq!(curve.points[0].recall, 1.0);
    assert_eq!(curve.points.last().unwrap().predicted, 0);

    let val = load_split(&m, Split::Validation).unwrap();
    let (layer, per_layer) = select_box_layer(&val).unwrap();
    assert_eq!(per_layer.len(), 4);
    assert_eq!(per_layer[&layer], 1.0);
}
