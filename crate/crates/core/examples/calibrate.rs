//! Monte-Carlo check of the synthetic defaults: negative-trace confidence
//! and planted-box recovery.

use lensground::grounding::best_bbox;
use lensground::scoring::{detection_confidence, patch_scores, span_embedding};
use lensground::synth::{generate, Region, SynthSpec};
use lensground::{LayerChoice, TokenSpan};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn main() {
    let seeds: u64 = std::env::args().nth(1).and_then(|s| s.parse().ok()).unwrap_or(1000);

    let neg = SynthSpec { noise_sigma: 1.0, ..SynthSpec::new(2, 256, 8, 8, 1) };
    let mut worst = f64::NEG_INFINITY;
    let mut mean = 0.0;
    for seed in 0..seeds {
        let t = generate(&SynthSpec { seed, ..neg.clone() }).unwrap();
        let emb = span_embedding(&t, TokenSpan::full(1), LayerChoice::Single(1)).unwrap();
        let c = detection_confidence(&patch_scores(&t, &emb, 1).unwrap()).unwrap();
        worst = worst.max(c);
        mean += c / seeds as f64;
    }
    let bound = (2.0 * 64f64.ln() / 256.0).sqrt();
    println!("negative confidence: mean {mean:.4} max {worst:.4} (sqrt(2 ln n / d) = {bound:.4})");

    for (dim, sigma, shared) in [(64, 0.05, true), (64, 0.0, true), (256, 0.05, true), (64, 0.05, false)] {
        let mut hits = 0;
        for seed in 0..100u64 {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let region = Region::random(&mut rng, 8, 8);
            let spec = SynthSpec { region: Some(region), noise_sigma: sigma, seed, shared_region_noise: shared, ..SynthSpec::new(2, dim, 8, 8, 1) };
            let t = generate(&spec).unwrap();
            let b = best_bbox(&t, TokenSpan::full(1), 1).unwrap();
            hits += usize::from(b.coords() == region.coords());
        }
        println!("box recovery d={dim} sigma={sigma} shared={shared}: {hits}/100");
    }
}
