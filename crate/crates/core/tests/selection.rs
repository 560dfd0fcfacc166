use intervene::mirrors::{select_taxa, toggle_scenarios};
use intervene::{
    BoostConfig, FitRecipe, InterventionSeriesSet, ScaleTag, SelectConfig, SubjectSeries,
};
use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Noisy flat counts; taxon 0 jumps by 10 whenever the intervention is on.
fn shifted_taxon_data(seed: u64) -> InterventionSeriesSet {
    let (n, t, j) = (16, 24, 8);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let subjects = (0..n)
        .map(|i| {
            let start = 6 + i % 5;
            let w = Array2::from_shape_fn((1, t), |(_, k)| f64::from((start..start + 5).contains(&k)));
            let y = Array2::from_shape_fn((j, t), |(row, k)| {
                let base = 20.0 + f64::from(rng.random_range(0u8..10));
                if row == 0 { base + 10.0 * w[[0, k]] } else { base }
            });
            SubjectSeries::new(format!("S{i:02}"), (0..t).map(|k| k as f64).collect(), y, w, vec![]).unwrap()
        })
        .collect();
    InterventionSeriesSet::new(
        subjects,
        (0..j).map(|k| format!("tax{k}")).collect(),
        vec!["pulse".into()],
        vec![],
        ScaleTag::Counts,
    )
    .unwrap()
}

fn config(seed: u64) -> SelectConfig {
    let mut recipe = FitRecipe::new(2, 2);
    recipe.boost = BoostConfig {
        n_rounds: 20,
        learning_rate: 0.3,
        max_depth: 2,
        seed,
        ..BoostConfig::default()
    };
    let mut config = SelectConfig::new(recipe);
    config.seed = seed;
    config
}

#[test]
fn strong_shift_is_selected() {
    for seed in [1, 2, 3] {
        let set = shifted_taxon_data(seed);
        let (on, off) = toggle_scenarios(1, None, 1).unwrap();
        let report = select_taxa(&set, &on, &off, &config(seed)).unwrap();
        assert!(report.selected_taxa.contains(&0), "seed {seed}: {:?}", report.selected_taxa);
        let pd: Vec<f64> = report.splits.iter().map(|s| s.pd1[[0, 0]]).collect();
        assert!(pd.iter().all(|&v| v > 5.0), "{pd:?}");
    }
}

#[test]
fn selection_is_deterministic_and_order_free() {
    let set = shifted_taxon_data(4);
    let (on, off) = toggle_scenarios(1, None, 1).unwrap();
    let a = select_taxa(&set, &on, &off, &config(9)).unwrap();
    let mut reversed = set.clone();
    reversed.subjects.reverse();
    let b = select_taxa(&reversed, &on, &off, &config(9)).unwrap();
    assert_eq!(a.pooled, b.pooled);
    assert_eq!(a.selected_taxa, b.selected_taxa);
}
