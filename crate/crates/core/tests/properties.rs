//! Property checks that cut across modules.

use chrono::NaiveDate;
use proptest::prelude::*;
use seco_core::eval::{average_precision, mean_average_precision, stratified_subsample, Targets};
use seco_core::geosampler::{build_date_schedule, gaps_are_legal, latest_reference};
use seco_core::image::FloatImage;
use seco_core::rng::seeded;
use seco_core::views::{make_views, AugmentationConfig};

fn noise_image(size: usize, seed: u64) -> FloatImage {
    use rand::Rng;
    let mut rng = seeded(seed);
    FloatImage {
        height: size,
        width: size,
        data: (0..size * size * 3).map(|_| rng.gen_range(0.0..1.0)).collect(),
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn schedules_are_legal_and_in_the_past(seed in any::<u64>(), jitter in 0u32..=365, days in 0i64..20_000) {
        let today = NaiveDate::from_ymd_opt(1980, 1, 1).unwrap() + chrono::Duration::days(days);
        let s = build_date_schedule(&mut seeded(seed), today, jitter).unwrap();
        prop_assert_eq!(s.dates.len(), 5);
        prop_assert!(s.reference() <= latest_reference(today));
        prop_assert!(*s.dates.last().unwrap() < today);
        prop_assert!(gaps_are_legal(&s, &s.dates));
    }

    #[test]
    fn views_stay_in_unit_range(seed in any::<u64>(), size in 8usize..24) {
        let patches: Vec<FloatImage> = (0..5).map(|i| noise_image(size, seed ^ i)).collect();
        let cfg = AugmentationConfig { out_size: 12, ..Default::default() };
        let v = make_views(&patches, &mut seeded(seed), &cfg).unwrap();
        let (a, b, c) = v.t_indices;
        prop_assert!(a != b && b != c && a != c);
        for img in [&v.x_q, &v.x_k0, &v.x_k1, &v.x_k2] {
            prop_assert_eq!((img.height, img.width), (12, 12));
            prop_assert!(img.data.iter().all(|x| (0.0..=1.0).contains(x)));
        }
    }

    #[test]
    fn average_precision_is_a_probability(scores in prop::collection::vec(-5.0f64..5.0, 1..40), seed in any::<u64>()) {
        use rand::Rng;
        let mut rng = seeded(seed);
        let labels: Vec<u8> = scores.iter().map(|_| u8::from(rng.gen_bool(0.4))).collect();
        match average_precision(&scores, &labels) {
            Some(ap) => prop_assert!(ap > 0.0 && ap <= 1.0),
            None => prop_assert!(labels.iter().all(|&l| l == 0)),
        }
    }

    #[test]
    fn perfect_ranking_scores_one(n in 2usize..30, c in 1usize..5, seed in any::<u64>()) {
        use rand::Rng;
        let mut rng = seeded(seed);
        let labels: Vec<Vec<u8>> = (0..n).map(|_| (0..c).map(|_| u8::from(rng.gen_bool(0.5))).collect()).collect();
        let scores: Vec<Vec<f64>> = labels.iter().map(|r| r.iter().map(|&l| f64::from(l)).collect()).collect();
        if let Ok(m) = mean_average_precision(&scores, &labels) {
            prop_assert!((m - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn subsamples_are_distinct_indices(n in 10usize..200, frac in 0.05f64..1.0, seed in any::<u64>()) {
        let targets = Targets::SingleLabel((0..n).map(|i| i % 4).collect());
        let idx = stratified_subsample(&targets, 4, frac, seed).unwrap();
        let mut sorted = idx.clone();
        sorted.sort_unstable();
        sorted.dedup();
        prop_assert_eq!(sorted.len(), idx.len());
        prop_assert!(idx.iter().all(|&i| i < n));
        prop_assert!(!idx.is_empty());
    }
}
