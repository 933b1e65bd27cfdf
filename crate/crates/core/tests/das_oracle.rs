mod common;

use anchorgcd::das::{candidate_set, density_peak, knn_mean_distance};
use anchorgcd::rng::seeded;
use common::{das_oracle, library_das, random_das_instance, DasOracleConfig};
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};

#[test]
fn selection_matches_brute_force_on_grid_instances() {
    let mut r = seeded(9, 0);
    for seed in 0..300 {
        let (points, probs, new) = random_das_instance(seed, 12);
        let cfg = DasOracleConfig {
            omega: [0.0, 0.25, 0.5, 0.75, 1.0][r.random_range(0..5)],
            gamma: [0.1, 0.5, 0.9, 1.0][r.random_range(0..4)],
            beta: [0.2, 0.5, 0.8, 1.0][r.random_range(0..4)],
            k_fraction: [0.1, 0.5, 1.0][r.random_range(0..3)],
            eta_override: if seed % 5 == 0 { Some(r.random_range(1..5)) } else { None },
        };
        assert_eq!(
            library_das(&points, &probs, &new, &cfg),
            das_oracle(&points, &probs, &new, &cfg),
            "instance {seed}"
        );
    }
}

#[test]
fn outlier_is_never_the_peak() {
    for seed in 0..20 {
        let mut r = seeded(seed, 0);
        let mut pts: Vec<Vec<f64>> = (0..30)
            .map(|_| (0..4).map(|_| StandardNormal.sample(&mut r)).collect())
            .collect();
        pts.push(vec![50.0; 4]);
        let peak = density_peak(&pts, 15).unwrap();
        assert_ne!(peak, 30);
    }
}

#[test]
fn knn_distance_matches_full_sort() {
    let mut r = seeded(4, 0);
    let pts: Vec<Vec<f64>> = (0..40)
        .map(|_| (0..3).map(|_| r.random_range(-2..=2) as f64).collect())
        .collect();
    for k in [1, 5, 20, 39] {
        let got = knn_mean_distance(&pts, k).unwrap();
        for (i, g) in got.iter().enumerate() {
            let mut d: Vec<f64> = (0..40)
                .filter(|&j| j != i)
                .map(|j| pts[i].iter().zip(&pts[j]).map(|(a, b)| (a - b).powi(2)).sum::<f64>().sqrt())
                .collect();
            d.sort_by(|a, b| a.partial_cmp(b).unwrap());
            let want = d[..k].iter().sum::<f64>() / k as f64;
            assert_eq!(*g, want, "point {i} k {k}");
        }
    }
}

#[test]
fn candidate_set_size_and_order() {
    let pts: Vec<Vec<f64>> = (0..10).map(|i| vec![i as f64]).collect();
    assert_eq!(candidate_set(&pts, 0, 0.3), vec![0, 1, 2]);
    assert_eq!(candidate_set(&pts, 5, 0.3), vec![5, 4, 6]);
    assert_eq!(candidate_set(&pts, 5, 0.0), vec![5]);
    assert_eq!(candidate_set(&pts, 9, 1.0).len(), 10);
}
