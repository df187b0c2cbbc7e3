mod common;

use common::*;
use hormone_recon::datagen::{generate_cohort, generate_series, CycleCharacteristics, WaveformParams, default_population_gaussian};
use hormone_recon::eval::Scaler;
use hormone_recon::mgp::{FitConfig, PosteriorSeries};
use hormone_recon::rng::rng_from;
use hormone_recon::sampling::*;
use hormone_recon::{HormoneId, OBSERVATION_WINDOW};
use nalgebra::DMatrix;
use proptest::prelude::*;
use rand::seq::SliceRandom;
use rand::Rng;

/// `E|r - sigma e|`, `e ~ N(0, 1)`, by Simpson's rule on `[-12, 12]`.
fn psi_quadrature(r: f64, sigma: f64) -> f64 {
    let n = 240_000;
    let h = 24.0 / n as f64;
    let f = |e: f64| (r - sigma * e).abs() * (-0.5 * e * e).exp() / (2.0 * std::f64::consts::PI).sqrt();
    let mut s = f(-12.0) + f(12.0);
    for i in 1..n {
        let e = -12.0 + i as f64 * h;
        s += if i % 2 == 1 { 4.0 } else { 2.0 } * f(e);
    }
    s * h / 3.0
}

/// Posterior with a diagonal covariance over `days`.
fn diagonal_posterior(days: Vec<usize>, mean: DMatrix<f64>, var: DMatrix<f64>) -> PosteriorSeries {
    let m = days.len();
    let mut cov = DMatrix::zeros(5 * m, 5 * m);
    for h in 0..5 {
        for i in 0..m {
            cov[(h * m + i, h * m + i)] = var[(h, i)];
        }
    }
    PosteriorSeries {
        individual_id: "p".into(),
        days,
        mean,
        covariance: cov,
        groups: HormoneId::ALL.iter().map(|&h| vec![h]).collect(),
    }
}

#[test]
fn closed_form_anchors() {
    assert!((expected_distance(0.3, 0.3, 1.0) - 2.0 / (2.0 * std::f64::consts::PI).sqrt()).abs() < 1e-15);
    assert_eq!(expected_distance(2.5, 2.0, 0.0), 0.5);
    assert!((expected_distance(2.5, 2.0, 1e-12) - 0.5).abs() < 1e-12);
    let eps = normals(&mut rng_from(1), 1_000_000);
    let (mc, _) = mc_expected_distance(1.0, 2.0, &eps);
    let psi = expected_distance(1.0, 0.0, 2.0);
    assert!((psi - mc).abs() / mc < 0.01, "{psi} vs {mc}");
    for (r, s) in [(0.0, 1.0), (1.0, 2.0), (-2.0, 0.5), (3.0, 5.0)] {
        assert!((expected_distance(r, 0.0, s) - psi_quadrature(r, s)).abs() < 1e-9);
    }
}

#[test]
fn closed_form_is_monotone_and_has_the_right_limits() {
    for i in 0..=40 {
        let r = -4.0 + 0.2 * i as f64;
        let mut last = r.abs();
        for j in 1..=200 {
            let s = 0.025 * j as f64;
            let v = expected_distance(r, 0.0, s);
            assert!(v >= 0.0 && v >= last - 1e-15, "r={r} s={s}");
            last = v;
        }
        let big = 1e6;
        let ratio = expected_distance(r, 0.0, big) / (big * (2.0 / std::f64::consts::PI).sqrt());
        assert!((ratio - 1.0).abs() < 1e-9);
        assert!((expected_distance(r, 0.0, 1e-9) - r.abs()).abs() < 1e-9);
    }
}

#[test]
fn closed_form_agrees_with_monte_carlo_on_a_grid() {
    // One shared set of draws for every cell.
    let eps = normals(&mut rng_from(2), 100_000);
    for i in 0..8 {
        for j in 0..8 {
            let r = -3.0 + 6.0 * i as f64 / 7.0;
            let s = 0.01 + (5.0 - 0.01) * j as f64 / 7.0;
            let (mean, se) = mc_expected_distance(r, s, &eps);
            assert!((expected_distance(r, 0.0, s) - mean).abs() <= 3.0 * se, "r={r} s={s}");
        }
    }
}

#[test]
fn single_member_single_hormone_reduces_to_the_scalar_score() {
    let days: Vec<usize> = (1..=70).collect();
    let mut truth = DMatrix::zeros(5, 105);
    let mut mean = DMatrix::zeros(5, 70);
    let mut var = DMatrix::zeros(5, 70);
    // Only LH carries any distance; every other hormone is exact and certain.
    for t in 0..70 {
        truth[(4, t)] = (t as f64 * 0.2).sin();
        mean[(4, t)] = 0.1 * t as f64 / 70.0;
        var[(4, t)] = 0.04 + 0.01 * t as f64;
    }
    let post = diagonal_posterior(days, mean.clone(), var.clone());
    let member = EdMember { cycle_length: 30, truth: &truth, posterior: &post };
    let grid = candidate_grid();
    let scores = population_ed(&[member], &grid, &(1..=70));
    for (c, s) in grid.iter().zip(&scores) {
        let day = c.day(30);
        if (1..=70).contains(&day) {
            let i = day as usize - 1;
            let want = expected_distance(truth[(4, i)], mean[(4, i)], var[(4, i)].sqrt());
            assert!((s.unwrap() - want).abs() < 1e-15);
        } else {
            assert_eq!(*s, None);
        }
    }
    // Duplicating the cohort doubles every score.
    let doubled = population_ed(&[member, member], &grid, &(1..=70));
    for (a, b) in scores.iter().zip(&doubled) {
        match (a, b) {
            (Some(a), Some(b)) => assert!((b - 2.0 * a).abs() <= 1e-12 * a.abs().max(1.0)),
            (None, None) => {}
            _ => panic!("coverage changed"),
        }
    }
    assert_eq!(argmax_earliest(&scores), argmax_earliest(&doubled));
}

#[test]
fn two_members_two_days_by_hand() {
    // Member A (L = 20) and B (L = 35), posterior on days 7 and 14 only.
    let truth_a = DMatrix::from_fn(5, 105, |h, t| (h + 1) as f64 * 0.1 + if t == 13 { 1.0 } else { 0.0 });
    let truth_b = DMatrix::from_fn(5, 105, |h, _| -(h as f64) * 0.2);
    let mean_a = DMatrix::from_row_slice(5, 2, &[0.0, 0.5, 0.1, 0.2, 0.3, 0.3, 0.4, 0.4, 0.5, 0.5]);
    let var_a = DMatrix::from_row_slice(5, 2, &[1.0, 0.25, 0.0, 0.0, 0.5, 0.5, 2.0, 0.1, 0.0, 1.0]);
    let mean_b = DMatrix::from_row_slice(5, 2, &[1.0, -1.0, 0.0, 0.0, 0.5, -0.5, 0.2, 0.2, 0.0, 0.0]);
    let var_b = DMatrix::from_row_slice(5, 2, &[0.3, 0.3, 1.0, 0.0, 0.0, 0.0, 0.7, 0.7, 0.2, 0.9]);
    let pa = diagonal_posterior(vec![7, 14], mean_a.clone(), var_a.clone());
    let pb = diagonal_posterior(vec![7, 14], mean_b.clone(), var_b.clone());
    let members = [
        EdMember { cycle_length: 20, truth: &truth_a, posterior: &pa },
        EdMember { cycle_length: 35, truth: &truth_b, posterior: &pb },
    ];
    // 0.35 * 20 = 7 and 0.7 * 20 = 14 for A; 0.2 * 35 = 7 and 0.4 * 35 = 14 for B.
    let cands = [
        CyclePoint { cycle: 0, phase: 0.35 },
        CyclePoint { cycle: 0, phase: 0.7 },
        CyclePoint { cycle: 0, phase: 0.2 },
        CyclePoint { cycle: 0, phase: 0.4 },
        CyclePoint { cycle: 0, phase: 0.9 },
    ];
    let scores = population_ed(&members, &cands, &(1..=70));
    let cell = |truth: &DMatrix<f64>, mean: &DMatrix<f64>, var: &DMatrix<f64>, day: usize, i: usize| -> f64 {
        (0..5)
            .map(|h| psi_quadrature(truth[(h, day - 1)] - mean[(h, i)], var[(h, i)].sqrt()))
            .sum()
    };
    // Phase 0.35: A at day 7; B at day 12 (not on its grid).
    let want = [
        Some(cell(&truth_a, &mean_a, &var_a, 7, 0)),
        Some(cell(&truth_a, &mean_a, &var_a, 14, 1)),
        Some(cell(&truth_b, &mean_b, &var_b, 7, 0)),
        Some(cell(&truth_b, &mean_b, &var_b, 14, 1)),
        None,
    ];
    for (got, want) in scores.iter().zip(want) {
        match (got, want) {
            (Some(g), Some(w)) => assert!((g - w).abs() < 1e-8, "{g} vs {w}"),
            (None, None) => {}
            _ => panic!("{got:?} vs {want:?}"),
        }
    }
}

fn toy_cohort(n: usize) -> Vec<EdIndividual> {
    let cohort = generate_cohort(n, &default_population_gaussian(), &WaveformParams::default(), 3).unwrap();
    let scaler = Scaler::fit(cohort.iter().map(|s| &s.values)).unwrap();
    cohort
        .iter()
        .map(|s| EdIndividual::from_series(s, scaler.apply(&s.values)).unwrap())
        .collect()
}

fn quick_config() -> EdConfig {
    EdConfig {
        fit: FitConfig {
            iterations: 40,
            restarts: 1,
            ..FitConfig::default()
        },
        seed: 5,
        ..EdConfig::default()
    }
}

#[test]
fn greedy_budget_equal_to_the_seeds_adds_nothing() {
    let cohort = toy_cohort(2);
    let norm = ed_greedy(&cohort, SEED_PEAKS, &quick_config()).unwrap();
    assert_eq!(norm, NormalizedSchedule::seeds_only());
    assert!(ed_greedy(&cohort, 1, &quick_config()).is_err());
}

#[test]
fn first_greedy_step_takes_the_best_candidate() {
    let cohort = toy_cohort(2);
    let cfg = quick_config();
    let norm = ed_greedy(&cohort, SEED_PEAKS + 1, &cfg).unwrap();
    assert_eq!(norm.points.len(), 1);

    let seeds = NormalizedSchedule::seeds_only();
    let posts: Vec<PosteriorSeries> = cohort
        .iter()
        .enumerate()
        .map(|(i, ind)| refit_member(ind, i, &seeds, 0, &cfg).unwrap())
        .collect();
    let mut best: Option<(f64, CyclePoint)> = None;
    for k in 1..=140 {
        let c = CyclePoint { cycle: k / 70, phase: (k % 70) as f64 / 70.0 };
        let mut total = None;
        for (ind, post) in cohort.iter().zip(&posts) {
            let day = c.day(ind.cycle_length);
            if !(1..=70).contains(&day) {
                continue;
            }
            let i = post.position(day as usize).unwrap();
            let s: f64 = HormoneId::ALL
                .iter()
                .map(|&h| {
                    let y = ind.truth[(h.index(), day as usize - 1)];
                    expected_distance(y, post.mean[(h.index(), i)], post.variance(h, i).sqrt())
                })
                .sum();
            *total.get_or_insert(0.0) += s;
        }
        if let Some(t) = total {
            if best.is_none_or(|(b, _)| t > b) {
                best = Some((t, c));
            }
        }
    }
    let (_, want) = best.unwrap();
    assert!((norm.points[0].position() - want.position()).abs() < 1e-12);
}

#[test]
fn greedy_budget_ten_materializes_to_ten_unique_days() {
    let cohort = toy_cohort(3);
    let cfg = quick_config();
    let norm = ed_greedy(&cohort, 10, &cfg).unwrap();
    assert_eq!(norm.budget(), 10);
    let positions: Vec<f64> = norm.points.iter().map(|p| p.position()).collect();
    assert!(positions.windows(2).all(|w| w[0] < w[1]));
    for ind in &cohort {
        let s = materialize_days(&norm, ind.cycle_length, ind.seeds, 1..=OBSERVATION_WINDOW).unwrap();
        assert_eq!(s.budget(), 10);
        assert!(s.days().windows(2).all(|w| w[0] < w[1]));
    }
    assert_eq!(ed_greedy(&cohort, 10, &cfg).unwrap(), norm);
}

#[test]
fn random_schedule_edges() {
    let mut rng = rng_from(3);
    let two = random_schedule(2, 1..=70, [14, 43], &mut rng).unwrap();
    assert_eq!(two.days(), &[14, 43]);
    assert_eq!(two.origin(), ScheduleOrigin::SeedPeaks);
    let all = random_schedule(70, 1..=70, [14, 43], &mut rng).unwrap();
    assert_eq!(all.days(), (1..=70).collect::<Vec<_>>().as_slice());
    assert!(random_schedule(71, 1..=70, [14, 43], &mut rng).is_err());
    assert!(random_schedule(1, 1..=70, [14, 43], &mut rng).is_err());
    assert!(random_schedule(5, 1..=70, [14, 14], &mut rng).is_err());
}

#[test]
fn random_schedules_are_uniform_over_non_peak_days() {
    let mut rng = rng_from(4);
    let n = 10_000;
    let peaks = [14, 43];
    let mut counts = [0usize; 71];
    for _ in 0..n {
        for &d in random_schedule(10, 1..=70, peaks, &mut rng).unwrap().days() {
            counts[d] += 1;
        }
    }
    let p = 8.0 / 68.0;
    let se = (p * (1.0 - p) / n as f64).sqrt();
    for d in 1..=70 {
        if peaks.contains(&d) {
            assert_eq!(counts[d], n);
        } else {
            let f = counts[d] as f64 / n as f64;
            assert!((f - p).abs() <= 3.0 * se, "day {d}: {f}");
        }
    }
}

#[test]
fn materialization_arithmetic_and_collisions() {
    assert_eq!(CyclePoint { cycle: 0, phase: 0.5 }.day(30), 15);
    assert_eq!(CyclePoint { cycle: 1, phase: 0.5 }.day(30), 45);
    let norm = NormalizedSchedule {
        points: vec![
            CyclePoint { cycle: 0, phase: 0.5 },
            CyclePoint { cycle: 0, phase: 0.51 },
            CyclePoint { cycle: 0, phase: 0.52 },
        ],
        lh_peak_seeds: 2,
    };
    // All three map to day 15 or 16 for L = 30; day 15 is also a seed.
    let s = materialize_days(&norm, 30, [15, 40], 1..=70).unwrap();
    assert_eq!(s.days(), &[14, 15, 16, 17, 40]);
}

#[test]
fn cycle_length_changes_days_but_not_the_count() {
    let wave = WaveformParams::default();
    let a = generate_series("a", &CycleCharacteristics::new(15.0, 29.0).unwrap(), &wave, &mut rng_from(1)).unwrap();
    let b = generate_series("b", &CycleCharacteristics::new(15.0, 35.0).unwrap(), &wave, &mut rng_from(1)).unwrap();
    let grid = candidate_grid();
    let norm = NormalizedSchedule {
        points: [10, 30, 55, 80, 100, 120].iter().map(|&k| grid[k]).collect(),
        lh_peak_seeds: 2,
    };
    let sa = materialize(&norm, &a).unwrap();
    let sb = materialize(&norm, &b).unwrap();
    assert_ne!(sa.days(), sb.days());
    assert_eq!(sa.budget(), 8);
    assert_eq!(sb.budget(), 8);
}

#[test]
fn schedule_file_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let grid = candidate_grid();
    let file = ScheduleFile {
        budget: 4,
        origin: ScheduleOrigin::Ed,
        seed: 3,
        template: Some(NormalizedSchedule { points: vec![grid[3], grid[77]], lh_peak_seeds: 2 }),
        individuals: vec![IndividualSchedule { individual_id: "x".into(), days: vec![4, 14, 43, 60] }],
    };
    let p = dir.path().join("s.json");
    write_schedule_file(&p, &file).unwrap();
    let back = read_schedule_file(&p).unwrap();
    assert_eq!(back, file);
    assert_eq!(back.days_for("x"), Some(&[4, 14, 43, 60][..]));
    assert_eq!(back.days_for("y"), None);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(128))]

    #[test]
    fn closed_form_is_nonnegative(y in -50.0f64..50.0, mu in -50.0f64..50.0, s in 0.0f64..20.0) {
        let v = expected_distance(y, mu, s);
        prop_assert!(v >= 0.0 && v.is_finite());
        prop_assert!(v >= (y - mu).abs() - 1e-9);
    }

    #[test]
    fn materialized_schedules_keep_their_invariants(
        seed in any::<u64>(),
        extra in 0usize..=40,
        len in 21usize..=35,
    ) {
        let mut rng = rng_from(seed);
        let mut grid = candidate_grid();
        grid.shuffle(&mut rng);
        let mut points = grid[..extra].to_vec();
        points.sort_by(|a, b| a.position().total_cmp(&b.position()));
        let norm = NormalizedSchedule { points, lh_peak_seeds: 2 };
        let s1 = rng.random_range(1..=35);
        let s2 = s1 + len;
        let s = materialize_days(&norm, len, [s1, s2], 1..=70).unwrap();
        prop_assert_eq!(s.budget(), extra + 2);
        prop_assert!(s.days().windows(2).all(|w| w[0] < w[1]));
        prop_assert!(s.days().contains(&s1) && s.days().contains(&s2));
        prop_assert!(s.days().iter().all(|d| (1..=70).contains(d)));
    }

    #[test]
    fn random_schedules_keep_their_invariants(seed in any::<u64>(), budget in 2usize..=70) {
        let mut rng = rng_from(seed);
        let p1 = rng.random_range(1..=35);
        let p2 = rng.random_range(36..=70);
        let s = random_schedule(budget, 1..=70, [p1, p2], &mut rng).unwrap();
        prop_assert_eq!(s.budget(), budget);
        prop_assert!(s.days().windows(2).all(|w| w[0] < w[1]));
        prop_assert!(s.days().contains(&p1) && s.days().contains(&p2));
    }
}
