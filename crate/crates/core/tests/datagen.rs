use hormone_recon::datagen::*;
use hormone_recon::rng::rng_from;
use hormone_recon::{HormoneId, SERIES_DAYS};
use proptest::prelude::*;

fn bivariate_density(x: [f64; 2], mean: [f64; 2], cov: [[f64; 2]; 2]) -> f64 {
    let det = cov[0][0] * cov[1][1] - cov[0][1] * cov[1][0];
    let (dx, dy) = (x[0] - mean[0], x[1] - mean[1]);
    let q = (cov[1][1] * dx * dx - 2.0 * cov[0][1] * dx * dy + cov[0][0] * dy * dy) / det;
    (-0.5 * q).exp() / (2.0 * std::f64::consts::PI * det.sqrt())
}

/// Mean of the population Gaussian restricted to the accepted region, by
/// midpoint quadrature.
fn truncated_mean_oracle(pop: &PopulationGaussian) -> [f64; 2] {
    let h = 0.01;
    let (mut z, mut m0, mut m1) = (0.0, 0.0, 0.0);
    let mut len = MIN_CYCLE_LENGTH + h / 2.0;
    while len < MAX_CYCLE_LENGTH {
        let mut ov = OVULATION_MARGIN + h / 2.0;
        while ov < len - OVULATION_MARGIN {
            let p = bivariate_density([ov, len], pop.mean, pop.covariance);
            z += p;
            m0 += p * ov;
            m1 += p * len;
            ov += h;
        }
        len += h;
    }
    [m0 / z, m1 / z]
}

#[test]
fn raw_draws_converge_to_the_population_gaussian() {
    let pop = default_population_gaussian();
    let mut rng = rng_from(2024);
    let n = 50_000;
    let draws: Vec<[f64; 2]> = (0..n).map(|_| pop.draw(&mut rng).unwrap()).collect();
    let mean = [0, 1].map(|k| draws.iter().map(|d| d[k]).sum::<f64>() / n as f64);
    for k in 0..2 {
        let se = (pop.covariance[k][k] / n as f64).sqrt();
        assert!((mean[k] - pop.mean[k]).abs() < 0.15);
        assert!((mean[k] - pop.mean[k]).abs() < 3.0 * se, "component {k}: {}", mean[k]);
    }
    for (a, b) in [(0, 0), (0, 1), (1, 1)] {
        let c = draws
            .iter()
            .map(|d| (d[a] - mean[a]) * (d[b] - mean[b]))
            .sum::<f64>()
            / (n - 1) as f64;
        // Standard error of a sample covariance: sqrt((s_aa s_bb + s_ab^2) / n).
        let s = &pop.covariance;
        let se = ((s[a][a] * s[b][b] + s[a][b] * s[a][b]) / n as f64).sqrt();
        assert!((c - s[a][b]).abs() < 3.0 * se, "cov[{a}][{b}] = {c}");
    }
}

#[test]
fn accepted_characteristics_follow_the_truncated_gaussian() {
    let pop = default_population_gaussian();
    let oracle = truncated_mean_oracle(&pop);
    let mut rng = rng_from(77);
    let n = 50_000;
    let draws: Vec<CycleCharacteristics> =
        (0..n).map(|_| sample_characteristics(&pop, &mut rng).unwrap()).collect();
    assert!(draws.iter().all(|c| c.is_valid()));
    let m = [
        draws.iter().map(|c| c.ovulation_day).sum::<f64>() / n as f64,
        draws.iter().map(|c| c.cycle_length).sum::<f64>() / n as f64,
    ];
    for k in 0..2 {
        // The truncated variance is below the untruncated one, so this is a
        // conservative 3-standard-error band.
        let se = (pop.covariance[k][k] / n as f64).sqrt();
        assert!((m[k] - oracle[k]).abs() < 3.0 * se, "{k}: {} vs {}", m[k], oracle[k]);
    }
}

#[test]
fn cohort_shapes_and_prefix_stability() {
    let pop = default_population_gaussian();
    let wave = WaveformParams::default();
    let cohort = generate_cohort(60, &pop, &wave, 5).unwrap();
    assert_eq!(cohort.len(), 60);
    for s in &cohort {
        assert_eq!(s.values.shape(), (5, SERIES_DAYS));
        assert!(s.values.iter().all(|v| v.is_finite()));
        assert!(s.ovulation_days.len() >= 3);
    }
    let one = generate_cohort(1, &pop, &wave, 5).unwrap();
    assert_eq!(one[0], cohort[0]);
    let again = generate_cohort(60, &pop, &wave, 5).unwrap();
    assert_eq!(again, cohort);
}

#[test]
fn dataset_files_round_trip() {
    let pop = default_population_gaussian();
    let wave = WaveformParams::default();
    let cohort = generate_cohort(4, &pop, &wave, 9).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let csv = dir.path().join("cohort.csv");
    write_dataset_csv(&csv, &cohort).unwrap();
    write_metadata(&metadata_path(&csv), &metadata_for(9, &pop, &wave, &cohort)).unwrap();
    let text = std::fs::read_to_string(&csv).unwrap();
    assert!(text.starts_with("individual_id,day,E,P,Ih,FSH,LH\n"));
    assert_eq!(text.lines().count(), 1 + 4 * SERIES_DAYS);
    let (back, meta) = load_dataset(&csv).unwrap();
    assert_eq!(back, cohort);
    assert_eq!(meta.seed, 9);
}

fn lh_argmax_per_cycle(s: &IndividualSeries) -> Vec<usize> {
    let len = s.cycle_length_days;
    (0..SERIES_DAYS / len)
        .map(|c| {
            let days = c * len + 1..=(c + 1) * len;
            days.max_by(|&a, &b| {
                s.value(HormoneId::Lh, a)
                    .partial_cmp(&s.value(HormoneId::Lh, b))
                    .unwrap()
            })
            .unwrap()
        })
        .collect()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn every_series_is_finite_and_peaks_on_ovulation(seed in any::<u64>()) {
        let pop = default_population_gaussian();
        let mut rng = rng_from(seed);
        let chars = sample_characteristics(&pop, &mut rng).unwrap();
        let s = generate_series("p", &chars, &WaveformParams::default(), &mut rng).unwrap();
        prop_assert_eq!(s.values.shape(), (5, SERIES_DAYS));
        prop_assert!(s.values.iter().all(|v| v.is_finite()));
        let peaks = lh_argmax_per_cycle(&s);
        prop_assert!(peaks.len() >= 3);
        prop_assert_eq!(&peaks[..], &s.ovulation_days[..peaks.len()]);
        let in_window = lh_peak_days(&s, 1..=105).unwrap();
        prop_assert!(in_window.windows(2).all(|w| w[0] < w[1]));
        prop_assert!(s.seed_peaks().is_ok());
    }

    #[test]
    fn zero_jitter_ignores_the_random_source(ov in 5.0f64..20.0, extra in 8.0f64..14.0, a in any::<u64>(), b in any::<u64>()) {
        let chars = CycleCharacteristics::new(ov, (ov + extra).clamp(21.0, 35.0)).unwrap();
        let wave = WaveformParams { jitter: 0.0, ..WaveformParams::default() };
        let x = generate_series("p", &chars, &wave, &mut rng_from(a)).unwrap();
        let y = generate_series("p", &chars, &wave, &mut rng_from(b)).unwrap();
        prop_assert_eq!(x.values, y.values);
    }
}
