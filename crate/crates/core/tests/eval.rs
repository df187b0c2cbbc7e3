mod common;

use common::*;
use hormone_recon::datagen::{default_population_gaussian, generate_cohort, WaveformParams};
use hormone_recon::eval::*;
use hormone_recon::mgp::BlockStructure;
use hormone_recon::rng::rng_from;
use hormone_recon::{HormoneId, Error};
use proptest::prelude::*;
use std::collections::BTreeSet;

fn ids(n: usize) -> Vec<String> {
    (0..n).map(|i| format!("ind{i:03}")).collect()
}

#[test]
fn scaler_standardizes_train_data_only() {
    let cohort = generate_cohort(60, &default_population_gaussian(), &WaveformParams::default(), 2).unwrap();
    let split = split_cohort(&cohort.iter().map(|s| s.id.clone()).collect::<Vec<_>>(), 1).unwrap();
    let pick = |group: &[String]| -> Vec<_> {
        cohort.iter().filter(|s| group.contains(&s.id)).map(|s| s.values.clone()).collect()
    };
    let (train, test) = (pick(&split.train), pick(&split.test));
    let scaler = Scaler::fit(&train).unwrap();
    let scaled: Vec<_> = train.iter().map(|m| scaler.apply(m)).collect();
    for h in 0..5 {
        let vals: Vec<f64> = scaled.iter().flat_map(|m| m.row(h).iter().copied().collect::<Vec<_>>()).collect();
        let n = vals.len() as f64;
        let mean = vals.iter().sum::<f64>() / n;
        let var = vals.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
        assert!(mean.abs() < 1e-10);
        assert!((var - 1.0).abs() < 1e-10);
    }
    for m in &train {
        assert!((scaler.invert(&scaler.apply(m)) - m).amax() < 1e-10);
    }
    let test_mean: Vec<f64> = (0..5)
        .map(|h| test.iter().map(|m| scaler.apply(m).row(h).mean()).sum::<f64>() / test.len() as f64)
        .collect();
    assert!(test_mean.iter().any(|m| m.abs() > 1e-3), "{test_mean:?}");
}

#[test]
fn split_sizes_and_determinism() {
    let all = ids(60);
    let s = split_cohort(&all, 9).unwrap();
    assert_eq!((s.train.len(), s.val.len(), s.test.len()), (40, 10, 10));
    assert_eq!(split_cohort(&all, 9).unwrap(), s);
    assert_ne!(split_cohort(&all, 10).unwrap(), s);
    let union: BTreeSet<&String> = s.train.iter().chain(&s.val).chain(&s.test).collect();
    assert_eq!(union.len(), 60);
    let small = split_cohort(&ids(12), 1).unwrap();
    assert_eq!((small.train.len(), small.val.len(), small.test.len()), (8, 2, 2));
    assert!(split_cohort(&ids(2), 1).is_err());
}

#[test]
fn mse_oracle_and_partition_identity() {
    let mut rng = rng_from(3);
    let a = random_series(&mut rng, 5, 105);
    let b = random_series(&mut rng, 5, 105);
    let hs = [HormoneId::P, HormoneId::Lh];
    let mut acc = 0.0;
    for h in hs {
        for t in 5..=40 {
            acc += (a[(h.index(), t - 1)] - b[(h.index(), t - 1)]).powi(2);
        }
    }
    assert!((mse(&a, &b, 5..=40, &hs).unwrap() - acc / 72.0).abs() < 1e-12);
    assert_eq!(mse(&a, &a, 1..=105, &HormoneId::ALL).unwrap(), 0.0);
    assert!(mse(&a, &b, 1..=106, &hs).is_err());
    assert!(mse(&a, &b, 1..=10, &[]).is_err());

    let [o, r, p] = Scope::ALL.map(|s| mse(&a, &b, s.days(), &HormoneId::ALL).unwrap());
    assert!((o - (70.0 * r + 35.0 * p) / 105.0).abs() < 1e-12);
}

#[test]
fn variants_use_the_stated_block_structures() {
    assert_eq!(Variant::IndependentGp.blocks().structure(), BlockStructure::independent());
    let bw = Variant::BMgp.blocks().structure();
    let mut groups: Vec<BTreeSet<HormoneId>> = bw.groups().iter().map(|g| g.iter().copied().collect()).collect();
    groups.sort_by_key(|g| g.len());
    use HormoneId::*;
    assert_eq!(groups, vec![BTreeSet::from([Lh, Fsh]), BTreeSet::from([E, P, Ih])]);
    assert_eq!(Variant::Mgp.blocks().structure(), BlockStructure::full());
    assert!(!Variant::Lstm.is_implemented());
}

fn synthetic_results() -> ExperimentResults {
    let mut cfg = ExperimentConfig::smoke();
    cfg.budgets = vec![10, 35];
    let cells = [(Variant::BMgp, 10, 1), (Variant::BMgp, 10, 2), (Variant::BMgpDcnn, 35, 1)]
        .iter()
        .map(|&(variant, budget, split_seed)| CellResult {
            variant,
            budget,
            split_seed,
            overall: 0.1 * split_seed as f64 + 1.0 / 3.0,
            reconstruction: 0.2,
            prediction: std::f64::consts::PI,
            per_hormone: [0.1, 0.2, 0.3, 0.4, 1e-17],
        })
        .collect();
    ExperimentResults { config: cfg, cells }
}

#[test]
fn tables_are_written_and_read_back_exactly() {
    let dir = tempfile::tempdir().unwrap();
    let results = synthetic_results();
    let paths = emit_tables(&results, dir.path()).unwrap();
    assert_eq!(paths.len(), 8);
    let names: BTreeSet<String> = paths.iter().map(|p| p.file_name().unwrap().to_string_lossy().into_owned()).collect();
    for n in [
        "table_overall.csv",
        "table_reconstruction.csv",
        "table_prediction.csv",
        "table_overall_E.csv",
        "table_overall_P.csv",
        "table_overall_Ih.csv",
        "table_overall_FSH.csv",
        "table_overall_LH.csv",
    ] {
        assert!(names.contains(n), "{n}");
    }
    let overall = ResultTable::read_csv(&dir.path().join("table_overall.csv"), Scope::Overall, None).unwrap();
    assert_eq!(overall, ResultTable::build(&results, Scope::Overall, None));
    let lh = ResultTable::read_csv(&dir.path().join("table_overall_LH.csv"), Scope::Overall, Some(HormoneId::Lh)).unwrap();
    assert_eq!(lh, ResultTable::build(&results, Scope::Overall, Some(HormoneId::Lh)));

    let text = std::fs::read_to_string(dir.path().join("table_overall.csv")).unwrap();
    let lines: Vec<&str> = text.lines().collect();
    assert_eq!(lines[0], "model,10,35");
    assert_eq!(lines[1], format!("LSTM,{NOT_IMPLEMENTED},{NOT_IMPLEMENTED}"));
    assert!(lines.iter().any(|l| l.starts_with("MGP,") && l.contains(MISSING)));

    let empty = ExperimentResults { config: ExperimentConfig::smoke(), cells: vec![] };
    assert!(emit_tables(&empty, dir.path()).is_err());
}

#[test]
fn provenance_rejects_test_individuals() {
    let mut p = Provenance::default();
    p.record("scaler", &ids(3));
    assert!(p.check(&["other".to_string()]).is_ok());
    assert!(matches!(p.check(&["ind001".to_string()]), Err(Error::Provenance(_))));
}

#[test]
fn smoke_experiment_end_to_end() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = ExperimentConfig {
        output_dir: Some(dir.path().to_path_buf()),
        ..ExperimentConfig::smoke()
    };
    let cohort = cfg.generate_cohort().unwrap();
    let results = run_experiment(&cfg, &cohort).unwrap();
    assert_eq!(results.cells.len(), 4);
    for c in &results.cells {
        assert!(c.overall.is_finite() && c.overall > 0.0);
        let combined = (70.0 * c.reconstruction + 35.0 * c.prediction) / 105.0;
        assert!((c.overall - combined).abs() <= 1e-12 * c.overall.max(1.0));
        let per_hormone = c.per_hormone.iter().sum::<f64>() / 5.0;
        assert!((c.overall - per_hormone).abs() <= 1e-12 * c.overall.max(1.0));
    }
    assert_eq!(read_results(&dir.path().join("results.json")).unwrap(), results);
    for f in ["table_overall.csv", "table_prediction.csv", "curves/curves_b_mgp_dcnn_35_1.csv", "curves/loss_10_random_1.csv"] {
        assert!(dir.path().join(f).exists(), "{f}");
    }
    let curves = std::fs::read_to_string(dir.path().join("curves/curves_b_mgp_10_1.csv")).unwrap();
    assert_eq!(curves.lines().next(), Some("individual_id,day,hormone,truth,mgp_mean,mgp_var,dcnn_pred"));
    // Two test individuals, five hormones, 105 days.
    assert_eq!(curves.lines().count(), 1 + 2 * 5 * 105);
}

proptest! {
    #[test]
    fn splits_partition_any_cohort(n in 3usize..200, seed in any::<u64>()) {
        let all = ids(n);
        let s = split_cohort(&all, seed).unwrap();
        let mut joined: Vec<String> = s.train.iter().chain(&s.val).chain(&s.test).cloned().collect();
        joined.sort();
        prop_assert_eq!(joined, all);
        prop_assert_eq!(s.val.len(), s.test.len());
        prop_assert!(!s.train.is_empty() && !s.test.is_empty());
    }
}
