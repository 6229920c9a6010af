use lmmci::data::{
    read_csv, read_csv_from, simulate, simulate_dataset, write_csv, write_csv_to, DataError, LongitudinalDataset,
    Record, SimulationDesignSpec,
};
use lmmci::formula::parse_formula;
use lmmci::numerics::{cholesky, Matrix, RandomStream};
use proptest::prelude::*;

fn same_content(a: &LongitudinalDataset, b: &LongitudinalDataset) -> bool {
    a.formula == b.formula
        && a.fixed_names == b.fixed_names
        && a.random_names == b.random_names
        && a.clusters.len() == b.clusters.len()
        && a.clusters.iter().zip(&b.clusters).all(|(x, y)| {
            x.id == y.id && x.y == y.y && x.x == y.x && x.z == y.z && x.covariates == y.covariates
        })
}

#[test]
fn medication_shaped_file() {
    // 64 subjects with unbalanced follow-up, 1242 rows in total.
    let mut csv = String::from("obs,id,treat,time,pos\n");
    let mut obs = 0;
    for id in 1..=64 {
        let visits = if id <= 26 { 20 } else { 19 };
        for v in 0..visits {
            obs += 1;
            let treat = u8::from(id > 32);
            csv.push_str(&format!("{obs},{id},{treat},{},{}\n", v as f64 / 3.0, 150.0 + id as f64 - v as f64));
        }
    }
    assert_eq!(obs, 1242);
    let f = parse_formula("pos ~ treat*time + (time|id)").unwrap();
    let d = read_csv_from(csv.as_bytes(), &f).unwrap();
    assert_eq!((d.n(), d.p(), d.q(), d.total_rows()), (64, 4, 2, 1242));
}

#[test]
fn missing_values_are_dropped() {
    let f = parse_formula("y ~ x + (1|g)").unwrap();
    let csv = "g,x,y\na,1,1\na,2,\na,3,3\nb,1,NA\nb,2,5\nb,3,6\nc,1,7\nc,2,8\nc,3,9\nc,4,10\n";
    let d = read_csv_from(csv.as_bytes(), &f).unwrap();
    assert_eq!(d.total_rows(), 8);
    assert_eq!(d.dropped_rows, 2);
}

#[test]
fn ingestion_errors() {
    let f = parse_formula("y ~ x + (1|g)").unwrap();
    assert!(matches!(read_csv_from("g,y\na,1\n".as_bytes(), &f), Err(DataError::MissingColumn(c)) if c == "x"));
    assert!(matches!(read_csv_from("g,x,y\na,1,\nb,2,\n".as_bytes(), &f), Err(DataError::NoUsableRows { .. })));
    assert!(matches!(read_csv_from("g,x,y\na,1,2\na,1,3\n".as_bytes(), &f), Err(DataError::TooFewClusters(1))));
    assert!(matches!(read_csv_from("g,x,y\na,1,2\nb,1,NA\nc,1,1\n".as_bytes(), &f), Err(DataError::EmptyCluster(_))));
}

#[test]
fn simulate_write_read_is_bit_exact() {
    let design = SimulationDesignSpec::medsim().resolve().unwrap();
    let d = simulate_dataset(&design, &mut RandomStream::new(5, 0)).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("medsim.csv");
    write_csv(&d, &path).unwrap();
    let text = std::fs::read_to_string(&path).unwrap();
    assert_eq!(text.lines().count(), 421);
    let back = read_csv(&path, &d.formula).unwrap();
    assert!(same_content(&d, &back));
}

#[test]
fn two_cluster_toy_line_count() {
    let f = parse_formula("y ~ x + (1|g)").unwrap();
    let d = read_csv_from("g,x,y\na,1,2\nb,2,3\nb,3,5\n".as_bytes(), &f).unwrap();
    let mut buf = Vec::new();
    write_csv_to(&d, &mut buf).unwrap();
    assert_eq!(String::from_utf8(buf).unwrap().lines().count(), 1 + 3);
}

/// Monte-Carlo moments of the generator. Each per-cluster OLS intercept is
/// `b₀ + noise` with noise variance `σ² [(ZᵀZ)⁻¹]₁₁`, so the sample variance
/// targets `Σ₁₁ + σ² [(ZᵀZ)⁻¹]₁₁`.
#[test]
fn simulated_cluster_moments() {
    let mut spec = SimulationDesignSpec::medsim();
    spec.n = 500;
    spec.treat_fraction = Some(0.0);
    let design = spec.resolve().unwrap();
    let d = simulate_dataset(&design, &mut RandomStream::new(2024, 0)).unwrap();
    let z = &d.clusters[0].z;
    let ztz_inv = cholesky(&z.gram()).unwrap().inverse().unwrap();
    let coefs: Vec<Vec<f64>> = d
        .clusters
        .iter()
        .map(|c| {
            let mean = c.x.mul_vec(&design.truth.gamma).unwrap();
            let r: Vec<f64> = c.y.iter().zip(&mean).map(|(a, b)| a - b).collect();
            ztz_inv.mul_vec(&c.z.t_mul_vec(&r).unwrap()).unwrap()
        })
        .collect();
    let n = coefs.len() as f64;
    let s2 = design.truth.sigma_e2();
    for i in 0..2 {
        let m = coefs.iter().map(|b| b[i]).sum::<f64>() / n;
        let var = coefs.iter().map(|b| (b[i] - m).powi(2)).sum::<f64>() / (n - 1.0);
        let target = design.truth.sigma[(i, i)] + s2 * ztz_inv[(i, i)];
        assert!((var - target).abs() < 0.15 * target, "component {i}: {var} vs {target}");
        assert!(m.abs() < 4.0 * (target / n).sqrt(), "component {i} mean {m}");
        if i == 0 {
            assert!((var - s2 * ztz_inv[(0, 0)] - 2111.54).abs() < 0.15 * 2111.54);
        }
    }
}

#[test]
fn label_swaps_keep_responses() {
    let mut spec = SimulationDesignSpec::medsim();
    let clean = simulate(&spec.resolve().unwrap(), &mut RandomStream::new(8, 0)).unwrap();
    spec.label_swaps = 2;
    let dirty = simulate(&spec.resolve().unwrap(), &mut RandomStream::new(8, 0)).unwrap();
    assert_eq!(dirty.swapped_clusters.len(), 2);
    for &i in &dirty.swapped_clusters {
        assert_eq!(clean.dataset.clusters[i].y, dirty.dataset.clusters[i].y);
        assert_eq!(clean.dataset.clusters[i].covariates[(0, 0)], 1.0);
        assert_eq!(dirty.dataset.clusters[i].covariates[(0, 0)], 0.0);
    }
}

fn records() -> impl Strategy<Value = Vec<Record>> {
    let label = prop::sample::select(vec!["1", "01", "a b", "x,y", "\"q\"", "Z"]);
    let value = prop_oneof![-1e6..1e6_f64, Just(0.0), Just(-0.0), Just(1e-300), Just(0.1 + 0.2), Just(f64::MAX)];
    prop::collection::vec((label, value.clone(), value), 2..40).prop_map(|rows| {
        rows.into_iter()
            .enumerate()
            .map(|(i, (g, x, y))| Record { cluster: g.to_string(), response: y, covariates: vec![x], row_id: i })
            .collect()
    })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(1000))]

    #[test]
    fn csv_round_trip(recs in records()) {
        let f = parse_formula("y ~ x + (x | g)").unwrap();
        let labels: std::collections::HashSet<&str> = recs.iter().map(|r| r.cluster.as_str()).collect();
        prop_assume!(labels.len() >= 2);
        let d = LongitudinalDataset::from_records(f.clone(), recs, 0).unwrap();
        let mut buf = Vec::new();
        write_csv_to(&d, &mut buf).unwrap();
        let back = read_csv_from(buf.as_slice(), &f).unwrap();
        prop_assert!(same_content(&d, &back));
        prop_assert_eq!(back.dropped_rows, 0);
        prop_assert_eq!(back.total_rows(), d.total_rows());
    }

    #[test]
    fn design_matrices_follow_formula(x in -50.0..50.0_f64, t in -50.0..50.0_f64) {
        let f = parse_formula("y ~ x * t + (t | g)").unwrap();
        let rec = |g: &str| Record { cluster: g.into(), response: 1.0, covariates: vec![x, t], row_id: 0 };
        let d = LongitudinalDataset::from_records(f, vec![rec("a"), rec("b")], 0).unwrap();
        let c = &d.clusters[0];
        prop_assert_eq!(c.x.row(0), &[1.0, x, t, x * t][..]);
        prop_assert_eq!(c.z.row(0), &[1.0, t][..]);
        prop_assert_eq!(Matrix::from_rows(&[vec![x, t]]).unwrap(), c.covariates.clone());
    }
}
