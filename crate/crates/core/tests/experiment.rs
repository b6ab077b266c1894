use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use msdial::data::{load_feature_table_with_dim, synth_labeled_domains, DomainDataset, SyntheticShiftSpec};
use msdial::experiment::{
    export_features, lambda_sweep, pca_project, pca_top2, replication_seed, run_replication, train_replication,
    ExperimentConfig, ExperimentData, Method,
};
use msdial::{Error, Tensor};

fn small_spec() -> SyntheticShiftSpec {
    let mut spec = SyntheticShiftSpec::shift_benchmark(4);
    spec.train_per_domain = 48;
    spec.test_per_domain = 40;
    spec
}

fn small_cfg(method: Method) -> ExperimentConfig {
    let mut cfg = ExperimentConfig::synthetic(small_spec());
    cfg.method = method;
    cfg.hidden = Some(vec![6, 4]);
    cfg.epochs = 2;
    cfg.batch_size = 16;
    cfg.replications = 2;
    cfg.fc_dropout = 0.0;
    cfg
}

fn with_target_train_labels(domains: &[(DomainDataset, DomainDataset)], target: usize, label: usize) -> Vec<(DomainDataset, DomainDataset)> {
    let mut out = domains.to_vec();
    let (train, test) = &out[target];
    let poisoned = DomainDataset::new(train.domain_id, train.split, train.samples().clone(), Some(vec![label; train.len()])).unwrap();
    out[target] = (poisoned, test.clone());
    out
}

#[test]
fn target_train_labels_never_reach_unsupervised_methods() {
    let spec = small_spec();
    let domains = synth_labeled_domains(&spec).unwrap();
    let clean = ExperimentData::from_domains(domains.clone(), spec.target).unwrap();
    let poisoned = ExperimentData::from_domains(with_target_train_labels(&domains, spec.target, 999), spec.target).unwrap();
    assert_eq!(clean.target_train, poisoned.target_train, "the unlabeled split carries nothing");
    let seed = replication_seed(7, 0);
    for method in [Method::Src, Method::Msdial] {
        let cfg = small_cfg(method);
        let a = run_replication(&cfg, &clean, 0, seed).unwrap();
        let b = run_replication(&cfg, &poisoned, 0, seed).unwrap();
        assert_eq!(a.accuracy.to_bits(), b.accuracy.to_bits(), "{method}");
        assert_eq!(a.loss_history, b.loss_history, "{method}");
    }
    // the supervised upper bound does read them
    let err = run_replication(&small_cfg(Method::Tar), &poisoned, 0, seed);
    assert!(err.is_err());
}

#[test]
fn exported_features_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = small_cfg(Method::Msdial);
    let (mut trained, data) = train_replication(&cfg, 0).unwrap();
    let boundary = trained.model.feature_boundary();
    let path = dir.path().join("features.tsv");
    let truth = &data.target_test_truth.labels;
    export_features(&mut trained.model, data.target_test.samples(), Some(truth), trained.eval_domain, boundary, &path).unwrap();
    let table = load_feature_table_with_dim(&path, None).unwrap();
    assert_eq!(table.samples().shape(), &[data.target_test.len(), 4]);
    assert_eq!(table.labels().unwrap(), truth.as_slice());
    // classifier inputs follow a ReLU
    assert!(table.samples().data().iter().all(|&v| v >= 0.0));

    let empty = Tensor::zeros(&[0, 4]);
    export_features(&mut trained.model, &empty, None, trained.eval_domain, boundary, &path).unwrap();
    let text = std::fs::read_to_string(&path).unwrap();
    assert_eq!(text.lines().count(), 1, "header only");
    assert_eq!(load_feature_table_with_dim(&path, None).unwrap().samples().shape(), &[0, 4]);

    let bad = trained.model.nodes().len() + 1;
    assert!(export_features(&mut trained.model, &empty, None, trained.eval_domain, bad, &path).is_err());
}

#[test]
fn default_feature_mlp_exports_its_hundred_wide_layer() {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = small_cfg(Method::Src);
    cfg.hidden = None;
    cfg.epochs = 1;
    let (mut trained, data) = train_replication(&cfg, 0).unwrap();
    let path = dir.path().join("f.tsv");
    let boundary = trained.model.feature_boundary();
    export_features(&mut trained.model, data.target_test.samples(), None, trained.eval_domain, boundary, &path).unwrap();
    assert_eq!(load_feature_table_with_dim(&path, None).unwrap().samples().shape()[1], 100);
}

fn pairwise(points: &[[f64; 2]]) -> Vec<f64> {
    let mut d = Vec::new();
    for (i, a) in points.iter().enumerate() {
        for b in &points[i + 1..] {
            d.push(((a[0] - b[0]).powi(2) + (a[1] - b[1]).powi(2)).sqrt());
        }
    }
    d
}

#[test]
fn pca_of_planar_data_is_a_rigid_motion() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let pts: Vec<[f64; 2]> = (0..30).map(|_| [rng.random_range(-4.0..4.0), rng.random_range(-1.0..1.0)]).collect();
    let t = Tensor::new(vec![30, 2], pts.iter().flatten().copied().collect()).unwrap();
    let proj = pca_top2(&t).unwrap();
    for (a, b) in pairwise(&pts).iter().zip(pairwise(&proj.coords)) {
        assert!((a - b).abs() < 1e-9);
    }
    assert!(proj.eigenvalues[0] >= proj.eigenvalues[1]);
}

#[test]
fn pca_rank_one_and_rank_zero() {
    let line: Vec<f64> = (0..10).flat_map(|i| { let s = i as f64 - 3.0; [2.0 * s, -s, 0.5 * s] }).collect();
    let proj = pca_top2(&Tensor::new(vec![10, 3], line).unwrap()).unwrap();
    assert!(proj.coords.iter().all(|c| c[1].abs() < 1e-9));
    assert!(proj.eigenvalues[1].abs() < 1e-9);

    let flat = Tensor::full(&[5, 3], 2.5);
    assert!(matches!(pca_top2(&flat), Err(Error::InvalidArgument { .. })));
}

/// Top eigenvalue of a symmetric matrix by power iteration, then deflation.
fn top_two_eigenvalues(cov: &[Vec<f64>]) -> [f64; 2] {
    let d = cov.len();
    let mut m = cov.to_vec();
    let mut out = [0.0; 2];
    for slot in &mut out {
        let mut v = vec![1.0 / (d as f64).sqrt(); d];
        let mut lambda = 0.0;
        for _ in 0..5000 {
            let w: Vec<f64> = (0..d).map(|i| (0..d).map(|j| m[i][j] * v[j]).sum()).collect();
            let norm = w.iter().map(|x| x * x).sum::<f64>().sqrt();
            lambda = norm;
            v = w.iter().map(|x| x / norm).collect();
        }
        *slot = lambda;
        for i in 0..d {
            for j in 0..d {
                m[i][j] -= lambda * v[i] * v[j];
            }
        }
    }
    out
}

#[test]
fn pca_wide_data_matches_power_iteration() {
    let (n, d) = (20, 100);
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    // two dominant directions plus isotropic noise
    let data: Vec<f64> = (0..n)
        .flat_map(|_| {
            let (a, b) = (rng.random_range(-5.0..5.0), rng.random_range(-2.0..2.0));
            (0..d).map(|j| a * ((j % 7) as f64 - 3.0) / 10.0 + b * ((j % 3) as f64 - 1.0) / 5.0 + rng.random_range(-0.1..0.1)).collect::<Vec<_>>()
        })
        .collect();
    let means: Vec<f64> = (0..d).map(|j| (0..n).map(|i| data[i * d + j]).sum::<f64>() / n as f64).collect();
    let cov: Vec<Vec<f64>> = (0..d)
        .map(|a| {
            (0..d)
                .map(|b| (0..n).map(|i| (data[i * d + a] - means[a]) * (data[i * d + b] - means[b])).sum::<f64>() / (n - 1) as f64)
                .collect()
        })
        .collect();
    let oracle = top_two_eigenvalues(&cov);
    let proj = pca_top2(&Tensor::new(vec![n, d], data).unwrap()).unwrap();
    for k in 0..2 {
        assert!((proj.eigenvalues[k] - oracle[k]).abs() < 1e-8 * oracle[0], "{k}: {} vs {}", proj.eigenvalues[k], oracle[k]);
        let captured = proj.coords.iter().map(|c| c[k] * c[k]).sum::<f64>() / (n - 1) as f64;
        assert!((captured - oracle[k]).abs() < 1e-8 * oracle[0]);
    }
}

#[test]
fn projection_csv_has_one_row_per_sample() {
    let dir = tempfile::tempdir().unwrap();
    let table = dir.path().join("t.tsv");
    let t = Tensor::new(vec![4, 3], vec![1.0, 0.0, 2.0, 3.0, 1.0, 0.0, -1.0, 2.0, 2.0, 0.5, 0.5, 0.5]).unwrap();
    msdial::data::write_feature_table(&table, &t, Some(&[1, 0, 1, 2])).unwrap();
    let out = dir.path().join("p.csv");
    pca_project(&table, &out).unwrap();
    let text = std::fs::read_to_string(&out).unwrap();
    let lines: Vec<&str> = text.lines().collect();
    assert_eq!(lines[0], "x,y,label");
    assert_eq!(lines.len(), 5);
    assert!(lines[4].ends_with(",2"));
}

#[test]
fn lambda_sweep_is_ordered_and_accepts_zero() {
    let mut cfg = small_cfg(Method::Msdial);
    cfg.replications = 1;
    let records = lambda_sweep(&cfg, &[0.1, 0.0, 0.01]).unwrap();
    let lambdas: Vec<f64> = records.iter().map(|r| r.lambda).collect();
    assert_eq!(lambdas, vec![0.0, 0.01, 0.1]);
    assert!(records.iter().all(|r| r.failures.is_empty()));
    assert!(lambda_sweep(&cfg, &[]).is_err());
}
