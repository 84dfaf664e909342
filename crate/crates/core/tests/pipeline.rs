use mcmcdegen::harness::{dataset_seed, orchestrate, ExperimentPlan, GridCell};
use mcmcdegen::io::{read_dataset, read_trace};
use mcmcdegen::kernels::{run_chain, InitPolicy, KernelOptions, TransformKind, VariantId};
use mcmcdegen::metrics::{chain_rprime, classification_transforms};
use mcmcdegen::model::{default_theta0, sample_dataset, ModelConfig, PriorSpec};
use mcmcdegen::rng::path_id;

#[test]
fn single_replication_matches_direct_calls() {
    let dir = tempfile::tempdir().unwrap();
    let cell = GridCell { variant: VariantId::BetaMa, c: 4, p: 2, n: vec![70], m: 25, replications: 1 };
    let plan = ExperimentPlan::custom(vec![cell], 31, dir.path().into());
    let manifest = orchestrate(&plan, 1).unwrap();
    assert!(manifest.failures().is_empty());

    let cfg = ModelConfig::new(4, 2, PriorSpec::default()).unwrap();
    let data = sample_dataset(&cfg, &default_theta0(4, 2).unwrap(), 70, dataset_seed(31, 4, 2, 70, 0)).unwrap();
    let stored = read_dataset(&dir.path().join("custom/data_c4_p2_n70_r0.csv")).unwrap();
    assert_eq!(stored.y, data.y);
    assert_eq!(stored.x, data.x);

    let mut transforms = vec![TransformKind::Theta];
    transforms.extend(classification_transforms(4, 2));
    let direct = run_chain(
        VariantId::BetaMa,
        &cfg,
        &data,
        25,
        &InitPolicy::Prior,
        &transforms,
        KernelOptions::default(),
        path_id(&[31, 0, 70, 0]),
        0,
    )
    .unwrap();
    let trace = read_trace(&dir.path().join("custom/c4_p2/beta-ma_n70_r0.csv")).unwrap();
    assert_eq!(trace.params, direct.params);
    for kind in &transforms {
        assert_eq!(trace.series(*kind), direct.series(*kind), "{}", kind.as_str());
    }
}

#[test]
fn stored_trace_feeds_the_estimators() {
    let dir = tempfile::tempdir().unwrap();
    let cell = GridCell { variant: VariantId::Null, c: 3, p: 1, n: vec![200], m: 60, replications: 1 };
    orchestrate(&ExperimentPlan::custom(vec![cell], 2, dir.path().into()), 1).unwrap();
    let trace = read_trace(&dir.path().join("custom/c3_p1/null_n200_r0.csv")).unwrap();
    let (loc, raw) = chain_rprime(trace.series(TransformKind::Theta).unwrap(), 200);
    assert!((0.0..=1.0).contains(&loc) && raw > 0.0);
    assert!(loc >= raw.min(1.0) - 1e-12);
}
