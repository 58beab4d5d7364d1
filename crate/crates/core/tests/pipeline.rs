use pexcite::data_io::{generate, read_csv, write_csv, BlobsParams, DatasetKind};
use pexcite::net::{load_checkpoint, save_checkpoint, CheckpointMeta, Network, PerturbationSet};
use pexcite::optim::{pe_train, TrainConfig};
use pexcite::robust::{margin_profile, AttackConfig, Classifier};

#[test]
fn generate_train_checkpoint_and_profile() {
    let dir = tempfile::tempdir().unwrap();
    let params = BlobsParams { centers: vec![vec![1.0, 0.0], vec![-1.0, 0.0]], per_class: 20, sigma: 0.2 };
    let ds = generate(&DatasetKind::Blobs(params), 3).unwrap();
    let csv = dir.path().join("blobs.csv");
    write_csv(&ds, &csv).unwrap();
    let back = read_csv(&csv).unwrap();
    assert_eq!((&back.points, &back.labels), (&ds.points, &ds.labels));

    let (train, test) = back.split(0.25, 3).unwrap();
    assert_eq!(train.len() + test.len(), ds.len());
    let net = Network::two_layer(2, 8, 1, 3).unwrap();
    let set = PerturbationSet::uniform(2, 0.05).unwrap();
    let cfg = TrainConfig { step_size: 0.01, momentum: 0.9, max_iters: 2000, batch_size: 4, seed: 3, log_every: 500, ..Default::default() };
    let res = pe_train(&net, &train, &set, &cfg).unwrap();
    let clf = Classifier::midpoint(res.net, &train).unwrap();

    let ckpt = dir.path().join("net.json");
    let meta = CheckpointMeta { seed: 3, config_hash: "abc".into(), threshold: Some(clf.threshold) };
    save_checkpoint(&clf.net, &meta, &ckpt).unwrap();
    let (loaded, loaded_meta) = load_checkpoint(&ckpt).unwrap();
    assert_eq!(loaded_meta, meta);
    assert_eq!(loaded.params(), clf.net.params());
    let reloaded = Classifier::with_threshold(loaded, loaded_meta.threshold.unwrap()).unwrap();

    let attack = AttackConfig { eps_max: 2.0, seed: 3, ..Default::default() };
    let a = margin_profile(&clf, &test, &attack).unwrap();
    let b = margin_profile(&reloaded, &test, &attack).unwrap();
    assert_eq!(a, b);
    let correct = test.points.iter().zip(&test.labels).filter(|(x, &y)| clf.classify(x).unwrap() == y).count();
    assert!(correct * 10 >= test.len() * 9, "{correct}/{}", test.len());
    for r in &a.records {
        assert!(r.radius >= 0.0 && r.radius <= attack.eps_max);
        if r.misclassified {
            assert_eq!(r.radius, 0.0);
        }
    }
    assert!(a.sorted_radii.windows(2).all(|w| w[0] <= w[1]));
    assert!(a.median() > 0.1);
}
