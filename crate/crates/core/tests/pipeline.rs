use mriq_core::benchmark::{input_scale, label_sets, motion_pairs, noise_sets, predictions, prepare_rulers};
use mriq_core::calibration::calibrate;
use mriq_core::dataset::{build_dataset, Dataset, DatasetConfig, Split, MANIFEST_FILE};
use mriq_core::estimators::Method;
use mriq_core::metrics::evaluate;
use mriq_core::network::{
    load_checkpoint, save_checkpoint, train, AdamConfig, Checkpoint, DualTaskNet, Mode, NetConfig, TrainConfig,
};
use mriq_core::rater::SimulatedRater;
use mriq_core::ruler::{load_registry, save_registry};

fn config() -> DatasetConfig {
    DatasetConfig {
        scan_types: vec!["knee-fs".parse().unwrap(), "brain-nfs".parse().unwrap()],
        train_slices: 8,
        val_slices: 2,
        test_slices: 4,
        slices_per_subject: 2,
        size: 32,
        n_coils: 2,
        ..Default::default()
    }
}

#[test]
fn dataset_to_report_through_files() {
    let dir = tempfile::tempdir().unwrap();
    let manifest = build_dataset(&config(), dir.path()).unwrap();
    let data = Dataset::load(&dir.path().join(MANIFEST_FILE)).unwrap();
    assert_eq!(data.manifest(), manifest);

    let rater = SimulatedRater::default();
    let sets = label_sets(&data, Split::Train, &rater, Method::BlockDct, 2).unwrap();
    assert!(sets.iter().all(|s| s.label.is_some()), "propagation fills every set");
    let cal = calibrate(&sets, 0.85).unwrap();

    let net_cfg = NetConfig {
        size: 32,
        input_scale: input_scale(&data).unwrap(),
        trunk_widths: [4, 4, 8],
        branch_width: 8,
    };
    let mut net = DualTaskNet::<f32>::new(net_cfg, 1).unwrap();
    let cfg = TrainConfig { epochs: 3, adam: AdamConfig { lr: 1e-3, ..Default::default() }, mode: Mode::Dual, ..Default::default() };
    let noise = noise_sets(&data, Split::Train, &cal.scores).unwrap();
    let history = train(&mut net, &noise, &motion_pairs(&data, Split::Train), &cfg).unwrap();
    assert_eq!(history.noise_loss.len(), 3);
    assert!(history.noise_loss.iter().chain(&history.motion_loss).all(|l| l.is_finite()));
    assert!(net.dn_constraints_hold());

    let ckpt_path = dir.path().join("model.ckpt");
    let ckpt = Checkpoint { net, seed: 1, manifest_hash: manifest.hash() };
    save_checkpoint(&ckpt_path, &ckpt).unwrap();
    let back = load_checkpoint(&ckpt_path).unwrap();
    // inference state only; optimizer moments are not persisted
    assert_eq!((&back.net.trunk, &back.net.noise, &back.net.motion), (&ckpt.net.trunk, &ckpt.net.noise, &ckpt.net.motion));
    assert_eq!(back.net.score, ckpt.net.score);
    assert_eq!(back.hash(), ckpt.hash());

    let rulers = prepare_rulers(&data.rulers, &back.net, &rater).unwrap();
    let reg_dir = dir.path().join("scored");
    save_registry(&reg_dir, &rulers).unwrap();
    let rulers_back = load_registry(&reg_dir).unwrap();
    assert_eq!(rulers_back, rulers);
    for r in rulers_back.values() {
        assert_eq!(r.threshold, Some(rater.ruler_threshold(&r.levels_db, &r.scan_type).unwrap()));
        // every ruler version is its own nearest neighbour
        for (v, img) in r.versions.iter().enumerate() {
            let raw = back.net.noise_score(&img.pixels).unwrap();
            assert_eq!(r.ruler_score(raw).unwrap(), v);
        }
    }

    let preds = predictions(&data, Split::Test, &back.net, &rulers_back, &rater).unwrap();
    assert_eq!(preds.len(), 4 * 5);
    let report = evaluate("pipeline", &preds, 8, 7).unwrap();
    assert_eq!(report.n, 20);
    assert_eq!(report.confusion_binary.counts.iter().flatten().sum::<usize>(), 20);
    assert_eq!(report.confusion_ruler.iter().flatten().sum::<usize>(), 20);
}

#[test]
fn checkpoint_ties_to_its_manifest() {
    let dir = tempfile::tempdir().unwrap();
    let a = build_dataset(&config(), &dir.path().join("a")).unwrap();
    let b = build_dataset(&DatasetConfig { seed: 8, ..config() }, &dir.path().join("b")).unwrap();
    assert_ne!(a.hash(), b.hash());
    let mut again = a.clone();
    again.slices[0].label = Some(2);
    assert_ne!(again.hash(), a.hash(), "calibration output changes the hash");
}
