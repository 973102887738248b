use std::path::{Path, PathBuf};
use std::sync::Arc;

use anyhow::{bail, ensure, Context, Result};

use mriq_core::calibration::{calibrate, propagate_labels, VersionSet};
use mriq_core::dataset::{build_dataset, derive_seed, generate_ruler, Dataset, DatasetConfig, DatasetManifest, Split, MANIFEST_FILE};
use mriq_core::estimators::Method;
use mriq_core::io::read_image;
use mriq_core::metrics::{evaluate, Prediction};
use mriq_core::network::{
    load_checkpoint, save_checkpoint, train, AdamConfig, Checkpoint, DualTaskNet, Mode, NetConfig, TrainConfig,
};
use mriq_core::rater::SimulatedRater;
use mriq_core::ruler::{load_registry, load_ruler, save_registry, select_ruler, RulerRegistry};
use mriq_core::ScanType;

use crate::server::{router, AppState};
use crate::store::LabelStore;
use crate::{
    CalibrateArgs, Cli, Command, EvaluateArgs, LabelSource, MakeRulerArgs, ScoreArgs, ServeArgs, SimulateArgs,
    TrainArgs,
};

pub const LABELS_FILE: &str = "labels.json";
pub const CHECKPOINT_FILE: &str = "model.ckpt";
pub const RULERS_DIR: &str = "rulers";

pub fn run(cli: Cli) -> Result<()> {
    let dir = &cli.data_dir;
    match cli.command {
        Command::Simulate(a) => simulate(dir, a),
        Command::Calibrate(a) => calibrate_cmd(dir, a),
        Command::Train(a) => train_cmd(dir, a),
        Command::MakeRuler(a) => make_ruler(dir, a),
        Command::Score(a) => score(dir, a),
        Command::Evaluate(a) => evaluate_cmd(dir, a),
        Command::Serve(a) => serve(dir, a),
    }
}

fn or_default(path: Option<PathBuf>, dir: &Path, name: &str) -> PathBuf {
    path.unwrap_or_else(|| dir.join(name))
}

/// Fails with the artifact's name when `path` does not exist.
fn require(path: PathBuf, what: &str, produced_by: &str) -> Result<PathBuf> {
    if !path.exists() {
        bail!("missing {what}: {} (produced by `mriq {produced_by}`)", path.display());
    }
    Ok(path)
}

fn simulate(dir: &Path, a: SimulateArgs) -> Result<()> {
    let out = a.out.unwrap_or_else(|| dir.to_path_buf());
    let scan_types = a
        .scan_types
        .iter()
        .map(|s| s.parse::<ScanType>())
        .collect::<mriq_core::Result<Vec<_>>>()?;
    let config = DatasetConfig {
        scan_types,
        train_slices: a.train,
        val_slices: a.val,
        test_slices: a.test,
        slices_per_subject: a.slices_per_subject,
        size: a.size,
        n_coils: a.coils,
        m_t: a.mt,
        m_r: a.mr,
        seed: a.seed,
        ..Default::default()
    };
    let manifest = build_dataset(&config, &out)?;
    println!(
        "wrote {} slices and {} rulers to {}",
        manifest.slices.len(),
        manifest.rulers.len(),
        out.join(MANIFEST_FILE).display()
    );
    Ok(())
}

fn heuristic(rec: &mriq_core::dataset::SliceRecord, method: Method) -> Result<Vec<f64>> {
    rec.heuristic
        .get(&method)
        .cloned()
        .with_context(|| format!("slice {} has no {method:?} heuristic scores", rec.slice_id))
}

fn rater(source: &LabelSource) -> SimulatedRater {
    SimulatedRater { seed: source.rater_seed, ..Default::default() }
}

fn calibrate_cmd(dir: &Path, a: CalibrateArgs) -> Result<()> {
    let path = require(or_default(a.manifest, dir, MANIFEST_FILE), "dataset manifest", "simulate")?;
    let mut manifest = DatasetManifest::read(&path)?;
    let method = Method::from(a.method);
    ensure!(a.label_stride > 0, "--label-stride must be positive");

    let store = if a.source.simulate_rater {
        None
    } else {
        let p = require(or_default(a.source.labels.clone(), dir, LABELS_FILE), "label store", "serve")?;
        Some(LabelStore::open(p)?)
    };
    let sim = rater(&a.source);
    let levels = manifest.config.version_levels();

    let sets = manifest
        .split(Split::Train)
        .map(|r| {
            let label = match &store {
                Some(s) => match &a.source.rater {
                    Some(who) => s.pick(&r.slice_id, who),
                    None => s.latest_pick(&r.slice_id),
                },
                None => (r.slice_index % a.label_stride == 0)
                    .then(|| sim.pick(&levels, derive_seed(sim.seed, &r.slice_id))),
            };
            Ok(VersionSet {
                slice_id: r.slice_id.clone(),
                subject_id: r.subject_id.clone(),
                slice_index: r.slice_index,
                scan_type: r.scan_type.clone(),
                heuristic: heuristic(r, method)?,
                label,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    let picked = sets.iter().filter(|s| s.label.is_some()).count();
    if picked == 0 {
        bail!("missing calibration picks: no training set has a pick (label with `mriq serve` or pass --simulate-rater)");
    }
    let sets = propagate_labels(&sets)?;
    let cal = calibrate(&sets, a.eta)?;

    for (set, scores) in sets.iter().zip(cal.scores) {
        let rec = manifest
            .slices
            .iter_mut()
            .find(|r| r.slice_id == set.slice_id)
            .expect("sets come from the manifest");
        rec.label = set.label;
        rec.calibrated = Some(scores);
    }
    manifest.write(&path)?;
    let mu: Vec<String> = cal.mu_h.iter().map(|(k, v)| format!("{k}={v:.4}")).collect();
    println!(
        "calibrated {} sets ({picked} picked, {} propagated), eta={}, mu_h {}",
        sets.len(),
        sets.len() - picked,
        a.eta,
        mu.join(" ")
    );
    Ok(())
}

fn train_cmd(dir: &Path, a: TrainArgs) -> Result<()> {
    let path = require(or_default(a.manifest, dir, MANIFEST_FILE), "dataset manifest", "simulate")?;
    let out = or_default(a.out, dir, CHECKPOINT_FILE);
    let data = Dataset::load(&path)?;
    let manifest = data.manifest();
    let mode = Mode::from(a.mode);
    let method = Method::from(a.method);

    let targets = data
        .split(Split::Train)
        .map(|s| match (&s.record.calibrated, a.uncalibrated, mode) {
            (Some(c), false, _) => Ok(c.clone()),
            (_, true, _) | (None, _, Mode::MotionOnly) => heuristic(&s.record, method),
            (None, false, _) => bail!(
                "missing calibrated labels for slice {} in {} (run `mriq calibrate` or pass --uncalibrated)",
                s.record.slice_id,
                path.display()
            ),
        })
        .collect::<Result<Vec<_>>>()?;
    let sets = mriq_core::benchmark::noise_sets(&data, Split::Train, &targets)?;
    let pairs = if mode == Mode::NoiseOnly {
        Vec::new()
    } else {
        mriq_core::benchmark::motion_pairs(&data, Split::Train)
    };

    let widths: [usize; 3] = a.trunk_widths.as_slice().try_into().context("--trunk-widths takes three values")?;
    let net_cfg = NetConfig {
        size: data.config.size,
        input_scale: mriq_core::benchmark::input_scale(&data)?,
        trunk_widths: widths,
        branch_width: a.branch_width,
    };
    let mut net = DualTaskNet::<f32>::new(net_cfg, a.net_seed)?;
    let cfg = TrainConfig {
        epochs: a.epochs,
        adam: AdamConfig { lr: a.lr, ..Default::default() },
        seed: a.seed,
        mode,
        ..Default::default()
    };
    let history = train(&mut net, &sets, &pairs, &cfg)?;
    let ckpt = Checkpoint { net, seed: a.net_seed, manifest_hash: manifest.hash() };
    save_checkpoint(&out, &ckpt)?;
    let last = |v: &[f64]| v.last().map_or("-".to_string(), |x| format!("{x:.5}"));
    println!(
        "trained {} epochs (noise loss {}, motion loss {}); wrote {}",
        a.epochs,
        last(&history.noise_loss),
        last(&history.motion_loss),
        out.display()
    );
    Ok(())
}

fn load_ckpt(path: Option<PathBuf>, dir: &Path) -> Result<Checkpoint> {
    let p = require(or_default(path, dir, CHECKPOINT_FILE), "checkpoint", "train")?;
    Ok(load_checkpoint(&p)?)
}

fn load_rulers(path: Option<PathBuf>, dir: &Path) -> Result<RulerRegistry> {
    let p = require(or_default(path, dir, RULERS_DIR), "ruler registry", "make-ruler")?;
    Ok(load_registry(&p)?)
}

fn make_ruler(dir: &Path, a: MakeRulerArgs) -> Result<()> {
    let ckpt = load_ckpt(a.checkpoint, dir)?;
    let out = or_default(a.out, dir, RULERS_DIR);
    let manifest_path = or_default(a.manifest, dir, MANIFEST_FILE);

    let mut registry = match &a.from {
        Some(src) => load_registry(&require(src.clone(), "ruler registry", "make-ruler")?)?,
        None if manifest_path.exists() || a.scan_type.is_empty() => {
            let path = require(manifest_path.clone(), "dataset manifest", "simulate")?;
            let m = DatasetManifest::read(&path)?;
            let root = path.parent().map(Path::to_path_buf).unwrap_or_default();
            m.rulers
                .iter()
                .map(|r| Ok((r.scan_type.clone(), load_ruler(&root.join(&r.dir))?)))
                .collect::<Result<_>>()?
        }
        None => RulerRegistry::new(),
    };
    if !a.scan_type.is_empty() {
        let config = if manifest_path.exists() {
            DatasetManifest::read(&manifest_path)?.config
        } else {
            DatasetConfig::default()
        };
        for st in &a.scan_type {
            let st: ScanType = st.parse()?;
            let (_, ruler) = generate_ruler(&config, &st)?;
            registry.insert(st, ruler);
        }
    }
    ensure!(!registry.is_empty(), "no rulers to score");

    let store = match &a.source.labels {
        Some(p) => Some(LabelStore::open(require(p.clone(), "label store", "serve")?)?),
        None => {
            let p = dir.join(LABELS_FILE);
            p.exists().then(|| LabelStore::open(p)).transpose()?
        }
    };
    let sim = rater(&a.source);
    let hash = ckpt.hash();
    for r in registry.values_mut() {
        r.cache_scores(&ckpt.net, Some(hash.clone()))?;
        let st = r.scan_type.to_string();
        let picked = if a.source.simulate_rater {
            Some(sim.ruler_threshold(&r.levels_db, &r.scan_type)?)
        } else {
            store.as_ref().and_then(|s| s.threshold(&st))
        };
        if let Some((t_a, t_b)) = picked {
            r.set_threshold(t_a, t_b)?;
        }
        println!("{st}: threshold {:?}", r.threshold);
    }
    save_registry(&out, &registry)?;
    println!("wrote {} rulers to {}", registry.len(), out.display());
    Ok(())
}

fn score(dir: &Path, a: ScoreArgs) -> Result<()> {
    let ckpt = load_ckpt(a.checkpoint, dir)?;
    let rulers = load_rulers(a.rulers, dir)?;
    let hash = ckpt.hash();
    println!("image\traw\truler_score\tpass");
    for path in &a.images {
        let path = require(path.clone(), "image", "simulate")?;
        let (img, _) = read_image(&path)?;
        let ruler = select_ruler(&rulers, &img.scan_type, a.strict)?;
        if ruler.checkpoint_hash.as_deref().is_some_and(|h| h != hash) {
            bail!(
                "ruler {} was scored with a different checkpoint; rerun `mriq make-ruler`",
                ruler.scan_type
            );
        }
        let raw = ckpt.net.noise_score(&img.pixels)?;
        let rs = ruler.ruler_score(raw)?;
        let pass = ruler.pass_fail(raw)?;
        println!("{}\t{raw:.6}\t{rs}\t{}", path.display(), if pass { "pass" } else { "fail" });
    }
    Ok(())
}

fn evaluate_cmd(dir: &Path, a: EvaluateArgs) -> Result<()> {
    let path = require(or_default(a.manifest, dir, MANIFEST_FILE), "dataset manifest", "simulate")?;
    let manifest = DatasetManifest::read(&path)?;
    let root = path.parent().map(Path::to_path_buf).unwrap_or_default();
    let ckpt = load_ckpt(a.checkpoint, dir)?;
    let rulers = load_rulers(a.rulers, dir)?;
    if ckpt.manifest_hash != manifest.hash() {
        tracing::warn!("checkpoint was trained on a different manifest");
    }

    let store = if a.source.simulate_rater {
        None
    } else {
        let p = require(or_default(a.source.labels.clone(), dir, LABELS_FILE), "label store", "serve")?;
        Some(LabelStore::open(p)?)
    };
    let who = match (&store, &a.source.rater) {
        (Some(_), Some(r)) => Some(r.clone()),
        (Some(s), None) => s.test_raters().into_iter().next(),
        (None, _) => None,
    };
    let sim = rater(&a.source);
    let levels = manifest.config.version_levels();
    let hash = ckpt.hash();

    let mut preds = Vec::new();
    for rec in manifest.split(Split::Test) {
        let ruler = select_ruler(&rulers, &rec.scan_type, false)?;
        if ruler.checkpoint_hash.as_deref().is_some_and(|h| h != hash) {
            bail!("ruler {} was scored with a different checkpoint; rerun `mriq make-ruler`", ruler.scan_type);
        }
        for (i, file) in rec.version_files.iter().enumerate() {
            let label = match (&store, &who) {
                (Some(s), Some(w)) => s
                    .test_label(&format!("{}-v{}", rec.slice_id, i + 1), w)
                    .map(|l| (l.rs, l.pf)),
                (Some(_), None) => None,
                (None, _) => Some(sim.test_label(levels[i], &ruler.levels_db, &rec.scan_type)),
            };
            let Some((label_rs, label_pf)) = label else { continue };
            let (img, _) = read_image(&root.join(file))?;
            let raw = ckpt.net.noise_score(&img.pixels)?;
            preds.push(Prediction {
                raw,
                ruler_score: ruler.ruler_score(raw)?,
                pass: ruler.pass_fail(raw)?,
                label_ruler_score: label_rs,
                label_pass: label_pf,
                level: Some(i as f64),
            });
        }
    }
    if preds.is_empty() {
        bail!("missing test labels: no test item is labeled (label with `mriq serve` or pass --simulate-rater)");
    }
    let m_r = rulers.values().map(|r| r.m_r()).max().unwrap_or(0);
    let name = match &who {
        Some(w) => format!("test split vs {w}"),
        None => "test split vs simulated rater".to_string(),
    };
    let report = evaluate(&name, &preds, m_r, a.seed)?;
    if a.json {
        println!("{}", serde_json::to_string_pretty(&report)?);
    } else {
        println!("{report}");
    }
    Ok(())
}

fn serve(dir: &Path, a: ServeArgs) -> Result<()> {
    let manifest = require(or_default(a.manifest, dir, MANIFEST_FILE), "dataset manifest", "simulate")?;
    let labels = or_default(a.labels, dir, LABELS_FILE);
    let rulers = a.rulers.map(|p| require(p, "ruler registry", "make-ruler")).transpose()?;
    let state = Arc::new(AppState::open(&manifest, &labels, rulers.as_deref())?);
    let rt = tokio::runtime::Runtime::new()?;
    rt.block_on(async {
        let listener = tokio::net::TcpListener::bind((a.host.as_str(), a.port))
            .await
            .with_context(|| format!("binding {}:{}", a.host, a.port))?;
        println!("listening on http://{}", listener.local_addr()?);
        axum::serve(listener, router(state))
            .with_graceful_shutdown(async {
                let _ = tokio::signal::ctrl_c().await;
            })
            .await?;
        Ok(())
    })
}
