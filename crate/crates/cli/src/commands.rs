use std::path::PathBuf;

use anyhow::{anyhow, bail, Context, Result};
use pexcite::bounds::{self, corollary1_margin, rank_profile, stability_check, svm_hard_margin, thm1_bound, thm2_bound, thm3_bound};
use pexcite::data_io::{self, Dataset};
use pexcite::equiv::equivalent_lambda;
use pexcite::linalg::pnorm;
use pexcite::net::{load_checkpoint, save_checkpoint, Activation, CheckpointMeta, LayerKind, Network};
use pexcite::optim::{gd_train, pe_train, sgd_train, Loss, TrainResult};
use pexcite::robust::{boundary_raster, empirical_lipschitz, margin_profile, Classifier, LipschitzMode, MarginProfile, ProbeRegion};
use rayon::prelude::*;
use serde::Serialize;
use serde_json::{json, Value};

use crate::config::{ExperimentConfig, Optimizer};
use crate::run::{file_stem, radius_tag, RunDir};

/// Runs `f` for every configured seed, concurrently, keeping seed order.
fn per_seed<T: Send>(cfg: &ExperimentConfig, f: impl Fn(u64) -> Result<T> + Sync) -> Result<Vec<T>> {
    cfg.seeds.par_iter().map(|&s| f(s).with_context(|| format!("seed {s}"))).collect()
}

fn train(cfg: &ExperimentConfig, net: &Network, ds: &Dataset, loss: Loss, seed: u64) -> Result<TrainResult> {
    let tc = cfg.train_config(seed);
    Ok(match cfg.optimizer {
        Optimizer::Gd => gd_train(net, ds, loss, &tc)?,
        Optimizer::Sgd => sgd_train(net, ds, loss, &tc)?,
    })
}

fn accuracy(clf: &Classifier, ds: &Dataset) -> Result<Option<f64>> {
    if ds.is_empty() {
        return Ok(None);
    }
    let mut hits = 0;
    for (x, &y) in ds.points.iter().zip(&ds.labels) {
        if clf.classify(x)? == y {
            hits += 1;
        }
    }
    Ok(Some(hits as f64 / ds.len() as f64))
}

#[derive(Serialize)]
struct TrainSummary {
    loss: &'static str,
    radius: Option<f64>,
    iterations: usize,
    converged: bool,
    final_loss: f64,
    final_grad_norm: f64,
    param_norm: f64,
    threshold: f64,
    train_accuracy: Option<f64>,
    test_accuracy: Option<f64>,
}

fn summarize(res: &TrainResult, clf: &Classifier, loss: Loss, radius: Option<f64>, train: &Dataset, test: &Dataset) -> Result<TrainSummary> {
    Ok(TrainSummary {
        loss: match loss {
            Loss::SquaredError => "se",
            Loss::CrossEntropy => "ce",
        },
        radius,
        iterations: res.iterations,
        converged: res.converged,
        final_loss: res.final_loss,
        final_grad_norm: res.final_grad_norm,
        param_norm: res.net.param_norm(),
        threshold: clf.threshold,
        train_accuracy: accuracy(clf, train)?,
        test_accuracy: accuracy(clf, test)?,
    })
}

fn checkpoint(run: &RunDir, name: &str, clf: &Classifier, seed: u64) -> Result<PathBuf> {
    let meta = CheckpointMeta { seed, config_hash: run.hash.clone(), threshold: Some(clf.threshold) };
    let p = run.path(name);
    save_checkpoint(&clf.net, &meta, &p)?;
    Ok(p)
}

pub fn train_cmd(cfg: &ExperimentConfig) -> Result<RunDir> {
    let run = RunDir::create(cfg, "train")?;
    let loss = cfg.loss.loss();
    per_seed(cfg, |seed| {
        let (tr, te) = cfg.dataset(seed)?;
        let net = cfg.arch.build(tr.dim(), seed)?;
        let res = train(cfg, &net, &tr, loss, seed)?;
        let clf = Classifier::for_loss(res.net.clone(), &tr, loss)?;
        checkpoint(&run, &format!("checkpoint-seed{seed}.json"), &clf, seed)?;
        run.write_tagged(&format!("trajectory-seed{seed}.csv"), Some(seed), &res.trajectory.to_csv())?;
        run.write_json(&format!("summary-seed{seed}.json"), Some(seed), &summarize(&res, &clf, loss, None, &tr, &te)?)?;
        Ok(())
    })?;
    Ok(run)
}

/// One excitation-trained classifier per (radius, seed).
fn pe_models(cfg: &ExperimentConfig, run: &RunDir) -> Result<Vec<(f64, u64, Classifier, Dataset, Dataset)>> {
    let jobs: Vec<(f64, u64)> = cfg.perturb.radii.iter().flat_map(|&r| cfg.seeds.iter().map(move |&s| (r, s))).collect();
    jobs.par_iter()
        .map(|&(r, seed)| -> Result<_> {
            let (tr, te) = cfg.dataset(seed)?;
            let net = cfg.arch.build(tr.dim(), seed)?;
            let set = cfg.perturb.set(&net, r)?;
            let res = pe_train(&net, &tr, &set, &cfg.train_config(seed)).with_context(|| format!("radius {r}, seed {seed}"))?;
            let clf = Classifier::midpoint(res.net.clone(), &tr)?;
            let tag = format!("{}-seed{seed}", radius_tag(r));
            checkpoint(run, &format!("checkpoint-{tag}.json"), &clf, seed)?;
            run.write_tagged(&format!("trajectory-{tag}.csv"), Some(seed), &res.trajectory.to_csv())?;
            run.write_json(&format!("summary-{tag}.json"), Some(seed), &summarize(&res, &clf, Loss::SquaredError, Some(r), &tr, &te)?)?;
            Ok((r, seed, clf, tr, te))
        })
        .collect()
}

pub fn pe_train_cmd(cfg: &ExperimentConfig) -> Result<RunDir> {
    let run = RunDir::create(cfg, "pe-train")?;
    pe_models(cfg, &run)?;
    Ok(run)
}

#[derive(Serialize)]
struct ProfileSummary {
    split: &'static str,
    points: usize,
    median: f64,
    quantiles: Vec<(f64, f64)>,
    misclassified: usize,
    unflipped: usize,
}

fn write_profiles(run: &RunDir, cfg: &ExperimentConfig, tag: &str, clf: &Classifier, tr: &Dataset, te: &Dataset, seed: u64) -> Result<Vec<ProfileSummary>> {
    let mut out = Vec::new();
    for (split, ds) in [("train", tr), ("test", te)] {
        if ds.is_empty() {
            continue;
        }
        let p: MarginProfile = margin_profile(clf, ds, &cfg.attack_config(seed))?;
        run.write_tagged(&format!("margins-{tag}-{split}.csv"), Some(seed), &p.to_csv())?;
        out.push(ProfileSummary {
            split,
            points: ds.len(),
            median: p.median(),
            quantiles: p.quantiles.clone(),
            misclassified: p.records.iter().filter(|r| r.misclassified).count(),
            unflipped: p.records.iter().filter(|r| !r.flipped).count(),
        });
    }
    Ok(out)
}

/// Margin profiles of saved checkpoints, or of freshly excitation-trained
/// models over the configured radii.
pub fn margins_cmd(cfg: &ExperimentConfig, checkpoints: &[PathBuf]) -> Result<RunDir> {
    margins_named(cfg, checkpoints, "margins")
}

fn margins_named(cfg: &ExperimentConfig, checkpoints: &[PathBuf], name: &'static str) -> Result<RunDir> {
    let run = RunDir::create(cfg, name)?;
    if checkpoints.is_empty() {
        let models = pe_models(cfg, &run)?;
        let rows: Vec<Value> = models
            .par_iter()
            .map(|(r, seed, clf, tr, te)| -> Result<Value> {
                let tag = format!("{}-seed{seed}", radius_tag(*r));
                let s = write_profiles(&run, cfg, &tag, clf, tr, te, *seed)?;
                Ok(json!({ "radius": r, "seed": seed, "profiles": s }))
            })
            .collect::<Result<_>>()?;
        run.write_json("margins-summary.json", None, &rows)?;
    } else {
        let rows: Vec<Value> = checkpoints
            .par_iter()
            .map(|path| -> Result<Value> {
                let (net, meta) = load_checkpoint(path).with_context(|| format!("loading {}", path.display()))?;
                let (tr, te) = cfg.dataset(meta.seed)?;
                let clf = match meta.threshold {
                    Some(t) => Classifier::with_threshold(net, t)?,
                    None => Classifier::for_loss(net, &tr, cfg.loss.loss())?,
                };
                let s = write_profiles(&run, cfg, &file_stem(path), &clf, &tr, &te, meta.seed)?;
                Ok(json!({ "checkpoint": path.display().to_string(), "seed": meta.seed, "profiles": s }))
            })
            .collect::<Result<_>>()?;
        run.write_json("margins-summary.json", None, &rows)?;
    }
    Ok(run)
}

pub fn cifar2_cmd(cfg: &ExperimentConfig) -> Result<RunDir> {
    if cfg.data.cifar.is_none() {
        bail!("cifar2 needs a [data.cifar] section listing CIFAR-10 binary files");
    }
    margins_named(cfg, &[], "cifar2")
}

fn raster_box(cfg: &ExperimentConfig, ds: &Dataset) -> Result<[f64; 4]> {
    if let Some(b) = cfg.raster.bbox {
        return Ok(b);
    }
    if ds.dim() != 2 {
        bail!("boundary rasters need 2-D data, got {} dimensions", ds.dim());
    }
    let pad = cfg.raster.pad;
    let (mut b, mut first) = ([0.0; 4], true);
    for p in &ds.points {
        if first {
            b = [p[0], p[0], p[1], p[1]];
            first = false;
        }
        b = [b[0].min(p[0]), b[1].max(p[0]), b[2].min(p[1]), b[3].max(p[1])];
    }
    Ok([b[0] - pad, b[1] + pad, b[2] - pad, b[3] + pad])
}

pub fn boundary_cmd(cfg: &ExperimentConfig) -> Result<RunDir> {
    let run = RunDir::create(cfg, "boundary")?;
    let loss = cfg.loss.loss();
    per_seed(cfg, |seed| {
        let (tr, _) = cfg.dataset(seed)?;
        let net = cfg.arch.build(tr.dim(), seed)?;
        let res = train(cfg, &net, &tr, loss, seed)?;
        let clf = Classifier::for_loss(res.net, &tr, loss)?;
        let bbox = raster_box(cfg, &tr)?;
        let raster = boundary_raster(&clf, bbox, cfg.raster.nx, cfg.raster.ny)?;
        let tag = format!("{}-seed{seed}", cfg.loss.as_str());
        run.write_tagged(&format!("boundary-{tag}.txt"), Some(seed), &raster.to_text())?;
        let margins = raster.grid_margins(&tr.points);
        let mut sorted = margins.clone();
        sorted.sort_by(f64::total_cmp);
        let doc = json!({
            "bbox": bbox,
            "nx": raster.nx,
            "ny": raster.ny,
            "cell_diagonal": raster.cell_diagonal(),
            "min_margin": sorted.first(),
            "median_margin": pexcite::robust::quantile(&sorted, 0.5),
            "point_margins": margins,
            "train_accuracy": accuracy(&clf, &tr)?,
        });
        run.write_json(&format!("grid-margins-{tag}.json"), Some(seed), &doc)?;
        Ok(())
    })?;
    Ok(run)
}

fn err_value(e: impl std::fmt::Display) -> Value {
    json!({ "error": e.to_string() })
}

fn to_value<T: Serialize>(r: Result<T, impl std::fmt::Display>) -> Value {
    match r {
        Ok(v) => serde_json::to_value(v).unwrap_or_else(err_value),
        Err(e) => err_value(e),
    }
}

/// A single identity dense layer, i.e. an affine classifier `wᵀx + b`.
fn affine_parts(net: &Network) -> Option<(Vec<f64>, f64)> {
    let [layer] = net.layers() else { return None };
    match (&layer.kind, layer.activation) {
        (LayerKind::Dense { weights }, Activation::Identity) if weights.rows() == 1 => {
            Some((weights.row(0).to_vec(), layer.bias.first().copied().unwrap_or(0.0)))
        }
        _ => None,
    }
}

pub fn bounds_cmd(cfg: &ExperimentConfig) -> Result<RunDir> {
    let run = RunDir::create(cfg, "bounds")?;
    let loss = cfg.loss.loss();
    per_seed(cfg, |seed| {
        let (tr, _) = cfg.dataset(seed)?;
        let net = cfg.arch.build(tr.dim(), seed)?;
        let res = train(cfg, &net, &tr, loss, seed)?;
        let clf = Classifier::for_loss(res.net.clone(), &tr, loss)?;
        let (a, b) = tr.class_points();
        let mut doc = serde_json::Map::new();
        doc.insert("training".into(), json!({ "iterations": res.iterations, "converged": res.converged, "final_grad_norm": res.final_grad_norm }));
        doc.insert("svm".into(), to_value(svm_hard_margin(&a, &b).map(|s| json!({ "gamma_opt": s.gamma_opt, "w": s.w, "b": s.b, "iterations": s.iterations }))));
        if let Some((w, bias)) = affine_parts(&res.net) {
            doc.insert("margin_bound".into(), to_value(thm2_bound(&w, bias - clf.threshold, &tr)));
        }
        if res.net.check_two_layer().is_ok() {
            match loss {
                Loss::SquaredError => {
                    let delta = cfg.train.step_size;
                    let rep = thm1_bound(&res.net, &tr, delta);
                    let lip = ProbeRegion::around(&tr.points, cfg.raster.pad).map_err(anyhow::Error::from).and_then(|region| {
                        let mode = if tr.dim() == 2 {
                            LipschitzMode::Exact { grid_per_dim: 100 }
                        } else {
                            LipschitzMode::Sampling { pairs: 100_000, seed }
                        };
                        Ok(empirical_lipschitz(&res.net, &region, mode)?)
                    });
                    let gap = clf.gap(&tr)?;
                    let cor = match &rep {
                        Ok(r) => r.bound.map(|l| to_value(corollary1_margin(gap, l))),
                        Err(_) => None,
                    };
                    doc.insert("lipschitz_bound".into(), to_value(rep));
                    doc.insert("empirical_lipschitz".into(), to_value(lip));
                    doc.insert("class_gap".into(), json!(gap));
                    doc.insert("margin_guarantee".into(), cor.unwrap_or(Value::Null));
                }
                Loss::CrossEntropy => {
                    doc.insert("support_bound".into(), to_value(thm3_bound(&res.net, &tr).map(|(r, _)| r)));
                }
            }
        }
        run.write_json(&format!("bounds-seed{seed}.json"), Some(seed), &Value::Object(doc))?;
        Ok(())
    })?;
    Ok(run)
}

pub fn rank_cmd(cfg: &ExperimentConfig) -> Result<RunDir> {
    let run = RunDir::create(cfg, "rank")?;
    per_seed(cfg, |seed| {
        let (tr, _) = cfg.dataset(seed)?;
        let net = cfg.arch.build(tr.dim(), seed)?;
        let res = train(cfg, &net, &tr, cfg.loss.loss(), seed)?;
        let profile = rank_profile(&res.net.dense_weight_matrices())?;
        let doc = json!({
            "iterations": res.iterations,
            "converged": res.converged,
            "final_grad_norm": res.final_grad_norm,
            "weight_decay": cfg.train.weight_decay,
            "sigma_floor": bounds::SIGMA_FLOOR,
            "layers": profile.layers,
        });
        run.write_json(&format!("rank-seed{seed}.json"), Some(seed), &doc)?;
        Ok(())
    })?;
    Ok(run)
}

pub fn equiv_cmd(cfg: &ExperimentConfig) -> Result<RunDir> {
    let run = RunDir::create(cfg, "equiv")?;
    let (p, m) = (cfg.equiv.p, cfg.equiv.m);
    per_seed(cfg, |seed| {
        let ds = cfg.full_dataset(seed)?;
        let y: Vec<f64> = ds.labels.iter().map(|&l| l as f64).collect();
        let mut csv = String::from("epsilon,lambda,stationarity_lambda,residual,w_norm\n");
        for &eps in &cfg.equiv.epsilons {
            let e = equivalent_lambda(eps, p, m, &ds.points, &y).with_context(|| format!("epsilon {eps}"))?;
            let wn = pnorm(&e.w_inflated, p).map_err(|e| anyhow!(e))?;
            // both problems are stationary at the same w when λ = 2ε²‖w‖_p^{2−m}/m
            let lam_stat = 2.0 * eps * eps * wn.powf(2.0 - m) / m;
            csv.push_str(&format!("{eps},{},{lam_stat},{},{wn}\n", e.lambda, e.residual));
        }
        run.write_tagged(&format!("equiv-seed{seed}.csv"), Some(seed), &csv)?;
        Ok(())
    })?;
    Ok(run)
}

pub fn stability_cmd(cfg: &ExperimentConfig) -> Result<RunDir> {
    let run = RunDir::create(cfg, "stability")?;
    per_seed(cfg, |seed| {
        let (tr, _) = cfg.dataset(seed)?;
        let net = cfg.arch.build(tr.dim(), seed)?;
        let res = train(cfg, &net, &tr, Loss::SquaredError, seed)?;
        let rep = stability_check(&res.net, &tr, cfg.train.step_size)?;
        let doc = json!({ "iterations": res.iterations, "converged": res.converged, "report": rep });
        run.write_json(&format!("stability-seed{seed}.json"), Some(seed), &doc)?;
        Ok(())
    })?;
    Ok(run)
}

pub fn gen_data_cmd(cfg: &ExperimentConfig) -> Result<RunDir> {
    let run = RunDir::create(cfg, "gen-data")?;
    per_seed(cfg, |seed| {
        let ds = cfg.full_dataset(seed)?;
        let path = run.path(&format!("dataset-seed{seed}.csv"));
        data_io::write_csv(&ds, &path)?;
        let meta = json!({ "config_hash": run.hash, "seed": seed, "points": ds.len(), "dataset": ds.meta });
        data_io::write_sidecar(&path, &meta)?;
        Ok(())
    })?;
    Ok(run)
}
