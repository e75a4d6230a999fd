use std::collections::HashSet;
use std::fmt::Write as _;
use std::fs::File;
use std::io::BufReader;
use std::path::{Path, PathBuf};

use hgave_core::graph::NodeKind;
use hgave_core::ingest::{self, BuildReport};
use hgave_core::io::{self, Checkpoint};
use hgave_core::metrics::{self, AggregateReport};
use hgave_core::model::{self, WithheldCache};
use hgave_core::split::{zero_shot_split, LinkLabel, SplitManifest};
use hgave_core::synthetic::{planted, PlantedConfig};
use hgave_core::train::{self, TrainOutcome};
use hgave_core::{CandidateLink, EvalReport, FeatureStore, FusionWeights, Hypergraph, ModelConfig, SplitBundle, TrainConfig};
use serde::Serialize;

use crate::config::RunConfig;
use crate::error::{CliError, CliResult};
use crate::run_dir::{require, write, write_json, write_report, RunDir};

fn located(path: &Path, e: hgave_core::Error) -> CliError {
    let mut err = CliError::from(e);
    err.message = format!("{}: {}", path.display(), err.message);
    err
}

fn open(path: &Path) -> CliResult<BufReader<File>> {
    File::open(path).map(BufReader::new).map_err(|e| CliError::at(path, e))
}

#[derive(Serialize)]
struct FeatureSummary {
    dim: usize,
    from_file: usize,
    from_text: usize,
    empty_text: usize,
}

#[derive(Serialize)]
struct BuildSummary<'a> {
    graph: &'a BuildReport,
    features: FeatureSummary,
}

pub fn build(cfg: &RunConfig, dir: &RunDir) -> CliResult<String> {
    let products = cfg
        .paths
        .products
        .as_ref()
        .ok_or_else(|| CliError::input("no products file: pass --products or set paths.products"))?;
    let inputs = [Some(products), cfg.paths.sessions.as_ref(), cfg.paths.features.as_ref()];
    if let Some(p) = inputs.into_iter().flatten().find(|p| !p.exists()) {
        return Err(CliError::input(format!("{} does not exist", p.display())));
    }
    let records = ingest::read_products(products)?;
    let sessions = match &cfg.paths.sessions {
        Some(p) => ingest::read_sessions(p)?,
        None => Vec::new(),
    };
    let built = ingest::build_graph(&records, &sessions)?;
    let features = match &cfg.paths.features {
        Some(p) => ingest::load_features(p, &built.graph, cfg.feature_seed)?,
        None => FeatureStore::fallback_for(&built.graph, cfg.feature_dim, cfg.feature_seed),
    };
    let mut buf = Vec::new();
    io::write_graph(&built.graph, &mut buf)?;
    write(&dir.graph(), &buf)?;
    let mut buf = Vec::new();
    features.write_to(&mut buf)?;
    write(&dir.features(), &buf)?;
    let summary = BuildSummary {
        graph: &built.report,
        features: FeatureSummary {
            dim: features.dim(),
            from_file: features.matched,
            from_text: features.fallback,
            empty_text: features.empty_text,
        },
    };
    let mut table = built.report.render_table();
    let _ = writeln!(
        table,
        "features: dim {}, {} from file, {} from text ({} empty)",
        features.dim(),
        features.matched,
        features.fallback,
        features.empty_text
    );
    write_report(&dir.build_report(), &summary, &table)?;
    Ok(table)
}

fn load_graph(dir: &RunDir) -> CliResult<(Hypergraph, FeatureStore)> {
    let gp = dir.graph();
    require(&gp, "build")?;
    let g = io::read_graph(open(&gp)?).map_err(|e| located(&gp, e))?;
    let fp = dir.features();
    require(&fp, "build")?;
    let features = ingest::features_from_reader(open(&fp)?, &fp.display().to_string(), &g, 0)?;
    Ok((g, features))
}

fn load_bundle(dir: &RunDir, g: &Hypergraph) -> CliResult<SplitBundle> {
    let path = dir.manifest();
    require(&path, "split")?;
    let manifest: SplitManifest = serde_json::from_reader(open(&path)?).map_err(|e| CliError::at(&path, e))?;
    SplitBundle::from_manifest(g, &manifest).map_err(|e| located(&path, e))
}

fn load_checkpoint(dir: &RunDir) -> CliResult<Checkpoint> {
    let path = dir.checkpoint();
    require(&path, "train")?;
    io::read_checkpoint(open(&path)?).map_err(|e| located(&path, e))
}

pub fn split(cfg: &RunConfig, dir: &RunDir) -> CliResult<String> {
    let (g, _) = load_graph(dir)?;
    let bundle = zero_shot_split(&g, &cfg.split)?;
    write_json(&dir.manifest(), &bundle.manifest())?;
    let mut s = String::new();
    let _ = writeln!(s, "train: {} candidates", bundle.train_candidates.len());
    for (name, part) in [("val", &bundle.val), ("test", &bundle.test)] {
        let _ = writeln!(
            s,
            "{name}: {} unseen aspects, {} products, {} candidates",
            part.unseen_aspects.len(),
            part.removed_products.len(),
            part.candidates.len()
        );
    }
    if bundle.short_complements > 0 {
        let _ = writeln!(s, "warning: {} negative draws came up short", bundle.short_complements);
    }
    Ok(s)
}

#[derive(Serialize)]
struct Settings<'a> {
    model: &'a ModelConfig,
    train: &'a TrainConfig,
    /// `[learning rate, best selection value]` per grid point.
    lr_table: Vec<(f64, f64)>,
}

#[derive(Serialize)]
struct Timing<'a> {
    epoch_seconds: &'a [f64],
    mean_epoch_seconds: f64,
}

pub fn mean_epoch_seconds(out: &TrainOutcome) -> f64 {
    let t = &out.history.epoch_seconds;
    t.iter().sum::<f64>() / t.len().max(1) as f64
}

pub fn train(cfg: &RunConfig, dir: &RunDir) -> CliResult<(String, TrainOutcome)> {
    let (g, features) = load_graph(dir)?;
    let bundle = load_bundle(dir, &g)?;
    let (out, lr_table) = if cfg.lr_grid.is_empty() {
        (train::train(&bundle, &features, &cfg.model, &cfg.train)?, Vec::new())
    } else {
        train::train_lr_grid(&bundle, &features, &cfg.model, &cfg.train, &cfg.lr_grid)?
    };
    let ck = Checkpoint { params: out.params.clone(), fusion: out.fusion, threshold: out.threshold };
    let mut buf = Vec::new();
    io::write_checkpoint(&ck, &mut buf)?;
    write(&dir.checkpoint(), &buf)?;
    write_json(&dir.history(), &out.history)?;
    write_json(&dir.settings(), &Settings { model: &cfg.model, train: &cfg.train, lr_table })?;
    let mean = mean_epoch_seconds(&out);
    write_json(&dir.timing(), &Timing { epoch_seconds: &out.history.epoch_seconds, mean_epoch_seconds: mean })?;
    let h = &out.history;
    let f = &out.fusion;
    let mut s = String::new();
    let best = h.best_epoch.map_or("none".to_string(), |e| e.to_string());
    let _ = writeln!(s, "epochs: {} (best {best}, stopped early: {})", h.epochs.len(), h.stopped_early);
    let _ = writeln!(s, "learning rate: {}", h.learning_rate);
    let _ = writeln!(s, "fusion: alpha {} beta {} gamma {} delta {}", f.alpha, f.beta, f.gamma, f.delta);
    let _ = writeln!(s, "threshold: {:.4}", out.threshold);
    let _ = writeln!(s, "time per epoch: {:.3}s", mean);
    Ok((s, out))
}

pub fn eval(cfg: &RunConfig, dir: &RunDir) -> CliResult<(String, EvalReport)> {
    let (g, features) = load_graph(dir)?;
    let bundle = load_bundle(dir, &g)?;
    let ck = load_checkpoint(dir)?;
    let report = train::evaluate_split(&ck.params, &bundle.test, &features, &ck.fusion, ck.threshold, &cfg.ks)?;
    let table = report.render_table();
    write_report(&dir.report("eval"), &report, &table)?;
    Ok((table, report))
}

#[derive(Serialize)]
struct SweepEntry {
    fusion: FusionWeights,
    validation: Option<f64>,
    test_map: Option<f64>,
}

#[derive(Serialize)]
struct SweepReport {
    metric: train::SelectionMetric,
    best: Option<FusionWeights>,
    rows: Vec<SweepEntry>,
}

pub fn sweep(cfg: &RunConfig, dir: &RunDir) -> CliResult<String> {
    let (g, features) = load_graph(dir)?;
    let bundle = load_bundle(dir, &g)?;
    let ck = load_checkpoint(dir)?;
    let metric = cfg.train.selection_metric;
    let (val, test) = (&bundle.val, &bundle.test);
    let val_cache = WithheldCache::new(&ck.params, &val.graph, &features, &val.candidates)?;
    let test_cache = WithheldCache::new(&ck.params, &test.graph, &features, &test.candidates)?;
    let mut rows = Vec::new();
    for fw in FusionWeights::grid(cfg.train.fusion_resolution)? {
        let vp = val_cache.probabilities(&ck.params, &fw)?;
        let tp = test_cache.probabilities(&ck.params, &fw)?;
        rows.push(SweepEntry {
            fusion: fw,
            validation: metric.measure(&train::scored_links(&val.graph, &val.candidates, &vp)).ok(),
            test_map: metrics::mean_average_precision(&train::scored_links(&test.graph, &test.candidates, &tp)).ok(),
        });
    }
    let mut best: Option<(f64, FusionWeights)> = None;
    for r in &rows {
        if let Some(v) = r.validation {
            if best.is_none_or(|(b, _)| v > b) {
                best = Some((v, r.fusion));
            }
        }
    }
    let best = best.map(|(_, fw)| fw);
    let pct = |x: Option<f64>| x.map_or("-".to_string(), |v| format!("{:.2}", 100.0 * v));
    let mut table = format!("{:>6} {:>6} {:>6} {:>6} {:>9} {:>9}\n", "alpha", "beta", "gamma", "delta", "val", "test mAP");
    for r in &rows {
        let f = &r.fusion;
        let mark = if Some(r.fusion) == best { " *" } else { "" };
        let _ = writeln!(
            table,
            "{:>6.3} {:>6.3} {:>6.3} {:>6.3} {:>9} {:>9}{mark}",
            f.alpha,
            f.beta,
            f.gamma,
            f.delta,
            pct(r.validation),
            pct(r.test_map)
        );
    }
    write_report(&dir.report("sweep"), &SweepReport { metric, best, rows }, &table)?;
    Ok(table)
}

#[derive(Serialize)]
struct Prediction {
    aspect: String,
    probability: f64,
    above_threshold: bool,
    /// The link is a positive candidate of the split.
    known_positive: bool,
}

#[derive(Serialize)]
struct PredictReport {
    product: String,
    split: &'static str,
    threshold: f64,
    predictions: Vec<Prediction>,
}

/// Ranks the unseen aspects of the split that holds `product`.
pub fn predict(_cfg: &RunConfig, dir: &RunDir, product: &str, k: usize) -> CliResult<String> {
    let (g, features) = load_graph(dir)?;
    let bundle = load_bundle(dir, &g)?;
    let ck = load_checkpoint(dir)?;
    let (name, part) = [("test", &bundle.test), ("val", &bundle.val)]
        .into_iter()
        .find(|(_, s)| s.graph.lookup(product).is_some_and(|id| s.graph.kind(id) == NodeKind::Product))
        .ok_or_else(|| CliError::input(format!("{product:?} is not a product of the graph")))?;
    let pid = part.graph.lookup(product).expect("found above");
    let positives: HashSet<_> =
        part.candidates.iter().filter(|c| c.product == pid && c.label.is_positive()).map(|c| c.aspect).collect();
    let links: Vec<CandidateLink> = part
        .unseen_aspects
        .iter()
        .filter_map(|a| part.graph.lookup(a))
        .map(|aspect| CandidateLink { product: pid, aspect, label: LinkLabel::Negative })
        .collect();
    let probs = model::predict_withheld(&ck.params, &part.graph, &features, &ck.fusion, &links)?;
    let mut predictions: Vec<Prediction> = links
        .iter()
        .zip(probs)
        .map(|(l, p)| Prediction {
            aspect: part.graph.key(l.aspect).to_string(),
            probability: p,
            above_threshold: p >= ck.threshold,
            known_positive: positives.contains(&l.aspect),
        })
        .collect();
    predictions.sort_by(|a, b| b.probability.total_cmp(&a.probability).then_with(|| a.aspect.cmp(&b.aspect)));
    predictions.truncate(k);
    let mut table = format!("{product} ({name} split, threshold {:.4})\n", ck.threshold);
    for p in &predictions {
        let tag = if p.known_positive { " [positive]" } else { "" };
        let _ = writeln!(table, "  {:.4}  {}{tag}", p.probability, p.aspect);
    }
    let report = PredictReport { product: product.to_string(), split: name, threshold: ck.threshold, predictions };
    write_report(&dir.report("predict"), &report, &table)?;
    Ok(table)
}

#[derive(Serialize)]
struct RunSummary<'a> {
    seeds: &'a [u64],
    aggregate: &'a AggregateReport,
}

/// Build once, then split, train and evaluate for every seed.
pub fn run(cfg: &RunConfig, dir: &RunDir) -> CliResult<String> {
    let mut out = build(cfg, dir)?;
    let seeds = cfg.seeds();
    let mut reports = Vec::with_capacity(seeds.len());
    for &seed in &seeds {
        let d = if seeds.len() > 1 { dir.seeded(seed) } else { dir.clone() };
        let c = cfg.with_seed(seed);
        split(&c, &d)?;
        let (_, outcome) = train(&c, &d)?;
        let (_, report) = eval(&c, &d)?;
        let _ = writeln!(
            out,
            "seed {seed}: mAP {:.2}, F1 {:.2}, {} epochs, {:.3}s per epoch",
            100.0 * report.map,
            100.0 * report.macro_f1,
            outcome.history.epochs.len(),
            mean_epoch_seconds(&outcome)
        );
        reports.push(report);
    }
    let agg = metrics::aggregate(&reports)?;
    let table = agg.render_table();
    write_report(&dir.aggregate(), &RunSummary { seeds: &seeds, aggregate: &agg }, &table)?;
    out.push_str(&table);
    Ok(out)
}

/// Writes a planted corpus and a config pointing at it into `out`.
pub fn synth(cfg: &PlantedConfig, out: &Path) -> CliResult<String> {
    let p = planted(cfg)?;
    let lines = |items: Vec<String>| items.into_iter().map(|l| l + "\n").collect::<String>();
    let products = lines(p.products.iter().map(serde_json::to_string).collect::<Result<_, _>>()?);
    let sessions = lines(p.sessions.iter().map(serde_json::to_string).collect::<Result<_, _>>()?);
    write(&out.join("products.jsonl"), products.as_bytes())?;
    write(&out.join("sessions.jsonl"), sessions.as_bytes())?;
    let mut buf = Vec::new();
    p.features.write_to(&mut buf)?;
    write(&out.join("features.txt"), &buf)?;
    let config = format!(
        "[paths]\nproducts = \"products.jsonl\"\nsessions = \"sessions.jsonl\"\nfeatures = \"features.txt\"\n\n\
         [split]\nn_unseen = {}\nmax_unseen_support = {}\n\n[model]\ndim = 16\nheads = 4\n",
        cfg.tail_aspects, cfg.tail_support
    );
    let config_path: PathBuf = out.join("hgave.toml");
    write(&config_path, config.as_bytes())?;
    Ok(format!(
        "{} products, {} sessions, {} tail aspects written to {}\n",
        p.products.len(),
        p.sessions.len(),
        p.tail_aspect_keys.len(),
        out.display()
    ))
}
