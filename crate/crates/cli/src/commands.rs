use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use ndarray::Array1;
use kerl::checkpoint::{load_checkpoint, metrics_path, save_checkpoint, Snapshot};
use kerl::config::{flatten, load_train_config};
use kerl::data::cub::{load_cub, CubOptions};
use kerl::data::image::{save_pgm, upsample};
use kerl::data::scores::ScoreTable;
use kerl::data::synthetic::{gen_synthetic as generate, write_cub_layout, SyntheticConfig};
use kerl::data::{CropMode, Dataset, SampleInput, Split};
use kerl::graph::{build_graph as build, load_graph, save_graph, Normalization};
use kerl::metrics::write_metrics;
use kerl::model::{Model, Variant};
use kerl::nn::argmax;
use kerl::regions::{format_region_records, location_scores, normalize_unit};
use kerl::trainer::{self, cell_coverage, crossfit_scores, evaluate, EvalMode, EvalReport, TrainConfig, TrainInputs};
use kerl::KerlError;

use crate::{DataArgs, NumericFailure, RunArgs};

fn load(data: &DataArgs, split: Split, load_inputs: bool) -> Result<Dataset> {
    let opts = CubOptions {
        split,
        mode: if data.bbox { CropMode::Bbox } else { CropMode::Image },
        load_inputs,
        ..Default::default()
    };
    Ok(load_cub(&data.data, &opts)?)
}

fn parse_split(s: &str) -> Result<Split> {
    Ok(match s {
        "train" => Split::Train,
        "test" => Split::Test,
        "all" => Split::All,
        other => bail!(KerlError::Invalid(format!("unknown split {other:?}; use train, test or all"))),
    })
}

fn run_config(run: &RunArgs) -> Result<TrainConfig> {
    let mut cfg = match &run.config {
        Some(p) => load_train_config(p)?,
        None => TrainConfig::default(),
    };
    if let Some(e) = run.epochs {
        cfg.epochs = e;
    }
    if let Some(s) = run.seed {
        cfg.seed = s;
    }
    if let Some(b) = run.batch_size {
        cfg.batch_size = b;
    }
    if let Some(lr) = run.lr {
        cfg.sgd.lr = lr;
    }
    cfg.validate()?;
    Ok(cfg)
}

fn metrics_header(cfg: &TrainConfig, train: &Dataset, extra: &[(&str, String)]) -> Vec<(String, String)> {
    let mut h = flatten(cfg);
    h.push(("num_classes".into(), train.num_classes().to_string()));
    h.push(("train_samples".into(), train.len().to_string()));
    for (k, v) in extra {
        h.push(((*k).into(), v.clone()));
    }
    h
}

fn load_scores(path: Option<&Path>) -> Result<Option<ScoreTable>> {
    Ok(match path {
        Some(p) => Some(ScoreTable::load(p)?),
        None => None,
    })
}

pub fn build_graph(data: &DataArgs, out: &Path, per_column: bool, dot: bool) -> Result<()> {
    let train = load(data, Split::Train, false)?;
    let mode = if per_column {
        Normalization::PerColumn
    } else {
        Normalization::Global
    };
    let (graph, report) = build(&train.instances(), train.registry.clone(), mode)?;
    save_graph(&graph, out)?;
    if dot {
        let p = out.with_extension("dot");
        fs::write(&p, graph.to_dot()).with_context(|| format!("writing {}", p.display()))?;
    }
    println!(
        "graph: {} categories, {} attributes, {} nodes, {} edges from {} instances -> {}",
        graph.num_categories(),
        graph.registry().num_attributes(),
        graph.num_nodes(),
        graph.edges().count(),
        report.instances,
        out.display()
    );
    if !report.empty_categories.is_empty() {
        eprintln!("warning: categories without training instances: {:?}", report.empty_categories);
    }
    Ok(())
}

pub struct SyntheticOverrides {
    pub seed: Option<u64>,
    pub categories: Option<usize>,
    pub attributes: Option<usize>,
    pub train_per_class: Option<usize>,
    pub test_per_class: Option<usize>,
    pub image_size: Option<usize>,
}

pub fn gen_synthetic(out: &Path, config: Option<&Path>, o: SyntheticOverrides) -> Result<()> {
    let mut cfg = match config {
        Some(p) => SyntheticConfig::load(p)?,
        None => SyntheticConfig::default(),
    };
    macro_rules! set {
        ($($f:ident),*) => { $(if let Some(v) = o.$f { cfg.$f = v; })* };
    }
    set!(seed, categories, attributes, train_per_class, test_per_class, image_size);
    let data = generate(&cfg)?;
    write_cub_layout(&data, out)?;
    println!(
        "synthetic: {} categories, {} attributes, {} train / {} test images -> {}",
        cfg.categories,
        cfg.attributes,
        data.train.len(),
        data.test.len(),
        out.display()
    );
    Ok(())
}

pub fn pretrain(data: &DataArgs, run: &RunArgs, out: &Path, scores: Option<&Path>, folds: usize) -> Result<()> {
    let mut cfg = run_config(run)?;
    cfg.variant = Variant::Baseline;
    let train = load(data, Split::Train, true)?;
    let test = load(data, Split::Test, true)?;
    let outcome = trainer::train(
        TrainInputs {
            train: Some(&train),
            eval: Some(&test),
            ..Default::default()
        },
        &cfg,
    )?;
    save_checkpoint(&outcome.model, &Snapshot::for_model(&outcome.model, &cfg, cfg.epochs, None), out)?;
    let header = metrics_header(&cfg, &train, &[("folds", folds.to_string())]);
    write_metrics(&metrics_path(out), &header, &outcome.history)?;
    let table = crossfit_scores(&outcome.model, &train, &[&test], &cfg, folds)?;
    let scores_path = scores.map_or_else(|| out.with_extension("scores"), Path::to_path_buf);
    table.save(&scores_path)?;
    report_last(&outcome.history);
    println!(
        "baseline -> {}; scores for {} samples -> {}",
        out.display(),
        table.entries.len(),
        scores_path.display()
    );
    Ok(())
}

fn report_last(history: &[trainer::EpochMetrics]) {
    if let Some(last) = history.last() {
        print!(
            "epoch {}: train loss {:.4}, train accuracy {:.4}",
            last.epoch, last.train_loss, last.train_accuracy
        );
        if let Some(a) = last.eval_accuracy {
            print!(", test accuracy {a:.4}");
        }
        println!();
    }
}

pub struct TrainArgs<'a> {
    pub data: &'a DataArgs,
    pub run: &'a RunArgs,
    pub variant: Option<&'a str>,
    pub graph: Option<&'a Path>,
    pub scores: Option<&'a Path>,
    pub init: Option<&'a Path>,
    pub flow_through: bool,
    pub region_epochs: Option<usize>,
    pub out: &'a Path,
}

pub fn train(a: TrainArgs<'_>) -> Result<()> {
    let mut cfg = run_config(a.run)?;
    if let Some(v) = a.variant {
        cfg.variant = v.parse()?;
    }
    if let Some(r) = a.region_epochs {
        cfg.region_epochs = r;
    }
    cfg.score_flow_through = a.flow_through;
    let graph = match a.graph {
        Some(p) => Some(load_graph(p)?),
        None if cfg.variant.uses_graph() => bail!(KerlError::Missing(format!(
            "variant {} needs a knowledge graph; run build-graph and pass --graph",
            cfg.variant
        ))),
        None => None,
    };
    let scores = load_scores(a.scores)?;
    let init = match a.init {
        Some(p) => Some(load_checkpoint(p)?.0),
        None => None,
    };
    if a.flow_through && init.is_none() {
        bail!(KerlError::Missing("--flow-through needs the pretrained baseline via --init".into()));
    }
    let train = load(a.data, Split::Train, true)?;
    let test = load(a.data, Split::Test, true)?;
    let outcome = trainer::train(
        TrainInputs {
            train: Some(&train),
            eval: Some(&test),
            graph: graph.as_ref(),
            scores: scores.as_ref(),
            init: init.as_ref(),
            scorer: if a.flow_through { init.clone() } else { None },
        },
        &cfg,
    )?;
    save_checkpoint(
        &outcome.model,
        &Snapshot::for_model(&outcome.model, &cfg, cfg.epochs, a.graph),
        a.out,
    )?;
    write_metrics(&metrics_path(a.out), &metrics_header(&cfg, &train, &[]), &outcome.history)?;
    report_last(&outcome.history);
    println!("{} -> {}", cfg.variant, a.out.display());
    Ok(())
}

fn format_report(r: &EvalReport, dataset: &Dataset) -> String {
    let mut out = String::new();
    let _ = writeln!(out, "accuracy {:.4} ({}/{})", r.accuracy, r.correct, r.total);
    let _ = writeln!(out, "mean_loss {:.6}", r.mean_loss);
    let metrics = [
        ("gate_mass", r.gate_mass),
        ("location_mass", r.location_mass),
        ("chance_mass", r.chance_mass),
        ("top_cell_hit", r.top_cell_hit),
        ("top_cell_chance", r.top_cell_chance),
    ];
    for (k, v) in metrics {
        if let Some(v) = v {
            let _ = writeln!(out, "{k} {v:.4}");
        }
    }
    for (c, acc) in r.per_class.iter().enumerate() {
        if !acc.is_nan() {
            let _ = writeln!(out, "class {c} {} {acc:.4}", dataset.registry.categories()[c]);
        }
    }
    out
}

fn needs_scores(model: &Model, scores: &Option<ScoreTable>) -> Result<()> {
    if model.variant.uses_graph() && model.scorer.is_none() && scores.is_none() {
        bail!(KerlError::Missing(format!(
            "variant {} needs cached class scores (--scores); run pretrain first",
            model.variant
        )));
    }
    Ok(())
}

pub fn eval(data: &DataArgs, checkpoint: &Path, scores: Option<&Path>, with_regions: bool, split: &str) -> Result<()> {
    let (model, _) = load_checkpoint(checkpoint)?;
    let scores = load_scores(scores)?;
    needs_scores(&model, &scores)?;
    let dataset = load(data, parse_split(split)?, true)?;
    let mode = if with_regions {
        EvalMode::WithRegions
    } else {
        EvalMode::Plain
    };
    let report = evaluate(&model, &dataset, scores.as_ref(), mode)?;
    print!("variant {}\n{}", model.variant, format_report(&report, &dataset));
    Ok(())
}

pub fn visualize(
    data: &DataArgs,
    checkpoint: &Path,
    scores: Option<&Path>,
    out_dir: &Path,
    limit: Option<usize>,
    factor: usize,
    split: &str,
) -> Result<()> {
    if factor == 0 {
        bail!(KerlError::Invalid("--upsample must be at least 1".into()));
    }
    let (model, _) = load_checkpoint(checkpoint)?;
    let scores = load_scores(scores)?;
    needs_scores(&model, &scores)?;
    let dataset = load(data, parse_split(split)?, true)?;
    fs::create_dir_all(out_dir).map_err(|e| KerlError::Io {
        path: out_dir.into(),
        source: e,
    })?;
    let mut index = String::from("# id name label prediction heatmap gate top_row top_col top_in_mask gate_mass\n");
    let mut records = String::new();
    let (mut hits, mut chance, mut counted) = (0.0, 0.0, 0usize);
    let n = limit.unwrap_or(dataset.len()).min(dataset.len());
    for sample in &dataset.samples[..n] {
        let s = match (&scores, model.variant.uses_graph() && model.scorer.is_none()) {
            (Some(t), true) => Some(t.get(sample.id)?),
            _ => None,
        };
        let trace = model.forward(sample, s, false)?;
        let raw = location_scores(&trace.saliency_source());
        let heat = normalize_unit(&raw);
        let (h, w) = heat.dim();
        let heat_name = format!("{:05}_heat.pgm", sample.id);
        save_pgm(&upsample(&heat, factor), &out_dir.join(&heat_name))?;
        let gate = trace.gate_map().map(|g| g.location_mass());
        let gate_name = match &gate {
            Some(g) => {
                let name = format!("{:05}_gate.pgm", sample.id);
                save_pgm(&upsample(g, factor), &out_dir.join(&name))?;
                name
            }
            None => "-".into(),
        };
        let top = argmax(Array1::from_iter(raw.iter().copied()).view());
        let (tr, tc) = (top / w, top % w);
        let cover = cell_coverage(sample, h, w);
        let (in_mask, mass) = match &cover {
            Some(c) => {
                hits += f64::from(u8::from(c[[tr, tc]] > 0.0));
                chance += c.iter().filter(|&&v| v > 0.0).count() as f64 / c.len() as f64;
                counted += 1;
                let mass = gate.as_ref().and_then(|g| trainer::mass_on_masks(g, c));
                ((c[[tr, tc]] > 0.0).to_string(), mass.map_or("-".into(), |m| format!("{m:.4}")))
            }
            None => ("-".into(), "-".into()),
        };
        let _ = writeln!(
            index,
            "{} {} {} {} {heat_name} {gate_name} {tr} {tc} {in_mask} {mass}",
            sample.id,
            sample.name,
            sample.label,
            argmax(trace.logits.view())
        );
        if matches!(sample.input, SampleInput::Image(_)) && !model.config.precomputed {
            let (regions, crops): (Vec<_>, Vec<_>) = model.highlighted_regions(&trace)?.into_iter().unzip();
            records.push_str(&format_region_records(sample.id, &regions, &crops));
        }
    }
    if counted > 0 {
        let _ = writeln!(
            index,
            "# top cell inside a mask: {:.4} (chance {:.4}) over {counted} samples",
            hits / counted as f64,
            chance / counted as f64
        );
    }
    write(&out_dir.join("index.txt"), &index)?;
    write(&out_dir.join("regions.txt"), &records)?;
    println!("{n} samples -> {}", out_dir.display());
    Ok(())
}

fn write(path: &PathBuf, text: &str) -> Result<()> {
    fs::write(path, text).map_err(|e| KerlError::Io {
        path: path.clone(),
        source: e,
    })?;
    Ok(())
}

pub fn gradcheck(seed: u64, tol: f64) -> Result<()> {
    let report = kerl::gradcheck::gradcheck_all(seed)?;
    print!("{report}");
    if !report.passes(tol) {
        bail!(NumericFailure(format!(
            "gradient check: max relative error {:.3e} exceeds {tol:.1e}",
            report.max_error()
        )));
    }
    println!("max relative error {:.3e} < {tol:.1e}", report.max_error());
    Ok(())
}
