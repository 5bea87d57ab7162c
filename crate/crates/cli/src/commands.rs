use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use amnesic::dataset::{load_with_paths, sample_tokens, split_train_dev, DatasetPaths};
use amnesic::eval::{
    label_vs_rest, lm_accuracy, mean_kl, per_label_accuracy, per_label_tsv, LabelVsRestConfig,
};
use amnesic::inlp::{apply_projection, load_projection, random_projection, save_projection};
use amnesic::probe::{control_task_labels, probe_accuracy, save_probe, train_linear_probe};
use amnesic::seed::{self, stream};
use amnesic::{label_stats, run_inlp, run_selectivity, AmnesicReport, Decoder, InlpResult, Projection, ReprDataset};
use amnesic_encoder::corpus::{read_corpus, write_corpus, TAG_PROPERTY};
use amnesic_encoder::layerwise::{
    export_layers, layer_impact_csv, layer_removal, layerwise_impact, max_delta_layer,
    recoverability_matrix, write_layer_datasets, LayerRemoval,
};
use amnesic_encoder::{build_synthetic_corpus, load_checkpoint, save_checkpoint, train_toy_mlm};

use crate::config::ExperimentConfig;
use crate::error::{CliError, Result};
use crate::output::{
    read_report, Output, RunReport, ITERATIONS_CSV, LAYER_IMPACT_CSV, PER_LABEL_TSV,
    RECOVERABILITY_CSV, REPORT_JSON,
};

pub const PROBE_FILE: &str = "probe.repd";
pub const PROJECTION_FILE: &str = "projection.repd";
pub const RAND_FILE: &str = "rand.repd";

pub fn run(cfg: &ExperimentConfig) -> Result<()> {
    let out = Output::create(cfg.out())?;
    match cfg.command.as_str() {
        "probe" => cmd_probe(cfg, &out)?,
        "inlp" => cmd_inlp(cfg, &out)?,
        "rand" => cmd_rand(cfg, &out)?,
        "eval" => cmd_eval(cfg, &out)?,
        "selectivity" => cmd_selectivity(cfg, &out)?,
        "label-vs-rest" => cmd_label_vs_rest(cfg, &out)?,
        "layerwise" => cmd_layerwise(cfg, &out)?,
        "toy-train" => cmd_toy_train(cfg, &out)?,
        "report" => cmd_report(cfg, &out)?,
        other => return Err(CliError::config(format!("unknown command '{other}'"))),
    }
    out.finish(cfg)?;
    Ok(())
}

fn primary_paths(cfg: &ExperimentConfig) -> Result<DatasetPaths> {
    let reps = cfg.require(&cfg.reps, "reps")?;
    let mut paths = DatasetPaths::from_reps(reps);
    if let Some(l) = &cfg.labels {
        paths.labels = l.clone();
    }
    if let Some(m) = &cfg.meta {
        paths.meta = m.clone();
    }
    Ok(paths)
}

fn load(paths: &DatasetPaths) -> Result<ReprDataset> {
    Ok(load_with_paths(paths)?)
}

fn load_decoder(ds: &ReprDataset, paths: &DatasetPaths) -> Result<Decoder> {
    Ok(Decoder::from_meta(&ds.meta, paths)?)
}

/// Training rows (optionally subsampled) and dev rows.
fn train_dev(cfg: &ExperimentConfig) -> Result<(ReprDataset, ReprDataset, DatasetPaths)> {
    let paths = primary_paths(cfg)?;
    let ds = load(&paths)?;
    let (train, dev) = match &cfg.dev {
        Some(d) => (ds, load(&DatasetPaths::from_reps(d))?),
        None => split_train_dev(&ds, cfg.dev_fraction, cfg.split_seed())?,
    };
    let train = match cfg.sample {
        Some(k) if k < train.len() => sample_tokens(&train, k, cfg.derived(stream::SAMPLE))?,
        _ => train,
    };
    Ok((train, dev, paths))
}

fn majority(ds: &ReprDataset, property: &str) -> Result<f64> {
    Ok(label_stats(ds.property(property)?)?.majority_fraction)
}

/// Accuracy of the first INLP probe, i.e. before any removal.
fn first_probe_accuracy(res: &InlpResult) -> Option<f64> {
    res.iterations.first().map(|r| r.dev_accuracy)
}

fn fmt_opt(v: Option<f64>) -> String {
    v.map(|x| format!("{x:.6}")).unwrap_or_default()
}

fn cmd_probe(cfg: &ExperimentConfig, out: &Output) -> Result<()> {
    let property = cfg.property()?;
    let (mut train, mut dev, _) = train_dev(cfg)?;
    let mut name = property.to_string();
    if cfg.control {
        let stats = label_stats(train.property(property)?)?;
        let tokens: Vec<&String> = train.tokens.iter().chain(&dev.tokens).collect();
        let mut labels =
            control_task_labels(&tokens, &stats, cfg.derived(stream::CONTROL_LABELS));
        let dev_labels = labels.split_off(train.len());
        let vocab: Vec<String> = stats.label_counts.keys().cloned().collect();
        name = format!("{property}-control");
        train = train.with_property(&name, labels, vocab.clone())?;
        dev = dev.with_property(&name, dev_labels, vocab)?;
    }
    let probe = train_linear_probe(&train, &name, &cfg.probe_config())?;
    let acc = probe_accuracy(&probe, &dev, &name)?;
    save_probe(&probe, out.path(PROBE_FILE))?;
    let report = AmnesicReport {
        num_classes: Some(probe.num_classes()),
        majority: Some(majority(&dev, &name)?),
        probe_acc: Some(acc),
        ..AmnesicReport::new(name)
    };
    out.write_report(&RunReport::new(&cfg.command, vec![report]))
}

fn cmd_inlp(cfg: &ExperimentConfig, out: &Output) -> Result<()> {
    let property = cfg.property()?;
    let (train, dev, paths) = train_dev(cfg)?;
    let res = run_inlp(&train, &dev, property, &cfg.inlp_config())?;
    save_projection(&res.projection, Some(&res), out.path(PROJECTION_FILE))?;

    // per-iteration word accuracy on dev, when the dataset names a decoder
    let dec = match dev.meta.decoder_file {
        Some(_) => Some(load_decoder(&train, &paths)?),
        None => None,
    };
    let mut csv = String::from(
        "property,iteration,dev_accuracy,train_accuracy,directions_added,cumulative_removed,lm_amnesic,lm_rand\n",
    );
    for (i, r) in res.iterations.iter().enumerate() {
        let (lm_a, lm_r) = match &dec {
            Some(dec) => {
                let p = res.projection_after(i);
                let rp = random_projection(dev.dim(), r.cumulative_removed, cfg.rand_seed())?;
                (Some(lm_accuracy(&dev, dec, Some(&p))?), Some(lm_accuracy(&dev, dec, Some(&rp))?))
            }
            None => (None, None),
        };
        let _ = writeln!(
            csv,
            "{property},{},{:.6},{:.6},{},{},{},{}",
            r.iteration,
            r.dev_accuracy,
            r.train_accuracy,
            r.directions_added,
            r.cumulative_removed,
            fmt_opt(lm_a),
            fmt_opt(lm_r)
        );
    }
    out.write(ITERATIONS_CSV, csv)?;
    let report = AmnesicReport {
        removed_dirs: Some(res.removed()),
        num_classes: Some(res.num_classes),
        majority: Some(res.majority),
        probe_acc: first_probe_accuracy(&res),
        ..AmnesicReport::new(property)
    };
    let run = RunReport::new(&cfg.command, vec![report])
        .with("stopped_reason", res.stopped_reason)
        .with("iterations", &res.iterations);
    out.write_report(&run)
}

fn cmd_rand(cfg: &ExperimentConfig, out: &Output) -> Result<()> {
    let matched = match &cfg.projection {
        Some(p) => Some(load_projection(p)?.0),
        None => None,
    };
    let rank = match (cfg.rank, &matched) {
        (Some(k), _) => k,
        (None, Some(p)) => p.removed(),
        (None, None) => return Err(CliError::config("rand needs --rank or --projection")),
    };
    let dim = match (&matched, &cfg.reps) {
        (Some(p), _) => p.dim(),
        (None, Some(_)) => load(&primary_paths(cfg)?)?.dim(),
        (None, None) => return Err(CliError::config("rand needs --projection or --reps for the width")),
    };
    let p = random_projection(dim, rank, cfg.rand_seed())?;
    save_projection(&p, None, out.path(RAND_FILE))?;
    let run = RunReport::new(&cfg.command, Vec::new())
        .with("dim", dim)
        .with("removed", p.removed());
    out.write_report(&run)
}

/// Amnesic projection (with its INLP log) and the rank-matched control.
fn projections(cfg: &ExperimentConfig, dim: usize) -> Result<(Projection, Option<InlpResult>, Projection)> {
    let path = cfg.require(&cfg.projection, "projection")?;
    let (amnesic, log) = load_projection(path)?;
    let rand = match &cfg.rand_projection {
        Some(r) => load_projection(r)?.0,
        None => random_projection(dim, amnesic.removed(), cfg.rand_seed())?,
    };
    if rand.removed() != amnesic.removed() {
        return Err(CliError::config(format!(
            "random projection removes {} directions, the amnesic one {}",
            rand.removed(),
            amnesic.removed()
        )));
    }
    Ok((amnesic, log, rand))
}

fn cmd_eval(cfg: &ExperimentConfig, out: &Output) -> Result<()> {
    let paths = primary_paths(cfg)?;
    let ds = load(&paths)?;
    let dec = load_decoder(&ds, &paths)?;
    let (amnesic, log, rand) = projections(cfg, ds.dim())?;
    let name = cfg.property.clone().unwrap_or_else(|| "amnesic".to_string());
    let mut report = AmnesicReport {
        removed_dirs: Some(amnesic.removed()),
        vanilla_acc: Some(lm_accuracy(&ds, &dec, None)?),
        amnesic_acc: Some(lm_accuracy(&ds, &dec, Some(&amnesic))?),
        rand_acc: Some(lm_accuracy(&ds, &dec, Some(&rand))?),
        mean_kl_amnesic: Some(mean_kl(&ds, &dec, &amnesic)?),
        mean_kl_rand: Some(mean_kl(&ds, &dec, &rand)?),
        ..AmnesicReport::new(name)
    };
    if let Some(log) = &log {
        report.num_classes = Some(log.num_classes);
        report.probe_acc = first_probe_accuracy(log);
    }
    if let Some(property) = &cfg.property {
        report.majority = Some(majority(&ds, property)?);
        let table = per_label_accuracy(&ds, &dec, &amnesic, &rand, property)?;
        out.write(PER_LABEL_TSV, per_label_tsv(&table))?;
        report.per_label = Some(table);
    }
    out.write_report(&RunReport::new(&cfg.command, vec![report]))
}

fn cmd_selectivity(cfg: &ExperimentConfig, out: &Output) -> Result<()> {
    let property = cfg.property()?;
    let paths = primary_paths(cfg)?;
    let ds = load(&paths)?;
    let dec = load_decoder(&ds, &paths)?;
    let amnesic = match &cfg.projection {
        Some(p) => load_projection(p)?.0,
        None => Projection::identity(ds.dim()),
    };
    let projected = ds.with_reps(apply_projection(&amnesic, &ds.reps)?)?;
    let result = run_selectivity(&projected, property, &dec, &cfg.selectivity_config())?;
    result.save_property_embeddings(out.path("property_embeddings.repd"))?;
    let report = AmnesicReport {
        removed_dirs: Some(amnesic.removed()),
        vanilla_acc: Some(lm_accuracy(&ds, &dec, None)?),
        amnesic_acc: Some(lm_accuracy(&projected, &dec, None)?),
        selectivity_acc: Some(result.outcome.restored_accuracy),
        selectivity: Some(result.outcome.clone()),
        ..AmnesicReport::new(property)
    };
    out.write_report(&RunReport::new(&cfg.command, vec![report]))
}

fn cmd_label_vs_rest(cfg: &ExperimentConfig, out: &Output) -> Result<()> {
    let property = cfg.property()?;
    let (train, dev, paths) = train_dev(cfg)?;
    let (eval_ds, eval_paths) = match &cfg.eval {
        Some(e) => {
            let p = DatasetPaths::from_reps(e);
            (load(&p)?, p)
        }
        None => (dev.clone(), paths),
    };
    let dec = load_decoder(&eval_ds, &eval_paths)?;
    let present = label_stats(train.property(property)?)?.label_counts;
    let labels: Vec<String> = match &cfg.label {
        Some(l) => vec![l.clone()],
        None => {
            let declared = train.property_vocab(property).unwrap_or(&[]);
            let mut v: Vec<String> =
                declared.iter().filter(|l| present.contains_key(*l)).cloned().collect();
            v.extend(present.keys().filter(|l| !declared.contains(l)).cloned());
            v
        }
    };
    let lvr = LabelVsRestConfig {
        iterations: cfg.iterations.unwrap_or(LabelVsRestConfig::default().iterations),
        inlp: cfg.inlp_config(),
        rand_seed: cfg.rand_seed(),
    };
    let reports = labels
        .iter()
        .map(|l| label_vs_rest(&train, &dev, &eval_ds, &dec, property, l, &lvr))
        .collect::<amnesic::Result<Vec<_>>>()?;
    let run = RunReport::new(&cfg.command, reports).with("property", property);
    out.write_report(&run)
}

fn corpus_splits(
    cfg: &ExperimentConfig,
    corpus: &amnesic_encoder::SyntheticCorpus,
) -> Result<[amnesic_encoder::SyntheticCorpus; 3]> {
    let (rest, eval) = corpus.split(cfg.eval_fraction, cfg.split_seed())?;
    let (train, dev) = rest.split(cfg.dev_fraction, seed::derive(cfg.seed, stream::SPLIT, 1))?;
    let train = match cfg.max_train_sentences {
        Some(n) => train.head(n),
        None => train,
    };
    Ok([train, dev, eval])
}

fn cmd_layerwise(cfg: &ExperimentConfig, out: &Output) -> Result<()> {
    let property = cfg.property.as_deref().unwrap_or(TAG_PROPERTY);
    let enc = load_checkpoint(cfg.require(&cfg.checkpoint, "checkpoint")?)?;
    let corpus = read_corpus(cfg.require(&cfg.corpus, "corpus")?, Some(&enc.vocab))?;
    let [train, dev, eval] = corpus_splits(cfg, &corpus)?;
    let size = enc.num_layers() + 1;
    if let Some(l) = cfg.layer {
        if l >= size {
            return Err(CliError::config(format!("--layer {l} but the encoder has layers 0..={}", size - 1)));
        }
    }
    let train_layers = export_layers(&enc, &train, cfg.masked, None)?;
    let dev_layers = export_layers(&enc, &dev, cfg.masked, None)?;
    let inlp_cfg = cfg.inlp_config();
    let removals = (0..size)
        .map(|i| match cfg.layer {
            Some(l) if l != i => Ok(LayerRemoval::identity(i, enc.hidden())),
            _ => layer_removal(&train_layers[i], &dev_layers[i], i, property, &inlp_cfg, cfg.rand_seed()),
        })
        .collect::<amnesic_encoder::Result<Vec<_>>>()?;
    let selected = |i: usize| cfg.layer.map_or(true, |l| l == i);

    let proj_dir = out.path("projections");
    fs::create_dir_all(&proj_dir).map_err(|e| CliError::io(&proj_dir, e))?;
    for r in removals.iter().filter(|r| selected(r.layer)) {
        save_projection(
            &r.inlp.projection,
            Some(&r.inlp),
            out.path(&format!("projections/layer{}.repd", r.layer)),
        )?;
    }
    let mut csv = String::from("property,layer,iteration,dev_accuracy,train_accuracy,directions_added,cumulative_removed\n");
    for r in removals.iter().filter(|r| selected(r.layer)) {
        for it in &r.inlp.iterations {
            let _ = writeln!(
                csv,
                "{property},{},{},{:.6},{:.6},{},{}",
                r.layer, it.iteration, it.dev_accuracy, it.train_accuracy, it.directions_added, it.cumulative_removed
            );
        }
    }
    out.write(ITERATIONS_CSV, csv)?;

    let projections: Vec<Projection> = removals.iter().map(|r| r.inlp.projection.clone()).collect();
    let mut matrix =
        recoverability_matrix(&enc, &train, &eval, cfg.masked, property, &projections, &cfg.probe_config())?;
    for (i, row) in matrix.cells.iter_mut().enumerate() {
        if !selected(i) {
            row.iter_mut().for_each(|c| *c = None);
        }
    }
    out.write(RECOVERABILITY_CSV, matrix.to_csv())?;

    let chosen: Vec<LayerRemoval> = removals.into_iter().filter(|r| selected(r.layer)).collect();
    let impacts = layerwise_impact(&enc, &eval, cfg.masked, &chosen)?;
    out.write(LAYER_IMPACT_CSV, layer_impact_csv(&impacts))?;
    let run = RunReport::new(&cfg.command, Vec::new())
        .with("property", property)
        .with("masked", cfg.masked)
        .with("recoverability", &matrix)
        .with("layer_impact", &impacts)
        .with("max_delta_layer", max_delta_layer(&impacts));
    out.write_report(&run)
}

fn cmd_toy_train(cfg: &ExperimentConfig, out: &Output) -> Result<()> {
    let grammar = cfg.grammar()?;
    let corpus = build_synthetic_corpus(&grammar, cfg.corpus_seed())?;
    let (enc, train_report) = train_toy_mlm(&corpus, &cfg.encoder, &cfg.train_config())?;
    save_checkpoint(&enc, out.path("checkpoint"))?;
    write_corpus(&corpus, out.path("corpus.txt"))?;
    if let Some(l) = cfg.layer {
        if l > enc.num_layers() {
            return Err(CliError::config(format!("--layer {l} but the encoder has {} layers", enc.num_layers())));
        }
    }
    let (train, test) = corpus.split(cfg.eval_fraction, cfg.split_seed())?;
    for (name, part) in [("train", &train), ("test", &test)] {
        let mut layers = export_layers(&enc, part, cfg.masked, None)?;
        if let Some(l) = cfg.layer {
            layers = vec![layers.swap_remove(l)];
        }
        write_layer_datasets(&layers, &enc, out.path(&format!("layers/{name}")))?;
    }
    let run = RunReport::new(&cfg.command, Vec::new())
        .with("train", &train_report)
        .with("sentences", corpus.sentences.len())
        .with("tokens", corpus.num_tokens());
    out.write_report(&run)
}

/// Fills every empty field of `into` from `from`.
fn merge(into: &mut AmnesicReport, from: AmnesicReport) {
    macro_rules! fill {
        ($($f:ident),*) => { $( if into.$f.is_none() { into.$f = from.$f; } )* };
    }
    fill!(
        removed_dirs, num_classes, majority, probe_acc, vanilla_acc, rand_acc, selectivity_acc,
        amnesic_acc, mean_kl_rand, mean_kl_amnesic, per_label, selectivity
    );
}

/// Concatenates one CSV/TSV artifact across runs, prefixed by a run column.
fn concat_artifact(inputs: &[PathBuf], name: &str, sep: char) -> Result<Option<String>> {
    let mut header: Option<String> = None;
    let mut body = String::new();
    for dir in inputs {
        let path = dir.join(name);
        if !path.exists() {
            continue;
        }
        let text = fs::read_to_string(&path).map_err(|e| CliError::io(&path, e))?;
        let mut lines = text.lines();
        let h = lines.next().unwrap_or_default().to_string();
        match &header {
            None => header = Some(h),
            Some(prev) if *prev != h => {
                return Err(CliError::config_at(format!("{name} columns differ from earlier inputs"), path))
            }
            _ => {}
        }
        let run = run_name(dir);
        for line in lines {
            let _ = writeln!(body, "{run}{sep}{line}");
        }
    }
    Ok(header.map(|h| format!("run{sep}{h}\n{body}")))
}

fn run_name(dir: &Path) -> String {
    dir.file_name()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_else(|| dir.display().to_string())
}

fn cmd_report(cfg: &ExperimentConfig, out: &Output) -> Result<()> {
    if cfg.inputs.is_empty() && cfg.reps.is_none() {
        return Err(CliError::config("report needs --input directories or --reps"));
    }
    let mut merged: BTreeMap<String, AmnesicReport> = BTreeMap::new();
    let mut order: Vec<String> = Vec::new();
    let mut add = |r: AmnesicReport| match merged.get_mut(&r.property) {
        Some(existing) => merge(existing, r),
        None => {
            order.push(r.property.clone());
            merged.insert(r.property.clone(), r);
        }
    };
    if cfg.reps.is_some() {
        let paths = primary_paths(cfg)?;
        let ds = load(&paths)?;
        let dec = load_decoder(&ds, &paths)?;
        let name = cfg.property.clone().unwrap_or_else(|| "vanilla".to_string());
        let mut r = AmnesicReport {
            vanilla_acc: Some(lm_accuracy(&ds, &dec, None)?),
            ..AmnesicReport::new(name)
        };
        if let Some(p) = &cfg.property {
            r.majority = Some(majority(&ds, p)?);
        }
        add(r);
    }
    for dir in &cfg.inputs {
        if !dir.join(REPORT_JSON).exists() {
            return Err(CliError::config_at("input directory has no report.json", dir));
        }
        for r in read_report(dir)?.reports {
            add(r);
        }
    }
    let reports: Vec<AmnesicReport> = order.iter().map(|p| merged.remove(p).expect("inserted")).collect();
    for (name, sep) in [
        (ITERATIONS_CSV, ','),
        (RECOVERABILITY_CSV, ','),
        (LAYER_IMPACT_CSV, ','),
        (PER_LABEL_TSV, '\t'),
    ] {
        if let Some(text) = concat_artifact(&cfg.inputs, name, sep)? {
            out.write(name, text)?;
        }
    }
    let runs: Vec<String> = cfg.inputs.iter().map(|d| run_name(d)).collect();
    out.write_report(&RunReport::new(&cfg.command, reports).with("runs", runs))
}
