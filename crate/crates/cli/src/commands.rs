use std::collections::{BTreeMap, HashMap};
use std::path::{Path, PathBuf};

use anyhow::{anyhow, bail, Context, Result};
use clap::Parser;
use derail_core::backend::external::ExternalBackend;
use derail_core::backend::{
    presets, AnnotationBackend, BigramGenerator, BowClassifier, ClassifierBackend, FixedLabelAnnotator,
    GeneratorBackend, ScriptedAnnotator,
};
use derail_core::classifier::{augment_training_set, train_derailment_classifier, AugmentConfig};
use derail_core::derive_seed;
use derail_core::eval::experiments::{
    ablate_prefix_length, ablate_vote_count, measure_diversity, run_motivation_experiment,
};
use derail_core::eval::metrics::{markdown_table, MetricsRow};
use derail_core::eval::{compute_metrics, two_proportion_z_test};
use derail_core::forecast::{forecast_batch, ForecastRecord, PrefixPolicy};
use derail_core::generator::{build_training_pairs, sample_continuations, train_bigram_generator, KPolicy, SamplingConfig};
use derail_core::ingest::{
    load_bnc, load_canonical, load_cga_wiki, read_jsonl, save_canonical, split_dataset, write_jsonl, Dataset, Split,
    SplitSpec,
};
use derail_core::orientation::{annotate_conversation, AnnotationPromptTemplate, PLACEHOLDER};
use derail_core::synthetic::{planted_corpus, PlantedConfig};
use derail_core::Conversation;
use serde::Serialize;

use crate::config::RunConfig;
use crate::manifest::{digest_all, manifest_path_for, mismatches, Manifest};
use crate::{resolve_config, usage, AblateKind, Cli, Command, DatasetKind, RunRecord};

pub fn run(cli: Cli, args: Vec<String>) -> Result<()> {
    if let Command::Replay { manifest } = &cli.command {
        return replay(manifest);
    }
    let config = resolve_config(&cli.global)?;
    let (record, primary) = execute(&cli.command, &config)?;
    let path = cli.global.manifest.clone().unwrap_or_else(|| manifest_path_for(&primary));
    let manifest = Manifest {
        tool: "derail".into(),
        version: env!("CARGO_PKG_VERSION").into(),
        command: command_name(&cli.command).into(),
        args,
        cwd: std::env::current_dir()?.display().to_string(),
        config_hash: config.hash(),
        config: serde_json::to_value(&config)?,
        seeds: record.seeds,
        inputs: digest_all(&record.inputs)?,
        outputs: digest_all(&record.outputs)?,
    };
    manifest.write(&path)
}

fn command_name(c: &Command) -> &'static str {
    match c {
        Command::Ingest { .. } => "ingest",
        Command::Synth { .. } => "synth",
        Command::Annotate { .. } => "annotate",
        Command::TrainGenerator { .. } => "train-generator",
        Command::TrainClassifier { .. } => "train-classifier",
        Command::Generate { .. } => "generate",
        Command::Forecast { .. } => "forecast",
        Command::Evaluate { .. } => "evaluate",
        Command::Ablate { kind: AblateKind::Votes { .. } } => "ablate-votes",
        Command::Ablate { kind: AblateKind::Prefix { .. } } => "ablate-prefix",
        Command::Diversity { .. } => "diversity",
        Command::Motivation { .. } => "motivation",
        Command::Replay { .. } => "replay",
        Command::Presets { .. } => "presets",
    }
}

fn replay(path: &Path) -> Result<()> {
    if !path.is_file() {
        return Err(usage(format!("manifest {} does not exist", path.display())));
    }
    let m = Manifest::read(path).map_err(|e| usage(format!("{e:#}")))?;
    std::env::set_current_dir(&m.cwd).with_context(|| format!("entering {}", m.cwd))?;
    let changed = mismatches(&m.inputs, Path::new(""));
    if !changed.is_empty() {
        bail!("inputs differ from the manifest:\n  {}", changed.join("\n  "));
    }
    let cli = Cli::try_parse_from(std::iter::once("derail".to_string()).chain(m.args.iter().cloned()))
        .map_err(|e| usage(format!("manifest arguments do not parse: {e}")))?;
    let config = resolve_config(&cli.global)?;
    if config.hash() != m.config_hash {
        bail!("resolved configuration differs from the manifest (config file changed?)");
    }
    execute(&cli.command, &config)?;
    let diff = mismatches(&m.outputs, Path::new(""));
    if !diff.is_empty() {
        bail!("replay produced different outputs:\n  {}", diff.join("\n  "));
    }
    eprintln!("replay ok: {} outputs byte-identical", m.outputs.len());
    Ok(())
}

fn require_file(p: &Path) -> Result<()> {
    if p.is_file() {
        Ok(())
    } else {
        Err(usage(format!("input {} does not exist", p.display())))
    }
}

fn write_json<T: Serialize + ?Sized>(path: &Path, value: &T) -> Result<()> {
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        std::fs::create_dir_all(parent)?;
    }
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    std::fs::write(path, text).with_context(|| format!("writing {}", path.display()))
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        std::fs::create_dir_all(parent)?;
    }
    std::fs::write(path, text).with_context(|| format!("writing {}", path.display()))
}

fn sidecar(path: &Path, suffix: &str) -> PathBuf {
    let mut name = path.file_name().map(|n| n.to_os_string()).unwrap_or_default();
    name.push(suffix);
    path.with_file_name(name)
}

fn load_dataset(path: &Path, rec: &mut RunRecord) -> Result<Vec<Conversation>> {
    require_file(path)?;
    rec.inputs.push(path.to_path_buf());
    let name = path.file_stem().and_then(|s| s.to_str()).unwrap_or("dataset");
    Ok(load_canonical(path, name, None)?.conversations)
}

fn external(spec: &str) -> Option<Result<ExternalBackend>> {
    let cmd = spec.strip_prefix("external:")?;
    let mut parts = cmd.split_whitespace();
    let program = parts.next()?;
    let args: Vec<String> = parts.map(str::to_string).collect();
    Some(ExternalBackend::spawn(program, &args).map_err(anyhow::Error::from))
}

fn load_model<T: serde::de::DeserializeOwned>(path: &Path, rec: &mut RunRecord) -> Result<T> {
    require_file(path)?;
    rec.inputs.push(path.to_path_buf());
    let text = std::fs::read_to_string(path)?;
    serde_json::from_str(&text).with_context(|| format!("parsing model {}", path.display()))
}

fn load_generator(spec: &str, config: &RunConfig, rec: &mut RunRecord) -> Result<Box<dyn GeneratorBackend>> {
    if let Some(ext) = external(spec) {
        return Ok(Box::new(ext?));
    }
    let g: BigramGenerator = load_model(Path::new(spec), rec)?;
    Ok(Box::new(g.with_context_capacity(config.generator.context_capacity)))
}

fn load_classifier(spec: &str, rec: &mut RunRecord) -> Result<Box<dyn ClassifierBackend>> {
    if let Some(ext) = external(spec) {
        return Ok(Box::new(ext?));
    }
    let f: BowClassifier = load_model(Path::new(spec), rec)?;
    Ok(Box::new(f))
}

fn parse_list<T: std::str::FromStr>(s: &str, what: &str) -> Result<Vec<T>> {
    s.split(',')
        .map(|x| x.trim().parse::<T>().map_err(|_| usage(format!("bad {what} value {x:?}"))))
        .collect()
}

fn execute(command: &Command, config: &RunConfig) -> Result<(RunRecord, PathBuf)> {
    let mut rec = RunRecord::default();
    rec.seeds.insert("seed".into(), config.seed);
    let primary = match command {
        Command::Ingest { dataset, input, output_dir, split_seed, ratios } => {
            require_file(input)?;
            rec.inputs.push(input.clone());
            let (splits, report) = match dataset {
                DatasetKind::CgaWiki => load_cga_wiki(input)?,
                DatasetKind::Bnc => {
                    let ratios = match ratios {
                        Some(r) => {
                            let v: Vec<f64> = parse_list(r, "ratio")?;
                            <[f64; 3]>::try_from(v).map_err(|_| usage("--ratios needs three values"))?
                        }
                        None => config.split.ratios,
                    };
                    let seed = split_seed.unwrap_or(config.split.seed);
                    rec.seeds.insert("split_seed".into(), seed);
                    let spec = SplitSpec::new(ratios, seed).map_err(|e| usage(e.to_string()))?;
                    let (d, report) = load_bnc(input)?;
                    (split_dataset(&d, &spec)?, report)
                }
            };
            for split in Split::ALL {
                let p = output_dir.join(format!("{split}.jsonl"));
                let d = splits.get(&split).cloned().unwrap_or_else(|| Dataset::new("empty", Some(split), Vec::new()));
                save_canonical(&p, &d)?;
                rec.outputs.push(p);
            }
            let rp = output_dir.join("load_report.json");
            write_json(&rp, &report)?;
            rec.outputs.push(rp);
            output_dir.join("ingest")
        }
        Command::Synth { output_dir, train, validation, test, prefix_len } => {
            if *prefix_len == 0 {
                return Err(usage("--prefix-len must be >= 1"));
            }
            for (name, n) in [("train", *train), ("validation", *validation), ("test", *test)] {
                let seed = derive_seed(config.seed, name);
                rec.seeds.insert(format!("{name}_seed"), seed);
                let convs = planted_corpus(&PlantedConfig {
                    conversations: n,
                    prefix_len: *prefix_len,
                    seed,
                    id_prefix: name.into(),
                    ..PlantedConfig::default()
                });
                let p = output_dir.join(format!("{name}.jsonl"));
                write_jsonl(&p, &convs)?;
                rec.outputs.push(p);
            }
            output_dir.join("synth")
        }
        Command::Annotate { input, template, backend, output, resume } => {
            annotate(input, template.as_deref(), backend, output, *resume, config, &mut rec)?;
            output.clone()
        }
        Command::TrainGenerator { train, output } => {
            let d = load_dataset(train, &mut rec)?;
            let policy = config.generator.fixed_k.map_or(KPolicy::GoldPrefix, KPolicy::FixedK);
            let (pairs, report) = build_training_pairs(&d, &config.scheme, policy)?;
            log::info!("training pairs: {report:?}");
            if pairs.is_empty() {
                bail!("no usable training pairs ({} too short, {} missing labels)", report.too_short, report.missing_labels);
            }
            let g = train_bigram_generator(&pairs, &config.scheme)?.with_context_capacity(config.generator.context_capacity);
            write_json(output, &g)?;
            rec.outputs.push(output.clone());
            output.clone()
        }
        Command::TrainClassifier { train, generator, output, augmented } => {
            let d = load_dataset(train, &mut rec)?;
            let g = load_generator(generator, config, &mut rec)?;
            let aug = AugmentConfig {
                l: config.augment.l,
                params: config.params()?,
                scheme: config.scheme.clone(),
                seed: config.seed,
                max_turns_cap: config.forecast.max_turns_cap,
            };
            let (examples, augment_report) = augment_training_set(&d, g.as_ref(), &aug)?;
            let (clf, training_report) =
                train_derailment_classifier(BowClassifier::new(config.classifier.clone()), &examples)?;
            write_json(output, &clf)?;
            rec.outputs.push(output.clone());
            let rp = sidecar(output, ".report.json");
            write_json(&rp, &serde_json::json!({ "augmentation": augment_report, "training": training_report }))?;
            rec.outputs.push(rp);
            if let Some(p) = augmented {
                write_jsonl(p, &examples)?;
                rec.outputs.push(p.clone());
            }
            output.clone()
        }
        Command::Generate { input, generator, output, k } => {
            let d = load_dataset(input, &mut rec)?;
            let g = load_generator(generator, config, &mut rec)?;
            let fc = config.forecast_config()?;
            let mut sets = Vec::with_capacity(d.len());
            for c in &d {
                let sampling = SamplingConfig {
                    samples: fc.samples,
                    params: fc.params.clone(),
                    scheme: fc.scheme.clone(),
                    seed: derive_seed(config.seed, &c.id),
                    max_turns_cap: fc.max_turns_cap,
                };
                match sample_continuations(g.as_ref(), c, k.unwrap_or(c.prefix_len), &sampling) {
                    Ok(s) => sets.push(s.set),
                    Err(e) => log::warn!("skipping {}: {e}", c.id),
                }
            }
            write_jsonl(output, &sets)?;
            rec.outputs.push(output.clone());
            output.clone()
        }
        Command::Forecast { input, generator, classifier, output, report, k } => {
            let d = load_dataset(input, &mut rec)?;
            let g = load_generator(generator, config, &mut rec)?;
            let f = load_classifier(classifier, &mut rec)?;
            let policy = k.map_or(PrefixPolicy::Gold, PrefixPolicy::Fixed);
            let batch = forecast_batch(&d, policy, g.as_ref(), f.as_ref(), &config.forecast_config()?);
            for s in &batch.report.skipped {
                log::warn!("skipped {}: {}", s.conversation_id, s.error);
            }
            write_jsonl(output, &batch.records)?;
            rec.outputs.push(output.clone());
            if let Some(p) = report {
                write_json(p, &batch.report)?;
                rec.outputs.push(p.clone());
            }
            if batch.records.is_empty() && !d.is_empty() {
                bail!("every forecast failed; first error: {}", batch.report.skipped[0].error);
            }
            output.clone()
        }
        Command::Evaluate { forecasts, baseline, output, json } => {
            evaluate(forecasts, baseline.as_deref(), output, json.as_deref(), config, &mut rec)?;
            output.clone()
        }
        Command::Ablate { kind } => match kind {
            AblateKind::Votes { input, generator, classifier, output, l_values } => {
                let d = load_dataset(input, &mut rec)?;
                let g = load_generator(generator, config, &mut rec)?;
                let f = load_classifier(classifier, &mut rec)?;
                let ls = match l_values {
                    Some(s) => parse_list(s, "L")?,
                    None => config.eval.l_values.clone(),
                };
                let rows = ablate_vote_count(&d, g.as_ref(), f.as_ref(), &config.forecast_config()?, &ls)
                    .map_err(|e| match e {
                        derail_core::eval::experiments::ExperimentError::Argument(m) => usage(m),
                        other => other.into(),
                    })?;
                write_json(output, &rows)?;
                rec.outputs.push(output.clone());
                output.clone()
            }
            AblateKind::Prefix { input, generator, classifier, output, k_values } => {
                let d = load_dataset(input, &mut rec)?;
                let g = load_generator(generator, config, &mut rec)?;
                let f = load_classifier(classifier, &mut rec)?;
                let ks = match k_values {
                    Some(s) => parse_list(s, "k")?,
                    None => config.eval.k_values.clone(),
                };
                let rows = ablate_prefix_length(&d, g.as_ref(), f.as_ref(), &config.forecast_config()?, &ks)?;
                write_json(output, &rows)?;
                rec.outputs.push(output.clone());
                output.clone()
            }
        },
        Command::Diversity { input, generator, output } => {
            let d = load_dataset(input, &mut rec)?;
            let g = load_generator(generator, config, &mut rec)?;
            let report = measure_diversity(&d, g.as_ref(), &config.forecast_config()?, &config.eval.bleu)?;
            write_json(output, &report)?;
            rec.outputs.push(output.clone());
            output.clone()
        }
        Command::Motivation { train, test, output } => {
            let tr = load_dataset(train, &mut rec)?;
            let te = load_dataset(test, &mut rec)?;
            let report = run_motivation_experiment(&tr, &te, &config.classifier, &config.scheme)?;
            write_json(output, &report)?;
            rec.outputs.push(output.clone());
            output.clone()
        }
        Command::Presets { output } => {
            write_json(
                output,
                &serde_json::json!({
                    "generator_finetune": presets::generator_finetune(),
                    "bart_classifier": presets::bart_classifier(),
                    "mistral_classifier": presets::mistral_classifier(),
                    "generator_sampling": presets::generator_sampling(),
                }),
            )?;
            rec.outputs.push(output.clone());
            output.clone()
        }
        Command::Replay { .. } => unreachable!("handled by run"),
    };
    Ok((rec, primary))
}

#[derive(Serialize)]
struct AnnotationFailure {
    conversation_id: String,
    error: String,
}

fn annotation_backend(spec: &str) -> Result<Box<dyn AnnotationBackend>> {
    match spec {
        "stub-neutral" => Ok(Box::new(FixedLabelAnnotator::neutral())),
        "stub-garbage" => Ok(Box::new(ScriptedAnnotator::new(vec![Ok("I am not able to label these comments.".into())]))),
        other => match external(other) {
            Some(b) => Ok(Box::new(b?)),
            None => Err(usage(format!("unknown annotation backend {other:?}"))),
        },
    }
}

fn annotate(
    input: &Path,
    template: Option<&Path>,
    backend: &str,
    output: &Path,
    resume: bool,
    config: &RunConfig,
    rec: &mut RunRecord,
) -> Result<()> {
    let d = load_dataset(input, rec)?;
    let template = match template {
        Some(p) => {
            require_file(p)?;
            rec.inputs.push(p.to_path_buf());
            let t = AnnotationPromptTemplate::from_file(p).map_err(|e| usage(e.to_string()))?;
            if !t.preamble.contains(PLACEHOLDER) && t.placeholder == PLACEHOLDER {
                return Err(usage(format!("template has no {PLACEHOLDER} placeholder")));
            }
            t
        }
        None => AnnotationPromptTemplate::default(),
    };
    let done: HashMap<String, Conversation> = if resume && output.is_file() {
        read_jsonl::<Conversation>(output)?
            .into_iter()
            .filter(|c| c.turns.iter().all(|t| t.orientation.is_some()))
            .map(|c| (c.id.clone(), c))
            .collect()
    } else {
        HashMap::new()
    };
    let b = annotation_backend(backend)?;
    let mut out = Vec::with_capacity(d.len());
    let mut failures = Vec::new();
    let mut attempted = 0;
    for c in &d {
        if let Some(prev) = done.get(&c.id) {
            out.push(prev.clone());
            continue;
        }
        attempted += 1;
        match annotate_conversation(b.as_ref(), &template, c, config.annotation.max_retries) {
            Ok(labeled) => out.push(labeled),
            Err(e) => {
                log::warn!("annotation failed for {}: {e}", c.id);
                failures.push(AnnotationFailure { conversation_id: c.id.clone(), error: e.to_string() });
                out.push(c.clone());
            }
        }
    }
    write_jsonl(output, &out)?;
    rec.outputs.push(output.to_path_buf());
    let side = sidecar(output, ".failures.json");
    write_json(&side, &failures)?;
    rec.outputs.push(side);
    if attempted > 0 && failures.len() == attempted {
        bail!("all {attempted} annotation requests failed; see the failures report");
    }
    Ok(())
}

fn evaluate(
    forecasts: &Path,
    baseline: Option<&Path>,
    output: &Path,
    json: Option<&Path>,
    config: &RunConfig,
    rec: &mut RunRecord,
) -> Result<()> {
    let load = |p: &Path, rec: &mut RunRecord| -> Result<Vec<ForecastRecord>> {
        require_file(p)?;
        rec.inputs.push(p.to_path_buf());
        Ok(read_jsonl(p)?)
    };
    let metrics_of = |r: &[ForecastRecord]| {
        let preds: Vec<bool> = r.iter().map(|x| x.final_label).collect();
        let golds: Vec<bool> = r.iter().map(|x| x.gold).collect();
        compute_metrics(&preds, &golds).map_err(|e| anyhow!("{e}"))
    };
    let name = |p: &Path| p.file_stem().and_then(|s| s.to_str()).unwrap_or("forecast").to_string();

    let main = metrics_of(&load(forecasts, rec)?)?;
    let mut rows = Vec::new();
    let mut summary = BTreeMap::new();
    let mut note = String::new();
    let mut marker = None;
    if let Some(b) = baseline {
        let base = metrics_of(&load(b, rec)?)?;
        let z = two_proportion_z_test(main.accuracy, main.n, base.accuracy, base.n, config.eval.sided)?;
        marker = z.marker().map(str::to_string);
        note = format!(
            "\nz = {:.4}, p = {:.4} ({}); * marks p < 0.1\n",
            z.z,
            z.p_value,
            serde_json::to_value(z.sided)?.as_str().unwrap_or("")
        );
        rows.push(MetricsRow { method: name(b), metrics: base, marker: None });
        summary.insert("baseline", serde_json::to_value(base)?);
        summary.insert("z_test", serde_json::to_value(z)?);
    }
    rows.push(MetricsRow { method: name(forecasts), metrics: main, marker });
    summary.insert("forecast", serde_json::to_value(main)?);
    write_text(output, &format!("{}{note}", markdown_table(&rows)))?;
    rec.outputs.push(output.to_path_buf());
    if let Some(j) = json {
        write_json(j, &summary)?;
        rec.outputs.push(j.to_path_buf());
    }
    Ok(())
}

