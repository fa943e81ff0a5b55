//! `pmoe`: data generation, training, evaluation, routing analytics and
//! self-checks for the Point-MoE reference implementation.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{CommandFactory, FromArgMatches, Parser, Subcommand};
use serde_json::{json, Map, Value};

use pointmoe::analytics::{
    collect_distributions, expert_class_matrix, export_features, jsd_report, parse_lineage, pathways, records_from_rows,
    route_scenes, stage_means, write_features, write_jsd_csv, write_pathway_csv, write_routing_log, DistributionKind,
    ExpertClassMatrix, FeatureStage, JsdRow, TrackedLog,
};
use pointmoe::blocks::{Model, ModelVariant};
use pointmoe::checkpoint::Checkpoint;
use pointmoe::config::{key_help, RunConfig};
use pointmoe::langhead::ClassEmbeddingTable;
use pointmoe::moe::parse_routing_csv;
use pointmoe::syndata::{PointCloud, Registry};
use pointmoe::train::classifier::descriptors;
use pointmoe::train::{evaluate, prior_baseline_miou, train_dataset_classifier, DatasetClassifier, Trainer};
use pointmoe::{Error, Result};

#[derive(Parser)]
#[command(name = "pmoe", version, about = "Sparse mixture-of-experts point cloud segmentation")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(clap::Args, Clone)]
struct ConfigArgs {
    /// Config file of `key = value` lines.
    #[arg(long)]
    config: Option<PathBuf>,
    /// `key=value` overrides, applied after the config file and PMOE_SEED.
    #[arg(long = "override", value_name = "KEY=VALUE", num_args = 1..)]
    overrides: Vec<String>,
}

#[derive(Subcommand)]
enum Command {
    /// Write scene dumps of every dataset split and the class embedding table.
    GenData {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train a model; writes config.txt, metrics.jsonl and checkpoints.
    Train {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long)]
        out: PathBuf,
    },
    /// Evaluate a checkpoint on every dataset, including held-out ones.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        /// Only eval.*, embed.* and analyze.* keys may be overridden.
        #[arg(long = "override", value_name = "KEY=VALUE", num_args = 1..)]
        overrides: Vec<String>,
        /// Metrics JSON (default: eval.json next to the checkpoint).
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Routing analytics from a checkpoint or from a routing log.
    Analyze {
        #[arg(long, conflicts_with = "log", required_unless_present = "log")]
        checkpoint: Option<PathBuf>,
        /// Routing CSV; pathways and co-occurrence need its lineage sidecar.
        #[arg(long)]
        log: Option<PathBuf>,
        /// Lineage sidecar (default: the log path with extension `lineage`).
        #[arg(long, requires = "log")]
        lineage: Option<PathBuf>,
        #[command(flatten)]
        cfg: ConfigArgs,
        /// Also export per-token features of this stage (encoder_out | decoder_out).
        #[arg(long, requires = "checkpoint")]
        features: Option<String>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Run the gradient check and the oracle suites.
    Selfcheck,
}

fn main() -> ExitCode {
    let keys = key_help();
    let cmd = Cli::command()
        .after_help(keys.clone())
        .mut_subcommands(|s| s.after_help(keys.clone()));
    let matches = match cmd.try_get_matches() {
        Ok(m) => m,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    let cli = match Cli::from_arg_matches(&matches) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(1);
        }
    };
    match run(cli.command) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(if e.is_validation() { 1 } else { 2 })
        }
    }
}

fn run(cmd: Command) -> Result<ExitCode> {
    match cmd {
        Command::GenData { cfg, out } => gen_data(&load_config(&cfg)?, &out),
        Command::Train { cfg, out } => train(&load_config(&cfg)?, &out),
        Command::Eval {
            checkpoint,
            overrides,
            out,
        } => eval(&checkpoint, &overrides, out),
        Command::Analyze {
            checkpoint,
            log,
            lineage,
            cfg,
            features,
            out,
        } => match (checkpoint, log) {
            (Some(ck), _) => analyze_checkpoint(&ck, &cfg.overrides, features.as_deref(), &out),
            (None, Some(log)) => analyze_log(&load_config(&cfg)?, &log, lineage, &out),
            (None, None) => Err(Error::Config("analyze needs --checkpoint or --log".into())),
        },
        Command::Selfcheck => Ok(selfcheck()),
    }
}

fn load_config(args: &ConfigArgs) -> Result<RunConfig> {
    let mut c = match &args.config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    c.apply_env()?;
    for o in &args.overrides {
        c.apply(o)?;
    }
    c.validate()?;
    Ok(c)
}

fn create_dir(p: &Path) -> Result<()> {
    std::fs::create_dir_all(p).map_err(|e| Error::io(p, e))
}

fn write(p: &Path, text: impl AsRef<[u8]>) -> Result<()> {
    std::fs::write(p, text).map_err(|e| Error::io(p, e))
}

fn gen_data(cfg: &RunConfig, out: &Path) -> Result<ExitCode> {
    let registry = Registry::new(&cfg.datasets()?)?;
    let table = cfg.embeddings()?;
    create_dir(out)?;
    write(&out.join("embeddings.txt"), table.to_text())?;
    for d in &registry.datasets {
        for (split, seeds, scenes) in [("train", &d.train_seeds, &d.train), ("val", &d.val_seeds, &d.val)] {
            let dir = out.join(&d.spec.name).join(split);
            create_dir(&dir)?;
            for (seed, scene) in seeds.iter().zip(scenes) {
                scene.save_dump(&dir.join(format!("scene_{seed:04}.txt")))?;
            }
        }
        println!(
            "{}: {} train, {} val scenes, classes {}",
            d.spec.name,
            d.train.len(),
            d.val.len(),
            d.spec.label_space.classes.join(",")
        );
    }
    Ok(ExitCode::SUCCESS)
}

fn train(cfg: &RunConfig, out: &Path) -> Result<ExitCode> {
    let registry = Registry::new(&cfg.datasets()?)?;
    let table = cfg.embeddings()?;
    let n_train = registry.training().len();
    let seed = cfg.seed()?;
    let model = Model::new(cfg.network(n_train)?, seed)?;
    let tcfg = cfg.train()?;
    let every: usize = cfg.get("train.checkpoint_every")?;
    let classifier = if n_train >= 2 {
        Some(train_dataset_classifier(&registry, &cfg.classifier()?)?)
    } else {
        None
    };
    let mut trainer = Trainer::new(model, tcfg.clone(), cfg.plan(n_train)?, &registry, &table)?;
    create_dir(out)?;
    write(&out.join("config.txt"), cfg.to_text())?;
    let metrics_path = out.join("metrics.jsonl");
    let mut metrics = String::new();
    let print_every = (tcfg.total_steps / 20).max(1);
    let checkpoint = |t: &Trainer, step: usize| Checkpoint {
        config: cfg.clone(),
        step,
        model: t.model.clone(),
        classifier: classifier.clone(),
    };
    trainer.run(&registry, 0, |t, log| {
        metrics.push_str(&log.to_json());
        metrics.push('\n');
        let done = log.step + 1;
        if done % print_every == 0 || done == tcfg.total_steps {
            let per: Vec<String> = log.per_dataset.iter().map(|(k, v)| format!("{k} {v:.3}")).collect();
            println!(
                "step {done:>6}/{}  loss {:.4}  lr {:.2e}  aux {:.4}  batch mIoU: {}",
                tcfg.total_steps,
                log.loss,
                log.lr,
                log.aux_loss,
                per.join(", ")
            );
        }
        if every > 0 && done % every == 0 && done < tcfg.total_steps {
            checkpoint(t, done).save(&out.join(format!("checkpoint_{done:06}.pmoe")))?;
        }
        Ok(())
    })?;
    write(&metrics_path, &metrics)?;
    let final_path = out.join("model.pmoe");
    checkpoint(&trainer, tcfg.total_steps).save(&final_path)?;
    println!("wrote {}", final_path.display());
    Ok(ExitCode::SUCCESS)
}

/// Config of a checkpoint with post-training overrides applied.
fn checkpoint_config(ck: &Checkpoint, overrides: &[String]) -> Result<RunConfig> {
    let mut c = ck.config.clone();
    for o in overrides {
        let key = o.split('=').next().unwrap_or("").trim();
        if !["eval.", "embed.", "analyze."].iter().any(|p| key.starts_with(p)) {
            return Err(Error::Config(format!(
                "{key} is fixed by the checkpoint; only eval.*, embed.* and analyze.* may be overridden"
            )));
        }
        c.apply(o)?;
    }
    c.validate()?;
    Ok(c)
}

/// Scenes evaluated per dataset: validation scenes of training datasets,
/// every scene of held-out ones.
fn eval_scenes(d: &pointmoe::syndata::Dataset) -> Vec<PointCloud> {
    if d.spec.held_out {
        d.train.iter().chain(&d.val).cloned().collect()
    } else {
        d.val.clone()
    }
}

fn norm_tables(model: &Model, classifier: Option<&DatasetClassifier>, scenes: &[PointCloud]) -> Result<Option<Vec<usize>>> {
    if model.config.variant != ModelVariant::ConditionedNorm {
        return Ok(None);
    }
    let clf = classifier.ok_or_else(|| Error::Consistency("conditioned_norm checkpoint has no dataset classifier".into()))?;
    scenes.iter().map(|c| clf.predict(c)).collect::<Result<Vec<_>>>().map(Some)
}

fn eval(path: &Path, overrides: &[String], out: Option<PathBuf>) -> Result<ExitCode> {
    let ck = Checkpoint::load(path)?;
    let cfg = checkpoint_config(&ck, overrides)?;
    let registry = Registry::new(&cfg.datasets()?)?;
    let table = cfg.embeddings()?;
    let frag: usize = cfg.get("eval.fragment_voxels")?;
    let scale: f64 = cfg.get("train.logit_scale")?;
    let mut report = Map::new();
    let name = path.file_name().map_or(String::new(), |n| n.to_string_lossy().into_owned());
    report.insert("checkpoint".into(), json!(name));
    report.insert("step".into(), json!(ck.step));
    let mut datasets = Map::new();
    println!("{:<10} {:>7} {:>8} {:>9} {:>7}", "dataset", "scenes", "mIoU", "accuracy", "prior");
    for d in &registry.datasets {
        let scenes = eval_scenes(d);
        let tables = norm_tables(&ck.model, ck.classifier.as_ref(), &scenes)?;
        let m = evaluate(&ck.model, &scenes, &d.spec.label_space, &table, scale, tables.as_deref(), frag)?;
        let prior = prior_baseline_miou(&scenes, d.spec.label_space.len())?;
        println!(
            "{:<10} {:>7} {:>8.4} {:>9.4} {:>7.4}{}",
            d.spec.name,
            scenes.len(),
            m.miou,
            m.accuracy,
            prior,
            if d.spec.held_out { "  (held out)" } else { "" }
        );
        let iou: Map<String, Value> = m
            .classes
            .iter()
            .zip(&m.iou)
            .map(|(c, v)| (c.clone(), v.map_or(Value::Null, |x| json!(x))))
            .collect();
        datasets.insert(
            d.spec.name.clone(),
            json!({
                "held_out": d.spec.held_out,
                "scenes": scenes.len(),
                "miou": m.miou,
                "accuracy": m.accuracy,
                "iou": iou,
                "prior_baseline_miou": prior,
            }),
        );
    }
    report.insert("datasets".into(), Value::Object(datasets));
    if let Some(clf) = &ck.classifier {
        let (x, y) = descriptors(&registry, true)?;
        let acc = clf.accuracy(&x, &y);
        println!("dataset classifier accuracy on validation scenes: {acc:.4}");
        report.insert("classifier_accuracy".into(), json!(acc));
    }
    let out = out.unwrap_or_else(|| path.with_file_name("eval.json"));
    write(&out, serde_json::to_string_pretty(&Value::Object(report)).expect("plain data") + "\n")?;
    println!("wrote {}", out.display());
    Ok(ExitCode::SUCCESS)
}

/// Union of the training datasets' class names, in first-seen order.
fn union_classes(registry: &Registry) -> Vec<String> {
    let mut out: Vec<String> = Vec::new();
    for d in registry.training() {
        for c in &d.spec.label_space.classes {
            if !out.contains(c) {
                out.push(c.clone());
            }
        }
    }
    out
}

fn analyze_checkpoint(path: &Path, overrides: &[String], features: Option<&str>, out: &Path) -> Result<ExitCode> {
    let ck = Checkpoint::load(path)?;
    let cfg = checkpoint_config(&ck, overrides)?;
    let registry = Registry::new(&cfg.datasets()?)?;
    let table: ClassEmbeddingTable = cfg.embeddings()?;
    let frag: usize = cfg.get("eval.fragment_voxels")?;
    let scale: f64 = cfg.get("train.logit_scale")?;
    let classes = union_classes(&registry);
    let mut logs: Vec<TrackedLog> = Vec::new();
    let mut all_scenes = Vec::new();
    let mut all_tables = Vec::new();
    for d in registry.training() {
        let tables = norm_tables(&ck.model, ck.classifier.as_ref(), &d.val)?;
        let m = table.class_matrix(&d.spec.label_space)?;
        let to_global: Vec<usize> = d
            .spec
            .label_space
            .classes
            .iter()
            .map(|c| classes.iter().position(|g| g == c).expect("union holds every class"))
            .collect();
        for mut tl in route_scenes(&ck.model, &d.val, tables.as_deref(), frag, Some((&m, scale)))? {
            if let Some(p) = &mut tl.predictions {
                p.iter_mut().for_each(|c| *c = to_global[*c]);
            }
            logs.push(tl);
        }
        all_scenes.extend(d.val.iter().cloned());
        all_tables.extend(tables.unwrap_or_default());
    }
    create_dir(out)?;
    write_routing_log(&out.join("routing.csv"), &out.join("routing.lineage"), &logs, &classes)?;
    analysis(&cfg, &logs, &classes, out)?;
    if let Some(stage) = features {
        let stage: FeatureStage = stage.parse()?;
        let tables = (!all_tables.is_empty()).then_some(all_tables.as_slice());
        let rows = export_features(&ck.model, &all_scenes, stage, tables, frag)?;
        let p = out.join("features.txt");
        write_features(&p, &rows)?;
        println!("wrote {} ({} rows)", p.display(), rows.len());
    }
    Ok(ExitCode::SUCCESS)
}

fn analyze_log(cfg: &RunConfig, log: &Path, lineage: Option<PathBuf>, out: &Path) -> Result<ExitCode> {
    let text = std::fs::read_to_string(log).map_err(|e| Error::io(log, e))?;
    let rows = parse_routing_csv(&text)?;
    let lineage = lineage.or_else(|| Some(log.with_extension("lineage")).filter(|p| p.exists()));
    create_dir(out)?;
    match lineage {
        Some(p) => {
            let lt = std::fs::read_to_string(&p).map_err(|e| Error::io(&p, e))?;
            let (logs, classes) = parse_lineage(&lt, &rows)?;
            analysis(cfg, &logs, &classes, out)
        }
        None => {
            let records: Vec<_> = records_from_rows(&rows)?.into_values().flatten().collect();
            let n_train = cfg.datasets()?.iter().filter(|s| !s.held_out).count();
            let layers = cfg.network(n_train)?.moe_layers();
            let dists = collect_distributions(&records, experts(cfg, &records)?, distribution_kind(cfg)?)?;
            let rows = jsd_report(&dists, &layers)?;
            write_jsd(&rows, out)?;
            println!("no lineage sidecar: pathways and co-occurrence skipped");
            Ok(())
        }
    }?;
    Ok(ExitCode::SUCCESS)
}

fn distribution_kind(cfg: &RunConfig) -> Result<DistributionKind> {
    Ok(if cfg.get::<bool>("analyze.gate_weighted")? {
        DistributionKind::GateWeighted
    } else {
        DistributionKind::Top1
    })
}

/// Expert count: the configured value, widened to cover ids seen in a log.
fn experts(cfg: &RunConfig, records: &[pointmoe::moe::RoutingRecord]) -> Result<usize> {
    let seen = records.iter().flat_map(|r| r.expert_ids.iter()).max().map_or(0, |e| e + 1);
    Ok(cfg.get::<usize>("moe.num_experts")?.max(seen))
}

fn write_jsd(rows: &[JsdRow], out: &Path) -> Result<()> {
    let mut buf = Vec::new();
    write_jsd_csv(&mut buf, rows).expect("vec write");
    write(&out.join("jsd.csv"), buf)?;
    for r in rows {
        println!("layer {:>2} {:<8} JSD {:.4} nats", r.layer_id, r.stage, r.jsd_nats);
    }
    let (enc, dec) = stage_means(rows);
    let fmt = |v: Option<f64>| v.map_or("n/a".to_string(), |x| format!("{x:.4}"));
    println!("mean JSD: encoder {}, decoder {}", fmt(enc), fmt(dec));
    Ok(())
}

fn analysis(cfg: &RunConfig, logs: &[TrackedLog], classes: &[String], out: &Path) -> Result<()> {
    let records: Vec<_> = logs.iter().map(|l| l.records()).collect::<Result<Vec<_>>>()?.concat();
    let layers = logs.first().map(|l| l.log.layers.clone()).unwrap_or_default();
    let n_experts = experts(cfg, &records)?;
    let dists = collect_distributions(&records, n_experts, distribution_kind(cfg)?)?;
    write_jsd(&jsd_report(&dists, &layers)?, out)?;

    let table = pathways(logs, cfg.get("analyze.top_m")?)?;
    let mut buf = Vec::new();
    write_pathway_csv(&mut buf, &table).expect("vec write");
    write(&out.join("pathways.csv"), buf)?;
    println!(
        "{} distinct pathways over {} tokens; top path {}",
        table.distinct,
        table.tracked.iter().sum::<u64>(),
        table
            .rows
            .first()
            .map_or("-".into(), |r| format!("{} ({})", pointmoe::analytics::path_string(&r.path), r.count))
    );

    if logs.iter().all(|l| l.predictions.is_some()) && !classes.is_empty() {
        let mats = expert_class_matrix(logs, n_experts, classes.len())?;
        write(&out.join("expert_class.csv"), expert_class_csv(&mats, classes))?;
    }
    println!("wrote analytics to {}", out.display());
    Ok(())
}

fn expert_class_csv(mats: &[ExpertClassMatrix], classes: &[String]) -> String {
    let mut s = format!("layer_id,expert_id,{}\n", classes.join(","));
    for m in mats {
        for (e, row) in m.counts.iter().enumerate() {
            let cells: Vec<String> = row.iter().map(|c| c.to_string()).collect();
            s.push_str(&format!("{},{e},{}\n", m.layer_id, cells.join(",")));
        }
    }
    s
}

fn selfcheck() -> ExitCode {
    let results = pointmoe::selfcheck::run_all();
    for r in &results {
        println!(
            "{} {:<24} {:>6.1}s  {}",
            if r.passed { "PASS" } else { "FAIL" },
            r.name,
            r.seconds,
            r.detail
        );
    }
    let failed = results.iter().filter(|r| !r.passed).count();
    if failed == 0 {
        println!("all {} checks passed", results.len());
        ExitCode::SUCCESS
    } else {
        println!("{failed} of {} checks failed", results.len());
        ExitCode::from(2)
    }
}
