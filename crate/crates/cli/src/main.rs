//! Command-line harness: train, evaluate, ablate, report, dataset
//! tooling, and prompt diagnostics. Exits non-zero when any
//! sample-level error was skipped during a run.

mod chart;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use ovcoser_core::backbone::build_backbone;
use ovcoser_core::data::{self, toyset, Split};
use ovcoser_core::harness::{
    self, ablate_samples, builtin_presets, load_checkpoint, load_config, restore_trainer,
    RunConfig,
};
use ovcoser_core::metrics::SixMetrics;
use ovcoser_core::prompts::PromptTemplateSet;
use std::path::{Path, PathBuf};

#[derive(Parser)]
#[command(name = "ovcoser", version, about = "Open-vocabulary camouflaged object segmentation pipeline")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone)]
struct ConfigArgs {
    /// TOML run-config file.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Dotted-path overrides, e.g. --set decoder.width=32.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    sets: Vec<String>,
}

impl ConfigArgs {
    fn load(&self) -> Result<RunConfig> {
        Ok(load_config(self.config.as_deref(), &self.sets)?)
    }
}

#[derive(Subcommand)]
enum Command {
    /// Train from the configured manifest (seen-class records).
    Train {
        #[command(flatten)]
        config: ConfigArgs,
        /// Resume from a checkpoint file.
        #[arg(long)]
        resume: Option<PathBuf>,
    },
    /// Evaluate a checkpoint over the evaluation stream.
    Eval {
        #[command(flatten)]
        config: ConfigArgs,
        #[arg(long)]
        checkpoint: PathBuf,
        /// Print the six aggregates in comparison-table column order.
        #[arg(long)]
        table: bool,
    },
    /// Train + evaluate every ablation preset and emit the comparison.
    Ablate {
        #[command(flatten)]
        config: ConfigArgs,
        /// Comma-separated preset names (default: all built-ins).
        #[arg(long)]
        presets: Option<String>,
    },
    /// Emit static report artifacts (charts + CSV) from a finished run.
    Report {
        #[command(flatten)]
        config: ConfigArgs,
        /// Run directory holding eval/report.json and train_log.jsonl.
        #[arg(long)]
        run_dir: PathBuf,
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        #[arg(long)]
        table: bool,
    },
    /// Dataset tooling.
    Data {
        #[command(subcommand)]
        command: DataCommand,
    },
    /// Prompt template diagnostics.
    Prompts {
        #[command(subcommand)]
        command: PromptsCommand,
    },
}

#[derive(Subcommand)]
enum DataCommand {
    /// Validate a manifest and its class split.
    Validate {
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long)]
        split: PathBuf,
        /// Skip checking that referenced files exist.
        #[arg(long)]
        no_check_files: bool,
    },
    /// Attribute statistics (CSV + histograms).
    Stats {
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long)]
        split: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Working resolution for mask/color statistics.
        #[arg(long, default_value_t = 384)]
        resolution: usize,
    },
    /// Generate the synthetic camouflage toy set.
    Synth {
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 16)]
        train_per_class: usize,
        #[arg(long, default_value_t = 4)]
        test_per_class: usize,
        #[arg(long, default_value_t = 64)]
        resolution: usize,
        #[arg(long, default_value_t = 2024)]
        seed: u64,
    },
}

#[derive(Subcommand)]
enum PromptsCommand {
    /// Hausdorff diagnostics (and optional ideal-mask accuracy) across
    /// template sets.
    Analyze {
        #[command(flatten)]
        config: ConfigArgs,
        /// Comma-separated built-in set names.
        #[arg(long, default_value = "camo,photo,bare")]
        sets: String,
        #[arg(long)]
        out: PathBuf,
        /// Also score ideal-mask classification accuracy over the
        /// evaluation stream (slower).
        #[arg(long)]
        with_accuracy: bool,
    },
}

fn main() {
    let cli = Cli::parse();
    match run(cli) {
        Ok(skipped) => {
            if skipped > 0 {
                eprintln!("{skipped} sample-level error(s) were skipped");
                std::process::exit(2);
            }
        }
        Err(e) => {
            eprintln!("error: {e:#}");
            std::process::exit(1);
        }
    }
}

fn print_table_row(name: &str, m: &SixMetrics) {
    println!(
        "{:<12} {}",
        name,
        SixMetrics::HEADER
            .iter()
            .zip(m.as_row())
            .map(|(h, v)| format!("{h}={v:.3}"))
            .collect::<Vec<_>>()
            .join(" ")
    );
}

fn run(cli: Cli) -> Result<usize> {
    match cli.command {
        Command::Train { config, resume } => {
            let cfg = config.load()?;
            let outcome = harness::train_run(&cfg, resume.as_deref())?;
            println!(
                "trained {} epoch(s); final epoch mean loss {:.4}",
                outcome.epochs_run, outcome.final_epoch_mean_loss
            );
            println!("checkpoint: {}", outcome.checkpoint.display());
            println!("log: {}", outcome.log.display());
            if outcome.backbone_fingerprint_before != outcome.backbone_fingerprint_after {
                bail!("backbone parameters changed during training");
            }
            if !outcome.audit.all_touched {
                eprintln!(
                    "warning: {} parameter tensor(s) never received gradient: {:?}",
                    outcome.audit.untouched.len(),
                    outcome.audit.untouched
                );
            }
            for s in &outcome.skipped {
                eprintln!("skipped: {s}");
            }
            Ok(outcome.skipped.len())
        }
        Command::Eval { config, checkpoint, table } => {
            let cfg = config.load()?;
            let out = harness::evaluate_run(&cfg, &checkpoint)?;
            if table {
                print_table_row("aggregate", &out.report.aggregate);
            } else {
                println!("{}", serde_json::to_string_pretty(&out.report.aggregate)?);
            }
            println!(
                "samples: {}  classification accuracy: {:.4}",
                out.report.samples,
                out.report.accuracy()
            );
            for s in &out.skipped {
                eprintln!("skipped: {s}");
            }
            Ok(out.skipped.len())
        }
        Command::Ablate { config, presets } => {
            let cfg = config.load()?;
            let all = builtin_presets();
            let chosen: Vec<_> = match presets {
                Some(names) => {
                    let wanted: Vec<&str> = names.split(',').map(str::trim).collect();
                    let mut sel = Vec::new();
                    for w in wanted {
                        let p = all
                            .iter()
                            .find(|p| p.name == w)
                            .with_context(|| format!("unknown preset `{w}`"))?;
                        sel.push(p.clone());
                    }
                    sel
                }
                None => all,
            };
            let mut skipped = 0usize;
            let table = ablate_samples(&cfg, &chosen, |preset, run_cfg| {
                let outcome = harness::train_run(run_cfg, None)?;
                skipped += outcome.skipped.len();
                let eval = harness::evaluate_run(run_cfg, &outcome.checkpoint)?;
                skipped += eval.skipped.len();
                println!("preset `{}` done", preset.name);
                Ok(eval.report.aggregate)
            })?;
            print!("{}", table.render_text());
            std::fs::create_dir_all(&cfg.run.out_dir)?;
            let csv_path = cfg.run.out_dir.join("ablation.csv");
            table.write_csv(&csv_path)?;
            println!("wrote {}", csv_path.display());
            Ok(skipped)
        }
        Command::Report { config, run_dir, checkpoint, table } => {
            report_command(&config, &run_dir, checkpoint.as_deref(), table)?;
            Ok(0)
        }
        Command::Data { command } => data_command(command),
        Command::Prompts { command } => prompts_command(command),
    }
}

fn report_command(
    config: &ConfigArgs,
    run_dir: &Path,
    checkpoint: Option<&Path>,
    table: bool,
) -> Result<()> {
    let report_dir = run_dir.join("report");
    std::fs::create_dir_all(&report_dir)?;

    // metric table from the eval report
    let report_json = run_dir.join("eval/report.json");
    if report_json.exists() {
        let report: ovcoser_core::metrics::MetricReport =
            serde_json::from_str(&std::fs::read_to_string(&report_json)?)?;
        harness::write_aggregate_csv(&report_dir.join("aggregates.csv"), &[("run", &report)])?;
        if table {
            print_table_row("aggregate", &report.aggregate);
        }
    }

    // training loss curve
    let log_path = run_dir.join("train_log.jsonl");
    if log_path.exists() {
        let rows = harness::read_train_log(&log_path)?;
        let points: Vec<(f64, f64)> =
            rows.iter().map(|r| (r.step as f64, r.total)).collect();
        chart::line_plot(&report_dir.join("loss_curve.png"), "TRAIN LOSS", &points)?;
    }

    // alpha chart from the checkpoint
    let ck_path = checkpoint
        .map(Path::to_path_buf)
        .unwrap_or_else(|| run_dir.join("checkpoint_latest.json"));
    if ck_path.exists() {
        let ck = load_checkpoint(&ck_path)?;
        let ck_config = ck.config.clone();
        let (trainer, _) = restore_trainer(ck, &ck_config)?;
        let rows = harness::alpha_chart_rows(&trainer.decoder);
        harness::write_alpha_csv(&report_dir.join("alpha.csv"), &rows)?;
        if !rows.is_empty() {
            let labels: Vec<String> =
                rows.iter().map(|r| format!("S{}H{}", r.stage, r.head)).collect();
            let values: Vec<f64> = rows.iter().map(|r| r.alpha).collect();
            let groups: Vec<usize> = rows.iter().map(|r| r.stage).collect();
            chart::bar_chart(
                &report_dir.join("alpha.png"),
                "EDGE/DEPTH BLEND PER LAYER AND HEAD",
                &labels,
                &values,
                &groups,
            )?;
        }
    }

    // attribute histograms + prompt scatter need the data config
    if let Ok(cfg) = config.load() {
        if cfg.data.manifest.as_os_str().is_empty() {
            println!("report artifacts written to {}", report_dir.display());
            return Ok(());
        }
        if let Ok(manifest) =
            data::load_manifest(&cfg.data.manifest, &cfg.data.split, cfg.data.check_files)
        {
            let (rows, _skipped) = harness::attribute_rows(&manifest, cfg.train.resolution)?;
            harness::write_attribute_csv(&report_dir.join("attributes.csv"), &rows)?;
            let pull =
                |f: fn(&harness::AttributeRow) -> f64| rows.iter().map(f).collect::<Vec<f64>>();
            chart::histogram(&report_dir.join("attr_concentration.png"), "OBJECT CONCENTRATION", &pull(|r| r.concentration), 20)?;
            chart::histogram(&report_dir.join("attr_color_ratio.png"), "AVG COLOR RATIO", &pull(|r| r.avg_color_ratio), 20)?;
            chart::histogram(&report_dir.join("attr_area_ratio.png"), "AREA RATIO", &pull(|r| r.area_ratio), 20)?;
            chart::histogram(&report_dir.join("attr_num_parts.png"), "OBJECT PARTS", &pull(|r| r.num_parts as f64), 10)?;
            chart::histogram(&report_dir.join("attr_centroid_x.png"), "CENTROID X", &pull(|r| r.centroid_x), 20)?;

            let backbone = build_backbone(&cfg.backbone)?;
            let seen = manifest.classes_for(Split::Seen);
            let unseen = manifest.classes_for(Split::Unseen);
            if !seen.is_empty() && !unseen.is_empty() {
                let sets: Vec<PromptTemplateSet> = PromptTemplateSet::builtin_names()
                    .iter()
                    .filter_map(|n| PromptTemplateSet::builtin(n))
                    .collect();
                let rows =
                    harness::prompt_analysis(backbone.as_ref(), &sets, &seen, &unseen, None)?;
                harness::write_prompt_analysis_csv(&report_dir.join("prompt_analysis.csv"), &rows)?;
            }
        }
    }
    println!("report artifacts written to {}", report_dir.display());
    Ok(())
}

fn data_command(command: DataCommand) -> Result<usize> {
    match command {
        DataCommand::Validate { manifest, split, no_check_files } => {
            match data::load_manifest(&manifest, &split, !no_check_files) {
                Ok(m) => {
                    let s = m.stats();
                    println!(
                        "valid: {} records, {} classes ({} seen / {} unseen), {} seen / {} unseen records",
                        s.records, s.classes, s.seen_classes, s.unseen_classes, s.seen_records,
                        s.unseen_records
                    );
                    Ok(0)
                }
                Err(e) => Err(e.into()),
            }
        }
        DataCommand::Stats { manifest, split, out, resolution } => {
            let m = data::load_manifest(&manifest, &split, true)?;
            std::fs::create_dir_all(&out)?;
            let (rows, skipped) = harness::attribute_rows(&m, resolution)?;
            harness::write_attribute_csv(&out.join("attributes.csv"), &rows)?;
            let pull = |f: fn(&harness::AttributeRow) -> f64| rows.iter().map(f).collect::<Vec<f64>>();
            chart::histogram(&out.join("attr_concentration.png"), "OBJECT CONCENTRATION", &pull(|r| r.concentration), 20)?;
            chart::histogram(&out.join("attr_color_ratio.png"), "AVG COLOR RATIO", &pull(|r| r.avg_color_ratio), 20)?;
            chart::histogram(&out.join("attr_area_ratio.png"), "AREA RATIO", &pull(|r| r.area_ratio), 20)?;
            chart::histogram(&out.join("attr_num_parts.png"), "OBJECT PARTS", &pull(|r| r.num_parts as f64), 10)?;
            chart::histogram(&out.join("attr_centroid_x.png"), "CENTROID X", &pull(|r| r.centroid_x), 20)?;
            println!("wrote attribute statistics for {} records to {}", rows.len(), out.display());
            for s in &skipped {
                eprintln!("skipped: {s}");
            }
            Ok(skipped.len())
        }
        DataCommand::Synth { out, train_per_class, test_per_class, resolution, seed } => {
            let spec = toyset::ToySpec {
                train_per_class,
                test_per_class,
                resolution,
                seed,
                ..Default::default()
            };
            let set = toyset::generate(&spec);
            let paths = toyset::write_to_dir(&set, &out)?;
            println!(
                "wrote {} train / {} test samples under {}",
                set.train.len(),
                set.test.len(),
                out.display()
            );
            println!("train manifest: {}", paths.train_manifest.display());
            println!("test manifest: {}", paths.test_manifest.display());
            println!("split: {}", paths.split.display());
            println!("taxonomy: {}", paths.taxonomy.display());
            Ok(0)
        }
    }
}

fn prompts_command(command: PromptsCommand) -> Result<usize> {
    match command {
        PromptsCommand::Analyze { config, sets, out, with_accuracy } => {
            let cfg = config.load()?;
            let manifest =
                data::load_manifest(&cfg.data.manifest, &cfg.data.split, cfg.data.check_files)?;
            let backbone = build_backbone(&cfg.backbone)?;
            let mut template_sets = Vec::new();
            for name in sets.split(',').map(str::trim) {
                let set = PromptTemplateSet::builtin(name)
                    .with_context(|| format!("unknown template set `{name}`"))?;
                template_sets.push(set);
            }
            let seen = manifest.classes_for(Split::Seen);
            let mut unseen = manifest.classes_for(Split::Unseen);
            if unseen.is_empty() {
                // toy-style splits keep every class seen; diagnose the
                // record classes against the seen list instead
                unseen = manifest.record_classes();
            }

            let mut labeled_store = None;
            if with_accuracy {
                let records: Vec<_> = match &cfg.data.eval_manifest {
                    Some(p) => {
                        let m = data::load_manifest(p, &cfg.data.split, cfg.data.check_files)?;
                        m.records.clone()
                    }
                    None => manifest.records_for(Split::Unseen).into_iter().cloned().collect(),
                };
                let classes: Vec<String> = records
                    .iter()
                    .map(|r| r.class_name.clone())
                    .collect::<std::collections::BTreeSet<_>>()
                    .into_iter()
                    .collect();
                let mut samples = Vec::new();
                for r in &records {
                    let s = data::load_sample(
                        &manifest,
                        r,
                        &classes,
                        cfg.train.resolution,
                        data::LoadMode::Eval,
                        cfg.train.seed,
                    )?;
                    samples.push(harness::EvalSample {
                        image_id: s.image_id,
                        image: s.image,
                        gt_mask: s.mask,
                        class_index: s.class_index,
                    });
                }
                labeled_store = Some((samples, classes));
            }
            let labeled = labeled_store
                .as_ref()
                .map(|(s, c)| (s.as_slice(), c.as_slice()));

            let rows =
                harness::prompt_analysis(backbone.as_ref(), &template_sets, &seen, &unseen, labeled)?;
            std::fs::create_dir_all(&out)?;
            harness::write_prompt_analysis_csv(&out.join("prompt_analysis.csv"), &rows)?;
            let points: Vec<(f64, f64, String)> = rows
                .iter()
                .map(|r| (r.hausdorff, r.accuracy.unwrap_or(0.0), r.template_set.to_uppercase()))
                .collect();
            chart::scatter(&out.join("prompt_hausdorff.png"), "ACCURACY VS HAUSDORFF", &points)?;
            for r in &rows {
                println!(
                    "{:<8} hausdorff {:.4} accuracy {}",
                    r.template_set,
                    r.hausdorff,
                    r.accuracy.map(|a| format!("{a:.3}")).unwrap_or_else(|| "-".into())
                );
            }
            Ok(0)
        }
    }
}
