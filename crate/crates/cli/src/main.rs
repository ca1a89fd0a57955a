//! `demo`: synthesize data, train, evaluate, sweep and plot.
//!
//! Exit codes: 0 success, 2 configuration or parse error (including bad
//! command-line usage), 3 dataset ingestion or file i/o error, 4 runtime
//! error (sampling, evaluation, non-finite loss, export, or a failed
//! ablation cell), 5 unreadable or incompatible checkpoint.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use demo_core::atmoe::{read_gate_table, write_gate_table, GateRecord};
use demo_core::config::{load_config, parse_synth_spec, to_toml};
use demo_core::data::{generate_synthetic, LoadedDataset};
use demo_core::error::{DemoError, Result};
use demo_core::evaluation::{evaluate, export_rank_list};
use demo_core::modality::{parse_modality_set, Modality};
use demo_core::parallel;
use demo_core::render::{gate_bars, save_png, write_heatmaps};
use demo_core::sweep::{ablation_cells, ablation_table, run_ablation, sweep_missing, Matrix};
use demo_core::trainer::{extract_features, feature_archive, resume, split_indices, train, Trainer};

/// Relative output paths are resolved against this directory.
const OUTPUT_ROOT_ENV: &str = "DEMO_OUTPUT_ROOT";

#[derive(Parser)]
#[command(name = "demo", version, about = "Multi-modal re-identification: training, evaluation, sweeps and plots")]
struct Cli {
    /// Run everything on one thread.
    #[arg(long, global = true)]
    sequential: bool,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct ConfigArgs {
    /// TOML run configuration.
    #[arg(long)]
    config: Option<PathBuf>,
    /// `section.key=value` override, repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
}

#[derive(Args)]
struct ModelArgs {
    /// Checkpoint written by `train`.
    #[arg(long)]
    checkpoint: PathBuf,
    /// Dataset root with RGB/, NI/ and TI/ subdirectories.
    #[arg(long)]
    data: PathBuf,
    /// Hold out this many instances per identity as queries (0: every
    /// entry queries the whole set).
    #[arg(long, default_value_t = 0)]
    query_per_identity: usize,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic aligned dataset.
    Synth {
        /// Flat `key = value` spec file.
        #[arg(long)]
        spec: Option<PathBuf>,
        #[arg(long = "set", value_name = "KEY=VALUE")]
        overrides: Vec<String>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Train a model; writes logs and checkpoints to the output directory.
    Train {
        #[command(flatten)]
        config: ConfigArgs,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: Option<PathBuf>,
        /// Continue from this checkpoint instead of starting fresh.
        #[arg(long)]
        resume: Option<PathBuf>,
        /// New step cap when resuming.
        #[arg(long)]
        max_steps: Option<usize>,
    },
    /// Evaluate a checkpoint and save query/gallery feature archives.
    Eval {
        #[command(flatten)]
        model: ModelArgs,
        /// Modalities to zero at test time, e.g. `RGB+NIR`.
        #[arg(long, default_value = "")]
        missing: String,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Evaluate under every missing-modality pattern.
    SweepMissing {
        #[command(flatten)]
        model: ModelArgs,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Train and evaluate a matrix of configurations.
    SweepAblation {
        #[command(flatten)]
        config: ConfigArgs,
        #[arg(long)]
        data: PathBuf,
        /// Comma-separated: models, gating, pooling, experts, hdm, heads.
        #[arg(long, default_value = "models")]
        matrix: String,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Bar charts of head-averaged gate weights.
    PlotGates {
        /// Existing gate table; otherwise gates are exported from a model.
        #[arg(long, conflicts_with_all = ["checkpoint", "data"])]
        gates: Option<PathBuf>,
        #[arg(long, requires = "data")]
        checkpoint: Option<PathBuf>,
        #[arg(long, requires = "checkpoint")]
        data: Option<PathBuf>,
        /// Instances to export.
        #[arg(long, default_value_t = 8)]
        limit: usize,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Decoupling-attention heatmaps.
    PlotAttention {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long, default_value_t = 2)]
        limit: usize,
        /// Pixels per patch cell.
        #[arg(long, default_value_t = 16)]
        cell: u32,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Rank-list grids: query then top-k gallery images.
    PlotRanks {
        #[command(flatten)]
        model: ModelArgs,
        #[arg(long, default_value_t = 4)]
        queries: usize,
        #[arg(long, default_value_t = 5)]
        top_k: usize,
        /// Modality whose images are shown.
        #[arg(long, default_value = "RGB")]
        modality: Modality,
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

fn output_dir(out: Option<PathBuf>, default: &str) -> Result<PathBuf> {
    let p = out.unwrap_or_else(|| PathBuf::from("runs").join(default));
    let p = if p.is_absolute() {
        p
    } else {
        std::env::var_os(OUTPUT_ROOT_ENV).map(PathBuf::from).unwrap_or_default().join(p)
    };
    fs::create_dir_all(&p).map_err(|e| DemoError::io(&p, e))?;
    Ok(p)
}

fn write(path: &Path, text: &str) -> Result<()> {
    fs::write(path, text).map_err(|e| DemoError::io(path, e))
}

fn read(path: &Path) -> Result<String> {
    fs::read_to_string(path).map_err(|e| DemoError::io(path, e))
}

/// Query and gallery entry indices.
fn split(data: &LoadedDataset, per_identity: usize) -> Result<(Vec<usize>, Vec<usize>)> {
    let (gallery, held) = split_indices(data, per_identity)?;
    let query = if held.is_empty() { gallery.clone() } else { held };
    Ok((query, gallery))
}

struct Loaded {
    trainer: Trainer,
    data: LoadedDataset,
    query: Vec<usize>,
    gallery: Vec<usize>,
}

fn load(m: &ModelArgs) -> Result<Loaded> {
    let trainer = Trainer::load(&m.checkpoint)?;
    let data = LoadedDataset::open(&m.data)?;
    let (query, gallery) = split(&data, m.query_per_identity)?;
    Ok(Loaded {
        trainer,
        data,
        query,
        gallery,
    })
}

fn run(cli: Cli) -> Result<()> {
    parallel::set_enabled(!cli.sequential);
    match cli.command {
        Command::Synth { spec, overrides, out } => {
            let text = spec.as_deref().map(read).transpose()?.unwrap_or_default();
            let spec = parse_synth_spec(&text, &overrides)?;
            let dir = output_dir(out, "synth")?;
            let n = generate_synthetic(&spec, &dir)?;
            println!("wrote {n} aligned triples to {}", dir.display());
        }
        Command::Train {
            config,
            data,
            out,
            resume: from,
            max_steps,
        } => {
            let fresh = match from {
                Some(_) if config.config.is_some() || !config.overrides.is_empty() => {
                    return Err(DemoError::Config("--resume takes its configuration from the checkpoint".into()));
                }
                Some(_) => None,
                None => {
                    let mut cfg = load_config(config.config.as_deref(), &config.overrides)?;
                    if let Some(m) = max_steps {
                        cfg.train.max_steps = m;
                    }
                    Some(cfg)
                }
            };
            let ds = LoadedDataset::open(&data)?;
            let dir = output_dir(out, "train")?;
            let t = match (fresh, from) {
                (Some(cfg), _) => {
                    write(&dir.join("config.toml"), &to_toml(&cfg))?;
                    train(&cfg, &ds, Some(&dir))?
                }
                (None, Some(ckpt)) => resume(&ckpt, &ds, Some(&dir), max_steps, None)?,
                (None, None) => unreachable!("fresh config or checkpoint"),
            };
            if let Some(e) = t.evals.last() {
                println!("step {}: mAP {:.4} Rank-1 {:.4}", e.step, e.map, e.rank1);
            }
            println!("checkpoints in {}", dir.display());
        }
        Command::Eval { model, missing, out } => {
            let missing = parse_modality_set(&missing)?;
            let l = load(&model)?;
            let dir = output_dir(out, "eval")?;
            let (cfg, m) = (&l.trainer.config, &l.trainer.model);
            let q = extract_features(m, &l.data, &l.query, &missing, cfg.train.eval_batch)?;
            let g = extract_features(m, &l.data, &l.gallery, &missing, cfg.train.eval_batch)?;
            feature_archive(&q, m, &missing).save(&dir.join("query.feat"))?;
            feature_archive(&g, m, &missing).save(&dir.join("gallery.feat"))?;
            let r = evaluate(&q, &g, &cfg.eval)?;
            write(&dir.join("metrics.tsv"), &r.to_table())?;
            write(&dir.join("metrics.json"), &r.summary_json())?;
            print!("{}", r.to_table());
        }
        Command::SweepMissing { model, out } => {
            let l = load(&model)?;
            let dir = output_dir(out, "sweep-missing")?;
            let cfg = &l.trainer.config;
            let s = sweep_missing(&l.trainer.model, &l.data, &l.query, &l.gallery, &cfg.eval, cfg.train.eval_batch)?;
            write(&dir.join("missing.tsv"), &s.to_table())?;
            write(&dir.join("missing.json"), &s.to_json())?;
            println!("full modalities: mAP {:.2} Rank-1 {:.2}", 100.0 * s.full.map, 100.0 * s.full.rank1);
            print!("{}", s.to_table());
            for v in &s.violations {
                eprintln!("note: {v} scores above the full-modality mAP");
            }
        }
        Command::SweepAblation {
            config,
            data,
            matrix,
            out,
        } => {
            let base = load_config(config.config.as_deref(), &config.overrides)?;
            let matrices = matrix
                .split(',')
                .filter(|m| !m.trim().is_empty())
                .map(|m| m.trim().parse::<Matrix>())
                .collect::<Result<Vec<_>>>()?;
            let ds = LoadedDataset::open(&data)?;
            let dir = output_dir(out, "sweep-ablation")?;
            let mut failed = 0;
            for m in matrices {
                let rows = run_ablation(&ablation_cells(m, &base), &ds);
                failed += rows.iter().filter(|r| r.error.is_some()).count();
                let table = ablation_table(&rows);
                write(&dir.join(format!("ablation_{}.tsv", m.name())), &table)?;
                println!("# {}", m.name());
                print!("{table}");
            }
            if failed > 0 {
                return Err(DemoError::State(format!("{failed} ablation cell(s) failed; see the tables")));
            }
        }
        Command::PlotGates {
            gates,
            checkpoint,
            data,
            limit,
            out,
        } => {
            let dir = output_dir(out, "plot-gates")?;
            let records = match (gates, checkpoint, data) {
                (Some(path), _, _) => read_gate_table(&read(&path)?)?,
                (None, Some(ckpt), Some(data)) => {
                    let t = Trainer::load(&ckpt)?;
                    let ds = LoadedDataset::open(&data)?;
                    let idx: Vec<usize> = (0..ds.len().min(limit)).collect();
                    let batch = ds.batch(&idx);
                    let records: Vec<GateRecord> = t
                        .model
                        .gates(&batch)?
                        .into_iter()
                        .enumerate()
                        .map(|(i, gate)| GateRecord {
                            instance: i,
                            identity: batch.ids[i],
                            gate,
                        })
                        .collect();
                    write(&dir.join("gates.tsv"), &write_gate_table(&records))?;
                    records
                }
                _ => return Err(DemoError::Config("give --gates, or --checkpoint with --data".into())),
            };
            let png = dir.join("gates.png");
            save_png(&gate_bars(&records)?, &png)?;
            println!("{} instances plotted to {}", records.len(), png.display());
        }
        Command::PlotAttention {
            checkpoint,
            data,
            limit,
            cell,
            out,
        } => {
            let t = Trainer::load(&checkpoint)?;
            let ds = LoadedDataset::open(&data)?;
            let dir = output_dir(out, "plot-attention")?;
            let idx: Vec<usize> = (0..ds.len().min(limit)).collect();
            let maps = t.model.attention_maps(&ds.batch(&idx))?;
            let files = write_heatmaps(&maps, &dir, cell)?;
            println!("{} heatmaps written to {}", files.len() - 1, dir.display());
        }
        Command::PlotRanks {
            model,
            queries,
            top_k,
            modality,
            out,
        } => {
            let l = load(&model)?;
            let dir = output_dir(out, "plot-ranks")?;
            let (cfg, m) = (&l.trainer.config, &l.trainer.model);
            let q = extract_features(m, &l.data, &l.query, &[], cfg.train.eval_batch)?;
            let g = extract_features(m, &l.data, &l.gallery, &[], cfg.train.eval_batch)?;
            let r = evaluate(&q, &g, &cfg.eval)?;
            let path_of = |i: usize| l.data.index.entries[i].paths[modality.index()].clone();
            let gallery_paths: Vec<PathBuf> = l.gallery.iter().map(|&i| path_of(i)).collect();
            for qi in 0..queries.min(l.query.len()) {
                let out = dir.join(format!("query{qi:03}.png"));
                let s = export_rank_list(&r, qi, top_k, &path_of(l.query[qi]), q.ids[qi], &gallery_paths, &g.ids, &out)?;
                let marks: String = s.matches.iter().map(|&ok| if ok { '+' } else { '-' }).collect();
                println!("{}\tid {}\t{marks}", out.display(), q.ids[qi]);
            }
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
