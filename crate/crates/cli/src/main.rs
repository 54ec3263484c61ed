use std::collections::HashSet;
use std::path::{Path, PathBuf};

use advtransfer::analysis::{analyze, load_responses};
use advtransfer::attack::{AttackConfig, Retention};
use advtransfer::coarse::{CoarsePartition, Ensemble, Member};
use advtransfer::data::{load_dataset, read_exclusions, read_json, read_png, synthetic_dataset, write_json, write_png};
use advtransfer::eval::{ablation_sweep, evaluate_models, ModelRole, NamedModel, SweepSource};
use advtransfer::nn::{read_checkpoint, train_model, write_checkpoint, ArchSpec, Model, TrainConfig};
use advtransfer::pipeline::{generate_pool, write_pool};
use advtransfer::retina::{RetinaLayer, RetinaParams, RetinaSpec, ViewingGeometry};
use advtransfer::stimuli::{
    assemble_session, build_coarse_groups, check_balance, load_pool, load_stimulus_image, Condition, GroupSpec,
    SessionTiming,
};
use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand, ValueEnum};

pub const PARTITION_FILE: &str = "partition.json";

#[derive(Parser)]
#[command(name = "advtransfer", version, about = "Ensemble adversarial stimuli for time-limited human experiments")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, ValueEnum)]
enum RetentionArg {
    All,
    SevenOfTen,
}

#[derive(Subcommand)]
enum Command {
    /// Write a synthetic textured-shapes dataset (PNGs, manifest, groups, partition).
    Synth {
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 40)]
        per_label: usize,
        #[arg(long, default_value_t = 64)]
        size: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Train one classifier.
    Train {
        #[arg(long)]
        arch: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// JSON training config; flags below override its fields.
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        epochs: Option<usize>,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        lr: Option<f64>,
        /// File of image ids to leave out (one per line).
        #[arg(long)]
        exclude: Option<PathBuf>,
    },
    /// Apply the retinal blur to one square image.
    RetinaDemo {
        #[arg(long = "in")]
        input: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Viewing geometry JSON, or a full retina spec with `geometry` and `params`.
        #[arg(long)]
        geom: PathBuf,
    },
    /// Generate a stimulus pool for one group and condition.
    Attack {
        #[arg(long)]
        ensemble: PathBuf,
        #[arg(long)]
        partition: PathBuf,
        #[arg(long)]
        group: String,
        #[arg(long, value_parser = ["adv", "false"])]
        condition: String,
        #[arg(long, default_value_t = 32.0)]
        eps: f64,
        /// Dataset to draw source images from.
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 2.0)]
        step: f64,
        #[arg(long)]
        iters: Option<usize>,
        /// Defaults to `all` for adv and `seven-of-ten` for false.
        #[arg(long, value_enum)]
        retention: Option<RetentionArg>,
        #[arg(long)]
        exclude: Option<PathBuf>,
    },
    /// Build a balanced, shuffled session manifest from a pool.
    Assemble {
        #[arg(long)]
        pool: PathBuf,
        #[arg(long)]
        group: String,
        /// Trials per condition (even).
        #[arg(long)]
        n: usize,
        #[arg(long)]
        seed: u64,
        /// Directory for `<session_id>.json`; defaults to `<pool>/../sessions`.
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long)]
        timing: Option<PathBuf>,
    },
    /// Score stimuli on models. Checkpoints under `<models>/train/` are ensemble members;
    /// those in `<models>/` itself or `<models>/test/` are held out.
    Eval {
        #[arg(long)]
        models: PathBuf,
        #[arg(long)]
        stimuli: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Defaults to `<stimuli>/partition.json`.
        #[arg(long)]
        partition: Option<PathBuf>,
        /// Also write a CSV table here.
        #[arg(long)]
        csv: Option<PathBuf>,
    },
    /// Sweep epsilon and ensemble size; writes an image grid and a CSV.
    Sweep {
        /// Attack ensembles as `name=dir`; the first is the main variant.
        #[arg(long = "variant", required = true)]
        variants: Vec<String>,
        #[arg(long)]
        test_models: PathBuf,
        #[arg(long)]
        partition: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        group: String,
        #[arg(long, value_delimiter = ',', default_value = "8,16,24,32,40")]
        eps: Vec<f64>,
        #[arg(long, value_delimiter = ',', default_value = "1,2,4")]
        sizes: Vec<usize>,
        /// Source images per coarse class.
        #[arg(long, default_value_t = 8)]
        per_class: usize,
        #[arg(long)]
        out: PathBuf,
    },
    /// Serve sessions and stimuli over HTTP and record responses.
    Serve {
        #[arg(long)]
        stimuli: Option<PathBuf>,
        #[arg(long)]
        sessions: Option<PathBuf>,
        #[arg(long, env = "ADVT_PORT", default_value_t = 8080)]
        port: u16,
        #[arg(long, default_value = "127.0.0.1")]
        host: String,
        /// Holds `stimuli/` and `sessions/` when those are not given.
        #[arg(long, env = advtransfer_service::DATA_DIR_ENV)]
        data_dir: Option<PathBuf>,
    },
    /// Statistics on recorded responses.
    Analyze {
        #[arg(long)]
        responses: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
}

fn main() -> Result<()> {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    match Cli::parse().command {
        Command::Synth {
            out,
            per_label,
            size,
            seed,
        } => {
            let data = synthetic_dataset(per_label, size, seed);
            data.write(&out)?;
            let partition = build_coarse_groups(&data.fine_labels, &data.groups)?;
            partition.write(&out.join(PARTITION_FILE))?;
            println!("wrote {} images to {}", data.dataset.items.len(), out.display());
        }
        Command::Train {
            arch,
            data,
            out,
            config,
            epochs,
            seed,
            lr,
            exclude,
        } => {
            let arch: ArchSpec = read_json(&arch)?;
            let mut cfg: TrainConfig = match config {
                Some(p) => read_json(&p)?,
                None => TrainConfig::default(),
            };
            cfg.epochs = epochs.unwrap_or(cfg.epochs);
            cfg.seed = seed.unwrap_or(cfg.seed);
            cfg.learning_rate = lr.unwrap_or(cfg.learning_rate);
            let (dataset, _) = load_dataset(&data, &exclusions(exclude.as_deref())?)?;
            log::info!("training {} on {} images for {} epochs", arch.name, dataset.items.len(), cfg.epochs);
            let outcome = train_model(&arch, &dataset, &cfg)?;
            if let Some(parent) = out.parent().filter(|p| !p.as_os_str().is_empty()) {
                std::fs::create_dir_all(parent)?;
            }
            write_checkpoint(&out, &outcome.checkpoint)?;
            println!(
                "{}: final loss {:.4}, train accuracy {:.3}",
                out.display(),
                outcome.epoch_losses.last().copied().unwrap_or(f64::NAN),
                outcome.train_accuracy
            );
        }
        Command::RetinaDemo { input, out, geom } => {
            let spec = read_retina_spec(&geom)?;
            let layer = RetinaLayer::new(&spec)?;
            let img = read_png(&input)?;
            let blurred = layer.apply(&img)?;
            write_png(&out, &blurred.map(|v| v.clamp(0.0, 255.0)))?;
            println!(
                "{} -> {} ({}px crop, {:.2} deg visual angle)",
                input.display(),
                out.display(),
                layer.output_size(),
                spec.geometry.visual_angle_deg()
            );
        }
        Command::Attack {
            ensemble,
            partition,
            group,
            condition,
            eps,
            data,
            out,
            step,
            iters,
            retention,
            exclude,
        } => {
            let (dataset, manifest) = load_dataset(&data, &exclusions(exclude.as_deref())?)?;
            let partition = read_partition(&partition, &manifest.fine_labels)?;
            let ensemble = load_ensemble(&ensemble)?;
            let condition: Condition = condition.parse()?;
            let k = ensemble.len();
            let mut cfg = match condition {
                Condition::False => AttackConfig::false_condition(eps, k),
                _ => AttackConfig::adv(eps),
            };
            cfg.step_size = step;
            cfg.max_iters = iters.unwrap_or_else(|| AttackConfig::default_iters(eps, step));
            cfg.retention = match retention {
                Some(RetentionArg::All) => Retention::All,
                Some(RetentionArg::SevenOfTen) => Retention::seven_of_ten(k),
                None => cfg.retention,
            };
            let pool = generate_pool(&dataset, &partition, &group, condition, &ensemble, &cfg)?;
            write_pool(&out, &pool)?;
            partition.write(&out.join(PARTITION_FILE))?;
            let retained = pool.iter().filter(|s| s.record.retained).count();
            println!("wrote {} stimuli ({retained} retained) to {}", pool.len(), out.display());
        }
        Command::Assemble {
            pool,
            group,
            n,
            seed,
            out,
            timing,
        } => {
            let records = load_pool(&pool)?;
            let classes = group_classes(&records, &group)?;
            let timing: SessionTiming = match timing {
                Some(p) => read_json(&p)?,
                None => SessionTiming::default(),
            };
            let manifest = assemble_session(&records, &group, &classes, n, seed, &timing)?;
            check_balance(&manifest, &records, &classes)?;
            let dir = out.unwrap_or_else(|| pool.join("..").join("sessions"));
            std::fs::create_dir_all(&dir)?;
            let path = dir.join(format!("{}.json", manifest.session_id));
            manifest.write(&path)?;
            println!("{}: {} trials", path.display(), manifest.trials.len());
        }
        Command::Eval {
            models,
            stimuli,
            out,
            partition,
            csv,
        } => {
            let partition = CoarsePartition::read(&partition.unwrap_or_else(|| stimuli.join(PARTITION_FILE)))?;
            let models = load_models(&models)?;
            let records = load_pool(&stimuli)?;
            let loaded = records
                .into_iter()
                .map(|r| {
                    let img = load_stimulus_image(&stimuli, &r)?;
                    Ok((r, img))
                })
                .collect::<advtransfer::Result<Vec<_>>>()?;
            let report = evaluate_models(&models, &loaded, &partition)?;
            write_json(&out, &report)?;
            if let Some(p) = csv {
                std::fs::write(&p, report.to_csv()).with_context(|| p.display().to_string())?;
            }
            for c in &report.flip_comparisons {
                println!(
                    "{} ({:?}): adv {:.3} flip {:.3} over {} pairs, p = {:.3e}",
                    c.model, c.role, c.adv_success, c.flip_success, c.pairs, c.p_value
                );
            }
        }
        Command::Sweep {
            variants,
            test_models,
            partition,
            data,
            group,
            eps,
            sizes,
            per_class,
            out,
        } => {
            let (dataset, manifest) = load_dataset(&data, &HashSet::new())?;
            let partition = read_partition(&partition, &manifest.fine_labels)?;
            let classes = partition.group(&group)?.clone();
            let mut sources = Vec::new();
            for class in &classes {
                let fine = partition.class(class)?;
                sources.extend(
                    dataset
                        .items
                        .iter()
                        .filter(|it| fine.contains(&it.fine_label))
                        .take(per_class)
                        .map(|it| SweepSource {
                            id: it.id.clone(),
                            image: it.image.clone(),
                            true_class: class.clone(),
                        }),
                );
            }
            let variants = variants
                .iter()
                .map(|v| {
                    let (name, dir) = v.split_once('=').context("variant must be name=dir")?;
                    Ok((name.to_owned(), load_ensemble(Path::new(dir))?))
                })
                .collect::<Result<Vec<_>>>()?;
            let test = load_models(&test_models)?;
            let result = ablation_sweep(&sources, &partition, &eps, &sizes, &variants, &test)?;
            let ids: Vec<String> = sources.iter().map(|s| s.id.clone()).collect();
            result.write(&out, &ids)?;
            println!("{} cells written to {}", result.cells.len(), out.display());
        }
        Command::Serve {
            stimuli,
            sessions,
            port,
            host,
            data_dir,
        } => {
            let resolve = |given: Option<PathBuf>, sub: &str| -> Result<PathBuf> {
                match (given, &data_dir) {
                    (Some(p), _) => Ok(p),
                    (None, Some(d)) => Ok(d.join(sub)),
                    (None, None) => bail!("--{sub} or a data directory is required"),
                }
            };
            let stimuli = resolve(stimuli, "stimuli")?;
            let sessions = resolve(sessions, "sessions")?;
            let state = advtransfer_service::AppState::load(&stimuli, &sessions)?;
            let rt = tokio::runtime::Runtime::new()?;
            rt.block_on(async {
                let listener = tokio::net::TcpListener::bind((host.as_str(), port)).await?;
                // Printed for scripts that pass port 0.
                println!("listening on {}", listener.local_addr()?);
                advtransfer_service::serve(state, listener).await?;
                Ok::<_, anyhow::Error>(())
            })?;
        }
        Command::Analyze { responses, out } => {
            let records = load_responses(&responses)?;
            let report = analyze(&records);
            std::fs::create_dir_all(&out)?;
            write_json(&out.join("analysis.json"), &report)?;
            for (name, table) in report.csv_tables() {
                std::fs::write(out.join(name), table)?;
            }
            for note in &report.notes {
                println!("note: {note}");
            }
            println!("{} responses, {} counted", report.responses, report.counted);
        }
    }
    Ok(())
}

fn exclusions(path: Option<&Path>) -> Result<HashSet<String>> {
    Ok(match path {
        Some(p) => read_exclusions(p)?,
        None => HashSet::new(),
    })
}

fn read_retina_spec(path: &Path) -> Result<RetinaSpec> {
    let value: serde_json::Value = read_json(path)?;
    if value.get("geometry").is_some() {
        return Ok(serde_json::from_value(value)?);
    }
    Ok(RetinaSpec {
        geometry: serde_json::from_value::<ViewingGeometry>(value)?,
        params: RetinaParams::default(),
    })
}

/// Accepts a resolved partition or a group spec naming fine labels.
fn read_partition(path: &Path, fine_labels: &[String]) -> Result<CoarsePartition> {
    let value: serde_json::Value = read_json(path)?;
    let partition = match serde_json::from_value::<CoarsePartition>(value.clone()) {
        Ok(p) => p,
        Err(_) => build_coarse_groups(fine_labels, &serde_json::from_value::<GroupSpec>(value)?)?,
    };
    partition.validate()?;
    if partition.fine_labels != fine_labels {
        bail!("partition fine labels do not match the dataset manifest");
    }
    Ok(partition)
}

fn checkpoints_in(dir: &Path) -> Result<Vec<PathBuf>> {
    let mut paths: Vec<PathBuf> = std::fs::read_dir(dir)
        .with_context(|| dir.display().to_string())?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|x| x == "ckpt"))
        .collect();
    paths.sort();
    Ok(paths)
}

fn stem(p: &Path) -> String {
    p.file_stem().unwrap_or_default().to_string_lossy().into_owned()
}

fn load_ensemble(dir: &Path) -> Result<Ensemble> {
    let members = checkpoints_in(dir)?
        .iter()
        .map(|p| Ok(Member::from_checkpoint(stem(p), read_checkpoint(p)?)))
        .collect::<Result<Vec<_>>>()?;
    if members.is_empty() {
        bail!("no .ckpt files in {}", dir.display());
    }
    Ok(Ensemble::new(members)?)
}

fn load_models(dir: &Path) -> Result<Vec<NamedModel>> {
    let named = |p: &PathBuf, role| -> Result<NamedModel> {
        let model: Model = read_checkpoint(p)?.model;
        Ok(NamedModel {
            name: stem(p),
            role,
            model,
        })
    };
    let mut out = Vec::new();
    let train_dir = dir.join("train");
    if train_dir.is_dir() {
        for p in checkpoints_in(&train_dir)? {
            out.push(named(&p, ModelRole::Train)?);
        }
    }
    for d in [dir.to_path_buf(), dir.join("test")] {
        if d.is_dir() {
            for p in checkpoints_in(&d)? {
                out.push(named(&p, ModelRole::Test)?);
            }
        }
    }
    if out.is_empty() {
        bail!("no .ckpt files in {}", dir.display());
    }
    Ok(out)
}

/// The two classes of `group`, read off its clean-image stimuli.
fn group_classes(records: &[advtransfer::stimuli::StimulusRecord], group: &str) -> Result<[String; 2]> {
    let mut classes: Vec<String> = records
        .iter()
        .filter(|r| r.group == group)
        .filter_map(|r| r.balance_class().map(str::to_owned))
        .collect();
    classes.sort();
    classes.dedup();
    match <[String; 2]>::try_from(classes) {
        Ok(c) => Ok(c),
        Err(c) => bail!("group `{group}` has classes {c:?} in the pool; expected exactly two"),
    }
}
