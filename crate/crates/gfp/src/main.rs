//! Command-line entry points for the fingerprinting pipeline: training,
//! corpus fingerprinting, index building, querying, evaluation, and a
//! synthetic-corpus generator. Exit codes: 0 success, 2 configuration error,
//! 3 data/IO error.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};

use gfp::augment::{AugmentConfig, Augmenter, WaveBank};
use gfp::config::{sub_seed, RunConfig};
use gfp::encoder::{checkpoint, Encoder};
use gfp::features::{MelExtractor, WaveBuffer};
use gfp::index::IvfPqIndex;
use gfp::retrieval::{evaluate, fingerprint_track, identify, EvalQuery, ReferenceDb};
use gfp::synth;
use gfp::training::fit;
use gfp::wav::{load_wav_canonical, write_wav};
use gfp::{Error, Result};

#[derive(Parser)]
#[command(name = "gfp", about = "Audio fingerprinting with GNN embeddings and IVF-PQ search")]
struct Cli {
    /// Flat key=value configuration file.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Global seed driving all randomness.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Training epochs.
    #[arg(long, global = true)]
    epochs: Option<usize>,
    /// Coarse cells probed per ANN search.
    #[arg(long, global = true)]
    nprobe: Option<usize>,
    /// ANN hits kept per query segment.
    #[arg(long, global = true)]
    topn: Option<usize>,
    /// Evaluation time-error margin in milliseconds.
    #[arg(long, global = true)]
    margin_ms: Option<f64>,
    /// Extra overrides for any configuration key, as key=value.
    #[arg(long = "set", global = true, value_name = "KEY=VALUE")]
    set: Vec<String>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train the encoder on a manifest of WAV files.
    Train {
        /// Newline-delimited list of training WAV paths.
        #[arg(long)]
        manifest: PathBuf,
        /// Output checkpoint path (a sibling `.best` file is also written).
        #[arg(long)]
        out: PathBuf,
        /// Per-step metrics CSV path.
        #[arg(long)]
        metrics: Option<PathBuf>,
        /// Manifest of noise WAVs for augmentation.
        #[arg(long)]
        noise_manifest: Option<PathBuf>,
        /// Manifest of room-impulse-response WAVs for augmentation.
        #[arg(long)]
        rir_manifest: Option<PathBuf>,
    },
    /// Fingerprint every track in a manifest into a reference store.
    Fingerprint {
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        out_store: PathBuf,
        #[arg(long)]
        out_manifest: PathBuf,
    },
    /// Build an IVF-PQ index from a fingerprint store.
    IndexBuild {
        #[arg(long)]
        store: PathBuf,
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Identify one query audio file against a reference store + index.
    Query {
        audio: PathBuf,
        #[arg(long)]
        store: PathBuf,
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long)]
        index: PathBuf,
        #[arg(long)]
        checkpoint: PathBuf,
        /// Report no-match below this sequence score.
        #[arg(long)]
        min_score: Option<f64>,
    },
    /// Evaluate top-1 hit rate over a labeled query list.
    Eval {
        /// Lines of: query path <TAB> true track id <TAB> true start ms.
        #[arg(long)]
        queries: PathBuf,
        #[arg(long)]
        store: PathBuf,
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long)]
        index: PathBuf,
        #[arg(long)]
        checkpoint: PathBuf,
    },
    /// Generate a seeded synthetic WAV corpus (plus a manifest.txt).
    Synth {
        #[arg(long)]
        out_dir: PathBuf,
        #[arg(long, default_value_t = 10)]
        n_tracks: usize,
        #[arg(long, default_value_t = 10.0)]
        duration_s: f64,
        #[arg(long, value_enum, default_value_t = SynthKind::Track)]
        kind: SynthKind,
    },
}

#[derive(Clone, Copy, ValueEnum)]
enum SynthKind {
    Track,
    Noise,
    Rir,
}

fn main() -> ExitCode {
    if let Ok(threads) = std::env::var("GRAFPRINT_THREADS") {
        if let Ok(n) = threads.parse::<usize>() {
            let _ = rayon::ThreadPoolBuilder::new().num_threads(n.max(1)).build_global();
        }
    }
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            match e {
                Error::Config(_) => ExitCode::from(2),
                _ => ExitCode::from(3),
            }
        }
    }
}

fn build_config(cli: &Cli) -> Result<RunConfig> {
    let mut cfg = RunConfig::default();
    if let Some(path) = &cli.config {
        cfg.apply_file(path)?;
    }
    for kv in &cli.set {
        let (k, v) = kv
            .split_once('=')
            .ok_or_else(|| Error::config(format!("--set expects key=value, got {kv:?}")))?;
        cfg.set(k.trim(), v.trim())?;
    }
    if let Some(v) = cli.seed {
        cfg.seed = v;
    }
    if let Some(v) = cli.epochs {
        cfg.train.epochs = v;
    }
    if let Some(v) = cli.nprobe {
        cfg.index.nprobe = v;
    }
    if let Some(v) = cli.topn {
        cfg.topn = v;
    }
    if let Some(v) = cli.margin_ms {
        cfg.margin_ms = v;
    }
    cfg.finalize()?;
    Ok(cfg)
}

fn load_tracks(manifest: &Path) -> Result<Vec<(String, WaveBuffer)>> {
    let bank = WaveBank::load_manifest(manifest)?;
    if bank.entries.is_empty() {
        return Err(Error::data(format!(
            "manifest {} lists no audio files",
            manifest.display()
        )));
    }
    Ok(bank.entries)
}

fn run(cli: Cli) -> Result<()> {
    let cfg = build_config(&cli)?;
    match &cli.command {
        Command::Train { manifest, out, metrics, noise_manifest, rir_manifest } => {
            let tracks: Vec<WaveBuffer> =
                load_tracks(manifest)?.into_iter().map(|(_, w)| w).collect();
            let mut aug_cfg: AugmentConfig = cfg.augment;
            let noise = match noise_manifest {
                Some(p) => WaveBank::load_manifest(p)?,
                None => {
                    if aug_cfg.apply_noise > 0.0 {
                        eprintln!("note: no noise manifest given, disabling noise augmentation");
                        aug_cfg.apply_noise = 0.0;
                    }
                    WaveBank::default()
                }
            };
            let rirs = match rir_manifest {
                Some(p) => WaveBank::load_manifest(p)?,
                None => {
                    if aug_cfg.apply_reverb > 0.0 {
                        eprintln!("note: no RIR manifest given, disabling reverb augmentation");
                        aug_cfg.apply_reverb = 0.0;
                    }
                    WaveBank::default()
                }
            };
            let augmenter = Augmenter::new(aug_cfg, noise, rirs)?;
            let mut encoder = Encoder::new(cfg.encoder.clone(), sub_seed(cfg.seed, "encoder"))?;
            let summary =
                fit(&tracks, &mut encoder, &augmenter, &cfg.train, out, metrics.as_deref())?;
            println!(
                "trained {} steps; best epoch {}; checkpoint {}",
                summary.steps,
                summary.best_epoch,
                summary.checkpoint.display()
            );
            Ok(())
        }
        Command::Fingerprint { manifest, checkpoint: ckpt, out_store, out_manifest } => {
            let encoder = checkpoint::load(ckpt)?;
            let extractor = MelExtractor::new(Default::default());
            let mut db = ReferenceDb::new(encoder.cfg.embed_dim, &cfg.segment);
            for (i, (source, wave)) in load_tracks(manifest)?.iter().enumerate() {
                let fps = fingerprint_track(wave, &encoder, &cfg.segment, &extractor)?;
                db.add_track(i as u64, source, &fps)?;
            }
            db.save(out_store, out_manifest)?;
            println!("fingerprinted {} tracks into {} segments", db.tracks.len(), db.len());
            Ok(())
        }
        Command::IndexBuild { store, manifest, out } => {
            let db = ReferenceDb::load(store, manifest)?;
            let mut icfg = cfg.index.clone();
            icfg.dim = db.dim;
            let mut index = IvfPqIndex::train(db.fingerprints(), icfg)?;
            let ids: Vec<u64> = (0..db.len() as u64).collect();
            index.add(db.fingerprints(), &ids)?;
            index.save(out)?;
            println!("indexed {} segments into {}", db.len(), out.display());
            Ok(())
        }
        Command::Query { audio, store, manifest, index, checkpoint: ckpt, min_score } => {
            let db = ReferenceDb::load(store, manifest)?;
            let index = IvfPqIndex::load(index)?;
            let encoder = checkpoint::load(ckpt)?;
            let extractor = MelExtractor::new(Default::default());
            let wave = load_wav_canonical(audio)?;
            let min_score = min_score.or(cfg.min_score);
            let result = identify(
                &wave, &db, &index, &encoder, &extractor, cfg.index.nprobe, cfg.topn, min_score,
            )?;
            match result {
                Some(m) => println!(
                    "match track_id={} start_segment={} start_ms={:.1} score={:.6} runner_up_margin={:.6}",
                    m.track_id, m.start_segment, m.start_ms, m.score, m.runner_up_margin
                ),
                None => println!("no-match"),
            }
            Ok(())
        }
        Command::Eval { queries, store, manifest, index, checkpoint: ckpt } => {
            let db = ReferenceDb::load(store, manifest)?;
            let index = IvfPqIndex::load(index)?;
            let encoder = checkpoint::load(ckpt)?;
            let list = parse_eval_list(queries)?;
            let report =
                evaluate(&list, &db, &index, &encoder, cfg.index.nprobe, cfg.topn, cfg.margin_ms)?;
            println!(
                "total={} correct={} top1_hit_rate={:.1} margin_ms={}",
                report.total, report.correct, report.top1_hit_rate, report.margin_ms
            );
            Ok(())
        }
        Command::Synth { out_dir, n_tracks, duration_s, kind } => {
            std::fs::create_dir_all(out_dir)?;
            let mut names = Vec::new();
            match kind {
                SynthKind::Track => {
                    synth::write_corpus(out_dir, *n_tracks, *duration_s, cfg.seed)?;
                    names = (0..*n_tracks).map(|i| format!("track_{i:03}.wav")).collect();
                }
                SynthKind::Noise | SynthKind::Rir => {
                    for i in 0..*n_tracks {
                        let s = sub_seed(cfg.seed, "synth").wrapping_add(i as u64);
                        let (wave, prefix) = match kind {
                            SynthKind::Noise => (synth::gen_noise(s, *duration_s), "noise"),
                            _ => (synth::gen_rir(s, *duration_s), "rir"),
                        };
                        let name = format!("{prefix}_{i:03}.wav");
                        write_wav(&out_dir.join(&name), &wave)?;
                        names.push(name);
                    }
                }
            }
            std::fs::write(out_dir.join("manifest.txt"), names.join("\n") + "\n")?;
            println!("wrote {} files to {}", names.len(), out_dir.display());
            Ok(())
        }
    }
}

fn parse_eval_list(path: &Path) -> Result<Vec<EvalQuery>> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| Error::data(format!("cannot read query list {}: {e}", path.display())))?;
    let base = path.parent().unwrap_or_else(|| Path::new("."));
    let mut out = Vec::new();
    for (lineno, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let fields: Vec<&str> = line.split('\t').collect();
        if fields.len() != 3 {
            return Err(Error::format(format!(
                "{} line {}: expected: path<TAB>track id<TAB>start ms",
                path.display(),
                lineno + 1
            )));
        }
        let p = Path::new(fields[0]);
        let full = if p.is_absolute() { p.to_path_buf() } else { base.join(p) };
        out.push(EvalQuery {
            wave: load_wav_canonical(&full)?,
            true_track: fields[1].parse().map_err(|_| Error::format("bad track id"))?,
            true_start_ms: fields[2].parse().map_err(|_| Error::format("bad start ms"))?,
        });
    }
    if out.is_empty() {
        return Err(Error::data(format!("query list {} is empty", path.display())));
    }
    Ok(out)
}
