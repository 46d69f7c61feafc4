use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};
use trace_core::analysis::{
    experts_in_at_least, jaccard_overlap, routing_stats, universal_experts, write_expert_csv, write_jaccard_csv,
    write_top_sets_csv, RankBy,
};
use trace_core::autodiff::Graph;
use trace_core::config::RunConfig;
use trace_core::data::{
    preprocess, read_segment, synth_corpus, window_standardize, write_segment, ClassRule, CorpusManifest, ManifestEntry,
    Split, SynthSpec,
};
use trace_core::encoder::{EncoderInput, PatchGrid};
use trace_core::finetune::{finetune_run, Classifier, LabeledSplits};
use trace_core::selfcheck::gradcheck_suite;
use trace_core::train::{pretrain_run, Checkpoint, PretrainData, RunPaths, Trainer};
use trace_core::{Error, Result};

#[derive(Parser)]
#[command(name = "trace", version, about = "Autoregressive EEG pre-training toolkit")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, ValueEnum)]
enum Rank {
    Gate,
    Frequency,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a deterministic sinusoid-plus-noise corpus
    Synth {
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 16)]
        count: usize,
        #[arg(long, default_value_t = 8)]
        channels: usize,
        #[arg(long, default_value_t = 10.0)]
        duration: f64,
        #[arg(long, default_value_t = 200.0)]
        rate: f64,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Label segments with a dominant theta/alpha/beta band of this amplitude
        #[arg(long)]
        class_amplitude: Option<f64>,
        /// Phase random walk of each oscillation, rad/sqrt(s)
        #[arg(long, default_value_t = 0.7)]
        phase_diffusion: f64,
        /// Contiguous train,val,test segment counts, e.g. 300,60,60
        #[arg(long, value_delimiter = ',')]
        split: Option<Vec<usize>>,
        #[arg(long, default_value = "synth")]
        source: String,
    },
    /// Band-pass, notch and resample every segment of a manifest
    Prep {
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, value_delimiter = ',', default_values_t = [0.5, 75.0])]
        band: Vec<f64>,
        #[arg(long)]
        notch: Option<f64>,
        #[arg(long, default_value_t = 200.0)]
        rate: f64,
        /// Also cut z-scored windows of this many seconds
        #[arg(long)]
        window: Option<f64>,
        #[arg(long, default_value_t = 200)]
        patch_len: usize,
    },
    /// Pre-train with the autoregressive objective
    Pretrain {
        #[arg(long, required_unless_present = "resume")]
        config: Option<PathBuf>,
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Continue from a checkpoint written by an earlier run
        #[arg(long)]
        resume: Option<PathBuf>,
        /// Stop after this many completed steps instead of the configured total
        #[arg(long)]
        until: Option<u64>,
    },
    /// Fine-tune a classifier on a labelled manifest with train/val/test splits
    Finetune {
        #[arg(long, required_unless_present = "checkpoint")]
        config: Option<PathBuf>,
        #[arg(long)]
        manifest: PathBuf,
        /// Pre-trained weights; random initialisation when absent
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        #[arg(long)]
        freeze: bool,
        /// Write the metric report here as well as to stdout
        #[arg(long)]
        report: Option<PathBuf>,
    },
    /// Roll out horizon-1 forecasts from a prefix of a segment
    Forecast {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        segment: PathBuf,
        /// Observed patches fed before the rollout starts
        #[arg(long, default_value_t = 4)]
        prefix: usize,
        /// Patches to generate
        #[arg(long, default_value_t = 4)]
        steps: usize,
        #[arg(long)]
        out: PathBuf,
    },
    /// Summarise expert routing over a manifest
    InspectRouting {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        manifest: PathBuf,
        /// Per-expert CSV: expert,f_k,mean_gate
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        top_sets: Option<PathBuf>,
        #[arg(long)]
        jaccard: Option<PathBuf>,
        #[arg(long, value_enum, default_value_t = Rank::Gate)]
        rank_by: Rank,
        /// Use at most this many windows
        #[arg(long)]
        max_windows: Option<usize>,
    },
    /// Finite-difference gradient check of every module and loss
    Gradcheck {
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = 3)]
        channels: usize,
        #[arg(long, default_value_t = 4)]
        steps: usize,
        /// Coordinates probed per tensor
        #[arg(long, default_value_t = 16)]
        coords: usize,
    },
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 2 } else { 0 });
        }
    };
    match run(cli.command) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::from(1),
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(1)
        }
    }
}

fn run(cmd: Command) -> Result<bool> {
    match cmd {
        Command::Synth {
            out,
            count,
            channels,
            duration,
            rate,
            seed,
            class_amplitude,
            phase_diffusion,
            split,
            source,
        } => {
            let mut spec = SynthSpec::sinusoid(seed, channels, duration, rate);
            spec.source_tag = source;
            spec.phase_diffusion = phase_diffusion;
            if let Some(a) = class_amplitude {
                spec = spec.with_class_rule(ClassRule::theta_alpha_beta(a));
            }
            let m = synth_corpus(&spec, count, &out)?;
            if let Some(s) = split {
                assign_splits(&m, &s)?.save(out.join("manifest.tsv"))?;
            }
            println!("wrote {count} segments and {}", out.join("manifest.tsv").display());
        }
        Command::Prep {
            manifest,
            out,
            band,
            notch,
            rate,
            window,
            patch_len,
        } => {
            let [low, high] = band[..] else {
                return Err(Error::Param("--band takes two values, low,high".into()));
            };
            prep(&manifest, &out, (low, high), notch, rate, window, patch_len)?
        }
        Command::Pretrain {
            config,
            manifest,
            out,
            resume,
            until,
        } => {
            let mut trainer = match &resume {
                Some(p) => Trainer::from_checkpoint(&Checkpoint::load(p)?)?,
                None => Trainer::new(RunConfig::load(config.as_ref().expect("clap requires config"))?)?,
            };
            let m = CorpusManifest::load(&manifest)?;
            let data = PretrainData::from_manifest(&m, &trainer.config)?;
            fs::create_dir_all(&out).map_err(|e| io(&out, e))?;
            fs::write(out.join("config.cfg"), trainer.config.to_text()).map_err(|e| io(&out, e))?;
            let paths = RunPaths { dir: out };
            let until = until.unwrap_or(trainer.config.train.steps);
            let reports = pretrain_run(&mut trainer, &data, until, Some(&paths), |_| {})?;
            match reports.last() {
                Some(r) => println!("step {} loss {:.6}", r.step, r.loss.total),
                None => println!("nothing to do at step {}", trainer.step()),
            }
            println!("checkpoint {}", paths.final_checkpoint().display());
        }
        Command::Finetune {
            config,
            manifest,
            checkpoint,
            freeze,
            report,
        } => {
            let ck = checkpoint.as_ref().map(Checkpoint::load).transpose()?;
            let mut cfg = match (&config, &ck) {
                (Some(p), _) => RunConfig::load(p)?,
                (None, Some(ck)) => ck.config.clone(),
                (None, None) => unreachable!("clap requires config or checkpoint"),
            };
            if let Some(ck) = &ck {
                cfg.model = ck.config.model.clone();
                cfg.loss = ck.config.loss.clone();
            }
            cfg.finetune.freeze_backbone |= freeze;
            let f = &cfg.finetune;
            let mut clf = match &ck {
                Some(ck) => Classifier::from_pretrained(ck, f.classes, f.seed)?,
                None => Classifier::new(&cfg, f.classes, f.seed)?,
            };
            let m = CorpusManifest::load(&manifest)?;
            let windows = trace_core::data::load_windows(&m, cfg.train.window_s, cfg.model.patch_len)?;
            let splits = LabeledSplits::from_windows(&windows, cfg.model.patch_len, f.classes)?;
            let outcome = finetune_run(&mut clf, &splits, f, cfg.train.clip)?;
            let mut text = format!(
                "best_step: {}\nbest_val_balanced_accuracy: {:.6}\n",
                outcome.best_step, outcome.best_val_balanced_accuracy
            );
            text.push_str(&outcome.test.to_text());
            print!("{text}");
            if let Some(p) = report {
                fs::write(&p, text).map_err(|e| io(&p, e))?;
            }
        }
        Command::Forecast {
            checkpoint,
            segment,
            prefix,
            steps,
            out,
        } => forecast(&checkpoint, &segment, prefix, steps, &out)?,
        Command::InspectRouting {
            checkpoint,
            manifest,
            out,
            top_sets,
            jaccard,
            rank_by,
            max_windows,
        } => inspect(&checkpoint, &manifest, &out, top_sets, jaccard, rank_by, max_windows)?,
        Command::Gradcheck {
            seed,
            channels,
            steps,
            coords,
        } => {
            let checks = gradcheck_suite(seed, channels, steps, coords)?;
            println!("module\tmax_rel_error\tchecked\tskipped\tstatus");
            for c in &checks {
                let status = if c.passed { "ok" } else { "FAIL" };
                println!("{}\t{:.3e}\t{}\t{}\t{status}", c.module, c.max_rel_error, c.checked, c.skipped);
            }
            return Ok(checks.iter().all(|c| c.passed));
        }
    }
    Ok(true)
}

fn io(path: &Path, e: std::io::Error) -> Error {
    Error::Io {
        path: path.to_path_buf(),
        source: e,
    }
}

fn assign_splits(m: &CorpusManifest, counts: &[usize]) -> Result<CorpusManifest> {
    if counts.len() != 3 {
        return Err(Error::Param("--split takes three counts, train,val,test".into()));
    }
    let total: usize = counts.iter().sum();
    if total != m.len() {
        return Err(Error::Param(format!("split counts sum to {total}, corpus has {} segments", m.len())));
    }
    let kinds = [Split::Train, Split::Val, Split::Test];
    let mut entries = m.entries().to_vec();
    let mut i = 0;
    for (&n, kind) in counts.iter().zip(kinds) {
        for e in &mut entries[i..i + n] {
            e.split = Some(kind);
        }
        i += n;
    }
    Ok(CorpusManifest::new(entries))
}

fn prep(
    manifest: &Path,
    out: &Path,
    band: (f64, f64),
    notch: Option<f64>,
    rate: f64,
    window: Option<f64>,
    patch_len: usize,
) -> Result<()> {
    let m = CorpusManifest::load(manifest)?;
    fs::create_dir_all(out).map_err(|e| io(out, e))?;
    let mut entries = Vec::new();
    for e in m.entries() {
        let seg = preprocess(&read_segment(&e.path)?, band, notch, rate)?;
        let stem = e.path.file_stem().and_then(|s| s.to_str()).unwrap_or("segment").to_string();
        let pieces = match window {
            Some(w) => window_standardize(&seg, w, patch_len)?,
            None => vec![seg],
        };
        for (k, piece) in pieces.iter().enumerate() {
            let name = if window.is_some() {
                format!("{stem}_w{k:04}.trce")
            } else {
                format!("{stem}.trce")
            };
            write_segment(piece, out.join(&name))?;
            entries.push(ManifestEntry {
                path: out.join(name),
                ..e.clone()
            });
        }
    }
    let mut prepared = CorpusManifest::new(entries);
    for s in m.sources() {
        prepared.set_weight(s.clone(), m.weight(&s))?;
    }
    prepared.save(out.join("manifest.tsv"))?;
    println!("wrote {} segments and {}", prepared.len(), out.join("manifest.tsv").display());
    Ok(())
}

/// Feeds the first `prefix` patches, then repeatedly appends the model's
/// horizon-1 forecast of the next patch.
fn forecast(checkpoint: &Path, segment: &Path, prefix: usize, steps: usize, out: &Path) -> Result<()> {
    let ck = Checkpoint::load(checkpoint)?;
    let trainer = Trainer::from_checkpoint(&ck)?;
    let (model, store) = (&trainer.model, &trainer.store);
    let Some(h1) = model.horizons().iter().position(|&h| h == 1) else {
        return Err(Error::Config("model has no horizon-1 head".into()));
    };
    let t = model.config.patch_len;
    let window = window_standardize(&read_segment(segment)?, ck.config.train.window_s, t)?.remove(0);
    let observed = EncoderInput::from_window(&window, t)?.grid;
    let (c, n) = (observed.channels(), observed.steps());
    if prefix == 0 || prefix > n || steps == 0 {
        return Err(Error::Param(format!("prefix must lie in 1..={n} and steps be positive")));
    }
    let mut rows: Vec<Vec<f64>> = observed.prefix(prefix)?.unpatchify();
    let mut w = csv_writer(out)?;
    w.write_record(["step", "channel", "offset", "predicted", "observed"]).map_err(|e| csv_err(out, e))?;
    for s in 0..steps {
        let len = prefix + s;
        let grid = PatchGrid::new(c, len, t, rows.concat())?;
        let mut g = Graph::new();
        let f = model.forward(&mut g, store, &EncoderInput::new(grid))?;
        let pred = g.value(f.preds[h1]);
        for (ch, row) in rows.iter_mut().enumerate() {
            let r = ch * len + len - 1;
            let next = &pred[r * t..(r + 1) * t];
            for (k, &v) in next.iter().enumerate() {
                let obs = if len < n { observed.patch(ch, len)[k].to_string() } else { String::new() };
                w.write_record([len.to_string(), ch.to_string(), k.to_string(), v.to_string(), obs])
                    .map_err(|e| csv_err(out, e))?;
            }
            row.extend_from_slice(next);
        }
    }
    w.flush().map_err(|e| io(out, e))?;
    println!("wrote {steps} forecast steps to {}", out.display());
    Ok(())
}

fn csv_writer(path: &Path) -> Result<csv::Writer<fs::File>> {
    csv::Writer::from_path(path).map_err(|e| csv_err(path, e))
}

fn csv_err(path: &Path, e: csv::Error) -> Error {
    Error::Format {
        path: path.to_path_buf(),
        msg: e.to_string(),
    }
}

fn inspect(
    checkpoint: &Path,
    manifest: &Path,
    out: &Path,
    top_sets: Option<PathBuf>,
    jaccard: Option<PathBuf>,
    rank_by: Rank,
    max_windows: Option<usize>,
) -> Result<()> {
    let ck = Checkpoint::load(checkpoint)?;
    let trainer = Trainer::from_checkpoint(&ck)?;
    let (model, store) = (&trainer.model, &trainer.store);
    let m = CorpusManifest::load(manifest)?;
    let mut windows = trace_core::data::load_windows(&m, ck.config.train.window_s, model.config.patch_len)?;
    if let Some(k) = max_windows {
        windows.truncate(k);
    }
    let records = trace_core::par::map(&windows, |w| -> Result<_> {
        let mut g = Graph::new();
        let f = model.forward(&mut g, store, &EncoderInput::from_window(&w.segment, model.config.patch_len)?)?;
        Ok(f.routing)
    })
    .into_iter()
    .collect::<Result<Vec<_>>>()?;
    let rank = match rank_by {
        Rank::Gate => RankBy::MeanGate,
        Rank::Frequency => RankBy::Frequency,
    };
    let summary = routing_stats(windows.iter().map(|w| w.source.as_str()).zip(&records), rank)?;
    write_expert_csv(&summary, out)?;
    if let Some(p) = &top_sets {
        write_top_sets_csv(&summary, p)?;
    }

    let mut text = String::new();
    let _ = writeln!(text, "experts: {}", summary.experts);
    let _ = writeln!(text, "top_k: {}", summary.k);
    let _ = writeln!(text, "decisions: {}", summary.decisions);
    let _ = writeln!(text, "max_share: {:.6}", summary.max_share());
    let _ = writeln!(text, "usage_entropy: {:.6}", summary.usage_entropy());
    let _ = writeln!(text, "dead_experts: {}", summary.dead_experts());
    for (tag, d) in &summary.datasets {
        let top: Vec<String> = d.top.iter().map(|e| e.to_string()).collect();
        let _ = writeln!(text, "top_set[{tag}]: {}", top.join(","));
    }
    let names: Vec<String> = summary.datasets.keys().cloned().collect();
    let sets = summary.top_sets();
    if sets.len() >= 2 {
        let j = jaccard_overlap(&sets)?;
        let _ = writeln!(text, "mean_jaccard: {:.6}", j.mean);
        let _ = writeln!(text, "universal_experts: {}", universal_experts(&sets).len());
        let _ = writeln!(text, "experts_in_3_or_more: {}", experts_in_at_least(&sets, 3).len());
        if let Some(p) = &jaccard {
            write_jaccard_csv(&names, &j, p)?;
        }
    } else if jaccard.is_some() {
        log::warn!("Jaccard overlap needs at least two sources; no matrix written");
    }
    print!("{text}");
    Ok(())
}
