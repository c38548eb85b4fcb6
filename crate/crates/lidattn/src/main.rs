//! Command-line surface: synthetic data generation, training,
//! evaluation, complexity benchmarking, and performer approximation
//! studies. All randomness flows from one `--seed` flag through named
//! sub-streams, so every subcommand is reproducible.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use lidattn::attention::{
    performer_attention, self_attention, AttentionConfig, FeatureMap, HeadTriplet, Mechanism,
};
use lidattn::bench::{emit_report, run_bench, BenchReport, BenchSpec};
use lidattn::dataio::{
    gen_synthetic, load_dataset, write_sequence, DatasetManifest, EmbeddingSequence,
    ManifestEntry, SyntheticSpec,
};
use lidattn::head::EvalReport;
use lidattn::numeric::{gaussian_matrix, BinaryMask, SeededRng};
use lidattn::training::{
    evaluate_model, load_checkpoint, save_checkpoint, train_loop, write_loss_log, LidModel,
    LrSchedule, TrainConfig,
};
use lidattn::{Error, Result};

#[derive(Parser)]
#[command(
    name = "lidattn",
    about = "Language-identification attention testbed: data, training, eval, benchmarks",
    version
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic embedding-sequence dataset
    GenData(GenDataArgs),
    /// Train a classifier and write a checkpoint plus loss log
    Train(TrainArgs),
    /// Evaluate a checkpoint on a dataset
    Eval(EvalArgs),
    /// Measure forward-pass wall-time scaling over sequence length
    Bench(BenchArgs),
    /// Compare kernelized attention against exact attention
    Approx(ApproxArgs),
}

/// Attention mechanism selection shared by train and bench.
#[derive(Args, Debug)]
struct MechArgs {
    /// Attention mechanism: self, performer, or agent
    #[arg(long, default_value = "self")]
    mechanism: Mechanism,
    /// Attention dimensionality (concatenated across heads)
    #[arg(long, default_value_t = 64)]
    d_attn: usize,
    /// Number of attention heads
    #[arg(long, default_value_t = 4)]
    heads: usize,
    /// Random feature count (performer only)
    #[arg(long)]
    r: Option<usize>,
    /// Use the literal 1/sqrt(r) scaling instead of row normalization
    /// (performer only)
    #[arg(long)]
    no_normalize: bool,
    /// Pooling stages, one of 2, 4, 6 (agent only)
    #[arg(long)]
    p: Option<usize>,
    /// Cap on the number of pooled agent tokens (agent only)
    #[arg(long)]
    n_cap: Option<usize>,
    /// Depth-wise convolution width, odd (agent only)
    #[arg(long)]
    dwc_width: Option<usize>,
}

impl MechArgs {
    fn build_config(&self, d_model: usize) -> Result<AttentionConfig> {
        if self.mechanism != Mechanism::Performer {
            for (set, flag) in [(self.r.is_some(), "--r"), (self.no_normalize, "--no-normalize")] {
                if set {
                    return Err(Error::InvalidArgument(format!(
                        "{} only applies to --mechanism performer",
                        flag
                    )));
                }
            }
        }
        if self.mechanism != Mechanism::Agent {
            for (set, flag) in [
                (self.p.is_some(), "--p"),
                (self.n_cap.is_some(), "--n-cap"),
                (self.dwc_width.is_some(), "--dwc-width"),
            ] {
                if set {
                    return Err(Error::InvalidArgument(format!(
                        "{} only applies to --mechanism agent",
                        flag
                    )));
                }
            }
        }
        let mut config = AttentionConfig::new(self.mechanism, d_model, self.d_attn, self.heads);
        if let Some(r) = self.r {
            config.r = r;
        }
        config.performer_normalized = !self.no_normalize;
        if let Some(p) = self.p {
            config.p = p;
        }
        config.n_cap = self.n_cap;
        if let Some(w) = self.dwc_width {
            config.dwc_width = w;
        }
        config.validate()?;
        Ok(config)
    }
}

#[derive(Args)]
struct GenDataArgs {
    /// Output directory (one subdirectory per split)
    #[arg(long)]
    out: PathBuf,
    /// Number of language classes
    #[arg(long, default_value_t = 5)]
    classes: usize,
    /// Embedding dimensionality
    #[arg(long, default_value_t = 32)]
    d_model: usize,
    /// Training sequences per class
    #[arg(long, default_value_t = 100)]
    train_per_class: usize,
    /// Dev sequences per class (0 skips the split)
    #[arg(long, default_value_t = 50)]
    dev_per_class: usize,
    /// Test sequences per class (0 skips the split)
    #[arg(long, default_value_t = 50)]
    test_per_class: usize,
    /// Minimum sequence length in frames
    #[arg(long, default_value_t = 20)]
    n_min: usize,
    /// Maximum sequence length in frames
    #[arg(long, default_value_t = 40)]
    n_max: usize,
    /// Norm of each class mean
    #[arg(long, default_value_t = 4.0)]
    class_mean_scale: f64,
    /// Per-frame isotropic noise scale
    #[arg(long, default_value_t = 1.0)]
    noise_scale: f64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Overwrite an existing output directory
    #[arg(long)]
    force: bool,
}

#[derive(Args)]
struct TrainArgs {
    /// Training manifest (JSON)
    #[arg(long)]
    train: PathBuf,
    /// Optional dev manifest for checkpoint selection
    #[arg(long)]
    dev: Option<PathBuf>,
    #[command(flatten)]
    mech: MechArgs,
    /// Dropout rate on the context matrix and pooled descriptor
    #[arg(long, default_value_t = 0.2)]
    dropout: f64,
    /// Peak learning rate
    #[arg(long, default_value_t = 1e-4)]
    lr: f64,
    /// Linear warmup steps
    #[arg(long, default_value_t = 20)]
    warmup: u64,
    /// Linear decay steps after warmup
    #[arg(long, default_value_t = 480)]
    decay: u64,
    /// Optimizer steps to run
    #[arg(long, default_value_t = 200)]
    steps: u64,
    #[arg(long, default_value_t = 16)]
    batch_size: usize,
    /// Evaluate the dev set every this many steps
    #[arg(long, default_value_t = 20)]
    eval_every: u64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Output directory for the checkpoint and loss log
    #[arg(long)]
    out: PathBuf,
    /// Overwrite an existing output directory
    #[arg(long)]
    force: bool,
}

#[derive(Args)]
struct EvalArgs {
    /// Checkpoint to evaluate
    #[arg(long)]
    model: PathBuf,
    /// Dataset manifest (JSON)
    #[arg(long)]
    data: PathBuf,
    /// Optional path for the JSON evaluation report
    #[arg(long)]
    report: Option<PathBuf>,
}

#[derive(Args)]
struct BenchArgs {
    /// Comma-separated mechanisms to sweep
    #[arg(long, value_delimiter = ',', default_value = "self,performer,agent")]
    mechanisms: Vec<Mechanism>,
    /// Comma-separated sequence-length grid (strictly increasing)
    #[arg(long, value_delimiter = ',', default_value = "512,1024,2048,4096,8192")]
    sizes: Vec<usize>,
    /// Timed repetitions per grid point
    #[arg(long, default_value_t = 5)]
    reps: usize,
    /// Discarded warmup runs per grid point
    #[arg(long, default_value_t = 2)]
    warmup: usize,
    #[arg(long, default_value_t = 64)]
    d_model: usize,
    /// Attention dimensionality; benchmarks run single-headed
    #[arg(long, default_value_t = 64)]
    d_attn: usize,
    /// Random feature count for the performer sweep
    #[arg(long, default_value_t = 64)]
    r: usize,
    /// Agent pooling: "capped" fixes the agent count at --n-cap,
    /// "scaling" lets it grow with the sequence length
    #[arg(long, default_value = "capped")]
    agent_mode: String,
    /// Agent-token cap in capped mode
    #[arg(long, default_value_t = 64)]
    n_cap: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Output directory for the CSV/JSON report
    #[arg(long)]
    out: PathBuf,
    /// Also write a gnuplot script next to the CSV
    #[arg(long)]
    gnuplot: bool,
    /// Overwrite an existing output directory
    #[arg(long)]
    force: bool,
}

#[derive(Args)]
struct ApproxArgs {
    /// Comma-separated random-feature counts to sweep
    #[arg(long, value_delimiter = ',', default_value = "16,64,256")]
    r_values: Vec<usize>,
    /// Independent feature-map draws per r
    #[arg(long, default_value_t = 32)]
    seeds: u64,
    /// Sequence length
    #[arg(long, default_value_t = 64)]
    n: usize,
    /// Per-head dimensionality
    #[arg(long, default_value_t = 16)]
    d_head: usize,
    /// Standard deviation of the random query/key/value entries. The
    /// feature map's variance grows sharply with the kernel argument,
    /// so large scales need far more features for the same error.
    #[arg(long, default_value_t = 0.25)]
    input_scale: f64,
    /// Use the literal 1/sqrt(r) scaling instead of row normalization
    #[arg(long)]
    no_normalize: bool,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Optional CSV output (r, seed, error)
    #[arg(long)]
    out: Option<PathBuf>,
}

fn prepare_out_dir(path: &Path, force: bool) -> Result<()> {
    if path.exists() {
        if !force {
            return Err(Error::InvalidArgument(format!(
                "output directory {} exists; pass --force to overwrite",
                path.display()
            )));
        }
    } else {
        fs::create_dir_all(path)?;
    }
    Ok(())
}

fn write_split(
    dir: &Path,
    split: &str,
    data: &[EmbeddingSequence],
    d_model: usize,
    classes: usize,
) -> Result<()> {
    let split_dir = dir.join(split);
    fs::create_dir_all(&split_dir)?;
    let mut entries = Vec::with_capacity(data.len());
    for seq in data {
        let file = format!("{}.embseq", seq.id);
        write_sequence(&split_dir.join(&file), seq)?;
        entries.push(ManifestEntry {
            path: file,
            label: seq.label,
            n: seq.len(),
        });
    }
    let manifest = DatasetManifest {
        d_model,
        labels: (0..classes).map(|c| format!("lang{:02}", c)).collect(),
        entries,
    };
    manifest.save(&split_dir.join("manifest.json"))?;
    Ok(())
}

fn summarize_split(split: &str, data: &[EmbeddingSequence], classes: usize) {
    let mut counts = vec![0usize; classes];
    let mut min_n = usize::MAX;
    let mut max_n = 0usize;
    let mut sum_n = 0usize;
    for seq in data {
        counts[seq.label] += 1;
        min_n = min_n.min(seq.len());
        max_n = max_n.max(seq.len());
        sum_n += seq.len();
    }
    println!(
        "{}: {} sequences, per-class {:?}, length min/mean/max = {}/{:.1}/{}",
        split,
        data.len(),
        counts,
        min_n,
        sum_n as f64 / data.len() as f64,
        max_n
    );
}

fn cmd_gen_data(args: &GenDataArgs) -> Result<()> {
    prepare_out_dir(&args.out, args.force)?;
    let base = SeededRng::new(args.seed);
    let splits: [(&str, usize); 3] = [
        ("train", args.train_per_class),
        ("dev", args.dev_per_class),
        ("test", args.test_per_class),
    ];
    for (split, per_class) in splits {
        if per_class == 0 {
            continue;
        }
        let spec = SyntheticSpec {
            classes: args.classes,
            d_model: args.d_model,
            n_min: args.n_min,
            n_max: args.n_max,
            class_mean_scale: args.class_mean_scale,
            noise_scale: args.noise_scale,
            // Class means are tied to the seed, so every split shares
            // them while frame noise differs per split.
            seed: args.seed,
        };
        let mut data = gen_synthetic(&spec, per_class)?;
        if split != "train" {
            // Redraw the frames with a split-specific stream so splits
            // do not duplicate sequences.
            let mut rng = base.derive(&format!("split-{}", split));
            let means = spec.class_means();
            for seq in &mut data {
                let mean = &means[seq.label];
                for i in 0..seq.x.rows() {
                    for (j, m) in mean.iter().enumerate() {
                        seq.x.set(i, j, m + spec.noise_scale * rng.next_normal());
                    }
                }
                seq.id = format!("{}_{}", split, seq.id);
            }
        }
        write_split(&args.out, split, &data, args.d_model, args.classes)?;
        summarize_split(split, &data, args.classes);
    }
    Ok(())
}

fn cmd_train(args: &TrainArgs) -> Result<()> {
    prepare_out_dir(&args.out, args.force)?;
    let (manifest, train_data) = load_dataset(&args.train)?;
    let dev_data = match &args.dev {
        Some(path) => {
            let (dev_manifest, data) = load_dataset(path)?;
            if dev_manifest.d_model != manifest.d_model
                || dev_manifest.labels != manifest.labels
            {
                return Err(Error::Config(
                    "dev manifest labels or d_model disagree with the training manifest".into(),
                ));
            }
            Some(data)
        }
        None => None,
    };
    let config = args.mech.build_config(manifest.d_model)?;
    let rng = SeededRng::new(args.seed);
    let mut model = LidModel::init(&config, manifest.labels.len(), &rng)?;
    let sched = LrSchedule {
        base_lr: args.lr,
        warmup_steps: args.warmup,
        decay_steps: args.decay,
    };
    let tcfg = TrainConfig {
        dropout_rate: args.dropout,
        batch_size: args.batch_size,
        max_steps: args.steps,
        seed: args.seed,
        eval_every: args.eval_every,
    };
    let outcome = train_loop(&mut model, &train_data, dev_data.as_deref(), &tcfg, &sched)?;
    write_loss_log(&args.out.join("loss.csv"), &outcome.log)?;
    save_checkpoint(&args.out.join("model.ckpt"), &model, None, args.steps)?;
    if let Some(loss) = outcome.log.last().map(|l| l.loss) {
        println!("final training loss {:.4} after {} steps", loss, args.steps);
    }
    match (outcome.best_dev_acc, outcome.best_step) {
        (Some(acc), Some(step)) => {
            println!("best dev accuracy {:.2} at step {} (checkpoint restored)", 100.0 * acc, step)
        }
        _ => println!("no dev set supplied; kept the final model"),
    }
    println!("wrote {}", args.out.join("model.ckpt").display());
    Ok(())
}

fn cmd_eval(args: &EvalArgs) -> Result<()> {
    let (model, _, _) = load_checkpoint(&args.model)?;
    let (manifest, data) = load_dataset(&args.data)?;
    if manifest.d_model != model.config.d_model || manifest.labels.len() != model.classes {
        return Err(Error::Config(format!(
            "checkpoint/data mismatch: model expects d_model {} with {} classes, manifest has d_model {} with {} classes",
            model.config.d_model,
            model.classes,
            manifest.d_model,
            manifest.labels.len()
        )));
    }
    let report = evaluate_model(&model, &data)?;
    print_report(&report);
    if let Some(path) = &args.report {
        let file = fs::File::create(path)?;
        serde_json::to_writer_pretty(std::io::BufWriter::new(file), &report)?;
        println!("wrote {}", path.display());
    }
    Ok(())
}

fn print_report(report: &EvalReport) {
    println!(
        "Acc {:.2}  Macro-F1 {:.2}",
        100.0 * report.accuracy,
        100.0 * report.macro_f1
    );
}

/// Slope bands expected on the default grid; purely informational for
/// non-default flags.
fn slope_band(mechanism: Mechanism, capped_agent: bool) -> Option<(f64, f64)> {
    match mechanism {
        Mechanism::SelfAttn => Some((1.6, 2.4)),
        Mechanism::Performer => Some((0.8, 1.3)),
        Mechanism::Agent if capped_agent => Some((0.8, 1.4)),
        Mechanism::Agent => None,
    }
}

fn cmd_bench(args: &BenchArgs) -> Result<()> {
    prepare_out_dir(&args.out, args.force)?;
    let capped_agent = match args.agent_mode.as_str() {
        "capped" => true,
        "scaling" => false,
        other => {
            return Err(Error::InvalidArgument(format!(
                "--agent-mode must be 'capped' or 'scaling', got '{}'",
                other
            )))
        }
    };
    let mut reports: Vec<BenchReport> = Vec::new();
    for &mechanism in &args.mechanisms {
        // Single-headed forwards isolate the mechanism kernel.
        let mut config = AttentionConfig::new(mechanism, args.d_model, args.d_attn, 1);
        config.r = args.r;
        if mechanism == Mechanism::Agent {
            if capped_agent {
                config.p = 2;
                config.n_cap = Some(args.n_cap);
            } else {
                config.p = 4;
                config.n_cap = None;
            }
        }
        let spec = BenchSpec {
            config,
            sizes: args.sizes.clone(),
            reps: args.reps,
            warmup: args.warmup,
            seed: args.seed,
        };
        let report = run_bench(&spec)?;
        let verdict = match slope_band(mechanism, capped_agent) {
            Some((lo, hi)) => {
                if report.slope >= lo && report.slope <= hi {
                    format!("PASS (band [{}, {}])", lo, hi)
                } else {
                    format!("FAIL (band [{}, {}])", lo, hi)
                }
            }
            None => "informational (agent count grows with N)".to_string(),
        };
        println!(
            "{}: slope {:.3} (r^2 {:.4}) {}",
            mechanism, report.slope, report.r2, verdict
        );
        reports.push(report);
    }
    let csv = args.out.join("bench.csv");
    let json = args.out.join("bench.json");
    let plot = args.out.join("bench.gp");
    emit_report(&csv, &json, args.gnuplot.then_some(plot.as_path()), &reports)?;
    println!("wrote {} and {}", csv.display(), json.display());
    Ok(())
}

/// Relative Frobenius error of the kernelized context against the exact
/// one for a single feature-map draw.
fn approx_error(
    n: usize,
    d_head: usize,
    r: usize,
    input_scale: f64,
    normalized: bool,
    input_rng: &SeededRng,
    omega_rng: &mut SeededRng,
) -> Result<f64> {
    let head = HeadTriplet {
        q: gaussian_matrix(&mut input_rng.derive("q"), n, d_head).scale(input_scale),
        k: gaussian_matrix(&mut input_rng.derive("k"), n, d_head).scale(input_scale),
        v: gaussian_matrix(&mut input_rng.derive("v"), n, d_head).scale(input_scale),
    };
    let mask = BinaryMask::all_valid(n)?;
    let (exact, _) = self_attention(&head, &mask)?;
    let fm = FeatureMap::new(omega_rng, r, d_head);
    let approx = performer_attention(&head, &fm, &mask, normalized)?;
    let denom = exact.frobenius_norm().max(1e-300);
    let diff: f64 = exact
        .data()
        .iter()
        .zip(approx.data())
        .map(|(a, b)| (a - b) * (a - b))
        .sum();
    Ok(diff.sqrt() / denom)
}

fn median_of(values: &[f64]) -> f64 {
    let mut sorted = values.to_vec();
    sorted.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let mid = sorted.len() / 2;
    if sorted.len() % 2 == 1 {
        sorted[mid]
    } else {
        0.5 * (sorted[mid - 1] + sorted[mid])
    }
}

fn cmd_approx(args: &ApproxArgs) -> Result<()> {
    if args.r_values.is_empty() || args.seeds == 0 {
        return Err(Error::InvalidArgument("need at least one r and one seed".into()));
    }
    let base = SeededRng::new(args.seed);
    let mut csv_lines = vec!["r,seed,error".to_string()];
    for &r in &args.r_values {
        let mut errors = Vec::with_capacity(args.seeds as usize);
        for draw in 0..args.seeds {
            // Same inputs for every r; only the feature map is redrawn.
            let input_rng = base.derive(&format!("approx-input-{}", draw));
            let mut omega_rng = base.derive(&format!("approx-omega-{}-{}", r, draw));
            let err = approx_error(
                args.n,
                args.d_head,
                r,
                args.input_scale,
                !args.no_normalize,
                &input_rng,
                &mut omega_rng,
            )?;
            csv_lines.push(format!("{},{},{}", r, draw, err));
            errors.push(err);
        }
        println!("r = {:4}: median relative error {:.4}", r, median_of(&errors));
    }
    if let Some(path) = &args.out {
        fs::write(path, csv_lines.join("\n") + "\n")?;
        println!("wrote {}", path.display());
    }
    Ok(())
}

fn run() -> Result<()> {
    match Cli::parse().command {
        Command::GenData(args) => cmd_gen_data(&args),
        Command::Train(args) => cmd_train(&args),
        Command::Eval(args) => cmd_eval(&args),
        Command::Bench(args) => cmd_bench(&args),
        Command::Approx(args) => cmd_approx(&args),
    }
}

fn main() -> ExitCode {
    match run() {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {}", e);
            ExitCode::FAILURE
        }
    }
}
