use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::Parser;

use cosdefense::attacks::AttackKind;
use cosdefense::config::{DatasetKind, ExperimentConfig};
use cosdefense::defenses::DefenseKind;
use cosdefense::experiment::{
    load_datasets, replay, run_experiment, run_sweep, SweepAxis, SWEEP_DEFENSES,
};
use cosdefense::metrics::{layerwise_similarity_experiment, LayerSimilarityConfig};

/// Federated learning poisoning simulator with cosine-similarity client filtering.
///
/// Values given on the command line override those from `--config`.
#[derive(Debug, Parser)]
#[command(name = "cosdefense", version)]
struct Args {
    /// TOML experiment configuration.
    #[arg(long)]
    config: Option<PathBuf>,
    /// mnist, fmnist or synthetic.
    #[arg(long)]
    dataset: Option<DatasetKind>,
    /// Directory holding the uncompressed IDX files.
    #[arg(long)]
    data_dir: Option<PathBuf>,
    #[arg(long)]
    clients: Option<usize>,
    #[arg(long)]
    rounds: Option<usize>,
    #[arg(long)]
    sample_rate: Option<f64>,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    batch: Option<usize>,
    #[arg(long)]
    local_iters: Option<usize>,
    /// Label-skew level in [1/C, 1].
    #[arg(long)]
    q: Option<f64>,
    #[arg(long)]
    malicious_frac: Option<f64>,
    /// none, ipm, label_flip, sign_flip or gauss_noise.
    #[arg(long)]
    attack: Option<AttackKind>,
    #[arg(long)]
    ipm_eps: Option<f64>,
    #[arg(long)]
    noise_sigma: Option<f64>,
    #[arg(long)]
    attack_start: Option<usize>,
    /// none, cos_defense, krum, multi_krum, median or clipping_median.
    #[arg(long)]
    defense: Option<DefenseKind>,
    #[arg(long)]
    krum_f: Option<usize>,
    #[arg(long)]
    clip_bound: Option<f64>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    eval_every: Option<usize>,
    /// Train sampled clients one after another instead of in parallel.
    #[arg(long)]
    serial: bool,
    /// Output directory.
    #[arg(long, default_value = "out")]
    out: PathBuf,
    /// Sweep `malicious_frac` or `q` against cos_defense, krum and clipping_median.
    #[arg(long, value_name = "AXIS")]
    sweep: Option<SweepAxis>,
    /// Comma-separated sweep values (defaults depend on the axis).
    #[arg(long, value_delimiter = ',', requires = "sweep")]
    values: Option<Vec<f64>>,
    /// Re-run the configuration recorded in a manifest.json into `--out`.
    #[arg(long, value_name = "MANIFEST", conflicts_with = "sweep")]
    replay: Option<PathBuf>,
    /// Train clients independently and report per-layer weight similarity.
    #[arg(long, conflicts_with_all = ["sweep", "replay"])]
    layer_similarity: bool,
    /// Iterations for `--layer-similarity`.
    #[arg(long, default_value_t = 1000)]
    iters: usize,
}

impl Args {
    fn resolve_config(&self) -> Result<ExperimentConfig> {
        let mut cfg = match &self.config {
            Some(p) => ExperimentConfig::from_toml_file(p)?,
            None => ExperimentConfig::default(),
        };
        macro_rules! set {
            ($flag:ident => $($field:tt)+) => {
                if let Some(v) = self.$flag.clone() {
                    cfg.$($field)+ = v;
                }
            };
        }
        set!(dataset => dataset);
        set!(clients => clients);
        set!(rounds => rounds);
        set!(sample_rate => sample_rate);
        set!(lr => lr);
        set!(batch => batch_size);
        set!(local_iters => local_iters);
        set!(q => q);
        set!(malicious_frac => malicious_frac);
        set!(attack => attack.kind);
        set!(ipm_eps => attack.ipm_eps);
        set!(noise_sigma => attack.noise_sigma);
        set!(attack_start => attack.start_round);
        set!(defense => defense.kind);
        set!(seed => seed);
        set!(eval_every => eval_every);
        if let Some(d) = &self.data_dir {
            cfg.data_dir = Some(d.clone());
        }
        if self.krum_f.is_some() {
            cfg.defense.krum_f = self.krum_f;
        }
        if self.clip_bound.is_some() {
            cfg.defense.clip_bound = self.clip_bound;
        }
        if self.serial {
            cfg.parallel = false;
        }
        cfg.validate()?;
        Ok(cfg)
    }
}

fn run(args: Args) -> Result<()> {
    if let Some(manifest) = &args.replay {
        let out = replay(manifest, &args.out)
            .with_context(|| format!("replaying {}", manifest.display()))?;
        println!(
            "replayed {} rounds, final accuracy {:.4}, outputs in {}",
            out.summary.rounds,
            out.summary.final_accuracy,
            args.out.display()
        );
        return Ok(());
    }

    let cfg = args.resolve_config()?;

    if args.layer_similarity {
        let (train, _) = load_datasets(&cfg)?;
        let sim_cfg = LayerSimilarityConfig {
            iters: args.iters,
            q: cfg.q,
            lr: cfg.lr,
            batch_size: cfg.batch_size,
            ..Default::default()
        };
        let sim = layerwise_similarity_experiment(&cfg.layer_specs(), &train, &sim_cfg, cfg.seed)?;
        std::fs::create_dir_all(&args.out)?;
        let path = args.out.join("layer_similarity.json");
        std::fs::write(&path, serde_json::to_string_pretty(&sim)?)?;
        if let Some(last) = sim.last() {
            for (k, s) in last.iter().enumerate() {
                println!("layer {k}: {s:.4}");
            }
        }
        println!("wrote {}", path.display());
        return Ok(());
    }

    if let Some(axis) = args.sweep {
        let values = args.values.clone().unwrap_or_else(|| axis.default_values());
        let table = run_sweep(&cfg, axis, &values, &SWEEP_DEFENSES, Some(&args.out))?;
        print!("{}", table.to_csv());
        if table.cells.iter().all(|c| c.error.is_some()) {
            bail!("every sweep cell failed");
        }
        return Ok(());
    }

    let out = run_experiment(&cfg, Some(&args.out))?;
    let s = &out.summary;
    println!(
        "{} / attack {} / defense {}: final accuracy {:.4} (best {:.4}) after {} rounds",
        s.dataset, s.attack, s.defense, s.final_accuracy, s.best_accuracy, s.rounds
    );
    if let Some(b) = s.clip_bound {
        println!("clip bound {b:.6}");
    }
    println!("outputs in {}", args.out.display());
    Ok(())
}

fn main() -> ExitCode {
    match run(Args::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
