use std::path::PathBuf;

use clap::Args;
use cmpc_core::clustering::dump_prototypes;
use cmpc_core::protocols::{EvalSpec, Evaluator};
use cmpc_core::synth::TrainingSet;
use cmpc_core::trainer::{LossMode, TrainConfig, TrainState};

use crate::error::{CliError, CliResult};
use crate::io::{check_out_dir, create_dir, read_config, write_file, DataDir, RunManifest, MANIFEST_FILE};

pub const CHECKPOINT_FILE: &str = "checkpoint.bin";
pub const METRICS_FILE: &str = "metrics.csv";
pub const PROTOTYPE_DIR: &str = "prototypes";

#[derive(Debug, Args)]
pub struct TrainArgs {
    /// Dataset directory written by `gen`.
    #[arg(long)]
    pub data: PathBuf,
    /// Output directory for the checkpoint, metrics and manifest.
    #[arg(long)]
    pub out: PathBuf,
    /// Write into an existing output directory.
    #[arg(long)]
    pub force: bool,
    /// JSON training config; flags override it.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Continue from a checkpoint; its stored config is used unchanged.
    #[arg(long)]
    pub resume: Option<PathBuf>,
    /// Stop (and checkpoint) once this many total steps have run.
    #[arg(long)]
    pub stop_after_steps: Option<u64>,
    /// Write prototypes after every clustering pass.
    #[arg(long)]
    pub dump_prototypes: bool,
    /// cid | cmpc | cmpc-recal
    #[arg(long)]
    pub loss: Option<LossMode>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub epochs: Option<usize>,
    /// Epochs of CID-only training before prototypes are used.
    #[arg(long)]
    pub warmup_epochs: Option<usize>,
    #[arg(long)]
    pub batch_size: Option<usize>,
    /// Softmax temperature τ.
    #[arg(long)]
    pub temperature: Option<f64>,
    /// Memory-bank momentum m.
    #[arg(long)]
    pub momentum: Option<f64>,
    /// Cluster counts, comma separated.
    #[arg(long, value_delimiter = ',')]
    pub k_list: Option<Vec<usize>>,
    /// Recalibration centre shift δ (in σ units).
    #[arg(long, allow_hyphen_values = true)]
    pub delta: Option<f64>,
    /// Recalibration variance scale κ.
    #[arg(long)]
    pub kappa: Option<f64>,
    #[arg(long)]
    pub initial_lr: Option<f64>,
    #[arg(long)]
    pub peak_lr: Option<f64>,
    #[arg(long)]
    pub final_lr: Option<f64>,
    #[arg(long)]
    pub weight_decay: Option<f64>,
    /// Hidden layer widths, comma separated.
    #[arg(long, value_delimiter = ',')]
    pub hidden_dims: Option<Vec<usize>>,
    #[arg(long)]
    pub embed_dim: Option<usize>,
    /// Evaluate on the test split every this many epochs (0 = off).
    #[arg(long)]
    pub eval_every: Option<usize>,
}

impl TrainArgs {
    fn overrides_config(&self) -> bool {
        self.config.is_some()
            || self.loss.is_some()
            || self.seed.is_some()
            || self.epochs.is_some()
            || self.warmup_epochs.is_some()
            || self.batch_size.is_some()
            || self.temperature.is_some()
            || self.momentum.is_some()
            || self.k_list.is_some()
            || self.delta.is_some()
            || self.kappa.is_some()
            || self.initial_lr.is_some()
            || self.peak_lr.is_some()
            || self.final_lr.is_some()
            || self.weight_decay.is_some()
            || self.hidden_dims.is_some()
            || self.embed_dim.is_some()
            || self.eval_every.is_some()
    }

    pub fn resolve(&self) -> CliResult<TrainConfig> {
        let mut c: TrainConfig = match &self.config {
            Some(p) => read_config(p)?,
            None => TrainConfig::default(),
        };
        macro_rules! set {
            ($($flag:ident => $field:expr),* $(,)?) => {
                $(if let Some(v) = self.$flag.clone() { $field = v; })*
            };
        }
        set! {
            loss => c.loss,
            seed => c.seed,
            epochs => c.epochs,
            warmup_epochs => c.warmup_epochs,
            batch_size => c.batch_size,
            temperature => c.temperature,
            momentum => c.momentum,
            k_list => c.k_list,
            delta => c.recalibration.delta,
            kappa => c.recalibration.kappa,
            initial_lr => c.initial_lr,
            peak_lr => c.peak_lr,
            final_lr => c.final_lr,
            weight_decay => c.adam.weight_decay,
            hidden_dims => c.hidden_dims,
            embed_dim => c.embed_dim,
            eval_every => c.eval_every,
        }
        Ok(c)
    }
}

pub fn run(args: &TrainArgs) -> CliResult<()> {
    if args.resume.is_some() && args.overrides_config() {
        return Err(CliError::Flag(
            "--resume uses the checkpoint's config; drop --config and hyperparameter flags".into(),
        ));
    }
    let config = args.resolve()?;
    // a resumed run may write back into its own directory
    if args.resume.is_none() {
        check_out_dir(&args.out, args.force)?;
    }
    let data_dir = DataDir::open(&args.data)?;
    let data = TrainingSet::from_records(&data_dir.split.train)?;

    let mut state = match &args.resume {
        Some(p) => {
            if !p.is_file() {
                return Err(CliError::Data(format!("checkpoint {} not found", p.display())));
            }
            TrainState::load(p)?
        }
        None => {
            config.validate(data.len())?;
            TrainState::new(config, &data)?
        }
    };
    create_dir(&args.out)?;

    let evaluator = if state.config.eval_every > 0 {
        Some(
            Evaluator::new(
                &data_dir.split.test,
                &EvalSpec {
                    seed: state.config.seed,
                    ..EvalSpec::default()
                },
            )
            .map_err(CliError::data)?,
        )
    } else {
        None
    };

    let plan = state.plan();
    let limit = args.stop_after_steps.map_or(plan.total_steps, |s| s.min(plan.total_steps));
    if args.dump_prototypes {
        let dir = args.out.join(PROTOTYPE_DIR);
        create_dir(&dir)?;
        while state.step() < limit {
            let epoch = state.step() / plan.steps_per_epoch;
            let passes = state.clustering_passes();
            state.run(&data, evaluator.as_ref(), Some(limit.min((epoch + 1) * plan.steps_per_epoch)))?;
            if state.clustering_passes() > passes {
                if let Some((pv, pf)) = &state.prototypes {
                    dump_prototypes(&dir, epoch, pv, pf)?;
                }
            }
        }
    } else {
        state.run(&data, evaluator.as_ref(), Some(limit))?;
    }

    state.save(&args.out.join(CHECKPOINT_FILE))?;
    write_file(&args.out.join(METRICS_FILE), state.metrics_csv())?;
    let mut manifest = RunManifest::new("train", state.config.seed, &state.config).input(&args.data);
    if let Some(p) = &args.resume {
        manifest = manifest.input(p);
    }
    let mut outputs = vec![CHECKPOINT_FILE, METRICS_FILE, MANIFEST_FILE];
    if args.dump_prototypes {
        outputs.push(PROTOTYPE_DIR);
    }
    manifest.write(&args.out, &outputs)?;

    let last = state.metrics.last();
    println!(
        "step {}/{} ({}){}",
        state.step(),
        plan.total_steps,
        state.config.loss,
        last.map_or(String::new(), |r| format!(", loss {:.4}", r.loss_total))
    );
    Ok(())
}
