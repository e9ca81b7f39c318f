use std::path::PathBuf;

use clap::Args;
use cmpc_core::protocols::{EvalSpec, Evaluator, Protocol, Stratum};

use crate::embed::{encode, load_checkpoint, read_embeddings};
use crate::error::{CliError, CliResult};
use crate::io::{check_out_dir, create_dir, read_config, write_file, DataDir, RunManifest, MANIFEST_FILE};

pub const REPORT_JSON: &str = "report.json";
pub const REPORT_TABLE: &str = "report.txt";

#[derive(Debug, Args)]
#[command(group = clap::ArgGroup::new("source").required(true).args(["checkpoint", "embeddings"]))]
pub struct EvalArgs {
    /// Dataset directory written by `gen`; trials use its test split.
    #[arg(long)]
    pub data: PathBuf,
    /// Training checkpoint to encode the test split with.
    #[arg(long)]
    pub checkpoint: Option<PathBuf>,
    /// Embedding file written by `embed`.
    #[arg(long)]
    pub embeddings: Option<PathBuf>,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long)]
    pub force: bool,
    /// JSON evaluation spec; flags override it.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Protocols, comma separated: matching, verification, retrieval.
    #[arg(long, value_delimiter = ',')]
    pub protocol: Option<Vec<String>>,
    /// Strata, comma separated: U, G, N, A, GN, GNA.
    #[arg(long, value_delimiter = ',')]
    pub strata: Option<Vec<String>>,
    /// Matching trials per direction and stratum.
    #[arg(long)]
    pub matching_trials: Option<usize>,
    /// Verification pairs per stratum.
    #[arg(long)]
    pub verification_trials: Option<usize>,
    /// Retrieval probes per modality (default: every test instance).
    #[arg(long)]
    pub retrieval_probes: Option<usize>,
    /// Trial sampling seed.
    #[arg(long)]
    pub seed: Option<u64>,
    /// Also write every trial list as JSON lines.
    #[arg(long)]
    pub write_trials: bool,
}

impl EvalArgs {
    pub fn resolve(&self) -> CliResult<EvalSpec> {
        let mut spec: EvalSpec = match &self.config {
            Some(p) => read_config(p)?,
            None => EvalSpec::default(),
        };
        if let Some(ps) = &self.protocol {
            spec.protocols = ps.iter().map(|p| p.trim().parse::<Protocol>()).collect::<Result<_, _>>()?;
        }
        if let Some(ss) = &self.strata {
            spec.strata = ss.iter().map(|s| s.trim().parse::<Stratum>()).collect::<Result<_, _>>()?;
        }
        if let Some(n) = self.matching_trials {
            spec.matching_trials = n;
        }
        if let Some(n) = self.verification_trials {
            spec.verification_trials = n;
        }
        if let Some(n) = self.retrieval_probes {
            spec.retrieval_probes = n;
        }
        if let Some(s) = self.seed {
            spec.seed = s;
        }
        if spec.protocols.is_empty() || spec.strata.is_empty() {
            return Err(CliError::Flag("at least one protocol and one stratum are required".into()));
        }
        if spec.matching_trials == 0 || spec.verification_trials == 0 || spec.retrieval_probes == 0 {
            return Err(CliError::Flag("trial counts must be ≥ 1".into()));
        }
        Ok(spec)
    }
}

pub fn run(args: &EvalArgs) -> CliResult<()> {
    let spec = args.resolve()?;
    check_out_dir(&args.out, args.force)?;
    let data = DataDir::open(&args.data)?;
    let table = match (&args.checkpoint, &args.embeddings) {
        (Some(ckpt), _) => encode(&load_checkpoint(ckpt)?, &data.split.test)?,
        (None, Some(emb)) => read_embeddings(emb)?,
        (None, None) => unreachable!("clap requires a source"),
    };
    let evaluator = Evaluator::new(&data.split.test, &spec).map_err(CliError::data)?;
    let report = evaluator.evaluate(&table).map_err(CliError::data)?;

    create_dir(&args.out)?;
    let json = serde_json::to_string_pretty(&report).map_err(|e| CliError::Data(e.to_string()))?;
    write_file(&args.out.join(REPORT_JSON), json + "\n")?;
    let text = report.to_table();
    write_file(&args.out.join(REPORT_TABLE), &text)?;
    let mut outputs = vec![REPORT_JSON.to_string(), REPORT_TABLE.to_string()];
    if args.write_trials {
        for list in &evaluator.lists {
            let name = format!("trials_{:?}_{}.jsonl", list.protocol, list.stratum).to_lowercase();
            list.write_jsonl(&args.out.join(&name))?;
            outputs.push(name);
        }
    }
    outputs.push(MANIFEST_FILE.to_string());
    let mut manifest = RunManifest::new("eval", spec.seed, &spec).input(&args.data);
    for p in args.checkpoint.iter().chain(&args.embeddings) {
        manifest = manifest.input(p);
    }
    manifest.write(&args.out, &outputs.iter().map(String::as_str).collect::<Vec<_>>())?;
    print!("{text}");
    Ok(())
}
