use std::path::PathBuf;

use clap::Args;
use cmpc_core::synth::{
    generate, split_by_identity, write_dataset, DeviateMode, WorldConfig, DATASET_FILE, FEATURES_FILE,
};
use serde::{Deserialize, Serialize};

use crate::error::{CliError, CliResult};
use crate::io::{check_out_dir, create_dir, read_config, write_file, RunManifest, SplitFile, MANIFEST_FILE, SPLIT_FILE};

#[derive(Debug, Args)]
pub struct GenArgs {
    /// Output directory for the dataset.
    #[arg(long)]
    pub out: PathBuf,
    /// Write into an existing output directory.
    #[arg(long)]
    pub force: bool,
    /// JSON config (world fields plus test_fraction, stratify); flags override it.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub seed: Option<u64>,
    /// Number of identities.
    #[arg(long)]
    pub identities: Option<usize>,
    /// Videos (instances) per identity.
    #[arg(long)]
    pub videos: Option<usize>,
    #[arg(long)]
    pub latent_dim: Option<usize>,
    #[arg(long)]
    pub voice_dim: Option<usize>,
    #[arg(long)]
    pub face_dim: Option<usize>,
    /// Scale of the latent-to-feature maps.
    #[arg(long)]
    pub map_scale: Option<f64>,
    #[arg(long)]
    pub voice_noise: Option<f64>,
    #[arg(long)]
    pub face_noise: Option<f64>,
    /// Fraction of noise variance shared across modalities within a video.
    #[arg(long)]
    pub shared_noise: Option<f64>,
    /// Fraction of instances whose voice deviates from the face identity.
    #[arg(long)]
    pub deviate_fraction: Option<f64>,
    /// swap | background | drift
    #[arg(long)]
    pub deviate_mode: Option<String>,
    #[arg(long)]
    pub nationalities: Option<usize>,
    #[arg(long)]
    pub age_groups: Option<usize>,
    #[arg(long)]
    pub attribute_strength: Option<f64>,
    /// Fraction of identities held out for testing.
    #[arg(long)]
    pub test_fraction: Option<f64>,
    /// Split identities without balancing the gender-like attribute.
    #[arg(long)]
    pub no_stratify: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct GenConfig {
    #[serde(flatten)]
    pub world: WorldConfig,
    pub test_fraction: f64,
    pub stratify: bool,
}

impl Default for GenConfig {
    fn default() -> Self {
        Self {
            world: WorldConfig::default(),
            test_fraction: 0.2,
            stratify: true,
        }
    }
}

impl GenArgs {
    pub fn resolve(&self) -> CliResult<GenConfig> {
        let mut c: GenConfig = match &self.config {
            Some(p) => read_config(p)?,
            None => GenConfig::default(),
        };
        let w = &mut c.world;
        macro_rules! set {
            ($($flag:ident => $field:expr),* $(,)?) => {
                $(if let Some(v) = self.$flag { $field = v; })*
            };
        }
        set! {
            seed => w.seed,
            identities => w.num_identities,
            videos => w.videos_per_identity,
            latent_dim => w.latent_dim,
            voice_dim => w.voice_dim,
            face_dim => w.face_dim,
            map_scale => w.map_scale,
            voice_noise => w.voice_noise_std,
            face_noise => w.face_noise_std,
            shared_noise => w.shared_noise,
            deviate_fraction => w.deviate_fraction,
            nationalities => w.attributes.nationalities,
            age_groups => w.attributes.age_groups,
            attribute_strength => w.attributes.strength,
            test_fraction => c.test_fraction,
        }
        if let Some(m) = &self.deviate_mode {
            c.world.deviate_mode = m.parse::<DeviateMode>()?;
        }
        if self.no_stratify {
            c.stratify = false;
        }
        c.world.validate()?;
        if !(c.test_fraction > 0.0 && c.test_fraction < 1.0) {
            return Err(CliError::Flag(format!("test fraction {} outside (0, 1)", c.test_fraction)));
        }
        Ok(c)
    }
}

pub fn run(args: &GenArgs) -> CliResult<()> {
    let config = args.resolve()?;
    check_out_dir(&args.out, args.force)?;
    let records = generate(&config.world)?;
    let split = split_by_identity(&records, config.test_fraction, config.world.seed, config.stratify)?;
    create_dir(&args.out)?;

    write_dataset(&args.out, &records)?;
    let split_file = SplitFile {
        test_fraction: config.test_fraction,
        stratify: config.stratify,
        seed: config.world.seed,
        test_identities: split.test_identities().into_iter().collect(),
    };
    let json = serde_json::to_string_pretty(&split_file).map_err(|e| CliError::Data(e.to_string()))?;
    write_file(&args.out.join(SPLIT_FILE), json + "\n")?;
    RunManifest::new("gen", config.world.seed, &config).write(
        &args.out,
        &[DATASET_FILE, FEATURES_FILE, SPLIT_FILE, MANIFEST_FILE],
    )?;
    println!(
        "wrote {} instances ({} train, {} test) to {}",
        records.len(),
        split.train.len(),
        split.test.len(),
        args.out.display()
    );
    Ok(())
}
