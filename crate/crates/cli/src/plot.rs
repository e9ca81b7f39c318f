use std::collections::{BTreeMap, BTreeSet};
use std::fmt::Write as _;
use std::path::PathBuf;

use clap::{Args, ValueEnum};
use cmpc_core::diagnostics::{line_svg, read_csv_columns, scatter_svg, Histogram, Marker, Pca2};
use cmpc_core::nn::Matrix;
use cmpc_core::synth::InstanceRecord;
use serde::Serialize;

use crate::embed::{encode, load_checkpoint};
use crate::error::{CliError, CliResult};
use crate::io::{check_out_dir, create_dir, read_text, write_file, DataDir, RunManifest, MANIFEST_FILE};

const LOSS_COLUMNS: [&str; 5] = ["loss_total", "loss_cid_vf", "loss_cid_fv", "loss_proto_vf", "loss_proto_fv"];

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum ColorBy {
    Identity,
    Gender,
    Nationality,
    Age,
}

#[derive(Debug, Args, Serialize)]
pub struct PlotArgs {
    /// Checkpoint: ρ histogram, and with --data the PCA scatter.
    #[arg(long)]
    pub checkpoint: Option<PathBuf>,
    /// Dataset directory; the scatter shows its test split.
    #[arg(long)]
    pub data: Option<PathBuf>,
    /// Metrics CSV written by `train`: loss curves.
    #[arg(long)]
    pub metrics: Option<PathBuf>,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long)]
    #[serde(skip)]
    pub force: bool,
    /// Histogram bin count.
    #[arg(long, default_value_t = 30)]
    pub bins: usize,
    #[arg(long, value_enum, default_value_t = ColorBy::Identity)]
    pub color_by: ColorBy,
    /// Identities shown in the scatter (lowest ids first).
    #[arg(long, default_value_t = 10)]
    pub max_identities: usize,
}

fn label_of(r: &InstanceRecord, by: ColorBy) -> usize {
    let a = r.truth.attributes;
    match by {
        ColorBy::Identity => r.truth.identity_id,
        ColorBy::Gender => a.gender as usize,
        ColorBy::Nationality => a.nationality as usize,
        ColorBy::Age => a.age as usize,
    }
}

pub fn run(args: &PlotArgs) -> CliResult<()> {
    if args.checkpoint.is_none() && args.metrics.is_none() {
        return Err(CliError::Flag("nothing to plot: pass --checkpoint and/or --metrics".into()));
    }
    if args.data.is_some() && args.checkpoint.is_none() {
        return Err(CliError::Flag("--data is only used together with --checkpoint".into()));
    }
    if args.bins == 0 || args.max_identities == 0 {
        return Err(CliError::Flag("--bins and --max-identities must be ≥ 1".into()));
    }
    check_out_dir(&args.out, args.force)?;

    let state = args.checkpoint.as_deref().map(load_checkpoint).transpose()?;
    let data = args.data.as_deref().map(DataDir::open).transpose()?;
    let metrics = args.metrics.as_deref().map(read_text).transpose()?;
    create_dir(&args.out)?;
    let mut outputs: Vec<&str> = Vec::new();

    if let Some(state) = &state {
        match &state.recalibration {
            Some(rc) => {
                let h = Histogram::new(&rc.rho, args.bins)?;
                write_file(&args.out.join("rho_hist.csv"), h.to_csv())?;
                write_file(&args.out.join("rho_hist.svg"), h.to_svg("Deviation score", "ρ"))?;
                outputs.extend(["rho_hist.csv", "rho_hist.svg"]);
            }
            None => eprintln!("checkpoint has no recalibration state; skipping ρ histogram"),
        }
    }

    if let (Some(state), Some(data)) = (&state, &data) {
        let shown: BTreeSet<usize> = data
            .split
            .test
            .iter()
            .map(|r| r.truth.identity_id)
            .collect::<BTreeSet<_>>()
            .into_iter()
            .take(args.max_identities)
            .collect();
        let records: Vec<InstanceRecord> =
            data.split.test.iter().filter(|r| shown.contains(&r.truth.identity_id)).cloned().collect();
        let table = encode(state, &records)?;
        let (n, d) = table.voice.shape();
        let stacked = Matrix::from_vec(2 * n, d, [table.voice.data(), table.face.data()].concat())?;
        let pca = Pca2::fit(&stacked)?;
        let points = pca.project(&stacked)?;

        let raw: Vec<usize> = records.iter().map(|r| label_of(r, args.color_by)).collect();
        let dense: BTreeMap<usize, usize> =
            raw.iter().copied().collect::<BTreeSet<_>>().into_iter().enumerate().map(|(i, l)| (l, i)).collect();
        let labels: Vec<usize> = raw.iter().chain(&raw).map(|l| dense[l]).collect();
        let markers: Vec<Marker> = (0..2 * n).map(|i| if i < n { Marker::Circle } else { Marker::Square }).collect();
        let title = format!(
            "PCA of test embeddings (circle voice, square face; variance {:.3}, {:.3})",
            pca.variances[0], pca.variances[1]
        );
        write_file(&args.out.join("pca_scatter.svg"), scatter_svg(&points, &labels, &markers, &title)?)?;

        let mut csv = String::from("instance_id,modality,label,pc1,pc2\n");
        for (i, p) in points.iter().enumerate() {
            let (r, modality) = if i < n { (i, "voice") } else { (i - n, "face") };
            let _ = writeln!(csv, "{},{modality},{},{},{}", records[r].instance_id, raw[r], p[0], p[1]);
        }
        write_file(&args.out.join("pca.csv"), csv)?;
        outputs.extend(["pca_scatter.svg", "pca.csv"]);
    }

    if let Some(text) = &metrics {
        let columns = read_csv_columns(text).map_err(CliError::data)?;
        let steps = columns
            .iter()
            .find(|(name, _)| name == "step")
            .map(|(_, v)| v.clone())
            .ok_or_else(|| CliError::Data("metrics CSV has no `step` column".into()))?;
        let series: Vec<(String, Vec<(f64, f64)>)> = columns
            .iter()
            .filter(|(name, _)| LOSS_COLUMNS.contains(&name.as_str()))
            .map(|(name, v)| (name.clone(), steps.iter().copied().zip(v.iter().copied()).collect()))
            .collect();
        if series.is_empty() {
            return Err(CliError::Data("metrics CSV has no loss columns".into()));
        }
        write_file(&args.out.join("loss_curve.svg"), line_svg(&series, "Training loss", "step")?)?;
        outputs.push("loss_curve.svg");
    }

    outputs.push(MANIFEST_FILE);
    let seed = state.as_ref().map_or(0, |s| s.config.seed);
    let mut manifest = RunManifest::new("plot", seed, args);
    for p in args.checkpoint.iter().chain(&args.data).chain(&args.metrics) {
        manifest = manifest.input(p);
    }
    manifest.write(&args.out, &outputs)?;
    println!("wrote {} plot files to {}", outputs.len() - 1, args.out.display());
    Ok(())
}
