use std::path::{Path, PathBuf};

use clap::{Args, ValueEnum};
use cmpc_core::container::Container;
use cmpc_core::nn::Matrix;
use cmpc_core::protocols::EmbeddingTable;
use cmpc_core::synth::InstanceRecord;
use cmpc_core::trainer::TrainState;
use serde::Serialize;

use crate::error::{CliError, CliResult};
use crate::io::{check_out_dir, create_dir, write_file, DataDir, RunManifest, MANIFEST_FILE};

pub const EMBEDDINGS_KIND: &str = "embeddings";
pub const EMBEDDINGS_FILE: &str = "embeddings.bin";
pub const INDEX_FILE: &str = "embeddings.json";

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum SplitPart {
    Train,
    Test,
    All,
}

#[derive(Debug, Args)]
pub struct EmbedArgs {
    /// Dataset directory written by `gen`.
    #[arg(long)]
    pub data: PathBuf,
    /// Training checkpoint holding the encoders.
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long)]
    pub force: bool,
    /// Which part of the split to encode.
    #[arg(long, value_enum, default_value_t = SplitPart::Test)]
    pub split: SplitPart,
}

#[derive(Serialize)]
struct Index<'a> {
    file: &'a str,
    split: SplitPart,
    dim: usize,
    instances: usize,
    /// Rows `[0, n)` hold voice embeddings, rows `[n, 2n)` face embeddings,
    /// both in `instance_ids` order.
    voice_rows: [usize; 2],
    face_rows: [usize; 2],
    instance_ids: &'a [usize],
}

pub fn load_checkpoint(path: &Path) -> CliResult<TrainState> {
    if !path.is_file() {
        return Err(CliError::Data(format!("checkpoint {} not found", path.display())));
    }
    Ok(TrainState::load(path)?)
}

pub fn encode(state: &TrainState, records: &[InstanceRecord]) -> CliResult<EmbeddingTable> {
    Ok(EmbeddingTable::from_encoders(records, &state.voice, &state.face)?)
}

pub fn write_embeddings(path: &Path, table: &EmbeddingTable) -> CliResult<()> {
    let (n, d) = table.voice.shape();
    let mut data = table.voice.data().to_vec();
    data.extend_from_slice(table.face.data());
    let mut c = Container::new(EMBEDDINGS_KIND);
    c.put_matrix("embeddings", &Matrix::from_vec(2 * n, d, data)?);
    c.put_u64("instance_ids", table.instance_ids.iter().map(|&i| i as u64).collect());
    Ok(c.write_file(path)?)
}

pub fn read_embeddings(path: &Path) -> CliResult<EmbeddingTable> {
    if !path.is_file() {
        return Err(CliError::Data(format!("embedding file {} not found", path.display())));
    }
    let c = Container::read_file(path)?;
    c.require_kind(EMBEDDINGS_KIND)?;
    let all = c.matrix("embeddings")?;
    let ids: Vec<usize> = c.u64s("instance_ids")?.iter().map(|&i| i as usize).collect();
    let n = ids.len();
    if all.rows() != 2 * n {
        return Err(CliError::Data(format!(
            "{}: {} rows for {n} instances, expected {}",
            path.display(),
            all.rows(),
            2 * n
        )));
    }
    let voice: Vec<usize> = (0..n).collect();
    let face: Vec<usize> = (n..2 * n).collect();
    EmbeddingTable::new(ids, all.gather_rows(&voice), all.gather_rows(&face)).map_err(CliError::data)
}

pub fn run(args: &EmbedArgs) -> CliResult<()> {
    check_out_dir(&args.out, args.force)?;
    let data = DataDir::open(&args.data)?;
    let state = load_checkpoint(&args.checkpoint)?;
    let records: Vec<InstanceRecord> = match args.split {
        SplitPart::Train => data.split.train.clone(),
        SplitPart::Test => data.split.test.clone(),
        SplitPart::All => {
            let mut all = [data.split.train.clone(), data.split.test.clone()].concat();
            all.sort_by_key(|r| r.instance_id);
            all
        }
    };
    let table = encode(&state, &records)?;
    create_dir(&args.out)?;
    write_embeddings(&args.out.join(EMBEDDINGS_FILE), &table)?;

    let n = table.instance_ids.len();
    let index = Index {
        file: EMBEDDINGS_FILE,
        split: args.split,
        dim: table.voice.cols(),
        instances: n,
        voice_rows: [0, n],
        face_rows: [n, 2 * n],
        instance_ids: &table.instance_ids,
    };
    let json = serde_json::to_string_pretty(&index).map_err(|e| CliError::Data(e.to_string()))?;
    write_file(&args.out.join(INDEX_FILE), json + "\n")?;
    RunManifest::new("embed", state.config.seed, &index)
        .input(&args.data)
        .input(&args.checkpoint)
        .write(&args.out, &[EMBEDDINGS_FILE, INDEX_FILE, MANIFEST_FILE])?;
    println!("wrote {} embeddings of dim {} to {}", 2 * n, table.voice.cols(), args.out.display());
    Ok(())
}
