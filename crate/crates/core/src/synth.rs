//! Synthetic paired voice/face "videos" drawn from a linear-Gaussian latent model.
//!
//! Every identity owns a latent vector `z`. Each video of that identity emits
//! `voice = A_V z + noise` and `face = A_F z + noise` through two fixed random
//! mixing maps. Identity latents carry additive attribute directions (a binary
//! gender-like attribute, a k-way nationality-like and a k-way age-like one),
//! so attribute-stratified evaluation is harder than unstratified.
//!
//! A configurable fraction of videos get a corrupted voice track; those are the
//! deviate positives. Ground truth lives in [`GroundTruth`] and never reaches the
//! trainer, which only sees a [`TrainingSet`].

use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::container::Container;
use crate::error::{Error, Result};
use crate::nn::Matrix;
use crate::rng::substream;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DeviateMode {
    /// Voice taken entirely from another identity.
    Swap,
    /// Equal mix of own voice and another identity's voice.
    Background,
    /// Own voice with five times the usual noise.
    Drift,
}

impl std::str::FromStr for DeviateMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "swap" => Ok(Self::Swap),
            "background" => Ok(Self::Background),
            "drift" => Ok(Self::Drift),
            other => Err(Error::Argument(format!(
                "unknown deviate mode `{other}` (swap | background | drift)"
            ))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AttributeSpec {
    /// Number of values of the nationality-like attribute.
    pub nationalities: usize,
    /// Number of values of the age-like attribute.
    pub age_groups: usize,
    /// Scale of the attribute directions added to identity latents.
    pub strength: f64,
}

impl Default for AttributeSpec {
    fn default() -> Self {
        Self {
            nationalities: 4,
            age_groups: 3,
            strength: 0.5,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct WorldConfig {
    pub num_identities: usize,
    pub videos_per_identity: usize,
    pub latent_dim: usize,
    pub voice_dim: usize,
    pub face_dim: usize,
    /// Entry std of the mixing maps is `map_scale / √latent_dim`, which sets
    /// the clean signal level against the fixed noise std.
    pub map_scale: f64,
    pub voice_noise_std: f64,
    pub face_noise_std: f64,
    /// Fraction of each modality's noise variance driven by a per-video
    /// session latent shared by voice and face.
    pub shared_noise: f64,
    pub deviate_fraction: f64,
    pub deviate_mode: DeviateMode,
    pub attributes: AttributeSpec,
    pub seed: u64,
}

impl Default for WorldConfig {
    fn default() -> Self {
        Self {
            num_identities: 200,
            videos_per_identity: 5,
            latent_dim: 16,
            voice_dim: 64,
            face_dim: 64,
            map_scale: 0.4,
            voice_noise_std: 0.3,
            face_noise_std: 0.3,
            shared_noise: 0.8,
            deviate_fraction: 0.2,
            deviate_mode: DeviateMode::Background,
            attributes: AttributeSpec::default(),
            seed: 0,
        }
    }
}

impl WorldConfig {
    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(Error::Argument(m));
        if self.num_identities < 1 || self.videos_per_identity < 1 {
            return fail("identity and video counts must be ≥ 1".into());
        }
        if self.latent_dim < 2 || self.voice_dim < 2 || self.face_dim < 2 {
            return fail("latent, voice and face dimensions must be ≥ 2".into());
        }
        if !(0.0..=1.0).contains(&self.deviate_fraction) {
            return fail(format!(
                "deviate_fraction {} outside [0, 1]",
                self.deviate_fraction
            ));
        }
        if !(self.map_scale > 0.0 && self.map_scale.is_finite()) {
            return fail("map scale must be finite and > 0".into());
        }
        if !(0.0..=1.0).contains(&self.shared_noise) {
            return fail(format!("shared_noise {} outside [0, 1]", self.shared_noise));
        }
        if !(self.voice_noise_std >= 0.0 && self.face_noise_std >= 0.0) {
            return fail("noise std must be ≥ 0".into());
        }
        if self.attributes.nationalities < 1 || self.attributes.age_groups < 1 {
            return fail("attribute cardinalities must be ≥ 1".into());
        }
        if !(self.attributes.strength >= 0.0 && self.attributes.strength.is_finite()) {
            return fail("attribute strength must be finite and ≥ 0".into());
        }
        if self.deviate_fraction > 0.0
            && self.num_identities < 2
            && self.deviate_mode != DeviateMode::Drift
        {
            return fail(format!(
                "{:?} deviates need a second identity",
                self.deviate_mode
            ));
        }
        Ok(())
    }

    pub fn num_instances(&self) -> usize {
        self.num_identities * self.videos_per_identity
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct Attributes {
    pub gender: u8,
    pub nationality: u16,
    pub age: u16,
}

/// Hidden labels: used for evaluation and diagnostics only.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroundTruth {
    pub identity_id: usize,
    pub attributes: Attributes,
    pub deviate: Option<DeviateMode>,
    /// The other identity whose voice leaked in, for swap/background deviates.
    pub deviate_source: Option<usize>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct InstanceRecord {
    pub instance_id: usize,
    pub voice: Vec<f64>,
    pub face: Vec<f64>,
    pub truth: GroundTruth,
}

/// The sampled generative model behind a dataset.
#[derive(Debug, Clone)]
pub struct World {
    pub voice_map: Matrix,
    pub face_map: Matrix,
    /// Maps from the per-video session latent into each modality's noise.
    pub voice_session_map: Matrix,
    pub face_session_map: Matrix,
    /// One latent row per identity.
    pub latents: Matrix,
    pub attributes: Vec<Attributes>,
}

fn gaussian_matrix<R: Rng>(rng: &mut R, rows: usize, cols: usize, std: f64) -> Matrix {
    let data = (0..rows * cols)
        .map(|_| std * rng.sample::<f64, _>(StandardNormal))
        .collect();
    Matrix::from_vec(rows, cols, data).expect("sized above")
}

impl World {
    pub fn sample(config: &WorldConfig) -> Result<Self> {
        config.validate()?;
        let l = config.latent_dim;
        let mut map_rng = substream(config.seed, "world.maps", 0);
        let scale = config.map_scale / (l as f64).sqrt();
        let voice_map = gaussian_matrix(&mut map_rng, config.voice_dim, l, scale);
        let face_map = gaussian_matrix(&mut map_rng, config.face_dim, l, scale);
        let mut session_rng = substream(config.seed, "world.session_maps", 0);
        let unit = 1.0 / (l as f64).sqrt();
        let voice_session_map = gaussian_matrix(&mut session_rng, config.voice_dim, l, unit);
        let face_session_map = gaussian_matrix(&mut session_rng, config.face_dim, l, unit);

        let spec = config.attributes;
        let mut attr_rng = substream(config.seed, "world.attributes", 0);
        let gender_dirs = gaussian_matrix(&mut attr_rng, 2, l, 1.0);
        let nat_dirs = gaussian_matrix(&mut attr_rng, spec.nationalities, l, 1.0);
        let age_dirs = gaussian_matrix(&mut attr_rng, spec.age_groups, l, 1.0);

        let mut id_rng = substream(config.seed, "world.identities", 0);
        let mut latents = Matrix::zeros(config.num_identities, l);
        let mut attributes = Vec::with_capacity(config.num_identities);
        for i in 0..config.num_identities {
            let a = Attributes {
                gender: id_rng.random_range(0..2u8),
                nationality: id_rng.random_range(0..spec.nationalities as u16),
                age: id_rng.random_range(0..spec.age_groups as u16),
            };
            let row = latents.row_mut(i);
            for (k, z) in row.iter_mut().enumerate() {
                let attr = gender_dirs.get(a.gender as usize, k)
                    + nat_dirs.get(a.nationality as usize, k)
                    + age_dirs.get(a.age as usize, k);
                *z = id_rng.sample::<f64, _>(StandardNormal) + spec.strength * attr;
            }
            attributes.push(a);
        }
        Ok(Self {
            voice_map,
            face_map,
            voice_session_map,
            face_session_map,
            latents,
            attributes,
        })
    }

    /// Noise-free voice and face features of an identity.
    pub fn clean_features(&self, identity: usize) -> (Vec<f64>, Vec<f64>) {
        let z = self.latents.gather_rows(&[identity]);
        let v = z.matmul_t(&self.voice_map).expect("dims fixed at sampling");
        let f = z.matmul_t(&self.face_map).expect("dims fixed at sampling");
        (v.into_data(), f.into_data())
    }
}

/// Sample the world and all its videos. Instances are ordered by identity.
pub fn generate(config: &WorldConfig) -> Result<Vec<InstanceRecord>> {
    Ok(generate_with_world(config)?.1)
}

pub fn generate_with_world(config: &WorldConfig) -> Result<(World, Vec<InstanceRecord>)> {
    let world = World::sample(config)?;
    let n = config.num_instances();
    let clean: Vec<_> = (0..config.num_identities)
        .map(|i| world.clean_features(i))
        .collect();

    let mut dev_rng = substream(config.seed, "world.deviates", 0);
    let n_dev = (config.deviate_fraction * n as f64).round() as usize;
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut dev_rng);
    let deviates: BTreeSet<usize> = order[..n_dev].iter().copied().collect();

    let mut noise_rng = substream(config.seed, "world.noise", 0);
    let mut session_rng = substream(config.seed, "world.sessions", 0);
    let (own, shared) = ((1.0 - config.shared_noise).sqrt(), config.shared_noise.sqrt());
    // own·ε + shared·S·u, each term scaled by the modality's noise std
    let mut noise = |map: &Matrix, u: &Matrix, std: f64| -> Vec<f64> {
        let s = u.matmul_t(map).expect("dims fixed at sampling");
        s.data()
            .iter()
            .map(|&su| std * (own * noise_rng.sample::<f64, _>(StandardNormal) + shared * su))
            .collect()
    };

    let mut records = Vec::with_capacity(n);
    for id in 0..n {
        let identity = id / config.videos_per_identity;
        let (clean_v, clean_f) = &clean[identity];
        let session = gaussian_matrix(&mut session_rng, 1, config.latent_dim, 1.0);
        let face: Vec<f64> = clean_f
            .iter()
            .zip(noise(&world.face_session_map, &session, config.face_noise_std))
            .map(|(a, b)| a + b)
            .collect();
        let voice_noise = noise(&world.voice_session_map, &session, config.voice_noise_std);

        let mut deviate = None;
        let mut deviate_source = None;
        let voice_clean: Vec<f64> = if deviates.contains(&id) {
            deviate = Some(config.deviate_mode);
            match config.deviate_mode {
                DeviateMode::Drift => clean_v.clone(),
                mode => {
                    let other = {
                        let k = dev_rng.random_range(0..config.num_identities - 1);
                        if k >= identity {
                            k + 1
                        } else {
                            k
                        }
                    };
                    deviate_source = Some(other);
                    let other_v = &clean[other].0;
                    if mode == DeviateMode::Swap {
                        other_v.clone()
                    } else {
                        clean_v
                            .iter()
                            .zip(other_v)
                            .map(|(a, b)| 0.5 * a + 0.5 * b)
                            .collect()
                    }
                }
            }
        } else {
            clean_v.clone()
        };
        let noise_scale = if deviate == Some(DeviateMode::Drift) {
            5.0
        } else {
            1.0
        };
        let voice = voice_clean
            .iter()
            .zip(&voice_noise)
            .map(|(a, b)| a + noise_scale * b)
            .collect();

        records.push(InstanceRecord {
            instance_id: id,
            voice,
            face,
            truth: GroundTruth {
                identity_id: identity,
                attributes: world.attributes[identity],
                deviate,
                deviate_source,
            },
        });
    }
    Ok((world, records))
}

/// Identity-disjoint train/test partition.
#[derive(Debug, Clone, PartialEq)]
pub struct DatasetSplit {
    pub train: Vec<InstanceRecord>,
    pub test: Vec<InstanceRecord>,
}

impl DatasetSplit {
    pub fn test_identities(&self) -> BTreeSet<usize> {
        self.test.iter().map(|r| r.truth.identity_id).collect()
    }

    pub fn train_identities(&self) -> BTreeSet<usize> {
        self.train.iter().map(|r| r.truth.identity_id).collect()
    }

    /// Rebuild a split from a list of test identities.
    pub fn from_test_identities(
        instances: &[InstanceRecord],
        test_identities: &BTreeSet<usize>,
    ) -> Self {
        let (test, train) = instances
            .iter()
            .cloned()
            .partition(|r| test_identities.contains(&r.truth.identity_id));
        Self { train, test }
    }
}

/// Hold out `round(fraction · identities)` identities for testing.
///
/// With `stratify`, the gender-like attribute is split proportionally
/// (largest remainder), so each gender's test count is within one identity
/// of its global share.
pub fn split_by_identity(
    instances: &[InstanceRecord],
    test_fraction: f64,
    seed: u64,
    stratify: bool,
) -> Result<DatasetSplit> {
    if !(test_fraction > 0.0 && test_fraction < 1.0) {
        return Err(Error::Argument(format!(
            "test fraction {test_fraction} outside (0, 1)"
        )));
    }
    let mut by_gender: BTreeMap<u8, BTreeSet<usize>> = BTreeMap::new();
    for r in instances {
        by_gender
            .entry(r.truth.attributes.gender)
            .or_default()
            .insert(r.truth.identity_id);
    }
    let total: usize = by_gender.values().map(BTreeSet::len).sum();
    let n_test = (test_fraction * total as f64).round() as usize;
    if n_test == 0 || n_test == total {
        return Err(Error::Argument(format!(
            "test fraction {test_fraction} of {total} identities leaves a split empty"
        )));
    }

    let mut rng = substream(seed, "split", 0);
    let mut test = BTreeSet::new();
    if stratify {
        let groups: Vec<(u8, Vec<usize>)> = by_gender
            .into_iter()
            .map(|(g, ids)| (g, ids.into_iter().collect()))
            .collect();
        let exact: Vec<f64> = groups
            .iter()
            .map(|(_, ids)| n_test as f64 * ids.len() as f64 / total as f64)
            .collect();
        let mut quota: Vec<usize> = exact.iter().map(|x| x.floor() as usize).collect();
        let mut by_remainder: Vec<usize> = (0..groups.len()).collect();
        by_remainder.sort_by(|&a, &b| {
            (exact[b] - exact[b].floor())
                .total_cmp(&(exact[a] - exact[a].floor()))
                .then(a.cmp(&b))
        });
        let missing = n_test - quota.iter().sum::<usize>();
        for &g in by_remainder.iter().take(missing) {
            quota[g] += 1;
        }
        for ((_, mut ids), q) in groups.into_iter().zip(quota) {
            ids.shuffle(&mut rng);
            test.extend(ids.into_iter().take(q));
        }
    } else {
        let mut ids: Vec<usize> = by_gender.into_values().flatten().collect();
        ids.sort_unstable();
        ids.shuffle(&mut rng);
        test.extend(ids.into_iter().take(n_test));
    }
    Ok(DatasetSplit::from_test_identities(instances, &test))
}

/// Features-only view handed to the trainer; row `i` is training instance `i`.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainingSet {
    pub instance_ids: Vec<usize>,
    pub voice: Matrix,
    pub face: Matrix,
}

impl TrainingSet {
    pub fn from_records(records: &[InstanceRecord]) -> Result<Self> {
        let voice = Matrix::from_rows(&records.iter().map(|r| &r.voice[..]).collect::<Vec<_>>())?;
        let face = Matrix::from_rows(&records.iter().map(|r| &r.face[..]).collect::<Vec<_>>())?;
        Ok(Self {
            instance_ids: records.iter().map(|r| r.instance_id).collect(),
            voice,
            face,
        })
    }

    pub fn len(&self) -> usize {
        self.instance_ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.instance_ids.is_empty()
    }
}

pub const DATASET_FILE: &str = "dataset.jsonl";
pub const FEATURES_FILE: &str = "features.bin";

#[derive(Serialize, Deserialize)]
struct RecordLine {
    instance_id: usize,
    voice_dim: usize,
    face_dim: usize,
    /// Byte offset of the voice row inside the feature file.
    voice_offset: u64,
    face_offset: u64,
    ground_truth: GroundTruth,
}

/// Write `dataset.jsonl` plus the `features.bin` sidecar into `dir`.
pub fn write_dataset(dir: &Path, records: &[InstanceRecord]) -> Result<()> {
    let ts = TrainingSet::from_records(records)?;
    let mut c = Container::new("features");
    c.put_matrix("voice", &ts.voice);
    c.put_matrix("face", &ts.face);
    let offsets = c.data_offsets();
    c.write_file(&dir.join(FEATURES_FILE))?;

    let path = dir.join(DATASET_FILE);
    let file = fs::File::create(&path).map_err(|e| Error::io(&path, e))?;
    let mut out = BufWriter::new(file);
    let (dv, df) = (ts.voice.cols() as u64, ts.face.cols() as u64);
    for (row, r) in records.iter().enumerate() {
        let line = RecordLine {
            instance_id: r.instance_id,
            voice_dim: dv as usize,
            face_dim: df as usize,
            voice_offset: offsets[0] + 8 * dv * row as u64,
            face_offset: offsets[1] + 8 * df * row as u64,
            ground_truth: r.truth.clone(),
        };
        serde_json::to_writer(&mut out, &line)?;
        out.write_all(b"\n").map_err(|e| Error::io(&path, e))?;
    }
    out.flush().map_err(|e| Error::io(&path, e))
}

pub fn read_dataset(dir: &Path) -> Result<Vec<InstanceRecord>> {
    let fpath = dir.join(FEATURES_FILE);
    let bytes = fs::read(&fpath).map_err(|e| Error::io(&fpath, e))?;
    Container::decode(&bytes)?.require_kind("features")?;
    let read_row = |offset: u64, dim: usize| -> Result<Vec<f64>> {
        let start = offset as usize;
        let end = start + 8 * dim;
        if end > bytes.len() {
            return Err(Error::Load(format!("feature offset {offset} out of range")));
        }
        Ok(bytes[start..end]
            .chunks_exact(8)
            .map(|b| f64::from_le_bytes(b.try_into().unwrap()))
            .collect())
    };

    let path = dir.join(DATASET_FILE);
    let file = fs::File::open(&path).map_err(|e| Error::io(&path, e))?;
    let mut records = Vec::new();
    for line in BufReader::new(file).lines() {
        let line = line.map_err(|e| Error::io(&path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let rec: RecordLine = serde_json::from_str(&line)?;
        records.push(InstanceRecord {
            instance_id: rec.instance_id,
            voice: read_row(rec.voice_offset, rec.voice_dim)?,
            face: read_row(rec.face_offset, rec.face_dim)?,
            truth: rec.ground_truth,
        });
    }
    Ok(records)
}
