//! Evaluation protocols on held-out identities: 1-of-2 matching, verification
//! ROC AUC and retrieval mAP, optionally stratified by shared attributes.
//!
//! All scores are cosine similarities. Ties count as one half everywhere.

use std::collections::{BTreeMap, HashMap};
use std::fmt::Write as _;
use std::fs;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use rand::seq::IndexedRandom;
use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{cosine, Matrix, MlpEncoder};
use crate::rng::substream;
use crate::synth::{Attributes, InstanceRecord};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Protocol {
    Matching,
    Verification,
    Retrieval,
}

impl std::str::FromStr for Protocol {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "matching" => Ok(Self::Matching),
            "verification" => Ok(Self::Verification),
            "retrieval" => Ok(Self::Retrieval),
            o => Err(Error::Argument(format!("unknown protocol `{o}`"))),
        }
    }
}

/// Which attributes an imposter must share with the probe identity.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Stratum {
    U,
    G,
    N,
    A,
    GN,
    GNA,
}

impl Stratum {
    pub const ALL: [Stratum; 6] = [Self::U, Self::G, Self::N, Self::A, Self::GN, Self::GNA];

    fn key(self, a: &Attributes) -> (Option<u8>, Option<u16>, Option<u16>) {
        let (g, n, age) = match self {
            Self::U => (false, false, false),
            Self::G => (true, false, false),
            Self::N => (false, true, false),
            Self::A => (false, false, true),
            Self::GN => (true, true, false),
            Self::GNA => (true, true, true),
        };
        (
            g.then_some(a.gender),
            n.then_some(a.nationality),
            age.then_some(a.age),
        )
    }
}

impl std::fmt::Display for Stratum {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{self:?}")
    }
}

impl std::str::FromStr for Stratum {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|x| x.to_string().eq_ignore_ascii_case(s))
            .ok_or_else(|| Error::Argument(format!("unknown stratum `{s}` (U, G, N, A, GN, GNA)")))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Modality {
    Voice,
    Face,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum Trial {
    Matching {
        probe: usize,
        positive: usize,
        imposter: usize,
        probe_modality: Modality,
    },
    Verification {
        voice: usize,
        face: usize,
        same: bool,
    },
    Retrieval {
        probe: usize,
        probe_modality: Modality,
        gallery: Vec<usize>,
        relevant: Vec<bool>,
    },
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrialList {
    pub protocol: Protocol,
    pub stratum: Stratum,
    pub trials: Vec<Trial>,
}

#[derive(Serialize, Deserialize)]
struct TrialLine {
    stratum: Stratum,
    #[serde(flatten)]
    trial: Trial,
}

impl TrialList {
    pub fn write_jsonl(&self, path: &Path) -> Result<()> {
        let file = fs::File::create(path).map_err(|e| Error::io(path, e))?;
        let mut out = BufWriter::new(file);
        for t in &self.trials {
            serde_json::to_writer(
                &mut out,
                &TrialLine {
                    stratum: self.stratum,
                    trial: t.clone(),
                },
            )?;
            out.write_all(b"\n").map_err(|e| Error::io(path, e))?;
        }
        out.flush().map_err(|e| Error::io(path, e))
    }

    pub fn read_jsonl(path: &Path) -> Result<Self> {
        let file = fs::File::open(path).map_err(|e| Error::io(path, e))?;
        let mut trials = Vec::new();
        let mut meta = None;
        for line in BufReader::new(file).lines() {
            let line = line.map_err(|e| Error::io(path, e))?;
            if line.trim().is_empty() {
                continue;
            }
            let t: TrialLine = serde_json::from_str(&line)?;
            let protocol = match t.trial {
                Trial::Matching { .. } => Protocol::Matching,
                Trial::Verification { .. } => Protocol::Verification,
                Trial::Retrieval { .. } => Protocol::Retrieval,
            };
            if *meta.get_or_insert((protocol, t.stratum)) != (protocol, t.stratum) {
                return Err(Error::Load(format!("{}: mixed trial kinds", path.display())));
            }
            trials.push(t.trial);
        }
        let (protocol, stratum) = meta.ok_or_else(|| Error::Load(format!("{}: no trials", path.display())))?;
        Ok(Self {
            protocol,
            stratum,
            trials,
        })
    }
}

struct IdentityIndex {
    /// identity → instance ids (ascending)
    members: BTreeMap<usize, Vec<usize>>,
    attributes: BTreeMap<usize, Attributes>,
}

impl IdentityIndex {
    fn new(records: &[InstanceRecord]) -> Self {
        let mut members: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
        let mut attributes = BTreeMap::new();
        for r in records {
            members.entry(r.truth.identity_id).or_default().push(r.instance_id);
            attributes.insert(r.truth.identity_id, r.truth.attributes);
        }
        members.values_mut().for_each(|v| v.sort_unstable());
        Self { members, attributes }
    }

    /// Imposter identities per identity under the stratum.
    fn imposters(&self, stratum: Stratum) -> BTreeMap<usize, Vec<usize>> {
        self.members
            .keys()
            .map(|&id| {
                let key = stratum.key(&self.attributes[&id]);
                let others = self
                    .members
                    .keys()
                    .copied()
                    .filter(|&o| o != id && stratum.key(&self.attributes[&o]) == key)
                    .collect();
                (id, others)
            })
            .collect()
    }
}

fn other_instance<R: rand::Rng>(members: &[usize], probe: usize, rng: &mut R) -> usize {
    let others: Vec<usize> = members.iter().copied().filter(|&m| m != probe).collect();
    others.choose(rng).copied().unwrap_or(probe)
}

/// Sample a trial list over the given (test-split) records.
///
/// Matching produces `count` trials per probe modality; verification `count`
/// trials, alternating positive and negative; retrieval up to `count` probes
/// per modality against the full gallery.
pub fn build_trials(
    records: &[InstanceRecord],
    protocol: Protocol,
    stratum: Stratum,
    count: usize,
    seed: u64,
) -> Result<TrialList> {
    let index = IdentityIndex::new(records);
    if index.members.len() < 2 {
        return Err(Error::Argument(format!(
            "trials need at least 2 identities, have {}",
            index.members.len()
        )));
    }
    let mut rng = substream(seed, &format!("trials.{protocol:?}.{stratum}"), 0);
    let imposters = index.imposters(stratum);
    let feasible: Vec<usize> = index
        .members
        .iter()
        .filter(|(id, _)| !imposters[id].is_empty())
        .flat_map(|(_, m)| m.iter().copied())
        .collect();
    let identity_of: HashMap<usize, usize> = records
        .iter()
        .map(|r| (r.instance_id, r.truth.identity_id))
        .collect();
    if feasible.is_empty() && protocol != Protocol::Retrieval {
        return Err(Error::Argument(format!(
            "no identity has an imposter sharing its attributes under stratum {stratum}"
        )));
    }
    let imposter_for = |probe: usize, rng: &mut crate::rng::Rng| -> usize {
        let id = identity_of[&probe];
        let other = *imposters[&id].choose(rng).expect("feasible probe");
        *index.members[&other].choose(rng).expect("identity has members")
    };

    let mut trials = Vec::new();
    match protocol {
        Protocol::Matching => {
            for modality in [Modality::Voice, Modality::Face] {
                for _ in 0..count {
                    let probe = *feasible.choose(&mut rng).unwrap();
                    let positive = other_instance(&index.members[&identity_of[&probe]], probe, &mut rng);
                    let imposter = imposter_for(probe, &mut rng);
                    trials.push(Trial::Matching {
                        probe,
                        positive,
                        imposter,
                        probe_modality: modality,
                    });
                }
            }
        }
        Protocol::Verification => {
            for k in 0..count {
                let voice = *feasible.choose(&mut rng).unwrap();
                let (face, same) = if k % 2 == 0 {
                    (other_instance(&index.members[&identity_of[&voice]], voice, &mut rng), true)
                } else {
                    (imposter_for(voice, &mut rng), false)
                };
                trials.push(Trial::Verification { voice, face, same });
            }
        }
        Protocol::Retrieval => {
            let mut gallery: Vec<usize> = records.iter().map(|r| r.instance_id).collect();
            gallery.sort_unstable();
            for modality in [Modality::Voice, Modality::Face] {
                let mut probes = gallery.clone();
                probes.shuffle(&mut rng);
                probes.truncate(count.min(probes.len()));
                for probe in probes {
                    let relevant = gallery
                        .iter()
                        .map(|g| identity_of[g] == identity_of[&probe])
                        .collect();
                    trials.push(Trial::Retrieval {
                        probe,
                        probe_modality: modality,
                        gallery: gallery.clone(),
                        relevant,
                    });
                }
            }
        }
    }
    Ok(TrialList {
        protocol,
        stratum,
        trials,
    })
}

/// Voice and face embeddings keyed by instance id.
#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingTable {
    pub instance_ids: Vec<usize>,
    pub voice: Matrix,
    pub face: Matrix,
    rows: HashMap<usize, usize>,
}

impl EmbeddingTable {
    pub fn new(instance_ids: Vec<usize>, voice: Matrix, face: Matrix) -> Result<Self> {
        if voice.rows() != instance_ids.len() || face.rows() != instance_ids.len() {
            return Err(Error::Shape("embedding rows must match instance ids".into()));
        }
        let rows = instance_ids.iter().enumerate().map(|(r, &id)| (id, r)).collect();
        Ok(Self {
            instance_ids,
            voice,
            face,
            rows,
        })
    }

    pub fn from_encoders(records: &[InstanceRecord], voice: &MlpEncoder, face: &MlpEncoder) -> Result<Self> {
        let ts = crate::synth::TrainingSet::from_records(records)?;
        Self::new(ts.instance_ids, voice.forward(&ts.voice)?, face.forward(&ts.face)?)
    }

    pub fn get(&self, id: usize, modality: Modality) -> Result<&[f64]> {
        let r = *self
            .rows
            .get(&id)
            .ok_or_else(|| Error::Argument(format!("no embedding for instance {id}")))?;
        Ok(match modality {
            Modality::Voice => self.voice.row(r),
            Modality::Face => self.face.row(r),
        })
    }
}

fn other(m: Modality) -> Modality {
    match m {
        Modality::Voice => Modality::Face,
        Modality::Face => Modality::Voice,
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DirectionalScore {
    pub v2f: Option<f64>,
    pub f2v: Option<f64>,
    pub v2f_count: usize,
    pub f2v_count: usize,
}

/// Trial correct iff `cos(probe, positive) > cos(probe, imposter)`; ties ½.
pub fn matching_accuracy(table: &EmbeddingTable, trials: &[Trial]) -> Result<DirectionalScore> {
    let mut acc = [(0.0, 0usize); 2];
    for t in trials {
        let Trial::Matching {
            probe,
            positive,
            imposter,
            probe_modality,
        } = *t
        else {
            return Err(Error::Argument("non-matching trial in matching list".into()));
        };
        let p = table.get(probe, probe_modality)?;
        let cand = other(probe_modality);
        let sp = cosine(p, table.get(positive, cand)?);
        let si = cosine(p, table.get(imposter, cand)?);
        let score = if sp > si {
            1.0
        } else if sp == si {
            0.5
        } else {
            0.0
        };
        let slot = &mut acc[(probe_modality == Modality::Face) as usize];
        slot.0 += score;
        slot.1 += 1;
    }
    let ratio = |(s, n): (f64, usize)| (n > 0).then(|| s / n as f64);
    Ok(DirectionalScore {
        v2f: ratio(acc[0]),
        f2v: ratio(acc[1]),
        v2f_count: acc[0].1,
        f2v_count: acc[1].1,
    })
}

/// Mann–Whitney AUC: fraction of (positive, negative) pairs ordered
/// correctly, ties ½. `O(n log n)` via a sorted sweep.
pub fn auc_mann_whitney(pos: &[f64], neg: &[f64]) -> Result<f64> {
    if pos.is_empty() || neg.is_empty() {
        return Err(Error::Argument(format!(
            "AUC needs both classes ({} positive, {} negative)",
            pos.len(),
            neg.len()
        )));
    }
    let mut all: Vec<(f64, bool)> = pos
        .iter()
        .map(|&s| (s, true))
        .chain(neg.iter().map(|&s| (s, false)))
        .collect();
    all.sort_by(|a, b| a.0.total_cmp(&b.0));
    let mut count = 0.0;
    let mut neg_below = 0.0;
    let mut i = 0;
    while i < all.len() {
        let mut j = i;
        let (mut p, mut q) = (0.0, 0.0);
        while j < all.len() && all[j].0 == all[i].0 {
            if all[j].1 {
                p += 1.0
            } else {
                q += 1.0
            }
            j += 1;
        }
        count += p * neg_below + 0.5 * p * q;
        neg_below += q;
        i = j;
    }
    Ok(count / (pos.len() as f64 * neg.len() as f64))
}

/// AUC by trapezoidal integration of the ROC curve over distinct thresholds.
pub fn auc_trapezoid(pos: &[f64], neg: &[f64]) -> Result<f64> {
    if pos.is_empty() || neg.is_empty() {
        return Err(Error::Argument("AUC needs both classes".into()));
    }
    let mut all: Vec<(f64, bool)> = pos
        .iter()
        .map(|&s| (s, true))
        .chain(neg.iter().map(|&s| (s, false)))
        .collect();
    all.sort_by(|a, b| b.0.total_cmp(&a.0));
    let (np, nn) = (pos.len() as f64, neg.len() as f64);
    let (mut tp, mut fp) = (0.0, 0.0);
    let (mut prev_tpr, mut prev_fpr) = (0.0, 0.0);
    let mut area = 0.0;
    let mut i = 0;
    while i < all.len() {
        let threshold = all[i].0;
        while i < all.len() && all[i].0 == threshold {
            if all[i].1 {
                tp += 1.0
            } else {
                fp += 1.0
            }
            i += 1;
        }
        let (tpr, fpr) = (tp / np, fp / nn);
        area += (fpr - prev_fpr) * (tpr + prev_tpr) / 2.0;
        prev_tpr = tpr;
        prev_fpr = fpr;
    }
    Ok(area)
}

pub fn verification_auc(table: &EmbeddingTable, trials: &[Trial]) -> Result<f64> {
    let (mut pos, mut neg) = (Vec::new(), Vec::new());
    for t in trials {
        let Trial::Verification { voice, face, same } = *t else {
            return Err(Error::Argument("non-verification trial in verification list".into()));
        };
        let s = cosine(table.get(voice, Modality::Voice)?, table.get(face, Modality::Face)?);
        if same {
            pos.push(s)
        } else {
            neg.push(s)
        }
    }
    auc_mann_whitney(&pos, &neg)
}

/// Mean over relevant items of precision at that item's rank.
pub fn average_precision(ranked_relevance: &[bool]) -> Result<f64> {
    let mut hits = 0.0;
    let mut sum = 0.0;
    for (rank, &rel) in ranked_relevance.iter().enumerate() {
        if rel {
            hits += 1.0;
            sum += hits / (rank + 1) as f64;
        }
    }
    if hits == 0.0 {
        return Err(Error::Argument("gallery has no relevant item".into()));
    }
    Ok(sum / hits)
}

/// mAP per direction; galleries ranked by descending cosine, ties by id.
pub fn retrieval_map(table: &EmbeddingTable, trials: &[Trial]) -> Result<DirectionalScore> {
    let mut acc = [(0.0, 0usize); 2];
    for t in trials {
        let Trial::Retrieval {
            probe,
            probe_modality,
            gallery,
            relevant,
        } = t
        else {
            return Err(Error::Argument("non-retrieval trial in retrieval list".into()));
        };
        if gallery.len() != relevant.len() {
            return Err(Error::Shape("gallery and relevance flags differ in length".into()));
        }
        let p = table.get(*probe, *probe_modality)?;
        let cand = other(*probe_modality);
        let mut scored = gallery
            .iter()
            .zip(relevant)
            .map(|(&g, &rel)| Ok((cosine(p, table.get(g, cand)?), g, rel)))
            .collect::<Result<Vec<_>>>()?;
        scored.sort_by(|a, b| b.0.total_cmp(&a.0).then(a.1.cmp(&b.1)));
        let ap = average_precision(&scored.iter().map(|s| s.2).collect::<Vec<_>>())
            .map_err(|_| Error::Argument(format!("probe {probe} has no relevant gallery item")))?;
        let slot = &mut acc[(*probe_modality == Modality::Face) as usize];
        slot.0 += ap;
        slot.1 += 1;
    }
    let ratio = |(s, n): (f64, usize)| (n > 0).then(|| s / n as f64);
    Ok(DirectionalScore {
        v2f: ratio(acc[0]),
        f2v: ratio(acc[1]),
        v2f_count: acc[0].1,
        f2v_count: acc[1].1,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MatchingCell {
    pub stratum: Stratum,
    pub v2f: f64,
    pub f2v: f64,
    pub trials: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VerificationCell {
    pub stratum: Stratum,
    pub auc: f64,
    pub trials: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RetrievalCell {
    pub v2f: f64,
    pub f2v: f64,
    pub probes: usize,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct EvalReport {
    pub matching: Vec<MatchingCell>,
    pub verification: Vec<VerificationCell>,
    pub retrieval: Option<RetrievalCell>,
}

impl EvalReport {
    pub fn matching_for(&self, s: Stratum) -> Option<&MatchingCell> {
        self.matching.iter().find(|c| c.stratum == s)
    }

    pub fn verification_for(&self, s: Stratum) -> Option<&VerificationCell> {
        self.verification.iter().find(|c| c.stratum == s)
    }

    /// Text rendering laid out like the usual matching / verification /
    /// retrieval result tables (values in percent).
    pub fn to_table(&self) -> String {
        let mut out = String::new();
        if !self.matching.is_empty() {
            out.push_str("Matching (accuracy %)\n");
            let _ = write!(out, "{:<8}", "");
            for c in &self.matching {
                let _ = write!(out, "{:>8}", c.stratum.to_string());
            }
            out.push('\n');
            for (label, pick) in [("V-F", 0), ("F-V", 1)] {
                let _ = write!(out, "{label:<8}");
                for c in &self.matching {
                    let v = if pick == 0 { c.v2f } else { c.f2v };
                    let _ = write!(out, "{:>8.1}", 100.0 * v);
                }
                out.push('\n');
            }
        }
        if !self.verification.is_empty() {
            out.push_str("Verification (AUC %)\n");
            let _ = write!(out, "{:<8}", "");
            for c in &self.verification {
                let _ = write!(out, "{:>8}", c.stratum.to_string());
            }
            out.push('\n');
            let _ = write!(out, "{:<8}", "AUC");
            for c in &self.verification {
                let _ = write!(out, "{:>8.1}", 100.0 * c.auc);
            }
            out.push('\n');
        }
        if let Some(r) = &self.retrieval {
            out.push_str("Retrieval (mAP %)\n");
            let _ = writeln!(out, "{:<8}{:>8}{:>8}", "", "V-F", "F-V");
            let _ = writeln!(out, "{:<8}{:>8.2}{:>8.2}", "mAP", 100.0 * r.v2f, 100.0 * r.f2v);
        }
        out
    }
}

/// What to evaluate and how many trials to draw.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EvalSpec {
    pub protocols: Vec<Protocol>,
    pub strata: Vec<Stratum>,
    pub matching_trials: usize,
    pub verification_trials: usize,
    pub retrieval_probes: usize,
    pub seed: u64,
}

impl Default for EvalSpec {
    fn default() -> Self {
        Self {
            protocols: vec![Protocol::Matching, Protocol::Verification, Protocol::Retrieval],
            strata: vec![Stratum::U],
            matching_trials: 2000,
            verification_trials: 2000,
            retrieval_probes: usize::MAX,
            seed: 0,
        }
    }
}

/// Pre-built trial lists over a fixed test split.
#[derive(Debug, Clone)]
pub struct Evaluator {
    records: Vec<InstanceRecord>,
    pub lists: Vec<TrialList>,
}

impl Evaluator {
    pub fn new(test_records: &[InstanceRecord], spec: &EvalSpec) -> Result<Self> {
        let mut lists = Vec::new();
        for &p in &spec.protocols {
            match p {
                Protocol::Retrieval => {
                    lists.push(build_trials(test_records, p, Stratum::U, spec.retrieval_probes, spec.seed)?)
                }
                _ => {
                    let count = if p == Protocol::Matching {
                        spec.matching_trials
                    } else {
                        spec.verification_trials
                    };
                    for &s in &spec.strata {
                        lists.push(build_trials(test_records, p, s, count, spec.seed)?);
                    }
                }
            }
        }
        Ok(Self {
            records: test_records.to_vec(),
            lists,
        })
    }

    pub fn records(&self) -> &[InstanceRecord] {
        &self.records
    }

    pub fn evaluate_encoders(&self, voice: &MlpEncoder, face: &MlpEncoder) -> Result<EvalReport> {
        self.evaluate(&EmbeddingTable::from_encoders(&self.records, voice, face)?)
    }

    pub fn evaluate(&self, table: &EmbeddingTable) -> Result<EvalReport> {
        let mut report = EvalReport::default();
        for list in &self.lists {
            match list.protocol {
                Protocol::Matching => {
                    let s = matching_accuracy(table, &list.trials)?;
                    report.matching.push(MatchingCell {
                        stratum: list.stratum,
                        v2f: s.v2f.unwrap_or(f64::NAN),
                        f2v: s.f2v.unwrap_or(f64::NAN),
                        trials: list.trials.len(),
                    });
                }
                Protocol::Verification => report.verification.push(VerificationCell {
                    stratum: list.stratum,
                    auc: verification_auc(table, &list.trials)?,
                    trials: list.trials.len(),
                }),
                Protocol::Retrieval => {
                    let s = retrieval_map(table, &list.trials)?;
                    report.retrieval = Some(RetrievalCell {
                        v2f: s.v2f.unwrap_or(f64::NAN),
                        f2v: s.f2v.unwrap_or(f64::NAN),
                        probes: s.v2f_count,
                    });
                }
            }
        }
        Ok(report)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synth::{generate, WorldConfig};

    fn test_records(ids: usize, videos: usize, seed: u64) -> Vec<InstanceRecord> {
        generate(&WorldConfig {
            num_identities: ids,
            videos_per_identity: videos,
            latent_dim: 4,
            voice_dim: 4,
            face_dim: 4,
            seed,
            ..WorldConfig::default()
        })
        .unwrap()
    }

    #[test]
    fn gender_stratified_imposters_share_gender() {
        let recs = test_records(20, 3, 1);
        let truth: HashMap<usize, _> = recs.iter().map(|r| (r.instance_id, r.truth.clone())).collect();
        let list = build_trials(&recs, Protocol::Matching, Stratum::G, 300, 5).unwrap();
        assert_eq!(list.trials.len(), 600);
        for t in &list.trials {
            let Trial::Matching { probe, positive, imposter, .. } = *t else { panic!() };
            assert_eq!(truth[&probe].identity_id, truth[&positive].identity_id);
            assert_ne!(truth[&probe].identity_id, truth[&imposter].identity_id);
            assert_eq!(truth[&positive].attributes.gender, truth[&imposter].attributes.gender);
        }
    }

    #[test]
    fn trials_are_seeded() {
        let recs = test_records(10, 2, 2);
        for p in [Protocol::Matching, Protocol::Verification, Protocol::Retrieval] {
            let a = build_trials(&recs, p, Stratum::U, 1000, 3).unwrap();
            assert_eq!(a, build_trials(&recs, p, Stratum::U, 1000, 3).unwrap());
        }
    }

    #[test]
    fn two_identities_unstratified() {
        let recs = test_records(2, 3, 4);
        let list = build_trials(&recs, Protocol::Matching, Stratum::U, 50, 0).unwrap();
        for t in &list.trials {
            let Trial::Matching { probe, imposter, .. } = *t else { panic!() };
            assert_ne!(probe / 3, imposter / 3);
        }
    }

    #[test]
    fn infeasible_stratification_is_rejected() {
        let mut recs = test_records(3, 1, 4);
        for (i, r) in recs.iter_mut().enumerate() {
            r.truth.attributes.nationality = i as u16;
        }
        assert!(matches!(
            build_trials(&recs, Protocol::Matching, Stratum::N, 10, 0),
            Err(Error::Argument(_))
        ));
        assert!(build_trials(&recs[..1], Protocol::Matching, Stratum::U, 10, 0).is_err());
    }

    #[test]
    fn identical_embeddings_tie_at_half() {
        let recs = test_records(5, 2, 1);
        let n = recs.len();
        let same = Matrix::from_vec(n, 2, [0.6, 0.8].repeat(n)).unwrap();
        let table = EmbeddingTable::new((0..n).collect(), same.clone(), same).unwrap();
        let list = build_trials(&recs, Protocol::Matching, Stratum::U, 40, 0).unwrap();
        let s = matching_accuracy(&table, &list.trials).unwrap();
        assert_eq!((s.v2f, s.f2v), (Some(0.5), Some(0.5)));
        let list = build_trials(&recs, Protocol::Verification, Stratum::U, 40, 0).unwrap();
        assert_eq!(verification_auc(&table, &list.trials).unwrap(), 0.5);
    }

    #[test]
    fn missing_embedding_names_instance() {
        let table = EmbeddingTable::new(vec![0, 1], Matrix::zeros(2, 2), Matrix::zeros(2, 2)).unwrap();
        let t = [Trial::Matching {
            probe: 0,
            positive: 1,
            imposter: 17,
            probe_modality: Modality::Voice,
        }];
        let err = matching_accuracy(&table, &t).unwrap_err();
        assert!(err.to_string().contains("17"));
    }

    #[test]
    fn auc_small_cases() {
        assert_eq!(auc_mann_whitney(&[0.9, 0.4], &[0.6, 0.1]).unwrap(), 0.75);
        assert_eq!(auc_mann_whitney(&[0.9, 0.8], &[0.1, 0.2]).unwrap(), 1.0);
        assert_eq!(auc_mann_whitney(&[0.3; 3], &[0.3; 4]).unwrap(), 0.5);
        assert!(auc_mann_whitney(&[0.3], &[]).is_err());
        assert!((auc_trapezoid(&[0.9, 0.4], &[0.6, 0.1]).unwrap() - 0.75).abs() < 1e-15);
    }

    #[test]
    fn average_precision_cases() {
        assert!((average_precision(&[true, false, true]).unwrap() - 5.0 / 6.0).abs() < 1e-15);
        assert_eq!(average_precision(&[true, false]).unwrap(), 1.0);
        assert!(average_precision(&[false, false]).is_err());
    }

    #[test]
    fn trial_list_jsonl_round_trip() {
        let recs = test_records(6, 2, 9);
        let dir = tempfile::tempdir().unwrap();
        for p in [Protocol::Matching, Protocol::Verification, Protocol::Retrieval] {
            let list = build_trials(&recs, p, Stratum::U, 7, 1).unwrap();
            let path = dir.path().join("t.jsonl");
            list.write_jsonl(&path).unwrap();
            assert_eq!(TrialList::read_jsonl(&path).unwrap(), list);
        }
    }

    #[test]
    fn report_table_has_requested_cells() {
        let recs = test_records(12, 2, 3);
        let spec = EvalSpec {
            protocols: vec![Protocol::Matching],
            strata: vec![Stratum::U, Stratum::G],
            matching_trials: 20,
            ..EvalSpec::default()
        };
        let ev = Evaluator::new(&recs, &spec).unwrap();
        let table = EmbeddingTable::from_encoders(
            &recs,
            &MlpEncoder::new(&[4, 3], &mut substream(0, "a", 0)).unwrap(),
            &MlpEncoder::new(&[4, 3], &mut substream(0, "b", 0)).unwrap(),
        )
        .unwrap();
        let report = ev.evaluate(&table).unwrap();
        assert_eq!(report.matching.len(), 2);
        assert!(report.verification.is_empty() && report.retrieval.is_none());
        let text = report.to_table();
        assert!(text.contains("V-F") && text.contains("F-V"));
    }
}
