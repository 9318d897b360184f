//! Synthetic grouped datasets with controllable spurious correlations.
//!
//! Two generators play the roles of the image-side and text-side benchmarks:
//!
//! - `VecSpur`: dense feature vectors where coordinate 0 carries the label
//!   (core feature) and coordinate 1 carries a spurious attribute correlated
//!   with the label at a configurable strength.
//! - `TokSpur`: token sequences where the relative order of a core token pair
//!   determines the label, and a bias token co-occurs with the label at a
//!   configurable strength.
//!
//! Every sample is annotated with (label y, spurious attribute s, group id =
//! 2y + s). A bundle carries five splits: train, id_test, ood_test (spurious
//! correlation reduced to `rho_ood`), transfer_test (decorrelated, perturbed
//! noise), and a group-balanced heldout split reserved for last-layer
//! retraining.

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use std::fmt;
use std::io::{BufRead, Write};

use crate::rng::{self, Stream};
use crate::{Error, Result};
use rand::Rng;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, Hash)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    Train,
    IdTest,
    OodTest,
    TransferTest,
    Heldout,
}

impl Split {
    pub const ALL: [Split; 5] = [Split::Train, Split::IdTest, Split::OodTest, Split::TransferTest, Split::Heldout];

    pub fn name(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::IdTest => "id_test",
            Split::OodTest => "ood_test",
            Split::TransferTest => "transfer_test",
            Split::Heldout => "heldout",
        }
    }

    pub fn from_name(s: &str) -> Result<Self> {
        Split::ALL
            .iter()
            .copied()
            .find(|sp| sp.name() == s)
            .ok_or_else(|| Error::Format(format!("unknown split tag {s}")))
    }
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub enum Payload {
    Vec(Vec<f64>),
    Tok(Vec<u32>),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Sample {
    pub payload: Payload,
    pub y: u8,
    pub s: u8,
}

impl Sample {
    /// Group id (y, s) flattened as 2y + s.
    pub fn group(&self) -> u8 {
        2 * self.y + self.s
    }

    /// Content hash of the payload + annotations, used for split disjointness.
    pub fn content_hash(&self) -> [u8; 32] {
        let mut h = Sha256::new();
        h.update([self.y, self.s]);
        match &self.payload {
            Payload::Vec(v) => {
                h.update([0u8]);
                for x in v {
                    h.update(x.to_le_bytes());
                }
            }
            Payload::Tok(t) => {
                h.update([1u8]);
                for x in t {
                    h.update(x.to_le_bytes());
                }
            }
        }
        h.finalize().into()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GroupedDataset {
    pub split: Split,
    pub samples: Vec<Sample>,
}

impl GroupedDataset {
    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn group_counts(&self) -> [usize; 4] {
        let mut counts = [0usize; 4];
        for s in &self.samples {
            counts[s.group() as usize] += 1;
        }
        counts
    }
}

/// Per-split sample counts.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SplitSizes {
    pub train: usize,
    pub id_test: usize,
    pub ood_test: usize,
    pub transfer_test: usize,
    pub heldout: usize,
}

impl SplitSizes {
    fn validate(&self) -> Result<()> {
        for (n, what) in [
            (self.train, "train"),
            (self.id_test, "id_test"),
            (self.ood_test, "ood_test"),
            (self.transfer_test, "transfer_test"),
            (self.heldout, "heldout"),
        ] {
            if n == 0 {
                return Err(Error::InvalidConfig(format!("{what} count must be > 0")));
            }
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct VecSpurConfig {
    pub dim: usize,
    pub rho_train: f64,
    pub rho_ood: f64,
    pub core_margin: f64,
    pub spur_margin: f64,
    pub noise_sd: f64,
    pub sizes: SplitSizes,
}

impl VecSpurConfig {
    pub fn validate(&self) -> Result<()> {
        if self.dim < 2 {
            return Err(Error::InvalidConfig("vecspur dim must be >= 2".into()));
        }
        if !(self.rho_train > 0.5 && self.rho_train <= 1.0) {
            return Err(Error::InvalidConfig("rho_train must be in (0.5, 1]".into()));
        }
        if !(self.rho_ood >= 0.0 && self.rho_ood < 0.5) {
            return Err(Error::InvalidConfig("rho_ood must be in [0, 0.5)".into()));
        }
        if self.core_margin <= 0.0 || self.spur_margin <= 0.0 {
            return Err(Error::InvalidConfig("margins must be > 0".into()));
        }
        if self.noise_sd < 0.0 {
            return Err(Error::InvalidConfig("noise_sd must be >= 0".into()));
        }
        self.sizes.validate()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TokSpurConfig {
    pub vocab: usize,
    pub seq_len: usize,
    pub rho_train: f64,
    pub rho_ood: f64,
    /// Token whose presence is the spurious attribute.
    pub bias_token: u32,
    /// Token occupying the bias slot when the bias token is absent; corruption
    /// swaps the two.
    pub neutral_token: u32,
    /// Ordered pair whose relative order determines the label (a before b => 1).
    pub core_a: u32,
    pub core_b: u32,
    pub sizes: SplitSizes,
}

impl TokSpurConfig {
    pub fn validate(&self) -> Result<()> {
        if self.seq_len < 4 {
            return Err(Error::InvalidConfig("seq_len must be >= 4".into()));
        }
        if !(self.rho_train > 0.5 && self.rho_train <= 1.0) {
            return Err(Error::InvalidConfig("rho_train must be in (0.5, 1]".into()));
        }
        if !(self.rho_ood >= 0.0 && self.rho_ood < 0.5) {
            return Err(Error::InvalidConfig("rho_ood must be in [0, 0.5)".into()));
        }
        let special = [self.bias_token, self.neutral_token, self.core_a, self.core_b];
        for (i, a) in special.iter().enumerate() {
            if *a as usize >= self.vocab {
                return Err(Error::InvalidConfig("special token outside vocab".into()));
            }
            for b in &special[i + 1..] {
                if a == b {
                    return Err(Error::InvalidConfig("bias/neutral/core tokens must be distinct".into()));
                }
            }
        }
        if self.vocab <= 5 {
            return Err(Error::InvalidConfig("vocab too small for fillers".into()));
        }
        self.sizes.validate()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum DataConfig {
    Vecspur(VecSpurConfig),
    Tokspur(TokSpurConfig),
}

impl DataConfig {
    pub fn validate(&self) -> Result<()> {
        match self {
            DataConfig::Vecspur(c) => c.validate(),
            DataConfig::Tokspur(c) => c.validate(),
        }
    }

    pub fn sizes(&self) -> SplitSizes {
        match self {
            DataConfig::Vecspur(c) => c.sizes,
            DataConfig::Tokspur(c) => c.sizes,
        }
    }
}

/// All five splits of one generated dataset.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DatasetBundle {
    pub config: DataConfig,
    pub seed: u64,
    pub train: GroupedDataset,
    pub id_test: GroupedDataset,
    pub ood_test: GroupedDataset,
    pub transfer_test: GroupedDataset,
    pub heldout: GroupedDataset,
}

impl DatasetBundle {
    pub fn split(&self, split: Split) -> &GroupedDataset {
        match split {
            Split::Train => &self.train,
            Split::IdTest => &self.id_test,
            Split::OodTest => &self.ood_test,
            Split::TransferTest => &self.transfer_test,
            Split::Heldout => &self.heldout,
        }
    }

    pub fn is_token(&self) -> bool {
        matches!(self.config, DataConfig::Tokspur(_))
    }
}

/// Generate a dataset bundle from any config.
pub fn generate(cfg: &DataConfig, seed: u64) -> Result<DatasetBundle> {
    match cfg {
        DataConfig::Vecspur(c) => gen_vecspur(c, seed),
        DataConfig::Tokspur(c) => gen_tokspur(c, seed),
    }
}

fn draw_ys(rng: &mut Stream, rho: f64) -> (u8, u8) {
    let y: u8 = rng.gen_range(0..2);
    let aligned: f64 = rng.gen();
    let s = if aligned < rho { y } else { 1 - y };
    (y, s)
}

fn vec_sample(cfg: &VecSpurConfig, rng: &mut Stream, y: u8, s: u8, noise_sd: f64) -> Sample {
    let mut features = Vec::with_capacity(cfg.dim);
    let ysign = 2.0 * y as f64 - 1.0;
    let ssign = 2.0 * s as f64 - 1.0;
    features.push(ysign * cfg.core_margin + rng::normal(rng, 0.0, noise_sd));
    features.push(ssign * cfg.spur_margin + rng::normal(rng, 0.0, noise_sd));
    for _ in 2..cfg.dim {
        features.push(rng::normal(rng, 0.0, 1.0));
    }
    Sample { payload: Payload::Vec(features), y, s }
}

/// The five-split VecSpur bundle. The transfer split decorrelates the
/// spurious attribute (rho = 0.5) and perturbs the noise level by +25%; the
/// heldout split is group-balanced at generation.
pub fn gen_vecspur(cfg: &VecSpurConfig, seed: u64) -> Result<DatasetBundle> {
    cfg.validate()?;
    let make = |split: Split, n: usize, rho: f64, noise: f64, label: &str| -> GroupedDataset {
        let mut r = rng::substream(seed, label);
        let samples = (0..n)
            .map(|_| {
                let (y, s) = draw_ys(&mut r, rho);
                vec_sample(cfg, &mut r, y, s, noise)
            })
            .collect();
        GroupedDataset { split, samples }
    };
    let train = make(Split::Train, cfg.sizes.train, cfg.rho_train, cfg.noise_sd, "vecspur/train");
    let id_test = make(Split::IdTest, cfg.sizes.id_test, cfg.rho_train, cfg.noise_sd, "vecspur/id");
    let ood_test = make(Split::OodTest, cfg.sizes.ood_test, cfg.rho_ood, cfg.noise_sd, "vecspur/ood");
    let transfer_test = make(
        Split::TransferTest,
        cfg.sizes.transfer_test,
        0.5,
        cfg.noise_sd * 1.25,
        "vecspur/transfer",
    );
    // Heldout: equal group counts by construction.
    let mut r = rng::substream(seed, "vecspur/heldout");
    let per_group = (cfg.sizes.heldout / 4).max(1);
    let mut heldout_samples = Vec::with_capacity(per_group * 4);
    for g in 0..4u8 {
        let (y, s) = (g / 2, g % 2);
        for _ in 0..per_group {
            heldout_samples.push(vec_sample(cfg, &mut r, y, s, cfg.noise_sd));
        }
    }
    let heldout = GroupedDataset { split: Split::Heldout, samples: heldout_samples };
    Ok(DatasetBundle {
        config: DataConfig::Vecspur(cfg.clone()),
        seed,
        train,
        id_test,
        ood_test,
        transfer_test,
        heldout,
    })
}

fn tok_sample(cfg: &TokSpurConfig, rng: &mut Stream, y: u8, s: u8) -> Sample {
    let special = [cfg.bias_token, cfg.neutral_token, cfg.core_a, cfg.core_b];
    let mut seq: Vec<u32> = (0..cfg.seq_len)
        .map(|_| loop {
            let t = rng.gen_range(0..cfg.vocab as u32);
            if !special.contains(&t) {
                break t;
            }
        })
        .collect();
    // Three distinct positions: two for the core pair, one marker slot.
    let mut pos = rng::shuffled_indices(rng, cfg.seq_len);
    pos.truncate(3);
    let (mut p1, mut p2, pm) = (pos[0], pos[1], pos[2]);
    if p1 > p2 {
        std::mem::swap(&mut p1, &mut p2);
    }
    if y == 1 {
        seq[p1] = cfg.core_a;
        seq[p2] = cfg.core_b;
    } else {
        seq[p1] = cfg.core_b;
        seq[p2] = cfg.core_a;
    }
    seq[pm] = if s == 1 { cfg.bias_token } else { cfg.neutral_token };
    Sample { payload: Payload::Tok(seq), y, s }
}

/// The five-split TokSpur bundle, mirroring `gen_vecspur`.
pub fn gen_tokspur(cfg: &TokSpurConfig, seed: u64) -> Result<DatasetBundle> {
    cfg.validate()?;
    let make = |split: Split, n: usize, rho: f64, label: &str| -> GroupedDataset {
        let mut r = rng::substream(seed, label);
        let samples = (0..n)
            .map(|_| {
                let (y, s) = draw_ys(&mut r, rho);
                tok_sample(cfg, &mut r, y, s)
            })
            .collect();
        GroupedDataset { split, samples }
    };
    let train = make(Split::Train, cfg.sizes.train, cfg.rho_train, "tokspur/train");
    let id_test = make(Split::IdTest, cfg.sizes.id_test, cfg.rho_train, "tokspur/id");
    let ood_test = make(Split::OodTest, cfg.sizes.ood_test, cfg.rho_ood, "tokspur/ood");
    let transfer_test = make(Split::TransferTest, cfg.sizes.transfer_test, 0.5, "tokspur/transfer");
    let mut r = rng::substream(seed, "tokspur/heldout");
    let per_group = (cfg.sizes.heldout / 4).max(1);
    let mut heldout_samples = Vec::with_capacity(per_group * 4);
    for g in 0..4u8 {
        let (y, s) = (g / 2, g % 2);
        for _ in 0..per_group {
            heldout_samples.push(tok_sample(cfg, &mut r, y, s));
        }
    }
    let heldout = GroupedDataset { split: Split::Heldout, samples: heldout_samples };
    Ok(DatasetBundle {
        config: DataConfig::Tokspur(cfg.clone()),
        seed,
        train,
        id_test,
        ood_test,
        transfer_test,
        heldout,
    })
}

/// Subsample without replacement so every group count equals the minimum
/// input group count (the DA remedy's balanced training set).
pub fn group_balance(ds: &GroupedDataset, seed: u64) -> Result<GroupedDataset> {
    let counts = ds.group_counts();
    if counts.iter().any(|&c| c == 0) {
        return Err(Error::Empty("group_balance requires all four groups nonempty".into()));
    }
    let target = *counts.iter().min().unwrap();
    let mut keep: Vec<usize> = Vec::with_capacity(target * 4);
    for g in 0..4u8 {
        let idx: Vec<usize> =
            ds.samples.iter().enumerate().filter(|(_, s)| s.group() == g).map(|(i, _)| i).collect();
        let mut r = rng::substream(seed, &format!("group_balance/{g}"));
        let perm = rng::shuffled_indices(&mut r, idx.len());
        keep.extend(perm[..target].iter().map(|&j| idx[j]));
    }
    keep.sort_unstable();
    Ok(GroupedDataset { split: ds.split, samples: keep.into_iter().map(|i| ds.samples[i].clone()).collect() })
}

/// Spurious-flip counterpart used to build EAP input pairs: the spurious
/// coordinate is negated (vector data) or the bias token is swapped with the
/// neutral token (token data). Core content and label are unchanged, and the
/// map is an involution.
pub fn corrupt_counterpart(sample: &Sample, cfg: &DataConfig) -> Sample {
    let mut out = sample.clone();
    out.s = 1 - out.s;
    match (&mut out.payload, cfg) {
        (Payload::Vec(v), DataConfig::Vecspur(_)) => v[1] = -v[1],
        (Payload::Tok(t), DataConfig::Tokspur(c)) => {
            for tok in t.iter_mut() {
                if *tok == c.bias_token {
                    *tok = c.neutral_token;
                } else if *tok == c.neutral_token {
                    *tok = c.bias_token;
                }
            }
        }
        _ => unreachable!("payload/config family mismatch"),
    }
    out
}

/// Label an oracle classifier that reads only the core feature would assign.
pub fn oracle_label(sample: &Sample, cfg: &DataConfig) -> u8 {
    match (&sample.payload, cfg) {
        (Payload::Vec(v), DataConfig::Vecspur(_)) => u8::from(v[0] > 0.0),
        (Payload::Tok(t), DataConfig::Tokspur(c)) => {
            let pa = t.iter().position(|&x| x == c.core_a).expect("core_a present");
            let pb = t.iter().position(|&x| x == c.core_b).expect("core_b present");
            u8::from(pa < pb)
        }
        _ => unreachable!("payload/config family mismatch"),
    }
}

/// One-dimensional known-biased partial view of a sample (the spurious
/// coordinate, or a bias-token indicator), the input of the hypothesis-only
/// bias model.
pub fn spurious_view(sample: &Sample, cfg: &DataConfig) -> f64 {
    match (&sample.payload, cfg) {
        (Payload::Vec(v), DataConfig::Vecspur(_)) => v[1],
        (Payload::Tok(t), DataConfig::Tokspur(c)) => {
            if t.contains(&c.bias_token) {
                1.0
            } else {
                -1.0
            }
        }
        _ => unreachable!("payload/config family mismatch"),
    }
}

// ---------------------------------------------------------------------------
// Serialization: UTF-8 header line (config echo + seed), one record per line.
// ---------------------------------------------------------------------------

const FORMAT_TAG: &str = "kdlab-dataset v1";

pub fn write_bundle<W: Write>(bundle: &DatasetBundle, w: &mut W) -> Result<()> {
    let cfg_json = serde_json::to_string(&bundle.config).map_err(|e| Error::Format(e.to_string()))?;
    writeln!(w, "# {FORMAT_TAG} seed={} config={}", bundle.seed, cfg_json)?;
    for split in Split::ALL {
        for s in &bundle.split(split).samples {
            let payload = match &s.payload {
                Payload::Vec(v) => v.iter().map(|x| format!("{x}")).collect::<Vec<_>>().join(","),
                Payload::Tok(t) => t.iter().map(|x| x.to_string()).collect::<Vec<_>>().join(","),
            };
            writeln!(w, "{},{},{},{},{}", split.name(), s.y, s.s, s.group(), payload)?;
        }
    }
    Ok(())
}

pub fn read_bundle<R: BufRead>(r: &mut R) -> Result<DatasetBundle> {
    let mut header = String::new();
    r.read_line(&mut header)?;
    let header = header.trim_end();
    let prefix = format!("# {FORMAT_TAG} seed=");
    let rest = header
        .strip_prefix(&prefix)
        .ok_or_else(|| Error::Format("bad dataset header".into()))?;
    let (seed_str, cfg_part) =
        rest.split_once(" config=").ok_or_else(|| Error::Format("bad dataset header".into()))?;
    let seed: u64 = seed_str.parse().map_err(|_| Error::Format("bad seed in header".into()))?;
    let config: DataConfig =
        serde_json::from_str(cfg_part).map_err(|e| Error::Format(format!("bad config in header: {e}")))?;
    let is_tok = matches!(config, DataConfig::Tokspur(_));

    let mut splits: std::collections::HashMap<Split, Vec<Sample>> = Default::default();
    for line in r.lines() {
        let line = line?;
        if line.is_empty() {
            continue;
        }
        let mut parts = line.splitn(5, ',');
        let split = Split::from_name(parts.next().ok_or_else(|| Error::Format("short record".into()))?)?;
        let y: u8 = parse_field(parts.next())?;
        let s: u8 = parse_field(parts.next())?;
        let group: u8 = parse_field(parts.next())?;
        if group != 2 * y + s {
            return Err(Error::Format("group id inconsistent with (y, s)".into()));
        }
        let payload_str = parts.next().ok_or_else(|| Error::Format("missing payload".into()))?;
        let payload = if is_tok {
            Payload::Tok(
                payload_str
                    .split(',')
                    .map(|t| t.parse().map_err(|_| Error::Format("bad token id".into())))
                    .collect::<Result<_>>()?,
            )
        } else {
            Payload::Vec(
                payload_str
                    .split(',')
                    .map(|t| t.parse().map_err(|_| Error::Format("bad real".into())))
                    .collect::<Result<_>>()?,
            )
        };
        splits.entry(split).or_default().push(Sample { payload, y, s });
    }
    let mut take = |sp: Split| GroupedDataset { split: sp, samples: splits.remove(&sp).unwrap_or_default() };
    Ok(DatasetBundle {
        config,
        seed,
        train: take(Split::Train),
        id_test: take(Split::IdTest),
        ood_test: take(Split::OodTest),
        transfer_test: take(Split::TransferTest),
        heldout: take(Split::Heldout),
    })
}

fn parse_field<T: std::str::FromStr>(f: Option<&str>) -> Result<T> {
    f.ok_or_else(|| Error::Format("short record".into()))?
        .parse()
        .map_err(|_| Error::Format("bad numeric field".into()))
}
