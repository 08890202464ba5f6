//! On-disk dataset layout.
//!
//! ```text
//! <dir>/manifest.toml        the generating manifest
//! <dir>/vocabulary.txt       one part name per line, line = part id
//! <dir>/priors.toml          per-class part priors
//! <dir>/dataset.toml         format version, fingerprint, sample counts
//! <dir>/<split>/index.txt    "<file>\t<class>" per sample
//! <dir>/<split>/<file>.dccs  binary sample record
//! ```
//!
//! Sample records are little-endian: magic `DCCS`, u32 format version,
//! u32 point count N, u32 class id, u32 reserved (0), then N×3 f64
//! coordinates row by row, then N u32 part ids.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::{BenchmarkManifest, LabeledSample, GENERATOR_VERSION};
use crate::backbone::PointCloud;
use crate::error::{Error, Result};
use crate::partprior::{ObjectPartPrior, PartVocabulary, SegmentationMask};
use crate::tensor::Tensor;

pub const RECORD_MAGIC: &[u8; 4] = b"DCCS";
pub const RECORD_VERSION: u32 = 1;
pub const DATASET_FORMAT_VERSION: u32 = 1;
const HEADER_LEN: usize = 20;

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    Train,
    Val,
    Test,
}

impl Split {
    pub const ALL: [Split; 3] = [Split::Train, Split::Val, Split::Test];

    pub fn name(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Val => "val",
            Split::Test => "test",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(Split::Train),
            "val" => Ok(Split::Val),
            "test" => Ok(Split::Test),
            _ => Err(Error::Config(format!("unknown split `{s}`"))),
        }
    }

    fn tag(self) -> u64 {
        self as u64 + 1
    }
}

/// Written to `dataset.toml`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DatasetSummary {
    pub format_version: u32,
    pub generator_version: u32,
    pub seed: u64,
    pub points_per_cloud: usize,
    /// Hash of the vocabulary and prior files; checkpoints record it.
    pub fingerprint: String,
    /// Split name → class name → sample count.
    pub counts: BTreeMap<String, BTreeMap<String, usize>>,
}

fn splitmix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Seed of one sample, independent of generation order.
pub fn child_seed(seed: u64, split: Split, class: usize, index: usize) -> u64 {
    let mut h = splitmix(seed);
    for v in [split.tag(), class as u64, index as u64] {
        h = splitmix(h ^ v);
    }
    h
}

pub fn encode_record(sample: &LabeledSample) -> Vec<u8> {
    let n = sample.cloud.len();
    let mut out = Vec::with_capacity(HEADER_LEN + n * 28);
    out.extend_from_slice(RECORD_MAGIC);
    for v in [RECORD_VERSION, n as u32, sample.object as u32, 0] {
        out.extend_from_slice(&v.to_le_bytes());
    }
    for v in sample.cloud.points.data() {
        out.extend_from_slice(&v.to_le_bytes());
    }
    for &p in sample.mask.ids() {
        out.extend_from_slice(&(p as u32).to_le_bytes());
    }
    out
}

pub fn decode_record(bytes: &[u8], sample_id: &str, path: &Path) -> Result<LabeledSample> {
    let bad = |m: &str| Error::format(path, m);
    if bytes.len() < HEADER_LEN || &bytes[..4] != RECORD_MAGIC {
        return Err(bad("not a sample record"));
    }
    let word = |i: usize| u32::from_le_bytes(bytes[4 + 4 * i..8 + 4 * i].try_into().unwrap());
    if word(0) != RECORD_VERSION {
        return Err(bad(&format!("record version {}", word(0))));
    }
    let n = word(1) as usize;
    let object = word(2) as usize;
    if bytes.len() != HEADER_LEN + n * 28 {
        return Err(bad("record length does not match its header"));
    }
    let body = &bytes[HEADER_LEN..];
    let coords: Vec<f64> = body[..n * 24]
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
        .collect();
    let ids: Vec<usize> = body[n * 24..]
        .chunks_exact(4)
        .map(|c| u32::from_le_bytes(c.try_into().unwrap()) as usize)
        .collect();
    Ok(LabeledSample {
        cloud: PointCloud::new(Tensor::new(vec![n, 3], coords)?, sample_id)?,
        mask: SegmentationMask(ids),
        object,
    })
}

fn write(path: &Path, bytes: &[u8]) -> Result<()> {
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

fn read_text(path: &Path) -> Result<String> {
    fs::read_to_string(path).map_err(|e| Error::io(path, e))
}

fn fingerprint(vocab: &str, priors: &str) -> String {
    let mut h = Sha256::new();
    h.update(vocab.as_bytes());
    h.update([0u8]);
    h.update(priors.as_bytes());
    h.finalize().iter().map(|b| format!("{b:02x}")).collect()
}

/// Generates every split of `manifest` into `out`. Samples are produced in
/// parallel from per-sample seeds, so the bytes do not depend on scheduling.
pub fn generate_benchmark(manifest: &BenchmarkManifest, out: &Path) -> Result<DatasetSummary> {
    let bench = manifest.resolve()?;
    fs::create_dir_all(out).map_err(|e| Error::io(out, e))?;
    let vocab_text = bench.vocab.to_text();
    let prior_text = bench.prior.to_toml(&bench.vocab);
    write(&out.join("manifest.toml"), manifest.to_toml().as_bytes())?;
    write(&out.join("vocabulary.txt"), vocab_text.as_bytes())?;
    write(&out.join("priors.toml"), prior_text.as_bytes())?;

    let mut counts = BTreeMap::new();
    for split in Split::ALL {
        let (per_class, classes) = match split {
            Split::Train => (manifest.splits.train, bench.prior.seen_ids()),
            Split::Val => (manifest.splits.val, bench.prior.all_ids()),
            Split::Test => (manifest.splits.test, bench.prior.all_ids()),
        };
        let dir = out.join(split.name());
        fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
        let jobs: Vec<(usize, usize)> = classes
            .iter()
            .flat_map(|&c| (0..per_class).map(move |k| (c, k)))
            .collect();
        let records: Vec<(String, Vec<u8>)> = jobs
            .par_iter()
            .map(|&(c, k)| {
                let name = &bench.prior.class(c)?.name;
                let file = format!("{name}_{k:05}.dccs");
                let id = format!("{}/{name}_{k:05}", split.name());
                let mut rng = ChaCha8Rng::seed_from_u64(child_seed(manifest.seed, split, c, k));
                let sample = bench.compose(c, &id, &mut rng)?;
                Ok((file, encode_record(&sample)))
            })
            .collect::<Result<_>>()?;
        let mut index = String::new();
        for ((file, bytes), &(c, _)) in records.iter().zip(&jobs) {
            write(&dir.join(file), bytes)?;
            index.push_str(&format!("{file}\t{}\n", bench.prior.class(c)?.name));
        }
        write(&dir.join("index.txt"), index.as_bytes())?;
        let per: BTreeMap<String, usize> = classes
            .iter()
            .map(|&c| (bench.prior.class(c).unwrap().name.clone(), per_class))
            .collect();
        counts.insert(split.name().to_string(), per);
    }
    let summary = DatasetSummary {
        format_version: DATASET_FORMAT_VERSION,
        generator_version: GENERATOR_VERSION,
        seed: manifest.seed,
        points_per_cloud: manifest.points_per_cloud,
        fingerprint: fingerprint(&vocab_text, &prior_text),
        counts,
    };
    write(
        &out.join("dataset.toml"),
        toml::to_string(&summary).expect("summary serializes").as_bytes(),
    )?;
    Ok(summary)
}

/// A generated dataset opened for reading. Splits load on demand and are
/// checked against the priors as they load.
#[derive(Clone, Debug)]
pub struct Dataset {
    pub root: PathBuf,
    pub vocab: PartVocabulary,
    pub prior: ObjectPartPrior,
    pub summary: DatasetSummary,
}

impl Dataset {
    pub fn open(root: &Path) -> Result<Self> {
        let vocab_text = read_text(&root.join("vocabulary.txt"))?;
        let prior_text = read_text(&root.join("priors.toml"))?;
        let summary_path = root.join("dataset.toml");
        let summary: DatasetSummary = toml::from_str(&read_text(&summary_path)?)
            .map_err(|e| Error::format(&summary_path, e.to_string()))?;
        if summary.format_version != DATASET_FORMAT_VERSION {
            return Err(Error::format(
                &summary_path,
                format!("dataset format version {}", summary.format_version),
            ));
        }
        if summary.fingerprint != fingerprint(&vocab_text, &prior_text) {
            return Err(Error::format(&summary_path, "fingerprint does not match vocabulary and priors"));
        }
        let vocab = PartVocabulary::from_text(&vocab_text)?;
        // The compositionality gate runs again here.
        let prior = ObjectPartPrior::from_toml(&prior_text, &vocab)?;
        Ok(Self {
            root: root.to_path_buf(),
            vocab,
            prior,
            summary,
        })
    }

    pub fn fingerprint(&self) -> &str {
        &self.summary.fingerprint
    }

    pub fn load_split(&self, split: Split) -> Result<Vec<LabeledSample>> {
        let dir = self.root.join(split.name());
        let index_path = dir.join("index.txt");
        let index = read_text(&index_path)?;
        let mut out = Vec::new();
        for line in index.lines().filter(|l| !l.is_empty()) {
            let (file, class) = line
                .split_once('\t')
                .ok_or_else(|| Error::format(&index_path, format!("bad line `{line}`")))?;
            let path = dir.join(file);
            let bytes = fs::read(&path).map_err(|e| Error::io(&path, e))?;
            let id = format!("{}/{}", split.name(), file.trim_end_matches(".dccs"));
            let sample = decode_record(&bytes, &id, &path)?;
            let expected = self.prior.class_id(class)?;
            if sample.object != expected {
                return Err(Error::format(&path, format!("class id {} but index says `{class}`", sample.object)));
            }
            if split == Split::Train && !self.prior.is_seen(expected)? {
                return Err(Error::format(&path, "unseen class in the train split"));
            }
            if sample.mask.len() != sample.cloud.len() {
                return Err(Error::format(&path, "mask and cloud lengths differ"));
            }
            let prior = self.prior.parts(expected)?;
            if let Some(&bad) = sample.mask.ids().iter().find(|p| !prior.contains(p)) {
                return Err(Error::DatasetIntegrity {
                    sample: id,
                    part: bad,
                });
            }
            out.push(sample);
        }
        Ok(out)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synthgen::default_manifest;

    fn small() -> BenchmarkManifest {
        let mut m = default_manifest();
        m.splits = super::super::SplitSizes { train: 2, val: 1, test: 1 };
        m.points_per_cloud = 160;
        m
    }

    fn tree(dir: &Path) -> BTreeMap<String, Vec<u8>> {
        let mut out = BTreeMap::new();
        let mut stack = vec![dir.to_path_buf()];
        while let Some(d) = stack.pop() {
            for e in fs::read_dir(&d).unwrap() {
                let p = e.unwrap().path();
                if p.is_dir() {
                    stack.push(p);
                } else {
                    out.insert(p.strip_prefix(dir).unwrap().display().to_string(), fs::read(&p).unwrap());
                }
            }
        }
        out
    }

    #[test]
    fn same_seed_same_bytes() {
        let a = tempfile::tempdir().unwrap();
        let b = tempfile::tempdir().unwrap();
        generate_benchmark(&small(), a.path()).unwrap();
        generate_benchmark(&small(), b.path()).unwrap();
        assert_eq!(tree(a.path()), tree(b.path()));
    }

    #[test]
    fn counts_match_manifest() {
        let d = tempfile::tempdir().unwrap();
        let m = small();
        generate_benchmark(&m, d.path()).unwrap();
        let ds = Dataset::open(d.path()).unwrap();
        let train = ds.load_split(Split::Train).unwrap();
        let test = ds.load_split(Split::Test).unwrap();
        assert_eq!(train.len(), 8 * m.splits.train);
        assert_eq!(test.len(), 12 * m.splits.test);
        let mut per = BTreeMap::new();
        for s in &train {
            *per.entry(s.object).or_insert(0) += 1;
        }
        assert!(per.keys().all(|&c| ds.prior.is_seen(c).unwrap()));
        assert!(per.values().all(|&n| n == m.splits.train));
    }

    #[test]
    fn record_round_trip_and_corruption() {
        let d = tempfile::tempdir().unwrap();
        generate_benchmark(&small(), d.path()).unwrap();
        let ds = Dataset::open(d.path()).unwrap();
        let s = &ds.load_split(Split::Val).unwrap()[0];
        let bytes = encode_record(s);
        let back = decode_record(&bytes, &s.cloud.sample_id, Path::new("x")).unwrap();
        assert_eq!(&back, s);
        assert!(decode_record(&bytes[..bytes.len() - 1], "x", Path::new("x")).is_err());
        let mut wrong = bytes.clone();
        wrong[0] = b'X';
        assert!(decode_record(&wrong, "x", Path::new("x")).is_err());
    }

    #[test]
    fn prior_violation_detected_on_load() {
        let d = tempfile::tempdir().unwrap();
        generate_benchmark(&small(), d.path()).unwrap();
        let ds = Dataset::open(d.path()).unwrap();
        let index = fs::read_to_string(d.path().join("train/index.txt")).unwrap();
        let file = index.lines().next().unwrap().split('\t').next().unwrap();
        let path = d.path().join("train").join(file);
        let mut bytes = fs::read(&path).unwrap();
        let last = bytes.len() - 4;
        // Part 13 (handle) is outside the chair prior.
        bytes[last..].copy_from_slice(&13u32.to_le_bytes());
        fs::write(&path, bytes).unwrap();
        assert!(matches!(ds.load_split(Split::Train), Err(Error::DatasetIntegrity { .. })));
    }

    #[test]
    fn child_seeds_differ() {
        let a = child_seed(1, Split::Train, 0, 0);
        assert_ne!(a, child_seed(1, Split::Train, 0, 1));
        assert_ne!(a, child_seed(1, Split::Val, 0, 0));
        assert_ne!(a, child_seed(2, Split::Train, 0, 0));
        assert_ne!(a, child_seed(1, Split::Train, 1, 0));
    }
}
