//! Dataset scanning, pairing and batching.
//!
//! Supported directory layouts:
//!
//! | layout           | train                              | test                              |
//! |------------------|------------------------------------|-----------------------------------|
//! | `lolv1`          | `our485/{low,high}`                | `eval15/{low,high}`               |
//! | `lolv2_real`     | `Real_captured/Train/{Low,Normal}` | `Real_captured/Test/{Low,Normal}` |
//! | `lolv2_syn`      | `Synthetic/Train/{Low,Normal}`     | `Synthetic/Test/{Low,Normal}`     |
//! | `lolv2_combined` | both LOL-v2 subsets                | both LOL-v2 subsets               |
//! | `lol_all`        | LOL-v1 plus both LOL-v2 subsets    | same                              |
//! | `generic_paired` | `low/` + `high/` (or `train/{low,high}`) | `test/{low,high}`           |
//! | `unpaired`       | none                               | every image under the root        |
//!
//! Directory names are matched case-insensitively, and `normal`/`gt` are
//! accepted for the reference side. Pairs are matched by file stem after
//! stripping a leading `low`/`normal`/`high`/`gt` token, so LOL-v2-real's
//! `low00001.png` pairs with `normal00001.png`.

use std::collections::BTreeMap;
use std::fmt;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::image::{load_image_with, resize_bilinear, BatchTensor, ImageTensor, LoadOptions};

pub const DEFAULT_SIZE: (usize, usize) = (128, 128);
const IMAGE_EXTENSIONS: [&str; 3] = ["png", "jpg", "jpeg"];

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Layout {
    /// Pick a layout from the directory structure.
    #[default]
    Auto,
    Lolv1,
    Lolv2Real,
    Lolv2Syn,
    Lolv2Combined,
    LolAll,
    Unpaired,
    GenericPaired,
}

impl Layout {
    pub const ALL: [Layout; 8] = [
        Layout::Auto,
        Layout::Lolv1,
        Layout::Lolv2Real,
        Layout::Lolv2Syn,
        Layout::Lolv2Combined,
        Layout::LolAll,
        Layout::Unpaired,
        Layout::GenericPaired,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Layout::Auto => "auto",
            Layout::Lolv1 => "lolv1",
            Layout::Lolv2Real => "lolv2_real",
            Layout::Lolv2Syn => "lolv2_syn",
            Layout::Lolv2Combined => "lolv2_combined",
            Layout::LolAll => "lol_all",
            Layout::Unpaired => "unpaired",
            Layout::GenericPaired => "generic_paired",
        }
    }

    /// Published `(train, test)` pair counts for the known corpora.
    pub fn expected_counts(self) -> Option<(usize, usize)> {
        match self {
            Layout::Lolv1 => Some((485, 15)),
            Layout::Lolv2Real => Some((689, 100)),
            Layout::Lolv2Syn => Some((900, 100)),
            Layout::Lolv2Combined => Some((689 + 900, 200)),
            Layout::LolAll => Some((485 + 689 + 900, 215)),
            _ => None,
        }
    }

    pub fn is_paired(self) -> bool {
        self != Layout::Unpaired
    }
}

impl fmt::Display for Layout {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Layout {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Layout::ALL
            .into_iter()
            .find(|l| l.name() == s)
            .ok_or_else(|| {
                let names: Vec<_> = Layout::ALL.iter().map(|l| l.name()).collect();
                Error::config("data.layout", format!("unknown layout `{s}` (expected one of {})", names.join(", ")))
            })
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    Train,
    Test,
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Split::Train => "train",
            Split::Test => "test",
        })
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub id: String,
    pub low: PathBuf,
    pub reference: Option<PathBuf>,
    /// Corpus tag such as `lolv1` or `lolv2_syn`.
    pub source: String,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub split: Split,
    pub entries: Vec<ManifestEntry>,
}

impl DatasetManifest {
    pub fn new(split: Split, entries: Vec<ManifestEntry>) -> Self {
        DatasetManifest { split, entries }
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn is_paired(&self) -> bool {
        self.entries.iter().all(|e| e.reference.is_some())
    }

    /// Keep only the first `n` entries.
    pub fn truncate(&mut self, n: usize) {
        self.entries.truncate(n);
    }

    /// Append one JSON object per entry.
    pub fn write_jsonl(&self, mut out: impl Write) -> std::io::Result<()> {
        #[derive(Serialize)]
        struct Line<'a> {
            split: Split,
            #[serde(flatten)]
            entry: &'a ManifestEntry,
        }
        for entry in &self.entries {
            serde_json::to_writer(&mut out, &Line { split: self.split, entry })?;
            out.write_all(b"\n")?;
        }
        Ok(())
    }
}

/// Train and test manifests of one dataset root.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Dataset {
    pub root: PathBuf,
    /// The concrete layout, never [`Layout::Auto`].
    pub layout: Layout,
    pub train: DatasetManifest,
    pub test: DatasetManifest,
    /// Non-fatal findings, e.g. counts that differ from the published ones.
    pub warnings: Vec<String>,
}

impl Dataset {
    pub fn split(&self, split: Split) -> &DatasetManifest {
        match split {
            Split::Train => &self.train,
            Split::Test => &self.test,
        }
    }

    pub fn write_jsonl(&self, mut out: impl Write) -> std::io::Result<()> {
        self.train.write_jsonl(&mut out)?;
        self.test.write_jsonl(&mut out)
    }
}

fn is_image(path: &Path) -> bool {
    path.extension()
        .and_then(|e| e.to_str())
        .is_some_and(|e| IMAGE_EXTENSIONS.contains(&e.to_ascii_lowercase().as_str()))
}

fn read_dir_sorted(dir: &Path) -> Result<Vec<PathBuf>> {
    let mut out = Vec::new();
    for entry in std::fs::read_dir(dir).map_err(|e| Error::io(dir, e))? {
        out.push(entry.map_err(|e| Error::io(dir, e))?.path());
    }
    out.sort();
    Ok(out)
}

/// Child directory whose name matches one of `names`, ignoring case.
fn child_dir(parent: &Path, names: &[&str]) -> Option<PathBuf> {
    let entries = read_dir_sorted(parent).ok()?;
    entries.into_iter().find(|p| {
        p.is_dir()
            && p.file_name()
                .and_then(|n| n.to_str())
                .is_some_and(|n| names.iter().any(|want| n.eq_ignore_ascii_case(want)))
    })
}

fn images_in(dir: &Path) -> Result<Vec<PathBuf>> {
    Ok(read_dir_sorted(dir)?
        .into_iter()
        .filter(|p| p.is_file() && is_image(p))
        .collect())
}

/// Stem used for pairing: lowercase, with a leading role token removed.
pub fn pairing_key(path: &Path) -> String {
    let stem = path
        .file_stem()
        .and_then(|s| s.to_str())
        .unwrap_or_default()
        .to_ascii_lowercase();
    for prefix in ["normal", "high", "low", "gt"] {
        if let Some(rest) = stem.strip_prefix(prefix) {
            let rest = rest.trim_start_matches(['_', '-']);
            if !rest.is_empty() {
                return rest.to_string();
            }
        }
    }
    stem
}

const LOW_NAMES: [&str; 2] = ["low", "input"];
const REF_NAMES: [&str; 4] = ["high", "normal", "gt", "target"];

fn scan_pair_dirs(dir: &Path, source: &str, id_prefix: &str) -> Result<Vec<ManifestEntry>> {
    let low_dir = child_dir(dir, &LOW_NAMES)
        .ok_or_else(|| Error::Layout(format!("{} has no `low` directory", dir.display())))?;
    let ref_dir = child_dir(dir, &REF_NAMES)
        .ok_or_else(|| Error::Layout(format!("{} has no `high`/`normal` directory", dir.display())))?;
    let lows = images_in(&low_dir)?;
    let refs = images_in(&ref_dir)?;
    let mut by_key: BTreeMap<String, PathBuf> = BTreeMap::new();
    for r in refs {
        let key = pairing_key(&r);
        if let Some(prev) = by_key.insert(key.clone(), r.clone()) {
            return Err(Error::Pairing(format!(
                "{} and {} share the stem `{key}`",
                prev.display(),
                r.display()
            )));
        }
    }
    let mut entries = Vec::with_capacity(lows.len());
    for low in lows {
        let key = pairing_key(&low);
        let reference = by_key.remove(&key).ok_or_else(|| {
            Error::Pairing(format!("{} has no counterpart in {}", low.display(), ref_dir.display()))
        })?;
        entries.push(ManifestEntry {
            id: format!("{id_prefix}{key}"),
            low,
            reference: Some(reference),
            source: source.to_string(),
        });
    }
    if let Some((key, path)) = by_key.into_iter().next() {
        return Err(Error::Pairing(format!(
            "{} (stem `{key}`) has no counterpart in {}",
            path.display(),
            low_dir.display()
        )));
    }
    entries.sort_by(|a, b| a.id.cmp(&b.id));
    Ok(entries)
}

fn lolv1_root(root: &Path) -> Option<PathBuf> {
    if child_dir(root, &["our485"]).is_some() {
        return Some(root.to_path_buf());
    }
    read_dir_sorted(root)
        .ok()?
        .into_iter()
        .find(|p| p.is_dir() && child_dir(p, &["our485"]).is_some())
}

fn scan_lolv1(root: &Path) -> Result<(Vec<ManifestEntry>, Vec<ManifestEntry>)> {
    let base = lolv1_root(root)
        .ok_or_else(|| Error::Layout(format!("{} has no `our485` directory", root.display())))?;
    let train_dir = child_dir(&base, &["our485"]).unwrap();
    let test_dir = child_dir(&base, &["eval15"])
        .ok_or_else(|| Error::Layout(format!("{} has no `eval15` directory", base.display())))?;
    Ok((
        scan_pair_dirs(&train_dir, "lolv1", "lolv1/")?,
        scan_pair_dirs(&test_dir, "lolv1", "lolv1/")?,
    ))
}

/// Directory holding `Train`/`Test` for a LOL-v2 subset: either `root`
/// itself, `root/<subset>`, or `root/<child>/<subset>`.
fn lolv2_subset_root(root: &Path, subset: &str) -> Option<PathBuf> {
    if let Some(d) = child_dir(root, &[subset]) {
        return Some(d);
    }
    let name_matches = root
        .file_name()
        .and_then(|n| n.to_str())
        .is_some_and(|n| n.eq_ignore_ascii_case(subset));
    if name_matches && child_dir(root, &["train"]).is_some() {
        return Some(root.to_path_buf());
    }
    read_dir_sorted(root)
        .ok()?
        .into_iter()
        .filter(|p| p.is_dir())
        .find_map(|p| child_dir(&p, &[subset]))
}

fn scan_lolv2(root: &Path, subset: &str, source: &str) -> Result<(Vec<ManifestEntry>, Vec<ManifestEntry>)> {
    let base = lolv2_subset_root(root, subset)
        .ok_or_else(|| Error::Layout(format!("{} has no `{subset}` directory", root.display())))?;
    let split = |names: &[&str]| -> Result<Vec<ManifestEntry>> {
        let dir = child_dir(&base, names).ok_or_else(|| {
            Error::Layout(format!("{} has no `{}` directory", base.display(), names[0]))
        })?;
        scan_pair_dirs(&dir, source, &format!("{source}/"))
    };
    Ok((split(&["Train"])?, split(&["Test"])?))
}

fn scan_generic(root: &Path) -> Result<(Vec<ManifestEntry>, Vec<ManifestEntry>)> {
    let train_dir = child_dir(root, &["train"]);
    let test_dir = child_dir(root, &["test"]);
    if train_dir.is_none() && test_dir.is_none() {
        return Ok((scan_pair_dirs(root, "generic", "")?, Vec::new()));
    }
    let scan = |d: Option<PathBuf>| d.map(|d| scan_pair_dirs(&d, "generic", "")).transpose();
    Ok((scan(train_dir)?.unwrap_or_default(), scan(test_dir)?.unwrap_or_default()))
}

fn scan_unpaired(root: &Path) -> Result<Vec<ManifestEntry>> {
    fn walk(dir: &Path, root: &Path, out: &mut Vec<ManifestEntry>) -> Result<()> {
        for p in read_dir_sorted(dir)? {
            if p.is_dir() {
                walk(&p, root, out)?;
            } else if is_image(&p) {
                let rel = p.strip_prefix(root).unwrap_or(&p).with_extension("");
                let id = rel.to_string_lossy().replace('\\', "/");
                let source = match rel.components().count() {
                    1 => "unpaired".to_string(),
                    _ => rel.components().next().unwrap().as_os_str().to_string_lossy().into_owned(),
                };
                out.push(ManifestEntry {
                    id,
                    low: p,
                    reference: None,
                    source,
                });
            }
        }
        Ok(())
    }
    let mut out = Vec::new();
    walk(root, root, &mut out)?;
    Ok(out)
}

/// Guess the layout of `root`.
pub fn detect_layout(root: &Path) -> Layout {
    let v1 = lolv1_root(root).is_some();
    let real = lolv2_subset_root(root, "Real_captured").is_some();
    let syn = lolv2_subset_root(root, "Synthetic").is_some();
    match (v1, real, syn) {
        (true, true, true) => Layout::LolAll,
        (true, _, _) => Layout::Lolv1,
        (false, true, true) => Layout::Lolv2Combined,
        (false, true, false) => Layout::Lolv2Real,
        (false, false, true) => Layout::Lolv2Syn,
        _ => {
            let has_pairs = child_dir(root, &LOW_NAMES).is_some()
                || child_dir(root, &["train"]).is_some_and(|d| child_dir(&d, &LOW_NAMES).is_some())
                || child_dir(root, &["test"]).is_some_and(|d| child_dir(&d, &LOW_NAMES).is_some());
            if has_pairs {
                Layout::GenericPaired
            } else {
                Layout::Unpaired
            }
        }
    }
}

/// Build the train/test manifests of `root`, sorted by id.
pub fn scan_dataset(root: impl AsRef<Path>, layout: Layout) -> Result<Dataset> {
    let root = root.as_ref();
    if !root.is_dir() {
        return Err(Error::Layout(format!("{} is not a directory", root.display())));
    }
    let layout = match layout {
        Layout::Auto => detect_layout(root),
        l => l,
    };
    let (train, test) = match layout {
        Layout::Auto => unreachable!(),
        Layout::Lolv1 => scan_lolv1(root)?,
        Layout::Lolv2Real => scan_lolv2(root, "Real_captured", "lolv2_real")?,
        Layout::Lolv2Syn => scan_lolv2(root, "Synthetic", "lolv2_syn")?,
        Layout::Lolv2Combined | Layout::LolAll => {
            let (mut train, mut test) = scan_lolv2(root, "Real_captured", "lolv2_real")?;
            let (tr, te) = scan_lolv2(root, "Synthetic", "lolv2_syn")?;
            train.extend(tr);
            test.extend(te);
            if layout == Layout::LolAll {
                let (tr, te) = scan_lolv1(root)?;
                train.extend(tr);
                test.extend(te);
            }
            (train, test)
        }
        Layout::GenericPaired => scan_generic(root)?,
        Layout::Unpaired => (Vec::new(), scan_unpaired(root)?),
    };
    if train.is_empty() && test.is_empty() {
        return Err(Error::Layout(format!("no images found under {}", root.display())));
    }
    let mut train = DatasetManifest::new(Split::Train, train);
    let mut test = DatasetManifest::new(Split::Test, test);
    train.entries.sort_by(|a, b| a.id.cmp(&b.id));
    test.entries.sort_by(|a, b| a.id.cmp(&b.id));

    let mut warnings = Vec::new();
    if let Some((tr, te)) = layout.expected_counts() {
        if (train.len(), test.len()) != (tr, te) {
            let msg = format!(
                "{layout} at {}: found {}/{} train/test pairs, expected {tr}/{te}",
                root.display(),
                train.len(),
                test.len()
            );
            log::warn!("{msg}");
            warnings.push(msg);
        }
    }
    Ok(Dataset {
        root: root.to_path_buf(),
        layout,
        train,
        test,
        warnings,
    })
}

/// A loaded image with its optional reference.
#[derive(Clone, Debug, PartialEq)]
pub struct Sample {
    pub id: String,
    pub source: String,
    pub low: ImageTensor,
    pub reference: Option<ImageTensor>,
}

/// Load an entry, resizing both sides to `size` when given.
pub fn load_pair(entry: &ManifestEntry, size: Option<(usize, usize)>, opts: LoadOptions) -> Result<Sample> {
    let load = |p: &Path| -> Result<ImageTensor> {
        let img = load_image_with(p, opts)?;
        match size {
            Some((h, w)) if (img.height(), img.width()) != (h, w) => resize_bilinear(&img, h, w),
            _ => Ok(img),
        }
    };
    let low = load(&entry.low)?;
    let reference = entry.reference.as_deref().map(load).transpose()?;
    if let Some(r) = &reference {
        if (r.height(), r.width()) != (low.height(), low.width()) {
            return Err(Error::Shape(format!(
                "{}: input is {}x{} but reference is {}x{}",
                entry.id,
                low.height(),
                low.width(),
                r.height(),
                r.width()
            )));
        }
    }
    Ok(Sample {
        id: entry.id.clone(),
        source: entry.source.clone(),
        low,
        reference,
    })
}

/// Index batches over `len` items: a seeded permutation when `shuffle_seed`
/// is given, otherwise the stored order. The last batch may be short.
pub fn make_batches(len: usize, batch_size: usize, shuffle_seed: Option<u64>) -> Result<Vec<Vec<usize>>> {
    if batch_size == 0 {
        return Err(Error::config("trainer.batch_size", "must be at least 1"));
    }
    let mut order: Vec<usize> = (0..len).collect();
    if let Some(seed) = shuffle_seed {
        order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    }
    Ok(order.chunks(batch_size).map(<[usize]>::to_vec).collect())
}

/// A batch of paired samples.
#[derive(Clone, Debug)]
pub struct PairBatch {
    pub ids: Vec<String>,
    pub low: BatchTensor,
    pub reference: BatchTensor,
}

/// Stack the given samples, which must all have references.
pub fn collate(samples: &[&Sample]) -> Result<PairBatch> {
    let mut lows = Vec::with_capacity(samples.len());
    let mut refs = Vec::with_capacity(samples.len());
    for s in samples {
        lows.push(s.low.clone());
        refs.push(
            s.reference
                .clone()
                .ok_or_else(|| Error::MissingReference(format!("{} has no reference image", s.id)))?,
        );
    }
    Ok(PairBatch {
        ids: samples.iter().map(|s| s.id.clone()).collect(),
        low: BatchTensor::from_images(&lows)?,
        reference: BatchTensor::from_images(&refs)?,
    })
}

/// Mirror left-right.
pub fn hflip(img: &ImageTensor) -> ImageTensor {
    let (h, w) = (img.height(), img.width());
    ImageTensor::from_fn(h, w, |c, y, x| img.get(c, y, w - 1 - x)).expect("same range")
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn pairing_keys() {
        assert_eq!(pairing_key(Path::new("a/low00001.png")), "00001");
        assert_eq!(pairing_key(Path::new("a/normal00001.png")), "00001");
        assert_eq!(pairing_key(Path::new("a/r000123.png")), "r000123");
        assert_eq!(pairing_key(Path::new("a/22.png")), "22");
        assert_eq!(pairing_key(Path::new("a/low.png")), "low");
    }

    #[test]
    fn batches() {
        let b = make_batches(15, 4, None).unwrap();
        assert_eq!(b.iter().map(Vec::len).collect::<Vec<_>>(), [4, 4, 4, 3]);
        assert_eq!(b.concat(), (0..15).collect::<Vec<_>>());
        let s1 = make_batches(15, 4, Some(3)).unwrap().concat();
        let s2 = make_batches(15, 4, Some(3)).unwrap().concat();
        assert_eq!(s1, s2);
        let mut sorted = s1.clone();
        sorted.sort();
        assert_eq!(sorted, (0..15).collect::<Vec<_>>());
        assert!(make_batches(3, 0, None).is_err());
    }

    #[test]
    fn layout_names_round_trip() {
        for l in Layout::ALL {
            assert_eq!(l.name().parse::<Layout>().unwrap(), l);
        }
        assert!("lol".parse::<Layout>().is_err());
    }
}
