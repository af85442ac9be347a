//! Synthetic hierarchical MIL datasets and the on-disk bag format.
//!
//! Bag file layout (all integers little-endian):
//!
//! | offset | size | field                 |
//! |--------|------|-----------------------|
//! | 0      | 4    | magic `HMIL`          |
//! | 4      | 4    | version (u32, = 1)    |
//! | 8      | 4    | patch count N_p (u32) |
//! | 12     | 4    | feature dim D (u32)   |
//! | 16     | 4    | coarse label (u32)    |
//! | 20     | 4    | fine label (u32)      |
//! | 24     | 8    | reserved, zero        |
//! | 32     | 4·N_p·D | row-major f32 features |
//!
//! The slide id is not stored; it is the file stem.

use std::fs;
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::exec::Exec;
use crate::taxonomy::Taxonomy;

pub const BAG_MAGIC: [u8; 4] = *b"HMIL";
pub const BAG_VERSION: u32 = 1;
pub const BAG_HEADER_LEN: usize = 32;
pub const BAG_EXTENSION: &str = "hmil";
pub const MANIFEST_FILE: &str = "manifest.json";
pub const TAXONOMY_FILE: &str = "taxonomy.json";

#[derive(Debug, Clone, PartialEq)]
pub struct Bag {
    pub slide_id: String,
    n_patches: usize,
    dim: usize,
    features: Vec<f32>,
    pub coarse_label: usize,
    pub fine_label: usize,
}

impl Bag {
    pub fn new(
        slide_id: impl Into<String>,
        n_patches: usize,
        dim: usize,
        features: Vec<f32>,
        coarse_label: usize,
        fine_label: usize,
    ) -> Result<Self> {
        if n_patches == 0 {
            return Err(Error::InvalidBag("bag has no patches".into()));
        }
        if dim == 0 {
            return Err(Error::InvalidBag("feature dimension is zero".into()));
        }
        if features.len() != n_patches * dim {
            return Err(Error::DimensionMismatch {
                context: "bag features",
                expected: n_patches * dim,
                got: features.len(),
            });
        }
        if !features.iter().all(|x| x.is_finite()) {
            return Err(Error::NonFinite("bag features".into()));
        }
        if u32::try_from(n_patches).is_err()
            || u32::try_from(dim).is_err()
            || u32::try_from(coarse_label).is_err()
            || u32::try_from(fine_label).is_err()
        {
            return Err(Error::InvalidBag("header field exceeds u32".into()));
        }
        Ok(Self {
            slide_id: slide_id.into(),
            n_patches,
            dim,
            features,
            coarse_label,
            fine_label,
        })
    }

    pub fn n_patches(&self) -> usize {
        self.n_patches
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn features(&self) -> &[f32] {
        &self.features
    }

    pub fn patch(&self, k: usize) -> &[f32] {
        &self.features[k * self.dim..(k + 1) * self.dim]
    }

    pub fn check_labels(&self, taxonomy: &Taxonomy) -> Result<()> {
        if !taxonomy.is_consistent(self.coarse_label, self.fine_label) {
            return Err(Error::InvalidBag(format!(
                "slide `{}`: labels (coarse {}, fine {}) disagree with the taxonomy",
                self.slide_id, self.coarse_label, self.fine_label
            )));
        }
        Ok(())
    }

    /// Same bag with its patch rows reordered by `order`.
    pub fn permuted(&self, order: &[usize]) -> Result<Self> {
        let mut seen = vec![false; self.n_patches];
        if order.len() != self.n_patches
            || order.iter().any(|&k| k >= self.n_patches || std::mem::replace(&mut seen[k], true))
        {
            return Err(Error::InvalidBag("patch order is not a permutation".into()));
        }
        let features = order.iter().flat_map(|&k| self.patch(k).iter().copied()).collect();
        Ok(Self {
            features,
            ..self.clone()
        })
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(BAG_HEADER_LEN + 4 * self.features.len());
        out.extend_from_slice(&BAG_MAGIC);
        for field in [
            BAG_VERSION,
            self.n_patches as u32,
            self.dim as u32,
            self.coarse_label as u32,
            self.fine_label as u32,
        ] {
            out.extend_from_slice(&field.to_le_bytes());
        }
        out.extend_from_slice(&[0u8; 8]);
        for x in &self.features {
            out.extend_from_slice(&x.to_le_bytes());
        }
        out
    }

    pub fn from_bytes(slide_id: impl Into<String>, bytes: &[u8]) -> Result<Self> {
        if bytes.len() < BAG_HEADER_LEN {
            return Err(Error::PayloadSize {
                expected: BAG_HEADER_LEN,
                found: bytes.len(),
            });
        }
        let magic: [u8; 4] = bytes[0..4].try_into().unwrap();
        if magic != BAG_MAGIC {
            return Err(Error::BadMagic(magic));
        }
        let word = |i: usize| u32::from_le_bytes(bytes[4 + 4 * i..8 + 4 * i].try_into().unwrap());
        let version = word(0);
        if version != BAG_VERSION {
            return Err(Error::UnsupportedVersion {
                what: "bag",
                version,
            });
        }
        let (n_patches, dim) = (word(1) as usize, word(2) as usize);
        let (coarse, fine) = (word(3) as usize, word(4) as usize);
        let expected = n_patches
            .checked_mul(dim)
            .and_then(|n| n.checked_mul(4))
            .and_then(|n| n.checked_add(BAG_HEADER_LEN))
            .ok_or_else(|| Error::InvalidBag("header dimensions overflow".into()))?;
        if bytes.len() != expected {
            return Err(Error::PayloadSize {
                expected,
                found: bytes.len(),
            });
        }
        let features = bytes[BAG_HEADER_LEN..]
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
            .collect();
        Self::new(slide_id, n_patches, dim, features, coarse, fine)
    }
}

pub fn write_bag(bag: &Bag, path: &Path) -> Result<()> {
    fs::write(path, bag.to_bytes()).map_err(|e| Error::io(path, e))
}

pub fn read_bag(path: &Path) -> Result<Bag> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    let id = path
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_default();
    Bag::from_bytes(id, &bytes)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Val,
    Test,
}

impl Split {
    pub const ALL: [Split; 3] = [Split::Train, Split::Val, Split::Test];

    pub fn as_str(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Val => "val",
            Split::Test => "test",
        }
    }

    fn tag(self) -> u64 {
        match self {
            Split::Train => 0,
            Split::Val => 1,
            Split::Test => 2,
        }
    }
}

impl std::str::FromStr for Split {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(Split::Train),
            "val" => Ok(Split::Val),
            "test" => Ok(Split::Test),
            other => Err(Error::InvalidConfig(format!("unknown split `{other}`"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SplitCounts {
    pub train: usize,
    pub val: usize,
    pub test: usize,
}

impl SplitCounts {
    pub fn get(&self, split: Split) -> usize {
        match split {
            Split::Train => self.train,
            Split::Val => self.val,
            Split::Test => self.test,
        }
    }

    pub fn total(&self) -> usize {
        self.train + self.val + self.test
    }
}

/// Generator knobs; the taxonomy is supplied separately.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DatasetParams {
    pub dim: usize,
    pub patches_min: usize,
    pub patches_max: usize,
    pub slides_per_fine_class: SplitCounts,
    /// Per-fine-class overrides, in taxonomy order.
    pub class_counts: Option<Vec<SplitCounts>>,
    pub coarse_center_scale: f64,
    pub fine_offset_scale: f64,
    pub patch_noise_scale: f64,
    pub background_patch_fraction: f64,
    pub background_scale: f64,
    pub master_seed: u64,
}

impl Default for DatasetParams {
    fn default() -> Self {
        Self {
            dim: 64,
            patches_min: 8,
            patches_max: 24,
            slides_per_fine_class: SplitCounts {
                train: 20,
                val: 5,
                test: 5,
            },
            class_counts: None,
            coarse_center_scale: 4.0,
            fine_offset_scale: 1.5,
            patch_noise_scale: 0.3,
            background_patch_fraction: 0.25,
            background_scale: 1.0,
            master_seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct DatasetSpec {
    pub taxonomy: Taxonomy,
    pub params: DatasetParams,
}

/// Train-split slide counts of the gastric biopsy table, in taxonomy order.
pub const GASTRIC_TRAIN_COUNTS: [usize; 14] =
    [725, 288, 259, 10, 18, 9, 549, 118, 671, 96, 126, 618, 224, 36];

impl DatasetSpec {
    pub fn new(taxonomy: Taxonomy, params: DatasetParams) -> Result<Self> {
        let spec = Self { taxonomy, params };
        spec.validate()?;
        Ok(spec)
    }

    /// Imbalanced fixture whose per-class train counts follow the gastric
    /// table scaled by `scale` (at least one slide each); val/test get a
    /// tenth of train, also at least one.
    pub fn gastric_imbalanced(scale: f64, mut params: DatasetParams) -> Result<Self> {
        let counts = GASTRIC_TRAIN_COUNTS
            .iter()
            .map(|&n| {
                let train = ((n as f64 * scale).round() as usize).max(1);
                let held = (train / 10).max(1);
                SplitCounts {
                    train,
                    val: held,
                    test: held,
                }
            })
            .collect();
        params.class_counts = Some(counts);
        Self::new(Taxonomy::gastric(), params)
    }

    pub fn validate(&self) -> Result<()> {
        let p = &self.params;
        let bad = |msg: String| Err(Error::InvalidConfig(msg));
        if p.dim == 0 {
            return bad("dataset dim must be ≥ 1".into());
        }
        if p.patches_min == 0 || p.patches_max < p.patches_min {
            return bad(format!(
                "patch range [{}, {}] must satisfy 1 ≤ min ≤ max",
                p.patches_min, p.patches_max
            ));
        }
        for (name, v) in [
            ("coarse_center_scale", p.coarse_center_scale),
            ("fine_offset_scale", p.fine_offset_scale),
            ("patch_noise_scale", p.patch_noise_scale),
            ("background_scale", p.background_scale),
        ] {
            if !(v.is_finite() && v >= 0.0) {
                return bad(format!("{name} must be a finite nonnegative number, got {v}"));
            }
        }
        if !(0.0..1.0).contains(&p.background_patch_fraction) {
            return bad(format!(
                "background_patch_fraction must lie in [0, 1), got {}",
                p.background_patch_fraction
            ));
        }
        if let Some(counts) = &p.class_counts {
            if counts.len() != self.taxonomy.n_fine() {
                return bad(format!(
                    "class_counts has {} entries for {} fine classes",
                    counts.len(),
                    self.taxonomy.n_fine()
                ));
            }
        }
        let total: usize = (0..self.taxonomy.n_fine())
            .map(|f| self.counts_for(f).total())
            .sum();
        if total == 0 {
            return bad("dataset would contain no slides".into());
        }
        Ok(())
    }

    pub fn counts_for(&self, fine: usize) -> SplitCounts {
        match &self.params.class_counts {
            Some(c) => c[fine],
            None => self.params.slides_per_fine_class,
        }
    }

    /// Mean feature vector of each fine class: its coarse center plus its own offset.
    pub fn class_centers(&self) -> Vec<Vec<f64>> {
        let p = &self.params;
        let coarse: Vec<Vec<f64>> = (0..self.taxonomy.n_coarse())
            .map(|c| gaussian_vec(derive_seed(p.master_seed, &[TAG_COARSE, c as u64]), p.dim, p.coarse_center_scale))
            .collect();
        (0..self.taxonomy.n_fine())
            .map(|f| {
                let group = self.taxonomy.group_of(f).expect("valid fine index");
                let offset = gaussian_vec(derive_seed(p.master_seed, &[TAG_FINE, f as u64]), p.dim, p.fine_offset_scale);
                coarse[group].iter().zip(offset).map(|(a, b)| a + b).collect()
            })
            .collect()
    }
}

const TAG_COARSE: u64 = 0xC0A5;
const TAG_FINE: u64 = 0xF1E0;
const TAG_SLIDE: u64 = 0x511D;

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Stable seed derivation: a SplitMix64 chain over the master seed and tags.
pub fn derive_seed(master: u64, tags: &[u64]) -> u64 {
    tags.iter()
        .fold(splitmix64(master), |acc, &t| splitmix64(acc ^ splitmix64(t)))
}

fn gaussian_vec(seed: u64, dim: usize, scale: f64) -> Vec<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..dim)
        .map(|_| scale * rng.sample::<f64, _>(StandardNormal))
        .collect()
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ManifestEntry {
    pub slide_id: String,
    pub split: Split,
    pub coarse: usize,
    pub fine: usize,
    pub relative_path: String,
}

fn plan_entries(spec: &DatasetSpec) -> Vec<(ManifestEntry, u64)> {
    let mut entries = Vec::new();
    for split in Split::ALL {
        for fine in 0..spec.taxonomy.n_fine() {
            let coarse = spec.taxonomy.group_of(fine).expect("valid fine index");
            for ordinal in 0..spec.counts_for(fine).get(split) {
                let slide_id = format!("{}_{:02}_{:04}", split.as_str(), fine, ordinal);
                let seed = derive_seed(
                    spec.params.master_seed,
                    &[TAG_SLIDE, split.tag(), fine as u64, ordinal as u64],
                );
                let relative_path = format!("bags/{}/{}.{}", split.as_str(), slide_id, BAG_EXTENSION);
                entries.push((
                    ManifestEntry {
                        slide_id,
                        split,
                        coarse,
                        fine,
                        relative_path,
                    },
                    seed,
                ));
            }
        }
    }
    entries
}

fn synth_bag(spec: &DatasetSpec, centers: &[Vec<f64>], entry: &ManifestEntry, seed: u64) -> Bag {
    let p = &spec.params;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n_patches = rng.random_range(p.patches_min..=p.patches_max);
    let n_background = (p.background_patch_fraction * n_patches as f64).floor() as usize;
    let center = &centers[entry.fine];
    let mut features = Vec::with_capacity(n_patches * p.dim);
    for k in 0..n_patches {
        let background = k >= n_patches - n_background;
        for c in center {
            let z: f64 = rng.sample(StandardNormal);
            let value = if background {
                p.background_scale * z
            } else {
                c + p.patch_noise_scale * z
            };
            features.push(value as f32);
        }
    }
    Bag::new(
        entry.slide_id.clone(),
        n_patches,
        p.dim,
        features,
        entry.coarse,
        entry.fine,
    )
    .expect("generated bag is valid")
}

/// Generates every bag in memory, in manifest order.
pub fn generate_bags(spec: &DatasetSpec, exec: Exec) -> Result<Vec<(ManifestEntry, Bag)>> {
    spec.validate()?;
    let centers = spec.class_centers();
    let plan = plan_entries(spec);
    Ok(exec.map(&plan, |(entry, seed)| {
        (entry.clone(), synth_bag(spec, &centers, entry, *seed))
    }))
}

/// Writes `manifest.json`, `taxonomy.json` and one bag file per slide under `out`.
pub fn generate_dataset(spec: &DatasetSpec, out: &Path, exec: Exec) -> Result<Vec<ManifestEntry>> {
    spec.validate()?;
    for split in Split::ALL {
        let dir = out.join("bags").join(split.as_str());
        fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
    }
    let centers = spec.class_centers();
    let plan = plan_entries(spec);
    let written: Vec<Result<ManifestEntry>> = exec.map(&plan, |(entry, seed)| {
        let bag = synth_bag(spec, &centers, entry, *seed);
        write_bag(&bag, &out.join(&entry.relative_path))?;
        Ok(entry.clone())
    });
    let manifest = written.into_iter().collect::<Result<Vec<_>>>()?;
    let manifest_path = out.join(MANIFEST_FILE);
    let text = serde_json::to_string_pretty(&manifest).map_err(|e| Error::json(&manifest_path, e))?;
    fs::write(&manifest_path, text + "\n").map_err(|e| Error::io(&manifest_path, e))?;
    let tax_path = out.join(TAXONOMY_FILE);
    fs::write(&tax_path, spec.taxonomy.to_json_string() + "\n").map_err(|e| Error::io(&tax_path, e))?;
    log::info!("wrote {} bags to {}", manifest.len(), out.display());
    Ok(manifest)
}

/// A generated dataset directory.
#[derive(Debug, Clone)]
pub struct Dataset {
    pub root: PathBuf,
    pub taxonomy: Taxonomy,
    pub manifest: Vec<ManifestEntry>,
}

impl Dataset {
    pub fn open(root: &Path) -> Result<Self> {
        let taxonomy = Taxonomy::load(&root.join(TAXONOMY_FILE))?;
        let manifest_path = root.join(MANIFEST_FILE);
        let text = fs::read_to_string(&manifest_path).map_err(|e| Error::io(&manifest_path, e))?;
        let manifest: Vec<ManifestEntry> =
            serde_json::from_str(&text).map_err(|e| Error::json(&manifest_path, e))?;
        for entry in &manifest {
            if !taxonomy.is_consistent(entry.coarse, entry.fine) {
                return Err(Error::InvalidBag(format!(
                    "manifest entry `{}` has inconsistent labels",
                    entry.slide_id
                )));
            }
        }
        Ok(Self {
            root: root.to_path_buf(),
            taxonomy,
            manifest,
        })
    }

    pub fn entries(&self, split: Split) -> impl Iterator<Item = &ManifestEntry> {
        self.manifest.iter().filter(move |e| e.split == split)
    }

    /// Reads every bag of `split`, in manifest order.
    pub fn load_split(&self, split: Split, exec: Exec) -> Result<Vec<Bag>> {
        let entries: Vec<&ManifestEntry> = self.entries(split).collect();
        exec.map(&entries, |entry| {
            let bag = read_bag(&self.root.join(&entry.relative_path))?;
            if bag.coarse_label != entry.coarse || bag.fine_label != entry.fine {
                return Err(Error::InvalidBag(format!(
                    "slide `{}`: file labels differ from manifest",
                    entry.slide_id
                )));
            }
            bag.check_labels(&self.taxonomy)?;
            Ok(bag)
        })
        .into_iter()
        .collect()
    }
}

/// SHA-256 over the serialized bags, in order.
pub fn fingerprint(bags: &[Bag]) -> String {
    use sha2::{Digest, Sha256};
    let mut hasher = Sha256::new();
    for bag in bags {
        hasher.update(bag.slide_id.as_bytes());
        hasher.update([0u8]);
        hasher.update(bag.to_bytes());
    }
    hasher
        .finalize()
        .iter()
        .map(|b| format!("{b:02x}"))
        .collect()
}
