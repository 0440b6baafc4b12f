//! Patch-feature bags, paired reports, dataset manifests and the synthetic
//! corpus generator.
//!
//! A bag is stored in a self-describing little-endian `.hgfeat` file:
//!
//! | offset | size      | field                                   |
//! |--------|-----------|-----------------------------------------|
//! | 0      | 8         | magic `HGFEAT\0\0`                      |
//! | 8      | 4 (u32)   | format version (1)                      |
//! | 12     | 1 (u8)    | dtype tag (1 = 32-bit float)            |
//! | 13     | 1 (u8)    | flags (bit 0: coordinates block present)|
//! | 14     | 2         | reserved, zero                          |
//! | 16     | 8 (u64)   | patch count `n`                         |
//! | 24     | 8 (u64)   | feature dimension `d`                   |
//! | 32     | 4·n·d     | features, row-major `f32`               |
//! | ...    | 8·n       | optional coordinates, `(i32, i32)` pairs|

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use ndarray::Array2;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{HistGenError, Result};
use crate::tokenizer::TokenSequence;

pub const FEATURE_MAGIC: [u8; 8] = *b"HGFEAT\0\0";
pub const FEATURE_VERSION: u32 = 1;
pub const DTYPE_F32: u8 = 1;
const HEADER_LEN: usize = 32;

/// One whole-slide image as a bag of patch feature vectors.
#[derive(Clone, Debug, PartialEq)]
pub struct PatchFeatureBag {
    pub wsi_id: String,
    /// `n × d_in`
    pub features: Array2<f32>,
    pub coords: Option<Vec<(i32, i32)>>,
}

impl PatchFeatureBag {
    pub fn new(
        wsi_id: impl Into<String>,
        features: Array2<f32>,
        coords: Option<Vec<(i32, i32)>>,
    ) -> Result<Self> {
        let bag = Self {
            wsi_id: wsi_id.into(),
            features,
            coords,
        };
        bag.validate()?;
        Ok(bag)
    }

    pub fn n(&self) -> usize {
        self.features.nrows()
    }

    pub fn d_in(&self) -> usize {
        self.features.ncols()
    }

    pub fn validate(&self) -> Result<()> {
        if self.n() == 0 {
            return Err(HistGenError::invalid(format!(
                "bag {} has no patches",
                self.wsi_id
            )));
        }
        if let Some(row) = first_non_finite_row(&self.features) {
            return Err(HistGenError::invalid(format!(
                "bag {}: non-finite value in row {row}",
                self.wsi_id
            )));
        }
        if let Some(c) = &self.coords {
            if c.len() != self.n() {
                return Err(HistGenError::invalid(format!(
                    "bag {}: {} coordinates for {} patches",
                    self.wsi_id,
                    c.len(),
                    self.n()
                )));
            }
        }
        Ok(())
    }

    /// Features widened to `f64` for the model.
    pub fn features_f64(&self) -> Array2<f64> {
        self.features.mapv(f64::from)
    }

    /// Mean patch feature.
    pub fn mean_feature(&self) -> Vec<f64> {
        let n = self.n() as f64;
        (0..self.d_in())
            .map(|c| self.features.column(c).iter().map(|&v| f64::from(v)).sum::<f64>() / n)
            .collect()
    }
}

fn first_non_finite_row(m: &Array2<f32>) -> Option<usize> {
    m.rows()
        .into_iter()
        .position(|r| r.iter().any(|v| !v.is_finite()))
}

/// A report paired with one WSI.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ReportRecord {
    pub wsi_id: String,
    pub text: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub token_ids: Option<TokenSequence>,
}

impl ReportRecord {
    pub fn new(wsi_id: impl Into<String>, text: impl Into<String>) -> Result<Self> {
        let wsi_id = wsi_id.into();
        let text = normalize_whitespace(&text.into());
        if text.is_empty() {
            return Err(HistGenError::invalid(format!("report for {wsi_id} is empty")));
        }
        Ok(Self {
            wsi_id,
            text,
            token_ids: None,
        })
    }
}

pub fn normalize_whitespace(text: &str) -> String {
    text.split_whitespace().collect::<Vec<_>>().join(" ")
}

pub fn write_feature_bag(path: &Path, bag: &PatchFeatureBag) -> Result<()> {
    bag.validate()?;
    let (n, d) = bag.features.dim();
    let mut buf = Vec::with_capacity(HEADER_LEN + 4 * n * d + bag.coords.as_ref().map_or(0, |c| 8 * c.len()));
    buf.extend_from_slice(&FEATURE_MAGIC);
    buf.extend_from_slice(&FEATURE_VERSION.to_le_bytes());
    buf.push(DTYPE_F32);
    buf.push(u8::from(bag.coords.is_some()));
    buf.extend_from_slice(&[0, 0]);
    buf.extend_from_slice(&(n as u64).to_le_bytes());
    buf.extend_from_slice(&(d as u64).to_le_bytes());
    for v in bag.features.iter() {
        buf.extend_from_slice(&v.to_le_bytes());
    }
    if let Some(coords) = &bag.coords {
        for (x, y) in coords {
            buf.extend_from_slice(&x.to_le_bytes());
            buf.extend_from_slice(&y.to_le_bytes());
        }
    }
    fs::write(path, buf).map_err(|e| HistGenError::io(path, e))
}

/// Reads a `.hgfeat` file; the WSI id is the file stem.
pub fn load_feature_bag(path: &Path) -> Result<PatchFeatureBag> {
    let bytes = fs::read(path).map_err(|e| HistGenError::io(path, e))?;
    let wsi_id = path
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_default();
    decode_feature_bag(&bytes, wsi_id).map_err(|reason| HistGenError::FeatureFile {
        path: path.to_path_buf(),
        reason,
    })
}

fn decode_feature_bag(bytes: &[u8], wsi_id: String) -> std::result::Result<PatchFeatureBag, String> {
    if bytes.len() < HEADER_LEN {
        return Err(format!("malformed header: {} bytes", bytes.len()));
    }
    if bytes[..8] != FEATURE_MAGIC {
        return Err("malformed header: bad magic".into());
    }
    let u32_at = |o: usize| u32::from_le_bytes(bytes[o..o + 4].try_into().unwrap());
    let u64_at = |o: usize| u64::from_le_bytes(bytes[o..o + 8].try_into().unwrap());
    let version = u32_at(8);
    if version != FEATURE_VERSION {
        return Err(format!("malformed header: unsupported version {version}"));
    }
    if bytes[12] != DTYPE_F32 {
        return Err(format!("malformed header: unsupported dtype tag {}", bytes[12]));
    }
    let flags = bytes[13];
    if flags & !1 != 0 {
        return Err(format!("malformed header: unknown flags {flags:#04x}"));
    }
    let has_coords = flags & 1 == 1;
    let n = usize::try_from(u64_at(16)).map_err(|_| "malformed header: n overflows")?;
    let d = usize::try_from(u64_at(24)).map_err(|_| "malformed header: d overflows")?;
    if n == 0 || d == 0 {
        return Err(format!("malformed header: n={n}, d={d}"));
    }
    let row_bytes = d * 4 + if has_coords { 8 } else { 0 };
    let payload = bytes.len() - HEADER_LEN;
    if payload != n * row_bytes {
        if payload % row_bytes == 0 {
            return Err(format!(
                "row count mismatch: header declares {n} rows, payload holds {}",
                payload / row_bytes
            ));
        }
        return Err(format!(
            "dimension mismatch: payload of {payload} bytes is not a whole number of {d}-wide rows"
        ));
    }
    let body = &bytes[HEADER_LEN..];
    let mut values = Vec::with_capacity(n * d);
    for chunk in body[..n * d * 4].chunks_exact(4) {
        values.push(f32::from_le_bytes(chunk.try_into().unwrap()));
    }
    let features = Array2::from_shape_vec((n, d), values).map_err(|e| e.to_string())?;
    if let Some(row) = first_non_finite_row(&features) {
        return Err(format!("non-finite value in row {row}"));
    }
    let coords = has_coords.then(|| {
        body[n * d * 4..]
            .chunks_exact(8)
            .map(|c| {
                (
                    i32::from_le_bytes(c[..4].try_into().unwrap()),
                    i32::from_le_bytes(c[4..].try_into().unwrap()),
                )
            })
            .collect()
    });
    Ok(PatchFeatureBag {
        wsi_id,
        features,
        coords,
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Val,
    Test,
}

impl Split {
    pub const ALL: [Split; 3] = [Split::Train, Split::Val, Split::Test];
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ManifestEntry {
    pub wsi_id: String,
    /// Relative paths resolve against the manifest's directory.
    pub feature_file: PathBuf,
    pub report: String,
}

#[derive(Clone, Debug, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetManifest {
    pub d_in: usize,
    pub entries: Vec<ManifestEntry>,
    #[serde(default)]
    pub splits: BTreeMap<String, Split>,
}

impl DatasetManifest {
    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| HistGenError::io(path, e))?;
        let mut m: DatasetManifest = serde_json::from_str(&text)?;
        let base = path.parent().unwrap_or(Path::new("."));
        for e in &mut m.entries {
            if e.feature_file.is_relative() {
                e.feature_file = base.join(&e.feature_file);
            }
        }
        m.check_unique_ids()?;
        Ok(m)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        write_json(path, self)
    }

    fn check_unique_ids(&self) -> Result<()> {
        let mut seen = std::collections::HashSet::new();
        for e in &self.entries {
            if !seen.insert(&e.wsi_id) {
                return Err(HistGenError::invalid(format!(
                    "wsi_id {} appears more than once",
                    e.wsi_id
                )));
            }
        }
        Ok(())
    }

    pub fn ids_in(&self, split: Split) -> Vec<&ManifestEntry> {
        self.entries
            .iter()
            .filter(|e| self.splits.get(&e.wsi_id) == Some(&split))
            .collect()
    }

    /// Loads every bag and report, checking that `d_in` is consistent.
    pub fn load_pairs(&self) -> Result<Vec<(PatchFeatureBag, ReportRecord)>> {
        self.entries
            .iter()
            .map(|e| {
                let mut bag = load_feature_bag(&e.feature_file)?;
                if bag.d_in() != self.d_in {
                    return Err(HistGenError::FeatureFile {
                        path: e.feature_file.clone(),
                        reason: format!(
                            "dimension mismatch: manifest d_in={}, file d={}",
                            self.d_in,
                            bag.d_in()
                        ),
                    });
                }
                bag.wsi_id = e.wsi_id.clone();
                Ok((bag, ReportRecord::new(&e.wsi_id, &e.report)?))
            })
            .collect()
    }
}

pub(crate) fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    fs::write(path, text).map_err(|e| HistGenError::io(path, e))
}

/// Report corpus as a JSON map `wsi_id → text`.
pub fn save_report_corpus(path: &Path, reports: &[ReportRecord]) -> Result<()> {
    let map: BTreeMap<&str, &str> = reports
        .iter()
        .map(|r| (r.wsi_id.as_str(), r.text.as_str()))
        .collect();
    write_json(path, &map)
}

pub fn load_report_corpus(path: &Path) -> Result<Vec<ReportRecord>> {
    let text = fs::read_to_string(path).map_err(|e| HistGenError::io(path, e))?;
    let map: BTreeMap<String, String> = serde_json::from_str(&text)?;
    map.into_iter()
        .map(|(id, text)| ReportRecord::new(id, text))
        .collect()
}

/// Largest-remainder apportionment of `n` items over `ratios`. Ties in the
/// fractional remainder go to the earlier split.
pub fn apportion(n: usize, ratios: [f64; 3]) -> [usize; 3] {
    let quotas = ratios.map(|r| r * n as f64);
    let mut counts = quotas.map(|q| q.floor() as usize);
    let mut left = n - counts.iter().sum::<usize>();
    let mut order = [0usize, 1, 2];
    order.sort_by(|&a, &b| {
        let ra = quotas[a] - quotas[a].floor();
        let rb = quotas[b] - quotas[b].floor();
        rb.total_cmp(&ra).then(a.cmp(&b))
    });
    for &i in order.iter().cycle() {
        if left == 0 {
            break;
        }
        counts[i] += 1;
        left -= 1;
    }
    counts
}

fn check_ratios(ratios: [f64; 3]) -> Result<()> {
    if ratios.iter().any(|r| !(0.0..=1.0).contains(r)) || (ratios.iter().sum::<f64>() - 1.0).abs() > 1e-9 {
        return Err(HistGenError::invalid(format!(
            "split ratios {ratios:?} must be in [0, 1] and sum to 1"
        )));
    }
    Ok(())
}

/// Seeded shuffle followed by largest-remainder assignment.
pub fn assign_splits(ids: &[String], ratios: [f64; 3], seed: u64) -> Result<BTreeMap<String, Split>> {
    check_ratios(ratios)?;
    if ids.len() < Split::ALL.len() {
        return Err(HistGenError::invalid(format!(
            "{} entries cannot fill {} splits",
            ids.len(),
            Split::ALL.len()
        )));
    }
    let mut order: Vec<usize> = (0..ids.len()).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let counts = apportion(ids.len(), ratios);
    let mut out = BTreeMap::new();
    let mut it = order.into_iter();
    for (split, count) in Split::ALL.into_iter().zip(counts) {
        for i in it.by_ref().take(count) {
            out.insert(ids[i].clone(), split);
        }
    }
    Ok(out)
}

pub fn split_dataset(manifest: &DatasetManifest, ratios: [f64; 3], seed: u64) -> Result<DatasetManifest> {
    let ids: Vec<String> = manifest.entries.iter().map(|e| e.wsi_id.clone()).collect();
    let splits = assign_splits(&ids, ratios, seed)?;
    Ok(DatasetManifest {
        splits,
        ..manifest.clone()
    })
}

/// One planted theme: a feature-space center and the phrase it produces.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Theme {
    pub center: Vec<f32>,
    pub phrase: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SyntheticSpec {
    pub num_wsis: usize,
    pub n_range: (usize, usize),
    pub d_in: usize,
    pub themes: Vec<Theme>,
    pub noise_scale: f64,
    /// Upper bound on themes per WSI (1..=3 by default).
    pub max_themes_per_wsi: usize,
    pub seed: u64,
}

const SITES: &[&str] = &[
    "breast", "lung", "colon", "kidney", "liver", "prostate", "thyroid", "bladder", "stomach",
    "pancreas", "ovary", "uterus", "skin", "brain", "bone", "lymph", "esophagus", "cervix",
    "rectum", "testis", "adrenal", "thymus", "eye", "soft",
];
const GRADES: &[&str] = &[
    "well", "moderately", "poorly", "focally", "diffusely", "markedly", "mildly", "partially",
    "extensively", "predominantly", "occasionally", "uniformly",
];
const PATTERNS: &[&str] = &[
    "differentiated", "invasive", "papillary", "solid", "glandular", "cribriform", "micropapillary",
    "trabecular", "acinar", "lobular", "ductal", "mucinous", "clear", "serous", "squamous",
    "spindle", "sarcomatoid", "necrotic", "fibrotic", "cystic", "nested", "tubular", "alveolar",
    "follicular",
];
const NOUNS: &[&str] = &[
    "carcinoma", "adenocarcinoma", "neoplasm", "tumor", "lesion", "proliferation", "infiltrate",
    "stroma", "epithelium", "nodule", "mass", "growth", "component", "focus", "population",
    "architecture", "pattern", "area", "region", "border", "margin", "capsule",
];
const FINDINGS: &[&str] = &[
    "lymphovascular invasion", "perineural invasion", "high mitotic activity", "low mitotic activity",
    "nuclear pleomorphism", "prominent nucleoli", "extensive necrosis", "focal hemorrhage",
    "dense inflammation", "calcifications", "desmoplastic reaction", "negative margins",
    "positive margins", "extracapsular extension", "tumor budding", "hyalinized stroma",
    "vascular proliferation", "keratin pearls", "signet ring cells", "mucin pools",
    "psammoma bodies", "giant cells", "atypical mitoses", "clear cytoplasm",
];

/// Deterministic phrase for theme `k`; distinct for every `k` below
/// `SITES.len() * GRADES.len()`.
pub fn theme_phrase(k: usize) -> String {
    let site = SITES[k % SITES.len()];
    let grade = GRADES[(k / SITES.len() + k) % GRADES.len()];
    let pattern = PATTERNS[(k * 7 + 3) % PATTERNS.len()];
    let noun = NOUNS[(k * 5 + 1) % NOUNS.len()];
    let finding = FINDINGS[(k * 11 + 2) % FINDINGS.len()];
    format!("{site} tissue shows {grade} {pattern} {noun} with {finding} .")
}

/// `k` mutually orthogonal vectors of norm `radius` in `dim` dimensions
/// (Gram–Schmidt on Gaussian draws).
pub fn orthogonal_centers(k: usize, dim: usize, radius: f64, rng: &mut impl Rng) -> Vec<Vec<f64>> {
    assert!(k <= dim, "need k <= dim for orthogonal centers");
    let mut basis: Vec<Vec<f64>> = Vec::with_capacity(k);
    while basis.len() < k {
        let mut v: Vec<f64> = (0..dim).map(|_| StandardNormal.sample(rng)).collect();
        for b in &basis {
            let dot: f64 = v.iter().zip(b).map(|(a, b)| a * b).sum();
            v.iter_mut().zip(b).for_each(|(a, b)| *a -= dot * b);
        }
        let norm = v.iter().map(|a| a * a).sum::<f64>().sqrt();
        if norm > 1e-6 {
            basis.push(v.into_iter().map(|a| a / norm).collect());
        }
    }
    basis
        .into_iter()
        .map(|b| b.into_iter().map(|a| a * radius).collect())
        .collect()
}

impl SyntheticSpec {
    /// Standard planted corpus: `k` orthogonal theme centers of norm
    /// `sqrt(d_in)` and the template phrases of [`theme_phrase`].
    pub fn planted(num_wsis: usize, k: usize, d_in: usize, n_range: (usize, usize), noise_scale: f64, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x7468_656d_6573);
        let centers = orthogonal_centers(k, d_in, (d_in as f64).sqrt(), &mut rng);
        let themes = centers
            .into_iter()
            .enumerate()
            .map(|(i, c)| Theme {
                center: c.into_iter().map(|v| v as f32).collect(),
                phrase: theme_phrase(i),
            })
            .collect();
        Self {
            num_wsis,
            n_range,
            d_in,
            themes,
            noise_scale,
            max_themes_per_wsi: 3,
            seed,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.n_range.0 < 1 || self.n_range.0 > self.n_range.1 {
            return Err(HistGenError::invalid(format!(
                "n_range {:?} must satisfy 1 <= min <= max",
                self.n_range
            )));
        }
        if self.themes.len() < 2 {
            return Err(HistGenError::invalid("need at least 2 themes"));
        }
        if self.max_themes_per_wsi < 1 {
            return Err(HistGenError::invalid("max_themes_per_wsi must be >= 1"));
        }
        for (i, t) in self.themes.iter().enumerate() {
            if t.center.len() != self.d_in {
                return Err(HistGenError::invalid(format!(
                    "theme {i} center has dimension {}, expected {}",
                    t.center.len(),
                    self.d_in
                )));
            }
            if self.themes[..i].iter().any(|u| u.phrase == t.phrase) {
                return Err(HistGenError::invalid(format!("theme {i} phrase is not unique")));
            }
        }
        if !(self.noise_scale >= 0.0 && self.noise_scale.is_finite()) {
            return Err(HistGenError::invalid("noise_scale must be finite and >= 0"));
        }
        Ok(())
    }
}

/// Ground truth of one synthetic WSI.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PlantedThemes {
    pub wsi_id: String,
    /// Themes in report order; the first is the primary (largest share).
    pub themes: Vec<usize>,
    /// Patch count per theme, same order.
    pub counts: Vec<usize>,
}

pub struct SyntheticCorpus {
    pub bags: Vec<PatchFeatureBag>,
    pub reports: Vec<ReportRecord>,
    pub truth: Vec<PlantedThemes>,
}

/// Draws a planted corpus. Each WSI picks 1..=`max_themes_per_wsi` distinct
/// themes; the primary covers 55–80% of patches (all of them when alone) and
/// the others share the rest. Patches are laid out in contiguous theme
/// blocks on a square grid, and the report concatenates the theme phrases,
/// primary first, then the rest by theme index.
pub fn synth_generate(spec: &SyntheticSpec) -> Result<SyntheticCorpus> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let k = spec.themes.len();
    let width = digits(spec.num_wsis.saturating_sub(1));
    let mut corpus = SyntheticCorpus {
        bags: Vec::with_capacity(spec.num_wsis),
        reports: Vec::with_capacity(spec.num_wsis),
        truth: Vec::with_capacity(spec.num_wsis),
    };
    for w in 0..spec.num_wsis {
        let wsi_id = format!("wsi_{w:0width$}");
        let n = rng.random_range(spec.n_range.0..=spec.n_range.1);
        let max_m = spec.max_themes_per_wsi.min(k).min(n);
        let m = rng.random_range(1..=max_m);
        let mut chosen: Vec<usize> = (0..k).collect();
        chosen.shuffle(&mut rng);
        chosen.truncate(m);
        let primary = chosen[0];
        let mut rest = chosen[1..].to_vec();
        rest.sort_unstable();
        let themes: Vec<usize> = std::iter::once(primary).chain(rest).collect();

        let counts = if m == 1 {
            vec![n]
        } else {
            let share: f64 = rng.random_range(0.55..0.8);
            let primary_count = ((share * n as f64).round() as usize).clamp(1, n - (m - 1));
            let mut counts = vec![primary_count];
            let mut left = n - primary_count;
            for j in 1..m {
                let slots = m - j;
                let c = if slots == 1 { left } else { (left / slots).max(1) };
                counts.push(c);
                left -= c;
            }
            // The primary must stay the strict majority component.
            while counts[1..].iter().any(|&c| c >= counts[0]) {
                let j = 1 + counts[1..].iter().enumerate().max_by_key(|(_, c)| **c).unwrap().0;
                counts[j] -= 1;
                counts[0] += 1;
            }
            counts
        };

        let mut features = Array2::<f32>::zeros((n, spec.d_in));
        let mut row = 0;
        for (&t, &c) in themes.iter().zip(&counts) {
            let center = &spec.themes[t].center;
            for _ in 0..c {
                for (j, &mu) in center.iter().enumerate() {
                    let z: f64 = StandardNormal.sample(&mut rng);
                    features[[row, j]] = (f64::from(mu) + spec.noise_scale * z) as f32;
                }
                row += 1;
            }
        }
        let side = (n as f64).sqrt().ceil() as usize;
        let coords = (0..n).map(|i| ((i % side) as i32, (i / side) as i32)).collect();
        let text = themes
            .iter()
            .map(|&t| spec.themes[t].phrase.as_str())
            .collect::<Vec<_>>()
            .join(" ");
        corpus.bags.push(PatchFeatureBag::new(&wsi_id, features, Some(coords))?);
        corpus.reports.push(ReportRecord::new(&wsi_id, text)?);
        corpus.truth.push(PlantedThemes {
            wsi_id,
            themes,
            counts,
        });
    }
    Ok(corpus)
}

fn digits(mut n: usize) -> usize {
    let mut d = 1;
    while n >= 10 {
        n /= 10;
        d += 1;
    }
    d
}

/// Writes `features/<id>.hgfeat`, `reports.json` and `manifest.json` under
/// `dir`, with splits assigned by [`assign_splits`].
pub fn write_corpus(
    dir: &Path,
    bags: &[PatchFeatureBag],
    reports: &[ReportRecord],
    ratios: [f64; 3],
    seed: u64,
) -> Result<DatasetManifest> {
    let feat_dir = dir.join("features");
    fs::create_dir_all(&feat_dir).map_err(|e| HistGenError::io(&feat_dir, e))?;
    let d_in = bags.first().map_or(0, PatchFeatureBag::d_in);
    let mut entries = Vec::with_capacity(bags.len());
    for (bag, report) in bags.iter().zip(reports) {
        if bag.wsi_id != report.wsi_id {
            return Err(HistGenError::invalid(format!(
                "bag {} paired with report {}",
                bag.wsi_id, report.wsi_id
            )));
        }
        if bag.d_in() != d_in {
            return Err(HistGenError::invalid("d_in differs across bags"));
        }
        let rel = PathBuf::from("features").join(format!("{}.hgfeat", bag.wsi_id));
        write_feature_bag(&dir.join(&rel), bag)?;
        entries.push(ManifestEntry {
            wsi_id: bag.wsi_id.clone(),
            feature_file: rel,
            report: report.text.clone(),
        });
    }
    let ids: Vec<String> = entries.iter().map(|e| e.wsi_id.clone()).collect();
    let manifest = DatasetManifest {
        d_in,
        entries,
        splits: assign_splits(&ids, ratios, seed)?,
    };
    manifest.save(&dir.join("manifest.json"))?;
    save_report_corpus(&dir.join("reports.json"), reports)?;
    Ok(manifest)
}
