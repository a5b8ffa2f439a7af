//! Seeded long-tailed synthetic multimodal cases and the metadata-to-text
//! template.
//!
//! Each class owns a hidden prototype patch pattern and a three-token
//! signature. A sample's lesion patches are noisy copies of its class
//! prototype; the remaining patches are noisy copies of a shared background.
//! The out-of-distribution split rotates every prototype by a fixed
//! orthogonal map.

use alloc::format;
use alloc::string::{String, ToString};
use alloc::vec;
use alloc::vec::Vec;

use rand::Rng as _;

use crate::array::Array;
use crate::error::{Error, Result};
use crate::rng;

pub const PAD: usize = 0;
pub const BOS: usize = 1;
pub const END: usize = 2;
/// Signature tokens per class.
pub const SIGNATURE_LEN: usize = 3;
/// Share of the long-tailed pool held out for validation.
pub const VAL_FRACTION: f64 = 0.2;

pub const SITES: [&str; 8] = [
    "anterior torso",
    "posterior torso",
    "lateral torso",
    "head/neck",
    "upper extremity",
    "lower extremity",
    "palms/soles",
    "oral/genital",
];
pub const SEXES: [&str; 2] = ["male", "female"];
pub const MAX_AGE: u32 = 100;

#[derive(Debug, Clone, PartialEq)]
pub struct DataConfig {
    pub classes: usize,
    /// Size of the long-tailed pool that is split into train and validation.
    pub n_total: usize,
    /// Ratio of the largest to the smallest class prior.
    pub imbalance_rho: f64,
    /// Patches per sample.
    pub n_patches: usize,
    pub d_v: usize,
    pub vocab_size: usize,
    pub desc_len: usize,
    pub noise_sigma: f64,
    pub seed: u64,
    /// Samples per class in each of the balanced test and OOD splits.
    pub eval_per_class: usize,
    /// Givens rotation angle (radians) applied to the prototypes for OOD.
    pub ood_angle: f64,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self {
            classes: 8,
            n_total: 2000,
            imbalance_rho: 50.0,
            n_patches: 8,
            d_v: 16,
            vocab_size: 64,
            desc_len: 12,
            noise_sigma: 1.0,
            seed: 0,
            eval_per_class: 30,
            ood_angle: 0.35,
        }
    }
}

impl DataConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.classes < 2 {
            return bad(format!("classes = {} must be at least 2", self.classes));
        }
        if !(self.imbalance_rho >= 1.0) || !self.imbalance_rho.is_finite() {
            return bad(format!("imbalance_rho = {} must be >= 1", self.imbalance_rho));
        }
        if self.n_patches == 0 || self.d_v == 0 {
            return bad("n_patches and d_v must be positive".to_string());
        }
        if self.n_total < self.classes {
            return bad(format!(
                "n_total = {} cannot cover {} classes",
                self.n_total, self.classes
            ));
        }
        if self.desc_len < SIGNATURE_LEN + 1 {
            return bad(format!("desc_len = {} must be at least {}", self.desc_len, SIGNATURE_LEN + 1));
        }
        let need = filler_start(self.classes) + 1;
        if self.vocab_size < need {
            return bad(format!(
                "vocab_size = {} too small for {} classes (need {need})",
                self.vocab_size, self.classes
            ));
        }
        if !(self.noise_sigma >= 0.0) || !self.noise_sigma.is_finite() {
            return bad(format!("noise_sigma = {} must be >= 0", self.noise_sigma));
        }
        if !self.ood_angle.is_finite() {
            return bad("ood_angle must be finite".to_string());
        }
        Ok(())
    }
}

/// First token id of class `c`'s signature.
pub fn signature_start(c: usize) -> usize {
    3 + SIGNATURE_LEN * c
}

pub fn signature(c: usize) -> [usize; SIGNATURE_LEN] {
    let s = signature_start(c);
    [s, s + 1, s + 2]
}

/// First token id that belongs to no signature.
pub fn filler_start(classes: usize) -> usize {
    signature_start(classes)
}

/// Class whose signature contains `token`, if any.
pub fn signature_class(token: usize, classes: usize) -> Option<usize> {
    (3..filler_start(classes))
        .contains(&token)
        .then(|| (token - 3) / SIGNATURE_LEN)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Split {
    Train,
    Val,
    Test,
    Ood,
}

impl Split {
    pub const ALL: [Split; 4] = [Split::Train, Split::Val, Split::Test, Split::Ood];

    pub fn name(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Val => "val",
            Split::Test => "test",
            Split::Ood => "ood",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|x| x.name() == s)
            .ok_or_else(|| Error::Vocabulary {
                kind: "split",
                value: s.to_string(),
            })
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Meta {
    pub site: String,
    pub age: u32,
    pub sex: String,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SampleRecord {
    pub id: String,
    pub class_id: usize,
    /// `N × d_v`.
    pub patch_features: Array,
    pub meta: Meta,
    pub description_tokens: Vec<usize>,
    pub split: Split,
}

/// Hidden generative state shared by all samples of one dataset.
#[derive(Debug, Clone, PartialEq)]
pub struct World {
    /// `C × d_v` in-distribution prototypes.
    pub prototypes: Array,
    /// `C × d_v` rotated prototypes used for the OOD split.
    pub ood_prototypes: Array,
    /// `1 × d_v`.
    pub background: Array,
}

impl World {
    pub fn prototypes_for(&self, split: Split) -> &Array {
        match split {
            Split::Ood => &self.ood_prototypes,
            _ => &self.prototypes,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub config: DataConfig,
    pub world: World,
    pub records: Vec<SampleRecord>,
}

impl Dataset {
    pub fn split(&self, split: Split) -> Vec<&SampleRecord> {
        self.records.iter().filter(|r| r.split == split).collect()
    }
}

/// Geometric priors `π_c ∝ ρ^{−c/(C−1)}`, so `π_0 / π_{C−1} = ρ`.
pub fn class_priors(classes: usize, rho: f64) -> Vec<f64> {
    let w: Vec<f64> = (0..classes)
        .map(|c| libm::pow(rho, -(c as f64) / (classes - 1) as f64))
        .collect();
    let s: f64 = w.iter().sum();
    w.into_iter().map(|x| x / s).collect()
}

/// Largest-remainder apportionment of `n` over `priors`, with every class
/// receiving at least one sample.
pub fn allocate(n: usize, priors: &[f64]) -> Result<Vec<usize>> {
    let c = priors.len();
    if n < c {
        return Err(Error::Config(format!("{n} samples cannot cover {c} classes")));
    }
    let quotas: Vec<f64> = priors.iter().map(|p| p * n as f64).collect();
    let mut counts: Vec<usize> = quotas.iter().map(|q| libm::floor(*q) as usize).collect();
    let mut left = n - counts.iter().sum::<usize>();
    let mut order: Vec<usize> = (0..c).collect();
    order.sort_by(|&a, &b| {
        let ra = quotas[a] - counts[a] as f64;
        let rb = quotas[b] - counts[b] as f64;
        rb.total_cmp(&ra).then(a.cmp(&b))
    });
    for &k in order.iter().cycle() {
        if left == 0 {
            break;
        }
        counts[k] += 1;
        left -= 1;
    }
    while let Some(empty) = counts.iter().position(|&x| x == 0) {
        let donor = (0..c).max_by_key(|&k| (counts[k], core::cmp::Reverse(k))).unwrap();
        counts[donor] -= 1;
        counts[empty] += 1;
    }
    Ok(counts)
}

/// Rotation by `angle` in the planes (0,1), (2,3), …; an odd last
/// coordinate is left fixed.
pub fn givens_rotate(x: &[f64], angle: f64) -> Vec<f64> {
    let (s, c) = (libm::sin(angle), libm::cos(angle));
    let mut y = x.to_vec();
    for i in (0..x.len().saturating_sub(1)).step_by(2) {
        y[i] = c * x[i] - s * x[i + 1];
        y[i + 1] = s * x[i] + c * x[i + 1];
    }
    y
}

fn build_world(cfg: &DataConfig) -> World {
    let mut r = rng::stream(cfg.seed, 0);
    let prototypes = rng::gaussian(&mut r, &[cfg.classes, cfg.d_v], 1.0);
    let background = rng::gaussian(&mut r, &[1, cfg.d_v], 1.0);
    let mut ood = prototypes.clone();
    for c in 0..cfg.classes {
        let rot = givens_rotate(prototypes.row(c), cfg.ood_angle);
        ood.row_mut(c).copy_from_slice(&rot);
    }
    World {
        prototypes,
        ood_prototypes: ood,
        background,
    }
}

/// Number of patches that carry the lesion pattern.
pub fn lesion_patches(n_patches: usize) -> usize {
    (n_patches / 4).max(1)
}

fn draw_meta(r: &mut rng::Rng, class_id: usize) -> Meta {
    let site = if r.random_bool(0.5) {
        SITES[class_id % SITES.len()]
    } else {
        SITES[r.random_range(0..SITES.len())]
    };
    let age = libm::round(30.0 + 5.0 * class_id as f64 + 10.0 * rng::normal(r)).clamp(5.0, 90.0) as u32;
    Meta {
        site: site.to_string(),
        age,
        sex: SEXES[r.random_range(0..SEXES.len())].to_string(),
    }
}

fn draw_sample(
    cfg: &DataConfig,
    world: &World,
    r: &mut rng::Rng,
    index: usize,
    class_id: usize,
    split: Split,
) -> SampleRecord {
    let n = cfg.n_patches;
    let proto = world.prototypes_for(split).row(class_id);
    let lesion = lesion_patches(n);
    let mut slots: Vec<usize> = rng::permutation(r, n);
    slots.truncate(lesion);
    let mut patches = Array::zeros(&[n, cfg.d_v]);
    for k in 0..n {
        let base = if slots.contains(&k) {
            proto
        } else {
            world.background.row(0)
        };
        for (j, x) in patches.row_mut(k).iter_mut().enumerate() {
            *x = base[j] + cfg.noise_sigma * rng::normal(r);
        }
    }
    let meta = draw_meta(r, class_id);
    let mut tokens = signature(class_id).to_vec();
    let filler = filler_start(cfg.classes);
    while tokens.len() < cfg.desc_len - 1 {
        tokens.push(r.random_range(filler..cfg.vocab_size));
    }
    tokens.push(END);
    SampleRecord {
        id: format!("s{index:06}"),
        class_id,
        patch_features: patches,
        meta,
        description_tokens: tokens,
        split,
    }
}

/// Builds the dataset described by `cfg`. Pure in `cfg`.
///
/// The long-tailed pool of `n_total` samples is split per class into train
/// and validation (`⌊0.2·n_c⌋` validation samples); the test and OOD splits
/// add `eval_per_class` samples per class each.
pub fn generate_dataset(cfg: &DataConfig) -> Result<Dataset> {
    cfg.validate()?;
    let world = build_world(cfg);
    let counts = allocate(cfg.n_total, &class_priors(cfg.classes, cfg.imbalance_rho))?;
    let mut r = rng::stream(cfg.seed, 1);
    let mut records = Vec::with_capacity(cfg.n_total + 2 * cfg.classes * cfg.eval_per_class);
    for (c, &n_c) in counts.iter().enumerate() {
        let n_val = libm::floor(VAL_FRACTION * n_c as f64) as usize;
        for i in 0..n_c {
            let split = if i < n_c - n_val { Split::Train } else { Split::Val };
            let idx = records.len();
            records.push(draw_sample(cfg, &world, &mut r, idx, c, split));
        }
    }
    for split in [Split::Test, Split::Ood] {
        for c in 0..cfg.classes {
            for _ in 0..cfg.eval_per_class {
                let idx = records.len();
                records.push(draw_sample(cfg, &world, &mut r, idx, c, split));
            }
        }
    }
    Ok(Dataset {
        config: cfg.clone(),
        world,
        records,
    })
}

/// Per-class count of `records`.
pub fn class_counts(records: &[&SampleRecord], classes: usize) -> Vec<usize> {
    let mut n = vec![0; classes];
    for r in records {
        n[r.class_id] += 1;
    }
    n
}

/// Keeps `round(fraction · n_c)` samples of each class, chosen by a seeded
/// shuffle. Returns the kept records and the classes left with none.
pub fn subsample_stratified<'a>(
    records: &[&'a SampleRecord],
    classes: usize,
    fraction: f64,
    seed: u64,
) -> Result<(Vec<&'a SampleRecord>, Vec<usize>)> {
    if !(fraction > 0.0 && fraction <= 1.0) {
        return Err(Error::param("fraction", format!("{fraction} is outside (0, 1]")));
    }
    let mut r = rng::stream(seed, 5);
    let mut keep = vec![false; records.len()];
    let mut empty = Vec::new();
    for c in 0..classes {
        let members: Vec<usize> = (0..records.len()).filter(|&i| records[i].class_id == c).collect();
        let k = libm::round(fraction * members.len() as f64) as usize;
        if k == 0 {
            empty.push(c);
        }
        let perm = rng::permutation(&mut r, members.len());
        for &p in perm.iter().take(k) {
            keep[members[p]] = true;
        }
    }
    let kept = records
        .iter()
        .zip(&keep)
        .filter(|(_, &k)| k)
        .map(|(r, _)| *r)
        .collect();
    Ok((kept, empty))
}

/// Predicts the class whose prototype is closest to any patch.
pub fn nearest_prototype(patches: &Array, prototypes: &Array) -> usize {
    let mut best = (f64::INFINITY, 0);
    for c in 0..prototypes.rows() {
        let mu = prototypes.row(c);
        for k in 0..patches.rows() {
            let d: f64 = patches.row(k).iter().zip(mu).map(|(a, b)| (a - b) * (a - b)).sum();
            if d < best.0 {
                best = (d, c);
            }
        }
    }
    best.1
}

/// Word-level vocabulary of the metadata template.
pub struct MetaVocab {
    words: Vec<String>,
}

const TEMPLATE_WORDS: [&str; 10] = ["A", "lesion", "on", "the", "of", "a", "-year-old", "patient", ".", "<pad>"];
/// Tokens that attach to the previous word without a space.
const ATTACHED: [&str; 2] = ["-year-old", "."];

impl Default for MetaVocab {
    fn default() -> Self {
        let mut words: Vec<String> = TEMPLATE_WORDS.iter().map(|s| s.to_string()).collect();
        words.extend(SITES.iter().map(|s| s.to_string()));
        words.extend(SEXES.iter().map(|s| s.to_string()));
        words.extend((0..=MAX_AGE).map(|a| a.to_string()));
        Self { words }
    }
}

impl MetaVocab {
    pub fn len(&self) -> usize {
        self.words.len()
    }

    pub fn is_empty(&self) -> bool {
        self.words.is_empty()
    }

    pub fn id(&self, word: &str, kind: &'static str) -> Result<usize> {
        self.words
            .iter()
            .position(|w| w == word)
            .ok_or_else(|| Error::Vocabulary {
                kind,
                value: word.to_string(),
            })
    }

    pub fn word(&self, id: usize) -> Result<&str> {
        self.words.get(id).map(String::as_str).ok_or(Error::Index {
            what: "meta token",
            index: id,
            bound: self.words.len(),
        })
    }

    pub fn detokenize(&self, ids: &[usize]) -> Result<String> {
        let mut s = String::new();
        for (i, &id) in ids.iter().enumerate() {
            let w = self.word(id)?;
            if i > 0 && !ATTACHED.contains(&w) {
                s.push(' ');
            }
            s.push_str(w);
        }
        Ok(s)
    }
}

/// Length of every serialized metadata token sequence.
pub const META_LEN: usize = 12;

/// `"A lesion on the {site} of a {age}-year-old {sex} patient."` and its
/// token ids.
pub fn serialize_metadata(meta: &Meta, vocab: &MetaVocab) -> Result<(String, Vec<usize>)> {
    if !SITES.contains(&meta.site.as_str()) {
        return Err(Error::Vocabulary {
            kind: "site",
            value: meta.site.clone(),
        });
    }
    if !SEXES.contains(&meta.sex.as_str()) {
        return Err(Error::Vocabulary {
            kind: "sex",
            value: meta.sex.clone(),
        });
    }
    if meta.age > MAX_AGE {
        return Err(Error::Vocabulary {
            kind: "age",
            value: meta.age.to_string(),
        });
    }
    let age = meta.age.to_string();
    let words = [
        "A", "lesion", "on", "the", &meta.site, "of", "a", &age, "-year-old", &meta.sex, "patient", ".",
    ];
    let ids = words
        .iter()
        .map(|w| vocab.id(w, "meta word"))
        .collect::<Result<Vec<_>>>()?;
    Ok((vocab.detokenize(&ids)?, ids))
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum ExpansionMode {
    Template,
    External,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ExpansionProvider {
    pub mode: ExpansionMode,
    pub endpoint: Option<String>,
}

impl ExpansionProvider {
    pub fn template() -> Self {
        Self {
            mode: ExpansionMode::Template,
            endpoint: None,
        }
    }

    pub fn external(endpoint: impl Into<String>) -> Self {
        Self {
            mode: ExpansionMode::External,
            endpoint: Some(endpoint.into()),
        }
    }
}

/// Carries a request body to an expansion endpoint and returns the reply text.
pub trait Transport {
    fn post(&self, endpoint: &str, body: &str) -> core::result::Result<String, String>;
}

fn json_string(s: &str) -> String {
    let mut out = String::from("\"");
    for ch in s.chars() {
        match ch {
            '"' => out.push_str("\\\""),
            '\\' => out.push_str("\\\\"),
            c if (c as u32) < 0x20 => out.push_str(&format!("\\u{:04x}", c as u32)),
            c => out.push(c),
        }
    }
    out.push('"');
    out
}

/// JSON request body describing `meta`.
pub fn meta_document(meta: &Meta) -> String {
    format!(
        "{{\"site\":{},\"age\":{},\"sex\":{}}}",
        json_string(&meta.site),
        meta.age,
        json_string(&meta.sex)
    )
}

/// Expands `meta` into free text. External mode falls back to the template
/// on any transport failure or empty reply.
pub fn expand_metadata(
    meta: &Meta,
    vocab: &MetaVocab,
    provider: &ExpansionProvider,
    transport: &dyn Transport,
) -> Result<String> {
    let (template, _) = serialize_metadata(meta, vocab)?;
    let endpoint = match (&provider.mode, &provider.endpoint) {
        (ExpansionMode::Template, _) => return Ok(template),
        (ExpansionMode::External, Some(e)) => e,
        (ExpansionMode::External, None) => {
            log::warn!("external expansion requested without an endpoint; using template");
            return Ok(template);
        }
    };
    match transport.post(endpoint, &meta_document(meta)) {
        Ok(text) if !text.trim().is_empty() => Ok(text.trim().to_string()),
        Ok(_) => {
            log::warn!("expansion endpoint {endpoint} returned an empty body; using template");
            Ok(template)
        }
        Err(e) => {
            log::warn!("expansion endpoint {endpoint} failed ({e}); using template");
            Ok(template)
        }
    }
}
