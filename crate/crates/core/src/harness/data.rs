//! Synthetic person/caption datasets: attribute sampling, region rendering,
//! templated captions, confuser families and identity splits.

use std::collections::BTreeSet;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::catalog::{Attributes, Catalog, ATTRIBUTE_SLOTS, DEFAULT_PALETTE};
use crate::encoders::{read_captions_jsonl, write_captions_jsonl, Caption, ImageGrid, Tagger};
use crate::error::{Error, Result};
use crate::io::{ByteReader, ByteWriter};

pub const IMAGE_MAGIC: &[u8; 8] = b"MEFAIMG1";
pub const IMAGE_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SyntheticSpec {
    pub n_identities: usize,
    pub images_per_identity: usize,
    pub captions_per_image: usize,
    pub catalog: Catalog,
    /// Amplitude of uniform pixel noise.
    pub noise: f64,
    /// Fraction of identities that copy another identity with one slot changed.
    pub confuser_rate: f64,
    pub seed: u64,
    pub height: usize,
    pub width: usize,
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        SyntheticSpec {
            n_identities: 200,
            images_per_identity: 4,
            captions_per_image: 2,
            catalog: Catalog::default(),
            noise: 0.1,
            confuser_rate: 0.2,
            seed: 0,
            height: 32,
            width: 32,
        }
    }
}

impl SyntheticSpec {
    pub fn validate(&self) -> Result<()> {
        if self.n_identities == 0 || self.images_per_identity == 0 || self.captions_per_image == 0 {
            return Err(Error::Input("identity, image and caption counts must be at least 1".into()));
        }
        if !(0.0..1.0).contains(&self.noise) {
            return Err(Error::Input(format!("noise must lie in [0, 1), got {}", self.noise)));
        }
        if !(0.0..1.0).contains(&self.confuser_rate) {
            return Err(Error::Input(format!(
                "confuser rate must lie in [0, 1), got {}",
                self.confuser_rate
            )));
        }
        if self.height < 16 || self.width < 16 {
            return Err(Error::Input(format!(
                "images must be at least 16x16, got {}x{}",
                self.height, self.width
            )));
        }
        self.catalog.validate()
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct IdentityRecord {
    pub id: u32,
    pub attributes: Attributes,
    /// Identities derived from one base identity share a family.
    pub family: u32,
    pub confuser_of: Option<u32>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub spec: SyntheticSpec,
    pub identities: Vec<IdentityRecord>,
    pub images: Vec<ImageGrid>,
    /// Each caption's `image_index` points into `images`.
    pub captions: Vec<Caption>,
}

/// Rendering colors outside the catalog palette.
const SKIN: [f32; 3] = [0.9, 0.75, 0.6];
const HAIR: [f32; 3] = [0.3, 0.2, 0.1];
const SHOE: [f32; 3] = [0.15, 0.15, 0.15];
const BACKGROUND: [f32; 3] = [0.5, 0.5, 0.5];

pub fn color_rgb(index: usize) -> [f32; 3] {
    if index < DEFAULT_PALETTE.len() {
        return DEFAULT_PALETTE[index];
    }
    let h = (index as f32 * 0.618_034).fract() * 6.0;
    let x = 1.0 - (h % 2.0 - 1.0).abs();
    match h as usize {
        0 => [1.0, x, 0.0],
        1 => [x, 1.0, 0.0],
        2 => [0.0, 1.0, x],
        3 => [0.0, x, 1.0],
        4 => [x, 0.0, 1.0],
        _ => [1.0, 0.0, x],
    }
}

/// Canvas addressed in 32x32 design units.
struct Canvas {
    img: ImageGrid,
}

impl Canvas {
    fn fill(&mut self, y0: usize, y1: usize, x0: usize, x1: usize, rgb: [f32; 3]) {
        self.fill_with(y0, y1, x0, x1, |_, _| rgb);
    }

    fn fill_with(
        &mut self,
        y0: usize,
        y1: usize,
        x0: usize,
        x1: usize,
        f: impl Fn(usize, usize) -> [f32; 3],
    ) {
        let (h, w) = (self.img.height, self.img.width);
        let (py0, py1) = (y0 * h / 32, y1 * h / 32);
        let (px0, px1) = (x0 * w / 32, x1 * w / 32);
        for y in py0..py1 {
            for x in px0..px1 {
                let rgb = f(y * 32 / h, x * 32 / w);
                for (c, &v) in rgb.iter().enumerate().take(self.img.channels) {
                    self.img.set(y, x, c, v);
                }
            }
        }
    }
}

/// Detail color that stays visible on `rgb`: dark on light garments,
/// light on dark ones.
fn contrast(rgb: [f32; 3]) -> [f32; 3] {
    let luma = 0.3 * rgb[0] + 0.59 * rgb[1] + 0.11 * rgb[2];
    if luma > 0.5 {
        [0.1, 0.1, 0.1]
    } else {
        [0.9, 0.9, 0.9]
    }
}

/// Noise-free rendering of one identity. Every slot owns fixed regions:
/// gender the hair, garments their torso and leg boxes, the action the shoe
/// positions and the accessory its own box.
pub fn render_attributes(a: &Attributes, height: usize, width: usize, identity_id: u32) -> ImageGrid {
    let mut cv = Canvas {
        img: ImageGrid::zeros(height, width, 3, identity_id),
    };
    cv.fill(0, 32, 0, 32, BACKGROUND);
    cv.fill(2, 8, 13, 19, SKIN);
    if a.gender % 2 == 0 {
        cv.fill(1, 3, 13, 19, HAIR);
    } else {
        cv.fill(1, 3, 12, 20, HAIR);
        cv.fill(3, 8, 11, 13, HAIR);
        cv.fill(3, 8, 19, 21, HAIR);
    }

    let lc = color_rgb(a.lower_color);
    cv.fill(18, 30, 11, 21, SKIN);
    match a.lower % 4 {
        0 => {
            cv.fill(18, 30, 11, 15, lc);
            cv.fill(18, 30, 17, 21, lc);
        }
        1 => {
            cv.fill(18, 23, 11, 15, lc);
            cv.fill(18, 23, 17, 21, lc);
        }
        2 => cv.fill(18, 25, 9, 23, lc),
        _ => {
            cv.fill(18, 30, 11, 15, lc);
            cv.fill(18, 30, 17, 21, lc);
            cv.fill(18, 30, 13, 14, contrast(lc));
            cv.fill(18, 30, 18, 19, contrast(lc));
        }
    }

    let uc = color_rgb(a.upper_color);
    match a.upper % 4 {
        0 => {
            cv.fill(8, 18, 10, 22, uc);
            cv.fill(9, 12, 7, 10, uc);
            cv.fill(9, 12, 22, 25, uc);
        }
        1 => {
            cv.fill(8, 18, 10, 22, uc);
            cv.fill(8, 18, 15, 17, contrast(uc));
            cv.fill(9, 17, 7, 10, uc);
            cv.fill(9, 17, 22, 25, uc);
        }
        2 => {
            cv.fill(8, 22, 9, 23, uc);
            cv.fill(9, 17, 6, 9, uc);
            cv.fill(9, 17, 23, 26, uc);
        }
        _ => {
            let f = |y: usize, _: usize| if y % 3 == 0 { contrast(uc) } else { uc };
            cv.fill_with(8, 18, 10, 22, f);
            cv.fill_with(9, 17, 7, 10, f);
            cv.fill_with(9, 17, 22, 25, f);
        }
    }

    match a.action % 4 {
        0 => {
            cv.fill(30, 32, 9, 13, SHOE);
            cv.fill(30, 32, 19, 23, SHOE);
        }
        1 => {
            cv.fill(29, 32, 4, 9, SHOE);
            cv.fill(30, 32, 23, 28, SHOE);
        }
        2 => {
            cv.fill(30, 32, 11, 15, SHOE);
            cv.fill(30, 32, 17, 21, SHOE);
        }
        _ => {
            cv.fill(24, 26, 1, 9, SHOE);
            cv.fill(30, 32, 11, 21, SHOE);
        }
    }

    let ac = color_rgb(a.accessory_color);
    match a.accessory % 4 {
        0 => cv.fill(14, 21, 24, 29, ac),
        1 => cv.fill(9, 18, 2, 6, ac),
        2 => {
            cv.fill(0, 2, 11, 21, ac);
            cv.fill(2, 3, 9, 23, ac);
        }
        _ => {
            cv.fill(0, 2, 2, 30, ac);
            cv.fill(2, 13, 28, 30, ac);
        }
    }
    cv.img
}

/// Adds uniform noise in `[-noise, noise]` and clamps to `[0, 1]`.
fn add_noise(img: &mut ImageGrid, noise: f64, rng: &mut ChaCha8Rng) {
    if noise == 0.0 {
        return;
    }
    let amp = noise as f32;
    for v in img.values.iter_mut() {
        *v = (*v + rng.gen_range(-amp..=amp)).clamp(0.0, 1.0);
    }
}

const TEMPLATES: [&str; 4] = [
    "a {g} wearing a {uc} {u} and {lc} {l} is {act} with a {ac} {a} .",
    "the {g} in a {uc} {u} and {lc} {l} is {act} with a {ac} {a} .",
    "a {g} with a {ac} {a} is {act} , wearing a {uc} {u} and {lc} {l} .",
    "this {g} is {act} in a {uc} {u} and {lc} {l} , with a {ac} {a} .",
];

/// Templated description; `variant` selects one of four sentence shapes.
pub fn describe(a: &Attributes, catalog: &Catalog, variant: usize, identity_id: u32) -> Result<Caption> {
    let c = &catalog.colors;
    let text = TEMPLATES[variant % TEMPLATES.len()]
        .replace("{uc}", &c[a.upper_color])
        .replace("{lc}", &c[a.lower_color])
        .replace("{ac}", &c[a.accessory_color])
        .replace("{act}", &catalog.actions[a.action])
        .replace("{g}", &catalog.genders[a.gender])
        .replace("{u}", &catalog.uppers[a.upper])
        .replace("{l}", &catalog.lowers[a.lower])
        .replace("{a}", &catalog.accessories[a.accessory]);
    let tokens = crate::encoders::tokenize(&text);
    let tagger = Tagger::new(
        catalog.adjective_words().map(str::to_string),
        catalog.verb_words().map(str::to_string),
    );
    let tags = tagger.tag(&tokens);
    Caption::new(tokens, tags, identity_id)
}

fn sample_attributes(rng: &mut ChaCha8Rng, sizes: &[usize; ATTRIBUTE_SLOTS]) -> Attributes {
    let mut a = [0; ATTRIBUTE_SLOTS];
    for (v, &s) in a.iter_mut().zip(sizes) {
        *v = rng.gen_range(0..s);
    }
    Attributes::from_array(a)
}

fn sample_identities(spec: &SyntheticSpec, rng: &mut ChaCha8Rng) -> Result<Vec<IdentityRecord>> {
    let n = spec.n_identities;
    let sizes = spec.catalog.slot_sizes();
    if spec.catalog.combinations() < n as u128 {
        return Err(Error::Input(format!(
            "catalog has {} attribute combinations, fewer than {n} identities",
            spec.catalog.combinations()
        )));
    }
    let n_conf = (spec.confuser_rate * n as f64).round() as usize;
    let n_base = n - n_conf;
    let mut out: Vec<IdentityRecord> = Vec::with_capacity(n);
    let budget = 1000 + 200 * n;
    let mut attempts = 0;
    while out.len() < n_base {
        attempts += 1;
        if attempts > budget {
            return Err(Error::Input(format!(
                "catalog too small: only {} of {n_base} identities differ pairwise in two slots",
                out.len()
            )));
        }
        let a = sample_attributes(rng, &sizes);
        if out.iter().all(|r| r.attributes.distance(&a) >= 2) {
            let id = out.len() as u32;
            out.push(IdentityRecord {
                id,
                attributes: a,
                family: id,
                confuser_of: None,
            });
        }
    }
    let variable: Vec<usize> = (0..ATTRIBUTE_SLOTS).filter(|&s| sizes[s] > 1).collect();
    if n_conf > 0 && variable.is_empty() {
        return Err(Error::Input("catalog has no slot with two values for confusers".into()));
    }
    let mut parents: Vec<usize> = (0..n_base).collect();
    parents.shuffle(rng);
    for c in 0..n_conf {
        let parent = out[parents[c % n_base]].clone();
        let mut tries = 0;
        loop {
            tries += 1;
            if tries > 1000 {
                return Err(Error::Input("catalog too small to place a confuser".into()));
            }
            let mut arr = parent.attributes.to_array();
            let slot = variable[rng.gen_range(0..variable.len())];
            let v = rng.gen_range(0..sizes[slot] - 1);
            arr[slot] = if v >= arr[slot] { v + 1 } else { v };
            let a = Attributes::from_array(arr);
            if out.iter().all(|r| r.attributes != a) {
                let id = out.len() as u32;
                out.push(IdentityRecord {
                    id,
                    attributes: a,
                    family: parent.family,
                    confuser_of: Some(parent.id),
                });
                break;
            }
        }
    }
    Ok(out)
}

pub(crate) fn mix(seed: u64, a: u64, b: u64) -> u64 {
    let mut x = seed ^ a.wrapping_mul(0x9E37_79B9_7F4A_7C15) ^ b.wrapping_mul(0xC2B2_AE3D_27D4_EB4F);
    x ^= x >> 31;
    x = x.wrapping_mul(0xBF58_476D_1CE4_E5B9);
    x ^ (x >> 29)
}

pub fn generate_dataset(spec: &SyntheticSpec) -> Result<Dataset> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let identities = sample_identities(spec, &mut rng)?;
    let mut images = Vec::new();
    let mut captions = Vec::new();
    for rec in &identities {
        let clean = render_attributes(&rec.attributes, spec.height, spec.width, rec.id);
        for i in 0..spec.images_per_identity {
            let mut img = clean.clone();
            let mut noise_rng = ChaCha8Rng::seed_from_u64(mix(spec.seed, rec.id as u64, i as u64));
            add_noise(&mut img, spec.noise, &mut noise_rng);
            let image_index = images.len();
            images.push(img);
            for c in 0..spec.captions_per_image {
                let variant = i * spec.captions_per_image + c;
                let mut cap = describe(&rec.attributes, &spec.catalog, variant, rec.id)?;
                cap.image_index = Some(image_index);
                captions.push(cap);
            }
        }
    }
    Ok(Dataset {
        spec: spec.clone(),
        identities,
        images,
        captions,
    })
}

#[derive(Serialize, Deserialize)]
struct DatasetMeta {
    spec: SyntheticSpec,
    identities: Vec<IdentityRecord>,
}

impl Dataset {
    pub fn identity_ids(&self) -> Vec<u32> {
        self.identities.iter().map(|r| r.id).collect()
    }

    /// Restriction to `ids`, with caption image indices renumbered.
    pub fn subset(&self, ids: &BTreeSet<u32>) -> Dataset {
        let mut remap = vec![usize::MAX; self.images.len()];
        let mut images = Vec::new();
        for (i, img) in self.images.iter().enumerate() {
            if ids.contains(&img.identity_id) {
                remap[i] = images.len();
                images.push(img.clone());
            }
        }
        let captions = self
            .captions
            .iter()
            .filter(|c| ids.contains(&c.identity_id))
            .map(|c| {
                let mut c = c.clone();
                c.image_index = c.image_index.map(|i| remap[i]).filter(|&i| i != usize::MAX);
                c
            })
            .collect();
        Dataset {
            spec: self.spec.clone(),
            identities: self
                .identities
                .iter()
                .filter(|r| ids.contains(&r.id))
                .cloned()
                .collect(),
            images,
            captions,
        }
    }

    /// Identity-disjoint `(train, held_out)` split that keeps confuser
    /// families together; whole families are drawn until `fraction` of the
    /// identities are held out.
    pub fn split(&self, fraction: f64, seed: u64) -> Result<(Dataset, Dataset)> {
        if !(fraction > 0.0 && fraction < 1.0) {
            return Err(Error::Input(format!("split fraction must lie in (0, 1), got {fraction}")));
        }
        let target = ((fraction * self.identities.len() as f64).round() as usize).max(1);
        let mut families: Vec<u32> = self
            .identities
            .iter()
            .map(|r| r.family)
            .collect::<BTreeSet<_>>()
            .into_iter()
            .collect();
        if families.len() < 2 {
            return Err(Error::Input("split needs at least two identity families".into()));
        }
        families.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
        let mut held = BTreeSet::new();
        for f in families.iter().take(families.len() - 1) {
            if held.len() >= target {
                break;
            }
            held.extend(self.identities.iter().filter(|r| r.family == *f).map(|r| r.id));
        }
        let train: BTreeSet<u32> = self
            .identities
            .iter()
            .map(|r| r.id)
            .filter(|id| !held.contains(id))
            .collect();
        Ok((self.subset(&train), self.subset(&held)))
    }

    /// Writes `images.bin`, `captions.jsonl` and `dataset.json` into `dir`.
    pub fn save(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir)?;
        std::fs::write(dir.join("images.bin"), images_to_bytes(&self.images)?)?;
        write_captions_jsonl(&dir.join("captions.jsonl"), &self.captions)?;
        let meta = DatasetMeta {
            spec: self.spec.clone(),
            identities: self.identities.clone(),
        };
        std::fs::write(dir.join("dataset.json"), serde_json::to_string_pretty(&meta)?)?;
        Ok(())
    }

    pub fn load(dir: &Path) -> Result<Dataset> {
        let meta: DatasetMeta = serde_json::from_str(&std::fs::read_to_string(dir.join("dataset.json"))?)?;
        let images = images_from_bytes(&std::fs::read(dir.join("images.bin"))?)?;
        let captions = read_captions_jsonl(&dir.join("captions.jsonl"))?;
        for c in &captions {
            if let Some(i) = c.image_index {
                if i >= images.len() {
                    return Err(Error::Input(format!(
                        "caption refers to image {i}, only {} images",
                        images.len()
                    )));
                }
            }
        }
        Ok(Dataset {
            spec: meta.spec,
            identities: meta.identities,
            images,
            captions,
        })
    }
}

/// Header: magic, version, count, height, width, channels; then per image
/// its identity and `f32` values.
pub fn images_to_bytes(images: &[ImageGrid]) -> Result<Vec<u8>> {
    let (h, w, c) = images
        .first()
        .map(|i| (i.height, i.width, i.channels))
        .unwrap_or((0, 0, 0));
    if images.iter().any(|i| (i.height, i.width, i.channels) != (h, w, c)) {
        return Err(Error::Shape("images in one file must share dimensions".into()));
    }
    let mut out = ByteWriter::new();
    out.bytes(IMAGE_MAGIC);
    out.u32(IMAGE_VERSION);
    for v in [images.len(), h, w, c] {
        out.u32(v as u32);
    }
    for img in images {
        out.u32(img.identity_id);
        img.values.iter().for_each(|&v| out.f32(v));
    }
    Ok(out.into_inner())
}

pub fn images_from_bytes(buf: &[u8]) -> Result<Vec<ImageGrid>> {
    let mut r = ByteReader::new(buf);
    r.magic(IMAGE_MAGIC)?;
    r.version(IMAGE_VERSION)?;
    let n = r.u32()? as usize;
    let (h, w, c) = (r.u32()? as usize, r.u32()? as usize, r.u32()? as usize);
    let mut out = Vec::with_capacity(n.min(1 << 20));
    for _ in 0..n {
        let id = r.u32()?;
        let at = r.offset();
        let mut values = Vec::with_capacity(h * w * c);
        for _ in 0..h * w * c {
            values.push(r.f32()?);
        }
        let img = ImageGrid::new(h, w, c, values, id).map_err(|e| Error::Format {
            offset: at,
            reason: e.to_string(),
        })?;
        out.push(img);
    }
    r.finish()?;
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::encoders::Pos;

    fn small(n: usize, confusers: f64, noise: f64) -> SyntheticSpec {
        SyntheticSpec {
            n_identities: n,
            confuser_rate: confusers,
            noise,
            seed: 3,
            ..SyntheticSpec::default()
        }
    }

    #[test]
    fn same_seed_gives_identical_datasets() {
        let a = generate_dataset(&small(30, 0.2, 0.0)).unwrap();
        let b = generate_dataset(&small(30, 0.2, 0.0)).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.images.len(), 120);
        assert_eq!(a.captions.len(), 240);
        let c = generate_dataset(&small(30, 0.2, 0.1)).unwrap();
        assert_eq!(c, generate_dataset(&small(30, 0.2, 0.1)).unwrap());
    }

    /// Upper-garment box and sleeves in design units.
    fn in_upper_region(y: usize, x: usize) -> bool {
        (8..22).contains(&y) && (6..26).contains(&x)
    }

    #[test]
    fn shirt_color_only_changes_the_upper_region() {
        let a = Attributes::from_array([0, 0, 1, 0, 2, 0, 3, 0]);
        let mut b = a;
        b.upper_color = 5;
        for (upper, accessory) in [(0, 0), (1, 1), (2, 2), (3, 3)] {
            let mut a = a;
            let mut b = b;
            a.upper = upper;
            b.upper = upper;
            a.accessory = accessory;
            b.accessory = accessory;
            let ia = render_attributes(&a, 32, 32, 0);
            let ib = render_attributes(&b, 32, 32, 0);
            let mut changed = 0;
            for y in 0..32 {
                for x in 0..32 {
                    let differs = (0..3).any(|c| ia.get(y, x, c) != ib.get(y, x, c));
                    if differs {
                        changed += 1;
                        assert!(in_upper_region(y, x), "pixel ({y},{x}) changed");
                    }
                }
            }
            assert!(changed > 40);
        }
    }

    #[test]
    fn every_slot_changes_the_rendering() {
        let base = Attributes::from_array([0; ATTRIBUTE_SLOTS]);
        let img = render_attributes(&base, 32, 32, 0);
        for slot in 0..ATTRIBUTE_SLOTS {
            let mut arr = base.to_array();
            arr[slot] = 1;
            let other = render_attributes(&Attributes::from_array(arr), 32, 32, 0);
            assert_ne!(img.values, other.values, "slot {slot}");
        }
    }

    #[test]
    fn caption_tags_follow_catalog_roles() {
        let ds = generate_dataset(&small(20, 0.2, 0.1)).unwrap();
        let cat = Catalog::default();
        for cap in &ds.captions {
            for (tok, tag) in cap.tokens.iter().zip(&cap.pos_tags) {
                if cat.colors.contains(tok) {
                    assert_eq!(*tag, Pos::Adj);
                } else if cat.actions.contains(tok) {
                    assert_eq!(*tag, Pos::Verb);
                } else if cat.noun_words().any(|w| w == tok) {
                    assert_eq!(*tag, Pos::Noun);
                } else {
                    assert!(!tag.is_content(), "`{tok}` tagged {tag:?}");
                }
            }
            let img = &ds.images[cap.image_index.unwrap()];
            assert_eq!(img.identity_id, cap.identity_id);
        }
    }

    #[test]
    fn without_confusers_identities_differ_in_two_slots() {
        for seed in 0..5 {
            let spec = SyntheticSpec {
                seed,
                ..small(200, 0.0, 0.1)
            };
            let ds = generate_dataset(&spec).unwrap();
            for (i, a) in ds.identities.iter().enumerate() {
                for b in &ds.identities[i + 1..] {
                    assert!(a.attributes.distance(&b.attributes) >= 2);
                }
            }
        }
    }

    #[test]
    fn confusers_differ_from_their_parent_in_one_slot() {
        let ds = generate_dataset(&small(200, 0.2, 0.1)).unwrap();
        let conf: Vec<_> = ds.identities.iter().filter(|r| r.confuser_of.is_some()).collect();
        assert_eq!(conf.len(), 40);
        for r in conf {
            let p = &ds.identities[r.confuser_of.unwrap() as usize];
            assert_eq!(p.attributes.distance(&r.attributes), 1);
            assert_eq!(p.family, r.family);
        }
    }

    #[test]
    fn tiny_catalog_is_rejected() {
        let mut spec = small(10, 0.0, 0.0);
        spec.catalog = Catalog {
            genders: vec!["man".into()],
            uppers: vec!["shirt".into()],
            lowers: vec!["pants".into()],
            accessories: vec!["bag".into()],
            colors: vec!["red".into(), "blue".into()],
            actions: vec!["walking".into()],
        };
        assert!(matches!(generate_dataset(&spec), Err(Error::Input(_))));
        spec.n_identities = 100;
        assert!(matches!(generate_dataset(&spec), Err(Error::Input(_))));
    }

    #[test]
    fn invalid_specs_are_rejected() {
        assert!(generate_dataset(&small(0, 0.0, 0.0)).is_err());
        assert!(generate_dataset(&small(5, 0.0, 1.0)).is_err());
    }

    #[test]
    fn split_is_identity_disjoint_and_family_closed() {
        let ds = generate_dataset(&small(200, 0.2, 0.1)).unwrap();
        let (train, test) = ds.split(0.1, 7).unwrap();
        let tr: BTreeSet<u32> = train.identity_ids().into_iter().collect();
        let te: BTreeSet<u32> = test.identity_ids().into_iter().collect();
        assert!(tr.is_disjoint(&te));
        assert_eq!(tr.len() + te.len(), 200);
        assert!((20..=22).contains(&te.len()));
        for r in &test.identities {
            assert!(!train.identities.iter().any(|t| t.family == r.family));
        }
        for c in &test.captions {
            assert_eq!(test.images[c.image_index.unwrap()].identity_id, c.identity_id);
        }
        assert_eq!(ds.split(0.1, 7).unwrap().1, test);
    }

    #[test]
    fn dataset_round_trips_through_disk() {
        let ds = generate_dataset(&small(6, 0.2, 0.1)).unwrap();
        let dir = tempfile::tempdir().unwrap();
        ds.save(dir.path()).unwrap();
        assert_eq!(Dataset::load(dir.path()).unwrap(), ds);
        let mut bytes = std::fs::read(dir.path().join("images.bin")).unwrap();
        bytes.truncate(bytes.len() - 3);
        assert!(matches!(images_from_bytes(&bytes), Err(Error::Format { .. })));
        bytes[0] = b'X';
        assert!(matches!(images_from_bytes(&bytes), Err(Error::Format { offset: 0, .. })));
    }
}
