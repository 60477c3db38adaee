use std::f64::consts::PI;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use super::{Dataset, FaceBox, ManipKind, ManipSet, Role, Sample, Vocab};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum GeneratorError {
    #[error("invalid generator config: {0}")]
    InvalidConfig(String),
    #[error("text swap requested but the vocabulary has fewer than two entities")]
    MissingEntities,
    #[error("text attribute edits requested but the vocabulary has no sentiment pairs")]
    MissingSentiment,
    #[error("face box {0:?} has zero area")]
    DegenerateBox(FaceBox),
    #[error("face box {0:?} lies outside the {1}x{2} image")]
    BoxOutsideImage(FaceBox, usize, usize),
    #[error("{0:?} is not an image manipulation")]
    NotImageKind(ManipKind),
    #[error("{0:?} is not a text manipulation")]
    NotTextKind(ManipKind),
    #[error("{kind:?} precondition unmet: {reason}")]
    Precondition { kind: ManipKind, reason: String },
}

/// Number of primary samples per category.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CategoryCounts {
    pub real: usize,
    pub face_swap: usize,
    pub face_attribute: usize,
    pub text_swap: usize,
    pub text_attribute: usize,
    pub mixed: usize,
}

// Reference corpus composition: 77,426 real pairs and 152,574 manipulated
// pairs; manipulated pairs split across FS/FA/TS/TA/mixed in these ratios.
const REAL_PAIRS: usize = 77_426;
const FAKE_PAIRS: usize = 152_574;
const FAKE_MIX: [usize; 5] = [66_722, 56_411, 43_546, 18_588, 32_693];

/// Splits `total` proportionally to `weights` with largest-remainder rounding.
/// Ties go to the earlier weight.
fn apportion(total: usize, weights: &[usize]) -> Vec<usize> {
    let sum: usize = weights.iter().sum();
    if sum == 0 {
        return vec![0; weights.len()];
    }
    let mut out: Vec<usize> = weights.iter().map(|&w| total * w / sum).collect();
    let mut rem: Vec<(usize, usize)> = weights.iter().enumerate().map(|(i, &w)| (total * w % sum, i)).collect();
    rem.sort_by(|a, b| b.0.cmp(&a.0).then(a.1.cmp(&b.1)));
    let short = total - out.iter().sum::<usize>();
    for &(_, i) in rem.iter().take(short) {
        out[i] += 1;
    }
    out
}

impl CategoryCounts {
    /// Reference-corpus mix rescaled to `total` primary samples.
    pub fn proportional(total: usize) -> Self {
        let rf = apportion(total, &[REAL_PAIRS, FAKE_PAIRS]);
        let f = apportion(rf[1], &FAKE_MIX);
        Self {
            real: rf[0],
            face_swap: f[0],
            face_attribute: f[1],
            text_swap: f[2],
            text_attribute: f[3],
            mixed: f[4],
        }
    }

    pub fn fakes(&self) -> usize {
        self.face_swap + self.face_attribute + self.text_swap + self.text_attribute + self.mixed
    }

    pub fn total(&self) -> usize {
        self.real + self.fakes()
    }
}

/// Magnitudes of the procedural manipulations.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Strength {
    /// Half-width of the uniform artifact noise a face swap leaves in the box.
    pub fs_noise: f64,
    /// A swap is redrawn until the mean absolute in-box change reaches this.
    pub fs_min_signal: f64,
    /// Overall scale of a face attribute edit; 0 leaves the image untouched.
    pub fa_strength: f64,
    pub fa_brightness: f64,
    pub fa_zoom: f64,
    pub sensor_noise: f64,
}

impl Default for Strength {
    fn default() -> Self {
        Self {
            fs_noise: 0.1,
            fs_min_signal: 0.05,
            fa_strength: 1.0,
            fa_brightness: 0.22,
            fa_zoom: 0.35,
            sensor_noise: 0.01,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GeneratorConfig {
    pub seed: u64,
    /// Prefix of every sample id; distinct splits get independent samples.
    pub split: String,
    pub counts: CategoryCounts,
    pub image_size: usize,
    pub max_len: usize,
    pub min_len: usize,
    pub min_face: usize,
    pub max_face: usize,
    pub vocab: Vocab,
    pub strength: Strength,
}

impl Default for GeneratorConfig {
    fn default() -> Self {
        Self {
            seed: 7,
            split: "train".into(),
            counts: CategoryCounts::proportional(2000),
            image_size: 32,
            max_len: 16,
            min_len: 7,
            min_face: 12,
            max_face: 18,
            vocab: Vocab::default(),
            strength: Strength::default(),
        }
    }
}

impl GeneratorConfig {
    pub fn with_total(seed: u64, split: &str, total: usize) -> Self {
        Self {
            seed,
            split: split.into(),
            counts: CategoryCounts::proportional(total),
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<(), GeneratorError> {
        let bad = |m: String| Err(GeneratorError::InvalidConfig(m));
        self.vocab.validate().map_err(GeneratorError::InvalidConfig)?;
        if self.image_size == 0 || self.min_face == 0 || self.min_face > self.max_face {
            return bad(format!(
                "face size range {}..={} in a {} image",
                self.min_face, self.max_face, self.image_size
            ));
        }
        if self.max_face > self.image_size {
            return bad("face larger than image".into());
        }
        if self.min_len < 5 || self.min_len > self.max_len {
            return bad(format!("sentence length range {}..={}", self.min_len, self.max_len));
        }
        let c = &self.counts;
        if self.vocab.entities < 2 && (c.text_swap > 0 || c.mixed > 0) {
            return Err(GeneratorError::MissingEntities);
        }
        if self.vocab.sentiment_pairs == 0 && (c.text_attribute > 0 || c.mixed > 0) {
            return Err(GeneratorError::MissingSentiment);
        }
        let s = &self.strength;
        if [
            s.fs_noise,
            s.fs_min_signal,
            s.fa_strength,
            s.fa_brightness,
            s.fa_zoom,
            s.sensor_noise,
        ]
        .iter()
        .any(|v| !v.is_finite() || *v < 0.0)
        {
            return bad("strength parameters must be finite and non-negative".into());
        }
        Ok(())
    }
}

fn fnv1a(bytes: &[u8]) -> u64 {
    bytes.iter().fold(0xcbf2_9ce4_8422_2325u64, |h, &b| {
        (h ^ b as u64).wrapping_mul(0x0000_0100_0000_01b3)
    })
}

/// Independent stream for `(seed, key)`; identical on every platform.
fn substream(seed: u64, key: &str) -> ChaCha8Rng {
    let mut s = [0u8; 32];
    s[..8].copy_from_slice(&seed.to_le_bytes());
    s[8..16].copy_from_slice(&fnv1a(key.as_bytes()).to_le_bytes());
    s[16..24].copy_from_slice(&(key.len() as u64).to_le_bytes());
    s[24..].copy_from_slice(b"m4synth!");
    ChaCha8Rng::from_seed(s)
}

#[derive(Clone, Copy, Debug)]
struct Identity {
    freq: f64,
    phase: f64,
    ox: f64,
    oy: f64,
}

impl Identity {
    fn of_entity(e: usize) -> Self {
        let frac = |x: f64| x - x.floor();
        let e = e as f64 + 1.0;
        Self {
            freq: 0.9 + 1.6 * frac(e * 0.618_034),
            phase: 2.0 * PI * frac(e * 0.381_966),
            ox: 0.3 * (frac(e * 0.754_878) - 0.5),
            oy: 0.3 * (frac(e * 0.569_840) - 0.5),
        }
    }

    fn random<R: Rng>(rng: &mut R) -> Self {
        Self {
            freq: rng.gen_range(0.9..2.5),
            phase: rng.gen_range(0.0..2.0 * PI),
            ox: rng.gen_range(-0.15..0.15),
            oy: rng.gen_range(-0.15..0.15),
        }
    }
}

/// Concentric ring blob filling the box.
fn render_face(image: &mut [f64], width: usize, b: &FaceBox, id: &Identity) {
    let (hw, hh) = (b.w as f64 / 2.0, b.h as f64 / 2.0);
    for py in b.y..b.y + b.h {
        for px in b.x..b.x + b.w {
            let u = (px as f64 + 0.5 - b.x as f64 - hw) / hw - id.ox;
            let v = (py as f64 + 0.5 - b.y as f64 - hh) / hh - id.oy;
            let r = (u * u + v * v).sqrt();
            image[py * width + px] = 0.45 + 0.25 * (2.0 * PI * id.freq * r + id.phase).cos();
        }
    }
}

fn check_box(b: &FaceBox, width: usize, height: usize) -> Result<(), GeneratorError> {
    if b.w == 0 || b.h == 0 {
        return Err(GeneratorError::DegenerateBox(*b));
    }
    if !b.fits(width, height) {
        return Err(GeneratorError::BoxOutsideImage(*b, width, height));
    }
    Ok(())
}

/// Bilinear sample at continuous pixel coordinates, clamped to `[lo, hi]` per axis.
fn bilinear(image: &[f64], width: usize, x: f64, y: f64, lo: (f64, f64), hi: (f64, f64)) -> f64 {
    let x = x.clamp(lo.0, hi.0);
    let y = y.clamp(lo.1, hi.1);
    let (x0, y0) = (x.floor(), y.floor());
    let (fx, fy) = (x - x0, y - y0);
    let (x0, y0) = (x0 as usize, y0 as usize);
    let x1 = if fx > 0.0 { x0 + 1 } else { x0 };
    let y1 = if fy > 0.0 { y0 + 1 } else { y0 };
    let p = |xx: usize, yy: usize| image[yy * width + xx];
    let top = p(x0, y0) * (1.0 - fx) + p(x1, y0) * fx;
    let bot = p(x0, y1) * (1.0 - fx) + p(x1, y1) * fx;
    top * (1.0 - fy) + bot * fy
}

/// Applies an image manipulation inside `face_box`; pixels outside the box are
/// returned unchanged.
pub fn manipulate_image<R: Rng>(
    image: &[f64],
    width: usize,
    height: usize,
    face_box: &FaceBox,
    kind: ManipKind,
    strength: &Strength,
    rng: &mut R,
) -> Result<Vec<f64>, GeneratorError> {
    check_box(face_box, width, height)?;
    let b = face_box;
    match kind {
        ManipKind::FS => {
            let area = (b.w * b.h) as f64;
            let mut out = image.to_vec();
            // Redraw until the swap is visible enough; a handful of tries suffices.
            for attempt in 0..64 {
                render_face(&mut out, width, b, &Identity::random(rng));
                for py in b.y..b.y + b.h {
                    for px in b.x..b.x + b.w {
                        let n = rng.gen_range(-strength.fs_noise..=strength.fs_noise);
                        let v = &mut out[py * width + px];
                        *v = (*v + n).clamp(0.0, 1.0);
                    }
                }
                let change: f64 = (b.y..b.y + b.h)
                    .flat_map(|py| (b.x..b.x + b.w).map(move |px| py * width + px))
                    .map(|i| (out[i] - image[i]).abs())
                    .sum::<f64>()
                    / area;
                if change >= strength.fs_min_signal || attempt == 63 {
                    break;
                }
            }
            Ok(out)
        }
        ManipKind::FA => {
            let s = strength.fa_strength;
            if s == 0.0 {
                return Ok(image.to_vec());
            }
            let zoom = 1.0 + strength.fa_zoom * s;
            let shift = strength.fa_brightness * s;
            let (cx, cy) = (b.x as f64 + b.w as f64 / 2.0, b.y as f64 + b.h as f64 / 2.0);
            let lo = (b.x as f64, b.y as f64);
            let hi = ((b.x + b.w - 1) as f64, (b.y + b.h - 1) as f64);
            let mut out = image.to_vec();
            for py in b.y..b.y + b.h {
                for px in b.x..b.x + b.w {
                    let sx = cx + (px as f64 + 0.5 - cx) / zoom - 0.5;
                    let sy = cy + (py as f64 + 0.5 - cy) / zoom - 0.5;
                    let v = bilinear(image, width, sx, sy, lo, hi) + shift;
                    out[py * width + px] = v.clamp(0.0, 1.0);
                }
            }
            Ok(out)
        }
        other => Err(GeneratorError::NotImageKind(other)),
    }
}

/// Applies a text manipulation. Returns the edited tokens and a mask marking
/// exactly the replaced positions.
pub fn manipulate_text<R: Rng>(
    tokens: &[u32],
    kind: ManipKind,
    vocab: &Vocab,
    rng: &mut R,
) -> Result<(Vec<u32>, Vec<u8>), GeneratorError> {
    let mut out = tokens.to_vec();
    let mut mask = vec![0u8; tokens.len()];
    match kind {
        ManipKind::TS => {
            let positions: Vec<usize> = (0..tokens.len())
                .filter(|&i| vocab.entity_index(tokens[i]).is_some())
                .collect();
            if positions.is_empty() {
                return Err(GeneratorError::Precondition {
                    kind,
                    reason: "no entity token".into(),
                });
            }
            if vocab.entities < 2 {
                return Err(GeneratorError::Precondition {
                    kind,
                    reason: "no alternative entity".into(),
                });
            }
            let pos = *positions.choose(rng).unwrap();
            let current = vocab.entity_index(tokens[pos]).unwrap();
            let mut new = rng.gen_range(0..vocab.entities - 1);
            if new >= current {
                new += 1;
            }
            out[pos] = vocab.entity(new);
            mask[pos] = 1;
        }
        ManipKind::TA => {
            let positions: Vec<usize> = (0..tokens.len())
                .filter(|&i| vocab.sentiment_of(tokens[i]).is_some())
                .collect();
            let Some(&pos) = positions.choose(rng) else {
                return Err(GeneratorError::Precondition {
                    kind,
                    reason: "no sentiment token".into(),
                });
            };
            out[pos] = vocab.flip_sentiment(tokens[pos]).unwrap();
            mask[pos] = 1;
        }
        other => return Err(GeneratorError::NotTextKind(other)),
    }
    Ok((out, mask))
}

/// Bilinear resize of the face box to `out_res x out_res`. Output pixel
/// centers map onto the box with half-pixel alignment, so a box the size of
/// the output is copied verbatim.
pub fn crop_face(
    image: &[f64],
    width: usize,
    height: usize,
    face_box: &FaceBox,
    out_res: usize,
) -> Result<Vec<f64>, GeneratorError> {
    check_box(face_box, width, height)?;
    let b = face_box;
    let sx = b.w as f64 / out_res as f64;
    let sy = b.h as f64 / out_res as f64;
    let lo = (b.x as f64, b.y as f64);
    let hi = ((b.x + b.w - 1) as f64, (b.y + b.h - 1) as f64);
    let mut out = Vec::with_capacity(out_res * out_res);
    for j in 0..out_res {
        for i in 0..out_res {
            let x = b.x as f64 + (i as f64 + 0.5) * sx - 0.5;
            let y = b.y as f64 + (j as f64 + 0.5) * sy - 0.5;
            out.push(bilinear(image, width, x, y, lo, hi).clamp(0.0, 1.0));
        }
    }
    Ok(out)
}

/// The unmanipulated content of sample `id`: image, padded tokens, face box.
/// A pure function of `(config.seed, id)`.
pub fn render_original(config: &GeneratorConfig, id: &str) -> (Vec<f64>, Vec<u32>, FaceBox) {
    let mut rng = substream(config.seed, id);
    let n = config.image_size;
    let v = &config.vocab;

    let positive = rng.gen_bool(0.5);
    let entity = (v.entities > 0).then(|| rng.gen_range(0..v.entities));

    // Sentence: CLS, then entity + its affiliation, sentiment + matching
    // context, generic fillers, in shuffled order.
    let len = rng.gen_range(config.min_len..=config.max_len);
    let mut body = Vec::with_capacity(len - 1);
    if let Some(e) = entity {
        body.push(v.entity(e));
        body.push(v.affiliation(e));
    }
    if v.sentiment_pairs > 0 {
        body.push(v.sentiment(rng.gen_range(0..v.sentiment_pairs), positive));
        body.push(v.context(rng.gen_range(0..v.contexts_per_polarity), positive));
    }
    while body.len() < len - 1 {
        let t = if v.generic_count() > 0 {
            v.generic(rng.gen_range(0..v.generic_count()))
        } else {
            v.context(rng.gen_range(0..v.contexts_per_polarity.max(1)), positive)
        };
        body.push(t);
    }
    body.shuffle(&mut rng);
    let mut tokens = Vec::with_capacity(config.max_len);
    tokens.push(Vocab::CLS);
    tokens.extend(body);
    tokens.resize(config.max_len, Vocab::PAD);

    // Background brightness follows the sentence polarity.
    let base = if positive { 0.66 } else { 0.3 } + rng.gen_range(-0.04..0.04);
    let (fx, fy, ph) = (
        rng.gen_range(-0.3..0.3),
        rng.gen_range(-0.3..0.3),
        rng.gen_range(0.0..2.0 * PI),
    );
    let mut image: Vec<f64> = (0..n * n)
        .map(|i| {
            let (x, y) = ((i % n) as f64, (i / n) as f64);
            base + 0.06 * (fx * x + fy * y + ph).sin()
        })
        .collect();

    let size = rng.gen_range(config.min_face..=config.max_face);
    let face_box = FaceBox {
        x: rng.gen_range(0..=n - size),
        y: rng.gen_range(0..=n - size),
        w: size,
        h: size,
    };
    let identity = match entity {
        Some(e) => Identity::of_entity(e),
        None => Identity::random(&mut rng),
    };
    render_face(&mut image, n, &face_box, &identity);
    let noise = config.strength.sensor_noise;
    for p in image.iter_mut() {
        if noise > 0.0 {
            *p += rng.gen_range(-noise..=noise);
        }
        *p = p.clamp(0.0, 1.0);
    }
    (image, tokens, face_box)
}

#[derive(Clone, Copy, Debug, PartialEq)]
enum Category {
    Real,
    Single(ManipKind),
    Mixed,
}

/// Builds a dataset with exactly `config.counts` primary samples. Fakes are
/// paired one-to-one with originals: the k-th fake with the k-th real when
/// one exists, otherwise with a dedicated `Role::Source` sample.
pub fn generate_dataset(config: &GeneratorConfig) -> Result<Dataset, GeneratorError> {
    config.validate()?;
    let c = &config.counts;
    let mut cats = Vec::with_capacity(c.total());
    cats.extend(std::iter::repeat_n(Category::Real, c.real));
    for (kind, n) in [
        (ManipKind::FS, c.face_swap),
        (ManipKind::FA, c.face_attribute),
        (ManipKind::TS, c.text_swap),
        (ManipKind::TA, c.text_attribute),
    ] {
        cats.extend(std::iter::repeat_n(Category::Single(kind), n));
    }
    cats.extend(std::iter::repeat_n(Category::Mixed, c.mixed));
    cats.shuffle(&mut substream(config.seed, &format!("{}/layout", config.split)));

    let ids: Vec<String> = (0..cats.len()).map(|i| format!("{}-{i:05}", config.split)).collect();
    let reals: Vec<usize> = (0..cats.len()).filter(|&i| cats[i] == Category::Real).collect();
    let fakes: Vec<usize> = (0..cats.len()).filter(|&i| cats[i] != Category::Real).collect();

    // originals[k] = id of the original of the k-th fake
    let mut originals = Vec::with_capacity(fakes.len());
    let mut sources = Vec::new();
    for k in 0..fakes.len() {
        if k < reals.len() {
            originals.push(ids[reals[k]].clone());
        } else {
            let sid = format!("{}-src-{:05}", config.split, k - reals.len());
            sources.push(sid.clone());
            originals.push(sid);
        }
    }
    let mut counterpart: Vec<Option<String>> = vec![None; cats.len()];
    for (k, &f) in fakes.iter().enumerate() {
        counterpart[f] = Some(originals[k].clone());
        if k < reals.len() {
            counterpart[reals[k]] = Some(ids[f].clone());
        }
    }

    let n = config.image_size;
    let real_sample = |id: &str, role: Role, cp: Option<String>| {
        let (image, tokens, face_box) = render_original(config, id);
        Sample {
            id: id.to_string(),
            role,
            width: n,
            height: n,
            grounding_mask: vec![0; tokens.len()],
            image,
            tokens,
            face_box,
            label_binary: 0,
            label_multi: ManipSet::EMPTY,
            counterpart_id: cp,
        }
    };

    let mut samples = Vec::with_capacity(cats.len() + sources.len());
    let mut fake_rank = 0;
    for (i, cat) in cats.iter().enumerate() {
        let id = &ids[i];
        let sample = match cat {
            Category::Real => real_sample(id, Role::Primary, counterpart[i].clone()),
            _ => {
                let orig_id = &originals[fake_rank];
                fake_rank += 1;
                let (image, tokens, face_box) = render_original(config, orig_id);
                let mut rng = substream(config.seed, id);
                let (img_kind, txt_kind) = match cat {
                    Category::Single(k) if k.is_image() => (Some(*k), None),
                    Category::Single(k) => (None, Some(*k)),
                    _ => {
                        let ik = if rng.gen_bool(0.5) {
                            ManipKind::FS
                        } else {
                            ManipKind::FA
                        };
                        let tk = if rng.gen_bool(0.5) {
                            ManipKind::TS
                        } else {
                            ManipKind::TA
                        };
                        (Some(ik), Some(tk))
                    }
                };
                let image = match img_kind {
                    Some(k) => manipulate_image(&image, n, n, &face_box, k, &config.strength, &mut rng)?,
                    None => image,
                };
                let (tokens, grounding_mask) = match txt_kind {
                    Some(k) => manipulate_text(&tokens, k, &config.vocab, &mut rng)?,
                    None => {
                        let len = tokens.len();
                        (tokens, vec![0; len])
                    }
                };
                Sample {
                    id: id.clone(),
                    role: Role::Primary,
                    width: n,
                    height: n,
                    image,
                    tokens,
                    face_box,
                    label_binary: 1,
                    label_multi: img_kind.into_iter().chain(txt_kind).collect(),
                    grounding_mask,
                    counterpart_id: counterpart[i].clone(),
                }
            }
        };
        samples.push(sample);
    }
    for (k, sid) in sources.iter().enumerate() {
        let fake = fakes[reals.len() + k];
        samples.push(real_sample(sid, Role::Source, Some(ids[fake].clone())));
    }
    Ok(Dataset { samples })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small(total: usize) -> GeneratorConfig {
        GeneratorConfig::with_total(11, "t", total)
    }

    #[test]
    fn proportional_counts_follow_reference_mix() {
        let c = CategoryCounts::proportional(230_000);
        assert_eq!(c.real, 77_426);
        assert_eq!(c.fakes(), 152_574);
        let c = CategoryCounts::proportional(2000);
        assert_eq!(c.total(), 2000);
        // 2000 * 77426 / 230000 = 673.27
        assert_eq!(c.real, 673);
        let fake_sum: usize = FAKE_MIX.iter().sum();
        let fs_share = c.face_swap as f64 / c.fakes() as f64;
        assert!((fs_share - 66_722.0 / fake_sum as f64).abs() < 1.0 / c.fakes() as f64);
    }

    #[test]
    fn zero_fakes_are_all_real() {
        let mut cfg = small(0);
        cfg.counts = CategoryCounts {
            real: 25,
            ..Default::default()
        };
        let ds = generate_dataset(&cfg).unwrap();
        assert_eq!(ds.len(), 25);
        for s in &ds.samples {
            assert_eq!(s.label_binary, 0);
            assert!(s.label_multi.is_empty());
            assert!(s.grounding_mask.iter().all(|&m| m == 0));
            assert!(s.counterpart_id.is_none());
        }
    }

    #[test]
    fn text_swap_without_entities_is_rejected() {
        let mut cfg = small(50);
        cfg.vocab.entities = 0;
        assert_eq!(generate_dataset(&cfg), Err(GeneratorError::MissingEntities));
    }

    #[test]
    fn counts_match_and_counterparts_form_a_matching() {
        let ds = generate_dataset(&small(300)).unwrap();
        let idx = ds.index_by_id();
        let primary: Vec<_> = ds.primary().collect();
        assert_eq!(primary.len(), 300);
        let c = CategoryCounts::proportional(300);
        assert_eq!(primary.iter().filter(|s| !s.is_fake()).count(), c.real);
        let mixed = primary.iter().filter(|s| s.label_multi.len() == 2).count();
        assert_eq!(mixed, c.mixed);
        for s in &ds.samples {
            if s.is_fake() {
                let o = &ds.samples[idx[s.counterpart_id.as_deref().unwrap()]];
                assert!(!o.is_fake());
                assert_eq!(o.counterpart_id.as_deref(), Some(s.id.as_str()));
            }
            if let Some(cp) = &s.counterpart_id {
                let other = &ds.samples[idx[cp.as_str()]];
                assert_ne!(other.is_fake(), s.is_fake());
            }
        }
        // every source exists only as an original
        for s in ds.samples.iter().filter(|s| s.role == Role::Source) {
            assert!(!s.is_fake() && s.counterpart_id.is_some());
        }
    }

    #[test]
    fn fake_differs_from_original_only_where_labelled() {
        let ds = generate_dataset(&small(200)).unwrap();
        let idx = ds.index_by_id();
        for s in ds.samples.iter().filter(|s| s.is_fake()) {
            let o = &ds.samples[idx[s.counterpart_id.as_deref().unwrap()]];
            assert_eq!(s.face_box, o.face_box);
            if !s.label_multi.has_image() {
                assert_eq!(s.image, o.image);
            }
            if !s.label_multi.has_text() {
                assert_eq!(s.tokens, o.tokens);
            }
            for (i, (a, b)) in s.tokens.iter().zip(&o.tokens).enumerate() {
                assert_eq!(a != b, s.grounding_mask[i] == 1);
            }
        }
    }

    #[test]
    fn fa_with_zero_strength_is_identity() {
        let cfg = small(1);
        let (img, _, b) = render_original(&cfg, "x");
        let s = Strength {
            fa_strength: 0.0,
            ..Strength::default()
        };
        let mut rng = substream(1, "r");
        let out = manipulate_image(&img, 32, 32, &b, ManipKind::FA, &s, &mut rng).unwrap();
        assert_eq!(out, img);
    }

    #[test]
    fn manipulation_is_local_to_the_box() {
        let cfg = small(1);
        let mut rng = substream(3, "loc");
        for i in 0..20 {
            let (img, _, b) = render_original(&cfg, &format!("s{i}"));
            for kind in [ManipKind::FS, ManipKind::FA] {
                let out = manipulate_image(&img, 32, 32, &b, kind, &Strength::default(), &mut rng).unwrap();
                for p in 0..32 * 32 {
                    if !b.contains(p % 32, p / 32) {
                        assert_eq!(out[p].to_bits(), img[p].to_bits());
                    }
                }
            }
        }
    }

    #[test]
    fn image_manipulation_rejects_bad_boxes() {
        let img = vec![0.5; 16];
        let mut rng = substream(0, "b");
        let zero = FaceBox { x: 1, y: 1, w: 0, h: 2 };
        assert!(matches!(
            manipulate_image(&img, 4, 4, &zero, ManipKind::FS, &Strength::default(), &mut rng),
            Err(GeneratorError::DegenerateBox(_))
        ));
        let outside = FaceBox { x: 3, y: 0, w: 2, h: 2 };
        assert!(matches!(
            crop_face(&img, 4, 4, &outside, 2),
            Err(GeneratorError::BoxOutsideImage(..))
        ));
        let ok = FaceBox { x: 0, y: 0, w: 2, h: 2 };
        assert!(matches!(
            manipulate_image(&img, 4, 4, &ok, ManipKind::TS, &Strength::default(), &mut rng),
            Err(GeneratorError::NotImageKind(ManipKind::TS))
        ));
    }

    #[test]
    fn text_swap_marks_the_swapped_entity() {
        let v = Vocab::default();
        let tokens = vec![v.entity(3), v.generic(1), v.generic(2)];
        let mut rng = substream(5, "ts");
        let (out, mask) = manipulate_text(&tokens, ManipKind::TS, &v, &mut rng).unwrap();
        assert_eq!(mask, vec![1, 0, 0]);
        assert_ne!(out[0], tokens[0]);
        assert!(v.entity_index(out[0]).is_some());
        assert_eq!(&out[1..], &tokens[1..]);
    }

    #[test]
    fn text_attribute_flips_polarity() {
        let v = Vocab::default();
        let tokens = vec![Vocab::CLS, v.generic(0), v.sentiment(2, true), v.context(0, true)];
        let mut rng = substream(5, "ta");
        let (out, mask) = manipulate_text(&tokens, ManipKind::TA, &v, &mut rng).unwrap();
        assert_eq!(out[2], v.sentiment(2, false));
        assert_eq!(mask, vec![0, 0, 1, 0]);
        assert_eq!(out[3], tokens[3]);
    }

    #[test]
    fn text_preconditions_name_the_category() {
        let v = Vocab::default();
        let mut rng = substream(5, "p");
        let err = manipulate_text(&[v.generic(0)], ManipKind::TS, &v, &mut rng).unwrap_err();
        assert!(err.to_string().contains("TS"));
        let err = manipulate_text(&[v.generic(0)], ManipKind::TA, &v, &mut rng).unwrap_err();
        assert!(err.to_string().contains("TA"));
    }

    #[test]
    fn crop_identity_and_constant() {
        let img: Vec<f64> = (0..64).map(|i| i as f64 / 64.0).collect();
        let full = FaceBox { x: 0, y: 0, w: 8, h: 8 };
        assert_eq!(crop_face(&img, 8, 8, &full, 8).unwrap(), img);
        let flat = vec![0.3; 64];
        let b = FaceBox { x: 1, y: 2, w: 5, h: 3 };
        assert!(crop_face(&flat, 8, 8, &b, 4)
            .unwrap()
            .iter()
            .all(|&v| (v - 0.3).abs() < 1e-15));
    }

    #[test]
    fn checkerboard_downscale_averages_neighbourhoods() {
        let n = 8;
        let img: Vec<f64> = (0..n * n).map(|i| ((i % n + i / n) % 2) as f64).collect();
        let full = FaceBox { x: 0, y: 0, w: n, h: n };
        let out = crop_face(&img, n, n, &full, n / 2).unwrap();
        // oracle: mean of each 2x2 block
        for (k, v) in out.iter().enumerate() {
            let (bx, by) = (2 * (k % (n / 2)), 2 * (k / (n / 2)));
            let mean =
                (img[by * n + bx] + img[by * n + bx + 1] + img[(by + 1) * n + bx] + img[(by + 1) * n + bx + 1]) / 4.0;
            assert_eq!(mean, 0.5);
            assert_eq!(*v, mean);
        }
    }
}
