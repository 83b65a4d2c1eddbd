//! Synthetic fine-grained dataset with known attribute locations.
//!
//! Each category is a set of attributes, one value for each of a few parts.
//! An image shows a rectangular body with one textured colour patch per
//! attribute of its category at the part's slot, plus distractor patches
//! on the background. Attributes are dropped or rendered faintly at random;
//! the per-sample scores follow the certainty mapping (faint = level 3).

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::Path;

use ndarray::Array2;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::cub::CertaintyWeights;
use super::image::RgbImage;
use super::{AttributeMask, Dataset, PixelRect, Sample, SampleInput};
use crate::error::{KerlError, Result};
use crate::graph::NodeRegistry;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SyntheticConfig {
    pub categories: usize,
    pub attributes: usize,
    pub parts: usize,
    pub parts_per_category: usize,
    pub image_size: usize,
    pub train_per_class: usize,
    pub test_per_class: usize,
    /// Uniform pixel noise amplitude as a fraction of the 8-bit range.
    pub noise: f64,
    pub drop_prob: f64,
    pub faint_prob: f64,
    pub distractors: usize,
    pub seed: u64,
}

impl Default for SyntheticConfig {
    fn default() -> Self {
        Self {
            categories: 8,
            attributes: 12,
            parts: 4,
            parts_per_category: 3,
            image_size: 64,
            train_per_class: 40,
            test_per_class: 20,
            noise: 0.1,
            drop_prob: 0.15,
            faint_prob: 0.15,
            distractors: 2,
            seed: 7,
        }
    }
}

impl SyntheticConfig {
    /// Reads a TOML config; missing keys keep their defaults.
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| KerlError::io(path, e))?;
        let cfg: Self = toml::from_str(&text).map_err(|e| {
            let line = e.span().map_or(0, |s| text[..s.start].lines().count().max(1));
            KerlError::parse(path, line, e.message().to_string())
        })?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(KerlError::Invalid(m.to_string()));
        if self.categories < 2 || self.parts == 0 || self.attributes < self.parts {
            return bad("need at least 2 categories and one attribute per part");
        }
        if self.parts_per_category == 0 || self.parts_per_category > self.parts {
            return bad("parts_per_category must be in 1..=parts");
        }
        if self.image_size < 24 {
            return bad("image_size must be at least 24");
        }
        if self.train_per_class == 0 {
            return bad("train_per_class must be positive");
        }
        let probs = [self.noise, self.drop_prob, self.faint_prob];
        if probs.iter().any(|p| !(0.0..=1.0).contains(p)) || self.drop_prob + self.faint_prob > 1.0 {
            return bad("noise and visibility probabilities must lie in [0, 1]");
        }
        Ok(())
    }

    pub fn part_of(&self, attribute: usize) -> usize {
        attribute % self.parts
    }
}

pub struct SyntheticData {
    pub config: SyntheticConfig,
    pub train: Dataset,
    pub test: Dataset,
    /// `C × A`, true where the category definition uses the attribute.
    pub incidence: Array2<bool>,
    pub bodies: BTreeMap<u64, PixelRect>,
    pub distractors: BTreeMap<u64, Vec<AttributeMask>>,
    /// Certainty level (0 = absent, 3 = faint, 4 = clear) per sample and attribute.
    pub certainty: BTreeMap<u64, Vec<u8>>,
}

const PART_NAMES: [&str; 8] = ["crown", "wing", "breast", "tail", "nape", "belly", "back", "throat"];
const TEXTURES: [&str; 3] = ["solid", "striped", "checkered"];

fn part_name(p: usize) -> String {
    if p < PART_NAMES.len() {
        PART_NAMES[p].to_string()
    } else {
        format!("part{p}")
    }
}

fn hsv(h: f64, s: f64, v: f64) -> [f64; 3] {
    let c = v * s;
    let hp = (h / 60.0) % 6.0;
    let x = c * (1.0 - (hp % 2.0 - 1.0).abs());
    let (r, g, b) = match hp as usize {
        0 => (c, x, 0.0),
        1 => (x, c, 0.0),
        2 => (0.0, c, x),
        3 => (0.0, x, c),
        4 => (x, 0.0, c),
        _ => (c, 0.0, x),
    };
    let m = v - c;
    [(r + m) * 255.0, (g + m) * 255.0, (b + m) * 255.0]
}

struct Layout {
    size: usize,
    half_w: usize,
    half_h: usize,
    center_jitter: i64,
    patch: usize,
    part_jitter: i64,
    /// Patch-centre offsets from the body centre, one per part.
    slots: Vec<(f64, f64)>,
}

impl Layout {
    fn new(cfg: &SyntheticConfig) -> Self {
        let s = cfg.image_size as f64;
        let half_w = (0.27 * s).round() as usize;
        let half_h = (0.22 * s).round() as usize;
        let patch = ((s / 8.0).round() as usize).max(3);
        let part_jitter = 1;
        let cols = (cfg.parts as f64).sqrt().ceil() as usize;
        let rows = cfg.parts.div_ceil(cols);
        let span = |half: usize, n: usize| -> Vec<f64> {
            let u = half as f64 - patch as f64 / 2.0 - part_jitter as f64 - 2.0;
            if n == 1 {
                vec![0.0]
            } else {
                (0..n).map(|i| -u + 2.0 * u * i as f64 / (n - 1) as f64).collect()
            }
        };
        let xs = span(half_w, cols);
        let ys = span(half_h, rows);
        let slots = (0..cfg.parts).map(|p| (xs[p % cols], ys[p / cols])).collect();
        Self {
            size: cfg.image_size,
            half_w,
            half_h,
            center_jitter: (cfg.image_size / 16) as i64,
            patch,
            part_jitter,
            slots,
        }
    }
}

struct Canvas {
    size: usize,
    px: Vec<[f64; 3]>,
}

impl Canvas {
    fn fill_rect(&mut self, x: usize, y: usize, w: usize, h: usize, color: impl Fn(usize, usize) -> [f64; 3], alpha: f64) {
        for yy in y..(y + h).min(self.size) {
            for xx in x..(x + w).min(self.size) {
                let c = color(xx - x, yy - y);
                let p = &mut self.px[yy * self.size + xx];
                for k in 0..3 {
                    p[k] = (1.0 - alpha) * p[k] + alpha * c[k];
                }
            }
        }
    }
}

fn attribute_color(cfg: &SyntheticConfig, a: usize) -> impl Fn(usize, usize) -> [f64; 3] {
    let base = hsv(360.0 * a as f64 / cfg.attributes as f64, 0.85, 0.95);
    let texture = (a / cfg.parts) % TEXTURES.len();
    move |x, y| {
        let dim = match texture {
            0 => false,
            1 => (y / 2) % 2 == 1,
            _ => ((x / 2) + (y / 2)) % 2 == 1,
        };
        let f = if dim { 0.45 } else { 1.0 };
        [base[0] * f, base[1] * f, base[2] * f]
    }
}

fn make_categories(cfg: &SyntheticConfig, rng: &mut ChaCha8Rng) -> Result<Vec<Vec<usize>>> {
    let by_part: Vec<Vec<usize>> = (0..cfg.parts)
        .map(|p| (0..cfg.attributes).filter(|&a| cfg.part_of(a) == p).collect())
        .collect();
    let mut cats: Vec<Vec<usize>> = Vec::with_capacity(cfg.categories);
    let mut tries = 0;
    while cats.len() < cfg.categories {
        tries += 1;
        if tries > 10_000 {
            return Err(KerlError::Invalid(format!(
                "cannot define {} distinct categories from {} attributes",
                cfg.categories, cfg.attributes
            )));
        }
        let mut parts: Vec<usize> = (0..cfg.parts).collect();
        parts.shuffle(rng);
        let mut set: Vec<usize> = parts[..cfg.parts_per_category]
            .iter()
            .map(|&p| by_part[p][rng.random_range(0..by_part[p].len())])
            .collect();
        set.sort_unstable();
        if !cats.contains(&set) {
            cats.push(set);
        }
    }
    Ok(cats)
}

/// Generates train and test splits; identical configs give identical data.
pub fn gen_synthetic(cfg: &SyntheticConfig) -> Result<SyntheticData> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let cats = make_categories(cfg, &mut rng)?;
    let categories: Vec<String> = (0..cfg.categories).map(|c| format!("species_{c:02}")).collect();
    let attributes: Vec<String> = (0..cfg.attributes)
        .map(|a| {
            let value = a / cfg.parts;
            format!("{}::{}_{value}", part_name(cfg.part_of(a)), TEXTURES[value % TEXTURES.len()])
        })
        .collect();
    let registry = NodeRegistry::new(categories, attributes)?;
    let mut incidence = Array2::from_elem((cfg.categories, cfg.attributes), false);
    for (c, set) in cats.iter().enumerate() {
        for &a in set {
            incidence[[c, a]] = true;
        }
    }

    let layout = Layout::new(cfg);
    let weights = CertaintyWeights::default();
    let mut train = Vec::new();
    let mut test = Vec::new();
    let mut bodies = BTreeMap::new();
    let mut distractors = BTreeMap::new();
    let mut certainty = BTreeMap::new();
    let mut next_id = 1u64;
    for (c, set) in cats.iter().enumerate() {
        for k in 0..cfg.train_per_class + cfg.test_per_class {
            let id = next_id;
            next_id += 1;
            let r = render(cfg, &layout, set, k == 0, &mut rng);
            let scores = r
                .levels
                .iter()
                .map(|&l| if l == 0 { Ok(0.0) } else { weights.score(true, l as usize) })
                .collect::<Result<Vec<_>>>()?;
            let sample = Sample {
                id,
                name: format!("{:03}.{}/{id:05}.ppm", c + 1, registry.categories()[c]),
                input: SampleInput::Image(r.image),
                label: c,
                attribute_scores: scores,
                bbox: Some(r.body),
                masks: r.masks,
            };
            bodies.insert(id, r.body);
            distractors.insert(id, r.distractors);
            certainty.insert(id, r.levels);
            if k < cfg.train_per_class {
                train.push(sample);
            } else {
                test.push(sample);
            }
        }
    }
    Ok(SyntheticData {
        config: cfg.clone(),
        train: Dataset {
            registry: registry.clone(),
            samples: train,
        },
        test: Dataset {
            registry,
            samples: test,
        },
        incidence,
        bodies,
        distractors,
        certainty,
    })
}

struct Rendered {
    image: RgbImage,
    body: PixelRect,
    masks: Vec<AttributeMask>,
    distractors: Vec<AttributeMask>,
    levels: Vec<u8>,
}

fn jitter(rng: &mut ChaCha8Rng, j: i64) -> i64 {
    if j == 0 {
        0
    } else {
        rng.random_range(-j..=j)
    }
}

fn render(cfg: &SyntheticConfig, l: &Layout, set: &[usize], force_visible: bool, rng: &mut ChaCha8Rng) -> Rendered {
    let s = l.size;
    let tint: [f64; 3] = std::array::from_fn(|_| rng.random_range(-20.0..20.0));
    let mut canvas = Canvas {
        size: s,
        px: vec![[100.0 + tint[0], 112.0 + tint[1], 100.0 + tint[2]]; s * s],
    };

    let cx = (s / 2) as i64 + jitter(rng, l.center_jitter);
    let cy = (s / 2) as i64 + jitter(rng, l.center_jitter);
    let bx = (cx - l.half_w as i64) as usize;
    let by = (cy - l.half_h as i64) as usize;
    let body = PixelRect {
        x: bx as f64,
        y: by as f64,
        w: (2 * l.half_w) as f64,
        h: (2 * l.half_h) as f64,
    };
    let shade: [f64; 3] = std::array::from_fn(|_| rng.random_range(-10.0..10.0));
    let body_color = [140.0 + shade[0], 115.0 + shade[1], 90.0 + shade[2]];
    canvas.fill_rect(bx, by, 2 * l.half_w, 2 * l.half_h, |_, _| body_color, 1.0);

    let mut levels = vec![0u8; cfg.attributes];
    let mut masks = Vec::new();
    for &a in set {
        let u: f64 = rng.random();
        let dx = jitter(rng, l.part_jitter);
        let dy = jitter(rng, l.part_jitter);
        let level = if force_visible || u >= cfg.drop_prob + cfg.faint_prob {
            4
        } else if u < cfg.drop_prob {
            0
        } else {
            3
        };
        if level == 0 {
            continue;
        }
        let (ox, oy) = l.slots[cfg.part_of(a)];
        let x = (cx as f64 + ox - l.patch as f64 / 2.0).round() as i64 + dx;
        let y = (cy as f64 + oy - l.patch as f64 / 2.0).round() as i64 + dy;
        let (x, y) = (x as usize, y as usize);
        let alpha = if level == 4 { 1.0 } else { 0.5 };
        canvas.fill_rect(x, y, l.patch, l.patch, attribute_color(cfg, a), alpha);
        levels[a] = level;
        masks.push(AttributeMask {
            attribute: a,
            rect: PixelRect {
                x: x as f64,
                y: y as f64,
                w: l.patch as f64,
                h: l.patch as f64,
            },
        });
    }

    let mut placed: Vec<AttributeMask> = Vec::new();
    let keep_out = PixelRect {
        x: body.x - 1.0,
        y: body.y - 1.0,
        w: body.w + 2.0,
        h: body.h + 2.0,
    };
    for _ in 0..cfg.distractors {
        let a = rng.random_range(0..cfg.attributes);
        for _ in 0..100 {
            let x = rng.random_range(0..=s - l.patch);
            let y = rng.random_range(0..=s - l.patch);
            let rect = PixelRect {
                x: x as f64,
                y: y as f64,
                w: l.patch as f64,
                h: l.patch as f64,
            };
            if rect.intersect(&keep_out) == 0.0 && placed.iter().all(|d| d.rect.intersect(&rect) == 0.0) {
                canvas.fill_rect(x, y, l.patch, l.patch, attribute_color(cfg, a), 1.0);
                placed.push(AttributeMask { attribute: a, rect });
                break;
            }
        }
    }

    let gain: f64 = rng.random_range(0.85..1.15);
    let amp = cfg.noise * 255.0;
    let mut image = RgbImage::new(s, s);
    for (i, p) in canvas.px.iter().enumerate() {
        for k in 0..3 {
            let n = if amp > 0.0 { rng.random_range(-amp..amp) } else { 0.0 };
            image.data[i * 3 + k] = (p[k] * gain + n).round().clamp(0.0, 255.0) as u8;
        }
    }
    Rendered {
        image,
        body,
        masks,
        distractors: placed,
        levels,
    }
}

/// Writes the data in the CUB directory layout, with PPM images and an
/// `attribute_regions.txt` file holding the ground-truth patches.
pub fn write_cub_layout(data: &SyntheticData, dir: &Path) -> Result<()> {
    let io = |p: &Path, e| KerlError::io(p, e);
    let mkdir = |p: &Path| std::fs::create_dir_all(p).map_err(|e| io(p, e));
    mkdir(&dir.join("attributes"))?;
    let reg = &data.train.registry;
    let mut files: BTreeMap<&str, String> = BTreeMap::new();
    let mut classes = String::new();
    for (i, n) in reg.categories().iter().enumerate() {
        let _ = writeln!(classes, "{} {:03}.{n}", i + 1, i + 1);
    }
    let mut attrs = String::new();
    for (i, n) in reg.attributes().iter().enumerate() {
        let _ = writeln!(attrs, "{} {n}", i + 1);
    }
    files.insert("classes.txt", classes);
    files.insert("attributes.txt", attrs);
    let (mut images, mut labels, mut split, mut boxes, mut attr_labels, mut regions) =
        (String::new(), String::new(), String::new(), String::new(), String::new(), String::new());
    let all = data
        .train
        .samples
        .iter()
        .map(|s| (s, 1))
        .chain(data.test.samples.iter().map(|s| (s, 0)));
    for (s, is_train) in all {
        let id = s.id;
        let _ = writeln!(images, "{id} {}", s.name);
        let _ = writeln!(labels, "{id} {}", s.label + 1);
        let _ = writeln!(split, "{id} {is_train}");
        if let Some(b) = s.bbox {
            let _ = writeln!(boxes, "{id} {} {} {} {}", b.x, b.y, b.w, b.h);
        }
        for (a, &level) in data.certainty[&id].iter().enumerate() {
            let (present, cert) = if level == 0 { (0, 4) } else { (1, level) };
            let _ = writeln!(attr_labels, "{id} {} {present} {cert} 0", a + 1);
        }
        for m in &s.masks {
            let r = m.rect;
            let _ = writeln!(regions, "{id} {} {} {} {} {}", m.attribute + 1, r.x, r.y, r.w, r.h);
        }
        if let SampleInput::Image(img) = &s.input {
            let path = dir.join("images").join(&s.name);
            mkdir(path.parent().expect("image path has a parent"))?;
            img.save_ppm(&path)?;
        }
    }
    files.insert("images.txt", images);
    files.insert("image_class_labels.txt", labels);
    files.insert("train_test_split.txt", split);
    files.insert("bounding_boxes.txt", boxes);
    files.insert("attributes/image_attribute_labels.txt", attr_labels);
    files.insert("attribute_regions.txt", regions);
    let mut incidence = String::new();
    for row in data.incidence.rows() {
        let line: Vec<&str> = row.iter().map(|&b| if b { "1" } else { "0" }).collect();
        let _ = writeln!(incidence, "{}", line.join(" "));
    }
    files.insert("incidence.txt", incidence);
    files.insert(
        "synthetic.toml",
        toml::to_string(&data.config).map_err(|e| KerlError::Invalid(e.to_string()))?,
    );
    for (name, text) in files {
        let p = dir.join(name);
        std::fs::write(&p, text).map_err(|e| io(&p, e))?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::cub::{load_cub, CubOptions};
    use crate::data::Split;
    use crate::graph::{build_graph, Normalization};

    fn small() -> SyntheticConfig {
        SyntheticConfig {
            train_per_class: 6,
            test_per_class: 3,
            ..SyntheticConfig::default()
        }
    }

    #[test]
    fn same_seed_same_data() {
        let cfg = SyntheticConfig {
            seed: 7,
            ..SyntheticConfig::default()
        };
        let a = gen_synthetic(&cfg).unwrap();
        let b = gen_synthetic(&cfg).unwrap();
        assert_eq!(a.train, b.train);
        assert_eq!(a.test, b.test);
        assert_eq!(a.train.len(), 8 * 40);
        assert_eq!(a.test.len(), 8 * 20);
        let c = gen_synthetic(&SyntheticConfig { seed: 8, ..cfg }).unwrap();
        assert_ne!(a.train, c.train);
    }

    #[test]
    fn graph_recovers_incidence_pattern() {
        let data = gen_synthetic(&small()).unwrap();
        let (g, _) = build_graph(&data.train.instances(), data.train.registry.clone(), Normalization::Global).unwrap();
        for ((c, a), &v) in g.confidence().indexed_iter() {
            assert_eq!(v > 0.0, data.incidence[[c, a]], "category {c} attribute {a}");
        }
    }

    #[test]
    fn masks_lie_on_the_body_and_distractors_off_it() {
        let data = gen_synthetic(&small()).unwrap();
        for s in data.train.samples.iter().chain(&data.test.samples) {
            let body = data.bodies[&s.id];
            for m in &s.masks {
                assert_eq!(m.rect.intersect(&body), m.rect.area());
                assert!(s.attribute_scores[m.attribute] > 0.0);
            }
            for d in &data.distractors[&s.id] {
                assert_eq!(d.rect.intersect(&body), 0.0);
            }
            for (i, m) in s.masks.iter().enumerate() {
                for n in &s.masks[i + 1..] {
                    assert_eq!(m.rect.intersect(&n.rect), 0.0);
                }
            }
        }
    }

    #[test]
    fn scores_follow_incidence() {
        let data = gen_synthetic(&small()).unwrap();
        for s in &data.train.samples {
            for (a, &v) in s.attribute_scores.iter().enumerate() {
                if !data.incidence[[s.label, a]] {
                    assert_eq!(v, 0.0);
                }
                assert!([0.0, 2.0 / 3.0, 1.0].contains(&v));
            }
            assert_eq!(s.masks.len(), s.attribute_scores.iter().filter(|&&v| v > 0.0).count());
        }
    }

    #[test]
    fn cub_layout_round_trips() {
        let data = gen_synthetic(&small()).unwrap();
        let dir = tempfile::tempdir().unwrap();
        write_cub_layout(&data, dir.path()).unwrap();
        let train = load_cub(dir.path(), &CubOptions { split: Split::Train, ..Default::default() }).unwrap();
        let test = load_cub(dir.path(), &CubOptions { split: Split::Test, ..Default::default() }).unwrap();
        assert_eq!(train.samples, data.train.samples);
        assert_eq!(test.samples, data.test.samples);
        assert_eq!(train.registry.attributes(), data.train.registry.attributes());
    }

    #[test]
    fn invalid_configs_are_rejected() {
        assert!(gen_synthetic(&SyntheticConfig { parts_per_category: 9, ..small() }).is_err());
        assert!(gen_synthetic(&SyntheticConfig { image_size: 8, ..small() }).is_err());
        let crowded = SyntheticConfig {
            categories: 50,
            attributes: 4,
            parts: 4,
            parts_per_category: 1,
            ..small()
        };
        assert!(gen_synthetic(&crowded).is_err());
    }
}
