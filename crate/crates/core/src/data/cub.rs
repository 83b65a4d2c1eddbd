//! CUB-200-2011 annotation layout.
//!
//! All files are whitespace-separated text with 1-based ids:
//!
//! - `images.txt`: `<image_id> <relative path under images/>`
//! - `image_class_labels.txt`: `<image_id> <class_id>`
//! - `train_test_split.txt`: `<image_id> <is_training 0|1>`
//! - `classes.txt`: `<class_id> <class name>`
//! - `bounding_boxes.txt` (optional except in bbox mode): `<image_id> <x> <y> <w> <h>`
//! - `attributes.txt` in the root, in `attributes/`, or in the parent
//!   directory: `<attribute_id> <part::value name>`
//! - `attributes/image_attribute_labels.txt`:
//!   `<image_id> <attribute_id> <is_present> <certainty 1..4> [time ...]`;
//!   fields past the fourth are ignored
//! - `attribute_regions.txt` (optional, synthetic data only):
//!   `<image_id> <attribute_id> <x> <y> <w> <h>`
//!
//! Paths ending in `.feat` are read as precomputed feature maps; anything
//! else must be a netpbm image.

use std::collections::HashMap;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::features::load_features;
use super::image::RgbImage;
use super::{AttributeMask, CropMode, Dataset, PixelRect, Sample, SampleInput, Split};
use crate::error::{KerlError, Result};
use crate::graph::NodeRegistry;

/// Score weight per certainty level 1..=4.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CertaintyWeights(pub [f64; 4]);

impl Default for CertaintyWeights {
    fn default() -> Self {
        Self([1.0 / 3.0, 2.0 / 3.0, 2.0 / 3.0, 1.0])
    }
}

impl CertaintyWeights {
    pub fn score(&self, present: bool, certainty: usize) -> Result<f64> {
        if !(1..=4).contains(&certainty) {
            return Err(KerlError::Invalid(format!("certainty {certainty} outside 1..=4")));
        }
        Ok(if present { self.0[certainty - 1] } else { 0.0 })
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CubOptions {
    pub split: Split,
    pub mode: CropMode,
    /// Read pixels or feature files; otherwise inputs stay [`SampleInput::Unloaded`].
    pub load_inputs: bool,
    pub weights: CertaintyWeights,
}

impl Default for CubOptions {
    fn default() -> Self {
        Self {
            split: Split::All,
            mode: CropMode::Image,
            load_inputs: true,
            weights: CertaintyWeights::default(),
        }
    }
}

struct Row {
    line: usize,
    fields: Vec<String>,
}

fn read_rows(path: &Path, min_fields: usize) -> Result<Vec<Row>> {
    let text = std::fs::read_to_string(path).map_err(|e| KerlError::io(path, e))?;
    let mut rows = Vec::new();
    for (i, line) in text.lines().enumerate() {
        let fields: Vec<&str> = line.split_whitespace().collect();
        if fields.is_empty() {
            continue;
        }
        if fields.len() < min_fields {
            return Err(KerlError::parse(
                path,
                i + 1,
                format!("expected at least {min_fields} fields, found {}", fields.len()),
            ));
        }
        rows.push(Row {
            line: i + 1,
            fields: fields.into_iter().map(String::from).collect(),
        });
    }
    Ok(rows)
}

fn field<T: std::str::FromStr>(path: &Path, row: &Row, i: usize, what: &str) -> Result<T> {
    row.fields[i]
        .parse()
        .map_err(|_| KerlError::parse(path, row.line, format!("{what} {:?} is not valid", row.fields[i])))
}

/// Name column: everything after the id, rejoined with single spaces.
fn rest(row: &Row) -> String {
    row.fields[1..].join(" ")
}

fn id_map(path: &Path, rows: &[Row]) -> Result<(Vec<String>, HashMap<u64, usize>)> {
    let mut names = Vec::with_capacity(rows.len());
    let mut index = HashMap::new();
    for row in rows {
        let id: u64 = field(path, row, 0, "id")?;
        if index.insert(id, names.len()).is_some() {
            return Err(KerlError::parse(path, row.line, format!("duplicate id {id}")));
        }
        names.push(rest(row));
    }
    Ok((names, index))
}

fn locate_attributes(root: &Path) -> Result<PathBuf> {
    let mut candidates = vec![root.join("attributes.txt"), root.join("attributes").join("attributes.txt")];
    if let Some(parent) = root.parent() {
        candidates.push(parent.join("attributes.txt"));
    }
    candidates
        .iter()
        .find(|p| p.is_file())
        .cloned()
        .ok_or_else(|| KerlError::Missing(format!("attributes.txt not found under {}", root.display())))
}

fn require(path: PathBuf) -> Result<PathBuf> {
    if path.is_file() {
        Ok(path)
    } else {
        Err(KerlError::Missing(format!("{} does not exist", path.display())))
    }
}

pub fn load_cub(root: &Path, opts: &CubOptions) -> Result<Dataset> {
    if !root.is_dir() {
        return Err(KerlError::Missing(format!("dataset directory {} does not exist", root.display())));
    }
    let classes_path = require(root.join("classes.txt"))?;
    let (class_names, class_index) = id_map(&classes_path, &read_rows(&classes_path, 2)?)?;
    let attr_path = locate_attributes(root)?;
    let (attr_names, attr_index) = id_map(&attr_path, &read_rows(&attr_path, 2)?)?;
    let registry = NodeRegistry::new(class_names, attr_names)?;

    let images_path = require(root.join("images.txt"))?;
    let image_rows = read_rows(&images_path, 2)?;
    let (image_names, image_index) = id_map(&images_path, &image_rows)?;
    let image_ids: Vec<u64> = image_rows
        .iter()
        .map(|r| field(&images_path, r, 0, "image id"))
        .collect::<Result<_>>()?;
    let n = image_ids.len();

    let per_image = |path: &Path, rows: &[Row]| -> Result<Vec<Option<usize>>> {
        let mut out = vec![None; n];
        for row in rows {
            let id: u64 = field(path, row, 0, "image id")?;
            let i = *image_index
                .get(&id)
                .ok_or_else(|| KerlError::parse(path, row.line, format!("unknown image id {id}")))?;
            out[i] = Some(row.line);
        }
        Ok(out)
    };

    let labels_path = require(root.join("image_class_labels.txt"))?;
    let label_rows = read_rows(&labels_path, 2)?;
    let mut labels = vec![None; n];
    for row in &label_rows {
        let id: u64 = field(&labels_path, row, 0, "image id")?;
        let class: u64 = field(&labels_path, row, 1, "class id")?;
        let i = *image_index
            .get(&id)
            .ok_or_else(|| KerlError::parse(&labels_path, row.line, format!("unknown image id {id}")))?;
        let c = *class_index
            .get(&class)
            .ok_or_else(|| KerlError::parse(&labels_path, row.line, format!("unknown class id {class}")))?;
        labels[i] = Some(c);
    }

    let split_path = require(root.join("train_test_split.txt"))?;
    let split_rows = read_rows(&split_path, 2)?;
    per_image(&split_path, &split_rows)?;
    let mut is_train = vec![None; n];
    for row in &split_rows {
        let id: u64 = field(&split_path, row, 0, "image id")?;
        let flag: u8 = field(&split_path, row, 1, "split flag")?;
        if flag > 1 {
            return Err(KerlError::parse(&split_path, row.line, format!("split flag {flag} is not 0 or 1")));
        }
        is_train[image_index[&id]] = Some(flag == 1);
    }

    let bbox_path = root.join("bounding_boxes.txt");
    let mut boxes = vec![None; n];
    if bbox_path.is_file() {
        for row in &read_rows(&bbox_path, 5)? {
            let id: u64 = field(&bbox_path, row, 0, "image id")?;
            let i = *image_index
                .get(&id)
                .ok_or_else(|| KerlError::parse(&bbox_path, row.line, format!("unknown image id {id}")))?;
            let v: Vec<f64> = (1..5)
                .map(|k| field(&bbox_path, row, k, "box coordinate"))
                .collect::<Result<_>>()?;
            if v.iter().any(|x| !x.is_finite()) || v[2] <= 0.0 || v[3] <= 0.0 {
                return Err(KerlError::parse(&bbox_path, row.line, "degenerate bounding box"));
            }
            boxes[i] = Some(PixelRect { x: v[0], y: v[1], w: v[2], h: v[3] });
        }
    } else if opts.mode == CropMode::Bbox {
        return Err(KerlError::Missing(format!("{} is required in bbox mode", bbox_path.display())));
    }

    let a = registry.num_attributes();
    let labels_file = require(root.join("attributes").join("image_attribute_labels.txt"))?;
    let mut scores = vec![vec![0.0; a]; n];
    for row in &read_rows(&labels_file, 4)? {
        let id: u64 = field(&labels_file, row, 0, "image id")?;
        let attr: u64 = field(&labels_file, row, 1, "attribute id")?;
        let present: u8 = field(&labels_file, row, 2, "presence flag")?;
        let certainty: usize = field(&labels_file, row, 3, "certainty")?;
        let i = *image_index
            .get(&id)
            .ok_or_else(|| KerlError::parse(&labels_file, row.line, format!("unknown image id {id}")))?;
        let j = *attr_index
            .get(&attr)
            .ok_or_else(|| KerlError::parse(&labels_file, row.line, format!("unknown attribute id {attr}")))?;
        if present > 1 {
            return Err(KerlError::parse(&labels_file, row.line, "presence flag must be 0 or 1"));
        }
        scores[i][j] = opts
            .weights
            .score(present == 1, certainty)
            .map_err(|e| KerlError::parse(&labels_file, row.line, e.to_string()))?;
    }

    let regions_path = root.join("attribute_regions.txt");
    let mut masks: Vec<Vec<AttributeMask>> = vec![Vec::new(); n];
    if regions_path.is_file() {
        for row in &read_rows(&regions_path, 6)? {
            let id: u64 = field(&regions_path, row, 0, "image id")?;
            let attr: u64 = field(&regions_path, row, 1, "attribute id")?;
            let i = *image_index
                .get(&id)
                .ok_or_else(|| KerlError::parse(&regions_path, row.line, format!("unknown image id {id}")))?;
            let attribute = *attr_index
                .get(&attr)
                .ok_or_else(|| KerlError::parse(&regions_path, row.line, format!("unknown attribute id {attr}")))?;
            let v: Vec<f64> = (2..6)
                .map(|k| field(&regions_path, row, k, "region coordinate"))
                .collect::<Result<_>>()?;
            masks[i].push(AttributeMask {
                attribute,
                rect: PixelRect { x: v[0], y: v[1], w: v[2], h: v[3] },
            });
        }
    }

    let mut samples = Vec::new();
    for i in 0..n {
        let line_of = |path: &Path| KerlError::parse(path, 0, format!("image id {} has no entry", image_ids[i]));
        let label = labels[i].ok_or_else(|| line_of(&labels_path))?;
        let train = is_train[i].ok_or_else(|| line_of(&split_path))?;
        if !opts.split.keeps(train) {
            continue;
        }
        let path = root.join("images").join(&image_names[i]);
        let mut sample = Sample {
            id: image_ids[i],
            name: image_names[i].clone(),
            input: SampleInput::Unloaded(path.clone()),
            label,
            attribute_scores: std::mem::take(&mut scores[i]),
            bbox: boxes[i],
            masks: std::mem::take(&mut masks[i]),
        };
        if opts.mode == CropMode::Bbox && sample.bbox.is_none() {
            return Err(line_of(&bbox_path));
        }
        if opts.load_inputs {
            load_input(&mut sample, &path, opts.mode)?;
        }
        samples.push(sample);
    }
    let ds = Dataset { registry, samples };
    ds.validate()?;
    Ok(ds)
}

/// Pixel box of `rect` clipped to a `w × h` image, at least one pixel wide.
pub fn clip_box(rect: &PixelRect, w: usize, h: usize) -> (usize, usize, usize, usize) {
    let x0 = rect.x.floor().clamp(0.0, (w - 1) as f64) as usize;
    let y0 = rect.y.floor().clamp(0.0, (h - 1) as f64) as usize;
    let x1 = ((rect.x + rect.w).ceil() as usize).clamp(x0 + 1, w);
    let y1 = ((rect.y + rect.h).ceil() as usize).clamp(y0 + 1, h);
    (x0, y0, x1 - x0, y1 - y0)
}

fn load_input(sample: &mut Sample, path: &Path, mode: CropMode) -> Result<()> {
    if path.extension().is_some_and(|e| e == "feat") {
        sample.input = SampleInput::Features(load_features(path)?);
        return Ok(());
    }
    let mut img = RgbImage::load(path)?;
    if mode == CropMode::Bbox {
        let bbox = sample.bbox.expect("checked by caller");
        let (x, y, w, h) = clip_box(&bbox, img.width, img.height);
        img = img.crop(x, y, w, h)?;
        for m in &mut sample.masks {
            m.rect.x -= x as f64;
            m.rect.y -= y as f64;
        }
    }
    sample.input = SampleInput::Image(img);
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::fs;

    fn write(dir: &Path, name: &str, text: &str) {
        let p = dir.join(name);
        fs::create_dir_all(p.parent().unwrap()).unwrap();
        fs::write(p, text).unwrap();
    }

    fn fixture(dir: &Path) {
        write(dir, "classes.txt", "1 001.Alpha\n2 002.Beta\n");
        write(dir, "attributes.txt", "1 has_wing_color::red\n2 has_bill_shape::hooked\n3 has_size::small (5 - 9 in)\n");
        write(dir, "images.txt", "1 a/1.ppm\n2 a/2.ppm\n3 b/3.ppm\n");
        write(dir, "image_class_labels.txt", "1 1\n2 1\n3 2\n");
        write(dir, "train_test_split.txt", "1 1\n2 0\n3 1\n");
        write(dir, "bounding_boxes.txt", "1 1.0 1.0 2.0 2.0\n2 0 0 4 4\n3 2.5 0.5 10 10\n");
        write(
            dir,
            "attributes/image_attribute_labels.txt",
            "1 1 1 4 2.5\n1 2 1 3 1.0\n1 3 0 4 0\n2 1 1 1 0 extra\n3 3 1 2 0\n",
        );
        let mut img = RgbImage::new(4, 4);
        img.put(1, 1, [9, 9, 9]);
        for name in ["a/1.ppm", "a/2.ppm", "b/3.ppm"] {
            let p = dir.join("images").join(name);
            fs::create_dir_all(p.parent().unwrap()).unwrap();
            img.save_ppm(&p).unwrap();
        }
    }

    #[test]
    fn certainty_mapping() {
        let w = CertaintyWeights::default();
        assert_eq!(w.score(true, 4).unwrap(), 1.0);
        assert_eq!(w.score(true, 1).unwrap(), 1.0 / 3.0);
        assert_eq!(w.score(false, 4).unwrap(), 0.0);
        assert!(w.score(true, 5).is_err());
    }

    #[test]
    fn parses_fixture_splits_and_scores() {
        let dir = tempfile::tempdir().unwrap();
        fixture(dir.path());
        let all = load_cub(dir.path(), &CubOptions::default()).unwrap();
        assert_eq!(all.len(), 3);
        assert_eq!(all.registry.num_attributes(), 3);
        assert_eq!(all.registry.attributes()[2], "has_size::small (5 - 9 in)");
        assert_eq!(all.samples[0].attribute_scores, vec![1.0, 2.0 / 3.0, 0.0]);
        assert_eq!(all.samples[1].attribute_scores, vec![1.0 / 3.0, 0.0, 0.0]);
        assert_eq!(all.samples[2].label, 1);

        let train = load_cub(dir.path(), &CubOptions { split: Split::Train, ..Default::default() }).unwrap();
        let test = load_cub(dir.path(), &CubOptions { split: Split::Test, ..Default::default() }).unwrap();
        assert_eq!(train.samples.iter().map(|s| s.id).collect::<Vec<_>>(), vec![1, 3]);
        assert_eq!(test.samples.iter().map(|s| s.id).collect::<Vec<_>>(), vec![2]);
    }

    #[test]
    fn bbox_mode_crops_inside_bounds() {
        let dir = tempfile::tempdir().unwrap();
        fixture(dir.path());
        let ds = load_cub(dir.path(), &CubOptions { mode: CropMode::Bbox, ..Default::default() }).unwrap();
        let sizes: Vec<_> = ds
            .samples
            .iter()
            .map(|s| match &s.input {
                SampleInput::Image(img) => (img.width, img.height),
                other => panic!("unexpected input {other:?}"),
            })
            .collect();
        // the third box overhangs the 4x4 image and is clipped
        assert_eq!(sizes, vec![(2, 2), (4, 4), (2, 4)]);
        let first = &ds.samples[0].input;
        if let SampleInput::Image(img) = first {
            assert_eq!(img.get(0, 0), [9, 9, 9]);
        }
    }

    #[test]
    fn annotation_only_mode_skips_pixels() {
        let dir = tempfile::tempdir().unwrap();
        fixture(dir.path());
        fs::remove_dir_all(dir.path().join("images")).unwrap();
        let ds = load_cub(dir.path(), &CubOptions { load_inputs: false, ..Default::default() }).unwrap();
        assert!(matches!(ds.samples[0].input, SampleInput::Unloaded(_)));
    }

    #[test]
    fn errors_name_file_and_line() {
        let dir = tempfile::tempdir().unwrap();
        fixture(dir.path());
        write(dir.path(), "image_class_labels.txt", "1 1\n2 x\n3 2\n");
        let err = load_cub(dir.path(), &CubOptions::default()).unwrap_err().to_string();
        assert!(err.contains("image_class_labels.txt:2"), "{err}");

        write(dir.path(), "image_class_labels.txt", "1 1\n2 1\n3 9\n");
        let err = load_cub(dir.path(), &CubOptions::default()).unwrap_err().to_string();
        assert!(err.contains("unknown class id 9"), "{err}");

        let missing = load_cub(&dir.path().join("nope"), &CubOptions::default()).unwrap_err();
        assert!(matches!(missing, KerlError::Missing(_)));
    }

    #[test]
    fn attributes_file_may_live_in_parent() {
        let parent = tempfile::tempdir().unwrap();
        let root = parent.path().join("CUB_200_2011");
        fs::create_dir_all(&root).unwrap();
        fixture(&root);
        fs::rename(root.join("attributes.txt"), parent.path().join("attributes.txt")).unwrap();
        assert_eq!(load_cub(&root, &CubOptions::default()).unwrap().len(), 3);
    }
}
