//! Synthetic shapes dataset, its binary container and a PGM directory loader.
//!
//! Each grayscale image holds one class-defining shape at a random position
//! and scale, a few small distractor marks and Gaussian noise. The label
//! depends only on the pixels under the shape, so informative tokens are
//! spatially localized.
//!
//! Container layout (all little-endian): `"TOFD"`, version `u32`, count
//! `u32`, channels `u32`, height `u32`, width `u32`, then per record a `u16`
//! label followed by `channels * height * width` `f32` pixels.

use std::path::Path;

use serde::{Deserialize, Serialize};
use tofe_core::train::Sample;
use tofe_core::{ModelConfig, Rng, Tensor};

use crate::error::{HarnessError, Result};
use crate::fsutil::{read, write_atomic};

pub const TOFD_MAGIC: &[u8; 4] = b"TOFD";
pub const TOFD_VERSION: u32 = 1;
const HEADER_LEN: usize = 24;

pub const SHAPE_NAMES: [&str; 10] = [
    "disk", "ring", "square", "frame", "plus", "cross", "triangle", "diamond", "hbars", "vbars",
];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetSpec {
    pub num_train: usize,
    pub num_eval: usize,
    pub image_size: usize,
    pub num_classes: usize,
    /// Standard deviation of the additive pixel noise.
    pub noise: f64,
    pub distractors: usize,
    pub seed: u64,
}

impl Default for DatasetSpec {
    fn default() -> Self {
        Self {
            num_train: 5000,
            num_eval: 1000,
            image_size: 64,
            num_classes: 10,
            noise: 0.1,
            distractors: 3,
            seed: 7,
        }
    }
}

impl DatasetSpec {
    pub fn validate(&self) -> Result<()> {
        if self.num_classes == 0 || self.num_classes > SHAPE_NAMES.len() {
            return Err(HarnessError::Config(format!(
                "num_classes must be in 1..={}, got {}",
                SHAPE_NAMES.len(),
                self.num_classes
            )));
        }
        if self.image_size < 8 {
            return Err(HarnessError::Config(format!("image_size {} is below 8", self.image_size)));
        }
        if !(self.noise >= 0.0 && self.noise.is_finite()) {
            return Err(HarnessError::Config(format!("noise {} must be finite and >= 0", self.noise)));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Split {
    Train,
    Eval,
}

impl Split {
    pub fn file_name(self) -> &'static str {
        match self {
            Split::Train => "train.tofd",
            Split::Eval => "eval.tofd",
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub channels: usize,
    pub image_size: usize,
    pub samples: Vec<Sample<f32>>,
}

impl Dataset {
    /// Image dimensions and labels must fit the model.
    pub fn check(&self, cfg: &ModelConfig) -> Result<()> {
        if self.channels != cfg.channels || self.image_size != cfg.image_size {
            return Err(HarnessError::Data(format!(
                "images are {}x{}x{}, model expects {}x{}x{}",
                self.channels, self.image_size, self.image_size, cfg.channels, cfg.image_size, cfg.image_size
            )));
        }
        if let Some((i, s)) = self.samples.iter().enumerate().find(|(_, s)| s.label >= cfg.num_classes) {
            return Err(HarnessError::Data(format!(
                "record {i}: label {} out of range for {} classes",
                s.label, cfg.num_classes
            )));
        }
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn class_histogram(&self, classes: usize) -> Vec<usize> {
        let mut h = vec![0; classes];
        for s in &self.samples {
            h[s.label] += 1;
        }
        h
    }

    /// Seeded mini-batches of `(images, labels)`.
    pub fn batches(&self, batch_size: usize, seed: u64) -> Vec<(Vec<Tensor<f32>>, Vec<usize>)> {
        shuffled_batches(self.len(), batch_size, seed)
            .into_iter()
            .map(|idx| {
                idx.iter()
                    .map(|&i| (self.samples[i].image.clone(), self.samples[i].label))
                    .unzip()
            })
            .collect()
    }

    pub fn head(&self, n: usize) -> Dataset {
        Dataset {
            channels: self.channels,
            image_size: self.image_size,
            samples: self.samples[..n.min(self.len())].to_vec(),
        }
    }
}

/// Index batches over a seeded permutation of `0..len`.
pub fn shuffled_batches(len: usize, batch_size: usize, seed: u64) -> Vec<Vec<usize>> {
    let mut order: Vec<usize> = (0..len).collect();
    Rng::seed(seed).shuffle(&mut order);
    order.chunks(batch_size.max(1)).map(|c| c.to_vec()).collect()
}

/// Membership test in shape-local coordinates, `u, v` in `[-1, 1]`, `v` down.
fn inside(class: usize, u: f64, v: f64) -> bool {
    let (au, av) = (u.abs(), v.abs());
    let box_ = au.max(av);
    let r2 = u * u + v * v;
    match class {
        0 => r2 < 1.0,
        1 => r2 < 1.0 && r2 > 0.55 * 0.55,
        2 => box_ < 0.8,
        3 => box_ < 0.85 && box_ > 0.45,
        4 => (au < 0.28 && av < 0.95) || (av < 0.28 && au < 0.95),
        5 => ((u - v).abs() < 0.4 || (u + v).abs() < 0.4) && box_ < 0.85,
        6 => v > -0.9 && v < 0.8 && au < (v + 0.9) / 1.7,
        7 => au + av < 1.0,
        8 => au < 0.9 && ((v - 0.5).abs() < 0.22 || (v + 0.5).abs() < 0.22),
        9 => av < 0.9 && ((u - 0.5).abs() < 0.22 || (u + 0.5).abs() < 0.22),
        _ => unreachable!("class {class}"),
    }
}

/// Renders one image; every random draw comes from `rng`.
pub fn render(class: usize, size: usize, noise: f64, distractors: usize, rng: &mut Rng) -> Vec<f32> {
    const SS: usize = 3;
    let sz = size as f64;
    let half = rng.uniform_range(0.16, 0.28) * sz;
    let cx = rng.uniform_range(half, sz - half);
    let cy = rng.uniform_range(half, sz - half);
    let fg = rng.uniform_range(0.6, 1.0);
    let bg = rng.uniform_range(0.0, 0.15);
    let mut img = vec![bg; size * size];
    for y in 0..size {
        for x in 0..size {
            let mut hits = 0;
            for sy in 0..SS {
                for sx in 0..SS {
                    let px = x as f64 + (sx as f64 + 0.5) / SS as f64;
                    let py = y as f64 + (sy as f64 + 0.5) / SS as f64;
                    if inside(class, (px - cx) / half, (py - cy) / half) {
                        hits += 1;
                    }
                }
            }
            let cover = hits as f64 / (SS * SS) as f64;
            img[y * size + x] += cover * (fg - bg);
        }
    }
    for _ in 0..distractors {
        let level = rng.uniform_range(0.3, 0.7);
        let (w, h) = if rng.uniform() < 0.5 {
            let side = 2 + rng.below(2);
            (side, side)
        } else if rng.uniform() < 0.5 {
            (3 + rng.below(3), 1)
        } else {
            (1, 3 + rng.below(3))
        };
        let x0 = rng.below(size - w + 1);
        let y0 = rng.below(size - h + 1);
        for y in y0..y0 + h {
            for x in x0..x0 + w {
                img[y * size + x] = img[y * size + x].max(level);
            }
        }
    }
    img.iter()
        .map(|&p| (p + noise * rng.normal()).clamp(0.0, 1.0) as f32)
        .collect()
}

/// One split; a pure function of the spec. Labels cycle through the
/// classes, so histograms differ by at most one.
pub fn generate_split(spec: &DatasetSpec, split: Split) -> Result<Dataset> {
    spec.validate()?;
    let (count, stream) = match split {
        Split::Train => (spec.num_train, 1u64 << 32),
        Split::Eval => (spec.num_eval, 2u64 << 32),
    };
    let root = Rng::seed(spec.seed);
    let mut samples = Vec::with_capacity(count);
    for i in 0..count {
        let label = i % spec.num_classes;
        let mut rng = root.fork(stream + i as u64);
        let px = render(label, spec.image_size, spec.noise, spec.distractors, &mut rng);
        let image = Tensor::new(vec![1, spec.image_size, spec.image_size], px)?;
        samples.push(Sample { image, label });
    }
    Ok(Dataset {
        channels: 1,
        image_size: spec.image_size,
        samples,
    })
}

pub fn encode_tofd(ds: &Dataset) -> Vec<u8> {
    let px = ds.channels * ds.image_size * ds.image_size;
    let mut out = Vec::with_capacity(HEADER_LEN + ds.len() * (2 + 4 * px));
    out.extend_from_slice(TOFD_MAGIC);
    for v in [TOFD_VERSION, ds.len() as u32, ds.channels as u32, ds.image_size as u32, ds.image_size as u32] {
        out.extend_from_slice(&v.to_le_bytes());
    }
    for s in &ds.samples {
        out.extend_from_slice(&(s.label as u16).to_le_bytes());
        for &p in s.image.data() {
            out.extend_from_slice(&p.to_le_bytes());
        }
    }
    out
}

fn u32_at(b: &[u8], at: usize) -> u32 {
    u32::from_le_bytes(b[at..at + 4].try_into().unwrap())
}

pub fn decode_tofd(bytes: &[u8]) -> Result<Dataset> {
    let err = |offset: usize, record: Option<usize>, msg: String| HarnessError::Parse {
        offset: offset as u64,
        record,
        msg,
    };
    if bytes.len() < HEADER_LEN {
        return Err(err(bytes.len(), None, format!("header needs {HEADER_LEN} bytes, file has {}", bytes.len())));
    }
    if &bytes[..4] != TOFD_MAGIC {
        return Err(err(0, None, format!("bad magic {:?}", &bytes[..4])));
    }
    let version = u32_at(bytes, 4);
    if version != TOFD_VERSION {
        return Err(err(4, None, format!("unsupported version {version}")));
    }
    let count = u32_at(bytes, 8) as usize;
    let (c, h, w) = (u32_at(bytes, 12) as usize, u32_at(bytes, 16) as usize, u32_at(bytes, 20) as usize);
    if h != w || c == 0 || h == 0 {
        return Err(err(12, None, format!("unsupported image dims {c}x{h}x{w}")));
    }
    let px = c * h * w;
    let rec = 2 + 4 * px;
    let mut samples = Vec::with_capacity(count);
    for i in 0..count {
        let start = HEADER_LEN + i * rec;
        if start + rec > bytes.len() {
            return Err(err(
                start,
                Some(i),
                format!("truncated record: needs {rec} bytes, {} remain", bytes.len().saturating_sub(start)),
            ));
        }
        let label = u16::from_le_bytes([bytes[start], bytes[start + 1]]) as usize;
        let data: Vec<f32> = bytes[start + 2..start + rec]
            .chunks_exact(4)
            .map(|q| f32::from_le_bytes(q.try_into().unwrap()))
            .collect();
        samples.push(Sample {
            image: Tensor::new(vec![c, h, w], data)?,
            label,
        });
    }
    let end = HEADER_LEN + count * rec;
    if end != bytes.len() {
        return Err(err(end, None, format!("{} trailing bytes after {count} records", bytes.len() - end)));
    }
    Ok(Dataset {
        channels: c,
        image_size: h,
        samples,
    })
}

/// Binary 8-bit PGM (`P5`).
pub fn encode_pgm(width: usize, height: usize, px: &[u8]) -> Vec<u8> {
    let mut out = format!("P5\n{width} {height}\n255\n").into_bytes();
    out.extend_from_slice(px);
    out
}

/// Parses a binary 8-bit PGM into `(width, height, pixels)`.
pub fn decode_pgm(bytes: &[u8]) -> Result<(usize, usize, Vec<u8>)> {
    let mut fields = Vec::with_capacity(4);
    let mut pos = 0;
    while fields.len() < 4 {
        while pos < bytes.len() && bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        if pos < bytes.len() && bytes[pos] == b'#' {
            while pos < bytes.len() && bytes[pos] != b'\n' {
                pos += 1;
            }
            continue;
        }
        let start = pos;
        while pos < bytes.len() && !bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        if start == pos {
            return Err(HarnessError::Parse {
                offset: pos as u64,
                record: None,
                msg: "PGM header ends early".into(),
            });
        }
        fields.push((start, String::from_utf8_lossy(&bytes[start..pos]).into_owned()));
    }
    if fields[0].1 != "P5" {
        return Err(HarnessError::Parse {
            offset: 0,
            record: None,
            msg: format!("expected P5, found {:?}", fields[0].1),
        });
    }
    let mut nums = [0usize; 3];
    for (k, (off, text)) in fields[1..].iter().enumerate() {
        nums[k] = text.parse().map_err(|_| HarnessError::Parse {
            offset: *off as u64,
            record: None,
            msg: format!("bad PGM header field {text:?}"),
        })?;
    }
    let [w, h, max] = nums;
    if max != 255 {
        return Err(HarnessError::Parse {
            offset: fields[3].0 as u64,
            record: None,
            msg: format!("only 8-bit PGM is supported, maxval {max}"),
        });
    }
    pos += 1;
    if bytes.len() < pos + w * h {
        return Err(HarnessError::Parse {
            offset: bytes.len() as u64,
            record: None,
            msg: format!("PGM raster needs {} bytes, {} remain", w * h, bytes.len().saturating_sub(pos)),
        });
    }
    Ok((w, h, bytes[pos..pos + w * h].to_vec()))
}

pub fn load_tofd(path: &Path) -> Result<Dataset> {
    decode_tofd(&read(path)?).map_err(|e| match e {
        HarnessError::Parse { offset, record, msg } => HarnessError::Parse {
            offset,
            record,
            msg: format!("{}: {msg}", path.display()),
        },
        other => other,
    })
}

/// A directory of square PGM images plus `labels.csv` (`file,label` rows).
pub fn load_pgm_dir(dir: &Path) -> Result<Dataset> {
    let csv_path = dir.join("labels.csv");
    let text = String::from_utf8(read(&csv_path)?)
        .map_err(|e| HarnessError::Data(format!("{}: not UTF-8: {e}", csv_path.display())))?;
    let mut samples = Vec::new();
    let mut size = None;
    for (n, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') || (n == 0 && line.starts_with("file")) {
            continue;
        }
        let (file, label) = line
            .split_once(',')
            .ok_or_else(|| HarnessError::Data(format!("labels.csv line {}: expected file,label", n + 1)))?;
        let label: usize = label
            .trim()
            .parse()
            .map_err(|_| HarnessError::Data(format!("labels.csv line {}: bad label {label:?}", n + 1)))?;
        let path = dir.join(file.trim());
        let (w, h, px) = decode_pgm(&read(&path)?).map_err(|e| match e {
            HarnessError::Parse { offset, msg, .. } => HarnessError::Parse {
                offset,
                record: Some(samples.len()),
                msg: format!("{}: {msg}", path.display()),
            },
            other => other,
        })?;
        if w != h || *size.get_or_insert(w) != w {
            return Err(HarnessError::Data(format!(
                "{}: {w}x{h} does not match the first image",
                path.display()
            )));
        }
        let data = px.iter().map(|&b| b as f32 / 255.0).collect();
        samples.push(Sample {
            image: Tensor::new(vec![1, h, w], data)?,
            label,
        });
    }
    let image_size = size.ok_or_else(|| HarnessError::Data(format!("{} lists no images", csv_path.display())))?;
    Ok(Dataset {
        channels: 1,
        image_size,
        samples,
    })
}

/// `path` may be a container file, a generated dataset directory or a PGM
/// directory with `labels.csv`.
pub fn open(path: &Path, split: Split) -> Result<Dataset> {
    if path.is_file() {
        return load_tofd(path);
    }
    let container = path.join(split.file_name());
    if container.is_file() {
        return load_tofd(&container);
    }
    if path.join("labels.csv").is_file() {
        return load_pgm_dir(path);
    }
    Err(HarnessError::Data(format!(
        "{}: no {} or labels.csv found",
        path.display(),
        split.file_name()
    )))
}

/// Writes `train.tofd`, `eval.tofd`, `labels.csv` and `spec.json` into `dir`.
pub fn write_dataset(spec: &DatasetSpec, dir: &Path) -> Result<(Dataset, Dataset)> {
    let train = generate_split(spec, Split::Train)?;
    let eval = generate_split(spec, Split::Eval)?;
    write_atomic(&dir.join(Split::Train.file_name()), &encode_tofd(&train))?;
    write_atomic(&dir.join(Split::Eval.file_name()), &encode_tofd(&eval))?;
    let mut csv = String::from("split,index,label,shape\n");
    for (name, ds) in [("train", &train), ("eval", &eval)] {
        for (i, s) in ds.samples.iter().enumerate() {
            csv.push_str(&format!("{name},{i},{},{}\n", s.label, SHAPE_NAMES[s.label]));
        }
    }
    write_atomic(&dir.join("labels.csv"), csv.as_bytes())?;
    let json = serde_json::to_string_pretty(spec).expect("spec serializes");
    write_atomic(&dir.join("spec.json"), json.as_bytes())?;
    Ok((train, eval))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small() -> DatasetSpec {
        DatasetSpec {
            num_train: 23,
            num_eval: 10,
            image_size: 16,
            ..DatasetSpec::default()
        }
    }

    #[test]
    fn generation_is_deterministic() {
        let a = generate_split(&small(), Split::Train).unwrap();
        let b = generate_split(&small(), Split::Train).unwrap();
        assert_eq!(encode_tofd(&a), encode_tofd(&b));
        let other = generate_split(&DatasetSpec { seed: 8, ..small() }, Split::Train).unwrap();
        assert_ne!(a, other);
    }

    #[test]
    fn classes_are_balanced() {
        let spec = DatasetSpec { num_train: 50, ..small() };
        let h = generate_split(&spec, Split::Train).unwrap().class_histogram(10);
        assert_eq!(h, vec![5; 10]);
    }

    #[test]
    fn pixels_stay_in_unit_range() {
        let ds = generate_split(&small(), Split::Eval).unwrap();
        assert!(ds.samples.iter().all(|s| s.image.data().iter().all(|&p| (0.0..=1.0).contains(&p))));
    }

    #[test]
    fn shapes_are_distinct_masks() {
        let n = 41;
        let masks: Vec<Vec<bool>> = (0..10)
            .map(|c| {
                (0..n * n)
                    .map(|k| {
                        let u = (k % n) as f64 / 20.0 - 1.0;
                        let v = (k / n) as f64 / 20.0 - 1.0;
                        inside(c, u, v)
                    })
                    .collect()
            })
            .collect();
        for a in 0..10 {
            assert!(masks[a].iter().any(|&b| b), "{}", SHAPE_NAMES[a]);
            for b in a + 1..10 {
                let diff = masks[a].iter().zip(&masks[b]).filter(|(x, y)| x != y).count();
                assert!(diff > n * n / 20, "{} vs {}", SHAPE_NAMES[a], SHAPE_NAMES[b]);
            }
        }
    }

    #[test]
    fn container_round_trip_is_bit_exact() {
        let ds = generate_split(&small(), Split::Train).unwrap();
        let back = decode_tofd(&encode_tofd(&ds)).unwrap();
        assert_eq!(back, ds);
    }

    #[test]
    fn truncation_names_record_and_offset() {
        let ds = generate_split(&small(), Split::Train).unwrap();
        let bytes = encode_tofd(&ds);
        let rec = 2 + 4 * 16 * 16;
        let cut = HEADER_LEN + 5 * rec + 10;
        match decode_tofd(&bytes[..cut]) {
            Err(HarnessError::Parse { offset, record, .. }) => {
                assert_eq!(record, Some(5));
                assert_eq!(offset as usize, HEADER_LEN + 5 * rec);
            }
            other => panic!("{other:?}"),
        }
        assert!(matches!(decode_tofd(b"TOFX"), Err(HarnessError::Parse { offset: 4, .. })));
        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(matches!(decode_tofd(&bad), Err(HarnessError::Parse { offset: 0, .. })));
    }

    #[test]
    fn out_of_range_label_is_a_data_error() {
        let mut ds = generate_split(&small(), Split::Eval).unwrap();
        ds.samples[3].label = 12;
        let cfg = ModelConfig {
            image_size: 16,
            patch_size: 4,
            ..ModelConfig::default()
        };
        let e = ds.check(&cfg).unwrap_err();
        assert!(matches!(e, HarnessError::Data(_)));
        assert!(e.to_string().contains("record 3"));
    }

    #[test]
    fn shuffle_is_seeded() {
        assert_eq!(shuffled_batches(100, 7, 3), shuffled_batches(100, 7, 3));
        assert_ne!(shuffled_batches(100, 7, 3), shuffled_batches(100, 7, 4));
        let mut all: Vec<usize> = shuffled_batches(100, 7, 3).concat();
        all.sort();
        assert_eq!(all, (0..100).collect::<Vec<_>>());
    }

    #[test]
    fn pgm_directory_loads() {
        let dir = tempfile::tempdir().unwrap();
        let px: Vec<u8> = (0..64).map(|i| (i * 4) as u8).collect();
        std::fs::write(dir.path().join("a.pgm"), encode_pgm(8, 8, &px)).unwrap();
        std::fs::write(dir.path().join("b.pgm"), b"P5\n# note\n8 8\n255\n".iter().chain(&px).copied().collect::<Vec<u8>>()).unwrap();
        std::fs::write(dir.path().join("labels.csv"), "file,label\na.pgm,2\nb.pgm,0\n").unwrap();
        let ds = open(dir.path(), Split::Train).unwrap();
        assert_eq!(ds.len(), 2);
        assert_eq!(ds.samples[0].label, 2);
        assert_eq!(ds.samples[1].image.data()[1], 4.0 / 255.0);
    }

    #[test]
    fn write_dataset_is_reproducible() {
        let (a, b) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
        write_dataset(&small(), a.path()).unwrap();
        write_dataset(&small(), b.path()).unwrap();
        for f in ["train.tofd", "eval.tofd", "labels.csv", "spec.json"] {
            assert_eq!(std::fs::read(a.path().join(f)).unwrap(), std::fs::read(b.path().join(f)).unwrap());
        }
        assert_eq!(open(a.path(), Split::Eval).unwrap().len(), 10);
    }
}
