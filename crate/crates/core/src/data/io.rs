use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use super::{generate_scene, DataError, Image, LabelMap, Result, SceneSpec};
use crate::loss::IGNORE_LABEL;

fn quantize(v: f64) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

/// Parses a binary netpbm header with the given magic, returning
/// `(width, height, payload offset)`.
fn parse_header(bytes: &[u8], magic: &[u8; 2]) -> Result<(usize, usize, usize)> {
    if bytes.len() < 2 || &bytes[..2] != magic {
        return Err(DataError::Format(format!(
            "expected magic {}",
            String::from_utf8_lossy(magic)
        )));
    }
    let mut pos = 2;
    let mut fields = [0usize; 3];
    for field in &mut fields {
        loop {
            match bytes.get(pos) {
                Some(b) if b.is_ascii_whitespace() => pos += 1,
                Some(b'#') => {
                    while bytes.get(pos).is_some_and(|&b| b != b'\n') {
                        pos += 1;
                    }
                }
                _ => break,
            }
        }
        let start = pos;
        while bytes.get(pos).is_some_and(u8::is_ascii_digit) {
            pos += 1;
        }
        if start == pos {
            return Err(DataError::Format("truncated header".into()));
        }
        *field = std::str::from_utf8(&bytes[start..pos])
            .ok()
            .and_then(|s| s.parse().ok())
            .ok_or_else(|| DataError::Format("header field out of range".into()))?;
    }
    if !bytes.get(pos).is_some_and(u8::is_ascii_whitespace) {
        return Err(DataError::Format("missing whitespace after maxval".into()));
    }
    let [width, height, maxval] = fields;
    if maxval != 255 {
        return Err(DataError::Format(format!("maxval {maxval}, expected 255")));
    }
    if width == 0 || height == 0 {
        return Err(DataError::Format(format!("empty {width}x{height} image")));
    }
    Ok((width, height, pos + 1))
}

fn payload(bytes: &[u8], offset: usize, len: usize) -> Result<&[u8]> {
    match bytes.len() - offset {
        n if n == len => Ok(&bytes[offset..]),
        n => Err(DataError::Format(format!("payload has {n} bytes, expected {len}"))),
    }
}

pub fn encode_ppm(image: &Image) -> Vec<u8> {
    let (h, w) = (image.height, image.width);
    let mut out = format!("P6\n{w} {h}\n255\n").into_bytes();
    for y in 0..h {
        for x in 0..w {
            for c in 0..3 {
                out.push(quantize(image.at(c, y, x)));
            }
        }
    }
    out
}

pub fn decode_ppm(bytes: &[u8]) -> Result<Image> {
    let (w, h, offset) = parse_header(bytes, b"P6")?;
    let body = payload(bytes, offset, 3 * w * h)?;
    let mut data = vec![0.0; 3 * h * w];
    for (p, rgb) in body.chunks_exact(3).enumerate() {
        for (c, &v) in rgb.iter().enumerate() {
            data[c * h * w + p] = v as f64 / 255.0;
        }
    }
    Image::new(h, w, data)
}

pub fn encode_pgm(labels: &LabelMap) -> Vec<u8> {
    let mut out = format!("P5\n{} {}\n255\n", labels.width, labels.height).into_bytes();
    out.extend_from_slice(&labels.data);
    out
}

/// Decodes labels, rejecting any value that is neither a class below
/// `n_classes` nor the ignore label.
pub fn decode_pgm(bytes: &[u8], n_classes: usize) -> Result<LabelMap> {
    let (w, h, offset) = parse_header(bytes, b"P5")?;
    let body = payload(bytes, offset, w * h)?;
    if let Some(&label) = body
        .iter()
        .find(|&&l| l != IGNORE_LABEL && l as usize >= n_classes)
    {
        return Err(DataError::Label {
            label,
            classes: n_classes,
        });
    }
    LabelMap::new(h, w, body.to_vec())
}

pub fn write_ppm(path: &Path, image: &Image) -> Result<()> {
    Ok(fs::write(path, encode_ppm(image))?)
}

pub fn read_ppm(path: &Path) -> Result<Image> {
    decode_ppm(&fs::read(path)?)
}

pub fn write_pgm(path: &Path, labels: &LabelMap) -> Result<()> {
    Ok(fs::write(path, encode_pgm(labels))?)
}

pub fn read_pgm(path: &Path, n_classes: usize) -> Result<LabelMap> {
    decode_pgm(&fs::read(path)?, n_classes)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Split {
    Train,
    Val,
}

impl Split {
    pub fn name(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Val => "val",
        }
    }
}

/// Facts about a stored dataset, kept in `meta.txt` as `key = value` lines.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct DatasetMeta {
    pub n_classes: usize,
    pub height: usize,
    pub width: usize,
    pub seed: u64,
    pub train: usize,
    pub val: usize,
}

impl DatasetMeta {
    fn render(&self) -> String {
        format!(
            "n_classes = {}\nheight = {}\nwidth = {}\nseed = {}\ntrain = {}\nval = {}\n",
            self.n_classes, self.height, self.width, self.seed, self.train, self.val
        )
    }

    fn parse(text: &str) -> Result<Self> {
        let get = |key: &str| -> Result<u64> {
            text.lines()
                .filter_map(|l| l.split_once('='))
                .find(|(k, _)| k.trim() == key)
                .and_then(|(_, v)| v.trim().parse().ok())
                .ok_or_else(|| DataError::Format(format!("meta.txt lacks `{key}`")))
        };
        Ok(DatasetMeta {
            n_classes: get("n_classes")? as usize,
            height: get("height")? as usize,
            width: get("width")? as usize,
            seed: get("seed")?,
            train: get("train")? as usize,
            val: get("val")? as usize,
        })
    }
}

fn sample_paths(split: Split, index: usize) -> (String, String) {
    let stem = format!("{}_{index:05}", split.name());
    (format!("images/{stem}.ppm"), format!("labels/{stem}.pgm"))
}

/// Generates `count` scenes into `dir`. The last `val` indices form the
/// validation split. Writes `train.txt` and `val.txt`, each a sorted list
/// of image paths relative to `dir`; a label lives at the same path with
/// `labels/` and `.pgm` in place of `images/` and `.ppm`.
pub fn write_dataset(dir: &Path, spec: &SceneSpec, count: usize, val: usize) -> Result<DatasetMeta> {
    spec.validate()?;
    if val > count {
        return Err(DataError::Spec(format!("{val} validation scenes out of {count}")));
    }
    fs::create_dir_all(dir.join("images"))?;
    fs::create_dir_all(dir.join("labels"))?;
    let train = count - val;
    for (split, range) in [(Split::Train, 0..train), (Split::Val, train..count)] {
        let mut manifest = Vec::new();
        for (i, index) in range.enumerate() {
            let (image, labels) = generate_scene(spec, index as u64)?;
            let (ip, lp) = sample_paths(split, i);
            write_ppm(&dir.join(&ip), &image)?;
            write_pgm(&dir.join(&lp), &labels)?;
            manifest.push(ip);
        }
        manifest.sort();
        let mut f = fs::File::create(dir.join(format!("{}.txt", split.name())))?;
        for line in &manifest {
            writeln!(f, "{line}")?;
        }
    }
    let meta = DatasetMeta {
        n_classes: spec.n_classes,
        height: spec.height,
        width: spec.width,
        seed: spec.seed,
        train,
        val,
    };
    fs::write(dir.join("meta.txt"), meta.render())?;
    Ok(meta)
}

/// One split loaded fully into memory.
#[derive(Debug, Clone)]
pub struct Dataset {
    pub meta: DatasetMeta,
    pub samples: Vec<(Image, LabelMap)>,
    pub paths: Vec<PathBuf>,
}

impl Dataset {
    pub fn open(dir: &Path, split: Split) -> Result<Self> {
        let meta = DatasetMeta::parse(&fs::read_to_string(dir.join("meta.txt"))?)?;
        let manifest = fs::read_to_string(dir.join(format!("{}.txt", split.name())))?;
        let mut samples = Vec::new();
        let mut paths = Vec::new();
        for line in manifest.lines().map(str::trim).filter(|l| !l.is_empty()) {
            let label_rel = line
                .strip_prefix("images/")
                .and_then(|s| s.strip_suffix(".ppm"))
                .map(|stem| format!("labels/{stem}.pgm"))
                .ok_or_else(|| DataError::Format(format!("manifest entry `{line}`")))?;
            let image = read_ppm(&dir.join(line))?;
            let labels = read_pgm(&dir.join(&label_rel), meta.n_classes)?;
            if (image.height, image.width) != (labels.height, labels.width) {
                return Err(DataError::Format(format!("{line}: image and labels differ in size")));
            }
            samples.push((image, labels));
            paths.push(PathBuf::from(line));
        }
        Ok(Dataset { meta, samples, paths })
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }
}
