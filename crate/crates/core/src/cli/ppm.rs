//! Binary PPM (P6) images and image-folder datasets.

use std::fs;
use std::path::{Path, PathBuf};

use numcore::Tensor;

use crate::error::{Error, Result};
use crate::eval::LabeledDataset;

fn image_err(path: &Path, reason: impl Into<String>) -> Error {
    Error::Image {
        path: path.to_path_buf(),
        reason: reason.into(),
    }
}

/// Parses a P6 file into a `[3,H,W]` tensor with values in `[0,1]`.
pub fn decode_ppm(bytes: &[u8], path: &Path) -> Result<Tensor<f32>> {
    let mut pos = 0;
    let mut fields = Vec::with_capacity(4);
    while fields.len() < 4 {
        while pos < bytes.len() && (bytes[pos].is_ascii_whitespace() || bytes[pos] == b'#') {
            if bytes[pos] == b'#' {
                while pos < bytes.len() && bytes[pos] != b'\n' {
                    pos += 1;
                }
            } else {
                pos += 1;
            }
        }
        let start = pos;
        while pos < bytes.len() && !bytes[pos].is_ascii_whitespace() && bytes[pos] != b'#' {
            pos += 1;
        }
        if start == pos {
            return Err(image_err(path, "truncated header"));
        }
        fields.push(std::str::from_utf8(&bytes[start..pos]).unwrap_or(""));
    }
    if fields[0] != "P6" {
        return Err(image_err(path, "not a binary PPM (P6) file"));
    }
    let num = |s: &str, what: &str| -> Result<usize> {
        s.parse::<usize>()
            .ok()
            .filter(|&v| v > 0)
            .ok_or_else(|| image_err(path, format!("invalid {what} {s:?}")))
    };
    let (w, h, maxval) = (num(fields[1], "width")?, num(fields[2], "height")?, num(fields[3], "maxval")?);
    if maxval > 255 {
        return Err(image_err(path, "16-bit PPM is not supported"));
    }
    // exactly one whitespace byte separates the header from the raster
    pos += 1;
    let raster = bytes.get(pos..pos + 3 * w * h).ok_or_else(|| image_err(path, "truncated raster"))?;
    let plane = w * h;
    let mut data = vec![0.0f32; 3 * plane];
    for (i, px) in raster.chunks_exact(3).enumerate() {
        for c in 0..3 {
            data[c * plane + i] = px[c] as f32 / maxval as f32;
        }
    }
    Ok(Tensor::new([3, h, w], data)?)
}

/// Encodes a `[3,H,W]` image as P6 with maxval 255.
pub fn encode_ppm(image: &Tensor<f32>) -> Result<Vec<u8>> {
    let [c, h, w] = match *image.shape() {
        [c, h, w] => [c, h, w],
        ref s => return Err(Error::invalid(format!("expected a [3,H,W] image, got {s:?}"))),
    };
    if c != 3 {
        return Err(Error::invalid(format!("expected 3 channels, got {c}")));
    }
    let mut out = format!("P6\n{w} {h}\n255\n").into_bytes();
    let plane = w * h;
    let d = image.data();
    out.reserve(3 * plane);
    for i in 0..plane {
        for c in 0..3 {
            out.push((d[c * plane + i].clamp(0.0, 1.0) * 255.0).round() as u8);
        }
    }
    Ok(out)
}

pub fn read_ppm(path: &Path) -> Result<Tensor<f32>> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_ppm(&bytes, path)
}

pub fn write_ppm(path: &Path, image: &Tensor<f32>) -> Result<()> {
    fs::write(path, encode_ppm(image)?).map_err(|e| Error::io(path, e))
}

/// `*.ppm` files of a directory in lexicographic order.
pub fn list_ppm(dir: &Path) -> Result<Vec<PathBuf>> {
    let mut files = Vec::new();
    for entry in fs::read_dir(dir).map_err(|e| Error::io(dir, e))? {
        let path = entry.map_err(|e| Error::io(dir, e))?.path();
        if path.extension().is_some_and(|e| e.eq_ignore_ascii_case("ppm")) && path.is_file() {
            files.push(path);
        }
    }
    files.sort();
    Ok(files)
}

/// Every image of a folder, paired with its path.
pub fn read_image_dir(dir: &Path) -> Result<Vec<(PathBuf, Tensor<f32>)>> {
    list_ppm(dir)?
        .into_iter()
        .map(|p| read_ppm(&p).map(|img| (p, img)))
        .collect()
}

const LABELS_FILE: &str = "labels.csv";

/// Writes `NNNNN.ppm` images plus a `labels.csv` (`file,label`).
pub fn save_dataset(dir: &Path, dataset: &LabeledDataset) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut csv = String::from("file,label\n");
    for i in 0..dataset.len() {
        let name = format!("{i:05}.ppm");
        write_ppm(&dir.join(&name), &dataset.image(i)?)?;
        csv.push_str(&format!("{name},{}\n", dataset.labels[i]));
    }
    let path = dir.join(LABELS_FILE);
    fs::write(&path, csv).map_err(|e| Error::io(&path, e))
}

/// Reads a directory written by [`save_dataset`]; all images must share a size.
pub fn load_dataset(dir: &Path) -> Result<LabeledDataset> {
    let path = dir.join(LABELS_FILE);
    let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    let mut images = Vec::new();
    let mut labels = Vec::new();
    for (n, line) in text.lines().enumerate().skip(1).filter(|(_, l)| !l.trim().is_empty()) {
        let (file, label) = line
            .split_once(',')
            .ok_or_else(|| Error::Config(format!("{}:{}: expected `file,label`", path.display(), n + 1)))?;
        let label: usize = label
            .trim()
            .parse()
            .map_err(|_| Error::Config(format!("{}:{}: bad label {label:?}", path.display(), n + 1)))?;
        images.push(read_ppm(&dir.join(file.trim()))?);
        labels.push(label);
    }
    if images.is_empty() {
        return Err(Error::Config(format!("{} lists no images", path.display())));
    }
    let classes = labels.iter().max().map_or(0, |m| m + 1);
    let batch = Tensor::stack(&images).map_err(|_| image_err(dir, "images differ in size"))?;
    LabeledDataset::new(batch, labels, classes)
}
