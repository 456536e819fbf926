//! The FOMLDS v1 image dataset format and IDX conversion.
//!
//! A FOMLDS file starts with the text line
//! `FOMLDS v1 <count> <height> <width> <channels> <binary|csv>`.
//! A binary body holds, per image, the label as a little-endian `u32`
//! followed by one byte per pixel (value / 255). A CSV body holds one line
//! per image: the label, then the pixel values.

use std::fs;
use std::io::{BufRead, BufReader, BufWriter, Read, Write};
use std::path::Path;

use foml_core::streams::BaseDataset;

#[derive(Debug, thiserror::Error)]
pub enum DatasetError {
    #[error("{path}: {source}")]
    Io {
        path: String,
        source: std::io::Error,
    },
    #[error("{0}")]
    Format(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Encoding {
    Binary,
    Csv,
}

impl std::str::FromStr for Encoding {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "binary" => Ok(Encoding::Binary),
            "csv" => Ok(Encoding::Csv),
            _ => Err(format!("unknown encoding `{s}` (expected binary or csv)")),
        }
    }
}

const MAGIC: &str = "FOMLDS";
const VERSION: &str = "v1";

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> DatasetError + '_ {
    move |source| DatasetError::Io {
        path: path.display().to_string(),
        source,
    }
}

fn format_err(m: impl Into<String>) -> DatasetError {
    DatasetError::Format(m.into())
}

pub fn write_dataset(path: &Path, data: &BaseDataset, encoding: Encoding) -> Result<(), DatasetError> {
    let file = fs::File::create(path).map_err(io_err(path))?;
    let mut w = BufWriter::new(file);
    let enc = match encoding {
        Encoding::Binary => "binary",
        Encoding::Csv => "csv",
    };
    let mut body = || -> std::io::Result<()> {
        writeln!(
            w,
            "{MAGIC} {VERSION} {} {} {} {} {enc}",
            data.len(),
            data.height,
            data.width,
            data.channels
        )?;
        for (img, &label) in data.images.iter().zip(&data.labels) {
            match encoding {
                Encoding::Binary => {
                    w.write_all(&(label as u32).to_le_bytes())?;
                    let bytes: Vec<u8> = img
                        .iter()
                        .map(|&v| (v.clamp(0.0, 1.0) * 255.0).round() as u8)
                        .collect();
                    w.write_all(&bytes)?;
                }
                Encoding::Csv => {
                    write!(w, "{label}")?;
                    for v in img {
                        write!(w, ",{v}")?;
                    }
                    writeln!(w)?;
                }
            }
        }
        w.flush()
    };
    body().map_err(io_err(path))
}

pub fn read_dataset(path: &Path) -> Result<BaseDataset, DatasetError> {
    let file = fs::File::open(path).map_err(io_err(path))?;
    let mut r = BufReader::new(file);
    let mut header = String::new();
    r.read_line(&mut header).map_err(io_err(path))?;
    let fields: Vec<&str> = header.split_whitespace().collect();
    if fields.first() != Some(&MAGIC) {
        return Err(format_err(format!("{}: not a FOMLDS file", path.display())));
    }
    if fields.get(1) != Some(&VERSION) {
        return Err(format_err(format!(
            "{}: unsupported FOMLDS version {:?}",
            path.display(),
            fields.get(1)
        )));
    }
    if fields.len() != 7 {
        return Err(format_err(format!("{}: malformed header", path.display())));
    }
    let num = |i: usize| {
        fields[i]
            .parse::<usize>()
            .map_err(|_| format_err(format!("{}: bad header field `{}`", path.display(), fields[i])))
    };
    let (n, h, w, c) = (num(2)?, num(3)?, num(4)?, num(5)?);
    let item = h * w * c;
    let mut images = Vec::with_capacity(n);
    let mut labels = Vec::with_capacity(n);
    match fields[6] {
        "binary" => {
            let mut buf = vec![0u8; 4 + item];
            for i in 0..n {
                r.read_exact(&mut buf)
                    .map_err(|_| format_err(format!("{}: truncated at image {i}", path.display())))?;
                labels.push(u32::from_le_bytes([buf[0], buf[1], buf[2], buf[3]]) as usize);
                images.push(buf[4..].iter().map(|&b| b as f64 / 255.0).collect());
            }
        }
        "csv" => {
            for (i, line) in r.lines().enumerate().take(n) {
                let line = line.map_err(io_err(path))?;
                let mut parts = line.split(',');
                let bad = || format_err(format!("{}: malformed line {}", path.display(), i + 2));
                let label = parts.next().and_then(|l| l.parse().ok()).ok_or_else(bad)?;
                let img: Vec<f64> = parts
                    .map(|p| p.parse::<f64>())
                    .collect::<Result<_, _>>()
                    .map_err(|_| bad())?;
                labels.push(label);
                images.push(img);
            }
            if images.len() != n {
                return Err(format_err(format!(
                    "{}: expected {n} images, found {}",
                    path.display(),
                    images.len()
                )));
            }
        }
        other => {
            return Err(format_err(format!(
                "{}: unknown encoding `{other}`",
                path.display()
            )))
        }
    }
    BaseDataset::new(h, w, c, images, labels).map_err(|e| format_err(e.to_string()))
}

fn be_u32(bytes: &[u8], at: usize) -> Result<usize, DatasetError> {
    bytes
        .get(at..at + 4)
        .map(|b| u32::from_be_bytes([b[0], b[1], b[2], b[3]]) as usize)
        .ok_or_else(|| format_err("IDX header is truncated"))
}

/// Parses an IDX image file (unsigned bytes, three dimensions).
pub fn parse_idx_images(bytes: &[u8]) -> Result<(usize, usize, Vec<Vec<f64>>), DatasetError> {
    if be_u32(bytes, 0)? != 0x0803 {
        return Err(format_err("not an IDX image file (expected magic 0x00000803)"));
    }
    let (n, h, w) = (be_u32(bytes, 4)?, be_u32(bytes, 8)?, be_u32(bytes, 12)?);
    let body = &bytes[16..];
    if body.len() < n * h * w {
        return Err(format_err(format!(
            "IDX image file holds {} bytes, {n} images of {h}x{w} need {}",
            body.len(),
            n * h * w
        )));
    }
    let images = body
        .chunks_exact(h * w)
        .take(n)
        .map(|c| c.iter().map(|&b| b as f64 / 255.0).collect())
        .collect();
    Ok((h, w, images))
}

/// Parses an IDX label file (unsigned bytes, one dimension).
pub fn parse_idx_labels(bytes: &[u8]) -> Result<Vec<usize>, DatasetError> {
    if be_u32(bytes, 0)? != 0x0801 {
        return Err(format_err("not an IDX label file (expected magic 0x00000801)"));
    }
    let n = be_u32(bytes, 4)?;
    let body = &bytes[8..];
    if body.len() < n {
        return Err(format_err(format!(
            "IDX label file holds {} labels, header says {n}",
            body.len()
        )));
    }
    Ok(body[..n].iter().map(|&b| b as usize).collect())
}

/// Converts an IDX image/label pair to FOMLDS, keeping at most `limit` images.
pub fn convert_idx(
    images: &Path,
    labels: &Path,
    out: &Path,
    encoding: Encoding,
    limit: Option<usize>,
) -> Result<BaseDataset, DatasetError> {
    let image_bytes = fs::read(images).map_err(io_err(images))?;
    let label_bytes = fs::read(labels).map_err(io_err(labels))?;
    let (h, w, mut imgs) = parse_idx_images(&image_bytes)?;
    let mut labs = parse_idx_labels(&label_bytes)?;
    if imgs.len() != labs.len() {
        return Err(format_err(format!(
            "{} images but {} labels",
            imgs.len(),
            labs.len()
        )));
    }
    if let Some(l) = limit {
        imgs.truncate(l);
        labs.truncate(l);
    }
    let data = BaseDataset::new(h, w, 1, imgs, labs).map_err(|e| format_err(e.to_string()))?;
    write_dataset(out, &data, encoding)?;
    Ok(data)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn idx_pair() -> (Vec<u8>, Vec<u8>) {
        let mut images = vec![0, 0, 8, 3, 0, 0, 0, 2, 0, 0, 0, 2, 0, 0, 0, 2];
        images.extend_from_slice(&[0, 255, 51, 102, 255, 0, 0, 0]);
        let labels = vec![0, 0, 8, 1, 0, 0, 0, 2, 7, 3];
        (images, labels)
    }

    #[test]
    fn idx_files_parse() {
        let (images, labels) = idx_pair();
        let (h, w, imgs) = parse_idx_images(&images).unwrap();
        assert_eq!((h, w), (2, 2));
        assert_eq!(imgs[0], vec![0.0, 1.0, 0.2, 0.4]);
        assert_eq!(parse_idx_labels(&labels).unwrap(), vec![7, 3]);
        assert!(parse_idx_labels(&images).is_err());
        assert!(parse_idx_images(&images[..20]).is_err());
    }

    #[test]
    fn both_encodings_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let (images, labels) = idx_pair();
        let (ip, lp) = (dir.path().join("i"), dir.path().join("l"));
        fs::write(&ip, images).unwrap();
        fs::write(&lp, labels).unwrap();
        for enc in [Encoding::Binary, Encoding::Csv] {
            let out = dir.path().join("d.fomlds");
            let data = convert_idx(&ip, &lp, &out, enc, None).unwrap();
            assert_eq!(read_dataset(&out).unwrap(), data);
        }
        let out = dir.path().join("one.fomlds");
        assert_eq!(convert_idx(&ip, &lp, &out, Encoding::Binary, Some(1)).unwrap().len(), 1);
    }

    #[test]
    fn foreign_files_are_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("x");
        fs::write(&p, "NOTDS v1 1 1 1 1 csv\n0,0\n").unwrap();
        assert!(read_dataset(&p).unwrap_err().to_string().contains("not a FOMLDS file"));
        fs::write(&p, "FOMLDS v9 1 1 1 1 csv\n0,0\n").unwrap();
        assert!(read_dataset(&p).unwrap_err().to_string().contains("version"));
    }
}
