use std::io::Read;
use std::path::Path;

use image::imageops::FilterType;
use image::{DynamicImage, GenericImageView};
use ndarray::Array2;
use rand::seq::SliceRandom;
use rand::Rng;

use super::{io_err, DataError, LabelledDataset, RawDataset, Result, Split};

/// Aligned faces: sensitive and target attributes plus the image files.
#[derive(Debug, Clone)]
pub struct CelebaSubset {
    pub dataset: LabelledDataset,
    pub files: Vec<String>,
    pub sensitive: String,
    pub target: String,
}

struct AttributeTable {
    names: Vec<String>,
    rows: Vec<(String, Vec<bool>)>,
}

fn malformed(detail: impl Into<String>) -> DataError {
    DataError::Malformed { what: "celeba attribute list".into(), detail: detail.into() }
}

fn parse_attributes(text: &str) -> Result<AttributeTable> {
    let mut lines = text.lines();
    lines.next().ok_or_else(|| malformed("empty file"))?;
    let names: Vec<String> = lines.next().ok_or_else(|| malformed("missing header"))?.split_whitespace().map(String::from).collect();
    let mut rows = Vec::new();
    for line in lines.filter(|l| !l.trim().is_empty()) {
        let mut parts = line.split_whitespace();
        let file = parts.next().expect("non-empty line").to_string();
        let values = parts
            .map(|v| match v {
                "1" => Ok(true),
                "-1" => Ok(false),
                other => Err(malformed(format!("bad attribute value `{other}` for {file}"))),
            })
            .collect::<Result<Vec<_>>>()?;
        if values.len() != names.len() {
            return Err(malformed(format!("{file} has {} values for {} attributes", values.len(), names.len())));
        }
        rows.push((file, values));
    }
    Ok(AttributeTable { names, rows })
}

/// Centre square crop resized to `side`, as `[3*side*side]` channel-first in `[0, 1]`.
fn to_pixels(img: &DynamicImage, side: usize) -> Vec<f64> {
    let (w, h) = img.dimensions();
    let edge = w.min(h);
    let square = img.crop_imm((w - edge) / 2, (h - edge) / 2, edge, edge);
    let small = square.resize_exact(side as u32, side as u32, FilterType::Triangle).to_rgb8();
    let mut out = vec![0.0; 3 * side * side];
    for (x, y, px) in small.enumerate_pixels() {
        for c in 0..3 {
            out[c * side * side + y as usize * side + x as usize] = px[c] as f64 / 255.0;
        }
    }
    out
}

enum ImageSource {
    Archive(zip::ZipArchive<std::fs::File>),
    Directory(std::path::PathBuf),
}

impl ImageSource {
    fn open(raw: &RawDataset) -> Result<Self> {
        let dir = raw.path("img_align_celeba");
        if dir.is_dir() {
            return Ok(Self::Directory(dir));
        }
        let path = raw.path("img_align_celeba.zip");
        let file = std::fs::File::open(&path).map_err(io_err(&path))?;
        let archive = zip::ZipArchive::new(file).map_err(|e| DataError::CorruptCache(format!("{}: {e}", path.display())))?;
        Ok(Self::Archive(archive))
    }

    fn read(&mut self, name: &str) -> Result<Vec<u8>> {
        match self {
            Self::Directory(dir) => {
                let path = dir.join(name);
                std::fs::read(&path).map_err(io_err(&path))
            }
            Self::Archive(archive) => {
                let nested = format!("img_align_celeba/{name}");
                let key = if archive.index_for_name(&nested).is_some() { nested.as_str() } else { name };
                let mut entry =
                    archive.by_name(key).map_err(|e| DataError::CorruptCache(format!("{name}: {e}")))?;
                let mut bytes = Vec::new();
                entry.read_to_end(&mut bytes).map_err(io_err(Path::new(name)))?;
                Ok(bytes)
            }
        }
    }
}

/// Draws `count` random faces and labels them with two binary attributes
/// (for instance `Male` as sensitive and `Smiling` as target).
pub fn prepare_celeba_subset<R: Rng + ?Sized>(
    raw: &RawDataset,
    sensitive: &str,
    target: &str,
    count: usize,
    side: usize,
    rng: &mut R,
) -> Result<CelebaSubset> {
    let attr_path = raw.path("list_attr_celeba.txt");
    let table = parse_attributes(&std::fs::read_to_string(&attr_path).map_err(io_err(&attr_path))?)?;
    let column = |name: &str| {
        table.names.iter().position(|n| n == name).ok_or_else(|| DataError::UnknownLevel(format!("attribute {name}")))
    };
    let (s_col, y_col) = (column(sensitive)?, column(target)?);
    if count > table.rows.len() {
        return Err(DataError::NotEnoughRecords { needed: count, available: table.rows.len() });
    }
    let mut order: Vec<usize> = (0..table.rows.len()).collect();
    order.shuffle(rng);
    order.truncate(count);

    let mut images = ImageSource::open(raw)?;
    let mut x = Array2::zeros((count, 3 * side * side));
    let (mut s, mut y, mut files) = (Vec::new(), Vec::new(), Vec::new());
    for (row, &i) in order.iter().enumerate() {
        let (file, values) = &table.rows[i];
        let bytes = images.read(file)?;
        let img = image::load_from_memory(&bytes).map_err(|e| DataError::Malformed { what: file.clone(), detail: e.to_string() })?;
        x.row_mut(row).assign(&ndarray::Array1::from(to_pixels(&img, side)));
        s.push(values[s_col] as usize);
        y.push(values[y_col] as usize);
        files.push(file.clone());
    }
    let mut dataset = LabelledDataset::new(x, [3, side, side], s, Some(y), Split::Pool);
    dataset.ids = order;
    Ok(CelebaSubset { dataset, files, sensitive: sensitive.into(), target: target.into() })
}
