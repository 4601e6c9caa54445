//! CSV series files, image dumps and small JSON helpers.

use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::Path;

use ndarray::Array3;
use serde::{de::DeserializeOwned, Deserialize, Serialize};

use crate::error::{io_err, validation, Error, Result};
use crate::imaging::{CanvasImage, FoldPlan};
use crate::series::{LabeledSeries, MultivariateSeries, Series};

fn create(path: &Path) -> Result<File> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).map_err(|e| io_err(dir, e))?;
    }
    File::create(path).map_err(|e| io_err(path, e))
}

/// Writes `t,value,label`.
pub fn write_series_csv(path: &Path, s: &LabeledSeries) -> Result<()> {
    let mut w = csv::Writer::from_writer(create(path)?);
    w.write_record(["t", "value", "label"])?;
    for (t, (v, y)) in s.series.values().iter().zip(&s.labels).enumerate() {
        w.write_record([t.to_string(), v.to_string(), y.to_string()])?;
    }
    w.flush().map_err(|e| io_err(path, e))
}

/// Writes `t,v0,..,vK[,label]`.
pub fn write_multivariate_csv(path: &Path, s: &MultivariateSeries) -> Result<()> {
    let mut w = csv::Writer::from_writer(create(path)?);
    let mut header: Vec<String> = vec!["t".into()];
    header.extend((0..s.n_vars()).map(|v| format!("v{v}")));
    if s.labels.is_some() {
        header.push("label".into());
    }
    w.write_record(&header)?;
    for t in 0..s.len() {
        let mut rec = vec![t.to_string()];
        rec.extend(s.variables().iter().map(|v| v.values()[t].to_string()));
        if let Some(l) = &s.labels {
            rec.push(l[t].to_string());
        }
        w.write_record(&rec)?;
    }
    w.flush().map_err(|e| io_err(path, e))
}

/// Reads a series CSV. Every column other than `t` and `label` is a variable;
/// the `label` column is optional.
pub fn read_series_csv(path: &Path) -> Result<MultivariateSeries> {
    let mut r = csv::Reader::from_reader(File::open(path).map_err(|e| io_err(path, e))?);
    let header = r.headers()?.clone();
    let label_col = header.iter().position(|h| h == "label");
    let value_cols: Vec<usize> = header
        .iter()
        .enumerate()
        .filter(|(i, h)| *h != "t" && Some(*i) != label_col)
        .map(|(i, _)| i)
        .collect();
    if value_cols.is_empty() {
        return Err(validation(format!("{} has no value columns", path.display())));
    }
    let mut vars = vec![Vec::new(); value_cols.len()];
    let mut labels = Vec::new();
    for (line, rec) in r.records().enumerate() {
        let rec = rec?;
        for (k, &c) in value_cols.iter().enumerate() {
            let field = rec.get(c).unwrap_or("");
            let v: f64 = field.trim().parse().map_err(|_| {
                validation(format!("{}: row {}: bad value {field:?}", path.display(), line + 1))
            })?;
            vars[k].push(v);
        }
        if let Some(c) = label_col {
            let field = rec.get(c).unwrap_or("").trim();
            let y = match field {
                "0" | "0.0" => 0,
                "1" | "1.0" => 1,
                _ => {
                    return Err(validation(format!(
                        "{}: row {}: label must be 0 or 1, got {field:?}",
                        path.display(),
                        line + 1
                    )))
                }
            };
            labels.push(y);
        }
    }
    let vars = vars.into_iter().map(Series::new).collect::<Result<Vec<_>>>()?;
    MultivariateSeries::new(vars, label_col.map(|_| labels))
}

/// Reads a univariate labelled CSV.
pub fn read_labeled_csv(path: &Path) -> Result<LabeledSeries> {
    let m = read_series_csv(path)?;
    if m.n_vars() != 1 {
        return Err(validation(format!("{} has {} value columns, expected 1", path.display(), m.n_vars())));
    }
    let labels = m
        .labels
        .clone()
        .ok_or_else(|| validation(format!("{} has no label column", path.display())))?;
    LabeledSeries::new(m.variables()[0].clone(), labels)
}

/// Reads one numeric column (`score`, `value` or the first non-`t` column).
pub fn read_column_csv(path: &Path, preferred: &[&str]) -> Result<Vec<f64>> {
    let mut r = csv::Reader::from_reader(File::open(path).map_err(|e| io_err(path, e))?);
    let header = r.headers()?.clone();
    let col = preferred
        .iter()
        .find_map(|p| header.iter().position(|h| h == *p))
        .or_else(|| header.iter().position(|h| h != "t"))
        .ok_or_else(|| validation(format!("{} has no data column", path.display())))?;
    let mut out = Vec::new();
    for rec in r.records() {
        let rec = rec?;
        let f = rec.get(col).unwrap_or("").trim();
        out.push(f.parse().map_err(|_| validation(format!("{}: bad number {f:?}", path.display())))?);
    }
    Ok(out)
}

/// Writes named columns with a leading `t` index.
pub fn write_columns_csv(path: &Path, names: &[&str], cols: &[&[f64]]) -> Result<()> {
    let mut w = csv::Writer::from_writer(create(path)?);
    let mut header = vec!["t"];
    header.extend_from_slice(names);
    w.write_record(&header)?;
    let n = cols.first().map_or(0, |c| c.len());
    for t in 0..n {
        let mut rec = vec![t.to_string()];
        rec.extend(cols.iter().map(|c| c[t].to_string()));
        w.write_record(&rec)?;
    }
    w.flush().map_err(|e| io_err(path, e))
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut w = BufWriter::new(create(path)?);
    serde_json::to_writer_pretty(&mut w, value)?;
    w.write_all(b"\n").map_err(|e| io_err(path, e))?;
    w.flush().map_err(|e| io_err(path, e))
}

pub fn read_json<T: DeserializeOwned>(path: &Path) -> Result<T> {
    let text = std::fs::read_to_string(path).map_err(|e| io_err(path, e))?;
    Ok(serde_json::from_str(&text)?)
}

/// JSON form of a canvas image: `[224, 224, 3]` row-major values plus plan.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ImageRecord {
    pub shape: [usize; 3],
    pub values: Vec<f64>,
    pub plan: FoldPlan,
}

impl From<&CanvasImage> for ImageRecord {
    fn from(img: &CanvasImage) -> Self {
        let (h, w, c) = img.pixels.dim();
        Self {
            shape: [h, w, c],
            values: img.pixels.iter().copied().collect(),
            plan: img.plan.clone(),
        }
    }
}

impl TryFrom<ImageRecord> for CanvasImage {
    type Error = Error;

    fn try_from(r: ImageRecord) -> Result<Self> {
        let [h, w, c] = r.shape;
        let pixels = Array3::from_shape_vec((h, w, c), r.values)
            .map_err(|e| validation(format!("bad image payload: {e}")))?;
        Ok(CanvasImage { pixels, plan: r.plan })
    }
}

/// 8-bit RGB PNG of the canvas (pixels rounded and clamped).
pub fn write_png(path: &Path, img: &CanvasImage) -> Result<()> {
    let (h, w, _) = img.pixels.dim();
    let file = BufWriter::new(create(path)?);
    let mut enc = png::Encoder::new(file, w as u32, h as u32);
    enc.set_color(png::ColorType::Rgb);
    enc.set_depth(png::BitDepth::Eight);
    let mut writer = enc.write_header()?;
    let data: Vec<u8> = img.pixels.iter().map(|&p| p.round().clamp(0.0, 255.0) as u8).collect();
    writer.write_image_data(&data)?;
    writer.finish()?;
    Ok(())
}
