//! File formats: PNM images, dataset JSON, metric and log CSVs.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::boxes::BBox;
use crate::data::{Annotation, Dataset, GrayImage};
use crate::error::{Error, Result};
use crate::pipeline::{AblationRow, EvalReport};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AnnotationRecord {
    pub image_id: usize,
    #[serde(rename = "box")]
    pub bbox: BBox,
    pub class_id: u32,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ProposalRecord {
    pub image_id: usize,
    #[serde(rename = "box")]
    pub bbox: BBox,
    pub label: u32,
}

pub fn write_file(path: &Path, bytes: impl AsRef<[u8]>) -> Result<()> {
    if let Some(dir) = path.parent() {
        if !dir.as_os_str().is_empty() {
            fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        }
    }
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

/// Binary PPM (P6) from interleaved RGB bytes.
pub fn encode_ppm(width: usize, height: usize, rgb: &[u8]) -> Result<Vec<u8>> {
    if rgb.len() != width * height * 3 {
        return Err(Error::Shape(format!(
            "{width}x{height} RGB image needs {} bytes, got {}",
            width * height * 3,
            rgb.len()
        )));
    }
    let mut out = format!("P6\n{width} {height}\n255\n").into_bytes();
    out.extend_from_slice(rgb);
    Ok(out)
}

/// Grayscale image written as a P6 PPM with equal channels.
pub fn encode_gray_ppm(img: &GrayImage) -> Vec<u8> {
    let rgb: Vec<u8> = img.pixels.iter().flat_map(|&p| [p, p, p]).collect();
    encode_ppm(img.width, img.height, &rgb).expect("pixel count matches")
}

/// Reads binary P5 or P6 (8-bit). Colour input keeps the first channel.
pub fn decode_pnm(bytes: &[u8]) -> Result<GrayImage> {
    let bad = |m: &str| Error::Input(format!("PNM: {m}"));
    let mut pos = 0;
    let mut token = || -> Result<String> {
        loop {
            while pos < bytes.len() && bytes[pos].is_ascii_whitespace() {
                pos += 1;
            }
            if pos < bytes.len() && bytes[pos] == b'#' {
                while pos < bytes.len() && bytes[pos] != b'\n' {
                    pos += 1;
                }
                continue;
            }
            break;
        }
        let start = pos;
        while pos < bytes.len() && !bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        if start == pos {
            return Err(bad("truncated header"));
        }
        Ok(String::from_utf8_lossy(&bytes[start..pos]).into_owned())
    };
    let magic = token()?;
    let channels = match magic.as_str() {
        "P5" => 1,
        "P6" => 3,
        _ => return Err(bad("only P5 and P6 are supported")),
    };
    let num = |s: String| s.parse::<usize>().map_err(|_| bad("bad header number"));
    let width = num(token()?)?;
    let height = num(token()?)?;
    let maxval = num(token()?)?;
    if maxval != 255 {
        return Err(bad("only 8-bit images are supported"));
    }
    let body = bytes
        .get(pos + 1..)
        .ok_or_else(|| bad("missing pixel data"))?;
    let n = width * height * channels;
    if body.len() < n {
        return Err(bad("truncated pixel data"));
    }
    Ok(GrayImage {
        width,
        height,
        pixels: body[..n].iter().step_by(channels).copied().collect(),
    })
}

pub fn read_pnm(path: &Path) -> Result<GrayImage> {
    decode_pnm(&fs::read(path).map_err(|e| Error::io(path, e))?)
}

pub fn image_file_name(image_id: usize) -> String {
    format!("img_{image_id}.ppm")
}

pub fn annotation_records(data: &Dataset) -> Vec<AnnotationRecord> {
    data.annotations()
        .into_iter()
        .map(|a| AnnotationRecord {
            image_id: a.image_id,
            bbox: a.bbox,
            class_id: a.class_id,
        })
        .collect()
}

pub fn proposal_records(data: &Dataset) -> Vec<ProposalRecord> {
    data.samples
        .iter()
        .flat_map(|s| s.proposals.iter())
        .map(|p| ProposalRecord {
            image_id: p.image_id,
            bbox: p.bbox,
            label: p.label,
        })
        .collect()
}

/// `img_<id>.ppm` per image plus `annotations.json` and `proposals.json`.
pub fn write_dataset(dir: &Path, data: &Dataset) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    for s in &data.samples {
        write_file(
            &dir.join(image_file_name(s.image_id)),
            encode_gray_ppm(&s.image),
        )?;
    }
    write_file(
        &dir.join("annotations.json"),
        serde_json::to_vec_pretty(&annotation_records(data))?,
    )?;
    write_file(
        &dir.join("proposals.json"),
        serde_json::to_vec_pretty(&proposal_records(data))?,
    )?;
    Ok(())
}

pub fn read_annotations(path: &Path) -> Result<Vec<Annotation>> {
    let text = fs::read(path).map_err(|e| Error::io(path, e))?;
    let recs: Vec<AnnotationRecord> = serde_json::from_slice(&text)?;
    Ok(recs
        .into_iter()
        .map(|r| Annotation {
            image_id: r.image_id,
            bbox: r.bbox,
            class_id: r.class_id,
        })
        .collect())
}

pub const METRICS_HEADER: &str = "bucket,recall,accuracy,num_gt,num_det";
pub const CURVE_HEADER: &str = "bucket,threshold,recall,accuracy";

pub fn metrics_csv(report: &EvalReport) -> String {
    let mut out = format!("{METRICS_HEADER}\n");
    for (name, r) in &report.rows {
        writeln!(
            out,
            "{name},{},{},{},{}",
            r.recall, r.accuracy, r.num_gt, r.num_det
        )
        .unwrap();
    }
    out
}

pub fn curves_csv(report: &EvalReport) -> String {
    let mut out = format!("{CURVE_HEADER}\n");
    for (name, points) in &report.curves {
        for p in points {
            writeln!(out, "{name},{},{},{}", p.threshold, p.recall, p.accuracy).unwrap();
        }
    }
    out
}

pub fn lamr_line(report: &EvalReport) -> String {
    format!("lamr={}", report.lamr)
}

/// `metrics.csv`, `curves.csv` and `lamr.txt` under `dir`.
pub fn write_report(dir: &Path, report: &EvalReport) -> Result<()> {
    write_file(&dir.join("metrics.csv"), metrics_csv(report))?;
    write_file(&dir.join("curves.csv"), curves_csv(report))?;
    write_file(&dir.join("lamr.txt"), lamr_line(report) + "\n")
}

pub const ABLATION_HEADER: &str = "variant,input_level,bucket,recall,accuracy,num_gt,num_det,lamr";

pub fn ablation_csv(rows: &[AblationRow]) -> String {
    let mut out = format!("{ABLATION_HEADER}\n");
    for row in rows {
        let level = row.input_level.map(|l| l.name()).unwrap_or("none");
        for (bucket, r) in &row.report.rows {
            writeln!(
                out,
                "{},{level},{bucket},{},{},{},{},{}",
                row.variant, r.recall, r.accuracy, r.num_gt, r.num_det, row.report.lamr
            )
            .unwrap();
        }
    }
    out
}
