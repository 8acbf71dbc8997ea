use std::collections::BTreeMap;
use std::fs;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use walkdir::WalkDir;

use super::{BoundingBox, Track};
use crate::error::{Error, Result};

/// Annotation frame rate of both ego-view benchmarks.
const BENCHMARK_FPS: f64 = 30.0;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "kebab-case")]
pub enum DataFormat {
    /// JAAD per-video CVAT XML annotations.
    JaadXml,
    /// PIE per-video `*_annt.xml` annotations, grouped in `setNN` folders.
    Pie,
    /// The toolkit's canonical one-record-per-frame JSON lines.
    Jsonl,
}

impl FromStr for DataFormat {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "jaad-xml" | "jaad" => Ok(Self::JaadXml),
            "pie" => Ok(Self::Pie),
            "jsonl" => Ok(Self::Jsonl),
            other => Err(Error::Config(format!("unknown dataset format {other:?}"))),
        }
    }
}

/// One line of the canonical JSONL interchange format.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FrameRecord {
    pub video_id: String,
    pub track_id: String,
    pub frame: u64,
    pub cx: f64,
    pub cy: f64,
    pub w: f64,
    pub h: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub fps: Option<f64>,
}

pub fn load_tracks(path: &Path, format: DataFormat) -> Result<Vec<Track>> {
    if !path.exists() {
        return Err(Error::Io(std::io::Error::new(
            std::io::ErrorKind::NotFound,
            format!("{} does not exist", path.display()),
        )));
    }
    let tracks = match format {
        DataFormat::Jsonl => {
            let mut out = Vec::new();
            for file in files_with_suffix(path, ".jsonl")? {
                out.extend(read_jsonl(&file)?);
            }
            out
        }
        DataFormat::JaadXml => {
            let mut out = Vec::new();
            for file in files_with_suffix(path, ".xml")? {
                let video = file_stem(&file);
                out.extend(read_cvat_xml(&file, &video)?);
            }
            out
        }
        DataFormat::Pie => {
            let mut out = Vec::new();
            for file in files_with_suffix(path, ".xml")? {
                let stem = file_stem(&file);
                let stem = stem.strip_suffix("_annt").unwrap_or(&stem).to_string();
                let video = match file.parent().and_then(|p| p.file_name()) {
                    Some(set) if file.parent() != Some(path) => {
                        format!("{}/{stem}", set.to_string_lossy())
                    }
                    _ => stem,
                };
                out.extend(read_cvat_xml(&file, &video)?);
            }
            out
        }
    };
    if tracks.is_empty() {
        return Err(Error::EmptyDataset(path.to_path_buf()));
    }
    Ok(tracks)
}

fn file_stem(p: &Path) -> String {
    p.file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_default()
}

/// `path` itself when it is a file, else every matching file below it in
/// sorted order.
fn files_with_suffix(path: &Path, suffix: &str) -> Result<Vec<PathBuf>> {
    if path.is_file() {
        return Ok(vec![path.to_path_buf()]);
    }
    let mut files = Vec::new();
    for entry in WalkDir::new(path).sort_by_file_name() {
        let entry = entry.map_err(|e| Error::Io(e.into()))?;
        if entry.file_type().is_file() && entry.file_name().to_string_lossy().ends_with(suffix) {
            files.push(entry.into_path());
        }
    }
    Ok(files)
}

fn parse_err(file: &Path, record: impl Into<String>, message: impl ToString) -> Error {
    Error::Parse {
        file: file.to_path_buf(),
        record: record.into(),
        message: message.to_string(),
    }
}

fn read_jsonl(file: &Path) -> Result<Vec<Track>> {
    let reader = BufReader::new(fs::File::open(file)?);
    let mut grouped: BTreeMap<(String, String), (Vec<(u64, BoundingBox)>, Option<f64>)> =
        BTreeMap::new();
    for (i, line) in reader.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let record = format!("line {}", i + 1);
        let r: FrameRecord =
            serde_json::from_str(&line).map_err(|e| parse_err(file, record.clone(), e))?;
        let b = BoundingBox::new(r.cx, r.cy, r.w, r.h).map_err(|e| parse_err(file, record.clone(), e))?;
        let entry = grouped.entry((r.video_id, r.track_id)).or_default();
        entry.0.push((r.frame, b));
        if let Some(fps) = r.fps {
            entry.1 = Some(fps);
        }
    }
    grouped
        .into_iter()
        .map(|((video, track), (mut rows, fps))| {
            rows.sort_by_key(|r| r.0);
            if let Some(dup) = rows.windows(2).find(|p| p[0].0 == p[1].0) {
                return Err(parse_err(
                    file,
                    format!("track {video}/{track}"),
                    format!("duplicate frame {}", dup[0].0),
                ));
            }
            let (frames, boxes) = rows.into_iter().unzip();
            Track::new(video.clone(), track.clone(), frames, boxes, fps.unwrap_or(BENCHMARK_FPS))
                .map_err(|e| parse_err(file, format!("track {video}/{track}"), e))
        })
        .collect()
}

/// Reads the CVAT-style layout shared by JAAD and PIE:
/// `<track label="pedestrian"><box frame=.. xtl=.. ytl=.. xbr=.. ybr=.. outside=..>`
/// with an `<attribute name="id">` child naming the pedestrian.
fn read_cvat_xml(file: &Path, video_id: &str) -> Result<Vec<Track>> {
    let text = fs::read_to_string(file)?;
    let doc = roxmltree::Document::parse(&text).map_err(|e| parse_err(file, "document", e))?;
    let mut tracks = Vec::new();
    let track_nodes = doc
        .descendants()
        .filter(|n| n.has_tag_name("track"))
        .filter(|n| matches!(n.attribute("label"), Some("pedestrian") | Some("ped")));
    for (ti, node) in track_nodes.enumerate() {
        let mut rows: Vec<(u64, BoundingBox)> = Vec::new();
        let mut id: Option<String> = None;
        for b in node.children().filter(|c| c.has_tag_name("box")) {
            let frame_attr = b.attribute("frame").unwrap_or("?");
            let record = format!("track {ti} frame {frame_attr}");
            if b.attribute("outside") == Some("1") {
                continue;
            }
            let num = |name: &str| -> Result<f64> {
                b.attribute(name)
                    .ok_or_else(|| parse_err(file, record.clone(), format!("missing {name}")))?
                    .parse::<f64>()
                    .map_err(|e| parse_err(file, record.clone(), format!("{name}: {e}")))
            };
            let frame = frame_attr
                .parse::<u64>()
                .map_err(|e| parse_err(file, record.clone(), format!("frame: {e}")))?;
            let corners = [num("xtl")?, num("ytl")?, num("xbr")?, num("ybr")?];
            let bb = BoundingBox::from_corners(corners);
            bb.validate().map_err(|e| parse_err(file, record.clone(), e))?;
            if id.is_none() {
                id = b
                    .children()
                    .find(|a| a.has_tag_name("attribute") && a.attribute("name") == Some("id"))
                    .and_then(|a| a.text())
                    .map(|s| s.trim().to_string());
            }
            rows.push((frame, bb));
        }
        if rows.is_empty() {
            continue;
        }
        rows.sort_by_key(|r| r.0);
        rows.dedup_by_key(|r| r.0);
        let track_id = id.unwrap_or_else(|| format!("track_{ti}"));
        let (frames, boxes) = rows.into_iter().unzip();
        tracks.push(
            Track::new(video_id, track_id.clone(), frames, boxes, BENCHMARK_FPS)
                .map_err(|e| parse_err(file, format!("track {track_id}"), e))?,
        );
    }
    Ok(tracks)
}

/// Writes tracks in the canonical format, one record per frame, in track order.
pub fn write_jsonl(tracks: &[Track], path: &Path) -> Result<()> {
    let mut out = BufWriter::new(fs::File::create(path)?);
    for t in tracks {
        for (frame, b) in t.frames.iter().zip(&t.boxes) {
            let rec = FrameRecord {
                video_id: t.video_id.clone(),
                track_id: t.track_id.clone(),
                frame: *frame,
                cx: b.cx,
                cy: b.cy,
                w: b.w,
                h: b.h,
                fps: (t.fps != BENCHMARK_FPS).then_some(t.fps),
            };
            serde_json::to_writer(&mut out, &rec)?;
            out.write_all(b"\n")?;
        }
    }
    out.flush()?;
    Ok(())
}
