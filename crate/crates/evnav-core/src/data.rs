//! On-disk dataset layout and loading.
//!
//! A dataset directory holds `manifest.json` plus, per sequence,
//! `seq_NNNN.evt` (raw events) and `seq_NNNN.labels.jsonl` (one record per
//! complete event window, carrying gate boxes in sensor pixels). Loading a
//! sequence yields embedded input histograms and encoded detection targets,
//! window-aligned.

use crate::detect::{encode_targets, BoundingBox, GroundTruthGrid};
use crate::error::{Error, Result};
use crate::event::{read_event_file, SensorGeometry};
use crate::model::{INPUT_COLS, INPUT_ROWS};
use crate::scalar::Scalar;
use crate::sparse::{event_histogram, SparseTensor};
use serde::{Deserialize, Serialize};
use std::path::{Path, PathBuf};

pub const MANIFEST_FILE: &str = "manifest.json";
pub const DATASET_FORMAT_VERSION: u32 = 1;

pub fn sequence_event_name(index: u32) -> String {
    format!("seq_{index:04}.evt")
}

pub fn sequence_labels_name(index: u32) -> String {
    format!("seq_{index:04}.labels.jsonl")
}

/// Axis-aligned gate box in sensor pixel coordinates.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LabelBox {
    pub x_min: f64,
    pub y_min: f64,
    pub x_max: f64,
    pub y_max: f64,
    pub gate_id: u32,
}

/// Ground-truth boxes for one complete event window.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WindowLabels {
    pub window_index: u32,
    pub t_end_us: i64,
    pub boxes: Vec<LabelBox>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SequenceEntry {
    pub index: u32,
    pub events: String,
    pub labels: String,
    pub n_events: u64,
    pub n_windows: u32,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub format_version: u32,
    pub seed: u64,
    pub domain: String,
    pub window_events: usize,
    pub sensor_width: u16,
    pub sensor_height: u16,
    /// Full generator configuration, opaque here; sufficient to regenerate.
    pub generator: serde_json::Value,
    pub sequences: Vec<SequenceEntry>,
}

pub fn write_manifest(dir: &Path, manifest: &DatasetManifest) -> Result<()> {
    let path = dir.join(MANIFEST_FILE);
    let text = serde_json::to_string_pretty(manifest).map_err(|e| Error::Format {
        path: path.clone(),
        offset: 0,
        message: e.to_string(),
    })?;
    std::fs::write(&path, text).map_err(|e| Error::io(&path, e))
}

pub fn read_manifest(dir: &Path) -> Result<DatasetManifest> {
    let path = dir.join(MANIFEST_FILE);
    let text = std::fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    let m: DatasetManifest = serde_json::from_str(&text).map_err(|e| Error::Format {
        path: path.clone(),
        offset: 0,
        message: e.to_string(),
    })?;
    if m.format_version != DATASET_FORMAT_VERSION {
        return Err(Error::Format {
            path,
            offset: 0,
            message: format!(
                "dataset format version {} unsupported, expected {DATASET_FORMAT_VERSION}",
                m.format_version
            ),
        });
    }
    Ok(m)
}

pub fn write_labels(path: &Path, labels: &[WindowLabels]) -> Result<()> {
    use std::io::Write;
    let file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = std::io::BufWriter::new(file);
    for rec in labels {
        let line = serde_json::to_string(rec).map_err(|e| Error::Format {
            path: path.to_path_buf(),
            offset: 0,
            message: e.to_string(),
        })?;
        writeln!(w, "{line}").map_err(|e| Error::io(path, e))?;
    }
    Ok(())
}

pub fn read_labels(path: &Path) -> Result<Vec<WindowLabels>> {
    use std::io::BufRead;
    let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let rdr = std::io::BufReader::new(file);
    let mut out = Vec::new();
    for (i, line) in rdr.lines().enumerate() {
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let rec: WindowLabels = serde_json::from_str(&line).map_err(|e| Error::Format {
            path: path.to_path_buf(),
            offset: i as u64,
            message: format!("line {}: {e}", i + 1),
        })?;
        out.push(rec);
    }
    Ok(out)
}

/// Maps a sensor-pixel box into network input coordinates (the centered
/// embedding of the sensor plane), confidence 1.
pub fn sensor_box_to_input<T: Scalar>(b: &LabelBox, sensor: SensorGeometry) -> BoundingBox<T> {
    let dx = ((INPUT_COLS - sensor.width as usize) / 2) as f64;
    let dy = ((INPUT_ROWS - sensor.height as usize) / 2) as f64;
    BoundingBox::from_corners(
        T::from_f64(b.x_min + dx),
        T::from_f64(b.y_min + dy),
        T::from_f64(b.x_max + dx),
        T::from_f64(b.y_max + dy),
        T::one(),
    )
}

/// All of one window's boxes in network input coordinates.
pub fn input_boxes<T: Scalar>(labels: &WindowLabels, sensor: SensorGeometry) -> Vec<BoundingBox<T>> {
    labels
        .boxes
        .iter()
        .map(|b| sensor_box_to_input(b, sensor))
        .collect()
}

/// A sequence materialized for training or evaluation: per complete window,
/// the embedded input histogram, the encoded target grid, and the raw labels.
#[derive(Debug, Clone)]
pub struct LoadedSequence<T> {
    pub histograms: Vec<SparseTensor<T>>,
    pub targets: Vec<GroundTruthGrid<T>>,
    pub labels: Vec<WindowLabels>,
    /// (first, last) event timestamp per window, microseconds.
    pub spans: Vec<(i64, i64)>,
    /// Ground-truth boxes discarded because their grid cell was occupied.
    pub dropped_boxes: usize,
}

impl<T: Scalar> LoadedSequence<T> {
    pub fn n_windows(&self) -> usize {
        self.histograms.len()
    }
}

#[derive(Debug, Clone)]
pub struct Dataset {
    pub dir: PathBuf,
    pub manifest: DatasetManifest,
}

impl Dataset {
    pub fn open(dir: &Path) -> Result<Self> {
        let manifest = read_manifest(dir)?;
        Ok(Dataset {
            dir: dir.to_path_buf(),
            manifest,
        })
    }

    pub fn len(&self) -> usize {
        self.manifest.sequences.len()
    }

    pub fn is_empty(&self) -> bool {
        self.manifest.sequences.is_empty()
    }

    pub fn sensor(&self) -> SensorGeometry {
        SensorGeometry {
            width: self.manifest.sensor_width,
            height: self.manifest.sensor_height,
        }
    }

    pub fn load_sequence<T: Scalar>(&self, i: usize) -> Result<LoadedSequence<T>> {
        let entry = self.manifest.sequences.get(i).ok_or_else(|| {
            Error::Config(format!(
                "sequence {i} out of range, dataset holds {}",
                self.len()
            ))
        })?;
        let ev_path = self.dir.join(&entry.events);
        let lb_path = self.dir.join(&entry.labels);
        let stream = read_event_file(&ev_path)?;
        let labels = read_labels(&lb_path)?;
        let sensor = stream.geometry;
        let windows: Vec<_> = stream.windows(self.manifest.window_events).collect();
        if labels.len() != windows.len() {
            return Err(Error::Format {
                path: lb_path,
                offset: 0,
                message: format!(
                    "{} label records for {} complete windows",
                    labels.len(),
                    windows.len()
                ),
            });
        }
        let input_w = T::from_usize(INPUT_COLS);
        let input_h = T::from_usize(INPUT_ROWS);
        let mut histograms = Vec::with_capacity(windows.len());
        let mut targets = Vec::with_capacity(windows.len());
        let mut spans = Vec::with_capacity(windows.len());
        let mut dropped_boxes = 0;
        for (wi, window) in windows.iter().enumerate() {
            let rec = &labels[wi];
            if rec.window_index as usize != wi {
                return Err(Error::Format {
                    path: lb_path,
                    offset: wi as u64,
                    message: format!(
                        "label record {wi} carries window_index {}",
                        rec.window_index
                    ),
                });
            }
            let hist: SparseTensor<T> = event_histogram(sensor, window);
            histograms.push(hist.embed(INPUT_ROWS, INPUT_COLS)?);
            let boxes = input_boxes::<T>(rec, sensor);
            let (grid, dropped) = encode_targets(&boxes, input_w, input_h);
            targets.push(grid);
            dropped_boxes += dropped;
            spans.push((window[0].t_us, window[window.len() - 1].t_us));
        }
        Ok(LoadedSequence {
            histograms,
            targets,
            labels,
            spans,
            dropped_boxes,
        })
    }
}
