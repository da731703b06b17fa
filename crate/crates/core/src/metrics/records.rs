//! Line-oriented detection / ground-truth records.
//!
//! ```text
//! D <image_id> <label> <score> <x1> <y1> <x2> <y2> [p_0 ... p_k]
//! G <image_id> <label> <x1> <y1> <x2> <y2>
//! ```
//!
//! Labels are class names or `__unknown__`. Blank lines and lines starting
//! with `#` are skipped.

use std::collections::{BTreeSet, HashMap};
use std::io::{self, BufRead, Write};

use super::{Detection, GroundTruthObject, Label, MetricsError};
use crate::geometry::Box;

pub const UNKNOWN_LABEL: &str = "__unknown__";

#[derive(Debug, Clone, PartialEq)]
pub struct NamedDetection {
    pub image_id: String,
    /// `None` is the unknown label.
    pub label: Option<String>,
    pub score: f64,
    pub bbox: Box,
    pub class_probs: Option<Vec<f64>>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct NamedGroundTruth {
    pub image_id: String,
    pub label: Option<String>,
    pub bbox: Box,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct Records {
    pub detections: Vec<NamedDetection>,
    pub ground_truth: Vec<NamedGroundTruth>,
}

fn parse_label(s: &str) -> Option<String> {
    (s != UNKNOWN_LABEL).then(|| s.to_string())
}

fn parse_reals(fields: &[&str], line: usize) -> Result<Vec<f64>, MetricsError> {
    fields
        .iter()
        .map(|f| {
            f.parse::<f64>().map_err(|_| MetricsError::Parse {
                line,
                message: format!("not a number: {f:?}"),
            })
        })
        .collect()
}

fn parse_box(v: &[f64], line: usize) -> Result<Box, MetricsError> {
    Box::new(v[0], v[1], v[2], v[3]).map_err(|e| MetricsError::Parse { line, message: e.to_string() })
}

pub fn read_records<R: BufRead>(reader: R) -> Result<Records, MetricsError> {
    let mut out = Records::default();
    for (i, text) in reader.lines().enumerate() {
        let line = i + 1;
        let text = text.map_err(|e| MetricsError::Parse { line, message: e.to_string() })?;
        let fields: Vec<&str> = text.split_whitespace().collect();
        if fields.is_empty() || fields[0].starts_with('#') {
            continue;
        }
        let err = |message: String| MetricsError::Parse { line, message };
        match fields[0] {
            "D" => {
                if fields.len() < 8 {
                    return Err(err(format!("detection needs at least 8 fields, found {}", fields.len())));
                }
                let nums = parse_reals(&fields[3..], line)?;
                let probs = &nums[5..];
                out.detections.push(NamedDetection {
                    image_id: fields[1].to_string(),
                    label: parse_label(fields[2]),
                    score: nums[0],
                    bbox: parse_box(&nums[1..5], line)?,
                    class_probs: (!probs.is_empty()).then(|| probs.to_vec()),
                });
            }
            "G" => {
                if fields.len() != 7 {
                    return Err(err(format!("ground truth needs 7 fields, found {}", fields.len())));
                }
                let nums = parse_reals(&fields[3..], line)?;
                out.ground_truth.push(NamedGroundTruth {
                    image_id: fields[1].to_string(),
                    label: parse_label(fields[2]),
                    bbox: parse_box(&nums, line)?,
                });
            }
            other => return Err(err(format!("unknown record kind {other:?}"))),
        }
    }
    Ok(out)
}

impl Records {
    /// Sorted, de-duplicated known class names seen in any record.
    pub fn class_names(&self) -> Vec<String> {
        let set: BTreeSet<&String> = self
            .detections
            .iter()
            .filter_map(|d| d.label.as_ref())
            .chain(self.ground_truth.iter().filter_map(|g| g.label.as_ref()))
            .collect();
        set.into_iter().cloned().collect()
    }

    /// Maps names onto indices of `class_names`; a name outside the
    /// vocabulary is an error, as is a probability vector whose length is
    /// not `class_names.len() + 1`.
    pub fn resolve(&self, class_names: &[String]) -> Result<(Vec<Detection>, Vec<GroundTruthObject>), MetricsError> {
        let index: HashMap<&str, usize> = class_names.iter().enumerate().map(|(i, n)| (n.as_str(), i)).collect();
        let label_of = |name: &Option<String>| -> Result<Label, MetricsError> {
            match name {
                None => Ok(Label::Unknown),
                Some(n) => index
                    .get(n.as_str())
                    .map(|&i| Label::Known(i))
                    .ok_or_else(|| MetricsError::InvalidOption(format!("class {n:?} is not in the vocabulary"))),
            }
        };
        let dets = self
            .detections
            .iter()
            .enumerate()
            .map(|(i, d)| {
                if let Some(p) = &d.class_probs {
                    if p.len() != class_names.len() + 1 {
                        return Err(MetricsError::InvalidDetection {
                            index: i,
                            message: format!("{} class probabilities, expected {}", p.len(), class_names.len() + 1),
                        });
                    }
                }
                Ok(Detection {
                    image_id: d.image_id.clone(),
                    bbox: d.bbox,
                    label: label_of(&d.label)?,
                    score: d.score,
                    class_probs: d.class_probs.clone(),
                })
            })
            .collect::<Result<Vec<_>, _>>()?;
        let gts = self
            .ground_truth
            .iter()
            .map(|g| {
                Ok(GroundTruthObject {
                    image_id: g.image_id.clone(),
                    bbox: g.bbox,
                    label: label_of(&g.label)?,
                })
            })
            .collect::<Result<Vec<_>, _>>()?;
        Ok((dets, gts))
    }
}

fn label_name(label: Label, class_names: &[String]) -> &str {
    match label {
        Label::Known(c) => &class_names[c],
        Label::Unknown => UNKNOWN_LABEL,
    }
}

pub fn write_detections<W: Write>(mut w: W, dets: &[Detection], class_names: &[String]) -> io::Result<()> {
    for d in dets {
        let b = d.bbox;
        write!(
            w,
            "D {} {} {:?} {:?} {:?} {:?} {:?}",
            d.image_id,
            label_name(d.label, class_names),
            d.score,
            b.x1,
            b.y1,
            b.x2,
            b.y2
        )?;
        for p in d.class_probs.iter().flatten() {
            write!(w, " {p:?}")?;
        }
        writeln!(w)?;
    }
    Ok(())
}

pub fn write_ground_truth<W: Write>(mut w: W, gts: &[GroundTruthObject], class_names: &[String]) -> io::Result<()> {
    for g in gts {
        let b = g.bbox;
        writeln!(
            w,
            "G {} {} {:?} {:?} {:?} {:?}",
            g.image_id,
            label_name(g.label, class_names),
            b.x1,
            b.y1,
            b.x2,
            b.y2
        )?;
    }
    Ok(())
}
