//! Line-oriented text formats written and read by the CLI.
//!
//! Reals that must survive a round trip are printed with `{:?}` (shortest
//! exact representation); reports and tables use two decimals.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::io::{self, BufRead, Write};

use anyhow::{anyhow, bail, Context, Result};
use ndarray::{ArrayD, IxDyn};
use osod_core::embeddings::ClassEmbeddingTable;
use osod_core::geometry::Box;
use osod_core::harness::{AblationRow, Dataset, ModuleSwitches, Proposal, SceneObject, SyntheticScene, ToyDetector};
use osod_core::losses::{Inputs, SuiteResult};
use osod_core::metrics::{EvalReport, GroundTruthObject, Label};

pub const DATASET_MAGIC: &str = "osod-dataset 1";
pub const MODEL_MAGIC: &str = "osod-model 1";
pub const REPORT_HEADER: &str = "WI AOSE mAP_k AP_u HMP";
pub const CLASS_HEADER: &str = "class AP";
pub const TABLE_HEADER: &str = "case WI AOSE mAP_k AP_u HMP loss_initial loss_final";

fn reals(fields: &[&str]) -> Result<Vec<f64>> {
    fields
        .iter()
        .map(|f| f.parse::<f64>().map_err(|_| anyhow!("not a number: {f:?}")))
        .collect()
}

fn real(field: &str) -> Result<f64> {
    field.parse::<f64>().map_err(|_| anyhow!("not a number: {field:?}"))
}

fn push_reals(line: &mut String, values: impl IntoIterator<Item = f64>) {
    for v in values {
        write!(line, " {v:?}").expect("writing to a String");
    }
}

fn parse_box(v: &[f64]) -> Result<Box> {
    Ok(Box::new(v[0], v[1], v[2], v[3])?)
}

/// Non-empty, non-comment lines with their 1-based numbers.
fn content_lines<R: BufRead>(reader: R) -> impl Iterator<Item = Result<(usize, String)>> {
    reader.lines().enumerate().filter_map(|(i, l)| match l {
        Err(e) => Some(Err(e.into())),
        Ok(l) if l.trim().is_empty() || l.trim_start().starts_with('#') => None,
        Ok(l) => Some(Ok((i + 1, l.trim().to_string()))),
    })
}

// ---------------------------------------------------------------------------
// Dataset
//
//   osod-dataset 1
//   classes <known class names>
//   embedding <name> <values>
//   scene <train|test> <image_id>
//   object <class> <x1> <y1> <x2> <y2> <latent>
//   proposal <0|1> <target|-> <x1> <y1> <x2> <y2> <feature>
//
// Objects whose class is not listed under `classes` are unknown.

pub fn write_dataset<W: Write>(mut w: W, data: &Dataset) -> io::Result<()> {
    writeln!(w, "{DATASET_MAGIC}")?;
    writeln!(w, "classes {}", data.known_classes.join(" "))?;
    for (i, name) in data.embeddings.names().iter().enumerate() {
        let mut line = format!("embedding {name}");
        push_reals(&mut line, data.embeddings.vector(i).iter().copied());
        writeln!(w, "{line}")?;
    }
    for (split, scenes) in [("train", &data.train), ("test", &data.test)] {
        for s in scenes {
            writeln!(w, "scene {split} {}", s.image_id)?;
            for o in &s.objects {
                let b = o.gt.bbox;
                let mut line = format!("object {}", o.class_name);
                push_reals(&mut line, [b.x1, b.y1, b.x2, b.y2].into_iter().chain(o.latent.iter().copied()));
                writeln!(w, "{line}")?;
            }
            for p in &s.proposals {
                let b = p.bbox;
                let target = p.target.map_or("-".to_string(), |t| t.to_string());
                let mut line = format!("proposal {} {target}", u8::from(p.is_object));
                push_reals(&mut line, [b.x1, b.y1, b.x2, b.y2].into_iter().chain(p.feature.iter().copied()));
                writeln!(w, "{line}")?;
            }
        }
    }
    Ok(())
}

pub fn read_dataset<R: BufRead>(reader: R) -> Result<Dataset> {
    let mut lines = content_lines(reader);
    match lines.next().transpose()? {
        Some((_, l)) if l == DATASET_MAGIC => {}
        _ => bail!("not a dataset file (expected `{DATASET_MAGIC}` header)"),
    }
    let mut known: Vec<String> = Vec::new();
    let mut embeddings: Vec<(String, Vec<f64>)> = Vec::new();
    let (mut train, mut test) = (Vec::new(), Vec::new());
    let mut current: Option<(bool, SyntheticScene)> = None;
    let flush = |current: &mut Option<(bool, SyntheticScene)>, train: &mut Vec<_>, test: &mut Vec<_>| {
        if let Some((is_train, s)) = current.take() {
            if is_train { train } else { test }.push(s);
        }
    };

    for item in lines {
        let (n, line) = item?;
        let fields: Vec<&str> = line.split_whitespace().collect();
        let parsed: Result<()> = (|| {
            match fields[0] {
                "classes" => known = fields[1..].iter().map(|s| s.to_string()).collect(),
                "embedding" if fields.len() >= 3 => embeddings.push((fields[1].to_string(), reals(&fields[2..])?)),
                "scene" if fields.len() == 3 => {
                    flush(&mut current, &mut train, &mut test);
                    let is_train = match fields[1] {
                        "train" => true,
                        "test" => false,
                        other => bail!("unknown split {other:?}"),
                    };
                    current = Some((
                        is_train,
                        SyntheticScene {
                            image_id: fields[2].to_string(),
                            objects: Vec::new(),
                            proposals: Vec::new(),
                        },
                    ));
                }
                "object" if fields.len() >= 6 => {
                    let (_, scene) = current.as_mut().ok_or_else(|| anyhow!("object before any scene"))?;
                    let v = reals(&fields[2..])?;
                    let label = known
                        .iter()
                        .position(|c| c == fields[1])
                        .map_or(Label::Unknown, Label::Known);
                    scene.objects.push(SceneObject {
                        gt: GroundTruthObject {
                            image_id: scene.image_id.clone(),
                            bbox: parse_box(&v)?,
                            label,
                        },
                        class_name: fields[1].to_string(),
                        latent: v[4..].to_vec(),
                    });
                }
                "proposal" if fields.len() >= 7 => {
                    let (_, scene) = current.as_mut().ok_or_else(|| anyhow!("proposal before any scene"))?;
                    let is_object = match fields[1] {
                        "1" => true,
                        "0" => false,
                        other => bail!("objectness flag must be 0 or 1, got {other:?}"),
                    };
                    let target = match fields[2] {
                        "-" => None,
                        t => Some(t.parse::<usize>().map_err(|_| anyhow!("bad target index {t:?}"))?),
                    };
                    let v = reals(&fields[3..])?;
                    scene.proposals.push(Proposal {
                        bbox: parse_box(&v)?,
                        feature: v[4..].to_vec(),
                        is_object,
                        target,
                    });
                }
                other => bail!("unexpected record {other:?}"),
            }
            Ok(())
        })();
        parsed.with_context(|| format!("dataset line {n}"))?;
    }
    flush(&mut current, &mut train, &mut test);

    let table = ClassEmbeddingTable::new(embeddings)?;
    if table.names() != known.as_slice() {
        bail!("embedding rows must list exactly the known classes, in order");
    }
    Ok(Dataset {
        train,
        test,
        embeddings: table,
        known_classes: known,
    })
}

// ---------------------------------------------------------------------------
// Model checkpoint
//
//   osod-model 1
//   classes <known class names>
//   switches <label>
//   loss_initial <value>
//   loss_final <value>
//   param <name> <shape: AxB, A, or - for a scalar> <values, row-major>

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub model: ToyDetector,
    pub classes: Vec<String>,
    pub switches: ModuleSwitches,
    pub loss_initial: f64,
    pub loss_final: f64,
}

pub fn write_checkpoint<W: Write>(mut w: W, c: &Checkpoint) -> io::Result<()> {
    writeln!(w, "{MODEL_MAGIC}")?;
    writeln!(w, "classes {}", c.classes.join(" "))?;
    writeln!(w, "switches {}", c.switches.label())?;
    writeln!(w, "loss_initial {:?}", c.loss_initial)?;
    writeln!(w, "loss_final {:?}", c.loss_final)?;
    for (name, t) in c.model.to_params() {
        let shape = match t.shape() {
            [] => "-".to_string(),
            dims => dims.iter().map(|d| d.to_string()).collect::<Vec<_>>().join("x"),
        };
        let mut line = format!("param {name} {shape}");
        push_reals(&mut line, t.iter().copied());
        writeln!(w, "{line}")?;
    }
    Ok(())
}

pub fn read_checkpoint<R: BufRead>(reader: R) -> Result<Checkpoint> {
    let mut lines = content_lines(reader);
    match lines.next().transpose()? {
        Some((_, l)) if l == MODEL_MAGIC => {}
        _ => bail!("not a model file (expected `{MODEL_MAGIC}` header)"),
    }
    let mut classes = None;
    let mut switches = None;
    let (mut loss_initial, mut loss_final) = (None, None);
    let mut params = Inputs::new();
    for item in lines {
        let (n, line) = item?;
        let fields: Vec<&str> = line.split_whitespace().collect();
        let parsed: Result<()> = (|| {
            match (fields[0], fields.len()) {
                ("classes", _) => classes = Some(fields[1..].iter().map(|s| s.to_string()).collect::<Vec<_>>()),
                ("switches", 2) => {
                    switches = Some(
                        ModuleSwitches::from_label(fields[1]).ok_or_else(|| anyhow!("bad switches {:?}", fields[1]))?,
                    )
                }
                ("loss_initial", 2) => loss_initial = Some(real(fields[1])?),
                ("loss_final", 2) => loss_final = Some(real(fields[1])?),
                ("param", len) if len >= 3 => {
                    let shape: Vec<usize> = match fields[2] {
                        "-" => Vec::new(),
                        s => s
                            .split('x')
                            .map(|d| d.parse().map_err(|_| anyhow!("bad shape {s:?}")))
                            .collect::<Result<_>>()?,
                    };
                    let values = reals(&fields[3..])?;
                    let t = ArrayD::from_shape_vec(IxDyn(&shape), values)
                        .map_err(|_| anyhow!("parameter {} does not match shape {}", fields[1], fields[2]))?;
                    if params.insert(fields[1].to_string(), t).is_some() {
                        bail!("duplicate parameter {}", fields[1]);
                    }
                }
                (other, _) => bail!("unexpected record {other:?}"),
            }
            Ok(())
        })();
        parsed.with_context(|| format!("model line {n}"))?;
    }
    let model = ToyDetector::from_params(&params)?;
    let classes = classes.ok_or_else(|| anyhow!("model file has no `classes` line"))?;
    if classes.len() != model.num_known() {
        bail!("{} classes listed but the class head has {}", classes.len(), model.num_known());
    }
    Ok(Checkpoint {
        model,
        classes,
        switches: switches.ok_or_else(|| anyhow!("model file has no `switches` line"))?,
        loss_initial: loss_initial.ok_or_else(|| anyhow!("model file has no `loss_initial` line"))?,
        loss_final: loss_final.ok_or_else(|| anyhow!("model file has no `loss_final` line"))?,
    })
}

// ---------------------------------------------------------------------------
// Evaluation report
//
//   WI AOSE mAP_k AP_u HMP
//   9.55 9267 58.52 18.45 28.05
//   class AP
//   <class> <ap>
//   # <note>

/// The report as printed: every real rounded to two decimals.
#[derive(Debug, Clone, PartialEq)]
pub struct ParsedReport {
    pub wi: f64,
    pub aose: usize,
    pub map_k: f64,
    pub ap_u: f64,
    pub hmp: f64,
    pub per_class_ap: Vec<(String, f64)>,
    pub notes: Vec<String>,
}

pub fn report_row(r: &EvalReport) -> String {
    format!("{:.2} {} {:.2} {:.2} {:.2}", r.wi, r.aose, r.map_k, r.ap_u, r.hmp)
}

pub fn emit_report<W: Write>(r: &EvalReport, mut sink: W) -> io::Result<usize> {
    let mut out = format!("{REPORT_HEADER}\n{}\n{CLASS_HEADER}\n", report_row(r));
    for (name, ap) in &r.per_class_ap {
        writeln!(out, "{name} {ap:.2}").expect("writing to a String");
    }
    for note in &r.notes {
        writeln!(out, "# {note}").expect("writing to a String");
    }
    sink.write_all(out.as_bytes())?;
    Ok(out.len())
}

pub fn parse_report(text: &str) -> Result<ParsedReport> {
    let mut lines = text.lines().enumerate().filter(|(_, l)| !l.trim().is_empty());
    let mut next = |what: &str| lines.next().ok_or_else(|| anyhow!("report ends before the {what}"));
    let (_, header) = next("header")?;
    if header.trim() != REPORT_HEADER {
        bail!("report header must be `{REPORT_HEADER}`");
    }
    let (n, row) = next("value row")?;
    let f: Vec<&str> = row.split_whitespace().collect();
    if f.len() != 5 {
        bail!("report line {}: expected 5 values, found {}", n + 1, f.len());
    }
    let aose = f[1]
        .parse::<usize>()
        .map_err(|_| anyhow!("report line {}: AOSE must be a count, got {:?}", n + 1, f[1]))?;
    let mut report = ParsedReport {
        wi: real(f[0])?,
        aose,
        map_k: real(f[2])?,
        ap_u: real(f[3])?,
        hmp: real(f[4])?,
        per_class_ap: Vec::new(),
        notes: Vec::new(),
    };
    let (_, class_header) = next("per-class header")?;
    if class_header.trim() != CLASS_HEADER {
        bail!("expected `{CLASS_HEADER}` after the value row");
    }
    for (n, line) in lines {
        if let Some(note) = line.trim_start().strip_prefix('#') {
            report.notes.push(note.trim().to_string());
            continue;
        }
        match line.split_whitespace().collect::<Vec<_>>()[..] {
            [name, ap] => report.per_class_ap.push((name.to_string(), real(ap)?)),
            _ => bail!("report line {}: expected `<class> <ap>`", n + 1),
        }
    }
    Ok(report)
}

// ---------------------------------------------------------------------------
// Ablation table

pub fn write_table<W: Write>(mut w: W, rows: &[AblationRow]) -> io::Result<()> {
    writeln!(w, "{TABLE_HEADER}")?;
    for r in rows {
        writeln!(
            w,
            "{} {} {:.2} {:.2}",
            r.switches.label(),
            report_row(&r.report),
            r.initial_loss,
            r.final_loss
        )?;
    }
    Ok(())
}

#[derive(Debug, Clone, PartialEq)]
pub struct TableRow {
    pub switches: ModuleSwitches,
    pub wi: f64,
    pub aose: usize,
    pub map_k: f64,
    pub ap_u: f64,
    pub hmp: f64,
    pub loss_initial: f64,
    pub loss_final: f64,
}

pub fn parse_table(text: &str) -> Result<Vec<TableRow>> {
    let mut lines = text.lines().enumerate().filter(|(_, l)| !l.trim().is_empty() && !l.starts_with('#'));
    match lines.next() {
        Some((_, h)) if h.trim() == TABLE_HEADER => {}
        _ => bail!("table header must be `{TABLE_HEADER}`"),
    }
    lines
        .map(|(n, line)| {
            let f: Vec<&str> = line.split_whitespace().collect();
            if f.len() != 8 {
                bail!("table line {}: expected 8 fields, found {}", n + 1, f.len());
            }
            Ok(TableRow {
                switches: ModuleSwitches::from_label(f[0])
                    .ok_or_else(|| anyhow!("table line {}: bad case {:?}", n + 1, f[0]))?,
                wi: real(f[1])?,
                aose: f[2].parse().map_err(|_| anyhow!("table line {}: bad AOSE {:?}", n + 1, f[2]))?,
                map_k: real(f[3])?,
                ap_u: real(f[4])?,
                hmp: real(f[5])?,
                loss_initial: real(f[6])?,
                loss_final: real(f[7])?,
            })
        })
        .collect()
}

// ---------------------------------------------------------------------------
// Gradient-check summary

pub const GRADCHECK_HEADER: &str = "loss trials max_rel_error max_rel_error_saturated status";

pub fn write_gradcheck<W: Write>(mut w: W, results: &[SuiteResult]) -> io::Result<()> {
    writeln!(w, "{GRADCHECK_HEADER}")?;
    for r in results {
        let saturated = r.worst_saturated_rel_error.map_or("-".to_string(), |e| format!("{e:.2e}"));
        let status = if r.passed() { "ok" } else { "FAIL" };
        writeln!(w, "{} {} {:.2e} {saturated} {status}", r.loss, r.trials, r.worst_rel_error)?;
    }
    Ok(())
}

/// `(loss, passed)` per row.
pub fn parse_gradcheck(text: &str) -> Result<BTreeMap<String, bool>> {
    let mut lines = text.lines().filter(|l| !l.trim().is_empty());
    if lines.next().map(str::trim) != Some(GRADCHECK_HEADER) {
        bail!("gradcheck header must be `{GRADCHECK_HEADER}`");
    }
    lines
        .map(|l| match l.split_whitespace().collect::<Vec<_>>()[..] {
            [name, _, _, _, status] => Ok((name.to_string(), status == "ok")),
            _ => bail!("malformed gradcheck row {l:?}"),
        })
        .collect()
}
