//! Dataset manifests: a UTF-8 CSV with `#key=value` metadata lines, a
//! `path,label` header and one row per clip. Paths are relative to the
//! manifest's directory.
//!
//! ```text
//! #task=tones
//! #labels=single
//! #num_classes=8
//! path,label
//! class0/clip000.wav,0
//! ```
//!
//! Label syntax: single `3`, multi-label `1;4` (empty for no positives),
//! slots `2|0|3` with `#slots=6|14|4` in place of `#num_classes`.

use std::fmt;
use std::path::{Path, PathBuf};

use crate::dsp::Waveform;
use crate::error::{io_err, Error, Result};
use crate::objectives::LabelKind;

use super::wav::load_wav;

#[derive(Clone, Debug, PartialEq, Eq)]
pub enum Label {
    Single(usize),
    Multi(Vec<usize>),
    Slots(Vec<usize>),
}

impl Label {
    fn parse(s: &str, kind: &LabelKind) -> std::result::Result<Self, String> {
        let int = |t: &str| {
            t.trim()
                .parse::<usize>()
                .map_err(|_| format!("`{t}` is not a class index"))
        };
        let s = s.trim();
        match kind {
            LabelKind::Single(k) => {
                let c = int(s)?;
                if c >= *k {
                    return Err(format!("class {c} out of range for {k} classes"));
                }
                Ok(Label::Single(c))
            }
            LabelKind::Multi(k) => {
                let mut cs = Vec::new();
                for t in s.split(';').filter(|t| !t.trim().is_empty()) {
                    let c = int(t)?;
                    if c >= *k {
                        return Err(format!("class {c} out of range for {k} classes"));
                    }
                    if cs.contains(&c) {
                        return Err(format!("class {c} listed twice"));
                    }
                    cs.push(c);
                }
                cs.sort_unstable();
                Ok(Label::Multi(cs))
            }
            LabelKind::Slots(arities) => {
                let parts: Vec<&str> = s.split('|').collect();
                if parts.len() != arities.len() {
                    return Err(format!(
                        "expected {} slots, got {}",
                        arities.len(),
                        parts.len()
                    ));
                }
                let mut vs = Vec::new();
                for (i, (t, &k)) in parts.iter().zip(arities).enumerate() {
                    let c = int(t)?;
                    if c >= k {
                        return Err(format!(
                            "slot {} value {c} out of range for arity {k}",
                            i + 1
                        ));
                    }
                    vs.push(c);
                }
                Ok(Label::Slots(vs))
            }
        }
    }

    /// One-hot, multi-hot, or concatenated per-slot one-hots.
    pub fn target(&self, kind: &LabelKind) -> Vec<f64> {
        let mut t = vec![0.0; kind.width()];
        match (self, kind) {
            (Label::Single(c), _) => t[*c] = 1.0,
            (Label::Multi(cs), _) => cs.iter().for_each(|&c| t[c] = 1.0),
            (Label::Slots(vs), LabelKind::Slots(arities)) => {
                let mut off = 0;
                for (&v, &k) in vs.iter().zip(arities) {
                    t[off + v] = 1.0;
                    off += k;
                }
            }
            (Label::Slots(_), _) => {}
        }
        t
    }
}

impl fmt::Display for Label {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let join = |v: &[usize], sep: &str| {
            v.iter()
                .map(|c| c.to_string())
                .collect::<Vec<_>>()
                .join(sep)
        };
        match self {
            Label::Single(c) => write!(f, "{c}"),
            Label::Multi(cs) => f.write_str(&join(cs, ";")),
            Label::Slots(vs) => f.write_str(&join(vs, "|")),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ManifestRow {
    /// Relative to the manifest's directory.
    pub path: PathBuf,
    pub label: Label,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Manifest {
    pub task: String,
    pub kind: LabelKind,
    pub rows: Vec<ManifestRow>,
    /// Directory the row paths resolve against.
    pub root: PathBuf,
}

fn kind_meta(kind: &LabelKind) -> Vec<(&'static str, String)> {
    match kind {
        LabelKind::Single(k) => vec![("labels", "single".into()), ("num_classes", k.to_string())],
        LabelKind::Multi(k) => vec![("labels", "multi".into()), ("num_classes", k.to_string())],
        LabelKind::Slots(a) => vec![
            ("labels", "slots".into()),
            (
                "slots",
                a.iter()
                    .map(|k| k.to_string())
                    .collect::<Vec<_>>()
                    .join("|"),
            ),
        ],
    }
}

impl Manifest {
    /// Parses and validates a manifest; every referenced file must exist.
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(io_err(path))?;
        let err = |row: usize, field: &'static str, detail: String| Error::Manifest {
            path: path.to_path_buf(),
            row,
            field,
            detail,
        };

        let mut task = None;
        let mut labels = None;
        let mut num_classes = None;
        let mut slots = None;
        let mut meta_lines = 0;
        for (i, line) in text.lines().enumerate() {
            let Some(rest) = line.strip_prefix('#') else {
                break;
            };
            meta_lines += 1;
            let (k, v) = rest
                .split_once('=')
                .ok_or_else(|| err(i + 1, "metadata", format!("`{line}` is not #key=value")))?;
            let v = v.trim().to_string();
            match k.trim() {
                "task" => task = Some(v),
                "labels" => labels = Some((i + 1, v)),
                "num_classes" => {
                    let n = v.parse::<usize>().ok().filter(|&n| n > 0).ok_or_else(|| {
                        err(
                            i + 1,
                            "num_classes",
                            format!("`{v}` is not a positive integer"),
                        )
                    })?;
                    num_classes = Some(n);
                }
                "slots" => {
                    let a = v
                        .split('|')
                        .map(|t| t.trim().parse::<usize>().ok().filter(|&n| n > 0))
                        .collect::<Option<Vec<_>>>()
                        .ok_or_else(|| {
                            err(
                                i + 1,
                                "slots",
                                format!("`{v}` is not a list of positive arities"),
                            )
                        })?;
                    slots = Some(a);
                }
                other => return Err(err(i + 1, "metadata", format!("unknown key `{other}`"))),
            }
        }
        let task = task.ok_or_else(|| err(0, "task", "missing #task= line".into()))?;
        let (labels_line, labels) = labels.unwrap_or((0, "single".into()));
        let kind = match labels.as_str() {
            "single" | "multi" => {
                let k = num_classes
                    .ok_or_else(|| err(0, "num_classes", "missing #num_classes= line".into()))?;
                if labels == "single" {
                    LabelKind::Single(k)
                } else {
                    LabelKind::Multi(k)
                }
            }
            "slots" => LabelKind::Slots(
                slots.ok_or_else(|| err(0, "slots", "missing #slots= line".into()))?,
            ),
            other => {
                return Err(err(
                    labels_line,
                    "labels",
                    format!("`{other}` is not single, multi or slots"),
                ));
            }
        };

        let body: String = text.lines().skip(meta_lines).collect::<Vec<_>>().join("\n");
        let mut reader = csv::ReaderBuilder::new()
            .has_headers(true)
            .from_reader(body.as_bytes());
        let header_line = meta_lines + 1;
        let headers = reader
            .headers()
            .map_err(|e| err(header_line, "header", e.to_string()))?
            .clone();
        if headers.len() != 2 || &headers[0] != "path" || &headers[1] != "label" {
            return Err(err(
                header_line,
                "header",
                format!(
                    "expected `path,label`, got `{}`",
                    headers.iter().collect::<Vec<_>>().join(",")
                ),
            ));
        }
        let root = path.parent().unwrap_or(Path::new("")).to_path_buf();
        let mut rows = Vec::new();
        for rec in reader.records() {
            let rec = rec.map_err(|e| {
                let line = e.position().map_or(0, |p| p.line() as usize + meta_lines);
                err(line, "record", e.to_string())
            })?;
            let line = rec.position().map_or(0, |p| p.line() as usize) + meta_lines;
            let rel = rec[0].trim();
            if rel.is_empty() {
                return Err(err(line, "path", "empty path".into()));
            }
            if !root.join(rel).is_file() {
                return Err(err(line, "path", format!("`{rel}` does not exist")));
            }
            let label = Label::parse(&rec[1], &kind).map_err(|d| err(line, "label", d))?;
            rows.push(ManifestRow {
                path: PathBuf::from(rel),
                label,
            });
        }
        Ok(Self {
            task,
            kind,
            rows,
            root,
        })
    }

    pub fn to_csv(&self) -> String {
        let mut out = format!("#task={}\n", self.task);
        for (k, v) in kind_meta(&self.kind) {
            out.push_str(&format!("#{k}={v}\n"));
        }
        let mut w = csv::Writer::from_writer(Vec::new());
        w.write_record(["path", "label"]).expect("in-memory write");
        for r in &self.rows {
            w.write_record([
                r.path.to_string_lossy().as_ref(),
                r.label.to_string().as_str(),
            ])
            .expect("in-memory write");
        }
        out.push_str(
            &String::from_utf8(w.into_inner().expect("in-memory flush")).expect("utf-8 rows"),
        );
        out
    }

    /// Atomic write; `root` is not stored.
    pub fn save(&self, path: &Path) -> Result<()> {
        super::write_atomic(path, self.to_csv().as_bytes())
    }

    pub fn len(&self) -> usize {
        self.rows.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rows.is_empty()
    }

    pub fn resolve(&self, row: &ManifestRow) -> PathBuf {
        self.root.join(&row.path)
    }

    pub fn load_clips(&self) -> Result<Vec<Waveform>> {
        self.rows
            .iter()
            .map(|r| load_wav(&self.resolve(r)))
            .collect()
    }

    pub fn targets(&self) -> Vec<Vec<f64>> {
        self.rows
            .iter()
            .map(|r| r.label.target(&self.kind))
            .collect()
    }
}
