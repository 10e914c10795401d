//! Manifest CSV: `image_path,patient_id,<label columns...>`.
//!
//! Lines starting with `#` are comments. Image paths are resolved relative
//! to the manifest's directory unless absolute.

use std::collections::HashSet;
use std::io::{Read, Write};
use std::path::{Path, PathBuf};

use crate::error::{Error, Result};
use crate::objective::TargetMatrix;

use super::LABELS;

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Record {
    pub image_path: String,
    pub patient_id: String,
    pub labels: Vec<u8>,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Manifest {
    label_names: Vec<String>,
    records: Vec<Record>,
    root: PathBuf,
}

impl Manifest {
    pub fn new(label_names: Vec<String>) -> Self {
        Self { label_names, records: Vec::new(), root: PathBuf::new() }
    }

    /// Empty manifest over the standard 14 finding labels.
    pub fn standard() -> Self {
        Self::new(LABELS.iter().map(|s| s.to_string()).collect())
    }

    pub fn with_root(mut self, root: impl Into<PathBuf>) -> Self {
        self.root = root.into();
        self
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    pub fn label_names(&self) -> &[String] {
        &self.label_names
    }

    pub fn records(&self) -> &[Record] {
        &self.records
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn push(&mut self, record: Record) -> Result<()> {
        if record.labels.len() != self.label_names.len() {
            return Err(Error::LabelMismatch(format!(
                "{}: {} labels, manifest has {}",
                record.image_path,
                record.labels.len(),
                self.label_names.len()
            )));
        }
        if record.patient_id.is_empty() {
            return Err(Error::Config(format!("{}: empty patient id", record.image_path)));
        }
        if record.labels.iter().any(|&v| v > 1) {
            return Err(Error::Config(format!("{}: labels must be 0 or 1", record.image_path)));
        }
        if self.records.iter().any(|r| r.image_path == record.image_path) {
            return Err(Error::DuplicatePath(record.image_path));
        }
        self.records.push(record);
        Ok(())
    }

    pub fn resolve(&self, record: &Record) -> PathBuf {
        let p = Path::new(&record.image_path);
        if p.is_absolute() {
            p.to_path_buf()
        } else {
            self.root.join(p)
        }
    }

    /// Distinct patient ids in order of first appearance.
    pub fn patients(&self) -> Vec<String> {
        let mut seen = HashSet::new();
        self.records.iter().filter(|r| seen.insert(r.patient_id.as_str())).map(|r| r.patient_id.clone()).collect()
    }

    /// Records whose patient is in `patients`, in manifest order.
    pub fn select_patients(&self, patients: &HashSet<&str>) -> Manifest {
        let records = self.records.iter().filter(|r| patients.contains(r.patient_id.as_str())).cloned().collect();
        Manifest { label_names: self.label_names.clone(), records, root: self.root.clone() }
    }

    /// Records at `indices`, in that order.
    pub fn select(&self, indices: &[usize]) -> Manifest {
        let records = indices.iter().map(|&i| self.records[i].clone()).collect();
        Manifest { label_names: self.label_names.clone(), records, root: self.root.clone() }
    }

    pub fn targets(&self) -> TargetMatrix {
        let data = self.records.iter().flat_map(|r| r.labels.iter().copied()).collect();
        TargetMatrix::new(self.len(), self.label_names.len(), data).expect("labels validated on push")
    }

    /// Write as CSV, prefixed with `# ` comment lines.
    pub fn write_csv<W: Write>(&self, mut out: W, comments: &[String]) -> Result<()> {
        for c in comments {
            writeln!(out, "# {c}")?;
        }
        let mut w = csv::Writer::from_writer(out);
        let mut header = vec!["image_path".to_string(), "patient_id".to_string()];
        header.extend(self.label_names.iter().cloned());
        w.write_record(&header)?;
        for r in &self.records {
            let mut row = vec![r.image_path.clone(), r.patient_id.clone()];
            row.extend(r.labels.iter().map(u8::to_string));
            w.write_record(&row)?;
        }
        w.flush()?;
        Ok(())
    }

    pub fn save(&self, path: &Path, comments: &[String]) -> Result<()> {
        self.write_csv(std::fs::File::create(path)?, comments)
    }
}

/// Parse a manifest from `reader`; `source` names it in error messages.
pub fn parse_manifest<R: Read>(reader: R, source: &str) -> Result<Manifest> {
    let err = |line: usize, detail: String| Error::Parse { path: source.to_string(), line, detail };
    let mut rdr = csv::ReaderBuilder::new().comment(Some(b'#')).flexible(true).from_reader(reader);
    let header = rdr.headers().map_err(|e| err(1, e.to_string()))?.clone();
    let header_line = header.position().map_or(1, |p| p.line() as usize);
    if header.len() < 3 || &header[0] != "image_path" || &header[1] != "patient_id" {
        return Err(err(header_line, "header must be image_path,patient_id,<labels...>".into()));
    }
    let mut manifest = Manifest::new(header.iter().skip(2).map(str::to_string).collect());
    for row in rdr.records() {
        let row = row.map_err(|e| err(e.position().map_or(0, |p| p.line() as usize), e.to_string()))?;
        let line = row.position().map_or(0, |p| p.line() as usize);
        if row.len() != header.len() {
            return Err(err(line, format!("expected {} fields, found {}", header.len(), row.len())));
        }
        let labels = row
            .iter()
            .skip(2)
            .enumerate()
            .map(|(j, v)| match v.trim() {
                "0" => Ok(0),
                "1" => Ok(1),
                other => Err(err(line, format!("label {} must be 0 or 1, found {other:?}", &header[j + 2]))),
            })
            .collect::<Result<Vec<u8>>>()?;
        let patient = row[1].trim();
        if patient.is_empty() {
            return Err(err(line, "empty patient id".into()));
        }
        if row[0].trim().is_empty() {
            return Err(err(line, "empty image path".into()));
        }
        manifest
            .push(Record { image_path: row[0].trim().to_string(), patient_id: patient.to_string(), labels })
            .map_err(|e| match e {
                Error::DuplicatePath(p) => err(line, format!("duplicate image path {p:?}")),
                other => other,
            })?;
    }
    Ok(manifest)
}

pub fn load_manifest(path: &Path) -> Result<Manifest> {
    let file = std::fs::File::open(path)?;
    let root = path.parent().map(Path::to_path_buf).unwrap_or_default();
    Ok(parse_manifest(file, &path.display().to_string())?.with_root(root))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn header() -> String {
        format!("image_path,patient_id,{}\n", LABELS.join(","))
    }

    #[test]
    fn header_only_is_empty() {
        let m = parse_manifest(header().as_bytes(), "m.csv").unwrap();
        assert!(m.is_empty());
        assert_eq!(m.label_names().len(), 14);
    }

    #[test]
    fn three_hand_written_rows() {
        let text = format!(
            "# comment line\n{}a.pgm,p1,1,0,0,0,0,0,0,0,0,0,0,0,0,0\nb.pgm,p1,0,0,0,0,0,0,0,0,0,0,0,0,0,0\nsub/c.pgm,p2,0,1,1,0,0,0,0,0,0,0,0,0,0,1\n",
            header()
        );
        let m = parse_manifest(text.as_bytes(), "m.csv").unwrap();
        assert_eq!(m.len(), 3);
        assert_eq!(m.records()[0], Record { image_path: "a.pgm".into(), patient_id: "p1".into(), labels: [vec![1], vec![0; 13]].concat() });
        assert_eq!(m.records()[1].labels, vec![0; 14]);
        let mut c = vec![0; 14];
        c[1] = 1;
        c[2] = 1;
        c[13] = 1;
        assert_eq!(m.records()[2], Record { image_path: "sub/c.pgm".into(), patient_id: "p2".into(), labels: c });
        assert_eq!(m.patients(), vec!["p1", "p2"]);
        assert_eq!(m.targets().positives(), 4);
    }

    #[test]
    fn invalid_label_names_its_line() {
        let text = format!("{}a.pgm,p1,1,0,0,0,0,0,0,0,0,0,0,0,0,0\nb.pgm,p1,2,0,0,0,0,0,0,0,0,0,0,0,0,0\n", header());
        let e = parse_manifest(text.as_bytes(), "m.csv").unwrap_err();
        assert!(matches!(e, Error::Parse { line: 3, .. }), "{e}");
        assert!(e.to_string().contains("m.csv:3"));
    }

    #[test]
    fn duplicate_path_rejected() {
        let text = format!("{}a.pgm,p1,1,0,0,0,0,0,0,0,0,0,0,0,0,0\na.pgm,p2,0,0,0,0,0,0,0,0,0,0,0,0,0,0\n", header());
        let e = parse_manifest(text.as_bytes(), "m.csv").unwrap_err();
        assert!(e.to_string().contains("duplicate"));
    }

    #[test]
    fn short_row_and_bad_header() {
        let text = format!("{}a.pgm,p1,1\n", header());
        assert!(parse_manifest(text.as_bytes(), "m.csv").is_err());
        assert!(parse_manifest("path,patient,A\n".as_bytes(), "m.csv").is_err());
        let text = format!("{}a.pgm,,1,0,0,0,0,0,0,0,0,0,0,0,0,0\n", header());
        assert!(parse_manifest(text.as_bytes(), "m.csv").is_err());
    }

    #[test]
    fn write_then_parse() {
        let mut m = Manifest::standard();
        m.push(Record { image_path: "x.pgm".into(), patient_id: "p".into(), labels: vec![1; 14] }).unwrap();
        let mut buf = Vec::new();
        m.write_csv(&mut buf, &["seed = 3".into()]).unwrap();
        assert!(String::from_utf8_lossy(&buf).starts_with("# seed = 3\n"));
        assert_eq!(parse_manifest(&buf[..], "m").unwrap(), m);
    }
}
