//! Dataset ingestion and result serialization.
//!
//! Wide format: `instance_id,<class1>,...,<classK>[,gold][,meta:<key>...]`,
//! one row of integer counts per instance. Long format:
//! `instance_id,vote[,annotator_id]`, one row per annotation.

use std::collections::{BTreeMap, HashMap};
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::analysis::{CorrelationReport, EllipseSpec, PcaResult};
use crate::em::{EmConfig, FitResult};
use crate::error::{Error, Result};
use crate::model::{AnnotationDataset, ClassLabels, Instance, VoteCounts};
use crate::sampler::PosteriorDraws;

pub const FORMAT_VERSION: &str = "1";
const META_PREFIX: &str = "meta:";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DatasetFormat {
    Wide,
    Long,
}

impl std::str::FromStr for DatasetFormat {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "wide" => Ok(Self::Wide),
            "long" => Ok(Self::Long),
            _ => Err(Error::domain(format!("unknown format {s:?} (wide|long)"))),
        }
    }
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> Error + '_ {
    move |source| Error::Io {
        path: path.display().to_string(),
        source,
    }
}

fn parse_err(path: &str, line: usize, message: impl Into<String>) -> Error {
    Error::Parse {
        path: path.to_string(),
        line,
        message: message.into(),
    }
}

/// Reads CSV rows as trimmed string fields with their 1-based line numbers.
/// Blank lines are skipped.
fn read_rows(text: &str, path: &str) -> Result<Vec<(usize, Vec<String>)>> {
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(false)
        .flexible(true)
        .trim(csv::Trim::All)
        .from_reader(text.as_bytes());
    let mut rows = Vec::new();
    for rec in reader.records() {
        let rec = rec.map_err(|e| {
            let line = e.position().map_or(0, |p| p.line() as usize);
            parse_err(path, line, e.to_string())
        })?;
        let line = rec.position().map_or(0, |p| p.line() as usize);
        if rec.iter().all(str::is_empty) {
            continue;
        }
        rows.push((line, rec.iter().map(str::to_string).collect()));
    }
    Ok(rows)
}

pub fn load_dataset(path: &Path, format: DatasetFormat, labels: Option<&ClassLabels>) -> Result<AnnotationDataset> {
    let text = fs::read_to_string(path).map_err(io_err(path))?;
    parse_dataset(&text, &path.display().to_string(), format, labels)
}

/// Parses dataset text; `path` only labels error messages.
pub fn parse_dataset(
    text: &str,
    path: &str,
    format: DatasetFormat,
    labels: Option<&ClassLabels>,
) -> Result<AnnotationDataset> {
    let rows = read_rows(text, path)?;
    match format {
        DatasetFormat::Wide => parse_wide(&rows, path, labels),
        DatasetFormat::Long => parse_long(&rows, path, labels),
    }
}

fn parse_wide(rows: &[(usize, Vec<String>)], path: &str, labels: Option<&ClassLabels>) -> Result<AnnotationDataset> {
    let (header_line, header) = rows.first().ok_or_else(|| parse_err(path, 1, "empty file"))?;
    let header_line = *header_line;
    if header.first().map(String::as_str) != Some("instance_id") {
        return Err(parse_err(path, header_line, "first column must be instance_id"));
    }
    let mut classes = Vec::new();
    let mut gold_col = None;
    let mut meta_cols = Vec::new();
    for (c, name) in header.iter().enumerate().skip(1) {
        if name == "gold" {
            if gold_col.is_some() {
                return Err(parse_err(path, header_line, "duplicate gold column"));
            }
            gold_col = Some(c);
        } else if let Some(key) = name.strip_prefix(META_PREFIX) {
            meta_cols.push((c, key.to_string()));
        } else if gold_col.is_some() || !meta_cols.is_empty() {
            return Err(parse_err(
                path,
                header_line,
                format!("class column {name:?} after gold/meta columns"),
            ));
        } else {
            classes.push(name.clone());
        }
    }
    let header_labels = ClassLabels::new(classes.clone()).map_err(|e| parse_err(path, header_line, e.to_string()))?;
    // column of each class in the final order
    let (labels, class_cols): (ClassLabels, Vec<usize>) = match labels {
        None => (header_labels, (1..=classes.len()).collect()),
        Some(l) => {
            if l.len() != classes.len() {
                return Err(parse_err(path, header_line, "header classes do not match --labels"));
            }
            let cols = l
                .names()
                .iter()
                .map(|n| {
                    header_labels
                        .index_of(n)
                        .map(|i| i + 1)
                        .ok_or_else(|| parse_err(path, header_line, format!("class {n:?} missing from header")))
                })
                .collect::<Result<Vec<_>>>()?;
            (l.clone(), cols)
        }
    };

    let mut seen: HashMap<String, usize> = HashMap::new();
    let mut instances = Vec::new();
    for (line, row) in &rows[1..] {
        let line = *line;
        if row.len() != header.len() {
            return Err(parse_err(
                path,
                line,
                format!("expected {} fields, found {}", header.len(), row.len()),
            ));
        }
        let id = &row[0];
        if id.is_empty() {
            return Err(parse_err(path, line, "empty instance_id"));
        }
        if let Some(prev) = seen.insert(id.clone(), line) {
            return Err(parse_err(
                path,
                line,
                format!("duplicate instance_id {id:?} (first on line {prev})"),
            ));
        }
        let counts = class_cols
            .iter()
            .map(|&c| {
                let f = &row[c];
                if f.starts_with('-') {
                    return Err(parse_err(path, line, format!("negative count {f:?}")));
                }
                f.parse::<u32>()
                    .map_err(|_| parse_err(path, line, format!("invalid count {f:?}")))
            })
            .collect::<Result<Vec<_>>>()?;
        let votes = VoteCounts::new(counts).map_err(|e| parse_err(path, line, e.to_string()))?;
        let gold = match gold_col.map(|c| &row[c]) {
            None => None,
            Some(g) if g.is_empty() => None,
            Some(g) => Some(
                labels
                    .index_of(g)
                    .ok_or_else(|| parse_err(path, line, format!("unknown gold label {g:?}")))?,
            ),
        };
        let metadata: BTreeMap<String, String> = meta_cols.iter().map(|(c, k)| (k.clone(), row[*c].clone())).collect();
        instances.push(Instance {
            id: id.clone(),
            votes,
            gold,
            metadata,
        });
    }
    let last = rows.last().map_or(header_line, |r| r.0);
    AnnotationDataset::new(labels, instances).map_err(|e| parse_err(path, last, e.to_string()))
}

fn parse_long(rows: &[(usize, Vec<String>)], path: &str, labels: Option<&ClassLabels>) -> Result<AnnotationDataset> {
    let (header_line, header) = rows.first().ok_or_else(|| parse_err(path, 1, "empty file"))?;
    let ok_header = matches!(header.as_slice(), [a, b] if a == "instance_id" && b == "vote")
        || matches!(header.as_slice(), [a, b, c] if a == "instance_id" && b == "vote" && c == "annotator_id");
    if !ok_header {
        return Err(parse_err(
            path,
            *header_line,
            "header must be instance_id,vote[,annotator_id]",
        ));
    }
    let mut classes: Vec<String> = labels.map(|l| l.names().to_vec()).unwrap_or_default();
    let mut order: Vec<String> = Vec::new();
    let mut tallies: HashMap<String, Vec<u32>> = HashMap::new();
    for (line, row) in &rows[1..] {
        let line = *line;
        if row.len() != header.len() {
            return Err(parse_err(
                path,
                line,
                format!("expected {} fields, found {}", header.len(), row.len()),
            ));
        }
        let (id, vote) = (&row[0], &row[1]);
        if id.is_empty() {
            return Err(parse_err(path, line, "empty instance_id"));
        }
        if vote.is_empty() {
            return Err(parse_err(path, line, "empty vote"));
        }
        let k = match classes.iter().position(|c| c == vote) {
            Some(k) => k,
            None if labels.is_some() => {
                return Err(parse_err(path, line, format!("unknown class {vote:?}")));
            }
            None => {
                classes.push(vote.clone());
                classes.len() - 1
            }
        };
        let t = tallies.entry(id.clone()).or_insert_with(|| {
            order.push(id.clone());
            Vec::new()
        });
        if t.len() <= k {
            t.resize(k + 1, 0);
        }
        t[k] += 1;
    }
    let last = rows.last().map_or(*header_line, |r| r.0);
    let labels = ClassLabels::new(classes).map_err(|e| parse_err(path, last, e.to_string()))?;
    let instances = order
        .into_iter()
        .map(|id| {
            let mut counts = tallies.remove(&id).unwrap_or_default();
            counts.resize(labels.len(), 0);
            let votes = VoteCounts::new(counts).map_err(|e| parse_err(path, last, e.to_string()))?;
            Ok(Instance::new(id, votes))
        })
        .collect::<Result<Vec<_>>>()?;
    AnnotationDataset::new(labels, instances).map_err(|e| parse_err(path, last, e.to_string()))
}

fn csv_field(s: &str) -> String {
    if s.contains([',', '"', '\n', '\r']) || s != s.trim() {
        format!("\"{}\"", s.replace('"', "\"\""))
    } else {
        s.to_string()
    }
}

/// Shortest representation that parses back to the same `f64`.
pub fn fmt_f64(v: f64) -> String {
    format!("{v:?}")
}

/// Serializes a dataset in wide format (with gold/meta columns when any
/// instance carries them).
pub fn dataset_to_wide(ds: &AnnotationDataset) -> String {
    let has_gold = ds.instances().iter().any(|i| i.gold.is_some());
    let mut meta_keys: Vec<&String> = ds.instances().iter().flat_map(|i| i.metadata.keys()).collect();
    meta_keys.sort();
    meta_keys.dedup();
    let mut out = String::from("instance_id");
    for c in ds.labels().names() {
        out.push(',');
        out.push_str(&csv_field(c));
    }
    if has_gold {
        out.push_str(",gold");
    }
    for k in &meta_keys {
        out.push(',');
        out.push_str(&csv_field(&format!("{META_PREFIX}{k}")));
    }
    out.push('\n');
    for inst in ds.instances() {
        out.push_str(&csv_field(&inst.id));
        for c in inst.votes.counts() {
            let _ = write!(out, ",{c}");
        }
        if has_gold {
            out.push(',');
            if let Some(g) = inst.gold {
                out.push_str(&csv_field(ds.labels().name(g)));
            }
        }
        for k in &meta_keys {
            out.push(',');
            if let Some(v) = inst.metadata.get(*k) {
                out.push_str(&csv_field(v));
            }
        }
        out.push('\n');
    }
    out
}

pub fn write_dataset(ds: &AnnotationDataset, path: &Path) -> Result<()> {
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(parent).map_err(io_err(parent))?;
    }
    fs::write(path, dataset_to_wide(ds)).map_err(io_err(path))
}

/// Parameters of a `fit` run. Replaying it reproduces the outputs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunConfig {
    pub format_version: String,
    pub command: String,
    pub input: String,
    pub input_sha256: String,
    pub format: DatasetFormat,
    pub labels: Option<Vec<String>>,
    pub em: EmConfig,
    pub group_by: String,
    pub pca_scale: bool,
    pub coverage: f64,
    pub save_draws: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub path: String,
    pub sha256: String,
    pub bytes: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub format_version: String,
    pub files: Vec<ManifestEntry>,
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

/// Collects output files and hashes them as they are written.
pub struct OutputDir {
    root: PathBuf,
    entries: Vec<ManifestEntry>,
}

impl OutputDir {
    pub fn create(root: &Path) -> Result<Self> {
        fs::create_dir_all(root).map_err(io_err(root))?;
        Ok(Self {
            root: root.to_path_buf(),
            entries: Vec::new(),
        })
    }

    pub fn write(&mut self, rel: &str, contents: &str) -> Result<()> {
        let path = self.root.join(rel);
        if let Some(parent) = path.parent() {
            fs::create_dir_all(parent).map_err(io_err(parent))?;
        }
        fs::write(&path, contents).map_err(io_err(&path))?;
        self.entries.push(ManifestEntry {
            path: rel.to_string(),
            sha256: sha256_hex(contents.as_bytes()),
            bytes: contents.len(),
        });
        Ok(())
    }

    /// Writes `manifest.json` listing every file written so far.
    pub fn finish(mut self) -> Result<Manifest> {
        self.entries.sort_by(|a, b| a.path.cmp(&b.path));
        let manifest = Manifest {
            format_version: FORMAT_VERSION.to_string(),
            files: self.entries,
        };
        let path = self.root.join("manifest.json");
        let text = serde_json::to_string_pretty(&manifest).expect("manifest serializes") + "\n";
        fs::write(&path, text).map_err(io_err(&path))?;
        Ok(manifest)
    }
}

pub fn matrix_csv(m: &DMatrix<f64>, labels: &ClassLabels) -> String {
    let mut out = String::from("class");
    for c in labels.names() {
        out.push(',');
        out.push_str(&csv_field(c));
    }
    out.push('\n');
    for r in 0..m.nrows() {
        out.push_str(&csv_field(labels.name(r)));
        for c in 0..m.ncols() {
            out.push(',');
            out.push_str(&fmt_f64(m[(r, c)]));
        }
        out.push('\n');
    }
    out
}

pub fn embeddings_csv(ids: &[String], fit: &FitResult, labels: &ClassLabels) -> String {
    let mut out = String::from("instance_id");
    for c in labels.names() {
        out.push_str(&format!(",{}", csv_field(&format!("z_{c}"))));
    }
    for c in labels.names() {
        out.push_str(&format!(",{}", csv_field(&format!("p_{c}"))));
    }
    out.push_str(",cov_trace\n");
    for (i, id) in ids.iter().enumerate() {
        out.push_str(&csv_field(id));
        let z = &fit.embeddings[i];
        for v in z.as_slice() {
            out.push(',');
            out.push_str(&fmt_f64(*v));
        }
        for v in z.softmax() {
            out.push(',');
            out.push_str(&fmt_f64(v));
        }
        out.push(',');
        out.push_str(&fmt_f64(fit.covariance(i).trace()));
        out.push('\n');
    }
    out
}

pub fn draws_csv(draws: &PosteriorDraws, labels: &ClassLabels) -> String {
    let mut out = labels
        .names()
        .iter()
        .map(|c| csv_field(c))
        .collect::<Vec<_>>()
        .join(",");
    out.push('\n');
    for row in draws.rows() {
        out.push_str(&row.iter().map(|v| fmt_f64(*v)).collect::<Vec<_>>().join(","));
        out.push('\n');
    }
    out
}

/// File name for an instance's draws: unsafe characters become `_`.
pub fn draws_file_name(id: &str) -> String {
    let safe: String = id
        .chars()
        .map(|c| {
            if c.is_ascii_alphanumeric() || "._-".contains(c) {
                c
            } else {
                '_'
            }
        })
        .collect();
    format!("draws/{safe}.csv")
}

/// Output of the post-fit analyses. Absent entries produce no files.
#[derive(Debug, Clone, Default)]
pub struct Reports {
    pub correlation: Option<CorrelationReport>,
    pub pca: Option<PcaResult>,
    pub ellipses: Vec<EllipseSpec>,
    pub coverage: f64,
}

#[derive(Serialize)]
struct PriorFile<'a> {
    classes: &'a [String],
    mu: &'a [f64],
    sigma: Vec<Vec<f64>>,
    jitter: f64,
    iterations: usize,
    converged: bool,
    history: &'a [crate::em::IterationRecord],
}

#[derive(Serialize)]
struct PcaFile<'a> {
    center: &'a [f64],
    scale: &'a [f64],
    explained_variance_ratio: &'a [f64],
    eigenvalues: &'a [f64],
}

fn rows_of(m: &DMatrix<f64>) -> Vec<Vec<f64>> {
    (0..m.nrows()).map(|r| m.row(r).iter().copied().collect()).collect()
}

/// Writes the analysis files shared by `fit` and `analyze`.
pub fn write_reports(out: &mut OutputDir, ids: &[String], labels: &ClassLabels, reports: &Reports) -> Result<()> {
    if let Some(c) = &reports.correlation {
        out.write("correlation.csv", &matrix_csv(&c.corr, labels))?;
        if let Some(s) = &c.std {
            out.write("correlation_std.csv", &matrix_csv(s, labels))?;
        }
    }
    if let Some(p) = &reports.pca {
        let mut b = String::from("instance_id,pc1,pc2,group\n");
        for (i, id) in ids.iter().enumerate() {
            let g = p.groups.as_ref().map_or("", |g| g[i].as_str());
            let _ = writeln!(
                b,
                "{},{},{},{}",
                csv_field(id),
                fmt_f64(p.scores[(i, 0)]),
                fmt_f64(p.scores[(i, 1)]),
                csv_field(g)
            );
        }
        out.write("biplot.csv", &b)?;
        let mut l = String::from("class,pc1,pc2\n");
        for (k, c) in labels.names().iter().enumerate() {
            let _ = writeln!(
                l,
                "{},{},{}",
                csv_field(c),
                fmt_f64(p.loadings[(k, 0)]),
                fmt_f64(p.loadings[(k, 1)])
            );
        }
        out.write("loadings.csv", &l)?;
        let pca = PcaFile {
            center: &p.center,
            scale: &p.scale,
            explained_variance_ratio: &p.explained_variance_ratio,
            eigenvalues: &p.eigenvalues,
        };
        out.write(
            "pca.json",
            &(serde_json::to_string_pretty(&pca).expect("serializes") + "\n"),
        )?;
    }
    if !reports.ellipses.is_empty() {
        let mut e = String::from("group,center_x,center_y,axis_major,axis_minor,angle,coverage\n");
        for el in &reports.ellipses {
            let _ = writeln!(
                e,
                "{},{},{},{},{},{},{}",
                csv_field(&el.group),
                fmt_f64(el.center[0]),
                fmt_f64(el.center[1]),
                fmt_f64(el.axes[0]),
                fmt_f64(el.axes[1]),
                fmt_f64(el.angle),
                fmt_f64(reports.coverage)
            );
        }
        out.write("ellipses.csv", &e)?;
    }
    Ok(())
}

/// Writes every `fit` output plus `manifest.json` into `out_dir`.
pub fn write_outputs(
    dataset: &AnnotationDataset,
    fit: &FitResult,
    reports: &Reports,
    run_config: &RunConfig,
    out_dir: &Path,
) -> Result<Manifest> {
    let labels = dataset.labels();
    let ids: Vec<String> = dataset.instances().iter().map(|i| i.id.clone()).collect();
    let mut out = OutputDir::create(out_dir)?;
    out.write("embeddings.csv", &embeddings_csv(&ids, fit, labels))?;
    let prior = PriorFile {
        classes: labels.names(),
        mu: fit.final_prior.mu(),
        sigma: rows_of(fit.final_prior.sigma()),
        jitter: fit.final_prior.jitter(),
        iterations: fit.iterations_run,
        converged: fit.converged,
        history: &fit.history,
    };
    out.write(
        "prior.json",
        &(serde_json::to_string_pretty(&prior).expect("serializes") + "\n"),
    )?;
    write_reports(&mut out, &ids, labels, reports)?;
    if run_config.save_draws {
        for (i, id) in ids.iter().enumerate() {
            out.write(&draws_file_name(id), &draws_csv(fit.draws(i), labels))?;
        }
    }
    out.write(
        "run_config.json",
        &(serde_json::to_string_pretty(run_config).expect("serializes") + "\n"),
    )?;
    out.finish()
}

/// Embeddings and optional draws read back from a `fit` output directory.
#[derive(Debug, Clone)]
pub struct SavedFit {
    pub labels: ClassLabels,
    pub ids: Vec<String>,
    pub embeddings: DMatrix<f64>,
    pub draws: Option<Vec<PosteriorDraws>>,
}

pub fn load_saved_fit(dir: &Path) -> Result<SavedFit> {
    let path = dir.join("embeddings.csv");
    let text = fs::read_to_string(&path).map_err(io_err(&path))?;
    let p = path.display().to_string();
    let rows = read_rows(&text, &p)?;
    let (hl, header) = rows.first().ok_or_else(|| parse_err(&p, 1, "empty file"))?;
    let classes: Vec<String> = header
        .iter()
        .filter_map(|h| h.strip_prefix("z_").map(str::to_string))
        .collect();
    let labels = ClassLabels::new(classes).map_err(|e| parse_err(&p, *hl, e.to_string()))?;
    let k = labels.len();
    let mut ids = Vec::new();
    let mut values = Vec::new();
    for (line, row) in &rows[1..] {
        if row.len() != header.len() {
            return Err(parse_err(&p, *line, "field count mismatch"));
        }
        ids.push(row[0].clone());
        for f in &row[1..=k] {
            values.push(
                f.parse::<f64>()
                    .map_err(|_| parse_err(&p, *line, format!("bad number {f:?}")))?,
            );
        }
    }
    let embeddings = DMatrix::from_row_slice(ids.len(), k, &values);
    let draws_dir = dir.join("draws");
    let draws = if draws_dir.is_dir() {
        let mut all = Vec::with_capacity(ids.len());
        for id in &ids {
            let path = dir.join(draws_file_name(id));
            let text = fs::read_to_string(&path).map_err(io_err(&path))?;
            let dp = path.display().to_string();
            let rows = read_rows(&text, &dp)?;
            let parsed = rows[1..]
                .iter()
                .map(|(line, r)| {
                    r.iter()
                        .map(|f| {
                            f.parse::<f64>()
                                .map_err(|_| parse_err(&dp, *line, format!("bad number {f:?}")))
                        })
                        .collect::<Result<Vec<_>>>()
                })
                .collect::<Result<Vec<_>>>()?;
            all.push(PosteriorDraws::from_rows(&parsed, 0.0, 0)?);
        }
        Some(all)
    } else {
        None
    };
    Ok(SavedFit {
        labels,
        ids,
        embeddings,
        draws,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn wide_row_from_table() {
        let ds = parse_dataset("instance_id,C,N,E\ns1,0,0,100\n", "t", DatasetFormat::Wide, None).unwrap();
        assert_eq!(ds.instances()[0].votes.counts(), &[0, 0, 100]);
        assert_eq!(ds.instances()[0].votes.total(), 100);
    }

    #[test]
    fn long_rows_aggregate() {
        let mut text = String::from("instance_id,vote,annotator_id\n");
        for a in 0..9 {
            text.push_str(&format!("img,C,a{a}\n"));
        }
        text.push_str("img,B,a9\nimg,B,a10\n");
        let ds = parse_dataset(&text, "t", DatasetFormat::Long, None).unwrap();
        assert_eq!(ds.labels().names(), &["C", "B"]);
        assert_eq!(ds.instances()[0].votes.counts(), &[9, 2]);
        let labels = ClassLabels::new(["A", "B", "C"]).unwrap();
        let ds = parse_dataset(&text, "t", DatasetFormat::Long, Some(&labels)).unwrap();
        assert_eq!(ds.instances()[0].votes.counts(), &[0, 2, 9]);
        assert_eq!(ds.instances()[0].votes.total(), 11);
    }

    #[test]
    fn explicit_labels_reorder_wide_columns() {
        let labels = ClassLabels::new(["E", "C", "N"]).unwrap();
        let ds = parse_dataset("instance_id,C,N,E\na,1,2,3\n", "t", DatasetFormat::Wide, Some(&labels)).unwrap();
        assert_eq!(ds.instances()[0].votes.counts(), &[3, 1, 2]);
    }

    #[test]
    fn errors_carry_line_numbers() {
        let err = parse_dataset("instance_id,a,b\nx,1,2\ny,-1,2\n", "f.csv", DatasetFormat::Wide, None).unwrap_err();
        match err {
            Error::Parse { line, path, .. } => {
                assert_eq!(line, 3);
                assert_eq!(path, "f.csv");
            }
            e => panic!("{e}"),
        }
    }

    #[test]
    fn float_formatting_round_trips() {
        for v in [0.1, 1.0 / 3.0, -2.5e-300, 1e300, 123456789.12345679] {
            assert_eq!(fmt_f64(v).parse::<f64>().unwrap(), v);
        }
    }

    #[test]
    fn draws_file_names_are_sanitized() {
        assert_eq!(draws_file_name("a/b c.png"), "draws/a_b_c.png.csv");
    }
}
