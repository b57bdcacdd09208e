//! On-disk datasets and time-series inputs.
//!
//! A dataset directory holds `manifest.json` plus one binary graph record per
//! subject under `graphs/`. Record layout (all integers little-endian):
//!
//! ```text
//! magic        4 bytes  "BGR1"
//! version      u32      GRAPH_SCHEMA_VERSION
//! id_len       u32      followed by id_len bytes of UTF-8 subject id
//! n_nodes      u32
//! feature_dim  u32
//! features     n_nodes * feature_dim f64, row-major
//! n_edges      u32
//! edges        n_edges * (u32 i, u32 j), i < j
//! weights      n_edges * f64
//! has_label    u8       0 or 1, followed by u32 label when 1
//! ```
//!
//! Time-series inputs are either text (`.csv`, `.tsv`, `.txt`) with a
//! `# shape <n_regions> <n_timepoints>` header line followed by one row per
//! region (comma, tab or space separated), or binary (`.rts`): magic `RTS1`,
//! u32 n_regions, u32 n_timepoints, then row-major f64 values.

use std::collections::{BTreeMap, HashSet};
use std::fs;
use std::io::{BufWriter, Read, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::connectome::{BrainGraph, RoiTimeSeries};
use crate::error::{Error, Result};
use crate::tape::Mat;

pub const MANIFEST_SCHEMA_VERSION: u32 = 1;
pub const GRAPH_SCHEMA_VERSION: u32 = 1;
const GRAPH_MAGIC: &[u8; 4] = b"BGR1";
const SERIES_MAGIC: &[u8; 4] = b"RTS1";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub schema_version: u32,
    pub name: String,
    pub subject_ids: Vec<String>,
    #[serde(default)]
    pub labels: BTreeMap<String, u32>,
    pub split_seed: u64,
    #[serde(default)]
    pub provenance: String,
}

impl DatasetManifest {
    pub fn new(name: impl Into<String>, subject_ids: Vec<String>, split_seed: u64) -> Self {
        Self {
            schema_version: MANIFEST_SCHEMA_VERSION,
            name: name.into(),
            subject_ids,
            labels: BTreeMap::new(),
            split_seed,
            provenance: String::new(),
        }
    }

    /// Builds a manifest describing `graphs`, copying their labels.
    pub fn for_graphs(name: impl Into<String>, graphs: &[BrainGraph], split_seed: u64) -> Self {
        let mut m = Self::new(
            name,
            graphs.iter().map(|g| g.subject_id.clone()).collect(),
            split_seed,
        );
        for g in graphs {
            if let Some(l) = g.label {
                m.labels.insert(g.subject_id.clone(), l);
            }
        }
        m
    }

    pub fn validate(&self) -> Result<()> {
        let mut seen = HashSet::new();
        for id in &self.subject_ids {
            if !seen.insert(id.as_str()) {
                return Err(Error::Validation(format!("duplicate subject id `{id}`")));
            }
        }
        for id in self.labels.keys() {
            if !seen.contains(id.as_str()) {
                return Err(Error::Validation(format!(
                    "label given for unknown subject `{id}`"
                )));
            }
        }
        Ok(())
    }

    /// Checks that `graphs` are exactly the manifest's subjects, in order,
    /// with matching labels.
    pub fn validate_against(&self, graphs: &[BrainGraph]) -> Result<()> {
        self.validate()?;
        if graphs.len() != self.subject_ids.len() {
            return Err(Error::Validation(format!(
                "manifest lists {} subjects but {} graphs were given",
                self.subject_ids.len(),
                graphs.len()
            )));
        }
        for (g, id) in graphs.iter().zip(&self.subject_ids) {
            if &g.subject_id != id {
                return Err(Error::Validation(format!(
                    "graph `{}` does not match manifest subject `{id}`",
                    g.subject_id
                )));
            }
            if g.label != self.labels.get(id).copied() {
                return Err(Error::Validation(format!("label mismatch for subject `{id}`")));
            }
        }
        Ok(())
    }
}

/// Graphs plus their manifest.
#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub graphs: Vec<BrainGraph>,
    pub manifest: DatasetManifest,
}

impl Dataset {
    pub fn new(name: impl Into<String>, graphs: Vec<BrainGraph>, split_seed: u64) -> Self {
        let manifest = DatasetManifest::for_graphs(name, &graphs, split_seed);
        Self { graphs, manifest }
    }

    pub fn len(&self) -> usize {
        self.graphs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.graphs.is_empty()
    }

    /// Labels of every graph; errors if any graph is unlabeled.
    pub fn labels(&self) -> Result<Vec<u32>> {
        self.graphs
            .iter()
            .map(|g| {
                g.label.ok_or_else(|| {
                    Error::Validation(format!("subject `{}` has no label", g.subject_id))
                })
            })
            .collect()
    }
}

fn record_name(index: usize) -> String {
    format!("{index:06}.bgr")
}

/// Writes `graphs` and `manifest` into `dir` (created if needed).
pub fn save_dataset(graphs: &[BrainGraph], manifest: &DatasetManifest, dir: &Path) -> Result<()> {
    manifest.validate_against(graphs)?;
    let gdir = dir.join("graphs");
    fs::create_dir_all(&gdir).map_err(|e| Error::io(&gdir, e))?;
    for (i, g) in graphs.iter().enumerate() {
        let path = gdir.join(record_name(i));
        let file = fs::File::create(&path).map_err(|e| Error::io(&path, e))?;
        let mut w = BufWriter::new(file);
        write_graph(&mut w, g).map_err(|e| Error::io(&path, e))?;
        w.flush().map_err(|e| Error::io(&path, e))?;
    }
    let path = dir.join("manifest.json");
    let text = serde_json::to_string_pretty(manifest)?;
    fs::write(&path, text).map_err(|e| Error::io(&path, e))?;
    Ok(())
}

pub fn save(dataset: &Dataset, dir: &Path) -> Result<()> {
    save_dataset(&dataset.graphs, &dataset.manifest, dir)
}

/// Reads a dataset directory written by [`save_dataset`].
pub fn load_dataset(dir: &Path) -> Result<Dataset> {
    let path = dir.join("manifest.json");
    let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    let manifest: DatasetManifest = serde_json::from_str(&text)?;
    if manifest.schema_version != MANIFEST_SCHEMA_VERSION {
        return Err(Error::SchemaVersion {
            path,
            found: manifest.schema_version,
            supported: MANIFEST_SCHEMA_VERSION,
        });
    }
    manifest.validate()?;
    let mut graphs = Vec::with_capacity(manifest.subject_ids.len());
    for (i, id) in manifest.subject_ids.iter().enumerate() {
        let path = dir.join("graphs").join(record_name(i));
        if !path.exists() {
            return Err(Error::Validation(format!(
                "subject `{id}` has no graph record at {}",
                path.display()
            )));
        }
        let bytes = fs::read(&path).map_err(|e| Error::io(&path, e))?;
        let g = read_graph(&bytes, &path)?;
        graphs.push(g);
    }
    manifest.validate_against(&graphs)?;
    Ok(Dataset { graphs, manifest })
}

fn put_u32(w: &mut impl Write, v: usize) -> std::io::Result<()> {
    let v = u32::try_from(v)
        .map_err(|_| std::io::Error::new(std::io::ErrorKind::InvalidData, "value exceeds u32"))?;
    w.write_all(&v.to_le_bytes())
}

fn write_graph(w: &mut impl Write, g: &BrainGraph) -> std::io::Result<()> {
    w.write_all(GRAPH_MAGIC)?;
    w.write_all(&GRAPH_SCHEMA_VERSION.to_le_bytes())?;
    put_u32(w, g.subject_id.len())?;
    w.write_all(g.subject_id.as_bytes())?;
    put_u32(w, g.n_nodes)?;
    put_u32(w, g.feature_dim())?;
    for r in 0..g.n_nodes {
        for c in 0..g.feature_dim() {
            w.write_all(&g.node_features[(r, c)].to_le_bytes())?;
        }
    }
    put_u32(w, g.edges.len())?;
    for &(i, j) in &g.edges {
        put_u32(w, i)?;
        put_u32(w, j)?;
    }
    for wt in &g.edge_weights {
        w.write_all(&wt.to_le_bytes())?;
    }
    match g.label {
        Some(l) => {
            w.write_all(&[1])?;
            w.write_all(&l.to_le_bytes())?;
        }
        None => w.write_all(&[0])?,
    }
    Ok(())
}

struct Cursor<'a> {
    bytes: &'a [u8],
    at: usize,
    path: &'a Path,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.at + n > self.bytes.len() {
            return Err(Error::Format {
                path: self.path.to_path_buf(),
                reason: format!("truncated at byte {}", self.at),
            });
        }
        let s = &self.bytes[self.at..self.at + n];
        self.at += n;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn usize(&mut self) -> Result<usize> {
        self.u32().map(|v| v as usize)
    }

    fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
}

fn read_graph(bytes: &[u8], path: &Path) -> Result<BrainGraph> {
    let mut c = Cursor { bytes, at: 0, path };
    if c.take(4)? != GRAPH_MAGIC {
        return Err(Error::Format {
            path: path.to_path_buf(),
            reason: "bad magic".into(),
        });
    }
    let version = c.u32()?;
    if version != GRAPH_SCHEMA_VERSION {
        return Err(Error::SchemaVersion {
            path: path.to_path_buf(),
            found: version,
            supported: GRAPH_SCHEMA_VERSION,
        });
    }
    let id_len = c.usize()?;
    let subject_id = String::from_utf8(c.take(id_len)?.to_vec()).map_err(|_| Error::Format {
        path: path.to_path_buf(),
        reason: "subject id is not UTF-8".into(),
    })?;
    let n_nodes = c.usize()?;
    let dim = c.usize()?;
    let mut features = Mat::zeros(n_nodes, dim);
    for r in 0..n_nodes {
        for col in 0..dim {
            features[(r, col)] = c.f64()?;
        }
    }
    let n_edges = c.usize()?;
    let mut edges = Vec::with_capacity(n_edges);
    for _ in 0..n_edges {
        edges.push((c.usize()?, c.usize()?));
    }
    let mut edge_weights = Vec::with_capacity(n_edges);
    for _ in 0..n_edges {
        edge_weights.push(c.f64()?);
    }
    let label = match c.take(1)?[0] {
        0 => None,
        1 => Some(c.u32()?),
        b => {
            return Err(Error::Format {
                path: path.to_path_buf(),
                reason: format!("bad label flag {b}"),
            })
        }
    };
    let g = BrainGraph {
        subject_id,
        n_nodes,
        node_features: features,
        edges,
        edge_weights,
        label,
    };
    g.validate().map_err(|e| Error::Format {
        path: path.to_path_buf(),
        reason: e.to_string(),
    })?;
    Ok(g)
}

/// Reads one time-series file; the subject id is the file stem.
pub fn read_time_series(path: &Path) -> Result<RoiTimeSeries> {
    let subject_id = path
        .file_stem()
        .and_then(|s| s.to_str())
        .unwrap_or("subject")
        .to_string();
    let ext = path.extension().and_then(|e| e.to_str()).unwrap_or("");
    let series = if ext == "rts" {
        let mut bytes = Vec::new();
        fs::File::open(path)
            .and_then(|mut f| f.read_to_end(&mut bytes))
            .map_err(|e| Error::io(path, e))?;
        let mut c = Cursor { bytes: &bytes, at: 0, path };
        if c.take(4)? != SERIES_MAGIC {
            return Err(Error::Format {
                path: path.to_path_buf(),
                reason: "bad magic".into(),
            });
        }
        let n = c.usize()?;
        let t = c.usize()?;
        let mut m = Mat::zeros(n, t);
        for r in 0..n {
            for col in 0..t {
                m[(r, col)] = c.f64()?;
            }
        }
        m
    } else {
        parse_text_series(&fs::read_to_string(path).map_err(|e| Error::io(path, e))?, path)?
    };
    RoiTimeSeries::new(subject_id, series)
}

fn parse_text_series(text: &str, path: &Path) -> Result<Mat> {
    let fmt = |reason: String| Error::Format {
        path: path.to_path_buf(),
        reason,
    };
    let mut shape = None;
    let mut rows: Vec<Vec<f64>> = Vec::new();
    for line in text.lines() {
        let line = line.trim();
        if line.is_empty() {
            continue;
        }
        if let Some(rest) = line.strip_prefix('#') {
            let mut it = rest.split_whitespace();
            if it.next() == Some("shape") {
                let n: usize = it.next().and_then(|s| s.parse().ok()).ok_or_else(|| fmt("bad shape header".into()))?;
                let t: usize = it.next().and_then(|s| s.parse().ok()).ok_or_else(|| fmt("bad shape header".into()))?;
                shape = Some((n, t));
            }
            continue;
        }
        let row = line
            .split(|c: char| c == ',' || c == '\t' || c.is_whitespace())
            .filter(|s| !s.is_empty())
            .map(|s| s.parse::<f64>().map_err(|_| fmt(format!("bad number `{s}`"))))
            .collect::<Result<Vec<_>>>()?;
        rows.push(row);
    }
    let (n, t) = shape.ok_or_else(|| fmt("missing `# shape <regions> <timepoints>` header".into()))?;
    if rows.len() != n || rows.iter().any(|r| r.len() != t) {
        return Err(fmt(format!("data does not match declared shape {n}x{t}")));
    }
    Ok(Mat::from_fn(n, t, |i, j| rows[i][j]))
}

/// Writes a series in the binary `.rts` layout.
pub fn write_time_series_binary(ts: &RoiTimeSeries, path: &Path) -> Result<()> {
    let file = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    let go = |w: &mut BufWriter<fs::File>| -> std::io::Result<()> {
        w.write_all(SERIES_MAGIC)?;
        put_u32(w, ts.n_regions())?;
        put_u32(w, ts.n_timepoints())?;
        for r in 0..ts.n_regions() {
            for c in 0..ts.n_timepoints() {
                w.write_all(&ts.series[(r, c)].to_le_bytes())?;
            }
        }
        w.flush()
    };
    go(&mut w).map_err(|e| Error::io(path, e))
}

/// Writes a series as shape-headed CSV text.
pub fn write_time_series_text(ts: &RoiTimeSeries, path: &Path) -> Result<()> {
    let mut out = format!("# shape {} {}\n", ts.n_regions(), ts.n_timepoints());
    for r in 0..ts.n_regions() {
        let row: Vec<String> = ts.series.row(r).iter().map(|v| format!("{v:?}")).collect();
        out.push_str(&row.join(","));
        out.push('\n');
    }
    fs::write(path, out).map_err(|e| Error::io(path, e))
}

/// Time-series files in `dir`, sorted by name.
pub fn list_series_files(dir: &Path) -> Result<Vec<PathBuf>> {
    let mut files: Vec<PathBuf> = fs::read_dir(dir)
        .map_err(|e| Error::io(dir, e))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| {
            matches!(
                p.extension().and_then(|e| e.to_str()),
                Some("csv" | "tsv" | "txt" | "rts")
            ) && p.file_stem().and_then(|s| s.to_str()) != Some("labels")
        })
        .collect();
    files.sort();
    Ok(files)
}

/// Optional `labels.csv` (`subject_id,label` per line, header row
/// optional) next to series files.
pub fn read_labels(dir: &Path) -> Result<BTreeMap<String, u32>> {
    let path = dir.join("labels.csv");
    let mut map = BTreeMap::new();
    if !path.exists() {
        return Ok(map);
    }
    let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    for (n, line) in text.lines().map(str::trim).filter(|l| !l.is_empty() && !l.starts_with('#')).enumerate() {
        if n == 0 && line.replace(' ', "") == "subject_id,label" {
            continue;
        }
        let (id, label) = line.split_once(',').ok_or_else(|| Error::Format {
            path: path.clone(),
            reason: format!("expected `subject_id,label`, got `{line}`"),
        })?;
        let label = label.trim().parse().map_err(|_| Error::Format {
            path: path.clone(),
            reason: format!("bad label `{label}`"),
        })?;
        map.insert(id.trim().to_string(), label);
    }
    Ok(map)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::connectome::{build_graph, ConnectivityMatrix, EdgeSelection};

    fn graph(id: &str, n: usize, label: Option<u32>) -> BrainGraph {
        let mut m = Mat::identity(n, n);
        for i in 0..n {
            for j in (i + 1)..n {
                let v = ((i * 7 + j * 3) % 11) as f64 / 11.0 - 0.3 + 1e-17 * i as f64;
                m[(i, j)] = v;
                m[(j, i)] = v;
            }
        }
        let c = ConnectivityMatrix::new(id, m).unwrap();
        let mut g = build_graph(&c, 4, EdgeSelection::Raw).graph;
        g.label = label;
        g
    }

    #[test]
    fn round_trip_is_exact() {
        let dir = tempfile::tempdir().unwrap();
        let graphs = vec![graph("a", 5, Some(1)), graph("b", 6, None), graph("c", 4, Some(0))];
        let manifest = DatasetManifest::for_graphs("toy", &graphs, 3);
        save_dataset(&graphs, &manifest, dir.path()).unwrap();
        let ds = load_dataset(dir.path()).unwrap();
        assert_eq!(ds.graphs, graphs);
        assert_eq!(ds.manifest, manifest);
    }

    #[test]
    fn empty_dataset_round_trips() {
        let dir = tempfile::tempdir().unwrap();
        let manifest = DatasetManifest::new("empty", vec![], 0);
        save_dataset(&[], &manifest, dir.path()).unwrap();
        let ds = load_dataset(dir.path()).unwrap();
        assert!(ds.graphs.is_empty());
        assert_eq!(ds.manifest.name, "empty");
    }

    #[test]
    fn missing_subject_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let graphs = vec![graph("a", 5, None)];
        let manifest = DatasetManifest::for_graphs("toy", &graphs, 0);
        save_dataset(&graphs, &manifest, dir.path()).unwrap();
        let mut m2 = manifest.clone();
        m2.subject_ids.push("ghost".into());
        fs::write(dir.path().join("manifest.json"), serde_json::to_string(&m2).unwrap()).unwrap();
        assert!(matches!(load_dataset(dir.path()), Err(Error::Validation(_))));
    }

    #[test]
    fn label_for_unknown_subject_is_rejected() {
        let mut m = DatasetManifest::new("x", vec!["a".into()], 0);
        m.labels.insert("b".into(), 1);
        assert!(m.validate().is_err());
    }

    #[test]
    fn schema_version_mismatch() {
        let dir = tempfile::tempdir().unwrap();
        let mut m = DatasetManifest::new("x", vec![], 0);
        m.schema_version = 99;
        fs::write(dir.path().join("manifest.json"), serde_json::to_string(&m).unwrap()).unwrap();
        assert!(matches!(load_dataset(dir.path()), Err(Error::SchemaVersion { found: 99, .. })));
    }

    #[test]
    fn series_text_and_binary_formats() {
        let dir = tempfile::tempdir().unwrap();
        let ts = RoiTimeSeries::new("subj01", Mat::from_fn(3, 5, |i, j| (i * 5 + j) as f64 * 0.1 + 1.0 / 3.0)).unwrap();
        let p = dir.path().join("subj01.csv");
        write_time_series_text(&ts, &p).unwrap();
        assert_eq!(read_time_series(&p).unwrap(), ts);
        let p = dir.path().join("subj01.rts");
        write_time_series_binary(&ts, &p).unwrap();
        assert_eq!(read_time_series(&p).unwrap(), ts);
    }

    #[test]
    fn text_series_without_header_fails() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("s.csv");
        fs::write(&p, "1,2,3\n4,5,6\n").unwrap();
        assert!(matches!(read_time_series(&p), Err(Error::Format { .. })));
    }
}
