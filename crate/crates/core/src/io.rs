//! Dataset directories and the Planetoid converter.
//!
//! A dataset directory holds `edges.tsv` (source, target), `features.tsv`
//! (node id then feature values), `labels.tsv` (node id, class),
//! `splits.tsv` (node id, `train`/`val`/`test`) and
//! `meta.json` (`{"directed": bool, "num_classes": C}`). Blank lines and lines
//! starting with `#` are ignored.

use std::collections::{BTreeMap, HashMap};
use std::fs;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graph::{Graph, NodeData, Split};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Meta {
    pub directed: bool,
    pub num_classes: usize,
}

fn read(path: &Path) -> Result<String> {
    fs::read_to_string(path).map_err(|e| Error::load(path, 0, format!("cannot read file: {e}")))
}

/// Non-comment lines as `(1-based line number, whitespace-split fields)`.
fn rows(text: &str) -> impl Iterator<Item = (usize, Vec<&str>)> {
    text.lines().enumerate().filter_map(|(k, line)| {
        let t = line.trim();
        if t.is_empty() || t.starts_with('#') {
            None
        } else {
            Some((k + 1, t.split_whitespace().collect()))
        }
    })
}

fn parse<T: std::str::FromStr>(path: &Path, line: usize, field: &str, what: &str) -> Result<T> {
    field
        .parse()
        .map_err(|_| Error::load(path, line, format!("cannot parse {what} from `{field}`")))
}

fn expect_fields(path: &Path, line: usize, fields: &[&str], n: usize) -> Result<()> {
    if fields.len() != n {
        return Err(Error::load(path, line, format!("expected {n} columns, found {}", fields.len())));
    }
    Ok(())
}

/// Per-node rows keyed by id, checked to cover `0..n` without gaps.
fn dense_ids<T>(path: &Path, entries: BTreeMap<usize, (usize, T)>, last_line: usize) -> Result<Vec<T>> {
    let mut out = Vec::with_capacity(entries.len());
    for (expected, (id, (_, v))) in entries.into_iter().enumerate() {
        if id != expected {
            return Err(Error::load(path, last_line, format!("node id {expected} is missing")));
        }
        out.push(v);
    }
    Ok(out)
}

pub fn load_dataset(dir: &Path) -> Result<Graph> {
    let meta_path = dir.join("meta.json");
    let meta: Meta = serde_json::from_str(&read(&meta_path)?)
        .map_err(|e| Error::load(&meta_path, e.line(), e.to_string()))?;

    let fpath = dir.join("features.tsv");
    let text = read(&fpath)?;
    let mut width = None;
    let mut feats = BTreeMap::new();
    let mut last = 0;
    for (line, f) in rows(&text) {
        last = line;
        let id: usize = parse(&fpath, line, f[0], "node id")?;
        let w = f.len() - 1;
        match width {
            None => width = Some(w),
            Some(prev) if prev != w => {
                return Err(Error::load(&fpath, line, format!("expected {prev} feature values, found {w}")));
            }
            _ => {}
        }
        let values: Vec<f64> = f[1..]
            .iter()
            .map(|s| parse(&fpath, line, s, "feature value"))
            .collect::<Result<_>>()?;
        if feats.insert(id, (line, values)).is_some() {
            return Err(Error::load(&fpath, line, format!("duplicate node id {id}")));
        }
    }
    let feats = dense_ids(&fpath, feats, last)?;
    let n = feats.len();
    if n == 0 {
        return Err(Error::load(&fpath, 0, "no nodes"));
    }
    let width = width.unwrap_or(0);
    let features = Tensor::matrix(n, width, feats.into_iter().flatten().collect())?;

    let lpath = dir.join("labels.tsv");
    let text = read(&lpath)?;
    let mut labels = vec![None; n];
    for (line, f) in rows(&text) {
        expect_fields(&lpath, line, &f, 2)?;
        let id: usize = parse(&lpath, line, f[0], "node id")?;
        let y: usize = parse(&lpath, line, f[1], "class")?;
        if id >= n {
            return Err(Error::load(&lpath, line, format!("node id {id} has no features")));
        }
        if y >= meta.num_classes {
            return Err(Error::load(&lpath, line, format!("class {y} outside 0..{}", meta.num_classes)));
        }
        labels[id] = Some(y);
    }
    let labels: Vec<usize> = labels
        .into_iter()
        .enumerate()
        .map(|(id, y)| y.ok_or_else(|| Error::load(&lpath, 0, format!("node id {id} has no label"))))
        .collect::<Result<_>>()?;

    let spath = dir.join("splits.tsv");
    let text = read(&spath)?;
    let mut splits = vec![None; n];
    for (line, f) in rows(&text) {
        expect_fields(&spath, line, &f, 2)?;
        let id: usize = parse(&spath, line, f[0], "node id")?;
        if id >= n {
            return Err(Error::load(&spath, line, format!("node id {id} has no features")));
        }
        let s = Split::parse(f[1]).ok_or_else(|| Error::load(&spath, line, format!("unknown split tag `{}`", f[1])))?;
        splits[id] = Some(s);
    }

    let epath = dir.join("edges.tsv");
    let text = read(&epath)?;
    let mut edges = Vec::new();
    for (line, f) in rows(&text) {
        expect_fields(&epath, line, &f, 2)?;
        let s: usize = parse(&epath, line, f[0], "source id")?;
        let t: usize = parse(&epath, line, f[1], "target id")?;
        if s >= n || t >= n {
            return Err(Error::load(&epath, line, format!("edge ({s}, {t}) references an unknown node")));
        }
        edges.push((s, t));
    }

    let (g, report) = Graph::build(
        &edges,
        meta.directed,
        NodeData {
            features,
            labels,
            num_classes: meta.num_classes,
            splits,
        },
    )?;
    if report.duplicates_dropped > 0 {
        log::info!("{}: {} duplicate edge(s) collapsed", epath.display(), report.duplicates_dropped);
    }
    Ok(g)
}

/// Name used in records: the directory's final component.
pub fn dataset_name(dir: &Path) -> String {
    dir.file_name()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_else(|| dir.display().to_string())
}

fn create(path: PathBuf) -> Result<BufWriter<fs::File>> {
    Ok(BufWriter::new(fs::File::create(path)?))
}

/// Write `g` as a directed dataset directory that [`load_dataset`] reads back
/// to the same graph.
pub fn write_dataset(dir: &Path, g: &Graph) -> Result<()> {
    fs::create_dir_all(dir)?;
    let mut w = create(dir.join("edges.tsv"))?;
    writeln!(w, "# source\ttarget")?;
    for e in 0..g.num_edges() {
        let (s, t) = g.edge(e);
        writeln!(w, "{s}\t{t}")?;
    }
    w.flush()?;

    let mut w = create(dir.join("features.tsv"))?;
    for v in 0..g.num_nodes() {
        write!(w, "{v}")?;
        for x in g.features().row(v) {
            write!(w, "\t{x}")?;
        }
        writeln!(w)?;
    }
    w.flush()?;

    let mut w = create(dir.join("labels.tsv"))?;
    for (v, y) in g.labels().iter().enumerate() {
        writeln!(w, "{v}\t{y}")?;
    }
    w.flush()?;

    let mut w = create(dir.join("splits.tsv"))?;
    for (v, s) in g.splits().iter().enumerate() {
        if let Some(s) = s {
            writeln!(w, "{v}\t{}", s.as_str())?;
        }
    }
    w.flush()?;

    let meta = Meta {
        directed: true,
        num_classes: g.num_classes(),
    };
    fs::write(dir.join("meta.json"), serde_json::to_string_pretty(&meta)? + "\n")?;
    Ok(())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct PlanetoidSplit {
    pub train_per_class: usize,
    pub val: usize,
    pub test: usize,
}

impl Default for PlanetoidSplit {
    fn default() -> Self {
        PlanetoidSplit {
            train_per_class: 20,
            val: 500,
            test: 1000,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ConvertReport {
    pub num_nodes: usize,
    pub num_edges: usize,
    pub num_classes: usize,
    pub skipped_citations: usize,
}

/// Convert Planetoid `*.content` / `*.cites` files into a dataset directory.
///
/// Paper ids are mapped to dense indices in file order, class names to
/// indices in sorted order, and citations are treated as undirected. Splits
/// take `train_per_class` random nodes of every class for training, then
/// `val` and `test` nodes from the remainder.
pub fn convert_planetoid(content: &Path, cites: &Path, out: &Path, split: PlanetoidSplit, seed: u64) -> Result<ConvertReport> {
    let text = read(content)?;
    let mut ids: HashMap<String, usize> = HashMap::new();
    let mut feats: Vec<Vec<f64>> = Vec::new();
    let mut class_names: Vec<String> = Vec::new();
    let mut width = None;
    for (line, f) in rows(&text) {
        if f.len() < 3 {
            return Err(Error::load(content, line, "expected paper id, features and class"));
        }
        let w = f.len() - 2;
        match width {
            None => width = Some(w),
            Some(prev) if prev != w => {
                return Err(Error::load(content, line, format!("expected {prev} feature values, found {w}")));
            }
            _ => {}
        }
        if ids.insert(f[0].to_string(), feats.len()).is_some() {
            return Err(Error::load(content, line, format!("duplicate paper id {}", f[0])));
        }
        feats.push(
            f[1..f.len() - 1]
                .iter()
                .map(|s| parse(content, line, s, "feature value"))
                .collect::<Result<_>>()?,
        );
        class_names.push(f[f.len() - 1].to_string());
    }
    let n = feats.len();
    if n == 0 {
        return Err(Error::load(content, 0, "no papers"));
    }
    let mut classes: Vec<String> = class_names.clone();
    classes.sort();
    classes.dedup();
    let labels: Vec<usize> = class_names
        .iter()
        .map(|c| classes.binary_search(c).expect("class collected above"))
        .collect();

    let text = read(cites)?;
    let mut edges = Vec::new();
    let mut skipped = 0;
    for (line, f) in rows(&text) {
        expect_fields(cites, line, &f, 2)?;
        match (ids.get(f[0]), ids.get(f[1])) {
            (Some(&a), Some(&b)) => edges.push((a, b)),
            _ => skipped += 1,
        }
    }
    if skipped > 0 {
        log::warn!("{}: skipped {skipped} citation(s) to unknown papers", cites.display());
    }

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut splits = vec![None; n];
    let mut rest = Vec::new();
    for c in 0..classes.len() {
        let mut members: Vec<usize> = (0..n).filter(|&v| labels[v] == c).collect();
        members.shuffle(&mut rng);
        let k = split.train_per_class.min(members.len());
        for &v in &members[..k] {
            splits[v] = Some(Split::Train);
        }
        rest.extend_from_slice(&members[k..]);
    }
    rest.sort_unstable();
    rest.shuffle(&mut rng);
    let nv = split.val.min(rest.len());
    let nt = split.test.min(rest.len() - nv);
    for &v in &rest[..nv] {
        splits[v] = Some(Split::Val);
    }
    for &v in &rest[nv..nv + nt] {
        splits[v] = Some(Split::Test);
    }

    let width = width.unwrap_or(0);
    let (g, _) = Graph::build(
        &edges,
        false,
        NodeData {
            features: Tensor::matrix(n, width, feats.into_iter().flatten().collect())?,
            labels,
            num_classes: classes.len(),
            splits,
        },
    )?;
    write_dataset(out, &g)?;
    let mut w = create(out.join("classes.tsv"))?;
    for (k, name) in classes.iter().enumerate() {
        writeln!(w, "{k}\t{name}")?;
    }
    w.flush()?;
    Ok(ConvertReport {
        num_nodes: n,
        num_edges: g.num_edges(),
        num_classes: classes.len(),
        skipped_citations: skipped,
    })
}
