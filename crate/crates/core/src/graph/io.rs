//! Citation-network text format.
//!
//! Node file, one node per line: `id<TAB>f1 f2 ... fd<TAB>label`. A fully
//! tab-separated `id<TAB>f1<TAB>...<TAB>fd<TAB>label` line is accepted too.
//! Edge file: `src<TAB>dst` using node ids; edges are undirected, duplicates
//! and self-citations are ignored. Labels are mapped to dense class ids in
//! ascending order (numeric order when every label is an integer).

use std::collections::{BTreeSet, HashMap};
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use super::Graph;
use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub fn load_citation_dataset(
    node_file: impl AsRef<Path>,
    edge_file: impl AsRef<Path>,
) -> Result<Graph> {
    let node_path = node_file.as_ref();
    let edge_path = edge_file.as_ref();
    let perr = |path: &Path, line: usize, msg: String| Error::Parse {
        path: path.to_path_buf(),
        line,
        msg,
    };

    let mut ids: HashMap<String, usize> = HashMap::new();
    let mut features: Vec<f64> = Vec::new();
    let mut raw_labels: Vec<String> = Vec::new();
    let mut dim: Option<usize> = None;

    for (i, line) in BufReader::new(File::open(node_path)?).lines().enumerate() {
        let line = line?;
        let lineno = i + 1;
        if line.trim().is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split('\t').collect();
        if fields.len() < 3 {
            return Err(perr(
                node_path,
                lineno,
                "expected id, features and label".into(),
            ));
        }
        let id = fields[0].trim();
        let label = fields[fields.len() - 1].trim();
        let feats: Vec<f64> = fields[1..fields.len() - 1]
            .iter()
            .flat_map(|f| f.split_whitespace())
            .map(|v| {
                v.parse::<f64>()
                    .map_err(|_| perr(node_path, lineno, format!("bad feature value {v:?}")))
            })
            .collect::<Result<_>>()?;
        match dim {
            None => dim = Some(feats.len()),
            Some(d) if d != feats.len() => {
                return Err(perr(
                    node_path,
                    lineno,
                    format!("{} features, earlier lines had {d}", feats.len()),
                ))
            }
            Some(_) => {}
        }
        if id.is_empty() || label.is_empty() {
            return Err(perr(node_path, lineno, "empty id or label".into()));
        }
        let index = ids.len();
        if ids.insert(id.to_string(), index).is_some() {
            return Err(perr(node_path, lineno, format!("duplicate node id {id:?}")));
        }
        features.extend(feats);
        raw_labels.push(label.to_string());
    }

    let n = ids.len();
    let dim = dim.unwrap_or(0);
    let mut edges = Vec::new();
    for (i, line) in BufReader::new(File::open(edge_path)?).lines().enumerate() {
        let line = line?;
        let lineno = i + 1;
        if line.trim().is_empty() {
            continue;
        }
        let parts: Vec<&str> = line.split_whitespace().collect();
        let [src, dst] = parts[..] else {
            return Err(perr(
                edge_path,
                lineno,
                format!("expected two ids, got {line:?}"),
            ));
        };
        let lookup = |id: &str| {
            ids.get(id).copied().ok_or_else(|| {
                Error::Integrity(format!(
                    "{}:{lineno}: edge endpoint {id:?} is not a node",
                    edge_path.display()
                ))
            })
        };
        let (u, v) = (lookup(src)?, lookup(dst)?);
        if u != v {
            edges.push((u, v));
        }
    }

    let labels = dense_labels(&raw_labels);
    Graph::new(n, edges, Tensor::new(n, dim, features)?)?.with_node_labels(labels)
}

fn dense_labels(raw: &[String]) -> Vec<usize> {
    let numeric: Option<Vec<u64>> = raw.iter().map(|l| l.parse().ok()).collect();
    match numeric {
        Some(nums) => {
            let order: BTreeSet<u64> = nums.iter().copied().collect();
            let map: HashMap<u64, usize> =
                order.into_iter().enumerate().map(|(i, v)| (v, i)).collect();
            nums.iter().map(|v| map[v]).collect()
        }
        None => {
            let order: BTreeSet<&str> = raw.iter().map(String::as_str).collect();
            let map: HashMap<&str, usize> =
                order.into_iter().enumerate().map(|(i, v)| (v, i)).collect();
            raw.iter().map(|v| map[v.as_str()]).collect()
        }
    }
}

/// Writes `g` in the citation format, using node indices as ids.
pub fn write_citation_dataset(
    g: &Graph,
    node_file: impl AsRef<Path>,
    edge_file: impl AsRef<Path>,
) -> Result<()> {
    let labels = g
        .node_labels()
        .ok_or_else(|| Error::Integrity("citation format needs node labels".into()))?;
    let mut w = BufWriter::new(File::create(node_file)?);
    for (i, label) in labels.iter().enumerate() {
        write!(w, "{i}\t")?;
        for (j, v) in g.features().row(i).iter().enumerate() {
            if j > 0 {
                w.write_all(b" ")?;
            }
            write!(w, "{v}")?;
        }
        writeln!(w, "\t{label}")?;
    }
    w.flush()?;

    let mut w = BufWriter::new(File::create(edge_file)?);
    for (u, v) in g.edges() {
        writeln!(w, "{u}\t{v}")?;
    }
    w.flush()?;
    Ok(())
}
