//! Line-delimited JSON persistence: one graph record per line.
//!
//! ```text
//! {"id":"g0","n":3,"edges":[[0,1],[1,2]],"x":[[0.5],[1.0],[-2.0]],"y":1}
//! ```

use std::fs;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{Dataset, Graph};
use crate::autodiff::Tensor;
use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GraphRecord {
    pub id: String,
    pub n: usize,
    pub edges: Vec<[usize; 2]>,
    pub x: Vec<Vec<f64>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub y: Option<usize>,
    /// Watermark pair index (key files only).
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub pair: Option<usize>,
    /// `"a"` or `"b"` within a watermark pair (key files only).
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub role: Option<String>,
}

impl GraphRecord {
    pub fn from_graph(g: &Graph) -> Self {
        Self {
            id: g.id().to_string(),
            n: g.num_nodes(),
            edges: g.edges().iter().map(|&(u, v)| [u, v]).collect(),
            x: (0..g.num_nodes()).map(|r| g.features().row(r).to_vec()).collect(),
            y: g.label(),
            pair: None,
            role: None,
        }
    }

    /// Converts back to a graph; `dim` is used for node-less graphs.
    pub fn to_graph(&self, dim: usize) -> Result<Graph> {
        if self.x.len() != self.n {
            return Err(Error::InvalidArgument(format!(
                "record `{}`: n = {} but {} feature rows",
                self.id,
                self.n,
                self.x.len()
            )));
        }
        let d = self.x.first().map_or(dim, Vec::len);
        let feats = Tensor::from_rows(&self.x)
            .and_then(|t| Tensor::matrix(self.n, d, t.into_values()))?;
        Graph::new(
            self.id.clone(),
            self.n,
            self.edges.iter().map(|e| (e[0], e[1])),
            feats,
            self.y,
        )
    }
}

pub fn write_graph_record(w: &mut impl Write, rec: &GraphRecord) -> Result<()> {
    serde_json::to_writer(&mut *w, rec).map_err(std::io::Error::from)?;
    w.write_all(b"\n")?;
    Ok(())
}

pub fn parse_graph_record(line: &str, line_no: usize) -> Result<GraphRecord> {
    serde_json::from_str(line).map_err(|e| Error::Parse {
        line: line_no,
        msg: e.to_string(),
    })
}

pub fn save_dataset(dataset: &Dataset, path: impl AsRef<Path>) -> Result<()> {
    let mut w = BufWriter::new(fs::File::create(path)?);
    for g in dataset.graphs() {
        write_graph_record(&mut w, &GraphRecord::from_graph(g))?;
    }
    w.flush()?;
    Ok(())
}

pub fn load_dataset(path: impl AsRef<Path>) -> Result<Dataset> {
    let reader = BufReader::new(fs::File::open(path)?);
    let mut records = Vec::new();
    for (i, line) in reader.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        records.push((i + 1, parse_graph_record(&line, i + 1)?));
    }
    if records.is_empty() {
        return Err(Error::Parse {
            line: 0,
            msg: "no graph records".into(),
        });
    }
    let dim = records
        .iter()
        .find_map(|(_, r)| r.x.first().map(Vec::len))
        .unwrap_or(0);
    let graphs = records
        .iter()
        .map(|(line, r)| {
            r.to_graph(dim).map_err(|e| Error::Parse {
                line: *line,
                msg: e.to_string(),
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Dataset::from_graphs(graphs)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::graphs::{sample_er_graph, FeatureMoments};
    use crate::rng::rng_from;
    use proptest::prelude::*;

    fn triangle() -> Graph {
        Graph::new(
            "tri",
            3,
            [(0, 1), (1, 2), (0, 2)],
            Tensor::from_rows(&[vec![0.1, -2.5], vec![1e-300, 3.0], vec![0.3333333333333333, 7.0]])
                .unwrap(),
            Some(1),
        )
        .unwrap()
    }

    #[test]
    fn empty_file_is_error() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("empty.jsonl");
        fs::write(&p, "").unwrap();
        assert!(load_dataset(&p).is_err());
    }

    #[test]
    fn malformed_line_reports_line_number() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("bad.jsonl");
        let good = serde_json::to_string(&GraphRecord::from_graph(&triangle())).unwrap();
        fs::write(&p, format!("{good}\n{{\"id\": 3}}\n")).unwrap();
        match load_dataset(&p) {
            Err(Error::Parse { line, .. }) => assert_eq!(line, 2),
            other => panic!("expected parse error, got {other:?}"),
        }
        fs::write(&p, format!("{good}\n{}\n", good.replace("[0,1]", "[0,9]"))).unwrap();
        assert!(matches!(load_dataset(&p), Err(Error::Parse { line: 2, .. })));
    }

    #[test]
    fn triangle_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("tri.jsonl");
        let ds = Dataset::from_graphs(vec![triangle()]).unwrap();
        save_dataset(&ds, &p).unwrap();
        assert_eq!(load_dataset(&p).unwrap(), ds);
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(8))]
        #[test]
        fn random_datasets_round_trip(seed in any::<u64>()) {
            let mut rng = rng_from(seed);
            let m = FeatureMoments { mu: vec![0.0, 1.0, -3.0], sigma: vec![1.0, 1e-3, 1e3] };
            let graphs: Vec<Graph> = (0..100)
                .map(|i| {
                    let n = 1 + (i % 13);
                    sample_er_graph(format!("g{i}"), n, 0.3, &m, &mut rng)
                        .unwrap()
                        .with_label(Some(i % 3))
                })
                .collect();
            let ds = Dataset::from_graphs(graphs).unwrap();
            let dir = tempfile::tempdir().unwrap();
            let p = dir.path().join("ds.jsonl");
            save_dataset(&ds, &p).unwrap();
            let back = load_dataset(&p).unwrap();
            prop_assert_eq!(back, ds);
        }
    }
}
