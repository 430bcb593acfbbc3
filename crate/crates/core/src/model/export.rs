use std::io::Write;
use std::path::{Path, PathBuf};

use serde::Serialize;

use super::{ForwardOptions, Model};
use crate::error::{Error, Result};
use crate::tensor::{Real, Tensor};

/// One edge of an exported graph, with grid coordinates of both ends.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub struct GraphEdge {
    pub center_t: usize,
    pub center_f: usize,
    pub neighbor_t: usize,
    pub neighbor_f: usize,
    pub block: usize,
    pub k: usize,
}

impl<T: Real> Model<T> {
    fn single(&self, spec: &[T]) -> Result<Tensor<T>> {
        let cfg = self.config();
        Tensor::new(&[1, 1, cfg.input_frames, cfg.input_bins], spec.to_vec())
    }

    /// Post-softmax attention maps of every head at `block` (1-based), each
    /// `[N, N]` with rows indexing queries.
    pub fn export_attention(&self, spec: &[T], block: usize) -> Result<Vec<Tensor<T>>> {
        let opts = ForwardOptions {
            attention_block: Some(block),
            ..Default::default()
        };
        let (_, trace) = self.infer(&self.single(spec)?, &opts)?;
        let attn = trace.attention.ok_or_else(|| Error::invalid("attention was not recorded"))?;
        let n = self.config().n_nodes();
        Ok(attn
            .data()
            .chunks_exact(n * n)
            .map(|c| Tensor::new(&[n, n], c.to_vec()).expect("square chunk"))
            .collect())
    }

    /// Every edge of the graph built at `block` (1-based), grouped by
    /// center node.
    pub fn export_graph_edges(&self, spec: &[T], block: usize) -> Result<Vec<GraphEdge>> {
        let cfg = self.config();
        if block == 0 || block > cfg.blocks || !cfg.use_gnn {
            return Err(Error::invalid(format!("no graph at block {block}")));
        }
        let (_, trace) = self.infer(&self.single(spec)?, &ForwardOptions::default())?;
        let g = &trace.graphs[block - 1][0];
        let f = cfg.grid().1;
        Ok((0..g.n_nodes())
            .flat_map(|center| {
                g.neighbors_of(center).iter().map(move |&j| GraphEdge {
                    center_t: center / f,
                    center_f: center % f,
                    neighbor_t: j / f,
                    neighbor_f: j % f,
                    block,
                    k: g.k(),
                })
            })
            .collect())
    }

    /// Neighbors of `center` in the graph built at `block` (1-based).
    pub fn export_graph(&self, spec: &[T], block: usize, center: usize) -> Result<Vec<GraphEdge>> {
        let n = self.config().n_nodes();
        if center >= n {
            return Err(Error::invalid(format!("center node {center} >= {n}")));
        }
        let f = self.config().grid().1;
        let mut edges = self.export_graph_edges(spec, block)?;
        edges.retain(|e| e.center_t * f + e.center_f == center);
        Ok(edges)
    }
}

/// Writes one `head{h}.csv` per map into `dir` and returns the paths.
pub fn write_attention_csv<T: Real>(dir: impl AsRef<Path>, maps: &[Tensor<T>]) -> Result<Vec<PathBuf>> {
    let dir = dir.as_ref();
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut paths = Vec::with_capacity(maps.len());
    for (h, m) in maps.iter().enumerate() {
        let path = dir.join(format!("head{}.csv", h + 1));
        let file = std::fs::File::create(&path).map_err(|e| Error::io(&path, e))?;
        let mut w = std::io::BufWriter::new(file);
        let cols = m.shape()[1];
        for row in m.data().chunks(cols) {
            let line: Vec<String> = row.iter().map(|v| v.to_string()).collect();
            writeln!(w, "{}", line.join(",")).map_err(|e| Error::io(&path, e))?;
        }
        w.flush().map_err(|e| Error::io(&path, e))?;
        paths.push(path);
    }
    Ok(paths)
}

pub fn write_graph_csv(path: impl AsRef<Path>, edges: &[GraphEdge]) -> Result<()> {
    let path = path.as_ref();
    let file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = csv::Writer::from_writer(file);
    for e in edges {
        w.serialize(e)?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}
