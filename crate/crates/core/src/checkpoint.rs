//! The `LDPR` checkpoint container.
//!
//! Layout: magic `LDPR`, format version (u32 LE), description length
//! (u64 LE), JSON graph description, then every parameter as raw f32 LE in
//! node order.

use std::fs;
use std::path::Path;

use ldprune_tensor::Tensor;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{CoreError, Result};
use crate::graph::{Op, OperatorGraph, OperatorNode, Param, Signature, SkipLink, Step, UNetSpec};
use crate::modify::Edit;

pub const MAGIC: &[u8; 4] = b"LDPR";
pub const VERSION: u32 = 1;

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Lineage {
    /// Hash of the experiment config that produced the checkpoint.
    pub config_hash: Option<String>,
    /// Content hash of the model this one was derived from.
    pub parent_hash: Option<String>,
    /// `teacher`, `pruned`, `finetuned`, `scratch`.
    pub role: Option<String>,
}

#[derive(Debug, Serialize, Deserialize)]
struct ParamDesc {
    name: String,
    shape: Vec<usize>,
}

#[derive(Debug, Serialize, Deserialize)]
struct NodeDesc {
    id: String,
    op: Op,
    in_sig: Signature,
    out_sig: Signature,
    parent: Option<String>,
    children: Vec<String>,
    edit: Option<Edit>,
    params: Vec<ParamDesc>,
}

#[derive(Debug, Serialize, Deserialize)]
struct Description {
    spec: UNetSpec,
    nodes: Vec<NodeDesc>,
    program: Vec<Step>,
    time_program: Vec<String>,
    skip_links: Vec<SkipLink>,
    committed: Vec<String>,
    param_count: usize,
    lineage: Lineage,
}

/// Serializes `graph`. Fails if a reversible modification is still active.
pub fn to_bytes(graph: &OperatorGraph, lineage: &Lineage) -> Result<Vec<u8>> {
    if let Some(active) = graph.active_plan() {
        return Err(CoreError::Checkpoint(format!(
            "modification of `{active}` is still active"
        )));
    }
    let desc = Description {
        spec: graph.spec().clone(),
        nodes: graph
            .nodes()
            .iter()
            .map(|n| NodeDesc {
                id: n.id.clone(),
                op: n.op.clone(),
                in_sig: n.in_sig,
                out_sig: n.out_sig,
                parent: n.parent.clone(),
                children: n.children.clone(),
                edit: n.edit.clone(),
                params: n
                    .params
                    .iter()
                    .map(|p| ParamDesc {
                        name: p.name.clone(),
                        shape: p.value.shape().to_vec(),
                    })
                    .collect(),
            })
            .collect(),
        program: graph.program().to_vec(),
        time_program: graph.time_program().to_vec(),
        skip_links: graph.skip_links().to_vec(),
        committed: graph.committed_edits().to_vec(),
        param_count: graph.param_count(),
        lineage: lineage.clone(),
    };
    let json = serde_json::to_vec(&desc)?;
    let mut out = Vec::with_capacity(16 + json.len() + 4 * desc.param_count);
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&(json.len() as u64).to_le_bytes());
    out.extend_from_slice(&json);
    for (_, t) in graph.params() {
        for v in t.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    Ok(out)
}

/// Parses a container, returning the graph and its lineage.
pub fn from_bytes(bytes: &[u8]) -> Result<(OperatorGraph, Lineage)> {
    let err = |m: String| CoreError::Checkpoint(m);
    if bytes.len() < 16 || &bytes[..4] != MAGIC {
        return Err(err("not an LDPR container".into()));
    }
    let version = u32::from_le_bytes(bytes[4..8].try_into().expect("4 bytes"));
    if version != VERSION {
        return Err(err(format!("unsupported version {version}")));
    }
    let json_len = u64::from_le_bytes(bytes[8..16].try_into().expect("8 bytes")) as usize;
    let body = bytes
        .get(16..16 + json_len)
        .ok_or_else(|| err(format!("description of {json_len} bytes is truncated")))?;
    let desc: Description = serde_json::from_slice(body)?;
    let payload = &bytes[16 + json_len..];
    let declared: usize = desc
        .nodes
        .iter()
        .flat_map(|n| &n.params)
        .map(|p| p.shape.iter().product::<usize>())
        .sum();
    if declared != desc.param_count || payload.len() != 4 * declared {
        return Err(err(format!(
            "payload holds {} bytes for {} declared parameters",
            payload.len(),
            desc.param_count
        )));
    }
    let mut floats = payload
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")));
    let mut nodes = Vec::with_capacity(desc.nodes.len());
    for n in desc.nodes {
        let mut params = Vec::with_capacity(n.params.len());
        for p in n.params {
            let len: usize = p.shape.iter().product();
            let data: Vec<f32> = floats.by_ref().take(len).collect();
            params.push(Param {
                name: p.name,
                value: Tensor::new(p.shape, data)?,
            });
        }
        nodes.push(OperatorNode {
            id: n.id,
            op: n.op,
            params,
            in_sig: n.in_sig,
            out_sig: n.out_sig,
            parent: n.parent,
            children: n.children,
            est_cost: 0.0,
            edit: n.edit,
        });
    }
    let mut graph = OperatorGraph::from_parts(desc.spec, nodes, desc.program, desc.time_program, desc.skip_links)?;
    graph.committed = desc.committed;
    graph.infer_shapes()?;
    Ok((graph, desc.lineage))
}

pub fn save(graph: &OperatorGraph, lineage: &Lineage, path: &Path) -> Result<String> {
    let bytes = to_bytes(graph, lineage)?;
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir)?;
    }
    fs::write(path, &bytes)?;
    Ok(sha256_hex(&bytes))
}

pub fn load(path: &Path) -> Result<(OperatorGraph, Lineage)> {
    let bytes = fs::read(path).map_err(|e| CoreError::Checkpoint(format!("{}: {e}", path.display())))?;
    from_bytes(&bytes)
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

/// Hash of the model alone (no lineage), stable across save/load.
pub fn graph_hash(graph: &OperatorGraph) -> Result<String> {
    Ok(sha256_hex(&to_bytes(graph, &Lineage::default())?))
}
