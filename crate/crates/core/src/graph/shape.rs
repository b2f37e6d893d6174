use std::collections::HashMap;

use super::{Op, OperatorGraph, OperatorNode, Signature, Step};
use crate::error::{CoreError, Result};

/// Input and output signature of every reachable operator.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ShapeTrace {
    pub entries: HashMap<String, (Signature, Signature)>,
}

impl ShapeTrace {
    pub fn get(&self, id: &str) -> Option<(Signature, Signature)> {
        self.entries.get(id).copied()
    }
}

struct Walker<'a> {
    graph: &'a OperatorGraph,
    trace: ShapeTrace,
}

impl Walker<'_> {
    fn visit(&mut self, id: &str, input: Signature) -> Result<Signature> {
        let node = self.graph.node(id)?;
        if node.in_sig != input {
            return Err(CoreError::shape(
                id,
                format!("receives {input}, declared {}", node.in_sig),
            ));
        }
        let out = if node.edit.is_some() {
            node.out_sig
        } else {
            self.transfer(node, input)?
        };
        if out != node.out_sig {
            return Err(CoreError::shape(
                id,
                format!("produces {out}, declared {}", node.out_sig),
            ));
        }
        self.trace.entries.insert(id.to_string(), (input, out));
        Ok(out)
    }

    fn child(&mut self, node: &OperatorNode, suffix: &str, input: Signature) -> Result<Signature> {
        self.visit(&format!("{}.{}", node.id, suffix), input)
    }

    fn transfer(&mut self, node: &OperatorNode, i: Signature) -> Result<Signature> {
        let weight = |name: &str| {
            node.param(name)
                .map(|t| t.shape().to_vec())
                .ok_or_else(|| CoreError::shape(&node.id, format!("missing parameter `{name}`")))
        };
        Ok(match &node.op {
            Op::Conv { kernel, stride, pad } => {
                let w = weight("weight")?;
                if w.len() != 4 || w[1] != i.channels || w[2] != *kernel {
                    return Err(CoreError::shape(&node.id, format!("weight {w:?} for input {i}")));
                }
                let o = |s: usize| (s + 2 * pad - kernel) / stride + 1;
                Signature::new(w[0], o(i.height), o(i.width))
            }
            Op::Downsample { factor } => {
                let w = weight("weight")?;
                if w[1] != i.channels || i.height % factor != 0 {
                    return Err(CoreError::shape(&node.id, format!("weight {w:?} for input {i}")));
                }
                Signature::new(w[0], i.height / factor, i.width / factor)
            }
            Op::Upsample { factor } => {
                let w = weight("weight")?;
                if w[1] != i.channels {
                    return Err(CoreError::shape(&node.id, format!("weight {w:?} for input {i}")));
                }
                Signature::new(w[0], i.height * factor, i.width * factor)
            }
            Op::GroupNorm { groups, .. } => {
                if *groups == 0 || i.channels % groups != 0 || weight("gamma")? != [i.channels] {
                    return Err(CoreError::shape(&node.id, format!("{groups} groups over {i}")));
                }
                i
            }
            Op::Activation => i,
            Op::Linear => {
                let w = weight("weight")?;
                if w.len() != 2 || w[1] != i.channels {
                    return Err(CoreError::shape(&node.id, format!("weight {w:?} for input {i}")));
                }
                Signature::new(w[0], i.height, i.width)
            }
            Op::Attention { cross } => {
                let q = weight("to_q")?;
                let k = weight("to_k")?;
                let kv = if *cross { self.graph.spec.cond_dim } else { i.channels };
                if q[1] != i.channels || k[1] != kv || q[0] != k[0] {
                    return Err(CoreError::shape(&node.id, format!("projections {q:?}/{k:?} for {i}")));
                }
                Signature::new(weight("to_out")?[0], i.height, i.width)
            }
            Op::ResBlock => {
                let mut h = self.child(node, "norm1", i)?;
                h = self.child(node, "act1", h)?;
                h = self.child(node, "conv1", h)?;
                let temb = Signature::vector(self.graph.spec.time_embed_dim());
                let t = self.child(node, "temb_proj", temb)?;
                if t.channels != h.channels {
                    return Err(CoreError::shape(&node.id, format!("time projection {t} onto {h}")));
                }
                h = self.child(node, "norm2", h)?;
                h = self.child(node, "act2", h)?;
                h = self.child(node, "conv2", h)?;
                let skip = if self.graph.contains(&format!("{}.skip", node.id)) {
                    self.child(node, "skip", i)?
                } else {
                    i
                };
                if skip != h {
                    return Err(CoreError::shape(&node.id, format!("residual {skip} + {h}")));
                }
                h
            }
            Op::BasicTransformerBlock => {
                for (norm, attn) in [("norm1", "attn1"), ("norm2", "attn2"), ("norm3", "")] {
                    let n = self.child(node, norm, i)?;
                    let branch = if attn.is_empty() {
                        let f = self.child(node, "ff.0", n)?;
                        let f = self.child(node, "ff.act", f)?;
                        self.child(node, "ff.2", f)?
                    } else {
                        self.child(node, attn, n)?
                    };
                    if branch != i {
                        return Err(CoreError::shape(&node.id, format!("branch {branch} onto {i}")));
                    }
                }
                i
            }
            Op::Embedding { .. } => {
                return Err(CoreError::shape(&node.id, "condition table in the data path"));
            }
        })
    }
}

impl OperatorGraph {
    /// Propagates signatures through the program and checks them against
    /// every operator's declaration.
    pub fn infer_shapes(&self) -> Result<ShapeTrace> {
        let mut w = Walker {
            graph: self,
            trace: ShapeTrace::default(),
        };
        let mut t = Signature::vector(self.spec.base_width);
        for id in &self.time_program {
            t = w.visit(id, t)?;
        }
        if t != Signature::vector(self.spec.time_embed_dim()) {
            return Err(CoreError::shape("time_embed", format!("produces {t}")));
        }
        let s = self.spec.latent_size;
        let mut h = Signature::new(self.spec.latent_channels, s, s);
        let mut saved = HashMap::new();
        for step in &self.program {
            match step {
                Step::Node(id) => h = w.visit(id, h)?,
                Step::SaveSkip(l) => {
                    saved.insert(*l, h);
                }
                Step::ConcatSkip(l) => {
                    let e: Signature = *saved
                        .get(l)
                        .ok_or_else(|| CoreError::shape(format!("skip.{l}"), "level never saved"))?;
                    if (e.height, e.width) != (h.height, h.width) {
                        return Err(CoreError::shape(format!("skip.{l}"), format!("concat {h} with {e}")));
                    }
                    h = Signature::new(h.channels + e.channels, h.height, h.width);
                }
                Step::Tap(_) => {}
            }
        }
        if h != Signature::new(self.spec.latent_channels, s, s) {
            return Err(CoreError::shape("output", format!("produces {h}")));
        }
        Ok(w.trace)
    }
}

#[cfg(test)]
mod tests {
    use crate::graph::Signature;
    use crate::graph::{build_unet, UNetSpec};

    #[test]
    fn trace_covers_all_data_path_nodes() {
        let g = build_unet(&UNetSpec::default(), 0).unwrap();
        let trace = g.infer_shapes().unwrap();
        assert_eq!(trace.entries.len(), g.len() - 1);
        assert_eq!(
            trace.get("down.2.res.0").unwrap(),
            (Signature::new(64, 4, 4), Signature::new(128, 4, 4))
        );
    }

    #[test]
    fn corrupted_declaration_names_the_node() {
        let mut g = build_unet(&UNetSpec::tiny(), 0).unwrap();
        let pos = g.position("up.1.res.1.conv1").unwrap();
        g.nodes_mut()[pos].out_sig.channels += 1;
        let err = g.infer_shapes().unwrap_err().to_string();
        assert!(err.contains("up.1.res.1.conv1"), "{err}");
    }

    #[test]
    fn modified_graphs_still_check() {
        let mut g = build_unet(&UNetSpec::tiny(), 0).unwrap();
        for t in [
            "down.0.downsample",
            "up.0.res.0",
            "down.1.attn.0.ff.0",
            "time_embed.lin1",
            "mid.attn.0",
        ] {
            g.modify(t).unwrap();
            g.infer_shapes().unwrap();
        }
    }
}
