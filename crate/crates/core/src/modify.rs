//! Reversible operator removal and replacement.

use ldprune_tensor::Tensor;
use serde::{Deserialize, Serialize};

use crate::error::{CoreError, Result};
use crate::graph::{NodeKind, OperatorGraph, OperatorNode, Param, Signature};

pub const ADAPTER_WEIGHT: &str = "channel_map.weight";

/// What happens to a modified operator.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub enum Edit {
    /// The operator (and its subtree) becomes the identity. A removed
    /// attention layer contributes nothing to its residual stream.
    Remove,
    /// The operator is replaced by a shape adapter.
    Replace(AdapterSpec),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Resample {
    None,
    /// Average pooling by this factor, applied before the channel map.
    Pool(usize),
    /// Nearest upsampling by this factor, applied after the channel map.
    Upsample(usize),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum AdapterInit {
    /// Every output channel is the mean of the input channels.
    UniformMixing,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct AdapterSpec {
    pub in_sig: Signature,
    pub out_sig: Signature,
    pub resample: Resample,
    /// Bias-free 1x1 conv (linear on vectors and tokens) when the channel
    /// count changes.
    pub channel_map: bool,
    pub init: AdapterInit,
}

impl AdapterSpec {
    pub fn param_count(&self) -> usize {
        if self.channel_map {
            self.out_sig.channels * self.in_sig.channels
        } else {
            0
        }
    }

    fn init_params(&self) -> Vec<Param> {
        if !self.channel_map {
            return Vec::new();
        }
        let (cin, cout) = (self.in_sig.channels, self.out_sig.channels);
        match self.init {
            AdapterInit::UniformMixing => vec![Param {
                name: ADAPTER_WEIGHT.into(),
                value: Tensor::full(vec![cout, cin], 1.0 / cin as f32),
            }],
        }
    }
}

/// Chooses the edit for an operator: removal when its input and output
/// signatures agree, otherwise a minimal adapter.
pub fn plan_edit(node: &OperatorNode) -> Result<Edit> {
    if node.kind() == NodeKind::Embedding {
        return Err(CoreError::modification(&node.id, "the condition table is not prunable"));
    }
    let (i, o) = (node.in_sig, node.out_sig);
    if i == o {
        return Ok(Edit::Remove);
    }
    if i.height != i.width || o.height != o.width {
        return Err(CoreError::modification(
            &node.id,
            format!("non-square signature {i} -> {o}"),
        ));
    }
    let resample = if i.height == o.height {
        Resample::None
    } else if i.height > o.height && i.height % o.height == 0 {
        Resample::Pool(i.height / o.height)
    } else if o.height > i.height && o.height % i.height == 0 {
        Resample::Upsample(o.height / i.height)
    } else {
        return Err(CoreError::modification(
            &node.id,
            format!("no integer resampling from {i} to {o}"),
        ));
    };
    Ok(Edit::Replace(AdapterSpec {
        in_sig: i,
        out_sig: o,
        resample,
        channel_map: i.channels != o.channels,
        init: AdapterInit::UniformMixing,
    }))
}

/// An applied modification; hands the original subtree back on restore.
#[derive(Debug, Clone)]
pub struct ModificationPlan {
    pub target: String,
    pub edit: Edit,
    position: usize,
    saved_state: Vec<OperatorNode>,
}

impl ModificationPlan {
    /// Number of original operators (target plus descendants) taken out.
    pub fn removed_nodes(&self) -> usize {
        self.saved_state.len()
    }
}

impl OperatorGraph {
    /// Applies the edit for `target`. At most one reversible modification can
    /// be active; it must be restored or committed before the next.
    pub fn apply(&mut self, target: &str) -> Result<ModificationPlan> {
        if let Some(active) = &self.active_plan {
            return Err(CoreError::modification(
                target,
                format!("modification of `{active}` is still active"),
            ));
        }
        let pos = self.position(target)?;
        let node = &self.nodes()[pos];
        if node.edit.is_some() {
            return Err(CoreError::modification(target, "already modified"));
        }
        let edit = plan_edit(node)?;
        let span = 1 + self.subtree_len(pos);
        let saved_state: Vec<OperatorNode> = self.nodes_mut().drain(pos..pos + span).collect();
        let orig = &saved_state[0];
        let params = match &edit {
            Edit::Remove => Vec::new(),
            Edit::Replace(a) => a.init_params(),
        };
        let replacement = OperatorNode {
            id: orig.id.clone(),
            op: orig.op.clone(),
            params,
            in_sig: orig.in_sig,
            out_sig: orig.out_sig,
            parent: orig.parent.clone(),
            children: Vec::new(),
            est_cost: 0.0,
            edit: Some(edit.clone()),
        };
        self.nodes_mut().insert(pos, replacement);
        self.reindex()?;
        self.active_plan = Some(target.to_string());
        Ok(ModificationPlan {
            target: target.to_string(),
            edit,
            position: pos,
            saved_state,
        })
    }

    /// Undoes `plan`, restoring the original operators bit for bit.
    pub fn restore(&mut self, plan: ModificationPlan) -> Result<()> {
        self.check_active(&plan)?;
        let pos = plan.position;
        self.nodes_mut().splice(pos..pos + 1, plan.saved_state);
        self.reindex()?;
        self.active_plan = None;
        Ok(())
    }

    /// Makes `plan` permanent.
    pub fn commit(&mut self, plan: ModificationPlan) -> Result<()> {
        self.check_active(&plan)?;
        self.active_plan = None;
        self.committed.push(plan.target);
        Ok(())
    }

    /// Applies and commits in one step.
    pub fn modify(&mut self, target: &str) -> Result<Edit> {
        let plan = self.apply(target)?;
        let edit = plan.edit.clone();
        self.commit(plan)?;
        Ok(edit)
    }

    fn check_active(&self, plan: &ModificationPlan) -> Result<()> {
        match &self.active_plan {
            Some(t) if *t == plan.target && self.nodes().get(plan.position).is_some_and(|n| n.id == *t) => Ok(()),
            _ => Err(CoreError::modification(
                &plan.target,
                "plan is not the active modification",
            )),
        }
    }
}
