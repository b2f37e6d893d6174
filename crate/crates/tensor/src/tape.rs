use std::cell::RefCell;
use std::collections::HashMap;

use crate::{Result, Tensor, TensorError};

/// Computes input gradients from the output gradient. The flags say which
/// inputs are tracked; entries for untracked inputs may be `None`.
pub(crate) type BackwardFn = Box<dyn Fn(&Tensor, &[bool]) -> Vec<Option<Tensor>>>;

struct Entry {
    inputs: Vec<usize>,
    backward: Option<BackwardFn>,
    name: Option<String>,
}

/// Linear record of executed ops. Backward replays it in reverse order.
pub struct Tape {
    entries: RefCell<Vec<Entry>>,
    recording: bool,
}

/// A value flowing through a computation, optionally tracked on a tape.
#[derive(Clone, Debug)]
pub struct Var {
    value: Tensor,
    node: Option<usize>,
}

impl Var {
    /// Untracked value; it never receives a gradient.
    pub fn constant(value: Tensor) -> Self {
        Self { value, node: None }
    }

    pub fn value(&self) -> &Tensor {
        &self.value
    }

    pub fn into_value(self) -> Tensor {
        self.value
    }

    pub fn shape(&self) -> &[usize] {
        self.value.shape()
    }

    pub fn is_tracked(&self) -> bool {
        self.node.is_some()
    }

    /// Same value, cut from the tape.
    pub fn detach(&self) -> Var {
        Var::constant(self.value.clone())
    }
}

impl Default for Tape {
    fn default() -> Self {
        Self::new()
    }
}

impl Tape {
    /// A recording tape.
    pub fn new() -> Self {
        Self {
            entries: RefCell::new(Vec::new()),
            recording: true,
        }
    }

    /// A tape that never records; every op returns untracked values.
    pub fn inference() -> Self {
        Self {
            entries: RefCell::new(Vec::new()),
            recording: false,
        }
    }

    pub fn is_recording(&self) -> bool {
        self.recording
    }

    pub fn len(&self) -> usize {
        self.entries.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Registers a named leaf whose gradient is reported by [`Tape::backward`].
    /// On an inference tape this is just a constant.
    pub fn param(&self, name: impl Into<String>, value: &Tensor) -> Var {
        if !self.recording {
            return Var::constant(value.clone());
        }
        let mut entries = self.entries.borrow_mut();
        entries.push(Entry {
            inputs: Vec::new(),
            backward: None,
            name: Some(name.into()),
        });
        Var {
            value: value.clone(),
            node: Some(entries.len() - 1),
        }
    }

    /// An unnamed tracked leaf (gradient available through [`Gradients::wrt`]).
    pub fn leaf(&self, value: &Tensor) -> Var {
        if !self.recording {
            return Var::constant(value.clone());
        }
        let mut entries = self.entries.borrow_mut();
        entries.push(Entry {
            inputs: Vec::new(),
            backward: None,
            name: None,
        });
        Var {
            value: value.clone(),
            node: Some(entries.len() - 1),
        }
    }

    /// Records `out` as the result of an op over `inputs`. Fails if `out`
    /// holds a non-finite value.
    pub(crate) fn record(
        &self,
        op: &'static str,
        out: Tensor,
        inputs: &[&Var],
        backward: impl Fn(&Tensor, &[bool]) -> Vec<Option<Tensor>> + 'static,
    ) -> Result<Var> {
        if !out.is_finite() {
            return Err(TensorError::NonFinite { op });
        }
        if !self.recording || inputs.iter().all(|v| v.node.is_none()) {
            return Ok(Var::constant(out));
        }
        let mut entries = self.entries.borrow_mut();
        // Untracked inputs are marked with usize::MAX and skipped in backward.
        let ids = inputs.iter().map(|v| v.node.unwrap_or(usize::MAX)).collect();
        entries.push(Entry {
            inputs: ids,
            backward: Some(Box::new(backward)),
            name: None,
        });
        Ok(Var {
            value: out,
            node: Some(entries.len() - 1),
        })
    }

    /// Reverse pass from a scalar loss.
    pub fn backward(&self, loss: &Var) -> Result<Gradients> {
        if loss.value.numel() != 1 {
            return Err(TensorError::NonScalarLoss(loss.shape().to_vec()));
        }
        let entries = self.entries.borrow();
        let mut grads: Vec<Option<Tensor>> = vec![None; entries.len()];
        let Some(root) = loss.node else {
            return Ok(Gradients::default());
        };
        grads[root] = Some(Tensor::ones(loss.shape().to_vec()));

        let mut named = HashMap::new();
        let mut leaves = HashMap::new();
        for id in (0..=root).rev() {
            let entry = &entries[id];
            let Some(backward) = &entry.backward else {
                if let Some(g) = grads[id].take() {
                    match &entry.name {
                        Some(name) => {
                            named.insert(name.clone(), g.clone());
                        }
                        None => {}
                    }
                    leaves.insert(id, g);
                }
                continue;
            };
            let Some(g_out) = grads[id].take() else {
                continue;
            };
            let needs: Vec<bool> = entry.inputs.iter().map(|&i| i != usize::MAX).collect();
            let g_in = backward(&g_out, &needs);
            for (&input, g) in entry.inputs.iter().zip(g_in) {
                if input == usize::MAX {
                    continue;
                }
                let Some(g) = g else { continue };
                accumulate(&mut grads[input], g);
            }
        }
        Ok(Gradients { named, leaves })
    }
}

fn accumulate(slot: &mut Option<Tensor>, g: Tensor) {
    match slot {
        None => *slot = Some(g),
        Some(acc) => {
            for (a, b) in acc.data_mut().iter_mut().zip(g.data()) {
                *a += b;
            }
        }
    }
}

/// Gradients of one backward pass.
#[derive(Debug, Default)]
pub struct Gradients {
    named: HashMap<String, Tensor>,
    leaves: HashMap<usize, Tensor>,
}

impl Gradients {
    /// Gradient of a named parameter, if it influenced the loss.
    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.named.get(name)
    }

    pub fn wrt(&self, var: &Var) -> Option<&Tensor> {
        var.node.and_then(|id| self.leaves.get(&id))
    }

    pub fn named(&self) -> &HashMap<String, Tensor> {
        &self.named
    }

    pub fn into_named(self) -> HashMap<String, Tensor> {
        self.named
    }
}
