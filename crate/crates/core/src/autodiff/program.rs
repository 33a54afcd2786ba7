//! Static op-DAGs with named nodes, evaluated by replaying them onto a tape.

use std::collections::{BTreeMap, HashMap, VecDeque};

use serde::{Deserialize, Serialize};

use super::tape::{Tape, Var};
use super::{AutodiffError, Tensor};

/// One named node of a [`Program`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ProgramNode {
    pub name: String,
    pub op: String,
    #[serde(default)]
    pub inputs: Vec<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub axis: Option<usize>,
    /// Scale factor for `scale`, floor for `log`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub factor: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub indices: Option<Vec<usize>>,
}

/// A graph of named primitive applications. Nodes may be listed in any
/// order; evaluation follows a topological sort.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct Program {
    pub nodes: Vec<ProgramNode>,
}

impl Program {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn input(mut self, name: &str) -> Self {
        self.nodes.push(ProgramNode {
            name: name.into(),
            op: "input".into(),
            inputs: vec![],
            axis: None,
            factor: None,
            indices: None,
        });
        self
    }

    pub fn node(mut self, name: &str, op: &str, inputs: &[&str]) -> Self {
        self.nodes.push(ProgramNode {
            name: name.into(),
            op: op.into(),
            inputs: inputs.iter().map(|s| s.to_string()).collect(),
            axis: None,
            factor: None,
            indices: None,
        });
        self
    }

    /// Sets the axis of the most recently added node.
    pub fn with_axis(mut self, axis: usize) -> Self {
        if let Some(n) = self.nodes.last_mut() {
            n.axis = Some(axis);
        }
        self
    }

    pub fn with_factor(mut self, factor: f64) -> Self {
        if let Some(n) = self.nodes.last_mut() {
            n.factor = Some(factor);
        }
        self
    }

    pub fn with_indices(mut self, indices: &[usize]) -> Self {
        if let Some(n) = self.nodes.last_mut() {
            n.indices = Some(indices.to_vec());
        }
        self
    }

    fn topo_order(&self) -> Result<Vec<usize>, AutodiffError> {
        let mut by_name = HashMap::new();
        for (i, n) in self.nodes.iter().enumerate() {
            if by_name.insert(n.name.as_str(), i).is_some() {
                return Err(AutodiffError::InvalidArgument {
                    detail: format!("duplicate node name `{}`", n.name),
                });
            }
        }
        let mut indegree = vec![0usize; self.nodes.len()];
        let mut users: Vec<Vec<usize>> = vec![Vec::new(); self.nodes.len()];
        for (i, n) in self.nodes.iter().enumerate() {
            for inp in &n.inputs {
                let &src = by_name.get(inp.as_str()).ok_or_else(|| AutodiffError::UnboundInput {
                    name: format!("{inp} (referenced by {})", n.name),
                })?;
                indegree[i] += 1;
                users[src].push(i);
            }
        }
        let mut ready: VecDeque<usize> = (0..self.nodes.len()).filter(|&i| indegree[i] == 0).collect();
        let mut order = Vec::with_capacity(self.nodes.len());
        while let Some(i) = ready.pop_front() {
            order.push(i);
            for &u in &users[i] {
                indegree[u] -= 1;
                if indegree[u] == 0 {
                    ready.push_back(u);
                }
            }
        }
        if order.len() != self.nodes.len() {
            let stuck = (0..self.nodes.len()).find(|&i| indegree[i] > 0).unwrap();
            return Err(AutodiffError::Cycle {
                node: self.nodes[stuck].name.clone(),
            });
        }
        Ok(order)
    }

    /// Builds the program on `tape`, returning the var bound to each node.
    pub fn build(
        &self,
        tape: &mut Tape,
        inputs: &BTreeMap<String, Tensor>,
        trainable: bool,
    ) -> Result<BTreeMap<String, Var>, AutodiffError> {
        let order = self.topo_order()?;
        let mut vars: BTreeMap<String, Var> = BTreeMap::new();
        for i in order {
            let node = &self.nodes[i];
            let args: Vec<Var> = node.inputs.iter().map(|n| vars[n]).collect();
            let var = apply(tape, node, &args, inputs, trainable).map_err(|e| match e {
                AutodiffError::ShapeMismatch { detail, .. } => AutodiffError::ShapeMismatch {
                    node: node.name.clone(),
                    detail,
                },
                other => other,
            })?;
            tape.label(var, node.name.clone());
            vars.insert(node.name.clone(), var);
        }
        Ok(vars)
    }
}

fn arity(node: &ProgramNode, args: &[Var], n: usize) -> Result<(), AutodiffError> {
    if args.len() != n {
        return Err(AutodiffError::InvalidArgument {
            detail: format!("node `{}` ({}) takes {n} inputs, got {}", node.name, node.op, args.len()),
        });
    }
    Ok(())
}

fn required<T: Copy>(node: &ProgramNode, v: Option<T>, what: &str) -> Result<T, AutodiffError> {
    v.ok_or_else(|| AutodiffError::InvalidArgument {
        detail: format!("node `{}` ({}) needs `{what}`", node.name, node.op),
    })
}

fn apply(
    tape: &mut Tape,
    node: &ProgramNode,
    args: &[Var],
    inputs: &BTreeMap<String, Tensor>,
    trainable: bool,
) -> Result<Var, AutodiffError> {
    let unary = ["scale", "relu", "sigmoid", "exp", "log", "softmax", "layer_norm", "mean", "sum", "gather", "max_pool", "stop_gradient"];
    let binary = ["matmul", "matmul_nt", "add", "sub", "mul", "sq_dist", "cosine"];
    if unary.contains(&node.op.as_str()) {
        arity(node, args, 1)?;
    } else if binary.contains(&node.op.as_str()) {
        arity(node, args, 2)?;
    }
    Ok(match node.op.as_str() {
        "input" => {
            arity(node, args, 0)?;
            let t = inputs.get(&node.name).ok_or_else(|| AutodiffError::UnboundInput {
                name: node.name.clone(),
            })?;
            if !t.is_finite() {
                return Err(AutodiffError::NonFinite { node: node.name.clone() });
            }
            if trainable {
                tape.param(t.clone())
            } else {
                tape.constant(t.clone())
            }
        }
        "matmul" => tape.matmul(args[0], args[1])?,
        "matmul_nt" => tape.matmul_nt(args[0], args[1])?,
        "add" => tape.add(args[0], args[1])?,
        "sub" => tape.sub(args[0], args[1])?,
        "mul" => tape.mul(args[0], args[1])?,
        "scale" => tape.scale(args[0], required(node, node.factor, "factor")?),
        "relu" => tape.relu(args[0]),
        "sigmoid" => tape.sigmoid(args[0]),
        "exp" => tape.exp(args[0]),
        "log" => tape.log_floor(args[0], node.factor.unwrap_or(0.0)),
        "softmax" => tape.softmax(args[0], required(node, node.axis, "axis")?)?,
        "layer_norm" => tape.layer_norm(args[0])?,
        "mean" => match node.axis {
            Some(a) => tape.mean_axis(args[0], a)?,
            None => tape.mean(args[0]),
        },
        "sum" => match node.axis {
            Some(a) => tape.sum_axis(args[0], a)?,
            None => tape.sum(args[0]),
        },
        "sq_dist" => tape.sq_dist(args[0], args[1])?,
        "cosine" => tape.cosine(args[0], args[1])?,
        "concat" => tape.concat(args, required(node, node.axis, "axis")?)?,
        "gather" => {
            let idx = node.indices.as_deref().ok_or_else(|| AutodiffError::InvalidArgument {
                detail: format!("node `{}` (gather) needs `indices`", node.name),
            })?;
            tape.gather(args[0], idx)?
        }
        "max_pool" => tape.max_pool(args[0], required(node, node.axis, "axis")?)?,
        "stop_gradient" => tape.stop_gradient(args[0])?,
        other => {
            return Err(AutodiffError::UnknownPrimitive {
                node: node.name.clone(),
                op: other.to_string(),
            })
        }
    })
}

/// Evaluates every node of `program`; returns each node's value by name.
pub fn forward_eval(
    program: &Program,
    inputs: &BTreeMap<String, Tensor>,
) -> Result<BTreeMap<String, Tensor>, AutodiffError> {
    let mut tape = Tape::new();
    let vars = program.build(&mut tape, inputs, false)?;
    Ok(vars
        .into_iter()
        .map(|(name, v)| (name, tape.value(v).clone()))
        .collect())
}

/// Gradients of the scalar node `loss` with respect to every input node.
pub fn backward_eval(
    program: &Program,
    inputs: &BTreeMap<String, Tensor>,
    loss: &str,
) -> Result<BTreeMap<String, Tensor>, AutodiffError> {
    let mut tape = Tape::new();
    let vars = program.build(&mut tape, inputs, true)?;
    let &loss_var = vars.get(loss).ok_or_else(|| AutodiffError::UnboundInput { name: loss.into() })?;
    let grads = tape.backward(loss_var)?;
    Ok(program
        .nodes
        .iter()
        .filter(|n| n.op == "input")
        .map(|n| (n.name.clone(), grads.get_or_zeros(vars[&n.name])))
        .collect())
}
