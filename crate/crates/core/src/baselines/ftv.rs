//! Fixed task vectors: last-token states of one demonstration prompt, reused
//! unchanged for every query of the task.

use std::collections::BTreeSet;

use crate::error::Result;
use crate::tensor::Tensor;
use crate::transformer::{extract_task_vector, InjectionHook, PositionPolicy, TransformerModel};

pub const NAMESPACE: &str = "ftv";

#[derive(Debug, Clone, PartialEq)]
pub struct FixedTaskVector {
    pub family: String,
    /// `L × d` extracted states.
    pub vectors: Tensor,
    /// The demonstration prompt the vectors came from.
    pub demonstration: Vec<usize>,
    pub lambda: f64,
}

impl FixedTaskVector {
    pub fn hook(&self, layers: BTreeSet<usize>, policy: PositionPolicy) -> InjectionHook {
        InjectionHook {
            policy,
            ..InjectionHook::from_matrix(self.lambda, &self.vectors, layers)
        }
    }

    pub fn tensor_name(&self) -> String {
        format!("{NAMESPACE}.{}", self.family)
    }
}

pub fn build_fixed_task_vector(
    model: &TransformerModel,
    family: &str,
    demonstration: &[usize],
    lambda: f64,
) -> Result<FixedTaskVector> {
    let rows = extract_task_vector(model, demonstration)?;
    Ok(FixedTaskVector {
        family: family.to_string(),
        vectors: Tensor::from_rows(&rows)?,
        demonstration: demonstration.to_vec(),
        lambda,
    })
}
