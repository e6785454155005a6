//! Majority-vote fusion of per-point semantics with class-agnostic instances.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::cluster::ClusterAssignment;
use crate::error::{Error, Result};
use crate::scene::{SceneLabels, SemanticScheme};

/// Per-point semantic class and instance id; id 0 means no instance.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct PanopticPrediction {
    pub semantic: Vec<u16>,
    pub instance: Vec<u32>,
}

impl PanopticPrediction {
    pub fn new(semantic: Vec<u16>, instance: Vec<u32>) -> Result<Self> {
        if semantic.len() != instance.len() {
            return Err(Error::shape(format!(
                "{} semantic labels but {} instance ids",
                semantic.len(),
                instance.len()
            )));
        }
        Ok(Self { semantic, instance })
    }

    /// Semantics for every point plus instance ids for the subset `indices`
    /// (row-aligned with `assignment`); all other points get id 0.
    pub fn from_assignment(semantic: Vec<u16>, indices: &[usize], assignment: &ClusterAssignment) -> Result<Self> {
        if indices.len() != assignment.len() {
            return Err(Error::shape(format!(
                "{} clustered points but {} assignments",
                indices.len(),
                assignment.len()
            )));
        }
        let mut instance = vec![0u32; semantic.len()];
        for (&i, &id) in indices.iter().zip(assignment.ids()) {
            *instance
                .get_mut(i)
                .ok_or_else(|| Error::shape(format!("point index {i} out of range")))? = id;
        }
        Self::new(semantic, instance)
    }

    /// Ground truth read as a prediction.
    pub fn from_labels(labels: &SceneLabels) -> Self {
        Self {
            semantic: labels.semantic.clone(),
            instance: labels.instance.iter().map(|&i| i as u32).collect(),
        }
    }

    /// Label-file form; instance ids must fit in 16 bits.
    pub fn to_labels(&self) -> Result<SceneLabels> {
        let instance = self
            .instance
            .iter()
            .map(|&i| u16::try_from(i).map_err(|_| Error::invalid(format!("instance id {i} exceeds 16 bits"))))
            .collect::<Result<_>>()?;
        SceneLabels::new(self.semantic.clone(), instance)
    }

    pub fn len(&self) -> usize {
        self.semantic.len()
    }

    pub fn is_empty(&self) -> bool {
        self.semantic.is_empty()
    }
}

/// Every instance takes the most frequent semantic class among its points,
/// ties going to the smallest class id. An instance whose winning class is
/// not a things class is dissolved: its ids become 0 and its semantics are
/// left as predicted. Points without an instance are untouched.
pub fn consensus_fusion(semantic: &[u16], instance: &[u32], scheme: &SemanticScheme) -> Result<PanopticPrediction> {
    if semantic.len() != instance.len() {
        return Err(Error::shape(format!(
            "{} semantic labels but {} instance ids",
            semantic.len(),
            instance.len()
        )));
    }
    let mut votes: BTreeMap<u32, BTreeMap<u16, usize>> = BTreeMap::new();
    for (&s, &id) in semantic.iter().zip(instance) {
        if id != 0 {
            *votes.entry(id).or_default().entry(s).or_default() += 1;
        }
    }
    // Iterating classes in ascending order with a strict `>` keeps the smallest id on ties.
    let winner: BTreeMap<u32, Option<u16>> = votes
        .into_iter()
        .map(|(id, hist)| {
            let mut best = (0u16, 0usize);
            for (c, n) in hist {
                if n > best.1 {
                    best = (c, n);
                }
            }
            (id, scheme.is_thing(best.0).then_some(best.0))
        })
        .collect();

    let mut out = PanopticPrediction {
        semantic: semantic.to_vec(),
        instance: instance.to_vec(),
    };
    for (s, id) in out.semantic.iter_mut().zip(out.instance.iter_mut()) {
        if *id == 0 {
            continue;
        }
        match winner[id] {
            Some(c) => *s = c,
            None => *id = 0,
        }
    }
    Ok(out)
}
