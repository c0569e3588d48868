//! Partner preference model built from the partner's own statements.
//!
//! Statements are taken at face value. A statement that would make the
//! inferred order cyclic is rejected and leaves the model untouched.

use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::model::{CategoryId, ItemCategory};
use crate::protocol::PrefStatement;

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum ModelRejection {
    #[error("CONTRADICTION: statement conflicts with earlier statements")]
    Contradiction,
    #[error("UNKNOWN_CATEGORY: {0}")]
    UnknownCategory(CategoryId),
}

/// A strict partial order over categories, stored as the stated pairs
/// `(better, worse)`.
#[derive(Debug, Clone, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct OpponentModel {
    relations: BTreeSet<(CategoryId, CategoryId)>,
    statement_count: u32,
}

impl OpponentModel {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn relations(&self) -> &BTreeSet<(CategoryId, CategoryId)> {
        &self.relations
    }

    pub fn statement_count(&self) -> u32 {
        self.statement_count
    }

    pub fn is_empty(&self) -> bool {
        self.relations.is_empty()
    }

    /// Returns the enlarged model, or the reason the statement was refused.
    pub fn ingest(
        &self,
        stmt: &PrefStatement,
        categories: &[ItemCategory],
    ) -> Result<OpponentModel, ModelRejection> {
        for c in stmt.categories() {
            if categories.get(c.0).map(|cat| cat.id) != Some(c) {
                return Err(ModelRejection::UnknownCategory(c));
            }
        }
        let others = |c: CategoryId| categories.iter().map(|cat| cat.id).filter(move |x| *x != c);
        let added: Vec<(CategoryId, CategoryId)> = match *stmt {
            PrefStatement::Best { category } => others(category).map(|x| (category, x)).collect(),
            PrefStatement::Worst { category } => others(category).map(|x| (x, category)).collect(),
            PrefStatement::Prefer { better, worse } => vec![(better, worse)],
        };
        let mut relations = self.relations.clone();
        relations.extend(added);
        if has_cycle(&relations, categories.len()) {
            return Err(ModelRejection::Contradiction);
        }
        Ok(OpponentModel {
            relations,
            statement_count: self.statement_count + 1,
        })
    }

    /// Longest-path layering. Tier 0 holds categories with nothing above
    /// them; categories never mentioned in any relation share the bottom tier.
    pub fn rank_partition(&self, categories: &[ItemCategory]) -> Vec<Vec<CategoryId>> {
        let ids: Vec<CategoryId> = categories.iter().map(|c| c.id).collect();
        let mentioned: BTreeSet<CategoryId> =
            self.relations.iter().flat_map(|(a, b)| [*a, *b]).collect();
        let mut depth: BTreeMap<CategoryId, usize> = ids.iter().map(|c| (*c, 0)).collect();
        // Longest path by relaxation; the relation is acyclic so |V| rounds suffice.
        for _ in 0..ids.len() {
            let mut changed = false;
            for (a, b) in &self.relations {
                let candidate = depth[a] + 1;
                if candidate > depth[b] {
                    depth.insert(*b, candidate);
                    changed = true;
                }
            }
            if !changed {
                break;
            }
        }
        let bottom = mentioned.iter().map(|c| depth[c]).max().unwrap_or(0);
        let mut tiers = vec![Vec::new(); bottom + 1];
        for c in ids {
            let tier = if mentioned.contains(&c) { depth[&c] } else { bottom };
            tiers[tier].push(c);
        }
        tiers.retain(|t| !t.is_empty());
        tiers
    }

    /// Borda weights: with `T` tiers, tier `i` scores `T - i`.
    pub fn estimated_values(&self, categories: &[ItemCategory]) -> BTreeMap<CategoryId, u32> {
        let tiers = self.rank_partition(categories);
        let count = tiers.len() as u32;
        tiers
            .iter()
            .enumerate()
            .flat_map(|(i, tier)| tier.iter().map(move |c| (*c, count - i as u32)))
            .collect()
    }

    /// The partner's most valued category, if the model singles one out.
    pub fn top_category(&self, categories: &[ItemCategory]) -> Option<CategoryId> {
        match self.rank_partition(categories).first() {
            Some(top) if top.len() == 1 && !self.is_empty() => Some(top[0]),
            _ => None,
        }
    }
}

fn has_cycle(relations: &BTreeSet<(CategoryId, CategoryId)>, n: usize) -> bool {
    let mut adjacency = vec![Vec::new(); n];
    let mut indegree = vec![0usize; n];
    for (a, b) in relations {
        if a == b {
            return true;
        }
        adjacency[a.0].push(b.0);
        indegree[b.0] += 1;
    }
    // Kahn: a cycle leaves some node never reaching indegree 0.
    let mut ready: Vec<usize> = (0..n).filter(|i| indegree[*i] == 0).collect();
    let mut seen = 0;
    while let Some(v) = ready.pop() {
        seen += 1;
        for &w in &adjacency[v] {
            indegree[w] -= 1;
            if indegree[w] == 0 {
                ready.push(w);
            }
        }
    }
    seen != n
}
