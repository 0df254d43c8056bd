//! Neuron selection for branch and bound.
//!
//! Candidates are first ranked by a cheap estimate built from the backward
//! coefficients of the parent bound, then the best few are re-scored by
//! bounding both children. The final score adds a bonus for agreeing with
//! the activation pattern of the most recent NLP solution.

use std::cmp::Ordering;
use std::collections::{BTreeMap, BinaryHeap};

use ndarray::Array1;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{NeuronId, VerificationInstance};
use crate::mpcc::{MpccProblem, MpccSolution};
use crate::propagate::{crown_lower_bound, BoundResult, LayerBounds, Phase, SplitSet};

/// Candidates re-scored by bounding their children.
pub const DEFAULT_FSB_CANDIDATES: usize = 3;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BranchScore {
    pub neuron: NeuronId,
    pub base: f64,
    pub alignment: f64,
    pub combined: f64,
}

/// Bounds of the two children of one split.
#[derive(Debug, Clone)]
pub struct ChildBounds {
    pub active: BoundResult,
    pub inactive: BoundResult,
}

impl ChildBounds {
    pub fn get(&self, phase: Phase) -> &BoundResult {
        match phase {
            Phase::Active => &self.active,
            Phase::Inactive => &self.inactive,
        }
    }
}

#[derive(Debug, Clone)]
pub struct BaseScores {
    /// Re-scored candidates in (layer, index) order, with the improvement
    /// of the worse child over the parent bound.
    pub scores: Vec<(NeuronId, f64)>,
    /// Estimate for every unsplit unstable neuron, in (layer, index) order.
    pub estimates: Vec<(NeuronId, f64)>,
    pub children: BTreeMap<NeuronId, ChildBounds>,
    /// Number of child bounds computed.
    pub evaluations: usize,
}

/// Unstable neurons of `bounds` not fixed by `splits`.
pub fn unsplit_unstable(bounds: &LayerBounds, splits: &SplitSet) -> Vec<NeuronId> {
    bounds.unstable().into_iter().filter(|&id| splits.get(id).is_none()).collect()
}

/// `|coefficient| * intercept of the triangle relaxation` per candidate.
pub fn babsr_estimates(bounds: &LayerBounds, splits: &SplitSet, parent: &BoundResult) -> Vec<(NeuronId, f64)> {
    unsplit_unstable(bounds, splits)
        .into_iter()
        .map(|id| {
            let (l, u) = bounds.split_interval(id, splits);
            let intercept = -l * u / (u - l);
            let coeff = parent.lambda.get(id.layer).map_or(0.0, |lam| lam[id.index]);
            (id, coeff.abs() * intercept)
        })
        .collect()
}

/// Scores the candidates of a domain. The top `k` by estimate are bounded
/// on both sides of the split; `betas` are the parent's split multipliers.
pub fn base_scores(
    inst: &VerificationInstance,
    bounds: &LayerBounds,
    splits: &SplitSet,
    parent: &BoundResult,
    betas: Option<&[Array1<f64>]>,
    k: usize,
) -> Result<BaseScores> {
    let estimates = babsr_estimates(bounds, splits, parent);
    if estimates.is_empty() {
        return Err(Error::NoUnstableNeurons);
    }
    let mut order: Vec<usize> = (0..estimates.len()).collect();
    // stable sort keeps (layer, index) order among equal estimates
    order.sort_by(|&a, &b| estimates[b].1.total_cmp(&estimates[a].1));
    let mut top: Vec<NeuronId> = order.iter().take(k.max(1)).map(|&i| estimates[i].0).collect();
    top.sort();

    let mut children = BTreeMap::new();
    let mut scores = Vec::with_capacity(top.len());
    for id in top {
        let active = crown_lower_bound(inst, bounds, &splits.with(id, Phase::Active), betas);
        let inactive = crown_lower_bound(inst, bounds, &splits.with(id, Phase::Inactive), betas);
        let gain = active.lb.min(inactive.lb) - parent.lb;
        scores.push((id, gain));
        children.insert(id, ChildBounds { active, inactive });
    }
    let evaluations = 2 * scores.len();
    Ok(BaseScores {
        scores,
        estimates,
        children,
        evaluations,
    })
}

/// Phases of an NLP solution over the root unstable neurons. A neuron
/// without a phase never counts as a match.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct NlpPattern {
    phases: BTreeMap<NeuronId, Option<Phase>>,
}

impl NlpPattern {
    pub fn new(phases: impl IntoIterator<Item = (NeuronId, Option<Phase>)>) -> Self {
        Self {
            phases: phases.into_iter().collect(),
        }
    }

    /// Every neuron decided, from a full bit pattern.
    pub fn from_bits(neurons: &[NeuronId], bits: &[bool]) -> Self {
        Self::new(neurons.iter().zip(bits).map(|(&id, &b)| (id, Some(Phase::from_bit(b)))))
    }

    /// Phases of the solution's pattern, undecided pairs included (they
    /// take the phase of the larger side).
    pub fn from_solution(problem: &MpccProblem, sol: &MpccSolution) -> Self {
        Self::from_bits(&problem.unstable, &sol.pattern)
    }

    pub fn get(&self, id: NeuronId) -> Option<Phase> {
        self.phases.get(&id).copied().flatten()
    }

    /// Number of neurons covered, decided or not.
    pub fn len(&self) -> usize {
        self.phases.len()
    }

    pub fn is_empty(&self) -> bool {
        self.phases.is_empty()
    }
}

/// Fraction of the covered neurons that are split to the pattern's phase.
pub fn alignment_fraction(splits: &SplitSet, a_nlp: &NlpPattern) -> f64 {
    if a_nlp.is_empty() {
        return 0.0;
    }
    let matches = splits.iter().filter(|&(id, ph)| a_nlp.get(id) == Some(ph)).count();
    matches as f64 / a_nlp.len() as f64
}

/// Adds `lambda` times the alignment of the child that follows the
/// pattern. For an undecided neuron both children keep the domain's
/// alignment.
pub fn pattern_aligned_scores(base: &[(NeuronId, f64)], splits: &SplitSet, a_nlp: &NlpPattern, lambda: f64) -> Vec<BranchScore> {
    assert!(lambda >= 0.0, "lambda must be nonnegative");
    base.iter()
        .map(|&(neuron, b)| {
            let alignment = match a_nlp.get(neuron) {
                Some(ph) => alignment_fraction(&splits.with(neuron, ph), a_nlp),
                None => alignment_fraction(splits, a_nlp),
            };
            BranchScore {
                neuron,
                base: b,
                alignment,
                combined: b + lambda * alignment,
            }
        })
        .collect()
}

/// Highest combined score; ties go to the lowest (layer, index).
pub fn select_branch(scores: &[BranchScore]) -> Option<BranchScore> {
    let mut best: Option<BranchScore> = None;
    for s in scores {
        let better = match &best {
            None => true,
            Some(b) => s.combined > b.combined || (s.combined == b.combined && s.neuron < b.neuron),
        };
        if better {
            best = Some(*s);
        }
    }
    best
}

struct Entry<T> {
    lower: f64,
    seq: u64,
    item: T,
}

impl<T> PartialEq for Entry<T> {
    fn eq(&self, other: &Self) -> bool {
        self.cmp(other) == Ordering::Equal
    }
}

impl<T> Eq for Entry<T> {}

impl<T> PartialOrd for Entry<T> {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

impl<T> Ord for Entry<T> {
    // reversed: the heap pops the smallest bound, then the oldest entry
    fn cmp(&self, other: &Self) -> Ordering {
        other.lower.total_cmp(&self.lower).then(other.seq.cmp(&self.seq))
    }
}

/// Live domains keyed by lower bound. Not synchronized.
pub struct DomainQueue<T> {
    heap: BinaryHeap<Entry<T>>,
    next_seq: u64,
}

impl<T> Default for DomainQueue<T> {
    fn default() -> Self {
        Self {
            heap: BinaryHeap::new(),
            next_seq: 0,
        }
    }
}

impl<T> DomainQueue<T> {
    pub fn new() -> Self {
        Self::default()
    }

    /// Inserts and returns the insertion sequence number.
    pub fn push(&mut self, lower: f64, item: T) -> u64 {
        let seq = self.next_seq;
        self.next_seq += 1;
        self.heap.push(Entry { lower, seq, item });
        seq
    }

    /// Next sequence number to be handed out.
    pub fn next_seq(&self) -> u64 {
        self.next_seq
    }

    /// Domain with the smallest lower bound, earliest first among ties.
    pub fn select_domain(&mut self) -> Option<(f64, T)> {
        self.heap.pop().map(|e| (e.lower, e.item))
    }

    pub fn min_lower(&self) -> Option<f64> {
        self.heap.peek().map(|e| e.lower)
    }

    pub fn len(&self) -> usize {
        self.heap.len()
    }

    pub fn is_empty(&self) -> bool {
        self.heap.is_empty()
    }
}
