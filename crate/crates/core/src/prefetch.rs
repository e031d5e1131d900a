//! Expert correlation table and hot-expert prediction.
//!
//! For every layer `j >= 1` the table counts how often a token that chose
//! expert `a` at layer `j-1` chose expert `b` at layer `j`. Layer 0 has no
//! predecessor and keeps a plain frequency vector. With `top_k > 1` every
//! `(a, b)` pair across the two selections is counted.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::ModelSpec;
use crate::workload::{expert_load, ActivationTrace, ExpertId};

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CorrelationTable {
    n_layers: usize,
    n_experts: usize,
    top_k: usize,
    marginal: Vec<u64>,
    /// `transitions[j - 1][a * n_experts + b]`.
    transitions: Vec<Vec<u64>>,
}

/// How per-token tendencies are combined into one score per expert.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Aggregation {
    /// Sum of table counts over every token's previous selections.
    #[default]
    Sum,
    /// Each token votes once for its single most likely expert.
    Vote,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Fallback {
    None,
    /// No correlation data for the observed predecessors; used the layer's
    /// own selection frequencies.
    Marginal,
    /// Table is empty for this layer; picked the lowest ids.
    Uniform,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PrefetchDecision {
    pub layer: usize,
    pub expert_ids: Vec<ExpertId>,
    pub scores: Vec<u64>,
    pub fallback: Fallback,
}

impl CorrelationTable {
    pub fn empty(n_layers: usize, n_experts: usize, top_k: usize) -> Self {
        CorrelationTable {
            n_layers,
            n_experts,
            top_k,
            marginal: vec![0; n_experts],
            transitions: vec![vec![0; n_experts * n_experts]; n_layers.saturating_sub(1)],
        }
    }

    pub fn for_model(spec: &ModelSpec) -> Self {
        Self::empty(spec.n_layers, spec.n_experts_per_layer, spec.top_k)
    }

    pub fn n_layers(&self) -> usize {
        self.n_layers
    }

    pub fn n_experts(&self) -> usize {
        self.n_experts
    }

    pub fn marginal(&self) -> &[u64] {
        &self.marginal
    }

    /// Count for `prev -> cur` into layer `layer` (`layer >= 1`).
    pub fn count(&self, layer: usize, prev: ExpertId, cur: ExpertId) -> u64 {
        self.transitions[layer - 1][prev as usize * self.n_experts + cur as usize]
    }

    pub fn row(&self, layer: usize, prev: ExpertId) -> &[u64] {
        let n = self.n_experts;
        &self.transitions[layer - 1][prev as usize * n..(prev as usize + 1) * n]
    }

    fn check_ids(&self, ids: &[ExpertId]) -> Result<()> {
        if let Some(&bad) = ids.iter().find(|&&e| e as usize >= self.n_experts) {
            return Err(Error::Validation(format!(
                "expert id {bad} >= n_experts {}",
                self.n_experts
            )));
        }
        Ok(())
    }

    /// Adds one layer pass of observations. `previous` and `actual` hold
    /// `top_k` ids per token, token-aligned; `previous` is ignored at layer 0.
    pub fn update(
        &mut self,
        layer: usize,
        previous: &[ExpertId],
        actual: &[ExpertId],
    ) -> Result<()> {
        if layer >= self.n_layers {
            return Err(Error::OutOfRange {
                what: "layer",
                index: layer,
                limit: self.n_layers,
            });
        }
        self.check_ids(actual)?;
        let k = self.top_k;
        if layer == 0 {
            for &b in actual {
                self.marginal[b as usize] += 1;
            }
            return Ok(());
        }
        self.check_ids(previous)?;
        if previous.len() != actual.len() || actual.len() % k != 0 {
            return Err(Error::Validation(format!(
                "selection lengths {} / {} not token-aligned for top_k {k}",
                previous.len(),
                actual.len()
            )));
        }
        let n = self.n_experts;
        let m = &mut self.transitions[layer - 1];
        for (prev, cur) in previous.chunks(k).zip(actual.chunks(k)) {
            for &a in prev {
                for &b in cur {
                    m[a as usize * n + b as usize] += 1;
                }
            }
        }
        Ok(())
    }

    /// Selection frequencies of layer `layer`, recovered from its column sums.
    fn layer_frequencies(&self, layer: usize) -> Vec<u64> {
        if layer == 0 {
            return self.marginal.clone();
        }
        let n = self.n_experts;
        let m = &self.transitions[layer - 1];
        (0..n).map(|b| (0..n).map(|a| m[a * n + b]).sum()).collect()
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, serde_json::to_string_pretty(&TableFile::from(self))?)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let file: TableFile = serde_json::from_str(&fs::read_to_string(path)?)?;
        file.into_table()
    }
}

pub fn build_table(trace: &ActivationTrace, spec: &ModelSpec) -> Result<CorrelationTable> {
    trace.check_against(spec)?;
    let mut table = CorrelationTable::for_model(spec);
    for step in 0..trace.n_steps() {
        table.update(0, &[], trace.group_selections(step, 0))?;
        for layer in 1..trace.n_layers() {
            table.update(
                layer,
                trace.group_selections(step, layer - 1),
                trace.group_selections(step, layer),
            )?;
        }
    }
    Ok(table)
}

/// Top-`k` experts for `layer` given every token's selections at `layer - 1`.
/// Ties break toward the smaller id.
pub fn predict_hot(
    table: &CorrelationTable,
    layer: usize,
    previous: &[ExpertId],
    k: usize,
    aggregation: Aggregation,
) -> Result<PrefetchDecision> {
    let n = table.n_experts;
    if k == 0 || k > n {
        return Err(Error::Validation(format!("K must be in 1..={n}, got {k}")));
    }
    if layer >= table.n_layers {
        return Err(Error::OutOfRange {
            what: "layer",
            index: layer,
            limit: table.n_layers,
        });
    }
    table.check_ids(previous)?;
    let mut scores = vec![0u64; n];
    let mut fallback = Fallback::None;
    if layer > 0 {
        match aggregation {
            Aggregation::Sum => {
                for &a in previous {
                    for (s, c) in scores.iter_mut().zip(table.row(layer, a)) {
                        *s += c;
                    }
                }
            }
            Aggregation::Vote => {
                for token in previous.chunks(table.top_k) {
                    let mut tendency = vec![0u64; n];
                    for &a in token {
                        for (t, c) in tendency.iter_mut().zip(table.row(layer, a)) {
                            *t += c;
                        }
                    }
                    if let Some(best) = argmax(&tendency) {
                        scores[best] += 1;
                    }
                }
            }
        }
    }
    if scores.iter().all(|&s| s == 0) {
        scores = table.layer_frequencies(layer);
        fallback = if scores.iter().all(|&s| s == 0) {
            Fallback::Uniform
        } else if layer == 0 {
            Fallback::None
        } else {
            Fallback::Marginal
        };
    }
    let mut ids: Vec<ExpertId> = (0..n as ExpertId).collect();
    ids.sort_by_key(|&e| (std::cmp::Reverse(scores[e as usize]), e));
    ids.truncate(k);
    let picked = ids.iter().map(|&e| scores[e as usize]).collect();
    Ok(PrefetchDecision {
        layer,
        expert_ids: ids,
        scores: picked,
        fallback,
    })
}

fn argmax(v: &[u64]) -> Option<usize> {
    let best = *v.iter().max()?;
    if best == 0 {
        return None;
    }
    v.iter().position(|&x| x == best)
}

/// Source of per-layer prefetch decisions while a schedule is built.
pub trait PrefetchProvider {
    fn predict(
        &mut self,
        trace: &ActivationTrace,
        step: usize,
        layer: usize,
        k: usize,
    ) -> Result<PrefetchDecision>;

    /// Called once the gate outcomes of (step, layer) are known.
    fn observe(&mut self, _trace: &ActivationTrace, _step: usize, _layer: usize) -> Result<()> {
        Ok(())
    }
}

/// Correlation-table predictor with optional online updates.
#[derive(Debug, Clone)]
pub struct TablePrefetcher {
    pub table: CorrelationTable,
    pub aggregation: Aggregation,
    pub online_update: bool,
}

impl TablePrefetcher {
    pub fn new(table: CorrelationTable) -> Self {
        TablePrefetcher {
            table,
            aggregation: Aggregation::Sum,
            online_update: true,
        }
    }
}

impl PrefetchProvider for TablePrefetcher {
    fn predict(
        &mut self,
        trace: &ActivationTrace,
        step: usize,
        layer: usize,
        k: usize,
    ) -> Result<PrefetchDecision> {
        let previous: &[ExpertId] = if layer == 0 {
            &[]
        } else {
            trace.group_selections(step, layer - 1)
        };
        predict_hot(&self.table, layer, previous, k, self.aggregation)
    }

    fn observe(&mut self, trace: &ActivationTrace, step: usize, layer: usize) -> Result<()> {
        if !self.online_update {
            return Ok(());
        }
        let previous: &[ExpertId] = if layer == 0 {
            &[]
        } else {
            trace.group_selections(step, layer - 1)
        };
        self.table
            .update(layer, previous, trace.group_selections(step, layer))
    }
}

/// Predicts the true top-K of each layer pass (perfect knowledge).
#[derive(Debug, Clone, Copy, Default)]
pub struct OraclePrefetcher;

impl PrefetchProvider for OraclePrefetcher {
    fn predict(
        &mut self,
        trace: &ActivationTrace,
        step: usize,
        layer: usize,
        k: usize,
    ) -> Result<PrefetchDecision> {
        let load = expert_load(trace, step, layer)?;
        let mut ids = load.ranked();
        ids.truncate(k);
        Ok(PrefetchDecision {
            layer,
            scores: ids.iter().map(|&e| load.counts[e as usize]).collect(),
            expert_ids: ids,
            fallback: Fallback::None,
        })
    }
}

/// Same experts for every layer pass.
#[derive(Debug, Clone)]
pub struct FixedPrefetcher(pub Vec<ExpertId>);

impl PrefetchProvider for FixedPrefetcher {
    fn predict(
        &mut self,
        _: &ActivationTrace,
        _: usize,
        layer: usize,
        k: usize,
    ) -> Result<PrefetchDecision> {
        let mut ids = self.0.clone();
        ids.truncate(k);
        Ok(PrefetchDecision {
            layer,
            scores: vec![0; ids.len()],
            expert_ids: ids,
            fallback: Fallback::None,
        })
    }
}

#[derive(Serialize, Deserialize)]
struct TableFile {
    n_layers: usize,
    n_experts: usize,
    top_k: usize,
    /// expert -> count at layer 0
    marginal: BTreeMap<u32, u64>,
    /// layer -> prev expert -> cur expert -> count (non-zero entries only)
    transitions: BTreeMap<u32, BTreeMap<u32, BTreeMap<u32, u64>>>,
}

impl From<&CorrelationTable> for TableFile {
    fn from(t: &CorrelationTable) -> Self {
        let n = t.n_experts;
        let marginal = t
            .marginal
            .iter()
            .enumerate()
            .filter(|(_, &c)| c > 0)
            .map(|(e, &c)| (e as u32, c))
            .collect();
        let mut transitions = BTreeMap::new();
        for (j, m) in t.transitions.iter().enumerate() {
            let mut rows = BTreeMap::new();
            for a in 0..n {
                let row: BTreeMap<u32, u64> = (0..n)
                    .filter(|&b| m[a * n + b] > 0)
                    .map(|b| (b as u32, m[a * n + b]))
                    .collect();
                if !row.is_empty() {
                    rows.insert(a as u32, row);
                }
            }
            transitions.insert(j as u32 + 1, rows);
        }
        TableFile {
            n_layers: t.n_layers,
            n_experts: n,
            top_k: t.top_k,
            marginal,
            transitions,
        }
    }
}

impl TableFile {
    fn into_table(self) -> Result<CorrelationTable> {
        let mut t = CorrelationTable::empty(self.n_layers, self.n_experts, self.top_k);
        let n = self.n_experts as u32;
        let bad = |m: String| Err(Error::Validation(format!("correlation table: {m}")));
        for (e, c) in self.marginal {
            if e >= n {
                return bad(format!("marginal expert {e} out of range"));
            }
            t.marginal[e as usize] = c;
        }
        for (layer, rows) in self.transitions {
            if layer == 0 || layer as usize >= self.n_layers {
                return bad(format!("layer {layer} out of range"));
            }
            for (a, row) in rows {
                for (b, c) in row {
                    if a >= n || b >= n {
                        return bad(format!("pair ({a},{b}) out of range"));
                    }
                    t.transitions[layer as usize - 1][(a * n + b) as usize] = c;
                }
            }
        }
        Ok(t)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::workload::{generate_trace, trace_from_fn, BatchGroupConfig, Skew};

    fn spec(n_layers: usize, n_experts: usize, top_k: usize) -> ModelSpec {
        ModelSpec {
            name: "toy".into(),
            n_layers,
            n_experts_per_layer: n_experts,
            top_k,
            ..ModelSpec::mixtral_8x7b()
        }
    }

    fn group(bs: usize, n: usize, prompt: usize, gen: usize) -> BatchGroupConfig {
        BatchGroupConfig {
            batch_size: bs,
            n_batches: n,
            prompt_len: prompt,
            gen_len: gen,
        }
    }

    #[test]
    fn constant_routing_table() {
        let s = spec(3, 4, 1);
        let g = group(2, 2, 3, 1);
        let t = trace_from_fn(&s, &g, |_, _, _, _| vec![0]).unwrap();
        let table = build_table(&t, &s).unwrap();
        let tokens = g.tokens_in_step(0) as u64;
        for layer in 1..3 {
            for a in 0..4 {
                for b in 0..4 {
                    let want = if a == 0 && b == 0 { tokens } else { 0 };
                    assert_eq!(table.count(layer, a, b), want);
                }
            }
        }
        assert_eq!(table.marginal(), &[tokens, 0, 0, 0]);
    }

    /// Four experts, top-1, path length one: four tokens whose previous
    /// choices were 0, 0, 1 and 3 look up their rows and the summed tendency
    /// picks the hot expert.
    #[test]
    fn four_expert_lookup() {
        let s = spec(2, 4, 1);
        let g = group(1, 1, 10, 1);
        // layer-0 -> layer-1 paths recorded during warm-up
        let paths = [
            (0, 2),
            (0, 2),
            (0, 1),
            (1, 2),
            (1, 3),
            (3, 3),
            (3, 3),
            (2, 0),
            (0, 2),
            (1, 1),
        ];
        let warm = trace_from_fn(&s, &g, |_, layer, _, tok| {
            let (a, b) = paths[tok];
            vec![if layer == 0 { a } else { b }]
        })
        .unwrap();
        let table = build_table(&warm, &s).unwrap();
        assert_eq!(table.row(1, 0), &[0, 1, 3, 0]);
        assert_eq!(table.row(1, 1), &[0, 1, 1, 1]);
        assert_eq!(table.row(1, 3), &[0, 0, 0, 2]);
        let d = predict_hot(&table, 1, &[0, 0, 1, 3], 1, Aggregation::Sum).unwrap();
        // 2: 3+3+1+0 = 7, 3: 0+0+1+2 = 3, 1: 1+1+1 = 3
        assert_eq!(d.expert_ids, vec![2]);
        assert_eq!(d.scores, vec![7]);
        let d2 = predict_hot(&table, 1, &[0, 0, 1, 3], 2, Aggregation::Sum).unwrap();
        assert_eq!(d2.expert_ids, vec![2, 1]);
    }

    #[test]
    fn row_lookup_single_prev() {
        let mut table = CorrelationTable::empty(2, 4, 1);
        for (b, c) in [(0, 5), (1, 1)] {
            for _ in 0..c {
                table.update(1, &[3], &[b]).unwrap();
            }
        }
        let d = predict_hot(&table, 1, &[3, 3, 3], 1, Aggregation::Sum).unwrap();
        assert_eq!(d.expert_ids, vec![0]);
        assert_eq!(d.fallback, Fallback::None);
    }

    #[test]
    fn ties_break_by_id() {
        let mut table = CorrelationTable::empty(2, 4, 1);
        for a in 0..4 {
            for b in 0..4 {
                table.update(1, &[a], &[b]).unwrap();
            }
        }
        let d = predict_hot(&table, 1, &[2], 2, Aggregation::Sum).unwrap();
        assert_eq!(d.expert_ids, vec![0, 1]);
    }

    #[test]
    fn empty_table_falls_back() {
        let table = CorrelationTable::empty(3, 5, 2);
        let d = predict_hot(&table, 2, &[1, 4], 2, Aggregation::Sum).unwrap();
        assert_eq!(d.expert_ids, vec![0, 1]);
        assert_eq!(d.fallback, Fallback::Uniform);
        let mut t2 = table.clone();
        t2.update(1, &[0, 1], &[3, 4]).unwrap();
        let d = predict_hot(&t2, 1, &[2, 3], 2, Aggregation::Sum).unwrap();
        assert_eq!(d.fallback, Fallback::Marginal);
        assert_eq!(d.expert_ids, vec![3, 4]);
    }

    #[test]
    fn pair_counts_sum_to_k_squared_tokens() {
        let s = spec(4, 8, 2);
        let g = group(3, 2, 4, 3);
        let t = generate_trace(&s, &g, Skew::Zipf { s: 1.2 }, 21).unwrap();
        let table = build_table(&t, &s).unwrap();
        let tokens: usize = (0..3).map(|st| g.tokens_in_step(st)).sum();
        for layer in 1..4 {
            let total: u64 = (0..8)
                .map(|a| table.row(layer, a).iter().sum::<u64>())
                .sum();
            assert_eq!(total, (4 * tokens) as u64);
        }
    }

    #[test]
    fn replayed_updates_equal_build() {
        let s = spec(5, 8, 2);
        let g = group(2, 3, 3, 2);
        let t = generate_trace(&s, &g, Skew::Markov { s: 1.0, p: 0.6 }, 2).unwrap();
        let built = build_table(&t, &s).unwrap();
        let mut replayed = CorrelationTable::for_model(&s);
        // token-by-token replay, independent of the group slicing in build_table
        for step in 0..t.n_steps() {
            for b in 0..t.n_batches() {
                for tok in 0..t.tokens_per_batch(step) {
                    replayed.update(0, &[], t.experts(step, 0, b, tok)).unwrap();
                    for layer in 1..5 {
                        replayed
                            .update(
                                layer,
                                t.experts(step, layer - 1, b, tok),
                                t.experts(step, layer, b, tok),
                            )
                            .unwrap();
                    }
                }
            }
        }
        assert_eq!(built, replayed);
    }

    #[test]
    fn updates_do_not_touch_the_file() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("table.json");
        let mut table = CorrelationTable::empty(3, 4, 1);
        table.update(1, &[0], &[2]).unwrap();
        table.save(&path).unwrap();
        let before = std::fs::read(&path).unwrap();
        let mut live = TablePrefetcher::new(CorrelationTable::load(&path).unwrap());
        live.table.update(1, &[1], &[3]).unwrap();
        live.table.update(2, &[1], &[3]).unwrap();
        assert_eq!(std::fs::read(&path).unwrap(), before);
        assert_eq!(CorrelationTable::load(&path).unwrap(), table);
        assert_eq!(live.table.count(1, 1, 3), 1);
    }

    #[test]
    fn one_update_increments_one_cell() {
        let mut table = CorrelationTable::empty(2, 4, 1);
        table.update(1, &[2], &[1]).unwrap();
        assert_eq!(table.count(1, 2, 1), 1);
        let total: u64 = (0..4).map(|a| table.row(1, a).iter().sum::<u64>()).sum();
        assert_eq!(total, 1);
    }

    #[test]
    fn file_format_is_stable() {
        let mut table = CorrelationTable::empty(2, 12, 1);
        table.update(0, &[], &[10, 2]).unwrap();
        table.update(1, &[10], &[11]).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("t.json");
        table.save(&path).unwrap();
        let text = std::fs::read_to_string(&path).unwrap();
        let expected = r#"{
  "n_layers": 2,
  "n_experts": 12,
  "top_k": 1,
  "marginal": {
    "2": 1,
    "10": 1
  },
  "transitions": {
    "1": {
      "10": {
        "11": 1
      }
    }
  }
}"#;
        assert_eq!(text, expected);
        assert_eq!(CorrelationTable::load(&path).unwrap(), table);
    }

    #[test]
    fn markov_sticky_prediction_matches_replay() {
        // table from the same trace: the predicted set is the true hot set
        let s = spec(6, 8, 2);
        let g = group(4, 4, 2, 3);
        let t = generate_trace(&s, &g, Skew::Markov { s: 1.5, p: 1.0 }, 8).unwrap();
        let table = build_table(&t, &s).unwrap();
        for step in 0..3 {
            for layer in 1..6 {
                let d = predict_hot(
                    &table,
                    layer,
                    t.group_selections(step, layer - 1),
                    2,
                    Aggregation::Sum,
                )
                .unwrap();
                let load = expert_load(&t, step, layer).unwrap();
                for e in &d.expert_ids {
                    assert!(
                        load.counts[*e as usize] > 0,
                        "step {step} layer {layer}: {d:?} {load:?}"
                    );
                }
            }
        }
    }

    #[test]
    fn vote_aggregation_runs() {
        let mut table = CorrelationTable::empty(2, 4, 1);
        table.update(1, &[0, 0, 1], &[1, 1, 2]).unwrap();
        let d = predict_hot(&table, 1, &[0, 1, 1], 1, Aggregation::Vote).unwrap();
        assert_eq!(d.expert_ids, vec![2]);
    }

    mod props {
        use super::*;
        use proptest::prelude::*;

        proptest! {
            #[test]
            fn always_k_distinct(counts in prop::collection::vec(0u64..5, 36), prev in prop::collection::vec(0u16..6, 0..20), k in 1usize..=6) {
                let mut table = CorrelationTable::empty(2, 6, 1);
                table.transitions[0] = counts;
                let d = predict_hot(&table, 1, &prev, k, Aggregation::Sum).unwrap();
                prop_assert_eq!(d.expert_ids.len(), k);
                let mut ids = d.expert_ids.clone();
                ids.sort();
                ids.dedup();
                prop_assert_eq!(ids.len(), k);
                prop_assert!(d.scores.windows(2).all(|w| w[0] >= w[1]));
                let again = predict_hot(&table, 1, &prev, k, Aggregation::Sum).unwrap();
                prop_assert_eq!(again, d);
            }
        }
    }
}
