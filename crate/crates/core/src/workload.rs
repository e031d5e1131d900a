//! Expert-activation traces: synthetic generation, JSON-lines I/O and
//! per-layer expert load queries.

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::ModelSpec;

pub type ExpertId = u16;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct BatchGroupConfig {
    pub batch_size: usize,
    /// Batches processed together per layer (the batch-group size `n`).
    pub n_batches: usize,
    pub prompt_len: usize,
    pub gen_len: usize,
}

impl BatchGroupConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 || self.n_batches == 0 || self.prompt_len == 0 || self.gen_len == 0
        {
            return Err(Error::Validation(format!(
                "batch group fields must all be >= 1: {self:?}"
            )));
        }
        Ok(())
    }

    /// Step 0 is prefill over the prompt, later steps decode one token.
    pub fn tokens_per_batch(&self, step: usize) -> usize {
        if step == 0 {
            self.batch_size * self.prompt_len
        } else {
            self.batch_size
        }
    }

    pub fn tokens_in_step(&self, step: usize) -> usize {
        self.tokens_per_batch(step) * self.n_batches
    }

    pub fn n_steps(&self) -> usize {
        self.gen_len
    }

    pub fn generated_tokens(&self) -> u64 {
        (self.batch_size * self.n_batches * self.gen_len) as u64
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind")]
pub enum Skew {
    Uniform,
    Zipf {
        s: f64,
    },
    /// Zipf marginals; each selection slot keeps the previous layer's expert
    /// with probability `p`.
    Markov {
        s: f64,
        p: f64,
    },
}

impl Skew {
    pub fn validate(&self) -> Result<()> {
        match *self {
            Skew::Uniform => Ok(()),
            Skew::Zipf { s } if s >= 0.0 && s.is_finite() => Ok(()),
            Skew::Markov { s, p } if s >= 0.0 && s.is_finite() && (0.0..=1.0).contains(&p) => {
                Ok(())
            }
            other => Err(Error::Config(format!("invalid skew parameters {other:?}"))),
        }
    }

    fn exponent(&self) -> f64 {
        match *self {
            Skew::Uniform => 0.0,
            Skew::Zipf { s } | Skew::Markov { s, .. } => s,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TraceMeta {
    pub seed: u64,
    /// Seeds the per-layer expert popularity; traces sharing it behave like
    /// one model serving different requests.
    #[serde(default)]
    pub routing_seed: u64,
    pub skew: Skew,
    pub n_experts: usize,
    pub top_k: usize,
    pub n_layers: usize,
    pub group: BatchGroupConfig,
}

/// Gate outcomes for every (step, layer, batch, token), `top_k` ids each.
#[derive(Debug, Clone, PartialEq)]
pub struct ActivationTrace {
    pub meta: TraceMeta,
    step_offsets: Vec<usize>,
    data: Vec<ExpertId>,
}

impl ActivationTrace {
    fn layout(meta: &TraceMeta) -> (Vec<usize>, usize) {
        let g = &meta.group;
        let mut offsets = Vec::with_capacity(g.n_steps() + 1);
        let mut total = 0;
        for step in 0..g.n_steps() {
            offsets.push(total);
            total += meta.n_layers * g.n_batches * g.tokens_per_batch(step) * meta.top_k;
        }
        offsets.push(total);
        (offsets, total)
    }

    fn empty(meta: TraceMeta) -> Self {
        let (step_offsets, total) = Self::layout(&meta);
        ActivationTrace {
            meta,
            step_offsets,
            data: vec![0; total],
        }
    }

    pub fn n_steps(&self) -> usize {
        self.meta.group.n_steps()
    }

    pub fn n_layers(&self) -> usize {
        self.meta.n_layers
    }

    pub fn n_batches(&self) -> usize {
        self.meta.group.n_batches
    }

    pub fn top_k(&self) -> usize {
        self.meta.top_k
    }

    pub fn n_experts(&self) -> usize {
        self.meta.n_experts
    }

    pub fn tokens_per_batch(&self, step: usize) -> usize {
        self.meta.group.tokens_per_batch(step)
    }

    fn offset(&self, step: usize, layer: usize, batch: usize, token: usize) -> usize {
        let tpb = self.tokens_per_batch(step);
        let k = self.meta.top_k;
        self.step_offsets[step] + ((layer * self.n_batches() + batch) * tpb + token) * k
    }

    pub fn experts(&self, step: usize, layer: usize, batch: usize, token: usize) -> &[ExpertId] {
        let o = self.offset(step, layer, batch, token);
        &self.data[o..o + self.meta.top_k]
    }

    fn experts_mut(
        &mut self,
        step: usize,
        layer: usize,
        batch: usize,
        token: usize,
    ) -> &mut [ExpertId] {
        let o = self.offset(step, layer, batch, token);
        let k = self.meta.top_k;
        &mut self.data[o..o + k]
    }

    /// Selections of every token of `batch`, flattened `top_k` at a time.
    pub fn batch_selections(&self, step: usize, layer: usize, batch: usize) -> &[ExpertId] {
        let o = self.offset(step, layer, batch, 0);
        &self.data[o..o + self.tokens_per_batch(step) * self.meta.top_k]
    }

    /// Selections of all tokens of the batch group at (step, layer).
    pub fn group_selections(&self, step: usize, layer: usize) -> &[ExpertId] {
        let o = self.offset(step, layer, 0, 0);
        &self.data[o..o + self.meta.group.tokens_in_step(step) * self.meta.top_k]
    }

    fn check_range(&self, step: usize, layer: usize) -> Result<()> {
        if step >= self.n_steps() {
            return Err(Error::OutOfRange {
                what: "step",
                index: step,
                limit: self.n_steps(),
            });
        }
        if layer >= self.n_layers() {
            return Err(Error::OutOfRange {
                what: "layer",
                index: layer,
                limit: self.n_layers(),
            });
        }
        Ok(())
    }

    /// Experts demanded by one batch with their token counts, in order of
    /// first demand.
    pub fn batch_demand(&self, step: usize, layer: usize, batch: usize) -> Vec<(ExpertId, u64)> {
        let mut counts = vec![0u64; self.n_experts()];
        let mut order = Vec::new();
        for &e in self.batch_selections(step, layer, batch) {
            if counts[e as usize] == 0 {
                order.push(e);
            }
            counts[e as usize] += 1;
        }
        order.into_iter().map(|e| (e, counts[e as usize])).collect()
    }

    pub fn check_against(&self, spec: &ModelSpec) -> Result<()> {
        if spec.n_layers != self.n_layers()
            || spec.n_experts_per_layer != self.n_experts()
            || spec.top_k != self.top_k()
        {
            return Err(Error::Validation(format!(
                "trace dims (layers {}, experts {}, top_k {}) do not match model {}",
                self.n_layers(),
                self.n_experts(),
                self.top_k(),
                spec.name
            )));
        }
        Ok(())
    }
}

/// Per-expert token counts for one (step, layer) across the batch group.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ExpertLoad {
    pub counts: Vec<u64>,
}

impl ExpertLoad {
    pub fn total(&self) -> u64 {
        self.counts.iter().sum()
    }

    pub fn active(&self) -> impl Iterator<Item = ExpertId> + '_ {
        self.counts
            .iter()
            .enumerate()
            .filter(|(_, &c)| c > 0)
            .map(|(e, _)| e as ExpertId)
    }

    pub fn distinct_active(&self) -> usize {
        self.active().count()
    }

    /// Experts by descending count, ties by ascending id.
    pub fn ranked(&self) -> Vec<ExpertId> {
        let mut ids: Vec<ExpertId> = (0..self.counts.len() as ExpertId).collect();
        ids.sort_by_key(|&e| (std::cmp::Reverse(self.counts[e as usize]), e));
        ids
    }
}

pub fn expert_load(trace: &ActivationTrace, step: usize, layer: usize) -> Result<ExpertLoad> {
    trace.check_range(step, layer)?;
    let mut counts = vec![0u64; trace.n_experts()];
    for &e in trace.group_selections(step, layer) {
        counts[e as usize] += 1;
    }
    Ok(ExpertLoad { counts })
}

/// Draws `k` distinct indices, each proportional to `weights` among those not
/// yet taken. `keep` supplies a preferred id per slot (Markov stickiness).
fn draw_distinct(
    rng: &mut ChaCha8Rng,
    weights: &[f64],
    k: usize,
    keep: Option<(&[ExpertId], f64)>,
    out: &mut [ExpertId],
) {
    let mut taken = vec![false; weights.len()];
    for slot in 0..k {
        if let Some((prev, p)) = keep {
            let candidate = prev[slot];
            // always consume the coin so the stream does not depend on outcomes
            let coin: f64 = rng.random();
            if coin < p && !taken[candidate as usize] {
                taken[candidate as usize] = true;
                out[slot] = candidate;
                continue;
            }
        }
        let total: f64 = weights
            .iter()
            .zip(&taken)
            .filter(|(_, &t)| !t)
            .map(|(w, _)| w)
            .sum();
        let mut x = rng.random::<f64>() * total;
        let mut pick = None;
        for (i, w) in weights.iter().enumerate() {
            if taken[i] {
                continue;
            }
            pick = Some(i);
            if x < *w {
                break;
            }
            x -= w;
        }
        let i = pick.expect("fewer experts than top_k");
        taken[i] = true;
        out[slot] = i as ExpertId;
    }
}

/// Zipf weights over rank, shuffled per layer so hot experts differ by layer.
fn layer_weights(rng: &mut ChaCha8Rng, n_experts: usize, s: f64) -> Vec<f64> {
    let mut perm: Vec<usize> = (0..n_experts).collect();
    for i in (1..n_experts).rev() {
        let j = rng.random_range(0..=i);
        perm.swap(i, j);
    }
    let mut w = vec![0.0; n_experts];
    for (rank, &expert) in perm.iter().enumerate() {
        w[expert] = 1.0 / ((rank + 1) as f64).powf(s);
    }
    w
}

pub fn generate_trace(
    spec: &ModelSpec,
    cfg: &BatchGroupConfig,
    skew: Skew,
    seed: u64,
) -> Result<ActivationTrace> {
    generate_trace_with_routing(spec, cfg, skew, seed, 0)
}

/// Like [`generate_trace`] with an explicit popularity seed.
pub fn generate_trace_with_routing(
    spec: &ModelSpec,
    cfg: &BatchGroupConfig,
    skew: Skew,
    seed: u64,
    routing_seed: u64,
) -> Result<ActivationTrace> {
    spec.validate()?;
    cfg.validate()?;
    skew.validate()?;
    let meta = TraceMeta {
        seed,
        routing_seed,
        skew,
        n_experts: spec.n_experts_per_layer,
        top_k: spec.top_k,
        n_layers: spec.n_layers,
        group: *cfg,
    };
    let mut trace = ActivationTrace::empty(meta);
    let mut routing = ChaCha8Rng::seed_from_u64(routing_seed);
    let weights: Vec<Vec<f64>> = (0..spec.n_layers)
        .map(|_| layer_weights(&mut routing, spec.n_experts_per_layer, skew.exponent()))
        .collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let k = spec.top_k;
    let mut prev = vec![0 as ExpertId; k];
    let mut cur = vec![0 as ExpertId; k];
    for step in 0..cfg.n_steps() {
        for batch in 0..cfg.n_batches {
            for token in 0..cfg.tokens_per_batch(step) {
                for layer in 0..spec.n_layers {
                    let keep = match skew {
                        Skew::Markov { p, .. } if layer > 0 => Some((prev.as_slice(), p)),
                        _ => None,
                    };
                    draw_distinct(&mut rng, &weights[layer], k, keep, &mut cur);
                    trace
                        .experts_mut(step, layer, batch, token)
                        .copy_from_slice(&cur);
                    std::mem::swap(&mut prev, &mut cur);
                }
            }
        }
    }
    Ok(trace)
}

#[derive(Serialize, Deserialize)]
struct HeaderLine {
    header: TraceMeta,
}

#[derive(Serialize, Deserialize)]
struct Record {
    step: usize,
    layer: usize,
    batch: usize,
    token: usize,
    experts: Vec<ExpertId>,
}

pub fn save_trace(trace: &ActivationTrace, path: &Path) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    serde_json::to_writer(
        &mut w,
        &HeaderLine {
            header: trace.meta.clone(),
        },
    )?;
    w.write_all(b"\n")?;
    for step in 0..trace.n_steps() {
        for layer in 0..trace.n_layers() {
            for batch in 0..trace.n_batches() {
                for token in 0..trace.tokens_per_batch(step) {
                    let rec = Record {
                        step,
                        layer,
                        batch,
                        token,
                        experts: trace.experts(step, layer, batch, token).to_vec(),
                    };
                    serde_json::to_writer(&mut w, &rec)?;
                    w.write_all(b"\n")?;
                }
            }
        }
    }
    w.flush()?;
    Ok(())
}

/// Reads a trace written by [`save_trace`]. Records may appear in any order
/// but every (step, layer, batch, token) must be present exactly once.
pub fn load_trace(path: &Path) -> Result<ActivationTrace> {
    let parse_err = |record: usize, message: String| Error::Parse {
        path: path.to_path_buf(),
        record,
        message,
    };
    let reader = BufReader::new(File::open(path)?);
    let mut lines = reader.lines();
    let header = lines
        .next()
        .ok_or_else(|| parse_err(0, "missing header line".into()))??;
    let meta: TraceMeta = serde_json::from_str::<HeaderLine>(&header)
        .map_err(|e| parse_err(0, format!("bad header: {e}")))?
        .header;
    meta.group.validate()?;
    if meta.top_k == 0 || meta.top_k > meta.n_experts || meta.n_layers == 0 {
        return Err(parse_err(0, "inconsistent header dimensions".into()));
    }
    let mut trace = ActivationTrace::empty(meta);
    let mut seen = vec![false; trace.data.len() / trace.meta.top_k];
    let mut filled = 0usize;
    for (i, line) in lines.enumerate() {
        let line = line?;
        let record_no = i + 1;
        if line.trim().is_empty() {
            continue;
        }
        let rec: Record =
            serde_json::from_str(&line).map_err(|e| parse_err(record_no, e.to_string()))?;
        if rec.step >= trace.n_steps()
            || rec.layer >= trace.n_layers()
            || rec.batch >= trace.n_batches()
            || rec.token >= trace.tokens_per_batch(rec.step.min(trace.n_steps() - 1))
        {
            return Err(parse_err(
                record_no,
                "coordinates outside declared ranges".into(),
            ));
        }
        if rec.experts.len() != trace.top_k() {
            return Err(parse_err(
                record_no,
                format!(
                    "expected {} experts, got {}",
                    trace.top_k(),
                    rec.experts.len()
                ),
            ));
        }
        for (j, &e) in rec.experts.iter().enumerate() {
            if e as usize >= trace.n_experts() {
                return Err(Error::Validation(format!(
                    "record {record_no}: expert id {e} >= n_experts {}",
                    trace.n_experts()
                )));
            }
            if rec.experts[..j].contains(&e) {
                return Err(Error::Validation(format!(
                    "record {record_no}: duplicate expert {e}"
                )));
            }
        }
        let slot = trace.offset(rec.step, rec.layer, rec.batch, rec.token) / trace.top_k();
        if std::mem::replace(&mut seen[slot], true) {
            return Err(parse_err(record_no, "duplicate record".into()));
        }
        filled += 1;
        trace
            .experts_mut(rec.step, rec.layer, rec.batch, rec.token)
            .copy_from_slice(&rec.experts);
    }
    if filled != seen.len() {
        return Err(parse_err(
            filled + 1,
            format!(
                "truncated trace: {} of {} records present",
                filled,
                seen.len()
            ),
        ));
    }
    Ok(trace)
}

/// Builds a trace from explicit selections, `f(step, layer, batch, token)`.
pub fn trace_from_fn(
    spec: &ModelSpec,
    cfg: &BatchGroupConfig,
    mut f: impl FnMut(usize, usize, usize, usize) -> Vec<ExpertId>,
) -> Result<ActivationTrace> {
    spec.validate()?;
    cfg.validate()?;
    let meta = TraceMeta {
        seed: 0,
        routing_seed: 0,
        skew: Skew::Uniform,
        n_experts: spec.n_experts_per_layer,
        top_k: spec.top_k,
        n_layers: spec.n_layers,
        group: *cfg,
    };
    let mut trace = ActivationTrace::empty(meta);
    for step in 0..cfg.n_steps() {
        for layer in 0..spec.n_layers {
            for batch in 0..cfg.n_batches {
                for token in 0..cfg.tokens_per_batch(step) {
                    let sel = f(step, layer, batch, token);
                    if sel.len() != spec.top_k
                        || sel.iter().any(|&e| e as usize >= spec.n_experts_per_layer)
                        || (1..sel.len()).any(|i| sel[..i].contains(&sel[i]))
                    {
                        return Err(Error::Validation(format!(
                            "bad selection {sel:?} at ({step},{layer},{batch},{token})"
                        )));
                    }
                    trace
                        .experts_mut(step, layer, batch, token)
                        .copy_from_slice(&sel);
                }
            }
        }
    }
    Ok(trace)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small_spec(n_experts: usize, top_k: usize, n_layers: usize) -> ModelSpec {
        ModelSpec {
            name: "toy".into(),
            n_layers,
            n_experts_per_layer: n_experts,
            top_k,
            ..ModelSpec::mixtral_8x7b()
        }
    }

    fn cfg(
        batch_size: usize,
        n_batches: usize,
        prompt_len: usize,
        gen_len: usize,
    ) -> BatchGroupConfig {
        BatchGroupConfig {
            batch_size,
            n_batches,
            prompt_len,
            gen_len,
        }
    }

    #[test]
    fn uniform_limit_is_flat() {
        let spec = small_spec(8, 1, 1);
        let t = generate_trace(&spec, &cfg(64, 4, 64, 1), Skew::Zipf { s: 0.0 }, 3).unwrap();
        let load = expert_load(&t, 0, 0).unwrap();
        let n = load.total() as f64;
        let p = 1.0 / 8.0;
        let sigma = (n * p * (1.0 - p)).sqrt();
        for &c in &load.counts {
            assert!((c as f64 - n * p).abs() <= 3.0 * sigma, "{:?}", load.counts);
        }
    }

    #[test]
    fn zipf_two_hottest_cover_half() {
        let spec = small_spec(8, 2, 16);
        let t = generate_trace(&spec, &cfg(8, 4, 16, 2), Skew::Zipf { s: 1.5 }, 11).unwrap();
        let mut good = 0;
        for layer in 0..16 {
            let load = expert_load(&t, 0, layer).unwrap();
            let mut c = load.counts.clone();
            c.sort_unstable_by(|a, b| b.cmp(a));
            if (c[0] + c[1]) as f64 >= 0.5 * load.total() as f64 {
                good += 1;
            }
        }
        assert!(good as f64 >= 0.8 * 16.0, "{good}/16");
    }

    #[test]
    fn generation_is_deterministic() {
        let spec = small_spec(8, 2, 4);
        let c = cfg(4, 2, 8, 3);
        let a = generate_trace(&spec, &c, Skew::Markov { s: 1.2, p: 0.7 }, 5).unwrap();
        let b = generate_trace(&spec, &c, Skew::Markov { s: 1.2, p: 0.7 }, 5).unwrap();
        assert_eq!(a, b);
        let d = generate_trace(&spec, &c, Skew::Markov { s: 1.2, p: 0.7 }, 6).unwrap();
        assert_ne!(a, d);
    }

    #[test]
    fn markov_full_stickiness_repeats_path() {
        let spec = small_spec(8, 2, 6);
        let t =
            generate_trace(&spec, &cfg(4, 2, 4, 2), Skew::Markov { s: 1.0, p: 1.0 }, 9).unwrap();
        for step in 0..2 {
            for b in 0..2 {
                for tok in 0..t.tokens_per_batch(step) {
                    let first = t.experts(step, 0, b, tok).to_vec();
                    for layer in 1..6 {
                        assert_eq!(t.experts(step, layer, b, tok), first.as_slice());
                    }
                }
            }
        }
    }

    #[test]
    fn invalid_skew_rejected() {
        let spec = small_spec(8, 2, 2);
        let c = cfg(1, 1, 1, 1);
        assert!(matches!(
            generate_trace(&spec, &c, Skew::Zipf { s: -1.0 }, 0),
            Err(Error::Config(_))
        ));
        assert!(matches!(
            generate_trace(&spec, &c, Skew::Markov { s: 1.0, p: 1.5 }, 0),
            Err(Error::Config(_))
        ));
    }

    #[test]
    fn degenerate_routing_counts() {
        let spec = small_spec(8, 1, 2);
        let c = cfg(3, 2, 2, 2);
        let t = trace_from_fn(&spec, &c, |_, _, _, _| vec![2]).unwrap();
        let load = expert_load(&t, 1, 1).unwrap();
        assert_eq!(load.counts, vec![0, 0, 6, 0, 0, 0, 0, 0]);
        assert_eq!(load.distinct_active(), 1);
    }

    #[test]
    fn hot_experts_rank_first() {
        // experts 2 and 4 hot, 5, 3 and 1 cold, in the spirit of the toy
        // three-batch example
        let spec = small_spec(6, 1, 1);
        let c = cfg(3, 3, 1, 1);
        let rows = [[2, 5, 2], [4, 2, 3], [4, 1, 4]];
        let t = trace_from_fn(&spec, &c, |_, _, b, tok| vec![rows[b][tok]]).unwrap();
        let load = expert_load(&t, 0, 0).unwrap();
        let ranked = load.ranked();
        assert_eq!(&ranked[..2], &[2, 4]);
        for cold in [5, 3, 1] {
            assert!(load.counts[cold] < load.counts[4]);
        }
    }

    #[test]
    fn counts_sum_to_top_k_tokens() {
        let spec = small_spec(8, 2, 3);
        let c = cfg(4, 3, 5, 3);
        let t = generate_trace(&spec, &c, Skew::Zipf { s: 1.1 }, 1).unwrap();
        for step in 0..3 {
            for layer in 0..3 {
                // recount directly from the per-token accessor
                let mut manual = 0u64;
                for b in 0..3 {
                    for tok in 0..t.tokens_per_batch(step) {
                        manual += t.experts(step, layer, b, tok).len() as u64;
                    }
                }
                let load = expert_load(&t, step, layer).unwrap();
                assert_eq!(load.total(), manual);
                assert_eq!(load.total(), (2 * c.tokens_in_step(step)) as u64);
            }
        }
        assert!(matches!(
            expert_load(&t, 3, 0),
            Err(Error::OutOfRange { .. })
        ));
        assert!(matches!(
            expert_load(&t, 0, 3),
            Err(Error::OutOfRange { .. })
        ));
    }

    #[test]
    fn save_load_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("t.jsonl");
        let spec = small_spec(8, 2, 3);
        let t = generate_trace(&spec, &cfg(2, 2, 3, 2), Skew::Zipf { s: 1.0 }, 4).unwrap();
        save_trace(&t, &path).unwrap();
        let back = load_trace(&path).unwrap();
        assert_eq!(back, t);
        let path2 = dir.path().join("t2.jsonl");
        save_trace(&back, &path2).unwrap();
        assert_eq!(
            std::fs::read(&path).unwrap(),
            std::fs::read(&path2).unwrap()
        );
    }

    #[test]
    fn truncated_file_is_a_parse_error() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("t.jsonl");
        let spec = small_spec(4, 1, 2);
        let t = generate_trace(&spec, &cfg(2, 1, 2, 1), Skew::Uniform, 4).unwrap();
        save_trace(&t, &path).unwrap();
        let text = std::fs::read_to_string(&path).unwrap();
        let cut = &text[..text.len() - 20];
        std::fs::write(&path, cut).unwrap();
        assert!(matches!(load_trace(&path), Err(Error::Parse { .. })));
        let lines: Vec<&str> = text.lines().collect();
        std::fs::write(&path, lines[..lines.len() - 1].join("\n")).unwrap();
        assert!(matches!(load_trace(&path), Err(Error::Parse { .. })));
    }

    #[test]
    fn out_of_range_expert_is_a_validation_error() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("t.jsonl");
        let spec = small_spec(4, 1, 1);
        let t = generate_trace(&spec, &cfg(1, 1, 1, 1), Skew::Uniform, 4).unwrap();
        save_trace(&t, &path).unwrap();
        let text = std::fs::read_to_string(&path).unwrap();
        let header = text.lines().next().unwrap();
        let bad = format!(
            "{header}\n{{\"step\":0,\"layer\":0,\"batch\":0,\"token\":0,\"experts\":[7]}}\n"
        );
        std::fs::write(&path, bad).unwrap();
        match load_trace(&path) {
            Err(Error::Validation(m)) => assert!(m.contains("record 1"), "{m}"),
            other => panic!("{other:?}"),
        }
    }
}
