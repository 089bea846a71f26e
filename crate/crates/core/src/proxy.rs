//! Disaggregation-aware request scheduling.
//!
//! Requests move through an eight-phase lifecycle (tokenize, prefix-cache
//! matching, then waiting/scheduled/running on each of the prefill and
//! decode sides) before reaching the terminal state. The prefill side
//! scores every candidate node as `match - alpha * load`, trading cache
//! affinity against load concentration, with prefix matches served by a
//! radix tree over token-id sequences. The decode side estimates each
//! request's effective workload from prompt length plus max tokens and
//! packs instances longest-processing-time-first. Submission may be
//! deferred briefly so dispatches line up with predicted backend batch
//! boundaries; nothing is ever held past `hold_max`.

use std::collections::{BTreeMap, VecDeque};
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

// ─── Request lifecycle ────────────────────────────────────────────────────────

/// Lifecycle phases in transition order. `Done` is terminal.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RequestPhase {
    Tokenize,
    ApcMatching,
    PrefillWaiting,
    PrefillScheduled,
    PrefillRunning,
    DecodeWaiting,
    DecodeScheduled,
    DecodeRunning,
    Done,
}

impl RequestPhase {
    fn next(self) -> Option<RequestPhase> {
        use RequestPhase::*;
        match self {
            Tokenize => Some(ApcMatching),
            ApcMatching => Some(PrefillWaiting),
            PrefillWaiting => Some(PrefillScheduled),
            PrefillScheduled => Some(PrefillRunning),
            PrefillRunning => Some(DecodeWaiting),
            DecodeWaiting => Some(DecodeScheduled),
            DecodeScheduled => Some(DecodeRunning),
            DecodeRunning => Some(Done),
            Done => None,
        }
    }
}

/// Events that advance a request exactly one phase.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LifecycleEvent {
    TokenizeComplete,
    ApcMatchComplete,
    PrefillDispatched,
    PrefillStarted,
    PrefillCompleted,
    DecodeDispatched,
    DecodeStarted,
    Completed,
}

impl LifecycleEvent {
    /// The phase this event is legal in.
    pub fn source(self) -> RequestPhase {
        use LifecycleEvent::*;
        match self {
            TokenizeComplete => RequestPhase::Tokenize,
            ApcMatchComplete => RequestPhase::ApcMatching,
            PrefillDispatched => RequestPhase::PrefillWaiting,
            PrefillStarted => RequestPhase::PrefillScheduled,
            PrefillCompleted => RequestPhase::PrefillRunning,
            DecodeDispatched => RequestPhase::DecodeWaiting,
            DecodeStarted => RequestPhase::DecodeScheduled,
            Completed => RequestPhase::DecodeRunning,
        }
    }
}

/// A lifecycle-tracked unit of work.
#[derive(Debug, Clone)]
pub struct Request {
    pub id: u64,
    /// Token ids; shared so the radix tree and queues never copy prompts.
    pub prompt: Arc<Vec<u32>>,
    pub prompt_len: usize,
    pub max_tokens: Option<usize>,
    pub arrival: f64,
    phase: RequestPhase,
    timestamps: Vec<(RequestPhase, f64)>,
    pub ttft: Option<f64>,
    pub tpot_samples: Vec<f64>,
    last_token_at: Option<f64>,
    pub generated: usize,
}

impl Request {
    pub fn new(id: u64, prompt: Vec<u32>, max_tokens: Option<usize>, arrival: f64) -> Self {
        let prompt_len = prompt.len();
        Self {
            id,
            prompt: Arc::new(prompt),
            prompt_len,
            max_tokens,
            arrival,
            phase: RequestPhase::Tokenize,
            timestamps: vec![(RequestPhase::Tokenize, arrival)],
            ttft: None,
            tpot_samples: Vec::new(),
            last_token_at: None,
            generated: 0,
        }
    }

    pub fn phase(&self) -> RequestPhase {
        self.phase
    }

    /// Phase entry times in transition order.
    pub fn timestamps(&self) -> &[(RequestPhase, f64)] {
        &self.timestamps
    }

    fn last_timestamp(&self) -> f64 {
        self.timestamps.last().map(|&(_, t)| t).unwrap_or(self.arrival)
    }

    /// Record one emitted token. The first token fixes TTFT; every later
    /// one appends a TPOT sample.
    pub fn record_token(&mut self, now: f64) -> Result<()> {
        if self.phase != RequestPhase::DecodeRunning {
            return Err(Error::ProtocolViolation(format!(
                "request {} emitted a token in phase {:?}",
                self.id, self.phase
            )));
        }
        match self.last_token_at {
            None => self.ttft = Some(now - self.arrival),
            Some(prev) => self.tpot_samples.push(now - prev),
        }
        self.last_token_at = Some(now);
        self.generated += 1;
        Ok(())
    }
}

/// Advance a request one lifecycle step, recording the entry timestamp.
pub fn advance_lifecycle(request: &mut Request, event: LifecycleEvent, now: f64) -> Result<()> {
    if request.phase != event.source() {
        return Err(Error::ProtocolViolation(format!(
            "request {}: event {:?} illegal in phase {:?}",
            request.id, event, request.phase
        )));
    }
    if now + 1e-12 < request.last_timestamp() {
        return Err(Error::ProtocolViolation(format!(
            "request {}: time went backwards ({now} < {})",
            request.id,
            request.last_timestamp()
        )));
    }
    let next = request.phase.next().expect("non-terminal phase has a successor");
    request.phase = next;
    request.timestamps.push((next, now));
    Ok(())
}

// ─── Node state ───────────────────────────────────────────────────────────────

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NodeRole {
    Prefill,
    Decode,
}

/// Live metrics for one backend node, as the proxy sees them.
#[derive(Debug, Clone)]
pub struct NodeState {
    pub id: usize,
    pub role: NodeRole,
    pub running_requests: usize,
    pub running_tokens: usize,
    pub queue: Vec<u64>,
    /// EWMA of recent batch completion intervals.
    pub batch_cycle_est: f64,
    pub last_batch_start: f64,
    /// Accumulated effective workload, the LPT balance signal.
    pub accumulated_workload: f64,
}

impl NodeState {
    pub fn new(id: usize, role: NodeRole) -> Self {
        Self {
            id,
            role,
            running_requests: 0,
            running_tokens: 0,
            queue: Vec::new(),
            batch_cycle_est: 0.0,
            last_batch_start: 0.0,
            accumulated_workload: 0.0,
        }
    }

    /// Fold one observed batch interval into the cycle estimate.
    pub fn observe_batch_cycle(&mut self, interval: f64) {
        const ALPHA: f64 = 0.3;
        if self.batch_cycle_est == 0.0 {
            self.batch_cycle_est = interval;
        } else {
            self.batch_cycle_est = (1.0 - ALPHA) * self.batch_cycle_est + ALPHA * interval;
        }
    }

    /// Next predicted batch boundary at or after `now`. A node with no
    /// cycle estimate yet is treated as boundary-now (no reason to wait).
    pub fn next_batch_boundary(&self, now: f64) -> f64 {
        if self.batch_cycle_est <= 0.0 {
            return now;
        }
        let mut boundary = self.last_batch_start + self.batch_cycle_est;
        if boundary < now {
            let behind = (now - self.last_batch_start) / self.batch_cycle_est;
            boundary = self.last_batch_start + behind.ceil() * self.batch_cycle_est;
        }
        boundary
    }
}

// ─── Prefix tree ──────────────────────────────────────────────────────────────

#[derive(Debug)]
struct TrieNode {
    fragment: Vec<u32>,
    children: BTreeMap<u32, usize>,
    /// owner node id -> live record count through this trie node.
    owners: BTreeMap<usize, usize>,
}

#[derive(Debug)]
struct SeqRecord {
    seq: Arc<Vec<u32>>,
}

#[derive(Debug, Default)]
struct OwnerBook {
    records: VecDeque<SeqRecord>,
    owned_tokens: usize,
}

/// Radix tree over token-id sequences with per-node owner tags.
///
/// Each prefill node "owns" the sequences routed to it; a lookup asks how
/// many leading tokens of a prompt that node already holds. Owners are
/// reference-counted per trie node so overlapping sequences share
/// storage, and each owner's footprint is capped at `capacity_tokens`
/// with least-recently-inserted eviction.
#[derive(Debug)]
pub struct PrefixTree {
    nodes: Vec<TrieNode>,
    books: BTreeMap<usize, OwnerBook>,
    capacity_tokens: usize,
}

impl PrefixTree {
    pub fn new(capacity_tokens: usize) -> Self {
        let root =
            TrieNode { fragment: Vec::new(), children: BTreeMap::new(), owners: BTreeMap::new() };
        Self { nodes: vec![root], books: BTreeMap::new(), capacity_tokens }
    }

    /// Unique tokens currently owned by `owner`.
    pub fn owned_tokens(&self, owner: usize) -> usize {
        self.books.get(&owner).map_or(0, |b| b.owned_tokens)
    }

    /// Longest stored prefix of `seq` whose owner tags include `owner`.
    pub fn match_len(&self, seq: &[u32], owner: usize) -> usize {
        let mut matched = 0;
        let mut pos = 0;
        let mut cur = 0usize;
        while pos < seq.len() {
            let Some(&child) = self.nodes[cur].children.get(&seq[pos]) else { break };
            let node = &self.nodes[child];
            if !node.owners.contains_key(&owner) {
                break;
            }
            let frag = &node.fragment;
            let common = frag
                .iter()
                .zip(&seq[pos..])
                .take_while(|(a, b)| a == b)
                .count();
            matched += common;
            if common < frag.len() {
                break;
            }
            pos += common;
            cur = child;
        }
        matched
    }

    fn bump_owner(nodes: &mut [TrieNode], book: &mut OwnerBook, node: usize, owner: usize) {
        let count = nodes[node].owners.entry(owner).or_insert(0);
        *count += 1;
        if *count == 1 {
            book.owned_tokens += nodes[node].fragment.len();
        }
    }

    /// Insert `seq` under `owner`, then enforce the owner's capacity.
    pub fn insert(&mut self, seq: &Arc<Vec<u32>>, owner: usize) {
        if seq.is_empty() {
            return;
        }
        let mut book = self.books.remove(&owner).unwrap_or_default();
        let mut pos = 0;
        let mut cur = 0usize;
        while pos < seq.len() {
            match self.nodes[cur].children.get(&seq[pos]).copied() {
                None => {
                    let idx = self.nodes.len();
                    self.nodes.push(TrieNode {
                        fragment: seq[pos..].to_vec(),
                        children: BTreeMap::new(),
                        owners: BTreeMap::new(),
                    });
                    self.nodes[cur].children.insert(seq[pos], idx);
                    Self::bump_owner(&mut self.nodes, &mut book, idx, owner);
                    pos = seq.len();
                }
                Some(child) => {
                    let common = self.nodes[child]
                        .fragment
                        .iter()
                        .zip(&seq[pos..])
                        .take_while(|(a, b)| a == b)
                        .count();
                    if common < self.nodes[child].fragment.len() {
                        // Split: an upper node takes the shared prefix and
                        // inherits the child's owner counts (every record
                        // through the child also covers the prefix).
                        let upper_idx = self.nodes.len();
                        let lower_fragment = self.nodes[child].fragment.split_off(common);
                        let upper_fragment =
                            std::mem::take(&mut self.nodes[child].fragment);
                        let owners = self.nodes[child].owners.clone();
                        self.nodes.push(TrieNode {
                            fragment: upper_fragment,
                            children: BTreeMap::from([(lower_fragment[0], child)]),
                            owners,
                        });
                        self.nodes[child].fragment = lower_fragment;
                        self.nodes[cur].children.insert(seq[pos], upper_idx);
                        Self::bump_owner(&mut self.nodes, &mut book, upper_idx, owner);
                        pos += common;
                        cur = upper_idx;
                    } else {
                        Self::bump_owner(&mut self.nodes, &mut book, child, owner);
                        pos += common;
                        cur = child;
                    }
                }
            }
        }
        book.records.push_back(SeqRecord { seq: Arc::clone(seq) });
        while book.owned_tokens > self.capacity_tokens && book.records.len() > 1 {
            let victim = book.records.pop_front().expect("len > 1");
            self.release(&victim.seq, owner, &mut book);
        }
        self.books.insert(owner, book);
    }

    /// Walk `seq` decrementing the owner's refcounts, dropping tags that
    /// reach zero and pruning childless untagged nodes.
    fn release(&mut self, seq: &[u32], owner: usize, book: &mut OwnerBook) {
        let mut path: Vec<usize> = vec![0];
        let mut pos = 0;
        let mut cur = 0usize;
        while pos < seq.len() {
            let Some(&child) = self.nodes[cur].children.get(&seq[pos]) else { break };
            let flen = self.nodes[child].fragment.len();
            debug_assert!(seq[pos..].len() >= flen, "record path no longer node-aligned");
            path.push(child);
            pos += flen;
            cur = child;
        }
        for i in (1..path.len()).rev() {
            let node = path[i];
            let remove = match self.nodes[node].owners.get_mut(&owner) {
                Some(count) => {
                    *count -= 1;
                    *count == 0
                }
                None => false,
            };
            if remove {
                self.nodes[node].owners.remove(&owner);
                book.owned_tokens -= self.nodes[node].fragment.len();
            }
            if self.nodes[node].owners.is_empty() && self.nodes[node].children.is_empty() {
                let parent = path[i - 1];
                let first = self.nodes[node].fragment[0];
                self.nodes[parent].children.remove(&first);
            }
        }
    }
}

/// Length of the longest stored prefix of `prompt` owned by `node`.
pub fn prefix_match_score(tree: &PrefixTree, prompt: &[u32], node: usize) -> usize {
    tree.match_len(prompt, node)
}

// ─── Scoring and scheduling ───────────────────────────────────────────────────

/// Proxy tunables.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ProxyConfig {
    /// Cache-affinity vs load trade-off coefficient.
    pub alpha: f64,
    /// Weight of running request count in the load term.
    pub weight_requests: f64,
    /// Weight of running token count in the load term.
    pub weight_tokens: f64,
    /// Fallback when a request does not carry `max_tokens`.
    pub default_max_tokens: usize,
    /// Longest a request may be held before forced dispatch.
    pub hold_max: f64,
    /// Dispatch when the target's predicted batch boundary falls within
    /// this horizon.
    pub lookahead: f64,
    /// Per-node radix cache capacity in tokens.
    pub node_cache_tokens: usize,
}

impl Default for ProxyConfig {
    fn default() -> Self {
        Self {
            alpha: 0.01,
            weight_requests: 0.0,
            weight_tokens: 1.0,
            default_max_tokens: 1000,
            hold_max: 0.1,
            lookahead: 0.05,
            node_cache_tokens: 64_000_000,
        }
    }
}

impl ProxyConfig {
    pub fn validate(&self) -> Result<()> {
        if self.alpha < 0.0 {
            return Err(Error::invalid("alpha must be >= 0"));
        }
        if self.hold_max < 0.0 || self.lookahead < 0.0 {
            return Err(Error::invalid("hold_max and lookahead must be >= 0"));
        }
        Ok(())
    }
}

/// Prefill score: cache affinity minus weighted instantaneous load.
pub fn score_prefill_node(match_tokens: usize, node: &NodeState, cfg: &ProxyConfig) -> f64 {
    let load = cfg.weight_requests * node.running_requests as f64
        + cfg.weight_tokens * node.running_tokens as f64;
    match_tokens as f64 - cfg.alpha * load
}

/// One request waiting for prefill assignment.
#[derive(Debug, Clone)]
pub struct PrefillItem {
    pub id: u64,
    pub prompt: Arc<Vec<u32>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PrefillAssignment {
    pub request: u64,
    pub node: usize,
    pub match_len: usize,
    pub score: f64,
}

/// Assign waiting requests to prefill nodes by descending score.
///
/// Requests are processed in the given (arrival) order. After each pick
/// the chosen node's running totals grow by the unmatched token count so
/// the next decision sees in-flight load, and the tree learns the prompt
/// under the chosen owner.
pub fn schedule_prefill(
    items: &[PrefillItem],
    nodes: &mut [NodeState],
    tree: &mut PrefixTree,
    cfg: &ProxyConfig,
) -> Result<Vec<PrefillAssignment>> {
    if nodes.is_empty() {
        return Err(Error::NoCapacity("no prefill nodes".into()));
    }
    let mut out = Vec::with_capacity(items.len());
    for item in items {
        let mut best: Option<(f64, usize)> = None;
        let mut best_match = 0;
        for (pos, node) in nodes.iter().enumerate() {
            debug_assert_eq!(node.role, NodeRole::Prefill);
            let m = tree.match_len(&item.prompt, node.id);
            let score = score_prefill_node(m, node, cfg);
            let better = match best {
                None => true,
                Some((bs, bpos)) => score > bs || (score == bs && node.id < nodes[bpos].id),
            };
            if better {
                best = Some((score, pos));
                best_match = m;
            }
        }
        let (score, pos) = best.expect("nodes is non-empty");
        let node = &mut nodes[pos];
        node.running_tokens += item.prompt.len().saturating_sub(best_match);
        node.running_requests += 1;
        tree.insert(&item.prompt, node.id);
        out.push(PrefillAssignment {
            request: item.id,
            node: node.id,
            match_len: best_match,
            score,
        });
    }
    Ok(out)
}

/// Round-robin prefill assignment (the ablation baseline). The tree is
/// still consulted and updated so cache-hit accounting stays comparable.
pub fn schedule_prefill_round_robin(
    items: &[PrefillItem],
    nodes: &mut [NodeState],
    tree: &mut PrefixTree,
    cursor: &mut usize,
) -> Result<Vec<PrefillAssignment>> {
    if nodes.is_empty() {
        return Err(Error::NoCapacity("no prefill nodes".into()));
    }
    let mut out = Vec::with_capacity(items.len());
    for item in items {
        let pos = *cursor % nodes.len();
        *cursor = (*cursor + 1) % nodes.len();
        let node = &mut nodes[pos];
        let m = tree.match_len(&item.prompt, node.id);
        node.running_tokens += item.prompt.len().saturating_sub(m);
        node.running_requests += 1;
        tree.insert(&item.prompt, node.id);
        out.push(PrefillAssignment { request: item.id, node: node.id, match_len: m, score: 0.0 });
    }
    Ok(out)
}

/// Effective decode workload: prompt tokens plus the declared or default
/// max output tokens.
pub fn effective_workload(request: &Request, default_max: usize) -> f64 {
    (request.prompt_len + request.max_tokens.unwrap_or(default_max)) as f64
}

/// One request waiting for decode assignment.
#[derive(Debug, Clone, Copy)]
pub struct DecodeItem {
    pub id: u64,
    pub workload: f64,
    pub arrival: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DecodeAssignment {
    pub request: u64,
    pub instance: usize,
    pub workload: f64,
}

/// Longest-processing-time-first packing onto decode instances: jobs in
/// descending workload (ties: earlier arrival, then id) each go to the
/// instance with the least accumulated workload (ties: lower id).
pub fn schedule_decode_lpt(
    items: &[DecodeItem],
    instances: &mut [NodeState],
) -> Result<Vec<DecodeAssignment>> {
    if instances.is_empty() {
        return Err(Error::NoCapacity("no decode instances".into()));
    }
    let mut order: Vec<&DecodeItem> = items.iter().collect();
    order.sort_by(|a, b| {
        b.workload
            .partial_cmp(&a.workload)
            .unwrap_or(std::cmp::Ordering::Equal)
            .then(a.arrival.partial_cmp(&b.arrival).unwrap_or(std::cmp::Ordering::Equal))
            .then(a.id.cmp(&b.id))
    });
    let mut out = Vec::with_capacity(items.len());
    for item in order {
        let mut pos = 0;
        for (i, inst) in instances.iter().enumerate() {
            debug_assert_eq!(inst.role, NodeRole::Decode);
            if inst.accumulated_workload < instances[pos].accumulated_workload
                || (inst.accumulated_workload == instances[pos].accumulated_workload
                    && inst.id < instances[pos].id)
            {
                pos = i;
            }
        }
        let inst = &mut instances[pos];
        inst.accumulated_workload += item.workload;
        inst.running_requests += 1;
        out.push(DecodeAssignment { request: item.id, instance: inst.id, workload: item.workload });
    }
    Ok(out)
}

// ─── Deferred submission ──────────────────────────────────────────────────────

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum QueueKind {
    Prefill,
    Decode,
}

/// A queued request as the deferral logic sees it.
#[derive(Debug, Clone)]
pub struct QueuedRequest {
    pub id: u64,
    pub arrival: f64,
    /// Present for prefill queues.
    pub prompt: Option<Arc<Vec<u32>>>,
    /// Effective workload, used by decode queues.
    pub workload: f64,
}

#[derive(Debug, Clone)]
pub struct DeferOutcome {
    /// Release now, in arrival order.
    pub dispatch: Vec<QueuedRequest>,
    /// Keep queued, re-sorted by priority (score or workload descending).
    pub retained: Vec<QueuedRequest>,
}

/// Decide which queued requests to release this call.
///
/// A request dispatches once it has aged `hold_max`, or as soon as its
/// target node's next predicted batch boundary falls inside the
/// look-ahead horizon. With `hold_max` zero this is immediate dispatch.
pub fn defer_and_resort(
    queue: Vec<QueuedRequest>,
    kind: QueueKind,
    nodes: &[NodeState],
    tree: &PrefixTree,
    now: f64,
    cfg: &ProxyConfig,
) -> DeferOutcome {
    let mut dispatch = Vec::new();
    let mut retained = Vec::new();
    for item in queue {
        if now + 1e-12 >= item.arrival + cfg.hold_max {
            dispatch.push(item);
            continue;
        }
        let target = target_node(&item, kind, nodes, tree, cfg);
        let released = match target {
            None => true,
            Some(node) => node.next_batch_boundary(now) <= now + cfg.lookahead,
        };
        if released {
            dispatch.push(item);
        } else {
            retained.push(item);
        }
    }
    dispatch.sort_by(|a, b| {
        a.arrival.partial_cmp(&b.arrival).unwrap_or(std::cmp::Ordering::Equal).then(a.id.cmp(&b.id))
    });
    retained.sort_by(|a, b| {
        let pa = priority(a, kind, nodes, tree, cfg);
        let pb = priority(b, kind, nodes, tree, cfg);
        pb.partial_cmp(&pa).unwrap_or(std::cmp::Ordering::Equal).then(a.id.cmp(&b.id))
    });
    DeferOutcome { dispatch, retained }
}

fn target_node<'n>(
    item: &QueuedRequest,
    kind: QueueKind,
    nodes: &'n [NodeState],
    tree: &PrefixTree,
    cfg: &ProxyConfig,
) -> Option<&'n NodeState> {
    match kind {
        QueueKind::Prefill => {
            let prompt = item.prompt.as_deref()?;
            nodes.iter().max_by(|a, b| {
                let sa = score_prefill_node(tree.match_len(prompt, a.id), a, cfg);
                let sb = score_prefill_node(tree.match_len(prompt, b.id), b, cfg);
                sa.partial_cmp(&sb)
                    .unwrap_or(std::cmp::Ordering::Equal)
                    .then(b.id.cmp(&a.id))
            })
        }
        QueueKind::Decode => nodes.iter().min_by(|a, b| {
            a.accumulated_workload
                .partial_cmp(&b.accumulated_workload)
                .unwrap_or(std::cmp::Ordering::Equal)
                .then(a.id.cmp(&b.id))
        }),
    }
}

fn priority(
    item: &QueuedRequest,
    kind: QueueKind,
    nodes: &[NodeState],
    tree: &PrefixTree,
    cfg: &ProxyConfig,
) -> f64 {
    match kind {
        QueueKind::Prefill => match &item.prompt {
            None => 0.0,
            Some(prompt) => nodes
                .iter()
                .map(|n| score_prefill_node(tree.match_len(prompt, n.id), n, cfg))
                .fold(f64::NEG_INFINITY, f64::max),
        },
        QueueKind::Decode => item.workload,
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn seq(tokens: &[u32]) -> Arc<Vec<u32>> {
        Arc::new(tokens.to_vec())
    }

    #[test]
    fn empty_tree_matches_nothing() {
        let tree = PrefixTree::new(1000);
        assert_eq!(prefix_match_score(&tree, &[1, 2, 3], 0), 0);
    }

    #[test]
    fn exact_prompt_matches_fully() {
        let mut tree = PrefixTree::new(1000);
        let p = seq(&[4, 8, 15, 16, 23, 42]);
        tree.insert(&p, 0);
        assert_eq!(prefix_match_score(&tree, &p, 0), 6);
    }

    #[test]
    fn longest_common_prefix_by_hand() {
        let mut tree = PrefixTree::new(1000);
        tree.insert(&seq(&[5, 7, 9, 2]), 0);
        assert_eq!(prefix_match_score(&tree, &[5, 7, 9, 4], 0), 3);
        assert_eq!(prefix_match_score(&tree, &[5, 7, 9, 2], 0), 4);
        assert_eq!(prefix_match_score(&tree, &[6, 7], 0), 0);
    }

    #[test]
    fn owners_are_isolated() {
        let mut tree = PrefixTree::new(1000);
        tree.insert(&seq(&[1, 2, 3]), 0);
        assert_eq!(prefix_match_score(&tree, &[1, 2, 3], 1), 0);
        tree.insert(&seq(&[1, 2, 9]), 1);
        assert_eq!(prefix_match_score(&tree, &[1, 2, 3], 1), 2);
        assert_eq!(prefix_match_score(&tree, &[1, 2, 3], 0), 3);
    }

    #[test]
    fn shared_prefixes_counted_once() {
        let mut tree = PrefixTree::new(1000);
        tree.insert(&seq(&[1, 2, 3, 4]), 0);
        tree.insert(&seq(&[1, 2, 3, 5]), 0);
        assert_eq!(tree.owned_tokens(0), 5);
    }

    #[test]
    fn lru_eviction_respects_capacity() {
        let mut tree = PrefixTree::new(6);
        let a = seq(&[1, 2, 3, 4]);
        let b = seq(&[9, 8, 7]);
        tree.insert(&a, 0);
        tree.insert(&b, 0);
        // 4 + 3 = 7 > 6: the older sequence is evicted.
        assert!(tree.owned_tokens(0) <= 6);
        assert_eq!(prefix_match_score(&tree, &a, 0), 0);
        assert_eq!(prefix_match_score(&tree, &b, 0), 3);
    }

    #[test]
    fn eviction_keeps_shared_prefix_owned_by_survivors() {
        let mut tree = PrefixTree::new(5);
        tree.insert(&seq(&[1, 2, 3, 4]), 0);
        tree.insert(&seq(&[1, 2, 9]), 0);
        // Unique tokens: {1,2,3,4} + {9} = 5, at capacity; nothing evicted.
        assert_eq!(tree.owned_tokens(0), 5);
        tree.insert(&seq(&[7, 7]), 0);
        // Now over capacity: [1,2,3,4] evicted, shared [1,2] must survive
        // because [1,2,9] still references it.
        assert_eq!(prefix_match_score(&tree, &[1, 2, 9], 0), 3);
        assert_eq!(prefix_match_score(&tree, &[1, 2, 3, 4], 0), 2);
        assert_eq!(tree.owned_tokens(0), 5);
    }

    #[test]
    fn score_arithmetic() {
        let cfg = ProxyConfig {
            alpha: 0.5,
            weight_requests: 1.0,
            weight_tokens: 0.0,
            ..ProxyConfig::default()
        };
        let mut node = NodeState::new(0, NodeRole::Prefill);
        node.running_requests = 20;
        assert_eq!(score_prefill_node(100, &node, &cfg), 90.0);

        let pure = ProxyConfig { alpha: 0.0, ..ProxyConfig::default() };
        node.running_tokens = 123456;
        assert_eq!(score_prefill_node(77, &node, &pure), 77.0);
    }

    #[test]
    fn alpha_trade_off_flips_the_winner() {
        let mk = |alpha| ProxyConfig {
            alpha,
            weight_requests: 1.0,
            weight_tokens: 0.0,
            ..ProxyConfig::default()
        };
        let mut busy = NodeState::new(0, NodeRole::Prefill);
        busy.running_requests = 50;
        let idle = NodeState::new(1, NodeRole::Prefill);

        let cfg = mk(1.0);
        let (sa, sb) = (score_prefill_node(80, &busy, &cfg), score_prefill_node(0, &idle, &cfg));
        assert_eq!((sa, sb), (30.0, 0.0));
        assert!(sa > sb, "cache-hit node should still win at alpha=1");

        let cfg = mk(2.0);
        let (sa, sb) = (score_prefill_node(80, &busy, &cfg), score_prefill_node(0, &idle, &cfg));
        assert_eq!((sa, sb), (-20.0, 0.0));
        assert!(sb > sa, "idle node should win at alpha=2");
    }

    #[test]
    fn second_identical_request_follows_the_cache() {
        let cfg = ProxyConfig::default();
        let mut nodes = vec![
            NodeState::new(0, NodeRole::Prefill),
            NodeState::new(1, NodeRole::Prefill),
        ];
        let mut tree = PrefixTree::new(1_000_000);
        let prompt = seq(&(0..200u32).collect::<Vec<_>>());
        let items =
            vec![PrefillItem { id: 1, prompt: prompt.clone() }, PrefillItem { id: 2, prompt }];
        let got = schedule_prefill(&items, &mut nodes, &mut tree, &cfg).unwrap();
        assert_eq!(got[0].node, 0, "first request tie-breaks to node 0");
        assert_eq!(got[1].node, 0, "cache term dominates the small load term");
        assert_eq!(got[1].match_len, 200);
    }

    #[test]
    fn huge_alpha_alternates_nodes() {
        // Weight the running-request count: with full cache hits the token
        // load term stops growing, but each assignment still adds one
        // running request, so a huge alpha forces strict alternation.
        let cfg = ProxyConfig {
            alpha: 1e6,
            weight_requests: 1.0,
            weight_tokens: 0.0,
            ..ProxyConfig::default()
        };
        let mut nodes = vec![
            NodeState::new(0, NodeRole::Prefill),
            NodeState::new(1, NodeRole::Prefill),
        ];
        let mut tree = PrefixTree::new(1_000_000);
        let prompt = seq(&(0..50u32).collect::<Vec<_>>());
        let items: Vec<PrefillItem> =
            (0..4).map(|id| PrefillItem { id, prompt: prompt.clone() }).collect();
        let got = schedule_prefill(&items, &mut nodes, &mut tree, &cfg).unwrap();
        assert_eq!(
            got.iter().map(|a| a.node).collect::<Vec<_>>(),
            vec![0, 1, 0, 1],
            "load term must dominate regardless of cache"
        );
    }

    #[test]
    fn single_node_takes_everything() {
        let cfg = ProxyConfig::default();
        let mut nodes = vec![NodeState::new(0, NodeRole::Prefill)];
        let mut tree = PrefixTree::new(1000);
        let items: Vec<PrefillItem> =
            (0..3).map(|id| PrefillItem { id, prompt: seq(&[id as u32, 1, 2]) }).collect();
        let got = schedule_prefill(&items, &mut nodes, &mut tree, &cfg).unwrap();
        assert!(got.iter().all(|a| a.node == 0));
        assert!(
            schedule_prefill(&items, &mut [], &mut tree, &cfg).is_err(),
            "no nodes must be a no-capacity error"
        );
    }

    #[test]
    fn effective_workload_rules() {
        let r = Request::new(1, vec![0; 3500], Some(1000), 0.0);
        assert_eq!(effective_workload(&r, 999), 4500.0);
        let r = Request::new(2, vec![0; 3500], None, 0.0);
        assert_eq!(effective_workload(&r, 1000), 4500.0);
        let r = Request::new(3, vec![], None, 0.0);
        assert_eq!(effective_workload(&r, 1000), 1000.0);
    }

    #[test]
    fn lpt_fixture_loads() {
        let items: Vec<DecodeItem> = [10.0, 7.0, 5.0, 3.0]
            .iter()
            .enumerate()
            .map(|(i, &w)| DecodeItem { id: i as u64, workload: w, arrival: i as f64 })
            .collect();
        let mut instances =
            vec![NodeState::new(0, NodeRole::Decode), NodeState::new(1, NodeRole::Decode)];
        let got = schedule_decode_lpt(&items, &mut instances).unwrap();
        assert_eq!(instances[0].accumulated_workload, 13.0);
        assert_eq!(instances[1].accumulated_workload, 12.0);
        // 10 -> A, 7 -> B, 5 -> B, 3 -> A.
        assert_eq!(got.iter().map(|a| a.instance).collect::<Vec<_>>(), vec![0, 1, 1, 0]);
    }

    #[test]
    fn lone_instance_gets_the_single_request() {
        let items = vec![DecodeItem { id: 9, workload: 42.0, arrival: 0.0 }];
        let mut instances = vec![NodeState::new(0, NodeRole::Decode)];
        let got = schedule_decode_lpt(&items, &mut instances).unwrap();
        assert_eq!(got[0].instance, 0);
        assert!(schedule_decode_lpt(&items, &mut []).is_err());
    }

    /// Brute-force optimal makespan by trying every assignment.
    fn opt_makespan(workloads: &[f64], machines: usize) -> f64 {
        let n = workloads.len();
        let mut best = f64::INFINITY;
        let mut assign = vec![0usize; n];
        loop {
            let mut loads = vec![0.0; machines];
            for (i, &m) in assign.iter().enumerate() {
                loads[m] += workloads[i];
            }
            best = best.min(loads.iter().cloned().fold(0.0, f64::max));
            // Odometer increment.
            let mut i = 0;
            loop {
                if i == n {
                    return best;
                }
                assign[i] += 1;
                if assign[i] < machines {
                    break;
                }
                assign[i] = 0;
                i += 1;
            }
        }
    }

    #[test]
    fn lpt_respects_classical_bound_on_random_instances() {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(5);
        for _ in 0..60 {
            let n = rng.random_range(1..=8);
            let m: usize = rng.random_range(1..=3);
            let workloads: Vec<f64> =
                (0..n).map(|_| rng.random_range(1.0..20.0f64).round()).collect();
            let items: Vec<DecodeItem> = workloads
                .iter()
                .enumerate()
                .map(|(i, &w)| DecodeItem { id: i as u64, workload: w, arrival: 0.0 })
                .collect();
            let mut instances: Vec<NodeState> =
                (0..m).map(|i| NodeState::new(i, NodeRole::Decode)).collect();
            schedule_decode_lpt(&items, &mut instances).unwrap();
            let lpt = instances
                .iter()
                .map(|i| i.accumulated_workload)
                .fold(0.0, f64::max);
            let opt = opt_makespan(&workloads, m);
            let bound = (4.0 / 3.0 - 1.0 / (3.0 * m as f64)) * opt;
            assert!(lpt <= bound + 1e-9, "LPT {lpt} > bound {bound} (opt {opt})");
        }
    }

    #[test]
    fn zero_hold_is_immediate_dispatch() {
        let cfg = ProxyConfig { hold_max: 0.0, ..ProxyConfig::default() };
        let tree = PrefixTree::new(1000);
        let nodes = vec![NodeState::new(0, NodeRole::Prefill)];
        let queue: Vec<QueuedRequest> = (0..3)
            .map(|id| QueuedRequest {
                id,
                arrival: id as f64,
                prompt: Some(seq(&[1, 2])),
                workload: 10.0,
            })
            .collect();
        let out = defer_and_resort(queue, QueueKind::Prefill, &nodes, &tree, 2.0, &cfg);
        assert_eq!(out.dispatch.len(), 3);
        assert!(out.retained.is_empty());
    }

    #[test]
    fn far_boundary_young_request_is_retained() {
        let cfg = ProxyConfig { hold_max: 10.0, lookahead: 0.5, ..ProxyConfig::default() };
        let tree = PrefixTree::new(1000);
        let mut node = NodeState::new(0, NodeRole::Prefill);
        node.last_batch_start = 0.0;
        node.batch_cycle_est = 5.0; // next boundary at t=5, beyond horizon
        let queue = vec![QueuedRequest {
            id: 1,
            arrival: 0.0,
            prompt: Some(seq(&[1])),
            workload: 1.0,
        }];
        let out = defer_and_resort(queue, QueueKind::Prefill, &[node], &tree, 1.0, &cfg);
        assert!(out.dispatch.is_empty());
        assert_eq!(out.retained.len(), 1);
    }

    #[test]
    fn boundary_within_horizon_releases() {
        let cfg = ProxyConfig { hold_max: 10.0, lookahead: 0.5, ..ProxyConfig::default() };
        let tree = PrefixTree::new(1000);
        let mut node = NodeState::new(0, NodeRole::Prefill);
        node.last_batch_start = 0.8;
        node.batch_cycle_est = 0.5; // next boundary at 1.3, inside [1.0, 1.5]
        let queue = vec![QueuedRequest {
            id: 1,
            arrival: 0.9,
            prompt: Some(seq(&[1])),
            workload: 1.0,
        }];
        let out = defer_and_resort(queue, QueueKind::Prefill, &[node], &tree, 1.0, &cfg);
        assert_eq!(out.dispatch.len(), 1);
    }

    #[test]
    fn defer_partitions_the_queue() {
        let cfg = ProxyConfig { hold_max: 2.0, lookahead: 0.1, ..ProxyConfig::default() };
        let tree = PrefixTree::new(1000);
        let mut node = NodeState::new(0, NodeRole::Decode);
        node.batch_cycle_est = 50.0;
        node.last_batch_start = 0.0;
        let queue: Vec<QueuedRequest> = (0..6)
            .map(|id| QueuedRequest {
                id,
                arrival: id as f64,
                prompt: None,
                workload: (10 - id) as f64,
            })
            .collect();
        let out = defer_and_resort(queue, QueueKind::Decode, &[node], &tree, 3.0, &cfg);
        let mut ids: Vec<u64> =
            out.dispatch.iter().chain(out.retained.iter()).map(|q| q.id).collect();
        ids.sort_unstable();
        assert_eq!(ids, vec![0, 1, 2, 3, 4, 5], "dispatch and retained must partition the queue");
        // Aged out: arrivals 0 and 1 (now - arrival >= 2).
        assert_eq!(out.dispatch.iter().map(|q| q.id).collect::<Vec<_>>(), vec![0, 1]);
        // Retained sorted by workload descending.
        let w: Vec<f64> = out.retained.iter().map(|q| q.workload).collect();
        assert!(w.windows(2).all(|p| p[0] >= p[1]));
    }

    #[test]
    fn lifecycle_full_pass_has_monotone_timestamps() {
        use LifecycleEvent::*;
        let mut r = Request::new(1, vec![1, 2, 3], Some(4), 0.0);
        let events = [
            TokenizeComplete,
            ApcMatchComplete,
            PrefillDispatched,
            PrefillStarted,
            PrefillCompleted,
            DecodeDispatched,
            DecodeStarted,
        ];
        for (i, &e) in events.iter().enumerate() {
            advance_lifecycle(&mut r, e, 0.1 * (i + 1) as f64).unwrap();
        }
        assert_eq!(r.phase(), RequestPhase::DecodeRunning);
        r.record_token(1.0).unwrap();
        assert_eq!(r.ttft, Some(1.0));
        r.record_token(1.1).unwrap();
        assert!((r.tpot_samples[0] - 0.1).abs() < 1e-12);
        advance_lifecycle(&mut r, Completed, 1.2).unwrap();
        assert_eq!(r.phase(), RequestPhase::Done);
        let stamps = r.timestamps();
        assert_eq!(stamps.len(), 9);
        assert!(stamps.windows(2).all(|w| w[0].1 <= w[1].1));
    }

    #[test]
    fn illegal_transitions_are_protocol_violations() {
        let mut r = Request::new(1, vec![1], None, 0.0);
        assert!(matches!(
            advance_lifecycle(&mut r, LifecycleEvent::PrefillStarted, 1.0),
            Err(Error::ProtocolViolation(_))
        ));
        // Drive to Done, then poke it again.
        use LifecycleEvent::*;
        for e in [
            TokenizeComplete,
            ApcMatchComplete,
            PrefillDispatched,
            PrefillStarted,
            PrefillCompleted,
            DecodeDispatched,
            DecodeStarted,
            Completed,
        ] {
            advance_lifecycle(&mut r, e, 1.0).unwrap();
        }
        for e in [TokenizeComplete, Completed, DecodeStarted] {
            assert!(matches!(
                advance_lifecycle(&mut r, e, 2.0),
                Err(Error::ProtocolViolation(_))
            ));
        }
        assert!(r.record_token(2.0).is_err(), "tokens only while decode-running");
    }
}
