//! Re-weighted Gaussian message passing with damping and early stopping.
//!
//! Messages are stored in information form: a message `(a, b)` from node `k`
//! to node `i` contributes `exp(-1/2 a f_i^2 + b f_i)` to the belief at `i`.
//! The marginal at `i` therefore has precision `P_ii + c * sum_k a_ki` and
//! mean `(h_i + c * sum_k b_ki) / precision`.
//!
//! The store keeps, for every node, one fixed-width row of slots keyed by the
//! linear offset to the neighbour. Slot `s` of node `i` holds the *outgoing*
//! message `i -> i + offset[s]`, so during a sweep each node writes only its own
//! row and reads its neighbours' rows from the previous iteration.

use std::sync::Arc;

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::graph::FactorGraph;
use crate::operator::Hyperparams;

/// Magnitude beyond which a marginal mean is treated as a divergence.
pub const DIVERGENCE_MEAN_LIMIT: f64 = 1e8;

/// Gaussian message in information form.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct Message {
    /// Precision contribution.
    pub a: f64,
    /// Information (linear) contribution.
    pub b: f64,
}

impl Message {
    pub const INIT: Message = Message { a: 0.0, b: 1e-8 };

    pub fn new(a: f64, b: f64) -> Self {
        Self { a, b }
    }

    pub fn is_finite(&self) -> bool {
        self.a.is_finite() && self.b.is_finite()
    }
}

/// New message `i -> j` from node `i`'s potential and its other incoming messages.
///
/// `others` holds the messages `k -> i` for every neighbour `k != j`, and
/// `reverse` is the message `j -> i`, which the re-weighting folds back in
/// with weight `c - 1`.
pub fn compute_outgoing_message(
    c: f64,
    node_precision: f64,
    node_shift: f64,
    others: &[Message],
    reverse: Message,
    weight: f64,
) -> Result<Message> {
    let (sa, sb) = others.iter().fold((0.0, 0.0), |(sa, sb), m| (sa + m.a, sb + m.b));
    let alpha = node_precision + c * sa + (c - 1.0) * reverse.a;
    let beta = -(node_shift + c * sb + (c - 1.0) * reverse.b);
    if weight == 0.0 {
        return Ok(Message::default());
    }
    if alpha == 0.0 {
        return Err(Error::SingularUpdate { node: usize::MAX });
    }
    let w = weight / c;
    Ok(Message { a: -(w * w) / alpha, b: beta * w / alpha })
}

/// Convex combination `(1 - eta) old + eta new`.
pub fn damped_update(old: Message, new: Message, eta: f64) -> Message {
    if eta == 1.0 {
        return new;
    }
    Message { a: (1.0 - eta) * old.a + eta * new.a, b: (1.0 - eta) * old.b + eta * new.b }
}

/// Stop once the latest mean absolute change falls below `tau` times the
/// change observed between the first and second iterations.
pub fn early_stop(reference_delta: f64, current_delta: f64, tau: f64) -> bool {
    reference_delta == 0.0 || current_delta < tau * reference_delta
}

/// Slot geometry shared by every message store built on the same graph.
#[derive(Debug, Clone, PartialEq)]
pub struct MessageLayout {
    n: usize,
    width: usize,
    offsets: Vec<isize>,
    reverse: Vec<usize>,
    /// `P_ij` per slot; zero marks an unused slot.
    weights: Vec<f64>,
    /// Flat position of the incoming message for each slot; unused slots point
    /// at the trailing zero sentinel.
    source: Vec<usize>,
    directed_edges: usize,
}

impl MessageLayout {
    pub fn new(graph: &FactorGraph) -> Self {
        let n = graph.len();
        let mut offsets: Vec<isize> =
            (0..n).flat_map(|i| graph.neighbors(i).iter().map(move |&(j, _)| j as isize - i as isize)).collect();
        offsets.sort_unstable();
        offsets.dedup();
        let width = offsets.len();
        let slot_of = |d: isize| offsets.binary_search(&d).expect("symmetric graph has mirrored offsets");
        let reverse: Vec<usize> = offsets.iter().map(|&d| slot_of(-d)).collect();
        let sentinel = n * width;
        let mut weights = vec![0.0; n * width];
        let mut source = vec![sentinel; n * width];
        for i in 0..n {
            for &(j, w) in graph.neighbors(i) {
                let s = slot_of(j as isize - i as isize);
                weights[i * width + s] = w;
                source[i * width + s] = j * width + reverse[s];
            }
        }
        Self { n, width, offsets, reverse, weights, source, directed_edges: graph.directed_edge_count() }
    }

    pub fn len(&self) -> usize {
        self.n
    }

    pub fn is_empty(&self) -> bool {
        self.n == 0
    }

    /// Slots per node.
    pub fn width(&self) -> usize {
        self.width
    }

    pub fn offsets(&self) -> &[isize] {
        &self.offsets
    }

    pub fn directed_edges(&self) -> usize {
        self.directed_edges
    }

    pub fn slot(&self, from: usize, to: usize) -> Option<usize> {
        let s = self.offsets.binary_search(&(to as isize - from as isize)).ok()?;
        self.is_valid(from, s).then_some(s)
    }

    pub fn is_valid(&self, node: usize, slot: usize) -> bool {
        self.weights[node * self.width + slot] != 0.0
    }

    pub fn weight(&self, node: usize, slot: usize) -> f64 {
        self.weights[node * self.width + slot]
    }

    pub fn reverse_slot(&self, slot: usize) -> usize {
        self.reverse[slot]
    }

    /// Target node of slot `slot` at `node`, if the slot is in use.
    pub fn target(&self, node: usize, slot: usize) -> Option<usize> {
        self.is_valid(node, slot).then(|| (node as isize + self.offsets[slot]) as usize)
    }

    pub(crate) fn weights(&self) -> &[f64] {
        &self.weights
    }

    pub(crate) fn sources(&self) -> &[usize] {
        &self.source
    }
}

/// One outgoing message per directed edge.
#[derive(Debug, Clone, PartialEq)]
pub struct MessageStore {
    layout: Arc<MessageLayout>,
    // Length `n * width + 1`; the last entry is a zero sentinel.
    a: Vec<f64>,
    b: Vec<f64>,
}

impl MessageStore {
    /// Every directed edge set to [`Message::INIT`].
    pub fn new(graph: &FactorGraph) -> Self {
        Self::filled(Arc::new(MessageLayout::new(graph)), Message::INIT)
    }

    pub fn filled(layout: Arc<MessageLayout>, init: Message) -> Self {
        let len = layout.n * layout.width;
        let mut a = vec![0.0; len + 1];
        let mut b = vec![0.0; len + 1];
        for k in 0..len {
            if layout.weights[k] != 0.0 {
                a[k] = init.a;
                b[k] = init.b;
            }
        }
        Self { layout, a, b }
    }

    pub fn layout(&self) -> &Arc<MessageLayout> {
        &self.layout
    }

    /// Message `from -> to`, if that directed edge exists.
    pub fn get(&self, from: usize, to: usize) -> Option<Message> {
        let s = self.layout.slot(from, to)?;
        Some(self.slot_message(from, s))
    }

    pub fn slot_message(&self, node: usize, slot: usize) -> Message {
        let k = node * self.layout.width + slot;
        Message { a: self.a[k], b: self.b[k] }
    }

    pub fn set_slot(&mut self, node: usize, slot: usize, m: Message) {
        debug_assert!(self.layout.is_valid(node, slot));
        let k = node * self.layout.width + slot;
        self.a[k] = m.a;
        self.b[k] = m.b;
    }

    pub fn set(&mut self, from: usize, to: usize, m: Message) -> Result<()> {
        let s = self.layout.slot(from, to).ok_or_else(|| Error::Parameter(format!("no edge {from} -> {to}")))?;
        self.set_slot(from, s, m);
        Ok(())
    }

    /// Every stored message, in slot order.
    pub fn messages(&self) -> impl Iterator<Item = (usize, usize, Message)> + '_ {
        let w = self.layout.width;
        (0..self.layout.n).flat_map(move |i| {
            (0..w).filter_map(move |s| {
                let j = self.layout.target(i, s)?;
                Some((i, j, self.slot_message(i, s)))
            })
        })
    }

    pub fn all_finite(&self) -> bool {
        self.a.iter().chain(&self.b).all(|v| v.is_finite())
    }

    pub(crate) fn raw(&self) -> (&[f64], &[f64]) {
        (&self.a, &self.b)
    }

    pub(crate) fn from_raw(layout: Arc<MessageLayout>, a: Vec<f64>, b: Vec<f64>) -> Self {
        debug_assert_eq!(a.len(), layout.n * layout.width + 1);
        Self { layout, a, b }
    }

    fn check_matches(&self, graph: &FactorGraph) -> Result<()> {
        if self.layout.n != graph.len() || self.layout.directed_edges != graph.directed_edge_count() {
            return Err(Error::Parameter("message store does not match the graph".into()));
        }
        Ok(())
    }
}

/// Per-node posterior summaries.
///
/// Means are exact at a fixed point of Gaussian message passing; on loopy
/// graphs the precisions are biased and should not be read as uncertainties.
#[derive(Debug, Clone, PartialEq)]
pub struct Marginals {
    pub mean: Vec<f64>,
    pub precision: Vec<f64>,
}

impl Marginals {
    /// Always true: loopy-graph variances are not calibrated.
    pub fn variance_is_biased(&self) -> bool {
        true
    }
}

/// Marginal means and precisions from the current messages.
pub fn compute_marginals(graph: &FactorGraph, msgs: &MessageStore, c: f64) -> Result<Marginals> {
    msgs.check_matches(graph)?;
    let layout = &msgs.layout;
    let (a, b) = msgs.raw();
    let mut mean = Vec::with_capacity(graph.len());
    let mut precision = Vec::with_capacity(graph.len());
    for i in 0..graph.len() {
        let (sa, sb) = incoming_sums(layout.sources(), a, b, i * layout.width, layout.width);
        let prec = graph.node_precision()[i] + c * sa;
        if !(prec > 0.0) {
            return Err(Error::Diverged(format!("marginal precision {prec} at node {i}")));
        }
        precision.push(prec);
        mean.push((graph.node_shift()[i] + c * sb) / prec);
    }
    Ok(Marginals { mean, precision })
}

#[inline]
fn incoming_sums(source: &[usize], a: &[f64], b: &[f64], base: usize, width: usize) -> (f64, f64) {
    let mut sa = 0.0;
    let mut sb = 0.0;
    for &src in &source[base..base + width] {
        sa += a[src];
        sb += b[src];
    }
    (sa, sb)
}

/// Read-only view that a sweep needs to update one node.
///
/// Node and slot indices are local to whichever store the view describes, so
/// the same kernel serves the whole-graph store and the subdomain stores.
pub(crate) struct Kernel<'a> {
    pub width: usize,
    pub c: f64,
    pub eta: f64,
    pub node_precision: &'a [f64],
    pub node_shift: &'a [f64],
    pub weights: &'a [f64],
    pub source: &'a [usize],
    pub prev_a: &'a [f64],
    pub prev_b: &'a [f64],
}

/// Result of updating one node's outgoing messages.
#[derive(Debug, Clone, Copy, Default)]
pub(crate) struct NodeUpdate {
    /// Sum of `|da| + |db|` over the node's outgoing messages.
    pub delta: f64,
    /// Marginal mean implied by the incoming messages before the update.
    pub mean: f64,
    pub singular: bool,
}

impl Kernel<'_> {
    #[inline]
    pub fn update_node(&self, i: usize, out_a: &mut [f64], out_b: &mut [f64]) -> NodeUpdate {
        let w = self.width;
        let base = i * w;
        let (sa, sb) = incoming_sums(self.source, self.prev_a, self.prev_b, base, w);
        let p = self.node_precision[i];
        let h = self.node_shift[i];
        let c = self.c;
        let eta = self.eta;
        // alpha = P_ii + c * (sum - reverse) + (c - 1) * reverse, likewise for beta.
        let alpha_base = p + c * sa;
        let beta_base = h + c * sb;
        let mean = beta_base / alpha_base;
        let mut delta = 0.0;
        let mut singular = false;
        for s in 0..w {
            let k = base + s;
            let weight = self.weights[k];
            if weight == 0.0 {
                out_a[s] = 0.0;
                out_b[s] = 0.0;
                continue;
            }
            let src = self.source[k];
            let alpha = alpha_base - self.prev_a[src];
            let beta = -(beta_base - self.prev_b[src]);
            if alpha == 0.0 {
                singular = true;
            }
            let wc = weight / c;
            let new_a = -(wc * wc) / alpha;
            let new_b = beta * wc / alpha;
            let old_a = self.prev_a[k];
            let old_b = self.prev_b[k];
            let (na, nb) = if eta == 1.0 {
                (new_a, new_b)
            } else {
                ((1.0 - eta) * old_a + eta * new_a, (1.0 - eta) * old_b + eta * new_b)
            };
            delta += (na - old_a).abs() + (nb - old_b).abs();
            out_a[s] = na;
            out_b[s] = nb;
        }
        NodeUpdate { delta, mean, singular }
    }
}

/// Why a run was declared divergent.
#[derive(Debug, Clone, PartialEq)]
pub enum Divergence {
    NonFinite,
    SingularUpdate { node: usize },
    MeanOverflow { node: usize, mean: f64 },
    NonPositivePrecision { node: usize },
}

impl std::fmt::Display for Divergence {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Divergence::NonFinite => f.write_str("non-finite message"),
            Divergence::SingularUpdate { node } => write!(f, "singular update at node {node}"),
            Divergence::MeanOverflow { node, mean } => write!(f, "mean {mean:e} at node {node}"),
            Divergence::NonPositivePrecision { node } => {
                write!(f, "nonpositive marginal precision at node {node}")
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum Status {
    Converged,
    MaxIters,
    Diverged(Divergence),
}

impl Status {
    pub fn is_diverged(&self) -> bool {
        matches!(self, Status::Diverged(_))
    }

    pub fn label(&self) -> &'static str {
        match self {
            Status::Converged => "converged",
            Status::MaxIters => "max_iters",
            Status::Diverged(_) => "diverged",
        }
    }
}

/// Aggregate statistics of one sweep.
#[derive(Debug, Clone, PartialEq)]
pub struct SweepStats {
    /// Mean absolute change over all directed edges and both coefficients.
    pub delta: f64,
    pub max_abs_mean: f64,
    pub divergence: Option<Divergence>,
}

pub(crate) fn reduce_sweep(updates: &[NodeUpdate], directed_edges: usize) -> SweepStats {
    let mut total = 0.0;
    let mut max_abs_mean: f64 = 0.0;
    let mut divergence = None;
    for (i, u) in updates.iter().enumerate() {
        total += u.delta;
        if divergence.is_none() {
            if u.singular {
                divergence = Some(Divergence::SingularUpdate { node: i });
            } else if !u.mean.is_finite() || u.mean.abs() > DIVERGENCE_MEAN_LIMIT {
                divergence = Some(Divergence::MeanOverflow { node: i, mean: u.mean });
            }
        }
        if u.mean.is_finite() {
            max_abs_mean = max_abs_mean.max(u.mean.abs());
        }
    }
    let delta = if directed_edges == 0 { 0.0 } else { total / (2 * directed_edges) as f64 };
    if divergence.is_none() && !delta.is_finite() {
        divergence = Some(Divergence::NonFinite);
    }
    SweepStats { delta, max_abs_mean, divergence }
}

/// Executes sweeps over a whole graph, optionally on a rayon pool.
pub struct SweepEngine {
    pool: Option<rayon::ThreadPool>,
}

impl Default for SweepEngine {
    fn default() -> Self {
        Self::serial()
    }
}

impl SweepEngine {
    pub fn serial() -> Self {
        Self { pool: None }
    }

    /// Data-parallel sweeps over node chunks. Results are bitwise identical to
    /// the serial engine because every node is updated by the same kernel and
    /// per-node deltas are reduced in node order.
    pub fn threaded(threads: usize) -> Result<Self> {
        if threads <= 1 {
            return Ok(Self::serial());
        }
        let pool = rayon::ThreadPoolBuilder::new()
            .num_threads(threads)
            .build()
            .map_err(|e| Error::Parameter(format!("thread pool: {e}")))?;
        Ok(Self { pool: Some(pool) })
    }

    /// One Jacobi sweep: every message recomputed from `msgs`, result in a new store.
    pub fn sweep(
        &self,
        graph: &FactorGraph,
        msgs: &MessageStore,
        hyper: &Hyperparams,
    ) -> Result<(MessageStore, SweepStats)> {
        msgs.check_matches(graph)?;
        let mut next = msgs.clone();
        let stats = self.sweep_into(graph, msgs, &mut next, hyper.c, hyper.eta);
        Ok((next, stats))
    }

    fn sweep_into(
        &self,
        graph: &FactorGraph,
        prev: &MessageStore,
        next: &mut MessageStore,
        c: f64,
        eta: f64,
    ) -> SweepStats {
        let layout = &prev.layout;
        let w = layout.width;
        let n = layout.n;
        let kernel = Kernel {
            width: w,
            c,
            eta,
            node_precision: graph.node_precision(),
            node_shift: graph.node_shift(),
            weights: layout.weights(),
            source: layout.sources(),
            prev_a: &prev.a,
            prev_b: &prev.b,
        };
        let mut updates = vec![NodeUpdate { delta: 0.0, mean: 0.0, singular: false }; n];
        if w == 0 {
            for (i, u) in updates.iter_mut().enumerate() {
                u.mean = graph.node_shift()[i] / graph.node_precision()[i];
            }
            return reduce_sweep(&updates, 0);
        }
        let body_a = &mut next.a[..n * w];
        let body_b = &mut next.b[..n * w];
        match &self.pool {
            None => {
                for (i, ((oa, ob), u)) in
                    body_a.chunks_mut(w).zip(body_b.chunks_mut(w)).zip(updates.iter_mut()).enumerate()
                {
                    *u = kernel.update_node(i, oa, ob);
                }
            }
            Some(pool) => {
                const CHUNK: usize = 256;
                pool.install(|| {
                    body_a
                        .par_chunks_mut(w * CHUNK)
                        .zip(body_b.par_chunks_mut(w * CHUNK))
                        .zip(updates.par_chunks_mut(CHUNK))
                        .enumerate()
                        .for_each(|(chunk, ((ca, cb), cu))| {
                            let start = chunk * CHUNK;
                            for (k, ((oa, ob), u)) in
                                ca.chunks_mut(w).zip(cb.chunks_mut(w)).zip(cu.iter_mut()).enumerate()
                            {
                                *u = kernel.update_node(start + k, oa, ob);
                            }
                        });
                });
            }
        }
        reduce_sweep(&updates, layout.directed_edges)
    }

    /// Iterate until early stop, divergence or the iteration cap.
    pub fn run(&self, graph: &FactorGraph, hyper: &Hyperparams, init: Option<MessageStore>) -> Result<RunOutcome> {
        hyper.validate()?;
        let mut current = match init {
            Some(store) => {
                store.check_matches(graph)?;
                store
            }
            None => MessageStore::new(graph),
        };
        let mut next = current.clone();
        let mut stop = StopRule::new(hyper.tau);
        let mut status = Status::MaxIters;
        let mut iterations = 0;
        for t in 1..=hyper.max_iters {
            let stats = self.sweep_into(graph, &current, &mut next, hyper.c, hyper.eta);
            std::mem::swap(&mut current, &mut next);
            iterations = t;
            if let Some(s) = stop.observe(t, stats) {
                status = s;
                break;
            }
        }
        finish_run(graph, current, status, iterations, &stop, hyper.c)
    }
}

/// Global early-stop bookkeeping shared by the serial and partitioned runs.
#[derive(Debug, Clone)]
pub(crate) struct StopRule {
    tau: f64,
    pub reference: Option<f64>,
    pub last_delta: f64,
}

impl StopRule {
    pub fn new(tau: f64) -> Self {
        Self { tau, reference: None, last_delta: f64::NAN }
    }

    /// Terminal status after sweep `t`, if the run should end here.
    pub fn observe(&mut self, t: usize, stats: SweepStats) -> Option<Status> {
        self.last_delta = stats.delta;
        if let Some(d) = stats.divergence {
            return Some(Status::Diverged(d));
        }
        if t == 2 {
            self.reference = Some(stats.delta);
        }
        match self.reference {
            Some(r) if early_stop(r, stats.delta, self.tau) => Some(Status::Converged),
            _ => None,
        }
    }
}

pub(crate) fn finish_run(
    graph: &FactorGraph,
    current: MessageStore,
    mut status: Status,
    iterations: usize,
    stop: &StopRule,
    c: f64,
) -> Result<RunOutcome> {
    let marginals = match &status {
        Status::Diverged(_) => raw_marginals(graph, &current, c),
        _ => match first_nonpositive_precision(graph, &current, c) {
            Some(node) => {
                status = Status::Diverged(Divergence::NonPositivePrecision { node });
                raw_marginals(graph, &current, c)
            }
            None => compute_marginals(graph, &current, c)?,
        },
    };
    if !status.is_diverged() && !current.all_finite() {
        status = Status::Diverged(Divergence::NonFinite);
    }
    Ok(RunOutcome {
        marginals,
        messages: current,
        iterations,
        status,
        reference_delta: stop.reference,
        final_delta: stop.last_delta,
    })
}

fn first_nonpositive_precision(graph: &FactorGraph, msgs: &MessageStore, c: f64) -> Option<usize> {
    let m = raw_marginals(graph, msgs, c);
    m.precision.iter().position(|&p| !(p > 0.0))
}

/// Marginals without the positivity check, used to report diverged runs.
fn raw_marginals(graph: &FactorGraph, msgs: &MessageStore, c: f64) -> Marginals {
    let layout = &msgs.layout;
    let (a, b) = msgs.raw();
    let (mean, precision) = (0..graph.len())
        .map(|i| {
            let (sa, sb) = incoming_sums(layout.sources(), a, b, i * layout.width, layout.width);
            let prec = graph.node_precision()[i] + c * sa;
            ((graph.node_shift()[i] + c * sb) / prec, prec)
        })
        .unzip();
    Marginals { mean, precision }
}

/// Outcome of [`run`].
#[derive(Debug, Clone)]
pub struct RunOutcome {
    pub marginals: Marginals,
    /// Final messages, reusable as a warm start.
    pub messages: MessageStore,
    pub iterations: usize,
    pub status: Status,
    /// Mean absolute change between iterations one and two.
    pub reference_delta: Option<f64>,
    pub final_delta: f64,
}

/// One serial Jacobi sweep.
pub fn sweep(graph: &FactorGraph, msgs: &MessageStore, hyper: &Hyperparams) -> Result<(MessageStore, SweepStats)> {
    SweepEngine::serial().sweep(graph, msgs, hyper)
}

/// Serial message passing from `init`, or from [`Message::INIT`] everywhere.
pub fn run(graph: &FactorGraph, hyper: &Hyperparams, init: Option<MessageStore>) -> Result<RunOutcome> {
    SweepEngine::serial().run(graph, hyper, init)
}
