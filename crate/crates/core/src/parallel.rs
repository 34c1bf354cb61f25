//! Domain-decomposed message passing: one worker thread per rectangular
//! subdomain, with halo messages handed over through per-pair mailboxes.

use std::collections::BTreeMap;
use std::sync::{Barrier, Mutex};

use crate::error::{Error, Result};
use crate::graph::FactorGraph;
use crate::grid::GridSpec;
use crate::mp::{finish_run, reduce_sweep, Kernel, MessageStore, NodeUpdate, RunOutcome, Status, StopRule};
use crate::operator::Hyperparams;

/// Wire size of one message: two `f64` coefficients.
pub const BYTES_PER_MESSAGE: usize = 2 * std::mem::size_of::<f64>();

/// Block decomposition of a grid into `px * py` rectangles.
#[derive(Debug, Clone, PartialEq)]
pub struct Partition {
    px: usize,
    py: usize,
    ownership: Vec<usize>,
    owned: Vec<Vec<usize>>,
    halo_edges: BTreeMap<(usize, usize), Vec<(usize, usize)>>,
}

/// Start offsets of `parts` contiguous blocks covering `len`, sizes differing by at most one.
fn block_starts(len: usize, parts: usize) -> Vec<usize> {
    let (base, extra) = (len / parts, len % parts);
    let mut starts = Vec::with_capacity(parts + 1);
    let mut at = 0;
    for p in 0..parts {
        starts.push(at);
        at += base + usize::from(p < extra);
    }
    starts.push(len);
    starts
}

fn block_of(starts: &[usize], x: usize) -> usize {
    starts.partition_point(|&s| s <= x) - 1
}

/// Split `grid` into `px` columns of blocks and `py` rows of blocks.
pub fn partition(grid: &GridSpec, graph: &FactorGraph, px: usize, py: usize) -> Result<Partition> {
    if px == 0 || py == 0 || px > grid.nx() || py > grid.ny() {
        return Err(Error::Partition(format!("cannot split a {}x{} grid into {px}x{py} blocks", grid.nx(), grid.ny())));
    }
    if graph.len() != grid.len() {
        return Err(Error::Dimension { expected: grid.len(), got: graph.len() });
    }
    let xs = block_starts(grid.nx(), px);
    let ys = block_starts(grid.ny(), py);
    let mut ownership = Vec::with_capacity(grid.len());
    let mut owned = vec![Vec::new(); px * py];
    for node in 0..grid.len() {
        let (i, j) = grid.coords(node);
        let id = block_of(&ys, j) * px + block_of(&xs, i);
        ownership.push(id);
        owned[id].push(node);
    }
    let mut halo_edges: BTreeMap<(usize, usize), Vec<(usize, usize)>> = BTreeMap::new();
    for i in 0..graph.len() {
        for &(j, _) in graph.neighbors(i) {
            let (from, to) = (ownership[i], ownership[j]);
            if from != to {
                halo_edges.entry((from, to)).or_default().push((i, j));
            }
        }
    }
    Ok(Partition { px, py, ownership, owned, halo_edges })
}

impl Partition {
    pub fn px(&self) -> usize {
        self.px
    }

    pub fn py(&self) -> usize {
        self.py
    }

    pub fn subdomains(&self) -> usize {
        self.px * self.py
    }

    pub fn owner(&self, node: usize) -> usize {
        self.ownership[node]
    }

    pub fn ownership(&self) -> &[usize] {
        &self.ownership
    }

    /// Nodes of subdomain `id`, ascending.
    pub fn owned(&self, id: usize) -> &[usize] {
        &self.owned[id]
    }

    /// Directed edges `(i, j)` keyed by `(owner(i), owner(j))`, for owners that differ.
    pub fn halo_edges(&self) -> &BTreeMap<(usize, usize), Vec<(usize, usize)>> {
        &self.halo_edges
    }

    pub fn directed_halo_edges(&self) -> usize {
        self.halo_edges.values().map(Vec::len).sum()
    }

    pub fn crossing_edges(&self) -> usize {
        self.directed_halo_edges() / 2
    }

    /// Bytes moved by one bulk exchange: both coefficients of every message on a crossing edge, in both directions.
    pub fn bytes_per_exchange(&self) -> usize {
        self.directed_halo_edges() * BYTES_PER_MESSAGE
    }
}

/// Communication statistics of a partitioned run.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Traffic {
    pub sweeps: usize,
    pub exchanges: usize,
    pub messages: usize,
    pub bytes: usize,
    pub subdomain_iterations: Vec<usize>,
}

#[derive(Debug, Clone)]
pub struct PartitionedOutcome {
    pub outcome: RunOutcome,
    pub traffic: Traffic,
}

/// Local state of one worker. Rows `0..own` are owned nodes, the rest are
/// ghost copies of remote nodes whose messages flow into this subdomain.
struct Subdomain {
    id: usize,
    own: usize,
    rows: Vec<usize>,
    precision: Vec<f64>,
    shift: Vec<f64>,
    weights: Vec<f64>,
    source: Vec<usize>,
    a: Vec<f64>,
    b: Vec<f64>,
    /// Mailbox index and local flat slots to publish, in halo-edge order.
    outbox: Vec<(usize, Vec<usize>)>,
    /// Mailbox index and ghost slots to fill, in halo-edge order.
    inbox: Vec<(usize, Vec<usize>)>,
}

fn build_subdomains(graph: &FactorGraph, part: &Partition, init: &MessageStore) -> Vec<Subdomain> {
    let layout = init.layout();
    let w = layout.width();
    let (ga, gb) = init.raw();
    let pair_index: BTreeMap<(usize, usize), usize> =
        part.halo_edges.keys().enumerate().map(|(k, &pair)| (pair, k)).collect();
    (0..part.subdomains())
        .map(|id| {
            let mut rows = part.owned(id).to_vec();
            let own = rows.len();
            let mut local: BTreeMap<usize, usize> = rows.iter().enumerate().map(|(r, &g)| (g, r)).collect();
            for &g in part.owned(id) {
                for &(j, _) in graph.neighbors(g) {
                    if part.owner(j) != id && !local.contains_key(&j) {
                        local.insert(j, rows.len());
                        rows.push(j);
                    }
                }
            }
            let sentinel = rows.len() * w;
            let mut weights = vec![0.0; own * w];
            let mut source = vec![sentinel; own * w];
            for (r, &g) in rows[..own].iter().enumerate() {
                for s in 0..w {
                    if let Some(j) = layout.target(g, s) {
                        weights[r * w + s] = layout.weight(g, s);
                        source[r * w + s] = local[&j] * w + layout.reverse_slot(s);
                    }
                }
            }
            let mut a = Vec::with_capacity(sentinel + 1);
            let mut b = Vec::with_capacity(sentinel + 1);
            for &g in &rows {
                a.extend_from_slice(&ga[g * w..(g + 1) * w]);
                b.extend_from_slice(&gb[g * w..(g + 1) * w]);
            }
            a.push(0.0);
            b.push(0.0);
            let slot_of = |i: usize, j: usize| local[&i] * w + layout.slot(i, j).expect("halo edge is a graph edge");
            let mut outbox = Vec::new();
            let mut inbox = Vec::new();
            for (&(from, to), edges) in &part.halo_edges {
                if from == id {
                    outbox.push((pair_index[&(from, to)], edges.iter().map(|&(i, j)| slot_of(i, j)).collect()));
                } else if to == id {
                    inbox.push((pair_index[&(from, to)], edges.iter().map(|&(i, j)| slot_of(i, j)).collect()));
                }
            }
            Subdomain {
                id,
                own,
                precision: rows[..own].iter().map(|&g| graph.node_precision()[g]).collect(),
                shift: rows[..own].iter().map(|&g| graph.node_shift()[g]).collect(),
                rows,
                weights,
                source,
                a,
                b,
                outbox,
                inbox,
            }
        })
        .collect()
}

/// Shared coordination state; each field has a single writer per phase.
struct Shared {
    barrier: Barrier,
    reports: Vec<Mutex<Vec<NodeUpdate>>>,
    mail: Vec<Mutex<Vec<f64>>>,
    decision: Mutex<Option<Status>>,
}

struct WorkerResult {
    iterations: usize,
    messages_sent: usize,
    stop: Option<(StopRule, Status)>,
}

/// Run message passing with one thread per subdomain, exchanging halo
/// messages every `exchange_period` sweeps.
///
/// With `exchange_period == 1` every sweep sees exactly the messages the
/// serial sweep would, and per-node deltas are reduced in global node order,
/// so the result is bitwise identical to [`crate::mp::run`].
pub fn run_partitioned(
    graph: &FactorGraph,
    part: &Partition,
    hyper: &Hyperparams,
    exchange_period: usize,
    init: Option<MessageStore>,
) -> Result<PartitionedOutcome> {
    hyper.validate()?;
    if exchange_period == 0 {
        return Err(Error::Parameter("exchange period must be at least 1".into()));
    }
    if part.ownership.len() != graph.len() {
        return Err(Error::Dimension { expected: graph.len(), got: part.ownership.len() });
    }
    let init = match init {
        Some(store) => {
            if store.layout().len() != graph.len() || store.layout().directed_edges() != graph.directed_edge_count() {
                return Err(Error::Parameter("message store does not match the graph".into()));
            }
            store
        }
        None => MessageStore::new(graph),
    };
    let layout = init.layout().clone();
    let w = layout.width();
    let mut subs = build_subdomains(graph, part, &init);
    let shared = Shared {
        barrier: Barrier::new(subs.len()),
        reports: subs.iter().map(|_| Mutex::new(Vec::new())).collect(),
        mail: part.halo_edges.values().map(|e| Mutex::new(Vec::with_capacity(2 * e.len()))).collect(),
        decision: Mutex::new(None),
    };

    let results: Vec<Result<WorkerResult>> = std::thread::scope(|scope| {
        let handles: Vec<_> = subs
            .iter_mut()
            .map(|sub| {
                let shared = &shared;
                scope.spawn(move || worker(sub, graph, part, hyper, exchange_period, w, shared))
            })
            .collect();
        handles.into_iter().map(|h| h.join().map_err(|_| Error::Solver("subdomain worker panicked".into()))).collect()
    });
    let results: Vec<WorkerResult> = results.into_iter().collect::<Result<_>>()?;

    let (stop, status) = results[0].stop.clone().expect("leader reports the stop state");
    let sweeps = results[0].iterations;
    let exchanges = sweeps / exchange_period;
    let messages: usize = results.iter().map(|r| r.messages_sent).sum();

    let n = graph.len();
    let mut a = vec![0.0; n * w + 1];
    let mut b = vec![0.0; n * w + 1];
    for sub in &subs {
        for (r, &g) in sub.rows[..sub.own].iter().enumerate() {
            a[g * w..(g + 1) * w].copy_from_slice(&sub.a[r * w..(r + 1) * w]);
            b[g * w..(g + 1) * w].copy_from_slice(&sub.b[r * w..(r + 1) * w]);
        }
    }
    let store = MessageStore::from_raw(layout, a, b);
    let outcome = finish_run(graph, store, status, sweeps, &stop, hyper.c)?;
    Ok(PartitionedOutcome {
        outcome,
        traffic: Traffic {
            sweeps,
            exchanges,
            messages,
            bytes: messages * BYTES_PER_MESSAGE,
            subdomain_iterations: results.iter().map(|r| r.iterations).collect(),
        },
    })
}

fn worker(
    sub: &mut Subdomain,
    graph: &FactorGraph,
    part: &Partition,
    hyper: &Hyperparams,
    period: usize,
    w: usize,
    shared: &Shared,
) -> WorkerResult {
    let leader = sub.id == 0;
    let mut stop = leader.then(|| StopRule::new(hyper.tau));
    let mut global = if leader { vec![NodeUpdate::default(); graph.len()] } else { Vec::new() };
    let mut next_a = sub.a.clone();
    let mut next_b = sub.b.clone();
    let mut updates = vec![NodeUpdate::default(); sub.own];
    let own_len = sub.own * w;
    let mut iterations = 0;
    let mut messages_sent = 0;
    let mut final_status = Status::MaxIters;

    for t in 1..=hyper.max_iters {
        if w > 0 {
            let kernel = Kernel {
                width: w,
                c: hyper.c,
                eta: hyper.eta,
                node_precision: &sub.precision,
                node_shift: &sub.shift,
                weights: &sub.weights,
                source: &sub.source,
                prev_a: &sub.a,
                prev_b: &sub.b,
            };
            for (r, ((oa, ob), u)) in
                next_a[..own_len].chunks_mut(w).zip(next_b[..own_len].chunks_mut(w)).zip(updates.iter_mut()).enumerate()
            {
                *u = kernel.update_node(r, oa, ob);
            }
            // Ghost rows only change on exchange.
            next_a[own_len..].copy_from_slice(&sub.a[own_len..]);
            next_b[own_len..].copy_from_slice(&sub.b[own_len..]);
            std::mem::swap(&mut sub.a, &mut next_a);
            std::mem::swap(&mut sub.b, &mut next_b);
        } else {
            for (r, u) in updates.iter_mut().enumerate() {
                *u = NodeUpdate { mean: sub.shift[r] / sub.precision[r], ..NodeUpdate::default() };
            }
        }
        iterations = t;
        shared.reports[sub.id].lock().expect("report lock").clone_from(&updates);

        let exchange = t % period == 0;
        if exchange {
            for (pair, slots) in &sub.outbox {
                let mut mail = shared.mail[*pair].lock().expect("mailbox lock");
                mail.clear();
                for &k in slots {
                    mail.push(sub.a[k]);
                    mail.push(sub.b[k]);
                }
                messages_sent += slots.len();
            }
        }
        shared.barrier.wait();

        if let Some(rule) = stop.as_mut() {
            for (id, report) in shared.reports.iter().enumerate() {
                let report = report.lock().expect("report lock");
                for (&g, u) in part.owned(id).iter().zip(report.iter()) {
                    global[g] = *u;
                }
            }
            let stats = reduce_sweep(&global, graph.directed_edge_count());
            *shared.decision.lock().expect("decision lock") = rule.observe(t, stats);
        }
        if exchange {
            for (pair, slots) in &sub.inbox {
                let mail = shared.mail[*pair].lock().expect("mailbox lock");
                for (m, &k) in slots.iter().enumerate() {
                    sub.a[k] = mail[2 * m];
                    sub.b[k] = mail[2 * m + 1];
                }
            }
        }
        shared.barrier.wait();

        if let Some(status) = shared.decision.lock().expect("decision lock").clone() {
            final_status = status;
            break;
        }
    }
    WorkerResult { iterations, messages_sent, stop: stop.map(|rule| (rule, final_status)) }
}
