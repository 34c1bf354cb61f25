//! Coarse-to-fine warm starts for message passing.
//!
//! Each level discretizes the same continuous prior at its own spacing; the
//! converged messages of one level seed the next finer level.

use std::sync::Arc;

use crate::error::{Error, Result};
use crate::graph::{prior_shift_from_mean, FactorGraph, Observation, ObservationSet};
use crate::grid::GridSpec;
use crate::mp::{Marginals, Message, MessageLayout, MessageStore, Status, SweepEngine};
use crate::operator::{build_precision, Hyperparams};
use crate::oracle::Field;

/// Default minimum dimension of the coarsest level.
pub const DEFAULT_BASE_DIM: usize = 32;

/// Grids from coarsest to finest.
#[derive(Debug, Clone, PartialEq)]
pub struct LevelPlan {
    levels: Vec<GridSpec>,
    base_min_dim: usize,
}

impl LevelPlan {
    pub fn levels(&self) -> &[GridSpec] {
        &self.levels
    }

    pub fn base_min_dim(&self) -> usize {
        self.base_min_dim
    }

    pub fn finest(&self) -> &GridSpec {
        self.levels.last().expect("plan has at least one level")
    }

    pub fn depth(&self) -> usize {
        self.levels.len()
    }

    /// Plan with exactly `count` levels ending at `target`.
    pub fn with_level_count(target: &GridSpec, count: usize) -> Result<Self> {
        if count == 0 {
            return Err(Error::Parameter("a level plan needs at least one level".into()));
        }
        let mut levels = vec![*target];
        for _ in 1..count {
            let next = levels.last().unwrap().coarsen()?;
            levels.push(next);
        }
        levels.reverse();
        let base_min_dim = levels[0].nx().min(levels[0].ny());
        Ok(Self { levels, base_min_dim })
    }

    pub fn single(target: &GridSpec) -> Self {
        Self { levels: vec![*target], base_min_dim: target.nx().min(target.ny()) }
    }
}

/// Coarsen `target` while the smaller dimension stays at least `base_min_dim`.
pub fn build_hierarchy(target: &GridSpec, base_min_dim: usize) -> LevelPlan {
    let mut levels = vec![*target];
    loop {
        let last = levels.last().unwrap();
        match last.coarsen() {
            Ok(next) if next.nx().min(next.ny()) >= base_min_dim => levels.push(next),
            _ => break,
        }
    }
    levels.reverse();
    LevelPlan { levels, base_min_dim }
}

/// Number of halvings separating `level` from `finest`.
pub fn level_depth(finest: &GridSpec, level: &GridSpec) -> Result<u32> {
    let mut g = *finest;
    let mut k = 0;
    loop {
        if g.same_shape(level) {
            return Ok(k);
        }
        g = g.coarsen().map_err(|_| {
            Error::Grid(format!("{}x{} is not a coarsening of {}x{}", level.nx(), level.ny(), finest.nx(), finest.ny()))
        })?;
        k += 1;
    }
}

/// Observations whose finest-grid node sits exactly on a `level` node.
pub fn restrict_observations(obs: &ObservationSet, finest: &GridSpec, level: &GridSpec) -> Result<ObservationSet> {
    let k = level_depth(finest, level)?;
    let stride = 1usize << k;
    let mut out = ObservationSet::default();
    for o in obs.entries() {
        if o.node >= finest.len() {
            return Err(Error::Observation(format!("node {} outside the finest grid", o.node)));
        }
        let (i, j) = finest.coords(o.node);
        if i % stride == 0 && j % stride == 0 {
            out.push(Observation { node: level.linear_index(i >> k, j >> k)?, ..*o });
        }
    }
    Ok(out)
}

/// Initialise fine-level messages from the converged coarse-level messages.
///
/// A fine edge copies the coarse message between its endpoints' parents when
/// those parents differ and are adjacent on the coarse level; every other
/// fine edge starts from [`Message::INIT`].
pub fn upscale_messages(
    coarse: &MessageStore,
    coarse_grid: &GridSpec,
    fine_layout: Arc<MessageLayout>,
    fine_grid: &GridSpec,
) -> Result<MessageStore> {
    if level_depth(fine_grid, coarse_grid)? != 1 {
        return Err(Error::Grid("coarse grid is not one level below the fine grid".into()));
    }
    if coarse.layout().len() != coarse_grid.len() || fine_layout.len() != fine_grid.len() {
        return Err(Error::Dimension { expected: fine_grid.len(), got: fine_layout.len() });
    }
    let parent = |node: usize| {
        let (i, j) = fine_grid.coords(node);
        (j / 2) * coarse_grid.nx() + i / 2
    };
    let width = fine_layout.width();
    let mut out = MessageStore::filled(fine_layout.clone(), Message::INIT);
    for node in 0..fine_grid.len() {
        let from = parent(node);
        for s in 0..width {
            let Some(target) = fine_layout.target(node, s) else { continue };
            let to = parent(target);
            if from == to {
                continue;
            }
            if let Some(m) = coarse.get(from, to) {
                out.set_slot(node, s, m);
            }
        }
    }
    Ok(out)
}

/// The Matérn GMRF prior, discretized on demand at any level.
#[derive(Debug, Clone)]
pub struct GmrfPrior {
    pub hyper: Hyperparams,
    /// Prior mean on the finest grid; zero when absent.
    pub mean: Option<Field>,
}

impl GmrfPrior {
    pub fn new(hyper: Hyperparams) -> Self {
        Self { hyper, mean: None }
    }

    pub fn with_mean(hyper: Hyperparams, mean: Field) -> Self {
        Self { hyper, mean: Some(mean) }
    }

    /// Prior factor graph on `level`, with the mean subsampled from the finest grid.
    pub fn graph_at(&self, level: &GridSpec) -> Result<FactorGraph> {
        let precision = build_precision(level, &self.hyper)?;
        let shift = match &self.mean {
            None => None,
            Some(mean) => {
                let k = level_depth(&mean.grid, level)?;
                let values: Vec<f64> = (0..level.len())
                    .map(|idx| {
                        let (i, j) = level.coords(idx);
                        mean.get(i << k, j << k)
                    })
                    .collect();
                Some(prior_shift_from_mean(&precision, &values)?)
            }
        };
        FactorGraph::from_precision(&precision, shift.as_deref())
    }
}

/// Per-level record of a multigrid run.
#[derive(Debug, Clone, PartialEq)]
pub struct LevelReport {
    pub grid: GridSpec,
    pub observations: usize,
    pub iterations: usize,
    pub status: Status,
}

#[derive(Debug, Clone)]
pub struct MultigridOutcome {
    /// Marginals of the last level run (the finest, unless a level diverged).
    pub marginals: Marginals,
    pub levels: Vec<LevelReport>,
    pub status: Status,
    /// Index into the plan of the level that diverged, if any.
    pub diverged_level: Option<usize>,
}

impl MultigridOutcome {
    pub fn finest_iterations(&self) -> usize {
        self.levels.last().map_or(0, |l| l.iterations)
    }

    pub fn total_iterations(&self) -> usize {
        self.levels.iter().map(|l| l.iterations).sum()
    }
}

/// Run message passing level by level, warm-starting each from the previous.
pub fn run_multigrid(
    prior: &dyn Fn(&GridSpec) -> Result<FactorGraph>,
    obs: &ObservationSet,
    hyper: &Hyperparams,
    plan: &LevelPlan,
    engine: &SweepEngine,
) -> Result<MultigridOutcome> {
    let finest = *plan.finest();
    obs.validate(finest.len())?;
    let mut reports = Vec::with_capacity(plan.depth());
    let mut previous: Option<(MessageStore, GridSpec)> = None;
    let mut last = None;
    for (idx, level) in plan.levels().iter().enumerate() {
        let level_obs = restrict_observations(obs, &finest, level)?;
        let graph = prior(level)?.apply_observations(&level_obs)?;
        let init = match previous.take() {
            None => None,
            Some((store, coarse_grid)) => {
                Some(upscale_messages(&store, &coarse_grid, Arc::new(MessageLayout::new(&graph)), level)?)
            }
        };
        let outcome = engine.run(&graph, hyper, init)?;
        reports.push(LevelReport {
            grid: *level,
            observations: level_obs.len(),
            iterations: outcome.iterations,
            status: outcome.status.clone(),
        });
        if outcome.status.is_diverged() {
            return Ok(MultigridOutcome {
                marginals: outcome.marginals,
                status: outcome.status,
                levels: reports,
                diverged_level: Some(idx),
            });
        }
        previous = Some((outcome.messages.clone(), *level));
        last = Some(outcome);
    }
    let last = last.expect("plan has at least one level");
    Ok(MultigridOutcome { marginals: last.marginals, status: last.status, levels: reports, diverged_level: None })
}
