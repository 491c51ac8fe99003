//! Joint KKT conditions of the open-loop game, packaged as a parametric MiCP.
//!
//! Variables `v = (r, z)` with `r = [x_1..x_{T-1}, u^1, .., u^N, μ^1, .., μ^N]` and
//! `z = [λ^1, .., λ^N]`. The initial state `x_0` is data, so it carries no variable,
//! no stationarity row and no state-dependent inequality rows.
//!
//! Agent `i`'s Lagrangian is `L^i = J^i - λ^iᵀ I^i - μ^iᵀ E^i` with
//! `E_t = x_{t+1} - f(x_t, u_t)`. Rows of `F` come in the canonical order
//! stationarity-x by agent, stationarity-u by agent, equalities, inequalities by
//! agent; every block is stage-major. `λ_j` pairs with inequality row `j`.

use std::io::Write;
use std::path::Path;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::game::cost::{StageDerivatives, StageLayout};
use crate::game::{
    stage_weight, stage_weight_derivative, ConstraintRow, DynamicsKind, GameDefinition, Params,
    Trajectory,
};
use crate::linalg::SparseMatrix;

/// How the dynamics equalities are attached to the agents' Lagrangians.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub enum DynamicsOwnership {
    /// Agent `i` is stationary in its own substate and owns its own dynamics rows.
    /// Exact for decoupled per-agent dynamics, and the smaller system.
    #[default]
    PerAgent,
    /// Every agent is stationary in the full state and carries a multiplier for the
    /// full joint dynamics, whose equality rows appear once.
    Shared,
}

/// Row and multiplier scaling of the stationarity conditions.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub enum KktScaling {
    /// Multipliers of stage `t` are stored divided by `Γ_t = γ^t`; stationarity in
    /// `u_t` is divided by `Γ_t` and in `x_t` by `Γ_{t-1}`. Same primal solutions as
    /// `Unscaled` for `γ > 0`, but rows stay O(1) as `γ^t` underflows, and `γ = 0`
    /// reduces to greedy per-stage optimality.
    #[default]
    Discounted,
    /// Stationarity of `L^i` exactly as written, discount weights on the cost only.
    Unscaled,
}

#[derive(Clone, Copy, Debug)]
struct RowFactors {
    /// cost factor in x rows and its γ-derivative
    cx: f64,
    dcx: f64,
    /// cost factor in u rows
    cu: f64,
    dcu: f64,
    /// factor on multiplier terms of x rows at the same stage
    sx: f64,
    dsx: f64,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct TranscriptionOptions {
    pub ownership: DynamicsOwnership,
    pub scaling: KktScaling,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Span {
    pub start: usize,
    pub len: usize,
}

impl Span {
    pub fn end(&self) -> usize {
        self.start + self.len
    }

    pub fn range(&self) -> std::ops::Range<usize> {
        self.start..self.end()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct VariableLayout {
    pub x: Span,
    pub u: Vec<Span>,
    pub mu: Vec<Span>,
    pub lambda: Vec<Span>,
    pub eta_r: usize,
    pub eta_z: usize,
}

impl VariableLayout {
    pub fn dim(&self) -> usize {
        self.eta_r + self.eta_z
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RowLayout {
    pub stat_x: Vec<Span>,
    pub stat_u: Vec<Span>,
    /// One span per agent (`PerAgent`) or a single span (`Shared`).
    pub equality: Vec<Span>,
    pub inequality: Vec<Span>,
}

/// Origin of one inequality row.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct InequalityRow {
    pub agent: usize,
    pub stage: usize,
    /// Index into `GameDefinition::constraints`.
    pub block: usize,
}

/// Residual and (optionally) Jacobians of `F` at one point.
#[derive(Clone, Debug)]
pub struct Evaluation {
    pub f: Vec<f64>,
    pub jac: Option<SparseMatrix>,
    /// `∂F/∂(θ, γ)`, dense.
    pub param_jac: Option<DMatrix<f64>>,
}

/// The transcribed game. Immutable; all evaluators are pure.
#[derive(Clone, Debug)]
pub struct MicpProblem {
    game: GameDefinition,
    options: TranscriptionOptions,
    stage: StageLayout,
    layout: VariableLayout,
    rows: RowLayout,
    theta_dim: usize,
    mu_dims: Vec<usize>,
    blocks_of: Vec<Vec<usize>>,
    ineq_start: Vec<Vec<usize>>,
    ineq_rows: Vec<InequalityRow>,
    /// `stage_cols[t][b]`: column of stage-vector entry `b` at stage `t` (`None` for `x_0`).
    stage_cols: Vec<Vec<Option<usize>>>,
    /// `stat_rows[i][t][b]`: agent `i`'s stationarity row for stage-vector entry `b`.
    stat_rows: Vec<Vec<Vec<Option<usize>>>>,
    row_tags: Vec<usize>,
    col_tags: Vec<usize>,
    row_order: Vec<usize>,
    col_order: Vec<usize>,
}

/// Build the MiCP for `game`. Fails on malformed games and duplicate constraint blocks.
pub fn transcribe(game: &GameDefinition, options: &TranscriptionOptions) -> Result<MicpProblem> {
    game.validate()?;
    MicpProblem::build(game.clone(), options.clone())
}

impl MicpProblem {
    fn build(game: GameDefinition, options: TranscriptionOptions) -> Result<Self> {
        let n_agents = game.num_agents();
        let t_len = game.horizon();
        let n = game.dims.state_dim;
        let stage = game.stage_layout();
        let shared = options.ownership == DynamicsOwnership::Shared;
        let mu_dims: Vec<usize> = (0..n_agents)
            .map(|i| if shared { n } else { stage.state_dims[i] })
            .collect();

        let mut acc = 0;
        let mut span = |len: usize| {
            let s = Span { start: acc, len };
            acc += len;
            s
        };
        let x = span((t_len - 1) * n);
        let u: Vec<Span> = stage
            .control_dims
            .iter()
            .map(|&m| span(t_len * m))
            .collect();
        let mu: Vec<Span> = mu_dims.iter().map(|&d| span((t_len - 1) * d)).collect();
        let eta_r = acc;

        let mut blocks_of = vec![Vec::new(); n_agents];
        for (b, block) in game.constraints.iter().enumerate() {
            blocks_of[block.owner].push(b);
        }
        let mut ineq_start = vec![vec![0; t_len]; n_agents];
        let mut ineq_rows = Vec::new();
        let mut lambda = Vec::with_capacity(n_agents);
        for i in 0..n_agents {
            let begin = ineq_rows.len();
            for t in 0..t_len {
                ineq_start[i][t] = eta_r + ineq_rows.len();
                for &b in &blocks_of[i] {
                    let block = &game.constraints[b];
                    if block.applies_at(t) {
                        for _ in 0..block.rows_per_stage(&game.dynamics[i]) {
                            ineq_rows.push(InequalityRow {
                                agent: i,
                                stage: t,
                                block: b,
                            });
                        }
                    }
                }
            }
            lambda.push(Span {
                start: eta_r + begin,
                len: ineq_rows.len() - begin,
            });
        }
        let eta_z = ineq_rows.len();
        let layout = VariableLayout {
            x,
            u,
            mu,
            lambda,
            eta_r,
            eta_z,
        };

        let mut racc = 0;
        let mut rspan = |len: usize| {
            let s = Span { start: racc, len };
            racc += len;
            s
        };
        let stat_x: Vec<Span> = (0..n_agents)
            .map(|i| rspan((t_len - 1) * if shared { n } else { stage.state_dims[i] }))
            .collect();
        let stat_u: Vec<Span> = stage
            .control_dims
            .iter()
            .map(|&m| rspan(t_len * m))
            .collect();
        let equality: Vec<Span> = if shared {
            vec![rspan((t_len - 1) * n)]
        } else {
            stage
                .state_dims
                .iter()
                .map(|&d| rspan((t_len - 1) * d))
                .collect()
        };
        if racc != eta_r {
            return Err(Error::LayoutMismatch(format!(
                "{racc} equality-type rows for {eta_r} free variables"
            )));
        }
        let inequality = layout.lambda.clone();
        let rows = RowLayout {
            stat_x,
            stat_u,
            equality,
            inequality,
        };

        let d = stage.dim();
        let mut stage_cols = vec![vec![None; d]; t_len];
        for (t, cols) in stage_cols.iter_mut().enumerate() {
            for b in 0..n {
                if t > 0 {
                    cols[b] = Some(layout.x.start + (t - 1) * n + b);
                }
            }
            for i in 0..n_agents {
                let m = stage.control_dims[i];
                for c in 0..m {
                    cols[stage.control_offsets[i] + c] = Some(layout.u[i].start + t * m + c);
                }
            }
        }
        let mut stat_rows = vec![vec![vec![None; d]; t_len]; n_agents];
        for i in 0..n_agents {
            let m = stage.control_dims[i];
            let (lo, hi) = if shared {
                (0, n)
            } else {
                (
                    stage.state_offsets[i],
                    stage.state_offsets[i] + stage.state_dims[i],
                )
            };
            let width = hi - lo;
            for t in 0..t_len {
                let map = &mut stat_rows[i][t];
                if t > 0 {
                    for b in lo..hi {
                        map[b] = Some(rows.stat_x[i].start + (t - 1) * width + (b - lo));
                    }
                }
                for c in 0..m {
                    map[stage.control_offsets[i] + c] = Some(rows.stat_u[i].start + t * m + c);
                }
            }
        }

        // Stage tags: 2t for stage-t primal/inequality quantities, 2t+1 for transition t.
        let dim = eta_r + eta_z;
        let mut col_tags = vec![0; dim];
        let mut row_tags = vec![0; dim];
        for t in 1..t_len {
            for k in 0..n {
                col_tags[layout.x.start + (t - 1) * n + k] = 2 * t;
            }
        }
        for i in 0..n_agents {
            let m = stage.control_dims[i];
            for k in 0..t_len * m {
                col_tags[layout.u[i].start + k] = 2 * (k / m);
                row_tags[rows.stat_u[i].start + k] = 2 * (k / m);
            }
            let dm = mu_dims[i];
            for k in 0..(t_len - 1) * dm {
                col_tags[layout.mu[i].start + k] = 2 * (k / dm) + 1;
            }
            let w = rows.stat_x[i].len / (t_len - 1);
            for k in 0..rows.stat_x[i].len {
                row_tags[rows.stat_x[i].start + k] = 2 * (k / w + 1);
            }
        }
        for s in &rows.equality {
            let w = s.len / (t_len - 1);
            for k in 0..s.len {
                row_tags[s.start + k] = 2 * (k / w) + 1;
            }
        }
        for (j, r) in ineq_rows.iter().enumerate() {
            col_tags[eta_r + j] = 2 * r.stage;
            row_tags[eta_r + j] = 2 * r.stage;
        }
        let sorted = |tags: &[usize]| {
            let mut idx: Vec<usize> = (0..tags.len()).collect();
            idx.sort_by_key(|&k| (tags[k], k));
            idx
        };
        let row_order = sorted(&row_tags);
        let col_order = sorted(&col_tags);

        Ok(Self {
            theta_dim: game.theta_dim(),
            game,
            options,
            stage,
            layout,
            rows,
            mu_dims,
            blocks_of,
            ineq_start,
            ineq_rows,
            stage_cols,
            stat_rows,
            row_tags,
            col_tags,
            row_order,
            col_order,
        })
    }

    pub fn game(&self) -> &GameDefinition {
        &self.game
    }

    pub fn options(&self) -> &TranscriptionOptions {
        &self.options
    }

    pub fn layout(&self) -> &VariableLayout {
        &self.layout
    }

    pub fn rows(&self) -> &RowLayout {
        &self.rows
    }

    pub fn dim(&self) -> usize {
        self.layout.dim()
    }

    pub fn eta_r(&self) -> usize {
        self.layout.eta_r
    }

    pub fn eta_z(&self) -> usize {
        self.layout.eta_z
    }

    pub fn theta_dim(&self) -> usize {
        self.theta_dim
    }

    /// `|θ| + N`.
    pub fn param_dim(&self) -> usize {
        self.theta_dim + self.game.num_agents()
    }

    pub fn inequality_rows(&self) -> &[InequalityRow] {
        &self.ineq_rows
    }

    /// Stage tags of rows and columns; sorting by tag makes `∇_v F` banded.
    pub fn stage_tags(&self) -> (&[usize], &[usize]) {
        (&self.row_tags, &self.col_tags)
    }

    /// Row and column permutations into stage-major order.
    pub fn banded_order(&self) -> (&[usize], &[usize]) {
        (&self.row_order, &self.col_order)
    }

    pub fn stage_layout(&self) -> &StageLayout {
        &self.stage
    }

    fn check_point(&self, v: &[f64], params: &Params) -> Result<()> {
        if v.len() != self.dim() {
            return Err(Error::Dimension(format!(
                "v has {} entries, layout needs {}",
                v.len(),
                self.dim()
            )));
        }
        self.game.check_params(params)
    }

    fn stage_vector(&self, v: &[f64], t: usize) -> Vec<f64> {
        let n = self.game.dims.state_dim;
        let mut s = Vec::with_capacity(self.stage.dim());
        if t == 0 {
            s.extend_from_slice(&self.game.x1);
        } else {
            let o = self.layout.x.start + (t - 1) * n;
            s.extend_from_slice(&v[o..o + n]);
        }
        for (i, span) in self.layout.u.iter().enumerate() {
            let m = self.stage.control_dims[i];
            s.extend_from_slice(&v[span.start + t * m..span.start + (t + 1) * m]);
        }
        s
    }

    /// Column of the first entry of `μ^i_t` that multiplies subsystem `j`.
    fn mu_col(&self, i: usize, t: usize, j: usize) -> usize {
        let sub = match self.options.ownership {
            DynamicsOwnership::PerAgent => 0,
            DynamicsOwnership::Shared => self.stage.state_offsets[j],
        };
        self.layout.mu[i].start + t * self.mu_dims[i] + sub
    }

    /// Equality row of subsystem `j`, transition `t`, component 0.
    fn eq_row(&self, j: usize, t: usize) -> usize {
        match self.options.ownership {
            DynamicsOwnership::PerAgent => {
                self.rows.equality[j].start + t * self.stage.state_dims[j]
            }
            DynamicsOwnership::Shared => {
                self.rows.equality[0].start
                    + t * self.game.dims.state_dim
                    + self.stage.state_offsets[j]
            }
        }
    }

    /// Agents whose multipliers cover subsystem `j`.
    fn mu_owners(&self, j: usize) -> std::ops::Range<usize> {
        match self.options.ownership {
            DynamicsOwnership::PerAgent => j..j + 1,
            DynamicsOwnership::Shared => 0..self.game.num_agents(),
        }
    }

    fn constraint_rows_at(&self, agent: usize, t: usize, s: &[f64], out: &mut Vec<ConstraintRow>) {
        out.clear();
        for &b in &self.blocks_of[agent] {
            let block = &self.game.constraints[b];
            if block.applies_at(t) {
                block.stage_rows(&self.stage, &self.game.dynamics[agent], s, out);
            }
        }
    }

    /// Evaluate `F` and, on request, `∇_v F` (sparse) and `∇_{(θ,γ)} F` (dense).
    pub fn evaluate(
        &self,
        v: &[f64],
        params: &Params,
        want_jac: bool,
        want_param_jac: bool,
    ) -> Result<Evaluation> {
        self.check_point(v, params)?;
        Ok(self.evaluate_unchecked(v, params, want_jac, want_param_jac))
    }

    pub(crate) fn evaluate_unchecked(
        &self,
        v: &[f64],
        params: &Params,
        want_jac: bool,
        want_param_jac: bool,
    ) -> Evaluation {
        let game = &self.game;
        let n_agents = game.num_agents();
        let t_len = game.horizon();
        let n = game.dims.state_dim;
        let d = self.stage.dim();
        let dt = game.dims.dt;
        let dim = self.dim();
        let gcol = |i: usize| self.theta_dim + i;
        let mut f = vec![0.0; dim];
        let mut jac = SparseMatrix::new(dim, dim);
        let mut pjac = if want_param_jac {
            DMatrix::zeros(dim, self.param_dim())
        } else {
            DMatrix::zeros(0, 0)
        };
        let mut cost = StageDerivatives::zeros(d, self.theta_dim);
        let mut rows = Vec::new();
        let mut push = |r: usize, c: usize, val: f64| {
            if want_jac {
                jac.push(r, c, val);
            }
        };
        let factors: Vec<Vec<RowFactors>> = (0..n_agents)
            .map(|i| {
                (0..t_len)
                    .map(|t| self.row_factors(params.gamma[i], t))
                    .collect()
            })
            .collect();

        for t in 0..t_len {
            let s = self.stage_vector(v, t);
            let cols = &self.stage_cols[t];

            for i in 0..n_agents {
                let smap = &self.stat_rows[i][t];
                let rf = factors[i][t];
                // multiplier terms: x rows scale by `sx`, u rows by 1
                let mult = |b: usize| if b < n { (rf.sx, rf.dsx) } else { (1.0, 0.0) };
                self.constraint_rows_at(i, t, &s, &mut rows);
                let start = self.ineq_start[i][t];
                for (k, row) in rows.iter().enumerate() {
                    let hr = start + k;
                    let lam = v[hr];
                    f[hr] = row.value;
                    for &(b, gb) in &row.grad {
                        if let Some(c) = cols[b] {
                            push(hr, c, gb);
                        }
                        if let Some(sr) = smap[b] {
                            let (sc, dsc) = mult(b);
                            f[sr] -= sc * lam * gb;
                            push(sr, hr, -sc * gb);
                            if want_param_jac {
                                pjac[(sr, gcol(i))] -= dsc * lam * gb;
                            }
                        }
                    }
                    if lam != 0.0 {
                        for &(b1, b2, hv) in &row.hess {
                            if let (Some(sr), Some(c)) = (smap[b1], cols[b2]) {
                                push(sr, c, -mult(b1).0 * lam * hv);
                            }
                        }
                    }
                }

                game.agent_stage_cost(&self.stage, i, t, &s, &params.theta, &mut cost);
                for b in 0..d {
                    let Some(r) = smap[b] else { continue };
                    let (w, dw) = if b < n {
                        (rf.cx, rf.dcx)
                    } else {
                        (rf.cu, rf.dcu)
                    };
                    f[r] += w * cost.grad[b];
                    if want_jac && w != 0.0 {
                        for b2 in 0..d {
                            let h = cost.hess[(b, b2)];
                            if h != 0.0 {
                                if let Some(c) = cols[b2] {
                                    push(r, c, w * h);
                                }
                            }
                        }
                    }
                    if want_param_jac {
                        for k in 0..self.theta_dim {
                            pjac[(r, k)] += w * cost.dgrad_dtheta[(b, k)];
                        }
                        pjac[(r, gcol(i))] += dw * cost.grad[b];
                    }
                }
            }

            if t + 1 == t_len {
                continue;
            }
            let next_cols = &self.stage_cols[t + 1];
            for (j, model) in game.dynamics.iter().enumerate() {
                let o = self.stage.state_offsets[j];
                let uo = self.stage.control_offsets[j];
                let nj = self.stage.state_dims[j];
                let mj = self.stage.control_dims[j];
                let (xj, uj) = (&s[o..o + nj], &s[uo..uo + mj]);
                let next = model.step_unchecked(xj, uj, dt);
                let (a, bm) = model.jacobians_unchecked(xj, uj, dt);
                let er = self.eq_row(j, t);
                for k in 0..nj {
                    let xc = next_cols[o + k].expect("x_{t+1} is a variable");
                    f[er + k] = v[xc] - next[k];
                    push(er + k, xc, 1.0);
                    for c in 0..nj {
                        if let Some(col) = cols[o + c] {
                            push(er + k, col, -a[(k, c)]);
                        }
                    }
                    for c in 0..mj {
                        push(er + k, cols[uo + c].unwrap(), -bm[(k, c)]);
                    }
                }
                for i in self.mu_owners(j) {
                    let rf = factors[i][t];
                    let mc = self.mu_col(i, t, j);
                    let mu = &v[mc..mc + nj];
                    let smap = &self.stat_rows[i][t];
                    for k in 0..nj {
                        if let Some(r) = smap[o + k] {
                            for q in 0..nj {
                                f[r] += rf.sx * a[(q, k)] * mu[q];
                                push(r, mc + q, rf.sx * a[(q, k)]);
                                if want_param_jac {
                                    pjac[(r, gcol(i))] += rf.dsx * a[(q, k)] * mu[q];
                                }
                            }
                        }
                        let r = self.stat_rows[i][t + 1][o + k].unwrap();
                        f[r] -= mu[k];
                        push(r, mc + k, -1.0);
                    }
                    if i == j {
                        for c in 0..mj {
                            let r = smap[uo + c].unwrap();
                            for q in 0..nj {
                                f[r] += bm[(q, c)] * mu[q];
                                push(r, mc + q, bm[(q, c)]);
                            }
                        }
                    }
                    if want_jac && matches!(model.kind, DynamicsKind::KinematicBicycle { .. }) {
                        let h = model.weighted_hessian(xj, uj, dt, mu);
                        let local = |p: usize| if p < nj { o + p } else { uo + p - nj };
                        for p in 0..nj + mj {
                            let Some(r) = smap[local(p)] else { continue };
                            let sc = if p < nj { rf.sx } else { 1.0 };
                            for q in 0..nj + mj {
                                if let Some(c) = cols[local(q)] {
                                    if h[(p, q)] != 0.0 {
                                        push(r, c, sc * h[(p, q)]);
                                    }
                                }
                            }
                        }
                    }
                }
            }
        }
        Evaluation {
            f,
            jac: want_jac.then_some(jac),
            param_jac: want_param_jac.then_some(pjac),
        }
    }

    /// Row factors of agent stationarity at stage `t` (see [`KktScaling`]).
    fn row_factors(&self, gamma: f64, t: usize) -> RowFactors {
        match self.options.scaling {
            KktScaling::Discounted => RowFactors {
                cx: gamma,
                dcx: 1.0,
                cu: 1.0,
                dcu: 0.0,
                sx: gamma,
                dsx: 1.0,
            },
            KktScaling::Unscaled => {
                let w = stage_weight(gamma, t);
                let dw = stage_weight_derivative(gamma, t);
                RowFactors {
                    cx: w,
                    dcx: dw,
                    cu: w,
                    dcu: dw,
                    sx: 1.0,
                    dsx: 0.0,
                }
            }
        }
    }

    /// Multiplier of `v` entry `k` converting stored multipliers to those of `L^i`
    /// (1 for primal entries).
    fn multiplier_scale(&self, params: &Params, k: usize) -> f64 {
        if self.options.scaling == KktScaling::Unscaled {
            return 1.0;
        }
        let l = &self.layout;
        if k >= l.eta_r {
            let r = self.ineq_rows[k - l.eta_r];
            return stage_weight(params.gamma[r.agent], r.stage);
        }
        for (i, span) in l.mu.iter().enumerate() {
            if span.range().contains(&k) {
                return stage_weight(params.gamma[i], (k - span.start) / self.mu_dims[i]);
            }
        }
        1.0
    }

    /// `v` with multipliers expressed in the unscaled convention of `L^i`.
    pub fn unscaled_point(&self, v: &[f64], params: &Params) -> Vec<f64> {
        v.iter()
            .enumerate()
            .map(|(k, x)| x * self.multiplier_scale(params, k))
            .collect()
    }

    pub fn residual(&self, v: &[f64], params: &Params) -> Result<Vec<f64>> {
        Ok(self.evaluate(v, params, false, false)?.f)
    }

    pub fn jacobian(&self, v: &[f64], params: &Params) -> Result<SparseMatrix> {
        Ok(self.evaluate(v, params, true, false)?.jac.unwrap())
    }

    pub fn param_jacobian(&self, v: &[f64], params: &Params) -> Result<DMatrix<f64>> {
        Ok(self.evaluate(v, params, false, true)?.param_jac.unwrap())
    }

    /// `max(|c|_inf, |min(z, h)|_inf)`.
    pub fn kkt_residual(&self, v: &[f64], params: &Params) -> Result<f64> {
        let f = self.residual(v, params)?;
        Ok(self.kkt_residual_of(v, &f))
    }

    pub(crate) fn kkt_residual_of(&self, v: &[f64], f: &[f64]) -> f64 {
        crate::micp::kkt_residual_of(self.layout.eta_r, v, f)
    }

    /// Joint trajectory stored in `v`.
    pub fn trajectory(&self, v: &[f64]) -> Trajectory {
        let t_len = self.game.horizon();
        let n = self.game.dims.state_dim;
        let mut states = DMatrix::zeros(t_len, n);
        for t in 0..t_len {
            let s = self.stage_vector(v, t);
            for k in 0..n {
                states[(t, k)] = s[k];
            }
        }
        let controls = self
            .layout
            .u
            .iter()
            .zip(&self.stage.control_dims)
            .map(|(span, &m)| DMatrix::from_row_slice(t_len, m, &v[span.range()]))
            .collect();
        Trajectory { states, controls }
    }

    /// `v` holding the given primal trajectory, zero `μ` and the given `λ` fill value.
    pub fn point_from_trajectory(&self, traj: &Trajectory, lambda: f64) -> Vec<f64> {
        let n = self.game.dims.state_dim;
        let mut v = vec![0.0; self.dim()];
        for t in 1..self.game.horizon() {
            for k in 0..n {
                v[self.layout.x.start + (t - 1) * n + k] = traj.states[(t, k)];
            }
        }
        for (span, u) in self.layout.u.iter().zip(&traj.controls) {
            let flat: Vec<f64> = u.transpose().iter().copied().collect();
            v[span.range()].copy_from_slice(&flat);
        }
        v[self.layout.eta_r..].fill(lambda);
        v
    }

    /// `v` advanced by one stage for the same game started from `x_1`: every stage block
    /// takes the value of the next stage, and the last stage repeats.
    pub fn shifted_point(&self, v: &[f64]) -> Vec<f64> {
        let t_len = self.game.horizon();
        let mut out = v.to_vec();
        let mut shift = |start: usize, chunk: usize, stages: usize| {
            for s in 0..stages.saturating_sub(1) {
                for k in 0..chunk {
                    out[start + s * chunk + k] = v[start + (s + 1) * chunk + k];
                }
            }
        };
        shift(self.layout.x.start, self.game.dims.state_dim, t_len - 1);
        for (span, m) in self.layout.u.iter().zip(&self.game.dims.control_dims) {
            shift(span.start, *m, t_len);
        }
        for (span, d) in self.layout.mu.iter().zip(&self.mu_dims) {
            shift(span.start, *d, t_len - 1);
        }
        let mut next = std::collections::HashMap::new();
        for (j, row) in self.ineq_rows.iter().enumerate() {
            next.entry((row.agent, row.block, row.stage))
                .or_insert_with(Vec::new)
                .push(j);
        }
        for rows in next.values() {
            let row = self.ineq_rows[rows[0]];
            if let Some(later) = next.get(&(row.agent, row.block, row.stage + 1)) {
                for (j, k) in rows.iter().zip(later) {
                    out[self.layout.eta_r + j] = v[self.layout.eta_r + k];
                }
            }
        }
        out
    }

    /// Default starting point: zero-control rollout, zero `μ`, `z = 1`.
    pub fn initial_point(&self) -> Vec<f64> {
        let traj = self
            .game
            .rollout(&self.game.zero_controls())
            .expect("zero controls are well-formed");
        self.point_from_trajectory(&traj, 1.0)
    }

    /// Indices of `v` holding states `x_1 .. x_{T-1}`, stage-major.
    pub fn state_indices(&self) -> std::ops::Range<usize> {
        self.layout.x.range()
    }

    /// Value of `L^i` at `v`; stored multipliers are converted per the problem's scaling.
    pub fn lagrangian_value(&self, v: &[f64], params: &Params, agent: usize) -> Result<f64> {
        self.check_point(v, params)?;
        let v = &self.unscaled_point(v, params);
        let traj = self.trajectory(v);
        let mut value = self.game.agent_total_cost(&traj, agent, params)?;
        let mut rows = Vec::new();
        for t in 0..self.game.horizon() {
            let s = self.stage_vector(v, t);
            self.constraint_rows_at(agent, t, &s, &mut rows);
            let start = self.ineq_start[agent][t];
            for (k, row) in rows.iter().enumerate() {
                value -= v[start + k] * row.value;
            }
        }
        for t in 0..self.game.horizon() - 1 {
            for j in self.covered_subsystems(agent) {
                let o = self.stage.state_offsets[j];
                let nj = self.stage.state_dims[j];
                let x: Vec<f64> = (0..nj).map(|k| traj.states[(t, o + k)]).collect();
                let u: Vec<f64> = traj.controls[j].row(t).iter().copied().collect();
                let next = self.game.dynamics[j].step_unchecked(&x, &u, self.game.dims.dt);
                let mc = self.mu_col(agent, t, j);
                for k in 0..nj {
                    value -= v[mc + k] * (traj.states[(t + 1, o + k)] - next[k]);
                }
            }
        }
        Ok(value)
    }

    fn covered_subsystems(&self, agent: usize) -> std::ops::Range<usize> {
        match self.options.ownership {
            DynamicsOwnership::PerAgent => agent..agent + 1,
            DynamicsOwnership::Shared => 0..self.game.num_agents(),
        }
    }

    /// `(∇_x L^i, ∇_{u^i} L^i)` over the full state sequence `x_1..x_{T-1}` and agent `i`'s
    /// own controls. Discount weights scale only the cost part.
    pub fn lagrangian_gradient(
        &self,
        v: &[f64],
        params: &Params,
        agent: usize,
    ) -> Result<(DVector<f64>, DVector<f64>)> {
        self.check_point(v, params)?;
        let v = &self.unscaled_point(v, params);
        let game = &self.game;
        let n = game.dims.state_dim;
        let t_len = game.horizon();
        let d = self.stage.dim();
        let m = self.stage.control_dims[agent];
        let uo = self.stage.control_offsets[agent];
        let mut gx = DVector::zeros((t_len - 1) * n);
        let mut gu = DVector::zeros(t_len * m);
        let mut cost = StageDerivatives::zeros(d, self.theta_dim);
        let mut rows = Vec::new();
        let add = |t: usize, b: usize, val: f64, gx: &mut DVector<f64>, gu: &mut DVector<f64>| {
            if b < n {
                if t > 0 {
                    gx[(t - 1) * n + b] += val;
                }
            } else if (uo..uo + m).contains(&b) {
                gu[t * m + b - uo] += val;
            }
        };
        for t in 0..t_len {
            let s = self.stage_vector(v, t);
            game.agent_stage_cost(&self.stage, agent, t, &s, &params.theta, &mut cost);
            let w = stage_weight(params.gamma[agent], t);
            for b in 0..d {
                add(t, b, w * cost.grad[b], &mut gx, &mut gu);
            }
            self.constraint_rows_at(agent, t, &s, &mut rows);
            let start = self.ineq_start[agent][t];
            for (k, row) in rows.iter().enumerate() {
                for &(b, g) in &row.grad {
                    add(t, b, -v[start + k] * g, &mut gx, &mut gu);
                }
            }
            if t + 1 < t_len {
                for j in self.covered_subsystems(agent) {
                    let o = self.stage.state_offsets[j];
                    let ujo = self.stage.control_offsets[j];
                    let nj = self.stage.state_dims[j];
                    let mj = self.stage.control_dims[j];
                    let (a, bm) = game.dynamics[j].jacobians_unchecked(
                        &s[o..o + nj],
                        &s[ujo..ujo + mj],
                        game.dims.dt,
                    );
                    let mc = self.mu_col(agent, t, j);
                    let mu = &v[mc..mc + nj];
                    for k in 0..nj {
                        gx[t * n + o + k] -= mu[k];
                        let ax: f64 = (0..nj).map(|q| a[(q, k)] * mu[q]).sum();
                        add(t, o + k, ax, &mut gx, &mut gu);
                    }
                    for c in 0..mj {
                        let bu: f64 = (0..nj).map(|q| bm[(q, c)] * mu[q]).sum();
                        add(t, ujo + c, bu, &mut gx, &mut gu);
                    }
                }
            }
        }
        Ok((gx, gu))
    }

    /// Write the sparsity pattern and values of `∇_v F` in Matrix Market format.
    pub fn write_jacobian_market(&self, v: &[f64], params: &Params, path: &Path) -> Result<()> {
        let jac = self.jacobian(v, params)?;
        let mut file = std::io::BufWriter::new(std::fs::File::create(path)?);
        jac.write_matrix_market(&mut file)?;
        file.flush()?;
        Ok(())
    }
}
