//! Exact solver for balanced transportation problems.
//!
//! Given a dense cost matrix, supplies, and demands with equal totals, finds
//! a minimum-cost flow shipping every supply unit. The solver is a
//! transportation-specialised network simplex: northwest-corner start, basis
//! kept as a spanning tree, most-negative-reduced-cost pivoting with a switch
//! to Bland's smallest-index rule when degenerate pivots pile up. Results are
//! exact up to floating-point roundoff; no entropic smoothing is involved.
//!
//! [`solve_sequence`] re-optimises one instance under a family of cost
//! matrices, carrying basis and flows from each matrix to the next.

use thiserror::Error;

#[derive(Debug, Error, PartialEq)]
pub enum TransportError {
    #[error("empty problem")]
    Empty,
    #[error("cost matrix has {got} entries, expected {expected}")]
    ShapeMismatch { got: usize, expected: usize },
    #[error("negative supply or demand")]
    NegativeInput,
    #[error("non-finite cost, supply, or demand")]
    NonFinite,
    #[error("supplies total {supply}, demands total {demand}; must balance")]
    Unbalanced { supply: f64, demand: f64 },
    #[error("pivot iteration limit exceeded")]
    IterationLimit,
}

/// Optimal shipping plan. `flow` is row-major with `n_rows * n_cols` entries;
/// `basis` is the optimal spanning tree, reusable to warm-start a solve of
/// the same marginals under different costs.
#[derive(Debug, Clone)]
pub struct TransportPlan {
    pub n_rows: usize,
    pub n_cols: usize,
    pub flow: Vec<f64>,
    pub objective: f64,
    pub basis: Vec<(usize, usize)>,
}

impl TransportPlan {
    pub fn flow_at(&self, i: usize, j: usize) -> f64 {
        self.flow[i * self.n_cols + j]
    }
}

/// Relative tolerance for the balance precondition.
pub const BALANCE_TOL: f64 = 1e-9;

/// Marginal checks shared by every entry point, plus the demand adjustment.
/// Absorbs the sub-tolerance imbalance into the largest demand so the
/// northwest-corner fill closes exactly.
fn checked_marginals(supply: &[f64], demand: &[f64]) -> Result<Vec<f64>, TransportError> {
    if supply.is_empty() || demand.is_empty() {
        return Err(TransportError::Empty);
    }
    if supply.iter().chain(demand).any(|x| !x.is_finite()) {
        return Err(TransportError::NonFinite);
    }
    if supply.iter().chain(demand).any(|&x| x < 0.0) {
        return Err(TransportError::NegativeInput);
    }
    let s_total: f64 = supply.iter().sum();
    let d_total: f64 = demand.iter().sum();
    let scale = s_total.max(d_total).max(1.0);
    if (s_total - d_total).abs() > BALANCE_TOL * scale {
        return Err(TransportError::Unbalanced { supply: s_total, demand: d_total });
    }
    let mut demand = demand.to_vec();
    let largest = demand
        .iter()
        .enumerate()
        .max_by(|a, b| a.1.total_cmp(b.1))
        .map(|(j, _)| j)
        .unwrap();
    demand[largest] = (demand[largest] + (s_total - d_total)).max(0.0);
    Ok(demand)
}

fn checked_demand(
    cost: &[f64],
    supply: &[f64],
    demand: &[f64],
) -> Result<Vec<f64>, TransportError> {
    let n = supply.len();
    let m = demand.len();
    if n == 0 || m == 0 {
        return Err(TransportError::Empty);
    }
    if cost.len() != n * m {
        return Err(TransportError::ShapeMismatch { got: cost.len(), expected: n * m });
    }
    if cost.iter().any(|x| !x.is_finite()) {
        return Err(TransportError::NonFinite);
    }
    checked_marginals(supply, demand)
}

pub fn solve(
    cost: &[f64],
    supply: &[f64],
    demand: &[f64],
) -> Result<TransportPlan, TransportError> {
    let demand = checked_demand(cost, supply, demand)?;
    SCRATCH.with(|cell| {
        let scratch = &mut *cell.borrow_mut();
        let mut s = Simplex::cold(cost, supply, &demand, scratch);
        let result = s.optimize(scratch).map(|()| s.plan());
        s.release(scratch);
        result
    })
}

/// Like [`solve`], seeded with the basis of a previous plan for the same
/// supplies and demands (typically under a nearby cost matrix).  The flows of
/// a transportation basis depend only on the marginals, so the old tree is
/// feasible as-is and usually a handful of pivots from the new optimum.  An
/// unusable basis silently falls back to the cold start.
pub fn solve_warm(
    cost: &[f64],
    supply: &[f64],
    demand: &[f64],
    warm: &TransportPlan,
) -> Result<TransportPlan, TransportError> {
    let demand = checked_demand(cost, supply, demand)?;
    SCRATCH.with(|cell| {
        let scratch = &mut *cell.borrow_mut();
        let mut s = match Simplex::from_basis(cost, supply, &demand, &warm.basis, scratch) {
            Some(s) => s,
            None => Simplex::cold(cost, supply, &demand, scratch),
        };
        let result = s.optimize(scratch).map(|()| s.plan());
        s.release(scratch);
        result
    })
}

/// Solves the same marginals under `count` cost matrices, returning one
/// optimal objective per matrix.  `fill` is handed a zeroed row-major
/// `supply.len() x demand.len()` buffer and must write matrix `t` into it;
/// the buffer keeps its contents between calls, so a caller sweeping one
/// term of a sum only rewrites the entries that change.  Each solve after
/// the first resumes from the previous optimal basis and flows, which makes
/// a sweep much cheaper than `count` independent solves.
pub fn solve_sequence(
    supply: &[f64],
    demand: &[f64],
    count: usize,
    mut fill: impl FnMut(usize, &mut [f64]),
) -> Result<Vec<f64>, TransportError> {
    let demand = checked_marginals(supply, demand)?;
    SCRATCH.with(|cell| {
        let scratch = &mut *cell.borrow_mut();
        let mut s = Simplex::empty(supply, &demand, scratch);
        s.cost.resize(s.n * s.m, 0.0);
        let mut out = Vec::with_capacity(count);
        for t in 0..count {
            fill(t, &mut s.cost);
            if !s.refresh_cost_tol() {
                s.release(scratch);
                return Err(TransportError::NonFinite);
            }
            if t == 0 {
                s.least_cost(supply, &demand, scratch);
            }
            if let Err(e) = s.optimize(scratch) {
                s.release(scratch);
                return Err(e);
            }
            out.push(s.basic_objective());
        }
        s.release(scratch);
        Ok(out)
    })
}

/// Reusable per-thread buffers.  A search run performs millions of small
/// solves, so the solver borrows its working storage from here instead of
/// allocating; `release` hands the buffers back when a solve finishes.
#[derive(Default)]
struct Scratch {
    cost: Vec<f64>,
    flow: Vec<f64>,
    basic: Vec<bool>,
    row_adj: Vec<Vec<usize>>,
    col_adj: Vec<Vec<usize>>,
    u: Vec<f64>,
    v: Vec<f64>,
    stack: Vec<(usize, bool)>,
    prev: Vec<usize>,
    queue: std::collections::VecDeque<usize>,
    cells: Vec<(usize, usize)>,
    fill_a: Vec<f64>,
    fill_b: Vec<f64>,
    degree: Vec<usize>,
    done: Vec<bool>,
    leaves: Vec<usize>,
}

thread_local! {
    static SCRATCH: std::cell::RefCell<Scratch> = std::cell::RefCell::new(Scratch::default());
}

struct Simplex {
    n: usize,
    m: usize,
    cost: Vec<f64>,
    flow: Vec<f64>,
    basic: Vec<bool>,
    // Basis adjacency: basic column indices per row and row indices per column.
    row_adj: Vec<Vec<usize>>,
    col_adj: Vec<Vec<usize>>,
    cost_tol: f64,
    flow_tol: f64,
}

impl Simplex {
    /// Costless shell over scratch buffers: no basis yet, `cost` left empty
    /// for the caller to fill.
    fn empty(supply: &[f64], demand: &[f64], scratch: &mut Scratch) -> Self {
        let n = supply.len();
        let m = demand.len();
        let mut basic = std::mem::take(&mut scratch.basic);
        basic.clear();
        basic.resize(n * m, false);
        let mut cost = std::mem::take(&mut scratch.cost);
        cost.clear();
        let mut flow = std::mem::take(&mut scratch.flow);
        flow.clear();
        flow.resize(n * m, 0.0);
        // Adjacency spines may be longer than needed; only the first n (m)
        // entries are ever touched, and the inner vectors keep their capacity.
        let mut row_adj = std::mem::take(&mut scratch.row_adj);
        if row_adj.len() < n {
            row_adj.resize_with(n, Vec::new);
        }
        let mut col_adj = std::mem::take(&mut scratch.col_adj);
        if col_adj.len() < m {
            col_adj.resize_with(m, Vec::new);
        }
        for a in row_adj[..n].iter_mut().chain(col_adj[..m].iter_mut()) {
            a.clear();
        }
        Simplex {
            n,
            m,
            cost,
            flow,
            basic,
            row_adj,
            col_adj,
            cost_tol: 0.0,
            flow_tol: 1e-12 * supply.iter().fold(1.0f64, |a, &x| a.max(x)),
        }
    }

    /// Recomputes the pricing tolerance from the current costs; false if any
    /// cost entry is not finite.
    fn refresh_cost_tol(&mut self) -> bool {
        let mut max_abs = 1.0f64;
        let mut finite = true;
        for &c in &self.cost {
            max_abs = max_abs.max(c.abs());
            finite &= c.is_finite();
        }
        self.cost_tol = 1e-11 * max_abs;
        finite
    }

    /// Northwest-corner start: n + m - 1 basic cells, zeros included, so
    /// the basis graph is a spanning tree even under heavy degeneracy.
    fn northwest(&mut self, supply: &[f64], demand: &[f64], scratch: &mut Scratch) {
        let (n, m) = (self.n, self.m);
        let mut a = std::mem::take(&mut scratch.fill_a);
        a.clear();
        a.extend_from_slice(supply);
        let mut b = std::mem::take(&mut scratch.fill_b);
        b.clear();
        b.extend_from_slice(demand);
        let (mut i, mut j) = (0usize, 0usize);
        loop {
            let x = a[i].min(b[j]);
            self.flow[i * m + j] = x;
            self.enter_basis(i, j);
            a[i] -= x;
            b[j] -= x;
            if i == n - 1 && j == m - 1 {
                break;
            }
            if a[i] <= self.flow_tol && i < n - 1 {
                i += 1;
            } else {
                j += 1;
            }
        }
        scratch.fill_a = a;
        scratch.fill_b = b;
    }

    /// Matrix-minimum start: allocates greedily on the cheapest cell whose
    /// row and column are both still open, closing exactly one side per step
    /// (ties close the row and leave a zero-demand column open).  Builds the
    /// same kind of spanning tree as `northwest` but starts near the cheap
    /// cells, so the first optimisation of an instance pivots far less.
    /// Each open row caches its cheapest open cell; a row rescans only when
    /// the column it pointed at closes.
    fn least_cost(&mut self, supply: &[f64], demand: &[f64], scratch: &mut Scratch) {
        let (n, m) = (self.n, self.m);
        let mut a = std::mem::take(&mut scratch.fill_a);
        a.clear();
        a.extend_from_slice(supply);
        let mut b = std::mem::take(&mut scratch.fill_b);
        b.clear();
        b.extend_from_slice(demand);
        // -1.0 marks a closed line; real supplies and demands are >= 0.
        let mut mins = std::mem::take(&mut scratch.u);
        let mut arg = std::mem::take(&mut scratch.prev);
        mins.clear();
        arg.clear();
        for i in 0..n {
            let row = &self.cost[i * m..i * m + m];
            let (mut bv, mut bj) = (f64::INFINITY, 0usize);
            for (j, &c) in row.iter().enumerate() {
                if c < bv {
                    bv = c;
                    bj = j;
                }
            }
            mins.push(bv);
            arg.push(bj);
        }
        let mut rows_left = n;
        let mut cols_left = m;
        loop {
            let mut best = f64::INFINITY;
            let mut i = 0usize;
            for (r, &v) in mins.iter().enumerate() {
                if a[r] >= 0.0 && v < best {
                    best = v;
                    i = r;
                }
            }
            let j = arg[i];
            let x = a[i].min(b[j]);
            self.flow[i * m + j] = x;
            self.enter_basis(i, j);
            if rows_left == 1 && cols_left == 1 {
                break;
            }
            let close_row = (a[i] - x <= self.flow_tol && rows_left > 1) || cols_left == 1;
            if close_row {
                b[j] -= x;
                a[i] = -1.0;
                rows_left -= 1;
            } else {
                a[i] -= x;
                b[j] = -1.0;
                cols_left -= 1;
                for r in 0..n {
                    if a[r] >= 0.0 && arg[r] == j {
                        let row = &self.cost[r * m..r * m + m];
                        let (mut bv, mut bj) = (f64::INFINITY, 0usize);
                        for (jj, &c) in row.iter().enumerate() {
                            if b[jj] >= 0.0 && c < bv {
                                bv = c;
                                bj = jj;
                            }
                        }
                        mins[r] = bv;
                        arg[r] = bj;
                    }
                }
            }
        }
        scratch.u = mins;
        scratch.prev = arg;
        scratch.fill_a = a;
        scratch.fill_b = b;
    }

    fn cold(cost: &[f64], supply: &[f64], demand: &[f64], scratch: &mut Scratch) -> Self {
        let mut s = Self::empty(supply, demand, scratch);
        s.cost.extend_from_slice(cost);
        s.refresh_cost_tol();
        s.northwest(supply, demand, scratch);
        s
    }

    /// Restore a basis from a previous solve of the same marginals.  Flows are
    /// recomputed by leaf elimination over the tree; returns None if the cell
    /// set is not a spanning tree of the right size or yields a materially
    /// negative flow, in which case the caller starts cold.
    fn from_basis(
        cost: &[f64],
        supply: &[f64],
        demand: &[f64],
        basis: &[(usize, usize)],
        scratch: &mut Scratch,
    ) -> Option<Self> {
        let mut s = Self::empty(supply, demand, scratch);
        s.cost.extend_from_slice(cost);
        s.refresh_cost_tol();
        let (n, m) = (s.n, s.m);
        if basis.len() != n + m - 1 {
            s.release(scratch);
            return None;
        }
        for &(i, j) in basis {
            if i >= n || j >= m || s.basic[i * m + j] {
                s.release(scratch);
                return None;
            }
            s.enter_basis(i, j);
        }
        // Peel leaves: a node with one incident basis edge fixes that edge's
        // flow to its remaining mass.  A spanning tree peels down to a single
        // node; anything left over means a cycle or disconnection.
        let rem_a = &mut scratch.fill_a;
        rem_a.clear();
        rem_a.extend_from_slice(supply);
        let rem_b = &mut scratch.fill_b;
        rem_b.clear();
        rem_b.extend_from_slice(demand);
        // Degrees and done flags, rows first then columns.
        let deg = &mut scratch.degree;
        deg.clear();
        deg.extend(s.row_adj[..n].iter().map(Vec::len));
        deg.extend(s.col_adj[..m].iter().map(Vec::len));
        let done = &mut scratch.done;
        done.clear();
        done.resize(n + m, false);
        let leaves = &mut scratch.leaves;
        leaves.clear();
        leaves.extend((0..n + m).filter(|&v| deg[v] == 1));
        let neg_tol = -1e-9 * supply.iter().fold(1.0f64, |a, &s| a.max(s));
        let mut placed = 0usize;
        let mut ok = true;
        while let Some(v) = leaves.pop() {
            if done[v] || deg[v] != 1 {
                continue;
            }
            let found = if v < n {
                s.row_adj[v].iter().find(|&&j| !done[n + j]).map(|&j| (v, j))
            } else {
                s.col_adj[v - n].iter().find(|&&i| !done[i]).map(|&i| (i, v - n))
            };
            let Some((i, j)) = found else {
                ok = false;
                break;
            };
            let x = if v < n { rem_a[i] } else { rem_b[j] };
            if x < neg_tol {
                ok = false;
                break;
            }
            s.flow[i * m + j] = x.max(0.0);
            rem_a[i] -= x;
            rem_b[j] -= x;
            let other = if v < n { n + j } else { i };
            done[v] = true;
            deg[other] -= 1;
            if deg[other] == 1 {
                leaves.push(other);
            }
            placed += 1;
        }
        if !ok || placed != n + m - 1 {
            s.release(scratch);
            return None;
        }
        Some(s)
    }

    /// Hand the reusable buffers back to the per-thread scratch.
    fn release(self, scratch: &mut Scratch) {
        scratch.cost = self.cost;
        scratch.flow = self.flow;
        scratch.basic = self.basic;
        scratch.row_adj = self.row_adj;
        scratch.col_adj = self.col_adj;
    }

    fn enter_basis(&mut self, i: usize, j: usize) {
        self.basic[i * self.m + j] = true;
        self.row_adj[i].push(j);
        self.col_adj[j].push(i);
    }

    fn leave_basis(&mut self, i: usize, j: usize) {
        self.basic[i * self.m + j] = false;
        self.row_adj[i].retain(|&c| c != j);
        self.col_adj[j].retain(|&r| r != i);
    }

    /// Dual potentials from the basis tree, anchored at row 0.  Buffers are
    /// caller-owned so the pivot loop does not allocate.
    fn potentials(&self, u: &mut [f64], v: &mut [f64], stack: &mut Vec<(usize, bool)>) {
        let m = self.m;
        u.fill(f64::NAN);
        v.fill(f64::NAN);
        u[0] = 0.0;
        stack.clear();
        stack.push((0usize, true));
        while let Some((node, is_row)) = stack.pop() {
            if is_row {
                for &j in &self.row_adj[node] {
                    if v[j].is_nan() {
                        v[j] = self.cost[node * m + j] - u[node];
                        stack.push((j, false));
                    }
                }
            } else {
                for &i in &self.col_adj[node] {
                    if u[i].is_nan() {
                        u[i] = self.cost[i * m + node] - v[node];
                        stack.push((i, true));
                    }
                }
            }
        }
    }

    /// Entering cell under the active pivot rule, or None at optimality.
    ///
    /// Dantzig pricing is restricted to rolling square-root-sized blocks:
    /// take the most negative cell of the first block (from `cursor`) that
    /// has one, remembering where to resume; only a fruitless full wrap
    /// proves optimality.  Under Bland's rule the whole matrix is scanned
    /// for the smallest-index candidate, which guarantees termination.
    fn entering(&self, u: &[f64], v: &[f64], bland: bool, cursor: &mut usize) -> Option<(usize, usize)> {
        let m = self.m;
        let total = self.n * m;
        if bland {
            let mut idx = 0usize;
            for i in 0..self.n {
                let ui = u[i];
                for j in 0..m {
                    if !self.basic[idx] && self.cost[idx] - ui - v[j] < -self.cost_tol {
                        return Some((i, j));
                    }
                    idx += 1;
                }
            }
            return None;
        }
        let block = ((total as f64).sqrt() as usize).max(16).min(total);
        let mut idx = *cursor % total;
        let (mut i, mut j) = (idx / m, idx % m);
        let mut scanned = 0usize;
        while scanned < total {
            let mut best_r = -self.cost_tol;
            let mut best: Option<(usize, usize)> = None;
            let end = (scanned + block).min(total);
            while scanned < end {
                if !self.basic[idx] {
                    let r = self.cost[idx] - u[i] - v[j];
                    if r < best_r {
                        best_r = r;
                        best = Some((i, j));
                    }
                }
                idx += 1;
                j += 1;
                if j == m {
                    j = 0;
                    i += 1;
                }
                if idx == total {
                    idx = 0;
                    i = 0;
                    j = 0;
                }
                scanned += 1;
            }
            if best.is_some() {
                *cursor = idx;
                return best;
            }
        }
        None
    }

    /// Unique alternating cycle closed by the entering cell: the tree path
    /// from its row to its column, walked back from the column end.  Fills
    /// `cells`; `prev` and `queue` are reused scratch.
    fn cycle(
        &self,
        enter_i: usize,
        enter_j: usize,
        prev: &mut [usize],
        queue: &mut std::collections::VecDeque<usize>,
        cells: &mut Vec<(usize, usize)>,
    ) {
        let n = self.n;
        // Bipartite node ids: rows 0..n, columns n..n+m.
        prev.fill(usize::MAX);
        let start = enter_i;
        let goal = n + enter_j;
        prev[start] = start;
        queue.clear();
        queue.push_back(start);
        while let Some(node) = queue.pop_front() {
            if node == goal {
                break;
            }
            if node < n {
                for &j in &self.row_adj[node] {
                    if prev[n + j] == usize::MAX {
                        prev[n + j] = node;
                        queue.push_back(n + j);
                    }
                }
            } else {
                for &i in &self.col_adj[node - n] {
                    if prev[i] == usize::MAX {
                        prev[i] = node;
                        queue.push_back(i);
                    }
                }
            }
        }
        debug_assert_ne!(prev[goal], usize::MAX, "basis tree must connect all nodes");
        cells.clear();
        cells.push((enter_i, enter_j));
        let mut node = goal;
        while node != start {
            let p = prev[node];
            let (i, j) = if node < n { (node, p - n) } else { (p, node - n) };
            cells.push((i, j));
            node = p;
        }
    }

    /// Optimal objective as a sum over the basis cells (non-basic flows are
    /// exactly zero, so this equals the full dot product).
    fn basic_objective(&self) -> f64 {
        let mut total = 0.0;
        for (i, adj) in self.row_adj[..self.n].iter().enumerate() {
            for &j in adj {
                let idx = i * self.m + j;
                total += self.flow[idx] * self.cost[idx];
            }
        }
        total
    }

    /// Extract the optimal plan, taking the flow buffer.
    fn plan(&mut self) -> TransportPlan {
        let (n, m) = (self.n, self.m);
        let objective = self.flow.iter().zip(&self.cost).map(|(&f, &c)| f * c).sum();
        let basis = (0..n * m)
            .filter(|&idx| self.basic[idx])
            .map(|idx| (idx / m, idx % m))
            .collect();
        let flow = std::mem::take(&mut self.flow);
        TransportPlan { n_rows: n, n_cols: m, flow, objective, basis }
    }

    /// Pivot to optimality from the current basic feasible solution.
    fn optimize(&mut self, scratch: &mut Scratch) -> Result<(), TransportError> {
        let (n, m) = (self.n, self.m);
        let max_iters = 2000 * (n + m).max(25);
        let mut bland = false;
        let mut degenerate_streak = 0usize;
        let mut cursor = 0usize;
        let mut u = std::mem::take(&mut scratch.u);
        u.resize(n, 0.0);
        let mut v = std::mem::take(&mut scratch.v);
        v.resize(m, 0.0);
        let mut stack = std::mem::take(&mut scratch.stack);
        let mut prev = std::mem::take(&mut scratch.prev);
        prev.resize(n + m, usize::MAX);
        let mut queue = std::mem::take(&mut scratch.queue);
        let mut cells = std::mem::take(&mut scratch.cells);
        let mut result = Err(TransportError::IterationLimit);
        for _ in 0..max_iters {
            self.potentials(&mut u, &mut v, &mut stack);
            let Some((ei, ej)) = self.entering(&u, &v, bland, &mut cursor) else {
                result = Ok(());
                break;
            };
            self.cycle(ei, ej, &mut prev, &mut queue, &mut cells);
            // Odd positions lose flow; the entering cell at position 0 gains.
            let mut theta = f64::INFINITY;
            let mut leave = (usize::MAX, usize::MAX);
            for (pos, &(i, j)) in cells.iter().enumerate() {
                if pos % 2 == 1 {
                    let f = self.flow[i * m + j];
                    if f < theta - self.flow_tol
                        || (f < theta + self.flow_tol && (i, j) < leave)
                    {
                        theta = f;
                        leave = (i, j);
                    }
                }
            }
            for (pos, &(i, j)) in cells.iter().enumerate() {
                if pos % 2 == 1 {
                    self.flow[i * m + j] -= theta;
                } else {
                    self.flow[i * m + j] += theta;
                }
            }
            self.flow[leave.0 * m + leave.1] = 0.0;
            self.leave_basis(leave.0, leave.1);
            self.enter_basis(ei, ej);
            if theta <= self.flow_tol {
                degenerate_streak += 1;
                if degenerate_streak > n + m {
                    bland = true;
                }
            } else {
                degenerate_streak = 0;
            }
        }
        scratch.u = u;
        scratch.v = v;
        scratch.stack = stack;
        scratch.prev = prev;
        scratch.queue = queue;
        scratch.cells = cells;
        result
    }
}
