"""Backward Euler stepping of the monolithic system and per-step solves."""

from __future__ import annotations

import time as _time
from dataclasses import dataclass, field

import numpy as np
from scipy import sparse
from scipy.sparse import linalg as spla

from . import fem, forms


class SolverError(RuntimeError):
    """Base class for linear-solve failures."""


class SingularSystemError(SolverError):
    """Factorization failed (structural or numerical singularity)."""


class NonFiniteSolutionError(SolverError):
    """The solve produced NaN or infinite entries."""


@dataclass(frozen=True)
class TimeGrid:
    """Constant-step grid: nsteps * tau must reproduce the final time."""

    tau: float
    final: float
    nsteps: int = None

    def __post_init__(self):
        if self.tau <= 0:
            raise ValueError(f"time step must be positive, got {self.tau}")
        n = self.nsteps if self.nsteps is not None else round(self.final / self.tau)
        n = int(n)
        if n < 0 or abs(n * self.tau - self.final) > 1e-12 * max(1.0, self.final):
            raise ValueError(
                f"final time {self.final} is not an integer multiple of "
                f"tau={self.tau}")
        object.__setattr__(self, "nsteps", n)

    def time_at(self, n):
        return n * self.tau


@dataclass
class StepReport:
    index: int
    residual: float
    factorized: bool = True
    pinned_pressure: bool = False
    wall_time: float = 0.0


def solve_linear(matrix, rhs, tol=1e-9):
    """Direct sparse solve with a residual check and one refinement pass.

    Returns (solution, relative_residual).  Structural or numerical
    singularities raise SingularSystemError; non-finite solutions raise
    NonFiniteSolutionError; a residual above ``tol`` raises SolverError.
    """
    rhs = np.asarray(rhs, dtype=float)
    csc = sparse.csc_matrix(matrix)
    try:
        lu = spla.splu(csc)
    except RuntimeError as exc:
        kind = "structural" if "exactly singular" in str(exc).lower() else "numerical"
        raise SingularSystemError(
            f"sparse factorization failed ({kind} singularity): {exc}") from exc
    x = lu.solve(rhs)
    if not np.all(np.isfinite(x)):
        raise NonFiniteSolutionError("solution contains non-finite entries")
    scale = max(float(np.linalg.norm(rhs)), 1e-300)
    res = float(np.linalg.norm(rhs - csc @ x)) / scale
    if res > tol:
        x = x + lu.solve(rhs - csc @ x)
        res = float(np.linalg.norm(rhs - csc @ x)) / scale
    if not np.all(np.isfinite(x)):
        raise NonFiniteSolutionError("solution contains non-finite entries")
    if res > tol:
        raise SolverError(
            f"linear solve residual {res:.3e} exceeds tolerance {tol:.1e}")
    return x, res


class TimeStepper:
    """Backward Euler driver: assembles once, refreshes convection per step.

    The operator (M / tau + N + C(u_prev)) is rebuilt from cached matrices
    each step; Dirichlet data is evaluated at the new time level before the
    direct solve.
    """

    def __init__(self, spaces, params, nitsche, grid, sources=None,
                 corrections=None, boundary_values=None, convection=True,
                 solver_tol=1e-9, pin_pressure_fallback=True):
        self.spaces = spaces
        self.params = params
        self.nitsche = nitsche
        self.grid = grid
        self.sources = sources
        self.corrections = corrections
        self.boundary_values = boundary_values or {}
        self.convection = convection
        self.solver_tol = solver_tol
        self.pin_pressure_fallback = pin_pressure_fallback
        self.ctx = forms.AssemblyContext(spaces, params, nitsche)
        self.M = forms.assemble_M(spaces, params, nitsche, ctx=self.ctx)
        self.N = forms.assemble_N(spaces, params, nitsche, ctx=self.ctx)
        self._m_over_tau = self.M.matrix * (1.0 / grid.tau)

    def step(self, state_prev, step_index):
        """Advance from t_{n-1} to t_n = n tau; returns (state, report)."""
        t_n = self.grid.time_at(step_index)
        start = _time.perf_counter()
        operator = self._m_over_tau + self.N.matrix
        if self.convection:
            conv = forms.assemble_convection(
                self.spaces.u_f, state_prev.block("u_f"), self.ctx)
            if conv is not None:
                operator = operator + forms.BlockSystem.from_contributions(
                    self.spaces, [conv]).matrix
        load = forms.assemble_F(self.spaces, self.sources, t_n,
                                corrections=self.corrections, ctx=self.ctx)
        rhs = load + self._m_over_tau @ state_prev.vector()
        system = forms.BlockSystem(self.spaces, operator, rhs)
        system = fem.apply_dirichlet(system, self.spaces,
                                     self.boundary_values, t_n)
        pinned = False
        try:
            x, res = solve_linear(system.matrix, system.rhs, self.solver_tol)
        except SingularSystemError as exc:
            if not self.pin_pressure_fallback:
                raise SingularSystemError(
                    f"step {step_index} (t={t_n:.6g}): {exc}; consider "
                    "raising the penalty gamma or pinning a pressure dof"
                ) from exc
            mat, vec = fem.eliminate_dofs(
                system.matrix, system.rhs,
                [system.offsets[forms.BLOCK_NAMES.index('p_S')]], [0.0])
            try:
                x, res = solve_linear(mat, vec, self.solver_tol)
                pinned = True
            except SolverError as exc2:
                raise SingularSystemError(
                    f"step {step_index} (t={t_n:.6g}) remains singular after "
                    f"pinning a pressure dof: {exc2}; consider raising the "
                    "penalty gamma") from exc2
        state = forms.StateVector.from_vector(self.spaces, x, time=t_n)
        report = StepReport(index=step_index, residual=res,
                            pinned_pressure=pinned,
                            wall_time=_time.perf_counter() - start)
        return state, report


def step(state_prev, t_n, grid, assembled_m, spaces, params, nitsche,
         sources=None, corrections=None, boundary_values=None,
         previous_velocity=None, convection=True, solver_tol=1e-9):
    """Single backward Euler step from a preassembled M (one-shot form).

    ``t_n`` must equal ``state_prev.time + grid.tau``; N is assembled here
    with the lagged convection field (``previous_velocity`` defaults to the
    previous state's free-flow velocity).
    """
    if abs(state_prev.time + grid.tau - t_n) > 1e-12 * max(1.0, abs(t_n)):
        raise ValueError(
            f"state at t={state_prev.time} cannot advance to t_n={t_n} "
            f"with tau={grid.tau}")
    ctx = forms.AssemblyContext(spaces, params, nitsche)
    adv = previous_velocity if previous_velocity is not None else \
        state_prev.block("u_f")
    n_sys = forms.assemble_N(spaces, params, nitsche,
                             previous_velocity=adv if convection else None,
                             ctx=ctx)
    operator = assembled_m.matrix * (1.0 / grid.tau) + n_sys.matrix
    load = forms.assemble_F(spaces, sources, t_n, corrections=corrections,
                            ctx=ctx)
    rhs = load + (assembled_m.matrix @ state_prev.vector()) / grid.tau
    system = forms.BlockSystem(spaces, operator, rhs)
    system = fem.apply_dirichlet(system, spaces, boundary_values or {}, t_n)
    x, _ = solve_linear(system.matrix, system.rhs, solver_tol)
    return forms.StateVector.from_vector(spaces, x, time=t_n)


def _field_at_quad(block, phi_table):
    space = block.space
    coeffs = block.values.reshape(space.num_nodes, space.components)
    return np.einsum("ql,clk->cqk", phi_table, coeffs[space.cell_dofs])


def discrete_energy(state, params, quad_degree=forms.VOLUME_QUAD_DEGREE):
    """Quadratic energy of a state.

    1/2 [ rho_f |u_f|^2 + rho_s (1 - phi) |u_s|^2 + (1 - phi)^2 / K |p_P|^2
          + rho_f phi |u_r + u_s|^2 + 2 mu_p |eps(y_s)|^2
          + lam_p |div y_s|^2 ]
    """
    mesh = state.block("u_f").space.mesh
    rule = fem.quadrature_rule("triangle", quad_degree)
    tab = {1: fem.tabulate(1, rule.points), 2: fem.tabulate(2, rule.points)}
    geo_s = fem.CellGeometry(mesh, mesh.cells_in("S"), rule)
    geo_p = fem.CellGeometry(mesh, mesh.cells_in("P"), rule)

    u_f = _field_at_quad(state.block("u_f"), tab[2][0])
    total = params.rho_f * np.einsum("cq,cqk->", geo_s.wdet, u_f**2)

    xp, yp = geo_p.x[..., 0], geo_p.x[..., 1]
    phi = params.phi.at(xp, yp)
    u_s = _field_at_quad(state.block("u_s"), tab[1][0])
    u_r = _field_at_quad(state.block("u_r"), tab[2][0])
    p_p = _field_at_quad(state.block("p_P"), tab[1][0])
    total += params.rho_s * np.einsum("cq,cq,cqk->", geo_p.wdet, 1.0 - phi, u_s**2)
    total += np.einsum("cq,cq,cqk->", geo_p.wdet, (1.0 - phi)**2 / params.K,
                       p_p**2)
    total += params.rho_f * np.einsum("cq,cq,cqk->", geo_p.wdet, phi,
                                      (u_r + u_s)**2)

    y_space = state.block("y_s").space
    grads = geo_p.physical_grads(tab[2][1])
    coeffs = state.block("y_s").values.reshape(y_space.num_nodes, 2)
    g = np.einsum("cqld,clk->cqkd", grads, coeffs[y_space.cell_dofs])
    eps = 0.5 * (g + np.swapaxes(g, -1, -2))
    div = g[..., 0, 0] + g[..., 1, 1]
    total += 2.0 * params.mu_p * np.einsum("cq,cqkd->", geo_p.wdet, eps**2)
    total += params.lam_p * np.einsum("cq,cq->", geo_p.wdet, div**2)
    return 0.5 * float(total)


def interface_jump_seminorm(ctx, state, rate_y_values):
    """Sum over interface facets of h_E^{-1} | n.u_f + n.u_r + n.d_t y |^2.

    ``rate_y_values`` holds the coefficients of the discrete displacement
    rate (typically the backward difference of y_s over the last step).
    """
    spaces = ctx.spaces
    total = 0.0
    for facet in ctx.facet_tables():
        pair = facet["pair"]
        jn = (ctx.trace_normal(spaces.u_f, facet, pair.normal_s)
              @ state.block("u_f").values[ctx.facet_cell_dofs(spaces.u_f, facet)]
              + ctx.trace_normal(spaces.u_r, facet, pair.normal_p)
              @ state.block("u_r").values[ctx.facet_cell_dofs(spaces.u_r, facet)]
              + ctx.trace_normal(spaces.y_s, facet, pair.normal_p)
              @ rate_y_values[ctx.facet_cell_dofs(spaces.y_s, facet)])
        total += float(facet["w"] @ jn**2) / pair.h_e
    return total


@dataclass
class RunSummary:
    mode: str
    dof_count: int
    h_max: float
    nsteps: int
    energy: list = field(default_factory=list)
    errors: dict = None
    h1_errors: dict = None
    jump_seminorm: float = None
    reports: list = field(default_factory=list)
    final_state: object = None


def run(config, on_step=None):
    """Execute one configured simulation and summarize it.

    ``config`` provides the mesh, parameters, grid, and mode (see the cli
    module).  In manufactured mode the load carries the derived sources and
    interface corrections and the summary includes final-time errors; in
    general mode boundary data comes from the configured profiles.
    ``on_step(state, index)`` is invoked after every accepted step.
    """
    from . import verification

    mesh = config.build_mesh()
    spaces = forms.build_spaces(mesh)
    params = config.physical_params()
    nitsche = config.nitsche_params()
    grid = config.time_grid()

    if config.mode == "manufactured":
        sol = verification.ExactSolution()
        sources = verification.derive_sources(params)
        corrections = verification.derive_corrections(params)
        bvals = verification.manufactured_boundary_values(sol)
    else:
        sources = None
        corrections = None
        bvals = config.boundary_values()

    stepper = TimeStepper(spaces, params, nitsche, grid, sources=sources,
                          corrections=corrections, boundary_values=bvals,
                          convection=config.convection,
                          solver_tol=config.solver_tolerance)
    state = forms.StateVector.zero(spaces, time=0.0)
    summary = RunSummary(mode=config.mode,
                         dof_count=sum(sp.ndofs for sp in spaces),
                         h_max=mesh.h_max(), nsteps=grid.nsteps)
    summary.energy.append(discrete_energy(state, params))
    prev = state
    for n in range(1, grid.nsteps + 1):
        prev = state
        state, report = stepper.step(state, n)
        summary.reports.append(report)
        summary.energy.append(discrete_energy(state, params))
        if on_step is not None:
            on_step(state, n)
    summary.final_state = state
    if grid.nsteps > 0:
        rate = (state.block("y_s").values - prev.block("y_s").values) / grid.tau
        summary.jump_seminorm = interface_jump_seminorm(stepper.ctx, state, rate)
    if config.mode == "manufactured":
        sol = verification.ExactSolution()
        summary.errors, summary.h1_errors = verification.final_time_errors(
            state, sol)
    return summary
