"""Time integration of the coupled rod/fluid system.

Each step treats the hydrodynamic force explicitly (evaluated at the current
configuration and velocities) and the elastic force implicitly, solving the
discrete balance with damped Newton. The first-edge twist rate is prescribed
by the actuation command; the head spin follows from torque balance.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace

import numpy as np
from scipy.linalg import get_lapack_funcs

from . import hydro
from .elastic import (
    DegenerateEdgeError,
    ElasticStiffnesses,
    RestConfiguration,
    evaluate_elastics,
    internal_force_jacobian_fd,
    jacobian_from_eval,
)
from .params import PhysicalParameters
from .rod import RodState, build_initial_configuration, node_dof_indices, pack_dofs, unpack_dofs


class NewtonDivergenceError(RuntimeError):
    def __init__(self, message: str, diagnostics: "StepDiagnostics"):
        super().__init__(message)
        self.diagnostics = diagnostics


class SimulationError(RuntimeError):
    pass


@dataclass(frozen=True)
class StepControls:
    newton_tol: float = 1e-6        # relative force-residual tolerance
    max_newton_iters: int = 50
    time_step: float | None = None  # None -> PhysicalParameters.time_step
    fd_jacobian: bool = False       # finite-difference elastic Jacobian (cross-check)
    head_flow_model: str = "classical"
    mobility_floor: float = 0.25    # spectral floor for the drag solve, 0 = exact
    mobility_refresh: int = 8       # steps between spectrum recomputations

    def __post_init__(self):
        if not 0.0 < self.newton_tol <= 1e-2:
            raise ValueError(f"newton_tol must lie in (0, 1e-2], got {self.newton_tol}")
        if self.max_newton_iters < 5:
            raise ValueError(f"max_newton_iters must be >= 5, got {self.max_newton_iters}")
        if self.mobility_floor < 0.0:
            raise ValueError("mobility_floor must be nonnegative")
        if self.mobility_refresh < 1:
            raise ValueError("mobility_refresh must be at least 1")


@dataclass
class StepDiagnostics:
    iterations: int = 0
    residuals: list = field(default_factory=list)
    converged: bool = False


@dataclass(frozen=True)
class AngularVelocityProfile:
    """Piecewise-constant, right-continuous actuation schedule omega(t)."""

    times: np.ndarray   # strictly increasing breakpoints [s]
    omegas: np.ndarray  # [rad/s]

    def __post_init__(self):
        t = np.asarray(self.times, dtype=float)
        w = np.asarray(self.omegas, dtype=float)
        if t.ndim != 1 or t.shape != w.shape or t.size == 0:
            raise ValueError("times and omegas must be equal-length 1-D arrays")
        if np.any(np.diff(t) <= 0.0):
            raise ValueError("breakpoint times must be strictly increasing")
        object.__setattr__(self, "times", t)
        object.__setattr__(self, "omegas", w)

    def value_at(self, t: float) -> float:
        idx = np.searchsorted(self.times, t, side="right") - 1
        return float(self.omegas[max(idx, 0)])

    @classmethod
    def constant(cls, omega: float) -> "AngularVelocityProfile":
        return cls(times=np.array([0.0]), omegas=np.array([omega]))

    @classmethod
    def pulse(cls, omega_low: float, omega_high: float, t_start: float,
              high_duration: float) -> "AngularVelocityProfile":
        """Low until t_start, high for high_duration, then low again."""
        if high_duration <= 0.0:
            return cls.constant(omega_low)
        return cls(
            times=np.array([0.0, t_start, t_start + high_duration]),
            omegas=np.array([omega_low, omega_high, omega_low]),
        )


@dataclass
class HeadTrajectory:
    """Head and first-node samples on the observation grid."""

    times: np.ndarray   # (S,)
    head: np.ndarray    # (S, 3) x_0
    node1: np.ndarray   # (S, 3) x_1
    node2: np.ndarray   # (S, 3) x_2
    omega: np.ndarray   # (S,) applied actuation [rad/s]


def external_force(state: RodState, params: PhysicalParameters,
                   controls: StepControls,
                   workspace: dict | None = None) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Hydrodynamic force vector at the current configuration.

    The head spin is closed self-consistently with the flagellar forces by
    torque balance inside the solve. Returns (f_ext over all DOFs, flagellar
    node forces (N-1, 3), head spin). A workspace dict, when provided,
    caches the clamped mobility spectrum between steps (refreshed every
    controls.mobility_refresh calls); the configuration drifts a fraction of
    an edge length between refreshes.
    """
    n = params.node_count
    pos = state.positions
    r_h = pos[1:] - pos[0]
    pos_idx, _ = node_dof_indices(n)
    node_vel = state.velocities[pos_idx]
    spectrum = None
    mobility = None
    if controls.mobility_floor > 0.0:
        if workspace is not None:
            age = workspace.get("age", 0)
            if "spectrum" not in workspace or age % controls.mobility_refresh == 0:
                mobility = hydro.assemble_mobility(
                    pos[1:], hydro.node_tangents(state.tangents),
                    params.viscosity, params.cutoff,
                )
                workspace["spectrum"] = hydro.clamped_spectrum(
                    mobility, controls.mobility_floor, params.viscosity
                )
            workspace["age"] = age + 1
            spectrum = workspace["spectrum"]
        else:
            mobility = hydro.assemble_mobility(
                pos[1:], hydro.node_tangents(state.tangents),
                params.viscosity, params.cutoff,
            )
            spectrum = hydro.clamped_spectrum(
                mobility, controls.mobility_floor, params.viscosity
            )
    if mobility is None:
        if spectrum is None:
            mobility = hydro.assemble_mobility(
                pos[1:], hydro.node_tangents(state.tangents),
                params.viscosity, params.cutoff,
            )
        else:
            # The cached spectrum carries the operator; the matrix itself is
            # not needed on non-refresh steps.
            mobility = hydro.MobilityOperator(
                matrix=np.empty((0, 0)), node_tangents=np.empty((0, 3)),
                cutoff=params.cutoff,
            )
    f_flag, head_spin = hydro.solve_forces_and_head_spin(
        mobility, node_vel[1:], r_h, state.head_velocity,
        params.head_radius, params.viscosity, model=controls.head_flow_model,
        spectral_floor=controls.mobility_floor, spectrum=spectrum,
    )
    f_head, _ = hydro.head_force_torque(
        f_flag, r_h, params.head_radius, params.viscosity,
        state.head_velocity, head_spin,
    )
    f_ext = np.zeros(4 * n - 1)
    f_ext[pos_idx[1:]] = f_flag
    f_ext[0:3] = f_head

    # Mount couple: the base edge is fixed in the head, so reorienting it
    # spins the head about a transverse axis against its rotational Stokes
    # drag. Realized as a drag force pair on the relative perpendicular
    # velocity of the base edge (torque 8 pi mu b^3 * W_perp over the arm).
    e0 = pos[1] - pos[0]
    e0_len2 = float(np.dot(e0, e0))
    v_rel = node_vel[1] - node_vel[0]
    v_perp = v_rel - (np.dot(v_rel, e0) / e0_len2) * e0
    mount = (8.0 * math.pi * params.viscosity * params.head_radius ** 3 / e0_len2) * v_perp
    f_ext[4:7] -= mount
    f_ext[0:3] += mount
    return f_ext, f_flag, head_spin


def step(state: RodState, rest: RestConfiguration, stiff: ElasticStiffnesses,
         params: PhysicalParameters, omega: float, controls: StepControls,
         workspace: dict | None = None) -> tuple[RodState, StepDiagnostics]:
    """Advance the system one time step under actuation rate omega [rad/s]."""
    if not math.isfinite(omega):
        raise ValueError("omega must be finite")
    dt = controls.time_step if controls.time_step is not None else params.time_step
    n = params.node_count
    q_old = state.dof_vector()
    v_old = state.velocities
    mass = rest.mass

    f_ext, f_flag, head_spin = external_force(state, params, controls, workspace)

    free = np.ones(4 * n - 1, dtype=bool)
    free[3] = False  # theta^0 carries the prescribed rotation

    q_new = q_old + dt * v_old
    q_new[3] = q_old[3] + omega * dt

    inertia = mass / dt ** 2
    dgesv = get_lapack_funcs(("gesv",), (q_old,))[0]

    def force_eval(q):
        pos, th = unpack_dofs(q)
        ev = evaluate_elastics(pos, th, state.ref_d1, state.tangents,
                               state.ref_twist, rest, stiff)
        residual = inertia * (q - q_old - dt * v_old) - ev.force - f_ext
        return ev, residual, np.linalg.norm(residual[free])

    diag = StepDiagnostics()
    converged = False
    ev, residual, rnorm = force_eval(q_new)
    diag.residuals.append(rnorm)
    # Floor keeps the tolerance above force rounding noise (~1e-12 EA) so a
    # force-free equilibrium converges immediately.
    scale = max(np.linalg.norm(f_ext), np.linalg.norm(ev.force),
                1e-6 * stiff.stretching)
    for it in range(controls.max_newton_iters):
        if rnorm <= controls.newton_tol * scale:
            converged = True
            break
        if controls.fd_jacobian:
            pos_new, th_new = unpack_dofs(q_new)
            jac_el = internal_force_jacobian_fd(
                pos_new, th_new, state.ref_d1, state.tangents, state.ref_twist,
                rest, stiff, 1e-7 * params.axial_length,
            )
        else:
            jac_el = jacobian_from_eval(ev, rest, stiff)
        jac = -jac_el
        jac[np.diag_indices_from(jac)] += inertia
        # Pin the constrained twist DOF: unit row/column, zero residual.
        jac[3, :] = 0.0
        jac[:, 3] = 0.0
        jac[3, 3] = 1.0
        rhs = residual.copy()
        rhs[3] = 0.0
        _, _, dq, info = dgesv(jac, rhs, overwrite_a=1, overwrite_b=1)
        if info != 0:
            raise NewtonDivergenceError(f"singular Newton system (dgesv info={info})", diag)

        # Backtracking on the residual norm.
        alpha = 1.0
        best = None
        for _ in range(10):
            q_try = q_new - alpha * dq
            q_try[3] = q_new[3]
            try:
                trial = force_eval(q_try)
            except DegenerateEdgeError:
                alpha *= 0.5
                continue
            if best is None or trial[2] < best[3]:
                best = (q_try, trial[0], trial[1], trial[2])
            if trial[2] < rnorm:
                break
            alpha *= 0.5
        if best is None:
            raise NewtonDivergenceError("line search failed on every step length", diag)
        q_new, ev, residual, rnorm = best
        diag.residuals.append(rnorm)
        diag.iterations = it + 1

    if not converged:
        raise NewtonDivergenceError(
            f"Newton stalled at residual {rnorm:.3e} (tol {controls.newton_tol * scale:.3e}) "
            f"after {controls.max_newton_iters} iterations", diag,
        )
    diag.converged = converged

    pos_new, th_new = unpack_dofs(q_new)
    v_new = (q_new - q_old) / dt
    omega_head = head_spin
    new_state = RodState(
        positions=pos_new,
        thetas=th_new,
        velocities=v_new,
        ref_d1=ev.d1,
        ref_d2=ev.d2,
        ref_twist=ev.ref_twist,
        head_velocity=v_new[0:3].copy(),
        head_angular_velocity=omega_head,
        time=state.time + dt,
    )
    return new_state, diag


def simulate(params: PhysicalParameters, profile: AngularVelocityProfile,
             duration: float, observation_interval: float,
             controls: StepControls | None = None,
             initial_state: RodState | None = None,
             rest: RestConfiguration | None = None,
             state_sink=None) -> HeadTrajectory:
    """Run the forward dynamics and sample the head every observation interval.

    Deterministic: identical inputs produce bit-identical outputs. On a
    non-converged step the integrator drops to half (then quarter) substeps
    and keeps the reduction for a one-second recovery window before trying
    the full step again; only a failure at the finest level propagates.
    ``state_sink``, when given, receives the full state at every
    observation instant.
    """
    if duration < 0.0:
        raise ValueError("duration must be nonnegative")
    controls = controls or StepControls()
    dt = controls.time_step if controls.time_step is not None else params.time_step
    ratio = observation_interval / dt
    steps_per_obs = int(round(ratio))
    if steps_per_obs < 1 or abs(ratio - steps_per_obs) > 1e-9 * max(ratio, 1.0):
        raise ValueError("observation_interval must be a positive integer multiple of the time step")

    state = initial_state.copy() if initial_state is not None else build_initial_configuration(params)
    if rest is None:
        rest = RestConfiguration.from_built_state(params, build_initial_configuration(params))
    stiff = ElasticStiffnesses.from_parameters(params)
    t0 = state.time

    n_samples = int(math.floor(duration / observation_interval + 1e-9)) + 1
    times = np.empty(n_samples)
    head = np.empty((n_samples, 3))
    node1 = np.empty((n_samples, 3))
    node2 = np.empty((n_samples, 3))
    omegas = np.empty(n_samples)

    def record(i: int, st: RodState, w: float) -> None:
        times[i] = st.time
        head[i] = st.positions[0]
        node1[i] = st.positions[1]
        node2[i] = st.positions[2]
        omegas[i] = w
        if state_sink is not None:
            state_sink(st)

    record(0, state, profile.value_at(t0))
    step_index = 0
    workspace: dict = {}
    recover = 0  # remaining steps to run at half size before retrying full
    recover_window = max(int(round(1.0 / dt)), 1)
    for i in range(1, n_samples):
        for _ in range(steps_per_obs):
            t = t0 + step_index * dt
            w = profile.value_at(t)
            levels = (1, 2) if recover > 0 else (0, 1, 2)
            advanced = False
            for level in levels:
                sub = 2 ** level
                ctl = controls if level == 0 else replace(
                    controls, time_step=dt / sub, mobility_refresh=1
                )
                try:
                    st_try = state
                    for _ in range(sub):
                        st_try, _ = step(st_try, rest, stiff, params, w, ctl,
                                         workspace if level == 0 else None)
                    state = st_try
                    if level > 0 and recover == 0:
                        recover = recover_window
                        workspace.pop("spectrum", None)
                    advanced = True
                    break
                except NewtonDivergenceError as exc:
                    if level == 2:
                        raise SimulationError(
                            f"step at t={t:.6f}s failed even at a quarter of the "
                            f"time step: {exc}"
                        ) from exc
            assert advanced
            if recover > 0:
                recover -= 1
            step_index += 1
        record(i, state, profile.value_at(t0 + step_index * dt))
    return HeadTrajectory(times=times, head=head, node1=node1, node2=node2, omega=omegas)
