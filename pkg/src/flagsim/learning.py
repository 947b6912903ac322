"""Steering dataset generation and the inverse-dynamics regressors.

The regressors are small feed-forward networks (2-20-10-5-m, tanh hidden
layers, linear output) trained by damped second-order least squares with
evidence-based reweighting of the sum-squared-error and weight-decay terms.
Training is deterministic given the seed.
"""

from __future__ import annotations

import json
import math
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field, replace

import numpy as np

from . import geometry
from .geometry import GeometryError, SteeringDatapoint, parameterize_segment
from .params import PhysicalParameters
from .stepper import AngularVelocityProfile, StepControls, simulate

HIDDEN_LAYERS = (20, 10, 5)


# ---------------------------------------------------------------------------
# model


@dataclass
class MLPModel:
    """Weights and normalizers of one regressor."""

    layer_sizes: list
    weights: list            # per layer, (out, in)
    biases: list             # per layer, (out,)
    input_shift: np.ndarray
    input_scale: np.ndarray
    output_shift: np.ndarray
    output_scale: np.ndarray
    metadata: dict = field(default_factory=dict)

    def predict(self, inputs: np.ndarray) -> np.ndarray:
        """Evaluate the network; inputs (n, d_in) -> (n, d_out)."""
        x = (np.atleast_2d(inputs) - self.input_shift) / self.input_scale
        for w, b in zip(self.weights[:-1], self.biases[:-1]):
            x = np.tanh(x @ w.T + b)
        x = x @ self.weights[-1].T + self.biases[-1]
        return x * self.output_scale + self.output_shift

    def to_json_dict(self) -> dict:
        return {
            "layer_sizes": list(self.layer_sizes),
            "weights": [w.tolist() for w in self.weights],
            "biases": [b.tolist() for b in self.biases],
            "input_norm": {"shift": self.input_shift.tolist(),
                           "scale": self.input_scale.tolist()},
            "output_norm": {"shift": self.output_shift.tolist(),
                            "scale": self.output_scale.tolist()},
            "metadata": self.metadata,
        }

    @classmethod
    def from_json_dict(cls, data: dict) -> "MLPModel":
        return cls(
            layer_sizes=list(data["layer_sizes"]),
            weights=[np.asarray(w, dtype=float) for w in data["weights"]],
            biases=[np.asarray(b, dtype=float) for b in data["biases"]],
            input_shift=np.asarray(data["input_norm"]["shift"], dtype=float),
            input_scale=np.asarray(data["input_norm"]["scale"], dtype=float),
            output_shift=np.asarray(data["output_norm"]["shift"], dtype=float),
            output_scale=np.asarray(data["output_norm"]["scale"], dtype=float),
            metadata=dict(data.get("metadata", {})),
        )

    def save(self, path) -> None:
        text = json.dumps(self.to_json_dict(), indent=1, sort_keys=True)
        with open(path, "w") as fh:
            fh.write(text)

    @classmethod
    def load(cls, path) -> "MLPModel":
        with open(path) as fh:
            return cls.from_json_dict(json.load(fh))


@dataclass(frozen=True)
class TrainControls:
    seed: int = 0
    max_epochs: int = 400
    patience: int = 25
    validation_fraction: float = 0.2
    mu_initial: float = 1e-2
    mu_raise: float = 5.0
    mu_drop: float = 0.3
    mu_limit: float = 1e12
    fixed_regularization: tuple | None = None  # (alpha, beta) to disable re-estimation


@dataclass
class TrainResult:
    model: MLPModel
    train_rmse: float
    val_rmse: float
    epochs: int
    alpha: float
    beta: float
    loss_shares: np.ndarray  # per-output share of the final squared error


def _init_parameters(layer_sizes, rng):
    weights = []
    biases = []
    for fan_in, fan_out in zip(layer_sizes[:-1], layer_sizes[1:]):
        scale = 1.0 / math.sqrt(fan_in)
        weights.append(rng.uniform(-scale, scale, size=(fan_out, fan_in)))
        biases.append(rng.uniform(-scale, scale, size=fan_out))
    return weights, biases


def _flatten(weights, biases):
    return np.concatenate([w.ravel() for w in weights]
                          + [b.ravel() for b in biases])


def _unflatten(theta, layer_sizes):
    weights = []
    biases = []
    pos = 0
    for fan_in, fan_out in zip(layer_sizes[:-1], layer_sizes[1:]):
        weights.append(theta[pos: pos + fan_out * fan_in].reshape(fan_out, fan_in))
        pos += fan_out * fan_in
    for fan_out in layer_sizes[1:]:
        biases.append(theta[pos: pos + fan_out])
        pos += fan_out
    return weights, biases


def _forward(x, weights, biases):
    activations = [x]
    for w, b in zip(weights[:-1], biases[:-1]):
        activations.append(np.tanh(activations[-1] @ w.T + b))
    activations.append(activations[-1] @ weights[-1].T + biases[-1])
    return activations


def _jacobian(x, weights, biases, layer_sizes):
    """Per-sample Jacobian of every output wrt the flat parameter vector.

    Returns (errors-layout Jacobian (n*m, P), outputs (n, m)).
    """
    n = x.shape[0]
    m = layer_sizes[-1]
    acts = _forward(x, weights, biases)
    out = acts[-1]
    n_layers = len(weights)

    w_sizes = [w.size for w in weights]
    b_sizes = [b.size for b in biases]
    w_offsets = np.concatenate([[0], np.cumsum(w_sizes)])
    b_offsets = np.concatenate([[0], np.cumsum(b_sizes)]) + w_offsets[-1]
    total = w_offsets[-1] + sum(b_sizes)

    jac = np.empty((n, m, total))
    for o in range(m):
        # delta at the linear output layer: one-hot on output o
        delta = np.zeros((n, layer_sizes[-1]))
        delta[:, o] = 1.0
        for layer in range(n_layers - 1, -1, -1):
            a_prev = acts[layer]
            jac[:, o, w_offsets[layer]: w_offsets[layer + 1]] = (
                delta[:, :, None] * a_prev[:, None, :]
            ).reshape(n, -1)
            jac[:, o, b_offsets[layer]: b_offsets[layer + 1]] = delta
            if layer > 0:
                delta = (delta @ weights[layer]) * (1.0 - acts[layer] ** 2)
    return jac.reshape(n * m, total), out


def train_regressor(inputs: np.ndarray, targets: np.ndarray,
                    controls: TrainControls | None = None,
                    hidden: tuple = HIDDEN_LAYERS,
                    normalize_outputs: bool = True) -> TrainResult:
    """Fit one network by regularized second-order least squares.

    Minimizes beta * sum(errors^2)/2 + alpha * sum(weights^2)/2 with damped
    Gauss-Newton updates; unless fixed_regularization is given, alpha and
    beta are re-estimated each accepted step from the effective number of
    parameters (evidence framework). Keeps the best-validation iterate.
    """
    controls = controls or TrainControls()
    inputs = np.atleast_2d(np.asarray(inputs, dtype=float))
    targets = np.asarray(targets, dtype=float)
    if targets.ndim == 1:
        targets = targets[:, None]
    n, d_in = inputs.shape
    d_out = targets.shape[1]
    if n < 20:
        raise ValueError(f"need at least 20 datapoints, got {n}")
    if not (np.all(np.isfinite(inputs)) and np.all(np.isfinite(targets))):
        raise ValueError("inputs and targets must be finite")

    in_shift = inputs.mean(axis=0)
    in_scale = inputs.std(axis=0)
    in_scale[in_scale <= 0.0] = 1.0
    if normalize_outputs:
        out_shift = targets.mean(axis=0)
        out_scale = targets.std(axis=0)
        out_scale[out_scale <= 0.0] = 1.0
    else:
        out_shift = np.zeros(targets.shape[1])
        out_scale = np.ones(targets.shape[1])
    x_all = (inputs - in_shift) / in_scale
    y_all = (targets - out_shift) / out_scale

    layer_sizes = [d_in, *hidden, d_out]
    # separate generators: the parameter draw must not depend on dataset size
    weights, biases = _init_parameters(layer_sizes, np.random.default_rng(controls.seed))
    n_val = int(round(controls.validation_fraction * n))
    if n_val > 0:
        perm = np.random.default_rng(controls.seed + 9973).permutation(n)
        val_idx = perm[:n_val]
        train_idx = perm[n_val:]
    else:
        val_idx = np.empty(0, dtype=int)
        train_idx = np.arange(n)
    x_tr, y_tr = x_all[train_idx], y_all[train_idx]
    x_val, y_val = x_all[val_idx], y_all[val_idx]
    theta = _flatten(weights, biases)
    n_params = theta.shape[0]
    n_eff = x_tr.shape[0] * d_out

    if controls.fixed_regularization is not None:
        alpha, beta = controls.fixed_regularization
    else:
        alpha, beta = 1e-4, 1.0
    mu = controls.mu_initial

    def objective(th):
        w, b = _unflatten(th, layer_sizes)
        e = (_forward(x_tr, w, b)[-1] - y_tr).ravel()
        return 0.5 * beta * float(e @ e) + 0.5 * alpha * float(th @ th), e

    def val_rmse_of(th):
        if x_val.shape[0] == 0:
            w, b = _unflatten(th, layer_sizes)
            e = (_forward(x_tr, w, b)[-1] - y_tr).ravel()
            return float(np.sqrt(np.mean(e ** 2)))
        w, b = _unflatten(th, layer_sizes)
        e = (_forward(x_val, w, b)[-1] - y_val).ravel()
        return float(np.sqrt(np.mean(e ** 2)))

    best_theta = theta.copy()
    best_val = val_rmse_of(theta)
    stale = 0
    epochs_run = 0
    f_cur, err = objective(theta)
    for epoch in range(controls.max_epochs):
        epochs_run = epoch + 1
        w, b = _unflatten(theta, layer_sizes)
        jac, _ = _jacobian(x_tr, w, b, layer_sizes)
        jtj = beta * (jac.T @ jac)
        grad = beta * (jac.T @ err) + alpha * theta
        if np.linalg.norm(grad) <= 1e-10 * max(1.0, float(np.linalg.norm(theta))):
            best_theta = theta.copy()
            best_val = val_rmse_of(theta)
            break

        accepted = False
        for _ in range(25):
            h = jtj.copy()
            h[np.diag_indices_from(h)] += alpha + mu
            try:
                step_vec = np.linalg.solve(h, grad)
            except np.linalg.LinAlgError:
                mu *= controls.mu_raise
                continue
            candidate = theta - step_vec
            f_new, err_new = objective(candidate)
            if np.isfinite(f_new) and f_new < f_cur:
                theta = candidate
                f_cur, err = f_new, err_new
                mu = max(mu * controls.mu_drop, 1e-14)
                accepted = True
                break
            mu *= controls.mu_raise
            if mu > controls.mu_limit:
                break
        if not accepted:
            break

        if controls.fixed_regularization is None:
            # evidence re-estimation of the regularizers
            h = jtj.copy()
            h[np.diag_indices_from(h)] += alpha
            try:
                gamma = n_params - alpha * np.trace(np.linalg.inv(h))
            except np.linalg.LinAlgError:
                gamma = 0.5 * n_params
            gamma = min(max(gamma, 1e-6), n_params)
            e_w = 0.5 * float(theta @ theta)
            e_d = 0.5 * float(err @ err)
            alpha = gamma / max(2.0 * e_w, 1e-12)
            beta = max(n_eff - gamma, 1.0) / max(2.0 * e_d, 1e-12)
            f_cur = 0.5 * beta * float(err @ err) + 0.5 * alpha * float(theta @ theta)

        val = val_rmse_of(theta)
        if val < best_val - 1e-12:
            best_val = val
            best_theta = theta.copy()
            stale = 0
        else:
            stale += 1
            if stale >= controls.patience:
                break


    weights, biases = _unflatten(best_theta, layer_sizes)
    e_tr = (_forward(x_tr, weights, biases)[-1] - y_tr)
    train_rmse = float(np.sqrt(np.mean(e_tr.ravel() ** 2)))
    shares = (np.sum(e_tr ** 2, axis=0) / max(float(np.sum(e_tr ** 2)), 1e-300))
    model = MLPModel(
        layer_sizes=layer_sizes,
        weights=[w.copy() for w in weights],
        biases=[b.copy() for b in biases],
        input_shift=in_shift,
        input_scale=in_scale,
        output_shift=out_shift,
        output_scale=out_scale,
        metadata={
            "seed": controls.seed,
            "train_rmse_normalized": train_rmse,
            "val_rmse_normalized": best_val,
            "epochs": epochs_run,
            "input_low": inputs.min(axis=0).tolist(),
            "input_high": inputs.max(axis=0).tolist(),
        },
    )
    return TrainResult(model=model, train_rmse=train_rmse, val_rmse=best_val,
                       epochs=epochs_run, alpha=float(alpha), beta=float(beta),
                       loss_shares=shares)


# ---------------------------------------------------------------------------
# dataset generation


@dataclass(frozen=True)
class DatasetSpec:
    """Protocol for generating steering datapoints from long runs."""

    total_time: float                 # [s] length of each long trajectory
    t_high_grid: tuple                # pulse durations [s]
    settle_time: float                # t0: pulse application instant [s]
    segments_per_trajectory: int = 8
    seed: int = 0

    def __post_init__(self):
        if self.total_time <= 0.0 or self.settle_time <= 0.0:
            raise ValueError("total_time and settle_time must be positive")
        if any(t < 0.0 for t in self.t_high_grid):
            raise ValueError("pulse durations must be nonnegative")
        if self.segments_per_trajectory < 1:
            raise ValueError("need at least one segment per trajectory")


@dataclass
class RejectionRecord:
    t_high: float
    t_end: float
    reason: str


@dataclass
class GeneratedDataset:
    datapoints: list
    rejections: list
    cruise_speed: float          # measured below-buckling speed [m/s]
    cruise_direction: np.ndarray


def _run_pulse_trajectory(params, controls, omega_low, omega_high, t_high,
                          total_time, settle_time, dt_obs):
    profile = AngularVelocityProfile.pulse(omega_low, omega_high, settle_time, t_high)
    return simulate(params, profile, total_time, dt_obs, controls=controls)


def extract_segments(traj, spec: DatasetSpec, t_high: float, dt_obs: float,
                     k: int) -> tuple[list, list]:
    """Datapoints and rejections from one long pulsed trajectory."""
    datapoints = []
    rejections = []
    t0 = spec.settle_time
    lag = k * dt_obs
    lo = t0 + t_high + lag
    hi = spec.total_time
    if hi <= lo + dt_obs:
        return [], [RejectionRecord(t_high, hi, "trajectory shorter than the lag window")]
    # evenly spaced segment endpoints, snapped to the observation grid
    ends = np.linspace(lo + dt_obs, hi, spec.segments_per_trajectory)
    base_idx = int(round(t0 / dt_obs))
    for t_end in ends:
        idx_end = int(round(t_end / dt_obs))
        idx_end = min(idx_end, traj.times.shape[0] - 1)
        t_end_snapped = idx_end * dt_obs
        t_low = t_end_snapped - t0 - t_high
        if not lag < t_low <= spec.total_time - t_high - t0:
            rejections.append(RejectionRecord(t_high, t_end_snapped,
                                              "t_low outside the admissible range"))
            continue
        samples = traj.head[base_idx - k: idx_end + 1]
        try:
            point = parameterize_segment(
                samples, traj.node1[base_idx], traj.node2[base_idx],
                t_high, t_low, dt_obs, k,
            )
            point.validate()
        except (GeometryError, ValueError) as exc:
            rejections.append(RejectionRecord(t_high, t_end_snapped,
                                              f"{type(exc).__name__}: {exc}"))
            continue
        datapoints.append(point)
    return datapoints, rejections


def measure_cruise(params: PhysicalParameters, omega_low: float,
                   controls: StepControls, settle_time: float, dt_obs: float,
                   window: float = 40.0) -> tuple[float, np.ndarray, object]:
    """Steady below-buckling speed and direction from a calibration run."""
    traj = simulate(params, AngularVelocityProfile.constant(omega_low),
                    settle_time + window, dt_obs, controls=controls)
    i0 = int(round(settle_time / dt_obs))
    disp = traj.head[-1] - traj.head[i0]
    elapsed = traj.times[-1] - traj.times[i0]
    speed = float(np.linalg.norm(disp) / elapsed)
    direction = disp / max(np.linalg.norm(disp), 1e-300)
    return speed, direction, traj


def generate_dataset(params: PhysicalParameters, spec: DatasetSpec,
                     omega_low: float, omega_high: float,
                     omega_buckling: float,
                     controls: StepControls | None = None,
                     dt_obs: float = 0.5, k: int = 10,
                     workers: int = 1) -> GeneratedDataset:
    """Run the pulse protocol over the grid and extract training tuples.

    One long simulation per pulse duration; segments with different end
    points become individual datapoints. Deterministic given the seed; a
    failing trajectory is logged and skipped rather than aborting the run.
    """
    if not omega_low < omega_buckling < omega_high:
        raise ValueError("need omega_low < omega_buckling < omega_high")
    controls = controls or StepControls()

    datapoints: list = []
    rejections: list = []

    jobs = [(params, controls, omega_low, omega_high, float(t_high),
             spec.total_time, spec.settle_time, dt_obs)
            for t_high in spec.t_high_grid]
    if workers > 1:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            trajs = list(pool.map(_pulse_job, jobs))
    else:
        trajs = [_pulse_job(j) for j in jobs]

    for t_high, traj in zip(spec.t_high_grid, trajs):
        if isinstance(traj, Exception):
            rejections.append(RejectionRecord(float(t_high), float("nan"),
                                              f"simulation failed: {traj}"))
            continue
        points, rejected = extract_segments(traj, spec, float(t_high), dt_obs, k)
        datapoints.extend(points)
        rejections.extend(rejected)

    speed, direction, _ = measure_cruise(params, omega_low, controls,
                                         spec.settle_time, dt_obs)
    return GeneratedDataset(datapoints=datapoints, rejections=rejections,
                            cruise_speed=speed, cruise_direction=direction)


def _pulse_job(args):
    try:
        return _run_pulse_trajectory(*args)
    except Exception as exc:  # logged by the caller per trajectory
        return exc


# ---------------------------------------------------------------------------
# inverse maps


@dataclass
class InverseMapsModels:
    f_high: TrainResult    # (h, alpha) -> t_high
    f_low: TrainResult     # (h, alpha) -> t_low
    f_beta: TrainResult    # (t_high, t_low) -> beta
    f_l: TrainResult       # (t_high, t_low) -> l


def dataset_arrays(datapoints) -> dict:
    arr = np.array([[d.t_high, d.t_low, d.h, d.alpha, d.beta, d.l]
                    for d in datapoints])
    return {
        "t_high": arr[:, 0], "t_low": arr[:, 1], "h": arr[:, 2],
        "alpha": arr[:, 3], "beta": arr[:, 4], "l": arr[:, 5],
    }


def fit_inverse_maps(datapoints, controls: TrainControls | None = None) -> InverseMapsModels:
    """Train the four separate regressors used by the controller."""
    if not datapoints:
        raise ValueError("dataset is empty")
    controls = controls or TrainControls()
    cols = dataset_arrays(datapoints)
    geometry_in = np.stack([cols["h"], cols["alpha"]], axis=1)
    timing_in = np.stack([cols["t_high"], cols["t_low"]], axis=1)
    results = {}
    seed_offsets = {"f_high": 1, "f_low": 2, "f_beta": 3, "f_l": 4}
    for name, x, y in (
        ("f_high", geometry_in, cols["t_high"]),
        ("f_low", geometry_in, cols["t_low"]),
        ("f_beta", timing_in, cols["beta"]),
        ("f_l", timing_in, cols["l"]),
    ):
        result = train_regressor(x, y, replace(controls, seed=controls.seed + seed_offsets[name]))
        result.model.metadata["target"] = name
        results[name] = result
    return InverseMapsModels(f_high=results["f_high"], f_low=results["f_low"],
                             f_beta=results["f_beta"], f_l=results["f_l"])


def steering_slope(datapoints) -> tuple[float, float]:
    """Slope c of alpha against t_high over the dataset, with its std error."""
    cols = dataset_arrays(datapoints)
    x = cols["t_high"]
    y = cols["alpha"]
    n = x.shape[0]
    if n < 3:
        raise ValueError("need at least three datapoints for the slope")
    den = n * np.sum(x * x) - np.sum(x) ** 2
    if den <= 0.0:
        raise ValueError("no spread in pulse durations")
    c = (n * np.sum(x * y) - np.sum(x) * np.sum(y)) / den
    intercept = (np.sum(y) - c * np.sum(x)) / n
    resid = y - c * x - intercept
    var = float(resid @ resid) / max(n - 2, 1)
    stderr = math.sqrt(n * var / den)
    return float(c), float(stderr)


def fit_joint_inverse_map(datapoints, cruise_speed: float,
                          controls: TrainControls | None = None,
                          scaled: bool = True) -> TrainResult:
    """Single two-output network (h, alpha) -> (t_high, t_low).

    With scaled=True the targets are rescaled to (h c t_high, v t_low) so the
    end-point error is balanced between the outputs; the scaling is inverted
    at query time through the metadata. Unscaled training exposes the raw
    imbalance (loss share dominated by t_low).
    """
    if not datapoints:
        raise ValueError("dataset is empty")
    controls = controls or TrainControls()
    c, stderr = steering_slope(datapoints)
    if abs(c) <= 2.0 * stderr:
        raise ValueError(
            f"turn-angle slope {c:.3g} +- {stderr:.3g} deg/s is not significantly "
            "nonzero; the dataset holds too little steering variation"
        )
    cols = dataset_arrays(datapoints)
    inputs = np.stack([cols["h"], cols["alpha"]], axis=1)
    c_rad = math.radians(c)
    if scaled:
        # both targets in meters: endpoint displacement per unit time error
        targets = np.stack([cols["h"] * c_rad * cols["t_high"],
                            cruise_speed * cols["t_low"]], axis=1)
    else:
        targets = np.stack([cols["t_high"], cols["t_low"]], axis=1)
    # outputs stay in physical units so the loss balance reflects the scaling
    result = train_regressor(inputs, targets, controls, normalize_outputs=False)
    result.model.metadata.update({
        "joint": True,
        "scaled": bool(scaled),
        "slope_c_deg_per_s": c,
        "cruise_speed": cruise_speed,
    })
    return result


def predict_joint_times(result: TrainResult, h: float, alpha: float) -> tuple[float, float]:
    """Invert the joint model's target scaling at query time."""
    meta = result.model.metadata
    pred = result.model.predict(np.array([[h, alpha]]))[0]
    if meta.get("scaled"):
        c_rad = math.radians(meta["slope_c_deg_per_s"])
        v = meta["cruise_speed"]
        return float(pred[0] / (h * c_rad)), float(pred[1] / v)
    return float(pred[0]), float(pred[1])
