"""The calibration driver.

:func:`preprocess` evaluates a Latin hypercube design and builds the search
representation (normalised original space, an active subspace, or an
autoencoder latent space) plus an optional neural prior mean.  :func:`run`
then alternates between evaluating the pending batch and proposing the next
one from a GP fitted in the search coordinates, for ``trials`` iterations
and a final evaluation-only pass.

Iteration ``k`` of the curve is the best loss after the batch proposed at
iteration ``k`` has been evaluated; iteration 0 is the initial design.
"""

from __future__ import annotations

import concurrent.futures
import dataclasses
import enum
import logging
import math
import time
from typing import Callable, Optional

import numpy as np

from calibrex import acquisition as acq
from calibrex import active_subspace as asub
from calibrex import gp as gplib
from calibrex import neural, rng as rngs, sampling
from calibrex.errors import (
    CalibrexError,
    InfeasibleLatentError,
    InvalidArgumentError,
    NumericalError,
    SimulatorAbort,
)
from calibrex.kernels import KernelSpec
from calibrex.simulators import SimulatorHandle, handle_from_dict, simulate

log = logging.getLogger(__name__)

STATE_VERSION = 1


class DrMode(str, enum.Enum):
    ORIGINAL = "original"
    AS_STATIC = "as-static"
    AS_DYNAMIC = "as-dynamic"
    DL_STATIC = "dl-static"
    DL_DYNAMIC = "dl-dynamic"

    @property
    def is_as(self) -> bool:
        return self in (DrMode.AS_STATIC, DrMode.AS_DYNAMIC)

    @property
    def is_dl(self) -> bool:
        return self in (DrMode.DL_STATIC, DrMode.DL_DYNAMIC)

    @property
    def is_dynamic(self) -> bool:
        return self in (DrMode.AS_DYNAMIC, DrMode.DL_DYNAMIC)


class MeanMode(str, enum.Enum):
    ZERO = "zero"
    DL_STATIC = "dl-static"
    DL_DYNAMIC = "dl-dynamic"


# Accept the short names used in the literature as well.
_DR_ALIASES = {"as_s": "as-static", "as_d": "as-dynamic", "dl_s": "dl-static", "dl_d": "dl-dynamic"}
_MEAN_ALIASES = {"dl_s": "dl-static", "dl_d": "dl-dynamic"}


def _enum(cls, value, aliases):
    if isinstance(value, cls):
        return value
    v = str(value).strip().lower()
    try:
        return cls(aliases.get(v, v))
    except ValueError:
        choices = ", ".join(m.value for m in cls)
        raise InvalidArgumentError(f"unknown {cls.__name__} {value!r}; choose from {choices}") from None


@dataclasses.dataclass(frozen=True)
class CalibrationConfig:
    """Everything needed to reproduce a run.

    ``kernel.output_variance`` and ``kernel.noise_variance`` are the initial
    values *relative to the mean square of the GP targets*; the absolute
    values are fitted once at least ``min_points_for_hyper`` evaluations exist.
    """

    simulator: SimulatorHandle
    trials: int = 60
    batch_size: int = 4
    pool_size: int = sampling.DEFAULT_POOL_SIZE
    initial_design: Optional[int] = None
    dr_mode: DrMode = DrMode.ORIGINAL
    mean_mode: MeanMode = MeanMode.ZERO
    acquisition: acq.AcquisitionSpec = acq.AcquisitionSpec()
    kernel: KernelSpec = KernelSpec(length_scale=0.5, noise_variance=1e-6)
    length_scale_bounds: tuple = (1e-2, 2e1)
    hyper_starts: int = 8
    hyper_sweeps: int = 3
    min_points_for_hyper: int = 10
    active_dim: Optional[int] = None
    latent_dim: Optional[int] = None
    k_neighbors: Optional[int] = None
    rebuild_every: int = 2
    neural: neural.TrainConfig = neural.TrainConfig()
    seed: int = 0
    parallelism: int = 4
    max_failure_fraction: float = 0.5
    name: str = ""

    def __post_init__(self):
        object.__setattr__(self, "dr_mode", _enum(DrMode, self.dr_mode, _DR_ALIASES))
        object.__setattr__(self, "mean_mode", _enum(MeanMode, self.mean_mode, _MEAN_ALIASES))
        if self.trials < 1 or self.batch_size < 1:
            raise InvalidArgumentError("trials and batch_size must be >= 1")
        if self.pool_size < self.batch_size:
            raise InvalidArgumentError("pool_size must be >= batch_size")
        if self.parallelism < 1 or self.rebuild_every < 1:
            raise InvalidArgumentError("parallelism and rebuild_every must be >= 1")
        d = self.simulator.dim
        if self.active_dim is not None and not 1 <= self.active_dim <= d:
            raise InvalidArgumentError(f"active_dim must lie in [1, {d}]")
        if self.latent_dim is not None and not 1 <= self.latent_dim < d:
            raise InvalidArgumentError(f"latent_dim must lie in [1, {d - 1}]")
        if self.dr_mode.is_dl and d < 2:
            raise InvalidArgumentError("autoencoder reduction needs at least 2 dimensions")

    @property
    def design_size(self) -> int:
        return sampling.initial_design_size(self.simulator.dim, self.initial_design)

    def replace(self, **changes) -> "CalibrationConfig":
        return dataclasses.replace(self, **changes)

    def to_dict(self) -> dict:
        return {
            "name": self.name,
            "simulator": self.simulator.to_dict(),
            "trials": self.trials,
            "batch_size": self.batch_size,
            "pool_size": self.pool_size,
            "initial_design": self.design_size,
            "dr_mode": self.dr_mode.value,
            "mean_mode": self.mean_mode.value,
            "acquisition": self.acquisition.to_dict(),
            "kernel": self.kernel.to_dict(),
            "length_scale_bounds": list(self.length_scale_bounds),
            "hyper_starts": self.hyper_starts,
            "hyper_sweeps": self.hyper_sweeps,
            "min_points_for_hyper": self.min_points_for_hyper,
            "active_dim": self.active_dim,
            "latent_dim": self.latent_dim,
            "k_neighbors": self.k_neighbors,
            "rebuild_every": self.rebuild_every,
            "neural": self.neural.to_dict(),
            "seed": self.seed,
            "parallelism": self.parallelism,
            "max_failure_fraction": self.max_failure_fraction,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "CalibrationConfig":
        """Build a config from its JSON form; omitted keys take their defaults."""
        if not isinstance(d, dict):
            raise InvalidArgumentError("configuration must be a JSON object")
        fields = {f.name for f in dataclasses.fields(cls)}
        unknown = set(d) - fields
        if unknown:
            raise InvalidArgumentError(f"unknown configuration keys {sorted(unknown)}")
        if "simulator" not in d:
            raise InvalidArgumentError("configuration needs a 'simulator' entry")
        kw = dict(d)
        kw["simulator"] = handle_from_dict(d["simulator"])
        if "acquisition" in d:
            kw["acquisition"] = _nested(acq.AcquisitionSpec, d["acquisition"], "acquisition")
        if "kernel" in d:
            kw["kernel"] = _nested(KernelSpec, d["kernel"], "kernel")
        if "neural" in d:
            kw["neural"] = neural.TrainConfig.from_dict(d["neural"])
        if "length_scale_bounds" in d:
            lo, hi = d["length_scale_bounds"]
            if not 0 < lo < hi:
                raise InvalidArgumentError("length_scale_bounds must satisfy 0 < lower < upper")
            kw["length_scale_bounds"] = (float(lo), float(hi))
        try:
            return cls(**kw)
        except (TypeError, ValueError) as exc:
            raise InvalidArgumentError(str(exc)) from None


def _nested(cls, d, where):
    if not isinstance(d, dict):
        raise InvalidArgumentError(f"{where} must be a JSON object")
    unknown = set(d) - {f.name for f in dataclasses.fields(cls)}
    if unknown:
        raise InvalidArgumentError(f"unknown {where} keys {sorted(unknown)}")
    try:
        return cls.from_dict(d)
    except (TypeError, ValueError) as exc:
        raise InvalidArgumentError(f"bad {where} settings: {exc}") from None


# --- records and state ------------------------------------------------------


@dataclasses.dataclass
class EvaluationRecord:
    id: str
    iteration: int
    theta: np.ndarray
    latent: Optional[np.ndarray]
    loss: float = math.nan
    y: Optional[np.ndarray] = None
    wall_time: float = 0.0
    error: Optional[str] = None
    clamped: bool = False

    @property
    def ok(self) -> bool:
        return self.error is None

    def to_dict(self) -> dict:
        return {
            "id": self.id,
            "iteration": self.iteration,
            "theta": np.asarray(self.theta).tolist(),
            "latent": None if self.latent is None else np.asarray(self.latent).tolist(),
            "loss": None if math.isnan(self.loss) else self.loss,
            "wall_time": self.wall_time,
            "error": self.error,
            "clamped": self.clamped,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "EvaluationRecord":
        return cls(
            id=d["id"],
            iteration=int(d["iteration"]),
            theta=np.array(d["theta"], dtype=float),
            latent=None if d.get("latent") is None else np.array(d["latent"], dtype=float),
            loss=math.nan if d.get("loss") is None else float(d["loss"]),
            wall_time=float(d.get("wall_time", 0.0)),
            error=d.get("error"),
            clamped=bool(d.get("clamped", False)),
        )


@dataclasses.dataclass
class CalibrationState:
    evaluated: list = dataclasses.field(default_factory=list)
    failures: list = dataclasses.field(default_factory=list)
    pending: list = dataclasses.field(default_factory=list)
    iteration: int = 0
    next_id: int = 0
    kernel: Optional[KernelSpec] = None
    subspace: Optional[asub.Subspace] = None
    reducer: Optional[neural.ReducerNet] = None
    mean: Optional[neural.NeuralMean] = None
    curve: list = dataclasses.field(default_factory=list)
    issued: int = 0
    dropped: int = 0
    clamps: int = 0
    counters: dict = dataclasses.field(default_factory=lambda: {
        "subspace_builds": 0, "reducer_builds": 0, "mean_trainings": 0, "recover_retries": 0,
    })
    finished: bool = False

    @property
    def best(self) -> Optional[EvaluationRecord]:
        if not self.evaluated:
            return None
        return min(self.evaluated, key=lambda r: r.loss)

    def losses(self) -> np.ndarray:
        return np.array([r.loss for r in self.evaluated])

    def latents(self) -> np.ndarray:
        return np.array([r.latent for r in self.evaluated])

    def to_dict(self) -> dict:
        return {
            "state_version": STATE_VERSION,
            "evaluated": [r.to_dict() for r in self.evaluated],
            "failures": [r.to_dict() for r in self.failures],
            "pending": [r.to_dict() for r in self.pending],
            "iteration": self.iteration,
            "next_id": self.next_id,
            "kernel": None if self.kernel is None else self.kernel.to_dict(),
            "subspace": None if self.subspace is None else self.subspace.to_dict(),
            "reducer": None if self.reducer is None else self.reducer.to_dict(),
            "mean": None if self.mean is None else self.mean.to_dict(),
            "curve": list(self.curve),
            "issued": self.issued,
            "dropped": self.dropped,
            "clamps": self.clamps,
            "counters": dict(self.counters),
            "finished": self.finished,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "CalibrationState":
        if d.get("state_version") != STATE_VERSION:
            raise InvalidArgumentError(f"unsupported state version {d.get('state_version')!r}")
        return cls(
            evaluated=[EvaluationRecord.from_dict(r) for r in d["evaluated"]],
            failures=[EvaluationRecord.from_dict(r) for r in d["failures"]],
            pending=[EvaluationRecord.from_dict(r) for r in d["pending"]],
            iteration=int(d["iteration"]),
            next_id=int(d["next_id"]),
            kernel=None if d["kernel"] is None else KernelSpec.from_dict(d["kernel"]),
            subspace=None if d["subspace"] is None else asub.Subspace.from_dict(d["subspace"]),
            reducer=None if d["reducer"] is None else neural.ReducerNet.from_dict(d["reducer"]),
            mean=None if d["mean"] is None else neural.NeuralMean.from_dict(d["mean"]),
            curve=[float(v) for v in d["curve"]],
            issued=int(d["issued"]),
            dropped=int(d["dropped"]),
            clamps=int(d["clamps"]),
            counters=dict(d["counters"]),
            finished=bool(d["finished"]),
        )


# --- evaluation -------------------------------------------------------------


def loss(y_sim, y_obs) -> float:
    """Mean squared error between a simulated and an observed series."""
    y_sim = np.asarray(y_sim, dtype=float).ravel()
    y_obs = np.asarray(y_obs, dtype=float).ravel()
    if y_sim.shape != y_obs.shape:
        raise InvalidArgumentError(
            f"series lengths differ: simulated {y_sim.size}, observed {y_obs.size}"
        )
    diff = y_sim - y_obs
    return float(np.mean(diff * diff))


def _call_simulator(simulator, theta, seed, run_id):
    if isinstance(simulator, SimulatorHandle):
        return simulate(simulator, theta, seed, run_id)
    return np.asarray(simulator(theta, seed), dtype=float)


def evaluate_batch(
    simulator,
    batch: list,
    parallelism: int,
    observed,
    root_seed: int = 0,
) -> list:
    """Run every record of ``batch`` (theta filled in) and fill loss or error.

    ``simulator`` is a :class:`SimulatorHandle` or any callable
    ``(theta, seed) -> series``.  Runs proceed concurrently on up to
    ``parallelism`` threads; results are matched back by record id, so the
    returned list is in input order whatever the completion order.  A crash,
    timeout or bad reply marks that record failed and never raises.
    """
    if parallelism < 1:
        raise InvalidArgumentError("parallelism must be >= 1")

    def job(rec: EvaluationRecord):
        seed = rngs.derived_seed(root_seed, rngs.SIMULATOR, int(rec.id))
        start = time.perf_counter()
        try:
            y = _call_simulator(simulator, rec.theta, seed, rec.id)
            value = loss(y, observed)
            if not math.isfinite(value):
                raise InvalidArgumentError("non-finite loss")
            return rec.id, y, value, None, time.perf_counter() - start
        except Exception as exc:  # noqa: BLE001 - any simulator fault becomes a failed record
            return rec.id, None, math.nan, f"{type(exc).__name__}: {exc}", time.perf_counter() - start

    by_id = {rec.id: rec for rec in batch}
    if len(by_id) != len(batch):
        raise InvalidArgumentError("batch contains duplicate record ids")
    with concurrent.futures.ThreadPoolExecutor(max_workers=parallelism) as pool:
        futures = [pool.submit(job, rec) for rec in batch]
        for fut in concurrent.futures.as_completed(futures):
            run_id, y, value, error, elapsed = fut.result()
            rec = by_id[run_id]
            rec.y, rec.loss, rec.error, rec.wall_time = y, value, error, elapsed
            if error:
                log.warning("simulation %s failed: %s", run_id, error)
    return list(batch)


def _new_record(state: CalibrationState, iteration: int, theta, latent=None, clamped=False):
    rec = EvaluationRecord(str(state.next_id), iteration, np.asarray(theta, dtype=float),
                           None if latent is None else np.asarray(latent, dtype=float),
                           clamped=clamped)
    state.next_id += 1
    return rec


def _absorb(state: CalibrationState, records: list):
    for rec in records:
        (state.evaluated if rec.ok else state.failures).append(rec)


# --- representation ---------------------------------------------------------


def _normalized(config: CalibrationConfig, records) -> np.ndarray:
    return sampling.normalize(config.simulator.domain, np.array([r.theta for r in records]))


def _fit_subspace(config, state, iteration):
    X = _normalized(config, state.evaluated)
    sub = asub.find_active_subspace(X, state.losses(), config.k_neighbors, config.active_dim)
    state.counters["subspace_builds"] += 1
    log.info("iteration %d: active subspace dimension %d", iteration, sub.active_dim)
    return sub


def _reducer_dim(config, state) -> int:
    """Configured latent size, else the active-subspace gap dimension if one exists, else 2."""
    if config.latent_dim is not None:
        return config.latent_dim
    n = state.subspace.active_dim if state.subspace is not None else 2
    return int(min(max(n, 1), config.simulator.dim - 1))


def _build_representation(config: CalibrationConfig, state: CalibrationState, iteration: int):
    """(Re)build the search coordinates and re-express every evaluated point in them."""
    X = _normalized(config, state.evaluated)
    y = state.losses()
    mode = config.dr_mode
    if mode is DrMode.ORIGINAL:
        for rec, x in zip(state.evaluated, X):
            rec.latent = x
        return
    if mode.is_as:
        state.subspace = _fit_subspace(config, state, iteration)
        for rec, v in zip(state.evaluated, asub.project(state.subspace, X)):
            rec.latent = v
        return
    train_rng = rngs.stream(config.seed, rngs.REDUCER, iteration)
    if state.reducer is None:
        r = _reducer_dim(config, state)
        state.reducer = neural.train_reducer(X, y, r, config.neural, train_rng)
    else:
        state.reducer = neural.train_reducer(
            X, y, state.reducer.latent_dim, config.neural, train_rng,
            init=state.reducer, epochs=config.neural.tune_epochs,
        )
    state.counters["reducer_builds"] += 1
    for rec, v in zip(state.evaluated, state.reducer.encode(X)):
        rec.latent = v


def _latent_box(config, state) -> sampling.BoxDomain:
    if config.dr_mode is DrMode.ORIGINAL:
        return sampling.BoxDomain.cube(config.simulator.dim)
    if config.dr_mode.is_as:
        return asub.latent_box(state.subspace)
    return state.reducer.latent_bounds


def _train_mean(config, state, iteration, records):
    X = np.array([r.latent for r in records])
    y = np.array([r.loss for r in records])
    state.mean = neural.train_mean(X, y, config.neural, rngs.stream(config.seed, rngs.MEAN, iteration))
    state.counters["mean_trainings"] += 1


def _design_records(state):
    return [r for r in state.evaluated if r.iteration == 0]


# --- main loop --------------------------------------------------------------


def preprocess(config: CalibrationConfig, simulator=None) -> CalibrationState:
    """Evaluate the initial design and build representation and mean function."""
    simulator = config.simulator if simulator is None else simulator
    domain = config.simulator.domain
    q = config.design_size
    state = CalibrationState()
    design = sampling.lhs(domain, q, rngs.stream(config.seed, rngs.DESIGN))
    batch = [_new_record(state, 0, theta) for theta in design]
    evaluate_batch(simulator, batch, config.parallelism, config.simulator.observed, config.seed)
    _absorb(state, batch)
    state.issued = q
    n_failed = len(state.failures)
    if n_failed > config.max_failure_fraction * q or len(state.evaluated) < 2:
        raise SimulatorAbort(
            f"{n_failed} of {q} design evaluations failed; first error: "
            f"{state.failures[0].error if state.failures else 'n/a'}"
        )
    if config.dr_mode.is_dl and len(state.evaluated) < 10:
        raise SimulatorAbort("autoencoder reduction needs at least 10 successful design runs")

    _build_representation(config, state, 0)
    if config.mean_mode is not MeanMode.ZERO:
        _train_mean(config, state, 0, state.evaluated)
    state.curve.append(float(np.min(state.losses())))
    return state


def _initial_kernel(config, residual_ms: float) -> KernelSpec:
    k = config.kernel
    return k.replace(
        output_variance=k.output_variance * residual_ms,
        noise_variance=k.noise_variance * residual_ms,
    )


def _fit_gp(config, state, iteration) -> gplib.GpModel:
    X = state.latents()
    y = state.losses()
    mean_fn = state.mean if state.mean is not None else gplib.ZeroMean()
    resid = y - mean_fn(X)
    ms = max(float(np.mean(resid * resid)), 1e-12)
    kernel = state.kernel if state.kernel is not None else _initial_kernel(config, ms)
    model = gplib.GpModel(kernel, X, y, mean_fn)
    if model.n_train >= config.min_points_for_hyper:
        bounds = gplib.HyperBounds.scaled_to(ms, config.length_scale_bounds)
        model = gplib.optimize_hyperparameters(
            model, bounds, rngs.stream(config.seed, rngs.HYPER, iteration),
            n_starts=config.hyper_starts, sweeps=config.hyper_sweeps,
        )
    for _ in range(12):
        try:
            model = model if model.is_fitted else gplib.fit(model)
            break
        except NumericalError:
            k = model.kernel
            bumped = k.replace(noise_variance=max(k.noise_variance * 10.0, 1e-8 * k.output_variance))
            log.warning("GP factorization failed; raising noise variance to %g", bumped.noise_variance)
            model = model.with_kernel(bumped)
    else:
        raise NumericalError("could not factorize the GP kernel matrix")
    state.kernel = model.kernel
    return model


def _draw_pool(config, state, iteration) -> np.ndarray:
    box = _latent_box(config, state)
    pool_rng = rngs.stream(config.seed, rngs.POOL, iteration)
    if not config.dr_mode.is_as:
        return sampling.lhs(box, config.pool_size, pool_rng)
    # The latent box bounds the image of the cube; keep only points with a preimage.
    kept = []
    total = 0
    for _ in range(50):
        cand = sampling.lhs(box, config.pool_size, pool_rng)
        cand = cand[asub.is_feasible(state.subspace, cand)]
        kept.append(cand)
        total += cand.shape[0]
        if total >= config.pool_size:
            break
    pool = np.vstack(kept)[: config.pool_size]
    if pool.shape[0] < config.batch_size:
        raise InfeasibleLatentError("could not draw enough feasible latent candidates")
    return pool


def _to_original(config, state, v):
    """Map a latent suggestion to (normalised x, latent actually used, clamped flag) or None."""
    if config.dr_mode is DrMode.ORIGINAL:
        return np.clip(v, -1.0, 1.0), v, False
    if config.dr_mode.is_as:
        try:
            return asub.recover(state.subspace, v), v, False
        except InfeasibleLatentError:
            state.counters["recover_retries"] += 1
            v2 = asub.shrink_to_feasible(state.subspace, v)[0]
            try:
                return asub.recover(state.subspace, v2), v2, False
            except InfeasibleLatentError:
                log.warning("dropping infeasible latent suggestion %s", np.round(v, 4).tolist())
                return None
    x = state.reducer.decode(v)
    inside = np.all(np.abs(x) <= 1.0)
    return np.clip(x, -1.0, 1.0), v, not inside


def _propose(config, state, simulator_domain, iteration):
    mode = config.dr_mode
    rebuild = iteration % config.rebuild_every == 0
    if mode.is_dynamic and rebuild:
        _build_representation(config, state, iteration)
        if config.mean_mode is MeanMode.DL_STATIC:
            # coordinates moved; refit the static mean on the initial design
            _train_mean(config, state, iteration, _design_records(state))
    if config.mean_mode is MeanMode.DL_DYNAMIC and rebuild:
        _train_mean(config, state, iteration, state.evaluated)

    model = _fit_gp(config, state, iteration)
    pool = _draw_pool(config, state, iteration)
    n = min(config.batch_size, pool.shape[0])
    picks = acq.select_batch(
        model, pool, n, config.acquisition,
        rngs.stream(config.seed, rngs.FANTASY, iteration), iteration=iteration,
    )
    for v in picks:
        mapped = _to_original(config, state, v)
        if mapped is None:
            state.dropped += 1
            continue
        state.issued += 1
        x, v_used, clamped = mapped
        theta = simulator_domain.clip(sampling.denormalize(simulator_domain, x))
        if clamped:
            state.clamps += 1
        state.pending.append(_new_record(state, iteration, theta, v_used, clamped))


def step(config: CalibrationConfig, state: CalibrationState, simulator=None) -> CalibrationState:
    """One pass of the main loop: evaluate pending points, then propose unless finished."""
    if state.finished:
        return state
    simulator = config.simulator if simulator is None else simulator
    iteration = state.iteration + 1
    if state.pending:
        batch = state.pending
        state.pending = []
        evaluate_batch(simulator, batch, config.parallelism, config.simulator.observed, config.seed)
        _absorb(state, batch)
        state.curve.append(float(np.min(state.losses())))
    if iteration < config.trials + 1:
        _propose(config, state, config.simulator.domain, iteration)
        state.iteration = iteration
    else:
        state.finished = True
    return state


@dataclasses.dataclass
class CalibrationReport:
    config: CalibrationConfig
    state: CalibrationState

    @property
    def best(self) -> EvaluationRecord:
        return self.state.best

    @property
    def curve(self) -> list:
        return list(self.state.curve)

    @property
    def records(self) -> list:
        return list(self.state.evaluated)

    @property
    def failures(self) -> list:
        return list(self.state.failures)

    def summary(self) -> dict:
        best = self.best
        return {
            "best": {
                "id": best.id,
                "iteration": best.iteration,
                "theta": best.theta.tolist(),
                "latent": None if best.latent is None else best.latent.tolist(),
                "loss": best.loss,
            },
            "config": self.config.to_dict(),
            "seeds": {
                "root": self.config.seed,
                "splitting": "SeedSequence(root, spawn_key=(purpose, iteration))",
                "purposes": {name: code for code, name in rngs._NAMES.items()},
            },
            "evaluations": len(self.state.evaluated),
            "failures": [
                {"id": r.id, "iteration": r.iteration, "theta": r.theta.tolist(), "error": r.error}
                for r in self.state.failures
            ],
            "issued": self.state.issued,
            "dropped_suggestions": self.state.dropped,
            "clamped_suggestions": self.state.clamps,
            "counters": dict(self.state.counters),
            "final_kernel": None if self.state.kernel is None else self.state.kernel.to_dict(),
            "active_dim": None if self.state.subspace is None else self.state.subspace.active_dim,
            "latent_dim": None if self.state.reducer is None else self.state.reducer.latent_dim,
            "finished": self.state.finished,
        }


def run(
    config: CalibrationConfig,
    simulator=None,
    state: Optional[CalibrationState] = None,
    stop_after: Optional[int] = None,
    checkpoint: Optional[Callable[[CalibrationState], None]] = None,
) -> CalibrationReport:
    """Calibrate end to end, or resume from ``state``.

    ``stop_after`` halts once iteration ``stop_after`` has proposed its batch
    (the state can then be saved and resumed).  ``checkpoint`` is called
    with the state after preprocessing and after every iteration.
    """
    if state is None:
        state = preprocess(config, simulator)
        if checkpoint:
            checkpoint(state)
    while not state.finished:
        if stop_after is not None and state.iteration >= stop_after:
            break
        step(config, state, simulator)
        if checkpoint:
            checkpoint(state)
    return CalibrationReport(config, state)


def best_point(report: CalibrationReport):
    """``(theta, loss)`` of the best evaluated point."""
    best = report.best
    return best.theta, best.loss


__all__ = [
    "CalibrationConfig",
    "CalibrationReport",
    "CalibrationState",
    "CalibrexError",
    "DrMode",
    "EvaluationRecord",
    "MeanMode",
    "evaluate_batch",
    "loss",
    "preprocess",
    "run",
    "step",
]
