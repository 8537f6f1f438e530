"""Black-box simulators: built-in synthetic targets and an external-process adapter.

External simulators speak line-delimited JSON over stdin/stdout, one request
per process::

    request:  {"id": "<str>", "theta": [<float>, ...], "seed": <int>}\\n
    reply:    {"id": "<str>", "y": [<float>, ...]}\\n
          or  {"id": "<str>", "error": "<message>"}\\n

The child must exit with status 0.  The parent enforces the timeout.

Running ``python -m calibrex.simulators <builtin-name>`` serves one request
with a built-in target, which is handy for testing the protocol end to end.
"""

from __future__ import annotations

import dataclasses
import json
import math
import subprocess
import sys
from typing import Callable

import numpy as np

from calibrex.errors import InvalidArgumentError, SimulatorError
from calibrex.sampling import BoxDomain

#: Points this far outside the declared box still count as inside (float slop).
BOX_ATOL = 1e-9


# --- built-in targets -------------------------------------------------------

N_BINS = 288  # 5-minute bins over a day

#: Reference parameters at which ``synth9`` reproduces its observed series exactly.
SYNTH9_THETA_TRUE = np.array([2.5, -3.0, 4.0, 1.5, -6.0, 0.5, 3.5, -2.0, 5.5])
# The series is driven by one congestion feature
#   s = loadings . u + interaction * u2 * u8 + curvature . u**2,   u = (theta - theta_true) / 10
# which shifts the morning and evening peaks.  Variable 8 (index 7) has no
# loading of its own, so with variable 2 at its reference value it has no
# effect at all; moved together with variable 2 it matters through the
# interaction term.
SYNTH9_LOADINGS = np.array([1.2, 0.8, 0.5, -0.6, 0.3, 0.4, 0.15, 0.0, 0.25])
SYNTH9_INTERACTION = 0.15
SYNTH9_CURVATURE = np.array([0.0, 0.0, 0.0, 0.0, 0.03, 0.0, 0.045, 0.0, 0.0])
SYNTH9_GAIN = 1.0

#: Direction along which ``linear_active`` varies (unit norm).
LINEAR_ACTIVE_W = np.array([0.8, -0.5, 0.3, 0.6, -0.2, 0.45, -0.7, 0.25, 0.35])
LINEAR_ACTIVE_W = LINEAR_ACTIVE_W / np.linalg.norm(LINEAR_ACTIVE_W)


def _bump(t, center, width):
    return np.exp(-(((t - center) / width) ** 2))


_T = np.arange(N_BINS, dtype=float)
_PROFILE = 10.0 + 6.0 * _bump(_T, 96.0, 18.0) + 8.0 * _bump(_T, 210.0, 20.0)
_MORNING = _bump(_T, 96.0, 24.0)
_EVENING = _bump(_T, 210.0, 26.0)


def synth9_feature(theta) -> float:
    """The scalar congestion feature that ``synth9`` depends on; zero at the reference."""
    u = (np.asarray(theta, dtype=float).ravel() - SYNTH9_THETA_TRUE) / 10.0
    return float(SYNTH9_LOADINGS @ u + SYNTH9_INTERACTION * u[1] * u[7] + SYNTH9_CURVATURE @ (u * u))


def synth9(theta, seed: int = 0) -> np.ndarray:
    """Travel-time-like series (minutes per 5-minute bin) for 9 parameters in [-10, 10]."""
    s = synth9_feature(theta)
    rel = 0.5 * math.tanh(SYNTH9_GAIN * s) * _MORNING + 0.3 * math.tanh(0.6 * SYNTH9_GAIN * s) * _EVENING
    return _PROFILE * (1.0 + rel)


def linear_active(theta, seed: int = 0) -> np.ndarray:
    """One-sample series ``exp(0.7 w.theta)``; depends on theta only through ``w``."""
    theta = np.asarray(theta, dtype=float).ravel()
    return np.array([math.exp(0.7 * float(LINEAR_ACTIVE_W @ theta))])


def make_quadratic(optimum, scales=None) -> Callable:
    """Series ``scales * (theta - optimum)``; its MSE against zeros is a convex quadratic."""
    optimum = np.asarray(optimum, dtype=float)
    scales = np.ones_like(optimum) if scales is None else np.asarray(scales, dtype=float)

    def quadratic(theta, seed: int = 0):
        return scales * (np.asarray(theta, dtype=float).ravel() - optimum)

    return quadratic


@dataclasses.dataclass(frozen=True)
class Builtin:
    fn: Callable
    domain: BoxDomain
    observed: np.ndarray


def _builtin_table() -> dict:
    c9 = BoxDomain.cube(9, -10.0, 10.0)
    quad2 = make_quadratic([3.0, -4.0], [1.0, 2.0])
    quad1 = make_quadratic([2.0])
    return {
        "synth9": Builtin(synth9, c9, synth9(SYNTH9_THETA_TRUE)),
        "linear_active": Builtin(linear_active, BoxDomain.cube(9), np.zeros(1)),
        "quad2": Builtin(quad2, BoxDomain.cube(2, -10.0, 10.0), np.zeros(2)),
        "quad1": Builtin(quad1, BoxDomain.cube(1, -10.0, 10.0), np.zeros(1)),
    }


BUILTINS = _builtin_table()

#: Known minimisers of the built-in losses (original coordinates).
BUILTIN_OPTIMA = {
    "synth9": SYNTH9_THETA_TRUE,
    "quad2": np.array([3.0, -4.0]),
    "quad1": np.array([2.0]),
}


# --- handles ----------------------------------------------------------------


@dataclasses.dataclass(frozen=True)
class SimulatorHandle:
    """What to run and over which box.  ``observed`` is the target series."""

    kind: str
    domain: BoxDomain
    observed: np.ndarray
    name: str = ""
    command: tuple = ()
    timeout_s: float = 60.0

    def __post_init__(self):
        if self.kind not in ("builtin", "external"):
            raise InvalidArgumentError(f"unknown simulator kind {self.kind!r}")
        if self.kind == "builtin" and self.name not in BUILTINS:
            raise InvalidArgumentError(
                f"unknown builtin simulator {self.name!r}; choose from {sorted(BUILTINS)}"
            )
        if self.kind == "external" and not self.command:
            raise InvalidArgumentError("an external simulator needs a command")
        if not self.timeout_s > 0:
            raise InvalidArgumentError("timeout_s must be > 0")
        obs = np.asarray(self.observed, dtype=float).ravel()
        if obs.size == 0 or not np.all(np.isfinite(obs)):
            raise InvalidArgumentError("observed series must be non-empty and finite")
        object.__setattr__(self, "observed", obs)
        object.__setattr__(self, "command", tuple(self.command))

    @property
    def dim(self) -> int:
        return self.domain.dim

    @property
    def output_length(self) -> int:
        return self.observed.size

    @classmethod
    def builtin(cls, name: str, domain: BoxDomain | None = None) -> "SimulatorHandle":
        if name not in BUILTINS:
            raise InvalidArgumentError(
                f"unknown builtin simulator {name!r}; choose from {sorted(BUILTINS)}"
            )
        b = BUILTINS[name]
        dom = domain or b.domain
        if dom.dim != b.domain.dim:
            raise InvalidArgumentError(f"{name} is {b.domain.dim}-dimensional, got bounds of {dom.dim}")
        return cls("builtin", dom, b.observed, name=name)

    @classmethod
    def external(cls, command, domain: BoxDomain, observed, timeout_s: float = 60.0):
        return cls("external", domain, observed, command=tuple(command), timeout_s=timeout_s)

    def to_dict(self) -> dict:
        d = {"kind": self.kind, "bounds": self.domain.to_dict()}
        if self.kind == "builtin":
            d["name"] = self.name
        else:
            d["command"] = list(self.command)
            d["timeout_s"] = self.timeout_s
            d["observed"] = self.observed.tolist()
        return d


def _check_keys(d: dict, allowed: set, where: str):
    if not isinstance(d, dict):
        raise InvalidArgumentError(f"{where} must be a JSON object")
    unknown = set(d) - allowed
    if unknown:
        raise InvalidArgumentError(f"unknown {where} keys {sorted(unknown)}")


def handle_from_dict(d: dict) -> SimulatorHandle:
    """Inverse of :meth:`SimulatorHandle.to_dict`; unknown keys are rejected."""
    _check_keys(d, {"kind", "name", "bounds", "command", "timeout_s", "observed"}, "simulator")
    kind = d.get("kind", "builtin")
    try:
        bounds = None if d.get("bounds") is None else BoxDomain.from_dict(d["bounds"])
    except (KeyError, TypeError) as exc:
        raise InvalidArgumentError(f"bounds need 'lower' and 'upper' lists ({exc})") from None
    if kind == "builtin":
        _check_keys(d, {"kind", "name", "bounds"}, "builtin simulator")
        return SimulatorHandle.builtin(d.get("name", ""), bounds)
    if kind == "external":
        if bounds is None or "observed" not in d:
            raise InvalidArgumentError("an external simulator needs 'bounds' and 'observed'")
        command = d.get("command")
        if isinstance(command, str):
            command = command.split()
        return SimulatorHandle.external(command or (), bounds, d["observed"], float(d.get("timeout_s", 60.0)))
    raise InvalidArgumentError(f"unknown simulator kind {kind!r}")


def simulate(handle: SimulatorHandle, theta, seed: int = 0, run_id: str = "0") -> np.ndarray:
    """Run the simulator once and return its output series."""
    theta = np.asarray(theta, dtype=float).ravel()
    if theta.size != handle.dim:
        raise InvalidArgumentError(f"expected {handle.dim} parameters, got {theta.size}")
    if not handle.domain.contains(theta, atol=BOX_ATOL)[0]:
        raise InvalidArgumentError(f"theta {theta.tolist()} lies outside the declared box")
    if handle.kind == "builtin":
        y = np.asarray(BUILTINS[handle.name].fn(theta, seed), dtype=float)
    else:
        y = _run_external(handle, theta, int(seed), str(run_id))
    if y.size != handle.output_length:
        raise SimulatorError(
            f"simulator returned {y.size} values, expected {handle.output_length}",
            {"run_id": run_id},
        )
    return y


def _run_external(handle: SimulatorHandle, theta: np.ndarray, seed: int, run_id: str) -> np.ndarray:
    request = json.dumps({"id": run_id, "theta": theta.tolist(), "seed": seed}) + "\n"
    diag = {"run_id": run_id, "command": list(handle.command)}
    try:
        proc = subprocess.run(
            list(handle.command),
            input=request,
            capture_output=True,
            text=True,
            timeout=handle.timeout_s,
        )
    except subprocess.TimeoutExpired as exc:
        diag["stderr"] = _text(exc.stderr)
        raise SimulatorError(f"simulator timed out after {handle.timeout_s} s", diag) from None
    except OSError as exc:
        raise SimulatorError(f"could not start simulator: {exc}", diag) from None

    diag.update(returncode=proc.returncode, stderr=proc.stderr[-2000:], stdout=proc.stdout[-2000:])
    if proc.returncode != 0:
        raise SimulatorError(f"simulator exited with status {proc.returncode}", diag)
    return parse_reply(proc.stdout, run_id, diag)


def _text(b) -> str:
    if b is None:
        return ""
    return b.decode(errors="replace") if isinstance(b, bytes) else str(b)


def parse_reply(stdout: str, run_id: str, diag: dict | None = None) -> np.ndarray:
    """Decode the first non-empty reply line and check it answers ``run_id``."""
    diag = dict(diag or {})
    lines = [ln for ln in stdout.splitlines() if ln.strip()]
    if not lines:
        raise SimulatorError("simulator produced no reply", diag)
    try:
        reply = json.loads(lines[0])
    except json.JSONDecodeError as exc:
        raise SimulatorError(f"malformed reply: {exc}", diag) from None
    if not isinstance(reply, dict) or reply.get("id") != run_id:
        raise SimulatorError(f"reply does not answer request {run_id!r}", diag)
    if "error" in reply:
        raise SimulatorError(f"simulator reported an error: {reply['error']}", diag)
    y = reply.get("y")
    if not isinstance(y, list) or not all(
        isinstance(v, (int, float)) and not isinstance(v, bool) for v in y
    ):
        raise SimulatorError("reply field 'y' must be a list of numbers", diag)
    out = np.array(y, dtype=float)
    if not np.all(np.isfinite(out)):
        raise SimulatorError("reply contains non-finite values", diag)
    return out


def serve_builtin(name: str, stdin=None, stdout=None) -> int:
    """Answer one protocol request with a built-in target; returns the exit status."""
    stdin = stdin or sys.stdin
    stdout = stdout or sys.stdout
    line = stdin.readline()
    try:
        request = json.loads(line)
        run_id = str(request["id"])
    except (json.JSONDecodeError, KeyError, TypeError):
        return 2
    try:
        y = BUILTINS[name].fn(np.asarray(request["theta"], dtype=float), int(request.get("seed", 0)))
        reply = {"id": run_id, "y": np.asarray(y, dtype=float).tolist()}
    except Exception as exc:  # noqa: BLE001 - reported over the protocol
        reply = {"id": run_id, "error": str(exc)}
    stdout.write(json.dumps(reply) + "\n")
    stdout.flush()
    return 0


if __name__ == "__main__":
    if len(sys.argv) != 2 or sys.argv[1] not in BUILTINS:
        sys.stderr.write(f"usage: python -m calibrex.simulators {{{','.join(sorted(BUILTINS))}}}\n")
        sys.exit(2)
    sys.exit(serve_builtin(sys.argv[1]))
