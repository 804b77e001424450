"""Scenario files: JSON description of a system, a noise kernel, a time grid
and a run mode.

Operators are given as preset names (``"sigma_x"``, ``"sigma_y"``,
``"sigma_z"``, ``"identity"``, ``"zero"``), as ``{"preset": name, "scale": c}``
or as explicit matrices whose entries are numbers or ``[re, im]`` pairs.
States are ``"0"``, ``"1"``, ``"+"``, ``"-"``, ``"+i"``, ``"-i"`` or
amplitude lists.  Every key that is not given is filled from ``DEFAULTS``
and the completed tree is kept in :attr:`Scenario.echo`.
"""
from __future__ import annotations

import copy
import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import CollapsarError, ConfigError, ShapeError
from .kernels import factorize, kernel_from_record
from .markov import CollapseSystem
from .noise import Grid

__all__ = ["DEFAULTS", "MODES", "Scenario", "ScenarioShapeError", "parse_scenario", "load_scenario"]

MODES = ("markov", "nonmarkov", "bohm", "compare", "oracle", "noise-stats")

DEFAULTS = {
    "system": {
        "H": "zero",
        "A": ["sigma_z"],
        "gamma": 1.0,
        "psi0": [0.6, 0.8],
    },
    "kernel": {"type": "cosine_sum", "weights": [[[1.0]]], "omegas": [2.0]},
    "discretization": {
        "dt": 0.001,
        "T": 1.0,
        "modes": 64,
        "omega_max": 16.0,
        "n_max": 10,
    },
    "run": {
        "mode": "oracle",
        "n_traj": 100,
        "seed": 0,
        "sampler": "modes",
        "snapshots": False,
        "threads": 1,
    },
    "output": {"dir": "out"},
}

_KERNEL_KEYS = {
    "cosine_sum": {"type", "weights", "omegas"},
    "exponential_decay": {"type", "amplitude", "tau_c"},
    "white_approx": {"type", "diffusion", "cutoff"},
    "grid_tabulated": {"type", "taus", "samples", "taper"},
}

_PRESETS = {
    "sigma_x": np.array([[0, 1], [1, 0]], dtype=complex),
    "sigma_y": np.array([[0, -1j], [1j, 0]], dtype=complex),
    "sigma_z": np.array([[1, 0], [0, -1]], dtype=complex),
    "identity": np.eye(2, dtype=complex),
    "zero": np.zeros((2, 2), dtype=complex),
}

_STATES = {
    "0": [1, 0],
    "1": [0, 1],
    "+": [2 ** -0.5, 2 ** -0.5],
    "-": [2 ** -0.5, -(2 ** -0.5)],
    "+i": [2 ** -0.5, 1j * 2 ** -0.5],
    "-i": [2 ** -0.5, -1j * 2 ** -0.5],
}


class ScenarioShapeError(ConfigError, ShapeError):
    """Dimension mismatch inside a scenario."""


def _complex_entry(x, where):
    if isinstance(x, (int, float)) and not isinstance(x, bool):
        return complex(x)
    if isinstance(x, list) and len(x) == 2 and all(isinstance(v, (int, float)) for v in x):
        return complex(x[0], x[1])
    raise ValueError(f"{where}: entries must be numbers or [re, im] pairs")


def _operator(entry, where):
    if isinstance(entry, str):
        if entry not in _PRESETS:
            raise ValueError(f"{where}: unknown preset {entry!r}")
        return _PRESETS[entry].copy()
    if isinstance(entry, dict):
        extra = set(entry) - {"preset", "scale"}
        if extra:
            raise ValueError(f"{where}: unknown keys {sorted(extra)}")
        base = _operator(entry.get("preset"), where)
        scale = entry.get("scale", 1.0)
        if not isinstance(scale, (int, float)):
            raise ValueError(f"{where}.scale: must be a number")
        return float(scale) * base
    if isinstance(entry, list) and entry and all(isinstance(r, list) for r in entry):
        n = len(entry)
        if any(len(r) != n for r in entry):
            raise ValueError(f"{where}: matrix must be square")
        return np.array([[_complex_entry(x, where) for x in r] for r in entry])
    raise ValueError(f"{where}: expected a preset name, {{preset, scale}} or a square matrix")


def _state(entry, where):
    if isinstance(entry, str):
        if entry not in _STATES:
            raise ValueError(f"{where}: unknown state {entry!r}")
        v = np.array(_STATES[entry], dtype=complex)
    elif isinstance(entry, list) and entry:
        v = np.array([_complex_entry(x, where) for x in entry])
    else:
        raise ValueError(f"{where}: expected a state name or an amplitude list")
    n = np.linalg.norm(v)
    if n == 0:
        raise ValueError(f"{where}: state has zero norm")
    return v / n


@dataclass(frozen=True, eq=False)
class Scenario:
    """Validated scenario with resolved library objects."""

    echo: dict
    system: CollapseSystem
    psi0: np.ndarray
    kernel: object
    modes: object
    grid: Grid
    n_max: int
    mode: str
    n_traj: int
    seed: int
    sampler: str
    snapshots: bool
    threads: int
    out_dir: str

    def with_overrides(self, seed=None, out_dir=None, threads=None) -> "Scenario":
        echo = copy.deepcopy(self.echo)
        if seed is not None:
            echo["run"]["seed"] = int(seed)
        if out_dir is not None:
            echo["output"]["dir"] = str(out_dir)
        if threads is not None:
            echo["run"]["threads"] = int(threads)
        return parse_scenario(echo)


def _num(tree, section, key, problems, positive=False, nonneg=False, integer=False):
    val = tree[section][key]
    where = f"{section}.{key}"
    if isinstance(val, bool) or not isinstance(val, (int, float)) or not np.isfinite(val):
        problems.append(f"{where}: must be a finite number")
        return None
    if integer and int(val) != val:
        problems.append(f"{where}: must be an integer")
        return None
    if positive and not val > 0:
        problems.append(f"{where}: must be > 0 (got {val})")
        return None
    if nonneg and val < 0:
        problems.append(f"{where}: must be >= 0 (got {val})")
        return None
    return int(val) if integer else float(val)


def parse_scenario(source) -> Scenario:
    """Parse a scenario from a dict, JSON text or a path.

    Raises :class:`ConfigError` listing every problem found; dimension
    mismatches raise :class:`ScenarioShapeError` naming the operator.
    """
    if isinstance(source, dict):
        raw = source
    else:
        text = source
        if isinstance(source, Path) or (isinstance(source, str) and not source.lstrip().startswith("{")):
            try:
                text = Path(source).read_text(encoding="utf-8")
            except OSError as exc:
                raise ConfigError(f"cannot read scenario: {exc}") from exc
        try:
            raw = json.loads(text)
        except json.JSONDecodeError as exc:
            raise ConfigError(f"scenario parse error at line {exc.lineno}, column {exc.colno}: {exc.msg}",
                              [f"line {exc.lineno}: {exc.msg}"]) from exc
    problems: list[str] = []
    tree = copy.deepcopy(DEFAULTS)
    if not isinstance(raw, dict):
        raise ConfigError("scenario must be a JSON object")
    for key, val in raw.items():
        if key not in DEFAULTS:
            problems.append(f"{key}: unknown key")
        elif key == "kernel":
            tree["kernel"] = copy.deepcopy(val)
        elif not isinstance(val, dict):
            problems.append(f"{key}: expected an object")
        else:
            for sub, v in val.items():
                if sub not in DEFAULTS[key]:
                    problems.append(f"{key}.{sub}: unknown key")
                else:
                    tree[key][sub] = copy.deepcopy(v)

    # system
    shape_problems = []
    sysd = tree["system"]
    h = a_ops = psi0 = None
    try:
        h = _operator(sysd["H"], "system.H")
    except ValueError as exc:
        problems.append(str(exc))
    if not isinstance(sysd["A"], list) or not sysd["A"]:
        problems.append("system.A: must be a non-empty list of operators")
    else:
        a_ops = []
        for i, entry in enumerate(sysd["A"]):
            try:
                a_ops.append(_operator(entry, f"system.A[{i}]"))
            except ValueError as exc:
                problems.append(str(exc))
                a_ops = None
                break
    gamma = _num(tree, "system", "gamma", problems, nonneg=True)
    try:
        psi0 = _state(sysd["psi0"], "system.psi0")
    except ValueError as exc:
        problems.append(str(exc))
    if h is not None and a_ops is not None:
        for i, a in enumerate(a_ops):
            if a.shape != h.shape:
                shape_problems.append(f"system.A[{i}]: shape {a.shape} does not match H {h.shape}")
            elif np.abs(a - a.conj().T).max() > 1e-10:
                problems.append(f"system.A[{i}]: must be Hermitian")
        if np.abs(h - h.conj().T).max() > 1e-10:
            problems.append("system.H: must be Hermitian")
    if h is not None and psi0 is not None and psi0.size != h.shape[0]:
        shape_problems.append(f"system.psi0: dimension {psi0.size} does not match H {h.shape[0]}")

    # kernel
    kernel = None
    krec = tree["kernel"]
    if not isinstance(krec, dict) or krec.get("type") not in _KERNEL_KEYS:
        problems.append(f"kernel.type: must be one of {sorted(_KERNEL_KEYS)}")
    else:
        extra = set(krec) - _KERNEL_KEYS[krec["type"]]
        for k in sorted(extra):
            problems.append(f"kernel.{k}: unknown key for {krec['type']}")
        if not extra:
            try:
                kernel = kernel_from_record(krec)
            except (CollapsarError, ValueError, KeyError, TypeError) as exc:
                problems.append(f"kernel: {exc}")
    if kernel is not None and a_ops is not None and kernel.channels != len(a_ops):
        shape_problems.append(f"kernel: {kernel.channels} channels but system.A has {len(a_ops)} operators")

    # discretisation
    dt = _num(tree, "discretization", "dt", problems, positive=True)
    T = _num(tree, "discretization", "T", problems, positive=True)
    modes = _num(tree, "discretization", "modes", problems, positive=True, integer=True)
    omega_max = _num(tree, "discretization", "omega_max", problems, positive=True)
    n_max = _num(tree, "discretization", "n_max", problems, integer=True)
    if n_max is not None and n_max < 2:
        problems.append("discretization.n_max: must be >= 2")
    grid = None
    if dt is not None and T is not None:
        if T < dt:
            problems.append(f"discretization.T: must be >= dt (got T={T}, dt={dt})")
        else:
            steps = int(round(T / dt))
            if abs(steps * dt - T) > 1e-9 * max(1.0, T):
                problems.append(f"discretization.T: {T} is not a multiple of dt={dt}")
            else:
                grid = Grid(dt, steps)

    # run
    run = tree["run"]
    mode = run["mode"]
    if mode not in MODES:
        problems.append(f"run.mode: must be one of {list(MODES)} (got {mode!r})")
    n_traj = _num(tree, "run", "n_traj", problems, positive=True, integer=True)
    seed = _num(tree, "run", "seed", problems, nonneg=True, integer=True)
    threads = _num(tree, "run", "threads", problems, positive=True, integer=True)
    if run["sampler"] not in ("modes", "dense"):
        problems.append("run.sampler: must be 'modes' or 'dense'")
    if not isinstance(run["snapshots"], bool):
        problems.append("run.snapshots: must be true or false")
    if not isinstance(tree["output"]["dir"], str):
        problems.append("output.dir: must be a string")

    if problems:
        raise ConfigError("invalid scenario:\n  " + "\n  ".join(problems + shape_problems),
                          problems + shape_problems)
    if shape_problems:
        raise ScenarioShapeError("invalid scenario:\n  " + "\n  ".join(shape_problems), shape_problems)

    try:
        system = CollapseSystem(h, a_ops, gamma)
        md = factorize(kernel, modes, omega_max)
    except CollapsarError as exc:
        raise ConfigError(f"invalid scenario: {exc}", [str(exc)]) from exc
    return Scenario(tree, system, psi0, kernel, md, grid, n_max, mode, n_traj, seed, run["sampler"],
                    run["snapshots"], threads, tree["output"]["dir"])


def load_scenario(path) -> Scenario:
    return parse_scenario(Path(path))
