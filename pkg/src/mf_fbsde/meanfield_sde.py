"""Forward solvers: the rank-N particle system and the McKean-Vlasov limit.

All schemes are explicit Euler-Maruyama.  The McKean-Vlasov step is
synchronous: every particle advances with the law of the cloud at ``t_k``.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field
from typing import Callable, Union

import numpy as np

from .stochastic_engine import BrownianBundle, EmpiricalLaw, Interaction, TimeGrid

__all__ = [
    "ForwardCoefficients",
    "ParticleCloud",
    "FrozenLaw",
    "NumericalBlowUp",
    "solve_n_particle",
    "solve_mckean",
    "solve_conditional_flow",
    "write_trajectories_csv",
    "write_law_csv",
    "brownian_coefficients",
    "stopped_brownian_coefficients",
]

Initial = Union[np.ndarray, Callable[[int], np.ndarray]]


class NumericalBlowUp(FloatingPointError):
    """A state became NaN or infinite; ``path`` and ``step`` locate the first one."""

    def __init__(self, what: str, path: int, step: int):
        super().__init__(f"non-finite {what} on path {path} at step {step}")
        self.path = path
        self.step = step


def _check_finite(values: np.ndarray, what: str, step: int) -> None:
    flat = values.reshape(values.shape[0], -1)
    bad = ~np.isfinite(flat).all(axis=1)
    if bad.any():
        raise NumericalBlowUp(what, int(np.flatnonzero(bad)[0]), step)


@dataclass(frozen=True)
class ForwardCoefficients:
    """Drift ``b(t, x', x)`` and diffusion ``sigma(t, x', x)`` with declared constants.

    States are arrays ``[..., n_dim]``; ``b`` returns ``[..., n_dim]`` and
    ``sigma`` returns ``[..., n_dim, d_dim]``.
    """

    b: Interaction
    sigma: Interaction
    n_dim: int = 1
    d_dim: int = 1
    lipschitz_C: float = 1.0
    growth_C: float = 1.0
    name: str = ""

    def __post_init__(self) -> None:
        probe = np.zeros((2, self.n_dim))
        b = np.asarray(self.b(0.0, (probe,), (probe,)))
        s = np.asarray(self.sigma(0.0, (probe,), (probe,)))
        if b.shape[-1:] != (self.n_dim,) and b.size != 1:
            raise ValueError(f"b returns trailing shape {b.shape}, expected (..., {self.n_dim})")
        if s.shape[-2:] != (self.n_dim, self.d_dim) and s.size != 1:
            raise ValueError(f"sigma returns trailing shape {s.shape}, expected (..., {self.n_dim}, {self.d_dim})")

    def lipschitz_quotients(self, rng: np.random.Generator, n_pairs: int = 256, scale: float = 3.0, T: float = 1.0):
        """Sampled ``(|db| + |dsigma|) / (|dx'| + |dx|)`` on random point pairs."""
        n = self.n_dim
        t = rng.uniform(0.0, T, size=n_pairs)
        xp1, x1, xp2, x2 = (rng.normal(scale=scale, size=(n_pairs, n)) for _ in range(4))
        out = np.empty(n_pairs)
        for i in range(n_pairs):
            db = np.linalg.norm(
                np.atleast_1d(self.b(t[i], (xp1[i],), (x1[i],)) - self.b(t[i], (xp2[i],), (x2[i],)))
            )
            ds = np.linalg.norm(
                np.atleast_1d(self.sigma(t[i], (xp1[i],), (x1[i],)) - self.sigma(t[i], (xp2[i],), (x2[i],)))
            )
            dist = np.linalg.norm(xp1[i] - xp2[i]) + np.linalg.norm(x1[i] - x2[i])
            out[i] = (db + ds) / dist
        return out

    def check_lipschitz(self, rng: np.random.Generator, tol: float = 1e-6, **kwargs) -> None:
        q = self.lipschitz_quotients(rng, **kwargs)
        if q.max() > self.lipschitz_C * (1.0 + tol):
            raise ValueError(
                f"declared lipschitz_C={self.lipschitz_C} violated: sampled quotient {q.max():.6g}"
            )


@dataclass(frozen=True, eq=False)
class ParticleCloud:
    """Trajectories ``states[path, time, n]`` on ``grid``.

    ``offset`` is the index of ``grid.t0`` in the global grid the cloud was
    started from (non-zero for flows started at ``t > 0``).
    """

    grid: TimeGrid
    states: np.ndarray = field(repr=False)
    bundle_ref: str = ""
    initial: object = None
    offset: int = 0

    @property
    def n_paths(self) -> int:
        return self.states.shape[0]

    @property
    def n_dim(self) -> int:
        return self.states.shape[2]

    def at(self, k: int) -> np.ndarray:
        return self.states[:, k, :]


@dataclass(frozen=True, eq=False)
class FrozenLaw:
    """Per-node empirical laws of ``X^{0,x0}``, frozen after one McKean-Vlasov solve."""

    grid: TimeGrid
    atoms: np.ndarray = field(repr=False)

    def law(self, k: int) -> EmpiricalLaw:
        if not 0 <= k <= self.grid.n_steps:
            raise IndexError(f"frozen law has no time index {k} (grid has {self.grid.n_steps + 1} nodes)")
        return EmpiricalLaw(self.atoms[:, k, :], k)

    def at(self, k: int) -> np.ndarray:
        if not 0 <= k <= self.grid.n_steps:
            raise IndexError(f"frozen law has no time index {k} (grid has {self.grid.n_steps + 1} nodes)")
        return self.atoms[:, k, :]

    @property
    def n_atoms(self) -> int:
        return self.atoms.shape[0]


def _diffuse(sig: np.ndarray, dB: np.ndarray) -> np.ndarray:
    return np.einsum("...ij,...j->...i", sig, dB)


def _as_point(x0, n_dim: int) -> np.ndarray:
    x0 = np.asarray(x0, dtype=float)
    if x0.ndim == 0:
        x0 = np.full(n_dim, float(x0))
    if x0.shape != (n_dim,):
        raise ValueError(f"initial point has shape {x0.shape}, expected ({n_dim},)")
    return x0


def solve_n_particle(
    coeffs: ForwardCoefficients,
    N: int,
    x0,
    bundle: BrownianBundle,
    replications: int | None = None,
) -> list[ParticleCloud]:
    """Euler scheme for the coupled system ``(X, X^1, ..., X^N)``.

    Each particle's coefficients are the ``1/N`` averages of ``b(t, x^j, x)``
    and ``sigma(t, x^j, x)`` over its ``N`` companions.  Replication ``r`` uses
    bundle rows ``r*(N+1) .. r*(N+1)+N``; particle ``j`` of every replication is
    returned as cloud ``j`` (cloud 0 is the tagged particle ``X``).
    """
    if N < 1:
        raise ValueError("N must be at least 1")
    group = N + 1
    if replications is None:
        replications = bundle.n_paths // group
    if replications < 1 or replications * group > bundle.n_paths:
        raise ValueError(f"bundle has {bundle.n_paths} paths, need {group} per replication")
    x0 = _as_point(x0, coeffs.n_dim)
    grid = bundle.grid
    K, n, d = grid.n_steps, coeffs.n_dim, coeffs.d_dim
    if bundle.dim != d:
        raise ValueError(f"bundle dimension {bundle.dim} != d_dim {d}")
    # increments laid out [particle, replication, step, dim]
    inc = bundle.increments[: replications * group].reshape(replications, group, K, d).transpose(1, 0, 2, 3)
    states = np.empty((group, replications, K + 1, n))
    states[:, :, 0, :] = x0
    x = states[:, :, 0, :].copy()
    batch = (group, replications)
    for k in range(K):
        t = grid.node(k)
        drift =coeffs.b.companion_average(t, (x,), batch)
        sig = coeffs.sigma.companion_average(t, (x,), batch)
        x = x + drift * grid.dt + _diffuse(sig, inc[:, :, k, :])
        _check_finite(x.reshape(-1, n), "particle state", k + 1)
        states[:, :, k + 1, :] = x
    ref = bundle.bundle_id
    return [ParticleCloud(grid, states[j], f"{ref}#particle{j}/{group}", x0) for j in range(group)]


def solve_mckean(
    coeffs: ForwardCoefficients,
    x0,
    M: int,
    bundle: BrownianBundle,
    max_atoms: int | None = None,
) -> tuple[ParticleCloud, FrozenLaw]:
    """Self-interacting Euler scheme for the McKean-Vlasov SDE started at ``x0``.

    Args:
        coeffs: drift and diffusion.
        x0: deterministic initial point.
        M: number of particles; bundle rows ``0..M-1`` drive them.
        bundle: Brownian increments on the solve grid.
        max_atoms: optional cap on atoms used in pairwise averages (approximation).

    Returns:
        The cloud and the per-node empirical laws built from it.
    """
    if M < 2:
        raise ValueError("the McKean-Vlasov scheme needs M >= 2 particles")
    if bundle.n_paths < M:
        raise ValueError(f"bundle has {bundle.n_paths} paths, need {M}")
    if bundle.dim != coeffs.d_dim:
        raise ValueError(f"bundle dimension {bundle.dim} != d_dim {coeffs.d_dim}")
    x0 = _as_point(x0, coeffs.n_dim)
    grid = bundle.grid
    states = np.empty((M, grid.n_steps + 1, coeffs.n_dim))
    states[:, 0, :] = x0
    x = states[:, 0, :].copy()
    for k in range(grid.n_steps):
        t = grid.node(k)
        drift = coeffs.b.average(t, (x,), (x,), M, max_atoms=max_atoms)
        sig = coeffs.sigma.average(t, (x,), (x,), M, max_atoms=max_atoms)
        x = x + drift * grid.dt + _diffuse(sig, bundle.increments[:M, k, :])
        _check_finite(x, "McKean-Vlasov state", k + 1)
        states[:, k + 1, :] = x
    states.flags.writeable = False
    cloud = ParticleCloud(grid, states, bundle.bundle_id, x0)
    return cloud, FrozenLaw(grid, states)


def _initial_states(init: Initial, M: int, n_dim: int) -> tuple[np.ndarray, object]:
    if callable(init):
        x = np.asarray(init(M), dtype=float).reshape(M, n_dim)
        return x, "sampler"
    arr = np.asarray(init, dtype=float)
    if arr.ndim <= 1:
        point = _as_point(arr, n_dim)
        return np.broadcast_to(point, (M, n_dim)).copy(), point
    if arr.shape != (M, n_dim):
        raise ValueError(f"per-path initial states have shape {arr.shape}, expected {(M, n_dim)}")
    return arr.copy(), "per-path"


def solve_conditional_flow(
    coeffs: ForwardCoefficients,
    frozen: FrozenLaw,
    t_index: int,
    init: Initial,
    bundle: BrownianBundle,
    n_paths: int | None = None,
    max_atoms: int | None = None,
) -> ParticleCloud:
    """Classical Euler scheme for ``X^{t, init}`` with coefficients averaged against ``frozen``.

    ``bundle`` may live on the frozen law's grid (it is windowed at
    ``t_index``) or already on the subgrid starting at ``t_index``.  The
    returned cloud lives on that subgrid with ``offset = t_index``.
    """
    full = frozen.grid
    if not 0 <= t_index < full.n_steps:
        raise IndexError(f"frozen law does not cover time index {t_index}..{full.n_steps}")
    if bundle.grid == full and bundle.first_step == 0:
        window = bundle.window(t_index)
    elif bundle.grid == full.subgrid(t_index):
        window = bundle
    else:
        raise ValueError("bundle grid matches neither the frozen grid nor its subgrid at t_index")
    M = window.n_paths if n_paths is None else n_paths
    if M > window.n_paths:
        raise ValueError(f"bundle has {window.n_paths} paths, need {M}")
    x, initial = _initial_states(init, M, coeffs.n_dim)
    grid = window.grid
    states = np.empty((M, grid.n_steps + 1, coeffs.n_dim))
    states[:, 0, :] = x
    for j in range(grid.n_steps):
        t = grid.node(j)
        atoms = frozen.at(t_index + j)
        drift = coeffs.b.average(t, (atoms,), (x,), M, max_atoms=max_atoms)
        sig = coeffs.sigma.average(t, (atoms,), (x,), M, max_atoms=max_atoms)
        x = x + drift * grid.dt + _diffuse(sig, window.increments[:M, j, :])
        _check_finite(x, "conditional flow state", t_index + j + 1)
        states[:, j + 1, :] = x
    states.flags.writeable = False
    return ParticleCloud(grid, states, window.bundle_id, initial, t_index)


def _fmt(v: float) -> str:
    return repr(float(v))


def write_trajectories_csv(cloud: ParticleCloud, path) -> None:
    """CSV with columns ``path, t, x_1..x_n``."""
    times = cloud.grid.nodes
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow(["path", "t"] + [f"x_{i + 1}" for i in range(cloud.n_dim)])
        for p in range(cloud.n_paths):
            for k, t in enumerate(times):
                w.writerow([p, _fmt(t)] + [_fmt(v) for v in cloud.states[p, k]])


def write_law_csv(frozen: FrozenLaw, path) -> None:
    """CSV with columns ``t, atom_index, x_1..x_n``."""
    times = frozen.grid.nodes
    n = frozen.atoms.shape[2]
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow(["t", "atom_index"] + [f"x_{i + 1}" for i in range(n)])
        for k, t in enumerate(times):
            for a in range(frozen.n_atoms):
                w.writerow([_fmt(t), a] + [_fmt(v) for v in frozen.atoms[a, k]])


def brownian_coefficients(dim: int = 1) -> ForwardCoefficients:
    """``X = x0 + B`` in ``dim`` dimensions (b = 0, sigma = identity)."""
    eye = np.eye(dim)
    return ForwardCoefficients(
        b=Interaction(own=lambda t, x: np.zeros_like(x), out_shape=(dim,)),
        sigma=Interaction(own=lambda t, x: np.broadcast_to(eye, x.shape + (dim,)), out_shape=(dim, dim)),
        n_dim=dim,
        d_dim=dim,
        lipschitz_C=0.0,
        growth_C=1.0,
        name="brownian",
    )


def stopped_brownian_coefficients(stop: float) -> ForwardCoefficients:
    """Two-component state ``(B_t, B_{t ^ stop})`` driven by one Brownian motion."""

    def sigma(t, x):
        s = np.zeros(x.shape + (1,))
        s[..., 0, 0] = 1.0
        s[..., 1, 0] = 1.0 if t < stop - 1e-12 else 0.0
        return s

    return ForwardCoefficients(
        b=Interaction(own=lambda t, x: np.zeros_like(x), out_shape=(2,)),
        sigma=Interaction(own=sigma, out_shape=(2, 1)),
        n_dim=2,
        d_dim=1,
        lipschitz_C=0.0,
        growth_C=1.0,
        name=f"brownian_stopped_at_{stop}",
    )
