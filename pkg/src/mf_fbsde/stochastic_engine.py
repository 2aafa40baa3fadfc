"""Time grids, counter-based Brownian increments and empirical-law helpers.

Every random number in the package comes from a Philox4x32-10 block keyed by
the 64-bit master seed and addressed by ``(step, component, path)``.  A path's
increments are therefore a pure function of ``(seed, path, step)``: adding
paths, re-chunking or changing the worker count never changes existing paths.
"""

from __future__ import annotations

import functools
import hashlib
import math
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np
from scipy.special import ndtri

__all__ = [
    "TimeGrid",
    "BrownianBundle",
    "EmpiricalLaw",
    "Interaction",
    "build_grid",
    "sample_brownian",
    "empirical_expectation",
    "philox4x32",
    "standard_normals",
    "derive_seed",
    "worker_count",
    "bootstrap_std_error",
    "resample_indices",
]

_MASK32 = np.uint64(0xFFFFFFFF)
_SHIFT32 = np.uint64(32)
_PHILOX_M0 = np.uint64(0xD2511F53)
_PHILOX_M1 = np.uint64(0xCD9E8D57)
_PHILOX_W0 = np.uint64(0x9E3779B9)
_PHILOX_W1 = np.uint64(0xBB67AE85)

# refuse bundles above this many bytes (override with MF_FBSDE_MAX_BYTES)
_DEFAULT_MAX_BYTES = 4 * 1024**3


def worker_count() -> int:
    """Number of worker threads allowed by ``MF_FBSDE_THREADS`` (default 1)."""
    raw = os.environ.get("MF_FBSDE_THREADS", "1")
    try:
        n = int(raw)
    except ValueError as exc:
        raise ValueError(f"MF_FBSDE_THREADS must be an integer, got {raw!r}") from exc
    return max(1, n)


def derive_seed(master_seed: int, label: str) -> int:
    """Deterministic 64-bit child seed for a named sub-stream."""
    digest = hashlib.blake2b(f"{int(master_seed)}/{label}".encode(), digest_size=8).digest()
    return int.from_bytes(digest, "little")


# ---------------------------------------------------------------------------
# time grid


@dataclass(frozen=True)
class TimeGrid:
    """Uniform grid ``t_k = t0 + k * dt`` on ``[t0, t1]``."""

    t0: float
    t1: float
    n_steps: int

    @property
    def dt(self) -> float:
        return (self.t1 - self.t0) / self.n_steps

    @property
    def nodes(self) -> np.ndarray:
        nodes = self.t0 + self.dt * np.arange(self.n_steps + 1, dtype=float)
        nodes[-1] = self.t1
        return nodes

    def node(self, k: int) -> float:
        if not 0 <= k <= self.n_steps:
            raise IndexError(f"node index {k} outside 0..{self.n_steps}")
        return self.t1 if k == self.n_steps else self.t0 + k * self.dt

    def index_of(self, t: float, rtol: float = 1e-9) -> int:
        """Index of the node equal to ``t``; raises if ``t`` is not a node."""
        k = int(round((t - self.t0) / self.dt))
        if k < 0 or k > self.n_steps or abs(self.node(k) - t) > rtol * max(1.0, abs(t)) + 1e-12:
            raise ValueError(f"time {t} is not a node of {self}")
        return k

    def subgrid(self, start: int) -> "TimeGrid":
        """The grid restricted to nodes ``start..n_steps``."""
        if not 0 <= start < self.n_steps:
            raise ValueError(f"subgrid start {start} must lie in 0..{self.n_steps - 1}")
        return TimeGrid(self.node(start), self.t1, self.n_steps - start)

    def refine(self, factor: int) -> "TimeGrid":
        return TimeGrid(self.t0, self.t1, self.n_steps * int(factor))


def build_grid(t0: float, t1: float, n_steps: int) -> TimeGrid:
    """Build a uniform time grid, validating the interval and step count."""
    if not (math.isfinite(t0) and math.isfinite(t1)):
        raise ValueError(f"grid endpoints must be finite, got ({t0}, {t1})")
    if not t1 > t0:
        raise ValueError(f"empty time interval: t1={t1} must exceed t0={t0}")
    if isinstance(n_steps, bool) or int(n_steps) != n_steps or n_steps < 1:
        raise ValueError(f"n_steps must be a positive integer, got {n_steps!r}")
    return TimeGrid(float(t0), float(t1), int(n_steps))


# ---------------------------------------------------------------------------
# counter-based randomness


def philox4x32(counter: Sequence[np.ndarray], key: tuple[int, int], rounds: int = 10):
    """Vectorised Philox4x32 block cipher.

    Args:
        counter: four broadcastable arrays of 32-bit counter words.
        key: the two 32-bit key words.
        rounds: number of rounds (10 for the standard generator).

    Returns:
        Tuple of four ``uint64`` arrays holding the 32-bit output words.
    """
    c0, c1, c2, c3 = np.broadcast_arrays(*(np.asarray(c, dtype=np.uint64) & _MASK32 for c in counter))
    k0 = np.uint64(key[0]) & _MASK32
    k1 = np.uint64(key[1]) & _MASK32
    for _ in range(rounds):
        p0 = c0 * _PHILOX_M0
        p1 = c2 * _PHILOX_M1
        c0, c1, c2, c3 = (
            ((p1 >> _SHIFT32) ^ c1 ^ k0) & _MASK32,
            p1 & _MASK32,
            ((p0 >> _SHIFT32) ^ c3 ^ k1) & _MASK32,
            p0 & _MASK32,
        )
        k0 = (k0 + _PHILOX_W0) & _MASK32
        k1 = (k1 + _PHILOX_W1) & _MASK32
    return c0, c1, c2, c3


def _open_uniforms(seed: int, paths: np.ndarray, steps: np.ndarray, comps: np.ndarray) -> np.ndarray:
    seed = int(seed) & 0xFFFFFFFFFFFFFFFF
    paths = np.asarray(paths, dtype=np.uint64)
    w0, w1, _, _ = philox4x32(
        (steps, comps, paths & _MASK32, paths >> _SHIFT32),
        (seed & 0xFFFFFFFF, seed >> 32),
    )
    # 53-bit mantissa from two words, shifted into the open interval (0, 1)
    hi = (w0 >> np.uint64(5)).astype(np.float64)
    lo = (w1 >> np.uint64(6)).astype(np.float64)
    return (hi * 67108864.0 + lo + 0.5) / 9007199254740992.0


def standard_normals(seed: int, paths: np.ndarray, steps: np.ndarray, comps: np.ndarray) -> np.ndarray:
    """N(0, 1) draws addressed by broadcastable ``(path, step, component)`` arrays."""
    return ndtri(_open_uniforms(seed, paths, steps, comps))


# ---------------------------------------------------------------------------
# Brownian increments


@dataclass(frozen=True, eq=False)
class BrownianBundle:
    """Per-path Brownian increments ``[path, step, dim]`` on a time grid.

    ``first_path`` is the global index of row 0 and ``first_step`` the global
    step of column 0, so windows and path ranges of one master stream stay
    addressable.
    """

    grid: TimeGrid
    dim: int
    n_paths: int
    master_seed: int
    increments: np.ndarray = field(repr=False)
    first_path: int = 0
    first_step: int = 0

    @property
    def bundle_id(self) -> str:
        return (
            f"bm(seed={self.master_seed},paths={self.first_path}+{self.n_paths},"
            f"steps={self.first_step}+{self.grid.n_steps},dim={self.dim},dt={self.grid.dt!r})"
        )

    def paths(self) -> np.ndarray:
        """Brownian values ``B_{t_k} - B_{t_0}`` with shape ``[path, step + 1, dim]``."""
        out = np.zeros((self.n_paths, self.grid.n_steps + 1, self.dim))
        np.cumsum(self.increments, axis=1, out=out[:, 1:, :])
        return out

    def window(self, start: int) -> "BrownianBundle":
        """Increments from grid index ``start`` onwards, on the matching subgrid."""
        return BrownianBundle(
            self.grid.subgrid(start),
            self.dim,
            self.n_paths,
            self.master_seed,
            self.increments[:, start:, :],
            self.first_path,
            self.first_step + start,
        )

    def head(self, n_steps: int) -> "BrownianBundle":
        """The first ``n_steps`` increments, on the grid ``[t0, t_{n_steps}]``."""
        if not 1 <= n_steps <= self.grid.n_steps:
            raise ValueError(f"head length {n_steps} outside 1..{self.grid.n_steps}")
        grid = TimeGrid(self.grid.t0, self.grid.node(n_steps), n_steps)
        return BrownianBundle(
            grid, self.dim, self.n_paths, self.master_seed, self.increments[:, :n_steps, :],
            self.first_path, self.first_step,
        )

    def select(self, start: int, stop: int) -> "BrownianBundle":
        """Rows ``start:stop`` as their own bundle."""
        if not 0 <= start < stop <= self.n_paths:
            raise ValueError(f"path range {start}:{stop} outside 0..{self.n_paths}")
        return BrownianBundle(
            self.grid,
            self.dim,
            stop - start,
            self.master_seed,
            self.increments[start:stop],
            self.first_path + start,
            self.first_step,
        )


def sample_brownian(
    grid: TimeGrid,
    dim: int,
    n_paths: int,
    master_seed: int,
    first_path: int = 0,
    chunk_paths: int = 8192,
    max_bytes: int | None = None,
) -> BrownianBundle:
    """Simulate ``n_paths`` independent ``dim``-dimensional Brownian paths.

    Increments are ``sqrt(dt) * N(0, 1)`` with the normal obtained by inverse-CDF
    from the Philox stream at counter ``(step, component, path)``.  Chunks are
    filled by up to ``MF_FBSDE_THREADS`` workers; the result does not depend on
    the worker count.
    """
    if dim < 1 or n_paths < 1:
        raise ValueError(f"dim and n_paths must be >= 1, got dim={dim}, n_paths={n_paths}")
    if first_path < 0:
        raise ValueError("first_path must be non-negative")
    limit = max_bytes if max_bytes is not None else int(os.environ.get("MF_FBSDE_MAX_BYTES", _DEFAULT_MAX_BYTES))
    need = n_paths * grid.n_steps * dim * 8
    if need > limit:
        raise MemoryError(
            f"bundle of {n_paths} paths x {grid.n_steps} steps x {dim} dims needs {need} bytes, limit is {limit}"
        )

    out = np.empty((n_paths, grid.n_steps, dim))
    steps = np.arange(grid.n_steps, dtype=np.uint64)[None, :, None]
    comps = np.arange(dim, dtype=np.uint64)[None, None, :]
    scale = math.sqrt(grid.dt)

    def fill(lo: int) -> None:
        hi = min(lo + chunk_paths, n_paths)
        rows = np.arange(first_path + lo, first_path + hi, dtype=np.uint64)[:, None, None]
        out[lo:hi] = scale * standard_normals(master_seed, rows, steps, comps)

    starts = range(0, n_paths, chunk_paths)
    workers = worker_count()
    if workers > 1 and n_paths > chunk_paths:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            list(pool.map(fill, starts))
    else:
        for lo in starts:
            fill(lo)
    out.flags.writeable = False
    return BrownianBundle(grid, int(dim), int(n_paths), int(master_seed), out, int(first_path))


# ---------------------------------------------------------------------------
# empirical laws


@dataclass(frozen=True, eq=False)
class EmpiricalLaw:
    """Equally weighted atoms representing a law at one grid time."""

    atoms: np.ndarray
    time_index: int = 0

    def __post_init__(self) -> None:
        atoms = np.asarray(self.atoms, dtype=float)
        if atoms.ndim == 1:
            atoms = atoms[:, None]
        if atoms.shape[0] < 1:
            raise ValueError("an empirical law needs at least one atom")
        object.__setattr__(self, "atoms", atoms)

    @property
    def size(self) -> int:
        return self.atoms.shape[0]

    def mean(self) -> np.ndarray:
        return self.atoms.mean(axis=0)


def empirical_expectation(law: EmpiricalLaw, g: Callable[[np.ndarray], np.ndarray]) -> float:
    """Plain average of ``g`` over the atoms of ``law``.

    ``g`` is called once on the ``[atom, dim]`` array and must return one value
    per atom.
    """
    values = np.asarray(g(law.atoms), dtype=float).reshape(law.size, -1)
    if values.shape[1] != 1:
        raise ValueError(f"g must return one value per atom, got shape {values.shape}")
    values = values[:, 0]
    bad = np.flatnonzero(~np.isfinite(values))
    if bad.size:
        i = int(bad[0])
        raise FloatingPointError(f"g is not finite on atom {i} = {law.atoms[i].tolist()}: value {values[i]}")
    return float(values.mean())


# ---------------------------------------------------------------------------
# mean-field coefficients


@dataclass(frozen=True)
class Interaction:
    """A coefficient ``k(t, primed, own) = own(t, *own) + primed(t, *primed) + pair(t, *primed, *own)``.

    The split lets ``E'[k]`` be computed in linear time when the primed and own
    arguments enter separately; only ``pair`` needs the quadratic average.  All
    parts are vectorised over leading batch axes and return arrays whose
    trailing shape is ``out_shape``.
    """

    own: Callable | None = None
    primed: Callable | None = None
    pair: Callable | None = None
    out_shape: tuple[int, ...] = ()

    def __call__(self, t: float, primed_args: tuple, own_args: tuple) -> np.ndarray:
        total = np.zeros(self.out_shape)
        if self.own is not None:
            total = total + self.own(t, *own_args)
        if self.primed is not None:
            total = total + self.primed(t, *primed_args)
        if self.pair is not None:
            total = total + self.pair(t, *primed_args, *own_args)
        return total

    @property
    def is_zero(self) -> bool:
        return self.own is None and self.primed is None and self.pair is None

    @property
    def has_pair(self) -> bool:
        return self.pair is not None

    def average(
        self,
        t: float,
        primed_atoms: tuple,
        own_values: tuple,
        n_own: int,
        max_atoms: int | None = None,
        chunk_elems: int = 1 << 21,
    ) -> np.ndarray:
        """``E'[k(t, primed', own)]`` for each of ``n_own`` own points.

        Args:
            t: evaluation time.
            primed_atoms: arrays with a leading atom axis (the law of the primed arguments).
            own_values: arrays with a leading axis of length ``n_own``.
            n_own: number of own points.
            max_atoms: if set, the pair part averages over an evenly strided
                subsample of at most this many atoms.
            chunk_elems: bound on the pairwise block size.

        Returns:
            Array of shape ``(n_own, *out_shape)``.
        """
        out = np.zeros((n_own,) + self.out_shape)
        if self.own is not None:
            out = out + np.broadcast_to(self.own(t, *own_values), out.shape)
        if self.primed is not None:
            out = out + np.mean(self.primed(t, *primed_atoms), axis=0)
        if self.pair is not None:
            atoms = primed_atoms
            n_atoms = len(atoms[0])
            if max_atoms is not None and n_atoms > max_atoms:
                stride = -(-n_atoms // max_atoms)
                atoms = tuple(a[::stride] for a in atoms)
                n_atoms = len(atoms[0])
            rows = max(1, chunk_elems // max(n_atoms, 1))
            expanded = tuple(a[None, ...] for a in atoms)
            for lo in range(0, n_own, rows):
                hi = min(lo + rows, n_own)
                own_block = tuple(v[lo:hi, None, ...] for v in own_values)
                out[lo:hi] += np.mean(self.pair(t, *expanded, *own_block), axis=1)
        return out

    def companion_average(self, t: float, values: tuple, batch_shape: tuple[int, ...]) -> np.ndarray:
        """Average of ``k(t, other, self)`` over the other particles.

        Axis 0 of every array in ``values`` indexes the particles; further
        leading axes up to ``batch_shape`` are independent replications.
        """
        n = batch_shape[0]
        if n < 2:
            raise ValueError("companion averages need at least two particles")
        shape = tuple(batch_shape) + self.out_shape
        out = np.zeros(shape)
        if self.own is not None:
            out = out + self.own(t, *values)
        if self.primed is not None:
            p = np.broadcast_to(self.primed(t, *values), shape)
            out = out + (p.sum(axis=0) - p) / (n - 1)
        if self.pair is not None:
            grid = self.pair(t, *(v[None, ...] for v in values), *(v[:, None, ...] for v in values))
            diag = self.pair(t, *values, *values)
            out = out + (grid.sum(axis=1) - diag) / (n - 1)
        return out


def resample_indices(seed: int, rows: np.ndarray, m: int) -> np.ndarray:
    """Bootstrap index draws ``[len(rows), m]`` from ``range(m)``, one row per resample id."""
    rows = np.asarray(rows, dtype=np.uint64)[:, None]
    cols = np.arange(m, dtype=np.uint64)[None, :]
    u = _open_uniforms(seed, rows, cols, np.uint64(0))
    return np.minimum((u * m).astype(np.int64), m - 1)


@functools.lru_cache(maxsize=4)
def _resample_matrix(seed: int, n_resamples: int, m: int) -> np.ndarray:
    out = np.empty((n_resamples, m), dtype=np.int32)
    block = max(1, (1 << 21) // m)
    for lo in range(0, n_resamples, block):
        hi = min(lo + block, n_resamples)
        out[lo:hi] = resample_indices(seed, np.arange(lo, hi), m)
    out.flags.writeable = False
    return out


def bootstrap_std_error(values: np.ndarray, n_resamples: int = 200, seed: int = 0) -> float:
    """Bootstrap standard error of the sample mean of ``values``.

    Resampling indices come from the package's Philox stream, so the result is
    reproducible for a given ``seed``; the index table is cached because
    surfaces and probe sets reuse one seed across many estimates.
    """
    values = np.asarray(values, dtype=float).ravel()
    m = values.size
    if m < 2:
        return 0.0
    idx = _resample_matrix(int(seed), int(n_resamples), m)
    means = np.empty(n_resamples)
    block = max(1, (1 << 21) // m)
    for lo in range(0, n_resamples, block):
        means[lo : lo + block] = values[idx[lo : lo + block]].mean(axis=1)
    return float(means.std(ddof=1))
