"""Periodic grids, grid fields and spectral calculus on the torus [0, L)^d.

All array-level helpers take arrays whose trailing ``d`` axes are the grid
axes; any leading axes (components, realizations) are carried along, so the
same code serves single fields and whole ensembles.
"""

from __future__ import annotations

import io
from dataclasses import dataclass
from functools import cached_property
from itertools import product
from pathlib import Path

import numpy as np

from stochlag import _kernels


class FieldError(ValueError):
    """Shape, dimension or gauge violation in a field operation."""


@dataclass(frozen=True)
class PeriodicGrid:
    """Uniform ``N**d`` collocation lattice on ``[0, L)^d``."""

    d: int
    N: int
    L: float = 2 * np.pi

    def __post_init__(self):
        if self.d not in (2, 3):
            raise FieldError(f"dimension must be 2 or 3, got {self.d}")
        if self.N < 8 or self.N & (self.N - 1):
            raise FieldError(f"N must be a power of two >= 8, got {self.N}")
        if not self.L > 0:
            raise FieldError(f"period L must be positive, got {self.L}")
        object.__setattr__(self, "L", float(self.L))

    @property
    def h(self) -> float:
        return self.L / self.N

    @property
    def shape(self) -> tuple[int, ...]:
        return (self.N,) * self.d

    @property
    def size(self) -> int:
        return self.N**self.d

    @property
    def axes(self) -> tuple[int, ...]:
        return tuple(range(-self.d, 0))

    @property
    def cell_volume(self) -> float:
        return self.h**self.d

    @cached_property
    def coords(self) -> tuple[np.ndarray, ...]:
        x = np.arange(self.N) * self.h
        return tuple(np.meshgrid(*([x] * self.d), indexing="ij"))

    @cached_property
    def nodes(self) -> np.ndarray:
        """Node positions, shape ``(N**d, d)``, row-major node order."""
        return np.stack([c.ravel() for c in self.coords], axis=-1)

    @cached_property
    def _mode_numbers(self) -> tuple[np.ndarray, ...]:
        # integer wavenumbers for the rfftn layout, broadcastable
        out = []
        for i in range(self.d):
            if i == self.d - 1:
                m = np.arange(self.N // 2 + 1)
            else:
                m = np.fft.fftfreq(self.N, 1.0 / self.N)
            shape = [1] * self.d
            shape[i] = m.size
            out.append(m.reshape(shape).astype(float))
        return tuple(out)

    @cached_property
    def k(self) -> tuple[np.ndarray, ...]:
        """Wavenumbers 2*pi*m/L per axis (Nyquist kept, for even operators)."""
        return tuple(2 * np.pi / self.L * m for m in self._mode_numbers)

    @cached_property
    def kd(self) -> tuple[np.ndarray, ...]:
        """Wavenumbers for odd (first) derivatives; the Nyquist mode is zeroed."""
        nyq = self.N // 2
        return tuple(
            np.where(np.abs(m) == nyq, 0.0, 2 * np.pi / self.L * m)
            for m in self._mode_numbers
        )

    @cached_property
    def k2(self) -> np.ndarray:
        return sum(np.broadcast_to(ki**2, self.spectral_shape) for ki in self.k)

    @cached_property
    def inv_k2(self) -> np.ndarray:
        k2 = self.k2
        out = np.zeros_like(k2)
        np.divide(1.0, k2, out=out, where=k2 > 0)
        return out

    @cached_property
    def kd2(self) -> np.ndarray:
        return sum(np.broadcast_to(ki**2, self.spectral_shape) for ki in self.kd)

    @cached_property
    def inv_kd2(self) -> np.ndarray:
        out = np.zeros_like(self.kd2)
        np.divide(1.0, self.kd2, out=out, where=self.kd2 > 0)
        return out

    @cached_property
    def spectral_shape(self) -> tuple[int, ...]:
        return (self.N,) * (self.d - 1) + (self.N // 2 + 1,)

    @cached_property
    def dealias_mask(self) -> np.ndarray:
        """Two-thirds rule mask in the rfftn layout."""
        cut = self.N / 3.0
        mask = np.ones(self.spectral_shape, bool)
        for m in self._mode_numbers:
            mask &= np.abs(m) < cut
        return mask

    @cached_property
    def _spline_symbol(self) -> np.ndarray:
        sym = np.ones(self.spectral_shape)
        for m in self._mode_numbers:
            sym = sym * (4.0 + 2.0 * np.cos(2 * np.pi * m / self.N)) / 6.0
        return sym

    def fft(self, values: np.ndarray) -> np.ndarray:
        return np.fft.rfftn(values, axes=self.axes)

    def ifft(self, hat: np.ndarray) -> np.ndarray:
        return np.fft.irfftn(hat, s=self.shape, axes=self.axes)

    def zeros(self, *component_shape: int) -> np.ndarray:
        return np.zeros(tuple(component_shape) + self.shape)

    def wrap(self, points: np.ndarray) -> np.ndarray:
        return np.mod(points, self.L)


class Field:
    """Real samples of a periodic scalar, vector or tensor function.

    ``values`` has shape ``component_shape + grid.shape`` with rank 0
    (scalar), 1 (``(d,)``) or 2 (``(d, d)``). Fields are immutable; the
    spectral view is built lazily and cached.
    """

    def __init__(self, grid: PeriodicGrid, values):
        values = np.array(values, dtype=float)
        if values.shape[values.ndim - grid.d:] != grid.shape or values.ndim < grid.d:
            raise FieldError(
                f"values of shape {values.shape} do not end in grid shape {grid.shape}"
            )
        rank = values.ndim - grid.d
        if rank > 2 or any(n != grid.d for n in values.shape[:rank]):
            raise FieldError(f"unsupported component shape {values.shape[:rank]}")
        values.setflags(write=False)
        self.grid = grid
        self.values = values

    @classmethod
    def from_function(cls, grid: PeriodicGrid, fn) -> "Field":
        return cls(grid, fn(*grid.coords))

    @property
    def rank(self) -> int:
        return self.values.ndim - self.grid.d

    @property
    def component_shape(self) -> tuple[int, ...]:
        return self.values.shape[: self.rank]

    @cached_property
    def hat(self) -> np.ndarray:
        h = self.grid.fft(self.values)
        h.setflags(write=False)
        return h

    def _check(self, other: "Field"):
        if other.grid != self.grid or other.values.shape != self.values.shape:
            raise FieldError("fields live on different grids or have different shapes")

    def __add__(self, other):
        if isinstance(other, Field):
            self._check(other)
            return Field(self.grid, self.values + other.values)
        return Field(self.grid, self.values + other)

    def __sub__(self, other):
        if isinstance(other, Field):
            self._check(other)
            return Field(self.grid, self.values - other.values)
        return Field(self.grid, self.values - other)

    def __mul__(self, scalar):
        return Field(self.grid, self.values * scalar)

    __rmul__ = __mul__

    def __neg__(self):
        return Field(self.grid, -self.values)

    def __repr__(self):
        return f"Field(rank={self.rank}, grid={self.grid})"

    def magnitude(self) -> np.ndarray:
        """Pointwise Euclidean (Frobenius for tensors) magnitude."""
        v = self.values
        if self.rank == 0:
            return np.abs(v)
        return np.sqrt(np.sum(v**2, axis=tuple(range(self.rank))))

    def mean(self) -> np.ndarray:
        return self.values.mean(axis=self.grid.axes)

    def integral(self) -> np.ndarray:
        return self.values.sum(axis=self.grid.axes) * self.grid.cell_volume

    def norm_l2(self) -> float:
        return float(np.sqrt(np.sum(self.values**2) * self.grid.cell_volume))

    def norm_l1(self) -> float:
        return float(np.sum(self.magnitude()) * self.grid.cell_volume)

    def norm_inf(self) -> float:
        return float(self.magnitude().max())


def zeros(grid: PeriodicGrid, rank: int = 0) -> Field:
    return Field(grid, grid.zeros(*(grid.d,) * rank))


def identity_tensor(grid: PeriodicGrid) -> Field:
    eye = np.eye(grid.d).reshape((grid.d, grid.d) + (1,) * grid.d)
    return Field(grid, np.broadcast_to(eye, (grid.d, grid.d) + grid.shape))


# ---------------------------------------------------------------------------
# array-level spectral operators (leading axes are batch/components)


def gradient_hat(grid: PeriodicGrid, hat: np.ndarray) -> np.ndarray:
    """Spectral gradient; the new derivative axis is inserted right before the grid axes."""
    return np.stack([1j * kd * hat for kd in grid.kd], axis=hat.ndim - grid.d)


def divergence_hat(grid: PeriodicGrid, hat: np.ndarray) -> np.ndarray:
    """Divergence over the component axis just before the grid axes."""
    ax = hat.ndim - grid.d - 1
    return sum(1j * grid.kd[i] * np.take(hat, i, axis=ax) for i in range(grid.d))


def leray_hat(grid: PeriodicGrid, hat: np.ndarray) -> np.ndarray:
    """Leray projection of vector spectra ``(..., d, *spectral_shape)``."""
    ax = hat.ndim - grid.d - 1
    kdotv = sum(grid.kd[i] * np.take(hat, i, axis=ax) for i in range(grid.d))
    phi = kdotv * grid.inv_kd2
    return np.stack([np.take(hat, i, axis=ax) - grid.kd[i] * phi for i in range(grid.d)], axis=ax)


def leray_array(grid: PeriodicGrid, values: np.ndarray) -> np.ndarray:
    return grid.ifft(leray_hat(grid, grid.fft(values)))


def curl_hat(grid: PeriodicGrid, hat: np.ndarray) -> np.ndarray:
    ax = hat.ndim - grid.d - 1
    c = [np.take(hat, i, axis=ax) for i in range(grid.d)]
    k = grid.kd
    if grid.d == 2:
        return 1j * (k[0] * c[1] - k[1] * c[0])
    return np.stack(
        [
            1j * (k[1] * c[2] - k[2] * c[1]),
            1j * (k[2] * c[0] - k[0] * c[2]),
            1j * (k[0] * c[1] - k[1] * c[0]),
        ],
        axis=ax,
    )


def biot_savart_hat(grid: PeriodicGrid, omega_hat: np.ndarray, scalar: bool) -> np.ndarray:
    k = grid.kd
    if scalar:
        psi = -omega_hat * grid.inv_k2
        return np.stack([-1j * k[1] * psi, 1j * k[0] * psi], axis=omega_hat.ndim - grid.d)
    return curl_hat(grid, omega_hat) * grid.inv_k2


def spline_coefficients(grid: PeriodicGrid, values: np.ndarray) -> np.ndarray:
    """Periodic cubic B-spline coefficients interpolating ``values`` at the nodes."""
    return grid.ifft(grid.fft(values) / grid._spline_symbol)


def spline_eval(grid: PeriodicGrid, coef: np.ndarray, points: np.ndarray) -> np.ndarray:
    """Evaluate prefiltered spline coefficients.

    ``coef`` has shape ``(B, C, *grid.shape)`` with ``B`` either 1 (shared)
    or equal to the batch size of ``points`` ``(B, P, d)``. Returns
    ``(B, C, P)``.
    """
    coef = np.ascontiguousarray(coef, dtype=float)
    points = np.ascontiguousarray(points, dtype=float)
    if coef.ndim != grid.d + 2 or points.ndim != 3 or points.shape[2] != grid.d:
        raise FieldError("spline_eval expects coef (B, C, *grid) and points (B, P, d)")
    if coef.shape[0] not in (1, points.shape[0]):
        raise FieldError("coefficient batch does not match point batch")
    out = np.empty((points.shape[0], coef.shape[1], points.shape[1]))
    kernel = _kernels.spline_eval_2d if grid.d == 2 else _kernels.spline_eval_3d
    kernel(coef, points, 1.0 / grid.h, out)
    return out


def trig_eval(grid: PeriodicGrid, values: np.ndarray, points: np.ndarray, block: int = 2048) -> np.ndarray:
    """Evaluate the trigonometric interpolant of ``values`` (``(C, *grid)``) at ``points`` ``(P, d)``."""
    n = grid.N
    hat = np.fft.fftn(values, axes=grid.axes) / grid.size
    m = np.fft.fftfreq(n, 1.0 / n)
    k = 2 * np.pi / grid.L * m
    nc = values.shape[0]
    out = np.empty((nc, points.shape[0]))
    flat = hat.reshape(nc, n, -1)
    for start in range(0, points.shape[0], block):
        p = points[start : start + block]
        e = [np.exp(1j * np.outer(p[:, i], k)) for i in range(grid.d)]
        if grid.d == 2:
            t = np.einsum("pi,cij->cpj", e[0], flat)
            out[:, start : start + block] = np.einsum("cpj,pj->cp", t, e[1]).real
        else:
            t = np.einsum("pi,cij->cpj", e[0], flat).reshape(nc, p.shape[0], n, n)
            t = np.einsum("cpjk,pj->cpk", t, e[1])
            out[:, start : start + block] = np.einsum("cpk,pk->cp", t, e[2]).real
    return out


# ---------------------------------------------------------------------------
# field-level operations


def differentiate(f: Field, kind: str) -> Field:
    """Exact spectral derivative of the trigonometric interpolant.

    ``kind`` is one of ``gradient``, ``divergence``, ``curl``, ``laplacian``.
    """
    g = f.grid
    if kind == "gradient":
        if f.rank == 2:
            raise FieldError("gradient of a tensor field is not supported")
        return Field(g, g.ifft(gradient_hat(g, f.hat)))
    if kind == "divergence":
        if f.rank != 1:
            raise FieldError("divergence needs a vector field")
        return Field(g, g.ifft(divergence_hat(g, f.hat)))
    if kind == "curl":
        if f.rank != 1:
            raise FieldError(f"curl needs a vector field, got rank {f.rank}")
        return Field(g, g.ifft(curl_hat(g, f.hat)))
    if kind == "laplacian":
        return Field(g, g.ifft(-g.k2 * f.hat))
    raise FieldError(f"unknown derivative kind {kind!r}")


def gradient(f: Field) -> Field:
    return differentiate(f, "gradient")


def divergence(f: Field) -> Field:
    return differentiate(f, "divergence")


def curl(f: Field) -> Field:
    return differentiate(f, "curl")


def laplacian(f: Field) -> Field:
    return differentiate(f, "laplacian")


def partial(f: Field, multi_index) -> Field:
    """``D^m f`` for a multi-index ``m`` (one nonnegative order per axis)."""
    g = f.grid
    hat = f.hat
    for i, order in enumerate(multi_index):
        if order:
            hat = hat * (1j * (g.kd[i] if order % 2 else g.k[i])) ** order
    return Field(g, g.ifft(hat))


def _zero_mode(f: Field) -> np.ndarray:
    idx = (Ellipsis,) + (0,) * f.grid.d
    return f.hat[idx] / f.grid.size


def _require_mean_zero(f: Field, what: str, rtol: float = 1e-10):
    scale = max(float(np.sqrt(np.mean(f.values**2))), np.finfo(float).tiny)
    if np.any(np.abs(_zero_mode(f)) > rtol * scale):
        raise FieldError(f"{what} requires a mean-zero field")


def inverse_laplacian(f: Field) -> Field:
    """Mean-zero solution ``g`` of ``laplacian(g) = f``."""
    _require_mean_zero(f, "inverse_laplacian")
    return Field(f.grid, f.grid.ifft(-f.hat * f.grid.inv_k2))


def leray_project(v: Field) -> Field:
    """``v - grad(inverse_laplacian(div v))``; keeps the mean of ``v``."""
    if v.rank != 1:
        raise FieldError("leray_project needs a vector field")
    return Field(v.grid, v.grid.ifft(leray_hat(v.grid, v.hat)))


def biot_savart(omega: Field, div_tol: float = 1e-8) -> Field:
    """Mean-zero divergence-free velocity whose curl is ``omega``.

    d=2 takes a scalar vorticity and returns ``perp-grad inverse_laplacian(omega)``;
    d=3 takes a divergence-free vector vorticity and returns
    ``-inverse_laplacian(curl omega)``.
    """
    g = omega.grid
    _require_mean_zero(omega, "biot_savart")
    if g.d == 2:
        if omega.rank != 0:
            raise FieldError("2-D vorticity must be a scalar field")
        return Field(g, g.ifft(biot_savart_hat(g, omega.hat, scalar=True)))
    if omega.rank != 1:
        raise FieldError("3-D vorticity must be a vector field")
    div = divergence(omega)
    scale = max(omega.norm_inf() * g.N / g.L, np.finfo(float).tiny)
    if div.norm_inf() > div_tol * scale:
        raise FieldError("3-D vorticity is not divergence-free")
    return Field(g, g.ifft(biot_savart_hat(g, omega.hat, scalar=False)))


def default_scheme(grid: PeriodicGrid, npoints: int) -> str:
    # direct trig evaluation costs npoints * N**d
    if grid.N <= 64 and npoints * grid.size <= 5e7:
        return "trig"
    return "spline"


def interpolate(f: Field, points, scheme: str = "auto") -> np.ndarray:
    """Evaluate the periodic interpolant of ``f`` at arbitrary ``points``.

    ``points`` has shape ``(..., d)``; positions are wrapped periodically.
    Returns an array of shape ``component_shape + points.shape[:-1]``.
    """
    g = f.grid
    pts = np.asarray(points, dtype=float)
    if pts.shape[-1] != g.d:
        raise FieldError(f"points must have trailing dimension {g.d}")
    lead = pts.shape[:-1]
    flat = g.wrap(pts.reshape(-1, g.d))
    comps = f.values.reshape((-1,) + g.shape)
    if scheme == "auto":
        scheme = default_scheme(g, flat.shape[0])
    if scheme == "trig":
        out = trig_eval(g, comps, flat)
    elif scheme == "spline":
        coef = spline_coefficients(g, comps)[None]
        out = spline_eval(g, coef, flat[None])[0]
    else:
        raise FieldError(f"unknown interpolation scheme {scheme!r}")
    return out.reshape(f.component_shape + lead)


# ---------------------------------------------------------------------------
# smooth random fields for experiments and tests


def random_smooth(grid: PeriodicGrid, rng: np.random.Generator, rank: int = 0,
                  kmax: int = 4, decay: float = 1.0) -> Field:
    """Random real trigonometric polynomial with modes ``|m_i| <= kmax`` and zero mean."""
    if kmax >= grid.N // 2:
        raise FieldError("kmax must stay below the Nyquist mode")
    shape = (grid.d,) * rank
    hat = np.zeros(shape + grid.spectral_shape, complex)
    m = grid._mode_numbers
    band = np.ones(grid.spectral_shape, bool)
    mag2 = np.zeros(grid.spectral_shape)
    for mi in m:
        band &= np.abs(mi) <= kmax
        mag2 = mag2 + mi**2
    band &= mag2 > 0
    amp = np.where(band, (1.0 + mag2) ** (-decay), 0.0)
    noise = rng.standard_normal(shape + grid.spectral_shape) + 1j * rng.standard_normal(
        shape + grid.spectral_shape
    )
    hat = noise * amp * grid.size
    values = grid.ifft(hat)
    values /= max(np.sqrt(np.mean(values**2)), np.finfo(float).tiny)
    return Field(grid, values)


def random_solenoidal(grid: PeriodicGrid, rng: np.random.Generator, kmax: int = 4,
                      decay: float = 1.0) -> Field:
    v = random_smooth(grid, rng, rank=1, kmax=kmax, decay=decay)
    return leray_project(v)


# ---------------------------------------------------------------------------
# snapshot files

_MAGIC = "stochlag-field 1"


def write_snapshot(path, f: Field):
    """Text header followed by raw little-endian float64 samples, row-major."""
    ncomp = int(np.prod(f.component_shape)) if f.rank else 1
    header = "\n".join(
        [
            _MAGIC,
            f"d = {f.grid.d}",
            f"N = {f.grid.N}",
            f"L = {f.grid.L!r}",
            f"components = {ncomp}",
            f"rank = {f.rank}",
            "order = row-major",
            "dtype = <f8",
            "end",
        ]
    )
    with open(path, "wb") as fh:
        fh.write(header.encode("ascii") + b"\n")
        fh.write(np.ascontiguousarray(f.values, dtype="<f8").tobytes())
    return Path(path)


def read_snapshot(path) -> Field:
    raw = Path(path).read_bytes()
    buf = io.BytesIO(raw)
    if buf.readline().decode("ascii").strip() != _MAGIC:
        raise FieldError(f"{path}: not a field snapshot")
    meta = {}
    while True:
        line = buf.readline().decode("ascii").strip()
        if line == "end":
            break
        if not line:
            raise FieldError(f"{path}: truncated header")
        key, _, val = line.partition("=")
        meta[key.strip()] = val.strip()
    grid = PeriodicGrid(int(meta["d"]), int(meta["N"]), float(meta["L"]))
    rank = int(meta["rank"])
    data = np.frombuffer(buf.read(), dtype="<f8")
    shape = (grid.d,) * rank + grid.shape
    if data.size != int(np.prod(shape)):
        raise FieldError(f"{path}: payload size {data.size} does not match header")
    return Field(grid, data.reshape(shape).astype(float))


def multi_indices(d: int, order: int):
    """All multi-indices of total order ``order`` in ``d`` variables."""
    return [m for m in product(range(order + 1), repeat=d) if sum(m) == order]
