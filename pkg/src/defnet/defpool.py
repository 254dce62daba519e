"""Deformation-constrained pooling.

For every channel ``c`` and output cell ``(y, x)`` the operator looks at the
``(2R+1) x (2R+1)`` block of offsets around the anchor ``(sy*y, sx*x)`` and
keeps the best penalised response::

    out[c, y, x] = max_{dy, dx} m[c, sy*y + dy, sx*x + dx] - sum_n a[c, n] * d[c, n, dy, dx]

Offsets that land outside the map, or whose basis entry is ``+inf`` in any
table, take no part in the max.  Ties go to the smallest ``(dy, dx)`` in
lexicographic order.

Basis tables are stored as arrays indexed ``[n, dy + R, dx + R]``.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np

from .tensor import DimensionError, ParameterError


class ConfigurationError(ValueError):
    """An anchor lies outside the map (map smaller than the stride)."""


class DegeneratePenaltyError(ValueError):
    """Every offset at some anchor is out of bounds or forbidden."""


@dataclass
class PenaltyBasis:
    R: int
    tables: np.ndarray  # [N, 2R+1, 2R+1]
    learnable: bool = True

    def __post_init__(self):
        self.tables = np.asarray(self.tables, dtype=np.float64)
        if self.R < 0:
            raise ParameterError("radius must be non-negative")
        S = 2 * self.R + 1
        if self.tables.ndim == 2:
            self.tables = self.tables[None]
        if self.tables.ndim != 3 or self.tables.shape[1:] != (S, S):
            raise DimensionError(f"tables must be [N, {S}, {S}], got {self.tables.shape}")
        if np.isnan(self.tables).any() or (self.tables == -np.inf).any():
            raise ParameterError("penalty tables must be finite or +inf")

    @property
    def N(self) -> int:
        return self.tables.shape[0]


@dataclass
class DefPoolConfig:
    """Strides, per-channel (or shared) bases and per-channel coefficients.

    ``basis`` is a single :class:`PenaltyBasis` shared by all channels or a
    list with one entry per channel (all with the same ``R`` and ``N``).
    ``coeffs`` has shape ``[C, N]``.
    """

    sx: int
    sy: int
    basis: PenaltyBasis | list
    coeffs: np.ndarray
    learnable: bool = True
    _cache: dict = field(default_factory=dict, repr=False, compare=False)

    def __post_init__(self):
        if self.sx < 1 or self.sy < 1:
            raise ParameterError("strides must be >= 1")
        self.coeffs = np.array(self.coeffs, dtype=np.float64, ndmin=2)
        bases = self.bases
        R, N = bases[0].R, bases[0].N
        if any(b.R != R or b.N != N for b in bases):
            raise ParameterError("per-channel bases must share R and N")
        if self.coeffs.shape[1] != N:
            raise DimensionError(f"coeffs need {N} entries per channel, got {self.coeffs.shape[1]}")
        if not self.shared_basis and len(bases) != self.channels:
            raise DimensionError("one basis per channel required when not shared")

    @property
    def shared_basis(self) -> bool:
        return isinstance(self.basis, PenaltyBasis)

    @property
    def bases(self) -> list:
        return [self.basis] if self.shared_basis else list(self.basis)

    @property
    def R(self) -> int:
        return self.bases[0].R

    @property
    def N(self) -> int:
        return self.bases[0].N

    @property
    def channels(self) -> int:
        return self.coeffs.shape[0]

    def tables(self) -> np.ndarray:
        """Basis tables broadcast to ``[C, N, S, S]``."""
        t = np.stack([b.tables for b in self.bases])
        return np.broadcast_to(t, (self.channels,) + t.shape[1:])

    def penalty(self):
        """Per-channel summed penalty ``[C, S, S]`` and the allowed-offset mask.

        The sum runs over ``n`` in order, starting from zero, so it is
        reproducible by a scalar loop.
        """
        d = self.tables()
        allowed = np.isfinite(d).all(axis=1)
        dfin = np.where(np.isfinite(d), d, 0.0)
        pen = np.zeros(allowed.shape)
        for n in range(self.N):
            pen = pen + self.coeffs[:, n, None, None] * dfin[:, n]
        return pen, allowed

    def copy(self) -> "DefPoolConfig":
        return DefPoolConfig(self.sx, self.sy, self.basis, self.coeffs.copy(), self.learnable)

    def to_json(self) -> str:
        def enc(t):
            return [[["inf" if np.isinf(v) else float(v) for v in row] for row in tab] for tab in t]

        doc = {
            "R": self.R,
            "sx": self.sx,
            "sy": self.sy,
            "N": self.N,
            "shared_basis": self.shared_basis,
            "learnable": self.learnable,
            "d_tables": enc(self.basis.tables) if self.shared_basis
            else [enc(b.tables) for b in self.basis],
            "coeffs": self.coeffs.tolist(),
        }
        return json.dumps(doc)

    @classmethod
    def from_json(cls, text: str) -> "DefPoolConfig":
        doc = json.loads(text)

        def dec(t):
            return np.array([[[np.inf if v == "inf" else v for v in row] for row in tab] for tab in t],
                            dtype=np.float64)

        R = int(doc["R"])
        if doc["shared_basis"]:
            basis = PenaltyBasis(R, dec(doc["d_tables"]))
        else:
            basis = [PenaltyBasis(R, dec(t)) for t in doc["d_tables"]]
        return cls(int(doc["sx"]), int(doc["sy"]), basis, doc["coeffs"], doc.get("learnable", True))


@dataclass
class ArgmaxRecord:
    """Winning offset and absolute source position for every output element."""

    dy: np.ndarray
    dx: np.ndarray
    rows: np.ndarray
    cols: np.ndarray
    in_shape: tuple


def defpool_forward(m: np.ndarray, cfg: DefPoolConfig):
    """Def-pool a ``[C, H, W]`` (or ``[B, C, H, W]``) map.

    Returns ``(out, record)`` with ``out`` of shape ``[..., C, H // sy, W // sx]``.
    """
    if m.ndim < 3 or m.shape[-3] != cfg.channels:
        raise DimensionError(f"map {m.shape} does not match {cfg.channels} configured channels")
    H, W = m.shape[-2:]
    Ho, Wo = H // cfg.sy, W // cfg.sx
    if Ho == 0 or Wo == 0:
        raise ConfigurationError(f"map {H}x{W} has no anchor for strides ({cfg.sy}, {cfg.sx})")
    R = cfg.R
    S = 2 * R + 1
    offs = np.arange(-R, R + 1)
    rows = np.arange(Ho)[:, None] * cfg.sy + offs[None, :]  # [Ho, S]
    cols = np.arange(Wo)[:, None] * cfg.sx + offs[None, :]  # [Wo, S]
    rvalid = (rows >= 0) & (rows < H)
    cvalid = (cols >= 0) & (cols < W)
    rc = np.clip(rows, 0, H - 1)
    cc = np.clip(cols, 0, W - 1)

    pen, allowed = cfg.penalty()
    # gathered[..., c, Ho, S, Wo, S] -> [..., c, Ho, Wo, S, S]
    g = m[..., rc[:, :, None, None], cc[None, None, :, :]]
    g = np.moveaxis(g, -3, -2)
    vals = g - pen[:, None, None, :, :]
    ok = (rvalid[:, None, :, None] & cvalid[None, :, None, :])[None] & allowed[:, None, None]
    vals = np.where(ok, vals, -np.inf)
    flat = vals.reshape(vals.shape[:-2] + (S * S,))
    if not ok.reshape(ok.shape[:-2] + (S * S,)).any(axis=-1).all():
        raise DegeneratePenaltyError("some anchor has no admissible offset")
    k = flat.argmax(axis=-1)
    out = np.take_along_axis(flat, k[..., None], axis=-1)[..., 0]
    dy = k // S - R
    dx = k % S - R
    src_r = np.arange(Ho)[:, None] * cfg.sy + dy
    src_c = np.arange(Wo)[None, :] * cfg.sx + dx
    return out, ArgmaxRecord(dy, dx, src_r, src_c, m.shape)


def defpool_backward(grad_out: np.ndarray, rec: ArgmaxRecord, cfg: DefPoolConfig):
    """Gradients w.r.t. the input map and the coefficients ``[C, N]``.

    ``d out / d a[c, n] = -d[c, n, dy*, dx*]``; the input gradient is routed to
    the winning source position as in max-pooling.
    """
    if grad_out.shape != rec.dy.shape:
        raise DimensionError(f"grad {grad_out.shape} does not match record {rec.dy.shape}")
    H, W = rec.in_shape[-2:]
    R = cfg.R
    d = cfg.tables()  # [C, N, S, S]
    C = d.shape[0]
    # d at the winning offsets: [..., C, N, Ho, Wo]
    ci = np.arange(C).reshape((C, 1, 1))
    won = np.moveaxis(d[ci, :, rec.dy + R, rec.dx + R], -1, -3)
    contrib = grad_out[..., None, :, :] * won
    lead = tuple(range(contrib.ndim - 4))
    grad_coeffs = -contrib.sum(axis=lead + (-2, -1))

    planes = int(np.prod(rec.in_shape[:-2], dtype=np.int64))
    flat_idx = (rec.rows * W + rec.cols).reshape(planes, -1)
    flat_idx = flat_idx + (np.arange(planes) * (H * W))[:, None]
    g = np.bincount(flat_idx.ravel(), weights=grad_out.ravel(), minlength=planes * H * W)
    return g.reshape(rec.in_shape), grad_coeffs


def _config(basis, channels, sx, sy, coeffs=None):
    if coeffs is None:
        coeffs = np.ones((channels, basis.N))
    return DefPoolConfig(sx, sy if sy is not None else sx, basis, coeffs, basis.learnable)


def make_maxpool_basis(k: int, channels: int = 1, sx: int = 1, sy: int | None = None) -> DefPoolConfig:
    """Zero penalty for ``|dx|, |dy| <= k`` and ``+inf`` on a one-cell ring beyond.

    The admissible window is ``2k + 1`` wide and centred on the anchor, so
    this matches ``max_pool(m, 2k + 1, s, pad=k)`` on the overlapping output
    cells.
    """
    if k < 0:
        raise ParameterError("k must be >= 0")
    R = k + 1
    t = np.full((2 * R + 1, 2 * R + 1), np.inf)
    t[1:-1, 1:-1] = 0.0
    return _config(PenaltyBasis(R, t, learnable=False), channels, sx, sy)


def make_global_basis(H: int, W: int, channels: int = 1, basis: PenaltyBasis | None = None,
                      coeffs=None) -> DefPoolConfig:
    """One output per channel, anchored at the map origin, offsets spanning the map."""
    if H < 1 or W < 1:
        raise ParameterError("map dimensions must be >= 1")
    if basis is None:
        R = max(H, W)
        basis = PenaltyBasis(R, np.zeros((2 * R + 1, 2 * R + 1)))
    elif basis.R < max(H, W) - 1:
        raise ParameterError("global basis radius must cover the map")
    return _config(basis, channels, W, H, coeffs)


def make_directional_basis(penalty_map) -> PenaltyBasis:
    """Single fixed table ``d[dy, dx]``; its coefficient is pinned to 1."""
    p = np.asarray(penalty_map, dtype=np.float64)
    if p.ndim != 2 or p.shape[0] != p.shape[1] or p.shape[0] % 2 == 0:
        raise ParameterError(f"penalty map must be square with odd side, got {p.shape}")
    return PenaltyBasis(p.shape[0] // 2, p, learnable=False)


def make_directional_bases(R: int) -> PenaltyBasis:
    """Four learnable tables: leftward, rightward, upward and downward distance.

    With coefficients ``a`` the penalty of moving by ``(dy, dx)`` is
    ``a0*max(-dx,0) + a1*max(dx,0) + a2*max(-dy,0) + a3*max(dy,0)``, so each
    direction can learn its own cost.
    """
    offs = np.arange(-R, R + 1, dtype=np.float64)
    dy, dx = np.meshgrid(offs, offs, indexing="ij")
    t = np.stack([np.maximum(-dx, 0), np.maximum(dx, 0), np.maximum(-dy, 0), np.maximum(dy, 0)])
    return PenaltyBasis(R, t, learnable=True)


def make_quadratic_basis(q, H: int, W: int, channels: int = 1) -> DefPoolConfig:
    """Global config whose four tables are the quadratic part-displacement terms.

    The anchor sits at the map origin, so an offset ``(dy, dx)`` is also the
    absolute position ``(i, j)`` and the tables hold ``(i-b1)^2, (j-b2)^2,
    i-b1, j-b2`` with coefficients ``a1..a4``.  The constant term is returned
    separately by :func:`quadratic_offset`.
    """
    if not (0 <= q.b1 < H and 0 <= q.b2 < W):
        raise ParameterError(f"anchor ({q.b1}, {q.b2}) outside {H}x{W} map")
    R = max(H, W)
    offs = np.arange(-R, R + 1, dtype=np.float64)
    i, j = np.meshgrid(offs, offs, indexing="ij")
    t = np.stack([(i - q.b1) ** 2, (j - q.b2) ** 2, i - q.b1, j - q.b2])
    coeffs = np.tile([q.a1, q.a2, q.a3, q.a4], (channels, 1))
    return make_global_basis(H, W, channels, PenaltyBasis(R, t), coeffs)


def quadratic_offset(q) -> float:
    """Score offset ``-(a3^2 / 4a1 + a4^2 / 4a2)`` completing the square."""
    if q.a1 <= 0 or q.a2 <= 0:
        raise ParameterError("a1 and a2 must be positive to complete the square")
    return -(q.a3 ** 2 / (4 * q.a1) + q.a4 ** 2 / (4 * q.a2))
