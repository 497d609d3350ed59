"""Random Fourier Features for translation-invariant kernels.

A :class:`FourierBasis` freezes ``B`` frequency vectors drawn from the spectral
density of a kernel. Its feature map ``phi`` satisfies
``phi(u) @ phi(v) ~= k(u - v)`` and has unit norm for every input.
"""
from __future__ import annotations

import struct
from dataclasses import dataclass, field

import numpy as np
from numpy.typing import ArrayLike, NDArray

from . import kernels
from .errors import DomainError, ParameterError, ProtocolError, ShapeError

GAUSSIAN = "gaussian"
LAPLACIAN = "laplacian"
MATERN = "matern"

MATERN_NUS = (0.5, 1.5, 2.5)
KERNELS = (GAUSSIAN, LAPLACIAN, MATERN)

# one-byte family tags used by the wire format
_TAGS = {
    (GAUSSIAN, None): 0,
    (LAPLACIAN, None): 1,
    (MATERN, 0.5): 2,
    (MATERN, 1.5): 3,
    (MATERN, 2.5): 4,
}
_FROM_TAG = {v: k for k, v in _TAGS.items()}
_HEADER = struct.Struct("<BdII")


@dataclass(frozen=True, eq=False)
class FourierBasis:
    """Frozen random frequencies for one input space.

    Attributes
    ----------
    kernel : str
        ``"gaussian"``, ``"laplacian"`` or ``"matern"``.
    lengthscale : float
        Kernel lengthscale. For the Laplacian family this is the rate in
        ``exp(-l * ||u - v||_1)``.
    frequencies : ndarray of shape (num_features, input_dim)
    nu : float or None
        Matérn smoothness, one of 0.5, 1.5, 2.5.
    seed : int or None
        Seed used to draw the frequencies, ``None`` for hand-built bases.
    """

    kernel: str
    lengthscale: float
    frequencies: NDArray[np.float64]
    nu: float | None = None
    seed: int | None = None
    _tag: int = field(init=False, repr=False)

    def __post_init__(self):
        freqs = np.ascontiguousarray(self.frequencies, dtype=np.float64)
        if freqs.ndim != 2 or freqs.shape[0] < 1 or freqs.shape[1] < 1:
            raise ShapeError(f"frequencies must be a non-empty 2-d array, got shape {freqs.shape}")
        if not np.all(np.isfinite(freqs)):
            raise ParameterError("frequencies must be finite")
        freqs.setflags(write=False)
        object.__setattr__(self, "frequencies", freqs)
        nu = None if self.nu is None else float(self.nu)
        object.__setattr__(self, "nu", nu)
        key = (self.kernel, nu)
        if key not in _TAGS:
            raise ParameterError(f"unsupported kernel family {self.kernel!r} with nu={nu}")
        if not self.lengthscale > 0:
            raise ParameterError(f"lengthscale must be positive, got {self.lengthscale}")
        object.__setattr__(self, "_tag", _TAGS[key])

    @property
    def input_dim(self) -> int:
        return self.frequencies.shape[1]

    @property
    def num_features(self) -> int:
        return self.frequencies.shape[0]

    @property
    def dim(self) -> int:
        """Length of the feature vector, ``2 * num_features``."""
        return 2 * self.frequencies.shape[0]

    def __call__(self, u: ArrayLike) -> NDArray[np.float64]:
        return feature_map(self, u)

    def __eq__(self, other):
        if not isinstance(other, FourierBasis):
            return NotImplemented
        return (
            self._tag == other._tag
            and self.lengthscale == other.lengthscale
            and np.array_equal(self.frequencies, other.frequencies)
        )

    def to_bytes(self) -> bytes:
        """Family tag, lengthscale, d, B, then the frequencies row-major (little-endian)."""
        head = _HEADER.pack(self._tag, float(self.lengthscale), self.input_dim, self.num_features)
        return head + self.frequencies.astype("<f8").tobytes(order="C")

    @classmethod
    def from_bytes(cls, buf: bytes, offset: int = 0) -> tuple[FourierBasis, int]:
        """Decode a basis starting at ``offset``; returns the basis and the next offset."""
        if len(buf) - offset < _HEADER.size:
            raise ProtocolError("truncated basis header")
        tag, ell, d, b = _HEADER.unpack_from(buf, offset)
        offset += _HEADER.size
        if tag not in _FROM_TAG:
            raise ProtocolError(f"unknown kernel tag {tag}")
        n = b * d
        if len(buf) - offset < 8 * n:
            raise ProtocolError(f"truncated basis: need {8 * n} frequency bytes, have {len(buf) - offset}")
        freqs = np.frombuffer(buf, dtype="<f8", count=n, offset=offset).reshape(b, d)
        kernel, nu = _FROM_TAG[tag]
        return cls(kernel, ell, freqs.astype(np.float64), nu=nu), offset + 8 * n

    def to_dict(self) -> dict:
        return {
            "kernel": self.kernel,
            "nu": self.nu,
            "lengthscale": self.lengthscale,
            "seed": self.seed,
            "frequencies": self.frequencies.tolist(),
        }

    @classmethod
    def from_dict(cls, d: dict) -> FourierBasis:
        return cls(
            d["kernel"],
            float(d["lengthscale"]),
            np.asarray(d["frequencies"], dtype=np.float64),
            nu=d.get("nu"),
            seed=d.get("seed"),
        )


def sample_basis(
    kernel: str = GAUSSIAN,
    lengthscale: float = 1.0,
    input_dim: int = 1,
    num_features: int = 100,
    seed: int = 0,
    nu: float | None = None,
) -> FourierBasis:
    """Draw ``num_features`` i.i.d. frequencies from the kernel's spectral density.

    Gaussian: ``N(0, l^-2 I)``. Laplacian: independent Cauchy(0, l) per
    dimension. Matérn(nu): multivariate Student-t with ``2 nu`` degrees of
    freedom and scale ``1/l``.
    """
    if not lengthscale > 0:
        raise ParameterError(f"lengthscale must be positive, got {lengthscale}")
    if int(num_features) < 1 or int(input_dim) < 1:
        raise ParameterError("num_features and input_dim must be >= 1")
    b, d = int(num_features), int(input_dim)
    rng = np.random.default_rng(seed)
    if kernel == GAUSSIAN:
        freqs = rng.normal(0.0, 1.0 / lengthscale, size=(b, d))
        nu = None
    elif kernel == LAPLACIAN:
        freqs = lengthscale * rng.standard_cauchy(size=(b, d))
        nu = None
    elif kernel == MATERN:
        if nu is None or float(nu) not in MATERN_NUS:
            raise ParameterError(f"unsupported Matérn nu={nu}; expected one of {MATERN_NUS}")
        nu = float(nu)
        g = rng.standard_normal(size=(b, d))
        chi2 = rng.chisquare(2.0 * nu, size=(b, 1))
        freqs = g * np.sqrt(2.0 * nu / chi2) / lengthscale
    else:
        raise ParameterError(f"unknown kernel family {kernel!r}")
    return FourierBasis(kernel, float(lengthscale), freqs, nu=nu, seed=seed)


def feature_map(basis: FourierBasis, u: ArrayLike) -> NDArray[np.float64]:
    """``B^{-1/2} [cos(w_b . u)]_b ++ [sin(w_b . u)]_b``.

    Accepts a single vector of length ``d`` or a batch of shape ``(n, d)``.
    """
    arr = np.asarray(u, dtype=np.float64)
    single = arr.ndim == 1
    batch = np.atleast_2d(arr)
    if batch.ndim != 2 or batch.shape[1] != basis.input_dim:
        raise ShapeError(f"expected inputs of dimension {basis.input_dim}, got shape {arr.shape}")
    out = kernels.rff_features(np.ascontiguousarray(batch), basis.frequencies)
    return out[0] if single else out


def exact_kernel(basis: FourierBasis, u: ArrayLike, v: ArrayLike) -> NDArray[np.float64] | float:
    """Closed-form kernel value that ``basis`` approximates."""
    diff = np.asarray(u, dtype=np.float64) - np.asarray(v, dtype=np.float64)
    ell = basis.lengthscale
    if basis.kernel == GAUSSIAN:
        return np.exp(-np.sum(diff**2, axis=-1) / (2 * ell**2))
    if basis.kernel == LAPLACIAN:
        return np.exp(-ell * np.sum(np.abs(diff), axis=-1))
    r = np.sqrt(np.sum(diff**2, axis=-1)) / ell
    if basis.nu == 0.5:
        return np.exp(-r)
    if basis.nu == 1.5:
        a = np.sqrt(3.0) * r
        return (1 + a) * np.exp(-a)
    a = np.sqrt(5.0) * r
    return (1 + a + a**2 / 3) * np.exp(-a)


def effective_weight(own: ArrayLike, others) -> NDArray[np.float64]:
    """Own head weights plus factor-weighted weights of the other sources.

    ``others`` is an iterable of ``(factor, weights)`` pairs with factors in
    ``[0, 1]``. The result dotted with ``phi(u)`` is the transferred head.
    """
    out = np.array(own, dtype=np.float64, copy=True)
    for lam, w in others:
        lam = float(lam)
        if not 0.0 <= lam <= 1.0:
            raise DomainError(f"transfer factor {lam} outside [0, 1]")
        w = np.asarray(w, dtype=np.float64)
        if w.shape != out.shape:
            raise ShapeError(f"weight shape {w.shape} does not match {out.shape}")
        out += lam * w
    return out
