"""Source datasets, the synthetic benchmark generator and CSV ingestion."""
from __future__ import annotations

import csv
import json
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from numpy.typing import NDArray
from scipy.special import expit

from .errors import IngestionError, ParameterError, ShapeError

RHO_DEFAULT = (0.11, 0.17, 0.34, 0.26, 0.12)
C0_DEFAULT = 0.9
D0_DEFAULT = 7.9
N_CATEGORIES = 5
DX_DEFAULT = 30
SPLIT_FRACTIONS = (0.05, 0.45, 0.40)  # train / test / validation per 1000 records
BENCHMARK_KINDS = ("same", "diff", "large_same", "large_diff")


@dataclass
class SourceDataset:
    """Observed records of one source: treatment, outcome, covariates."""

    w: NDArray[np.float64]
    y: NDArray[np.float64]
    x: NDArray[np.float64]
    unit_ids: list[str] | None = None

    def __post_init__(self):
        self.w = np.asarray(self.w, dtype=np.float64).reshape(-1)
        self.y = np.asarray(self.y, dtype=np.float64).reshape(-1)
        self.x = np.asarray(self.x, dtype=np.float64)
        if self.x.ndim == 1:
            self.x = self.x.reshape(len(self.w), -1) if len(self.w) else self.x.reshape(0, 0)
        n = len(self.w)
        if len(self.y) != n or self.x.shape[0] != n:
            raise ShapeError(f"inconsistent record counts: w={n}, y={len(self.y)}, x={self.x.shape[0]}")
        if np.any((self.w != 0) & (self.w != 1)):
            raise ParameterError("treatments must be 0 or 1")
        if self.unit_ids is not None:
            self.unit_ids = [str(u) for u in self.unit_ids]
            if len(self.unit_ids) != n:
                raise ShapeError("unit_ids length does not match record count")

    def __len__(self):
        return len(self.w)

    @property
    def d_x(self) -> int:
        return self.x.shape[1]

    def subset(self, idx) -> SourceDataset:
        idx = np.asarray(idx, dtype=np.intp)
        ids = None if self.unit_ids is None else [self.unit_ids[i] for i in idx]
        return SourceDataset(self.w[idx], self.y[idx], self.x[idx], ids)

    def __eq__(self, other):
        if not isinstance(other, SourceDataset):
            return NotImplemented
        return (np.array_equal(self.w, other.w) and np.array_equal(self.y, other.y)
                and np.array_equal(self.x, other.x) and self.unit_ids == other.unit_ids)

    @classmethod
    def empty(cls, d_x: int) -> SourceDataset:
        return cls(np.zeros(0), np.zeros(0), np.zeros((0, d_x)), [])


# ---------------------------------------------------------------------------
# synthetic benchmark


def softplus(a):
    return np.logaddexp(0.0, a)


@dataclass
class GroundTruthParams:
    """Coefficients shared by every source of one benchmark (only ``delta`` varies)."""

    rho: NDArray[np.float64]
    a0: NDArray[np.float64]   # (d_x,)
    a1: NDArray[np.float64]   # (d_x, 5)
    b0: float
    b1: NDArray[np.float64]   # (5,)
    c0: float
    c1: NDArray[np.float64]
    d0: float
    d1: NDArray[np.float64]
    sigma0: float = 1.0
    sigma1: float = 1.0

    def __post_init__(self):
        self.rho = np.asarray(self.rho, dtype=np.float64)
        if abs(self.rho.sum() - 1.0) > 1e-12 or np.any(self.rho < 0):
            raise ParameterError("rho must lie on the probability simplex")
        if not (self.sigma0 > 0 and self.sigma1 > 0):
            raise ParameterError("outcome noise scales must be positive")

    @property
    def d_x(self) -> int:
        return len(self.a0)

    @classmethod
    def draw(cls, seed: int, d_x: int = DX_DEFAULT, coef_var: float = 2.0,
             sigma0: float = 1.0, sigma1: float = 1.0) -> GroundTruthParams:
        """Coefficients i.i.d. N(0, coef_var); rho, c0, d0 at their published defaults."""
        rng = np.random.default_rng(seed)
        sd = math.sqrt(coef_var)
        k = N_CATEGORIES
        return cls(
            rho=np.array(RHO_DEFAULT),
            a0=rng.normal(0, sd, d_x),
            a1=rng.normal(0, sd, (d_x, k)),
            b0=float(rng.normal(0, sd)),
            b1=rng.normal(0, sd, k),
            c0=C0_DEFAULT,
            c1=rng.normal(0, sd, k),
            d0=D0_DEFAULT,
            d1=rng.normal(0, sd, k),
            sigma0=sigma0,
            sigma1=sigma1,
        )

    def to_dict(self) -> dict:
        return {k: (v.tolist() if isinstance(v, np.ndarray) else v) for k, v in self.__dict__.items()}

    @classmethod
    def from_dict(cls, d: dict) -> GroundTruthParams:
        arr = {k: np.asarray(v, dtype=np.float64) for k, v in d.items()
               if k in ("rho", "a0", "a1", "b1", "c1", "d1")}
        return cls(**{**d, **arr})


@dataclass
class BenchmarkSource:
    observed: SourceDataset
    y0: NDArray[np.float64]
    y1: NDArray[np.float64]
    cate: NDArray[np.float64]
    delta: float
    z: NDArray[np.intp] = field(repr=False, default=None)
    splits: dict = field(default_factory=dict)

    def split(self, name: str) -> SourceDataset:
        lo, hi = self.splits[name]
        return self.observed.subset(np.arange(lo, hi))

    def split_truth(self, name: str) -> NDArray[np.float64]:
        lo, hi = self.splits[name]
        return self.cate[lo:hi]


def generate_source(gt: GroundTruthParams, delta: float, n: int, seed: int,
                    id_prefix: str = "u") -> BenchmarkSource:
    """Draw ``n`` records with discrepancy ``delta`` added to the b1, c1, d1 coefficients."""
    if n < 1:
        raise ParameterError("n must be >= 1")
    rng = np.random.default_rng(seed)
    k = len(gt.rho)
    cat = rng.choice(k, size=n, p=gt.rho)
    z = np.eye(k)[cat]
    px = expit(gt.a0[None, :] + z @ gt.a1.T)
    x = (rng.random(px.shape) < px).astype(np.float64)
    pw = expit(gt.b0 + z @ (gt.b1 + delta))
    w = (rng.random(n) < pw).astype(np.float64)
    mu0 = softplus(gt.c0 + z @ (gt.c1 + delta))
    mu1 = softplus(gt.d0 + z @ (gt.d1 + delta))
    y0 = rng.normal(mu0, gt.sigma0)
    y1 = rng.normal(mu1, gt.sigma1)
    y = np.where(w == 1, y1, y0)
    ids = [f"{id_prefix}{i}" for i in range(n)]
    return BenchmarkSource(SourceDataset(w, y, x, ids), y0, y1, mu1 - mu0, float(delta), cat)


def split_sizes(n: int, train: int | None = None, test: int | None = None,
                val: int | None = None) -> dict:
    """Index ranges ``[lo, hi)`` for train/test/val; defaults scale 50/450/400 per 1000."""
    sizes = [train, test, val]
    for i, frac in enumerate(SPLIT_FRACTIONS):
        if sizes[i] is None:
            sizes[i] = int(round(frac * n))
    if min(sizes) < 1 or sum(sizes) > n:
        raise ParameterError(f"n={n} too small for splits train/test/val={sizes}")
    out, lo = {}, 0
    for name, size in zip(("train", "test", "val"), sizes):
        out[name] = (lo, lo + size)
        lo += size
    return out


def benchmark_deltas(kind: str, m: int, rng: np.random.Generator) -> list[float]:
    if kind not in BENCHMARK_KINDS:
        raise ParameterError(f"unknown benchmark kind {kind!r}")
    if m < 1:
        raise ParameterError("m must be >= 1")
    if kind in ("same", "large_same"):
        return [0.0] * m
    if kind == "diff":
        return [0.0] + [4.0] * (m - 1)
    return [float(v) for v in rng.uniform(0.0, 8.0, m)]


def make_benchmark(kind: str, m: int, n_per_source: int = 1000, seed: int = 0,
                   d_x: int = DX_DEFAULT, train: int | None = None, test: int | None = None,
                   val: int | None = None, sigma0: float = 1.0, sigma1: float = 1.0):
    """Sources sharing one draw of ground-truth coefficients.

    Returns ``(sources, gt)``; each source carries its split index ranges.
    """
    splits = split_sizes(n_per_source, train, test, val)
    ss = np.random.SeedSequence(seed)
    gt_seed, delta_seed, *src_seeds = (int(c.generate_state(1)[0]) for c in ss.spawn(m + 2))
    gt = GroundTruthParams.draw(gt_seed, d_x=d_x, sigma0=sigma0, sigma1=sigma1)
    deltas = benchmark_deltas(kind, m, np.random.default_rng(delta_seed))
    sources = []
    for s in range(m):
        src = generate_source(gt, deltas[s], n_per_source, src_seeds[s], id_prefix=f"{seed}-{s}-")
        src.splits = dict(splits)
        sources.append(src)
    return sources, gt


# ---------------------------------------------------------------------------
# CSV


@dataclass
class CsvSchema:
    treatment: str = "w"
    outcome: str = "y"
    unit_id: str | None = "unit_id"
    covariates: list[str] | None = None  # None: every remaining column


def write_source_csv(path, ds: SourceDataset, covariate_names: list[str] | None = None) -> None:
    names = covariate_names or [f"x_{j + 1}" for j in range(ds.d_x)]
    with open(path, "w", newline="") as fh:
        out = csv.writer(fh)
        out.writerow((["unit_id"] if ds.unit_ids is not None else []) + ["w", "y"] + names)
        for i in range(len(ds)):
            row = [ds.unit_ids[i]] if ds.unit_ids is not None else []
            row += [repr(float(ds.w[i])), repr(float(ds.y[i]))]
            row += [repr(float(v)) for v in ds.x[i]]
            out.writerow(row)


def write_truth_csv(path, src: BenchmarkSource) -> None:
    with open(path, "w", newline="") as fh:
        out = csv.writer(fh)
        out.writerow(["unit_id", "y0", "y1", "cate"])
        for i in range(len(src.cate)):
            out.writerow([src.observed.unit_ids[i], repr(float(src.y0[i])), repr(float(src.y1[i])),
                          repr(float(src.cate[i]))])


def _parse_float(cell, row, col):
    try:
        v = float(cell)
    except ValueError:
        raise IngestionError(f"row {row}, column {col!r}: non-numeric value {cell!r}") from None
    if not math.isfinite(v):
        raise IngestionError(f"row {row}, column {col!r}: non-finite value {cell!r}")
    return v


def load_csv_source(path, schema: CsvSchema | None = None) -> SourceDataset:
    """Read one source's records. Rows are numbered from 1 after the header."""
    schema = schema or CsvSchema()
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        try:
            header = next(reader)
        except StopIteration:
            raise IngestionError(f"{path}: empty file") from None
        header = [h.strip() for h in header]
        for col in (schema.treatment, schema.outcome):
            if col not in header:
                raise IngestionError(f"{path}: missing column {col!r}")
        id_col = schema.unit_id if schema.unit_id in header else None
        if schema.covariates is None:
            covs = [h for h in header if h not in (schema.treatment, schema.outcome, id_col)]
        else:
            covs = list(schema.covariates)
            missing = [c for c in covs if c not in header]
            if missing:
                raise IngestionError(f"{path}: missing column {missing[0]!r}")
        pos = {h: i for i, h in enumerate(header)}
        w, y, x, ids = [], [], [], []
        for r, row in enumerate(reader, start=1):
            if not row or all(not c.strip() for c in row):
                continue
            if len(row) != len(header):
                raise IngestionError(f"{path}: row {r} has {len(row)} cells, expected {len(header)}")
            wv = _parse_float(row[pos[schema.treatment]], r, schema.treatment)
            if wv not in (0.0, 1.0):
                raise IngestionError(f"{path}: row {r}, column {schema.treatment!r}: treatment {wv} not in {{0, 1}}")
            w.append(wv)
            y.append(_parse_float(row[pos[schema.outcome]], r, schema.outcome))
            x.append([_parse_float(row[pos[c]], r, c) for c in covs])
            if id_col is not None:
                ids.append(row[pos[id_col]])
    xs = np.array(x, dtype=np.float64).reshape(len(w), len(covs))
    return SourceDataset(np.array(w), np.array(y), xs, ids if id_col is not None else None)


def load_truth_csv(path) -> dict:
    with open(path, newline="") as fh:
        rows = list(csv.DictReader(fh))
    return {
        "unit_id": [r["unit_id"] for r in rows],
        "y0": np.array([float(r["y0"]) for r in rows]),
        "y1": np.array([float(r["y1"]) for r in rows]),
        "cate": np.array([float(r["cate"]) for r in rows]),
    }


def write_benchmark(out_dir, sources: list[BenchmarkSource], gt: GroundTruthParams,
                    manifest_extra: dict | None = None) -> Path:
    """Per-source observed and ground-truth CSVs plus ``manifest.json``."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    for s, src in enumerate(sources):
        write_source_csv(out / f"source_{s}.csv", src.observed)
        write_truth_csv(out / f"source_{s}_truth.csv", src)
    manifest = {
        "m": len(sources),
        "n_per_source": len(sources[0].cate) if sources else 0,
        "deltas": [src.delta for src in sources],
        "splits": [{k: list(v) for k, v in src.splits.items()} for src in sources],
        "ground_truth": gt.to_dict(),
        **(manifest_extra or {}),
    }
    (out / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")
    return out
