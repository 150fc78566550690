"""Core data types: observations, datasets, score models and fold plans.

A dataset stores its columns as read-only numpy arrays. Labeled units carry
``r = 1`` and an outcome ``y``; unlabeled units carry ``r = 0`` and ``y = nan``.
The ACP column ``yhat`` uses ``nan`` for "absent".
"""

from __future__ import annotations

import csv
import enum
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Mapping, Sequence

import numpy as np
from scipy.special import expit

from .exceptions import (
    DimensionMismatch,
    EmptyStratum,
    KTooLarge,
    KTooSmall,
    MissingOutcomeOnLabeled,
    OutcomePresentOnUnlabeled,
    RaggedCovariates,
    ValidationError,
)


class Scenario(str, enum.Enum):
    """Which units carry an ACP value."""

    I = "I"  # noqa: E741  no ACP anywhere
    II = "II"  # ACP on every unit
    III = "III"  # ACP on labeled units only


class ScoreKind(str, enum.Enum):
    MEAN = "mean"
    LINEAR = "linear"
    LOGISTIC = "logistic"


@dataclass(frozen=True)
class Observation:
    r: int
    x: tuple[float, ...]
    y: float | None = None
    yhat: float | None = None


def _frozen(a: np.ndarray) -> np.ndarray:
    a = np.ascontiguousarray(a)
    a.setflags(write=False)
    return a


@dataclass(frozen=True, eq=False)
class Dataset:
    """Validated semi-supervised sample.

    Use :func:`validate_dataset` or :meth:`from_arrays` rather than the
    constructor so that the invariants are checked.
    """

    r: np.ndarray
    y: np.ndarray
    x: np.ndarray
    yhat: np.ndarray
    scenario: Scenario

    @classmethod
    def from_arrays(cls, r, x, y=None, yhat=None, *, strict_outcomes: bool = True) -> "Dataset":
        """Build a dataset from column arrays.

        ``y`` entries of unlabeled units are ignored (set to nan) unless
        ``strict_outcomes`` is true, in which case a finite value there raises
        :class:`OutcomePresentOnUnlabeled`.
        """
        r = np.asarray(r)
        if r.ndim != 1:
            raise DimensionMismatch("r must be one-dimensional")
        if not np.all((r == 0) | (r == 1)):
            raise ValidationError("r must be 0/1")
        r = r.astype(np.int8)
        m = r.shape[0]
        x = np.asarray(x, dtype=float)
        if x.ndim == 1:
            x = x.reshape(m, -1) if m else x.reshape(0, 0)
        if x.ndim != 2 or x.shape[0] != m:
            raise RaggedCovariates(f"x has shape {x.shape}, expected ({m}, p)")
        if not np.all(np.isfinite(x)):
            bad = int(np.argwhere(~np.isfinite(x))[0, 0])
            raise ValidationError(f"non-finite covariate in row {bad}")
        y = np.full(m, np.nan) if y is None else np.asarray(y, dtype=float).copy()
        yhat = np.full(m, np.nan) if yhat is None else np.asarray(yhat, dtype=float).copy()
        if y.shape != (m,) or yhat.shape != (m,):
            raise DimensionMismatch("y and yhat must have one entry per unit")

        lab = r == 1
        missing = lab & ~np.isfinite(y)
        if missing.any():
            raise MissingOutcomeOnLabeled(f"labeled row {int(np.argmax(missing))} has no outcome")
        present = ~lab & np.isfinite(y)
        if present.any():
            if strict_outcomes:
                raise OutcomePresentOnUnlabeled(
                    f"unlabeled row {int(np.argmax(present))} has an outcome")
            y[~lab] = np.nan
        if np.isinf(yhat).any():
            raise ValidationError("ACP values must be finite or missing")

        n = int(lab.sum())
        if n == 0 or n == m:
            raise EmptyStratum(f"need both labeled and unlabeled units (n={n}, N={m - n})")

        has = np.isfinite(yhat)
        if has.all():
            scenario = Scenario.II
        elif not has.any():
            scenario = Scenario.I
        elif np.array_equal(has, lab):
            scenario = Scenario.III
        else:
            raise ValidationError(
                "ACP column is partially present in a pattern matching no scenario")
        return cls(_frozen(r), _frozen(y), _frozen(x), _frozen(yhat), scenario)

    @property
    def M(self) -> int:
        return int(self.r.shape[0])

    @property
    def n(self) -> int:
        return int(self.r.sum())

    @property
    def N(self) -> int:
        return self.M - self.n

    @property
    def p(self) -> int:
        return int(self.x.shape[1])

    @property
    def pi(self) -> float:
        """Labeled fraction n/M."""
        return self.n / self.M

    @property
    def labeled(self) -> np.ndarray:
        return self.r == 1

    @property
    def observations(self) -> list[Observation]:
        out = []
        for i in range(self.M):
            y = float(self.y[i]) if self.r[i] == 1 else None
            yh = float(self.yhat[i]) if np.isfinite(self.yhat[i]) else None
            out.append(Observation(int(self.r[i]), tuple(self.x[i].tolist()), y, yh))
        return out

    def without_acp(self) -> "Dataset":
        return Dataset.from_arrays(self.r, self.x, self.y, None)

    def to_csv(self, path: str | Path) -> None:
        write_csv(self, path)


def validate_dataset(rows: Iterable[Mapping[str, object]] | Sequence[Observation]) -> Dataset:
    """Validate raw rows and return a :class:`Dataset` with inferred scenario.

    Rows are either :class:`Observation` objects or mappings with keys
    ``r``, ``y``, ``x1..xp`` and ``yhat``; empty strings and ``None`` mean
    missing.
    """
    rows = list(rows)
    if not rows:
        raise EmptyStratum("no rows")
    if isinstance(rows[0], Observation):
        p = len(rows[0].x)
        for i, o in enumerate(rows):
            if len(o.x) != p:
                raise RaggedCovariates(f"row {i} has {len(o.x)} covariates, expected {p}")
        return Dataset.from_arrays(
            [o.r for o in rows],
            np.array([o.x for o in rows], dtype=float).reshape(len(rows), p),
            [np.nan if o.y is None else o.y for o in rows],
            [np.nan if o.yhat is None else o.yhat for o in rows],
        )

    keys = [k for k in rows[0] if k.startswith("x") and k[1:].isdigit()]
    keys.sort(key=lambda k: int(k[1:]))
    p = len(keys)
    if p == 0:
        raise RaggedCovariates("no covariate columns x1..xp")
    if [int(k[1:]) for k in keys] != list(range(1, p + 1)):
        raise RaggedCovariates(f"covariate columns must be x1..x{p}")
    r, y, yhat, x = [], [], [], []
    for i, row in enumerate(rows):
        try:
            r.append(int(float(_cell(row.get("r")))))
        except (TypeError, ValueError):
            raise ValidationError(f"row {i}: invalid r value {row.get('r')!r}") from None
        y.append(_num(row.get("y"), i, "y"))
        yhat.append(_num(row.get("yhat"), i, "yhat"))
        xi = [_num(row.get(k), i, k) for k in keys]
        if any(math.isnan(v) for v in xi):
            raise RaggedCovariates(f"row {i} is missing a covariate")
        x.append(xi)
    return Dataset.from_arrays(r, np.array(x, dtype=float), y, yhat)


def _cell(v):
    if v is None:
        return None
    if isinstance(v, str):
        v = v.strip()
        return v if v else None
    return v


def _num(v, i: int, name: str) -> float:
    v = _cell(v)
    if v is None:
        return math.nan
    try:
        return float(v)
    except (TypeError, ValueError):
        raise ValidationError(f"row {i}: column {name} is not numeric ({v!r})") from None


def read_csv(path: str | Path) -> Dataset:
    """Read a dataset CSV with header ``r,y,x1,...,xp,yhat``."""
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.DictReader(fh)
        if reader.fieldnames is None or "r" not in reader.fieldnames:
            raise ValidationError(f"{path}: header must contain an 'r' column")
        return validate_dataset(list(reader))


def write_csv(data: Dataset, path: str | Path) -> None:
    header = ["r", "y"] + [f"x{j + 1}" for j in range(data.p)] + ["yhat"]

    def fmt(v: float) -> str:
        return "" if not np.isfinite(v) else repr(float(v))

    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        for i in range(data.M):
            w.writerow([int(data.r[i]), fmt(data.y[i])]
                       + [repr(float(v)) for v in data.x[i]] + [fmt(data.yhat[i])])


# --------------------------------------------------------------------------
# score models


def _identity(t):
    return t


def _one(t):
    return np.ones_like(np.asarray(t, dtype=float))


def _dexpit(t):
    e = expit(t)
    return e * (1.0 - e)


@dataclass(frozen=True)
class ScoreModel:
    """Estimand defined by the score ``s(y, x; beta) = (y - g(a(x)'beta)) a(x)``.

    ``MEAN`` uses ``a(x) = 1`` and the identity link, so ``s = y - beta``.
    ``LINEAR`` and ``LOGISTIC`` use ``a(x) = (1, x)`` with identity and
    expit links.
    """

    kind: ScoreKind
    p: int = 0

    @classmethod
    def mean(cls) -> "ScoreModel":
        return cls(ScoreKind.MEAN, 0)

    @classmethod
    def linear(cls, p: int) -> "ScoreModel":
        return cls(ScoreKind.LINEAR, p)

    @classmethod
    def logistic(cls, p: int) -> "ScoreModel":
        return cls(ScoreKind.LOGISTIC, p)

    @classmethod
    def from_name(cls, name: str, p: int) -> "ScoreModel":
        kind = ScoreKind(name)
        return cls(kind, 0 if kind is ScoreKind.MEAN else p)

    @property
    def d(self) -> int:
        return 1 if self.kind is ScoreKind.MEAN else self.p + 1

    @property
    def binary_link(self) -> bool:
        return self.kind is ScoreKind.LOGISTIC

    def coord_names(self) -> list[str]:
        if self.kind is ScoreKind.MEAN:
            return ["mean"]
        return ["intercept"] + [f"x{j + 1}" for j in range(self.p)]

    def link(self, t):
        return expit(t) if self.kind is ScoreKind.LOGISTIC else _identity(t)

    def dlink(self, t):
        return _dexpit(t) if self.kind is ScoreKind.LOGISTIC else _one(t)

    def design(self, x) -> np.ndarray:
        """Rows ``a(x_i)`` as an (m, d) array."""
        x = np.atleast_2d(np.asarray(x, dtype=float))
        if self.kind is ScoreKind.MEAN:
            return np.ones((x.shape[0], 1))
        if x.shape[1] != self.p:
            raise DimensionMismatch(f"x has {x.shape[1]} columns, model expects {self.p}")
        return np.column_stack([np.ones(x.shape[0]), x])

    def _beta(self, beta) -> np.ndarray:
        beta = np.atleast_1d(np.asarray(beta, dtype=float))
        if beta.shape != (self.d,):
            raise DimensionMismatch(f"beta has shape {beta.shape}, expected ({self.d},)")
        return beta

    def linear_predictor(self, x, beta) -> np.ndarray:
        return self.design(x) @ self._beta(beta)

    def score(self, y, x, beta) -> np.ndarray:
        """Scores for each row, shape (m, d)."""
        a = self.design(x)
        y = np.atleast_1d(np.asarray(y, dtype=float))
        if y.shape[0] != a.shape[0]:
            raise DimensionMismatch("y and x disagree on the number of rows")
        resid = y - self.link(a @ self._beta(beta))
        return resid[:, None] * a

    def jacobian(self, x, beta) -> np.ndarray:
        """Per-row ``ds/dbeta'``, shape (m, d, d). Depends on x only."""
        a = self.design(x)
        gp = self.dlink(a @ self._beta(beta))
        return -gp[:, None, None] * a[:, :, None] * a[:, None, :]


def score_eval(model: ScoreModel, y: float, x, beta) -> np.ndarray:
    """Score vector for a single unit."""
    x = np.asarray(x, dtype=float).reshape(1, -1) if model.kind is not ScoreKind.MEAN \
        else np.zeros((1, 0))
    return model.score([y], x, beta)[0]


# --------------------------------------------------------------------------
# folds


@dataclass(frozen=True, eq=False)
class FoldPlan:
    K: int
    assignment: np.ndarray
    seed: int | None = None
    _members: tuple = field(default=(), repr=False)

    def __post_init__(self):
        a = _frozen(np.asarray(self.assignment, dtype=np.int64))
        object.__setattr__(self, "assignment", a)
        if a.size and (a.min() < 0 or a.max() >= self.K):
            raise ValidationError("fold ids must lie in 0..K-1")
        members = tuple(_frozen(np.flatnonzero(a == k)) for k in range(self.K))
        object.__setattr__(self, "_members", members)

    def fold(self, k: int) -> np.ndarray:
        """Indices held out in fold ``k``."""
        return self._members[k]

    def complement(self, k: int) -> np.ndarray:
        return np.flatnonzero(self.assignment != k)

    def fold_weights(self) -> np.ndarray:
        """Per-unit weight ``1 / (K |D_k|)`` so that a weighted sum is
        the average of the K fold means."""
        sizes = np.bincount(self.assignment, minlength=self.K).astype(float)
        return 1.0 / (self.K * sizes[self.assignment])

    def relabel(self, perm: Sequence[int]) -> "FoldPlan":
        perm = np.asarray(perm)
        return FoldPlan(self.K, perm[self.assignment], self.seed)


def make_folds(data: Dataset, K: int, seed: int) -> FoldPlan:
    """Random partition into K folds, stratified on the label indicator."""
    if K < 2:
        raise KTooSmall(f"K={K}; need at least 2 folds")
    if K > min(data.n, data.N):
        raise KTooLarge(f"K={K} exceeds min(n, N)={min(data.n, data.N)}")
    rng = np.random.default_rng(seed)
    assignment = np.empty(data.M, dtype=np.int64)
    lab = np.flatnonzero(data.r == 1)
    unl = np.flatnonzero(data.r == 0)
    assignment[rng.permutation(lab)] = np.arange(lab.size) % K
    # unlabeled round-robin starts where labeled stopped to balance fold totals
    assignment[rng.permutation(unl)] = (lab.size + np.arange(unl.size)) % K
    return FoldPlan(K, assignment, seed)
