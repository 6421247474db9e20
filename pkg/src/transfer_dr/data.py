"""Two-population regression data: containers, CSV I/O, centring and feature maps.

A :class:`Study` pairs a *source* sample, where the outcome ``y``, the
covariates of interest ``x`` and the shared covariates ``z`` are all observed,
with a *target* sample that only records ``y`` and ``z``. All arrays are
stored read-only so a Study can be shared freely between threads.
"""

from __future__ import annotations

import csv
import io
import math
import re
from dataclasses import dataclass, field
from pathlib import Path
from typing import NamedTuple, Sequence

import numpy as np

from .exceptions import ValidationError

__all__ = [
    "SourceRow",
    "TargetRow",
    "Study",
    "CsvSchema",
    "load_study",
    "write_study",
    "study_to_csv",
    "CenteringTransform",
    "center_study",
    "Term",
    "FeatureMap",
    "expand_features",
]


class SourceRow(NamedTuple):
    y: float
    x: tuple
    z: tuple


class TargetRow(NamedTuple):
    y: float
    z: tuple


def _frozen(a, ndim, name):
    a = np.array(a, dtype=np.float64, copy=True)
    if a.ndim != ndim:
        raise ValidationError(f"{name} must be {ndim}-dimensional, got shape {a.shape}")
    if not np.all(np.isfinite(a)):
        bad = np.argwhere(~np.isfinite(a))[0]
        raise ValidationError(f"{name} contains a non-finite value at index {tuple(int(i) for i in bad)}")
    a.setflags(write=False)
    return a


@dataclass(frozen=True, eq=False)
class Study:
    """Paired source and target samples.

    Parameters
    ----------
    y_source : array of shape (n,)
    x_source : array of shape (n, p)
    z_source : array of shape (n, q)
    y_target : array of shape (N,)
    z_target : array of shape (N, q)
    intercept_in_z : bool
        Whether the first column of ``z`` is the constant 1.
    warnings : tuple of str
        Non-fatal ingestion notes, e.g. ignored x-columns in the target file.
    """

    y_source: np.ndarray
    x_source: np.ndarray
    z_source: np.ndarray
    y_target: np.ndarray
    z_target: np.ndarray
    intercept_in_z: bool = False
    warnings: tuple = field(default=())

    def __post_init__(self):
        set_ = object.__setattr__
        set_(self, "y_source", _frozen(self.y_source, 1, "y_source"))
        set_(self, "x_source", _frozen(self.x_source, 2, "x_source"))
        set_(self, "z_source", _frozen(self.z_source, 2, "z_source"))
        set_(self, "y_target", _frozen(self.y_target, 1, "y_target"))
        set_(self, "z_target", _frozen(self.z_target, 2, "z_target"))
        set_(self, "warnings", tuple(self.warnings))

        n, N = self.y_source.shape[0], self.y_target.shape[0]
        p, q = self.x_source.shape[1], self.z_source.shape[1]
        if p < 1 or q < 1:
            raise ValidationError(f"need p >= 1 and q >= 1, got p={p}, q={q}")
        if self.x_source.shape[0] != n or self.z_source.shape[0] != n:
            raise ValidationError("source arrays disagree on the number of rows")
        if self.z_target.shape != (N, q):
            raise ValidationError(f"z_target must have shape ({N}, {q}), got {self.z_target.shape}")
        if n < p + q + 2:
            raise ValidationError(f"source sample too small: n={n} < p+q+2={p + q + 2}")
        if N < q + 2:
            raise ValidationError(f"target sample too small: N={N} < q+2={q + 2}")
        if self.intercept_in_z and not (
            np.all(self.z_source[:, 0] == 1.0) and np.all(self.z_target[:, 0] == 1.0)
        ):
            raise ValidationError("intercept_in_z is set but the first z column is not identically 1")

    @property
    def n(self):
        return self.y_source.shape[0]

    @property
    def N(self):
        return self.y_target.shape[0]

    @property
    def p(self):
        return self.x_source.shape[1]

    @property
    def q(self):
        return self.z_source.shape[1]

    @classmethod
    def from_rows(cls, source: Sequence[SourceRow], target: Sequence[TargetRow], *, intercept_in_z=False):
        if not source or not target:
            raise ValidationError("both samples need at least one row")
        p, q = len(source[0].x), len(source[0].z)
        for i, r in enumerate(source):
            if len(r.x) != p or len(r.z) != q:
                raise ValidationError(f"source row {i} has inconsistent lengths")
        for i, r in enumerate(target):
            if len(r.z) != q:
                raise ValidationError(f"target row {i} has z of length {len(r.z)}, expected {q}")
        return cls(
            y_source=[r.y for r in source],
            x_source=np.reshape([r.x for r in source], (len(source), p)),
            z_source=np.reshape([r.z for r in source], (len(source), q)),
            y_target=[r.y for r in target],
            z_target=np.reshape([r.z for r in target], (len(target), q)),
            intercept_in_z=intercept_in_z,
        )

    def source_rows(self):
        return [SourceRow(float(y), tuple(x), tuple(z)) for y, x, z in zip(self.y_source, self.x_source, self.z_source)]

    def target_rows(self):
        return [TargetRow(float(y), tuple(z)) for y, z in zip(self.y_target, self.z_target)]

    def replace(self, **changes):
        kw = dict(
            y_source=self.y_source, x_source=self.x_source, z_source=self.z_source,
            y_target=self.y_target, z_target=self.z_target,
            intercept_in_z=self.intercept_in_z, warnings=self.warnings,
        )
        kw.update(changes)
        return Study(**kw)

    def subset(self, source_index, target_index):
        """Row-subset (indices may repeat) of both samples."""
        return Study(
            y_source=self.y_source[source_index],
            x_source=self.x_source[source_index],
            z_source=self.z_source[source_index],
            y_target=self.y_target[target_index],
            z_target=self.z_target[target_index],
            intercept_in_z=self.intercept_in_z,
            warnings=self.warnings,
        )


# --------------------------------------------------------------------------
# CSV ingestion
# --------------------------------------------------------------------------


@dataclass(frozen=True)
class CsvSchema:
    """Column names for the two CSV files.

    ``add_intercept`` prepends a constant-1 column to z after loading, which
    sets ``Study.intercept_in_z``.
    """

    y: str
    x: tuple
    z: tuple
    add_intercept: bool = False

    @classmethod
    def default(cls, p, q, add_intercept=False):
        return cls("y", tuple(f"x{j + 1}" for j in range(p)), tuple(f"z{k + 1}" for k in range(q)), add_intercept)


def _read_table(path, required, label):
    path = Path(path)
    if not path.is_file():
        raise ValidationError(f"{label} file not found: {path}")
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        try:
            header = [h.strip() for h in next(reader)]
        except StopIteration:
            raise ValidationError(f"{label} file {path} is empty") from None
        missing = [c for c in required if c not in header]
        if missing:
            raise ValidationError(f"{label} file {path} lacks column(s) {missing}")
        pos = [header.index(c) for c in required]
        rows = []
        for lineno, rec in enumerate(reader, start=2):
            if not rec or all(not s.strip() for s in rec):
                continue
            if len(rec) != len(header):
                raise ValidationError(
                    f"{label} file {path}, line {lineno}: expected {len(header)} fields, got {len(rec)}"
                )
            vals = []
            for col, j in zip(required, pos):
                cell = rec[j].strip()
                try:
                    v = float(cell)
                except ValueError:
                    raise ValidationError(
                        f"{label} file {path}, line {lineno}, column '{col}': non-numeric value {cell!r}"
                    ) from None
                if not math.isfinite(v):
                    raise ValidationError(
                        f"{label} file {path}, line {lineno}, column '{col}': non-finite value {cell!r}"
                    )
                vals.append(v)
            rows.append(vals)
    return header, np.array(rows, dtype=np.float64).reshape(len(rows), len(required))


def load_study(source_path, target_path, schema: CsvSchema) -> Study:
    """Read a Study from a source CSV (y, x, z) and a target CSV (y, z).

    X-columns present in the target file are ignored and noted in
    ``Study.warnings``.
    """
    src_cols = [schema.y, *schema.x, *schema.z]
    tgt_cols = [schema.y, *schema.z]
    _, src = _read_table(source_path, src_cols, "source")
    header, tgt = _read_table(target_path, tgt_cols, "target")
    p = len(schema.x)
    notes = []
    stray = [c for c in schema.x if c in header]
    if stray:
        notes.append(f"target file contains x-column(s) {stray}; ignored")
    zs, zt = src[:, 1 + p:], tgt[:, 1:]
    if schema.add_intercept:
        zs = np.column_stack([np.ones(len(zs)), zs])
        zt = np.column_stack([np.ones(len(zt)), zt])
    return Study(
        y_source=src[:, 0], x_source=src[:, 1:1 + p], z_source=zs,
        y_target=tgt[:, 0], z_target=zt,
        intercept_in_z=schema.add_intercept, warnings=tuple(notes),
    )


def _fmt(v):
    return repr(float(v))


def study_to_csv(study: Study, schema: CsvSchema | None = None):
    """Canonical CSV text (source, target) for a Study.

    Floats are written with ``repr`` so that loading the text back yields the
    same binary values. An intercept column injected by ``add_intercept`` is
    not written.
    """
    drop = 1 if (schema is not None and schema.add_intercept) else 0
    if schema is None:
        schema = CsvSchema.default(study.p, study.q)
    zs, zt = study.z_source[:, drop:], study.z_target[:, drop:]
    if zs.shape[1] != len(schema.z) or study.p != len(schema.x):
        raise ValidationError("schema does not match study dimensions")

    out = []
    for header, blocks in (
        ([schema.y, *schema.x, *schema.z], (study.y_source[:, None], study.x_source, zs)),
        ([schema.y, *schema.z], (study.y_target[:, None], zt)),
    ):
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(header)
        for row in np.hstack(blocks):
            w.writerow([_fmt(v) for v in row])
        out.append(buf.getvalue())
    return out[0], out[1]


def write_study(study: Study, source_path, target_path, schema: CsvSchema | None = None):
    src, tgt = study_to_csv(study, schema)
    Path(source_path).write_text(src, encoding="utf-8")
    Path(target_path).write_text(tgt, encoding="utf-8")


# --------------------------------------------------------------------------
# Centring
# --------------------------------------------------------------------------


@dataclass(frozen=True, eq=False)
class CenteringTransform:
    """Affine map applied by :func:`center_study`.

    ``y`` is centred by the pooled (source + target) mean, ``x`` by the source
    mean, ``z`` by pooled means and, in ``standardize`` mode, divided by the
    pooled standard deviation. An intercept column keeps mean 0 and scale 1.
    """

    y_mean: float
    x_mean: np.ndarray
    z_mean: np.ndarray
    z_scale: np.ndarray
    standardize: bool
    y_scale: float = 1.0
    x_scale: np.ndarray | None = None

    def __post_init__(self):
        if self.x_scale is None:
            object.__setattr__(self, "x_scale", np.ones_like(self.x_mean))
        if self.y_scale <= 0 or np.any(self.z_scale <= 0) or np.any(self.x_scale <= 0):
            raise ValidationError("centring scales must be positive")

    @classmethod
    def identity(cls, p, q):
        return cls(0.0, np.zeros(p), np.zeros(q), np.ones(q), False)

    def apply(self, study: Study) -> Study:
        f = lambda a, m, s: (a - m) / s
        return study.replace(
            y_source=f(study.y_source, self.y_mean, self.y_scale),
            x_source=f(study.x_source, self.x_mean, self.x_scale),
            z_source=f(study.z_source, self.z_mean, self.z_scale),
            y_target=f(study.y_target, self.y_mean, self.y_scale),
            z_target=f(study.z_target, self.z_mean, self.z_scale),
        )

    def inverse(self, study: Study) -> Study:
        g = lambda a, m, s: a * s + m
        return study.replace(
            y_source=g(study.y_source, self.y_mean, self.y_scale),
            x_source=g(study.x_source, self.x_mean, self.x_scale),
            z_source=g(study.z_source, self.z_mean, self.z_scale),
            y_target=g(study.y_target, self.y_mean, self.y_scale),
            z_target=g(study.z_target, self.z_mean, self.z_scale),
        )

    def coef_to_original(self, beta, theta, intercept_index=None):
        """Map coefficients fitted on transformed data back to original units.

        ``intercept_index`` names the z-position of the constant column; when
        given, the intercept absorbs the location shifts.
        """
        beta = np.asarray(beta, dtype=float)
        theta = np.asarray(theta, dtype=float)
        b = beta * self.y_scale / self.x_scale
        t = theta * self.y_scale / self.z_scale
        if intercept_index is not None:
            shift = self.y_mean - self.x_mean @ b
            mask = np.ones(len(t), dtype=bool)
            mask[intercept_index] = False
            shift -= self.z_mean[mask] @ t[mask]
            t = t.copy()
            t[intercept_index] = theta[intercept_index] * self.y_scale + shift
        return b, t


def center_study(study: Study, mode="center"):
    """Centre (and optionally standardise) a Study.

    Returns the transformed Study together with the :class:`CenteringTransform`
    that produced it.
    """
    if mode not in ("center", "standardize", "none"):
        raise ValidationError(f"unknown centring mode {mode!r}")
    if mode == "none":
        return study, CenteringTransform.identity(study.p, study.q)

    y_all = np.concatenate([study.y_source, study.y_target])
    z_all = np.vstack([study.z_source, study.z_target])
    z_mean = z_all.mean(axis=0)
    z_scale = np.ones(study.q)
    if mode == "standardize":
        z_scale = z_all.std(axis=0)
    if study.intercept_in_z:
        z_mean[0], z_scale[0] = 0.0, 1.0
    if mode == "standardize" and np.any(z_scale <= 0):
        cols = [int(k) for k in np.flatnonzero(z_scale <= 0)]
        raise ValidationError(f"z column(s) {cols} have zero variance; cannot standardise")

    tf = CenteringTransform(
        y_mean=float(y_all.mean()),
        x_mean=study.x_source.mean(axis=0),
        z_mean=z_mean,
        z_scale=z_scale,
        standardize=(mode == "standardize"),
    )
    return tf.apply(study), tf


# --------------------------------------------------------------------------
# Feature maps for the imputation regression
# --------------------------------------------------------------------------


class Term(NamedTuple):
    """Monomial ``y**y_power * prod(z[k]**e for k, e in z_powers)`` (0-based k)."""

    y_power: int
    z_powers: tuple

    def __str__(self):
        parts = []
        if self.y_power:
            parts.append("y" if self.y_power == 1 else f"y^{self.y_power}")
        for k, e in self.z_powers:
            parts.append(f"z{k + 1}" if e == 1 else f"z{k + 1}^{e}")
        return "*".join(parts) or "1"

    @property
    def max_z_index(self):
        return max((k for k, _ in self.z_powers), default=-1)


_FACTOR = re.compile(r"^(y|z(\d+))(?:\^(\d+))?$")


def parse_term(text: str) -> Term:
    """Parse ``"y*z2"``, ``"z1^2"`` and similar (z indices are 1-based)."""
    y_pow, zp = 0, {}
    for factor in text.replace(" ", "").split("*"):
        m = _FACTOR.match(factor)
        if not m:
            raise ValidationError(f"cannot parse feature term {text!r}")
        e = int(m.group(3) or 1)
        if m.group(1) == "y":
            y_pow += e
        else:
            k = int(m.group(2)) - 1
            if k < 0:
                raise ValidationError(f"z indices are 1-based in {text!r}")
            zp[k] = zp.get(k, 0) + e
    return Term(y_pow, tuple(sorted(zp.items())))


@dataclass(frozen=True)
class FeatureMap:
    """Ordered list of monomial terms in ``(y, z)``.

    Use the presets :meth:`linear`, :meth:`quadratic`, :meth:`interaction`
    or :meth:`custom`. Presets skip squares/products of the intercept column
    when ``intercept_in_z`` is set.
    """

    kind: str
    terms: tuple

    @staticmethod
    def _linear_terms(q):
        return [Term(1, ())] + [Term(0, ((k, 1),)) for k in range(q)]

    @classmethod
    def linear(cls, q):
        return cls("linear", tuple(cls._linear_terms(q)))

    @classmethod
    def quadratic(cls, q, intercept_in_z=False):
        ks = range(1 if intercept_in_z else 0, q)
        extra = [Term(0, ((k, 2),)) for k in ks]
        return cls("quadratic", tuple(cls._linear_terms(q) + extra))

    @classmethod
    def interaction(cls, q, intercept_in_z=False):
        ks = list(range(1 if intercept_in_z else 0, q))
        extra = [Term(1, ((k, 1),)) for k in ks]
        extra += [Term(0, ((a, 1), (b, 1))) for i, a in enumerate(ks) for b in ks[i + 1:]]
        return cls("interaction", tuple(cls._linear_terms(q) + extra))

    @classmethod
    def custom(cls, terms):
        parsed = tuple(t if isinstance(t, Term) else parse_term(t) for t in terms)
        if not parsed:
            raise ValidationError("custom feature map needs at least one term")
        return cls("custom", parsed)

    @classmethod
    def preset(cls, kind, q, intercept_in_z=False):
        if kind == "linear":
            return cls.linear(q)
        if kind == "quadratic":
            return cls.quadratic(q, intercept_in_z)
        if kind == "interaction":
            return cls.interaction(q, intercept_in_z)
        raise ValidationError(f"unknown imputation feature map {kind!r}")

    def with_terms(self, *extra):
        """Return a custom map with ``extra`` terms appended."""
        more = tuple(t if isinstance(t, Term) else parse_term(t) for t in extra)
        return FeatureMap("custom", self.terms + more)

    def names(self):
        return [str(t) for t in self.terms]

    def check(self, q):
        for t in self.terms:
            if t.max_z_index >= q:
                raise ValidationError(f"feature term {t} references z{t.max_z_index + 1} but q={q}")


def expand_features(y, z, fmap: FeatureMap):
    """Evaluate the feature map.

    Accepts a scalar ``y`` with ``z`` of shape (q,), returning shape (d,), or
    arrays ``y`` (m,) and ``z`` (m, q), returning shape (m, d).
    """
    y = np.asarray(y, dtype=np.float64)
    z = np.asarray(z, dtype=np.float64)
    single = y.ndim == 0
    if single:
        y, z = y[None], z[None, :]
    fmap.check(z.shape[1])
    cols = []
    for t in fmap.terms:
        v = y ** t.y_power if t.y_power else np.ones_like(y)
        for k, e in t.z_powers:
            v = v * (z[:, k] if e == 1 else z[:, k] ** e)
        cols.append(v)
    out = np.column_stack(cols)
    return out[0] if single else out
