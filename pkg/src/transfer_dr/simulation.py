"""Monte Carlo study: data-generating processes, truth oracles and metrics.

Each replication draws ``total_size`` units with ``Y ~ N(0, y_sd^2)``,
``Z ~ N(0, z_sd^2)``, ``X`` from an outcome-covariate model and a
membership indicator ``S`` from a logistic model; ``S = 1`` rows form the
source sample and ``S = 0`` rows the target sample (with ``X`` dropped).

Random numbers come from numpy's PCG64 bit generator seeded through
``SeedSequence`` spawn keys; normal variates use numpy's ziggurat sampler.
"""

from __future__ import annotations

import json
import math
import os
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path

import numpy as np

from . import __version__
from .data import Study, center_study
from .estimators import METHODS, EstimateOptions, estimate_many
from .exceptions import BootstrapError, NumericalError, ValidationError
from .inference import BootstrapConfig, bootstrap_many

__all__ = [
    "X_MODELS",
    "S_MODELS",
    "PRESETS",
    "ScenarioConfig",
    "TruthOracle",
    "ScenarioReport",
    "EfficiencyBound",
    "conditional_mean_x",
    "source_probability",
    "generate_replicate",
    "truth_oracle",
    "run_scenario",
    "efficiency_bound",
    "emit_report",
    "load_report",
    "parse_config_file",
]

RNG_ALGORITHM = "numpy PCG64 + SeedSequence spawn keys; normals via ziggurat"
MAX_ATTEMPTS = 1000
RATIO_RANGE = (0.2, 0.5)

X_MODELS = ("M_cor", "M_mis")
S_MODELS = ("W_cor", "W_mis")


def conditional_mean_x(model, y, z):
    """E[X | Y=y, Z=z] under the named covariate model (z is the raw scalar)."""
    if model == "M_cor":
        return -1.0 + y - 2.0 * z
    if model == "M_mis":
        return -1.0 + y - 4.0 * z + 0.5 * y * z
    raise ValidationError(f"unknown x_model {model!r}")


def _source_logit(model, y, z):
    if model == "W_cor":
        return 1.0 - 0.6 * y - 0.5 * z
    if model == "W_mis":
        return 2.2 - 0.6 * y - 0.5 * z - y * z
    raise ValidationError(f"unknown s_model {model!r}")


def source_probability(model, y, z):
    """P(S = 1 | Y=y, Z=z) under the named membership model."""
    return 1.0 / (1.0 + np.exp(-_source_logit(model, y, z)))


@dataclass(frozen=True)
class ScenarioConfig:
    x_model: str = "M_cor"
    s_model: str = "W_cor"
    total_size: int = 2000
    sigma_eps: float = 0.2
    y_sd: float = 1.0
    z_sd: float = 2.0
    replications: int = 500
    bootstrap_B: int = 500
    master_seed: int = 20240601
    centered: bool = False
    name: str = "custom"

    def __post_init__(self):
        if self.x_model not in X_MODELS:
            raise ValidationError(f"x_model must be one of {X_MODELS}, got {self.x_model!r}")
        if self.s_model not in S_MODELS:
            raise ValidationError(f"s_model must be one of {S_MODELS}, got {self.s_model!r}")
        if self.total_size < 100:
            raise ValidationError("total_size must be at least 100")
        if self.sigma_eps < 0 or self.y_sd <= 0 or self.z_sd <= 0:
            raise ValidationError("standard deviations must be positive (sigma_eps may be 0)")
        if self.replications < 1:
            raise ValidationError("replications must be at least 1")
        if self.bootstrap_B < 2:
            raise ValidationError("bootstrap_B must be at least 2")

    def with_(self, **changes):
        return replace(self, **changes)


PRESETS = {
    "I": ScenarioConfig("M_cor", "W_cor", name="I"),
    "II": ScenarioConfig("M_mis", "W_cor", name="II"),
    "III": ScenarioConfig("M_cor", "W_mis", name="III"),
}

_CONFIG_TYPES = {
    "x_model": str, "s_model": str, "total_size": int, "sigma_eps": float,
    "y_sd": float, "z_sd": float, "replications": int, "bootstrap_B": int,
    "master_seed": int, "centered": bool, "name": str, "preset": str,
}


def _to_bool(text):
    t = str(text).strip().lower()
    if t in ("1", "true", "yes", "on"):
        return True
    if t in ("0", "false", "no", "off"):
        return False
    raise ValidationError(f"not a boolean: {text!r}")


def parse_config_file(path) -> ScenarioConfig:
    """Read a flat ``key = value`` scenario file (``#`` starts a comment).

    An optional ``preset = I|II|III`` line supplies defaults that the other
    keys override.
    """
    values = {}
    for lineno, raw in enumerate(Path(path).read_text(encoding="utf-8").splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ValidationError(f"{path}:{lineno}: expected 'key = value'")
        key, val = (s.strip() for s in line.split("=", 1))
        if key not in _CONFIG_TYPES:
            raise ValidationError(f"{path}:{lineno}: unknown key {key!r}")
        typ = _CONFIG_TYPES[key]
        try:
            values[key] = _to_bool(val) if typ is bool else typ(float(val)) if typ is int else typ(val)
        except ValueError:
            raise ValidationError(f"{path}:{lineno}: bad value {val!r} for {key}") from None
    preset = values.pop("preset", None)
    if preset is not None:
        if preset not in PRESETS:
            raise ValidationError(f"unknown preset {preset!r}")
        return PRESETS[preset].with_(**values)
    return ScenarioConfig(**values)


def _seed_sequence(seed):
    if isinstance(seed, np.random.SeedSequence):
        return seed
    return np.random.SeedSequence(int(seed))


def _draw_population(rng, config, m):
    y = rng.normal(0.0, config.y_sd, m)
    z = rng.normal(0.0, config.z_sd, m)
    eps = rng.normal(0.0, 1.0, m) * config.sigma_eps
    u = rng.random(m)
    x = conditional_mean_x(config.x_model, y, z) + eps
    s = u < source_probability(config.s_model, y, z)
    return y, z, x, s


def generate_replicate(config: ScenarioConfig, seed) -> Study:
    """Draw one simulated Study; Z carries a leading intercept column.

    The whole replicate is redrawn until ``N/n`` lies strictly inside
    (0.2, 0.5).
    """
    rng = np.random.Generator(np.random.PCG64(_seed_sequence(seed)))
    m = config.total_size
    for _ in range(MAX_ATTEMPTS):
        y, z, x, s = _draw_population(rng, config, m)
        n = int(s.sum())
        N = m - n
        if n > 0 and RATIO_RANGE[0] < N / n < RATIO_RANGE[1]:
            break
    else:
        raise NumericalError(f"could not draw a replicate with N/n in {RATIO_RANGE} after {MAX_ATTEMPTS} attempts")
    t = ~s
    study = Study(
        y_source=y[s], x_source=x[s, None], z_source=np.column_stack([np.ones(n), z[s]]),
        y_target=y[t], z_target=np.column_stack([np.ones(N), z[t]]),
        intercept_in_z=True,
    )
    if config.centered:
        study, _ = center_study(study, "center")
    return study


# --------------------------------------------------------------------------
# Truth
# --------------------------------------------------------------------------


@dataclass(frozen=True, eq=False)
class TruthOracle:
    """Target-population coefficients ``(beta, theta_0, theta_1)`` by brute force.

    ``gram`` is the target second-moment matrix ``E0[W W^T]`` with
    ``W = (X, 1, Z)``.
    """

    vartheta0: np.ndarray
    mc_size: int
    mc_se: np.ndarray
    batch_estimates: np.ndarray
    gram: np.ndarray

    @property
    def beta(self):
        return float(self.vartheta0[0])

    @property
    def theta(self):
        return float(self.vartheta0[2])


def truth_oracle(config: ScenarioConfig, mc_size=10_000_000, batches=10, seed=None, chunk=2_000_000) -> TruthOracle:
    """Solve the target normal equations of Y on (X, 1, Z) on ``mc_size`` target draws."""
    if batches < 2 or mc_size < batches:
        raise ValidationError("truth oracle needs at least two batches and mc_size >= batches")
    base = np.random.SeedSequence(config.master_seed if seed is None else int(seed), spawn_key=(10**6,))
    per = mc_size // batches
    sizes = [per + (1 if b < mc_size - per * batches else 0) for b in range(batches)]
    G_tot = np.zeros((3, 3))
    h_tot = np.zeros(3)
    ests = []
    for b, size in enumerate(sizes):
        seq = np.random.SeedSequence(base.entropy, spawn_key=base.spawn_key + (b,))
        rng = np.random.Generator(np.random.PCG64(seq))
        G = np.zeros((3, 3))
        h = np.zeros(3)
        got = 0
        while got < size:
            y, z, x, s = _draw_population(rng, config, chunk)
            keep = ~s
            y, z, x = y[keep][: size - got], z[keep][: size - got], x[keep][: size - got]
            W = np.column_stack([x, np.ones(len(x)), z])
            G += W.T @ W
            h += W.T @ y
            got += len(y)
        ests.append(np.linalg.solve(G, h))
        G_tot += G
        h_tot += h
    ests = np.array(ests)
    return TruthOracle(
        vartheta0=np.linalg.solve(G_tot, h_tot),
        mc_size=int(sum(sizes)),
        mc_se=ests.std(axis=0, ddof=1) / math.sqrt(batches),
        batch_estimates=ests,
        gram=G_tot / sum(sizes),
    )


# --------------------------------------------------------------------------
# Efficiency bound
# --------------------------------------------------------------------------


@dataclass(frozen=True, eq=False)
class EfficiencyBound:
    """Plug-in Monte Carlo evaluation of the efficient asymptotic covariance.

    ``cov`` is the covariance of ``sqrt(n+N) * (estimate - truth)``;
    ``target_term`` and ``source_term`` are the two pieces of the middle
    matrix before sandwiching, already divided by the population shares.
    """

    cov: np.ndarray
    J0: np.ndarray
    target_term: np.ndarray
    source_term: np.ndarray
    source_share: float
    mc_size: int
    """Number of draws, or of quadrature points."""

    def se(self, total_size):
        return np.sqrt(np.diag(self.cov) / total_size)


def _bound_sums(config, vartheta, y, z, e, mass):
    """Probability-weighted moment sums over points ``(y, z, e)`` with masses ``mass``."""
    beta, th0, th1 = (float(v) for v in vartheta)
    s2 = config.sigma_eps ** 2
    m = len(y)
    mu = conditional_mean_x(config.x_model, y, z)
    # x - mu is carried as d so that sigma_eps = 0 gives an exact zero
    d = config.sigma_eps * e
    x = mu + d
    pi1 = source_probability(config.s_model, y, z)
    pi0 = 1.0 - pi1
    ones = np.ones(m)
    W = np.column_stack([x, ones, z])
    zt = th0 + th1 * z
    psi = np.column_stack([mu * (y - zt) - beta * (s2 + mu * mu), ones * (y - mu * beta - zt), z * (y - mu * beta - zt)])
    resid_x = d * (y - zt) - beta * (d * (2.0 * mu + d) - s2)
    dif = np.column_stack([resid_x, -beta * d * ones, -beta * d * z])
    a0 = mass * pi0
    return (
        float(mass @ pi1),
        (W.T * a0) @ W,
        (psi.T * a0) @ psi,
        # E1[w^2 g] = E0[w g]; with w = (pi0/P0)/(pi1/P1) this is E[pi0^2/pi1 g] * P1/P0^2
        (dif.T * (a0 * pi0 / pi1)) @ dif,
    )


def efficiency_bound(config: ScenarioConfig, truth: TruthOracle, method="quadrature", nodes=120,
                     mc_size=4_000_000, seed=None, chunk=1_000_000) -> EfficiencyBound:
    """Evaluate ``J0 V0 J0^T`` with known nuisance functions.

    The true density ratio follows from Bayes' rule applied to the logistic
    membership model, and ``psi = E[phi | y, z]`` is available in closed form
    because ``X | Y, Z`` is Gaussian with known mean and variance. Population
    expectations are taken over the joint (Y, Z, X) law with membership
    probabilities as weights instead of sampled indicators.

    Parameters
    ----------
    method : {"quadrature", "mc"}
        Tensor Gauss-Hermite rule with ``nodes`` points for Y and Z (five for
        the noise, exact since every integrand is a polynomial of degree
        four in it), or plain Monte Carlo with ``mc_size`` draws.

    Notes
    -----
    Under ``W_mis`` the squared true ratio is not integrable against the
    source law, so the bound is infinite; quadrature refuses that case and
    Monte Carlo returns an unstable finite number.
    """
    k = 3
    if method == "quadrature":
        if config.s_model != "W_cor":
            raise ValidationError(f"the efficiency bound diverges under {config.s_model}")
        g, gw = np.polynomial.hermite_e.hermegauss(int(nodes))
        ge, gew = np.polynomial.hermite_e.hermegauss(5)
        gw, gew = gw / gw.sum(), gew / gew.sum()
        Y, Zr, E = np.meshgrid(g * config.y_sd, g * config.z_sd, ge, indexing="ij")
        mass = (gw[:, None, None] * gw[None, :, None] * gew[None, None, :]).ravel()
        p1, gram0, psi0, src = _bound_sums(config, truth.vartheta0, Y.ravel(), Zr.ravel(), E.ravel(), mass)
        size = int(nodes) ** 2 * 5
    elif method == "mc":
        base = np.random.SeedSequence(config.master_seed if seed is None else int(seed), spawn_key=(2 * 10**6,))
        rng = np.random.Generator(np.random.PCG64(base))
        p1, gram0, psi0, src = 0.0, np.zeros((k, k)), np.zeros((k, k)), np.zeros((k, k))
        done = 0
        while done < mc_size:
            m = min(chunk, mc_size - done)
            y = rng.normal(0.0, config.y_sd, m)
            z = rng.normal(0.0, config.z_sd, m)
            e = rng.normal(0.0, 1.0, m)
            parts = _bound_sums(config, truth.vartheta0, y, z, e, np.full(m, 1.0 / mc_size))
            p1 += parts[0]
            gram0 += parts[1]
            psi0 += parts[2]
            src += parts[3]
            done += m
        size = int(mc_size)
    else:
        raise ValidationError(f"unknown bound method {method!r}")
    P1 = p1
    P0 = 1.0 - P1
    J0 = np.linalg.inv(gram0 / P0)
    target_term = psi0 / P0 / P0
    source_term = src * P1 / P0**2 / P1
    cov = J0 @ (target_term + source_term) @ J0.T
    return EfficiencyBound(0.5 * (cov + cov.T), J0, target_term, source_term, P1, size)


# --------------------------------------------------------------------------
# Scenario runs
# --------------------------------------------------------------------------

COEF_NAMES = ("beta", "theta")
COEF_INDEX = (0, 2)


@dataclass(eq=False)
class ScenarioReport:
    """Table-style summary of a scenario run.

    ``rows`` holds one dict per (method, coefficient). ``estimates`` and
    ``ses`` keep per-replication values keyed by method
    (arrays of shape (R, 2) for beta and theta); failed replications are
    stored as NaN.
    """

    config: ScenarioConfig
    truth: np.ndarray
    rows: list
    replications: int
    failures: dict
    metadata: dict = field(default_factory=dict)
    estimates: dict = field(default_factory=dict)
    ses: dict = field(default_factory=dict)

    def row(self, method, coefficient):
        for r in self.rows:
            if r["method"] == method and r["coefficient"] == coefficient:
                return r
        raise KeyError((method, coefficient))


def _replication(args):
    config, r, methods, options, ci_level = args
    seq = np.random.SeedSequence(config.master_seed, spawn_key=(r,))
    study = generate_replicate(config, seq)
    boot_seed = int(np.random.SeedSequence(config.master_seed, spawn_key=(r, 1)).generate_state(1, np.uint64)[0])
    out = {}
    try:
        ests = estimate_many(study, methods, options)
    except NumericalError as exc:
        return {m: ("estimate", type(exc).__name__) for m in methods}
    cfg = BootstrapConfig(B=config.bootstrap_B, master_seed=boot_seed, ci_level=ci_level, store_replicates=False)
    for m in methods:
        try:
            b = bootstrap_many(study, (m,), cfg, options, {m: ests[m]})[m]
        except BootstrapError as exc:
            out[m] = ("bootstrap", str(exc))
            continue
        out[m] = (ests[m].coef.vector, b.se)
    return out


def _replication_shared(args):
    """Bootstrap all methods on shared resamples (same draws per method)."""
    config, r, methods, options, ci_level = args
    seq = np.random.SeedSequence(config.master_seed, spawn_key=(r,))
    study = generate_replicate(config, seq)
    boot_seed = int(np.random.SeedSequence(config.master_seed, spawn_key=(r, 1)).generate_state(1, np.uint64)[0])
    try:
        ests = estimate_many(study, methods, options)
    except NumericalError as exc:
        return {m: ("estimate", type(exc).__name__) for m in methods}
    cfg = BootstrapConfig(B=config.bootstrap_B, master_seed=boot_seed, ci_level=ci_level, store_replicates=False)
    out = {}
    try:
        boots = bootstrap_many(study, methods, cfg, options, ests)
    except BootstrapError:
        # fall back to per-method accounting so one method's failures do not sink the others
        return _replication(args)
    for m in methods:
        out[m] = (ests[m].coef.vector, boots[m].se)
    return out


def run_scenario(
    config: ScenarioConfig,
    truth: TruthOracle | None = None,
    methods=METHODS,
    options: EstimateOptions | None = None,
    n_jobs=1,
    ci_level=0.95,
    progress=None,
) -> ScenarioReport:
    """Run all replications and aggregate bias, RMSE, mean SE and coverage."""
    options = options or EstimateOptions()
    methods = tuple(methods)
    if truth is None:
        truth = truth_oracle(config)
    jobs = [(config, r, methods, options, ci_level) for r in range(config.replications)]
    if n_jobs and n_jobs > 1:
        with ProcessPoolExecutor(max_workers=n_jobs) as ex:
            results = list(ex.map(_replication_shared, jobs, chunksize=max(1, len(jobs) // (4 * n_jobs))))
    else:
        results = []
        for i, job in enumerate(jobs):
            results.append(_replication_shared(job))
            if progress:
                progress(i + 1, len(jobs))

    R = config.replications
    z = float(np.sqrt(2.0) * _erfinv(ci_level))
    target = truth.vartheta0[list(COEF_INDEX)]
    rows, failures, est_store, se_store = [], {}, {}, {}
    for m in methods:
        E = np.full((R, len(COEF_INDEX)), np.nan)
        S = np.full((R, len(COEF_INDEX)), np.nan)
        fails = {}
        for r, res in enumerate(results):
            v = res[m]
            if isinstance(v[0], str):
                fails[v[0]] = fails.get(v[0], 0) + 1
                continue
            E[r] = v[0][list(COEF_INDEX)]
            S[r] = v[1][list(COEF_INDEX)]
        failures[m] = fails
        est_store[m], se_store[m] = E, S
        ok = ~np.isnan(E[:, 0])
        for j, name in enumerate(COEF_NAMES):
            err = E[ok, j] - target[j]
            cover = np.abs(err) <= z * S[ok, j]
            rows.append({
                "method": m,
                "coefficient": name,
                "true": float(target[j]),
                "avg_bias": float(err.mean()) if ok.any() else float("nan"),
                "rmse": float(np.sqrt(np.mean(err**2))) if ok.any() else float("nan"),
                "mean_se": float(S[ok, j].mean()) if ok.any() else float("nan"),
                "coverage": float(cover.mean()) if ok.any() else float("nan"),
                "mc_sd": float(E[ok, j].std(ddof=1)) if ok.sum() > 1 else float("nan"),
                "n_ok": int(ok.sum()),
            })
    meta = {
        "rng": RNG_ALGORITHM,
        "version": __version__,
        "truth_mc_size": truth.mc_size,
        "truth_mc_se": [float(v) for v in truth.mc_se],
        "ci_level": ci_level,
        "methods": list(methods),
        "feature_map": options.feature_map if isinstance(options.feature_map, str) else options.feature_map.kind,
    }
    return ScenarioReport(config, truth.vartheta0.copy(), rows, R, failures, meta, est_store, se_store)


def _erfinv(p):
    from statistics import NormalDist

    return NormalDist().inv_cdf(0.5 + p / 2) / math.sqrt(2.0)


# --------------------------------------------------------------------------
# Report I/O
# --------------------------------------------------------------------------

CSV_HEADER = ("config", "method", "coefficient", "true", "avg_bias", "rmse", "mean_se", "coverage")


def report_csv(report: ScenarioReport) -> str:
    lines = [",".join(CSV_HEADER)]
    for r in report.rows:
        lines.append(",".join([
            report.config.name, r["method"], r["coefficient"],
            *(f"{r[k]:.3f}" for k in CSV_HEADER[3:]),
        ]))
    return "\n".join(lines) + "\n"


def report_dict(report: ScenarioReport) -> dict:
    return {
        "config": asdict(report.config),
        "truth": [float(v) for v in report.truth],
        "replications": report.replications,
        "rows": report.rows,
        "failures": report.failures,
        "metadata": report.metadata,
    }


def emit_report(report: ScenarioReport, out_dir, stem=None, formats=("csv", "json")):
    """Write the report as Table-style CSV (3 decimals) and/or full-precision JSON."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    stem = stem or f"scenario_{report.config.name}"
    written = []
    if "csv" in formats:
        path = out_dir / f"{stem}.csv"
        path.write_text(report_csv(report), encoding="utf-8")
        written.append(path)
    if "json" in formats:
        path = out_dir / f"{stem}.json"
        path.write_text(json.dumps(report_dict(report), indent=2, sort_keys=True) + "\n", encoding="utf-8")
        written.append(path)
    return written


def load_report(path) -> ScenarioReport:
    d = json.loads(Path(path).read_text(encoding="utf-8"))
    return ScenarioReport(
        config=ScenarioConfig(**d["config"]),
        truth=np.array(d["truth"]),
        rows=d["rows"],
        replications=d["replications"],
        failures=d["failures"],
        metadata=d["metadata"],
    )


def default_threads():
    try:
        return max(1, int(os.environ.get("TRANSFER_DR_THREADS", "1")))
    except ValueError:
        return 1
