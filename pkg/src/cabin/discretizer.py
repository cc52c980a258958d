"""Adaptive discretization of continuous measurements.

A variable's sample density is estimated with a Gaussian KDE, approximated by
a sum of Gaussian terms ``a * exp(-((x - b) / c)**2)``, and every term becomes
one discrete value.  A sample is labelled with the term of maximal membership.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from typing import Iterable, Sequence

import numpy as np
from scipy.optimize import least_squares

from .errors import (
    DegenerateSamples,
    FitDiverged,
    LabelOutOfRange,
    NoValidFit,
    TooFewSamples,
)

MIN_SAMPLES = 8
DEFAULT_GRID_POINTS = 256
DEFAULT_K_MAX = 6
DEFAULT_EPSILON = 0.05
PARAM_FLOOR = 1e-9
LM_MAX_ITER = 200
LM_XTOL = 1e-8
SEPARATION = 0.6


@dataclass(frozen=True)
class SampleSeries:
    variable_name: str
    values: np.ndarray
    unit: str = ""

    def __post_init__(self):
        values = np.array(self.values, dtype=float).ravel()
        if values.size == 0:
            raise ValueError(f"{self.variable_name}: empty sample series")
        if not np.all(np.isfinite(values)):
            raise ValueError(f"{self.variable_name}: non-finite sample values")
        values.flags.writeable = False
        object.__setattr__(self, "values", values)

    def __len__(self):
        return self.values.size


@dataclass(frozen=True)
class DensityEstimate:
    grid: np.ndarray
    density: np.ndarray
    bandwidth: float

    @property
    def spacing(self) -> float:
        return float(self.grid[1] - self.grid[0])

    def integral(self) -> float:
        return float(np.trapezoid(self.density, self.grid))


@dataclass(frozen=True)
class GaussianTerm:
    a: float
    b: float
    c: float

    def __post_init__(self):
        if not (self.a > 0 and self.c > 0):
            raise ValueError(f"invalid Gaussian term a={self.a}, c={self.c}")

    def __call__(self, x):
        return self.a * np.exp(-(((np.asarray(x, dtype=float) - self.b) / self.c) ** 2))


@dataclass(frozen=True)
class DiscretizationScheme:
    variable_name: str
    terms: tuple[GaussianTerm, ...]
    normalized: bool = True
    unit: str = ""
    epsilon: float = DEFAULT_EPSILON
    k_max: int = DEFAULT_K_MAX
    # set when the variable was constant and no fitting took place
    degenerate: bool = field(default=False, compare=False)

    def __post_init__(self):
        if not self.terms:
            raise ValueError("a discretization scheme needs at least one term")
        object.__setattr__(self, "terms", tuple(sorted(self.terms, key=lambda t: t.b)))

    @property
    def n_values(self) -> int:
        return len(self.terms)

    @property
    def means(self) -> np.ndarray:
        return np.array([t.b for t in self.terms])

    def to_dict(self) -> dict:
        return {
            "variable": self.variable_name,
            "unit": self.unit,
            "terms": [{"a": _real(t.a), "b": _real(t.b), "c": _real(t.c)} for t in self.terms],
            "epsilon": _real(self.epsilon),
            "k_max": int(self.k_max),
        }

    @classmethod
    def from_dict(cls, d: dict) -> "DiscretizationScheme":
        terms = tuple(GaussianTerm(float(t["a"]), float(t["b"]), float(t["c"])) for t in d["terms"])
        return cls(
            variable_name=d["variable"],
            terms=terms,
            normalized=True,
            unit=d.get("unit", ""),
            epsilon=float(d.get("epsilon", DEFAULT_EPSILON)),
            k_max=int(d.get("k_max", DEFAULT_K_MAX)),
        )

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2)

    @classmethod
    def from_json(cls, text: str) -> "DiscretizationScheme":
        return cls.from_dict(json.loads(text))


@dataclass(frozen=True)
class DiscreteSeries:
    variable_name: str
    labels: np.ndarray


def _real(x: float) -> float:
    """Round to 12 significant digits so that serialized files are diffable."""
    return float(f"{float(x):.12g}")


def _as_values(samples) -> np.ndarray:
    if isinstance(samples, SampleSeries):
        return samples.values
    return np.asarray(samples, dtype=float).ravel()


def is_degenerate(values: np.ndarray) -> bool:
    return float(np.std(values)) < 1e-9 * abs(float(np.mean(values))) + 1e-12


def silverman_bandwidth(values: np.ndarray) -> float:
    n = values.size
    sigma = float(np.std(values, ddof=1))
    q75, q25 = np.percentile(values, [75, 25])
    iqr = float(q75 - q25)
    spread = min(sigma, iqr / 1.34) if iqr > 0 else sigma
    return 0.9 * spread * n ** (-0.2)


def estimate_density(samples, grid_points: int = DEFAULT_GRID_POINTS) -> DensityEstimate:
    """Gaussian-kernel KDE on a uniform grid over ``[min - 3h, max + 3h]``."""
    values = _as_values(samples)
    if values.size < MIN_SAMPLES:
        raise TooFewSamples(f"need at least {MIN_SAMPLES} samples, got {values.size}")
    if is_degenerate(values):
        raise DegenerateSamples("all samples are equal")
    if grid_points < 2:
        raise ValueError("grid_points must be >= 2")

    h = silverman_bandwidth(values)
    grid = np.linspace(values.min() - 3 * h, values.max() + 3 * h, grid_points)
    density = np.zeros(grid_points)
    norm = 1.0 / (values.size * h * np.sqrt(2 * np.pi))
    # chunked to bound the (chunk x grid) temporary
    for start in range(0, values.size, 4096):
        chunk = values[start:start + 4096]
        u = (grid[None, :] - chunk[:, None]) / h
        density += np.exp(-0.5 * u * u).sum(axis=0)
    density *= norm
    grid.flags.writeable = False
    density.flags.writeable = False
    return DensityEstimate(grid=grid, density=density, bandwidth=float(h))


def _mixture(x: np.ndarray, params: np.ndarray) -> np.ndarray:
    p = params.reshape(-1, 3)
    a = np.maximum(np.abs(p[:, 0]), PARAM_FLOOR)
    b = p[:, 1]
    c = np.maximum(np.abs(p[:, 2]), PARAM_FLOOR)
    u = (x[:, None] - b[None, :]) / c[None, :]
    return (a[None, :] * np.exp(-u * u)).sum(axis=1)


def _jacobian(x: np.ndarray, params: np.ndarray) -> np.ndarray:
    p = params.reshape(-1, 3)
    sa = np.where(p[:, 0] < 0, -1.0, 1.0)
    sc = np.where(p[:, 2] < 0, -1.0, 1.0)
    a = np.maximum(np.abs(p[:, 0]), PARAM_FLOOR)
    b = p[:, 1]
    c = np.maximum(np.abs(p[:, 2]), PARAM_FLOOR)
    u = (x[:, None] - b[None, :]) / c[None, :]
    e = np.exp(-u * u)
    jac = np.empty((x.size, p.shape[0], 3))
    jac[:, :, 0] = sa * e
    jac[:, :, 1] = a * e * 2 * u / c
    jac[:, :, 2] = sc * a * e * 2 * u * u / c
    return jac.reshape(x.size, -1)


def _weighted_kmeans_1d(x: np.ndarray, w: np.ndarray, k: int, iters: int = 100):
    """Lloyd's algorithm on weighted 1-D points, seeded at weighted quantiles."""
    cdf = np.cumsum(w)
    cdf /= cdf[-1]
    centers = np.interp((np.arange(k) + 0.5) / k, cdf, x)
    assign = np.zeros(x.size, dtype=int)
    for _ in range(iters):
        assign = np.argmin(np.abs(x[:, None] - centers[None, :]), axis=1)
        new = centers.copy()
        for j in range(k):
            m = assign == j
            if w[m].sum() > 0:
                new[j] = np.average(x[m], weights=w[m])
        if np.allclose(new, centers, rtol=0, atol=1e-12 * (1 + np.abs(centers).max())):
            break
        centers = new
    return centers, assign


def _kmeans_init(pd: DensityEstimate, k: int) -> np.ndarray:
    x, w = pd.grid, pd.density
    centers, assign = _weighted_kmeans_1d(x, w, k)
    floor = pd.spacing
    params = []
    for j in range(k):
        m = assign == j
        if w[m].sum() > 0:
            sd = float(np.sqrt(np.average((x[m] - centers[j]) ** 2, weights=w[m])))
        else:
            sd = floor
        # c = sqrt(2) * sigma in the exp(-((x-b)/c)^2) parametrisation
        c = max(np.sqrt(2) * sd, floor)
        a = max(float(np.interp(centers[j], x, w)), PARAM_FLOOR)
        params.append((a, centers[j], c))
    return np.array(params, dtype=float).ravel()


def _warm_init(pd: DensityEstimate, terms: Sequence[GaussianTerm]) -> np.ndarray:
    """Previous solution plus a negligible term at the largest residual."""
    base = np.array([(t.a, t.b, t.c) for t in terms], dtype=float).ravel()
    resid = pd.density - _mixture(pd.grid, base)
    i = int(np.argmax(resid))
    extra = (max(float(resid[i]), PARAM_FLOOR), pd.grid[i], 2 * pd.spacing)
    return np.concatenate([base, extra])


def _refine(pd: DensityEstimate, x0: np.ndarray):
    x, y = pd.grid, pd.density
    try:
        res = least_squares(
            lambda p: _mixture(x, p) - y,
            x0,
            jac=lambda p: _jacobian(x, p),
            method="lm",
            xtol=LM_XTOL,
            max_nfev=LM_MAX_ITER,
        )
    except (ValueError, np.linalg.LinAlgError) as exc:
        raise FitDiverged(str(exc)) from exc
    if res.status < 0 or not np.all(np.isfinite(res.x)):
        raise FitDiverged(res.message)
    p = res.x.reshape(-1, 3).copy()
    p[:, 0] = np.maximum(np.abs(p[:, 0]), PARAM_FLOOR)
    p[:, 2] = np.maximum(np.abs(p[:, 2]), PARAM_FLOOR)
    rmse = float(np.sqrt(np.mean((_mixture(x, p.ravel()) - y) ** 2)))
    if not np.isfinite(rmse):
        raise FitDiverged("non-finite residual")
    return p, rmse


def fit_mixture(
    pd: DensityEstimate,
    k: int,
    k_max: int = DEFAULT_K_MAX,
    warm_start: Sequence[GaussianTerm] | None = None,
) -> tuple[list[GaussianTerm], float]:
    """Least-squares fit of a ``k``-term Gaussian sum to a density curve.

    The start point comes from weighted k-means on the grid.  When
    ``warm_start`` holds a ``k - 1`` term solution, that solution extended by
    a negligible term is refined as well and the better fit is returned; this
    keeps the best residual non-increasing in ``k``.

    Returns the terms sorted by mean and the RMS residual over the grid.
    """
    if not 1 <= k <= k_max:
        raise ValueError(f"k must be in [1, {k_max}], got {k}")
    if pd.grid.size < 4 * k:
        raise ValueError(f"grid of {pd.grid.size} points is too coarse for k={k}")

    starts = [_kmeans_init(pd, k)]
    if warm_start is not None and len(warm_start) == k - 1:
        starts.append(_warm_init(pd, warm_start))

    best = None
    failure = None
    for x0 in starts:
        try:
            p, rmse = _refine(pd, x0)
        except FitDiverged as exc:
            failure = exc
            continue
        if best is None or rmse < best[1]:
            best = (p, rmse)
    if best is None:
        raise FitDiverged(f"k={k}: {failure}")
    p, rmse = best
    terms = sorted((GaussianTerm(float(a), float(b), float(c)) for a, b, c in p), key=lambda t: t.b)
    return terms, rmse


def _resolvable(terms: Sequence[GaussianTerm], separation: float = SEPARATION) -> bool:
    """True when the terms can serve as distinct discrete values.

    Every term must win maximal membership at its own mean, and adjacent
    means must be at least ``separation * (c_i + c_j)`` apart.  Two equal
    terms merge into one mode below ``sqrt(2) * c``; the constant sits a bit
    below that so skewed or flat-topped densities can still be tiled.
    """
    terms = sorted(terms, key=lambda t: t.b)
    means = np.array([t.b for t in terms])
    widths = np.array([t.c for t in terms])
    if np.any(np.diff(means) < separation * (widths[:-1] + widths[1:])):
        return False
    logs = _log_membership(terms, means)
    return bool(np.all(np.argmax(logs, axis=1) == np.arange(len(terms))))


def single_value_scheme(values, variable_name: str = "", unit: str = "",
                        k_max: int = DEFAULT_K_MAX, epsilon: float = DEFAULT_EPSILON):
    values = _as_values(values)
    mean = float(np.mean(values))
    return DiscretizationScheme(
        variable_name=variable_name,
        terms=(GaussianTerm(1.0, mean, max(abs(mean) * 1e-6, PARAM_FLOOR)),),
        unit=unit,
        epsilon=epsilon,
        k_max=k_max,
        degenerate=True,
    )


def build_scheme(
    samples,
    k_max: int = DEFAULT_K_MAX,
    epsilon: float = DEFAULT_EPSILON,
    grid_points: int = DEFAULT_GRID_POINTS,
    variable_name: str | None = None,
    unit: str | None = None,
    return_fits: bool = False,
    separation: float = SEPARATION,
):
    """Fit ``k = 1..k_max`` and keep the smallest adequate model.

    A fit is admissible when its terms are resolvable (see ``_resolvable``);
    otherwise some label would be unreachable or split one mode in two.  Among
    admissible fits the smallest ``k`` with ``rmse <= (1 + epsilon) * min rmse``
    is chosen.  Amplitudes are normalised so the largest is 1.

    Constant series yield a one-term scheme flagged ``degenerate``.
    """
    if isinstance(samples, SampleSeries):
        variable_name = samples.variable_name if variable_name is None else variable_name
        unit = samples.unit if unit is None else unit
    variable_name = variable_name or ""
    unit = unit or ""
    values = _as_values(samples)
    if values.size < MIN_SAMPLES:
        raise TooFewSamples(f"{variable_name}: need at least {MIN_SAMPLES} samples, got {values.size}")
    if is_degenerate(values):
        scheme = single_value_scheme(values, variable_name, unit, k_max, epsilon)
        return (scheme, {}) if return_fits else scheme

    pd = estimate_density(values, grid_points)
    fits: dict[int, tuple[list[GaussianTerm], float]] = {}
    previous = None
    for k in range(1, k_max + 1):
        if pd.grid.size < 4 * k:
            break
        try:
            terms, rmse = fit_mixture(pd, k, k_max=k_max, warm_start=previous)
        except FitDiverged:
            previous = None
            continue
        previous = terms
        fits[k] = (terms, rmse)

    admissible = {k: f for k, f in fits.items() if _resolvable(f[0], separation)}
    if not admissible:
        raise NoValidFit(f"{variable_name}: no admissible Gaussian fit for k <= {k_max}")
    best = min(rmse for _, rmse in admissible.values())
    chosen = min(k for k, (_, rmse) in admissible.items() if rmse <= (1 + epsilon) * best)
    terms = admissible[chosen][0]
    a_max = max(t.a for t in terms)
    scheme = DiscretizationScheme(
        variable_name=variable_name,
        terms=tuple(GaussianTerm(t.a / a_max, t.b, t.c) for t in terms),
        unit=unit,
        epsilon=epsilon,
        k_max=k_max,
    )
    if return_fits:
        return scheme, {k: rmse for k, (_, rmse) in fits.items()}
    return scheme


def _log_membership(terms: Sequence[GaussianTerm], x) -> np.ndarray:
    x = np.atleast_1d(np.asarray(x, dtype=float))
    a = np.array([t.a for t in terms])
    b = np.array([t.b for t in terms])
    c = np.array([t.c for t in terms])
    return np.log(a)[None, :] - ((x[:, None] - b[None, :]) / c[None, :]) ** 2


def membership(scheme: DiscretizationScheme, x: float) -> list[float]:
    return [float(t(x)) for t in scheme.terms]


def discretize_values(scheme: DiscretizationScheme, values) -> np.ndarray:
    # Compared in log space so that far-away samples, whose memberships all
    # underflow to zero, still go to the dominant term.  argmax keeps the
    # lowest label on ties.
    return np.argmax(_log_membership(scheme.terms, values), axis=1).astype(int)


def discretize_series(scheme: DiscretizationScheme, samples) -> DiscreteSeries:
    name = samples.variable_name if isinstance(samples, SampleSeries) else scheme.variable_name
    if name != scheme.variable_name:
        raise ValueError(f"scheme is for {scheme.variable_name!r}, samples are {name!r}")
    return DiscreteSeries(name, discretize_values(scheme, _as_values(samples)))


def discretize(scheme: DiscretizationScheme, x: float) -> int:
    return int(discretize_values(scheme, [x])[0])


def label_to_value(scheme: DiscretizationScheme, label: int) -> float:
    if not 0 <= label < scheme.n_values:
        raise LabelOutOfRange(f"label {label} outside [0, {scheme.n_values}) for {scheme.variable_name}")
    return scheme.terms[label].b


def build_schemes(columns: dict[str, Iterable[float]], **kwargs) -> dict[str, DiscretizationScheme]:
    return {name: build_scheme(np.asarray(list(v), dtype=float), variable_name=name, **kwargs)
            for name, v in columns.items()}
