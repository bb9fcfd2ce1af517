"""Psychometric-function fitting and PSE extraction.

The fitted curve is a cumulative Gaussian with a lower asymptote ``gamma``
and an upper lapse ``lam``::

    P(x) = gamma + (1 - gamma - lam) * Phi((x - mu) / sigma)

The point of subjective equality (PSE) is the level where P crosses 0.5.
Curves that never cross 0.5, or cross it far outside the stimulus range,
are flagged degenerate and carry no PSE.
"""

from __future__ import annotations

import csv
import itertools
import logging
import math
from collections import defaultdict
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np
from scipy import optimize
from scipy.special import ndtr, ndtri

log = logging.getLogger(__name__)

MU_BOUNDS = (-0.5, 1.5)
SIGMA_BOUNDS = (1e-3, 2.0)
ASYMPTOTE_BOUNDS = (0.0, 0.5)
PSE_WINDOW = (-0.5, 1.5)

# Multi-start grid, iterated in itertools.product order (mu slowest).
START_MU = (0.25, 0.5, 0.75)
START_SIGMA = (0.05, 0.15, 0.5)
START_GAMMA = (0.0, 0.1)
START_LAM = (0.0, 0.1)

MIN_LEVELS = 4


class FitError(ValueError):
    pass


def psychometric(x, mu, sigma, gamma=0.0, lam=0.0):
    x = np.asarray(x, dtype=np.float64)
    return gamma + (1.0 - gamma - lam) * ndtr((x - mu) / sigma)


def _crossing(mu, sigma, gamma, lam):
    """Return (pse, degenerate) for the given curve parameters."""
    span = 1.0 - gamma - lam
    if not (gamma < 0.5 < 1.0 - lam) or span <= 0:
        return None, True
    pse = mu + sigma * float(ndtri((0.5 - gamma) / span))
    if not (PSE_WINDOW[0] <= pse <= PSE_WINDOW[1]) or not math.isfinite(pse):
        return None, True
    return pse, False


@dataclass
class PsychometricFit:
    mu: float
    sigma: float
    gamma: float = 0.0
    lam: float = 0.0
    sse: float = float("nan")
    pse: float | None = field(default=None)
    degenerate: bool = field(default=False)

    def __post_init__(self):
        if not self.sigma > 0:
            raise FitError(f"sigma must be positive, got {self.sigma}")
        for name in ("gamma", "lam"):
            v = getattr(self, name)
            if not ASYMPTOTE_BOUNDS[0] <= v <= ASYMPTOTE_BOUNDS[1]:
                raise FitError(f"{name}={v} outside {ASYMPTOTE_BOUNDS}")
        self.pse, self.degenerate = _crossing(self.mu, self.sigma, self.gamma, self.lam)

    def __call__(self, x):
        return psychometric(x, self.mu, self.sigma, self.gamma, self.lam)

    @property
    def params(self) -> tuple[float, float, float, float]:
        return self.mu, self.sigma, self.gamma, self.lam

    def to_dict(self) -> dict:
        return asdict(self)


def pse_of(fit: PsychometricFit) -> float | None:
    """Level at which the fitted curve equals 0.5, or None if degenerate."""
    return _crossing(fit.mu, fit.sigma, fit.gamma, fit.lam)[0]


def _residuals(theta, x, y):
    return psychometric(x, *theta) - y


def _jacobian(theta, x, y):
    mu, sigma, gamma, lam = theta
    z = (x - mu) / sigma
    pdf = np.exp(-0.5 * z * z) / math.sqrt(2 * math.pi)
    span = 1.0 - gamma - lam
    cdf = ndtr(z)
    return np.column_stack([
        -span * pdf / sigma,
        -span * pdf * z / sigma,
        1.0 - cdf,
        -cdf,
    ])


def _neg_loglik(theta, x, k, n):
    p = np.clip(psychometric(x, *theta), 1e-12, 1 - 1e-12)
    return -np.sum(k * np.log(p) + (n - k) * np.log1p(-p))


def _clean_points(points) -> tuple[np.ndarray, np.ndarray]:
    arr = np.asarray(list(points), dtype=np.float64)
    if arr.ndim != 2 or arr.shape[1] != 2:
        raise FitError("points must be (level, value) pairs")
    if not np.all(np.isfinite(arr)):
        raise FitError("non-finite level or value")
    x, y = arr[:, 0], arr[:, 1]
    if np.any((y < 0) | (y > 1)):
        raise FitError("values must lie in [0, 1]")
    if len(np.unique(x)) < MIN_LEVELS:
        raise FitError(f"need at least {MIN_LEVELS} distinct levels, got {len(np.unique(x))}")
    return x, y


def fit_psychometric(points: Iterable[tuple[float, float]], objective: str = "lsq",
                     n_trials: Sequence[int] | None = None) -> PsychometricFit:
    """Fit (mu, sigma, gamma, lam) to (level, proportion) pairs.

    Every start of the fixed grid is refined with a bounded local optimiser;
    the lowest-SSE solution wins, ties going to the earliest start.
    ``objective="mle"`` maximises a binomial likelihood instead and needs
    ``n_trials`` per point.
    """
    x, y = _clean_points(points)
    lb = np.array([MU_BOUNDS[0], SIGMA_BOUNDS[0], ASYMPTOTE_BOUNDS[0], ASYMPTOTE_BOUNDS[0]])
    ub = np.array([MU_BOUNDS[1], SIGMA_BOUNDS[1], ASYMPTOTE_BOUNDS[1], ASYMPTOTE_BOUNDS[1]])
    if objective == "mle":
        if n_trials is None or len(n_trials) != len(x):
            raise FitError("mle objective needs n_trials per point")
        n = np.asarray(n_trials, dtype=np.float64)
        k = y * n
    elif objective != "lsq":
        raise FitError(f"unknown objective {objective!r}")

    best_theta, best_sse = None, math.inf
    for start in itertools.product(START_MU, START_SIGMA, START_GAMMA, START_LAM):
        theta0 = np.clip(np.array(start, dtype=np.float64), lb, ub)
        if objective == "lsq":
            res = optimize.least_squares(_residuals, theta0, jac=_jacobian, bounds=(lb, ub),
                                         args=(x, y), method="trf",
                                         xtol=1e-12, ftol=1e-12, gtol=1e-12, max_nfev=2000)
            theta = res.x
        else:
            res = optimize.minimize(_neg_loglik, theta0, args=(x, k, n), method="L-BFGS-B",
                                    bounds=list(zip(lb, ub)))
            theta = res.x
        theta = np.clip(theta, lb, ub)
        sse = float(np.sum(_residuals(theta, x, y) ** 2))
        # strict improvement only, so ties keep the earliest start
        if sse < best_sse:
            best_theta, best_sse = theta, sse
    mu, sigma, gamma, lam = (float(v) for v in best_theta)
    return PsychometricFit(mu, sigma, gamma, lam, sse=best_sse)


# --- human data ----------------------------------------------------------

@dataclass(frozen=True)
class TrialRecord:
    participant_id: str
    morph_level: float
    response: str

    def __post_init__(self):
        if self.response not in ("happy", "sad"):
            raise FitError(f"response must be 'happy' or 'sad', got {self.response!r}")
        if not 0.0 <= self.morph_level <= 1.0:
            raise FitError(f"morph level {self.morph_level} outside [0, 1]")


def load_trials(path: str | Path, levels: Sequence[float] | None = None) -> list[TrialRecord]:
    """Read a ``participant,level,response`` CSV."""
    trials = []
    with open(path, newline="") as fh:
        reader = csv.DictReader(fh)
        missing = {"participant", "level", "response"} - set(reader.fieldnames or ())
        if missing:
            raise FitError(f"{path}: missing columns {sorted(missing)}")
        for lineno, row in enumerate(reader, start=2):
            try:
                rec = TrialRecord(row["participant"], float(row["level"]),
                                  row["response"].strip().lower())
            except (FitError, ValueError) as exc:
                raise FitError(f"{path}:{lineno}: {exc}") from exc
            if levels is not None and not any(abs(rec.morph_level - lv) < 1e-9 for lv in levels):
                raise FitError(f"{path}:{lineno}: level {rec.morph_level} not in stimulus set")
            trials.append(rec)
    return trials


def write_trials(trials: Iterable[TrialRecord], path: str | Path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["participant", "level", "response"])
        for t in trials:
            w.writerow([t.participant_id, f"{t.morph_level:g}", t.response])


def proportions(trials: Iterable[TrialRecord]) -> list[tuple[float, float, int]]:
    """(level, proportion happy, n) per level, sorted by level."""
    counts: dict[float, list[int]] = defaultdict(lambda: [0, 0])
    for t in trials:
        c = counts[t.morph_level]
        c[0] += t.response == "happy"
        c[1] += 1
    return [(lv, k / n, n) for lv, (k, n) in sorted(counts.items())]


@dataclass
class HumanBaseline:
    pses: list[float]
    n: int
    mean: float
    sd: float
    sem: float
    excluded: list[str] = field(default_factory=list)

    def __post_init__(self):
        if self.n < 2:
            raise FitError("a baseline needs at least 2 participants")

    @classmethod
    def from_pses(cls, pses: Sequence[float], excluded: Sequence[str] = ()) -> "HumanBaseline":
        arr = np.asarray(pses, dtype=np.float64)
        if arr.size < 2:
            raise FitError("a baseline needs at least 2 participants")
        sd = float(arr.std(ddof=1))
        return cls(list(map(float, arr)), int(arr.size), float(arr.mean()), sd,
                   sd / math.sqrt(arr.size), list(excluded))

    @classmethod
    def from_summary(cls, mean: float, sem: float, n: int) -> "HumanBaseline":
        """Baseline from published summary statistics (no individual PSEs)."""
        return cls([], n, mean, sem * math.sqrt(n), sem)

    def to_dict(self) -> dict:
        return asdict(self)


def fit_participants(trials: Iterable[TrialRecord],
                     objective: str = "lsq") -> tuple[HumanBaseline, dict[str, PsychometricFit]]:
    """Fit each participant's curve and aggregate the non-degenerate PSEs."""
    by_pid: dict[str, list[TrialRecord]] = defaultdict(list)
    for t in trials:
        by_pid[t.participant_id].append(t)
    if len(by_pid) < 2:
        raise FitError(f"need at least 2 participants, got {len(by_pid)}")
    fits, pses, excluded = {}, [], []
    for pid in sorted(by_pid):
        props = proportions(by_pid[pid])
        if len(props) < MIN_LEVELS:
            raise FitError(f"participant {pid}: need at least {MIN_LEVELS} levels")
        fit = fit_psychometric([(lv, p) for lv, p, _ in props], objective=objective,
                               n_trials=[n for *_, n in props])
        fits[pid] = fit
        if fit.degenerate:
            excluded.append(pid)
        else:
            pses.append(fit.pse)
    log.info("participants: %d fitted, %d degenerate excluded %s",
             len(by_pid), len(excluded), excluded)
    if len(pses) < 2:
        raise FitError(f"only {len(pses)} non-degenerate participants; cannot form a baseline")
    return HumanBaseline.from_pses(pses, excluded), fits


def simulate_participants(n_participants: int = 50, levels: Sequence[float] = (0.0, 0.2, 0.3, 0.5, 0.7, 0.8, 1.0),
                          reps: int = 30, pse_mean: float = 0.53, pse_sd: float = 0.12,
                          sigma: float = 0.12, gamma: float = 0.02, lam: float = 0.02,
                          seed: int = 0) -> list[TrialRecord]:
    """Binomial 2AFC responses for simulated observers with normally drawn PSEs."""
    rng = np.random.default_rng(seed)
    trials = []
    for i in range(n_participants):
        target = rng.normal(pse_mean, pse_sd)
        # shift mu so the asymmetric-asymptote curve crosses 0.5 at ``target``
        mu = target - sigma * float(ndtri((0.5 - gamma) / (1 - gamma - lam)))
        pid = f"P{i + 1:02d}"
        for lv in levels:
            k = rng.binomial(reps, float(psychometric(lv, mu, sigma, gamma, lam)))
            trials += [TrialRecord(pid, lv, "happy")] * int(k)
            trials += [TrialRecord(pid, lv, "sad")] * int(reps - k)
    return trials


def model_curve(model, continuum, device: str = "cpu") -> PsychometricFit:
    """Classify every stimulus with ``model`` and fit a curve to p(happy)."""
    from .models import classify_continuum

    return fit_psychometric(classify_continuum(model, continuum, device=device))


CURVE_STYLES = {"human": ("tab:green", "-"), "alexnet": ("gold", "-"), "vgg11": ("red", "-"),
                "vgg13": ("magenta", "-"), "vgg16": ("blue", "-"), "fe_alexnet": ("black", "--")}


def plot_curves(curves: Sequence[tuple[str, str, Sequence[tuple[float, float]], PsychometricFit]],
                path: str | Path, title: str = "") -> Path:
    """Points and fitted curves; x is morph proportion, y is p(happy).

    Each entry is (label, style key, points, fit); the style key selects a
    colour by architecture, with FE-AlexNet dashed.
    """
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    fig, ax = plt.subplots(figsize=(5.0, 3.6))
    grid = np.linspace(0.0, 1.0, 201)
    for label, key, points, fit in curves:
        color, ls = CURVE_STYLES.get(key, ("gray", ":"))
        x, y = zip(*points)
        ax.plot(x, y, "o", color=color, ms=3)
        ax.plot(grid, fit(grid), ls, color=color, lw=1.4, label=label)
    ax.axhline(0.5, color="0.7", lw=0.6)
    ax.set_xlim(-0.02, 1.02)
    ax.set_ylim(-0.02, 1.02)
    ax.set_xlabel("Morph proportion (happy)")
    ax.set_ylabel("Probability happy")
    if title:
        ax.set_title(title, fontsize=10)
    ax.legend(fontsize=7, frameon=False, loc="upper left")
    fig.tight_layout()
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fig.savefig(path, format="png", dpi=100, metadata={"Software": None})
    plt.close(fig)
    return path
