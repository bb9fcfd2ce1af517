"""Model-vs-human PSE comparisons: one-sample t-tests, Bonferroni, tables."""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass
from typing import Sequence

from scipy.special import betainc

from .psychometrics import HumanBaseline

DEGENERATE_MARK = "▲"
STRATEGIES = ("object_based", "face_based")
CONDITIONS = ("unmasked", "eyes", "nose", "mouth")
STRATEGY_LABELS = {"object_based": "Object-based", "face_based": "Face-based"}
CONDITION_LABELS = {"unmasked": "Unmasked", "eyes": "Eyes", "nose": "Nose", "mouth": "Mouth"}
MODEL_LABELS = {"alexnet": "AlexNet", "vgg11": "VGG11", "vgg13": "VGG13",
                "vgg16": "VGG16", "fe_alexnet": "FE-AlexNet"}


def t_sf_two_tailed(t: float, df: float) -> float:
    """P(|T| >= |t|) for Student's t, via the regularized incomplete beta."""
    if df <= 0:
        raise ValueError("df must be positive")
    if math.isinf(t):
        return 0.0
    if t == 0:
        return 1.0
    return float(betainc(df / 2.0, 0.5, df / (df + t * t)))


def one_sample_t(baseline: HumanBaseline, model_pse: float) -> tuple[float, int, float]:
    """Test one model PSE against the human PSE distribution.

    t = (model_pse - mean) / sem with df = n - 1. A zero-spread baseline gives
    t = +/-inf and p = 0 when the model differs from the mean.
    """
    if baseline.n < 2:
        raise ValueError("baseline needs n >= 2")
    if baseline.sd < 0:
        raise ValueError("baseline sd must be nonnegative")
    if not math.isfinite(model_pse):
        raise ValueError("model PSE must be finite")
    df = baseline.n - 1
    diff = model_pse - baseline.mean
    if baseline.sem == 0:
        if diff == 0:
            return 0.0, df, 1.0
        return math.copysign(math.inf, diff), df, 0.0
    t = diff / baseline.sem
    return t, df, t_sf_two_tailed(t, df)


def bonferroni(p: float, m: int) -> float:
    if not 0.0 <= p <= 1.0:
        raise ValueError(f"p={p} outside [0, 1]")
    if m < 1:
        raise ValueError("m must be >= 1")
    return min(1.0, m * p)


@dataclass
class ComparisonRow:
    strategy: str
    condition: str
    model: str
    pse: float | None
    t: float | None
    df: int
    p: float | None = None
    p_corrected: float | None = None
    degenerate: bool = False

    def __post_init__(self):
        if self.strategy not in STRATEGIES:
            raise ValueError(f"unknown strategy {self.strategy!r}")
        if self.condition not in CONDITIONS:
            raise ValueError(f"unknown condition {self.condition!r}")
        if self.degenerate != (self.pse is None):
            raise ValueError("degenerate rows carry no PSE and vice versa")
        if self.degenerate and (self.t is not None or self.p is not None):
            raise ValueError("degenerate rows carry no statistics")

    @property
    def extreme(self) -> bool:
        return self.t is not None and math.isinf(self.t)

    @classmethod
    def compare(cls, strategy: str, condition: str, model: str, pse: float | None,
                baseline: HumanBaseline) -> "ComparisonRow":
        if pse is None:
            return cls(strategy, condition, model, None, None, baseline.n - 1, degenerate=True)
        t, df, p = one_sample_t(baseline, pse)
        return cls(strategy, condition, model, pse, t, df, p)


@dataclass
class Report:
    rows: list[ComparisonRow]
    m: int
    title: str = ""

    def to_json(self, **extra) -> str:
        def clean(v):
            if isinstance(v, float) and math.isinf(v):
                return "inf" if v > 0 else "-inf"
            return v
        rows = [{k: clean(v) for k, v in asdict(r).items()} | {"extreme": r.extreme}
                for r in self.rows]
        doc = {"title": self.title, "bonferroni_m": self.m, "rows": rows}
        doc.update(extra)
        return json.dumps(doc, indent=2, sort_keys=True, ensure_ascii=False) + "\n"

    def to_text(self) -> str:
        return render_text(self.rows, self.title)


def format_p(p: float | None) -> str:
    if p is None:
        return DEGENERATE_MARK
    if p < 0.001:
        return "<.001"
    return f"{p:.3f}"


def _fmt_num(v: float | None) -> str:
    if v is None:
        return DEGENERATE_MARK
    if math.isinf(v):
        return "inf" if v > 0 else "-inf"
    return f"{v:.3f}"


def _group_label(row: ComparisonRow, by: str) -> str:
    if by == "strategy":
        return STRATEGY_LABELS[row.strategy]
    if by == "condition":
        return CONDITION_LABELS[row.condition]
    return f"{STRATEGY_LABELS[row.strategy]} / {CONDITION_LABELS[row.condition]}"


def _grouping(rows: Sequence[ComparisonRow]) -> str:
    strategies = {r.strategy for r in rows}
    conditions = {r.condition for r in rows}
    if conditions == {"unmasked"}:
        return "strategy"
    if len(strategies) == 1:
        return "condition"
    return "both"


def render_text(rows: Sequence[ComparisonRow], title: str = "") -> str:
    """Aligned plain-text table laid out like the published PSE tables."""
    by = _grouping(rows)
    df = rows[0].df
    header = ["", "Model", "PSE", f"t({df})", "p"]
    body = []
    last_group = None
    for r in rows:
        group = _group_label(r, by)
        body.append([group if group != last_group else "",
                     MODEL_LABELS.get(r.model, r.model),
                     _fmt_num(r.pse), _fmt_num(r.t), format_p(r.p_corrected)])
        last_group = group
    widths = [max(len(line[i]) for line in [header] + body) for i in range(len(header))]
    rule = "-" * (sum(widths) + 2 * (len(widths) - 1))

    def fmt(cells):
        return "  ".join(c.ljust(w) for c, w in zip(cells, widths)).rstrip()

    out = []
    if title:
        out.append(title)
    out += [rule, fmt(header), rule]
    for i, cells in enumerate(body):
        if i and cells[0]:
            out.append(rule)
        out.append(fmt(cells))
    out.append(rule)
    if any(r.degenerate for r in rows):
        out.append(f"{DEGENERATE_MARK} psychometric fit does not cross 0.5; PSE discarded.")
    out.append("p-values Bonferroni corrected.")
    return "\n".join(out) + "\n"


def build_table(rows: Sequence[ComparisonRow], m: int | None = None, title: str = "") -> Report:
    """Apply Bonferroni correction across a table and return the report.

    ``m`` defaults to the number of non-degenerate rows.
    """
    if not rows:
        raise ValueError("no rows")
    live = [r for r in rows if not r.degenerate]
    m_eff = m if m is not None else max(1, len(live))
    out = []
    for r in rows:
        pc = None if r.degenerate else bonferroni(r.p, m_eff)
        out.append(ComparisonRow(r.strategy, r.condition, r.model, r.pse, r.t, r.df,
                                 r.p, pc, r.degenerate))
    return Report(out, m_eff, title)
