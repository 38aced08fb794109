"""IsoFLOP analysis: per-budget quadratic fits, compute-optimal power laws, FLOP accounting.

Records are {budget, params, loss[, family]} with budget in non-embedding
training FLOPs, params the non-embedding parameter count and loss in nats
per token.

CLI (via main.py):
    python3 main.py scaling-fit records.jsonl [--table fits.csv] [--plot isoflop.png]
"""
from __future__ import annotations

import csv
import json
import math
from collections import defaultdict
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Dict, Iterable, List, Optional, Sequence, Tuple, Union

import numpy as np

from logging_service import get_logger

from .denoiser import DenoiserConfig
from .errors import DomainError, InsufficientDataError, NoMinimumError

logger = get_logger('plaid.scaling')

CURVATURE_TOL = 1e-12
DEFAULT_FAMILY = "default"


@dataclass(frozen=True)
class FlopConvention:
    """Per-token FLOPs per non-embedding parameter: 2 per forward pass, 4 for the backward."""

    forward_mult: float = 2.0
    backward_mult: float = 4.0
    two_pass_prob: float = 0.25     # chance a training step unrolls self-conditioning twice


DEFAULT_CONVENTION = FlopConvention()


@dataclass(frozen=True)
class IsoFlopPoint:
    flops: float
    params: float
    loss: float
    family: str = DEFAULT_FAMILY

    def __post_init__(self):
        if not (self.flops > 0 and self.params > 0 and self.loss > 0):
            raise DomainError(f"IsoFLOP point needs positive values, got {self}")


@dataclass(frozen=True)
class PowerLawFit:
    alpha: float
    beta: float
    residual: float

    def predict(self, c: Union[float, np.ndarray]):
        return self.alpha * np.power(c, self.beta)


@dataclass
class BudgetFit:
    budget: float
    n_star: float
    l_star: float
    points: int


@dataclass
class FamilyReport:
    family: str
    budgets: List[BudgetFit] = field(default_factory=list)
    skipped: Dict[str, str] = field(default_factory=dict)   # budget -> reason
    loss_law: Optional[PowerLawFit] = None
    param_law: Optional[PowerLawFit] = None

    def to_dict(self) -> Dict:
        return {
            "family": self.family,
            "budgets": [asdict(b) for b in self.budgets],
            "skipped": dict(self.skipped),
            "loss_law": None if self.loss_law is None else asdict(self.loss_law),
            "param_law": None if self.param_law is None else asdict(self.param_law),
        }


# ============================================================================
# Fits
# ============================================================================
def _normal_equations(design: np.ndarray, y: np.ndarray) -> np.ndarray:
    return np.linalg.solve(design.T @ design, design.T @ y)


def fit_isoflop(points: Sequence[IsoFlopPoint]) -> Tuple[float, float]:
    """Least-squares quadratic of loss on ln(params); returns the vertex (N*, L*)."""
    distinct = {p.params for p in points}
    if len(distinct) < 3:
        raise InsufficientDataError(f"need >= 3 distinct model sizes, got {len(distinct)}")
    log_n = np.log(np.array([p.params for p in points], dtype=np.float64))
    loss = np.array([p.loss for p in points], dtype=np.float64)
    center = float(log_n.mean())
    x = log_n - center
    design = np.stack([np.ones_like(x), x, x * x], axis=1)
    c0, c1, c2 = _normal_equations(design, loss)
    if c2 <= CURVATURE_TOL * max(1.0, abs(c1), abs(c0)):
        raise NoMinimumError(f"quadratic has no interior minimum (curvature {c2:.3e})")
    x_star = -c1 / (2.0 * c2)
    l_star = c0 - c1 * c1 / (4.0 * c2)
    return float(math.exp(x_star + center)), float(l_star)


def fit_power_law(pairs: Iterable[Tuple[float, float]]) -> PowerLawFit:
    """OLS of ln Y on ln C: Y = alpha * C ** beta; residual is the RMS log residual."""
    pairs = list(pairs)
    if len(pairs) < 2:
        raise InsufficientDataError(f"need >= 2 points, got {len(pairs)}")
    c = np.array([p[0] for p in pairs], dtype=np.float64)
    y = np.array([p[1] for p in pairs], dtype=np.float64)
    if (c <= 0).any() or (y <= 0).any():
        raise DomainError("power-law fit needs positive budgets and values")
    if len(set(c.tolist())) < 2:
        raise InsufficientDataError("need >= 2 distinct budgets")
    log_c, log_y = np.log(c), np.log(y)
    center = float(log_c.mean())
    x = log_c - center
    design = np.stack([np.ones_like(x), x], axis=1)
    a, beta = _normal_equations(design, log_y)
    intercept = a - beta * center
    resid = log_y - (intercept + beta * log_c)
    return PowerLawFit(alpha=float(math.exp(intercept)), beta=float(beta),
                       residual=float(np.sqrt(np.mean(resid ** 2))))


def compute_offset(reference: PowerLawFit, other: PowerLawFit) -> float:
    """Factor k such that `other` needs k times the compute of `reference` to reach equal loss."""
    beta = 0.5 * (reference.beta + other.beta)
    if abs(reference.beta - other.beta) > 1e-6:
        logger.warning(f"loss-law slopes differ ({reference.beta:.6f} vs {other.beta:.6f}); "
                       f"using mean slope {beta:.6f}")
    if beta == 0.0:
        raise NoMinimumError("flat loss laws have no compute offset")
    return float((reference.alpha / other.alpha) ** (1.0 / beta))


# ============================================================================
# FLOP accounting
# ============================================================================
def non_embedding_params(config: DenoiserConfig) -> int:
    """Denoiser parameters outside the input/output projections and position table."""
    w, r = config.width, config.mlp_ratio
    per_block = (4 + 2 * r) * w * w + 2 * w
    time_proj = config.time_dim * w + w
    return config.depth * per_block + w + time_proj


def count_flops(model: Union[DenoiserConfig, int], tokens_processed: float, training: bool, *,
                self_conditioning: bool = True, passes: int = 1,
                convention: FlopConvention = DEFAULT_CONVENTION) -> float:
    """Non-embedding FLOPs.

    inference: forward_mult * P * tokens * passes.
    training:  (forward_mult * E[passes] + backward_mult) * P * tokens, with
               E[passes] = 1 + two_pass_prob under self-conditioning, 1 otherwise.
    """
    P = non_embedding_params(model) if isinstance(model, DenoiserConfig) else int(model)
    if P <= 0 or tokens_processed <= 0:
        raise DomainError("count_flops needs positive parameters and tokens")
    if not training:
        return convention.forward_mult * P * tokens_processed * passes
    expected = 1.0 + convention.two_pass_prob if self_conditioning else 1.0
    return (convention.forward_mult * expected + convention.backward_mult) * P * tokens_processed


# ============================================================================
# Records, reports, tables
# ============================================================================
def read_records(path: Union[str, Path]) -> List[IsoFlopPoint]:
    """Parse one JSON record per line ({budget|flops, params, loss[, family]})."""
    points = []
    for n, line in enumerate(Path(path).read_text(encoding="utf-8").splitlines(), 1):
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        try:
            rec = json.loads(line)
            flops = rec["budget"] if "budget" in rec else rec["flops"]
            points.append(IsoFlopPoint(float(flops), float(rec["params"]), float(rec["loss"]),
                                       str(rec.get("family", DEFAULT_FAMILY))))
        except (KeyError, ValueError, TypeError) as exc:
            raise DomainError(f"{path}:{n}: bad scaling record: {exc}") from exc
    return points


def scaling_report(points: Sequence[IsoFlopPoint]) -> Dict[str, FamilyReport]:
    """Per family: IsoFLOP vertices per budget, then loss and parameter power laws."""
    by_family: Dict[str, Dict[float, List[IsoFlopPoint]]] = defaultdict(lambda: defaultdict(list))
    for p in points:
        by_family[p.family][p.flops].append(p)

    reports = {}
    for family in sorted(by_family):
        report = FamilyReport(family)
        for budget in sorted(by_family[family]):
            group = by_family[family][budget]
            try:
                n_star, l_star = fit_isoflop(group)
            except (InsufficientDataError, NoMinimumError) as exc:
                report.skipped[f"{budget:g}"] = str(exc)
                logger.warning(f"[{family}] budget {budget:g} skipped: {exc}")
                continue
            report.budgets.append(BudgetFit(budget, n_star, l_star, len(group)))
        if len(report.budgets) >= 2:
            report.loss_law = fit_power_law((b.budget, b.l_star) for b in report.budgets)
            report.param_law = fit_power_law((b.budget, b.n_star) for b in report.budgets)
        reports[family] = report
    return reports


def report_dict(reports: Dict[str, FamilyReport]) -> Dict:
    out = {"families": {name: r.to_dict() for name, r in reports.items()}}
    laws = {name: r.loss_law for name, r in reports.items() if r.loss_law is not None}
    if len(laws) >= 2:
        names = sorted(laws)
        ref = names[0]
        out["compute_offsets"] = {
            f"{other}/{ref}": compute_offset(laws[ref], laws[other]) for other in names[1:]}
    return out


def write_table(reports: Dict[str, FamilyReport], path: Union[str, Path]) -> Path:
    """Plot-ready CSV: one row per (family, budget) vertex."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("w", newline="", encoding="utf-8") as f:
        w = csv.writer(f)
        w.writerow(["family", "budget", "n_star", "l_star", "points"])
        for name, report in reports.items():
            for b in report.budgets:
                w.writerow([name, repr(b.budget), repr(b.n_star), repr(b.l_star), b.points])
    return path


def plot_isoflop(points: Sequence[IsoFlopPoint], reports: Dict[str, FamilyReport],
                 path: Union[str, Path]) -> Path:
    """Loss vs ln N per budget, with the fitted vertices marked."""
    import matplotlib  # lazy: only the --plot path needs it
    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    fig, ax = plt.subplots(figsize=(7, 5))
    for p_family in sorted({p.family for p in points}):
        fam = [p for p in points if p.family == p_family]
        for budget in sorted({p.flops for p in fam}):
            grp = sorted((p for p in fam if p.flops == budget), key=lambda p: p.params)
            ax.plot([p.params for p in grp], [p.loss for p in grp], "o-", alpha=0.6,
                    label=f"{p_family} C={budget:.1e}")
        report = reports.get(p_family)
        if report is not None and report.budgets:
            ax.scatter([b.n_star for b in report.budgets], [b.l_star for b in report.budgets],
                       marker="*", s=120, zorder=5)
    ax.set_xscale("log")
    ax.set_xlabel("non-embedding parameters N")
    ax.set_ylabel("loss (nats/token)")
    ax.legend(fontsize=7)
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fig.savefig(path, dpi=120, bbox_inches="tight")
    plt.close(fig)
    return path
