"""Brixia score utilities: derived scores, consensus, rater agreement."""
from __future__ import annotations

import csv
import itertools
from collections import Counter
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np

from .tensor import ContractError

LO_COEFFICIENTS = (0.31, 0.15)  # coef, intercept of the published Global Score -> LO fit


def as_score(s) -> np.ndarray:
    a = np.asarray(s, dtype=np.int64)
    if a.shape == (6,):
        a = np.stack([a[:3], a[3:]], axis=1)
    if a.shape != (3, 2):
        raise ContractError(f"a Brixia score is a 3x2 grid, got shape {a.shape}")
    if a.min() < 0 or a.max() > 3:
        raise ContractError("Brixia region values must lie in {0..3}")
    return a


def global_score(s) -> int:
    return int(as_score(s).sum())


def flip_score(s) -> np.ndarray:
    """Swap lungs (A<->D, B<->E, C<->F), as a horizontal image flip does."""
    return as_score(s)[:, ::-1].copy()


def to_t_score(s) -> tuple[np.ndarray, int]:
    t = (as_score(s) > 0).astype(np.int64)
    return t, int(t.sum())


@dataclass(frozen=True)
class LoRegression:
    coef: float
    intercept: float


def fit_lo(pairs) -> LoRegression:
    """Least-squares line LO = coef * global + intercept."""
    arr = np.asarray(pairs, dtype=np.float64)
    if arr.ndim != 2 or arr.shape[0] < 2:
        raise ContractError("fit_lo needs at least two (global, LO) pairs")
    x, y = arr[:, 0], arr[:, 1]
    dx = x - x.mean()
    sxx = float((dx * dx).sum())
    if sxx == 0:
        raise ContractError("fit_lo: global scores have zero variance")
    coef = float((dx * (y - y.mean())).sum() / sxx)
    return LoRegression(coef, float(y.mean() - coef * x.mean()))


def apply_lo(g, reg: LoRegression = LoRegression(*LO_COEFFICIENTS)) -> float:
    return reg.coef * float(g) + reg.intercept


# -- consensus -----------------------------------------------------------------------

@dataclass(frozen=True)
class Rating:
    rater: str
    seniority: int  # 1 = most senior
    score: np.ndarray


def _check_panel(panel: Sequence[Rating]) -> None:
    if not panel:
        raise ContractError("a rater panel needs at least one rating")
    if len({r.rater for r in panel}) != len(panel):
        raise ContractError("rater ids must be distinct")
    if len({r.seniority for r in panel}) != len(panel):
        raise ContractError("seniority ranks must be distinct")


def consensus_value(votes: Sequence[int], seniorities: Sequence[int]) -> int:
    """Majority vote; ties go to the value of the most senior rater among the tied voters."""
    counts = Counter(votes)
    top = max(counts.values())
    tied = {v for v, c in counts.items() if c == top}
    if len(tied) == 1:
        return next(iter(tied))
    best = min((s, v) for v, s in zip(votes, seniorities) if v in tied)
    return best[1]


def consensus(panel: Sequence[Rating]) -> np.ndarray:
    """Consensus score, decided independently per region."""
    _check_panel(panel)
    scores = np.stack([as_score(r.score) for r in panel])
    sen = [r.seniority for r in panel]
    out = np.zeros((3, 2), dtype=np.int64)
    for i, j in itertools.product(range(3), range(2)):
        out[i, j] = consensus_value(scores[:, i, j].tolist(), sen)
    return out


# -- agreement -----------------------------------------------------------------------

def cohen_kappa(r1, r2, n_categories: int = 4) -> float | None:
    """Two-rater kappa; None when expected agreement is 1 (undefined)."""
    a = np.asarray(r1, dtype=np.int64).ravel()
    b = np.asarray(r2, dtype=np.int64).ravel()
    if a.shape != b.shape or a.size == 0:
        raise ContractError("cohen_kappa: rating vectors must be non-empty and equally long")
    k = max(n_categories, int(max(a.max(), b.max())) + 1)
    table = np.zeros((k, k))
    np.add.at(table, (a, b), 1)
    table /= table.sum()
    p_o = np.trace(table)
    p_e = float(table.sum(axis=1) @ table.sum(axis=0))
    if np.isclose(p_e, 1.0):
        return None
    return float((p_o - p_e) / (1 - p_e))


def fleiss_kappa(ratings, n_categories: int = 4) -> float | None:
    """Multi-rater kappa for an (items x raters) integer matrix."""
    r = np.asarray(ratings, dtype=np.int64)
    if r.ndim != 2 or r.shape[1] < 2:
        raise ContractError("fleiss_kappa needs an items x raters matrix with at least two raters")
    n_items, n_raters = r.shape
    k = max(n_categories, int(r.max()) + 1)
    counts = np.zeros((n_items, k))
    for j in range(n_raters):
        counts[np.arange(n_items), r[:, j]] += 1
    p_i = ((counts * counts).sum(axis=1) - n_raters) / (n_raters * (n_raters - 1))
    p_bar = p_i.mean()
    p_j = counts.sum(axis=0) / (n_items * n_raters)
    p_e = float((p_j * p_j).sum())
    if np.isclose(p_e, 1.0):
        return None
    return float((p_bar - p_e) / (1 - p_e))


def read_rater_csv(path) -> dict[str, list[Rating]]:
    """Rater file ``id,rater,seniority,A..F`` -> panels keyed by image id."""
    panels: dict[str, list[Rating]] = {}
    with open(path, newline="", encoding="utf-8") as fh:
        rd = csv.DictReader(fh)
        expected = ["id", "rater", "seniority", "A", "B", "C", "D", "E", "F"]
        if rd.fieldnames != expected:
            raise ValueError(f"{path}: header must be {','.join(expected)}")
        for row in rd:
            score = as_score([int(row[c]) for c in "ABCDEF"])
            panels.setdefault(row["id"], []).append(Rating(row["rater"], int(row["seniority"]), score))
    for panel in panels.values():
        _check_panel(panel)
    return panels


def write_rater_csv(path, panels: dict[str, list[Rating]]) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        wr = csv.writer(fh, lineterminator="\n")
        wr.writerow(["id", "rater", "seniority", "A", "B", "C", "D", "E", "F"])
        for img_id, panel in panels.items():
            for r in panel:
                s = as_score(r.score)
                wr.writerow([img_id, r.rater, r.seniority, *s[:, 0].tolist(), *s[:, 1].tolist()])


def agreement_report(panels: dict[str, list[Rating]], out_path, extra: dict[str, dict[str, np.ndarray]] | None = None) -> list[list]:
    """Pairwise rater MAE/SD plus every rater (and extra virtual raters) vs consensus.

    Writes CSV ``rater_i,rater_j,MAE,SD``; returns the rows.
    """
    ids = sorted(panels)
    raters = sorted({r.rater for p in panels.values() for r in p})
    by = {rt: {} for rt in raters}
    for i in ids:
        for r in panels[i]:
            by[r.rater][i] = as_score(r.score)
    for name, scores in (extra or {}).items():
        by[name] = {i: as_score(s) for i, s in scores.items()}
    cons = {i: consensus(panels[i]) for i in ids}
    rows = []
    names = list(by)
    for a, b in itertools.combinations(names, 2):
        common = sorted(set(by[a]) & set(by[b]))
        if not common:
            continue
        err = np.abs(np.stack([by[a][i] for i in common]) - np.stack([by[b][i] for i in common]))
        rows.append([a, b, float(err.mean()), float(err.std())])
    for a in names:
        common = sorted(set(by[a]) & set(cons))
        err = np.abs(np.stack([by[a][i] for i in common]) - np.stack([cons[i] for i in common]))
        rows.append([a, "consensus", float(err.mean()), float(err.std())])
    Path(out_path).parent.mkdir(parents=True, exist_ok=True)
    with open(out_path, "w", newline="", encoding="utf-8") as fh:
        wr = csv.writer(fh, lineterminator="\n")
        wr.writerow(["rater_i", "rater_j", "MAE", "SD"])
        for row in rows:
            wr.writerow([row[0], row[1], f"{row[2]:.6f}", f"{row[3]:.6f}"])
    return rows
