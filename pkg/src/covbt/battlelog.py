"""Battle-log ingestion and ranking-report formatting."""
from __future__ import annotations

import csv
from dataclasses import dataclass, field
from decimal import ROUND_HALF_UP, Decimal

import numpy as np

from .core import ComparisonDataset, DataError, pair_to_index

WINNER_TOKENS = ("model_a", "model_b", "tie")


@dataclass
class CovariateEncoder:
    """Maps raw covariate columns to a numeric matrix; categorical columns are one-hot.

    Category levels are recorded in order of first appearance in the labeled log.
    """

    kinds: dict
    categories: dict = field(default_factory=dict)

    def fit(self, rows: list[dict]) -> "CovariateEncoder":
        for name, kind in self.kinds.items():
            if kind not in ("categorical", "numeric"):
                raise DataError(f"covariate {name!r} must be categorical or numeric")
            if kind == "categorical":
                levels = []
                for r in rows:
                    if r[name] not in levels:
                        levels.append(r[name])
                self.categories[name] = levels
        return self

    @property
    def feature_names(self) -> tuple[str, ...]:
        out = []
        for name, kind in self.kinds.items():
            if kind == "numeric":
                out.append(name)
            else:
                out.extend(f"{name}={lvl}" for lvl in self.categories[name])
        return tuple(out) or ("const",)

    def transform(self, rows: list[dict], first_line: int = 2) -> np.ndarray:
        cols = []
        for name, kind in self.kinds.items():
            if kind == "numeric":
                vals = []
                for i, r in enumerate(rows):
                    try:
                        vals.append(float(r[name]))
                    except ValueError:
                        raise DataError(f"line {first_line + i}: covariate {name!r} "
                                        f"is not numeric: {r[name]!r}") from None
                cols.append(np.array(vals))
            else:
                levels = self.categories[name]
                onehot = np.zeros((len(rows), len(levels)))
                for i, r in enumerate(rows):
                    if r[name] not in levels:
                        raise DataError(
                            f"line {first_line + i}: category {r[name]!r} of {name!r} never "
                            "appears in the labeled log; the target law must be absolutely "
                            "continuous with respect to the labeled law")
                    onehot[i, levels.index(r[name])] = 1.0
                cols.append(onehot)
        if not cols:
            return np.zeros((len(rows), 1))
        return np.column_stack(cols)


@dataclass
class BattleLog:
    dataset: ComparisonDataset
    players: tuple[str, ...]
    encoder: CovariateEncoder


def _read_csv(path, required):
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.DictReader(fh)
        if reader.fieldnames is None:
            raise DataError(f"{path}: missing header row")
        missing = [c for c in required if c not in reader.fieldnames]
        if missing:
            raise DataError(f"{path}: missing columns {missing}")
        rows = []
        for row in reader:
            if None in row or any(v is None for v in row.values()):
                raise DataError(f"{path}: line {reader.line_num}: wrong number of fields")
            rows.append(row)
    return rows


def parse_battle_log(path, covariates: dict | None = None, reference: str | None = None,
                     players: list | None = None) -> BattleLog:
    """Read a model_a, model_b, winner CSV into canonical comparisons.

    The reference player gets index 1; other players follow `players` if
    given, else their order of first appearance. Outcomes are 1 when the
    lower-indexed player wins, 0.5 for ties.
    """
    covariates = dict(covariates or {})
    rows = _read_csv(path, ["model_a", "model_b", "winner", *covariates])
    if not rows:
        raise DataError(f"{path}: no comparisons")
    seen = [] if reference is None else [reference]
    for p in players or []:
        if p not in seen:
            seen.append(p)
    for i, r in enumerate(rows):
        a, b = r["model_a"].strip(), r["model_b"].strip()
        if not a or not b or a == b:
            raise DataError(f"{path}: line {i + 2}: invalid model pair ({a!r}, {b!r})")
        for p in (a, b):
            if p not in seen:
                if players:
                    raise DataError(f"{path}: line {i + 2}: player {p!r} not in configured list")
                seen.append(p)
    if reference is not None and not any(reference in (r["model_a"].strip(), r["model_b"].strip())
                                         for r in rows):
        raise DataError(f"reference player {reference!r} does not appear in the log")
    index = {p: i + 1 for i, p in enumerate(seen)}
    K = len(seen)
    pairs, ys = [], []
    for i, r in enumerate(rows):
        a, b = r["model_a"].strip(), r["model_b"].strip()
        w = r["winner"].strip()
        if w in ("model_a", a):
            ya = 1.0
        elif w in ("model_b", b):
            ya = 0.0
        elif w == "tie":
            ya = 0.5
        else:
            raise DataError(f"{path}: line {i + 2}: winner {w!r} matches neither model")
        ka, kb = index[a], index[b]
        if ka < kb:
            pairs.append(pair_to_index((ka, kb), K))
            ys.append(ya)
        else:
            pairs.append(pair_to_index((kb, ka), K))
            ys.append(1.0 - ya)
    enc = CovariateEncoder(covariates).fit(rows)
    X = enc.transform(rows)
    ds = ComparisonDataset(K, X, pairs, ys, None, enc.feature_names)
    return BattleLog(ds, tuple(seen), enc)


def parse_unlabeled(path, encoder: CovariateEncoder) -> np.ndarray:
    rows = _read_csv(path, list(encoder.kinds))
    if not rows:
        raise DataError(f"{path}: no unlabeled records")
    return encoder.transform(rows)


def round_half_up(x: float, places: int = 2) -> str:
    q = Decimal(1).scaleb(-places)
    return str(Decimal(repr(float(x))).quantize(q, rounding=ROUND_HALF_UP))


def format_row(estimate: float, std: float, lower: float, upper: float, places: int = 2):
    """Printed (estimate, std, CI) strings; the interval uses unrounded inputs."""
    return (round_half_up(estimate, places), round_half_up(std, places),
            f"({round_half_up(lower, places)}, {round_half_up(upper, places)})")
