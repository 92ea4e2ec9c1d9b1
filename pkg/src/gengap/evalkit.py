"""Cross-validation folds, metrics and table-shaped reports for GGPs."""

from __future__ import annotations

import csv
import hashlib
import io
import logging
from collections import defaultdict
from dataclasses import asdict, dataclass, field
from typing import Sequence

import numpy as np

from gengap import ggp
from gengap.ggp import GgpExample

log = logging.getLogger(__name__)

REGIMES = ("same_dist", "unseen_hparams", "unseen_datasets")
SCOPES = ("per_dataset", "single_model")
LABEL_MODES = ("gap", "test_acc")
NUM_FOLDS = 5

# the five (scope, regime) cells of the results table, in column order
TABLE_CELLS = (
    ("per_dataset", "same_dist"),
    ("per_dataset", "unseen_hparams"),
    ("single_model", "same_dist"),
    ("single_model", "unseen_hparams"),
    ("single_model", "unseen_datasets"),
)
SCOPE_TITLES = {"per_dataset": "One model per dataset", "single_model": "Single model"}
REGIME_TITLES = {"same_dist": "Same dist.", "unseen_hparams": "Unseen hparams",
                 "unseen_datasets": "Unseen datasets"}
FAMILY_TITLES = {"linear": "Linear", "dnn": "DNN", "rnn": "RNN"}


class UndefinedMetricError(ValueError):
    """R^2 is undefined when the labels have zero variance."""


def r_squared(predictions, labels) -> float:
    p = np.asarray(predictions, dtype=np.float64)
    g = np.asarray(labels, dtype=np.float64)
    if p.shape != g.shape:
        raise ValueError(f"length mismatch: {p.shape} vs {g.shape}")
    if g.size < 2:
        raise ValueError("R^2 needs at least two points")
    total = np.sum((g - g.mean()) ** 2)
    if total == 0:
        raise UndefinedMetricError("labels are all identical")
    return float(1.0 - np.sum((p - g) ** 2) / total)


def l1_loss(predictions, labels) -> float:
    p = np.asarray(predictions, dtype=np.float64)
    g = np.asarray(labels, dtype=np.float64)
    if p.shape != g.shape:
        raise ValueError(f"length mismatch: {p.shape} vs {g.shape}")
    if g.size == 0:
        raise ValueError("L1 loss of empty arrays is undefined")
    return float(np.mean(np.abs(p - g)))


def _normalize(name: str) -> str:
    return name.replace("-", "_")


@dataclass
class FoldPlan:
    """``folds[i]`` holds the net_ids tested in fold ``i``; ``keys[i]`` names it."""

    regime: str
    scope: str
    folds: list[frozenset[int]]
    keys: list

    def train_ids(self, i: int) -> frozenset[int]:
        return frozenset().union(*(f for j, f in enumerate(self.folds) if j != i))


def block_partition(ids: Sequence, num_blocks: int = NUM_FOLDS) -> list[list]:
    """Split sorted ids into contiguous blocks; larger blocks go last.

    27 ids give blocks of (5, 5, 5, 6, 6).
    """
    ids = sorted(set(ids))
    k = min(num_blocks, len(ids))
    base, extra = divmod(len(ids), k)
    sizes = [base] * (k - extra) + [base + 1] * extra
    blocks, start = [], 0
    for size in sizes:
        blocks.append(ids[start:start + size])
        start += size
    return blocks


def make_folds(examples: Sequence[GgpExample], regime: str, scope: str) -> FoldPlan:
    regime, scope = _normalize(regime), _normalize(scope)
    if regime not in REGIMES:
        raise ValueError(f"unknown regime {regime!r}")
    if scope not in SCOPES:
        raise ValueError(f"unknown scope {scope!r}")
    if regime == "unseen_datasets" and scope == "per_dataset":
        raise ValueError("unseen_datasets needs the single_model scope")

    if regime == "same_dist":
        keys = sorted({ex.data_seed for ex in examples})
        key_of = {k: [k] for k in keys}
        attr = "data_seed"
    else:
        attr = "hparam_id" if regime == "unseen_hparams" else "variation_id"
        blocks = block_partition([getattr(ex, attr) for ex in examples])
        keys = list(range(len(blocks)))
        key_of = {i: b for i, b in enumerate(blocks)}
    fold_index = {v: i for i, k in enumerate(keys) for v in key_of[k]}
    folds: list[set[int]] = [set() for _ in keys]
    for ex in examples:
        folds[fold_index[getattr(ex, attr)]].add(ex.net_id)
    return FoldPlan(regime, scope, [frozenset(f) for f in folds], keys)


def fold_violations(examples: Sequence[GgpExample], plan: FoldPlan) -> int:
    """Count group ids that sit on both sides of a train/test split."""
    attr = {"same_dist": "data_seed", "unseen_hparams": "hparam_id",
            "unseen_datasets": "variation_id"}[plan.regime]
    by_id = {ex.net_id: ex for ex in examples}
    violations = 0
    all_ids = set().union(*plan.folds) if plan.folds else set()
    for i, test in enumerate(plan.folds):
        train = all_ids - test
        test_groups = {getattr(by_id[n], attr) for n in test}
        train_groups = {getattr(by_id[n], attr) for n in train}
        violations += len(test_groups & train_groups)
    covered = sum(len(f) for f in plan.folds)
    if covered != len(by_id) or len(all_ids) != len(by_id):
        violations += 1
    return violations


@dataclass
class EvalReport:
    scope: str
    regime: str
    family: str
    label_mode: str
    r2: float | None
    l1: float | None
    n: int
    per_fold: list[dict] = field(default_factory=list)
    skipped: list[dict] = field(default_factory=list)
    excluded_diverged: int = 0
    rank_deficient_fits: int = 0
    predictions: list[float] = field(default_factory=list, repr=False)
    labels: list[float] = field(default_factory=list, repr=False)
    net_ids: list[int] = field(default_factory=list, repr=False)

    def to_json(self, with_points: bool = False) -> dict:
        d = asdict(self)
        if not with_points:
            for key in ("predictions", "labels", "net_ids"):
                d.pop(key)
        return d

    def calibration_csv(self) -> str:
        buf = io.StringIO()
        writer = csv.writer(buf, lineterminator="\n")
        writer.writerow(["net_id", "prediction", "label"])
        for row in zip(self.net_ids, self.predictions, self.labels):
            writer.writerow(row)
        return buf.getvalue()


def task_mode_for(scope: str) -> str:
    return "dataset_dependent" if _normalize(scope) == "per_dataset" else "dataset_independent"


def lambda_for(scope: str, family: str) -> float:
    if family == "linear":
        return ggp.LINEAR_LAMBDA
    return ggp.MODE_LAMBDA[task_mode_for(scope)]


def _fit_seed(*parts) -> int:
    digest = hashlib.sha256(":".join(map(str, parts)).encode()).digest()
    return int.from_bytes(digest[:8], "little") >> 1


def _min_train(family: str) -> int:
    return ggp.NUM_FEATURES + 1 if family == "linear" else 1


def _safe_r2(p, g) -> float | None:
    try:
        return r_squared(p, g)
    except ValueError:
        return None


def evaluate_regime(examples: Sequence[GgpExample], regime: str, scope: str, family: str,
                    label_mode: str = "gap", steps: int | None = None,
                    excluded_diverged: int = 0) -> EvalReport:
    """Cross-validated predictions pooled into single arrays before scoring."""
    regime, scope = _normalize(regime), _normalize(scope)
    if family not in ggp.FAMILIES:
        raise ValueError(f"unknown family {family!r}")
    if label_mode not in LABEL_MODES:
        raise ValueError(f"unknown label mode {label_mode!r}")
    if not examples:
        raise ValueError("no examples to evaluate")
    task_mode = task_mode_for(scope)

    if scope == "per_dataset":
        groups: dict[int, list[GgpExample]] = defaultdict(list)
        for ex in examples:
            groups[ex.variation_id].append(ex)
    else:
        groups = {-1: list(examples)}

    pooled: dict = defaultdict(lambda: {"p": [], "g": [], "ids": []})
    skipped, rank_deficient = [], 0
    for group_id in sorted(groups):
        members = groups[group_id]
        plan = make_folds(members, regime, scope)
        by_id = {ex.net_id: ex for ex in members}
        for i, key in enumerate(plan.keys):
            test = [by_id[n] for n in sorted(plan.folds[i])]
            train = [by_id[n] for n in sorted(plan.train_ids(i))]
            if len(train) < _min_train(family) or not test:
                msg = {"group": group_id, "fold": key, "n_train": len(train),
                       "n_test": len(test)}
                log.warning("skipping fold %s", msg)
                skipped.append(msg)
                continue
            model = ggp.fit(family, train, task_mode, steps=steps,
                            seed=_fit_seed(scope, regime, family, label_mode, group_id, key))
            rank_deficient += int(model.meta.get("rank_deficient", False))
            preds = ggp.predict_many(model, [ex.signature for ex in test])
            cell = pooled[key]
            cell["p"].extend(preds.tolist())
            cell["g"].extend(ex.label for ex in test)
            cell["ids"].extend(ex.net_id for ex in test)

    per_fold, P, G, ids = [], [], [], []
    for key in sorted(pooled):
        cell = pooled[key]
        per_fold.append({"fold": key, "n": len(cell["g"]),
                         "r2": _safe_r2(cell["p"], cell["g"]),
                         "l1": l1_loss(cell["p"], cell["g"])})
        P.extend(cell["p"])
        G.extend(cell["g"])
        ids.extend(cell["ids"])
    return EvalReport(
        scope=scope, regime=regime, family=family, label_mode=label_mode,
        r2=_safe_r2(P, G), l1=l1_loss(P, G) if G else None, n=len(G),
        per_fold=per_fold, skipped=skipped, excluded_diverged=excluded_diverged,
        rank_deficient_fits=rank_deficient, predictions=P, labels=G, net_ids=ids)


def format_table(reports: Sequence[EvalReport], title: str = "") -> str:
    """Aligned text table: model rows x (scope, regime) columns, R^2 and L1."""
    cells = {(r.family, r.scope, r.regime): r for r in reports}
    families = [f for f in ggp.FAMILIES if any(r.family == f for r in reports)]
    head1 = ["", *[SCOPE_TITLES[s] for s, _ in TABLE_CELLS]]
    head2 = ["", *[REGIME_TITLES[g] for _, g in TABLE_CELLS]]
    col_w = 21
    lines = []
    if title:
        lines.append(title)
    lines.append(f"{'':<11}|" + "|".join(f"{h:^{col_w}}" for h in head1[1:]))
    lines.append(f"{'':<11}|" + "|".join(f"{h:^{col_w}}" for h in head2[1:]))
    lines.append(f"{'Model type':<11}|" + "|".join(f"{'R2':>10} {'L1 loss':>10}" for _ in TABLE_CELLS))
    lines.append("-" * (11 + (col_w + 1) * len(TABLE_CELLS)))
    for fam in families:
        row = [f"{FAMILY_TITLES[fam]:<11}"]
        for scope, regime in TABLE_CELLS:
            r = cells.get((fam, scope, regime))
            r2 = "-" if r is None or r.r2 is None else f"{r.r2:.3f}"
            l1 = "-" if r is None or r.l1 is None else f"{r.l1:.4f}"
            row.append(f"{r2:>10} {l1:>10}")
        lines.append(row[0] + "|" + "|".join(row[1:]))
    return "\n".join(lines) + "\n"
