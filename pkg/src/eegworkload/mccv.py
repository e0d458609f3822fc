"""Grouped and subsampled Monte Carlo cross-validation.

One iteration:

1. per participant: hold out whole blocks for testing, downsample every class
   to the minority count on each side, and z-score both sides with the
   training side's mean and (population) SD;
2. downsample every (participant, label) cell to the smallest cell, train and
   test separately;
3. train a forest and score the test side, overall and per participant.
"""

from __future__ import annotations

import json
import logging
import math
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
import pandas as pd
from scipy import stats

from .dataset import binary_class
from .forest import ClassificationReport, ForestParams, predict, report, train
from .spectral import DEFAULT_BANDS, TASKS

logger = logging.getLogger(__name__)

MAX_SPLIT_RETRIES = 10
FAILURE_BUDGET = 0.05


class MCCVError(RuntimeError):
    pass


class IterationError(MCCVError):
    pass


@dataclass(frozen=True)
class Dataset:
    """Immutable labelled samples for one CV mode.

    ``group`` identifies the block a sample came from; ``stratum`` is the
    unit inside which blocks are drawn for testing (the participant in
    within-task mode, participant and task in cross-task mode).
    """

    X: np.ndarray
    target: np.ndarray
    participant: np.ndarray
    group: np.ndarray
    stratum: np.ndarray
    sample_id: np.ndarray
    classes: tuple
    mode: str
    feature_names: tuple

    def __len__(self):
        return len(self.target)


def parse_mode(mode: str):
    """``"cross"`` or ``"within:<task>"`` -> (kind, task)."""
    if mode == "cross":
        return "cross", None
    kind, _, task = mode.partition(":")
    if kind != "within" or task not in TASKS:
        raise ValueError(f"mode must be 'cross' or 'within:<task>' with task in {TASKS}, got {mode!r}")
    return "within", task


def build_dataset(features: pd.DataFrame, mode: str, bands=DEFAULT_BANDS.names) -> Dataset:
    kind, task = parse_mode(mode)
    df = features
    if kind == "within":
        df = df[df["task"] == task]
        target = np.array([binary_class(task, int(v)) for v in df["workload"]], dtype=str)
        stratum = df["participant"].astype(str).to_numpy()
    else:
        target = df["task"].astype(str).to_numpy()
        stratum = (df["participant"].astype(str) + "|" + df["task"].astype(str)).to_numpy()
    if df.empty:
        raise MCCVError(f"no samples for mode {mode}")
    group = (df["participant"].astype(str) + "|" + df["task"].astype(str) + "|"
             + df["block"].astype(str)).to_numpy()
    X = df[list(bands)].to_numpy(dtype=np.float64)
    if not np.all(np.isfinite(X)):
        raise MCCVError("non-finite features")
    return Dataset(X, np.asarray(target, dtype=str), df["participant"].astype(str).to_numpy(),
                   group, stratum, df.index.to_numpy(), tuple(sorted(set(target))), mode, tuple(bands))


# ---------------------------------------------------------------------------
# steps

def n_test_blocks(n_blocks: int, test_fraction: float = 0.2) -> int:
    return max(1, math.ceil(test_fraction * n_blocks - 1e-12))


def split_blocks(blocks, test_fraction: float, rng: np.random.Generator):
    """Choose test blocks; returns ``(train_blocks, test_blocks)`` or None for < 2 blocks."""
    blocks = sorted(set(blocks))
    if len(blocks) < 2:
        return None
    k = n_test_blocks(len(blocks), test_fraction)
    test = set(rng.choice(len(blocks), size=k, replace=False).tolist())
    return ([b for i, b in enumerate(blocks) if i not in test],
            [b for i, b in enumerate(blocks) if i in test])


def subsample_within(ids: np.ndarray, keys: np.ndarray, rng: np.random.Generator) -> np.ndarray:
    """Downsample every key to the minority count, without replacement.

    Returns the selected ids sorted.
    """
    ids = np.asarray(ids)
    keys = np.asarray(keys)
    if ids.size == 0:
        return ids
    uniq, counts = np.unique(keys, return_counts=True)
    n = counts.min()
    out = [rng.choice(ids[keys == u], size=n, replace=False) for u in uniq]
    return np.sort(np.concatenate(out))


@dataclass(frozen=True)
class ScalerParams:
    mean: np.ndarray
    scale: np.ndarray
    degenerate: np.ndarray


def fit_scaler(train: np.ndarray) -> ScalerParams:
    train = np.asarray(train, dtype=np.float64)
    if len(train) == 0:
        raise ValueError("cannot fit a scaler on no rows")
    mu = train.mean(axis=0)
    sd = train.std(axis=0)
    degenerate = ~(sd > 0)
    return ScalerParams(mu, np.where(degenerate, 1.0, sd), degenerate)


def apply_scaler(params: ScalerParams, X: np.ndarray) -> np.ndarray:
    return (np.asarray(X, dtype=np.float64) - params.mean) / params.scale


def fit_apply_scaler(train, test):
    params = fit_scaler(train)
    return apply_scaler(params, train), apply_scaler(params, test), params


def balance_global(ids, participants, labels, rng: np.random.Generator, per: str = "global"):
    """Downsample (participant, label) cells.

    ``per="global"`` uses the smallest cell overall; ``per="participant"``
    uses each participant's smallest cell.
    """
    ids = np.asarray(ids)
    cells = pd.Series(ids).groupby([np.asarray(participants), np.asarray(labels)], sort=True)
    sizes = cells.size()
    if per not in ("global", "participant"):
        raise ValueError("per must be 'global' or 'participant'")
    out = []
    for (p, lab), members in cells:
        n = sizes.min() if per == "global" else sizes.loc[p].min()
        out.append(rng.choice(members.to_numpy(), size=n, replace=False))
    return np.sort(np.concatenate(out)) if out else ids[:0]


# ---------------------------------------------------------------------------
# iteration

@dataclass
class PreparedSplit:
    train_idx: np.ndarray   # row positions into the dataset
    test_idx: np.ndarray
    X_train: np.ndarray     # scaled
    X_test: np.ndarray
    scalers: dict           # participant -> ScalerParams
    test_groups: dict       # participant -> list of test block ids
    skipped: list


def prepare_split(ds: Dataset, rng: np.random.Generator, test_fraction: float = 0.2,
                  balance: str = "global") -> PreparedSplit:
    """Steps 1 and 2 of an iteration; no model is trained."""
    rows = np.arange(len(ds))
    required = set(ds.classes)
    tr_parts, te_parts, skipped = [], [], []
    scaled_tr = np.zeros_like(ds.X)
    scaled_te = np.zeros_like(ds.X)
    scalers, test_groups = {}, {}
    for p in sorted(set(ds.participant)):
        prow = rows[ds.participant == p]
        for attempt in range(MAX_SPLIT_RETRIES):
            tr_blocks, te_blocks = [], []
            ok = True
            for s in sorted(set(ds.stratum[prow])):
                srow = prow[ds.stratum[prow] == s]
                split = split_blocks(ds.group[srow], test_fraction, rng)
                if split is None:
                    ok = False
                    break
                tr_blocks += split[0]
                te_blocks += split[1]
            if not ok:
                break
            tr = prow[np.isin(ds.group[prow], tr_blocks)]
            te = prow[np.isin(ds.group[prow], te_blocks)]
            if set(ds.target[tr]) >= required and set(ds.target[te]) >= required:
                break
        else:
            ok = False
        if not ok:
            logger.warning("participant %s skipped this iteration (blocks or classes missing)", p)
            skipped.append(p)
            continue
        tr = subsample_within(tr, ds.target[tr], rng)
        te = subsample_within(te, ds.target[te], rng)
        sc = fit_scaler(ds.X[tr])
        scaled_tr[tr] = apply_scaler(sc, ds.X[tr])
        scaled_te[te] = apply_scaler(sc, ds.X[te])
        scalers[p] = sc
        test_groups[p] = sorted(te_blocks)
        tr_parts.append(tr)
        te_parts.append(te)
    if not tr_parts:
        raise IterationError("every participant was skipped")
    tr = np.concatenate(tr_parts)
    te = np.concatenate(te_parts)
    tr = balance_global(tr, ds.participant[tr], ds.target[tr], rng, balance)
    te = balance_global(te, ds.participant[te], ds.target[te], rng, balance)
    return PreparedSplit(tr, te, scaled_tr[tr], scaled_te[te], scalers, test_groups, skipped)


@dataclass
class IterationResult:
    index: int
    seed: list
    report: ClassificationReport
    participants: dict  # participant -> ClassificationReport
    n_train: int
    n_test: int
    skipped: list


def iteration_rng(master_seed: int, index: int) -> np.random.Generator:
    return np.random.default_rng([int(master_seed), int(index)])


def run_iteration(ds: Dataset, seed, params: ForestParams = ForestParams(), test_fraction: float = 0.2,
                  balance: str = "global", index: int = 0) -> IterationResult:
    rng = np.random.default_rng(seed)
    split = prepare_split(ds, rng, test_fraction, balance)
    forest_seed = int(rng.integers(0, 2**31 - 1))
    model = train(split.X_train, ds.target[split.train_idx],
                  ForestParams(**{**asdict(params), "seed": forest_seed}))
    y_pred = predict(model, split.X_test)
    y_true = ds.target[split.test_idx]
    per = {}
    part = ds.participant[split.test_idx]
    for p in sorted(set(part)):
        sel = part == p
        per[p] = report(y_true[sel], y_pred[sel], labels=ds.classes)
    return IterationResult(index, list(np.atleast_1d(seed).tolist()),
                           report(y_true, y_pred, labels=ds.classes), per,
                           len(split.train_idx), len(split.test_idx), split.skipped)


def _run_one(args):
    ds, master_seed, i, params, test_fraction, balance = args
    try:
        return run_iteration(ds, [int(master_seed), i], params, test_fraction, balance, index=i)
    except (IterationError, ValueError) as exc:
        return exc


@dataclass
class MCCVResult:
    mode: str
    classes: tuple
    iterations: list = field(repr=False)
    failures: list = field(default_factory=list)

    def macro_f1s(self) -> np.ndarray:
        return np.array([it.report.macro_f1 for it in self.iterations])

    def class_table(self) -> pd.DataFrame:
        """Per-class metrics averaged over iterations, plus the macro row."""
        rows = []
        for k, c in enumerate(self.classes):
            rows.append({
                "class": c,
                "precision": np.mean([it.report.precision[k] for it in self.iterations]),
                "recall": np.mean([it.report.recall[k] for it in self.iterations]),
                "f1": np.mean([it.report.f1[k] for it in self.iterations]),
                "support": np.mean([it.report.support[k] for it in self.iterations]),
            })
        rows.append({
            "class": "macro avg",
            "precision": np.mean([it.report.macro_precision for it in self.iterations]),
            "recall": np.mean([it.report.macro_recall for it in self.iterations]),
            "f1": float(self.macro_f1s().mean()),
            "support": np.mean([it.report.n_samples for it in self.iterations]),
        })
        return pd.DataFrame(rows)

    @property
    def mean_macro_f1(self) -> float:
        return float(self.macro_f1s().mean())

    @property
    def ci_half_width(self) -> float | None:
        """95% t-interval half-width of the mean macro F1; None for one iteration."""
        f = self.macro_f1s()
        if len(f) < 2:
            return None
        return float(stats.t.ppf(0.975, len(f) - 1) * f.std(ddof=1) / math.sqrt(len(f)))

    def iteration_table(self) -> pd.DataFrame:
        rows = []
        for it in self.iterations:
            row = {"iteration": it.index, "macro_precision": it.report.macro_precision,
                   "macro_recall": it.report.macro_recall, "macro_f1": it.report.macro_f1,
                   "n_train": it.n_train, "n_test": it.n_test, "skipped": ";".join(it.skipped)}
            for k, c in enumerate(self.classes):
                row[f"f1_{c}"] = it.report.f1[k]
            rows.append(row)
        return pd.DataFrame(rows)

    def participant_table(self) -> pd.DataFrame:
        acc = {}
        for it in self.iterations:
            for p, r in it.participants.items():
                acc.setdefault(p, []).append(r)
        rows = []
        for p in sorted(acc):
            rs = acc[p]
            rows.append({"participant": p, "iterations": len(rs),
                         "macro_precision": np.mean([r.macro_precision for r in rs]),
                         "macro_recall": np.mean([r.macro_recall for r in rs]),
                         "macro_f1": np.mean([r.macro_f1 for r in rs]),
                         "support": np.mean([r.n_samples for r in rs])})
        return pd.DataFrame(rows)

    def summary(self) -> dict:
        ci = self.ci_half_width
        table = self.class_table()
        return {
            "mode": self.mode,
            "classes": list(self.classes),
            "iterations": len(self.iterations),
            "failed_iterations": len(self.failures),
            "mean_macro_f1": self.mean_macro_f1,
            "ci95_half_width": ci,
            "ci_defined": ci is not None,
            "mean_train_size": float(np.mean([it.n_train for it in self.iterations])),
            "mean_test_size": float(np.mean([it.n_test for it in self.iterations])),
            "table": table.to_dict(orient="records"),
        }

    def write(self, out_dir) -> None:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        (out / "summary.json").write_text(json.dumps(self.summary(), indent=2, sort_keys=True))
        self.class_table().to_csv(out / "metrics.csv", index=False, float_format="%.17g")
        self.iteration_table().to_csv(out / "iterations.csv", index=False, float_format="%.17g")
        self.participant_table().to_csv(out / "participants.csv", index=False, float_format="%.17g")


def run_mccv(ds: Dataset, iterations: int = 1000, master_seed: int = 0,
             params: ForestParams = ForestParams(), test_fraction: float = 0.2,
             balance: str = "global", n_jobs: int = 1) -> MCCVResult:
    """Repeat :func:`run_iteration` with seeds derived from ``(master_seed, i)``.

    Failed iterations are logged; more than 5% failures aborts the run.
    Results do not depend on ``n_jobs``.
    """
    if iterations < 1:
        raise ValueError("iterations must be >= 1")
    jobs = [(ds, master_seed, i, params, test_fraction, balance) for i in range(iterations)]
    if n_jobs == 1:
        results = map(_run_one, jobs)
    else:
        pool = ProcessPoolExecutor(max_workers=n_jobs)
        results = pool.map(_run_one, jobs, chunksize=max(1, iterations // (4 * n_jobs)))
    done, failures = [], []
    budget = FAILURE_BUDGET * iterations
    try:
        for i, res in enumerate(results):
            if isinstance(res, Exception):
                logger.warning("iteration %d failed: %s", i, res)
                failures.append((i, str(res)))
                if len(failures) > budget:
                    raise MCCVError(f"{len(failures)} of {iterations} iterations failed; aborting")
            else:
                done.append(res)
    finally:
        if n_jobs != 1:
            pool.shutdown(cancel_futures=True)
    if not done:
        raise MCCVError("no iteration succeeded")
    return MCCVResult(ds.mode, ds.classes, done, failures)
