"""Event logs, manifests and the workload labelling rules."""

from __future__ import annotations

import json
import logging
import math
import warnings
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
import pandas as pd

from .spectral import DEFAULT_BANDS, TASKS, EpochLabel

logger = logging.getLogger(__name__)

ROTATION_LEVELS = {0: 0, 50: 1, 100: 2, 150: 3}
STROOP_LEVELS = {0: 0, 1: 1, "congruent": 0, "incongruent": 1}
CHESS_TIME_LIMIT = 30.0


class DataError(ValueError):
    """Malformed or inconsistent input data."""


class LabelingError(DataError):
    """A trial cannot be assigned a workload level."""


@dataclass(frozen=True)
class TrialEvent:
    participant: str
    task: str
    block: int
    trial: int
    onset: float
    offset: float
    difficulty: object  # n-back n, rotation degrees, stroop congruency, chess rating
    correct: bool = False
    rt: float | None = None

    def __post_init__(self):
        if self.task not in TASKS:
            raise DataError(f"unknown task {self.task!r}")
        if not self.onset < self.offset:
            raise DataError(f"trial {self.participant}/{self.task}/{self.trial}: onset must precede offset")

    @classmethod
    def from_dict(cls, d) -> "TrialEvent":
        rt = d.get("rt")
        return cls(str(d["participant"]), d["task"], int(d["block"]), int(d["trial"]),
                   float(d["onset"]), float(d["offset"]), d["difficulty"],
                   bool(d.get("correct", False)), None if rt is None else float(rt))


def read_events_jsonl(path) -> list[TrialEvent]:
    events = []
    for lineno, line in enumerate(Path(path).read_text().splitlines(), 1):
        if not line.strip():
            continue
        try:
            events.append(TrialEvent.from_dict(json.loads(line)))
        except (json.JSONDecodeError, KeyError, TypeError) as exc:
            raise DataError(f"{path}:{lineno}: {exc}") from exc
    return events


def write_events_jsonl(events, path) -> None:
    with Path(path).open("w") as fh:
        for ev in events:
            fh.write(json.dumps(asdict(ev)) + "\n")


@dataclass(frozen=True)
class WorkloadLabel:
    level: int
    binary: str  # "low" | "high"


def binary_class(task: str, level: int) -> str:
    """Low/high class for a level. Stroop's two levels map one to one."""
    if task == "stroop":
        return "high" if level == 1 else "low"
    return "high" if level >= 2 else "low"


def chess_quartile_labels(ratings) -> dict:
    """Map each distinct rating a participant met to its quartile 0-3.

    Quartile boundaries are the nearest-rank 25th/50th/75th percentiles of the
    sorted distinct ratings; a rating equal to a boundary falls in the lower
    quartile.
    """
    uniq = np.unique(np.asarray(list(ratings), dtype=np.float64))
    n = len(uniq)
    if n < 4:
        raise LabelingError(f"need at least 4 distinct chess ratings, got {n}")
    bounds = [uniq[math.ceil(p * n) - 1] for p in (0.25, 0.5, 0.75)]
    return {float(r): int(sum(r > b for b in bounds)) for r in uniq}


def assign_workload(event: TrialEvent, chess_map: dict | None = None) -> WorkloadLabel:
    d = event.difficulty
    task = event.task
    try:
        if task == "nback":
            level = int(d)
            if level not in (0, 1, 2, 3) or level != d:
                raise KeyError(d)
        elif task == "rotation":
            level = ROTATION_LEVELS[int(d)] if float(d) == int(d) else ROTATION_LEVELS[d]
        elif task == "stroop":
            level = STROOP_LEVELS[d.lower() if isinstance(d, str) else int(d)]
        else:
            if chess_map is None:
                raise LabelingError("chess labels need the participant's quartile map")
            level = chess_map[float(d)]
    except (KeyError, ValueError, TypeError) as exc:
        raise LabelingError(f"{task}: unknown difficulty {d!r}") from exc
    return WorkloadLabel(level, binary_class(task, level))


def label_events(events) -> list[tuple[TrialEvent, WorkloadLabel]]:
    """Label every event, building chess quartile maps per participant."""
    events = list(events)
    chess_maps = {}
    for p in sorted({e.participant for e in events if e.task == "chess"}):
        chess_maps[p] = chess_quartile_labels(
            [float(e.difficulty) for e in events if e.participant == p and e.task == "chess"])
    return [(e, assign_workload(e, chess_maps.get(e.participant))) for e in events]


def condition_intervals(labelled, max_merge_gap: float = 1.0):
    """Merge consecutive same-condition trials of a block into labelled spans.

    Trials of one (participant, task, block, level) separated by at most
    ``max_merge_gap`` seconds (fixation, inter-trial interval) form one span.
    """
    spans = []
    ordered = sorted(labelled, key=lambda el: (el[0].participant, el[0].task, el[0].block, el[0].onset))
    for ev, lab in ordered:
        key = EpochLabel(ev.participant, ev.task, ev.block, lab.level)
        if spans and spans[-1][2] == key and ev.onset - spans[-1][1] <= max_merge_gap:
            spans[-1] = (spans[-1][0], max(spans[-1][1], ev.offset), key)
        else:
            spans.append((ev.onset, ev.offset, key))
    return spans


def behavioral_table(events) -> pd.DataFrame:
    """Per-trial behaviour with natural-log reaction time.

    Chess puzzles that reach the 30 s limit (or carry no time) are timeouts:
    scored incorrect with a null time.
    """
    rows = []
    for ev, lab in label_events(events):
        rt = ev.rt
        if rt is not None and rt < 0:
            raise DataError(f"negative reaction time in {ev.participant}/{ev.task}/{ev.trial}")
        timeout = rt is None or (ev.task == "chess" and rt >= CHESS_TIME_LIMIT)
        correct = ev.correct and not (timeout and ev.task == "chess")
        if timeout:
            rt = None
        rows.append({
            "participant": ev.participant, "task": ev.task, "block": ev.block,
            "trial": ev.trial, "workload": lab.level, "binary": lab.binary,
            "correct": bool(correct), "timeout": timeout,
            "rt_s": rt, "log_rt": None if rt is None or rt == 0 else math.log(rt),
        })
    return pd.DataFrame(rows, columns=["participant", "task", "block", "trial", "workload",
                                       "binary", "correct", "timeout", "rt_s", "log_rt"])


def export_stats_table(features: pd.DataFrame, bands=DEFAULT_BANDS.names) -> pd.DataFrame:
    """Cell means per (participant, task, block, workload) and band, long format.

    ``z`` is the cell mean standardised (population SD) within
    (participant, task, band); groups with zero variance get ``z = 0`` and
    ``degenerate = True``.
    """
    keys = ["participant", "task", "block", "workload"]
    cells = features.groupby(keys, sort=True)[list(bands)].mean().reset_index()
    long = cells.melt(id_vars=keys, value_vars=list(bands), var_name="band",
                      value_name="mean_log_power")
    band_order = {b: i for i, b in enumerate(bands)}
    long["_b"] = long["band"].map(band_order)
    long = long.sort_values(keys[:2] + ["_b"] + keys[2:]).drop(columns="_b").reset_index(drop=True)
    grp = long.groupby(["participant", "task", "band"])["mean_log_power"]
    mu = grp.transform("mean")
    sd = grp.transform(lambda v: v.std(ddof=0))
    degenerate = ~(sd > 0)
    long["z"] = np.where(degenerate, 0.0, (long["mean_log_power"] - mu) / sd.where(~degenerate, 1.0))
    long["degenerate"] = degenerate.to_numpy()
    return long


def write_stats_table(table: pd.DataFrame, path) -> None:
    table.to_csv(path, index=False, float_format="%.17g")


def read_stats_table(path) -> pd.DataFrame:
    return pd.read_csv(path, dtype={"participant": str}, float_precision="round_trip")


# ---------------------------------------------------------------------------
# manifests

@dataclass
class ParticipantManifest:
    participant: str
    phase: str
    recordings: dict  # task -> Path
    rest: Path | None = None
    events: Path | None = None
    included: bool = True
    missing: list = field(default_factory=list)

    @property
    def tasks(self) -> tuple:
        return tuple(sorted(self.recordings))

    def to_dict(self, root: Path | None = None):
        def rel(p):
            if p is None:
                return None
            p = Path(p)
            if root is not None:
                try:
                    return str(p.relative_to(root))
                except ValueError:
                    pass
            return str(p)
        return {"participant": self.participant, "phase": self.phase,
                "recordings": {k: rel(v) for k, v in sorted(self.recordings.items())},
                "rest": rel(self.rest), "events": rel(self.events), "included": self.included}


class ManifestError(DataError):
    pass


def load_manifest(path) -> list[ParticipantManifest]:
    """Read and validate a manifest JSON file.

    Paths are resolved relative to the manifest's directory. Missing files are
    collected per participant in ``missing`` and logged; structural problems
    raise :class:`ManifestError`.
    """
    path = Path(path)
    try:
        doc = json.loads(path.read_text())
    except json.JSONDecodeError as exc:
        raise ManifestError(f"{path}: line {exc.lineno} column {exc.colno}: {exc.msg}") from exc
    entries = doc.get("participants", []) if isinstance(doc, dict) else doc
    if not entries:
        warnings.warn(f"{path}: manifest lists no participants", stacklevel=2)
        return []
    root = path.parent
    out = []
    for i, e in enumerate(entries):
        try:
            pid = str(e["participant"])
            phase = str(e["phase"])
            recs = e["recordings"]
        except (KeyError, TypeError) as exc:
            raise ManifestError(f"{path}: participant #{i}: missing field {exc}") from exc
        if phase not in ("I", "II"):
            raise ManifestError(f"{path}: {pid}: phase must be 'I' or 'II'")
        unknown = set(recs) - set(TASKS)
        if unknown:
            raise ManifestError(f"{path}: {pid}: unknown tasks {sorted(unknown)}")
        if phase == "II":
            absent = [t for t in TASKS if not recs.get(t)]
            if absent:
                raise ManifestError(f"{path}: {pid}: phase II requires all tasks, missing {absent}")
        m = ParticipantManifest(
            pid, phase, {t: root / p for t, p in recs.items() if p},
            root / e["rest"] if e.get("rest") else None,
            root / e["events"] if e.get("events") else None,
            bool(e.get("included", True)))
        files = list(m.recordings.values()) + [p for p in (m.rest, m.events) if p is not None]
        m.missing = [str(p) for p in files if not p.exists()]
        if m.missing:
            logger.warning("%s: missing files %s", pid, m.missing)
        out.append(m)
    return out


def write_manifest(manifests, path) -> None:
    path = Path(path)
    doc = {"participants": [m.to_dict(path.parent) for m in manifests]}
    path.write_text(json.dumps(doc, indent=2))
