"""Stage orchestration: preprocess and feature extraction over a manifest.

Each stage reads declared inputs and writes only under its own directory:

``preprocess/``
    ``cleaned/<pid>_<task>.csv`` (filtered, ASR-cleaned), ``masks/<pid>_<task>.jsonl``,
    ``calibration/<pid>.thresholds.json``, ``calibration/<pid>.asr.json``,
    ``inclusion.csv`` and ``run.json``.
``features/``
    ``features.csv``, ``stats_table.csv``, ``behavioral.csv``.
"""

from __future__ import annotations

import json
import logging
from pathlib import Path

import numpy as np
import pandas as pd

from .artifact import (CalibrationError, EpochMask, asr_calibrate, asr_process,
                       clean_rest, estimate_reject_thresholds, gate_epochs, participant_inclusion,
                       split_fixed_epochs)
from .config import RunConfig
from .dataset import (DataError, behavioral_table, condition_intervals, export_stats_table,
                      label_events, load_manifest, read_events_jsonl, write_stats_table)
from .signal_core import (Recording, SignalError, apply_chain, design_bandpass, design_notch,
                          read_recording_csv, write_recording_csv)
from .spectral import epoch_stream, features_frame, write_features_csv

logger = logging.getLogger(__name__)

INCLUSION_COLUMNS = ("participant", "status", "n_epochs", "n_kept", "excluded_fraction",
                     "decision", "message")


class StageDependencyError(RuntimeError):
    """An upstream stage's outputs are missing."""


def filter_chain(cfg: RunConfig, fs: float):
    return [design_notch(fs, cfg.filter.notch_hz, cfg.filter.notch_q),
            design_bandpass(fs, cfg.filter.band[0], cfg.filter.band[1], cfg.filter.order)]


def calibrate(rest: Recording, cfg: RunConfig, seed: int = 0):
    """Reject thresholds, cleaned rest epochs and the ASR model for one participant."""
    epochs = split_fixed_epochs(rest, cfg.reject.epoch_seconds)
    thresholds = estimate_reject_thresholds(epochs, cfg.reject.grid, cfg.reject.folds, seed,
                                            channels=rest.channels)
    kept = clean_rest(epochs, thresholds)
    calib = Recording(rest.sample_rate, rest.channels, np.concatenate(list(kept), axis=1))
    model = asr_calibrate(calib, cfg.asr.cutoff, cfg.asr.window, cfg.asr.max_dims)
    return thresholds, kept, model


def participant_intervals(events_path, participant: str, merge_gap: float):
    events = [e for e in read_events_jsonl(events_path) if e.participant == participant]
    spans = condition_intervals(label_events(events), merge_gap)
    by_task = {}
    for a, b, lab in spans:
        by_task.setdefault(lab.task, []).append((a, b, lab))
    return events, by_task


def preprocess(manifest_path, out_dir, cfg: RunConfig) -> pd.DataFrame:
    """Filter, calibrate, clean and gate every participant in the manifest.

    Calibration or data failures are recorded per participant and the run
    continues. Returns the inclusion table.
    """
    out = Path(out_dir)
    for sub in ("cleaned", "masks", "calibration"):
        (out / sub).mkdir(parents=True, exist_ok=True)
    manifests = load_manifest(manifest_path)
    rows = []
    for m in manifests:
        base = dict(participant=m.participant, n_epochs=0, n_kept=0, excluded_fraction=np.nan,
                    decision="exclude", message="")
        if not m.included:
            rows.append({**base, "status": "skipped", "message": "marked not included"})
            continue
        if m.missing or m.rest is None or m.events is None:
            rows.append({**base, "status": "missing", "message": "missing rest, events or recordings"})
            continue
        try:
            rest = read_recording_csv(m.rest)
            rest = apply_chain(rest, filter_chain(cfg, rest.sample_rate))
            thresholds, _, model = calibrate(rest, cfg)
            (out / "calibration" / f"{m.participant}.thresholds.json").write_text(
                json.dumps(thresholds.to_dict(), indent=2))
            model.save(out / "calibration" / f"{m.participant}.asr.json")
            _, intervals = participant_intervals(m.events, m.participant, cfg.epoch.merge_gap)
            masks = []
            for task in sorted(m.recordings):
                rec = read_recording_csv(m.recordings[task])
                rec = apply_chain(rec, filter_chain(cfg, rec.sample_rate))
                rec = asr_process(model, rec)
                write_recording_csv(rec, out / "cleaned" / f"{m.participant}_{task}.csv")
                epochs = epoch_stream(rec, intervals.get(task, []), cfg.epoch.length)
                mask = gate_epochs(np.stack([e.data for e in epochs]) if epochs else
                                   np.zeros((0, len(rec.channels), 1)), cfg.epoch.gate_uv)
                mask.to_jsonl(out / "masks" / f"{m.participant}_{task}.jsonl")
                masks.append(mask)
        except (CalibrationError, SignalError, DataError, ValueError) as exc:
            logger.error("%s: %s", m.participant, exc)
            status = "calibration_error" if isinstance(exc, CalibrationError) else "data_error"
            rows.append({**base, "status": status, "message": str(exc)})
            continue
        total = EpochMask.concatenate(masks)
        if len(total) == 0:
            rows.append({**base, "status": "data_error", "message": "no labelled epochs"})
            continue
        decision = participant_inclusion(total, cfg.epoch.inclusion_cutoff)
        rows.append({**base, "status": "ok", "n_epochs": len(total), "n_kept": int(total.keep.sum()),
                     "excluded_fraction": total.excluded_fraction, "decision": decision})
        logger.info("%s: kept %d/%d epochs -> %s", m.participant, total.keep.sum(), len(total), decision)
    table = pd.DataFrame(rows, columns=list(INCLUSION_COLUMNS))
    table.to_csv(out / "inclusion.csv", index=False, float_format="%.17g")
    (out / "run.json").write_text(json.dumps(
        {"manifest": str(Path(manifest_path).resolve()), "config": cfg.to_dict()}, indent=2))
    return table


def features(preprocess_dir, out_dir, cfg: RunConfig) -> pd.DataFrame:
    """Band-power features for included participants' kept epochs."""
    pre = Path(preprocess_dir)
    run_file, incl_file = pre / "run.json", pre / "inclusion.csv"
    if not run_file.exists() or not incl_file.exists():
        raise StageDependencyError(f"preprocess outputs not found in {pre}; run the preprocess stage")
    manifest_path = json.loads(run_file.read_text())["manifest"]
    inclusion = pd.read_csv(incl_file, dtype={"participant": str})
    included = set(inclusion.loc[(inclusion["status"] == "ok") & (inclusion["decision"] == "include"),
                                 "participant"])
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    frames, events_all = [], []
    for m in load_manifest(manifest_path):
        if m.participant not in included:
            continue
        events, intervals = participant_intervals(m.events, m.participant, cfg.epoch.merge_gap)
        events_all += events
        for task in sorted(m.recordings):
            cleaned = pre / "cleaned" / f"{m.participant}_{task}.csv"
            mask_file = pre / "masks" / f"{m.participant}_{task}.jsonl"
            if not cleaned.exists() or not mask_file.exists():
                raise StageDependencyError(f"preprocess output missing for {m.participant}/{task}")
            rec = read_recording_csv(cleaned)
            epochs = epoch_stream(rec, intervals.get(task, []), cfg.epoch.length)
            mask = EpochMask.from_jsonl(mask_file)
            if len(mask) != len(epochs):
                raise DataError(f"{m.participant}/{task}: mask has {len(mask)} entries "
                                f"for {len(epochs)} epochs")
            kept = [e for e, k in zip(epochs, mask.keep) if k]
            if len(kept) < len(epochs):
                logger.info("%s/%s: %d of %d epochs gated out", m.participant, task,
                            len(epochs) - len(kept), len(epochs))
            frames.append(features_frame(kept, rec.sample_rate, cfg.bands, nw=cfg.spectral.nw,
                                         n_tapers=cfg.spectral.n_tapers, floor=cfg.spectral.floor,
                                         fuse=cfg.spectral.fuse))
    frames = [f for f in frames if len(f)]
    if not frames:
        raise DataError("no feature rows: every participant excluded or no epochs kept")
    table = pd.concat(frames, ignore_index=True)
    write_features_csv(table, out / "features.csv")
    write_stats_table(export_stats_table(table, cfg.bands.names), out / "stats_table.csv")
    behavioral_table(events_all).to_csv(out / "behavioral.csv", index=False, float_format="%.17g")
    return table
