"""Chess-puzzle difficulty staircase.

The session is a pure state machine over a bank of puzzles binned by rating:
one bin harder after a solved puzzle, one bin easier after a failed one,
clamped to the bank's range, with every round restarting in the 800-850 bin.
"""

from __future__ import annotations

import csv
import logging
from dataclasses import dataclass, replace

import numpy as np
import pandas as pd

logger = logging.getLogger(__name__)

RATING_MIN = 600
RATING_MAX = 2250
BIN_WIDTH = 50
START_BIN_LOW = 800
ROUNDS = 6
PUZZLES_PER_ROUND = 30
TRAJECTORY_COLUMNS = ("round", "step", "bin_low", "puzzle_id", "rating", "outcome")


class BankError(ValueError):
    pass


class StaircaseError(RuntimeError):
    pass


def is_checkmate(themes: str) -> bool:
    tokens = str(themes).split()
    return any(t == "mate" or t.startswith("mateIn") for t in tokens)


@dataclass(frozen=True)
class PuzzleBank:
    """Puzzles grouped into ``[low, low + 50)`` rating bins.

    The top of the range is closed: a puzzle rated exactly 2250 joins the
    last bin.
    """

    bin_lows: tuple
    ids: tuple      # per bin: tuple of puzzle ids
    ratings: tuple  # per bin: ndarray of ratings

    def __post_init__(self):
        empty = [lo for lo, ids in zip(self.bin_lows, self.ids) if not ids]
        if empty:
            raise BankError(f"empty rating bins: {empty}")

    @property
    def n_bins(self) -> int:
        return len(self.bin_lows)

    @property
    def start_bin(self) -> int:
        return self.bin_lows.index(START_BIN_LOW)

    def rating_of(self, bin_index: int, puzzle_id: str) -> float:
        j = self.ids[bin_index].index(puzzle_id)
        return float(self.ratings[bin_index][j])

    @classmethod
    def from_records(cls, ids, ratings, lo: int = RATING_MIN, hi: int = RATING_MAX,
                     width: int = BIN_WIDTH) -> "PuzzleBank":
        ids = np.asarray(ids, dtype=str)
        ratings = np.asarray(ratings, dtype=np.float64)
        keep = (ratings >= lo) & (ratings <= hi)
        ids, ratings = ids[keep], ratings[keep]
        lows = tuple(range(lo, hi, width))
        idx = np.minimum(((ratings - lo) // width).astype(int), len(lows) - 1)
        order = np.lexsort((ids, idx))
        ids, ratings, idx = ids[order], ratings[order], idx[order]
        per_ids = tuple(tuple(ids[idx == b].tolist()) for b in range(len(lows)))
        per_r = tuple(ratings[idx == b] for b in range(len(lows)))
        return cls(lows, per_ids, per_r)


def load_bank(path) -> PuzzleBank:
    """Load a puzzle CSV (``PuzzleId``/``id``, ``Rating``, ``Themes`` columns).

    Only checkmate puzzles rated within [600, 2250] are kept.
    """
    head = pd.read_csv(path, nrows=0).columns
    lookup = {c.lower(): c for c in head}
    cols = {}
    for want, options in (("id", ("puzzleid", "id")), ("rating", ("rating",)), ("themes", ("themes",))):
        found = [lookup[o] for o in options if o in lookup]
        if not found:
            raise BankError(f"{path}: missing {want} column")
        cols[want] = found[0]
    df = pd.read_csv(path, usecols=list(cols.values()), dtype={cols["id"]: str, cols["themes"]: str})
    df = df[df[cols["themes"]].fillna("").map(is_checkmate)]
    return PuzzleBank.from_records(df[cols["id"]].to_numpy(), df[cols["rating"]].to_numpy())


@dataclass(frozen=True)
class StaircaseState:
    bin_index: int
    round: int = 1
    puzzle: int = 1
    used: frozenset = frozenset()
    start_bin: int = 0
    n_bins: int = 1
    rounds: int = ROUNDS
    per_round: int = PUZZLES_PER_ROUND
    finished: bool = False


def initial_state(bank: PuzzleBank, rounds: int = ROUNDS,
                  per_round: int = PUZZLES_PER_ROUND) -> StaircaseState:
    return StaircaseState(bank.start_bin, 1, 1, frozenset(), bank.start_bin, bank.n_bins,
                          rounds, per_round)


def step(state: StaircaseState, outcome: bool) -> StaircaseState:
    """Advance after one puzzle. ``outcome`` is True for solved.

    Timeouts count as failures.
    """
    if state.finished:
        raise StaircaseError("session already finished")
    b = state.bin_index + (1 if outcome else -1)
    b = min(max(b, 0), state.n_bins - 1)
    if state.puzzle < state.per_round:
        return replace(state, bin_index=b, puzzle=state.puzzle + 1)
    if state.round < state.rounds:
        return replace(state, bin_index=state.start_bin, round=state.round + 1, puzzle=1)
    return replace(state, bin_index=b, finished=True)


def select_puzzle(bank: PuzzleBank, state: StaircaseState, rng: np.random.Generator):
    """Draw an unused puzzle from the current bin.

    Falls back to the nearest bin with unused puzzles (easier on ties).
    Returns ``(puzzle_id, bin_index_used, new_state)``.
    """
    order = [state.bin_index]
    for d in range(1, bank.n_bins):
        order += [b for b in (state.bin_index - d, state.bin_index + d) if 0 <= b < bank.n_bins]
    for b in order:
        free = [p for p in bank.ids[b] if p not in state.used]
        if free:
            pid = free[int(rng.integers(len(free)))]
            if b != state.bin_index:
                logger.info("bin %d exhausted; drew from bin %d", bank.bin_lows[state.bin_index],
                            bank.bin_lows[b])
            return pid, b, replace(state, used=state.used | {pid})
    raise StaircaseError("puzzle bank exhausted")


def expected_score(skill: float, rating: float) -> float:
    return 1.0 / (1.0 + 10.0 ** ((rating - skill) / 400.0))


@dataclass(frozen=True)
class SimPlayer:
    skill: float
    seed: int = 0

    def __post_init__(self):
        if not 400 <= self.skill <= 2600:
            raise ValueError("skill must lie in [400, 2600]")


def simulate_player(player: SimPlayer, rating: float, rng: np.random.Generator) -> bool:
    return bool(rng.random() < expected_score(player.skill, rating))


def run_session(bank: PuzzleBank, player, seed: int | None = None, rounds: int = ROUNDS,
                per_round: int = PUZZLES_PER_ROUND) -> pd.DataFrame:
    """Play one full session; ``player`` is a :class:`SimPlayer` or a
    callable ``(rating, rng) -> bool``.

    Returns the trajectory with the documented columns plus ``fallback``
    (puzzle drawn outside the nominal bin) and ``state_bin`` (nominal bin
    index).
    """
    if seed is None:
        seed = player.seed if isinstance(player, SimPlayer) else 0
    rng = np.random.default_rng(seed)
    if isinstance(player, SimPlayer):
        def outcome_of(r, g, _p=player):
            return simulate_player(_p, r, g)
    else:
        outcome_of = player
    state = initial_state(bank, rounds, per_round)
    rows = []
    n = 0
    while not state.finished:
        pid, used_bin, state_sel = select_puzzle(bank, state, rng)
        rating = bank.rating_of(used_bin, pid)
        ok = bool(outcome_of(rating, rng))
        n += 1
        rows.append((state.round, n, bank.bin_lows[used_bin], pid, rating, int(ok),
                     used_bin != state.bin_index, state.bin_index))
        state = step(state_sel, ok)
    return pd.DataFrame(rows, columns=list(TRAJECTORY_COLUMNS) + ["fallback", "state_bin"])


def round_final_ratings(trajectory: pd.DataFrame) -> np.ndarray:
    """Rating of the last puzzle administered in each round."""
    return trajectory.groupby("round", sort=True)["rating"].last().to_numpy()


def write_trajectory_csv(trajectory: pd.DataFrame, path) -> None:
    trajectory.to_csv(path, index=False, columns=list(TRAJECTORY_COLUMNS) + [
        c for c in trajectory.columns if c not in TRAJECTORY_COLUMNS])


def synthetic_bank(per_bin: int = 40, seed: int = 0) -> pd.DataFrame:
    """Puzzle table in the public database layout, for tests and simulation."""
    rng = np.random.default_rng(seed)
    rows = []
    lows = range(RATING_MIN, RATING_MAX, BIN_WIDTH)
    k = 0
    for lo in lows:
        for _ in range(per_bin):
            k += 1
            rating = int(rng.integers(lo, lo + BIN_WIDTH))
            theme = "mate mateIn2 middlegame" if rng.random() < 0.8 else "fork short"
            rows.append((f"S{k:06d}", "8/8/8/8/8/8/8/8 w - - 0 1", "e2e4", rating, 75, 90, 100,
                         theme, "", ""))
    # out-of-range decoys exercise the filter
    rows.append(("S_LOW", "", "", 450, 75, 90, 100, "mate mateIn1", "", ""))
    rows.append(("S_HIGH", "", "", 2400, 75, 90, 100, "mate mateIn3", "", ""))
    return pd.DataFrame(rows, columns=["PuzzleId", "FEN", "Moves", "Rating", "RatingDeviation",
                                       "Popularity", "NbPlays", "Themes", "GameUrl", "OpeningTags"])


def write_bank_csv(df: pd.DataFrame, path) -> None:
    df.to_csv(path, index=False, quoting=csv.QUOTE_MINIMAL)


def check_invariants(trajectory: pd.DataFrame, bank: PuzzleBank) -> list[str]:
    """Round-reset and one-bin-walk violations in a single session's trajectory."""
    problems = []
    top = bank.n_bins - 1
    for rnd, g in trajectory.groupby("round", sort=True):
        bins = g["state_bin"].to_numpy()
        outcomes = g["outcome"].to_numpy()
        if bins[0] != bank.start_bin:
            problems.append(f"round {rnd}: started in bin {bins[0]}")
        for k in range(1, len(bins)):
            want = min(max(bins[k - 1] + (1 if outcomes[k - 1] else -1), 0), top)
            if bins[k] != want:
                problems.append(f"round {rnd} step {k}: bin {bins[k]}, expected {want}")
    return problems


def simulate_sessions(bank: PuzzleBank, skills, sessions: int, seed: int, rounds: int = ROUNDS,
                      per_round: int = PUZZLES_PER_ROUND) -> pd.DataFrame:
    """Trajectories of ``sessions`` simulated players per skill.

    Session ``s`` of skill index ``i`` is seeded from ``SeedSequence([seed, i, s])``.
    """
    frames = []
    for i, skill in enumerate(skills):
        for s in range(sessions):
            sub_seed = np.random.SeedSequence([int(seed), i, s]).generate_state(1)[0]
            traj = run_session(bank, SimPlayer(float(skill)), int(sub_seed), rounds, per_round)
            traj.insert(0, "session", s)
            traj.insert(0, "skill", float(skill))
            frames.append(traj)
    return pd.concat(frames, ignore_index=True)


def convergence_summary(trajectories: pd.DataFrame) -> pd.DataFrame:
    """Median final-puzzle rating per round, pooled over sessions, per skill."""
    last = trajectories.groupby(["skill", "session", "round"], sort=True)["rating"].last().reset_index()
    out = last.groupby("skill")["rating"].agg(["median", "mean", "count"]).reset_index()
    out.columns = ["skill", "median_final_rating", "mean_final_rating", "n_rounds"]
    out["error"] = out["median_final_rating"] - out["skill"]
    return out
