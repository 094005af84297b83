"""Per-(user, task) Beta posteriors over preference and the stage weights
sampled from them.

The update rule weights the t-th observation of a user by t, so recent
behavior dominates: after c updates alpha+beta == 2 + c(c+1)/2 exactly.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np

from .errors import ConfigError, DataValidationError


@dataclass(frozen=True)
class BetaPosterior:
    alpha: float = 1.0
    beta: float = 1.0
    count: int = 0

    def validate(self) -> None:
        if self.alpha < 1.0 or self.beta < 1.0 or self.count < 0:
            raise DataValidationError(f"invalid posterior state {self}")


def init_posterior() -> BetaPosterior:
    """Uniform prior Beta(1,1) with an empty observation counter."""
    return BetaPosterior(1.0, 1.0, 0)


def update_posterior(p: BetaPosterior, preference: float) -> BetaPosterior:
    """One chronological update: bump the counter, then add preference mass
    weighted by the new counter value."""
    if not 0.0 <= preference <= 1.0:
        raise DataValidationError(f"preference must be in [0,1], got {preference}")
    c = p.count + 1
    return BetaPosterior(p.alpha + preference * c, p.beta + (1.0 - preference) * c, c)


def posterior_mean(p: BetaPosterior) -> float:
    return p.alpha / (p.alpha + p.beta)


def sample_gamma(p: BetaPosterior, rng: np.random.Generator) -> float:
    """One Beta(alpha, beta) draw, nudged off the closed endpoints."""
    g = float(rng.beta(p.alpha, p.beta))
    return min(max(g, np.nextafter(0.0, 1.0)), np.nextafter(1.0, 0.0))


class PosteriorStore:
    """Posteriors for every (user, task) pair, refreshed once per pass.

    Users are indexed by their position in the sorted distinct-user list of
    the training split. `rebuild` replays the update recurrence over a full
    chronological history in one vectorized sweep (per user, the t-th record
    carries weight t; the summation order matches the scalar recurrence).
    """

    def __init__(self, users: Sequence[str], num_tasks: int):
        self.users = np.asarray(users, dtype=str)
        self.num_tasks = num_tasks
        self._row = {str(u): i for i, u in enumerate(self.users)}
        m = len(self.users)
        self.alpha = np.ones((m, num_tasks), dtype=np.float64)
        self.beta = np.ones((m, num_tasks), dtype=np.float64)
        self.counts = np.zeros(m, dtype=np.int64)

    def __len__(self) -> int:
        return len(self.users)

    def row(self, user_id: str) -> int:
        try:
            return self._row[user_id]
        except KeyError:
            raise DataValidationError(f"unknown user {user_id!r}") from None

    def get(self, user_id: str, task: int) -> BetaPosterior:
        r = self.row(user_id)
        return BetaPosterior(
            float(self.alpha[r, task]), float(self.beta[r, task]), int(self.counts[r])
        )

    def update(self, user_id: str, preferences: Sequence[float]) -> None:
        """Streaming update with one record's K preference predictions."""
        r = self.row(user_id)
        for k in range(self.num_tasks):
            p = update_posterior(
                BetaPosterior(self.alpha[r, k], self.beta[r, k], int(self.counts[r])),
                float(preferences[k]),
            )
            self.alpha[r, k], self.beta[r, k] = p.alpha, p.beta
        self.counts[r] += 1

    def rebuild(self, user_rows: np.ndarray, preferences: np.ndarray) -> None:
        """Reset to the uniform prior and replay a full chronological pass.

        `user_rows` maps each record to its user row and must be grouped by
        user with records in chronological order inside each group (the
        canonical dataset order).
        """
        n, k = preferences.shape
        if k != self.num_tasks or len(user_rows) != n:
            raise ConfigError("preferences shape does not match the posterior store")
        if np.any((preferences < 0.0) | (preferences > 1.0)):
            raise DataValidationError("preferences must lie in [0,1]")
        m = len(self.users)
        self.counts = np.bincount(user_rows, minlength=m)
        if n:
            boundaries = np.flatnonzero(np.diff(user_rows)) + 1
            starts = np.repeat(
                np.concatenate(([0], boundaries)), np.diff(np.r_[0, boundaries, n])
            )
            weights = (np.arange(n) - starts + 1).astype(np.float64)  # t = 1..c per user
        else:
            weights = np.zeros(0)
        for j in range(k):
            self.alpha[:, j] = 1.0 + np.bincount(
                user_rows, weights=weights * preferences[:, j], minlength=m
            )
            self.beta[:, j] = 1.0 + np.bincount(
                user_rows, weights=weights * (1.0 - preferences[:, j]), minlength=m
            )

    def means(self) -> np.ndarray:
        return self.alpha / (self.alpha + self.beta)

    def sample_all(self, rng_for: "GammaStreams") -> np.ndarray:
        """One gamma draw per (user, task) from per-pair derived streams."""
        out = np.empty((len(self.users), self.num_tasks))
        for r in range(len(self.users)):
            for k in range(self.num_tasks):
                out[r, k] = sample_gamma(
                    BetaPosterior(self.alpha[r, k], self.beta[r, k], int(self.counts[r])),
                    rng_for(r, k),
                )
        return out

    def to_csv(self, path: str | Path) -> None:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        with path.open("w", newline="", encoding="utf-8") as f:
            w = csv.writer(f)
            w.writerow(["user_id", "task", "alpha", "beta", "c"])
            for r, uid in enumerate(self.users):
                for k in range(self.num_tasks):
                    w.writerow(
                        [uid, k, repr(self.alpha[r, k]), repr(self.beta[r, k]), int(self.counts[r])]
                    )

    @classmethod
    def from_csv(cls, path: str | Path) -> "PosteriorStore":
        rows: dict[str, dict[int, tuple[float, float, int]]] = {}
        with Path(path).open(newline="", encoding="utf-8") as f:
            for rec in csv.DictReader(f):
                rows.setdefault(rec["user_id"], {})[int(rec["task"])] = (
                    float(rec["alpha"]),
                    float(rec["beta"]),
                    int(rec["c"]),
                )
        users = sorted(rows)
        num_tasks = max((len(v) for v in rows.values()), default=0)
        store = cls(users, num_tasks)
        for uid, by_task in rows.items():
            r = store.row(uid)
            for k, (a, b, c) in by_task.items():
                store.alpha[r, k], store.beta[r, k] = a, b
                store.counts[r] = c
        return store


class GammaStreams:
    """Derives the per-(user, task) random stream for one sampling pass.

    Streams are keyed by (seed, pass index, user row, task), so draws are
    reproducible and independent across users regardless of sampling order.
    """

    def __init__(self, seed: int, pass_index: int):
        self.seed = seed
        self.pass_index = pass_index

    def __call__(self, user_row: int, task: int) -> np.random.Generator:
        return np.random.default_rng((self.seed, self.pass_index, user_row, task))


def export_gamma_csv(
    store: PosteriorStore, gamma: np.ndarray, epoch: int, path: str | Path
) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("w", newline="", encoding="utf-8") as f:
        w = csv.writer(f)
        w.writerow(["user_id", "task", "gamma", "epoch"])
        for r, uid in enumerate(store.users):
            for k in range(store.num_tasks):
                w.writerow([uid, k, repr(float(gamma[r, k])), epoch])
