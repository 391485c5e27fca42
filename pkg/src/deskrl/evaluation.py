"""pass@k estimation, pass@k upper bounds, pass@1 histograms and difficulty sweeps."""

from __future__ import annotations

import csv
import json
from dataclasses import dataclass, field

import numpy as np

from .errors import EmptyMatrix, InvalidK, InvalidMoments
from .policy import sample_batch
from .tasks import CONTINUOUS_FAMILIES, SIZE_KEY, make_splits, resolve_difficulty, verify

EVAL_TEMPERATURE = 0.6


def pass_at_k_unbiased(n, c, k):
    """``1 - C(n-c, k) / C(n, k)`` in product form.

    Equals the probability that a uniformly random size-``k`` subset of the
    ``n`` samples contains at least one of the ``c`` correct ones.
    """
    if not 0 <= c <= n:
        raise ValueError(f"need 0 <= c <= n, got c={c}, n={n}")
    if not 1 <= k <= n:
        raise InvalidK(f"k={k} outside [1, {n}]")
    if n - c < k:
        return 1.0
    miss = 1.0
    for i in range(k):
        miss *= (n - c - i) / (n - i)
    return 1.0 - miss


@dataclass
class SampleMatrix:
    """Per-prompt rewards for ``n`` samples each.

    ``correct`` is the thresholded view (reward == 1) used for pass@k; for
    continuous families ``rewards`` keeps the graded scores.
    """

    rewards: np.ndarray
    temperature: float = EVAL_TEMPERATURE
    policy_id: str = ""
    family: str = ""
    size: int | None = None
    correct: np.ndarray = field(default=None)

    def __post_init__(self):
        self.rewards = np.asarray(self.rewards, dtype=np.float64)
        if self.rewards.ndim != 2:
            raise ValueError("rewards must be a (prompts, n) array")
        if self.correct is None:
            self.correct = self.rewards == 1.0
        self.correct = np.asarray(self.correct, dtype=bool)

    @classmethod
    def from_counts(cls, n, counts, **kw):
        counts = np.asarray(counts, dtype=int)
        if np.any(counts < 0) or np.any(counts > n):
            raise ValueError("counts must lie in [0, n]")
        rewards = (np.arange(n)[None, :] < counts[:, None]).astype(np.float64)
        return cls(rewards, **kw)

    @property
    def n(self):
        return self.rewards.shape[1]

    @property
    def num_prompts(self):
        return self.rewards.shape[0]

    def counts(self):
        return self.correct.sum(axis=1)

    def pass1_rates(self):
        return self.counts() / self.n

    def mean_reward(self):
        return float(self.rewards.mean()) if self.rewards.size else float("nan")


@dataclass
class PassAtKReport:
    ks: list
    mean: np.ndarray
    per_prompt: np.ndarray
    upper_bound: np.ndarray


def pass_at_k_upper_bound(mean_rho, var_rho, k):
    """``1 - ((1 - E[rho])**2 + Var(rho)) ** (k / 2)``."""
    if not 0.0 <= mean_rho <= 1.0:
        raise InvalidMoments(f"mean pass@1 {mean_rho} outside [0, 1]")
    if not 0.0 <= var_rho <= 0.25:
        raise InvalidMoments(f"pass@1 variance {var_rho} outside [0, 0.25]")
    return 1.0 - ((1.0 - mean_rho) ** 2 + var_rho) ** (k / 2.0)


def _moments(matrix):
    rho = matrix.pass1_rates()
    mean = float(rho.mean())
    var = float(np.mean((rho - mean) ** 2))
    return mean, min(var, 0.25)


def pass_at_k_curve(matrix, ks):
    if matrix.num_prompts == 0:
        raise EmptyMatrix("no prompts in sample matrix")
    ks = [int(k) for k in ks]
    counts = matrix.counts()
    per = np.array([[pass_at_k_unbiased(matrix.n, int(c), k) for k in ks] for c in counts])
    mean, var = _moments(matrix)
    bound = np.array([pass_at_k_upper_bound(mean, var, k) for k in ks])
    return PassAtKReport(ks, per.mean(axis=0), per, bound)


def pass1_histogram(matrix, bins=10):
    """Counts of per-prompt ``c/n`` in ``bins`` uniform bins on [0, 1] (last bin closed)."""
    if bins < 2:
        raise ValueError("need at least two bins")
    counts, edges = np.histogram(matrix.pass1_rates(), bins=bins, range=(0.0, 1.0))
    return counts, edges


@dataclass
class BoundCheck:
    ks: list
    empirical: np.ndarray
    bound: np.ndarray
    holds: np.ndarray


def check_bound(matrix, ks, atol=1e-12):
    """Compare plug-in pass@k against the upper bound at the matrix's own moments.

    Both sides are evaluated from the same per-prompt pass@1 estimates
    ``rho = c/n``: the empirical side is ``mean(1 - (1 - rho)**k)`` and the
    bound uses the population mean and variance of ``rho``.
    """
    if matrix.num_prompts == 0:
        raise EmptyMatrix("no prompts in sample matrix")
    rho = matrix.pass1_rates()
    mean, var = _moments(matrix)
    ks = [int(k) for k in ks]
    emp = np.array([np.mean(1.0 - (1.0 - rho) ** k) for k in ks])
    bound = np.array([pass_at_k_upper_bound(mean, var, k) for k in ks])
    return BoundCheck(ks, emp, bound, emp <= bound + atol)


def evaluate_policy(params, instances, n, temperature=EVAL_TEMPERATURE, max_len=32, seed=0,
                    policy_id=""):
    """Sample ``n`` responses per instance and score them into a SampleMatrix.

    Sample ``j`` of prompt ``i`` uses the rng stream ``(seed, i, j)``.
    """
    instances = list(instances)
    if not instances:
        raise EmptyMatrix("no instances to evaluate")
    prompts = [inst.prompt for inst in instances for _ in range(n)]
    rngs = [np.random.default_rng([seed, i, j]) for i in range(len(instances)) for j in range(n)]
    out = sample_batch(params, prompts, temperature, max_len, rngs)
    rewards = np.empty((len(instances), n))
    correct = np.empty((len(instances), n), dtype=bool)
    for idx, (seq, _) in enumerate(out):
        i, j = divmod(idx, n)
        v = verify(instances[i], seq.response)
        rewards[i, j] = v.reward
        correct[i, j] = v.correct
    fam = instances[0].family
    return SampleMatrix(rewards, temperature, policy_id, fam, None, correct)


@dataclass
class SweepRow:
    family: str
    size: int
    prompts: int
    n: int
    pass1: float
    pass_at_k: dict
    mean_reward: float
    matrix: SampleMatrix


def difficulty_sweep(params, family, sizes, n, seed=0, prompts=50, ks=None, base_difficulty=None,
                     temperature=EVAL_TEMPERATURE, max_len=32):
    """Per-size accuracy table on fresh held-out (test-split) instances."""
    ks = sorted(set(ks or [1, n]))
    rows = []
    for size in sizes:
        diff = dict(base_difficulty or {})
        diff[SIZE_KEY[family]] = int(size)
        resolve_difficulty(family, diff)
        _, _, test = make_splits(family, diff, (1, 1, prompts), seed)
        matrix = evaluate_policy(params, test, n, temperature, max_len, seed=seed)
        matrix.size = int(size)
        curve = pass_at_k_curve(matrix, ks)
        pass1 = float(pass_at_k_curve(matrix, [1]).mean[0])
        rows.append(SweepRow(family, int(size), prompts, n, pass1,
                             {k: float(v) for k, v in zip(ks, curve.mean)}, matrix.mean_reward(), matrix))
    return rows


def write_reports(out_dir, checkpoint_id, entries, ks):
    """Write report.jsonl, per-curve CSVs, histograms.jsonl and sweep.csv.

    ``entries`` are ``(family, size, SampleMatrix)`` triples.
    """
    out_dir.mkdir(parents=True, exist_ok=True)
    with open(out_dir / "report.jsonl", "w") as rep, open(out_dir / "histograms.jsonl", "w") as hist, \
            open(out_dir / "sweep.csv", "w", newline="") as sweep_fh:
        sweep = csv.writer(sweep_fh, lineterminator="\n")
        sweep.writerow(["family", "size", "prompts", "n", "pass1", "mean_reward"]
                       + [f"pass_at_{k}" for k in ks])
        for family, size, matrix in entries:
            curve = pass_at_k_curve(matrix, ks)
            bound = check_bound(matrix, ks)
            for i, k in enumerate(ks):
                rep.write(json.dumps({
                    "checkpoint": checkpoint_id, "family": family, "size": size, "k": k,
                    "n": matrix.n, "prompts": matrix.num_prompts, "temperature": matrix.temperature,
                    "pass_at_k": float(curve.mean[i]), "upper_bound": float(curve.upper_bound[i]),
                    "plugin_pass_at_k": float(bound.empirical[i]), "bound_holds": bool(bound.holds[i]),
                    "mean_reward": matrix.mean_reward(),
                    "continuous": family in CONTINUOUS_FAMILIES,
                }, sort_keys=True) + "\n")
            with open(out_dir / f"curve_{family}_{size}.csv", "w", newline="") as fh:
                w = csv.writer(fh, lineterminator="\n")
                w.writerow(["k", "pass_at_k", "upper_bound"])
                for k, p, ub in zip(ks, curve.mean, curve.upper_bound):
                    w.writerow([k, repr(float(p)), repr(float(ub))])
            counts, edges = pass1_histogram(matrix, 10)
            hist.write(json.dumps({
                "checkpoint": checkpoint_id, "family": family, "size": size,
                "edges": [float(e) for e in edges], "counts": [int(c) for c in counts],
            }, sort_keys=True) + "\n")
            p1 = float(pass_at_k_curve(matrix, [1]).mean[0])
            sweep.writerow([family, size, matrix.num_prompts, matrix.n, repr(p1), repr(matrix.mean_reward())]
                           + [repr(float(v)) for v in curve.mean])
