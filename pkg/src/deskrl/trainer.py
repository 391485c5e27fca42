"""Prolonged GRPO training: rollouts, dynamic sampling, AdamW, reference resets, stages.

Randomness is never drawn from a shared stream. Every rollout trajectory,
every step's prompt draw and every validation sample gets its own generator
seeded from ``(master seed, tag, step, ...)``, so runs are reproducible and
independent of batching.
"""

from __future__ import annotations

import json
import math
import struct
from dataclasses import asdict, dataclass, field, replace

import numpy as np

from . import grpo
from .errors import CheckpointError, DegenerateGroup, NonFiniteGradient, ShapeMismatch, VerifierError
from .evaluation import EVAL_TEMPERATURE, evaluate_policy, pass_at_k_curve
from .policy import (
    PolicyParameters,
    grad_weighted_logprob,
    init_params,
    logprobs_batch,
    mean_token_entropy,
    sample_batch,
)
from .tasks import generate, split_seed, verify

_TAG_PROMPTS, _TAG_ROLLOUT = 1, 2
METRIC_FIELDS = (
    "step", "stage", "loss", "entropy", "kl", "mean_ratio", "filter_rate", "mean_len",
    "mean_reward", "val_pass1", "val_pass16", "reset_flag", "skipped", "updates",
)


# -- configuration -----------------------------------------------------------


@dataclass(frozen=True)
class ResetPolicy:
    """When to hard-reset the reference policy.

    ``interval``: reset every this many steps since the last reset.
    ``window``/``min_delta``: reset when the best validation score of the
    last ``window - 1`` evaluations beats the best score up to the window's
    first evaluation by less than ``min_delta``.
    ``at_start``: reset when this stage begins (ignored for the first stage).
    """

    interval: int | None = None
    window: int | None = None
    min_delta: float = 0.0
    at_start: bool = False

    def __post_init__(self):
        if self.interval is not None and self.interval < 1:
            raise ValueError("reset interval must be >= 1")
        if self.window is not None and self.window < 2:
            raise ValueError("stagnation window must be >= 2")

    @property
    def enabled(self):
        return self.interval is not None or self.window is not None


@dataclass(frozen=True)
class MixtureEntry:
    family: str
    difficulty: dict = field(default_factory=dict, hash=False)
    weight: float = 1.0


@dataclass(frozen=True)
class StageConfig:
    name: str = "stage"
    steps: int = 0  # 0: runs until the end of training (last stage only)
    max_len: int = 32
    temperature: float = 1.2
    n_rollouts: int = 16
    batch_size: int = 16
    minibatch_size: int = 4
    eps_low: float = 0.2
    eps_high: float = 0.4
    beta: float = 1e-3
    penalty: float = 0.5
    lr: float = 1e-2
    weight_decay: float = 0.01
    reset: ResetPolicy = ResetPolicy()
    mixture: tuple = (MixtureEntry("arithmetic", {"operands": 2, "modulus": 7}),)

    def __post_init__(self):
        if self.batch_size % self.minibatch_size:
            raise ValueError(
                f"batch_size {self.batch_size} not divisible by minibatch_size {self.minibatch_size}"
            )
        if self.n_rollouts < 2:
            raise ValueError("need at least two rollouts per prompt")
        if not 0 <= self.penalty <= 1:
            raise ValueError("penalty must lie in [0, 1]")
        if self.temperature <= 0 or self.max_len < 1 or self.lr < 0 or self.steps < 0:
            raise ValueError("temperature, max_len, lr and steps must be positive")
        if not self.mixture or any(m.weight < 0 for m in self.mixture):
            raise ValueError("mixture must be nonempty with nonnegative weights")
        if sum(m.weight for m in self.mixture) <= 0:
            raise ValueError("mixture weights sum to zero")
        grpo.ClipConfig(self.eps_low, self.eps_high)
        grpo.KlConfig(self.beta)

    @property
    def clip(self):
        return grpo.ClipConfig(self.eps_low, self.eps_high)

    @property
    def kl(self):
        return grpo.KlConfig(self.beta)

    @property
    def num_minibatches(self):
        return self.batch_size // self.minibatch_size


def stage_to_dict(stage):
    d = asdict(stage)
    d["mixture"] = [asdict(m) for m in stage.mixture]
    return d


def stage_from_dict(d):
    d = dict(d)
    if "reset" in d:
        d["reset"] = ResetPolicy(**d["reset"])
    if "mixture" in d:
        d["mixture"] = tuple(MixtureEntry(**m) for m in d["mixture"])
    return StageConfig(**d)


# -- state -------------------------------------------------------------------


@dataclass
class OptimizerState:
    m: np.ndarray
    v: np.ndarray
    step: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    weight_decay: float = 0.01
    lr: float = 1e-2

    @classmethod
    def zeros(cls, size, **kw):
        return cls(np.zeros(size), np.zeros(size), **kw)

    def hyper(self):
        return {k: getattr(self, k) for k in ("beta1", "beta2", "eps", "weight_decay", "lr")}


@dataclass
class TrainerState:
    params: PolicyParameters
    ref: PolicyParameters
    opt: OptimizerState
    seed: int = 0
    global_step: int = 0
    stage_index: int = 0
    last_reset_step: int = 0
    reset_eval_index: int = 0
    val_history: list = field(default_factory=list)  # (step, pass1) pairs

    @classmethod
    def initial(cls, vocab_size, seed=0, d=16, h=32, w=4, stage=None):
        stage = stage or StageConfig()
        params = init_params(vocab_size, d=d, h=h, w=w, seed=seed)
        opt = OptimizerState.zeros(params.size, lr=stage.lr, weight_decay=stage.weight_decay)
        return cls(params, params.copy(), opt, seed=seed)


@dataclass
class TrajectoryGroup:
    instance: object
    seqs: list
    old_logps: list
    ref_logps: list
    raw: np.ndarray
    shaped: np.ndarray

    @property
    def accuracy(self):
        return float(self.raw.mean())


# -- rollouts and filtering ----------------------------------------------------


def apply_reward_shaping(raw, terminated, penalty):
    """Pass terminated rewards through; dock unterminated ones by ``penalty`` (floored at 0)."""
    if not 0 <= penalty <= 1:
        raise ValueError("penalty must lie in [0, 1]")
    return raw if terminated else max(raw - penalty, 0.0)


def rollout_batch(state, stage, prompts, step=None):
    """Sample ``stage.n_rollouts`` responses per prompt and score them."""
    prompts = list(prompts)
    if not prompts:
        raise ValueError("rollout batch needs at least one prompt")
    step = state.global_step if step is None else step
    n = stage.n_rollouts
    flat_prompts = [inst.prompt for inst in prompts for _ in range(n)]
    rngs = [
        np.random.default_rng([state.seed, _TAG_ROLLOUT, step, i, j])
        for i in range(len(prompts)) for j in range(n)
    ]
    sampled = sample_batch(state.params, flat_prompts, stage.temperature, stage.max_len, rngs)
    groups = []
    for i, inst in enumerate(prompts):
        chunk = sampled[i * n:(i + 1) * n]
        seqs = [s for s, _ in chunk]
        raw = np.empty(n)
        shaped = np.empty(n)
        for j, seq in enumerate(seqs):
            try:
                verdict = verify(inst, seq.response)
            except Exception as exc:  # verify is total; anything here is an internal fault
                raise VerifierError(f"verifier failed on prompt {i}: {exc}") from exc
            raw[j] = verdict.reward
            shaped[j] = apply_reward_shaping(verdict.reward, seq.terminated, stage.penalty)
        groups.append(TrajectoryGroup(
            inst, seqs, [lp for _, lp in chunk], logprobs_batch(state.ref, seqs), raw, shaped,
        ))
    return groups


def dynamic_filter(groups):
    """Keep groups with mean raw reward strictly inside (0, 1) and nonzero shaped-reward spread."""
    kept = []
    for g in groups:
        acc = g.raw.mean()
        if not 0.0 < acc < 1.0:
            continue
        try:
            grpo.compute_advantages(g.shaped)
        except DegenerateGroup:
            continue
        kept.append(g)
    return kept


# -- optimisation ----------------------------------------------------------------


def adamw_update(params, grad, opt):
    """One bias-corrected AdamW step with decoupled weight decay. Returns new objects."""
    g = grad.flat if isinstance(grad, PolicyParameters) else np.asarray(grad, dtype=np.float64)
    if g.shape != params.flat.shape or opt.m.shape != g.shape:
        raise ShapeMismatch("gradient, parameters and moments must share a shape")
    if not np.all(np.isfinite(g)):
        raise NonFiniteGradient("gradient has non-finite entries; update refused")
    step = opt.step + 1
    m = opt.beta1 * opt.m + (1.0 - opt.beta1) * g
    v = opt.beta2 * opt.v + (1.0 - opt.beta2) * g * g
    m_hat = m / (1.0 - opt.beta1 ** step)
    v_hat = v / (1.0 - opt.beta2 ** step)
    flat = params.flat * (1.0 - opt.lr * opt.weight_decay) - opt.lr * (m_hat / (np.sqrt(v_hat) + opt.eps))
    new_params = PolicyParameters(*params.dims(), flat=flat)
    return new_params, replace(opt, m=m, v=v, step=step)


def _minibatch_update(state, stage, groups):
    seqs, old, ref, adv = [], [], [], []
    for g in groups:
        a = grpo.compute_advantages(g.shaped).advantages
        for j, seq in enumerate(g.seqs):
            seqs.append(seq)
            old.append(g.old_logps[j])
            ref.append(g.ref_logps[j])
            adv.append(np.full(len(seq.response), a[j]))
    new = logprobs_batch(state.params, seqs)
    lens = [len(s.response) for s in seqs]
    new_c, old_c, ref_c, adv_c = (np.concatenate(x) for x in (new, old, ref, adv))
    ratios = grpo.importance_ratio(new_c, old_c)
    surrogate = grpo.clipped_surrogate(ratios, adv_c, stage.clip)
    kl = grpo.kl_k3(new_c, ref_c)
    loss, derivs = grpo.assemble_loss(surrogate, kl, stage.kl, token_count=new_c.size)
    splits = np.split(derivs, np.cumsum(lens)[:-1])
    grad = grad_weighted_logprob(state.params, list(zip(seqs, splits)))
    state.params, state.opt = adamw_update(state.params, grad, state.opt)
    return loss, ratios


def _json_float(x):
    if x is None:
        return None
    x = float(x)
    return x if math.isfinite(x) else None


def train_step(state, stage, prompts, step=None):
    """Rollout, filter, then one AdamW update per minibatch. Mutates ``state``; returns metrics."""
    prompts = list(prompts)
    if len(prompts) != stage.batch_size:
        raise ValueError(f"expected {stage.batch_size} prompts, got {len(prompts)}")
    groups = rollout_batch(state, stage, prompts, step)
    all_seqs = [s for g in groups for s in g.seqs]
    old_c = np.concatenate([lp for g in groups for lp in g.old_logps])
    ref_c = np.concatenate([lp for g in groups for lp in g.ref_logps])
    kl_values, _ = grpo.kl_k3(old_c, ref_c)
    metrics = {
        "entropy": mean_token_entropy(state.params, all_seqs),
        "kl": float(kl_values.mean()),
        "mean_len": float(np.mean([len(s.response) for s in all_seqs])),
        "mean_reward": float(np.mean([g.shaped.mean() for g in groups])),
    }
    kept = dynamic_filter(groups)
    metrics["filter_rate"] = 1.0 - len(kept) / len(groups)
    losses, ratios = [], []
    if kept:
        bounds = np.array_split(np.arange(len(kept)), stage.num_minibatches)
        chunks = [[kept[i] for i in idx] for idx in bounds if idx.size]
        for chunk in chunks:
            loss, r = _minibatch_update(state, stage, chunk)
            losses.append(loss)
            ratios.append(r)
    metrics.update(
        loss=float(np.mean(losses)) if losses else None,
        mean_ratio=float(np.concatenate(ratios).mean()) if ratios else None,
        skipped=not kept,
        updates=len(losses),
    )
    return metrics


# -- reference resets ------------------------------------------------------------


def hard_reset(state, stage=None):
    """Snapshot the online policy as the new reference and zero the optimizer."""
    state.ref = state.params.copy()
    hyper = state.opt.hyper()
    if stage is not None:
        hyper.update(lr=stage.lr, weight_decay=stage.weight_decay)
    state.opt = OptimizerState.zeros(state.params.size, **hyper)
    state.last_reset_step = state.global_step
    state.reset_eval_index = len(state.val_history)
    return state


def stagnated(scores, window, min_delta):
    """True when the last ``window - 1`` scores improve on the earlier best by less than ``min_delta``."""
    if len(scores) < window:
        return False
    earlier = max(scores[:len(scores) - window + 1])
    recent = max(scores[len(scores) - window + 1:])
    return recent - earlier < min_delta


def maybe_reset(state, policy, history=None):
    if history is None:
        history = [s for _, s in state.val_history[state.reset_eval_index:]]
    if policy.interval is not None and state.global_step - state.last_reset_step >= policy.interval:
        return True
    if policy.window is not None and stagnated(history, policy.window, policy.min_delta):
        return True
    return False


# -- staged runs ---------------------------------------------------------------------


def sample_prompts(stage, seed, step):
    """The stage's batch of training instances for ``step``, drawn from the train seed range."""
    rng = np.random.default_rng([seed, _TAG_PROMPTS, step])
    weights = np.array([m.weight for m in stage.mixture], dtype=np.float64)
    weights /= weights.sum()
    fams = rng.choice(len(stage.mixture), size=stage.batch_size, p=weights)
    idx = rng.integers(0, 1 << 20, size=stage.batch_size)
    out = []
    for f, i in zip(fams, idx):
        entry = stage.mixture[int(f)]
        out.append(generate(entry.family, entry.difficulty, split_seed("train", seed % (1 << 20), int(i))))
    return out


@dataclass
class ValidationSpec:
    instances: list
    n: int = 16
    cadence: int = 50
    temperature: float = EVAL_TEMPERATURE
    max_len: int | None = None


def build_validation_set(mixture, per_family, seed):
    """Held-out instances from the validation seed range, ``per_family`` per mixture entry."""
    out = []
    for entry in mixture:
        for i in range(per_family):
            out.append(generate(entry.family, entry.difficulty, split_seed("validation", seed % (1 << 20), i)))
    return out


def validate(state, spec, max_len):
    matrix = evaluate_policy(
        state.params, spec.instances, spec.n, spec.temperature,
        spec.max_len or max_len, seed=state.seed,
    )
    k16 = min(16, spec.n)
    curve = pass_at_k_curve(matrix, [1, k16])
    return float(curve.mean[0]), float(curve.mean[1])


def stage_at(stages, step):
    start = 0
    for i, st in enumerate(stages):
        if i == len(stages) - 1 or step < start + st.steps:
            return i
        start += st.steps
    return len(stages) - 1


def run_stages(state, stages, total_steps, validation=None, sink=None, prompts_fn=None, on_reset=None):
    """Train until ``state.global_step == total_steps``; returns ``(state, metrics log)``.

    ``sink`` receives each metrics record as soon as it exists. ``on_reset``
    is called with the state right after every hard reset.
    """
    stages = list(stages)
    if not stages:
        raise ValueError("stage list must be nonempty")
    prompts_fn = prompts_fn or (lambda stage, step: sample_prompts(stage, state.seed, step))
    log = []
    while state.global_step < total_steps:
        reset_flag = False
        idx = stage_at(stages, state.global_step)
        while state.stage_index < idx:
            state.stage_index += 1
            new_stage = stages[state.stage_index]
            state.opt.lr, state.opt.weight_decay = new_stage.lr, new_stage.weight_decay
            if new_stage.reset.at_start:
                hard_reset(state, new_stage)
                reset_flag = True
                if on_reset:
                    on_reset(state)
        stage = stages[state.stage_index]
        step = state.global_step
        metrics = train_step(state, stage, prompts_fn(stage, step), step)
        state.global_step += 1
        val1 = val16 = None
        if validation is not None and validation.cadence and state.global_step % validation.cadence == 0:
            val1, val16 = validate(state, validation, stage.max_len)
            state.val_history.append((state.global_step, val1))
        if stage.reset.enabled and maybe_reset(state, stage.reset):
            hard_reset(state, stage)
            reset_flag = True
            if on_reset:
                on_reset(state)
        record = {
            "step": step, "stage": state.stage_index, "val_pass1": val1, "val_pass16": val16,
            "reset_flag": reset_flag, **metrics,
        }
        record = {k: (_json_float(record[k]) if isinstance(record[k], float) else record[k])
                  for k in METRIC_FIELDS}
        log.append(record)
        if sink is not None:
            sink(record)
    return state, log


def metrics_line(record):
    return json.dumps(record, sort_keys=False, allow_nan=False)


# -- checkpoints -----------------------------------------------------------------------

TRAINER_MAGIC = b"DRLTRAIN"
TRAINER_VERSION = 1
_T_HEADER = struct.Struct("<8sIQ")


def state_to_bytes(state):
    meta = {
        "seed": state.seed,
        "global_step": state.global_step,
        "stage_index": state.stage_index,
        "last_reset_step": state.last_reset_step,
        "reset_eval_index": state.reset_eval_index,
        "val_history": [[int(s), float(v)] for s, v in state.val_history],
        "opt_step": state.opt.step,
        "opt": state.opt.hyper(),
    }
    meta_b = json.dumps(meta, sort_keys=True).encode()
    parts = [_T_HEADER.pack(TRAINER_MAGIC, TRAINER_VERSION, len(meta_b)), meta_b]
    for blob in (state.params.to_bytes(), state.ref.to_bytes()):
        parts += [struct.pack("<Q", len(blob)), blob]
    parts += [state.opt.m.astype("<f8").tobytes(), state.opt.v.astype("<f8").tobytes()]
    return b"".join(parts)


def state_from_bytes(data):
    if len(data) < _T_HEADER.size:
        raise CheckpointError("magic", "file shorter than the header")
    magic, version, meta_len = _T_HEADER.unpack_from(data)
    if magic != TRAINER_MAGIC:
        raise CheckpointError("magic", f"expected {TRAINER_MAGIC!r}, found {magic!r}")
    if version != TRAINER_VERSION:
        raise CheckpointError("version", f"unsupported format version {version}")
    pos = _T_HEADER.size
    try:
        meta = json.loads(data[pos:pos + meta_len])
    except ValueError as exc:
        raise CheckpointError("meta", str(exc)) from exc
    pos += meta_len
    blobs = []
    for name in ("params", "ref"):
        if pos + 8 > len(data):
            raise CheckpointError(name, "truncated")
        (n,) = struct.unpack_from("<Q", data, pos)
        pos += 8
        blobs.append(PolicyParameters.from_bytes(data[pos:pos + n]))
        pos += n
    params, ref = blobs
    if not params.same_structure(ref):
        raise CheckpointError("ref", "reference and online policy dimensions differ")
    size = params.size
    if len(data) - pos != 16 * size:
        raise CheckpointError("optimizer", f"expected {16 * size} bytes of moments, found {len(data) - pos}")
    m = np.frombuffer(data, dtype="<f8", count=size, offset=pos).astype(np.float64)
    v = np.frombuffer(data, dtype="<f8", count=size, offset=pos + 8 * size).astype(np.float64)
    opt = OptimizerState(m, v, step=meta["opt_step"], **meta["opt"])
    return TrainerState(
        params, ref, opt, seed=meta["seed"], global_step=meta["global_step"],
        stage_index=meta["stage_index"], last_reset_step=meta["last_reset_step"],
        reset_eval_index=meta["reset_eval_index"],
        val_history=[(int(s), float(v)) for s, v in meta["val_history"]],
    )


def save_state(state, path):
    with open(path, "wb") as fh:
        fh.write(state_to_bytes(state))


def load_state(path):
    with open(path, "rb") as fh:
        return state_from_bytes(fh.read())
