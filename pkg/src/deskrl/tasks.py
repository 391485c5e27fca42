"""Procedural verifiable-reward tasks.

Every generator works answer-first: it samples the solution, then builds the
problem around it, so every instance is solvable by construction. Responses
are expected to put the answer between ``<answer>`` and ``</answer>``.

Canonical encodings (token symbols, see :mod:`deskrl.vocab`):

``arithmetic``  difficulty ``operands`` (2-4), ``modulus`` (2-10), ``ops``
    (subset of ``"+-*"``). Prompt ``m % a1 op a2 [op a3 ...]``; evaluated
    left to right modulo ``m``. Answer: one digit. Binary reward.
``reversal``    difficulty ``length`` (1-8). Prompt ``| s1 ... sL`` over
    letters a-f. Answer: the string reversed. Binary reward.
``parens``      difficulty ``pairs`` (1-6). Prompt is an unbalanced prefix of
    a random balanced string; answer is the ``)`` run that closes it. Binary.
``graph_color`` difficulty ``nodes`` (2-12). Prompt is the flattened edge list
    ``u1 v1 u2 v2 ...`` of a connected bipartite graph on letters a-l.
    Answer: one colour (``X``/``Y``) per node in letter order. Reward is the
    fraction of edges whose endpoints get different colours, given a complete
    assignment; an incomplete or malformed answer scores 0.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from fractions import Fraction

import numpy as np

from .errors import InsufficientInstances, InvalidDifficulty
from .vocab import ANSWER_CLOSE, ANSWER_OPEN, COLORS, DIGITS, EOS, LETTERS, VOCAB

_PLUS, _MINUS, _TIMES = VOCAB.encode("+-*")
_PERCENT, _BAR = VOCAB.id("%"), VOCAB.id("|")
_LPAREN, _RPAREN = VOCAB.id("("), VOCAB.id(")")
_OP_TOKENS = {"+": _PLUS, "-": _MINUS, "*": _TIMES}

FAMILIES = ("arithmetic", "reversal", "parens", "graph_color")
FAMILY_IDS = {name: i for i, name in enumerate(FAMILIES)}

DEFAULT_DIFFICULTY = {
    "arithmetic": {"operands": 2, "modulus": 7, "ops": "+"},
    "reversal": {"length": 3},
    "parens": {"pairs": 3},
    "graph_color": {"nodes": 6},
}
# the one size knob each family exposes to difficulty sweeps
SIZE_KEY = {"arithmetic": "operands", "reversal": "length", "parens": "pairs", "graph_color": "nodes"}
_CAPS = {
    "arithmetic": {"operands": (2, 4), "modulus": (2, 10)},
    "reversal": {"length": (1, 8)},
    "parens": {"pairs": (1, 6)},
    "graph_color": {"nodes": (2, 12)},
}
CONTINUOUS_FAMILIES = frozenset({"graph_color"})


@dataclass(frozen=True)
class TaskInstance:
    family: str
    prompt: tuple
    answer: tuple
    difficulty: dict = field(hash=False)
    seed: int = 0
    payload: tuple = ()

    def record(self):
        """Dataset-dump record (one JSON line)."""
        return {
            "family": self.family,
            "difficulty": self.difficulty,
            "seed": self.seed,
            "prompt": list(self.prompt),
            "answer": list(self.answer),
        }

    def tagged_answer(self):
        """Reference response: the ground truth wrapped in answer tags, then EOS."""
        return (ANSWER_OPEN,) + self.answer + (ANSWER_CLOSE, EOS)


@dataclass(frozen=True)
class Verdict:
    reward: float
    correct: bool
    parse_ok: bool


def resolve_difficulty(family, difficulty=None):
    if family not in FAMILIES:
        raise InvalidDifficulty(f"unknown task family {family!r}")
    spec = dict(DEFAULT_DIFFICULTY[family])
    for key, value in (difficulty or {}).items():
        if key not in spec:
            raise InvalidDifficulty(f"{family} has no difficulty parameter {key!r}")
        spec[key] = value
    for key, (lo, hi) in _CAPS[family].items():
        v = spec[key]
        if not isinstance(v, (int, np.integer)) or not lo <= v <= hi:
            raise InvalidDifficulty(f"{family}.{key}={v!r} outside [{lo}, {hi}]")
        spec[key] = int(v)
    if family == "arithmetic":
        ops = spec["ops"]
        if not ops or any(o not in _OP_TOKENS for o in ops) or len(set(ops)) != len(ops):
            raise InvalidDifficulty(f"arithmetic.ops={ops!r} must be a nonempty subset of '+-*'")
    return spec


def _rng(family, seed):
    return np.random.default_rng([FAMILY_IDS[family], int(seed)])


def _gen_arithmetic(rng, spec):
    m, k, ops = spec["modulus"], spec["operands"], spec["ops"]
    vals = [int(v) for v in rng.integers(0, m, size=k)]
    chosen = [ops[int(i)] for i in rng.integers(0, len(ops), size=k - 1)]
    acc = vals[0]
    for op, v in zip(chosen, vals[1:]):
        acc = {"+": acc + v, "-": acc - v, "*": acc * v}[op] % m
    prompt = [DIGITS[m], _PERCENT] if m < 10 else [DIGITS[1], DIGITS[0], _PERCENT]
    prompt.append(DIGITS[vals[0]])
    for op, v in zip(chosen, vals[1:]):
        prompt += [_OP_TOKENS[op], DIGITS[v]]
    return tuple(prompt), (DIGITS[acc],), ()


def _gen_reversal(rng, spec):
    s = [LETTERS[int(i)] for i in rng.integers(0, 6, size=spec["length"])]
    return (_BAR, *s), tuple(reversed(s)), ()


def _gen_parens(rng, spec):
    n = spec["pairs"]
    # uniform random balanced string by rejection (acceptance rate 1/(n+1))
    while True:
        bits = rng.permutation([1] * n + [0] * n)
        depth = np.cumsum(np.where(bits == 1, 1, -1))
        if depth.min() >= 0:
            break
    cut_points = [i + 1 for i in range(2 * n) if depth[i] > 0]
    cut = cut_points[int(rng.integers(len(cut_points)))]
    prefix = [_LPAREN if b else _RPAREN for b in bits[:cut]]
    return tuple(prefix), (_RPAREN,) * int(depth[cut - 1]), ()


def _gen_graph(rng, spec):
    n = spec["nodes"]
    # balanced colour classes of sizes floor(n/2) and ceil(n/2), random membership
    colors = [0] * n
    for v in rng.permutation(n)[: n // 2]:
        colors[int(v)] = 1
    order = [int(i) for i in rng.permutation(n)]
    # random spanning tree: each node attaches to an earlier node of the other colour
    edges = set()
    placed = [order[0]]
    pending = order[1:]
    while pending:
        progress = False
        for v in list(pending):
            opp = [u for u in placed if colors[u] != colors[v]]
            if opp:
                u = opp[int(rng.integers(len(opp)))]
                edges.add((min(u, v), max(u, v)))
                placed.append(v)
                pending.remove(v)
                progress = True
        if not progress:  # unreachable: both colours occur, so some pending node has an opposite
            raise AssertionError("spanning tree construction stalled")
    extra = (n + 2) // 3
    side_a = [v for v in range(n) if colors[v] == 0]
    side_b = [v for v in range(n) if colors[v] == 1]
    candidates = [(min(a, b), max(a, b)) for a in side_a for b in side_b]
    candidates = [e for e in candidates if e not in edges]
    if candidates:
        picks = rng.permutation(len(candidates))[:extra]
        edges.update(candidates[int(i)] for i in picks)
    edge_list = sorted(edges)
    edge_list = [edge_list[int(i)] for i in rng.permutation(len(edge_list))]
    prompt = tuple(tok for u, v in edge_list for tok in (LETTERS[u], LETTERS[v]))
    return prompt, tuple(COLORS[c] for c in colors), tuple(edge_list)


_GENERATORS = {
    "arithmetic": _gen_arithmetic,
    "reversal": _gen_reversal,
    "parens": _gen_parens,
    "graph_color": _gen_graph,
}


def generate(family, difficulty=None, seed=0):
    """Deterministically build one instance of ``family`` from ``seed``."""
    spec = resolve_difficulty(family, difficulty)
    prompt, answer, payload = _GENERATORS[family](_rng(family, seed), spec)
    return TaskInstance(family, prompt, answer, spec, int(seed), payload)


def parse_answer(response):
    """Tokens between the first answer-open tag and the next answer-close tag, else ``None``."""
    response = list(response)
    try:
        start = response.index(ANSWER_OPEN)
    except ValueError:
        return None
    for i in range(start + 1, len(response)):
        if response[i] == ANSWER_CLOSE:
            return tuple(response[start + 1:i])
        if response[i] == EOS:
            return None
    return None


def _graph_reward(instance, answer):
    n = instance.difficulty["nodes"]
    if len(answer) != n or any(t not in COLORS for t in answer):
        return None
    ok = sum(answer[u] != answer[v] for u, v in instance.payload)
    return Fraction(ok, len(instance.payload))


def verify(instance, response):
    """Score ``response`` against ``instance``. Total: never raises for any token list."""
    answer = parse_answer(response)
    if answer is None:
        return Verdict(0.0, False, False)
    if instance.family in CONTINUOUS_FAMILIES:
        frac = _graph_reward(instance, answer)
        if frac is None:
            return Verdict(0.0, False, False)
        return Verdict(float(frac), frac == 1, True)
    correct = answer == instance.answer
    return Verdict(1.0 if correct else 0.0, correct, True)


_SPLIT_OFFSETS = {"train": 0, "validation": 1 << 40, "test": 2 << 40}
_SPLIT_STRIDE = 1 << 20


def split_seed(split, master_seed, index):
    """Generator seed for the ``index``-th candidate of ``split``; ranges never overlap."""
    if not 0 <= master_seed < (1 << 20) or not 0 <= index < _SPLIT_STRIDE:
        raise ValueError("master seed and index must lie in [0, 2**20)")
    return _SPLIT_OFFSETS[split] + master_seed * _SPLIT_STRIDE + index


def make_splits(family, difficulty, counts, master_seed, max_tries=20_000):
    """Train/validation/test instance lists with pairwise-disjoint prompts.

    Seeds come from disjoint ranges per split; candidates whose prompt was
    already taken by any split are skipped.
    """
    if len(counts) != 3 or min(counts) < 1:
        raise ValueError("counts must be three positive integers")
    seen = set()
    out = []
    for split, count in zip(("train", "validation", "test"), counts):
        chosen, index = [], 0
        while len(chosen) < count:
            if index >= max_tries:
                raise InsufficientInstances(
                    f"{family} at {difficulty} yielded only {len(chosen)} distinct {split} prompts"
                )
            inst = generate(family, difficulty, split_seed(split, master_seed, index))
            index += 1
            if inst.prompt in seen:
                continue
            seen.add(inst.prompt)
            chosen.append(inst)
        out.append(chosen)
    return tuple(out)


def dump_dataset(instances, path):
    with open(path, "w") as fh:
        for inst in instances:
            fh.write(json.dumps(inst.record(), sort_keys=True) + "\n")


def load_dataset(path):
    out = []
    with open(path) as fh:
        for line in fh:
            rec = json.loads(line)
            out.append(generate(rec["family"], rec["difficulty"], rec["seed"]))
    return out


def chance_rate(instance, vocab_size, max_len):
    """Exact probability that a uniform token policy earns reward 1 on ``instance``.

    Enumerates the response automaton: before the open tag, inside the answer
    (tracking the longest matched prefix of an accepted answer), and done.
    For ``graph_color`` every proper colouring is accepted.
    """
    accepted = _accepted_answers(instance)
    p = Fraction(1, vocab_size)
    # state: None = before open tag, tuple = answer tokens emitted so far (only prefixes of
    # some accepted answer are tracked; anything else is a dead end)
    prefixes = {a[:i] for a in accepted for i in range(len(a) + 1)}
    dist = {None: Fraction(1)}
    win = Fraction(0)
    for _ in range(max_len):
        nxt = {}
        for state, mass in dist.items():
            if state is None:
                # EOS ends the episode, OPEN enters the answer, anything else stays put
                nxt[()] = nxt.get((), 0) + mass * p
                nxt[None] = nxt.get(None, 0) + mass * p * (vocab_size - 2)
                continue
            if state in accepted:
                win += mass * p  # next token CLOSE completes a correct answer
            for tok in set(t for a in accepted for t in a):
                ext = state + (tok,)
                if ext in prefixes:
                    nxt[ext] = nxt.get(ext, 0) + mass * p
        dist = nxt
    return win


def _accepted_answers(instance):
    if instance.family != "graph_color":
        return {instance.answer}
    swapped = tuple(COLORS[1] if t == COLORS[0] else COLORS[0] for t in instance.answer)
    # the generated graph is connected, so the colouring is unique up to a swap
    return {instance.answer, swapped}
