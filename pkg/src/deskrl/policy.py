"""Tiny autoregressive policy: a fixed-window MLP over token embeddings.

For response position ``t`` the model looks at the last ``w`` tokens of
``prompt + response[:t]`` (left padded with PAD), concatenates their
embeddings, applies one tanh hidden layer and projects to vocabulary logits::

    x_t = concat(E[c_1], ..., E[c_w])        (w*d,)
    a_t = tanh(x_t @ W1 + b1)                (h,)
    z_t = a_t @ W2 + b2                      (V,)

Everything is float64. All weights live in a single flat vector so that the
optimizer and the checkpoint format can treat them uniformly.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass

import numpy as np

from .errors import CheckpointError, EmptyBatch, InvalidToken, ShapeMismatch
from .vocab import EOS, PAD

MAGIC = b"DRLPOLCY"
FORMAT_VERSION = 1
_HEADER = struct.Struct("<8sIIIII")
MAX_PARAMS = 100_000


@dataclass(frozen=True)
class TokenSequence:
    prompt: tuple
    response: tuple
    terminated: bool

    def __post_init__(self):
        object.__setattr__(self, "prompt", tuple(int(t) for t in self.prompt))
        object.__setattr__(self, "response", tuple(int(t) for t in self.response))
        if self.terminated and (not self.response or self.response[-1] != EOS):
            raise ValueError("terminated sequence must end with EOS")


class PolicyParameters:
    """All policy weights, stored contiguously in ``flat``.

    The named attributes (``embed``, ``w_hidden``...) are views into ``flat``;
    writing through them writes the flat vector.
    """

    def __init__(self, vocab_size, d, h, w, flat=None):
        self.vocab_size, self.d, self.h, self.w = int(vocab_size), int(d), int(h), int(w)
        if min(self.vocab_size, self.d, self.h, self.w) < 1:
            raise ValueError("all dimensions must be positive")
        n = self.num_params(self.vocab_size, self.d, self.h, self.w)
        if n > MAX_PARAMS:
            raise ValueError(f"{n} parameters exceeds the desk-scale cap of {MAX_PARAMS}")
        if flat is None:
            flat = np.zeros(n)
        flat = np.ascontiguousarray(flat, dtype=np.float64)
        if flat.shape != (n,):
            raise ShapeMismatch(f"expected {n} parameters, got shape {flat.shape}")
        self.flat = flat
        self._bind_views()

    @staticmethod
    def num_params(vocab_size, d, h, w):
        return vocab_size * d + w * d * h + h + h * vocab_size + vocab_size

    def shapes(self):
        V, d, h, w = self.vocab_size, self.d, self.h, self.w
        return {
            "embed": (V, d),
            "w_hidden": (w * d, h),
            "b_hidden": (h,),
            "w_out": (h, V),
            "b_out": (V,),
        }

    def _bind_views(self):
        offset = 0
        for name, shape in self.shapes().items():
            size = int(np.prod(shape))
            setattr(self, name, self.flat[offset:offset + size].reshape(shape))
            offset += size

    @property
    def size(self):
        return self.flat.size

    def dims(self):
        return (self.vocab_size, self.d, self.h, self.w)

    def copy(self):
        return PolicyParameters(*self.dims(), flat=self.flat.copy())

    def zeros_like(self):
        return PolicyParameters(*self.dims())

    def same_structure(self, other):
        return self.dims() == other.dims()

    def __eq__(self, other):
        if not isinstance(other, PolicyParameters):
            return NotImplemented
        return self.same_structure(other) and np.array_equal(self.flat, other.flat)

    def __repr__(self):
        V, d, h, w = self.dims()
        return f"PolicyParameters(vocab_size={V}, d={d}, h={h}, w={w}, n={self.size})"

    # -- checkpoint format -------------------------------------------------

    def to_bytes(self):
        header = _HEADER.pack(MAGIC, FORMAT_VERSION, *self.dims())
        return header + self.flat.astype("<f8").tobytes()

    @classmethod
    def from_bytes(cls, data):
        if len(data) < _HEADER.size:
            raise CheckpointError("magic", "file shorter than the header")
        magic, version, V, d, h, w = _HEADER.unpack_from(data)
        if magic != MAGIC:
            raise CheckpointError("magic", f"expected {MAGIC!r}, found {magic!r}")
        if version != FORMAT_VERSION:
            raise CheckpointError("version", f"unsupported format version {version}")
        if not 8 <= V <= 64:
            raise CheckpointError("vocab_size", f"implausible vocabulary size {V}")
        for name, value in (("d", d), ("h", h), ("w", w)):
            if value < 1 or value > 4096:
                raise CheckpointError(name, f"implausible dimension {value}")
        n = cls.num_params(V, d, h, w)
        if n > MAX_PARAMS:
            raise CheckpointError("d", f"dimensions imply {n} parameters")
        payload = data[_HEADER.size:]
        if len(payload) != 8 * n:
            raise CheckpointError("payload", f"expected {8 * n} bytes, found {len(payload)}")
        flat = np.frombuffer(payload, dtype="<f8").astype(np.float64)
        if not np.all(np.isfinite(flat)):
            raise CheckpointError("payload", "non-finite weights")
        return cls(V, d, h, w, flat=flat)


def init_params(vocab_size, d=16, h=32, w=4, seed=0, std=0.1):
    """Gaussian initialisation (every entry, biases included)."""
    rng = np.random.default_rng(seed)
    n = PolicyParameters.num_params(vocab_size, d, h, w)
    return PolicyParameters(vocab_size, d, h, w, flat=rng.normal(0.0, std, size=n))


def save_params(params, path):
    with open(path, "wb") as fh:
        fh.write(params.to_bytes())


def load_params(path):
    with open(path, "rb") as fh:
        return PolicyParameters.from_bytes(fh.read())


# -- forward machinery ------------------------------------------------------


def _check_tokens(params, tokens):
    for t in tokens:
        if not 0 <= t < params.vocab_size:
            raise InvalidToken(f"token id {t} outside vocabulary of size {params.vocab_size}")


def contexts(prompt, response, w):
    """(len(response), w) array of the window preceding each response token."""
    full = [PAD] * w + list(prompt) + list(response)
    start = w + len(prompt)
    ctx = np.empty((len(response), w), dtype=np.int64)
    for t in range(len(response)):
        ctx[t] = full[start + t - w:start + t]
    return ctx


def _forward(params, ctx):
    x = params.embed[ctx].reshape(ctx.shape[0], params.w * params.d)
    a = np.tanh(x @ params.w_hidden + params.b_hidden)
    z = a @ params.w_out + params.b_out
    return x, a, z


def log_softmax(z):
    shifted = z - z.max(axis=-1, keepdims=True)
    return shifted - np.log(np.exp(shifted).sum(axis=-1, keepdims=True))


def logprobs(params, seq):
    """Per-token log-probabilities of ``seq.response`` under ``params``."""
    _check_tokens(params, seq.prompt)
    _check_tokens(params, seq.response)
    if not seq.response:
        return np.zeros(0)
    ctx = contexts(seq.prompt, seq.response, params.w)
    _, _, z = _forward(params, ctx)
    lp = log_softmax(z)
    return lp[np.arange(len(seq.response)), np.asarray(seq.response)]


def logprobs_batch(params, seqs):
    # One forward per sequence so that a sequence's log-probs never depend on
    # what else is in the batch (bitwise freshness of stored old log-probs).
    return [logprobs(params, s) for s in seqs]


def token_distributions(params, seq):
    """(len(response), V) next-token probabilities at every response position."""
    if not seq.response:
        return np.zeros((0, params.vocab_size))
    _, _, z = _forward(params, contexts(seq.prompt, seq.response, params.w))
    return np.exp(log_softmax(z))


# -- sampling ---------------------------------------------------------------


def sample_batch(params, prompts, temperature, max_len, rngs):
    """Sample one response per prompt, each with its own rng stream.

    Each stream contributes ``max_len`` uniforms up front, so a trajectory's
    draws do not depend on how many other trajectories share the batch.
    Returned log-probs are under the untempered policy.
    """
    if temperature <= 0:
        raise ValueError("temperature must be positive")
    if max_len < 1:
        raise ValueError("max_len must be >= 1")
    if len(prompts) != len(rngs):
        raise ShapeMismatch("one rng stream per prompt is required")
    B, w, V = len(prompts), params.w, params.vocab_size
    for p in prompts:
        _check_tokens(params, p)
    uniforms = np.stack([r.random(max_len) for r in rngs]) if B else np.zeros((0, max_len))
    windows = np.full((B, w), PAD, dtype=np.int64)
    for i, p in enumerate(prompts):
        tail = list(p)[-w:] if p else []
        if tail:
            windows[i, w - len(tail):] = tail
    responses = [[] for _ in range(B)]
    active = np.arange(B)
    for t in range(max_len):
        if active.size == 0:
            break
        _, _, z = _forward(params, windows[active])
        probs = np.exp(log_softmax(z / temperature))
        cdf = np.cumsum(probs, axis=1)
        tok = (cdf <= uniforms[active, t][:, None]).sum(axis=1)
        tok = np.minimum(tok, V - 1)
        for i, tk in zip(active, tok):
            responses[i].append(int(tk))
        windows[active, :-1] = windows[active, 1:]
        windows[active, -1] = tok
        active = active[tok != EOS]
    seqs = [
        TokenSequence(p, r, terminated=bool(r) and r[-1] == EOS)
        for p, r in zip(prompts, responses)
    ]
    return [(s, logprobs(params, s)) for s in seqs]


def sample(params, prompt, temperature, max_len, rng):
    """Sample a single response; returns ``(TokenSequence, per-token log-probs)``."""
    return sample_batch(params, [tuple(prompt)], temperature, max_len, [rng])[0]


def greedy_decode(params, prompt, max_len):
    """Arg-max decoding, used by the estimator's ``predict``."""
    response = []
    for _ in range(max_len):
        ctx = contexts(prompt, response + [PAD], params.w)[-1:]
        _, _, z = _forward(params, ctx)
        tok = int(np.argmax(z[0]))
        response.append(tok)
        if tok == EOS:
            break
    return TokenSequence(prompt, response, terminated=response[-1] == EOS)


# -- entropy ----------------------------------------------------------------


def _entropy_rows(z):
    lp = log_softmax(z)
    p = np.exp(lp)
    return -(p * np.where(p > 0, lp, 0.0)).sum(axis=1)


def mean_token_entropy(params, seqs):
    """Average next-token entropy (nats) over every response position in ``seqs``."""
    seqs = list(seqs)
    if not seqs or not any(s.response for s in seqs):
        raise EmptyBatch("no response tokens to average over")
    ctx = np.concatenate([contexts(s.prompt, s.response, params.w) for s in seqs if s.response])
    _, _, z = _forward(params, ctx)
    return float(np.clip(_entropy_rows(z).mean(), 0.0, np.log(params.vocab_size)))


# -- gradients --------------------------------------------------------------


def grad_weighted_logprob(params, batch):
    """Gradient of ``sum_t weight_t * log pi(token_t)`` over a batch.

    ``batch`` is a sequence of ``(TokenSequence, weights)`` pairs with one
    weight per response token. Returns a ``PolicyParameters`` holding the
    gradient.
    """
    ctxs, targets, weights = [], [], []
    for seq, wts in batch:
        wts = np.asarray(wts, dtype=np.float64)
        if wts.shape != (len(seq.response),):
            raise ShapeMismatch(
                f"{wts.size} weights for a response of {len(seq.response)} tokens"
            )
        if not np.all(np.isfinite(wts)):
            raise ValueError("weights must be finite")
        _check_tokens(params, seq.prompt)
        _check_tokens(params, seq.response)
        if seq.response:
            ctxs.append(contexts(seq.prompt, seq.response, params.w))
            targets.extend(seq.response)
            weights.append(wts)
    grad = params.zeros_like()
    if not ctxs:
        return grad
    ctx = np.concatenate(ctxs)
    y = np.asarray(targets)
    wt = np.concatenate(weights)
    x, a, z = _forward(params, ctx)
    p = np.exp(log_softmax(z))
    # d/dz of w * log softmax(z)[y] = w * (onehot(y) - p)
    dz = -p * wt[:, None]
    dz[np.arange(y.size), y] += wt
    grad.w_out[...] = a.T @ dz
    grad.b_out[...] = dz.sum(axis=0)
    da = (dz @ params.w_out.T) * (1.0 - a * a)
    grad.w_hidden[...] = x.T @ da
    grad.b_hidden[...] = da.sum(axis=0)
    dx = (da @ params.w_hidden.T).reshape(ctx.shape[0], params.w, params.d)
    np.add.at(grad.embed, ctx, dx)
    return grad
