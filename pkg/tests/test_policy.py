import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from deskrl.errors import EmptyBatch, InvalidToken, ShapeMismatch
from deskrl.policy import (
    PolicyParameters,
    TokenSequence,
    contexts,
    grad_weighted_logprob,
    init_params,
    logprobs,
    mean_token_entropy,
    sample,
    sample_batch,
    token_distributions,
)
from deskrl.vocab import EOS, VOCAB


def _scalar_logprob_oracle(params, seq):
    """Scalar re-evaluation of the forward chain with math.fsum and exp/log in plain Python."""
    V, d, h, w = params.dims()
    E = params.embed.tolist()
    W1 = params.w_hidden.tolist()
    b1 = params.b_hidden.tolist()
    W2 = params.w_out.tolist()
    b2 = params.b_out.tolist()
    full = [0] * w + list(seq.prompt) + list(seq.response)
    out = []
    for t, tok in enumerate(seq.response):
        window = full[len(seq.prompt) + t:len(seq.prompt) + t + w]
        x = [E[c][k] for c in window for k in range(d)]
        a = [math.tanh(math.fsum([x[i] * W1[i][j] for i in range(w * d)] + [b1[j]])) for j in range(h)]
        z = [math.fsum([a[j] * W2[j][v] for j in range(h)] + [b2[v]]) for v in range(V)]
        m = max(z)
        lse = m + math.log(math.fsum(math.exp(zi - m) for zi in z))
        out.append(z[tok] - lse)
    return out


def _loss(params, batch):
    return sum(float(np.dot(w, logprobs(params, s))) for s, w in batch)


def _fd_grad(params, batch, h=1e-5):
    g = np.zeros(params.size)
    for i in range(params.size):
        p = params.copy()
        p.flat[i] += h
        up = _loss(p, batch)
        p.flat[i] -= 2 * h
        down = _loss(p, batch)
        g[i] = (up - down) / (2 * h)
    return g


def test_zero_weights_give_uniform_logprobs():
    params = PolicyParameters(VOCAB.size, 16, 32, 4)
    seq = TokenSequence((5, 6, 7), (8, 9, EOS), True)
    np.testing.assert_array_equal(logprobs(params, seq), -math.log(VOCAB.size))


def test_empty_response():
    params = init_params(VOCAB.size, seed=0)
    assert logprobs(params, TokenSequence((5,), (), False)).shape == (0,)


def test_logprobs_match_scalar_oracle():
    params = init_params(VOCAB.size, d=4, h=5, w=3, seed=7, std=0.5)
    seq = TokenSequence((10, 15, 11), (4, 20, 2), False)
    got = logprobs(params, seq)
    want = _scalar_logprob_oracle(params, seq)
    np.testing.assert_allclose(got, want, rtol=0, atol=1e-12)


def test_invalid_token():
    params = PolicyParameters(10, 2, 2, 2)
    with pytest.raises(InvalidToken):
        logprobs(params, TokenSequence((3,), (10,), False))


def test_contexts_left_pad():
    ctx = contexts((7, 8), (9, 10), 3)
    assert ctx.tolist() == [[0, 7, 8], [7, 8, 9]]


def test_distribution_normalised():
    params = init_params(VOCAB.size, seed=3, std=1.0)
    seq = TokenSequence((5, 6), (7, 8, 9, 10), False)
    np.testing.assert_allclose(token_distributions(params, seq).sum(axis=1), 1.0, atol=1e-10)


def test_uniform_sampling_frequencies():
    params = PolicyParameters(VOCAB.size, 4, 4, 2)
    rngs = [np.random.default_rng([1, i]) for i in range(100_000)]
    out = sample_batch(params, [(5,)] * len(rngs), 1.0, 1, rngs)
    counts = np.bincount([s.response[0] for s, _ in out], minlength=VOCAB.size)
    n, p = len(rngs), 1.0 / VOCAB.size
    sigma = math.sqrt(n * p * (1 - p))
    assert np.all(np.abs(counts - n * p) <= 3 * sigma + 1)


def test_high_temperature_is_uniform():
    params = init_params(VOCAB.size, seed=1, std=1.0)
    from deskrl.policy import _forward, log_softmax

    _, _, z = _forward(params, contexts((5, 6), (7,), params.w))
    p = np.exp(log_softmax(z / 1e6))[0]
    tv = 0.5 * np.abs(p - 1.0 / VOCAB.size).sum()
    assert tv <= 1e-4


def test_sample_reproducible_and_logprobs_fresh():
    params = init_params(VOCAB.size, seed=2)
    a = sample(params, (5, 6, 7), 1.2, 12, np.random.default_rng(9))
    b = sample(params, (5, 6, 7), 1.2, 12, np.random.default_rng(9))
    assert a[0] == b[0]
    np.testing.assert_array_equal(a[1], b[1])
    np.testing.assert_array_equal(a[1], logprobs(params, a[0]))
    assert len(a[0].response) <= 12
    assert a[0].terminated == (a[0].response[-1] == EOS)


def test_entropy_uniform_and_degenerate():
    zero = PolicyParameters(VOCAB.size, 4, 4, 2)
    seqs = [TokenSequence((5,), (6, 7), False)]
    assert mean_token_entropy(zero, seqs) == pytest.approx(math.log(VOCAB.size), abs=1e-12)
    peaked = zero.copy()
    peaked.b_out[9] = 1e6
    assert mean_token_entropy(peaked, seqs) <= 1e-6


def test_entropy_two_way_split():
    params = PolicyParameters(8, 2, 2, 2)
    params.b_out[2:] = -1e6
    seqs = [TokenSequence((5,), (4,), False)]
    assert mean_token_entropy(params, seqs) == pytest.approx(math.log(2), abs=1e-12)


def test_entropy_empty_batch():
    with pytest.raises(EmptyBatch):
        mean_token_entropy(PolicyParameters(8, 2, 2, 2), [])


def test_grad_linearity():
    params = init_params(VOCAB.size, seed=4)
    seq = TokenSequence((5, 6), (7, 8, EOS), True)
    w = np.array([0.3, -1.2, 0.5])
    g1 = grad_weighted_logprob(params, [(seq, w)]).flat
    g2 = grad_weighted_logprob(params, [(seq, 2 * w)]).flat
    np.testing.assert_allclose(g2, 2 * g1, rtol=1e-12, atol=0)
    g0 = grad_weighted_logprob(params, [(seq, np.zeros(3))]).flat
    assert not g0.any()


def test_grad_shape_mismatch():
    params = init_params(10, d=2, h=2, w=2)
    with pytest.raises(ShapeMismatch):
        grad_weighted_logprob(params, [(TokenSequence((5,), (6, 7), False), [1.0])])


def test_grad_matches_finite_differences():
    params = init_params(10, d=4, h=4, w=2, seed=11, std=0.5)
    rng = np.random.default_rng(11)
    seq = TokenSequence((5, 6), tuple(rng.integers(0, 10, size=4)), False)
    batch = [(seq, rng.normal(size=4))]
    analytic = grad_weighted_logprob(params, batch).flat
    numeric = _fd_grad(params, batch)
    rel = np.abs(analytic - numeric) / np.maximum(np.abs(numeric), 1e-8)
    assert rel.max() <= 1e-4


def test_grad_additive_over_batches():
    params = init_params(VOCAB.size, seed=5)
    a = (TokenSequence((5,), (6, 7), False), [1.0, -0.5])
    b = (TokenSequence((8, 9), (10,), False), [2.0])
    both = grad_weighted_logprob(params, [a, b]).flat
    split = grad_weighted_logprob(params, [a]).flat + grad_weighted_logprob(params, [b]).flat
    np.testing.assert_allclose(both, split, atol=1e-12)


@settings(max_examples=15, deadline=None)
@given(seed=st.integers(0, 10_000), vocab=st.integers(8, 12), w=st.integers(1, 3))
def test_grad_fd_property(seed, vocab, w):
    params = init_params(vocab, d=3, h=3, w=w, seed=seed, std=0.7)
    assert params.size <= 2000
    rng = np.random.default_rng(seed)
    seqs = [
        (TokenSequence(tuple(rng.integers(0, vocab, 2)), tuple(rng.integers(0, vocab, 3)), False),
         rng.normal(size=3))
        for _ in range(2)
    ]
    analytic = grad_weighted_logprob(params, seqs).flat
    numeric = _fd_grad(params, seqs)
    err = np.abs(analytic - numeric)
    assert np.all(err <= 1e-4 * np.maximum(np.abs(numeric), 1e-8) + 1e-8)


def test_checkpoint_roundtrip_bit_exact(tmp_path):
    from deskrl.errors import CheckpointError
    from deskrl.policy import load_params, save_params

    params = init_params(VOCAB.size, seed=8)
    path = tmp_path / "p.bin"
    save_params(params, path)
    loaded = load_params(path)
    assert loaded == params
    assert loaded.to_bytes() == path.read_bytes()
    corrupt = bytearray(path.read_bytes())
    corrupt[8] = 99
    with pytest.raises(CheckpointError) as exc:
        PolicyParameters.from_bytes(bytes(corrupt))
    assert exc.value.field == "version"


def test_param_views_share_storage():
    params = init_params(12, d=2, h=3, w=2)
    params.b_out[0] = 123.0
    assert params.flat[-12] == 123.0
