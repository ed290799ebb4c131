import numpy as np
import pytest

from mooss.autodiff import Tensor, sinusoidal_table
from mooss.decoder import ActionEmbedder, DecoderConfig, PredictiveDecoder, build_token_sequence
from mooss.errors import ConfigError, UsageError


def make(d=8, depth=2, heads=2, seed=0):
    return PredictiveDecoder(DecoderConfig(depth, heads, d, d), np.random.default_rng(seed))


def test_token_order_and_length():
    rng = np.random.default_rng(0)
    emb = ActionEmbedder(5, 4, rng)
    s = rng.normal(size=(1, 3, 4))
    a = np.array([[2, 0, 4]])
    seq = build_token_sequence(s, a, emb)
    assert seq.tokens.shape == (1, 6, 4)
    act = emb(a).data
    for i in range(3):
        np.testing.assert_allclose(seq.tokens.data[0, 2 * i] - seq.positions[2 * i], s[0, i], atol=1e-15)
        np.testing.assert_allclose(seq.tokens.data[0, 2 * i + 1] - seq.positions[2 * i + 1], act[0, i], atol=1e-15)


def test_zero_content_gives_positional_table():
    emb = ActionEmbedder(5, 6, np.random.default_rng(0))
    emb.lin.weight.data[:] = 0
    emb.lin.bias.data[:] = 0
    seq = build_token_sequence(np.zeros((2, 4, 6)), np.zeros((2, 4), dtype=int), emb)
    expected = np.repeat(sinusoidal_table(4, 6), 2, axis=0)
    assert np.array_equal(seq.tokens.data[0], expected)
    assert np.array_equal(seq.tokens.data[1], expected)


def test_pair_shares_position():
    seq = build_token_sequence(np.zeros((1, 5, 8)), np.zeros((1, 5), dtype=int),
                               ActionEmbedder(5, 8, np.random.default_rng(0)))
    for i in range(5):
        assert np.array_equal(seq.positions[2 * i], seq.positions[2 * i + 1])
    assert not np.array_equal(seq.positions[0], seq.positions[2])


def test_token_length_mismatch():
    emb = ActionEmbedder(5, 4, np.random.default_rng(0))
    with pytest.raises(UsageError):
        build_token_sequence(np.zeros((1, 3, 4)), np.zeros((1, 2), dtype=int), emb)
    with pytest.raises(UsageError):
        emb(np.array([5]))


def test_output_shape():
    dec = make()
    out = dec(np.random.default_rng(0).normal(size=(3, 4, 8)), np.zeros((3, 4), dtype=int))
    assert out.shape == (3, 4, 8)


def test_config_validation():
    with pytest.raises(ConfigError):
        DecoderConfig(2, 3, 8).validate()
    with pytest.raises(ConfigError):
        DecoderConfig(0, 2, 8).validate()


def _perturb_outputs(dec, s, a, token):
    """Decoder output after perturbing one token: even index = state i, odd = action i."""
    s2, a2 = s.copy(), a.copy()
    i = token // 2
    if token % 2 == 0:
        # a constant shift would be cancelled by layer norm
        s2[0, i] += np.random.default_rng(token).normal(size=s.shape[-1])
    else:
        a2[0, i] = (a2[0, i] + 1) % 5
    return dec(s2, a2).data


def test_causality_sweep():
    F, d = 4, 8
    rng = np.random.default_rng(0)
    dec = make(d=d)
    s = rng.normal(size=(1, F, d))
    a = rng.integers(5, size=(1, F))
    base = dec(s, a).data
    for token in range(2 * F):
        out = _perturb_outputs(dec, s, a, token)
        diff = np.abs(out - base).max(axis=-1)[0]
        for i in range(F):
            if token > 2 * i:
                assert diff[i] <= 1e-12, (token, i, diff[i])
            else:
                assert diff[i] > 1e-9, (token, i, diff[i])


def test_own_action_is_not_visible():
    dec = make()
    rng = np.random.default_rng(1)
    s = rng.normal(size=(1, 3, 8))
    a = np.array([[0, 1, 2]])
    base = dec(s, a).data
    a2 = a.copy()
    a2[0, 1] = 4
    out = dec(s, a2).data
    assert np.abs(out[0, 1] - base[0, 1]).max() <= 1e-12
    assert np.abs(out[0, 2] - base[0, 2]).max() > 1e-9


def test_first_state_reaches_every_output():
    dec = make()
    rng = np.random.default_rng(0)
    s = rng.normal(size=(1, 5, 8))
    a = rng.integers(5, size=(1, 5))
    base = dec(s, a).data
    s2 = s.copy()
    s2[0, 0] += 0.1 * rng.normal(size=8)
    assert (np.abs(dec(s2, a).data - base).max(axis=-1) > 1e-9).all()


def test_pair_swap_with_positions_is_a_relabelling():
    # moving pair j (content and its p_j) into slot i and vice versa only relabels tokens, so
    # without the causal mask the block outputs permute the same way
    dec = make(depth=2)
    rng = np.random.default_rng(3)
    s = rng.normal(size=(1, 4, 8))
    a = rng.integers(5, size=(1, 4))
    seq = build_token_sequence(s, a, dec.actions)
    order = np.array([4, 5, 2, 3, 0, 1, 6, 7])  # swap pairs 0 and 2
    no_mask = np.zeros((8, 8))

    def run(tokens):
        x = Tensor(tokens)
        for block in dec.blocks:
            x = block(x, no_mask)
        return x.data

    base = run(seq.tokens.data)
    swapped = run(seq.tokens.data[:, order])
    np.testing.assert_allclose(swapped, base[:, order], atol=1e-12)
