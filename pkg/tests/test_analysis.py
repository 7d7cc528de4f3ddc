import itertools
import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from convlora.adapters import GateDecision, GateParams, gate_scores
from convlora.analysis import (EPS, expert_utilization, fourier_log_amplitude, grid_distances,
                               mean_attention_distance, read_pgm, write_pgm, write_report_csv)
from convlora.encoder import EncoderConfig, MiniViT
from convlora.errors import DataError
from convlora.tensor import Tensor


def uniform_attn(B, h, L):
    return np.full((B, h, L, L), 1.0 / L)


def all_pairs_mean(gh, gw):
    cells = list(itertools.product(range(gh), range(gw)))
    return sum(math.dist(a, b) for a in cells for b in cells) / len(cells) ** 2


# --- attention distance


def test_uniform_2x2_value():
    rep = mean_attention_distance(uniform_attn(1, 1, 4), (2, 2))
    # per query: (0 + 1 + 1 + sqrt 2) / 4, the same for all four queries
    assert abs(rep.distances[0, 0] - (2 + math.sqrt(2)) / 4) < 1e-9
    assert abs(rep.distances[0, 0] - all_pairs_mean(2, 2)) < 1e-9


@pytest.mark.parametrize("grid", [(1, 1), (2, 3), (3, 3), (4, 5), (8, 8)])
def test_uniform_matches_enumeration(grid):
    L = grid[0] * grid[1]
    rep = mean_attention_distance(uniform_attn(2, 3, L), grid)
    assert np.abs(rep.distances - all_pairs_mean(*grid)).max() < 1e-9


def test_identity_attention_is_zero():
    a = np.broadcast_to(np.eye(9), (2, 4, 9, 9))
    assert np.all(mean_attention_distance(a, (3, 3)).distances == 0)


def test_single_patch_grid_is_zero():
    assert mean_attention_distance(np.ones((3, 2, 1, 1)), (1, 1)).distances.max() == 0


def test_head_permutation_and_batch_order():
    rng = np.random.default_rng(0)
    a = rng.random((5, 4, 16, 16))
    a /= a.sum(-1, keepdims=True)
    base = mean_attention_distance(a, (4, 4)).distances[0]
    perm = [2, 0, 3, 1]
    np.testing.assert_allclose(mean_attention_distance(a[:, perm], (4, 4)).distances[0], base[perm],
                               rtol=0, atol=1e-12)
    np.testing.assert_allclose(mean_attention_distance(a[::-1], (4, 4)).distances[0], base,
                               rtol=0, atol=1e-12)


def test_distance_bounded_by_diameter():
    rng = np.random.default_rng(1)
    a = rng.random((2, 2, 12, 12))
    a /= a.sum(-1, keepdims=True)
    d = mean_attention_distance(a, (3, 4)).distances
    assert (d >= 0).all() and (d <= grid_distances((3, 4)).max()).all()


def test_unnormalised_rows_rejected():
    with pytest.raises(DataError):
        mean_attention_distance(np.ones((1, 1, 4, 4)), (2, 2))
    with pytest.raises(DataError):
        mean_attention_distance(uniform_attn(1, 1, 4), (3, 3))


def test_distance_on_real_encoder():
    m = MiniViT(EncoderConfig(image_size=32, patch_size=8, dim=8, heads=2))
    _, state = m(np.random.default_rng(2).normal(size=(2, 3, 32, 32)))
    rep = mean_attention_distance(state.attn, (4, 4))
    assert rep.distances.shape == (2, 2)
    assert len(rep.rows()) == 4


# --- spectrum


def dft_oracle(x):
    H, W = x.shape
    u = np.arange(H)[:, None, None, None]
    v = np.arange(W)[None, :, None, None]
    i = np.arange(H)[None, None, :, None]
    j = np.arange(W)[None, None, None, :]
    return np.abs((x * np.exp(-2j * np.pi * (u * i / H + v * j / W))).sum(axis=(2, 3)))


def test_fft_agrees_with_direct_dft():
    x = np.random.default_rng(3).normal(size=(6, 5))
    np.testing.assert_allclose(np.abs(np.fft.fft2(x)), dft_oracle(x), atol=1e-10)


def test_constant_map_sits_at_floor():
    c = 0.75
    rep = fourier_log_amplitude(np.full((2, 3, 8, 8), c))
    floor = math.log(EPS) - math.log(c * 64 + EPS)
    assert rep.rel_log_amp[0] == 0.0
    assert np.abs(rep.rel_log_amp[1:] - floor).max() < 1e-2
    assert np.ptp(rep.rel_log_amp[1:]) < 1e-2
    assert len(rep.radius) == 1 + 4


def test_impulse_is_flat():
    x = np.zeros((1, 1, 8, 8))
    x[0, 0, 3, 5] = 1.0
    amp = dft_oracle(x[0, 0])
    assert np.ptp(amp) < 1e-12
    rep = fourier_log_amplitude(x)
    assert np.abs(rep.rel_log_amp).max() < 1e-9


def test_checkerboard_energy_in_last_bin():
    i, j = np.indices((8, 8))
    x = np.where((i + j) % 2 == 0, 1.0, -1.0)[None, None]
    amp = dft_oracle(x[0, 0])
    assert amp[4, 4] == pytest.approx(64) and np.delete(amp.ravel(), 4 * 8 + 4).max() < 1e-9
    rep = fourier_log_amplitude(x + 1e-3)
    vals = rep.rel_log_amp[1:]
    assert np.argmax(vals) == len(vals) - 1


def test_adding_constant_only_moves_dc_amplitude():
    rng = np.random.default_rng(4)
    x = rng.normal(size=(2, 3, 8, 8)) + 2.0
    a = np.abs(np.fft.fft2(x))
    b = np.abs(np.fft.fft2(x + 5.0))
    mask = np.ones((8, 8), bool)
    mask[0, 0] = False
    assert np.abs(a[..., mask] - b[..., mask]).max() < 1e-9
    # relative values therefore shift by the per-channel DC ratio only
    r1 = fourier_log_amplitude(x[:1, :1]).rel_log_amp
    r2 = fourier_log_amplitude(x[:1, :1] + 5.0).rel_log_amp
    shift = math.log(a[0, 0, 0, 0] + EPS) - math.log(b[0, 0, 0, 0] + EPS)
    assert np.abs((r2[1:] - r1[1:]) - shift).max() < 1e-9


def test_spectrum_layers_and_errors():
    rep = fourier_log_amplitude([np.ones((1, 1, 4, 4)), np.ones((1, 1, 4, 4))])
    assert rep.rel_log_amp.shape == (2, 3)
    assert len(rep.rows()) == 6
    with pytest.raises(DataError):
        fourier_log_amplitude(np.ones((1, 1, 1, 4)))


# --- utilization


def gate_decisions(rng, B, n, k, W_g=None):
    z = Tensor(rng.normal(size=(B, 3, 4, 4)))
    W_g = rng.normal(size=(3, n)) if W_g is None else W_g
    return gate_scores(z, GateParams(Tensor(W_g), Tensor(np.zeros((3, n))), k=k))


@settings(max_examples=25, deadline=None)
@given(st.integers(0, 10_000), st.integers(1, 6), st.integers(1, 4), st.data())
def test_counts_conserved(seed, n_dec, n, data):
    k = data.draw(st.integers(1, n))
    rng = np.random.default_rng(seed)
    decs = [(i, "q", gate_decisions(rng, 5, n, k)) for i in range(n_dec)]
    hist = expert_utilization(decs, n)
    assert hist.counts.sum() == k * 5 * n_dec
    assert sum(c.sum() for c in hist.per_layer.values()) == hist.counts.sum()


def test_forced_gate():
    rng = np.random.default_rng(5)
    W_g = np.zeros((3, 4))
    W_g[:, 2] = 1e6
    z = Tensor(np.abs(rng.normal(size=(6, 3, 4, 4))))
    dec = gate_scores(z, GateParams(Tensor(W_g), Tensor(np.zeros((3, 4)))))
    hist = expert_utilization([dec], 4)
    assert hist.counts.tolist() == [0, 0, 6, 0]
    assert hist.frequencies.tolist() == [0, 0, 1, 0]


def test_utilization_wrong_width():
    with pytest.raises(DataError):
        expert_utilization([gate_decisions(np.random.default_rng(0), 2, 3, 1)], 4)


def test_empty_log():
    assert expert_utilization([], 3).counts.tolist() == [0, 0, 0]


# --- output formats


def test_pgm_round_trip(tmp_path):
    img = np.random.default_rng(6).integers(0, 256, (5, 6)).astype(float)
    img[0, :3] = [9, 0, 255]  # first byte is a tab: whitespace-splitting readers drop it
    write_pgm(tmp_path / "a.pgm", img)
    back = read_pgm(tmp_path / "a.pgm")
    assert back.shape == (5, 6)
    expect = np.round((img - img.min()) / (img.max() - img.min()) * 255).astype(np.uint8)
    assert np.array_equal(back, expect)


def test_report_csv(tmp_path):
    write_report_csv(tmp_path / "r.csv", ("layer", "head", "distance"), [(0, 1, 0.5)])
    assert (tmp_path / "r.csv").read_text().splitlines() == ["layer,head,distance", "0,1,0.5"]
