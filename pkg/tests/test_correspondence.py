import math

import numpy as np
import pytest
import torch

from vscd.correspondence import (
    ChangeHead,
    cosine_map,
    expected_displacement,
    local_correlation,
    offset_validity,
    patch_match,
    warp,
    window_offsets,
)


def correlation_oracle(q, r, k):
    """Triple loop over cells and offsets."""
    d, h, w = q.shape
    rad = (k - 1) // 2
    out = np.full((k * k, h, w), -np.inf)
    for y in range(h):
        for x in range(w):
            i = 0
            for dy in range(-rad, rad + 1):
                for dx in range(-rad, rad + 1):
                    yy, xx = y + dy, x + dx
                    if 0 <= yy < h and 0 <= xx < w:
                        out[i, y, x] = sum(q[c, y, x] * r[c, yy, xx] for c in range(d))
                    i += 1
    return out


def bilinear_oracle(grid, dx, dy):
    """Scalar bilinear sampling with clamp-to-edge."""
    d, h, w = grid.shape
    out = np.zeros_like(grid)
    for y in range(h):
        for x in range(w):
            sx = min(max(x + dx[y, x], 0), w - 1)
            sy = min(max(y + dy[y, x], 0), h - 1)
            x0, y0 = int(math.floor(sx)), int(math.floor(sy))
            x1, y1 = min(x0 + 1, w - 1), min(y0 + 1, h - 1)
            ax, ay = sx - x0, sy - y0
            out[:, y, x] = ((1 - ax) * (1 - ay) * grid[:, y0, x0] + ax * (1 - ay) * grid[:, y0, x1]
                            + (1 - ax) * ay * grid[:, y1, x0] + ax * ay * grid[:, y1, x1])
    return out


def test_k1_self_correlation_is_squared_norm():
    q = torch.randn(1, 5, 4, 4, dtype=torch.float64)
    logits, valid = local_correlation(q, q, 1)
    assert valid.all()
    assert torch.allclose(logits[0, 0], (q[0] ** 2).sum(0))


def test_corner_cell_has_four_valid_offsets():
    valid = offset_validity(3, 4, 4)
    assert valid[:, 0, 0].sum() == 4
    assert valid[:, 1, 1].sum() == 9


@pytest.mark.parametrize("k", [1, 3, 5])
def test_correlation_matches_triple_loop(rng, k):
    for size in (4, 8):
        q = rng.normal(size=(3, size, size))
        r = rng.normal(size=(3, size, size))
        got, _ = local_correlation(torch.from_numpy(q)[None], torch.from_numpy(r)[None], k)
        want = correlation_oracle(q, r, k)
        fin = np.isfinite(want)
        assert np.array_equal(np.isfinite(got[0].numpy()), fin)
        assert np.abs(got[0].numpy()[fin] - want[fin]).max() < 1e-6


def test_patch_match_k1():
    P = patch_match(torch.randn(1, 1, 3, 3))
    assert torch.equal(P, torch.ones(1, 1, 3, 3))


def test_patch_match_uniform_and_closed_form():
    P = patch_match(torch.zeros(1, 9, 1, 1))
    assert torch.allclose(P, torch.full((1, 9, 1, 1), 1 / 9))
    logits = torch.zeros(1, 9, 1, 1, dtype=torch.float64)
    logits[0, 0] = 1.0
    P = patch_match(logits)[0, :, 0, 0]
    e = math.e
    assert abs(P[0].item() - e / (e + 8)) < 1e-12
    assert torch.allclose(P[1:], torch.full((8,), 1 / (e + 8), dtype=torch.float64))


def test_patch_match_masks_invalid_offsets():
    q = torch.randn(2, 4, 5, 5)
    logits, valid = local_correlation(q, torch.randn(2, 4, 5, 5), 5)
    P = patch_match(logits)
    assert torch.all(P[:, ~valid] == 0)
    assert torch.allclose(P.sum(1), torch.ones(2, 5, 5), atol=1e-6)


def test_expected_displacement_cases():
    k = 3
    centre = window_offsets(k).index((0, 0))
    right = window_offsets(k).index((1, 0))
    P = torch.zeros(1, 9, 1, 1)
    P[0, centre] = 1
    assert torch.equal(expected_displacement(P, k), torch.zeros(1, 2, 1, 1))
    assert torch.allclose(expected_displacement(torch.full((1, 9, 1, 1), 1 / 9), k), torch.zeros(1, 2, 1, 1), atol=1e-7)
    P = torch.zeros(1, 9, 1, 1)
    P[0, centre] = 0.5
    P[0, right] = 0.5
    assert torch.allclose(expected_displacement(P, k)[0, :, 0, 0], torch.tensor([0.5, 0.0]))


def test_displacement_bounded(rng):
    for k in (1, 3, 5, 7):
        logits, _ = local_correlation(torch.randn(3, 4, 6, 6) * 5, torch.randn(3, 4, 6, 6) * 5, k)
        d = expected_displacement(patch_match(logits), k)
        assert d.abs().max() <= (k - 1) / 2 + 1e-6


def test_warp_zero_is_identity():
    g = torch.randn(2, 5, 6, 7)
    assert torch.equal(warp(g, torch.zeros(2, 2, 6, 7)), g)


def test_warp_integer_shift_with_clamp():
    g = torch.randn(1, 3, 5, 6)
    d = torch.zeros(1, 2, 5, 6)
    d[:, 0] = 1.0
    want = torch.cat([g[..., 1:], g[..., -1:]], dim=-1)
    assert torch.equal(warp(g, d), want)
    d = torch.zeros(1, 2, 5, 6)
    d[:, 1] = -2.0
    want = torch.cat([g[:, :, :1], g[:, :, :1], g[:, :, :-2]], dim=2)
    assert torch.equal(warp(g, d), want)


def test_warp_half_cell_row():
    g = torch.tensor([[[[0.0, 10.0, 20.0]]]])
    d = torch.zeros(1, 2, 1, 3)
    d[:, 0] = 0.5
    assert torch.allclose(warp(g, d)[0, 0, 0], torch.tensor([5.0, 15.0, 20.0]))


def test_warp_matches_bilinear_oracle(rng):
    g = rng.normal(size=(3, 5, 6))
    dx, dy = rng.uniform(-2.5, 2.5, size=(2, 5, 6))
    got = warp(torch.from_numpy(g)[None], torch.from_numpy(np.stack([dx, dy]))[None])[0].numpy()
    assert np.abs(got - bilinear_oracle(g, dx, dy)).max() < 1e-12


def test_change_head_identity_pair():
    head = ChangeHead(8, 4, 6).double()
    q = torch.randn(1, 8, 4, 4, dtype=torch.float64)
    x = head.features(q, q)
    assert torch.equal(x[:, 8:12], torch.zeros_like(x[:, 8:12]))
    assert torch.allclose(x[:, 12], torch.ones_like(x[:, 12]))


def test_change_head_zero_fusion_gives_bias_map():
    head = ChangeHead(8, 4, 6)
    torch.nn.init.zeros_(head.fuse.weight)
    with torch.no_grad():
        head.fuse.bias.copy_(torch.linspace(-1, 1, 6))
    out = head(torch.randn(2, 8, 4, 4), torch.randn(2, 8, 4, 4))
    want = torch.relu(torch.linspace(-1, 1, 6)).view(1, 6, 1, 1).expand_as(out)
    assert torch.equal(out, want)


def test_cosine_channel_matches_per_cell_oracle(rng):
    a = rng.normal(size=(1, 4, 3, 3))
    b = rng.normal(size=(1, 4, 3, 3))
    a[0, :, 1, 1] = 0.0
    got = cosine_map(torch.from_numpy(a), torch.from_numpy(b))[0, 0].numpy()
    for y in range(3):
        for x in range(3):
            u, v = a[0, :, y, x], b[0, :, y, x]
            nu, nv = np.sqrt(u @ u), np.sqrt(v @ v)
            want = 0.0 if nu * nv == 0 else (u @ v) / (nu * nv)
            assert abs(got[y, x] - want) < 1e-6


def test_change_feature_gradients_match_finite_differences():
    torch.manual_seed(0)
    head = ChangeHead(6, 3, 4).double()
    q = torch.randn(1, 6, 4, 4, dtype=torch.float64, requires_grad=True)
    r = torch.randn(1, 6, 4, 4, dtype=torch.float64, requires_grad=True)

    def f(q, r):
        logits, _ = local_correlation(q, r, 3)
        d = expected_displacement(patch_match(logits), 3)
        return (head(q, warp(r, d)) ** 2).sum()

    assert torch.autograd.gradcheck(f, (q, r), eps=1e-6, atol=1e-6, rtol=1e-3)


def test_translation_equivariance_on_interior():
    torch.manual_seed(1)
    head = ChangeHead(4, 2, 3).double()
    big_q = torch.randn(1, 4, 10, 10, dtype=torch.float64)
    big_r = torch.randn(1, 4, 10, 10, dtype=torch.float64)

    def feat(q, r):
        logits, _ = local_correlation(q, r, 3)
        return head(q, warp(r, expected_displacement(patch_match(logits), 3)))

    a = feat(big_q[..., :9, :9], big_r[..., :9, :9])
    b = feat(big_q[..., 1:, 1:], big_r[..., 1:, 1:])
    # cells whose 3x3 window, warp support and conv support stay inside both crops
    assert torch.allclose(a[..., 4:7, 4:7], b[..., 3:6, 3:6], atol=1e-10)
