import math

import numpy as np
import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st

from vscd.alignment import (
    RefineHead,
    candidate_set,
    dump_alignment,
    load_alignment,
    reference_support,
    segment_proposals,
    similarity_grid,
    soft_matching,
)


def one_hot_rows(s_hat, T):
    P = np.full((len(s_hat), T), 0.01)
    P[np.arange(len(s_hat)), s_hat] = 1.0
    return P / P.sum(1, keepdims=True)


def test_identical_descriptors_give_unit_diagonal():
    v = torch.randn(5, 7, dtype=torch.float64)
    S = similarity_grid(v, v)
    assert torch.allclose(S.diagonal(), torch.ones(5, dtype=torch.float64), atol=1e-12)


def test_orthogonal_descriptors():
    S = similarity_grid(torch.tensor([[1.0, 0.0]]), torch.tensor([[0.0, 1.0]]))
    assert S.item() == 0.0


def test_similarity_matches_dot_norm_oracle(rng):
    q = rng.normal(size=(3, 6))
    r = rng.normal(size=(3, 6))
    S = similarity_grid(torch.from_numpy(q), torch.from_numpy(r)).numpy()
    for t in range(3):
        for s in range(3):
            want = sum(a * b for a, b in zip(q[t], r[s])) / math.sqrt(sum(a * a for a in q[t]) * sum(b * b for b in r[s]))
            assert abs(S[t, s] - want) < 1e-6


def test_zero_norm_descriptor_rejected():
    with pytest.raises(ValueError):
        similarity_grid(torch.zeros(2, 4), torch.ones(2, 4))


def test_refine_is_identity_at_init():
    S = torch.rand(8, 8) * 2 - 1
    assert torch.equal(RefineHead()(S), S)


def test_refine_constant_input_has_constant_interior():
    head = RefineHead()
    torch.nn.init.normal_(head.conv2.weight)
    res = head.residual(torch.full((9, 9), 0.3)).detach()
    interior = res[2:-2, 2:-2]
    assert torch.allclose(interior, interior[0, 0].expand_as(interior), atol=1e-6)


def test_refine_matches_sliding_window_oracle(rng):
    torch.manual_seed(3)
    head = RefineHead(hidden=3).double()
    torch.nn.init.normal_(head.conv2.weight)
    S = rng.uniform(-1, 1, size=(5, 5))

    def conv(x, w, b):
        # x [C, H, W], zero padding 1, w [O, C, 3, 3]
        c, h, wd = x.shape
        xp = np.zeros((c, h + 2, wd + 2))
        xp[:, 1:-1, 1:-1] = x
        out = np.zeros((w.shape[0], h, wd))
        for o in range(w.shape[0]):
            for i in range(h):
                for j in range(wd):
                    out[o, i, j] = b[o] + np.sum(w[o] * xp[:, i : i + 3, j : j + 3])
        return out

    w1, b1 = head.conv1.weight.detach().numpy(), head.conv1.bias.detach().numpy()
    w2, b2 = head.conv2.weight.detach().numpy(), head.conv2.bias.detach().numpy()
    want = S + conv(np.maximum(conv(S[None], w1, b1), 0), w2, b2)[0]
    got = head(torch.from_numpy(S)).detach().numpy()
    assert np.allclose(got, want, atol=1e-10)


def test_soft_matching_uniform_row():
    P = soft_matching(torch.zeros(1, 4), 0.5)
    assert torch.allclose(P, torch.full((1, 4), 0.25))


def test_soft_matching_closed_form():
    P = soft_matching(torch.tensor([[1.0, 0.0]], dtype=torch.float64), 0.5)
    e2 = math.exp(2)
    assert abs(P[0, 0].item() - e2 / (e2 + 1)) < 1e-12
    assert abs(P[0, 1].item() - 1 / (e2 + 1)) < 1e-12
    assert abs(P[0, 0].item() - 0.8808) < 1e-4


def test_soft_matching_rejects_bad_temperature():
    with pytest.raises(ValueError):
        soft_matching(torch.zeros(2, 2), 0.0)


@settings(max_examples=60, deadline=None)
@given(st.integers(2, 10), st.floats(0.05, 5.0), st.floats(0.1, 10.0), st.integers(0, 2**31 - 1))
def test_rows_stochastic_and_argmax_preserved(T, tau, scale, seed):
    A = torch.from_numpy(np.random.default_rng(seed).normal(size=(T, T)) * 3)
    P = soft_matching(A, tau)
    assert torch.allclose(P.sum(1), torch.ones(T, dtype=P.dtype), atol=1e-6)
    assert (P >= 0).all() and (P <= 1).all()
    assert torch.equal(P.argmax(1), soft_matching(A, tau * scale).argmax(1))
    assert torch.equal(P.argmax(1), A.argmax(1))


def test_segment_grouping_hand_trace():
    P = one_hot_rows([3, 4, 5, 9, 10], 12)
    segs = segment_proposals(P, P, delta=0, min_len=2, L_max=5)
    assert [(s.t0, s.t1) for s in segs] == [(0, 2), (3, 4)]


def test_segment_chop_at_L_max():
    P = one_hot_rows(list(range(8)), 8)
    segs = segment_proposals(P, P, delta=0, min_len=2, L_max=5)
    assert [(s.t0, s.t1) for s in segs] == [(0, 4), (5, 7)]


def test_far_jumps_become_singleton_fills():
    P = one_hot_rows([0, 7, 0, 7, 0, 7, 0, 7], 8)
    segs = segment_proposals(P, P, delta=0, min_len=2, L_max=5)
    assert [(s.t0, s.t1) for s in segs] == [(t, t) for t in range(8)]
    assert all(s.singleton_fill for s in segs)


def test_low_logit_split():
    P = one_hot_rows([0, 1, 2, 3, 4, 5], 6)
    A = np.array(P)
    A[2, 2] = -5.0
    segs = segment_proposals(P, A, delta=0, min_len=2, L_max=6, split_quantile=0.2)
    assert [(s.t0, s.t1) for s in segs] == [(0, 1), (2, 2), (3, 5)]
    assert segs[1].singleton_fill


def test_candidate_anchor_is_top1_when_supported():
    row = np.array([0.05, 0.4, 0.1, 0.2, 0.15, 0.06, 0.04])
    P = row[None]
    segs = segment_proposals(P, P)
    cs = candidate_set(0, segs, P, K=6, cap=6)
    assert cs.candidates == [1, 3, 4, 2, 5, 0]


def test_candidate_dedup_hand_trace():
    # R(t) = {7}; global ranking 2, 7, 5, 1
    row = np.zeros(8)
    row[[2, 7, 5, 1]] = [0.4, 0.3, 0.15, 0.1]
    row[[0, 3, 4, 6]] = 0.0125
    P = row[None]
    from vscd.alignment import SegmentProposal

    segs = [SegmentProposal(0, 0, [7], 0.0)]
    cs = candidate_set(0, segs, P, K=4, cap=6)
    assert cs.anchor == 7
    assert cs.candidates == [7, 2, 5, 1]
    assert cs.confidences == [row[s] for s in cs.candidates]


def test_candidate_tie_breaks_to_smallest_index():
    P = np.full((1, 5), 0.2)
    cs = candidate_set(0, segment_proposals(P, P), P, K=2, cap=6)
    assert cs.anchor == 0
    assert cs.candidates == [0, 1]


def fuzz_top1_paths(n=1000, seed=0):
    rng = np.random.default_rng(seed)
    for _ in range(n):
        T = int(rng.integers(1, 17))
        A = rng.normal(size=(T, T))
        if rng.random() < 0.5:  # bias toward near-diagonal paths
            A += 3 * np.eye(T)[:, np.clip(np.arange(T) + rng.integers(-1, 2), 0, T - 1)]
        yield A, dict(delta=int(rng.integers(0, 3)), min_len=int(rng.integers(1, 3)),
                      L_max=int(rng.integers(2, 7)), split_quantile=float(rng.choice([0.0, 0.1, 0.3])),
                      K=int(rng.integers(1, 7)), cap=int(rng.integers(1, 8)))


def check_segments_and_candidates(A, kw):
    P = soft_matching(torch.from_numpy(A), 0.5).numpy()
    segs = segment_proposals(P, A, kw["delta"], kw["min_len"], kw["L_max"], kw["split_quantile"])
    T = A.shape[0]
    covered = set()
    for s in segs:
        assert s.t0 <= s.t1
        if not s.singleton_fill:
            assert kw["min_len"] <= len(s) <= kw["L_max"]
        covered.update(range(s.t0, s.t1 + 1))
    assert covered == set(range(T))
    for t in range(T):
        cs = candidate_set(t, segs, P, kw["K"], kw["cap"])
        support = reference_support(t, segs)
        assert cs.anchor in support and cs.candidates[0] == cs.anchor
        assert cs.anchor == max(sorted(support), key=lambda s: (P[t, s], -s))
        ranked = sorted(range(T), key=lambda s: (-P[t, s], s))[: kw["K"]]
        assert cs.candidates == ([cs.anchor] + [s for s in ranked if s != cs.anchor])[: kw["cap"]]
        assert len(set(cs.candidates)) == len(cs.candidates)
        assert 1 <= len(cs.candidates) <= kw["cap"]
        assert cs.confidences == [float(P[t, s]) for s in cs.candidates]


def test_fuzzed_coverage_and_candidate_invariants():
    for A, kw in fuzz_top1_paths():
        check_segments_and_candidates(A, kw)


def test_alignment_dump_round_trip(tmp_path):
    S = np.random.default_rng(0).uniform(-1, 1, (4, 4)).astype(np.float32)
    dump_alignment(tmp_path / "a.f32", S, S + 1, S * 0.5)
    s, a, p = load_alignment(tmp_path / "a.f32")
    assert np.array_equal(s, S) and np.array_equal(a, S + 1) and np.array_equal(p, S * 0.5)
