import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from hypothesis.extra.numpy import arrays

from pdprune import autodiff as ad
from pdprune.autodiff import Tensor, backward
from pdprune.core import MaskParams, compute_threshold, finalize_hard, soft_mask
from pdprune.errors import InputError
from pdprune.structured import (ChannelView, NMConfig, channel_finalize, channel_norms, channel_soft_mask,
                                channel_threshold, finalize_structured, nm_finalize, nm_soft_mask,
                                nm_threshold_map, nm_thresholds)

from oracles import channel_keep_brute, nm_keep_brute


def test_nm_config_validation():
    for n, m in [(0, 4), (4, 4), (5, 4), (2.0, 4)]:
        with pytest.raises(InputError):
            NMConfig(n, m)
    assert NMConfig(2, 8).ratio == 0.75


def test_nm_threshold_example():
    assert nm_thresholds(np.array([0.1, -0.5, 0.2, 0.05]), NMConfig(1, 4)).tolist() == pytest.approx([0.35])


def test_nm_all_ties_keeps_lowest_indices():
    w = np.ones(4)
    assert nm_thresholds(w, NMConfig(2, 4)).tolist() == [1.0]
    _, mask = nm_finalize(w, NMConfig(2, 4))
    assert mask.tolist() == [1, 1, 0, 0]


def test_nm_group_larger_than_layer():
    with pytest.raises(InputError):
        nm_thresholds(np.ones(3), NMConfig(2, 4))


def test_nm_exact_on_large_random_layer(rng):
    w = rng.standard_normal((64, 64))
    _, mask = nm_finalize(w, NMConfig(2, 4))
    assert np.all(mask.reshape(-1, 4).sum(axis=1) == 2)


def test_nm_one_of_four_over_eight():
    _, mask = finalize_structured(np.arange(1.0, 9.0), "nm", cfg=NMConfig(1, 4))
    assert mask.sum() == 2 and mask.tolist() == [0, 0, 0, 1, 0, 0, 0, 1]


@pytest.mark.parametrize("n,m", [(2, 8), (1, 4), (4, 8), (3, 5)])
def test_nm_matches_brute_force_selection(n, m, rng):
    w = np.round(rng.standard_normal(m * 50), 1)    # rounding creates ties
    _, mask = nm_finalize(w, NMConfig(n, m))
    for g in range(50):
        group = w[g * m:(g + 1) * m]
        kept = np.flatnonzero(mask[g * m:(g + 1) * m]).tolist()
        assert kept == nm_keep_brute(group.tolist(), n)


def test_nm_remainder_group():
    w = np.arange(1.0, 11.0)             # 10 = two groups of 4 plus 2
    _, mask = nm_finalize(w, NMConfig(2, 4))
    assert mask[:8].reshape(2, 4).sum(axis=1).tolist() == [2, 2]
    assert mask[8:].sum() == math.ceil(2 * 2 / 4)
    w = np.arange(1.0, 8.0)              # 4 + 3: keep ceil(2 * 3 / 4) = 2 of the tail
    _, mask = nm_finalize(w, NMConfig(2, 4))
    assert mask[4:].tolist() == [0, 1, 1]


def test_nm_identical_groups_identical_masks(rng):
    g = rng.standard_normal(4)
    w = np.tile(g, 16)
    m = nm_soft_mask(Tensor(w), NMConfig(2, 4), tau=1e-3).data.reshape(16, 4)
    assert np.all(m == m[0])


def test_nm_element_at_its_threshold_is_half():
    w = np.array([0.1, 0.35, 0.6, 0.9, 0.2, 0.3, 0.4, 0.5])
    tmap = nm_threshold_map(w, NMConfig(2, 4))
    probe = w.copy()
    probe[1] = tmap[1]
    probe[6] = tmap[6]
    m = nm_soft_mask(Tensor(probe), NMConfig(2, 4), tau=1e-3, thresholds=tmap).data
    assert m[1] == 0.5 and m[6] == 0.5


def test_nm_soft_mask_gradient_matches_finite_differences(rng):
    w = rng.standard_normal(16) * 0.3
    cfg = NMConfig(2, 4)
    tmap = nm_threshold_map(w, cfg)
    tau = 1e-2

    def f(v):
        return ad.tensor_sum(ad.mul(nm_soft_mask(v, cfg, tau, thresholds=tmap), v))

    x = Tensor(w.copy(), requires_grad=True)
    backward(f(x))
    h = 1e-6
    num = np.zeros_like(w)
    for i in range(w.size):
        e = np.zeros_like(w)
        e[i] = h
        num[i] = (f(Tensor(w + e)).data - f(Tensor(w - e)).data) / (2 * h)
    np.testing.assert_allclose(x.grad, num, rtol=1e-5, atol=1e-9)


def test_nm_ramped_ratio_uses_fewer_prunes():
    w = np.arange(1.0, 9.0)
    _, mask = nm_finalize(w, NMConfig(1, 4), ratio=0.25)
    assert mask.reshape(2, 4).sum(axis=1).tolist() == [3, 3]


# -- channels -------------------------------------------------------------------------------

def _layer_with_norms(norms, fan_in=3, seed=0):
    r = np.random.default_rng(seed)
    w = r.standard_normal((len(norms), fan_in))
    w /= np.linalg.norm(w, axis=1, keepdims=True)
    return w * np.asarray(norms)[:, None]


def test_channel_threshold_example():
    w = _layer_with_norms([1.0, 0.2, 0.6, 0.4])
    np.testing.assert_allclose(channel_norms(w), [1.0, 0.2, 0.6, 0.4], rtol=1e-12)
    assert channel_threshold(w, 0.5) == pytest.approx(0.5)
    m = channel_soft_mask(Tensor(w), ChannelView.of(w), 0.5, 1e-3).data
    assert m[:, 0].round().tolist() == [1, 0, 1, 0]


def test_channel_ratio_zero_keeps_all(rng):
    w = rng.standard_normal((6, 2, 3, 3))
    m = channel_soft_mask(Tensor(w), None, 0.0, 1e-4).data
    assert np.all(m > 0.99)


def test_channel_finalize_counts(rng):
    w = rng.standard_normal((8, 4, 3, 3))
    out, mask = channel_finalize(w, 0.5)
    dead = [i for i in range(8) if not out[i].any()]
    assert len(dead) == 4
    assert np.all(mask.reshape(8, -1).min(axis=1) == mask.reshape(8, -1).max(axis=1))
    w54 = rng.standard_normal((54, 5))
    _, mask = channel_finalize(w54, 0.57)
    assert int((mask.sum(axis=1) == 0).sum()) == round(0.57 * 54) == 31


def test_channel_finalize_matches_brute_force_with_ties():
    w = _layer_with_norms([0.5, 0.2, 0.5, 0.2, 0.9, 0.2])
    norms = channel_norms(w).round(12).tolist()
    w = _layer_with_norms(norms)
    _, mask = channel_finalize(w, 0.5)
    assert (mask.sum(axis=1) > 0).tolist() == channel_keep_brute(channel_norms(w).round(12).tolist(), 3)


def test_channel_masks_uniform_within_channel(rng):
    w = rng.standard_normal((5, 3, 3, 3))
    m = channel_soft_mask(Tensor(w), ChannelView.of(w), 0.4, 1e-2).data
    flat = m.reshape(5, -1)
    assert np.all(flat == flat[:, :1])


def test_channel_gradient_reaches_every_weight(rng):
    w = Tensor(rng.standard_normal((4, 3)) * 0.5, requires_grad=True)
    t = channel_threshold(w.data, 0.5)
    out = ad.mul(channel_soft_mask(w, None, 0.5, 0.05, t=t), w)
    backward(ad.tensor_sum(ad.square(out)))
    assert np.all(w.grad != 0)


def test_channel_gradient_matches_finite_differences(rng):
    w0 = rng.standard_normal((4, 3)) * 0.5
    t = channel_threshold(w0, 0.5)

    def f(v):
        return ad.tensor_sum(ad.square(ad.mul(channel_soft_mask(v, None, 0.5, 0.05, t=t), v)))

    x = Tensor(w0.copy(), requires_grad=True)
    backward(f(x))
    h = 1e-6
    num = np.zeros_like(w0)
    for idx in np.ndindex(w0.shape):
        e = np.zeros_like(w0)
        e[idx] = h
        num[idx] = (f(Tensor(w0 + e)).data - f(Tensor(w0 - e)).data) / (2 * h)
    np.testing.assert_allclose(x.grad, num, rtol=1e-5, atol=1e-9)


def test_channel_view_rejects_other_axes():
    with pytest.raises(InputError):
        channel_soft_mask(Tensor(np.ones((2, 2))), ChannelView(axis=1), 0.5, 1e-3)
    with pytest.raises(InputError):
        channel_norms(np.ones((0, 3)))


@settings(max_examples=50, deadline=None)
@given(st.integers(2, 12), st.floats(0, 0.95), st.integers(0, 2 ** 31 - 1))
def test_channel_permutation_equivariance(c, ratio, seed):
    r = np.random.default_rng(seed)
    w = r.standard_normal((c, 2, 3, 3))
    perm = r.permutation(c)
    m = channel_soft_mask(Tensor(w), ChannelView.of(w), ratio, 1e-2).data
    mp = channel_soft_mask(Tensor(w[perm]), ChannelView.of(w[perm]), ratio, 1e-2).data
    np.testing.assert_array_equal(mp, m[perm])
    _, hard = channel_finalize(w, ratio)
    _, hard_p = channel_finalize(w[perm], ratio)
    np.testing.assert_array_equal(hard_p, hard[perm])


@settings(max_examples=50, deadline=None)
@given(arrays(np.float64, st.integers(4, 64), elements=st.floats(-3, 3).filter(lambda v: abs(v) > 1e-6)),
       st.floats(0, 0.95))
def test_one_group_is_the_unstructured_case(w, ratio):
    # N:M with a single group spanning the layer reproduces the core functions bit for bit
    n = w.size
    cfg = NMConfig(1, n) if n > 1 else None
    t = compute_threshold(w, ratio)
    assert nm_thresholds(w, cfg, ratio)[0] == t
    tau = 1e-3
    a = soft_mask(Tensor(w), MaskParams(t=t, tau=tau)).data
    b = nm_soft_mask(Tensor(w), cfg, tau, ratio=ratio).data
    np.testing.assert_array_equal(a, b)
    _, m_core = finalize_hard(w, MaskParams(t=t))
    if len(np.unique(np.abs(w))) == n:
        _, m_nm = nm_finalize(w, cfg, ratio)
        np.testing.assert_array_equal(m_core, m_nm)
