"""Attention block tests: branch contracts, the combine-range property,
batchnorm semantics, gradchecks, and container round-trips."""

import numpy as np
import numpy.testing as npt
import pytest

from voltconv.autograd import Var
from voltconv.gradcheck import grad_check, pack, restrict, tape_function
from voltconv.hla import (
    BatchNorm,
    HlaConfig,
    HlaParams,
    channel_mean_clamp,
    expected_param_count,
    hla_forward,
    load_hla,
    local_branch,
    save_hla,
    se_branch,
    shake_combine,
)


def zero_block(params):
    """Zero every trainable weight except batchnorm scale."""
    for v in params.trainables():
        if v is params.bn.gamma:
            continue
        if params.input_bn is not None and v is params.input_bn.gamma:
            continue
        v.value = np.zeros_like(v.value)


# ------------------------------------------------------------- clamp


def test_clamp_worked_example():
    npt.assert_allclose(channel_mean_clamp(np.array([0.2, 0.4, 0.6])),
                        [0.2, 0.4, 0.4])


def test_clamp_constant_unchanged():
    a = np.full(5, 0.37)
    npt.assert_array_equal(channel_mean_clamp(a), a)


def test_clamp_never_increases_and_caps_at_mean():
    rng = np.random.default_rng(0)
    for _ in range(20):
        a = rng.uniform(0.01, 0.99, size=8)
        out = channel_mean_clamp(a)
        assert (out <= a).all()
        assert out.max() <= a.mean() + 1e-15
        # the minimum coordinate survives untouched
        assert out[a.argmin()] == a[a.argmin()]


def test_clamp_is_per_sample_for_batches():
    a = np.array([[0.2, 0.4, 0.6], [0.9, 0.1, 0.2]])
    out = channel_mean_clamp(a)
    npt.assert_allclose(out[0], [0.2, 0.4, 0.4])
    npt.assert_allclose(out[1], [0.4, 0.1, 0.2])


def test_clamp_tape_matches_array():
    rng = np.random.default_rng(1)
    a = rng.uniform(0.05, 0.95, size=(3, 6))
    npt.assert_allclose(channel_mean_clamp(Var(a)).value,
                        channel_mean_clamp(a))


# ------------------------------------------------------------- combine


def test_shake_combine_arithmetic():
    assert shake_combine(0.5, 0.5) == pytest.approx(0.75)
    rng = np.random.default_rng(2)
    b = rng.uniform(0.01, 0.99, size=10)
    npt.assert_allclose(shake_combine(0.0, b), b)


def test_shake_combine_range_property():
    rng = np.random.default_rng(3)
    a = rng.uniform(0.0, 1.0, size=10_000)
    b = rng.uniform(0.0, 1.0, size=10_000)
    # sample the open square; regenerate exact 0/1 draws away
    a = np.clip(a, 1e-12, 1 - 1e-12)
    b = np.clip(b, 1e-12, 1 - 1e-12)
    y = shake_combine(a, b)
    assert (y > np.maximum(a, b)).all()
    assert (y < 1.0).all()


def test_shake_combine_on_tape_nodes():
    a = Var(np.array([0.3]))
    b = Var(np.array([0.6]))
    y = shake_combine(a, b)
    npt.assert_allclose(y.value, [0.3 + 0.6 - 0.18])


# ------------------------------------------------------------- branches


def test_se_branch_zero_weights_give_half():
    rng = np.random.default_rng(4)
    params = HlaParams(HlaConfig(channels=6, reduction_ratio=2), rng)
    for v in (params.reduce_w, params.reduce_b, params.expand_w,
              params.expand_b):
        v.value = np.zeros_like(v.value)
    a = se_branch(Var(rng.normal(size=(3, 6, 4, 4))), params)
    npt.assert_allclose(a.value, np.full((3, 6), 0.5))


def test_se_branch_output_range():
    rng = np.random.default_rng(5)
    params = HlaParams(HlaConfig(channels=8, reduction_ratio=4), rng)
    a = se_branch(Var(rng.normal(size=(2, 8, 5, 5)) * 3), params)
    assert ((a.value > 0) & (a.value < 1)).all()


def test_se_branch_channel_permutation_equivariance():
    rng = np.random.default_rng(6)
    c = 6
    params = HlaParams(HlaConfig(channels=c, reduction_ratio=2), rng)
    x = rng.normal(size=(2, c, 4, 4))
    a = se_branch(Var(x), params).value
    perm = rng.permutation(c)
    permuted = HlaParams(HlaConfig(channels=c, reduction_ratio=2), rng)
    permuted.reduce_w = Var(params.reduce_w.value[:, perm])
    permuted.reduce_b = Var(params.reduce_b.value.copy())
    permuted.expand_w = Var(params.expand_w.value[perm, :])
    permuted.expand_b = Var(params.expand_b.value[perm])
    a_perm = se_branch(Var(x[:, perm]), permuted).value
    # clamp uses the channel mean, which permutation preserves
    npt.assert_allclose(a_perm, a[:, perm], rtol=1e-12)


def test_local_branch_zero_conv_gives_half():
    rng = np.random.default_rng(7)
    params = HlaParams(HlaConfig(channels=4, reduction_ratio=2), rng)
    for v in (*params.conv_weights, params.conv_bias):
        v.value = np.zeros_like(v.value)
    x = Var(rng.normal(size=(2, 4, 5, 5)))
    for training in (True, False):
        b = local_branch(x, params, training=training)
        npt.assert_allclose(b.value, np.full((2, 4, 5, 5), 0.5))


def test_local_branch_preserves_shape_and_range():
    rng = np.random.default_rng(8)
    params = HlaParams(HlaConfig(channels=3, reduction_ratio=1), rng)
    x = Var(rng.normal(size=(2, 3, 6, 7)))
    b = local_branch(x, params, training=True)
    assert b.value.shape == (2, 3, 6, 7)
    assert ((b.value > 0) & (b.value < 1)).all()


def test_branches_reject_wrong_channels():
    rng = np.random.default_rng(9)
    params = HlaParams(HlaConfig(channels=4, reduction_ratio=2), rng)
    with pytest.raises(ValueError):
        se_branch(Var(np.zeros((1, 3, 4, 4))), params)
    with pytest.raises(ValueError):
        local_branch(Var(np.zeros((1, 5, 4, 4))), params)


# ------------------------------------------------------------- block


def test_forced_branches_identity():
    rng = np.random.default_rng(10)
    params = HlaParams(HlaConfig(channels=3, reduction_ratio=1), rng)
    x = rng.normal(size=(2, 3, 4, 4))
    out = hla_forward(Var(x), params,
                      override_branches=(np.ones((2, 3)),
                                         np.ones((2, 3, 4, 4))))
    npt.assert_array_equal(out.value, x)


def test_zero_initialized_block_scales_by_three_quarters():
    rng = np.random.default_rng(11)
    params = HlaParams(HlaConfig(channels=4, reduction_ratio=2), rng)
    zero_block(params)
    x = rng.normal(size=(2, 4, 6, 6))
    for training in (True, False):
        out = hla_forward(Var(x), params, training=training)
        npt.assert_allclose(out.value, 0.75 * x, rtol=1e-12)


def test_output_strictly_shrinks_nonzero_entries():
    rng = np.random.default_rng(12)
    params = HlaParams(HlaConfig(channels=4, reduction_ratio=2), rng)
    x = rng.normal(size=(2, 4, 5, 5))
    x[np.abs(x) < 1e-3] = 0.5
    out = hla_forward(Var(x), params, training=True).value
    assert (np.abs(out) < np.abs(x)).all()
    assert np.sign(out[x != 0]).tolist() == np.sign(x[x != 0]).tolist()


@pytest.mark.parametrize("use_input_bn", [False, True])
def test_block_gradcheck(use_input_bn):
    rng = np.random.default_rng(13)
    cfg = HlaConfig(channels=4, reduction_ratio=2,
                    use_input_batchnorm=use_input_bn)
    params = HlaParams(cfg, rng)
    x = Var(rng.normal(size=(2, 4, 5, 5)))
    variables = [x] + params.trainables()

    def build():
        out = hla_forward(x, params, training=True)
        return (out * out).sum()

    f = tape_function(build, variables)
    p0 = pack(variables)
    # every small tensor fully, a seeded sample of the big conv weights
    coords = list(range(x.value.size))
    sizes = np.cumsum([v.value.size for v in variables])
    for v, hi in zip(variables[1:], sizes[1:]):
        lo = hi - v.value.size
        if v.value.size <= 40:
            coords.extend(range(lo, hi))
        else:
            coords.extend(rng.choice(np.arange(lo, hi), size=30,
                                     replace=False))
    g, q0 = restrict(f, p0, sorted(set(coords)))
    assert grad_check(g, q0, 1e-6) <= 1e-5


def test_block_gradcheck_eval_mode():
    rng = np.random.default_rng(14)
    params = HlaParams(HlaConfig(channels=2, reduction_ratio=1), rng)
    params.bn.running_mean = rng.normal(size=2) * 0.1
    params.bn.running_var = np.abs(rng.normal(size=2)) + 0.5
    x = Var(rng.normal(size=(2, 2, 4, 4)))
    variables = [x] + params.trainables()

    def build():
        return hla_forward(x, params, training=False).sum()

    f = tape_function(build, variables)
    p0 = pack(variables)
    g, q0 = restrict(f, p0, range(0, len(p0), max(1, len(p0) // 80)))
    assert grad_check(g, q0, 1e-6) <= 1e-5


# ------------------------------------------------------------- batchnorm


def test_batchnorm_normalizes_in_training():
    rng = np.random.default_rng(15)
    bn = BatchNorm(3)
    x = Var(rng.normal(loc=2.0, scale=3.0, size=(4, 3, 5, 5)))
    y = bn.forward(x, training=True).value
    npt.assert_allclose(y.mean(axis=(0, 2, 3)), 0.0, atol=1e-12)
    npt.assert_allclose(y.std(axis=(0, 2, 3)), 1.0, atol=1e-4)


def test_batchnorm_running_stats_update():
    rng = np.random.default_rng(16)
    bn = BatchNorm(2)
    x = rng.normal(loc=1.5, scale=2.0, size=(8, 2, 4, 4))
    bn.forward(Var(x), training=True)
    batch_mean = x.mean(axis=(0, 2, 3))
    batch_var = x.var(axis=(0, 2, 3))
    count = 8 * 4 * 4
    npt.assert_allclose(bn.running_mean, 0.9 * 0.0 + 0.1 * batch_mean,
                        rtol=1e-12)
    npt.assert_allclose(
        bn.running_var,
        0.9 * 1.0 + 0.1 * batch_var * count / (count - 1), rtol=1e-12,
    )


def test_batchnorm_eval_uses_running_stats():
    bn = BatchNorm(2)
    bn.running_mean = np.array([1.0, -1.0])
    bn.running_var = np.array([4.0, 0.25])
    x = Var(np.ones((1, 2, 2, 2)))
    y = bn.forward(x, training=False).value
    npt.assert_allclose(y[0, 0], (1 - 1) / np.sqrt(4 + 1e-5), rtol=1e-9)
    npt.assert_allclose(y[0, 1], (1 + 1) / np.sqrt(0.25 + 1e-5), rtol=1e-9)


def test_batchnorm_rejects_wrong_channels():
    bn = BatchNorm(3)
    with pytest.raises(ValueError):
        bn.forward(Var(np.zeros((1, 2, 4, 4))), training=True)


# ------------------------------------------------------------- config, io


def test_config_validation():
    with pytest.raises(ValueError):
        HlaConfig(channels=6, reduction_ratio=4)
    with pytest.raises(ValueError):
        HlaConfig(channels=2, reduction_ratio=4)
    with pytest.raises(ValueError):
        HlaConfig(channels=4, reduction_ratio=0)


def test_param_count_matches_trainables():
    for cfg in (HlaConfig(8, 4), HlaConfig(4, 2, use_input_batchnorm=True)):
        params = HlaParams(cfg, np.random.default_rng(17))
        total = sum(v.value.size for v in params.trainables())
        assert total == expected_param_count(cfg)


@pytest.mark.parametrize("use_input_bn", [False, True])
def test_container_round_trip(tmp_path, use_input_bn):
    rng = np.random.default_rng(18)
    cfg = HlaConfig(channels=4, reduction_ratio=2,
                    use_input_batchnorm=use_input_bn)
    params = HlaParams(cfg, rng)
    params.bn.running_mean = rng.normal(size=4)
    params.bn.running_var = np.abs(rng.normal(size=4)) + 0.1
    x = rng.normal(size=(2, 4, 5, 5))
    before = hla_forward(Var(x), params, training=False).value
    path = tmp_path / "block.volk"
    save_hla(path, params)
    loaded = load_hla(path)
    assert loaded.config == cfg
    after = hla_forward(Var(x), loaded, training=False).value
    npt.assert_array_equal(before, after)
    # save of the loaded block is byte-identical
    path2 = tmp_path / "block2.volk"
    save_hla(path2, loaded)
    assert path.read_bytes() == path2.read_bytes()
