import copy

import numpy as np
import pytest

from gradcheck import directional_check
from rawdiff import tensor_ad as ad
from rawdiff.denoiser import Denoiser, DenoiserConfig, merge_cfi_conv
from rawdiff.tensor_ad import Tensor

SMALL = DenoiserConfig(width=8, temb_dim=16, n_cameras=3)


def inputs(rng, n=2, h=8, w=8, dtype=np.float32):
    x = rng.standard_normal((n, 4, h, w)).astype(dtype)
    c = rng.random((n, 10, h, w)).astype(dtype)
    return x, c


def perturb_cfis(model, rng, scale=0.3):
    for k in model.cfi_param_names():
        p = model.params[k]
        p.data = (p.data + scale * rng.standard_normal(p.shape)).astype(p.dtype)


def unmerged(x, w, b, k, c):
    return ad.conv2d(ad.channel_affine(Tensor(x), Tensor(w), Tensor(b)), Tensor(k), Tensor(c)).data


class TestMerge:
    def test_identity_affine(self):
        rng = np.random.default_rng(0)
        k, c = rng.standard_normal((3, 2, 3, 3)), rng.standard_normal(3)
        m = merge_cfi_conv(np.ones(2), np.zeros(2), k, c, (5, 6))
        np.testing.assert_array_equal(m.kernel, k)
        np.testing.assert_allclose(m.bias_field, np.broadcast_to(c[:, None, None], (3, 5, 6)))

    def test_border_counts(self):
        m = merge_cfi_conv(np.ones(1), np.ones(1), np.ones((1, 1, 3, 3)), np.zeros(1), (5, 5))
        f = m.bias_field[0]
        assert f[2, 2] == 9 and f[0, 0] == 4 and f[4, 4] == 4 and f[0, 2] == 6 and f[2, 4] == 6

    @pytest.mark.parametrize("seed", range(10))
    def test_random_matches_unmerged(self, seed):
        rng = np.random.default_rng(seed)
        h, w = rng.integers(8, 33, size=2)
        cin, cout = rng.integers(1, 6, size=2)
        x = rng.standard_normal((2, cin, h, w))
        cw, cb = rng.standard_normal(cin), rng.standard_normal(cin)
        k, c = rng.standard_normal((cout, cin, 3, 3)), rng.standard_normal(cout)
        m = merge_cfi_conv(cw, cb, k, c, (h, w))
        got = ad.conv2d(Tensor(x), Tensor(m.kernel), Tensor(m.bias_field)).data
        assert np.abs(got - unmerged(x, cw, cb, k, c)).max() <= 1e-5

    def test_interior_constant(self):
        rng = np.random.default_rng(1)
        m = merge_cfi_conv(rng.random(3), rng.random(3), rng.standard_normal((2, 3, 3, 3)), rng.random(2), (9, 9))
        interior = m.bias_field[:, 1:-1, 1:-1]
        np.testing.assert_allclose(interior, interior[:, :1, :1] * np.ones_like(interior), atol=1e-12)

    def test_valid_padding_rejected(self):
        with pytest.raises(ValueError):
            merge_cfi_conv(np.ones(1), np.zeros(1), np.ones((1, 1, 3, 3)), np.zeros(1), (4, 4), pad="valid")


class TestForward:
    def test_output_shape(self):
        m = Denoiser(SMALL)
        rng = np.random.default_rng(0)
        for h, w in [(4, 4), (8, 12), (16, 8)]:
            x, c = inputs(rng, 1, h, w)
            assert m.forward(x, 5, c, camera=1).shape == x.shape

    def test_transparent_at_init(self):
        m = Denoiser(SMALL, seed=3)
        x, c = inputs(np.random.default_rng(1))
        with_cfi = m.forward(x, 17, c, camera=2).data
        without = m.forward(x, 17, c, bypass_cfi=True).data
        assert np.abs(with_cfi - without).max() <= 1e-6

    def test_backbone_gradients_transparent_at_init(self):
        m = Denoiser(SMALL, seed=3)
        x, c = inputs(np.random.default_rng(2))
        target = Tensor(np.zeros_like(x))
        grads = []
        for kw in ({"camera": 1}, {"bypass_cfi": True}):
            m.zero_grad()
            ad.backward(ad.mse(m.forward(x, 9, c, **kw), target))
            grads.append({k: m.params[k].grad.copy() for k in m.conv_param_names()})
        for k in grads[0]:
            np.testing.assert_allclose(grads[0][k], grads[1][k], atol=1e-6)

    def test_cameras_route_separately(self):
        m = Denoiser(SMALL)
        for k in m.cfi_param_names(2):
            p = m.params[k]
            p.data = p.data + 0.5
        x, c = inputs(np.random.default_rng(3))
        a, b, d = (m.forward(x, 3, c, camera=i).data for i in (1, 2, 3))
        np.testing.assert_array_equal(a, d)
        assert np.abs(a - b).max() > 1e-3

    def test_routing_gradients_only_hit_selected_pathway(self):
        m = Denoiser(SMALL)
        x, c = inputs(np.random.default_rng(4))
        ad.backward(ad.mse(m.forward(x, 3, c, camera=2), Tensor(np.zeros_like(x))))
        assert all(m.params[k].grad is not None for k in m.cfi_param_names(2))
        assert all(m.params[k].grad is None for k in m.cfi_param_names(1) + m.cfi_param_names(3))

    @pytest.mark.parametrize("camera", [None, 0, 4])
    def test_camera_out_of_range(self, camera):
        m = Denoiser(SMALL)
        x, c = inputs(np.random.default_rng(5))
        with pytest.raises(ValueError, match="camera"):
            m.forward(x, 1, c, camera=camera)

    def test_mismatched_condition(self):
        m = Denoiser(SMALL)
        x, _ = inputs(np.random.default_rng(6))
        with pytest.raises(ad.ShapeError):
            m.forward(x, 1, np.zeros((2, 10, 4, 4), np.float32), camera=1)

    def test_per_sample_timesteps(self):
        m = Denoiser(SMALL)
        x, c = inputs(np.random.default_rng(7))
        both = m.forward(x, [3, 50], c, camera=1).data
        first = m.forward(x[:1], 3, c[:1], camera=1).data
        np.testing.assert_allclose(both[:1], first, atol=1e-6)


class TestAveraging:
    def test_arithmetic(self):
        m = Denoiser(DenoiserConfig(width=8, temb_dim=16, n_cameras=2))
        for name in m.layer_names:
            for i, (wv, bv) in enumerate([(1.0, 0.0), (3.0, 2.0)], start=1):
                m.params[f"cfi.{name}.W.{i}"].data[:] = wv
                m.params[f"cfi.{name}.B.{i}"].data[:] = bv
        m.average_cfis()
        for name in m.layer_names:
            assert np.all(m.params[f"cfi.{name}.W.T"].data == 2.0)
            assert np.all(m.params[f"cfi.{name}.B.T"].data == 1.0)
        assert m.mode == "aligned"
        assert not m.cfi_param_names(1)

    def test_identical_pathways_no_op(self):
        m = Denoiser(SMALL)
        rng = np.random.default_rng(0)
        for name in m.layer_names:
            for part in ("W", "B"):
                v = rng.standard_normal(m.params[f"cfi.{name}.{part}.1"].shape)
                for i in range(1, 4):
                    m.params[f"cfi.{name}.{part}.{i}"].data = v.astype(np.float32)
        x, c = inputs(rng)
        before = m.forward(x, 8, c, camera=2).data
        m.average_cfis()
        np.testing.assert_allclose(m.forward(x, 8, c).data, before, atol=1e-6)

    def test_twice_rejected(self):
        m = Denoiser(SMALL)
        m.average_cfis()
        with pytest.raises(RuntimeError):
            m.average_cfis()


class TestReparameterize:
    def test_merged_matches_aligned(self):
        rng = np.random.default_rng(1)
        m = Denoiser(SMALL)
        perturb_cfis(m, rng)
        m.average_cfis()
        merged = copy.deepcopy(m)
        merged.reparameterize()
        for h, w in [(8, 8), (12, 16)]:
            x, c = inputs(rng, 2, h, w)
            a = m.forward(x, 11, c).data
            b = merged.forward(x, 11, c).data
            assert np.abs(a - b).max() <= 1e-5

    def test_merged_graph_is_smaller(self):
        rng = np.random.default_rng(2)
        m = Denoiser(SMALL)
        m.average_cfis()
        merged = copy.deepcopy(m)
        merged.reparameterize()
        x, c = inputs(rng)
        ga, gm = ad.Graph(m.forward(x, 1, c)), ad.Graph(merged.forward(x, 1, c))
        assert "channel_affine" in ga.ops() and "channel_affine" not in gm.ops()
        assert len(gm) < len(ga)
        assert not merged.cfi_param_names()

    def test_requires_aligned(self):
        with pytest.raises(RuntimeError):
            Denoiser(SMALL).reparameterize()


class TestFreeze:
    def test_freeze_excludes_convs(self):
        m = Denoiser(SMALL)
        with pytest.raises(RuntimeError):
            m.freeze_convs()
        m.average_cfis()
        m.freeze_convs()
        names = set(m.trainable())
        assert names == set(m.cfi_param_names())
        x, c = inputs(np.random.default_rng(0))
        ad.backward(ad.mse(m.forward(x, 3, c), Tensor(np.zeros_like(x))))
        assert all(m.params[k].grad is None for k in m.conv_param_names())
        assert all(m.params[k].grad is not None for k in m.cfi_param_names())
        m.unfreeze_convs()
        assert all(m.params[k].requires_grad for k in m.conv_param_names())
        assert set(m.conv_param_names()) <= set(m.trainable())


def test_network_gradients_match_finite_differences():
    rng = np.random.default_rng(11)
    m = Denoiser(DenoiserConfig(width=4, temb_dim=8, n_cameras=2), seed=1)
    perturb_cfis(m, rng, 0.2)
    m.astype(np.float64)
    x, c = inputs(rng, 1, 4, 4, np.float64)
    target = Tensor(rng.standard_normal(x.shape))
    leaves = [m.params[k] for k in ("conv.in.weight", "conv.dec.bias", "cfi.mid1.W.2", "cfi.out.B.2",
                                    "temb.fc.weight", "temb.mid1.weight")]
    errs = directional_check(lambda: ad.mse(m.forward(x, 7, c, camera=2), target), leaves, rng, h=1e-5)
    assert max(errs) < 1e-3
