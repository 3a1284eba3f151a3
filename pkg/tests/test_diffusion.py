"""Forward/reverse process math against independent numpy oracles."""

import dataclasses

import numpy as np
import numpy.testing as npt
import pytest
import scipy.stats
import torch

from camodiff import diffusion
from camodiff.errors import ShapeError
from camodiff.schedule import make_linear_schedule

torch.manual_seed(0)


@dataclasses.dataclass
class Out:
    eps: torch.Tensor
    v: torch.Tensor


def rand_mask_batch(b=4, hw=6, seed=0, dtype=torch.float64):
    g = torch.Generator().manual_seed(seed)
    y0 = torch.rand((b, 1, hw, hw), generator=g, dtype=dtype) * 2.0 - 1.0
    return y0


class TestSpaces:
    def test_roundtrip(self):
        m = torch.rand(3, 1, 5, 5, dtype=torch.float64)
        d = diffusion.to_diffusion_space(m)
        npt.assert_allclose(diffusion.to_probability_space(d).numpy(), m.numpy(), atol=1e-15)
        assert d.min() >= -1.0 and d.max() <= 1.0

    def test_probability_clamps(self):
        d = torch.tensor([[-3.0, -1.0, 0.0, 1.0, 5.0]])
        p = diffusion.to_probability_space(d)
        npt.assert_array_equal(p.numpy(), [[0.0, 0.0, 0.5, 1.0, 1.0]])


class TestQSample:
    def test_matches_numpy_oracle(self):
        s = make_linear_schedule(100)
        y0 = rand_mask_batch(seed=1)
        eps = torch.randn_like(y0)
        for t in (1, 7, 50, 100):
            got = diffusion.q_sample(y0, t, eps, s).numpy()
            ab = s.alpha_bars[t - 1]
            want = np.sqrt(ab) * y0.numpy() + np.sqrt(1.0 - ab) * eps.numpy()
            npt.assert_allclose(got, want, rtol=1e-12)

    def test_per_element_t(self):
        s = make_linear_schedule(50)
        y0 = rand_mask_batch(b=3, seed=2)
        eps = torch.randn_like(y0)
        t = torch.tensor([1, 25, 50])
        got = diffusion.q_sample(y0, t, eps, s).numpy()
        for i, ti in enumerate([1, 25, 50]):
            ab = s.alpha_bars[ti - 1]
            want = np.sqrt(ab) * y0.numpy()[i] + np.sqrt(1.0 - ab) * eps.numpy()[i]
            npt.assert_allclose(got[i], want, rtol=1e-12)

    def test_t_out_of_range(self):
        s = make_linear_schedule(10)
        y0 = rand_mask_batch(b=2)
        eps = torch.zeros_like(y0)
        with pytest.raises(IndexError):
            diffusion.q_sample(y0, 0, eps, s)
        with pytest.raises(IndexError):
            diffusion.q_sample(y0, 11, eps, s)

    def test_shape_mismatch(self):
        s = make_linear_schedule(10)
        with pytest.raises(ShapeError):
            diffusion.q_sample(torch.zeros(2, 1, 4, 4), 1, torch.zeros(2, 1, 5, 5), s)

    def test_linear_coef_variant_differs(self):
        s = make_linear_schedule(100)
        y0 = rand_mask_batch(seed=3)
        eps = torch.randn_like(y0)
        a = diffusion.q_sample(y0, 50, eps, s).numpy()
        b = diffusion.q_sample_linear_noise_coef(y0, 50, eps, s).numpy()
        ab = s.alpha_bars[49]
        npt.assert_allclose(b - a, (1.0 - ab - np.sqrt(1.0 - ab)) * eps.numpy(), rtol=1e-9, atol=1e-12)
        assert not np.allclose(a, b)


class TestIterativeMarginal:
    def test_iterative_matches_closed_form_moments(self):
        # smaller sibling of the acceptance check: 6000 chains, T = 10
        s = make_linear_schedule(10, 0.02, 0.3)
        n = 6000
        y0 = torch.full((n, 1, 2, 2), 0.6, dtype=torch.float64)
        for t in (1, 5, 10):
            y_t = diffusion.q_sample_iterative(y0, t, 123, s)
            ab = s.alpha_bars[t - 1]
            want_mean = np.sqrt(ab) * 0.6
            want_var = 1.0 - ab
            mean = y_t.mean(dim=0).numpy()
            var = y_t.var(dim=0, unbiased=True).numpy()
            se_mean = np.sqrt(want_var / n)
            se_var = want_var * np.sqrt(2.0 / (n - 1))
            assert np.all(np.abs(mean - want_mean) < 3 * se_mean), f"t={t}"
            assert np.all(np.abs(var - want_var) < 3 * se_var), f"t={t}"


class TestPredictY0:
    def test_inverts_q_sample(self):
        s = make_linear_schedule(1000)
        y0 = rand_mask_batch(seed=4)
        eps = torch.randn_like(y0)
        for t in (1, 500, 1000):
            yt = diffusion.q_sample(y0, t, eps, s)
            back = diffusion.predict_y0_from_eps(yt, t, eps, s)
            npt.assert_allclose(back.numpy(), y0.numpy(), rtol=1e-9, atol=1e-9)


class TestQPosterior:
    def test_matches_numpy_oracle(self):
        s = make_linear_schedule(200)
        y0 = rand_mask_batch(seed=5)
        yt = rand_mask_batch(seed=6)
        for t in (2, 77, 200):
            mean, var, logvar = diffusion.q_posterior(y0, yt, t, s)
            ab, abp, b = s.alpha_bars[t - 1], s.alpha_bars_prev[t - 1], s.betas[t - 1]
            a = 1.0 - b
            c0 = np.sqrt(abp) * b / (1.0 - ab)
            ct = np.sqrt(a) * (1.0 - abp) / (1.0 - ab)
            npt.assert_allclose(mean.numpy(), c0 * y0.numpy() + ct * yt.numpy(), rtol=1e-12)
            want_var = b * (1.0 - abp) / (1.0 - ab)
            npt.assert_allclose(var.numpy(), np.full_like(var.numpy(), want_var), rtol=1e-12)
            npt.assert_allclose(logvar.numpy(), np.log(want_var), rtol=1e-12)

    def test_t1_variance_zero(self):
        s = make_linear_schedule(100)
        y0 = rand_mask_batch(b=2, seed=7)
        yt = rand_mask_batch(b=2, seed=8)
        _, var, logvar = diffusion.q_posterior(y0, yt, 1, s)
        assert float(var.abs().max()) == 0.0
        # clipped log variance stays finite
        assert torch.isfinite(logvar).all()


class TestPMeanVariance:
    def test_variance_endpoints(self):
        s = make_linear_schedule(100)
        yt = rand_mask_batch(seed=9)
        eps = torch.randn_like(yt)
        t = 40
        out1 = diffusion.p_mean_variance(Out(eps, torch.ones_like(yt)), yt, t, s)
        npt.assert_allclose(out1.variance.numpy(), np.full_like(out1.variance.numpy(), s.betas[t - 1]), rtol=1e-12)
        out0 = diffusion.p_mean_variance(Out(eps, torch.zeros_like(yt)), yt, t, s)
        npt.assert_allclose(out0.variance.numpy(), np.full_like(out0.variance.numpy(), s.posterior_variance[t - 1]), rtol=1e-12)

    def test_true_noise_recovers_posterior_mean(self):
        # float64 consistency between the eps route and the closed form
        s = make_linear_schedule(1000)
        g = torch.Generator().manual_seed(11)
        for trial in range(20):
            y0 = torch.rand((2, 1, 5, 5), generator=g, dtype=torch.float64) * 2 - 1
            eps = torch.randn(y0.shape, generator=g, dtype=torch.float64)
            t = int(torch.randint(1, 1001, (1,), generator=g))
            yt = diffusion.q_sample(y0, t, eps, s)
            out = diffusion.p_mean_variance(Out(eps, torch.rand(y0.shape, generator=g, dtype=torch.float64)), yt, t, s)
            true_mean, _, _ = diffusion.q_posterior(y0, yt, t, s)
            npt.assert_allclose(out.mean.numpy(), true_mean.numpy(), atol=1e-8)

    def test_pred_y0_clamped(self):
        s = make_linear_schedule(100)
        yt = torch.full((1, 1, 3, 3), 30.0, dtype=torch.float64)
        eps = torch.zeros_like(yt)
        out = diffusion.p_mean_variance(Out(eps, torch.zeros_like(yt)), yt, 100, s)
        assert float(out.pred_y0.max()) <= 1.0
        out_raw = diffusion.p_mean_variance(Out(eps, torch.zeros_like(yt)), yt, 100, s, clamp_pred=False)
        assert float(out_raw.pred_y0.max()) > 1.0


class TestPSampleStep:
    def test_no_noise_at_t1(self):
        s = make_linear_schedule(100)
        yt = rand_mask_batch(b=2, seed=12)
        eps = torch.randn_like(yt)
        v = torch.rand(yt.shape, dtype=torch.float64)
        g1 = torch.Generator().manual_seed(1)
        g2 = torch.Generator().manual_seed(999)
        a = diffusion.p_sample_step(Out(eps, v), yt, 1, s, g1)
        b = diffusion.p_sample_step(Out(eps, v), yt, 1, s, g2)
        npt.assert_array_equal(a.mean.numpy(), b.mean.numpy())
        ref = diffusion.p_mean_variance(Out(eps, v), yt, 1, s)
        npt.assert_array_equal(a.mean.numpy(), ref.mean.numpy())

    def test_seed_determinism_and_noise_presence(self):
        s = make_linear_schedule(100)
        yt = rand_mask_batch(b=2, seed=13)
        eps = torch.randn_like(yt)
        v = torch.rand(yt.shape, dtype=torch.float64)
        a = diffusion.p_sample_step(Out(eps, v), yt, 50, s, torch.Generator().manual_seed(7))
        b = diffusion.p_sample_step(Out(eps, v), yt, 50, s, torch.Generator().manual_seed(7))
        c = diffusion.p_sample_step(Out(eps, v), yt, 50, s, torch.Generator().manual_seed(8))
        npt.assert_array_equal(a.mean.numpy(), b.mean.numpy())
        assert not np.array_equal(a.mean.numpy(), c.mean.numpy())


class TestVlb:
    def test_kl_normal_oracle(self):
        g = torch.Generator().manual_seed(14)
        m1 = torch.randn((4, 1, 3, 3), generator=g, dtype=torch.float64)
        m2 = torch.randn((4, 1, 3, 3), generator=g, dtype=torch.float64)
        lv1 = torch.randn((4, 1, 3, 3), generator=g, dtype=torch.float64) * 0.3
        lv2 = torch.randn((4, 1, 3, 3), generator=g, dtype=torch.float64) * 0.3
        got = diffusion.kl_normal(m1, lv1, m2, lv2).numpy()
        v1, v2 = np.exp(lv1.numpy()), np.exp(lv2.numpy())
        want = 0.5 * (np.log(v2 / v1) + (v1 + (m1.numpy() - m2.numpy()) ** 2) / v2 - 1.0)
        npt.assert_allclose(got, want, rtol=1e-10)
        assert float(diffusion.kl_normal(m1, lv1, m1, lv1).abs().max()) == 0.0

    def test_discretized_nll_scipy_oracle(self):
        g = torch.Generator().manual_seed(15)
        grid = torch.randint(0, 256, (5, 1, 4, 4), generator=g).double() / 127.5 - 1.0
        mean = torch.randn((5, 1, 4, 4), generator=g, dtype=torch.float64) * 0.4
        logvar = torch.randn((5, 1, 4, 4), generator=g, dtype=torch.float64) - 1.0
        got = diffusion.discretized_gaussian_nll(grid, mean, logvar).numpy()
        x, mu, sd = grid.numpy(), mean.numpy(), np.exp(0.5 * logvar.numpy())
        hi = scipy.stats.norm.cdf(x + 1 / 255, loc=mu, scale=sd)
        lo = scipy.stats.norm.cdf(x - 1 / 255, loc=mu, scale=sd)
        prob = np.where(x < -0.999, hi, np.where(x > 0.999, 1.0 - lo, hi - lo))
        want = -np.log(np.clip(prob, 1e-12, None))
        npt.assert_allclose(got, want, rtol=1e-6, atol=1e-9)

    def test_tight_variance_on_grid_nll_near_zero(self):
        y0 = torch.tensor([[[[0.0, 1.0], [-1.0, 127 / 127.5 - 1.0]]]], dtype=torch.float64)
        nll = diffusion.discretized_gaussian_nll(y0, y0.clone(), torch.full_like(y0, -18.0))
        assert float(nll.abs().max()) < 1e-8

    def test_vlb_zero_when_model_matches_posterior(self):
        s = make_linear_schedule(100)
        g = torch.Generator().manual_seed(16)
        y0 = torch.rand((3, 1, 4, 4), generator=g, dtype=torch.float64) * 2 - 1
        eps = torch.randn(y0.shape, generator=g, dtype=torch.float64)
        for t in (2, 50, 100):
            yt = diffusion.q_sample(y0, t, eps, s)
            term = diffusion.vlb_terms(y0, yt, t, Out(eps, torch.zeros_like(y0)), s)
            assert float(term.abs().max()) < 1e-8, f"t={t}"

    def test_t1_uses_nll_branch(self):
        s = make_linear_schedule(100)
        g = torch.Generator().manual_seed(17)
        y0 = torch.where(torch.rand((2, 1, 4, 4), generator=g) > 0.5, 1.0, -1.0).double()
        eps = torch.randn(y0.shape, generator=g, dtype=torch.float64)
        yt = diffusion.q_sample(y0, 1, eps, s)
        out = Out(eps, torch.zeros_like(y0))
        term = diffusion.vlb_terms(y0, yt, 1, out, s)
        rev = diffusion.p_mean_variance(out, yt, 1, s)
        want = diffusion.discretized_gaussian_nll(y0, rev.mean, rev.log_variance).flatten(1).mean(1)
        npt.assert_allclose(term.numpy(), want.numpy(), rtol=1e-12)

    def test_mixed_t_batch_routes_per_element(self):
        s = make_linear_schedule(100)
        g = torch.Generator().manual_seed(18)
        y0 = torch.rand((2, 1, 4, 4), generator=g, dtype=torch.float64) * 2 - 1
        eps = torch.randn(y0.shape, generator=g, dtype=torch.float64)
        t = torch.tensor([1, 60])
        yt = diffusion.q_sample(y0, t, eps, s)
        out = Out(eps, torch.rand(y0.shape, generator=g, dtype=torch.float64))
        both = diffusion.vlb_terms(y0, yt, t, out, s).numpy()
        solo0 = diffusion.vlb_terms(y0[:1], yt[:1], 1, Out(out.eps[:1], out.v[:1]), s).numpy()
        solo1 = diffusion.vlb_terms(y0[1:], yt[1:], 60, Out(out.eps[1:], out.v[1:]), s).numpy()
        npt.assert_allclose(both, np.concatenate([solo0, solo1]), rtol=1e-12)


class TestPriorKl:
    def test_closed_form_oracle(self):
        s = make_linear_schedule(1000)
        g = torch.Generator().manual_seed(19)
        y0 = torch.rand((4, 1, 5, 5), generator=g, dtype=torch.float64) * 2 - 1
        got = diffusion.prior_kl(y0, s).numpy()
        ab = s.alpha_bars[-1]
        per_elem = 0.5 * (1 - ab + ab * y0.numpy() ** 2 - 1.0 - np.log(1 - ab))
        npt.assert_allclose(got, per_elem.reshape(4, -1).mean(axis=1), rtol=1e-12)

    def test_default_schedule_destroys_signal(self):
        # worst case |y0| = 1 everywhere
        s = make_linear_schedule(1000, 1e-4, 0.02)
        y0 = torch.ones((1, 1, 8, 8), dtype=torch.float64)
        assert float(diffusion.prior_kl(y0, s)[0]) < 1e-4
