import numpy as np
import pytest
from conftest import central_diff, rel_err
from hypothesis import given
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays
from scipy.integrate import quad

from fvsr.errors import DimensionError, ScheduleError
from fvsr.losses import (
    LAMBDA_PERC,
    LOSS_CSV_COLUMNS,
    FlowSchedule,
    GradientMagnitudeLoss,
    LossReport,
    ScorePair,
    decoder_distill_loss,
    dmd_gradient,
    flow_matching_loss,
    gaussian_kl_grad,
    gaussian_scores,
    loss_csv,
    reconstruction_loss,
    select_decode_latents,
    stage3_report,
)

vals = st.floats(-3, 3, allow_nan=False)


def test_fm_fixed_points(rng):
    z0, z1 = rng.standard_normal((2, 3, 4))
    assert flow_matching_loss(z1 - z0, z0, z1)[0] == 0
    assert flow_matching_loss(np.zeros(4), z0[0], z0[0])[0] == 0


@pytest.mark.parametrize("seed", range(10))
def test_fm_gradient_fd(seed):
    rng = np.random.default_rng(seed)
    v, z0, z1 = rng.standard_normal((3, 2, 3, 5))
    _, g = flow_matching_loss(v, z0, z1)
    assert rel_err(g, central_diff(lambda x: flow_matching_loss(x, z0, z1)[0], v)) < 1e-4


def test_fm_shape_mismatch():
    with pytest.raises(DimensionError):
        flow_matching_loss(np.zeros(3), np.zeros(3), np.zeros(4))


def test_fm_float32_path(rng):
    v = rng.standard_normal(8).astype(np.float32)
    loss, g = flow_matching_loss(v, np.zeros(8, np.float32), np.zeros(8, np.float32))
    assert g.dtype == np.float32 and np.isclose(loss, np.mean(v.astype(np.float64) ** 2), rtol=1e-6)


def test_recon_zero_at_fixed_point(rng):
    x = rng.standard_normal((2, 8, 8, 3))
    assert reconstruction_loss(x, x)[0] == 0


def test_lambda_bookkeeping(rng):
    x, y = rng.standard_normal((2, 2, 8, 8, 3))
    _, _, (l2, lp) = reconstruction_loss(x, y, parts=True)
    assert np.isclose(reconstruction_loss(x, y)[0], l2 + LAMBDA_PERC * lp, rtol=1e-12)
    base = GradientMagnitudeLoss()

    def doubled(a, b):
        v, g = base(a, b)
        return 2 * v, 2 * g

    assert np.isclose(reconstruction_loss(x, y, doubled)[0] - l2, 2 * (reconstruction_loss(x, y)[0] - l2), rtol=1e-12)


@pytest.mark.parametrize("seed", range(10))
def test_recon_gradient_fd(seed):
    rng = np.random.default_rng(seed)
    x, y = rng.standard_normal((2, 2, 7, 9, 2))
    perc = GradientMagnitudeLoss(scales=(1, 2, 4))
    _, g = reconstruction_loss(x, y, perc)
    assert rel_err(g, central_diff(lambda a: reconstruction_loss(a, y, perc)[0], x)) < 1e-4


@pytest.mark.parametrize("seed", range(10))
def test_distill_gradient_fd(seed):
    rng = np.random.default_rng(100 + seed)
    x, y, w = rng.standard_normal((3, 1, 8, 8, 3))
    _, g = decoder_distill_loss(x, y, w)
    assert rel_err(g, central_diff(lambda a: decoder_distill_loss(a, y, w)[0], x)) < 1e-4


def test_distill_structure(rng):
    x, y, w = rng.standard_normal((3, 2, 8, 8, 3))
    assert decoder_distill_loss(y, y, y)[0] == 0
    assert np.isclose(decoder_distill_loss(x, y, y)[0], 2 * reconstruction_loss(x, y)[0], rtol=1e-12)
    total = reconstruction_loss(x, y)[0] + reconstruction_loss(x, w)[0]
    assert abs(decoder_distill_loss(x, y, w)[0] - total) < 1e-6


@given(arrays(np.float64, (1, 6, 6, 1), elements=vals), arrays(np.float64, (1, 6, 6, 1), elements=vals))
def test_losses_non_negative(x, y):
    assert reconstruction_loss(x, y)[0] >= 0
    assert decoder_distill_loss(x, y, x)[0] >= 0
    assert flow_matching_loss(x, y, x)[0] >= 0


def test_matched_scores_give_zero(rng):
    pair = gaussian_scores(0.3, 0.3)
    assert not dmd_gradient(rng.standard_normal((50, 2)), pair, n_samples=3).any()


def test_swap_negates_exactly(rng):
    pair = gaussian_scores(0.0, 1.5)
    z = rng.standard_normal((40, 3))
    g = dmd_gradient(z, pair, n_samples=2, seed=9)
    assert np.array_equal(dmd_gradient(z, pair.swapped(), n_samples=2, seed=9), -g)


def _kl_grad_avg(mu_r, mu_f, sched):
    return quad(lambda t: gaussian_kl_grad(mu_r, mu_f, t), sched.t_min, sched.t_max)[0] / (sched.t_max - sched.t_min)


@pytest.mark.parametrize("mu", [1.0, -0.7, 2.5])
def test_gaussian_oracle(mu):
    sched = FlowSchedule()
    n = 10_000
    z = mu + np.random.default_rng(0).standard_normal((n, 1))
    g = dmd_gradient(z, gaussian_scores(0.0, mu, 1.0, sched), seed=1)
    assert np.sign(g.mean()) == np.sign(mu)  # descent moves the fake mean toward 0
    want = _kl_grad_avg(0.0, mu, sched)
    assert abs(g.mean() - want) / abs(want) < 0.05


def test_gaussian_closed_form_at_fixed_t():
    g = dmd_gradient(np.zeros((4, 1)), gaussian_scores(0.0, 1.0), t=0.5)
    assert np.allclose(g, gaussian_kl_grad(0.0, 1.0, 0.5))
    assert np.isclose(gaussian_kl_grad(0.0, 1.0, 0.5), 0.5)


def test_monte_carlo_error_shrinks():
    pair = gaussian_scores(0.0, 1.0)
    spread = {}
    for n in (100, 1000, 10_000):
        means = [dmd_gradient(np.ones((n, 1)), pair, seed=s).mean() for s in range(40)]
        spread[n] = np.std(means)
    for lo, hi in ((100, 1000), (1000, 10_000)):
        assert 2.0 < spread[lo] / spread[hi] < 5.0  # sqrt(10) ≈ 3.16


def test_score_kinds_agree(rng):
    sched = FlowSchedule()
    base = gaussian_scores(0.2, -0.4, 1.0, sched)
    eps = ScorePair(lambda z, t: -sched.sigma(t) * base.real(z, t), lambda z, t: -sched.sigma(t) * base.fake(z, t),
                    "eps", sched)

    def vel(fn):
        # v = ε - x0 with x0 = (z - tε)/(1-t), ε = -t·score
        def f(z, t):
            e = -t * fn(z, t)
            return e - (z - t * e) / (1 - t)

        return f

    velocity = ScorePair(vel(base.real), vel(base.fake), "velocity", sched)
    z = rng.standard_normal((30, 2))
    ref = dmd_gradient(z, base, seed=4)
    assert np.allclose(dmd_gradient(z, eps, seed=4), ref, atol=1e-10)
    assert np.allclose(dmd_gradient(z, velocity, seed=4), ref, atol=1e-8)


def test_schedule_checks():
    with pytest.raises(ScheduleError):
        FlowSchedule(0.5, 0.2)
    with pytest.raises(ScheduleError):
        dmd_gradient(np.zeros((2, 1)), gaussian_scores(0, 1), t=0.999)
    with pytest.raises(ValueError):
        ScorePair(None, None, "logits")


def test_decode_selection_is_seeded():
    a = select_decode_latents(10, 2, seed=3)
    assert len(set(a.tolist())) == 2 and np.array_equal(a, select_decode_latents(10, 2, seed=3))
    assert select_decode_latents(1, 2).tolist() == [0]


def test_report_and_csv(rng):
    r = LossReport(0.5, 1.0, 2.0, 0.25)
    assert r.total == 0.5 + 1.0 + 2.0 + 2.0 * 0.25
    text = loss_csv([r])
    assert text.splitlines()[0].split(",") == list(LOSS_CSV_COLUMNS)
    z = rng.standard_normal((4, 2, 2, 3))
    x = rng.standard_normal((4, 8, 8, 3))
    rep = stage3_report(z, gaussian_scores(0, 1), z, z, z, x, x + 0.1)
    assert rep.l_fm > 0 and rep.l_recon_l2 > 0 and rep.l_dmd > 0
    assert np.isclose(rep.l_recon_l2, 0.01)
