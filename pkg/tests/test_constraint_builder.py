import numpy as np
import pytest

from lbsc.constraint_builder import (
    BarrierSpec,
    ConstraintRow,
    LyapunovSpec,
    SlackChannel,
    moment_vectors,
    safety_row,
    satisfies_esclf,
    satisfies_zcbf,
    stability_row,
)
from lbsc.gp_regression import PosteriorMoment
from lbsc.vehicle_dynamics import AffineModel, ScalarField

LAM = 1.5
K_ALPHA = 4.0


@pytest.fixture
def model() -> AffineModel:
    return AffineModel(
        n=2,
        m=1,
        drift=lambda x: np.array([x[1], -0.2]),
        input_map=lambda x: np.array([[0.0], [0.5]]),
        drift_jacobian=lambda x: np.array([[0.0, 1.0], [0.0, 0.0]]),
    )


@pytest.fixture
def barrier() -> BarrierSpec:
    field = ScalarField(
        value=lambda x: float(x[0] - 2.0),
        gradient=lambda x: np.array([1.0, 0.0]),
        hessian=lambda x: np.zeros((2, 2)),
        name="gap",
    )
    return BarrierSpec(field, lam=LAM, k_alpha=K_ALPHA)


@pytest.fixture
def lyapunov() -> LyapunovSpec:
    field = ScalarField(
        value=lambda x: float(0.5 * (x[1] - 3.0) ** 2),
        gradient=lambda x: np.array([0.0, x[1] - 3.0]),
        hessian=lambda x: np.diag([0.0, 1.0]),
        name="V",
    )
    return LyapunovSpec(field, rate=0.6)


def test_safety_row_without_uncertainty(model, barrier):
    x = np.array([5.0, 1.0])
    row = safety_row(barrier, model, x, c_delta=3.0)
    # h_ext = v + lam (p - 2), grad = [lam, 1]
    h_ext = 1.0 + LAM * 3.0
    lf = LAM * 1.0 + (-0.2)
    assert row.slack_channel is SlackChannel.SAFETY
    assert row.coeff_u.tolist() == pytest.approx([-0.5])
    assert row.rhs_const == pytest.approx(-lf - K_ALPHA * h_ext)


def test_safety_row_with_moments(model, barrier):
    x = np.array([5.0, 1.0])
    plain = safety_row(barrier, model, x, c_delta=3.0)
    moments = {1: PosteriorMoment(mean=0.4, variance=0.04)}
    robust = safety_row(barrier, model, x, moments, c_delta=3.0)
    assert robust.rhs_const - plain.rhs_const == pytest.approx(-0.4 + 3.0 * 0.2)


def test_stability_row(model, lyapunov):
    x = np.array([0.0, 1.0])
    moments = {1: PosteriorMoment(mean=-0.1, variance=0.09)}
    row = stability_row(lyapunov, model, x, moments, c_delta=2.0)
    e = 1.0 - 3.0
    assert row.slack_channel is SlackChannel.STABILITY
    assert row.coeff_u.tolist() == pytest.approx([0.5 * e])
    expected = e * (-0.2) + e * (-0.1) + 2.0 * abs(e) * 0.3 + 0.6 * 0.5 * e * e
    assert row.rhs_const == pytest.approx(expected)


def test_zero_slack_input_satisfies_barrier_for_interval_errors(model, barrier):
    x = np.array([2.5, -1.0])
    mu, sd, c = 0.3, 0.2, 3.0
    row = safety_row(barrier, model, x, {1: PosteriorMoment(mu, sd**2)}, c_delta=c)
    # boundary input: coeff * u + rhs = 0
    u = np.array([-row.rhs_const / row.coeff_u[0]])
    for d1 in (mu - c * sd, mu, mu + c * sd):
        check = satisfies_zcbf(barrier, model, x, u, d=np.array([0.0, d1]))
        assert check.margin >= -1e-9
        assert check.satisfied or abs(check.margin) < 1e-9


def test_zero_slack_input_satisfies_clf_for_interval_errors(model, lyapunov):
    x = np.array([0.0, 4.0])
    mu, sd, c = -0.2, 0.1, 3.0
    row = stability_row(lyapunov, model, x, {1: PosteriorMoment(mu, sd**2)}, c_delta=c)
    u = np.array([-row.rhs_const / row.coeff_u[0]])
    for d1 in (mu - c * sd, mu, mu + c * sd):
        check = satisfies_esclf(lyapunov, model, x, u, d=np.array([0.0, d1]))
        assert check.margin <= 1e-9


def test_row_value_and_validation():
    row = ConstraintRow(coeff_u=[2.0, -1.0], rhs_const=0.5, slack_channel=SlackChannel.NONE)
    assert row.value(np.array([1.0, 3.0])) == pytest.approx(-0.5)
    with pytest.raises(ValueError):
        ConstraintRow(coeff_u=[float("nan")], rhs_const=0.0, slack_channel=SlackChannel.SAFETY)


def test_moment_vectors_scatter():
    mu, sigma = moment_vectors(4, {1: PosteriorMoment(0.5, 0.25), 3: PosteriorMoment(-1.0, 4.0)})
    assert mu.tolist() == [0.0, 0.5, 0.0, -1.0]
    assert sigma.tolist() == [0.0, 0.5, 0.0, 2.0]
    assert moment_vectors(2, None)[0].tolist() == [0.0, 0.0]


def test_spec_gain_validation(barrier):
    with pytest.raises(ValueError):
        BarrierSpec(barrier.field, lam=0.0)
    with pytest.raises(ValueError):
        LyapunovSpec(barrier.field, rate=-1.0)
