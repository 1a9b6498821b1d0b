import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from flowimpute import diffcore as dc
from flowimpute.dataset import RngStream
from flowimpute.diffcore import ParamSet, evaluate_with_gradients, finite_difference_gradient, max_relative_error
from flowimpute.flow import FlowModel, flow_forward, flow_inverse, log_likelihood, nll_loss
from flowimpute.latent import LatentNet, h_loss, latent_map, observed_weights
from helpers import fd_crosses_kink, latent_with, zero_flow


def small_setup(seed: int):
    flow = FlowModel.create(3, RngStream(seed), n_layers=2, hidden=4)
    net = LatentNet.create(3, RngStream(seed).child("h"))
    gen = np.random.default_rng(seed)
    x = gen.uniform(size=(5, 3))
    masks = (gen.random((5, 3)) < 0.3).astype(np.uint8)
    masks[:, 0] = 0
    return flow, net, x, masks


def safe_setup():
    """First seed where no finite-difference probe on phi crosses a rectifier kink."""
    for seed in range(50):
        flow, net, x, m = small_setup(seed)
        if not fd_crosses_kink(lambda p: h_loss(x, m, flow, net, 0.7, phi=p), net.params):
            return flow, net, x, m
    raise AssertionError("no kink-free configuration found")


def test_zero_network_outputs_zero():
    out = latent_map(np.array([1.0, -2.0, 3.0]), latent_with(3, 0.0))
    assert out.value.tolist() == [0.0, 0.0, 0.0]


def test_identity_network_on_nonnegative_input():
    z = np.array([0.0, 1.5, 7.0])
    assert np.array_equal(latent_map(z, LatentNet.identity(3)).value, z)


def test_scalar_chain_of_ones():
    assert latent_map(np.array([2.0]), latent_with(1, 1.0)).value.tolist() == [2.0]


def test_architecture_is_five_square_layers():
    net = LatentNet.create(4, RngStream(0))
    assert net.params.shapes == {f"h.{k}{i}": ((4, 4) if k == "w" else (4,)) for i in range(5) for k in "wb"}
    with pytest.raises(ValueError):
        LatentNet(3, net.params)


def test_identity_skip_init_is_near_identity():
    net = LatentNet.create(4, RngStream(0), identity_init=True)
    z = np.array([0.2, 0.4, 0.6, 0.8])
    assert np.max(np.abs(latent_map(z, net).value - z)) < 0.1


def test_identity_net_lambda_zero_gives_zero_loss():
    flow = zero_flow([[True, False, False], [False, True, True]])
    x = np.random.default_rng(0).uniform(size=(4, 3))
    m = np.array([[0, 1, 0], [0, 0, 0], [1, 0, 0], [0, 0, 1]])
    assert float(h_loss(x, m, flow, LatentNet.identity(3), 0.0).value) == 0.0


def test_identity_net_lambda_one_is_nll():
    # positive inputs keep the rectifiers linear, so the identity net is exact
    flow = FlowModel.create(2, RngStream(3), n_layers=2)
    x = np.random.default_rng(1).uniform(0.2, 1.0, size=(6, 2))
    assert np.all(flow_forward(x, flow)[0].value > 0)
    m = np.zeros((6, 2), np.uint8)
    loss = float(h_loss(x, m, flow, LatentNet.identity(2), 1.0).value)
    assert loss == pytest.approx(float(nll_loss(x, flow).value), abs=1e-12)


def test_hand_mse_with_zero_output():
    flow = zero_flow([[True, False]])
    loss = h_loss(np.array([[1.0, 2.0]]), np.zeros((1, 2)), flow, latent_with(2, 0.0), 0.0)
    assert float(loss.value) == 2.5


def test_mse_counts_only_observed_entries():
    flow = zero_flow([[True, False]])
    x = np.array([[1.0, 2.0], [3.0, 4.0]])
    m = np.array([[0, 1], [0, 0]])
    loss = h_loss(x, m, flow, latent_with(2, 0.0), 0.0)
    assert float(loss.value) == pytest.approx((1.0 + (9 + 16) / 2) / 2)


def test_rows_without_observations_rejected():
    with pytest.raises(ValueError, match="rows"):
        observed_weights(np.array([[0, 1], [1, 1]]))


def test_negative_lambda_rejected():
    flow, net, x, m = small_setup(0)
    with pytest.raises(ValueError):
        h_loss(x, m, flow, net, -1.0)


def test_phi_gradients_match_finite_differences():
    flow, net, x, m = safe_setup()
    fn = lambda p: h_loss(x, m, flow, net, 0.7, phi=p)  # noqa: E731
    _, analytic = evaluate_with_gradients(fn, net.params)
    numeric = finite_difference_gradient(fn, net.params)
    assert max_relative_error(analytic, numeric) < 1e-4


def test_theta_gradients_are_exactly_zero():
    flow, net, x, m = small_setup(1)
    both = flow.params.merged(net.params)

    def fn(p):
        return h_loss(x, m, flow, net, 0.7, theta={k: p[k] for k in flow.params},
                      phi={k: p[k] for k in net.params})

    _, grads = evaluate_with_gradients(fn, both)
    assert all(not np.any(grads[k]) for k in flow.params)
    assert any(np.any(grads[k]) for k in net.params)


@settings(max_examples=20, deadline=None)
@given(seed=st.integers(0, 10**6))
def test_row_permutation_invariance(seed):
    flow, net, x, m = small_setup(seed % 50)
    perm = np.random.default_rng(seed).permutation(5)
    a = float(h_loss(x, m, flow, net, 0.3).value)
    b = float(h_loss(x[perm], m[perm], flow, net, 0.3).value)
    assert a == pytest.approx(b, rel=1e-12, abs=1e-12)


@settings(max_examples=20, deadline=None)
@given(seed=st.integers(0, 50), l1=st.floats(0, 5), l2=st.floats(0, 5))
def test_linear_in_lambda(seed, l1, l2):
    flow, net, x, m = small_setup(seed)
    x_hat = flow_inverse(latent_map(flow_forward(x, flow)[0], net), flow).value
    mean_ll = float(np.mean(log_likelihood(x_hat, flow).value))
    diff = float(h_loss(x, m, flow, net, l2).value) - float(h_loss(x, m, flow, net, l1).value)
    assert diff == pytest.approx(-(l2 - l1) * mean_ll, rel=1e-9, abs=1e-9)


def test_h_loss_does_not_mutate_inputs():
    flow, net, x, m = small_setup(2)
    theta, phi, x0 = flow.params.copy(), net.params.copy(), x.copy()
    h_loss(x, m, flow, net, 1.0)
    assert flow.params == theta and net.params == phi and np.array_equal(x, x0)
    assert isinstance(dc.stop_gradient(x), dc.Var) and isinstance(net.params, ParamSet)
