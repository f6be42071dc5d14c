import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from san_mdtc.errors import ConfigError, DataError, NumericError
from san_mdtc.model import build_model
from san_mdtc.nn_core import Adam, LogSoftmax, Param, frozen_noise, grad_check, log_softmax
from san_mdtc.objectives import (DomainBatch, LabeledBatch, LossBreakdown, PseudoBatch,
                                 classification_loss, combined_objective, dls_cross_entropy,
                                 dls_objective, domain_objective, domain_targets, main_objective,
                                 rplr_loss, smoothed_domain_target)

from conftest import jitter_biases, tiny_arch


def test_dls_target_paper_example_exact():
    t = smoothed_domain_target(3, 0, 0.9)
    assert t.tolist() == [0.9, 0.05, 0.05]
    assert smoothed_domain_target(2, 1, 0.5).tolist() == [0.5, 0.5]


@pytest.mark.parametrize("m,gamma", [(1, 0.9), (3, 0.0), (3, 1.0), (3, 1.2)])
def test_dls_target_rejects(m, gamma):
    with pytest.raises(ConfigError):
        smoothed_domain_target(m, 0, gamma)


@settings(max_examples=100, deadline=None)
@given(st.integers(2, 40), st.floats(1e-6, 1 - 1e-6), st.data())
def test_dls_target_sums_to_one_and_symmetric(m, gamma, data):
    i = data.draw(st.integers(0, m - 1))
    t = smoothed_domain_target(m, i, gamma)
    assert abs(t.sum() - 1.0) < 1e-12
    assert (t > 0).all()
    others = np.delete(t, i)
    assert np.all(others == others[0])


def _random_log_probs(rng, n, m):
    return log_softmax(rng.standard_normal((n, m)) * 2)


@pytest.mark.parametrize("seed", range(20))
def test_termwise_equals_cross_entropy(seed):
    rng = np.random.default_rng(seed)
    m = int(rng.integers(2, 8))
    lp = _random_log_probs(rng, 7, m)
    doms = rng.integers(0, m, 7)
    gamma = float(rng.uniform(0.05, 0.95))
    a, _ = dls_objective(lp, doms, gamma)
    assert abs(a - dls_cross_entropy(lp, doms, gamma)) < 1e-10
    a1, _ = dls_objective(lp, doms, None)
    assert abs(a1 - dls_cross_entropy(lp, doms, None)) < 1e-10


def test_dls_special_values():
    t = smoothed_domain_target(4, 2, 0.7)
    lp = np.log(t)[None, :]
    value, _ = dls_objective(lp, [2], 0.7)
    assert value == pytest.approx(float((t * np.log(t)).sum()), rel=1e-14)
    v2, _ = dls_objective(np.log(np.full((3, 2), 0.5)), [0, 1, 1], 0.9)
    assert v2 == pytest.approx(math.log(0.5), rel=1e-14)


def test_dls_rejects_unnormalized_rows():
    with pytest.raises(NumericError):
        dls_objective(np.zeros((2, 3)), [0, 1], 0.9)


def test_dls_gradient_matches_finite_differences():
    rng = np.random.default_rng(3)
    logits = Param("z", rng.standard_normal((5, 4)))
    doms = rng.integers(0, 4, 5)
    ls = LogSoftmax()

    def f():
        return dls_objective(ls.forward(logits.value), doms, 0.8)[0]

    _, g = dls_objective(ls.forward(logits.value), doms, 0.8)
    logits.grad[...] = ls.backward(g)
    assert grad_check(f, [logits]).max_rel_err < 1e-4


def test_sharper_gamma_moves_optimum():
    """Directly maximize the smoothed objective over a free logit vector."""
    masses = []
    for gamma in (0.6, 0.75, 0.9):
        z = Param("z", np.zeros((1, 3)))
        opt = Adam([z], lr=0.05)
        ls = LogSoftmax()
        for _ in range(3000):
            _, g = dls_objective(ls.forward(z.value), [0], gamma)
            z.grad[...] = -ls.backward(g)
            opt.step()
        masses.append(math.exp(log_softmax(z.value)[0, 0]))
    assert masses[0] < masses[1] < masses[2]
    assert masses[2] == pytest.approx(0.9, abs=1e-3)


def _model(seed=3, **kw):
    return jitter_biases(build_model("san", tiny_arch(**kw), seed=seed), seed)


def test_classification_loss_uniform_classifier():
    model = build_model("san", tiny_arch(num_classes=2, num_domains=4))
    last = model.clf.layers[-2]
    last.weight.value[...] = 0.0
    last.bias.value[...] = 0.0
    rng = np.random.default_rng(0)
    batches = [LabeledBatch(i, rng.standard_normal((3, 6)), rng.integers(0, 2, 3)) for i in range(4)]
    loss, per = classification_loss(model, batches, train=False, backward=False)
    assert loss == pytest.approx(4 * math.log(2), rel=1e-14)
    assert len(per) == 4


def test_classification_loss_skips_empty_batch(caplog):
    model = _model()
    rng = np.random.default_rng(0)
    batches = [LabeledBatch(0, rng.standard_normal((0, 6)), np.zeros(0, dtype=int)),
               LabeledBatch(1, rng.standard_normal((2, 6)), np.array([0, 1]))]
    _, per = classification_loss(model, batches, train=False, backward=False)
    assert list(per) == [1]
    assert "empty" in caplog.text


def _batches(rng, m=3, n=4, k=3, dim=6):
    lab = [LabeledBatch(i, rng.standard_normal((n, dim)), rng.integers(0, k, n)) for i in range(m)]
    mix = [DomainBatch(i, rng.standard_normal((n, dim))) for i in range(m)]
    pse = [PseudoBatch(i, rng.standard_normal((n, dim)), rng.integers(0, k, n),
                       np.array([0.0, 0.7, 0.95, 0.55])[:n]) for i in range(m)]
    return lab, mix, pse


def _check(model, loss_fn, backward_fn, params):
    with frozen_noise(*model.modules()):
        model.zero_grad()
        backward_fn()
        return grad_check(loss_fn, params)


@pytest.mark.parametrize("seed", range(10))
def test_objective_gradients(seed):
    rng = np.random.default_rng(seed)
    model = _model(seed)
    lab, mix, pse = _batches(rng)
    main = model.main_params()

    r = _check(model, lambda: classification_loss(model, lab, backward=False)[0],
               lambda: classification_loss(model, lab), main)
    assert r.max_rel_err < 1e-4, ("J_C", r.per_param)

    r = _check(model, lambda: domain_objective(model, mix, 0.9)[0],
               lambda: domain_objective(model, mix, 0.9, backward_to="shared"),
               model.disc_params() + model.fs.params())
    assert r.max_rel_err < 1e-4, ("J_D", r.per_param)

    r = _check(model, lambda: rplr_loss(model, pse, backward=False)[0],
               lambda: rplr_loss(model, pse), main)
    assert r.max_rel_err < 1e-4, ("J_rplr", r.per_param)

    lam, lam_r = 0.3, 0.7
    r = _check(model,
               lambda: main_objective(model, lab, mix, pse, lam, lam_r, 0.9, backward=False).combined,
               lambda: main_objective(model, lab, mix, pse, lam, lam_r, 0.9), main)
    assert r.max_rel_err < 1e-4, ("combined", r.per_param)


def test_rplr_zero_weights_inert_and_linear():
    rng = np.random.default_rng(0)
    model = _model()
    x = rng.standard_normal((3, 6))
    y = np.array([0, 2, 1])
    model.zero_grad()
    loss, _ = rplr_loss(model, [PseudoBatch(0, x, y, np.zeros(3))])
    assert loss == 0.0 and all(not p.grad.any() for p in model.all_params())
    w = np.array([0.6, 0.0, 0.9])
    one, _ = rplr_loss(model, [PseudoBatch(0, x, y, w)], train=False, backward=False)
    two, _ = rplr_loss(model, [PseudoBatch(0, x, y, 2 * w)], train=False, backward=False)
    assert two == pytest.approx(2 * one, rel=1e-14)


def test_rplr_hand_computed_weighted_mean():
    rng = np.random.default_rng(1)
    model = _model()
    x = rng.standard_normal((3, 6))
    y = np.array([1, 0, 2])
    w = np.array([0.8, 0.0, 0.6])
    loss, _ = rplr_loss(model, [PseudoBatch(0, x, y, w)], train=False, backward=False)
    f = np.concatenate([model.fs.forward(x, False), model.specific_forward(x, 0, False)], axis=1)
    lp = model.clf.forward(f, False)
    expected = -(0.8 * lp[0, 1] + 0.6 * lp[2, 2]) / 2
    assert loss == pytest.approx(expected, rel=1e-12)


def test_rplr_unit_weights_equal_classification():
    rng = np.random.default_rng(2)
    model = _model()
    x = rng.standard_normal((4, 6))
    y = rng.integers(0, 3, 4)
    a, _ = rplr_loss(model, [PseudoBatch(1, x, y, np.ones(4))], train=False, backward=False)
    b, _ = classification_loss(model, [LabeledBatch(1, x, y)], train=False, backward=False)
    assert a == pytest.approx(b, rel=1e-14)


def test_rplr_length_mismatch():
    with pytest.raises(DataError):
        rplr_loss(_model(), [PseudoBatch(0, np.zeros((3, 6)), np.zeros(2, dtype=int), np.ones(3))])


def test_combined_roles_and_weights():
    parts = LossBreakdown(j_c=1.5, j_d_els=-2.0, j_rplr=0.25)
    assert combined_objective(parts, 0.1, 2.0, "main") == 1.5 + 0.1 * -2.0 + 2.0 * 0.25
    assert combined_objective(parts, 0.1, 2.0, "discriminator") == 2.0
    with pytest.raises(ConfigError):
        combined_objective(parts, -1, 0, "main")
    with pytest.raises(ConfigError):
        combined_objective(parts, 0, -1, "main")
    with pytest.raises(ConfigError):
        combined_objective(parts, 0, 0, "critic")


def test_lambda_zero_ignores_discriminator():
    rng = np.random.default_rng(4)
    model = _model()
    lab, mix, pse = _batches(rng)
    model.zero_grad()
    with frozen_noise(*model.modules()):
        out = main_objective(model, lab, mix, pse, 0.0, 1.0, 0.9)
    assert out.j_d_els == 0.0
    assert all(not p.grad.any() for p in model.disc_params())


def test_lambda_rplr_zero_reduces_to_adversarial_objective():
    rng = np.random.default_rng(5)
    model = _model()
    lab, mix, pse = _batches(rng)
    a = main_objective(model, lab, mix, pse, 0.2, 0.0, 0.9, train=False, backward=False)
    b = main_objective(model, lab, mix, [], 0.2, 1.0, 0.9, train=False, backward=False)
    assert a.combined == b.combined and a.j_rplr == 0.0


def test_one_discriminator_step_increases_objective():
    rng = np.random.default_rng(6)
    model = _model()
    mix = [DomainBatch(i, rng.standard_normal((8, 6))) for i in range(3)]
    opt = Adam(model.disc_params(), lr=1e-4)
    before, _ = domain_objective(model, mix, 0.9, train=False)
    fs_before = [p.value.copy() for p in model.fs.params()]
    domain_objective(model, mix, 0.9, train=False, backward_to="disc", scale=-1.0)
    opt.step()
    after, _ = domain_objective(model, mix, 0.9, train=False)
    assert after > before
    assert all(np.array_equal(a, p.value) for a, p in zip(fs_before, model.fs.params()))


def test_domain_targets_one_hot():
    t = domain_targets(3, [2, 0], None)
    assert t.tolist() == [[0, 0, 1], [1, 0, 0]]
