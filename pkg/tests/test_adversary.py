import numpy as np
import pytest
from hypothesis import given, strategies as st
from hypothesis.extra.numpy import arrays

from advmca import adversary as adv
from advmca.network import model as net
from advmca.network.training import TrainConfig, fit
from advmca.spectral import (SpectralSequence, analyse, epsilon_snr, gl_project,
                             perturbation_snr, stft, total_norm)

from conftest import rel_err


# -- feasibility projection ---------------------------------------------------

def test_projection_inside_ball_is_identity():
    rng = np.random.default_rng(0)
    X = rng.random((3, 4, 2))
    W = X + 1e-3
    np.testing.assert_array_equal(adv.project_feasible(W, X, 1.0), W)
    np.testing.assert_array_equal(adv.project_feasible(X, X, 1e-9), X)


def test_projection_at_twice_the_radius_is_the_midpoint():
    rng = np.random.default_rng(1)
    X = rng.random((4, 5, 1))
    D = rng.standard_normal(X.shape)
    eps = 0.3
    W = X + D * (2 * 4 * eps / np.linalg.norm(D))
    P = adv.project_feasible(W, X, eps)
    np.testing.assert_allclose(P, (W + X) / 2)
    assert np.linalg.norm(P - X) == pytest.approx(4 * eps)


@given(arrays(np.float64, (3, 4, 2), elements=st.floats(-10, 10)),
       arrays(np.float64, (3, 4, 2), elements=st.floats(-10, 10)),
       st.floats(1e-3, 5.0))
def test_projection_is_feasible_idempotent_and_non_expansive(W, X, eps):
    P = adv.project_feasible(W, X, eps)
    radius = 3 * eps
    assert np.linalg.norm(P - X) <= radius + 1e-9
    assert np.linalg.norm(P - X) <= np.linalg.norm(W - X) + 1e-12
    np.testing.assert_allclose(adv.project_feasible(P, X, eps), P, atol=1e-12)


def test_projection_is_the_closest_feasible_point():
    # oracle: no sampled point of the ball is closer to W than the projection
    rng = np.random.default_rng(2)
    X = rng.random((2, 3, 1))
    W = X + rng.standard_normal(X.shape) * 5
    eps = 0.2
    P = adv.project_feasible(W, X, eps)
    best = np.linalg.norm(W - P)
    for _ in range(2000):
        d = rng.standard_normal(X.shape)
        Z = X + d / np.linalg.norm(d) * 2 * eps * rng.random() ** (1 / 6)
        assert np.linalg.norm(W - Z) >= best - 1e-12


def test_projection_in_the_complex_domain():
    rng = np.random.default_rng(3)
    X = rng.standard_normal((2, 5)) + 1j * rng.standard_normal((2, 5))
    W = X + 10 * (rng.standard_normal((2, 5)) + 1j * rng.standard_normal((2, 5)))
    P = adv.project_feasible(W, X, 0.5)
    assert np.linalg.norm(P - X) == pytest.approx(1.0)
    assert np.iscomplexobj(P)


def test_projection_of_sequences_and_errors():
    rng = np.random.default_rng(4)
    X = SpectralSequence(rng.random((2, 513, 1)), rng.uniform(-3, 3, (513, 2)))
    W = X.with_magnitudes(X.magnitudes + 1.0)
    eps = epsilon_snr(X, 20.0)
    P = adv.project_feasible(W, X, eps)
    assert isinstance(P, SpectralSequence)
    np.testing.assert_array_equal(P.phase, W.phase)
    assert perturbation_snr(X, P) == pytest.approx(20.0, abs=1e-9)
    with pytest.raises(adv.AdversaryError):
        adv.project_feasible(W, X, 0.0)
    with pytest.raises(adv.AdversaryError):
        adv.project_feasible(np.zeros((2, 3)), np.zeros((3, 2)), 1.0)


# -- configuration and directives ----------------------------------------------

def test_config_validation():
    with pytest.raises(adv.AdversaryError):
        adv.AdversaryConfig(mu=-1.0)
    with pytest.raises(adv.AdversaryError):
        adv.AdversaryConfig(k_max=0)
    with pytest.raises(adv.AdversaryError):
        adv.AdversaryConfig(r_min=0.0)
    with pytest.raises(adv.AdversaryError):
        adv.Directive.correct_with_prob(1.5)
    with pytest.raises(adv.AdversaryError):
        adv.Directive("sometimes")


def test_fixed_and_all_labels_directives():
    assert adv.choose_targets(5, [0, 1, 2, 3, 4], adv.Directive.fixed_label(2)) == [2] * 5
    assert adv.choose_targets(3, [0, 2], adv.Directive.all_labels()) == [[0, 1, 2]] * 2
    with pytest.raises(adv.AdversaryError):
        adv.choose_targets(3, [0], adv.Directive.fixed_label(3))
    with pytest.raises(adv.AdversaryError):
        adv.choose_targets(3, [4], adv.Directive.all_labels())


def test_always_wrong_never_hits_the_truth_and_covers_the_rest():
    rng = np.random.default_rng(5)
    truths = rng.integers(0, 4, 4000)
    targets = np.array(adv.choose_targets(4, truths, adv.Directive.always_wrong(seed=3)))
    assert np.all(targets != truths)
    for t in range(4):
        picked = targets[truths == t]
        counts = np.bincount(picked, minlength=4) / len(picked)
        assert counts[t] == 0
        np.testing.assert_allclose(np.delete(counts, t), 1 / 3, atol=0.05)


def test_correct_with_probability_monte_carlo():
    truths = np.random.default_rng(6).integers(0, 10, 10000)
    targets = adv.choose_targets(10, truths, adv.Directive.correct_with_prob(0.1, seed=7))
    assert np.mean(np.array(targets) == truths) == pytest.approx(0.1, abs=0.01)
    # general p: truth with probability p
    targets = adv.choose_targets(10, truths, adv.Directive.correct_with_prob(0.6, seed=7))
    assert np.mean(np.array(targets) == truths) == pytest.approx(0.6, abs=0.02)


def test_directives_are_deterministic_given_seed():
    truths = list(range(5)) * 4
    d = adv.Directive.correct_with_prob(0.2, seed=11)
    assert adv.choose_targets(5, truths, d) == adv.choose_targets(5, truths, d)
    e = adv.Directive.correct_with_prob(0.2, seed=12)
    assert adv.choose_targets(5, truths, d) != adv.choose_targets(5, truths, e)


# -- attack ---------------------------------------------------------------------

def check_feasible(result, X, cfg):
    Y = result.adversarial
    radius = len(X) * epsilon_snr(X, cfg.snr_db)
    assert total_norm(Y.magnitudes - X.magnitudes) <= radius + 1e-9
    assert Y.magnitudes.min() >= 0
    assert result.achieved_snr >= cfg.snr_db - 0.01
    assert rel_err(gl_project(Y).magnitudes, Y.magnitudes) < 1e-5


def test_attack_changes_the_label_within_the_budget(tiny_model):
    params, _, test = tiny_model
    cfg = adv.AdversaryConfig(snr_db=15, mu=1.0, r_min=0.9, k_max=100)
    X, y = test[0]
    target = (y + 1) % params.n_classes
    r = adv.attack(params, X, target, cfg)
    check_feasible(r, X, cfg)
    conf = net.confidence(net.forward(params, r.adversarial))
    assert r.achieved_confidence == pytest.approx(conf[target])
    assert r.succeeded == (conf[target] >= cfg.r_min)
    assert r.iterations <= cfg.k_max
    assert r.succeeded


def test_already_confident_target_returns_immediately(tiny_model):
    params, _, test = tiny_model
    X, y = test[0]
    r = adv.attack(params, X, net.classify(params, X), adv.AdversaryConfig(r_min=0.5))
    assert r.iterations == 0 and r.succeeded
    assert r.achieved_snr == float("inf")
    np.testing.assert_array_equal(r.adversarial.magnitudes, X.magnitudes)


def test_zero_step_attack_only_projects(tiny_model):
    params, _, test = tiny_model
    X, y = test[1]
    target = (y + 1) % params.n_classes
    r = adv.attack(params, X, target, adv.AdversaryConfig(mu=0.0, k_max=1))
    assert r.iterations == 1
    assert not r.succeeded
    assert rel_err(r.adversarial.magnitudes, X.magnitudes) < 1e-5


def test_attack_rejects_bad_inputs(tiny_model):
    params, _, test = tiny_model
    X, _ = test[0]
    with pytest.raises(Exception):
        adv.attack(params, SpectralSequence(X.magnitudes), 0)
    with pytest.raises(adv.AdversaryError):
        adv.attack(params, X, params.n_classes)


def test_every_iterate_is_feasible(tiny_model, monkeypatch):
    params, _, test = tiny_model
    X, y = test[2]
    cfg = adv.AdversaryConfig(snr_db=25, k_max=15, r_min=1.0)
    radius = len(X) * epsilon_snr(X, cfg.snr_db)
    seen = []
    real = net.posteriors_with_input_grad

    def spy(p, seq, t):
        seen.append(seq)
        return real(p, seq, t)

    monkeypatch.setattr(adv._model, "posteriors_with_input_grad", spy)
    adv.attack(params, X, (y + 1) % params.n_classes, cfg)
    assert len(seen) == cfg.k_max + 1
    for it in seen:
        assert total_norm(it.magnitudes - X.magnitudes) <= radius + 1e-9
        assert it.magnitudes.min() >= 0


def test_loosening_the_budget_keeps_success(tiny_model):
    params, _, test = tiny_model
    X, y = test[2]
    target = (y + 2) % params.n_classes
    grid = [40, 30, 20, 15, 10, 5]
    outcome = [adv.attack(params, X, target,
                          adv.AdversaryConfig(snr_db=s, mu=1.0, k_max=60)).succeeded
               for s in grid]
    assert True in outcome
    first = outcome.index(True)
    assert all(outcome[first:])


def test_rendered_audio_reproduces_the_adversarial_sequence(tiny_model):
    params, _, test = tiny_model
    X, y = test[0]
    r = adv.attack(params, X, (y + 1) % params.n_classes, adv.AdversaryConfig(k_max=10))
    audio = adv.render_audio(r)
    again = analyse(audio, 1)
    assert rel_err(again.magnitudes, r.adversarial.magnitudes) < 1e-4
    silent = adv.AttackResult(r.adversarial.with_magnitudes(np.zeros_like(X.magnitudes)),
                              0, 0, 0.0, 0.0, False)
    assert np.all(adv.render_audio(silent).samples == 0)


def test_identity_result_renders_the_exemplar(tiny_model):
    params, _, test = tiny_model
    X, _ = test[0]
    r = adv.AttackResult(X, 0, 0, 1.0, float("inf"), True)
    audio = adv.render_audio(r)
    np.testing.assert_allclose(stft(audio).bins, X.complex_frames(), atol=1e-8)


def test_reports(tiny_model):
    params, _, test = tiny_model
    X, y = test[0]
    records = []
    for t in range(params.n_classes):
        r = adv.attack(params, X, t, adv.AdversaryConfig(k_max=5))
        records.append(adv.make_record(params, "a.wav", y, r))
    text = adv.report_text(records)
    lines = text.splitlines()
    assert lines[0] == ",".join(adv.REPORT_FIELDS)
    assert len(lines) == 1 + params.n_classes
    assert lines[1 + y].split(",")[-1] == "true"  # own label already held
    grid = adv.ensemble_table(records, params.label_names).splitlines()
    assert grid[0].split(",") == ["file", *params.label_names]
    assert grid[1].split(",")[1 + y] == "inf"


# -- adversarial training ---------------------------------------------------------

def test_zero_step_adversarial_training_equals_plain_training(tiny_model):
    _, train, _ = tiny_model
    spec = net.dnn_spec(width=6, depth=1)
    names = ["class00", "class01", "class02"]
    cfg = TrainConfig(max_epochs=3, seed=5)
    p1, h1 = fit(spec, train, train[:3], cfg, label_names=names)
    p2, h2 = adv.adversarial_fit(spec, train, train[:3], cfg, epsilon=0.0, label_names=names)
    assert h1 == h2
    for a, b in zip(p1.arrays(), p2.arrays()):
        np.testing.assert_array_equal(a, b)


def test_fast_perturbation_moves_toward_the_target(tiny_model):
    params, train, _ = tiny_model
    X, y = train[0]
    target = (y + 1) % params.n_classes
    moved = adv.fast_perturbation(params, X.magnitudes, np.full(len(X), target), 0.05)
    before = net.forward(params, X.magnitudes)[:, target].mean()
    after = net.forward(params, moved)[:, target].mean()
    assert after > before


def test_adversarial_training_is_deterministic(tiny_model):
    _, train, _ = tiny_model
    spec = net.dnn_spec(width=6, depth=1)
    cfg = TrainConfig(max_epochs=2, seed=1)
    p1, _ = adv.adversarial_fit(spec, train, train[:3], cfg)
    p2, _ = adv.adversarial_fit(spec, train, train[:3], cfg)
    for a, b in zip(p1.arrays(), p2.arrays()):
        np.testing.assert_array_equal(a, b)
