"""SNR-constrained adversary, target directives and fast adversarial training."""
from __future__ import annotations

import csv
import io
from dataclasses import dataclass

import numpy as np

from .network import model as _model
from .network.model import NetworkParams, confidence
from .network.training import TrainConfig, fit
from .spectral import (AudioSignal, SpectralError, SpectralSequence, epsilon_snr,
                       perturbation_snr, render_frames, resynthesise)


class AdversaryError(ValueError):
    pass


@dataclass(frozen=True)
class AdversaryConfig:
    snr_db: float = 15.0
    mu: float = 0.1
    r_min: float = 0.9
    k_max: int = 100

    def __post_init__(self):
        if self.mu < 0:
            raise AdversaryError("step size must be non-negative")
        if self.k_max < 1:
            raise AdversaryError("k_max must be at least 1")
        if not 0.0 < self.r_min <= 1.0:
            raise AdversaryError("r_min must lie in (0, 1]")


@dataclass(frozen=True)
class Directive:
    """How the adversary picks its target label for each item."""

    kind: str
    p: float | None = None
    label: int | None = None
    seed: int = 0

    KINDS = ("correct_with_prob", "always_wrong", "fixed_label", "all_labels")

    def __post_init__(self):
        if self.kind not in self.KINDS:
            raise AdversaryError(f"unknown directive {self.kind!r}")
        if self.kind == "correct_with_prob" and self.p is not None and not 0 <= self.p <= 1:
            raise AdversaryError("p must lie in [0, 1]")
        if self.kind == "fixed_label" and self.label is None:
            raise AdversaryError("fixed_label needs a label")

    @classmethod
    def correct_with_prob(cls, p=None, seed=0):
        return cls("correct_with_prob", p=p, seed=seed)

    @classmethod
    def always_wrong(cls, seed=0):
        return cls("always_wrong", seed=seed)

    @classmethod
    def fixed_label(cls, label):
        return cls("fixed_label", label=label)

    @classmethod
    def all_labels(cls):
        return cls("all_labels")


@dataclass
class AttackResult:
    adversarial: SpectralSequence
    target: int
    iterations: int
    achieved_confidence: float
    achieved_snr: float
    succeeded: bool


def _ball(W, X, radius):
    """Least-squares projection of ``W`` onto ``{Z : ||Z - X|| <= radius}``."""
    dist = float(np.sqrt(np.sum(np.abs(W - X) ** 2)))
    nu = max(0.0, dist / radius - 1.0)
    if nu == 0.0:
        return W
    return (W + nu * X) / (1.0 + nu)


def project_feasible(W, X, eps: float):
    """Project ``W`` onto the SNR ball of radius ``N * eps`` around ``X``.

    Accepts two sequences (the result keeps ``W``'s phase) or two arrays whose
    first axis indexes elements; complex arrays are projected in the complex
    domain.
    """
    if eps <= 0:
        raise AdversaryError("eps must be positive")
    if isinstance(W, SpectralSequence):
        if W.magnitudes.shape != X.magnitudes.shape:
            raise AdversaryError("shape mismatch")
        return W.with_magnitudes(_ball(W.magnitudes, X.magnitudes, len(X) * eps))
    W, X = np.asarray(W), np.asarray(X)
    if W.shape != X.shape:
        raise AdversaryError("shape mismatch")
    return _ball(W, X, W.shape[0] * eps)


def attack(params: NetworkParams, X: SpectralSequence, y: int,
           cfg: AdversaryConfig = AdversaryConfig()) -> AttackResult:
    """Search the SNR ball around ``X`` for a sequence labelled ``y`` with confidence ``r_min``.

    Each iteration descends the target cross-entropy, clamps to non-negative
    magnitudes, projects onto valid sequences with one Griffin-Lim pass and
    pulls the result back into the SNR ball.  The ball step mixes complex
    spectra, which keeps every iterate realisable as a waveform; its
    magnitude distance to ``X`` never exceeds the complex one.
    """
    if X.phase is None:
        raise SpectralError("attack needs the exemplar phase")
    if not 0 <= y < params.n_classes:
        raise AdversaryError(f"target {y} outside [0, {params.n_classes})")
    T = X.frames_per_element
    exemplar = X.complex_frames()
    # frames x elements layout for the ball: one row per frame block
    radius_eps = epsilon_snr(X, cfg.snr_db)
    current = X
    P, gradient = _model.posteriors_with_input_grad(params, current, y)
    conf = float(confidence(P)[y])
    k = 0
    while conf < cfg.r_min and k < cfg.k_max:
        step = current.magnitudes - cfg.mu * gradient()
        V = current.with_magnitudes(np.maximum(step, 0.0))
        W = resynthesise(V.complex_frames(), X.config)
        C = _ball(W, exemplar, len(X) * radius_eps)
        current = SpectralSequence.from_frames(np.abs(C), T, np.angle(C), X.config)
        k += 1
        P, gradient = _model.posteriors_with_input_grad(params, current, y)
        conf = float(confidence(P)[y])
    return AttackResult(current, y, k, conf, perturbation_snr(X, current), conf >= cfg.r_min)


def render_audio(result: AttackResult) -> AudioSignal:
    """Waveform of the adversarial sequence."""
    return render_frames(result.adversarial)


def choose_targets(params: NetworkParams, truths, directive: Directive):
    """Target label(s) for each item with true label in ``truths``.

    ``all_labels`` yields the full label list per item; every other
    directive yields one label per item.
    """
    K = params.n_classes if isinstance(params, NetworkParams) else int(params)
    truths = [int(t) for t in truths]
    if any(not 0 <= t < K for t in truths):
        raise AdversaryError(f"true labels must lie in [0, {K})")
    rng = np.random.default_rng(directive.seed)
    if directive.kind == "fixed_label":
        if not 0 <= directive.label < K:
            raise AdversaryError(f"fixed label {directive.label} outside [0, {K})")
        return [directive.label] * len(truths)
    if directive.kind == "all_labels":
        return [list(range(K)) for _ in truths]
    if directive.kind == "always_wrong":
        if K < 2:
            raise AdversaryError("always_wrong needs at least two classes")
        out = []
        for t in truths:
            pick = int(rng.integers(K - 1))
            out.append(pick + (pick >= t))
        return out
    p = directive.p
    if p is None or abs(p - 1.0 / K) < 1e-12:
        # uniform draw over all labels: correct with probability 1/K
        return [int(v) for v in rng.integers(K, size=len(truths))]
    out = []
    for t in truths:
        if rng.random() < p or K == 1:
            out.append(t)
        else:
            pick = int(rng.integers(K - 1))
            out.append(pick + (pick >= t))
    return out


def fast_perturbation(params, xb, targets, epsilon):
    """One input step towards ``targets``: ``xb - epsilon * grad``."""
    return xb - epsilon * _model.grad_input(params, xb, targets)


def adversarial_fit(spec, train, valid, cfg: TrainConfig, epsilon=None, label_names=None):
    """Train with a single-step adversarial example folded into every minibatch.

    Each minibatch draws labels uniformly, moves its inputs one gradient step
    towards them and updates the parameters on the moved inputs with the
    true labels.  ``epsilon`` defaults to 0.01 times the per-dimension
    training standard deviation.
    """
    def perturb(params, xb, rng):
        targets = rng.integers(params.n_classes, size=xb.shape[0])
        eps = 0.01 * params.standardizer.std if epsilon is None else epsilon
        return fast_perturbation(params, xb, targets, eps)

    return fit(spec, train, valid, cfg, label_names=label_names, perturb=perturb)


# -- reports -----------------------------------------------------------------

REPORT_FIELDS = ["file", "true_label", "target_label", "predicted_label",
                 "confidence", "snr_db", "iterations", "succeeded"]


@dataclass
class AttackRecord:
    file: str
    true_label: str
    target_label: str
    predicted_label: str
    confidence: float
    snr_db: float
    iterations: int
    succeeded: bool


def make_record(params, name, true_label, result: AttackResult) -> AttackRecord:
    names = params.label_names
    predicted = _model.classify(params, result.adversarial)
    return AttackRecord(name, names[true_label], names[result.target], names[predicted],
                        result.achieved_confidence, result.achieved_snr,
                        result.iterations, result.succeeded)


def report_text(records) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(REPORT_FIELDS)
    for r in records:
        w.writerow([r.file, r.true_label, r.target_label, r.predicted_label,
                    f"{r.confidence:.6f}", f"{r.snr_db:.4f}", r.iterations,
                    "true" if r.succeeded else "false"])
    return buf.getvalue()


def ensemble_table(records, label_names) -> str:
    """Files by target labels grid of SNRs (empty cell: attack failed)."""
    grid = {}
    for r in records:
        grid.setdefault(r.file, {})[r.target_label] = r
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["file", *label_names])
    for name, row in grid.items():
        cells = []
        for label in label_names:
            r = row.get(label)
            cells.append(f"{r.snr_db:.1f}" if r is not None and r.succeeded else "")
        w.writerow([name, *cells])
    return buf.getvalue()
