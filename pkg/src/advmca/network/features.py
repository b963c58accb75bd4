"""Texture-window aggregation of hidden activations."""
import csv
import io

import numpy as np

from ..spectral import SAMPLE_RATE
from .model import Dense, NetworkError, hidden_activations

TEXTURE_SECONDS = 5.0


def texture_frames(hop=512, sample_rate=SAMPLE_RATE, seconds=TEXTURE_SECONDS):
    """Window and hop, in frames, of a texture window hopped by 50%."""
    window = int(seconds * sample_rate / hop)
    return window, window // 2


def window_starts(n_frames, window, hop):
    if n_frames < window:
        return []
    return list(range(0, n_frames - window + 1, hop))


def texture_stats(values, window, hop, moment="std"):
    """Mean and spread of ``values`` (frames x dims) over each texture window.

    ``moment`` is ``"std"`` or ``"var"`` (population statistics).
    """
    starts = window_starts(values.shape[0], window, hop)
    if not starts:
        raise NetworkError(f"{values.shape[0]} frames is shorter than one window of {window}")
    out = []
    for s in starts:
        block = values[s:s + window]
        spread = block.std(axis=0) if moment == "std" else block.var(axis=0)
        out.append(np.concatenate([block.mean(axis=0), spread]))
    return np.array(out)


def aggregate_activations(params, X, window=None, hop=None):
    """Per texture window, mean then std of the concatenated hidden activations."""
    if params.spec.kind != "dnn" or params.spec.frames_per_element != 1:
        raise NetworkError("activation aggregation needs a frame-wise DNN")
    if not all(isinstance(layer, Dense) for layer in params.spec.hidden):
        raise NetworkError("activation aggregation needs dense hidden layers")
    if window is None:
        window, default_hop = texture_frames()
        hop = default_hop if hop is None else hop
    elif hop is None:
        hop = window // 2
    acts = np.concatenate(hidden_activations(params, X), axis=1)
    return texture_stats(acts, window, hop)


def features_text(rows) -> str:
    """``rows``: iterable of ``(file, feature_matrix)``; one line per window."""
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    for name, feats in rows:
        for i, vec in enumerate(np.atleast_2d(feats)):
            w.writerow([name, i, *(repr(float(v)) for v in vec)])
    return buf.getvalue()
