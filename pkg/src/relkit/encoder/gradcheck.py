"""Central finite-difference check of encoder gradients.

Every parameter element is perturbed by +/- ``step``. A perturbation inside
block ``i`` only needs the network from block ``i`` onwards, so the
unperturbed inputs of each stage are cached and reused.
"""
from __future__ import annotations

from typing import Callable

import numpy as np

from .model import EncoderModel

HeadFn = Callable[[np.ndarray], tuple]


def _stage_of(name: str, n_layers: int) -> int:
    if name in ("tok_emb", "pos_emb"):
        return -1
    if name.startswith("blocks."):
        return int(name.split(".")[1])
    return n_layers


def relative_error(analytic: np.ndarray, numeric: np.ndarray) -> np.ndarray:
    return np.abs(analytic - numeric) / (np.abs(analytic) + np.abs(numeric) + 1e-8)


def check_gradients(model: EncoderModel, ids, pad_mask, head: HeadFn, step: float = 1e-5,
                    params: list[str] | None = None) -> dict[str, float]:
    """Max relative error between backprop and central differences, per tensor.

    ``head`` maps final hidden states to ``(loss, d_loss/d_hidden)``. Run this
    on a wide-precision model (``model.astype(np.longdouble)``); in float32 the
    differences are dominated by rounding.
    """
    ids = np.asarray(ids)
    pad_mask = np.asarray(pad_mask, dtype=bool)
    hidden = model.forward(ids, pad_mask, record=True)
    _, d_hidden = head(hidden)
    analytic = model.backward(d_hidden)

    L = model.config.n_layers
    stage_inputs = [model.embed_tokens(ids)]
    for i in range(L):
        stage_inputs.append(model.block(i, stage_inputs[-1], pad_mask)[0])

    def loss_from(stage: int):
        x = model.embed_tokens(ids) if stage < 0 else stage_inputs[stage]
        for i in range(max(stage, 0), L):
            x = model.block(i, x, pad_mask)[0]
        return head(model.final_norm(x)[0])[0]

    h = model.dtype.type(step)
    report = {}
    for name in params or list(model.params):
        stage = _stage_of(name, L)
        flat = model.params[name].reshape(-1)
        numeric = np.zeros_like(flat)
        for j in range(flat.size):
            orig = flat[j]
            flat[j] = orig + h
            up = loss_from(stage)
            flat[j] = orig - h
            down = loss_from(stage)
            flat[j] = orig
            numeric[j] = (up - down) / (2 * h)
        report[name] = float(relative_error(analytic[name].reshape(-1), numeric).max())
    return report
