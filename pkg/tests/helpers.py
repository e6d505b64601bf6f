"""Shared fixtures for model gradient checks and small synthetic runs."""
from __future__ import annotations

import numpy as np

from gliofuse import tensor as T
from gliofuse.models import EncoderSpec, FusionModel, HeadConfig, cox_objective

# strategy -> (input dims, encoder specs or None for identity)
GRAD_CASES = {
    "unimodal_mlp_encoder": ("unimodal", {"a": 5}, {"a": EncoderSpec(5, (4,), 3, dropout=0.2)}),
    "early": ("early", {"a": 4, "b": 3}, None),
    "bilinear": ("bilinear", {"a": 4, "b": 3}, None),
    "cross_attention": ("cross_attention", {"a": 4, "b": 6}, None),
    "gated": ("gated", {"a": 4, "b": 4}, None),
    "joint": ("joint", {"a": 5, "b": 4, "c": 3},
              {"a": EncoderSpec(5, (4,), 3, dropout=0.3), "b": EncoderSpec(4, (), 3, dropout=0.3),
               "c": EncoderSpec(3, (3,), 2, dropout=0.3)}),
}

SMALL_HEAD = HeadConfig(hidden=6, dropout=0.3, attention_dim=5, attention_dropout=0.25, tokens=2)


def model_grad_error(case: str, seed: int, n: int = 12) -> float:
    """Largest relative gradient error of the Cox objective through a whole model.

    Dropout is active with a fixed mask seed so the check covers it too.
    """
    strategy, dims, encoders = GRAD_CASES[case]
    head = SMALL_HEAD if strategy == "cross_attention" else HeadConfig(
        hidden=6, dropout=0.3, attention_dim=5, attention_dropout=0.25)
    model = FusionModel.build(strategy, dims, encoders, head=head, seed=seed)
    rng = np.random.default_rng(1000 + seed)
    inputs = {m: rng.normal(size=(n, d)) for m, d in dims.items()}
    time = rng.exponential(5.0, n) + 0.1
    event = rng.random(n) < 0.7
    event[0] = True
    # nudge parameters off zero so ReLU and the zero-started linear head are exercised
    for node in model.params.values():
        node.value = node.value + rng.normal(scale=0.3, size=node.value.shape)

    def loss_fn(_params):
        return cox_objective(model.forward(inputs, train=True, seed=seed), time, event)

    return T.grad_check(loss_fn, model.params, eps=1e-6)
