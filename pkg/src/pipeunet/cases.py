"""Seeded random small U-Nets with live gradients, for equivalence and finite-difference checks."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .executor import LossSpec, Params, backward_serial, init_params, random_batch, relu_margin
from .ir import ModelGraph, UNetConfig, build_unet


@dataclass
class RandomCase:
    config: UNetConfig
    graph: ModelGraph
    params: Params
    x: np.ndarray
    loss: LossSpec
    seed: int


def _live(graph: ModelGraph, params: Params, x: np.ndarray, loss: LossSpec, min_margin: float) -> bool:
    if min_margin > 0 and relu_margin(graph, x, params) < min_margin:
        return False
    grads = backward_serial(graph, x, loss, params)
    return all(np.any(g != 0) for g in grads.grads.values())


def random_unet_case(
    seed: int,
    batch: int | None = None,
    min_margin: float = 0.0,
    max_tries: int = 200,
) -> RandomCase:
    """Draw a 2- or 3-block U-Net and data from ``seed``.

    Bias-free narrow nets easily end up with whole channels stuck below
    zero; draws whose weight gradients contain an all-zero tensor (or whose
    relu inputs come closer than ``min_margin`` to a kink) are redrawn from
    the same generator, so the result is still a pure function of ``seed``.
    """
    rng = np.random.default_rng(seed)
    for _ in range(max_tries):
        blocks = int(rng.integers(2, 4))
        cfg = UNetConfig(
            base_filters=int(rng.integers(3, 5)),
            encoder_blocks=blocks,
            input_shape=(
                int(rng.integers(1, 3)),
                *(2**blocks * int(rng.integers(1, 3)) for _ in range(3)),
            ),
        )
        graph = build_unet(cfg)
        n = batch if batch is not None else int(rng.choice([1, 2, 4, 6, 8]))
        sub = int(rng.integers(2**31))
        params = init_params(graph, sub)
        x, loss = random_batch(graph, n, sub + 1)
        if _live(graph, params, x, loss, min_margin):
            return RandomCase(cfg, graph, params, x, loss, seed)
    raise RuntimeError(f"no live model found for seed {seed} in {max_tries} draws")
