"""Independent reference computations used as test oracles.

None of these call into the code under test beyond plain data accessors;
they recompute quantities from first principles or by brute force.
"""

from __future__ import annotations

import itertools
from fractions import Fraction

import numpy as np


def unet_enumeration(base_filters, encoder_blocks, input_shape):
    """Per-layer (kind, params, compute, activations) of the block-structured U-Net.

    Walks the block recipe directly: each block is affine, relu, affine,
    relu, then pool or upsample; decoder i < B opens with a concat of the
    encoder-i output and the decoder-(i+1) output.
    """
    channels, *spatial = input_shape
    vox = int(np.prod(spatial))
    rows = [("source", 0, 0, channels * vox)]
    width = [None] + [base_filters * 2 ** (b - 1) for b in range(1, encoder_blocks + 1)]

    def block(c_in, w, v):
        out = w * v
        return [
            ("affine", c_in * w, out * c_in, out),
            ("relu", 0, out, out),
            ("affine", w * w, out * w, out),
            ("relu", 0, out, out),
        ]

    c, v = channels, vox
    for b in range(1, encoder_blocks + 1):
        rows += block(c, width[b], v)
        v //= 8
        c = width[b]
        rows.append(("downsample2x", 0, c * v, c * v))
    for b in range(encoder_blocks, 0, -1):
        if b < encoder_blocks:
            c = width[b] + c  # skip from encoder b has width[b] channels at this resolution
            rows.append(("concat", 0, c * v, c * v))
        rows += block(c, width[b], v)
        c = width[b]
        v *= 8
        rows.append(("upsample2x", 0, c * v, c * v))
    rows.append(("sink", 0, 0, c * v))
    return rows


def unet_totals(base_filters, encoder_blocks, input_shape):
    rows = unet_enumeration(base_filters, encoder_blocks, input_shape)
    return (
        sum(r[2] for r in rows),
        sum(r[1] for r in rows),
        sum(r[3] for r in rows),
    )


def skip_spans(graph):
    """For every non-adjacent edge u -> v, the layers lying on some path strictly between u and v."""
    succ = {l.id: [] for l in graph.layers}
    for l in graph.layers:
        for u in l.inputs:
            succ[u].append(l.id)
    order = [l.id for l in graph.layers]
    spans = {}
    for pos, layer in enumerate(graph.layers):
        for u in layer.inputs:
            if pos > 0 and u == order[pos - 1]:
                continue
            between = set()
            # enumerate every path u -> ... -> v and collect interior nodes
            stack = [(u, (u,))]
            while stack:
                node, path = stack.pop()
                for nxt in succ[node]:
                    if nxt == layer.id:
                        if len(path) > 1:
                            between.update(path[1:])
                    elif nxt not in path:
                        stack.append((nxt, path + (nxt,)))
            spans[(u, layer.id)] = between
    return spans


def crossings_and_overhead(graph):
    """Pass-through crossings and element overhead implied by the skip spans.

    One cell per layer, except that the source shares the first cell and the
    sink shares the last, so those never count as separate crossings.
    """
    merged = {graph.layers[0].id}
    if graph.layers[-1].kind == "sink":
        merged.add(graph.layers[-1].id)
    crossings = overhead = 0
    for (u, _), between in skip_spans(graph).items():
        n = len(between - merged)
        crossings += n
        overhead += n * graph.layer(u).activation_elems
    return crossings, overhead


def brute_force_bottleneck(weights, k):
    """Minimum over every contiguous k-split, plus the lexicographically smallest argmin."""
    n = len(weights)
    best, best_cuts = None, None
    for cuts in itertools.combinations(range(1, n), k - 1):
        bounds = (0, *cuts, n)
        value = max(sum(Fraction(w) for w in weights[a:b]) for a, b in zip(bounds, bounds[1:]))
        if best is None or value < best:
            best, best_cuts = value, cuts
    return best, best_cuts


def fill_horizon(k, m):
    return k + m - 1


def fill_utilization(k, m):
    return Fraction(m, m + k - 1)


def positive_origins(labels, size):
    """All origins whose patch holds at least one foreground voxel, by direct scan."""
    out = []
    ranges = [range(n - s + 1) for n, s in zip(labels.shape, size)]
    for origin in itertools.product(*ranges):
        window = tuple(slice(o, o + s) for o, s in zip(origin, size))
        if labels[window].any():
            out.append(origin)
    return out


def exact_positive_fraction(labels, size):
    fractions = []
    for origin in positive_origins(labels, size):
        window = tuple(slice(o, o + s) for o, s in zip(origin, size))
        fractions.append(Fraction(int(labels[window].sum()), int(np.prod(size))))
    return sum(fractions) / len(fractions) if fractions else Fraction(0)


def finite_difference_single_affine(w, x, t, eps=1e-6):
    """Loss sum((W x - t)^2) over a (batch, c_in, *spatial) input, differentiated numerically."""

    def loss(wm):
        y = np.einsum("oc,bc...->bo...", wm, x)
        return float(np.sum((y - t) ** 2))

    g = np.zeros_like(w)
    for idx in np.ndindex(w.shape):
        wp, wm = w.copy(), w.copy()
        wp[idx] += eps
        wm[idx] -= eps
        g[idx] = (loss(wp) - loss(wm)) / (2 * eps)
    return g
