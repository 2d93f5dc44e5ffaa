"""Certified Lipschitz constants and generalization-bound evaluators.

Two routes to a certificate:

  * constrained-form networks carry their bound in the final layer, so the
    certificate is immediate;
  * dense ReLU networks get a branch-and-bound pass over the input box:
    interval propagation fixes each hidden unit's activation state where the
    box allows, the Jacobian is bounded over the remaining free states, and
    the box is split on its widest side until the bracket closes or the
    budget runs out. Upper bounds are sound throughout; tightness is
    best-effort and reported.

The bound evaluators at the bottom are pure formula evaluations for the
Rademacher-complexity and generalization bounds of the two architecture
families, plus the loss constants for the squared loss on a bounded output
box.
"""

from __future__ import annotations

import heapq
import itertools
import math
from dataclasses import dataclass

import numpy as np

from .autodiff import largest_singular_value
from .network import (
    DENSE_RELU,
    LINEAR_CLIPPED,
    LINEAR_FREE,
    SPECTRAL_DENSE,
    empirical_lipschitz_lower,
    forward,
    is_constrained_form,
    lipschitz_upper_bound,
)

__all__ = [
    "LipschitzCertificate",
    "bab_lipschitz",
    "certify_network",
    "erc_groupsort_bound",
    "erc_lcnn_bound",
    "generalization_bound",
    "erc_dense_comparison",
    "squared_loss_constants",
    "erc_bound_for_network",
]

# states a hidden unit can be in over a box
_OFF, _ON, _FREE = 0, 1, 2

# nets with at most this many free units get exact pattern enumeration;
# larger ones fall back to the interval-product norm bound
_ENUMERATION_CAP = 14

# sound inflation applied to iteratively computed singular values so the
# certificate side of an equality never drops below a sampled estimate
_SOUND_PAD = 1e-12


@dataclass
class LipschitzCertificate:
    upper: float
    lower: float
    method: str          # "final_layer", "bab", or "spectral_product"
    gap: float
    boxes_used: int
    tight: bool

    def __post_init__(self):
        if self.lower > self.upper + 1e-12:
            raise ValueError("certificate lower bound exceeds upper bound")


# -- interval propagation --------------------------------------------------------


def _affine_interval(w, b, lo, hi):
    wp = np.maximum(w, 0.0)
    wn = np.minimum(w, 0.0)
    new_lo = wp @ lo + wn @ hi
    new_hi = wp @ hi + wn @ lo
    if b is not None:
        new_lo = new_lo + b
        new_hi = new_hi + b
    return new_lo, new_hi


def _relu_states(layers, lo, hi):
    """Activation state per hidden unit over the box, plus post-box bounds."""
    states = []
    for layer in layers[:-1]:
        lo, hi = _affine_interval(layer.weight, layer.bias, lo, hi)
        s = np.full(lo.shape, _FREE, dtype=np.int8)
        s[lo >= 0] = _ON
        s[hi <= 0] = _OFF
        states.append(s)
        lo = np.maximum(lo, 0.0)
        hi = np.maximum(hi, 0.0)
    return states


def _pattern_jacobian(layers, masks):
    """Jacobian of the piecewise-linear map with the given on/off masks."""
    m = masks[0][:, None] * layers[0].weight
    for layer, mask in zip(layers[1:-1], masks[1:]):
        m = mask[:, None] * (layer.weight @ m)
    return layers[-1].weight @ m


def _sigma(mat, cache, key):
    if key not in cache:
        if not np.any(mat):
            cache[key] = 0.0
        else:
            cache[key] = largest_singular_value(mat, tol=1e-13, max_iter=20_000)
    return cache[key]


def _realized_masks(layers, x):
    """Activation masks at x, plus whether they hold on a neighborhood.

    A mask realized with every pre-activation strictly nonzero persists on an
    open ball around x, so its Jacobian's spectral norm genuinely lower-bounds
    the Lipschitz constant. A center sitting exactly on a kink (pre == 0)
    yields a mask valid only on a measure-zero slice; callers must not use it
    as evidence."""
    masks = []
    interior = True
    z = np.asarray(x, dtype=float)
    for layer in layers[:-1]:
        pre = layer.weight @ z
        if layer.bias is not None:
            pre = pre + layer.bias
        if np.any(pre == 0.0):
            interior = False
        masks.append((pre > 0).astype(float))
        z = np.maximum(pre, 0.0)
    return masks, interior


def _pattern_key(masks):
    return b"".join(np.asarray(m, dtype=np.int8).tobytes() for m in masks)


def _enumerate_upper(layers, states, cache):
    """Exact bound over the box's state superset: max singular value across
    every assignment of the free units (stable units stay fixed)."""
    free_slots = [
        (i, j) for i, s in enumerate(states) for j in np.nonzero(s == _FREE)[0]
    ]
    base = [np.asarray(s == _ON, dtype=float) for s in states]
    best = 0.0
    for combo in itertools.product((0.0, 1.0), repeat=len(free_slots)):
        masks = [b.copy() for b in base]
        for (i, j), bit in zip(free_slots, combo):
            masks[i][j] = bit
        key = _pattern_key(masks)
        if key in cache:
            sigma = cache[key]
        else:
            sigma = _sigma(_pattern_jacobian(layers, masks), cache, key)
        best = max(best, sigma)
    return best


def _interval_upper(layers, states):
    """Midpoint/radius product bound on the Jacobian over the box.

    Free units contribute the slope interval [0, 1]; the entrywise magnitude
    bound of the accumulated product is then bounded in spectral norm by the
    smaller of the Frobenius norm and the (1, inf) induced-norm bound.
    """
    mid = layers[0].weight.copy()
    rad = np.zeros_like(mid)
    for layer, s in zip(layers[1:], states):
        d_mid = np.where(s == _ON, 1.0, np.where(s == _OFF, 0.0, 0.5))
        d_rad = np.where(s == _FREE, 0.5, 0.0)
        mid_scaled = d_mid[:, None] * mid
        rad_scaled = (
            d_rad[:, None] * np.abs(mid)
            + d_mid[:, None] * rad
            + d_rad[:, None] * rad
        )
        mid = layer.weight @ mid_scaled
        rad = np.abs(layer.weight) @ rad_scaled
    mag = np.abs(mid) + rad
    fro = float(np.sqrt((mag * mag).sum()))
    one_inf = float(
        np.sqrt(np.abs(mag).sum(axis=0).max() * np.abs(mag).sum(axis=1).max())
    )
    return min(fro, one_inf)


def _box_upper(layers, lo, hi, cache):
    states = _relu_states(layers, lo, hi)
    n_free = int(sum(int((s == _FREE).sum()) for s in states))
    if n_free == 0:
        masks = [np.asarray(s == _ON, dtype=float) for s in states]
        j_mat = _pattern_jacobian(layers, masks)
        return _sigma(j_mat, cache, _pattern_key(masks)) + _SOUND_PAD
    if n_free <= _ENUMERATION_CAP:
        return _enumerate_upper(layers, states, cache)
    return _interval_upper(layers, states)


def _center_lower(layers, lo, hi, cache):
    x = (lo + hi) / 2.0
    masks, interior = _realized_masks(layers, x)
    if not interior:
        return 0.0
    return _sigma(_pattern_jacobian(layers, masks), cache, _pattern_key(masks))


# -- branch and bound ------------------------------------------------------------


def bab_lipschitz(net, lo, hi, eps=1e-9, budget=20_000):
    """Certified local Lipschitz constant of a dense ReLU network on a box.

    Splits the box best-first on the widest input side until the bracket
    between the soundly bounded maximum and the largest Jacobian realized at
    box centers closes to eps, or until `budget` box evaluations are spent.
    The upper bound is sound either way; `tight` records which case occurred.
    """
    kinds = {layer.kind for layer in net.layers}
    if not kinds <= {DENSE_RELU, LINEAR_FREE, LINEAR_CLIPPED}:
        raise ValueError("branch-and-bound applies to dense ReLU networks")
    if net.layers[-1].kind == DENSE_RELU:
        raise ValueError("final layer must be linear")
    linear_kinds = {LINEAR_FREE, LINEAR_CLIPPED}
    if any(l.kind in linear_kinds for l in net.layers[:-1]) and \
            DENSE_RELU in kinds:
        raise ValueError("hidden layers must all be ReLU (or the whole net linear)")
    lo = np.asarray(lo, dtype=float)
    hi = np.asarray(hi, dtype=float)
    if lo.shape != (net.in_dim,) or hi.shape != (net.in_dim,):
        raise ValueError("box bounds must match the network input dim")
    if np.any(hi < lo) or not (np.all(np.isfinite(lo)) and np.all(np.isfinite(hi))):
        raise ValueError("domain box must be bounded with lo <= hi")

    layers = list(net.layers)
    if DENSE_RELU not in kinds:
        # affine map: the Jacobian is one constant matrix product
        j_mat = layers[0].weight
        for layer in layers[1:]:
            j_mat = layer.weight @ j_mat
        sigma = largest_singular_value(j_mat, tol=1e-13, max_iter=20_000) \
            if np.any(j_mat) else 0.0
        return LipschitzCertificate(sigma, sigma, "bab", 0.0, 1, True)

    cache = {}
    used = 1
    ub0 = _box_upper(layers, lo, hi, cache)
    lb = _center_lower(layers, lo, hi, cache)
    heap = [(-ub0, 0, lo, hi)]
    counter = 1
    while heap and used < budget:
        neg_ub, _, blo, bhi = heapq.heappop(heap)
        box_ub = -neg_ub
        if box_ub <= lb + eps:
            heapq.heappush(heap, (neg_ub, counter, blo, bhi))
            counter += 1
            break
        axis = int(np.argmax(bhi - blo))
        mid = 0.5 * (blo[axis] + bhi[axis])
        for part_lo, part_hi in (
            (blo, np.concatenate([bhi[:axis], [mid], bhi[axis + 1:]])),
            (np.concatenate([blo[:axis], [mid], blo[axis + 1:]]), bhi),
        ):
            child_ub = min(box_ub, _box_upper(layers, part_lo, part_hi, cache))
            lb = max(lb, _center_lower(layers, part_lo, part_hi, cache))
            used += 1
            heapq.heappush(heap, (-child_ub, counter, part_lo, part_hi))
            counter += 1

    upper = max(lb, -heap[0][0]) if heap else lb
    gap = upper - lb
    return LipschitzCertificate(
        upper=upper,
        lower=lb,
        method="bab",
        gap=gap,
        boxes_used=used,
        tight=gap <= eps,
    )


def certify_network(net, lo=None, hi=None, eps=1e-9, budget=20_000,
                    n_samples=1000, seed=0):
    """Certificate for any supported network.

    Constrained-form networks use the final-layer bound (global, exact as an
    upper bound). Dense ReLU networks get branch-and-bound over the box.
    Anything else falls back to the product of layer spectral norms.
    """
    if is_constrained_form(net):
        upper = lipschitz_upper_bound(net)
        if lo is not None and hi is not None:
            lower = empirical_lipschitz_lower(net, lo, hi, n_samples, seed)
            lower = min(lower, upper)
        else:
            lower = 0.0
        return LipschitzCertificate(upper, lower, "final_layer",
                                    upper - lower, 0, True)
    kinds = {layer.kind for layer in net.layers}
    if kinds <= {DENSE_RELU, LINEAR_FREE, LINEAR_CLIPPED} and \
            net.layers[-1].kind != DENSE_RELU:
        if lo is None or hi is None:
            raise ValueError("dense certification needs a domain box")
        return bab_lipschitz(net, lo, hi, eps=eps, budget=budget)
    upper = lipschitz_upper_bound(net)
    lower = 0.0
    if lo is not None and hi is not None:
        lower = min(empirical_lipschitz_lower(net, lo, hi, n_samples, seed), upper)
    return LipschitzCertificate(upper, lower, "spectral_product",
                                upper - lower, 0, True)


# -- complexity and generalization bounds ----------------------------------------


def _check_positive(**kwargs):
    for name, value in kwargs.items():
        if not value > 0:
            raise ValueError(f"{name} must be positive")


def erc_groupsort_bound(input_bound, sample_size, layer_norms):
    """Complexity bound for sorting-activation networks with per-layer
    spectral norm caps: input_bound / sqrt(m) * 2^(d-1) * prod(norms)."""
    norms = [float(r) for r in layer_norms]
    _check_positive(input_bound=input_bound, sample_size=sample_size)
    if len(norms) < 1:
        raise ValueError("need at least one layer norm")
    for r in norms:
        _check_positive(layer_norm=r)
    d = len(norms)
    return input_bound / math.sqrt(sample_size) * 2.0 ** (d - 1) * math.prod(norms)


def erc_lcnn_bound(input_bound, sample_size, hidden_shapes):
    """Size-only complexity bound for unit-norm constrained networks:
    input_bound / sqrt(m) * 2^(d-1) * prod over hidden layers of min(rows, cols).

    hidden_shapes lists the (rows, cols) of every layer *before* the final
    one; depth d is len(hidden_shapes) + 1. Independent of the weights.
    """
    _check_positive(input_bound=input_bound, sample_size=sample_size)
    shapes = [(int(r), int(c)) for r, c in hidden_shapes]
    for r, c in shapes:
        _check_positive(rows=r, cols=c)
    d = len(shapes) + 1
    prod = math.prod(min(r, c) for r, c in shapes)
    return input_bound / math.sqrt(sample_size) * 2.0 ** (d - 1) * prod


def generalization_bound(empirical_error, input_bound, sample_size,
                         hidden_shapes, output_dim, loss_lipschitz,
                         loss_sup, confidence):
    """Empirical error plus the vector-valued complexity term plus the
    concentration term at confidence level 1 - `confidence`."""
    _check_positive(input_bound=input_bound, sample_size=sample_size,
                    output_dim=output_dim, loss_lipschitz=loss_lipschitz,
                    loss_sup=loss_sup)
    if empirical_error < 0:
        raise ValueError("empirical_error must be nonnegative")
    if not 0 < confidence <= 1:
        raise ValueError("confidence must lie in (0, 1]")
    shapes = [(int(r), int(c)) for r, c in hidden_shapes]
    d = len(shapes) + 1
    prod = math.prod(min(r, c) for r, c in shapes)
    erc_term = (
        math.sqrt(2.0) * output_dim * loss_lipschitz
        * input_bound / math.sqrt(sample_size) * 2.0 ** d * prod
    )
    conf_term = 3.0 * loss_sup * math.sqrt(
        math.log(1.0 / confidence) / (2.0 * sample_size)
    )
    return empirical_error + erc_term + conf_term


def erc_dense_comparison(input_bound, sample_size, layer_norms):
    """Comparison complexity bound for unconstrained ReLU networks with
    per-layer Frobenius caps: input_bound * sqrt(2 log(2) d) * prod / sqrt(m)."""
    norms = [float(r) for r in layer_norms]
    _check_positive(input_bound=input_bound, sample_size=sample_size)
    if len(norms) < 1:
        raise ValueError("need at least one layer norm")
    for r in norms:
        _check_positive(layer_norm=r)
    d = len(norms)
    return (
        input_bound * math.sqrt(2.0 * math.log(2.0) * d)
        * math.prod(norms) / math.sqrt(sample_size)
    )


def squared_loss_constants(output_bound):
    """(Lipschitz constant, sup) of the squared distance loss when both the
    prediction and the label stay inside the centered output ball."""
    _check_positive(output_bound=output_bound)
    return 4.0 * output_bound, 4.0 * output_bound ** 2


def erc_bound_for_network(net, sample_size, input_bound=1.0):
    """Complexity bound matched to the network family: size-only for the
    constrained form, Frobenius-based comparison bound otherwise."""
    from .autodiff import frobenius_norm
    if is_constrained_form(net):
        shapes = [layer.weight.shape for layer in net.layers[:-1]]
        return erc_lcnn_bound(input_bound, sample_size, shapes)
    norms = [frobenius_norm(layer.weight) for layer in net.layers]
    return erc_dense_comparison(input_bound, sample_size, norms)
