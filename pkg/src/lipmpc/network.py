"""Feedforward networks with norm-constrained layers.

Two families live here. "spectral_dense" layers carry a spectral-norm-1
weight and the pairwise-sorting activation, so a stack of them is
1-Lipschitz and the network's Lipschitz constant is bounded by the largest
singular value of the final linear map alone. "dense_relu" layers are the
unconstrained baseline. The lattice construction at the bottom combines two
constrained scalar networks into one computing their pointwise max (or min)
up to an explicit positive factor, without leaving the constrained class.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np

from .autodiff import Tensor, _last_iterate, jacobian, largest_singular_value
from .io_utils import atomic_write_text

__all__ = [
    "Layer",
    "Network",
    "SPECTRAL_DENSE",
    "DENSE_RELU",
    "LINEAR_CLIPPED",
    "LINEAR_FREE",
    "group_sort",
    "forward",
    "forward_taped",
    "init_network",
    "project_spectral",
    "lipschitz_upper_bound",
    "empirical_lipschitz_lower",
    "lattice_max",
    "lattice_min",
    "save_network",
    "load_network",
]

SPECTRAL_DENSE = "spectral_dense"
DENSE_RELU = "dense_relu"
LINEAR_CLIPPED = "linear_clipped"
LINEAR_FREE = "linear_free"
_KINDS = (SPECTRAL_DENSE, DENSE_RELU, LINEAR_CLIPPED, LINEAR_FREE)

MODEL_FORMAT = "lipmpc-network"
MODEL_VERSION = 1


@dataclass
class Layer:
    """One affine map plus its activation, selected by `kind`."""

    kind: str
    weight: np.ndarray
    bias: np.ndarray | None = None

    def __post_init__(self):
        if self.kind not in _KINDS:
            raise ValueError(f"unknown layer kind {self.kind!r}")
        self.weight = np.asarray(self.weight, dtype=float)
        if self.weight.ndim != 2:
            raise ValueError("layer weight must be 2-D (out_dim x in_dim)")
        if self.bias is not None:
            self.bias = np.asarray(self.bias, dtype=float)
            if self.bias.shape != (self.weight.shape[0],):
                raise ValueError("bias length must equal the layer's out_dim")

    @property
    def out_dim(self):
        return self.weight.shape[0]

    @property
    def in_dim(self):
        return self.weight.shape[1]


@dataclass
class Network:
    layers: list[Layer] = field(default_factory=list)

    def __post_init__(self):
        if not self.layers:
            raise ValueError("network needs at least one layer")
        for prev, nxt in zip(self.layers, self.layers[1:]):
            if prev.out_dim != nxt.in_dim:
                raise ValueError(
                    f"layer dims do not chain: {prev.out_dim} -> {nxt.in_dim}"
                )

    @property
    def in_dim(self):
        return self.layers[0].in_dim

    @property
    def out_dim(self):
        return self.layers[-1].out_dim

    def copy(self):
        return Network(
            [
                Layer(l.kind, l.weight.copy(), None if l.bias is None else l.bias.copy())
                for l in self.layers
            ]
        )


def is_constrained_form(net):
    """True when every layer before the last is spectral_dense and the last
    is a plain linear map, i.e. the final-layer Lipschitz argument applies."""
    *hidden, last = net.layers
    return all(l.kind == SPECTRAL_DENSE for l in hidden) and last.kind in (
        LINEAR_CLIPPED,
        LINEAR_FREE,
    )


# -- activations ---------------------------------------------------------------


def group_sort(z):
    """Sort disjoint adjacent pairs of the last axis descending; an odd
    trailing entry passes through. A permutation of its input, hence
    norm-preserving and 1-Lipschitz."""
    z = np.asarray(z, dtype=float)
    m = z.shape[-1]
    k = m // 2
    out = z.copy()
    x = z[..., 0 : 2 * k : 2]
    y = z[..., 1 : 2 * k : 2]
    out[..., 0 : 2 * k : 2] = np.where(x >= y, x, y)
    out[..., 1 : 2 * k : 2] = np.where(x <= y, x, y)
    return out


def _activate(kind, pre):
    if kind == SPECTRAL_DENSE:
        return group_sort(pre)
    if kind == DENSE_RELU:
        return np.where(pre > 0, pre, 0.0)
    return pre


# -- evaluation ----------------------------------------------------------------


def forward(net, x):
    """Evaluate on a single input (n,) or a batch (m, n)."""
    z = np.asarray(x, dtype=float)
    batched = z.ndim == 2
    if z.shape[-1] != net.in_dim:
        raise ValueError(f"input dim {z.shape[-1]} != network in_dim {net.in_dim}")
    for layer in net.layers:
        pre = z @ layer.weight.T if batched else layer.weight @ z
        if layer.bias is not None:
            pre = pre + layer.bias
        z = _activate(layer.kind, pre)
    return z


def forward_taped(layers, x):
    """Tape-graph twin of `forward`.

    `layers` is a list of (kind, weight Tensor, bias Tensor or None); `x` is a
    Tensor, single input or batch. Used by training and Jacobian evaluation.
    """
    z = x
    batched = z.data.ndim == 2
    for kind, w, b in layers:
        pre = (z @ w.T) if batched else (w @ z)
        if b is not None:
            pre = pre + b
        if kind == SPECTRAL_DENSE:
            z = pre.group_sort()
        elif kind == DENSE_RELU:
            z = pre.relu()
        else:
            z = pre
    return z


def taped_layers(net, requires_grad=False):
    return [
        (
            l.kind,
            Tensor(l.weight, requires_grad=requires_grad),
            None if l.bias is None else Tensor(l.bias, requires_grad=requires_grad),
        )
        for l in net.layers
    ]


# -- construction and projection ------------------------------------------------


def init_network(in_dim, hidden_dims, out_dim, kind, seed, final_bias=True):
    """Random network, entries uniform in +-1/sqrt(fan_in), biases zero,
    then projected onto the constraint set (a no-op for the dense kind).

    kind: "lcnn" for spectral_dense hidden + clipped final,
          "dense" for relu hidden + free final.
    """
    if kind not in ("lcnn", "dense"):
        raise ValueError(f"unknown network kind {kind!r}")
    rng = np.random.default_rng(seed)
    hidden_kind = SPECTRAL_DENSE if kind == "lcnn" else DENSE_RELU
    final_kind = LINEAR_CLIPPED if kind == "lcnn" else LINEAR_FREE
    dims = [in_dim, *hidden_dims, out_dim]
    layers = []
    for i, (n, m) in enumerate(zip(dims[:-1], dims[1:])):
        scale = 1.0 / np.sqrt(n)
        w = rng.uniform(-scale, scale, size=(m, n))
        last = i == len(dims) - 2
        bias = np.zeros(m) if (not last or final_bias) else None
        layers.append(Layer(final_kind if last else hidden_kind, w, bias))
    net = Network(layers)
    return project_spectral(net) if kind == "lcnn" else net


def project_spectral(net, c_max=1.0, tol=1e-12):
    """Project onto the constraint set: spectral_dense weights are rescaled
    to unit spectral norm, linear_clipped entries are clamped to +-c_max,
    everything else passes through. Idempotent up to the norm tolerance."""
    out = []
    for layer in net.layers:
        w, b = layer.weight, layer.bias
        if layer.kind == SPECTRAL_DENSE:
            w = w / largest_singular_value(w, tol=tol, max_iter=10_000)
        elif layer.kind == LINEAR_CLIPPED:
            w = np.clip(w, -c_max, c_max)
        out.append(Layer(layer.kind, w.copy(), None if b is None else b.copy()))
    return Network(out)


# -- Lipschitz bookkeeping -------------------------------------------------------


def lipschitz_upper_bound(net, tol=1e-12):
    """Certified Lipschitz upper bound (l2).

    Constrained-form networks: the activations are 1-Lipschitz and every
    hidden weight has unit spectral norm, so the final weight's largest
    singular value bounds the whole map. Anything else: product of the
    layer spectral norms (activations still 1-Lipschitz).
    """
    if is_constrained_form(net):
        return largest_singular_value(net.layers[-1].weight, tol=tol, max_iter=10_000)
    prod = 1.0
    for layer in net.layers:
        prod *= largest_singular_value(layer.weight, tol=tol, max_iter=10_000)
    return prod


def empirical_lipschitz_lower(net, lo, hi, n_samples=1000, seed=0):
    """Max spectral norm of the network Jacobian over sampled points of the
    box [lo, hi]. A lower bound on the true Lipschitz constant; pairs with
    lipschitz_upper_bound to bracket it."""
    lo = np.asarray(lo, dtype=float)
    hi = np.asarray(hi, dtype=float)
    if lo.shape != (net.in_dim,) or hi.shape != (net.in_dim,):
        raise ValueError("box bounds must match the network input dim")
    if np.any(hi < lo):
        raise ValueError("empty box")
    rng = np.random.default_rng(seed)
    layers = taped_layers(net)
    best = 0.0
    for _ in range(int(n_samples)):
        x = rng.uniform(lo, hi)
        jac = jacobian(lambda t: forward_taped(layers, t), x)
        if np.any(jac):
            best = max(best, _last_iterate(jac, tol=1e-11, max_iter=2000))
    return best


# -- lattice construction ---------------------------------------------------------


def _check_lattice_operand(net, name):
    if net.out_dim != 1:
        raise ValueError(f"{name} must have scalar output")
    if not is_constrained_form(net):
        raise ValueError(f"{name} must be in constrained form")
    for i, layer in enumerate(net.layers):
        if abs(largest_singular_value(layer.weight, tol=1e-12, max_iter=10_000) - 1.0) > 1e-8:
            raise ValueError(
                f"{name} layer {i} must have unit spectral norm (project first)"
            )


def _interval_bounds(net, lo, hi, upto):
    """Elementwise pre-activation interval of layer `upto` over the box,
    by interval propagation through the earlier layers."""
    lo = np.asarray(lo, dtype=float)
    hi = np.asarray(hi, dtype=float)
    for i, layer in enumerate(net.layers[: upto + 1]):
        mid = (lo + hi) / 2.0
        rad = (hi - lo) / 2.0
        c = layer.weight @ mid
        r = np.abs(layer.weight) @ rad
        if layer.bias is not None:
            c = c + layer.bias
        lo, hi = c - r, c + r
        if i < upto:
            if layer.kind == SPECTRAL_DENSE:
                lo, hi = group_sort(lo), group_sort(hi)  # monotone pairwise max/min
            elif layer.kind == DENSE_RELU:
                lo, hi = np.maximum(lo, 0.0), np.maximum(hi, 0.0)
    return lo, hi


def _pad_odd_rows(net, domain_lo, domain_hi):
    """Give every hidden layer an even row count.

    An odd hidden layer gets one extra zero row whose bias is a large
    negative constant, so the appended unit always loses its pairwise sort
    and never disturbs the original coordinates; the next weight matrix gets
    a matching zero column. The constant is 10x an interval bound on that
    layer's pre-activations over the domain box.
    """
    layers = [
        Layer(l.kind, l.weight.copy(), None if l.bias is None else l.bias.copy())
        for l in net.layers
    ]
    i = 0
    while i < len(layers) - 1:
        layer = layers[i]
        if layer.out_dim % 2 == 1:
            lo_i, hi_i = _interval_bounds(Network(layers), domain_lo, domain_hi, i)
            m = 10.0 * max(1.0, float(np.max(np.abs(lo_i))), float(np.max(np.abs(hi_i))))
            w = np.vstack([layer.weight, np.zeros((1, layer.in_dim))])
            b = np.zeros(layer.out_dim) if layer.bias is None else layer.bias
            b = np.concatenate([b, [-m]])
            layers[i] = Layer(layer.kind, w, b)
            nxt = layers[i + 1]
            w2 = np.hstack([nxt.weight, np.zeros((nxt.out_dim, 1))])
            layers[i + 1] = Layer(nxt.kind, w2, nxt.bias)
        i += 1
    return Network(layers)


def _lift_affine(net):
    """Rewrite a hidden-layer-free scalar network as an equivalent one with a
    single two-unit hidden layer. Both new weights keep unit spectral norm.

    The trick: duplicating the row w with a 1/sqrt(2) factor feeds the sort a
    tied pair (a fixed point), and the final [1/sqrt(2), 1/sqrt(2)] row sums
    the halves back together.
    """
    (last,) = net.layers
    s = 1.0 / np.sqrt(2.0)
    w1 = s * np.vstack([last.weight, last.weight])
    beta = 0.0 if last.bias is None else float(last.bias[0])
    b1 = s * np.array([beta, beta])
    final = Layer(last.kind, np.array([[s, s]]), None)
    return Network([Layer(SPECTRAL_DENSE, w1, b1), final])


def _pad_depth(net, target_depth):
    """Insert identity spectral_dense layers just before the final map. The
    pairwise sort is idempotent, so re-sorting an already-sorted vector is a
    no-op and the function is unchanged."""
    layers = list(net.layers)
    while len(layers) < target_depth:
        k = layers[-2].out_dim
        layers.insert(-1, Layer(SPECTRAL_DENSE, np.eye(k), np.zeros(k)))
    return Network(layers)


def _block_diag(a, b):
    out = np.zeros((a.shape[0] + b.shape[0], a.shape[1] + b.shape[1]))
    out[: a.shape[0], : a.shape[1]] = a
    out[a.shape[0] :, a.shape[1] :] = b
    return out


def _cat_bias(la, lb, scale):
    ba = np.zeros(la.out_dim) if la.bias is None else la.bias
    bb = np.zeros(lb.out_dim) if lb.bias is None else lb.bias
    return scale * np.concatenate([ba, bb])


def _lattice(f, g, domain_lo, domain_hi, select_row):
    if f.in_dim != g.in_dim:
        raise ValueError("operands must share an input dimension")
    _check_lattice_operand(f, "f")
    _check_lattice_operand(g, "g")
    f = _lift_affine(f) if len(f.layers) == 1 else f
    g = _lift_affine(g) if len(g.layers) == 1 else g
    f = _pad_odd_rows(f, domain_lo, domain_hi)
    g = _pad_odd_rows(g, domain_lo, domain_hi)
    depth = max(len(f.layers), len(g.layers))
    f = _pad_depth(f, depth)
    g = _pad_depth(g, depth)

    # first layer: stack and renormalize; the shared factor c propagates
    # through the positively-homogeneous sorts and is divided out by callers
    w1 = np.vstack([f.layers[0].weight, g.layers[0].weight])
    c = 1.0 / largest_singular_value(w1, tol=1e-14, max_iter=10_000)
    layers = [Layer(SPECTRAL_DENSE, c * w1, _cat_bias(f.layers[0], g.layers[0], c))]
    # middle layers: block-diagonal, biases carry the same factor
    for lf, lg in zip(f.layers[1:-1], g.layers[1:-1]):
        layers.append(
            Layer(SPECTRAL_DENSE, _block_diag(lf.weight, lg.weight), _cat_bias(lf, lg, c))
        )
    # former output rows become one sorting pair: [c*max, c*min]
    lf, lg = f.layers[-1], g.layers[-1]
    layers.append(
        Layer(SPECTRAL_DENSE, _block_diag(lf.weight, lg.weight), _cat_bias(lf, lg, c))
    )
    layers.append(Layer(LINEAR_FREE, np.array([select_row], dtype=float), None))
    return Network(layers), c


def lattice_max(f, g, domain_lo, domain_hi):
    """Combine two scalar constrained networks into one whose output is
    c * max(f(x), g(x)) with the returned c in [1/sqrt(2), 1]. The result
    stays in the constrained class: every hidden weight has unit spectral
    norm and the final row is a unit selector."""
    return _lattice(f, g, domain_lo, domain_hi, [1.0, 0.0])


def lattice_min(f, g, domain_lo, domain_hi):
    """As lattice_max, but the selector picks the smaller of the pair."""
    return _lattice(f, g, domain_lo, domain_hi, [0.0, 1.0])


# -- persistence -------------------------------------------------------------------


def save_network(net, path):
    """Write a self-describing JSON snapshot; floats round-trip bit-exactly."""
    doc = {
        "format": MODEL_FORMAT,
        "version": MODEL_VERSION,
        "layers": [
            {
                "kind": l.kind,
                "weight": l.weight.tolist(),
                "bias": None if l.bias is None else l.bias.tolist(),
            }
            for l in net.layers
        ],
    }
    atomic_write_text(path, json.dumps(doc) + "\n")


def load_network(path):
    with open(path) as fh:
        doc = json.load(fh)
    if doc.get("format") != MODEL_FORMAT:
        raise ValueError(f"not a {MODEL_FORMAT} file: {path}")
    if doc.get("version") != MODEL_VERSION:
        raise ValueError(f"unsupported model version {doc.get('version')!r}")
    return Network(
        [
            Layer(
                entry["kind"],
                np.array(entry["weight"], dtype=float),
                None if entry["bias"] is None else np.array(entry["bias"], dtype=float),
            )
            for entry in doc["layers"]
        ]
    )
