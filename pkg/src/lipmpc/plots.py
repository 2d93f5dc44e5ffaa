"""Report figures for traces, training curves, and paired model tables.

Every writer renders to an in-memory SVG and lands it atomically, with the
hash salt and date metadata pinned so identical inputs give identical bytes.
"""

import io

import matplotlib

matplotlib.use("Agg")
matplotlib.rcParams["svg.hashsalt"] = "lipmpc"

import matplotlib.pyplot as plt  # noqa: E402  (backend must be set first)
import numpy as np  # noqa: E402

from .io_utils import atomic_write_text  # noqa: E402

__all__ = [
    "plot_closed_loop",
    "plot_history",
    "plot_paired_bars",
]


def _save(fig, path):
    buf = io.StringIO()
    fig.savefig(buf, format="svg", metadata={"Date": None})
    plt.close(fig)
    atomic_write_text(path, buf.getvalue())


def plot_closed_loop(trace, lyap, bounds, path):
    """Four panels: deviation states, certificate value, and both inputs."""
    fig, axes = plt.subplots(2, 2, figsize=(10, 7), constrained_layout=True)

    ax = axes[0, 0]
    ax.plot(trace.times, trace.states[:, 0], label="concentration dev")
    ax.plot(trace.times, trace.states[:, 1], label="temperature dev")
    ax.axhline(0.0, color="k", lw=0.6)
    ax.set_xlabel("time [h]")
    ax.set_ylabel("state deviation")
    ax.legend(loc="best")
    ax.set_title("closed-loop states")

    ax = axes[0, 1]
    # strictly positive floor keeps the log axis defined at the origin
    ax.semilogy(trace.times, np.maximum(trace.lyapunov, 1e-12))
    ax.axhline(lyap.level, color="r", ls="--", lw=0.8, label="operating level")
    ax.axhline(lyap.inner_level, color="g", ls="--", lw=0.8,
               label="terminal level")
    ax.set_xlabel("time [h]")
    ax.set_ylabel("V(x)")
    ax.legend(loc="best")
    ax.set_title("certificate value")

    t_u = trace.times[:-1]
    for col, (ax, name, limit) in enumerate(zip(
        (axes[1, 0], axes[1, 1]),
        ("feed concentration dev", "heat rate"),
        (bounds.feed_delta_max, bounds.heat_max),
    )):
        ax.step(t_u, trace.inputs[:, col], where="post")
        ax.axhline(limit, color="r", ls=":", lw=0.8)
        ax.axhline(-limit, color="r", ls=":", lw=0.8)
        ax.set_xlabel("time [h]")
        ax.set_ylabel(name)
        ax.set_title(f"input {col + 1}")

    _save(fig, path)


def plot_history(history, path):
    """Training and validation MSE per epoch on a log axis."""
    hist = np.asarray(history, dtype=float)
    fig, ax = plt.subplots(figsize=(7, 4.5), constrained_layout=True)
    if hist.size:
        ax.semilogy(hist[:, 0], hist[:, 1], label="train")
        ax.semilogy(hist[:, 0], hist[:, 2], label="validation")
        ax.legend(loc="best")
    ax.set_xlabel("epoch")
    ax.set_ylabel("MSE (scaled)")
    ax.set_title("training history")
    _save(fig, path)


def plot_paired_bars(rows, path, ylabel, title):
    """Grouped log-scale bars comparing the constrained and dense model per
    row; `rows` holds (label, constrained_value, dense_value)."""
    labels = [r[0] for r in rows]
    a = np.asarray([r[1] for r in rows], dtype=float)
    b = np.asarray([r[2] for r in rows], dtype=float)
    pos = np.arange(len(rows), dtype=float)
    width = 0.38
    fig, ax = plt.subplots(figsize=(1.8 * len(rows) + 3, 4.5),
                           constrained_layout=True)
    ax.bar(pos - width / 2, a, width, label="LCNN")
    ax.bar(pos + width / 2, b, width, label="dense")
    ax.set_yscale("log")
    ax.set_xticks(pos)
    ax.set_xticklabels(labels, rotation=20, ha="right")
    ax.set_ylabel(ylabel)
    ax.set_title(title)
    ax.legend(loc="best")
    _save(fig, path)
