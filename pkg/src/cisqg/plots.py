"""PNG figures written next to the .dat files of `cisqg report`."""
from __future__ import annotations

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

_SAVE = {"dpi": 120, "metadata": {"Software": None}}


def _finish(fig, ax, path):
    ax.grid(True, alpha=0.3)
    fig.tight_layout()
    fig.savefig(path, **_SAVE)
    plt.close(fig)


def residual_plot(rows, path):
    """Measured residual norm with its interval against the target r_n."""
    fig, ax = plt.subplots(figsize=(5, 3.5))
    if rows:
        a = np.array(rows, dtype=float)
        ax.semilogy(a[:, 0], a[:, 1], "k--o", label="target $r_n$")
        err = np.vstack([a[:, 2] - a[:, 3], a[:, 4] - a[:, 2]])
        ax.errorbar(a[:, 0], a[:, 2], yerr=np.clip(err, 0, None), fmt="s-", capsize=3, label="measured")
        ax.set_xticks(a[:, 0])
        ax.legend()
    ax.set_xlabel("level n")
    ax.set_ylabel("residual norm")
    _finish(fig, ax, path)


def error_stack_plot(rows, keys, path):
    fig, ax = plt.subplots(figsize=(5, 3.5))
    a = np.array(rows, dtype=float)
    x = np.arange(len(a))
    bottom = np.zeros(len(a))
    for i, k in enumerate(keys):
        ax.bar(x, a[:, i + 1], bottom=bottom, label=k)
        bottom += a[:, i + 1]
    ax.set_xticks(x, [str(int(n)) for n in a[:, 0]])
    ax.set_yscale("log")
    ax.set_xlabel("level n")
    ax.set_ylabel("error term")
    ax.legend(fontsize=7)
    _finish(fig, ax, path)


def linearity_plot(rows, coeffs, path):
    fig, ax = plt.subplots(figsize=(5, 3.5))
    a = np.array(rows, dtype=float)
    err = np.vstack([a[:, 2] - a[:, 3], a[:, 4] - a[:, 2]])
    ax.errorbar(a[:, 1], a[:, 2], yerr=np.clip(err, 0, None), fmt="o", capsize=3, label="MC estimate")
    xs = np.linspace(0, a[:, 1].max() * 1.05, 100)
    c0, c1, c2 = coeffs
    ax.plot(xs, c0 + c1 * xs + c2 * xs**2, "-", label="quadratic fit")
    ax.set_xlabel("$C_z$")
    ax.set_ylabel("$\\|g\\|$")
    ax.legend()
    _finish(fig, ax, path)


def regularity_plot(rows, path):
    fig, ax = plt.subplots(figsize=(5, 3.5))
    a = np.array(rows, dtype=float)
    for key in sorted({(r[0], r[1]) for r in rows}):
        sel = (a[:, 0] == key[0]) & (a[:, 1] == key[1])
        ax.semilogy(a[sel, 2], a[sel, 3], "o-", label=f"$\\vartheta_t$={key[0]:g}, $\\vartheta_x$={key[1]:g}")
    ax.set_xlabel("level n")
    ax.set_ylabel("increment seminorm")
    ax.legend(fontsize=7)
    _finish(fig, ax, path)
