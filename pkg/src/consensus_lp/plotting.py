"""Convergence figures rendered from an iteration trace."""

from __future__ import annotations

from pathlib import Path
from typing import Sequence

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402


def plot_trace(trace: Sequence, path, N: int, f_star: float | None = None, title: str | None = None) -> Path:
    """Two stacked panels: merit ``L^k`` against ``N f(Z^k)``, and residuals on a log axis."""
    k = np.array([t.k for t in trace])
    L = np.array([t.L_k for t in trace])
    fZ = np.array([t.f_Z for t in trace])
    res = {
        "consensus": np.array([t.r_cons for t in trace]),
        "inequality": np.array([t.r_ineq for t in trace]),
        "equality": np.array([t.r_eq for t in trace]),
    }

    fig, (ax1, ax2) = plt.subplots(2, 1, figsize=(7, 6), sharex=True)
    ax1.plot(k, L, lw=1.2, label=r"$L^k$")
    ax1.plot(k, N * fZ, lw=1.0, ls="--", label=r"$N f(Z^k)$")
    if f_star is not None:
        ax1.axhline(N * f_star, color="k", lw=0.8, ls=":", label=r"$N f^\ast$")
    ax1.set_ylabel("merit")
    ax1.legend(frameon=False, fontsize=9)

    for name, r in res.items():
        if np.any(r > 0):
            # exact zeros (k=0 consensus) would drag the log axis down
            ax2.semilogy(k, np.where(r > 0, r, np.nan), lw=1.0, label=name)
    ax2.set_xlabel("iteration $k$")
    ax2.set_ylabel(r"residual ($\infty$-norm)")
    ax2.legend(frameon=False, fontsize=9)
    if title:
        fig.suptitle(title, fontsize=10)
    fig.tight_layout()

    path = Path(path)
    fig.savefig(path, dpi=120)
    plt.close(fig)
    return path
