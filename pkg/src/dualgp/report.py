"""Figure rendering for CLI runs; every plot lands next to its CSV."""

from __future__ import annotations

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt
import numpy as np

__all__ = [
    "plot_trace",
    "plot_bound_scan",
    "plot_compare_estep",
    "plot_benchmark",
    "plot_eval",
]


def _save(fig, path: str) -> str:
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)
    return path


def plot_trace(trace, path: str) -> str:
    """Training curves: ELBO/objective and train/test NLPD per outer iteration."""
    it = trace.metric("iter")
    fig, (ax1, ax2) = plt.subplots(1, 2, figsize=(9, 3.5))
    ax1.plot(it, trace.metric("elbo"), marker="o", ms=3, label="ELBO")
    ax1.plot(it, trace.metric("objective"), marker="s", ms=3, label="M-step objective")
    ax1.set_xlabel("outer iteration")
    ax1.legend()
    ax2.plot(it, trace.metric("nlpd_train"), marker="o", ms=3, label="train NLPD")
    nlte = trace.metric("nlpd_test")
    if np.any(np.isfinite(nlte)):
        ax2.plot(it, nlte, marker="s", ms=3, label="test NLPD")
    ax2.set_xlabel("outer iteration")
    ax2.legend()
    return _save(fig, path)


def plot_bound_scan(theta_grid, proposed, standard, path: str, xlabel: str = "kernel magnitude") -> str:
    fig, ax = plt.subplots(figsize=(5, 3.5))
    ax.plot(theta_grid, proposed, marker="o", ms=3, label="dual-form objective")
    ax.plot(theta_grid, standard, marker="s", ms=3, label="fixed-q ELBO")
    ax.set_xlabel(xlabel)
    ax.set_ylabel("objective value")
    ax.legend()
    return _save(fig, path)


def plot_compare_estep(steps, diff_mean, diff_cov, path: str) -> str:
    fig, ax = plt.subplots(figsize=(5, 3.5))
    ax.semilogy(steps, np.maximum(diff_mean, 1e-18), marker="o", ms=3, label="max |m_u| gap")
    ax.semilogy(steps, np.maximum(diff_cov, 1e-18), marker="s", ms=3, label="max |S_u| gap")
    ax.set_xlabel("E-step")
    ax.set_ylabel("tied vs standard iterate gap")
    ax.legend()
    return _save(fig, path)


def plot_benchmark(rows, path: str) -> str:
    """rows: list of dicts with kind, m, n_batch, seconds."""
    fig, axes = plt.subplots(1, 2, figsize=(9, 3.5))
    m_rows = [r for r in rows if r["kind"] == "m_scan"]
    nb_rows = [r for r in rows if r["kind"] == "nb_scan"]
    if m_rows:
        axes[0].loglog([r["m"] for r in m_rows], [r["seconds"] for r in m_rows], marker="o")
        axes[0].set_xlabel("inducing points m")
        axes[0].set_ylabel("wall seconds")
    if nb_rows:
        axes[1].plot([r["n_batch"] for r in nb_rows], [r["seconds"] for r in nb_rows], marker="o")
        axes[1].set_xlabel("batch size")
        axes[1].set_ylabel("wall seconds")
    return _save(fig, path)


def plot_eval(folds, elbo, nlpd_test, path: str) -> str:
    fig, (ax1, ax2) = plt.subplots(1, 2, figsize=(8, 3.5))
    ax1.bar(folds, elbo)
    ax1.set_xlabel("fold")
    ax1.set_ylabel("ELBO")
    ax2.bar(folds, nlpd_test)
    ax2.set_xlabel("fold")
    ax2.set_ylabel("test NLPD")
    return _save(fig, path)
