"""SVG figures for traces, GAT curves and weight distributions.

Output is byte-reproducible: the SVG hash salt is fixed and no creation date
is written.
"""
from __future__ import annotations

from typing import Mapping, Sequence

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

from .units import UnitRef  # noqa: E402

plt.rcParams["svg.hashsalt"] = "numunits"
plt.rcParams["svg.fonttype"] = "none"

CONDITION_STYLE = {
    "S": ("tab:blue", "-"), "P": ("tab:red", "-"),
    "SS": ("tab:blue", "-"), "SP": ("tab:blue", "--"),
    "PS": ("tab:red", "--"), "PP": ("tab:red", "-"),
}
QUANTITY_LABEL = {"i": "input gate $i_t$", "f": "forget gate $f_t$", "o": "output gate $o_t$",
                  "ctilde": r"candidate $\tilde{C}_t$", "c": "cell $C_t$", "h": "hidden $h_t$"}


def _save(fig, path, metadata: dict | None = None) -> None:
    fig.savefig(path, format="svg", metadata=dict({"Date": None}, **(metadata or {})))
    plt.close(fig)


def plot_unit_traces(traces: Mapping[str, Sequence], unit: UnitRef, path,
                     quantities: Sequence[str] = ("ctilde", "i", "f", "c"), title: str | None = None,
                     metadata: dict | None = None) -> None:
    """Mean +/- SD over the traces of each condition, one panel per quantity.

    ``traces`` maps condition labels to lists of aligned ActivationTraces.
    """
    conds = [c for c in traces if traces[c]]
    if not conds:
        raise ValueError("no traces to plot")
    fig, axes = plt.subplots(1, len(quantities), figsize=(3.2 * len(quantities), 2.6), squeeze=False)
    tokens = traces[conds[0]][0].tokens
    for ax, q in zip(axes[0], quantities):
        for cond in conds:
            vals = np.stack([t.unit(unit, q) for t in traces[cond]])
            mu, sd = vals.mean(0), vals.std(0)
            color, ls = CONDITION_STYLE.get(cond, (None, "-"))
            x = np.arange(len(mu))
            ax.errorbar(x, mu, yerr=sd, color=color, ls=ls, lw=1.2, capsize=2, label=cond)
        ax.set_title(QUANTITY_LABEL.get(q, q), fontsize=9)
        ax.set_xticks(range(len(tokens)))
        ax.set_xticklabels(tokens, rotation=45, ha="right", fontsize=7)
    axes[0][0].legend(fontsize=7, frameon=False)
    fig.suptitle(title or str(unit), fontsize=10)
    fig.tight_layout()
    _save(fig, path, metadata)


def plot_gat(curves: Sequence, path, title: str = "Subject-number decoding across time",
             metadata: dict | None = None) -> None:
    """One line per GATMatrix: mean AUC with SD error bars over splits."""
    if not curves:
        raise ValueError("no GAT curves")
    fig, ax = plt.subplots(figsize=(5.5, 3.2))
    for g in curves:
        x = np.arange(len(g.mean))
        ax.errorbar(x, g.mean, yerr=g.sd, lw=1.4, capsize=2, label=g.label or f"t={g.train_time}")
    tokens = curves[0].tokens
    if tokens:
        ax.set_xticks(range(len(tokens)))
        ax.set_xticklabels(tokens, rotation=45, ha="right", fontsize=8)
    ax.axhline(0.5, color="grey", lw=0.8, ls=":")
    ax.set_ylim(-0.05, 1.05)
    ax.set_ylabel("AUC")
    ax.set_title(title, fontsize=10)
    ax.legend(fontsize=8, frameon=False)
    fig.tight_layout()
    _save(fig, path, metadata)


def plot_efferents(profiles: Sequence, path, metadata: dict | None = None) -> None:
    """Strip plot of output weights to singular vs plural verb forms per unit."""
    if not profiles:
        raise ValueError("no efferent profiles")
    fig, ax = plt.subplots(figsize=(1.4 * len(profiles) + 1.5, 3.2))
    for k, p in enumerate(profiles):
        ax.scatter(np.full(len(p.singular), k - 0.12), p.singular, color="tab:blue", s=12,
                   label="singular" if k == 0 else None)
        ax.scatter(np.full(len(p.plural), k + 0.12), p.plural, color="tab:red", s=12,
                   label="plural" if k == 0 else None)
    ax.set_xticks(range(len(profiles)))
    ax.set_xticklabels([f"{p.unit}\nseg={p.segregation:.2f}" for p in profiles], fontsize=8)
    ax.axhline(0, color="grey", lw=0.6)
    ax.set_ylabel("efferent weight")
    ax.legend(fontsize=8, frameon=False)
    fig.tight_layout()
    _save(fig, path, metadata)


def plot_afferents(reports: Sequence, path, metadata: dict | None = None) -> None:
    """Z-scored effective afferents per (target, gate); |z| outliers labelled."""
    if not reports:
        raise ValueError("no afferent reports")
    fig, ax = plt.subplots(figsize=(1.6 * len(reports) + 1.5, 3.6))
    rng = np.random.default_rng(0)      # fixed jitter
    for k, r in enumerate(reports):
        jitter = rng.uniform(-0.15, 0.15, len(r.z))
        out = np.abs(r.z) > r.threshold
        ax.scatter(k + jitter[~out], r.z[~out], s=6, color="0.6")
        ax.scatter(k + jitter[out], r.z[out], s=14, color="tab:orange")
        for i in np.flatnonzero(out):
            ax.annotate(str(r.sources[i]), (k + jitter[i], r.z[i]), fontsize=6,
                        xytext=(3, 0), textcoords="offset points")
    for y in (-3, 3):
        ax.axhline(y, color="grey", lw=0.6, ls=":")
    ax.set_xticks(range(len(reports)))
    ax.set_xticklabels([f"{r.target}\n{r.gate}" for r in reports], fontsize=8)
    ax.set_ylabel("z-score of effective weight")
    fig.tight_layout()
    _save(fig, path, metadata)


def plot_weights(weights, labels: Sequence[str], flagged: Sequence[int], path,
                 ylabel: str = "regression weight", metadata: dict | None = None) -> None:
    """Sorted weight profile with flagged entries labelled (depth-regression outliers)."""
    w = np.asarray(weights, dtype=float)
    order = np.argsort(w)
    fig, ax = plt.subplots(figsize=(6, 3))
    ax.plot(range(len(w)), w[order], ".", color="0.5", ms=3)
    flagged = set(int(i) for i in flagged)
    for rank, i in enumerate(order):
        if i in flagged:
            ax.plot(rank, w[i], "o", color="tab:orange", ms=4)
            ax.annotate(labels[i], (rank, w[i]), fontsize=6, xytext=(3, 0), textcoords="offset points")
    m, s = w.mean(), w.std()
    for y in (m - 3 * s, m + 3 * s):
        ax.axhline(y, color="grey", lw=0.6, ls=":")
    ax.set_xlabel("units (sorted)")
    ax.set_ylabel(ylabel)
    fig.tight_layout()
    _save(fig, path, metadata)
