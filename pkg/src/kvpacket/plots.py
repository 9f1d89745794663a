"""SVG figures: F1 against FLOPs and TTFT, and the attention-score profile."""

from __future__ import annotations

from pathlib import Path
from typing import Mapping, Sequence

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

from kvpacket.analysis import AttnProfile  # noqa: E402


def _label(row: Mapping) -> str:
    return row["strategy"] + (f"[{row['policy_params']}]" if row["policy_params"] else "")


def tradeoff_plot(rows: Sequence[Mapping], x: str, path, log_x: bool = True) -> Path:
    """Per-(strategy, domain) means of F1 against ``x`` (``relative_flops`` or ``ttft_s``)."""
    groups: dict[str, dict[str, list]] = {}
    for r in rows:
        g = groups.setdefault(_label(r), {})
        g.setdefault(r["domain"], []).append((float(r[x]), float(r["f1"])))
    fig, ax = plt.subplots(figsize=(6.4, 4.2))
    markers = "osD^v<>ph*"
    domains = sorted({r["domain"] for r in rows})
    for i, (label, per_dom) in enumerate(sorted(groups.items())):
        pts = [np.mean(per_dom[d], axis=0) for d in domains if d in per_dom]
        xs, ys = zip(*pts)
        ax.scatter(xs, ys, marker=markers[i % len(markers)], label=label)
    if log_x:
        ax.set_xscale("symlog", linthresh=1e-6)
    ax.set_xlabel(x)
    ax.set_ylabel("mean F1")
    ax.set_ylim(-0.02, 1.02)
    ax.legend(fontsize=7, loc="best")
    ax.grid(alpha=0.3)
    fig.tight_layout()
    out = Path(path)
    fig.savefig(out, format="svg")
    plt.close(fig)
    return out


def attention_plot(profiles: Sequence[AttnProfile], path) -> Path:
    fig, ax = plt.subplots(figsize=(8, 3.6))
    for p in profiles:
        pos = np.flatnonzero(~np.isnan(p.scores))
        ax.plot(pos, p.scores[pos], marker=".", lw=0.8, ms=3, label=p.strategy)
    ref = profiles[0]
    labels = np.array(ref.labels)
    for reg, color in (("header", "tab:green"), ("trailer", "tab:red")):
        for i in np.flatnonzero(labels == reg):
            ax.axvspan(i - 0.5, i + 0.5, color=color, alpha=0.08, lw=0)
    ax.set_xlabel("context position (packet layout)")
    ax.set_ylabel("mean attention from query")
    ax.set_yscale("log")
    ax.legend()
    fig.tight_layout()
    out = Path(path)
    fig.savefig(out, format="svg")
    plt.close(fig)
    return out
