"""SVG figures for the three studies (matplotlib, Agg backend)."""
from __future__ import annotations

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

# fixed metadata keeps the SVG bytes reproducible
_SVG_META = {"Date": None, "Creator": None}
plt.rcParams["svg.hashsalt"] = "polariton-mott"


def _save(fig, path):
    fig.savefig(path, format="svg", metadata=_SVG_META)
    plt.close(fig)


def phase_figure(result, critical_ratio, path):
    fig, ax = plt.subplots(figsize=(5, 3.5))
    t_vals = sorted({r["t_hop_ueV"] for r in result.rows})
    for t in t_vals:
        rows = [r for r in result.rows if r["t_hop_ueV"] == t]
        x = [r["delta_over_g"] for r in rows]
        y = [r["ratio"] for r in rows]
        ax.semilogy(x, y, label=f"t = {t:.1f} ueV")
    ax.axhline(critical_ratio, color="k", ls="--", lw=0.8)
    ax.set_xlabel("delta / g")
    ax.set_ylabel("U / J")
    ax.legend()
    fig.tight_layout()
    _save(fig, path)


def protocol_figure(result, path, sites=(0, 1)):
    rec = result.record
    t = rec.times
    fig, axes = plt.subplots(2, len(sites), figsize=(4 * len(sites), 5), sharex=True, squeeze=False)
    g = result.config.g
    for col, i in enumerate(sites):
        ax = axes[0, col]
        ax.plot(t, np.array([result.schedule.evaluate_all(x)[i] for x in t]) / g)
        ax.set_ylabel("delta / g")
        ax.set_title(f"site {i + 1}")
        ax = axes[1, col]
        ax.plot(t, rec.n_lp[:, i], label="<n> LP")
        ax.plot(t, [s.n_photon[i] for s in rec.snapshots], label="<n> photon")
        g2 = [np.nan if s.g2[i] is None else s.g2[i] for s in rec.snapshots]
        ax.plot(t, g2, label="g2(0)")
        ax.set_xlabel("time (ps)")
        ax.legend(fontsize="small")
    fig.tight_layout()
    _save(fig, path)


def coherence_figure(result, path):
    rec = result.record
    fig, ax = plt.subplots(figsize=(5, 3.5))
    ax.plot(rec.times, [s.V for s in rec.snapshots], label="V")
    ax.plot(rec.times, [s.I for s in rec.snapshots], label="I")
    ax.set_xlabel("time (ps)")
    ax.set_ylim(0, 1.05)
    ax.legend()
    fig.tight_layout()
    _save(fig, path)
