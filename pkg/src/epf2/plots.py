"""Matplotlib figures rendered next to the delimited report files."""

from __future__ import annotations

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt  # noqa: E402


def plot_loss_curve(path, curve) -> None:
    """curve: list of (step, breakdown dict)."""
    steps = [s for s, _ in curve]
    totals = [bd["total"] for _, bd in curve]
    fig, ax = plt.subplots(figsize=(7, 4))
    ax.plot(steps, totals, lw=1.0, label="total")
    for key in ("mse_refined", "tnll", "mse_proposal"):
        k = key if key in curve[0][1] else f"labeled_{key}"
        if k in curve[0][1]:
            ax.plot(steps, [bd[k] for _, bd in curve], lw=0.8, alpha=0.7, label=key)
    ax.set_xlabel("step")
    ax.set_ylabel("loss")
    ax.legend(fontsize=8)
    ax.grid(alpha=0.3)
    fig.tight_layout()
    fig.savefig(path, dpi=110)
    plt.close(fig)


def plot_metric_report(path, report) -> None:
    """Bar chart of the overall and per-group position errors."""
    names = ["overall"] + list(report.group_mpjpe_cm)
    values = [report.mpjpe_cm] + list(report.group_mpjpe_cm.values())
    fig, ax = plt.subplots(figsize=(6, 4))
    ax.bar(names, values, color="steelblue")
    ax.set_ylabel("position error (cm)")
    ax.set_title(f"velocity error: {report.mpjve_cm:.3f} cm/frame")
    ax.grid(axis="y", alpha=0.3)
    fig.tight_layout()
    fig.savefig(path, dpi=110)
    plt.close(fig)


def plot_cost_table(path, rows) -> None:
    """Stacked parameter/FLOP totals per cost category."""
    cats = sorted({r.category for r in rows})
    params = [sum(r.params for r in rows if r.category == c) for c in cats]
    flops = [sum(r.flops for r in rows if r.category == c) for c in cats]
    fig, axes = plt.subplots(1, 2, figsize=(9, 4))
    axes[0].bar(cats, params, color="steelblue")
    axes[0].set_title("parameters")
    axes[1].bar(cats, flops, color="indianred")
    axes[1].set_title("FLOPs (1 token)")
    for ax in axes:
        ax.tick_params(axis="x", rotation=30)
        ax.grid(axis="y", alpha=0.3)
    fig.tight_layout()
    fig.savefig(path, dpi=110)
    plt.close(fig)
