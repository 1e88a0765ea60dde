"""Matplotlib figures rendered next to the delimited report files."""
from __future__ import annotations

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt  # noqa: E402


def trace_figure(trace, path):
    """Loss and gradient-norm curves for one run."""
    ts = [r.t for r in trace.rows]
    fig, axes = plt.subplots(1, 2, figsize=(9, 3.2))
    axes[0].plot(ts, [r.global_loss for r in trace.rows], lw=1.2)
    axes[0].set_xlabel("round")
    axes[0].set_ylabel("global loss")
    axes[1].semilogy(ts, [r.global_grad_norm for r in trace.rows], lw=1.2, color="#d62728")
    axes[1].set_xlabel("round")
    axes[1].set_ylabel("global gradient norm")
    for ax in axes:
        ax.grid(alpha=0.3)
    fig.tight_layout()
    fig.savefig(path, dpi=130)
    plt.close(fig)


def compare_figure(rows, path):
    """Final metrics and the analytic gap across compared configs."""
    labels = [str(r["value"]) for r in rows]
    x = range(len(rows))
    fig, axes = plt.subplots(1, 2, figsize=(9, 3.4))
    axes[0].bar(x, [r["final_grad_norm"] for r in rows], color="#1f77b4")
    axes[0].set_ylabel("final gradient norm")
    axes[1].bar(x, [r["analytic_gap"] for r in rows], color="#2ca02c")
    axes[1].set_ylabel("analytic stationarity gap")
    axes[1].set_yscale("log")
    for ax in axes:
        ax.set_xticks(list(x))
        ax.set_xticklabels(labels, rotation=20, ha="right", fontsize=8)
        ax.grid(alpha=0.3, axis="y")
    axis = rows[0]["axis"] if rows else ""
    fig.suptitle(f"sweep over {axis}", fontsize=10)
    fig.tight_layout()
    fig.savefig(path, dpi=130)
    plt.close(fig)


def sweep_figure(rows, path):
    """Chosen interval length and sample sizes across control sweeps."""
    axes_names = sorted({r["axis"] for r in rows})
    fig, axs = plt.subplots(2, len(axes_names), figsize=(3.2 * len(axes_names), 5.6),
                            squeeze=False)
    for col, name in enumerate(axes_names):
        sub = [r for r in rows if r["axis"] == name]
        xs = [r["value"] for r in sub]
        axs[0][col].plot(xs, [r["K"] for r in sub], "o-", ms=3)
        axs[0][col].set_ylabel("chosen K")
        axs[1][col].plot(xs, [r["s_secure"] for r in sub], "o-", ms=3, label="secure")
        axs[1][col].plot(xs, [r["s_insecure"] for r in sub], "s--", ms=3, label="insecure")
        axs[1][col].set_ylabel("chosen s")
        axs[1][col].legend(fontsize=7)
        for row in (0, 1):
            axs[row][col].set_xscale("log")
            axs[row][col].set_xlabel(name)
            axs[row][col].grid(alpha=0.3)
    fig.tight_layout()
    fig.savefig(path, dpi=130)
    plt.close(fig)
