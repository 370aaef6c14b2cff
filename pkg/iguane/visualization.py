from pathlib import Path

import matplotlib.pyplot as plt
import numpy as np
from matplotlib.ticker import AutoMinorLocator

from iguane.stats import regression_slope


def paper_style(axes=None):
    if axes is None:
        axes = plt.gcf().axes
    elif not isinstance(axes, list):
        axes = [axes]

    for axe in axes:
        axe.set_axisbelow(True)
        axe.tick_params(gridOn=True, grid_color="whitesmoke")
        axe.xaxis.set_minor_locator(AutoMinorLocator())
        axe.yaxis.set_minor_locator(AutoMinorLocator())
        axe.tick_params(which="both", direction="in")


def slice_panel(volumes, titles=None, axis=2, index=None, size=2.5):
    """Middle slices of several volumes side by side

    Parameters
    ----------
    volumes : list of Volume
    titles : list of str, optional
        one title per volume
    axis : int, optional
        axis orthogonal to the slices, by default 2
    index : int, optional
        slice index, by default the middle slice of each volume
    """
    fig, axes = plt.subplots(1, len(volumes), figsize=(size * len(volumes), size))
    axes = np.atleast_1d(axes)
    for i, (vol, ax) in enumerate(zip(volumes, axes)):
        vol.show(axis=axis, index=index, ax=ax)
        if titles is not None:
            ax.set_title(titles[i], loc="left", fontsize=9)
    return fig


def plot_age_gm(ages, gm, weights=None, label=None, c="C0", ax=None):
    """Grey-matter fraction against age with its (weighted) regression line"""
    if ax is None:
        ax = plt.gca()
    ages, gm = np.asarray(ages, float), np.asarray(gm, float)
    ax.plot(ages, gm, ".", c=c, alpha=0.6, label=label)
    w = np.ones_like(ages) if weights is None else np.asarray(weights, float)
    slope = regression_slope(ages, gm, w)
    w = w / w.sum()
    intercept = (w * gm).sum() - slope * (w * ages).sum()
    x = np.array([ages.min(), ages.max()])
    ax.plot(x, intercept + slope * x, c=c)
    ax.set_xlabel("age (years)")
    ax.set_ylabel("GM fraction")
    return ax


def plot_ssim(scores: dict, ax=None):
    """Boxplots of SSIM values per method"""
    if ax is None:
        ax = plt.gca()
    names = [name for name, values in scores.items() if len(values)]
    ax.boxplot([[v for *_, v in scores[name]] for name in names])
    ax.set_xticks(range(1, len(names) + 1))
    ax.set_xticklabels(names)
    ax.set_ylabel("SSIM")
    return ax


def plot_distances(before, after, ax=None, c="C0"):
    """Normalized pairwise distances after against before"""
    if ax is None:
        ax = plt.gca()
    before, after = np.asarray(before, float), np.asarray(after, float)
    before, after = before / before.mean(), after / after.mean()
    ax.plot(before, after, ".", c=c, alpha=0.6)
    lims = [min(before.min(), after.min()), max(before.max(), after.max())]
    ax.plot(lims, lims, "--", c="k", lw=1)
    ax.set_xlabel("distance before")
    ax.set_ylabel("distance after")
    return ax


def plot_sampling_plan(plan, ax=None):
    """Expected sampled age distribution against the reference one"""
    if ax is None:
        ax = plt.gca()
    edges = np.asarray(plan.bin_edges)
    centers = 0.5 * (edges[1:] + edges[:-1])
    width = np.diff(edges)
    ax.bar(centers, plan.expected_histogram(), width=width * 0.9, color="C0", alpha=0.6,
           label="sampled")
    if plan.reference_histogram is not None:
        ax.step(edges, np.append(plan.reference_histogram, plan.reference_histogram[-1]),
                where="post", c="k", label="reference")
    ax.set_xlabel("age (years)")
    ax.set_ylabel("probability")
    ax.legend()
    return ax


def plot_reports(reports, methods, spec, out_dir):
    """Figures of an evaluation, saved as PNG in ``out_dir``"""
    out_dir = Path(out_dir)
    plt.switch_backend("Agg")

    shown = [m for m in methods if len(m.manifest)]
    if shown:
        fig = slice_panel([m.volume(0) for m in shown], [m.name for m in shown])
        fig.savefig(out_dir / "slices.png", dpi=100)
        plt.close(fig)

    for report in reports:
        scores = getattr(report, "scores", None)
        if not scores:
            continue
        fig = plt.figure(figsize=(6, 4))
        ax = fig.add_subplot(111)
        if report.analysis == "ssim-traveling":
            plot_ssim(scores, ax=ax)
        elif report.analysis == "age-gm-correlation":
            for i, (name, (ages, gm)) in enumerate(scores.items()):
                plot_age_gm(ages, gm, label=name, c=f"C{i}", ax=ax)
            ax.legend()
        elif report.analysis == "distance-preservation":
            for i, (name, (before, after)) in enumerate(scores.items()):
                plot_distances(before, after, ax=ax, c=f"C{i}")
        paper_style(ax)
        fig.tight_layout()
        fig.savefig(out_dir / f"{report.analysis}.png", dpi=100)
        plt.close(fig)
