"""Report figures rendered to PNG with the Agg backend.

Every figure carries the producing config hash in its PNG metadata and no
timestamps, so identical inputs give byte-identical files.
"""

from __future__ import annotations

from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

REGIME_COLORS = {"dynamic": "tab:blue", "fixed": "tab:orange", "frozen": "tab:green"}
_STYLE = {"figure.dpi": 100, "savefig.dpi": 100, "font.size": 9}


def _save(fig, path: Path, config_hash: str) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fig.tight_layout()
    fig.savefig(path, format="png",
                metadata={"Software": "gridshield", "Description": f"config {config_hash}"})
    plt.close(fig)
    return path


def loss_curves(traces: dict, path: Path, config_hash: str = "") -> Path:
    """Total training objective per epoch, one line per regime."""
    with plt.rc_context(_STYLE):
        fig, ax = plt.subplots(figsize=(5, 3.5))
        for regime, tr in traces.items():
            if len(tr):
                ax.plot(tr.column("epoch"), tr.column("total"), label=regime,
                        color=REGIME_COLORS.get(regime))
        ax.set_xlabel("epoch")
        ax.set_ylabel("training objective")
        ax.legend()
        return _save(fig, path, config_hash)


def weight_trajectories(trace, path: Path, config_hash: str = "") -> Path:
    """Component weights and the physics/data weight ratio of one run."""
    with plt.rc_context(_STYLE):
        fig, (a1, a2) = plt.subplots(1, 2, figsize=(8, 3.5))
        if len(trace):
            ep = trace.column("epoch")
            for c in ("w_p", "w_q", "w_v", "w_theta"):
                a1.plot(ep, trace.column(c), label=c)
            a2.plot(ep, trace.column("ratio"), color="k")
        a1.set_yscale("log")
        a1.set_xlabel("epoch")
        a1.set_ylabel("weight exp(-2 s)")
        a1.legend()
        a2.axhline(1.0, ls=":", color="grey")
        a2.set_xlabel("epoch")
        a2.set_ylabel("W_phys / W_data")
        return _save(fig, path, config_hash)


def _grouped_bars(ax, groups: list, reports: dict, table: str, field: str):
    regimes = list(reports)
    width = 0.8 / max(len(regimes), 1)
    x = np.arange(len(groups))
    for k, regime in enumerate(regimes):
        tab = getattr(reports[regime], table)
        vals = [tab.get(g, {}).get(field, np.nan) for g in groups]
        ax.bar(x + (k - (len(regimes) - 1) / 2) * width, vals, width, label=regime,
               color=REGIME_COLORS.get(regime))
    ax.set_xticks(x)
    ax.set_xticklabels(groups)


def mae_bars(reports: dict, path: Path, config_hash: str = "") -> Path:
    """Zone-averaged MAE per family and family-averaged MAE per zone, by regime."""
    with plt.rc_context(_STYLE):
        fig, (a1, a2) = plt.subplots(1, 2, figsize=(9, 3.5))
        first = next(iter(reports.values()))
        _grouped_bars(a1, sorted(first.family_avg), reports, "family_avg", "mae_overall")
        _grouped_bars(a2, sorted(first.zone_avg), reports, "zone_avg", "mae_overall")
        for ax, title in ((a1, "per family"), (a2, "per zone")):
            ax.set_yscale("log")
            ax.set_ylabel("overall MAE")
            ax.set_title(title)
        a1.legend()
        return _save(fig, path, config_hash)


def percentile_bars(reports: dict, path: Path, config_hash: str = "") -> Path:
    """95th and 99th percentile MAE per family, V and theta channels."""
    with plt.rc_context(_STYLE):
        fig, axes = plt.subplots(2, 2, figsize=(9, 6), sharex=True)
        first = next(iter(reports.values()))
        fams = sorted(first.family_avg)
        for ax, field in zip(axes.ravel(), ("mae95_v", "mae99_v", "mae95_theta",
                                            "mae99_theta")):
            _grouped_bars(ax, fams, reports, "family_avg", field)
            ax.set_yscale("log")
            ax.set_title(field)
        axes[0, 0].legend()
        return _save(fig, path, config_hash)


def sweep_plot(rows: list, path: Path, config_hash: str = "") -> Path:
    """Overall MAE versus perturbation level for each attacked-bus count."""
    with plt.rc_context(_STYLE):
        fig, ax = plt.subplots(figsize=(5, 3.5))
        if rows:
            levels = [100 * r["level"] for r in rows]
            for key in sorted(k for k in rows[0] if k.startswith("mae_") and
                              k.endswith("bus") and k.count("_") == 1):
                ax.plot(levels, [r[key] for r in rows], marker="o", label=key[4:])
        ax.set_xlabel("perturbation level [%]")
        ax.set_ylabel("overall MAE")
        ax.legend()
        return _save(fig, path, config_hash)


def residuals_by_bus(errors: dict, path: Path, config_hash: str = "") -> Path:
    """Mean absolute V and theta error per bus for each named dataset.

    ``errors`` maps a label to ``(err_v, err_theta)`` arrays of length n_bus.
    """
    with plt.rc_context(_STYLE):
        fig, (a1, a2) = plt.subplots(2, 1, figsize=(9, 5), sharex=True)
        for label, (ev, et) in errors.items():
            bus = np.arange(1, len(ev) + 1)
            a1.plot(bus, ev, lw=0.8, label=label)
            a2.plot(bus, et, lw=0.8, label=label)
        a1.set_ylabel("|V error|")
        a2.set_ylabel("|theta error|")
        a2.set_xlabel("bus position")
        a1.legend(fontsize=7, ncol=3)
        return _save(fig, path, config_hash)
