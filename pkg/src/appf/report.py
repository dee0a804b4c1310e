"""Plot-ready series for run artifacts and optional PNG rendering.

``plot_data`` has no plotting dependency; ``render_run`` and
``render_comparison`` import matplotlib lazily with the Agg backend.
"""

from __future__ import annotations

import json
from pathlib import Path

import numpy as np

PLOT_STRIDE = 6   # 60 Hz samples -> 10 Hz series


def _series(traj, matrix, ids, stride):
    return {str(b): np.round(matrix[::stride, k], 8).tolist() for k, b in enumerate(ids)}


def plot_data(result, stride: int = PLOT_STRIDE) -> dict:
    """Per-figure series: bus frequency, voltage, SG and IBR power, tie flows, steady state."""
    tr = result.trajectory
    data = {
        "scenario": result.scenario,
        "mode": result.mode,
        "time_s": np.round(tr.time[::stride], 8).tolist(),
        "frequency_hz": _series(tr, tr.frequency, tr.bus_ids, stride),
        "voltage_pu": _series(tr, tr.vm, tr.bus_ids, stride),
        "sg_p_pu": _series(tr, tr.sg_p, tr.sg_buses, stride),
        "sg_q_pu": _series(tr, tr.sg_q, tr.sg_buses, stride),
        "ibr_p_pu": _series(tr, tr.ibr_p, tr.ibr_buses, stride),
        "ibr_q_pu": _series(tr, tr.ibr_q, tr.ibr_buses, stride),
        "tie_p_pu": _series(tr, tr.tie_p, tr.tie_ids, stride),
    }
    if result.table is not None:
        t = result.table
        data["steady_state"] = {"bus_ids": list(map(int, t.bus_ids)),
                                **{k: np.round(np.asarray(v), 10).tolist() for k, v in t.columns.items()}}
    return data


def write_plot_data(result, out_dir) -> Path:
    path = Path(out_dir) / "plot_data.json"
    path.write_text(json.dumps(plot_data(result), sort_keys=True) + "\n")
    return path


def _pyplot():
    import matplotlib
    matplotlib.use("Agg")
    import matplotlib.pyplot as plt
    return plt


def render_run(result, out_dir) -> list:
    """Render the frequency, voltage and unit-power panels of one run to PNG files."""
    plt = _pyplot()
    tr = result.trajectory
    out = Path(out_dir)
    written = []
    panels = (
        ("frequency.png", [(tr.frequency, tr.bus_ids, "bus frequency [Hz]")]),
        ("voltage.png", [(tr.vm, tr.bus_ids, "|V| [p.u.]")]),
        ("ibr_power.png", [(tr.ibr_p, tr.ibr_buses, "IBR P [p.u.]"), (tr.ibr_q, tr.ibr_buses, "IBR Q [p.u.]")]),
        ("sg_power.png", [(tr.sg_p, tr.sg_buses, "SG P [p.u.]"), (tr.sg_q, tr.sg_buses, "SG Q [p.u.]")]),
        ("tie_flows.png", [(tr.tie_p, tr.tie_ids, "tie P [p.u.]")]),
    )
    for name, rows in panels:
        fig, axes = plt.subplots(len(rows), 1, figsize=(7, 2.8 * len(rows)), sharex=True, squeeze=False)
        for ax, (mat, ids, label) in zip(axes[:, 0], rows):
            for k, b in enumerate(ids):
                ax.plot(tr.time, mat[:, k], lw=0.8, label=str(b))
            ax.set_ylabel(label)
            ax.grid(alpha=0.3)
            if len(ids) <= 9:
                ax.legend(fontsize=6, ncol=3)
        axes[-1, 0].set_xlabel("time [s]")
        fig.suptitle(f"{result.scenario} / {result.mode}")
        fig.tight_layout()
        path = out / name
        fig.savefig(path, dpi=110)
        plt.close(fig)
        written.append(path)
    return written


def render_comparison(results, out_dir) -> list:
    """Overlay the system frequency of several control modes of one scenario."""
    from .scenarios import system_frequency

    plt = _pyplot()
    fig, ax = plt.subplots(figsize=(7, 3.2))
    for r in results:
        ax.plot(r.trajectory.time, system_frequency(r.trajectory), lw=1.0, label=r.mode)
    ax.set_xlabel("time [s]")
    ax.set_ylabel("system frequency [Hz]")
    ax.grid(alpha=0.3)
    ax.legend(fontsize=7)
    fig.tight_layout()
    path = Path(out_dir) / f"{results[0].scenario}_comparison.png"
    fig.savefig(path, dpi=110)
    plt.close(fig)
    return [path]
