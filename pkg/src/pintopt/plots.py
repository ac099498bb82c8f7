"""PNG figures rendered next to the CSV tables of a :class:`ResultBundle`."""

from __future__ import annotations

from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

_LABELS = {
    "reduced_serial": "reduced space, time-serial",
    "reduced_parallel": "reduced space, time-parallel",
    "oneshot": "One-shot",
}


def _col(rows, name):
    return np.array([r[name] for r in rows], dtype=float)


def _save(fig, path: Path) -> Path:
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)
    return path


def _piggyback(bundle, out: Path) -> list[Path]:
    _, rows = bundle.tables["piggyback"]
    if not rows:
        return []
    fig, ax = plt.subplots(figsize=(5.5, 4))
    it = _col(rows, "iteration")
    ax.semilogy(it, _col(rows, "state_rel"), "o-", label="state")
    ax.semilogy(it, _col(rows, "adjoint_rel"), "s-", label="adjoint")
    ax.set_xlabel("piggyback iteration")
    ax.set_ylabel("relative drop of successive-iterate norm")
    ax.legend()
    ax.grid(True, which="both", alpha=0.3)
    return [_save(fig, out / "piggyback_residuals.png")]


def _history(name, rows, out: Path) -> Path:
    fig, ax = plt.subplots(figsize=(5.5, 4))
    it = _col(rows, "iteration")
    g = _col(rows, "grad_norm")
    ax.semilogy(it, g / g.max(), "o-", label="|g| (scaled)")
    for col, label in (("state_norm", "state"), ("adjoint_norm", "adjoint")):
        v = _col(rows, col)
        if np.any(v > 0):
            ax.semilogy(it, v / v.max(), ".-", label=f"{label} increment (scaled)")
    ax.set_xlabel("outer iteration")
    ax.set_title(_LABELS.get(name, name))
    ax.legend()
    ax.grid(True, which="both", alpha=0.3)
    return _save(fig, out / f"{name}_history.png")


def _compare(bundle, out: Path) -> list[Path]:
    fig, ax = plt.subplots(figsize=(5.5, 4))
    for name in ("reduced_serial", "reduced_parallel", "oneshot"):
        if name not in bundle.tables:
            continue
        _, rows = bundle.tables[name]
        if rows:
            span = _col(rows, "span") + _col(rows, "adjoint_span")
            ax.semilogy(span, _col(rows, "grad_norm"), ".-", label=_LABELS[name])
    ax.set_xlabel("critical-path step applications")
    ax.set_ylabel("|g|")
    ax.legend()
    ax.grid(True, which="both", alpha=0.3)
    return [_save(fig, out / "compare_cost.png")]


def _scaling(bundle, out: Path) -> list[Path]:
    _, rows = bundle.tables["scaling"]
    fig, ax = plt.subplots(figsize=(5.5, 4))
    ax.loglog(_col(rows, "workers"), _col(rows, "wall_time"), "o-")
    ax.set_xlabel("workers")
    ax.set_ylabel("wall time [s]")
    ax.grid(True, which="both", alpha=0.3)
    return [_save(fig, out / "scaling.png")]


def render_figures(bundle, out_dir) -> list[Path]:
    out = Path(out_dir)
    paths: list[Path] = []
    if "piggyback" in bundle.tables:
        paths += _piggyback(bundle, out)
    for name in ("oneshot", "reduced_serial", "reduced_parallel"):
        if name in bundle.tables and bundle.tables[name][1]:
            paths.append(_history(name, bundle.tables[name][1], out))
    if bundle.kind == "compare":
        paths += _compare(bundle, out)
    if "scaling" in bundle.tables:
        paths += _scaling(bundle, out)
    return paths
