"""Artifact writers.

Every file a run emits carries the resolved config hash: CSVs start with a
`# config=<hash>` comment line, PNGs carry it in their metadata text chunk.
Float cells are written with `repr`, which round-trips exactly, so reruns
under the same seed and config produce byte-identical CSVs.
"""

from __future__ import annotations

import csv
import io
from typing import Sequence

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt
import numpy as np


def _cell(value) -> str:
    if isinstance(value, bool):
        return "yes" if value else "no"
    if isinstance(value, (float, np.floating)):
        return repr(float(value))
    return str(value)


def write_csv(path, header: Sequence[str], rows: Sequence[Sequence], config_hash: str) -> None:
    buf = io.StringIO()
    buf.write(f"# config={config_hash}\n")
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(header)
    for row in rows:
        writer.writerow([_cell(v) for v in row])
    with open(path, "w", newline="") as fh:
        fh.write(buf.getvalue())


def read_csv(path) -> tuple[str, list[str], list[list[str]]]:
    """Returns (config_hash, header, rows); raises on a missing hash line."""
    with open(path) as fh:
        first = fh.readline().strip()
        if not first.startswith("# config="):
            raise ValueError(f"{path} is missing the config-hash comment line")
        config_hash = first.split("=", 1)[1]
        reader = csv.reader(fh)
        header = next(reader)
        rows = [row for row in reader if row]
    return config_hash, header, rows


def plot_series(path, x, series: dict[str, Sequence[float]], *, xlabel: str, ylabel: str, title: str, config_hash: str) -> None:
    fig, ax = plt.subplots(figsize=(6, 4))
    for label, ys in series.items():
        ax.plot(x, ys, marker="o", markersize=3, label=label)
    ax.set_xlabel(xlabel)
    ax.set_ylabel(ylabel)
    ax.set_title(title)
    ax.grid(True, alpha=0.3)
    if len(series) > 1:
        ax.legend()
    fig.tight_layout()
    fig.savefig(path, metadata={"Description": f"config={config_hash}"})
    plt.close(fig)


def save_label_maps(path, labels: np.ndarray, *, title: str, config_hash: str) -> None:
    """Render per-frame integer label maps (T, h, w) as one image grid."""
    t = labels.shape[0]
    cols = min(t, 4)
    rows = (t + cols - 1) // cols
    fig, axes = plt.subplots(rows, cols, figsize=(2.2 * cols, 2.2 * rows), squeeze=False)
    for i in range(rows * cols):
        ax = axes[i // cols][i % cols]
        ax.axis("off")
        if i < t:
            ax.imshow(labels[i], cmap="tab10", interpolation="nearest")
            ax.set_title(f"frame {i}", fontsize=8)
    fig.suptitle(title)
    fig.tight_layout()
    fig.savefig(path, metadata={"Description": f"config={config_hash}"})
    plt.close(fig)


# -- ablation tables -----------------------------------------------------------
#
# Published full-scale results, shown next to desk-scale numbers purely as a
# reference column; they are NOT reproduced (and not reproducible) here.

REFERENCE_COMPONENTS = {
    "I": (59.7, 57.9, 61.6),
    "T": (61.9, 60.1, 63.7),
    "IT": (63.8, 62.0, 65.5),
    "IT+NP": (64.8, 63.1, 66.6),
}
REFERENCE_FUSION = {
    ("I", "-"): (59.7, 57.9, 61.6),
    ("T", "-"): (61.9, 60.1, 63.7),
    ("IT", "concat"): (62.4, 60.8, 64.0),
    ("IT", "attention"): (64.8, 63.1, 66.6),
}
REFERENCE_STEPS = {
    1: (64.8, 63.1, 66.6),
    5: (63.4, 61.6, 65.1),
    10: (63.5, 61.7, 65.1),
    50: (63.1, 61.3, 64.9),
    100: (62.7, 60.8, 64.5),
}

COMPONENT_ROWS = ("I", "T", "IT", "IT+NP")
_CHECK, _BLANK = "x", ""


def component_flags(row: str) -> tuple[bool, bool, bool]:
    """(image_cond, text_cond, noise_prediction) toggles for a grid row."""
    return ("I" in row.split("+")[0], "T" in row.split("+")[0], row.endswith("+NP"))


def format_components_table(results: dict[str, tuple[float, float, float] | None]) -> str:
    lines = [
        "components ablation (desk scale; 'published' column is the full-scale",
        "reference result, not reproduced here)",
        "",
        f"{'Image-Cond':>10} | {'Text-Cond':>9} | {'NP':>2} | {'J&F':>6} {'J':>6} {'F':>6} | published J&F",
        "-" * 70,
    ]
    for row in COMPONENT_ROWS:
        img, txt, np_on = component_flags(row)
        got = results.get(row)
        jf, j, f = (f"{v:6.1f}" for v in got) if got else ("   n/a",) * 3
        ref = REFERENCE_COMPONENTS[row][0]
        lines.append(
            f"{_CHECK if img else _BLANK:>10} | {_CHECK if txt else _BLANK:>9} | "
            f"{_CHECK if np_on else _BLANK:>2} | {jf} {j} {f} | {ref:.1f} (not reproduced)"
        )
    return "\n".join(lines) + "\n"


def format_fusion_table(results: dict[tuple[str, str], tuple[float, float, float] | None], params: dict[str, int]) -> str:
    lines = [
        "prompt-fusion ablation (desk scale; equal trainable parameter counts",
        "audited; 'published' column is the full-scale reference, not reproduced)",
        "",
        f"{'Mode':>6} | {'Fusion':>9} | {'params':>8} | {'J&F':>6} {'J':>6} {'F':>6} | published J&F",
        "-" * 72,
    ]
    for key in REFERENCE_FUSION:
        mode, fusion = key
        got = results.get(key)
        jf, j, f = (f"{v:6.1f}" for v in got) if got else ("   n/a",) * 3
        count = params.get(fusion, "")
        ref = REFERENCE_FUSION[key][0]
        lines.append(
            f"{mode:>6} | {fusion:>9} | {count!s:>8} | {jf} {j} {f} | {ref:.1f} (not reproduced)"
        )
    return "\n".join(lines) + "\n"


def format_step_table(results: dict[int, tuple[float, float, float] | None]) -> str:
    lines = [
        "feature-extraction step sweep (desk scale; 'published' column is the",
        "full-scale reference, not reproduced here)",
        "",
        f"{'Step':>5} | {'J&F':>6} {'J':>6} {'F':>6} | published J&F",
        "-" * 48,
    ]
    for step in sorted(REFERENCE_STEPS):
        got = results.get(step)
        jf, j, f = (f"{v:6.1f}" for v in got) if got else ("   n/a",) * 3
        ref = REFERENCE_STEPS[step][0]
        lines.append(f"{step:>5} | {jf} {j} {f} | {ref:.1f} (not reproduced)")
    return "\n".join(lines) + "\n"
