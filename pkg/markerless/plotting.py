"""
plotting.py - Joint-angle figures as SVG: estimate in black, reference in red.
"""

import logging
from pathlib import Path
from typing import Optional

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

from .errors import NoDataError  # noqa: E402
from .kinematics import AngleSeries  # noqa: E402

logger = logging.getLogger(__name__)

ESTIMATE_COLOR = "#000000"
REFERENCE_COLOR = "#ff0000"
FIGURE_SIZE = (10, 4)

# fixed salt and no date keep the SVG bytes reproducible
SVG_RC = {"svg.hashsalt": "markerless", "svg.fonttype": "none"}


def _seconds(series: AngleSeries, origin: float) -> np.ndarray:
    return (series.timestamps_ms.astype(float) - origin) / 1000.0


def plot_angles(estimate: AngleSeries, path, reference: Optional[AngleSeries] = None) -> Path:
    if len(estimate) == 0 or not estimate.valid.any():
        raise NoDataError(f"{estimate.name}: nothing to plot")
    origin = float(estimate.timestamps_ms[0])
    if reference is not None and len(reference):
        origin = min(origin, float(reference.timestamps_ms[0]))

    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with plt.rc_context(SVG_RC):
        fig, ax = plt.subplots(figsize=FIGURE_SIZE)
        ax.plot(_seconds(estimate, origin), estimate.angles_deg, color=ESTIMATE_COLOR, linewidth=1.2, label="estimate")
        if reference is not None and reference.valid.any():
            ax.plot(_seconds(reference, origin), reference.angles_deg, color=REFERENCE_COLOR, linewidth=1.0,
                    label="reference")
            ax.legend(loc="upper right", fontsize=8)
        ax.set_xlabel("Time (s)")
        ax.set_ylabel("Angle (deg)")
        ax.set_title(estimate.name.replace("_", " "))
        ax.grid(True, alpha=0.3)
        fig.savefig(path, format="svg", metadata={"Date": None}, bbox_inches="tight")
        plt.close(fig)
    logger.info("Wrote %s", path)
    return path
