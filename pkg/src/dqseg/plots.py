"""Static BEV heatmap images."""
from __future__ import annotations

from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402


def save_heatmaps(maps, stem: str, out_dir) -> list[Path]:
    """One grayscale PNG per level: the max over thing channels of the centre heatmap."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    paths = []
    for m in maps:
        heat = m.center_heatmap.detach().amax(0).double().numpy()
        fig, ax = plt.subplots(figsize=(4, 4))
        # rows index x and columns y, so transpose to draw x to the right
        ax.imshow(heat.T, origin="lower", cmap="gray", vmin=0, vmax=1)
        ax.set_title(f"{stem} level {m.level}")
        ax.set_axis_off()
        path = out_dir / f"{stem}_level{m.level}.png"
        fig.savefig(path, dpi=80, bbox_inches="tight")
        plt.close(fig)
        paths.append(path)
    return paths
