"""Report rendering: CSV tables, 16-bit footprint images, and figures.

Everything written here is byte-deterministic for identical inputs, so
re-running a command overwrites reports with identical files.
"""

from pathlib import Path

import numpy as np
from matplotlib.backends.backend_agg import FigureCanvasAgg
from matplotlib.figure import Figure

from .errors import ParameterError
from .images import save_image

CSV_HEADER = "image,sigma_test,psnr_posterior,psnr_mean_only,psnr_noisy"
LOG_GAIN = 1e6  # matches the log-scale presentation of footprint maps


def _fmt(v):
    if np.isinf(v):
        return "inf"
    return repr(float(v))


def records_to_csv(records):
    lines = [CSV_HEADER]
    for r in records:
        lines.append(f"{r.image},{r.sigma_test:g},{_fmt(r.psnr_posterior)},"
                     f"{_fmt(r.psnr_mean_only)},{_fmt(r.psnr_noisy)}")
    return "\n".join(lines) + "\n"


def log_scale_footprint(footprint):
    """Normalize a footprint to [0, 1] in log scale for rendering."""
    fp = np.asarray(footprint, dtype=np.float64)
    peak = fp.max()
    if peak <= 0:
        return np.zeros_like(fp, dtype=np.float32)
    return (np.log1p(fp * (LOG_GAIN / peak)) / np.log1p(LOG_GAIN)).astype(np.float32)


def save_footprint(path, footprint):
    """Write the receptive-field map as a 16-bit grayscale PNG in log scale."""
    save_image(path, log_scale_footprint(footprint)[None], bit_depth=16)


def render_footprint_figure(path, footprint, title):
    fig = Figure(figsize=(4.4, 4.0), dpi=120)
    FigureCanvasAgg(fig)
    ax = fig.add_subplot(111)
    im = ax.imshow(log_scale_footprint(footprint), cmap="magma", interpolation="nearest")
    ax.set_title(title)
    ax.set_xticks([])
    ax.set_yticks([])
    fig.colorbar(im, ax=ax, fraction=0.046)
    fig.savefig(path, format="png")


def render_psnr_figure(path, records):
    sigmas = sorted({r.sigma_test for r in records})
    def series(attr):
        return [np.mean([getattr(r, attr) for r in records if r.sigma_test == s])
                for s in sigmas]

    fig = Figure(figsize=(5.6, 4.0), dpi=120)
    FigureCanvasAgg(fig)
    ax = fig.add_subplot(111)
    ax.plot(sigmas, series("psnr_posterior"), "o-", label="posterior")
    ax.plot(sigmas, series("psnr_mean_only"), "s--", label="mean only")
    ax.plot(sigmas, series("psnr_noisy"), "^:", color="gray", label="noisy input")
    ax.set_xlabel("test sigma (0-255 units)")
    ax.set_ylabel("PSNR [dB]")
    ax.grid(True, alpha=0.3)
    ax.legend()
    fig.tight_layout()
    fig.savefig(path, format="png")


def emit_reports(records, out_dir, footprints=None, csv_name="report.csv"):
    """Write the evaluation CSV plus figures (and footprint maps if given).

    Returns the list of written paths. `footprints` maps a label to a 2-D
    footprint array; each produces a 16-bit grayscale PNG and a rendered
    view.
    """
    if not records and not footprints:
        raise ParameterError("nothing to report: no records and no footprints")
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    written = []

    if records:
        csv_path = out_dir / csv_name
        csv_path.write_text(records_to_csv(records))
        written.append(csv_path)
        fig_path = out_dir / (Path(csv_name).stem + "_psnr.png")
        render_psnr_figure(fig_path, records)
        written.append(fig_path)

    for label, footprint in (footprints or {}).items():
        png16 = out_dir / f"footprint_{label}.png"
        save_footprint(png16, footprint)
        written.append(png16)
        view = out_dir / f"footprint_{label}_view.png"
        render_footprint_figure(view, footprint, f"receptive field ({label}, log scale)")
        written.append(view)
    return written
