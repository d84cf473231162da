"""Report figures written next to the CSV outputs of the CLI."""

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

STYLE = {
    "figure.figsize": (6.4, 4.0),
    "axes.grid": True,
    "grid.alpha": 0.3,
    "axes.spines.top": False,
    "axes.spines.right": False,
    "font.size": 10,
    "savefig.dpi": 120,
    "savefig.bbox": "tight",
}


def _save(fig, path):
    fig.savefig(path)
    plt.close(fig)
    return path


def plot_training(report, path):
    with plt.rc_context(STYLE):
        fig, ax = plt.subplots()
        ep = [e.epoch for e in report.epochs]
        ax.semilogy(ep, report.train_errors, label="train reconstruction")
        test = np.array(report.test_errors, dtype=float)
        if np.isfinite(test).any():
            ax.semilogy(ep, test, label="test reconstruction")
        ax.semilogy(ep, [max(e.kl, 1e-12) for e in report.epochs], ":", label="KL")
        ax.set_xlabel("epoch")
        ax.set_ylabel("error (normalized units)")
        ax.legend(frameon=False)
        return _save(fig, path)


def plot_projection(labels, coords, path, explained=None):
    with plt.rc_context(STYLE):
        fig, ax = plt.subplots()
        labels = np.asarray(labels)
        for lab in dict.fromkeys(labels.tolist()):
            sel = labels == lab
            ax.scatter(coords[sel, 0], coords[sel, 1], s=12, label=str(lab))
        xl, yl = "PC 1", "PC 2"
        if explained is not None:
            xl += f" ({100 * explained[0]:.1f}%)"
            yl += f" ({100 * explained[1]:.1f}%)"
        ax.set_xlabel(xl)
        ax.set_ylabel(yl)
        ax.legend(frameon=False, fontsize=8, markerscale=1.5, ncol=2)
        return _save(fig, path)


def plot_latency(result, path, target_s=None, reference_s=None):
    with plt.rc_context(STYLE):
        fig, ax = plt.subplots()
        ax.hist(1e3 * result.samples, bins=50, color="0.4")
        ax.axvline(1e3 * result.mean_s, color="C0", label=f"mean {1e3 * result.mean_s:.2f} ms")
        ax.axvline(1e3 * result.p99_s, color="C1", ls="--", label=f"p99 {1e3 * result.p99_s:.2f} ms")
        if target_s:
            ax.axvline(1e3 * target_s, color="C3", ls=":", label=f"budget {1e3 * target_s:.2f} ms")
        if reference_s:
            ax.axvline(1e3 * reference_s, color="C2", ls=":", label=f"reference {1e3 * reference_s:.2f} ms")
        ax.set_xlabel("decode time per frame (ms)")
        ax.set_ylabel("trials")
        ax.legend(frameon=False)
        return _save(fig, path)


def plot_playback(events, fps, path):
    with plt.rc_context(STYLE):
        fig, ax = plt.subplots()
        present = np.array([e.present_timestamp for e in events])
        if len(present) > 1:
            ax.plot(1e3 * np.diff(present), lw=1, label="inter-present interval")
        ax.axhline(1e3 / fps, color="C3", ls=":", label=f"1/fps = {1e3 / fps:.1f} ms")
        ax.set_xlabel("frame")
        ax.set_ylabel("ms")
        ax.legend(frameon=False)
        return _save(fig, path)
