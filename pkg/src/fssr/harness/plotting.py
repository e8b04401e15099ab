"""Matplotlib defaults for the report figures."""

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt  # noqa: E402

STYLE = {
    "figure.figsize": (5.0, 3.4),
    "figure.dpi": 120,
    "savefig.dpi": 150,
    "savefig.bbox": "tight",
    "font.size": 9,
    "axes.labelsize": 9,
    "axes.titlesize": 10,
    "legend.fontsize": 8,
    "legend.frameon": False,
    "xtick.labelsize": 8,
    "ytick.labelsize": 8,
    "axes.spines.top": False,
    "axes.spines.right": False,
    "lines.linewidth": 1.4,
    "lines.markersize": 4,
    # fixed hash salt keeps svg/pdf output byte-stable
    "svg.hashsalt": "fssr",
}

ARCH_LABELS = {
    "vgg_m": "VGG-M",
    "resnet34": "ResNet-34",
    "capsnet_m": "CapsuleNet-M",
    "capsnet_ma": "CapsuleNet-MA",
}

ARCH_MARKERS = {"vgg_m": "s", "resnet34": "o", "capsnet_m": "^", "capsnet_ma": "v"}


def new_figure(**kwargs):
    with plt.rc_context(STYLE):
        fig, ax = plt.subplots(**kwargs)
    return fig, ax


def save(fig, path) -> None:
    with plt.rc_context(STYLE):
        fig.savefig(path)
    plt.close(fig)
