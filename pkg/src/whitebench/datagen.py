"""Synthetic tetromino-on-noise image classification datasets.

Four binary scenarios on small grayscale grids:

* LIN    -- T vs L tetromino at fixed positions, added to the background.
* MULT   -- same shapes, multiplied into the background (non-linear).
* RIGID  -- one shape per class, randomly rotated and translated, additive.
* XOR    -- both shapes in every sample; the class is the sign configuration.

Backgrounds are either i.i.d. standard normal (WHITE) or the same noise
blurred with a Gaussian filter (CORR), which correlates neighboring pixels
and creates suppressor pixels around the shapes. Every sample carries a
ground-truth mask of the truly class-relevant pixels.

Generation is a pure function of the config: every sample draws from its own
seeded RNG stream, so datasets are bit-identical across runs and machines.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from . import serialize

SCENARIOS = ("LIN", "MULT", "RIGID", "XOR")
BACKGROUNDS = ("WHITE", "CORR")

T_CELLS = ((0, 0), (0, 1), (0, 2), (1, 1))
L_CELLS = ((0, 0), (1, 0), (2, 0), (2, 1))
# Fixed anchors for the LIN/MULT/XOR scenarios: T sits near the top-left
# corner, L near the bottom-right (its bounding box touching pixel (6, 6)
# on the default 8x8 grid). The two shapes never overlap.
T_ANCHOR = (1, 1)
L_ANCHOR = (4, 5)

# Signal-to-noise weights calibrated with `whitebench calibrate-alpha` so the
# reference model of each scenario (LLR for LIN, MLP for MULT/XOR, CNN for
# RIGID) clears 80% test accuracy with margin at N=2000. Config values, not
# ground truth.
DEFAULT_ALPHAS = {
    ("LIN", "WHITE"): 0.20,
    ("LIN", "CORR"): 0.10,
    ("MULT", "WHITE"): 1.00,
    ("MULT", "CORR"): 0.90,
    ("RIGID", "WHITE"): 0.80,
    ("RIGID", "CORR"): 0.50,
    ("XOR", "WHITE"): 0.40,
    ("XOR", "CORR"): 0.25,
}

# Per-sample RNG stream tags, combined with (seed, tag, index).
_STREAM_SAMPLE = 17
_STREAM_SPLIT = 23


class PlacementError(ValueError):
    """A tetromino placement does not fit inside the image."""


@dataclass(frozen=True)
class ScenarioConfig:
    scenario: str
    background: str
    n_samples: int = 10000
    height: int = 8
    width: int = 8
    alpha: float | None = None
    smooth_sigma: float = 3.0
    seed: int = 0
    split: tuple = (0.8, 0.1, 0.1)

    def __post_init__(self):
        if self.scenario not in SCENARIOS:
            raise ValueError(f"unknown scenario {self.scenario!r}")
        if self.background not in BACKGROUNDS:
            raise ValueError(f"unknown background {self.background!r}")
        if self.n_samples < 1 or self.height < 1 or self.width < 1:
            raise ValueError("n_samples, height and width must be positive")
        if self.background == "CORR" and not self.smooth_sigma > 0:
            raise ValueError("smooth_sigma must be positive for CORR backgrounds")
        if abs(sum(self.split) - 1.0) > 1e-9 or any(f < 0 for f in self.split):
            raise ValueError("split fractions must be non-negative and sum to 1")
        if self.alpha is None:
            object.__setattr__(self, "alpha", DEFAULT_ALPHAS[(self.scenario, self.background)])
        if not 0.0 <= self.alpha <= 1.0:
            raise ValueError("alpha must lie in [0, 1]")

    def to_dict(self) -> dict:
        return {
            "scenario": self.scenario,
            "background": self.background,
            "n_samples": self.n_samples,
            "height": self.height,
            "width": self.width,
            "alpha": self.alpha,
            "smooth_sigma": self.smooth_sigma,
            "seed": self.seed,
            "split": list(self.split),
        }

    @classmethod
    def from_dict(cls, d) -> "ScenarioConfig":
        d = dict(d)
        d["split"] = tuple(d.get("split", (0.8, 0.1, 0.1)))
        return cls(**d)


@dataclass(frozen=True)
class Sample:
    pixels: np.ndarray
    label: int
    gt_mask: np.ndarray
    signal_component: np.ndarray


@dataclass(frozen=True)
class Dataset:
    config: ScenarioConfig
    pixels: np.ndarray  # (N, H, W) float64, each sample scaled to [-1, 1]
    labels: np.ndarray  # (N,) int
    masks: np.ndarray  # (N, H, W) bool
    signal: np.ndarray  # (N, H, W) float64, pre-mix transformed patterns
    split_indices: tuple = field(repr=False)  # (train, val, test) index arrays

    @property
    def n_samples(self) -> int:
        return self.pixels.shape[0]

    def flat_pixels(self) -> np.ndarray:
        return self.pixels.reshape(self.n_samples, -1)

    def sample(self, i: int) -> Sample:
        return Sample(self.pixels[i], int(self.labels[i]), self.masks[i], self.signal[i])

    def save(self, path) -> None:
        path = Path(path)
        payload = path.with_suffix(".bin")
        layout = serialize.write_payload(
            payload,
            [
                ("pixels", self.pixels, "f8"),
                ("labels", self.labels.astype(np.uint8), "u1"),
                ("masks", self.masks.astype(np.uint8), "u1"),
            ],
        )
        serialize.dump_json(
            {
                "format_version": serialize.FORMAT_VERSION,
                "kind": "dataset",
                "config": self.config.to_dict(),
                "n_samples": self.n_samples,
                "height": self.pixels.shape[1],
                "width": self.pixels.shape[2],
                "payload": payload.name,
                "layout": layout,
                "split_indices": [idx.tolist() for idx in self.split_indices],
            },
            path,
        )

    @classmethod
    def load(cls, path) -> "Dataset":
        path = Path(path)
        meta = serialize.load_json(path)
        arrays = serialize.read_payload(path.parent / meta["payload"], meta["layout"])
        config = ScenarioConfig.from_dict(meta["config"])
        labels = arrays["labels"].astype(np.int64)
        n = meta["n_samples"]
        h, w = meta["height"], meta["width"]
        return cls(
            config=config,
            pixels=arrays["pixels"].reshape(n, h, w),
            labels=labels,
            masks=arrays["masks"].reshape(n, h, w).astype(bool),
            signal=np.zeros((n, h, w)),  # not stored in the payload
            split_indices=tuple(np.asarray(ix, dtype=np.int64) for ix in meta["split_indices"]),
        )


def _sample_rng(seed: int, index: int) -> np.random.Generator:
    return np.random.default_rng([seed, _STREAM_SAMPLE, index])


def rotate_cells(cells, quarter_turns: int):
    """Rotate a cell set by multiples of 90 degrees, renormalized to offset (0, 0)."""
    cells = [tuple(c) for c in cells]
    for _ in range(quarter_turns % 4):
        cells = [(c, -r) for r, c in cells]
        min_r = min(r for r, _ in cells)
        min_c = min(c for _, c in cells)
        cells = [(r - min_r, c - min_c) for r, c in cells]
    return tuple(sorted(cells))


def make_tetromino(kind: str, anchor, rotation: int = 0, height: int = 8, width: int = 8) -> np.ndarray:
    """Binary pattern with a T- or L-shaped tetromino at ``anchor``.

    ``rotation`` is a multiple of 90 degrees. The four shape pixels equal 1,
    everything else 0. Raises :class:`PlacementError` if any pixel of the
    rotated shape falls outside the image.
    """
    base = {"T": T_CELLS, "L": L_CELLS}.get(kind)
    if base is None:
        raise ValueError(f"kind must be 'T' or 'L', got {kind!r}")
    if rotation % 90 != 0:
        raise ValueError("rotation must be a multiple of 90 degrees")
    cells = rotate_cells(base, rotation // 90)
    pattern = np.zeros((height, width))
    r0, c0 = anchor
    for r, c in cells:
        rr, cc = r0 + r, c0 + c
        if not (0 <= rr < height and 0 <= cc < width):
            raise PlacementError(f"{kind} tetromino at {anchor} rotated {rotation} leaves the image")
        pattern[rr, cc] = 1.0
    return pattern


def gaussian_kernel(sigma: float) -> np.ndarray:
    """Normalized 1-D Gaussian taps truncated at four standard deviations."""
    radius = int(4.0 * sigma + 0.5)
    if radius == 0:
        return np.ones(1)
    x = np.arange(-radius, radius + 1, dtype=np.float64)
    k = np.exp(-0.5 * (x / sigma) ** 2)
    return k / k.sum()


def _mirror_index(idx: np.ndarray, n: int) -> np.ndarray:
    """Symmetric boundary extension (edge pixel repeated), any overshoot."""
    period = 2 * n
    m = np.mod(idx, period)
    return np.where(m < n, m, period - 1 - m)


def smooth2d(images: np.ndarray, sigma: float) -> np.ndarray:
    """Separable Gaussian blur with symmetric (reflect) boundary handling.

    Works on a single (H, W) image or an (N, H, W) batch.
    """
    kernel = gaussian_kernel(sigma)
    radius = (len(kernel) - 1) // 2
    if radius == 0:
        return np.array(images, dtype=np.float64)
    out = np.asarray(images, dtype=np.float64)
    for axis in (-2, -1):
        n = out.shape[axis]
        idx = _mirror_index(np.arange(-radius, n + radius), n)
        padded = np.take(out, idx, axis=axis)
        acc = np.zeros_like(out)
        for k, weight in enumerate(kernel):
            sl = [slice(None)] * padded.ndim
            sl[axis] = slice(k, k + n)
            acc += weight * padded[tuple(sl)]
        out = acc
    return out


def make_background(config: ScenarioConfig, rng: np.random.Generator) -> np.ndarray:
    """One background image: white noise, blurred when the config says CORR."""
    white = rng.standard_normal((config.height, config.width))
    if config.background == "CORR":
        return smooth2d(white, config.smooth_sigma)
    return white


def _rescale_unit_max(batch: np.ndarray) -> np.ndarray:
    peak = np.abs(batch).max(axis=(-2, -1), keepdims=True)
    return np.divide(batch, peak, out=batch.copy(), where=peak > 0)


def compose_additive(signal_batch, noise_batch, alpha: float) -> np.ndarray:
    """Weighted sum of (already normalized) signal and noise, then per-sample
    rescale so max |pixel| is 1."""
    signal_batch = np.asarray(signal_batch, dtype=np.float64)
    noise_batch = np.asarray(noise_batch, dtype=np.float64)
    if signal_batch.shape != noise_batch.shape:
        raise ValueError("signal and noise batches must have identical shapes")
    return _rescale_unit_max(alpha * signal_batch + (1.0 - alpha) * noise_batch)


def compose_multiplicative(signal_batch, noise_batch, alpha: float) -> np.ndarray:
    """Background damped toward zero wherever the pattern is active.

    Each pixel becomes ``(1 - alpha * signal) * noise``; a pattern pixel of 1
    is wiped out entirely at alpha = 1. Per-sample rescale as above.
    """
    signal_batch = np.asarray(signal_batch, dtype=np.float64)
    noise_batch = np.asarray(noise_batch, dtype=np.float64)
    if signal_batch.shape != noise_batch.shape:
        raise ValueError("signal and noise batches must have identical shapes")
    return _rescale_unit_max((1.0 - alpha * signal_batch) * noise_batch)


def fixed_union_mask(height: int = 8, width: int = 8) -> np.ndarray:
    """Union of the two fixed tetromino sites used by LIN, MULT and XOR."""
    t = make_tetromino("T", T_ANCHOR, 0, height, width)
    l = make_tetromino("L", L_ANCHOR, 0, height, width)
    return (t + l) > 0


def ground_truth_mask(scenario: str, signal_map: np.ndarray) -> np.ndarray:
    """Pixels that genuinely carry class information for one sample.

    For the fixed-position scenarios this is the union of both tetromino
    sites (absence at one site is as informative as presence at the other);
    for RIGID it is the support of this sample's transformed pattern.
    """
    if scenario == "RIGID":
        return signal_map != 0
    if scenario in ("LIN", "MULT", "XOR"):
        return fixed_union_mask(*signal_map.shape)
    raise ValueError(f"unknown scenario {scenario!r}")


def _valid_anchors(cells, height: int, width: int):
    bh = max(r for r, _ in cells) + 1
    bw = max(c for _, c in cells) + 1
    return [(r, c) for r in range(height - bh + 1) for c in range(width - bw + 1)]


def _sample_signal(config: ScenarioConfig, label: int, rng: np.random.Generator) -> np.ndarray:
    h, w = config.height, config.width
    if config.scenario in ("LIN", "MULT"):
        if label == 0:
            return make_tetromino("T", T_ANCHOR, 0, h, w)
        return make_tetromino("L", L_ANCHOR, 0, h, w)
    if config.scenario == "XOR":
        t = make_tetromino("T", T_ANCHOR, 0, h, w)
        l = make_tetromino("L", L_ANCHOR, 0, h, w)
        sign = 1.0 if rng.integers(2) == 0 else -1.0
        return sign * (t + l) if label == 0 else sign * (t - l)
    # RIGID: one shape per class, uniformly rotated and translated in bounds.
    kind = "T" if label == 0 else "L"
    rotation = int(rng.integers(4)) * 90
    cells = rotate_cells(T_CELLS if kind == "T" else L_CELLS, rotation // 90)
    anchors = _valid_anchors(cells, h, w)
    anchor = anchors[int(rng.integers(len(anchors)))]
    return make_tetromino(kind, anchor, rotation, h, w)


def _split_indices(config: ScenarioConfig) -> tuple:
    rng = np.random.default_rng([config.seed, _STREAM_SPLIT])
    perm = rng.permutation(config.n_samples)
    n_train = int(round(config.split[0] * config.n_samples))
    n_val = int(round(config.split[1] * config.n_samples))
    return (
        np.sort(perm[:n_train]),
        np.sort(perm[n_train : n_train + n_val]),
        np.sort(perm[n_train + n_val :]),
    )


def generate_dataset(config: ScenarioConfig) -> Dataset:
    """Build the full dataset described by ``config``, deterministically."""
    n, h, w = config.n_samples, config.height, config.width
    labels = np.empty(n, dtype=np.int64)
    noise = np.empty((n, h, w))
    signal = np.empty((n, h, w))
    for i in range(n):
        rng = _sample_rng(config.seed, i)
        labels[i] = rng.integers(2)
        raw = rng.standard_normal((h, w))
        noise[i] = smooth2d(raw, config.smooth_sigma) if config.background == "CORR" else raw
        signal[i] = _sample_signal(config, labels[i], rng)

    if config.scenario == "MULT":
        # The pattern multiplies the background, so it stays at unit height:
        # normalizing it away would shrink the modulation with the dataset
        # size. Only the noise is Frobenius-normalized.
        noise_norm = noise / np.linalg.norm(noise)
        pixels = compose_multiplicative(signal, noise_norm, config.alpha)
        signal_component = signal
    else:
        signal_component = signal / np.linalg.norm(signal)
        noise_norm = noise / np.linalg.norm(noise)
        pixels = compose_additive(signal_component, noise_norm, config.alpha)

    masks = np.empty((n, h, w), dtype=bool)
    if config.scenario == "RIGID":
        masks[:] = signal != 0
    else:
        masks[:] = fixed_union_mask(h, w)

    return Dataset(
        config=config,
        pixels=pixels,
        labels=labels,
        masks=masks,
        signal=signal_component,
        split_indices=_split_indices(config),
    )


def with_alpha(config: ScenarioConfig, alpha: float) -> ScenarioConfig:
    return replace(config, alpha=alpha)
