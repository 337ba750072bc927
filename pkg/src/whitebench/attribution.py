"""Per-sample importance maps from trained models, plus model-ignorant baselines.

Gradient methods (saliency, integrated gradients, gradient SHAP, guided
backprop, deconvnet) explain the logit margin of the predicted class;
LRP explains the predicted-class logit by default (configurable). The
perturbation methods (LIME, Shapley sampling, PFI) evaluate the model on
masked or shuffled inputs against a zero baseline.

Every stochastic method derives its RNG from (seed, method, sample index),
so maps are pure functions of (model, input, config) and independent of
evaluation order.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass, replace

import numpy as np

from .datagen import _mirror_index
from .linalg import NotSPDError, cholesky, solve_lower
from .models import Conv2D, Dense, Flatten, Model, ReLU, Softmax

GRADIENT_METHODS = (
    "saliency",
    "integrated_gradients",
    "gradient_shap",
    "guided_backprop",
    "deconvnet",
)
PERTURBATION_METHODS = ("lime", "shapley_sampling")
PROPAGATION_METHODS = ("lrp_epsilon",)
BASELINE_METHODS = ("sobel", "laplace", "random_uniform", "rectified_input")
PER_SAMPLE_METHODS = GRADIENT_METHODS + PERTURBATION_METHODS + PROPAGATION_METHODS + BASELINE_METHODS
GLOBAL_METHODS = ("pfi",)
ALL_METHODS = PER_SAMPLE_METHODS + GLOBAL_METHODS

_METHOD_STREAM = {name: 100 + i for i, name in enumerate(ALL_METHODS)}


class LrpUnsupportedLayer(TypeError):
    """The network contains a layer the epsilon rule cannot propagate through."""


@dataclass(frozen=True)
class MethodConfig:
    baseline: str = "zero"  # the only supported reference input
    ig_steps: int = 50
    shap_samples: int = 200  # gradient-SHAP baseline/interpolation draws
    shapley_permutations: int = 32
    lime_samples: int = 1000
    pfi_repeats: int = 5
    noise_std: float = 0.1  # gradient-SHAP baseline jitter
    lrp_epsilon: float = 1e-6
    lrp_target: str = "predicted_logit"  # or "margin"
    lime_kernel_width: float | None = None  # default 0.25 * sqrt(D)
    lime_ridge: float = 1e-3
    rectify: str = "abs"  # or "relu"
    seed: int = 0

    def __post_init__(self):
        for name in ("ig_steps", "shap_samples", "shapley_permutations", "lime_samples", "pfi_repeats"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be at least 1")
        if self.lrp_epsilon <= 0:
            raise ValueError("lrp_epsilon must be positive")
        if self.baseline != "zero":
            raise ValueError("only the zero baseline is supported")

    def to_dict(self) -> dict:
        return {
            "baseline": self.baseline,
            "ig_steps": self.ig_steps,
            "shap_samples": self.shap_samples,
            "shapley_permutations": self.shapley_permutations,
            "lime_samples": self.lime_samples,
            "pfi_repeats": self.pfi_repeats,
            "noise_std": self.noise_std,
            "lrp_epsilon": self.lrp_epsilon,
            "lrp_target": self.lrp_target,
            "lime_kernel_width": self.lime_kernel_width,
            "lime_ridge": self.lime_ridge,
            "rectify": self.rectify,
            "seed": self.seed,
        }


def _method_rng(config: MethodConfig, method: str, sample_index: int) -> np.random.Generator:
    return np.random.default_rng([config.seed, _METHOD_STREAM[method], sample_index])


def _margin_fn(model: Model, x):
    """Model margin for the class predicted at x, as a batch-callable."""
    k = int(model.predict(np.atleast_2d(x))[0])

    def margin(batch):
        logits = model.forward_logits(batch)
        return logits[:, k] - logits[:, 1 - k]

    return margin, k


# --------------------------------------------------------------------------
# gradient-based


def saliency(model: Model, x) -> np.ndarray:
    """Gradient of the predicted-class margin with respect to the input."""
    x = np.asarray(x, dtype=np.float64).ravel()
    return model.input_gradient(x, target="margin")[0]


def guided_backprop(model: Model, x) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64).ravel()
    return model.input_gradient(x, target="margin", relu_rule="guided")[0]


def deconvnet(model: Model, x) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64).ravel()
    return model.input_gradient(x, target="margin", relu_rule="deconv")[0]


def integrated_gradients(model: Model, x, config: MethodConfig) -> np.ndarray:
    """Trapezoidal path integral of gradients from the zero baseline to x."""
    x = np.asarray(x, dtype=np.float64).ravel()
    _, k = _margin_fn(model, x)
    steps = config.ig_steps
    ts = np.linspace(0.0, 1.0, steps + 1)
    points = ts[:, None] * x[None, :]
    grads = model.input_gradient(points, target="margin", class_index=k)
    weights = np.full(steps + 1, 1.0 / steps)
    weights[0] = weights[-1] = 0.5 / steps
    return (weights @ grads) * x


def gradient_shap(model: Model, x, config: MethodConfig, sample_index: int = 0) -> np.ndarray:
    """Expected gradient along jittered baselines, times (x - baseline)."""
    x = np.asarray(x, dtype=np.float64).ravel()
    _, k = _margin_fn(model, x)
    rng = _method_rng(config, "gradient_shap", sample_index)
    s = config.shap_samples
    baselines = config.noise_std * rng.standard_normal((s, x.size))
    u = rng.uniform(0.0, 1.0, size=(s, 1))
    points = baselines + u * (x[None, :] - baselines)
    grads = model.input_gradient(points, target="margin", class_index=k)
    return np.mean(grads * (x[None, :] - baselines), axis=0)


# --------------------------------------------------------------------------
# propagation-based


def _sign0(z):
    s = np.sign(z)
    s[s == 0.0] = 1.0
    return s


def lrp_epsilon(model: Model, x, config: MethodConfig) -> np.ndarray:
    """Epsilon-rule relevance propagation down to the input pixels.

    Supports dense, conv, ReLU and flatten layers; anything else raises
    :class:`LrpUnsupportedLayer`. Relevance starts at the predicted-class
    logit (or the class margin when ``lrp_target`` is ``"margin"``).
    """
    x = np.asarray(x, dtype=np.float64).ravel()[None, :]
    eps = config.lrp_epsilon
    logits, caches = model.forward_logits(x, keep_caches=True)
    k = int(logits[0].argmax())
    if config.lrp_target == "margin":
        # The margin is one more linear layer with weights +1 on the
        # predicted logit and -1 on the other.
        m = logits[0, k] - logits[0, 1 - k]
        scale = m / (m + eps * (1.0 if m >= 0 else -1.0))
        relevance = np.zeros_like(logits)
        relevance[0, k] = logits[0, k] * scale
        relevance[0, 1 - k] = -logits[0, 1 - k] * scale
    elif config.lrp_target == "predicted_logit":
        relevance = np.zeros_like(logits)
        relevance[0, k] = logits[0, k]
    else:
        raise ValueError(f"unknown lrp_target {config.lrp_target!r}")

    stack = [l for l in model.layers if not isinstance(l, Softmax)]
    for layer, cache in zip(reversed(stack), reversed(caches)):
        if isinstance(layer, ReLU):
            continue  # relevance flows through unchanged
        if isinstance(layer, Flatten):
            relevance = relevance.reshape(cache)
            continue
        if isinstance(layer, Dense):
            a = cache
            z = a @ layer.w + layer.b
            s = z + eps * _sign0(z)
            relevance = a * ((relevance / s) @ layer.w.T)
            continue
        if isinstance(layer, Conv2D):
            xp = cache
            h, w = relevance.shape[2], relevance.shape[3]
            a = xp[:, :, :h, :w]
            z, _ = layer.forward(a)
            s = z + eps * _sign0(z)
            c = layer.backward(relevance / s, xp)
            relevance = a * c
            continue
        raise LrpUnsupportedLayer(f"epsilon rule cannot pass through {layer.kind!r}")
    return relevance.reshape(-1)


# --------------------------------------------------------------------------
# perturbation-based


def lime(model: Model, x, config: MethodConfig, sample_index: int = 0) -> np.ndarray:
    """Weighted ridge surrogate over random pixel keep/drop masks.

    Masked pixels are set to the zero baseline; mask vectors are weighted by
    an exponential kernel on the Hamming distance to the all-keep mask, and
    the ridge coefficients over mask bits are the importances.
    """
    x = np.asarray(x, dtype=np.float64).ravel()
    d = x.size
    margin, _ = _margin_fn(model, x)
    rng = _method_rng(config, "lime", sample_index)
    z = rng.integers(0, 2, size=(config.lime_samples, d)).astype(np.float64)
    y = margin(z * x[None, :])
    kernel_width = config.lime_kernel_width or 0.25 * np.sqrt(d)
    hamming = d - z.sum(axis=1)
    weights = np.exp(-hamming / kernel_width**2)

    # Weighted ridge with unpenalized intercept.
    zw = np.concatenate([z, np.ones((len(z), 1))], axis=1)
    a = (zw * weights[:, None]).T @ zw
    b = (zw * weights[:, None]).T @ y
    lam = config.lime_ridge
    penalty = np.ones(d + 1)
    penalty[-1] = 0.0
    for _ in range(8):
        try:
            low = cholesky(a + lam * np.diag(penalty))
            coef = solve_lower(low.T[::-1, ::-1], solve_lower(low, b)[::-1])[::-1]
            return coef[:-1]
        except NotSPDError:
            lam *= 10.0
            warnings.warn(f"singular ridge system in lime; raising ridge to {lam:g}")
    raise NotSPDError("lime ridge system stayed singular")


def shapley_sampling(model: Model, x, config: MethodConfig, sample_index: int = 0) -> np.ndarray:
    """Shapley value estimate by averaging permutation marginal contributions.

    Features enter in random order, flipping from the zero baseline to their
    actual value; each feature is credited with the change in the predicted
    class margin it causes, averaged over permutations.
    """
    x = np.asarray(x, dtype=np.float64).ravel()
    d = x.size
    margin, _ = _margin_fn(model, x)
    rng = _method_rng(config, "shapley_sampling", sample_index)
    total = np.zeros(d)
    for _ in range(config.shapley_permutations):
        order = rng.permutation(d)
        masks = np.zeros((d + 1, d))
        active = np.zeros(d)
        for step, j in enumerate(order):
            active[j] = 1.0
            masks[step + 1] = active
        values = margin(masks * x[None, :])
        total[order] += np.diff(values)
    return total / config.shapley_permutations


def pfi(model: Model, test_pixels, test_labels, config: MethodConfig) -> np.ndarray:
    """Permutation feature importance: mean accuracy drop per shuffled feature.

    One global map per (model, test set); repeated shuffles are averaged.
    """
    x = np.asarray(test_pixels, dtype=np.float64)
    y = np.asarray(test_labels)
    if x.shape[0] < 2:
        raise ValueError("pfi needs at least two test samples")
    base = model.accuracy(x, y)
    d = x.shape[1]
    drops = np.zeros(d)
    for j in range(d):
        rng = _method_rng(config, "pfi", j)
        acc = 0.0
        for _ in range(config.pfi_repeats):
            shuffled = x.copy()
            shuffled[:, j] = x[rng.permutation(x.shape[0]), j]
            acc += model.accuracy(shuffled, y)
        drops[j] = base - acc / config.pfi_repeats
    return drops


# --------------------------------------------------------------------------
# model-ignorant baselines


_SOBEL_X = np.array([[-1.0, 0.0, 1.0], [-2.0, 0.0, 2.0], [-1.0, 0.0, 1.0]])
_SOBEL_Y = _SOBEL_X.T
_LAPLACE = np.array([[0.0, 1.0, 0.0], [1.0, -4.0, 1.0], [0.0, 1.0, 0.0]])


def _conv3x3_reflect(img, kernel):
    # Same symmetric boundary extension as the dataset smoothing filter.
    h, w = img.shape
    rows = _mirror_index(np.arange(-1, h + 1), h)
    cols = _mirror_index(np.arange(-1, w + 1), w)
    padded = img[np.ix_(rows, cols)]
    out = np.zeros_like(img)
    for di in range(3):
        for dj in range(3):
            out += kernel[di, dj] * padded[di : di + h, dj : dj + w]
    return out


def sobel_map(image) -> np.ndarray:
    """Gradient magnitude from the two standard 3x3 Sobel kernels."""
    img = np.asarray(image, dtype=np.float64)
    gx = _conv3x3_reflect(img, _SOBEL_X)
    gy = _conv3x3_reflect(img, _SOBEL_Y)
    return np.sqrt(gx**2 + gy**2)


def laplace_map(image) -> np.ndarray:
    """Response of the 3x3 symmetric Laplace kernel."""
    return _conv3x3_reflect(np.asarray(image, dtype=np.float64), _LAPLACE)


def random_uniform_map(shape, config: MethodConfig, sample_index: int = 0) -> np.ndarray:
    rng = _method_rng(config, "random_uniform", sample_index)
    return rng.uniform(0.0, 1.0, size=shape)


def rectified_input_map(image, config: MethodConfig) -> np.ndarray:
    img = np.asarray(image, dtype=np.float64)
    return np.abs(img) if config.rectify == "abs" else np.maximum(img, 0.0)


def baseline_maps(image, config: MethodConfig, sample_index: int = 0) -> dict:
    """All four model-ignorant reference maps for one image."""
    img = np.asarray(image, dtype=np.float64)
    return {
        "sobel": sobel_map(img),
        "laplace": laplace_map(img),
        "random_uniform": random_uniform_map(img.shape, config, sample_index),
        "rectified_input": rectified_input_map(img, config),
    }


# --------------------------------------------------------------------------
# batch driver


def explain_batch(
    model: Model,
    pixels,
    method: str,
    config: MethodConfig,
    sample_indices=None,
    height: int | None = None,
    width: int | None = None,
    test_labels=None,
) -> np.ndarray:
    """Attribution maps for a batch of flat samples, shaped (n, H, W)."""
    x = np.atleast_2d(np.asarray(pixels, dtype=np.float64))
    n, d = x.shape
    if height is None or width is None:
        side = int(round(np.sqrt(d)))
        height = height or side
        width = width or side
    if sample_indices is None:
        sample_indices = np.arange(n)

    if method == "pfi":
        if test_labels is None:
            raise ValueError("pfi needs test labels")
        global_map = pfi(model, x, test_labels, config)
        return np.tile(global_map.reshape(1, height, width), (n, 1, 1))

    maps = np.zeros((n, d))
    for row, idx in enumerate(sample_indices):
        xi = x[row]
        if method == "saliency":
            maps[row] = saliency(model, xi)
        elif method == "integrated_gradients":
            maps[row] = integrated_gradients(model, xi, config)
        elif method == "gradient_shap":
            maps[row] = gradient_shap(model, xi, config, sample_index=int(idx))
        elif method == "guided_backprop":
            maps[row] = guided_backprop(model, xi)
        elif method == "deconvnet":
            maps[row] = deconvnet(model, xi)
        elif method == "lrp_epsilon":
            maps[row] = lrp_epsilon(model, xi, config)
        elif method == "lime":
            maps[row] = lime(model, xi, config, sample_index=int(idx))
        elif method == "shapley_sampling":
            maps[row] = shapley_sampling(model, xi, config, sample_index=int(idx))
        elif method == "sobel":
            maps[row] = sobel_map(xi.reshape(height, width)).ravel()
        elif method == "laplace":
            maps[row] = laplace_map(xi.reshape(height, width)).ravel()
        elif method == "random_uniform":
            maps[row] = random_uniform_map((height, width), config, sample_index=int(idx)).ravel()
        elif method == "rectified_input":
            maps[row] = rectified_input_map(xi.reshape(height, width), config).ravel()
        else:
            raise ValueError(f"unknown attribution method {method!r}")
    return maps.reshape(n, height, width)
