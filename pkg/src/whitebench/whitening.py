"""Five decorrelation transforms fitted from data or straight from a covariance.

All methods share the same shape: estimate first and second moments on the
training split, derive a matrix ``W`` from the (regularized) covariance, and
map samples through ``z = W (x - mean)``. The matrix-level constructors are
exposed separately because the 2-D theory checks need transforms built from
an exact analytic covariance rather than from samples.

Methods
-------
sphering            inverse square root of the covariance
sym_orth            scaled-scatter symmetric orthogonalization, then
                    per-feature standardization of the output
osp                 inverse square root of the correlation matrix composed
                    with per-feature standardization
cholesky            inverse lower Cholesky factor, order-dependent
partial_regression  per-feature regression residuals scaled to unit variance
none                identity (centering only is skipped too)
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import serialize
from .linalg import (
    NonFiniteError,
    cholesky,
    inv_sqrt,
    lower_inverse,
    pseudo_inverse,
    regularize_spd,
)

METHODS = ("none", "sphering", "sym_orth", "osp", "cholesky", "partial_regression")


def moments(x):
    """Mean vector and (ddof=1, exactly symmetric) covariance of rows of x."""
    x = np.asarray(x, dtype=np.float64)
    if x.ndim != 2:
        raise ValueError(f"expected a 2-D sample matrix, got shape {x.shape}")
    if not np.all(np.isfinite(x)):
        raise NonFiniteError("sample matrix has non-finite entries")
    n = x.shape[0]
    if n < 2:
        raise ValueError("need at least two samples to estimate a covariance")
    mean = x.mean(axis=0)
    xc = x - mean
    cov = xc.T @ xc / (n - 1)
    return mean, 0.5 * (cov + cov.T)


def _safe_stds(cov):
    var = np.diag(cov).copy()
    bad = var <= 1e-16
    if np.any(bad):
        warnings.warn(f"{int(bad.sum())} feature(s) have (near-)zero variance; regularizing")
        var[bad] = np.diag(regularize_spd(cov))[bad]
    return np.sqrt(var)


def sphering_matrix(cov) -> np.ndarray:
    return inv_sqrt(regularize_spd(cov))


def sym_orth_matrix(cov, n_samples: int) -> np.ndarray:
    """Symmetric orthogonalization from the unnormalized scatter matrix.

    The scatter ``(n - 1) * cov`` is scaled on both sides by the square roots
    of its own diagonal, the inverse square root of that scaled matrix is
    conjugated back, and the rows are finally standardized so every output
    feature has unit variance. The ``n - 1`` factors cancel exactly; they are
    kept so the construction mirrors its documentation.
    """
    if n_samples < 2:
        raise ValueError("n_samples must be at least 2")
    cov = regularize_spd(cov)
    scatter = (n_samples - 1) * cov
    d_scaled = np.sqrt(np.diag(scatter))
    bad = d_scaled <= 1e-16
    if np.any(bad):
        warnings.warn(f"{int(bad.sum())} feature(s) have (near-)zero variance; regularizing")
        d_scaled[bad] = np.sqrt(np.diag(regularize_spd(scatter))[bad])
    s_scaled = regularize_spd(d_scaled[:, None] * scatter * d_scaled[None, :])
    core = d_scaled[:, None] * inv_sqrt(s_scaled) * d_scaled[None, :]
    out_std = np.sqrt(np.diag(core @ cov @ core.T))
    return core / out_std[:, None]


def osp_matrix(cov) -> np.ndarray:
    """Correlation-matrix whitening composed with per-feature standardization."""
    sd = _safe_stds(cov)
    corr = regularize_spd(cov / np.outer(sd, sd))
    return inv_sqrt(corr) / sd[None, :]


def cholesky_matrix(cov, ordering=None) -> np.ndarray:
    """Inverse Cholesky factor, expressed on the original feature order.

    ``ordering`` permutes the features before factorization; the first
    feature in the ordering is only rescaled, each later one is
    orthogonalized against its predecessors. Default is the natural
    (row-major pixel) order.
    """
    cov = np.asarray(cov, dtype=np.float64)
    d = cov.shape[0]
    if ordering is None:
        perm = np.arange(d)
    else:
        perm = np.asarray(ordering, dtype=int)
        if sorted(perm.tolist()) != list(range(d)):
            raise ValueError("ordering must be a permutation of all feature indices")
    cov_p = regularize_spd(cov[np.ix_(perm, perm)])
    w_p = lower_inverse(cholesky(cov_p))
    w = np.zeros_like(cov)
    w[np.ix_(perm, perm)] = w_p
    return w


def partial_regression_matrix(cov) -> np.ndarray:
    """Each output feature is that feature's regression residual, unit scaled.

    Row ``d`` encodes (e_d - beta_d on the others) / std(residual_d), with the
    regression weights obtained through a pseudo-inverse so rank-deficient
    covariances still yield a transform.
    """
    cov = regularize_spd(cov)
    d = cov.shape[0]
    w = np.zeros_like(cov)
    for j in range(d):
        others = [k for k in range(d) if k != j]
        beta = pseudo_inverse(cov[np.ix_(others, others)]) @ cov[others, j]
        resid_var = cov[j, j] - beta @ cov[others, j]
        if resid_var <= 1e-16:
            warnings.warn(f"feature {j} is fully explained by the others; regularizing")
            resid_var = 1e-16
        scale = 1.0 / np.sqrt(resid_var)
        w[j, j] = scale
        w[j, others] = -beta * scale
    return w


def matrix_for(method: str, cov, n_samples: int | None = None, ordering=None) -> np.ndarray:
    """Dispatch to the matrix constructor for ``method``."""
    if method == "none":
        return np.eye(np.asarray(cov).shape[0])
    if method == "sphering":
        return sphering_matrix(cov)
    if method == "sym_orth":
        if n_samples is None:
            raise ValueError("sym_orth needs the sample count")
        return sym_orth_matrix(cov, n_samples)
    if method == "osp":
        return osp_matrix(cov)
    if method == "cholesky":
        return cholesky_matrix(cov, ordering)
    if method == "partial_regression":
        return partial_regression_matrix(cov)
    raise ValueError(f"unknown whitening method {method!r}")


@dataclass(frozen=True)
class WhiteningTransform:
    """A fitted linear decorrelation map ``z = matrix @ (x - mean)``."""

    method: str
    mean: np.ndarray
    matrix: np.ndarray
    ordering: tuple | None = None
    fitted_n: int | None = None

    @property
    def dim(self) -> int:
        return self.matrix.shape[0]

    def apply(self, batch, rescale: bool = True) -> np.ndarray:
        """Transform rows of ``batch``; optionally rescale each row to [-1, 1].

        The per-sample max-abs rescale matches the dataset pipeline; pass
        ``rescale=False`` for raw transforms (theory checks, covariance
        diagnostics).
        """
        x = np.asarray(batch, dtype=np.float64)
        squeeze = x.ndim == 1
        if squeeze:
            x = x[None, :]
        if x.shape[1] != self.dim:
            raise ValueError(f"batch has {x.shape[1]} features, transform expects {self.dim}")
        z = (x - self.mean) @ self.matrix.T
        if rescale:
            peak = np.abs(z).max(axis=1, keepdims=True)
            np.divide(z, peak, out=z, where=peak > 0)
        return z[0] if squeeze else z

    def save(self, path) -> None:
        path = Path(path)
        payload = path.with_suffix(".bin")
        layout = serialize.write_payload(
            payload, [("mean", self.mean, "f8"), ("matrix", self.matrix, "f8")]
        )
        serialize.dump_json(
            {
                "format_version": serialize.FORMAT_VERSION,
                "kind": "whitening_transform",
                "method": self.method,
                "dim": self.dim,
                "ordering": list(self.ordering) if self.ordering is not None else None,
                "fitted_n": self.fitted_n,
                "payload": payload.name,
                "layout": layout,
            },
            path,
        )

    @classmethod
    def load(cls, path) -> "WhiteningTransform":
        path = Path(path)
        meta = serialize.load_json(path)
        arrays = serialize.read_payload(path.parent / meta["payload"], meta["layout"])
        ordering = meta.get("ordering")
        return cls(
            method=meta["method"],
            mean=arrays["mean"],
            matrix=arrays["matrix"],
            ordering=tuple(ordering) if ordering is not None else None,
            fitted_n=meta.get("fitted_n"),
        )


def fit(method: str, train_pixels, ordering=None) -> WhiteningTransform:
    """Fit a whitening transform of ``method`` on a training sample matrix."""
    x = np.asarray(train_pixels, dtype=np.float64)
    if method == "none":
        d = x.shape[1]
        return WhiteningTransform("none", np.zeros(d), np.eye(d))
    mean, cov = moments(x)
    matrix = matrix_for(method, cov, n_samples=x.shape[0], ordering=ordering)
    return WhiteningTransform(
        method,
        mean,
        matrix,
        ordering=tuple(ordering) if ordering is not None else None,
        fitted_n=x.shape[0],
    )


def fit_sphering(train_pixels) -> WhiteningTransform:
    return fit("sphering", train_pixels)


def fit_sym_orth(train_pixels) -> WhiteningTransform:
    return fit("sym_orth", train_pixels)


def fit_osp(train_pixels) -> WhiteningTransform:
    return fit("osp", train_pixels)


def fit_cholesky(train_pixels, ordering=None) -> WhiteningTransform:
    return fit("cholesky", train_pixels, ordering=ordering)


def fit_partial_regression(train_pixels) -> WhiteningTransform:
    return fit("partial_regression", train_pixels)


@dataclass(frozen=True)
class WhitenedDataset:
    """A dataset pushed through a fitted transform, rescaled per sample."""

    source_config: "object"
    transform: WhiteningTransform
    pixels: np.ndarray
    labels: np.ndarray
    masks: np.ndarray
    split_indices: tuple = field(repr=False)

    @property
    def method(self) -> str:
        return self.transform.method

    @property
    def n_samples(self) -> int:
        return self.pixels.shape[0]

    def flat_pixels(self) -> np.ndarray:
        return self.pixels.reshape(self.pixels.shape[0], -1)


def whiten_dataset(dataset, method: str, ordering=None) -> WhitenedDataset:
    """Fit on the train split only, then transform every sample.

    Fitting on train alone keeps the validation and test splits untouched by
    the estimated moments; they are mapped with the fitted matrix.
    """
    flat = dataset.flat_pixels()
    train_idx = dataset.split_indices[0]
    transform = fit(method, flat[train_idx], ordering=ordering)
    z = transform.apply(flat, rescale=True)
    h, w = dataset.pixels.shape[1], dataset.pixels.shape[2]
    return WhitenedDataset(
        source_config=dataset.config,
        transform=transform,
        pixels=z.reshape(-1, h, w),
        labels=dataset.labels.copy(),
        masks=dataset.masks.copy(),
        split_indices=dataset.split_indices,
    )
