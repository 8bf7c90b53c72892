"""Per-keypoint Gaussian-mixture density models and recovery gradients.

Densities and responsibilities are computed in log space with log-sum-exp;
the linear-scale density is exposed for thresholding and may underflow to
zero far from the data, which is why recovery directions are always taken
from the log-density gradient.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass
from typing import NamedTuple

import numpy as np
from sklearn.base import BaseEstimator
from sklearn.exceptions import NotFittedError

_LOG_2PI = math.log(2.0 * math.pi)
_STATIONARY_TOL = 1e-12


@dataclass(frozen=True)
class EmConfig:
    """Expectation-Maximization settings for a single mixture fit."""

    tol: float = 1e-7          # stop when the mean log-likelihood gain drops below
    max_iter: int = 300
    n_init: int = 8            # k-means++ restarts, best final likelihood wins
    reg_floor: float | None = None  # None: 1e-6 * mean data variance (1e-6 floor)
    seed: int = 0

    def __post_init__(self):
        if self.tol <= 0 or self.max_iter < 1 or self.n_init < 1:
            raise ValueError("invalid EM configuration")


class FitResult(NamedTuple):
    loglik_trace: list[float]  # mean log-likelihood after each accepted iteration
    n_iter: int
    seed: int
    reg: float
    restart_logliks: list[float]


class GaussianMixture2:
    """Weighted sum of full-covariance 2-D Gaussians."""

    def __init__(self, weights, means, covs):
        weights = np.asarray(weights, dtype=float)
        means = np.asarray(means, dtype=float)
        covs = np.asarray(covs, dtype=float)
        m = weights.shape[0]
        if means.shape != (m, 2) or covs.shape != (m, 2, 2):
            raise ValueError("inconsistent mixture shapes")
        if np.any(weights <= 0) or abs(weights.sum() - 1.0) > 1e-9:
            raise ValueError("weights must be positive and sum to 1")
        self.weights = weights / weights.sum()
        self.means = means
        self.covs = covs
        # Cholesky factors double as the SPD check
        try:
            self._chol = np.linalg.cholesky(covs)
        except np.linalg.LinAlgError as e:
            raise ValueError("covariances must be positive definite") from e
        self._inv_covs = np.stack([np.linalg.inv(c) for c in covs])
        logdets = 2.0 * np.log(np.diagonal(self._chol, axis1=1, axis2=2)).sum(axis=1)
        self._log_norm = -_LOG_2PI - 0.5 * logdets
        self._log_weights = np.log(self.weights)

    @property
    def n_components(self) -> int:
        return self.weights.shape[0]

    def component_logpdf(self, x) -> np.ndarray:
        """Per-component log N(x; mu_m, Sigma_m); shape (..., M)."""
        pts = np.atleast_2d(np.asarray(x, dtype=float))
        diff = pts[:, None, :] - self.means[None, :, :]  # (N, M, 2)
        # mahalanobis via the inverse (2x2, explicitly formed)
        maha = np.einsum("nmi,mij,nmj->nm", diff, self._inv_covs, diff)
        out = self._log_norm[None, :] - 0.5 * maha
        return out if np.asarray(x).ndim > 1 else out[0]

    def logpdf(self, x):
        lp = self.component_logpdf(x) + self._log_weights
        m = np.max(lp, axis=-1, keepdims=True)
        out = np.squeeze(m, -1) + np.log(np.sum(np.exp(lp - m), axis=-1))
        return float(out) if out.ndim == 0 else out

    def pdf(self, x):
        """Linear-scale mixture density; may underflow to 0 in the far field."""
        out = np.exp(self.logpdf(x))
        return float(out) if np.ndim(out) == 0 else out

    def grad(self, x) -> np.ndarray:
        """Analytic density gradient: sum_m w_m N_m(x) Sigma_m^-1 (mu_m - x)."""
        x = np.asarray(x, dtype=float)
        lp = self.component_logpdf(x) + self._log_weights  # (M,)
        pull = np.einsum("mij,mj->mi", self._inv_covs, self.means - x[None, :])
        return np.sum(np.exp(lp)[:, None] * pull, axis=0)

    def grad_log(self, x) -> np.ndarray:
        """Gradient of log density, computed without leaving log space.

        Parallel to :meth:`grad` wherever the density is representable, and
        still well-defined hundreds of sigma away where ``pdf`` underflows.
        """
        x = np.asarray(x, dtype=float)
        lp = self.component_logpdf(x) + self._log_weights
        r = np.exp(lp - (np.max(lp) + np.log(np.sum(np.exp(lp - np.max(lp))))))
        pull = np.einsum("mij,mj->mi", self._inv_covs, self.means - x[None, :])
        return np.sum(r[:, None] * pull, axis=0)

    def to_dict(self) -> dict:
        return {
            "weights": self.weights.tolist(),
            "means": self.means.tolist(),
            "covs": self.covs.tolist(),
        }

    @classmethod
    def from_dict(cls, d: dict) -> "GaussianMixture2":
        return cls(d["weights"], d["means"], d["covs"])


# ---------------------------------------------------------------------------
# EM fitting


def _validate_points(points) -> np.ndarray:
    x = np.asarray(points, dtype=float)
    if x.ndim != 2 or x.shape[1] != 2:
        raise ValueError(f"points must have shape (N, 2), got {x.shape}")
    if not np.all(np.isfinite(x)):
        raise ValueError("points must be finite")
    return x


def _resolve_reg(x: np.ndarray, reg_floor: float | None) -> float:
    if reg_floor is not None:
        if reg_floor <= 0:
            raise ValueError("reg_floor must be positive")
        return float(reg_floor)
    var = float(np.mean(np.var(x, axis=0)))
    return 1e-6 * var if var > 0 else 1e-6


def _kmeanspp_init(x: np.ndarray, m: int, rng: np.random.Generator, reg: float):
    n = x.shape[0]
    centers = np.empty((m, 2))
    centers[0] = x[rng.integers(n)]
    d2 = np.sum((x - centers[0]) ** 2, axis=1)
    for j in range(1, m):
        total = d2.sum()
        if total <= 0:
            centers[j] = x[rng.integers(n)]
        else:
            centers[j] = x[rng.choice(n, p=d2 / total)]
        d2 = np.minimum(d2, np.sum((x - centers[j]) ** 2, axis=1))

    # a few Lloyd iterations to settle the seeds
    labels = None
    for _ in range(20):
        d = np.sum((x[:, None, :] - centers[None, :, :]) ** 2, axis=2)
        new_labels = np.argmin(d, axis=1)
        if labels is not None and np.array_equal(new_labels, labels):
            break
        labels = new_labels
        for j in range(m):
            sel = x[labels == j]
            if sel.shape[0] == 0:
                centers[j] = x[int(np.argmax(d.min(axis=1)))]
            else:
                centers[j] = sel.mean(axis=0)

    weights = np.empty(m)
    covs = np.empty((m, 2, 2))
    global_var = np.var(x, axis=0).mean()
    for j in range(m):
        sel = x[labels == j]
        weights[j] = max(sel.shape[0], 1) / n
        if sel.shape[0] >= 2:
            diff = sel - sel.mean(axis=0)
            cov = diff.T @ diff / sel.shape[0]
        else:
            cov = np.eye(2) * max(global_var, reg)
        covs[j] = 0.5 * (cov + cov.T) + reg * np.eye(2)
    weights = weights / weights.sum()
    return weights, centers, covs


def _em_run(x, weights, means, covs, tol, max_iter, reg):
    n = x.shape[0]
    m = weights.shape[0]
    trace: list[float] = []
    prev_ll = -np.inf
    prev_params = (weights, means, covs)
    for it in range(max_iter):
        gmm = GaussianMixture2(weights, means, covs)
        lp = gmm.component_logpdf(x) + gmm._log_weights  # (N, M)
        mx = lp.max(axis=1, keepdims=True)
        lse = mx[:, 0] + np.log(np.sum(np.exp(lp - mx), axis=1))
        ll = float(np.mean(lse))
        if ll - prev_ll < tol:
            if ll < prev_ll:
                weights, means, covs = prev_params  # keep the better params
            else:
                trace.append(ll)
            break
        trace.append(ll)
        prev_ll = ll
        prev_params = (weights, means, covs)

        r = np.exp(lp - lse[:, None])  # responsibilities (N, M)
        nk = np.maximum(r.sum(axis=0), 1e-12)
        weights = nk / nk.sum()
        means = (r.T @ x) / nk[:, None]
        covs = np.empty((m, 2, 2))
        for j in range(m):
            diff = x - means[j]
            cov = (r[:, j][:, None] * diff).T @ diff / nk[j]
            covs[j] = 0.5 * (cov + cov.T) + reg * np.eye(2)
    return weights, means, covs, trace


def fit_em(points, n_components: int, cfg: EmConfig = EmConfig()) -> tuple[GaussianMixture2, FitResult]:
    """Fit a 2-D GMM by EM from k-means++ starts.

    Covariances get ``reg * I`` added every M-step; the run stops at the first
    iteration whose mean log-likelihood gain is below ``cfg.tol`` (keeping the
    best parameters), so the reported trace is non-decreasing. The best of
    ``cfg.n_init`` restarts by final log-likelihood wins.
    """
    x = _validate_points(points)
    if n_components < 1:
        raise ValueError("n_components must be at least 1")
    if x.shape[0] < n_components:
        raise ValueError(
            f"need at least {n_components} points, got {x.shape[0]}"
        )
    reg = _resolve_reg(x, cfg.reg_floor)
    best = None
    restart_lls: list[float] = []
    for child in np.random.SeedSequence(cfg.seed).spawn(cfg.n_init):
        rng = np.random.default_rng(child)
        w0, mu0, cov0 = _kmeanspp_init(x, n_components, rng, reg)
        w, mu, cov, trace = _em_run(x, w0, mu0, cov0, cfg.tol, cfg.max_iter, reg)
        final = trace[-1] if trace else -np.inf
        restart_lls.append(final)
        if best is None or final > best[0]:
            best = (final, w, mu, cov, trace)
    _, w, mu, cov, trace = best
    gmm = GaussianMixture2(w, mu, cov)
    info = FitResult(
        loglik_trace=trace,
        n_iter=len(trace),
        seed=cfg.seed,
        reg=reg,
        restart_logliks=restart_lls,
    )
    return gmm, info


def bic_score(gmm: GaussianMixture2, x: np.ndarray) -> float:
    n = x.shape[0]
    ll = float(np.sum(gmm.logpdf(x)))
    n_params = 6 * gmm.n_components - 1
    return -2.0 * ll + n_params * math.log(n)


def fit_em_bic(points, cfg: EmConfig = EmConfig(), m_range=range(2, 11)):
    """Fit with the number of components selected by BIC over ``m_range``."""
    x = _validate_points(points)
    best = None
    for m in m_range:
        if x.shape[0] < m:
            continue
        gmm, info = fit_em(x, m, cfg)
        score = bic_score(gmm, x)
        if best is None or score < best[0]:
            best = (score, gmm, info)
    if best is None:
        raise ValueError("no admissible component count for this dataset")
    return best[1], best[2]


# ---------------------------------------------------------------------------
# keypoint manifold


class RecoveryTuple(NamedTuple):
    delta: np.ndarray  # mean shaped gradient over keypoints, (2,)
    density: float     # mean linear density over keypoints


class KeypointManifold(BaseEstimator):
    """One GMM per keypoint index, plus the recovery-gradient shaping.

    The shaped gradient points along the log-density gradient with magnitude
    ``exp((mag_ref - g) / mag_scale)`` where ``g`` is the linear-scale
    gradient norm: maximal (and constant) in the far field where the density
    underflows, shrinking as the keypoint nears the data. ``calibrate`` sets
    ``mag_ref`` to the median training gradient norm and the OOD threshold to
    the 5th percentile of training frame densities.
    """

    def __init__(
        self,
        n_components: int = 5,
        tol: float = 1e-7,
        max_iter: int = 300,
        n_init: int = 8,
        reg_floor: float | None = None,
        mag_scale: float | None = None,
        select_bic: bool = False,
        seed: int = 0,
    ):
        self.n_components = n_components
        self.tol = tol
        self.max_iter = max_iter
        self.n_init = n_init
        self.reg_floor = reg_floor
        self.mag_scale = mag_scale
        self.select_bic = select_bic
        self.seed = seed

    # -- fitting -----------------------------------------------------------

    def _em_config(self) -> EmConfig:
        return EmConfig(
            tol=self.tol,
            max_iter=self.max_iter,
            n_init=self.n_init,
            reg_floor=self.reg_floor,
            seed=self.seed,
        )

    def fit(self, frames):
        """Fit per-keypoint mixtures from keypoint frames of shape (F, n, 2)."""
        frames = self._validate_frames(frames)
        cfg = self._em_config()
        self.n_keypoints_ = frames.shape[1]
        self.mixtures_ = []
        self.fit_info_ = []
        for k in range(self.n_keypoints_):
            pts = frames[:, k, :]
            if self.select_bic:
                gmm, info = fit_em_bic(pts, cfg)
            else:
                gmm, info = fit_em(pts, self.n_components, cfg)
            self.mixtures_.append(gmm)
            self.fit_info_.append(info)
        return self

    @staticmethod
    def _validate_frames(frames) -> np.ndarray:
        arr = np.asarray(frames, dtype=float)
        if arr.ndim != 3 or arr.shape[2] != 2 or arr.shape[0] < 1:
            raise ValueError(f"frames must have shape (F, n, 2), got {arr.shape}")
        if not np.all(np.isfinite(arr)):
            raise ValueError("frames must be finite")
        return arr

    def _check_fitted(self):
        if not hasattr(self, "mixtures_"):
            raise NotFittedError("KeypointManifold is not fitted")

    def _check_calibrated(self):
        self._check_fitted()
        if not hasattr(self, "mag_ref_"):
            raise NotFittedError("KeypointManifold is not calibrated")

    # -- per-keypoint queries ------------------------------------------------

    def density(self, k: int, x) -> float:
        self._check_fitted()
        return self.mixtures_[k].pdf(x)

    def grad(self, k: int, x) -> np.ndarray:
        self._check_fitted()
        return self.mixtures_[k].grad(x)

    def grad_log(self, k: int, x) -> np.ndarray:
        self._check_fitted()
        return self.mixtures_[k].grad_log(x)

    def recovery_grad(self, k: int, x) -> np.ndarray:
        """Shaped gradient: log-gradient direction, negative-exponential magnitude."""
        self._check_calibrated()
        gl = self.mixtures_[k].grad_log(x)
        norm_gl = float(np.linalg.norm(gl))
        if norm_gl < _STATIONARY_TOL:
            return np.zeros(2)
        g_lin = float(np.linalg.norm(self.mixtures_[k].grad(x)))
        gain = math.exp((self.mag_ref_ - g_lin) / self.mag_scale_)
        return gain * gl / norm_gl

    # -- frame-level queries ---------------------------------------------------

    def frame_density(self, keypoints) -> float:
        """Mean linear density over the keypoints of one frame."""
        self._check_fitted()
        kps = np.asarray(keypoints, dtype=float)
        return float(
            np.mean([self.mixtures_[k].pdf(kps[k]) for k in range(self.n_keypoints_)])
        )

    def recovery_tuple(self, keypoints) -> RecoveryTuple:
        self._check_calibrated()
        kps = np.asarray(keypoints, dtype=float)
        if kps.shape != (self.n_keypoints_, 2):
            raise ValueError(f"expected ({self.n_keypoints_}, 2) keypoints, got {kps.shape}")
        grads = [self.recovery_grad(k, kps[k]) for k in range(self.n_keypoints_)]
        dens = [self.mixtures_[k].pdf(kps[k]) for k in range(self.n_keypoints_)]
        return RecoveryTuple(delta=np.mean(grads, axis=0), density=float(np.mean(dens)))

    def is_ood(self, keypoints) -> bool:
        self._check_calibrated()
        return self.frame_density(keypoints) < self.density_threshold_

    # -- calibration -------------------------------------------------------

    def calibrate(
        self,
        frames,
        mag_ref: float | None = None,
        mag_scale: float | None = None,
        density_threshold: float | None = None,
    ):
        """Set the gradient-shaping reference and the OOD density threshold.

        Defaults: ``mag_ref`` is the median linear gradient norm over all
        training keypoints; ``density_threshold`` the 5th percentile of
        per-frame mean densities; ``mag_scale`` stays at the configured value
        (falling back to ``mag_ref`` so the shaping scale tracks the data).
        """
        self._check_fitted()
        frames = self._validate_frames(frames)
        if frames.shape[1] != self.n_keypoints_:
            raise ValueError("calibration frames disagree with fitted keypoint count")

        if mag_ref is None:
            norms = []
            for k in range(self.n_keypoints_):
                g = np.stack([self.mixtures_[k].grad(p) for p in frames[:, k, :]])
                norms.append(np.linalg.norm(g, axis=1))
            mag_ref = float(np.median(np.concatenate(norms)))
        self.mag_ref_ = float(mag_ref)

        scale = mag_scale if mag_scale is not None else self.mag_scale
        self.mag_scale_ = float(scale) if scale is not None else max(self.mag_ref_, 1e-300)
        if self.mag_scale_ <= 0:
            raise ValueError("mag_scale must be positive")

        if density_threshold is None:
            dens = [self.frame_density(f) for f in frames]
            density_threshold = float(np.percentile(dens, 5.0))
        self.density_threshold_ = float(density_threshold)
        if self.density_threshold_ <= 0:
            raise ValueError("density_threshold must be positive")
        return self

    # -- persistence ---------------------------------------------------------

    SCHEMA = "keypoint-manifold"
    SCHEMA_VERSION = 1

    def save(self, path) -> None:
        self._check_fitted()
        doc = {
            "schema": self.SCHEMA,
            "version": self.SCHEMA_VERSION,
            "params": self.get_params(),
            "n_keypoints": self.n_keypoints_,
            "mixtures": [g.to_dict() for g in self.mixtures_],
            "fit_info": [
                {
                    "loglik_trace": info.loglik_trace,
                    "n_iter": info.n_iter,
                    "seed": info.seed,
                    "reg": info.reg,
                    "restart_logliks": info.restart_logliks,
                }
                for info in self.fit_info_
            ],
        }
        for name in ("mag_ref_", "mag_scale_", "density_threshold_"):
            if hasattr(self, name):
                doc[name.rstrip("_")] = getattr(self, name)
        with open(path, "w") as f:
            json.dump(doc, f, sort_keys=True)
            f.write("\n")

    @classmethod
    def load(cls, path) -> "KeypointManifold":
        with open(path, "r") as f:
            doc = json.load(f)
        if doc.get("schema") != cls.SCHEMA or doc.get("version") != cls.SCHEMA_VERSION:
            raise ValueError(f"{path}: not a keypoint-manifold file")
        model = cls(**doc["params"])
        model.n_keypoints_ = doc["n_keypoints"]
        model.mixtures_ = [GaussianMixture2.from_dict(d) for d in doc["mixtures"]]
        model.fit_info_ = [
            FitResult(
                loglik_trace=d["loglik_trace"],
                n_iter=d["n_iter"],
                seed=d["seed"],
                reg=d["reg"],
                restart_logliks=d["restart_logliks"],
            )
            for d in doc["fit_info"]
        ]
        for name in ("mag_ref", "mag_scale", "density_threshold"):
            if name in doc:
                setattr(model, name + "_", doc[name])
        return model
