"""Randomized smoothing of grid-image classifiers with Laplace noise, either
in the flow domain (noise moves mass between adjacent pixels) or directly on
pixels, plus the statistical certification pipeline: Monte Carlo voting, a
Clopper-Pearson lower bound on the top-class probability, and closed-form
certified Wasserstein radii.

Sampling is deterministic given a seeded generator and independent of the
worker count: draws are partitioned into fixed-size batches, each batch gets
its own child stream via Generator.spawn, and partial results are merged in
batch order.
"""

from __future__ import annotations

import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass

import numpy as np
from scipy.stats import beta, binomtest

from .flow_domain import (
    GridImage,
    LocalFlowPlan,
    MultiChannelImage,
    RawGrid,
    ShapeMismatchError,
    _apply_flow_values,
)
from .transport_oracle import GroundMetric

# Sentinel prediction for "not enough evidence to name a class".
ABSTAIN = -1

# Monte Carlo draws are split into batches of this size; each batch owns a
# spawned child stream, so results do not depend on how batches are
# scheduled across workers.
VOTE_BATCH = 1000

FLOW = "wasserstein_flow"
PIXEL = "laplace_pixel"
_SCHEMES = (FLOW, PIXEL)

# Certified-radius coefficients rho = c * sigma * ln(p / (1 - p)) per
# (smoothing scheme, ground metric of the Wasserstein ball).  Flow smoothing
# certifies the L1-ground radius directly; under the L2 ground every pixel
# step costs at most as much, which buys the sqrt(2) grid-diagonal factor.
# Pixel smoothing certifies an L1-pixel-norm radius first and converts via
# |x - x'|_1 <= 2 W1, a bound independent of the ground metric, hence the
# same coefficient for both grounds.
_RADIUS_COEFF = {
    (FLOW, GroundMetric.L1): 1.0 / (2.0 * math.sqrt(2.0)),
    (FLOW, GroundMetric.L2): 0.25,
    (PIXEL, GroundMetric.L2): 0.25 / math.sqrt(2.0),
    (PIXEL, GroundMetric.L1): 0.25 / math.sqrt(2.0),
}


def _check_scheme(scheme: str):
    if scheme not in _SCHEMES:
        raise ValueError(f"unknown noise scheme {scheme!r}, expected one of {_SCHEMES}")


@dataclass(frozen=True)
class NoiseSpec:
    """Smoothing noise description: scheme plus per-coordinate standard
    deviation sigma.  sigma = 0 means no noise (useful as a degenerate
    reference point; the command line rejects it)."""

    scheme: str
    sigma: float

    def __post_init__(self):
        _check_scheme(self.scheme)
        if not (self.sigma >= 0.0) or not math.isfinite(self.sigma):
            raise ValueError(f"sigma must be finite and >= 0, got {self.sigma!r}")

    @property
    def scale(self) -> float:
        """Laplace scale parameter b with standard deviation sigma."""
        return self.sigma / math.sqrt(2.0)


@dataclass(frozen=True)
class SmoothedPrediction:
    """Outcome of the abstaining smoothed classifier on one image."""

    predicted: int
    num_samples: int
    top_counts: tuple[int, int]
    p_value: float
    confidence: float


@dataclass(frozen=True)
class Certificate:
    """Certified robustness statement for one image.

    rho2 is the certified radius of the Wasserstein ball under the L2 ground
    metric; the L1-ground radius is sqrt(2) * rho2 for the flow scheme.  It
    is present exactly when p_lower > 1/2; otherwise the prediction is
    ABSTAIN and nothing is certified.
    """

    predicted: int
    p_lower: float
    rho2: float | None
    spec: NoiseSpec
    n0: int
    n: int
    alpha: float


@dataclass(frozen=True)
class CertificationRecord:
    """A certificate tied to a labeled image for aggregate statistics."""

    image_id: int | str
    label: int
    certificate: Certificate

    @property
    def correct(self) -> bool:
        return self.certificate.predicted != ABSTAIN and self.certificate.predicted == self.label


def _as_rng(rng) -> np.random.Generator:
    if isinstance(rng, np.random.Generator):
        return rng
    return np.random.default_rng(rng)


def _canonical_channels(x) -> tuple[np.ndarray, tuple[int, ...]]:
    """View any accepted image type as a (C, n, m) float array plus the shape
    the classifier expects to see."""
    if isinstance(x, MultiChannelImage):
        return x.channels, x.channels.shape
    if isinstance(x, (GridImage, RawGrid)):
        return x.values[None], x.values.shape
    a = np.asarray(x, dtype=float)
    if a.ndim == 2:
        return a[None], a.shape
    if a.ndim == 3:
        return a, a.shape
    raise ShapeMismatchError(f"expected a 2-D or 3-D image, got shape {a.shape}")


def sample_flow_noise(shape: tuple[int, ...], sigma: float, rng) -> LocalFlowPlan | list[LocalFlowPlan]:
    """Draw a Laplace flow plan with per-coordinate standard deviation sigma.

    For a (C, n, m) shape, returns one independent plan per channel (noise
    never moves mass across channels).  sigma = 0 yields zero plans without
    consuming randomness.
    """
    if sigma < 0:
        raise ValueError("sigma must be >= 0")
    if len(shape) == 3:
        return [sample_flow_noise(shape[1:], sigma, rng) for _ in range(shape[0])]
    n, m = shape
    if sigma == 0.0:
        return LocalFlowPlan.zeros((n, m))
    rng = _as_rng(rng)
    b = sigma / math.sqrt(2.0)
    vert = rng.laplace(0.0, b, size=(n - 1, m))
    horiz = rng.laplace(0.0, b, size=(n, m - 1))
    return LocalFlowPlan(vert, horiz)


def perturb(x, noise, scheme: str) -> np.ndarray:
    """Apply one noise draw to an image and return the noisy pixel array.

    Flow noise is a LocalFlowPlan (or one per channel) and conserves mass;
    pixel noise is an additive array of the image's shape and does not.
    Either way pixels may go negative, so the result is a plain array in the
    input's layout.
    """
    _check_scheme(scheme)
    channels, orig_shape = _canonical_channels(x)
    if scheme == FLOW:
        plans = noise if isinstance(noise, (list, tuple)) else [noise]
        if len(plans) != channels.shape[0]:
            raise ShapeMismatchError(
                f"{len(plans)} flow plans for {channels.shape[0]} channels"
            )
        out = np.empty_like(channels)
        for k, plan in enumerate(plans):
            if plan.image_shape != channels.shape[1:]:
                raise ShapeMismatchError(
                    f"plan for {plan.image_shape} applied to channels of shape {channels.shape[1:]}"
                )
            out[k] = _apply_flow_values(channels[k], plan.vert, plan.horiz)
    else:
        noise_arr = np.asarray(noise, dtype=float)
        if noise_arr.shape != orig_shape:
            raise ShapeMismatchError(f"pixel noise shape {noise_arr.shape} != image shape {orig_shape}")
        out = channels + noise_arr.reshape(channels.shape)
    return out.reshape(orig_shape)


def _sample_increments(scheme: str, sigma: float, cshape: tuple[int, int, int], size: int,
                       rng: np.random.Generator) -> np.ndarray:
    """Batch of additive pixel increments equivalent to ``size`` noise draws.

    Flow application is linear in the plan, so a flow draw is the increment
    obtained by applying it to a zero grid; pixel noise is its own
    increment.  Returns shape (size, C, n, m).
    """
    c, n, m = cshape
    if sigma == 0.0:
        return np.zeros((size, c, n, m))
    b = sigma / math.sqrt(2.0)
    if scheme == PIXEL:
        return rng.laplace(0.0, b, size=(size, c, n, m))
    vert = rng.laplace(0.0, b, size=(size, c, n - 1, m)) if n > 1 else None
    horiz = rng.laplace(0.0, b, size=(size, c, n, m - 1)) if m > 1 else None
    inc = np.zeros((size, c, n, m))
    if vert is not None:
        inc[:, :, 1:, :] += vert
        inc[:, :, :-1, :] -= vert
    if horiz is not None:
        inc[:, :, :, 1:] += horiz
        inc[:, :, :, :-1] -= horiz
    return inc


def _batch_sizes(n: int) -> list[int]:
    sizes = [VOTE_BATCH] * (n // VOTE_BATCH)
    if n % VOTE_BATCH:
        sizes.append(n % VOTE_BATCH)
    return sizes


def _run_batches(job, streams, workers: int) -> list:
    if workers <= 1 or len(streams) <= 1:
        return [job(s) for s in streams]
    with ThreadPoolExecutor(max_workers=workers) as ex:
        return list(ex.map(job, streams))


def _vote_counts(classifier, x, spec: NoiseSpec, n: int, rng, workers: int) -> np.ndarray:
    channels, orig_shape = _canonical_channels(x)
    num_classes = classifier.num_classes
    sizes = _batch_sizes(n)
    streams = list(zip(_as_rng(rng).spawn(len(sizes)), sizes))

    def job(stream_size):
        stream, size = stream_size
        inc = _sample_increments(spec.scheme, spec.sigma, channels.shape, size, stream)
        batch = (channels[None] + inc).reshape((size,) + orig_shape)
        scores = classifier.forward_batch(batch)
        return np.bincount(np.argmax(scores, axis=1), minlength=num_classes)

    parts = _run_batches(job, streams, workers)
    return np.sum(parts, axis=0, dtype=np.int64)


def prediction_from_counts(counts, alpha: float) -> SmoothedPrediction:
    """Abstaining decision rule on a finished vote tally.

    Returns the top class only if a two-sided exact binomial test rejects
    the hypothesis that top and runner-up are equally likely; ties and weak
    majorities abstain.
    """
    counts = np.asarray(counts, dtype=np.int64)
    if counts.ndim != 1 or counts.size < 2:
        raise ValueError("counts must be a 1-D tally over at least two classes")
    if counts.sum() < 1:
        raise ValueError("empty tally")
    if not 0.0 < alpha < 1.0:
        raise ValueError(f"alpha must be in (0, 1), got {alpha!r}")
    top = int(np.argmax(counts))
    rest = counts.copy()
    rest[top] = -1
    runner = int(np.argmax(rest))
    n_top, n_run = int(counts[top]), int(counts[runner])
    p_value = float(binomtest(n_top, n_top + n_run, 0.5).pvalue)
    predicted = top + 1 if p_value <= alpha else ABSTAIN
    return SmoothedPrediction(predicted, int(counts.sum()), (n_top, n_run), p_value, 1.0 - alpha)


def smoothed_predict(classifier, x, spec: NoiseSpec, n: int = 10000, alpha: float = 0.05,
                     rng=None, workers: int = 1) -> SmoothedPrediction:
    """Predict with the smoothed classifier, abstaining unless the top class
    beats the runner-up at significance alpha (two-sided binomial test on
    their head-to-head counts)."""
    if n < 1:
        raise ValueError("need at least one sample")
    counts = _vote_counts(classifier, x, spec, n, rng, workers)
    return prediction_from_counts(counts, alpha)


def soft_smoothed_scores(classifier, x, spec: NoiseSpec, n: int = 1000,
                         rng=None, workers: int = 1) -> np.ndarray:
    """Monte Carlo estimate of the expected score vector under the noise.

    Partial sums are accumulated in batch order, so the result is
    reproducible and worker-count independent.
    """
    if n < 1:
        raise ValueError("need at least one sample")
    channels, orig_shape = _canonical_channels(x)
    sizes = _batch_sizes(n)
    streams = list(zip(_as_rng(rng).spawn(len(sizes)), sizes))

    def job(stream_size):
        stream, size = stream_size
        inc = _sample_increments(spec.scheme, spec.sigma, channels.shape, size, stream)
        batch = (channels[None] + inc).reshape((size,) + orig_shape)
        return classifier.forward_batch(batch).sum(axis=0)

    parts = _run_batches(job, streams, workers)
    total = parts[0].astype(float)
    for p in parts[1:]:
        total = total + p
    return total / n


def clopper_pearson_lower(k: int, n: int, alpha: float) -> float:
    """One-sided Clopper-Pearson lower confidence bound for a binomial
    proportion at level 1 - alpha."""
    if not isinstance(k, (int, np.integer)) or not isinstance(n, (int, np.integer)):
        raise ValueError("k and n must be integers")
    if n < 1 or not 0 <= k <= n:
        raise ValueError(f"need 0 <= k <= n with n >= 1, got k={k}, n={n}")
    if not 0.0 < alpha < 1.0:
        raise ValueError(f"alpha must be in (0, 1), got {alpha!r}")
    if k == 0:
        return 0.0
    if k == n:
        return float(alpha ** (1.0 / n))
    return float(beta.ppf(alpha, k, n - k + 1))


def radius_from_plower(p_lower: float, sigma: float, scheme: str,
                       ground: GroundMetric = GroundMetric.L2) -> float | None:
    """Certified Wasserstein radius from a lower bound on the top-class
    probability, or None when p_lower <= 1/2 certifies nothing.

    rho = c * sigma * ln(p / (1 - p)) with c depending on the smoothing
    scheme and the ground metric; see _RADIUS_COEFF.
    """
    _check_scheme(scheme)
    if not isinstance(ground, GroundMetric):
        raise ValueError(f"ground must be a GroundMetric, got {ground!r}")
    if not 0.0 <= p_lower <= 1.0:
        raise ValueError(f"p_lower must be in [0, 1], got {p_lower!r}")
    if sigma <= 0.0:
        raise ValueError(f"sigma must be > 0, got {sigma!r}")
    if p_lower <= 0.5:
        return None
    coeff = _RADIUS_COEFF[(scheme, ground)]
    if p_lower == 1.0:
        return math.inf
    return coeff * sigma * math.log(p_lower / (1.0 - p_lower))


def certify(classifier, x, spec: NoiseSpec, n0: int = 1000, n: int = 10000,
            alpha: float = 0.05, rng=None, workers: int = 1) -> Certificate:
    """Two-stage certification: guess the top class from n0 draws, then lower
    bound its probability with n fresh draws and convert to a certified
    radius.

    The candidate class is frozen before the bounding draws, so the
    Clopper-Pearson bound is valid even though the guess used data.  If the
    bound does not clear 1/2 the certificate abstains.
    """
    if n0 < 1 or n < 1:
        raise ValueError("n0 and n must be >= 1")
    if not 0.0 < alpha < 1.0:
        raise ValueError(f"alpha must be in (0, 1), got {alpha!r}")
    rng = _as_rng(rng)
    r_guess, r_bound = rng.spawn(2)
    counts0 = _vote_counts(classifier, x, spec, n0, r_guess, workers)
    top = int(np.argmax(counts0))
    counts = _vote_counts(classifier, x, spec, n, r_bound, workers)
    p_lower = clopper_pearson_lower(int(counts[top]), n, alpha)
    if p_lower > 0.5:
        # sigma = 0 draws no noise, so unanimity is expected and certifies a
        # radius of exactly zero.
        rho2 = radius_from_plower(p_lower, spec.sigma, spec.scheme) if spec.sigma > 0 else 0.0
        return Certificate(top + 1, p_lower, rho2, spec, n0, n, alpha)
    return Certificate(ABSTAIN, p_lower, None, spec, n0, n, alpha)


def median_certified_radius(records) -> float | None:
    """Largest rho such that at least half of all records are correctly
    classified with certified radius >= rho, or None if no such rho exists
    (fewer than half the records are certified and correct)."""
    records = list(records)
    if not records:
        raise ValueError("no records")
    radii = sorted((r.certificate.rho2 for r in records if r.correct), reverse=True)
    need = (len(records) + 1) // 2
    if len(radii) < need:
        return None
    return radii[need - 1]
