"""Privacy measurements: SSIM, nearest-neighbour entropy, empirical MI, fooling rate."""

from __future__ import annotations

import csv
import math
from dataclasses import asdict, dataclass
from functools import lru_cache

import numpy as np
import torch
import torch.nn.functional as F
from scipy.spatial import cKDTree
from scipy.special import digamma, gammaln

from .errors import ConfigurationError, DegenerateSampleError

WINDOW_SIZE = 11
WINDOW_SIGMA = 1.5
K1, K2 = 0.01, 0.03


# -- SSIM -------------------------------------------------------------------

@lru_cache(maxsize=8)
def _gaussian_window(dtype):
    coords = torch.arange(WINDOW_SIZE, dtype=torch.float64) - (WINDOW_SIZE - 1) / 2
    g = torch.exp(-(coords**2) / (2 * WINDOW_SIGMA**2))
    g = g / g.sum()
    return torch.outer(g, g).to(dtype)[None, None]


def ssim_batch(a, b):
    """Per-image SSIM of two (N, C, H, W) tensors holding values in [-1, 1].

    Differentiable; windows are 'valid' (no padding) and channels are averaged.
    """
    if a.shape != b.shape:
        raise ConfigurationError(f"ssim shape mismatch {tuple(a.shape)} vs {tuple(b.shape)}")
    if a.shape[-1] < WINDOW_SIZE or a.shape[-2] < WINDOW_SIZE:
        raise ConfigurationError(f"image {tuple(a.shape[-2:])} smaller than the {WINDOW_SIZE}px window")
    n, c, h, w = a.shape
    # [-1, 1] -> [0, 1], dynamic range L = 1
    x = ((a + 1) / 2).reshape(n * c, 1, h, w)
    y = ((b + 1) / 2).reshape(n * c, 1, h, w)
    win = _gaussian_window(x.dtype)
    c1, c2 = K1**2, K2**2

    mu_x = F.conv2d(x, win)
    mu_y = F.conv2d(y, win)
    sxx = F.conv2d(x * x, win) - mu_x**2
    syy = F.conv2d(y * y, win) - mu_y**2
    sxy = F.conv2d(x * y, win) - mu_x * mu_y
    num = (2 * mu_x * mu_y + c1) * (2 * sxy + c2)
    den = (mu_x**2 + mu_y**2 + c1) * (sxx + syy + c2)
    local = num / den
    return local.mean(dim=(1, 2, 3)).reshape(n, c).mean(dim=1)


def _as_nchw(img):
    arr = torch.as_tensor(np.asarray(img, dtype=np.float64))
    if arr.dim() == 2:
        arr = arr[:, :, None]
    if arr.dim() != 3:
        raise ConfigurationError(f"expected an H x W x C image, got shape {tuple(arr.shape)}")
    return arr.permute(2, 0, 1)[None]


def ssim(a, b) -> float:
    """Mean structural similarity of two H x W x C images in [-1, 1]."""
    a = np.asarray(a)
    b = np.asarray(b)
    if a.shape != b.shape:
        raise ConfigurationError(f"ssim shape mismatch {a.shape} vs {b.shape}")
    return float(ssim_batch(_as_nchw(a), _as_nchw(b))[0])


def distortion(original, privatized) -> float:
    """1 - SSIM, in [0, 2]."""
    return 1.0 - ssim(original, privatized)


# -- entropy and mutual information ------------------------------------------

def nearest_distances(points):
    """Distance from every point to its nearest other point (exact kd-tree)."""
    pts = np.asarray(points, dtype=np.float64)
    if pts.ndim == 1:
        pts = pts[:, None]
    if len(pts) < 2:
        raise DegenerateSampleError("need at least 2 points for nearest-neighbour distances")
    dist, _ = cKDTree(pts).query(pts, k=2)
    return dist[:, 1]


def kl_entropy(points) -> float:
    """Kozachenko-Leonenko estimate without its additive constant (nats).

    ``(d/n) * sum(log R_i) + log(n - 1)``; see :func:`kl_constant` for the
    missing ball-volume / digamma term.
    """
    pts = np.asarray(points, dtype=np.float64)
    if pts.ndim == 1:
        pts = pts[:, None]
    n, dim = pts.shape
    r = nearest_distances(pts)
    if np.any(r <= 0):
        raise DegenerateSampleError(f"{int(np.sum(r <= 0))} point(s) have a zero nearest-neighbour distance")
    return dim * float(np.mean(np.log(r))) + math.log(n - 1)


def kl_constant(n, dim) -> float:
    """Term that turns :func:`kl_entropy` into the standard unbiased-form estimator."""
    log_ball = (dim / 2) * math.log(math.pi) - gammaln(dim / 2 + 1)
    return float(digamma(n) - digamma(1) + log_ball - math.log(n - 1))


@dataclass
class SampleSet:
    points: np.ndarray  # (n, dim)
    labels: np.ndarray  # (n,) in {0, 1}

    def __post_init__(self):
        self.points = np.asarray(self.points, dtype=np.float64)
        if self.points.ndim == 1:
            self.points = self.points[:, None]
        self.labels = np.asarray(self.labels).astype(np.int64)
        if len(self.points) != len(self.labels):
            raise ConfigurationError("points and labels differ in length")
        if not np.isin(self.labels, (0, 1)).all():
            raise ConfigurationError("labels must be binary")

    @property
    def n0(self):
        return int(np.sum(self.labels == 0))

    @property
    def n1(self):
        return int(np.sum(self.labels == 1))


def dedupe_points(points, seed=0):
    """Jitter exact duplicates by 1e-9 of the data diameter so log R stays finite."""
    pts = np.array(points, dtype=np.float64, copy=True)
    _, inverse, counts = np.unique(pts, axis=0, return_inverse=True, return_counts=True)
    dup = counts[inverse.ravel()] > 1
    if not dup.any():
        return pts
    span = np.ptp(pts, axis=0)
    diameter = float(np.linalg.norm(span)) or 1.0
    rng = np.random.default_rng(seed)
    pts[dup] += rng.uniform(-1e-9, 1e-9, size=pts[dup].shape) * diameter
    return pts


def empirical_mi(samples: SampleSet) -> float:
    """H(X) - [n0/n H(X|Y=0) + n1/n H(X|Y=1)] with class-local neighbours."""
    n0, n1 = samples.n0, samples.n1
    if n0 < 2 or n1 < 2:
        raise DegenerateSampleError(f"each class needs >= 2 samples (got n0={n0}, n1={n1})")
    x = dedupe_points(samples.points)
    y = samples.labels
    n = len(x)
    h_all = kl_entropy(x)
    h0 = kl_entropy(x[y == 0])
    h1 = kl_entropy(x[y == 1])
    return h_all - (n0 / n * h0 + n1 / n * h1)


# -- projection ---------------------------------------------------------------

def _pca3(data):
    centred = data - data.mean(axis=0)
    u, s, vt = np.linalg.svd(centred, full_matrices=False)
    # fix the sign so the output does not depend on LAPACK's choice
    signs = np.sign(vt[:3][np.arange(min(3, len(vt))), np.argmax(np.abs(vt[:3]), axis=1)])
    signs[signs == 0] = 1
    proj = centred @ (vt[:3].T * signs)
    if proj.shape[1] < 3:
        proj = np.pad(proj, ((0, 0), (0, 3 - proj.shape[1])))
    return proj


def project_pairs(pairs, method="PCA3", seed=0):
    """Flatten each (privatized, original) pair into one vector and embed in 3-D."""
    pairs = list(pairs)
    if len(pairs) < 10:
        raise DegenerateSampleError(f"need at least 10 pairs to project, got {len(pairs)}")
    data = np.stack([np.concatenate([np.ravel(p), np.ravel(o)]) for p, o in pairs]).astype(np.float64)
    method = method.upper()
    if method == "PCA3":
        return _pca3(data)
    if method == "TSNE3":
        from sklearn.manifold import TSNE

        perplexity = min(30.0, (len(data) - 1) / 3)
        tsne = TSNE(n_components=3, perplexity=perplexity, random_state=seed, init="pca")
        return tsne.fit_transform(data)
    raise ConfigurationError(f"unknown projection method {method!r}")


# -- identity misclassification ----------------------------------------------

def misclassification_rate_from_probs(probs, threshold=0.5) -> float:
    probs = np.asarray(probs, dtype=np.float64)
    if probs.size == 0:
        raise DegenerateSampleError("empty evaluation set")
    return float(np.mean(probs < threshold))


@torch.no_grad()
def pair_probabilities(disc, references, privatized, batch_size=128):
    disc.eval()
    out = []
    for start in range(0, len(references), batch_size):
        a = torch.as_tensor(references[start:start + batch_size])
        b = torch.as_tensor(privatized[start:start + batch_size])
        out.append(disc(a, b).double().numpy())
    return np.concatenate(out) if out else np.zeros(0)


@torch.no_grad()
def privatize_images(gen, images, seed, batch_size=128):
    """EVAL-mode generator over an (N, C, H, W) array; Z drawn per image from ``seed``."""
    from .networks import sample_noise

    gen.eval()
    g = torch.Generator().manual_seed(int(seed) % 2**63)
    out = []
    for start in range(0, len(images), batch_size):
        x = torch.as_tensor(images[start:start + batch_size])
        z = sample_noise((len(x), *gen.bottleneck_shape), gen.cfg.noise_std, g, dtype=x.dtype)
        out.append(gen(x, z).numpy())
    return np.concatenate(out) if out else np.zeros((0,) + tuple(images.shape[1:]), dtype=np.float32)


def misclassification_rate(model, eval_pairs, threshold=0.5, seed=0) -> float:
    """Fraction of same-identity (reference, privatized) pairs the discriminator calls different.

    ``model`` is a :class:`~sgap.networks.ModelParams`; ``eval_pairs`` is a
    sequence of (reference, original-to-privatize) images in N x C x H x W or
    a pair of stacked arrays.
    """
    refs, originals = _split_pairs(eval_pairs)
    if len(refs) == 0:
        raise DegenerateSampleError("empty evaluation set")
    gen, disc = model.build()
    priv = privatize_images(gen, originals, seed)
    return misclassification_rate_from_probs(pair_probabilities(disc, refs, priv), threshold)


def _split_pairs(eval_pairs):
    if isinstance(eval_pairs, tuple) and len(eval_pairs) == 2 and isinstance(eval_pairs[0], np.ndarray):
        return eval_pairs
    eval_pairs = list(eval_pairs)
    if not eval_pairs:
        return np.zeros(0), np.zeros(0)
    return np.stack([p[0] for p in eval_pairs]), np.stack([p[1] for p in eval_pairs])


# -- report -------------------------------------------------------------------

@dataclass
class PrivacyReport:
    lam: float
    mi_estimate: float
    misclassification_rate: float
    mean_ssim: float
    n_pairs: int
    seed: int

    def __post_init__(self):
        if not 0.0 <= self.misclassification_rate <= 1.0:
            raise ConfigurationError("misclassification_rate must lie in [0, 1]")

    def row(self):
        return {
            "lambda": fmt6(self.lam),
            "mi_estimate": fmt6(self.mi_estimate),
            "misclassification_rate": fmt6(self.misclassification_rate),
            "mean_ssim": fmt6(self.mean_ssim),
            "n_pairs": str(int(self.n_pairs)),
            "seed": str(int(self.seed)),
        }

    def to_dict(self):
        return asdict(self)


PRIVACY_COLUMNS = ("lambda", "mi_estimate", "misclassification_rate", "mean_ssim", "n_pairs", "seed")


def fmt6(x):
    """Six significant digits."""
    return f"{float(x):.6g}"


def write_privacy_csv(reports, path):
    with open(path, "w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=PRIVACY_COLUMNS)
        writer.writeheader()
        for rep in reports:
            writer.writerow(rep.row())
