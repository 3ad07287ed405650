"""The six anomaly detectors, all thresholded through one target epsilon.

Each detector maps (image, config) to a DetectionResult holding a
per-pixel NFA map (Mishne: a raw saliency score map), the binary mask at
the configured epsilon, and the banded strength labels used by the
visualizations. Multi-channel images are tested one channel at a time and
the per-pixel minimum NFA is kept; the test budget N counts every channel,
scale and kernel family accordingly.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, replace

import numpy as np
import scipy.ndimage
import scipy.sparse.linalg
from numba import njit, prange

from . import sparse
from .image import (ImageF, convolve, disk_kernel, estimate_noise_sigma,
                    extract_patches, fft2, gaussian_pyramid, ifft2,
                    to_grayscale)
from .nfa import NfaBudget, NfaMap, chi2_sf_log10, log10_erfc

METHODS = ("grosjean", "aiger", "zontak", "boracchi", "mishne", "davy")

# NFA strength bands shared by all figures: index 1..4 = white, cyan,
# green, orange for NFA in (1e-3,1e-2], (1e-8,1e-3], (1e-21,1e-8], <=1e-21.
NFA_BAND_EDGES = (1e-2, 1e-3, 1e-8, 1e-21)
SCORE_BAND_EDGES = (0.5, 0.7, 0.9)


@dataclass(frozen=True)
class DetectorConfig:
    method: str = "davy"
    epsilon: float = 1e-2
    patch_side: int = 8
    n_neighbors: int = 16
    n_levels: int = 3
    guard_radius: int = 8
    search_radius: int = 32
    redundancy: float = 1.5
    lam: float | None = None
    h_factor: float = 1.0
    seed: int = 0
    disk_radii: tuple = (1, 2, 4)
    embed_dim: int = 8
    embed_scale: float = 1.0
    score_threshold: float = 0.8
    blob_sigma: float | None = None
    n_subsample: int = 4096
    dict_iters: int = 10
    phot_floor_fraction: float = 0.1

    def __post_init__(self):
        if self.method not in METHODS:
            raise ValueError(f"unknown method {self.method!r}")
        if self.epsilon <= 0:
            raise ValueError("epsilon must be > 0")

    @classmethod
    def for_method(cls, method: str, **overrides) -> "DetectorConfig":
        """Per-method defaults: Boracchi codes 15x15 patches at redundancy
        1.5, Zontak searches a 160x160 region, the patch-based methods use
        8x8 patches with 16 neighbors."""
        base = {"method": method}
        if method == "boracchi":
            base["patch_side"] = 15
            base["redundancy"] = 1.5
        elif method == "zontak":
            base["search_radius"] = 80
        base.update(overrides)
        return cls(**base)


@dataclass(frozen=True)
class DetectionResult:
    """Detection output; `n_detections` counts elementary tests fired at
    their native scale (a coarse-level alarm is one test even though it
    covers several level-0 mask pixels)."""

    method: str
    nfa: NfaMap | ImageF
    mask: np.ndarray
    bands: np.ndarray
    best_nfa: float
    n_detections: int

    @property
    def is_nfa(self) -> bool:
        return isinstance(self.nfa, NfaMap)


def run_detector(img: ImageF, cfg: DetectorConfig) -> DetectionResult:
    return _DISPATCH[cfg.method](img, cfg)


# ---------------------------------------------------------------------------
# shared helpers
# ---------------------------------------------------------------------------

def _robust_mu_sigma(arr: np.ndarray) -> tuple[float, float]:
    """Median and scaled MAD; falls back to RMS spread when the MAD
    degenerates (residuals that are zero almost everywhere)."""
    mu = float(np.median(arr))
    mad = float(np.median(np.abs(arr - mu)))
    sigma = 1.4826 * mad
    if sigma <= 1e-12 * (abs(mu) + 1.0):
        sigma = float(np.sqrt(np.mean((arr - mu) ** 2)))
    return mu, sigma


def _nearest_upsample(arr: np.ndarray, level: int, shape) -> np.ndarray:
    if level == 0:
        return arr
    f = 2 ** level
    ys = np.minimum(np.arange(shape[0]) // f, arr.shape[0] - 1)
    xs = np.minimum(np.arange(shape[1]) // f, arr.shape[1] - 1)
    return arr[np.ix_(ys, xs)]


def _nfa_bands(log10_map: np.ndarray) -> np.ndarray:
    bands = np.zeros(log10_map.shape, dtype=np.uint8)
    bands[log10_map <= math.log10(NFA_BAND_EDGES[0])] = 1
    bands[log10_map < math.log10(NFA_BAND_EDGES[1])] = 2
    bands[log10_map < math.log10(NFA_BAND_EDGES[2])] = 3
    bands[log10_map < math.log10(NFA_BAND_EDGES[3])] = 4
    return bands


def score_bands(score_map: np.ndarray) -> np.ndarray:
    """Mishne-style bands: white below 0.5, then cyan / green / orange."""
    bands = np.ones(score_map.shape, dtype=np.uint8)
    bands[score_map >= SCORE_BAND_EDGES[0]] = 2
    bands[score_map >= SCORE_BAND_EDGES[1]] = 3
    bands[score_map >= SCORE_BAND_EDGES[2]] = 4
    return bands


def _result_from_log10(method: str, log10_map: np.ndarray, budget: NfaBudget,
                       epsilon: float, n_detections: int | None = None) -> DetectionResult:
    nfa_map = NfaMap.from_log10(log10_map, budget)
    mask = nfa_map.detection_mask(epsilon)
    return DetectionResult(
        method=method,
        nfa=nfa_map,
        mask=mask,
        bands=_nfa_bands(log10_map),
        best_nfa=nfa_map.best_nfa,
        n_detections=int(mask.sum()) if n_detections is None else n_detections,
    )


def _channel_planes(img: ImageF):
    return [ImageF(img.plane(c)) for c in range(img.channels)]


# ---------------------------------------------------------------------------
# PHOT and the Aiger detector
# ---------------------------------------------------------------------------

def phot(img: ImageF) -> ImageF:
    """Phase-only transform: every spectral coefficient is normalized to
    unit modulus (DC forced to zero, vanishing coefficients left at zero)
    and the spectrum inverted back to the pixel domain."""
    spec = fft2(img)
    mod = np.abs(spec)
    keep = mod > 1e-12 * mod.max() if mod.max() > 0 else np.zeros_like(mod, bool)
    out = np.zeros_like(spec)
    np.divide(spec, mod, where=keep, out=out)
    out[0, 0] = 0.0
    return ifft2(out)


def detect_aiger(img: ImageF, cfg: DetectorConfig) -> DetectionResult:
    """Fourier-homogeneous background: the PHOT residual is modeled as
    white Gaussian noise and each pixel two-tail tested.

    Blob mode (cfg.blob_sigma) adds a Gaussian-smoothed copy of the
    residual as a second test family, doubling N.
    """
    gray = to_grayscale(img)
    residual = phot(gray)
    maps = [residual.plane(0)]
    if cfg.blob_sigma is not None:
        maps.append(scipy.ndimage.gaussian_filter(maps[0], cfg.blob_sigma,
                                                  mode="reflect"))
    budget = NfaBudget.for_pixels(cfg.epsilon, gray.width, gray.height,
                                  families=len(maps))
    log_n = math.log10(budget.n_tests)
    log_eps = math.log10(cfg.epsilon)
    best = np.full(maps[0].shape, log_n)
    fired = 0
    for m in maps:
        mu, sigma = _robust_mu_sigma(m)
        if sigma <= 0:
            continue  # flat residual: nothing testable
        z = np.abs(m - mu) / (sigma * math.sqrt(2.0))
        lg = log_n + log10_erfc(z)
        fired += int((lg <= log_eps).sum())
        np.minimum(best, lg, out=best)
    return _result_from_log10("aiger", best, budget, cfg.epsilon, fired)


# ---------------------------------------------------------------------------
# Grosjean: colored-Gaussian background, disk kernels over a pyramid
# ---------------------------------------------------------------------------

def detect_grosjean(img: ImageF, cfg: DetectorConfig) -> DetectionResult:
    budget = NfaBudget.for_pixels(cfg.epsilon, img.width, img.height,
                                  img.channels, cfg.n_levels, len(cfg.disk_radii))
    log_n = math.log10(budget.n_tests)
    log_eps = math.log10(cfg.epsilon)
    best = np.full((img.height, img.width), log_n)
    fired = 0
    for plane in _channel_planes(img):
        pyr = gaussian_pyramid(plane, cfg.n_levels)
        for level, lv in enumerate(pyr.levels):
            level_best = np.full((lv.height, lv.width), log_n)
            for r in cfg.disk_radii:
                f = convolve(lv, disk_kernel(r), "mirror").plane(0)
                mu, sigma = _robust_mu_sigma(f)
                if sigma <= 0:
                    continue
                z = np.abs(f - mu) / (sigma * math.sqrt(2.0))
                lg = log_n + log10_erfc(z)
                fired += int((lg <= log_eps).sum())
                np.minimum(level_best, lg, out=level_best)
            up = _nearest_upsample(level_best, level, best.shape)
            np.minimum(best, up, out=best)
    return _result_from_log10("grosjean", best, budget, cfg.epsilon, fired)


# ---------------------------------------------------------------------------
# patch-distance kernels shared by the non-local methods
# ---------------------------------------------------------------------------

@njit(cache=True, parallel=True)
def _offset_distances(u, offs, s, out):
    """Squared patch distances for a batch of offsets.

    out[i, y, x] = ||patch(y, x) - patch(y + dy_i, x + dx_i)||^2 for every
    query whose shifted partner stays inside the image; invalid entries are
    set to +inf. Box sums run over each offset's valid overlap only.
    """
    height, width = u.shape
    hq = height - s + 1
    wq = width - s + 1
    for oi in prange(offs.shape[0]):
        dy = offs[oi, 0]
        dx = offs[oi, 1]
        out[oi, :, :] = np.inf
        y0 = max(0, -dy)
        y1 = min(hq, hq - dy)
        x0 = max(0, -dx)
        x1 = min(wq, wq - dx)
        if y1 <= y0 or x1 <= x0:
            continue
        ph = (y1 - y0) + s - 1
        pw = (x1 - x0) + s - 1
        nw = x1 - x0
        hsum = np.empty((ph, nw))
        for yy in range(ph):
            uy = y0 + yy
            vy = uy + dy
            acc = 0.0
            for xx in range(s):
                d = u[uy, x0 + xx] - u[vy, x0 + xx + dx]
                acc += d * d
            hsum[yy, 0] = acc
            for xx in range(1, nw):
                d_add = u[uy, x0 + xx + s - 1] - u[vy, x0 + xx + s - 1 + dx]
                d_sub = u[uy, x0 + xx - 1] - u[vy, x0 + xx - 1 + dx]
                acc += d_add * d_add - d_sub * d_sub
                hsum[yy, xx] = acc
        for xx in range(nw):
            acc = 0.0
            for yy in range(s):
                acc += hsum[yy, xx]
            out[oi, y0, x0 + xx] = acc
            for yy in range(1, y1 - y0):
                acc += hsum[yy + s - 1, xx] - hsum[yy - 1, xx]
                out[oi, y0 + yy, x0 + xx] = acc


@njit(cache=True, parallel=True)
def _topk_update(dist_k, off_k, maxval, maxidx, dists, off_base):
    """Streamed top-K: fold a batch of offset distance maps into the
    per-query K-best arrays."""
    k, hq, wq = dist_k.shape
    m = dists.shape[0]
    for y in prange(hq):
        for x in range(wq):
            mv = maxval[y, x]
            mi = maxidx[y, x]
            for b in range(m):
                d = dists[b, y, x]
                if d < mv:
                    dist_k[mi, y, x] = d
                    off_k[mi, y, x] = off_base + b
                    mv = dist_k[0, y, x]
                    mi = 0
                    for kk in range(1, k):
                        if dist_k[kk, y, x] > mv:
                            mv = dist_k[kk, y, x]
                            mi = kk
            maxval[y, x] = mv
            maxidx[y, x] = mi


@njit(cache=True, parallel=True)
def _accumulate_weights(dists, inv_h2, wsum):
    """Zontak accumulator: wsum += sum_b exp(-d_b / h^2), skipping
    negligible terms so the exponential is only taken near matches."""
    m, hq, wq = dists.shape
    for y in prange(hq):
        for x in range(wq):
            acc = 0.0
            for b in range(m):
                a = dists[b, y, x] * inv_h2
                if a < 745.0:  # exp underflows past this
                    acc += math.exp(-a)
            wsum[y, x] += acc


@njit(cache=True)
def _nlmeans_aggregate(u, dist_k, off_k, offs, s, h2, acc, cov):
    """Weighted patch averages scattered back onto the pixel grid."""
    k, hq, wq = dist_k.shape
    wbuf = np.empty(k)
    for y in range(hq):
        for x in range(wq):
            z = 0.0
            kbest = 0
            dbest = np.inf
            for kk in range(k):
                d = dist_k[kk, y, x]
                if d < dbest:
                    dbest = d
                    kbest = kk
                if np.isfinite(d):
                    w = math.exp(-d / h2)
                else:
                    w = 0.0
                wbuf[kk] = w
                z += w
            if z < 1e-300:
                # every weight underflowed: keep the single best match
                if not np.isfinite(dbest):
                    continue
                for kk in range(k):
                    wbuf[kk] = 0.0
                wbuf[kbest] = 1.0
                z = 1.0
            for kk in range(k):
                w = wbuf[kk] / z
                if w == 0.0:
                    continue
                o = off_k[kk, y, x]
                dy = offs[o, 0]
                dx = offs[o, 1]
                for yy in range(s):
                    for xx in range(s):
                        acc[y + yy, x + xx] += w * u[y + dy + yy, x + dx + xx]
            for yy in range(s):
                for xx in range(s):
                    cov[y + yy, x + xx] += 1.0


def _search_offsets(search_radius: int, guard_radius: int) -> np.ndarray:
    """All (dy, dx) with Chebyshev norm in (guard_radius, search_radius]."""
    r = search_radius
    dy, dx = np.mgrid[-r : r + 1, -r : r + 1]
    cheb = np.maximum(np.abs(dy), np.abs(dx))
    keep = (cheb > guard_radius) & (cheb <= r)
    return np.stack([dy[keep], dx[keep]], axis=1).astype(np.int64)


_OFFSET_BATCH = 64


def _min_corner_candidates(offs: np.ndarray, hq: int, wq: int) -> int:
    corners = [(0, 0), (0, wq - 1), (hq - 1, 0), (hq - 1, wq - 1)]
    counts = []
    for y, x in corners:
        ok = (y + offs[:, 0] >= 0) & (y + offs[:, 0] < hq) & \
             (x + offs[:, 1] >= 0) & (x + offs[:, 1] < wq)
        counts.append(int(ok.sum()))
    return min(counts)


def nlmeans_background(img: ImageF, cfg: DetectorConfig,
                       sigma: np.ndarray | None = None) -> ImageF:
    """Self-similar background estimate by guarded non-local means.

    For every patch, the cfg.n_neighbors most similar patches at Chebyshev
    distance greater than guard_radius (and within search_radius) are
    averaged with weights exp(-d^2 / h^2); overlapping estimates are
    averaged per pixel. Channels are processed independently.

    When `sigma` is given, h^2 = h_factor^2 * 2 sigma^2 * patch_dim (the
    expected squared distance between two noisy copies of the same
    content). By default h^2 is self-tuned to the median of the selected
    neighbor distances, which stays correctly scaled even when the noise
    is spatially correlated (downsampled pyramid levels).
    """
    s = cfg.patch_side
    if s > min(img.height, img.width):
        raise ValueError("patch larger than image")
    offs = _search_offsets(cfg.search_radius, cfg.guard_radius)
    hq = img.height - s + 1
    wq = img.width - s + 1
    if _min_corner_candidates(offs, hq, wq) < cfg.n_neighbors:
        raise ValueError(
            f"search region cannot supply {cfg.n_neighbors} neighbors everywhere"
        )
    out = np.empty_like(img.data)
    for c in range(img.channels):
        u = np.ascontiguousarray(img.plane(c))
        dist_k = np.full((cfg.n_neighbors, hq, wq), np.inf)
        off_k = np.zeros((cfg.n_neighbors, hq, wq), dtype=np.int64)
        maxval = np.full((hq, wq), np.inf)
        maxidx = np.zeros((hq, wq), dtype=np.int64)
        buf = np.empty((min(_OFFSET_BATCH, len(offs)), hq, wq))
        for start in range(0, len(offs), _OFFSET_BATCH):
            batch = offs[start : start + _OFFSET_BATCH]
            _offset_distances(u, batch, s, buf[: len(batch)])
            _topk_update(dist_k, off_k, maxval, maxidx, buf[: len(batch)], start)
        if sigma is not None:
            h2 = cfg.h_factor ** 2 * 2.0 * float(sigma[c]) ** 2 * s * s
        else:
            h2 = cfg.h_factor ** 2 * float(np.median(dist_k[np.isfinite(dist_k)]))
        h2 = max(h2, 1e-320)
        acc = np.zeros_like(u)
        cov = np.zeros_like(u)
        _nlmeans_aggregate(u, dist_k, off_k, offs, s, h2, acc, cov)
        cov[cov == 0] = 1.0
        out[:, :, c] = acc / cov
    return ImageF(out)


# ---------------------------------------------------------------------------
# Zontak: non-local weight sums against a chi-square bound
# ---------------------------------------------------------------------------

def detect_zontak(img: ImageF, cfg: DetectorConfig) -> DetectionResult:
    """Detects patches whose total similarity weight inside the search
    region falls below the chi-square threshold tau.

    NFA(x) = N * P(chi2_d >= -(h^2 / 2 sigma^2) log W(x)) with one test
    per scored patch; the map marks patch centers.
    """
    s = cfg.patch_side
    if s > min(img.height, img.width):
        raise ValueError("patch larger than image")
    sigma = estimate_noise_sigma(img).sigma
    if np.all(sigma <= 0):
        raise ValueError("flat image: noise sigma is zero, H0 is undefined")
    hq = img.height - s + 1
    wq = img.width - s + 1
    offs = _search_offsets(cfg.search_radius, 0)  # guard 0: only self excluded
    patch_dim = s * s
    n_tests = hq * wq * img.channels
    budget = NfaBudget(epsilon=cfg.epsilon, n_tests=n_tests)
    log_n = math.log10(n_tests)
    log_eps = math.log10(cfg.epsilon)
    best = np.full((img.height, img.width), log_n)
    half = s // 2
    fired = 0
    for c in range(img.channels):
        if sigma[c] <= 0:
            continue
        u = np.ascontiguousarray(img.plane(c))
        h2 = cfg.h_factor ** 2 * 2.0 * float(sigma[c]) ** 2 * patch_dim
        wsum = np.zeros((hq, wq))
        buf = np.empty((min(_OFFSET_BATCH, len(offs)), hq, wq))
        for start in range(0, len(offs), _OFFSET_BATCH):
            batch = offs[start : start + _OFFSET_BATCH]
            _offset_distances(u, batch, s, buf[: len(batch)])
            _accumulate_weights(buf[: len(batch)], 1.0 / h2, wsum)
        # chi-square argument: -(h^2 / 2 sigma^2) * log(weight sum)
        scale = h2 / (2.0 * float(sigma[c]) ** 2)
        arg = -scale * np.log(np.maximum(wsum, 1e-300))
        lg = log_n + chi2_sf_log10(arg, patch_dim)
        fired += int((lg <= log_eps).sum())
        np.minimum(best[half : half + hq, half : half + wq],
                   lg, out=best[half : half + hq, half : half + wq])
    return _result_from_log10("zontak", best, budget, cfg.epsilon, fired)


# ---------------------------------------------------------------------------
# Boracchi: sparse feature pairs against the Chebyshev bound
# ---------------------------------------------------------------------------

def _trimmed_gaussian2d(pairs: np.ndarray, max_rounds: int = 20):
    """Gaussian fit on the background bulk of the feature cloud.

    Repeatedly fits and drops pairs beyond the 99.9% chi-square radius
    (d = 3.717) until the inlier set is stable. With a plain empirical fit
    the average squared Mahalanobis distance of the fitting set is exactly
    the dimension, which caps every distance near sqrt(n) and makes the
    Chebyshev threshold unreachable; anomalies can only stand out against
    moments estimated without them, as in the original anomaly-free-
    reference formulation.
    """
    inliers = np.ones(len(pairs), dtype=bool)
    model = sparse.fit_gaussian2d(pairs)
    for _ in range(max_rounds):
        d = sparse.mahalanobis2d_many(pairs, model)
        new_inliers = d <= 3.7169221888498383
        if new_inliers.sum() < 3 or (new_inliers == inliers).all():
            break
        inliers = new_inliers
        model = sparse.fit_gaussian2d(pairs[inliers])
    return model


def detect_boracchi(img: ImageF, cfg: DetectorConfig) -> DetectionResult:
    """Dictionary is learned on the test image itself; every stride-1 patch
    is coded, its (err, l1) pair scored by Mahalanobis distance to a 2-D
    Gaussian fit on the background bulk, and NFA(x) = 2N / d_M(x)^2.

    Patches are demeaned before coding, which makes the detector exactly
    invariant to gray-level offsets.
    """
    gray = to_grayscale(img)
    s = cfg.patch_side
    grid = extract_patches(gray, s, stride=1)
    p_all = grid.vectors.T.astype(np.float64)
    p_all = p_all - p_all.mean(axis=0, keepdims=True)
    lam = cfg.lam
    if lam is None:
        sigma = float(estimate_noise_sigma(gray).sigma[0])
        lam = 0.1 * s * s * sigma
    if lam <= 0:
        # noiseless input: tie the penalty to the patch energy instead
        lam = max(1e-3 * float(np.median(np.linalg.norm(p_all, axis=0))), 1e-6)

    # training at stride patch/2 keeps learning tractable; shrink the
    # stride on small images until the dictionary can be filled
    n_atoms = int(np.ceil(cfg.redundancy * s * s))
    train_stride = max(1, s // 2)
    while train_stride > 1:
        n_train = ((gray.height - s) // train_stride + 1) * \
                  ((gray.width - s) // train_stride + 1)
        if n_train >= max(2 * n_atoms, n_atoms + 8):
            break
        train_stride -= 1
    train = extract_patches(gray, s, stride=train_stride).vectors.T
    train = train - train.mean(axis=0, keepdims=True)
    dictionary = sparse.learn_dictionary(train, cfg.redundancy, lam,
                                         n_iters=cfg.dict_iters, seed=cfg.seed)
    pairs = sparse.feature_pairs_batch(p_all, dictionary, lam)
    model = _trimmed_gaussian2d(pairs)
    d = sparse.mahalanobis2d_many(pairs, model)

    n_tests = grid.n_patches
    budget = NfaBudget(epsilon=cfg.epsilon, n_tests=n_tests)
    log_n = math.log10(n_tests)
    with np.errstate(divide="ignore"):
        lg_patch = math.log10(2.0 * n_tests) - 2.0 * np.log10(np.maximum(d, 1e-300))
    hq = gray.height - s + 1
    wq = gray.width - s + 1
    half = s // 2
    best = np.full((gray.height, gray.width), log_n)
    best[half : half + hq, half : half + wq] = lg_patch.reshape(hq, wq)
    return _result_from_log10("boracchi", best, budget, cfg.epsilon)


# ---------------------------------------------------------------------------
# Mishne: spectral embedding of the patch space, Goferman-style score
# ---------------------------------------------------------------------------

def detect_mishne(img: ImageF, cfg: DetectorConfig) -> DetectionResult:
    """Non-local saliency on a diffusion embedding of the patch space.

    A random-walk-normalized Gaussian affinity graph is built on a random
    subsample of patches, its top eigenvectors give embedding coordinates
    (extended to all patches by the Nystroem formula), and each patch is
    scored from its K nearest subsampled neighbors:

        S = 1 - exp(-mean_k (d_k / 2h) / (1 + c * d_embed_k))

    Scores live in [0, 1); the mask keeps S >= cfg.score_threshold.
    """
    gray = to_grayscale(img)
    s = cfg.patch_side
    grid = extract_patches(gray, s, stride=1)
    vecs = grid.vectors
    n = vecs.shape[0]
    rng = np.random.default_rng(cfg.seed)
    n_sub = min(cfg.n_subsample, n)
    sub_idx = np.sort(rng.choice(n, size=n_sub, replace=False))
    sub = vecs[sub_idx]

    h = _median_pairwise(sub, rng)
    if h <= 0:
        h = 1.0  # all sampled patches identical; scores collapse to 0 anyway

    d2_sub = _sq_dists(sub, sub)
    w_sub = np.exp(-d2_sub / (h * h))
    deg = w_sub.sum(axis=1)
    inv_sqrt = 1.0 / np.sqrt(deg)
    sym = w_sub * inv_sqrt[:, None] * inv_sqrt[None, :]
    k_eig = min(cfg.embed_dim + 1, n_sub - 1)
    v0 = rng.standard_normal(n_sub)
    vals, vecs_eig = scipy.sparse.linalg.eigsh(sym, k=k_eig, which="LA", v0=v0)
    order = np.argsort(vals)[::-1]
    vals = vals[order]
    psi = vecs_eig[:, order] * inv_sqrt[:, None]  # random-walk eigenvectors
    basis = psi[:, 1:] * vals[1:][None, :]  # drop the trivial constant mode

    k_nn = min(cfg.n_neighbors, n_sub - 1)
    scores = np.empty(n)
    embed_sub = None
    chunk = 4096
    # first pass: embedding of the subsample itself (same Nystroem formula
    # as everywhere else, so distances are consistent)
    aff = np.exp(-d2_sub / (h * h))
    embed_sub = (aff / aff.sum(axis=1, keepdims=True)) @ basis
    for start in range(0, n, chunk):
        rows = vecs[start : start + chunk]
        d2 = _sq_dists(rows, sub)
        # a patch that is itself in the subsample must not match itself
        in_sub = np.flatnonzero((sub_idx >= start) & (sub_idx < start + d2.shape[0]))
        for j in in_sub:
            d2[sub_idx[j] - start, j] = np.inf
        aff = np.exp(-np.where(np.isfinite(d2), d2, np.inf) / (h * h))
        row_sum = aff.sum(axis=1, keepdims=True)
        row_sum[row_sum == 0] = 1.0
        embed = (aff / row_sum) @ basis
        nn = np.argpartition(d2, k_nn - 1, axis=1)[:, :k_nn]
        take = np.take_along_axis(d2, nn, axis=1)
        dist = np.sqrt(np.maximum(take, 0.0))
        ed = np.linalg.norm(embed[:, None, :] - embed_sub[nn], axis=2)
        ratio = (dist / (2.0 * h)) / (1.0 + cfg.embed_scale * ed)
        scores[start : start + d2.shape[0]] = 1.0 - np.exp(-ratio.mean(axis=1))

    hq = gray.height - s + 1
    wq = gray.width - s + 1
    half = s // 2
    score_map = np.zeros((gray.height, gray.width))
    score_map[half : half + hq, half : half + wq] = scores.reshape(hq, wq)
    mask = score_map >= cfg.score_threshold
    return DetectionResult(
        method="mishne",
        nfa=ImageF(score_map),
        mask=mask,
        bands=score_bands(score_map),
        best_nfa=float(score_map.max()),
        n_detections=int(mask.sum()),
    )


def _sq_dists(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    d2 = (
        np.sum(a * a, axis=1)[:, None]
        + np.sum(b * b, axis=1)[None, :]
        - 2.0 * (a @ b.T)
    )
    return np.maximum(d2, 0.0)


def _median_pairwise(sub: np.ndarray, rng, n_pairs: int = 200_000) -> float:
    n = sub.shape[0]
    i = rng.integers(0, n, size=n_pairs)
    j = rng.integers(0, n, size=n_pairs)
    keep = i != j
    diffs = sub[i[keep]] - sub[j[keep]]
    return float(np.median(np.sqrt(np.sum(diffs * diffs, axis=1))))


# ---------------------------------------------------------------------------
# Davy: guarded NL-means background subtraction, PHOT whitening, then the
# Grosjean multiscale test on the normalized residual
# ---------------------------------------------------------------------------

# downsampled levels whose testable core is smaller than this are skipped
_DAVY_MIN_COARSE_CORE = 64


def _whiten_residual(core: np.ndarray, floor_fraction: float) -> np.ndarray:
    """Phase-only whitening with an energy floor.

    Coefficients whose modulus falls below `floor_fraction` of the RMS
    modulus are left at zero instead of being normalized: such bands carry
    essentially no residual energy, only estimation junk, and amplifying
    them to unit modulus is what breaks the Gaussian residual model on
    colored backgrounds and coarse scales. For a white residual the floor
    sits below ~1% of coefficients, so the transform is the plain PHOT.
    """
    spec = fft2(ImageF(core))
    mod = np.abs(spec)
    rms = math.sqrt(float(np.mean(mod * mod)))
    floor = max(floor_fraction * rms, 1e-12 * float(mod.max()))
    keep = mod > floor
    out = np.zeros_like(spec)
    np.divide(spec, mod, where=keep, out=out)
    out[0, 0] = 0.0
    return ifft2(out).plane(0)


def detect_davy(img: ImageF, cfg: DetectorConfig) -> DetectionResult:
    budget = NfaBudget.for_pixels(cfg.epsilon, img.width, img.height,
                                  img.channels, cfg.n_levels, len(cfg.disk_radii))
    log_n = math.log10(budget.n_tests)
    log_eps = math.log10(cfg.epsilon)
    best = np.full((img.height, img.width), log_n)
    margin = cfg.patch_side - 1
    fired = 0
    for plane in _channel_planes(img):
        pyr = gaussian_pyramid(plane, cfg.n_levels)
        for level, lv in enumerate(pyr.levels):
            background = nlmeans_background(lv, cfg)
            residual = lv.data[:, :, 0] - background.data[:, :, 0]
            # only the fully patch-covered interior is statistically
            # homogeneous; partial-coverage borders would leak through PHOT
            core = residual[margin : lv.height - margin, margin : lv.width - margin]
            if min(core.shape) < (16 if level == 0 else _DAVY_MIN_COARSE_CORE):
                # blurred levels need enough live spectral samples for the
                # Gaussian residual model to hold after whitening
                continue
            white = _whiten_residual(core, cfg.phot_floor_fraction)
            mu, sc = _robust_mu_sigma(white)
            if sc <= 0:
                continue  # residual identically zero at this scale
            white = (white - mu) / sc
            level_best = np.full((lv.height, lv.width), log_n)
            core_best = level_best[margin : lv.height - margin,
                                   margin : lv.width - margin]
            for r in cfg.disk_radii:
                # the whitened residual is a Fourier-domain product, so its
                # natural extension is periodic
                f = convolve(ImageF(white), disk_kernel(r), "periodic").plane(0)
                mu2, s2 = _robust_mu_sigma(f)
                if s2 <= 0:
                    continue
                z = np.abs(f - mu2) / (s2 * math.sqrt(2.0))
                lg = log_n + log10_erfc(z)
                fired += int((lg <= log_eps).sum())
                np.minimum(core_best, lg, out=core_best)
            up = _nearest_upsample(level_best, level, best.shape)
            np.minimum(best, up, out=best)
    return _result_from_log10("davy", best, budget, cfg.epsilon, fired)


_DISPATCH = {
    "grosjean": detect_grosjean,
    "aiger": detect_aiger,
    "zontak": detect_zontak,
    "boracchi": detect_boracchi,
    "mishne": detect_mishne,
    "davy": detect_davy,
}
