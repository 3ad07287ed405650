"""Synthetic benchmark: RPN textures, inserted anomalies, metrics, ROC.

Anomaly-free backgrounds are random-phase-noise textures (the Fourier
modulus of a source image with freshly drawn uniform phases). A single
snippet from a different texture is blended into each one, giving a
ground-truth mask. Detectors are scored at pixel and anomaly level, plus
a threshold sweep pooled over the dataset for ROC/AUC.
"""

from __future__ import annotations

import csv
import json
import os
import time
from dataclasses import dataclass

import numpy as np
import scipy.ndimage

from .detectors import DetectorConfig, DetectionResult, run_detector
from .image import ImageF, fft2, read_image, write_image
from .nfa import NfaMap

# AUC integrates the TP rate over log10(FP rate) across these eight decades
AUC_LOG_SPAN = (-8.0, 0.0)


@dataclass(frozen=True)
class BenchmarkCase:
    clean: ImageF
    corrupted: ImageF
    gt_mask: np.ndarray
    case_id: str


@dataclass(frozen=True)
class MetricsRow:
    tp_pixel_pct: float
    fp_pixel_pct: float
    tp_anomaly_pct: float
    fp_anomaly_pct: float

    FIELDS = ("tp_pixel_pct", "fp_pixel_pct", "tp_anomaly_pct", "fp_anomaly_pct")


@dataclass(frozen=True)
class RocCurve:
    points: np.ndarray  # (n, 2) of (fp_rate, tp_rate), fp ascending
    auc_log: float


# ---------------------------------------------------------------------------
# texture and anomaly synthesis
# ---------------------------------------------------------------------------

def generate_rpn(source: ImageF, seed: int) -> ImageF:
    """Random phase noise: keep the source's spectral modulus exactly,
    draw i.i.d. uniform phases (Hermitian-symmetric so the output is
    real), and preserve the DC coefficient."""
    if source.channels != 1:
        raise ValueError("RPN generation expects a single channel")
    h, w = source.height, source.width
    spec = fft2(source)
    mod = np.abs(spec)
    rng = np.random.default_rng(seed)
    phase = rng.uniform(0.0, 2.0 * np.pi, size=(h, w))
    out = mod * np.exp(1j * phase)

    # enforce conjugate symmetry: out[-k] = conj(out[k])
    iy = (-np.arange(h)) % h
    ix = (-np.arange(w)) % w
    out = 0.5 * (out + np.conj(out[np.ix_(iy, ix)]))
    # self-conjugate frequencies must be real; keep modulus, random sign
    self_conj = (iy[:, None] == np.arange(h)[:, None]) & (ix[None, :] == np.arange(w)[None, :])
    signs = np.where(rng.random(size=(h, w)) < 0.5, -1.0, 1.0)
    out[self_conj] = mod[self_conj] * signs[self_conj]
    out[0, 0] = spec[0, 0]  # DC preserved: output mean = input mean
    # averaging conjugate pairs shrank the modulus; restore it exactly
    cur = np.abs(out)
    scale = np.ones_like(cur)
    np.divide(mod, cur, where=cur > 0, out=scale)
    out *= scale
    return ImageF(np.real(np.fft.ifft2(out)))


def power_law_texture(height: int, width: int, alpha: float, seed: int,
                      mean: float = 128.0, std: float = 25.0) -> ImageF:
    """Colored-noise texture with spectral modulus |f|^-alpha, used as the
    shipped source family for the benchmark (the spectrum, not the samples,
    defines the process)."""
    fy = np.fft.fftfreq(height)[:, None]
    fx = np.fft.fftfreq(width)[None, :]
    radius = np.sqrt(fy * fy + fx * fx)
    mod = np.zeros((height, width))
    np.divide(1.0, radius ** alpha, where=radius > 0, out=mod)
    rng = np.random.default_rng(seed)
    phase = rng.uniform(0.0, 2.0 * np.pi, size=(height, width))
    spec = mod * np.exp(1j * phase)
    iy = (-np.arange(height)) % height
    ix = (-np.arange(width)) % width
    spec = 0.5 * (spec + np.conj(spec[np.ix_(iy, ix)]))
    spec[0, 0] = 0.0
    tex = np.real(np.fft.ifft2(spec))
    sd = tex.std()
    if sd > 0:
        tex = tex / sd * std
    return ImageF(tex - tex.mean() + mean)


def _feather_alpha(h: int, w: int, margin: int = 2) -> np.ndarray:
    """Raised-cosine blending weights: 1 in the interior, rolling off over
    `margin` pixels at each snippet edge. The ramp is phased so the
    outermost sample carries only ~4% of the snippet, keeping the sub-0.5
    ring (outside the ground truth) close to invisible."""
    def ramp(n):
        r = np.ones(n)
        t = (np.arange(margin) + 0.25) / margin
        edge = 0.5 * (1.0 - np.cos(np.pi * t))
        r[:margin] = edge
        r[n - margin :] = edge[::-1]
        return r

    return np.outer(ramp(h), ramp(w))


def insert_anomaly(base: ImageF, snippet: ImageF, position: tuple[int, int],
                   blend: str = "feathered") -> BenchmarkCase:
    """Blend a snippet into the base texture and record the ground truth.

    `blend` is "feathered" (raised-cosine alpha, 2 px margin) or
    "mean_matched" (same, after shifting the snippet to the local base
    mean). The ground-truth mask is the region where alpha > 0.5.
    """
    if blend not in ("feathered", "mean_matched"):
        raise ValueError(f"unknown blend mode {blend!r}")
    y, x = position
    sh, sw = snippet.height, snippet.width
    if y < 0 or x < 0 or y + sh > base.height or x + sw > base.width:
        raise ValueError("snippet does not fit inside the base image")
    if snippet.channels != base.channels:
        raise ValueError("snippet/base channel mismatch")
    snip = snippet.data.copy()
    region = base.data[y : y + sh, x : x + sw, :]
    if blend == "mean_matched":
        snip = snip - snip.mean(axis=(0, 1)) + region.mean(axis=(0, 1))
    alpha = _feather_alpha(sh, sw)[:, :, None]
    corrupted = base.data.copy()
    corrupted[y : y + sh, x : x + sw, :] = alpha * snip + (1.0 - alpha) * region
    gt = np.zeros((base.height, base.width), dtype=bool)
    gt[y : y + sh, x : x + sw] = alpha[:, :, 0] > 0.5
    return BenchmarkCase(clean=base, corrupted=ImageF(corrupted), gt_mask=gt,
                         case_id="")


# Spectral slopes for the shipped textures. Slopes much past 1 make the
# background so smooth that rare local structures have no self-similar
# matches anywhere in the image, i.e. the non-local H0 itself fails and
# every patch-based detector drowns in false alarms.
_SPECTRUM_ALPHAS = (0.2, 0.4, 0.6)


def structured_donor(size: int, seed: int, n_shapes: int = 60) -> ImageF:
    """Collage of random sharp-edged ellipses: a stand-in for 'a piece of
    another image' with real contours and flat regions, which RPN
    backgrounds lack by construction."""
    rng = np.random.default_rng(seed)
    img = np.full((size, size), 128.0)
    yy, xx = np.mgrid[0:size, 0:size]
    for _ in range(n_shapes):
        cy, cx = rng.uniform(0, size, size=2)
        ay, ax = rng.uniform(2, size / 8, size=2)
        theta = rng.uniform(0, np.pi)
        level = rng.uniform(5, 250)
        ry = (yy - cy) * np.cos(theta) + (xx - cx) * np.sin(theta)
        rx = -(yy - cy) * np.sin(theta) + (xx - cx) * np.cos(theta)
        img[(ry / ay) ** 2 + (rx / ax) ** 2 <= 1.0] = level
    return ImageF(img)


def make_default_cases(n_cases: int = 10, size: int = 256, seed: int = 0,
                       snippet_side: int = 32,
                       blend: str = "feathered") -> list[BenchmarkCase]:
    """The shipped dataset recipe: RPN backgrounds over a grid of power-law
    spectra, each corrupted by one snippet cut from a structured collage
    image and blended in place."""
    rng = np.random.default_rng(seed)
    cases = []
    for i in range(n_cases):
        alpha = _SPECTRUM_ALPHAS[i % len(_SPECTRUM_ALPHAS)]
        src = power_law_texture(size, size, alpha, seed=int(rng.integers(2**31)))
        clean = generate_rpn(src, seed=int(rng.integers(2**31)))
        donor = structured_donor(size, seed=int(rng.integers(2**31)))
        side = snippet_side + int(rng.integers(-4, 5))
        sy = int(rng.integers(0, size - side))
        sx = int(rng.integers(0, size - side))
        snippet = ImageF(donor.data[sy : sy + side, sx : sx + side, :])
        margin = 40
        py = int(rng.integers(margin, size - side - margin))
        px = int(rng.integers(margin, size - side - margin))
        case = insert_anomaly(clean, snippet, (py, px), blend=blend)
        cases.append(BenchmarkCase(clean=case.clean, corrupted=case.corrupted,
                                   gt_mask=case.gt_mask, case_id=f"case{i:03d}"))
    return cases


# ---------------------------------------------------------------------------
# metrics
# ---------------------------------------------------------------------------

def pixel_metrics(mask: np.ndarray, gt: np.ndarray) -> tuple[float, float]:
    """Percent of anomalous pixels detected and percent of normal pixels
    falsely detected."""
    if mask.shape != gt.shape:
        raise ValueError("mask/gt shape mismatch")
    gt = gt.astype(bool)
    mask = mask.astype(bool)
    n_pos = int(gt.sum())
    n_neg = gt.size - n_pos
    tp = float(100.0 * np.logical_and(mask, gt).sum() / n_pos) if n_pos else 0.0
    fp = float(100.0 * np.logical_and(mask, ~gt).sum() / n_neg) if n_neg else 0.0
    return tp, fp


def anomaly_metrics(mask: np.ndarray, gt: np.ndarray) -> tuple[int, int]:
    """Region-level hit/false-alarm flags: a hit when any detected pixel
    falls in the anomalous region, a (single) false alarm when some
    connected detection component lies completely outside it."""
    if mask.shape != gt.shape:
        raise ValueError("mask/gt shape mismatch")
    gt = gt.astype(bool)
    mask = mask.astype(bool)
    tp = 1 if np.logical_and(mask, gt).any() else 0
    fp = 0
    labels, n = scipy.ndimage.label(mask, structure=np.ones((3, 3), dtype=int))
    for comp in range(1, n + 1):
        if not gt[labels == comp].any():
            fp = 1
            break
    return tp, fp


def _anomalousness(result_nfa) -> np.ndarray:
    """Per-pixel score where larger means more anomalous (sweepable)."""
    if isinstance(result_nfa, NfaMap):
        return -result_nfa.log10_values.data[:, :, 0]
    return result_nfa.data[:, :, 0]


def roc_curve(score_maps, gts, n_points: int = 512) -> RocCurve:
    """Pooled threshold sweep over the dataset.

    Accepts a single (map, gt) pair or matching lists; scores are taken
    from NFA maps as -log10(NFA) or used directly. The AUC integrates the
    TP rate over log10(FP rate) on [-8, 0] (trapezoidal, so a perfect
    detector scores 8.0 and tp = fp scores about 0.43).
    """
    if not isinstance(score_maps, (list, tuple)):
        score_maps = [score_maps]
        gts = [gts]
    scores = []
    labels = []
    for sm, gt in zip(score_maps, gts):
        gt = np.asarray(gt, dtype=bool)
        if not gt.any() or gt.all():
            raise ValueError("ground truth must be nonempty and not full")
        scores.append(_anomalousness(sm).ravel())
        labels.append(gt.ravel())
    scores = np.concatenate(scores)
    labels = np.concatenate(labels)
    order = np.argsort(-scores, kind="stable")
    sorted_labels = labels[order]
    tp_cum = np.cumsum(sorted_labels)
    fp_cum = np.cumsum(~sorted_labels)
    n_pos = int(labels.sum())
    n_neg = labels.size - n_pos
    # merge ties: a threshold can only sit between distinct score values
    sorted_scores = scores[order]
    last_of_run = np.flatnonzero(np.diff(sorted_scores) != 0)
    idx = np.concatenate([last_of_run, [scores.size - 1]])
    tp = tp_cum[idx] / n_pos
    fp = fp_cum[idx] / n_neg
    if len(idx) > n_points:
        keep = np.unique(np.linspace(0, len(idx) - 1, n_points).astype(int))
        tp = tp[keep]
        fp = fp[keep]
    points = np.stack([fp, tp], axis=1)
    return RocCurve(points=points, auc_log=_auc_log(points))


def _auc_log(points: np.ndarray) -> float:
    """Trapezoidal integral of TP over log10(FP) across AUC_LOG_SPAN.

    The curve is extended left of its smallest positive FP with the TP
    level reached at zero false positives, and right to (1, 1).
    """
    lo, hi = AUC_LOG_SPAN
    fp = points[:, 0]
    tp = points[:, 1]
    tp_at_zero = 0.0
    pos = fp > 0
    if (~pos).any():
        tp_at_zero = float(tp[~pos].max())
    xs = [lo]
    ys = [tp_at_zero]
    for f, t in zip(fp[pos], tp[pos]):
        x = np.log10(f)
        if x < lo:
            ys[0] = max(ys[0], float(t))
            continue
        xs.append(float(x))
        ys.append(float(t))
    if xs[-1] < hi:
        xs.append(hi)
        ys.append(1.0 if fp.max() >= 1.0 or tp[-1] >= 1.0 else float(tp[-1]))
    xs = np.asarray(xs)
    ys = np.asarray(ys)
    keep = np.concatenate([[True], np.diff(xs) > 0])
    return float(np.trapezoid(ys[keep], xs[keep]))


# ---------------------------------------------------------------------------
# suite driver
# ---------------------------------------------------------------------------

@dataclass
class SuiteEntry:
    metrics: MetricsRow | None
    metrics_fixed_fp: MetricsRow | None
    roc: RocCurve | None
    seconds: float
    failures: list


def run_suite(cases, configs, epsilon: float | None = None,
              fixed_fp_pct: float = 1.0) -> dict[str, SuiteEntry]:
    """Evaluate detectors over the dataset.

    Produces, per detector: aggregate pixel/anomaly rates at the working
    epsilon, the same at a threshold retuned for `fixed_fp_pct` percent
    false pixels (pooled), the pooled ROC curve, and wall-clock seconds.
    Per-case detector failures are recorded, not silently dropped.
    """
    if not cases:
        raise ValueError("need at least one case")
    out: dict[str, SuiteEntry] = {}
    for cfg in configs:
        if epsilon is not None:
            cfg = DetectorConfig(**{**cfg.__dict__, "epsilon": epsilon})
        results = []
        kept_cases = []
        failures = []
        t0 = time.perf_counter()
        for case in cases:
            try:
                results.append(run_detector(case.corrupted, cfg))
                kept_cases.append(case)
            except Exception as exc:  # noqa: BLE001 - recorded per case
                failures.append((case.case_id, f"{type(exc).__name__}: {exc}"))
        seconds = time.perf_counter() - t0
        if not results:
            out[cfg.method] = SuiteEntry(None, None, None, seconds, failures)
            continue
        masks = [r.mask for r in results]
        gts = [c.gt_mask for c in kept_cases]
        metrics = _aggregate(masks, gts)
        score_maps = [r.nfa for r in results]
        roc = roc_curve(score_maps, gts)
        fixed_masks = _masks_at_fixed_fp(score_maps, gts, fixed_fp_pct)
        metrics_fp = _aggregate(fixed_masks, gts)
        out[cfg.method] = SuiteEntry(metrics, metrics_fp, roc, seconds, failures)
    return out


def _aggregate(masks, gts) -> MetricsRow:
    tp_hits = fp_hits = n_pos = n_neg = 0
    tp_anom = fp_anom = 0
    for mask, gt in zip(masks, gts):
        gt = gt.astype(bool)
        tp_hits += int(np.logical_and(mask, gt).sum())
        fp_hits += int(np.logical_and(mask, ~gt).sum())
        n_pos += int(gt.sum())
        n_neg += int(gt.size - gt.sum())
        ta, fa = anomaly_metrics(mask, gt)
        tp_anom += ta
        fp_anom += fa
    n = len(masks)
    return MetricsRow(
        tp_pixel_pct=100.0 * tp_hits / n_pos if n_pos else 0.0,
        fp_pixel_pct=100.0 * fp_hits / n_neg if n_neg else 0.0,
        tp_anomaly_pct=100.0 * tp_anom / n,
        fp_anomaly_pct=100.0 * fp_anom / n,
    )


def _masks_at_fixed_fp(score_maps, gts, fp_pct: float):
    """Retune one pooled threshold so the dataset-wide false-pixel rate is
    as close to fp_pct as achievable, then re-threshold each map."""
    scores = []
    negatives = []
    for sm, gt in zip(score_maps, gts):
        s = _anomalousness(sm)
        scores.append(s)
        negatives.append(s[~gt.astype(bool)])
    pooled = np.sort(np.concatenate([n.ravel() for n in negatives]))[::-1]
    k = max(1, int(round(fp_pct / 100.0 * pooled.size)))
    thresh = pooled[min(k, pooled.size) - 1]
    return [s >= thresh for s in scores]


# ---------------------------------------------------------------------------
# dataset on disk
# ---------------------------------------------------------------------------

def save_dataset(cases, out_dir, meta: dict | None = None) -> None:
    """Case subfolders with clean.png / corrupted.png / gt.png / meta.json."""
    os.makedirs(out_dir, exist_ok=True)
    for case in cases:
        d = os.path.join(out_dir, case.case_id)
        os.makedirs(d, exist_ok=True)
        write_image(case.clean, os.path.join(d, "clean.png"), bit_depth=16)
        write_image(case.corrupted, os.path.join(d, "corrupted.png"), bit_depth=16)
        write_image(ImageF(case.gt_mask * 255.0), os.path.join(d, "gt.png"))
        info = {"case_id": case.case_id}
        if meta:
            info.update(meta)
        tmp = os.path.join(d, "meta.json.tmp")
        with open(tmp, "w") as f:
            json.dump(info, f, indent=2, sort_keys=True)
        os.replace(tmp, os.path.join(d, "meta.json"))


def load_dataset(in_dir) -> list[BenchmarkCase]:
    cases = []
    for name in sorted(os.listdir(in_dir)):
        d = os.path.join(in_dir, name)
        if not os.path.isdir(d):
            continue
        clean = read_image(os.path.join(d, "clean.png"))
        corrupted = read_image(os.path.join(d, "corrupted.png"))
        gt = read_image(os.path.join(d, "gt.png")).plane(0) > 127
        cases.append(BenchmarkCase(clean=clean, corrupted=corrupted,
                                   gt_mask=gt, case_id=name))
    if not cases:
        raise ValueError(f"no cases found under {in_dir}")
    return cases


def write_metrics_csv(entries: dict[str, SuiteEntry], epsilon: float, path) -> None:
    path = os.fspath(path)
    tmp = path + ".tmp"
    with open(tmp, "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(["detector", "epsilon", "variant", *MetricsRow.FIELDS,
                    "auc_log", "seconds", "failures"])
        for method, entry in entries.items():
            for variant, row in (("epsilon", entry.metrics),
                                 ("fp1pct", entry.metrics_fixed_fp)):
                if row is None:
                    w.writerow([method, epsilon, variant] + ["" for _ in range(5)]
                               + [f"{entry.seconds:.3f}", len(entry.failures)])
                    continue
                w.writerow([
                    method, epsilon, variant,
                    f"{row.tp_pixel_pct:.6g}", f"{row.fp_pixel_pct:.6g}",
                    f"{row.tp_anomaly_pct:.6g}", f"{row.fp_anomaly_pct:.6g}",
                    f"{entry.roc.auc_log:.6g}" if entry.roc else "",
                    f"{entry.seconds:.3f}", len(entry.failures),
                ])
    os.replace(tmp, path)


def write_roc_csv(entries: dict[str, SuiteEntry], path) -> None:
    path = os.fspath(path)
    tmp = path + ".tmp"
    with open(tmp, "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(["detector", "fp_rate", "tp_rate"])
        for method, entry in entries.items():
            if entry.roc is None:
                continue
            for fp, tp in entry.roc.points:
                w.writerow([method, f"{fp:.8g}", f"{tp:.8g}"])
    os.replace(tmp, path)
