"""Image containers and the shared raster operations.

Images are stored as float64 arrays of shape (height, width, channels),
row-major with interleaved channels. Values live on a [0, 255] scale for
8- and 16-bit sources alike, but nothing clamps intermediate results:
residuals, score maps and NFA maps reuse the same container.
"""

from __future__ import annotations

import os
import struct
from dataclasses import dataclass, field

import numpy as np
import scipy.fft
import scipy.ndimage
from PIL import Image

_BOUNDARY_MODES = {"mirror": "reflect", "periodic": "wrap"}

IMGF_MAGIC = b"IMGF"


@dataclass(frozen=True)
class ImageF:
    """Multi-channel float raster, the carrier for inputs, residuals and maps."""

    data: np.ndarray

    def __post_init__(self):
        arr = np.asarray(self.data, dtype=np.float64)
        if arr.ndim == 2:
            arr = arr[:, :, None]
        if arr.ndim != 3:
            raise ValueError(f"expected 2-D or 3-D array, got shape {arr.shape}")
        if arr.shape[2] not in (1, 3):
            raise ValueError(f"unsupported channel count {arr.shape[2]}")
        if not np.isfinite(arr).all():
            raise ValueError("image contains NaN or Inf values")
        object.__setattr__(self, "data", arr)

    @property
    def height(self) -> int:
        return self.data.shape[0]

    @property
    def width(self) -> int:
        return self.data.shape[1]

    @property
    def channels(self) -> int:
        return self.data.shape[2]

    def plane(self, c: int) -> np.ndarray:
        """Single channel as a 2-D view."""
        return self.data[:, :, c]

    def __eq__(self, other) -> bool:
        return isinstance(other, ImageF) and np.array_equal(self.data, other.data)


@dataclass(frozen=True)
class Pyramid:
    """Gaussian pyramid; level 0 is the input, each next level downsampled by `factor`."""

    levels: list[ImageF]
    factor: int = 2

    def __post_init__(self):
        if not self.levels:
            raise ValueError("pyramid needs at least one level")
        for lv in self.levels:
            if lv.height < 16 or lv.width < 16:
                raise ValueError("pyramid level smaller than 16x16")


@dataclass(frozen=True)
class PatchGrid:
    """Flattened square patches on a stride lattice.

    `positions` holds (row, col) of each patch's top-left corner; `vectors`
    holds the patch pixels flattened row-major with channels interleaved,
    one row per patch.
    """

    patch_side: int
    stride: int
    positions: np.ndarray
    vectors: np.ndarray

    @property
    def n_patches(self) -> int:
        return self.positions.shape[0]


@dataclass(frozen=True)
class NoiseEstimate:
    """Estimated additive white Gaussian noise std, one entry per channel."""

    sigma: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "sigma", np.asarray(self.sigma, dtype=np.float64))


def to_grayscale(img: ImageF) -> ImageF:
    """Collapse RGB to the per-pixel channel mean; 1-channel input is returned as is."""
    if img.channels == 1:
        return img
    if img.channels != 3:
        raise ValueError(f"unsupported channel count {img.channels}")
    return ImageF(img.data.mean(axis=2))


def _gauss_kernel1d(sigma: float) -> np.ndarray:
    radius = max(1, int(np.ceil(3.0 * sigma)))
    x = np.arange(-radius, radius + 1, dtype=np.float64)
    k = np.exp(-0.5 * (x / sigma) ** 2)
    return k / k.sum()


def gaussian_pyramid(img: ImageF, n_levels: int, factor: int = 2) -> Pyramid:
    """Blur (std 0.8*factor) and subsample repeatedly.

    Level k has dimensions ceil(previous / factor); raises if the coarsest
    level would drop below 16x16.
    """
    if n_levels < 1:
        raise ValueError("n_levels must be >= 1")
    coarse_h = img.height
    coarse_w = img.width
    for _ in range(n_levels - 1):
        coarse_h = -(-coarse_h // factor)
        coarse_w = -(-coarse_w // factor)
    if coarse_h < 16 or coarse_w < 16:
        raise ValueError(
            f"n_levels={n_levels} too large: coarsest level would be {coarse_h}x{coarse_w}"
        )

    k1 = _gauss_kernel1d(0.8 * factor)
    levels = [img]
    cur = img.data
    for _ in range(n_levels - 1):
        blurred = np.empty_like(cur)
        for c in range(cur.shape[2]):
            tmp = scipy.ndimage.correlate1d(cur[:, :, c], k1, axis=0, mode="reflect")
            blurred[:, :, c] = scipy.ndimage.correlate1d(tmp, k1, axis=1, mode="reflect")
        cur = blurred[::factor, ::factor, :]
        levels.append(ImageF(cur))
    return Pyramid(levels=levels, factor=factor)


def convolve(img: ImageF, kernel: np.ndarray, boundary: str = "mirror") -> ImageF:
    """Same-size discrete correlation of each channel with an odd-sided kernel.

    `boundary` is "mirror" (symmetric extension, edge sample repeated) or
    "periodic". For the symmetric kernels used here correlation and
    convolution coincide.
    """
    kernel = np.asarray(kernel, dtype=np.float64)
    if kernel.ndim != 2 or kernel.shape[0] % 2 == 0 or kernel.shape[1] % 2 == 0:
        raise ValueError(f"kernel must be odd-sided 2-D, got shape {kernel.shape}")
    if boundary not in _BOUNDARY_MODES:
        raise ValueError(f"boundary must be one of {sorted(_BOUNDARY_MODES)}")
    mode = _BOUNDARY_MODES[boundary]
    out = np.empty_like(img.data)
    for c in range(img.channels):
        out[:, :, c] = scipy.ndimage.correlate(img.plane(c), kernel, mode=mode)
    return ImageF(out)


def disk_kernel(radius: int, normalized: bool = True) -> np.ndarray:
    """Binary disk of the given radius; normalized to unit sum by default."""
    if radius < 1:
        raise ValueError("radius must be >= 1")
    y, x = np.mgrid[-radius : radius + 1, -radius : radius + 1]
    k = (x * x + y * y <= radius * radius).astype(np.float64)
    if normalized:
        k /= k.sum()
    return k


def fft2(img: ImageF) -> np.ndarray:
    """Unnormalized 2-D DFT of a single-channel image (DC = sum of pixels)."""
    if img.channels != 1:
        raise ValueError("fft2 expects a single-channel image")
    return np.fft.fft2(img.plane(0))


def ifft2(spec: np.ndarray) -> ImageF:
    """Inverse of :func:`fft2`; returns the real part.

    Callers are expected to hand in Hermitian-symmetric spectra, so the
    imaginary part is numerical dust and is dropped.
    """
    return ImageF(np.real(np.fft.ifft2(spec)))


def extract_patches(img: ImageF, patch_side: int, stride: int = 1) -> PatchGrid:
    """All patches whose top-left corner lies on the stride lattice."""
    if patch_side > min(img.height, img.width):
        raise ValueError("patch larger than image")
    if stride < 1:
        raise ValueError("stride must be >= 1")
    s = patch_side
    windows = np.lib.stride_tricks.sliding_window_view(img.data, (s, s), axis=(0, 1))
    # windows shape: (H-s+1, W-s+1, channels, s, s)
    ys = np.arange(0, img.height - s + 1, stride)
    xs = np.arange(0, img.width - s + 1, stride)
    sel = windows[np.ix_(ys, xs)]
    # reorder to (n, s, s, channels) then flatten row-major, channels fastest
    vectors = sel.transpose(0, 1, 3, 4, 2).reshape(len(ys) * len(xs), -1)
    gy, gx = np.meshgrid(ys, xs, indexing="ij")
    positions = np.stack([gy.ravel(), gx.ravel()], axis=1)
    return PatchGrid(
        patch_side=s,
        stride=stride,
        positions=positions,
        vectors=np.ascontiguousarray(vectors),
    )


def average_patch_reconstruction(grid: PatchGrid, height: int, width: int,
                                 channels: int = 1) -> ImageF:
    """Average overlapping patch vectors back onto the pixel grid."""
    s = grid.patch_side
    acc = np.zeros((height, width, channels))
    cov = np.zeros((height, width, 1))
    cube = grid.vectors.reshape(-1, s, s, channels)
    for (y, x), patch in zip(grid.positions, cube):
        acc[y : y + s, x : x + s, :] += patch
        cov[y : y + s, x : x + s, 0] += 1.0
    cov[cov == 0] = 1.0
    return ImageF(acc / cov)


# Frequency split used by the noise estimator: DCT indices with i+j >= 8
# carry almost no content in flat blocks, so their energy is noise.
_NOISE_BLOCK = 8


def estimate_noise_sigma(img: ImageF) -> NoiseEstimate:
    """Estimate the std of additive white Gaussian noise per channel.

    Block-based percentile estimator: 8x8 blocks are ranked by their
    low-frequency (structure) energy, and sigma is read off the
    high-frequency DCT energy of the flattest 1%. Robust to moderate image
    structure; returns 0 for constant channels.
    """
    if img.height < 16 or img.width < 16:
        raise ValueError("image too small for noise estimation (need >= 16x16)")
    b = _NOISE_BLOCK
    stride = 4
    sigmas = []
    ii, jj = np.meshgrid(np.arange(b), np.arange(b), indexing="ij")
    high = (ii + jj) >= b
    low = ~high
    low[0, 0] = False  # DC is brightness, not structure
    for c in range(img.channels):
        plane = img.plane(c)
        win = np.lib.stride_tricks.sliding_window_view(plane, (b, b))
        blocks = win[::stride, ::stride].reshape(-1, b, b)
        coefs = scipy.fft.dctn(blocks, axes=(1, 2), norm="ortho")
        structure = np.sum(coefs[:, low] ** 2, axis=1)
        n_keep = max(16, int(np.ceil(0.01 * len(blocks))))
        n_keep = min(n_keep, len(blocks))
        flattest = np.argpartition(structure, n_keep - 1)[:n_keep]
        high_energy = np.mean(coefs[flattest][:, high] ** 2, axis=1)
        sigmas.append(float(np.sqrt(np.median(high_energy))))
    return NoiseEstimate(sigma=np.array(sigmas))


# ---------------------------------------------------------------------------
# File I/O: PNG / PGM / PPM via Pillow, plus a raw float round-trip format.
# ---------------------------------------------------------------------------

def read_image(path) -> ImageF:
    """Read an 8- or 16-bit PNG/PGM/PPM; 16-bit data is rescaled to [0, 255]."""
    with Image.open(path) as im:
        im.load()
        if im.mode in ("I;16", "I;16B", "I;16L", "I"):
            arr = np.asarray(im, dtype=np.float64)
            if im.mode == "I":
                # 32-bit grayscale containers typically hold 16-bit data
                arr = np.clip(arr, 0, 65535)
            arr = arr / 257.0
        elif im.mode in ("L", "RGB"):
            arr = np.asarray(im, dtype=np.float64)
        elif im.mode in ("P", "RGBA", "LA"):
            arr = np.asarray(im.convert("RGB"), dtype=np.float64)
        else:
            raise ValueError(f"unsupported image mode {im.mode!r} in {path}")
    return ImageF(arr)


def write_image(img: ImageF, path, bit_depth: int = 8) -> None:
    """Write a PNG/PGM/PPM file, clamping to the [0, 255] scale."""
    if bit_depth not in (8, 16):
        raise ValueError("bit_depth must be 8 or 16")
    data = img.data[:, :, 0] if img.channels == 1 else img.data
    if bit_depth == 8:
        arr = np.clip(np.rint(data), 0, 255).astype(np.uint8)
        pil = Image.fromarray(arr)
    else:
        arr = np.clip(np.rint(data * 257.0), 0, 65535).astype(np.uint16)
        if arr.ndim == 3:
            raise ValueError("16-bit output is grayscale only")
        pil = Image.fromarray(arr, mode="I;16")
    _atomic_save(pil, path)


def _atomic_save(pil: Image.Image, path) -> None:
    path = os.fspath(path)
    tmp = path + ".tmp"
    fmt = Image.registered_extensions().get(os.path.splitext(path)[1].lower())
    pil.save(tmp, format=fmt)
    os.replace(tmp, path)


def write_imgf(img: ImageF, path) -> None:
    """Raw float raster: 16-byte header (magic, w, h, c) then float64 row-major."""
    path = os.fspath(path)
    header = IMGF_MAGIC + struct.pack("<III", img.width, img.height, img.channels)
    tmp = path + ".tmp"
    with open(tmp, "wb") as f:
        f.write(header)
        f.write(np.ascontiguousarray(img.data, dtype="<f8").tobytes())
    os.replace(tmp, path)


def read_imgf(path) -> ImageF:
    with open(path, "rb") as f:
        header = f.read(16)
        if len(header) != 16 or header[:4] != IMGF_MAGIC:
            raise ValueError(f"{path}: not an IMGF file")
        w, h, c = struct.unpack("<III", header[4:])
        data = np.frombuffer(f.read(), dtype="<f8")
    if data.size != w * h * c:
        raise ValueError(f"{path}: truncated IMGF payload")
    return ImageF(data.reshape(h, w, c).copy())
