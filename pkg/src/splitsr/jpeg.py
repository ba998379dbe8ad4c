"""JPEG round-trip simulation: YCbCr, 8x8 DCT, quantization and back.

No entropy coding and no chroma subsampling; only the lossy part of the
codec is reproduced. Pixel values stay continuous (no 8-bit rounding).
"""
import numpy as np

# ITU-T T.81 Annex K, tables K.1 and K.2
LUMA_TABLE = np.array([
    [16, 11, 10, 16, 24, 40, 51, 61],
    [12, 12, 14, 19, 26, 58, 60, 55],
    [14, 13, 16, 24, 40, 57, 69, 56],
    [14, 17, 22, 29, 51, 87, 80, 62],
    [18, 22, 37, 56, 68, 109, 103, 77],
    [24, 35, 55, 64, 81, 104, 113, 92],
    [49, 64, 78, 87, 103, 121, 120, 101],
    [72, 92, 95, 98, 112, 100, 103, 99],
], dtype=np.float64)

CHROMA_TABLE = np.array([
    [17, 18, 24, 47, 99, 99, 99, 99],
    [18, 21, 26, 66, 99, 99, 99, 99],
    [24, 26, 56, 99, 99, 99, 99, 99],
    [47, 66, 99, 99, 99, 99, 99, 99],
    [99, 99, 99, 99, 99, 99, 99, 99],
    [99, 99, 99, 99, 99, 99, 99, 99],
    [99, 99, 99, 99, 99, 99, 99, 99],
    [99, 99, 99, 99, 99, 99, 99, 99],
], dtype=np.float64)


def quant_table(base, quality):
    """IJG quality scaling of a base table."""
    quality = int(np.clip(quality, 1, 100))
    scale = 5000 // quality if quality < 50 else 200 - 2 * quality
    return np.clip(np.floor((base * scale + 50) / 100), 1, 255)


def dct_matrix(n=8):
    k = np.arange(n)[:, None]
    x = np.arange(n)[None, :]
    m = np.cos((2 * x + 1) * k * np.pi / (2 * n)) * np.sqrt(2.0 / n)
    m[0] /= np.sqrt(2.0)
    return m


_DCT = dct_matrix()


def rgb_to_ycbcr(rgb):
    """JFIF full-range conversion; input and output on the 0..255 scale."""
    r, g, b = rgb
    y = 0.299 * r + 0.587 * g + 0.114 * b
    cb = -0.168736 * r - 0.331264 * g + 0.5 * b + 128.0
    cr = 0.5 * r - 0.418688 * g - 0.081312 * b + 128.0
    return np.stack([y, cb, cr])


def ycbcr_to_rgb(ycc):
    y, cb, cr = ycc[0], ycc[1] - 128.0, ycc[2] - 128.0
    r = y + 1.402 * cr
    g = y - 0.344136 * cb - 0.714136 * cr
    b = y + 1.772 * cb
    return np.stack([r, g, b])


def _blocks(plane):
    h, w = plane.shape
    return plane.reshape(h // 8, 8, w // 8, 8).transpose(0, 2, 1, 3)


def _unblocks(blocks):
    bh, bw = blocks.shape[:2]
    return blocks.transpose(0, 2, 1, 3).reshape(bh * 8, bw * 8)


def _code_plane(plane, table):
    b = _blocks(plane - 128.0)
    coef = _DCT @ b @ _DCT.T
    coef = np.round(coef / table) * table
    return _unblocks(_DCT.T @ coef @ _DCT) + 128.0


def jpeg_degrade(image, quality):
    """Simulated JPEG compression of a (3, H, W) image in [0, 1]."""
    img = np.asarray(image, dtype=np.float64)
    if img.ndim != 3 or img.shape[0] != 3:
        raise ValueError(f"jpeg_degrade expects a (3, H, W) image, got {img.shape}")
    if not 1 <= quality <= 100:
        raise ValueError(f"jpeg quality must be in [1, 100], got {quality}")
    _, h, w = img.shape
    ph, pw = (-h) % 8, (-w) % 8
    if ph or pw:
        img = np.pad(img, ((0, 0), (0, ph), (0, pw)), mode="edge")
    ycc = rgb_to_ycbcr(img * 255.0)
    tables = (quant_table(LUMA_TABLE, quality), quant_table(CHROMA_TABLE, quality),
              quant_table(CHROMA_TABLE, quality))
    coded = np.stack([_code_plane(ycc[i], tables[i]) for i in range(3)])
    rgb = ycbcr_to_rgb(coded) / 255.0
    return np.clip(rgb[:, :h, :w], 0.0, 1.0)
