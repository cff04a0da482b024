"""Frozen linear image codec standing in for a trained autoencoder.

``encode`` projects the centred image ``x - 0.5`` onto ``dim`` orthonormal
directions (the leading principal directions of the calibration corpus) and
rescales each coordinate to unit variance over that corpus. ``decode`` undoes
the scaling, maps back through the transposed basis and clamps to ``[0, 1]``.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

LATENT_DIM = 16


class ImageError(ValueError):
    pass


def validate_images(x: np.ndarray) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    if x.ndim not in (3, 4) or x.shape[-1] != 3:
        raise ImageError(f"expected (H, W, 3) or (N, H, W, 3) images, got shape {x.shape}")
    if not np.all(np.isfinite(x)) or x.min() < 0.0 or x.max() > 1.0:
        raise ImageError("pixel values must lie in [0, 1]")
    return x


@dataclass(frozen=True)
class LatentCodec:
    basis: np.ndarray  # (dim, H*W*3), orthonormal rows
    scale: np.ndarray  # (dim,)
    image_shape: tuple[int, int, int]

    @property
    def dim(self) -> int:
        return self.basis.shape[0]

    @classmethod
    def calibrate(cls, images: np.ndarray, dim: int = LATENT_DIM) -> "LatentCodec":
        images = validate_images(images)
        if images.ndim != 4:
            raise ImageError("calibration needs a batch of images")
        flat = images.reshape(len(images), -1) - 0.5
        _, _, vt = np.linalg.svd(flat, full_matrices=False)
        basis = vt[:dim].copy()
        # deterministic sign: largest-magnitude entry of each row positive
        pivots = np.argmax(np.abs(basis), axis=1)
        basis *= np.sign(basis[np.arange(dim), pivots])[:, None]
        proj = flat @ basis.T
        scale = 1.0 / proj.std(axis=0)
        return cls(basis=basis, scale=scale, image_shape=tuple(images.shape[1:]))

    def encode(self, x: np.ndarray) -> np.ndarray:
        """Image(s) -> latent(s); a single image gives shape (dim,), a batch (N, dim)."""
        return self.encode_raw(validate_images(x))

    def encode_raw(self, x: np.ndarray) -> np.ndarray:
        """Projection without the pixel-range check; inverse of :meth:`decode_raw`."""
        x = np.asarray(x, dtype=np.float64)
        if x.shape[-3:] != self.image_shape:
            raise ImageError(f"image shape {x.shape[-3:]} does not match codec {self.image_shape}")
        flat = x.reshape(*x.shape[:-3], -1) - 0.5
        return (flat @ self.basis.T) * self.scale

    def decode_raw(self, z: np.ndarray) -> np.ndarray:
        """Unclamped inverse of :meth:`encode` on the latent subspace."""
        z = np.asarray(z, dtype=np.float64)
        if z.shape[-1] != self.dim:
            raise ValueError(f"latent dimension {z.shape[-1]} does not match codec {self.dim}")
        if not np.all(np.isfinite(z)):
            raise ValueError("latent contains non-finite values")
        flat = (z / self.scale) @ self.basis + 0.5
        return flat.reshape(*z.shape[:-1], *self.image_shape)

    def decode(self, z: np.ndarray) -> np.ndarray:
        return np.clip(self.decode_raw(z), 0.0, 1.0)

    # -- persistence ------------------------------------------------------------
    def save(self, path: str | Path) -> None:
        np.savez(path, basis=self.basis, scale=self.scale, image_shape=np.asarray(self.image_shape))

    @classmethod
    def load(cls, path: str | Path) -> "LatentCodec":
        with np.load(path) as f:
            return cls(
                basis=f["basis"], scale=f["scale"], image_shape=tuple(int(v) for v in f["image_shape"])
            )


# -- file formats ------------------------------------------------------------------

def write_ppm(path: str | Path, image: np.ndarray) -> None:
    """Binary P6, 8 bits per channel."""
    image = validate_images(image)
    h, w, _ = image.shape
    pixels = np.round(image * 255.0).astype(np.uint8)
    with open(path, "wb") as f:
        f.write(f"P6\n{w} {h}\n255\n".encode("ascii"))
        f.write(pixels.tobytes())


def read_ppm(path: str | Path) -> np.ndarray:
    raw = Path(path).read_bytes()
    tokens: list[bytes] = []
    pos = 0
    while len(tokens) < 4:
        while raw[pos:pos + 1].isspace():
            pos += 1
        if raw[pos:pos + 1] == b"#":
            pos = raw.index(b"\n", pos) + 1
            continue
        end = pos
        while not raw[end:end + 1].isspace():
            end += 1
        tokens.append(raw[pos:end])
        pos = end
    if tokens[0] != b"P6":
        raise ImageError(f"{path}: not a binary PPM (P6) file")
    w, h, maxval = (int(t) for t in tokens[1:])
    pos += 1  # single whitespace byte after maxval
    data = np.frombuffer(raw, dtype=np.uint8, count=w * h * 3, offset=pos)
    return data.reshape(h, w, 3).astype(np.float64) / maxval


def write_latent(path: str | Path, z: np.ndarray) -> None:
    """Little-endian: uint64 dimension header, then float64 values."""
    z = np.asarray(z, dtype="<f8").ravel()
    with open(path, "wb") as f:
        f.write(struct.pack("<Q", z.size))
        f.write(z.tobytes())


def read_latent(path: str | Path) -> np.ndarray:
    raw = Path(path).read_bytes()
    (n,) = struct.unpack_from("<Q", raw, 0)
    if len(raw) != 8 + 8 * n:
        raise ValueError(f"{path}: header says {n} values but file holds {(len(raw) - 8) / 8}")
    return np.frombuffer(raw, dtype="<f8", offset=8).astype(np.float64)
