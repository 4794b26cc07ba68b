"""File ingestion and emission: cameras, images, environment faces, checkpoints.

Images are 8-bit PNG (sRGB-encoded) or 32-bit float PFM (linear, stored
bottom-up, little-endian). All in-memory pixel data is linear radiance.
"""

from __future__ import annotations

import json
import os

import numpy as np
from PIL import Image

from .scene import Camera, ImageBuffer

CHECKPOINT_FORMAT = "pbrsplat-checkpoint-v1"

ENV_FACE_NAMES = ("posx", "negx", "posy", "negy", "posz", "negz")


class CheckpointVersionError(ValueError):
    pass


def srgb_to_linear(s):
    s = np.asarray(s, dtype=np.float64)
    return np.where(s <= 0.04045, s / 12.92, ((s + 0.055) / 1.055) ** 2.4)


def linear_to_srgb(l):
    l = np.clip(np.asarray(l, dtype=np.float64), 0.0, 1.0)
    return np.where(l <= 0.0031308, 12.92 * l, 1.055 * l ** (1 / 2.4) - 0.055)


# linear radiance of each 8-bit sRGB code; quantization picks the nearest
# code in linear space, which minimizes the round-trip error
_CODE_LINEAR = srgb_to_linear(np.arange(256) / 255.0)


def _quantize_linear(x):
    x = np.clip(np.asarray(x, dtype=np.float64), 0.0, 1.0)
    idx = np.searchsorted(_CODE_LINEAR, x)
    idx = np.clip(idx, 1, 255)
    lo = _CODE_LINEAR[idx - 1]
    hi = _CODE_LINEAR[idx]
    take_lo = (x - lo) <= (hi - x)
    return np.where(take_lo, idx - 1, idx).astype(np.uint8)


def load_cameras(path) -> list[Camera]:
    """Parse the camera JSON file; one Camera per frame."""
    if not os.path.exists(path):
        raise FileNotFoundError(f"camera file not found: {path}")
    with open(path) as f:
        doc = json.load(f)
    frames = doc.get("frames")
    if not frames:
        raise ValueError(f"no cameras in {path}")
    cams = []
    for i, fr in enumerate(frames):
        try:
            cams.append(Camera(
                fx=float(fr["fx"]), fy=float(fr["fy"]),
                cx=float(fr["cx"]), cy=float(fr["cy"]),
                R=np.asarray(fr["R"], dtype=np.float64).reshape(3, 3),
                t=np.asarray(fr["t"], dtype=np.float64),
                width=int(fr["width"]), height=int(fr["height"]),
                name=str(fr.get("file_path", f"frame_{i:03d}")),
            ))
        except KeyError as e:
            raise ValueError(f"frame {i}: missing field {e}") from e
    return cams


def save_cameras(path, cams: list[Camera]):
    frames = [{
        "file_path": c.name, "width": c.width, "height": c.height,
        "fx": c.fx, "fy": c.fy, "cx": c.cx, "cy": c.cy,
        "R": [float(x) for x in c.R.reshape(-1)],
        "t": [float(x) for x in c.t],
    } for c in cams]
    with open(path, "w") as f:
        json.dump({"frames": frames}, f, indent=1)


def _read_pfm(path):
    with open(path, "rb") as f:
        header = f.readline().decode("ascii").strip()
        if header not in ("PF", "Pf"):
            raise ValueError(f"not a PFM file: {path}")
        dims = f.readline().decode("ascii").split()
        w, h = int(dims[0]), int(dims[1])
        scale = float(f.readline().decode("ascii").strip())
        channels = 3 if header == "PF" else 1
        data = np.frombuffer(f.read(w * h * channels * 4),
                             dtype="<f4" if scale < 0 else ">f4")
        img = data.reshape(h, w, channels).astype(np.float64)
        return img[::-1]  # PFM rows are stored bottom-up


def _write_pfm(path, img):
    img = np.asarray(img, dtype=np.float32)
    if img.ndim == 2:
        img = img[..., None]
    if img.shape[2] not in (1, 3):
        raise ValueError("PFM supports 1 or 3 channels")
    header = "PF" if img.shape[2] == 3 else "Pf"
    with open(path, "wb") as f:
        f.write(f"{header}\n{img.shape[1]} {img.shape[0]}\n-1.0\n".encode("ascii"))
        f.write(img[::-1].astype("<f4").tobytes())


def load_image(path, expect_size=None) -> ImageBuffer:
    """Load PNG (sRGB -> linear) or PFM (linear as stored)."""
    if not os.path.exists(path):
        raise FileNotFoundError(f"image not found: {path}")
    if str(path).lower().endswith(".pfm"):
        data = _read_pfm(path)
    else:
        with Image.open(path) as im:
            arr = np.asarray(im)
        if arr.dtype == np.uint8:
            data = srgb_to_linear(arr / 255.0)
        elif arr.dtype in (np.uint16, np.int32):
            # label/prior maps stored as integer PNG are returned raw
            data = arr.astype(np.float64)
        else:
            data = arr.astype(np.float64)
        if data.ndim == 2:
            data = data[..., None]
        if data.shape[2] == 4:
            data = data[..., :3]
    buf = ImageBuffer(data)
    if expect_size is not None and (buf.width, buf.height) != tuple(expect_size):
        raise ValueError(f"image {path} is {buf.width}x{buf.height}, "
                         f"expected {expect_size[0]}x{expect_size[1]}")
    return buf


def save_image(buf, path):
    """Save PFM raw, or PNG via linear -> sRGB with nearest-linear quantization."""
    data = buf.data if isinstance(buf, ImageBuffer) else np.asarray(buf, dtype=np.float64)
    if data.ndim == 2:
        data = data[..., None]
    if str(path).lower().endswith(".pfm"):
        _write_pfm(path, data if data.shape[2] in (1, 3) else data[..., :3])
        return
    codes = _quantize_linear(data)
    if codes.shape[2] == 1:
        Image.fromarray(codes[..., 0], mode="L").save(path)
    else:
        Image.fromarray(codes, mode="RGB").save(path)


def load_label_map(path) -> np.ndarray:
    """16-bit single-channel label image; 0 means background."""
    with Image.open(path) as im:
        arr = np.asarray(im)
    if arr.ndim != 2:
        raise ValueError(f"label map must be single-channel: {path}")
    return arr.astype(np.int64)


def save_label_map(labels, path):
    arr = np.asarray(labels)
    if arr.min() < 0 or arr.max() > 65535:
        raise ValueError("labels out of uint16 range")
    Image.fromarray(arr.astype(np.uint16)).save(path)


def save_env_faces(env_base, out_dir, prefix="env"):
    """Write the 6 cubemap faces (+x,-x,+y,-y,+z,-z) as float PFM images."""
    env_base = np.asarray(env_base)
    paths = []
    for i, face in enumerate(ENV_FACE_NAMES):
        p = os.path.join(out_dir, f"{prefix}_{face}.pfm")
        _write_pfm(p, env_base[i])
        paths.append(p)
    return paths


def load_env_faces(paths_or_dir, prefix="env") -> np.ndarray:
    if isinstance(paths_or_dir, (str, os.PathLike)):
        paths = [os.path.join(paths_or_dir, f"{prefix}_{face}.pfm")
                 for face in ENV_FACE_NAMES]
    else:
        paths = list(paths_or_dir)
    faces = [load_image(p).data for p in paths]
    s = faces[0].shape
    if s[0] != s[1] or any(f.shape != s for f in faces):
        raise ValueError("environment faces must share one square resolution")
    return np.stack(faces)


def save_checkpoint(path, iteration, gaussians, env_base, optimizer_state=None):
    arrays = {"g_" + k: v for k, v in gaussians.state_arrays().items()}
    arrays["env_base"] = np.asarray(env_base)
    if optimizer_state is not None:
        arrays.update({"opt_" + k: v for k, v in optimizer_state.state_arrays().items()})
    np.savez(path, format=np.array(CHECKPOINT_FORMAT), iteration=np.array(iteration), **arrays)


def load_checkpoint(path):
    if not os.path.exists(path):
        raise FileNotFoundError(f"checkpoint not found: {path}")
    with np.load(path, allow_pickle=False) as z:
        data = {k: z[k] for k in z.files}
    tag = str(data.pop("format"))
    if tag != CHECKPOINT_FORMAT:
        raise CheckpointVersionError(f"checkpoint format {tag!r}, expected {CHECKPOINT_FORMAT!r}")
    out = {
        "iteration": int(data.pop("iteration")),
        "gaussians": {k[2:]: v for k, v in data.items() if k.startswith("g_")},
        "env_base": data.get("env_base"),
        "optimizer": {k[4:]: v for k, v in data.items() if k.startswith("opt_")},
    }
    return out
