"""Binary PPM/PGM images and the plain-text camera calibration file."""
from __future__ import annotations

import configparser
from pathlib import Path

import numpy as np


class ImageFormatError(ValueError):
    pass


def to_uint8(pixels) -> np.ndarray:
    arr = np.asarray(pixels)
    if arr.dtype == np.uint8:
        return arr
    return np.clip(np.round(arr * 255.0), 0, 255).astype(np.uint8)


def encode_pnm(pixels) -> bytes:
    arr = to_uint8(pixels)
    if arr.ndim == 3 and arr.shape[2] == 3:
        magic = b"P6"
    elif arr.ndim == 2:
        magic = b"P5"
    else:
        raise ImageFormatError(f"cannot encode array of shape {arr.shape} as PPM/PGM")
    h, w = arr.shape[:2]
    return magic + f"\n{w} {h}\n255\n".encode() + np.ascontiguousarray(arr).tobytes()


def decode_pnm(buf: bytes) -> np.ndarray:
    magic = buf[:2]
    if magic not in (b"P5", b"P6"):
        raise ImageFormatError(f"unsupported magic {magic!r}")
    tokens, pos = [], 2
    while len(tokens) < 3:
        while pos < len(buf) and buf[pos:pos + 1].isspace():
            pos += 1
        if pos < len(buf) and buf[pos:pos + 1] == b"#":
            while pos < len(buf) and buf[pos:pos + 1] not in (b"\n", b"\r"):
                pos += 1
            continue
        start = pos
        while pos < len(buf) and not buf[pos:pos + 1].isspace():
            pos += 1
        if start == pos:
            raise ImageFormatError(f"truncated header at byte {pos}")
        tokens.append(int(buf[start:pos]))
    pos += 1  # single whitespace before raster
    w, h, maxval = tokens
    if maxval != 255:
        raise ImageFormatError(f"only 8-bit images are supported (maxval {maxval})")
    channels = 3 if magic == b"P6" else 1
    need = w * h * channels
    raster = buf[pos:pos + need]
    if len(raster) != need:
        raise ImageFormatError(f"raster truncated at byte {pos + len(raster)}, expected {need} bytes")
    arr = np.frombuffer(raster, dtype=np.uint8)
    return arr.reshape((h, w, 3) if channels == 3 else (h, w)).copy()


def write_ppm(path, pixels):
    Path(path).write_bytes(encode_pnm(pixels))


write_pgm = write_ppm


def read_pnm(path) -> np.ndarray:
    return decode_pnm(Path(path).read_bytes())


read_ppm = read_pgm = read_pnm


# ---------------------------------------------------------------------------
# calibration: key = value lines (optionally under a [camera] header)

def _floats(text: str) -> list:
    return [float(v) for v in text.replace(",", " ").split()]


def read_calibration(path) -> dict:
    """Return ``{"intrinsics", "height", "pitch", "eta", "output"}`` from a calibration file."""
    text = Path(path).read_text()
    parser = configparser.ConfigParser()
    if not text.lstrip().startswith("["):
        text = "[camera]\n" + text
    parser.read_string(text)
    sec = parser[parser.sections()[0]]
    try:
        k = np.array(_floats(sec["intrinsics"]), dtype=np.float64)
        out = {
            "intrinsics": k.reshape(3, 3),
            "height": float(sec["height"]),
            "pitch": float(sec["pitch"]),
            "eta": tuple(_floats(sec["eta"])),
            "output": tuple(int(v) for v in _floats(sec["output"])),
        }
    except KeyError as exc:
        raise ValueError(f"calibration file {path} lacks key {exc}") from None
    if len(out["eta"]) != 4 or len(out["output"]) != 2:
        raise ValueError("eta needs 4 values and output 2")
    return out


def write_calibration(path, intrinsics, height, pitch, eta, output):
    k = " ".join(repr(float(v)) for v in np.asarray(intrinsics, dtype=np.float64).ravel())
    lines = [
        f"intrinsics = {k}",
        f"height = {float(height)!r}",
        f"pitch = {float(pitch)!r}",
        "eta = " + " ".join(repr(float(v)) for v in eta),
        "output = " + " ".join(str(int(v)) for v in output),
    ]
    Path(path).write_text("\n".join(lines) + "\n")
