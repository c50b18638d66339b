"""
Low-level file helpers: atomic writes, JSON and 8-bit PGM images.
"""

# Standard library modules.
import io
import json
import os
import tempfile

# Third party modules.
import numpy as np

# Local modules.

# Globals and constants variables.
_PGM_MAGIC = b"P5"
_PGM_MAXVAL = 255


def atomic_write_bytes(path, data):
    """
    Writes *data* to a temporary file next to *path* and renames it.
    """
    dirpath = os.path.dirname(os.path.abspath(path))
    os.makedirs(dirpath, exist_ok=True)
    fd, tmppath = tempfile.mkstemp(dir=dirpath, prefix=".tmp-")
    try:
        with os.fdopen(fd, "wb") as fp:
            fp.write(data)
        os.replace(tmppath, path)
    except BaseException:
        if os.path.exists(tmppath):
            os.remove(tmppath)
        raise


def atomic_write_text(path, text):
    atomic_write_bytes(path, text.encode("utf-8"))


def write_json(path, obj):
    atomic_write_text(path, json.dumps(obj, indent=2, sort_keys=True) + "\n")


def read_json(path):
    with open(path, "r", encoding="utf-8") as fp:
        try:
            return json.load(fp)
        except json.JSONDecodeError as ex:
            raise ValueError(f"{path}: invalid JSON ({ex})") from ex


def write_npy(path, array):
    buf = io.BytesIO()
    np.save(buf, np.asarray(array), allow_pickle=False)
    atomic_write_bytes(path, buf.getvalue())


def read_npy(path):
    return np.load(path, allow_pickle=False)


def quantize(pixels):
    """
    Quantizes pixels in [0, 1] to the 8-bit grid used by PGM files.
    """
    return np.round(np.clip(pixels, 0.0, 1.0) * _PGM_MAXVAL) / _PGM_MAXVAL


def encode_pgm(pixels):
    """
    Encodes a ``[h, w, c]`` image as binary PGM. Channels are stored as
    ``c`` planes stacked vertically; the header notes the channel count.
    """
    pixels = np.asarray(pixels, dtype=np.float64)
    if pixels.ndim != 3:
        raise ValueError(f"Image must be [h, w, c], got shape {pixels.shape}")
    h, w, c = pixels.shape
    planes = np.concatenate([pixels[:, :, k] for k in range(c)], axis=0)
    raster = np.round(np.clip(planes, 0.0, 1.0) * _PGM_MAXVAL).astype(np.uint8)
    header = b"P5\n# channels %d\n%d %d\n%d\n" % (c, w, h * c, _PGM_MAXVAL)
    return header + raster.tobytes()


def decode_pgm(data, name="<pgm>"):
    """
    Decodes binary PGM bytes into a ``[h, w, c]`` float image in [0, 1].
    """
    tokens = []
    channels = 1
    pos = 0
    while len(tokens) < 4:
        if pos >= len(data):
            raise ValueError(f"{name}: truncated PGM header")
        char = data[pos : pos + 1]
        if char == b"#":
            end = data.find(b"\n", pos)
            if end < 0:
                raise ValueError(f"{name}: truncated PGM header")
            comment = data[pos + 1 : end].decode("ascii", "replace").split()
            if len(comment) == 2 and comment[0] == "channels":
                channels = int(comment[1])
            pos = end + 1
        elif char.isspace():
            pos += 1
        else:
            start = pos
            while pos < len(data) and not data[pos : pos + 1].isspace():
                pos += 1
            tokens.append(data[start:pos])
    pos += 1  # single whitespace after maxval

    if tokens[0] != _PGM_MAGIC:
        raise ValueError(f"{name}: not a binary PGM file")
    width, height, maxval = (int(t) for t in tokens[1:])
    if maxval != _PGM_MAXVAL:
        raise ValueError(f"{name}: unsupported maxval {maxval}")
    if height % channels:
        raise ValueError(f"{name}: height {height} is not a multiple of {channels}")

    raster = np.frombuffer(data, dtype=np.uint8, count=width * height, offset=pos)
    planes = raster.reshape(height, width).astype(np.float64) / _PGM_MAXVAL
    h = height // channels
    return np.stack([planes[k * h : (k + 1) * h] for k in range(channels)], axis=2)


def write_pgm(path, pixels):
    atomic_write_bytes(path, encode_pgm(pixels))


def read_pgm(path):
    with open(path, "rb") as fp:
        return decode_pgm(fp.read(), name=path)
