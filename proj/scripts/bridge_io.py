"""File formats shared by the model bridges (see core/include/vlmattack/io.hpp).

sidecar:  uint32 H, W, C then H*W*C float32, row-major HWC, little-endian
features: uint32 N_f, N_h, N_w then N_f x cols float32, row-major;
          cols = N_h*N_w (+1 when a CLS column leads)
"""
import struct

import numpy as np


def read_sidecar(path):
    with open(path, "rb") as f:
        h, w, c = struct.unpack("<3I", f.read(12))
        data = np.frombuffer(f.read(), dtype="<f4")
    return data.reshape(h, w, c).astype(np.float64)


def write_sidecar(path, array):
    array = np.asarray(array, dtype=np.float64)
    if array.ndim == 2:
        array = array[:, :, None]
    h, w, c = array.shape
    with open(path, "wb") as f:
        f.write(struct.pack("<3I", h, w, c))
        f.write(array.astype("<f4").tobytes())


def read_features(path, with_cls=True):
    with open(path, "rb") as f:
        nf, gh, gw = struct.unpack("<3I", f.read(12))
        data = np.frombuffer(f.read(), dtype="<f4")
    cols = gh * gw + (1 if with_cls else 0)
    return data.reshape(nf, cols).astype(np.float64), gh, gw


def write_features(path, matrix, grid_h, grid_w):
    matrix = np.asarray(matrix, dtype=np.float64)
    with open(path, "wb") as f:
        f.write(struct.pack("<3I", matrix.shape[0], grid_h, grid_w))
        f.write(matrix.astype("<f4").tobytes())


def write_vector(path, vector):
    # A vector is a feature file with a 0x0 grid and only the CLS column.
    write_features(path, np.asarray(vector, dtype=np.float64).reshape(-1, 1), 0, 0)


def read_text(path):
    with open(path, encoding="utf-8") as f:
        return f.read()
