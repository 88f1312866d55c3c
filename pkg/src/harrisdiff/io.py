"""Sample-set serialization: CSV and little-endian binary."""

import struct

import numpy as np

from harrisdiff.errors import DomainError

_HEADER = struct.Struct("<II")


def write_samples(path, samples):
    """Write ``samples`` as CSV, or as binary when ``path`` ends in ``.bin``."""
    samples = np.atleast_2d(np.asarray(samples, dtype=float))
    if str(path).endswith(".bin"):
        n, d = samples.shape
        with open(path, "wb") as fh:
            fh.write(_HEADER.pack(d, n))
            fh.write(np.ascontiguousarray(samples, dtype="<f8").tobytes())
    else:
        np.savetxt(path, samples, delimiter=",", fmt="%.17g")


def read_samples(path):
    """Inverse of :func:`write_samples`; always returns an ``(n, d)`` array."""
    if str(path).endswith(".bin"):
        with open(path, "rb") as fh:
            raw = fh.read()
        if len(raw) < _HEADER.size:
            raise DomainError(f"{path}: truncated header")
        d, n = _HEADER.unpack_from(raw)
        body = np.frombuffer(raw, dtype="<f8", offset=_HEADER.size)
        if body.size != n * d:
            raise DomainError(f"{path}: expected {n * d} values, found {body.size}")
        return body.reshape(n, d).astype(float)
    data = np.loadtxt(path, delimiter=",", ndmin=2)
    return data
