"""WAV reading and writing: PCM 16-bit and IEEE float-32, mono only.

Readers enforce a sample-rate policy: ``reject`` (default) raises on any
rate other than the expected one, ``resample`` converts with a polyphase
filter, ``accept`` keeps whatever the file carries.
"""

from __future__ import annotations

import numpy as np
from scipy.io import wavfile
from scipy.signal import resample_poly

from .spectral import Waveform

RATE_POLICIES = ("reject", "resample", "accept")


def read_wav(path, expected_rate: int = 16000, rate_policy: str = "reject") -> Waveform:
    """Read a mono WAV file and apply the sample-rate policy."""
    if rate_policy not in RATE_POLICIES:
        raise ValueError(f"rate_policy must be one of {RATE_POLICIES}")
    rate, data = wavfile.read(path)
    if data.ndim != 1:
        raise ValueError(f"{path}: expected mono audio, got {data.ndim} channels")
    if data.dtype == np.int16:
        samples = data.astype(np.float64) / 32768.0
    elif data.dtype == np.float32:
        samples = data.astype(np.float64)
    elif data.dtype == np.float64:
        samples = data.copy()
    else:
        raise ValueError(
            f"{path}: unsupported sample format {data.dtype}; "
            "use PCM 16-bit or IEEE float-32"
        )
    if rate != expected_rate:
        if rate_policy == "reject":
            raise ValueError(
                f"{path}: sample rate {rate} != expected {expected_rate} "
                "(pass rate_policy='resample' to convert)"
            )
        if rate_policy == "resample":
            g = np.gcd(int(rate), int(expected_rate))
            samples = resample_poly(samples, expected_rate // g, rate // g)
            rate = expected_rate
    return Waveform(samples=samples, sample_rate=int(rate))


def write_wav(path, w: Waveform, encoding: str = "float32") -> None:
    """Write a mono WAV file in the requested encoding."""
    if encoding == "float32":
        wavfile.write(path, w.sample_rate, w.samples.astype(np.float32))
    elif encoding == "pcm16":
        clipped = np.clip(w.samples, -1.0, 32767.0 / 32768.0)
        wavfile.write(path, w.sample_rate, np.round(clipped * 32768.0).astype(np.int16))
    else:
        raise ValueError("encoding must be 'float32' or 'pcm16'")
