"""Noise-prediction backends.

The mock backend is a seeded pseudorandom field keyed on everything that
conditions a real denoiser (seed, timestep, prompt, resolution), so
contract tests can assert reproducibility without model weights. Real
model serving would wrap a pretrained pose-conditioned diffusion
pipeline behind the same predict() signature; loading one is refused
with a clear error rather than pretending.
"""

import hashlib

import numpy as np


class BackendError(Exception):
    """Raised when a backend cannot be constructed or used."""


class MockBackend:
    """Deterministic stand-in denoiser.

    predict() ignores the image and pose content by design: the contract
    cares about shapes, conditioning keys and reproducibility, not about
    plausible scores.
    """

    name = "mock-diffusion"

    def predict(self, height, width, t, prompt, seed):
        key = f"{seed}|{t}|{prompt if prompt is not None else ''}".encode()
        key += f"|{height}x{width}".encode()
        digest = hashlib.sha256(key).digest()
        rng = np.random.default_rng(np.frombuffer(digest, dtype=np.uint64))
        return rng.standard_normal((height, width, 3))


def load_backend(config):
    if config.mock:
        return MockBackend()
    raise BackendError(
        f"no runtime for model {config.model!r}: real-model serving needs a "
        "pose-conditioned diffusion pipeline and its weights, neither of "
        "which ships with this package; run with --mock")
