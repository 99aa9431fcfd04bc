import numpy as np
import pytest

from natlas.fields import FieldSet, FieldSetConfig
from natlas.synth import PhantomConfig, synth_sequence

# phantom small enough for per-test work; radii shrunk so the default
# 2-voxel rim still fits at 12 voxels per axis
SMALL_PHANTOM = dict(dims=(12, 12, 12), n_frames=3, radii=(0.25, 0.22, 0.2),
                     amplitude=0.5)


def small_field_config(dtype="float64", **kw):
    """Tiny field set for fast tests; f64 by default so FD checks are sharp."""
    base = dict(latent_dim=4, hidden_width=16, hidden_layers=1,
                decoder_width=16, decoder_layers=1, levels=3,
                features_per_level=2, table_size_log2=10,
                base_resolution=4, growth_factor=1.5, dtype=dtype)
    base.update(kw)
    return FieldSetConfig(**base)


def warm_fields(fs: FieldSet, rng: np.random.Generator) -> None:
    """Move parameters away from initialization before finite differencing.

    At init the hash tables are +-1e-4, so every ReLU pre-activation sits
    within ~1e-4 of its kink and central differences straddle the
    nondifferentiable point.  O(0.1) parameter noise (small for the
    velocity field, which feeds back into coordinates) makes the loss
    locally smooth at FD step sizes.
    """
    for k, p in fs.params().items():
        if k.endswith("table"):
            p += rng.normal(0, 0.3, p.shape).astype(p.dtype)
        elif k.startswith("psi_r"):
            p += rng.normal(0, 0.03, p.shape).astype(p.dtype)
        elif ".b" in k:
            p += rng.normal(0, 0.1, p.shape).astype(p.dtype)


def rel_err(fd: float, an: float) -> float:
    denom = max(abs(fd), abs(an), 1e-8)
    return abs(fd - an) / denom


@pytest.fixture(scope="session")
def tiny_phantom():
    return synth_sequence(PhantomConfig(**SMALL_PHANTOM), seed=0)


@pytest.fixture()
def rng():
    return np.random.default_rng(0)
