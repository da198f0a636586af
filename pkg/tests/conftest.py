import numpy as np
import pytest

from portpatch import Checkpoint, LoraFactors, LoraPatch, SimConfig


def philox(seed: int) -> np.random.Generator:
    return np.random.Generator(np.random.Philox(seed))


def random_checkpoint(seed, specs, dtype=np.float64, version="v0") -> Checkpoint:
    """specs: dict tensor name -> shape."""
    rng = philox(seed)
    tensors = {
        name: rng.normal(0.0, 1.0, size=shape).astype(dtype, copy=False)
        for name, shape in specs.items()
    }
    return Checkpoint(tensors=tensors, metadata={"model_version": version})


def random_patch(specs, rank, alpha, seed, dtype=np.float64, std=0.1, version=None) -> LoraPatch:
    """specs: dict module path -> (d_out, d_in) of the dense delta."""
    rng = philox(seed)
    modules = {}
    for module, (d_out, d_in) in specs.items():
        a = rng.normal(0.0, std, size=(rank, d_in)).astype(dtype, copy=False)
        b = rng.normal(0.0, std, size=(d_out, rank)).astype(dtype, copy=False)
        modules[module] = LoraFactors(a=a, b=b)
    metadata = {} if version is None else {"model_version": version}
    return LoraPatch(modules=modules, rank=rank, alpha=alpha, metadata=metadata)


# Small-dimension simulator config for fast tests; the acceptance suite runs
# the full-size defaults.
def small_sim_config(seed=0, **overrides) -> SimConfig:
    params = dict(
        dim=48,
        rank_cp=12,
        alpha_cp=24.0,
        rank_ds=4,
        alpha_ds=4.0,
        base_scale=1.0 / np.sqrt(48.0),
        cp_scale=0.04,
        task_rank=2,
        task_scale=1.0,
        noise_std=0.05,
        samples=96,
        fit_steps=200,
        fit_lr=0.1,
        seed=seed,
    )
    params.update(overrides)
    return SimConfig(**params)


@pytest.fixture
def tmp_file(tmp_path):
    def _make(name):
        return str(tmp_path / name)

    return _make
