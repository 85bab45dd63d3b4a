import numpy as np
import pytest
import yaml

from sanran.autodiff import Tensor
from sanran.config import ExperimentConfig, load_experiment


def gradcheck(fn, *arrays, eps: float = 1e-6, rtol: float = 1e-4, atol: float = 1e-7) -> None:
    """Compare reverse-mode gradients of a scalar fn with central differences (float64)."""
    arrays = [np.asarray(a, dtype=np.float64) for a in arrays]
    tensors = [Tensor(a.copy(), requires_grad=True) for a in arrays]
    fn(*tensors).backward()
    for i, tensor in enumerate(tensors):
        numeric = np.zeros_like(arrays[i])
        for idx in np.ndindex(arrays[i].shape):
            plus = [a.copy() for a in arrays]
            minus = [a.copy() for a in arrays]
            plus[i][idx] += eps
            minus[i][idx] -= eps
            f_plus = fn(*(Tensor(a) for a in plus)).item()
            f_minus = fn(*(Tensor(a) for a in minus)).item()
            numeric[idx] = (f_plus - f_minus) / (2 * eps)
        np.testing.assert_allclose(tensor.grad, numeric, rtol=rtol, atol=atol, err_msg=f"input {i}")


def weighted_sum(out: Tensor, seed: int = 0) -> Tensor:
    """Reduce a tensor to a scalar with fixed random weights so every element matters."""
    weights = np.random.default_rng(seed).standard_normal(out.shape)
    return (out * weights).sum()


TINY = {
    "seed": 7,
    "data": {
        "num_classes": 3,
        "num_centers": 12,
        "samples_per_class": 10,
        "train_per_class": 6,
        "test_per_class": 4,
        "image_size": 96,
    },
    "radar": {"n_freq": 32, "n_aspect": 32},
    "noise": {"kind": "sym", "rate": 0.2},
    "model": {"stem_channels": 4, "image_channels": [4, 8], "graph_dims": [8, 8], "k": 4},
    "ssl": {"rampup_epochs": 1},
    "schedule": {
        "total_epochs": 3,
        "warm_up_epochs": 1,
        "batch_size": 4,
        "eval_batch_size": 16,
        "checkpoint_every": 1,
    },
    "concurrency": {"max_workers": 2},
}


@pytest.fixture
def tiny_config(tmp_path) -> ExperimentConfig:
    raw = dict(TINY, out=str(tmp_path / "run"))
    raw["data"] = dict(TINY["data"], root=str(tmp_path / "data"))
    path = tmp_path / "sanran.yaml"
    path.write_text(yaml.safe_dump(raw), encoding="utf-8")
    return load_experiment(path)


@pytest.fixture
def tiny_dataset(tiny_config):
    """Generated and noise-split tiny dataset on disk."""
    from sanran import harness

    harness.generate_dataset(tiny_config)
    harness.make_noisy_split(tiny_config)
    return tiny_config
