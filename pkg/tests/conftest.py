import numpy as np
import pytest

from flare_uq.denoiser import Architecture, DenoiserModel
from flare_uq.diffusion import cosine_schedule


def random_spd(n, rng, cond=100.0):
    Q, _ = np.linalg.qr(rng.standard_normal((n, n)))
    S = (Q * np.geomspace(1.0, 1.0 / cond, n)) @ Q.T
    return 0.5 * (S + S.T)


def tiny_model(d=3, hidden=6, n_blocks=1, E=4, T=8, seed=0, head_scale=1.0):
    arch = Architecture(d, hidden, n_blocks, E, T)
    return DenoiserModel.init(arch, np.random.default_rng(seed), head_scale=head_scale)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture
def sched8():
    return cosine_schedule(8)


@pytest.fixture
def model8():
    return tiny_model()


@pytest.fixture(scope="session")
def sine_trained(tmp_path_factory):
    """Sine model trained with the preset configuration; shared."""
    from flare_uq.config import preset
    from flare_uq.datasets import generate
    from flare_uq.training import TrainConfig, train

    cfg = preset("sine")
    sched = cosine_schedule(cfg["schedule"]["T"])
    ds = generate("sine", 0)
    mc = cfg["model"]
    arch = Architecture(10, mc["hidden"], mc["n_blocks"], mc["time_embed_dim"], sched.T)
    model = DenoiserModel.init(arch, np.random.default_rng([0, 0]))
    res = train(model, ds, sched, TrainConfig(seed=0, **cfg["train"]))
    return {"result": res, "model": res.ema, "dataset": ds, "sched": sched, "cfg": cfg}


def tiny_config(path, out, preset="sine", drop=(), **over):
    """Write a seconds-scale CLI config and return its path."""
    import json

    raw = {
        "preset": preset,
        "dataset": {"name": preset, "overrides": {"n": 300} if preset != "grid" else {}},
        "model": {"hidden": 8, "n_blocks": 1, "time_embed_dim": 4},
        "schedule": {"T": 8},
        "train": {"steps": 40, "batch": 32},
        "estimator": {"n_pairs": 16},
        "score": {"n_samples": 40},
        "eval": {"B": 100, "disc_steps": 60, "n_paths": 3, "S": 8},
        "ablate": {"n_samples": 4},
        "output_dir": str(out),
    }
    for k, v in over.items():
        if isinstance(v, dict) and isinstance(raw.get(k), dict):
            raw[k].update(v)
        else:
            raw[k] = v
    for k in drop:
        raw.pop(k)
    path.write_text(json.dumps(raw))
    return str(path)
