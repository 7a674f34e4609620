"""Seeded generators for the four synthetic benchmarks.

All sequence datasets live on the endpoint-inclusive grid tau_t = t/(L-1).
Per-sample generator parameters are kept in ``Dataset.metadata`` so the
noiseless signal can be rebuilt exactly in tests.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np

from .errors import InvalidArgument, SchemaError

GRID_CENTERS = np.array([(x, y) for x in (-1.0, 0.0, 1.0) for y in (-1.0, 0.0, 1.0)])

DEFAULTS = {
    "grid": {"n_per_mode": 6000, "sigma": 0.05},
    "sine": {"n": 5000, "length": 10, "noise": 0.1},
    "chirp": {
        "n": 8000,
        "length": 80,
        "noise": 0.02,
        "amp": (0.6, 1.4),
        "f0": (0.5, 1.0),
        "k": (2.0, 5.0),
    },
    "damped": {
        "n": 8000,
        "length": 40,
        "noise": 0.02,
        "amp": (0.6, 1.4),
        "freq": (1.0, 2.0),
        "decay": (0.5, 2.0),
        "phase": (0.0, 2 * np.pi),
    },
}

DIMS = {"grid": 2, "sine": 10, "chirp": 80, "damped": 40}


@dataclass
class Dataset:
    name: str
    samples: np.ndarray
    config: dict
    metadata: dict = field(default_factory=dict)
    seed: Optional[int] = None
    standardized: bool = False

    def __post_init__(self):
        self.samples = np.asarray(self.samples, dtype=np.float64)
        if self.samples.ndim != 2 or self.samples.shape[0] < 1:
            raise InvalidArgument("samples must be a non-empty 2-D array")
        if not np.all(np.isfinite(self.samples)):
            raise InvalidArgument("samples contain non-finite values")

    @property
    def dim(self) -> int:
        return self.samples.shape[1]

    @property
    def n(self) -> int:
        return self.samples.shape[0]


def time_grid(length: int) -> np.ndarray:
    return np.linspace(0.0, 1.0, length)


def _as_rng(rng) -> np.random.Generator:
    if isinstance(rng, np.random.Generator):
        return rng
    return np.random.default_rng(rng)


def gen_grid(n_per_mode: int = 6000, rng=0, sigma: float = 0.05) -> Dataset:
    """3x3 Gaussian mixture on {-1,0,1}^2, modes assigned round-robin."""
    if n_per_mode < 1:
        raise InvalidArgument("n_per_mode must be >= 1")
    rng = _as_rng(rng)
    n = 9 * n_per_mode
    modes = np.arange(n) % 9
    x = GRID_CENTERS[modes] + sigma * rng.standard_normal((n, 2))
    cfg = {"n_per_mode": n_per_mode, "sigma": sigma}
    return Dataset("grid", x, cfg, {"mode": modes})


def sine_signal(tau: np.ndarray, sign: np.ndarray) -> np.ndarray:
    return np.asarray(sign, dtype=np.float64)[:, None] * np.sin(2 * np.pi * tau)[None, :]


def gen_bimodal_sine(
    n: int = 5000, rng=0, length: int = 10, noise: float = 0.1,
    sign: Optional[float] = None,
) -> Dataset:
    """Balanced mixture of +/- sin(2 pi tau) plus Gaussian noise.

    ``sign`` pins every sequence to one branch (used for exact-value checks).
    """
    if n < 2:
        raise InvalidArgument("bimodal sine needs n >= 2")
    rng = _as_rng(rng)
    tau = time_grid(length)
    if sign is None:
        s = np.where(rng.random(n) < 0.5, 1.0, -1.0)
    else:
        s = np.full(n, float(np.sign(sign)))
    x = sine_signal(tau, s) + noise * rng.standard_normal((n, length))
    cfg = {"n": n, "length": length, "noise": noise}
    return Dataset("sine", x, cfg, {"sign": s})


def chirp_signal(tau, amp, f0, k) -> np.ndarray:
    phase = 2 * np.pi * (f0[:, None] * tau[None, :] + 0.5 * k[:, None] * tau[None, :] ** 2)
    return amp[:, None] * np.sin(phase)


def gen_chirp(
    n: int = 8000, rng=0, length: int = 80, noise: float = 0.02,
    amp=(0.6, 1.4), f0=(0.5, 1.0), k=(2.0, 5.0),
) -> Dataset:
    if n < 1:
        raise InvalidArgument("n must be >= 1")
    rng = _as_rng(rng)
    tau = time_grid(length)
    A = rng.uniform(*amp, size=n)
    F = rng.uniform(*f0, size=n)
    K = rng.uniform(*k, size=n)
    x = chirp_signal(tau, A, F, K) + noise * rng.standard_normal((n, length))
    cfg = {"n": n, "length": length, "noise": noise, "amp": list(amp),
           "f0": list(f0), "k": list(k)}
    return Dataset("chirp", x, cfg, {"amp": A, "f0": F, "k": K})


def damped_signal(tau, amp, freq, decay, phase) -> np.ndarray:
    env = amp[:, None] * np.exp(-decay[:, None] * tau[None, :])
    return env * np.sin(2 * np.pi * freq[:, None] * tau[None, :] + phase[:, None])


def gen_damped_sine(
    n: int = 8000, rng=0, length: int = 40, noise: float = 0.02,
    amp=(0.6, 1.4), freq=(1.0, 2.0), decay=(0.5, 2.0), phase=(0.0, 2 * np.pi),
) -> Dataset:
    if n < 1:
        raise InvalidArgument("n must be >= 1")
    rng = _as_rng(rng)
    tau = time_grid(length)
    A = rng.uniform(*amp, size=n)
    F = rng.uniform(*freq, size=n)
    D = rng.uniform(*decay, size=n)
    P = rng.uniform(*phase, size=n)
    x = damped_signal(tau, A, F, D, P) + noise * rng.standard_normal((n, length))
    cfg = {"n": n, "length": length, "noise": noise, "amp": list(amp),
           "freq": list(freq), "decay": list(decay), "phase": list(phase)}
    return Dataset("damped", x, cfg, {"amp": A, "freq": F, "decay": D, "phase": P})


def noiseless(ds: Dataset) -> np.ndarray:
    """Rebuild the noise-free signal from stored per-sample metadata."""
    m = ds.metadata
    if ds.name == "grid":
        return GRID_CENTERS[m["mode"]]
    tau = time_grid(ds.dim)
    if ds.name == "sine":
        return sine_signal(tau, m["sign"])
    if ds.name == "chirp":
        return chirp_signal(tau, m["amp"], m["f0"], m["k"])
    if ds.name == "damped":
        return damped_signal(tau, m["amp"], m["freq"], m["decay"], m["phase"])
    raise InvalidArgument(f"unknown dataset {ds.name!r}")


_GENERATORS = {
    "grid": gen_grid,
    "sine": gen_bimodal_sine,
    "chirp": gen_chirp,
    "damped": gen_damped_sine,
}


def generate(name: str, seed: int, standardize: bool = False, **overrides) -> Dataset:
    """Build a named dataset from defaults plus overrides."""
    if name not in _GENERATORS:
        raise InvalidArgument(f"unknown dataset {name!r}; choose from {sorted(_GENERATORS)}")
    kwargs = dict(DEFAULTS[name])
    unknown = set(overrides) - set(kwargs)
    if unknown:
        raise InvalidArgument(f"unknown {name} generator options: {sorted(unknown)}")
    kwargs.update(overrides)
    if name == "grid":
        ds = gen_grid(kwargs["n_per_mode"], np.random.default_rng(seed), kwargs["sigma"])
    else:
        n = kwargs.pop("n")
        ds = _GENERATORS[name](n, np.random.default_rng(seed), **kwargs)
    ds.seed = seed
    if standardize:
        mu = ds.samples.mean(axis=0)
        sd = ds.samples.std(axis=0)
        sd[sd == 0] = 1.0
        ds.samples = (ds.samples - mu) / sd
        ds.standardized = True
        ds.metadata["shift"] = mu
        ds.metadata["scale"] = sd
    return ds


def _jsonable(obj):
    if isinstance(obj, dict):
        return {k: _jsonable(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_jsonable(v) for v in obj]
    if isinstance(obj, np.ndarray):
        return obj.tolist()
    if isinstance(obj, np.generic):
        return obj.item()
    return obj


def write_csv(samples: np.ndarray, path) -> None:
    """Header x0..x{d-1}; full round-trip precision."""
    samples = np.asarray(samples, dtype=np.float64)
    d = samples.shape[1]
    header = ",".join(f"x{j}" for j in range(d))
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        fh.write(header + "\n")
        for row in samples:
            fh.write(",".join(repr(float(v)) for v in row) + "\n")


def read_csv(path) -> np.ndarray:
    with open(path, encoding="utf-8") as fh:
        header = fh.readline().strip().split(",")
        if not header or any(h != f"x{j}" for j, h in enumerate(header)):
            raise SchemaError(f"{path}: expected header x0,...,x{{d-1}}")
        data = np.loadtxt(fh, delimiter=",", dtype=np.float64, ndmin=2)
    if data.shape[1] != len(header):
        raise SchemaError(f"{path}: row width {data.shape[1]} != header width {len(header)}")
    return data


def save_dataset(ds: Dataset, csv_path) -> Path:
    """Write the CSV plus a ``.json`` metadata sidecar; returns the sidecar path."""
    csv_path = Path(csv_path)
    write_csv(ds.samples, csv_path)
    side = csv_path.with_suffix(".json")
    meta = {
        "name": ds.name,
        "dim": ds.dim,
        "n": ds.n,
        "seed": ds.seed,
        "config": _jsonable(ds.config),
        "standardized": ds.standardized,
    }
    side.write_text(json.dumps(meta, sort_keys=True, indent=2) + "\n", encoding="utf-8")
    return side


def load_dataset(csv_path) -> Dataset:
    csv_path = Path(csv_path)
    x = read_csv(csv_path)
    side = csv_path.with_suffix(".json")
    if side.exists():
        meta = json.loads(side.read_text(encoding="utf-8"))
        return Dataset(meta["name"], x, meta.get("config", {}), seed=meta.get("seed"),
                       standardized=meta.get("standardized", False))
    return Dataset(csv_path.stem, x, {})
