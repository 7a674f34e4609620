"""FiLM-residual MLP for epsilon prediction with hand-written reverse mode.

Network, for input x (d,) and integer step t::

    e   = [sin(w t/T), cos(w t/T)]           w geometric in [1, T]
    h   = W_in x + b_in
    per block:
        gamma, beta = split(W_f e + b_f)
        z1 = W_1 silu(h) + b_1
        m  = z1 * (1 + gamma) + beta
        h  = h + W_2 silu(m) + b_2
    out = W_o h + b_o

Parameters live in one flat float64 vector; the head (W_o, b_o) is always
the final block of the layout.
"""

from __future__ import annotations

import io
import json
import struct
from dataclasses import asdict, dataclass
from typing import Dict, List, Optional, Tuple

import numpy as np
from scipy.special import expit

from .errors import InvalidArgument, NumericalBreakdown, SchemaError, ShapeError
from .linalg import as_index_set

MAGIC = b"FLRE"
CKPT_VERSION = 1


@dataclass(frozen=True)
class Architecture:
    data_dim: int
    hidden: int = 32
    n_blocks: int = 2
    time_embed_dim: int = 32
    T: int = 600

    def __post_init__(self):
        if min(self.data_dim, self.hidden, self.time_embed_dim, self.T) < 1 or self.n_blocks < 0:
            raise InvalidArgument(f"invalid architecture {self}")
        if self.time_embed_dim % 2:
            raise InvalidArgument("time_embed_dim must be even")


@dataclass(frozen=True)
class LayerSpec:
    name: str
    out: int
    inp: int
    w_off: int

    @property
    def b_off(self) -> int:
        return self.w_off + self.out * self.inp

    @property
    def size(self) -> int:
        return self.out * (self.inp + 1)


def build_layers(arch: Architecture) -> List[LayerSpec]:
    H, d, E = arch.hidden, arch.data_dim, arch.time_embed_dim
    shapes = [("in", H, d)]
    for k in range(arch.n_blocks):
        shapes += [(f"blk{k}.film", 2 * H, E), (f"blk{k}.fc1", H, H), (f"blk{k}.fc2", H, H)]
    shapes.append(("head", d, H))
    layers, off = [], 0
    for name, o, i in shapes:
        spec = LayerSpec(name, o, i, off)
        layers.append(spec)
        off += spec.size
    return layers


class ParamVector:
    """Flat parameter store with a named layout of (name, offset, shape)."""

    def __init__(self, values: np.ndarray, layout: List[Tuple[str, int, Tuple[int, ...]]]):
        self.values = np.ascontiguousarray(values, dtype=np.float64)
        self.layout = [(n, int(o), tuple(s)) for n, o, s in layout]
        total = 0
        for name, off, shape in self.layout:
            if off != total:
                raise SchemaError(f"layout entry {name} is not contiguous")
            total += int(np.prod(shape))
        if total != self.values.size:
            raise SchemaError(f"layout covers {total} values, vector has {self.values.size}")

    @property
    def p(self) -> int:
        return self.values.size

    def view(self, name: str) -> np.ndarray:
        for n, off, shape in self.layout:
            if n == name:
                return self.values[off:off + int(np.prod(shape))].reshape(shape)
        raise KeyError(name)

    def copy(self) -> "ParamVector":
        return ParamVector(self.values.copy(), self.layout)

    def entries(self):
        return [(n, o, int(np.prod(s))) for n, o, s in self.layout]


def layout_for(arch: Architecture):
    out = []
    for L in build_layers(arch):
        out.append((L.name + ".W", L.w_off, (L.out, L.inp)))
        out.append((L.name + ".b", L.b_off, (L.out,)))
    return out


def silu(x):
    return x * expit(x)


def dsilu(x):
    s = expit(x)
    return s * (1.0 + x * (1.0 - s))


class ColumnPlan:
    """Precomputed gather plan turning per-layer adjoints into Jacobian columns."""

    def __init__(self, layers: List[LayerSpec], idx: np.ndarray):
        self.indices = idx
        self.m = idx.size
        self.parts = []
        for L in layers:
            lo, mid, hi = L.w_off, L.b_off, L.w_off + L.size
            a, b = np.searchsorted(idx, [lo, mid])
            c = np.searchsorted(idx, hi)
            wsel = idx[a:b] - lo
            bsel = idx[b:c] - mid
            self.parts.append((L.name, np.arange(a, b), wsel // L.inp, wsel % L.inp,
                               np.arange(b, c), bsel))


class DenoiserModel:
    def __init__(self, arch: Architecture, params: Optional[ParamVector] = None):
        self.arch = arch
        self.layers = build_layers(arch)
        self._by_name = {L.name: L for L in self.layers}
        p = self.layers[-1].w_off + self.layers[-1].size
        if params is None:
            params = ParamVector(np.zeros(p), layout_for(arch))
        if params.p != p:
            raise ShapeError(f"parameter vector has {params.p} entries, architecture needs {p}")
        self.params = params
        half = arch.time_embed_dim // 2
        self.freqs = np.geomspace(1.0, float(arch.T), half) if half > 1 else np.ones(1)
        self._plans: Dict[bytes, ColumnPlan] = {}

    # -- construction -------------------------------------------------
    @classmethod
    def init(cls, arch: Architecture, rng, head_scale: float = 0.1) -> "DenoiserModel":
        rng = rng if isinstance(rng, np.random.Generator) else np.random.default_rng(rng)
        model = cls(arch)
        v = model.params.values
        for L in model.layers:
            bound = 1.0 / np.sqrt(L.inp)
            if L.name == "head":
                bound *= head_scale
            v[L.w_off:L.w_off + L.size] = rng.uniform(-bound, bound, L.size)
        return model

    def with_values(self, values: np.ndarray) -> "DenoiserModel":
        return DenoiserModel(self.arch, ParamVector(np.array(values, dtype=np.float64),
                                                    self.params.layout))

    @property
    def p(self) -> int:
        return self.params.p

    @property
    def d(self) -> int:
        return self.arch.data_dim

    def last_layer_indices(self) -> np.ndarray:
        L = self.layers[-1]
        return np.arange(L.w_off, L.w_off + L.size, dtype=np.int64)

    def layer(self, name: str) -> LayerSpec:
        return self._by_name[name]

    def _wb(self, L: LayerSpec, values: np.ndarray):
        if values.ndim == 1:
            W = values[L.w_off:L.b_off].reshape(L.out, L.inp)
            b = values[L.b_off:L.b_off + L.out]
        else:
            W = values[:, L.w_off:L.b_off].reshape(-1, L.out, L.inp)
            b = values[:, L.b_off:L.b_off + L.out]
        return W, b

    # -- forward ------------------------------------------------------
    def embed(self, t, batch: int) -> np.ndarray:
        t = np.broadcast_to(np.asarray(t, dtype=np.float64), (batch,))
        ang = (t / self.arch.T)[:, None] * self.freqs[None, :]
        return np.concatenate([np.sin(ang), np.cos(ang)], axis=1)

    @staticmethod
    def _affine(a, W, b):
        if W.ndim == 2:
            return a @ W.T + b
        return np.einsum("si,soi->so", a, W) + b

    def _forward(self, x, t, values=None, cache: bool = False):
        values = self.params.values if values is None else values
        x = np.asarray(x, dtype=np.float64)
        if x.ndim != 2 or x.shape[1] != self.d:
            raise ShapeError(f"expected x of shape (B, {self.d}), got {x.shape}")
        B = x.shape[0]
        e = self.embed(t, B)
        H = self.arch.hidden
        h = self._affine(x, *self._wb(self.layers[0], values))
        blocks = []
        for k in range(self.arch.n_blocks):
            Lf, L1, L2 = self.layers[1 + 3 * k: 4 + 3 * k]
            f = self._affine(e, *self._wb(Lf, values))
            gam, bet = f[:, :H], f[:, H:]
            u = silu(h)
            z1 = self._affine(u, *self._wb(L1, values))
            m = z1 * (1.0 + gam) + bet
            v = silu(m)
            z2 = self._affine(v, *self._wb(L2, values))
            if cache:
                blocks.append((h, u, z1, gam, m, v))
            h = h + z2
        out = self._affine(h, *self._wb(self.layers[-1], values))
        if not np.all(np.isfinite(out)):
            raise NumericalBreakdown(f"non-finite denoiser output at t={t}")
        if cache:
            return out, {"x": x, "e": e, "blocks": blocks, "h": h}
        return out

    def forward(self, x, t, values=None) -> np.ndarray:
        """eps prediction. ``x`` is (d,) or (B, d); ``values`` may be a flat
        parameter vector or an (B, p) stack of per-row parameters."""
        x = np.asarray(x, dtype=np.float64)
        if x.ndim == 1:
            return self._forward(x[None], t, values)[0]
        return self._forward(x, t, values)

    __call__ = forward

    def features(self, x, t) -> np.ndarray:
        """Hidden representation fed to the head, shape (B, hidden)."""
        x = np.atleast_2d(np.asarray(x, dtype=np.float64))
        return self._forward(x, t, cache=True)[1]["h"]

    # -- reverse mode -------------------------------------------------
    def _adjoints(self, cache, G):
        """Backpropagate cotangents G (B, K, d).

        Returns a list of (layer, delta (B, K, out), activation (B, in)) so
        that dOut/dW[o, i] = delta[..., o] * act[:, i] and dOut/db = delta.
        """
        v = self.params.values
        H = self.arch.hidden
        Lh = self.layers[-1]
        Wo, _ = self._wb(Lh, v)
        adj = [(Lh, G, cache["h"])]
        gh = G @ Wo
        for k in range(self.arch.n_blocks - 1, -1, -1):
            Lf, L1, L2 = self.layers[1 + 3 * k: 4 + 3 * k]
            h_in, u, z1, gam, m, vv = cache["blocks"][k]
            W1, _ = self._wb(L1, v)
            W2, _ = self._wb(L2, v)
            adj.append((L2, gh, vv))
            gm = (gh @ W2) * dsilu(m)[:, None, :]
            gz1 = gm * (1.0 + gam)[:, None, :]
            gf = np.concatenate([gm * z1[:, None, :], gm], axis=2)
            adj.append((Lf, gf, cache["e"]))
            adj.append((L1, gz1, u))
            gh = gh + (gz1 @ W1) * dsilu(h_in)[:, None, :]
        adj.append((self.layers[0], gh, cache["x"]))
        return adj

    def plan(self, indices) -> ColumnPlan:
        idx = as_index_set(indices, self.p)
        key = idx.tobytes()
        pl = self._plans.get(key)
        if pl is None:
            pl = ColumnPlan(self.layers, idx)
            if len(self._plans) > 16:
                self._plans.clear()
            self._plans[key] = pl
        return pl

    def jacobian_batch(self, x, t, indices=None, cotangents=None, return_output=False):
        """Parameter Jacobian rows for a batch.

        ``x`` is (B, d). Returns (B, K, m) where K = d for the full output
        Jacobian (or the number of supplied cotangent rows, shape (B, K, d))
        and m = p or the size of ``indices``. With ``return_output`` the
        forward output is returned alongside.
        """
        x = np.atleast_2d(np.asarray(x, dtype=np.float64))
        B = x.shape[0]
        out, cache = self._forward(x, t, cache=True)
        if cotangents is None:
            G = np.broadcast_to(np.eye(self.d), (B, self.d, self.d))
        else:
            G = np.asarray(cotangents, dtype=np.float64)
            if G.ndim != 3 or G.shape[0] != B or G.shape[2] != self.d:
                raise ShapeError(f"cotangents must be (B, K, {self.d})")
        adj = {L.name: (delta, act) for L, delta, act in self._adjoints(cache, G)}
        K = G.shape[1]
        if indices is None:
            J = np.empty((B, K, self.p))
            for L in self.layers:
                delta, act = adj[L.name]
                J[:, :, L.w_off:L.b_off] = (delta[:, :, :, None] * act[:, None, None, :]).reshape(B, K, -1)
                J[:, :, L.b_off:L.b_off + L.out] = delta
            return (J, out) if return_output else J
        pl = indices if isinstance(indices, ColumnPlan) else self.plan(indices)
        J = np.empty((B, K, pl.m))
        for name, wpos, o, i, bpos, bo in pl.parts:
            delta, act = adj[name]
            if wpos.size:
                J[:, :, wpos] = delta[:, :, o] * act[:, None, i]
            if bpos.size:
                J[:, :, bpos] = delta[:, :, bo]
        return (J, out) if return_output else J

    def param_jacobian(self, x, t) -> np.ndarray:
        """d x p Jacobian of the output at a single input."""
        return self.jacobian_batch(np.asarray(x)[None], t)[0]

    def param_jacobian_columns(self, x, t, indices) -> np.ndarray:
        return self.jacobian_batch(np.asarray(x)[None], t, indices)[0]

    def vjp(self, x, t, G) -> np.ndarray:
        """Sum over the batch of J_b^T G_b, with G of shape (B, d)."""
        x = np.atleast_2d(np.asarray(x, dtype=np.float64))
        _, cache = self._forward(x, t, cache=True)
        return self._vjp_cached(cache, np.asarray(G, dtype=np.float64))

    def _vjp_cached(self, cache, G):
        grad = np.zeros(self.p)
        for L, delta, act in self._adjoints(cache, G[:, None, :]):
            delta = delta[:, 0, :]
            grad[L.w_off:L.b_off] = (delta.T @ act).ravel()
            grad[L.b_off:L.b_off + L.out] = delta.sum(axis=0)
        return grad

    # -- training objective -------------------------------------------
    def loss_and_grad(self, x_t, t, eps, weights=None):
        """Mean over the batch of w * ||eps_hat - eps||^2 / d and its gradient.

        ``x_t`` are already-noised inputs and ``t`` a per-row step array.
        """
        x_t = np.atleast_2d(np.asarray(x_t, dtype=np.float64))
        eps = np.atleast_2d(np.asarray(eps, dtype=np.float64))
        B = x_t.shape[0]
        if B == 0:
            raise InvalidArgument("empty batch")
        w = np.ones(B) if weights is None else np.asarray(weights, dtype=np.float64)
        out, cache = self._forward(x_t, t, cache=True)
        r = out - eps
        loss = float(np.sum(w * np.sum(r * r, axis=1)) / (B * self.d))
        G = (2.0 / (B * self.d)) * w[:, None] * r
        return loss, self._vjp_cached(cache, G)


def count_params(arch: Architecture) -> int:
    L = build_layers(arch)[-1]
    return L.w_off + L.size


def snr_weights(bar_alpha: np.ndarray) -> np.ndarray:
    """sigmoid(log SNR_t) normalised to mean one over t = 1..T."""
    ab = np.asarray(bar_alpha, dtype=np.float64)[1:]
    w = expit(np.log(ab) - np.log1p(-ab))
    return np.concatenate([[0.0], w / w.mean()])


# -- checkpoints ------------------------------------------------------

def save_checkpoint(path, model: DenoiserModel, ema: Optional[DenoiserModel] = None,
                    seed: Optional[int] = None, schedule_hash: str = "",
                    extra: Optional[dict] = None) -> None:
    header = {
        "architecture": asdict(model.arch),
        "layout": [[n, o, list(s)] for n, o, s in model.params.layout],
        "seed": seed,
        "schedule_hash": schedule_hash,
        "p": model.p,
        "has_ema": ema is not None,
        "extra": extra or {},
    }
    hb = json.dumps(header, sort_keys=True).encode("utf-8")
    buf = io.BytesIO()
    buf.write(MAGIC)
    buf.write(struct.pack("<II", CKPT_VERSION, len(hb)))
    buf.write(hb)
    buf.write(model.params.values.astype("<f8").tobytes())
    if ema is not None:
        buf.write(ema.params.values.astype("<f8").tobytes())
    with open(path, "wb") as fh:
        fh.write(buf.getvalue())


def load_checkpoint(path, expected_schedule_hash: Optional[str] = None):
    """Returns (model, ema_model_or_None, header)."""
    with open(path, "rb") as fh:
        raw = fh.read()
    if raw[:4] != MAGIC:
        raise SchemaError(f"{path}: not a checkpoint (bad magic)")
    version, hlen = struct.unpack("<II", raw[4:12])
    if version != CKPT_VERSION:
        raise SchemaError(f"{path}: unsupported checkpoint version {version}")
    header = json.loads(raw[12:12 + hlen].decode("utf-8"))
    if expected_schedule_hash is not None and header["schedule_hash"] != expected_schedule_hash:
        raise SchemaError(
            f"{path}: schedule hash {header['schedule_hash']} does not match {expected_schedule_hash}")
    arch = Architecture(**header["architecture"])
    layout = [(n, o, tuple(s)) for n, o, s in header["layout"]]
    p = header["p"]
    body = np.frombuffer(raw, dtype="<f8", offset=12 + hlen)
    expected = p * (2 if header["has_ema"] else 1)
    if body.size != expected:
        raise SchemaError(f"{path}: parameter block has {body.size} values, expected {expected}")
    model = DenoiserModel(arch, ParamVector(body[:p].astype(np.float64), layout))
    ema = None
    if header["has_ema"]:
        ema = DenoiserModel(arch, ParamVector(body[p:].astype(np.float64), layout))
    return model, ema, header
