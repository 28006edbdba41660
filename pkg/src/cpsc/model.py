"""Multimodal network: per-modality MLP encoders, decomposition layers,
unimodal heads and a concatenation fusion head, with an explicit reverse pass.

Everything is batched over the leading axis. Shapes, per modality ``m``:

    x        (B, in_m)
    h        (B, d)           encoder output
    comps    (B, n, d)        ReLU(W_dec h) split into n contiguous chunks
    feat     (B, d)           what the heads consume: h, or sum_k coef[:, k] * comps[:, k]
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .errors import ConfigError, ConsistencyError, DimensionError
from .numeric import OptimizerKind, Param, relu, softmax, step


@dataclass
class ModelConfig:
    input_dims: tuple[int, ...] = (16, 16)
    feature_dim: int = 8
    component_count: int = 4
    top_k: int = 2
    class_count: int = 4
    hidden: int = 32
    # "identity": W_dec starts as n stacked identities plus N(0, dec_noise^2), so every
    # component initially equals ReLU(h); "random": He-normal.
    dec_init: str = "identity"
    dec_noise: float = 0.1

    def __post_init__(self):
        if self.dec_init not in ("identity", "random"):
            raise ConfigError(f"unknown dec_init {self.dec_init!r}")
        self.input_dims = tuple(int(i) for i in self.input_dims)
        if self.modality_count < 2:
            raise ConfigError("need at least two modalities")
        if self.component_count < 2:
            raise ConfigError("component_count must be >= 2")
        if not 1 <= self.top_k <= self.component_count:
            raise ConfigError("top_k must lie in [1, component_count]")
        if self.feature_dim < 1 or self.class_count < 2 or self.hidden < 1:
            raise ConfigError("feature_dim, hidden must be >= 1 and class_count >= 2")

    @property
    def modality_count(self) -> int:
        return len(self.input_dims)

    @property
    def high_dim(self) -> int:
        return self.component_count * self.feature_dim


@dataclass
class ForwardCache:
    version: int
    x: list
    z1: list
    a1: list
    h: list
    pre_high: list | None = None
    comps: list | None = None
    coef: list | None = None
    feats: list | None = None
    fused_in: np.ndarray | None = None
    fused_logits: np.ndarray | None = None
    uni_logits: list | None = None
    extras: dict = field(default_factory=dict)

    @property
    def fused_probs(self) -> np.ndarray:
        return softmax(self.fused_logits)

    def uni_probs(self, m: int) -> np.ndarray:
        return softmax(self.uni_logits[m])


class CpscModel:
    def __init__(self, config: ModelConfig, seed: int = 0):
        self.config = config
        self.version = 0
        self.params: dict[str, Param] = {}
        rng = np.random.default_rng([seed, 0x5EED])
        d, n, k, hid = config.feature_dim, config.component_count, config.class_count, config.hidden

        def normal(shape, fan_in, gain):
            return rng.normal(0.0, np.sqrt(gain / fan_in), size=shape)

        for m, din in enumerate(config.input_dims):
            self.params[f"enc{m}.W1"] = Param(normal((hid, din), din, 2.0))
            self.params[f"enc{m}.b1"] = Param(np.zeros(hid))
            self.params[f"enc{m}.W2"] = Param(normal((d, hid), hid, 1.0))
            self.params[f"enc{m}.b2"] = Param(np.zeros(d))
            if config.dec_init == "identity":
                w_dec = np.tile(np.eye(d), (n, 1)) + config.dec_noise * rng.normal(size=(n * d, d))
            else:
                w_dec = normal((n * d, d), d, 2.0)
            self.params[f"dec{m}.W"] = Param(w_dec)
            self.params[f"uni{m}.W"] = Param(normal((k, d), d, 1.0))
            self.params[f"uni{m}.b"] = Param(np.zeros(k))
        md = config.modality_count * d
        self.params["fuse.W"] = Param(normal((k, md), md, 1.0))
        self.params["fuse.b"] = Param(np.zeros(k))

    def p(self, name: str) -> np.ndarray:
        return self.params[name].value

    def zero_grad(self):
        for prm in self.params.values():
            prm.zero_grad()

    def step(self, kind: OptimizerKind):
        step(self.params, kind)
        self.version += 1

    def touch(self):
        """Mark parameters as changed outside ``step`` (invalidates caches)."""
        self.version += 1

    # forward pieces

    def _check_input(self, m: int, x) -> np.ndarray:
        x = np.asarray(x, dtype=np.float64)
        if x.ndim == 1:
            x = x[None, :]
        if x.ndim != 2 or x.shape[1] != self.config.input_dims[m]:
            raise DimensionError(
                f"modality {m} expects input dim {self.config.input_dims[m]}, got shape {x.shape}"
            )
        return x

    def _encode(self, m, x):
        z1 = x @ self.p(f"enc{m}.W1").T + self.p(f"enc{m}.b1")
        a1 = relu(z1)
        h = a1 @ self.p(f"enc{m}.W2").T + self.p(f"enc{m}.b2")
        return z1, a1, h

    def encode(self, m: int, x) -> np.ndarray:
        single = np.ndim(x) == 1
        h = self._encode(m, self._check_input(m, x))[2]
        return h[0] if single else h

    def _decompose(self, m, h):
        pre = h @ self.p(f"dec{m}.W").T
        comps = relu(pre).reshape(h.shape[0], self.config.component_count, self.config.feature_dim)
        return pre, comps

    def decompose(self, m: int, h) -> np.ndarray:
        """Components ``(n, d)`` for a single feature, or ``(B, n, d)`` for a batch."""
        h = np.asarray(h, dtype=np.float64)
        single = h.ndim == 1
        if h.shape[-1] != self.config.feature_dim:
            raise DimensionError(f"feature dim {h.shape[-1]} != {self.config.feature_dim}")
        comps = self._decompose(m, np.atleast_2d(h))[1]
        return comps[0] if single else comps

    def unimodal_logits(self, m: int, c) -> np.ndarray:
        c = np.asarray(c, dtype=np.float64)
        if c.shape[-1] != self.config.feature_dim:
            raise DimensionError(f"feature dim {c.shape[-1]} != {self.config.feature_dim}")
        return c @ self.p(f"uni{m}.W").T + self.p(f"uni{m}.b")

    def unimodal_predict(self, m: int, c) -> np.ndarray:
        return softmax(self.unimodal_logits(m, c))

    def fuse_logits(self, feats) -> np.ndarray:
        if len(feats) != self.config.modality_count:
            raise DimensionError(f"expected {self.config.modality_count} modality features, got {len(feats)}")
        feats = [np.asarray(f, dtype=np.float64) for f in feats]
        for f in feats:
            if f.shape[-1] != self.config.feature_dim:
                raise DimensionError(f"feature dim {f.shape[-1]} != {self.config.feature_dim}")
        cat = np.concatenate(feats, axis=-1)
        return cat @ self.p("fuse.W").T + self.p("fuse.b")

    def fuse_predict(self, feats) -> np.ndarray:
        return softmax(self.fuse_logits(feats))

    # batched forward with cache

    def forward_encode(self, xs, decompose: bool = True) -> ForwardCache:
        if len(xs) != self.config.modality_count:
            raise DimensionError(f"expected {self.config.modality_count} modalities, got {len(xs)}")
        cache = ForwardCache(self.version, [], [], [], [])
        if decompose:
            cache.pre_high, cache.comps = [], []
        for m, x in enumerate(xs):
            x = self._check_input(m, x)
            z1, a1, h = self._encode(m, x)
            cache.x.append(x)
            cache.z1.append(z1)
            cache.a1.append(a1)
            cache.h.append(h)
            if decompose:
                pre, comps = self._decompose(m, h)
                cache.pre_high.append(pre)
                cache.comps.append(comps)
        return cache

    def forward_heads(self, cache: ForwardCache, coef=None, unimodal: bool = True) -> ForwardCache:
        """Fill head outputs. ``coef[m]`` is a ``(B, n)`` mixing matrix over components;
        ``None`` feeds raw encoder features."""
        self._check_fresh(cache)
        if coef is None:
            feats = list(cache.h)
        else:
            if cache.comps is None:
                raise ConsistencyError("component mixing requested on a cache without decomposition")
            feats = [np.einsum("bn,bnd->bd", c, comps) for c, comps in zip(coef, cache.comps)]
        cache.coef = coef
        cache.feats = feats
        cache.fused_in = np.concatenate(feats, axis=1)
        cache.fused_logits = cache.fused_in @ self.p("fuse.W").T + self.p("fuse.b")
        cache.uni_logits = [self.unimodal_logits(m, f) for m, f in enumerate(feats)] if unimodal else None
        return cache

    def forward(self, xs, coef=None, unimodal: bool = True) -> ForwardCache:
        cache = self.forward_encode(xs, decompose=coef is not None)
        return self.forward_heads(cache, coef, unimodal)

    def _check_fresh(self, cache: ForwardCache):
        if cache.version != self.version:
            raise ConsistencyError(
                f"forward cache built at parameter version {cache.version}, model is at {self.version}"
            )

    # reverse pass

    def backward(self, cache: ForwardCache, fused_dlogits=None, uni_dlogits=None, dcomps=None, dh=None):
        """Accumulate (+=) parameter gradients from seeds on each head.

        ``fused_dlogits``: (B, K) gradient w.r.t. fusion logits.
        ``uni_dlogits[m]``: (B, K) gradient w.r.t. unimodal logits of modality m.
        ``dcomps[m]`` / ``dh[m]``: extra gradients w.r.t. components / encoder
        output (diversity loss).
        """
        self._check_fresh(cache)
        cfg = self.config
        M, d = cfg.modality_count, cfg.feature_dim
        B = cache.h[0].shape[0]
        dfeat = [np.zeros((B, d)) for _ in range(M)]
        if fused_dlogits is not None:
            g = self.params["fuse.W"]
            g.grad += fused_dlogits.T @ cache.fused_in
            self.params["fuse.b"].grad += fused_dlogits.sum(axis=0)
            dcat = fused_dlogits @ g.value
            for m in range(M):
                dfeat[m] += dcat[:, m * d : (m + 1) * d]
        if uni_dlogits is not None:
            for m, dl in enumerate(uni_dlogits):
                if dl is None:
                    continue
                w = self.params[f"uni{m}.W"]
                w.grad += dl.T @ cache.feats[m]
                self.params[f"uni{m}.b"].grad += dl.sum(axis=0)
                dfeat[m] += dl @ w.value

        for m in range(M):
            dh_m = np.zeros((B, d))
            dc = None
            if cache.coef is not None:
                dc = cache.coef[m][:, :, None] * dfeat[m][:, None, :]
            else:
                dh_m += dfeat[m]
            if dcomps is not None and dcomps[m] is not None:
                dc = dcomps[m] if dc is None else dc + dcomps[m]
            if dc is not None:
                dpre = dc.reshape(B, cfg.high_dim) * (cache.pre_high[m] > 0)
                wdec = self.params[f"dec{m}.W"]
                wdec.grad += dpre.T @ cache.h[m]
                dh_m += dpre @ wdec.value
            if dh is not None and dh[m] is not None:
                dh_m += dh[m]
            w2 = self.params[f"enc{m}.W2"]
            w2.grad += dh_m.T @ cache.a1[m]
            self.params[f"enc{m}.b2"].grad += dh_m.sum(axis=0)
            dz1 = (dh_m @ w2.value) * (cache.z1[m] > 0)
            self.params[f"enc{m}.W1"].grad += dz1.T @ cache.x[m]
            self.params[f"enc{m}.b1"].grad += dz1.sum(axis=0)

    # checkpoints

    def save(self, path, extra: dict | None = None):
        path = Path(path)
        header = {"model_config": asdict(self.config), "version": self.version, "extra": extra or {}}
        arrays = {f"param:{k}": v.value for k, v in self.params.items()}
        with open(path, "wb") as fh:
            np.savez(fh, __header__=np.array(json.dumps(header, sort_keys=True)), **arrays)

    @classmethod
    def load(cls, path) -> "CpscModel":
        with np.load(path, allow_pickle=False) as data:
            header = json.loads(str(data["__header__"]))
            model = cls(ModelConfig(**header["model_config"]))
            for key in data.files:
                if key.startswith("param:"):
                    name = key[len("param:") :]
                    if name not in model.params:
                        raise ConfigError(f"checkpoint has unknown parameter {name!r}")
                    model.params[name].value = data[key].copy()
        model.version = header["version"]
        return model
