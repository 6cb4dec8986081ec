"""Dense MLP substrate with hand-written backprop, Adam, and a binary checkpoint format.

Networks follow one layout: affine layers with SiLU on hidden outputs, a linear
output layer, and pre-LayerNorm on the inputs of the middle layers only.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy.special import expit

MAGIC = b"NAPC"
FORMAT_VERSION = 1
LN_EPS = 1e-5


class ConfigError(ValueError):
    pass


class UsageError(RuntimeError):
    pass


class TrainingError(RuntimeError):
    pass


class CheckpointError(ValueError):
    pass


def silu(x):
    s = expit(x)
    s *= x
    return s


def silu_grad(x):
    s = expit(x)
    return s * (1.0 + x * (1.0 - s))


@dataclass
class Layer:
    weight: np.ndarray  # (out, in)
    bias: np.ndarray  # (out,)
    norm: bool = False
    gamma: np.ndarray | None = None
    beta: np.ndarray | None = None

    @property
    def in_dim(self) -> int:
        return self.weight.shape[1]

    @property
    def out_dim(self) -> int:
        return self.weight.shape[0]

    def params(self) -> list[np.ndarray]:
        ps = [self.weight, self.bias]
        if self.norm:
            ps += [self.gamma, self.beta]
        return ps


class DenseNet:
    """Feed-forward net built from ``sizes = [in, h1, ..., out]``.

    ``forward`` caches what ``backward`` needs; the cache holds only the most
    recent call.
    """

    def __init__(self, layers: list[Layer]):
        if not layers:
            raise ConfigError("DenseNet needs at least one layer")
        for a, b in zip(layers, layers[1:]):
            if a.out_dim != b.in_dim:
                raise ConfigError(f"layer dims do not chain: {a.out_dim} -> {b.in_dim}")
        self.layers = layers
        self.dtype = layers[0].weight.dtype
        self._cache = None
        self.grads: list[np.ndarray] | None = None

    @classmethod
    def build(cls, sizes, rng: np.random.Generator, dtype=np.float32, out_scale: float = 1.0,
              layer_norm: bool = True) -> "DenseNet":
        sizes = [int(s) for s in sizes]
        if len(sizes) < 2 or min(sizes) <= 0:
            raise ConfigError(f"bad layer sizes {sizes}")
        n = len(sizes) - 1
        layers = []
        for i in range(n):
            fan_in, fan_out = sizes[i], sizes[i + 1]
            lim = np.sqrt(6.0 / (fan_in + fan_out))
            w = rng.uniform(-lim, lim, size=(fan_out, fan_in))
            if i == n - 1:
                w = w * out_scale
            norm = layer_norm and 0 < i < n - 1
            layers.append(Layer(
                weight=w.astype(dtype),
                bias=np.zeros(fan_out, dtype=dtype),
                norm=norm,
                gamma=np.ones(fan_in, dtype=dtype) if norm else None,
                beta=np.zeros(fan_in, dtype=dtype) if norm else None,
            ))
        return cls(layers)

    @property
    def input_dim(self) -> int:
        return self.layers[0].in_dim

    @property
    def output_dim(self) -> int:
        return self.layers[-1].out_dim

    def params(self) -> list[np.ndarray]:
        return [p for layer in self.layers for p in layer.params()]

    def param_names(self) -> list[str]:
        names = []
        for i, layer in enumerate(self.layers):
            names += [f"layers[{i}].weight", f"layers[{i}].bias"]
            if layer.norm:
                names += [f"layers[{i}].gamma", f"layers[{i}].beta"]
        return names

    def n_params(self) -> int:
        return sum(p.size for p in self.params())

    def copy(self) -> "DenseNet":
        return DenseNet([
            Layer(l.weight.copy(), l.bias.copy(), l.norm,
                  None if l.gamma is None else l.gamma.copy(),
                  None if l.beta is None else l.beta.copy())
            for l in self.layers
        ])

    def astype(self, dtype) -> "DenseNet":
        net = self.copy()
        for l in net.layers:
            l.weight = l.weight.astype(dtype)
            l.bias = l.bias.astype(dtype)
            if l.norm:
                l.gamma = l.gamma.astype(dtype)
                l.beta = l.beta.astype(dtype)
        net.dtype = np.dtype(dtype)
        return net

    def forward(self, x) -> np.ndarray:
        x = np.asarray(x, dtype=self.dtype)
        squeeze = x.ndim == 1
        if squeeze:
            x = x[None, :]
        if x.shape[-1] != self.input_dim:
            raise ConfigError(f"input dim {x.shape[-1]} != net input dim {self.input_dim}")
        cache = []
        h = x
        last = len(self.layers) - 1
        for i, layer in enumerate(self.layers):
            entry = {}
            if layer.norm:
                # reductions accumulate in float64, elementwise work stays in the net dtype
                centred = h - h.mean(axis=-1, keepdims=True, dtype=np.float64).astype(self.dtype)
                var = np.square(centred).mean(axis=-1, keepdims=True, dtype=np.float64)
                inv = (1.0 / np.sqrt(var + LN_EPS)).astype(self.dtype)
                xhat = centred * inv
                entry["xhat"], entry["inv"] = xhat, inv
                h = xhat * layer.gamma + layer.beta
            entry["a"] = h
            z = h @ layer.weight.T + layer.bias
            entry["z"] = z
            h = z if i == last else silu(z)
            cache.append(entry)
        self._cache = cache
        return h[0] if squeeze else h

    __call__ = forward

    def backward(self, grad_out) -> np.ndarray:
        """Backprop ``grad_out`` through the last forward; sets ``self.grads``."""
        if self._cache is None:
            raise UsageError("backward called without a recorded forward pass")
        g = np.asarray(grad_out, dtype=self.dtype)
        squeeze = g.ndim == 1
        if squeeze:
            g = g[None, :]
        grads: list[list[np.ndarray]] = []
        last = len(self.layers) - 1
        for i in range(last, -1, -1):
            layer, entry = self.layers[i], self._cache[i]
            if i != last:
                g = g * silu_grad(entry["z"])
            a = entry["a"]
            gw = g.T @ a
            gb = g.sum(axis=0)
            g = g @ layer.weight
            lg = [gw, gb]
            if layer.norm:
                xhat, inv = entry["xhat"], entry["inv"]
                ggamma = (g * xhat).sum(axis=0)
                gbeta = g.sum(axis=0)
                dxhat = g * layer.gamma
                g = inv * (dxhat - dxhat.mean(axis=-1, keepdims=True)
                           - xhat * (dxhat * xhat).mean(axis=-1, keepdims=True))
                lg += [ggamma, gbeta]
            grads.append(lg)
        self.grads = [p for lg in reversed(grads) for p in lg]
        return g[0] if squeeze else g


def layer_norm(x: np.ndarray) -> np.ndarray:
    mu = x.mean(axis=-1, keepdims=True)
    var = ((x - mu) ** 2).mean(axis=-1, keepdims=True)
    return (x - mu) / np.sqrt(var + LN_EPS)


@dataclass
class Adam:
    """Adaptive-moment optimizer over a fixed list of parameter arrays (updated in place)."""

    params: list[np.ndarray]
    lr: float = 2e-5
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    names: list[str] | None = None
    step_count: int = 0
    m: list[np.ndarray] = field(default_factory=list)
    v: list[np.ndarray] = field(default_factory=list)

    def __post_init__(self):
        if self.lr <= 0:
            raise ConfigError("learning rate must be positive")
        if not self.m:
            self.m = [np.zeros_like(p, dtype=np.float64) for p in self.params]
            self.v = [np.zeros_like(p, dtype=np.float64) for p in self.params]

    def step(self, grads: list[np.ndarray]) -> None:
        if len(grads) != len(self.params):
            raise UsageError("gradient list does not match parameter list")
        for i, (p, g) in enumerate(zip(self.params, grads)):
            if g.shape != p.shape:
                raise UsageError(f"gradient shape {g.shape} != parameter shape {p.shape}")
            if not np.all(np.isfinite(g)):
                name = self.names[i] if self.names else f"param[{i}]"
                raise TrainingError(f"non-finite gradient in {name}")
        self.step_count += 1
        t = self.step_count
        c1 = 1.0 - self.beta1 ** t
        c2 = 1.0 - self.beta2 ** t
        for p, g, m, v in zip(self.params, grads, self.m, self.v):
            m *= self.beta1
            m += (1.0 - self.beta1) * g
            v *= self.beta2
            v += (1.0 - self.beta2) * np.square(g, dtype=np.float64)
            update = self.lr * (m / c1) / (np.sqrt(v / c2) + self.eps)
            p -= update.astype(p.dtype)


def clip_grad_norm(grads: list[np.ndarray], max_norm: float) -> float:
    total = float(np.sqrt(sum(float(np.sum(np.square(g, dtype=np.float64))) for g in grads)))
    if max_norm > 0 and total > max_norm:
        scale = max_norm / (total + 1e-12)
        for g in grads:
            g *= scale
    return total


# --- checkpoints -----------------------------------------------------------------

def _pack_net(net: DenseNet) -> bytes:
    out = [struct.pack("<I", len(net.layers))]
    for layer in net.layers:
        out.append(struct.pack("<IIB", layer.in_dim, layer.out_dim, 1 if layer.norm else 0))
        out.append(np.ascontiguousarray(layer.weight, dtype="<f4").tobytes())
        out.append(np.ascontiguousarray(layer.bias, dtype="<f4").tobytes())
        if layer.norm:
            out.append(np.ascontiguousarray(layer.gamma, dtype="<f4").tobytes())
            out.append(np.ascontiguousarray(layer.beta, dtype="<f4").tobytes())
    return b"".join(out)


class _Reader:
    def __init__(self, data: bytes, end: int):
        self.data, self.pos, self.end = data, 0, end

    def take(self, n: int, what: str) -> bytes:
        if self.pos + n > self.end:
            raise CheckpointError(f"truncated payload while reading {what}")
        b = self.data[self.pos:self.pos + n]
        self.pos += n
        return b

    def u32(self, what: str) -> int:
        return struct.unpack("<I", self.take(4, what))[0]

    def f32(self, n: int, what: str) -> np.ndarray:
        return np.frombuffer(self.take(4 * n, what), dtype="<f4").astype(np.float32)


def _unpack_net(r: _Reader) -> DenseNet:
    n = r.u32("layer count")
    if n == 0 or n > 1024:
        raise CheckpointError(f"implausible layer count {n}")
    layers = []
    for i in range(n):
        din, dout = r.u32("in_dim"), r.u32("out_dim")
        flag = r.take(1, "norm flag")[0]
        if flag not in (0, 1):
            raise CheckpointError(f"bad normalization flag {flag} in layer {i}")
        if layers and layers[-1].out_dim != din:
            raise CheckpointError(f"dimension mismatch at layer {i}: {layers[-1].out_dim} != {din}")
        w = r.f32(din * dout, f"layer {i} weight").reshape(dout, din)
        b = r.f32(dout, f"layer {i} bias")
        gamma = beta = None
        if flag:
            gamma = r.f32(din, f"layer {i} gamma")
            beta = r.f32(din, f"layer {i} beta")
        layers.append(Layer(w, b, bool(flag), gamma, beta))
    return DenseNet(layers)


def dumps(net: DenseNet, meta: dict | None = None, nets: dict[str, DenseNet] | None = None,
          arrays: dict[str, np.ndarray] | None = None) -> bytes:
    """Serialize ``net`` plus an optional extension block (JSON meta, extra nets, f32 arrays)."""
    ext = b""
    if meta or nets or arrays:
        blobs, payload = [], []
        for name, extra in (nets or {}).items():
            b = _pack_net(extra)
            blobs.append({"name": name, "kind": "net", "nbytes": len(b)})
            payload.append(b)
        for name, arr in (arrays or {}).items():
            arr = np.asarray(arr)
            b = np.ascontiguousarray(arr, dtype="<f4").tobytes()
            blobs.append({"name": name, "kind": "array", "nbytes": len(b), "shape": list(arr.shape)})
            payload.append(b)
        head = json.dumps({"meta": meta or {}, "blobs": blobs}, sort_keys=True).encode()
        ext = struct.pack("<I", len(head)) + head + b"".join(payload)
    body = MAGIC + struct.pack("<I", FORMAT_VERSION) + _pack_net(net) + struct.pack("<I", len(ext)) + ext
    return body + struct.pack("<Q", len(body) + 8)


def loads(data: bytes):
    """Inverse of :func:`dumps`; returns ``(net, meta, nets, arrays)``."""
    if len(data) < 4 or data[:4] != MAGIC:
        raise CheckpointError(f"bad magic: expected {MAGIC!r}, got {bytes(data[:4])!r}")
    if len(data) < 20:
        raise CheckpointError("truncated payload: file shorter than header")
    declared = struct.unpack("<Q", data[-8:])[0]
    if declared != len(data):
        raise CheckpointError(f"truncated payload: length field {declared} != file size {len(data)}")
    r = _Reader(data, len(data) - 8)
    r.take(4, "magic")
    version = r.u32("version")
    if version != FORMAT_VERSION:
        raise CheckpointError(f"unsupported format version {version}")
    net = _unpack_net(r)
    ext_len = r.u32("extension length")
    meta, nets, arrays = {}, {}, {}
    if ext_len:
        ext_end = r.pos + ext_len
        if ext_end > r.end:
            raise CheckpointError("truncated payload in extension block")
        head_len = r.u32("extension header length")
        head = json.loads(r.take(head_len, "extension header").decode())
        meta = head["meta"]
        for blob in head["blobs"]:
            if blob["kind"] == "net":
                sub = _Reader(r.take(blob["nbytes"], blob["name"]), blob["nbytes"])
                nets[blob["name"]] = _unpack_net(sub)
            else:
                arr = np.frombuffer(r.take(blob["nbytes"], blob["name"]), dtype="<f4")
                arrays[blob["name"]] = arr.astype(np.float32).reshape(blob["shape"])
        if r.pos != ext_end:
            raise CheckpointError("extension block size mismatch")
    if r.pos != r.end:
        raise CheckpointError("trailing bytes before length field")
    return net, meta, nets, arrays


def checkpoint_save(net: DenseNet, path, meta=None, nets=None, arrays=None) -> None:
    data = dumps(net, meta, nets, arrays)
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_bytes(data)
    tmp.replace(path)


def checkpoint_load(path, with_extension: bool = False):
    net, meta, nets, arrays = loads(Path(path).read_bytes())
    if with_extension:
        return net, meta, nets, arrays
    return net
