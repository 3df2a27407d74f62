"""Models: a single-hidden-layer CNN, a small deeper CNN, parameter
containers and binary checkpoints.

Models are functional: parameters live in a ParamSet that is passed to
``forward``/``loss``, which keeps attack and double-backprop code free of
hidden state.
"""

from __future__ import annotations

import json
import struct

import numpy as np

from . import engine as eg


class CheckpointError(Exception):
    """Malformed or truncated checkpoint file."""


class ParamSet:
    """Ordered name -> leaf Tensor mapping; names unique, shapes fixed."""

    def __init__(self, items):
        self._items: dict[str, eg.Tensor] = {}
        for name, value in (items.items() if hasattr(items, "items") else items):
            if name in self._items:
                raise ValueError(f"duplicate parameter name {name!r}")
            t = value if isinstance(value, eg.Tensor) else eg.Tensor(value, requires_grad=True)
            t.requires_grad = True
            self._items[name] = t

    def names(self):
        return list(self._items.keys())

    def items(self):
        return self._items.items()

    def tensors(self):
        return list(self._items.values())

    def __getitem__(self, name: str) -> eg.Tensor:
        return self._items[name]

    def __contains__(self, name: str) -> bool:
        return name in self._items

    def __len__(self) -> int:
        return len(self._items)

    @property
    def param_count(self) -> int:
        return sum(t.size for t in self._items.values())

    def to_arrays(self) -> dict[str, np.ndarray]:
        return {n: t.data.copy() for n, t in self._items.items()}

    def copy(self) -> "ParamSet":
        return ParamSet((n, eg.Tensor(t.data.copy(), requires_grad=True))
                        for n, t in self._items.items())

    def with_arrays(self, arrays: dict[str, np.ndarray]) -> "ParamSet":
        """New ParamSet with some entries replaced; shapes must match."""
        out = []
        for n, t in self._items.items():
            if n in arrays:
                a = np.asarray(arrays[n], dtype=np.float64)
                if a.shape != t.shape:
                    raise ValueError(f"shape change for {n!r}: {t.shape} -> {a.shape}")
                out.append((n, eg.Tensor(a, requires_grad=True)))
            else:
                out.append((n, t))
        return ParamSet(out)


class Model:
    """Interface shared by real models and test toys."""

    num_classes: int

    def forward(self, params: ParamSet, x) -> eg.Tensor:
        raise NotImplementedError

    def param_shapes(self) -> dict[str, tuple]:
        raise NotImplementedError

    def init_params(self, seed: int = 0, scheme: str = "kaiming",
                    sigma_w: float = 1.0, sigma_u: float = 1.0) -> ParamSet:
        raise NotImplementedError

    def loss_per_example(self, params: ParamSet, x, y) -> eg.Tensor:
        return eg.softmax_cross_entropy(self.forward(params, x), y)

    def loss(self, params: ParamSet, x, y) -> eg.Tensor:
        """Mean cross-entropy over the batch."""
        return eg.mean(self.loss_per_example(params, x, y))

    def logits(self, params: ParamSet, x) -> np.ndarray:
        with eg.no_grad():
            return self.forward(params, x).data

    def predict(self, params: ParamSet, x) -> np.ndarray:
        return np.argmax(self.logits(params, x), axis=1)

    def accuracy(self, params: ParamSet, x, y, batch_size: int = 1000) -> float:
        correct = 0
        for i in range(0, len(y), batch_size):
            correct += int(np.sum(self.predict(params, x[i:i + batch_size]) == y[i:i + batch_size]))
        return correct / len(y)

    def params_from_arrays(self, arrays: dict[str, np.ndarray]) -> ParamSet:
        shapes = self.param_shapes()
        missing = set(shapes) - set(arrays)
        if missing:
            raise ValueError(f"missing parameters: {sorted(missing)}")
        for n, s in shapes.items():
            if tuple(np.shape(arrays[n])) != tuple(s):
                raise ValueError(f"parameter {n!r} has shape {np.shape(arrays[n])}, expected {s}")
        return ParamSet((n, eg.Tensor(np.array(arrays[n], dtype=np.float64), requires_grad=True))
                        for n in shapes)


def _gauss(rng, shape, std):
    return rng.standard_normal(shape) * std


class SingleLayerCNN(Model):
    """conv(k x k, stride, zero padding) -> ReLU -> fully connected logits.

    The default 4-filter/3x3/stride-1/no-padding configuration on 32x32x3
    inputs is the small network whose single-step adversarial training
    collapses; filters are few enough to inspect one by one.
    """

    def __init__(self, in_channels: int = 3, side: int = 32, filters: int = 4,
                 kernel: int = 3, stride: int = 1, padding: int = 0,
                 num_classes: int = 10):
        self.in_channels = in_channels
        self.side = side
        self.filters = filters
        self.kernel = kernel
        self.stride = stride
        self.padding = padding
        self.num_classes = num_classes
        self.oh = (side + 2 * padding - kernel) // stride + 1
        self.ow = self.oh
        if self.oh < 1:
            raise ValueError("kernel does not fit input")
        self.feat_dim = filters * self.oh * self.ow

    def param_shapes(self):
        k = self.kernel
        return {"conv.w": (self.filters, self.in_channels, k, k),
                "conv.b": (self.filters,),
                "fc.w": (self.num_classes, self.feat_dim),
                "fc.b": (self.num_classes,)}

    def init_params(self, seed: int = 0, scheme: str = "kaiming",
                    sigma_w: float = 1.0, sigma_u: float = 1.0) -> ParamSet:
        rng = np.random.default_rng(seed)
        shapes = self.param_shapes()
        if scheme == "kaiming":
            w_std = np.sqrt(2.0 / (self.in_channels * self.kernel ** 2))
            u_std = np.sqrt(2.0 / self.feat_dim)
        elif scheme == "gaussian":
            w_std, u_std = sigma_w, sigma_u
        else:
            raise ValueError(f"unknown init scheme {scheme!r}")
        return ParamSet([
            ("conv.w", _gauss(rng, shapes["conv.w"], w_std)),
            ("conv.b", np.zeros(shapes["conv.b"])),
            ("fc.w", _gauss(rng, shapes["fc.w"], u_std)),
            ("fc.b", np.zeros(shapes["fc.b"])),
        ])

    def conv_preactivations(self, params: ParamSet, x) -> np.ndarray:
        with eg.no_grad():
            return eg.conv2d(eg._as_tensor(x), params["conv.w"], params["conv.b"],
                             stride=self.stride, padding=self.padding).data

    def preactivation_margin(self, params: ParamSet, x) -> float:
        return float(np.min(np.abs(self.conv_preactivations(params, x))))

    def forward(self, params: ParamSet, x) -> eg.Tensor:
        h = eg.relu(eg.conv2d(eg._as_tensor(x), params["conv.w"], params["conv.b"],
                              stride=self.stride, padding=self.padding))
        h = eg.flatten(h)
        return eg.add(eg.matmul(h, eg.transpose(params["fc.w"])), params["fc.b"])

    def filter_outgoing_norms(self, params: ParamSet) -> np.ndarray:
        """l2 norm of each filter's outgoing fully-connected weights."""
        u = params["fc.w"].data.reshape(self.num_classes, self.filters, self.oh * self.ow)
        return np.sqrt((u ** 2).sum(axis=(0, 2)))


class SmallConvNet(Model):
    """A few strided conv+ReLU blocks, one hidden FC layer, logits head."""

    def __init__(self, in_channels: int = 3, side: int = 32,
                 blocks=((8, 3, 2), (16, 3, 2)), hidden: int = 64,
                 num_classes: int = 10):
        if not 2 <= len(blocks) <= 4:
            raise ValueError("SmallConvNet takes 2-4 conv blocks")
        self.in_channels = in_channels
        self.side = side
        self.blocks = tuple(tuple(b) for b in blocks)
        self.hidden = hidden
        self.num_classes = num_classes
        s, c = side, in_channels
        self._geom = []
        for (f, k, stride) in self.blocks:
            pad = k // 2
            s = (s + 2 * pad - k) // stride + 1
            if s < 1:
                raise ValueError("conv stack does not fit input")
            self._geom.append((c, s, pad))
            c = f
        self.feat_dim = c * s * s

    def param_shapes(self):
        shapes = {}
        c = self.in_channels
        for i, (f, k, _) in enumerate(self.blocks):
            shapes[f"conv{i}.w"] = (f, c, k, k)
            shapes[f"conv{i}.b"] = (f,)
            c = f
        shapes["fc1.w"] = (self.hidden, self.feat_dim)
        shapes["fc1.b"] = (self.hidden,)
        shapes["fc2.w"] = (self.num_classes, self.hidden)
        shapes["fc2.b"] = (self.num_classes,)
        return shapes

    def init_params(self, seed: int = 0, scheme: str = "kaiming",
                    sigma_w: float = 1.0, sigma_u: float = 1.0) -> ParamSet:
        rng = np.random.default_rng(seed)
        items = []
        for name, shape in self.param_shapes().items():
            if name.endswith(".b"):
                items.append((name, np.zeros(shape)))
            elif scheme == "kaiming":
                fan_in = int(np.prod(shape[1:]))
                items.append((name, _gauss(rng, shape, np.sqrt(2.0 / fan_in))))
            elif scheme == "gaussian":
                std = sigma_w if name.startswith("conv") else sigma_u
                items.append((name, _gauss(rng, shape, std)))
            else:
                raise ValueError(f"unknown init scheme {scheme!r}")
        return ParamSet(items)

    def forward(self, params: ParamSet, x) -> eg.Tensor:
        h = eg._as_tensor(x)
        for i, (f, k, stride) in enumerate(self.blocks):
            h = eg.relu(eg.conv2d(h, params[f"conv{i}.w"], params[f"conv{i}.b"],
                                  stride=stride, padding=k // 2))
        h = eg.flatten(h)
        h = eg.relu(eg.add(eg.matmul(h, eg.transpose(params["fc1.w"])), params["fc1.b"]))
        return eg.add(eg.matmul(h, eg.transpose(params["fc2.w"])), params["fc2.b"])


def zero_filter(params: ParamSet, index: int, conv_name: str = "conv") -> ParamSet:
    """Copy of ``params`` with one convolution filter (and its bias) zeroed.

    ReLU(0) = 0, so the filter's contribution to every logit vanishes.
    """
    w = params[f"{conv_name}.w"].data
    if not 0 <= index < w.shape[0]:
        raise IndexError(f"filter index {index} out of range [0,{w.shape[0]})")
    new_w = w.copy()
    new_w[index] = 0.0
    new_b = params[f"{conv_name}.b"].data.copy()
    new_b[index] = 0.0
    return params.with_arrays({f"{conv_name}.w": new_w, f"{conv_name}.b": new_b})


_MAGIC = b"COATCKPT"
_VERSION = 1


def save_checkpoint(path, params, config: dict | None = None,
                    extra: dict[str, np.ndarray] | None = None) -> None:
    """Versioned header + named float64 parameter table + config echo.

    Arrays are stored raw little-endian, so a load is bit-exact.
    """
    arrays = params.to_arrays() if isinstance(params, ParamSet) else dict(params)
    extra = dict(extra or {})
    header = {
        "version": _VERSION,
        "config": config,
        "params": [{"name": n, "shape": list(np.shape(a))} for n, a in arrays.items()],
        "extra": [{"name": n, "shape": list(np.shape(a))} for n, a in extra.items()],
    }
    blob = json.dumps(header).encode()
    with open(path, "wb") as f:
        f.write(_MAGIC)
        f.write(struct.pack("<I", len(blob)))
        f.write(blob)
        for a in list(arrays.values()) + list(extra.values()):
            f.write(np.ascontiguousarray(a, dtype="<f8").tobytes())


def load_checkpoint(path):
    """Returns (params: name->array, config, extra: name->array)."""
    with open(path, "rb") as f:
        raw = f.read()
    if raw[:len(_MAGIC)] != _MAGIC:
        raise CheckpointError(f"{path}: not a checkpoint (bad magic)")
    (hlen,) = struct.unpack("<I", raw[len(_MAGIC):len(_MAGIC) + 4])
    start = len(_MAGIC) + 4
    try:
        header = json.loads(raw[start:start + hlen].decode())
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise CheckpointError(f"{path}: corrupt header: {exc}") from exc
    if header.get("version") != _VERSION:
        raise CheckpointError(f"{path}: unsupported version {header.get('version')}")
    offset = start + hlen
    out = []
    for section in ("params", "extra"):
        arrays = {}
        for rec in header[section]:
            shape = tuple(rec["shape"])
            n_bytes = int(np.prod(shape, dtype=np.int64)) * 8 if shape else 8
            chunk = raw[offset:offset + n_bytes]
            if len(chunk) != n_bytes:
                raise CheckpointError(f"{path}: truncated at {rec['name']!r}")
            arrays[rec["name"]] = np.frombuffer(chunk, dtype="<f8").astype(np.float64).reshape(shape)
            offset += n_bytes
        out.append(arrays)
    return out[0], header.get("config"), out[1]
