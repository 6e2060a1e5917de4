"""Feature extractor g, projection head, linear classifier h and f = h(g(x)).

Layers are plain descriptor dicts so a spec round-trips through JSON::

    {"kind": "conv", "out": 16, "kernel": 3, "padding": "same"}
    {"kind": "fc", "out": 64}
    {"kind": "relu"} | {"kind": "pool"} | {"kind": "flatten"} | {"kind": "identity"}

Images are channels-last, ``(H, W, C)`` per sample, and conv kernels are
stored as ``(kh, kw, C_in, C_out)``.

Parameters live in ``Model.params`` under the prefixes ``g.``, ``phi.`` and
``h.``.  The projection head is only used by contrastive pre-training.
"""
from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable

import numpy as np

from .tensor import ShapeError, Tensor, conv2d, get_default_dtype, maxpool2, no_grad

__all__ = [
    "ModelSpec",
    "Model",
    "LayerActivations",
    "forward",
    "project",
    "image_spec",
    "synthetic_spec",
    "save_checkpoint",
    "load_checkpoint",
    "CheckpointError",
    "CheckpointFormatError",
    "CheckpointVersionError",
    "CheckpointTruncatedError",
    "CheckpointShapeError",
]

LAYER_KINDS = {"conv", "fc", "relu", "pool", "flatten", "identity"}
GROUPS = ("g", "phi", "h")


@dataclass(frozen=True)
class ModelSpec:
    input_shape: tuple[int, ...]
    extractor: tuple[dict, ...]
    num_classes: int
    projection_dim: int = 128
    projection_hidden: int | None = None  # defaults to feature_dim

    def __post_init__(self):
        object.__setattr__(self, "input_shape", tuple(int(d) for d in self.input_shape))
        object.__setattr__(self, "extractor", tuple(dict(layer) for layer in self.extractor))
        if self.num_classes < 1:
            raise ValueError("num_classes must be positive")
        if self.projection_dim <= 0:
            raise ValueError("projection output width must be positive")
        self.layer_shapes()  # validates the chain

    @property
    def depth(self) -> int:
        return len(self.extractor)

    def layer_shapes(self) -> list[tuple[int, ...]]:
        """Per-sample output shape of every extractor layer."""
        shape = self.input_shape
        shapes = []
        for i, layer in enumerate(self.extractor, 1):
            kind = layer.get("kind")
            if kind not in LAYER_KINDS:
                raise ValueError(f"layer {i}: unknown kind {kind!r}")
            if kind == "conv":
                if len(shape) != 3:
                    raise ShapeError("conv", [shape], f"layer {i} expects (H,W,C) input")
                k = int(layer.get("kernel", 3))
                if layer.get("padding", "same") == "same":
                    shape = (shape[0], shape[1], int(layer["out"]))
                else:
                    shape = (shape[0] - k + 1, shape[1] - k + 1, int(layer["out"]))
            elif kind == "pool":
                if len(shape) != 3 or shape[0] % 2 or shape[1] % 2:
                    raise ShapeError("pool", [shape], f"layer {i} expects even spatial dims")
                shape = (shape[0] // 2, shape[1] // 2, shape[2])
            elif kind == "flatten":
                shape = (int(np.prod(shape)),)
            elif kind == "fc":
                if len(shape) != 1:
                    raise ShapeError("fc", [shape], f"layer {i} expects a flat input")
                shape = (int(layer["out"]),)
            if min(shape) <= 0:
                raise ShapeError(kind, [shape], f"layer {i} collapses to nothing")
            shapes.append(shape)
        return shapes

    @property
    def feature_dim(self) -> int:
        shapes = self.layer_shapes()
        last = shapes[-1] if shapes else self.input_shape
        if len(last) != 1:
            raise ShapeError("feature", [last], "extractor must end in a flat feature vector")
        return last[0]

    @property
    def hidden_dim(self) -> int:
        return self.projection_hidden or self.feature_dim

    def to_dict(self) -> dict:
        return {
            "input_shape": list(self.input_shape),
            "extractor": [dict(layer) for layer in self.extractor],
            "num_classes": self.num_classes,
            "projection_dim": self.projection_dim,
            "projection_hidden": self.projection_hidden,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "ModelSpec":
        return cls(
            input_shape=tuple(d["input_shape"]),
            extractor=tuple(d["extractor"]),
            num_classes=int(d["num_classes"]),
            projection_dim=int(d.get("projection_dim", 128)),
            projection_hidden=d.get("projection_hidden"),
        )

    def param_shapes(self) -> dict[str, tuple[int, ...]]:
        shapes: dict[str, tuple[int, ...]] = {}
        shape = self.input_shape
        for i, (layer, out_shape) in enumerate(zip(self.extractor, self.layer_shapes()), 1):
            if layer["kind"] == "conv":
                k = int(layer.get("kernel", 3))
                shapes[f"g.{i}.w"] = (k, k, shape[2], out_shape[2])
                shapes[f"g.{i}.b"] = (out_shape[2],)
            elif layer["kind"] == "fc":
                shapes[f"g.{i}.w"] = (shape[0], out_shape[0])
                shapes[f"g.{i}.b"] = (out_shape[0],)
            shape = out_shape
        d, hdim = self.feature_dim, self.hidden_dim
        shapes["phi.1.w"] = (d, hdim)
        shapes["phi.1.b"] = (hdim,)
        shapes["phi.2.w"] = (hdim, self.projection_dim)
        shapes["phi.2.b"] = (self.projection_dim,)
        shapes["h.w"] = (d, self.num_classes)
        shapes["h.b"] = (self.num_classes,)
        return shapes


def image_spec(input_shape=(28, 28, 1), num_classes=10, channels=(16, 32), hidden=64,
               projection_dim=128) -> ModelSpec:
    """conv3x3 -> ReLU -> pool2 blocks, then flatten -> fc -> ReLU."""
    layers: list[dict] = []
    for ch in channels:
        layers += [{"kind": "conv", "out": ch, "kernel": 3, "padding": "same"},
                   {"kind": "relu"}, {"kind": "pool"}]
    layers += [{"kind": "flatten"}, {"kind": "fc", "out": hidden}, {"kind": "relu"}]
    return ModelSpec(tuple(input_shape), tuple(layers), num_classes, projection_dim)


def synthetic_spec(dim=2, num_classes=2, widths=(64, 32), projection_dim=128) -> ModelSpec:
    layers: list[dict] = []
    for w in widths:
        layers += [{"kind": "fc", "out": w}, {"kind": "relu"}]
    return ModelSpec((dim,), tuple(layers), num_classes, projection_dim)


class Model:
    """Parameters of g, phi and h for a :class:`ModelSpec`.

    ``params`` maps names to leaf tensors.  Updates replace the tensors; the
    arrays of a recorded graph are never mutated.
    """

    def __init__(self, spec: ModelSpec, seed: int = 0, params: dict[str, np.ndarray] | None = None):
        self.spec = spec
        self.seed = int(seed)
        shapes = spec.param_shapes()
        if params is None:
            params = self._init_params(shapes, np.random.default_rng(self.seed))
        self.params: dict[str, Tensor] = {}
        for name, shape in shapes.items():
            if name not in params:
                raise ShapeError("model", [shape], f"missing parameter {name}")
            arr = np.asarray(params[name])
            if arr.shape != shape:
                raise ShapeError("model", [shape, arr.shape], f"parameter {name}")
            self.params[name] = Tensor(arr.copy(), requires_grad=True)

    @staticmethod
    def _init_params(shapes, rng) -> dict[str, np.ndarray]:
        out = {}
        for name, shape in shapes.items():
            if name.endswith(".b"):
                out[name] = np.zeros(shape)
                continue
            fan_in = int(np.prod(shape[:3])) if len(shape) == 4 else shape[0]
            bound = np.sqrt(6.0 / fan_in)
            out[name] = rng.uniform(-bound, bound, size=shape)
        return out

    def group(self, prefix: str) -> dict[str, Tensor]:
        return {k: v for k, v in self.params.items() if k.startswith(prefix + ".")}

    def set_trainable(self, groups: Iterable[str]) -> None:
        groups = set(groups)
        unknown = groups - set(GROUPS)
        if unknown:
            raise ValueError(f"unknown parameter groups {sorted(unknown)}")
        for name, t in self.params.items():
            t.requires_grad = name.split(".")[0] in groups

    def zero_grad(self) -> None:
        for t in self.params.values():
            t.grad = None

    def state(self) -> dict[str, np.ndarray]:
        return {k: v.data for k, v in self.params.items()}

    def clone(self) -> "Model":
        m = Model(self.spec, self.seed, {k: v.data.copy() for k, v in self.params.items()})
        for name, t in self.params.items():
            m.params[name].requires_grad = t.requires_grad
        return m

    def astype(self, dtype) -> "Model":
        return Model(self.spec, self.seed, {k: v.data.astype(dtype) for k, v in self.params.items()})

    # -- convenience wrappers --------------------------------------------
    def logits(self, x, detach: bool = False) -> Tensor:
        return forward(self, x, capture={"logits"}, detach=detach).logits

    def features(self, x, detach: bool = False) -> Tensor:
        return forward(self, x, capture={"penultimate"}, detach=detach).penultimate

    def embed(self, x, detach: bool = False) -> Tensor:
        return project(self, self.features(x, detach=detach), detach=detach)

    def predict(self, x: np.ndarray, batch_size: int = 500) -> np.ndarray:
        out = []
        with no_grad():
            for s in range(0, len(x), batch_size):
                out.append(np.argmax(self.logits(x[s:s + batch_size], detach=True).data, axis=1))
        return np.concatenate(out) if out else np.zeros(0, dtype=int)

    def activations(self, x: np.ndarray, layers, batch_size: int = 500) -> dict:
        """Captured activations as flattened numpy arrays, evaluated in batches."""
        chunks: dict = {}
        with no_grad():
            for s in range(0, len(x), batch_size):
                acts = forward(self, x[s:s + batch_size], capture=set(layers), detach=True)
                for key in layers:
                    arr = acts[key].data
                    chunks.setdefault(key, []).append(arr.reshape(len(arr), -1))
        return {k: np.concatenate(v) for k, v in chunks.items()}


@dataclass
class LayerActivations:
    layers: dict[int, Tensor] = field(default_factory=dict)
    penultimate: Tensor | None = None
    logits: Tensor | None = None

    def __getitem__(self, key):
        if key == "penultimate":
            return self.penultimate
        if key == "logits":
            return self.logits
        return self.layers[key]

    def prediction(self) -> np.ndarray:
        # np.argmax keeps the lowest index among ties
        return np.argmax(self.logits.data, axis=-1)


def _parse_capture(capture, depth: int) -> set:
    if capture is None:
        return {"logits"}
    if capture == "all":
        return set(range(1, depth + 1)) | {"penultimate", "logits"}
    capture = {capture} if isinstance(capture, (int, str)) else set(capture)
    for item in capture:
        if item in ("penultimate", "logits"):
            continue
        if not isinstance(item, (int, np.integer)) or not 1 <= item <= depth:
            raise ValueError(f"capture layer {item!r} out of range 1..{depth}")
    return capture


def _params(model: Model, detach: bool) -> dict[str, Tensor]:
    if detach:
        return {k: Tensor(v.data) for k, v in model.params.items()}
    return model.params


def forward(model: Model, batch, capture=None, detach: bool = False) -> LayerActivations:
    """Run g (and h if needed) on a batch, returning the requested activations.

    ``capture`` is a subset of ``{1..L, "penultimate", "logits"}`` or ``"all"``.
    ``detach=True`` treats every parameter as a constant.
    """
    spec = model.spec
    wanted = _parse_capture(capture, spec.depth)
    x = batch if isinstance(batch, Tensor) else Tensor(batch)
    if tuple(x.shape[1:]) != spec.input_shape:
        raise ShapeError("forward", [x.shape], f"expected (batch, {', '.join(map(str, spec.input_shape))})")
    p = _params(model, detach)
    acts = LayerActivations()
    h = x
    for i, layer in enumerate(spec.extractor, 1):
        kind = layer["kind"]
        if kind == "conv":
            h = conv2d(h, p[f"g.{i}.w"], padding=layer.get("padding", "same"))
            h = h + p[f"g.{i}.b"]
        elif kind == "fc":
            h = h @ p[f"g.{i}.w"] + p[f"g.{i}.b"]
        elif kind == "relu":
            h = h.relu()
        elif kind == "pool":
            h = maxpool2(h)
        elif kind == "flatten":
            h = h.flatten()
        if i in wanted:
            acts.layers[i] = h
    if "penultimate" in wanted:
        acts.penultimate = h
    if "logits" in wanted:
        acts.logits = h @ p["h.w"] + p["h.b"]
    return acts


def project(model: Model, features: Tensor, detach: bool = False) -> Tensor:
    """Unit-norm embeddings phi(g(x)) from penultimate features."""
    d = model.spec.feature_dim
    if features.ndim != 2 or features.shape[1] != d:
        raise ShapeError("project", [features.shape], f"expected width {d}")
    p = _params(model, detach)
    hid = (features @ p["phi.1.w"] + p["phi.1.b"]).relu()
    return (hid @ p["phi.2.w"] + p["phi.2.b"]).l2_normalize()


# ---------------------------------------------------------------------------
# checkpoints: b"AFA1" | u16 version | u32 len | spec JSON | u32 count |
#   per tensor: u16 name len, name, u8 ndim, u32 dims..., u32 n, f32 values
# ---------------------------------------------------------------------------

MAGIC = b"AFA1"
VERSION = 1


class CheckpointError(Exception):
    pass


class CheckpointFormatError(CheckpointError):
    pass


class CheckpointVersionError(CheckpointError):
    pass


class CheckpointTruncatedError(CheckpointError):
    pass


class CheckpointShapeError(CheckpointError):
    pass


def canonical_json(obj) -> bytes:
    return json.dumps(obj, sort_keys=True, separators=(",", ":")).encode()


def save_checkpoint(model: Model, path) -> None:
    blob = canonical_json({"spec": model.spec.to_dict(), "seed": model.seed})
    parts = [MAGIC, struct.pack("<H", VERSION), struct.pack("<I", len(blob)), blob,
             struct.pack("<I", len(model.params))]
    for name, t in model.params.items():
        raw = name.encode()
        arr = np.ascontiguousarray(t.data, dtype="<f4")
        parts.append(struct.pack("<H", len(raw)) + raw)
        parts.append(struct.pack("<B", arr.ndim) + struct.pack(f"<{arr.ndim}I", *arr.shape))
        parts.append(struct.pack("<I", arr.size) + arr.tobytes())
    Path(path).write_bytes(b"".join(parts))


class _Reader:
    def __init__(self, buf: bytes):
        self.buf = buf
        self.pos = 0

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.buf):
            raise CheckpointTruncatedError(f"file ends at byte {len(self.buf)}, needed {self.pos + n}")
        out = self.buf[self.pos:self.pos + n]
        self.pos += n
        return out

    def unpack(self, fmt: str):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt)))


def load_checkpoint(path, expected_spec: ModelSpec | None = None) -> Model:
    r = _Reader(Path(path).read_bytes())
    if r.take(4) != MAGIC:
        raise CheckpointFormatError(f"{path}: bad magic bytes")
    (version,) = r.unpack("<H")
    if version != VERSION:
        raise CheckpointVersionError(f"{path}: version {version}, expected {VERSION}")
    (n,) = r.unpack("<I")
    meta = json.loads(r.take(n))
    spec = ModelSpec.from_dict(meta["spec"])
    if expected_spec is not None and spec != expected_spec:
        raise CheckpointShapeError(f"{path}: stored spec does not match the expected model spec")
    (count,) = r.unpack("<I")
    shapes = spec.param_shapes()
    params = {}
    for _ in range(count):
        (ln,) = r.unpack("<H")
        name = r.take(ln).decode()
        (ndim,) = r.unpack("<B")
        dims = r.unpack(f"<{ndim}I") if ndim else ()
        (size,) = r.unpack("<I")
        if int(np.prod(dims)) != size:
            raise CheckpointShapeError(f"{name}: header shape {dims} disagrees with length {size}")
        if shapes.get(name) != tuple(dims):
            raise CheckpointShapeError(f"{name}: shape {tuple(dims)} does not fit spec ({shapes.get(name)})")
        params[name] = np.frombuffer(r.take(4 * size), dtype="<f4").reshape(dims).astype(get_default_dtype())
    missing = set(shapes) - set(params)
    if missing:
        raise CheckpointShapeError(f"missing parameters {sorted(missing)}")
    if r.pos != len(r.buf):
        raise CheckpointFormatError(f"{path}: {len(r.buf) - r.pos} trailing bytes")
    return Model(spec, meta.get("seed", 0), params)
