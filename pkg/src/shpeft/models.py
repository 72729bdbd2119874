"""Tiny ViT and MLP classifiers over a flat, role-annotated parameter space.

All weights of a model live in one contiguous flat vector (a
:class:`WeightBundle`).  Each named parameter is a reshaped view into it, so
scoring, masking and SGD updates operate on flat indices directly while the
forward pass sees ordinary matrices.
"""

from __future__ import annotations

import dataclasses
import hashlib
import json
from dataclasses import dataclass, field
from typing import Iterable

import numpy as np

from . import autodiff as ad
from .autodiff import DimensionError, Tensor

ROLES = ("bias", "norm", "attention", "mlp", "embed", "head")
FAMILIES = ("tiny-vit", "mlp")
INIT_STD = 0.02


class SpecError(ValueError):
    pass


class AlignmentError(ValueError):
    pass


@dataclass(frozen=True)
class ModelSpec:
    family: str = "tiny-vit"
    image_side: int = 16
    channels: int = 1
    features: int = 0
    patch: int = 4
    depth: int = 4
    width: int = 64
    heads: int = 4
    mlp_ratio: int = 4
    classes: int = 8
    seed: int = 0

    def validate(self) -> None:
        problems = []
        if self.family not in FAMILIES:
            problems.append(f"family must be one of {FAMILIES}, got {self.family!r}")
        counts = {"depth": self.depth, "width": self.width, "classes": self.classes}
        if self.family == "tiny-vit":
            counts.update(image_side=self.image_side, channels=self.channels, patch=self.patch,
                          heads=self.heads, mlp_ratio=self.mlp_ratio)
        else:
            counts.update(features=self.features)
        problems += [f"{k} must be >= 1, got {v}" for k, v in counts.items() if v < 1]
        if self.family == "tiny-vit" and not problems:
            if self.image_side % self.patch:
                problems.append(f"image_side {self.image_side} not divisible by patch {self.patch}")
            if self.width % self.heads:
                problems.append(f"width {self.width} not divisible by heads {self.heads}")
        if problems:
            raise SpecError("invalid ModelSpec: " + "; ".join(problems))

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "ModelSpec":
        known = {f.name for f in dataclasses.fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise SpecError(f"unknown model keys: {sorted(unknown)}")
        return cls(**d)

    @property
    def n_patches(self) -> int:
        return (self.image_side // self.patch) ** 2

    @property
    def input_dim(self) -> int:
        if self.family == "mlp":
            return self.features
        return self.channels * self.image_side**2


@dataclass(frozen=True)
class ParamEntry:
    name: str
    shape: tuple
    role: str
    offset: int

    @property
    def size(self) -> int:
        return int(np.prod(self.shape, dtype=np.int64))

    @property
    def stop(self) -> int:
        return self.offset + self.size


@dataclass(frozen=True)
class ParameterRegistry:
    entries: tuple

    @classmethod
    def from_layout(cls, layout: Iterable[tuple]) -> "ParameterRegistry":
        entries, off, seen = [], 0, set()
        for name, shape, role in layout:
            if name in seen:
                raise SpecError(f"duplicate parameter name {name!r}")
            if role not in ROLES:
                raise SpecError(f"unknown role {role!r} for {name}")
            seen.add(name)
            e = ParamEntry(name, tuple(int(s) for s in shape), role, off)
            entries.append(e)
            off = e.stop
        return cls(tuple(entries))

    @property
    def size(self) -> int:
        return self.entries[-1].stop if self.entries else 0

    @property
    def names(self) -> list[str]:
        return [e.name for e in self.entries]

    def __getitem__(self, name: str) -> ParamEntry:
        for e in self.entries:
            if e.name == name:
                return e
        raise KeyError(name)

    def __len__(self) -> int:
        return len(self.entries)

    def __iter__(self):
        return iter(self.entries)

    def role_mask(self, role: str) -> np.ndarray:
        if role not in ROLES:
            raise SpecError(f"unknown role {role!r}; expected one of {ROLES}")
        out = np.zeros(self.size, dtype=bool)
        for e in self.entries:
            if e.role == role:
                out[e.offset:e.stop] = True
        return out

    def entry_at(self, index: int) -> ParamEntry:
        offsets = [e.offset for e in self.entries]
        i = int(np.searchsorted(offsets, index, side="right")) - 1
        return self.entries[i]

    def layout(self) -> list[dict]:
        return [{"name": e.name, "shape": list(e.shape), "role": e.role} for e in self.entries]

    def check_aligned(self, other: "ParameterRegistry") -> None:
        if self.layout() != other.layout():
            raise AlignmentError("parameter registries differ (names, shapes or roles)")


def role_index(registry: ParameterRegistry, role: str) -> np.ndarray:
    """Sorted flat indices of every parameter element carrying ``role``."""
    return np.flatnonzero(registry.role_mask(role))


@dataclass
class WeightBundle:
    """A model snapshot: registry plus one flat weight vector."""

    registry: ParameterRegistry
    flat: np.ndarray
    signature: str = ""

    def __post_init__(self):
        if self.flat.ndim != 1 or self.flat.size != self.registry.size:
            raise AlignmentError(
                f"flat vector of size {self.flat.size} does not match registry size {self.registry.size}"
            )

    def view(self, name: str) -> np.ndarray:
        e = self.registry[name]
        return self.flat[e.offset:e.stop].reshape(e.shape)

    def arrays(self) -> dict[str, np.ndarray]:
        return {e.name: self.view(e.name) for e in self.registry}

    def copy(self) -> "WeightBundle":
        return WeightBundle(self.registry, self.flat.copy(), self.signature)

    @classmethod
    def from_arrays(cls, registry: ParameterRegistry, arrays: dict, dtype=np.float32,
                    signature: str = "") -> "WeightBundle":
        flat = np.empty(registry.size, dtype=dtype)
        for e in registry:
            a = np.asarray(arrays[e.name])
            if a.shape != e.shape:
                raise AlignmentError(f"{e.name}: shape {a.shape} != registry {e.shape}")
            flat[e.offset:e.stop] = a.reshape(-1)
        return cls(registry, flat, signature)

    def check_aligned(self, other: "WeightBundle") -> None:
        self.registry.check_aligned(other.registry)


def _trunc_normal(rng: np.random.Generator, shape, std: float = INIT_STD) -> np.ndarray:
    z = rng.standard_normal(shape)
    bad = np.abs(z) > 2
    while bad.any():
        z[bad] = rng.standard_normal(int(bad.sum()))
        bad = np.abs(z) > 2
    return z * std


def _init_param(rng: np.random.Generator, name: str, shape, role: str) -> np.ndarray:
    if role == "bias" or (role == "head" and name.endswith(".bias")):
        return np.zeros(shape)
    if role == "norm":
        return np.ones(shape) if name.endswith(".weight") else np.zeros(shape)
    return _trunc_normal(rng, shape)


def _backbone_layout(spec: ModelSpec) -> list[tuple]:
    layout = []
    if spec.family == "mlp":
        d_in = spec.features
        for i in range(spec.depth):
            layout += [(f"layers.{i}.weight", (d_in, spec.width), "mlp"),
                       (f"layers.{i}.bias", (spec.width,), "bias")]
            d_in = spec.width
        return layout
    w = spec.width
    hidden = w * spec.mlp_ratio
    layout += [
        ("patch_embed.weight", (spec.channels * spec.patch**2, w), "embed"),
        ("patch_embed.bias", (w,), "bias"),
        ("cls_token", (1, 1, w), "embed"),
        ("pos_embed", (1, spec.n_patches + 1, w), "embed"),
    ]
    for i in range(spec.depth):
        p = f"blocks.{i}"
        layout += [
            (f"{p}.norm1.weight", (w,), "norm"),
            (f"{p}.norm1.bias", (w,), "norm"),
            (f"{p}.attn.qkv.weight", (w, 3 * w), "attention"),
            (f"{p}.attn.qkv.bias", (3 * w,), "bias"),
            (f"{p}.attn.proj.weight", (w, w), "attention"),
            (f"{p}.attn.proj.bias", (w,), "bias"),
            (f"{p}.norm2.weight", (w,), "norm"),
            (f"{p}.norm2.bias", (w,), "norm"),
            (f"{p}.mlp.fc1.weight", (w, hidden), "mlp"),
            (f"{p}.mlp.fc1.bias", (hidden,), "bias"),
            (f"{p}.mlp.fc2.weight", (hidden, w), "mlp"),
            (f"{p}.mlp.fc2.bias", (w,), "bias"),
        ]
    layout += [("norm.weight", (w,), "norm"), ("norm.bias", (w,), "norm")]
    return layout


def _head_layout(spec: ModelSpec, head_classes: int | None) -> list[tuple]:
    if head_classes is None:
        return [("proj.weight", (spec.width, spec.classes), "mlp"),
                ("proj.bias", (spec.classes,), "bias")]
    return [("head.weight", (spec.width, head_classes), "head"),
            ("head.bias", (head_classes,), "head")]


def model_signature(spec: ModelSpec, head_classes: int | None) -> str:
    blob = json.dumps({"spec": spec.to_dict(), "head": head_classes}, sort_keys=True)
    return hashlib.sha256(blob.encode()).hexdigest()[:16]


@dataclass
class Model:
    """A classifier whose weights are ``bundle.flat``.

    ``head_classes`` is None for a freshly built model (plain linear output
    projection) and the class count once :func:`replace_head` has swapped in
    the L2-normalize + linear head.
    """

    spec: ModelSpec
    bundle: WeightBundle
    head_classes: int | None = None
    dtype: type = field(default=np.float32)

    @property
    def registry(self) -> ParameterRegistry:
        return self.bundle.registry

    @property
    def n_params(self) -> int:
        return self.registry.size

    @property
    def classes(self) -> int:
        return self.spec.classes if self.head_classes is None else self.head_classes

    def copy(self) -> "Model":
        return Model(self.spec, self.bundle.copy(), self.head_classes, self.dtype)

    def load_weights(self, bundle: WeightBundle) -> None:
        self.registry.check_aligned(bundle.registry)
        self.bundle = WeightBundle(self.registry, bundle.flat.astype(self.dtype, copy=True),
                                   self.bundle.signature)

    def parameters(self, requires_grad: bool = False) -> dict[str, Tensor]:
        """Leaf tensors viewing the flat weights (no copy)."""
        return {e.name: Tensor(self.bundle.view(e.name), requires_grad=requires_grad, name=e.name)
                for e in self.registry}

    def flat_grad(self, params: dict[str, Tensor]) -> np.ndarray:
        out = np.zeros(self.n_params, dtype=self.dtype)
        for e in self.registry:
            g = params[e.name].grad
            if g is not None:
                out[e.offset:e.stop] = g.reshape(-1)
        return out

    # -- forward ------------------------------------------------------------

    def _prepare(self, batch) -> np.ndarray:
        x = np.asarray(batch.data if isinstance(batch, Tensor) else batch)
        x = x.astype(self.dtype, copy=False)
        s = self.spec
        if s.family == "mlp":
            if x.ndim > 2:
                x = x.reshape(x.shape[0], -1)
            if x.ndim != 2 or x.shape[1] != s.features:
                raise DimensionError(f"forward: mlp expects (batch, {s.features}), got {x.shape}")
            return x
        if x.ndim == 3 and s.channels == 1:
            x = x[:, None]
        want = (s.channels, s.image_side, s.image_side)
        if x.ndim != 4 or x.shape[1:] != want:
            raise DimensionError(f"forward: tiny-vit expects (batch, {want}), got {x.shape}")
        b, c, p, g = x.shape[0], s.channels, s.patch, s.image_side // s.patch
        x = x.reshape(b, c, g, p, g, p).transpose(0, 2, 4, 1, 3, 5)
        return np.ascontiguousarray(x.reshape(b, g * g, c * p * p))

    def features(self, batch, params: dict[str, Tensor] | None = None) -> Tensor:
        """Pooled backbone features (unit-norm once the head is replaced)."""
        params = self.parameters() if params is None else params
        x = Tensor(self._prepare(batch))
        if self.spec.family == "mlp":
            h = x
            for i in range(self.spec.depth):
                h = ad.relu(ad.add(ad.matmul(h, params[f"layers.{i}.weight"]), params[f"layers.{i}.bias"]))
        else:
            h = self._vit_features(x, params)
        if self.head_classes is not None:
            h = ad.l2_normalize(h)
        return h

    def _vit_features(self, x: Tensor, params: dict[str, Tensor]) -> Tensor:
        s = self.spec
        b, n = x.shape[0], s.n_patches + 1
        w, nh = s.width, s.heads
        hd = w // nh
        tok = ad.add(ad.matmul(x, params["patch_embed.weight"]), params["patch_embed.bias"])
        cls = ad.broadcast_to(params["cls_token"], (b, 1, w))
        h = ad.add(ad.concat([cls, tok], axis=1), params["pos_embed"])
        attn_scale = 1.0 / np.sqrt(hd)
        for i in range(s.depth):
            p = f"blocks.{i}"
            y = ad.layer_norm(h, params[f"{p}.norm1.weight"], params[f"{p}.norm1.bias"])
            qkv = ad.add(ad.matmul(y, params[f"{p}.attn.qkv.weight"]), params[f"{p}.attn.qkv.bias"])
            qkv = ad.transpose(ad.reshape(qkv, (b, n, 3, nh, hd)), (2, 0, 3, 1, 4))
            q, k, v = qkv[0], qkv[1], qkv[2]
            att = ad.softmax(ad.scale(ad.matmul(q, ad.transpose(k, (0, 1, 3, 2))), attn_scale))
            o = ad.reshape(ad.transpose(ad.matmul(att, v), (0, 2, 1, 3)), (b, n, w))
            o = ad.add(ad.matmul(o, params[f"{p}.attn.proj.weight"]), params[f"{p}.attn.proj.bias"])
            h = ad.add(h, o)
            y = ad.layer_norm(h, params[f"{p}.norm2.weight"], params[f"{p}.norm2.bias"])
            y = ad.gelu(ad.add(ad.matmul(y, params[f"{p}.mlp.fc1.weight"]), params[f"{p}.mlp.fc1.bias"]))
            y = ad.add(ad.matmul(y, params[f"{p}.mlp.fc2.weight"]), params[f"{p}.mlp.fc2.bias"])
            h = ad.add(h, y)
        h = ad.layer_norm(h, params["norm.weight"], params["norm.bias"])
        return h[:, 0, :]

    def forward(self, batch, params: dict[str, Tensor] | None = None) -> Tensor:
        params = self.parameters() if params is None else params
        f = self.features(batch, params)
        name = "proj" if self.head_classes is None else "head"
        return ad.add(ad.matmul(f, params[f"{name}.weight"]), params[f"{name}.bias"])

    __call__ = forward

    def loss_and_grad(self, batch, labels) -> tuple[float, np.ndarray]:
        """Mean cross-entropy on one batch and its flat gradient."""
        params = self.parameters(requires_grad=True)
        loss = ad.cross_entropy_with_logits(self.forward(batch, params), labels)
        ad.backward_pass(loss, leaves=params.values())
        return float(loss.data), self.flat_grad(params)


def _init_bundle(rng: np.random.Generator, layout: list[tuple], dtype, signature: str) -> WeightBundle:
    registry = ParameterRegistry.from_layout(layout)
    arrays = {name: _init_param(rng, name, shape, role) for name, shape, role in layout}
    return WeightBundle.from_arrays(registry, arrays, dtype=dtype, signature=signature)


def build_model(spec: ModelSpec, dtype=np.float32) -> Model:
    """Deterministically initialise a model from ``spec.seed``."""
    spec.validate()
    layout = _backbone_layout(spec) + _head_layout(spec, None)
    rng = np.random.default_rng(spec.seed)
    bundle = _init_bundle(rng, layout, dtype, model_signature(spec, None))
    return Model(spec, bundle, None, dtype)


def replace_head(model: Model, classes: int) -> Model:
    """Swap the output projection for L2-normalize + a fresh linear head."""
    if classes < 2:
        raise SpecError(f"replace_head: classes must be >= 2, got {classes}")
    spec = model.spec
    backbone = _backbone_layout(spec)
    head = _head_layout(spec, classes)
    registry = ParameterRegistry.from_layout(backbone + head)
    rng = np.random.default_rng(spec.seed ^ classes)
    arrays = {e.name: model.bundle.view(e.name) for e in registry if e.role != "head"}
    arrays.update({name: _init_param(rng, name, shape, role) for name, shape, role in head})
    bundle = WeightBundle.from_arrays(registry, arrays, dtype=model.dtype,
                                      signature=model_signature(spec, classes))
    return Model(spec, bundle, classes, model.dtype)


def forward(model: Model, batch) -> Tensor:
    return model.forward(batch)


def backbone_mask(registry: ParameterRegistry) -> np.ndarray:
    """True for every non-head element."""
    return ~registry.role_mask("head")
