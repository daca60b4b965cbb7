"""The dual-pathway depthwise-separable network with metadata fusion.

Data flow for one batch::

    image [B,128,128,1] -> DPN (3x3 s2 | 5x5 s2, concat) -> 6 Dw-blocks
        -> maxpool 2x2 -> f_img [B,256]
    meta  [B,2] -> concat(meta, relu(dense 2->8)) -> f_pat [B,10]
    (f_img, f_pat) -> fusion (sacc | concat | cca) -> head -> softmax

All learnable arrays live in :class:`ModelParams`, an ordered name->Tensor
registry whose order doubles as the checkpoint layout.
"""
from __future__ import annotations

import hashlib
from dataclasses import dataclass, field, asdict
from typing import NamedTuple

import numpy as np

from . import tensor as T
from .errors import ShapeMismatch
from .tensor import Rng, Tensor

FUSIONS = ("sacc", "concat", "cca")

_FUSION_ALIASES = {"simple_concat": "concat", "classical_cca": "cca"}


def normalize_fusion(name: str) -> str:
    name = _FUSION_ALIASES.get(name, name)
    if name not in FUSIONS:
        raise ValueError(f"unknown fusion {name!r}; expected one of {FUSIONS}")
    return name


@dataclass(frozen=True)
class ArchConfig:
    """Layer sizes. The defaults are the small (benchmark) variant."""

    image_size: int = 128
    dpn_filters: int = 32
    # (output channels, stride) per depthwise-separable block
    blocks: tuple = ((64, 1), (128, 2), (128, 2), (256, 2), (256, 2), (256, 2))
    trunk_dropout_after: int = 3
    pool: int = 2
    meta_in: int = 2
    meta_hidden: int = 8
    latent_dim: int = 256
    head: tuple = (128, 64)
    dropout_rates: tuple = (0.25, 0.1)
    cca_components: int | None = None

    @classmethod
    def medium(cls):
        return cls(latent_dim=512, head=(256, 128))

    @classmethod
    def tiny(cls):
        """16x16 shrunken clone used for whole-network gradient checks."""
        return cls(image_size=16, dpn_filters=4,
                   blocks=((8, 1), (16, 2), (16, 2), (16, 1), (16, 1), (16, 1)),
                   latent_dim=16, head=(8, 8))

    def to_dict(self):
        d = asdict(self)
        d["blocks"] = [list(b) for b in self.blocks]
        d["head"] = list(self.head)
        d["dropout_rates"] = list(self.dropout_rates)
        return d

    @classmethod
    def from_dict(cls, d):
        d = dict(d)
        d["blocks"] = tuple(tuple(b) for b in d["blocks"])
        d["head"] = tuple(d["head"])
        d["dropout_rates"] = tuple(d["dropout_rates"])
        return cls(**d)

    # derived shapes -------------------------------------------------------

    def trunk_shapes(self):
        """Spatial size and channels after the DPN and after each block."""
        size = -(-self.image_size // 2)
        chans = 2 * self.dpn_filters
        shapes = [(size, size, chans)]
        for out_ch, stride in self.blocks:
            size = -(-size // stride)
            chans = out_ch
            shapes.append((size, size, chans))
        return shapes

    @property
    def img_features(self):
        size, _, chans = self.trunk_shapes()[-1]
        if size % self.pool:
            raise ShapeMismatch(f"final trunk size {size} not divisible by pool {self.pool}")
        return (size // self.pool) ** 2 * chans

    @property
    def pat_features(self):
        return self.meta_in + self.meta_hidden

    def fused_dim(self, fusion):
        fusion = normalize_fusion(fusion)
        if fusion == "sacc":
            return self.latent_dim
        if fusion == "concat":
            return self.img_features + self.pat_features
        return 2 * self.cca_k

    @property
    def cca_k(self):
        k = min(self.img_features, self.pat_features)
        return k if self.cca_components is None else min(k, self.cca_components)


def param_shapes(arch: ArchConfig, num_classes: int, fusion: str):
    """Ordered (name, shape, fan_in) triples; ``fan_in`` None marks a bias/alpha."""
    fusion = normalize_fusion(fusion)
    f = arch.dpn_filters
    out = [
        ("dpn.conv3.w", (3, 3, 1, f), 9),
        ("dpn.conv3.b", (f,), None),
        ("dpn.conv5.w", (5, 5, 1, f), 25),
        ("dpn.conv5.b", (f,), None),
    ]
    chans = 2 * f
    for i, (out_ch, _) in enumerate(arch.blocks):
        out += [
            (f"trunk.{i}.dw", (3, 3, chans), 9),
            (f"trunk.{i}.pw", (chans, out_ch), chans),
            (f"trunk.{i}.pb", (out_ch,), None),
        ]
        chans = out_ch
    out += [
        ("meta.w", (arch.meta_in, arch.meta_hidden), arch.meta_in),
        ("meta.b", (arch.meta_hidden,), None),
    ]
    d1, d2, n = arch.img_features, arch.pat_features, arch.latent_dim
    if fusion == "sacc":
        out += [
            ("sacc.w_img", (d1, n), d1),
            ("sacc.b_img", (n,), None),
            ("sacc.w_pat", (d2, n), d2),
            ("sacc.b_pat", (n,), None),
            ("sacc.alpha_img", (n,), None),
            ("sacc.alpha_pat", (n,), None),
            ("sacc.w_fuse", (2 * n, n), 2 * n),
            ("sacc.b_fuse", (n,), None),
        ]
    width = arch.fused_dim(fusion)
    for i, units in enumerate(list(arch.head) + [num_classes]):
        out += [(f"head.{i}.w", (width, units), width), (f"head.{i}.b", (units,), None)]
        width = units
    return out


def buffer_shapes(arch: ArchConfig, fusion: str):
    """Non-trainable arrays (the fitted classical-CCA projection)."""
    if normalize_fusion(fusion) != "cca":
        return []
    d1, d2, k = arch.img_features, arch.pat_features, arch.cca_k
    return [("cca.x_mean", (d1,)), ("cca.y_mean", (d2,)),
            ("cca.x_weights", (d1, k)), ("cca.y_weights", (d2, k))]


class ModelParams:
    """Ordered registry of named parameter tensors plus model metadata."""

    def __init__(self, arch, num_classes, fusion, tensors, buffers=None, class_names=None):
        self.arch = arch
        self.num_classes = int(num_classes)
        self.fusion = normalize_fusion(fusion)
        self.tensors = dict(tensors)
        self.buffers = dict(buffers or {})
        self.class_names = list(class_names) if class_names is not None else [str(i) for i in range(num_classes)]
        expected = [name for name, _, _ in param_shapes(arch, num_classes, self.fusion)]
        if list(self.tensors) != expected:
            raise ShapeMismatch("parameter registry does not match the architecture")

    def __getitem__(self, name):
        return self.tensors[name]

    def __iter__(self):
        return iter(self.tensors)

    def __len__(self):
        return len(self.tensors)

    def items(self):
        return self.tensors.items()

    def names(self):
        return list(self.tensors)

    def trainable(self):
        return list(self.tensors.values())

    def manifest(self):
        """(name, shape) for params then buffers; the serialization order."""
        rows = [(n, list(t.shape)) for n, t in self.tensors.items()]
        rows += [(n, list(np.shape(b))) for n, b in self.buffers.items()]
        return rows

    def astype(self, dtype):
        tensors = {n: Tensor(t.data.astype(dtype), name=n) for n, t in self.tensors.items()}
        buffers = {n: np.asarray(b, dtype=dtype) for n, b in self.buffers.items()}
        return ModelParams(self.arch, self.num_classes, self.fusion, tensors, buffers, self.class_names)

    def copy(self):
        return self.astype(self.dtype)

    @property
    def dtype(self):
        return next(iter(self.tensors.values())).dtype

    def checksum(self):
        """SHA-256 over the float32 little-endian bytes of every array."""
        h = hashlib.sha256()
        for name, t in self.tensors.items():
            h.update(name.encode())
            h.update(np.ascontiguousarray(t.data, dtype="<f4").tobytes())
        for name, b in self.buffers.items():
            h.update(name.encode())
            h.update(np.ascontiguousarray(b, dtype="<f4").tobytes())
        return h.hexdigest()


def build(num_classes, fusion="sacc", rng=None, arch=None, dtype=np.float32, class_names=None, seed=257):
    """He-uniform weights (bound sqrt(6/fan_in)), zero biases, zero attention logits."""
    arch = arch or ArchConfig()
    rng = rng if rng is not None else Rng(seed)
    tensors = {}
    for name, shape, fan_in in param_shapes(arch, num_classes, fusion):
        if fan_in is None:
            data = np.zeros(shape, dtype=dtype)
        else:
            bound = np.sqrt(6.0 / fan_in)
            data = rng.uniform(shape, -bound, bound).astype(dtype)
        tensors[name] = Tensor(data, requires_grad=True, name=name)
    buffers = {}
    for name, shape in buffer_shapes(arch, fusion):
        buffers[name] = np.zeros(shape, dtype=dtype)
    if buffers:
        # identity-like projection until the first CCA fit
        k = arch.cca_k
        buffers["cca.x_weights"][:k, :k] = np.eye(k, dtype=dtype)
        buffers["cca.y_weights"][:k, :k] = np.eye(k, dtype=dtype)
    return ModelParams(arch, num_classes, fusion, tensors, buffers, class_names)


# ----------------------------------------------------------------------------
# forward pieces

def _check_image(image, arch):
    s = arch.image_size
    shape = image.shape[-3:]
    if shape != (s, s, 1) or image.ndim not in (3, 4):
        raise ShapeMismatch(f"expected image [..., {s}, {s}, 1], got {image.shape}")


def dpn_branches(image, params):
    """Post-ReLU outputs of the 3x3 and 5x5 pathways."""
    image = T.as_tensor(image)
    _check_image(image, params.arch)
    a = T.relu(T.conv2d(image, params["dpn.conv3.w"], params["dpn.conv3.b"], stride=2, padding="same"))
    b = T.relu(T.conv2d(image, params["dpn.conv5.w"], params["dpn.conv5.b"], stride=2, padding="same"))
    return a, b


def dpn_forward(image, params):
    a, b = dpn_branches(image, params)
    return T.concat(a, b, axis=-1)


def dw_block(x, params, i, stride):
    x = T.depthwise_conv2d(x, params[f"trunk.{i}.dw"], stride=stride, padding="same")
    x = T.pointwise_conv(x, params[f"trunk.{i}.pw"], params[f"trunk.{i}.pb"])
    return T.relu(x)


def ecg_trunk_forward(image, params, training=False, rng=None, trace=None):
    """Image -> f_img. ``trace``, if a list, collects every intermediate map."""
    arch = params.arch
    x = dpn_forward(image, params)
    if trace is not None:
        trace.append(x)
    for i, (_, stride) in enumerate(arch.blocks):
        x = dw_block(x, params, i, stride)
        if trace is not None:
            trace.append(x)
        if i + 1 == arch.trunk_dropout_after:
            x = T.dropout(x, arch.dropout_rates[0], rng, training)
    x = T.maxpool2d(x, arch.pool)
    return T.flatten(x, batched=x.ndim == 4)


def meta_forward(meta_vector, params):
    meta = T.as_tensor(meta_vector)
    if meta.shape[-1] != params.arch.meta_in or meta.ndim not in (1, 2):
        raise ShapeMismatch(f"meta vector must be [..., {params.arch.meta_in}], got {meta.shape}")
    hidden = T.relu(T.dense(meta, params["meta.w"], params["meta.b"]))
    return T.concat(meta, hidden, axis=-1)


class SaccTrace(NamedTuple):
    output: Tensor
    attn_img: Tensor
    attn_pat: Tensor
    z_img: Tensor
    z_pat: Tensor


def sacc_forward(f_img, f_pat, params, return_trace=False):
    """Project both modalities, cross-modulate with softmax attention, fuse.

    The image projection is scaled by the patient attention vector and the
    patient projection by the image attention vector; both scalings use the
    unmodulated projections.
    """
    f_img, f_pat = T.as_tensor(f_img), T.as_tensor(f_pat)
    arch = params.arch
    if f_img.shape[-1] != arch.img_features or f_pat.shape[-1] != arch.pat_features:
        raise ShapeMismatch(f"SACC expects ({arch.img_features}, {arch.pat_features}) features, "
                            f"got {f_img.shape} and {f_pat.shape}")
    z_img = T.relu(T.dense(f_img, params["sacc.w_img"], params["sacc.b_img"]))
    z_pat = T.relu(T.dense(f_pat, params["sacc.w_pat"], params["sacc.b_pat"]))
    a_img = T.softmax(params["sacc.alpha_img"])
    a_pat = T.softmax(params["sacc.alpha_pat"])
    m_img = T.hadamard(z_img, a_pat)
    m_pat = T.hadamard(z_pat, a_img)
    out = T.relu(T.dense(T.concat(m_img, m_pat, axis=-1), params["sacc.w_fuse"], params["sacc.b_fuse"]))
    if return_trace:
        return SaccTrace(out, a_img, a_pat, z_img, z_pat)
    return out


def fuse_concat(f_img, f_pat):
    return T.concat(T.as_tensor(f_img), T.as_tensor(f_pat), axis=-1)


def fuse_cca(f_img, f_pat, params):
    """Concatenated canonical variates under the stored (fixed) projection."""
    b = params.buffers
    dt = T.as_tensor(f_img).dtype
    wx, wy = np.asarray(b["cca.x_weights"], dt), np.asarray(b["cca.y_weights"], dt)
    u = T.dense(f_img, Tensor(wx), Tensor(-np.asarray(b["cca.x_mean"], dt) @ wx))
    v = T.dense(f_pat, Tensor(wy), Tensor(-np.asarray(b["cca.y_mean"], dt) @ wy))
    return T.concat(u, v, axis=-1)


def head_logits(fused, params, training=False, rng=None):
    x = T.as_tensor(fused)
    n_layers = len(params.arch.head) + 1
    if x.shape[-1] != params[f"head.0.w"].shape[0]:
        raise ShapeMismatch(f"head expects {params['head.0.w'].shape[0]} features, got {x.shape}")
    for i in range(n_layers - 1):
        x = T.relu(T.dense(x, params[f"head.{i}.w"], params[f"head.{i}.b"]))
    x = T.dropout(x, params.arch.dropout_rates[1], rng, training)
    last = n_layers - 1
    return T.dense(x, params[f"head.{last}.w"], params[f"head.{last}.b"])


def classify(fused, params, training=False, rng=None):
    return T.softmax(head_logits(fused, params, training, rng))


@dataclass
class Outputs:
    probabilities: Tensor
    logits: Tensor
    f_img: Tensor
    f_pat: Tensor
    fused: Tensor
    extras: dict = field(default_factory=dict)

    def __iter__(self):
        # unpacks as (probabilities, f_img, fused)
        return iter((self.probabilities, self.f_img, self.fused))


def fuse(f_img, f_pat, params):
    if params.fusion == "sacc":
        return sacc_forward(f_img, f_pat, params)
    if params.fusion == "concat":
        return fuse_concat(f_img, f_pat)
    return fuse_cca(f_img, f_pat, params)


def forward(image, meta_vector, params, training=False, rng=None):
    f_img = ecg_trunk_forward(image, params, training, rng)
    f_pat = meta_forward(meta_vector, params)
    fused = fuse(f_img, f_pat, params)
    logits = head_logits(fused, params, training, rng)
    return Outputs(T.softmax(logits), logits, f_img, f_pat, fused)


# ----------------------------------------------------------------------------
# budget audit

def count_params(params) -> int:
    """Exact number of trainable scalars (weights and biases, no buffers)."""
    tensors = params.tensors if isinstance(params, ModelParams) else params
    return int(sum(t.size for t in tensors.values()))


@dataclass
class LayerCost:
    name: str
    kind: str
    output_shape: tuple
    macs: int
    params: int


@dataclass
class FlopsReport:
    layers: list
    total_macs: int
    total_flops: int
    total_params: int

    def rows(self):
        return [(l.name, l.kind, "x".join(map(str, l.output_shape)), l.macs, 2 * l.macs, l.params)
                for l in self.layers]

    def to_dict(self):
        return {
            "layers": [
                {"name": l.name, "kind": l.kind, "output_shape": list(l.output_shape),
                 "macs": l.macs, "flops": 2 * l.macs, "params": l.params}
                for l in self.layers
            ],
            "total_macs": self.total_macs,
            "total_flops": self.total_flops,
            "total_params": self.total_params,
        }


def count_flops(params_or_arch, num_classes=None, fusion=None, image_size=None) -> FlopsReport:
    """Per-layer multiply-accumulate counts; FLOPs = 2 * MACs.

    Conv K*K*C*F*H'*W', depthwise K*K*C*H'*W', pointwise C*M*H'*W',
    dense D*M, attention modulation one multiply per latent unit and side.
    Activations, pooling, softmax and bias additions are not counted.
    """
    if isinstance(params_or_arch, ModelParams):
        arch = params_or_arch.arch
        num_classes = params_or_arch.num_classes if num_classes is None else num_classes
        fusion = params_or_arch.fusion if fusion is None else fusion
    else:
        arch = params_or_arch or ArchConfig()
    if image_size is not None and image_size != arch.image_size:
        arch = ArchConfig(**{**arch.__dict__, "image_size": image_size})
    fusion = normalize_fusion(fusion or "sacc")
    num_classes = 10 if num_classes is None else num_classes

    layers = []
    shapes = arch.trunk_shapes()
    h, w, _ = shapes[0]
    f = arch.dpn_filters
    for k, tag in ((3, "conv3"), (5, "conv5")):
        layers.append(LayerCost(f"dpn.{tag}", "conv", (h, w, f), k * k * 1 * f * h * w, k * k * f + f))
    chans = 2 * f
    for i, (out_ch, _) in enumerate(arch.blocks):
        h, w, _ = shapes[i + 1]
        layers.append(LayerCost(f"trunk.{i}.dw", "depthwise", (h, w, chans), 9 * chans * h * w, 9 * chans))
        layers.append(LayerCost(f"trunk.{i}.pw", "pointwise", (h, w, out_ch),
                                chans * out_ch * h * w, chans * out_ch + out_ch))
        chans = out_ch
    layers.append(LayerCost("meta.dense", "dense", (arch.meta_hidden,),
                            arch.meta_in * arch.meta_hidden, arch.meta_in * arch.meta_hidden + arch.meta_hidden))
    d1, d2, n = arch.img_features, arch.pat_features, arch.latent_dim
    if fusion == "sacc":
        layers.append(LayerCost("sacc.w_img", "dense", (n,), d1 * n, d1 * n + n))
        layers.append(LayerCost("sacc.w_pat", "dense", (n,), d2 * n, d2 * n + n))
        layers.append(LayerCost("sacc.attention", "modulate", (2 * n,), 2 * n, 2 * n))
        layers.append(LayerCost("sacc.w_fuse", "dense", (n,), 2 * n * n, 2 * n * n + n))
    elif fusion == "cca":
        k = arch.cca_k
        layers.append(LayerCost("cca.project", "dense", (2 * k,), (d1 + d2) * k, 0))
    width = arch.fused_dim(fusion)
    for i, units in enumerate(list(arch.head) + [num_classes]):
        layers.append(LayerCost(f"head.{i}", "dense", (units,), width * units, width * units + units))
        width = units
    total = sum(l.macs for l in layers)
    return FlopsReport(layers, total, 2 * total, sum(l.params for l in layers))


def format_budget(report: FlopsReport) -> str:
    lines = [f"{'layer':<16}{'kind':<11}{'output':>12}{'MACs':>14}{'FLOPs':>14}{'params':>10}"]
    for name, kind, shape, macs, flops, n in report.rows():
        lines.append(f"{name:<16}{kind:<11}{shape:>12}{macs:>14,}{flops:>14,}{n:>10,}")
    lines.append(f"{'total':<16}{'':<11}{'':>12}{report.total_macs:>14,}{report.total_flops:>14,}{report.total_params:>10,}")
    return "\n".join(lines)
