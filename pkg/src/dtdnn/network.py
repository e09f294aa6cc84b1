"""Multi-layer TDNN networks built from a declarative config, plus checkpoints.

Config files are INI-style::

    [network]
    input_dim = 120
    hidden_dim = 640
    output_dim = 72
    deformable_last_k = 2

    [layer1]
    kernel_size = 5
    dilation = 1
    stride = 1

Layer sections are numbered from 1.  ``in_channels``/``out_channels`` default
to the chained widths (``input_dim`` into layer 1, ``hidden_dim`` elsewhere).
The same file may carry ``[task]``, ``[train]`` and ``[eval]`` sections used by
:mod:`dtdnn.train`; they are ignored here.
"""

from __future__ import annotations

import configparser
import dataclasses
import hashlib
import io
import json
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .core import UsageError, as_batch, make_rng
from .layers import (
    DEFAULT_OFFSET_KERNEL,
    ClipMode,
    ConvParams,
    DeformableTDNNLayer,
    GridSpec,
    OffsetPredictor,
    TDNNLayer,
    param_count,
    tdnn_backward,
    tdnn_forward,
)

FORMAT_VERSION = 1
MAGIC = b"DTDN"

TABLE1_KERNELS = (5, 5, 5, 3, 5, 5, 5)
TABLE1_DILATIONS = (1, 2, 2, 1, 1, 1, 2)
TABLE1_STRIDES = (1, 1, 1, 3, 1, 1, 1)


# two layers (standard, then deformable with stride 3); used by `dtdnn gradcheck`
MINI_CONFIG = """\
[network]
input_dim = 3
hidden_dim = 4
output_dim = 3
deformable_last_k = 1
seed = 0

[layer1]
kernel_size = 3
dilation = 1
stride = 1

[layer2]
kernel_size = 3
dilation = 2
stride = 3
"""


class ConfigError(UsageError):
    def __init__(self, message: str, layer: int | None = None):
        self.layer = layer
        prefix = f"layer {layer}: " if layer is not None else ""
        super().__init__(prefix + message)


class CheckpointError(RuntimeError):
    pass


@dataclass
class LayerSpec:
    kernel_size: int
    dilation: int = 1
    stride: int = 1
    in_channels: int = 0
    out_channels: int = 0
    kind: str = "standard"
    clip_mode: str = "none"
    activation: str = "relu"

    @property
    def grid(self) -> GridSpec:
        return GridSpec(self.kernel_size, self.dilation, self.stride)


@dataclass
class NetworkConfig:
    layers: list[LayerSpec]
    input_dim: int
    output_dim: int
    deformable_last_k: int = 0
    seed: int = 0
    offset_kernel: int = DEFAULT_OFFSET_KERNEL
    clip_mode: str | None = None  # overrides every deformable layer when set
    max_offset: float | None = None

    def resolved_layers(self) -> list[LayerSpec]:
        """Layer specs after validation and the deformable-last-k rewrite."""
        self.validate()
        out = []
        first_deformable = len(self.layers) - self.deformable_last_k
        for idx, spec in enumerate(self.layers):
            spec = dataclasses.replace(spec)
            if idx >= first_deformable:
                spec.kind = "deformable"
            if spec.kind == "deformable" and self.clip_mode is not None:
                spec.clip_mode = self.clip_mode
            out.append(spec)
        return out

    def validate(self) -> None:
        if not self.layers:
            raise ConfigError("network needs at least one layer")
        if self.input_dim < 1 or self.output_dim < 1:
            raise ConfigError("input_dim and output_dim must be positive")
        if not 0 <= self.deformable_last_k <= len(self.layers):
            raise ConfigError(
                f"deformable_last_k={self.deformable_last_k} outside [0, {len(self.layers)}]",
                len(self.layers),
            )
        if self.offset_kernel < 1 or self.offset_kernel % 2 == 0:
            raise ConfigError(f"offset_kernel must be a positive odd integer, got {self.offset_kernel}")
        if self.max_offset is not None and not self.max_offset > 0:
            raise ConfigError(f"max_offset must be positive, got {self.max_offset}")
        if self.clip_mode is not None:
            ClipMode.parse(self.clip_mode)
        prev = self.input_dim
        for i, spec in enumerate(self.layers, start=1):
            try:
                spec.grid
            except UsageError as exc:
                raise ConfigError(str(exc), i) from None
            if spec.in_channels != prev:
                raise ConfigError(f"in_channels={spec.in_channels} does not match previous width {prev}", i)
            if spec.out_channels < 1:
                raise ConfigError(f"out_channels must be positive, got {spec.out_channels}", i)
            if spec.kind not in ("standard", "deformable"):
                raise ConfigError(f"unknown kind {spec.kind!r}", i)
            if spec.activation not in ("relu", "none"):
                raise ConfigError(f"unknown activation {spec.activation!r}", i)
            try:
                ClipMode.parse(spec.clip_mode)
            except UsageError as exc:
                raise ConfigError(str(exc), i) from None
            prev = spec.out_channels

    @property
    def stride_product(self) -> int:
        return int(np.prod([s.stride for s in self.layers]))

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "NetworkConfig":
        d = dict(d)
        d["layers"] = [LayerSpec(**layer) for layer in d["layers"]]
        return cls(**d)

    def config_hash(self) -> str:
        blob = json.dumps(self.to_dict(), sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(blob.encode()).hexdigest()[:16]


def table1_config(input_dim: int = 120, hidden_dim: int = 640, output_dim: int = 72,
                  deformable_last_k: int = 0, seed: int = 0, **kwargs) -> NetworkConfig:
    """The seven-layer baseline: kernels 5,5,5,3,5,5,5; dilations 1,2,2,1,1,1,2; stride 3 at layer 4."""
    layers = []
    prev = input_dim
    for k, d, s in zip(TABLE1_KERNELS, TABLE1_DILATIONS, TABLE1_STRIDES):
        layers.append(LayerSpec(k, d, s, prev, hidden_dim))
        prev = hidden_dim
    return NetworkConfig(layers, input_dim, output_dim, deformable_last_k, seed, **kwargs)


def _parse_value(raw: str):
    text = raw.strip()
    if text.lower() in ("none", ""):
        return None
    for conv in (int, float):
        try:
            return conv(text)
        except ValueError:
            pass
    return text


_STRING_KEYS = ("kind", "clip_mode", "activation")


def parse_config_text(text: str, source: str = "<string>") -> NetworkConfig:
    parser = configparser.ConfigParser()
    try:
        parser.read_string(text, source=source)
    except configparser.Error as exc:
        raise ConfigError(f"{source}: cannot parse config: {exc}") from None
    if not parser.has_section("network"):
        raise ConfigError(f"{source}: missing [network] section")
    net = {k: _parse_value(v) for k, v in parser.items("network")}
    known = {"input_dim", "output_dim", "hidden_dim", "deformable_last_k", "seed",
             "offset_kernel", "clip_mode", "max_offset"}
    unknown = set(net) - known
    if unknown:
        raise ConfigError(f"{source}: unknown key(s) in [network]: {', '.join(sorted(unknown))}")
    for key in ("input_dim", "output_dim"):
        if net.get(key) is None:
            raise ConfigError(f"{source}: [network] needs {key}")
    hidden = net.get("hidden_dim") or net["output_dim"]

    sections = [s for s in parser.sections() if s.startswith("layer")]
    try:
        numbered = sorted(sections, key=lambda s: int(s[len("layer"):]))
    except ValueError:
        raise ConfigError(f"{source}: layer sections must be named layer1, layer2, ...") from None
    if [int(s[len("layer"):]) for s in numbered] != list(range(1, len(numbered) + 1)):
        raise ConfigError(f"{source}: layer sections must be numbered consecutively from 1")

    layer_keys = {f.name for f in dataclasses.fields(LayerSpec)}
    layers = []
    prev = net["input_dim"]
    for i, name in enumerate(numbered, start=1):
        vals = {k: (v.strip() if k in _STRING_KEYS else _parse_value(v))
                for k, v in parser.items(name) if k not in parser.defaults()}
        bad = set(vals) - layer_keys
        if bad:
            raise ConfigError(f"unknown key(s): {', '.join(sorted(bad))}", i)
        if vals.get("kernel_size") is None:
            raise ConfigError("kernel_size is required", i)
        vals.setdefault("in_channels", prev)
        vals.setdefault("out_channels", hidden)
        for key in ("kernel_size", "dilation", "stride", "in_channels", "out_channels"):
            if key in vals and not isinstance(vals[key], int):
                raise ConfigError(f"{key} must be an integer, got {vals[key]!r}", i)
        layers.append(LayerSpec(**vals))
        prev = vals["out_channels"]

    cfg = NetworkConfig(
        layers=layers,
        input_dim=net["input_dim"],
        output_dim=net["output_dim"],
        deformable_last_k=net.get("deformable_last_k") or 0,
        seed=net.get("seed") or 0,
        offset_kernel=net.get("offset_kernel") or DEFAULT_OFFSET_KERNEL,
        clip_mode=net.get("clip_mode"),
        max_offset=net.get("max_offset"),
    )
    cfg.validate()
    return cfg


def load_config(path) -> NetworkConfig:
    path = Path(path)
    try:
        text = path.read_text()
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc.strerror}") from None
    return parse_config_text(text, str(path))


def dump_config(cfg: NetworkConfig) -> str:
    """Render ``cfg`` back to config-file text (explicit channel widths)."""
    parser = configparser.ConfigParser()
    parser["network"] = {
        "input_dim": str(cfg.input_dim),
        "output_dim": str(cfg.output_dim),
        "deformable_last_k": str(cfg.deformable_last_k),
        "seed": str(cfg.seed),
        "offset_kernel": str(cfg.offset_kernel),
        "clip_mode": str(cfg.clip_mode),
        "max_offset": str(cfg.max_offset),
    }
    for i, spec in enumerate(cfg.layers, start=1):
        parser[f"layer{i}"] = {k: str(v) for k, v in dataclasses.asdict(spec).items()}
    buf = io.StringIO()
    parser.write(buf)
    return buf.getvalue()


@dataclass
class NetworkCache:
    layer_caches: list = field(default_factory=list)
    pre_acts: list = field(default_factory=list)
    proj_input: np.ndarray | None = None
    single: bool = False


class Network:
    """Stack of TDNN / deformable TDNN layers followed by a per-frame linear projection."""

    def __init__(self, config: NetworkConfig, layers: list, specs: list[LayerSpec], proj: ConvParams):
        self.config = config
        self.layers = layers
        self.specs = specs
        self.proj = proj

    @property
    def stride_product(self) -> int:
        return self.config.stride_product

    def out_length(self, T: int) -> int:
        for spec in self.specs:
            T = spec.grid.out_length(T)
        return T

    @property
    def deformable_indices(self) -> list[int]:
        return [i for i, layer in enumerate(self.layers) if layer.kind == "deformable"]

    def named_params(self) -> dict[str, np.ndarray]:
        """Live references to every parameter array, keyed by stable names."""
        out = {}
        for i, layer in enumerate(self.layers, start=1):
            for name, arr in layer.named_params().items():
                out[f"layer{i}.{name}"] = arr
        out["proj.weight"] = self.proj.weight
        out["proj.bias"] = self.proj.bias
        return out

    def param_counts(self) -> dict:
        per_layer = [
            param_count(s.in_channels, s.out_channels, s.kernel_size, s.kind == "deformable",
                        self.config.offset_kernel)
            for s in self.specs
        ]
        proj = self.proj.size
        main = sum(c.main for c in per_layer)
        offset = sum(c.offset for c in per_layer)
        return {"main": main, "offset": offset, "proj": proj, "total": main + offset + proj,
                "per_layer": [(c.main, c.offset) for c in per_layer]}

    def forward_cached(self, x, clip_mode=None) -> tuple[np.ndarray, NetworkCache]:
        xb, single = as_batch(x)
        if xb.shape[1] != self.config.input_dim:
            raise UsageError(f"input has {xb.shape[1]} channels, network expects {self.config.input_dim}")
        cache = NetworkCache(single=single)
        h = xb
        for layer, spec in zip(self.layers, self.specs):
            z, lc = layer.forward(h, clip_mode)
            cache.layer_caches.append(lc)
            cache.pre_acts.append(z)
            h = np.maximum(z, 0.0) if spec.activation == "relu" else z
        cache.proj_input = h
        logits = tdnn_forward(h, self.proj, GridSpec(1))
        return logits, cache

    def forward(self, x, capture: bool = False, clip_mode=None):
        """Returns ``(logits, offsets)``; ``offsets`` maps layer index (1-based) to the used offsets."""
        logits, cache = self.forward_cached(x, clip_mode)
        offsets = None
        if capture:
            offsets = {
                i + 1: (lc["f"][0] if cache.single else lc["f"])
                for i, lc in enumerate(cache.layer_caches)
                if "f" in lc
            }
        return (logits[0] if cache.single else logits), offsets

    def backward(self, cache: NetworkCache, grad_logits, return_input_grad: bool = False):
        gl, _ = as_batch(grad_logits, "grad_logits")
        grads = {}
        g, gp = tdnn_backward(cache.proj_input, self.proj, GridSpec(1), gl)
        grads["proj.weight"], grads["proj.bias"] = gp.weight, gp.bias
        for i in range(len(self.layers) - 1, -1, -1):
            if self.specs[i].activation == "relu":
                g = np.where(cache.pre_acts[i] > 0.0, g, 0.0)
            g, lg = self.layers[i].backward(cache.layer_caches[i], g)
            for name, arr in lg.items():
                grads[f"layer{i + 1}.{name}"] = arr
        if return_input_grad:
            return grads, (g[0] if cache.single else g)
        return grads


def build_network(cfg: NetworkConfig) -> Network:
    """Deterministic construction from ``cfg.seed``; predictors start at zero."""
    specs = cfg.resolved_layers()
    rng = make_rng(cfg.seed)
    layers = []
    for spec in specs:
        params = ConvParams.uniform(spec.out_channels, spec.in_channels, spec.kernel_size, rng)
        if spec.kind == "deformable":
            predictor = OffsetPredictor.zeros(spec.kernel_size, spec.in_channels, cfg.offset_kernel)
            layers.append(DeformableTDNNLayer(params, spec.grid, predictor, spec.clip_mode, cfg.max_offset))
        else:
            layers.append(TDNNLayer(params, spec.grid))
    proj = ConvParams.uniform(cfg.output_dim, specs[-1].out_channels, 1, rng)
    return Network(cfg, layers, specs, proj)


# -- checkpoints -------------------------------------------------------------

_DTYPE_F64 = b"f8"


def save_checkpoint(net: Network, path) -> None:
    manifest = json.dumps({
        "version": FORMAT_VERSION,
        "seed": net.config.seed,
        "config_hash": net.config.config_hash(),
        "config": net.config.to_dict(),
    }, sort_keys=True).encode()
    buf = io.BytesIO()
    buf.write(MAGIC)
    buf.write(struct.pack("<II", FORMAT_VERSION, len(manifest)))
    buf.write(manifest)
    params = net.named_params()
    buf.write(struct.pack("<I", len(params)))
    for name, arr in params.items():
        raw_name = name.encode()
        buf.write(struct.pack("<H", len(raw_name)))
        buf.write(raw_name)
        buf.write(_DTYPE_F64)
        buf.write(struct.pack("<I", arr.ndim))
        buf.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
        buf.write(np.ascontiguousarray(arr, dtype="<f8").tobytes())
    Path(path).write_bytes(buf.getvalue())


class _Reader:
    def __init__(self, data: bytes, path):
        self.data = data
        self.path = path
        self.pos = 0

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.data):
            raise CheckpointError(f"{self.path}: corrupt checkpoint: unexpected end of file")
        out = self.data[self.pos:self.pos + n]
        self.pos += n
        return out

    def unpack(self, fmt: str):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt)))


def load_checkpoint(path, expected_config: NetworkConfig | None = None) -> Network:
    """Rebuild a network from ``path``.

    If ``expected_config`` is given, its hash must match the stored one.
    """
    try:
        data = Path(path).read_bytes()
    except OSError as exc:
        raise CheckpointError(f"cannot read checkpoint {path}: {exc.strerror}") from None
    r = _Reader(data, path)
    if r.take(4) != MAGIC:
        raise CheckpointError(f"{path}: not a checkpoint (bad magic)")
    version, mlen = r.unpack("<II")
    if version != FORMAT_VERSION:
        raise CheckpointError(f"{path}: checkpoint format version {version}, expected {FORMAT_VERSION}")
    try:
        manifest = json.loads(r.take(mlen).decode())
        cfg = NetworkConfig.from_dict(manifest["config"])
    except (ValueError, KeyError, TypeError) as exc:
        raise CheckpointError(f"{path}: corrupt manifest ({exc})") from None
    if cfg.config_hash() != manifest.get("config_hash"):
        raise CheckpointError(f"{path}: manifest config does not match its recorded hash")
    if expected_config is not None and expected_config.config_hash() != cfg.config_hash():
        raise CheckpointError(
            f"{path}: checkpoint config hash {cfg.config_hash()} does not match "
            f"expected {expected_config.config_hash()}"
        )
    net = build_network(cfg)
    params = net.named_params()
    (count,) = r.unpack("<I")
    if count != len(params):
        raise CheckpointError(f"{path}: {count} arrays stored, config implies {len(params)}")
    for _ in range(count):
        (nlen,) = r.unpack("<H")
        name = r.take(nlen).decode(errors="replace")
        tag = r.take(2)
        if tag != _DTYPE_F64:
            raise CheckpointError(f"{path}: array {name!r} has unsupported dtype tag {tag!r}")
        (ndim,) = r.unpack("<I")
        shape = r.unpack(f"<{ndim}I")
        if name not in params:
            raise CheckpointError(f"{path}: unexpected array {name!r}")
        if tuple(shape) != params[name].shape:
            raise CheckpointError(f"{path}: array {name!r} has shape {shape}, config implies {params[name].shape}")
        n = int(np.prod(shape))
        params[name][...] = np.frombuffer(r.take(8 * n), dtype="<f8").reshape(shape)
    if r.pos != len(data):
        raise CheckpointError(f"{path}: trailing bytes after last array")
    return net
