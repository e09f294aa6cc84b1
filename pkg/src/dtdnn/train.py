"""Toy warped-sequence task, time warping, loss, Adam and the experiment loop.

The toy task stands in for speech: a sequence is a run of class segments of
random duration, each frame is the class embedding plus Gaussian noise, and
labels are emitted at the network's output rate.  Robustness is measured by
warping only the test features along time while the labels stay put.
"""

from __future__ import annotations

import configparser
import csv
import dataclasses
import io
import json
import math
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .core import UsageError, as_features, linear_sample, make_rng
from .layers import ClipMode
from .network import ConfigError, Network, NetworkConfig, build_network, parse_config_text


class TrainingError(RuntimeError):
    pass


# -- task --------------------------------------------------------------------

@dataclass(frozen=True)
class TaskSpec:
    num_classes: int = 6
    d_min: int = 6
    d_max: int = 24
    length: int = 120
    noise: float = 1.0
    embed_dim: int = 16
    embed_seed: int = 0
    label_delay: int = 0

    def validate(self) -> None:
        if self.num_classes < 1:
            raise UsageError("num_classes must be >= 1")
        if not 1 <= self.d_min <= self.d_max:
            raise UsageError(f"need 1 <= d_min <= d_max, got d_min={self.d_min}, d_max={self.d_max}")
        if self.length < self.d_min:
            raise UsageError(f"sequence length {self.length} is shorter than d_min={self.d_min}")
        if self.noise < 0:
            raise UsageError("noise must be >= 0")
        if self.embed_dim < 1:
            raise UsageError("embed_dim must be >= 1")
        if self.label_delay < 0:
            raise UsageError(f"label_delay must be >= 0, got {self.label_delay}")

    def embeddings(self) -> np.ndarray:
        """Fixed class-to-feature map, ``(num_classes, embed_dim)``."""
        return make_rng(self.embed_seed).normal(size=(self.num_classes, self.embed_dim))


@dataclass
class Batch:
    features: np.ndarray  # (B, C, T)
    labels: np.ndarray  # (B, T_out) int
    frame_classes: np.ndarray  # (B, T) int
    lengths: np.ndarray  # (B,)


def draw_timeline(spec: TaskSpec, rng: np.random.Generator) -> np.ndarray:
    """Per-frame class ids built from consecutive segments (adjacent classes differ)."""
    out = np.empty(spec.length, dtype=np.int64)
    t = 0
    prev = -1
    while t < spec.length:
        c = int(rng.integers(spec.num_classes))
        if spec.num_classes > 1:
            while c == prev:
                c = int(rng.integers(spec.num_classes))
        d = int(rng.integers(spec.d_min, spec.d_max + 1))
        out[t:t + d] = c
        t += d
        prev = c
    return out


def frame_labels(frame_classes: np.ndarray, stride_product: int, num_classes: int,
                 delay: int = 0) -> np.ndarray:
    """Majority class of the input frames belonging to each output frame.

    Output frame ``i`` sits on input frame ``i*s`` and owns the ``s`` frames
    starting ``(s-1)//2 + delay`` before it, clipped to the sequence (a window
    entirely before the start falls back to frame 0).  Ties go to the
    earliest frame.
    """
    T = frame_classes.shape[-1]
    S = stride_product
    T_out = -(-T // S)
    labels = np.empty(frame_classes.shape[:-1] + (T_out,), dtype=np.int64)
    for i in range(T_out):
        start = i * S - (S - 1) // 2 - delay
        win = frame_classes[..., max(start, 0):max(start + S, 1)]
        counts = (win[..., :, None] == np.arange(num_classes)).sum(axis=-2)
        best = counts.max(axis=-1, keepdims=True)
        hit = np.take_along_axis(counts, win, axis=-1) == best
        labels[..., i] = np.take_along_axis(win, hit.argmax(axis=-1)[..., None], axis=-1)[..., 0]
    return labels


def generate_batch(spec: TaskSpec, rng: np.random.Generator, batch_size: int = 1,
                   stride_product: int = 3) -> Batch:
    spec.validate()
    emb = spec.embeddings()
    classes = np.stack([draw_timeline(spec, rng) for _ in range(batch_size)])
    feats = emb[classes].transpose(0, 2, 1)  # (B, C, T)
    if spec.noise > 0:
        feats = feats + spec.noise * rng.normal(size=feats.shape)
    labels = frame_labels(classes, stride_product, spec.num_classes, spec.label_delay)
    return Batch(feats, labels, classes, np.full(batch_size, spec.length))


# -- time warp ---------------------------------------------------------------

@dataclass(frozen=True)
class WarpSpec:
    """Piecewise-linear time map fixing 0 and T-1 that moves ``anchor`` to ``anchor + shift``."""

    length: int
    anchor: float
    shift: float

    def source_positions(self) -> np.ndarray:
        T = self.length
        if self.shift == 0.0:
            return np.arange(T, dtype=np.float64)
        dest = self.anchor + self.shift
        return np.interp(np.arange(T, dtype=np.float64), [0.0, dest, T - 1.0], [0.0, self.anchor, T - 1.0])


def sample_warp(T: int, W: float, rng: np.random.Generator) -> WarpSpec:
    """Anchor uniform in ``[W, T-1-W]``, distance ``w ~ U(0, W)``, direction left or right."""
    if T < 3:
        raise UsageError(f"time warp needs T >= 3, got {T}")
    if W < 0:
        raise UsageError(f"warp parameter must be >= 0, got {W}")
    if W >= T / 2:
        raise UsageError(f"warp parameter W={W} must be below T/2={T / 2}")
    if W == 0:
        return WarpSpec(T, 0.0, 0.0)
    lo, hi = max(W, 1.0), min(T - 1.0 - W, T - 2.0)
    if hi < lo:
        lo = hi = (T - 1) / 2
    anchor = float(rng.uniform(lo, hi))
    w = float(rng.uniform(0.0, W))
    sign = 1.0 if rng.integers(2) else -1.0
    # keep the moved anchor strictly inside so the map stays invertible
    dest = min(max(anchor + sign * w, 0.5), T - 1.5)
    return WarpSpec(T, anchor, dest - anchor)


def apply_warp(x, spec: WarpSpec) -> np.ndarray:
    x = as_features(x)
    if x.shape[1] != spec.length:
        raise UsageError(f"warp built for length {spec.length}, input has {x.shape[1]} frames")
    if spec.shift == 0.0:
        return x.copy()
    vals, _ = linear_sample(x[None], spec.source_positions()[None])
    return vals[0]


def warp_timeline(frame_classes: np.ndarray, spec: WarpSpec) -> np.ndarray:
    """Nearest-frame remap of a class timeline, for consistent feature+label warping."""
    if spec.shift == 0.0:
        return frame_classes.copy()
    src = np.clip(np.rint(spec.source_positions()).astype(np.int64), 0, spec.length - 1)
    return frame_classes[..., src]


def time_warp(x, W: float, rng: np.random.Generator) -> np.ndarray:
    x = as_features(x)
    return apply_warp(x, sample_warp(x.shape[1], W, rng))


# -- loss and optimiser ------------------------------------------------------

def frame_ce_loss(logits, labels) -> tuple[float, np.ndarray]:
    """Mean softmax cross-entropy over all frames; returns ``(loss, grad_logits)``."""
    z = np.asarray(logits, dtype=np.float64)
    single = z.ndim == 2
    zb = z[None] if single else z
    lab = np.asarray(labels)
    lab = lab[None] if lab.ndim == 1 else lab
    B, K, T = zb.shape
    if lab.shape != (B, T):
        raise UsageError(f"labels have shape {lab.shape}, expected {(B, T)}")
    if lab.min() < 0 or lab.max() >= K:
        raise UsageError(f"labels must lie in [0, {K})")
    shifted = zb - zb.max(axis=1, keepdims=True)
    logp = shifted - np.log(np.exp(shifted).sum(axis=1, keepdims=True))
    picked = np.take_along_axis(logp, lab[:, None, :], axis=1)[:, 0, :]
    n = B * T
    loss = -picked.sum() / n
    grad = np.exp(logp)
    np.put_along_axis(grad, lab[:, None, :], np.take_along_axis(grad, lab[:, None, :], axis=1) - 1.0, axis=1)
    grad /= n
    return float(loss), (grad[0] if single else grad)


def frame_accuracy(logits, labels) -> float:
    z = np.asarray(logits)
    z = z[None] if z.ndim == 2 else z
    lab = np.asarray(labels)
    lab = lab[None] if lab.ndim == 1 else lab
    return float(np.mean(z.argmax(axis=1) == lab))


@dataclass
class AdamState:
    step: int = 0
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)
    counts: dict = field(default_factory=dict)  # per-group step count, for bias correction


@dataclass(frozen=True)
class AdamHyper:
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8


def optimizer_step(params: dict[str, np.ndarray], grads: dict[str, np.ndarray], state: AdamState,
                   hyper: AdamHyper = AdamHyper()) -> AdamState:
    """One in-place Adam update of ``params``.  Groups without a gradient are left alone."""
    for name, g in grads.items():
        if not np.all(np.isfinite(g)):
            raise TrainingError(f"non-finite gradient for parameter {name}")
    state.step += 1
    b1, b2 = hyper.beta1, hyper.beta2
    for name, g in grads.items():
        p = params[name]
        if g.shape != p.shape:
            raise UsageError(f"gradient for {name} has shape {g.shape}, parameter has {p.shape}")
        t = state.counts[name] = state.counts.get(name, 0) + 1
        c1 = 1.0 - b1 ** t
        c2 = 1.0 - b2 ** t
        m = state.m.setdefault(name, np.zeros_like(p))
        v = state.v.setdefault(name, np.zeros_like(p))
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * g * g
        p -= hyper.lr * (m / c1) / (np.sqrt(v / c2) + hyper.eps)
    return state


# -- experiments -------------------------------------------------------------

@dataclass
class ExperimentConfig:
    network: NetworkConfig
    task: TaskSpec = TaskSpec()
    lr: float = 1e-3
    batch_size: int = 8
    steps: int = 1000
    train_seed: int = 1
    eval_seed: int = 100_000
    eval_size: int = 32
    eval_every: int = 0
    eval_warps: tuple = (0,)
    warp_repeats: int = 10
    train_warp: float = 0.0
    # offset predictors sit out the first offset_warmup steps, then learn at lr * offset_lr_scale
    offset_warmup: int = 0
    offset_lr_scale: float = 1.0
    eval_clip_modes: tuple = ("none",)

    def validate(self) -> None:
        self.network.validate()
        self.task.validate()
        if self.task.embed_dim != self.network.input_dim:
            raise ConfigError(f"task embed_dim={self.task.embed_dim} but network input_dim={self.network.input_dim}")
        if self.task.num_classes != self.network.output_dim:
            raise ConfigError(
                f"task num_classes={self.task.num_classes} but network output_dim={self.network.output_dim}"
            )
        if self.steps < 0 or self.batch_size < 1 or self.eval_size < 1 or self.warp_repeats < 1:
            raise ConfigError("steps must be >= 0; batch_size, eval_size, warp_repeats >= 1")
        if not self.lr > 0:
            raise ConfigError(f"lr must be positive, got {self.lr}")
        if self.offset_warmup < 0 or not self.offset_lr_scale > 0:
            raise ConfigError("offset_warmup must be >= 0 and offset_lr_scale positive")
        for W in self.eval_warps:
            if not 0 <= W < self.task.length / 2:
                raise ConfigError(f"eval warp {W} outside [0, {self.task.length / 2})")
        for m in self.eval_clip_modes:
            ClipMode.parse(m)

    def to_dict(self) -> dict:
        d = dataclasses.asdict(self)
        d["eval_warps"] = list(self.eval_warps)
        d["eval_clip_modes"] = list(self.eval_clip_modes)
        return d

    def replace(self, **network_changes) -> "ExperimentConfig":
        return dataclasses.replace(self, network=dataclasses.replace(self.network, **network_changes))


_TASK_FIELDS = {f.name: f.type for f in dataclasses.fields(TaskSpec)}
_TRAIN_KEYS = {"lr": float, "batch_size": int, "steps": int, "train_seed": int, "train_warp": float,
               "offset_warmup": int, "offset_lr_scale": float}
_EVAL_KEYS = {"eval_seed": int, "eval_size": int, "eval_every": int, "warp_repeats": int,
              "warps": "floats", "clip_modes": "strs"}


def _coerce(section: str, key: str, raw: str, kind):
    try:
        if kind == "floats":
            return tuple(float(v) for v in raw.replace(",", " ").split())
        if kind == "strs":
            return tuple(v for v in raw.replace(",", " ").split())
        if kind in (int, "int"):
            return int(raw)
        if kind in (float, "float"):
            return float(raw)
    except ValueError:
        raise ConfigError(f"[{section}] {key}: cannot parse {raw!r}") from None
    return raw


def parse_experiment_text(text: str, source: str = "<string>") -> ExperimentConfig:
    """Network sections plus optional ``[task]``, ``[train]`` and ``[eval]``."""
    net = parse_config_text(text, source)
    parser = configparser.ConfigParser()
    parser.read_string(text, source=source)
    task_kw, top_kw = {}, {}
    if parser.has_section("task"):
        for key, raw in parser.items("task"):
            if key not in _TASK_FIELDS:
                raise ConfigError(f"{source}: unknown key in [task]: {key}")
            task_kw[key] = _coerce("task", key, raw, _TASK_FIELDS[key])
    for section, keys in (("train", _TRAIN_KEYS), ("eval", _EVAL_KEYS)):
        if not parser.has_section(section):
            continue
        for key, raw in parser.items(section):
            if key not in keys:
                raise ConfigError(f"{source}: unknown key in [{section}]: {key}")
            name = {"warps": "eval_warps", "clip_modes": "eval_clip_modes"}.get(key, key)
            top_kw[name] = _coerce(section, key, raw, keys[key])
    task_kw.setdefault("embed_dim", net.input_dim)
    task_kw.setdefault("num_classes", net.output_dim)
    cfg = ExperimentConfig(network=net, task=TaskSpec(**task_kw), **top_kw)
    cfg.validate()
    return cfg


def load_experiment(path) -> ExperimentConfig:
    path = Path(path)
    try:
        text = path.read_text()
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc.strerror}") from None
    return parse_experiment_text(text, str(path))


@dataclass
class TrainReport:
    config: dict
    train_loss: list = field(default_factory=list)
    evals: list = field(default_factory=list)
    aborted: str | None = None
    wall_time: float = 0.0

    def eval_rows(self, step=None, warp_W=None, clip_mode=None) -> list[dict]:
        rows = self.evals
        if step is not None:
            rows = [r for r in rows if r["step"] == step]
        if warp_W is not None:
            rows = [r for r in rows if r["warp_W"] == warp_W]
        if clip_mode is not None:
            rows = [r for r in rows if r["clip_mode"] == ClipMode.parse(clip_mode).value]
        return rows

    def final_step(self) -> int:
        return max(r["step"] for r in self.evals)

    def median_loss(self, warp_W: float, clip_mode="none", step=None) -> float:
        step = self.final_step() if step is None else step
        return float(np.median([r["loss"] for r in self.eval_rows(step, warp_W, clip_mode)]))

    def to_json(self) -> str:
        """Deterministic serialisation; wall time is left out on purpose."""
        body = {"config": self.config, "train_loss": self.train_loss, "evals": self.evals,
                "aborted": self.aborted}
        return json.dumps(body, indent=2, sort_keys=True) + "\n"

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["step", "split", "warp_W", "clip_mode", "loss", "frame_acc", "seed"])
        train_seed = self.config.get("train_seed", 0)
        train_W = self.config.get("train_warp", 0.0)
        for step, loss in enumerate(self.train_loss, start=1):
            w.writerow([step, "train", repr(float(train_W)), "-", repr(loss), "", train_seed])
        for r in self.evals:
            w.writerow([r["step"], "eval", repr(float(r["warp_W"])), r["clip_mode"], repr(r["loss"]),
                        repr(r["frame_acc"]), r["seed"]])
        return buf.getvalue()

    def write(self, out_dir) -> None:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        (out / "report.json").write_text(self.to_json())
        (out / "metrics.csv").write_text(self.to_csv())


def eval_set(cfg: ExperimentConfig) -> Batch:
    return generate_batch(cfg.task, make_rng(cfg.eval_seed), cfg.eval_size, cfg.network.stride_product)


def evaluate(net: Network, batch: Batch, W: float = 0.0, clip_mode=None, seed: int = 0) -> tuple[float, float]:
    """Loss and frame accuracy with the test features (only) warped by ``W``."""
    feats = batch.features
    if W > 0:
        rng = make_rng(seed)
        feats = np.stack([time_warp(f, W, rng) for f in feats])
    logits, _ = net.forward(feats, clip_mode=clip_mode)
    loss, _ = frame_ce_loss(logits, batch.labels)
    return loss, frame_accuracy(logits, batch.labels)


def _eval_round(net: Network, cfg: ExperimentConfig, batch: Batch, step: int) -> list[dict]:
    rows = []
    for W in cfg.eval_warps:
        for mode in cfg.eval_clip_modes:
            mode = ClipMode.parse(mode).value
            reps = 1 if W == 0 else cfg.warp_repeats
            for r in range(reps):
                seed = cfg.eval_seed + 1 + r
                loss, acc = evaluate(net, batch, W, mode, seed)
                rows.append({"step": step, "warp_W": float(W), "clip_mode": mode, "loss": loss,
                             "frame_acc": acc, "seed": seed})
    return rows


def _is_offset_param(name: str) -> bool:
    return ".offset." in name


def train_network(net: Network, cfg: ExperimentConfig, report: TrainReport) -> Network:
    """The optimisation loop; fills ``report`` in place."""
    params = net.named_params()
    state = AdamState()
    hyper = AdamHyper(lr=cfg.lr)
    offset_hyper = AdamHyper(lr=cfg.lr * cfg.offset_lr_scale)
    rng = make_rng(cfg.train_seed)
    held_out = eval_set(cfg)
    report.evals.extend(_eval_round(net, cfg, held_out, 0))
    S = cfg.network.stride_product
    for step in range(1, cfg.steps + 1):
        batch = generate_batch(cfg.task, rng, cfg.batch_size, S)
        feats, labels = batch.features, batch.labels
        if cfg.train_warp > 0:
            warped_f, warped_c = [], []
            for f, c in zip(feats, batch.frame_classes):
                ws = sample_warp(cfg.task.length, cfg.train_warp, rng)
                warped_f.append(apply_warp(f, ws))
                warped_c.append(warp_timeline(c, ws))
            feats = np.stack(warped_f)
            labels = frame_labels(np.stack(warped_c), S, cfg.task.num_classes, cfg.task.label_delay)
        try:
            with np.errstate(over="ignore", invalid="ignore"):
                logits, cache = net.forward_cached(feats)
                loss, grad = frame_ce_loss(logits, labels)
        except UsageError as exc:
            # inputs were validated up front, so this is diverged offsets
            report.aborted = f"forward pass failed at step {step}: {exc}"
            break
        if not math.isfinite(loss):
            report.aborted = f"non-finite loss at step {step}"
            break
        report.train_loss.append(loss)
        grads = net.backward(cache, grad)
        offset_grads = {k: grads.pop(k) for k in list(grads) if _is_offset_param(k)}
        optimizer_step(params, grads, state, hyper)
        if step > cfg.offset_warmup and offset_grads:
            optimizer_step(params, offset_grads, state, offset_hyper)
        bad = next((name for name, arr in params.items() if not np.all(np.isfinite(arr))), None)
        if bad is not None:
            report.aborted = f"parameter {bad} became non-finite at step {step}"
            break
        if step == cfg.steps or (cfg.eval_every and step % cfg.eval_every == 0):
            report.evals.extend(_eval_round(net, cfg, held_out, step))
    return net


def train_run(cfg: ExperimentConfig, return_network: bool = False):
    """Build, train and evaluate one network.  Pure function of ``cfg``."""
    cfg.validate()
    start = time.perf_counter()
    net = build_network(cfg.network)
    report = TrainReport(cfg.to_dict())
    try:
        train_network(net, cfg, report)
    except TrainingError as exc:
        report.aborted = str(exc)
    report.wall_time = time.perf_counter() - start
    return (report, net) if return_network else report


# -- paired comparison --------------------------------------------------------

COMPARE_ARMS = {
    "standard": {"deformable_last_k": 0, "clip_mode": None},
    "deformable": {"deformable_last_k": 2, "clip_mode": "none"},
    "deformable_lc": {"deformable_last_k": 2, "clip_mode": "latency_controlled"},
}


def _rel(a: float, b: float) -> float:
    return (a - b) / b


def compare_run(cfg: ExperimentConfig, deformable_k: int = 2) -> dict:
    """Standard vs deformable-last-k vs latency-controlled deformable, same seeds and data.

    Every arm is evaluated with and without test-time clipping, clean and
    under each warp setting.  Returns per-arm reports plus a summary of the
    warp-robustness and latency-control comparisons.
    """
    cfg = dataclasses.replace(cfg, eval_clip_modes=("none", "latency_controlled"))
    reports = {}
    for arm, changes in COMPARE_ARMS.items():
        changes = dict(changes)
        if changes["deformable_last_k"]:
            changes["deformable_last_k"] = deformable_k
        reports[arm] = train_run(cfg.replace(**changes))
    W_max = max(cfg.eval_warps)
    std, dfm, lc = reports["standard"], reports["deformable"], reports["deformable_lc"]
    by_warp = {}
    for W in cfg.eval_warps:
        s = std.median_loss(W, "none")
        d = dfm.median_loss(W, "none")
        by_warp[repr(float(W))] = {"standard": s, "deformable": d, "relative_gap": _rel(d, s)}
    free = dfm.median_loss(0.0, "none")
    summary = {
        "warp": by_warp,
        "largest_warp": float(W_max),
        "latency": {
            "free_train_free_test": free,
            "free_train_clip_test": dfm.median_loss(0.0, "latency_controlled"),
            "clip_train_clip_test": lc.median_loss(0.0, "latency_controlled"),
        },
        "initial_losses_equal": std.median_loss(0.0, "none", step=0) == dfm.median_loss(0.0, "none", step=0),
    }
    lat = summary["latency"]
    lat["rel_free_train_clip_test"] = _rel(lat["free_train_clip_test"], free)
    lat["rel_clip_train_clip_test"] = _rel(lat["clip_train_clip_test"], free)
    return {"summary": summary, "reports": reports}
