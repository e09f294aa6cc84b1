"""Receptive-field maps, lookahead audit, offset histograms and a gradient oracle."""

from __future__ import annotations

import csv
import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable

import numpy as np

from .core import UsageError, make_rng
from .layers import ClipMode
from .network import Network

JACOBIAN_THRESHOLD = 1e-12
PERTURB_THRESHOLD = 1e-9
# nominal jitter size = ratio of the two thresholds, so both routes mark the
# same pairs.  A jitter that large would cross ReLU kinks, so the response is
# measured with a small step along the same direction and scaled up.
PERTURB_SCALE = PERTURB_THRESHOLD / JACOBIAN_THRESHOLD
PERTURB_STEP = 1e-4


class OracleError(RuntimeError):
    pass


@dataclass
class DependencyMap:
    bits: np.ndarray  # (T_out, T_in) bool

    @property
    def rows(self) -> int:
        return self.bits.shape[0]

    @property
    def cols(self) -> int:
        return self.bits.shape[1]

    def envelope(self) -> tuple[np.ndarray, np.ndarray]:
        """Per-row min/max dependent input index (-1 for empty rows)."""
        any_dep = self.bits.any(axis=1)
        lo = np.where(any_dep, self.bits.argmax(axis=1), -1)
        hi = np.where(any_dep, self.cols - 1 - self.bits[:, ::-1].argmax(axis=1), -1)
        return lo, hi

    def is_monotone(self) -> bool:
        lo, hi = self.envelope()
        keep = lo >= 0
        return bool(np.all(np.diff(lo[keep]) >= 0) and np.all(np.diff(hi[keep]) >= 0))

    def write_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(range(self.cols))
            for row in self.bits:
                w.writerow(row.astype(int).tolist())

    @classmethod
    def read_csv(cls, path) -> "DependencyMap":
        with open(path, newline="") as fh:
            rows = list(csv.reader(fh))
        return cls(np.array([[int(v) for v in r] for r in rows[1:]], dtype=bool))


def probe_input(net: Network, T: int, seed: int = 0) -> np.ndarray:
    return make_rng(seed).normal(size=(net.config.input_dim, T))


def _batched(total: int, chunk: int):
    for start in range(0, total, chunk):
        yield start, min(total, start + chunk)


def _jacobian_map(net: Network, x: np.ndarray, probes: int | None, seed: int, chunk: int) -> np.ndarray:
    K = net.config.output_dim
    T = x.shape[1]
    T_out = net.out_length(T)
    if probes is None:
        dirs = np.eye(K)
    else:
        dirs = make_rng(seed + 1).normal(size=(probes, K))
    jobs = [(i, d) for i in range(T_out) for d in range(len(dirs))]
    bits = np.zeros((T_out, T), dtype=bool)
    for a, b in _batched(len(jobs), chunk):
        batch = jobs[a:b]
        xb = np.broadcast_to(x, (len(batch),) + x.shape).copy()
        _, cache = net.forward_cached(xb)
        gl = np.zeros((len(batch), K, T_out))
        for m, (i, d) in enumerate(batch):
            gl[m, :, i] = dirs[d]
        _, gx = net.backward(cache, gl, return_input_grad=True)
        hit = np.abs(gx).max(axis=1) > JACOBIAN_THRESHOLD  # (M, T)
        for m, (i, _) in enumerate(batch):
            bits[i] |= hit[m]
    return bits


def _perturb_map(net: Network, x: np.ndarray, seed: int, chunk: int, scale: float) -> np.ndarray:
    C, T = x.shape
    jitter = PERTURB_STEP * make_rng(seed + 2).normal(size=(T, C))
    bits = np.zeros((net.out_length(T), T), dtype=bool)
    for a, b in _batched(T, chunk):
        # row 0 stays unperturbed; sharing the batch keeps independent logits bit-equal
        xb = np.broadcast_to(x, (b - a + 1, C, T)).copy()
        for m, j in enumerate(range(a, b), start=1):
            xb[m, :, j] += jitter[j]
        out, _ = net.forward(xb)
        change = np.abs(out[1:] - out[:1]).max(axis=1) * (scale / PERTURB_STEP)  # (M, T_out)
        bits[:, a:b] = (change > PERTURB_THRESHOLD).T
    return bits


def dependency_map(net: Network, T: int, mode: str = "jacobian", x=None, seed: int = 0,
                   probes: int | None = None, chunk: int = 64,
                   perturb_scale: float = PERTURB_SCALE) -> DependencyMap:
    """Which input frames each output frame depends on, at probe input ``x``.

    ``jacobian`` backpropagates from every output frame and thresholds the
    input gradient.  By default every output channel is probed separately;
    ``probes=n`` uses ``n`` random channel mixtures per frame instead, which
    is cheaper for wide heads.  ``perturb`` jitters one input frame at a time
    and watches which logits move.  Offsets are whatever the network
    predicts for the probe input.
    """
    if T < 1:
        raise UsageError(f"probe length must be >= 1, got {T}")
    if x is None:
        x = probe_input(net, T, seed)
    x = np.asarray(x, dtype=np.float64)
    if x.shape != (net.config.input_dim, T):
        raise UsageError(f"probe input has shape {x.shape}, expected {(net.config.input_dim, T)}")
    if mode == "jacobian":
        bits = _jacobian_map(net, x, probes, seed, chunk)
    elif mode == "perturb":
        bits = _perturb_map(net, x, seed, chunk, perturb_scale)
    else:
        raise UsageError(f"unknown dependency mode {mode!r}")
    return DependencyMap(bits)


@dataclass
class Lookahead:
    per_output: np.ndarray
    max: int


def lookahead(dmap: DependencyMap, stride_product: int) -> Lookahead:
    """Future extent in input frames: ``max(j) - i * stride_product`` per output row, floored at 0."""
    _, hi = dmap.envelope()
    centers = np.arange(dmap.rows) * stride_product
    ext = np.where(hi >= 0, np.maximum(hi - centers, 0), 0)
    return Lookahead(ext, int(ext.max()) if ext.size else 0)


@dataclass
class OffsetHistogram:
    bin_edges: np.ndarray
    counts: np.ndarray
    total: int
    fraction_nonpositive: float


def histogram_of(values: np.ndarray, bin_width: float = 0.25) -> OffsetHistogram:
    values = np.asarray(values, dtype=np.float64).ravel()
    if values.size == 0:
        raise UsageError("no offsets to histogram")
    lo = np.floor(values.min() / bin_width) * bin_width
    nbins = int(np.floor((values.max() - lo) / bin_width)) + 1
    edges = lo + bin_width * np.arange(nbins + 1)
    idx = np.clip(np.floor((values - lo) / bin_width).astype(np.int64), 0, nbins - 1)
    counts = np.bincount(idx, minlength=nbins)
    return OffsetHistogram(edges, counts, int(values.size), float(np.mean(values <= 0.0)))


def offset_histogram(net: Network, batches, bin_width: float = 0.25, clip_mode=None) -> dict[int, OffsetHistogram]:
    """Histogram the offsets each deformable layer actually uses over ``batches``.

    ``batches`` is an iterable of inputs shaped ``(C, T)`` or ``(B, C, T)``.
    Keys are 1-based layer indices.
    """
    if not net.deformable_indices:
        raise UsageError("network has no deformable layers")
    collected: dict[int, list] = {i + 1: [] for i in net.deformable_indices}
    for x in batches:
        _, offsets = net.forward(x, capture=True, clip_mode=clip_mode)
        for k, f in offsets.items():
            collected[k].append(np.ravel(f))
    return {k: histogram_of(np.concatenate(v), bin_width) for k, v in collected.items()}


def write_histograms_csv(hists: dict[int, OffsetHistogram], path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["bin_lo", "bin_hi", "count", "layer_index"])
        for layer, h in sorted(hists.items()):
            for lo, hi, c in zip(h.bin_edges[:-1], h.bin_edges[1:], h.counts):
                w.writerow([repr(float(lo)), repr(float(hi)), int(c), layer])


@dataclass
class GradCheckReport:
    errors: dict[str, float]
    eps: float
    tol: float
    failed: list[str] = field(default_factory=list)

    @property
    def passed(self) -> bool:
        return not self.failed

    def to_dict(self) -> dict:
        return {"eps": self.eps, "tol": self.tol, "passed": self.passed,
                "failed": self.failed, "errors": self.errors}

    def merge(self, other: "GradCheckReport", prefix: str) -> None:
        for k, v in other.errors.items():
            self.errors[f"{prefix}{k}"] = v
        self.failed.extend(f"{prefix}{k}" for k in other.failed)


def rel_error(a, n) -> np.ndarray:
    a = np.asarray(a, dtype=np.float64)
    n = np.asarray(n, dtype=np.float64)
    return np.abs(a - n) / np.maximum(np.maximum(np.abs(a), np.abs(n)), 1e-12)


def grad_check(closure: Callable[[], tuple[float, dict]], params: dict[str, np.ndarray],
               eps: float = 1e-5, tol: float = 1e-4, max_coords: int = 64,
               directions: int = 20, seed: int = 0) -> GradCheckReport:
    """Compare analytic gradients against central finite differences.

    ``closure()`` evaluates the scalar at the current contents of ``params``
    (arrays are perturbed in place and restored) and returns ``(value,
    grads)``.  Groups with at most ``max_coords`` entries are checked
    coordinate by coordinate; larger ones along ``directions`` random unit
    directions.  Groups in ``params`` missing from ``grads`` are treated as
    zero gradient.
    """
    if directions < 20:
        raise UsageError("use at least 20 random directions")
    value, grads = closure()
    again, _ = closure()
    if value != again:
        raise OracleError(f"closure is not deterministic: {value!r} then {again!r}")
    rng = make_rng(seed)
    report = GradCheckReport({}, eps, tol)

    def fd(arr: np.ndarray, direction: np.ndarray) -> float:
        orig = arr.copy()
        arr += eps * direction
        up = closure()[0]
        arr[...] = orig - eps * direction
        down = closure()[0]
        arr[...] = orig
        return (up - down) / (2 * eps)

    for name, arr in params.items():
        g = np.asarray(grads.get(name, np.zeros_like(arr)))
        if g.shape != arr.shape:
            raise OracleError(f"gradient for {name} has shape {g.shape}, parameter has {arr.shape}")
        errs = []
        if arr.size <= max_coords:
            for idx in np.ndindex(arr.shape):
                e = np.zeros_like(arr)
                e[idx] = 1.0
                errs.append(rel_error(g[idx], fd(arr, e)))
        else:
            for _ in range(directions):
                v = rng.normal(size=arr.shape)
                v /= np.linalg.norm(v)
                errs.append(rel_error(np.sum(g * v), fd(arr, v)))
        worst = float(np.max(errs))
        report.errors[name] = worst
        if not worst <= tol:
            report.failed.append(name)
    return report


def write_json(obj, path) -> None:
    Path(path).write_text(json.dumps(obj, indent=2, sort_keys=True) + "\n")


# -- the full oracle suite -----------------------------------------------------

MIN_INTEGER_GAP = 0.01


def _frac_gap(pos, live=None) -> float:
    """Distance of the closest sampling position to an integer.

    ``live`` masks the positions that gradients flow through; clipped taps
    sit exactly on integers and are skipped.
    """
    pos = np.asarray(pos, dtype=np.float64)
    if live is not None:
        pos = pos[np.broadcast_to(live, pos.shape)]
        if pos.size == 0:
            return 0.5
    frac = pos - np.floor(pos)
    return float(np.min(np.minimum(frac, 1.0 - frac)))


def _interior_offsets(rng, shape) -> np.ndarray:
    # integer part in [-2, 2], fractional part in [0.1, 0.9]
    return rng.integers(-2, 3, size=shape) + rng.uniform(0.1, 0.9, size=shape)


def _network_is_smooth(net: Network, x: np.ndarray) -> bool:
    """True when no ReLU, clip or sampling kink lies near the evaluation point."""
    _, cache = net.forward_cached(x)
    for layer, z, lc in zip(net.layers, cache.pre_acts, cache.layer_caches):
        if np.min(np.abs(z)) < 1e-3:
            return False
        if "f" in lc:
            if np.min(np.abs(lc["raw"])) < MIN_INTEGER_GAP:
                return False
            T = lc["x"].shape[-1]
            pos = layer.grid.centers(T)[None, None, :] + layer.grid.taps[None, :, None] + lc["f"]
            live = lc["raw"] <= 0 if lc["mode"] is ClipMode.LATENCY else None
            if _frac_gap(pos, live) < MIN_INTEGER_GAP:
                return False
    return True


def gradcheck_suite(net_cfg, T: int = 15, seed: int = 0, eps: float = 1e-5,
                    tol: float = 1e-4) -> GradCheckReport:
    """Finite-difference check of every backward pass in the library.

    Covers interpolation, standard and deformable convolution (including
    offsets), clipping, the offset predictor, the frame loss and a whole
    network built from ``net_cfg`` whose predictors are given random
    weights.  Sampling positions are kept at least 0.01 from integers.
    """
    import dataclasses

    from .core import linear_sample, linear_sample_dpos, linear_sample_dx
    from .layers import (ConvParams, DeformableTDNNLayer, GridSpec, OffsetPredictor,
                         clip_offsets, clip_offsets_backward, deformable_backward, deformable_forward,
                         tdnn_backward, tdnn_forward)
    from .network import build_network
    from .train import frame_ce_loss

    rng = make_rng(seed)
    report = GradCheckReport({}, eps, tol)

    def check(prefix, closure, params):
        report.merge(grad_check(closure, params, eps, tol, seed=seed), prefix)

    # interpolation
    x = rng.normal(size=(1, 2, 9))
    pos = (rng.uniform(-1.5, 9.5, size=(1, 12)))
    pos = np.floor(pos) + rng.uniform(0.1, 0.9, size=pos.shape)
    gv = rng.normal(size=(1, 2, 12))
    p = {"x": x, "pos": pos}

    def interp():
        vals, co = linear_sample(p["x"], p["pos"])
        return float(np.sum(gv * vals)), {"x": linear_sample_dx(p["x"].shape, co, gv),
                                          "pos": linear_sample_dpos(p["x"], co, gv)}
    check("interp.", interp, p)

    # standard convolution
    g = GridSpec(3, 2, 2)
    cp = ConvParams(rng.normal(size=(3, 2, 3)), rng.normal(size=3))
    xs = rng.normal(size=(2, 11))
    gy = rng.normal(size=(3, g.out_length(11)))
    p = {"x": xs, "weight": cp.weight, "bias": cp.bias}

    def conv():
        gx, gp = tdnn_backward(p["x"], cp, g, gy)
        return float(np.sum(gy * tdnn_forward(p["x"], cp, g))), {"x": gx, "weight": gp.weight, "bias": gp.bias}
    check("tdnn.", conv, p)

    # deformable convolution with explicit offsets
    g = GridSpec(3, 2, 1)
    cp = ConvParams(rng.normal(size=(3, 2, 3)), rng.normal(size=3))
    xs = rng.normal(size=(2, 11))
    f = _interior_offsets(rng, (3, 11))
    gy = rng.normal(size=(3, 11))
    p = {"x": xs, "weight": cp.weight, "bias": cp.bias, "offsets": f}

    def deform():
        gx, gp, gf = deformable_backward(p["x"], cp, g, p["offsets"], gy)
        val = float(np.sum(gy * deformable_forward(p["x"], cp, g, p["offsets"])))
        return val, {"x": gx, "weight": gp.weight, "bias": gp.bias, "offsets": gf}
    check("deform.", deform, p)

    # latency clip
    raw = rng.uniform(0.05, 2.0, size=(3, 8)) * rng.choice([-1.0, 1.0], size=(3, 8))
    gc = rng.normal(size=raw.shape)
    p = {"offsets": raw}

    def clip():
        out = clip_offsets(p["offsets"], ClipMode.LATENCY)
        return float(np.sum(gc * out)), {"offsets": clip_offsets_backward(p["offsets"], gc, ClipMode.LATENCY)}
    check("clip.", clip, p)

    # offset predictor inside a deformable layer (with and without clipping)
    for mode in (ClipMode.NONE, ClipMode.LATENCY):
        g = GridSpec(3, 2, 3)
        for attempt in range(100):
            layer = DeformableTDNNLayer(
                ConvParams(rng.normal(size=(2, 3, 3)), rng.normal(size=2)), g,
                OffsetPredictor(ConvParams(rng.normal(scale=0.5, size=(3, 3, 5)), rng.normal(size=3)), 5),
                mode,
            )
            xs = rng.normal(size=(3, 15))
            _, cache = layer.forward(xs)
            pos = g.centers(15)[None, None, :] + g.taps[None, :, None] + cache["f"]
            live = cache["raw"] <= 0 if mode is ClipMode.LATENCY else None
            if _frac_gap(pos, live) >= MIN_INTEGER_GAP and np.min(np.abs(cache["raw"])) >= MIN_INTEGER_GAP:
                break
        else:
            raise OracleError("could not find a smooth evaluation point for the predictor check")
        gy = rng.normal(size=(2, g.out_length(15)))
        p = {"x": xs, **layer.named_params()}

        def pred(layer=layer, gy=gy, p=p):
            y, cache = layer.forward(p["x"])
            gx, grads = layer.backward(cache, gy)
            return float(np.sum(gy * y)), {"x": gx[0], **grads}
        check(f"predictor[{mode.value}].", pred, p)

    # frame loss
    logits = rng.normal(size=(2, 4, 6))
    labels = rng.integers(4, size=(2, 6))
    p = {"logits": logits}

    def loss():
        val, grad = frame_ce_loss(p["logits"], labels)
        return val, {"logits": grad}
    check("loss.", loss, p)

    # whole network with non-zero predictors
    net_cfg = dataclasses.replace(net_cfg, deformable_last_k=max(net_cfg.deformable_last_k, 1))
    for attempt in range(100):
        net = build_network(dataclasses.replace(net_cfg, seed=net_cfg.seed + attempt))
        for i in net.deformable_indices:
            pp = net.layers[i].predictor.params
            pp.weight[...] = rng.normal(scale=0.3, size=pp.weight.shape)
            pp.bias[...] = rng.normal(size=pp.bias.shape)
        xs = rng.normal(size=(net_cfg.input_dim, T))
        if _network_is_smooth(net, xs):
            break
    else:
        raise OracleError("could not find a smooth evaluation point for the network check")
    labels = rng.integers(net_cfg.output_dim, size=net.out_length(T))
    params = net.named_params()

    def network():
        logits, cache = net.forward_cached(xs)
        val, grad = frame_ce_loss(logits[0], labels)
        return val, net.backward(cache, grad[None])
    check("network.", network, params)
    return report
