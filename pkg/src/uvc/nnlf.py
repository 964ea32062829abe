"""CNN in-loop filter: input planes, inference, training, selection and weight files.

A model maps a stack of normalised planes to a residual that is added to
the reconstruction: ``recon' = clip(recon + round(255 * residual))`` with
rounding half away from zero. Everything runs in float64 numpy with
im2col convolutions.
"""

from __future__ import annotations

import hashlib
import os
import struct
from dataclasses import dataclass, field

import numpy as np

from uvc.bitstream import COST0, COST1, COST_ONE_BIT, Contexts
from uvc.errors import InvalidArgumentError, MalformedWeightsError, TrainingDivergedError

MAGIC = b"NNLF"
VERSION = 1

CONV3, CONV1, PRELU, ADD = 0, 1, 2, 3
KIND_NAMES = {CONV3: "conv3x3", CONV1: "conv1x1", PRELU: "prelu", ADD: "add-skip"}

INTRA, INTER = 0, 1
LUMA, CHROMA = 0, 1

WIDTH = 16
RES_BLOCKS = 4
QP_NORM = 51.0
BS_NORM = 2.0


@dataclass
class Layer:
    kind: int
    in_ch: int
    out_ch: int
    weight: np.ndarray | None = None  # (out, in, k, k) for convolutions
    bias: np.ndarray | None = None
    slopes: np.ndarray | None = None  # prelu
    span: int = 0  # add-skip: sums the current activation with the one `span` layers back

    @property
    def ksize(self) -> int:
        return {CONV3: 3, CONV1: 1}.get(self.kind, 0)


@dataclass
class ModelWeights:
    layers: list[Layer]
    slice_type: int = INTRA

    def __post_init__(self):
        if not self.layers:
            raise InvalidArgumentError("a model needs at least one layer")
        for prev, cur in zip(self.layers, self.layers[1:]):
            if prev.out_ch != cur.in_ch:
                raise InvalidArgumentError("adjacent layer channel counts disagree")
        for i, layer in enumerate(self.layers):
            if layer.kind == ADD and not 1 <= layer.span <= i:
                raise InvalidArgumentError("add-skip reaches before the input")

    @property
    def in_channels(self) -> int:
        return self.layers[0].in_ch

    @property
    def out_channels(self) -> int:
        return self.layers[-1].out_ch

    @property
    def component(self) -> int:
        return LUMA if self.out_channels == 1 else CHROMA

    def params(self) -> list[np.ndarray]:
        out = []
        for layer in self.layers:
            for p in (layer.weight, layer.bias, layer.slopes):
                if p is not None:
                    out.append(p)
        return out

    def copy(self) -> ModelWeights:
        layers = [Layer(l.kind, l.in_ch, l.out_ch,
                        None if l.weight is None else l.weight.copy(),
                        None if l.bias is None else l.bias.copy(),
                        None if l.slopes is None else l.slopes.copy(), l.span) for l in self.layers]
        return ModelWeights(layers, self.slice_type)

    def rounded(self) -> ModelWeights:
        """Copy with every value rounded to float32, the precision of weight files."""
        m = self.copy()
        for p in m.params():
            p[...] = p.astype(np.float32)
        return m

    def digest(self) -> bytes:
        return hashlib.sha256(weights_to_bytes(self)).digest()


def input_channels(component: int, slice_type: int) -> int:
    base = 4 if component == LUMA else 7
    return base + (1 if slice_type == INTRA else 0)


def kind_from_channels(channels: int) -> tuple[int, int]:
    """(component, slice type) whose input stack has ``channels`` planes."""
    for comp in (LUMA, CHROMA):
        for st in (INTRA, INTER):
            if input_channels(comp, st) == channels:
                return comp, st
    raise InvalidArgumentError(f"no filter model takes {channels} input planes")


def architecture(component: int, slice_type: int, width: int = WIDTH, blocks: int = RES_BLOCKS) -> list[tuple]:
    """(kind, in, out, span) of the filter network."""
    cin = input_channels(component, slice_type)
    cout = 1 if component == LUMA else 2
    spec = [(CONV3, cin, width, 0), (PRELU, width, width, 0)]
    for _ in range(blocks):
        spec += [(CONV3, width, width, 0), (PRELU, width, width, 0), (CONV3, width, width, 0), (ADD, width, width, 3)]
    spec.append((CONV3, width, cout, 0))
    return spec


def init_model(component: int, slice_type: int, seed: int = 0, width: int = WIDTH,
               blocks: int = RES_BLOCKS, zero_last: bool = True, arch=None) -> ModelWeights:
    """He-initialised model.

    With ``zero_last`` the output convolution and the closing convolution of
    every residual branch start at zero: the untrained filter is the
    identity and early steps stay well conditioned.
    """
    rng = np.random.default_rng(seed)
    spec = arch if arch is not None else architecture(component, slice_type, width, blocks)
    layers = []
    for i, (kind, cin, cout, span) in enumerate(spec):
        if kind in (CONV3, CONV1):
            k = 3 if kind == CONV3 else 1
            std = np.sqrt(2.0 / (cin * k * k))
            w = rng.normal(0.0, std, (cout, cin, k, k))
            closes_branch = i + 1 < len(spec) and spec[i + 1][0] == ADD
            if zero_last and (i == len(spec) - 1 or closes_branch):
                w[...] = 0.0
            layers.append(Layer(kind, cin, cout, w, np.zeros(cout)))
        elif kind == PRELU:
            layers.append(Layer(PRELU, cin, cout, slopes=np.full(cout, 0.25)))
        else:
            layers.append(Layer(ADD, cin, cout, span=span))
    return ModelWeights(layers, slice_type).rounded()


# ---------------------------------------------------------------- weight files

def weights_to_bytes(model: ModelWeights) -> bytes:
    out = [MAGIC, struct.pack("<HBH", VERSION, model.slice_type, len(model.layers))]
    for layer in model.layers:
        ks = layer.span if layer.kind == ADD else layer.ksize
        out.append(struct.pack("<BHHB", layer.kind, layer.in_ch, layer.out_ch, ks))
        if layer.kind in (CONV3, CONV1):
            out.append(np.asarray(layer.weight, dtype="<f4").tobytes())
            out.append(np.asarray(layer.bias, dtype="<f4").tobytes())
        elif layer.kind == PRELU:
            out.append(np.asarray(layer.slopes, dtype="<f4").tobytes())
    return b"".join(out)


def weights_from_bytes(data: bytes) -> ModelWeights:
    if len(data) < 9 or data[:4] != MAGIC:
        raise MalformedWeightsError("not an NNLF weight file (bad magic)")
    version, slice_type, count = struct.unpack_from("<HBH", data, 4)
    if version != VERSION:
        raise MalformedWeightsError(f"unsupported weight file version {version}")
    if slice_type not in (INTRA, INTER):
        raise MalformedWeightsError(f"unknown slice type code {slice_type}")
    pos = 9

    def take(nbytes: int) -> bytes:
        nonlocal pos
        if pos + nbytes > len(data):
            raise MalformedWeightsError(f"weight file truncated at byte {len(data)}")
        chunk = data[pos:pos + nbytes]
        pos += nbytes
        return chunk

    def floats(n: int) -> np.ndarray:
        return np.frombuffer(take(4 * n), dtype="<f4").astype(np.float64)

    layers = []
    for _ in range(count):
        kind, cin, cout, ks = struct.unpack("<BHHB", take(6))
        if kind in (CONV3, CONV1):
            k = 3 if kind == CONV3 else 1
            if ks != k:
                raise MalformedWeightsError(f"{KIND_NAMES[kind]} with kernel size {ks}")
            w = floats(cout * cin * k * k).reshape(cout, cin, k, k)
            layers.append(Layer(kind, cin, cout, w, floats(cout)))
        elif kind == PRELU:
            if cin != cout:
                raise MalformedWeightsError("prelu must keep its channel count")
            layers.append(Layer(PRELU, cin, cout, slopes=floats(cout)))
        elif kind == ADD:
            if cin != cout:
                raise MalformedWeightsError("add-skip must keep its channel count")
            layers.append(Layer(ADD, cin, cout, span=ks))
        else:
            raise MalformedWeightsError(f"unknown layer kind {kind}")
    if pos != len(data):
        raise MalformedWeightsError("trailing bytes after the last layer")
    try:
        model = ModelWeights(layers, slice_type)
    except InvalidArgumentError as exc:
        raise MalformedWeightsError(str(exc)) from None
    for p in model.params():
        if not np.all(np.isfinite(p)):
            raise MalformedWeightsError("non-finite weight value")
    return model


def save_weights(model: ModelWeights, path) -> None:
    with open(os.fspath(path), "wb") as fh:
        fh.write(weights_to_bytes(model))


def load_weights(path) -> ModelWeights:
    with open(os.fspath(path), "rb") as fh:
        return weights_from_bytes(fh.read())


# ---------------------------------------------------------------- inputs

def partition_mask(trees, height: int, width: int, scale: int = 1) -> np.ndarray:
    """1 on samples next to a leaf boundary, from partition trees or leaf rects."""
    ids = np.zeros((height, width), dtype=np.int64)
    n = 0
    for tree in trees:
        for leaf in tree.leaves():
            r = leaf.rect
            n += 1
            ids[r.y // scale:(r.y + r.h) // scale, r.x // scale:(r.x + r.w) // scale] = n
    mask = np.zeros((height, width), dtype=np.float64)
    dv = ids[:, 1:] != ids[:, :-1]
    mask[:, 1:][dv] = 1
    mask[:, :-1][dv] = 1
    dh = ids[1:, :] != ids[:-1, :]
    mask[1:, :][dh] = 1
    mask[:-1, :][dh] = 1
    return mask


def _plane(p) -> np.ndarray:
    return p.data if hasattr(p, "width") else np.asarray(p)


def _same_shape(planes) -> tuple[int, int]:
    shapes = {np.shape(p) for p in planes}
    if len(shapes) != 1:
        raise InvalidArgumentError(f"input planes disagree in size: {sorted(shapes)}")
    return shapes.pop()


def build_inputs(recon, pred, bs, qp: int, partition=None, slice_type: int = INTRA) -> np.ndarray:
    """Luma input stack [recon/255, pred/255, bs/2, qp/51, (intra) partition mask]."""
    recon, pred = _plane(recon), _plane(pred)
    bs = np.asarray(bs)
    planes = [recon, pred, bs]
    if slice_type == INTRA:
        if partition is None:
            raise InvalidArgumentError("intra inputs need the partition")
        part = np.asarray(partition) if isinstance(partition, np.ndarray) else partition_mask(partition, *recon.shape)
        planes.append(part)
    h, w = _same_shape(planes)
    out = [recon / 255.0, pred / 255.0, bs / BS_NORM, np.full((h, w), qp / QP_NORM)]
    if slice_type == INTRA:
        out.append(np.asarray(planes[3], dtype=np.float64))
    return np.stack(out).astype(np.float64)


def downsample_luma(y: np.ndarray) -> np.ndarray:
    y = np.asarray(y, dtype=np.float64)
    return (y[0::2, 0::2] + y[1::2, 0::2] + y[0::2, 1::2] + y[1::2, 1::2]) / 4.0


def build_chroma_inputs(recon_u, recon_v, pred_u, pred_v, bs, qp: int, luma_recon,
                        partition=None, slice_type: int = INTRA) -> np.ndarray:
    """Chroma stack [recon U, V, pred U, V, bs/2, qp/51, (intra) mask, luma 2x2 mean]/255."""
    planes = [_plane(recon_u), _plane(recon_v), _plane(pred_u), _plane(pred_v), np.asarray(bs)]
    h, w = _same_shape(planes)
    luma = _plane(luma_recon)
    if luma.shape != (2 * h, 2 * w):
        raise InvalidArgumentError("luma plane must be twice the chroma size")
    out = [p / 255.0 for p in planes[:4]] + [planes[4] / BS_NORM, np.full((h, w), qp / QP_NORM)]
    if slice_type == INTRA:
        if partition is None:
            raise InvalidArgumentError("intra inputs need the partition")
        part = np.asarray(partition) if isinstance(partition, np.ndarray) else partition_mask(partition, h, w, 2)
        if part.shape != (h, w):
            raise InvalidArgumentError("partition mask has the wrong size")
        out.append(np.asarray(part, dtype=np.float64))
    out.append(downsample_luma(luma) / 255.0)
    return np.stack(out).astype(np.float64)


# ---------------------------------------------------------------- forward / backward

def _im2col(x: np.ndarray, k: int) -> np.ndarray:
    """(B, C, H, W) -> (C*k*k, B*H*W) with zero padding."""
    if k == 1:
        b, c, h, w = x.shape
        return x.transpose(1, 0, 2, 3).reshape(c, b * h * w)
    b, c, h, w = x.shape
    p = np.pad(x, ((0, 0), (0, 0), (1, 1), (1, 1)))
    cols = np.empty((c, 3, 3, b, h, w))
    for dy in range(3):
        for dx in range(3):
            cols[:, dy, dx] = p[:, :, dy:dy + h, dx:dx + w].transpose(1, 0, 2, 3)
    return cols.reshape(c * 9, b * h * w)


def _col2im(cols: np.ndarray, shape, k: int) -> np.ndarray:
    b, c, h, w = shape
    if k == 1:
        return cols.reshape(c, b, h, w).transpose(1, 0, 2, 3)
    cols = cols.reshape(c, 3, 3, b, h, w)
    p = np.zeros((b, c, h + 2, w + 2))
    for dy in range(3):
        for dx in range(3):
            p[:, :, dy:dy + h, dx:dx + w] += cols[:, dy, dx].transpose(1, 0, 2, 3)
    return p[:, :, 1:-1, 1:-1]


def _forward(model: ModelWeights, x: np.ndarray, keep: bool = False):
    """Run (B, C, H, W) through the network; optionally keep what backprop needs."""
    acts = [x]
    cache = []
    for i, layer in enumerate(model.layers):
        cur = acts[-1]
        b, c, h, w = cur.shape
        if layer.kind in (CONV3, CONV1):
            cols = _im2col(cur, layer.ksize)
            wm = layer.weight.reshape(layer.out_ch, -1)
            y = (wm @ cols + layer.bias[:, None]).reshape(layer.out_ch, b, h, w).transpose(1, 0, 2, 3)
            cache.append(cols if keep else None)
        elif layer.kind == PRELU:
            y = np.where(cur > 0, cur, cur * layer.slopes[None, :, None, None])
            cache.append(None)
        else:
            y = cur + acts[i - layer.span]
            cache.append(None)
        acts.append(y)
    return acts, cache


def infer(model: ModelWeights, inputs: np.ndarray) -> np.ndarray:
    """Residual planes (out_ch, H, W) for an input stack (C, H, W)."""
    x = np.asarray(inputs, dtype=np.float64)
    if x.ndim != 3 or x.shape[0] != model.in_channels:
        raise InvalidArgumentError(
            f"model expects {model.in_channels} input planes, got {x.shape[0] if x.ndim == 3 else x.shape}")
    acts, _ = _forward(model, x[None])
    return acts[-1][0]


def round_half_away(x: np.ndarray) -> np.ndarray:
    return np.sign(x) * np.floor(np.abs(x) + 0.5)


def apply_residual(recon, residual: np.ndarray) -> np.ndarray:
    r = np.asarray(_plane(recon), dtype=np.int64)
    return np.clip(r + round_half_away(255.0 * residual).astype(np.int64), 0, 255)


def _loss_and_grads(model: ModelWeights, x: np.ndarray, target: np.ndarray, base: np.ndarray):
    """MSE of (base + output) against target and its parameter gradients."""
    acts, cache = _forward(model, x, keep=True)
    out = acts[-1]
    diff = base + out - target
    loss = float(np.mean(diff * diff))
    g = 2.0 * diff / diff.size
    grads: list = [None] * len(model.layers)
    pending = {}  # activation index -> gradient flowing into it from skips
    for i in range(len(model.layers) - 1, -1, -1):
        layer = model.layers[i]
        if i + 1 in pending:
            g = g + pending.pop(i + 1)
        cur = acts[i]
        if layer.kind in (CONV3, CONV1):
            b, _, h, w = cur.shape
            gy = g.transpose(1, 0, 2, 3).reshape(layer.out_ch, -1)
            gw = (gy @ cache[i].T).reshape(layer.weight.shape)
            gb = gy.sum(axis=1)
            grads[i] = (gw, gb)
            g = _col2im(layer.weight.reshape(layer.out_ch, -1).T @ gy, cur.shape, layer.ksize)
        elif layer.kind == PRELU:
            neg = cur <= 0
            grads[i] = ((g * cur * neg).sum(axis=(0, 2, 3)),)
            g = np.where(neg, g * layer.slopes[None, :, None, None], g)
        else:
            j = i - layer.span
            pending[j] = pending.get(j, 0) + g
    flat = []
    for layer, gr in zip(model.layers, grads):
        if gr is not None:
            flat.extend(gr)
    return loss, flat


def _base_channels(component: int) -> list[int]:
    return [0] if component == LUMA else [0, 1]


def loss_and_gradients(model: ModelWeights, inputs: np.ndarray, target: np.ndarray):
    """Loss and gradients (ordered like ``model.params()``) for one stack and its pristine planes (0..255)."""
    x = np.asarray(inputs, dtype=np.float64)[None]
    tgt = np.asarray(target, dtype=np.float64).reshape(1, model.out_channels, *x.shape[2:]) / 255.0
    base = x[:, _base_channels(model.component)]
    return _loss_and_grads(model, x, tgt, base)


@dataclass
class TrainConfig:
    steps: int = 200
    step_size: float = 0.01
    batch: int = 4
    patch: int = 32
    momentum: float = 0.9
    seed: int = 0


@dataclass
class TrainResult:
    model: ModelWeights
    losses: list[float] = field(default_factory=list)


def train(pairs, config: TrainConfig | None = None, model: ModelWeights | None = None,
          component: int | None = None, slice_type: int | None = None) -> TrainResult:
    """SGD with momentum on random patches of (input stack, pristine planes) pairs."""
    cfg = config or TrainConfig()
    pairs = [(np.asarray(x, dtype=np.float64), np.asarray(t, dtype=np.float64)) for x, t in pairs]
    if not pairs:
        raise InvalidArgumentError("training needs at least one pair")
    if model is None:
        if component is None or slice_type is None:
            component, slice_type = kind_from_channels(pairs[0][0].shape[0])
        model = init_model(component, slice_type, seed=cfg.seed)
    model = model.copy()
    for x, _ in pairs:
        if x.shape[0] != model.in_channels:
            raise InvalidArgumentError("input stack does not match the model")
    rng = np.random.default_rng(cfg.seed)
    params = model.params()
    velocity = [np.zeros_like(p) for p in params]
    base_ch = _base_channels(model.component)
    losses = []
    for _ in range(cfg.steps):
        xs, ts = [], []
        for _ in range(cfg.batch):
            x, t = pairs[int(rng.integers(len(pairs)))]
            t = t.reshape(model.out_channels, *x.shape[1:])
            ph, pw = min(cfg.patch, x.shape[1]), min(cfg.patch, x.shape[2])
            y0 = int(rng.integers(x.shape[1] - ph + 1))
            x0 = int(rng.integers(x.shape[2] - pw + 1))
            xs.append(x[:, y0:y0 + ph, x0:x0 + pw])
            ts.append(t[:, y0:y0 + ph, x0:x0 + pw] / 255.0)
        xb, tb = np.stack(xs), np.stack(ts)
        with np.errstate(over="ignore", invalid="ignore"):  # divergence is checked just below
            loss, grads = _loss_and_grads(model, xb, tb, xb[:, base_ch])
        if not np.isfinite(loss) or not all(np.all(np.isfinite(g)) for g in grads):
            raise TrainingDivergedError(f"loss became non-finite after {len(losses)} steps")
        losses.append(loss)
        for p, v, g in zip(params, velocity, grads):
            v *= cfg.momentum
            v -= cfg.step_size * g
            p += v
    return TrainResult(model.rounded(), losses)


# ---------------------------------------------------------------- selection

@dataclass
class FilterDecision:
    """Per component group: enable flag, chosen model and per-CTU flags."""

    slice_enable: bool = False
    model_index: int = 0
    ctu_flags: list[bool] = field(default_factory=list)


def ctu_sse(a: np.ndarray, b: np.ndarray, ctu: int) -> np.ndarray:
    """SSE per ctu x ctu tile (planes sized in whole tiles), summed over leading channels."""
    d = np.asarray(a, dtype=np.int64) - np.asarray(b, dtype=np.int64)
    d = d * d
    if d.ndim == 2:
        d = d[None]
    c, h, w = d.shape
    return d.reshape(c, h // ctu, ctu, w // ctu, ctu).sum(axis=(0, 2, 4))


def decision_rate(ctx, decision: FilterDecision, n_models: int, group: int = 0) -> int:
    """Frozen-context price of a decision (1/32768 bits)."""
    return _decision_rate(ctx, decision.slice_enable, decision.model_index,
                          int(sum(decision.ctu_flags)), len(decision.ctu_flags), n_models, group)


def _decision_rate(ctx, enable, index, ones, count, n_models, group):
    s = int(ctx[Contexts.NNLF_SLICE + group])
    if not enable:
        return int(COST0[s])
    c = int(ctx[Contexts.NNLF_CTU + group])
    tu = index + (1 if index < n_models - 1 else 0)
    return int(COST1[s]) + tu * COST_ONE_BIT + ones * int(COST1[c]) + (count - ones) * int(COST0[c])


def select_filtering(recon: np.ndarray, original: np.ndarray, candidates: list[np.ndarray],
                     lam: float, ctu: int, ctx=None, group: int = 0):
    """Choose off or one candidate, with per-CTU on/off, minimising SSE + lambda * bits.

    ``recon``/``original``/each candidate are (C, H, W) or (H, W) integer
    planes; candidates are the fully filtered reconstructions. Returns
    (FilterDecision, selected planes).
    """
    ctx = Contexts.fresh() if ctx is None else ctx
    recon = np.asarray(recon, dtype=np.int64)
    base = ctu_sse(recon, original, ctu)
    n = base.size
    off_cost = float(base.sum()) + lam * _decision_rate(ctx, False, 0, 0, n, len(candidates), group) / COST_ONE_BIT
    best = (off_cost, FilterDecision(False, 0, []), recon)
    for idx, cand in enumerate(candidates):
        filt = ctu_sse(cand, original, ctu)
        flags = (filt < base).ravel()
        sse = float(np.where(flags, filt.ravel(), base.ravel()).sum())
        cost = sse + lam * _decision_rate(ctx, True, idx, int(flags.sum()), n, len(candidates), group) / COST_ONE_BIT
        if cost < best[0]:
            best = (cost, FilterDecision(True, idx, [bool(f) for f in flags]), None)
    decision = best[1]
    if not decision.slice_enable:
        return decision, recon
    return decision, merge_filtered(recon, candidates[decision.model_index], decision.ctu_flags, ctu)


def merge_filtered(recon: np.ndarray, filtered: np.ndarray, flags, ctu: int) -> np.ndarray:
    out = np.array(recon, dtype=np.int64, copy=True)
    h, w = out.shape[-2:]
    cols = w // ctu
    for i, on in enumerate(flags):
        if on:
            y, x = (i // cols) * ctu, (i % cols) * ctu
            out[..., y:y + ctu, x:x + ctu] = filtered[..., y:y + ctu, x:x + ctu]
    return out


def write_decision(coder, ctx, decision: FilterDecision, n_models: int, n_ctus: int, group: int) -> None:
    coder.encode_bin(ctx, Contexts.NNLF_SLICE + group, decision.slice_enable)
    if not decision.slice_enable:
        return
    for k in range(n_models - 1):
        coder.encode_bypass(k < decision.model_index)
        if k >= decision.model_index:
            break
    if len(decision.ctu_flags) != n_ctus:
        raise InvalidArgumentError("one flag per CTU is required")
    for f in decision.ctu_flags:
        coder.encode_bin(ctx, Contexts.NNLF_CTU + group, f)


def read_decision(decoder, ctx, n_models: int, n_ctus: int, group: int) -> FilterDecision:
    if not decoder.decode_bin(ctx, Contexts.NNLF_SLICE + group):
        return FilterDecision(False, 0, [])
    idx = 0
    while idx < n_models - 1 and decoder.decode_bypass():
        idx += 1
    flags = [bool(decoder.decode_bin(ctx, Contexts.NNLF_CTU + group)) for _ in range(n_ctus)]
    return FilterDecision(True, idx, flags)
