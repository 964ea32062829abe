"""Sequence encoder and decoder: GOP structure, picture syntax and the UVC1 container.

The byte layout is described in FORMAT.md. Both directions share
:func:`reconstruct_ctu` and the loop-filter helpers, so decoder output
equals the encoder's reconstruction sample for sample.
"""

from __future__ import annotations

import hashlib
import struct
import zlib
from dataclasses import dataclass, field

import numpy as np

from uvc import bim as bimmod
from uvc import nnlf
from uvc.bitstream import COST_ONE_BIT, ArithDecoder, ArithEncoder, BitSink, BitSource, Contexts
from uvc.core import FrameBuffer, psnr_from_sse, sse
from uvc.errors import InvalidArgumentError, MalformedBitstreamError, MissingWeightsError
from uvc.partition import ALL_SPLITS, CTU_SIZE, QT_BT, BlockRect, read_tree, write_tree
from uvc.prediction import compute_bs_map
from uvc.rdo import (
    CtuSearch,
    LeafCoding,
    RefPicture,
    chroma_qp,
    gather_blocks,
    lambda_fixed,
    lambda_from_qp,
    predict_blocks,
    reconstruct_blocks,
    region_lines,
    select_residual,
)
from uvc.transform import QP_MAX, QP_MIN, code_residual, parse_residual

MAGIC = b"UVC1"
FORMAT_VERSION = 1
GOP_CODES = {"intra": 0, "ld": 1, "ra": 2}
GOP_NAMES = {v: k for k, v in GOP_CODES.items()}
TOOL_UQT, TOOL_NNLF, TOOL_BIM = 1, 2, 4
SLICE_I, SLICE_P, SLICE_B = 0, 1, 2
SLICE_NAMES = "IPB"
RA_PERIOD = 8
MAX_RA_LAYER = 3
HASH_BYTES = 16
MAX_MODELS_PER_GROUP = 3
GRID = 4


# ---------------------------------------------------------------- configuration

@dataclass
class CodecConfig:
    qp: int = 32
    gop: str = "ra"
    uqt: bool = True
    nnlf: bool = False
    bim: bool = False
    models: list = field(default_factory=list)
    search_range: int = 8
    min_size: int = 4
    max_depth: int = 4
    bim_sigma: float | None = None
    bim_thresholds: tuple = bimmod.DEFAULT_THRESHOLDS

    def validate(self) -> None:
        if not QP_MIN <= self.qp <= QP_MAX:
            raise InvalidArgumentError(f"qp must lie in [{QP_MIN}, {QP_MAX}], got {self.qp}")
        if self.gop not in GOP_CODES:
            raise InvalidArgumentError(f"gop must be one of {sorted(GOP_CODES)}, got {self.gop!r}")
        if not 0 <= self.search_range <= 64:
            raise InvalidArgumentError("search_range must lie in [0, 64]")
        if self.min_size not in (4, 8, 16, 32, 64):
            raise InvalidArgumentError("min_size must be a power of two in [4, 64]")
        if not 0 <= self.max_depth <= 8:
            raise InvalidArgumentError("max_depth must lie in [0, 8]")
        if self.bim_sigma is not None and not self.bim_sigma > 0:
            raise InvalidArgumentError("bim sigma must be positive")
        bimmod.delta_qp_from_importance([0.5], self.bim_thresholds)
        if self.nnlf:
            if not self.models:
                raise InvalidArgumentError("the nnlf tool needs at least one weight file")
            counts: dict = {}
            for m in self.models:
                counts[model_group(m)] = counts.get(model_group(m), 0) + 1
            if max(counts.values()) > MAX_MODELS_PER_GROUP:
                raise InvalidArgumentError(f"at most {MAX_MODELS_PER_GROUP} models per component and slice type")

    @property
    def mode_set(self):
        return ALL_SPLITS if self.uqt else QT_BT


def model_group(model: nnlf.ModelWeights) -> int:
    return 2 * model.component + model.slice_type


def model_hash(model: nnlf.ModelWeights) -> bytes:
    return model.digest()[:HASH_BYTES]


@dataclass(frozen=True)
class SequenceHeader:
    width: int
    height: int
    frames: int
    qp: int
    gop: str
    uqt: bool
    nnlf: bool
    bim: bool
    search_range: int
    min_size: int
    max_depth: int
    models: tuple = ()  # (group, hash) pairs

    @property
    def tools(self) -> int:
        return (TOOL_UQT if self.uqt else 0) | (TOOL_NNLF if self.nnlf else 0) | (TOOL_BIM if self.bim else 0)

    @property
    def mode_set(self):
        return ALL_SPLITS if self.uqt else QT_BT

    def to_bytes(self) -> bytes:
        body = MAGIC + struct.pack(
            "<HHHHBBBBBBB", FORMAT_VERSION, self.width, self.height, self.frames, self.qp,
            GOP_CODES[self.gop], self.tools, self.search_range, self.min_size, self.max_depth, len(self.models))
        for group, digest in self.models:
            body += struct.pack("<B", group) + digest
        return body + struct.pack("<I", zlib.crc32(body))

    @classmethod
    def parse(cls, data: bytes) -> tuple[SequenceHeader, int]:
        fixed = 4 + struct.calcsize("<HHHHBBBBBBB")
        if len(data) < fixed:
            raise MalformedBitstreamError("stream shorter than the sequence header", len(data))
        if data[:4] != MAGIC:
            raise MalformedBitstreamError("bad magic, not a UVC1 stream", 0)
        (version, w, h, frames, qp, gop, tools, sr, min_size, max_depth, nmodels) = struct.unpack_from(
            "<HHHHBBBBBBB", data, 4)
        if version != FORMAT_VERSION:
            raise MalformedBitstreamError(f"unsupported format version {version}", 4)
        end = fixed + nmodels * (1 + HASH_BYTES)
        if len(data) < end + 4:
            raise MalformedBitstreamError("sequence header truncated", len(data))
        (crc,) = struct.unpack_from("<I", data, end)
        if crc != zlib.crc32(data[:end]):
            raise MalformedBitstreamError("sequence header checksum mismatch", end)
        if w == 0 or h == 0 or w % CTU_SIZE or h % CTU_SIZE:
            raise MalformedBitstreamError(f"picture size {w}x{h} is not a multiple of {CTU_SIZE}", 6)
        if frames == 0:
            raise MalformedBitstreamError("stream declares zero frames", 10)
        if qp > QP_MAX or gop not in GOP_NAMES or tools & ~7:
            raise MalformedBitstreamError("invalid qp, gop or tool field", 12)
        if min_size not in (4, 8, 16, 32, 64) or max_depth > 8 or sr > 64:
            raise MalformedBitstreamError("invalid partition or search parameters", 15)
        models = []
        pos = fixed
        for _ in range(nmodels):
            group = data[pos]
            if group > 3:
                raise MalformedBitstreamError(f"unknown model group {group}", pos)
            models.append((group, bytes(data[pos + 1:pos + 1 + HASH_BYTES])))
            pos += 1 + HASH_BYTES
        hdr = cls(w, h, frames, qp, GOP_NAMES[gop], bool(tools & TOOL_UQT), bool(tools & TOOL_NNLF),
                  bool(tools & TOOL_BIM), sr, min_size, max_depth, tuple(models))
        return hdr, end + 4


# ---------------------------------------------------------------- GOP

@dataclass(frozen=True)
class PictureInfo:
    poc: int
    layer: int
    qp_offset: int
    refs: tuple
    slice_type: int

    @property
    def slice_code(self) -> int:
        """Filter-model slice type: 0 intra, 1 inter."""
        return nnlf.INTRA if self.slice_type == SLICE_I else nnlf.INTER


def gop_structure(n: int, gop: str) -> list[PictureInfo]:
    """Pictures in coding order."""
    if n <= 0:
        raise InvalidArgumentError("need at least one frame")
    if gop == "intra":
        return [PictureInfo(p, 0, 0, (), SLICE_I) for p in range(n)]
    if gop == "ld":
        return [PictureInfo(0, 0, 0, (), SLICE_I)] + [PictureInfo(p, 0, 0, (p - 1,), SLICE_P) for p in range(1, n)]
    if gop != "ra":
        raise InvalidArgumentError(f"unknown gop {gop!r}")
    out = [PictureInfo(0, 0, 0, (), SLICE_I)]

    def bisect(lo: int, hi: int, depth: int):
        if hi - lo < 2:
            return
        mid = (lo + hi) // 2
        layer = min(depth, MAX_RA_LAYER)
        out.append(PictureInfo(mid, layer, layer, (lo, hi), SLICE_B))
        bisect(lo, mid, depth + 1)
        bisect(mid, hi, depth + 1)

    prev = 0
    while prev < n - 1:
        anchor = min(prev + RA_PERIOD, n - 1)
        out.append(PictureInfo(anchor, 0, 0, (prev,), SLICE_P))
        bisect(prev, anchor, 1)
        prev = anchor
    return out


def bim_applies(info: PictureInfo, structure: list[PictureInfo]) -> bool:
    """Single-layer GOPs: every picture. Hierarchical GOPs: all but the top temporal layer."""
    top = max(p.layer for p in structure)
    return top == 0 or info.layer < top


# ---------------------------------------------------------------- picture state

class PictureState:
    """Reconstruction, prediction and 4x4 side information for one picture."""

    def __init__(self, width: int, height: int):
        self.width, self.height = width, height
        self.recon = [np.zeros((height, width), np.int64), np.zeros((height // 2, width // 2), np.int64),
                      np.zeros((height // 2, width // 2), np.int64)]
        self.pred = [np.zeros_like(p) for p in self.recon]
        gh, gw = height // GRID, width // GRID
        self.leaf_id = np.zeros((gh, gw), np.int64)
        self.intra = np.zeros((gh, gw), bool)
        self.coded = np.zeros((gh, gw), bool)
        self.mvs = np.zeros((gh, gw, 2), np.int64)
        self.ref_poc = np.full((gh, gw), -1, np.int64)
        self.trees = []
        self.ctu_qps = []
        self._next_leaf = 0

    def ctus(self):
        for y in range(0, self.height, CTU_SIZE):
            for x in range(0, self.width, CTU_SIZE):
                yield BlockRect(x, y, CTU_SIZE, CTU_SIZE)

    def motion_field(self) -> np.ndarray:
        return np.where(self.intra[..., None], 0, self.mvs)


def _leaf_groups(tree):
    groups: dict = {}
    for node in tree.leaves():
        groups.setdefault((node.rect.w, node.rect.h), []).append(node)
    return sorted(groups.items())


def _leaf_arrays(nodes):
    leaves = [n.leaf for n in nodes]
    xs = np.array([n.rect.x for n in nodes], np.int64)
    ys = np.array([n.rect.y for n in nodes], np.int64)
    intra = np.array([l.intra for l in leaves], bool)
    modes = np.array([l.mode for l in leaves], np.int64)
    ref_idx = np.array([l.ref_idx for l in leaves], np.int64)
    mvs = np.array([l.mv for l in leaves], np.int64).reshape(-1, 2)
    return leaves, xs, ys, intra, modes, ref_idx, mvs


def code_chroma(tree, region: BlockRect, orig_u, orig_v, pic: PictureState, refs, qp: int,
                search_range: int, ctx, lam: float) -> None:
    """Encoder side: choose chroma levels for every leaf of a decided luma tree."""
    cregion = BlockRect(region.x // 2, region.y // 2, region.w // 2, region.h // 2)
    qpc = chroma_qp(qp)
    for (w, h), nodes in _leaf_groups(tree):
        leaves, xs, ys, intra, modes, ref_idx, mvs = _leaf_arrays(nodes)
        for comp, orig, attr in ((1, orig_u, "levels_u"), (2, orig_v, "levels_v")):
            lines = region_lines(pic.recon[comp], cregion)
            pred = predict_blocks(comp, xs // 2, ys // 2, w // 2, h // 2, intra, modes, ref_idx, mvs,
                                  lines, cregion, refs, search_range)
            src = gather_blocks(orig, xs // 2, ys // 2, w // 2, h // 2)
            levels, _, _ = select_residual(src, pred, qpc, intra, ctx, True, lambda_fixed(lam))
            for leaf, lv in zip(leaves, levels):
                setattr(leaf, attr, lv.astype(np.int32))


def reconstruct_ctu(tree, region: BlockRect, pic: PictureState, refs, qp: int, search_range: int) -> None:
    """Predict and reconstruct every leaf of ``tree`` into ``pic`` (shared by both sides)."""
    cregion = BlockRect(region.x // 2, region.y // 2, region.w // 2, region.h // 2)
    lines = [region_lines(pic.recon[0], region), region_lines(pic.recon[1], cregion),
             region_lines(pic.recon[2], cregion)]
    qpc = chroma_qp(qp)
    for (w, h), nodes in _leaf_groups(tree):
        leaves, xs, ys, intra, modes, ref_idx, mvs = _leaf_arrays(nodes)
        for comp in range(3):
            sx, sy, bw, bh = (xs, ys, w, h) if comp == 0 else (xs // 2, ys // 2, w // 2, h // 2)
            reg = region if comp == 0 else cregion
            pred = predict_blocks(comp, sx, sy, bw, bh, intra, modes, ref_idx, mvs, lines[comp], reg, refs,
                                  search_range)
            attr = ("levels", "levels_u", "levels_v")[comp]
            levels = np.stack([getattr(l, attr) for l in leaves])
            recon = reconstruct_blocks(pred, levels, qp if comp == 0 else qpc)
            for i in range(len(leaves)):
                pic.pred[comp][sy[i]:sy[i] + bh, sx[i]:sx[i] + bw] = pred[i]
                pic.recon[comp][sy[i]:sy[i] + bh, sx[i]:sx[i] + bw] = recon[i]
        for node, leaf in zip(nodes, leaves):
            r = node.rect
            gy, gx, gh, gw = r.y // GRID, r.x // GRID, r.h // GRID, r.w // GRID
            pic._next_leaf += 1
            pic.leaf_id[gy:gy + gh, gx:gx + gw] = pic._next_leaf
            pic.intra[gy:gy + gh, gx:gx + gw] = leaf.intra
            pic.coded[gy:gy + gh, gx:gx + gw] = bool(np.any(leaf.levels))
            pic.mvs[gy:gy + gh, gx:gx + gw] = leaf.mv
            pic.ref_poc[gy:gy + gh, gx:gx + gw] = -1 if leaf.intra else refs[leaf.ref_idx].poc
    pic.trees.append(tree)


# ---------------------------------------------------------------- leaf / CTU syntax

def _write_leaf(coder, ctx, leaf: LeafCoding, slice_type: int, nrefs: int) -> None:
    if slice_type != SLICE_I:
        coder.encode_bin(ctx, Contexts.PRED_MODE, not leaf.intra)
    if leaf.intra:
        coder.encode_bits(leaf.mode, 2)
    else:
        if nrefs == 2:
            coder.encode_bin(ctx, Contexts.REF_IDX, leaf.ref_idx)
        coder.encode_se(leaf.mvd[0])
        coder.encode_se(leaf.mvd[1])
    code_residual(leaf.levels, coder, ctx, False)
    code_residual(leaf.levels_u, coder, ctx, True)
    code_residual(leaf.levels_v, coder, ctx, True)


def _read_leaf(decoder, ctx, rect: BlockRect, slice_type: int, refs, search_range: int) -> LeafCoding:
    intra = True
    if slice_type != SLICE_I:
        intra = not decoder.decode_bin(ctx, Contexts.PRED_MODE)
    if intra:
        leaf = LeafCoding(True, mode=decoder.decode_bits(2))
    else:
        ref_idx = decoder.decode_bin(ctx, Contexts.REF_IDX) if len(refs) == 2 else 0
        mvd = (decoder.decode_se(), decoder.decode_se())
        pred = refs[ref_idx].motion[rect.y // GRID, rect.x // GRID]
        mv = (int(pred[0]) + mvd[0], int(pred[1]) + mvd[1])
        lim = 2 * search_range
        if abs(mv[0]) > lim or abs(mv[1]) > lim:
            raise MalformedBitstreamError(f"motion vector {mv} outside the search range")
        leaf = LeafCoding(False, ref_idx=int(ref_idx), mv=mv, mvd=mvd)
    leaf.levels = parse_residual(decoder, ctx, rect.h, rect.w, False)
    leaf.levels_u = parse_residual(decoder, ctx, rect.h // 2, rect.w // 2, True)
    leaf.levels_v = parse_residual(decoder, ctx, rect.h // 2, rect.w // 2, True)
    return leaf


def _write_dqp(coder, ctx, delta: int) -> None:
    mag = abs(delta)
    coder.encode_bin(ctx, Contexts.DQP, mag > 0)
    if mag > 0:
        coder.encode_bin(ctx, Contexts.DQP + 1, mag > 1)
        coder.encode_bypass(delta < 0)


def _read_dqp(decoder, ctx) -> int:
    if not decoder.decode_bin(ctx, Contexts.DQP):
        return 0
    mag = 2 if decoder.decode_bin(ctx, Contexts.DQP + 1) else 1
    return -mag if decoder.decode_bypass() else mag


# ---------------------------------------------------------------- loop filter

def _bs_planes(pic: PictureState):
    bs = compute_bs_map(pic.leaf_id, pic.intra, pic.coded, pic.mvs, pic.ref_poc).plane(pic.height, pic.width)
    bs_c = np.maximum.reduce([bs[0::2, 0::2], bs[1::2, 0::2], bs[0::2, 1::2], bs[1::2, 1::2]])
    return bs, bs_c


def filter_inputs(pic: PictureState, component: int, slice_code: int, qp: int):
    bs, bs_c = _bs_planes(pic)
    intra = slice_code == nnlf.INTRA
    if component == nnlf.LUMA:
        part = nnlf.partition_mask(pic.trees, pic.height, pic.width) if intra else None
        return nnlf.build_inputs(pic.recon[0], pic.pred[0], bs, qp, part, slice_code)
    part = nnlf.partition_mask(pic.trees, pic.height // 2, pic.width // 2, 2) if intra else None
    return nnlf.build_chroma_inputs(pic.recon[1], pic.recon[2], pic.pred[1], pic.pred[2], bs_c, qp,
                                    pic.recon[0], part, slice_code)


def filtered_planes(model: nnlf.ModelWeights, inputs: np.ndarray, pic: PictureState, component: int) -> np.ndarray:
    res = nnlf.infer(model, inputs)
    if component == nnlf.LUMA:
        return nnlf.apply_residual(pic.recon[0], res[0])
    return np.stack([nnlf.apply_residual(pic.recon[1], res[0]), nnlf.apply_residual(pic.recon[2], res[1])])


def _current_planes(pic: PictureState, component: int) -> np.ndarray:
    return pic.recon[0] if component == nnlf.LUMA else np.stack([pic.recon[1], pic.recon[2]])


def _store_planes(pic: PictureState, component: int, planes: np.ndarray) -> None:
    if component == nnlf.LUMA:
        pic.recon[0] = planes
    else:
        pic.recon[1], pic.recon[2] = planes[0], planes[1]


# ---------------------------------------------------------------- encoder

@dataclass
class PictureStats:
    poc: int
    layer: int
    slice_type: str
    qp_slice: int
    qp_effective_mean: float
    bits: int
    psnr_y: float
    psnr_u: float
    psnr_v: float
    md5: str
    search_cost: float = 0.0  # luma D + lambda * R summed over CTU searches
    filter_sse_before: int = 0
    filter_sse_after: int = 0
    filter_cost: float = 0.0  # lambda-weighted bits of filter decisions
    filter_enabled: tuple = ()

    @property
    def rd_cost(self) -> float:
        """Search cost plus the filter stage's change in SSE and its signalling cost."""
        return self.search_cost + (self.filter_sse_after - self.filter_sse_before) + self.filter_cost


@dataclass
class EncodeResult:
    stream: bytes
    header: SequenceHeader
    stats: list[PictureStats]
    recon: list[FrameBuffer]
    pictures: list = field(default_factory=list)  # (PictureInfo, PictureState) when kept

    @property
    def total_bits(self) -> int:
        return 8 * len(self.stream)


def _frame_md5(planes) -> str:
    h = hashlib.md5()
    for p in planes:
        h.update(np.asarray(p, dtype=np.uint8).tobytes())
    return h.hexdigest()


def _check_frames(frames) -> tuple[int, int]:
    frames = list(frames)
    if not frames:
        raise InvalidArgumentError("nothing to encode")
    w, h = frames[0].width, frames[0].height
    for f in frames:
        if (f.width, f.height) != (w, h):
            raise InvalidArgumentError("all frames must share dimensions")
    if w % CTU_SIZE or h % CTU_SIZE:
        raise InvalidArgumentError(f"frame size {w}x{h} must be a multiple of {CTU_SIZE}")
    if len(frames) > 0xFFFF or w > 0xFFFF or h > 0xFFFF:
        raise InvalidArgumentError("sequence too large for the container")
    return w, h


def encode_sequence(frames, config: CodecConfig | None = None, keep_pictures: bool = False) -> EncodeResult:
    cfg = config or CodecConfig()
    cfg.validate()
    frames = list(frames)
    width, height = _check_frames(frames)
    models = list(cfg.models) if cfg.nnlf else []
    header = SequenceHeader(width, height, len(frames), cfg.qp, cfg.gop, cfg.uqt, cfg.nnlf, cfg.bim,
                            cfg.search_range, cfg.min_size, cfg.max_depth,
                            tuple((model_group(m), model_hash(m)) for m in models))
    structure = gop_structure(len(frames), cfg.gop)
    dpb: dict[int, RefPicture] = {}
    out = [header.to_bytes()]
    stats: list[PictureStats] = []
    recon: dict[int, FrameBuffer] = {}
    source_y = [f.y.data for f in frames]
    kept = []
    for info in structure:
        payload, st, pic = _encode_picture(frames[info.poc], info, structure, dpb, header, cfg, models, source_y)
        out.append(struct.pack("<I", len(payload)) + payload)
        stats.append(st)
        if keep_pictures:
            kept.append((info, pic))
        dpb[info.poc] = RefPicture(info.poc, pic.recon[0], pic.recon[1], pic.recon[2], pic.motion_field())
        recon[info.poc] = FrameBuffer.from_arrays(*(p.astype(np.uint8) for p in pic.recon), poc=info.poc)
    return EncodeResult(b"".join(out), header, stats, [recon[p] for p in sorted(recon)], kept)


def training_pairs(frames, config: CodecConfig, component: int, slice_type: int):
    """(input stack, pristine planes) for every picture of one slice type, coded without the filter."""
    cfg = CodecConfig(**{**config.__dict__, "nnlf": False, "models": []})
    frames = list(frames)
    res = encode_sequence(frames, cfg, keep_pictures=True)
    pairs = []
    for info, pic in res.pictures:
        if info.slice_code != slice_type:
            continue
        slice_qp = res.stats[[s.poc for s in res.stats].index(info.poc)].qp_slice
        x = filter_inputs(pic, component, slice_type, slice_qp)
        src = frames[info.poc]
        target = src.y.data[None] if component == nnlf.LUMA else np.stack([src.u.data, src.v.data])
        pairs.append((x, np.asarray(target, np.float64)))
    return pairs


def _encode_picture(frame: FrameBuffer, info: PictureInfo, structure, dpb, header: SequenceHeader,
                    cfg: CodecConfig, models, source_y):
    slice_qp = min(max(cfg.qp + info.qp_offset, QP_MIN), QP_MAX)
    lam = lambda_from_qp(slice_qp, info.slice_type == SLICE_I)
    refs = [dpb[p] for p in info.refs]
    use_bim = cfg.bim and bim_applies(info, structure)
    pic = PictureState(header.width, header.height)
    if use_bim:
        deltas = bimmod.picture_deltas(source_y, info.poc, cfg.qp, CTU_SIZE, cfg.bim_sigma, cfg.bim_thresholds).ravel()
    else:
        deltas = np.zeros(len(list(pic.ctus())), np.int64)

    sink = BitSink()
    sink.write_ue(info.poc)
    sink.write_ue(info.slice_type)
    sink.write_ue(slice_qp)
    sink.write_bit(use_bim)
    sink.align()

    ctx = Contexts.fresh()
    enc = ArithEncoder()
    orig = [np.asarray(p.data, np.int64) for p in frame.planes]
    search_cost = 0.0
    for i, region in enumerate(pic.ctus()):
        qp = min(max(slice_qp + int(deltas[i]), QP_MIN), QP_MAX)
        pic.ctu_qps.append(qp)
        search = CtuSearch(orig[0], pic.recon[0], region, refs, qp, lam, ctx,
                           slice_intra=info.slice_type == SLICE_I, search_range=cfg.search_range,
                           min_size=cfg.min_size, max_depth=cfg.max_depth)
        decision = search.choose_partition(region, cfg.mode_set)
        search_cost += decision.cost.total()
        code_chroma(decision.tree, region, orig[1], orig[2], pic, refs, qp, cfg.search_range, search.ctx, lam)
        reconstruct_ctu(decision.tree, region, pic, refs, qp, cfg.search_range)
        if use_bim:
            _write_dqp(enc, ctx, qp - slice_qp)
        write_tree(decision.tree, enc, ctx, cfg.mode_set, cfg.min_size, cfg.max_depth,
                   lambda node: _write_leaf(enc, ctx, node.leaf, info.slice_type, len(refs)))

    before = after = 0
    fcost = 0.0
    enabled = []
    if cfg.nnlf:
        for comp in (nnlf.LUMA, nnlf.CHROMA):
            group = [m for m in models if model_group(m) == 2 * comp + info.slice_code]
            if not group:
                continue
            ctu = CTU_SIZE if comp == nnlf.LUMA else CTU_SIZE // 2
            target = orig[0] if comp == nnlf.LUMA else np.stack([orig[1], orig[2]])
            current = _current_planes(pic, comp)
            inputs = filter_inputs(pic, comp, info.slice_code, slice_qp)
            cands = [filtered_planes(m, inputs, pic, comp) for m in group]
            frozen = ctx.copy()
            decision, chosen = nnlf.select_filtering(current, target, cands, lam, ctu, frozen, comp)
            nctu = (header.width // CTU_SIZE) * (header.height // CTU_SIZE)
            nnlf.write_decision(enc, ctx, decision, len(group), nctu, comp)
            before += sse(current, target)
            after += sse(chosen, target)
            fcost += lam * nnlf.decision_rate(frozen, decision, len(group), comp) / COST_ONE_BIT
            enabled.append(decision.slice_enable)
            _store_planes(pic, comp, chosen)

    arith = enc.finish()
    payload = sink.getvalue() + arith + struct.pack("<I", zlib.crc32(arith))
    psnrs = [psnr_from_sse(sse(o, r), o.size) for o, r in zip(orig, pic.recon)]
    st = PictureStats(info.poc, info.layer, SLICE_NAMES[info.slice_type], slice_qp,
                      float(np.mean(pic.ctu_qps)), 8 * len(payload), *psnrs, _frame_md5(pic.recon),
                      search_cost, before, after, fcost, tuple(enabled))
    return payload, st, pic


# ---------------------------------------------------------------- decoder

@dataclass
class DecodeResult:
    header: SequenceHeader
    frames: list[FrameBuffer]
    picture_bits: dict = field(default_factory=dict)


def _resolve_models(header: SequenceHeader, weights) -> list[nnlf.ModelWeights]:
    if not header.nnlf:
        return []
    available = {}
    for w in weights or []:
        m = w if isinstance(w, nnlf.ModelWeights) else nnlf.load_weights(w)
        available[model_hash(m)] = m
    out = []
    for group, digest in header.models:
        if digest not in available:
            raise MissingWeightsError(f"no weight file matches hash {digest.hex()}")
        m = available[digest]
        if model_group(m) != group:
            raise MalformedBitstreamError(f"model {digest.hex()} declared for the wrong group")
        out.append(m)
    return out


def decode_stream(data: bytes, weights=()) -> DecodeResult:
    data = bytes(data)
    if not data:
        raise MalformedBitstreamError("empty stream", 0)
    header, pos = SequenceHeader.parse(data)
    models = _resolve_models(header, weights)
    structure = gop_structure(header.frames, header.gop)
    dpb: dict[int, RefPicture] = {}
    frames: dict[int, FrameBuffer] = {}
    bits = {}
    for info in structure:
        if pos + 4 > len(data):
            raise MalformedBitstreamError("stream ends before a picture length field", len(data))
        (length,) = struct.unpack_from("<I", data, pos)
        start = pos + 4
        end = start + length
        if end > len(data):
            raise MalformedBitstreamError(f"picture payload of {length} bytes is truncated", len(data))
        pic = _decode_picture(data, start, end, info, structure, dpb, header, models)
        bits[info.poc] = 8 * length
        dpb[info.poc] = RefPicture(info.poc, pic.recon[0], pic.recon[1], pic.recon[2], pic.motion_field())
        frames[info.poc] = FrameBuffer.from_arrays(*(p.astype(np.uint8) for p in pic.recon), poc=info.poc)
        pos = end
    if pos != len(data):
        raise MalformedBitstreamError("trailing bytes after the last picture", pos)
    return DecodeResult(header, [frames[p] for p in sorted(frames)], bits)


def decode_sequence(data: bytes, weights=()) -> list[FrameBuffer]:
    return decode_stream(data, weights).frames


def _decode_picture(data: bytes, start: int, end: int, info: PictureInfo, structure, dpb,
                    header: SequenceHeader, models) -> PictureState:
    src = BitSource(data, start, end, 0)
    poc = src.read_ue()
    slice_type = src.read_ue()
    slice_qp = src.read_ue()
    use_bim = src.read_bit()
    src.align()
    if poc != info.poc or slice_type != info.slice_type:
        raise MalformedBitstreamError(
            f"picture poc {poc} / type {slice_type} does not follow the {header.gop} structure", start)
    # both fields are implied by the sequence header, so a mismatch means corruption
    if slice_qp != min(max(header.qp + info.qp_offset, QP_MIN), QP_MAX):
        raise MalformedBitstreamError(f"slice qp {slice_qp} does not match the sequence qp", start)
    if use_bim != (header.bim and bim_applies(info, structure)):
        raise MalformedBitstreamError("delta QP flag disagrees with the sequence header", start)
    arith_start = src.byte_pos
    arith_end = end - 4
    if arith_end < arith_start:
        raise MalformedBitstreamError("picture payload too short", end)
    (crc,) = struct.unpack_from("<I", data, arith_end)
    if crc != zlib.crc32(data[arith_start:arith_end]):
        raise MalformedBitstreamError("picture checksum mismatch", arith_end)

    refs = [dpb[p] for p in info.refs]
    pic = PictureState(header.width, header.height)
    ctx = Contexts.fresh()
    dec = ArithDecoder(data, arith_start, arith_end, 0)
    mode_set = header.mode_set
    for region in pic.ctus():
        qp = slice_qp
        if use_bim:
            qp = min(max(slice_qp + _read_dqp(dec, ctx), QP_MIN), QP_MAX)
        pic.ctu_qps.append(qp)
        tree = read_tree(region, dec, ctx, mode_set, header.min_size, header.max_depth,
                         lambda node: _read_leaf(dec, ctx, node.rect, info.slice_type, refs, header.search_range))
        reconstruct_ctu(tree, region, pic, refs, qp, header.search_range)

    if header.nnlf:
        for comp in (nnlf.LUMA, nnlf.CHROMA):
            group = [m for m in models if model_group(m) == 2 * comp + info.slice_code]
            if not group:
                continue
            nctu = (header.width // CTU_SIZE) * (header.height // CTU_SIZE)
            decision = nnlf.read_decision(dec, ctx, len(group), nctu, comp)
            if not decision.slice_enable:
                continue
            ctu = CTU_SIZE if comp == nnlf.LUMA else CTU_SIZE // 2
            current = _current_planes(pic, comp)
            inputs = filter_inputs(pic, comp, info.slice_code, slice_qp)
            filt = filtered_planes(group[decision.model_index], inputs, pic, comp)
            _store_planes(pic, comp, nnlf.merge_filtered(current, filt, decision.ctu_flags, ctu))
    if dec.consumed() != arith_end - arith_start:
        raise MalformedBitstreamError("picture data not fully consumed", arith_start + dec.consumed())
    return pic
