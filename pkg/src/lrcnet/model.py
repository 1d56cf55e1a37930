"""Full network assembly for classification and part segmentation, plus
checkpoint persistence.

Forward functions are batched: ``coords`` is [B, N, 3] (a single [N, 3]
cloud is promoted). The pipeline is farthest point sampling, nested kNN
grouping, relative coordinates, one PointNet layer per scale, scale
aggregation, similarity weighting between regions, a global PointNet layer
and the task head.
"""
import io
import json
import struct
import zlib
from contextlib import contextmanager
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, Optional

import numpy as np

from . import autodiff as ad
from . import kernels
from . import layers as L
from .config import ConfigError, ModelConfig, RunConfig, format_run_config, parse_run_config
from .dataio import make_rng


class ModelError(RuntimeError):
    pass


class CheckpointError(ValueError):
    pass


Params = Dict[str, ad.Tensor]


def _add_dense(params, prefix, layer_list):
    for i, (W, b) in enumerate(layer_list):
        W.name, b.name = f"{prefix}.{i}.W", f"{prefix}.{i}.b"
        params[W.name] = W
        params[b.name] = b


def init_params(cfg, seed=0):
    """Seeded parameter set, keyed by stable names in construction order."""
    rng = make_rng(seed)
    dt = cfg.dtype
    D = cfg.region_dim
    params: Params = {}
    for t in range(cfg.T):
        _add_dense(params, f"area.{t}", L.init_mlp(rng, 3, list(cfg.area_mlp) + [D], dt))
    if cfg.aggregation == "intra":
        _add_dense(params, "intra", L.init_intra_filters(rng, D, cfg.filter_kinds, dt))
    g_in = D * cfg.T if cfg.aggregation == "concat" else D
    _add_dense(params, "global", L.init_mlp(rng, g_in, cfg.global_mlp, dt))
    g_dim = cfg.global_mlp[-1]
    if cfg.task == "classify":
        _add_dense(params, "head", L.init_mlp(rng, g_dim, list(cfg.head_mlp) + [cfg.num_classes], dt))
    else:
        _add_dense(params, "seg.skip", L.init_mlp(rng, 3, cfg.seg_skip_mlp, dt))
        _add_dense(params, "seg.region", L.init_mlp(rng, g_in + g_dim, cfg.seg_region_mlp, dt))
        fp_in = cfg.seg_region_mlp[-1] + cfg.seg_skip_mlp[-1]
        _add_dense(params, "seg.point", L.init_mlp(rng, fp_in, list(cfg.seg_point_mlp) + [cfg.num_parts], dt))
    return params


def _group(params, prefix):
    out = []
    i = 0
    while f"{prefix}.{i}.W" in params:
        out.append((params[f"{prefix}.{i}.W"], params[f"{prefix}.{i}.b"]))
        i += 1
    if not out:
        raise ModelError(f"parameter group {prefix!r} missing")
    return out


@contextmanager
def _stage(name):
    try:
        yield
    except ad.NonFiniteError as exc:
        raise ad.NonFiniteError(f"{name} ({exc.where})") from None


def normalize_batch(coords):
    centered = coords - coords.mean(axis=1, keepdims=True)
    scale = np.sqrt((centered * centered).sum(axis=2)).max(axis=1)
    if not (scale > 0).all():
        raise ModelError("cannot normalize a cloud whose points all coincide")
    return centered / scale[:, None, None]


@dataclass
class Trunk:
    coords: np.ndarray       # [B, N, 3] float64, after normalization
    centroid_idx: np.ndarray  # [B, M]
    centers: np.ndarray       # [B, M, 3]
    area_feats: ad.Tensor     # [B, M, T, D]
    region_feats: ad.Tensor   # [B, M, D] (or T*D for concat)
    enhanced: ad.Tensor       # [B, M, *]
    g: ad.Tensor              # [B, G]


def _prepare(coords, cfg):
    coords = np.asarray(coords, dtype=np.float64)
    if coords.ndim == 2:
        coords = coords[None]
    if coords.ndim != 3 or coords.shape[2] != 3:
        raise ModelError(f"expected [B, N, 3] coordinates, got {coords.shape}")
    n = coords.shape[1]
    if n < cfg.scales[-1]:
        raise ModelError(f"cloud has {n} points but the largest scale needs {cfg.scales[-1]}")
    if n < cfg.num_regions:
        raise ModelError(f"cannot sample {cfg.num_regions} centroids from {n} points")
    if not np.isfinite(coords).all():
        raise ModelError("input coordinates are not finite")
    return normalize_batch(coords) if cfg.normalize else coords


def trunk(coords, cfg, params, training=False, rng=None):
    coords = _prepare(coords, cfg)
    B, N = coords.shape[:2]
    M, dt = cfg.num_regions, cfg.dtype
    if training:
        rng = rng if rng is not None else make_rng(0)
        starts = rng.integers(0, N, B)
    else:
        starts = np.zeros(B, dtype=np.int64)
    bsel = np.arange(B)[:, None]
    cidx = kernels.fps_batch(coords, M, starts)
    centers = coords[bsel, cidx]
    nbr = kernels.knn_batch(coords, centers, cfg.scales[-1])

    with _stage("area features"):
        scale_feats = []
        for t, k in enumerate(cfg.scales):
            rel = coords[bsel[:, :, None], nbr[:, :, :k]] - centers[:, :, None, :]
            s = L.pointnet_layer(rel.astype(dt), _group(params, f"area.{t}"))
            scale_feats.append(ad.reshape(s, (B, M, 1, s.shape[-1])))
        area = scale_feats[0] if len(scale_feats) == 1 else ad.concat(scale_feats, axis=2)

    with _stage("intra-region encoding"):
        if cfg.aggregation == "intra":
            region = L.intra_region_encode(area, _group(params, "intra"))
        else:
            region = L.aggregate_fallback(area, cfg.aggregation)

    with _stage("inter-region encoding"):
        if cfg.inter_region:
            V = np.stack([np.exp(-cfg.gamma * kernels.sqdist(c, c)) for c in centers])
            enhanced = L.inter_region_encode(region, V)
        else:
            enhanced = region

    with _stage("global feature"):
        g = L.global_pointnet(enhanced, _group(params, "global"), cfg.global_pool)
    return Trunk(coords, cidx, centers, area, region, enhanced, g)


def forward_classify(coords, cfg, params, mode="eval", rng=None):
    """Class logits [B, num_classes]."""
    training = _mode(mode)
    tr = trunk(coords, cfg, params, training, rng)
    with _stage("classification head"):
        return L.classification_head(tr.g, _group(params, "head"), training, rng, cfg.dropout)


def forward_segment(coords, cfg, params, mode="eval", rng=None, return_trunk=False):
    """Per-point part logits [B, N, num_parts]."""
    training = _mode(mode)
    tr = trunk(coords, cfg, params, training, rng)
    B, N = tr.coords.shape[:2]
    M = cfg.num_regions
    with _stage("segmentation propagation"):
        skip = L.mlp(tr.coords.astype(cfg.dtype), _group(params, "seg.skip"))
        gb = ad.expand(tr.g, axis=1, n=M)
        region = L.mlp(ad.concat([tr.enhanced, gb], axis=-1), _group(params, "seg.region"))
        fp = L.feature_propagation(tr.coords, tr.centers, region, skip, k=3)
        logits = L.mlp(fp, _group(params, "seg.point"), final_relu=False)
    if return_trunk:
        return logits, tr, region
    return logits


def _mode(mode):
    if mode not in ("train", "eval"):
        raise ValueError(f"mode must be 'train' or 'eval', got {mode!r}")
    return mode == "train"


def forward(coords, cfg, params, mode="eval", rng=None):
    if cfg.task == "classify":
        return forward_classify(coords, cfg, params, mode, rng)
    return forward_segment(coords, cfg, params, mode, rng)


def loss_fn(logits, targets):
    """Mean cross-entropy; segmentation logits are flattened over points."""
    targets = np.asarray(targets)
    if logits.data.ndim == 3:
        B, N, P = logits.shape
        return ad.softmax_cross_entropy(ad.reshape(logits, (B * N, P)), targets.reshape(-1))
    return ad.softmax_cross_entropy(logits, targets)


# ---------------------------------------------------------------------------
# checkpoints
# ---------------------------------------------------------------------------

MAGIC = b"LRCN"
FORMAT_VERSION = 1


@dataclass
class Checkpoint:
    run: RunConfig
    params: Dict[str, np.ndarray]
    optim: Dict[str, np.ndarray] = field(default_factory=dict)
    step: int = 0
    epoch: int = 0
    rng_state: Optional[dict] = None
    version: int = FORMAT_VERSION

    def tensors(self):
        """Model parameters as autodiff tensors in the stored dtype."""
        dt = self.run.model.dtype
        return {k: ad.Tensor(v.astype(dt), requires_grad=True, name=k) for k, v in self.params.items()}


def _header_text(ck):
    state = {"step": ck.step, "epoch": ck.epoch, "rng": ck.rng_state}
    return format_run_config(ck.run) + "#state " + json.dumps(state, sort_keys=True, default=_json_default) + "\n"


def _json_default(o):
    if isinstance(o, np.ndarray):
        return o.tolist()
    if isinstance(o, np.integer):
        return int(o)
    raise TypeError(type(o))


def _write_tensor(buf, name, arr):
    nb = name.encode("utf-8")
    arr = np.ascontiguousarray(arr, dtype="<f8")
    buf.write(struct.pack("<I", len(nb)))
    buf.write(nb)
    buf.write(struct.pack("<I", arr.ndim))
    buf.write(struct.pack(f"<{arr.ndim}Q", *arr.shape))
    buf.write(arr.tobytes())


def checkpoint_bytes(ck):
    buf = io.BytesIO()
    buf.write(MAGIC)
    buf.write(struct.pack("<I", ck.version))
    text = _header_text(ck).encode("utf-8")
    buf.write(struct.pack("<Q", len(text)))
    buf.write(text)
    records = [("param/" + k, v) for k, v in ck.params.items()]
    records += [("optim/" + k, v) for k, v in ck.optim.items()]
    buf.write(struct.pack("<I", len(records)))
    for name, arr in records:
        _write_tensor(buf, name, arr)
    body = buf.getvalue()
    return body + struct.pack("<I", zlib.crc32(body) & 0xFFFFFFFF)


def save_checkpoint(path, ck):
    Path(path).write_bytes(checkpoint_bytes(ck))


def parse_checkpoint(data):
    if len(data) < 12 or data[:4] != MAGIC:
        raise CheckpointError("not a checkpoint file (bad magic)")
    body, (crc,) = data[:-4], struct.unpack("<I", data[-4:])
    if zlib.crc32(body) & 0xFFFFFFFF != crc:
        raise CheckpointError("checkpoint checksum mismatch (truncated or corrupted)")
    pos = 4

    def take(n):
        nonlocal pos
        if pos + n > len(body):
            raise CheckpointError("truncated checkpoint")
        chunk = body[pos:pos + n]
        pos += n
        return chunk

    (version,) = struct.unpack("<I", take(4))
    if version != FORMAT_VERSION:
        raise CheckpointError(f"unsupported checkpoint version {version} (expected {FORMAT_VERSION})")
    (tlen,) = struct.unpack("<Q", take(8))
    text = take(tlen).decode("utf-8")
    cfg_lines, state = [], {}
    for line in text.splitlines():
        if line.startswith("#state "):
            state = json.loads(line[len("#state "):])
        else:
            cfg_lines.append(line)
    run = parse_run_config("\n".join(cfg_lines))
    (count,) = struct.unpack("<I", take(4))
    params, optim = {}, {}
    for _ in range(count):
        (nlen,) = struct.unpack("<I", take(4))
        name = take(nlen).decode("utf-8")
        (rank,) = struct.unpack("<I", take(4))
        shape = struct.unpack(f"<{rank}Q", take(8 * rank))
        size = int(np.prod(shape)) if rank else 1
        arr = np.frombuffer(take(8 * size), dtype="<f8").reshape(shape).astype(np.float64)
        kind, _, key = name.partition("/")
        (params if kind == "param" else optim)[key] = arr
    if pos != len(body):
        raise CheckpointError("trailing bytes after tensor records")
    rng_state = state.get("rng")
    return Checkpoint(run, params, optim, int(state.get("step", 0)), int(state.get("epoch", 0)),
                      _restore_rng_state(rng_state), version)


def _restore_rng_state(st):
    if st is None:
        return None
    st = dict(st)
    inner = dict(st["state"])
    inner = {k: np.array(v, dtype=np.uint64) for k, v in inner.items()}
    st["state"] = inner
    if "buffer" in st:
        st["buffer"] = np.array(st["buffer"], dtype=np.uint64)
    return st


def load_checkpoint(path):
    path = Path(path)
    if not path.is_file():
        raise CheckpointError(f"checkpoint not found: {path}")
    return parse_checkpoint(path.read_bytes())


def params_to_arrays(params):
    return {k: np.array(v.data, dtype=np.float64) for k, v in params.items()}
