"""Denoiser and length predictor over viseme conditioning features.

Conditioning is a deterministic featureization of the frame sequence:
consecutive frame pairs are one-hot encoded and concatenated (window 2,
stride 2, zero-padded odd tail), halving the temporal rate the way a
strided front end would.  Each model applies its own trainable projection
on top, so the two can be trained independently.

Checkpoints are a plain-text manifest (hyperparameters, then one line per
tensor with name/shape/byte-offset) followed by a little-endian float32
payload; round trips are bit-exact.
"""

from __future__ import annotations

import io
from dataclasses import dataclass, fields

import numpy as np

from .canvas import Canvas
from .nncore import (
    ConfigError,
    ModelParams,
    Tensor,
    add,
    concat0,
    layer_norm,
    matmul,
    no_grad,
    softmax,
    take_rows,
    transformer_block_forward,
    transformer_block_shapes,
)
from .nncore.transformer import init_transformer_block
from .rng import substream
from .synthdata import N_VISEME_CLASSES, VisemeClip

COND_WINDOW = 2  # frames per feature row; also the stride


@dataclass
class CondSequence:
    """Frame-pair features: (ceil(n_frames / 2), 2 * n_classes) float32."""

    features: np.ndarray
    n_frames: int

    @property
    def length(self) -> int:
        return int(self.features.shape[0])

    @property
    def duration(self) -> float:
        from .synthdata import FRAME_RATE

        return self.n_frames / FRAME_RATE


def encode_clip(clip: VisemeClip, n_classes: int = N_VISEME_CLASSES) -> CondSequence:
    """One-hot each frame, concatenate non-overlapping pairs."""
    frames = np.asarray(clip.frames, dtype=np.int64)
    n = frames.shape[0]
    if n == 0:
        raise ValueError("cannot encode an empty clip")
    if frames.min() < 0 or frames.max() >= n_classes:
        raise ValueError(f"viseme class outside [0, {n_classes})")
    onehot = np.zeros((n + n % COND_WINDOW, n_classes), dtype=np.float32)
    onehot[np.arange(n), frames] = 1.0  # odd tail row stays all-zero
    feats = onehot.reshape(-1, COND_WINDOW * n_classes)
    return CondSequence(features=feats, n_frames=n)


# ---------------------------------------------------------------------------
# denoiser
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class DenoiserConfig:
    canvas_len: int = 32
    vocab: int = 30
    d_model: int = 128
    n_blocks: int = 2
    n_heads: int = 4
    ff: int = 512
    feat_dim: int = 2 * N_VISEME_CLASSES
    max_cond_len: int = 64

    def __post_init__(self):
        if self.d_model % self.n_heads:
            raise ConfigError(f"d_model {self.d_model} not divisible by {self.n_heads} heads")


def denoiser_shapes(cfg: DenoiserConfig) -> dict:
    shapes = {
        "tok_emb": (cfg.vocab, cfg.d_model),
        "pos_emb": (cfg.canvas_len, cfg.d_model),
        "cond_proj.w": (cfg.feat_dim, cfg.d_model),
        "cond_proj.b": (cfg.d_model,),
        "cond_pos_emb": (cfg.max_cond_len, cfg.d_model),
    }
    for i in range(cfg.n_blocks):
        shapes.update(transformer_block_shapes(f"block{i}.", cfg.d_model, cfg.ff, cross=True))
    shapes.update({
        "ln_out.g": (cfg.d_model,),
        "ln_out.b": (cfg.d_model,),
        "head.w": (cfg.d_model, cfg.vocab),
        "head.b": (cfg.vocab,),
    })
    return shapes


def _cfg_to_meta(kind: str, cfg) -> dict[str, str]:
    meta = {"kind": kind}
    for f in fields(cfg):
        meta[f.name] = str(getattr(cfg, f.name))
    return meta


def _cfg_from_meta(meta: dict[str, str], cls):
    kwargs = {}
    for f in cls.__dataclass_fields__.values():
        if f.name not in meta:
            raise CheckpointManifestError(f"checkpoint meta missing {f.name!r}")
        raw = meta[f.name]
        kwargs[f.name] = float(raw) if f.type == "float" else int(raw)
    return cls(**kwargs)


def init_denoiser(cfg: DenoiserConfig, seed: int, dtype=np.float32) -> ModelParams:
    params = ModelParams(dtype)
    rng = substream(seed, "init-denoiser")
    for name, shape in denoiser_shapes(cfg).items():
        if name.endswith(".b"):
            arr = np.zeros(shape)
        elif name.endswith(".g"):
            arr = np.ones(shape)
        else:
            arr = rng.normal(0.0, 0.02, size=shape)
        params.add(name, arr.astype(dtype))
    params.meta = _cfg_to_meta("denoiser", cfg)
    params.meta["trained_stage"] = "0"
    return params


def denoiser_config(params: ModelParams) -> DenoiserConfig:
    return _cfg_from_meta(params.meta, DenoiserConfig)


def denoiser_forward(params: ModelParams, noisy: Canvas, cond: CondSequence) -> Tensor:
    """Logits for every canvas cell, committed ones included.

    Bidirectional throughout: a change at any cell (PAD cells beyond the
    EOS included) can influence every other cell's logits.
    """
    cfg = denoiser_config(params)
    if noisy.length != cfg.canvas_len:
        raise ConfigError(f"canvas length {noisy.length} != configured {cfg.canvas_len}")
    if cond.length > cfg.max_cond_len:
        raise ConfigError(f"conditioning length {cond.length} exceeds {cfg.max_cond_len}")
    feats = Tensor(cond.features.astype(params.dtype, copy=False))
    c = add(matmul(feats, params["cond_proj.w"]), params["cond_proj.b"])
    c = add(c, take_rows(params["cond_pos_emb"], np.arange(cond.length)))
    x = add(take_rows(params["tok_emb"], noisy.ids), params["pos_emb"])
    for i in range(cfg.n_blocks):
        x = transformer_block_forward(params, f"block{i}.", x, c, cfg.n_heads)
    x = layer_norm(x, params["ln_out.g"], params["ln_out.b"])
    return add(matmul(x, params["head.w"]), params["head.b"])


def denoiser_probs(params: ModelParams, noisy: Canvas, cond: CondSequence) -> np.ndarray:
    """Per-cell posterior over tokens, tape-free (decode path)."""
    with no_grad():
        return softmax(denoiser_forward(params, noisy, cond)).data


# ---------------------------------------------------------------------------
# length predictor
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class LengthPredictorConfig:
    k_max: int = 31
    d_model: int = 384
    n_blocks: int = 2
    n_heads: int = 6
    ff: int = 1536
    dropout: float = 0.1
    feat_dim: int = 2 * N_VISEME_CLASSES
    max_cond_len: int = 64

    def __post_init__(self):
        if self.d_model % self.n_heads:
            raise ConfigError(f"d_model {self.d_model} not divisible by {self.n_heads} heads")


def length_predictor_shapes(cfg: LengthPredictorConfig) -> dict:
    shapes = {
        "len_query": (1, cfg.d_model),
        "in_proj.w": (cfg.feat_dim, cfg.d_model),
        "in_proj.b": (cfg.d_model,),
        "pos_emb": (cfg.max_cond_len + 1, cfg.d_model),  # +1 for the query slot
    }
    for i in range(cfg.n_blocks):
        shapes.update(transformer_block_shapes(f"block{i}.", cfg.d_model, cfg.ff, cross=False))
    shapes.update({
        "ln_out.g": (cfg.d_model,),
        "ln_out.b": (cfg.d_model,),
        "head.w": (cfg.d_model, cfg.k_max),
        "head.b": (cfg.k_max,),
    })
    return shapes


def init_length_predictor(cfg: LengthPredictorConfig, seed: int, dtype=np.float32) -> ModelParams:
    params = ModelParams(dtype)
    rng = substream(seed, "init-length-predictor")
    for name, shape in length_predictor_shapes(cfg).items():
        if name.endswith(".b"):
            arr = np.zeros(shape)
        elif name.endswith(".g"):
            arr = np.ones(shape)
        else:
            arr = rng.normal(0.0, 0.02, size=shape)
        params.add(name, arr.astype(dtype))
    params.meta = _cfg_to_meta("length_predictor", cfg)
    return params


def length_predictor_config(params: ModelParams) -> LengthPredictorConfig:
    return _cfg_from_meta(params.meta, LengthPredictorConfig)


@dataclass
class LengthPosterior:
    """P(K = k) for k = 1..k_max; probs[i] is the mass at k = i + 1."""

    probs: np.ndarray

    @property
    def k_max(self) -> int:
        return int(self.probs.shape[0])

    @property
    def k_pred(self) -> int:
        # argmax breaks ties toward the smaller length
        return int(np.argmax(self.probs)) + 1

    def p_of(self, k: int) -> float:
        if not 1 <= k <= self.k_max:
            return 0.0
        return float(self.probs[k - 1])


def length_logits(params: ModelParams, cond: CondSequence, train: bool = False,
                  rng: np.random.Generator | None = None) -> Tensor:
    """Class logits over lengths 1..k_max, read from the query slot.

    The conditioning length is exact by construction (no padding frames and
    no masking path), so pooling via the prepended query token sees only
    real frames.
    """
    cfg = length_predictor_config(params)
    if cond.length > cfg.max_cond_len:
        raise ConfigError(f"conditioning length {cond.length} exceeds {cfg.max_cond_len}")
    p = cfg.dropout if train else 0.0
    if train and rng is None:
        raise ConfigError("train-mode length predictor needs an rng for dropout")
    feats = Tensor(cond.features.astype(params.dtype, copy=False))
    x = add(matmul(feats, params["in_proj.w"]), params["in_proj.b"])
    x = concat0(params["len_query"], x)
    x = add(x, take_rows(params["pos_emb"], np.arange(cond.length + 1)))
    for i in range(cfg.n_blocks):
        x = transformer_block_forward(params, f"block{i}.", x, None, cfg.n_heads,
                                      dropout_p=p, rng=rng)
    x = layer_norm(x, params["ln_out.g"], params["ln_out.b"])
    logits = add(matmul(x, params["head.w"]), params["head.b"])
    return take_rows(logits, np.array([0]))  # query slot only


def length_forward(params: ModelParams, cond: CondSequence) -> LengthPosterior:
    """Inference-mode posterior over transcript lengths."""
    with no_grad():
        logits = length_logits(params, cond, train=False)
        probs = softmax(logits).data[0]
    return LengthPosterior(probs=probs.astype(np.float64))


# ---------------------------------------------------------------------------
# checkpoints
# ---------------------------------------------------------------------------

_MAGIC = "visemedec-ckpt v1"


class CheckpointError(Exception):
    pass


class CheckpointManifestError(CheckpointError):
    pass


class CheckpointShapeError(CheckpointError):
    pass


class CheckpointPayloadError(CheckpointError):
    pass


def save_checkpoint(params: ModelParams, path: str) -> None:
    """Text manifest + raw little-endian float32 tensor payload."""
    header = io.StringIO()
    header.write(_MAGIC + "\n")
    for key, val in params.meta.items():
        header.write(f"meta {key} {val}\n")
    offset = 0
    chunks = []
    for name, t in params.items():
        arr = np.ascontiguousarray(t.data, dtype="<f4")
        shape = ",".join(str(s) for s in t.shape)
        header.write(f"tensor {name} {shape} {offset}\n")
        chunks.append(arr.tobytes())
        offset += len(chunks[-1])
    header.write(f"payload {offset}\n")
    header.write("end\n")
    with open(path, "wb") as f:
        f.write(header.getvalue().encode("ascii"))
        for c in chunks:
            f.write(c)


def _parse_manifest(blob: bytes, path: str):
    marker = b"\nend\n"
    cut = blob.find(marker)
    if not blob.startswith(_MAGIC.encode("ascii")) or cut < 0:
        raise CheckpointManifestError(f"{path}: not a recognizable checkpoint")
    text = blob[:cut].decode("ascii")
    payload = blob[cut + len(marker):]
    meta: dict[str, str] = {}
    entries: list[tuple[str, tuple, int]] = []
    declared = None
    for line in text.splitlines()[1:]:
        kind, _, rest = line.partition(" ")
        if kind == "meta":
            key, _, val = rest.partition(" ")
            meta[key] = val
        elif kind == "tensor":
            try:
                name, shape_s, off_s = rest.rsplit(" ", 2)
                shape = tuple(int(v) for v in shape_s.split(","))
                entries.append((name, shape, int(off_s)))
            except ValueError:
                raise CheckpointManifestError(f"{path}: bad tensor line {line!r}") from None
        elif kind == "payload":
            declared = int(rest)
        else:
            raise CheckpointManifestError(f"{path}: unknown manifest line {line!r}")
    if declared is None:
        raise CheckpointManifestError(f"{path}: manifest missing payload size")
    if len(payload) != declared:
        raise CheckpointPayloadError(
            f"{path}: payload is {len(payload)} bytes, manifest declares {declared}")
    return meta, entries, payload


_SCHEMAS = {
    "denoiser": (DenoiserConfig, denoiser_shapes),
    "length_predictor": (LengthPredictorConfig, length_predictor_shapes),
}


def load_checkpoint(path: str) -> ModelParams:
    """Rebuild params, verifying names and shapes against the declared config."""
    with open(path, "rb") as f:
        blob = f.read()
    meta, entries, payload = _parse_manifest(blob, path)
    kind = meta.get("kind")
    if kind not in _SCHEMAS:
        raise CheckpointManifestError(f"{path}: unknown model kind {meta.get('kind')!r}")
    cfg_cls, shapes_fn = _SCHEMAS[kind]
    expected = shapes_fn(_cfg_from_meta(meta, cfg_cls))
    seen = {name for name, _, _ in entries}
    missing = set(expected) - seen
    if missing:
        raise CheckpointManifestError(f"{path}: missing tensors {sorted(missing)}")
    params = ModelParams(np.float32)
    for name, shape, offset in entries:
        if name not in expected:
            raise CheckpointManifestError(f"{path}: unexpected tensor {name!r}")
        if shape != expected[name]:
            raise CheckpointShapeError(
                f"{path}: tensor {name!r} has shape {shape}, expected {expected[name]}")
        n_bytes = 4 * int(np.prod(shape, dtype=np.int64)) if shape else 4
        if offset < 0 or offset + n_bytes > len(payload):
            raise CheckpointPayloadError(f"{path}: tensor {name!r} overruns the payload")
        arr = np.frombuffer(payload, dtype="<f4", count=n_bytes // 4, offset=offset)
        params.add(name, arr.reshape(shape).copy())
    params.meta = meta
    return params


def count_params(params: ModelParams) -> int:
    return params.n_params()
