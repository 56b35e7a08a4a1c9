"""The DeepAuto architecture: three horizontally stacked LSTM branches for
recent / periodic / seasonal lags, a feed-forward embedding of external
features, and a fused fully-connected network (hidden tanh layer, then a
sigmoid-per-horizon or softmax output). Also the training loop, the window-spec
grid search, and a versioned binary model container.
"""

from __future__ import annotations

import io
import json
import struct
import time
import zlib
from dataclasses import dataclass, field

import numpy as np

from . import dataprep, neuralnet as nn
from .dataprep import EXTERNAL_DIM, ScalerParams, WindowSpec
from .errors import ConfigError, ModelFormatError, ShapeError, TrainingDiverged

MAGIC = b"DAUT"
FORMAT_VERSION = 1


# ---------------------------------------------------------------------------
# configuration


@dataclass
class DeepAutoConfig:
    window: WindowSpec
    input_dim: int
    output_kind: str = "horizons"   # "horizons" | "pdf"
    horizons: tuple = (1, 15, 60)
    pdf_bins: int = 35
    use_external: bool = True
    hidden_r: int = 32
    hidden_p: int = 32
    hidden_s: int = 32
    ext_embed_dim: int = 16
    fusion_hidden: int = 32
    alpha: float = 4.0
    lr: float = 0.005
    batch_size: int = 1024
    max_epochs: int = 50
    patience: int = 5
    seed: int = 0
    target_channel: str = "load"

    def __post_init__(self):
        if isinstance(self.window, dict):
            self.window = WindowSpec.from_dict(self.window)
        self.horizons = tuple(int(h) for h in self.horizons)
        if self.output_kind not in ("horizons", "pdf"):
            raise ConfigError(f"unknown output kind {self.output_kind!r}")
        if self.input_dim <= 0 or self.ext_embed_dim <= 0 or self.fusion_hidden <= 0:
            raise ConfigError("dims must be positive")
        if min(self.hidden_r, self.hidden_p, self.hidden_s) <= 0:
            raise ConfigError("hidden sizes must be positive")
        if self.alpha < 0:
            raise ConfigError("alpha must be >= 0")
        if self.lr <= 0:
            raise ConfigError("lr must be positive")

    @property
    def out_dim(self):
        return len(self.horizons) if self.output_kind == "horizons" else self.pdf_bins

    @property
    def fusion_in_dim(self):
        dim = self.hidden_r
        if self.window.n_p > 0:
            dim += self.hidden_p
        if self.window.n_s > 0:
            dim += self.hidden_s
        if self.use_external:
            dim += self.ext_embed_dim
        return dim

    def to_dict(self):
        return {
            "window": self.window.to_dict(),
            "input_dim": self.input_dim,
            "output_kind": self.output_kind,
            "horizons": list(self.horizons),
            "pdf_bins": self.pdf_bins,
            "use_external": self.use_external,
            "hidden_r": self.hidden_r,
            "hidden_p": self.hidden_p,
            "hidden_s": self.hidden_s,
            "ext_embed_dim": self.ext_embed_dim,
            "fusion_hidden": self.fusion_hidden,
            "alpha": self.alpha,
            "lr": self.lr,
            "batch_size": self.batch_size,
            "max_epochs": self.max_epochs,
            "patience": self.patience,
            "seed": self.seed,
            "target_channel": self.target_channel,
        }

    @classmethod
    def from_dict(cls, d):
        d = dict(d)
        d["window"] = WindowSpec.from_dict(d["window"])
        d["horizons"] = tuple(d.get("horizons", (1, 15, 60)))
        return cls(**d)


# ---------------------------------------------------------------------------
# parameters


@dataclass
class DeepAutoParams:
    lstm_r: nn.LstmCellParams
    lstm_p: nn.LstmCellParams = None   # absent when n_p == 0
    lstm_s: nn.LstmCellParams = None   # absent when n_s == 0
    ext_net: list = field(default_factory=list)
    fusion_net: list = field(default_factory=list)  # hidden tanh + output layer

    @classmethod
    def init(cls, config, rng):
        window = config.window
        lstm_r = nn.LstmCellParams.init(config.input_dim, config.hidden_r, rng)
        lstm_p = (nn.LstmCellParams.init(config.input_dim, config.hidden_p, rng)
                  if window.n_p > 0 else None)
        lstm_s = (nn.LstmCellParams.init(config.input_dim, config.hidden_s, rng)
                  if window.n_s > 0 else None)
        ext_net = ([nn.DenseParams(W=np.zeros((config.ext_embed_dim, EXTERNAL_DIM)),
                                   b=np.zeros(config.ext_embed_dim), activation="tanh")]
                   if config.use_external else [])
        # the external embedding starts as a no-op (tanh(0) = 0) so adding it
        # never hurts early training; its weights learn in through the fusion
        # gradients
        head_act = "sigmoid" if config.output_kind == "horizons" else "softmax"
        fusion_net = [
            nn.DenseParams.init(config.fusion_in_dim, config.fusion_hidden, "tanh", rng),
            nn.DenseParams.init(config.fusion_hidden, config.out_dim, head_act, rng),
        ]
        return cls(lstm_r=lstm_r, lstm_p=lstm_p, lstm_s=lstm_s,
                   ext_net=ext_net, fusion_net=fusion_net)


def _none_safe_leaves(params):
    for name, arr in nn.param_leaves(params):
        yield name, arr


# ---------------------------------------------------------------------------
# batch assembly


def samples_to_arrays(samples, config):
    """Stack WindowedSamples into branch arrays; validates shapes."""
    if not samples:
        raise ShapeError("empty batch")
    w = config.window
    recent = np.stack([s.x_recent for s in samples])
    if recent.shape[1:] != (w.n_r, config.input_dim):
        raise ShapeError(f"recent window shape {recent.shape[1:]} does not match config")
    arrays = {"recent": recent}
    if w.n_p > 0:
        arrays["periodic"] = np.stack([s.x_periodic for s in samples])
        if arrays["periodic"].shape[1:] != (w.n_p, config.input_dim):
            raise ShapeError("periodic window shape does not match config")
    if w.n_s > 0:
        arrays["seasonal"] = np.stack([s.x_seasonal for s in samples])
        if arrays["seasonal"].shape[1:] != (w.n_s, config.input_dim):
            raise ShapeError("seasonal window shape does not match config")
    if config.use_external:
        arrays["external"] = np.stack([s.external for s in samples])
    if samples[0].target is not None:
        arrays["target"] = np.stack([s.target for s in samples])
    return arrays


# ---------------------------------------------------------------------------
# forward / backward


def forward_batch(arrays, params, config):
    """Run the full network on stacked inputs; returns (Yhat, caches)."""
    parts, caches = [], {}
    state, caches["recent"] = nn.lstm_forward_sequence(arrays["recent"], params.lstm_r)
    parts.append(state.h)
    if config.window.n_p > 0:
        state, caches["periodic"] = nn.lstm_forward_sequence(arrays["periodic"], params.lstm_p)
        parts.append(state.h)
    if config.window.n_s > 0:
        state, caches["seasonal"] = nn.lstm_forward_sequence(arrays["seasonal"], params.lstm_s)
        parts.append(state.h)
    if config.use_external:
        h = arrays["external"]
        ext_caches = []
        for layer in params.ext_net:
            h, cache = nn.dense_forward(h, layer)
            ext_caches.append(cache)
        caches["ext"] = ext_caches
        parts.append(h)
    fused = np.concatenate(parts, axis=1)
    fusion_caches = []
    h = fused
    for layer in params.fusion_net:
        h, cache = nn.dense_forward(h, layer)
        fusion_caches.append(cache)
    caches["fusion"] = fusion_caches
    caches["parts"] = [p.shape[1] for p in parts]
    return h, caches


def forward(sample, params, config):
    """Single-sample prediction; shares the batch code path (batch of 1)."""
    arrays = samples_to_arrays([sample], config)
    yhat, _ = forward_batch(arrays, params, config)
    return yhat[0]


def backward_batch(caches, d_yhat, params, config, skip_head_activation=False):
    """Gradients of a scalar loss given d(loss)/d(Yhat) (or d/d(logits) when
    `skip_head_activation`, used by the softmax+KL shortcut)."""
    grads = nn.GradientBundle()
    d = d_yhat
    for li in range(len(params.fusion_net) - 1, -1, -1):
        layer = params.fusion_net[li]
        cache = caches["fusion"][li]
        if li == len(params.fusion_net) - 1 and skip_head_activation:
            g_layer = nn.DenseParams(W=d.T @ cache["x"], b=np.sum(d, axis=0),
                                     activation=layer.activation)
            d = d @ layer.W
        else:
            g_layer, d = nn.dense_backward(cache, d, layer)
        grads.add(f"fusion_net[{li}].W", g_layer.W)
        grads.add(f"fusion_net[{li}].b", g_layer.b)
    d_fused = d

    # split fused gradient back into branch slices
    offsets = np.cumsum([0] + caches["parts"])
    slices = [d_fused[:, offsets[k]:offsets[k + 1]] for k in range(len(caches["parts"]))]
    idx = 0

    g, _, _, _ = nn.lstm_backward_sequence(caches["recent"], slices[idx], params.lstm_r)
    for name, arr in nn.param_leaves(g):
        grads.add(f"lstm_r.{name}", arr)
    idx += 1
    if config.window.n_p > 0:
        g, _, _, _ = nn.lstm_backward_sequence(caches["periodic"], slices[idx], params.lstm_p)
        for name, arr in nn.param_leaves(g):
            grads.add(f"lstm_p.{name}", arr)
        idx += 1
    if config.window.n_s > 0:
        g, _, _, _ = nn.lstm_backward_sequence(caches["seasonal"], slices[idx], params.lstm_s)
        for name, arr in nn.param_leaves(g):
            grads.add(f"lstm_s.{name}", arr)
        idx += 1
    if config.use_external:
        d = slices[idx]
        for li in range(len(params.ext_net) - 1, -1, -1):
            g_layer, d = nn.dense_backward(caches["ext"][li], d, params.ext_net[li])
            grads.add(f"ext_net[{li}].W", g_layer.W)
            grads.add(f"ext_net[{li}].b", g_layer.b)
    # drop gradient names for scalar metadata fields
    keep = {name for name, _ in nn.param_leaves(params)}
    grads.tensors = {k: v for k, v in grads.tensors.items() if k in keep}
    return grads


def loss_and_gradients(batch, params, config):
    """Loss (MMSE or mean KL) and full parameter gradients for one batch."""
    arrays = batch if isinstance(batch, dict) else samples_to_arrays(batch, config)
    if "target" not in arrays:
        raise ShapeError("batch has no targets")
    yhat, caches = forward_batch(arrays, params, config)
    Y = arrays["target"]
    if config.output_kind == "horizons":
        loss = nn.mmse_loss(Y, yhat, config.alpha)
        d_yhat = nn.mmse_gradient(Y, yhat, config.alpha)
        grads = backward_batch(caches, d_yhat, params, config)
    else:
        loss = nn.kl_loss(Y, yhat)
        d_logits = nn.kl_grad_logits(Y, yhat)
        grads = backward_batch(caches, d_logits, params, config, skip_head_activation=True)
    return loss, grads


def batch_loss(batch, params, config):
    arrays = batch if isinstance(batch, dict) else samples_to_arrays(batch, config)
    yhat, _ = forward_batch(arrays, params, config)
    Y = arrays["target"]
    if config.output_kind == "horizons":
        return nn.mmse_loss(Y, yhat, config.alpha)
    return nn.kl_loss(Y, yhat)


def predict_samples(samples, params, config):
    """Per-sample forward pass (batch of 1 each) so that streaming and batch
    prediction paths are bit-identical."""
    return np.stack([forward(s, params, config) for s in samples])


# ---------------------------------------------------------------------------
# training


@dataclass
class TrainReport:
    train_losses: list
    val_losses: list
    best_epoch: int
    best_val_loss: float
    wall_seconds: float
    config: dict
    test_metrics: dict = None

    def to_dict(self):
        return {
            "train_losses": self.train_losses,
            "val_losses": self.val_losses,
            "best_epoch": self.best_epoch,
            "best_val_loss": self.best_val_loss,
            "wall_seconds": self.wall_seconds,
            "config": self.config,
            "test_metrics": self.test_metrics,
        }


def train(train_samples, val_samples, config, params=None):
    """Mini-batch Adam with seeded shuffling and early stopping.

    Returns (best-validation parameters, TrainReport). Deterministic for a
    fixed seed, config, and dataset.
    """
    if not train_samples or not val_samples:
        raise ShapeError("train and val splits must be non-empty")
    t0 = time.monotonic()
    rng = np.random.default_rng(config.seed)
    if params is None:
        params = DeepAutoParams.init(config, rng)
    opt = nn.AdamState()
    val_arrays = samples_to_arrays(val_samples, config)

    best_val = float("inf")
    best_epoch = -1
    best_params = nn.clone_params(params)
    train_losses, val_losses = [], []
    n = len(train_samples)

    for epoch in range(config.max_epochs):
        order = rng.permutation(n)
        epoch_loss, n_batches = 0.0, 0
        for start in range(0, n, config.batch_size):
            batch = [train_samples[k] for k in order[start:start + config.batch_size]]
            loss, grads = loss_and_gradients(batch, params, config)
            if not np.isfinite(loss):
                raise TrainingDiverged(f"loss became {loss} at epoch {epoch}")
            nn.adam_step(params, grads, opt, config.lr)
            epoch_loss += loss
            n_batches += 1
        train_losses.append(epoch_loss / n_batches)
        val_loss = batch_loss(val_arrays, params, config)
        if not np.isfinite(val_loss):
            raise TrainingDiverged(f"validation loss became {val_loss} at epoch {epoch}")
        val_losses.append(val_loss)
        if val_loss < best_val:
            best_val = val_loss
            best_epoch = epoch
            best_params = nn.clone_params(params)
        elif epoch - best_epoch >= config.patience:
            break

    report = TrainReport(
        train_losses=[float(x) for x in train_losses],
        val_losses=[float(x) for x in val_losses],
        best_epoch=best_epoch,
        best_val_loss=float(best_val),
        wall_seconds=time.monotonic() - t0,
        config=config.to_dict(),
    )
    return best_params, report


# ---------------------------------------------------------------------------
# grid search


def grid_search(build_samples, candidates, base_config):
    """Train one model per (WindowSpec, use_external) candidate.

    `build_samples(config)` must return (train, val) sample lists for the
    candidate's config (windowing depends on the spec). Returns rows of
    {"window", "use_external", "val_metric", "error"}; the metric is the
    validation RMSE over all predicted horizons for load models and the
    validation KL for histogram models. Per-candidate failures are
    recorded, not raised.
    """
    if not candidates:
        raise ConfigError("grid needs at least one candidate")
    rows = []
    for spec, use_external in candidates:
        cfg_dict = base_config.to_dict()
        cfg_dict["window"] = spec.to_dict()
        cfg_dict["use_external"] = bool(use_external)
        config = DeepAutoConfig.from_dict(cfg_dict)
        row = {"window": spec.to_dict(), "use_external": bool(use_external)}
        try:
            train_s, val_s = build_samples(config)
            params, report = train(train_s, val_s, config)
            val_arrays = samples_to_arrays(val_s, config)
            yhat, _ = forward_batch(val_arrays, params, config)
            Y = val_arrays["target"]
            if config.output_kind == "horizons":
                row["val_metric"] = float(np.sqrt(np.mean((Y - yhat) ** 2)))
            else:
                row["val_metric"] = float(nn.kl_loss(Y, yhat))
            row["best_epoch"] = report.best_epoch
        except Exception as exc:  # keep the rest of the grid alive
            row["error"] = f"{type(exc).__name__}: {exc}"
        rows.append(row)
    return rows


# ---------------------------------------------------------------------------
# serialization


def _pack_str(buf, s):
    raw = s.encode("utf-8")
    buf.write(struct.pack("<I", len(raw)))
    buf.write(raw)


def _read_exact(fh, n, what):
    raw = fh.read(n)
    if len(raw) != n:
        raise ModelFormatError(f"truncated file while reading {what}")
    return raw


def _unpack_str(fh, what):
    (n,) = struct.unpack("<I", _read_exact(fh, 4, what))
    return _read_exact(fh, n, what).decode("utf-8")


def save(params, config, scaler):
    """Serialize (params, config, scaler) to a versioned binary blob.

    Layout: magic, u32 version, config JSON, scaler JSON, u32 tensor count,
    then per tensor (name, u32 ndim, u64 dims..., float64 LE data), and a
    trailing CRC32 of everything before it.
    """
    body = io.BytesIO()
    body.write(MAGIC)
    body.write(struct.pack("<I", FORMAT_VERSION))
    _pack_str(body, json.dumps(config.to_dict(), sort_keys=True, separators=(",", ":")))
    scaler_doc = scaler.to_dict() if scaler is not None else None
    _pack_str(body, json.dumps(scaler_doc, sort_keys=True, separators=(",", ":")))
    leaves = list(nn.param_leaves(params))
    body.write(struct.pack("<I", len(leaves)))
    for name, arr in leaves:
        _pack_str(body, name)
        body.write(struct.pack("<I", arr.ndim))
        for dim in arr.shape:
            body.write(struct.pack("<Q", dim))
        body.write(np.ascontiguousarray(arr, dtype="<f8").tobytes())
    payload = body.getvalue()
    return payload + struct.pack("<I", zlib.crc32(payload) & 0xFFFFFFFF)


def load(blob):
    """Inverse of save(); raises ModelFormatError on any corruption."""
    if len(blob) < len(MAGIC) + 8:
        raise ModelFormatError("file too short")
    payload, (crc,) = blob[:-4], struct.unpack("<I", blob[-4:])
    if zlib.crc32(payload) & 0xFFFFFFFF != crc:
        raise ModelFormatError("checksum mismatch")
    fh = io.BytesIO(payload)
    if _read_exact(fh, 4, "magic") != MAGIC:
        raise ModelFormatError("bad magic")
    (version,) = struct.unpack("<I", _read_exact(fh, 4, "version"))
    if version != FORMAT_VERSION:
        raise ModelFormatError(f"unsupported format version {version}")
    try:
        config = DeepAutoConfig.from_dict(json.loads(_unpack_str(fh, "config")))
        scaler_doc = json.loads(_unpack_str(fh, "scaler"))
    except (json.JSONDecodeError, KeyError, TypeError) as exc:
        raise ModelFormatError(f"bad embedded JSON: {exc}") from exc
    scaler = ScalerParams.from_dict(scaler_doc) if scaler_doc is not None else None

    (count,) = struct.unpack("<I", _read_exact(fh, 4, "tensor count"))
    tensors = {}
    for _ in range(count):
        name = _unpack_str(fh, "tensor name")
        (ndim,) = struct.unpack("<I", _read_exact(fh, 4, "ndim"))
        shape = tuple(struct.unpack("<Q", _read_exact(fh, 8, "dim"))[0] for _ in range(ndim))
        n = int(np.prod(shape)) if shape else 1
        data = np.frombuffer(_read_exact(fh, 8 * n, f"tensor {name}"), dtype="<f8")
        tensors[name] = data.reshape(shape).astype(np.float64)

    rng = np.random.default_rng(0)
    params = DeepAutoParams.init(config, rng)
    expected = dict(nn.param_leaves(params))
    if set(expected) != set(tensors):
        raise ModelFormatError("tensor names do not match the embedded config")
    for name, arr in tensors.items():
        if arr.shape != expected[name].shape:
            raise ModelFormatError(f"tensor {name} has shape {arr.shape}, expected {expected[name].shape}")
        nn.set_leaf(params, name, arr)
    return params, config, scaler


def save_file(path, params, config, scaler):
    with open(path, "wb") as fh:
        fh.write(save(params, config, scaler))


def load_file(path):
    with open(path, "rb") as fh:
        return load(fh.read())
