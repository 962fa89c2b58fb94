"""Heterogeneous transformer mapping (B, C) to per-device active probabilities.

Layout conventions
------------------
* A batch of ``S`` instances with ``N`` devices is processed at once.  The
  embedding set of a layer is a tensor of shape ``(S, N + 1, d)``: rows
  ``0..N-1`` are the device-pilot components and row ``N`` is the
  received-signal component.
* Weight matrices keep the column-vector convention ``y = W x``; with row
  vectors that is ``X @ W.T``.
* Per-head projections ``W_t`` (``d' x d``) are stacked along the output
  axis before use, and the head merge ``sum_t W_o_t x'_t`` is the product with
  the column-concatenation ``[W_o_1 ... W_o_T]``.

Device components always use the ``B`` parameter set and the last component
the ``Y`` set.  Batch normalisation pools statistics over all device
components of the batch (one statistic set shared by every device index) and
keeps a separate set for the received-signal component, so the network stays
permutation equivariant and independent of ``N`` at inference time.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass, fields
from typing import Optional

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .errors import DimensionError, ParameterError, StateError
from .signal import derive_rng

MASK_VALUE = -1e30
SIDES = ("B", "Y")


@dataclass
class HTConfig:
    layers: int = 5
    d_model: int = 128
    d_attn: int = 32
    heads: int = 8
    d_ff: int = 512
    c_clip: float = 10.0
    attend_self: bool = True
    bn_momentum: float = 0.1
    bn_eps: float = 1e-5

    def __post_init__(self):
        for name in ("layers", "d_model", "d_attn", "heads", "d_ff"):
            value = getattr(self, name)
            if int(value) != value or value < 1:
                raise ParameterError(f"HTConfig.{name} must be a positive integer, got {value}")
            setattr(self, name, int(value))
        if not self.c_clip > 0:
            raise ParameterError(f"HTConfig.c_clip must be positive, got {self.c_clip}")
        if not 0 < self.bn_momentum <= 1:
            raise ParameterError(f"bn_momentum must lie in (0, 1], got {self.bn_momentum}")

    @classmethod
    def desk(cls) -> "HTConfig":
        """Small model used for desk-scale experiments."""
        return cls(layers=2, d_model=32, d_attn=8, heads=4, d_ff=64)

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, values: dict) -> "HTConfig":
        known = {f.name for f in fields(cls)}
        return cls(**{k: v for k, v in values.items() if k in known})


def parameter_shapes(config: HTConfig, pilot_len: int) -> dict:
    """Name -> shape of every learnable tensor, in creation order."""
    d, dp, df, T = config.d_model, config.d_attn, config.d_ff, config.heads
    shapes = {
        "embed.B.W": (d, 2 * pilot_len),
        "embed.B.b": (d,),
        "embed.Y.W": (d, 2 * pilot_len**2),
        "embed.Y.b": (d,),
    }
    for l in range(config.layers):
        for side in SIDES:
            for kind in ("q", "k", "v"):
                for t in range(T):
                    shapes[f"enc.{l}.mha.{side}.{kind}.{t}"] = (dp, d)
            for t in range(T):
                shapes[f"enc.{l}.mha.{side}.o.{t}"] = (d, dp)
            shapes[f"enc.{l}.ff.{side}.W1"] = (df, d)
            shapes[f"enc.{l}.ff.{side}.b1"] = (df,)
            shapes[f"enc.{l}.ff.{side}.W2"] = (d, df)
            shapes[f"enc.{l}.ff.{side}.b2"] = (d,)
            for bn in ("bn1", "bn2"):
                shapes[f"enc.{l}.{bn}.{side}.w"] = (d,)
                shapes[f"enc.{l}.{bn}.{side}.b"] = (d,)
    for t in range(T):
        shapes[f"dec.q.{t}"] = (dp, d)
    for side in SIDES:
        for kind in ("k", "v"):
            for t in range(T):
                shapes[f"dec.{kind}.{side}.{t}"] = (dp, d)
    for t in range(T):
        shapes[f"dec.o.{t}"] = (d, dp)
    shapes["dec.out.W"] = (d, d)
    return shapes


def buffer_names(config: HTConfig) -> list:
    return [f"enc.{l}.{bn}.{side}.{stat}"
            for l in range(config.layers) for bn in ("bn1", "bn2")
            for side in SIDES for stat in ("running_mean", "running_var")]


class HTParams:
    """Learnable tensors plus batch-norm running statistics of one model."""

    def __init__(self, config: HTConfig, pilot_len: int, tensors: dict, buffers: dict, bn_updates: int = 0):
        self.config = config
        self.pilot_len = int(pilot_len)
        self.tensors = tensors
        self.buffers = buffers
        self.bn_updates = int(bn_updates)
        expected = parameter_shapes(config, pilot_len)
        for name, shape in expected.items():
            if name not in tensors:
                raise ParameterError(f"missing parameter '{name}'")
            if tensors[name].shape != shape:
                raise ParameterError(f"parameter '{name}' has shape {tensors[name].shape}, expected {shape}")

    @classmethod
    def initialize(cls, config: HTConfig, pilot_len: int, seed: int = 0) -> "HTParams":
        """Fan-in uniform init for weights and biases; BN scale 1, shift 0."""
        rng = derive_rng(seed, 11)
        tensors = {}
        for name, shape in parameter_shapes(config, pilot_len).items():
            if ".bn" in name:
                data = np.ones(shape) if name.endswith(".w") else np.zeros(shape)
            else:
                fan_in = shape[1] if len(shape) == 2 else _bias_fan_in(name, config, pilot_len)
                bound = 1.0 / np.sqrt(fan_in)
                data = rng.uniform(-bound, bound, size=shape)
            tensors[name] = Tensor(data, requires_grad=True, name=name)
        buffers = {}
        for name in buffer_names(config):
            buffers[name] = np.ones(config.d_model) if name.endswith("var") else np.zeros(config.d_model)
        return cls(config, pilot_len, tensors, buffers)

    def parameters(self) -> list:
        return list(self.tensors.values())

    def count(self) -> int:
        return int(sum(t.size for t in self.tensors.values()))

    def __getitem__(self, name: str) -> Tensor:
        return self.tensors[name]

    def stacked(self, prefix: str, count: int, axis: int) -> Tensor:
        return ad.concat([self.tensors[f"{prefix}.{t}"] for t in range(count)], axis=axis)

    def copy(self) -> "HTParams":
        tensors = {k: Tensor(v.data.copy(), requires_grad=True, name=k) for k, v in self.tensors.items()}
        buffers = {k: v.copy() for k, v in self.buffers.items()}
        return HTParams(self.config, self.pilot_len, tensors, buffers, self.bn_updates)


def _bias_fan_in(name: str, config: HTConfig, pilot_len: int) -> int:
    if name == "embed.B.b":
        return 2 * pilot_len
    if name == "embed.Y.b":
        return 2 * pilot_len**2
    if name.endswith(".b1"):
        return config.d_model
    if name.endswith(".b2"):
        return config.d_ff
    raise ParameterError(f"no fan-in rule for '{name}'")


# ---------------------------------------------------------------- input features


def normalize_inputs(B, C):
    """Rescale so the scaled pilots have unit mean entry power: (B / rho, C / rho^2).

    ``rho^2`` is the mean of ``|B_ln|^2`` per instance.  The detection problem
    is invariant to this joint scaling, and it keeps every feature O(1)
    regardless of the physical power level.
    """
    B = np.asarray(B)
    C = np.asarray(C)
    power = np.mean(np.abs(B) ** 2, axis=(-2, -1), keepdims=True)
    power = np.where(power > 0, power, 1.0)
    return B / np.sqrt(power), C / power


def embed_features(B, C):
    """Real-valued input features.

    Device ``n`` gets ``[Re b_n; Im b_n]`` (length ``2 Lp``); the received
    signal gets ``[Re vec(C); Im vec(C)]`` (length ``2 Lp^2``) with
    column-major ``vec``.  Accepts single instances or stacks with a leading
    batch axis; returns ``(device_features, signal_features)``.
    """
    B = np.asarray(B)
    C = np.asarray(C)
    single = B.ndim == 2
    if single:
        B, C = B[None], C[None]
    S, lp, n = B.shape
    if C.shape != (S, lp, lp):
        raise DimensionError(f"C has shape {C.shape[1:]}, expected ({lp}, {lp}) to match B {B.shape[1:]}")
    dev = np.concatenate([B.real, B.imag], axis=1).transpose(0, 2, 1)  # (S, N, 2Lp)
    vec = C.transpose(0, 2, 1).reshape(S, lp * lp)  # column-major vec
    sig = np.concatenate([vec.real, vec.imag], axis=1)  # (S, 2Lp^2)
    if single:
        return dev[0], sig[0]
    return dev, sig


# ---------------------------------------------------------------- building blocks


def _linear(X: Tensor, W: Tensor) -> Tensor:
    """(S, n, din) @ W.T -> (S, n, dout)."""
    S, n, din = X.shape
    if W.shape[1] != din:
        raise DimensionError(f"linear: weight {W.shape} does not accept inputs of width {din}")
    flat = ad.matmul(ad.reshape(X, (S * n, din)), ad.transpose(W))
    return ad.reshape(flat, (S, n, W.shape[0]))


def _add_bias(X: Tensor, b: Tensor) -> Tensor:
    return ad.add(X, ad.broadcast_to(b, X.shape))


def _split(X: Tensor):
    n = X.shape[1] - 1
    return ad.take(X, np.s_[:, :n, :]), ad.take(X, np.s_[:, n:, :])


def _heads(X: Tensor, T: int) -> Tensor:
    """(S, n, T*d') -> (S*T, n, d')."""
    S, n, width = X.shape
    dp = width // T
    return ad.reshape(ad.permute(ad.reshape(X, (S, n, T, dp)), (0, 2, 1, 3)), (S * T, n, dp))


def _merge_heads(X: Tensor, S: int, T: int) -> Tensor:
    """(S*T, n, d') -> (S, n, T*d')."""
    _, n, dp = X.shape
    return ad.reshape(ad.permute(ad.reshape(X, (S, T, n, dp)), (0, 2, 1, 3)), (S, n, T * dp))


def _attend(Q: Tensor, K: Tensor, V: Tensor, d_attn: int, mask=None):
    """Scaled dot-product attention on (S*T, ., d') stacks; returns values and weights."""
    scores = ad.bmm(ad.scale(Q, 1.0 / np.sqrt(d_attn)), ad.permute(K, (0, 2, 1)))
    if mask is not None:
        scores = ad.add(scores, Tensor(np.broadcast_to(mask, scores.shape)))
    weights = ad.softmax_rows(scores)
    return ad.bmm(weights, V), weights


def _hetero_project(Xd: Tensor, Xy: Tensor, Wb: Tensor, Wy: Tensor) -> Tensor:
    return ad.concat([_linear(Xd, Wb), _linear(Xy, Wy)], axis=1)


def _batch_norm(X: Tensor, params: HTParams, key: str, mode: str, update_stats: bool) -> Tensor:
    cfg = params.config
    S, n, d = X.shape
    flat = ad.reshape(X, (S * n, d))
    if mode == "train":
        mu = ad.mean(flat, axis=0, keepdims=True)
        centered = ad.sub(flat, ad.broadcast_to(mu, flat.shape))
        var = ad.mean(ad.mul(centered, centered), axis=0, keepdims=True)
        std = ad.sqrt(ad.shift(var, cfg.bn_eps))
        normed = ad.div(centered, ad.broadcast_to(std, flat.shape))
        if update_stats:
            m = cfg.bn_momentum
            rm, rv = f"{key}.running_mean", f"{key}.running_var"
            params.buffers[rm] = (1 - m) * params.buffers[rm] + m * mu.data[0]
            params.buffers[rv] = (1 - m) * params.buffers[rv] + m * var.data[0]
    else:
        rm = params.buffers[f"{key}.running_mean"]
        rv = params.buffers[f"{key}.running_var"]
        inv = 1.0 / np.sqrt(rv + cfg.bn_eps)
        normed = ad.mul(ad.sub(flat, Tensor(np.broadcast_to(rm, flat.shape))),
                        Tensor(np.broadcast_to(inv, flat.shape)))
    out = ad.add(ad.mul(normed, ad.broadcast_to(params[f"{key}.w"], flat.shape)),
                 ad.broadcast_to(params[f"{key}.b"], flat.shape))
    return ad.reshape(out, (S, n, d))


def _hetero_bn(Xd, Xy, params, key, mode, update_stats):
    return ad.concat([_batch_norm(Xd, params, f"{key}.B", mode, update_stats),
                      _batch_norm(Xy, params, f"{key}.Y", mode, update_stats)], axis=1)


def _self_mask(n_components: int) -> np.ndarray:
    return np.where(np.eye(n_components, dtype=bool), MASK_VALUE, 0.0)


# ---------------------------------------------------------------- layers


def initial_embedding(features, params: HTParams) -> Tensor:
    """Linear projections of the input features -> layer-0 embeddings (S, N+1, d)."""
    dev, sig = features
    dev = np.asarray(dev, dtype=float)
    sig = np.asarray(sig, dtype=float)
    if dev.ndim == 2:
        dev, sig = dev[None], sig[None]
    lp = params.pilot_len
    if dev.shape[2] != 2 * lp or sig.shape[1] != 2 * lp * lp:
        raise ParameterError(
            f"feature widths ({dev.shape[2]}, {sig.shape[1]}) do not match a model built for Lp={lp}")
    xd = _add_bias(_linear(Tensor(dev), params["embed.B.W"]), params["embed.B.b"])
    xy = _add_bias(_linear(Tensor(sig[:, None, :]), params["embed.Y.W"]), params["embed.Y.b"])
    return ad.concat([xd, xy], axis=1)


def encoder_layer(l: int, X: Tensor, params: HTParams, mode: str = "inference",
                  update_stats: bool = True, attention: Optional[list] = None) -> Tensor:
    """Heterogeneous MHA + skip + BN, then heterogeneous FF + skip + BN.

    If ``attention`` is a list, the (S*T, N+1, N+1) weight tensor is appended to it.
    """
    cfg = params.config
    T, dp = cfg.heads, cfg.d_attn
    S, n1, _ = X.shape
    Xd, Xy = _split(X)
    pre = f"enc.{l}.mha"
    Q, K, V = (
        _heads(_hetero_project(Xd, Xy, params.stacked(f"{pre}.B.{k}", T, 0),
                               params.stacked(f"{pre}.Y.{k}", T, 0)), T)
        for k in ("q", "k", "v")
    )
    mask = None if cfg.attend_self else _self_mask(n1)
    values, weights = _attend(Q, K, V, dp, mask)
    if attention is not None:
        attention.append(weights.data)
    merged = _merge_heads(values, S, T)
    md, my = _split(merged)
    mha = _hetero_project(md, my, params.stacked(f"{pre}.B.o", T, 1), params.stacked(f"{pre}.Y.o", T, 1))
    hd, hy = _split(ad.add(X, mha))
    H = _hetero_bn(hd, hy, params, f"enc.{l}.bn1", mode, update_stats)

    hd, hy = _split(H)
    ff = []
    for part, side in ((hd, "B"), (hy, "Y")):
        p = f"enc.{l}.ff.{side}"
        hidden = ad.relu(_add_bias(_linear(part, params[f"{p}.W1"]), params[f"{p}.b1"]))
        ff.append(_add_bias(_linear(hidden, params[f"{p}.W2"]), params[f"{p}.b2"]))
    od, oy = _split(ad.add(H, ad.concat(ff, axis=1)))
    return _hetero_bn(od, oy, params, f"enc.{l}.bn2", mode, update_stats)


def context_vector(X: Tensor, params: HTParams, attention: Optional[list] = None) -> Tensor:
    """Decoder MHA queried only by the received-signal component -> (S, 1, d)."""
    cfg = params.config
    T, dp = cfg.heads, cfg.d_attn
    S = X.shape[0]
    Xd, Xy = _split(X)
    q = _heads(_linear(Xy, params.stacked("dec.q", T, 0)), T)  # (S*T, 1, d')
    K = _heads(_hetero_project(Xd, Xy, params.stacked("dec.k.B", T, 0), params.stacked("dec.k.Y", T, 0)), T)
    V = _heads(_hetero_project(Xd, Xy, params.stacked("dec.v.B", T, 0), params.stacked("dec.v.Y", T, 0)), T)
    values, weights = _attend(q, K, V, dp)
    if attention is not None:
        attention.append(weights.data)
    return _linear(_merge_heads(values, S, T), params.stacked("dec.o", T, 1))


def decode(X: Tensor, params: HTParams, attention: Optional[list] = None) -> Tensor:
    """Context attention, then P_n = sigmoid(C tanh(x_c^T W_out x_n / sqrt(d))) -> (S, N)."""
    cfg = params.config
    S, n1, d = X.shape
    xc = context_vector(X, params, attention)  # (S, 1, d)
    Xd, _ = _split(X)
    u = ad.matmul(ad.reshape(xc, (S, d)), params["dec.out.W"])  # rows are (W_out^T x_c)^T
    scores = ad.reshape(ad.bmm(Xd, ad.reshape(u, (S, d, 1))), (S, n1 - 1))
    logits = ad.scale(ad.tanh(ad.scale(scores, 1.0 / np.sqrt(d))), cfg.c_clip)
    return ad.sigmoid(logits)


def forward(B, C, params: HTParams, mode: str = "inference", update_stats: bool = True,
            attention: Optional[list] = None, normalize: bool = True) -> Tensor:
    """Active probabilities for one instance ``(Lp, N)`` or a stack ``(S, Lp, N)``.

    ``mode`` is ``"train"`` (batch statistics, running averages updated unless
    ``update_stats`` is False) or ``"inference"`` (frozen running statistics).
    Inputs pass through :func:`normalize_inputs` unless ``normalize`` is False.
    The returned tensor has shape ``(S, N)``, or ``(N,)`` for a single instance.
    """
    if mode not in ("train", "inference"):
        raise ParameterError(f"mode must be 'train' or 'inference', got '{mode}'")
    if mode == "inference" and params.bn_updates == 0:
        raise StateError("inference needs batch-norm statistics; train (or calibrate) the model first")
    B = np.asarray(B)
    C = np.asarray(C)
    single = B.ndim == 2
    if single:
        B, C = B[None], C[None]
    if B.shape[1] != params.pilot_len:
        raise DimensionError(f"pilot length {B.shape[1]} does not match model Lp={params.pilot_len}")
    if normalize:
        B, C = normalize_inputs(B, C)
    X = initial_embedding(embed_features(B, C), params)
    for l in range(params.config.layers):
        X = encoder_layer(l, X, params, mode, update_stats, attention)
    P = decode(X, params, attention)
    if mode == "train" and update_stats:
        params.bn_updates += 1
    return ad.reshape(P, (P.shape[1],)) if single else P


# Attention maps of one inference chunk are kept near 2 MiB of float64 (a typical
# L2 size); larger chunks spill out of cache and run slower per sample.
ATTENTION_BUDGET = 1 << 18
MAX_CHUNK = 64


def auto_chunk(n_devices: int, heads: int) -> int:
    """Samples per inference chunk so that ``chunk * heads * (N+1)^2`` stays within budget."""
    return max(1, min(MAX_CHUNK, ATTENTION_BUDGET // (heads * (n_devices + 1) ** 2)))


def predict(B, C, params: HTParams, chunk: Optional[int] = None) -> np.ndarray:
    """Inference-mode probabilities as a numpy array, processed in chunks.

    ``chunk=None`` picks the chunk size from the device count (see ``auto_chunk``).
    """
    B = np.asarray(B)
    C = np.asarray(C)
    if B.ndim == 2:
        return forward(B, C, params, "inference").data
    if chunk is None:
        chunk = auto_chunk(B.shape[2], params.config.heads)
    out = [forward(B[i:i + chunk], C[i:i + chunk], params, "inference").data
           for i in range(0, B.shape[0], chunk)]
    return np.concatenate(out, axis=0) if out else np.zeros((0, B.shape[2]))
