"""Receiver-independent emitter identification model.

The feature extractor (FED) maps a frame to ``[z_emitter, z_receiver]``.
The emitter classifier (EC) reads ``z_emitter``, the receiver classifier (RC)
reads ``z_receiver``. Training alternates two updates per minibatch:

1. ``classifier_step``: one SGD step on the classification loss for EC, RC
   and (as an intermediate update) FED, all gradients taken at the same point.
2. ``feature_step``: with EC and RC frozen, one SGD step on FED for
   ``lambda1 * L_MI - lambda2 * L_IE``.

``L_IE`` is the entropy of the cross-fed heads (EC on ``z_receiver``, RC on
``z_emitter``); ``L_MI`` is the absolute cosine between the two feature parts.
The CE-only baseline drops RC and feeds the whole FED output to EC.
"""

from __future__ import annotations

import io
import json
import math
import struct
from dataclasses import asdict, dataclass, field
from typing import Callable

import numpy as np

from . import rng as rngmod
from .errors import ConfigError, FormatError, InvalidInputError, TrainingDivergedError
from .numerics import LayerKind, LayerSpec, Mode, ParamBlock, Sequential, sgd_update, softmax
from .synth import SampleSet


@dataclass
class Arch:
    n_emitters: int = 4
    n_receivers: int = 3
    in_channels: int = 2
    input_length: int = 256
    conv: tuple = ((16, 7, 2), (32, 5, 2), (32, 3, 2))
    fed_hidden: tuple = ()
    batchnorm: bool = True
    f_e: int = 32
    f_r: int = 32
    head_hidden: tuple = (32, 32)
    bn_momentum: float = 0.1
    bn_eps: float = 1e-5
    baseline: bool = False

    def __post_init__(self):
        self.conv = tuple(tuple(int(v) for v in c) for c in self.conv)
        self.fed_hidden = tuple(int(v) for v in self.fed_hidden)
        self.head_hidden = tuple(int(v) for v in self.head_hidden)
        if self.n_emitters < 2 or self.n_receivers < 1:
            raise ConfigError("need at least 2 emitters and 1 receiver class")
        if self.f_e < 1 or self.f_r < 1:
            raise ConfigError("feature widths must be >= 1")

    @property
    def feature_width(self):
        return self.f_e + self.f_r

    def fed_specs(self):
        specs = []
        if self.conv:
            ch, length = self.in_channels, self.input_length
            for out_ch, k, s in self.conv:
                conv = LayerSpec.conv1d(ch, out_ch, k, s)
                length = conv.output_length(length)
                specs.append(conv)
                if self.batchnorm:
                    specs.append(LayerSpec.batchnorm(out_ch, self.bn_momentum, self.bn_eps))
                specs.append(LayerSpec.relu())
                ch = out_ch
            specs.append(LayerSpec.global_avg_pool())
            width = ch
        else:
            width = self.in_channels * self.input_length
        for h in self.fed_hidden:
            specs.append(LayerSpec.dense(width, h))
            if self.batchnorm:
                specs.append(LayerSpec.batchnorm(h, self.bn_momentum, self.bn_eps))
            specs.append(LayerSpec.relu())
            width = h
        specs.append(LayerSpec.dense(width, self.feature_width))
        return specs

    def head_specs(self, in_width, n_out):
        specs, width = [], in_width
        for h in self.head_hidden:
            specs += [LayerSpec.dense(width, h), LayerSpec.relu()]
            width = h
        specs.append(LayerSpec.dense(width, n_out))
        return specs


@dataclass
class TrainConfig:
    lambda1: float = 1.2
    lambda2: float = 1.2
    eta_F: float = 1e-4
    eta_E: float = 1e-4
    eta_R: float = 1e-4
    batch: int = 64
    epochs: int = 30
    epsilon_log: float = 1e-12
    epsilon_norm: float = 1e-12
    reduction: str = "mean"
    scheme: str = "alternating"
    seed: int = 0

    def validate(self):
        if min(self.eta_F, self.eta_E, self.eta_R) <= 0:
            raise ConfigError("stepsizes must be positive")
        if self.lambda1 < 0 or self.lambda2 < 0:
            raise ConfigError("lambda1 and lambda2 must be nonnegative")
        if self.batch < 2:
            raise ConfigError("batch must be >= 2")
        if self.epochs < 0:
            raise ConfigError("epochs must be >= 0")
        if self.reduction not in ("mean", "sum"):
            raise ConfigError("reduction must be 'mean' or 'sum'")
        if self.scheme not in ("alternating", "joint"):
            raise ConfigError("scheme must be 'alternating' or 'joint'")
        if self.epsilon_log <= 0 or self.epsilon_norm <= 0:
            raise ConfigError("epsilon guards must be positive")
        return self


@dataclass
class Batch:
    inputs: np.ndarray
    emitter_labels: np.ndarray
    receiver_labels: np.ndarray

    @classmethod
    def from_samples(cls, s: SampleSet):
        return cls(s.frames, s.emitter, s.receiver)

    def __len__(self):
        return len(self.emitter_labels)


@dataclass
class FeaturePair:
    z_emitter: np.ndarray
    z_receiver: np.ndarray

    def __len__(self):
        return len(self.z_emitter)


class RieiModel:
    """Parameter blocks for FED, EC and RC plus the architecture record."""

    def __init__(self, arch: Arch, fed: Sequential, ec: Sequential, rc: Sequential | None):
        self.arch = arch
        self.fed = fed
        self.ec = ec
        self.rc = rc

    @classmethod
    def build(cls, arch: Arch, rng: np.random.Generator):
        fed = Sequential.build(arch.fed_specs(), rng, "fed.")
        if arch.baseline:
            ec = Sequential.build(arch.head_specs(arch.feature_width, arch.n_emitters), rng, "ec.")
            return cls(arch, fed, ec, None)
        ec = Sequential.build(arch.head_specs(arch.f_e, arch.n_emitters), rng, "ec.")
        rc = Sequential.build(arch.head_specs(arch.f_r, arch.n_receivers), rng, "rc.")
        return cls(arch, fed, ec, rc)

    def stacks(self):
        out = {"F": self.fed, "E": self.ec}
        if self.rc is not None:
            out["R"] = self.rc
        return out

    def blocks(self):
        return [b for s in self.stacks().values() for b in s.blocks()]

    def named_blocks(self):
        return {b.name: b for b in self.blocks()}

    def trainable_count(self):
        return sum(b.values.size for b in self.blocks() if b.trainable)

    def zero_grad(self):
        for b in self.blocks():
            b.zero_grad()

    def copy(self):
        return RieiModel(self.arch, self.fed.copy(), self.ec.copy(),
                         None if self.rc is None else self.rc.copy())

    def state(self):
        return {b.name: b.values.copy() for b in self.blocks()}

    def load_state(self, state):
        for b in self.blocks():
            b.values[...] = state[b.name]


def group_of(name):
    """Block name -> 'F', 'E' or 'R'."""
    return {"fed": "F", "ec": "E", "rc": "R"}[name.split(".", 1)[0]]


def stepsize_for(cfg: TrainConfig, group):
    return {"F": cfg.eta_F, "E": cfg.eta_E, "R": cfg.eta_R}[group]


# ---------------------------------------------------------------------------
# forward pieces
# ---------------------------------------------------------------------------

def _fed_input(model, x):
    x = np.asarray(x, dtype=np.float64)
    if model.fed.specs[0].kind is LayerKind.DENSE:
        return x.reshape(len(x), -1)
    return x


def _features(model, x, mode, update_running):
    Z, caches = model.fed.forward(_fed_input(model, x), mode, update_running)
    if Z.shape[1] != model.arch.feature_width:
        raise ConfigError(f"FED output width {Z.shape[1]} != F_E + F_R = {model.arch.feature_width}")
    return Z, caches


def fed_forward(model: RieiModel, inputs, mode=Mode.INFER, update_running=False) -> FeaturePair:
    """Split the FED output into emitter and receiver parts."""
    Z, _ = _features(model, inputs, mode, update_running)
    return FeaturePair(Z[:, :model.arch.f_e].copy(), Z[:, model.arch.f_e:].copy())


def ec_forward(model: RieiModel, z_emitter):
    z = np.asarray(z_emitter, dtype=np.float64)
    return softmax(model.ec.forward(z, Mode.INFER)[0])


def rc_forward(model: RieiModel, z_receiver):
    if model.rc is None:
        raise ConfigError("baseline model has no receiver classifier")
    z = np.asarray(z_receiver, dtype=np.float64)
    return softmax(model.rc.forward(z, Mode.INFER)[0])


# ---------------------------------------------------------------------------
# losses with gradients
# ---------------------------------------------------------------------------

def _ce_terms(logits, labels0, eps):
    """Per-sample -log(p_y + eps) and its gradient w.r.t. logits."""
    p = softmax(logits)
    rows = np.arange(len(labels0))
    py = p[rows, labels0]
    loss = -np.log(py + eps)
    onehot = np.zeros_like(p)
    onehot[rows, labels0] = 1.0
    g = -(py / (py + eps))[:, None] * (onehot - p)
    return loss, g, p


def _entropy_terms(logits, eps):
    """Per-sample -sum q log(q + eps) and its gradient w.r.t. logits."""
    q = softmax(logits)
    lg = np.log(q + eps)
    h = -(q * lg).sum(axis=1)
    gq = -(lg + q / (q + eps))
    g = q * (gq - (gq * q).sum(axis=1, keepdims=True))
    return h, g


def _abs_cosine_terms(a, b, eps):
    """Per-sample |<a,b>| / max(eps, |a||b|) and gradients w.r.t. a and b."""
    dot = (a * b).sum(axis=1)
    na = np.sqrt((a * a).sum(axis=1))
    nb = np.sqrt((b * b).sum(axis=1))
    prod = na * nb
    clamped = prod <= eps
    denom = np.where(clamped, eps, prod)
    val = np.abs(dot) / denom
    sgn = np.sign(dot)[:, None]
    ga = sgn * b / denom[:, None]
    gb = sgn * a / denom[:, None]
    free = ~clamped
    if free.any():
        # derivative of the denominator only when it is not clamped
        with np.errstate(divide="ignore", invalid="ignore"):
            ga[free] -= (val[free] / np.maximum(na[free] ** 2, 1e-300))[:, None] * a[free]
            gb[free] -= (val[free] / np.maximum(nb[free] ** 2, 1e-300))[:, None] * b[free]
    return val, ga, gb


def _labels0(labels, n_classes, what):
    y = np.asarray(labels, dtype=np.int64) - 1
    if y.size and (y.min() < 0 or y.max() >= n_classes):
        raise InvalidInputError(f"{what} labels must lie in 1..{n_classes}")
    return y


def _scale(cfg, n):
    return 1.0 / n if cfg.reduction == "mean" else 1.0


def ce_objective(model, batch, cfg, mode=Mode.TRAIN, update_running=True, backward=True):
    """Classification loss (emitter + receiver cross-entropy).

    With ``backward`` the gradient is accumulated into every block's ``grad``.
    Returns ``(loss, emitter_probabilities)``.
    """
    n = len(batch)
    if n == 0:
        raise InvalidInputError("empty batch")
    scale = _scale(cfg, n)
    a = model.arch
    Z, fcache = _features(model, batch.inputs, mode, update_running)
    ye = _labels0(batch.emitter_labels, a.n_emitters, "emitter")
    if model.rc is None:
        lE, ecache = model.ec.forward(Z, mode)
        le, ge, pE = _ce_terms(lE, ye, cfg.epsilon_log)
        loss = scale * le.sum()
        if backward:
            model.fed.backward(fcache, model.ec.backward(ecache, scale * ge), input_grad=False)
        return loss, pE
    yr = _labels0(batch.receiver_labels, a.n_receivers, "receiver")
    lE, ecache = model.ec.forward(Z[:, :a.f_e], mode)
    lR, rcache = model.rc.forward(Z[:, a.f_e:], mode)
    le, ge, pE = _ce_terms(lE, ye, cfg.epsilon_log)
    lr, gr, _ = _ce_terms(lR, yr, cfg.epsilon_log)
    loss = scale * (le.sum() + lr.sum())
    if backward:
        gzE = model.ec.backward(ecache, scale * ge)
        gzR = model.rc.backward(rcache, scale * gr)
        model.fed.backward(fcache, np.concatenate([gzE, gzR], axis=1), input_grad=False)
    return loss, pE


def _check_split_widths(model, cfg):
    if model.rc is None:
        raise ConfigError("disentanglement losses need the receiver classifier")
    if (cfg.lambda1 > 0 or cfg.lambda2 > 0) and model.arch.f_e != model.arch.f_r:
        raise ConfigError("cross-feeding and the cosine loss need F_E == F_R")


def disentangle_objective(model, batch, cfg, mode=Mode.TRAIN, update_running=False, backward=True,
                          head_grads=False):
    """``lambda1 * L_MI - lambda2 * L_IE`` and its gradient.

    The heads are evaluated on the swapped feature parts. Gradients flow into
    FED only unless ``head_grads`` is set. Returns ``(objective, L_IE, L_MI)``.
    """
    _check_split_widths(model, cfg)
    n = len(batch)
    if n == 0:
        raise InvalidInputError("empty batch")
    scale = _scale(cfg, n)
    a = model.arch
    Z, fcache = _features(model, batch.inputs, mode, update_running)
    zE, zR = Z[:, :a.f_e], Z[:, a.f_e:]
    l_re, c_re = model.ec.forward(zR, mode)
    l_er, c_er = model.rc.forward(zE, mode)
    h_re, g_re = _entropy_terms(l_re, cfg.epsilon_log)
    h_er, g_er = _entropy_terms(l_er, cfg.epsilon_log)
    mi, g_a, g_b = _abs_cosine_terms(zE, zR, cfg.epsilon_norm)
    ie_val = scale * (h_re.sum() + h_er.sum())
    mi_val = scale * mi.sum()
    obj = cfg.lambda1 * mi_val - cfg.lambda2 * ie_val
    if backward:
        w_ie = -cfg.lambda2 * scale
        gzR = model.ec.backward(c_re, w_ie * g_re, param_grads=head_grads)
        gzE = model.rc.backward(c_er, w_ie * g_er, param_grads=head_grads)
        gzE = gzE + cfg.lambda1 * scale * g_a
        gzR = gzR + cfg.lambda1 * scale * g_b
        model.fed.backward(fcache, np.concatenate([gzE, gzR], axis=1), input_grad=False)
    return obj, ie_val, mi_val


def loss_ce(model, batch, cfg=None, mode=Mode.TRAIN):
    cfg = cfg or TrainConfig()
    return ce_objective(model, batch, cfg, mode, update_running=False, backward=False)[0]


def loss_ie(model, batch, cfg=None, mode=Mode.TRAIN):
    cfg = cfg or TrainConfig()
    return disentangle_objective(model, batch, cfg, mode, backward=False)[1]


def loss_mi(model, batch, cfg=None, mode=Mode.TRAIN):
    cfg = cfg or TrainConfig()
    return disentangle_objective(model, batch, cfg, mode, backward=False)[2]


# ---------------------------------------------------------------------------
# updates
# ---------------------------------------------------------------------------

def _step(stack, eta):
    sgd_update(stack.blocks(), eta)


def classifier_step(model, batch, cfg, mode=Mode.TRAIN):
    """Gradient step on the classification loss for every block at once."""
    model.zero_grad()
    loss, pE = ce_objective(model, batch, cfg, mode, update_running=True)
    if not math.isfinite(loss):
        raise TrainingDivergedError(f"classification loss is {loss}")
    _step(model.ec, cfg.eta_E)
    if model.rc is not None:
        _step(model.rc, cfg.eta_R)
    _step(model.fed, cfg.eta_F)
    return loss, pE


def feature_step(model, batch, cfg, mode=Mode.TRAIN):
    """Gradient step on FED for the disentanglement objective; heads untouched."""
    if cfg.lambda1 == 0 and cfg.lambda2 == 0:
        return 0.0, 0.0, 0.0
    model.fed.zero_grad()
    obj, ie, mi = disentangle_objective(model, batch, cfg, mode, update_running=False, head_grads=False)
    if not math.isfinite(obj):
        raise TrainingDivergedError(f"disentanglement objective is {obj}")
    _step(model.fed, cfg.eta_F)
    return obj, ie, mi


def joint_step(model, batch, cfg, mode=Mode.TRAIN):
    """Simultaneous SGD on CE + lambda1 MI - lambda2 IE over every block."""
    model.zero_grad()
    ce, pE = ce_objective(model, batch, cfg, mode, update_running=True)
    _, ie, mi = disentangle_objective(model, batch, cfg, mode, update_running=False, head_grads=True)
    total = ce + cfg.lambda1 * mi - cfg.lambda2 * ie
    if not math.isfinite(total):
        raise TrainingDivergedError(f"joint loss is {total}")
    _step(model.ec, cfg.eta_E)
    _step(model.rc, cfg.eta_R)
    _step(model.fed, cfg.eta_F)
    return ce, ie, mi, pE


def train_minibatch(model, batch, cfg):
    """One iteration of the configured scheme. Returns (ce, ie, mi, correct)."""
    if model.rc is None:
        ce, pE = classifier_step(model, batch, cfg)
        ie = mi = 0.0
    elif cfg.scheme == "joint":
        ce, ie, mi, pE = joint_step(model, batch, cfg)
    else:
        ce, pE = classifier_step(model, batch, cfg)
        _, ie, mi = feature_step(model, batch, cfg)
    correct = int((pE.argmax(axis=1) == np.asarray(batch.emitter_labels) - 1).sum())
    return ce, ie, mi, correct


def iter_minibatches(n, batch, rng):
    """Shuffled index chunks; a final chunk of one sample is folded into its predecessor."""
    perm = rng.permutation(n)
    chunks = [perm[i:i + batch] for i in range(0, n, batch)]
    if len(chunks) > 1 and len(chunks[-1]) < 2:
        tail = chunks.pop()
        chunks[-1] = np.concatenate([chunks[-1], tail])
    return chunks


def _pool(datasets):
    if isinstance(datasets, SampleSet):
        return datasets
    return SampleSet.concat([datasets[k] for k in sorted(datasets)])


def run_epoch(model, data: SampleSet, cfg, rng, batch_size=None):
    """One pass over ``data``; returns the averaged epoch metrics."""
    sums = np.zeros(3)
    correct = n_batches = 0
    for idx in iter_minibatches(len(data), batch_size or cfg.batch, rng):
        b = Batch(data.frames[idx], data.emitter[idx], data.receiver[idx])
        ce, ie, mi, c = train_minibatch(model, b, cfg)
        sums += (ce, ie, mi)
        correct += c
        n_batches += 1
    sums /= max(n_batches, 1)
    return {"loss_ce": float(sums[0]), "loss_ie": float(sums[1]), "loss_mi": float(sums[2]),
            "train_acc": correct / max(len(data), 1)}


def fit(model: RieiModel, datasets, cfg: TrainConfig, rng: np.random.Generator | None = None,
        evaluate: Callable | None = None, on_epoch: Callable | None = None):
    """Alternating training over the pooled receivers.

    ``evaluate(model)`` (optional) returns a held-out accuracy recorded as
    ``test_acc``; ``on_epoch(epoch, model, record)`` is called after each
    epoch. Returns ``(model, history)``; the model is updated in place.
    """
    cfg.validate()
    if model.rc is not None:
        _check_split_widths(model, cfg)
    data = _pool(datasets)
    if model.rc is not None and len(np.unique(data.receiver)) < 2:
        raise ConfigError("training data must cover at least two receivers")
    rng = rng if rng is not None else rngmod.stream(cfg.seed, "shuffle")
    history = []
    for epoch in range(cfg.epochs):
        try:
            rec = run_epoch(model, data, cfg, rng)
        except TrainingDivergedError as exc:
            raise TrainingDivergedError(str(exc), epoch=epoch + 1) from None
        rec = {"epoch": epoch + 1, **rec}
        if evaluate is not None:
            rec["test_acc"] = float(evaluate(model))
        history.append(rec)
        if on_epoch is not None:
            on_epoch(epoch + 1, model, rec)
    return model, history


def fit_baseline(model: RieiModel, datasets, cfg: TrainConfig, rng=None, evaluate=None, on_epoch=None):
    """Cross-entropy training of FED + EC on the pooled data."""
    if model.rc is not None:
        raise ConfigError("fit_baseline expects a model built with arch.baseline=True")
    return fit(model, datasets, cfg, rng, evaluate, on_epoch)


def predict_proba(model, inputs, chunk=1024):
    x = np.asarray(inputs, dtype=np.float64)
    out = []
    for i in range(0, len(x), chunk):
        Z, _ = _features(model, x[i:i + chunk], Mode.INFER, False)
        zE = Z if model.rc is None else Z[:, :model.arch.f_e]
        out.append(softmax(model.ec.forward(zE, Mode.INFER)[0]))
    return np.concatenate(out) if out else np.empty((0, model.arch.n_emitters))


def predict(model, inputs):
    """1-based emitter labels; ties resolve to the smallest label."""
    return np.argmax(predict_proba(model, inputs), axis=1) + 1


def accuracy(model, data: SampleSet):
    return float(np.mean(predict(model, data.frames) == data.emitter))


def extract_features(model, inputs, chunk=1024) -> FeaturePair:
    """Infer-mode features. For a baseline model the FED output is split at F_E."""
    x = np.asarray(inputs, dtype=np.float64)
    zs = [_features(model, x[i:i + chunk], Mode.INFER, False)[0] for i in range(0, len(x), chunk)]
    Z = np.concatenate(zs)
    return FeaturePair(Z[:, :model.arch.f_e], Z[:, model.arch.f_e:])


# ---------------------------------------------------------------------------
# checkpoint file
# ---------------------------------------------------------------------------

MAGIC = b"RIEI"
VERSION = 1


def save_checkpoint(model: RieiModel, path):
    """Layout: magic, u32 version, u32 len + arch JSON, u32 block count, then
    per block u16 len + name, u8 trainable, u32 ndim, u32 dims, float64 LE data."""
    arch = json.dumps(asdict(model.arch), sort_keys=True).encode()
    buf = io.BytesIO()
    buf.write(MAGIC)
    buf.write(struct.pack("<II", VERSION, len(arch)))
    buf.write(arch)
    blocks = model.blocks()
    buf.write(struct.pack("<I", len(blocks)))
    for b in blocks:
        name = b.name.encode()
        buf.write(struct.pack("<H", len(name)))
        buf.write(name)
        buf.write(struct.pack("<BI", int(b.trainable), b.values.ndim))
        buf.write(struct.pack(f"<{b.values.ndim}I", *b.values.shape))
        buf.write(b.values.astype("<f8").tobytes())
    with open(path, "wb") as fh:
        fh.write(buf.getvalue())


def load_checkpoint(path) -> RieiModel:
    with open(path, "rb") as fh:
        data = fh.read()
    pos = 0

    def take(n):
        nonlocal pos
        if pos + n > len(data):
            raise FormatError("checkpoint truncated", offset=pos)
        chunk = data[pos:pos + n]
        pos += n
        return chunk

    if take(4) != MAGIC:
        raise FormatError("bad checkpoint magic", offset=0)
    version, alen = struct.unpack("<II", take(8))
    if version != VERSION:
        raise FormatError(f"unsupported checkpoint version {version}", offset=4)
    try:
        arch = Arch(**json.loads(take(alen)))
    except (ValueError, TypeError) as exc:
        raise FormatError(f"bad architecture record: {exc}", offset=12) from None
    model = RieiModel.build(arch, np.random.default_rng(0))
    expected = model.named_blocks()
    (count,) = struct.unpack("<I", take(4))
    if count != len(expected):
        raise FormatError(f"checkpoint has {count} blocks, architecture needs {len(expected)}", offset=pos - 4)
    for _ in range(count):
        at = pos
        (nlen,) = struct.unpack("<H", take(2))
        name = take(nlen).decode()
        _trainable, ndim = struct.unpack("<BI", take(5))
        shape = struct.unpack(f"<{ndim}I", take(4 * ndim))
        if name not in expected or expected[name].values.shape != tuple(shape):
            raise FormatError(f"unexpected block {name} {shape}", offset=at)
        size = int(np.prod(shape)) if shape else 1
        expected[name].values[...] = np.frombuffer(take(8 * size), dtype="<f8").reshape(shape)
    if pos != len(data):
        raise FormatError("trailing bytes after checkpoint", offset=pos)
    return model
