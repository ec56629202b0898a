"""Joint multi-precision training, full-precision pretraining and the
stage-wise (ascending) baseline."""
from __future__ import annotations

from dataclasses import asdict, dataclass, field, replace

import numpy as np

from ..errors import DivergenceError, InvalidArgument
from ..infer import assemble_model, evaluate
from ..model import BN_MODES, Architecture, LayeredModel
from ..quant import quant_range, round_clip
from ..vertical import compensation
from . import ops, ste
from .moo import combine_us, solve_min_norm
from .optim import SGD, cosine_lr
from .params import (
    FPParams,
    SourceParams,
    affine_key,
    assemble_layered,
    decayed,
    init_fp,
    init_params,
    level_of,
    stacks_from_planes,
    stats_key,
    to_layered,
)
from .tape import Tape

MOO_MODES = ("us", "mgd")
KD_MODES = ("off", "cos", "kl")
STEP_FLOOR = 1e-8


@dataclass(frozen=True)
class TrainConfig:
    n: int = 2
    basic_bits: int = 2
    moo: str = "us"
    kd: str = "cos"
    bn_mode: str = "full"
    compensate: bool = True
    lr: float = 0.01
    momentum: float = 0.9
    weight_decay: float = 1e-4
    epochs: int = 4
    batch_size: int = 128
    grad_scale: bool = True
    bn_momentum: float = 0.1
    fp_epochs: int = 2
    fp_lr: float = 0.05
    seed: int = 0
    log_iterations: bool = False

    def __post_init__(self):
        if self.moo not in MOO_MODES:
            raise InvalidArgument(f"moo must be one of {MOO_MODES}, got {self.moo!r}")
        if self.kd not in KD_MODES:
            raise InvalidArgument(f"kd must be one of {KD_MODES}, got {self.kd!r}")
        if self.bn_mode not in BN_MODES:
            raise InvalidArgument(f"bn_mode must be one of {BN_MODES}, got {self.bn_mode!r}")
        if self.n < 0 or self.basic_bits < 2:
            raise InvalidArgument("need n >= 0 and basic_bits >= 2")
        for name in ("lr", "fp_lr", "batch_size", "bn_momentum"):
            if not getattr(self, name) > 0:
                raise InvalidArgument(f"{name} must be positive")
        if not 0 <= self.momentum < 1 or self.weight_decay < 0:
            raise InvalidArgument("momentum must lie in [0, 1) and weight_decay must be >= 0")
        if self.epochs < 0 or self.fp_epochs < 0:
            raise InvalidArgument("epoch counts must be non-negative")

    def as_dict(self) -> dict:
        return asdict(self)


@dataclass
class LevelOutput:
    logits: np.ndarray
    ce: object
    kd: object
    loss: object


@dataclass
class ForwardPass:
    tape: Tape
    leaves: dict
    levels: dict
    stats: list = field(default_factory=list)  # (buffer key, batch mean, batch var) in update order


# -- shared pieces ----------------------------------------------------------


def _stem(t, leaves, buffers, arch, x, train, stats):
    if arch.stem is None:
        return x
    y = ops.conv2d(t, x, leaves["stem.w"], arch.stem.stride, arch.stem.padding)
    if train:
        y, mu, var = ops.batchnorm_train(t, y, leaves["stem.gamma"], leaves["stem.beta"])
        stats.append(("stem", mu, var))
    else:
        y = ops.batchnorm_eval(t, y, buffers["stem.mean"], buffers["stem.var"], leaves["stem.gamma"], leaves["stem.beta"])
    return ops.relu(t, y)


def _head(t, leaves, h, pool):
    if h.value.ndim == 4:
        h = ops.global_avg_pool(t, h) if pool == "avg" else ops.reshape(t, h, (h.value.shape[0], -1))
    return ops.linear(t, h, leaves["head.w"], leaves["head.b"])


def _bn(t, y, leaves, buffers, g_key, s_key, train, stats):
    gamma, beta = leaves[f"gamma.{g_key}"], leaves[f"beta.{g_key}"]
    if train:
        y, mu, var = ops.batchnorm_train(t, y, gamma, beta)
        stats.append((s_key, mu, var))
        return y
    return ops.batchnorm_eval(t, y, buffers[f"mean.{s_key}"], buffers[f"var.{s_key}"], gamma, beta)


def _flatten_for(t, spec, h):
    if spec.kind == "linear" and h.value.ndim != 2:
        return ops.reshape(t, h, (h.value.shape[0], -1))
    return h


def _int_layer(t, spec, a, wq, z, s_w, s_a):
    if spec.kind == "conv":
        return ste.int_conv(t, a, wq, z, s_w, s_a, spec.stride, spec.padding)
    return ste.int_linear(t, a, wq, z, s_w, s_a)


def _buffer_names(key: str):
    return ("stem.mean", "stem.var") if key == "stem" else (f"mean.{key}", f"var.{key}")


def update_running_stats(buffers: dict, stats, momentum: float) -> None:
    """Exponential moving average of batch statistics, applied in order."""
    for key, mu, var in stats:
        mean_name, var_name = _buffer_names(key)
        buffers[mean_name] = (1.0 - momentum) * buffers[mean_name] + momentum * mu
        buffers[var_name] = (1.0 - momentum) * buffers[var_name] + momentum * var


def _grad_scales(arch: Architecture, n: int, basic_bits: int, enabled: bool):
    shapes = arch.feature_shapes()
    gw, ga = [], []
    for m, spec in enumerate(arch.layers):
        gw.append(ste.weight_grad_scale(spec.weight_count, basic_bits + n) if enabled else 1.0)
        feats = int(np.prod(shapes[m]))
        ga.append([ste.act_grad_scale(feats, basic_bits + i) if enabled else 1.0 for i in range(n + 1)])
    return gw, ga


# -- forward ----------------------------------------------------------------


def forward_all(
    sp: SourceParams,
    x,
    labels,
    kd: str = "cos",
    train: bool = True,
    levels=None,
    grad_scale: bool = True,
) -> ForwardPass:
    """Run every requested level (highest first) on one batch.

    Weights are quantized once at the top width and floor-shifted down; the
    stem output is shared by all levels. With ``kd`` enabled, level i < n
    adds a distillation term against the detached logits of level i + 1.
    """
    arch, n = sp.arch, sp.n
    levels = sorted(range(n + 1) if levels is None else levels, reverse=True)
    t = Tape()
    leaves = {name: t.leaf(v, name) for name, v in sp.params.items()}
    stats: list = []
    x0 = _stem(t, leaves, sp.buffers, arch, t.const(np.asarray(x, dtype=np.float64)), train, stats)
    gw, ga = _grad_scales(arch, n, sp.basic_bits, grad_scale)
    wlevels = [
        ste.quantize_weight_levels(sp.params[f"w.{m}"], float(sp.params[f"sw.{m}"]), n, sp.basic_bits)
        for m in range(len(arch.layers))
    ]
    out = {}
    for i in levels:
        z = compensation(i, n) if sp.compensate else 0.0
        bits = sp.basic_bits + i
        h = x0
        for m, spec in enumerate(arch.layers):
            h = _flatten_for(t, spec, h)
            s_a = leaves[f"sa.{m}.{i}"]
            a = ste.quant_act(t, h, s_a, bits, ga[m][i])
            wq = ste.quant_weight(t, leaves[f"w.{m}"], leaves[f"sw.{m}"], n, i, z, sp.basic_bits, gw[m], wlevels[m])
            s_i = float(sp.params[f"sw.{m}"]) * 2.0 ** (n - i)
            y = _int_layer(t, spec, a, wq, z, s_i, float(s_a.value))
            y = _bn(t, y, leaves, sp.buffers, f"{m}.{affine_key(sp.bn_mode, i)}", f"{m}.{stats_key(sp.bn_mode, i)}", train, stats)
            h = ops.relu(t, y)
        logits = _head(t, leaves, h, arch.pool)
        ce = ops.cross_entropy(t, logits, labels)
        kd_term = None
        if kd != "off" and i < n and (i + 1) in out:
            teacher = out[i + 1].logits
            kd_term = (ops.kd_cosine if kd == "cos" else ops.kd_kl)(t, logits, teacher)
            loss = ops.add(t, ce, kd_term)
        else:
            loss = ce
        out[i] = LevelOutput(logits.value, ce, kd_term, loss)
    return ForwardPass(t, leaves, out, stats)


def _named(grads: dict) -> dict:
    return {leaf.name: g for leaf, g in grads.items() if leaf.name is not None}


def _check_finite(fwd: ForwardPass, checkpoint):
    for i, lo in sorted(fwd.levels.items(), reverse=True):
        if not np.isfinite(lo.loss.value):
            raise DivergenceError(i, checkpoint=checkpoint)


def joint_gradients(sp: SourceParams, fwd: ForwardPass, moo: str):
    """Combined gradients, alpha and (when available) per-level gradient norms.

    Shared parameters receive sum_i alpha_i dL_i; parameters owned by one
    level receive that level's own gradient.
    """
    n = sp.n
    losses = [float(fwd.levels[i].loss.value) for i in range(n + 1)]
    t = fwd.tape
    if moo == "us":
        _, alpha = combine_us(losses)
        root = ops.weighted_sum(t, [fwd.levels[i].loss for i in range(n + 1)], alpha)
        grads = _named(t.backward(root))
        for name in grads:
            lvl = level_of(name, sp.bn_mode)
            if lvl is not None:
                grads[name] = grads[name] / alpha[lvl]
        return grads, alpha, None
    per = [_named(t.backward(fwd.levels[i].loss)) for i in range(n + 1)]
    keys = sorted(k for k in sp.params if k.startswith(("w.", "sw.")))
    vecs = [np.concatenate([np.ravel(p.get(k, np.zeros_like(sp.params[k]))) for k in keys]) for p in per]
    alpha, _ = solve_min_norm(vecs)
    grads = {}
    for name in sp.params:
        parts = [p[name] for p in per if name in p]
        if not parts:
            continue
        if level_of(name, sp.bn_mode) is None:
            grads[name] = sum(a * p[name] for a, p in zip(alpha, per) if name in p)
        else:
            grads[name] = sum(parts)
    return grads, alpha, [float(np.linalg.norm(v)) for v in vecs]


def _clamp_steps(params: dict):
    for name in params:
        if name.startswith(("sw.", "sa.")):
            params[name] = np.maximum(params[name], STEP_FLOOR)


def _batches(n_samples: int, batch_size: int, rng):
    order = rng.permutation(n_samples)
    steps = max(n_samples // batch_size, 1)
    return [order[k * batch_size : (k + 1) * batch_size] for k in range(steps)]


# -- full-precision pretraining -------------------------------------------


def fp_forward(fp: FPParams, x, labels, train: bool = True):
    t = Tape()
    leaves = {name: t.leaf(v, name) for name, v in fp.params.items()}
    stats: list = []
    h = _stem(t, leaves, fp.buffers, fp.arch, t.const(np.asarray(x, dtype=np.float64)), train, stats)
    inputs = []
    for m, spec in enumerate(fp.arch.layers):
        h = _flatten_for(t, spec, h)
        inputs.append(h.value)
        if spec.kind == "conv":
            y = ops.conv2d(t, h, leaves[f"w.{m}"], spec.stride, spec.padding)
        else:
            y = ops.linear(t, h, leaves[f"w.{m}"])
        h = ops.relu(t, _bn(t, y, leaves, fp.buffers, f"{m}", f"{m}", train, stats))
    logits = _head(t, leaves, h, fp.arch.pool)
    loss = ops.cross_entropy(t, logits, labels)
    return t, loss, logits.value, stats, inputs


def pretrain_fp(arch: Architecture, data, cfg: TrainConfig, metrics: list | None = None) -> FPParams:
    fp = init_fp(arch, cfg.seed)
    rng = np.random.default_rng([cfg.seed, 1])
    opt = SGD(cfg.momentum, cfg.weight_decay)
    steps_per_epoch = max(len(data) // cfg.batch_size, 1)
    total = float(cfg.fp_epochs)
    for epoch in range(cfg.fp_epochs):
        loss_sum, correct, seen = 0.0, 0, 0
        for k, idx in enumerate(_batches(len(data), cfg.batch_size, rng)):
            x, y = data.get(idx, rng)
            t, loss, logits, stats, _ = fp_forward(fp, x, y)
            if not np.isfinite(loss.value):
                raise DivergenceError(-1, "full-precision pretraining diverged")
            grads = _named(t.backward(loss))
            lr = cosine_lr(cfg.fp_lr, epoch + k / steps_per_epoch, total)
            opt.step(fp.params, grads, lr, [g for g in grads if decayed(g)])
            update_running_stats(fp.buffers, stats, cfg.bn_momentum)
            loss_sum += float(loss.value) * len(y)
            correct += int((logits.argmax(1) == y).sum())
            seen += len(y)
        if metrics is not None:
            metrics.append({"phase": "fp", "epoch": epoch, "loss": loss_sum / seen, "train_acc": correct / seen})
    return fp


def first_batch_inputs(fp: FPParams, data, cfg: TrainConfig):
    """Activations entering each quantized layer on the first training batch."""
    rng = np.random.default_rng([cfg.seed, 2])
    idx = _batches(len(data), cfg.batch_size, rng)[0]
    x, y = data.get(idx, rng)
    return fp_forward(fp, x, y, train=False)[4]


def prepare_source(cfg: TrainConfig, arch: Architecture, data, fp: FPParams | None = None, metrics=None) -> SourceParams:
    if fp is None:
        fp = pretrain_fp(arch, data, cfg, metrics)
    inputs = first_batch_inputs(fp, data, cfg)
    return init_params(fp, inputs, cfg.n, cfg.basic_bits, cfg.bn_mode, cfg.compensate)


# -- joint training ---------------------------------------------------------


@dataclass
class TrainResult:
    params: SourceParams
    metrics: list
    optimizer: dict

    def model(self) -> LayeredModel:
        return to_layered(self.params)


def train_joint(
    cfg: TrainConfig,
    data,
    arch: Architecture,
    init: SourceParams | FPParams | None = None,
    on_epoch=None,
) -> TrainResult:
    """Once-for-all training of every precision from shared source weights.

    ``init`` may be a ready SourceParams, a pretrained full-precision model,
    or None (pretrain first). ``on_epoch(epoch, params, records)`` is called
    after every epoch.
    """
    metrics: list = []
    if isinstance(init, SourceParams):
        sp = init.copy()
    else:
        sp = prepare_source(cfg, arch, data, init, metrics)
    n = sp.n
    opt = SGD(cfg.momentum, cfg.weight_decay)
    rng = np.random.default_rng([cfg.seed, 3])
    steps_per_epoch = max(len(data) // cfg.batch_size, 1)
    it = 0
    for epoch in range(cfg.epochs):
        acc = {i: {"loss": 0.0, "ce": 0.0, "kd": 0.0, "correct": 0} for i in range(n + 1)}
        alpha_sum = np.zeros(n + 1)
        norm_sum = np.zeros(n + 1)
        seen = 0
        lr = cfg.lr
        for k, idx in enumerate(_batches(len(data), cfg.batch_size, rng)):
            x, y = data.get(idx, rng)
            last_good = sp.copy()
            fwd = forward_all(sp, x, y, cfg.kd, True, None, cfg.grad_scale)
            _check_finite(fwd, last_good)
            grads, alpha, norms = joint_gradients(sp, fwd, cfg.moo)
            lr = cosine_lr(cfg.lr, epoch + k / steps_per_epoch, float(cfg.epochs))
            opt.step(sp.params, grads, lr, [g for g in grads if decayed(g)])
            _clamp_steps(sp.params)
            update_running_stats(sp.buffers, fwd.stats, cfg.bn_momentum)
            for i, lo in fwd.levels.items():
                acc[i]["loss"] += float(lo.loss.value) * len(y)
                acc[i]["ce"] += float(lo.ce.value) * len(y)
                acc[i]["kd"] += (0.0 if lo.kd is None else float(lo.kd.value)) * len(y)
                acc[i]["correct"] += int((lo.logits.argmax(1) == y).sum())
            alpha_sum += alpha * len(y)
            if norms is not None:
                norm_sum += np.asarray(norms) * len(y)
            seen += len(y)
            if cfg.log_iterations:
                metrics.append({
                    "phase": "iter", "iter": it, "epoch": epoch, "alpha": [float(a) for a in alpha],
                    "grad_norm": None if norms is None else norms,
                    "loss": [float(fwd.levels[i].loss.value) for i in range(n + 1)],
                })
            it += 1
        records = []
        for i in range(n + 1):
            records.append({
                "phase": "joint", "epoch": epoch, "level": i, "bits": sp.basic_bits + i,
                "loss": acc[i]["loss"] / seen, "ce": acc[i]["ce"] / seen, "kd": acc[i]["kd"] / seen,
                "train_acc": acc[i]["correct"] / seen, "alpha": float(alpha_sum[i] / seen),
                "grad_norm": float(norm_sum[i] / seen) if cfg.moo == "mgd" else None, "lr": lr,
            })
        metrics.extend(records)
        if on_epoch is not None:
            on_epoch(epoch, sp, records)
    return TrainResult(sp, metrics, opt.state())


def evaluate_levels(model: LayeredModel, data, levels=None, batch_size: int = 500) -> dict:
    """Top-1/top-5 accuracy at each level through the integer inference path."""
    x, y = data.get(np.arange(len(data)))
    out = {}
    for k in range(model.n + 1) if levels is None else levels:
        out[k] = evaluate(assemble_model(model, k), x, y, batch_size)
    return out


# -- ascending baseline -----------------------------------------------------


@dataclass
class AscendingResult:
    model: LayeredModel
    stages: list  # LayeredModel after each stage, stage i has i enhance planes
    base: SourceParams  # the dedicated basic-width QAT run (stage 0)
    metrics: list


def sign_bits(r) -> np.ndarray:
    """1 where the carrier is >= 0, else 0."""
    return (np.asarray(r) >= 0).astype(np.uint8)


def train_ascending_baseline(
    cfg: TrainConfig,
    data,
    arch: Architecture,
    init: FPParams | None = None,
    base: SourceParams | None = None,
) -> AscendingResult:
    """Stage-wise baseline: train the basic layer, then one plane at a time.

    Stage 0 is plain basic-width QAT. Stage i freezes everything below it,
    including the full-precision stem and head, and learns plane i through
    a real carrier r with b = 1[r >= 0]. Only plane i, its activation steps
    and its BN parameters move during stage i.
    """
    metrics: list = []
    base_cfg = replace(cfg, n=0, kd="off", moo="us", compensate=False)
    if base is None:
        base = train_joint(base_cfg, data, arch, init).params
    n = cfg.n
    layers = arch.layers
    s0 = [float(base.params[f"sw.{m}"]) for m in range(len(layers))]
    qn, qp = quant_range(cfg.basic_bits, True)
    basic = [round_clip(base.params[f"w.{m}"], s0[m], qn, qp) for m in range(len(layers))]
    planes: list[list[np.ndarray]] = [[] for _ in layers]
    act = {(m, 0): float(base.params[f"sa.{m}.0"]) for m in range(len(layers))}
    bn = {(m, 0): (base.params[f"gamma.{m}.0"].copy(), base.params[f"beta.{m}.0"].copy(),
                   base.buffers[f"mean.{m}.0"].copy(), base.buffers[f"var.{m}.0"].copy()) for m in range(len(layers))}
    frozen = {k: v for k, v in base.params.items() if k.startswith(("stem.", "head."))}
    frozen_buf = {k: v for k, v in base.buffers.items() if k.startswith("stem.")}

    def snapshot(depth):
        stacks = stacks_from_planes(basic, [p[:depth] for p in planes], s0, cfg.basic_bits)
        sp_view = SourceParams(arch, depth, cfg.basic_bits, "full", False, dict(frozen), dict(frozen_buf))
        for m in range(len(layers)):
            for i in range(depth + 1):
                g, b, mu, var = bn[(m, i)]
                sp_view.params[f"gamma.{m}.{i}"], sp_view.params[f"beta.{m}.{i}"] = g, b
                sp_view.buffers[f"mean.{m}.{i}"], sp_view.buffers[f"var.{m}.{i}"] = mu, var
                sp_view.params[f"sa.{m}.{i}"] = np.asarray(act[(m, i)])
        return assemble_layered(sp_view, stacks, False)

    stages = [snapshot(0)]
    rng = np.random.default_rng([cfg.seed, 4])
    steps_per_epoch = max(len(data) // cfg.batch_size, 1)
    for level in range(1, n + 1):
        bits = cfg.basic_bits + level
        s_i = [s / 2.0**level for s in s0]
        prev = [basic[m] * 2.0 ** (level - 1) + sum(p * 2.0 ** (level - 1 - j) for j, p in enumerate(planes[m], start=1)) for m in range(len(layers))]
        params = {}
        buffers = {}
        for m in range(len(layers)):
            resid = base.params[f"w.{m}"] / s_i[m] - 2.0 * prev[m]
            params[f"r.{m}"] = (resid - 0.5) * s_i[m]
            bits_prev = bits - 1
            params[f"sa.{m}"] = np.asarray(act[(m, level - 1)] * (2.0**bits_prev - 1) / (2.0**bits - 1))
            g, b, mu, var = bn[(m, level - 1)]
            params[f"gamma.{m}"], params[f"beta.{m}"] = g.copy(), b.copy()
            buffers[f"mean.{m}"], buffers[f"var.{m}"] = mu.copy(), var.copy()
        gw, ga = _grad_scales(arch, level, cfg.basic_bits, cfg.grad_scale)
        opt = SGD(cfg.momentum, 0.0)
        for epoch in range(cfg.epochs):
            loss_sum, correct, seen = 0.0, 0, 0
            lr = cfg.lr
            for k, idx in enumerate(_batches(len(data), cfg.batch_size, rng)):
                x, y = data.get(idx, rng)
                t = Tape()
                leaves = {name: t.leaf(v, name) for name, v in params.items()}
                fixed = {name: t.const(v) for name, v in frozen.items()}
                stats: list = []
                h = _stem(t, fixed, frozen_buf, arch, t.const(x), False, stats)
                for m, spec in enumerate(layers):
                    h = _flatten_for(t, spec, h)
                    a = ste.quant_act(t, h, leaves[f"sa.{m}"], bits, ga[m][level])
                    wq = ste.bit_carrier(t, leaves[f"r.{m}"], prev[m], s_i[m])
                    yv = _int_layer(t, spec, a, wq, 0.0, s_i[m], float(leaves[f"sa.{m}"].value))
                    yv = _bn(t, yv, leaves, buffers, f"{m}", f"{m}", True, stats)
                    h = ops.relu(t, yv)
                logits = _head(t, fixed, h, arch.pool)
                loss = ops.cross_entropy(t, logits, y)
                if not np.isfinite(loss.value):
                    raise DivergenceError(level)
                grads = _named(t.backward(loss))
                lr = cosine_lr(cfg.lr, epoch + k / steps_per_epoch, float(cfg.epochs))
                opt.step(params, grads, lr)
                _clamp_steps(params)
                update_running_stats(buffers, stats, cfg.bn_momentum)
                loss_sum += float(loss.value) * len(y)
                correct += int((logits.value.argmax(1) == y).sum())
                seen += len(y)
            metrics.append({"phase": "ascending", "stage": level, "epoch": epoch, "level": level,
                            "bits": bits, "loss": loss_sum / seen, "train_acc": correct / seen, "lr": lr})
        for m in range(len(layers)):
            planes[m].append(sign_bits(params[f"r.{m}"]))
            act[(m, level)] = float(params[f"sa.{m}"])
            bn[(m, level)] = (params[f"gamma.{m}"], params[f"beta.{m}"], buffers[f"mean.{m}"], buffers[f"var.{m}"])
        stages.append(snapshot(level))
    return AscendingResult(stages[-1], stages, base, metrics)
