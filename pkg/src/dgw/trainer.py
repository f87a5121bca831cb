"""Training loop: Adam with two learning-rate groups, step decay, swap gating, checkpoints."""

from __future__ import annotations

import dataclasses
import json
import logging
import math
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import analysis, datagen
from . import numcore as nc
from .numcore import ContractError, NumericError
from .objective import LossWeights, loss_re, loss_swap, loss_total, ce
from .workspace import DgwModel, ModelDims, swap_permute

log = logging.getLogger(__name__)

ADAM_BETA1, ADAM_BETA2, ADAM_EPS = 0.9, 0.999, 1e-8


class ConfigError(ValueError):
    """Bad or unknown configuration value (CLI exit code 2)."""


@dataclass
class TrainConfig:
    dataset: str = ""
    run_dir: str = "runs/default"
    batch_size: int = 64
    total_steps: int = 3000
    t_aug: int = 300
    learning_rate_main: float = 5e-4
    learning_rate_dgw: float = 2e-3
    decay_step: int = 1000
    decay_gamma_main: float = 0.5
    beta_mixup: float = 0.2
    lambda_re: float = 0.3
    lambda_swap_b: float = 0.3
    lambda_swap: float = 10.0
    lambda_ent: float = 0.01
    gce_q: float = 0.7
    num_classes: int = 5
    side: int = 16
    feat_dim: int = 32
    num_tokens: int = 8
    num_slots: int = 2
    slot_dim: int = 8
    iters: int = 2
    seed: int = 0
    eval_interval: int = 500
    checkpoint_interval: int = 1000
    vanilla: bool = False

    def __post_init__(self):
        self.validate()

    def validate(self) -> None:
        if self.t_aug >= self.total_steps:
            raise ConfigError(f"t_aug ({self.t_aug}) must be < total_steps ({self.total_steps})")
        for name in ("learning_rate_main", "learning_rate_dgw", "beta_mixup", "decay_gamma_main"):
            if not getattr(self, name) > 0:
                raise ConfigError(f"{name} must be > 0")
        for name in ("batch_size", "total_steps", "decay_step", "eval_interval", "checkpoint_interval"):
            if getattr(self, name) < 1:
                raise ConfigError(f"{name} must be >= 1")
        try:
            self.weights()
            self.dims()
        except ContractError as exc:
            raise ConfigError(str(exc)) from None

    def weights(self) -> LossWeights:
        return LossWeights(self.lambda_re, self.lambda_swap_b, self.lambda_swap, self.lambda_ent, self.gce_q)

    def dims(self) -> ModelDims:
        return ModelDims(self.num_classes, self.side, self.feat_dim, self.num_tokens,
                         self.num_slots, self.slot_dim, self.iters)

    # flat key=value text

    def to_text(self) -> str:
        lines = []
        for f in dataclasses.fields(self):
            v = getattr(self, f.name)
            lines.append(f"{f.name} = {str(v).lower() if isinstance(v, bool) else v}")
        return "\n".join(lines) + "\n"

    @classmethod
    def from_text(cls, text: str, **overrides) -> "TrainConfig":
        types = {f.name: f.type for f in dataclasses.fields(cls)}
        values = {}
        for lineno, raw in enumerate(text.splitlines(), 1):
            line = raw.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise ConfigError(f"line {lineno}: expected 'key = value', got {raw!r}")
            key, val = (s.strip() for s in line.split("=", 1))
            if key not in types:
                raise ConfigError(f"unknown config key: {key}")
            values[key] = _parse_value(key, val, types[key])
        values.update(overrides)
        return cls(**values)

    @classmethod
    def from_file(cls, path, **overrides) -> "TrainConfig":
        return cls.from_text(Path(path).read_text(), **overrides)


def _parse_value(key: str, val: str, typ: str):
    try:
        if typ == "bool":
            if val.lower() not in ("true", "false", "1", "0"):
                raise ValueError(val)
            return val.lower() in ("true", "1")
        if typ == "int":
            return int(val)
        if typ == "float":
            return float(val)
        return val
    except ValueError:
        raise ConfigError(f"bad value for {key}: {val!r}") from None


# ---------------------------------------------------------------- optimizer


@dataclass
class OptimizerState:
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)
    step: int = 0


def optimizer_step(params: nc.ParamStore, state: OptimizerState, lrs: dict[str, float],
                   group_of=lambda name: "main") -> None:
    """One bias-corrected Adam update; ``lrs`` maps group name to learning rate."""
    for name, p in params.items():
        if not np.isfinite(p.grad).all():
            raise NumericError(f"non-finite gradient in {name}")
    state.step += 1
    t = state.step
    c1 = 1.0 - ADAM_BETA1 ** t
    c2 = 1.0 - ADAM_BETA2 ** t
    for name, p in params.items():
        g = p.grad
        if name not in state.m:
            state.m[name] = np.zeros_like(p.data)
            state.v[name] = np.zeros_like(p.data)
        m, v = state.m[name], state.v[name]
        m *= ADAM_BETA1
        m += (1.0 - ADAM_BETA1) * g
        v *= ADAM_BETA2
        v += (1.0 - ADAM_BETA2) * g * g
        p.data -= lrs[group_of(name)] * (m / c1) / (np.sqrt(v / c2) + ADAM_EPS)


def lr_at(step: int, cfg: TrainConfig) -> tuple[float, float]:
    """Step-decayed ``(lr_main, lr_dgw)``."""
    if step < 0:
        raise ContractError("step must be >= 0")
    f = cfg.decay_gamma_main ** (step // cfg.decay_step)
    return cfg.learning_rate_main * f, cfg.learning_rate_dgw * f


# ---------------------------------------------------------------- one step


@dataclass
class StepReport:
    step: int
    L_re: float
    L_ent: float | None = None
    L_swap: float | None = None
    mean_W: float = 1.0
    mean_W_conflicting: float | None = None
    mean_W_aligned: float | None = None
    acc_i: float = 0.0

    def record(self) -> dict:
        out = {"step": self.step, "L_re": self.L_re}
        if self.L_swap is not None:
            out["L_swap"] = self.L_swap
        if self.L_ent is not None:
            out["L_ent"] = self.L_ent
        out.update(mean_W=self.mean_W, mean_W_conflicting=self.mean_W_conflicting,
                   mean_W_aligned=self.mean_W_aligned, acc_i=self.acc_i)
        return out


def _masked_mean(x: np.ndarray, mask: np.ndarray):
    return float(x[mask].mean()) if mask.any() else None


def train_step(model: DgwModel, opt: OptimizerState, x: np.ndarray, y: np.ndarray,
               conflicting: np.ndarray, step: int, cfg: TrainConfig,
               rng: np.random.Generator) -> StepReport:
    """Forward, loss, backward and one optimizer update for a minibatch."""
    w = cfg.weights()
    model.params.zero_grads()
    if cfg.vanilla:
        logits = model.classify("i", model.encode(x))
        loss = nc.reduce_mean(ce(logits, y))
        report = StepReport(step, loss.item())
    else:
        e, e_i, e_b, rec_i, rec_b, alpha = model.forward_train(x, rng, beta=cfg.beta_mixup)
        logits = model.classify("i", e_i)
        terms = loss_re(logits, model.classify("b", e_b), y, rec_i, rec_b, w)
        l_swap = None
        if step > cfg.t_aug:
            perm = rng.permutation(len(y))
            e_swap, y_tilde = swap_permute(e, y, perm, model.dims.half)
            s_i, s_b, _, _ = model.branch_views(e_swap, alpha, rng)
            l_swap = loss_swap(model.classify("i", s_i), model.classify("b", s_b), y, y_tilde,
                               terms.weight, w)
        loss = loss_total(terms.total, l_swap, w)
        W = terms.weight
        report = StepReport(step, terms.total.item(), terms.ent.item(),
                            None if l_swap is None else l_swap.item(), float(W.mean()),
                            _masked_mean(W, conflicting), _masked_mean(W, ~conflicting))
    report.acc_i = float((logits.data.argmax(axis=1) == y).mean())
    nc.backward(loss)
    lr_main, lr_dgw = lr_at(step, cfg)
    optimizer_step(model.params, opt, {"main": lr_main, "dgw": lr_dgw}, model.group_of)
    return report


# ---------------------------------------------------------------- data order


def epoch_order(n: int, epoch: int, seed: int) -> np.ndarray:
    return nc.make_rng(seed, nc.STREAM_DATA, 1, epoch).permutation(n)


def batch_indices(n: int, batch_size: int, step: int, seed: int) -> np.ndarray:
    """Indices of minibatch ``step``; the last short batch of an epoch is kept."""
    per_epoch = math.ceil(n / batch_size)
    epoch, j = divmod(step, per_epoch)
    return epoch_order(n, epoch, seed)[j * batch_size:(j + 1) * batch_size]


def step_rng(seed: int, step: int) -> np.random.Generator:
    return nc.make_rng(seed, nc.STREAM_TRAIN, step)


# ---------------------------------------------------------------- checkpoints

CKPT_MAGIC = b"DGWC"
CKPT_VERSION = 1


def save_checkpoint(path, model: DgwModel, opt: OptimizerState, cfg: TrainConfig, step: int) -> None:
    """Write parameters and Adam moments as sorted ``(name, shape, f64)`` records."""
    records = [(n, t.data) for n, t in model.params.items()]
    for n in model.params.names():
        if n in opt.m:
            records.append((f"adam.m.{n}", opt.m[n]))
            records.append((f"adam.v.{n}", opt.v[n]))
    records.sort(key=lambda r: r[0])
    cfg_bytes = cfg.to_text().encode()
    meta = json.dumps({"step": step, "adam_step": opt.step}, sort_keys=True).encode()
    parts = [CKPT_MAGIC, struct.pack("<HI", CKPT_VERSION, len(cfg_bytes)), cfg_bytes,
             struct.pack("<I", len(meta)), meta, struct.pack("<I", len(records))]
    for name, arr in records:
        nb = name.encode()
        parts.append(struct.pack("<HB", len(nb), arr.ndim))
        parts.append(nb)
        parts.append(struct.pack(f"<{arr.ndim}I", *arr.shape))
        parts.append(np.ascontiguousarray(arr, dtype="<f8").tobytes())
    Path(path).write_bytes(b"".join(parts))


def read_checkpoint(path):
    """Return ``(cfg, meta, records)`` from a checkpoint file."""
    raw = Path(path).read_bytes()
    off = 0

    def take(n):
        nonlocal off
        if off + n > len(raw):
            raise datagen.FormatError("truncated checkpoint", off)
        chunk = raw[off:off + n]
        off += n
        return chunk

    if take(4) != CKPT_MAGIC:
        raise datagen.FormatError("bad checkpoint magic", 0)
    version, clen = struct.unpack("<HI", take(6))
    if version != CKPT_VERSION:
        raise datagen.FormatError(f"unsupported checkpoint version {version}", 4)
    cfg = TrainConfig.from_text(take(clen).decode())
    (mlen,) = struct.unpack("<I", take(4))
    meta = json.loads(take(mlen))
    (count,) = struct.unpack("<I", take(4))
    records = {}
    for _ in range(count):
        nlen, ndim = struct.unpack("<HB", take(3))
        name = take(nlen).decode()
        shape = struct.unpack(f"<{ndim}I", take(4 * ndim))
        size = int(np.prod(shape)) if ndim else 1
        records[name] = np.frombuffer(take(8 * size), dtype="<f8").reshape(shape).astype(np.float64)
    return cfg, meta, records


def load_checkpoint(path, cfg: TrainConfig | None = None):
    """Rebuild ``(model, opt, cfg, step)``; ``cfg`` dims must match the file's."""
    file_cfg, meta, records = read_checkpoint(path)
    if cfg is not None and cfg.dims() != file_cfg.dims():
        raise ConfigError(f"checkpoint dims {file_cfg.dims()} do not match config dims {cfg.dims()}")
    cfg = cfg or file_cfg
    model = DgwModel(cfg.dims(), cfg.seed)
    model.params.load_state({n: a for n, a in records.items() if not n.startswith("adam.")})
    opt = OptimizerState(step=meta["adam_step"])
    for n in model.params.names():
        if f"adam.m.{n}" in records:
            opt.m[n] = records[f"adam.m.{n}"].copy()
            opt.v[n] = records[f"adam.v.{n}"].copy()
    return model, opt, cfg, meta["step"]


# ---------------------------------------------------------------- full run


def load_splits(cfg: TrainConfig):
    root = Path(cfg.dataset)
    try:
        train = datagen.load(root / "train.dgwd")
        test = datagen.load(root / "test.dgwd")
    except OSError as exc:
        raise OSError(f"cannot read dataset under {root}: {exc}") from exc
    if train.side != cfg.side or train.num_classes != cfg.num_classes:
        raise ConfigError(f"dataset is K={train.num_classes}, side={train.side}; "
                          f"config expects K={cfg.num_classes}, side={cfg.side}")
    return train, test


def _ckpt_path(run_dir: Path, step: int) -> Path:
    return run_dir / "checkpoints" / f"step_{step:07d}.dgwc"


def train(cfg: TrainConfig, resume_from=None, stop_after: int | None = None) -> Path:
    """Run the full loop and return the run directory.

    ``resume_from`` continues from a checkpoint; ``stop_after`` ends the run
    early after that many total steps (used to test resumption).
    """
    run_dir = Path(cfg.run_dir)
    try:
        (run_dir / "checkpoints").mkdir(parents=True, exist_ok=True)
        (run_dir / "config.echo").write_text(cfg.to_text())
    except OSError as exc:
        raise OSError(f"cannot prepare run directory {run_dir}: {exc}") from exc
    train_ds, test_ds = load_splits(cfg)
    x_all, y_all, c_all = train_ds.flat(), train_ds.labels, train_ds.conflicting

    start = 0
    if resume_from is not None:
        model, opt, _, start = load_checkpoint(resume_from, cfg)
    else:
        model, opt = DgwModel(cfg.dims(), cfg.seed), OptimizerState()
    end = cfg.total_steps if stop_after is None else min(stop_after, cfg.total_steps)

    metrics_path = run_dir / "metrics.jsonl"
    mode = "a" if resume_from is not None else "w"
    with open(metrics_path, mode) as fh:
        for step in range(start, end):
            idx = batch_indices(len(y_all), cfg.batch_size, step, cfg.seed)
            rep = train_step(model, opt, x_all[idx], y_all[idx], c_all[idx], step, cfg,
                             step_rng(cfg.seed, step))
            fh.write(json.dumps(rep.record()) + "\n")
            done = step + 1
            if done % cfg.eval_interval == 0 or done == cfg.total_steps:
                report = analysis.evaluate(model, test_ds)
                fh.write(json.dumps({"step": done, "eval": report.to_dict()}) + "\n")
                log.info("step %d eval %s", done, report.to_dict())
            if done % cfg.checkpoint_interval == 0 or done == end:
                save_checkpoint(_ckpt_path(run_dir, done), model, opt, cfg, done)
    if end == cfg.total_steps:
        report = analysis.evaluate(model, test_ds)
        (run_dir / "eval.json").write_text(json.dumps(report.to_dict(), sort_keys=True) + "\n")
    return run_dir


def final_checkpoint(run_dir) -> Path:
    ckpts = sorted((Path(run_dir) / "checkpoints").glob("step_*.dgwc"))
    if not ckpts:
        raise FileNotFoundError(f"no checkpoints in {run_dir}")
    return ckpts[-1]
