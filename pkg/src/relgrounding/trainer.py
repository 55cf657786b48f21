"""Training loop, learning-rate schedule and checkpoint persistence."""
from __future__ import annotations

import dataclasses
import hashlib
import json
import logging
import math
import struct
import warnings
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Callable, Sequence

import numpy as np
import torch
import yaml

from relgrounding.batch import collate
from relgrounding.corpus import GroundingInstance, corpus_stats, load_corpus
from relgrounding.metrics import evaluate
from relgrounding.model import GroundingNet, ModelConfig, infer

log = logging.getLogger(__name__)

FORMAT_VERSION = 1
MAGIC = b"RGCKPT\x00"
LOG_COLUMNS = ("iter", "l_rec", "l_reg", "l_rel", "l_rank", "total", "val_acc")


class TrainingAborted(RuntimeError):
    pass


class CheckpointError(RuntimeError):
    pass


@dataclass
class RunConfig:
    # model and matching
    M: int = 20
    K: int = 5
    d: int = 32
    word_dim: int = 32
    hidden: int = 32
    semantic_dim: int = 16
    C_r: int = 0  # 0: take from the corpus
    vocab_size: int = 0  # 0: take from the corpus
    tau: float = 0.6
    # objective
    lambda1: float = 0.1
    lambda2: float = 1.0
    lambda3: float = 1.0
    margin: float = 0.1
    attention_scale: float = 1.0
    # optimization
    lr0: float = 1e-3
    weight_decay: float = 5e-4
    momentum: float = 0.9
    batch_size: int = 40
    total_iters: int = 80_000
    lr_milestones: tuple[float, ...] = (0.4, 0.5)
    reg_warmup_fraction: float = 7.5 / 80
    grad_clip: float = 10.0
    seed: int = 0
    dtype: str = "float32"
    # bookkeeping
    train_path: str = ""
    val_path: str = ""
    val_every: int = 0  # 0: only at the end
    log_every: int = 50
    # ablation flags
    use_semantic_fusion: bool = True
    use_topk: bool = True
    use_regression: bool = True
    use_graph_and_relation: bool = True
    use_rank: bool = True
    use_rec: bool = True

    def __post_init__(self) -> None:
        self.lr_milestones = tuple(float(m) for m in self.lr_milestones)
        for name in ("M", "K", "d", "batch_size", "total_iters"):
            if getattr(self, name) <= 0:
                raise ValueError(f"{name} must be positive")
        if self.K > self.M:
            raise ValueError("K must not exceed M")
        if not 0.0 < self.tau < 1.0:
            raise ValueError("tau must lie in (0, 1)")
        if list(self.lr_milestones) != sorted(self.lr_milestones) or any(
            not 0.0 < m < 1.0 for m in self.lr_milestones
        ):
            raise ValueError("lr_milestones must be ascending fractions in (0, 1)")
        if not 0.0 <= self.reg_warmup_fraction <= 1.0:
            raise ValueError("reg_warmup_fraction must lie in [0, 1]")
        if self.dtype not in ("float32", "float64"):
            raise ValueError("dtype must be float32 or float64")

    @property
    def weights(self) -> tuple[float, float, float]:
        return (self.lambda1, self.lambda2, self.lambda3)

    @property
    def torch_dtype(self) -> torch.dtype:
        return getattr(torch, self.dtype)

    def replace(self, **changes: Any) -> RunConfig:
        return dataclasses.replace(self, **changes)

    def to_dict(self) -> dict[str, Any]:
        out = dataclasses.asdict(self)
        out["lr_milestones"] = list(self.lr_milestones)
        return out

    @classmethod
    def from_dict(cls, values: dict[str, Any]) -> RunConfig:
        known = {f.name: f for f in dataclasses.fields(cls)}
        unknown = set(values) - set(known)
        if unknown:
            raise ValueError(f"unknown config keys: {sorted(unknown)}")
        return cls(**values)

    @classmethod
    def load(cls, path: str | Path, overrides: dict[str, Any] | None = None) -> RunConfig:
        values = yaml.safe_load(Path(path).read_text()) or {}
        if not isinstance(values, dict):
            raise ValueError(f"{path}: expected a flat key-value mapping")
        values.update(overrides or {})
        return cls.from_dict(values)

    def save(self, path: str | Path) -> None:
        Path(path).write_text(yaml.safe_dump(self.to_dict(), sort_keys=False))


def learning_rate(config: RunConfig, iteration: int) -> float:
    """lr for 1-based ``iteration``: x0.1 after each milestone fraction of the run."""
    passed = sum(iteration > m * config.total_iters for m in config.lr_milestones)
    return config.lr0 * 0.1**passed


def regression_active(config: RunConfig, iteration: int) -> bool:
    return config.use_regression and iteration > config.reg_warmup_fraction * config.total_iters


def model_config(config: RunConfig, stats: dict[str, int]) -> ModelConfig:
    num_relations = config.C_r or stats["max_relation"]
    vocab = config.vocab_size or stats["max_token"] + 1
    return ModelConfig(
        vocab_size=vocab,
        feature_dim=stats["feature_dim"],
        num_semantic_ids=max(stats["max_category"], stats["max_concept"]) + 1,
        num_relations=num_relations,
        dim=config.d,
        word_dim=config.word_dim,
        hidden=config.hidden,
        semantic_dim=config.semantic_dim,
        top_k=config.K,
        tau=config.tau,
        margin=config.margin,
        attention_scale=config.attention_scale,
        use_semantic_fusion=config.use_semantic_fusion,
        use_topk=config.use_topk,
        use_regression=config.use_regression,
        use_graph_and_relation=config.use_graph_and_relation,
        use_rank=config.use_rank,
        use_rec=config.use_rec,
    )


def build_model(config: RunConfig, mcfg: ModelConfig) -> GroundingNet:
    torch.manual_seed(config.seed)
    return GroundingNet(mcfg).to(config.torch_dtype)


# -- checkpoints ------------------------------------------------------------


@dataclass
class Checkpoint:
    iteration: int
    config: RunConfig
    model_config: ModelConfig
    params: dict[str, torch.Tensor]
    momentum: dict[str, torch.Tensor] = field(default_factory=dict)
    format_version: int = FORMAT_VERSION

    def digest(self) -> str:
        """Hash of the parameter tensors only."""
        h = hashlib.sha256()
        for name in sorted(self.params):
            h.update(name.encode())
            h.update(self.params[name].contiguous().numpy().tobytes())
        return h.hexdigest()

    def restore(self) -> GroundingNet:
        model = GroundingNet(self.model_config).to(self.config.torch_dtype)
        model.load_state_dict(self.params, strict=True)
        return model


def _tensor_records(prefix: str, tensors: dict[str, torch.Tensor]):
    for name in sorted(tensors):
        yield f"{prefix}/{name}", tensors[name].detach().contiguous().cpu()


def save_checkpoint(ckpt: Checkpoint, path: str | Path) -> None:
    """Self-describing binary: magic, header length, JSON header, raw tensor bytes."""
    index, chunks, offset = [], [], 0
    for name, t in [*_tensor_records("param", ckpt.params), *_tensor_records("momentum", ckpt.momentum)]:
        raw = t.numpy().astype(t.numpy().dtype.newbyteorder("<"), copy=False).tobytes()
        index.append({"name": name, "dtype": str(t.dtype).removeprefix("torch."), "shape": list(t.shape),
                      "offset": offset, "nbytes": len(raw)})
        chunks.append(raw)
        offset += len(raw)
    header = {
        "format_version": ckpt.format_version,
        "iteration": ckpt.iteration,
        "config": ckpt.config.to_dict(),
        "model_config": dataclasses.asdict(ckpt.model_config),
        "tensors": index,
    }
    blob = json.dumps(header, sort_keys=True, separators=(",", ":")).encode()
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<Q", len(blob)))
        fh.write(blob)
        for chunk in chunks:
            fh.write(chunk)


def load_checkpoint(path: str | Path, config: RunConfig | None = None) -> Checkpoint:
    data = Path(path).read_bytes()
    if not data.startswith(MAGIC):
        raise CheckpointError(f"{path}: not a checkpoint file")
    try:
        (hlen,) = struct.unpack_from("<Q", data, len(MAGIC))
        start = len(MAGIC) + 8
        header = json.loads(data[start : start + hlen])
    except (struct.error, ValueError) as exc:
        raise CheckpointError(f"{path}: corrupt header ({exc})") from None
    if header.get("format_version") != FORMAT_VERSION:
        raise CheckpointError(
            f"{path}: format version {header.get('format_version')} != supported {FORMAT_VERSION}"
        )
    body = memoryview(data)[start + hlen :]
    params, momentum = {}, {}
    for rec in header["tensors"]:
        lo, hi = rec["offset"], rec["offset"] + rec["nbytes"]
        if hi > len(body):
            raise CheckpointError(f"{path}: truncated tensor data for {rec['name']}")
        dtype = np.dtype(rec["dtype"]).newbyteorder("<")
        arr = np.frombuffer(body[lo:hi], dtype=dtype).reshape(rec["shape"]).astype(dtype.newbyteorder("="))
        kind, name = rec["name"].split("/", 1)
        (params if kind == "param" else momentum)[name] = torch.from_numpy(arr.copy())
    snapshot = RunConfig.from_dict(header["config"])
    if config is not None and config.to_dict() != snapshot.to_dict():
        changed = sorted(k for k, v in config.to_dict().items() if snapshot.to_dict()[k] != v)
        warnings.warn(f"checkpoint config snapshot overrides the given config for: {', '.join(changed)}")
    return Checkpoint(
        iteration=header["iteration"],
        config=snapshot,
        model_config=ModelConfig(**header["model_config"]),
        params=params,
        momentum=momentum,
        format_version=header["format_version"],
    )


# -- training ---------------------------------------------------------------


@dataclass
class LogRow:
    iteration: int
    rec: float
    reg: float
    rel: float
    rank: float
    total: float
    val_acc: float = math.nan

    def line(self) -> str:
        vals = [self.rec, self.reg, self.rel, self.rank, self.total, self.val_acc]
        return "\t".join([str(self.iteration), *(repr(v) for v in vals)])


@dataclass
class TrainResult:
    model: GroundingNet
    checkpoint: Checkpoint
    history: list[LogRow]


class BatchOrder:
    """Seeded epoch permutations; the batch of any iteration is recomputable."""

    def __init__(self, n: int, batch_size: int, seed: int):
        self.n, self.batch_size, self.seed = n, batch_size, seed
        self._cache: dict[int, np.ndarray] = {}

    def _perm(self, epoch: int) -> np.ndarray:
        if epoch not in self._cache:
            self._cache = {epoch: np.random.default_rng([self.seed, 17, epoch]).permutation(self.n)}
        return self._cache[epoch]

    def indices(self, iteration: int) -> list[int]:
        out = []
        for pos in range((iteration - 1) * self.batch_size, iteration * self.batch_size):
            epoch, k = divmod(pos, self.n)
            out.append(int(self._perm(epoch)[k]))
        return out


def validation_accuracy(model: GroundingNet, val_data: Sequence[GroundingInstance]) -> float:
    return evaluate(infer(list(val_data), model), val_data, thresholds=(0.5,)).acc_at[0.5]


def train(
    config: RunConfig,
    train_data: Sequence[GroundingInstance] | None = None,
    val_data: Sequence[GroundingInstance] | None = None,
    *,
    resume: Checkpoint | None = None,
    stop_after: int | None = None,
    log_path: str | Path | None = None,
    checkpoint_path: str | Path | None = None,
    on_step: Callable[[int, dict[str, float]], None] | None = None,
) -> TrainResult:
    """SGD with momentum on the weighted four-term objective.

    ``stop_after`` ends the run early at that iteration (the schedule still
    follows ``total_iters``), which together with ``resume`` reproduces an
    uninterrupted run exactly.
    """
    if resume is not None:
        config = resume.config
    if train_data is None:
        train_data = load_corpus(config.train_path, num_proposals=config.M)
    if val_data is None and config.val_path:
        val_data = load_corpus(config.val_path, num_proposals=config.M)
    # the training path never sees gt boxes
    train_data = [inst.without_gt() for inst in train_data]
    if any(inst.image.num_proposals != config.M for inst in train_data):
        raise ValueError(f"training corpus does not have M={config.M} proposals per image")

    if resume is not None:
        mcfg = resume.model_config
        model = resume.restore()
        start = resume.iteration
    else:
        stats = corpus_stats(list(train_data) + list(val_data or []))
        mcfg = model_config(config, stats)
        model = build_model(config, mcfg)
        start = 0
    model.train()
    dtype = config.torch_dtype
    params = dict(model.named_parameters())
    optimizer = torch.optim.SGD(
        params.values(), lr=config.lr0, momentum=config.momentum, weight_decay=config.weight_decay
    )
    if resume is not None:
        for name, buf in resume.momentum.items():
            optimizer.state[params[name]]["momentum_buffer"] = buf.clone().to(dtype)

    order = BatchOrder(len(train_data), config.batch_size, config.seed)
    history: list[LogRow] = []
    log_fh = open(log_path, "a" if resume is not None else "w") if log_path else None
    if log_fh is not None and resume is None:
        log_fh.write("\t".join(LOG_COLUMNS) + "\n")
    end = config.total_iters if stop_after is None else min(stop_after, config.total_iters)
    try:
        for it in range(start + 1, end + 1):
            batch = collate([train_data[k] for k in order.indices(it)], dtype)
            out = model(batch)
            bundle = model.losses(batch, out, config.weights, regression_active(config, it))
            values = bundle.as_floats()
            if not all(math.isfinite(v) for v in values.values()):
                raise TrainingAborted(f"non-finite loss at iteration {it}: {values}")
            optimizer.zero_grad(set_to_none=True)
            bundle.total.backward()
            if config.grad_clip > 0:
                torch.nn.utils.clip_grad_norm_(model.parameters(), config.grad_clip)
            for group in optimizer.param_groups:
                group["lr"] = learning_rate(config, it)
            optimizer.step()
            if on_step is not None:
                on_step(it, values)

            is_last = it == config.total_iters
            want_val = val_data is not None and (
                is_last or (config.val_every and it % config.val_every == 0)
            )
            want_log = it % max(config.log_every, 1) == 0 or is_last or want_val
            if want_log:
                row = LogRow(it, values["rec"], values["reg"], values["rel"], values["rank"], values["total"])
                if want_val:
                    row.val_acc = validation_accuracy(model, val_data)
                    log.info("iter %d val acc@0.5 %.4f total %.4f", it, row.val_acc, row.total)
                history.append(row)
                if log_fh is not None:
                    log_fh.write(row.line() + "\n")
                    log_fh.flush()
    finally:
        if log_fh is not None:
            log_fh.close()

    momentum = {
        name: optimizer.state[p]["momentum_buffer"].detach().clone()
        for name, p in params.items()
        if "momentum_buffer" in optimizer.state.get(p, {})
        and optimizer.state[p]["momentum_buffer"] is not None
    }
    ckpt = Checkpoint(
        iteration=end if end > start else start,
        config=config,
        model_config=mcfg,
        params={k: v.detach().clone() for k, v in model.state_dict().items()},
        momentum=momentum,
    )
    if checkpoint_path is not None:
        save_checkpoint(ckpt, checkpoint_path)
    return TrainResult(model, ckpt, history)


def read_metric_log(path: str | Path) -> list[LogRow]:
    rows = []
    lines = Path(path).read_text().splitlines()
    for line in lines[1:]:
        if not line.strip():
            continue
        cells = line.split("\t")
        rows.append(LogRow(int(cells[0]), *(float(c) for c in cells[1:])))
    return rows
