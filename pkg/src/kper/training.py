"""Epoch loop, Adam, Xavier initialization, early stopping and binary checkpoints."""

from __future__ import annotations

import dataclasses
import math
import struct
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch

from .data import CollaborativeKnowledgeGraph, DatasetSplit, sample_negatives
from .encoders import PARAM_NAMES, ModelParameters
from .evaluation import recall_at
from .model import KPER, batch_sparsity_terms
from .referencing import SeedPool, build_seed_pool, gate_open_probability
from .sampling import EntitySets, TripleNeighborhoods, build_neighborhoods
from .scoring import cross_entropy_from_logits, total_loss

MAGIC = b"KPER"
FORMAT_VERSION = 1
EVAL_EPOCH = 2**31 - 1
BIAS_NAMES = frozenset({"attn_b1", "attn_b2", "probe_bias", "gate_bias"})

# stream tags mixed into [rng_seed, epoch, tag]
_NEG, _SHUFFLE, _GATES = 1, 2, 3


@dataclass
class TrainConfig:
    d: int = 64
    K: int = 2
    l: int = 16
    batch_size: int = 1024
    learning_rate: float = 1e-3
    lambda1: float = 1e-3
    lambda2: float = 1e-4
    eta: float = -0.5
    tau: float = 2.0 / 3.0
    seeds_per_side: int = 64
    seed_exclusion_quantile: float = 0.1
    max_epochs: int = 100
    patience: int = 10
    rng_seed: int = 0
    d_h: int | None = None
    dtype: str = "float32"
    use_referencing: bool = True
    masked_referencing: bool = False
    mask_target: bool = True
    attentive_kg: bool = True
    resample_negatives: bool = True
    resample_neighborhoods: bool = True
    ce_reduction: str = "sum"
    threads: int = 1

    def __post_init__(self):
        if self.K < 0 or self.l < 1 or self.d < 1 or self.batch_size < 1:
            raise ValueError("need K >= 0, l >= 1, d >= 1, batch_size >= 1")
        if not (self.tau > 0 and self.eta < 0):
            raise ValueError("need tau > 0 and eta < 0")
        if self.dtype not in ("float32", "float64"):
            raise ValueError(f"dtype must be float32 or float64, got {self.dtype}")
        if self.ce_reduction not in ("sum", "mean"):
            raise ValueError("ce_reduction must be 'sum' or 'mean'")

    @property
    def hidden(self) -> int:
        return self.d if self.d_h is None else self.d_h

    @property
    def torch_dtype(self):
        return torch.float32 if self.dtype == "float32" else torch.float64

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    @classmethod
    def from_dict(cls, values: dict) -> TrainConfig:
        known = {f.name: f for f in dataclasses.fields(cls)}
        unknown = set(values) - set(known)
        if unknown:
            raise ValueError(f"unknown config keys: {sorted(unknown)}")
        return cls(**values)

    def to_text(self) -> str:
        return "".join(f"{k}={v!r}\n" for k, v in self.to_dict().items())

    @classmethod
    def from_text(cls, items: dict[str, str]) -> TrainConfig:
        import ast

        return cls.from_dict({k: ast.literal_eval(v) for k, v in items.items()})


def xavier_bound(shape: tuple[int, ...]) -> float:
    """sqrt(6 / (fan_in + fan_out)) with a vector treated as a single column."""
    fan_out, fan_in = (shape[0], 1) if len(shape) == 1 else (shape[0], int(np.prod(shape[1:])))
    return math.sqrt(6.0 / (fan_in + fan_out))


def parameter_shapes(config: TrainConfig, num_users: int, num_entities: int, num_relations: int,
                     num_seeds: int) -> dict[str, tuple[int, ...]]:
    d, dh = config.d, config.hidden
    return {
        "user_table": (num_users, d), "entity_table": (num_entities, d), "relation_table": (num_relations, d),
        "attn_w1": (dh, 2 * d), "attn_b1": (dh,), "attn_w2": (1, dh), "attn_b2": (1,),
        "seed_table": (num_seeds, 2 * d), "probe_weight": (num_seeds, 2 * d), "probe_bias": (num_seeds,),
        "gate_weight": (d, 2 * d), "gate_bias": (d,), "gate_query": (d,),
    }


def init_parameters(config: TrainConfig, num_users: int, num_entities: int, num_relations: int,
                    num_seeds: int, rng_seed: int | None = None) -> ModelParameters:
    """Xavier-uniform weights and zero biases, drawn in a fixed order from one stream."""
    rng = np.random.default_rng(config.rng_seed if rng_seed is None else rng_seed)
    out = {}
    for name, shape in parameter_shapes(config, num_users, num_entities, num_relations, num_seeds).items():
        if name in BIAS_NAMES:
            arr = np.zeros(shape)
        else:
            b = xavier_bound(shape)
            arr = rng.uniform(-b, b, size=shape)
        out[name] = torch.from_numpy(arr).to(config.torch_dtype)
    return ModelParameters.from_tensors(out)


@dataclass
class AdamState:
    m: dict[str, torch.Tensor]
    v: dict[str, torch.Tensor]
    step: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    @classmethod
    def zeros_like(cls, params: ModelParameters) -> AdamState:
        t = params.tensors()
        return cls({k: torch.zeros_like(v) for k, v in t.items()},
                   {k: torch.zeros_like(v) for k, v in t.items()})


@torch.no_grad()
def adam_step(params: dict[str, torch.Tensor], grads: dict[str, torch.Tensor], state: AdamState,
              lr: float) -> None:
    """One bias-corrected Adam update, in place, over parameters in a fixed name order."""
    state.step += 1
    b1, b2 = state.beta1, state.beta2
    c1 = 1.0 - b1 ** state.step
    c2 = 1.0 - b2 ** state.step
    for name in params:
        g = grads[name]
        m = state.m[name].mul_(b1).add_(g, alpha=1.0 - b1)
        v = state.v[name].mul_(b2).addcmul_(g, g, value=1.0 - b2)
        params[name].sub_(lr * (m / c1) / ((v / c2).sqrt() + state.eps))


@dataclass
class Checkpoint:
    params: ModelParameters
    config: TrainConfig
    epoch: int
    best_metric: float
    pool: SeedPool
    counts: dict[str, int]
    extra: dict[str, torch.Tensor] = field(default_factory=dict)
    meta: dict[str, str] = field(default_factory=dict)

    def build_model(self) -> KPER:
        c = self.config
        return KPER(self.params, self.pool, self.counts["users"], self.counts["items"], c.K, c.tau, c.eta,
                    use_referencing=c.use_referencing, masked_referencing=c.masked_referencing,
                    mask_target=c.mask_target, attentive_kg=c.attentive_kg)


def checkpoint_bytes(ckpt: Checkpoint) -> bytes:
    """Serialize: magic, version, tensor header, float64 payload, key=value block."""
    tensors: dict[str, np.ndarray] = {}
    for name, t in ckpt.params.tensors().items():
        tensors[name] = t.detach().to(torch.float64).numpy()
    tensors["pool.user_seeds"] = ckpt.pool.user_seeds.astype(np.float64)
    tensors["pool.item_seeds"] = ckpt.pool.item_seeds.astype(np.float64)
    tensors["pool.user_degrees"] = ckpt.pool.user_degrees.astype(np.float64)
    tensors["pool.item_degrees"] = ckpt.pool.item_degrees.astype(np.float64)
    for name, t in ckpt.extra.items():
        tensors[name] = t.detach().to(torch.float64).numpy()

    head = [MAGIC, struct.pack("<II", FORMAT_VERSION, len(tensors))]
    for name, arr in tensors.items():
        enc = name.encode("utf-8")
        head.append(struct.pack("<H", len(enc)) + enc + struct.pack("<B", arr.ndim))
        head.append(struct.pack(f"<{arr.ndim}Q", *arr.shape))
    body = [np.ascontiguousarray(arr, dtype="<f8").tobytes() for arr in tensors.values()]
    lines = ckpt.config.to_text()
    lines += f"meta.epoch={ckpt.epoch!r}\nmeta.best_metric={float(ckpt.best_metric)!r}\n"
    lines += "".join(f"meta.count.{k}={v!r}\n" for k, v in sorted(ckpt.counts.items()))
    lines += "".join(f"meta.extra.{k}={v}\n" for k, v in sorted(ckpt.meta.items()))
    text = lines.encode("utf-8")
    return b"".join(head + body + [struct.pack("<Q", len(text)), text])


def save_checkpoint(ckpt: Checkpoint, path) -> None:
    data = checkpoint_bytes(ckpt)
    tmp = Path(str(path) + ".tmp")
    tmp.write_bytes(data)
    tmp.replace(path)


class CheckpointError(ValueError):
    pass


def parse_checkpoint(data: bytes, source: str = "<bytes>") -> Checkpoint:
    if data[:4] != MAGIC:
        raise CheckpointError(f"{source}: not a checkpoint (bad magic)")
    version, n = struct.unpack_from("<II", data, 4)
    if version != FORMAT_VERSION:
        raise CheckpointError(f"{source}: unsupported checkpoint version {version}")
    pos = 12
    header = []
    for _ in range(n):
        (ln,) = struct.unpack_from("<H", data, pos)
        pos += 2
        name = data[pos:pos + ln].decode("utf-8")
        pos += ln
        (rank,) = struct.unpack_from("<B", data, pos)
        pos += 1
        dims = struct.unpack_from(f"<{rank}Q", data, pos)
        pos += 8 * rank
        header.append((name, dims))
    arrays = {}
    for name, dims in header:
        count = int(np.prod(dims)) if dims else 1
        arrays[name] = np.frombuffer(data, dtype="<f8", count=count, offset=pos).reshape(dims).copy()
        pos += 8 * count
    (tlen,) = struct.unpack_from("<Q", data, pos)
    pos += 8
    text = data[pos:pos + tlen].decode("utf-8")
    if pos + tlen != len(data):
        raise CheckpointError(f"{source}: trailing or truncated data")

    items = dict(line.split("=", 1) for line in text.splitlines() if line)
    cfg_items = {k: v for k, v in items.items() if not k.startswith("meta.")}
    config = TrainConfig.from_text(cfg_items)
    dt = config.torch_dtype
    params = ModelParameters.from_tensors({k: torch.from_numpy(arrays[k]).to(dt) for k in PARAM_NAMES})
    ints = lambda k: arrays[k].astype(np.int64)
    pool = SeedPool(ints("pool.user_seeds"), ints("pool.item_seeds"),
                    ints("pool.user_degrees"), ints("pool.item_degrees"))
    extra = {k: torch.from_numpy(v).to(dt) for k, v in arrays.items()
             if k not in PARAM_NAMES and not k.startswith("pool.")}
    counts = {k[len("meta.count."):]: int(v) for k, v in items.items() if k.startswith("meta.count.")}
    meta = {k[len("meta.extra."):]: v for k, v in items.items() if k.startswith("meta.extra.")}
    return Checkpoint(params, config, int(items["meta.epoch"]), float(items["meta.best_metric"]),
                      pool, counts, extra, meta)


def load_checkpoint(path) -> Checkpoint:
    return parse_checkpoint(Path(path).read_bytes(), str(path))


class NonFiniteLossError(FloatingPointError):
    pass


@dataclass
class TrainResult:
    best: Checkpoint
    last: Checkpoint
    history: list[dict]


LOG_HEADER = "epoch\tce\tsp\tl2\ttotal\tval_recall@10\tseconds"


def _log_line(h: dict) -> str:
    return (f"{h['epoch']}\t{h['ce']!r}\t{h['sp']!r}\t{h['l2']!r}\t{h['total']!r}\t"
            f"{h['val_recall@10']!r}\t{h['seconds']:.3f}")


def train_view(g: CollaborativeKnowledgeGraph, split: DatasetSplit) -> CollaborativeKnowledgeGraph:
    """Graph restricted to training interactions; neighborhoods and seeds come from it."""
    return g.with_interactions(split.train)


def epoch_rows(g: CollaborativeKnowledgeGraph, split: DatasetSplit, config: TrainConfig, epoch: int) -> np.ndarray:
    """Training positives plus this epoch's negatives (or the split's fixed ones)."""
    pos = split.train[split.train[:, 2] == 1]
    neg = split.train[split.train[:, 2] == 0]
    if config.resample_negatives or len(neg) == 0:
        tag_epoch = epoch if config.resample_negatives else 0
        neg = sample_negatives(g, pos, [config.rng_seed, tag_epoch, _NEG])
    return np.concatenate([pos, neg])


def _generator(seed_words) -> torch.Generator:
    s = int(np.random.default_rng(seed_words).integers(0, 2**62))
    return torch.Generator().manual_seed(s)


def _dump_batch(out_dir, epoch: int, b: int, users, items, labels, parts: dict) -> str:
    msg = f"non-finite loss at epoch {epoch} batch {b}: " + ", ".join(f"{k}={v}" for k, v in parts.items())
    if out_dir is not None:
        path = Path(out_dir) / f"nonfinite_epoch{epoch}_batch{b}.tsv"
        with open(path, "w", encoding="ascii") as fh:
            fh.write("# " + msg + "\n# user\titem\tlabel\n")
            for row in zip(users.tolist(), items.tolist(), labels.tolist()):
                fh.write("\t".join(map(str, row)) + "\n")
        msg += f" (batch written to {path})"
    return msg


# settings a resumed run may change without breaking the saved trajectory
RESUME_OVERRIDABLE = frozenset({"max_epochs", "patience", "threads"})


class Trainer:
    """Holds everything fixed for a run; :meth:`run_epoch` advances one epoch."""

    def __init__(self, g: CollaborativeKnowledgeGraph, split: DatasetSplit, config: TrainConfig,
                 out_dir=None, resume: Checkpoint | None = None):
        torch.set_num_threads(max(1, int(config.threads)))
        self.g, self.split, self.config = g, split, config
        self.out_dir = Path(out_dir) if out_dir is not None else None
        self.g_train = train_view(g, split)
        self.sets = EntitySets.build(self.g_train, config.K)
        self.counts = {"users": g.num_users, "items": g.num_items,
                       "entities": g.num_entities, "relations": g.num_relations}
        if resume is None:
            self.pool = build_seed_pool(self.g_train, config.seeds_per_side, config.seed_exclusion_quantile)
            self.params = init_parameters(config, g.num_users, g.num_entities, g.num_relations, self.pool.size)
            self.adam = AdamState.zeros_like(self.params)
            self.epoch, self.best_metric, self.bad_epochs = 0, -math.inf, 0
            self.best_params = self.params.detached_copy()
            self.best_epoch = 0
        else:
            self._restore(resume)
        self.model = KPER(self.params, self.pool, g.num_users, g.num_items, config.K, config.tau, config.eta,
                          use_referencing=config.use_referencing, masked_referencing=config.masked_referencing,
                          mask_target=config.mask_target, attentive_kg=config.attentive_kg)
        self._eval_nb: TripleNeighborhoods | None = None
        self.history: list[dict] = []

    def _restore(self, ck: Checkpoint) -> None:
        saved, now = ck.config.to_dict(), self.config.to_dict()
        changed = sorted(k for k in now if k not in RESUME_OVERRIDABLE and now[k] != saved[k])
        if changed:
            raise CheckpointError(f"cannot change {', '.join(changed)} when resuming")
        if ck.counts != {"users": self.g.num_users, "items": self.g.num_items,
                         "entities": self.g.num_entities, "relations": self.g.num_relations}:
            raise CheckpointError("checkpoint was trained on a graph with different id-space sizes")
        self.pool = ck.pool
        self.params = ck.params.detached_copy()
        names = PARAM_NAMES
        self.adam = AdamState({k: ck.extra[f"adam.m.{k}"].clone() for k in names},
                              {k: ck.extra[f"adam.v.{k}"].clone() for k in names},
                              step=int(ck.meta["adam_step"]))
        self.best_params = ModelParameters.from_tensors({k: ck.extra[f"best.{k}"].clone() for k in names})
        self.epoch = ck.epoch
        self.best_metric = ck.best_metric
        self.bad_epochs = int(ck.meta["bad_epochs"])
        self.best_epoch = int(ck.meta["best_epoch"])

    @property
    def eval_neighborhoods(self) -> TripleNeighborhoods:
        if self._eval_nb is None:
            c = self.config
            self._eval_nb = build_neighborhoods(self.g_train, self.sets, c.l, c.K, c.rng_seed, EVAL_EPOCH)
        return self._eval_nb

    def neighborhoods(self, epoch: int) -> TripleNeighborhoods:
        c = self.config
        return build_neighborhoods(self.g_train, self.sets, c.l, c.K, c.rng_seed,
                                   epoch if c.resample_neighborhoods else 1)

    def batch_loss(self, users, items, labels, nb, generator, gates: str = "sample"):
        c = self.config
        out = self.model.forward(users, items, nb, gates=gates, generator=generator)
        ce = cross_entropy_from_logits(labels, out.logits, reduction=c.ce_reduction)
        if c.use_referencing:
            sp = (batch_sparsity_terms(out.user.beta, users, c.tau, c.eta)
                  + batch_sparsity_terms(out.item.beta, items, c.tau, c.eta))
        else:
            sp = torch.zeros((), dtype=ce.dtype)
        return total_loss(ce, sp, self.params, c.lambda1, c.lambda2), out

    def run_epoch(self) -> dict:
        c = self.config
        epoch = self.epoch + 1
        t0 = time.perf_counter()
        rows = epoch_rows(self.g, self.split, c, epoch)
        rows = rows[np.random.default_rng([c.rng_seed, epoch, _SHUFFLE]).permutation(len(rows))]
        nb = self.neighborhoods(epoch)
        gen = _generator([c.rng_seed, epoch, _GATES])
        params = self.params.tensors()
        sums = {"ce": 0.0, "sp": 0.0, "total": 0.0}
        gate_open, gate_n = 0.0, 0
        for b, s in enumerate(range(0, len(rows), c.batch_size)):
            chunk = rows[s:s + c.batch_size]
            users = torch.from_numpy(chunk[:, 0].copy())
            items = torch.from_numpy(chunk[:, 1].copy())
            labels = torch.from_numpy(chunk[:, 2].copy())
            self.params.requires_grad_(True)
            loss, out = self.batch_loss(users, items, labels, nb, gen)
            parts = loss.as_floats()
            if not all(math.isfinite(v) for v in parts.values()):
                self.params.requires_grad_(False)
                raise NonFiniteLossError(_dump_batch(self.out_dir, epoch, b, users, items, labels, parts))
            grads = torch.autograd.grad(loss.total, list(params.values()), allow_unused=True)
            self.params.requires_grad_(False)
            grads = {k: torch.zeros_like(p) if g is None else g for (k, p), g in zip(params.items(), grads)}
            adam_step(params, grads, self.adam, c.learning_rate)
            for k in sums:
                sums[k] += parts[k]
            if out.user.beta is not None:
                with torch.no_grad():
                    for beta in (out.user.beta, out.item.beta):
                        gate_open += float(gate_open_probability(beta, c.tau, c.eta).sum())
                        gate_n += beta.numel()

        val = recall_at(self.model.scorer(self.eval_neighborhoods), self.split, 10)
        self.epoch = epoch
        if val > self.best_metric:
            self.best_metric, self.bad_epochs, self.best_epoch = val, 0, epoch
            self.best_params = self.params.detached_copy()
        else:
            self.bad_epochs += 1
        record = {"epoch": epoch, "ce": sums["ce"], "sp": sums["sp"], "l2": float(self.params.l2()),
                  "total": sums["total"], "val_recall@10": val, "seconds": time.perf_counter() - t0,
                  "gate_open": gate_open / gate_n if gate_n else float("nan")}
        self.history.append(record)
        return record

    def should_stop(self) -> bool:
        return self.bad_epochs >= self.config.patience or self.epoch >= self.config.max_epochs

    def state_checkpoint(self) -> Checkpoint:
        """Full resumable state: current weights, Adam moments and the best weights so far."""
        extra = {}
        for k in PARAM_NAMES:
            extra[f"adam.m.{k}"] = self.adam.m[k]
            extra[f"adam.v.{k}"] = self.adam.v[k]
        for k, v in self.best_params.tensors().items():
            extra[f"best.{k}"] = v
        meta = {"adam_step": str(self.adam.step), "bad_epochs": str(self.bad_epochs),
                "best_epoch": str(self.best_epoch), "split_seed": str(self.split.split_seed)}
        return Checkpoint(self.params.detached_copy(), self.config, self.epoch, self.best_metric,
                          self.pool, dict(self.counts), extra, meta)

    def best_checkpoint(self) -> Checkpoint:
        meta = {"best_epoch": str(self.best_epoch), "split_seed": str(self.split.split_seed)}
        return Checkpoint(self.best_params.detached_copy(), self.config, self.best_epoch, self.best_metric,
                          self.pool, dict(self.counts), {}, meta)


def train(g: CollaborativeKnowledgeGraph, split: DatasetSplit, config: TrainConfig, out_dir=None,
          resume: Checkpoint | None = None, log=None) -> TrainResult:
    """Train until early stopping or ``max_epochs``; return the best and last checkpoints.

    With ``out_dir`` the epoch log goes to ``train_log.tsv`` and the
    checkpoints to ``best.ckpt`` and ``last.ckpt`` after every epoch.
    """
    trainer = Trainer(g, split, config, out_dir, resume)
    log_fh = None
    if out_dir is not None:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        log_path = out / "train_log.tsv"
        log_fh = open(log_path, "a" if resume is not None and log_path.exists() else "w", encoding="ascii")
        if log_fh.tell() == 0:
            log_fh.write(LOG_HEADER + "\n")
    try:
        while not trainer.should_stop():
            rec = trainer.run_epoch()
            line = _log_line(rec)
            if log_fh is not None:
                log_fh.write(line + "\n")
                log_fh.flush()
                save_checkpoint(trainer.state_checkpoint(), Path(out_dir) / "last.ckpt")
                save_checkpoint(trainer.best_checkpoint(), Path(out_dir) / "best.ckpt")
            if log is not None:
                log(line)
    finally:
        if log_fh is not None:
            log_fh.close()
    return TrainResult(trainer.best_checkpoint(), trainer.state_checkpoint(), trainer.history)


def evaluation_model(ckpt: Checkpoint, g: CollaborativeKnowledgeGraph, split: DatasetSplit):
    """Model and the fixed evaluation neighborhoods for a checkpoint on its prepared data."""
    counts = {"users": g.num_users, "items": g.num_items, "entities": g.num_entities, "relations": g.num_relations}
    if ckpt.counts != counts:
        raise CheckpointError(f"checkpoint id spaces {ckpt.counts} do not match the data {counts}")
    c = ckpt.config
    g_train = train_view(g, split)
    nb = build_neighborhoods(g_train, EntitySets.build(g_train, c.K), c.l, c.K, c.rng_seed, EVAL_EPOCH)
    return ckpt.build_model(), nb
