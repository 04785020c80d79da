"""Training recipe: RAdam wrapped in Lookahead, per-epoch lr decay, model selection."""

from __future__ import annotations

import json
import logging
import math
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Mapping, Sequence

import numpy as np

from . import numkit as nk
from .datakit import DataError, Dataset, PaddingSpec, SplitArrays, split_arrays
from .encoders import ExpertSpec, Model, ModelConfig, ModelParams, TextEmbedding, init_params
from .numkit import NumericalError, Tensor
from .objectives import (
    RetrievalReport,
    aggregate_seeds,
    evaluate_direction,
    ranking_loss,
    similarity_matrix,
)

log = logging.getLogger(__name__)

CHECKPOINT_VERSION = 1


class ConfigError(ValueError):
    pass


class IncompatibleCheckpoint(ConfigError):
    pass


@dataclass
class TrainConfig:
    batch_size: int = 128
    margin: float = 0.2
    lr: float = 0.01
    weight_decay: float = 0.001
    lr_decay: float = 0.95
    max_epochs: int = 20
    seeds: int = 3
    base_seed: int = 0
    lookahead_k: int = 5
    lookahead_alpha: float = 0.5
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    train_fraction: float = 1.0
    train_split: str = "train"
    val_split: str = "val"
    test_split: str = "test"

    def __post_init__(self):
        for name in ("batch_size", "lr", "lr_decay", "max_epochs", "seeds", "lookahead_k", "eps"):
            if not getattr(self, name) > 0:
                raise ConfigError(f"{name} must be positive, got {getattr(self, name)!r}")
        if self.margin < 0 or self.weight_decay < 0:
            raise ConfigError("margin and weight_decay must be nonnegative")
        if not 0 < self.lookahead_alpha <= 1:
            raise ConfigError("lookahead_alpha must lie in (0, 1]")
        if not 0 < self.train_fraction <= 1:
            raise ConfigError(f"train_fraction must lie in (0, 1], got {self.train_fraction}")

    @property
    def seed_list(self) -> list[int]:
        return [self.base_seed + i for i in range(self.seeds)]

    def lr_at(self, epoch: int) -> float:
        """Learning rate used during 1-based ``epoch``."""
        return self.lr * self.lr_decay ** (epoch - 1)

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: Mapping) -> "TrainConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ConfigError(f"unknown train config keys {sorted(unknown)}")
        return cls(**dict(d))


# -- optimizer ----------------------------------------------------------------


@dataclass
class OptimizerState:
    step: int = 0
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)
    slow: dict[str, np.ndarray] = field(default_factory=dict)


def radam_step(params: Mapping[str, np.ndarray], grads: Mapping[str, np.ndarray], state: OptimizerState,
               lr: float, weight_decay: float = 0.0, beta1: float = 0.9, beta2: float = 0.999,
               eps: float = 1e-8) -> None:
    """One in-place RAdam update of every array in ``params``.

    Weight decay is coupled: ``wd * theta`` is added to the gradient before
    the moment updates. The adaptive step is used once the variance
    rectification term exceeds 4; before that a bias-corrected momentum step.
    """
    state.step += 1
    t = state.step
    rho_inf = 2.0 / (1.0 - beta2) - 1.0
    beta2_t = beta2**t
    rho_t = rho_inf - 2.0 * t * beta2_t / (1.0 - beta2_t)
    bias1 = 1.0 - beta1**t
    rect = None
    if rho_t > 4.0:
        rect = math.sqrt((rho_t - 4) * (rho_t - 2) * rho_inf / ((rho_inf - 4) * (rho_inf - 2) * rho_t))
    for name, theta in params.items():
        g = grads[name]
        if g.shape != theta.shape:
            raise ValueError(f"gradient for {name} has shape {g.shape}, parameter {theta.shape}")
        if not np.all(np.isfinite(g)):
            raise NumericalError(f"non-finite gradient for parameter {name} at step {t}")
        if weight_decay:
            g = g + weight_decay * theta
        m = state.m.get(name)
        if m is None:
            m = state.m[name] = np.zeros_like(theta)
            state.v[name] = np.zeros_like(theta)
        v = state.v[name]
        m *= beta1
        m += (1.0 - beta1) * g
        v *= beta2
        v += (1.0 - beta2) * g * g
        m_hat = m / bias1
        if rect is None:
            theta -= (lr * m_hat).astype(theta.dtype, copy=False)
        else:
            v_hat = np.sqrt(v / (1.0 - beta2_t))
            theta -= (lr * rect * m_hat / (v_hat + eps)).astype(theta.dtype, copy=False)


def lookahead_sync(fast: Mapping[str, np.ndarray], slow: Mapping[str, np.ndarray], alpha: float,
                   step: int, k: int) -> bool:
    """Every k steps pull the slow weights toward the fast ones and reset fast to slow."""
    if step % k != 0:
        return False
    for name, f in fast.items():
        s = slow[name]
        s += alpha * (f - s)
        f[...] = s
    return True


class LookaheadRAdam:
    def __init__(self, params: ModelParams, config: TrainConfig):
        self.params = params
        self.config = config
        self.state = OptimizerState(slow={k: t.data.copy() for k, t in params})

    def step(self, lr: float) -> None:
        c = self.config
        arrays = {k: t.data for k, t in self.params}
        grads = {k: (t.grad if t.grad is not None else np.zeros_like(t.data)) for k, t in self.params}
        radam_step(arrays, grads, self.state, lr, c.weight_decay, c.beta1, c.beta2, c.eps)
        lookahead_sync(arrays, self.state.slow, c.lookahead_alpha, self.state.step, c.lookahead_k)

    def zero_grad(self) -> None:
        for _, t in self.params:
            t.grad = None


# -- training -----------------------------------------------------------------


@dataclass
class EpochStats:
    epoch: int
    mean_loss: float
    n_batches: int
    lr: float


def batch_inputs(arrays: SplitArrays, sample_idx: np.ndarray, caption_idx: np.ndarray, experts: Sequence[str]):
    feats = {n: (arrays.audio[n].values[sample_idx], arrays.audio[n].mask[sample_idx]) for n in experts}
    return feats, arrays.text.values[caption_idx], arrays.text.mask[caption_idx]


def train_epoch(model: Model, arrays: SplitArrays, config: TrainConfig, rng: np.random.Generator,
                optimizer: LookaheadRAdam, epoch: int = 1) -> EpochStats:
    """One pass over the training split in shuffled batches of matched pairs."""
    n = arrays.n_samples
    if n == 0:
        raise ValueError("training split is empty")
    order = rng.permutation(n)
    owners = arrays.captions_of()
    lr = config.lr_at(epoch)
    names = model.config.expert_names
    total, count, batches = 0.0, 0, 0
    for lo in range(0, n, config.batch_size):
        idx = order[lo : lo + config.batch_size]
        # one caption per sample per step
        caps = np.array([owners[i][rng.integers(len(owners[i]))] if len(owners[i]) > 1 else owners[i][0]
                         for i in idx], dtype=np.int64)
        feats, tokens, tmask = batch_inputs(arrays, idx, caps, names)
        optimizer.zero_grad()
        s = model.similarity(model.encode_audio(feats), model.encode_text(tokens, tmask))
        loss = ranking_loss(s, config.margin)
        nk.backward(loss, wrt=[t for _, t in model.params])
        optimizer.step(lr)
        total += loss.item() * len(idx)
        count += len(idx)
        batches += 1
    return EpochStats(epoch, total / count, batches, lr)


# -- evaluation ---------------------------------------------------------------


def embed_split(model: Model, arrays: SplitArrays, chunk: int = 256) -> tuple[list[Tensor], TextEmbedding]:
    names = model.config.expert_names
    audio_parts: list[list[np.ndarray]] = [[] for _ in names]
    h, experts, weights = [], [[] for _ in names], []
    with nk.no_grad():
        for lo in range(0, arrays.n_samples, chunk):
            sl = slice(lo, lo + chunk)
            feats = {n: (arrays.audio[n].values[sl], arrays.audio[n].mask[sl]) for n in names}
            for e, t in enumerate(model.encode_audio(feats)):
                audio_parts[e].append(t.data)
        for lo in range(0, len(arrays.caption_owner), chunk):
            sl = slice(lo, lo + chunk)
            te = model.encode_text(arrays.text.values[sl], arrays.text.mask[sl])
            h.append(te.h.data)
            weights.append(te.weights.data)
            for e, t in enumerate(te.experts):
                experts[e].append(t.data)
    audio = [Tensor(np.concatenate(p)) for p in audio_parts]
    text = TextEmbedding(Tensor(np.concatenate(h)), [Tensor(np.concatenate(p)) for p in experts],
                         Tensor(np.concatenate(weights)))
    return audio, text


def evaluate(model: Model, arrays: SplitArrays, seed: int | None = None) -> dict[str, RetrievalReport]:
    """t2a and a2t recall over the whole split (pool = all of its samples)."""
    audio, text = embed_split(model, arrays)
    sims = similarity_matrix(audio, text, text_ids=arrays.captions, audio_ids=arrays.sample_ids)
    t2a_gt = [[int(o)] for o in arrays.caption_owner]
    a2t_gt = arrays.captions_of()
    return {
        "t2a": evaluate_direction(sims, t2a_gt, "t2a", seed=seed),
        "a2t": evaluate_direction(sims.T, a2t_gt, "a2t", seed=seed),
    }


def selection_score(reports: Mapping[str, RetrievalReport]) -> float:
    return reports["t2a"].geom_mean


def select_checkpoint(scores: Sequence[float] | Mapping[int, float]) -> int:
    """Epoch with the highest validation score; ties go to the earliest.

    A plain sequence is numbered from epoch 1.
    """
    items = sorted(scores.items()) if isinstance(scores, Mapping) else list(enumerate(scores, 1))
    if not items:
        raise ValueError("no epochs to select from")
    best_epoch, best = items[0]
    for epoch, score in items[1:]:
        if score > best:
            best_epoch, best = epoch, score
    return best_epoch


# -- checkpoints --------------------------------------------------------------


@dataclass
class Checkpoint:
    params: ModelParams
    train_config: TrainConfig
    epoch: int
    val_score: float
    padding: PaddingSpec | None = None
    seed: int | None = None
    version: int = CHECKPOINT_VERSION

    @property
    def model_config(self) -> ModelConfig:
        return self.params.config


def save_checkpoint(ckpt: Checkpoint, directory: str | Path) -> Path:
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    entries, blobs, offset = [], [], 0
    for name, t in ckpt.params:
        raw = np.ascontiguousarray(t.data, dtype="<f4").tobytes()
        entries.append({"name": name, "shape": list(t.shape), "offset": offset, "nbytes": len(raw)})
        blobs.append(raw)
        offset += len(raw)
    doc = {
        "format_version": ckpt.version,
        "parameters": entries,
        "model": ckpt.model_config.to_dict(),
        "train": ckpt.train_config.to_dict(),
        "padding": ckpt.padding.to_dict() if ckpt.padding else None,
        "epoch": ckpt.epoch,
        "val_score": ckpt.val_score,
        "seed": ckpt.seed,
    }
    (directory / "params.bin").write_bytes(b"".join(blobs))
    (directory / "params.json").write_text(json.dumps(doc, indent=1, sort_keys=True) + "\n", encoding="utf-8")
    return directory


def load_checkpoint(directory: str | Path) -> Checkpoint:
    directory = Path(directory)
    meta_path, bin_path = directory / "params.json", directory / "params.bin"
    if not meta_path.is_file() or not bin_path.is_file():
        raise ConfigError(f"{directory} is not a checkpoint directory (params.json/params.bin missing)")
    doc = json.loads(meta_path.read_text(encoding="utf-8"))
    if doc.get("format_version") != CHECKPOINT_VERSION:
        raise ConfigError(f"unsupported checkpoint format {doc.get('format_version')!r}")
    raw = bin_path.read_bytes()
    config = ModelConfig.from_dict(doc["model"])
    tensors = {}
    for e in doc["parameters"]:
        chunk = raw[e["offset"] : e["offset"] + e["nbytes"]]
        if len(chunk) != e["nbytes"]:
            raise ConfigError(f"params.bin truncated at {e['name']}")
        arr = np.frombuffer(chunk, dtype="<f4").reshape(e["shape"]).astype(np.float32)
        tensors[e["name"]] = Tensor(arr, requires_grad=True, name=e["name"])
    params = ModelParams(config, tensors)
    expected = init_params(config, 0).shapes()
    if params.shapes() != expected:
        raise ConfigError(f"{directory}: parameter shapes do not match the stored model config")
    padding = PaddingSpec.from_dict(doc["padding"]) if doc.get("padding") else None
    return Checkpoint(params, TrainConfig.from_dict(doc["train"]), doc["epoch"], doc["val_score"], padding,
                      doc.get("seed"), doc["format_version"])


def check_compatible(params: ModelParams, config: ModelConfig) -> None:
    """Raise unless ``params`` has exactly the shapes ``config`` would create."""
    have = params.config.expert_names
    want = config.expert_names
    for name in want:
        if name not in have:
            raise IncompatibleCheckpoint(f"checkpoint has no expert {name!r} (has {have})")
    for name in have:
        if name not in want:
            raise IncompatibleCheckpoint(f"checkpoint expert {name!r} is not in the dataset/config")
    expected = init_params(config, 0).shapes()
    actual = params.shapes()
    for key, shape in expected.items():
        if actual.get(key) != shape:
            raise IncompatibleCheckpoint(f"parameter {key}: checkpoint shape {actual.get(key)}, model needs {shape}")
    if set(actual) != set(expected):
        raise IncompatibleCheckpoint(f"checkpoint parameters differ: {sorted(set(actual) ^ set(expected))}")


# -- experiments --------------------------------------------------------------


def model_config_for(dataset: Dataset, section: Mapping | None = None) -> ModelConfig:
    """Build a ModelConfig from a dataset's experts and a config-file "model" section."""
    section = dict(section or {})
    clusters = section.pop("expert_clusters", 16)
    ghost = section.pop("expert_ghost_clusters", 0)
    per_expert = section.pop("expert_overrides", {})
    chosen = section.pop("experts", None)
    dims = dict(dataset.experts)
    names = [n for n, _ in dataset.experts] if chosen is None else list(chosen)
    for n in names:
        if n not in dims:
            raise ConfigError(f"config names expert {n!r}, dataset has {sorted(dims)}")
    experts = [ExpertSpec(n, dims[n], **{"clusters": clusters, "ghost_clusters": ghost, **per_expert.get(n, {})})
               for n in names]
    section.setdefault("word_dim", dataset.word_dim)
    try:
        return ModelConfig(experts=experts, **section)
    except TypeError as exc:
        raise ConfigError(f"bad model config: {exc}") from exc


@dataclass
class SeedRun:
    seed: int
    checkpoint: Checkpoint
    history: list[EpochStats]
    val_scores: dict[int, float]
    test: dict[str, RetrievalReport]
    train_size: int


@dataclass
class ExperimentResult:
    reports: dict[str, RetrievalReport]
    runs: list[SeedRun]

    @property
    def best_run(self) -> SeedRun:
        return max(self.runs, key=lambda r: (r.checkpoint.val_score, -r.seed))

    def to_dict(self) -> dict:
        return {"reports": [self.reports[d].to_dict() for d in ("t2a", "a2t")]}


def subsample_train(n: int, fraction: float, seed: int) -> np.ndarray:
    """Deterministic per-seed subset of floor(fraction * n) training samples (at least 1)."""
    keep = max(1, int(math.floor(fraction * n + 1e-9)))
    if keep >= n:
        return np.arange(n)
    rng = np.random.default_rng([seed, 0x5EED])
    return np.sort(rng.permutation(n)[:keep])


def train_single(model_config: ModelConfig, train_config: TrainConfig, dataset: Dataset, seed: int,
                 init: Checkpoint | None = None, padding: PaddingSpec | None = None,
                 arrays: Mapping[str, SplitArrays] | None = None, evaluate_test: bool = True) -> SeedRun:
    padding = padding or dataset.padding or PaddingSpec()
    names = model_config.expert_names
    if arrays is None:
        arrays = prepare_splits(dataset, train_config, names, padding)
    train = arrays["train"]
    if train_config.train_fraction < 1.0:
        train = train.subset(subsample_train(train.n_samples, train_config.train_fraction, seed))
    val = arrays.get("val") or train

    if init is not None:
        check_compatible(init.params, model_config)
        params = init.params.copy()
        params.config = model_config
    else:
        params = init_params(model_config, seed)
    model = Model(params)
    optimizer = LookaheadRAdam(params, train_config)

    val_scores = {0: selection_score(evaluate(model, val))}
    best = (0, params.copy())
    history = []
    for epoch in range(1, train_config.max_epochs + 1):
        stats = train_epoch(model, train, train_config, np.random.default_rng([seed, epoch]), optimizer, epoch)
        history.append(stats)
        val_scores[epoch] = selection_score(evaluate(model, val))
        log.info("seed %d epoch %d loss %.4f lr %.5f val %.2f", seed, epoch, stats.mean_loss, stats.lr,
                 val_scores[epoch])
        if select_checkpoint(val_scores) == epoch:
            best = (epoch, params.copy())
    epoch, best_params = best
    ckpt = Checkpoint(best_params, train_config, epoch, val_scores[epoch], padding, seed)
    test = {}
    if evaluate_test and "test" in arrays:
        test = evaluate(Model(best_params), arrays["test"], seed=seed)
    return SeedRun(seed, ckpt, history, val_scores, test, train.n_samples)


def prepare_splits(dataset: Dataset, config: TrainConfig, experts: Sequence[str],
                   padding: PaddingSpec | None = None) -> dict[str, SplitArrays]:
    out = {}
    for role, name in (("train", config.train_split), ("val", config.val_split), ("test", config.test_split)):
        samples = dataset.split(name)
        if samples:
            out[role] = split_arrays(dataset, samples, experts, padding)
    if "train" not in out:
        raise DataError(f"training split {config.train_split!r} is empty")
    return out


def run_experiment(model_config: ModelConfig, train_config: TrainConfig, dataset: Dataset,
                   init: Checkpoint | None = None, padding: PaddingSpec | None = None,
                   label: str | None = None) -> ExperimentResult:
    """Train one model per seed, keep each seed's best-validation epoch and report test recall."""
    padding = padding or dataset.padding or PaddingSpec()
    arrays = prepare_splits(dataset, train_config, model_config.expert_names, padding)
    if "test" not in arrays:
        raise DataError(f"test split {train_config.test_split!r} is empty")
    runs = [train_single(model_config, train_config, dataset, seed, init, padding, arrays)
            for seed in train_config.seed_list]
    reports = {}
    for d in ("t2a", "a2t"):
        rep = aggregate_seeds([r.test[d] for r in runs])
        rep.label = label
        rep.extra = {"train_fraction": train_config.train_fraction, "train_size": runs[0].train_size,
                     "arch": model_config.arch, "experts": model_config.expert_names}
        reports[d] = rep
    return ExperimentResult(reports, runs)
