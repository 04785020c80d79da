"""Dataset ingestion: manifests, feature blobs, captions, padding, synthetic data.

On-disk layout of a dataset directory::

    manifest.json   experts, samples (+ optional padding and word_table)
    words.txt       "token v1 ... vD" per line
    feats/...       headerless little-endian float32 blobs, row-major

"""

from __future__ import annotations

import json
import logging
import re
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Mapping, Sequence

import numpy as np

log = logging.getLogger(__name__)

MANIFEST_NAME = "manifest.json"
MANIFEST_VERSION = 1
DEFAULT_WORD_TABLE = "words.txt"
WORD_DIM = 300
_PUNCT = re.compile(r"[^\w\s]|_", re.UNICODE)


class DataError(Exception):
    """Malformed, missing or inconsistent dataset input."""


@dataclass
class FeatureSequence:
    sample_id: str
    expert: str
    values: np.ndarray  # T x D

    @property
    def length(self) -> int:
        return self.values.shape[0]


@dataclass
class Caption:
    sample_id: str
    text: str
    tokens: list[str]
    split: str | None = None


@dataclass
class PaddingSpec:
    """Fixed sequence lengths for text tokens and each audio expert."""

    text: int = 20
    experts: dict[str, int] = field(default_factory=dict)
    default_expert: int = 29

    def __post_init__(self):
        if self.text < 1 or self.default_expert < 1 or any(v < 1 for v in self.experts.values()):
            raise ValueError(f"padding lengths must be positive: {self}")

    def for_expert(self, name: str) -> int:
        return self.experts.get(name, self.default_expert)

    def to_dict(self) -> dict:
        return {"text": self.text, "experts": dict(self.experts), "default_expert": self.default_expert}

    @classmethod
    def from_dict(cls, d: Mapping) -> "PaddingSpec":
        return cls(int(d.get("text", 20)), {k: int(v) for k, v in d.get("experts", {}).items()},
                   int(d.get("default_expert", 29)))


# Per-benchmark lengths.
AUDIOCAPS_PADDING = PaddingSpec(text=20, experts={"vggish": 29, "vggsound": 29})
CLOTHO_PADDING = PaddingSpec(text=21, experts={"vggish": 31, "vggsound": 95})
QUERYD_PADDING = PaddingSpec(text=70, experts={"vggish": 500}, default_expert=500)
ACTIVITYNET_PADDING = PaddingSpec(text=20, experts={"vggish": 29})


@dataclass
class PaddedBatch:
    values: np.ndarray  # B x z x D
    mask: np.ndarray  # B x z, True = real frame

    def unpad(self) -> list[np.ndarray]:
        return [v[m] for v, m in zip(self.values, self.mask)]


@dataclass
class Sample:
    id: str
    split: str
    features: dict[str, np.ndarray]
    captions: list[str]


@dataclass
class Dataset:
    experts: list[tuple[str, int]]
    samples: list[Sample]
    word_table: dict[str, np.ndarray] = field(default_factory=dict)
    padding: PaddingSpec | None = None  # None: not declared by the manifest
    word_dim: int = WORD_DIM

    def split(self, name: str) -> list[Sample]:
        return [s for s in self.samples if s.split == name]

    def split_names(self) -> list[str]:
        return sorted({s.split for s in self.samples})

    def expert_dim(self, name: str) -> int:
        for n, d in self.experts:
            if n == name:
                return d
        raise KeyError(name)


# -- manifest -----------------------------------------------------------------


@dataclass
class BlobRef:
    path: Path
    rows: int


@dataclass
class SampleEntry:
    id: str
    split: str
    features: dict[str, BlobRef]
    captions: list[str]


@dataclass
class Manifest:
    root: Path
    version: int
    experts: list[tuple[str, int]]
    samples: list[SampleEntry]
    word_table: Path | None = None
    padding: PaddingSpec | None = None


def _require(cond: bool, msg: str) -> None:
    if not cond:
        raise DataError(msg)


def load_manifest(path: str | Path) -> Manifest:
    """Parse and validate a manifest file (or the manifest inside a directory)."""
    path = Path(path)
    if path.is_dir():
        path = path / MANIFEST_NAME
    if not path.is_file():
        raise DataError(f"manifest not found: {path}")
    try:
        doc = json.loads(path.read_text(encoding="utf-8"))
    except (json.JSONDecodeError, UnicodeDecodeError) as exc:
        raise DataError(f"manifest {path} does not parse: {exc}") from exc
    root = path.parent

    _require(isinstance(doc, dict), "manifest must be a JSON object")
    for key in ("version", "experts", "samples"):
        _require(key in doc, f"manifest is missing field {key!r}")
    _require(isinstance(doc["experts"], list) and doc["experts"], "manifest needs a nonempty experts list")
    experts: list[tuple[str, int]] = []
    for e in doc["experts"]:
        _require(isinstance(e, dict) and "name" in e and "dim" in e, f"bad expert entry {e!r}")
        _require(isinstance(e["dim"], int) and e["dim"] > 0, f"expert {e['name']!r} has invalid dim {e['dim']!r}")
        if any(n == e["name"] for n, _ in experts):
            prev = dict(experts)[e["name"]]
            raise DataError(f"expert {e['name']!r} declared twice (dims {prev} and {e['dim']})")
        experts.append((str(e["name"]), e["dim"]))
    dims = dict(experts)

    samples, seen = [], set()
    for s in doc["samples"]:
        _require(isinstance(s, dict) and "id" in s, f"bad sample entry {s!r}")
        sid = str(s["id"])
        _require(sid not in seen, f"duplicate sample id {sid!r}")
        seen.add(sid)
        _require("split" in s, f"sample {sid!r} has no split")
        feats = s.get("features", {})
        _require(isinstance(feats, dict), f"sample {sid!r}: features must be an object")
        refs = {}
        for name in dims:
            _require(name in feats, f"sample {sid!r} lacks features for expert {name!r}")
        for name, ref in feats.items():
            _require(name in dims, f"sample {sid!r} references undeclared expert {name!r}")
            _require(isinstance(ref, dict) and "path" in ref and "rows" in ref, f"sample {sid!r}: bad blob ref {ref!r}")
            _require(isinstance(ref["rows"], int) and ref["rows"] >= 1, f"sample {sid!r}: rows must be >= 1")
            blob = root / ref["path"]
            _require(blob.is_file(), f"sample {sid!r}: blob {ref['path']!r} for expert {name!r} does not exist")
            size = blob.stat().st_size
            _require(size == ref["rows"] * dims[name] * 4,
                     f"sample {sid!r}: blob {ref['path']!r} has {size} bytes, expected "
                     f"{ref['rows']}x{dims[name]}x4 (dim conflict?)")
            refs[name] = BlobRef(blob, ref["rows"])
        captions = s.get("captions", [])
        _require(isinstance(captions, list) and all(isinstance(c, str) for c in captions),
                 f"sample {sid!r}: captions must be a list of strings")
        samples.append(SampleEntry(sid, str(s["split"]), refs, list(captions)))

    word_table = doc.get("word_table")
    padding = doc.get("padding")
    return Manifest(
        root,
        int(doc["version"]),
        experts,
        samples,
        word_table=(root / word_table) if word_table else None,
        padding=PaddingSpec.from_dict(padding) if padding else None,
    )


# -- feature blobs ------------------------------------------------------------


def read_feature_archive(path: str | Path, rows: int, dim: int) -> np.ndarray:
    """Decode a headerless row-major little-endian float32 blob."""
    raw = Path(path).read_bytes()
    if len(raw) != rows * dim * 4:
        raise DataError(f"{path}: {len(raw)} bytes, expected {rows}x{dim}x4 = {rows * dim * 4}")
    values = np.frombuffer(raw, dtype="<f4").reshape(rows, dim).astype(np.float32)
    if not np.all(np.isfinite(values)):
        raise DataError(f"{path}: NaN or Inf in feature payload")
    return values


def write_feature_archive(path: str | Path, values: np.ndarray) -> None:
    values = np.asarray(values)
    if values.ndim != 2:
        raise ValueError("feature blobs hold 2-d matrices")
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    Path(path).write_bytes(np.ascontiguousarray(values, dtype="<f4").tobytes())


# -- text ---------------------------------------------------------------------


def tokenize_caption(text: str) -> list[str]:
    """Lowercase, strip punctuation, split on whitespace."""
    tokens = _PUNCT.sub(" ", text.lower()).split()
    if not tokens:
        raise DataError(f"caption {text!r} has no tokens")
    return tokens


def load_word_table(path: str | Path, dim: int | None = None) -> dict[str, np.ndarray]:
    table: dict[str, np.ndarray] = {}
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            parts = line.rstrip("\n").split(" ")
            if not parts or parts == [""]:
                continue
            token, vals = parts[0], parts[1:]
            if dim is None:
                dim = len(vals)
            if len(vals) != dim:
                raise DataError(f"{path}:{lineno}: expected {dim} values for {token!r}, got {len(vals)}")
            try:
                table[token] = np.array([float(v) for v in vals], dtype=np.float32)
            except ValueError as exc:
                raise DataError(f"{path}:{lineno}: {exc}") from exc
    return table


def write_word_table(path: str | Path, table: Mapping[str, np.ndarray]) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for token, vec in table.items():
            fh.write(token + " " + " ".join(repr(float(v)) for v in np.asarray(vec, dtype=np.float32)) + "\n")


def embed_tokens(tokens: Sequence[str], table: Mapping[str, np.ndarray], dim: int = WORD_DIM) -> np.ndarray:
    """Look up word vectors; out-of-vocabulary tokens become zero rows."""
    out = np.zeros((len(tokens), dim), dtype=np.float32)
    for i, tok in enumerate(tokens):
        vec = table.get(tok)
        if vec is not None:
            out[i] = vec
    return out


# -- padding ------------------------------------------------------------------


def pad_batch(sequences: Sequence[np.ndarray], length: int, dim: int | None = None) -> PaddedBatch:
    """Zero-pad (or front-truncate) every sequence to ``length`` frames."""
    if dim is None:
        dims = {np.asarray(s).shape[1] for s in sequences}
        if len(dims) != 1:
            raise ValueError(f"sequences disagree on feature dim: {sorted(dims)}")
        dim = dims.pop()
    values = np.zeros((len(sequences), length, dim), dtype=np.float32)
    mask = np.zeros((len(sequences), length), dtype=bool)
    for i, seq in enumerate(sequences):
        seq = np.asarray(seq)
        if seq.shape[1] != dim:
            raise ValueError(f"sequence {i} has dim {seq.shape[1]}, expected {dim}")
        n = min(seq.shape[0], length)
        values[i, :n] = seq[:n]
        mask[i, :n] = True
    return PaddedBatch(values, mask)


# -- assembly -----------------------------------------------------------------


def load_dataset(path: str | Path) -> Dataset:
    manifest = load_manifest(path)
    samples = []
    dims = dict(manifest.experts)
    for entry in manifest.samples:
        feats = {name: read_feature_archive(ref.path, ref.rows, dims[name]) for name, ref in entry.features.items()}
        samples.append(Sample(entry.id, entry.split, feats, entry.captions))
    table_path = manifest.word_table or (manifest.root / DEFAULT_WORD_TABLE)
    table, word_dim = {}, WORD_DIM
    if table_path.is_file():
        table = load_word_table(table_path)
        if table:
            word_dim = len(next(iter(table.values())))
    else:
        log.warning("no word table at %s; every token is out of vocabulary", table_path)
    return Dataset(manifest.experts, samples, table, manifest.padding, word_dim)


def save_dataset(ds: Dataset, root: str | Path) -> Path:
    """Write manifest, blobs and word table; returns the manifest path."""
    root = Path(root)
    root.mkdir(parents=True, exist_ok=True)
    entries = []
    for s in ds.samples:
        feats = {}
        for name, values in s.features.items():
            rel = f"feats/{name}/{s.id}.bin"
            write_feature_archive(root / rel, values)
            feats[name] = {"path": rel, "rows": int(values.shape[0])}
        entries.append({"id": s.id, "split": s.split, "features": feats, "captions": list(s.captions)})
    doc = {
        "version": MANIFEST_VERSION,
        "experts": [{"name": n, "dim": d} for n, d in ds.experts],
        "samples": entries,
        "word_table": DEFAULT_WORD_TABLE,
    }
    if ds.padding is not None:
        doc["padding"] = ds.padding.to_dict()
    write_word_table(root / DEFAULT_WORD_TABLE, ds.word_table)
    path = root / MANIFEST_NAME
    path.write_text(json.dumps(doc, indent=1, sort_keys=True), encoding="utf-8")
    return path


@dataclass
class SplitArrays:
    """Padded, embedded arrays of one split, ready for batching.

    Captions are flattened; ``caption_owner[c]`` is the sample index of
    caption ``c``.
    """

    sample_ids: list[str]
    audio: dict[str, PaddedBatch]
    text: PaddedBatch
    caption_owner: np.ndarray
    captions: list[str]

    @property
    def n_samples(self) -> int:
        return len(self.sample_ids)

    def captions_of(self) -> list[list[int]]:
        out: list[list[int]] = [[] for _ in self.sample_ids]
        for c, owner in enumerate(self.caption_owner):
            out[owner].append(c)
        return out

    def subset(self, sample_idx: Iterable[int]) -> "SplitArrays":
        idx = np.asarray(list(sample_idx), dtype=np.int64)
        remap = {int(old): new for new, old in enumerate(idx)}
        keep = np.array([c for c, o in enumerate(self.caption_owner) if int(o) in remap], dtype=np.int64)
        return SplitArrays(
            [self.sample_ids[i] for i in idx],
            {n: PaddedBatch(b.values[idx], b.mask[idx]) for n, b in self.audio.items()},
            PaddedBatch(self.text.values[keep], self.text.mask[keep]),
            np.array([remap[int(self.caption_owner[c])] for c in keep], dtype=np.int64),
            [self.captions[c] for c in keep],
        )


def embed_caption(text: str, ds: Dataset) -> np.ndarray:
    return embed_tokens(tokenize_caption(text), ds.word_table, ds.word_dim)


def split_arrays(ds: Dataset, samples: Sequence[Sample], experts: Sequence[str] | None = None,
                 padding: PaddingSpec | None = None) -> SplitArrays:
    padding = padding or ds.padding or PaddingSpec()
    names = [n for n, _ in ds.experts] if experts is None else list(experts)
    if not samples:
        raise DataError("split is empty")
    audio = {
        n: pad_batch([s.features[n] for s in samples], padding.for_expert(n), ds.expert_dim(n)) for n in names
    }
    seqs, owner, texts = [], [], []
    for i, s in enumerate(samples):
        if not s.captions:
            raise DataError(f"sample {s.id!r} has no captions")
        for cap in s.captions:
            seqs.append(embed_caption(cap, ds))
            owner.append(i)
            texts.append(cap)
    text = pad_batch(seqs, padding.text, ds.word_dim)
    return SplitArrays([s.id for s in samples], audio, text, np.array(owner, dtype=np.int64), texts)


# -- synthetic planted-correspondence data ------------------------------------


@dataclass
class SynthExpert:
    name: str
    dim: int
    rank: int | None = None  # rank of the latent view; None = full latent


@dataclass
class SynthDataset:
    dataset: Dataset
    latents: np.ndarray  # n_samples x latent_dim
    text_map: np.ndarray  # word_dim x latent_dim
    expert_maps: dict[str, np.ndarray]  # dim x latent_dim

    def write(self, root: str | Path) -> Path:
        return save_dataset(self.dataset, root)


def synth_generate(
    n_samples: int,
    latent_dim: int,
    experts: Sequence[SynthExpert | tuple[str, int]],
    noise: float,
    seed: int,
    word_dim: int = 16,
    text_len: tuple[int, int] = (4, 10),
    audio_len: tuple[int, int] = (5, 12),
    splits: Mapping[str, int] | None = None,
    map_seed: int | None = None,
) -> SynthDataset:
    """Planted-correspondence data: text and audio are noisy linear images of a shared latent.

    Each sample draws u ~ N(0, I). Caption tokens are ``A_text u + noise``,
    expert frames are ``A_e u + noise`` with ``A_e`` of rank ``rank`` when
    given. Every caption token is a distinct vocabulary entry whose vector is
    written to the word table, so the data round-trips through the text path.
    ``splits`` maps split name to sample count, taken in order; default is
    all "train". ``map_seed`` draws the linear maps from their own stream so
    two datasets can share them while having different samples.
    """
    if noise < 0:
        raise ValueError("noise must be nonnegative")
    experts = [e if isinstance(e, SynthExpert) else SynthExpert(*e) for e in experts]
    rng = np.random.default_rng(seed)
    map_rng = rng if map_seed is None else np.random.default_rng(map_seed)

    def linear_map(out_dim, rank):
        if rank is None or rank >= latent_dim:
            return map_rng.normal(0, 1 / np.sqrt(latent_dim), size=(out_dim, latent_dim))
        left = map_rng.normal(0, 1 / np.sqrt(rank), size=(out_dim, rank))
        right = np.linalg.qr(map_rng.normal(size=(latent_dim, rank)))[0].T  # rank x latent, orthonormal rows
        return left @ right

    text_map = linear_map(word_dim, None)
    expert_maps = {e.name: linear_map(e.dim, e.rank) for e in experts}
    latents = rng.normal(size=(n_samples, latent_dim))

    split_of = ["train"] * n_samples
    if splits:
        if sum(splits.values()) != n_samples:
            raise ValueError(f"split sizes {dict(splits)} do not add up to {n_samples}")
        split_of = [name for name, count in splits.items() for _ in range(count)]

    table: dict[str, np.ndarray] = {}
    samples = []
    width = len(str(max(n_samples - 1, 0)))
    for i, u in enumerate(latents):
        sid = f"s{i:0{width}d}"
        T = int(rng.integers(text_len[0], text_len[1] + 1))
        words = text_map @ u + noise * rng.normal(size=(T, word_dim))
        tokens = [f"{sid}w{t}" for t in range(T)]
        for tok, vec in zip(tokens, words):
            table[tok] = vec.astype(np.float32)
        feats = {}
        for e in experts:
            Ta = int(rng.integers(audio_len[0], audio_len[1] + 1))
            feats[e.name] = (expert_maps[e.name] @ u + noise * rng.normal(size=(Ta, e.dim))).astype(np.float32)
        samples.append(Sample(sid, split_of[i], feats, [" ".join(tokens)]))

    padding = PaddingSpec(text=text_len[1], experts={e.name: audio_len[1] for e in experts},
                          default_expert=audio_len[1])
    ds = Dataset([(e.name, e.dim) for e in experts], samples, table, padding, word_dim)
    return SynthDataset(ds, latents, text_map, expert_maps)
