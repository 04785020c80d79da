"""Text and audio encoders for the joint embedding.

Audio side: each expert's frame sequence is pooled with NetVLAD and passed
through a gated embedding unit (GEU). The CE variant inserts collaborative
gating between the GEU's linear projection and its self-gating stage, where
all experts share the joint-embedding width.

Text side: word vectors are pooled with NetVLAD (with a ghost cluster) into
one descriptor ``h``; one GEU per audio expert maps ``h`` into that expert's
joint space, and a softmax over ``u @ h`` weights the per-expert cosines.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass, field
from typing import Mapping, NamedTuple, Sequence

import numpy as np

from . import numkit as nk
from .numkit import Tensor

ARCHITECTURES = ("moee", "ce")


@dataclass
class NetVladConfig:
    clusters: int
    ghost_clusters: int
    input_dim: int

    def __post_init__(self):
        if self.clusters < 1 or self.ghost_clusters < 0 or self.input_dim < 1:
            raise ValueError(f"invalid NetVLAD config {self}")

    @property
    def output_dim(self) -> int:
        return self.clusters * self.input_dim


@dataclass
class ExpertSpec:
    name: str
    dim: int
    clusters: int = 16
    ghost_clusters: int = 0

    @property
    def netvlad(self) -> NetVladConfig:
        return NetVladConfig(self.clusters, self.ghost_clusters, self.dim)


@dataclass
class ModelConfig:
    experts: list[ExpertSpec]
    word_dim: int = 300
    text_clusters: int = 20
    text_ghost_clusters: int = 1
    embed_dim: int = 512
    arch: str = "ce"

    def __post_init__(self):
        self.experts = [e if isinstance(e, ExpertSpec) else ExpertSpec(**e) for e in self.experts]
        if not self.experts:
            raise ValueError("model needs at least one expert")
        names = [e.name for e in self.experts]
        if len(set(names)) != len(names):
            raise ValueError(f"duplicate expert names in {names}")
        if self.arch not in ARCHITECTURES:
            raise ValueError(f"unknown architecture {self.arch!r}; expected one of {ARCHITECTURES}")

    @property
    def text_netvlad(self) -> NetVladConfig:
        return NetVladConfig(self.text_clusters, self.text_ghost_clusters, self.word_dim)

    @property
    def expert_names(self) -> list[str]:
        return [e.name for e in self.experts]

    @property
    def uses_gating(self) -> bool:
        return self.arch == "ce" and len(self.experts) > 1

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: Mapping) -> "ModelConfig":
        return cls(**dict(d))


class NetVladParams(NamedTuple):
    centers: Tensor  # K x D
    assign_W: Tensor  # D x (K + G)
    assign_b: Tensor  # K + G


class GatedUnitParams(NamedTuple):
    W1: Tensor
    b1: Tensor
    W2: Tensor
    b2: Tensor


class GateParams(NamedTuple):
    """Collaborative gating: pair projection g and two-layer mask generator h."""

    pair_W: Tensor  # 2P x P
    pair_b: Tensor
    hidden_W: Tensor  # P x P
    hidden_b: Tensor
    out_W: Tensor  # P x P
    out_b: Tensor


@dataclass
class ModelParams:
    """Named, ordered collection of every learnable tensor of a model."""

    config: ModelConfig
    tensors: dict[str, Tensor] = field(default_factory=dict)

    def __getitem__(self, name: str) -> Tensor:
        return self.tensors[name]

    def __iter__(self):
        return iter(self.tensors.items())

    def __len__(self) -> int:
        return len(self.tensors)

    def names(self) -> list[str]:
        return list(self.tensors)

    def netvlad(self, prefix: str) -> NetVladParams:
        t = self.tensors
        return NetVladParams(t[f"{prefix}.centers"], t[f"{prefix}.assign_W"], t[f"{prefix}.assign_b"])

    def geu(self, prefix: str) -> GatedUnitParams:
        t = self.tensors
        return GatedUnitParams(t[f"{prefix}.W1"], t[f"{prefix}.b1"], t[f"{prefix}.W2"], t[f"{prefix}.b2"])

    def gate(self) -> GateParams | None:
        if "gate.pair_W" not in self.tensors:
            return None
        return GateParams(*(self.tensors[f"gate.{k}"] for k in GateParams._fields))

    def copy(self) -> "ModelParams":
        return ModelParams(
            self.config,
            {k: Tensor(v.data.copy(), requires_grad=v.requires_grad, name=k) for k, v in self.tensors.items()},
        )

    def shapes(self) -> dict[str, tuple[int, ...]]:
        return {k: v.shape for k, v in self.tensors.items()}


def init_params(config: ModelConfig, seed: int = 0, dtype=np.float32) -> ModelParams:
    """Uniform(+-1/sqrt(fan_in)) weights and centers, zero biases."""
    rng = np.random.default_rng(seed)
    tensors: dict[str, Tensor] = {}

    def weight(name, fan_in, shape):
        bound = 1.0 / np.sqrt(fan_in)
        tensors[name] = Tensor(rng.uniform(-bound, bound, size=shape).astype(dtype), True, name=name)

    def bias(name, n):
        tensors[name] = Tensor(np.zeros(n, dtype=dtype), True, name=name)

    def netvlad(prefix, cfg: NetVladConfig):
        width = cfg.clusters + cfg.ghost_clusters
        weight(f"{prefix}.centers", cfg.input_dim, (cfg.clusters, cfg.input_dim))
        weight(f"{prefix}.assign_W", cfg.input_dim, (cfg.input_dim, width))
        bias(f"{prefix}.assign_b", width)

    def geu(prefix, din, dout):
        weight(f"{prefix}.W1", din, (din, dout))
        bias(f"{prefix}.b1", dout)
        weight(f"{prefix}.W2", dout, (dout, dout))
        bias(f"{prefix}.b2", dout)

    P = config.embed_dim
    for e in config.experts:
        netvlad(f"audio.{e.name}.netvlad", e.netvlad)
        geu(f"audio.{e.name}.geu", e.netvlad.output_dim, P)
    text_cfg = config.text_netvlad
    netvlad("text.netvlad", text_cfg)
    for e in config.experts:
        geu(f"text.{e.name}.geu", text_cfg.output_dim, P)
    weight("mixture.u", text_cfg.output_dim, (len(config.experts), text_cfg.output_dim))
    if config.uses_gating:
        weight("gate.pair_W", 2 * P, (2 * P, P))
        bias("gate.pair_b", P)
        weight("gate.hidden_W", P, (P, P))
        bias("gate.hidden_b", P)
        weight("gate.out_W", P, (P, P))
        bias("gate.out_b", P)
    return ModelParams(config, tensors)


# -- blocks -------------------------------------------------------------------


def netvlad_forward(X: Tensor, mask, p: NetVladParams) -> Tensor:
    """Pool a (T, D) or (B, T, D) sequence into a (.., K*D) descriptor.

    Soft assignments run over K + G columns; the G ghost columns are dropped
    before residual aggregation. Frames with mask False get zero weight.
    """
    X = nk._lift(X)
    batched = X.ndim == 3
    if not batched:
        X = nk.reshape(X, (1,) + X.shape)
    B, T, D = X.shape
    K = p.centers.shape[0]
    if p.centers.shape[1] != D or p.assign_W.shape[0] != D:
        raise ValueError(f"NetVLAD expects frame width {p.centers.shape[1]}, got {D}")
    m = np.ones((B, T), dtype=X.dtype) if mask is None else np.asarray(mask, dtype=bool).reshape(B, T)
    if not np.all(m.any(axis=1)):
        raise ValueError("every frame of a sequence is masked out")

    alpha = nk.softmax(nk.affine(X, p.assign_W, p.assign_b), axis=-1)
    alpha = nk.mul(alpha[:, :, :K], m[:, :, None].astype(X.dtype))
    weighted = nk.matmul(nk.transpose(alpha, (0, 2, 1)), X)  # B x K x D
    mass = nk.reshape(nk.sum_(alpha, axis=1), (B, K, 1))
    V = nk.sub(weighted, nk.mul(mass, p.centers))
    V = nk.l2_normalize(V, axis=-1)
    out = nk.l2_normalize(nk.reshape(V, (B, K * D)), axis=-1)
    return out if batched else nk.reshape(out, (K * D,))


def geu_project(x: Tensor, p: GatedUnitParams) -> Tensor:
    return nk.affine(x, p.W1, p.b1)


def geu_finish(y1: Tensor, p: GatedUnitParams) -> Tensor:
    gate = nk.sigmoid(nk.affine(y1, p.W2, p.b2))
    return nk.l2_normalize(nk.mul(y1, gate), axis=-1)


def gated_embed(x: Tensor, p: GatedUnitParams) -> Tensor:
    """Self-gated linear map followed by L2 normalisation."""
    return geu_finish(geu_project(x, p), p)


def mixture_weights(h: Tensor, u: Tensor) -> Tensor:
    """Softmax over experts of ``u @ h``; works on a single h or a batch."""
    rows = h if h.ndim > 1 else nk.reshape(h, (1, -1))
    w = nk.softmax(nk.matmul(rows, nk.transpose(u)), axis=-1)
    return w if h.ndim > 1 else nk.reshape(w, (u.shape[0],))


def collaborative_gate(features: Sequence[Tensor], gate: GateParams | None) -> list[Tensor]:
    """Filter each expert with a sigmoid mask built from its pairings with the others.

    mask_i = sigmoid(h(sum_{j != i} g([f_i, f_j]))), where g is a linear
    projection of the concatenated pair and h is a one-hidden-layer ReLU MLP.
    A single expert passes through unchanged.
    """
    features = list(features)
    if len(features) == 1:
        return features
    out = []
    for fi, pre in zip(features, gate_preactivations(features, gate)):
        mask = nk.sigmoid(nk.affine(nk.relu(pre), gate.out_W, gate.out_b))
        out.append(nk.mul(fi, mask))
    return out


def gate_preactivations(features: Sequence[Tensor], gate: GateParams | None) -> list[Tensor]:
    """Inputs to the mask generator's ReLU, one per expert."""
    if gate is None:
        raise ValueError("collaborative gating over several experts needs gate parameters")
    pres = []
    for i, fi in enumerate(features):
        acc = None
        for j, fj in enumerate(features):
            if j == i:
                continue
            pair = nk.affine(nk.concat([fi, fj], axis=-1), gate.pair_W, gate.pair_b)
            acc = pair if acc is None else nk.add(acc, pair)
        pres.append(nk.affine(acc, gate.hidden_W, gate.hidden_b))
    return pres


# -- encoders -----------------------------------------------------------------


@dataclass
class TextEmbedding:
    h: Tensor  # pooled text descriptor
    experts: list[Tensor]  # one unit-norm embedding per expert space
    weights: Tensor  # mixture weights over experts


def encode_text(tokens: Tensor, mask, params: ModelParams) -> TextEmbedding:
    if tokens.shape[-2] == 0:
        raise ValueError("empty caption")
    h = netvlad_forward(tokens, mask, params.netvlad("text.netvlad"))
    experts = [gated_embed(h, params.geu(f"text.{name}.geu")) for name in params.config.expert_names]
    return TextEmbedding(h, experts, mixture_weights(h, params["mixture.u"]))


def _expert_spec(params: ModelParams, expert: str) -> ExpertSpec:
    for e in params.config.experts:
        if e.name == expert:
            return e
    raise KeyError(f"model has no expert named {expert!r}")


def _pool_expert(seq: Tensor, mask, params: ModelParams, expert: str) -> Tensor:
    spec = _expert_spec(params, expert)
    if seq.shape[-1] != spec.dim:
        raise ValueError(f"expert {expert!r} expects feature dim {spec.dim}, got {seq.shape[-1]}")
    return netvlad_forward(seq, mask, params.netvlad(f"audio.{expert}.netvlad"))


def encode_audio_expert(seq: Tensor, mask, params: ModelParams, expert: str) -> Tensor:
    """NetVLAD + GEU for one expert, without collaborative gating."""
    return gated_embed(_pool_expert(seq, mask, params, expert), params.geu(f"audio.{expert}.geu"))


def encode_audio(features: Mapping[str, tuple], params: ModelParams, arch: str | None = None) -> list[Tensor]:
    """Embed every expert of an audio sample (or batch).

    ``features`` maps expert name to ``(sequence, mask)``.
    """
    arch = arch or params.config.arch
    names = params.config.expert_names
    missing = [n for n in names if n not in features]
    if missing:
        raise KeyError(f"missing features for expert(s) {missing}")
    if arch == "moee":
        return [encode_audio_expert(nk._lift(features[n][0]), features[n][1], params, n) for n in names]
    geus = [params.geu(f"audio.{n}.geu") for n in names]
    projected = [
        geu_project(_pool_expert(nk._lift(features[n][0]), features[n][1], params, n), g) for n, g in zip(names, geus)
    ]
    gated = collaborative_gate(projected, params.gate())
    return [geu_finish(y, g) for y, g in zip(gated, geus)]


def similarity_scores(audio: Sequence[Tensor], text: TextEmbedding) -> Tensor:
    """Mixture-weighted cosine similarity.

    With batched inputs returns a (num_text, num_audio) matrix; with single
    vectors returns a scalar.
    """
    if len(audio) != len(text.experts):
        raise ValueError(f"{len(audio)} audio experts vs {len(text.experts)} text experts")
    if text.weights.ndim == 1:
        total = None
        for e, (a, t) in enumerate(zip(audio, text.experts)):
            term = nk.mul(nk.sum_(nk.mul(a, t)), text.weights[e])
            total = term if total is None else nk.add(total, term)
        return total
    total = None
    for e, (a, t) in enumerate(zip(audio, text.experts)):
        cos = nk.matmul(t, nk.transpose(a))
        term = nk.mul(cos, text.weights[:, e : e + 1])
        total = term if total is None else nk.add(total, term)
    return total


def moee_similarity(audio: Sequence[Tensor], text: TextEmbedding) -> Tensor:
    return similarity_scores(audio, text)


def ce_similarity(features: Mapping[str, tuple], tokens: Tensor, mask, params: ModelParams) -> Tensor:
    """End-to-end CE score: gated audio experts against the shared text encoder."""
    return similarity_scores(encode_audio(features, params, arch="ce"), encode_text(tokens, mask, params))


class Model:
    """Encoder pair bound to a parameter set."""

    def __init__(self, params: ModelParams):
        self.params = params

    @property
    def config(self) -> ModelConfig:
        return self.params.config

    def encode_text(self, tokens, mask) -> TextEmbedding:
        return encode_text(nk._lift(tokens), mask, self.params)

    def encode_audio(self, features: Mapping[str, tuple]) -> list[Tensor]:
        return encode_audio(features, self.params)

    def similarity(self, audio: Sequence[Tensor], text: TextEmbedding) -> Tensor:
        return similarity_scores(audio, text)
