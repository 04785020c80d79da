"""Random gradient-check instances for every differentiable block.

Each builder takes an RNG and returns ``(f, inputs)`` suitable for
``finite_diff_check``, or None when the draw lands within KINK of a
ReLU/hinge corner (the caller redraws).
"""

import numpy as np

from xar import numkit as nk
from xar.encoders import (
    ExpertSpec,
    GatedUnitParams,
    GateParams,
    ModelConfig,
    NetVladParams,
    _pool_expert,
    ce_similarity,
    collaborative_gate,
    encode_audio,
    encode_text,
    gate_preactivations,
    gated_embed,
    init_params,
    moee_similarity,
    netvlad_forward,
    geu_project,
)
from xar.numkit import Tensor
from xar.objectives import ranking_loss

KINK = 1e-3
MARGIN = 0.2


def t64(rng, *shape, scale=1.0):
    return Tensor(rng.uniform(-scale, scale, size=shape))


def _readout(rng, y):
    r = rng.normal(size=y.shape)
    return lambda t: nk.sum_(nk.mul(t, r))


def case_affine(rng):
    x, W, b = t64(rng, 3, 4), t64(rng, 4, 2), t64(rng, 2)
    out = _readout(rng, nk.affine(x, W, b))
    return (lambda x, W, b: out(nk.affine(x, W, b))), [x, W, b]


def case_sigmoid(rng):
    x = t64(rng, 3, 4, scale=3)
    out = _readout(rng, x)
    return (lambda x: out(nk.sigmoid(x))), [x]


def case_softmax(rng):
    x = t64(rng, 3, 4, scale=3)
    out = _readout(rng, x)
    return (lambda x: out(nk.softmax(x, axis=-1))), [x]


def case_l2_normalize(rng):
    x = t64(rng, 3, 4)
    out = _readout(rng, x)
    return (lambda x: out(nk.l2_normalize(x, axis=-1))), [x]


def case_netvlad_forward(rng):
    B, T, D, K, G = 2, 5, 3, 3, 1
    X = t64(rng, B, T, D)
    mask = rng.random((B, T)) < 0.7
    mask[:, 0] = True
    p = NetVladParams(t64(rng, K, D), t64(rng, D, K + G), t64(rng, K + G))
    out = _readout(rng, np.zeros((B, K * D)))
    return (lambda X, c, W, b: out(netvlad_forward(X, mask, NetVladParams(c, W, b)))), [X, *p]


def case_gated_embed(rng):
    x = t64(rng, 2, 4)
    p = GatedUnitParams(t64(rng, 4, 3), t64(rng, 3), t64(rng, 3, 3), t64(rng, 3))
    out = _readout(rng, np.zeros((2, 3)))
    return (lambda x, *q: out(gated_embed(x, GatedUnitParams(*q)))), [x, *p]


def _gate(rng, P):
    return GateParams(t64(rng, 2 * P, P), t64(rng, P), t64(rng, P, P), t64(rng, P), t64(rng, P, P), t64(rng, P))


def case_collaborative_gate(rng):
    P = 3
    f1, f2 = t64(rng, 2, P), t64(rng, 2, P)
    gate = _gate(rng, P)
    with nk.no_grad():
        pres = gate_preactivations([f1, f2], gate)
    if min(np.abs(p.data).min() for p in pres) < KINK:
        return None
    r1, r2 = rng.normal(size=(2, P)), rng.normal(size=(2, P))

    def f(f1, f2, *g):
        a, b = collaborative_gate([f1, f2], GateParams(*g))
        return nk.add(nk.sum_(nk.mul(a, r1)), nk.sum_(nk.mul(b, r2)))

    return f, [f1, f2, *gate]


def tiny_config(arch="ce", experts=2):
    specs = [ExpertSpec("a", 3, clusters=2, ghost_clusters=1), ExpertSpec("b", 4, clusters=2)][:experts]
    return ModelConfig(specs, word_dim=3, text_clusters=2, text_ghost_clusters=1, embed_dim=3, arch=arch)


def tiny_inputs(rng, config, B=2, T=4, L=4):
    feats = {}
    for e in config.experts:
        mask = rng.random((B, T)) < 0.75
        mask[:, 0] = True
        feats[e.name] = (Tensor(rng.normal(size=(B, T, e.dim))), mask)
    tok_mask = rng.random((B, L)) < 0.75
    tok_mask[:, 0] = True
    return feats, Tensor(rng.normal(size=(B, L, config.word_dim))), tok_mask


def case_moee_similarity(rng):
    cfg = tiny_config("moee")
    params = init_params(cfg, seed=int(rng.integers(1 << 30)), dtype=np.float64)
    feats, tokens, tmask = tiny_inputs(rng, cfg)
    r = rng.normal(size=(2, 2))
    names = params.names()

    def f(*_):
        s = moee_similarity(encode_audio(feats, params, arch="moee"), encode_text(tokens, tmask, params))
        return nk.sum_(nk.mul(s, r))

    return f, [params[n] for n in names]


def case_ce_similarity(rng):
    cfg = tiny_config("ce")
    params = init_params(cfg, seed=int(rng.integers(1 << 30)), dtype=np.float64)
    # scale gate weights up so the mask generator is not trivially linear
    for n in params.names():
        if n.startswith("gate."):
            params[n].data = rng.uniform(-1, 1, size=params[n].shape)
    feats, tokens, tmask = tiny_inputs(rng, cfg)
    with nk.no_grad():
        projected = [geu_project(_pool_expert(feats[n][0], feats[n][1], params, n), params.geu(f"audio.{n}.geu"))
                     for n in cfg.expert_names]
        pres = gate_preactivations(projected, params.gate())
    if min(np.abs(p.data).min() for p in pres) < KINK:
        return None
    r = rng.normal(size=(2, 2))

    def f(*_):
        return nk.sum_(nk.mul(ce_similarity(feats, tokens, tmask, params), r))

    return f, [params[n] for n in params.names()]


def case_ranking_loss(rng):
    B = int(rng.integers(2, 6))
    s = rng.uniform(-1, 1, size=(B, B))
    d = np.diag(s)
    off = ~np.eye(B, dtype=bool)
    if min(np.abs(MARGIN + s - d[:, None])[off].min(), np.abs(MARGIN + s - d[None, :])[off].min()) < KINK:
        return None
    return (lambda t: ranking_loss(t, MARGIN)), [Tensor(s)]


CASES = {
    "affine": case_affine,
    "sigmoid": case_sigmoid,
    "softmax": case_softmax,
    "l2_normalize": case_l2_normalize,
    "netvlad_forward": case_netvlad_forward,
    "gated_embed": case_gated_embed,
    "collaborative_gate": case_collaborative_gate,
    "moee_similarity": case_moee_similarity,
    "ce_similarity": case_ce_similarity,
    "ranking_loss": case_ranking_loss,
}


def draw(name, rng, max_tries=100):
    for _ in range(max_tries):
        case = CASES[name](rng)
        if case is not None:
            return case
    raise RuntimeError(f"could not draw a kink-free instance of {name}")
