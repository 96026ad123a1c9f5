"""Hand-set weights for a 4-layer model that answers chained symbol lookups.

The random model used by the property tests cannot answer anything, so quality
comparisons between reuse modes need a model whose correctness depends on
cross-chunk attention. This one is built directly, no training:

layer 0  previous-token head: copies the identity of the token one position back
layer 1  binding head: a symbol looks up the symbol written right after its own
         occurrence elsewhere ("XY" binds X -> Y) and stores Y
layer 2  second binding step on the result of layer 1
layer 3  readout head: the last question token finds the symbol that follows it
         and emits the deepest resolved value

Facts are two adjacent symbol bytes. A question ending in symbol ``P`` over the
facts ``R7``, ``QR``, ``PQ`` (in that order) is answered ``7``. When the facts sit
in different chunks, chunk caches computed in isolation cannot resolve the chain.
Content matching uses the lowest-frequency RoPE pairs, which barely rotate over
a few thousand positions; the previous-token head uses the highest-frequency ones.
"""

from __future__ import annotations

import numpy as np

from .model import LayerWeights, Model, ModelConfig
from .rope import RotationFrequencies

SYMBOLS = b"ABCDEFGHIJKLMNOPQRSTUVWXYZ0123456789#$%&"
SINK = ord("^")
N_SYM = len(SYMBOLS)

BINDING_CONFIG = ModelConfig(layers=4, heads=2, head_dim=128, vocab=256, ffn_mult=1, seed=0, rope_base=1e6)

# residual stream layout
CONST, IS_SYM, IS_SINK = 0, 1, 2
OWN = 8
PREV = OWN + N_SYM
RES1 = PREV + N_SYM
RES2 = RES1 + N_SYM
ANS = RES2 + N_SYM

CONST_VALUE = 100.0
POS_PAIRS = 8  # highest-frequency pairs used by the previous-token head
CONTENT_DIM0 = 88  # first head dim used for symbol matching (pairs 44..63)
BIAS_DIM = 86

# target scores after the 1/sqrt(head_dim) scaling
PREV_PEAK = 185.0
MATCH, SYM_BONUS, SINK_SCORE = 40.0, 40.0, 60.0
READOUT_WEIGHTS = (1.0, 2.0, 4.0)  # own, first resolution, second resolution
LOGIT_SCALE = 10.0


def is_symbol(byte: int) -> bool:
    return byte in SYMBOLS


def build_binding_model(cfg: ModelConfig = BINDING_CONFIG) -> Model:
    H = cfg.hidden
    if cfg.layers != 4 or cfg.head_dim < 128 or H < ANS + N_SYM:
        raise ValueError("binding model needs 4 layers, head_dim >= 128 and hidden >= 208")
    d = cfg.head_dim
    sqrt_d = np.sqrt(d)
    # RMS norm maps CONST_VALUE to sqrt(H); unit features become f
    f = np.sqrt(H) / CONST_VALUE
    c_norm = np.sqrt(H)
    theta = RotationFrequencies(d, cfg.rope_base).theta[0::2]

    embed = np.zeros((cfg.vocab, H), np.float32)
    embed[:, CONST] = CONST_VALUE
    for s, b in enumerate(SYMBOLS):
        embed[b, OWN + s] = 1.0
        embed[b, IS_SYM] = 1.0
    embed[SINK, IS_SINK] = 1.0

    def blank() -> LayerWeights:
        F = cfg.ffn_hidden
        z = lambda *shape: np.zeros(shape, np.float32)  # noqa: E731
        return LayerWeights(np.ones(H, np.float32), z(H, H), z(H, H), z(H, H), z(H, H),
                            np.ones(H, np.float32), z(H, F), z(H, F), z(F, H))

    # layer 0: previous-token head. q = R(-theta) u and k = u in the first pairs,
    # so q.k peaks where key position = query position - 1.
    l0 = blank()
    amp = np.sqrt(PREV_PEAK * sqrt_d / POS_PAIRS)
    for p in range(POS_PAIRS):
        l0.wq[CONST, 2 * p] = amp * np.cos(theta[p]) / c_norm
        l0.wq[CONST, 2 * p + 1] = -amp * np.sin(theta[p]) / c_norm
        l0.wk[CONST, 2 * p] = amp / c_norm
    for s in range(N_SYM):
        l0.wv[OWN + s, s] = 1.0 / f
        l0.wo[s, PREV + s] = 1.0

    def binding(query_src: int, value_terms: list[tuple[int, float]], out_dst: int) -> LayerWeights:
        lw = blank()
        for s in range(N_SYM):
            lw.wq[query_src + s, CONTENT_DIM0 + s] = MATCH * sqrt_d / f
            lw.wk[PREV + s, CONTENT_DIM0 + s] = 1.0 / f
            for src, weight in value_terms:
                lw.wv[src + s, s] = weight / f
            lw.wo[s, out_dst + s] = 1.0
        lw.wq[CONST, BIAS_DIM] = 1.0 / c_norm
        lw.wk[IS_SYM, BIAS_DIM] = SYM_BONUS * sqrt_d / f
        lw.wk[IS_SINK, BIAS_DIM] = SINK_SCORE * sqrt_d / f
        return lw

    l1 = binding(OWN, [(OWN, 1.0)], RES1)
    l2 = binding(RES1, [(OWN, 1.0)], RES2)
    own_w, res1_w, res2_w = READOUT_WEIGHTS
    l3 = binding(OWN, [(OWN, own_w), (RES1, res1_w), (RES2, res2_w)], ANS)

    unembed = np.zeros((H, cfg.vocab), np.float32)
    for s, b in enumerate(SYMBOLS):
        unembed[ANS + s, b] = LOGIT_SCALE / f
    return Model(cfg, embed, [l0, l1, l2, l3], np.ones(H, np.float32), unembed)
