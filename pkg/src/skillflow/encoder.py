"""Skill-aware multimodal encoding.

Toy featurizers turn the image, instruction and boxes into token sequences;
each sequence is self-attended, then read out by the skill tokens through
cross-attention and a feed-forward map:

    v'_x = FFN_x(MHCA_x(S_i, MHSA_x(v_x)))      x in {I, L, B}

All batched ops carry a leading batch axis. Parameter names are prefixed
``enc.``.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import nn
from .skillbank import SkillId

MODALITIES = ("img", "lang", "box")


@dataclass(frozen=True)
class EncoderConfig:
    D: int = 32
    heads: int = 4
    Ns: int = 5
    vocab: int = 36
    patch_grid: int = 4
    box_freqs: int = 4
    ffn_hidden: int = 64
    cls_hidden: int = 32
    scaled_attention: bool = True

    def __post_init__(self):
        if self.D % self.heads:
            raise ValueError("D must be divisible by heads")


@dataclass(frozen=True, eq=False)
class TokenSeq:
    tokens: np.ndarray
    modality: str


@dataclass(frozen=True, eq=False)
class SkillAwareContext:
    v_skill: np.ndarray  # (1, D)
    v_img: TokenSeq
    v_lang: TokenSeq
    v_box: TokenSeq
    skill: SkillId | None = None

    def stacked(self) -> np.ndarray:
        """(4, D) conditioning sequence [v_S, v'_I, v'_L, v'_B]."""
        return np.concatenate([self.v_skill, self.v_img.tokens, self.v_lang.tokens, self.v_box.tokens])


def init_encoder_params(cfg: EncoderConfig, rng: np.random.Generator) -> dict:
    D = cfg.D
    p = {}
    p.update(nn.prefixed("enc.img", nn.init_linear(rng, 3, D)))
    p["enc.lang.E"] = rng.normal(0.0, 1.0, (cfg.vocab, D))
    p.update(nn.prefixed("enc.box", nn.init_linear(rng, 8 * cfg.box_freqs, D)))
    p["enc.skill_tokens"] = rng.normal(0.0, 1.0, (cfg.Ns, D)) / np.sqrt(D)
    for m in MODALITIES:
        p.update(nn.prefixed(f"enc.sa_{m}", nn.init_attention(rng, D, D, D)))
        p.update(nn.prefixed(f"enc.ca_{m}", nn.init_attention(rng, D, D, D)))
        p.update(nn.prefixed(f"enc.ffn_{m}", nn.init_ffn(rng, D, cfg.ffn_hidden, D)))
    l1 = nn.init_linear(rng, 2 * D, cfg.cls_hidden)
    l2 = nn.init_linear(rng, cfg.cls_hidden, cfg.Ns)
    p.update({"enc.cls.W1": l1["W"], "enc.cls.b1": l1["b"], "enc.cls.W2": l2["W"], "enc.cls.b2": l2["b"]})
    return p


# ---------------------------------------------------------------------------
# Fixed featurizers
# ---------------------------------------------------------------------------

def sinusoid_frequencies(n_freqs: int) -> np.ndarray:
    """Angular frequencies pi * 2^f; channel f has period 2 / 2^f in normalised units."""
    return np.pi * 2.0 ** np.arange(n_freqs)


def sinusoid_encode(coords, n_freqs: int) -> np.ndarray:
    """[sin(w c), cos(w c)] for every coordinate and frequency, flattened per row."""
    c = np.asarray(coords, dtype=float)
    ang = c[..., None] * sinusoid_frequencies(n_freqs)
    enc = np.stack([np.sin(ang), np.cos(ang)], axis=-1)
    return enc.reshape(*c.shape[:-1], c.shape[-1] * n_freqs * 2)


def box_encoding(boxes, image_size, n_freqs: int) -> np.ndarray:
    """2D sinusoidal code of the corners (x1, y1, x2, y2), normalised by image size."""
    w, h = image_size
    b = np.asarray(boxes, dtype=float) / np.array([w, h, w, h])
    return sinusoid_encode(b, n_freqs)


def image_patches(image, grid: int) -> np.ndarray:
    """Mean colour of each cell of a ``grid x grid`` partition, row-major, (grid^2, 3)."""
    img = np.asarray(image, dtype=float)
    rows = np.array_split(np.arange(img.shape[0]), grid)
    cols = np.array_split(np.arange(img.shape[1]), grid)
    return np.array([img[r[0]:r[-1] + 1, c[0]:c[-1] + 1].reshape(-1, 3).mean(axis=0) for r in rows for c in cols])


@dataclass(frozen=True, eq=False)
class EncoderBatch:
    patches: np.ndarray  # (B, P, 3)
    instruction: np.ndarray  # (B, L) int
    boxes: np.ndarray  # (B, No, 8F) sinusoid codes
    labels: np.ndarray  # (B,) int, -1 when unknown

    def __len__(self):
        return self.patches.shape[0]

    def take(self, idx) -> "EncoderBatch":
        return EncoderBatch(self.patches[idx], self.instruction[idx], self.boxes[idx], self.labels[idx])


def make_encoder_batch(inputs, cfg: EncoderConfig) -> EncoderBatch:
    patches = np.stack([image_patches(t.image, cfg.patch_grid) for t in inputs])
    instr = np.stack([np.asarray(t.instruction, dtype=np.int64) for t in inputs])
    boxes = np.stack([box_encoding(t.boxes, t.image_size, cfg.box_freqs) for t in inputs])
    labels = np.array([t.skill_label.index if t.skill_label is not None else -1 for t in inputs], dtype=np.int64)
    return EncoderBatch(patches, instr, boxes, labels)


# ---------------------------------------------------------------------------
# Single-sequence ops
# ---------------------------------------------------------------------------

def mhsa(X, params: dict, prefix: str, heads: int, scaled: bool = True, return_attention: bool = False):
    tokens = X.tokens if isinstance(X, TokenSeq) else np.asarray(X, dtype=float)
    y, cache = nn.attention_fwd(tokens, tokens, nn.sub(params, prefix), heads, scaled)
    return (y, cache["attn"]) if return_attention else y


def mhca(Xq, Ykv, params: dict, prefix: str, heads: int, scaled: bool = True, return_attention: bool = False):
    q = Xq.tokens if isinstance(Xq, TokenSeq) else np.asarray(Xq, dtype=float)
    kv = Ykv.tokens if isinstance(Ykv, TokenSeq) else np.asarray(Ykv, dtype=float)
    y, cache = nn.attention_fwd(q, kv, nn.sub(params, prefix), heads, scaled)
    return (y, cache["attn"]) if return_attention else y


def featurize(task, params: dict, cfg: EncoderConfig) -> tuple[TokenSeq, TokenSeq, TokenSeq]:
    batch = make_encoder_batch([task], cfg)
    (v_i, v_l, v_b), _ = featurize_fwd(batch, params)
    return TokenSeq(v_i[0], "Image"), TokenSeq(v_l[0], "Language"), TokenSeq(v_b[0], "Boxes")


def predict_label(logits) -> int:
    """Argmax; ``np.argmax`` already breaks ties toward the lowest index."""
    return int(np.argmax(logits))


def classify_skill(v_I, v_L, params: dict) -> tuple[np.ndarray, int]:
    vi = v_I.tokens if isinstance(v_I, TokenSeq) else v_I
    vl = v_L.tokens if isinstance(v_L, TokenSeq) else v_L
    logits, _ = classifier_fwd(vi[None], vl[None], params)
    return logits[0], predict_label(logits[0])


# ---------------------------------------------------------------------------
# Batched forward / backward
# ---------------------------------------------------------------------------

def featurize_fwd(batch: EncoderBatch, params: dict):
    v_i = nn.linear_fwd(batch.patches, params["enc.img.W"], params["enc.img.b"])
    v_l = params["enc.lang.E"][batch.instruction]
    v_b = nn.linear_fwd(batch.boxes, params["enc.box.W"], params["enc.box.b"])
    return (v_i, v_l, v_b), batch


def featurize_bwd(dv, batch: EncoderBatch, params: dict) -> dict:
    dv_i, dv_l, dv_b = dv
    g = {}
    _, g["enc.img.W"], g["enc.img.b"] = nn.linear_bwd(dv_i, batch.patches, params["enc.img.W"])
    dE = np.zeros_like(params["enc.lang.E"])
    np.add.at(dE, batch.instruction.reshape(-1), dv_l.reshape(-1, dv_l.shape[-1]))
    g["enc.lang.E"] = dE
    _, g["enc.box.W"], g["enc.box.b"] = nn.linear_bwd(dv_b, batch.boxes, params["enc.box.W"])
    return g


def classifier_fwd(v_i, v_l, params: dict):
    pooled = np.concatenate([v_i.mean(axis=-2), v_l.mean(axis=-2)], axis=-1)
    h = np.tanh(pooled @ params["enc.cls.W1"] + params["enc.cls.b1"])
    logits = h @ params["enc.cls.W2"] + params["enc.cls.b2"]
    return logits, (pooled, h, v_i.shape, v_l.shape)


def classifier_bwd(dlogits, cache, params: dict):
    pooled, h, si, sl = cache
    g = {}
    dh, g["enc.cls.W2"], g["enc.cls.b2"] = nn.linear_bwd(dlogits, h, params["enc.cls.W2"])
    dpre = nn.tanh_bwd(dh, h)
    dpooled, g["enc.cls.W1"], g["enc.cls.b1"] = nn.linear_bwd(dpre, pooled, params["enc.cls.W1"])
    D = si[-1]
    dv_i = np.broadcast_to(dpooled[..., None, :D] / si[-2], si)
    dv_l = np.broadcast_to(dpooled[..., None, D:] / sl[-2], sl)
    return (dv_i, dv_l), g


def encoder_fwd(batch: EncoderBatch, params: dict, cfg: EncoderConfig):
    """Contexts for every skill token plus classifier logits.

    Returns ``ctx_all`` (B, Ns, 4, D), ``logits`` (B, Ns) and a cache.
    """
    (v_i, v_l, v_b), _ = featurize_fwd(batch, params)
    logits, cls_cache = classifier_fwd(v_i, v_l, params)
    B = len(batch)
    S = params["enc.skill_tokens"]
    queries = np.broadcast_to(S, (B,) + S.shape)
    outs, caches = [], {}
    for m, v in zip(MODALITIES, (v_i, v_l, v_b)):
        u, c_sa = nn.attention_fwd(v, v, nn.sub(params, f"enc.sa_{m}"), cfg.heads, cfg.scaled_attention)
        c, c_ca = nn.attention_fwd(queries, u, nn.sub(params, f"enc.ca_{m}"), cfg.heads, cfg.scaled_attention)
        f, c_ffn = nn.ffn_fwd(c, nn.sub(params, f"enc.ffn_{m}"))
        outs.append(f)
        caches[m] = (c_sa, c_ca, c_ffn)
    ctx_all = np.stack([queries] + outs, axis=2)
    cache = {"batch": batch, "cls": cls_cache, "mods": caches}
    return ctx_all, logits, cache


def encoder_bwd(dctx_all, dlogits, cache, params: dict) -> dict:
    grads: dict = {}
    batch = cache["batch"]
    dS = dctx_all[:, :, 0].sum(axis=0)
    dv = []
    for j, m in enumerate(MODALITIES):
        c_sa, c_ca, c_ffn = cache["mods"][m]
        dc, g = nn.ffn_bwd(dctx_all[:, :, j + 1], c_ffn)
        nn.accumulate(grads, f"enc.ffn_{m}", g)
        dq, du, g = nn.attention_bwd(dc, c_ca)
        nn.accumulate(grads, f"enc.ca_{m}", g)
        dS = dS + dq.sum(axis=0)
        dxq, dxkv, g = nn.attention_bwd(du, c_sa)
        nn.accumulate(grads, f"enc.sa_{m}", g)
        dv.append(dxq + dxkv)
    if dlogits is not None:
        (dvi_c, dvl_c), g = classifier_bwd(dlogits, cache["cls"], params)
        nn.accumulate(grads, "", g)
        dv[0] = dv[0] + dvi_c
        dv[1] = dv[1] + dvl_c
    nn.accumulate(grads, "", featurize_bwd(dv, batch, params))
    grads["enc.skill_tokens"] = dS
    return grads


def skill_aware_encode(task, params: dict, cfg: EncoderConfig, skill: SkillId | int | None = None) -> SkillAwareContext:
    """Encode one task; the classifier picks the skill token unless ``skill`` is given."""
    batch = make_encoder_batch([task], cfg)
    ctx_all, logits, _ = encoder_fwd(batch, params, cfg)
    if skill is None:
        idx = predict_label(logits[0])
        chosen = None
    else:
        idx = skill.index if isinstance(skill, SkillId) else int(skill)
        chosen = skill if isinstance(skill, SkillId) else None
    c = ctx_all[0, idx]
    return SkillAwareContext(c[0:1], TokenSeq(c[1:2], "Image"), TokenSeq(c[2:3], "Language"),
                             TokenSeq(c[3:4], "Boxes"), chosen)
