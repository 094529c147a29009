"""Skill-conditioned DDPM over normalised motion flows.

The denoiser is small enough to gradient-check element by element:

    a0 = tanh(z W_in + pos_t + emb_k)                    per point and frame
    a1 = a0 + MHCA(a0, ctx)                              conditioning tokens as keys
    a2 = a1 + MHSA_T(a1)                                 temporal motion module, per point
    h  = mean_{n,t}(a2) W_h                              contrastive feature
    eps_hat = tanh(a2 W_d1 + b_d1) W_d2 + b_d2

Training evaluates the temporal stack for every skill token so the
contrastive negatives come from the same pass; only the selected token's
branch is decoded.
"""

from __future__ import annotations

import csv
import json
from dataclasses import asdict, dataclass, field
from typing import Callable, Sequence

import numpy as np

from . import __version__, nn
from .encoder import EncoderBatch, EncoderConfig, encoder_bwd, encoder_fwd, init_encoder_params
from .errors import BadStep, NonFiniteLoss, ZeroVector
from .geometry import CameraModel, MotionFlow2D
from .skillbank import SKILLS, SkillId

CHECKPOINT_VERSION = 1
PROMPT_SEED = 20240


# ---------------------------------------------------------------------------
# Schedule and flow normalisation
# ---------------------------------------------------------------------------

@dataclass(frozen=True, eq=False)
class DiffusionSchedule:
    betas: np.ndarray

    def __post_init__(self):
        b = np.asarray(self.betas, dtype=float)
        if b.ndim != 1 or b.size < 1 or np.any(b <= 0) or np.any(b >= 1):
            raise ValueError("betas must be a non-empty vector in (0, 1)")
        object.__setattr__(self, "betas", b)

    @classmethod
    def linear(cls, m: int = 50, beta_start: float = 1e-4, beta_end: float = 0.02,
               rescale: bool = True) -> "DiffusionSchedule":
        """Linear betas; ``rescale`` stretches the 1000-step endpoints to ``m`` steps.

        Without rescaling a 50-step chain ends at alpha_bar ~ 0.6, far from the
        N(0, I) start of sampling. Rescaled betas are capped at 0.999.
        """
        if m < 1:
            raise ValueError("m must be >= 1")
        f = 1000.0 / m if rescale else 1.0
        return cls(np.minimum(np.linspace(beta_start * f, beta_end * f, m), 0.999))

    @property
    def m(self) -> int:
        return self.betas.size

    @property
    def alphas(self) -> np.ndarray:
        return 1.0 - self.betas

    @property
    def alpha_bars(self) -> np.ndarray:
        """alpha_bar_k for k = 1..m at index k-1."""
        return np.cumprod(self.alphas)

    def alpha_bar(self, k: int) -> float:
        """alpha_bar_k with the convention alpha_bar_0 = 1."""
        if k == 0:
            return 1.0
        self.check_step(k)
        return float(self.alpha_bars[k - 1])

    def posterior_variance(self, k: int) -> float:
        self.check_step(k)
        return (1.0 - self.alpha_bar(k - 1)) / (1.0 - self.alpha_bar(k)) * float(self.betas[k - 1])

    def check_step(self, k) -> None:
        k = np.asarray(k)
        if np.any(k < 1) or np.any(k > self.m):
            raise BadStep(f"step must be in [1, {self.m}], got {k.tolist()}")


def encode_flow(flow: MotionFlow2D | np.ndarray, cam: CameraModel) -> np.ndarray:
    """Pixels to [-1, 1]: (0, 0) maps to (-1, -1) and the image centre to 0."""
    tracks = flow.tracks if isinstance(flow, MotionFlow2D) else np.asarray(flow, dtype=float)
    half = np.array([cam.width / 2.0, cam.height / 2.0])
    return (tracks - half) / half


def decode_flow(z, cam: CameraModel) -> MotionFlow2D:
    half = np.array([cam.width / 2.0, cam.height / 2.0])
    return MotionFlow2D(np.asarray(z, dtype=float) * half + half)


def forward_diffuse(z0, k: int, eps, schedule: DiffusionSchedule) -> np.ndarray:
    schedule.check_step(k)
    z0 = np.asarray(z0, dtype=float)
    eps = np.asarray(eps, dtype=float)
    if eps.shape != z0.shape:
        raise ValueError("eps must match z0")
    ab = schedule.alpha_bar(k)
    return np.sqrt(ab) * z0 + np.sqrt(1.0 - ab) * eps


# ---------------------------------------------------------------------------
# Losses
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class LossParts:
    mse: float
    ce: float
    con: float


def loss_denoise(eps_hat, eps) -> float:
    d = np.asarray(eps_hat, dtype=float) - np.asarray(eps, dtype=float)
    return float(np.mean(d * d))


def loss_classify(logits, label: int) -> float:
    return float(-nn.log_softmax(np.asarray(logits, dtype=float))[int(label)])


def grad_classify(logits, label: int) -> np.ndarray:
    p = nn.softmax(np.asarray(logits, dtype=float))
    p[int(label)] -= 1.0
    return p


def contrastive_from_alignments(alphas, positive: int, tau: float) -> float:
    """-log softmax(alphas / tau)[positive]."""
    if tau <= 0:
        raise ValueError("tau must be positive")
    return float(-nn.log_softmax(np.asarray(alphas, dtype=float) / tau)[positive])


def _check_nonzero(vectors) -> None:
    if np.any(np.linalg.norm(vectors, axis=-1) == 0):
        raise ZeroVector("contrastive features and prompts must be non-zero")


def loss_contrastive(h_pos, h_negs: Sequence, prompt_bank, skill, tau: float) -> float:
    """InfoNCE with the true skill's prompt as anchor, its feature as positive."""
    i = skill.index if isinstance(skill, SkillId) else int(skill)
    H = np.stack([np.asarray(h_pos, dtype=float)] + [np.asarray(h, dtype=float) for h in h_negs])
    anchor = np.asarray(prompt_bank, dtype=float)[i]
    _check_nonzero(H)
    _check_nonzero(anchor[None])
    alphas, _ = nn.cosine_fwd(H, anchor)
    return contrastive_from_alignments(alphas, 0, tau)


def loss_total(parts: LossParts, w1: float = 0.01, w2: float = 0.02) -> float:
    if w1 < 0 or w2 < 0:
        raise ValueError("loss weights must be >= 0")
    return parts.mse + w1 * parts.ce + w2 * parts.con


def make_prompt_bank(D: int, skills: Sequence[SkillId] = SKILLS, seed: int = PROMPT_SEED) -> np.ndarray:
    """Fixed skill prompts: mean of seeded word vectors of each skill name, unit norm."""
    from .synth import SKILL_NAME_TOKENS, TOKEN, VOCAB
    table = np.random.default_rng(seed).normal(0.0, 1.0, (len(VOCAB), D))
    rows = []
    for s in skills:
        ids = [TOKEN[w] for w in SKILL_NAME_TOKENS[s.index]]
        v = table[ids].mean(axis=0)
        rows.append(v / np.linalg.norm(v))
    return np.stack(rows)


# ---------------------------------------------------------------------------
# Model configuration and parameters
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class DenoiserConfig:
    T: int = 32
    N: int = 25
    H: int = 16
    heads: int = 2
    dec_hidden: int = 32
    m: int = 50
    rescale_schedule: bool = True

    def __post_init__(self):
        if self.H % self.heads:
            raise ValueError("H must be divisible by heads")

    def schedule(self) -> DiffusionSchedule:
        return DiffusionSchedule.linear(self.m, rescale=self.rescale_schedule)


@dataclass(frozen=True)
class ModelConfig:
    encoder: EncoderConfig = field(default_factory=EncoderConfig)
    denoiser: DenoiserConfig = field(default_factory=DenoiserConfig)

    def to_dict(self) -> dict:
        return {"encoder": asdict(self.encoder), "denoiser": asdict(self.denoiser)}

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        return cls(EncoderConfig(**d["encoder"]), DenoiserConfig(**d["denoiser"]))


def init_denoiser_params(cfg: DenoiserConfig, D: int, rng: np.random.Generator) -> dict:
    H = cfg.H
    p = {
        "den.in.W": rng.normal(0.0, 1.0 / np.sqrt(2), (2, H)),
        "den.pos": rng.normal(0.0, 0.1, (cfg.T, H)),
        "den.temb": rng.normal(0.0, 0.1, (cfg.m, H)),
        "den.h.W": rng.normal(0.0, 1.0 / np.sqrt(H), (H, D)),
    }
    p.update(nn.prefixed("den.ca", nn.init_attention(rng, H, D, H)))
    p.update(nn.prefixed("den.sa", nn.init_attention(rng, H, H, H)))
    p.update(nn.prefixed("den.dec", nn.init_ffn(rng, H, cfg.dec_hidden, 2)))
    return p


def init_params(cfg: ModelConfig, seed: int) -> dict:
    enc = init_encoder_params(cfg.encoder, np.random.default_rng([seed, 100]))
    den = init_denoiser_params(cfg.denoiser, cfg.encoder.D, np.random.default_rng([seed, 101]))
    return {**enc, **den}


# ---------------------------------------------------------------------------
# Denoiser forward / backward
# ---------------------------------------------------------------------------

def denoiser_fwd(zk, k, ctx_all, select, params: dict, cfg: DenoiserConfig, scaled: bool = True):
    """Batched noise prediction.

    zk: (B, T, N, 2); k: (B,) steps in 1..m; ctx_all: (B, J, 4, D);
    select: (B,) branch to decode. Returns eps_hat (B, T, N, 2), h (B, J, D), cache.
    """
    B, T, N, _ = zk.shape
    J = ctx_all.shape[1]
    x = zk.transpose(0, 2, 1, 3)  # (B, N, T, 2)
    pre = x @ params["den.in.W"] + params["den.pos"][:T] + params["den.temb"][k - 1][:, None, None, :]
    a0 = np.tanh(pre).reshape(B, 1, N * T, cfg.H)
    ca, c_ca = nn.attention_fwd(a0, ctx_all, nn.sub(params, "den.ca"), cfg.heads, scaled)
    a1 = (a0 + ca).reshape(B, J, N, T, cfg.H)
    sa, c_sa = nn.attention_fwd(a1, a1, nn.sub(params, "den.sa"), cfg.heads, scaled)
    a2 = a1 + sa
    pooled = a2.mean(axis=(2, 3))
    h = pooled @ params["den.h.W"]
    sel = a2[np.arange(B), select]  # (B, N, T, H)
    out, c_dec = nn.ffn_fwd(sel, nn.sub(params, "den.dec"))
    eps_hat = out.transpose(0, 2, 1, 3)
    cache = {"x": x, "a0": a0, "c_ca": c_ca, "c_sa": c_sa, "pooled": pooled, "c_dec": c_dec,
             "select": select, "shape": (B, J, N, T), "k": k}
    return eps_hat, h, cache


def denoiser_bwd(deps_hat, dh, cache, params: dict, cfg: DenoiserConfig):
    """Returns (dctx_all, grads)."""
    B, J, N, T = cache["shape"]
    H = cfg.H
    g: dict = {}
    dsel, gd = nn.ffn_bwd(deps_hat.transpose(0, 2, 1, 3), cache["c_dec"])
    nn.accumulate(g, "den.dec", gd)
    g["den.h.W"] = nn._flat2(cache["pooled"]).T @ nn._flat2(dh)
    dpooled = dh @ params["den.h.W"].T
    da2 = np.broadcast_to(dpooled[:, :, None, None, :] / (N * T), (B, J, N, T, H)).copy()
    da2[np.arange(B), cache["select"]] += dsel
    dq, dkv, gs = nn.attention_bwd(da2, cache["c_sa"])
    nn.accumulate(g, "den.sa", gs)
    da1 = (da2 + dq + dkv).reshape(B, J, N * T, H)
    dq0, dctx, gc = nn.attention_bwd(da1, cache["c_ca"])
    nn.accumulate(g, "den.ca", gc)
    da0 = (da1.sum(axis=1, keepdims=True) + dq0).reshape(B, N, T, H)
    a0 = cache["a0"].reshape(B, N, T, H)
    dpre = nn.tanh_bwd(da0, a0)
    g["den.in.W"] = nn._flat2(cache["x"]).T @ nn._flat2(dpre)
    dpos = np.zeros_like(params["den.pos"])
    dpos[:T] = dpre.sum(axis=(0, 1))
    g["den.pos"] = dpos
    dtemb = np.zeros_like(params["den.temb"])
    np.add.at(dtemb, cache["k"] - 1, dpre.sum(axis=(1, 2)))
    g["den.temb"] = dtemb
    return dctx, g


def predict_noise(z_k, k: int, ctx, params: dict, cfg: ModelConfig) -> np.ndarray:
    """Single-sample noise prediction for a (T, N, 2) latent under one context."""
    c = ctx.stacked() if hasattr(ctx, "stacked") else np.asarray(ctx, dtype=float)
    z = np.asarray(z_k, dtype=float)[None]
    eps_hat, _, _ = denoiser_fwd(z, np.array([int(k)]), c[None, None], np.array([0]), params,
                                 cfg.denoiser, cfg.encoder.scaled_attention)
    return eps_hat[0]


def sample_latent(schedule: DiffusionSchedule, shape, seed: int,
                  denoiser: Callable[[np.ndarray, int], np.ndarray]) -> np.ndarray:
    """Ancestral DDPM sampling from a seeded Gaussian; ``denoiser(z_k, k)`` returns eps_hat."""
    rng = np.random.default_rng(seed)
    z = rng.standard_normal(shape)
    for k in range(schedule.m, 0, -1):
        beta = float(schedule.betas[k - 1])
        eps_hat = denoiser(z, k)
        z = (z - beta / np.sqrt(1.0 - schedule.alpha_bar(k)) * eps_hat) / np.sqrt(1.0 - beta)
        if k > 1:
            z = z + np.sqrt(schedule.posterior_variance(k)) * rng.standard_normal(shape)
    return z


def sample(ctx, schedule: DiffusionSchedule, params: dict, seed: int, cfg: ModelConfig,
           cam: CameraModel, denoiser: Callable | None = None) -> MotionFlow2D:
    if denoiser is None:
        def denoiser(z, k):
            return predict_noise(z, k, ctx, params, cfg)
    shape = (cfg.denoiser.T, cfg.denoiser.N, 2)
    return decode_flow(sample_latent(schedule, shape, seed, denoiser), cam)


# ---------------------------------------------------------------------------
# Joint loss and gradient
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 200
    batch_size: int = 10
    lr: float = 1e-2
    momentum: float = 0.9
    w1: float = 0.01
    w2: float = 0.02
    tau: float = 0.1
    teacher_forcing: bool = True
    seed: int = 0

    def __post_init__(self):
        if self.epochs < 0 or self.batch_size < 1 or self.lr < 0 or self.tau <= 0:
            raise ValueError("invalid training configuration")


@dataclass(frozen=True, eq=False)
class TrainingSet:
    enc: EncoderBatch
    z0: np.ndarray  # (B, T, N, 2)

    def __len__(self):
        return self.z0.shape[0]

    def take(self, idx) -> "TrainingSet":
        return TrainingSet(self.enc.take(idx), self.z0[idx])


def batch_loss(params: dict, data: TrainingSet, k, eps, prompts, cfg: ModelConfig, tcfg: TrainConfig,
               need_grad: bool = True, w_mse: float = 1.0):
    """Mean L_MSE, L_CE, L_con over the batch, with the gradient of the objective if requested.

    The objective is ``w_mse * L_MSE + w1 * L_CE + w2 * L_con``; ``w_mse`` is
    only changed to isolate single terms. Returns (LossParts, objective,
    grads or None, n_correct).
    """
    labels = data.enc.labels
    if np.any(labels < 0):
        raise ValueError("training requires skill labels")
    schedule = cfg.denoiser.schedule()
    B = len(data)
    ctx_all, logits, ecache = encoder_fwd(data.enc, params, cfg.encoder)
    predicted = np.argmax(logits, axis=1)
    select = labels if tcfg.teacher_forcing else predicted
    ab = schedule.alpha_bars[k - 1][:, None, None, None]
    zk = np.sqrt(ab) * data.z0 + np.sqrt(1.0 - ab) * eps
    eps_hat, h, dcache = denoiser_fwd(zk, k, ctx_all, select, params, cfg.denoiser,
                                      cfg.encoder.scaled_attention)

    diff = eps_hat - eps
    l_mse = float(np.mean(diff * diff))
    logp = nn.log_softmax(logits)
    l_ce = float(-logp[np.arange(B), labels].mean())
    anchors = prompts[labels][:, None, :]
    _check_nonzero(h)
    alphas, cos_cache = nn.cosine_fwd(h, anchors)  # (B, J)
    logq = nn.log_softmax(alphas / tcfg.tau)
    l_con = float(-logq[np.arange(B), labels].mean())
    parts = LossParts(l_mse, l_ce, l_con)
    total = loss_total(parts, tcfg.w1, tcfg.w2) + (w_mse - 1.0) * l_mse
    n_correct = int(np.sum(predicted == labels))
    if not need_grad:
        return parts, total, None, n_correct

    onehot = np.eye(logits.shape[1])[labels]
    deps_hat = w_mse * 2.0 * diff / diff.size
    dlogits = tcfg.w1 * (np.exp(logp) - onehot) / B
    dalpha = tcfg.w2 * (np.exp(logq) - onehot) / (tcfg.tau * B)
    dh = nn.cosine_bwd_h(dalpha, cos_cache)
    dctx, grads = denoiser_bwd(deps_hat, dh, dcache, params, cfg.denoiser)
    nn.accumulate(grads, "", encoder_bwd(dctx, dlogits, ecache, params))
    return parts, total, grads, n_correct


# ---------------------------------------------------------------------------
# Training
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class EpochMetrics:
    epoch: int
    l_mse: float
    l_ce: float
    l_con: float
    acc: float

    def total(self, w1: float, w2: float) -> float:
        return loss_total(LossParts(self.l_mse, self.l_ce, self.l_con), w1, w2)


def make_training_set(flows, inputs, cfg: ModelConfig, cam: CameraModel) -> TrainingSet:
    from .encoder import make_encoder_batch
    z0 = np.stack([encode_flow(f, cam) for f in flows])
    if z0.shape[1:] != (cfg.denoiser.T, cfg.denoiser.N, 2):
        raise ValueError(f"flows must be (T, N) = ({cfg.denoiser.T}, {cfg.denoiser.N}), got {z0.shape[1:3]}")
    return TrainingSet(make_encoder_batch(inputs, cfg.encoder), z0)


def train(data: TrainingSet, cfg: ModelConfig, tcfg: TrainConfig, params: dict | None = None,
          on_epoch: Callable[[EpochMetrics], None] | None = None) -> tuple[dict, list[EpochMetrics]]:
    """Seeded mini-batch SGD with momentum; returns new params and per-epoch metrics."""
    if len(data) == 0:
        raise ValueError("empty training set")
    params = {k: v.copy() for k, v in (params or init_params(cfg, tcfg.seed)).items()}
    velocity = {k: np.zeros_like(v) for k, v in params.items()}
    prompts = make_prompt_bank(cfg.encoder.D)
    schedule = cfg.denoiser.schedule()
    rng = np.random.default_rng([tcfg.seed, 200])
    log = []
    for epoch in range(1, tcfg.epochs + 1):
        order = rng.permutation(len(data))
        sums = np.zeros(3)
        correct = 0
        for step, start in enumerate(range(0, len(data), tcfg.batch_size)):
            idx = order[start:start + tcfg.batch_size]
            batch = data.take(idx)
            k = rng.integers(1, schedule.m + 1, size=idx.size)
            eps = rng.standard_normal(batch.z0.shape)
            parts, total, grads, n_ok = batch_loss(params, batch, k, eps, prompts, cfg, tcfg)
            if not np.isfinite(total):
                raise NonFiniteLoss(f"non-finite loss at epoch {epoch}, step {step}: {parts}", epoch, step)
            for name, g in grads.items():
                v = velocity[name]
                v *= tcfg.momentum
                v += g
                params[name] -= tcfg.lr * v
            sums += idx.size * np.array([parts.mse, parts.ce, parts.con])
            correct += n_ok
        m = sums / len(data)
        rec = EpochMetrics(epoch, float(m[0]), float(m[1]), float(m[2]), correct / len(data))
        log.append(rec)
        if on_epoch is not None:
            on_epoch(rec)
    return params, log


def classifier_accuracy(params: dict, data: TrainingSet, cfg: ModelConfig) -> float:
    _, logits, _ = encoder_fwd(data.enc, params, cfg.encoder)
    return float(np.mean(np.argmax(logits, axis=1) == data.enc.labels))


def write_metrics_csv(path, log: Sequence[EpochMetrics]) -> None:
    with open(path, "w", newline="") as f:
        w = csv.writer(f, lineterminator="\n")
        w.writerow(["epoch", "l_mse", "l_ce", "l_con", "acc"])
        for r in log:
            w.writerow([r.epoch, repr(r.l_mse), repr(r.l_ce), repr(r.l_con), repr(r.acc)])


# ---------------------------------------------------------------------------
# Finite-difference check
# ---------------------------------------------------------------------------

def tiny_config() -> ModelConfig:
    return ModelConfig(EncoderConfig(D=8, heads=2, ffn_hidden=8, cls_hidden=8, patch_grid=2, box_freqs=2),
                       DenoiserConfig(T=4, N=4, H=8, heads=2, dec_hidden=8, m=10))


def random_training_set(cfg: ModelConfig, B: int, seed: int) -> TrainingSet:
    rng = np.random.default_rng(seed)
    e = cfg.encoder
    enc = EncoderBatch(rng.normal(0.0, 2.0, (B, e.patch_grid**2, 3)),
                       rng.integers(0, e.vocab, (B, 6)),
                       rng.uniform(-1, 1, (B, 2, 8 * e.box_freqs)),
                       rng.integers(0, e.Ns, B))
    z0 = rng.uniform(-1, 1, (B, cfg.denoiser.T, cfg.denoiser.N, 2))
    return TrainingSet(enc, z0)


def grad_check(cfg: ModelConfig | None = None, tcfg: TrainConfig | None = None, seed: int = 0,
               B: int = 3, h: float = 1e-5, terms: str = "total", zero_tol: float = 1e-7) -> dict[str, float]:
    """Per-tensor relative error ||g - g_fd|| / max(||g||, ||g_fd||) of the analytic gradient.

    Tensors whose analytic and numeric gradients both have norm below
    ``zero_tol`` (the term does not depend on them) report 0.

    ``terms`` picks the objective: "total", "mse", "ce" or "con".
    """
    cfg = cfg or tiny_config()
    base = tcfg or TrainConfig()
    weights = {"total": (1.0, base.w1, base.w2), "mse": (1.0, 0.0, 0.0),
               "ce": (0.0, 1.0, 0.0), "con": (0.0, 0.0, 1.0)}
    if terms not in weights:
        raise ValueError(f"unknown terms {terms!r}")
    w_mse, w1, w2 = weights[terms]
    tc = TrainConfig(w1=w1, w2=w2, tau=base.tau, teacher_forcing=base.teacher_forcing)
    params = init_params(cfg, seed)
    data = random_training_set(cfg, B, seed + 1)
    rng = np.random.default_rng(seed + 2)
    k = rng.integers(1, cfg.denoiser.m + 1, B)
    eps = rng.standard_normal(data.z0.shape)
    prompts = make_prompt_bank(cfg.encoder.D)

    def obj(p):
        return batch_loss(p, data, k, eps, prompts, cfg, tc, need_grad=False, w_mse=w_mse)[1]

    grads = batch_loss(params, data, k, eps, prompts, cfg, tc, w_mse=w_mse)[2]
    errors = {}
    for name, value in params.items():
        fd = np.zeros_like(value)
        flat = value.reshape(-1)
        for i in range(flat.size):
            old = flat[i]
            flat[i] = old + h
            fp = obj(params)
            flat[i] = old - h
            fm = obj(params)
            flat[i] = old
            fd.reshape(-1)[i] = (fp - fm) / (2 * h)
        ga = grads.get(name, np.zeros_like(value))
        denom = max(np.linalg.norm(ga), np.linalg.norm(fd))
        errors[name] = 0.0 if denom < zero_tol else float(np.linalg.norm(ga - fd) / denom)
    return errors


# ---------------------------------------------------------------------------
# Checkpoints
# ---------------------------------------------------------------------------

def checkpoint_dict(params: dict, cfg: ModelConfig, extra: dict | None = None) -> dict:
    d = {
        "version": CHECKPOINT_VERSION,
        "tool": {"name": "skillflow", "version": __version__},
        "model": cfg.to_dict(),
        "tensors": {k: {"shape": list(v.shape), "data": np.asarray(v, dtype=np.float64).ravel().tolist()}
                    for k, v in sorted(params.items())},
    }
    for k, v in (extra or {}).items():
        d.setdefault(k, v)
    return d


def save_checkpoint(path, params: dict, cfg: ModelConfig, extra: dict | None = None) -> None:
    with open(path, "w") as f:
        json.dump(checkpoint_dict(params, cfg, extra), f, separators=(",", ":"))
        f.write("\n")


def load_checkpoint(path) -> tuple[dict, ModelConfig, dict]:
    """Returns (params, model config, run config echo)."""
    with open(path) as f:
        d = json.load(f)
    if d.get("version") != CHECKPOINT_VERSION:
        raise ValueError(f"unsupported checkpoint version {d.get('version')!r}")
    params = {k: np.asarray(t["data"], dtype=np.float64).reshape(t["shape"]) for k, t in d["tensors"].items()}
    return params, ModelConfig.from_dict(d["model"]), d.get("config", {})
