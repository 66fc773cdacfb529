"""Audio features to neutral landmark sequences with a dilated-convolution VAE.

Encoder and decoder are WaveNet-style stacks: an input projection, gated
residual layers with dilations 1, 2, 4, ... and an output projection. The
encoder pools over time to one posterior per clip; the decoder sees the
latent code broadcast over frames together with the audio features.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np

from .data import MOUTH, N_POINTS, AudioFeatureSequence, Clip, LandmarkSequence, face_template
from .numerics import (
    MlpParams,
    NonFiniteError,
    OptimizerState,
    ShapeError,
    TrainingDivergence,
    check_finite_loss,
    conv1d_backward,
    conv1d_forward,
    cosine_backward,
    cosine_forward,
    mlp_backward,
    mlp_forward,
    training_step,
    sigmoid,
)

log = logging.getLogger(__name__)

LM_DIM = N_POINTS * 3


# ---------------------------------------------------------------------------
# Dilated gated stack
# ---------------------------------------------------------------------------


@dataclass
class DilatedStack:
    w_in: np.ndarray  # (C_in, W)
    b_in: np.ndarray
    conv_w: list[np.ndarray]  # (K, W, 2W)
    conv_b: list[np.ndarray]
    w_out: np.ndarray  # (W, C_out)
    b_out: np.ndarray

    @property
    def dilations(self) -> list[int]:
        return [2 ** i for i in range(len(self.conv_w))]

    @classmethod
    def init(cls, c_in: int, width: int, c_out: int, n_layers: int, kernel: int,
             rng: np.random.Generator, dtype=np.float32) -> "DilatedStack":
        def u(shape, fan_in):
            bound = np.sqrt(3.0 / fan_in)
            return rng.uniform(-bound, bound, size=shape).astype(dtype)

        return cls(
            u((c_in, width), c_in), np.zeros(width, dtype),
            [u((kernel, width, 2 * width), kernel * width) for _ in range(n_layers)],
            [np.zeros(2 * width, dtype) for _ in range(n_layers)],
            u((width, c_out), width), np.zeros(c_out, dtype),
        )

    def named(self, prefix: str) -> dict[str, np.ndarray]:
        out = {f"{prefix}.in.weight": self.w_in, f"{prefix}.in.bias": self.b_in}
        for i, (w, b) in enumerate(zip(self.conv_w, self.conv_b)):
            out[f"{prefix}.conv{i}.weight"] = w
            out[f"{prefix}.conv{i}.bias"] = b
        out[f"{prefix}.out.weight"] = self.w_out
        out[f"{prefix}.out.bias"] = self.b_out
        return out

    @classmethod
    def from_named(cls, t: dict[str, np.ndarray], prefix: str) -> "DilatedStack":
        n = 0
        while f"{prefix}.conv{n}.weight" in t:
            n += 1
        return cls(t[f"{prefix}.in.weight"], t[f"{prefix}.in.bias"],
                   [t[f"{prefix}.conv{i}.weight"] for i in range(n)],
                   [t[f"{prefix}.conv{i}.bias"] for i in range(n)],
                   t[f"{prefix}.out.weight"], t[f"{prefix}.out.bias"])


def stack_forward(p: DilatedStack, x: np.ndarray):
    """``x``: ``(B, T, C_in)`` -> ``(B, T, C_out)`` plus a backward cache."""
    if x.shape[-1] != p.w_in.shape[0]:
        raise ShapeError(f"stack input channels {x.shape[-1]} != {p.w_in.shape[0]}")
    h = x @ p.w_in + p.b_in
    cache = {"x": x, "h": [h], "ta": [], "sg": []}
    width = p.w_in.shape[1]
    for w, b, d in zip(p.conv_w, p.conv_b, p.dilations):
        u = conv1d_forward(h, w, b, d)
        ta = np.tanh(u[..., :width])
        sg = sigmoid(u[..., width:])
        h = h + ta * sg
        cache["ta"].append(ta)
        cache["sg"].append(sg)
        cache["h"].append(h)
    return h @ p.w_out + p.b_out, cache


def stack_backward(p: DilatedStack, cache, gy: np.ndarray):
    """Returns ``(grads named like DilatedStack.named(''), gx)``."""
    h_last = cache["h"][-1]
    g = {}
    g["out.weight"] = h_last.reshape(-1, h_last.shape[-1]).T @ gy.reshape(-1, gy.shape[-1])
    g["out.bias"] = gy.reshape(-1, gy.shape[-1]).sum(0)
    gh = gy @ p.w_out.T
    for i in reversed(range(len(p.conv_w))):
        ta, sg = cache["ta"][i], cache["sg"][i]
        gu = np.concatenate([gh * sg * (1 - ta * ta), gh * ta * sg * (1 - sg)], axis=-1)
        gx_conv, gw, gb = conv1d_backward(cache["h"][i], p.conv_w[i], p.dilations[i], gu)
        g[f"conv{i}.weight"] = gw
        g[f"conv{i}.bias"] = gb
        gh = gh + gx_conv
    x = cache["x"]
    g["in.weight"] = x.reshape(-1, x.shape[-1]).T @ gh.reshape(-1, gh.shape[-1])
    g["in.bias"] = gh.reshape(-1, gh.shape[-1]).sum(0)
    return g, gh @ p.w_in.T


# ---------------------------------------------------------------------------
# VAE
# ---------------------------------------------------------------------------


@dataclass
class A2MConfig:
    latent_dim: int = 16
    width: int = 32
    n_layers: int = 4
    kernel: int = 3
    steps: int = 400
    batch: int = 8
    lr: float = 3e-3
    kl_weight: float = 1.0
    sync_weight: float = 1.0
    log_every: int = 10


@dataclass
class VaeParams:
    encoder: DilatedStack
    decoder: DilatedStack
    template: np.ndarray  # (68, 3), fixed offset added to decoder output
    latent_dim: int

    @classmethod
    def init(cls, feature_dim: int, cfg: A2MConfig, rng: np.random.Generator,
             dtype=np.float32) -> "VaeParams":
        enc = DilatedStack.init(LM_DIM + feature_dim, cfg.width, 2 * cfg.latent_dim,
                                cfg.n_layers, cfg.kernel, rng, dtype)
        dec = DilatedStack.init(cfg.latent_dim + feature_dim, cfg.width, LM_DIM,
                                cfg.n_layers, cfg.kernel, rng, dtype)
        dec.w_out *= 0.1
        return cls(enc, dec, face_template().astype(dtype), cfg.latent_dim)

    def tensors(self) -> dict[str, np.ndarray]:
        return {**self.encoder.named("enc"), **self.decoder.named("dec"), "template": self.template}

    def trainable(self) -> dict[str, np.ndarray]:
        return {**self.encoder.named("enc"), **self.decoder.named("dec")}

    @classmethod
    def from_tensors(cls, t: dict[str, np.ndarray]) -> "VaeParams":
        enc = DilatedStack.from_named(t, "enc")
        dec = DilatedStack.from_named(t, "dec")
        return cls(enc, dec, t["template"], enc.w_out.shape[1] // 2)

    def astype(self, dtype) -> "VaeParams":
        return VaeParams.from_tensors({k: v.astype(dtype) for k, v in self.tensors().items()})


def _as_batch(arr: np.ndarray, ndim: int) -> np.ndarray:
    return arr[None] if arr.ndim == ndim - 1 else arr


def _encoder_input(params: VaeParams, landmarks: np.ndarray, audio: np.ndarray) -> np.ndarray:
    lm = _as_batch(landmarks, 4)
    au = _as_batch(audio, 3)
    if lm.shape[:2] != au.shape[:2]:
        raise ShapeError(f"landmark frames {lm.shape[:2]} != audio frames {au.shape[:2]}")
    flat = (lm - params.template).reshape(lm.shape[0], lm.shape[1], LM_DIM)
    return np.concatenate([flat.astype(au.dtype), au], axis=-1)


def encode(params: VaeParams, landmarks, audio) -> tuple[np.ndarray, np.ndarray]:
    """Posterior ``(mu, log_var)`` per clip.

    Accepts containers or raw arrays, batched ``(B, T, ...)`` or single clips.
    """
    lm = landmarks.values if isinstance(landmarks, LandmarkSequence) else np.asarray(landmarks)
    au = audio.features if isinstance(audio, AudioFeatureSequence) else np.asarray(audio)
    single = au.ndim == 2
    x = _encoder_input(params, lm, au)
    out, _ = stack_forward(params.encoder, x)
    pooled = out.mean(axis=1)
    mu, log_var = pooled[:, :params.latent_dim], pooled[:, params.latent_dim:]
    return (mu[0], log_var[0]) if single else (mu, log_var)


def reparameterize(mu: np.ndarray, log_var: np.ndarray, eps: np.ndarray) -> np.ndarray:
    """``z = mu + sigma * eps``."""
    return mu + np.exp(0.5 * log_var) * eps


def _decoder_input(z: np.ndarray, audio: np.ndarray) -> np.ndarray:
    zb = np.broadcast_to(z[:, None, :], (audio.shape[0], audio.shape[1], z.shape[-1]))
    return np.concatenate([zb.astype(audio.dtype), audio], axis=-1)


def decode_stack(decoder: DilatedStack, template: np.ndarray, z, audio) -> np.ndarray:
    """Decoder-only path: ``(B, T, 68, 3)`` landmarks from latents and audio."""
    z = np.asarray(z)
    au = np.asarray(audio)
    zb = _as_batch(z, 2)
    ab = _as_batch(au, 3)
    if not np.all(np.isfinite(zb)):
        raise NonFiniteError("latent code is not finite")
    out, _ = stack_forward(decoder, _decoder_input(zb, ab))
    lm = out.reshape(ab.shape[0], ab.shape[1], N_POINTS, 3) + template
    return lm[0] if au.ndim == 2 else lm


def decode(params: VaeParams | DilatedStack, z, audio, template: np.ndarray | None = None):
    """Landmarks for ``audio``. Only decoder tensors are read.

    Returns a :class:`LandmarkSequence` for a single clip.
    """
    if isinstance(params, VaeParams):
        decoder, template = params.decoder, params.template
    else:
        decoder = params
        template = face_template() if template is None else template
    au = audio.features if isinstance(audio, AudioFeatureSequence) else np.asarray(audio)
    lm = decode_stack(decoder, template, z, au)
    return LandmarkSequence(lm) if lm.ndim == 3 else lm


def kl_standard_normal(mu: np.ndarray, log_var: np.ndarray) -> np.ndarray:
    """KL(N(mu, sigma^2) || N(0, I)) summed over the latent axis."""
    return 0.5 * (mu * mu + np.exp(log_var) - log_var - 1.0).sum(-1)


@dataclass
class VaeLoss:
    total: float
    recon: float
    kl: float
    sync: float
    grads: dict[str, np.ndarray] = field(default_factory=dict, repr=False)

    @property
    def mse(self) -> float:
        return self.recon / LM_DIM


def vae_loss(params: VaeParams, landmarks: np.ndarray, audio: np.ndarray, eps: np.ndarray,
             sync_scorer: "SyncProxy | None" = None, kl_weight: float = 1.0,
             sync_weight: float = 1.0, need_grads: bool = True) -> VaeLoss:
    """Monte-Carlo ELBO with one latent sample per clip.

    ``landmarks`` ``(B, T, 68, 3)``, ``audio`` ``(B, T, F)``, ``eps`` ``(B, latent)``.
    Reconstruction is the per-frame squared L2 norm averaged over frames and
    clips; KL is averaged over clips; the sync term averages cosine distance
    over every 5-frame window.
    """
    lm = _as_batch(np.asarray(landmarks), 4)
    au = _as_batch(np.asarray(audio), 3)
    eps = _as_batch(np.asarray(eps), 2)
    b, t = au.shape[:2]
    x_enc = _encoder_input(params, lm, au)
    enc_out, enc_cache = stack_forward(params.encoder, x_enc)
    pooled = enc_out.mean(axis=1)
    L = params.latent_dim
    mu, log_var = pooled[:, :L], pooled[:, L:]
    std = np.exp(0.5 * log_var)
    z = mu + std * eps
    dec_out, dec_cache = stack_forward(params.decoder, _decoder_input(z, au))
    pred = dec_out.reshape(b, t, N_POINTS, 3) + params.template
    diff = pred - lm
    recon = float((diff * diff).sum() / (b * t))
    kl_each = kl_standard_normal(mu, log_var)
    kl = float(kl_each.mean())
    sync = 0.0
    g_pred_sync = None
    if sync_scorer is not None:
        sync, g_pred_sync = sync_scorer.loss_and_landmark_grad(au, pred, need_grads)
    total = recon + kl_weight * kl + sync_weight * sync
    for name, v in (("recon", recon), ("kl", kl), ("sync", sync)):
        if not np.isfinite(v):
            raise NonFiniteError(f"VAE {name} component is not finite")
    if not need_grads:
        return VaeLoss(total, recon, kl, sync)

    g_pred = 2.0 * diff / (b * t)
    if g_pred_sync is not None:
        g_pred = g_pred + sync_weight * g_pred_sync
    g_dec, g_xdec = stack_backward(params.decoder, dec_cache, g_pred.reshape(b, t, LM_DIM))
    g_z = g_xdec[..., :L].sum(axis=1)
    g_mu = g_z + kl_weight * mu / b
    g_lv = g_z * eps * 0.5 * std + kl_weight * 0.5 * (np.exp(log_var) - 1.0) / b
    g_pooled = np.concatenate([g_mu, g_lv], axis=-1)
    g_enc_out = np.broadcast_to(g_pooled[:, None, :] / t, enc_out.shape)
    g_enc, _ = stack_backward(params.encoder, enc_cache, np.ascontiguousarray(g_enc_out))
    grads = {f"enc.{k}": v for k, v in g_enc.items()}
    grads.update({f"dec.{k}": v for k, v in g_dec.items()})
    return VaeLoss(total, recon, kl, sync, grads)


# ---------------------------------------------------------------------------
# Lip-sync proxy scorer
# ---------------------------------------------------------------------------

SYNC_WINDOW = 5
_MOUTH_IDX = np.array(MOUTH)


@dataclass
class SyncConfig:
    embed_dim: int = 32
    hidden: int = 64
    steps: int = 600
    batch: int = 64
    lr: float = 2e-3
    logit_scale: float = 5.0


@dataclass
class SyncProxy:
    """Contrastive audio/mouth embedder scored by cosine distance."""

    audio_net: MlpParams
    lip_net: MlpParams
    mouth_template: np.ndarray  # (20, 3)
    trained: bool = False

    @classmethod
    def init(cls, feature_dim: int, cfg: SyncConfig, rng: np.random.Generator,
             dtype=np.float32) -> "SyncProxy":
        acts = ["relu", "identity"]
        a = MlpParams.init([SYNC_WINDOW * feature_dim, cfg.hidden, cfg.embed_dim], acts, rng, dtype)
        m = MlpParams.init([SYNC_WINDOW * len(MOUTH) * 3, cfg.hidden, cfg.embed_dim], acts, rng, dtype)
        return cls(a, m, face_template()[_MOUTH_IDX].astype(dtype))

    def tensors(self) -> dict[str, np.ndarray]:
        return {**self.audio_net.named("sync.audio"), **self.lip_net.named("sync.lip"),
                "sync.mouth_template": self.mouth_template}

    def trainable(self) -> dict[str, np.ndarray]:
        return {**self.audio_net.named("sync.audio"), **self.lip_net.named("sync.lip")}

    @classmethod
    def from_tensors(cls, t: dict[str, np.ndarray], trained: bool = True) -> "SyncProxy":
        acts = ["relu", "identity"]
        return cls(MlpParams.from_named(t, "sync.audio", acts),
                   MlpParams.from_named(t, "sync.lip", acts), t["sync.mouth_template"], trained)

    # windows ------------------------------------------------------------

    @staticmethod
    def audio_windows(audio: np.ndarray) -> np.ndarray:
        """``(B, T, F)`` -> ``(B, T-4, 5*F)``."""
        t = audio.shape[1]
        if t < SYNC_WINDOW:
            raise ValueError(f"sync window needs {SYNC_WINDOW} frames, got {t}")
        idx = np.arange(t - SYNC_WINDOW + 1)[:, None] + np.arange(SYNC_WINDOW)
        return audio[:, idx].reshape(audio.shape[0], idx.shape[0], -1)

    def lip_windows(self, landmarks: np.ndarray) -> np.ndarray:
        """``(B, T, 68, 3)`` -> ``(B, T-4, 5*20*3)`` of mouth points around the template."""
        t = landmarks.shape[1]
        if t < SYNC_WINDOW:
            raise ValueError(f"sync window needs {SYNC_WINDOW} frames, got {t}")
        mouth = landmarks[:, :, _MOUTH_IDX] - self.mouth_template
        idx = np.arange(t - SYNC_WINDOW + 1)[:, None] + np.arange(SYNC_WINDOW)
        return mouth[:, idx].reshape(landmarks.shape[0], idx.shape[0], -1)

    def embed_audio(self, windows: np.ndarray) -> np.ndarray:
        return mlp_forward(self.audio_net, windows)

    def embed_lips(self, windows: np.ndarray) -> np.ndarray:
        return mlp_forward(self.lip_net, windows)

    def loss_and_landmark_grad(self, audio: np.ndarray, landmarks: np.ndarray,
                               need_grads: bool = True):
        """Mean cosine distance over all windows and its gradient w.r.t. landmarks."""
        aw = self.audio_windows(audio)
        lw = self.lip_windows(landmarks)
        ea = mlp_forward(self.audio_net, aw)
        el, cache = mlp_forward(self.lip_net, lw, return_cache=True)
        cos = cosine_forward(ea, el)
        n = cos.size
        loss = float((1.0 - cos).mean())
        if not need_grads:
            return loss, None
        _, g_el = cosine_backward(ea, el, np.full(cos.shape, -1.0 / n, dtype=cos.dtype))
        _, g_lw = mlp_backward(self.lip_net, lw, g_el, cache)
        b, t = landmarks.shape[:2]
        g_lw = g_lw.reshape(b, -1, SYNC_WINDOW, len(MOUTH), 3)
        g_mouth = np.zeros((b, t, len(MOUTH), 3), dtype=g_lw.dtype)
        for k in range(SYNC_WINDOW):
            g_mouth[:, k:k + g_lw.shape[1]] += g_lw[:, :, k]
        g_lm = np.zeros(landmarks.shape, dtype=g_lw.dtype)
        g_lm[:, :, _MOUTH_IDX] = g_mouth
        return loss, g_lm


def sync_score(scorer: SyncProxy, audio_window: np.ndarray, landmark_window: np.ndarray) -> float:
    """Cosine distance in ``[0, 2]`` between audio and mouth embeddings of one window."""
    audio_window = np.asarray(audio_window)
    landmark_window = np.asarray(landmark_window)
    if audio_window.shape[0] < SYNC_WINDOW or landmark_window.shape[0] < SYNC_WINDOW:
        raise ValueError(f"sync window needs {SYNC_WINDOW} frames")
    aw = scorer.audio_windows(audio_window[None, :SYNC_WINDOW])
    lw = scorer.lip_windows(landmark_window[None, :SYNC_WINDOW])
    return embedding_distance(scorer.embed_audio(aw)[0, 0], scorer.embed_lips(lw)[0, 0])


def embedding_distance(a: np.ndarray, b: np.ndarray) -> float:
    c = float(cosine_forward(np.asarray(a, np.float64), np.asarray(b, np.float64)))
    return 1.0 - min(1.0, max(-1.0, c))


def _sync_contrastive_loss(scorer: SyncProxy, aw: np.ndarray, lw: np.ndarray, labels: np.ndarray,
                           scale: float):
    """Logistic loss on ``scale * cos``; ``labels`` 1 for aligned pairs, 0 otherwise."""
    ea, ca = mlp_forward(scorer.audio_net, aw, return_cache=True)
    el, cl = mlp_forward(scorer.lip_net, lw, return_cache=True)
    cos = cosine_forward(ea, el)
    sign = np.where(labels > 0, -1.0, 1.0).astype(cos.dtype)
    logits = sign * scale * cos
    loss = float(np.logaddexp(0, logits).mean())
    g_logits = sigmoid(logits) / cos.size
    g_a, g_l = cosine_backward(ea, el, g_logits * sign * scale)
    ga, _ = mlp_backward(scorer.audio_net, aw, g_a, ca)
    gl, _ = mlp_backward(scorer.lip_net, lw, g_l, cl)
    grads = {**ga.named("sync.audio"), **gl.named("sync.lip")}
    return loss, grads


def _stack_clips(clips: list[Clip], attr: str = "landmarks"):
    lm = np.stack([getattr(c, attr).values for c in clips])
    au = np.stack([c.audio.features for c in clips])
    return lm, au


def train_sync_proxy(dataset: list[Clip], config: SyncConfig | None = None,
                     seed: int = 0) -> tuple[SyncProxy, list[float]]:
    """Train on aligned windows versus windows paired with another time/clip."""
    cfg = config or SyncConfig()
    rng = np.random.default_rng(seed)
    lm, au = _stack_clips(dataset, "neutral")
    scorer = SyncProxy.init(au.shape[-1], cfg, rng)
    aw = SyncProxy.audio_windows(au).reshape(-1, SYNC_WINDOW * au.shape[-1])
    lw = scorer.lip_windows(lm).reshape(-1, SYNC_WINDOW * len(MOUTH) * 3)
    n = aw.shape[0]
    opt = OptimizerState("adam", cfg.lr)
    params = scorer.trainable()
    curve = []
    half = cfg.batch // 2
    for step in range(cfg.steps):
        pos = rng.integers(0, n, half)
        neg_a = rng.integers(0, n, half)
        neg_l = rng.integers(0, n, half)
        a_idx = np.concatenate([pos, neg_a])
        l_idx = np.concatenate([pos, neg_l])
        labels = np.concatenate([np.ones(half), (neg_a == neg_l).astype(float)])
        loss, grads = _sync_contrastive_loss(scorer, aw[a_idx], lw[l_idx], labels, cfg.logit_scale)
        check_finite_loss("train-sync", step, loss)
        training_step("train-sync", step, opt, params, grads)
        curve.append(loss)
    scorer.trained = True
    return scorer, curve


# ---------------------------------------------------------------------------
# Training
# ---------------------------------------------------------------------------


def train_a2m(dataset: list[Clip], config: A2MConfig | None = None, seed: int = 0,
              sync_scorer: SyncProxy | None = None) -> tuple[VaeParams, list[dict]]:
    """Fit the VAE on neutral landmarks. Returns params and a logged loss curve."""
    cfg = config or A2MConfig()
    rng = np.random.default_rng(seed)
    lm, au = _stack_clips(dataset, "neutral")
    params = VaeParams.init(au.shape[-1], cfg, rng)
    trainable = params.trainable()
    opt = OptimizerState("adam", cfg.lr)
    curve: list[dict] = []
    n = lm.shape[0]
    for step in range(cfg.steps):
        idx = rng.choice(n, size=min(cfg.batch, n), replace=False)
        eps = rng.standard_normal((idx.size, cfg.latent_dim)).astype(np.float32)
        try:
            res = vae_loss(params, lm[idx], au[idx], eps, sync_scorer, cfg.kl_weight,
                           cfg.sync_weight)
        except NonFiniteError as exc:
            raise TrainingDivergence("train-a2m", step, str(exc)) from exc
        check_finite_loss("train-a2m", step, res.total)
        lr = cfg.lr * (0.1 ** (step / max(1, cfg.steps)))
        training_step("train-a2m", step, opt, trainable, res.grads, lr)
        if step % cfg.log_every == 0 or step == cfg.steps - 1:
            curve.append({"step": step, "total": res.total, "recon": res.recon,
                          "kl": res.kl, "sync": res.sync, "mse": res.mse})
            log.debug("a2m step %d total %.5f recon %.5f kl %.5f", step, res.total, res.recon, res.kl)
    return params, curve
