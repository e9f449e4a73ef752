"""The envelope similarity decoder shared by the LF and gamma paths.

Architecture: a spatial projection of the EEG, twin stacks of dilated
convolutions (kernel 3, dilations 1/3/9, ReLU) for the EEG and the stimulus
envelope, a per-filter cosine similarity over time, and a linear readout to a
single logit. Forward, exact reverse-mode gradients of the sigmoid
cross-entropy loss, and the Adam update are all implemented here in plain
numpy; nothing is hidden in a framework.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace

import numpy as np


class DecoderError(ValueError):
    """Shape/band mismatch or invalid decoder parameters."""


_EPS_NORM = 1e-8  # z-scoring denominator guard


@dataclass(frozen=True)
class Architecture:
    """Layer shapes; the default is the desk-scale stand-in used throughout."""

    n_channels: int = 64
    proj_width: int = 8
    hidden_width: int = 16
    kernel: int = 3
    dilations: tuple[int, ...] = (1, 3, 9)

    @property
    def receptive_field(self) -> int:
        return 1 + (self.kernel - 1) * sum(self.dilations)


@dataclass
class DecoderParameters:
    """All weights of one decoder instance plus its band tag."""

    band: str  # "lf" | "gamma"
    spatial: np.ndarray  # (n_channels, proj_width)
    eeg_w: list[np.ndarray]  # per layer (hidden, in_width, kernel)
    eeg_b: list[np.ndarray]  # per layer (hidden,)
    stim_w: list[np.ndarray]
    stim_b: list[np.ndarray]
    readout_w: np.ndarray  # (hidden,)
    readout_b: np.ndarray  # ()
    dilations: tuple[int, ...] = (1, 3, 9)

    def __post_init__(self):
        if self.band not in ("lf", "gamma"):
            raise DecoderError(f"unknown band tag {self.band!r}")
        if len(self.eeg_w) != len(self.stim_w) or len(self.eeg_w) != len(self.eeg_b):
            raise DecoderError("branch layer counts disagree")
        if len(self.dilations) != len(self.eeg_w):
            raise DecoderError("one dilation per conv layer required")
        if self.eeg_w[-1].shape[0] != self.stim_w[-1].shape[0]:
            raise DecoderError("branches must end at equal width")
        if self.readout_w.shape != (self.eeg_w[-1].shape[0],):
            raise DecoderError(
                f"readout expects width {self.eeg_w[-1].shape[0]}, got {self.readout_w.shape}"
            )
        if self.spatial.shape[1] != self.eeg_w[0].shape[1]:
            raise DecoderError("spatial projection width does not feed the first EEG layer")
        for arr in self.to_named().values():
            if not np.all(np.isfinite(arr)):
                raise DecoderError("parameters contain non-finite values")

    @property
    def n_channels(self) -> int:
        return self.spatial.shape[0]

    @property
    def arch(self) -> Architecture:
        return Architecture(
            n_channels=self.spatial.shape[0],
            proj_width=self.spatial.shape[1],
            hidden_width=self.eeg_w[-1].shape[0],
            kernel=self.eeg_w[0].shape[2],
            dilations=tuple(self.dilations),
        )

    def to_named(self) -> dict[str, np.ndarray]:
        named = {"spatial": self.spatial, "readout.w": self.readout_w, "readout.b": self.readout_b}
        for i, (w, b) in enumerate(zip(self.eeg_w, self.eeg_b)):
            named[f"eeg{i}.w"], named[f"eeg{i}.b"] = w, b
        for i, (w, b) in enumerate(zip(self.stim_w, self.stim_b)):
            named[f"stim{i}.w"], named[f"stim{i}.b"] = w, b
        return named

    def astype(self, dtype) -> "DecoderParameters":
        return replace(
            self,
            spatial=self.spatial.astype(dtype),
            eeg_w=[w.astype(dtype) for w in self.eeg_w],
            eeg_b=[b.astype(dtype) for b in self.eeg_b],
            stim_w=[w.astype(dtype) for w in self.stim_w],
            stim_b=[b.astype(dtype) for b in self.stim_b],
            readout_w=self.readout_w.astype(dtype),
            readout_b=self.readout_b.astype(dtype),
        )


def params_from_named(
    band: str, named: dict[str, np.ndarray], dilations: tuple[int, ...] = (1, 3, 9)
) -> DecoderParameters:
    n_layers = sum(1 for k in named if k.startswith("eeg") and k.endswith(".w"))
    return DecoderParameters(
        band=band,
        spatial=named["spatial"],
        eeg_w=[named[f"eeg{i}.w"] for i in range(n_layers)],
        eeg_b=[named[f"eeg{i}.b"] for i in range(n_layers)],
        stim_w=[named[f"stim{i}.w"] for i in range(n_layers)],
        stim_b=[named[f"stim{i}.b"] for i in range(n_layers)],
        readout_w=named["readout.w"],
        readout_b=named["readout.b"],
        dilations=tuple(dilations),
    )


def init_params(seed, band: str, arch: Architecture = Architecture()) -> DecoderParameters:
    """Deterministic fan-in-scaled uniform weights, zero biases.

    Zero biases matter beyond convention: they are what makes all-zero inputs
    propagate to zero branch activations, so the logit reduces to the readout
    bias.
    """
    rng = np.random.default_rng(seed)

    def uniform(shape, fan_in):
        bound = np.sqrt(6.0 / fan_in)
        return rng.uniform(-bound, bound, size=shape)

    H, K = arch.hidden_width, arch.kernel
    spatial = uniform((arch.n_channels, arch.proj_width), arch.n_channels)
    eeg_w, eeg_b, stim_w, stim_b = [], [], [], []
    in_widths_eeg = [arch.proj_width] + [H] * (len(arch.dilations) - 1)
    in_widths_stim = [1] + [H] * (len(arch.dilations) - 1)
    for cin in in_widths_eeg:
        eeg_w.append(uniform((H, cin, K), cin * K))
        eeg_b.append(np.zeros(H))
    for cin in in_widths_stim:
        stim_w.append(uniform((H, cin, K), cin * K))
        stim_b.append(np.zeros(H))
    return DecoderParameters(
        band=band,
        spatial=spatial,
        eeg_w=eeg_w,
        eeg_b=eeg_b,
        stim_w=stim_w,
        stim_b=stim_b,
        readout_w=uniform((H,), H),
        readout_b=np.zeros(()),
        dilations=tuple(arch.dilations),
    )


# ---------------------------------------------------------------------------
# Forward


def _znorm(x: np.ndarray) -> np.ndarray:
    mean = x.mean(axis=-1, keepdims=True)
    std = x.std(axis=-1, keepdims=True)
    return (x - mean) / (std + _EPS_NORM)


def _conv_forward(x: np.ndarray, w: np.ndarray, b: np.ndarray, d: int) -> np.ndarray:
    # x (B, Cin, T) -> (B, Cout, T - (K-1)*d), 'valid' dilated convolution
    K = w.shape[2]
    t_out = x.shape[2] - (K - 1) * d
    if t_out < 1:
        raise DecoderError(
            f"segment of {x.shape[2]} samples is shorter than the receptive field"
        )
    out = np.matmul(w[:, :, 0], x[:, :, :t_out])
    for k in range(1, K):
        out += np.matmul(w[:, :, k], x[:, :, k * d : k * d + t_out])
    return out + b[None, :, None]


def _cosine_batch(a: np.ndarray, b: np.ndarray):
    # a, b (B, H, T) -> similarities (B, H); zero-norm rows map to 0
    dot = np.einsum("bht,bht->bh", a, b)
    na = np.sqrt(np.einsum("bht,bht->bh", a, a))
    nb = np.sqrt(np.einsum("bht,bht->bh", b, b))
    denom = na * nb
    safe = denom > 0
    sim = np.where(safe, dot / np.where(safe, denom, 1.0), 0.0)
    return sim, dot, na, nb, safe


def cosine_over_time(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Per-row cosine similarity across the time axis; zero-norm rows give 0."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise DecoderError(f"shape mismatch {a.shape} vs {b.shape}")
    squeeze = a.ndim == 2
    if squeeze:
        a, b = a[None], b[None]
    sim, *_ = _cosine_batch(a, b)
    return sim[0] if squeeze else sim


def _branch_forward(x: np.ndarray, weights, biases, dilations, cache: list | None):
    for w, b, d in zip(weights, biases, dilations):
        pre = _conv_forward(x, w, b, d)
        act = np.maximum(pre, 0.0)
        if cache is not None:
            cache.append((x, pre > 0))
        x = act
    return x


def _forward_batch(params: DecoderParameters, eeg: np.ndarray, env: np.ndarray, keep_cache: bool):
    dilations = params.arch.dilations
    eeg_n = _znorm(eeg)
    env_n = _znorm(env)[:, None, :]  # (B, 1, T)
    proj = np.matmul(params.spatial.T, eeg_n)  # (B, P, T)
    eeg_cache: list | None = [] if keep_cache else None
    stim_cache: list | None = [] if keep_cache else None
    h = _branch_forward(proj, params.eeg_w, params.eeg_b, dilations, eeg_cache)
    g = _branch_forward(env_n, params.stim_w, params.stim_b, dilations, stim_cache)
    sim, dot, na, nb, safe = _cosine_batch(h, g)
    logits = sim @ params.readout_w + params.readout_b
    cache = None
    if keep_cache:
        cache = {
            "eeg_n": eeg_n,
            "env_n": env_n,
            "proj": proj,
            "eeg_cache": eeg_cache,
            "stim_cache": stim_cache,
            "h": h,
            "g": g,
            "sim": sim,
            "dot": dot,
            "na": na,
            "nb": nb,
            "safe": safe,
        }
    return logits, cache


def _check_batch(params: DecoderParameters, eeg: np.ndarray, env: np.ndarray) -> None:
    if eeg.ndim != 3 or env.ndim != 2:
        raise DecoderError(f"expected eeg (B, C, T) and env (B, T), got {eeg.shape}, {env.shape}")
    if eeg.shape[0] != env.shape[0]:
        raise DecoderError("eeg and env batch sizes differ")
    if eeg.shape[1] != params.n_channels:
        raise DecoderError(
            f"decoder expects {params.n_channels} channels, got {eeg.shape[1]}"
        )
    if eeg.shape[2] != env.shape[1]:
        raise DecoderError("eeg and env segment lengths differ")
    if eeg.shape[2] < params.arch.receptive_field:
        raise DecoderError(
            f"segments of {eeg.shape[2]} samples are shorter than the receptive field "
            f"({params.arch.receptive_field})"
        )


def forward_batch(params: DecoderParameters, eeg: np.ndarray, env: np.ndarray) -> np.ndarray:
    """Logits for a batch of (EEG, envelope) segment pairs; pure and deterministic."""
    eeg = np.asarray(eeg)
    env = np.asarray(env)
    _check_batch(params, eeg, env)
    logits, _ = _forward_batch(params, eeg, env, keep_cache=False)
    return logits


def forward(params: DecoderParameters, eeg: np.ndarray, env: np.ndarray) -> float:
    """Similarity logit for one (EEG segment, envelope segment) pair."""
    eeg = np.asarray(eeg)
    env = np.asarray(env).reshape(-1)
    if eeg.ndim != 2:
        raise DecoderError(f"eeg segment must be (channels, samples), got {eeg.shape}")
    return float(forward_batch(params, eeg[None], env[None])[0])


# ---------------------------------------------------------------------------
# Backward


def sigmoid(z: np.ndarray) -> np.ndarray:
    out = np.empty_like(z, dtype=np.float64)
    pos = z >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-z[pos]))
    ez = np.exp(z[~pos])
    out[~pos] = ez / (1.0 + ez)
    return out


def bce_loss(logits: np.ndarray, labels: np.ndarray) -> float:
    """Mean binary cross-entropy of sigmoid(logit) against {0,1} labels."""
    logits = np.asarray(logits, dtype=np.float64)
    labels = np.asarray(labels, dtype=np.float64)
    return float(np.mean(np.logaddexp(0.0, logits) - labels * logits))


def _conv_backward(dout: np.ndarray, x: np.ndarray, w: np.ndarray, d: int):
    K = w.shape[2]
    t_out = dout.shape[2]
    dw = np.empty_like(w)
    dx = np.zeros_like(x)
    for k in range(K):
        xs = x[:, :, k * d : k * d + t_out]
        dw[:, :, k] = np.matmul(dout, xs.transpose(0, 2, 1)).sum(axis=0)
        dx[:, :, k * d : k * d + t_out] += np.matmul(w[:, :, k].T, dout)
    db = dout.sum(axis=(0, 2))
    return dw, db, dx


def _branch_backward(dact: np.ndarray, weights, dilations, cache):
    grads_w, grads_b = [None] * len(weights), [None] * len(weights)
    for i in range(len(weights) - 1, -1, -1):
        x, mask = cache[i]
        dpre = dact * mask
        dw, db, dx = _conv_backward(dpre, x, weights[i], dilations[i])
        grads_w[i], grads_b[i] = dw, db
        dact = dx
    return grads_w, grads_b, dact


def backward(
    params: DecoderParameters,
    eeg: np.ndarray,
    env: np.ndarray,
    labels: np.ndarray,
    return_logits: bool = False,
):
    """Exact gradients of the mean BCE loss with respect to every parameter.

    Returns (grads, loss); with ``return_logits`` also the batch logits, which
    saves the training loop a second forward pass.
    """
    eeg = np.asarray(eeg)
    env = np.asarray(env)
    labels = np.asarray(labels)
    if eeg.ndim != 3 or eeg.shape[0] == 0:
        raise DecoderError("batch is empty or not (B, C, T)")
    _check_batch(params, eeg, env)
    if labels.shape != (eeg.shape[0],):
        raise DecoderError("labels must be one per batch item")
    if not np.all((labels == 0) | (labels == 1)):
        raise DecoderError("labels must be 0 or 1")

    logits, cache = _forward_batch(params, eeg, env, keep_cache=True)
    B = eeg.shape[0]
    loss = bce_loss(logits, labels)
    dz = (sigmoid(logits) - labels) / B  # (B,)

    sim, dot, na, nb, safe = (cache[k] for k in ("sim", "dot", "na", "nb", "safe"))
    h, g = cache["h"], cache["g"]

    grads: dict[str, np.ndarray] = {}
    grads["readout.w"] = sim.T @ dz
    grads["readout.b"] = np.asarray(dz.sum())

    dsim = dz[:, None] * params.readout_w[None, :]  # (B, H)
    dsim = np.where(safe, dsim, 0.0)  # zero gradient through zero-norm rows
    na_s = np.where(safe, na, 1.0)
    nb_s = np.where(safe, nb, 1.0)
    inv = 1.0 / (na_s * nb_s)
    dh = dsim[:, :, None] * (g * inv[:, :, None] - h * (sim / na_s**2)[:, :, None])
    dg = dsim[:, :, None] * (h * inv[:, :, None] - g * (sim / nb_s**2)[:, :, None])

    dilations = params.arch.dilations
    eeg_gw, eeg_gb, dproj = _branch_backward(dh, params.eeg_w, dilations, cache["eeg_cache"])
    stim_gw, stim_gb, _ = _branch_backward(dg, params.stim_w, dilations, cache["stim_cache"])
    for i in range(len(eeg_gw)):
        grads[f"eeg{i}.w"], grads[f"eeg{i}.b"] = eeg_gw[i], eeg_gb[i]
        grads[f"stim{i}.w"], grads[f"stim{i}.b"] = stim_gw[i], stim_gb[i]

    # proj = spatial.T @ eeg_n, so d spatial = sum_b eeg_n_b @ dproj_b.T
    grads["spatial"] = np.matmul(cache["eeg_n"], dproj.transpose(0, 2, 1)).sum(axis=0)
    if return_logits:
        return grads, loss, logits
    return grads, loss


# ---------------------------------------------------------------------------
# Adam


@dataclass
class AdamState:
    """Bias-corrected Adam moments, shaped like the parameters."""

    m: dict[str, np.ndarray]
    v: dict[str, np.ndarray]
    t: int = 0
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8


def init_adam(
    params: DecoderParameters,
    lr: float = 1e-3,
    beta1: float = 0.9,
    beta2: float = 0.999,
    eps: float = 1e-8,
) -> AdamState:
    named = params.to_named()
    return AdamState(
        m={k: np.zeros_like(v) for k, v in named.items()},
        v={k: np.zeros_like(v) for k, v in named.items()},
        t=0,
        lr=lr,
        beta1=beta1,
        beta2=beta2,
        eps=eps,
    )


def adam_step(
    params: DecoderParameters, grads: dict[str, np.ndarray], state: AdamState
) -> tuple[DecoderParameters, AdamState]:
    """One bias-corrected Adam update; returns fresh params and state."""
    named = params.to_named()
    if set(grads) != set(named):
        raise DecoderError("gradient keys do not match parameter keys")
    t = state.t + 1
    new_named, new_m, new_v = {}, {}, {}
    for key, value in named.items():
        g = grads[key]
        if g.shape != value.shape:
            raise DecoderError(f"gradient shape mismatch for {key}")
        m = state.beta1 * state.m[key] + (1.0 - state.beta1) * g
        v = state.beta2 * state.v[key] + (1.0 - state.beta2) * g * g
        m_hat = m / (1.0 - state.beta1**t)
        v_hat = v / (1.0 - state.beta2**t)
        new_named[key] = value - state.lr * m_hat / (np.sqrt(v_hat) + state.eps)
        new_m[key], new_v[key] = m, v
    new_params = params_from_named(params.band, new_named)
    new_state = AdamState(
        m=new_m, v=new_v, t=t, lr=state.lr, beta1=state.beta1, beta2=state.beta2, eps=state.eps
    )
    return new_params, new_state


@dataclass
class LogitPair:
    """(lf_logit, gamma_logit) for one (EEG segment, stimulus segment) pairing."""

    lf_logit: float
    gamma_logit: float
    label: int | None = None  # 1 matched, 0 mismatched, None unknown
    eeg_segment: str = ""
    stimulus_segment: str = ""

    def __post_init__(self):
        if not (np.isfinite(self.lf_logit) and np.isfinite(self.gamma_logit)):
            raise DecoderError("logits must be finite")

    @property
    def xy(self) -> np.ndarray:
        return np.array([self.lf_logit, self.gamma_logit], dtype=np.float64)
