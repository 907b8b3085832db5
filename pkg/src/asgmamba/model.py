"""Multi-scale spectral-gated Mamba forecaster.

Forward: RevIN -> channel-independent reshape -> one branch per patch size
(patch, embed, add identity, spectral gate, Mamba, residual, head) ->
softmax scale fusion -> inverse reshape -> inverse RevIN.
"""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .patching import add_context, embed_patches, num_patches, overlapping_patch, unfold_array
from .spectral import apply_gate, gate_mlp, init_gate, spectral_descriptor
from .ssm import init_mamba, mamba_block
from .tensor import Tensor

REVIN_EPS = 1e-5
VARIANTS = ("full", "no_spectral_gating", "single_scale", "no_overlap", "plain_gating")
RESIDUALS = ("input", "gated")


@dataclass(frozen=True)
class ModelConfig:
    look_back: int = 96
    horizon: int = 96
    n_vars: int = 7
    d_model: int = 128
    patch_sizes: tuple[int, ...] = (8, 16, 32)
    d_state: int = 16
    d_conv: int = 4
    expand: int = 2
    dropout: float = 0.1
    k_freq: int = 3
    no_spectral_gating: bool = False
    single_scale: bool = False
    no_overlap: bool = False
    plain_gating: bool = False
    revin_affine: bool = True
    depth: int = 1
    residual: str = "input"
    prenorm: bool = True
    dtype: str = "float64"

    def __post_init__(self):
        object.__setattr__(self, "patch_sizes", tuple(int(p) for p in self.patch_sizes))
        if self.residual not in RESIDUALS:
            raise ValueError(f"residual must be one of {RESIDUALS}, got {self.residual!r}")
        if self.depth < 1:
            raise ValueError("depth must be >= 1")
        if not 0.0 <= self.dropout < 1.0:
            raise ValueError("dropout must lie in [0, 1)")
        for p in self.patch_sizes:
            if self.look_back < p:
                raise ValueError(f"branch P={p}: look-back {self.look_back} is shorter than the patch")

    @property
    def d_inner(self) -> int:
        return self.expand * self.d_model

    def stride(self, patch_len: int) -> int:
        return patch_len if self.no_overlap else patch_len // 2

    def n_patches(self, patch_len: int) -> int:
        return num_patches(self.look_back, patch_len, self.stride(patch_len))

    def replace(self, **changes) -> "ModelConfig":
        return dataclasses.replace(self, **changes)

    def to_dict(self) -> dict:
        d = dataclasses.asdict(self)
        d["patch_sizes"] = list(self.patch_sizes)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        names = {f.name for f in dataclasses.fields(cls)}
        return cls(**{k: v for k, v in d.items() if k in names})


def ablate(config: ModelConfig, variant: str) -> ModelConfig:
    if variant == "full":
        return config
    if variant == "no_spectral_gating":
        return config.replace(no_spectral_gating=True)
    if variant == "single_scale":
        return config.replace(single_scale=True, patch_sizes=(16,))
    if variant == "no_overlap":
        return config.replace(no_overlap=True)
    if variant == "plain_gating":
        return config.replace(plain_gating=True)
    raise ValueError(f"unknown variant {variant!r}; valid: {', '.join(VARIANTS)}")


# ---------------------------------------------------------------- RevIN

@dataclass
class RevINState:
    mean: np.ndarray
    std: np.ndarray
    gamma: Tensor | None = None
    beta: Tensor | None = None
    eps: float = REVIN_EPS


def _per_variate(v: Tensor, b: int, t: int) -> Tensor:
    return T.expand(v, b, t)


def revin_normalize(x: Tensor, gamma: Tensor | None = None, beta: Tensor | None = None,
                    eps: float = REVIN_EPS) -> tuple[Tensor, RevINState]:
    """Per-instance, per-variate standardisation over the look-back axis.

    ``x`` is (B, L, M). Statistics are treated as constants.
    """
    b, l, m = x.shape
    mu = x.data.mean(axis=1, keepdims=True)
    std = np.sqrt(x.data.var(axis=1, keepdims=True) + eps)
    out = T.div(T.sub(x, Tensor(np.broadcast_to(mu, x.shape))), Tensor(np.broadcast_to(std, x.shape)))
    if gamma is not None:
        out = out * _per_variate(gamma, b, l) + _per_variate(beta, b, l)
    return out, RevINState(mu, std, gamma, beta, eps)


def revin_denormalize(y: Tensor, state: RevINState) -> Tensor:
    b, t, m = y.shape
    if state.gamma is not None:
        if np.any(state.gamma.data == 0):
            raise ValueError("RevIN denormalisation: affine weight has a zero entry")
        y = T.div(y - _per_variate(state.beta, b, t), _per_variate(state.gamma, b, t))
    y = y * Tensor(np.broadcast_to(state.std, y.shape))
    return y + Tensor(np.broadcast_to(state.mean, y.shape))


# ---------------------------------------------------------------- CI reshape

def channel_independent(x: Tensor) -> tuple[Tensor, np.ndarray]:
    """(B, L, M) -> (B*M, L); sequence ``b*M + m`` carries variate ``m``."""
    b, l, m = x.shape
    seqs = T.reshape(T.transpose(x, (0, 2, 1)), (b * m, l))
    return seqs, np.tile(np.arange(m), b)


def channel_merge(y: Tensor, batch: int, n_vars: int) -> Tensor:
    """(B*M, T) -> (B, T, M)."""
    return T.transpose(T.reshape(y, (batch, n_vars, y.shape[-1])), (0, 2, 1))


def fuse_scales(outputs: list[Tensor], w_scale: Tensor | None) -> Tensor:
    if len(outputs) == 1 and w_scale is None:
        return outputs[0]
    if w_scale is None or w_scale.shape != (len(outputs),):
        raise T.ShapeError("fuse_scales", (len(outputs),), None if w_scale is None else w_scale.shape)
    weights = T.softmax(w_scale, axis=0)
    fused = None
    for k, y in enumerate(outputs):
        term = T.expand(weights[k], *y.shape) * y
        fused = term if fused is None else fused + term
    return fused


# ---------------------------------------------------------------- parameters

def _layer_suffix(i: int) -> str:
    return "" if i == 0 else str(i)


def init_params(config: ModelConfig, seed: int = 0) -> dict[str, np.ndarray]:
    """Fresh parameter arrays keyed by checkpoint name."""
    rng = np.random.default_rng(seed)
    dt = np.dtype(config.dtype)
    D = config.d_model
    p: dict[str, np.ndarray] = {}
    if config.revin_affine:
        p["revin.gamma"] = np.ones(config.n_vars, dtype=dt)
        p["revin.beta"] = np.zeros(config.n_vars, dtype=dt)
    p["shared.E_node"] = (0.02 * rng.standard_normal((config.n_vars, D))).astype(dt)
    for P in config.patch_sizes:
        pre = f"branch{P}"
        n = config.n_patches(P)
        bound = P ** -0.5
        p[f"{pre}.W_emb"] = rng.uniform(-bound, bound, (D, P)).astype(dt)
        p[f"{pre}.b_emb"] = rng.uniform(-bound, bound, D).astype(dt)
        p[f"{pre}.E_pos"] = (0.02 * rng.standard_normal((n, D))).astype(dt)
        for i in range(config.depth):
            sfx = _layer_suffix(i)
            if not config.no_spectral_gating:
                for k, v in init_gate(rng, D, config.k_freq, dt).items():
                    p[f"{pre}.gate{sfx}.{k}"] = v
            if config.prenorm:
                p[f"{pre}.norm{sfx}.weight"] = np.ones(D, dtype=dt)
                p[f"{pre}.norm{sfx}.bias"] = np.zeros(D, dtype=dt)
            for k, v in init_mamba(rng, D, config.d_state, config.d_conv, config.expand, dtype=dt).items():
                p[f"{pre}.mamba{sfx}.{k}"] = v
        fan_in = n * D
        hb = fan_in ** -0.5
        p[f"{pre}.head.W"] = rng.uniform(-hb, hb, (config.horizon, fan_in)).astype(dt)
        p[f"{pre}.head.b"] = rng.uniform(-hb, hb, config.horizon).astype(dt)
    if len(config.patch_sizes) > 1:
        p["fusion.w_scale"] = np.zeros(len(config.patch_sizes), dtype=dt)
    return p


def count_parameters(params: dict) -> int:
    return int(sum(np.asarray(getattr(v, "data", v)).size for v in params.values()))


class ASGMamba:
    """Parameter container plus forward pass.

    ``params`` maps checkpoint names to leaf tensors with ``requires_grad``.
    """

    def __init__(self, config: ModelConfig, params: dict[str, np.ndarray] | None = None, seed: int = 0):
        self.config = config
        arrays = init_params(config, seed) if params is None else params
        self.params: dict[str, Tensor] = {
            k: Tensor(np.array(v, dtype=config.dtype), requires_grad=True, name=k) for k, v in arrays.items()
        }
        self.last_gates: dict[int, np.ndarray] = {}
        self.last_spectra: dict[int, np.ndarray] = {}

    def state_dict(self) -> dict[str, np.ndarray]:
        return {k: v.data.copy() for k, v in self.params.items()}

    def load_state_dict(self, arrays: dict[str, np.ndarray], strict: bool = True) -> None:
        missing = set(self.params) - set(arrays)
        if strict and missing:
            raise KeyError(f"checkpoint lacks parameters: {sorted(missing)}")
        for k, t in self.params.items():
            if k in arrays:
                a = np.asarray(arrays[k], dtype=t.dtype)
                if a.shape != t.shape:
                    raise T.ShapeError("load_state_dict", t.shape, a.shape, detail=k)
                t.data = a.copy()

    def num_parameters(self) -> int:
        return count_parameters(self.params)

    def zero_grad(self) -> None:
        for t in self.params.values():
            t.grad = None

    def _branch(self, P: int, seqs: Tensor, raw_patches: np.ndarray, variates: np.ndarray,
                training: bool, rng, gate_override) -> Tensor:
        cfg, p = self.config, self.params
        pre = f"branch{P}"
        S = cfg.stride(P)
        patches = overlapping_patch(seqs, P, S)
        z_in = add_context(embed_patches(patches, p[f"{pre}.W_emb"], p[f"{pre}.b_emb"]),
                           p[f"{pre}.E_pos"], p["shared.E_node"], variates)
        v_spec = spectral_descriptor(raw_patches, cfg.k_freq).astype(cfg.dtype)
        self.last_spectra[P] = v_spec
        if cfg.plain_gating:
            v_spec = np.full_like(v_spec, 1.0 / cfg.k_freq)
        h = z_in
        gates = []
        for i in range(cfg.depth):
            sfx = _layer_suffix(i)
            if cfg.no_spectral_gating or gate_override is not None:
                fill = 1.0 if gate_override is None else gate_override
                gate = Tensor(np.full(h.shape, fill, dtype=cfg.dtype))
            else:
                gate = gate_mlp(Tensor(v_spec), *(p[f"{pre}.gate{sfx}.{k}"] for k in ("W_g1", "b_g1", "W_g2", "b_g2")))
            gates.append(gate.data.mean(axis=-1))
            gated = apply_gate(h, gate, p.get(f"{pre}.norm{sfx}.weight"), p.get(f"{pre}.norm{sfx}.bias"),
                               prenorm=cfg.prenorm)
            mp = {k.rsplit(".", 1)[1]: v for k, v in p.items() if k.startswith(f"{pre}.mamba{sfx}.")}
            out = T.dropout(mamba_block(gated, mp), cfg.dropout, training, rng)
            h = out + (h if cfg.residual == "input" else gated)
        self.last_gates[P] = np.mean(gates, axis=0)
        flat = T.reshape(h, (h.shape[0], h.shape[1] * h.shape[2]))
        return T.linear(flat, p[f"{pre}.head.W"], p[f"{pre}.head.b"])

    def forward(self, x, training: bool = False, rng: np.random.Generator | None = None,
                gate_override: float | None = None) -> Tensor:
        """(B, L, M) -> (B, T, M).

        ``gate_override`` forces every gate to a constant (ablation parity).
        """
        cfg, p = self.config, self.params
        x = x if isinstance(x, Tensor) else Tensor(np.asarray(x, dtype=cfg.dtype))
        b, l, m = x.shape
        if l != cfg.look_back or m != cfg.n_vars:
            raise T.ShapeError("forward", x.shape, (None, cfg.look_back, cfg.n_vars))
        gamma, beta = p.get("revin.gamma"), p.get("revin.beta")
        xn, state = revin_normalize(x, gamma, beta)
        seqs, variates = channel_independent(xn)
        # the gate sees parameter-free normalised values
        plain = ((x.data - state.mean) / state.std).transpose(0, 2, 1).reshape(b * m, l)
        outputs = []
        for P in cfg.patch_sizes:
            raw = unfold_array(plain, P, cfg.stride(P))
            outputs.append(self._branch(P, seqs, raw, variates, training, rng, gate_override))
        fused = fuse_scales(outputs, p.get("fusion.w_scale"))
        return revin_denormalize(channel_merge(fused, b, m), state)

    __call__ = forward

    def fusion_weights(self) -> np.ndarray:
        w = self.params.get("fusion.w_scale")
        if w is None:
            return np.ones(1)
        e = np.exp(w.data - w.data.max())
        return e / e.sum()
