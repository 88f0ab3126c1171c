"""Forecasting backbones and the label-reconstruction network.

Predictors are channel-independent: every sample is one univariate window
of length L mapped to a horizon of length H. Instance normalization wraps
the backbone (statistics per window, detached). The reconstruction network
g maps a target window to S candidate corrected labels through four
stride-2 conv layers whose outputs are transposed and unfolded back onto
the horizon grid, then a point-wise FFN with parallel heads.

Spectral rescaling (snr): a layer's effective weight is gamma * W / sigma_max(W),
with sigma_max tracked by persistent-state power iteration. gamma is a
learnable scalar initialized to 1; sigma_max enters the graph as a constant.
"""

from __future__ import annotations

import json
import math
import os
from dataclasses import dataclass, asdict

import numpy as np

from .autodiff import Tape, Var
from .errors import ConfigError, ContractError, DimensionError, LoadError

SIGMA_FLOOR = 1e-12
# per-step sigma tracking: single-vector budget before the block escape
SYNC_STALL_ITERS = 50
SYNC_BLOCK_ROUNDS = 4
CONV_KERNEL = 3
CONV_STRIDE = 2
CONV_PADDING = 1
N_CONV_LAYERS = 4

_SNR_CHOICES = ("none", "pre", "post", "both")
_BACKBONES = ("mlp", "linear")


@dataclass
class ModelConfig:
    backbone: str = "mlp"
    lookback: int = 96
    horizon: int = 96
    hidden: int = 512
    snr: str = "both"
    revin_affine: bool = False
    dim_multiplier: int = 4
    series_count: int = 8
    recon_hidden: int = 128

    def __post_init__(self):
        if self.backbone not in _BACKBONES:
            raise ConfigError(f"backbone must be one of {_BACKBONES}, got {self.backbone!r}")
        if self.snr not in _SNR_CHOICES:
            raise ConfigError(f"snr must be one of {_SNR_CHOICES}, got {self.snr!r}")
        if self.lookback < 1 or self.horizon < 1:
            raise ConfigError(f"lookback/horizon must be >= 1, got {self.lookback}/{self.horizon}")
        if self.horizon % 2 ** N_CONV_LAYERS != 0:
            raise ConfigError(
                f"horizon must be divisible by {2 ** N_CONV_LAYERS} "
                f"(four stride-2 layers), got {self.horizon}"
            )
        if self.hidden < 1 or self.recon_hidden < 1:
            raise ConfigError("hidden sizes must be >= 1")
        if self.dim_multiplier < 2 or self.dim_multiplier % 2 != 0:
            raise ConfigError(
                f"dim_multiplier must be even and >= 2 so conv features "
                f"unfold evenly onto the horizon, got {self.dim_multiplier}"
            )
        if self.series_count < 1:
            raise ConfigError(f"series_count must be >= 1, got {self.series_count}")

    @property
    def d_feat(self) -> int:
        return 2 * self.dim_multiplier


# ---------------------------------------------------------------------------
# spectral norm


def _unit(v: np.ndarray) -> np.ndarray:
    n = float(np.linalg.norm(v))
    if n < 1e-300:
        return v
    return v / n


class PowerIterState:
    """Persistent left/right singular-vector estimates for one matrix."""

    def __init__(self, w: np.ndarray, rng: np.random.Generator, init_iters: int = 30):
        m, n = w.shape
        self.rng = rng
        self.u = _unit(rng.standard_normal(m))
        self.v = _unit(rng.standard_normal(n))
        self._block_polish(w, rng)
        self.sync(w, min_iters=init_iters, max_iters=max(200, init_iters))

    def _block_polish(self, w: np.ndarray, rng: np.random.Generator, iterations: int = 100, block: int = 4) -> None:
        """Seed (u, v) from a small orthogonal iteration. A single vector can
        stall on clustered leading singular values; the block start does not,
        and the per-step updates afterwards only need to track small drift."""
        m, n = w.shape
        b = max(1, min(block, m, n))
        vb = self.v[:, None]
        if b > 1:
            vb = np.concatenate([vb, rng.standard_normal((n, b - 1))], axis=1)
        vb = np.linalg.qr(vb)[0]
        for _ in range(iterations):
            z = w.T @ (w @ vb)
            if float(np.abs(z).max(initial=0.0)) < 1e-300:
                return  # zero matrix, nothing to align to
            vb = np.linalg.qr(z)[0]
        wv = w @ vb
        _, vecs = np.linalg.eigh(wv.T @ wv)
        top = vb @ vecs[:, -1]
        nt = float(np.linalg.norm(top))
        if nt > 1e-300:
            self.v = top / nt
        u = w @ self.v
        nu = float(np.linalg.norm(u))
        if nu > 1e-300:
            self.u = u / nu

    def _iterate(self, w: np.ndarray) -> float:
        v = w.T @ self.u
        nv = float(np.linalg.norm(v))
        if nv > 1e-300:
            self.v = v / nv
        u = w @ self.v
        nu = float(np.linalg.norm(u))
        if nu > 1e-300:
            self.u = u / nu
        return max(float(self.u @ (w @ self.v)), SIGMA_FLOOR)

    def sync(self, w: np.ndarray, min_iters: int = 1, tol: float = 1e-7, max_iters: int = 500) -> float:
        """Run at least min_iters power iterations, then keep going until the
        stationarity residual ||W^T u - sigma v|| drops below tol*sigma.

        The residual certifies |sigma - sigma_true| <~ tol*sigma even when the
        top singular values are clustered; a change-per-step test does not.
        Warm state makes the per-step top-up cheap. Training under spectral
        rescaling pulls the leading singular values together, and a single
        vector then stalls at the (sigma_2/sigma_1)^2 rate; the escape below
        re-polishes with a small block, whose top Ritz pair converges at the
        (sigma_{b+1}/sigma_1)^2 rate no matter how tight the leading cluster.
        """
        max_iters = max(max_iters, min_iters)
        sigma = SIGMA_FLOOR
        budget = min(max_iters, max(min_iters, SYNC_STALL_ITERS))
        for it in range(budget):
            sigma = self._iterate(w)
            if sigma <= SIGMA_FLOOR:
                return sigma
            if it + 1 >= min_iters:
                resid = float(np.linalg.norm(w.T @ self.u - sigma * self.v))
                if resid <= tol * sigma:
                    return sigma
        for _ in range(SYNC_BLOCK_ROUNDS):
            self._block_polish(w, self.rng, iterations=25)
            sigma = self._iterate(w)
            if sigma <= SIGMA_FLOOR:
                return sigma
            resid = float(np.linalg.norm(w.T @ self.u - sigma * self.v))
            if resid <= tol * sigma:
                return sigma
        return sigma

    def sigma(self, w: np.ndarray) -> float:
        """Current estimate for w without touching the state."""
        return max(float(self.u @ (w @ self.v)), SIGMA_FLOOR)


def spectral_norm(w: np.ndarray, iterations: int = 100, seed: int = 0, block: int = 4) -> float:
    """Largest singular value via block power iteration on W^T W.

    Orthogonal iteration with a small block converges for the top value at
    rate (sigma_{block+1}/sigma_1)^2 per step, so clustered leading singular
    values do not stall it the way a single vector would.
    """
    w = np.asarray(w, dtype=np.float64)
    if w.ndim != 2:
        raise DimensionError(f"spectral_norm expects a matrix, got {w.shape}")
    m, n = w.shape
    b = max(1, min(block, m, n))
    rng = np.random.default_rng(seed)
    v = np.linalg.qr(rng.standard_normal((n, b)))[0]
    for _ in range(iterations):
        z = w.T @ (w @ v)
        if float(np.abs(z).max(initial=0.0)) < 1e-300:
            return SIGMA_FLOOR
        v = np.linalg.qr(z)[0]
    wv = w @ v
    top = float(np.linalg.eigvalsh(wv.T @ wv)[-1])
    return max(math.sqrt(max(top, 0.0)), SIGMA_FLOOR)


# ---------------------------------------------------------------------------
# layers


class LinearLayer:
    """Dense layer with optional spectral rescaling of its weight."""

    def __init__(self, in_dim: int, out_dim: int, rng: np.random.Generator, snr_enabled: bool = False):
        bound = 1.0 / math.sqrt(in_dim)
        self.in_dim = in_dim
        self.out_dim = out_dim
        self.w = Var(rng.uniform(-bound, bound, size=(out_dim, in_dim)), requires_grad=True)
        self.b = Var(np.zeros(out_dim), requires_grad=True)
        self.snr_enabled = bool(snr_enabled)
        if self.snr_enabled:
            self.gamma = Var(np.ones(1), requires_grad=True)
            self.pi_state = PowerIterState(self.w.value, rng)

    def params(self) -> list[tuple[str, Var]]:
        out = [("w", self.w), ("b", self.b)]
        if self.snr_enabled:
            out.append(("gamma", self.gamma))
        return out

    def buffers(self) -> list[tuple[str, np.ndarray]]:
        if self.snr_enabled:
            return [("pi_u", self.pi_state.u), ("pi_v", self.pi_state.v)]
        return []

    def set_buffer(self, name: str, value: np.ndarray) -> None:
        if not self.snr_enabled:
            raise ContractError(f"layer has no buffer {name}")
        setattr(self.pi_state, {"pi_u": "u", "pi_v": "v"}[name], np.asarray(value, dtype=np.float64))

    def spectral_step(self) -> None:
        if self.snr_enabled:
            self.pi_state.sync(self.w.value, min_iters=1)

    def effective_weight(self, tape: Tape) -> Var:
        if not self.snr_enabled:
            return self.w
        sigma = self.pi_state.sigma(self.w.value)
        if sigma <= SIGMA_FLOOR:
            # degenerate matrix: no usable direction, freeze the normalizer
            return tape.mul(self.gamma, tape.scale(self.w, 1.0 / SIGMA_FLOOR))
        # sigma = u^T W v with u, v held fixed, so the rescaling itself is
        # differentiated (rank-one correction in dL/dW) as in standard
        # spectral normalization
        u = tape.constant(self.pi_state.u.reshape(1, self.out_dim))
        v = tape.constant(self.pi_state.v.reshape(self.in_dim, 1))
        sig = tape.reshape(tape.matmul(u, tape.matmul(self.w, v)), (1,))
        return tape.mul(self.gamma, tape.mul(self.w, tape.reciprocal(sig)))

    def apply(self, tape: Tape, x: Var) -> Var:
        if x.value.ndim != 2 or x.value.shape[1] != self.in_dim:
            raise DimensionError(f"linear expects (B, {self.in_dim}), got {x.value.shape}")
        w_eff = self.effective_weight(tape)
        out = tape.matmul(x, tape.transpose(w_eff))
        # bias row without broadcasting: ones (B,1) @ b (1,out)
        ones = tape.constant(np.ones((x.value.shape[0], 1)))
        return tape.add(out, tape.matmul(ones, tape.reshape(self.b, (1, self.out_dim))))


class RevIn:
    """Reversible per-instance standardization over the time axis.

    Statistics are detached constants; optional affine scale/shift are
    learnable scalars shared across instances.
    """

    def __init__(self, eps: float = 1e-5, affine: bool = False):
        self.eps = float(eps)
        self.affine = bool(affine)
        if self.affine:
            self.weight = Var(np.ones(1), requires_grad=True)
            self.bias = Var(np.zeros(1), requires_grad=True)

    def stats(self, x: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        mu = x.mean(axis=1, keepdims=True)
        sd = np.sqrt(x.var(axis=1, keepdims=True) + self.eps)
        return mu, sd

    def normalize(self, tape: Tape, x: np.ndarray) -> tuple[Var, tuple[np.ndarray, np.ndarray]]:
        if x.ndim != 2:
            raise DimensionError(f"revin expects (B, T), got {x.shape}")
        mu, sd = self.stats(x)
        out = tape.constant((x - mu) / sd)
        if self.affine:
            out = tape.add(tape.mul(out, self.weight), self.bias)
        return out, (mu, sd)

    def denormalize(self, tape: Tape, y: Var, stats: tuple[np.ndarray, np.ndarray]) -> Var:
        mu, sd = stats
        if y.value.ndim != 2 or y.value.shape[0] != mu.shape[0]:
            raise DimensionError(f"denormalize got {y.value.shape} for stats of {mu.shape[0]} rows")
        if self.affine:
            y = tape.mul(tape.sub(y, self.bias), tape.reciprocal(self.weight))
        h = y.value.shape[1]
        y = tape.mul(y, tape.constant(np.repeat(sd, h, axis=1)))
        return tape.add(y, tape.constant(np.repeat(mu, h, axis=1)))

    def params(self) -> list[tuple[str, Var]]:
        if self.affine:
            return [("weight", self.weight), ("bias", self.bias)]
        return []


# ---------------------------------------------------------------------------
# predictors


class MlpPredictor:
    """RevIN -> linear(L, hidden) -> ReLU -> linear(hidden, H) -> inverse RevIN."""

    kind = "mlp"

    def __init__(self, cfg: ModelConfig, rng: np.random.Generator):
        if cfg.backbone != "mlp":
            raise ConfigError(f"MlpPredictor built from backbone={cfg.backbone!r}")
        self.cfg = cfg
        self.revin = RevIn(affine=cfg.revin_affine)
        self.layer1 = LinearLayer(cfg.lookback, cfg.hidden, rng, snr_enabled=cfg.snr in ("pre", "both"))
        self.layer2 = LinearLayer(cfg.hidden, cfg.horizon, rng, snr_enabled=cfg.snr in ("post", "both"))

    def forward(self, tape: Tape, x: np.ndarray) -> Var:
        xn, stats = self.revin.normalize(tape, x)
        h = tape.relu(self.layer1.apply(tape, xn))
        out = self.layer2.apply(tape, h)
        return self.revin.denormalize(tape, out, stats)

    def spectral_step(self) -> None:
        self.layer1.spectral_step()
        self.layer2.spectral_step()

    def parameters(self) -> list[tuple[str, Var]]:
        out = [(f"layer1.{n}", v) for n, v in self.layer1.params()]
        out += [(f"layer2.{n}", v) for n, v in self.layer2.params()]
        out += [(f"revin.{n}", v) for n, v in self.revin.params()]
        return out

    def buffers(self) -> list[tuple[str, np.ndarray]]:
        out = [(f"layer1.{n}", a) for n, a in self.layer1.buffers()]
        out += [(f"layer2.{n}", a) for n, a in self.layer2.buffers()]
        return out

    def segments(self) -> dict[str, list[str]]:
        return {
            "embedding": [f"layer1.{n}" for n, _ in self.layer1.params()],
            "projector": [f"layer2.{n}" for n, _ in self.layer2.params()],
        }


class LinearPredictor:
    """RevIN -> linear(L, H) -> inverse RevIN."""

    kind = "linear"

    def __init__(self, cfg: ModelConfig, rng: np.random.Generator):
        if cfg.backbone != "linear":
            raise ConfigError(f"LinearPredictor built from backbone={cfg.backbone!r}")
        self.cfg = cfg
        self.revin = RevIn(affine=cfg.revin_affine)
        # single layer: it is both the first and the last linear map
        self.layer = LinearLayer(cfg.lookback, cfg.horizon, rng, snr_enabled=cfg.snr != "none")

    def forward(self, tape: Tape, x: np.ndarray) -> Var:
        xn, stats = self.revin.normalize(tape, x)
        out = self.layer.apply(tape, xn)
        return self.revin.denormalize(tape, out, stats)

    def spectral_step(self) -> None:
        self.layer.spectral_step()

    def parameters(self) -> list[tuple[str, Var]]:
        out = [(f"layer.{n}", v) for n, v in self.layer.params()]
        out += [(f"revin.{n}", v) for n, v in self.revin.params()]
        return out

    def buffers(self) -> list[tuple[str, np.ndarray]]:
        return [(f"layer.{n}", a) for n, a in self.layer.buffers()]

    def segments(self) -> dict[str, list[str]]:
        return {"projector": [f"layer.{n}" for n, _ in self.layer.params()]}


def build_predictor(cfg: ModelConfig, rng: np.random.Generator):
    if cfg.backbone == "mlp":
        return MlpPredictor(cfg, rng)
    return LinearPredictor(cfg, rng)


# ---------------------------------------------------------------------------
# reconstruction network


class ReconstructionNet:
    """Label-window encoder with S parallel candidate heads.

    encode: (B, H) -> (B, H, d_feat). Each conv level halves the time axis
    and doubles the channel count, so level l holds exactly dim_multiplier/2
    features per horizon position once its (C_l, T_l) output is transposed
    to (T_l, C_l) and unfolded row-major onto the horizon grid. Horizon
    position j therefore reads conv position floor(j * T_l / H), whose
    receptive field on the input window is 2^(l+1) - 1 wide.
    """

    kind = "recon"

    def __init__(self, cfg: ModelConfig, rng: np.random.Generator):
        self.cfg = cfg
        dm = cfg.dim_multiplier
        self.channels = [dm * (1 << i) for i in range(N_CONV_LAYERS)]
        self.convs: list[tuple[Var, Var]] = []
        c_prev = 1
        for c in self.channels:
            bound = 1.0 / math.sqrt(c_prev * CONV_KERNEL)
            w = Var(rng.uniform(-bound, bound, size=(c, c_prev, CONV_KERNEL)), requires_grad=True)
            b = Var(np.zeros(c), requires_grad=True)
            self.convs.append((w, b))
            c_prev = c
        self.ffn_in = LinearLayer(cfg.d_feat, cfg.recon_hidden, rng)
        self.heads = [LinearLayer(cfg.recon_hidden, 1, rng) for _ in range(cfg.series_count)]
        # diagnostic readout on raw conv features; never receives loss gradient
        self.readout = LinearLayer(cfg.d_feat, 1, rng)

    def encode(self, tape: Tape, y: np.ndarray) -> Var:
        if y.ndim != 2 or y.shape[1] != self.cfg.horizon:
            raise DimensionError(f"encode expects (B, {self.cfg.horizon}), got {y.shape}")
        b, h = y.shape
        per = self.cfg.dim_multiplier // 2
        cur = tape.reshape(tape.constant(y), (b, 1, h))
        feats = []
        for w, bias in self.convs:
            cur = tape.conv1d(cur, w, bias, stride=CONV_STRIDE, padding=CONV_PADDING)
            f = tape.transpose(cur, (0, 2, 1))  # (B, T_l, C_l)
            feats.append(tape.reshape(f, (b, h, per)))
        return tape.concat(feats, axis=2)

    def conv_features(self, tape: Tape, y: np.ndarray, level: int) -> Var:
        """Raw (B, C_l, T_l) output of conv level `level` (0-based)."""
        if not 0 <= level < N_CONV_LAYERS:
            raise ConfigError(f"conv level must be in [0, {N_CONV_LAYERS}), got {level}")
        b, h = y.shape
        cur = tape.reshape(tape.constant(y), (b, 1, h))
        for w, bias in self.convs[: level + 1]:
            cur = tape.conv1d(cur, w, bias, stride=CONV_STRIDE, padding=CONV_PADDING)
        return cur

    def _ffn(self, tape: Tape, z: Var) -> Var:
        b, h, d = z.value.shape
        flat = tape.reshape(z, (b * h, d))
        return tape.relu(self.ffn_in.apply(tape, flat))

    def head_outputs(self, tape: Tape, y: np.ndarray) -> list[Var]:
        b, h = y.shape
        hidden = self._ffn(tape, self.encode(tape, y))
        return [tape.reshape(head.apply(tape, hidden), (b, h)) for head in self.heads]

    def forward(self, tape: Tape, y: np.ndarray) -> Var:
        """All candidate label sets, stacked: (B, S, H)."""
        b, h = y.shape
        outs = [tape.reshape(o, (b, 1, h)) for o in self.head_outputs(tape, y)]
        return tape.concat(outs, axis=1)

    def intermediate(self, tape: Tape, y: np.ndarray) -> Var:
        """Diagnostic readout applied to raw conv features, skipping the FFN."""
        b, h = y.shape
        z = self.encode(tape, y)
        flat = tape.reshape(z, (b * h, self.cfg.d_feat))
        return tape.reshape(self.readout.apply(tape, flat), (b, h))

    def spectral_step(self) -> None:
        pass

    def parameters(self) -> list[tuple[str, Var]]:
        out = []
        for i, (w, b) in enumerate(self.convs, start=1):
            out.append((f"conv{i}.w", w))
            out.append((f"conv{i}.b", b))
        out += [(f"ffn_in.{n}", v) for n, v in self.ffn_in.params()]
        for s, head in enumerate(self.heads):
            out += [(f"head{s}.{n}", v) for n, v in head.params()]
        out += [(f"readout.{n}", v) for n, v in self.readout.params()]
        return out

    def buffers(self) -> list[tuple[str, np.ndarray]]:
        return []

    def loss_parameters(self) -> list[tuple[str, Var]]:
        """Parameters that training losses may touch (readout excluded)."""
        return [(n, v) for n, v in self.parameters() if not n.startswith("readout.")]


def build_recon(cfg: ModelConfig, rng: np.random.Generator) -> ReconstructionNet:
    return ReconstructionNet(cfg, rng)


# ---------------------------------------------------------------------------
# flat parameter views


def flat_params(params: list[tuple[str, Var]]) -> np.ndarray:
    if not params:
        return np.zeros(0)
    return np.concatenate([v.value.ravel() for _, v in params])


def flat_grads(params: list[tuple[str, Var]]) -> np.ndarray:
    if not params:
        return np.zeros(0)
    return np.concatenate([v.grad.ravel() for _, v in params])


def set_flat_params(params: list[tuple[str, Var]], vec: np.ndarray) -> None:
    total = sum(v.value.size for _, v in params)
    if vec.shape != (total,):
        raise DimensionError(f"flat vector of {vec.shape} for {total} parameters")
    ofs = 0
    for _, v in params:
        n = v.value.size
        v.value[...] = vec[ofs : ofs + n].reshape(v.value.shape)
        ofs += n


def param_slices(params: list[tuple[str, Var]]) -> dict[str, slice]:
    out = {}
    ofs = 0
    for name, v in params:
        out[name] = slice(ofs, ofs + v.value.size)
        ofs += v.value.size
    return out


def count_params(params: list[tuple[str, Var]]) -> int:
    return sum(v.value.size for _, v in params)


# ---------------------------------------------------------------------------
# checkpoints: uint64-LE header length, JSON header, then raw float64 blocks


_CKPT_VERSION = 1


def save_checkpoint(path: str, kind: str, config: ModelConfig, seed: int, epoch: int, models: dict) -> None:
    blocks = []
    arrays = []
    for mname in sorted(models):
        model = models[mname]
        for pname, var in model.parameters():
            blocks.append({"name": f"{mname}.{pname}", "shape": list(var.value.shape)})
            arrays.append(var.value)
        for bname, arr in model.buffers():
            blocks.append({"name": f"{mname}.buffer.{bname}", "shape": list(arr.shape)})
            arrays.append(arr)
    header = {
        "format": "tscorrect-checkpoint",
        "version": _CKPT_VERSION,
        "kind": kind,
        "config": asdict(config),
        "seed": int(seed),
        "epoch": int(epoch),
        "blocks": blocks,
    }
    payload = json.dumps(header, sort_keys=True).encode("utf-8")
    tmp = path + ".tmp"
    with open(tmp, "wb") as fh:
        fh.write(len(payload).to_bytes(8, "little"))
        fh.write(payload)
        for arr in arrays:
            fh.write(np.ascontiguousarray(arr, dtype="<f8").tobytes())
    os.replace(tmp, path)


def load_checkpoint(path: str) -> tuple[dict, dict[str, np.ndarray]]:
    with open(path, "rb") as fh:
        raw = fh.read(8)
        if len(raw) != 8:
            raise LoadError(f"{path}: truncated checkpoint header length")
        hlen = int.from_bytes(raw, "little")
        payload = fh.read(hlen)
        if len(payload) != hlen:
            raise LoadError(f"{path}: truncated checkpoint header")
        try:
            header = json.loads(payload.decode("utf-8"))
        except (UnicodeDecodeError, json.JSONDecodeError) as e:
            raise LoadError(f"{path}: bad checkpoint header: {e}") from None
        if header.get("format") != "tscorrect-checkpoint":
            raise LoadError(f"{path}: not a checkpoint file")
        blocks = {}
        for spec in header["blocks"]:
            shape = tuple(int(s) for s in spec["shape"])
            count = 1
            for s in shape:
                count *= s
            buf = fh.read(8 * count)
            if len(buf) != 8 * count:
                raise LoadError(f"{path}: truncated block {spec['name']}")
            blocks[spec["name"]] = np.frombuffer(buf, dtype="<f8").reshape(shape).astype(np.float64)
    return header, blocks


def restore_models(header: dict, blocks: dict[str, np.ndarray]) -> tuple[ModelConfig, dict]:
    """Rebuild models named in a checkpoint and load their parameters."""
    cfg = ModelConfig(**header["config"])
    names = {name.split(".", 1)[0] for name in blocks}
    rng = np.random.default_rng(header.get("seed", 0))
    models = {}
    for mname in sorted(names):
        if mname == "predictor":
            models[mname] = build_predictor(cfg, rng)
        elif mname == "recon":
            models[mname] = build_recon(cfg, rng)
        else:
            raise LoadError(f"unknown model name {mname!r} in checkpoint")
        model = models[mname]
        for pname, var in model.parameters():
            key = f"{mname}.{pname}"
            if key not in blocks:
                raise LoadError(f"checkpoint missing block {key}")
            if blocks[key].shape != var.value.shape:
                raise LoadError(
                    f"checkpoint block {key} has shape {blocks[key].shape}, "
                    f"model expects {var.value.shape}"
                )
            var.value[...] = blocks[key]
        for bname, _ in model.buffers():
            key = f"{mname}.buffer.{bname}"
            if key in blocks:
                layer_name, leaf = bname.rsplit(".", 1)
                layer = model
                for part in layer_name.split("."):
                    layer = getattr(layer, part)
                layer.set_buffer(leaf, blocks[key])
    return cfg, models
