"""Gaussian VAE on top of :mod:`slugvae.nn`: losses, training, and the
deterministic reconstruction map whose parameter Jacobian drives curvature."""

from __future__ import annotations

import csv
import json
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from . import nn
from .errors import ConfigurationError, LoadError, NumericError, TrainingError
from .nn import (
    ELU,
    BatchNorm,
    Conv2d,
    Dense,
    Flatten,
    NetworkSpec,
    ParamVector,
    Reshape,
    Residual,
    Upsample,
)
from .rng import stream

LOG_VAR_CLAMP = 10.0


@dataclass
class EncoderOutput:
    mu: np.ndarray
    log_var: np.ndarray

    @property
    def sigma(self):
        return np.exp(0.5 * self.log_var)


@dataclass
class VAEModel:
    encoder: NetworkSpec
    encoder_params: ParamVector
    decoder: NetworkSpec
    decoder_params: ParamVector
    latent_dim: int
    # fixed latent noise for the sampled-latent ablation; None keeps the mean path
    latent_eps: np.ndarray | None = field(default=None, repr=False, compare=False)

    def __post_init__(self):
        if self.encoder.output_shape != (2 * self.latent_dim,):
            raise ConfigurationError(
                f"encoder must output 2*latent_dim={2 * self.latent_dim} values, "
                f"got {self.encoder.output_shape}"
            )
        if self.decoder.input_shape != (self.latent_dim,):
            raise ConfigurationError(f"decoder input {self.decoder.input_shape} != ({self.latent_dim},)")
        if self.decoder.output_shape != self.encoder.input_shape:
            raise ConfigurationError("decoder output shape must equal encoder input shape")

    @property
    def image_shape(self):
        return self.encoder.input_shape

    def copy(self) -> VAEModel:
        return VAEModel(
            self.encoder.copy(), self.encoder_params.copy(), self.decoder.copy(), self.decoder_params.copy(),
            self.latent_dim, None if self.latent_eps is None else self.latent_eps.copy(),
        )


# ---------------------------------------------------------------------------
# Architectures
# ---------------------------------------------------------------------------


def _res_block(c):
    return Residual([Conv2d(c), BatchNorm(), ELU(), Conv2d(c), BatchNorm()])


def default_encoder(image_shape=(32, 32, 3), width=8, latent_dim=16, stages=2) -> NetworkSpec:
    """Conv stem, then per stage a stride-2 convolution followed by a residual block."""
    layers = [Conv2d(width), BatchNorm(), ELU()]
    c = width
    for _ in range(stages):
        c = width * 2
        layers += [Conv2d(c, stride=2), BatchNorm(), ELU(), _res_block(c), ELU()]
    layers += [Flatten(), Dense(2 * latent_dim)]
    return NetworkSpec(image_shape, layers)


def default_decoder(image_shape=(32, 32, 3), width=8, latent_dim=16, stages=2) -> NetworkSpec:
    """Mirror of :func:`default_encoder`: residual blocks and nearest upsampling, linear output."""
    h, w, channels = image_shape
    f = 2**stages
    if h % f or w % f:
        raise ConfigurationError(f"image size {image_shape[:2]} not divisible by {f}")
    c = width * 2
    layers = [Dense((h // f) * (w // f) * c), Reshape((h // f, w // f, c)), BatchNorm(), ELU()]
    for s in range(stages):
        layers += [_res_block(c), ELU(), Upsample(2)]
        if s < stages - 1:
            c = width
            layers += [Conv2d(c), BatchNorm(), ELU()]
    layers += [Conv2d(channels)]
    return NetworkSpec((latent_dim,), layers)


def build_model(image_shape=(32, 32, 3), width=8, latent_dim=16, stages=2, seed=0) -> VAEModel:
    enc = default_encoder(image_shape, width, latent_dim, stages)
    dec = default_decoder(image_shape, width, latent_dim, stages)
    return VAEModel(enc, nn.init_params(enc, stream(seed, "enc").integers(2**31)),
                    dec, nn.init_params(dec, stream(seed, "dec").integers(2**31)), latent_dim)


@dataclass
class PerceptualNet:
    """Frozen feature network; ``taps`` are layer counts whose outputs are compared."""

    net: NetworkSpec
    params: ParamVector
    taps: tuple[int, ...]

    def __post_init__(self):
        self.params.values.setflags(write=False)
        self.taps = tuple(int(t) for t in self.taps)
        for t in self.taps:
            if not 0 <= t <= len(self.net.layers):
                raise ConfigurationError(f"tap {t} outside network with {len(self.net.layers)} layers")
            if any(s <= 0 for s in self.net.shapes[t]):
                raise ConfigurationError(f"tap {t} has non-positive shape {self.net.shapes[t]}")

    @property
    def tap_shapes(self):
        return [self.net.shapes[t] for t in self.taps]


def default_perceptual(image_shape=(32, 32, 3), seed=1234) -> PerceptualNet:
    """Seeded 3-conv feature extractor tapped after the first two activations."""
    net = NetworkSpec(
        image_shape,
        [Conv2d(8), ELU(), Conv2d(16, stride=2), ELU(), Conv2d(16, stride=2), ELU()],
    )
    return PerceptualNet(net, nn.init_params(net, seed), taps=(2, 4))


# ---------------------------------------------------------------------------
# Model maps
# ---------------------------------------------------------------------------


def _split_encoder(out, latent_dim):
    mu = out[..., :latent_dim]
    log_var = np.clip(out[..., latent_dim:], -LOG_VAR_CLAMP, LOG_VAR_CLAMP)
    return mu, log_var


def encode(model: VAEModel, x) -> EncoderOutput:
    out = nn.forward(model.encoder, model.encoder_params, x)
    mu, log_var = _split_encoder(out, model.latent_dim)
    if not (np.all(np.isfinite(mu)) and np.all(np.isfinite(log_var))):
        raise NumericError("encoder produced non-finite output")
    return EncoderOutput(mu, log_var)


def reparameterize(enc: EncoderOutput, eps) -> np.ndarray:
    eps = np.asarray(eps, dtype=np.float64)
    if eps.shape[-1] != enc.mu.shape[-1]:
        raise ConfigurationError(f"eps has {eps.shape[-1]} entries, latent dim is {enc.mu.shape[-1]}")
    return enc.mu + eps * np.exp(0.5 * enc.log_var)


def decode(model: VAEModel, z) -> np.ndarray:
    return nn.forward(model.decoder, model.decoder_params, z)


def reconstruct(model: VAEModel, x) -> np.ndarray:
    """Latent-mean reconstruction ``decode(encode(x).mu)``; no sampling."""
    return decode(model, encode(model, x).mu)


# ---------------------------------------------------------------------------
# Loss terms
# ---------------------------------------------------------------------------


def kl_term(enc: EncoderOutput):
    """KL(N(mu, sigma^2) || N(0, I)), summed over latent coordinates."""
    var = np.exp(enc.log_var)
    return 0.5 * np.sum(enc.mu**2 + var - 1.0 - enc.log_var, axis=-1)


def recon_term(x, xhat):
    """Mean squared error over all image elements (per sample for batches)."""
    x, xhat = np.asarray(x, dtype=np.float64), np.asarray(xhat, dtype=np.float64)
    if x.shape != xhat.shape:
        raise ConfigurationError(f"shape mismatch {x.shape} vs {xhat.shape}")
    d = (x - xhat) ** 2
    if d.ndim <= 3:
        return d.mean()
    return d.reshape(d.shape[0], -1).mean(axis=1)


def _perceptual_features(pnet, x):
    _, caches, tapped = nn.run_forward(pnet.net, pnet.params, x, taps=pnet.taps)
    return tapped, caches


def perceptual_term(pnet: PerceptualNet, x, xhat):
    """Sum over taps of ``||phi(x) - phi(xhat)||^2 / (2 C W H)``."""
    xb, batched = nn._as_batch(pnet.net, x)
    hb, _ = nn._as_batch(pnet.net, xhat)
    fx, _ = _perceptual_features(pnet, xb)
    fh, _ = _perceptual_features(pnet, hb)
    total = np.zeros(xb.shape[0])
    for t in pnet.taps:
        diff = (fx[t] - fh[t]).reshape(xb.shape[0], -1)
        total += 0.5 * np.mean(diff**2, axis=1)
    return total if batched else float(total[0])


@dataclass
class LossParts:
    recon: float
    kl: float
    perceptual: float
    total: float


def perceptual_targets(pnet: PerceptualNet, x, chunk=128):
    """Tap features of ``x``; constant during training, so computed once."""
    x = np.asarray(x, dtype=np.float64)
    parts = [_perceptual_features(pnet, x[i : i + chunk])[0] for i in range(0, x.shape[0], chunk)]
    return {t: np.concatenate([f[t] for f in parts]) for t in pnet.taps}


def loss_and_grad(model: VAEModel, pnet: PerceptualNet | None, x, eps, beta=1.0, train=True, targets=None):
    """Batch-mean loss ``recon + beta*KL + perceptual`` and its exact gradient.

    Returns ``(LossParts, encoder_grad, decoder_grad)``; ``eps`` fixes the
    reparameterization noise so the loss is a deterministic function of the
    parameters. ``targets`` optionally supplies precomputed perceptual
    features of ``x`` (see :func:`perceptual_targets`).
    """
    x = np.asarray(x, dtype=np.float64)
    bsz = x.shape[0]
    d = model.latent_dim
    enc_out, enc_caches, _ = nn.run_forward(model.encoder, model.encoder_params, x, train=train)
    mu = enc_out[:, :d]
    raw_lv = enc_out[:, d:]
    lv = np.clip(raw_lv, -LOG_VAR_CLAMP, LOG_VAR_CLAMP)
    sigma = np.exp(0.5 * lv)
    z = mu + eps * sigma
    xhat, dec_caches, _ = nn.run_forward(model.decoder, model.decoder_params, z, train=train)

    npix = x[0].size
    recon = np.mean((xhat - x).reshape(bsz, -1) ** 2, axis=1)
    g_xhat = 2.0 * (xhat - x) / (npix * bsz)

    var = sigma**2
    kl = 0.5 * np.sum(mu**2 + var - 1.0 - lv, axis=1)
    g_mu = beta * mu / bsz
    g_lv = beta * 0.5 * (var - 1.0) / bsz

    perc = np.zeros(bsz)
    if pnet is not None:
        fx = targets if targets is not None else _perceptual_features(pnet, x)[0]
        _, pcaches, fh = nn.run_forward(pnet.net, pnet.params, xhat, taps=pnet.taps)
        tap_grads = {}
        for t in pnet.taps:
            diff = fh[t] - fx[t]
            m = diff[0].size
            perc += 0.5 * np.mean(diff.reshape(bsz, -1) ** 2, axis=1)
            tap_grads[t] = diff / (m * bsz)
        g_perc, _ = nn.run_backward(pnet.net, pnet.params, pcaches, None, tap_grads=tap_grads)
        g_xhat = g_xhat + g_perc

    g_z, g_dec = nn.run_backward(model.decoder, model.decoder_params, dec_caches, g_xhat)
    g_mu = g_mu + g_z
    g_lv = g_lv + g_z * eps * sigma * 0.5
    g_lv = g_lv * (np.abs(raw_lv) < LOG_VAR_CLAMP)
    _, g_enc = nn.run_backward(
        model.encoder, model.encoder_params, enc_caches, np.concatenate([g_mu, g_lv], axis=1), input_grad=False
    )
    parts = LossParts(
        float(recon.mean()), float(kl.mean()), float(perc.mean()), float((recon + beta * kl + perc).mean())
    )
    return parts, g_enc, g_dec


# ---------------------------------------------------------------------------
# Training
# ---------------------------------------------------------------------------


@dataclass
class TrainConfig:
    epochs: int = 30
    batch_size: int = 64
    lr: float = 1e-3
    beta: float = 1e-3
    adam_b1: float = 0.9
    adam_b2: float = 0.999
    adam_eps: float = 1e-8
    perceptual: bool = True


class Adam:
    """Adam with bias correction; the caller supplies the step size."""

    def __init__(self, size, b1=0.9, b2=0.999, eps=1e-8):
        self.m = np.zeros(size)
        self.v = np.zeros(size)
        self.b1, self.b2, self.eps = b1, b2, eps
        self.t = 0

    def step(self, grad, lr):
        self.t += 1
        self.m = self.b1 * self.m + (1 - self.b1) * grad
        self.v = self.b2 * self.v + (1 - self.b2) * grad**2
        mhat = self.m / (1 - self.b1**self.t)
        vhat = self.v / (1 - self.b2**self.t)
        return -lr * mhat / (np.sqrt(vhat) + self.eps)


def cosine_lr(base, step, total):
    """Cosine decay from ``base`` to 0 over ``total`` steps."""
    if total <= 0:
        return base
    return base * 0.5 * (1.0 + math.cos(math.pi * min(step, total) / total))


@dataclass
class LossHistory:
    rows: list = field(default_factory=list)

    def append(self, epoch, parts: LossParts):
        self.rows.append((epoch, parts.recon, parts.kl, parts.perceptual, parts.total))

    def __len__(self):
        return len(self.rows)

    @property
    def total(self):
        return np.array([r[4] for r in self.rows])

    def to_csv(self, path):
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["epoch", "recon", "kl", "perceptual", "total"])
            for r in self.rows:
                w.writerow([r[0]] + [repr(float(v)) for v in r[1:]])


def train(model: VAEModel, pnet: PerceptualNet | None, dataset, config: TrainConfig, seed: int,
          progress=None):
    """Minimize the negative ELBO plus perceptual loss with Adam + cosine decay.

    Returns ``(trained_model, LossHistory)``. Batchnorm statistics of the
    trained model are re-estimated on ``dataset`` and frozen.
    """
    data = np.asarray(dataset, dtype=np.float64)
    if data.ndim != 4 or data.shape[0] == 0:
        raise ConfigurationError("training needs a non-empty (N, H, W, C) dataset")
    if config.epochs < 0 or config.batch_size < 1:
        raise ConfigurationError("epochs must be >= 0 and batch_size >= 1")
    model = model.copy()
    history = LossHistory()
    if config.epochs == 0:
        return model, history
    n = data.shape[0]
    p_enc = len(model.encoder_params)
    opt = Adam(p_enc + len(model.decoder_params), config.adam_b1, config.adam_b2, config.adam_eps)
    n_batches = math.ceil(n / config.batch_size)
    total_steps = config.epochs * n_batches
    step = 0
    usable_pnet = pnet if config.perceptual else None
    feats = perceptual_targets(usable_pnet, data) if usable_pnet is not None else None
    for epoch in range(config.epochs):
        order = stream(seed, "shuffle", epoch).permutation(n)
        sums = np.zeros(4)
        for b in range(n_batches):
            idx = order[b * config.batch_size : (b + 1) * config.batch_size]
            if idx.size < 2:
                continue  # batch statistics need at least two samples
            eps = stream(seed, "eps", epoch, b).standard_normal((idx.size, model.latent_dim))
            try:
                targets = None if feats is None else {t: f[idx] for t, f in feats.items()}
                parts, g_enc, g_dec = loss_and_grad(
                    model, usable_pnet, data[idx], eps, config.beta, targets=targets
                )
            except NumericError as exc:
                raise TrainingError(f"non-finite activations at epoch {epoch}: {exc}", epoch) from exc
            if not math.isfinite(parts.total):
                raise TrainingError(f"non-finite loss at epoch {epoch}", epoch)
            delta = opt.step(np.concatenate([g_enc, g_dec]), cosine_lr(config.lr, step, total_steps))
            model.encoder_params.values += delta[:p_enc]
            model.decoder_params.values += delta[p_enc:]
            step += 1
            sums += idx.size * np.array([parts.recon, parts.kl, parts.perceptual, parts.total])
        mean = sums / n
        history.append(epoch, LossParts(*mean))
        if progress is not None:
            progress(epoch, mean)
    if not (np.all(np.isfinite(model.encoder_params.values)) and np.all(np.isfinite(model.decoder_params.values))):
        raise TrainingError("parameters became non-finite", config.epochs - 1)
    freeze_batchnorm(model, data)
    return model, history


def _freeze_net(net, params, inputs, chunk):
    """Estimate population statistics layer by layer with earlier layers frozen."""
    for target in net.batchnorm_layers():
        sums = {"s1": 0.0, "s2": 0.0, "n": 0}

        def observe(x, sums=sums):
            axes = tuple(range(x.ndim - 1))
            sums["s1"] = sums["s1"] + x.sum(axis=axes)
            sums["s2"] = sums["s2"] + (x**2).sum(axis=axes)
            sums["n"] += x.size // x.shape[-1]

        target.observer = observe
        try:
            for start in range(0, inputs.shape[0], chunk):
                nn.run_forward(net, params, inputs[start : start + chunk])
        finally:
            target.observer = None
        mean = sums["s1"] / sums["n"]
        target.mean = mean
        target.var = np.maximum(sums["s2"] / sums["n"] - mean**2, 0.0)


def freeze_batchnorm(model: VAEModel, data, chunk=128):
    """Bake batchnorm statistics of encoder and decoder from ``data``."""
    data = np.asarray(data, dtype=np.float64)
    _freeze_net(model.encoder, model.encoder_params, data, chunk)
    mus = np.concatenate(
        [encode(model, data[i : i + chunk]).mu for i in range(0, data.shape[0], chunk)]
    )
    _freeze_net(model.decoder, model.decoder_params, mus, chunk)


# ---------------------------------------------------------------------------
# Reconstruction Jacobian
# ---------------------------------------------------------------------------

SUBSETS = ("decoder", "all")


def subset_size(model: VAEModel, subset: str) -> int:
    if subset == "decoder":
        return len(model.decoder_params)
    if subset == "all":
        return len(model.encoder_params) + len(model.decoder_params)
    raise ConfigurationError(f"unknown parameter subset {subset!r}; expected one of {SUBSETS}")


def with_latent_sample(model: VAEModel, seed) -> VAEModel:
    """Copy of ``model`` whose scoring path decodes ``mu + sigma * eps``.

    ``eps`` is one seeded standard-normal draw shared by every input, so the
    linearization stays a deterministic function of ``x``.
    """
    m = model.copy()
    m.latent_eps = stream(seed, "latent-sample").standard_normal(model.latent_dim)
    return m


class ReconstructionMap:
    """Linearization of ``x -> reconstruct(model, x)`` w.r.t. a parameter subset.

    ``subset="decoder"`` differentiates w.r.t. the decoder parameters only;
    ``subset="all"`` stacks encoder then decoder parameters. A model carrying
    ``latent_eps`` is linearized at ``z = mu + sigma * eps`` instead of ``mu``.
    """

    def __init__(self, model: VAEModel, x, subset="decoder"):
        self.model = model
        self.subset = subset
        self.p = subset_size(model, subset)
        xb, _ = nn._as_batch(model.encoder, x)
        self._enc = nn.Linearization(model.encoder, model.encoder_params, xb)
        d = model.latent_dim
        z = self._enc.output[:, :d]
        self._lv_gain = None
        if model.latent_eps is not None:
            raw_lv = self._enc.output[:, d:]
            noise = model.latent_eps * np.exp(0.5 * np.clip(raw_lv, -LOG_VAR_CLAMP, LOG_VAR_CLAMP))
            z = z + noise
            # dz/d(raw log_var), zero where the clamp is active
            self._lv_gain = 0.5 * noise * (np.abs(raw_lv) < LOG_VAR_CLAMP)
        self._dec = nn.Linearization(model.decoder, model.decoder_params, z)

    @property
    def output(self):
        return self._dec.output

    @property
    def batch_size(self):
        return self._dec.batch_size

    def jvp(self, tangent):
        t = np.asarray(tangent, dtype=np.float64)
        if t.shape[-1] != self.p:
            raise ConfigurationError(f"tangent length {t.shape[-1]} != subset size {self.p}")
        if self.subset == "decoder":
            return self._dec.jvp(t)
        pe = len(self.model.encoder_params)
        d = self.model.latent_dim
        t_enc = self._enc.jvp(t[..., :pe])
        t_z = t_enc[:, :d]
        if self._lv_gain is not None:
            t_z = t_z + self._lv_gain * t_enc[:, d:]
        return self._dec.jvp(t[..., pe:], input_tangent=t_z)

    def vjp(self, cotangent, per_example=False):
        u = np.asarray(cotangent, dtype=np.float64)
        if u.shape != self.output.shape:
            raise ConfigurationError(f"cotangent shape {u.shape} != output {self.output.shape}")
        g_dec, g_z = self._dec.vjp(u, per_example=per_example, input_grad=True)
        if self.subset == "decoder":
            return g_dec
        g_lv = np.zeros_like(g_z) if self._lv_gain is None else g_z * self._lv_gain
        g_out = np.concatenate([g_z, g_lv], axis=1)
        g_enc = self._enc.vjp(g_out, per_example=per_example)
        return np.concatenate([g_enc, g_dec], axis=-1)


# ---------------------------------------------------------------------------
# Model artifact I/O
# ---------------------------------------------------------------------------


def save_model(model: VAEModel, directory, config: dict | None = None, history: LossHistory | None = None):
    d = Path(directory)
    d.mkdir(parents=True, exist_ok=True)
    (d / "encoder.json").write_text(model.encoder.to_text())
    (d / "decoder.json").write_text(model.decoder.to_text())
    nn.save_params(d / "encoder.params", model.encoder_params)
    nn.save_params(d / "decoder.params", model.decoder_params)
    (d / "model.json").write_text(json.dumps({"latent_dim": model.latent_dim}, sort_keys=True) + "\n")
    if config is not None:
        (d / "config.json").write_text(json.dumps(config, sort_keys=True, indent=1) + "\n")
    if history is not None:
        history.to_csv(d / "loss_history.csv")


def load_model(directory) -> VAEModel:
    d = Path(directory)
    try:
        enc = NetworkSpec.from_text((d / "encoder.json").read_text())
        dec = NetworkSpec.from_text((d / "decoder.json").read_text())
        meta = json.loads((d / "model.json").read_text())
    except FileNotFoundError as exc:
        raise LoadError(f"model directory {d} is incomplete: {exc}") from exc
    return VAEModel(enc, nn.load_params(d / "encoder.params", enc), dec,
                    nn.load_params(d / "decoder.params", dec), int(meta["latent_dim"]))
