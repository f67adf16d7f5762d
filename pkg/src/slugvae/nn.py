"""Minimal layer-wise networks with exact parameter Jacobian products.

A network is a :class:`NetworkSpec` (an ordered list of layers plus the
input shape) together with a flat :class:`ParamVector`. Arrays carry a
leading batch axis internally; image tensors are laid out as
``(height, width, channels)``.

Three products are exposed:

* :func:`forward` evaluates the network,
* :func:`jvp` pushes a parameter tangent through the network (``J v``),
* :func:`vjp` pulls an output cotangent back to parameter space (``J^T u``).

:class:`Linearization` caches one forward pass so that repeated ``J v`` /
``J^T u`` products at the same inputs do not redo it.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass
from pathlib import Path
from typing import ClassVar

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .errors import ConfigurationError, LoadError, NumericError
from .rng import stream

PARAM_MAGIC = b"SLUGPARM"
PARAM_VERSION = 1


# ---------------------------------------------------------------------------
# Parameter vectors
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class ParamRecord:
    name: str
    shape: tuple[int, ...]

    @property
    def size(self) -> int:
        return int(np.prod(self.shape, dtype=np.int64))


class ParamVector:
    """Flat float64 parameter vector with its layout descriptor."""

    def __init__(self, values, layout):
        layout = tuple(layout)
        values = np.ascontiguousarray(values, dtype=np.float64)
        if values.ndim != 1:
            raise ConfigurationError(f"parameter values must be 1-D, got shape {values.shape}")
        expected = sum(r.size for r in layout)
        if values.size != expected:
            raise ConfigurationError(
                f"parameter vector has {values.size} entries but layout declares {expected}"
            )
        self.values = values
        self.layout = layout

    def __len__(self):
        return self.values.size

    def __repr__(self):
        return f"ParamVector(p={len(self)}, tensors={len(self.layout)})"

    def unflatten(self) -> list[np.ndarray]:
        return unflatten(self.values, self.layout)

    def copy(self) -> ParamVector:
        return ParamVector(self.values.copy(), self.layout)

    def zeros_like(self) -> ParamVector:
        return ParamVector(np.zeros_like(self.values), self.layout)


def flatten(arrays, layout) -> ParamVector:
    """Concatenate per-tensor arrays in layout order."""
    layout = tuple(layout)
    if len(arrays) != len(layout):
        raise ConfigurationError(f"expected {len(layout)} tensors, got {len(arrays)}")
    for a, rec in zip(arrays, layout):
        if tuple(np.shape(a)) != rec.shape:
            raise ConfigurationError(f"tensor {rec.name} has shape {np.shape(a)}, expected {rec.shape}")
    if not layout:
        return ParamVector(np.zeros(0), layout)
    return ParamVector(np.concatenate([np.ravel(a) for a in arrays]).astype(np.float64), layout)


def unflatten(values, layout) -> list[np.ndarray]:
    """Split a flat vector (or a ``(batch, p)`` stack of them) into tensors."""
    values = np.asarray(values)
    total = sum(r.size for r in layout)
    if values.shape[-1] != total:
        raise ConfigurationError(f"vector length {values.shape[-1]} does not match layout size {total}")
    lead = values.shape[:-1]
    out, start = [], 0
    for rec in layout:
        out.append(values[..., start : start + rec.size].reshape(lead + rec.shape))
        start += rec.size
    return out


def save_params(path, params: ParamVector) -> None:
    data = PARAM_MAGIC + struct.pack("<IQ", PARAM_VERSION, len(params))
    Path(path).write_bytes(data + params.values.astype("<f8").tobytes())


def load_params(path, net: NetworkSpec | None = None) -> ParamVector | np.ndarray:
    """Read a parameter file. With ``net`` the layout is attached and checked."""
    raw = Path(path).read_bytes()
    if raw[:8] != PARAM_MAGIC:
        raise LoadError(f"{path}: bad magic bytes, not a parameter file")
    if len(raw) < 20:
        raise LoadError(f"{path}: truncated header")
    version, p = struct.unpack("<IQ", raw[8:20])
    if version != PARAM_VERSION:
        raise LoadError(f"{path}: unsupported parameter file version {version}")
    if len(raw) != 20 + 8 * p:
        raise LoadError(f"{path}: expected {p} values, file size does not match")
    values = np.frombuffer(raw, dtype="<f8", offset=20).astype(np.float64)
    if net is None:
        return values
    if p != net.num_params:
        raise LoadError(f"{path}: holds {p} parameters, network needs {net.num_params}")
    return ParamVector(values, net.layout)


# ---------------------------------------------------------------------------
# Layers
# ---------------------------------------------------------------------------


def _expand(t, batched, ndim):
    """Reshape a per-channel parameter tangent so it broadcasts against activations."""
    if batched:
        return t.reshape(t.shape[:1] + (1,) * (ndim - 2) + t.shape[1:])
    return t


class Layer:
    kind: ClassVar[str] = ""

    def output_shape(self, in_shape):
        return in_shape

    def param_shapes(self, in_shape):
        return []

    def to_dict(self):
        return {"kind": self.kind}

    def forward(self, params, x, train):
        raise NotImplementedError

    def backward(self, params, cache, gy, per_example):
        raise NotImplementedError

    def tangent(self, params, cache, tx, tparams, batched):
        raise NotImplementedError


class Dense(Layer):
    """``y = x W^T + b`` with ``W`` of shape (out, in)."""

    kind = "dense"

    def __init__(self, features):
        self.features = int(features)

    def output_shape(self, in_shape):
        if len(in_shape) != 1:
            raise ConfigurationError(f"dense layer expects a flat input, got shape {in_shape}")
        return (self.features,)

    def param_shapes(self, in_shape):
        return [("weight", (self.features, in_shape[0])), ("bias", (self.features,))]

    def to_dict(self):
        return {"kind": self.kind, "features": self.features}

    def forward(self, params, x, train):
        w, b = params
        return x @ w.T + b, x

    def backward(self, params, x, gy, per_example, input_grad=True):
        w, _ = params
        if per_example:
            gw = gy[:, :, None] * x[:, None, :]
            gb = gy
        else:
            gw = gy.T @ x
            gb = gy.sum(axis=0)
        return (gy @ w if input_grad else None), [gw, gb]

    def tangent(self, params, x, tx, tparams, batched):
        w, _ = params
        tw, tb = tparams
        if batched:
            ty = np.einsum("bi,boi->bo", x, tw) + tb
        else:
            ty = x @ tw.T + tb
        if tx is not None:
            ty = ty + tx @ w.T
        return ty


def _im2col(x, k, stride, pad):
    """Patches of ``x`` as rows ordered (C, kh, kw); ``pad`` is int or (top, bottom, left, right)."""
    b, _, _, c = x.shape
    if isinstance(pad, int):
        pad = (pad, pad, pad, pad)
    if any(pad):
        x = np.pad(x, ((0, 0), pad[:2], pad[2:], (0, 0)))
    win = sliding_window_view(x, (k, k), axis=(1, 2))[:, ::stride, ::stride]
    ho, wo = win.shape[1], win.shape[2]
    return win.reshape(b, ho, wo, c * k * k)


class Conv2d(Layer):
    """Square-kernel convolution, weights (k, k, in, out), zero padding."""

    kind = "conv2d"

    def __init__(self, channels, kernel=3, stride=1, padding=None):
        self.channels = int(channels)
        self.kernel = int(kernel)
        self.stride = int(stride)
        self.padding = self.kernel // 2 if padding is None else int(padding)

    def output_shape(self, in_shape):
        if len(in_shape) != 3:
            raise ConfigurationError(f"conv2d expects (H, W, C) input, got shape {in_shape}")
        h, w, _ = in_shape
        ho = (h + 2 * self.padding - self.kernel) // self.stride + 1
        wo = (w + 2 * self.padding - self.kernel) // self.stride + 1
        if ho < 1 or wo < 1:
            raise ConfigurationError(f"conv2d kernel {self.kernel} does not fit input {in_shape}")
        return (ho, wo, self.channels)

    def param_shapes(self, in_shape):
        k = self.kernel
        return [("weight", (k, k, in_shape[2], self.channels)), ("bias", (self.channels,))]

    def to_dict(self):
        return {
            "kind": self.kind,
            "channels": self.channels,
            "kernel": self.kernel,
            "stride": self.stride,
            "padding": self.padding,
        }

    @staticmethod
    def _mat(w):
        # (kh, kw, C, O) -> rows ordered (C, kh, kw) to match _im2col
        return w.transpose(2, 0, 1, 3).reshape(-1, w.shape[-1])

    @staticmethod
    def _unmat(g, shape):
        k, _, c, o = shape
        return g.reshape(g.shape[:-2] + (c, k, k, o)).swapaxes(-4, -3).swapaxes(-3, -2)

    def forward(self, params, x, train):
        w, b = params
        cols = _im2col(x, self.kernel, self.stride, self.padding)
        y = cols @ self._mat(w) + b
        return y, (cols, x.shape)

    def backward(self, params, cache, gy, per_example, input_grad=True):
        w, _ = params
        cols, xshape = cache
        bsz, o = gy.shape[0], self.channels
        kk = cols.shape[-1]
        if per_example:
            gw = np.matmul(cols.reshape(bsz, -1, kk).transpose(0, 2, 1), gy.reshape(bsz, -1, o))
            gw = self._unmat(gw, w.shape)
            gb = gy.sum(axis=(1, 2))
        else:
            gw = self._unmat(cols.reshape(-1, kk).T @ gy.reshape(-1, o), w.shape)
            gb = gy.sum(axis=(0, 1, 2))
        gx = self._input_grad(w, gy, xshape) if input_grad else None
        return gx, [np.ascontiguousarray(gw), gb]

    def _input_grad(self, w, gy, xshape):
        """Transposed convolution: dilate, pad, correlate with the flipped kernel."""
        b, h, wd, c = xshape
        k, s, p = self.kernel, self.stride, self.padding
        if s > 1:
            # strided: scatter the patch gradients back (cheaper than dilating)
            ho, wo = gy.shape[1], gy.shape[2]
            gcols = (gy @ self._mat(w).T).reshape(b, ho, wo, c, k, k)
            gxp = np.zeros((b, h + 2 * p + s, wd + 2 * p + s, c))
            for i in range(k):
                for j in range(k):
                    gxp[:, i : i + s * ho : s, j : j + s * wo : s, :] += gcols[..., i, j]
            return gxp[:, p : p + h, p : p + wd, :]
        top, left = k - 1 - p, k - 1 - p
        bottom = h + k - 1 - top - gy.shape[1]
        right = wd + k - 1 - left - gy.shape[2]
        cols = _im2col(gy, k, 1, (top, bottom, left, right))
        wflip = w[::-1, ::-1].transpose(0, 1, 3, 2)
        return cols @ self._mat(wflip)

    def tangent(self, params, cache, tx, tparams, batched):
        w, _ = params
        cols, _ = cache
        tw, tb = tparams
        o = self.channels
        if batched:
            bsz = cols.shape[0]
            tw = tw.transpose(0, 3, 1, 2, 4).reshape(bsz, -1, o)
            ty = np.matmul(cols.reshape(bsz, -1, cols.shape[-1]), tw)
            ty = ty.reshape(cols.shape[:3] + (o,)) + tb[:, None, None, :]
        else:
            ty = cols @ self._mat(tw) + tb
        if tx is not None:
            ty = ty + _im2col(tx, self.kernel, self.stride, self.padding) @ self._mat(w)
        return ty


class BatchNorm(Layer):
    """Per-channel normalization over the last axis.

    Training mode normalizes with batch statistics. Evaluation mode uses the
    frozen ``mean``/``var`` stored on the layer, which makes the layer an
    affine map and keeps Jacobians well defined per sample.
    """

    kind = "batchnorm"

    def __init__(self, eps=1e-5, mean=None, var=None):
        self.eps = float(eps)
        self.mean = None if mean is None else np.asarray(mean, dtype=np.float64)
        self.var = None if var is None else np.asarray(var, dtype=np.float64)
        self.observer = None

    def param_shapes(self, in_shape):
        c = in_shape[-1]
        if self.mean is None:
            self.mean, self.var = np.zeros(c), np.ones(c)
        if self.mean.shape != (c,) or self.var.shape != (c,):
            raise ConfigurationError(f"batchnorm statistics do not match {c} channels")
        return [("scale", (c,)), ("shift", (c,))]

    def to_dict(self):
        return {
            "kind": self.kind,
            "eps": self.eps,
            "mean": [float(v) for v in self.mean],
            "var": [float(v) for v in self.var],
        }

    def forward(self, params, x, train):
        g, b = params
        if self.observer is not None:
            self.observer(x)
        if train:
            axes = tuple(range(x.ndim - 1))
            mu = x.mean(axis=axes)
            inv = 1.0 / np.sqrt(x.var(axis=axes) + self.eps)
        else:
            mu, inv = self.mean, 1.0 / np.sqrt(self.var + self.eps)
        xhat = (x - mu) * inv
        return g * xhat + b, (xhat, inv, train)

    def backward(self, params, cache, gy, per_example):
        g, _ = params
        xhat, inv, train = cache
        axes = tuple(range(gy.ndim - 1))
        if per_example:
            if train:
                raise ConfigurationError("per-example gradients are undefined under batch statistics")
            inner = tuple(range(1, gy.ndim - 1))
            gg = (gy * xhat).sum(axis=inner)
            gb = gy.sum(axis=inner)
        else:
            gg = (gy * xhat).sum(axis=axes)
            gb = gy.sum(axis=axes)
        gxhat = gy * g
        if train:
            n = gy.size // gy.shape[-1]
            gx = (inv / n) * (n * gxhat - gxhat.sum(axis=axes) - xhat * (gxhat * xhat).sum(axis=axes))
        else:
            gx = gxhat * inv
        return gx, [gg, gb]

    def tangent(self, params, cache, tx, tparams, batched):
        g, _ = params
        xhat, inv, train = cache
        if train:
            raise ConfigurationError("Jacobian products require frozen batchnorm statistics")
        tg, tb = (_expand(t, batched, xhat.ndim) for t in tparams)
        ty = tg * xhat + tb
        if tx is not None:
            ty = ty + tx * (g * inv)
        return ty


class ELU(Layer):
    kind = "elu"

    def __init__(self, alpha=1.0):
        self.alpha = float(alpha)

    def to_dict(self):
        return {"kind": self.kind, "alpha": self.alpha}

    def forward(self, params, x, train):
        e = np.exp(np.minimum(x, 0.0))
        pos = x > 0
        y = np.where(pos, x, self.alpha * (e - 1.0))
        return y, (e if self.alpha == 1.0 else np.where(pos, 1.0, self.alpha * e))

    def backward(self, params, slope, gy, per_example):
        return gy * slope, []

    def tangent(self, params, slope, tx, tparams, batched):
        return None if tx is None else tx * slope


class Upsample(Layer):
    """Nearest-neighbour upsampling by an integer factor."""

    kind = "upsample"

    def __init__(self, factor=2):
        self.factor = int(factor)

    def output_shape(self, in_shape):
        if len(in_shape) != 3:
            raise ConfigurationError(f"upsample expects (H, W, C) input, got shape {in_shape}")
        h, w, c = in_shape
        return (h * self.factor, w * self.factor, c)

    def to_dict(self):
        return {"kind": self.kind, "factor": self.factor}

    def _up(self, x):
        return x.repeat(self.factor, axis=1).repeat(self.factor, axis=2)

    def forward(self, params, x, train):
        return self._up(x), None

    def backward(self, params, cache, gy, per_example):
        b, h, w, c = gy.shape
        f = self.factor
        return gy.reshape(b, h // f, f, w // f, f, c).sum(axis=(2, 4)), []

    def tangent(self, params, cache, tx, tparams, batched):
        return None if tx is None else self._up(tx)


class Reshape(Layer):
    kind = "reshape"

    def __init__(self, shape):
        self.shape = tuple(int(s) for s in shape)

    def output_shape(self, in_shape):
        if int(np.prod(in_shape)) != int(np.prod(self.shape)):
            raise ConfigurationError(f"cannot reshape {in_shape} into {self.shape}")
        return self.shape

    def to_dict(self):
        return {"kind": self.kind, "shape": list(self.shape)}

    def forward(self, params, x, train):
        return x.reshape((x.shape[0],) + self.shape), x.shape

    def backward(self, params, xshape, gy, per_example):
        return gy.reshape(xshape), []

    def tangent(self, params, xshape, tx, tparams, batched):
        return None if tx is None else tx.reshape((tx.shape[0],) + self.shape)


class Flatten(Reshape):
    kind = "flatten"

    def __init__(self):
        super().__init__(())

    def output_shape(self, in_shape):
        self.shape = (int(np.prod(in_shape)),)
        return self.shape

    def to_dict(self):
        return {"kind": self.kind}


class Residual(Layer):
    """``y = x + body(x)``; the body must preserve the shape."""

    kind = "residual"

    def __init__(self, body):
        self.body = list(body)
        self._counts = None

    def output_shape(self, in_shape):
        shape = in_shape
        for layer in self.body:
            shape = layer.output_shape(shape)
        if shape != in_shape:
            raise ConfigurationError(f"residual body maps {in_shape} to {shape}")
        return in_shape

    def param_shapes(self, in_shape):
        shapes, counts, shape = [], [], in_shape
        for j, layer in enumerate(self.body):
            sub = layer.param_shapes(shape)
            counts.append(len(sub))
            shapes += [(f"{j}.{layer.kind}.{name}", s) for name, s in sub]
            shape = layer.output_shape(shape)
        self._counts = counts
        return shapes

    def to_dict(self):
        return {"kind": self.kind, "body": [layer.to_dict() for layer in self.body]}

    def _split(self, params):
        out, start = [], 0
        for n in self._counts:
            out.append(params[start : start + n])
            start += n
        return out

    def forward(self, params, x, train):
        h, caches = x, []
        for layer, p in zip(self.body, self._split(params)):
            h, c = layer.forward(p, h, train)
            caches.append(c)
        return x + h, caches

    def backward(self, params, caches, gy, per_example):
        g, grads = gy, []
        split = self._split(params)
        for layer, p, c in zip(reversed(self.body), reversed(split), reversed(caches)):
            g, gp = layer.backward(p, c, g, per_example)
            grads = gp + grads
        return gy + g, grads

    def tangent(self, params, caches, tx, tparams, batched):
        t = tx
        for layer, p, tp, c in zip(self.body, self._split(params), self._split(tparams), caches):
            t = layer.tangent(p, c, t, tp, batched)
        if tx is None:
            return t
        return tx if t is None else tx + t


LAYER_TYPES = {cls.kind: cls for cls in (Dense, Conv2d, BatchNorm, ELU, Upsample, Reshape, Flatten, Residual)}


def layer_from_dict(d) -> Layer:
    d = dict(d)
    kind = d.pop("kind")
    if kind not in LAYER_TYPES:
        raise ConfigurationError(f"unknown layer kind {kind!r}")
    if kind == "residual":
        return Residual([layer_from_dict(b) for b in d["body"]])
    return LAYER_TYPES[kind](**d)


# ---------------------------------------------------------------------------
# Network specification
# ---------------------------------------------------------------------------


class NetworkSpec:
    """Ordered layers plus input shape; derives shapes and the parameter layout."""

    def __init__(self, input_shape, layers):
        self.input_shape = tuple(int(s) for s in input_shape)
        self.layers = list(layers)
        if any(s <= 0 for s in self.input_shape):
            raise ConfigurationError(f"input shape must be positive, got {self.input_shape}")
        shapes = [self.input_shape]
        layout, counts = [], []
        for i, layer in enumerate(self.layers):
            pshapes = layer.param_shapes(shapes[-1])
            counts.append(len(pshapes))
            layout += [ParamRecord(f"{i}.{layer.kind}.{name}", tuple(s)) for name, s in pshapes]
            shapes.append(tuple(layer.output_shape(shapes[-1])))
        self.shapes = shapes
        self.layout = tuple(layout)
        self._counts = counts

    @property
    def output_shape(self):
        return self.shapes[-1]

    @property
    def num_params(self) -> int:
        return sum(r.size for r in self.layout)

    def split_params(self, arrays):
        out, start = [], 0
        for n in self._counts:
            out.append(list(arrays[start : start + n]))
            start += n
        return out

    def to_text(self) -> str:
        doc = {"input_shape": list(self.input_shape), "layers": [l.to_dict() for l in self.layers]}
        return json.dumps(doc, sort_keys=True, indent=1) + "\n"

    @classmethod
    def from_text(cls, text) -> NetworkSpec:
        try:
            doc = json.loads(text)
            return cls(doc["input_shape"], [layer_from_dict(d) for d in doc["layers"]])
        except (KeyError, TypeError, json.JSONDecodeError) as exc:
            raise ConfigurationError(f"malformed network description: {exc}") from exc

    def copy(self) -> NetworkSpec:
        return NetworkSpec.from_text(self.to_text())

    def __eq__(self, other):
        return isinstance(other, NetworkSpec) and self.to_text() == other.to_text()

    def batchnorm_layers(self):
        """Yield every BatchNorm layer, descending into residual bodies."""

        def walk(layers):
            for layer in layers:
                if isinstance(layer, BatchNorm):
                    yield layer
                elif isinstance(layer, Residual):
                    yield from walk(layer.body)

        yield from walk(self.layers)


def init_params(net: NetworkSpec, seed: int) -> ParamVector:
    """Fan-in scaled normal weights (variance 1/fan_in), zero biases, unit BN scales."""
    rng = stream(seed, "init")
    arrays = []
    for rec in net.layout:
        leaf = rec.name.rsplit(".", 1)[-1]
        if leaf == "weight":
            fan_in = int(np.prod(rec.shape[:-1])) if len(rec.shape) == 4 else rec.shape[1]
            arrays.append(rng.standard_normal(rec.shape) / np.sqrt(fan_in))
        elif leaf == "scale":
            arrays.append(np.ones(rec.shape))
        else:
            arrays.append(np.zeros(rec.shape))
    return flatten(arrays, net.layout)


# ---------------------------------------------------------------------------
# Evaluation and derivatives
# ---------------------------------------------------------------------------


def _as_batch(net, x):
    x = np.asarray(x, dtype=np.float64)
    if x.shape == net.input_shape:
        return x[None], False
    if x.shape[1:] == net.input_shape:
        return x, True
    raise ConfigurationError(f"input shape {x.shape} does not match network input {net.input_shape}")


def _layer_arrays(net, params):
    if isinstance(params, ParamVector):
        if params.layout != net.layout:
            raise ConfigurationError("parameter layout does not match the network")
        arrays = params.unflatten()
    else:
        arrays = list(params)
    return net.split_params(arrays)


def run_forward(net, params, x, train=False, taps=()):
    """Forward a batch; returns (output, caches, tap outputs).

    ``taps`` lists layer counts whose outputs are returned (0 is the input).
    """
    per_layer = _layer_arrays(net, params)
    h, caches, tapped = x, [], {}
    if 0 in taps:
        tapped[0] = h
    for i, (layer, p) in enumerate(zip(net.layers, per_layer)):
        h, cache = layer.forward(p, h, train)
        if not np.all(np.isfinite(h)):
            raise NumericError(f"non-finite output in layer {i} ({layer.kind})")
        caches.append(cache)
        if i + 1 in taps:
            tapped[i + 1] = h
    return h, caches, tapped


def run_backward(net, params, caches, gy, per_example=False, tap_grads=None, input_grad=True):
    """Reverse pass; returns (input gradient, flat parameter gradient).

    With ``input_grad=False`` the first layer skips its input gradient and
    ``None`` is returned in its place.
    """
    per_layer = _layer_arrays(net, params)
    tap_grads = tap_grads or {}
    g = gy
    grads = []
    for i in range(len(net.layers) - 1, -1, -1):
        if i + 1 in tap_grads:
            g = tap_grads[i + 1] if g is None else g + tap_grads[i + 1]
        if g is None:
            # nothing flows back from beyond the last tap
            if per_example:
                raise ConfigurationError("per-example gradients need an output cotangent")
            grads = [np.zeros_like(a) for a in per_layer[i]] + grads
            continue
        layer = net.layers[i]
        if i == 0 and not input_grad and isinstance(layer, (Conv2d, Dense)):
            g, gp = layer.backward(per_layer[i], caches[i], g, per_example, input_grad=False)
        else:
            g, gp = layer.backward(per_layer[i], caches[i], g, per_example)
        grads = gp + grads
    if 0 in tap_grads:
        g = tap_grads[0] if g is None else g + tap_grads[0]
    if per_example:
        bsz = g.shape[0]
        flat = np.concatenate([a.reshape(bsz, -1) for a in grads], axis=1) if grads else np.zeros((bsz, 0))
    else:
        flat = np.concatenate([a.ravel() for a in grads]) if grads else np.zeros(0)
    return g, flat


class Linearization:
    """One cached evaluation of ``net`` at a batch of inputs.

    ``jvp`` and ``vjp`` reuse the cached activations; both accept either a
    single parameter vector (shared across the batch) or one per sample.
    """

    def __init__(self, net: NetworkSpec, params, x):
        self.net = net
        self.params = params
        self.x, self._batched = _as_batch(net, x)
        self.output, self._caches, _ = run_forward(net, params, self.x)

    @property
    def batch_size(self):
        return self.x.shape[0]

    def jvp(self, tangent, input_tangent=None):
        """Return ``J_params t + J_input t_x`` for every sample in the batch."""
        t = tangent.values if isinstance(tangent, ParamVector) else np.asarray(tangent, dtype=np.float64)
        batched = t.ndim == 2
        if batched and t.shape[0] != self.batch_size:
            raise ConfigurationError(f"{t.shape[0]} tangents for a batch of {self.batch_size}")
        per_layer_t = self.net.split_params(unflatten(t, self.net.layout))
        per_layer = _layer_arrays(self.net, self.params)
        h = input_tangent
        for layer, p, tp, cache in zip(self.net.layers, per_layer, per_layer_t, self._caches):
            h = layer.tangent(p, cache, h, tp, batched)
        if h is None:
            h = np.zeros_like(self.output)
        return h

    def vjp(self, cotangent, per_example=False, input_grad=False):
        """Return ``J^T u`` (summed over the batch unless ``per_example``)."""
        u = np.asarray(cotangent, dtype=np.float64)
        if u.shape != self.output.shape:
            if u.shape == self.output.shape[1:] and self.batch_size == 1:
                u = u[None]
            else:
                raise ConfigurationError(f"cotangent shape {u.shape} does not match output {self.output.shape}")
        gx, flat = run_backward(self.net, self.params, self._caches, u, per_example=per_example)
        return (flat, gx) if input_grad else flat


def forward(net: NetworkSpec, params, x) -> np.ndarray:
    """Evaluate the network in inference mode (frozen batchnorm statistics)."""
    xb, batched = _as_batch(net, x)
    y, _, _ = run_forward(net, params, xb)
    return y if batched else y[0]


def vjp(net: NetworkSpec, params, x, cotangent) -> ParamVector:
    """Parameter-space vector-Jacobian product ``J^T u``, summed over a batch."""
    lin = Linearization(net, params, x)
    u = np.asarray(cotangent, dtype=np.float64)
    if not lin._batched:
        u = u[None] if u.shape == net.output_shape else u
    return ParamVector(lin.vjp(u), net.layout)


def jvp(net: NetworkSpec, params, x, tangent) -> np.ndarray:
    """Parameter-space Jacobian-vector product ``J v``."""
    if isinstance(tangent, ParamVector) and tangent.layout != net.layout:
        raise ConfigurationError("tangent layout does not match the network")
    lin = Linearization(net, params, x)
    out = lin.jvp(tangent)
    return out if lin._batched else out[0]
