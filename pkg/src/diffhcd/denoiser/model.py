"""Small conditional epsilon-prediction network with hand-written backprop.

Layout (widths ``(c0, c1)``)::

    concat(y, cond) -> conv_in -> res_a ----------------------+
                                   -> conv_down(stride 2)     |
                                   -> res_b -> up x2 -> conv_up (+) -> res_c
                                   -> GN -> SiLU -> conv_out

Each residual block is ``GN -> SiLU -> conv -> GN -> (+ noise-level shift)
-> SiLU -> conv`` plus the identity. The noise level enters as sinusoidal
features of log-SNR passed through a one-layer SiLU MLP.
"""

from __future__ import annotations

import struct
from pathlib import Path

import numpy as np

from . import layers as L

N_FREQ = 16
EMB_DIM = 64
BLOCKS = ("res_a", "res_b", "res_c")
_CKPT_MAGIC = b"DNCK"


def _groups(c: int) -> int:
    for g in (8, 4, 2, 1):
        if c % g == 0:
            return g
    return 1


class ConvDenoiser:
    """Parameters plus forward/backward passes.

    ``params`` is an insertion-ordered dict of named arrays; the order is
    the serialization order.
    """

    def __init__(self, n_ch: int = 3, widths=(32, 64), seed: int = 0, dtype=np.float32, params=None):
        self.n_ch = int(n_ch)
        self.widths = tuple(int(c) for c in widths)
        if len(self.widths) != 2:
            raise ValueError("widths must be a pair (c0, c1)")
        self.params = params if params is not None else self._init_params(seed, dtype)

    # -- parameters --------------------------------------------------------

    def param_shapes(self) -> dict[str, tuple[int, ...]]:
        c0, c1 = self.widths
        cin = 3 * self.n_ch
        shapes: dict[str, tuple[int, ...]] = {
            "emb.w": (EMB_DIM, 2 * N_FREQ),
            "emb.b": (EMB_DIM,),
            "conv_in.w": (c0, cin, 3, 3),
            "conv_in.b": (c0,),
        }

        def block(name, c):
            shapes.update({
                f"{name}.gn1.g": (c,), f"{name}.gn1.b": (c,),
                f"{name}.conv1.w": (c, c, 3, 3), f"{name}.conv1.b": (c,),
                f"{name}.emb.w": (c, EMB_DIM), f"{name}.emb.b": (c,),
                f"{name}.gn2.g": (c,), f"{name}.gn2.b": (c,),
                f"{name}.conv2.w": (c, c, 3, 3), f"{name}.conv2.b": (c,),
            })

        block("res_a", c0)
        shapes["conv_down.w"] = (c1, c0, 3, 3)
        shapes["conv_down.b"] = (c1,)
        block("res_b", c1)
        shapes["conv_up.w"] = (c0, c1, 3, 3)
        shapes["conv_up.b"] = (c0,)
        block("res_c", c0)
        shapes.update({
            "gn_out.g": (c0,), "gn_out.b": (c0,),
            "conv_out.w": (self.n_ch, c0, 3, 3), "conv_out.b": (self.n_ch,),
        })
        return shapes

    def _init_params(self, seed, dtype):
        rng = np.random.default_rng(seed)
        params = {}
        for name, shape in self.param_shapes().items():
            if name.startswith("conv_out"):
                arr = np.zeros(shape)
            elif name.endswith(".w"):
                fan_in = int(np.prod(shape[1:]))
                arr = rng.standard_normal(shape) * np.sqrt(2.0 / fan_in)
            elif name.endswith(".g"):
                arr = np.ones(shape)
            else:
                arr = np.zeros(shape)
            params[name] = arr.astype(dtype)
        return params

    @property
    def n_params(self) -> int:
        return int(sum(p.size for p in self.params.values()))

    @property
    def dtype(self):
        return self.params["conv_in.w"].dtype

    def astype(self, dtype) -> "ConvDenoiser":
        return ConvDenoiser(self.n_ch, self.widths, params={k: v.astype(dtype) for k, v in self.params.items()})

    def copy(self) -> "ConvDenoiser":
        return self.astype(self.dtype)

    def zero_grads(self) -> dict[str, np.ndarray]:
        return {k: np.zeros_like(v) for k, v in self.params.items()}

    # -- forward / backward ------------------------------------------------

    def _check_inputs(self, y, cond, gamma):
        if y.ndim != 4 or y.shape[1] != self.n_ch:
            raise ValueError(f"expected noisy input (B, {self.n_ch}, h, w), got {y.shape}")
        if cond.shape != (y.shape[0], 2 * self.n_ch) + y.shape[2:]:
            raise ValueError(f"condition shape {cond.shape} does not match noisy input {y.shape}")
        if gamma.shape != (y.shape[0],):
            raise ValueError(f"gamma must have shape ({y.shape[0]},), got {gamma.shape}")
        if y.shape[2] % 2 or y.shape[3] % 2:
            raise ValueError("spatial dims must be even")

    def _block_forward(self, name, h, e):
        p = self.params
        g = _groups(h.shape[-1])
        a, c_gn1 = L.groupnorm_forward(h, p[f"{name}.gn1.g"], p[f"{name}.gn1.b"], g)
        a, c_act1 = L.silu_forward(a)
        a, c_conv1 = L.conv3x3_forward(a, p[f"{name}.conv1.w"], p[f"{name}.conv1.b"])
        a, c_gn2 = L.groupnorm_forward(a, p[f"{name}.gn2.g"], p[f"{name}.gn2.b"], g)
        # the shift goes after the norm, which would otherwise cancel it
        bias, c_emb = L.dense_forward(e, p[f"{name}.emb.w"], p[f"{name}.emb.b"])
        a = a + bias[:, None, None, :]
        a, c_act2 = L.silu_forward(a)
        a, c_conv2 = L.conv3x3_forward(a, p[f"{name}.conv2.w"], p[f"{name}.conv2.b"])
        return h + a, (c_gn1, c_act1, c_conv1, c_emb, c_gn2, c_act2, c_conv2)

    def _block_backward(self, name, dout, cache, grads):
        c_gn1, c_act1, c_conv1, c_emb, c_gn2, c_act2, c_conv2 = cache
        p = self.params
        da, grads[f"{name}.conv2.w"], grads[f"{name}.conv2.b"] = L.conv3x3_backward(dout, c_conv2)
        da = L.silu_backward(da, c_act2)
        dbias = da.sum(axis=(1, 2))
        de, grads[f"{name}.emb.w"], grads[f"{name}.emb.b"] = L.dense_backward(dbias, c_emb, p[f"{name}.emb.w"])
        da, grads[f"{name}.gn2.g"], grads[f"{name}.gn2.b"] = L.groupnorm_backward(da, c_gn2)
        da, grads[f"{name}.conv1.w"], grads[f"{name}.conv1.b"] = L.conv3x3_backward(da, c_conv1)
        da = L.silu_backward(da, c_act1)
        da, grads[f"{name}.gn1.g"], grads[f"{name}.gn1.b"] = L.groupnorm_backward(da, c_gn1)
        return dout + da, de

    def forward(self, y, cond, gamma, keep_cache: bool = False):
        """Predict noise for a batch. Returns ``eps`` (B, n_ch, h, w) and,
        with ``keep_cache``, the activations needed by :meth:`backward`."""
        dt = self.dtype
        y = np.asarray(y, dtype=dt)
        cond = np.asarray(cond, dtype=dt)
        gamma = np.asarray(gamma, dtype=np.float64).reshape(-1)
        self._check_inputs(y, cond, gamma)
        p = self.params
        z = np.concatenate([y, cond], axis=1).transpose(0, 2, 3, 1)

        feats = L.noise_level_features(gamma, N_FREQ, dt)
        e, c_embd = L.dense_forward(feats, p["emb.w"], p["emb.b"])
        e, c_emba = L.silu_forward(e)

        h0, c_in = L.conv3x3_forward(z, p["conv_in.w"], p["conv_in.b"])
        h1, c_a = self._block_forward("res_a", h0, e)
        d, c_down = L.conv3x3_forward(h1, p["conv_down.w"], p["conv_down.b"], stride=2)
        h2, c_b = self._block_forward("res_b", d, e)
        u, c_up = L.conv3x3_forward(L.upsample2_forward(h2), p["conv_up.w"], p["conv_up.b"])
        h3 = u + h1
        h4, c_c = self._block_forward("res_c", h3, e)
        o, c_gno = L.groupnorm_forward(h4, p["gn_out.g"], p["gn_out.b"], _groups(h4.shape[-1]))
        o, c_acto = L.silu_forward(o)
        out, c_out = L.conv3x3_forward(o, p["conv_out.w"], p["conv_out.b"])
        eps = np.ascontiguousarray(out.transpose(0, 3, 1, 2))
        if not keep_cache:
            return eps
        cache = (c_embd, c_emba, c_in, c_a, c_down, c_b, c_up, c_c, c_gno, c_acto, c_out)
        return eps, cache

    def __call__(self, y, cond, gamma):
        return self.forward(y, cond, gamma)

    def backward(self, cache, upstream) -> dict[str, np.ndarray]:
        """Gradients of ``sum(upstream * eps)`` w.r.t. every parameter."""
        c_embd, c_emba, c_in, c_a, c_down, c_b, c_up, c_c, c_gno, c_acto, c_out = cache
        p = self.params
        grads: dict[str, np.ndarray] = {}
        dout = np.asarray(upstream, dtype=self.dtype).transpose(0, 2, 3, 1)

        do, grads["conv_out.w"], grads["conv_out.b"] = L.conv3x3_backward(dout, c_out)
        do = L.silu_backward(do, c_acto)
        dh4, grads["gn_out.g"], grads["gn_out.b"] = L.groupnorm_backward(do, c_gno)
        dh3, de_c = self._block_backward("res_c", dh4, c_c, grads)
        dup, grads["conv_up.w"], grads["conv_up.b"] = L.conv3x3_backward(dh3, c_up)
        dh2 = L.upsample2_backward(dup)
        dd, de_b = self._block_backward("res_b", dh2, c_b, grads)
        dh1, grads["conv_down.w"], grads["conv_down.b"] = L.conv3x3_backward(dd, c_down)
        dh1 = dh1 + dh3
        dh0, de_a = self._block_backward("res_a", dh1, c_a, grads)
        _, grads["conv_in.w"], grads["conv_in.b"] = L.conv3x3_backward(dh0, c_in)

        de = L.silu_backward(de_a + de_b + de_c, c_emba)
        _, grads["emb.w"], grads["emb.b"] = L.dense_backward(de, c_embd, p["emb.w"])
        return {k: grads[k] for k in p}


def denoiser_forward(model: ConvDenoiser, y_noisy, condition, gamma):
    """Single-image convenience wrapper: ``(n_ch, h, w)`` in and out."""
    y = np.asarray(y_noisy)[None]
    c = np.asarray(condition)[None]
    return model.forward(y, c, np.array([gamma]))[0]


# ---------------------------------------------------------------------------
# checkpoints
# ---------------------------------------------------------------------------


def save_checkpoint(path, model: ConvDenoiser) -> None:
    """Header (magic, n_ch, widths, tensor count) then named f32 tensors."""
    out = [_CKPT_MAGIC, struct.pack("<4I", model.n_ch, *model.widths, len(model.params))]
    for name, arr in model.params.items():
        raw = name.encode("utf-8")
        out.append(struct.pack("<H", len(raw)) + raw)
        out.append(struct.pack("<I", arr.ndim) + struct.pack(f"<{arr.ndim}I", *arr.shape))
        out.append(np.ascontiguousarray(arr, dtype="<f4").tobytes())
    Path(path).write_bytes(b"".join(out))


def load_checkpoint(path) -> ConvDenoiser:
    path = Path(path)
    if not path.is_file():
        raise FileNotFoundError(f"checkpoint not found: {path}")
    buf = path.read_bytes()
    if buf[:4] != _CKPT_MAGIC:
        raise ValueError(f"{path}: not a denoiser checkpoint (bad magic)")
    try:
        n_ch, c0, c1, count = struct.unpack_from("<4I", buf, 4)
        off = 20
        params = {}
        for _ in range(count):
            (nlen,) = struct.unpack_from("<H", buf, off)
            off += 2
            name = buf[off : off + nlen].decode("utf-8")
            off += nlen
            (ndim,) = struct.unpack_from("<I", buf, off)
            off += 4
            shape = struct.unpack_from(f"<{ndim}I", buf, off)
            off += 4 * ndim
            n = int(np.prod(shape))
            if off + 4 * n > len(buf):
                raise ValueError("truncated tensor payload")
            params[name] = np.frombuffer(buf, "<f4", n, off).reshape(shape).astype(np.float32)
            off += 4 * n
    except struct.error as exc:
        raise ValueError(f"{path}: truncated checkpoint") from exc
    model = ConvDenoiser(n_ch, (c0, c1), params=params)
    expected = model.param_shapes()
    if list(expected) != list(params) or any(expected[k] != params[k].shape for k in params):
        raise ValueError(f"{path}: tensor list does not match architecture")
    for k, v in params.items():
        if not np.all(np.isfinite(v)):
            raise ValueError(f"{path}: non-finite values in {k}")
    return model
