"""Acoustic models assembled from the blocks in :mod:`dcae.net`.

Four kinds share one encoder design:

* ``baseline``: encoder -> senone head.
* ``c_dcae``: encoder -> code ``[P | R]``; P -> senone head; ``[P | R]`` ->
  Decoder I -> noisy input.
* ``pc_dcae``: encoder -> code ``[P | S | R]``; ``[P | S]`` -> Decoder II ->
  clean frame; ``[P | S | R]`` -> Decoder I -> noisy frame.
* ``hc_dcae``: Encoder I -> ``[C | R]`` -> Decoder I -> noisy frame;
  Encoder II(C) -> ``[P | S]`` -> Decoder II -> clean frame.

The speaker embedding is appended to every input frame. Encoders run at the
input frame rate; codes are subsampled before the senone head and the
decoders.
"""

from __future__ import annotations

import json
import struct
import zlib
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path

import numpy as np

from .net import (CodeLayout, UNetMode, affine_backward, affine_forward, code_split,
                  decoder_backward, decoder_forward, subsample, subsample_backward,
                  tdnnf_backward, tdnnf_forward)

KINDS = ("baseline", "c_dcae", "pc_dcae", "hc_dcae")
MODEL_MAGIC = b"DCAEM"
MODEL_VERSION = 1


class ModelFormatError(ValueError):
    pass


@dataclass(frozen=True)
class ModelConfig:
    """Wiring and sizes of an acoustic model.

    ``encoder_depth`` is the total encoder depth, i.e. the baseline depth. For
    hc-DcAE it is split as Encoder I = ``encoder_depth - encoder2_depth``
    layers and Encoder II = ``encoder2_depth`` layers.
    """

    kind: str = "c_dcae"
    feat_dim: int = 40
    spk_dim: int = 100
    num_senones: int = 20
    hidden_dim: int = 64
    bottleneck_dim: int = 16
    encoder_depth: int = 5
    encoder2_depth: int = 0
    decoder1_depth: int = 2
    decoder2_depth: int = 2
    code_layout: CodeLayout = CodeLayout(64, 0, 32)
    unet: UNetMode = UNetMode()
    subsample_factor: int = 3
    offsets: tuple[int, ...] = (-1, 0, 1)
    seed: int = 0
    stripped: bool = False

    def __post_init__(self):
        if isinstance(self.code_layout, dict):
            object.__setattr__(self, "code_layout", CodeLayout(**self.code_layout))
        if isinstance(self.unet, dict):
            object.__setattr__(self, "unet", UNetMode(**self.unet))
        object.__setattr__(self, "offsets", tuple(int(o) for o in self.offsets))
        self.validate()

    def validate(self):
        if self.kind not in KINDS:
            raise ValueError(f"unknown model kind {self.kind!r}")
        for name in ("feat_dim", "spk_dim", "num_senones", "hidden_dim", "bottleneck_dim",
                     "encoder_depth", "subsample_factor"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be >= 1")
        if not self.offsets:
            raise ValueError("offsets must be non-empty")
        lay = self.code_layout
        if self.kind == "hc_dcae":
            if not 1 <= self.encoder2_depth < self.encoder_depth:
                raise ValueError("hc_dcae needs 1 <= encoder2_depth < encoder_depth")
            if lay.c_size < 1:
                raise ValueError("hc_dcae needs c_size >= 1")
        elif self.encoder2_depth:
            raise ValueError("encoder2_depth applies to hc_dcae only")
        if self.kind == "c_dcae" and (lay.s_size or lay.c_size):
            raise ValueError("c_dcae has no S-Code or C-Code")
        if self.kind == "pc_dcae" and lay.c_size:
            raise ValueError("pc_dcae has no C-Code")
        if self.kind != "baseline":
            if self.decoder1_depth < 1 or (self.has_clean_decoder and self.decoder2_depth < 1):
                raise ValueError("active decoders need depth >= 1")

    @property
    def has_clean_decoder(self) -> bool:
        return self.kind in ("pc_dcae", "hc_dcae")

    @property
    def encoder1_depth(self) -> int:
        return self.encoder_depth - self.encoder2_depth

    @property
    def code1_sizes(self) -> tuple[int, ...]:
        lay = self.code_layout
        if self.kind == "baseline":
            return (self.hidden_dim,)
        if self.kind == "hc_dcae":
            return (lay.c_size, lay.r_size)
        return (lay.p_size, lay.s_size, lay.r_size)

    def unet_pairs(self) -> list[int | None]:
        """Encoder I layer tapped by each Decoder I hidden layer (mirrored suffix).

        Decoder layer ``j`` pairs with encoder layer ``L1 - 2 - j``; the last
        encoder layer is the code itself and is never tapped.
        """
        if self.unet.mode == "none":
            return [None] * self.decoder1_depth
        L1 = self.encoder1_depth
        return [L1 - 2 - j if L1 - 2 - j >= 0 else None for j in range(self.decoder1_depth)]

    def to_dict(self) -> dict:
        d = asdict(self)
        d["offsets"] = list(self.offsets)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        return cls(**d)


@dataclass
class ModelOutputs:
    senone_logits: np.ndarray
    recon_noisy: np.ndarray | None = None
    recon_clean: np.ndarray | None = None
    taps: list = field(default_factory=list)
    cache: dict | None = field(default=None, repr=False)


def _tensor_shapes(cfg: ModelConfig) -> dict[str, tuple[int, ...]]:
    shapes: dict[str, tuple[int, ...]] = {}
    n_off = len(cfg.offsets)
    H, K = cfg.hidden_dim, cfg.bottleneck_dim

    def tdnn_stack(prefix, depth, din, dout):
        for i in range(depth):
            d_in = din if i == 0 else H
            d_out = dout if i == depth - 1 else H
            shapes[f"{prefix}.{i:02d}.A"] = (n_off * d_in, K)
            shapes[f"{prefix}.{i:02d}.B"] = (K, d_out)
            shapes[f"{prefix}.{i:02d}.b"] = (d_out,)

    def dense_stack(prefix, depth, din, unet_widths):
        w = din
        for j in range(depth):
            shapes[f"{prefix}.{j:02d}.W"] = (w, H)
            shapes[f"{prefix}.{j:02d}.b"] = (H,)
            w = unet_widths[j]
        shapes[f"{prefix}.out.W"] = (w, cfg.feat_dim)
        shapes[f"{prefix}.out.b"] = (cfg.feat_dim,)

    lay = cfg.code_layout
    tdnn_stack("enc1", cfg.encoder1_depth, cfg.feat_dim + cfg.spk_dim, sum(cfg.code1_sizes))
    if cfg.kind == "hc_dcae":
        tdnn_stack("enc2", cfg.encoder2_depth, lay.c_size, lay.p_size + lay.s_size)
    head_in = cfg.hidden_dim if cfg.kind == "baseline" else lay.p_size
    shapes["head.W"] = (head_in, cfg.num_senones)
    shapes["head.b"] = (cfg.num_senones,)
    if cfg.kind != "baseline" and not cfg.stripped:
        widths = [cfg.unet.out_width(H, H) if pair is not None else H
                  for pair in cfg.unet_pairs()]
        dense_stack("dec1", cfg.decoder1_depth, sum(cfg.code1_sizes), widths)
        if cfg.has_clean_decoder:
            dense_stack("dec2", cfg.decoder2_depth, lay.p_size + lay.s_size,
                        [H] * cfg.decoder2_depth)
    return shapes


def init_params(cfg: ModelConfig) -> dict[str, np.ndarray]:
    """Weights ~ N(0, 1/fan_in) from a per-tensor-name seed; biases zero."""
    params = {}
    for name, shape in _tensor_shapes(cfg).items():
        if len(shape) == 1:
            params[name] = np.zeros(shape)
        else:
            rng = np.random.default_rng([cfg.seed, zlib.crc32(name.encode())])
            params[name] = rng.standard_normal(shape) / np.sqrt(shape[0])
    return params


class Model:
    """Parameters plus wiring; ``forward``/``backward`` are pure in the parameters."""

    def __init__(self, config: ModelConfig, params: dict[str, np.ndarray] | None = None):
        self.config = config
        self.params = init_params(config) if params is None else params
        shapes = _tensor_shapes(config)
        if set(shapes) != set(self.params):
            raise ValueError("parameter names do not match the configuration")
        for name, shape in shapes.items():
            if self.params[name].shape != shape:
                raise ValueError(f"{name}: expected shape {shape}, got {self.params[name].shape}")

    def __repr__(self):
        return f"Model(kind={self.config.kind!r}, params={self.num_parameters()})"

    def num_parameters(self) -> int:
        return int(sum(p.size for p in self.params.values()))

    def copy(self) -> "Model":
        return Model(self.config, {k: v.copy() for k, v in self.params.items()})

    # ----------------------------------------------------------------------

    def _tdnn_stack(self, prefix, depth, x):
        acts, caches = [], []
        h = x
        for i in range(depth):
            key = f"{prefix}.{i:02d}"
            h, c = tdnnf_forward(h, self.params[key + ".A"], self.params[key + ".B"],
                                 self.params[key + ".b"], self.config.offsets)
            acts.append(h)
            caches.append(c)
        return h, acts, caches

    def _tdnn_stack_backward(self, prefix, depth, caches, g_top, g_acts, grads):
        g = g_top
        for i in range(depth - 1, -1, -1):
            key = f"{prefix}.{i:02d}"
            if g_acts is not None and g_acts[i] is not None:
                g = g + g_acts[i]
            g, gp = tdnnf_backward(g, caches[i], self.params[key + ".A"],
                                   self.params[key + ".B"], self.config.offsets)
            for k, v in gp.items():
                grads[f"{key}.{k}"] = v
        return g

    def _decoder(self, prefix, depth):
        layers = [(self.params[f"{prefix}.{j:02d}.W"], self.params[f"{prefix}.{j:02d}.b"])
                  for j in range(depth)]
        return layers, (self.params[f"{prefix}.out.W"], self.params[f"{prefix}.out.b"])

    def forward(self, noisy, spk_embed) -> ModelOutputs:
        cfg = self.config
        x = np.asarray(noisy, dtype=np.float64)
        e = np.asarray(spk_embed, dtype=np.float64)
        if x.ndim != 2 or x.shape[1] != cfg.feat_dim or e.shape != (cfg.spk_dim,):
            raise ValueError(
                f"expected (T, {cfg.feat_dim}) features and a {cfg.spk_dim}-dim embedding, "
                f"got {x.shape} and {e.shape}")
        T, f = x.shape[0], cfg.subsample_factor
        inp = np.concatenate([x, np.broadcast_to(e, (T, cfg.spk_dim))], axis=1)
        code1, acts1, caches1 = self._tdnn_stack("enc1", cfg.encoder1_depth, inp)
        cache = {"T": T, "enc1": caches1}
        code1_sub = subsample(code1, f)

        if cfg.kind == "hc_dcae":
            c_code, _ = code_split(code1, cfg.code1_sizes)
            code2, _, caches2 = self._tdnn_stack("enc2", cfg.encoder2_depth, c_code)
            cache["enc2"] = caches2
            code2_sub = subsample(code2, f)
            p_code = code2_sub[:, :cfg.code_layout.p_size]
            clean_in = code2_sub
        elif cfg.kind == "baseline":
            p_code = code1_sub
        else:
            p_code = code1_sub[:, :cfg.code_layout.p_size]
            clean_in = code1_sub[:, :cfg.code_layout.p_size + cfg.code_layout.s_size]

        logits, cache["head"] = affine_forward(p_code, self.params["head.W"],
                                               self.params["head.b"], relu=False)
        out = ModelOutputs(logits)
        if cfg.kind == "baseline" or cfg.stripped:
            out.cache = cache
            return out

        taps = [subsample(acts1[i], f) if i is not None else None for i in cfg.unet_pairs()]
        layers, head = self._decoder("dec1", cfg.decoder1_depth)
        out.recon_noisy, cache["dec1"] = decoder_forward(code1_sub, layers, head, taps, cfg.unet)
        out.taps = taps
        if cfg.has_clean_decoder:
            layers, head = self._decoder("dec2", cfg.decoder2_depth)
            out.recon_clean, cache["dec2"] = decoder_forward(clean_in, layers, head)
        out.cache = cache
        return out

    def backward(self, outputs: ModelOutputs, grad_logits=None, grad_recon_noisy=None,
                 grad_recon_clean=None) -> dict[str, np.ndarray]:
        """Exact parameter gradients given gradients w.r.t. the model outputs.

        Gradients arriving at shared tensors from several outputs are summed.
        """
        cache = outputs.cache
        if cache is None:
            raise ValueError("outputs carry no forward cache")
        cfg = self.config
        T, f = cache["T"], cfg.subsample_factor
        lay = cfg.code_layout
        grads = {k: np.zeros_like(v) for k, v in self.params.items()}
        if grad_logits is None:
            grad_logits = np.zeros_like(outputs.senone_logits)
        Tp = outputs.senone_logits.shape[0]

        g_p, gh = affine_backward(grad_logits, cache["head"], self.params["head.W"])
        grads["head.W"], grads["head.b"] = gh["W"], gh["b"]

        g_code1_sub = np.zeros((Tp, sum(cfg.code1_sizes)))
        g_acts1 = [None] * cfg.encoder1_depth
        g_clean_in = None
        if cfg.kind == "baseline":
            g_code1_sub += g_p
        elif cfg.kind != "hc_dcae":
            g_code1_sub[:, :lay.p_size] += g_p

        if cfg.kind != "baseline" and not cfg.stripped:
            if grad_recon_noisy is not None:
                layers, head = self._decoder("dec1", cfg.decoder1_depth)
                g_in, lg, og, tg = decoder_backward(grad_recon_noisy, cache["dec1"], layers,
                                                    head, cfg.unet)
                self._store_decoder_grads("dec1", lg, og, grads)
                g_code1_sub += g_in
                for j, i in enumerate(cfg.unet_pairs()):
                    if i is not None and tg[j] is not None:
                        g_tap = subsample_backward(tg[j], f, T)
                        g_acts1[i] = g_tap if g_acts1[i] is None else g_acts1[i] + g_tap
            if cfg.has_clean_decoder and grad_recon_clean is not None:
                layers, head = self._decoder("dec2", cfg.decoder2_depth)
                g_clean_in, lg, og, _ = decoder_backward(grad_recon_clean, cache["dec2"],
                                                         layers, head)
                self._store_decoder_grads("dec2", lg, og, grads)
            if cfg.kind == "pc_dcae" and g_clean_in is not None:
                g_code1_sub[:, :lay.p_size + lay.s_size] += g_clean_in

        g_code1 = subsample_backward(g_code1_sub, f, T)
        if cfg.kind == "hc_dcae":
            g_code2_sub = np.zeros((Tp, lay.p_size + lay.s_size))
            g_code2_sub[:, :lay.p_size] += g_p
            if g_clean_in is not None:
                g_code2_sub += g_clean_in
            g_c = self._tdnn_stack_backward("enc2", cfg.encoder2_depth, cache["enc2"],
                                            subsample_backward(g_code2_sub, f, T), None, grads)
            g_code1[:, :lay.c_size] += g_c
        self._tdnn_stack_backward("enc1", cfg.encoder1_depth, cache["enc1"], g_code1,
                                  g_acts1, grads)
        return grads

    @staticmethod
    def _store_decoder_grads(prefix, layer_grads, out_grads, grads):
        for j, g in enumerate(layer_grads):
            grads[f"{prefix}.{j:02d}.W"], grads[f"{prefix}.{j:02d}.b"] = g["W"], g["b"]
        grads[f"{prefix}.out.W"], grads[f"{prefix}.out.b"] = out_grads["W"], out_grads["b"]


def assemble(config: ModelConfig) -> Model:
    return Model(config)


def strip_decoders(model: Model) -> Model:
    """Inference model: encoders, code split and senone head only."""
    if model.config.kind == "baseline" or model.config.stripped:
        return model
    cfg = replace(model.config, stripped=True)
    keep = _tensor_shapes(cfg)
    return Model(cfg, {k: v for k, v in model.params.items() if k in keep})


# --------------------------------------------------------------------------
# Parameter file


def save_model(model: Model, path) -> None:
    """``DCAEM`` + version, JSON config blob, named f64 tensors, CRC32 trailer."""
    cfg = json.dumps(model.config.to_dict(), sort_keys=True).encode()
    chunks = [struct.pack("<I", len(cfg)), cfg, struct.pack("<I", len(model.params))]
    for name in sorted(model.params):
        arr = np.ascontiguousarray(model.params[name], dtype="<f8")
        nb = name.encode()
        chunks += [struct.pack("<I", len(nb)), nb, struct.pack("<I", arr.ndim),
                   struct.pack(f"<{arr.ndim}I", *arr.shape), arr.tobytes()]
    body = b"".join(chunks)
    Path(path).write_bytes(MODEL_MAGIC + bytes([MODEL_VERSION]) + body
                           + struct.pack("<I", zlib.crc32(body)))


def load_model(path) -> Model:
    data = Path(path).read_bytes()
    if data[:5] != MODEL_MAGIC:
        raise ModelFormatError(f"{path}: bad magic")
    if len(data) < 14 or data[5] != MODEL_VERSION:
        raise ModelFormatError(f"{path}: unsupported version or truncated file")
    body = data[6:-4]
    if zlib.crc32(body) != struct.unpack("<I", data[-4:])[0]:
        raise ModelFormatError(f"{path}: checksum mismatch")
    try:
        off = 0
        (n,) = struct.unpack_from("<I", body, off)
        off += 4
        cfg = ModelConfig.from_dict(json.loads(body[off:off + n]))
        off += n
        (count,) = struct.unpack_from("<I", body, off)
        off += 4
        params = {}
        for _ in range(count):
            (n,) = struct.unpack_from("<I", body, off)
            name = body[off + 4:off + 4 + n].decode()
            off += 4 + n
            (rank,) = struct.unpack_from("<I", body, off)
            dims = struct.unpack_from(f"<{rank}I", body, off + 4)
            off += 4 + 4 * rank
            size = int(np.prod(dims)) if rank else 1
            params[name] = np.frombuffer(body, "<f8", size, off).reshape(dims).astype(np.float64)
            off += 8 * size
    except (struct.error, ValueError, KeyError) as exc:
        raise ModelFormatError(f"{path}: {exc}") from exc
    return Model(cfg, params)
