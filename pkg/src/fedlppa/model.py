"""U-Net with tri-prompt dual-attention fusion and a dual (main/auxiliary) decoder.

Parameters are grouped into three partitions that the federation treats
differently:

``theta``
    encoder + fusion module, including the shared and per-client prompts
    (globally aggregated).
``phi``
    main decoder, its prompt-to-head MLP and segmentation head (personalized).
``phi_bar``
    auxiliary decoder and head (personalized, never uploaded).

Flattening order is registration order: layers top to bottom, and within a
batch-norm layer ``gamma, beta, running_mean, running_var``. Running statistics
travel inside the partition that owns the layer.
"""
from __future__ import annotations

import json
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np

from . import tensor as T
from . import tensorio
from .nn import Conv2d, ConvBlock, ConvBNAct, Layer
from .tensor import Tensor
from .weak_labels import Sparsity, asp_encode

PARTITIONS = ("theta", "phi", "phi_bar")
NUM_PROMPT_CHANNELS = 5  # UKP (1) + DDP row (1) + ASP one-hot (3)


@dataclass(frozen=True)
class ModelConfig:
    num_classes: int = 2
    num_clients: int = 1
    image_size: int = 64
    base_channels: int = 16
    depth: int = 4
    in_channels: int = 1
    tdf: bool = True
    dual: bool = True

    def channels(self) -> list[int]:
        """Width per level; doubles per level and holds at the bottleneck."""
        return [self.base_channels * 2 ** min(lvl, self.depth - 1) for lvl in range(self.depth + 1)]

    @property
    def bottleneck_size(self) -> int:
        return self.image_size // 2 ** self.depth


class Encoder(Layer):
    def __init__(self, cfg: ModelConfig, rng):
        ch = cfg.channels()
        self.blocks = [ConvBlock(cfg.in_channels, ch[0], rng)]
        self.blocks += [ConvBlock(ch[lvl - 1], ch[lvl], rng) for lvl in range(1, cfg.depth + 1)]

    def __call__(self, x, training):
        skips = []
        for lvl, block in enumerate(self.blocks):
            if lvl:
                x = T.max_pool2x2(x)
            x = block(x, training)
            skips.append(x)
        return skips  # last entry is the bottleneck feature


class TDF(Layer):
    """Tri-prompt dual-attention fusion of the bottleneck feature."""

    def __init__(self, channels, num_clients, size, rng):
        c = channels
        self.ukp = Tensor(rng.standard_normal((1, size, size)).astype(np.float32), requires_grad=True)
        self.ddp = Tensor(rng.standard_normal((num_clients, size, size)).astype(np.float32),
                          requires_grad=True)
        self.fuse1 = ConvBNAct(c + NUM_PROMPT_CHANNELS, c, rng)
        self.fuse2 = ConvBNAct(c, c, rng)
        reduced = max(c // 8, 1)
        self.query = Conv2d(c, reduced, 1, rng)
        self.key = Conv2d(c, reduced, 1, rng)
        self.value = Conv2d(c, c, 1, rng)
        self.gamma_s = Tensor(np.zeros(1, np.float32), requires_grad=True)
        self.gamma_c = Tensor(np.zeros(1, np.float32), requires_grad=True)
        self.num_clients = num_clients
        self.size = size
        self.last_spatial = None
        self.last_channel = None

    def prompt(self, client_id, asp):
        """Local prompt cat(UKP, DDP[client_id], ASP) as a (5, H, W) tensor."""
        if not 0 <= client_id < self.num_clients:
            raise ValueError(f"client_id {client_id} outside [0, {self.num_clients})")
        asp_plane = Tensor(asp_encode(asp, self.size, self.size))
        return T.concat([self.ukp, self.ddp[client_id:client_id + 1], asp_plane], axis=0)

    def __call__(self, f, client_id, asp, training):
        b, c, h, w = f.shape
        if (h, w) != (self.size, self.size):
            raise ValueError(f"feature spatial size {(h, w)} does not match prompt size {self.size}")
        p = self.prompt(client_id, asp)
        p = T.add(T.reshape(p, (1,) + p.shape), np.zeros((b, 1, 1, 1), f.dtype))
        fh = self.fuse2(self.fuse1(T.concat([f, p], axis=1), training), training)
        n = h * w
        q = T.reshape(self.query(fh), (b, -1, n))
        k = T.reshape(self.key(fh), (b, -1, n))
        v = T.reshape(self.value(fh), (b, c, n))
        # spatial: S[j, i] = softmax_i(K_j . Q_i); F_s = V S^T
        spatial = T.softmax(T.matmul(T.transpose(k, (0, 2, 1)), q), axis=-1)
        f_s = T.reshape(T.matmul(v, T.transpose(spatial, (0, 2, 1))), (b, c, h, w))
        # channel: C[j, i] = softmax_i(F_i . F_j); F_c = C F
        flat = T.reshape(fh, (b, c, n))
        channel = T.softmax(T.matmul(flat, T.transpose(flat, (0, 2, 1))), axis=-1)
        f_c = T.reshape(T.matmul(channel, flat), (b, c, h, w))
        self.last_spatial, self.last_channel = spatial.data, channel.data
        gs = T.reshape(self.gamma_s, (1, 1, 1, 1))
        gc = T.reshape(self.gamma_c, (1, 1, 1, 1))
        fused = (gs * f_s + fh) + (gc * f_c + fh)
        return T.concat([f, fused], axis=1), fh


class PromptMLP(Layer):
    """Two position-wise linear layers from the fused feature to head-width gates."""

    def __init__(self, c_in, c_out, rng):
        self.fc1 = Conv2d(c_in, max(c_in // 4, 1), 1, rng)
        self.fc2 = Conv2d(max(c_in // 4, 1), c_out, 1, rng)

    def __call__(self, f_star, upscale):
        # position-wise ops commute with nearest upsampling, so upsample last
        gate = T.sigmoid(self.fc2(T.relu(self.fc1(f_star))))
        return T.upsample_nearest(gate, upscale) if upscale > 1 else gate


class Decoder(Layer):
    def __init__(self, cfg: ModelConfig, c_in, rng):
        ch = cfg.channels()
        self.ups, self.blocks = [], []
        prev = c_in
        for lvl in range(cfg.depth - 1, -1, -1):
            self.ups.append(Conv2d(prev, ch[lvl], 1, rng))
            self.blocks.append(ConvBlock(2 * ch[lvl], ch[lvl], rng))
            prev = ch[lvl]
        self.head = Conv2d(ch[0], cfg.num_classes, 1, rng)

    def features(self, x, skips, training):
        for up, block, skip in zip(self.ups, self.blocks, reversed(skips[:-1])):
            x = T.upsample_nearest(up(x), 2)
            x = block(T.concat([x, skip], axis=1), training)
        return x

    def __call__(self, x, skips, training, gate=None):
        feats = self.features(x, skips, training)
        if gate is not None:
            feats = feats * gate
        return T.softmax(self.head(feats), axis=1)


class SegModel:
    """Dual-decoder U-Net; ``cfg.tdf`` / ``cfg.dual`` switch off fusion or the auxiliary path."""

    def __init__(self, cfg: ModelConfig, seed: int = 0):
        if cfg.image_size % 2 ** cfg.depth:
            raise ValueError(f"image size {cfg.image_size} not divisible by 2**{cfg.depth}")
        self.cfg = cfg
        self.seed = seed
        enc_seq, main_seq, aux_seq = np.random.SeedSequence(seed).spawn(3)
        enc_rng = np.random.default_rng(enc_seq)
        ch = cfg.channels()
        self.encoder = Encoder(cfg, enc_rng)
        self.tdf = TDF(ch[-1], cfg.num_clients, cfg.bottleneck_size, enc_rng) if cfg.tdf else None
        dec_in = 2 * ch[-1] if cfg.tdf else ch[-1]
        main_rng = np.random.default_rng(main_seq)
        self.main = Decoder(cfg, dec_in, main_rng)
        self.mlp = PromptMLP(dec_in, ch[0], main_rng) if cfg.tdf else None
        self.aux = Decoder(cfg, dec_in, np.random.default_rng(aux_seq)) if cfg.dual else None

    # -- structure --------------------------------------------------------
    def group_entries(self, group: str):
        if group == "theta":
            out = self.encoder.entries("encoder.")
            if self.tdf is not None:
                out += self.tdf.entries("tdf.")
            return out
        if group == "phi":
            out = self.main.entries("main.")
            if self.mlp is not None:
                out += self.mlp.entries("mlp.")
            return out
        if group == "phi_bar":
            return self.aux.entries("aux.") if self.aux is not None else []
        raise KeyError(group)

    def parameters(self, group: str | None = None) -> list[Tensor]:
        groups = PARTITIONS if group is None else (group,)
        return [ref for g in groups for _, kind, ref in self.group_entries(g) if kind == "param"]

    def num_parameters(self) -> int:
        return sum(p.data.size for p in self.parameters())

    def state_size(self, group: str | None = None) -> int:
        groups = PARTITIONS if group is None else (group,)
        return sum(_size(kind, ref) for g in groups for _, kind, ref in self.group_entries(g))

    def manifest(self) -> dict:
        out = {}
        for g in PARTITIONS:
            offset, rows = 0, []
            for name, kind, ref in self.group_entries(g):
                arr = ref.data if kind == "param" else ref
                rows.append({"name": name, "kind": kind, "shape": list(arr.shape), "offset": offset})
                offset += arr.size
            out[g] = {"length": offset, "entries": rows}
        return out

    # -- partition / load ---------------------------------------------------
    def flat(self, group: str) -> np.ndarray:
        parts = [(ref.data if kind == "param" else ref).ravel() for _, kind, ref in self.group_entries(group)]
        return np.concatenate(parts).astype(np.float32) if parts else np.zeros(0, np.float32)

    def flat_grad(self, group: str) -> np.ndarray:
        """Gradient laid out like ``flat(group)``; buffers and missing grads are zero."""
        parts = []
        for _, kind, ref in self.group_entries(group):
            if kind == "param" and ref.grad is not None:
                parts.append(ref.grad.ravel())
            else:
                parts.append(np.zeros((ref.data if kind == "param" else ref).size, np.float32))
        return np.concatenate(parts).astype(np.float32) if parts else np.zeros(0, np.float32)

    def set_flat(self, group: str, vector) -> None:
        vector = np.asarray(vector, dtype=np.float32)
        expected = self.state_size(group)
        if vector.shape != (expected,):
            raise ValueError(f"{group}: expected vector of length {expected}, got {vector.shape}")
        offset = 0
        for _, kind, ref in self.group_entries(group):
            arr = ref.data if kind == "param" else ref
            arr[...] = vector[offset:offset + arr.size].reshape(arr.shape)
            offset += arr.size

    def partition(self) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
        return self.flat("theta"), self.flat("phi"), self.flat("phi_bar")

    def load(self, theta, phi, phi_bar) -> None:
        for group, vec in zip(PARTITIONS, (theta, phi, phi_bar)):
            if len(vec) != self.state_size(group):
                raise ValueError(f"{group}: length {len(vec)} != {self.state_size(group)}")
        for group, vec in zip(PARTITIONS, (theta, phi, phi_bar)):
            self.set_flat(group, vec)

    def zero_grad(self) -> None:
        for p in self.parameters():
            p.grad = None

    # -- forward ------------------------------------------------------------
    def fuse(self, f, client_id, asp, training):
        """Fused bottleneck F* and the MLP gate (None when fusion is off)."""
        if self.tdf is None:
            return f, None
        f_star, _ = self.tdf(f, client_id, asp, training)
        gate = self.mlp(f_star, 2 ** self.cfg.depth)
        return f_star, gate

    def forward(self, image, client_id: int = 0, asp: Sparsity | int = Sparsity.MEDIUM,
                training: bool = True):
        """Return per-pixel class probabilities ``(p_main, p_aux)``; ``p_aux`` is None without the aux path."""
        x = image if isinstance(image, Tensor) else Tensor(image)
        if x.ndim == 3:
            x = T.reshape(x, (1,) + x.shape)
        skips = self.encoder(x, training)
        f_star, gate = self.fuse(skips[-1], client_id, asp, training)
        p_main = self.main(f_star, skips, training, gate)
        p_aux = self.aux(f_star, skips, training) if self.aux is not None else None
        return p_main, p_aux

    __call__ = forward


def _size(kind, ref):
    return (ref.data if kind == "param" else ref).size


def tdf_fuse(model: SegModel, f, client_id: int, asp=Sparsity.MEDIUM, training: bool = True):
    """Fuse a (C, H, W) or (B, C, H, W) bottleneck feature; returns ``(F*, mlp_gate)``."""
    f = f if isinstance(f, Tensor) else Tensor(f)
    squeeze = f.ndim == 3
    if squeeze:
        f = T.reshape(f, (1,) + f.shape)
    f_star, gate = model.fuse(f, client_id, asp, training)
    if squeeze:
        f_star = T.reshape(f_star, f_star.shape[1:])
    return f_star, gate


def build_model(num_classes=2, num_clients=1, image_size=64, channels_base=16, depth=4,
                rng_seed=0, tdf=True, dual=True) -> SegModel:
    cfg = ModelConfig(num_classes=num_classes, num_clients=num_clients, image_size=image_size,
                      base_channels=channels_base, depth=depth, tdf=tdf, dual=dual)
    return SegModel(cfg, seed=rng_seed)


# -- checkpoints --------------------------------------------------------------

def save_checkpoint(model: SegModel, directory) -> None:
    """Write theta/phi/phi_bar FLT1 files plus a JSON sidecar (config + manifest)."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    for group, vec in zip(PARTITIONS, model.partition()):
        tensorio.save(directory / f"{group}.flt", vec)
    sidecar = {"config": asdict(model.cfg), "seed": model.seed, "manifest": model.manifest()}
    (directory / "model.json").write_text(json.dumps(sidecar, indent=1))


def load_checkpoint(directory) -> SegModel:
    directory = Path(directory)
    sidecar = json.loads((directory / "model.json").read_text())
    model = SegModel(ModelConfig(**sidecar["config"]), seed=sidecar["seed"])
    model.load(*(tensorio.load(directory / f"{g}.flt") for g in PARTITIONS))
    return model
