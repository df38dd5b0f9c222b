"""Per-slice segmentation network.

A small strided convolutional encoder feeds a stack of decoder layers in which
cluster centers attend to pixel features through hard-assignment (k-means style)
cross-attention.  Mask logits come from a dot product between projected centers
and a per-pixel embedding map; class logits from a linear head.  Index 0 of the
class head is the no-object slot.
"""

from __future__ import annotations

import json
import math
import zipfile
from dataclasses import dataclass, field, asdict
from pathlib import Path

import numpy as np
import torch
from torch import nn


class NumericError(RuntimeError):
    pass


class CheckpointError(RuntimeError):
    pass


@dataclass(frozen=True)
class ModelConfig:
    d_model: int = 64
    n_decoder_layers: int = 3
    stride: int = 4
    n_classes: int = 4
    per_class_centers: int = 5
    ffn_hidden: int = 128
    seed: int = 0

    def __post_init__(self):
        if self.d_model < 8:
            raise ValueError("d_model must be >= 8")
        if self.n_decoder_layers < 1:
            raise ValueError("need at least one decoder layer")
        if self.per_class_centers < 1:
            raise ValueError("per_class_centers must be >= 1")

    @property
    def n_centers(self) -> int:
        return self.per_class_centers * self.n_classes

    def to_json(self) -> dict:
        return asdict(self)

    @staticmethod
    def from_json(obj: dict) -> "ModelConfig":
        return ModelConfig(**obj)


@dataclass
class DecoderOutput:
    centers: torch.Tensor          # (N, D) updated centers
    mask_logits: torch.Tensor      # (N, H', W')
    class_logits: torch.Tensor     # (N, K+1)
    per_layer_aux: list = field(default_factory=list)          # [(mask_logits, class_logits)]
    per_layer_assignments: list = field(default_factory=list)  # [(N, H'W') one-hot]


def sinusoidal_position_encoding(d: int, h: int, w: int, dtype=torch.float32) -> torch.Tensor:
    """Additive 2D sine/cosine positional encoding, shape (d, h, w)."""
    assert d % 4 == 0, "embedding dim must be divisible by 4 for 2D sinusoids"
    quarter = d // 4
    freq = torch.exp(-math.log(10000.0) * torch.arange(quarter, dtype=dtype) / max(quarter, 1))
    ys = torch.arange(h, dtype=dtype)[:, None] * freq[None]  # (h, quarter)
    xs = torch.arange(w, dtype=dtype)[:, None] * freq[None]  # (w, quarter)
    pe = torch.zeros(d, h, w, dtype=dtype)
    pe[0:quarter] = torch.sin(ys).T[:, :, None].expand(quarter, h, w)
    pe[quarter : 2 * quarter] = torch.cos(ys).T[:, :, None].expand(quarter, h, w)
    pe[2 * quarter : 3 * quarter] = torch.sin(xs).T[:, None, :].expand(quarter, h, w)
    pe[3 * quarter :] = torch.cos(xs).T[:, None, :].expand(quarter, h, w)
    return pe


def standard_cross_attention(
    C: torch.Tensor, Q: torch.Tensor, K: torch.Tensor, V: torch.Tensor
) -> torch.Tensor:
    """Softmax over the spatial axis: C + softmax_HW(Q K^T) V."""
    if Q.shape[1] != K.shape[1] or K.shape != V.shape or C.shape != Q.shape:
        raise ValueError(
            f"shape mismatch: C{tuple(C.shape)} Q{tuple(Q.shape)} "
            f"K{tuple(K.shape)} V{tuple(V.shape)}"
        )
    attn = torch.softmax(Q @ K.T, dim=1)  # (N, HW), rows sum to 1
    return C + attn @ V


def kmeans_cross_attention(
    C: torch.Tensor, Q: torch.Tensor, K: torch.Tensor, V: torch.Tensor
) -> tuple[torch.Tensor, torch.Tensor]:
    """Hard-assignment cross-attention.

    Each pixel is assigned to the center maximizing Q K^T along the center axis
    (ties to the lowest index); centers are updated by summing their assigned
    value rows: C_hat = C + A V.  The assignment carries no gradient.
    """
    n = Q.shape[0]
    if n == 0:
        raise ValueError("kmeans_cross_attention requires at least one center")
    if Q.shape[1] != K.shape[1] or K.shape != V.shape:
        raise ValueError(f"shape mismatch: Q{tuple(Q.shape)} K{tuple(K.shape)} V{tuple(V.shape)}")
    logits = Q @ K.T  # (N, HW)
    idx = torch.argmax(logits, dim=0)  # per pixel; first (lowest) index wins ties on CPU
    A = torch.zeros_like(logits)
    A[idx, torch.arange(logits.shape[1], device=logits.device)] = 1.0
    A = A.detach()
    return C + A @ V, A


class _MLP(nn.Module):
    def __init__(self, d_in, d_hidden, d_out):
        super().__init__()
        self.fc1 = nn.Linear(d_in, d_hidden)
        self.fc2 = nn.Linear(d_hidden, d_out)

    def forward(self, x):
        return self.fc2(torch.relu(self.fc1(x)))


class SliceEncoder(nn.Module):
    """Four conv blocks with total stride 4; spatial dims become ceil(H/4), ceil(W/4)."""

    def __init__(self, d_model: int):
        super().__init__()
        mid = max(d_model // 2, 16)
        self.blocks = nn.Sequential(
            nn.Conv2d(1, mid, 3, stride=2, padding=1),
            nn.GroupNorm(4, mid),
            nn.GELU(),
            nn.Conv2d(mid, mid, 3, stride=1, padding=1),
            nn.GroupNorm(4, mid),
            nn.GELU(),
            nn.Conv2d(mid, d_model, 3, stride=2, padding=1),
            nn.GroupNorm(4, d_model),
            nn.GELU(),
            nn.Conv2d(d_model, d_model, 3, stride=1, padding=1),
        )

    def forward(self, x):
        return self.blocks(x)


class SelfAttention(nn.Module):
    """Single-head self-attention over a token sequence (S, D)."""

    def __init__(self, d_model: int):
        super().__init__()
        self.wq = nn.Linear(d_model, d_model)
        self.wk = nn.Linear(d_model, d_model)
        self.wv = nn.Linear(d_model, d_model)
        self.out = nn.Linear(d_model, d_model)
        self.scale = 1.0 / math.sqrt(d_model)

    def forward(self, tokens):
        q, k, v = self.wq(tokens), self.wk(tokens), self.wv(tokens)
        attn = torch.softmax(q @ k.T * self.scale, dim=1)
        return self.out(attn @ v)


class DecoderLayer(nn.Module):
    def __init__(self, cfg: ModelConfig):
        super().__init__()
        d = cfg.d_model
        self.wq = nn.Linear(d, d)
        self.wk = nn.Linear(d, d)
        self.wv = nn.Linear(d, d)
        self.norm_cluster = nn.LayerNorm(d)
        self.self_attn = SelfAttention(d)
        self.norm_self = nn.LayerNorm(d)
        self.ffn = _MLP(d, cfg.ffn_hidden, d)
        self.norm_ffn = nn.LayerNorm(d)

    def forward(self, centers, feat_flat):
        """centers (N, D), feat_flat (H'W', D) -> (centers, assignment)."""
        q = self.wq(centers)
        k = self.wk(feat_flat)
        v = self.wv(feat_flat)
        updated, A = kmeans_cross_attention(centers, q, k, v)
        c = self.norm_cluster(updated)
        c = self.norm_self(c + self.self_attn(c))
        c = self.norm_ffn(c + self.ffn(c))
        return c, A


class ClickInitFFN(nn.Module):
    """Projects a (possibly round-accumulated) point feature to a center embedding.

    Residual form so the module is exactly identity when the inner MLP is
    zero-initialized; the pre-norm keeps round-accumulated inputs in range.
    """

    def __init__(self, cfg: ModelConfig):
        super().__init__()
        d = cfg.d_model
        self.norm = nn.LayerNorm(d)
        self.mlp = _MLP(d, 2 * d, d)

    def forward(self, o):
        return o + self.mlp(self.norm(o))


class MemoryAggregator(nn.Module):
    """Fuses historic centroids into one vector and queries it at init time."""

    def __init__(self, cfg: ModelConfig):
        super().__init__()
        d = cfg.d_model
        self.fuse_attn = SelfAttention(d)
        self.fuse_norm = nn.LayerNorm(d)
        self.fuse_ffn = _MLP(d, cfg.ffn_hidden, d)
        self.fuse_out_norm = nn.LayerNorm(d)
        # cross-attention used when initializing the next center from memory
        self.q_proj = nn.Linear(d, d)
        self.k_proj = nn.Linear(d, d)
        self.v_proj = nn.Linear(d, d)
        self.out_proj = nn.Linear(d, d, bias=False)
        # start as an exact no-op so memory conditioning ramps in during
        # training instead of perturbing long sweeps it never trained on
        nn.init.zeros_(self.out_proj.weight)
        self.scale = 1.0 / math.sqrt(d)

    def fuse(self, h_prev: torch.Tensor | None, c_new: torch.Tensor) -> torch.Tensor:
        """Self-attention over [H_prev; C_new] (or just C_new), mean-pool, FFN.

        The FFN is residual and the output normed: the fused vector feeds back
        into the next fuse, and without a bounded scale the recursion drifts
        over sweeps far deeper than any training chain.
        """
        tokens = c_new[None] if h_prev is None else torch.stack([h_prev, c_new])
        attended = tokens + self.fuse_attn(tokens)
        pooled = self.fuse_norm(attended.mean(dim=0))
        return self.fuse_out_norm(pooled + self.fuse_ffn(pooled))

    def query(self, c_decoded: torch.Tensor, h: torch.Tensor | None) -> torch.Tensor:
        """Residual single-query cross-attention of the center against its memory.

        The memory is one token today, so the softmax weight is exactly 1 and
        the attention degenerates to a projection of H; kept in the general
        form so a multi-token memory would work unchanged.
        """
        if h is None:
            return c_decoded
        tokens = h[None] if h.ndim == 1 else h
        q = self.q_proj(c_decoded)[None]
        k = self.k_proj(tokens)
        v = self.v_proj(tokens)
        attn = torch.softmax(q @ k.T * self.scale, dim=1)
        return c_decoded + self.out_proj(attn @ v)[0]


class SegModel(nn.Module):
    def __init__(self, cfg: ModelConfig):
        super().__init__()
        torch.manual_seed(cfg.seed)
        self.cfg = cfg
        d = cfg.d_model
        self.encoder = SliceEncoder(d)
        self.pixel_proj = nn.Conv2d(d, d, 1)
        self.layers = nn.ModuleList(DecoderLayer(cfg) for _ in range(cfg.n_decoder_layers))
        self.learned_centers = nn.Parameter(torch.randn(cfg.n_centers, d) * 0.02)
        self.mask_head = _MLP(d, cfg.ffn_hidden, d)
        self.class_head = nn.Linear(d, cfg.n_classes + 1)
        self.click_ffn = ClickInitFFN(cfg)
        self.memory = MemoryAggregator(cfg)
        self._pos_cache: dict = {}

    # ------------------------------------------------------------------ encode

    def _positional(self, h: int, w: int, dtype, device) -> torch.Tensor:
        key = (h, w, dtype)
        if key not in self._pos_cache:
            self._pos_cache[key] = sinusoidal_position_encoding(
                self.cfg.d_model, h, w, dtype=dtype
            ).to(device)
        return self._pos_cache[key]

    def encode_slice(self, slice2d: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor]:
        """2D slice (H, W) in [0, 255] -> (features (D,H',W'), pixel_embedding (D,H',W')).

        Features carry the additive positional encoding and serve as the K/V
        source and as the map clicks sample from.
        """
        if not torch.all(torch.isfinite(slice2d)):
            raise NumericError("non-finite values in input slice")
        x = (slice2d / 127.5 - 1.0)[None, None]
        trunk = self.encoder(x)[0]  # (D, H', W')
        pos = self._positional(trunk.shape[1], trunk.shape[2], trunk.dtype, trunk.device)
        features = trunk + pos
        pixel_emb = self.pixel_proj(trunk[None])[0]
        return features, pixel_emb

    # ------------------------------------------------------------------ decode

    def _heads(self, centers: torch.Tensor, pixel_emb: torch.Tensor):
        mask_embed = self.mask_head(centers)  # (N, D)
        mask_logits = torch.einsum("nd,dhw->nhw", mask_embed, pixel_emb)
        class_logits = self.class_head(centers)
        return mask_logits, class_logits

    def decode(self, features: torch.Tensor, pixel_emb: torch.Tensor,
               centers: torch.Tensor) -> DecoderOutput:
        """Run all decoder layers; per-layer heads retained for deep supervision."""
        feat_flat = features.reshape(features.shape[0], -1).T  # (H'W', D)
        c = centers
        aux, assignments = [], []
        for i, layer in enumerate(self.layers):
            c, A = layer(c, feat_flat)
            if not torch.all(torch.isfinite(c)):
                raise NumericError(f"non-finite centers after decoder layer {i}")
            aux.append(self._heads(c, pixel_emb))
            assignments.append(A)
        mask_logits, class_logits = aux[-1]
        return DecoderOutput(
            centers=c,
            mask_logits=mask_logits,
            class_logits=class_logits,
            per_layer_aux=aux,
            per_layer_assignments=assignments,
        )

    def forward(self, slice2d: torch.Tensor, centers: torch.Tensor | None = None) -> DecoderOutput:
        features, pixel_emb = self.encode_slice(slice2d)
        if centers is None:
            centers = self.learned_centers
        return self.decode(features, pixel_emb, centers)


def upsample_mask_logits(mask_logits: torch.Tensor, out_hw: tuple[int, int]) -> torch.Tensor:
    """Bilinearly upsample (N, H', W') logits to the full slice resolution."""
    return torch.nn.functional.interpolate(
        mask_logits[None], size=out_hw, mode="bilinear", align_corners=False
    )[0]


# ---------------------------------------------------------------------------
# checkpoint format: zip archive of named parameter arrays + JSON header

def save_checkpoint(model: SegModel, path: Path, iteration: int = 0) -> None:
    path = Path(path)
    header = {"config": model.cfg.to_json(), "iteration": iteration, "seed": model.cfg.seed}
    with zipfile.ZipFile(path, "w") as zf:
        zf.writestr("header.json", json.dumps(header))
        for name, param in model.state_dict().items():
            buf = param.detach().cpu().numpy().astype(np.float32)
            zf.writestr(f"params/{name}.npy", _npy_bytes(buf))


def _npy_bytes(arr: np.ndarray) -> bytes:
    import io

    bio = io.BytesIO()
    np.save(bio, arr)
    return bio.getvalue()


def load_checkpoint(path: Path) -> tuple[SegModel, dict]:
    path = Path(path)
    if not path.exists():
        raise CheckpointError(f"checkpoint not found: {path}")
    import io

    with zipfile.ZipFile(path) as zf:
        header = json.loads(zf.read("header.json"))
        model = SegModel(ModelConfig.from_json(header["config"]))
        state = model.state_dict()
        seen = set()
        for info in zf.namelist():
            if not info.startswith("params/"):
                continue
            name = info[len("params/") : -len(".npy")]
            if name not in state:
                raise CheckpointError(f"unknown parameter in checkpoint: {name}")
            arr = np.load(io.BytesIO(zf.read(info)))
            if tuple(arr.shape) != tuple(state[name].shape):
                raise CheckpointError(
                    f"shape mismatch for {name}: checkpoint {arr.shape} vs model "
                    f"{tuple(state[name].shape)}"
                )
            state[name] = torch.from_numpy(arr).to(state[name].dtype)
            seen.add(name)
        missing = set(state) - seen
        if missing:
            raise CheckpointError(f"checkpoint missing parameters: {sorted(missing)}")
    model.load_state_dict(state)
    model.eval()
    return model, header
