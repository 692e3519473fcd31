"""Conditional eps-predictor: a small U-Net with prompt and identity cross-attention,
a structural control branch fed by the degraded image, and gated residual
fusion of the control features into the decoder skips.
"""

from __future__ import annotations

import json
import math
import os
import tempfile
import zipfile
import io
from dataclasses import asdict, dataclass, field, fields

import torch
import torch.nn.functional as F
from torch import Tensor, nn

from . import prompts
from .diffusion import make_noise_schedule


@dataclass
class DenoiserConfig:
    image_channels: int = 1
    image_size: int = 32
    base_channels: int = 16
    channel_mult: tuple[int, ...] = (1, 2, 2)
    attn_levels: tuple[int, ...] = (1, 2)
    attn_dim: int = 64
    num_heads: int = 4
    id_token_count: int = 16
    id_dim: int = 64
    lambda_id: float = 0.75
    use_grf: bool = True
    grf_gate_bias: float = 2.0
    heatmap_level: int = 1
    parameterization: str = "v"
    vocab_size: int = len(prompts.VOCAB)

    def __post_init__(self):
        self.channel_mult = tuple(self.channel_mult)
        self.attn_levels = tuple(self.attn_levels)
        if self.id_token_count < 1:
            raise ValueError("id_token_count must be >= 1")
        if self.lambda_id < 0:
            raise ValueError("lambda_id must be >= 0")
        if self.parameterization not in ("eps", "v"):
            raise ValueError(f"unknown parameterization {self.parameterization!r}")
        if self.attn_dim % self.num_heads:
            raise ValueError("attn_dim must be divisible by num_heads")
        if self.image_size % (2 ** (self.num_levels - 1)):
            raise ValueError("image_size must be divisible by 2**(num_levels-1)")

    @property
    def num_levels(self) -> int:
        return len(self.channel_mult)

    @property
    def channels(self) -> list[int]:
        return [self.base_channels * m for m in self.channel_mult]

    def level_size(self, level: int) -> int:
        return self.image_size // 2**level

    @classmethod
    def from_dict(cls, d: dict) -> "DenoiserConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ValueError(f"unknown denoiser config keys: {sorted(unknown)}")
        return cls(**d)


@dataclass
class ConditionBundle:
    """Everything the denoiser is conditioned on.

    ``prompt_tokens`` is (L,) shared across the batch or (B, L). ``id_tokens`` is
    (B, N, D) or None for the null identity condition; ``id_keep`` optionally
    zeroes the identity branch per sample. ``lq_features`` holds one grid per level.
    """

    prompt_tokens: Tensor
    id_tokens: Tensor | None = None
    lq_features: list[Tensor] | None = None
    id_keep: Tensor | None = None

    def replace(self, **kw) -> "ConditionBundle":
        d = {f.name: getattr(self, f.name) for f in fields(self)}
        d.update(kw)
        return ConditionBundle(**d)

    def without_identity(self) -> "ConditionBundle":
        return self.replace(id_tokens=None, id_keep=None)


def group_norm(ch: int) -> nn.GroupNorm:
    return nn.GroupNorm(min(8, ch), ch)


def timestep_embedding(t: Tensor, dim: int, max_period: float = 10000.0) -> Tensor:
    half = dim // 2
    freqs = torch.exp(-math.log(max_period) * torch.arange(half, dtype=torch.float64) / half)
    args = t.double()[:, None] * freqs[None]
    return torch.cat([torch.cos(args), torch.sin(args)], dim=-1)


class ResBlock(nn.Module):
    def __init__(self, c_in: int, c_out: int, temb_dim: int | None):
        super().__init__()
        self.norm1 = group_norm(c_in)
        self.conv1 = nn.Conv2d(c_in, c_out, 3, padding=1)
        self.temb = nn.Linear(temb_dim, c_out) if temb_dim else None
        self.norm2 = group_norm(c_out)
        self.conv2 = nn.Conv2d(c_out, c_out, 3, padding=1)
        self.skip = nn.Conv2d(c_in, c_out, 1) if c_in != c_out else nn.Identity()

    def forward(self, x: Tensor, temb: Tensor | None = None) -> Tensor:
        h = self.conv1(F.silu(self.norm1(x)))
        if self.temb is not None:
            h = h + self.temb(F.silu(temb))[:, :, None, None]
        h = self.conv2(F.silu(self.norm2(h)))
        return h + self.skip(x)


def _split_heads(x: Tensor, heads: int) -> Tensor:
    b, n, d = x.shape
    return x.view(b, n, heads, d // heads).transpose(1, 2)


def _attention(q: Tensor, k: Tensor, v: Tensor, heads: int, key_mask: Tensor | None = None):
    """Multi-head attention returning (output (B, Nq, D), logsumexp of scores (B, H, Nq))."""
    qh, kh, vh = (_split_heads(x, heads) for x in (q, k, v))
    scores = qh @ kh.transpose(-1, -2) / math.sqrt(qh.shape[-1])
    if key_mask is not None:
        scores = scores.masked_fill(~key_mask[:, None, None, :], float("-inf"))
    probs = scores.softmax(-1)
    out = (probs @ vh).transpose(1, 2).reshape(q.shape)
    return out, scores.logsumexp(-1)


class CrossAttnBlock(nn.Module):
    """Cross-attention over prompt tokens plus a parallel identity branch.

    out = Attn(Q, K, V) + lambda * Attn(Q, K_id, V_id)
    """

    def __init__(self, channels: int, dim: int, heads: int):
        super().__init__()
        self.heads = heads
        self.norm = group_norm(channels)
        self.to_q = nn.Linear(channels, dim, bias=False)
        self.to_k = nn.Linear(dim, dim, bias=False)
        self.to_v = nn.Linear(dim, dim, bias=False)
        self.to_k_id = nn.Linear(dim, dim, bias=False)
        self.to_v_id = nn.Linear(dim, dim, bias=False)
        with torch.no_grad():
            self.to_k_id.weight.copy_(self.to_k.weight)
            self.to_v_id.weight.copy_(self.to_v.weight)
        self.to_out = nn.Linear(dim, channels)
        self.record: list[Tensor] | None = None

    def forward(self, x: Tensor, text: Tensor, text_mask: Tensor | None,
                id_tokens: Tensor | None, lambda_id: float, id_keep: Tensor | None = None) -> Tensor:
        b, c, h, w = x.shape
        seq = self.norm(x).flatten(2).transpose(1, 2)
        out = decoupled_attention(self, seq, text, id_tokens, lambda_id, text_mask, id_keep)
        return x + self.to_out(out).transpose(1, 2).reshape(b, c, h, w)


def decoupled_attention(block: CrossAttnBlock, hidden: Tensor, text_tokens: Tensor,
                        id_tokens: Tensor | None, lambda_id: float,
                        text_mask: Tensor | None = None, id_keep: Tensor | None = None) -> Tensor:
    """Text attention plus ``lambda_id`` times identity attention, before the output projection.

    ``hidden`` is (B, Nq, C); token sources are (B, L, D). The identity branch uses its
    own key/value projections and is dropped entirely when ``id_tokens`` is None.
    """
    dim = block.to_k.in_features
    if text_tokens.shape[-1] != dim or (id_tokens is not None and id_tokens.shape[-1] != dim):
        raise ValueError(f"token width must equal attention dim {dim}")
    q = block.to_q(hidden)
    out, lse_text = _attention(q, block.to_k(text_tokens), block.to_v(text_tokens), block.heads, text_mask)
    if id_tokens is None or lambda_id == 0:
        return out
    id_out, lse_id = _attention(q, block.to_k_id(id_tokens), block.to_v_id(id_tokens), block.heads)
    if block.record is not None:
        # share of attention mass on identity tokens if text and identity keys shared one softmax
        block.record.append(torch.sigmoid(lse_id - lse_text).sum(1).detach())
    if id_keep is not None:
        id_out = id_out * id_keep.to(id_out.dtype)[:, None, None]
    return out + lambda_id * id_out


class GatedResidualFusion(nn.Module):
    """F_out = F_skip + sigmoid(PW(DW(Conv(cat(GN(F_lq), GN(F_skip)))))) * F_lq."""

    def __init__(self, channels: int, gate_bias: float = 2.0):
        super().__init__()
        self.norm_lq = group_norm(channels)
        self.norm_skip = group_norm(channels)
        self.conv = nn.Conv2d(2 * channels, channels, 3, padding=1)
        self.dwconv = nn.Conv2d(channels, channels, 3, padding=1, groups=channels)
        self.pwconv = nn.Conv2d(channels, channels, 1)
        with torch.no_grad():
            self.pwconv.weight.mul_(0.1)
            self.pwconv.bias.fill_(gate_bias)

    def gate(self, f_lq: Tensor, f_skip: Tensor) -> Tensor:
        f = torch.cat([self.norm_lq(f_lq), self.norm_skip(f_skip)], dim=1)
        return torch.sigmoid(self.pwconv(self.dwconv(self.conv(f))))

    def forward(self, f_lq: Tensor, f_skip: Tensor) -> Tensor:
        return grf_fuse(f_lq, f_skip, self)


def grf_fuse(f_lq: Tensor, f_skip: Tensor, grf: GatedResidualFusion) -> Tensor:
    if f_lq.shape != f_skip.shape:
        raise ValueError(f"shape mismatch: {tuple(f_lq.shape)} vs {tuple(f_skip.shape)}")
    return f_skip + grf.gate(f_lq, f_skip) * f_lq


class ControlBranch(nn.Module):
    """Convolutional encoder over the degraded image, one zero-initialised output per level."""

    def __init__(self, cfg: DenoiserConfig):
        super().__init__()
        ch = cfg.channels
        self.image_size = cfg.image_size
        self.conv_in = nn.Conv2d(cfg.image_channels, ch[0], 3, padding=1)
        self.blocks = nn.ModuleList()
        self.downs = nn.ModuleList()
        self.outs = nn.ModuleList()
        prev = ch[0]
        for i, c in enumerate(ch):
            self.blocks.append(ResBlock(prev, c, None))
            out = nn.Conv2d(c, c, 1)
            nn.init.zeros_(out.weight)
            nn.init.zeros_(out.bias)
            self.outs.append(out)
            self.downs.append(nn.Conv2d(c, c, 3, stride=2, padding=1) if i < len(ch) - 1 else nn.Identity())
            prev = c

    def forward(self, image: Tensor) -> list[Tensor]:
        return control_features(image, self)


def control_features(image: Tensor, branch: ControlBranch) -> list[Tensor]:
    if image.shape[-1] != branch.image_size or image.shape[-2] != branch.image_size:
        raise ValueError(f"degraded input must be {branch.image_size}x{branch.image_size}")
    h = branch.conv_in(image)
    feats = []
    for block, out, down in zip(branch.blocks, branch.outs, branch.downs):
        h = block(h)
        feats.append(out(h))
        h = down(h)
    return feats


class PromptEncoder(nn.Module):
    """Learned token table plus position embedding; numeral tokens also get a smooth age feature."""

    def __init__(self, vocab_size: int, dim: int, max_len: int = prompts.MAX_PROMPT_LEN):
        super().__init__()
        self.table = nn.Embedding(vocab_size, dim)
        nn.init.normal_(self.table.weight, std=0.3)
        self.pos = nn.Parameter(torch.randn(max_len, dim) * 0.1)
        self.age_mlp = nn.Sequential(nn.Linear(16, dim), nn.SiLU(), nn.Linear(dim, dim))

    def forward(self, ids: Tensor) -> tuple[Tensor, Tensor]:
        emb = self.table(ids) + self.pos[: ids.shape[1]]
        is_age = prompts.is_age_token(ids)
        age = (ids - prompts.AGE_OFFSET).clamp(0, prompts.MAX_AGE).to(emb.dtype) / prompts.MAX_AGE
        k = torch.arange(1, 9, dtype=emb.dtype)
        feats = torch.cat([torch.sin(math.pi * age[..., None] * k), torch.cos(math.pi * age[..., None] * k)], -1)
        emb = emb + self.age_mlp(feats) * is_age[..., None].to(emb.dtype)
        return emb, ids != prompts.PAD


class Denoiser(nn.Module):
    def __init__(self, cfg: DenoiserConfig):
        super().__init__()
        self.cfg = cfg
        ch = cfg.channels
        temb_dim = 4 * cfg.base_channels
        self.temb = nn.Sequential(nn.Linear(cfg.base_channels, temb_dim), nn.SiLU(), nn.Linear(temb_dim, temb_dim))
        self.prompt_encoder = PromptEncoder(cfg.vocab_size, cfg.attn_dim)
        self.control = ControlBranch(cfg)
        self.conv_in = nn.Conv2d(cfg.image_channels, ch[0], 3, padding=1)

        self.enc_blocks = nn.ModuleList()
        self.enc_attn = nn.ModuleDict()
        self.downs = nn.ModuleList()
        prev = ch[0]
        for i, c in enumerate(ch):
            self.enc_blocks.append(ResBlock(prev, c, temb_dim))
            if i in cfg.attn_levels:
                self.enc_attn[str(i)] = CrossAttnBlock(c, cfg.attn_dim, cfg.num_heads)
            self.downs.append(nn.Conv2d(c, c, 3, stride=2, padding=1) if i < len(ch) - 1 else nn.Identity())
            prev = c
        self.mid1 = ResBlock(ch[-1], ch[-1], temb_dim)
        self.mid_attn = CrossAttnBlock(ch[-1], cfg.attn_dim, cfg.num_heads)
        self.mid2 = ResBlock(ch[-1], ch[-1], temb_dim)

        self.grf = nn.ModuleList([GatedResidualFusion(c, cfg.grf_gate_bias) for c in ch]) if cfg.use_grf else None
        self.dec_blocks = nn.ModuleList()
        self.dec_attn = nn.ModuleDict()
        self.ups = nn.ModuleList()
        prev = ch[-1]
        for i in reversed(range(len(ch))):
            c = ch[i]
            self.dec_blocks.append(ResBlock(prev + c, c, temb_dim))
            if i in cfg.attn_levels:
                self.dec_attn[str(i)] = CrossAttnBlock(c, cfg.attn_dim, cfg.num_heads)
            self.ups.append(nn.Conv2d(c, ch[i - 1], 3, padding=1) if i > 0 else nn.Identity())
            prev = ch[i - 1] if i > 0 else c
        self.norm_out = group_norm(ch[0])
        self.conv_out = nn.Conv2d(ch[0], cfg.image_channels, 3, padding=1)
        # v-parameterisation: the network outputs v and eps = sqrt(abar) v + sqrt(1 - abar) z_t
        abar = make_noise_schedule().alpha_bar
        self.register_buffer("sqrt_abar", abar.sqrt().float(), persistent=False)
        self.register_buffer("sqrt_one_minus_abar", (1 - abar).sqrt().float(), persistent=False)

    def heatmap_block(self) -> CrossAttnBlock:
        key = str(self.cfg.heatmap_level)
        if key not in self.dec_attn:
            raise ValueError(f"no attention block at level {key}")
        return self.dec_attn[key]

    def fuse(self, level: int, skip: Tensor, lq: list[Tensor] | None) -> Tensor:
        if lq is None:
            return skip
        if self.grf is None:
            return skip + lq[level]
        return grf_fuse(lq[level], skip, self.grf[level])

    def forward(self, z_t: Tensor, t, cond: ConditionBundle) -> Tensor:
        cfg = self.cfg
        if z_t.ndim != 4 or z_t.shape[1:] != (cfg.image_channels, cfg.image_size, cfg.image_size):
            raise ValueError(f"latent shape {tuple(z_t.shape)} does not match config")
        b = z_t.shape[0]
        if not isinstance(t, Tensor):
            t = torch.tensor([t] * b)
        t = t.reshape(-1).expand(b) if t.numel() == 1 else t
        temb = self.temb(timestep_embedding(t, cfg.base_channels).to(z_t.dtype))

        ids = cond.prompt_tokens
        if ids.ndim == 1:
            ids = ids[None].expand(b, -1)
        text, text_mask = self.prompt_encoder(ids)
        text = text.to(z_t.dtype)
        id_tok = cond.id_tokens
        if id_tok is not None and id_tok.shape[1] != cfg.id_token_count:
            raise ValueError(f"expected {cfg.id_token_count} identity tokens, got {id_tok.shape[1]}")
        lq = cond.lq_features
        if lq is not None and len(lq) != cfg.num_levels:
            raise ValueError("lq_features must have one grid per level")
        attn_args = (text, text_mask, id_tok, cfg.lambda_id, cond.id_keep)

        h = self.conv_in(z_t)
        skips = []
        for i, block in enumerate(self.enc_blocks):
            h = block(h, temb)
            if str(i) in self.enc_attn:
                h = self.enc_attn[str(i)](h, *attn_args)
            skips.append(h)
            h = self.downs[i](h)
        h = self.mid1(h, temb)
        h = self.mid_attn(h, *attn_args)
        h = self.mid2(h, temb)
        for j, block in enumerate(self.dec_blocks):
            i = cfg.num_levels - 1 - j
            h = block(torch.cat([h, self.fuse(i, skips[i], lq)], dim=1), temb)
            if str(i) in self.dec_attn:
                h = self.dec_attn[str(i)](h, *attn_args)
            if i > 0:
                h = self.ups[j](F.interpolate(h, scale_factor=2, mode="nearest"))
        out = self.conv_out(F.silu(self.norm_out(h)))
        if cfg.parameterization == "eps":
            return out
        a = self.sqrt_abar.to(z_t.dtype)[t].view(-1, 1, 1, 1)
        s = self.sqrt_one_minus_abar.to(z_t.dtype)[t].view(-1, 1, 1, 1)
        return a * out + s * z_t

    def predict_eps(self, z_t: Tensor, t, cond: ConditionBundle) -> Tensor:
        return self(z_t, t, cond)


def predict_eps(z_t: Tensor, t, cond: ConditionBundle, model: Denoiser) -> Tensor:
    return model(z_t, t, cond)


# --- checkpoints -----------------------------------------------------------

class CheckpointError(RuntimeError):
    pass


def save_checkpoint(path: str, modules: dict[str, nn.Module], header: dict,
                    extra_tensors: dict[str, Tensor] | None = None) -> None:
    """Write parameters of several modules under hierarchical names plus a JSON header.

    The archive is written to a temp file and renamed into place.
    """
    state = {}
    for prefix, module in modules.items():
        for k, v in module.state_dict().items():
            state[f"{prefix}.{k}"] = v.detach().cpu()
    for k, v in (extra_tensors or {}).items():
        state[k] = v.detach().cpu()
    buf = io.BytesIO()
    torch.save(state, buf)
    d = os.path.dirname(os.path.abspath(path))
    os.makedirs(d, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=d, suffix=".tmp")
    try:
        with os.fdopen(fd, "wb") as fh, zipfile.ZipFile(fh, "w", zipfile.ZIP_STORED) as zf:
            zf.writestr("header.json", json.dumps(header, sort_keys=True, indent=1))
            zf.writestr("tensors.pt", buf.getvalue())
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def load_checkpoint(path: str) -> tuple[dict, dict[str, Tensor]]:
    try:
        with zipfile.ZipFile(path) as zf:
            header = json.loads(zf.read("header.json"))
            state = torch.load(io.BytesIO(zf.read("tensors.pt")), weights_only=True)
    except (OSError, KeyError, zipfile.BadZipFile) as exc:
        raise CheckpointError(f"cannot read checkpoint {path}: {exc}") from exc
    return header, state


def submodule_state(state: dict[str, Tensor], prefix: str) -> dict[str, Tensor]:
    p = prefix + "."
    return {k[len(p):]: v for k, v in state.items() if k.startswith(p)}


def config_dict(cfg) -> dict:
    d = asdict(cfg)
    return {k: list(v) if isinstance(v, tuple) else v for k, v in d.items()}
