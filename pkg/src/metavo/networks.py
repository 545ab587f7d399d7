"""DepthNet, PoseNet and MaskNet with convolutional LSTM memory.

Every hidden layer is ``conv -> AlignedNorm -> ReLU``; output layers have no
normalisation or activation besides their range mapping. A convolutional LSTM
sits at the bottleneck of the depth and pose encoders. Recurrent state lives
for one sliding window and is reset at the start of the next.
"""
from __future__ import annotations

import io
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import List, NamedTuple, Optional, Tuple

import torch
import torch.nn as nn
import torch.nn.functional as F

from .errors import DomainError
from .feature_alignment import AlignedNorm, FeatureAligner, FeatureStats
from .geometry import Intrinsics, depth_from_logits, euler_to_rotation, synthesize_view
from .losses import LossWeights, degenerate, photometric_error, total_loss

CHECKPOINT_VERSION = 1

LSTMState = Tuple[torch.Tensor, torch.Tensor]


@dataclass(frozen=True)
class ArchitectureConfig:
    widths: Tuple[int, ...] = (16, 32, 64)
    pose_hidden: Tuple[int, ...] = (64,)
    mask_width: int = 8
    lstm_kernel: int = 3
    height: int = 128
    width: int = 416
    rot_scale: float = 0.01
    trans_scale: float = 0.1
    zero_init_heads: bool = True

    def __post_init__(self):
        object.__setattr__(self, "widths", tuple(int(w) for w in self.widths))
        object.__setattr__(self, "pose_hidden", tuple(int(w) for w in self.pose_hidden))
        if len(self.widths) < 3:
            raise DomainError("architecture needs at least 3 encoder levels")
        if min(self.widths) <= 0 or min(self.pose_hidden, default=1) <= 0 or self.mask_width <= 0:
            raise DomainError("layer widths must be positive")
        div = 2 ** len(self.widths)
        if self.height % div or self.width % div:
            raise DomainError(f"input {self.height}x{self.width} must be divisible by {div}")

    @property
    def levels(self) -> int:
        return len(self.widths)

    @classmethod
    def tiny(cls, height: int = 128, width: int = 416, **kw) -> "ArchitectureConfig":
        return cls(widths=(16, 32, 64), pose_hidden=(64,), height=height, width=width, **kw)

    @classmethod
    def base(cls, height: int = 128, width: int = 416, **kw) -> "ArchitectureConfig":
        return cls(widths=(32, 64, 128, 256, 512, 512), pose_hidden=(256,), mask_width=32,
                   height=height, width=width, **kw)


def convlstm_cell(x: torch.Tensor, state: LSTMState, weight: torch.Tensor, bias: torch.Tensor) -> LSTMState:
    """One convolutional LSTM step; gates are stacked ``i, f, o, g`` along channels."""
    h, c = state
    if h.shape[0] != x.shape[0] or h.shape[-2:] != x.shape[-2:] or h.shape != c.shape:
        raise DomainError(f"state {tuple(h.shape)} incompatible with input {tuple(x.shape)}")
    if weight.shape[1] != x.shape[1] + h.shape[1] or weight.shape[0] != 4 * h.shape[1]:
        raise DomainError("convLSTM weight shape does not match input/hidden channels")
    z = F.conv2d(torch.cat([x, h], dim=1), weight, bias, padding=weight.shape[-1] // 2)
    zi, zf, zo, zg = torch.chunk(z, 4, dim=1)
    i, f, o, g = torch.sigmoid(zi), torch.sigmoid(zf), torch.sigmoid(zo), torch.tanh(zg)
    c_new = f * c + i * g
    h_new = o * torch.tanh(c_new)
    return h_new, c_new


class ConvLSTMCell(nn.Module):
    def __init__(self, in_ch: int, hidden: int, kernel: int = 3):
        super().__init__()
        self.hidden = hidden
        self.conv = nn.Conv2d(in_ch + hidden, 4 * hidden, kernel, padding=kernel // 2)

    def zero_state(self, x: torch.Tensor) -> LSTMState:
        z = x.new_zeros(x.shape[0], self.hidden, x.shape[2], x.shape[3])
        return z, z

    def forward(self, x: torch.Tensor, state: Optional[LSTMState] = None) -> LSTMState:
        if state is None:
            state = self.zero_state(x)
        return convlstm_cell(x, state, self.conv.weight, self.conv.bias)


class ConvBlock(nn.Module):
    def __init__(self, in_ch: int, out_ch: int, stride: int = 1):
        super().__init__()
        self.conv = nn.Conv2d(in_ch, out_ch, 3, stride=stride, padding=1)
        self.norm = AlignedNorm(out_ch)

    def forward(self, x):
        return F.relu(self.norm(self.conv(x)))


class Encoder(nn.Module):
    def __init__(self, in_ch: int, widths):
        super().__init__()
        blocks, prev = [], in_ch
        for w in widths:
            blocks.append(ConvBlock(prev, w, stride=2))
            prev = w
        self.blocks = nn.ModuleList(blocks)

    def forward(self, x) -> List[torch.Tensor]:
        feats = []
        for b in self.blocks:
            x = b(x)
            feats.append(x)
        return feats


def _run_lstm(cell: ConvLSTMCell, seq: torch.Tensor, enabled: bool, state: Optional[LSTMState] = None):
    """Run ``cell`` over ``seq`` (B, T, C, h, w); returns outputs and final state."""
    outs = []
    for k in range(seq.shape[1]):
        x = seq[:, k]
        if not enabled or state is None:
            state = cell.zero_state(x)
        state = cell(x, state)
        outs.append(state[0])
    return torch.stack(outs, dim=1), state


class DepthNet(nn.Module):
    def __init__(self, cfg: ArchitectureConfig):
        super().__init__()
        w = cfg.widths
        self.encoder = Encoder(3, w)
        self.lstm = ConvLSTMCell(w[-1], w[-1], cfg.lstm_kernel)
        dec = []
        for k in range(len(w) - 1, 0, -1):
            dec.append(ConvBlock(w[k] + w[k - 1], w[k - 1]))
        self.decoder = nn.ModuleList(dec)
        self.out = nn.Conv2d(w[0], 1, 3, padding=1)

    def _decode(self, h, skips):
        x = h
        for block, skip in zip(self.decoder, reversed(skips[:-1])):
            x = F.interpolate(x, scale_factor=2, mode="nearest")
            x = block(torch.cat([x, skip], dim=1))
        # logits are predicted at half resolution and upsampled
        logits = F.interpolate(self.out(x), scale_factor=2, mode="bilinear", align_corners=False)
        return depth_from_logits(logits[:, 0])

    def forward(self, frame, state: Optional[LSTMState] = None, lstm: bool = True):
        """Depth ``(B, H, W)`` for one frame plus the advanced recurrent state."""
        feats = self.encoder(frame)
        new_state = self.lstm(feats[-1], state if lstm else None)
        return self._decode(new_state[0], feats), new_state

    def forward_sequence(self, frames, lstm: bool = True):
        """Depths ``(B, N, H, W)`` for a window; state starts from zero."""
        B, N = frames.shape[:2]
        feats = self.encoder(frames.flatten(0, 1))
        bott = feats[-1].unflatten(0, (B, N))
        hs, _ = _run_lstm(self.lstm, bott, lstm)
        return self._decode(hs.flatten(0, 1), feats).unflatten(0, (B, N))


class PoseHead(nn.Module):
    def __init__(self, in_ch: int, hidden, zero_init: bool):
        super().__init__()
        layers, norms, prev = [], [], in_ch
        for h in hidden:
            layers.append(nn.Linear(prev, h))
            norms.append(AlignedNorm(h))
            prev = h
        self.layers = nn.ModuleList(layers)
        self.norms = nn.ModuleList(norms)
        self.out = nn.Linear(prev, 3)
        if zero_init:
            nn.init.zeros_(self.out.weight)
            nn.init.zeros_(self.out.bias)

    def forward(self, x):
        for lin, norm in zip(self.layers, self.norms):
            x = F.relu(norm(lin(x)))
        return self.out(x)


def _pose_input(I_prev, I_cur, D_prev, D_cur):
    scale = lambda d: (d / d.flatten(1).mean(dim=1).view(-1, 1, 1)).unsqueeze(1)
    return torch.cat([I_prev, I_cur, scale(D_prev), scale(D_cur)], dim=1)


class PoseNet(nn.Module):
    def __init__(self, cfg: ArchitectureConfig):
        super().__init__()
        w = cfg.widths
        self.cfg = cfg
        self.encoder = Encoder(8, w)
        self.lstm = ConvLSTMCell(w[-1], w[-1], cfg.lstm_kernel)
        self.rot_head = PoseHead(w[-1], cfg.pose_hidden, cfg.zero_init_heads)
        self.trans_head = PoseHead(w[-1], cfg.pose_hidden, cfg.zero_init_heads)

    def _heads(self, h):
        g = h.mean(dim=(-2, -1))
        return self.cfg.rot_scale * self.rot_head(g), self.cfg.trans_scale * self.trans_head(g)

    def forward(self, I_prev, I_cur, D_prev, D_cur, state: Optional[LSTMState] = None, lstm: bool = True):
        """Euler angles ``(B, 3)``, translation ``(B, 3)`` and the advanced state."""
        feats = self.encoder(_pose_input(I_prev, I_cur, D_prev, D_cur))
        new_state = self.lstm(feats[-1], state if lstm else None)
        euler, trans = self._heads(new_state[0])
        return euler, trans, new_state

    def forward_sequence(self, frames, depths, lstm: bool = True):
        """Relative poses ``(B, N-1, 3)`` x2 for consecutive pairs of a window."""
        B, N = frames.shape[:2]
        x = _pose_input(
            frames[:, :-1].flatten(0, 1), frames[:, 1:].flatten(0, 1),
            depths[:, :-1].flatten(0, 1), depths[:, 1:].flatten(0, 1),
        )
        bott = self.encoder(x)[-1].unflatten(0, (B, N - 1))
        hs, _ = _run_lstm(self.lstm, bott, lstm)
        euler, trans = self._heads(hs.flatten(0, 1))
        return euler.unflatten(0, (B, N - 1)), trans.unflatten(0, (B, N - 1))


class MaskNet(nn.Module):
    def __init__(self, cfg: ArchitectureConfig):
        super().__init__()
        m = cfg.mask_width
        self.block1 = ConvBlock(1, m)
        self.block2 = ConvBlock(m, m)
        self.out = nn.Conv2d(m, 1, 3, padding=1)
        if cfg.zero_init_heads:
            nn.init.zeros_(self.out.weight)
            nn.init.zeros_(self.out.bias)

    def forward(self, residual):
        """Mask ``(B, H, W)`` in [0, 1] from a ``(B, 1, H, W)`` residual map.

        Runs at half resolution; logits are upsampled before the sigmoid.
        """
        x = self.block2(self.block1(F.avg_pool2d(residual, 2)))
        logits = F.interpolate(self.out(x), scale_factor=2, mode="bilinear", align_corners=False)
        return torch.sigmoid(logits[:, 0])


class WindowResult(NamedTuple):
    loss: torch.Tensor  # mean total loss over pairs and batch
    photometric: torch.Tensor  # unmasked photometric error, same averaging
    degenerate: torch.Tensor  # (B, N-1) bool
    euler: torch.Tensor  # (B, N-1, 3)
    translation: torch.Tensor  # (B, N-1, 3)
    depths: torch.Tensor  # (B, N, H, W)
    masks: torch.Tensor  # (B, N-1, H, W)


class VONet(nn.Module):
    """Joint depth/pose/mask model operating on sliding windows.

    ``lstm_enabled`` switches the recurrent memory off (state zeroed at every
    step); ``aligner`` controls how normalisation statistics are obtained.
    """

    def __init__(self, cfg: ArchitectureConfig):
        super().__init__()
        self.cfg = cfg
        self.depth_net = DepthNet(cfg)
        self.pose_net = PoseNet(cfg)
        self.mask_net = MaskNet(cfg)
        self.lstm_enabled = True
        self.aligner = FeatureAligner()
        for name, mod in self.named_modules():
            if isinstance(mod, AlignedNorm):
                mod.layer_name = name
                mod.aligner = self.aligner

    def norm_layer_names(self) -> List[str]:
        return [n for n, m in self.named_modules() if isinstance(m, AlignedNorm)]

    def forward(self, window: torch.Tensor, K: Intrinsics, weights: LossWeights = LossWeights()) -> WindowResult:
        """Run a whole window ``(B, N, 3, H, W)`` (oldest frame first)."""
        B, N = window.shape[:2]
        if N < 2:
            raise DomainError("a window needs at least two frames")
        depths = self.depth_net.forward_sequence(window, self.lstm_enabled)
        euler, trans = self.pose_net.forward_sequence(window, depths, self.lstm_enabled)
        src = window[:, :-1].flatten(0, 1)
        tgt = window[:, 1:].flatten(0, 1)
        d_t = depths[:, 1:].flatten(0, 1)
        e = euler.flatten(0, 1)
        R = euler_to_rotation(e[:, 0], e[:, 1], e[:, 2])
        I_hat, valid = synthesize_view(src, d_t, (R, trans.flatten(0, 1)), K)
        residual = (I_hat - tgt).abs().mean(dim=1, keepdim=True)
        masks = self.mask_net(residual)
        loss = total_loss(I_hat, tgt, masks, valid, d_t, weights)
        photo = photometric_error(I_hat, tgt, valid, weights)
        return WindowResult(
            loss, photo, degenerate(valid).unflatten(0, (B, N - 1)), euler, trans,
            depths, masks.unflatten(0, (B, N - 1)),
        )


@dataclass
class RecurrentState:
    """Per-window recurrent memory of the depth and pose encoders."""

    window_length: int
    depth: Optional[LSTMState] = None
    pose: Optional[LSTMState] = None
    index: int = 0

    def advance(self) -> None:
        if self.index >= self.window_length:
            raise DomainError(f"window of length {self.window_length} exhausted; reset the state")
        self.index += 1


def reset_state(window_length: int) -> RecurrentState:
    """Fresh state for the start of a window: no memory, index 0."""
    if window_length < 2:
        raise DomainError("window length must be at least 2")
    return RecurrentState(window_length)


def depth_forward(model: VONet, frame: torch.Tensor, state: RecurrentState):
    """Depth for one frame, advancing the depth memory of ``state`` in place."""
    state.advance()
    depth, state.depth = model.depth_net(frame, state.depth, model.lstm_enabled)
    if not model.lstm_enabled:
        state.depth = None
    return depth, state


def pose_forward(model: VONet, I_prev, I_cur, D_prev, D_cur, state: RecurrentState):
    """Relative pose of the newest pair, advancing the pose memory of ``state``."""
    euler, trans, state.pose = model.pose_net(I_prev, I_cur, D_prev, D_cur, state.pose, model.lstm_enabled)
    if not model.lstm_enabled:
        state.pose = None
    return euler, trans, state


def mask_forward(model: VONet, residual: torch.Tensor) -> torch.Tensor:
    if (residual < 0).any():
        raise DomainError("residual map must be nonnegative")
    return model.mask_net(residual)


def count_parameters(model: nn.Module) -> int:
    return sum(p.numel() for p in model.parameters())


def build_model(cfg: ArchitectureConfig, seed: Optional[int] = None, dtype=torch.float32) -> VONet:
    if seed is not None:
        torch.manual_seed(seed)
    return VONet(cfg).to(dtype)


def save_checkpoint(path, model: VONet, source_stats: Optional[FeatureStats], extra: Optional[dict] = None) -> None:
    """Write one archive with parameters, architecture, source statistics and version."""
    payload = {
        "format_version": CHECKPOINT_VERSION,
        "arch": asdict(model.cfg),
        "params": {k: v.detach().clone() for k, v in model.state_dict().items()},
        "source_stats": None if source_stats is None else source_stats.to_state(),
        "extra": extra or {},
    }
    buf = io.BytesIO()
    torch.save(payload, buf)
    Path(path).write_bytes(buf.getvalue())


def load_checkpoint(path, expected: Optional[ArchitectureConfig] = None):
    """Load ``(model, source_stats, extra)``; raises DomainError listing any mismatch."""
    payload = torch.load(path, map_location="cpu", weights_only=False)
    version = payload.get("format_version")
    if version != CHECKPOINT_VERSION:
        raise DomainError(f"checkpoint format version {version}, expected {CHECKPOINT_VERSION}")
    cfg = ArchitectureConfig(**payload["arch"])
    if expected is not None and expected != cfg:
        diffs = [
            f"{k}: checkpoint={v!r} config={getattr(expected, k)!r}"
            for k, v in asdict(cfg).items() if getattr(expected, k) != v
        ]
        raise DomainError("architecture mismatch:\n  " + "\n  ".join(diffs))
    params = payload["params"]
    dtype = next(iter(params.values())).dtype
    model = VONet(cfg).to(dtype)
    own = model.state_dict()
    shape_diffs = [
        f"{k}: checkpoint={tuple(params[k].shape) if k in params else None} model={tuple(v.shape)}"
        for k, v in own.items() if k not in params or params[k].shape != v.shape
    ]
    if shape_diffs:
        raise DomainError("parameter shape mismatch:\n  " + "\n  ".join(shape_diffs))
    model.load_state_dict(params)
    stats = payload.get("source_stats")
    return model, (None if stats is None else FeatureStats.from_state(stats)), payload.get("extra", {})
