import math

import pytest
import torch

from metavo.errors import DomainError
from metavo.feature_alignment import FeatureStats, LayerStats
from metavo.geometry import Intrinsics
from metavo.networks import (
    ArchitectureConfig,
    build_model,
    convlstm_cell,
    count_parameters,
    depth_forward,
    load_checkpoint,
    mask_forward,
    pose_forward,
    reset_state,
    save_checkpoint,
)

D = torch.float64
CFG = ArchitectureConfig.tiny(16, 32)
K = Intrinsics(20.0, 20.0, 15.5, 7.5, 32, 16)


def frames(n, seed=0):
    return torch.rand(1, n, 3, 16, 32, dtype=D, generator=torch.Generator().manual_seed(seed))


@pytest.fixture
def model():
    return build_model(CFG, seed=0, dtype=D)


def ref_cell(x, h, c, w, b):
    """Scalar-loop convolutional LSTM for 1 input and 1 hidden channel."""
    H, W = len(x), len(x[0])
    k = len(w[0][0]) // 2
    z = [[[0.0] * W for _ in range(H)] for _ in range(4)]
    for g in range(4):
        for y in range(H):
            for xx in range(W):
                s = b[g]
                for ch, src in enumerate((x, h)):
                    for dy in range(-k, k + 1):
                        for dx in range(-k, k + 1):
                            yy, xs = y + dy, xx + dx
                            if 0 <= yy < H and 0 <= xs < W:
                                s += w[g][ch][dy + k][dx + k] * src[yy][xs]
                z[g][y][xx] = s
    sig = lambda v: 1 / (1 + math.exp(-v))
    h2 = [[0.0] * W for _ in range(H)]
    c2 = [[0.0] * W for _ in range(H)]
    for y in range(H):
        for xx in range(W):
            i, f, o, gg = sig(z[0][y][xx]), sig(z[1][y][xx]), sig(z[2][y][xx]), math.tanh(z[3][y][xx])
            c2[y][xx] = f * c[y][xx] + i * gg
            h2[y][xx] = o * math.tanh(c2[y][xx])
    return h2, c2


class TestConvLSTM:
    def test_zero_weights(self):
        x = torch.randn(1, 2, 4, 4, dtype=D)
        h = torch.randn(1, 3, 4, 4, dtype=D)
        w = torch.zeros(12, 5, 3, 3, dtype=D)
        # zero c: f*c + i*tanh(0) = 0
        h2, c2 = convlstm_cell(x, (h, torch.zeros_like(h)), w, torch.zeros(12, dtype=D))
        assert bool((h2 == 0).all()) and bool((c2 == 0).all())

    def test_gate_saturation(self):
        g = torch.Generator().manual_seed(1)
        x = torch.randn(1, 2, 4, 4, dtype=D, generator=g)
        h, c = torch.randn(1, 3, 4, 4, dtype=D, generator=g), torch.randn(1, 3, 4, 4, dtype=D, generator=g)
        w = torch.zeros(12, 5, 3, 3, dtype=D)
        b = torch.zeros(12, dtype=D)
        b[0:3] = -1e4  # input gate closed
        b[3:6] = 1e4  # forget gate open
        _, c2 = convlstm_cell(x, (h, c), w, b)
        assert torch.equal(c2, c)

    def test_scalar_loop_oracle(self):
        g = torch.Generator().manual_seed(2)
        x, h, c = (torch.randn(1, 1, 4, 4, dtype=D, generator=g) for _ in range(3))
        w = torch.randn(4, 2, 3, 3, dtype=D, generator=g)
        b = torch.randn(4, dtype=D, generator=g)
        h2, c2 = convlstm_cell(x, (h, c), w, b)
        rh, rc = ref_cell(x[0, 0].tolist(), h[0, 0].tolist(), c[0, 0].tolist(), w.tolist(), b.tolist())
        assert (h2[0, 0] - torch.tensor(rh, dtype=D)).abs().max().item() < 1e-6
        assert (c2[0, 0] - torch.tensor(rc, dtype=D)).abs().max().item() < 1e-6

    def test_shape_mismatch(self):
        x = torch.randn(1, 2, 4, 4)
        h = torch.zeros(1, 3, 5, 5)
        with pytest.raises(DomainError):
            convlstm_cell(x, (h, h), torch.zeros(12, 5, 3, 3), torch.zeros(12))
        with pytest.raises(DomainError):
            convlstm_cell(x, (torch.zeros(1, 3, 4, 4),) * 2, torch.zeros(12, 4, 3, 3), torch.zeros(12))


class TestArchitecture:
    def test_invalid(self):
        with pytest.raises(DomainError):
            ArchitectureConfig(widths=(16, 32))
        with pytest.raises(DomainError):
            ArchitectureConfig(widths=(16, 0, 32))
        with pytest.raises(DomainError):
            ArchitectureConfig.tiny(30, 32)

    def test_norm_gammas_positive(self, model):
        gammas = [p for n, p in model.named_parameters() if n.endswith("gamma")]
        assert gammas and all(bool((g > 0).all()) for g in gammas)
        assert all(bool(torch.isfinite(p).all()) for p in model.parameters())
        assert count_parameters(model) > 0


class TestForward:
    def test_depth_range(self, model):
        for scale in (1.0, 1e3, -1e3):
            d, _ = depth_forward(model, frames(1)[:, 0] * scale, reset_state(3))
            assert bool((d > 0.1).all()) and bool((d < 100).all())

    def test_statefulness(self, model):
        x = frames(1)[:, 0]
        s = reset_state(3)
        d1, s = depth_forward(model, x, s)
        h1 = s.depth[0].clone()
        d2, s = depth_forward(model, x, s)
        assert not torch.equal(s.depth[0], h1) and not torch.equal(d1, d2)
        assert s.index == 2

    def test_index_never_exceeds_window(self, model):
        x = frames(1)[:, 0]
        s = reset_state(2)
        depth_forward(model, x, s)
        depth_forward(model, x, s)
        with pytest.raises(DomainError):
            depth_forward(model, x, s)

    def test_reset(self, model):
        s = reset_state(4)
        assert s.index == 0 and s.depth is None and s.pose is None
        win = frames(4, seed=3)[0]
        first = [depth_forward(model, win[k:k + 1], s)[0] for k in range(4)]
        s = reset_state(4)
        again = [depth_forward(model, win[k:k + 1], s)[0] for k in range(4)]
        fresh = build_model(CFG, seed=0, dtype=D)
        s = reset_state(4)
        other = [depth_forward(fresh, win[k:k + 1], s)[0] for k in range(4)]
        assert all(torch.equal(a, b) and torch.equal(a, c) for a, b, c in zip(first, again, other))

    def test_sequence_matches_stepwise(self, model):
        win = frames(4, seed=4)
        seq = model.depth_net.forward_sequence(win)
        s = reset_state(4)
        for k in range(4):
            d, s = depth_forward(model, win[:, k], s)
            torch.testing.assert_close(d, seq[:, k], rtol=1e-10, atol=1e-12)

    def test_window_length_does_not_change_cell(self, model):
        # a longer window only delays the reset; the shared prefix is identical
        short = model(frames(3, seed=5), K)
        long = model(frames(6, seed=5)[:, :3], K)
        assert torch.equal(short.depths, long.depths)
        w6 = frames(6, seed=5)
        res6 = model(w6, K)
        torch.testing.assert_close(res6.depths[:, :3], short.depths, rtol=1e-10, atol=1e-12)

    def test_zero_init_heads(self, model):
        win = frames(2, seed=6)
        d = model.depth_net.forward_sequence(win)
        e, t, _ = pose_forward(model, win[:, 0], win[:, 1], d[:, 0], d[:, 1], reset_state(2))
        assert bool((e == 0).all()) and bool((t == 0).all())
        m = mask_forward(model, torch.rand(1, 1, 16, 32, dtype=D))
        assert bool((m == 0.5).all())

    def test_mask_range(self):
        m = build_model(ArchitectureConfig.tiny(16, 32, zero_init_heads=False), seed=1, dtype=D)
        out = mask_forward(m, 100 * torch.rand(2, 1, 16, 32, dtype=D))
        assert bool((out >= 0).all()) and bool((out <= 1).all())
        with pytest.raises(DomainError):
            mask_forward(m, -torch.ones(1, 1, 16, 32, dtype=D))

    def test_lstm_disabled_resets_every_step(self, model):
        model.lstm_enabled = False
        win = frames(1)[:, 0]
        s = reset_state(3)
        d1, s = depth_forward(model, win, s)
        d2, s = depth_forward(model, win, s)
        assert torch.equal(d1, d2)

    def test_determinism(self):
        a = build_model(CFG, seed=7)(frames(3).float(), K)
        b = build_model(CFG, seed=7)(frames(3).float(), K)
        assert torch.equal(a.loss, b.loss) and torch.equal(a.depths, b.depths)


def _textured_window(n=3):
    from metavo.synthetic import SyntheticSceneConfig, generate_synthetic, motion_script

    ds = generate_synthetic(SyntheticSceneConfig(motion=motion_script("lateral", n - 1, seed=0), height=16, width=32))
    return ds.tensor(0, n, D)[None], ds.K


class TestGradientAudit:
    def _audit(self, model, win, K):
        model.zero_grad()
        model(win, K).loss.backward()
        return [n for n, p in model.named_parameters() if p.grad is None or p.grad.abs().max().item() == 0]

    def test_every_parameter_receives_gradient(self):
        win, K = _textured_window()
        m = build_model(ArchitectureConfig.tiny(16, 32, zero_init_heads=False), seed=0, dtype=D)
        assert self._audit(m, win, K) == []

    def test_zero_heads_come_alive_after_one_step(self):
        win, K = _textured_window()
        m = build_model(CFG, seed=0, dtype=D)
        m(win, K).loss.backward()
        head = m.pose_net.trans_head.out.weight
        assert head.grad.abs().max().item() > 0
        with torch.no_grad():
            for p in m.parameters():
                if p.grad is not None:
                    p -= 1e-2 * p.grad
        assert self._audit(m, win, K) == []


class TestCheckpoint:
    def test_round_trip(self, tmp_path, model):
        stats = FeatureStats({n: LayerStats(0.1 * i, 1 + i) for i, n in enumerate(model.norm_layer_names())})
        save_checkpoint(tmp_path / "m.pt", model, stats, {"seed": 3})
        m2, s2, extra = load_checkpoint(tmp_path / "m.pt", CFG)
        assert s2 == stats and extra == {"seed": 3} and m2.cfg == CFG
        assert all(torch.equal(a, b) for a, b in zip(model.state_dict().values(), m2.state_dict().values()))
        assert next(m2.parameters()).dtype == D

    def test_architecture_mismatch_reports_diff(self, tmp_path, model):
        save_checkpoint(tmp_path / "m.pt", model, None)
        with pytest.raises(DomainError, match="widths"):
            load_checkpoint(tmp_path / "m.pt", ArchitectureConfig(widths=(8, 16, 32), height=16, width=32))

    def test_byte_identical(self, tmp_path):
        for name in ("a", "b"):
            save_checkpoint(tmp_path / name, build_model(CFG, seed=2), None, {"k": 1})
        assert (tmp_path / "a").read_bytes() == (tmp_path / "b").read_bytes()
