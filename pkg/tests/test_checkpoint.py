import pytest
import torch

import lbw.checkpoint as ck
import lbw.model as m


def tiny_cfg(**kw):
    base = dict(width=16, depth=2, heads=2, patch=4, chunk_len=2, frame_hw=(8, 8), cache_chunks=8)
    base.update(kw)
    return m.ModelConfig(**base)


def jitter(net, scale=0.05, seed=1):
    gen = torch.Generator().manual_seed(seed)
    with torch.no_grad():
        for p in net.parameters():
            p.add_(torch.randn(p.shape, generator=gen, dtype=p.dtype) * scale)
    return net


def fixed_batch(cfg, n_frames=4, seed=0):
    gen = torch.Generator().manual_seed(seed)
    h, w = cfg.frame_hw
    x = torch.randn(1, n_frames, 3, h, w, generator=gen)
    t = torch.rand(1, n_frames, generator=gen)
    a = torch.randn(1, n_frames, m.ACTION_DIM, generator=gen) * 0.1
    p = torch.randn(1, n_frames, 6, h, w, generator=gen) * 0.3
    return x, t, a, p


class TestRoundTrip:
    def test_student_outputs_survive_save_load(self, tmp_path):
        cfg = tiny_cfg()
        net = jitter(m.WorldModel(cfg), seed=3)
        path = tmp_path / "student.lbwc"
        ck.save_checkpoint(path, net, "student", cfg, step=17, extra={"note": "rt"})
        loaded, meta = ck.load_module(path, expect_kind="student")
        x, t, a, p = fixed_batch(cfg)
        with torch.no_grad():
            want = net(x, t, a, p, causal=True)
            got = loaded(x, t, a, p, causal=True)
        assert torch.equal(want, got)
        assert meta["step"] == 17
        assert meta["extra"] == {"note": "rt"}

    def test_teacher_rebuilds_both_experts(self, tmp_path):
        cfg = tiny_cfg()
        net = jitter(m.TwoExpertModel(cfg), seed=4)
        path = tmp_path / "teacher.lbwc"
        ck.save_checkpoint(path, net, "teacher", cfg)
        loaded, _ = ck.load_module(path, expect_kind="teacher")
        x, t, a, p = fixed_batch(cfg)
        with torch.no_grad():
            for t_val in (0.2, 0.8):
                tt = torch.full_like(t, t_val)
                assert torch.equal(net(x, tt, a, p), loaded(x, tt, a, p))

    def test_params_round_trip_bit_exact(self, tmp_path):
        net = jitter(m.WorldModel(tiny_cfg()), seed=5)
        path = tmp_path / "s.lbwc"
        ck.save_checkpoint(path, net, "student", tiny_cfg())
        state = ck.load_checkpoint(path)["state_dict"]
        for name, tensor in net.state_dict().items():
            assert torch.equal(state[name], tensor), name

    def test_config_dict_survives(self, tmp_path):
        cfg = tiny_cfg(width=32, heads=4)
        net = m.WorldModel(cfg)
        path = tmp_path / "s.lbwc"
        ck.save_checkpoint(path, net, "student", cfg)
        got = ck.load_checkpoint(path)["config"]
        assert m.ModelConfig.from_dict(got) == cfg


class TestFormatErrors:
    def make(self, tmp_path):
        cfg = tiny_cfg()
        path = tmp_path / "c.lbwc"
        ck.save_checkpoint(path, m.WorldModel(cfg), "student", cfg)
        return path

    def test_bad_magic(self, tmp_path):
        path = self.make(tmp_path)
        raw = bytearray(path.read_bytes())
        raw[:4] = b"NOPE"
        path.write_bytes(bytes(raw))
        with pytest.raises(ck.CheckpointFormatError):
            ck.load_checkpoint(path)

    def test_future_version_rejected(self, tmp_path):
        path = self.make(tmp_path)
        raw = bytearray(path.read_bytes())
        raw[4] = ck.VERSION + 1
        path.write_bytes(bytes(raw))
        with pytest.raises(ck.CheckpointVersionError):
            ck.load_checkpoint(path)

    def test_truncated_file(self, tmp_path):
        path = self.make(tmp_path)
        raw = path.read_bytes()
        path.write_bytes(raw[: len(raw) // 2])
        with pytest.raises(ck.CheckpointFormatError):
            ck.load_checkpoint(path)

    def test_trailing_bytes(self, tmp_path):
        path = self.make(tmp_path)
        path.write_bytes(path.read_bytes() + b"\x00\x00")
        with pytest.raises(ck.CheckpointFormatError):
            ck.load_checkpoint(path)

    def test_expect_kind_mismatch(self, tmp_path):
        path = self.make(tmp_path)
        with pytest.raises(ck.CheckpointFormatError, match="expected a teacher"):
            ck.load_module(path, expect_kind="teacher")

    def test_unknown_kind(self, tmp_path):
        cfg = tiny_cfg()
        path = tmp_path / "k.lbwc"
        ck.save_checkpoint(path, m.WorldModel(cfg), "mystery", cfg)
        with pytest.raises(ck.CheckpointFormatError, match="unknown"):
            ck.load_module(path)

    def test_errors_share_a_base_class(self):
        assert issubclass(ck.CheckpointFormatError, ck.CheckpointError)
        assert issubclass(ck.CheckpointVersionError, ck.CheckpointError)
