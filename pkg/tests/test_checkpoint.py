"""Binary checkpoint containers: blob layout, VAE and diffusion round trips."""

import json
import struct

import numpy as np
import pytest
import torch

from hsidiff.checkpoint import (
    LDM_MAGIC,
    VAE_MAGIC,
    load_blob,
    load_ldm_checkpoint,
    load_vae_checkpoint,
    save_blob,
    save_ldm_checkpoint,
    save_vae_checkpoint,
)
from hsidiff.denoiser import DenoiserConfig
from hsidiff.errors import FormatError
from hsidiff.training import TrainConfig, build_model, init_state, train_step
from hsidiff.vae import PatchDiscriminator, Vae, VaeConfig


class TestBlob:
    def sections(self):
        rng = np.random.default_rng(0)
        return [
            ("alpha", rng.normal(size=(2, 3)).astype(np.float32)),
            ("beta", rng.normal(size=(4,)).astype(np.float32)),
            ("gamma", np.float32(2.5).reshape(())),
        ]

    def test_round_trip(self, tmp_path):
        path = tmp_path / "blob.bin"
        config = {"a": 1, "b": [1, 2], "c": "text"}
        save_blob(path, b"TST1", config, self.sections())
        got_config, got_sections = load_blob(path, b"TST1")
        assert got_config == config
        for name, arr in self.sections():
            assert np.array_equal(got_sections[name], arr)
            assert got_sections[name].shape == arr.shape

    def test_resave_is_byte_identical(self, tmp_path):
        p1, p2 = tmp_path / "a.bin", tmp_path / "b.bin"
        save_blob(p1, b"TST1", {"k": 1}, self.sections())
        config, sections = load_blob(p1, b"TST1")
        save_blob(p2, b"TST1", config, [(n, sections[n]) for n, _ in self.sections()])
        assert p1.read_bytes() == p2.read_bytes()

    def test_magic_must_be_four_bytes(self, tmp_path):
        with pytest.raises(FormatError):
            save_blob(tmp_path / "x.bin", b"TOOLONG", {}, [])

    def test_wrong_magic_rejected(self, tmp_path):
        path = tmp_path / "blob.bin"
        save_blob(path, b"TST1", {}, self.sections())
        with pytest.raises(FormatError):
            load_blob(path, b"OTHR")

    def test_truncations_rejected(self, tmp_path):
        path = tmp_path / "blob.bin"
        save_blob(path, b"TST1", {}, self.sections())
        raw = path.read_bytes()

        short_header = tmp_path / "h.bin"
        (hlen,) = struct.unpack_from("<I", raw, 4)
        short_header.write_bytes(raw[: 8 + hlen - 2])
        with pytest.raises(FormatError):
            load_blob(short_header, b"TST1")

        short_payload = tmp_path / "p.bin"
        short_payload.write_bytes(raw[:-3])
        with pytest.raises(FormatError):
            load_blob(short_payload, b"TST1")

        trailing = tmp_path / "t.bin"
        trailing.write_bytes(raw + b"\x00\x00")
        with pytest.raises(FormatError):
            load_blob(trailing, b"TST1")

    def test_corrupt_header_rejected(self, tmp_path):
        path = tmp_path / "blob.bin"
        save_blob(path, b"TST1", {"k": 1}, [])
        raw = bytearray(path.read_bytes())
        raw[8] = ord("X")  # break the JSON header
        bad = tmp_path / "bad.bin"
        bad.write_bytes(bytes(raw))
        with pytest.raises(FormatError):
            load_blob(bad, b"TST1")


def perturb(module, seed):
    gen = torch.Generator().manual_seed(seed)
    with torch.no_grad():
        for p in module.parameters():
            p.add_(0.01 * torch.randn(p.shape, generator=gen))


class TestVaeCheckpoint:
    def test_round_trip(self, tmp_path):
        config = VaeConfig(in_channels=5, hidden=8, depth=2, seed=3)
        vae = Vae(config)
        disc = PatchDiscriminator(config.in_channels, config.hidden, seed=config.seed + 1)
        perturb(vae, 0)
        perturb(disc, 1)
        path = tmp_path / "vae.ckpt"
        save_vae_checkpoint(path, vae, disc, config)

        vae2, disc2, config2 = load_vae_checkpoint(path)
        assert config2 == config
        for (n1, t1), (n2, t2) in zip(
            vae.state_dict().items(), vae2.state_dict().items()
        ):
            assert n1 == n2 and torch.equal(t1, t2)
        for (n1, t1), (n2, t2) in zip(
            disc.state_dict().items(), disc2.state_dict().items()
        ):
            assert n1 == n2 and torch.equal(t1, t2)

        x = torch.randn(2, 5, 9, 9, generator=torch.Generator().manual_seed(7))
        with torch.no_grad():
            assert torch.equal(vae.encode(x).mu, vae2.encode(x).mu)

    def test_magic_mismatch(self, tmp_path):
        config = VaeConfig(in_channels=4, hidden=8, depth=2)
        vae = Vae(config)
        disc = PatchDiscriminator(4, 8, seed=1)
        path = tmp_path / "vae.ckpt"
        save_vae_checkpoint(path, vae, disc, config)
        raw = bytearray(path.read_bytes())
        raw[:4] = b"LDM1"
        path.write_bytes(bytes(raw))
        with pytest.raises(FormatError):
            load_vae_checkpoint(path)


class TestLdmCheckpoint:
    def make_trained_state(self):
        denoiser_cfg = DenoiserConfig(
            d_emb=8, blocks=1, heads=2, patch_side=3, total_steps=20
        )
        config = TrainConfig(
            epochs=1, batch_size=4, total_steps=20, seed=0, cond_drop_prob=0.5
        )
        model = build_model(6, denoiser_cfg, layers=1, seed=0)
        state = init_state(model, config)
        gen = torch.Generator().manual_seed(0)
        latents = torch.randn(4, 4, 3, 3, generator=gen)
        ids = torch.zeros(4, 77, dtype=torch.int64)
        ids[:, 0] = 1
        ids[:, 1] = 4
        ids[:, 2] = 2
        lengths = torch.full((4,), 3, dtype=torch.int64)
        for p in (0.1, 0.5):
            state = train_step(state, latents, ids, lengths, None, p)
        return state, config, denoiser_cfg

    def test_round_trip(self, tmp_path):
        state, config, denoiser_cfg = self.make_trained_state()
        shift = np.array([0.1, -0.2, 0.3, 0.0], dtype=np.float64)
        scale = np.array([1.0, 2.0, 0.5, 1.5], dtype=np.float64)
        path = tmp_path / "ldm.ckpt"
        save_ldm_checkpoint(
            path, state.model, state.ema_model, state.optimizer, config,
            denoiser_cfg, vocab_size=6, text_layers=1,
            latent_shift=shift, latent_scale=scale, epoch=7,
        )

        model2, ema2, config2, dcfg2, raw_config, sections = load_ldm_checkpoint(path)
        assert config2 == config
        assert dcfg2 == denoiser_cfg
        assert raw_config["epoch"] == 7
        assert raw_config["vocab_size"] == 6
        for t1, t2 in zip(state.model.state_dict().values(), model2.state_dict().values()):
            assert torch.equal(t1, t2)
        for t1, t2 in zip(state.ema_model.state_dict().values(), ema2.state_dict().values()):
            assert torch.equal(t1, t2)
        assert not any(p.requires_grad for p in ema2.parameters())
        assert np.allclose(sections["latent_shift"], shift.astype(np.float32))
        assert np.allclose(sections["latent_scale"], scale.astype(np.float32))
        opt_names = [n for n in sections if n.startswith("opt.")]
        assert opt_names, "optimizer state should be serialized"
        assert any(n.endswith(".exp_avg") for n in opt_names)
        assert any(n.endswith(".step") for n in opt_names)

    def test_optional_optimizer(self, tmp_path):
        state, config, denoiser_cfg = self.make_trained_state()
        path = tmp_path / "ldm.ckpt"
        save_ldm_checkpoint(
            path, state.model, state.ema_model, None, config, denoiser_cfg,
            vocab_size=6, text_layers=1,
            latent_shift=np.zeros(4), latent_scale=np.ones(4), epoch=0,
        )
        _, _, _, _, _, sections = load_ldm_checkpoint(path)
        assert not [n for n in sections if n.startswith("opt.")]

    def test_missing_section_rejected(self, tmp_path):
        state, config, denoiser_cfg = self.make_trained_state()
        path = tmp_path / "ldm.ckpt"
        save_ldm_checkpoint(
            path, state.model, state.ema_model, None, config, denoiser_cfg,
            vocab_size=6, text_layers=1,
            latent_shift=np.zeros(4), latent_scale=np.ones(4), epoch=0,
        )
        raw = path.read_bytes()
        (hlen,) = struct.unpack_from("<I", raw, 4)
        header = json.loads(raw[8 : 8 + hlen].decode("utf-8"))
        victim = next(s for s in header["sections"] if s["name"].startswith("ema."))
        victim["name"] = "ema.renamed_away"
        new_header = json.dumps(header, sort_keys=True).encode("utf-8")
        bad = tmp_path / "bad.ckpt"
        bad.write_bytes(raw[:4] + struct.pack("<I", len(new_header)) + new_header + raw[8 + hlen:])
        with pytest.raises(FormatError):
            load_ldm_checkpoint(bad)
