import copy

import pytest
import torch
from audit import audit_setup, jitter, tiny_config, total_loss

from sddit.config import parse_config
from sddit.data import ArrayDataset, two_texture
from sddit.edm import precondition_coeffs
from sddit.masking import sample_mask
from sddit.training import (
    CheckpointError,
    NonFiniteLossError,
    ViewPair,
    build_views,
    denoising_mse,
    generative_loss,
    init_state,
    load_checkpoint,
    make_rngs,
    read_metrics,
    run_training,
    save_checkpoint,
    train_step,
)

METRIC_FIELDS = {"step", "L_G", "L_D_cls", "L_D_patch", "beta", "tau_t", "teacher_entropy", "grad_norm", "wallclock"}


def small_config(**extra):
    return tiny_config(**{"dataset.n_per_class": 6, "total_steps": 10, **extra})


def small_data(cfg):
    return two_texture(cfg.dataset.n_per_class, cfg.seed, cfg.model.input_size, cfg.dataset.noise_std)


def strip_wallclock(log):
    return [{k: v for k, v in r.items() if k != "wallclock"} for r in log]


def tensors_equal(a: dict, b: dict) -> bool:
    return a.keys() == b.keys() and all(torch.equal(a[k], b[k]) for k in a)


class TestBuildViews:
    def test_teacher_noise_is_sigma_min(self):
        cfg = parse_config(None, {"batch_size": 64})
        x0 = torch.zeros(64, 1, 8, 8, dtype=torch.float64)
        views = build_views(x0, torch.zeros(64, dtype=torch.long), cfg, make_rngs(0))
        assert torch.all(views.sigma_t == 0.002)
        assert float((views.teacher_view - x0).std()) == pytest.approx(0.002, rel=0.05)

    def test_exact_invisible_count(self):
        cfg = parse_config(None, {"model.input_size": 20, "mask_ratio": 0.2})
        views = build_views(torch.zeros(2, 1, 20, 20), torch.zeros(2, dtype=torch.long), cfg, make_rngs(0))
        assert views.mask.bits.shape == (2, 100)
        assert views.mask.bits.sum(-1).tolist() == [20, 20]

    def test_same_seed_identical(self):
        cfg = parse_config(None)
        x0 = torch.randn(4, 1, 8, 8)
        labels = torch.tensor([0, 1, 0, 1])
        a = build_views(x0, labels, cfg, make_rngs(3))
        b = build_views(x0, labels, cfg, make_rngs(3))
        for field in ("student_view", "teacher_view", "sigma_s", "sigma_t"):
            assert torch.equal(getattr(a, field), getattr(b, field))
        assert torch.equal(a.mask.bits, b.mask.bits)

    def test_fixed_value_and_same_as_student(self):
        x0 = torch.zeros(8, 1, 8, 8)
        labels = torch.zeros(8, dtype=torch.long)
        fixed = build_views(x0, labels, parse_config(None, {"teacher_sigma_mode": 0.5}), make_rngs(0))
        assert torch.all(fixed.sigma_t == 0.5)
        same = build_views(x0, labels, parse_config(None, {"teacher_sigma_mode": "same_as_student"}), make_rngs(0))
        assert len(set(same.sigma_t.tolist())) == 8
        assert not torch.equal(same.sigma_t, same.sigma_s)


class TestGenerativeLoss:
    x0 = torch.linspace(-1, 1, 32, dtype=torch.float64).reshape(2, 1, 4, 4)

    def test_perfect_denoiser(self):
        assert float(denoising_mse(self.x0.clone(), self.x0)) == 0.0

    def test_zero_denoiser(self):
        assert float(denoising_mse(torch.zeros_like(self.x0), self.x0)) == pytest.approx(float((self.x0**2).mean()))

    def test_weighting_flag(self):
        sigma = torch.tensor([0.5, 0.5], dtype=torch.float64)
        cfg = parse_config(None)
        plain = denoising_mse(torch.zeros_like(self.x0), self.x0)
        weighted = denoising_mse(torch.zeros_like(self.x0), self.x0, sigma, cfg.noise, weighting=True)
        # lambda(sigma_data) = 2 / sigma_data^2 = 8
        assert float(weighted) == pytest.approx(8 * float(plain), rel=1e-12)

    @pytest.mark.parametrize("ratio", [0.0, 0.5])
    @torch.no_grad()
    def test_mean_over_all_patches(self, ratio):
        state, views = audit_setup(0)
        g = torch.Generator().manual_seed(9)
        mask = sample_mask(4, ratio, g, batch=views.x0.shape[0])
        views = ViewPair(**{**views.__dict__, "mask": mask})
        loss, _ = generative_loss(state.student, views, state.config.noise)
        c = precondition_coeffs(views.sigma_s, state.config.noise)
        shape = (-1, 1, 1, 1)
        f, _ = state.student(c.c_in.reshape(shape) * views.student_view, c.c_noise, views.labels, mask)
        denoised = c.c_skip.reshape(shape) * views.student_view + c.c_out.reshape(shape) * f
        assert f.shape == views.x0.shape
        assert float(loss) == pytest.approx(float(((denoised - views.x0) ** 2).mean()), rel=1e-14)

    @torch.no_grad()
    def test_mask_only_changes_encoder_input(self):
        state, views = audit_setup(0)
        full = sample_mask(4, 0.0, torch.Generator(), batch=3)
        half = sample_mask(4, 0.5, torch.Generator().manual_seed(1), batch=3)
        l_full, enc_full = generative_loss(state.student, ViewPair(**{**views.__dict__, "mask": full}), state.config.noise)
        l_half, enc_half = generative_loss(state.student, ViewPair(**{**views.__dict__, "mask": half}), state.config.noise)
        assert enc_full.shape[1] == 5 and enc_half.shape[1] == 3
        assert float(l_full) != float(l_half)


class TestDecoupling:
    def test_teacher_gets_no_gradient(self):
        state, views = audit_setup(1)
        for p in state.teacher.parameters():
            p.requires_grad_(True)
        loss, _ = total_loss(state, views)
        grads = torch.autograd.grad(loss, list(state.teacher.parameters()), allow_unused=True)
        assert all(g is None or torch.all(g == 0) for g in grads)

    def test_discrimination_loss_skips_decoder(self):
        state, views = audit_setup(1)
        _, out = total_loss(state, views)
        l_d = out["L_D_cls"] + out["L_D_patch"]
        dec = torch.autograd.grad(l_d, list(state.student.decoder.parameters()), allow_unused=True)
        assert all(g is None or torch.all(g == 0) for g in dec)
        enc = torch.autograd.grad(l_d, list(state.student.encoder.parameters()), allow_unused=True, retain_graph=True)
        assert any(g is not None and g.abs().max() > 0 for g in enc)


class TestTrainStep:
    def test_record_and_updates(self):
        cfg = small_config()
        state = init_state(cfg)
        teacher0 = copy.deepcopy(state.teacher.state_dict())
        batch = small_data(cfg).batch_at(0, cfg.batch_size)
        record = train_step(state, batch)
        assert set(record) == METRIC_FIELDS - {"wallclock"}
        assert record["step"] == 0 and state.step == 1
        assert record["beta"] == 0.996 and record["tau_t"] == 0.09
        assert record["teacher_entropy"] > 0
        assert not tensors_equal(teacher0, state.teacher.state_dict())
        assert state.centers.c_cls.abs().max() > 0

    def test_teacher_is_ema_of_student(self):
        cfg = small_config()
        state = init_state(cfg, dtype=torch.float64)
        jitter(state.teacher, 5)
        before = {n: p.clone() for n, p in state.teacher.named_parameters()}
        rec = train_step(state, small_data(cfg).batch_at(0, cfg.batch_size))
        student = dict(state.student.named_parameters())
        for n, p in state.teacher.named_parameters():
            expected = rec["beta"] * before[n] + (1 - rec["beta"]) * student[n]
            assert torch.allclose(p, expected, atol=1e-15), n

    def test_disable_discrimination(self):
        cfg = small_config(disable_L_D=True)
        state = init_state(cfg)
        teacher0 = copy.deepcopy(state.teacher.state_dict())
        data = small_data(cfg)
        records = [train_step(state, data.batch_at(i, cfg.batch_size)) for i in range(3)]
        assert all(r["L_D_cls"] == 0.0 and r["L_D_patch"] == 0.0 for r in records)
        assert all(r["teacher_entropy"] is None for r in records)
        # EMA keeps running without the discrimination loss
        assert not tensors_equal(teacher0, state.teacher.state_dict())

    def test_nan_aborts(self):
        cfg = small_config()
        state = init_state(cfg)
        with torch.no_grad():
            state.student.decoder.final.linear.bias.fill_(float("nan"))
        with pytest.raises(NonFiniteLossError, match="step 0"):
            train_step(state, small_data(cfg).batch_at(0, cfg.batch_size))


class TestRunTraining:
    def test_deterministic(self):
        cfg = small_config()
        a = run_training(cfg, small_data(cfg))
        b = run_training(cfg, small_data(cfg))
        assert len(a.log) == 10
        assert strip_wallclock(a.log) == strip_wallclock(b.log)

    def test_zero_steps(self, tmp_path):
        cfg = small_config(total_steps=0)
        state = run_training(cfg, small_data(cfg), out_dir=tmp_path)
        assert state.step == 0 and state.log == []
        assert read_metrics(tmp_path / "metrics.jsonl") == []

    def test_empty_dataset(self):
        with pytest.raises(ValueError):
            ArrayDataset(torch.zeros(0, 1, 4, 4), torch.zeros(0), ["a"])

    def test_outputs(self, tmp_path):
        cfg = small_config(total_steps=4, checkpoint_interval=2)
        run_training(cfg, small_data(cfg), out_dir=tmp_path)
        records = read_metrics(tmp_path / "metrics.jsonl")
        assert [r["step"] for r in records] == [0, 1, 2, 3]
        assert all(set(r) == METRIC_FIELDS for r in records)
        assert (tmp_path / "config.yaml").exists()
        names = sorted(p.name for p in (tmp_path / "checkpoints").iterdir())
        assert names == ["final.pt", "step_0000002.pt", "step_0000004.pt"]
        assert parse_config(tmp_path / "config.yaml") == cfg


class TestCheckpoint:
    def test_round_trip_fresh(self, tmp_path):
        state = init_state(small_config())
        save_checkpoint(state, tmp_path / "c.pt")
        back = load_checkpoint(tmp_path / "c.pt")
        assert tensors_equal(state.student.state_dict(), back.student.state_dict())
        assert tensors_equal(state.teacher.state_dict(), back.teacher.state_dict())
        assert back.step == 0 and back.config == state.config

    def test_round_trip_trained(self, tmp_path):
        cfg = small_config(total_steps=3)
        state = run_training(cfg, small_data(cfg))
        save_checkpoint(state, tmp_path / "c.pt")
        back = load_checkpoint(tmp_path / "c.pt")
        assert torch.equal(state.centers.c_cls, back.centers.c_cls)
        assert torch.equal(state.centers.c_patch, back.centers.c_patch)
        assert back.step == 3
        for name in state.rngs:
            assert torch.equal(state.rngs[name].get_state(), back.rngs[name].get_state())
        sa, sb = state.optimizer.state_dict()["state"], back.optimizer.state_dict()["state"]
        assert sa.keys() == sb.keys()
        for k in sa:
            assert tensors_equal(sa[k], sb[k])

    def test_resume_matches_straight_run(self, tmp_path):
        cfg = small_config(total_steps=8, checkpoint_interval=3)
        data = small_data(cfg)
        straight = run_training(cfg, data, out_dir=tmp_path / "a")
        resumed = run_training(cfg, data, resume=tmp_path / "a" / "checkpoints" / "step_0000003.pt")
        assert strip_wallclock(resumed.log) == strip_wallclock(straight.log[3:])
        assert tensors_equal(straight.student.state_dict(), resumed.student.state_dict())

    def test_corrupt_file(self, tmp_path):
        path = tmp_path / "bad.pt"
        path.write_bytes(b"not a checkpoint at all")
        with pytest.raises(CheckpointError):
            load_checkpoint(path)

    def test_foreign_payload(self, tmp_path):
        torch.save({"weights": torch.zeros(2)}, tmp_path / "x.pt")
        with pytest.raises(CheckpointError):
            load_checkpoint(tmp_path / "x.pt")

    def test_version_mismatch(self, tmp_path):
        save_checkpoint(init_state(small_config()), tmp_path / "c.pt")
        payload = torch.load(tmp_path / "c.pt", weights_only=True)
        payload["version"] = 99
        torch.save(payload, tmp_path / "c.pt")
        with pytest.raises(CheckpointError, match="version"):
            load_checkpoint(tmp_path / "c.pt")

    def test_manifest_mismatch(self, tmp_path):
        save_checkpoint(init_state(small_config()), tmp_path / "c.pt")
        payload = torch.load(tmp_path / "c.pt", weights_only=True)
        payload["manifest"][0][1] = [123]
        torch.save(payload, tmp_path / "c.pt")
        with pytest.raises(CheckpointError, match="manifest"):
            load_checkpoint(tmp_path / "c.pt")
